//! Blocking HTTP clients for every capability.
//!
//! Request bodies are serialized once and resent byte-for-byte on retry.
//! Rate limits (429), server errors (5xx), timeouts and connection failures
//! are retried with exponential backoff; other statuses fail immediately.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{self, *};
use super::{
    BackendError, BackendSet, Embedder, Endpoint, Locality, PairScorer, Remover, SegmentResult,
    Segmenter, TextReasoner, VisionReasoner,
};
use crate::prompts::PromptBundle;
use crate::raster::{Image, Mask};

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub api_key: Option<String>,
    pub max_in_flight: usize,
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            api_key: None,
            max_in_flight: 4,
        }
    }
}

/// Counting semaphore bounding concurrent in-flight requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct PermitGuard<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Shared connection pool, retry policy and concurrency bound.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    settings: HttpSettings,
    permits: Permits,
}

impl HttpTransport {
    pub fn new(settings: HttpSettings) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            permits: Permits::new(settings.max_in_flight),
            settings,
        })
    }

    pub fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        url: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let bytes = serde_json::to_vec(body)
            .map_err(|e| BackendError::InvalidResponse(format!("encode request: {e}")))?;
        let text = self.post_bytes(url, bytes)?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidResponse(format!("decode response from {url}: {e}")))
    }

    fn post_bytes(&self, url: &str, body: Vec<u8>) -> Result<String, BackendError> {
        let _permit = self.permits.acquire();
        let mut attempt = 0u32;
        loop {
            let mut req = self
                .client
                .post(url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.clone());
            if let Some(key) = &self.settings.api_key {
                req = req.bearer_auth(key);
            }
            let retryable = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .text()
                            .map_err(|e| BackendError::Transport(e.to_string()));
                    }
                    let body = resp.text().unwrap_or_default();
                    let err = if status.as_u16() == 429 {
                        BackendError::RateLimited {
                            attempts: attempt + 1,
                        }
                    } else {
                        BackendError::Http {
                            status: status.as_u16(),
                            body,
                        }
                    };
                    if status.as_u16() == 429 || status.is_server_error() {
                        err
                    } else {
                        return Err(err);
                    }
                }
                Err(e) if e.is_timeout() => BackendError::Timeout(self.settings.timeout),
                Err(e) => BackendError::Transport(e.to_string()),
            };
            if attempt >= self.settings.max_retries {
                return Err(retryable);
            }
            std::thread::sleep(self.settings.backoff_base * 2u32.saturating_pow(attempt));
            attempt += 1;
        }
    }
}

fn join(base: &str, path: &str) -> String {
    format!("{}{}", base.trim_end_matches('/'), path)
}

/// Chat-completions client; serves as vision and/or text reasoner.
pub struct ChatClient {
    transport: Arc<HttpTransport>,
    url: String,
    model: String,
    locality: Locality,
    /// Longest image side sent to the model; larger images are downscaled.
    max_image_side: usize,
}

impl ChatClient {
    pub fn new(
        transport: Arc<HttpTransport>,
        base_url: &str,
        model: &str,
        locality: Locality,
        max_image_side: usize,
    ) -> Self {
        Self {
            transport,
            url: join(base_url, CHAT_PATH),
            model: model.to_string(),
            locality,
            max_image_side,
        }
    }

    fn complete(
        &self,
        bundle: &PromptBundle,
        image: Option<&Image>,
    ) -> Result<String, BackendError> {
        let scaled = image.map(|i| i.fit_within(self.max_image_side));
        let req = ChatRequest::from_bundle(&self.model, bundle, scaled.as_ref())?;
        let resp: ChatResponse = self.transport.post_json(&self.url, &req)?;
        resp.into_text()
    }
}

impl Endpoint for ChatClient {
    fn locality(&self) -> Locality {
        self.locality
    }
}

impl VisionReasoner for ChatClient {
    fn vision_reason(&self, bundle: &PromptBundle, image: &Image) -> Result<String, BackendError> {
        if !bundle.attach_image {
            return Err(BackendError::Precondition(
                "vision_reason needs an image-conditioned bundle".into(),
            ));
        }
        self.complete(bundle, Some(image))
    }
}

impl TextReasoner for ChatClient {
    fn text_reason(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        if bundle.attach_image {
            return Err(BackendError::Precondition(
                "text_reason got an image-conditioned bundle".into(),
            ));
        }
        self.complete(bundle, None)
    }
}

/// Client for the segmentation, removal, embedding and pair-scoring endpoints.
pub struct ServiceClient {
    transport: Arc<HttpTransport>,
    base_url: String,
    locality: Locality,
}

impl ServiceClient {
    pub fn new(transport: Arc<HttpTransport>, base_url: &str, locality: Locality) -> Self {
        Self {
            transport,
            base_url: base_url.to_string(),
            locality,
        }
    }
}

impl Endpoint for ServiceClient {
    fn locality(&self) -> Locality {
        self.locality
    }
}

impl Segmenter for ServiceClient {
    fn segment(&self, image: &Image, labels: &[String]) -> Result<SegmentResult, BackendError> {
        if labels.is_empty() {
            return Err(BackendError::Precondition(
                "segment needs at least one label".into(),
            ));
        }
        let req = SegmentRequest {
            image_b64: wire::encode_image(image)?,
            labels: labels.to_vec(),
        };
        let resp: SegmentResponse = self
            .transport
            .post_json(&join(&self.base_url, SEGMENT_PATH), &req)?;
        let result = resp.into_result(labels)?;
        result.validate(image.dims())?;
        Ok(result)
    }
}

impl Remover for ServiceClient {
    fn remove(&self, image: &Image, mask: &Mask) -> Result<Image, BackendError> {
        if image.dims() != mask.dims() {
            return Err(BackendError::Precondition(format!(
                "mask {:?} does not match image {:?}",
                mask.dims(),
                image.dims()
            )));
        }
        let req = RemoveRequest {
            image_b64: wire::encode_image(image)?,
            mask_b64: wire::encode_mask(mask)?,
        };
        let resp: ImagePayload = self
            .transport
            .post_json(&join(&self.base_url, REMOVE_PATH), &req)?;
        let out = wire::decode_image(&resp.image_b64)?;
        if out.dims() != image.dims() {
            return Err(BackendError::InvalidResponse(format!(
                "remover returned {:?} for a {:?} input",
                out.dims(),
                image.dims()
            )));
        }
        Ok(out)
    }
}

impl Embedder for ServiceClient {
    fn embed(&self, image: &Image) -> Result<Vec<f64>, BackendError> {
        let req = ImagePayload {
            image_b64: wire::encode_image(image)?,
        };
        let resp: EmbedResponse = self
            .transport
            .post_json(&join(&self.base_url, EMBED_PATH), &req)?;
        Ok(resp.vector)
    }
}

impl PairScorer for ServiceClient {
    fn score_pair(&self, a: &Image, b: &Image) -> Result<f64, BackendError> {
        let req = ScorePairRequest {
            image_a_b64: wire::encode_image(a)?,
            image_b_b64: wire::encode_image(b)?,
        };
        let resp: ScoreResponse = self
            .transport
            .post_json(&join(&self.base_url, SCORE_PAIR_PATH), &req)?;
        Ok(resp.score)
    }
}

/// Endpoint URLs, models and secrets, normally read from the environment.
#[derive(Debug, Clone, Default)]
pub struct HttpEndpoints {
    pub vision_url: String,
    pub vision_model: String,
    pub text_url: String,
    pub text_model: String,
    pub segment_url: String,
    pub remove_url: String,
    pub correction_remove_url: Option<String>,
    pub embed_url: Option<String>,
    pub score_url: Option<String>,
    pub settings: HttpSettings,
}

impl HttpEndpoints {
    /// Reads `REMOVAL_*` variables. Vision, segment and remove URLs are
    /// required; the text reasoner defaults to the vision endpoint.
    pub fn from_env() -> Result<Self, BackendError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, BackendError> {
        let need = |k: &'static str| {
            get(k)
                .filter(|v| !v.is_empty())
                .ok_or(BackendError::Unavailable(k))
        };
        let vision_url = need("REMOVAL_VISION_URL")?;
        let vision_model = get("REMOVAL_VISION_MODEL").unwrap_or_else(|| "gpt-4o".into());
        let mut settings = HttpSettings {
            api_key: get("REMOVAL_API_KEY").filter(|v| !v.is_empty()),
            ..HttpSettings::default()
        };
        if let Some(t) = get("REMOVAL_TIMEOUT_SECS").and_then(|v| v.parse::<f64>().ok()) {
            settings.timeout = Duration::from_secs_f64(t);
        }
        if let Some(r) = get("REMOVAL_MAX_RETRIES").and_then(|v| v.parse().ok()) {
            settings.max_retries = r;
        }
        Ok(Self {
            text_url: get("REMOVAL_TEXT_URL").unwrap_or_else(|| vision_url.clone()),
            text_model: get("REMOVAL_TEXT_MODEL").unwrap_or_else(|| vision_model.clone()),
            vision_url,
            vision_model,
            segment_url: need("REMOVAL_SEGMENT_URL")?,
            remove_url: need("REMOVAL_REMOVE_URL")?,
            correction_remove_url: get("REMOVAL_CORRECTION_REMOVE_URL"),
            embed_url: get("REMOVAL_EMBED_URL"),
            score_url: get("REMOVAL_SCORE_URL"),
            settings,
        })
    }
}

/// Localities per capability, normally from the config file.
#[derive(Debug, Clone, Copy)]
pub struct Localities {
    pub vision: Locality,
    pub text: Locality,
    pub services: Locality,
}

impl Default for Localities {
    fn default() -> Self {
        Self {
            vision: Locality::Remote,
            text: Locality::Remote,
            services: Locality::Local,
        }
    }
}

pub fn http_backends(
    endpoints: &HttpEndpoints,
    localities: Localities,
    max_image_side: usize,
) -> Result<BackendSet, BackendError> {
    let transport = Arc::new(HttpTransport::new(endpoints.settings.clone())?);
    let service = |url: &str| {
        Arc::new(ServiceClient::new(
            transport.clone(),
            url,
            localities.services,
        ))
    };
    Ok(BackendSet {
        vision: Arc::new(ChatClient::new(
            transport.clone(),
            &endpoints.vision_url,
            &endpoints.vision_model,
            localities.vision,
            max_image_side,
        )),
        text: Arc::new(ChatClient::new(
            transport.clone(),
            &endpoints.text_url,
            &endpoints.text_model,
            localities.text,
            max_image_side,
        )),
        segmenter: service(&endpoints.segment_url),
        remover: service(&endpoints.remove_url),
        correction_remover: endpoints
            .correction_remove_url
            .as_deref()
            .map(|u| service(u) as Arc<dyn Remover>),
        embedder: endpoints
            .embed_url
            .as_deref()
            .map(|u| service(u) as Arc<dyn Embedder>),
        scorer: endpoints
            .score_url
            .as_deref()
            .map(|u| service(u) as Arc<dyn PairScorer>),
    })
}
