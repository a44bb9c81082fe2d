//! JSON bodies exchanged with model servers. Images travel as base64 PNG.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BackendError, SegmentInstance, SegmentResult};
use crate::prompts::PromptBundle;
use crate::raster::{Image, Mask};

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const SEGMENT_PATH: &str = "/segment";
pub const REMOVE_PATH: &str = "/remove";
pub const EMBED_PATH: &str = "/embed";
pub const SCORE_PAIR_PATH: &str = "/score_pair";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

impl ChatRequest {
    /// System turn plus a user turn carrying the text and, optionally, the image.
    pub fn from_bundle(
        model: &str,
        bundle: &PromptBundle,
        image: Option<&Image>,
    ) -> Result<Self, BackendError> {
        let mut user = vec![ContentPart::Text {
            text: bundle.user_text.clone(),
        }];
        if let Some(img) = image {
            user.push(ContentPart::ImageUrl {
                image_url: ImageUrl {
                    url: format!("data:image/png;base64,{}", encode_image(img)?),
                },
            });
        }
        Ok(Self {
            model: model.to_string(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: vec![ContentPart::Text {
                        text: bundle.system_text.clone(),
                    }],
                },
                ChatMessage {
                    role: "user".into(),
                    content: user,
                },
            ],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub message: ChatReply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub content: String,
}

impl ChatResponse {
    pub fn into_text(self) -> Result<String, BackendError> {
        self.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::InvalidResponse("no choices in chat response".into()))
    }
}

/// Fixture payload for reasoner calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPayload {
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image_b64: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireInstance {
    pub mask_b64: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub results: BTreeMap<String, Vec<WireInstance>>,
}

impl SegmentResponse {
    pub fn from_result(result: &SegmentResult) -> Result<Self, BackendError> {
        let mut results = BTreeMap::new();
        for (label, instances) in &result.per_label {
            let wire = instances
                .iter()
                .map(|i| {
                    Ok(WireInstance {
                        mask_b64: encode_mask(&i.mask)?,
                        score: i.score,
                    })
                })
                .collect::<Result<Vec<_>, BackendError>>()?;
            results.insert(label.clone(), wire);
        }
        Ok(Self { results })
    }

    /// Decodes masks and orders them by the requested labels; labels missing
    /// from the response get no instances.
    pub fn into_result(mut self, labels: &[String]) -> Result<SegmentResult, BackendError> {
        let mut per_label = Vec::with_capacity(labels.len());
        for label in labels {
            let instances = self
                .results
                .remove(label)
                .unwrap_or_default()
                .into_iter()
                .map(|w| {
                    Ok(SegmentInstance {
                        mask: decode_mask(&w.mask_b64)?,
                        score: w.score,
                    })
                })
                .collect::<Result<Vec<_>, BackendError>>()?;
            per_label.push((label.clone(), instances));
        }
        Ok(SegmentResult { per_label })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoveRequest {
    pub image_b64: String,
    pub mask_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub image_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePairRequest {
    pub image_a_b64: String,
    pub image_b_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
}

pub fn encode_image(img: &Image) -> Result<String, BackendError> {
    Ok(STANDARD.encode(img.to_png_bytes()?))
}

pub fn decode_image(b64: &str) -> Result<Image, BackendError> {
    let bytes = STANDARD
        .decode(b64.trim())
        .map_err(|e| BackendError::InvalidResponse(format!("image base64: {e}")))?;
    Ok(Image::from_png_bytes(&bytes)?)
}

pub fn encode_mask(mask: &Mask) -> Result<String, BackendError> {
    Ok(STANDARD.encode(mask.to_png_bytes()?))
}

pub fn decode_mask(b64: &str) -> Result<Mask, BackendError> {
    let bytes = STANDARD
        .decode(b64.trim())
        .map_err(|e| BackendError::InvalidResponse(format!("mask base64: {e}")))?;
    Ok(Mask::from_png_bytes(&bytes)?)
}
