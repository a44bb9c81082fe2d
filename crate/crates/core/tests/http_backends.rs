//! HTTP clients against an in-process server on a std `TcpListener`.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use removal_engine::backends::fixtures::{
    recording_backends, replay_backends, replay_options_for, FixtureStore,
};
use removal_engine::backends::http::{http_backends, HttpEndpoints, HttpSettings, Localities};
use removal_engine::backends::wire::{
    decode_image, decode_mask, encode_image, ChatRequest, ContentPart, ImagePayload, RemoveRequest,
    SegmentRequest, SegmentResponse,
};
use removal_engine::backends::{BackendError, BackendSet, Locality};
use removal_engine::oracle::{closure, oracle_backends, person_with_watering_can, render};
use removal_engine::pipeline::{run_pipeline, ClockMode, Mode, PipelineConfig};
use removal_engine::prompts::PromptBundle;

struct Request {
    path: String,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

type Handler = Arc<dyn Fn(&Request) -> (u16, String) + Send + Sync>;

fn read_request(reader: &mut BufReader<TcpStream>) -> Option<Request> {
    let mut line = String::new();
    if reader.read_line(&mut line).ok()? == 0 {
        return None;
    }
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    let len = headers
        .iter()
        .find(|(k, _)| k == "content-length")
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request {
        path,
        headers,
        body,
    })
}

/// Serves `handler` on an ephemeral port; returns the base URL.
fn serve(handler: Handler) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let handler = handler.clone();
            std::thread::spawn(move || {
                let mut writer = stream.try_clone().unwrap();
                let mut reader = BufReader::new(stream);
                while let Some(req) = read_request(&mut reader) {
                    let (status, body) = handler(&req);
                    let head = format!(
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
                        body.len()
                    );
                    if writer
                        .write_all(head.as_bytes())
                        .and_then(|_| writer.write_all(body.as_bytes()))
                        .is_err()
                    {
                        break;
                    }
                }
            });
        }
    });
    format!("http://{addr}")
}

fn endpoints(base: &str) -> HttpEndpoints {
    HttpEndpoints {
        vision_url: base.into(),
        vision_model: "vision-model".into(),
        text_url: base.into(),
        text_model: "text-model".into(),
        segment_url: base.into(),
        remove_url: base.into(),
        correction_remove_url: None,
        embed_url: None,
        score_url: None,
        settings: HttpSettings {
            timeout: Duration::from_secs(10),
            max_retries: 2,
            backoff_base: Duration::from_millis(1),
            api_key: None,
            max_in_flight: 4,
        },
    }
}

fn chat_reply(text: &str) -> String {
    serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] })
        .to_string()
}

/// A model server backed by the oracle world.
fn oracle_handler(world: BackendSet) -> Handler {
    Arc::new(move |req: &Request| {
        let out: Result<String, BackendError> = (|| match req.path.as_str() {
            "/v1/chat/completions" => {
                let chat: ChatRequest = serde_json::from_slice(&req.body).unwrap();
                let text_of = |role: &str| {
                    chat.messages
                        .iter()
                        .find(|m| m.role == role)
                        .and_then(|m| {
                            m.content.iter().find_map(|p| match p {
                                ContentPart::Text { text } => Some(text.clone()),
                                _ => None,
                            })
                        })
                        .unwrap_or_default()
                };
                let image = chat
                    .messages
                    .iter()
                    .flat_map(|m| &m.content)
                    .find_map(|p| match p {
                        ContentPart::ImageUrl { image_url } => Some(
                            decode_image(
                                image_url.url.trim_start_matches("data:image/png;base64,"),
                            )
                            .unwrap(),
                        ),
                        _ => None,
                    });
                let bundle = PromptBundle {
                    system_text: text_of("system"),
                    user_text: text_of("user"),
                    attach_image: image.is_some(),
                };
                let text = match &image {
                    Some(img) => world.vision.vision_reason(&bundle, img)?,
                    None => world.text.text_reason(&bundle)?,
                };
                Ok(chat_reply(&text))
            }
            "/segment" => {
                let r: SegmentRequest = serde_json::from_slice(&req.body).unwrap();
                let result = world
                    .segmenter
                    .segment(&decode_image(&r.image_b64)?, &r.labels)?;
                Ok(serde_json::to_string(&SegmentResponse::from_result(&result)?).unwrap())
            }
            "/remove" => {
                let r: RemoveRequest = serde_json::from_slice(&req.body).unwrap();
                let out = world
                    .remover
                    .remove(&decode_image(&r.image_b64)?, &decode_mask(&r.mask_b64)?)?;
                Ok(serde_json::to_string(&ImagePayload {
                    image_b64: encode_image(&out)?,
                })
                .unwrap())
            }
            other => Err(BackendError::Precondition(format!("no route {other}"))),
        })();
        match out {
            Ok(body) => (200, body),
            Err(e) => (
                400,
                serde_json::json!({ "error": e.to_string() }).to_string(),
            ),
        }
    })
}

#[test]
fn pipeline_over_http_matches_ground_truth() {
    let scene = person_with_watering_can();
    let base = serve(oracle_handler(oracle_backends(scene.clone())));
    let set = http_backends(&endpoints(&base), Localities::default(), 1024).unwrap();
    let input = render(&scene, &BTreeSet::new());
    let person = scene.find_by_name("person").unwrap().id;
    let truth = render(&scene, &closure(&scene, &BTreeSet::from([person])).unwrap());
    for mode in [
        Mode::CloudFull,
        Mode::LocalChain,
        Mode::AblationA,
        Mode::AblationB,
    ] {
        let record = run_pipeline(
            &input,
            "Remove the person.",
            &set,
            &PipelineConfig::for_mode(mode),
        )
        .unwrap();
        assert!(record.final_image == truth, "{mode}");
        assert!(
            record.timing.remote_s() > 0.0,
            "{mode}: reasoner calls are remote"
        );
    }
}

#[test]
fn recorded_http_traffic_replays_without_the_server() {
    let scene = person_with_watering_can();
    let hits = Arc::new(AtomicUsize::new(0));
    let inner = oracle_handler(oracle_backends(scene.clone()));
    let counted: Handler = {
        let hits = hits.clone();
        Arc::new(move |r: &Request| {
            hits.fetch_add(1, Ordering::SeqCst);
            inner(r)
        })
    };
    let live = http_backends(&endpoints(&serve(counted)), Localities::default(), 1024).unwrap();
    let store = Arc::new(FixtureStore::recording());
    let recording = recording_backends(&live, store.clone());
    let input = render(&scene, &BTreeSet::new());
    let cfg = PipelineConfig {
        clock: ClockMode::Virtual,
        ..PipelineConfig::default()
    };
    let first = run_pipeline(&input, "Remove the watering can.", &recording, &cfg).unwrap();
    let live_calls = hits.load(Ordering::SeqCst);
    assert_eq!(store.len(), live_calls, "one fixture per distinct request");

    let replay = replay_backends(
        Arc::new(FixtureStore::replay(store.entries())),
        replay_options_for(&live),
    );
    let second = run_pipeline(&input, "Remove the watering can.", &replay, &cfg).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), live_calls);
    assert_eq!(first.final_digest, second.final_digest);
    assert_eq!(first.to_json(), second.to_json());
}

#[test]
fn server_errors_are_retried_then_succeed() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let base = serve(Arc::new(move |_: &Request| {
        if c.fetch_add(1, Ordering::SeqCst) < 2 {
            (503, "{}".into())
        } else {
            (200, chat_reply("Target: person"))
        }
    }));
    let set = http_backends(&endpoints(&base), Localities::default(), 1024).unwrap();
    let bundle = PromptBundle {
        system_text: "s".into(),
        user_text: "u".into(),
        attach_image: false,
    };
    assert_eq!(set.text.text_reason(&bundle).unwrap(), "Target: person");
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn rate_limits_exhaust_retries_and_client_errors_do_not_retry() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let base = serve(Arc::new(move |r: &Request| {
        c.fetch_add(1, Ordering::SeqCst);
        if r.path == "/v1/chat/completions" {
            (429, "{}".into())
        } else {
            (422, "bad mask".into())
        }
    }));
    let set = http_backends(&endpoints(&base), Localities::default(), 1024).unwrap();
    let bundle = PromptBundle {
        system_text: "s".into(),
        user_text: "u".into(),
        attach_image: false,
    };
    let err = set.text.text_reason(&bundle).unwrap_err();
    assert!(
        matches!(err, BackendError::RateLimited { attempts: 3 }),
        "{err:?}"
    );
    assert_eq!(calls.load(Ordering::SeqCst), 3);

    let img = removal_engine::raster::Image::filled(4, 4, [1, 2, 3]).unwrap();
    let mask = removal_engine::raster::Mask::full(4, 4).unwrap();
    let err = set.remover.remove(&img, &mask).unwrap_err();
    assert!(
        matches!(err, BackendError::Http { status: 422, ref body } if body == "bad mask"),
        "{err:?}"
    );
    assert_eq!(calls.load(Ordering::SeqCst), 4);
}

#[test]
fn bearer_token_and_model_are_sent() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let s = seen.clone();
    let base = serve(Arc::new(move |r: &Request| {
        let auth = r
            .headers
            .iter()
            .find(|(k, _)| k == "authorization")
            .map(|(_, v)| v.clone());
        let chat: ChatRequest = serde_json::from_slice(&r.body).unwrap();
        s.lock().unwrap().push((auth, chat.model));
        (200, chat_reply("ok"))
    }));
    let mut ep = endpoints(&base);
    ep.settings.api_key = Some("sekret".into());
    let set = http_backends(&ep, Localities::default(), 1024).unwrap();
    let bundle = PromptBundle {
        system_text: "s".into(),
        user_text: "u".into(),
        attach_image: false,
    };
    set.text.text_reason(&bundle).unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(
        seen[0],
        (Some("Bearer sekret".to_string()), "text-model".to_string())
    );
}

#[test]
fn slow_servers_time_out() {
    let base = serve(Arc::new(|_: &Request| {
        std::thread::sleep(Duration::from_millis(600));
        (200, chat_reply("late"))
    }));
    let mut ep = endpoints(&base);
    ep.settings.timeout = Duration::from_millis(100);
    ep.settings.max_retries = 0;
    let set = http_backends(&ep, Localities::default(), 1024).unwrap();
    let bundle = PromptBundle {
        system_text: "s".into(),
        user_text: "u".into(),
        attach_image: false,
    };
    let err = set.text.text_reason(&bundle).unwrap_err();
    assert!(matches!(err, BackendError::Timeout(_)), "{err:?}");
}

#[test]
fn localities_follow_configuration() {
    let set = http_backends(
        &endpoints("http://127.0.0.1:9"),
        Localities {
            vision: Locality::Remote,
            text: Locality::Local,
            services: Locality::Local,
        },
        1024,
    )
    .unwrap();
    assert_eq!(set.vision.locality(), Locality::Remote);
    assert_eq!(set.text.locality(), Locality::Local);
    assert_eq!(set.segmenter.locality(), Locality::Local);
    assert!(set.embedder.is_none() && set.scorer.is_none() && set.correction_remover.is_none());
}
