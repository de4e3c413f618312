//! Wire fixtures shared with clients. Regenerate with `CAPREWARD_BLESS=1`.

mod common;

use std::path::PathBuf;
use std::sync::Arc;

use capreward_core::backend::mock::{ScriptRule, ScriptedTransport};
use capreward_core::backend::BackendProfile;
use capreward_service::{FilterRequestWire, RewardRequestWire};
use common::*;
use serde_json::Value;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn check(name: &str, actual: &Value) {
    let path = golden(name);
    if std::env::var_os("CAPREWARD_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(actual).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let expected: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(&expected, actual, "{name} drifted from its golden file");
}

async fn exchange(run: &Running, path: &str, body: &Value) -> (u16, Value) {
    let resp = reqwest::Client::new().post(run.url(path)).json(body).send().await.unwrap();
    (resp.status().as_u16(), resp.json().await.unwrap())
}

fn reward_request() -> Value {
    let mut req = group("golden-g4", &questions(IMAGE, 5), &[0b11111, 0b10101, 0b00000, 0b01110]);
    req.seed = Some(7);
    serde_json::to_value(req).unwrap()
}

#[tokio::test]
async fn reward_round_trip() {
    let request = reward_request();
    check("reward_request.json", &request);
    let typed: RewardRequestWire = serde_json::from_value(request.clone()).unwrap();
    assert_eq!(serde_json::to_value(&typed).unwrap(), request);

    let run = spawn(Harness::new().state()).await;
    let (status, body) = exchange(&run, "/v1/reward", &request).await;
    assert_eq!(status, 200);
    check("reward_response.json", &body);

    let mut bad = request.clone();
    bad["captions"][1]["rollout_index"] = 0.into();
    let (status, body) = exchange(&run, "/v1/reward", &bad).await;
    assert_eq!(status, 400);
    check("error_duplicate_rollout.json", &body);
}

#[tokio::test]
async fn filter_round_trip() {
    let q = questions(IMAGE, 1).remove(0);
    let request = serde_json::to_value(FilterRequestWire {
        mcq: q.clone(),
        image_id: IMAGE.into(),
        image_uri: Some("file:///data/img0.png".into()),
        k_rounds: None,
        tau_img: None,
        tau_blind: None,
        seed: Some(3),
    })
    .unwrap();
    check("filter_request.json", &request);

    let rules = vec![
        ScriptRule { image: Some(true), response: Some(format!("Answer is {}", q.correct_text())), ..Default::default() },
        ScriptRule { image: Some(false), response: Some("unknown".into()), ..Default::default() },
    ];
    let mut h = Harness::new();
    h.add_backend(
        BackendProfile { vision_capable: true, ..BackendProfile::mock_keyword("prober") },
        Arc::new(ScriptedTransport::new(rules)),
    );
    h.config.prober = Some("prober".into());
    let run = spawn(h.state()).await;
    let (status, body) = exchange(&run, "/v1/filter", &request).await;
    assert_eq!(status, 200);
    assert_eq!(body["decision"], "keep");
    check("filter_response.json", &body);
}
