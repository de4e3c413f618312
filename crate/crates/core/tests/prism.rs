mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use capreward_core::backend::mock::{Fallback, Instrumented, KeywordAnswerer, ScriptRule, ScriptedTransport};
use capreward_core::backend::{BackendClient, BackendProfile, MemoryCache};
use capreward_core::mcq::shuffle_mcq;
use capreward_core::prism::{aggregate, eval_seed, run_answer_stage, run_caption_stage, EvalConfig, EvalItem, PrismError};
use capreward_core::template::DEFAULT_CAPTION_TEMPLATE;
use capreward_core::{ImageRef, PromptTemplate};
use common::{caption_for, questions, vision_profile, Coverage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Twenty single-question items, one per image; the first `answerable` get a
/// caption naming the right option, the rest a caption naming a wrong one.
fn benchmark(answerable: usize) -> (Vec<EvalItem>, BTreeMap<String, String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut items = Vec::new();
    let mut captions = BTreeMap::new();
    for i in 0..20 {
        let image_id = format!("img{i:02}");
        let mut q = questions(&image_id, 1, 4, &mut rng).remove(0);
        q.stem = format!("Which marker is in picture {i}?");
        let cov = if i < answerable { Coverage::Answerable } else { Coverage::Distracted };
        captions.insert(image_id.clone(), caption_for(std::slice::from_ref(&q), &[cov]));
        items.push(EvalItem { item_id: format!("item{i:02}"), benchmark: "synthetic".into(), image_id, mcq: q });
    }
    (items, captions)
}

fn spy_answerer(fallback: Fallback) -> (Arc<Instrumented<KeywordAnswerer>>, BackendClient) {
    let spy = Arc::new(Instrumented::new(KeywordAnswerer::new(PromptTemplate::default_answer(), fallback)));
    let client = BackendClient::new(BackendProfile::mock_keyword("answerer"), spy.clone(), Arc::new(MemoryCache::new())).unwrap();
    (spy, client)
}

#[tokio::test]
async fn thirteen_of_twenty() {
    let (items, captions) = benchmark(13);
    let (spy, answerer) = spy_answerer(Fallback::FirstLabel);
    let out = run_answer_stage(&captions, &items, &answerer, &EvalConfig::default(), &PromptTemplate::default_answer(), "cap")
        .await
        .unwrap();
    assert_eq!(out.results.len(), 1);
    let r = &out.results[0];
    assert_eq!((r.n_items, r.accuracy), (20, 0.65));
    assert_eq!((r.captioner_profile.as_str(), r.answerer_profile.as_str()), ("cap", "answerer"));
    let reqs = spy.requests();
    assert_eq!(reqs.len(), 20);
    assert!(reqs.iter().all(|r| !r.has_image()));
    for r in &reqs {
        let json = serde_json::to_string(r).unwrap();
        assert!(!json.contains("image_url"), "{json}");
    }
}

#[tokio::test]
async fn empty_captions_score_the_fallback_rate() {
    let (items, captions) = benchmark(0);
    let empty: BTreeMap<_, _> = captions.keys().map(|k| (k.clone(), String::new())).collect();
    let cfg = EvalConfig { seed: 5, ..Default::default() };
    let (_, answerer) = spy_answerer(Fallback::FirstLabel);
    let out = run_answer_stage(&empty, &items, &answerer, &cfg, &PromptTemplate::default_answer(), "cap").await.unwrap();
    let expected = items
        .iter()
        .filter(|it| shuffle_mcq(&it.mcq, eval_seed(cfg.seed, &it.item_id)).correct_label == 'A')
        .count() as f64
        / items.len() as f64;
    assert_eq!(out.results[0].accuracy, expected);
}

#[tokio::test]
async fn missing_captions_exclude_items_and_empty_benchmarks() {
    let (mut items, mut captions) = benchmark(20);
    for it in items.iter_mut().skip(15) {
        it.benchmark = "other".into();
    }
    for it in items.iter().skip(15) {
        captions.remove(&it.image_id);
    }
    captions.remove("img00");
    let (_, answerer) = spy_answerer(Fallback::FirstLabel);
    let out = run_answer_stage(&captions, &items, &answerer, &EvalConfig::default(), &PromptTemplate::default_answer(), "cap")
        .await
        .unwrap();
    assert_eq!(out.results.iter().map(|r| r.benchmark.as_str()).collect::<Vec<_>>(), ["synthetic"]);
    assert_eq!(out.results[0].n_items, 14);
    assert_eq!(out.results[0].accuracy, 1.0);
    assert_eq!(out.excluded.len(), 6);
    let summary = aggregate(&out.results).unwrap();
    assert_eq!(summary.rows.len(), 1);
    assert_eq!(summary.macro_average, 1.0);
}

fn images(n: usize) -> Vec<ImageRef> {
    (0..n).map(|i| ImageRef::from_bytes(format!("img{i}").as_bytes(), format!("file:///{i}.png"), "t")).collect()
}

#[tokio::test]
async fn caption_stage_records_failures_and_replays_from_cache() {
    let imgs = images(4);
    let mut rules: Vec<ScriptRule> = imgs
        .iter()
        .enumerate()
        .map(|(i, img)| ScriptRule {
            image_url: Some(img.uri.clone()),
            response: Some(format!("caption number {i}")),
            status: (i == 2).then_some(400),
            ..Default::default()
        })
        .collect();
    rules.push(ScriptRule { image: Some(false), status: Some(400), ..Default::default() });
    let spy = Arc::new(Instrumented::new(ScriptedTransport::new(rules)));
    let captioner = BackendClient::new(vision_profile("captioner"), spy.clone(), Arc::new(MemoryCache::new())).unwrap();
    let prompt = PromptTemplate::builtin(DEFAULT_CAPTION_TEMPLATE).unwrap();

    let first = run_caption_stage(&imgs, &captioner, &prompt, 1).await.unwrap();
    assert_eq!(first.captions.len(), 3);
    assert_eq!(first.failures.len(), 1);
    assert_eq!(first.failures[0].image_id, imgs[2].image_id);
    assert_eq!(first.captions[&imgs[3].image_id], "caption number 3");
    let calls = spy.calls();
    assert_eq!(calls, 4);

    let entries = first.entries("captioner", DEFAULT_CAPTION_TEMPLATE);
    assert_eq!(entries.len(), 3);
    assert!(entries.iter().all(|e| e.prompt_template == DEFAULT_CAPTION_TEMPLATE));

    // Successful captions come from the cache; only the failed image is retried.
    let second = run_caption_stage(&imgs, &captioner, &prompt, 1).await.unwrap();
    assert_eq!(second, first);
    assert_eq!(spy.calls() - calls, 1);

    let text_only = BackendClient::new(BackendProfile::mock_keyword("t"), spy.clone(), Arc::new(MemoryCache::new())).unwrap();
    assert!(matches!(run_caption_stage(&imgs, &text_only, &prompt, 1).await, Err(PrismError::NotVisionCapable(_))));
}

#[tokio::test]
async fn answer_stage_rerun_is_warm() {
    let (items, captions) = benchmark(13);
    let (spy, answerer) = spy_answerer(Fallback::FirstLabel);
    let tpl = PromptTemplate::default_answer();
    let a = run_answer_stage(&captions, &items, &answerer, &EvalConfig::default(), &tpl, "cap").await.unwrap();
    let calls = spy.calls();
    let b = run_answer_stage(&captions, &items, &answerer, &EvalConfig::default(), &tpl, "cap").await.unwrap();
    assert_eq!(spy.calls(), calls);
    assert_eq!(a, b);
    assert_eq!(answerer.stats().cache_hits, 20);
}
