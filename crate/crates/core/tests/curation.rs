mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use capreward_core::backend::mock::{ScriptRule, ScriptedTransport};
use capreward_core::curation::{
    dedup_by_embedding, dedup_with_mode, flag_benchmark_overlap, generate_qa, parse_generated_questions, CurationError,
    DedupMode, RejectReason,
};
use capreward_core::template::TemplateKind;
use capreward_core::{EmbeddingRecord, GenSpec, ImageRef, PromptTemplate};
use common::{client_with, vision_profile};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn block(n: usize, options: [&str; 4], answer: char) -> String {
    format!(
        "{n}. What is shown in region {n}?\nA. {}\nB. {}\nC. {}\nD. {}\nAnswer: {answer}\n",
        options[0], options[1], options[2], options[3]
    )
}

fn five_blocks(duplicate_in: Option<usize>) -> String {
    (1..=5)
        .map(|n| {
            let opts = if Some(n) == duplicate_in {
                ["cat", "dog", "Cat ", "bird"]
            } else {
                ["cat", "dog", "horse", "bird"]
            };
            block(n, opts, ['A', 'B', 'C', 'D'][n % 4])
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn generator(reply: String) -> capreward_core::BackendClient {
    let rule = ScriptRule { image: Some(true), response: Some(reply), ..Default::default() };
    client_with(Arc::new(ScriptedTransport::new(vec![rule])), vision_profile("generator"))
}

fn tpl() -> PromptTemplate {
    let t = PromptTemplate::builtin("qa-generation-v1").unwrap();
    assert!(matches!(t.kind, TemplateKind::QaGeneration));
    t
}

#[tokio::test]
async fn five_well_formed_blocks() {
    let img = ImageRef::from_bytes(b"a", "file:///a.png", "t");
    let out = generate_qa(&img, &GenSpec::default(), &tpl(), &generator(five_blocks(None))).await.unwrap();
    assert_eq!(out.questions.len(), 5);
    assert!(out.rejections.is_empty());
    for (i, q) in out.questions.iter().enumerate() {
        q.validate().unwrap();
        assert_eq!(q.options.len(), 4);
        assert_eq!(q.correct_index, (i + 1) % 4);
        assert_eq!(q.id, format!("{}-q{}", img.image_id, i + 1));
        assert_eq!(q.provenance, "generator-model");
    }
}

#[tokio::test]
async fn duplicate_option_block_is_rejected_alone() {
    let img = ImageRef::from_bytes(b"a", "file:///a.png", "t");
    let out = generate_qa(&img, &GenSpec::default(), &tpl(), &generator(five_blocks(Some(3)))).await.unwrap();
    assert_eq!(out.questions.len(), 4);
    assert_eq!(out.rejections.len(), 1);
    assert_eq!(out.rejections[0].reason, RejectReason::DuplicateOption);
    assert_eq!(out.rejections[0].block, 3);
}

#[tokio::test]
async fn prose_is_a_generation_error() {
    let img = ImageRef::from_bytes(b"a", "file:///a.png", "t");
    let reply = "This image shows a lovely beach at sunset with people walking along the shore.".to_string();
    let err = generate_qa(&img, &GenSpec::default(), &tpl(), &generator(reply)).await.unwrap_err();
    assert!(matches!(err, CurationError::NothingParsed { .. }), "{err}");
}

#[test]
fn parser_rejection_reasons() {
    let spec = GenSpec { per_image: 2, ..Default::default() };
    let raw = "1. First?\nA. a\nB. b\nC. c\nD. d\nAnswer: B\n\n\
               2. No answer?\nA. a\nB. b\nC. c\nD. d\n\n\
               3. Bad answer?\nA. a\nB. b\nC. c\nD. d\nAnswer: F\n\n\
               4. Three options?\nA. a\nB. b\nC. c\nAnswer: A\n\n\
               5. Skips?\nA. a\nC. b\nD. c\nE. d\nAnswer: A\n\n\
               6. Second good?\nA. a\nB. b\nC. c\nD. d\nAnswer: D\n\n\
               7. Over quota?\nA. a\nB. b\nC. c\nD. d\nAnswer: A\n";
    let out = parse_generated_questions(raw, "img", &spec, "gen");
    assert_eq!(out.questions.iter().map(|q| q.id.as_str()).collect::<Vec<_>>(), ["img-q1", "img-q6"]);
    let reasons: Vec<_> = out.rejections.iter().map(|r| r.reason).collect();
    assert_eq!(
        reasons,
        [
            RejectReason::MissingAnswer,
            RejectReason::AnswerNotAnOption,
            RejectReason::OptionCountMismatch,
            RejectReason::NonConsecutiveLabels,
            RejectReason::OverQuota,
        ]
    );
}

#[tokio::test]
async fn text_only_generator_is_refused() {
    let img = ImageRef::from_bytes(b"a", "file:///a.png", "t");
    let client = client_with(
        Arc::new(ScriptedTransport::new(vec![])),
        capreward_core::BackendProfile::mock_keyword("text"),
    );
    let err = generate_qa(&img, &GenSpec::default(), &tpl(), &client).await.unwrap_err();
    assert!(matches!(err, CurationError::NotVisionCapable(_)));
}

fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn records(rng: &mut impl Rng, n: usize, dim: usize, prefix: &str) -> Vec<EmbeddingRecord> {
    (0..n).map(|i| EmbeddingRecord::new(format!("{prefix}{i:04}"), unit(rng, dim))).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Straight transcription of the keep rule over every pair, no early exit.
fn brute_dedup_mode(records: &[EmbeddingRecord], threshold: f64, mode: DedupMode) -> Vec<String> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut keep = vec![false; sorted.len()];
    for i in 0..sorted.len() {
        let mut max_sim = f64::NEG_INFINITY;
        for j in 0..i {
            if keep[j] || mode == DedupMode::AnyEarlier {
                max_sim = max_sim.max(dot(&sorted[i].vector, &sorted[j].vector));
            }
        }
        keep[i] = max_sim < threshold;
    }
    sorted.iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r.image_id.clone()).collect()
}

fn brute_dedup(records: &[EmbeddingRecord], threshold: f64) -> Vec<String> {
    brute_dedup_mode(records, threshold, DedupMode::AnyEarlier)
}

fn brute_flags(records: &[EmbeddingRecord], bench: &[EmbeddingRecord], threshold: f64) -> BTreeSet<String> {
    records
        .iter()
        .filter(|r| bench.iter().any(|b| dot(&r.vector, &b.vector) >= threshold))
        .map(|r| r.image_id.clone())
        .collect()
}

#[test]
fn dedup_simple_cases() {
    let a = EmbeddingRecord::new("a", vec![1.0, 0.0]);
    let b = EmbeddingRecord::new("b", vec![1.0, 0.0]);
    let c = EmbeddingRecord::new("c", vec![0.0, 1.0]);
    for t in [0.1, 0.5, 0.92, 1.0] {
        let out = dedup_by_embedding(&[b.clone(), a.clone()], t).unwrap();
        assert_eq!(out.kept, ["a"]);
        assert_eq!(out.duplicates[0].duplicate_of, "a");
    }
    assert_eq!(dedup_by_embedding(&[a.clone(), c.clone()], 0.92).unwrap().kept, ["a", "c"]);
    let bad = EmbeddingRecord::new("d", vec![1.0, 0.0, 0.0]);
    assert!(matches!(dedup_by_embedding(&[a.clone(), bad.clone()], 0.9), Err(CurationError::DimensionMismatch { .. })));
    assert!(matches!(flag_benchmark_overlap(std::slice::from_ref(&a), &[bad], 0.9), Err(CurationError::DimensionMismatch { .. })));
    let unnormed = EmbeddingRecord::new("e", vec![2.0, 0.0]);
    assert!(matches!(dedup_by_embedding(&[unnormed], 0.9), Err(CurationError::NotUnitNorm { .. })));
}

#[test]
fn ten_random_vectors_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let recs = records(&mut rng, 10, 3, "r");
        assert_eq!(dedup_by_embedding(&recs, 0.9).unwrap().kept, brute_dedup(&recs, 0.9));
    }
}

#[test]
fn overlap_flags_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let recs = records(&mut rng, 200, 4, "r");
    let mut bench = records(&mut rng, 30, 4, "b");
    bench.push(EmbeddingRecord { image_id: "copy".into(), ..recs[7].clone() });
    for t in [0.8, 0.9, 0.95] {
        let got: BTreeSet<String> =
            flag_benchmark_overlap(&recs, &bench, t).unwrap().into_iter().map(|f| f.image_id).collect();
        assert_eq!(got, brute_flags(&recs, &bench, t));
        assert!(got.contains("r0007"));
    }
    assert!(flag_benchmark_overlap(&recs, &[], 0.5).unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dedup_matches_brute_force_in_any_order(seed in any::<u64>(), n in 1usize..40, dim in 2usize..5, t in 0.5f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = records(&mut rng, n, dim, "x");
        let want = brute_dedup(&recs, t);
        let mut reversed = recs.clone();
        reversed.reverse();
        prop_assert_eq!(&dedup_by_embedding(&recs, t).unwrap().kept, &want);
        prop_assert_eq!(&dedup_by_embedding(&reversed, t).unwrap().kept, &want);
        let greedy = brute_dedup_mode(&recs, t, DedupMode::KeptOnly);
        prop_assert_eq!(&dedup_with_mode(&reversed, t, DedupMode::KeptOnly).unwrap().kept, &greedy);
    }

    #[test]
    fn default_rule_nests_across_thresholds(seed in any::<u64>(), n in 1usize..60, dim in 2usize..6, a in 0.3f64..1.0, b in 0.3f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = records(&mut rng, n, dim, "x");
        let (lo, hi) = (a.min(b), a.max(b));
        let low: BTreeSet<String> = dedup_by_embedding(&recs, lo).unwrap().kept.into_iter().collect();
        let high: BTreeSet<String> = dedup_by_embedding(&recs, hi).unwrap().kept.into_iter().collect();
        prop_assert!(low.is_subset(&high));
    }
}
