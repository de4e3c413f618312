//! Fixture builders shared by the benchmarks.

use capreward_core::seed::SplitMix64;
use capreward_core::{CaptionSample, EmbeddingRecord, Mcq};

pub fn questions(image_id: &str, m: usize, options: usize, seed: u64) -> Vec<Mcq> {
    let mut rng = SplitMix64::new(seed);
    (0..m)
        .map(|q| Mcq {
            id: format!("{image_id}-q{q}"),
            image_id: image_id.to_string(),
            stem: format!("Which marker belongs to slot {q}?"),
            options: (0..options).map(|o| format!("t{q}x{o}z")).collect(),
            correct_index: rng.below(options as u64) as usize,
            provenance: "bench".into(),
        })
        .collect()
}

/// A caption naming the correct option of every other question.
pub fn caption(questions: &[Mcq], caption_id: &str) -> CaptionSample {
    let text = questions
        .iter()
        .step_by(2)
        .map(|q| q.correct_text())
        .collect::<Vec<_>>()
        .join(" and ");
    CaptionSample {
        caption_id: caption_id.into(),
        image_id: questions[0].image_id.clone(),
        text: format!("the photo shows {text}"),
        rollout_index: 0,
    }
}

pub fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingRecord> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|i| {
            let v: Vec<f64> = (0..dim).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            EmbeddingRecord::new(format!("img{i:05}"), v.iter().map(|x| x / norm).collect())
        })
        .collect()
}

pub fn rewards(g: usize, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..g).map(|_| rng.below(9) as f64 / 8.0).collect()
}
