#![allow(dead_code)]

use std::path::{Path, PathBuf};

use capreward_cli::manifest::RunManifest;
use capreward_core::backend::mock::{Script, ScriptRule};
use capreward_core::jsonl::{read_jsonl, write_jsonl};
use capreward_core::{BackendProfile, ImageRef, Mcq};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub async fn cli(args: &[&str]) -> i32 {
    capreward_cli::run_args(std::iter::once("capreward").chain(args.iter().copied())).await
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn put<T: Serialize>(dir: &Path, name: &str, items: &[T]) -> PathBuf {
    let path = dir.join(name);
    write_jsonl(&path, items).unwrap();
    path
}

pub fn get<T: DeserializeOwned>(path: &Path) -> Vec<T> {
    read_jsonl(path).unwrap()
}

pub fn json<T: DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn manifest(path: &Path) -> RunManifest {
    json(path)
}

pub fn token(q: usize, o: usize) -> String {
    format!("t{q}x{o}z")
}

pub fn mcq(image_id: &str, q: usize, correct: usize) -> Mcq {
    Mcq {
        id: format!("{image_id}-q{q}"),
        image_id: image_id.to_string(),
        stem: format!("Which marker belongs to slot {q} of {image_id}?"),
        options: (0..4).map(|o| token(q, o)).collect(),
        correct_index: correct,
        provenance: "fixture".into(),
    }
}

pub fn wrong_text(q: &Mcq) -> String {
    q.options[(q.correct_index + 1) % q.options.len()].clone()
}

pub fn image(i: usize) -> ImageRef {
    ImageRef::from_bytes(format!("pixels of image {i}").as_bytes(), format!("file:///data/img{i:03}.png"), "fixture")
}

/// A backend config whose scripted profiles read their rules from files
/// written under `dir`.
pub struct Backends {
    dir: PathBuf,
    profiles: Vec<BackendProfile>,
}

impl Backends {
    pub fn new(dir: &Path) -> Self {
        Backends { dir: dir.to_path_buf(), profiles: Vec::new() }
    }

    pub fn scripted(mut self, name: &str, vision: bool, rules: Vec<ScriptRule>) -> Self {
        let path = self.dir.join(format!("{name}.script.json"));
        std::fs::write(&path, serde_json::to_string(&Script { rules }).unwrap()).unwrap();
        self.profiles.push(BackendProfile {
            endpoint: format!("mock:scripted:{}", path.display()),
            model: format!("{name}-model"),
            vision_capable: vision,
            ..BackendProfile::mock_keyword(name)
        });
        self
    }

    pub fn write(self) -> PathBuf {
        let path = self.dir.join("backends.json");
        let body = serde_json::json!({ "backends": self.profiles });
        std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
        path
    }
}

/// Rule replying `response` to prompts containing `stem`, optionally only
/// with (`Some(true)`) or without (`Some(false)`) an attached image.
pub fn reply(stem: &str, image: Option<bool>, response: &str) -> ScriptRule {
    ScriptRule { contains: Some(stem.to_string()), image, response: Some(response.to_string()), ..Default::default() }
}

pub fn gen_block(n: usize, options: [&str; 4], answer: char) -> String {
    format!(
        "{n}. What is shown in region {n}?\nA. {}\nB. {}\nC. {}\nD. {}\nAnswer: {answer}\n",
        options[0], options[1], options[2], options[3]
    )
}

/// Five generated blocks; block `bad` (1-based) repeats an option.
pub fn gen_reply(bad: Option<usize>) -> String {
    (1..=5)
        .map(|n| {
            let opts = if Some(n) == bad { ["cat", "dog", "cat", "bird"] } else { ["cat", "dog", "horse", "bird"] };
            gen_block(n, opts, ['A', 'B', 'C', 'D'][n % 4])
        })
        .collect::<Vec<_>>()
        .join("\n")
}
