use std::collections::BTreeMap;
use std::path::PathBuf;

use capreward_core::grpo::SERVING_EPSILON;
use capreward_core::jsonl::write_jsonl;
use capreward_core::{score_group, CaptionSample, Mcq, PromptTemplate, RewardConfig, RewardReport, SamplingMode};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backends::{backend, open, read_input, MOCK_KEYWORD};
use crate::manifest::{sibling, Recorder};
use crate::{data, usage, CliError, CommonArgs, Tally};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    CoverageFirst,
    WithReplacement,
}

impl From<ModeArg> for SamplingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::CoverageFirst => SamplingMode::CoverageFirst,
            ModeArg::WithReplacement => SamplingMode::WithReplacement,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Caption JSON-lines input; one group per image_id.
    #[arg(long)]
    pub captions: PathBuf,
    /// MCQ JSON-lines input.
    #[arg(long)]
    pub qa: PathBuf,
    /// Sampled question rounds per caption.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::CoverageFirst)]
    pub sampling_mode: ModeArg,
    #[arg(long, default_value_t = SERVING_EPSILON)]
    pub epsilon: f64,
    /// Text-only answerer.
    #[arg(long, default_value = MOCK_KEYWORD)]
    pub backend: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// One output line per caption group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group_id: String,
    pub image_id: String,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub reports: Vec<RewardReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupFailure {
    pub group_id: String,
    pub error: String,
}

pub async fn run(args: ScoreArgs, argv: &[String]) -> Result<i32, CliError> {
    let config = RewardConfig {
        n_rounds: args.n,
        sampling_mode: args.sampling_mode.into(),
        global_seed: args.seed,
        ..RewardConfig::default()
    };
    config.validate().map_err(usage)?;
    if !(args.epsilon.is_finite() && args.epsilon >= 0.0) {
        return Err(usage("--epsilon must be >= 0"));
    }
    let template = PromptTemplate::builtin(&config.template_name).map_err(usage)?;
    let registry = open(&args.common)?;
    let answerer = backend(&registry, &args.backend)?;

    let captions: Vec<CaptionSample> = read_input(&args.captions)?;
    let mut questions: BTreeMap<String, Vec<Mcq>> = BTreeMap::new();
    for q in read_input::<Mcq>(&args.qa)? {
        questions.entry(q.image_id.clone()).or_default().push(q);
    }
    let mut groups: BTreeMap<String, Vec<CaptionSample>> = BTreeMap::new();
    for c in captions {
        groups.entry(c.image_id.clone()).or_default().push(c);
    }

    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for (image_id, group) in &groups {
        let Some(qs) = questions.get(image_id) else {
            failures.push(GroupFailure { group_id: image_id.clone(), error: "no questions for image".into() });
            continue;
        };
        match score_group(image_id, group, qs, &config, &template, answerer, args.epsilon).await {
            Ok((reports, adv)) => scores.push(GroupScore {
                group_id: adv.group_id,
                image_id: image_id.clone(),
                rewards: adv.rewards,
                advantages: adv.advantages,
                mean: adv.mean,
                std: adv.std,
                reports,
            }),
            Err(e) => failures.push(GroupFailure { group_id: image_id.clone(), error: e.to_string() }),
        }
    }

    let errors_path = sibling(&args.out, "errors.jsonl");
    write_jsonl(&args.out, &scores).map_err(data)?;
    write_jsonl(&errors_path, &failures).map_err(data)?;

    let mut rec = Recorder::new("score", argv);
    rec.config(serde_json::json!({ "reward": config, "epsilon": args.epsilon, "answerer": answerer.profile() }));
    rec.seed("global", config.global_seed);
    rec.input("captions", &args.captions);
    rec.input("qa", &args.qa);
    rec.output("scores", &args.out);
    rec.output("errors", &errors_path);
    let tally = Tally { total: groups.len(), failed: failures.len() };
    rec.finish(&sibling(&args.out, "manifest.json"), Some(&registry), tally, args.common.max_fail_rate)
}
