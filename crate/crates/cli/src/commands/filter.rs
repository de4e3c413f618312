use std::collections::BTreeMap;
use std::path::PathBuf;

use capreward_core::filtering::{filter_qa_set, FilterError, FilterInput};
use capreward_core::jsonl::write_jsonl;
use capreward_core::{FilterConfig, FilterVerdict, ImageRef, Mcq, PromptTemplate};
use clap::Args;

use crate::backends::{open, read_input, vision_backend};
use crate::manifest::{write_json, Recorder};
use crate::{data, usage, CliError, CommonArgs, Tally};

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// MCQ JSON-lines input.
    #[arg(long)]
    pub qa: PathBuf,
    /// JSON-lines image manifest used to attach each question's image.
    #[arg(long)]
    pub images: PathBuf,
    /// Probing rounds per condition.
    #[arg(long, default_value_t = capreward_core::filtering::DEFAULT_K_ROUNDS)]
    pub k: usize,
    #[arg(long, default_value_t = capreward_core::filtering::DEFAULT_TAU_IMG)]
    pub tau_img: f64,
    #[arg(long, default_value_t = capreward_core::filtering::DEFAULT_TAU_BLIND)]
    pub tau_blind: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub probe_temperature: Option<f64>,
    /// Vision backend used for both conditions.
    #[arg(long)]
    pub backend: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub async fn run(args: FilterArgs, argv: &[String]) -> Result<i32, CliError> {
    let mut config = FilterConfig {
        k_rounds: args.k,
        tau_img: args.tau_img,
        tau_blind: args.tau_blind,
        global_seed: args.seed,
        ..FilterConfig::default()
    };
    if let Some(t) = args.probe_temperature {
        config.probe_temperature = t;
    }
    config.validate().map_err(usage)?;
    let template = PromptTemplate::builtin(&config.template_name).map_err(usage)?;
    let registry = open(&args.common)?;
    let prober = vision_backend(&registry, &args.backend)?;

    let questions: Vec<Mcq> = read_input(&args.qa)?;
    let images: BTreeMap<String, ImageRef> =
        read_input::<ImageRef>(&args.images)?.into_iter().map(|i| (i.image_id.clone(), i)).collect();
    let dataset: Vec<FilterInput> = questions
        .into_iter()
        .map(|q| {
            let image = images
                .get(&q.image_id)
                .cloned()
                .ok_or_else(|| format!("image `{}` is not in the manifest", q.image_id));
            (q, image)
        })
        .collect();

    let outcome = filter_qa_set(dataset, &config, &template, prober).await.map_err(|e| match e {
        FilterError::Probe { .. } => data(e),
        other => usage(other),
    })?;

    let dir = &args.out_dir;
    let kept: Vec<&Mcq> = outcome.kept.iter().map(|(q, _)| q).collect();
    let kept_verdicts: Vec<&FilterVerdict> = outcome.kept.iter().map(|(_, v)| v).collect();
    let files = [
        ("kept", dir.join("kept.jsonl")),
        ("kept_verdicts", dir.join("kept_verdicts.jsonl")),
        ("dropped", dir.join("dropped.jsonl")),
        ("errored", dir.join("errored.jsonl")),
        ("summary", dir.join("summary.json")),
    ];
    write_jsonl(&files[0].1, &kept).map_err(data)?;
    write_jsonl(&files[1].1, &kept_verdicts).map_err(data)?;
    write_jsonl(&files[2].1, &outcome.dropped).map_err(data)?;
    write_jsonl(&files[3].1, &outcome.errored).map_err(data)?;
    write_json(&files[4].1, &outcome.summary)?;

    let mut rec = Recorder::new("filter", argv);
    rec.config(serde_json::json!({ "filter": config, "prober": prober.profile() }));
    rec.seed("probe", config.global_seed);
    rec.input("qa", &args.qa);
    rec.input("images", &args.images);
    for (role, path) in &files {
        rec.output(role, path);
    }
    let s = &outcome.summary;
    eprintln!(
        "filter: {} kept, {} unanswerable, {} leaky, {} errored of {}",
        s.kept, s.dropped_unanswerable, s.dropped_leaky, s.errored, s.total
    );
    let tally = Tally { total: s.total, failed: s.errored };
    rec.finish(&dir.join("manifest.json"), Some(&registry), tally, args.common.max_fail_rate)
}
