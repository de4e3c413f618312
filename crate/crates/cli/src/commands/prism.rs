use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use capreward_core::jsonl::write_jsonl;
use capreward_core::prism::{
    aggregate, render_table, run_answer_stage, run_caption_stage, EvalConfig, EvalItem, PrismError,
};
use capreward_core::template::DEFAULT_CAPTION_TEMPLATE;
use capreward_core::{ImageRef, PromptTemplate};
use clap::Args;

use crate::backends::{backend, open, read_input, vision_backend, MOCK_KEYWORD};
use crate::manifest::{write_json, Recorder};
use crate::{data, usage, CliError, CommonArgs, Tally};

#[derive(Debug, Args)]
pub struct EvalPrismArgs {
    /// Benchmark items as JSON lines.
    #[arg(long)]
    pub benchmark: PathBuf,
    /// JSON-lines image manifest for the benchmark images.
    #[arg(long)]
    pub images: PathBuf,
    /// Vision backend that writes the captions.
    #[arg(long)]
    pub captioner: String,
    /// Text-only backend that answers from captions.
    #[arg(long, default_value = MOCK_KEYWORD)]
    pub answerer: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = DEFAULT_CAPTION_TEMPLATE)]
    pub caption_template: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub async fn run(args: EvalPrismArgs, argv: &[String]) -> Result<i32, CliError> {
    let eval = EvalConfig { seed: args.seed, ..EvalConfig::default() };
    let caption_prompt = PromptTemplate::builtin(&args.caption_template).map_err(usage)?;
    let answer_prompt = PromptTemplate::builtin(&eval.template_name).map_err(usage)?;
    let registry = open(&args.common)?;
    let captioner = vision_backend(&registry, &args.captioner)?;
    let answerer = backend(&registry, &args.answerer)?;

    let items: Vec<EvalItem> = read_input(&args.benchmark)?;
    let manifest: BTreeMap<String, ImageRef> =
        read_input::<ImageRef>(&args.images)?.into_iter().map(|i| (i.image_id.clone(), i)).collect();
    let wanted: BTreeSet<&str> = items.iter().map(|i| i.image_id.as_str()).collect();
    let images: Vec<ImageRef> = wanted.iter().filter_map(|id| manifest.get(*id).cloned()).collect();

    let stage1 = run_caption_stage(&images, captioner, &caption_prompt, args.seed).await.map_err(usage)?;
    let stage2 = run_answer_stage(&stage1.captions, &items, answerer, &eval, &answer_prompt, &captioner.profile().name)
        .await
        .map_err(|e| match e {
            PrismError::Item { .. } => data(e),
            other => usage(other),
        })?;

    let dir = &args.out;
    let files = [
        ("captions", dir.join("captions.jsonl")),
        ("caption_failures", dir.join("caption_failures.jsonl")),
        ("excluded", dir.join("excluded.jsonl")),
        ("results", dir.join("results.json")),
        ("summary", dir.join("summary.json")),
        ("table", dir.join("table.txt")),
    ];
    write_jsonl(&files[0].1, &stage1.entries(&captioner.profile().name, &caption_prompt.name)).map_err(data)?;
    write_jsonl(&files[1].1, &stage1.failures).map_err(data)?;
    write_jsonl(&files[2].1, &stage2.excluded).map_err(data)?;
    write_json(&files[3].1, &stage2.results)?;
    let summary = aggregate(&stage2.results).ok();
    write_json(&files[4].1, &summary)?;
    let table = summary.as_ref().map(render_table).unwrap_or_default();
    std::fs::write(&files[5].1, &table).map_err(data)?;
    print!("{table}");

    let mut rec = Recorder::new("eval-prism", argv);
    rec.config(serde_json::json!({
        "eval": eval,
        "caption_template": caption_prompt.name,
        "captioner": captioner.profile(),
        "answerer": answerer.profile(),
    }));
    rec.seed("eval", args.seed);
    rec.input("benchmark", &args.benchmark);
    rec.input("images", &args.images);
    for (role, path) in &files {
        rec.output(role, path);
    }
    let tally = Tally { total: items.len(), failed: stage2.excluded.len() };
    rec.finish(&dir.join("manifest.json"), Some(&registry), tally, args.common.max_fail_rate)
}
