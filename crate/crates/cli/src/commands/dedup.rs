use std::collections::BTreeSet;
use std::path::PathBuf;

use capreward_core::curation::{dedup_with_mode, flag_benchmark_overlap, DedupMode, DEFAULT_DEDUP_THRESHOLD};
use capreward_core::jsonl::write_jsonl;
use capreward_core::EmbeddingRecord;
use clap::{Args, ValueEnum};

use crate::backends::read_input;
use crate::manifest::{sibling, Recorder};
use crate::{data, usage, CliError, CommonArgs, Tally};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DedupModeArg {
    /// Drop a record similar to any earlier record, kept or not.
    AnyEarlier,
    /// Compare only against records already kept.
    KeptOnly,
}

impl From<DedupModeArg> for DedupMode {
    fn from(m: DedupModeArg) -> Self {
        match m {
            DedupModeArg::AnyEarlier => DedupMode::AnyEarlier,
            DedupModeArg::KeptOnly => DedupMode::KeptOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    /// Unit-norm embedding JSON-lines input.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DEDUP_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = DedupModeArg::AnyEarlier)]
    pub mode: DedupModeArg,
    /// Benchmark embeddings; matching images are flagged and removed.
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    /// Similarity at which an image counts as benchmark overlap; defaults to --threshold.
    #[arg(long)]
    pub benchmark_threshold: Option<f64>,
    /// Kept embeddings; duplicate and overlap logs go beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

fn check_threshold(name: &str, t: f64) -> Result<(), CliError> {
    if (-1.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(usage(format!("{name} must lie in [-1, 1]")))
    }
}

pub async fn run(args: DedupArgs, argv: &[String]) -> Result<i32, CliError> {
    let bench_threshold = args.benchmark_threshold.unwrap_or(args.threshold);
    check_threshold("--threshold", args.threshold)?;
    check_threshold("--benchmark-threshold", bench_threshold)?;
    let records: Vec<EmbeddingRecord> = read_input(&args.embeddings)?;
    let outcome = dedup_with_mode(&records, args.threshold, args.mode.into()).map_err(usage)?;

    let flags = match &args.benchmark {
        Some(path) => {
            let bench: Vec<EmbeddingRecord> = read_input(path)?;
            flag_benchmark_overlap(&records, &bench, bench_threshold).map_err(usage)?
        }
        None => Vec::new(),
    };
    let flagged: BTreeSet<&str> = flags.iter().map(|f| f.image_id.as_str()).collect();
    let kept: BTreeSet<&str> = outcome.kept.iter().map(String::as_str).filter(|id| !flagged.contains(id)).collect();
    let mut kept_records: Vec<&EmbeddingRecord> = records.iter().filter(|r| kept.contains(r.image_id.as_str())).collect();
    kept_records.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let dup_path = sibling(&args.out, "duplicates.jsonl");
    let overlap_path = sibling(&args.out, "overlap.jsonl");
    write_jsonl(&args.out, &kept_records).map_err(data)?;
    write_jsonl(&dup_path, &outcome.duplicates).map_err(data)?;
    write_jsonl(&overlap_path, &flags).map_err(data)?;

    let mut rec = Recorder::new("dedup", argv);
    rec.config(serde_json::json!({
        "threshold": args.threshold,
        "mode": DedupMode::from(args.mode),
        "benchmark_threshold": args.benchmark.as_ref().map(|_| bench_threshold),
    }));
    rec.input("embeddings", &args.embeddings);
    if let Some(path) = &args.benchmark {
        rec.input("benchmark", path);
    }
    rec.output("kept", &args.out);
    rec.output("duplicates", &dup_path);
    rec.output("overlap", &overlap_path);
    eprintln!(
        "dedup: kept {} of {} ({} duplicates, {} benchmark overlaps)",
        kept_records.len(),
        records.len(),
        outcome.duplicates.len(),
        flags.len()
    );
    let tally = Tally { total: records.len(), failed: 0 };
    rec.finish(&sibling(&args.out, "manifest.json"), None, tally, args.common.max_fail_rate)
}
