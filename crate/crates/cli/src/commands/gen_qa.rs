use std::collections::HashSet;
use std::path::PathBuf;

use capreward_core::curation::{generate_qa, CurationError, Rejection};
use capreward_core::jsonl::write_jsonl;
use capreward_core::{GenSpec, ImageRef, Mcq, PromptTemplate};
use clap::Args;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::backends::{open, read_input, vision_backend};
use crate::manifest::{sibling, Recorder};
use crate::{data, usage, CliError, CommonArgs, Tally};

#[derive(Debug, Args)]
pub struct GenQaArgs {
    /// JSON-lines image manifest.
    #[arg(long)]
    pub images: PathBuf,
    /// Questions requested per image.
    #[arg(long, default_value_t = 5)]
    pub per_image: usize,
    #[arg(long, default_value_t = 4)]
    pub option_count: usize,
    #[arg(long)]
    pub backend: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = capreward_core::template::DEFAULT_GENERATION_TEMPLATE)]
    pub template: String,
    /// MCQ JSON-lines output; rejections, errors and the manifest go beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub error: String,
}

pub async fn run(args: GenQaArgs, argv: &[String]) -> Result<i32, CliError> {
    let spec = GenSpec {
        per_image: args.per_image,
        option_count: args.option_count,
        template_name: args.template.clone(),
        seed: args.seed,
        ..GenSpec::default()
    };
    spec.validate().map_err(usage)?;
    let template = PromptTemplate::builtin(&spec.template_name).map_err(usage)?;
    let registry = open(&args.common)?;
    let generator = vision_backend(&registry, &args.backend)?;
    let images: Vec<ImageRef> = read_input(&args.images)?;
    let mut ids = HashSet::new();
    for image in &images {
        image.validate().map_err(usage)?;
        if !ids.insert(image.image_id.as_str()) {
            return Err(usage(format!("duplicate image_id `{}` in {}", image.image_id, args.images.display())));
        }
    }

    let results: Vec<(&ImageRef, Result<_, CurationError>)> = stream::iter(&images)
        .map(|image| {
            let (spec, template) = (&spec, &template);
            async move { (image, generate_qa(image, spec, template, generator).await) }
        })
        .buffered(generator.profile().in_flight_limit.max(1))
        .collect()
        .await;

    let mut questions: Vec<Mcq> = Vec::new();
    let mut rejections: Vec<Rejection> = Vec::new();
    let mut failures = Vec::new();
    for (image, result) in results {
        match result {
            Ok(generated) => {
                questions.extend(generated.questions);
                rejections.extend(generated.rejections);
            }
            Err(CurationError::NothingParsed { rejections: r, .. }) => {
                rejections.extend(r);
                failures.push(ImageFailure { image_id: image.image_id.clone(), error: "no usable questions".into() });
            }
            Err(e) => failures.push(ImageFailure { image_id: image.image_id.clone(), error: e.to_string() }),
        }
    }

    let rejections_path = sibling(&args.out, "rejections.jsonl");
    let errors_path = sibling(&args.out, "errors.jsonl");
    write_jsonl(&args.out, &questions).map_err(data)?;
    write_jsonl(&rejections_path, &rejections).map_err(data)?;
    write_jsonl(&errors_path, &failures).map_err(data)?;

    let mut rec = Recorder::new("gen-qa", argv);
    rec.config(serde_json::json!({ "spec": spec, "generator": generator.profile() }));
    rec.seed("generation", spec.seed);
    rec.input("images", &args.images);
    rec.output("questions", &args.out);
    rec.output("rejections", &rejections_path);
    rec.output("errors", &errors_path);
    let tally = Tally { total: images.len(), failed: failures.len() };
    eprintln!(
        "gen-qa: {} questions from {} images ({} rejected blocks, {} failed images)",
        questions.len(),
        images.len(),
        rejections.len(),
        failures.len()
    );
    rec.finish(&sibling(&args.out, "manifest.json"), Some(&registry), tally, args.common.max_fail_rate)
}
