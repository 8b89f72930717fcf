//! Command-line entry point wiring the library modules into the
//! simulate -> ingest -> consensus -> score -> split -> eval pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use boxtruth::consensus::{
    build_consensus, build_consensus_running, estimate_reliability, ConsensusMethod,
    ConsensusOptions,
};
use boxtruth::curation::{
    difficulty_score, disagreement_score, normalize_disagreement, stratified_split,
};
use boxtruth::error::{Error, Result};
use boxtruth::evaluation::{consolidate_to_coco, map_metrics, CocoClass, Detection, GroundTruth};
use boxtruth::ingest::{
    parse_coco, parse_coco_results, parse_event_log, validate_dataset, write_coco, write_event_log,
    Dataset,
};
use boxtruth::model::{ClassTaxonomy, ImageRecord, ScoreCard, ScoringConfig};
use boxtruth::pipeline::run_pipeline;
use boxtruth::simulator::{generate_truth, simulate_campaign, SimConfig};

#[derive(Parser)]
#[command(
    name = "boxtruth",
    version,
    about = "Consensus, curation, and evaluation for multi-annotator bounding-box datasets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a COCO dataset or an annotation event log
    Ingest(IngestArgs),
    /// Build consensus annotations from an event log
    Consensus(ConsensusArgs),
    /// Score images by inter-model disagreement and difficulty
    Score(ScoreArgs),
    /// Stratified train/validation split
    Split(SplitArgs),
    /// Evaluate detections against ground truth (mAP)
    Eval(EvalArgs),
    /// Generate a synthetic annotation campaign
    Simulate(SimulateArgs),
    /// simulate -> consensus (both methods) -> compare against truth
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// COCO annotation file to validate
    #[arg(long, conflicts_with = "events")]
    coco: Option<PathBuf>,
    /// Event log (JSON lines) to validate
    #[arg(long)]
    events: Option<PathBuf>,
    /// Taxonomy file, one class name per line (default: the 14 UVH classes)
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Write the validation report as CSV
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ConsensusArgs {
    #[arg(long)]
    events: PathBuf,
    /// Gold ground truth (COCO) for reliability estimation
    #[arg(long)]
    gold: Option<PathBuf>,
    /// mv | staple
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// COCO file supplying image records for the output (default: 1920x1080
    /// records inferred from the event log)
    #[arg(long)]
    images: Option<PathBuf>,
    /// campaign-end | running
    #[arg(long, default_value = "campaign-end")]
    profiles: String,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Per-model prediction files (COCO), at least two
    #[arg(long, num_args = 1.., required = true)]
    predictions: Vec<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    include_diversity: bool,
    #[arg(long)]
    include_density: bool,
    /// Scorecard CSV output
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    coco: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_val: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground truth (COCO)
    #[arg(long)]
    gt: PathBuf,
    /// Detections (COCO results array)
    #[arg(long)]
    dets: PathBuf,
    /// Consolidate UVH classes onto COCO Car/Bus/Truck before evaluating
    #[arg(long)]
    consolidate_coco: bool,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Report CSV output
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Flat key=value simulation config
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_events: PathBuf,
    #[arg(long)]
    out_truth: PathBuf,
    #[arg(long)]
    out_profiles: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for logs, consensus files, and the comparison CSV
    #[arg(long)]
    out: PathBuf,
    /// Worker thread count (results are identical regardless)
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
}

fn load_taxonomy(path: &Option<PathBuf>) -> Result<ClassTaxonomy> {
    match path {
        None => Ok(ClassTaxonomy::uvh()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ClassTaxonomy::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
        }
    }
}

fn csv_err(path: &std::path::Path, e: csv::Error) -> Error {
    Error::Scoring(format!("{}: {e}", path.display()))
}

fn run_ingest(args: &IngestArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    match (&args.coco, &args.events) {
        (Some(path), _) => {
            let dataset = parse_coco(path, &taxonomy)?;
            let report = validate_dataset(&dataset);
            println!(
                "{} images, {} boxes, {} out of bounds",
                report.total_images,
                report.total_boxes,
                report.out_of_bounds.len()
            );
            for (class, &count) in report.class_counts.iter().enumerate() {
                if count > 0 {
                    println!("  {}: {count}", taxonomy.name(class).unwrap());
                }
            }
            if let Some(out) = &args.report {
                let mut writer = csv::Writer::from_path(out).map_err(|e| csv_err(out, e))?;
                writer
                    .write_record(["class", "count"])
                    .map_err(|e| csv_err(out, e))?;
                for (class, &count) in report.class_counts.iter().enumerate() {
                    writer
                        .write_record([taxonomy.name(class).unwrap(), &count.to_string()])
                        .map_err(|e| csv_err(out, e))?;
                }
                writer.flush().map_err(|e| Error::io(out, e))?;
            }
            Ok(())
        }
        (None, Some(path)) => {
            let events = parse_event_log(path, &taxonomy)?;
            let images: std::collections::HashSet<i64> =
                events.iter().map(|e| e.image_id).collect();
            println!("{} events across {} images", events.len(), images.len());
            Ok(())
        }
        (None, None) => Err(Error::Coco("one of --coco or --events is required".into())),
    }
}

fn run_consensus(args: &ConsensusArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let events = parse_event_log(&args.events, &taxonomy)?;
    let method: ConsensusMethod = args.method.parse()?;
    let mut options = ConsensusOptions::new(method, args.seed);
    options.epsilon = args.eps;
    options.max_iterations = args.max_iter;

    let images: Vec<ImageRecord> = match &args.images {
        Some(path) => parse_coco(path, &taxonomy)?.images,
        None => {
            let mut ids: Vec<i64> = events.iter().map(|e| e.image_id).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.into_iter()
                .map(|image_id| ImageRecord {
                    image_id,
                    width: 1920,
                    height: 1080,
                    is_gold: false,
                })
                .collect()
        }
    };

    let gold = match &args.gold {
        Some(path) => Some(parse_coco(path, &taxonomy)?),
        None => None,
    };
    let result = match args.profiles.as_str() {
        "running" => {
            let gold =
                gold.ok_or_else(|| Error::Consensus("--profiles running requires --gold".into()))?;
            build_consensus_running(&events, &images, &taxonomy, &gold, &options)
        }
        "campaign-end" => {
            let profiles = match &gold {
                Some(gold) => {
                    let gold_ids: std::collections::HashSet<i64> = gold
                        .images
                        .iter()
                        .filter(|i| i.is_gold)
                        .map(|i| i.image_id)
                        .collect();
                    let gold_events: Vec<_> = events
                        .iter()
                        .filter(|e| gold_ids.contains(&e.image_id))
                        .cloned()
                        .collect();
                    estimate_reliability(&gold_events, gold)
                }
                None => BTreeMap::new(),
            };
            build_consensus(&events, &images, &taxonomy, &profiles, &options)
        }
        other => Err(Error::Consensus(format!("unknown profiles mode {other:?}"))),
    }?;

    println!("{} consensus boxes", result.boxes.len());
    write_coco(&result.to_dataset(), &args.out)
}

fn run_score(args: &ScoreArgs) -> Result<()> {
    if args.predictions.len() < 2 {
        return Err(Error::Scoring("need at least 2 prediction files".into()));
    }
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let models: Vec<Dataset> = args
        .predictions
        .iter()
        .map(|p| parse_coco(p, &taxonomy))
        .collect::<Result<_>>()?;

    // image ids and records come from the first model's file
    let reference = &models[0];
    let mut config = ScoringConfig::new(
        reference
            .images
            .iter()
            .map(|i| reference.boxes_for(i.image_id).count())
            .max()
            .unwrap_or(1)
            .max(1),
        taxonomy.len(),
    )?;
    config.include_diversity = args.include_diversity;
    config.include_density = args.include_density;

    let mut raw = Vec::new();
    let mut cards: Vec<ScoreCard> = Vec::new();
    for image in &reference.images {
        let counts: Vec<Vec<u64>> = models
            .iter()
            .map(|m| {
                let mut row = vec![0u64; taxonomy.len()];
                for b in m.boxes_for(image.image_id) {
                    row[b.label] += 1;
                }
                row
            })
            .collect();
        let d = disagreement_score(&counts)?;
        raw.push(d.clone());
    }
    let norms =
        normalize_disagreement(&raw.iter().map(|d| d.total_disagreement).collect::<Vec<_>>())?;
    for ((image, d), norm) in reference.images.iter().zip(&raw).zip(&norms) {
        let boxes: Vec<_> = reference
            .boxes_for(image.image_id)
            .map(|b| (b.bbox, b.label))
            .collect();
        let mut card = difficulty_score(&boxes, image, *norm, &config)?;
        card.count_stddev_sum = d.count_stddev_sum;
        card.max_pairwise_disagreement = d.max_pairwise_disagreement;
        card.total_disagreement = d.total_disagreement;
        cards.push(card);
    }

    let out = &args.out;
    let mut writer = csv::Writer::from_path(out).map_err(|e| csv_err(out, e))?;
    writer
        .write_record([
            "image_id",
            "count_stddev_sum",
            "max_pairwise_disagreement",
            "total_disagreement",
            "disagreement_norm",
            "count_term",
            "size_term",
            "density",
            "diversity",
            "iou_overlap",
            "disagreement_term",
            "difficulty",
        ])
        .map_err(|e| csv_err(out, e))?;
    for c in &cards {
        writer
            .write_record([
                c.image_id.to_string(),
                format!("{:.6}", c.count_stddev_sum),
                c.max_pairwise_disagreement.to_string(),
                format!("{:.6}", c.total_disagreement),
                format!("{:.6}", c.disagreement_norm),
                format!("{:.6}", c.count_term),
                format!("{:.6}", c.size_term),
                format!("{:.6}", c.density),
                format!("{:.6}", c.diversity),
                format!("{:.6}", c.iou_overlap),
                format!("{:.6}", c.disagreement_term),
                format!("{:.6}", c.difficulty),
            ])
            .map_err(|e| csv_err(out, e))?;
    }
    writer.flush().map_err(|e| Error::io(out, e))?;
    println!("{} images scored", cards.len());
    Ok(())
}

fn run_split(args: &SplitArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let dataset = parse_coco(&args.coco, &taxonomy)?;
    let (train, val) = stratified_split(&dataset, args.fraction, args.seed)?;
    println!(
        "{} train / {} val images",
        train.images.len(),
        val.images.len()
    );
    write_coco(&train, &args.out_train)?;
    write_coco(&val, &args.out_val)
}

fn consolidate_pair(
    dets: Vec<Detection>,
    gts: Vec<GroundTruth>,
    taxonomy: &ClassTaxonomy,
) -> Result<(Vec<Detection>, Vec<GroundTruth>, ClassTaxonomy)> {
    let coco_taxonomy = ClassTaxonomy::new(["Car", "Bus", "Truck"])?;
    let map_label = |label: usize| -> Result<Option<usize>> {
        Ok(consolidate_to_coco(label, taxonomy)?.map(|c| match c {
            CocoClass::Car => 0,
            CocoClass::Bus => 1,
            CocoClass::Truck => 2,
        }))
    };
    let mut out_dets = Vec::new();
    for mut d in dets {
        if let Some(label) = map_label(d.label)? {
            d.label = label;
            out_dets.push(d);
        }
    }
    let mut out_gts = Vec::new();
    for mut g in gts {
        if let Some(label) = map_label(g.label)? {
            g.label = label;
            out_gts.push(g);
        }
    }
    Ok((out_dets, out_gts, coco_taxonomy))
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let gt_dataset = parse_coco(&args.gt, &taxonomy)?;
    let gts: Vec<GroundTruth> = gt_dataset
        .boxes
        .iter()
        .map(|b| GroundTruth {
            image_id: b.image_id,
            bbox: b.bbox,
            label: b.label,
        })
        .collect();
    let dets = parse_coco_results(&args.dets, &taxonomy)?;

    let (dets, gts, taxonomy) = if args.consolidate_coco {
        consolidate_pair(dets, gts, &taxonomy)?
    } else {
        (dets, gts, taxonomy)
    };

    let report = map_metrics(&dets, &gts, &taxonomy)?;
    let out = &args.out;
    let mut writer = csv::Writer::from_path(out).map_err(|e| csv_err(out, e))?;
    writer
        .write_record(["class", "ap50", "ap75", "ap5095"])
        .map_err(|e| csv_err(out, e))?;
    for (pos, &class) in report.classes.iter().enumerate() {
        let row = &report.ap[pos];
        let ap5095 = row.iter().sum::<f64>() / row.len() as f64;
        writer
            .write_record([
                taxonomy.name(class).unwrap().to_string(),
                format!("{:.6}", row[0]),
                format!("{:.6}", row[5]),
                format!("{:.6}", ap5095),
            ])
            .map_err(|e| csv_err(out, e))?;
    }
    writer
        .write_record([
            "mAP".to_string(),
            format!("{:.6}", report.map50),
            format!("{:.6}", report.map75),
            format!("{:.6}", report.map5095),
        ])
        .map_err(|e| csv_err(out, e))?;
    writer.flush().map_err(|e| Error::io(out, e))?;
    println!(
        "mAP50 {:.4}  mAP75 {:.4}  mAP50:95 {:.4}",
        report.map50, report.map75, report.map5095
    );
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let config = SimConfig::from_file(&args.config)?;
    let truth = generate_truth(&config)?;
    let campaign = simulate_campaign(&truth, &config)?;
    write_event_log(&campaign.events, &args.out_events)?;
    write_coco(&truth, &args.out_truth)?;

    let out = &args.out_profiles;
    let mut writer = csv::Writer::from_path(out).map_err(|e| csv_err(out, e))?;
    writer
        .write_record(["annotator_id", "class", "sensitivity", "specificity"])
        .map_err(|e| csv_err(out, e))?;
    let taxonomy = config.taxonomy();
    for profile in &campaign.true_profiles {
        for class in 0..taxonomy.len() {
            writer
                .write_record([
                    profile.annotator_id.to_string(),
                    taxonomy.name(class).unwrap().to_string(),
                    format!("{:.6}", profile.sensitivity[class]),
                    format!("{:.6}", profile.specificity[class]),
                ])
                .map_err(|e| csv_err(out, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(out, e))?;
    println!(
        "{} events, {} truth boxes, {} annotators",
        campaign.events.len(),
        truth.boxes.len(),
        campaign.true_profiles.len()
    );
    Ok(())
}

fn run_pipeline_cmd(args: &PipelineArgs) -> Result<()> {
    let mut config = SimConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let report = run_pipeline(&config, args.jobs, Some(&args.out))?;
    println!(
        "MV accuracy {:.4} ({}/{})  STAPLE accuracy {:.4} ({}/{})",
        report.mv.accuracy(),
        report.mv.correct,
        report.mv.total,
        report.staple.accuracy(),
        report.staple.correct,
        report.staple.total
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(args) => run_ingest(args),
        Command::Consensus(args) => run_consensus(args),
        Command::Score(args) => run_score(args),
        Command::Split(args) => run_split(args),
        Command::Eval(args) => run_eval(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Pipeline(args) => run_pipeline_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
