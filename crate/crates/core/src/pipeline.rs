//! End-to-end run: simulate a campaign, build consensus with both methods,
//! and score each against the known ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use crate::consensus::{
    build_consensus, estimate_reliability, ConsensusMethod, ConsensusOptions, ConsensusResult,
};
use crate::error::{Error, Result};
use crate::ingest::{write_coco, write_event_log, Dataset};
use crate::model::AnnotationEvent;
use crate::simulator::{generate_truth, simulate_campaign, SimConfig};

/// Label accuracy of one consensus run against the truth, overall and per
/// class.
#[derive(Debug, Clone)]
pub struct AccuracyReport {
    pub correct: usize,
    pub total: usize,
    /// per class: (correct, total truth instances)
    pub per_class: Vec<(usize, usize)>,
}

impl AccuracyReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Score consensus boxes against truth: each truth box is matched to the
/// highest-IoU consensus box of its image (IoU >= 0.5, one consensus box
/// per truth box) and counts as correct when the labels agree.
pub fn score_against_truth(consensus: &ConsensusResult, truth: &Dataset) -> AccuracyReport {
    let num_classes = truth.taxonomy.len();
    let mut per_class = vec![(0usize, 0usize); num_classes];
    let mut correct = 0;
    let mut total = 0;

    let mut consensus_by_image: BTreeMap<i64, Vec<(usize, &crate::model::ConsensusBox)>> =
        BTreeMap::new();
    for (idx, (image_id, b)) in consensus.boxes.iter().enumerate() {
        consensus_by_image
            .entry(*image_id)
            .or_default()
            .push((idx, b));
    }

    let mut taken: std::collections::HashSet<usize> = std::collections::HashSet::new();
    for gt in &truth.boxes {
        total += 1;
        per_class[gt.label].1 += 1;
        let Some(candidates) = consensus_by_image.get(&gt.image_id) else {
            continue;
        };
        let best = candidates
            .iter()
            .filter(|(idx, _)| !taken.contains(idx))
            .map(|(idx, b)| (gt.bbox.iou(&b.bbox), *idx, b))
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if let Some((iou, idx, b)) = best {
            if iou >= 0.5 {
                taken.insert(idx);
                if b.label == gt.label {
                    correct += 1;
                    per_class[gt.label].0 += 1;
                }
            }
        }
    }
    AccuracyReport {
        correct,
        total,
        per_class,
    }
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub mv: AccuracyReport,
    pub staple: AccuracyReport,
    pub truth_boxes: usize,
    pub events: usize,
}

/// Simulate -> consensus (both methods) -> score against truth. When
/// `out_dir` is given, writes the event log, the truth and consensus
/// datasets, and the comparison CSV there.
pub fn run_pipeline(
    config: &SimConfig,
    jobs: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<PipelineReport> {
    let run = || run_pipeline_inner(config, out_dir);
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Simulation(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

fn run_pipeline_inner(config: &SimConfig, out_dir: Option<&Path>) -> Result<PipelineReport> {
    let truth = generate_truth(config)?;
    let campaign = simulate_campaign(&truth, config)?;

    let gold_truth = gold_subset(&truth);
    let gold_events: Vec<AnnotationEvent> = campaign
        .events
        .iter()
        .filter(|e| gold_truth.images.iter().any(|i| i.image_id == e.image_id))
        .cloned()
        .collect();
    let profiles = estimate_reliability(&gold_events, &gold_truth);

    let mv = build_consensus(
        &campaign.events,
        &truth.images,
        &truth.taxonomy,
        &profiles,
        &ConsensusOptions::new(ConsensusMethod::MajorityVote, config.seed),
    )?;
    let staple = build_consensus(
        &campaign.events,
        &truth.images,
        &truth.taxonomy,
        &profiles,
        &ConsensusOptions::new(ConsensusMethod::Staple, config.seed),
    )?;

    let report = PipelineReport {
        mv: score_against_truth(&mv, &truth),
        staple: score_against_truth(&staple, &truth),
        truth_boxes: truth.boxes.len(),
        events: campaign.events.len(),
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_event_log(&campaign.events, dir.join("events.jsonl"))?;
        write_coco(&truth, dir.join("truth.json"))?;
        write_coco(&mv.to_dataset(), dir.join("consensus_mv.json"))?;
        write_coco(&staple.to_dataset(), dir.join("consensus_staple.json"))?;
        write_comparison_csv(&report, &truth, &dir.join("report.csv"))?;
    }
    Ok(report)
}

fn gold_subset(truth: &Dataset) -> Dataset {
    Dataset {
        taxonomy: truth.taxonomy.clone(),
        images: truth.images.iter().filter(|i| i.is_gold).cloned().collect(),
        boxes: truth
            .boxes
            .iter()
            .filter(|b| {
                truth
                    .images
                    .iter()
                    .any(|i| i.is_gold && i.image_id == b.image_id)
            })
            .cloned()
            .collect(),
    }
}

fn write_comparison_csv(report: &PipelineReport, truth: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Scoring(format!("{}: {e}", path.display())))?;
    let io_err = |e: csv::Error| Error::Scoring(format!("{}: {e}", path.display()));
    writer
        .write_record(["scope", "class", "mv_accuracy", "staple_accuracy"])
        .map_err(io_err)?;
    writer
        .write_record([
            "overall".to_string(),
            String::new(),
            format!("{:.6}", report.mv.accuracy()),
            format!("{:.6}", report.staple.accuracy()),
        ])
        .map_err(io_err)?;
    for (class, name) in truth.taxonomy.names().iter().enumerate() {
        let (mv_correct, mv_total) = report.mv.per_class[class];
        let (st_correct, _) = report.staple.per_class[class];
        if mv_total == 0 {
            continue;
        }
        writer
            .write_record([
                "class".to_string(),
                name.clone(),
                format!("{:.6}", mv_correct as f64 / mv_total as f64),
                format!("{:.6}", st_correct as f64 / mv_total as f64),
            ])
            .map_err(io_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_pipeline_is_exact() {
        let config = SimConfig {
            images: 15,
            annotator_accuracies: vec![1.0; 6],
            seed: 11,
            ..SimConfig::default()
        };
        let report = run_pipeline(&config, None, None).unwrap();
        assert_eq!(report.mv.correct, report.mv.total);
        assert_eq!(report.staple.correct, report.staple.total);
        assert!(report.truth_boxes > 0);
    }

    #[test]
    fn pipeline_outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let config = SimConfig {
            images: 6,
            annotator_accuracies: vec![0.9; 6],
            seed: 3,
            ..SimConfig::default()
        };
        run_pipeline(&config, Some(2), Some(dir.path())).unwrap();
        for name in [
            "events.jsonl",
            "truth.json",
            "consensus_mv.json",
            "consensus_staple.json",
            "report.csv",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
    }
}
