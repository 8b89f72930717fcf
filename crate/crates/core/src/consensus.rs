//! Consensus labeling: Majority Voting with random tie-break, annotator
//! reliability estimation from gold images, and the adapted STAPLE EM that
//! jointly infers true labels and per-annotator confusion matrices.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::correspondence::{
    average_geometry, group_events, resolve_retention, DEFAULT_IOU_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, GtBox};
use crate::model::{
    AnnotationEvent, AnnotatorProfile, BoxCluster, ClassTaxonomy, ConsensusBox, ImageRecord,
    ReliabilityModel, DEFAULT_SENSITIVITY, DEFAULT_SPECIFICITY,
};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_MAX_ITERATIONS: usize = 100;
/// Laplace smoothing on gold trial counts.
pub const GOLD_SMOOTHING: f64 = 1.0;
/// Minimum IoU for matching a gold event to a gold truth box.
const GOLD_MATCH_IOU: f64 = 0.5;

/// Most frequent label among the cluster's live members; ties are broken
/// uniformly at random.
pub fn majority_vote<R: Rng>(cluster: &BoxCluster, rng: &mut R) -> Result<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for event in cluster.live_members() {
        *counts.entry(event.label).or_insert(0) += 1;
    }
    if counts.is_empty() {
        return Err(Error::Consensus(format!(
            "cluster {} has no labeled members",
            cluster.cluster_id
        )));
    }
    let best = *counts.values().max().unwrap();
    let tied: Vec<usize> = counts
        .iter()
        .filter(|(_, &c)| c == best)
        .map(|(&label, _)| label)
        .collect();
    Ok(*tied.choose(rng).unwrap())
}

/// Estimate per-annotator sensitivity/specificity from events on gold
/// images against the known gold truth.
///
/// An event counts as a trial when its box overlaps a gold box of the same
/// image at IoU >= 0.5; the gold box's class is the true class. Rates are
/// Laplace-smoothed; classes with no trials fall back to the cold-start
/// defaults.
pub fn estimate_reliability(
    gold_events: &[AnnotationEvent],
    gold_truth: &Dataset,
) -> BTreeMap<u32, AnnotatorProfile> {
    let c = gold_truth.taxonomy.len();
    let mut gold_boxes: BTreeMap<i64, Vec<&GtBox>> = BTreeMap::new();
    for b in &gold_truth.boxes {
        gold_boxes.entry(b.image_id).or_default().push(b);
    }

    // (reported, true) trials per annotator
    let mut trials: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for event in gold_events {
        let Some(bbox) = event.bbox else { continue };
        let Some(candidates) = gold_boxes.get(&event.image_id) else {
            continue;
        };
        let best = candidates
            .iter()
            .map(|g| (g.bbox.iou(&bbox), g.label))
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if let Some((iou, true_label)) = best {
            if iou >= GOLD_MATCH_IOU {
                trials
                    .entry(event.annotator_id)
                    .or_default()
                    .push((event.label, true_label));
            }
        }
    }

    trials
        .into_iter()
        .map(|(annotator_id, trials)| (annotator_id, profile_from_trials(annotator_id, &trials, c)))
        .collect()
}

fn profile_from_trials(annotator_id: u32, trials: &[(usize, usize)], c: usize) -> AnnotatorProfile {
    let mut correct = vec![0u64; c];
    let mut total = vec![0u64; c];
    let mut reject_correct = vec![0u64; c];
    let mut reject_total = vec![0u64; c];
    for &(reported, truth) in trials {
        total[truth] += 1;
        if reported == truth {
            correct[truth] += 1;
        }
        for k in 0..c {
            if truth != k {
                reject_total[k] += 1;
                if reported != k {
                    reject_correct[k] += 1;
                }
            }
        }
    }
    let a = GOLD_SMOOTHING;
    let rate = |correct: u64, total: u64, default: f64| {
        if total == 0 {
            default
        } else {
            (correct as f64 + a) / (total as f64 + 2.0 * a)
        }
    };
    AnnotatorProfile {
        annotator_id,
        sensitivity: (0..c)
            .map(|k| rate(correct[k], total[k], DEFAULT_SENSITIVITY))
            .collect(),
        specificity: (0..c)
            .map(|k| rate(reject_correct[k], reject_total[k], DEFAULT_SPECIFICITY))
            .collect(),
        gold_trials: (0..c).map(|k| (correct[k], total[k])).collect(),
    }
}

/// Build an initial confusion matrix from a profile's (S, T) pairs: the
/// diagonal carries the class sensitivity, the remaining mass is spread
/// over off-diagonal cells in proportion to each target class's
/// false-positive rate (1 - specificity), uniform when all specificities
/// are 1.
#[allow(clippy::needless_range_loop)]
pub fn confusion_from_profile(profile: &AnnotatorProfile) -> Vec<Vec<f64>> {
    let c = profile.sensitivity.len();
    let mut theta = vec![vec![0.0; c]; c];
    for k in 0..c {
        let sens = profile.sensitivity[k].clamp(0.01, 0.99);
        theta[k][k] = sens;
        let fp_weights: Vec<f64> = (0..c)
            .map(|l| {
                if l == k {
                    0.0
                } else {
                    1.0 - profile.specificity[l]
                }
            })
            .collect();
        let weight_sum: f64 = fp_weights.iter().sum();
        let off_mass = 1.0 - sens;
        for l in 0..c {
            if l == k {
                continue;
            }
            theta[k][l] = if weight_sum > 0.0 {
                off_mass * fp_weights[l] / weight_sum
            } else {
                off_mass / (c - 1) as f64
            };
        }
    }
    theta
}

/// Annotator-by-cluster label matrix for one image. `None` marks an
/// annotator who did not submit a label for that cluster.
#[derive(Debug, Clone)]
pub struct AnnotationMatrix {
    pub annotator_ids: Vec<u32>,
    /// entries[row][col] = label reported by annotator `row` on cluster `col`
    pub entries: Vec<Vec<Option<usize>>>,
}

impl AnnotationMatrix {
    /// One row per annotator appearing in any cluster, one column per
    /// cluster; delete events contribute no label.
    pub fn from_clusters(clusters: &[BoxCluster]) -> Self {
        let mut annotator_ids: Vec<u32> = clusters
            .iter()
            .flat_map(|c| c.members.iter().map(|m| m.annotator_id))
            .collect();
        annotator_ids.sort_unstable();
        annotator_ids.dedup();
        let row_of: BTreeMap<u32, usize> = annotator_ids
            .iter()
            .enumerate()
            .map(|(i, &a)| (a, i))
            .collect();
        let mut entries = vec![vec![None; clusters.len()]; annotator_ids.len()];
        for (col, cluster) in clusters.iter().enumerate() {
            for member in cluster.live_members() {
                entries[row_of[&member.annotator_id]][col] = Some(member.label);
            }
        }
        Self {
            annotator_ids,
            entries,
        }
    }

    pub fn num_annotators(&self) -> usize {
        self.entries.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }
}

/// Fitted STAPLE state for one image.
#[derive(Debug, Clone)]
pub struct StapleOutcome {
    /// Consensus label per cluster (argmax of the posterior).
    pub labels: Vec<usize>,
    /// Per-cluster posterior over classes; each row sums to 1.
    pub posteriors: Vec<Vec<f64>>,
    pub model: ReliabilityModel,
    pub iterations: usize,
    /// Observed-data log-likelihood after each E-step.
    pub log_likelihoods: Vec<f64>,
}

/// E-step: posterior over true classes per cluster, in log space.
pub fn e_step(
    priors: &[f64],
    confusion: &[Vec<Vec<f64>>],
    matrix: &AnnotationMatrix,
) -> Vec<Vec<f64>> {
    let c = priors.len();
    (0..matrix.num_clusters())
        .map(|i| {
            let mut log_w: Vec<f64> = (0..c)
                .map(|k| {
                    let mut acc = priors[k].ln();
                    for (j, row) in matrix.entries.iter().enumerate() {
                        if let Some(reported) = row[i] {
                            acc += confusion[j][k][reported].ln();
                        }
                    }
                    acc
                })
                .collect();
            let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in log_w.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in log_w.iter_mut() {
                *v /= sum;
            }
            log_w
        })
        .collect()
}

/// Observed-data log-likelihood sum_i log sum_k pi_k prod_j theta_j(M_ji, k).
pub fn observed_log_likelihood(
    priors: &[f64],
    confusion: &[Vec<Vec<f64>>],
    matrix: &AnnotationMatrix,
) -> f64 {
    let c = priors.len();
    (0..matrix.num_clusters())
        .map(|i| {
            let log_terms: Vec<f64> = (0..c)
                .map(|k| {
                    let mut acc = priors[k].ln();
                    for (j, row) in matrix.entries.iter().enumerate() {
                        if let Some(reported) = row[i] {
                            acc += confusion[j][k][reported].ln();
                        }
                    }
                    acc
                })
                .collect();
            let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + log_terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        })
        .sum()
}

/// Run the adapted STAPLE EM on one image's annotation matrix.
///
/// The prior starts uniform; annotator confusions start from the gold-derived
/// profiles. Each iteration runs the E-step in log space, then re-estimates
/// the prior and the per-annotator confusions from the posterior with
/// additive smoothing. Stops when the max-norm change of the confusions
/// falls below `epsilon` or after `max_iterations`.
pub fn staple_consensus(
    matrix: &AnnotationMatrix,
    profiles: &[AnnotatorProfile],
    num_classes: usize,
    max_iterations: usize,
    epsilon: f64,
) -> Result<StapleOutcome> {
    if num_classes < 2 {
        return Err(Error::Consensus("need at least 2 classes".into()));
    }
    if matrix.num_annotators() == 0 || matrix.num_clusters() == 0 {
        return Err(Error::Consensus("annotation matrix is empty".into()));
    }
    if profiles.len() != matrix.num_annotators() {
        return Err(Error::Consensus(format!(
            "{} profiles for {} annotators",
            profiles.len(),
            matrix.num_annotators()
        )));
    }
    for i in 0..matrix.num_clusters() {
        if matrix.entries.iter().all(|row| row[i].is_none()) {
            return Err(Error::Consensus(format!(
                "cluster column {i} has no labels"
            )));
        }
    }

    let c = num_classes;
    let mut priors = vec![1.0 / c as f64; c];
    let mut confusion: Vec<Vec<Vec<f64>>> = profiles.iter().map(confusion_from_profile).collect();

    let mut posteriors = Vec::new();
    let mut log_likelihoods = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iterations {
        iterations += 1;
        log_likelihoods.push(observed_log_likelihood(&priors, &confusion, matrix));
        posteriors = e_step(&priors, &confusion, matrix);

        // M-step: class prior
        let n = matrix.num_clusters() as f64;
        for k in 0..c {
            priors[k] = posteriors.iter().map(|w| w[k]).sum::<f64>() / n;
        }

        // M-step: exact weighted-count confusion update. With strictly
        // positive rows at initialization every posterior stays positive,
        // so counts can only vanish through underflow; a zero row falls
        // back to uniform. (Additive smoothing here would make the update
        // maximize a penalized objective and break the guarantee that the
        // observed-data log-likelihood never decreases.)
        let mut max_change = 0.0f64;
        for (j, row) in matrix.entries.iter().enumerate() {
            let mut counts = vec![vec![0.0f64; c]; c];
            for (i, entry) in row.iter().enumerate() {
                if let Some(reported) = entry {
                    for k in 0..c {
                        counts[k][*reported] += posteriors[i][k];
                    }
                }
            }
            for k in 0..c {
                let row_sum: f64 = counts[k].iter().sum();
                for l in 0..c {
                    let updated = if row_sum > 0.0 {
                        counts[k][l] / row_sum
                    } else {
                        1.0 / c as f64
                    };
                    max_change = max_change.max((updated - confusion[j][k][l]).abs());
                    confusion[j][k][l] = updated;
                }
            }
        }
        if max_change < epsilon {
            break;
        }
    }

    let labels = posteriors
        .iter()
        .map(|w| {
            w.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(k, _)| k)
                .unwrap()
        })
        .collect();
    let model = ReliabilityModel::new(priors, confusion)
        .map_err(|e| Error::Consensus(format!("fitted model invalid: {e}")))?;
    Ok(StapleOutcome {
        labels,
        posteriors,
        model,
        iterations,
        log_likelihoods,
    })
}

/// Which consensus algorithm assigns cluster labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsensusMethod {
    MajorityVote,
    Staple,
}

impl std::str::FromStr for ConsensusMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mv" => Ok(ConsensusMethod::MajorityVote),
            "staple" => Ok(ConsensusMethod::Staple),
            other => Err(Error::Consensus(format!("unknown method {other:?}"))),
        }
    }
}

/// Knobs for [`build_consensus`].
#[derive(Debug, Clone)]
pub struct ConsensusOptions {
    pub method: ConsensusMethod,
    pub seed: u64,
    pub iou_threshold: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
}

impl ConsensusOptions {
    pub fn new(method: ConsensusMethod, seed: u64) -> Self {
        Self {
            method,
            seed,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            epsilon: DEFAULT_EPSILON,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

/// Consensus boxes for every image, in image order.
#[derive(Debug, Clone)]
pub struct ConsensusResult {
    pub taxonomy: ClassTaxonomy,
    pub images: Vec<ImageRecord>,
    pub boxes: Vec<(i64, ConsensusBox)>,
}

impl ConsensusResult {
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            taxonomy: self.taxonomy.clone(),
            images: self.images.clone(),
            boxes: self
                .boxes
                .iter()
                .map(|(image_id, b)| GtBox {
                    image_id: *image_id,
                    bbox: b.bbox,
                    label: b.label,
                    out_of_bounds: false,
                })
                .collect(),
        }
    }
}

// Per-cluster RNG stream so results do not depend on worker scheduling.
fn cluster_rng(seed: u64, image_id: i64, cluster_id: u64) -> ChaCha8Rng {
    let mut state = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(image_id as u64)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        .wrapping_add(cluster_id);
    state ^= state >> 31;
    state = state.wrapping_mul(0x94d0_49bb_1331_11eb);
    state ^= state >> 29;
    ChaCha8Rng::seed_from_u64(state)
}

/// Run correspondence + retention + the selected consensus method over a
/// full event log. Images are processed independently (in parallel when a
/// rayon pool is configured) and results are deterministic for a given
/// seed regardless of worker count.
pub fn build_consensus(
    events: &[AnnotationEvent],
    images: &[ImageRecord],
    taxonomy: &ClassTaxonomy,
    profiles: &BTreeMap<u32, AnnotatorProfile>,
    options: &ConsensusOptions,
) -> Result<ConsensusResult> {
    let mut by_image: BTreeMap<i64, Vec<AnnotationEvent>> = BTreeMap::new();
    for event in events {
        by_image
            .entry(event.image_id)
            .or_default()
            .push(event.clone());
    }
    let image_order: Vec<i64> = by_image.keys().copied().collect();

    let per_image: Vec<Result<Vec<(i64, ConsensusBox)>>> = image_order
        .par_iter()
        .map(|&image_id| {
            consensus_for_image(image_id, &by_image[&image_id], taxonomy, profiles, options)
        })
        .collect();

    let mut boxes = Vec::new();
    for result in per_image {
        boxes.extend(result?);
    }
    Ok(ConsensusResult {
        taxonomy: taxonomy.clone(),
        images: images.to_vec(),
        boxes,
    })
}

/// Like [`build_consensus`], but re-estimates annotator profiles per image
/// from the gold events seen earlier in the log ("running accuracy"),
/// instead of using one campaign-end profile set.
pub fn build_consensus_running(
    events: &[AnnotationEvent],
    images: &[ImageRecord],
    taxonomy: &ClassTaxonomy,
    gold_truth: &Dataset,
    options: &ConsensusOptions,
) -> Result<ConsensusResult> {
    let gold_ids: std::collections::HashSet<i64> = gold_truth
        .images
        .iter()
        .filter(|i| i.is_gold)
        .map(|i| i.image_id)
        .collect();

    // Profile snapshot per image: gold events strictly before the image's
    // first event in the log.
    let mut first_pos: BTreeMap<i64, usize> = BTreeMap::new();
    for (pos, event) in events.iter().enumerate() {
        first_pos.entry(event.image_id).or_insert(pos);
    }
    let snapshots: BTreeMap<i64, BTreeMap<u32, AnnotatorProfile>> = first_pos
        .iter()
        .map(|(&image_id, &pos)| {
            let prefix_gold: Vec<AnnotationEvent> = events[..pos]
                .iter()
                .filter(|e| gold_ids.contains(&e.image_id))
                .cloned()
                .collect();
            (image_id, estimate_reliability(&prefix_gold, gold_truth))
        })
        .collect();

    let mut by_image: BTreeMap<i64, Vec<AnnotationEvent>> = BTreeMap::new();
    for event in events {
        by_image
            .entry(event.image_id)
            .or_default()
            .push(event.clone());
    }
    let image_order: Vec<i64> = by_image.keys().copied().collect();
    let per_image: Vec<Result<Vec<(i64, ConsensusBox)>>> = image_order
        .par_iter()
        .map(|&image_id| {
            consensus_for_image(
                image_id,
                &by_image[&image_id],
                taxonomy,
                &snapshots[&image_id],
                options,
            )
        })
        .collect();

    let mut boxes = Vec::new();
    for result in per_image {
        boxes.extend(result?);
    }
    Ok(ConsensusResult {
        taxonomy: taxonomy.clone(),
        images: images.to_vec(),
        boxes,
    })
}

fn consensus_for_image(
    image_id: i64,
    events: &[AnnotationEvent],
    taxonomy: &ClassTaxonomy,
    profiles: &BTreeMap<u32, AnnotatorProfile>,
    options: &ConsensusOptions,
) -> Result<Vec<(i64, ConsensusBox)>> {
    let grouping = group_events(events, options.iou_threshold)?;
    let mut viewers: Vec<u32> = events.iter().map(|e| e.annotator_id).collect();
    viewers.sort_unstable();
    viewers.dedup();

    let mut retained: Vec<BoxCluster> = Vec::new();
    for cluster in grouping.clusters {
        if resolve_retention(&cluster, viewers.len())? && cluster.live_members().count() > 0 {
            retained.push(cluster);
        }
    }
    if retained.is_empty() {
        return Ok(Vec::new());
    }

    let staple = if options.method == ConsensusMethod::Staple {
        let matrix = AnnotationMatrix::from_clusters(&retained);
        let row_profiles: Vec<AnnotatorProfile> = matrix
            .annotator_ids
            .iter()
            .map(|&a| {
                profiles
                    .get(&a)
                    .cloned()
                    .unwrap_or_else(|| AnnotatorProfile::default_for(a, taxonomy.len()))
            })
            .collect();
        Some(staple_consensus(
            &matrix,
            &row_profiles,
            taxonomy.len(),
            options.max_iterations,
            options.epsilon,
        )?)
    } else {
        None
    };

    let mut out = Vec::with_capacity(retained.len());
    for (col, cluster) in retained.iter().enumerate() {
        let bbox = average_geometry(cluster)?;
        let support = cluster.live_members().count();
        let (label, posterior) = match &staple {
            Some(outcome) => (outcome.labels[col], outcome.posteriors[col].clone()),
            None => {
                let mut rng = cluster_rng(options.seed, image_id, cluster.cluster_id);
                let label = majority_vote(cluster, &mut rng)?;
                let mut posterior = vec![0.0; taxonomy.len()];
                for event in cluster.live_members() {
                    posterior[event.label] += 1.0 / support as f64;
                }
                (label, posterior)
            }
        };
        out.push((
            image_id,
            ConsensusBox {
                bbox,
                label,
                posterior,
                support,
                retained: true,
            },
        ));
    }
    Ok(out)
}
