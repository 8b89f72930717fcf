//! Image curation: inter-model disagreement scores, composite difficulty
//! scores, selection strategies, and the stratified train/validation split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::model::{BBox, ImageRecord, ScoreCard, ScoringConfig};

/// Raw disagreement components for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Disagreement {
    /// Sum over classes of the population (divisor M) std-dev of counts.
    pub count_stddev_sum: f64,
    /// Per-class number of model pairs with differing counts.
    pub pairwise_disagreement: Vec<u64>,
    /// Max of `pairwise_disagreement` over classes.
    pub max_pairwise_disagreement: u64,
    /// `count_stddev_sum + max_pairwise_disagreement`.
    pub total_disagreement: f64,
}

/// Disagreement across models from their per-class box counts.
///
/// `counts[m][k]` is the number of class-`k` boxes model `m` predicted for
/// the image. Needs at least two models.
pub fn disagreement_score(counts: &[Vec<u64>]) -> Result<Disagreement> {
    let m = counts.len();
    if m < 2 {
        return Err(Error::Scoring("need at least 2 models".into()));
    }
    let c = counts[0].len();
    if counts.iter().any(|row| row.len() != c) || c == 0 {
        return Err(Error::Scoring("ragged or empty count rows".into()));
    }

    let mut stddev_sum = 0.0;
    let mut pairwise = vec![0u64; c];
    for k in 0..c {
        let mean = counts.iter().map(|row| row[k] as f64).sum::<f64>() / m as f64;
        let var = counts
            .iter()
            .map(|row| (row[k] as f64 - mean).powi(2))
            .sum::<f64>()
            / m as f64;
        stddev_sum += var.sqrt();
        for a in 0..m {
            for b in a + 1..m {
                if counts[a][k] != counts[b][k] {
                    pairwise[k] += 1;
                }
            }
        }
    }
    let max_pairwise = pairwise.iter().copied().max().unwrap_or(0);
    Ok(Disagreement {
        count_stddev_sum: stddev_sum,
        pairwise_disagreement: pairwise,
        max_pairwise_disagreement: max_pairwise,
        total_disagreement: stddev_sum + max_pairwise as f64,
    })
}

/// Min-max scale disagreement scores to [0, 100]. When every score is
/// equal (including a single score) there is no discriminating signal and
/// everything maps to 0.
pub fn normalize_disagreement(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Scoring("no scores to normalize".into()));
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        return Ok(vec![0.0; scores.len()]);
    }
    Ok(scores
        .iter()
        .map(|s| (s - min) / (max - min) * 100.0)
        .collect())
}

/// Mean IoU over all unordered box pairs; 0 with fewer than 2 boxes.
pub fn mean_pairwise_iou(boxes: &[BBox]) -> f64 {
    if boxes.len() < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            sum += boxes[i].iou(&boxes[j]);
            pairs += 1;
        }
    }
    sum / pairs as f64
}

/// Composite difficulty score for one image.
///
/// Base form sums the normalized box count, the complement of the mean
/// relative box size, the scaled disagreement, and the mean pairwise IoU;
/// the config can add class-diversity and density terms. An empty image
/// has mean box size 0, so its size term is 1.
pub fn difficulty_score(
    boxes: &[(BBox, usize)],
    image: &ImageRecord,
    disagreement_norm: f64,
    config: &ScoringConfig,
) -> Result<ScoreCard> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::Scoring(format!(
            "image {} has zero area",
            image.image_id
        )));
    }
    let frame_area = image.width as f64 * image.height as f64;
    let n = boxes.len();

    let count_term = (n as f64 / config.max_boxes as f64).min(1.0);
    let total_area: f64 = boxes.iter().map(|(b, _)| b.area()).sum();
    let size_term = if n == 0 {
        0.0
    } else {
        (total_area / frame_area / n as f64).min(1.0)
    };
    let density = (total_area / frame_area).min(1.0);
    let unique_classes = {
        let mut labels: Vec<usize> = boxes.iter().map(|(_, l)| *l).collect();
        labels.sort_unstable();
        labels.dedup();
        labels.len()
    };
    let diversity = (unique_classes as f64 / config.max_classes as f64).min(1.0);
    let geometry: Vec<BBox> = boxes.iter().map(|(b, _)| *b).collect();
    let iou_overlap = mean_pairwise_iou(&geometry);
    let disagreement_term = disagreement_norm / 100.0;

    let mut difficulty = count_term + (1.0 - size_term) + disagreement_term + iou_overlap;
    if config.include_diversity {
        difficulty += diversity;
    }
    if config.include_density {
        difficulty += density;
    }

    Ok(ScoreCard {
        image_id: image.image_id,
        count_stddev_sum: 0.0,
        max_pairwise_disagreement: 0,
        total_disagreement: 0.0,
        disagreement_norm,
        count_term,
        size_term,
        density,
        diversity,
        iou_overlap,
        disagreement_term,
        difficulty,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    /// The k images with the highest normalized disagreement.
    TopDisagreement,
    /// All images bucketed into ascending-difficulty bands of equal size,
    /// emitted band by band (easy bands first).
    DifficultyBanded { bands: usize },
}

/// Pick `k` image ids for annotation. Ties break on image id.
pub fn select_images(
    scorecards: &[ScoreCard],
    k: usize,
    strategy: SelectionStrategy,
) -> Result<Vec<i64>> {
    if k > scorecards.len() {
        return Err(Error::Scoring(format!(
            "requested {k} images but only {} scored",
            scorecards.len()
        )));
    }
    let mut order: Vec<&ScoreCard> = scorecards.iter().collect();
    match strategy {
        SelectionStrategy::TopDisagreement => {
            order.sort_by(|a, b| {
                b.disagreement_norm
                    .partial_cmp(&a.disagreement_norm)
                    .unwrap()
                    .then(a.image_id.cmp(&b.image_id))
            });
            Ok(order.into_iter().take(k).map(|s| s.image_id).collect())
        }
        SelectionStrategy::DifficultyBanded { bands } => {
            if bands == 0 {
                return Err(Error::Scoring("band count must be positive".into()));
            }
            order.sort_by(|a, b| {
                a.difficulty
                    .partial_cmp(&b.difficulty)
                    .unwrap()
                    .then(a.image_id.cmp(&b.image_id))
            });
            // within each band, order by image id
            let band_size = order.len().div_ceil(bands);
            let mut out = Vec::with_capacity(k);
            for band in order.chunks(band_size.max(1)) {
                let mut ids: Vec<i64> = band.iter().map(|s| s.image_id).collect();
                ids.sort_unstable();
                out.extend(ids);
            }
            out.truncate(k);
            Ok(out)
        }
    }
}

/// Stratified train/validation split at image granularity.
///
/// The stratification key is each image's dominant class. Per-stratum train
/// quotas come from largest-remainder rounding, so the total train count is
/// exactly `round(N * train_fraction)` and every stratum is within one
/// image of its proportional share. Deterministic for a given seed.
pub fn stratified_split(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    if dataset.images.len() < 2 {
        return Err(Error::Split("need at least 2 images".into()));
    }

    let mut strata: BTreeMap<usize, Vec<i64>> = BTreeMap::new();
    for image in &dataset.images {
        strata
            .entry(dominant_class(dataset, image.image_id))
            .or_default()
            .push(image.image_id);
    }

    let total = dataset.images.len();
    let train_target = (total as f64 * train_fraction).round() as usize;

    // Largest-remainder allocation of the train quota across strata.
    let keys: Vec<usize> = strata.keys().copied().collect();
    let mut quotas: Vec<usize> = Vec::with_capacity(keys.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(keys.len());
    let mut allocated = 0usize;
    for (idx, key) in keys.iter().enumerate() {
        let share = strata[key].len() as f64 * train_fraction;
        let floor = share.floor() as usize;
        quotas.push(floor);
        allocated += floor;
        remainders.push((share - floor as f64, idx));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut leftover = train_target.saturating_sub(allocated);
    for &(_, idx) in &remainders {
        if leftover == 0 {
            break;
        }
        if quotas[idx] < strata[&keys[idx]].len() {
            quotas[idx] += 1;
            leftover -= 1;
        }
    }

    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    for (idx, key) in keys.iter().enumerate() {
        let mut ids = strata[key].clone();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_add(*key as u64)
                .wrapping_mul(0x9e3779b97f4a7c15),
        );
        ids.shuffle(&mut rng);
        let (train, val) = ids.split_at(quotas[idx]);
        train_ids.extend_from_slice(train);
        val_ids.extend_from_slice(val);
    }
    train_ids.sort_unstable();
    val_ids.sort_unstable();

    Ok((subset(dataset, &train_ids), subset(dataset, &val_ids)))
}

fn dominant_class(dataset: &Dataset, image_id: i64) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for b in dataset.boxes_for(image_id) {
        *counts.entry(b.label).or_insert(0) += 1;
    }
    // empty images form their own stratum
    counts
        .into_iter()
        .max_by_key(|&(label, count)| (count, std::cmp::Reverse(label)))
        .map(|(label, _)| label)
        .unwrap_or(usize::MAX)
}

fn subset(dataset: &Dataset, image_ids: &[i64]) -> Dataset {
    let keep: std::collections::HashSet<i64> = image_ids.iter().copied().collect();
    Dataset {
        taxonomy: dataset.taxonomy.clone(),
        images: dataset
            .images
            .iter()
            .filter(|i| keep.contains(&i.image_id))
            .cloned()
            .collect(),
        boxes: dataset
            .boxes
            .iter()
            .filter(|b| keep.contains(&b.image_id))
            .cloned()
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::GtBox;
    use crate::model::ClassTaxonomy;

    #[test]
    fn disagreement_zero_when_models_agree() {
        let d = disagreement_score(&[vec![3, 1], vec![3, 1], vec![3, 1]]).unwrap();
        assert_eq!(d.count_stddev_sum, 0.0);
        assert_eq!(d.max_pairwise_disagreement, 0);
        assert_eq!(d.total_disagreement, 0.0);
    }

    #[test]
    fn disagreement_two_models_one_class() {
        // counts {1, 3}: population sigma = 1, one disagreeing pair
        let d = disagreement_score(&[vec![1], vec![3]]).unwrap();
        assert!((d.count_stddev_sum - 1.0).abs() < 1e-12);
        assert_eq!(d.max_pairwise_disagreement, 1);
        assert!((d.total_disagreement - 2.0).abs() < 1e-12);
    }

    #[test]
    fn disagreement_three_models_two_classes() {
        // class A counts {2,2,2}: sigma 0; class B {0,1,2}: sigma sqrt(2/3)
        let d = disagreement_score(&[vec![2, 0], vec![2, 1], vec![2, 2]]).unwrap();
        let sigma_b = (2.0f64 / 3.0).sqrt();
        assert!((d.count_stddev_sum - sigma_b).abs() < 1e-12);
        assert_eq!(d.pairwise_disagreement, vec![0, 3]);
        assert_eq!(d.max_pairwise_disagreement, 3);
        assert!((d.total_disagreement - (sigma_b + 3.0)).abs() < 1e-6);
        assert!((d.total_disagreement - 3.8165).abs() < 1e-4);
    }

    #[test]
    fn disagreement_needs_two_models() {
        assert!(disagreement_score(&[vec![1]]).is_err());
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(
            normalize_disagreement(&[0.0, 5.0, 10.0]).unwrap(),
            vec![0.0, 50.0, 100.0]
        );
        assert_eq!(normalize_disagreement(&[7.0]).unwrap(), vec![0.0]);
        assert_eq!(
            normalize_disagreement(&[3.0, 3.0, 3.0]).unwrap(),
            vec![0.0, 0.0, 0.0]
        );
        assert!(normalize_disagreement(&[]).is_err());
    }

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn mean_pairwise_iou_cases() {
        assert_eq!(mean_pairwise_iou(&[]), 0.0);
        assert_eq!(mean_pairwise_iou(&[bb(0.0, 0.0, 1.0, 1.0)]), 0.0);
        let same = bb(0.0, 0.0, 2.0, 2.0);
        assert!((mean_pairwise_iou(&[same, same]) - 1.0).abs() < 1e-12);
        let apart = [bb(0.0, 0.0, 1.0, 1.0), bb(10.0, 10.0, 1.0, 1.0)];
        assert_eq!(mean_pairwise_iou(&apart), 0.0);
        // pairs: 1/7, 0, 0 -> mean 1/21
        let three = [
            bb(0.0, 0.0, 2.0, 2.0),
            bb(1.0, 1.0, 2.0, 2.0),
            bb(10.0, 10.0, 1.0, 1.0),
        ];
        assert!((mean_pairwise_iou(&three) - 1.0 / 21.0).abs() < 1e-12);
    }

    fn image() -> ImageRecord {
        ImageRecord {
            image_id: 1,
            width: 1920,
            height: 1080,
            is_gold: false,
        }
    }

    #[test]
    fn difficulty_empty_image() {
        let config = ScoringConfig::default();
        let card = difficulty_score(&[], &image(), 0.0, &config).unwrap();
        assert!((card.difficulty - 1.0).abs() < 1e-12);
        assert_eq!(card.size_term, 0.0);
    }

    #[test]
    fn difficulty_full_frame_box() {
        let config = ScoringConfig::new(100, 14).unwrap();
        let full = bb(0.0, 0.0, 1920.0, 1080.0);
        let card = difficulty_score(&[(full, 2)], &image(), 0.0, &config).unwrap();
        assert!((card.difficulty - 0.01).abs() < 1e-12);
        assert!((card.size_term - 1.0).abs() < 1e-12);
    }

    #[test]
    fn difficulty_optional_terms() {
        let mut config = ScoringConfig::new(100, 14).unwrap();
        let b = bb(0.0, 0.0, 10.0, 10.0);
        let base = difficulty_score(&[(b, 0), (b, 1)], &image(), 50.0, &config).unwrap();
        config.include_diversity = true;
        config.include_density = true;
        let extended = difficulty_score(&[(b, 0), (b, 1)], &image(), 50.0, &config).unwrap();
        assert!(
            (extended.difficulty - base.difficulty - base.diversity - base.density).abs() < 1e-12
        );
    }

    #[test]
    fn selection_top_disagreement() {
        let mut cards: Vec<ScoreCard> = [(1, 10.0), (2, 90.0), (3, 50.0)]
            .iter()
            .map(|&(id, d)| {
                let mut c = ScoreCard::empty(id);
                c.disagreement_norm = d;
                c
            })
            .collect();
        assert_eq!(
            select_images(&cards, 2, SelectionStrategy::TopDisagreement).unwrap(),
            vec![2, 3]
        );
        assert!(select_images(&cards, 0, SelectionStrategy::TopDisagreement)
            .unwrap()
            .is_empty());
        assert!(select_images(&cards, 4, SelectionStrategy::TopDisagreement).is_err());
        // tie breaks on image id
        cards[0].disagreement_norm = 90.0;
        assert_eq!(
            select_images(&cards, 2, SelectionStrategy::TopDisagreement).unwrap(),
            vec![1, 2]
        );
    }

    #[test]
    fn selection_banded_means_non_decreasing() {
        let cards: Vec<ScoreCard> = (0..9)
            .map(|i| {
                let mut c = ScoreCard::empty(i);
                c.difficulty = ((i * 7) % 9) as f64;
                c
            })
            .collect();
        let picked =
            select_images(&cards, 9, SelectionStrategy::DifficultyBanded { bands: 3 }).unwrap();
        assert_eq!(picked.len(), 9);
        let difficulty = |id: i64| cards.iter().find(|c| c.image_id == id).unwrap().difficulty;
        let band_means: Vec<f64> = picked
            .chunks(3)
            .map(|band| band.iter().map(|&id| difficulty(id)).sum::<f64>() / band.len() as f64)
            .collect();
        assert!(band_means.windows(2).all(|w| w[0] <= w[1]));
        // output is a permutation of all 9 ids
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..9).collect::<Vec<i64>>());
    }

    fn synthetic_dataset(images: usize) -> Dataset {
        let tax = ClassTaxonomy::uvh();
        let mut ds = Dataset::empty(tax);
        for i in 0..images {
            ds.images.push(ImageRecord {
                image_id: i as i64,
                width: 1920,
                height: 1080,
                is_gold: false,
            });
            ds.boxes.push(GtBox {
                image_id: i as i64,
                bbox: bb(0.0, 0.0, 10.0, 10.0),
                label: i % 5,
                out_of_bounds: false,
            });
        }
        ds
    }

    #[test]
    fn split_single_stratum() {
        let tax = ClassTaxonomy::uvh();
        let mut ds = Dataset::empty(tax);
        for i in 0..10 {
            ds.images.push(ImageRecord {
                image_id: i,
                width: 100,
                height: 100,
                is_gold: false,
            });
            ds.boxes.push(GtBox {
                image_id: i,
                bbox: bb(0.0, 0.0, 10.0, 10.0),
                label: 2,
                out_of_bounds: false,
            });
        }
        let (train, val) = stratified_split(&ds, 0.8, 1).unwrap();
        assert_eq!(train.images.len(), 8);
        assert_eq!(val.images.len(), 2);
    }

    #[test]
    fn split_deterministic_disjoint_exhaustive() {
        let ds = synthetic_dataset(103);
        let (train_a, val_a) = stratified_split(&ds, 0.8, 7).unwrap();
        let (train_b, val_b) = stratified_split(&ds, 0.8, 7).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(val_a, val_b);

        let mut all: Vec<i64> = train_a
            .images
            .iter()
            .chain(val_a.images.iter())
            .map(|i| i.image_id)
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<i64>>());

        let (train_c, _) = stratified_split(&ds, 0.8, 8).unwrap();
        assert_ne!(train_a.images, train_c.images);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = synthetic_dataset(10);
        assert!(stratified_split(&ds, 0.0, 1).is_err());
        assert!(stratified_split(&ds, 1.0, 1).is_err());
    }
}
