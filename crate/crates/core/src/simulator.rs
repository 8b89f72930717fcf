//! Synthetic annotation-campaign generator with known ground truth and
//! known annotator confusion. Serves as the oracle harness for the
//! consensus and curation code.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::{Dataset, GtBox};
use crate::model::{Action, AnnotationEvent, AnnotatorProfile, BBox, ClassTaxonomy, ImageRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub images: usize,
    /// Poisson mean for boxes per image.
    pub mean_boxes: f64,
    pub num_classes: usize,
    /// Unnormalized class frequency weights; uniform when empty.
    pub class_weights: Vec<f64>,
    pub annotators_per_image: usize,
    /// Confusion diagonal per pool annotator; off-diagonal mass is uniform.
    pub annotator_accuracies: Vec<f64>,
    /// Std-dev in pixels for additive (x, y) jitter; also sets the relative
    /// log-normal scale on (w, h).
    pub jitter_sigma: f64,
    pub miss_prob: f64,
    pub add_prob: f64,
    pub gold_per_level: usize,
    pub level_size: usize,
    pub frame_width: u32,
    pub frame_height: u32,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            images: 100,
            mean_boxes: 13.0,
            num_classes: 14,
            class_weights: Vec::new(),
            annotators_per_image: 5,
            annotator_accuracies: vec![0.9; 8],
            jitter_sigma: 0.0,
            miss_prob: 0.0,
            add_prob: 0.0,
            gold_per_level: 5,
            level_size: 15,
            frame_width: 1920,
            frame_height: 1080,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Simulation("need at least 2 classes".into()));
        }
        if self.annotator_accuracies.len() < self.annotators_per_image {
            return Err(Error::Simulation(format!(
                "pool of {} annotators cannot cover {} per image",
                self.annotator_accuracies.len(),
                self.annotators_per_image
            )));
        }
        for p in [self.miss_prob, self.add_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Simulation(format!("probability {p} outside [0,1]")));
            }
        }
        for &a in &self.annotator_accuracies {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Simulation(format!("accuracy {a} outside [0,1]")));
            }
        }
        if self.gold_per_level > self.level_size || self.level_size == 0 {
            return Err(Error::Simulation("gold count exceeds level size".into()));
        }
        Ok(())
    }

    /// Parse a flat `key=value` config file. Unknown keys are rejected.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = SimConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Simulation(format!(
                    "{}:{}: expected key=value",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| {
                Error::Simulation(format!("{}:{}: {key}: {e}", path.display(), lineno + 1))
            };
            match key {
                "images" => config.images = value.parse().map_err(|e| bad(&e))?,
                "mean_boxes" => config.mean_boxes = value.parse().map_err(|e| bad(&e))?,
                "num_classes" => config.num_classes = value.parse().map_err(|e| bad(&e))?,
                "class_weights" => {
                    config.class_weights = value
                        .split(',')
                        .map(|v| v.trim().parse().map_err(|e| bad(&e)))
                        .collect::<Result<_>>()?
                }
                "annotators_per_image" => {
                    config.annotators_per_image = value.parse().map_err(|e| bad(&e))?
                }
                "annotator_accuracies" => {
                    config.annotator_accuracies = value
                        .split(',')
                        .map(|v| v.trim().parse().map_err(|e| bad(&e)))
                        .collect::<Result<_>>()?
                }
                "jitter_sigma" => config.jitter_sigma = value.parse().map_err(|e| bad(&e))?,
                "miss_prob" => config.miss_prob = value.parse().map_err(|e| bad(&e))?,
                "add_prob" => config.add_prob = value.parse().map_err(|e| bad(&e))?,
                "gold_per_level" => config.gold_per_level = value.parse().map_err(|e| bad(&e))?,
                "level_size" => config.level_size = value.parse().map_err(|e| bad(&e))?,
                "frame_width" => config.frame_width = value.parse().map_err(|e| bad(&e))?,
                "frame_height" => config.frame_height = value.parse().map_err(|e| bad(&e))?,
                "seed" => config.seed = value.parse().map_err(|e| bad(&e))?,
                other => {
                    return Err(Error::Simulation(format!(
                        "{}:{}: unknown key {other:?}",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn taxonomy(&self) -> ClassTaxonomy {
        if self.num_classes == 14 {
            ClassTaxonomy::uvh()
        } else {
            ClassTaxonomy::new((0..self.num_classes).map(|i| format!("class-{i}")))
                .expect("generated names are unique")
        }
    }

    fn confusion_row(&self, accuracy: f64, true_class: usize) -> Vec<f64> {
        let c = self.num_classes;
        (0..c)
            .map(|l| {
                if l == true_class {
                    accuracy
                } else {
                    (1.0 - accuracy) / (c - 1) as f64
                }
            })
            .collect()
    }

    /// The profiles implied by the configured confusion diagonals.
    pub fn true_profiles(&self) -> Vec<AnnotatorProfile> {
        let c = self.num_classes;
        self.annotator_accuracies
            .iter()
            .enumerate()
            .map(|(id, &acc)| AnnotatorProfile {
                annotator_id: id as u32,
                sensitivity: vec![acc; c],
                specificity: vec![1.0 - (1.0 - acc) / (c - 1) as f64; c],
                gold_trials: vec![(0, 0); c],
            })
            .collect()
    }
}

// Seed mixing for independent per-image / per-annotator streams.
fn substream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut state = seed ^ tag.wrapping_mul(0xd6e8_feb8_6659_fd93);
    state = state.wrapping_add(a).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    state = state.wrapping_add(b).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    state ^= state >> 32;
    ChaCha8Rng::seed_from_u64(state)
}

fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn sample_poisson<R: Rng>(rng: &mut R, mean: f64) -> usize {
    // Knuth's method; fine for small means
    let limit = (-mean).exp();
    let mut product: f64 = rng.gen();
    let mut count = 0;
    while product > limit {
        product *= rng.gen::<f64>();
        count += 1;
    }
    count
}

fn sample_class<R: Rng>(rng: &mut R, config: &SimConfig) -> usize {
    if config.class_weights.is_empty() {
        return rng.gen_range(0..config.num_classes);
    }
    let total: f64 = config.class_weights.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    for (i, &w) in config.class_weights.iter().enumerate() {
        pick -= w;
        if pick <= 0.0 {
            return i;
        }
    }
    config.class_weights.len() - 1
}

/// Deterministic ground truth: random boxes biased away from heavy mutual
/// overlap, labels drawn from the class distribution, gold flags
/// interleaved per level.
pub fn generate_truth(config: &SimConfig) -> Result<Dataset> {
    config.validate()?;
    let taxonomy = config.taxonomy();
    let (fw, fh) = (config.frame_width as f64, config.frame_height as f64);
    if fw < 40.0 || fh < 40.0 {
        return Err(Error::Simulation(
            "frame too small for box generation".into(),
        ));
    }

    let mut images = Vec::with_capacity(config.images);
    let mut boxes = Vec::new();
    for image_idx in 0..config.images {
        let image_id = image_idx as i64 + 1;
        images.push(ImageRecord {
            image_id,
            width: config.frame_width,
            height: config.frame_height,
            is_gold: (image_idx % config.level_size) < config.gold_per_level,
        });
        let mut rng = substream(config.seed, 0x7472_7574, image_idx as u64, 0);
        let count = sample_poisson(&mut rng, config.mean_boxes);
        let mut placed: Vec<BBox> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut candidate = None;
            for _attempt in 0..10 {
                let w = rng.gen_range(30.0..(fw / 4.0).max(31.0));
                let h = rng.gen_range(30.0..(fh / 4.0).max(31.0));
                let x = rng.gen_range(0.0..(fw - w));
                let y = rng.gen_range(0.0..(fh - h));
                let bbox = BBox::new(x, y, w, h)?;
                if placed.iter().all(|p| p.iou(&bbox) < 0.3) {
                    candidate = Some(bbox);
                    break;
                }
                candidate = Some(bbox);
            }
            let bbox = candidate.unwrap();
            placed.push(bbox);
            boxes.push(GtBox {
                image_id,
                bbox,
                label: sample_class(&mut rng, config),
                out_of_bounds: false,
            });
        }
    }
    Ok(Dataset {
        taxonomy,
        images,
        boxes,
    })
}

/// The simulated campaign: the raw event log plus the annotators' true
/// profiles. Events are emitted in (image, annotator, box) order, so the
/// log is byte-for-byte reproducible from (seed, config).
#[derive(Debug, Clone)]
pub struct Campaign {
    pub events: Vec<AnnotationEvent>,
    pub true_profiles: Vec<AnnotatorProfile>,
}

pub fn simulate_campaign(truth: &Dataset, config: &SimConfig) -> Result<Campaign> {
    config.validate()?;
    let pool = config.annotator_accuracies.len();

    // Seed-shuffled assignment: annotators for the image at shuffled
    // position p are (p + j) mod pool, j < annotators_per_image. Distinct
    // per image, never repeating an image for an annotator.
    let mut positions: Vec<usize> = (0..truth.images.len()).collect();
    positions.shuffle(&mut substream(config.seed, 0x6173_6967, 0, 0));

    let mut events = Vec::new();
    for (image_idx, image) in truth.images.iter().enumerate() {
        let shuffled_pos = positions[image_idx];
        let mut annotators: Vec<usize> = (0..config.annotators_per_image)
            .map(|j| (shuffled_pos + j) % pool)
            .collect();
        annotators.sort_unstable();

        let image_boxes: Vec<(u64, &GtBox)> = truth
            .boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| b.image_id == image.image_id)
            .map(|(i, b)| (i as u64 + 1, b))
            .collect();

        for &annotator in &annotators {
            let mut rng = substream(config.seed, 0x6576_656e, image_idx as u64, annotator as u64);
            let accuracy = config.annotator_accuracies[annotator];
            for &(box_id, gt) in &image_boxes {
                if rng.gen::<f64>() < config.miss_prob {
                    events.push(AnnotationEvent {
                        annotator_id: annotator as u32,
                        image_id: image.image_id,
                        box_id,
                        action: Action::Delete,
                        label: gt.label,
                        bbox: None,
                    });
                    continue;
                }
                let row = config.confusion_row(accuracy, gt.label);
                let label = {
                    let mut pick = rng.gen::<f64>();
                    let mut chosen = config.num_classes - 1;
                    for (l, &p) in row.iter().enumerate() {
                        pick -= p;
                        if pick <= 0.0 {
                            chosen = l;
                            break;
                        }
                    }
                    chosen
                };
                let bbox = jitter_box(&gt.bbox, config, image, &mut rng)?;
                let action = if label != gt.label {
                    Action::Relabel
                } else if bbox != gt.bbox {
                    Action::Adjust
                } else {
                    Action::Confirm
                };
                events.push(AnnotationEvent {
                    annotator_id: annotator as u32,
                    image_id: image.image_id,
                    box_id,
                    action,
                    label,
                    bbox: Some(bbox),
                });
            }
            if rng.gen::<f64>() < config.add_prob {
                let (fw, fh) = (image.width as f64, image.height as f64);
                let w = rng.gen_range(30.0..fw / 4.0);
                let h = rng.gen_range(30.0..fh / 4.0);
                let x = rng.gen_range(0.0..fw - w);
                let y = rng.gen_range(0.0..fh - h);
                events.push(AnnotationEvent {
                    annotator_id: annotator as u32,
                    image_id: image.image_id,
                    // fresh id namespace, unique per (image, annotator)
                    box_id: 1_000_000_000 + image_idx as u64 * 1_000 + annotator as u64,
                    action: Action::Add,
                    label: rng.gen_range(0..config.num_classes),
                    bbox: Some(BBox::new(x, y, w, h)?),
                });
            }
        }
    }
    Ok(Campaign {
        events,
        true_profiles: config.true_profiles(),
    })
}

fn jitter_box<R: Rng>(
    bbox: &BBox,
    config: &SimConfig,
    image: &ImageRecord,
    rng: &mut R,
) -> Result<BBox> {
    if config.jitter_sigma <= 0.0 {
        return Ok(*bbox);
    }
    let sigma = config.jitter_sigma;
    let rel = sigma / 100.0;
    let (fw, fh) = (image.width as f64, image.height as f64);
    let w = (bbox.w * (rel * sample_normal(rng)).exp()).clamp(1.0, fw);
    let h = (bbox.h * (rel * sample_normal(rng)).exp()).clamp(1.0, fh);
    let x = (bbox.x + sigma * sample_normal(rng)).clamp(0.0, fw - w);
    let y = (bbox.y + sigma * sample_normal(rng)).clamp(0.0, fh - h);
    BBox::new(x, y, w, h)
}
