//! Domain types shared across the pipeline: taxonomy, boxes, annotation
//! events, annotator profiles, clusters, and score cards.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The 14 vehicle classes of the UVH taxonomy, in canonical order.
pub const UVH_CLASSES: [&str; 14] = [
    "Cycle",
    "2-Wheeler",
    "Bus",
    "M. Bus",
    "Truck",
    "LCV",
    "T. Traveller",
    "Van",
    "Sedan",
    "Hatchback",
    "SUV",
    "MUV",
    "3-Wheeler",
    "Other",
];

/// Ordered class list with a case-insensitive name lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTaxonomy {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassTaxonomy {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, Error> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.to_lowercase(), i).is_some() {
                return Err(Error::Taxonomy(format!("duplicate class name {name:?}")));
            }
        }
        if names.is_empty() {
            return Err(Error::Taxonomy(
                "taxonomy must have at least one class".into(),
            ));
        }
        Ok(Self { names, index })
    }

    /// The UVH 14-class taxonomy.
    pub fn uvh() -> Self {
        Self::new(UVH_CLASSES).expect("built-in taxonomy is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    /// Case-insensitive lookup.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(&name.to_lowercase()).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self::uvh()
    }
}

/// Axis-aligned box in pixel coordinates: top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, Error> {
        if !(w > 0.0 && h > 0.0)
            || !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite())
        {
            return Err(Error::InvalidBox { x, y, w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection-over-union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }

    /// True when the box lies fully inside a `width`×`height` frame.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: i64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub is_gold: bool,
}

/// The five things an annotator can do to a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Confirm,
    Adjust,
    Add,
    Delete,
    Relabel,
}

impl Action {
    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Confirm => "confirm",
            Action::Adjust => "adjust",
            Action::Add => "add",
            Action::Delete => "delete",
            Action::Relabel => "relabel",
        }
    }
}

impl std::str::FromStr for Action {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "confirm" => Ok(Action::Confirm),
            "adjust" => Ok(Action::Adjust),
            "add" => Ok(Action::Add),
            "delete" => Ok(Action::Delete),
            "relabel" => Ok(Action::Relabel),
            other => Err(Error::EventLog(format!("unknown action {other:?}"))),
        }
    }
}

/// One annotator's action on one box. Delete events carry no geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub annotator_id: u32,
    pub image_id: i64,
    /// Persistent pre-annotation ID, or a fresh ID for added boxes.
    pub box_id: u64,
    pub action: Action,
    pub label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

/// Per-annotator reliability estimated from gold images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub annotator_id: u32,
    /// Per-class true-positive rate.
    pub sensitivity: Vec<f64>,
    /// Per-class true-negative rate.
    pub specificity: Vec<f64>,
    /// Per-class (correct, total) gold trial counts behind `sensitivity`.
    pub gold_trials: Vec<(u64, u64)>,
}

impl AnnotatorProfile {
    /// Flat profile at the cold-start defaults.
    pub fn default_for(annotator_id: u32, num_classes: usize) -> Self {
        Self {
            annotator_id,
            sensitivity: vec![DEFAULT_SENSITIVITY; num_classes],
            specificity: vec![DEFAULT_SPECIFICITY; num_classes],
            gold_trials: vec![(0, 0); num_classes],
        }
    }
}

/// Cold-start sensitivity for classes an annotator never saw on gold.
pub const DEFAULT_SENSITIVITY: f64 = 0.8;
/// Cold-start specificity.
pub const DEFAULT_SPECIFICITY: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterOrigin {
    PreAnnotated,
    AnnotatorAdded,
}

/// All annotator submissions judged to refer to the same physical object.
#[derive(Debug, Clone)]
pub struct BoxCluster {
    pub cluster_id: u64,
    pub image_id: i64,
    pub members: Vec<AnnotationEvent>,
    pub origin: ClusterOrigin,
}

impl BoxCluster {
    /// Members that carry geometry and a vote (everything but deletes).
    pub fn live_members(&self) -> impl Iterator<Item = &AnnotationEvent> {
        self.members.iter().filter(|e| e.action != Action::Delete)
    }

    pub fn delete_votes(&self) -> usize {
        self.members
            .iter()
            .filter(|e| e.action == Action::Delete)
            .count()
    }
}

/// A consensus box: averaged geometry, winning label, and label posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusBox {
    pub bbox: BBox,
    pub label: usize,
    pub posterior: Vec<f64>,
    pub support: usize,
    pub retained: bool,
}

/// Class priors plus one row-stochastic confusion matrix per annotator.
///
/// `confusion[j][k][l]` is annotator j's probability of reporting class `l`
/// when the true class is `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityModel {
    pub priors: Vec<f64>,
    pub confusion: Vec<Vec<Vec<f64>>>,
}

const DIST_TOL: f64 = 1e-9;

fn is_distribution(row: &[f64]) -> bool {
    row.iter().all(|&p| (0.0..=1.0 + DIST_TOL).contains(&p))
        && (row.iter().sum::<f64>() - 1.0).abs() <= DIST_TOL
}

impl ReliabilityModel {
    pub fn new(priors: Vec<f64>, confusion: Vec<Vec<Vec<f64>>>) -> Result<Self, Error> {
        if !is_distribution(&priors) {
            return Err(Error::Reliability("class priors do not sum to 1".into()));
        }
        let c = priors.len();
        for (j, theta) in confusion.iter().enumerate() {
            if theta.len() != c {
                return Err(Error::Reliability(format!(
                    "annotator {j}: confusion matrix has {} rows, expected {c}",
                    theta.len()
                )));
            }
            for (k, row) in theta.iter().enumerate() {
                if row.len() != c || !is_distribution(row) {
                    return Err(Error::Reliability(format!(
                        "annotator {j}: confusion row {k} is not a distribution"
                    )));
                }
            }
        }
        Ok(Self { priors, confusion })
    }

    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }
}

/// Per-image disagreement and difficulty components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub image_id: i64,
    /// Sum over classes of the population std-dev of per-model counts.
    pub count_stddev_sum: f64,
    /// Worst per-class pairwise count disagreement across model pairs.
    pub max_pairwise_disagreement: u64,
    /// `count_stddev_sum + max_pairwise_disagreement`.
    pub total_disagreement: f64,
    /// `total_disagreement` min-max scaled to [0, 100] over the dataset.
    pub disagreement_norm: f64,
    /// Normalized box count, in [0, 1].
    pub count_term: f64,
    /// Mean relative box area, in [0, 1].
    pub size_term: f64,
    /// Total box area fraction clipped to [0, 1].
    pub density: f64,
    /// Class diversity, in [0, 1].
    pub diversity: f64,
    /// Mean pairwise IoU of the image's boxes.
    pub iou_overlap: f64,
    /// `disagreement_norm / 100`.
    pub disagreement_term: f64,
    /// Composite difficulty.
    pub difficulty: f64,
}

impl ScoreCard {
    pub fn empty(image_id: i64) -> Self {
        Self {
            image_id,
            count_stddev_sum: 0.0,
            max_pairwise_disagreement: 0,
            total_disagreement: 0.0,
            disagreement_norm: 0.0,
            count_term: 0.0,
            size_term: 0.0,
            density: 0.0,
            diversity: 0.0,
            iou_overlap: 0.0,
            disagreement_term: 0.0,
            difficulty: 0.0,
        }
    }
}

/// Normalizers and optional-term switches for the difficulty score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    /// Dataset-maximum box count used to normalize the count term.
    pub max_boxes: usize,
    /// Normalizer for the class-diversity term.
    pub max_classes: usize,
    pub include_diversity: bool,
    pub include_density: bool,
}

impl ScoringConfig {
    pub fn new(max_boxes: usize, max_classes: usize) -> Result<Self, Error> {
        if max_boxes < 1 || max_classes < 1 {
            return Err(Error::Scoring("normalizers must be at least 1".into()));
        }
        Ok(Self {
            max_boxes,
            max_classes,
            include_diversity: false,
            include_density: false,
        })
    }
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            max_boxes: 100,
            max_classes: 14,
            include_diversity: false,
            include_density: false,
        }
    }
}
