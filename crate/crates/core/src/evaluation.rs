//! COCO-style detector evaluation: greedy IoU matching, interpolated
//! average precision, mAP at the standard thresholds, and consolidation of
//! the UVH taxonomy onto COCO's Car/Bus/Truck.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{BBox, ClassTaxonomy};

/// One detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: i64,
    pub bbox: BBox,
    pub label: usize,
    pub score: f64,
}

/// One ground-truth instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: i64,
    pub bbox: BBox,
    pub label: usize,
}

/// Intersection-over-union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// The ten mAP(50:95) thresholds.
pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Greedy matching for one image at one threshold: detections in
/// descending confidence each take the highest-IoU unmatched ground truth
/// of the same class with IoU >= `threshold`. IoU ties break on ground
/// truth index.
///
/// Returns a TP flag per detection (in input order) and a matched flag per
/// ground truth.
pub fn match_detections(
    dets: &[(BBox, usize, f64)],
    gts: &[(BBox, usize)],
    threshold: f64,
) -> (Vec<bool>, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].2.partial_cmp(&dets[a].2).unwrap().then(a.cmp(&b)));

    let mut tp = vec![false; dets.len()];
    let mut matched = vec![false; gts.len()];
    for det_idx in order {
        let (ref dbox, dlabel, _) = dets[det_idx];
        let mut best: Option<(f64, usize)> = None;
        for (gt_idx, (gbox, glabel)) in gts.iter().enumerate() {
            if *glabel != dlabel || matched[gt_idx] {
                continue;
            }
            let overlap = dbox.iou(gbox);
            if overlap < threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((best_iou, _)) => overlap > best_iou,
            };
            if better {
                best = Some((overlap, gt_idx));
            }
        }
        if let Some((_, gt_idx)) = best {
            matched[gt_idx] = true;
            tp[det_idx] = true;
        }
    }
    (tp, matched)
}

/// Interpolated average precision from a confidence-ranked TP/FP sequence.
///
/// `ranked` holds (score, is_tp) already sorted by descending score;
/// `num_gt` is the class's ground-truth instance count. The AP is the exact
/// area under the non-increasing precision envelope.
pub fn average_precision(ranked: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let n = ranked.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, (_, hit)) in ranked.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // non-increasing envelope, right to left
    for i in (0..n.saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    ap
}

/// Per-class AP table plus the three headline means.
#[derive(Debug, Clone)]
pub struct MapReport {
    /// Classes that have at least one ground-truth instance.
    pub classes: Vec<usize>,
    /// `ap[class_pos][threshold_pos]` aligned with `classes` and
    /// [`IOU_THRESHOLDS`].
    pub ap: Vec<Vec<f64>>,
    pub map50: f64,
    pub map75: f64,
    pub map5095: f64,
}

impl MapReport {
    /// Mean AP over classes at one threshold position.
    pub fn map_at(&self, threshold_pos: usize) -> f64 {
        if self.classes.is_empty() {
            return 0.0;
        }
        self.ap.iter().map(|row| row[threshold_pos]).sum::<f64>() / self.classes.len() as f64
    }
}

/// Evaluate detections against ground truth over all images and classes.
/// Classes with no ground-truth instances are excluded from every mean.
pub fn map_metrics(
    dets: &[Detection],
    gts: &[GroundTruth],
    taxonomy: &ClassTaxonomy,
) -> Result<MapReport> {
    if gts.is_empty() {
        return Err(Error::Evaluation("no ground-truth instances".into()));
    }
    for d in dets {
        if d.label >= taxonomy.len() || !d.score.is_finite() {
            return Err(Error::Evaluation(format!(
                "detection with label {} / score {} invalid",
                d.label, d.score
            )));
        }
    }
    for g in gts {
        if g.label >= taxonomy.len() {
            return Err(Error::Evaluation(format!(
                "ground truth label {} invalid",
                g.label
            )));
        }
    }

    let mut gt_count = vec![0usize; taxonomy.len()];
    let mut gts_by_image: BTreeMap<i64, Vec<(BBox, usize)>> = BTreeMap::new();
    for g in gts {
        gt_count[g.label] += 1;
        gts_by_image
            .entry(g.image_id)
            .or_default()
            .push((g.bbox, g.label));
    }
    let mut dets_by_image: BTreeMap<i64, Vec<(BBox, usize, f64)>> = BTreeMap::new();
    for d in dets {
        dets_by_image
            .entry(d.image_id)
            .or_default()
            .push((d.bbox, d.label, d.score));
    }

    let classes: Vec<usize> = (0..taxonomy.len()).filter(|&c| gt_count[c] > 0).collect();
    let mut ap = vec![vec![0.0; IOU_THRESHOLDS.len()]; classes.len()];

    for (t_pos, &threshold) in IOU_THRESHOLDS.iter().enumerate() {
        // ranked (score, is_tp) per class, accumulated over images
        let mut per_class: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
        for (&image_id, image_dets) in &dets_by_image {
            let empty = Vec::new();
            let image_gts = gts_by_image.get(&image_id).unwrap_or(&empty);
            let (tp, _) = match_detections(image_dets, image_gts, threshold);
            for (det, &hit) in image_dets.iter().zip(&tp) {
                per_class.entry(det.1).or_default().push((det.2, hit));
            }
        }
        for (pos, &class) in classes.iter().enumerate() {
            let mut ranked = per_class.remove(&class).unwrap_or_default();
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            ap[pos][t_pos] = average_precision(&ranked, gt_count[class]);
        }
    }

    let report = MapReport {
        classes,
        ap,
        map50: 0.0,
        map75: 0.0,
        map5095: 0.0,
    };
    let map50 = report.map_at(0);
    let map75 = report.map_at(5);
    let map5095 = (0..IOU_THRESHOLDS.len())
        .map(|t| report.map_at(t))
        .sum::<f64>()
        / IOU_THRESHOLDS.len() as f64;
    Ok(MapReport {
        map50,
        map75,
        map5095,
        ..report
    })
}

/// COCO target classes for the baseline comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CocoClass {
    Car,
    Bus,
    Truck,
}

impl CocoClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            CocoClass::Car => "Car",
            CocoClass::Bus => "Bus",
            CocoClass::Truck => "Truck",
        }
    }
}

/// Map a UVH class index onto COCO's Car/Bus/Truck; `None` means the class
/// is excluded from the comparison (rider-inclusive two/three-wheelers,
/// LCV, Tempo Traveller, Other).
pub fn consolidate_to_coco(label: usize, taxonomy: &ClassTaxonomy) -> Result<Option<CocoClass>> {
    let name = taxonomy
        .name(label)
        .ok_or_else(|| Error::Evaluation(format!("unknown class index {label}")))?;
    Ok(match name.to_lowercase().as_str() {
        "hatchback" | "sedan" | "suv" | "muv" | "van" => Some(CocoClass::Car),
        "bus" | "m. bus" => Some(CocoClass::Bus),
        "truck" => Some(CocoClass::Truck),
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_one_seventh() {
        assert!((iou(&bb(0.0, 0.0, 2.0, 2.0), &bb(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn match_exact_hit() {
        let g = bb(10.0, 10.0, 20.0, 20.0);
        let (tp, matched) = match_detections(&[(g, 2, 0.9)], &[(g, 2)], 0.5);
        assert_eq!(tp, vec![true]);
        assert_eq!(matched, vec![true]);
    }

    #[test]
    fn one_match_per_gt() {
        let g = bb(10.0, 10.0, 20.0, 20.0);
        let (tp, _) = match_detections(&[(g, 2, 0.6), (g, 2, 0.9)], &[(g, 2)], 0.5);
        // higher-confidence detection takes the gt
        assert_eq!(tp, vec![false, true]);
    }

    #[test]
    fn threshold_excludes_loose_match() {
        let g = bb(0.0, 0.0, 10.0, 10.0);
        let d = bb(0.0, 0.0, 10.0, 6.0); // IoU 0.6
        assert!((d.iou(&g) - 0.6).abs() < 1e-12);
        let (tp, _) = match_detections(&[(d, 0, 0.9)], &[(g, 0)], 0.75);
        assert_eq!(tp, vec![false]);
        let (tp, _) = match_detections(&[(d, 0, 0.9)], &[(g, 0)], 0.5);
        assert_eq!(tp, vec![true]);
    }

    #[test]
    fn class_mismatch_is_fp() {
        let g = bb(0.0, 0.0, 10.0, 10.0);
        let (tp, _) = match_detections(&[(g, 1, 0.9)], &[(g, 2)], 0.5);
        assert_eq!(tp, vec![false]);
    }

    #[test]
    fn ap_perfect_detector() {
        assert!((average_precision(&[(0.9, true)], 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_fp_above_tp() {
        // precision at full recall is 1/2; envelope makes AP 0.5
        let ap = average_precision(&[(0.9, false), (0.8, true)], 1);
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_confidence_rescale_invariant() {
        let ranked = [(0.9, true), (0.8, false), (0.7, true), (0.6, false)];
        let rescaled: Vec<(f64, bool)> = ranked.iter().map(|&(s, h)| (s * 0.1, h)).collect();
        assert_eq!(
            average_precision(&ranked, 3),
            average_precision(&rescaled, 3)
        );
    }

    fn det(image: i64, b: BBox, label: usize, score: f64) -> Detection {
        Detection {
            image_id: image,
            bbox: b,
            label,
            score,
        }
    }

    fn gt(image: i64, b: BBox, label: usize) -> GroundTruth {
        GroundTruth {
            image_id: image,
            bbox: b,
            label,
        }
    }

    #[test]
    fn map_perfect_everywhere() {
        let tax = ClassTaxonomy::uvh();
        let b = bb(5.0, 5.0, 40.0, 40.0);
        let report = map_metrics(&[det(1, b, 2, 0.99)], &[gt(1, b, 2)], &tax).unwrap();
        assert!((report.map50 - 1.0).abs() < 1e-12);
        assert!((report.map75 - 1.0).abs() < 1e-12);
        assert!((report.map5095 - 1.0).abs() < 1e-12);
        assert_eq!(report.classes, vec![2]);
    }

    #[test]
    fn map_iou_exactly_point_six() {
        let tax = ClassTaxonomy::uvh();
        let g = bb(0.0, 0.0, 10.0, 10.0);
        let d = bb(0.0, 0.0, 10.0, 6.0); // IoU 0.6: passes 0.50/0.55/0.60 only
        let report = map_metrics(&[det(1, d, 2, 0.9)], &[gt(1, g, 2)], &tax).unwrap();
        assert!((report.map50 - 1.0).abs() < 1e-12);
        assert!((report.map75 - 0.0).abs() < 1e-12);
        assert!((report.map5095 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn map_rejects_empty_gt() {
        assert!(map_metrics(&[], &[], &ClassTaxonomy::uvh()).is_err());
    }

    #[test]
    fn map50_at_least_map75() {
        let tax = ClassTaxonomy::uvh();
        let g = bb(0.0, 0.0, 10.0, 10.0);
        let dets = vec![
            det(1, bb(0.0, 0.0, 10.0, 8.0), 2, 0.9),
            det(1, bb(50.0, 50.0, 5.0, 5.0), 2, 0.8),
        ];
        let report = map_metrics(&dets, &[gt(1, g, 2)], &tax).unwrap();
        assert!(report.map50 >= report.map75);
    }

    #[test]
    fn coco_consolidation_table() {
        let tax = ClassTaxonomy::uvh();
        let class = |name: &str| tax.index_of(name).unwrap();
        assert_eq!(
            consolidate_to_coco(class("Sedan"), &tax).unwrap(),
            Some(CocoClass::Car)
        );
        assert_eq!(
            consolidate_to_coco(class("Van"), &tax).unwrap(),
            Some(CocoClass::Car)
        );
        assert_eq!(
            consolidate_to_coco(class("M. Bus"), &tax).unwrap(),
            Some(CocoClass::Bus)
        );
        assert_eq!(
            consolidate_to_coco(class("Bus"), &tax).unwrap(),
            Some(CocoClass::Bus)
        );
        assert_eq!(
            consolidate_to_coco(class("Truck"), &tax).unwrap(),
            Some(CocoClass::Truck)
        );
        for excluded in [
            "Cycle",
            "2-Wheeler",
            "3-Wheeler",
            "LCV",
            "T. Traveller",
            "Other",
        ] {
            assert_eq!(consolidate_to_coco(class(excluded), &tax).unwrap(), None);
        }
        assert!(consolidate_to_coco(99, &tax).is_err());
    }
}
