//! Grouping per-annotator events into clusters that refer to the same
//! physical object, averaging cluster geometry, and deciding retention.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::model::{Action, AnnotationEvent, BBox, BoxCluster, ClusterOrigin};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.60;

/// Clusters for one image, plus annotator-added clusters that sit on top of
/// a pre-annotated one (possible duplicates worth reviewing).
#[derive(Debug, Clone)]
pub struct GroupingResult {
    pub clusters: Vec<BoxCluster>,
    /// (added cluster_id, pre-annotated cluster_id) pairs with mean-geometry
    /// IoU at or above the matching threshold.
    pub near_duplicates: Vec<(u64, u64)>,
}

/// Group all events of one image into box clusters.
///
/// Events sharing a persistent box id form one cluster. Annotator-added
/// boxes are matched greedily by descending pairwise IoU at `iou_threshold`,
/// at most one box per annotator per cluster. When an annotator touched the
/// same box id more than once, the latest event wins.
pub fn group_events(events: &[AnnotationEvent], iou_threshold: f64) -> Result<GroupingResult> {
    let image_id = match events.first() {
        Some(e) => e.image_id,
        None => {
            return Ok(GroupingResult {
                clusters: Vec::new(),
                near_duplicates: Vec::new(),
            })
        }
    };
    if let Some(e) = events.iter().find(|e| e.image_id != image_id) {
        return Err(Error::Correspondence(format!(
            "events span multiple images ({image_id} and {})",
            e.image_id
        )));
    }

    // Latest event per (annotator, box) wins.
    let mut latest: BTreeMap<(u32, u64), AnnotationEvent> = BTreeMap::new();
    for event in events {
        latest.insert((event.annotator_id, event.box_id), event.clone());
    }

    let added_ids: HashSet<u64> = latest
        .values()
        .filter(|e| e.action == Action::Add)
        .map(|e| e.box_id)
        .collect();
    for event in latest.values() {
        if event.action == Action::Delete && added_ids.contains(&event.box_id) {
            return Err(Error::Correspondence(format!(
                "delete of box {} matches no pre-annotation (id was annotator-added)",
                event.box_id
            )));
        }
    }

    // Pre-annotated clusters: keyed by the persistent box id.
    let mut pre: BTreeMap<u64, Vec<AnnotationEvent>> = BTreeMap::new();
    let mut added: Vec<AnnotationEvent> = Vec::new();
    for event in latest.into_values() {
        if event.action == Action::Add {
            added.push(event);
        } else {
            pre.entry(event.box_id).or_default().push(event);
        }
    }

    // Greedy IoU matching over added boxes, deterministic order.
    added.sort_by_key(|e| (e.annotator_id, e.box_id));
    let added_clusters = match_added_boxes(&added, iou_threshold);

    let mut clusters = Vec::new();
    let mut next_id = 0u64;
    for members in pre.into_values() {
        clusters.push(BoxCluster {
            cluster_id: next_id,
            image_id,
            members,
            origin: ClusterOrigin::PreAnnotated,
        });
        next_id += 1;
    }
    let first_added_id = next_id;
    for members in added_clusters {
        clusters.push(BoxCluster {
            cluster_id: next_id,
            image_id,
            members,
            origin: ClusterOrigin::AnnotatorAdded,
        });
        next_id += 1;
    }

    let near_duplicates = flag_near_duplicates(&clusters, first_added_id, iou_threshold);
    Ok(GroupingResult {
        clusters,
        near_duplicates,
    })
}

fn match_added_boxes(added: &[AnnotationEvent], iou_threshold: f64) -> Vec<Vec<AnnotationEvent>> {
    // Pairwise IoUs above threshold, descending, stable tie-break on index.
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..added.len() {
        for j in i + 1..added.len() {
            if added[i].annotator_id == added[j].annotator_id {
                continue;
            }
            let iou = added[i].bbox.unwrap().iou(&added[j].bbox.unwrap());
            if iou >= iou_threshold {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    // cluster index per added event, usize::MAX = unassigned
    let mut assignment = vec![usize::MAX; added.len()];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (_, i, j) in pairs {
        match (assignment[i], assignment[j]) {
            (usize::MAX, usize::MAX) => {
                assignment[i] = groups.len();
                assignment[j] = groups.len();
                groups.push(vec![i, j]);
            }
            (g, usize::MAX) => {
                if !groups[g]
                    .iter()
                    .any(|&m| added[m].annotator_id == added[j].annotator_id)
                {
                    assignment[j] = g;
                    groups[g].push(j);
                }
            }
            (usize::MAX, g)
                if !groups[g]
                    .iter()
                    .any(|&m| added[m].annotator_id == added[i].annotator_id) =>
            {
                assignment[i] = g;
                groups[g].push(i);
            }
            _ => {}
        }
    }
    for (i, slot) in assignment.iter_mut().enumerate() {
        if *slot == usize::MAX {
            *slot = groups.len();
            groups.push(vec![i]);
        }
    }
    // Emit in order of each group's first member (added is already sorted).
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&g| groups[g].iter().copied().min().unwrap());
    order
        .into_iter()
        .map(|g| {
            let mut members = groups[g].clone();
            members.sort_unstable();
            members.into_iter().map(|i| added[i].clone()).collect()
        })
        .collect()
}

fn flag_near_duplicates(
    clusters: &[BoxCluster],
    first_added_id: u64,
    iou_threshold: f64,
) -> Vec<(u64, u64)> {
    let mut flagged = Vec::new();
    for added in clusters.iter().filter(|c| c.cluster_id >= first_added_id) {
        let Ok(added_bbox) = average_geometry(added) else {
            continue;
        };
        for pre in clusters.iter().filter(|c| c.cluster_id < first_added_id) {
            let Ok(pre_bbox) = average_geometry(pre) else {
                continue;
            };
            if added_bbox.iou(&pre_bbox) >= iou_threshold {
                flagged.push((added.cluster_id, pre.cluster_id));
            }
        }
    }
    flagged
}

/// Coordinate-wise mean of the cluster's non-delete geometry.
pub fn average_geometry(cluster: &BoxCluster) -> Result<BBox> {
    let mut n = 0usize;
    let (mut x, mut y, mut w, mut h) = (0.0, 0.0, 0.0, 0.0);
    for event in cluster.live_members() {
        let b = event.bbox.ok_or_else(|| {
            Error::Correspondence(format!(
                "non-delete event on box {} has no geometry",
                event.box_id
            ))
        })?;
        x += b.x;
        y += b.y;
        w += b.w;
        h += b.h;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Correspondence(format!(
            "cluster {} has only delete events",
            cluster.cluster_id
        )));
    }
    let n = n as f64;
    BBox::new(x / n, y / n, w / n, h / n)
}

/// A box survives unless a strict majority of the annotators who saw the
/// image deleted it.
pub fn resolve_retention(cluster: &BoxCluster, viewers: usize) -> Result<bool> {
    if viewers == 0 {
        return Err(Error::Correspondence("viewer count is zero".into()));
    }
    if viewers < cluster.members.len() {
        return Err(Error::Correspondence(format!(
            "cluster {} has more members ({}) than viewers ({viewers})",
            cluster.cluster_id,
            cluster.members.len()
        )));
    }
    Ok(cluster.delete_votes() * 2 <= viewers)
}
