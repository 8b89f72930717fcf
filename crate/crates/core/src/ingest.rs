//! COCO-format dataset I/O, the line-delimited annotation event log, and
//! dataset validation reports.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnnotationEvent, BBox, ClassTaxonomy, ImageRecord};

/// One ground-truth box entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub image_id: i64,
    pub bbox: BBox,
    pub label: usize,
    /// Set when the box extends beyond the image frame.
    pub out_of_bounds: bool,
}

/// Images plus ground-truth boxes under one taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub taxonomy: ClassTaxonomy,
    pub images: Vec<ImageRecord>,
    pub boxes: Vec<GtBox>,
}

impl Dataset {
    pub fn empty(taxonomy: ClassTaxonomy) -> Self {
        Self {
            taxonomy,
            images: Vec::new(),
            boxes: Vec::new(),
        }
    }

    pub fn boxes_for(&self, image_id: i64) -> impl Iterator<Item = &GtBox> {
        self.boxes.iter().filter(move |b| b.image_id == image_id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: i64,
    width: u32,
    height: u32,
    file_name: String,
    #[serde(default, skip_serializing_if = "is_false")]
    is_gold: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: i64,
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
    area: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Parse a COCO annotation file, mapping category names onto `taxonomy`
/// case-insensitively. Unknown top-level fields are ignored.
pub fn parse_coco(path: impl AsRef<Path>, taxonomy: &ClassTaxonomy) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let doc: CocoDocument =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))?;
    dataset_from_coco(doc, taxonomy)
}

fn dataset_from_coco(doc: CocoDocument, taxonomy: &ClassTaxonomy) -> Result<Dataset> {
    let mut cat_to_label = HashMap::new();
    for cat in &doc.categories {
        let label = taxonomy
            .index_of(&cat.name)
            .ok_or_else(|| Error::Coco(format!("category {:?} absent from taxonomy", cat.name)))?;
        cat_to_label.insert(cat.id, label);
    }

    let mut images = Vec::with_capacity(doc.images.len());
    let mut dims = HashMap::new();
    for img in &doc.images {
        if img.width == 0 || img.height == 0 {
            return Err(Error::Coco(format!("image {} has zero dimensions", img.id)));
        }
        if dims
            .insert(img.id, (img.width as f64, img.height as f64))
            .is_some()
        {
            return Err(Error::Coco(format!("duplicate image id {}", img.id)));
        }
        images.push(ImageRecord {
            image_id: img.id,
            width: img.width,
            height: img.height,
            is_gold: img.is_gold,
        });
    }

    let mut boxes = Vec::with_capacity(doc.annotations.len());
    for ann in &doc.annotations {
        let &(w, h) = dims.get(&ann.image_id).ok_or_else(|| {
            Error::Coco(format!(
                "annotation {} references unknown image {}",
                ann.id, ann.image_id
            ))
        })?;
        let label = *cat_to_label.get(&ann.category_id).ok_or_else(|| {
            Error::Coco(format!(
                "annotation {} references unknown category {}",
                ann.id, ann.category_id
            ))
        })?;
        let [x, y, bw, bh] = ann.bbox;
        let bbox = BBox::new(x, y, bw, bh)?;
        boxes.push(GtBox {
            image_id: ann.image_id,
            out_of_bounds: !bbox.within(w, h),
            bbox,
            label,
        });
    }

    Ok(Dataset {
        taxonomy: taxonomy.clone(),
        images,
        boxes,
    })
}

/// Write a dataset as a COCO annotation file. Category ids are the taxonomy
/// indices plus one.
pub fn write_coco(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let doc = CocoDocument {
        images: dataset
            .images
            .iter()
            .map(|img| CocoImage {
                id: img.image_id,
                width: img.width,
                height: img.height,
                file_name: format!("{}.jpg", img.image_id),
                is_gold: img.is_gold,
            })
            .collect(),
        annotations: dataset
            .boxes
            .iter()
            .enumerate()
            .map(|(i, b)| CocoAnnotation {
                id: i as i64 + 1,
                image_id: b.image_id,
                category_id: b.label as i64 + 1,
                bbox: [b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h],
                area: b.bbox.area(),
            })
            .collect(),
        categories: dataset
            .taxonomy
            .names()
            .iter()
            .enumerate()
            .map(|(i, name)| CocoCategory {
                id: i as i64 + 1,
                name: name.clone(),
            })
            .collect(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer(&mut writer, &doc).map_err(|e| Error::json(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Parse the line-delimited event log (one JSON event per line).
pub fn parse_event_log(
    path: impl AsRef<Path>,
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<AnnotationEvent>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: AnnotationEvent = serde_json::from_str(&line)
            .map_err(|e| Error::EventLog(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        validate_event(&event, taxonomy, lineno + 1)?;
        events.push(event);
    }
    Ok(events)
}

fn validate_event(event: &AnnotationEvent, taxonomy: &ClassTaxonomy, lineno: usize) -> Result<()> {
    if event.label >= taxonomy.len() {
        return Err(Error::EventLog(format!(
            "line {lineno}: label {} out of range for {}-class taxonomy",
            event.label,
            taxonomy.len()
        )));
    }
    let is_delete = event.action == crate::model::Action::Delete;
    if is_delete && event.bbox.is_some() {
        return Err(Error::EventLog(format!(
            "line {lineno}: delete event carries geometry"
        )));
    }
    if !is_delete && event.bbox.is_none() {
        return Err(Error::EventLog(format!(
            "line {lineno}: {} event missing geometry",
            event.action.as_str()
        )));
    }
    Ok(())
}

/// Write events one JSON object per line, in order.
pub fn write_event_log(events: &[AnnotationEvent], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for event in events {
        serde_json::to_writer(&mut writer, event).map_err(|e| Error::json(path, e))?;
        writer.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
struct CocoResult {
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
    score: f64,
}

/// Parse a standard COCO results array (detections). Category ids follow
/// the same convention as [`write_coco`]: taxonomy index plus one.
pub fn parse_coco_results(
    path: impl AsRef<Path>,
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<crate::evaluation::Detection>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<CocoResult> =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))?;
    raw.into_iter()
        .map(|r| {
            let label = (r.category_id - 1) as usize;
            if r.category_id < 1 || label >= taxonomy.len() {
                return Err(Error::Coco(format!(
                    "result category id {} outside taxonomy",
                    r.category_id
                )));
            }
            let [x, y, w, h] = r.bbox;
            Ok(crate::evaluation::Detection {
                image_id: r.image_id,
                bbox: BBox::new(x, y, w, h)?,
                label,
                score: r.score,
            })
        })
        .collect()
}

/// Deterministic summary of a dataset: class counts, boxes-per-image
/// histogram, and the out-of-bounds boxes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub total_images: usize,
    pub total_boxes: usize,
    /// Box count per class index.
    pub class_counts: Vec<usize>,
    /// boxes-per-image count -> number of images with that count.
    pub boxes_per_image: BTreeMap<usize, usize>,
    /// Indices into `dataset.boxes` of boxes outside their image frame.
    pub out_of_bounds: Vec<usize>,
}

pub fn validate_dataset(dataset: &Dataset) -> ValidationReport {
    let mut class_counts = vec![0usize; dataset.taxonomy.len()];
    let mut per_image: BTreeMap<i64, usize> =
        dataset.images.iter().map(|i| (i.image_id, 0)).collect();
    let mut out_of_bounds = Vec::new();
    for (i, b) in dataset.boxes.iter().enumerate() {
        class_counts[b.label] += 1;
        *per_image.entry(b.image_id).or_insert(0) += 1;
        if b.out_of_bounds {
            out_of_bounds.push(i);
        }
    }
    let mut boxes_per_image = BTreeMap::new();
    for count in per_image.values() {
        *boxes_per_image.entry(*count).or_insert(0) += 1;
    }
    ValidationReport {
        total_images: dataset.images.len(),
        total_boxes: dataset.boxes.len(),
        class_counts,
        boxes_per_image,
        out_of_bounds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Action;

    fn coco_json(bbox: &str, category: &str) -> String {
        format!(
            r#"{{"images":[{{"id":1,"width":1920,"height":1080,"file_name":"1.jpg"}}],
                "annotations":[{{"id":1,"image_id":1,"category_id":9,"bbox":{bbox},"area":1.0}}],
                "categories":[{{"id":9,"name":"{category}"}}]}}"#
        )
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parse_minimal_bus() {
        let f = write_tmp(&coco_json("[10,10,50,40]", "Bus"));
        let ds = parse_coco(f.path(), &ClassTaxonomy::uvh()).unwrap();
        assert_eq!(ds.images.len(), 1);
        assert_eq!(ds.boxes.len(), 1);
        assert_eq!(ds.boxes[0].label, 2);
        assert!(!ds.boxes[0].out_of_bounds);
    }

    #[test]
    fn parse_rejects_zero_width_box() {
        let f = write_tmp(&coco_json("[10,10,0,40]", "Bus"));
        let err = parse_coco(f.path(), &ClassTaxonomy::uvh()).unwrap_err();
        assert!(
            err.to_string().contains("non-positive box dimensions"),
            "{err}"
        );
    }

    #[test]
    fn parse_rejects_unknown_category() {
        let f = write_tmp(&coco_json("[10,10,5,40]", "Spaceship"));
        assert!(parse_coco(f.path(), &ClassTaxonomy::uvh()).is_err());
    }

    #[test]
    fn parse_rejects_orphan_annotation() {
        let json = r#"{"images":[],"annotations":[{"id":1,"image_id":7,"category_id":1,"bbox":[0,0,1,1],"area":1.0}],"categories":[{"id":1,"name":"Bus"}]}"#;
        let f = write_tmp(json);
        assert!(parse_coco(f.path(), &ClassTaxonomy::uvh()).is_err());
    }

    #[test]
    fn out_of_bounds_flagged_not_rejected() {
        let f = write_tmp(&coco_json("[1900,10,50,40]", "Bus"));
        let ds = parse_coco(f.path(), &ClassTaxonomy::uvh()).unwrap();
        assert!(ds.boxes[0].out_of_bounds);
    }

    #[test]
    fn coco_round_trip_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        let ds = Dataset::empty(ClassTaxonomy::uvh());
        write_coco(&ds, &path).unwrap();
        let back = parse_coco(&path, &ClassTaxonomy::uvh()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn event_log_empty_and_single() {
        let f = write_tmp("");
        assert!(parse_event_log(f.path(), &ClassTaxonomy::uvh())
            .unwrap()
            .is_empty());

        let event = AnnotationEvent {
            annotator_id: 3,
            image_id: 1,
            box_id: 7,
            action: Action::Confirm,
            label: 2,
            bbox: Some(BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        write_event_log(std::slice::from_ref(&event), &path).unwrap();
        let back = parse_event_log(&path, &ClassTaxonomy::uvh()).unwrap();
        assert_eq!(back, vec![event]);
    }

    #[test]
    fn event_log_rejects_unknown_action() {
        let f =
            write_tmp(r#"{"annotator_id":1,"image_id":1,"box_id":1,"action":"destroy","label":0}"#);
        assert!(parse_event_log(f.path(), &ClassTaxonomy::uvh()).is_err());
    }

    #[test]
    fn event_log_rejects_label_out_of_range() {
        let f = write_tmp(
            r#"{"annotator_id":1,"image_id":1,"box_id":1,"action":"confirm","label":99,"bbox":{"x":0,"y":0,"w":1,"h":1}}"#,
        );
        assert!(parse_event_log(f.path(), &ClassTaxonomy::uvh()).is_err());
    }

    #[test]
    fn validation_report_counts() {
        let tax = ClassTaxonomy::uvh();
        let empty = validate_dataset(&Dataset::empty(tax.clone()));
        assert_eq!(empty.total_boxes, 0);
        assert!(empty.class_counts.iter().all(|&c| c == 0));

        let bbox = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let ds = Dataset {
            taxonomy: tax,
            images: vec![ImageRecord {
                image_id: 1,
                width: 100,
                height: 100,
                is_gold: false,
            }],
            boxes: vec![
                GtBox {
                    image_id: 1,
                    bbox,
                    label: 2,
                    out_of_bounds: false,
                },
                GtBox {
                    image_id: 1,
                    bbox,
                    label: 2,
                    out_of_bounds: false,
                },
                GtBox {
                    image_id: 1,
                    bbox,
                    label: 4,
                    out_of_bounds: false,
                },
            ],
        };
        let report = validate_dataset(&ds);
        assert_eq!(report.class_counts[2], 2);
        assert_eq!(report.class_counts[4], 1);
        assert_eq!(
            report.class_counts.iter().sum::<usize>(),
            report.total_boxes
        );
        assert_eq!(report.boxes_per_image.get(&3), Some(&1));
    }
}
