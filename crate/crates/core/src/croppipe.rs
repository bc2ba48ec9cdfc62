//! Vehicle-region cropping and small-box diagnostics.
//!
//! Full-frame images whose wheels shrink to a few pixels after resizing to
//! the network input are turned into vehicle-sized crops. Vehicle detections
//! become positive ROI crops with remapped labels; every other detected
//! object becomes a negative crop with an empty label file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use image::DynamicImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detections::Detection;
use crate::error::{Error, Result};
use crate::geometry::{letterbox, remap_into_crop, to_pixel, PixelBox};
use crate::labelio::{
    label_path_for, write_label_file, DatasetIndex, ImageDims, LabelState, LabeledImage,
    NormalizedBox,
};

pub const DEFAULT_PAD_FRACTION: f64 = 0.05;
pub const DEFAULT_MIN_PX: f64 = 2.0;
pub const DEFAULT_INPUT_SIDE: u32 = 512;

/// COCO class ids of the vehicle detector's outputs.
pub const COCO_PERSON: u32 = 0;
pub const COCO_CAR: u32 = 2;
pub const COCO_BUS: u32 = 5;
pub const COCO_TRUCK: u32 = 7;

/// Bus, car and truck.
pub fn default_vehicle_classes() -> BTreeSet<u32> {
    [COCO_CAR, COCO_BUS, COCO_TRUCK].into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropRole {
    PositiveRoi,
    NegativeSample,
}

impl CropRole {
    fn tag(self) -> &'static str {
        match self {
            CropRole::PositiveRoi => "roi",
            CropRole::NegativeSample => "neg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropJob {
    pub source_image_id: String,
    /// Source-frame pixels, already padded and clamped.
    pub region: PixelBox,
    pub role: CropRole,
    pub pad_fraction: f64,
}

impl CropJob {
    /// Integer raster bounds `(x0, y0, x1, y1)`: floor of the minimum, ceil
    /// of the maximum, clamped to the image.
    pub fn raster_bounds(&self, dims: ImageDims) -> (u32, u32, u32, u32) {
        let x0 = self.region.x_min.floor().max(0.0) as u32;
        let y0 = self.region.y_min.floor().max(0.0) as u32;
        let x1 = (self.region.x_max.ceil() as u32).min(dims.width_px);
        let y1 = (self.region.y_max.ceil() as u32).min(dims.height_px);
        (x0, y0, x1, y1)
    }

    /// Output image id: source id plus role and integer region.
    pub fn output_id(&self, dims: ImageDims) -> String {
        let (x0, y0, x1, y1) = self.raster_bounds(dims);
        format!(
            "{}__{}_{x0}_{y0}_{x1}_{y1}",
            self.source_image_id,
            self.role.tag()
        )
    }
}

/// Turns vehicle-detector output into crop jobs.
///
/// Detections of `vehicle_classes` become positive ROI jobs grown by
/// `pad_fraction` of their size on every side; everything else becomes a
/// negative sample cut exactly to the detection. Regions are clamped to the
/// image.
pub fn plan_crops(
    vehicle_dets: &[Detection],
    vehicle_classes: &BTreeSet<u32>,
    pad_fraction: f64,
    dims: &BTreeMap<String, ImageDims>,
) -> Result<Vec<CropJob>> {
    if !(pad_fraction >= 0.0 && pad_fraction.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "pad_fraction {pad_fraction} must be a non-negative number"
        )));
    }
    vehicle_dets
        .iter()
        .map(|d| {
            let src = *dims
                .get(&d.image_id)
                .ok_or_else(|| Error::UnknownImage(d.image_id.clone()))?;
            let p = to_pixel(&d.bbox, src);
            let role = if vehicle_classes.contains(&d.class_id()) {
                CropRole::PositiveRoi
            } else {
                CropRole::NegativeSample
            };
            let pad = match role {
                CropRole::PositiveRoi => pad_fraction,
                CropRole::NegativeSample => 0.0,
            };
            let (dx, dy) = (p.width() * pad, p.height() * pad);
            let region = PixelBox {
                x_min: (p.x_min - dx).max(0.0),
                y_min: (p.y_min - dy).max(0.0),
                x_max: (p.x_max + dx).min(f64::from(src.width_px)),
                y_max: (p.y_max + dy).min(f64::from(src.height_px)),
                class_id: d.class_id(),
            };
            region.validate()?;
            Ok(CropJob {
                source_image_id: d.image_id.clone(),
                region,
                role,
                pad_fraction: pad,
            })
        })
        .collect()
}

/// Decoded source rasters, looked up by image id.
pub trait RasterStore: Sync {
    fn load(&self, entry: &LabeledImage) -> Result<DynamicImage>;
}

/// Reads rasters from the paths recorded in the index.
#[derive(Debug, Default, Clone, Copy)]
pub struct FsRasterStore;

impl RasterStore for FsRasterStore {
    fn load(&self, entry: &LabeledImage) -> Result<DynamicImage> {
        image::open(&entry.image_path).map_err(|e| Error::Decode {
            path: entry.image_path.clone(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub job: usize,
    pub source_image_id: String,
    pub message: String,
}

/// A source label that landed in more than one crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicatedLabel {
    pub source_image_id: String,
    pub box_index: usize,
    pub crops: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CropReport {
    pub jobs: usize,
    pub positive_written: usize,
    pub negative_written: usize,
    /// Jobs whose integer region repeated an earlier job's.
    pub skipped_identical: usize,
    pub labels_kept: usize,
    pub labels_dropped: usize,
    pub duplicated_labels: Vec<DuplicatedLabel>,
    pub errors: Vec<JobError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropOutcome {
    pub index: DatasetIndex,
    pub report: CropReport,
}

struct JobOutput {
    entry: LabeledImage,
    /// `(source box index)` for every kept label, in output order.
    kept_from: Vec<usize>,
    dropped: usize,
}

/// Cuts every job out of its source raster and writes a cropped dataset.
///
/// Crops are written losslessly as PNG under `out_root`, mirroring the source
/// id's directories. Positive crops get the source labels that survive
/// [`remap_into_crop`] (an empty file when none do); negative crops get an
/// empty label file. A positive crop of an unlabeled source gets no label
/// file at all, so it stays unlabeled for pre-labeling and review.
///
/// Per-job failures are collected in the report and never stop other jobs.
pub fn execute_crops(
    jobs: &[CropJob],
    labels: &DatasetIndex,
    raster: &dyn RasterStore,
    min_visibility: f64,
    out_root: &Path,
) -> Result<CropOutcome> {
    if !(0.0..=1.0).contains(&min_visibility) {
        return Err(Error::InvalidArgument(format!(
            "min_visibility {min_visibility} outside [0, 1]"
        )));
    }
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;

    let mut report = CropReport {
        jobs: jobs.len(),
        ..CropReport::default()
    };

    // Identical integer regions would write the same file twice.
    let mut seen = BTreeSet::new();
    let mut unique: Vec<usize> = Vec::new();
    for (i, job) in jobs.iter().enumerate() {
        let key = labels
            .get(&job.source_image_id)
            .map(|e| job.output_id(e.dims))
            .unwrap_or_else(|| format!("missing:{i}"));
        if seen.insert(key) {
            unique.push(i);
        } else {
            report.skipped_identical += 1;
        }
    }

    let results: Vec<(usize, Result<JobOutput>)> = unique
        .par_iter()
        .map(|&i| {
            (
                i,
                run_job(&jobs[i], labels, raster, min_visibility, out_root),
            )
        })
        .collect();

    let mut entries = Vec::new();
    let mut crops_of_label: BTreeMap<(String, usize), Vec<String>> = BTreeMap::new();
    for (i, res) in results {
        match res {
            Ok(out) => {
                match jobs[i].role {
                    CropRole::PositiveRoi => report.positive_written += 1,
                    CropRole::NegativeSample => report.negative_written += 1,
                }
                report.labels_kept += out.kept_from.len();
                report.labels_dropped += out.dropped;
                for b in &out.kept_from {
                    crops_of_label
                        .entry((jobs[i].source_image_id.clone(), *b))
                        .or_default()
                        .push(out.entry.image_id.clone());
                }
                entries.push(out.entry);
            }
            Err(e) => report.errors.push(JobError {
                job: i,
                source_image_id: jobs[i].source_image_id.clone(),
                message: e.to_string(),
            }),
        }
    }
    report.duplicated_labels = crops_of_label
        .into_iter()
        .filter(|(_, crops)| crops.len() > 1)
        .map(|((source_image_id, box_index), crops)| DuplicatedLabel {
            source_image_id,
            box_index,
            crops,
        })
        .collect();

    let index = DatasetIndex::from_entries(out_root, entries, Vec::new())?;
    Ok(CropOutcome { index, report })
}

fn run_job(
    job: &CropJob,
    labels: &DatasetIndex,
    raster: &dyn RasterStore,
    min_visibility: f64,
    out_root: &Path,
) -> Result<JobOutput> {
    let source = labels
        .get(&job.source_image_id)
        .ok_or_else(|| Error::UnknownImage(job.source_image_id.clone()))?;
    let (x0, y0, x1, y1) = job.raster_bounds(source.dims);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::DegenerateBox(format!(
            "crop ({x0}, {y0})-({x1}, {y1}) is empty"
        )));
    }
    let crop_rect = PixelBox::new(
        0,
        f64::from(x0),
        f64::from(y0),
        f64::from(x1),
        f64::from(y1),
    )?;

    let img = raster.load(source)?;
    if (img.width(), img.height()) != (source.dims.width_px, source.dims.height_px) {
        return Err(Error::Decode {
            path: source.image_path.clone(),
            message: format!(
                "raster is {}x{}, index says {}x{}",
                img.width(),
                img.height(),
                source.dims.width_px,
                source.dims.height_px
            ),
        });
    }
    let cropped = img.crop_imm(x0, y0, x1 - x0, y1 - y0);
    let dims = ImageDims::new(x1 - x0, y1 - y0)?;

    let mut boxes: Vec<NormalizedBox> = Vec::new();
    let mut kept_from = Vec::new();
    let mut dropped = 0;
    let label_state = match (job.role, source.label_state) {
        (CropRole::NegativeSample, _) => LabelState::Negative,
        (CropRole::PositiveRoi, LabelState::Unlabeled) => LabelState::Unlabeled,
        (CropRole::PositiveRoi, _) => {
            for (k, b) in source.boxes.iter().enumerate() {
                match remap_into_crop(b, &crop_rect, source.dims, min_visibility)? {
                    Some(r) => {
                        boxes.push(r.box_in_crop);
                        kept_from.push(k);
                    }
                    None => dropped += 1,
                }
            }
            if boxes.is_empty() {
                LabelState::Negative
            } else {
                LabelState::Labeled
            }
        }
    };

    let image_id = job.output_id(source.dims);
    let image_path = out_root.join(format!("{image_id}.png"));
    if let Some(parent) = image_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    cropped
        .save_with_format(&image_path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: image_path.clone(),
            message: e.to_string(),
        })?;
    let label_path = label_path_for(&image_path);
    if label_state == LabelState::Unlabeled {
        // A rerun must not leave a stale label behind.
        if label_path.exists() {
            fs::remove_file(&label_path).map_err(|e| Error::io(&label_path, e))?;
        }
    } else {
        write_label_file(&label_path, &boxes)?;
    }

    Ok(JobOutput {
        entry: LabeledImage {
            image_id,
            image_path,
            dims,
            boxes,
            label_state,
        },
        kept_from,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallBoxFinding {
    pub image_id: String,
    pub box_index: usize,
    pub scaled_w_px: f64,
    pub scaled_h_px: f64,
    pub flagged: bool,
}

/// Pixel size of every labeled box once its image is letterboxed to
/// `input_side`; boxes whose smaller side falls under `min_px` are flagged.
/// Sorted by image id, then box index.
pub fn small_box_report(
    index: &DatasetIndex,
    input_side: u32,
    min_px: f64,
) -> Result<Vec<SmallBoxFinding>> {
    let mut out = Vec::new();
    for entry in &index.entries {
        let t = letterbox(entry.dims, input_side)?;
        for (box_index, b) in entry.boxes.iter().enumerate() {
            let scaled_w_px = b.w * f64::from(entry.dims.width_px) * t.scale;
            let scaled_h_px = b.h * f64::from(entry.dims.height_px) * t.scale;
            out.push(SmallBoxFinding {
                image_id: entry.image_id.clone(),
                box_index,
                scaled_w_px,
                scaled_h_px,
                flagged: scaled_w_px.min(scaled_h_px) < min_px,
            });
        }
    }
    out.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(a.box_index.cmp(&b.box_index))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelio::{index_dataset, IndexOptions};
    use image::{Rgb, RgbImage};
    use std::path::PathBuf;

    fn dims(w: u32, h: u32) -> ImageDims {
        ImageDims::new(w, h).unwrap()
    }

    fn det(id: &str, class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Detection {
        Detection::new(id, NormalizedBox::new(class_id, cx, cy, w, h).unwrap(), 0.9).unwrap()
    }

    #[test]
    fn plan_roles_and_padding() {
        let d = [("a".to_string(), dims(400, 400))].into();
        let dets = [
            det("a", COCO_CAR, 0.5, 0.5, 0.5, 0.25),
            det("a", COCO_PERSON, 0.2, 0.2, 0.1, 0.2),
        ];
        let jobs = plan_crops(&dets, &default_vehicle_classes(), 0.0, &d).unwrap();
        assert_eq!(jobs[0].role, CropRole::PositiveRoi);
        assert_eq!(jobs[1].role, CropRole::NegativeSample);
        let r = jobs[0].region;
        assert_eq!(
            (r.x_min, r.y_min, r.x_max, r.y_max),
            (100.0, 150.0, 300.0, 250.0)
        );

        let jobs = plan_crops(&dets, &default_vehicle_classes(), 0.1, &d).unwrap();
        let r = jobs[0].region;
        assert_eq!(
            (r.x_min, r.y_min, r.x_max, r.y_max),
            (80.0, 140.0, 320.0, 260.0)
        );
        assert!(plan_crops(&[], &default_vehicle_classes(), 0.05, &d)
            .unwrap()
            .is_empty());
        assert!(plan_crops(&dets, &default_vehicle_classes(), -0.1, &d).is_err());
    }

    #[test]
    fn padding_is_clamped_to_image() {
        let d = [("a".to_string(), dims(100, 100))].into();
        let jobs = plan_crops(
            &[det("a", COCO_BUS, 0.1, 0.1, 0.2, 0.2)],
            &default_vehicle_classes(),
            0.5,
            &d,
        )
        .unwrap();
        let r = jobs[0].region;
        assert_eq!((r.x_min, r.y_min, r.x_max, r.y_max), (0.0, 0.0, 30.0, 30.0));
    }

    #[test]
    fn raster_bounds_floor_and_ceil() {
        let job = CropJob {
            source_image_id: "a".into(),
            region: PixelBox::new(0, 10.4, 20.6, 30.2, 40.0).unwrap(),
            role: CropRole::PositiveRoi,
            pad_fraction: 0.0,
        };
        assert_eq!(job.raster_bounds(dims(100, 100)), (10, 20, 31, 40));
        assert_eq!(job.output_id(dims(100, 100)), "a__roi_10_20_31_40");
    }

    #[test]
    fn worked_example_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let src_root = dir.path().join("src");
        fs::create_dir_all(&src_root).unwrap();
        RgbImage::from_pixel(400, 400, Rgb([90, 90, 90]))
            .save(src_root.join("street.png"))
            .unwrap();
        // Wheel at (100,100)-(200,200).
        fs::write(
            src_root.join("street.txt"),
            "0 0.375000 0.375000 0.250000 0.250000\n",
        )
        .unwrap();
        let index = index_dataset(&src_root, &IndexOptions::default()).unwrap();

        let jobs = vec![
            CropJob {
                source_image_id: "street".into(),
                region: PixelBox::new(COCO_CAR, 150.0, 0.0, 350.0, 200.0).unwrap(),
                role: CropRole::PositiveRoi,
                pad_fraction: 0.0,
            },
            CropJob {
                source_image_id: "street".into(),
                region: PixelBox::new(COCO_PERSON, 0.0, 300.0, 50.0, 400.0).unwrap(),
                role: CropRole::NegativeSample,
                pad_fraction: 0.0,
            },
        ];
        let out_root = dir.path().join("out");
        let out = execute_crops(&jobs, &index, &FsRasterStore, 0.3, &out_root).unwrap();
        assert!(out.report.errors.is_empty());
        assert_eq!(out.report.positive_written, 1);
        assert_eq!(out.report.negative_written, 1);

        let label = fs::read_to_string(out_root.join("street__roi_150_0_350_200.txt")).unwrap();
        assert_eq!(label, "0 0.125000 0.750000 0.250000 0.500000\n");
        let neg = fs::read_to_string(out_root.join("street__neg_0_300_50_400.txt")).unwrap();
        assert_eq!(neg, "");

        let reindexed = index_dataset(&out_root, &IndexOptions::default()).unwrap();
        assert_eq!(reindexed.entries.len(), 2);
        assert_eq!(reindexed.count(LabelState::Labeled), 1);
        assert_eq!(reindexed.count(LabelState::Negative), 1);
        assert_eq!(
            reindexed.get("street__roi_150_0_350_200").unwrap().dims,
            dims(200, 200)
        );
    }

    struct Broken;
    impl RasterStore for Broken {
        fn load(&self, entry: &LabeledImage) -> Result<DynamicImage> {
            if entry.image_id == "bad" {
                Err(Error::Decode {
                    path: entry.image_path.clone(),
                    message: "truncated".into(),
                })
            } else {
                Ok(DynamicImage::new_rgb8(
                    entry.dims.width_px,
                    entry.dims.height_px,
                ))
            }
        }
    }

    #[test]
    fn decode_failures_are_per_job() {
        let entry = |id: &str| LabeledImage {
            image_id: id.into(),
            image_path: PathBuf::from(format!("{id}.png")),
            dims: dims(50, 50),
            boxes: Vec::new(),
            label_state: LabelState::Negative,
        };
        let index =
            DatasetIndex::from_entries("", vec![entry("bad"), entry("good")], vec![]).unwrap();
        let job = |id: &str| CropJob {
            source_image_id: id.into(),
            region: PixelBox::new(0, 0.0, 0.0, 10.0, 10.0).unwrap(),
            role: CropRole::NegativeSample,
            pad_fraction: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let out = execute_crops(
            &[job("bad"), job("good"), job("good")],
            &index,
            &Broken,
            0.3,
            dir.path(),
        )
        .unwrap();
        assert_eq!(out.report.errors.len(), 1);
        assert_eq!(out.report.errors[0].source_image_id, "bad");
        assert_eq!(out.report.skipped_identical, 1);
        assert_eq!(out.index.entries.len(), 1);
    }

    #[test]
    fn small_box_flags() {
        let entry = LabeledImage {
            image_id: "wide".into(),
            image_path: PathBuf::from("wide.png"),
            dims: dims(1920, 1080),
            boxes: vec![
                NormalizedBox::new(0, 0.5, 0.5, 0.003, 0.01).unwrap(),
                NormalizedBox::new(0, 0.5, 0.5, 1.0, 1.0).unwrap(),
            ],
            label_state: LabelState::Labeled,
        };
        let index = DatasetIndex::from_entries("", vec![entry], vec![]).unwrap();
        let f = small_box_report(&index, 512, 2.0).unwrap();
        assert!((f[0].scaled_w_px - 1.536).abs() < 1e-9);
        assert!(f[0].flagged);
        assert!(!f[1].flagged);
        assert_eq!((f[1].scaled_w_px, f[1].scaled_h_px), (512.0, 288.0));
    }
}
