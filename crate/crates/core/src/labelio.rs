//! YOLO label files and dataset roots.
//!
//! A label file holds one object per line as
//! `<class> <cx> <cy> <w> <h>`, where the last four fields are fractions of
//! the image width/height. Labels sit next to their image with the extension
//! replaced by `.txt`. An empty label file marks a reviewed negative sample;
//! a missing one marks an image nobody has labeled yet.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};

/// Slack allowed on the box extent after clamping.
pub const EXTENT_EPS: f64 = 1e-6;

pub const LABEL_EXTENSION: &str = "txt";
pub const DEFAULT_IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// One labeled object in image-relative coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormalizedBox {
    /// Builds a box and checks every invariant.
    pub fn new(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = NormalizedBox {
            class_id,
            cx,
            cy,
            w,
            h,
        };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box by clamping its corners into the unit square.
    ///
    /// Returns the box and whether anything had to be clamped. Fails when
    /// nothing of the box is left inside the image.
    pub fn clamped(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Result<(Self, bool)> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox("non-finite coordinate".into()));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::DegenerateBox(format!("w={w} h={h}")));
        }
        let (cx2, w2, cx_changed) = clamp_axis(cx, w)?;
        let (cy2, h2, cy_changed) = clamp_axis(cy, h)?;
        let b = NormalizedBox {
            class_id,
            cx: cx2,
            cy: cy2,
            w: w2,
            h: h2,
        };
        b.validate()?;
        Ok((b, cx_changed || cy_changed))
    }

    pub fn validate(&self) -> Result<()> {
        let NormalizedBox { cx, cy, w, h, .. } = *self;
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox("non-finite coordinate".into()));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(Error::InvalidBox(format!(
                "center ({cx}, {cy}) outside [0, 1]"
            )));
        }
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(Error::InvalidBox(format!("size ({w}, {h}) outside (0, 1]")));
        }
        let (x0, y0, x1, y1) = self.corners();
        if x0 < -EXTENT_EPS || y0 < -EXTENT_EPS || x1 > 1.0 + EXTENT_EPS || y1 > 1.0 + EXTENT_EPS {
            return Err(Error::InvalidBox(format!(
                "extent ({x0}, {y0})-({x1}, {y1}) leaves the image"
            )));
        }
        Ok(())
    }

    /// `(x_min, y_min, x_max, y_max)` in relative units.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

fn clamp_axis(center: f64, size: f64) -> Result<(f64, f64, bool)> {
    let lo = center - size / 2.0;
    let hi = center + size / 2.0;
    if lo >= 0.0 && hi <= 1.0 && (0.0..=1.0).contains(&center) {
        return Ok((center, size, false));
    }
    let lo = lo.clamp(0.0, 1.0);
    let hi = hi.clamp(0.0, 1.0);
    if hi <= lo {
        return Err(Error::DegenerateBox(format!(
            "no extent left inside the image after clamping (center {center}, size {size})"
        )));
    }
    Ok(((lo + hi) / 2.0, hi - lo, true))
}

/// Pixel size of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width_px: u32,
    pub height_px: u32,
}

impl ImageDims {
    pub fn new(width_px: u32, height_px: u32) -> Result<Self> {
        if width_px == 0 || height_px == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width_px}x{height_px}"
            )));
        }
        Ok(ImageDims {
            width_px,
            height_px,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    /// Any out-of-range value is an error.
    Strict,
    /// Coordinates are clamped into the image and the clamp is reported.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedLabels {
    pub boxes: Vec<NormalizedBox>,
    /// 1-based line numbers whose box had to be clamped.
    pub clamped_lines: Vec<usize>,
}

/// Parses the full text of one label file. Lines may end in LF or CRLF;
/// blank lines are skipped and file order is preserved.
pub fn parse_label_file(text: &str, mode: ParseMode) -> Result<ParsedLabels> {
    let mut out = ParsedLabels::default();
    for (idx, raw) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let (b, clamped) = parse_label_line(line, mode).map_err(|m| Error::parse(line_no, m))?;
        if clamped {
            out.clamped_lines.push(line_no);
        }
        out.boxes.push(b);
    }
    Ok(out)
}

fn parse_label_line(line: &str, mode: ParseMode) -> Result<(NormalizedBox, bool), String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    }
    let class_id = match fields[0].parse::<i64>() {
        Ok(c) if c < 0 => return Err(format!("negative class id {c}")),
        Ok(c) => u32::try_from(c).map_err(|_| format!("class id {c} too large"))?,
        Err(_) => return Err(format!("class id `{}` is not an integer", fields[0])),
    };
    let mut coords = [0.0f64; 4];
    for (slot, field) in coords.iter_mut().zip(&fields[1..]) {
        *slot = field
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("`{field}` is not a finite number"))?;
    }
    let [cx, cy, w, h] = coords;
    let parsed = match mode {
        ParseMode::Strict => NormalizedBox::new(class_id, cx, cy, w, h).map(|b| (b, false)),
        ParseMode::Lenient => NormalizedBox::clamped(class_id, cx, cy, w, h),
    };
    parsed.map_err(|e| e.to_string())
}

fn format_box_line(b: &NormalizedBox, out: &mut String) {
    // `+ 0.0` folds a negative zero so it never prints as "-0.000000".
    let _ = writeln!(
        out,
        "{} {:.6} {:.6} {:.6} {:.6}",
        b.class_id,
        b.cx + 0.0,
        b.cy + 0.0,
        b.w + 0.0,
        b.h + 0.0
    );
}

/// Renders boxes as label-file text: six decimals, LF endings, trailing LF.
/// An empty list renders as the empty string.
///
/// Refuses any box that is invalid, or that would stop being valid once
/// rounded to six decimals.
pub fn serialize_label_file(boxes: &[NormalizedBox]) -> Result<String> {
    let mut out = String::with_capacity(boxes.len() * 40);
    for (i, b) in boxes.iter().enumerate() {
        b.validate()
            .map_err(|e| Error::InvalidBox(format!("box {i}: {e}")))?;
        let start = out.len();
        format_box_line(b, &mut out);
        let line = out[start..].trim_end();
        if let Err(e) = parse_label_line(line, ParseMode::Strict) {
            return Err(Error::InvalidBox(format!(
                "box {i} does not survive 6-decimal rounding: {e}"
            )));
        }
    }
    Ok(out)
}

/// Reads and parses one label file from disk.
pub fn read_label_file(path: &Path, mode: ParseMode) -> Result<ParsedLabels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_file(&text, mode).map_err(|e| e.in_file(path))
}

/// Serializes boxes and writes them to `path`, creating parent directories.
pub fn write_label_file(path: &Path, boxes: &[NormalizedBox]) -> Result<()> {
    let text = serialize_label_file(boxes)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The label path belonging to an image path.
pub fn label_path_for(image_path: &Path) -> PathBuf {
    image_path.with_extension(LABEL_EXTENSION)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelState {
    Labeled,
    Negative,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    /// Path relative to the dataset root, `/`-separated, without extension.
    pub image_id: String,
    pub image_path: PathBuf,
    pub dims: ImageDims,
    pub boxes: Vec<NormalizedBox>,
    pub label_state: LabelState,
}

impl LabeledImage {
    pub fn label_path(&self) -> PathBuf {
        label_path_for(&self.image_path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampNote {
    pub image_id: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<LabeledImage>,
    /// Label files with no matching image, relative to the root.
    pub orphans: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamped: Vec<ClampNote>,
}

impl DatasetIndex {
    pub fn get(&self, image_id: &str) -> Option<&LabeledImage> {
        self.entries
            .binary_search_by(|e| e.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn count(&self, state: LabelState) -> usize {
        self.entries
            .iter()
            .filter(|e| e.label_state == state)
            .count()
    }

    pub fn dims(&self) -> BTreeMap<String, ImageDims> {
        self.entries
            .iter()
            .map(|e| (e.image_id.clone(), e.dims))
            .collect()
    }

    /// Ground truth of every reviewed entry (labeled or negative).
    pub fn ground_truth(&self) -> BTreeMap<String, Vec<NormalizedBox>> {
        self.entries
            .iter()
            .filter(|e| e.label_state != LabelState::Unlabeled)
            .map(|e| (e.image_id.clone(), e.boxes.clone()))
            .collect()
    }

    /// Builds an index from entries, sorting them and checking that image
    /// ids are unique and states agree with box lists.
    pub fn from_entries(
        root: impl Into<PathBuf>,
        mut entries: Vec<LabeledImage>,
        orphans: Vec<PathBuf>,
    ) -> Result<Self> {
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        for pair in entries.windows(2) {
            if pair[0].image_id == pair[1].image_id {
                return Err(Error::Index(format!(
                    "duplicate image id `{}`",
                    pair[0].image_id
                )));
            }
        }
        for e in &entries {
            let consistent = match e.label_state {
                LabelState::Labeled => !e.boxes.is_empty(),
                LabelState::Negative | LabelState::Unlabeled => e.boxes.is_empty(),
            };
            if !consistent {
                return Err(Error::Index(format!(
                    "entry `{}` is {:?} with {} boxes",
                    e.image_id,
                    e.label_state,
                    e.boxes.len()
                )));
            }
        }
        Ok(DatasetIndex {
            root: root.into(),
            entries,
            orphans,
            clamped: Vec::new(),
        })
    }

    /// Concatenates several indices, prefixing each image id with
    /// `<prefix>/` so ids from different roots cannot collide.
    pub fn merge_prefixed<'a, I>(parts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a DatasetIndex)>,
    {
        let mut entries = Vec::new();
        let mut orphans = Vec::new();
        let mut clamped = Vec::new();
        for (prefix, index) in parts {
            entries.extend(index.entries.iter().map(|e| LabeledImage {
                image_id: format!("{prefix}/{}", e.image_id),
                ..e.clone()
            }));
            orphans.extend(index.orphans.iter().map(|o| Path::new(prefix).join(o)));
            clamped.extend(index.clamped.iter().map(|c| ClampNote {
                image_id: format!("{prefix}/{}", c.image_id),
                line: c.line,
            }));
        }
        let mut merged = DatasetIndex::from_entries(PathBuf::new(), entries, orphans)?;
        merged.clamped = clamped;
        Ok(merged)
    }
}

#[derive(Debug, Clone)]
pub struct IndexOptions {
    /// Lower-case image extensions without the dot.
    pub extensions: BTreeSet<String>,
    pub parse_mode: ParseMode,
}

impl Default for IndexOptions {
    fn default() -> Self {
        IndexOptions {
            extensions: DEFAULT_IMAGE_EXTENSIONS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            parse_mode: ParseMode::Lenient,
        }
    }
}

fn rel_id(rel: &Path) -> String {
    rel.with_extension("")
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Scans `root` recursively and classifies every image by its label file.
///
/// Entries come back sorted by image id, so two scans of the same tree give
/// identical indices.
pub fn index_dataset(root: &Path, opts: &IndexOptions) -> Result<DatasetIndex> {
    let meta = fs::metadata(root).map_err(|e| Error::io(root, e))?;
    if !meta.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory"),
        ));
    }

    let mut images: Vec<PathBuf> = Vec::new();
    let mut labels: BTreeSet<PathBuf> = BTreeSet::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let Some(ext) = path.extension().map(|e| e.to_string_lossy().to_lowercase()) else {
            continue;
        };
        let rel = path.strip_prefix(root).unwrap_or(path).to_path_buf();
        if opts.extensions.contains(&ext) {
            images.push(rel);
        } else if path.extension().is_some_and(|e| e == LABEL_EXTENSION) {
            labels.insert(rel);
        }
    }

    let mut seen: BTreeMap<String, &Path> = BTreeMap::new();
    for rel in &images {
        let id = rel_id(rel);
        if let Some(prev) = seen.insert(id.clone(), rel) {
            return Err(Error::Index(format!(
                "duplicate image id `{id}` ({} and {})",
                prev.display(),
                rel.display()
            )));
        }
    }

    let scanned: Vec<(LabeledImage, Vec<usize>)> = images
        .par_iter()
        .map(|rel| classify_image(root, rel, &labels, opts.parse_mode))
        .collect::<Result<_>>()?;

    let claimed: BTreeSet<PathBuf> = images.iter().map(|rel| label_path_for(rel)).collect();
    let orphans = labels
        .into_iter()
        // LabelImg keeps its class list in `classes.txt` next to the labels.
        .filter(|l| !claimed.contains(l) && l.file_name().is_some_and(|n| n != "classes.txt"))
        .collect();

    let mut clamped = Vec::new();
    let mut entries = Vec::with_capacity(scanned.len());
    for (entry, lines) in scanned {
        clamped.extend(lines.into_iter().map(|line| ClampNote {
            image_id: entry.image_id.clone(),
            line,
        }));
        entries.push(entry);
    }
    let mut index = DatasetIndex::from_entries(root, entries, orphans)?;
    index.clamped = clamped;
    Ok(index)
}

fn classify_image(
    root: &Path,
    rel: &Path,
    labels: &BTreeSet<PathBuf>,
    mode: ParseMode,
) -> Result<(LabeledImage, Vec<usize>)> {
    let image_path = root.join(rel);
    let (w, h) = image::image_dimensions(&image_path).map_err(|e| Error::Decode {
        path: image_path.clone(),
        message: e.to_string(),
    })?;
    let dims = ImageDims::new(w, h).map_err(|e| e.in_file(&image_path))?;
    let label_rel = label_path_for(rel);
    let (boxes, label_state, clamped) = if labels.contains(&label_rel) {
        let parsed = read_label_file(&root.join(&label_rel), mode)?;
        let state = if parsed.boxes.is_empty() {
            LabelState::Negative
        } else {
            LabelState::Labeled
        };
        (parsed.boxes, state, parsed.clamped_lines)
    } else {
        (Vec::new(), LabelState::Unlabeled, Vec::new())
    };
    Ok((
        LabeledImage {
            image_id: rel_id(rel),
            image_path,
            dims,
            boxes,
            label_state,
        },
        clamped,
    ))
}
