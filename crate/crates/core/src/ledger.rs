//! Iteration ledger: one record per train/evaluate/grow loop.
//!
//! Each record keeps the training configuration (input side, batch size,
//! split, weight lineage), the datasets it drew from, the resulting split
//! sizes, the evaluation summary and any loss curves exported by the external
//! trainer. Records live in a versioned JSON manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::MetricsSummary;
use crate::labelio::{DatasetIndex, LabelState};

pub const MANIFEST_VERSION: u32 = 1;

/// Environment variable naming the default manifest path.
pub const MANIFEST_ENV: &str = "BOXFORGE_MANIFEST";

/// Weight file names that mean "the previous session's output".
const SESSION_WEIGHTS: [&str; 2] = ["last.pt", "best.pt"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Validation size for `n` reviewed entries: `round(n * ratio)`, halves up.
pub fn val_count(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + 0.5).floor() as usize
}

fn split_key(seed: u64, image_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image_id.as_bytes());
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "split ratio {ratio} outside (0, 1)"
        )))
    }
}

fn split_ids(ids: &[&str], ratio: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut keyed: Vec<(u64, &str)> = ids.iter().map(|id| (split_key(seed, id), *id)).collect();
    keyed.sort_unstable();
    let n_val = val_count(ids.len(), ratio);
    let mut val: Vec<String> = keyed[..n_val]
        .iter()
        .map(|(_, id)| id.to_string())
        .collect();
    let mut train: Vec<String> = keyed[n_val..]
        .iter()
        .map(|(_, id)| id.to_string())
        .collect();
    val.sort();
    train.sort();
    (train, val)
}

/// Train/validation partition of the reviewed (labeled or negative) entries.
///
/// Entries are ordered by a seeded SHA-256 of their image id and the first
/// `round(n * ratio)` go to validation, so the result does not depend on
/// index order and a grown dataset mostly keeps earlier assignments.
/// Unlabeled entries are left out of both sides.
pub fn split(index: &DatasetIndex, ratio: f64, seed: u64) -> Result<Split> {
    check_ratio(ratio)?;
    let ids: Vec<&str> = index
        .entries
        .iter()
        .filter(|e| e.label_state != LabelState::Unlabeled)
        .map(|e| e.image_id.as_str())
        .collect();
    let n = ids.len();
    let n_val = val_count(n, ratio);
    if n == 0 || n_val == 0 || n_val == n {
        return Err(Error::DegenerateSplit(format!(
            "{n} reviewed entries at ratio {ratio} give {n_val} validation images"
        )));
    }
    let (train, val) = split_ids(&ids, ratio, seed);
    Ok(Split { train, val })
}

/// Like [`split`], but splits each group (the first `/` component of the
/// image id, i.e. the dataset prefix of a merged index) on its own.
pub fn split_stratified(index: &DatasetIndex, ratio: f64, seed: u64) -> Result<Split> {
    check_ratio(ratio)?;
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in index
        .entries
        .iter()
        .filter(|e| e.label_state != LabelState::Unlabeled)
    {
        let group = e.image_id.split('/').next().unwrap_or("");
        groups.entry(group).or_default().push(e.image_id.as_str());
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for ids in groups.values() {
        let (t, v) = split_ids(ids, ratio, seed);
        train.extend(t);
        val.extend(v);
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::DegenerateSplit(format!(
            "stratified split at ratio {ratio} left one side empty"
        )));
    }
    train.sort();
    val.sort();
    Ok(Split { train, val })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub iteration_id: String,
    pub input_side: u32,
    pub batch_size: u32,
    pub split_ratio: f64,
    pub split_seed: u64,
    /// Checkpoint the run started from, e.g. `yolov5m.pt` or `last.pt`.
    pub parent_weights: String,
    /// Iteration whose weights were transferred, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_iteration: Option<String>,
    pub dataset_sources: Vec<String>,
    #[serde(default)]
    pub stratified: bool,
}

impl IterationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iteration_id.trim().is_empty() {
            return Err(Error::Ledger("iteration id is empty".into()));
        }
        check_ratio(self.split_ratio)?;
        if self.parent_weights.trim().is_empty() {
            return Err(Error::Ledger("parent weights tag is empty".into()));
        }
        if self.input_side == 0 || self.batch_size == 0 {
            return Err(Error::Ledger(
                "input side and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub config: IterationConfig,
    pub train_count: usize,
    pub val_count: usize,
    pub metrics: Option<MetricsSummary>,
    #[serde(default)]
    pub external_series: BTreeMap<String, Vec<SeriesPoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub id: String,
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub datasets: Vec<DatasetSource>,
    pub iterations: Vec<IterationRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            datasets: Vec::new(),
            iterations: Vec::new(),
        }
    }
}

/// Parses a loss curve exported as CSV with the header `step,value`.
pub fn parse_series_csv(text: &str) -> Result<Vec<SeriesPoint>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["step", "value"] {
        return Err(Error::parse(
            1,
            format!(
                "expected header `step,value`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut points = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        let step = row[0].parse::<u64>().map_err(|_| {
            Error::parse(
                line,
                format!("step `{}` is not a non-negative integer", &row[0]),
            )
        })?;
        let value = row[1]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| {
                Error::parse(line, format!("value `{}` is not a finite number", &row[1]))
            })?;
        points.push(SeriesPoint { step, value });
    }
    check_series("series", &points)?;
    Ok(points)
}

fn check_series(name: &str, points: &[SeriesPoint]) -> Result<()> {
    for pair in points.windows(2) {
        if pair[1].step <= pair[0].step {
            return Err(Error::Ledger(format!(
                "series `{name}` steps not strictly increasing at step {}",
                pair[1].step
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageStep {
    pub iteration_id: String,
    pub parent_weights: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub iteration_id: String,
    pub parent_weights: String,
    pub train_count: usize,
    pub val_count: usize,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
    pub best_f1: Option<f64>,
    /// Last value of each series; `None` when the run did not export it.
    pub series_final: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub series_names: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// CSV rendering; absent values are empty cells, never zero.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out =
            String::from("iteration,parent_weights,train_count,val_count,ap50,ap50_95,best_f1");
        for name in &self.series_names {
            let _ = write!(out, ",{name}_final");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration_id,
                r.parent_weights,
                r.train_count,
                r.val_count,
                opt(r.ap50),
                opt(r.ap50_95),
                opt(r.best_f1)
            );
            for name in &self.series_names {
                let _ = write!(out, ",{}", opt(r.series_final.get(name).copied().flatten()));
            }
            out.push('\n');
        }
        out
    }
}

/// A manifest bound to its file. Mutations go through `&mut self` and are
/// written back before they return.
#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    manifest: Manifest,
}

impl Ledger {
    /// Opens the manifest at `path`, or starts an empty one if the file does
    /// not exist yet.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let manifest = match fs::read_to_string(&path) {
            Ok(text) => {
                let m: Manifest =
                    serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(&path))?;
                if m.version != MANIFEST_VERSION {
                    return Err(Error::Ledger(format!(
                        "{}: unsupported manifest version {}",
                        path.display(),
                        m.version
                    )));
                }
                m
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest::default(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        Ok(Ledger { path, manifest })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn save(&self) -> Result<()> {
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        let tmp = self.path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &self.path).map_err(|e| Error::io(&self.path, e))
    }

    pub fn dataset(&self, id: &str) -> Option<&DatasetSource> {
        self.manifest.datasets.iter().find(|d| d.id == id)
    }

    /// Registers a dataset root under `id`. Re-registering the same root is
    /// a no-op; a different root under a known id is an error.
    pub fn register_dataset(&mut self, id: &str, root: impl Into<PathBuf>) -> Result<()> {
        let root = root.into();
        if id.is_empty() || id.contains('/') {
            return Err(Error::Ledger(format!(
                "dataset id `{id}` must be non-empty and contain no `/`"
            )));
        }
        match self.dataset(id) {
            Some(d) if d.root == root => return Ok(()),
            Some(d) => {
                return Err(Error::Ledger(format!(
                    "dataset `{id}` already registered at {}",
                    d.root.display()
                )))
            }
            None => {}
        }
        self.manifest.datasets.push(DatasetSource {
            id: id.to_string(),
            root,
        });
        self.save()
    }

    pub fn get(&self, iteration_id: &str) -> Option<&IterationRecord> {
        self.manifest
            .iterations
            .iter()
            .find(|r| r.config.iteration_id == iteration_id)
    }

    /// Records one iteration and persists the manifest.
    ///
    /// `index` is the data the run trained on; its reviewed entries are split
    /// with the config's ratio and seed. A `last.pt`/`best.pt` parent with no
    /// explicit parent iteration links to the most recent recorded iteration.
    pub fn record_iteration(
        &mut self,
        mut config: IterationConfig,
        index: &DatasetIndex,
        metrics: Option<MetricsSummary>,
        series: BTreeMap<String, Vec<SeriesPoint>>,
    ) -> Result<&IterationRecord> {
        config.validate()?;
        if self.get(&config.iteration_id).is_some() {
            return Err(Error::Ledger(format!(
                "iteration `{}` already recorded",
                config.iteration_id
            )));
        }
        for ds in &config.dataset_sources {
            if self.dataset(ds).is_none() {
                return Err(Error::Ledger(format!("unknown dataset `{ds}`")));
            }
        }
        match &config.parent_iteration {
            Some(p) if self.get(p).is_none() => {
                return Err(Error::Ledger(format!("unknown parent iteration `{p}`")));
            }
            Some(_) => {}
            None => {
                let file = Path::new(&config.parent_weights)
                    .file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_default();
                if SESSION_WEIGHTS.contains(&file.as_str()) {
                    let prev = self.manifest.iterations.last().ok_or_else(|| {
                        Error::Ledger(format!(
                            "`{}` refers to a previous session but the ledger is empty",
                            config.parent_weights
                        ))
                    })?;
                    config.parent_iteration = Some(prev.config.iteration_id.clone());
                }
            }
        }
        for (name, points) in &series {
            check_series(name, points)?;
        }
        let s = if config.stratified {
            split_stratified(index, config.split_ratio, config.split_seed)?
        } else {
            split(index, config.split_ratio, config.split_seed)?
        };
        self.manifest.iterations.push(IterationRecord {
            config,
            train_count: s.train.len(),
            val_count: s.val.len(),
            metrics,
            external_series: series,
        });
        self.save()?;
        Ok(self.manifest.iterations.last().expect("just pushed"))
    }

    /// Weight lineage from `iteration_id` back to its root checkpoint.
    pub fn lineage(&self, iteration_id: &str) -> Result<Vec<LineageStep>> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        let mut current = Some(iteration_id.to_string());
        while let Some(id) = current {
            if !seen.insert(id.clone()) {
                return Err(Error::Ledger(format!("lineage cycle through `{id}`")));
            }
            let rec = self
                .get(&id)
                .ok_or_else(|| Error::Ledger(format!("unknown iteration `{id}`")))?;
            out.push(LineageStep {
                iteration_id: id,
                parent_weights: rec.config.parent_weights.clone(),
            });
            current = rec.config.parent_iteration.clone();
        }
        Ok(out)
    }

    /// Side-by-side metrics and final loss values for the given iterations.
    pub fn compare(&self, ids: &[&str]) -> Result<ComparisonTable> {
        let records: Vec<&IterationRecord> = ids
            .iter()
            .map(|id| {
                self.get(id)
                    .ok_or_else(|| Error::Ledger(format!("unknown iteration `{id}`")))
            })
            .collect::<Result<_>>()?;
        let series_names: Vec<String> = records
            .iter()
            .flat_map(|r| r.external_series.keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let rows = records
            .iter()
            .map(|r| ComparisonRow {
                iteration_id: r.config.iteration_id.clone(),
                parent_weights: r.config.parent_weights.clone(),
                train_count: r.train_count,
                val_count: r.val_count,
                ap50: r.metrics.as_ref().map(|m| m.ap50),
                ap50_95: r.metrics.as_ref().map(|m| m.ap50_95),
                best_f1: r.metrics.as_ref().map(|m| m.best_f1),
                series_final: series_names
                    .iter()
                    .map(|n| {
                        let last = r
                            .external_series
                            .get(n)
                            .and_then(|s| s.last())
                            .map(|p| p.value);
                        (n.clone(), last)
                    })
                    .collect(),
            })
            .collect();
        Ok(ComparisonTable { series_names, rows })
    }
}
