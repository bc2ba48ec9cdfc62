//! Human review of machine pre-labels.
//!
//! Detections above a confidence threshold become pending review items. A
//! reviewer accepts, rejects or edits each one; decisions stay revisable
//! until export and are appended to a JSON-lines journal, so the queue state
//! is always the imported queue plus a replay of the journal (last write
//! wins per item). Export writes the surviving boxes as YOLO label files; an
//! image whose proposals were all rejected becomes a reviewed negative.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Component, Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::detections::{parse_detections, Detection};
use crate::error::{Error, Result};
use crate::geometry::iou_normalized;
use crate::labelio::{
    index_dataset, serialize_label_file, write_label_file, DatasetIndex, IndexOptions,
    NormalizedBox, DEFAULT_IMAGE_EXTENSIONS,
};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewState {
    Pending,
    Accepted,
    Edited,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub image_id: String,
    pub proposed: NormalizedBox,
    pub confidence: f64,
    pub state: ReviewState,
    pub final_box: Option<NormalizedBox>,
}

impl ReviewItem {
    fn check(&self) -> Result<()> {
        let ok = match self.state {
            ReviewState::Pending | ReviewState::Rejected => self.final_box.is_none(),
            ReviewState::Accepted => self.final_box == Some(self.proposed),
            ReviewState::Edited => self.final_box.is_some_and(|b| b != self.proposed),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "item `{}` is {:?} with final box {:?}",
                self.item_id, self.state, self.final_box
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueue {
    pub queue_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_iteration: Option<String>,
    /// Where the reviewed images live.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    pub items: Vec<ReviewItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Accept,
    Reject,
    Edit,
    /// Puts an item back to pending.
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Accept,
    Reject,
    Edit(NormalizedBox),
    Reset,
}

impl Decision {
    pub fn action(&self) -> Action {
        match self {
            Decision::Accept => Action::Accept,
            Decision::Reject => Action::Reject,
            Decision::Edit(_) => Action::Edit,
            Decision::Reset => Action::Reset,
        }
    }

    fn edited_box(&self) -> Option<NormalizedBox> {
        match self {
            Decision::Edit(b) => Some(*b),
            _ => None,
        }
    }
}

/// Box of an edit request. The class defaults to the proposal's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditBox {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<NormalizedBox> for EditBox {
    fn from(b: NormalizedBox) -> Self {
        EditBox {
            class_id: Some(b.class_id),
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

/// Wire form of a decision: `{"action": "accept" | "reject" | "edit" | "reset", "box"?: {...}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub action: Action,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<EditBox>,
}

impl DecisionRequest {
    pub fn new(decision: Decision) -> Self {
        DecisionRequest {
            action: decision.action(),
            bbox: decision.edited_box().map(EditBox::from),
        }
    }

    /// Resolves the request against the proposal it applies to.
    pub fn to_decision(&self, proposed: &NormalizedBox) -> Result<Decision> {
        match (self.action, self.bbox) {
            (Action::Edit, Some(b)) => Ok(Decision::Edit(NormalizedBox {
                class_id: b.class_id.unwrap_or(proposed.class_id),
                cx: b.cx,
                cy: b.cy,
                w: b.w,
                h: b.h,
            })),
            (Action::Edit, None) => Err(Error::InvalidArgument("edit needs a box".into())),
            (_, Some(_)) => Err(Error::InvalidArgument(format!(
                "{:?} does not take a box",
                self.action
            ))),
            (Action::Accept, None) => Ok(Decision::Accept),
            (Action::Reject, None) => Ok(Decision::Reject),
            (Action::Reset, None) => Ok(Decision::Reset),
        }
    }
}

/// One journal line: `{"item_id", "action", "box"?, "at"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEvent {
    pub item_id: String,
    pub action: Action,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<NormalizedBox>,
    pub at: DateTime<Utc>,
}

impl JournalEvent {
    fn decision(&self) -> Result<Decision> {
        match (self.action, self.bbox) {
            (Action::Accept, _) => Ok(Decision::Accept),
            (Action::Reject, _) => Ok(Decision::Reject),
            (Action::Reset, _) => Ok(Decision::Reset),
            (Action::Edit, Some(b)) => Ok(Decision::Edit(b)),
            (Action::Edit, None) => Err(Error::InvalidArgument("edit event without a box".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportOutcome {
    pub queue: ReviewQueue,
    pub dropped: usize,
}

/// Builds a queue of pending items from detections at or above
/// `conf_threshold`, ordered by image id and then descending confidence.
pub fn import_detections(
    dets: &[Detection],
    conf_threshold: f64,
    queue_id: &str,
    source_iteration: Option<&str>,
) -> Result<ImportOutcome> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::InvalidArgument(format!(
            "confidence threshold {conf_threshold} outside [0, 1]"
        )));
    }
    let mut kept: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.confidence >= conf_threshold)
        .collect();
    let dropped = dets.len() - kept.len();
    kept.sort_by(|(ia, a), (ib, b)| {
        a.image_id
            .cmp(&b.image_id)
            .then(b.confidence.total_cmp(&a.confidence))
            .then(ia.cmp(ib))
    });
    let items = kept
        .into_iter()
        .enumerate()
        .map(|(k, (_, d))| ReviewItem {
            item_id: format!("it{:05}", k + 1),
            image_id: d.image_id.clone(),
            proposed: d.bbox,
            confidence: d.confidence,
            state: ReviewState::Pending,
            final_box: None,
        })
        .collect();
    Ok(ImportOutcome {
        queue: ReviewQueue {
            queue_id: queue_id.to_string(),
            source_iteration: source_iteration.map(str::to_string),
            image_root: None,
            items,
        },
        dropped,
    })
}

/// [`import_detections`] over the text of a detections file.
pub fn import_detections_text(
    text: &str,
    conf_threshold: f64,
    queue_id: &str,
    source_iteration: Option<&str>,
) -> Result<ImportOutcome> {
    import_detections(
        &parse_detections(text)?,
        conf_threshold,
        queue_id,
        source_iteration,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueueSummary {
    pub total: usize,
    pub pending: usize,
    pub accepted: usize,
    pub edited: usize,
    pub rejected: usize,
    pub images: usize,
}

impl ReviewQueue {
    pub fn item(&self, item_id: &str) -> Option<&ReviewItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn summary(&self) -> QueueSummary {
        let mut s = QueueSummary {
            total: self.items.len(),
            ..QueueSummary::default()
        };
        let mut last_image: Option<&str> = None;
        for item in &self.items {
            match item.state {
                ReviewState::Pending => s.pending += 1,
                ReviewState::Accepted => s.accepted += 1,
                ReviewState::Edited => s.edited += 1,
                ReviewState::Rejected => s.rejected += 1,
            }
            if last_image != Some(item.image_id.as_str()) {
                s.images += 1;
                last_image = Some(&item.image_id);
            }
        }
        s
    }

    /// Applies one decision and returns the updated item. Decisions can be
    /// revised freely; an edit that reproduces the proposal at label-file
    /// precision counts as an accept.
    pub fn decide(&mut self, item_id: &str, decision: Decision) -> Result<&ReviewItem> {
        let item = self
            .items
            .iter_mut()
            .find(|i| i.item_id == item_id)
            .ok_or_else(|| Error::UnknownItem(item_id.to_string()))?;
        let (state, final_box) = match decision {
            Decision::Accept => (ReviewState::Accepted, Some(item.proposed)),
            Decision::Reject => (ReviewState::Rejected, None),
            Decision::Reset => (ReviewState::Pending, None),
            Decision::Edit(b) => {
                b.validate()?;
                let edited = serialize_label_file(&[b])?;
                if serialize_label_file(&[item.proposed]).ok().as_ref() == Some(&edited) {
                    (ReviewState::Accepted, Some(item.proposed))
                } else {
                    (ReviewState::Edited, Some(b))
                }
            }
        };
        item.state = state;
        item.final_box = final_box;
        Ok(item)
    }

    /// Replays journal events on top of this queue.
    pub fn replay<'a, I>(&mut self, events: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a JournalEvent>,
    {
        for ev in events {
            self.decide(&ev.item_id, ev.decision()?)?;
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for item in &self.items {
            if !ids.insert(item.item_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate item id `{}`",
                    item.item_id
                )));
            }
            item.proposed.validate()?;
            item.check()?;
        }
        Ok(())
    }
}

/// Locates `<root>/<image_id>.<ext>` for the usual image extensions.
/// Ids that try to climb out of the root never resolve.
pub fn resolve_image(root: &Path, image_id: &str) -> Option<PathBuf> {
    let rel = Path::new(image_id);
    if image_id.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    DEFAULT_IMAGE_EXTENSIONS
        .iter()
        .flat_map(|e| [e.to_string(), e.to_uppercase()])
        .map(|ext| root.join(format!("{image_id}.{ext}")))
        .find(|p| p.is_file())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDrift {
    pub item_id: String,
    pub image_id: String,
    /// IoU between the machine proposal and the reviewer's box.
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub out_root: PathBuf,
    pub labeled_images: usize,
    pub negative_images: usize,
    pub boxes_written: usize,
    pub pending_items: usize,
    /// Images left out because some of their items were still pending.
    pub skipped_images: Vec<String>,
    /// Exported images whose raster could not be found under the image root.
    pub missing_images: Vec<String>,
    pub edits: Vec<EditDrift>,
    pub index: DatasetIndex,
}

/// Writes reviewed labels under `out_root`, copying each image next to its
/// label when the queue knows its image root.
///
/// Without `force`, any pending item is an error. With `force`, images that
/// still have pending items are skipped entirely so a partial review never
/// produces a label file that looks complete.
pub fn export_accepted(queue: &ReviewQueue, out_root: &Path, force: bool) -> Result<ExportReport> {
    queue.validate()?;
    let pending_items = queue.summary().pending;
    if pending_items > 0 && !force {
        return Err(Error::IncompleteReview {
            pending: pending_items,
        });
    }
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;

    let mut by_image: BTreeMap<&str, Vec<&ReviewItem>> = BTreeMap::new();
    for item in &queue.items {
        by_image.entry(&item.image_id).or_default().push(item);
    }

    let mut report = ExportReport {
        out_root: out_root.to_path_buf(),
        labeled_images: 0,
        negative_images: 0,
        boxes_written: 0,
        pending_items,
        skipped_images: Vec::new(),
        missing_images: Vec::new(),
        edits: Vec::new(),
        index: DatasetIndex::from_entries(out_root, Vec::new(), Vec::new())?,
    };
    let mut exported: Vec<&str> = Vec::new();
    for (image_id, items) in by_image {
        if items.iter().any(|i| i.state == ReviewState::Pending) {
            report.skipped_images.push(image_id.to_string());
            continue;
        }
        let boxes: Vec<NormalizedBox> = items.iter().filter_map(|i| i.final_box).collect();
        for i in items.iter().filter(|i| i.state == ReviewState::Edited) {
            report.edits.push(EditDrift {
                item_id: i.item_id.clone(),
                image_id: i.image_id.clone(),
                iou: iou_normalized(&i.proposed, &i.final_box.expect("edited item has a box")),
            });
        }
        let label_path = out_root.join(format!("{image_id}.txt"));
        write_label_file(&label_path, &boxes)?;
        if boxes.is_empty() {
            report.negative_images += 1;
        } else {
            report.labeled_images += 1;
        }
        report.boxes_written += boxes.len();

        let source = queue
            .image_root
            .as_deref()
            .and_then(|r| resolve_image(r, image_id));
        match source {
            Some(src) => {
                let name = src.file_name().expect("resolved image has a file name");
                let dest = label_path.with_file_name(name);
                let same = fs::canonicalize(&src).ok() == fs::canonicalize(&dest).ok();
                if !same {
                    fs::copy(&src, &dest).map_err(|e| Error::io(&dest, e))?;
                }
                exported.push(image_id);
            }
            None => report.missing_images.push(image_id.to_string()),
        }
    }

    if !exported.is_empty() {
        let full = index_dataset(out_root, &IndexOptions::default())?;
        let entries = full
            .entries
            .into_iter()
            .filter(|e| exported.binary_search(&e.image_id.as_str()).is_ok())
            .collect();
        report.index = DatasetIndex::from_entries(out_root, entries, Vec::new())?;
    }
    Ok(report)
}

/// The journal path that belongs to a queue file.
pub fn journal_path_for(queue_path: &Path) -> PathBuf {
    queue_path.with_extension("journal.jsonl")
}

pub fn read_journal(path: &Path) -> Result<Vec<JournalEvent>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::parse(i + 1, e.to_string()).in_file(path))
        })
        .collect()
}

/// A queue file plus its decision journal.
///
/// The queue file holds the queue as imported; the live state is that queue
/// with the journal replayed on top. All mutations take `&mut self`, so a
/// caller that shares a session must serialize writers.
#[derive(Debug)]
pub struct ReviewSession {
    queue_path: PathBuf,
    journal_path: PathBuf,
    queue: ReviewQueue,
    events: usize,
}

impl ReviewSession {
    /// Writes a freshly imported queue and starts an empty journal.
    pub fn create(queue_path: &Path, queue: ReviewQueue) -> Result<Self> {
        queue.validate()?;
        if let Some(parent) = queue_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut text = serde_json::to_string_pretty(&queue)?;
        text.push('\n');
        fs::write(queue_path, text).map_err(|e| Error::io(queue_path, e))?;
        let journal_path = journal_path_for(queue_path);
        fs::write(&journal_path, "").map_err(|e| Error::io(&journal_path, e))?;
        Ok(ReviewSession {
            queue_path: queue_path.to_path_buf(),
            journal_path,
            queue,
            events: 0,
        })
    }

    /// Loads a queue file and replays its journal.
    pub fn open(queue_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(queue_path).map_err(|e| Error::io(queue_path, e))?;
        let mut queue: ReviewQueue =
            serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(queue_path))?;
        queue.validate().map_err(|e| e.in_file(queue_path))?;
        let journal_path = journal_path_for(queue_path);
        let events = read_journal(&journal_path)?;
        queue
            .replay(&events)
            .map_err(|e| e.in_file(&journal_path))?;
        Ok(ReviewSession {
            queue_path: queue_path.to_path_buf(),
            journal_path,
            queue,
            events: events.len(),
        })
    }

    pub fn queue(&self) -> &ReviewQueue {
        &self.queue
    }

    pub fn queue_path(&self) -> &Path {
        &self.queue_path
    }

    pub fn journal_path(&self) -> &Path {
        &self.journal_path
    }

    /// Number of journal events applied so far.
    pub fn journal_len(&self) -> usize {
        self.events
    }

    pub fn decide(&mut self, item_id: &str, decision: Decision) -> Result<ReviewItem> {
        self.decide_at(item_id, decision, Utc::now())
    }

    /// Applies a decision and journals it with the given timestamp. Nothing
    /// is journaled when the decision is invalid.
    pub fn decide_at(
        &mut self,
        item_id: &str,
        decision: Decision,
        at: DateTime<Utc>,
    ) -> Result<ReviewItem> {
        let mut next = self.queue.clone();
        let item = next.decide(item_id, decision)?.clone();
        let ev = JournalEvent {
            item_id: item_id.to_string(),
            action: decision.action(),
            bbox: decision.edited_box(),
            at,
        };
        let mut line = serde_json::to_string(&ev)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.journal_path)
            .map_err(|e| Error::io(&self.journal_path, e))?;
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(&self.journal_path, e))?;
        self.queue = next;
        self.events += 1;
        Ok(item)
    }

    pub fn export(&self, out_root: &Path, force: bool) -> Result<ExportReport> {
        export_accepted(&self.queue, out_root, force)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb(cx: f64, cy: f64, w: f64, h: f64) -> NormalizedBox {
        NormalizedBox::new(0, cx, cy, w, h).unwrap()
    }

    fn det(image: &str, b: NormalizedBox, conf: f64) -> Detection {
        Detection::new(image, b, conf).unwrap()
    }

    fn sample_queue() -> ReviewQueue {
        let dets = [
            det("b", nb(0.5, 0.5, 0.2, 0.2), 0.6),
            det("a", nb(0.2, 0.2, 0.1, 0.1), 0.4),
            det("a", nb(0.7, 0.7, 0.1, 0.1), 0.9),
        ];
        import_detections(&dets, 0.0, "q", Some("initial"))
            .unwrap()
            .queue
    }

    #[test]
    fn import_orders_and_filters() {
        let q = sample_queue();
        assert_eq!(q.items.len(), 3);
        let order: Vec<_> = q
            .items
            .iter()
            .map(|i| (i.image_id.as_str(), i.confidence))
            .collect();
        assert_eq!(order, [("a", 0.9), ("a", 0.4), ("b", 0.6)]);
        assert!(q.items.iter().all(|i| i.state == ReviewState::Pending));

        let dets = [
            det("a", nb(0.5, 0.5, 0.2, 0.2), 0.9),
            det("a", nb(0.2, 0.2, 0.1, 0.1), 0.4),
        ];
        let out = import_detections(&dets, 0.5, "q", None).unwrap();
        assert_eq!((out.queue.items.len(), out.dropped), (1, 1));

        let out = import_detections_text("", DEFAULT_CONF_THRESHOLD, "q", None).unwrap();
        assert!(out.queue.items.is_empty());
        assert_eq!(
            import_detections_text("{oops}\n", 0.0, "q", None)
                .unwrap_err()
                .line(),
            Some(1)
        );
    }

    #[test]
    fn decisions_follow_invariants() {
        let mut q = sample_queue();
        let it = q.decide("it00001", Decision::Accept).unwrap().clone();
        assert_eq!(
            (it.state, it.final_box),
            (ReviewState::Accepted, Some(it.proposed))
        );
        let it = q.decide("it00001", Decision::Reject).unwrap().clone();
        assert_eq!((it.state, it.final_box), (ReviewState::Rejected, None));
        let edited = nb(0.5, 0.5, 0.3, 0.3);
        let it = q.decide("it00001", Decision::Edit(edited)).unwrap().clone();
        assert_eq!(
            (it.state, it.final_box),
            (ReviewState::Edited, Some(edited))
        );
        let it = q.decide("it00001", Decision::Reset).unwrap().clone();
        assert_eq!(it.state, ReviewState::Pending);

        let proposed = q.items[0].proposed;
        let it = q.decide("it00001", Decision::Edit(proposed)).unwrap();
        assert_eq!(it.state, ReviewState::Accepted);

        assert!(matches!(
            q.decide("nope", Decision::Accept),
            Err(Error::UnknownItem(_))
        ));
        let bad = NormalizedBox { w: 1.5, ..edited };
        assert!(q.decide("it00001", Decision::Edit(bad)).is_err());
    }

    #[test]
    fn decision_request_wire_form() {
        let r: DecisionRequest =
            serde_json::from_str(r#"{"action":"edit","box":{"cx":0.5,"cy":0.5,"w":0.3,"h":0.3}}"#)
                .unwrap();
        let proposed = NormalizedBox {
            class_id: 4,
            ..nb(0.5, 0.5, 0.2, 0.2)
        };
        assert_eq!(
            r.to_decision(&proposed).unwrap(),
            Decision::Edit(NormalizedBox {
                class_id: 4,
                ..nb(0.5, 0.5, 0.3, 0.3)
            })
        );
        let r: DecisionRequest = serde_json::from_str(r#"{"action":"accept"}"#).unwrap();
        assert_eq!(r.to_decision(&proposed).unwrap(), Decision::Accept);
        let r: DecisionRequest = serde_json::from_str(r#"{"action":"edit"}"#).unwrap();
        assert!(r.to_decision(&proposed).is_err());
        assert!(serde_json::from_str::<DecisionRequest>(r#"{"action":"maybe"}"#).is_err());
    }

    #[test]
    fn export_requires_complete_review() {
        let q = sample_queue();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_accepted(&q, dir.path(), false),
            Err(Error::IncompleteReview { pending: 3 })
        ));
        let r = export_accepted(&q, dir.path(), true).unwrap();
        assert_eq!(r.skipped_images, ["a", "b"]);
        assert_eq!(r.labeled_images + r.negative_images, 0);
    }

    #[test]
    fn export_writes_labels_and_negatives() {
        let mut q = sample_queue();
        q.decide("it00001", Decision::Accept).unwrap();
        q.decide("it00002", Decision::Edit(nb(0.25, 0.25, 0.1, 0.1)))
            .unwrap();
        q.decide("it00003", Decision::Reject).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = export_accepted(&q, dir.path(), false).unwrap();
        assert_eq!(
            (r.labeled_images, r.negative_images, r.boxes_written),
            (1, 1, 2)
        );
        assert_eq!(
            fs::read_to_string(dir.path().join("a.txt")).unwrap(),
            "0 0.700000 0.700000 0.100000 0.100000\n0 0.250000 0.250000 0.100000 0.100000\n"
        );
        assert_eq!(fs::read_to_string(dir.path().join("b.txt")).unwrap(), "");
        assert_eq!(r.edits.len(), 1);
        let expected = iou_normalized(&nb(0.2, 0.2, 0.1, 0.1), &nb(0.25, 0.25, 0.1, 0.1));
        assert!((r.edits[0].iou - expected).abs() < 1e-12);
        assert_eq!(r.missing_images, ["a", "b"]);
    }

    #[test]
    fn session_journal_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queue.json");
        let mut s = ReviewSession::create(&path, sample_queue()).unwrap();
        s.decide("it00001", Decision::Reject).unwrap();
        s.decide("it00002", Decision::Edit(nb(0.3, 0.3, 0.1, 0.1)))
            .unwrap();
        s.decide("it00001", Decision::Accept).unwrap();
        assert!(s.decide("it99999", Decision::Accept).is_err());
        assert_eq!(s.journal_len(), 3);

        let reopened = ReviewSession::open(&path).unwrap();
        assert_eq!(reopened.queue(), s.queue());
        assert_eq!(reopened.journal_len(), 3);
        let events = read_journal(s.journal_path()).unwrap();
        assert_eq!(events[1].action, Action::Edit);
        assert!(events[1].bbox.is_some());
        assert!(events[0].bbox.is_none());
    }

    #[test]
    fn resolve_image_refuses_escapes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x.png"), b"not really").unwrap();
        assert_eq!(
            resolve_image(dir.path(), "x"),
            Some(dir.path().join("x.png"))
        );
        assert_eq!(resolve_image(dir.path(), "../x"), None);
        assert_eq!(resolve_image(dir.path(), "/etc/passwd"), None);
        assert_eq!(resolve_image(dir.path(), "y"), None);
    }
}
