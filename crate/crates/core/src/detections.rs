//! Machine-proposed boxes and the JSON-lines file that carries them.
//!
//! One object per line:
//! `{"image_id": "...", "class_id": 0, "cx": .., "cy": .., "w": .., "h": .., "confidence": ..}`
//! with relative coordinates. Detector outputs often poke slightly past the
//! image border, so coordinates are clamped into the image on read.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelio::NormalizedBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: NormalizedBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(image_id: impl Into<String>, bbox: NormalizedBox, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidArgument(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        bbox.validate()?;
        Ok(Detection {
            image_id: image_id.into(),
            bbox,
            confidence,
        })
    }

    pub fn class_id(&self) -> u32 {
        self.bbox.class_id
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    image_id: String,
    class_id: u32,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    confidence: f64,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        DetectionRecord {
            image_id: d.image_id.clone(),
            class_id: d.bbox.class_id,
            cx: d.bbox.cx,
            cy: d.bbox.cy,
            w: d.bbox.w,
            h: d.bbox.h,
            confidence: d.confidence,
        }
    }
}

/// Parses a detections file. Blank lines are ignored; every failure names
/// its 1-based line.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(line_no, e.to_string()))?;
        let (bbox, _) = NormalizedBox::clamped(rec.class_id, rec.cx, rec.cy, rec.w, rec.h)
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        let det = Detection::new(rec.image_id, bbox, rec.confidence)
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        out.push(det);
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text).map_err(|e| e.in_file(path))
}

/// Renders detections as JSON lines, one per detection, trailing LF.
pub fn serialize_detections(dets: &[Detection]) -> Result<String> {
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(&DetectionRecord::from(d))?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = r#"{"image_id":"a","class_id":0,"cx":0.5,"cy":0.5,"w":0.2,"h":0.2,"confidence":0.9}

{"image_id":"b/c","class_id":2,"cx":0.25,"cy":0.75,"w":0.1,"h":0.3,"confidence":0.4}
"#;
        let dets = parse_detections(text).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[1].image_id, "b/c");
        assert_eq!(dets[1].class_id(), 2);
        let again = parse_detections(&serialize_detections(&dets).unwrap()).unwrap();
        assert_eq!(again, dets);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "{\"image_id\":\"a\",\"class_id\":0,\"cx\":0.5,\"cy\":0.5,\"w\":0.2,\"h\":0.2,\"confidence\":0.9}\n{\"image_id\":\"a\"}\n";
        assert_eq!(parse_detections(text).unwrap_err().line(), Some(2));

        let text = "{\"image_id\":\"a\",\"class_id\":0,\"cx\":0.5,\"cy\":0.5,\"w\":0.2,\"h\":0.2,\"confidence\":1.5}\n";
        assert_eq!(parse_detections(text).unwrap_err().line(), Some(1));
    }

    #[test]
    fn overshooting_boxes_are_clamped() {
        let text =
            r#"{"image_id":"a","class_id":0,"cx":0.99,"cy":0.5,"w":0.04,"h":0.2,"confidence":0.9}"#;
        let d = &parse_detections(text).unwrap()[0];
        let (_, _, x1, _) = d.bbox.corners();
        assert!((x1 - 1.0).abs() < 1e-12);
    }
}
