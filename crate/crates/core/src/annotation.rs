//! Line-delimited JSON records: pair annotations, predictions and PCK
//! reports.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kbc::{BoundingBox, KbcTransform, KeypointSet};
use crate::metrics::pck;
use crate::pipeline::KbcMode;

/// Reads one record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, records: &[T]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()?;
    Ok(())
}

fn all_valid(n: usize) -> Vec<bool> {
    vec![true; n]
}

/// Ground truth for one image pair. Extents are `[width, height]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAnnotation {
    pub pair_id: String,
    pub src_id: String,
    pub trg_id: String,
    pub src_size: [usize; 2],
    pub trg_size: [usize; 2],
    #[serde(default)]
    pub category: String,
    pub src_keypoints: Vec<[f64; 2]>,
    pub trg_keypoints: Vec<[f64; 2]>,
    /// Per-keypoint validity; all valid when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_valid: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trg_valid: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trg_bbox: Option<BoundingBox>,
}

impl PairAnnotation {
    pub fn len(&self) -> usize {
        self.src_keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_keypoints.is_empty()
    }

    pub fn src_set(&self) -> KeypointSet {
        KeypointSet {
            points: self.src_keypoints.clone(),
            valid: self
                .src_valid
                .clone()
                .unwrap_or_else(|| all_valid(self.len())),
        }
    }

    pub fn trg_set(&self) -> KeypointSet {
        KeypointSet {
            points: self.trg_keypoints.clone(),
            valid: self
                .trg_valid
                .clone()
                .unwrap_or_else(|| all_valid(self.len())),
        }
    }

    /// `(height, width)` that PCK thresholds scale with: the target object
    /// box when annotated, otherwise the target image.
    pub fn reference_extent(&self) -> (f64, f64) {
        match &self.trg_bbox {
            Some(b) => (b.height(), b.width()),
            None => (self.trg_size[1] as f64, self.trg_size[0] as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let counts = [
            self.trg_keypoints.len(),
            self.src_valid.as_ref().map_or(n, Vec::len),
            self.trg_valid.as_ref().map_or(n, Vec::len),
        ];
        if let Some(&bad) = counts.iter().find(|&&c| c != n) {
            return Err(Error::KeypointCount {
                left: n,
                right: bad,
            });
        }
        if self.src_size.contains(&0) || self.trg_size.contains(&0) {
            return Err(Error::Config(format!(
                "pair {}: zero image extent",
                self.pair_id
            )));
        }
        for (side, set, size) in [
            ("source", self.src_set(), self.src_size),
            ("target", self.trg_set(), self.trg_size),
        ] {
            let (w, h) = (size[0] as f64, size[1] as f64);
            for (p, _) in set.points.iter().zip(&set.valid).filter(|(_, &v)| v) {
                let inside = (-0.5..=w - 0.5).contains(&p[0]) && (-0.5..=h - 0.5).contains(&p[1]);
                if !inside {
                    return Err(Error::Config(format!(
                        "pair {}: valid {side} keypoint ({}, {}) outside {}x{}",
                        self.pair_id, p[0], p[1], size[0], size[1]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates annotations, rejecting duplicate pair ids.
pub fn read_annotations(reader: impl BufRead) -> Result<Vec<PairAnnotation>> {
    let recs: Vec<PairAnnotation> = read_jsonl(reader)?;
    let mut seen = std::collections::HashSet::new();
    for (i, r) in recs.iter().enumerate() {
        r.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(r.pair_id.as_str()) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate pair id {}", r.pair_id),
            });
        }
    }
    Ok(recs)
}

/// Network output for one pair, in the frame of the (possibly cropped)
/// target the network saw, with the transforms needed to map it back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub pair_id: String,
    pub mode: KbcMode,
    pub keypoints: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    pub src_transform: KbcTransform,
    pub trg_transform: KbcTransform,
}

impl PredictionRecord {
    /// Predictions in original target image coordinates.
    pub fn back_projected(&self) -> Result<KeypointSet> {
        let crop = KeypointSet::new(self.keypoints.clone(), self.valid.clone())?;
        Ok(self.trg_transform.inverse_set(&crop))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaScore {
    pub alpha: f64,
    pub pck: f64,
}

/// One report line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pair_id: String,
    pub category: String,
    pub mode: KbcMode,
    /// `max(h, w)` of the reference extent.
    pub reference: f64,
    pub scored: usize,
    pub scores: Vec<AlphaScore>,
}

/// Aggregate line closing a report; means are over pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFooter {
    pub summary: bool,
    pub pairs: usize,
    pub modes: Vec<KbcMode>,
    pub mean: Vec<AlphaScore>,
}

/// Scores predictions against annotations at each alpha. Lines are ordered
/// by pair id; every prediction needs a matching annotation.
pub fn evaluate_predictions(
    annotations: &[PairAnnotation],
    predictions: &[PredictionRecord],
    alphas: &[f64],
) -> Result<(Vec<PairReport>, ReportFooter)> {
    if alphas.is_empty() {
        return Err(Error::Config("no alphas to evaluate".into()));
    }
    let by_id: BTreeMap<&str, &PairAnnotation> = annotations
        .iter()
        .map(|a| (a.pair_id.as_str(), a))
        .collect();
    let mut sorted: Vec<&PredictionRecord> = predictions.iter().collect();
    sorted.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let mut lines = Vec::with_capacity(sorted.len());
    for p in sorted {
        let ann = by_id
            .get(p.pair_id.as_str())
            .ok_or_else(|| Error::Config(format!("prediction for unknown pair {}", p.pair_id)))?;
        let pred = p.back_projected()?;
        let gt = ann.trg_set();
        let (rh, rw) = ann.reference_extent();
        let mut scores = Vec::with_capacity(alphas.len());
        let mut reference = 0.0;
        let mut scored = 0;
        for &alpha in alphas {
            let r = pck(&pred, &gt, alpha, rh, rw)?;
            reference = r.reference;
            scored = r.points.len();
            scores.push(AlphaScore { alpha, pck: r.pck });
        }
        lines.push(PairReport {
            pair_id: p.pair_id.clone(),
            category: ann.category.clone(),
            mode: p.mode,
            reference,
            scored,
            scores,
        });
    }
    let n = lines.len();
    let mean = alphas
        .iter()
        .enumerate()
        .map(|(k, &alpha)| AlphaScore {
            alpha,
            pck: if n == 0 {
                0.0
            } else {
                lines.iter().map(|l| l.scores[k].pck).sum::<f64>() / n as f64
            },
        })
        .collect();
    let mut modes: Vec<KbcMode> = lines.iter().map(|l| l.mode).collect();
    modes.sort_by_key(|m| m.as_str());
    modes.dedup();
    Ok((
        lines,
        ReportFooter {
            summary: true,
            pairs: n,
            modes,
            mean,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn ann(id: &str) -> PairAnnotation {
        PairAnnotation {
            pair_id: id.into(),
            src_id: format!("{id}s"),
            trg_id: format!("{id}t"),
            src_size: [100, 100],
            trg_size: [100, 100],
            category: "cat".into(),
            src_keypoints: vec![[10.0, 10.0], [50.0, 50.0]],
            trg_keypoints: vec![[0.0, 0.0], [50.0, 50.0]],
            src_valid: None,
            trg_valid: None,
            src_bbox: None,
            trg_bbox: None,
        }
    }

    fn exact(a: &PairAnnotation, mode: KbcMode) -> PredictionRecord {
        PredictionRecord {
            pair_id: a.pair_id.clone(),
            mode,
            keypoints: a.trg_keypoints.clone(),
            valid: vec![true; a.len()],
            src_transform: KbcTransform::identity(),
            trg_transform: KbcTransform::identity(),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![ann("b"), ann("a")];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_annotations(Cursor::new(buf)).unwrap(), recs);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = format!(
            "{}\n\nnot json\n",
            serde_json::to_string(&ann("a")).unwrap()
        );
        match read_annotations(Cursor::new(text)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation() {
        let mut a = ann("a");
        a.trg_keypoints.pop();
        assert!(a.validate().is_err());
        let mut b = ann("b");
        b.src_keypoints[0] = [150.0, 10.0];
        assert!(b.validate().is_err());
        b.src_valid = Some(vec![false, true]);
        b.validate().unwrap();
        let dup = vec![ann("a"), ann("a")];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &dup).unwrap();
        assert!(read_annotations(Cursor::new(buf)).is_err());
    }

    #[test]
    fn exact_predictions_score_one_everywhere() {
        let anns = vec![ann("b"), ann("a")];
        let preds: Vec<_> = anns.iter().map(|a| exact(a, KbcMode::Off)).collect();
        let (lines, footer) = evaluate_predictions(&anns, &preds, &[0.05, 0.1, 0.15]).unwrap();
        assert_eq!(lines[0].pair_id, "a");
        assert!(lines.iter().all(|l| l.scores.iter().all(|s| s.pck == 1.0)));
        assert_eq!(footer.pairs, 2);
        assert!(footer.mean.iter().all(|s| s.pck == 1.0));
    }

    #[test]
    fn predictions_are_back_projected() {
        let a = ann("a");
        let t = KbcTransform {
            scale: 2.0,
            offset: [10.0, 20.0],
            applied: true,
        };
        let mut p = exact(&a, KbcMode::Target);
        p.keypoints = a.trg_keypoints.iter().map(|&q| t.forward(q)).collect();
        p.trg_transform = t;
        let (lines, _) = evaluate_predictions(&[a], &[p], &[0.01]).unwrap();
        assert_eq!(lines[0].scores[0].pck, 1.0);
    }

    #[test]
    fn bbox_sets_reference() {
        let mut a = ann("a");
        a.trg_bbox = Some(BoundingBox {
            xmin: 0.0,
            ymin: 0.0,
            xmax: 40.0,
            ymax: 20.0,
        });
        let mut p = exact(&a, KbcMode::Off);
        p.keypoints[0] = [5.0, 0.0];
        let (lines, _) = evaluate_predictions(&[a], &[p], &[0.1]).unwrap();
        assert_eq!(lines[0].reference, 40.0);
        assert_eq!(lines[0].scores[0].pck, 0.5);
    }

    #[test]
    fn unknown_pair_is_an_error() {
        let p = exact(&ann("x"), KbcMode::Off);
        assert!(evaluate_predictions(&[ann("a")], &[p], &[0.1]).is_err());
    }
}
