//! Ground truth, detection matching and miss-rate versus FPPI curves.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{detection_order, iou, BBox, Detection};
use crate::error::{McfError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub ignore: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub path: String,
    pub boxes: Vec<GtBox>,
}

/// Per-image boxes in file order of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub images: Vec<ImageAnnotation>,
}

impl GroundTruth {
    pub fn n_boxes(&self) -> usize {
        self.images.iter().map(|i| i.boxes.iter().filter(|b| !b.ignore).count()).sum()
    }

    pub fn get(&self, path: &str) -> Option<&ImageAnnotation> {
        self.images.iter().find(|i| i.path == path)
    }

    /// Marks boxes shorter than `min_height` as ignore.
    pub fn ignore_below(&mut self, min_height: f64) {
        for b in self.images.iter_mut().flat_map(|i| i.boxes.iter_mut()) {
            if b.bbox.h < min_height {
                b.ignore = true;
            }
        }
    }

    /// Image paths resolved against `base`.
    pub fn resolve(&self, base: &Path) -> Vec<PathBuf> {
        self.images.iter().map(|i| base.join(&i.path)).collect()
    }

    /// Paths that do not exist under `base`. Boxes of existing images must
    /// lie inside the image.
    pub fn check_images(&self, base: &Path) -> Result<Vec<String>> {
        let mut missing = Vec::new();
        for ann in &self.images {
            let path = base.join(&ann.path);
            if !path.exists() {
                missing.push(ann.path.clone());
                continue;
            }
            let (w, h) = ::image::image_dimensions(&path)?;
            for b in &ann.boxes {
                let r = &b.bbox;
                if r.x < 0.0 || r.y < 0.0 || r.right() > w as f64 || r.bottom() > h as f64 {
                    return Err(McfError::Data(format!(
                        "box ({}, {}, {}, {}) outside {}x{} image {}",
                        r.x, r.y, r.w, r.h, w, h, ann.path
                    )));
                }
            }
        }
        Ok(missing)
    }

    /// CSV with header `image_path,x,y,w,h,ignore`. Images without boxes get a
    /// row holding only the path.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_path,x,y,w,h,ignore\n");
        for ann in &self.images {
            if ann.boxes.is_empty() {
                out.push_str(&format!("{}\n", ann.path));
            }
            for b in &ann.boxes {
                let r = b.bbox;
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    ann.path, r.x, r.y, r.w, r.h, b.ignore as u8
                ));
            }
        }
        out
    }
}

/// Parses `image_path,x,y,w,h[,ignore]` rows. A first line starting with
/// `image_path` is a header. A row with only a path lists an image with no
/// pedestrians.
pub fn parse_annotations(text: &str) -> Result<GroundTruth> {
    let mut order: Vec<String> = Vec::new();
    let mut boxes: BTreeMap<String, Vec<GtBox>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (line_no == 1 && line.starts_with("image_path")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let path = fields[0].to_string();
        if path.is_empty() {
            return Err(McfError::Parse {
                line: line_no,
                reason: "empty image path".into(),
            });
        }
        if !boxes.contains_key(&path) {
            order.push(path.clone());
            boxes.insert(path.clone(), Vec::new());
        }
        if fields.len() == 1 {
            continue;
        }
        if fields.len() != 5 && fields.len() != 6 {
            return Err(McfError::Parse {
                line: line_no,
                reason: format!("expected 5 or 6 fields, found {}", fields.len()),
            });
        }
        let mut nums = [0.0f64; 4];
        for (k, f) in fields[1..5].iter().enumerate() {
            nums[k] = f.parse().map_err(|_| McfError::Parse {
                line: line_no,
                reason: format!("bad number {f:?}"),
            })?;
        }
        if nums.iter().any(|v| !v.is_finite()) || nums[2] <= 0.0 || nums[3] <= 0.0 {
            return Err(McfError::Parse {
                line: line_no,
                reason: "box needs finite coordinates and positive size".into(),
            });
        }
        let ignore = match fields.get(5) {
            None | Some(&"0") | Some(&"false") => false,
            Some(&"1") | Some(&"true") => true,
            Some(other) => {
                return Err(McfError::Parse {
                    line: line_no,
                    reason: format!("bad ignore flag {other:?}"),
                })
            }
        };
        boxes.get_mut(&path).expect("inserted above").push(GtBox {
            bbox: BBox::new(nums[0], nums[1], nums[2], nums[3]),
            ignore,
        });
    }
    Ok(GroundTruth {
        images: order
            .into_iter()
            .map(|path| {
                let b = boxes.remove(&path).unwrap_or_default();
                ImageAnnotation { path, boxes: b }
            })
            .collect(),
    })
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| McfError::Load {
        what: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_annotations(&text)
}

/// Detections read back from `image_path,x,y,w,h,score,stage_reached` rows.
pub fn parse_detections(text: &str) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with("image_path") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(McfError::Parse {
                line: line_no,
                reason: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| McfError::Parse {
                line: line_no,
                reason: format!("bad number {s:?}"),
            })
        };
        let stage_reached = fields[6].parse().map_err(|_| McfError::Parse {
            line: line_no,
            reason: format!("bad stage {:?}", fields[6]),
        })?;
        out.entry(fields[0].to_string()).or_default().push(Detection {
            bbox: BBox::new(num(fields[1])?, num(fields[2])?, num(fields[3])?, num(fields[4])?),
            score: num(fields[5])?,
            stage_reached,
            scale: 1.0,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchLabel {
    TruePositive,
    FalsePositive,
    /// Matched an ignore region; counts neither way.
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMatches {
    /// `(score, label)` per detection.
    pub detections: Vec<(f64, MatchLabel)>,
    /// Non-ignore ground-truth boxes.
    pub n_gt: usize,
    /// Which non-ignore boxes were matched, in input order.
    pub matched: Vec<bool>,
}

impl ImageMatches {
    pub fn misses(&self) -> usize {
        self.matched.iter().filter(|m| !**m).count()
    }
}

/// Greedy one-to-one matching in descending score order. Each detection
/// takes the highest-IoU unmatched box with IoU at least `iou_min`; failing
/// that, an ignore box with enough overlap absorbs it.
pub fn match_detections(dets: &[Detection], gt: &[GtBox], iou_min: f64) -> ImageMatches {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| detection_order(a, b));
    let real: Vec<&GtBox> = gt.iter().filter(|g| !g.ignore).collect();
    let ignore: Vec<&GtBox> = gt.iter().filter(|g| g.ignore).collect();
    let mut matched = vec![false; real.len()];
    let mut labels = Vec::with_capacity(order.len());
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in real.iter().enumerate() {
            if matched[k] {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= iou_min && best.map_or(true, |(_, b)| o > b) {
                best = Some((k, o));
            }
        }
        let label = if let Some((k, _)) = best {
            matched[k] = true;
            MatchLabel::TruePositive
        } else if ignore.iter().any(|g| iou(&d.bbox, &g.bbox) >= iou_min) {
            MatchLabel::Ignored
        } else {
            MatchLabel::FalsePositive
        };
        labels.push((d.score, label));
    }
    ImageMatches {
        detections: labels,
        n_gt: real.len(),
        matched,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    /// `(fppi, miss_rate)` per distinct score threshold, highest first.
    pub points: Vec<(f64, f64)>,
    pub mr_log_avg_2: f64,
    pub mr_log_avg_4: f64,
}

/// `n` log-uniform points over `[10^lo, 10^hi]`.
pub fn log_references(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / (n - 1) as f64))
        .collect()
}

/// Mean miss rate at the references, each read from the last point whose
/// fppi does not exceed it (1 when there is none).
pub fn average_miss_rate(points: &[(f64, f64)], references: &[f64]) -> f64 {
    let total: f64 = references
        .iter()
        .map(|&r| {
            points
                .iter()
                .take_while(|p| p.0 <= r)
                .last()
                .map_or(1.0, |p| p.1)
        })
        .sum();
    total / references.len() as f64
}

pub fn compute_curve(matches: &[ImageMatches], n_images: usize) -> Result<EvalCurve> {
    if n_images == 0 {
        return Err(McfError::InvalidInput("evaluation needs at least one image".into()));
    }
    let n_gt: usize = matches.iter().map(|m| m.n_gt).sum();
    if n_gt == 0 {
        return Err(McfError::Data("no ground-truth boxes to evaluate against".into()));
    }
    let mut scored: Vec<(f64, MatchLabel)> = matches
        .iter()
        .flat_map(|m| m.detections.iter().copied())
        .filter(|d| d.1 != MatchLabel::Ignored)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            match scored[i].1 {
                MatchLabel::TruePositive => tp += 1,
                _ => fp += 1,
            }
            i += 1;
        }
        points.push((fp as f64 / n_images as f64, 1.0 - tp as f64 / n_gt as f64));
    }
    Ok(EvalCurve {
        mr_log_avg_2: average_miss_rate(&points, &log_references(-2.0, 0.0, 9)),
        mr_log_avg_4: average_miss_rate(&points, &log_references(-4.0, 0.0, 25)),
        points,
    })
}

/// Matches per-image detections against `gt` and builds the curve. Images
/// missing from `dets` count as having no detections.
pub fn evaluate(
    gt: &GroundTruth,
    dets: &BTreeMap<String, Vec<Detection>>,
    iou_min: f64,
) -> Result<EvalCurve> {
    let matches: Vec<ImageMatches> = gt
        .images
        .iter()
        .map(|ann| {
            let d = dets.get(&ann.path).map_or(&[][..], Vec::as_slice);
            match_detections(d, &ann.boxes, iou_min)
        })
        .collect();
    compute_curve(&matches, gt.images.len())
}
