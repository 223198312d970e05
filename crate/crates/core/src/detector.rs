//! Staged sliding-window detection.
//!
//! Stage 1 scans every stride-aligned window of every pyramid level on the
//! first-layer channels. Survivors optionally go through early NMS, then each
//! later stage computes its conv layer only for windows still alive, resuming
//! the per-window forward pass. Final survivors are merged by greedy NMS.

use std::cmp::Ordering;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::CascadeModel;
use crate::channels::{build_pyramid, PyramidLevel, PyramidSpec, MODEL_HEIGHT, MODEL_WIDTH};
use crate::conv::{compute_layer_for_window, Backbone, ConvCache};
use crate::error::{McfError, Result};
use crate::image::ImageBuffer;
use crate::integral::IntegralStack;
use crate::layers::{LayerData, MultiLayerChannels};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }
}

/// Intersection over union.
pub fn overlap(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) || !bx.x.is_finite() || !bx.y.is_finite() || !bx.area().is_finite() {
            return Err(McfError::InvalidInput(format!("box {bx:?} has no positive finite area")));
        }
    }
    Ok(iou(a, b))
}

/// [`overlap`] without validation.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.right().min(b.right()) - a.x.max(b.x);
    let ih = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub stage_reached: usize,
    pub scale: f64,
}

/// Score descending, then x, y and scale ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.scale.total_cmp(&b.scale))
}

/// Indices of the boxes kept by greedy NMS: in [`detection_order`], a box is
/// kept when its overlap with every box kept so far is at most `threshold`.
pub fn nms_indices(dets: &[Detection], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| detection_order(&dets[i], &dets[j]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    nms_indices(dets, threshold).into_iter().map(|i| dets[i]).collect()
}

/// Early pruning after stage 1. `None` returns the input unchanged.
pub fn early_nms(dets: &[Detection], theta: Option<f64>) -> Vec<Detection> {
    match theta {
        None => dets.to_vec(),
        Some(t) => nms(dets, t),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Window step in model-window (pyramid level) pixels.
    pub stride: usize,
    /// Early-NMS overlap threshold; `None` disables pruning.
    pub theta: Option<f64>,
    pub final_nms: f64,
    pub score_floor: f64,
    pub scales_per_octave: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            stride: 4,
            theta: None,
            final_nms: 0.5,
            score_floor: f64::NEG_INFINITY,
            scales_per_octave: 4,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self, shrink: usize) -> Result<()> {
        if self.stride == 0 || self.stride % shrink != 0 {
            return Err(McfError::Config(format!(
                "stride {} must be a positive multiple of shrink {shrink}",
                self.stride
            )));
        }
        if !(self.final_nms > 0.0 && self.final_nms <= 1.0) {
            return Err(McfError::Config(format!("final NMS threshold {} outside (0, 1]", self.final_nms)));
        }
        if let Some(t) = self.theta {
            if !(t > 0.0 && t <= 1.0) {
                return Err(McfError::Config(format!("theta {t} outside (0, 1]")));
            }
            if t <= self.final_nms {
                return Err(McfError::Config(format!(
                    "theta {t} must exceed the final NMS threshold {}",
                    self.final_nms
                )));
            }
        }
        if self.scales_per_octave == 0 {
            return Err(McfError::Config("scales_per_octave must be at least 1".into()));
        }
        if self.score_floor.is_nan() {
            return Err(McfError::Config("score floor is NaN".into()));
        }
        Ok(())
    }

    pub fn pyramid(&self, shrink: usize) -> PyramidSpec {
        PyramidSpec {
            scales_per_octave: self.scales_per_octave,
            min_window: (MODEL_HEIGHT, MODEL_WIDTH),
            shrink,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub entering: usize,
    pub rejected: usize,
    /// Removed by early NMS after this stage.
    pub pruned: usize,
    pub seconds: f64,
}

impl StageCounts {
    pub fn rejection_ratio(&self) -> f64 {
        if self.entering == 0 {
            0.0
        } else {
            self.rejected as f64 / self.entering as f64
        }
    }

    pub fn leaving(&self) -> usize {
        self.entering - self.rejected - self.pruned
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stages: Vec<StageCounts>,
    pub pyramid_seconds: f64,
    pub nms_seconds: f64,
    /// Detections left after final NMS and the score floor.
    pub detections: usize,
}

impl StageStats {
    pub fn accepted(&self) -> usize {
        self.stages.last().map_or(0, StageCounts::leaving)
    }

    /// Checks that every stage's entering count equals the previous stage's
    /// survivors.
    pub fn is_consistent(&self) -> bool {
        self.stages.iter().all(|s| s.rejected + s.pruned <= s.entering)
            && self.stages.windows(2).all(|w| w[1].entering == w[0].leaving())
    }

    pub fn total_seconds(&self) -> f64 {
        self.pyramid_seconds + self.nms_seconds + self.stages.iter().map(|s| s.seconds).sum::<f64>()
    }

    /// Sums counts and times over several images.
    pub fn accumulate(&mut self, other: &StageStats) {
        if self.stages.len() < other.stages.len() {
            self.stages.resize(other.stages.len(), StageCounts::default());
        }
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            a.entering += b.entering;
            a.rejected += b.rejected;
            a.pruned += b.pruned;
            a.seconds += b.seconds;
        }
        self.pyramid_seconds += other.pyramid_seconds;
        self.nms_seconds += other.nms_seconds;
        self.detections += other.detections;
    }
}

/// One pyramid level prepared for scanning.
pub struct ScanLevel {
    pub level: PyramidLevel,
    stack: Arc<crate::channels::ChannelStack>,
    integral: Arc<IntegralStack>,
}

impl ScanLevel {
    pub fn new(level: PyramidLevel) -> Self {
        let integral = Arc::new(IntegralStack::new(&level.channels));
        let stack = Arc::new(level.channels.clone());
        ScanLevel { level, stack, integral }
    }

    /// First-layer data for the window whose top-left level pixel is `(x, y)`.
    pub fn window_l1(&self, x: usize, y: usize, shrink: usize) -> Result<LayerData> {
        LayerData::window(
            self.stack.clone(),
            Some(self.integral.clone()),
            x / shrink,
            y / shrink,
            MODEL_WIDTH / shrink,
            MODEL_HEIGHT / shrink,
        )
    }

    /// Model-window crop of the level image.
    pub fn window_crop(&self, x: usize, y: usize) -> Result<ImageBuffer> {
        self.level.image.crop(x, y, MODEL_WIDTH, MODEL_HEIGHT)
    }

    /// The window at level pixel `(x, y)` in original-image coordinates.
    pub fn window_box(&self, x: usize, y: usize) -> BBox {
        let (sx, sy) = (self.level.scale_x, self.level.scale_y);
        BBox::new(
            x as f64 / sx,
            y as f64 / sy,
            MODEL_WIDTH as f64 / sx,
            MODEL_HEIGHT as f64 / sy,
        )
    }

    /// Top-left corners of all stride-aligned windows fully inside the level.
    pub fn positions(&self, stride: usize) -> Vec<(usize, usize)> {
        let (w, h) = (self.level.image.width(), self.level.image.height());
        if w < MODEL_WIDTH || h < MODEL_HEIGHT {
            return Vec::new();
        }
        let mut out = Vec::new();
        for y in (0..=h - MODEL_HEIGHT).step_by(stride) {
            for x in (0..=w - MODEL_WIDTH).step_by(stride) {
                out.push((x, y));
            }
        }
        out
    }
}

pub fn prepare_levels(image: &ImageBuffer, shrink: usize, config: &DetectorConfig) -> Result<Vec<ScanLevel>> {
    Ok(build_pyramid(image, &config.pyramid(shrink))?
        .into_iter()
        .map(ScanLevel::new)
        .collect())
}

/// A window alive in the cascade.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub level: usize,
    pub x: usize,
    pub y: usize,
    pub detection: Detection,
}

/// Runs stage 1 with early exit over every window. Returns the survivors in
/// (level, y, x) order and the number of windows scanned.
pub fn scan_stage1(
    levels: &[ScanLevel],
    model: &CascadeModel,
    config: &DetectorConfig,
) -> Result<(Vec<Candidate>, usize)> {
    let stage = &model.stages[0];
    let n_layers = model.n_stages();
    let per_level: Vec<(Vec<Candidate>, usize)> = levels
        .par_iter()
        .enumerate()
        .map(|(li, level)| {
            let positions = level.positions(config.stride);
            let mut survivors = Vec::new();
            for &(x, y) in &positions {
                let src = MultiLayerChannels::new(0, level.window_l1(x, y, model.shrink)?, n_layers);
                let (score, passed) = stage.evaluate(&src, 0.0, true)?;
                if passed {
                    survivors.push(Candidate {
                        level: li,
                        x,
                        y,
                        detection: Detection {
                            bbox: level.window_box(x, y),
                            score,
                            stage_reached: 1,
                            scale: level.level.scale,
                        },
                    });
                }
            }
            Ok((survivors, positions.len()))
        })
        .collect::<Result<_>>()?;
    let scanned = per_level.iter().map(|p| p.1).sum();
    Ok((per_level.into_iter().flat_map(|p| p.0).collect(), scanned))
}

/// Early NMS over candidates, preserving the input order of the kept ones.
pub fn prune_candidates(candidates: Vec<Candidate>, theta: Option<f64>) -> Vec<Candidate> {
    let Some(t) = theta else {
        return candidates;
    };
    let dets: Vec<Detection> = candidates.iter().map(|c| c.detection).collect();
    let mut keep = vec![false; dets.len()];
    for i in nms_indices(&dets, t) {
        keep[i] = true;
    }
    candidates
        .into_iter()
        .zip(keep)
        .filter_map(|(c, k)| k.then_some(c))
        .collect()
}

struct Alive {
    candidate: Candidate,
    channels: MultiLayerChannels,
    cache: ConvCache,
}

/// Stages `2..=N`, breadth-first. Each stage computes its layer only for
/// windows still alive and drops a window's conv state as soon as it is
/// rejected. Returns the windows accepted by every stage and per-stage
/// `(entering, rejected, seconds)`.
pub fn run_remaining_stages(
    levels: &[ScanLevel],
    survivors: Vec<Candidate>,
    model: &CascadeModel,
    backbone: Option<&Backbone>,
) -> Result<(Vec<Candidate>, Vec<(usize, usize, f64)>)> {
    if model.n_stages() == 1 {
        return Ok((survivors, Vec::new()));
    }
    let backbone = backbone.ok_or_else(|| McfError::Config("multi-stage model needs backbone weights".into()))?;
    let n_layers = model.n_stages();
    let start = Instant::now();
    let mut alive: Vec<Alive> = survivors
        .into_par_iter()
        .map(|c| {
            let level = &levels[c.level];
            Ok(Alive {
                channels: MultiLayerChannels::new(0, level.window_l1(c.x, c.y, model.shrink)?, n_layers),
                cache: ConvCache::new(&level.window_crop(c.x, c.y)?)?,
                candidate: c,
            })
        })
        .collect::<Result<_>>()?;
    let mut setup = start.elapsed().as_secs_f64();
    let mut stats = Vec::new();
    for (si, stage) in model.stages.iter().enumerate().skip(1) {
        let layer = si + 1;
        let start = Instant::now();
        let entering = alive.len();
        let verdicts: Vec<bool> = alive
            .par_iter_mut()
            .map(|a| {
                let data = compute_layer_for_window(&mut a.cache, backbone, layer)?;
                a.channels.set_layer(layer, LayerData::whole(data))?;
                let (score, passed) = stage.evaluate(&a.channels, a.candidate.detection.score, true)?;
                a.candidate.detection.score = score;
                a.candidate.detection.stage_reached = layer;
                Ok(passed)
            })
            .collect::<Result<_>>()?;
        alive = alive
            .into_iter()
            .zip(verdicts)
            .filter_map(|(a, ok)| ok.then_some(a))
            .collect();
        stats.push((entering, entering - alive.len(), start.elapsed().as_secs_f64() + setup));
        setup = 0.0;
    }
    Ok((alive.into_iter().map(|a| a.candidate).collect(), stats))
}

/// Full staged detection on one image.
pub fn detect(
    image: &ImageBuffer,
    model: &CascadeModel,
    backbone: Option<&Backbone>,
    config: &DetectorConfig,
) -> Result<(Vec<Detection>, StageStats)> {
    config.validate(model.shrink)?;
    if model.n_stages() > 1 {
        let bb = backbone.ok_or_else(|| McfError::Config("multi-stage model needs backbone weights".into()))?;
        if let Some(binding) = &model.backbone {
            binding.check(bb)?;
        }
    }
    let mut stats = StageStats::default();
    let start = Instant::now();
    let levels = prepare_levels(image, model.shrink, config)?;
    stats.pyramid_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let (survivors, scanned) = scan_stage1(&levels, model, config)?;
    let after_scan = survivors.len();
    let survivors = prune_candidates(survivors, config.theta);
    stats.stages.push(StageCounts {
        entering: scanned,
        rejected: scanned - after_scan,
        pruned: after_scan - survivors.len(),
        seconds: start.elapsed().as_secs_f64(),
    });

    let (accepted, later) = run_remaining_stages(&levels, survivors, model, backbone)?;
    for (entering, rejected, seconds) in later {
        stats.stages.push(StageCounts {
            entering,
            rejected,
            pruned: 0,
            seconds,
        });
    }

    let start = Instant::now();
    let dets: Vec<Detection> = accepted.into_iter().map(|c| c.detection).collect();
    let mut merged = nms(&dets, config.final_nms);
    merged.retain(|d| d.score >= config.score_floor);
    stats.nms_seconds = start.elapsed().as_secs_f64();
    stats.detections = merged.len();
    Ok((merged, stats))
}

/// CSV rows `image_path,x,y,w,h,score,stage_reached`, without a header.
pub fn detections_csv(image_path: &str, dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            image_path, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score, d.stage_reached
        ));
    }
    out
}

pub const CSV_HEADER: &str = "image_path,x,y,w,h,score,stage_reached";
