//! Detection benchmarks: accuracy, per-image timing and per-stage rejection
//! for several model and detector configurations on one image set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cascade::CascadeModel;
use crate::conv::Backbone;
use crate::detector::{detect, Detection, DetectorConfig, StageStats};
use crate::error::{McfError, Result};
use crate::eval::{evaluate, EvalCurve, GroundTruth};
use crate::image::ImageBuffer;

/// Output of running one configuration over an image set.
#[derive(Clone, Debug)]
pub struct DetectionRun {
    pub detections: BTreeMap<String, Vec<Detection>>,
    pub stats: Vec<StageStats>,
    pub seconds: Vec<f64>,
}

impl DetectionRun {
    pub fn total_stats(&self) -> StageStats {
        let mut total = StageStats::default();
        for s in &self.stats {
            total.accumulate(s);
        }
        total
    }

    pub fn median_seconds(&self) -> f64 {
        median(&self.seconds)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `detect` on every image inside a pool of `threads` workers.
pub fn run_detection(
    images: &[(String, ImageBuffer)],
    model: &CascadeModel,
    backbone: Option<&Backbone>,
    config: &DetectorConfig,
    threads: usize,
) -> Result<DetectionRun> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| McfError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut run = DetectionRun {
            detections: BTreeMap::new(),
            stats: Vec::with_capacity(images.len()),
            seconds: Vec::with_capacity(images.len()),
        };
        for (name, image) in images {
            let start = Instant::now();
            let (dets, stats) = detect(image, model, backbone, config)?;
            run.seconds.push(start.elapsed().as_secs_f64());
            run.detections.insert(name.clone(), dets);
            run.stats.push(stats);
        }
        Ok(run)
    })
}

/// Fraction of windows accepted by stage 1 that a later stage, other than
/// the last, rejects.
pub fn early_rejection_fraction(stats: &StageStats) -> f64 {
    let Some(first) = stats.stages.first() else {
        return 0.0;
    };
    let accepted = first.leaving();
    if accepted == 0 || stats.stages.len() < 3 {
        return 0.0;
    }
    let early: usize = stats.stages[1..stats.stages.len() - 1].iter().map(|s| s.rejected).sum();
    early as f64 / accepted as f64
}

pub struct BenchEntry<'a> {
    pub name: String,
    pub model: &'a CascadeModel,
    pub backbone: Option<&'a Backbone>,
    pub detector: DetectorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub mr_2: f64,
    pub mr_4: f64,
    pub median_seconds: f64,
    /// Baseline median time over this row's median time.
    pub speedup: f64,
    pub rejection_ratios: Vec<f64>,
    pub entering: Vec<usize>,
    pub pruned_after_stage1: usize,
    pub early_rejection: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub images: usize,
    pub threads: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>7} {:>7} {:>10} {:>8}  entering per stage / rejection ratio",
            "config", "MR-2", "MR-4", "s/image", "speedup"
        );
        for r in &self.rows {
            let stages: Vec<String> = r
                .entering
                .iter()
                .zip(&r.rejection_ratios)
                .map(|(e, q)| format!("{e}/{q:.3}"))
                .collect();
            let _ = writeln!(
                out,
                "{:<16} {:>7.4} {:>7.4} {:>10.4} {:>8.2}  {}",
                r.name,
                r.mr_2,
                r.mr_4,
                r.median_seconds,
                r.speedup,
                stages.join(" ")
            );
        }
        out
    }
}

/// Evaluates every entry on `images`; the first entry is the speed baseline.
pub fn bench(
    entries: &[BenchEntry<'_>],
    images: &[(String, ImageBuffer)],
    gt: &GroundTruth,
    threads: usize,
) -> Result<(BenchReport, Vec<(DetectionRun, EvalCurve)>)> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut baseline = None;
    for e in entries {
        let run = run_detection(images, e.model, e.backbone, &e.detector, threads)?;
        let curve = evaluate(gt, &run.detections, 0.5)?;
        let total = run.total_stats();
        let med = run.median_seconds();
        let base = *baseline.get_or_insert(med);
        rows.push(BenchRow {
            name: e.name.clone(),
            mr_2: curve.mr_log_avg_2,
            mr_4: curve.mr_log_avg_4,
            median_seconds: med,
            speedup: base / med,
            rejection_ratios: total.stages.iter().map(|s| s.rejection_ratio()).collect(),
            entering: total.stages.iter().map(|s| s.entering).collect(),
            pruned_after_stage1: total.stages.first().map_or(0, |s| s.pruned),
            early_rejection: early_rejection_fraction(&total),
        });
        runs.push((run, curve));
    }
    Ok((
        BenchReport {
            images: images.len(),
            threads,
            rows,
        },
        runs,
    ))
}
