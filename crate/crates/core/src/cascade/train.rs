//! Multi-stage cascade training with hard-negative bootstrapping.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binned::BinnedFeatures;
use super::boost::{boost_stage, calibrate_stage, Calibration};
use super::model::{BackboneBinding, CascadeModel, Stage, TrainingMetadata, MODEL_FORMAT, MODEL_VERSION};
use super::plan::{plan_stages, StagePlan};
use crate::channels::{validate_shrink, ChannelStack, L1_CHANNELS, MODEL_HEIGHT, MODEL_WIDTH};
use crate::conv::{compute_layer_for_window, Backbone, ConvCache};
use crate::detector::{iou, prepare_levels, scan_stage1, BBox, DetectorConfig, ScanLevel};
use crate::error::{McfError, Result};
use crate::eval::GtBox;
use crate::features::{enumerate_pool_conv, enumerate_pool_l1, FeaturePool, L1PoolConfig, LayerGeometry};
use crate::image::ImageBuffer;
use crate::layers::{LayerData, MultiLayerChannels};

/// Ground-truth boxes whose best detector window overlaps them less than
/// this yield no positive.
pub const POSITIVE_MIN_IOU: f64 = 0.5;

/// Windows overlapping any ground-truth box by at least this much are never
/// used as negatives.
pub const NEGATIVE_MAX_IOU: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_all: usize,
    pub n_stages: usize,
    pub tree_depth: usize,
    /// Tree count of each first-layer-only bootstrap model. Strictly increasing.
    pub bootstrap_rounds: Vec<usize>,
    /// Random negatives drawn before the first round.
    pub initial_negatives: usize,
    /// Cap on hard negatives added per round.
    pub negatives_per_round: usize,
    /// Cap on the accumulated negative set.
    pub max_negatives: usize,
    pub mined_per_image: usize,
    /// Training aborts when fewer negatives than this are available.
    pub min_negatives: usize,
    pub calibration: Calibration,
    pub seed: u64,
    pub shrink: usize,
    pub mirror_positives: bool,
    /// Best-overlapping detector windows taken per ground-truth box.
    pub positives_per_box: usize,
    /// Further windows per box, ranked after the training ones, that only
    /// calibrate reject thresholds and are never boosted on.
    pub held_out_per_box: usize,
    pub l1_pool: L1PoolConfig,
    /// Upper bound on the binned feature cache, `features x samples` bytes.
    /// Pools that would exceed it are subsampled.
    pub feature_cache_bytes: usize,
    pub mining_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Full-size configuration: 4096 depth-4 trees over 6 stages.
    pub fn paper() -> Self {
        TrainConfig {
            n_all: 4096,
            n_stages: 6,
            tree_depth: 4,
            bootstrap_rounds: vec![32, 128, 512, 2048, 4096],
            initial_negatives: 5000,
            negatives_per_round: 5000,
            max_negatives: 10000,
            mined_per_image: 25,
            ..TrainConfig::desk()
        }
    }

    /// Desk-scale configuration: 256 depth-2 trees.
    pub fn desk() -> Self {
        TrainConfig {
            n_all: 256,
            n_stages: 6,
            tree_depth: 2,
            bootstrap_rounds: vec![8, 32, 64],
            initial_negatives: 1000,
            negatives_per_round: 1000,
            max_negatives: 2000,
            mined_per_image: 10,
            min_negatives: 10,
            calibration: Calibration::default(),
            seed: 0,
            shrink: 4,
            mirror_positives: true,
            positives_per_box: 3,
            held_out_per_box: 2,
            l1_pool: L1PoolConfig::default(),
            feature_cache_bytes: 1 << 30,
            mining_stride: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_shrink(self.shrink)?;
        self.calibration.validate()?;
        plan_stages(self.n_all, self.n_stages)?;
        if self.tree_depth == 0 {
            return Err(McfError::Config("tree depth must be at least 1".into()));
        }
        if self.bootstrap_rounds.windows(2).any(|w| w[0] >= w[1]) || self.bootstrap_rounds.contains(&0) {
            return Err(McfError::Config(format!(
                "bootstrap tree counts {:?} must be positive and strictly increasing",
                self.bootstrap_rounds
            )));
        }
        if self.initial_negatives == 0 || self.max_negatives == 0 {
            return Err(McfError::Config("negative counts must be positive".into()));
        }
        if self.mining_stride == 0 || self.mining_stride % self.shrink != 0 {
            return Err(McfError::Config(format!(
                "mining stride {} must be a positive multiple of shrink {}",
                self.mining_stride, self.shrink
            )));
        }
        if self.positives_per_box == 0 {
            return Err(McfError::Config("positives_per_box must be at least 1".into()));
        }
        if self.feature_cache_bytes == 0 {
            return Err(McfError::Config("feature cache bound must be positive".into()));
        }
        Ok(())
    }
}

/// One training image with its boxes. Ignore boxes give no positives but
/// still block negatives.
#[derive(Clone, Debug)]
pub struct TrainImage {
    pub image: ImageBuffer,
    pub boxes: Vec<GtBox>,
}

/// A training window: first-layer channels with their integral, plus the
/// model-window crop the conv layers are computed from.
#[derive(Clone, Debug)]
pub struct Sample {
    pub l1: LayerData,
    pub crop: ImageBuffer,
    pub label: i8,
}

/// Widens or narrows `b` about its center to the model aspect ratio,
/// keeping its height.
pub fn standardize_box(b: &BBox) -> BBox {
    let w = b.h * MODEL_WIDTH as f64 / MODEL_HEIGHT as f64;
    BBox::new(b.x + (b.w - w) / 2.0, b.y, w, b.h)
}

/// The sample the detector sees at level pixel `(x, y)` of `level`.
pub fn window_sample(level: &ScanLevel, x: usize, y: usize, shrink: usize, label: i8) -> Result<Sample> {
    let l1 = level
        .level
        .channels
        .crop(x / shrink, y / shrink, MODEL_WIDTH / shrink, MODEL_HEIGHT / shrink)?;
    Ok(Sample {
        l1: LayerData::whole_with_integral(l1),
        crop: level.window_crop(x, y)?,
        label,
    })
}

fn scan_config(stride: usize) -> DetectorConfig {
    DetectorConfig {
        stride,
        ..DetectorConfig::default()
    }
}

/// Up to `k` detector windows overlapping `b` by at least
/// [`POSITIVE_MIN_IOU`], best first. Ties keep scan order.
fn best_windows(levels: &[ScanLevel], b: &BBox, stride: usize, k: usize) -> Vec<(usize, usize, usize)> {
    let mut found: Vec<(f64, usize, usize, usize)> = Vec::new();
    for (li, level) in levels.iter().enumerate() {
        for (x, y) in level.positions(stride) {
            let o = iou(&level.window_box(x, y), b);
            if o >= POSITIVE_MIN_IOU {
                found.push((o, li, x, y));
            }
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0));
    found.into_iter().take(k).map(|(_, li, x, y)| (li, x, y)).collect()
}

/// Positive windows split into training and held-out calibration sets.
pub struct Positives {
    pub train: Vec<Sample>,
    pub held_out: Vec<Sample>,
}

/// `positives_per_box` training and `held_out_per_box` calibration windows
/// per usable ground-truth box, plus as many from the mirrored image when
/// `mirror_positives` is set.
fn positives(images: &[TrainImage], config: &TrainConfig) -> Result<Positives> {
    let shrink = config.shrink;
    let k = config.positives_per_box;
    let nested: Vec<Vec<(bool, Sample)>> = images
        .par_iter()
        .map(|img| {
            let boxes: Vec<BBox> = img.boxes.iter().filter(|b| !b.ignore).map(|b| standardize_box(&b.bbox)).collect();
            let mut out = Vec::new();
            if boxes.is_empty() {
                return Ok(out);
            }
            let width = img.image.width() as f64;
            let mut views = vec![(img.image.clone(), boxes.clone())];
            if config.mirror_positives {
                let flipped = boxes.iter().map(|b| BBox::new(width - b.x - b.w, b.y, b.w, b.h)).collect();
                views.push((img.image.mirror_horizontal(), flipped));
            }
            for (image, boxes) in views {
                let levels = prepare_levels(&image, shrink, &scan_config(shrink))?;
                for b in &boxes {
                    let windows = best_windows(&levels, b, shrink, k + config.held_out_per_box);
                    for (rank, (li, x, y)) in windows.into_iter().enumerate() {
                        out.push((rank < k, window_sample(&levels[li], x, y, shrink, 1)?));
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let (train, held_out): (Vec<_>, Vec<_>) = nested.into_iter().flatten().partition(|(t, _)| *t);
    if train.is_empty() {
        return Err(McfError::Data("no usable positive boxes in the training set".into()));
    }
    Ok(Positives {
        train: train.into_iter().map(|(_, s)| s).collect(),
        held_out: held_out.into_iter().map(|(_, s)| s).collect(),
    })
}

fn blocked(b: &BBox, gt: &[GtBox]) -> bool {
    gt.iter().any(|g| iou(b, &g.bbox) >= NEGATIVE_MAX_IOU)
}

/// Detector windows drawn uniformly from every image's pyramid, clear of
/// all ground truth.
fn random_negatives(images: &[TrainImage], count: usize, rng: &mut ChaCha8Rng, config: &TrainConfig) -> Result<Vec<Sample>> {
    let per_image = count.div_ceil(images.len().max(1));
    let seeds: Vec<u64> = images.iter().map(|_| rng.gen()).collect();
    let nested: Vec<Vec<Sample>> = images
        .par_iter()
        .zip(&seeds)
        .map(|(img, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let levels = prepare_levels(&img.image, config.shrink, &scan_config(config.mining_stride))?;
            let mut free: Vec<(usize, usize, usize)> = Vec::new();
            for (li, level) in levels.iter().enumerate() {
                for (x, y) in level.positions(config.mining_stride) {
                    if !blocked(&level.window_box(x, y), &img.boxes) {
                        free.push((li, x, y));
                    }
                }
            }
            free.choose_multiple(&mut rng, per_image)
                .map(|&(li, x, y)| window_sample(&levels[li], x, y, config.shrink, -1))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Sample> = nested.into_iter().flatten().collect();
    out.truncate(count);
    Ok(out)
}

/// A window the current model accepts that lies clear of all ground truth.
pub struct MinedWindow {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
    pub sample: Sample,
}

/// Hard negatives for `model`: at most `per_image` per image, best-scoring
/// first.
pub fn mine_hard_negatives(
    images: &[TrainImage],
    model: &CascadeModel,
    stride: usize,
    per_image: usize,
) -> Result<Vec<MinedWindow>> {
    let config = scan_config(stride);
    let found: Vec<Vec<MinedWindow>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let levels = prepare_levels(&img.image, model.shrink, &config)?;
            let (mut cands, _) = scan_stage1(&levels, model, &config)?;
            cands.retain(|c| !blocked(&c.detection.bbox, &img.boxes));
            cands.sort_by(|a, b| b.detection.score.total_cmp(&a.detection.score));
            cands.truncate(per_image);
            cands
                .into_iter()
                .map(|c| {
                    Ok(MinedWindow {
                        image: i,
                        bbox: c.detection.bbox,
                        score: c.detection.score,
                        sample: window_sample(&levels[c.level], c.x, c.y, model.shrink, -1)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(found.into_iter().flatten().collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub trees: usize,
    pub mined: usize,
    pub negatives_after: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rounds: Vec<RoundReport>,
    pub stage_seconds: Vec<f64>,
    pub n_positives: usize,
    pub n_negatives: usize,
}

/// Per-stage outcome of [`train_stages`].
pub struct StageTraining {
    pub stage: Stage,
    pub loss_trace: Vec<f64>,
    pub errors: Vec<f64>,
}

/// Trains one stage per entry of `plan.k` on fixed samples, layer by layer,
/// carrying cumulative scores forward, and calibrates reject thresholds on
/// the positives of `samples` together with `held_out`.
pub fn train_stages(
    samples: &[Sample],
    held_out: &[Sample],
    plan: &StagePlan,
    backbone: Option<&Backbone>,
    config: &TrainConfig,
) -> Result<Vec<StageTraining>> {
    let labels: Vec<i8> = samples.iter().map(|s| s.label).collect();
    let n_neg = labels.iter().filter(|&&y| y < 0).count();
    if n_neg < config.min_negatives.max(1) {
        return Err(McfError::Training(format!(
            "only {n_neg} negatives available, need at least {}",
            config.min_negatives.max(1)
        )));
    }
    let pos_idx: Vec<usize> = (0..samples.len()).filter(|&i| labels[i] > 0).collect();
    let mut carried = vec![0.0f64; samples.len()];
    let n_calib = pos_idx.len() + held_out.len();
    let mut pos_carried = vec![0.0f64; n_calib];
    let mut retained = vec![true; n_calib];
    let mut caches: Vec<ConvCache> = Vec::new();
    let mut held: Vec<MultiLayerChannels> = held_out
        .iter()
        .map(|s| MultiLayerChannels::new(0, s.l1.clone(), plan.k.len()))
        .collect();
    let mut held_caches: Vec<ConvCache> = Vec::new();
    let mut out = Vec::with_capacity(plan.k.len());

    for (si, &k) in plan.k.iter().enumerate() {
        let layer = si + 1;
        let start = Instant::now();
        let (pool, data) = if layer == 1 {
            let geom = LayerGeometry::new(L1_CHANNELS, MODEL_WIDTH / config.shrink, MODEL_HEIGHT / config.shrink);
            let pool = cap_pool(enumerate_pool_l1(geom, &config.l1_pool)?, samples.len(), config, layer);
            let data = BinnedFeatures::build(pool.clone(), samples.len(), |s| Ok(samples[s].l1.clone()))?;
            (pool, data)
        } else {
            let backbone = backbone.ok_or_else(|| McfError::Config(format!("stage {layer} needs backbone weights")))?;
            if caches.is_empty() {
                caches = samples.par_iter().map(|s| ConvCache::new(&s.crop)).collect::<Result<_>>()?;
            }
            let layers: Vec<Arc<ChannelStack>> = caches
                .par_iter_mut()
                .map(|c| compute_layer_for_window(c, backbone, layer).map(Arc::new))
                .collect::<Result<_>>()?;
            if held_caches.is_empty() {
                held_caches = held_out.par_iter().map(|s| ConvCache::new(&s.crop)).collect::<Result<_>>()?;
            }
            held.par_iter_mut().zip(held_caches.par_iter_mut()).try_for_each(|(m, c)| {
                m.set_layer(layer, LayerData::whole(compute_layer_for_window(c, backbone, layer)?))
            })?;
            let first = &layers[0];
            let geom = LayerGeometry::new(first.channels(), first.width(), first.height());
            let pool = cap_pool(enumerate_pool_conv(geom, layer)?, samples.len(), config, layer);
            let data = BinnedFeatures::build(pool.clone(), samples.len(), |s| {
                let st = &layers[s];
                LayerData::window(st.clone(), None, 0, 0, st.width(), st.height())
            })?;
            (pool, data)
        };
        log::info!("stage {layer}: {} candidate features, {} samples", pool.len(), samples.len());
        let boosted = boost_stage(&data, &labels, &carried, k, config.tree_depth)?;
        drop(data);
        let held_outputs: Vec<Vec<f64>> = held
            .par_iter()
            .map(|m| boosted.trees.iter().map(|t| t.predict(m)).collect())
            .collect::<Result<_>>()?;
        let pos_outputs: Vec<Vec<f64>> = (0..boosted.trees.len())
            .map(|t| {
                pos_idx
                    .iter()
                    .map(|&s| boosted.tree_output(t, s))
                    .chain(held_outputs.iter().map(|o| o[t]))
                    .collect()
            })
            .collect();
        let thresholds = calibrate_stage(&pos_outputs, &mut pos_carried, &mut retained, config.calibration);
        carried = boosted.scores.clone();
        log::info!(
            "stage {layer}: {} trees, final loss {:.4}, {} of {} calibration positives retained, {:.1}s",
            boosted.trees.len(),
            boosted.loss_trace.last().copied().unwrap_or(f64::NAN),
            retained.iter().filter(|r| **r).count(),
            retained.len(),
            start.elapsed().as_secs_f64()
        );
        out.push(StageTraining {
            stage: Stage {
                layer_index: layer,
                trees: boosted.trees,
                reject_thresholds: thresholds,
            },
            loss_trace: boosted.loss_trace,
            errors: boosted.errors,
        });
    }
    Ok(out)
}

fn cap_pool(pool: FeaturePool, n_samples: usize, config: &TrainConfig, layer: usize) -> FeaturePool {
    let max = (config.feature_cache_bytes / n_samples.max(1)).max(1);
    if pool.len() > max {
        log::info!("layer {layer}: subsampling {} features to {max}", pool.len());
    }
    pool.subsample(max, config.seed.wrapping_add(layer as u64))
}

fn assemble(
    plan: StagePlan,
    trained: Vec<StageTraining>,
    backbone: Option<&Backbone>,
    config: &TrainConfig,
    n_pos: usize,
    n_neg: usize,
) -> Result<CascadeModel> {
    let binding = match backbone {
        Some(b) if plan.n_stages > 1 => Some(BackboneBinding::of(b)?),
        _ => None,
    };
    let (stages, traces): (Vec<Stage>, Vec<Vec<f64>>) = trained.into_iter().map(|t| (t.stage, t.loss_trace)).unzip();
    let model = CascadeModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        plan,
        shrink: config.shrink,
        stages,
        backbone: binding,
        metadata: TrainingMetadata {
            seed: config.seed,
            tree_depth: config.tree_depth,
            bootstrap_rounds: config.bootstrap_rounds.clone(),
            negatives_per_round: config.negatives_per_round,
            calibration: config.calibration,
            n_positives: n_pos,
            n_negatives: n_neg,
            loss_traces: traces,
        },
    };
    model.validate()?;
    Ok(model)
}

/// Bootstraps a negative set with first-layer-only models of growing size.
pub fn bootstrap_negatives(
    images: &[TrainImage],
    positives: &Positives,
    config: &TrainConfig,
    report: &mut TrainReport,
) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut negatives = random_negatives(images, config.initial_negatives, &mut rng, config)?;
    log::info!("{} random negatives", negatives.len());
    for &trees in &config.bootstrap_rounds {
        let start = Instant::now();
        if negatives.len() < config.min_negatives.max(1) {
            return Err(McfError::Training(format!(
                "only {} negatives available, need at least {}",
                negatives.len(),
                config.min_negatives.max(1)
            )));
        }
        let samples: Vec<Sample> = positives.train.iter().chain(&negatives).cloned().collect();
        let plan = StagePlan::single(trees);
        let trained = train_stages(&samples, &positives.held_out, &plan, None, config)?;
        let model = assemble(plan, trained, None, config, positives.train.len(), negatives.len())?;
        let mut hits = mine_hard_negatives(images, &model, config.mining_stride, config.mined_per_image)?;
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image.cmp(&b.image)));
        hits.truncate(config.negatives_per_round);
        let mined: Vec<Sample> = hits.into_iter().map(|h| h.sample).collect();
        let n_mined = mined.len();
        let room = config.max_negatives.saturating_sub(n_mined);
        if negatives.len() > room {
            negatives.shuffle(&mut rng);
            negatives.truncate(room);
        }
        negatives.extend(mined);
        log::info!(
            "bootstrap round with {trees} trees: mined {n_mined}, {} negatives",
            negatives.len()
        );
        report.rounds.push(RoundReport {
            trees,
            mined: n_mined,
            negatives_after: negatives.len(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    if negatives.len() < config.min_negatives.max(1) {
        return Err(McfError::Training(format!(
            "only {} negatives after bootstrapping, need at least {}",
            negatives.len(),
            config.min_negatives.max(1)
        )));
    }
    Ok(negatives)
}

/// Full training: bootstrapped negatives, then one stage per layer.
/// `backbone` must export exactly `n_stages - 1` blocks.
pub fn train_multistage(
    images: &[TrainImage],
    backbone: &Backbone,
    config: &TrainConfig,
) -> Result<(CascadeModel, TrainReport)> {
    config.validate()?;
    if backbone.exports().len() != config.n_stages - 1 {
        return Err(McfError::Config(format!(
            "{} stages need {} exported conv blocks, backbone exports {}",
            config.n_stages,
            config.n_stages - 1,
            backbone.exports().len()
        )));
    }
    if images.is_empty() {
        return Err(McfError::Data("no training images".into()));
    }
    let mut report = TrainReport::default();
    let pos = positives(images, config)?;
    log::info!("{} positives, {} held out", pos.train.len(), pos.held_out.len());
    let neg = bootstrap_negatives(images, &pos, config, &mut report)?;
    let (n_pos, n_neg) = (pos.train.len(), neg.len());
    let samples: Vec<Sample> = pos.train.into_iter().chain(neg).collect();
    let plan = plan_stages(config.n_all, config.n_stages)?;
    let start = Instant::now();
    let trained = train_stages(&samples, &pos.held_out, &plan, Some(backbone), config)?;
    report.stage_seconds.push(start.elapsed().as_secs_f64());
    report.n_positives = n_pos;
    report.n_negatives = n_neg;
    Ok((assemble(plan, trained, Some(backbone), config, n_pos, n_neg)?, report))
}

/// Fully populated channels for a training sample, as the detector would
/// build them.
pub fn sample_channels(sample: &Sample, backbone: Option<&Backbone>, n_layers: usize) -> Result<MultiLayerChannels> {
    let mut m = MultiLayerChannels::new(0, sample.l1.clone(), n_layers);
    if n_layers > 1 {
        let backbone = backbone.ok_or_else(|| McfError::Config("conv layers need backbone weights".into()))?;
        let mut cache = ConvCache::new(&sample.crop)?;
        for layer in 2..=n_layers {
            m.set_layer(layer, LayerData::whole(compute_layer_for_window(&mut cache, backbone, layer)?))?;
        }
    }
    Ok(m)
}
