//! Candidate features over the multi-layer channels.
//!
//! Three kinds: zero-order (one pixel), one-order (a rectangle sum) and
//! high-order (difference of two rectangle sums). The first layer uses every
//! pixel plus a seeded sample of two-rectangle differences drawn from two
//! families:
//!
//! - mirror pairs: `rect_b` is `rect_a` reflected about the vertical center
//!   line of the window. Mirroring the channel planes of a window swaps the two
//!   sums, so the feature value is negated.
//! - distant pairs: two equal-size rectangles whose centers are at least
//!   `min_distance` cells apart.
//!
//! Convolutional layers use zero-order features only.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{McfError, Result};
use crate::layers::{ChannelSource, LayerRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Zero,
    One,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Rect {
            x: x as u32,
            y: y as u32,
            w: w as u32,
            h: h as u32,
        }
    }

    pub fn pixel(x: usize, y: usize) -> Self {
        Rect::new(x, y, 1, 1)
    }

    fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0
            && self.h > 0
            && (self.x + self.w) as usize <= width
            && (self.y + self.h) as usize <= height
    }

    fn center2(&self) -> (i64, i64) {
        (
            2 * self.x as i64 + self.w as i64,
            2 * self.y as i64 + self.h as i64,
        )
    }
}

/// One candidate feature bound to a layer and channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub layer: usize,
    pub channel: usize,
    /// Channel of `rect_b` for high-order features; `None` means `channel`.
    pub channel_b: Option<usize>,
    pub rect_a: Rect,
    pub rect_b: Option<Rect>,
}

impl FeatureSpec {
    pub fn zero(layer: usize, channel: usize, x: usize, y: usize) -> Self {
        FeatureSpec {
            kind: FeatureKind::Zero,
            layer,
            channel,
            channel_b: None,
            rect_a: Rect::pixel(x, y),
            rect_b: None,
        }
    }

    pub fn one(layer: usize, channel: usize, rect: Rect) -> Self {
        FeatureSpec {
            kind: FeatureKind::One,
            layer,
            channel,
            channel_b: None,
            rect_a: rect,
            rect_b: None,
        }
    }

    pub fn high(layer: usize, channel: usize, rect_a: Rect, rect_b: Rect) -> Self {
        FeatureSpec {
            kind: FeatureKind::High,
            layer,
            channel,
            channel_b: None,
            rect_a,
            rect_b: Some(rect_b),
        }
    }

    pub fn channel_b(&self) -> usize {
        self.channel_b.unwrap_or(self.channel)
    }

    /// Checks the spec against a layer of `channels x height x width`.
    pub fn validate(&self, channels: usize, width: usize, height: usize) -> Result<()> {
        let bad = |why: &str| Err(McfError::InvalidInput(format!("feature {self:?}: {why}")));
        if self.channel >= channels || self.channel_b() >= channels {
            return bad("channel out of range");
        }
        if !self.rect_a.fits(width, height) {
            return bad("rect_a outside layer");
        }
        match self.kind {
            FeatureKind::Zero => {
                if self.rect_a.w != 1 || self.rect_a.h != 1 || self.rect_b.is_some() {
                    return bad("zero-order features are single pixels");
                }
            }
            FeatureKind::One => {
                if self.rect_b.is_some() {
                    return bad("one-order features have a single rect");
                }
            }
            FeatureKind::High => {
                let Some(b) = self.rect_b else {
                    return bad("high-order features need rect_b");
                };
                if !b.fits(width, height) {
                    return bad("rect_b outside layer");
                }
                if b == self.rect_a && self.channel_b() == self.channel {
                    return bad("rects must differ within one channel");
                }
            }
        }
        Ok(())
    }

    /// Feature value on an already fetched layer view.
    #[inline]
    pub fn evaluate_on(&self, layer: &LayerRef<'_>) -> f32 {
        let a = self.rect_a;
        match self.kind {
            FeatureKind::Zero => layer.get(self.channel, a.x as usize, a.y as usize),
            FeatureKind::One => {
                layer.rect_sum(self.channel, a.x as usize, a.y as usize, a.w as usize, a.h as usize) as f32
            }
            FeatureKind::High => {
                let b = self.rect_b.unwrap_or(a);
                let sa = layer.rect_sum(self.channel, a.x as usize, a.y as usize, a.w as usize, a.h as usize);
                let sb = layer.rect_sum(self.channel_b(), b.x as usize, b.y as usize, b.w as usize, b.h as usize);
                (sa - sb) as f32
            }
        }
    }
}

/// Zero → the pixel; one → `sum(rect_a)`; high → `sum(rect_a) - sum(rect_b)`.
pub fn evaluate(spec: &FeatureSpec, channels: &impl ChannelSource) -> Result<f32> {
    Ok(spec.evaluate_on(&channels.layer(spec.layer)?))
}

/// Ordered candidate features for a single layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePool {
    layer_index: usize,
    specs: Vec<FeatureSpec>,
}

impl FeaturePool {
    pub fn new(layer_index: usize, specs: Vec<FeatureSpec>) -> Result<Self> {
        if let Some(s) = specs.iter().find(|s| s.layer != layer_index) {
            return Err(McfError::InvalidInput(format!(
                "feature {s:?} does not belong to layer {layer_index}"
            )));
        }
        Ok(FeaturePool { layer_index, specs })
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn specs(&self) -> &[FeatureSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, index: usize) -> &FeatureSpec {
        &self.specs[index]
    }

    /// Keeps a seeded subset of `max` features, preserving pool order.
    pub fn subsample(&self, max: usize, seed: u64) -> FeaturePool {
        if self.specs.len() <= max {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = rand::seq::index::sample(&mut rng, self.specs.len(), max).into_vec();
        keep.sort_unstable();
        FeaturePool {
            layer_index: self.layer_index,
            specs: keep.into_iter().map(|i| self.specs[i]).collect(),
        }
    }
}

/// `(channels, width, height)` of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
}

impl LayerGeometry {
    pub fn new(channels: usize, width: usize, height: usize) -> Self {
        LayerGeometry {
            channels,
            width,
            height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct L1PoolConfig {
    /// Number of sampled high-order features.
    pub high_order_cap: usize,
    /// Largest sampled rectangle as a fraction of the layer width and height.
    pub max_rect_fraction: f64,
    /// Minimum center distance (cells) for distant pairs.
    pub min_distance: f64,
    pub seed: u64,
}

impl Default for L1PoolConfig {
    fn default() -> Self {
        L1PoolConfig {
            high_order_cap: 30_000,
            max_rect_fraction: 0.5,
            min_distance: 4.0,
            seed: 0,
        }
    }
}

/// Every first-layer pixel followed by sampled mirror and distant pairs.
pub fn enumerate_pool_l1(geometry: LayerGeometry, config: &L1PoolConfig) -> Result<FeaturePool> {
    if config.high_order_cap < 1 {
        return Err(McfError::Config("high-order feature cap must be at least 1".into()));
    }
    let LayerGeometry {
        channels,
        width,
        height,
    } = geometry;
    let mut specs = zero_order_specs(1, geometry);
    let max_w = ((width as f64 * config.max_rect_fraction) as usize).clamp(1, width);
    let max_h = ((height as f64 * config.max_rect_fraction) as usize).clamp(1, height);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = HashSet::new();
    let mut attempts = 0usize;
    let max_attempts = config.high_order_cap.saturating_mul(50);
    let min_d2 = (2.0 * config.min_distance).powi(2);
    while seen.len() < config.high_order_cap && attempts < max_attempts {
        attempts += 1;
        let w = rng.gen_range(1..=max_w);
        let h = rng.gen_range(1..=max_h);
        let channel = rng.gen_range(0..channels);
        let a = Rect::new(rng.gen_range(0..=width - w), rng.gen_range(0..=height - h), w, h);
        let b = if attempts % 2 == 1 {
            let mirrored = Rect::new(width - a.x as usize - w, a.y as usize, w, h);
            if mirrored == a {
                continue;
            }
            mirrored
        } else {
            let b = Rect::new(rng.gen_range(0..=width - w), rng.gen_range(0..=height - h), w, h);
            let (ca, cb) = (a.center2(), b.center2());
            let d2 = ((ca.0 - cb.0).pow(2) + (ca.1 - cb.1).pow(2)) as f64;
            if d2 < min_d2 {
                continue;
            }
            b
        };
        let spec = FeatureSpec::high(1, channel, a, b);
        if seen.insert(spec) {
            specs.push(spec);
        }
    }
    FeaturePool::new(1, specs)
}

/// Every pixel of every channel, in `(channel, y, x)` order.
pub fn enumerate_pool_conv(geometry: LayerGeometry, layer: usize) -> Result<FeaturePool> {
    if layer < 2 {
        return Err(McfError::Config(format!(
            "convolutional pools start at layer 2, got {layer}"
        )));
    }
    FeaturePool::new(layer, zero_order_specs(layer, geometry))
}

fn zero_order_specs(layer: usize, g: LayerGeometry) -> Vec<FeatureSpec> {
    let mut specs = Vec::with_capacity(g.channels * g.width * g.height);
    for c in 0..g.channels {
        for y in 0..g.height {
            for x in 0..g.width {
                specs.push(FeatureSpec::zero(layer, c, x, y));
            }
        }
    }
    specs
}
