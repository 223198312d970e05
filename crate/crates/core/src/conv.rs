//! Forward-only convolutional layers that supply layers `L2..LN`.
//!
//! Weights file layout (all integers u32, all reals f32, little-endian):
//! `MCFW`, version, layer count, then per layer
//! `in, out, kh, kw, stride, pad, flags` followed by the kernel
//! (`out x in x kh x kw`) and the bias (`out`). Flag bit 0 enables ReLU and
//! bit 1 enables a 2x2 stride-2 max-pool.
//!
//! Precomputed channel file: `MCFP`, version, layer count, per layer
//! `channels, width, height`, then every layer's planes in order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channels::{read_f32, read_u32, ChannelStack, L1_CHANNELS, MODEL_HEIGHT, MODEL_WIDTH};
use crate::error::{McfError, Result};
use crate::image::ImageBuffer;
use crate::layers::{LayerData, MultiLayerChannels};

const WEIGHTS_MAGIC: &[u8; 4] = b"MCFW";
const WEIGHTS_VERSION: u32 = 1;
const PRECOMPUTED_MAGIC: &[u8; 4] = b"MCFP";
const PRECOMPUTED_VERSION: u32 = 1;

const FLAG_RELU: u32 = 1;
const FLAG_MAX2: u32 = 2;

/// Channel widths of the default five-block backbone.
pub const DEFAULT_WIDTHS: [usize; 5] = [16, 32, 64, 96, 96];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Max2,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(kh, kw)`.
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    pub pool: Pool,
}

impl ConvLayerSpec {
    /// 3x3, stride 1, padding 1, ReLU, 2x2 max-pool.
    pub fn vgg_block(in_channels: usize, out_channels: usize) -> Self {
        ConvLayerSpec {
            in_channels,
            out_channels,
            kernel: (3, 3),
            stride: 1,
            padding: 1,
            activation: Activation::Relu,
            pool: Pool::Max2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(McfError::Config(format!("kernel {kh}x{kw} must have odd sides")));
        }
        if self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(McfError::Config(
                "stride and channel counts must be positive".into(),
            ));
        }
        Ok(())
    }

    fn conv_dims(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let pw = width + 2 * self.padding;
        let ph = height + 2 * self.padding;
        if pw < kw || ph < kh {
            return None;
        }
        Some(((pw - kw) / self.stride + 1, (ph - kh) / self.stride + 1))
    }

    /// Output `(width, height)` for an input of the given size, including pooling.
    pub fn output_dims(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let underflow = || {
            McfError::Config(format!(
                "layer {self:?} underflows on a {width}x{height} input"
            ))
        };
        let (w, h) = self.conv_dims(width, height).ok_or_else(underflow)?;
        let (w, h) = match self.pool {
            Pool::Max2 => (w / 2, h / 2),
            Pool::None => (w, h),
        };
        if w == 0 || h == 0 {
            return Err(underflow());
        }
        Ok((w, h))
    }

    fn flags(&self) -> u32 {
        let mut f = 0;
        if self.activation == Activation::Relu {
            f |= FLAG_RELU;
        }
        if self.pool == Pool::Max2 {
            f |= FLAG_MAX2;
        }
        f
    }

    fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    /// `out x in x kh x kw`, row-major.
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Convolution block list plus the subset of block outputs exported as layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub layers: Vec<ConvLayerSpec>,
    /// Block indices (0-based) whose outputs become `L2, L3, ...` in order.
    pub exports: Vec<usize>,
}

impl BackboneSpec {
    pub fn default_blocks(widths: &[usize]) -> Vec<ConvLayerSpec> {
        let mut in_c = 3;
        widths
            .iter()
            .map(|&out| {
                let spec = ConvLayerSpec::vgg_block(in_c, out);
                in_c = out;
                spec
            })
            .collect()
    }

    /// `(channels, width, height)` of every block output for a model-window crop.
    pub fn block_geometry(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut w, mut h, mut c) = (MODEL_WIDTH, MODEL_HEIGHT, 3);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.in_channels != c {
                return Err(McfError::Config(format!(
                    "block {i} expects {} input channels, previous block gives {c}",
                    layer.in_channels
                )));
            }
            (w, h) = layer.output_dims(w, h)?;
            c = layer.out_channels;
            out.push((c, w, h));
        }
        Ok(out)
    }

    /// `(channels, width, height)` of each exported layer, in layer order.
    pub fn export_geometry(&self) -> Result<Vec<(usize, usize, usize)>> {
        let blocks = self.block_geometry()?;
        self.exports
            .iter()
            .map(|&b| {
                blocks.get(b).copied().ok_or_else(|| {
                    McfError::Config(format!("export {b} beyond {} blocks", blocks.len()))
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let geometry = self.export_geometry()?;
        if self.exports.windows(2).any(|w| w[0] >= w[1]) {
            return Err(McfError::Config("exports must be strictly increasing".into()));
        }
        if geometry
            .windows(2)
            .any(|g| g[1].1 >= g[0].1 || g[1].2 >= g[0].2)
        {
            return Err(McfError::Config(
                "exported layer sizes must strictly decrease".into(),
            ));
        }
        Ok(())
    }
}

/// A loaded backbone: block specs, weights and the export selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    weights: Vec<ConvWeights>,
}

impl Backbone {
    pub fn new(spec: BackboneSpec, weights: Vec<ConvWeights>) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.layers.len() {
            return Err(McfError::Config(format!(
                "{} weight tensors for {} layers",
                weights.len(),
                spec.layers.len()
            )));
        }
        for (i, (layer, w)) in spec.layers.iter().zip(&weights).enumerate() {
            if w.kernel.len() != layer.kernel_len() || w.bias.len() != layer.out_channels {
                return Err(McfError::Load {
                    what: format!("weights of layer {i}"),
                    reason: "tensor shape does not match layer spec".into(),
                });
            }
            if w.kernel.iter().chain(&w.bias).any(|v| !v.is_finite()) {
                return Err(McfError::Load {
                    what: format!("weights of layer {i}"),
                    reason: "non-finite weight".into(),
                });
            }
        }
        Ok(Backbone { spec, weights })
    }

    /// Seeded uniform initialization scaled by `sqrt(6 / fan_in)`, zero bias.
    pub fn random(layers: Vec<ConvLayerSpec>, exports: Vec<usize>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = layers
            .iter()
            .map(|l| {
                let fan_in = (l.in_channels * l.kernel.0 * l.kernel.1) as f32;
                let bound = (6.0 / fan_in).sqrt();
                ConvWeights {
                    kernel: (0..l.kernel_len()).map(|_| rng.gen_range(-bound..bound)).collect(),
                    bias: vec![0.0; l.out_channels],
                }
            })
            .collect();
        Backbone::new(BackboneSpec { layers, exports }, weights)
    }

    /// Default five-block backbone exporting every block.
    pub fn default_random(widths: &[usize], seed: u64) -> Result<Self> {
        let layers = BackboneSpec::default_blocks(widths);
        let exports = (0..layers.len()).collect();
        Backbone::random(layers, exports, seed)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[ConvWeights] {
        &self.weights
    }

    pub fn n_blocks(&self) -> usize {
        self.spec.layers.len()
    }

    pub fn exports(&self) -> &[usize] {
        &self.spec.exports
    }

    pub fn with_exports(mut self, exports: Vec<usize>) -> Result<Self> {
        self.spec.exports = exports;
        self.spec.validate()?;
        Ok(self)
    }

    /// Exports the last `n` blocks, e.g. `n = 1` for the last conv layer only.
    pub fn with_last_exports(self, n: usize) -> Result<Self> {
        let blocks = self.n_blocks();
        if n == 0 || n > blocks {
            return Err(McfError::Config(format!(
                "cannot export the last {n} of {blocks} blocks"
            )));
        }
        self.with_exports((blocks - n..blocks).collect())
    }

    /// SHA-256 over block specs and weights. Independent of the export selection.
    pub fn hash(&self) -> String {
        let mut bytes = Vec::new();
        self.write_weights(&mut bytes).expect("writing to memory");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_weights(&self, mut out: impl Write) -> Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        out.write_all(&(self.spec.layers.len() as u32).to_le_bytes())?;
        for (l, w) in self.spec.layers.iter().zip(&self.weights) {
            for v in [
                l.in_channels as u32,
                l.out_channels as u32,
                l.kernel.0 as u32,
                l.kernel.1 as u32,
                l.stride as u32,
                l.padding as u32,
                l.flags(),
            ] {
                out.write_all(&v.to_le_bytes())?;
            }
            for v in w.kernel.iter().chain(&w.bias) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_weights(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_weights(mut input: impl Read) -> Result<Self> {
        let load_err = |what: String, reason: &str| McfError::Load {
            what,
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(load_err("weights header".into(), "bad magic"));
        }
        let version = read_u32(&mut input)?;
        if version != WEIGHTS_VERSION {
            return Err(load_err(
                "weights header".into(),
                &format!("unsupported version {version}"),
            ));
        }
        let n = read_u32(&mut input)? as usize;
        let mut layers = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let mut f = [0usize; 7];
            for v in f.iter_mut() {
                *v = read_u32(&mut input).map_err(|_| load_err(format!("layer {i}"), "truncated header"))? as usize;
            }
            let [in_channels, out_channels, kh, kw, stride, padding, flags] = f;
            if flags & !(FLAG_RELU | FLAG_MAX2) as usize != 0 {
                return Err(load_err(format!("layer {i}"), "unknown flag bits"));
            }
            let layer = ConvLayerSpec {
                in_channels,
                out_channels,
                kernel: (kh, kw),
                stride,
                padding,
                activation: if flags & FLAG_RELU as usize != 0 {
                    Activation::Relu
                } else {
                    Activation::None
                },
                pool: if flags & FLAG_MAX2 as usize != 0 {
                    Pool::Max2
                } else {
                    Pool::None
                },
            };
            layer
                .validate()
                .map_err(|e| load_err(format!("layer {i}"), &e.to_string()))?;
            let mut read_n = |count: usize| -> Result<Vec<f32>> {
                let mut v = Vec::with_capacity(count);
                for _ in 0..count {
                    let x = read_f32(&mut input)
                        .map_err(|_| load_err(format!("layer {i}"), "truncated tensor"))?;
                    if !x.is_finite() {
                        return Err(load_err(format!("layer {i}"), "non-finite weight"));
                    }
                    v.push(x);
                }
                Ok(v)
            };
            let kernel = read_n(layer.kernel_len())?;
            let bias = read_n(out_channels)?;
            layers.push(layer);
            weights.push(ConvWeights { kernel, bias });
        }
        let exports = (0..n).collect();
        let spec = BackboneSpec { layers, exports };
        for (i, pair) in spec.layers.windows(2).enumerate() {
            if pair[1].in_channels != pair[0].out_channels {
                return Err(load_err(
                    format!("layer {}", i + 1),
                    "input channels do not match previous layer",
                ));
            }
        }
        Backbone::new(spec, weights)
    }

    /// Reads a weights file. Every block is exported until [`Backbone::with_exports`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| McfError::Load {
            what: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Backbone::read_weights(BufReader::new(file))
    }
}

/// Cross-correlation plus bias, then activation and optional 2x2 max-pool.
pub fn forward_layer(
    input: &ChannelStack,
    layer: &ConvLayerSpec,
    weights: &ConvWeights,
) -> Result<ChannelStack> {
    layer.validate()?;
    if input.channels() != layer.in_channels {
        return Err(McfError::Config(format!(
            "layer expects {} input channels, got {}",
            layer.in_channels,
            input.channels()
        )));
    }
    let (w, h) = (input.width(), input.height());
    layer.output_dims(w, h)?;
    let (ow, oh) = layer.conv_dims(w, h).expect("checked by output_dims");
    let (kh, kw) = layer.kernel;
    let (stride, pad) = (layer.stride, layer.padding as isize);
    let mut out = vec![0.0f32; layer.out_channels * ow * oh];
    for (oc, plane) in out.chunks_exact_mut(ow * oh).enumerate() {
        plane.fill(weights.bias[oc]);
        for ic in 0..layer.in_channels {
            let src = input.plane(ic);
            let kbase = (oc * layer.in_channels + ic) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weights.kernel[kbase + ky * kw + kx];
                    let dx = kx as isize - pad;
                    for oy in 0..oh {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            // Columns where 0 <= ox + dx < w.
                            let lo = (-dx).max(0) as usize;
                            let hi = ((w as isize - dx).min(ow as isize)).max(0) as usize;
                            if lo >= hi {
                                continue;
                            }
                            let s0 = (lo as isize + dx) as usize;
                            for (d, s) in dst_row[lo..hi].iter_mut().zip(&src_row[s0..s0 + hi - lo]) {
                                *d += wv * s;
                            }
                        } else {
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * stride) as isize + dx;
                                if ix >= 0 && ix < w as isize {
                                    *d += wv * src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if layer.activation == Activation::Relu {
        for v in out.iter_mut() {
            *v = v.max(0.0);
        }
    }
    let stack = ChannelStack::from_parts(0, layer.out_channels, ow, oh, out);
    Ok(match layer.pool {
        Pool::Max2 => max_pool2(&stack),
        Pool::None => stack,
    })
}

fn max_pool2(input: &ChannelStack) -> ChannelStack {
    let (w, h) = (input.width(), input.height());
    let (pw, ph) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(input.channels() * pw * ph);
    for c in 0..input.channels() {
        let p = input.plane(c);
        for y in 0..ph {
            let r0 = &p[2 * y * w..];
            let r1 = &p[(2 * y + 1) * w..];
            for x in 0..pw {
                out.push(r0[2 * x].max(r0[2 * x + 1]).max(r1[2 * x]).max(r1[2 * x + 1]));
            }
        }
    }
    ChannelStack::from_parts(0, input.channels(), pw, ph, out)
}

/// Converts a model-window RGB crop into the backbone's input stack.
pub fn crop_to_input(crop: &ImageBuffer) -> ChannelStack {
    ChannelStack::from_parts(0, 3, crop.width(), crop.height(), crop.data().to_vec())
}

/// Per-window forward state: the output of the last computed block, so later
/// stages resume instead of recomputing.
#[derive(Clone, Debug)]
pub struct ConvCache {
    next_block: usize,
    current: ChannelStack,
}

impl ConvCache {
    pub fn new(crop: &ImageBuffer) -> Result<Self> {
        if crop.width() != MODEL_WIDTH || crop.height() != MODEL_HEIGHT {
            return Err(McfError::InvalidInput(format!(
                "window crop must be {MODEL_WIDTH}x{MODEL_HEIGHT}, got {}x{}",
                crop.width(),
                crop.height()
            )));
        }
        Ok(ConvCache {
            next_block: 0,
            current: crop_to_input(crop),
        })
    }

    /// Number of blocks already run.
    pub fn blocks_done(&self) -> usize {
        self.next_block
    }

    /// Runs blocks until `block` (0-based) has been computed and returns its output.
    pub fn advance_to(&mut self, backbone: &Backbone, block: usize) -> Result<&ChannelStack> {
        if block >= backbone.n_blocks() {
            return Err(McfError::Config(format!(
                "block {block} beyond {}-block backbone",
                backbone.n_blocks()
            )));
        }
        if block + 1 < self.next_block {
            return Err(McfError::Config(format!(
                "block {block} already passed; cache holds block {}",
                self.next_block - 1
            )));
        }
        while self.next_block <= block {
            let b = self.next_block;
            self.current = forward_layer(&self.current, &backbone.spec.layers[b], &backbone.weights[b])?;
            self.next_block += 1;
        }
        Ok(&self.current)
    }
}

/// Exported feature map for `target_layer` (2..=N) of one window, resuming from
/// `cache`.
pub fn compute_layer_for_window(
    cache: &mut ConvCache,
    backbone: &Backbone,
    target_layer: usize,
) -> Result<ChannelStack> {
    let export = target_layer
        .checked_sub(2)
        .and_then(|i| backbone.exports().get(i))
        .copied()
        .ok_or_else(|| {
            McfError::Config(format!(
                "layer {target_layer} is not exported by a backbone with {} exports",
                backbone.exports().len()
            ))
        })?;
    Ok(cache.advance_to(backbone, export)?.clone().with_layer(target_layer))
}

/// All exported layers for one crop in a single uninterrupted pass.
pub fn forward_all(crop: &ImageBuffer, backbone: &Backbone) -> Result<Vec<ChannelStack>> {
    let mut cache = ConvCache::new(crop)?;
    (0..backbone.exports().len())
        .map(|i| compute_layer_for_window(&mut cache, backbone, i + 2))
        .collect()
}

/// Writes a full multi-layer stack (L1 first) in the precomputed-channel format.
pub fn write_precomputed(layers: &[ChannelStack], mut out: impl Write) -> Result<()> {
    out.write_all(PRECOMPUTED_MAGIC)?;
    out.write_all(&PRECOMPUTED_VERSION.to_le_bytes())?;
    out.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        for v in [l.channels(), l.width(), l.height()] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
    }
    for l in layers {
        for v in l.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads precomputed layers and checks them against the L1 geometry for
/// `shrink` and the backbone's exports.
pub fn read_precomputed(
    mut input: impl Read,
    window_id: u64,
    backbone: &BackboneSpec,
    shrink: usize,
) -> Result<MultiLayerChannels> {
    let ingest_err = |reason: String| McfError::Load {
        what: "precomputed channels".into(),
        reason,
    };
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != PRECOMPUTED_MAGIC {
        return Err(ingest_err("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != PRECOMPUTED_VERSION {
        return Err(ingest_err(format!("unsupported version {version}")));
    }
    let n = read_u32(&mut input)? as usize;
    let mut expected = vec![(L1_CHANNELS, MODEL_WIDTH / shrink, MODEL_HEIGHT / shrink)];
    expected.extend(backbone.export_geometry()?);
    if n != expected.len() {
        return Err(ingest_err(format!(
            "file has {n} layers, backbone binding expects {}",
            expected.len()
        )));
    }
    let mut dims = Vec::with_capacity(n);
    for (i, want) in expected.iter().enumerate() {
        let got = (
            read_u32(&mut input)? as usize,
            read_u32(&mut input)? as usize,
            read_u32(&mut input)? as usize,
        );
        if got != *want {
            return Err(ingest_err(format!(
                "layer {} is {got:?} (channels, width, height), expected {want:?}",
                i + 1
            )));
        }
        dims.push(got);
    }
    let mut stacks = Vec::with_capacity(n);
    for (i, &(c, w, h)) in dims.iter().enumerate() {
        let mut data = Vec::with_capacity(c * w * h);
        for _ in 0..c * w * h {
            data.push(read_f32(&mut input)?);
        }
        stacks.push(ChannelStack::new(i + 1, c, w, h, data)?);
    }
    let mut stacks = stacks.into_iter();
    let l1 = stacks.next().expect("at least one layer");
    let mut channels = MultiLayerChannels::new(window_id, LayerData::whole_with_integral(l1), n);
    for (i, s) in stacks.enumerate() {
        channels.set_layer(i + 2, LayerData::whole(s))?;
    }
    Ok(channels)
}

pub fn ingest_precomputed(
    path: impl AsRef<Path>,
    window_id: u64,
    backbone: &BackboneSpec,
    shrink: usize,
) -> Result<MultiLayerChannels> {
    let file = File::open(path.as_ref())?;
    read_precomputed(BufReader::new(file), window_id, backbone, shrink)
}
