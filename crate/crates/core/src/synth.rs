//! Seeded synthetic pedestrian scenes.
//!
//! Each image is a textured background with clutter and one to three upright,
//! left-right symmetric figures (head, torso, arms, legs) drawn into boxes of
//! exactly 2:1 aspect at one to three times the model window. Difficulty in
//! `[0, 1]` raises noise, clutter and limb jitter and lowers figure contrast.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::channels::MODEL_HEIGHT;
use crate::detector::{iou, BBox};
use crate::error::{McfError, Result};
use crate::eval::{GroundTruth, GtBox, ImageAnnotation};
use crate::image::ImageBuffer;

pub const SYNTH_WIDTH: usize = 320;
pub const SYNTH_HEIGHT: usize = 400;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub image: ImageBuffer,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<SynthImage>,
    pub test: Vec<SynthImage>,
}

pub fn synth_dataset(seed: u64, n_train: usize, n_test: usize, difficulty: f64) -> Result<SynthDataset> {
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(McfError::Config(format!("difficulty {difficulty} outside [0, 1]")));
    }
    let make = |split: u64, n: usize| -> Result<Vec<SynthImage>> {
        (0..n)
            .into_par_iter()
            .map(|i| synth_image(image_seed(seed, split, i as u64), difficulty))
            .collect()
    };
    Ok(SynthDataset {
        train: make(0, n_train)?,
        test: make(1, n_test)?,
    })
}

fn image_seed(seed: u64, split: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the combined key.
    let mut z = seed
        .wrapping_add(split.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

type Rgb = [f32; 3];

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen(), rng.gen(), rng.gen()]
}

pub fn synth_image(seed: u64, difficulty: f64) -> Result<SynthImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (SYNTH_WIDTH, SYNTH_HEIGHT);
    let mut canvas = background(&mut rng, w, h);

    let n_clutter = rng.gen_range(2..5) + (difficulty * 6.0).round() as usize;
    for _ in 0..n_clutter {
        draw_clutter(&mut rng, &mut canvas, w, h);
    }
    let n_decoys = (difficulty * 5.0).round() as usize;
    for _ in 0..n_decoys {
        draw_decoy(&mut rng, &mut canvas, w, h, difficulty);
    }

    let n_people = rng.gen_range(1..=3);
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..50 {
        if boxes.len() == n_people {
            break;
        }
        let scale: f64 = rng.gen_range(1.0..2.9);
        let bh = ((MODEL_HEIGHT as f64 * scale).round() as usize).min(h) & !1;
        let bw = bh / 2;
        let x = rng.gen_range(0..=w - bw);
        let y = rng.gen_range(0..=h - bh);
        let b = BBox::new(x as f64, y as f64, bw as f64, bh as f64);
        if boxes.iter().any(|o| iou(o, &b) > 0.05) {
            continue;
        }
        draw_figure(&mut rng, &mut canvas, w, &b, difficulty, [true; 3]);
        if rng.gen_bool(0.5 * difficulty) {
            occlude(&mut rng, &mut canvas, w, &b);
        }
        boxes.push(b);
    }

    let sigma = 0.015 + 0.05 * difficulty;
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    for v in canvas.iter_mut() {
        let noisy = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0);
        // Same rounding as an 8-bit save followed by a load.
        *v = (noisy as f32 * 255.0).round() / 255.0;
    }
    Ok(SynthImage {
        image: ImageBuffer::new(w, h, canvas)?,
        boxes,
    })
}

/// Smooth color gradient plus a few low-frequency sinusoids.
fn background(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f32> {
    let top = random_color(rng);
    let bottom = random_color(rng);
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.01..0.08),
                rng.gen_range(0.01..0.08),
                rng.gen_range(0.0..6.3),
                rng.gen_range(0.03..0.1),
            )
        })
        .collect();
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..h {
        let t = y as f32 / (h - 1) as f32;
        for x in 0..w {
            let tex: f32 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * x as f32 + fy * y as f32 + ph).sin())
                .sum();
            for c in 0..3 {
                let base = top[c] * (1.0 - t) + bottom[c] * t;
                data[c * plane + y * w + x] = (0.15 + 0.7 * base + tex).clamp(0.0, 1.0);
            }
        }
    }
    data
}

fn blend(canvas: &mut [f32], w: usize, x: usize, y: usize, color: Rgb, alpha: f32) {
    let plane = canvas.len() / 3;
    for c in 0..3 {
        let v = &mut canvas[c * plane + y * w + x];
        *v += (color[c] - *v) * alpha;
    }
}

/// Rectangles, discs and vertical poles.
fn draw_clutter(rng: &mut ChaCha8Rng, canvas: &mut [f32], w: usize, h: usize) {
    let color = random_color(rng);
    match rng.gen_range(0..3) {
        0 => {
            let (rw, rh) = (rng.gen_range(10..90), rng.gen_range(10..90));
            let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
            for y in y0..(y0 + rh).min(h) {
                for x in x0..(x0 + rw).min(w) {
                    blend(canvas, w, x, y, color, 0.8);
                }
            }
        }
        1 => {
            let r = rng.gen_range(6.0..40.0f32);
            let (cx, cy) = (rng.gen_range(0.0..w as f32), rng.gen_range(0.0..h as f32));
            for y in 0..h {
                for x in 0..w {
                    let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                    let a = (r - d + 0.5).clamp(0.0, 1.0);
                    if a > 0.0 {
                        blend(canvas, w, x, y, color, 0.8 * a);
                    }
                }
            }
        }
        _ => {
            let pw = rng.gen_range(3..12);
            let x0 = rng.gen_range(0..w - pw);
            let (y0, y1) = (rng.gen_range(0..h / 2), rng.gen_range(h / 2..h));
            for y in y0..y1 {
                for x in x0..x0 + pw {
                    blend(canvas, w, x, y, color, 0.9);
                }
            }
        }
    }
}

/// Coverage of the figure at box-normalized point `(u, v)`; `u` runs across
/// the box width, `v` down its height.
struct Figure {
    head: (f32, f32, f32, f32),
    torso: (f32, f32, f32, f32),
    shoulder: f32,
    arm_len: f32,
    arm_angle: [f32; 2],
    limb: f32,
    hip: f32,
    leg_len: f32,
    leg_angle: [f32; 2],
}

impl Figure {
    fn random(rng: &mut ChaCha8Rng, difficulty: f64) -> Self {
        let jitter = 0.08 + 0.25 * difficulty as f32;
        let mut j = || rng.gen_range(-jitter..jitter);
        Figure {
            head: (0.5, 0.17, 0.095 + 0.01 * j(), 0.055 + 0.005 * j()),
            torso: (0.33 + 0.02 * j(), 0.24, 0.67 - 0.02 * j(), 0.56),
            shoulder: 0.26,
            arm_len: 0.27,
            arm_angle: [0.12 + 0.3 * j().abs(), 0.12 + 0.3 * j().abs()],
            limb: 0.065,
            hip: 0.55,
            leg_len: 0.36,
            leg_angle: [0.08 + 0.3 * j().abs(), 0.08 + 0.3 * j().abs()],
        }
    }

    /// Returns which part covers `(u, v)`: 1 head, 2 torso or arms, 3 legs.
    fn part(&self, u: f32, v: f32) -> u8 {
        let (hx, hy, rx, ry) = self.head;
        if ((u - hx) / rx).powi(2) + ((v - hy) / ry).powi(2) <= 1.0 {
            return 1;
        }
        let (x0, y0, x1, y1) = self.torso;
        if u >= x0 && u <= x1 && v >= y0 && v <= y1 {
            return 2;
        }
        // Box units are 1 wide and 2 tall, so vertical distances count double.
        for (side, &a) in [-1.0f32, 1.0].iter().zip(&self.arm_angle) {
            let sx = if *side < 0.0 { x0 } else { x1 } - side * self.limb * 0.5;
            let (dx, dy) = (side * a.sin(), a.cos());
            if segment_distance(u, 2.0 * v, sx, 2.0 * self.shoulder, dx, dy, self.arm_len * 2.0) <= self.limb * 0.5 {
                return 2;
            }
        }
        for (side, &a) in [-1.0f32, 1.0].iter().zip(&self.leg_angle) {
            let sx = 0.5 + side * 0.08;
            let (dx, dy) = (side * a.sin(), a.cos());
            if segment_distance(u, 2.0 * v, sx, 2.0 * self.hip, dx, dy, self.leg_len * 2.0) <= self.limb * 0.6 {
                return 3;
            }
        }
        0
    }
}

/// Distance from `(px, py)` to the segment starting at `(sx, sy)` with unit
/// direction `(dx, dy)` and length `len`.
fn segment_distance(px: f32, py: f32, sx: f32, sy: f32, dx: f32, dy: f32, len: f32) -> f32 {
    let t = ((px - sx) * dx + (py - sy) * dy).clamp(0.0, len);
    ((px - sx - t * dx).powi(2) + (py - sy - t * dy).powi(2)).sqrt()
}

/// A figure with one or two body parts missing, somewhere in the image.
fn draw_decoy(rng: &mut ChaCha8Rng, canvas: &mut [f32], w: usize, h: usize, difficulty: f64) {
    let bh = (rng.gen_range(0.8..2.9) * MODEL_HEIGHT as f64).min(h as f64) as usize;
    let bw = bh / 2;
    let b = BBox::new(
        rng.gen_range(0..=w - bw) as f64,
        rng.gen_range(0..=h - bh) as f64,
        bw as f64,
        bh as f64,
    );
    let mut parts = [true; 3];
    let drop = rng.gen_range(0..3);
    parts[drop] = false;
    if rng.gen_bool(0.5) {
        parts[(drop + 1) % 3] = false;
    }
    draw_figure(rng, canvas, w, &b, difficulty, parts);
}

/// Covers the lower part of `b` with a flat block.
fn occlude(rng: &mut ChaCha8Rng, canvas: &mut [f32], w: usize, b: &BBox) {
    let color = random_color(rng);
    let frac = rng.gen_range(0.15..0.35);
    let (x0, x1) = (b.x as usize, (b.x + b.w) as usize);
    let y1 = (b.y + b.h) as usize;
    let y0 = y1 - (frac * b.h) as usize;
    let x_start = (x0 as isize - rng.gen_range(0..b.w as isize / 2)).max(0) as usize;
    let x_end = (x1 + rng.gen_range(0..b.w as usize / 2)).min(w);
    for y in y0..y1 {
        for x in x_start..x_end {
            blend(canvas, w, x, y, color, 0.9);
        }
    }
}

fn draw_figure(rng: &mut ChaCha8Rng, canvas: &mut [f32], w: usize, b: &BBox, difficulty: f64, parts: [bool; 3]) {
    let figure = Figure::random(rng, difficulty);
    let contrast = 1.0 - 0.4 * difficulty as f32;
    let skin = [rng.gen_range(0.55..0.95), rng.gen_range(0.4..0.75), rng.gen_range(0.3..0.6)];
    let colors: [Rgb; 3] = [
        if rng.gen_bool(difficulty) { random_color(rng) } else { skin },
        random_color(rng),
        random_color(rng),
    ];
    let (bx, by, bw, bh) = (b.x as usize, b.y as usize, b.w as usize, b.h as usize);
    // 2x2 supersampling for soft edges.
    for y in by..by + bh {
        for x in bx..bx + bw {
            let mut hits = [0u8; 4];
            for (k, (ox, oy)) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)].iter().enumerate() {
                let u = (x - bx) as f32 + ox;
                let v = (y - by) as f32 + oy;
                hits[k] = figure.part(u / bw as f32, v / bh as f32);
            }
            for part in (1..=3u8).filter(|&p| parts[p as usize - 1]) {
                let n = hits.iter().filter(|&&p| p == part).count();
                if n > 0 {
                    blend(canvas, w, x, y, colors[part as usize - 1], contrast * n as f32 / 4.0);
                }
            }
        }
    }
}

impl SynthDataset {
    /// Writes `train/` and `test/` PNGs plus `train.csv` and `test.csv`
    /// annotations with paths relative to `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, images) in [("train", &self.train), ("test", &self.test)] {
            fs::create_dir_all(dir.join(name))?;
            let gt = ground_truth(name, images);
            for (ann, img) in gt.images.iter().zip(images) {
                img.image.save(dir.join(&ann.path))?;
            }
            fs::write(dir.join(format!("{name}.csv")), gt.to_csv())?;
        }
        Ok(())
    }
}

/// Annotations naming images `<prefix>/img_0000.png` and so on.
pub fn ground_truth(prefix: &str, images: &[SynthImage]) -> GroundTruth {
    GroundTruth {
        images: images
            .iter()
            .enumerate()
            .map(|(i, img)| ImageAnnotation {
                path: format!("{prefix}/img_{i:04}.png"),
                boxes: img.boxes.iter().map(|&bbox| GtBox { bbox, ignore: false }).collect(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = synth_dataset(7, 2, 1, 0.3).unwrap();
        let b = synth_dataset(7, 2, 1, 0.3).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(8, 2, 1, 0.3).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn boxes_are_two_to_one_and_inside() {
        let d = synth_dataset(1, 6, 0, 0.5).unwrap();
        for img in &d.train {
            assert!(!img.boxes.is_empty() && img.boxes.len() <= 3);
            for b in &img.boxes {
                assert_eq!(b.h, 2.0 * b.w);
                assert!(b.h >= MODEL_HEIGHT as f64 && b.h <= 3.0 * MODEL_HEIGHT as f64);
                assert!(b.right() <= SYNTH_WIDTH as f64 && b.bottom() <= SYNTH_HEIGHT as f64);
            }
        }
    }

    #[test]
    fn figure_is_left_right_symmetric_without_jitter() {
        let f = Figure {
            head: (0.5, 0.17, 0.095, 0.055),
            torso: (0.33, 0.24, 0.67, 0.56),
            shoulder: 0.26,
            arm_len: 0.27,
            arm_angle: [0.2, 0.2],
            limb: 0.065,
            hip: 0.55,
            leg_len: 0.36,
            leg_angle: [0.15, 0.15],
        };
        for i in 0..64 {
            for j in 0..128 {
                let (u, v) = ((i as f32 + 0.5) / 64.0, (j as f32 + 0.5) / 128.0);
                assert_eq!(f.part(u, v), f.part(1.0 - u, v), "({i}, {j})");
            }
        }
    }

    #[test]
    fn saved_images_reload_identically() {
        let d = synth_dataset(3, 1, 1, 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let back = ImageBuffer::load(dir.path().join("test/img_0000.png")).unwrap();
        assert_eq!(back, d.test[0].image);
        let gt = crate::eval::load_annotations(dir.path().join("train.csv")).unwrap();
        assert_eq!(gt.images[0].boxes.len(), d.train[0].boxes.len());
    }
}
