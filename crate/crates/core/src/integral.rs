//! Summed-area tables for O(1) rectangle sums.

use crate::channels::ChannelStack;

/// Summed-area table of one plane: `T(x, y)` is the sum of all pixels with
/// column `< x` and row `< y`, stored as `(width + 1) x (height + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    table: Vec<f64>,
}

impl IntegralImage {
    pub fn new(plane: &[f32], width: usize, height: usize) -> Self {
        assert_eq!(plane.len(), width * height, "plane size mismatch");
        let stride = width + 1;
        let mut table = vec![0.0f64; stride * (height + 1)];
        for y in 0..height {
            let mut row_sum = 0.0f64;
            for x in 0..width {
                row_sum += plane[y * width + x] as f64;
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row_sum;
            }
        }
        IntegralImage {
            width,
            height,
            table,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.table[y * (self.width + 1) + x]
    }

    /// Sum over the `w x h` rectangle with top-left corner `(x, y)`.
    #[inline]
    pub fn rect_sum(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        debug_assert!(x + w <= self.width && y + h <= self.height);
        self.at(x + w, y + h) - self.at(x, y + h) - self.at(x + w, y) + self.at(x, y)
    }
}

/// One summed-area table per plane of a stack.
#[derive(Clone, Debug)]
pub struct IntegralStack {
    planes: Vec<IntegralImage>,
}

impl IntegralStack {
    pub fn new(stack: &ChannelStack) -> Self {
        IntegralStack {
            planes: (0..stack.channels())
                .map(|c| IntegralImage::new(stack.plane(c), stack.width(), stack.height()))
                .collect(),
        }
    }

    #[inline]
    pub fn rect_sum(&self, c: usize, x: usize, y: usize, w: usize, h: usize) -> f64 {
        self.planes[c].rect_sum(x, y, w, h)
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }
}
