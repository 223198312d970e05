//! The per-window multi-layer channel stack and the read-only views that
//! feature evaluation works against.

use std::sync::Arc;

use crate::channels::ChannelStack;
use crate::error::{McfError, Result};
use crate::integral::IntegralStack;

/// Borrowed window into one layer. Coordinates passed to [`LayerRef::get`] and
/// [`LayerRef::rect_sum`] are window-local.
#[derive(Clone, Copy, Debug)]
pub struct LayerRef<'a> {
    stack: &'a ChannelStack,
    integral: Option<&'a IntegralStack>,
    x0: usize,
    y0: usize,
    width: usize,
    height: usize,
}

impl<'a> LayerRef<'a> {
    pub fn new(
        stack: &'a ChannelStack,
        integral: Option<&'a IntegralStack>,
        x0: usize,
        y0: usize,
        width: usize,
        height: usize,
    ) -> Self {
        debug_assert!(x0 + width <= stack.width() && y0 + height <= stack.height());
        LayerRef {
            stack,
            integral,
            x0,
            y0,
            width,
            height,
        }
    }

    pub fn whole(stack: &'a ChannelStack) -> Self {
        LayerRef::new(stack, None, 0, 0, stack.width(), stack.height())
    }

    pub fn channels(&self) -> usize {
        self.stack.channels()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.stack.get(c, self.x0 + x, self.y0 + y)
    }

    /// Rectangle sum, through the summed-area table when the layer has one
    /// and by direct accumulation otherwise.
    #[inline]
    pub fn rect_sum(&self, c: usize, x: usize, y: usize, w: usize, h: usize) -> f64 {
        match self.integral {
            Some(table) => table.rect_sum(c, self.x0 + x, self.y0 + y, w, h),
            None => {
                let plane = self.stack.plane(c);
                let stride = self.stack.width();
                let mut sum = 0.0f64;
                for row in self.y0 + y..self.y0 + y + h {
                    let start = row * stride + self.x0 + x;
                    for v in &plane[start..start + w] {
                        sum += *v as f64;
                    }
                }
                sum
            }
        }
    }
}

/// Anything that can hand out layers for feature evaluation.
pub trait ChannelSource {
    /// Layer `index` (1-based). Fails with a lazy-order error when the layer
    /// has not been computed.
    fn layer(&self, index: usize) -> Result<LayerRef<'_>>;
}

/// Shared layer storage plus the window it exposes.
#[derive(Clone, Debug)]
pub struct LayerData {
    stack: Arc<ChannelStack>,
    integral: Option<Arc<IntegralStack>>,
    x0: usize,
    y0: usize,
    width: usize,
    height: usize,
}

impl LayerData {
    pub fn whole(stack: ChannelStack) -> Self {
        let (width, height) = (stack.width(), stack.height());
        LayerData {
            stack: Arc::new(stack),
            integral: None,
            x0: 0,
            y0: 0,
            width,
            height,
        }
    }

    pub fn whole_with_integral(stack: ChannelStack) -> Self {
        let integral = Arc::new(IntegralStack::new(&stack));
        let mut data = LayerData::whole(stack);
        data.integral = Some(integral);
        data
    }

    pub fn window(
        stack: Arc<ChannelStack>,
        integral: Option<Arc<IntegralStack>>,
        x0: usize,
        y0: usize,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if x0 + width > stack.width() || y0 + height > stack.height() {
            return Err(McfError::InvalidInput(format!(
                "window ({x0}, {y0}, {width}, {height}) outside {}x{} layer",
                stack.width(),
                stack.height()
            )));
        }
        Ok(LayerData {
            stack,
            integral,
            x0,
            y0,
            width,
            height,
        })
    }

    pub fn view(&self) -> LayerRef<'_> {
        LayerRef::new(
            &self.stack,
            self.integral.as_deref(),
            self.x0,
            self.y0,
            self.width,
            self.height,
        )
    }

    pub fn stack(&self) -> &ChannelStack {
        &self.stack
    }

    /// Copies out the visible window as a standalone stack.
    pub fn to_stack(&self) -> ChannelStack {
        self.stack
            .crop(self.x0, self.y0, self.width, self.height)
            .expect("window lies inside its stack")
    }
}

/// Layers `1..=N` for one detection window. Layer 1 is always present; deeper
/// layers appear as the window clears earlier stages.
#[derive(Clone, Debug)]
pub struct MultiLayerChannels {
    window_id: u64,
    layers: Vec<Option<LayerData>>,
}

impl MultiLayerChannels {
    pub fn new(window_id: u64, l1: LayerData, n_layers: usize) -> Self {
        let mut layers = vec![None; n_layers.max(1)];
        layers[0] = Some(l1);
        MultiLayerChannels { window_id, layers }
    }

    pub fn window_id(&self) -> u64 {
        self.window_id
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_populated(&self, index: usize) -> bool {
        index >= 1 && self.layers.get(index - 1).is_some_and(|l| l.is_some())
    }

    pub fn set_layer(&mut self, index: usize, data: LayerData) -> Result<()> {
        if index < 2 || index > self.layers.len() {
            return Err(McfError::InvalidInput(format!(
                "layer {index} outside 2..={}",
                self.layers.len()
            )));
        }
        if !self.is_populated(index - 1) {
            return Err(McfError::LazyOrder { layer: index - 1 });
        }
        self.layers[index - 1] = Some(data);
        Ok(())
    }

    pub fn layer_data(&self, index: usize) -> Option<&LayerData> {
        self.layers.get(index.checked_sub(1)?)?.as_ref()
    }
}

impl ChannelSource for MultiLayerChannels {
    fn layer(&self, index: usize) -> Result<LayerRef<'_>> {
        self.layer_data(index)
            .map(LayerData::view)
            .ok_or(McfError::LazyOrder { layer: index })
    }
}
