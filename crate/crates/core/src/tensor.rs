//! Dense activation tensors and the forward/backward kernels of the network
//! trunk: 3×3 same-size convolution, rectification and 2×2 pooling.
//!
//! Gradients are only ever taken with respect to activations; weights are
//! fixed. All arithmetic is `f64`. Each output element is accumulated in a
//! fixed order (input channel, kernel row, kernel column), so results are
//! bit-reproducible no matter how many worker threads run the outer loops.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// A `channels × height × width` block of activations stored channel-major,
/// then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "tensor {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(channel, row, col)` at every element.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial positions per channel (`M_l` in the vectorized view).
    pub fn spatial_len(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    /// One channel as a flat row-major slice (a row of the `N × M` matrix view).
    pub fn plane(&self, c: usize) -> &[f64] {
        let m = self.spatial_len();
        &self.data[c * m..(c + 1) * m]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let m = self.spatial_len();
        &mut self.data[c * m..(c + 1) * m]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &FeatureTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn dot(&self, other: &FeatureTensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self += alpha * other`; shapes must agree.
    pub fn axpy(&mut self, alpha: f64, other: &FeatureTensor) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Dimension(format!(
                "cannot accumulate {:?} into {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Weights of one 3×3 convolution: `out × in × 3 × 3` kernel values
/// (output-major, then input channel, then row, then column) and one bias
/// per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    out_channels: usize,
    in_channels: usize,
    kernel: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvWeights {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if kernel.len() != out_channels * in_channels * 9 {
            return Err(Error::Dimension(format!(
                "kernel for {out_channels}x{in_channels}x3x3 needs {} values, got {}",
                out_channels * in_channels * 9,
                kernel.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::Dimension(format!(
                "bias needs {out_channels} values, got {}",
                bias.len()
            )));
        }
        if !kernel.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(Error::Validation("non-finite convolution weight".into()));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut [f64] {
        &mut self.kernel
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    pub fn index(&self, o: usize, c: usize, dy: usize, dx: usize) -> usize {
        ((o * self.in_channels + c) * 3 + dy) * 3 + dx
    }

    pub fn tap(&self, o: usize, c: usize, dy: usize, dx: usize) -> f64 {
        self.kernel[self.index(o, c, dy, dx)]
    }

    pub fn set_tap(&mut self, o: usize, c: usize, dy: usize, dx: usize, value: f64) {
        let i = self.index(o, c, dy, dx);
        self.kernel[i] = value;
    }

    /// The nine taps connecting input channel `c` to output channel `o`.
    pub fn taps(&self, o: usize, c: usize) -> &[f64] {
        let start = self.index(o, c, 0, 0);
        &self.kernel[start..start + 9]
    }

    pub fn taps_mut(&mut self, o: usize, c: usize) -> &mut [f64] {
        let start = self.index(o, c, 0, 0);
        &mut self.kernel[start..start + 9]
    }
}

/// Output positions computed per GEMM call. Fixed, so the blocking (and with
/// it every rounding) is the same whatever the number of worker threads.
const BLOCK_POSITIONS: usize = 2048;

/// Writes the 3×3 neighbourhoods of rows `y0..y0 + rows` of `input` as the
/// columns of `cols`, a row-major `(C·9) × (rows·W)` matrix whose row
/// `c·9 + dy·3 + dx` holds `input[c][y + dy − 1][x + dx − 1]` (zero outside).
fn im2col(input: &FeatureTensor, y0: usize, rows: usize, cols: &mut [f64]) {
    let (h, w) = (input.height, input.width);
    let p = rows * w;
    debug_assert_eq!(cols.len(), input.channels * 9 * p);
    for c in 0..input.channels {
        let src = input.plane(c);
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &mut cols[((c * 3 + dy) * 3 + dx) * p..][..p];
                for r in 0..rows {
                    let dst = &mut row[r * w..(r + 1) * w];
                    let sy = (y0 + r + dy) as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let line = &src[sy as usize * w..(sy as usize + 1) * w];
                    // dst[x] = line[x + dx - 1]
                    match dx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&line[..w - 1]);
                        }
                        1 => dst.copy_from_slice(line),
                        _ => {
                            dst[..w - 1].copy_from_slice(&line[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// `out = matrix · im2col(input)` for a row-major `out_channels × (C·9)`
/// matrix, plus `bias` per output channel.
fn conv_gemm(input: &FeatureTensor, matrix: &[f64], out_channels: usize, bias: Option<&[f64]>) -> FeatureTensor {
    let (h, w) = (input.height, input.width);
    let m = h * w;
    let depth = input.channels * 9;
    debug_assert_eq!(matrix.len(), out_channels * depth);
    let rows_per_block = (BLOCK_POSITIONS / w).max(1);
    let blocks: Vec<(usize, usize)> = (0..h)
        .step_by(rows_per_block)
        .map(|y0| (y0, rows_per_block.min(h - y0)))
        .collect();
    let results: Vec<Vec<f64>> = blocks
        .par_iter()
        .map(|&(y0, rows)| {
            let p = rows * w;
            let mut cols = vec![0.0; depth * p];
            im2col(input, y0, rows, &mut cols);
            let mut block = vec![0.0; out_channels * p];
            // SAFETY: every slice is exactly as long as the dimensions and
            // row-major strides passed alongside it.
            unsafe {
                matrixmultiply::dgemm(
                    out_channels,
                    depth,
                    p,
                    1.0,
                    matrix.as_ptr(),
                    depth as isize,
                    1,
                    cols.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    block.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            block
        })
        .collect();
    let mut out = FeatureTensor::zeros(out_channels, h, w);
    for (&(y0, rows), block) in blocks.iter().zip(&results) {
        let p = rows * w;
        for o in 0..out_channels {
            let dst = &mut out.data[o * m + y0 * w..][..p];
            let b = bias.map_or(0.0, |b| b[o]);
            for (d, v) in dst.iter_mut().zip(&block[o * p..(o + 1) * p]) {
                *d = v + b;
            }
        }
    }
    out
}

/// Same-size 3×3 convolution with one pixel of zero padding and stride one.
pub fn conv3x3_forward(input: &FeatureTensor, w: &ConvWeights) -> Result<FeatureTensor> {
    if input.channels != w.in_channels {
        return Err(Error::Dimension(format!(
            "convolution expects {} input channels, got {}",
            w.in_channels, input.channels
        )));
    }
    if input.height == 0 || input.width == 0 {
        return Err(Error::Dimension("convolution input has zero size".into()));
    }
    Ok(conv_gemm(input, &w.kernel, w.out_channels, Some(&w.bias)))
}

/// Pulls a gradient with respect to the convolution output back to its
/// input: a same-size convolution of the gradient with the transposed,
/// spatially flipped kernels. The bias does not contribute.
pub fn conv3x3_backward_input(grad_out: &FeatureTensor, w: &ConvWeights) -> Result<FeatureTensor> {
    if grad_out.channels != w.out_channels {
        return Err(Error::Dimension(format!(
            "convolution gradient expects {} channels, got {}",
            w.out_channels, grad_out.channels
        )));
    }
    if grad_out.height == 0 || grad_out.width == 0 {
        return Ok(FeatureTensor::zeros(w.in_channels, grad_out.height, grad_out.width));
    }
    // flipped[c][o·9 + t] = kernel[o][c][8 − t]
    let depth = w.out_channels * 9;
    let mut flipped = vec![0.0; w.in_channels * depth];
    for o in 0..w.out_channels {
        for c in 0..w.in_channels {
            let taps = w.taps(o, c);
            let dst = &mut flipped[c * depth + o * 9..][..9];
            for t in 0..9 {
                dst[t] = taps[8 - t];
            }
        }
    }
    Ok(conv_gemm(grad_out, &flipped, w.in_channels, None))
}

pub fn relu_forward(input: &FeatureTensor) -> FeatureTensor {
    let mut out = input.clone();
    for v in &mut out.data {
        *v = v.max(0.0);
    }
    out
}

/// Gates `grad_out` by `preactivation > 0`; the gradient at exactly zero is zero.
pub fn relu_backward(grad_out: &FeatureTensor, preactivation: &FeatureTensor) -> Result<FeatureTensor> {
    if !grad_out.same_shape(preactivation) {
        return Err(Error::Dimension(format!(
            "relu gradient shape {:?} does not match preactivation {:?}",
            grad_out.shape(),
            preactivation.shape()
        )));
    }
    let data = grad_out
        .data
        .iter()
        .zip(&preactivation.data)
        .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
        .collect();
    FeatureTensor::from_vec(grad_out.channels, grad_out.height, grad_out.width, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Avg,
    Max,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(PoolMode::Avg),
            "max" => Ok(PoolMode::Max),
            other => Err(Error::Validation(format!(
                "unknown pooling mode {other:?} (expected avg or max)"
            ))),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Avg => "avg",
            PoolMode::Max => "max",
        })
    }
}

/// What the pooling backward pass needs from the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolContext {
    Avg {
        channels: usize,
        in_height: usize,
        in_width: usize,
    },
    /// `argmax` holds, per output element, the winning cell (0..4, row-major)
    /// inside its 2×2 window.
    Max {
        channels: usize,
        in_height: usize,
        in_width: usize,
        argmax: Vec<u8>,
    },
}

impl PoolContext {
    pub fn mode(&self) -> PoolMode {
        match self {
            PoolContext::Avg { .. } => PoolMode::Avg,
            PoolContext::Max { .. } => PoolMode::Max,
        }
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        match *self {
            PoolContext::Avg {
                channels,
                in_height,
                in_width,
            }
            | PoolContext::Max {
                channels,
                in_height,
                in_width,
                ..
            } => (channels, in_height, in_width),
        }
    }
}

/// Non-overlapping 2×2 pooling. Odd spatial sizes are rejected rather than
/// cropped.
pub fn pool2x2_forward(input: &FeatureTensor, mode: PoolMode) -> Result<(FeatureTensor, PoolContext)> {
    let (ch, h, w) = input.shape();
    if ch == 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "cannot pool a zero-sized tensor {ch}x{h}x{w}"
        )));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Validation(format!(
            "2x2 pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = FeatureTensor::zeros(ch, oh, ow);
    let mut argmax = match mode {
        PoolMode::Max => vec![0u8; ch * oh * ow],
        PoolMode::Avg => Vec::new(),
    };
    for c in 0..ch {
        let src = input.plane(c);
        for y in 0..oh {
            for x in 0..ow {
                let r0 = 2 * y * w + 2 * x;
                let r1 = r0 + w;
                let window = [src[r0], src[r0 + 1], src[r1], src[r1 + 1]];
                let oi = (c * oh + y) * ow + x;
                out.data[oi] = match mode {
                    PoolMode::Avg => (window[0] + window[1] + window[2] + window[3]) * 0.25,
                    PoolMode::Max => {
                        // First maximum in scan order wins ties.
                        let mut best = 0;
                        for k in 1..4 {
                            if window[k] > window[best] {
                                best = k;
                            }
                        }
                        argmax[oi] = best as u8;
                        window[best]
                    }
                };
            }
        }
    }
    let ctx = match mode {
        PoolMode::Avg => PoolContext::Avg {
            channels: ch,
            in_height: h,
            in_width: w,
        },
        PoolMode::Max => PoolContext::Max {
            channels: ch,
            in_height: h,
            in_width: w,
            argmax,
        },
    };
    Ok((out, ctx))
}

/// Adjoint of [`pool2x2_forward`].
pub fn pool2x2_backward(grad_out: &FeatureTensor, ctx: &PoolContext, mode: PoolMode) -> Result<FeatureTensor> {
    if ctx.mode() != mode {
        return Err(Error::Usage(format!(
            "pool context was recorded in {} mode but backward requested {mode}",
            ctx.mode()
        )));
    }
    let (ch, h, w) = ctx.input_shape();
    if grad_out.shape() != (ch, h / 2, w / 2) {
        return Err(Error::Dimension(format!(
            "pool gradient shape {:?} does not match pooled shape {:?}",
            grad_out.shape(),
            (ch, h / 2, w / 2)
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut grad_in = FeatureTensor::zeros(ch, h, w);
    for c in 0..ch {
        for y in 0..oh {
            for x in 0..ow {
                let oi = (c * oh + y) * ow + x;
                let g = grad_out.data[oi];
                let base = (c * h + 2 * y) * w + 2 * x;
                let cells = [base, base + 1, base + w, base + w + 1];
                match ctx {
                    PoolContext::Avg { .. } => {
                        for cell in cells {
                            grad_in.data[cell] = 0.25 * g;
                        }
                    }
                    PoolContext::Max { argmax, .. } => {
                        grad_in.data[cells[argmax[oi] as usize]] = g;
                    }
                }
            }
        }
    }
    Ok(grad_in)
}
