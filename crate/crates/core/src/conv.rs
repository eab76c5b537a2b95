//! Spatial operators on NCHW tensors.
//!
//! Convolutions use the cross-correlation convention (no kernel flip) with
//! zero padding. Static convolution lowers each sample to an im2col matrix and
//! a single GEMM; gradients reuse the same lowering.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a static convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding for odd `k`.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self { in_channels, out_channels, kernel_h: k, kernel_w: k, stride: 1, padding: k / 2 }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w + self.out_channels
    }

    /// Output extent along one axis, or `None` when it would be < 1.
    pub fn out_extent(&self, input: usize, k: usize) -> Option<usize> {
        if self.stride == 0 {
            return None;
        }
        let padded = input + 2 * self.padding;
        (padded >= k).then(|| (padded - k) / self.stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.out_extent(h, self.kernel_h)?, self.out_extent(w, self.kernel_w)?))
    }

    /// Multiply-accumulates for one sample at input size `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w).unwrap_or((0, 0));
        (oh * ow) as u64 * (self.out_channels * self.in_channels * self.kernel_h * self.kernel_w) as u64
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return shape_err(format!("degenerate conv spec {self:?}"));
        }
        Ok(())
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

fn dims4<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => shape_err(format!("{what} must be NCHW, got {:?}", x.shape())),
    }
}

/// Element budget of one lowered im2col band in the forward pass. Lowering the
/// whole image at once stops fitting in cache on large inputs and costs more
/// per pixel than the product itself.
const LOWERED_BUDGET: usize = 1 << 16;
/// Narrower bands starve the matrix product.
const MIN_BAND_COLUMNS: usize = 1024;

/// Cache-blocked `dst[j][i] = src[i][j]` for a `rows x cols` source.
fn transpose_into<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const TILE: usize = 32;
    for i0 in (0..rows).step_by(TILE) {
        for j0 in (0..cols).step_by(TILE) {
            for i in i0..(i0 + TILE).min(rows) {
                for j in j0..(j0 + TILE).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.spec.kernel_h * self.spec.kernel_w
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits every in-bounds tap run whose output row lies in `bands` as
    /// `(lowered offset, input offset, length)`. A run covers consecutive
    /// output columns; its input samples are `stride` apart. The lowered
    /// matrix holds only the rows in `bands`.
    fn for_each_run(&self, bands: std::ops::Range<usize>, mut f: impl FnMut(usize, usize, usize)) {
        let (kh, kw, s) = (self.spec.kernel_h, self.spec.kernel_w, self.spec.stride);
        let pad = self.spec.padding;
        let width = bands.len() * self.ow;
        for j in 0..kw {
            // output columns whose tap x = ox*s + j - pad is inside [0, w)
            let ox0 = pad.saturating_sub(j).div_ceil(s);
            let ox1 = if self.w + pad > j { ((self.w + pad - j - 1) / s + 1).min(self.ow) } else { 0 };
            if ox0 >= ox1 {
                continue;
            }
            let x0 = ox0 * s + j - pad;
            for c in 0..self.c {
                for i in 0..kh {
                    let dst = ((c * kh + i) * kw + j) * width;
                    for oy in bands.clone() {
                        let y = (oy * s + i) as isize - pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let src = (c * self.h + y as usize) * self.w + x0;
                        f(dst + (oy - bands.start) * self.ow + ox0, src, ox1 - ox0);
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, sample: &[T], cols: &mut [T]) {
        self.im2col_bands(sample, 0..self.oh, cols);
    }

    fn im2col_bands<T: Scalar>(&self, sample: &[T], bands: std::ops::Range<usize>, cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        let s = self.spec.stride;
        self.for_each_run(bands, |dst, src, len| {
            if s == 1 {
                cols[dst..dst + len].copy_from_slice(&sample[src..src + len]);
            } else {
                for (k, d) in cols[dst..dst + len].iter_mut().enumerate() {
                    *d = sample[src + k * s];
                }
            }
        });
    }

    fn col2im<T: Scalar>(&self, cols: &[T], sample: &mut [T]) {
        let s = self.spec.stride;
        self.for_each_run(0..self.oh, |dst, src, len| {
            if s == 1 {
                for (x, &c) in sample[src..src + len].iter_mut().zip(&cols[dst..dst + len]) {
                    *x += c;
                }
            } else {
                for (k, &c) in cols[dst..dst + len].iter().enumerate() {
                    sample[src + k * s] += c;
                }
            }
        });
    }

    /// Output rows per lowered band, keeping the band near `LOWERED_BUDGET` elements.
    fn band_rows(&self) -> usize {
        let by_budget = LOWERED_BUDGET / (self.rows() * self.ow).max(1);
        let by_width = MIN_BAND_COLUMNS.div_ceil(self.ow.max(1));
        by_budget.max(by_width).clamp(1, self.oh.max(1))
    }
}

fn conv_geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let [_, c, h, wd] = dims4(x, "conv2d input")?;
    if c != spec.in_channels {
        return shape_err(format!("conv2d: input has {c} channels, spec expects {}", spec.in_channels));
    }
    if w.shape() != spec.weight_shape() {
        return shape_err(format!("conv2d: weight {:?}, spec expects {:?}", w.shape(), spec.weight_shape()));
    }
    if b.shape() != [spec.out_channels] {
        return shape_err(format!("conv2d: bias {:?}, expected [{}]", b.shape(), spec.out_channels));
    }
    let Some((oh, ow)) = spec.output_hw(h, wd) else {
        return shape_err(format!("conv2d: non-positive output extent for {h}x{wd} with {spec:?}"));
    };
    Ok(Geometry { c, h, w: wd, oh, ow, spec: *spec })
}

/// Static 2-D convolution, `[N,C,H,W] * [O,C,kh,kw] + [O] -> [N,O,H',W']`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let g = conv_geometry(x, w, b, spec)?;
    let n = x.shape()[0];
    let o = spec.out_channels;
    let (rows, cols) = (g.rows(), g.cols());
    let in_block = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * o * cols];
    let band = g.band_rows();
    let mut scratch = if spec.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * band * g.ow] };
    for s in 0..n {
        let sample = &x.data()[s * in_block..(s + 1) * in_block];
        let dst = &mut out[s * o * cols..(s + 1) * o * cols];
        for (oc, row) in dst.chunks_mut(cols).enumerate() {
            row.iter_mut().for_each(|v| *v = b.data()[oc]);
        }
        if spec.is_pointwise() {
            T::gemm(o, rows, cols, T::one(), w.data(), rows as isize, 1, sample, cols as isize, 1, T::one(), dst, cols as isize, 1);
            continue;
        }
        let mut y0 = 0;
        while y0 < g.oh {
            let y1 = (y0 + band).min(g.oh);
            let width = (y1 - y0) * g.ow;
            let lowered = &mut scratch[..rows * width];
            g.im2col_bands(sample, y0..y1, lowered);
            let start = y0 * g.ow;
            let tail = &mut dst[start..];
            T::gemm(o, rows, width, T::one(), w.data(), rows as isize, 1, lowered, width as isize, 1, T::one(), tail, cols as isize, 1);
            y0 = y1;
        }
    }
    Tensor::from_vec([n, o, g.oh, g.ow], out)
}

struct Conv2dOp {
    spec: ConvSpec,
}

impl<T: Scalar> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[Rc<Tensor<T>>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w, b) = (&inputs[0], &inputs[1], &inputs[2]);
        let g = conv_geometry(x, w, b, &self.spec)?;
        let n = x.shape()[0];
        let o = self.spec.out_channels;
        let (rows, cols) = (g.rows(), g.cols());
        let in_block = g.c * g.h * g.w;
        let pointwise = self.spec.is_pointwise();

        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = needs[1].then(|| vec![T::zero(); w.len()]);
        let mut scratch = vec![T::zero(); if pointwise || dw.is_none() { 0 } else { rows * cols }];
        let mut lowered_t = vec![T::zero(); if dw.is_none() { 0 } else { rows * cols }];
        let mut dcols = vec![T::zero(); if pointwise || dx.is_none() { 0 } else { rows * cols }];

        for s in 0..n {
            let gs = &grad.data()[s * o * cols..(s + 1) * o * cols];
            if let Some(dw) = dw.as_mut() {
                let sample = &x.data()[s * in_block..(s + 1) * in_block];
                let lowered: &[T] = if pointwise {
                    sample
                } else {
                    g.im2col(sample, &mut scratch);
                    &scratch
                };
                // dW += dY [O,P] * cols^T [P,R]; a strided cols^T operand packs
                // far slower than an explicit transpose
                transpose_into(lowered, rows, cols, &mut lowered_t);
                T::gemm(o, cols, rows, T::one(), gs, cols as isize, 1, &lowered_t, rows as isize, 1, T::one(), dw, rows as isize, 1);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * in_block..(s + 1) * in_block];
                // dcols = W^T [R,O] * dY [O,P]
                if pointwise {
                    T::gemm(rows, o, cols, T::one(), w.data(), 1, rows as isize, gs, cols as isize, 1, T::one(), dxs, cols as isize, 1);
                } else {
                    T::gemm(rows, o, cols, T::one(), w.data(), 1, rows as isize, gs, cols as isize, 1, T::zero(), &mut dcols, cols as isize, 1);
                    g.col2im(&dcols, dxs);
                }
            }
        }
        let db = if needs[2] {
            let mut db = vec![T::zero(); o];
            for (i, row) in grad.data().chunks(cols.max(1)).enumerate() {
                db[i % o] += row.iter().copied().sum();
            }
            Some(Tensor::from_vec([o], db)?)
        } else {
            None
        };
        Ok(vec![
            dx.map(|d| Tensor::from_vec(x.shape().to_vec(), d)).transpose()?,
            dw.map(|d| Tensor::from_vec(w.shape().to_vec(), d)).transpose()?,
            db,
        ])
    }
}

/// Per-sample 1x1 dynamic convolution: `out[n,s,p] = sum_e kernels[n,s,e] * x[n,e,p]`.
pub fn conv2d_dynamic<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, e, h, w] = dims4(x, "conv2d_dynamic input")?;
    let [kn, s, ke] = match *kernels.shape() {
        [a, b, c] => [a, b, c],
        _ => return shape_err(format!("dynamic kernels must be [N,S,E], got {:?}", kernels.shape())),
    };
    if kn != n || ke != e {
        return shape_err(format!("conv2d_dynamic: input {:?} vs kernels {:?}", x.shape(), kernels.shape()));
    }
    let p = h * w;
    let mut out = vec![T::zero(); n * s * p];
    for i in 0..n {
        let k = &kernels.data()[i * s * e..(i + 1) * s * e];
        let xs = &x.data()[i * e * p..(i + 1) * e * p];
        T::gemm(s, e, p, T::one(), k, e as isize, 1, xs, p as isize, 1, T::zero(), &mut out[i * s * p..(i + 1) * s * p], p as isize, 1);
    }
    Tensor::from_vec([n, s, h, w], out)
}

struct DynamicConvOp;

impl<T: Scalar> Backward<T> for DynamicConvOp {
    fn name(&self) -> &'static str {
        "conv2d_dynamic"
    }

    fn backward(
        &self,
        inputs: &[Rc<Tensor<T>>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, k) = (&inputs[0], &inputs[1]);
        let [n, e, h, w] = dims4(x, "conv2d_dynamic input")?;
        let s = k.shape()[1];
        let p = h * w;
        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dk = needs[1].then(|| vec![T::zero(); k.len()]);
        for i in 0..n {
            let gi = &grad.data()[i * s * p..(i + 1) * s * p];
            if let Some(dk) = dk.as_mut() {
                let xs = &x.data()[i * e * p..(i + 1) * e * p];
                T::gemm(s, p, e, T::one(), gi, p as isize, 1, xs, 1, p as isize, T::zero(), &mut dk[i * s * e..(i + 1) * s * e], e as isize, 1);
            }
            if let Some(dx) = dx.as_mut() {
                let ki = &k.data()[i * s * e..(i + 1) * s * e];
                T::gemm(e, s, p, T::one(), ki, 1, e as isize, gi, p as isize, 1, T::zero(), &mut dx[i * e * p..(i + 1) * e * p], p as isize, 1);
            }
        }
        Ok(vec![
            dx.map(|d| Tensor::from_vec(x.shape().to_vec(), d)).transpose()?,
            dk.map(|d| Tensor::from_vec(k.shape().to_vec(), d)).transpose()?,
        ])
    }
}

/// Half-open window `[floor(i*len/cells), floor((i+1)*len/cells))`.
pub(crate) fn pool_window(i: usize, len: usize, cells: usize) -> (usize, usize) {
    (i * len / cells, (i + 1) * len / cells)
}

/// Adaptive average pooling to a fixed `(rows, cols)` grid.
pub fn patch_pool<T: Scalar>(x: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(x, "patch_pool input")?;
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return shape_err(format!("patch_pool: grid {gh}x{gw} does not fit {h}x{w}"));
    }
    let mut out = Vec::with_capacity(n * c * gh * gw);
    for plane in x.data().chunks(h * w) {
        for i in 0..gh {
            let (r0, r1) = pool_window(i, h, gh);
            for j in 0..gw {
                let (c0, c1) = pool_window(j, w, gw);
                let mut acc = T::zero();
                for r in r0..r1 {
                    acc += plane[r * w + c0..r * w + c1].iter().copied().sum::<T>();
                }
                out.push(acc / T::from_usize((r1 - r0) * (c1 - c0)).expect("area"));
            }
        }
    }
    Tensor::from_vec([n, c, gh, gw], out)
}

struct PatchPoolOp(usize, usize);

impl<T: Scalar> Backward<T> for PatchPoolOp {
    fn name(&self) -> &'static str {
        "patch_pool"
    }

    fn backward(&self, inputs: &[Rc<Tensor<T>>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let x = &inputs[0];
        let [_, _, h, w] = dims4(x, "patch_pool input")?;
        let (gh, gw) = (self.0, self.1);
        let mut dx = vec![T::zero(); x.len()];
        for (plane, gp) in dx.chunks_mut(h * w).zip(grad.data().chunks(gh * gw)) {
            for i in 0..gh {
                let (r0, r1) = pool_window(i, h, gh);
                for j in 0..gw {
                    let (c0, c1) = pool_window(j, w, gw);
                    let share = gp[i * gw + j] / T::from_usize((r1 - r0) * (c1 - c0)).expect("area");
                    for r in r0..r1 {
                        plane[r * w + c0..r * w + c1].iter_mut().for_each(|v| *v += share);
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_vec(x.shape().to_vec(), dx)?)])
    }
}

/// 2x2 average pooling with stride 2.
pub fn downsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(x, "downsample2x input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("downsample2x needs even extents, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for i in 0..oh {
            let top = &plane[2 * i * w..(2 * i + 1) * w];
            let bottom = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..ow {
                out.push(((top[2 * j] + top[2 * j + 1]) + (bottom[2 * j] + bottom[2 * j + 1])) * quarter);
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(x, "upsample2x input")?;
    let ow = 2 * w;
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    let mut line = Vec::with_capacity(ow);
    for plane in x.data().chunks(h * w) {
        for row in plane.chunks(w) {
            line.clear();
            for &v in row {
                line.push(v);
                line.push(v);
            }
            out.extend_from_slice(&line);
            out.extend_from_slice(&line);
        }
    }
    Tensor::from_vec([n, c, 2 * h, ow], out)
}

struct Downsample2xOp;

impl<T: Scalar> Backward<T> for Downsample2xOp {
    fn name(&self) -> &'static str {
        "downsample2x"
    }

    fn backward(&self, inputs: &[Rc<Tensor<T>>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        // adjoint of 2x2 averaging is nearest upsampling scaled by 1/4
        let up = upsample2x(grad)?.scale(T::lit(0.25));
        debug_assert_eq!(up.shape(), inputs[0].shape());
        Ok(vec![Some(up)])
    }
}

struct Upsample2xOp;

impl<T: Scalar> Backward<T> for Upsample2xOp {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn backward(&self, _: &[Rc<Tensor<T>>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        // adjoint of nearest upsampling is the 2x2 block sum
        Ok(vec![Some(downsample2x(grad)?.scale(T::lit(4.0)))])
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn conv2d(&self, w: &Self, b: &Self, spec: &ConvSpec) -> Result<Self> {
        let out = conv2d(self.value(), w.value(), b.value(), spec)?;
        Ok(Self::record(&[self, w, b], out, Conv2dOp { spec: *spec }))
    }

    pub fn conv2d_dynamic(&self, kernels: &Self) -> Result<Self> {
        let out = conv2d_dynamic(self.value(), kernels.value())?;
        Ok(Self::record(&[self, kernels], out, DynamicConvOp))
    }

    pub fn patch_pool(&self, grid: (usize, usize)) -> Result<Self> {
        let out = patch_pool(self.value(), grid)?;
        Ok(Self::record(&[self], out, PatchPoolOp(grid.0, grid.1)))
    }

    pub fn downsample2x(&self) -> Result<Self> {
        let out = downsample2x(self.value())?;
        Ok(Self::record(&[self], out, Downsample2xOp))
    }

    pub fn upsample2x(&self) -> Result<Self> {
        let out = upsample2x(self.value())?;
        Ok(Self::record(&[self], out, Upsample2xOp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_identity() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f32>::randn([2, 1, 5, 7], 0.0, 1.0, &mut rng).unwrap();
        let spec = ConvSpec::same(1, 1, 1);
        let y = conv2d(&x, &t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_taps() {
        let c = 0.5f32;
        let x = Tensor::full([1, 1, 5, 5], c).unwrap();
        let y = conv2d(&x, &Tensor::ones([1, 1, 3, 3]).unwrap(), &t(&[1], &[0.0]), &ConvSpec::same(1, 1, 3)).unwrap();
        let at = |r: usize, col: usize| y.data()[r * 5 + col];
        assert_eq!(at(2, 2), 9.0 * c);
        assert_eq!(at(0, 0), 4.0 * c);
        assert_eq!(at(4, 4), 4.0 * c);
        assert_eq!(at(0, 2), 6.0 * c);
    }

    #[test]
    fn stride_and_errors() {
        let spec = ConvSpec { in_channels: 1, out_channels: 1, kernel_h: 3, kernel_w: 3, stride: 2, padding: 0 };
        assert_eq!(spec.output_hw(7, 8), Some((3, 3)));
        assert_eq!(spec.output_hw(2, 8), None);
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]).unwrap();
        let w = Tensor::<f32>::zeros([1, 1, 3, 3]).unwrap();
        assert!(conv2d(&x, &w, &t(&[1], &[0.0]), &ConvSpec::same(1, 1, 3)).is_err());
        let tiny = Tensor::<f32>::zeros([1, 1, 2, 2]).unwrap();
        assert!(conv2d(&tiny, &w, &t(&[1], &[0.0]), &spec).is_err());
    }

    #[test]
    fn dynamic_selection_and_matvec() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f32>::randn([1, 3, 2, 2], 0.0, 1.0, &mut rng).unwrap();
        // permutation kernels pick channels 2,0,1
        let k = t(&[1, 3, 3], &[0., 0., 1., 1., 0., 0., 0., 1., 0.]);
        let y = conv2d_dynamic(&x, &k).unwrap();
        let ch = |tensor: &Tensor<f32>, c: usize| tensor.data()[c * 4..(c + 1) * 4].to_vec();
        assert_eq!(ch(&y, 0), ch(&x, 2));
        assert_eq!(ch(&y, 1), ch(&x, 0));
        assert_eq!(ch(&y, 2), ch(&x, 1));

        let x1 = Tensor::<f32>::randn([1, 4, 1, 1], 0.0, 1.0, &mut rng).unwrap();
        let k1 = Tensor::<f32>::randn([1, 5, 4], 0.0, 1.0, &mut rng).unwrap();
        let y1 = conv2d_dynamic(&x1, &k1).unwrap();
        let mv = k1.reshape([5, 4]).unwrap().matmul(&x1.reshape([4, 1]).unwrap()).unwrap();
        assert!(y1.flatten().max_abs_diff(&mv.flatten()).unwrap() <= 1e-6);
        assert!(conv2d_dynamic(&x1, &Tensor::zeros([1, 5, 3]).unwrap()).is_err());
    }

    #[test]
    fn patch_pool_cases() {
        let mut rng = Rng::new(9);
        let x = Tensor::<f32>::randn([1, 2, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(patch_pool(&x, (4, 4)).unwrap(), x);
        let c = Tensor::full([1, 1, 6, 5], 0.3f32).unwrap();
        assert!(patch_pool(&c, (4, 3)).unwrap().data().iter().all(|v| (v - 0.3).abs() < 1e-7));
        let p = patch_pool(&x, (2, 2)).unwrap();
        for ch in 0..2 {
            for bi in 0..2 {
                for bj in 0..2 {
                    let mut acc = 0.0;
                    for r in 0..2 {
                        for q in 0..2 {
                            acc += x.data()[ch * 16 + (2 * bi + r) * 4 + 2 * bj + q];
                        }
                    }
                    assert!((p.data()[ch * 4 + bi * 2 + bj] - acc / 4.0).abs() < 1e-6);
                }
            }
        }
        assert!(patch_pool(&x, (5, 2)).is_err());
    }

    #[test]
    fn up_down_sampling() {
        assert_eq!(upsample2x(&t(&[1, 1, 1, 1], &[1.0])).unwrap().data(), &[1.0; 4]);
        assert_eq!(downsample2x(&t(&[1, 1, 2, 2], &[1., 3., 5., 7.])).unwrap().data(), &[4.0]);
        let mut rng = Rng::new(11);
        let x = Tensor::<f32>::randn([2, 3, 3, 5], 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(downsample2x(&upsample2x(&x).unwrap()).unwrap(), x);
        assert!(downsample2x(&x).is_err());
    }
}
