//! Global dynamic convolution and the self-attention it imitates.
//!
//! A GDC block turns a pooled summary of its input into `S` per-sample
//! `1x1xE` kernels and convolves them with a projection of the full-resolution
//! input:
//!
//! ```text
//! K' = Conv_k(Patch(X)) + diff        [N, S, E]
//! Q' = Conv_q(X)                      [N, E, H, W]
//! A' = Conv_{K'}(Q')                  [N, S, H, W]
//! Y  = Conv_o(A')                     [N, O, H, W]
//! ```
//!
//! With the pooling grid fixed, every stage is linear in the pixel count.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conv::ConvSpec;
use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GdcConfig {
    /// Pooling grid `(rows, cols)`; `S = rows * cols` dynamic kernels.
    pub grid: (usize, usize),
    /// Kernel depth `E`.
    pub embed: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub key_kernel: usize,
    pub query_kernel: usize,
    pub out_kernel: usize,
}

impl GdcConfig {
    pub fn new(in_channels: usize, out_channels: usize, grid: (usize, usize), embed: usize) -> Self {
        Self { grid, embed, in_channels, out_channels, key_kernel: 1, query_kernel: 3, out_kernel: 1 }
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let kernels_ok = [self.key_kernel, self.query_kernel, self.out_kernel].iter().all(|&k| k % 2 == 1);
        if self.tokens() == 0 || self.embed == 0 || self.in_channels == 0 || self.out_channels == 0 || !kernels_ok {
            return shape_err(format!("invalid GDC config {self:?} (kernels must be odd, extents positive)"));
        }
        Ok(())
    }

    pub fn key_spec(&self) -> ConvSpec {
        ConvSpec::same(self.in_channels, self.embed, self.key_kernel)
    }

    pub fn query_spec(&self) -> ConvSpec {
        ConvSpec::same(self.in_channels, self.embed, self.query_kernel)
    }

    pub fn out_spec(&self) -> ConvSpec {
        ConvSpec::same(self.tokens(), self.out_channels, self.out_kernel)
    }

    pub fn param_count(&self) -> usize {
        self.key_spec().param_count() + self.query_spec().param_count() + self.out_spec().param_count() + self.tokens() * self.embed
    }
}

/// Weights of one GDC block; `P` is a stored tensor or a bound [`Var`].
#[derive(Clone, Debug, PartialEq)]
pub struct GdcParams<P> {
    pub key_weight: P,
    pub key_bias: P,
    pub query_weight: P,
    pub query_bias: P,
    pub out_weight: P,
    pub out_bias: P,
    /// Trainable `[S, E]` offset added to the dynamic kernels.
    pub diff: P,
}

impl<P> GdcParams<P> {
    pub const NAMES: [&'static str; 7] =
        ["key.weight", "key.bias", "query.weight", "query.bias", "out.weight", "out.bias", "diff"];

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> GdcParams<Q> {
        GdcParams {
            key_weight: f(&self.key_weight),
            key_bias: f(&self.key_bias),
            query_weight: f(&self.query_weight),
            query_bias: f(&self.query_bias),
            out_weight: f(&self.out_weight),
            out_bias: f(&self.out_bias),
            diff: f(&self.diff),
        }
    }

    pub fn into_vec(self) -> Vec<P> {
        vec![self.key_weight, self.key_bias, self.query_weight, self.query_bias, self.out_weight, self.out_bias, self.diff]
    }

    pub fn from_vec(v: Vec<P>) -> Option<Self> {
        let [key_weight, key_bias, query_weight, query_bias, out_weight, out_bias, diff]: [P; 7] = v.try_into().ok()?;
        Some(Self { key_weight, key_bias, query_weight, query_bias, out_weight, out_bias, diff })
    }
}

/// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
pub(crate) fn init_conv<T: Scalar>(spec: &ConvSpec, rng: &mut Rng) -> Result<(Tensor<T>, Tensor<T>)> {
    let fan_in = (spec.in_channels * spec.kernel_h * spec.kernel_w) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let w = Tensor::rand_uniform(spec.weight_shape().to_vec(), -bound, bound, rng)?;
    Ok((w, Tensor::zeros([spec.out_channels])?))
}

impl<T: Scalar> GdcParams<Tensor<T>> {
    /// Static convolutions He-initialised; `diff` starts at zero.
    pub fn init(cfg: &GdcConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (key_weight, key_bias) = init_conv(&cfg.key_spec(), rng)?;
        let (query_weight, query_bias) = init_conv(&cfg.query_spec(), rng)?;
        let (out_weight, out_bias) = init_conv(&cfg.out_spec(), rng)?;
        Ok(Self {
            key_weight,
            key_bias,
            query_weight,
            query_bias,
            out_weight,
            out_bias,
            diff: Tensor::zeros([cfg.tokens(), cfg.embed])?,
        })
    }

    pub fn leaves<'t>(&self, tape: &'t Tape<T>) -> GdcParams<Var<'t, T>> {
        self.map(|t| tape.leaf(t.clone()))
    }

    pub fn constants<'t>(&self) -> GdcParams<Var<'t, T>> {
        self.map(|t| Var::constant(t.clone()))
    }
}

/// `[N,C,H,W] -> [N,O,H,W]` through the four GDC stages.
pub fn gdc_forward<'t, T: Scalar>(x: &Var<'t, T>, p: &GdcParams<Var<'t, T>>, cfg: &GdcConfig) -> Result<Var<'t, T>> {
    let kernels = dynamic_kernels(x, p, cfg)?;
    let query = x.conv2d(&p.query_weight, &p.query_bias, &cfg.query_spec())?;
    let map = query.conv2d_dynamic(&kernels)?;
    map.conv2d(&p.out_weight, &p.out_bias, &cfg.out_spec())
}

/// `K' = Conv(Patch(X)) + diff`, flattened to `[N, S, E]`.
pub fn dynamic_kernels<'t, T: Scalar>(x: &Var<'t, T>, p: &GdcParams<Var<'t, T>>, cfg: &GdcConfig) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let &[n, c, h, w] = x.shape() else {
        return shape_err(format!("gdc input must be NCHW, got {:?}", x.shape()));
    };
    if c != cfg.in_channels {
        return shape_err(format!("gdc: input has {c} channels, config expects {}", cfg.in_channels));
    }
    if cfg.grid.0 > h || cfg.grid.1 > w {
        return shape_err(format!("gdc: grid {:?} larger than {h}x{w} input", cfg.grid));
    }
    let pooled = x.patch_pool(cfg.grid)?;
    let keys = pooled.conv2d(&p.key_weight, &p.key_bias, &cfg.key_spec())?;
    let keys = keys.reshape([n, cfg.embed, cfg.tokens()])?.transpose(1, 2)?;
    keys.add_per_sample(&p.diff)
}

/// Multiply-accumulate count of one GDC block on one `h x w` sample.
///
/// Counts the key projection on the pooled grid, the query projection, the
/// dynamic 1x1 convolution and the output projection. Pooling additions and
/// bias adds are not counted.
pub fn gdc_flops(cfg: &GdcConfig, h: usize, w: usize) -> u64 {
    let pixels = (h * w) as u64;
    let key = cfg.key_spec().macs(cfg.grid.0, cfg.grid.1);
    let query = cfg.query_spec().macs(h, w);
    let dynamic = pixels * (cfg.tokens() * cfg.embed) as u64;
    let out = cfg.out_spec().macs(h, w);
    key + query + dynamic + out
}

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d_k)) V` over rows.
pub fn self_attention<'t, T: Scalar>(q: &Var<'t, T>, k: &Var<'t, T>, v: &Var<'t, T>) -> Result<Var<'t, T>> {
    if q.shape().len() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return shape_err(format!("self_attention: Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()));
    }
    let dk = q.shape()[1];
    // scaling Q rather than the scores keeps the extra pass O(S E) instead of O(S^2)
    let scores = q.scale(T::lit(1.0 / (dk as f64).sqrt())).matmul(&k.t()?)?;
    scores.softmax()?.matmul(v)
}

/// The attention map `Q K^T` computed as a dynamic convolution.
///
/// `Q` is laid out as an `E`-channel `h x w` feature map (row `h*W + w` of `Q`
/// becomes pixel `(h, w)`), every row of `K` acts as a `1x1xE` kernel, and the
/// resulting `S`-channel map is flattened back to `[S, S]`.
pub fn attention_map_via_conv<'t, T: Scalar>(q: &Var<'t, T>, k: &Var<'t, T>, map: (usize, usize)) -> Result<Var<'t, T>> {
    let (h, w) = map;
    let &[s, e] = q.shape() else {
        return shape_err(format!("attention_map_via_conv: Q must be [S,E], got {:?}", q.shape()));
    };
    if k.shape() != q.shape() {
        return shape_err(format!("attention_map_via_conv: Q {:?} vs K {:?}", q.shape(), k.shape()));
    }
    if h * w != s {
        return shape_err(format!("attention_map_via_conv: map {h}x{w} does not hold {s} tokens"));
    }
    let feature_map = q.t()?.reshape([1, e, h, w])?;
    let kernels = k.reshape([1, s, e])?;
    let out = feature_map.conv2d_dynamic(&kernels)?;
    out.reshape([s, s])?.t()
}

/// Largest `|A' - Q K^T|` for random `Q, K ~ N(0, 1)` of shape `[tokens, embed]`,
/// with the tokens laid out on the most square map that holds them.
pub fn equivalence_error(tokens: usize, embed: usize, rng: &mut Rng) -> Result<f64> {
    let map = crate::bench::squarest(tokens);
    let q = Tensor::<f32>::randn([tokens, embed], 0.0, 1.0, rng)?;
    let k = Tensor::<f32>::randn([tokens, embed], 0.0, 1.0, rng)?;
    let via_conv = attention_map_via_conv(&Var::constant(q.clone()), &Var::constant(k.clone()), map)?;
    let direct = q.matmul(&k.t()?)?;
    via_conv.value().max_abs_diff(&direct)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(t: Tensor<f64>) -> Var<'static, f64> {
        Var::constant(t)
    }

    #[test]
    fn attention_uniform_when_rows_identical() {
        let q = Tensor::from_vec([3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let k = Tensor::from_vec([3, 2], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let v = Tensor::from_vec([3, 2], vec![1.0, 4.0, 2.0, 5.0, 6.0, 0.0]).unwrap();
        let y = self_attention(&c(q), &c(k), &c(v)).unwrap();
        for row in y.value().data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_token_is_value() {
        let q = Tensor::from_vec([1, 3], vec![0.3, -2.0, 1.0]).unwrap();
        let v = Tensor::from_vec([1, 3], vec![7.0, 8.0, 9.0]).unwrap();
        let y = self_attention(&c(q.clone()), &c(q), &c(v.clone())).unwrap();
        assert_eq!(y.value(), &v);
    }

    #[test]
    fn conv_attention_map_small_cases() {
        let eye = Tensor::from_vec([4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let a = attention_map_via_conv(&c(eye.clone()), &c(eye.clone()), (2, 2)).unwrap();
        assert_eq!(a.value(), &eye);
        let mut rng = Rng::new(3);
        let q = Tensor::randn([6, 3], 0.0, 1.0, &mut rng).unwrap();
        let zero = attention_map_via_conv(&c(q.clone()), &c(Tensor::zeros([6, 3]).unwrap()), (2, 3)).unwrap();
        assert!(zero.value().data().iter().all(|&v| v == 0.0));
        assert!(attention_map_via_conv(&c(q.clone()), &c(q), (2, 2)).is_err());
    }

    #[test]
    fn constant_input_gives_spatially_constant_map() {
        let cfg = GdcConfig::new(3, 5, (2, 2), 4);
        let mut rng = Rng::new(8);
        let mut p = GdcParams::<Tensor<f64>>::init(&cfg, &mut rng).unwrap();
        // pointwise query so zero padding cannot break translation symmetry
        let cfg = GdcConfig { query_kernel: 1, ..cfg };
        p.query_weight = Tensor::randn(cfg.query_spec().weight_shape().to_vec(), 0.0, 1.0, &mut rng).unwrap();
        let x = c(Tensor::full([2, 3, 6, 6], 0.7).unwrap());
        let bound = p.constants();
        let kernels = dynamic_kernels(&x, &bound, &cfg).unwrap();
        let q = x.conv2d(&bound.query_weight, &bound.query_bias, &cfg.query_spec()).unwrap();
        let map = q.conv2d_dynamic(&kernels).unwrap();
        for plane in map.value().data().chunks(36) {
            assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_weights_leave_diff_times_bias() {
        let cfg = GdcConfig::new(2, 3, (2, 2), 3);
        let mut rng = Rng::new(1);
        let mut p = GdcParams::<Tensor<f64>>::init(&cfg, &mut rng).unwrap();
        p.key_weight = Tensor::zeros(p.key_weight.shape().to_vec()).unwrap();
        p.query_weight = Tensor::zeros(p.query_weight.shape().to_vec()).unwrap();
        p.query_bias = Tensor::from_vec([3], vec![0.5, -1.0, 2.0]).unwrap();
        p.diff = Tensor::randn([4, 3], 0.0, 1.0, &mut rng).unwrap();
        let x = c(Tensor::randn([1, 2, 4, 4], 0.0, 1.0, &mut rng).unwrap());
        let bound = p.constants();
        let kernels = dynamic_kernels(&x, &bound, &cfg).unwrap();
        let q = x.conv2d(&bound.query_weight, &bound.query_bias, &cfg.query_spec()).unwrap();
        let map = q.conv2d_dynamic(&kernels).unwrap();
        for s in 0..4 {
            let d = &p.diff.data()[s * 3..s * 3 + 3];
            let expected = d[0] * 0.5 - d[1] + 2.0 * d[2];
            for v in &map.value().data()[s * 16..(s + 1) * 16] {
                assert!((v - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_shape_and_errors() {
        let cfg = GdcConfig::new(4, 6, (2, 3), 5);
        let mut rng = Rng::new(2);
        let p = GdcParams::<Tensor<f32>>::init(&cfg, &mut rng).unwrap();
        let x = Var::constant(Tensor::randn([2, 4, 5, 7], 0.0, 1.0, &mut rng).unwrap());
        let y = gdc_forward(&x, &p.constants(), &cfg).unwrap();
        assert_eq!(y.shape(), &[2, 6, 5, 7]);
        let small = Var::constant(Tensor::zeros([1, 4, 1, 7]).unwrap());
        assert!(gdc_forward(&small, &p.constants(), &cfg).is_err());
        assert_eq!(p.diff.shape(), &[6, 5]);
        assert!(p.diff.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flops_linear_in_pixels() {
        let cfg = GdcConfig::new(8, 8, (8, 8), 32);
        let base = gdc_flops(&cfg, 64, 64) - cfg.key_spec().macs(8, 8);
        let doubled = gdc_flops(&cfg, 64, 128) - cfg.key_spec().macs(8, 8);
        assert_eq!(doubled, 2 * base);
        let pointwise = ConvSpec::same(3, 7, 1);
        assert_eq!(pointwise.macs(10, 12), 10 * 12 * 3 * 7);
    }
}
