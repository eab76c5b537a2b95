//! Central finite differences and the gradient-check suite.
//!
//! Each probe reduces an op's output to a scalar with a fixed random
//! cotangent, `loss = sum(r * op(inputs))`, so that every coordinate carries
//! an O(1) gradient. The analytic gradient is taken from a tape in the scalar
//! type under test; the finite-difference oracle re-runs the same forward in
//! `f64`, where rounding noise is far below the tolerance.

use crate::autograd::{Tape, Var};
use crate::conv::ConvSpec;
use crate::error::Result;
use crate::gdc::{gdc_forward, self_attention, GdcConfig, GdcParams};
use crate::loss::smooth_l1;
use crate::model::{GdcSettings, Model, Role, UgdcConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff<T: Scalar>(f: impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    let coords: Vec<usize> = (0..x.len()).collect();
    let g = finite_diff_at(f, x, h, &coords);
    Tensor::from_vec(x.shape().to_vec(), g).expect("same shape")
}

/// Central differences at selected flat coordinates only.
pub fn finite_diff_at<T: Scalar>(f: impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, h: T, coords: &[usize]) -> Vec<T> {
    let mut probe = x.clone();
    let two_h = h + h;
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / two_h
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// A differentiable computation with fixed inputs, checked coordinate-wise.
pub trait GradProbe {
    fn name(&self) -> &str;
    /// Inputs differentiated by the check, in `f64`.
    fn inputs(&self) -> &[Tensor<f64>];
    /// Scalar loss built from the inputs.
    fn loss<'t, T: Scalar>(&self, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>>;
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst probe.
    pub worst: (usize, usize, f64, f64),
}

impl ProbeReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares the tape gradient in `T` against `f64` central differences at
/// `probes` randomly chosen coordinates spread over all inputs.
pub fn check_probe<T: Scalar, P: GradProbe>(probe: &P, probes: usize, rng: &mut Rng) -> Result<ProbeReport> {
    let inputs = probe.inputs();
    let tape = Tape::<T>::new();
    let leaves: Vec<Var<'_, T>> = inputs.iter().map(|x| tape.leaf(x.cast())).collect();
    let loss = probe.loss(&leaves)?;
    let grads = tape.backward(&loss)?;

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let picks: Vec<(usize, usize)> = if total <= probes {
        inputs.iter().enumerate().flat_map(|(i, x)| (0..x.len()).map(move |j| (i, j))).collect()
    } else {
        // every input gets at least one probe, the rest land proportionally to size
        let mut picks: std::collections::BTreeSet<(usize, usize)> =
            inputs.iter().enumerate().map(|(i, x)| (i, rng.below(x.len()))).collect();
        while picks.len() < probes {
            let mut k = rng.below(total);
            let mut i = 0;
            while k >= inputs[i].len() {
                k -= inputs[i].len();
                i += 1;
            }
            picks.insert((i, k));
        }
        picks.into_iter().collect()
    };

    let h = f64::FD_STEP;
    let mut report = ProbeReport { name: probe.name().to_string(), probes: picks.len(), max_rel_error: 0.0, worst: (0, 0, 0.0, 0.0) };
    for (i, j) in picks {
        let analytic = grads.get(&leaves[i]).map_or(0.0, |g| g.data()[j].as_f64());
        let f = |x: &Tensor<f64>| -> f64 {
            let vars: Vec<Var<'_, f64>> = inputs
                .iter()
                .enumerate()
                .map(|(k, t)| Var::constant(if k == i { x.clone() } else { t.clone() }))
                .collect();
            probe.loss(&vars).and_then(|l| l.value().item()).unwrap_or(f64::NAN)
        };
        let numeric = finite_diff_at(f, &inputs[i], h, &[j])[0];
        let err = relative_error(analytic, numeric);
        if !(err <= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst = (i, j, analytic, numeric);
        }
    }
    Ok(report)
}

/// `sum(r * y)` for a fixed cotangent `r`.
fn project<'t, T: Scalar>(y: &Var<'t, T>, r: &Tensor<f64>) -> Result<Var<'t, T>> {
    Ok(y.mul(&Var::constant(r.cast()))?.sum())
}

/// An operation under test, generic over the scalar type.
pub trait OpUnderTest {
    fn apply<'t, T: Scalar>(&self, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>>;
}

/// `sum(r * op(inputs))` with `r ~ N(0, 1)` drawn once at construction.
pub struct Projected<O> {
    name: String,
    inputs: Vec<Tensor<f64>>,
    cotangent: Tensor<f64>,
    op: O,
}

impl<O: OpUnderTest> Projected<O> {
    pub fn new(name: impl Into<String>, inputs: Vec<Tensor<f64>>, op: O, rng: &mut Rng) -> Result<Self> {
        let consts: Vec<Var<'_, f64>> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
        let shape = op.apply(&consts)?.shape().to_vec();
        let cotangent = Tensor::randn(shape, 0.0, 1.0, rng)?;
        Ok(Self { name: name.into(), inputs, cotangent, op })
    }
}

impl<O: OpUnderTest> GradProbe for Projected<O> {
    fn name(&self) -> &str {
        &self.name
    }

    fn inputs(&self) -> &[Tensor<f64>] {
        &self.inputs
    }

    fn loss<'t, T: Scalar>(&self, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        project(&self.op.apply(inputs)?, &self.cotangent)
    }
}

macro_rules! op_under_test {
    ($name:ident, |$x:ident| $body:expr) => {
        struct $name;
        impl OpUnderTest for $name {
            #[allow(unused_variables)]
            fn apply<'t, T: Scalar>(&self, $x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
                $body
            }
        }
    };
}

op_under_test!(AddOp, |x| x[0].add(&x[1]));
op_under_test!(SubOp, |x| x[0].sub(&x[1]));
op_under_test!(MulOp, |x| x[0].mul(&x[1]));
op_under_test!(ScaleOp, |x| Ok(x[0].scale(T::lit(-1.7))));
op_under_test!(ReluOp, |x| Ok(x[0].relu()));
op_under_test!(LeakyReluOp, |x| Ok(x[0].leaky_relu(T::lit(0.2))));
op_under_test!(SigmoidOp, |x| Ok(x[0].sigmoid()));
op_under_test!(TanhOp, |x| Ok(x[0].tanh()));
op_under_test!(ClampOp, |x| Ok(x[0].clamp(T::zero(), T::one())));
op_under_test!(AddPerSampleOp, |x| x[0].add_per_sample(&x[1]));
op_under_test!(MatMulOp, |x| x[0].matmul(&x[1]));
op_under_test!(LayoutOp, |x| {
    let joined = Var::concat_channels(&[&x[0], &x[1]])?;
    joined.transpose(1, 3)?.reshape([2, 60])
});
op_under_test!(SoftmaxOp, |x| x[0].softmax());
op_under_test!(SumOp, |x| Ok(x[0].sum()));
op_under_test!(MeanOp, |x| x[0].mean());
op_under_test!(DownsampleOp, |x| x[0].downsample2x());
op_under_test!(UpsampleOp, |x| x[0].upsample2x());
op_under_test!(DynamicConvOp, |x| x[0].conv2d_dynamic(&x[1]));
op_under_test!(PatchPoolOp, |x| x[0].patch_pool((3, 2)));
op_under_test!(AttentionOp, |x| self_attention(&x[0], &x[1], &x[2]));
op_under_test!(AttentionMapOp, |x| crate::gdc::attention_map_via_conv(&x[0], &x[1], (2, 3)));
op_under_test!(SmoothL1Op, |x| smooth_l1(&x[0], &x[1]));

struct ConvOp(ConvSpec);
impl OpUnderTest for ConvOp {
    fn apply<'t, T: Scalar>(&self, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        x[0].conv2d(&x[1], &x[2], &self.0)
    }
}

struct GdcOp(GdcConfig);
impl OpUnderTest for GdcOp {
    fn apply<'t, T: Scalar>(&self, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let params = GdcParams::from_vec(x[1..].to_vec()).expect("seven GDC tensors");
        gdc_forward(&x[0], &params, &self.0)
    }
}

struct UgdcOp(UgdcConfig);
impl OpUnderTest for UgdcOp {
    fn apply<'t, T: Scalar>(&self, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let shell = Model::<T>::build(Role::Predictor, &self.0, &mut Rng::new(0))?;
        shell.forward_bound(&x[1..], &x[0])
    }
}

/// Gaussian values pushed at least `gap` away from every point in `kinks`.
fn away_from(shape: &[usize], kinks: &[f64], gap: f64, rng: &mut Rng) -> Result<Tensor<f64>> {
    let mut t = Tensor::<f64>::randn(shape.to_vec(), 0.3, 1.0, rng)?;
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < gap {
                *v = k + if *v >= k { gap } else { -gap };
            }
        }
    }
    Ok(t)
}

fn run<T: Scalar, O: OpUnderTest>(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    op: O,
    probes: usize,
    rng: &mut Rng,
    out: &mut Vec<ProbeReport>,
) -> Result<()> {
    let probe = Projected::new(name, inputs, op, rng)?;
    out.push(check_probe::<T, _>(&probe, probes, rng)?);
    Ok(())
}

/// Small UGDC used by the end-to-end gradient probe: 1x3x16x16 input, GDC in
/// the bottleneck and the outermost decoder stage.
pub fn probe_ugdc_config() -> UgdcConfig {
    UgdcConfig {
        depth: 3,
        base_channels: 4,
        in_channels: 3,
        out_channels: 3,
        gdc_stages: vec!["bottleneck".into(), "dec0".into()],
        gdc: GdcSettings { grid: (2, 2), embed: 4, ..GdcSettings::default() },
    }
}

/// Every differentiable op, checked at `probes` coordinates each.
pub fn gradient_suite<T: Scalar>(seed: u64, probes: usize) -> Result<Vec<ProbeReport>> {
    let mut rng = Rng::new(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    let g = |shape: &[usize], rng: &mut Rng| Tensor::<f64>::randn(shape.to_vec(), 0.0, 1.0, rng);

    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let inputs = vec![g(&[4, 6], rng)?, g(&[4, 6], rng)?];
        match op {
            0 => run::<T, _>(name, inputs, AddOp, probes, rng, &mut out)?,
            1 => run::<T, _>(name, inputs, SubOp, probes, rng, &mut out)?,
            _ => run::<T, _>(name, inputs, MulOp, probes, rng, &mut out)?,
        }
    }
    run::<T, _>("scale", vec![g(&[5, 5], rng)?], ScaleOp, probes, rng, &mut out)?;
    run::<T, _>("relu", vec![away_from(&[5, 6], &[0.0], 0.05, rng)?], ReluOp, probes, rng, &mut out)?;
    run::<T, _>("leaky_relu", vec![away_from(&[5, 6], &[0.0], 0.05, rng)?], LeakyReluOp, probes, rng, &mut out)?;
    run::<T, _>("sigmoid", vec![g(&[5, 6], rng)?], SigmoidOp, probes, rng, &mut out)?;
    run::<T, _>("tanh", vec![g(&[5, 6], rng)?], TanhOp, probes, rng, &mut out)?;
    run::<T, _>("clamp", vec![away_from(&[5, 6], &[0.0, 1.0], 0.05, rng)?], ClampOp, probes, rng, &mut out)?;
    run::<T, _>("add_per_sample", vec![g(&[3, 4, 5], rng)?, g(&[4, 5], rng)?], AddPerSampleOp, probes, rng, &mut out)?;
    run::<T, _>("matmul", vec![g(&[5, 4], rng)?, g(&[4, 3], rng)?], MatMulOp, probes, rng, &mut out)?;
    run::<T, _>("reshape/transpose/concat", vec![g(&[2, 2, 3, 4], rng)?, g(&[2, 3, 3, 4], rng)?], LayoutOp, probes, rng, &mut out)?;
    run::<T, _>("softmax", vec![g(&[4, 8], rng)?], SoftmaxOp, probes, rng, &mut out)?;
    run::<T, _>("sum", vec![g(&[4, 7], rng)?], SumOp, probes, rng, &mut out)?;
    run::<T, _>("mean", vec![g(&[4, 7], rng)?], MeanOp, probes, rng, &mut out)?;

    for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (5, 2, 1)] {
        let spec = ConvSpec { in_channels: 3, out_channels: 4, kernel_h: k, kernel_w: k, stride, padding: pad };
        let inputs = vec![g(&[2, 3, 7, 8], rng)?, g(&spec.weight_shape(), rng)?, g(&[4], rng)?];
        run::<T, _>(&format!("conv2d k{k} s{stride} p{pad}"), inputs, ConvOp(spec), probes, rng, &mut out)?;
    }
    run::<T, _>("conv2d_dynamic", vec![g(&[2, 4, 5, 6], rng)?, g(&[2, 3, 4], rng)?], DynamicConvOp, probes, rng, &mut out)?;
    run::<T, _>("patch_pool", vec![g(&[2, 2, 7, 5], rng)?], PatchPoolOp, probes, rng, &mut out)?;
    run::<T, _>("downsample2x", vec![g(&[2, 2, 4, 6], rng)?], DownsampleOp, probes, rng, &mut out)?;
    run::<T, _>("upsample2x", vec![g(&[2, 2, 3, 2], rng)?], UpsampleOp, probes, rng, &mut out)?;
    run::<T, _>("self_attention", vec![g(&[6, 4], rng)?, g(&[6, 4], rng)?, g(&[6, 4], rng)?], AttentionOp, probes, rng, &mut out)?;
    run::<T, _>("attention_map_via_conv", vec![g(&[6, 4], rng)?, g(&[6, 4], rng)?], AttentionMapOp, probes, rng, &mut out)?;

    let target = g(&[2, 3, 4, 4], rng)?.scale(1.5);
    run::<T, _>("smooth_l1", vec![g(&[2, 3, 4, 4], rng)?, target], SmoothL1Op, probes, rng, &mut out)?;

    let cfg = GdcConfig::new(3, 4, (2, 2), 5);
    let mut params = GdcParams::<Tensor<f64>>::init(&cfg, rng)?;
    // nonzero diff so the offset path is exercised away from its initial value
    params.diff = g(&[cfg.tokens(), cfg.embed], rng)?.scale(0.5);
    let mut inputs = vec![g(&[2, 3, 6, 5], rng)?];
    inputs.extend(params.into_vec());
    run::<T, _>("gdc block", inputs, GdcOp(cfg), probes, rng, &mut out)?;

    let ucfg = probe_ugdc_config();
    let model = Model::<f64>::build(Role::Predictor, &ucfg, rng)?;
    let mut inputs = vec![Tensor::rand_uniform([1, 3, 16, 16], 0.0, 1.0, rng)?];
    inputs.extend(model.params().iter().map(|p| {
        let mut v = p.value.clone();
        // perturb zero-initialised tensors (biases, diff) so every path is generic
        if v.data().iter().all(|&x| x == 0.0) {
            v = Tensor::randn(v.shape().to_vec(), 0.0, 0.1, rng).expect("shape");
        }
        v
    }));
    run::<T, _>("ugdc 1x3x16x16", inputs, UgdcOp(ucfg), probes, rng, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_and_constant() {
        let x = Tensor::from_vec([2], vec![1.0f64, 2.0]).unwrap();
        let g = finite_diff(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-6);
        assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);
        let z = finite_diff(|_| 3.0f32, &x.cast::<f32>(), 1e-3);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
        assert_eq!(relative_error(0.0, 1e-7), 0.1);
    }

    #[test]
    fn softmax_pick_matches_backward() {
        let mut rng = Rng::new(12);
        let x = Tensor::<f64>::randn([8], 0.0, 1.0, &mut rng).unwrap();
        let pick = 3;
        let f = |t: &Tensor<f64>| t.softmax_last().unwrap().data()[pick];
        let numeric = finite_diff(f, &x, 1e-6);
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let mut onehot = Tensor::zeros([8]).unwrap();
        onehot.data_mut()[pick] = 1.0;
        let loss = leaf.softmax().unwrap().mul(&Var::constant(onehot)).unwrap().sum();
        let grads = tape.backward(&loss).unwrap();
        for (a, n) in grads.get(&leaf).unwrap().data().iter().zip(numeric.data()) {
            assert!(relative_error(*a, *n) <= 1e-6);
        }
    }
}
