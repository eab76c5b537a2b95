//! The two training steps and inference.
//!
//! Step 1 fits the troublemaker `TM: normal -> low` on pairs. Step 2 freezes
//! TM, turns every normal image `I` into a pseudo low-light image
//! `PL = TM(I)`, fits the predictor `PM: PL -> I`, then freezes PM and fits the
//! enhancer on `H' = PM(PL)`. Step 2 never sees a real low-light image.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::loss::smooth_l1;
use crate::model::{em_apply, Model, Role, UgdcConfig};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_tm: usize,
    pub epochs_pm: usize,
    pub epochs_em: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    /// Desk scale: batch 4, otherwise the published schedule.
    fn default() -> Self {
        Self { batch_size: 4, ..Self::published() }
    }
}

impl TrainConfig {
    pub fn published() -> Self {
        Self { batch_size: 8, epochs_tm: 15, epochs_pm: 15, epochs_em: 30, seed: 0, optimizer: AdamWConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Tm,
    Pm,
    Em,
}

impl Phase {
    pub fn tag(&self) -> &'static str {
        match self {
            Phase::Tm => "tm",
            Phase::Pm => "pm",
            Phase::Em => "em",
        }
    }

    fn salt(&self) -> u64 {
        match self {
            Phase::Tm => 0x746d,
            Phase::Pm => 0x706d,
            Phase::Em => 0x656d,
        }
    }
}

/// One `phase,epoch,loss` line; `loss` is the sample-weighted mean over the epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{:e}", self.phase.tag(), self.epoch, self.loss)
    }
}

pub fn stack<T: Scalar>(samples: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::Shape("cannot stack zero samples".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.len());
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::Shape(format!("stack mixes {:?} and {:?}", first.shape(), s.shape())));
        }
        data.extend_from_slice(s.data());
    }
    shape[0] *= samples.len();
    Tensor::from_vec(shape, data)
}

/// Runs a model over samples one at a time without recording anything.
fn infer_each<T: Scalar>(model: &Model<T>, xs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    xs.iter().map(|x| model.forward(x)).collect()
}

/// Sets a sigmoid head's bias to the logit of the per-channel mean target, so
/// training starts at the mean image. Starting at 0.5 against dark targets
/// makes every residual the same sign; Adam then moves every layer the same
/// way at once and, without normalisation, the activations blow up until the
/// sigmoid saturates for good.
pub fn init_head_to_mean<T: Scalar>(model: &mut Model<T>, targets: &[Tensor<T>]) -> Result<()> {
    if matches!(model.role(), Role::Enhancer(crate::model::EmMode::Residual)) || targets.is_empty() {
        return Ok(());
    }
    let channels = model.config().out_channels;
    let mut sums = vec![0.0f64; channels];
    let mut count = 0usize;
    for t in targets {
        let plane = t.len() / (t.shape()[0] * channels);
        for (i, chunk) in t.data().chunks(plane).enumerate() {
            sums[i % channels] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        count += t.shape()[0] * plane;
    }
    let params = model.params_mut()?;
    let head = params
        .iter_mut()
        .find(|p| p.name == "head.bias")
        .ok_or_else(|| Error::Contract("model has no head.bias".into()))?;
    for (b, s) in head.value.data_mut().iter_mut().zip(&sums) {
        let m = (s / count as f64).clamp(1e-3, 1.0 - 1e-3);
        *b = T::lit((m / (1.0 - m)).ln());
    }
    Ok(())
}

/// Fits `model` so that `predict(model, inputs[i]) ~ targets[i]` under smooth-L1.
fn fit<T: Scalar>(
    model: &mut Model<T>,
    inputs: &[Tensor<T>],
    targets: &[Tensor<T>],
    phase: Phase,
    epochs: usize,
    cfg: &TrainConfig,
    optimizer: &mut OptimizerState<T>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let mut rng = Rng::new(cfg.seed).fork(phase.salt());
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = stack(&batch.iter().map(|&i| &inputs[i]).collect::<Vec<_>>())?;
            let y = stack(&batch.iter().map(|&i| &targets[i]).collect::<Vec<_>>())?;
            let tape = Tape::new();
            let params = model.bind(Some(&tape));
            let x = Var::constant(x);
            let pred = match phase {
                Phase::Em => em_apply(model, &params, &x)?,
                _ => model.forward_bound(&params, &x)?,
            };
            let loss = smooth_l1(&pred, &Var::constant(y))?;
            let value = loss.value().item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::Domain(format!("{} epoch {epoch}: non-finite loss", phase.tag())));
            }
            total += value * batch.len() as f64;
            let grads = tape.backward(&loss)?;
            let g: Vec<_> = params.iter().map(|p| grads.get(p)).collect();
            optimizer.step(model.params_mut()?, &g, &cfg.optimizer)?;
        }
        let log = EpochLog { phase, epoch, loss: total / inputs.len() as f64 };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

pub struct Trained<T> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub logs: Vec<EpochLog>,
}

/// Step 1: `TM(normal) ~ low`.
pub fn train_tm<T: Scalar>(
    pairs: &[(ImageBuffer, ImageBuffer)],
    model_cfg: &UgdcConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Trained<T>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("troublemaker training needs at least one pair".into()));
    }
    let mut model = Model::build(Role::Troublemaker, model_cfg, &mut Rng::new(cfg.seed).fork(1))?;
    let inputs: Vec<Tensor<T>> = pairs.iter().map(|(n, _)| n.to_tensor()).collect();
    let targets: Vec<Tensor<T>> = pairs.iter().map(|(_, l)| l.to_tensor()).collect();
    init_head_to_mean(&mut model, &targets)?;
    let mut optimizer = OptimizerState::new(model.params())?;
    let logs = fit(&mut model, &inputs, &targets, Phase::Tm, cfg.epochs_tm, cfg, &mut optimizer, on_epoch)?;
    Ok(Trained { model, optimizer, logs })
}

pub struct Step2<T> {
    pub pm: Trained<T>,
    pub em: Option<Trained<T>>,
}

impl<T> Step2<T> {
    pub fn logs(&self) -> Vec<EpochLog> {
        let mut out = self.pm.logs.clone();
        if let Some(em) = &self.em {
            out.extend_from_slice(&em.logs);
        }
        out
    }
}

/// Step 2 on normal-light images only. `em` is `None` to train the predictor
/// alone.
pub fn train_pm_em<T: Scalar>(
    tm: &Model<T>,
    normals: &[ImageBuffer],
    pm_cfg: &UgdcConfig,
    em: Option<(Role, &UgdcConfig)>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Step2<T>> {
    cfg.validate()?;
    if !tm.is_frozen() {
        return Err(Error::Contract("the troublemaker must be frozen before step 2".into()));
    }
    if tm.role() != Role::Troublemaker {
        return Err(Error::Contract(format!("step 2 needs a troublemaker, got a {} model", tm.role())));
    }
    if normals.is_empty() {
        return Err(Error::Config("step 2 needs at least one normal-light image".into()));
    }
    let targets: Vec<Tensor<T>> = normals.iter().map(|img| img.to_tensor()).collect();
    // TM is frozen, so its outputs are fixed for the whole step
    let pseudo_low = infer_each(tm, &targets)?;

    let mut pm = Model::build(Role::Predictor, pm_cfg, &mut Rng::new(cfg.seed).fork(2))?;
    init_head_to_mean(&mut pm, &targets)?;
    let mut pm_opt = OptimizerState::new(pm.params())?;
    let pm_logs = fit(&mut pm, &pseudo_low, &targets, Phase::Pm, cfg.epochs_pm, cfg, &mut pm_opt, on_epoch)?;
    pm.freeze();
    let pm = Trained { model: pm, optimizer: pm_opt, logs: pm_logs };

    let em = match em {
        None => None,
        Some((role, em_cfg)) => {
            if !matches!(role, Role::Enhancer(_)) {
                return Err(Error::Contract(format!("enhancer phase given a {role} role")));
            }
            let h_prime = infer_each(&pm.model, &pseudo_low)?;
            let mut em = Model::build(role, em_cfg, &mut Rng::new(cfg.seed).fork(3))?;
            init_head_to_mean(&mut em, &targets)?;
            let mut em_opt = OptimizerState::new(em.params())?;
            let logs = fit(&mut em, &h_prime, &targets, Phase::Em, cfg.epochs_em, cfg, &mut em_opt, on_epoch)?;
            Some(Trained { model: em, optimizer: em_opt, logs })
        }
    };
    Ok(Step2 { pm, em })
}

pub struct Enhanced {
    pub image: ImageBuffer,
    /// `|H' - H|` averaged over channels and scaled so its maximum is 1.
    pub residual: Option<ImageBuffer>,
}

/// `H = em_apply(EM, PM(low))`, or `PM(low)` without an enhancer.
///
/// Inputs whose sides are not multiples of `2^depth` are reflect-padded on
/// the right and bottom and the result is cropped back.
pub fn enhance<T: Scalar>(pm: &Model<T>, em: Option<&Model<T>>, low: &ImageBuffer, residual_map: bool) -> Result<Enhanced> {
    let depth = em.map_or(0, |e| e.config().depth).max(pm.config().depth);
    let padded = low.pad_reflect_to(1 << depth);
    let h_prime = pm.forward(&padded.to_tensor())?;
    let out = match em {
        None => h_prime.clone(),
        Some(em) => em_apply(em, &em.bind(None), &Var::constant(h_prime.clone()))?.value().clamp(T::zero(), T::one()),
    };
    let crop = |t: &Tensor<T>| ImageBuffer::from_tensor(t, 0)?.crop(low.width(), low.height());
    let image = crop(&out)?;
    let residual = if residual_map {
        let diff = crop(&h_prime)?.data().iter().zip(image.data()).map(|(a, b)| a - b).collect::<Vec<f32>>();
        let gray: Vec<f32> = diff.chunks(3).map(|p| (p.iter().sum::<f32>() / 3.0).abs()).collect();
        let max = gray.iter().copied().fold(0.0f32, f32::max);
        let data = gray.iter().flat_map(|&g| [if max > 0.0 { g / max } else { 0.0 }; 3]).collect();
        Some(ImageBuffer::new(low.width(), low.height(), data)?)
    } else {
        None
    };
    Ok(Enhanced { image, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EmMode, GdcSettings};

    fn tiny() -> UgdcConfig {
        UgdcConfig { depth: 1, base_channels: 4, gdc: GdcSettings { grid: (2, 2), embed: 4, ..Default::default() }, ..Default::default() }
    }

    fn quick(epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig { epochs_tm: epochs, epochs_pm: epochs, epochs_em: epochs, ..Default::default() };
        cfg.optimizer.lr = 1e-2;
        cfg
    }

    #[test]
    fn defaults_follow_the_published_schedule() {
        let p = TrainConfig::published();
        assert_eq!((p.batch_size, p.epochs_tm, p.epochs_pm, p.epochs_em), (8, 15, 15, 30));
        assert_eq!(p.optimizer.lr, 4e-5);
        assert_eq!(TrainConfig::default().batch_size, 4);
    }

    #[test]
    fn empty_pairs_is_config_error() {
        let r = train_tm::<f32>(&[], &tiny(), &quick(1), &mut |_| {});
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn unfrozen_tm_is_contract_error() {
        let tm = Model::<f32>::build(Role::Troublemaker, &tiny(), &mut Rng::new(0)).unwrap();
        let imgs = [ImageBuffer::filled(4, 4, [0.5; 3])];
        let r = train_pm_em(&tm, &imgs, &tiny(), None, &quick(1), &mut |_| {});
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn single_pair_memorised() {
        let mut rng = Rng::new(3);
        let normal = crate::data::procedural_image(8, 8, &mut rng);
        let low = normal.map(|v| 0.3 * v * v);
        let trained = train_tm::<f32>(&[(normal, low)], &tiny(), &quick(150), &mut |_| {}).unwrap();
        let first = trained.logs[0].loss;
        let last = trained.logs.last().unwrap().loss;
        assert!(trained.logs.iter().all(|l| l.loss.is_finite()));
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn enhance_pads_crops_and_stays_in_range() {
        let cfg = tiny();
        let pm = Model::<f32>::build(Role::Predictor, &cfg, &mut Rng::new(1)).unwrap();
        let em = Model::<f32>::build(Role::Enhancer(EmMode::Residual), &cfg, &mut Rng::new(2)).unwrap();
        let low = crate::data::procedural_image(7, 5, &mut Rng::new(4));
        let out = enhance(&pm, Some(&em), &low, true).unwrap();
        assert_eq!((out.image.width(), out.image.height()), (7, 5));
        assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let alone = enhance(&pm, None, &low, false).unwrap();
        // zero enhancer head: H = H'
        assert_eq!(out.image, alone.image);
        assert!(out.residual.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_line_format() {
        let l = EpochLog { phase: Phase::Pm, epoch: 3, loss: 0.125 };
        assert_eq!(l.to_string(), "pm,3,1.25e-1");
    }
}
