//! UGDC: a U-Net whose selected stages use a GDC block as their second layer.
//!
//! Stage identifiers are `enc0..enc{depth-1}`, `bottleneck` and
//! `dec{depth-1}..dec0`. Level `l` has `base * 2^l` channels. Each stage is
//! `conv3x3 -> leaky-relu -> (conv3x3 | GDC) -> leaky-relu`; the decoder
//! upsamples (nearest), concatenates the matching encoder output and then runs
//! its stage. A 1x1 head maps back to three channels, followed by a sigmoid
//! (or `tanh` for the residual enhancing model).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conv::ConvSpec;
use crate::error::{shape_err, Error, Result};
use crate::gdc::{gdc_flops, gdc_forward, init_conv, GdcConfig, GdcParams};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// GDC hyperparameters shared by every GDC stage; channel counts come from
/// the stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdcSettings {
    pub grid: (usize, usize),
    pub embed: usize,
    pub key_kernel: usize,
    pub query_kernel: usize,
    pub out_kernel: usize,
}

impl Default for GdcSettings {
    fn default() -> Self {
        Self { grid: (8, 8), embed: 32, key_kernel: 1, query_kernel: 3, out_kernel: 1 }
    }
}

impl GdcSettings {
    pub fn for_channels(&self, in_channels: usize, out_channels: usize) -> GdcConfig {
        GdcConfig {
            grid: self.grid,
            embed: self.embed,
            in_channels,
            out_channels,
            key_kernel: self.key_kernel,
            query_kernel: self.query_kernel,
            out_kernel: self.out_kernel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UgdcConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Stages whose second convolution is a GDC block. Empty = plain U-Net.
    pub gdc_stages: Vec<String>,
    pub gdc: GdcSettings,
}

impl Default for UgdcConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            in_channels: 3,
            out_channels: 3,
            gdc_stages: vec!["bottleneck".into()],
            gdc: GdcSettings::default(),
        }
    }
}

impl UgdcConfig {
    pub fn plain(&self) -> Self {
        Self { gdc_stages: Vec::new(), ..self.clone() }
    }

    pub fn stage_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = (0..self.depth).map(|l| format!("enc{l}")).collect();
        ids.push("bottleneck".into());
        ids.extend((0..self.depth).rev().map(|l| format!("dec{l}")));
        ids
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("channel counts must be positive: {self:?}")));
        }
        if self.depth > 16 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        let ids = self.stage_ids();
        for s in &self.gdc_stages {
            if !ids.contains(s) {
                return Err(Error::Config(format!("unknown gdc stage {s:?}; valid: {}", ids.join(", "))));
            }
        }
        if !self.gdc_stages.is_empty() {
            self.gdc.for_channels(1, 1).validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Stage plan in execution order: `(id, in_channels, out_channels, level)`.
    fn plan(&self) -> Vec<(String, usize, usize, usize)> {
        let mut plan = Vec::new();
        let mut prev = self.in_channels;
        for l in 0..self.depth {
            plan.push((format!("enc{l}"), prev, self.channels(l), l));
            prev = self.channels(l);
        }
        plan.push(("bottleneck".into(), prev, self.channels(self.depth), self.depth));
        for l in (0..self.depth).rev() {
            plan.push((format!("dec{l}"), self.channels(l + 1) + self.channels(l), self.channels(l), l));
        }
        plan
    }

    fn uses_gdc(&self, stage: &str) -> bool {
        self.gdc_stages.iter().any(|s| s == stage)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return shape_err(format!("model input must be NCHW, got {shape:?}"));
        };
        let m = 1usize << self.depth;
        if c != self.in_channels || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return shape_err(format!(
                "model input {shape:?}: need {} channels and extents divisible by {m}",
                self.in_channels
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmMode {
    Direct,
    Residual,
}

impl FromStr for EmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "residual" => Ok(Self::Residual),
            _ => Err(Error::Config(format!("unknown EM mode {s:?} (direct|residual)"))),
        }
    }
}

/// Which slot of the pipeline a network fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Troublemaker,
    Predictor,
    Enhancer(EmMode),
}

impl Role {
    pub fn tag(&self) -> &'static str {
        match self {
            Role::Troublemaker => "tm",
            Role::Predictor => "pm",
            Role::Enhancer(EmMode::Direct) => "em-direct",
            Role::Enhancer(EmMode::Residual) => "em-residual",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tm" => Ok(Role::Troublemaker),
            "pm" => Ok(Role::Predictor),
            "em-direct" => Ok(Role::Enhancer(EmMode::Direct)),
            "em-residual" => Ok(Role::Enhancer(EmMode::Residual)),
            _ => Err(Error::Config(format!("unknown model role {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    role: Role,
    config: UgdcConfig,
    params: Vec<NamedParam<T>>,
    frozen: bool,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialisation from `rng`. The residual enhancer starts
    /// with a zero head, so it initially predicts a zero residual.
    pub fn build(role: Role, config: &UgdcConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let push_conv = |params: &mut Vec<NamedParam<T>>, prefix: &str, spec: &ConvSpec, rng: &mut Rng| -> Result<()> {
            let (w, b) = init_conv(spec, rng)?;
            params.push(NamedParam { name: format!("{prefix}.weight"), value: w });
            params.push(NamedParam { name: format!("{prefix}.bias"), value: b });
            Ok(())
        };
        for (id, cin, cout, _) in config.plan() {
            push_conv(&mut params, &format!("{id}.conv1"), &ConvSpec::same(cin, cout, 3), rng)?;
            if config.uses_gdc(&id) {
                let gdc = GdcParams::<Tensor<T>>::init(&config.gdc.for_channels(cout, cout), rng)?;
                for (name, value) in GdcParams::<()>::NAMES.iter().zip(gdc.into_vec()) {
                    params.push(NamedParam { name: format!("{id}.gdc.{name}"), value });
                }
            } else {
                push_conv(&mut params, &format!("{id}.conv2"), &ConvSpec::same(cout, cout, 3), rng)?;
            }
        }
        let head = ConvSpec::same(config.base_channels, config.out_channels, 1);
        push_conv(&mut params, "head", &head, rng)?;
        if role == Role::Enhancer(EmMode::Residual) {
            for p in params.iter_mut().rev().take(2) {
                p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
        Ok(Self { role, config: config.clone(), params, frozen: false })
    }

    /// Reassembles a model from stored parameters, checking names and shapes
    /// against a freshly planned layout.
    pub fn from_params(role: Role, config: &UgdcConfig, params: Vec<NamedParam<T>>) -> Result<Self> {
        let template = Self::build(role, config, &mut Rng::new(0))?;
        if template.params.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: config expects {} tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(&params) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(Self { role, config: config.clone(), params, frozen: false })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &UgdcConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut [NamedParam<T>]> {
        if self.frozen {
            return Err(Error::Contract(format!("{} is frozen; its parameters cannot change", self.role)));
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Raw little-endian bytes of every parameter in order.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * T::WIDTH as usize);
        for p in &self.params {
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Multiply-accumulate count of one forward pass on an `h x w` sample.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let mut total = 0u64;
        for (id, cin, cout, level) in self.config.plan() {
            let (sh, sw) = (h >> level, w >> level);
            total += ConvSpec::same(cin, cout, 3).macs(sh, sw);
            total += if self.config.uses_gdc(&id) {
                gdc_flops(&self.config.gdc.for_channels(cout, cout), sh, sw)
            } else {
                ConvSpec::same(cout, cout, 3).macs(sh, sw)
            };
        }
        total + ConvSpec::same(self.config.base_channels, self.config.out_channels, 1).macs(h, w)
    }

    /// Binds parameters for one forward pass: tape leaves when a tape is given
    /// and the model is trainable, constants otherwise.
    pub fn bind<'t>(&self, tape: Option<&'t Tape<T>>) -> Vec<Var<'t, T>> {
        match tape {
            Some(tape) if !self.frozen => self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
            _ => self.params.iter().map(|p| Var::constant(p.value.clone())).collect(),
        }
    }

    /// Network output after the head activation.
    pub fn forward_bound<'t>(&self, params: &[Var<'t, T>], x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let raw = self.forward_raw(params, x)?;
        Ok(match self.role {
            Role::Enhancer(EmMode::Residual) => raw.tanh(),
            _ => raw.sigmoid(),
        })
    }

    /// Tape-free inference.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let params = self.bind(None);
        let out = self.forward_bound(&params, &Var::constant(x.clone()))?;
        Ok(out.value().clone())
    }

    /// Head output before the final activation.
    pub fn forward_raw<'t>(&self, params: &[Var<'t, T>], x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.config.check_input(x.shape())?;
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!("expected {} bound parameters, got {}", self.params.len(), params.len())));
        }
        let alpha = T::lit(LEAKY_SLOPE);
        let mut cursor = params.iter();
        let mut next = || cursor.next().expect("parameter layout matches plan");
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x.clone();
        for (id, cin, cout, _) in self.config.plan() {
            if id.starts_with("dec") {
                let skip: Var<'t, T> = skips.pop().expect("one skip per decoder stage");
                h = Var::concat_channels(&[&h.upsample2x()?, &skip])?;
            }
            let (w, b) = (next(), next());
            h = h.conv2d(w, b, &ConvSpec::same(cin, cout, 3))?.leaky_relu(alpha);
            h = if self.config.uses_gdc(&id) {
                let bound = GdcParams::from_vec((0..7).map(|_| next().clone()).collect()).expect("seven GDC tensors");
                gdc_forward(&h, &bound, &self.config.gdc.for_channels(cout, cout))?
            } else {
                let (w, b) = (next(), next());
                h.conv2d(w, b, &ConvSpec::same(cout, cout, 3))?
            }
            .leaky_relu(alpha);
            if id.starts_with("enc") {
                skips.push(h.clone());
                h = h.downsample2x()?;
            }
        }
        let (w, b) = (next(), next());
        h.conv2d(w, b, &ConvSpec::same(self.config.base_channels, self.config.out_channels, 1))
    }
}

/// `H = EM(H')` (direct) or `H = clamp(H' - residual, 0, 1)` (residual).
pub fn em_apply<'t, T: Scalar>(em: &Model<T>, params: &[Var<'t, T>], h_prime: &Var<'t, T>) -> Result<Var<'t, T>> {
    match em.role() {
        Role::Enhancer(EmMode::Direct) => em.forward_bound(params, h_prime),
        Role::Enhancer(EmMode::Residual) => {
            let residual = em.forward_bound(params, h_prime)?;
            Ok(h_prime.sub(&residual)?.clamp(T::zero(), T::one()))
        }
        other => Err(Error::Contract(format!("em_apply called with a {other} model"))),
    }
}
