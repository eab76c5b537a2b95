//! Wall-clock scaling benchmark of a GDC block against plain self-attention.
//!
//! Each size is run once untimed, then `repeats` times; the median is kept.
//! The ratio column is the time growth per doubling of `n`, i.e.
//! `(t_i / t_{i-1})^(1 / log2(n_i / n_{i-1}))`, so it reads ~2 for linear and
//! ~4 for quadratic cost whatever the spacing of the sizes.

use std::fmt::Write as _;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::gdc::{gdc_forward, self_attention, GdcConfig, GdcParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Largest attention map (elements of the `n x n` score matrix) we agree to allocate.
pub const ATTENTION_MAP_LIMIT: usize = 1 << 27;
pub const MIN_REPEATS: usize = 5;
/// Channels of the benchmarked GDC block (input and output).
pub const GDC_CHANNELS: usize = 16;
/// Head width of the benchmarked self-attention.
pub const ATTENTION_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Gdc,
    SelfAttention,
}

impl Block {
    pub fn tag(&self) -> &'static str {
        match self {
            Block::Gdc => "gdc",
            Block::SelfAttention => "self-attention",
        }
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gdc" => Ok(Block::Gdc),
            "self-attention" | "attention" => Ok(Block::SelfAttention),
            other => Err(Error::Config(format!("unknown bench block {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub median_ns: u128,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub block: Block,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
    /// One entry per row after the first.
    pub ratios: Vec<f64>,
    /// Least-squares slope of `ln t` on `ln n`; `None` with fewer than two sizes.
    pub slope: Option<f64>,
}

impl BenchReport {
    pub fn from_rows(block: Block, repeats: usize, rows: Vec<BenchRow>) -> Self {
        let ratios = rows
            .windows(2)
            .map(|w| {
                let growth = w[1].median_ns.max(1) as f64 / w[0].median_ns.max(1) as f64;
                growth.powf(1.0 / (w[1].n as f64 / w[0].n as f64).log2())
            })
            .collect();
        let points: Vec<(f64, f64)> =
            rows.iter().map(|r| ((r.n as f64).ln(), (r.median_ns.max(1) as f64).ln())).collect();
        Self { block, repeats, ratios, slope: loglog_slope(&points), rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,n,median_ns,ratio\n");
        for (i, row) in self.rows.iter().enumerate() {
            let ratio = if i == 0 { String::new() } else { format!("{:.4}", self.ratios[i - 1]) };
            let _ = writeln!(out, "{},{},{},{}", self.block.tag(), row.n, row.median_ns, ratio);
        }
        out
    }
}

pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// The most square `h x w` with `h * w = n` and `h <= w`.
pub fn squarest(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && !n.is_multiple_of(h) {
        h -= 1;
    }
    let h = h.max(1);
    (h, n / h)
}

pub fn gdc_bench_config() -> GdcConfig {
    GdcConfig::new(GDC_CHANNELS, GDC_CHANNELS, (8, 8), 32)
}

fn validate(block: Block, sizes: &[usize], repeats: usize) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Config("bench needs at least one size".into()));
    }
    if repeats < MIN_REPEATS {
        return Err(Error::Config(format!("bench needs at least {MIN_REPEATS} repeats, got {repeats}")));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("bench sizes must be strictly increasing: {sizes:?}")));
    }
    match block {
        Block::SelfAttention => {
            if let Some(&n) = sizes.iter().find(|&&n| n.checked_mul(n).is_none_or(|m| m > ATTENTION_MAP_LIMIT)) {
                return Err(Error::Config(format!(
                    "attention over {n} tokens needs an {n}x{n} map, above the {ATTENTION_MAP_LIMIT}-element limit"
                )));
            }
        }
        Block::Gdc => {
            let cfg = gdc_bench_config();
            if let Some(&n) = sizes.iter().find(|&&n| {
                let (h, w) = squarest(n);
                h < cfg.grid.0 || w < cfg.grid.1
            }) {
                return Err(Error::Config(format!("gdc bench size {n} has no layout covering the {:?} grid", cfg.grid)));
            }
        }
    }
    Ok(())
}

fn median(mut samples: Vec<u128>) -> u128 {
    samples.sort_unstable();
    let m = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[m]
    } else {
        (samples[m - 1] + samples[m]) / 2
    }
}

fn time_repeats(repeats: usize, mut run: impl FnMut() -> Result<()>) -> Result<u128> {
    run()?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        run()?;
        samples.push(start.elapsed().as_nanos());
    }
    Ok(median(samples))
}

/// Time `block` at each pixel/token count in `sizes`.
pub fn scaling_bench(block: Block, sizes: &[usize], repeats: usize, seed: u64) -> Result<BenchReport> {
    validate(block, sizes, repeats)?;
    let mut rng = Rng::new(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    match block {
        Block::Gdc => {
            let cfg = gdc_bench_config();
            let params = GdcParams::<Tensor<f32>>::init(&cfg, &mut rng)?;
            let p = params.constants();
            for &n in sizes {
                let (h, w) = squarest(n);
                let x = Var::constant(Tensor::<f32>::rand_uniform([1, cfg.in_channels, h, w], 0.0, 1.0, &mut rng)?);
                let median_ns = time_repeats(repeats, || {
                    black_box(gdc_forward(&x, &p, &cfg)?);
                    Ok(())
                })?;
                rows.push(BenchRow { n, median_ns });
            }
        }
        Block::SelfAttention => {
            for &n in sizes {
                let mut mk = || Tensor::<f32>::randn([n, ATTENTION_DIM], 0.0, 1.0, &mut rng).map(Var::constant);
                let (q, k, v) = (mk()?, mk()?, mk()?);
                let median_ns = time_repeats(repeats, || {
                    black_box(self_attention(&q, &k, &v)?);
                    Ok(())
                })?;
                rows.push(BenchRow { n, median_ns });
            }
        }
    }
    Ok(BenchReport::from_rows(block, repeats, rows))
}
