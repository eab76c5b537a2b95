//! Training data: a parametric darkener, a procedural normal-light image
//! generator, and directory loaders that record every file they open.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng::Rng;

pub const GAMMA_RANGE: (f64, f64) = (1.5, 3.5);
pub const GAIN_RANGE: (f64, f64) = (0.1, 0.5);
pub const SIGMA_RANGE: (f64, f64) = (0.0, 0.03);

/// One draw of the degradation `low = clamp(g * img^gamma + noise)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDarkener {
    pub gamma: f64,
    pub gain: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub sigma: f64,
    /// Seed of the noise stream for this image.
    pub seed: u64,
}

impl SyntheticDarkener {
    /// Parameters drawn uniformly from the documented ranges.
    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            gamma: rng.range(GAMMA_RANGE.0, GAMMA_RANGE.1),
            gain: rng.range(GAIN_RANGE.0, GAIN_RANGE.1),
            sigma: rng.range(SIGMA_RANGE.0, SIGMA_RANGE.1),
            seed: rng.next_u64(),
        }
    }

    /// Darkens with the noise stream derived from `self.seed`.
    pub fn apply(&self, img: &ImageBuffer) -> ImageBuffer {
        darken(img, self, &mut Rng::new(self.seed))
    }

    pub fn csv_header() -> &'static str {
        "name,gamma,gain,sigma,seed"
    }
}

impl fmt::Display for SyntheticDarkener {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.gamma, self.gain, self.sigma, self.seed)
    }
}

pub fn darken(img: &ImageBuffer, d: &SyntheticDarkener, rng: &mut Rng) -> ImageBuffer {
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let noise = if d.sigma > 0.0 { d.sigma * rng.normal() } else { 0.0 };
            (d.gain * (v as f64).powf(d.gamma) + noise) as f32
        })
        .collect();
    ImageBuffer::new(img.width(), img.height(), data).expect("same size as input")
}

/// A smooth, colourful scene: a tilted two-colour gradient, a few soft blobs
/// and a faint sinusoidal texture, kept inside `[0.05, 0.95]`.
pub fn procedural_image(width: usize, height: usize, rng: &mut Rng) -> ImageBuffer {
    let colour = |rng: &mut Rng| [rng.range(0.2, 0.9), rng.range(0.2, 0.9), rng.range(0.2, 0.9)];
    let (c0, c1) = (colour(rng), colour(rng));
    let angle = rng.range(0.0, std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let blobs: Vec<_> = (0..3 + rng.below(4))
        .map(|_| {
            let centre = (rng.uniform(), rng.uniform());
            let radius = rng.range(0.08, 0.3);
            let tint = [rng.range(-0.4, 0.4), rng.range(-0.4, 0.4), rng.range(-0.4, 0.4)];
            (centre, radius, tint)
        })
        .collect();
    let freq = (rng.range(2.0, 9.0), rng.range(2.0, 9.0));
    let phase = rng.range(0.0, std::f64::consts::TAU);
    let amp = rng.range(0.02, 0.08);

    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let v = (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let t = (((u - 0.5) * ca + (v - 0.5) * sa) + 0.5).clamp(0.0, 1.0);
            let texture = amp * (std::f64::consts::TAU * (freq.0 * u + freq.1 * v) + phase).sin();
            for c in 0..3 {
                let mut val = c0[c] + (c1[c] - c0[c]) * t + texture;
                for &((bx, by), r, tint) in &blobs {
                    let d2 = (u - bx).powi(2) + (v - by).powi(2);
                    val += tint[c] * (-d2 / (2.0 * r * r)).exp();
                }
                data.push(val.clamp(0.05, 0.95) as f32);
            }
        }
    }
    ImageBuffer::new(width, height, data).expect("consistent size")
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `normal/` and `low/` directories with identical file names.
    PairedDir { normal: PathBuf, low: PathBuf },
    NormalDir { normal: PathBuf },
    /// Generated on the fly; pairs are darkened with per-image parameters.
    Synthetic { count: usize, width: usize, height: usize, seed: u64 },
}

/// Files opened by a loader, in order.
#[derive(Debug, Default)]
pub struct AccessLog(Mutex<Vec<PathBuf>>);

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn open(&self, path: &Path) -> Result<ImageBuffer> {
        self.0.lock().expect("access log poisoned").push(path.to_path_buf());
        ImageBuffer::read_ppm(path)
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.0.lock().expect("access log poisoned").clone()
    }

    /// Opened paths lying under `dir`.
    pub fn opened_under(&self, dir: &Path) -> usize {
        self.paths().iter().filter(|p| p.starts_with(dir)).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub name: String,
    pub normal: ImageBuffer,
    pub low: ImageBuffer,
    /// Degradation used, for synthetic pairs.
    pub darkener: Option<SyntheticDarkener>,
}

/// Sorted `.ppm` file names in `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && name.to_ascii_lowercase().ends_with(".ppm") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn synthetic_name(i: usize) -> String {
    format!("{i:05}.ppm")
}

/// The `i`-th synthetic normal image for `seed`; independent of `count`.
pub fn synthetic_normal(seed: u64, i: usize, width: usize, height: usize) -> ImageBuffer {
    procedural_image(width, height, &mut Rng::new(seed).fork(2 * i as u64))
}

pub fn synthetic_pair(seed: u64, i: usize, width: usize, height: usize) -> Pair {
    let normal = synthetic_normal(seed, i, width, height);
    let darkener = SyntheticDarkener::sample(&mut Rng::new(seed).fork(2 * i as u64 + 1));
    Pair { name: synthetic_name(i), low: darkener.apply(&normal), normal, darkener: Some(darkener) }
}

/// Step-1 data: (normal, low) pairs.
pub fn load_pairs(spec: &DatasetSpec, log: &AccessLog) -> Result<Vec<Pair>> {
    match spec {
        DatasetSpec::PairedDir { normal, low } => {
            let names = list_images(normal)?;
            let low_names = list_images(low)?;
            if names != low_names {
                let a: BTreeSet<_> = names.iter().collect();
                let b: BTreeSet<_> = low_names.iter().collect();
                let odd: Vec<_> = a.symmetric_difference(&b).take(3).collect();
                return Err(Error::Config(format!("paired directories do not correspond, e.g. {odd:?}")));
            }
            names
                .into_iter()
                .map(|name| {
                    let n = log.open(&normal.join(&name))?;
                    let l = log.open(&low.join(&name))?;
                    if (n.width(), n.height()) != (l.width(), l.height()) {
                        return Err(Error::Config(format!("{name}: normal and low sizes differ")));
                    }
                    Ok(Pair { name, normal: n, low: l, darkener: None })
                })
                .collect()
        }
        DatasetSpec::Synthetic { count, width, height, seed } => {
            Ok((0..*count).map(|i| synthetic_pair(*seed, i, *width, *height)).collect())
        }
        DatasetSpec::NormalDir { .. } => Err(Error::Config("paired training needs paired-dir or synthetic data".into())),
    }
}

/// Step-2 data: normal-light images only. Paired sources are read from their
/// normal side; no low-light file is ever opened.
pub fn load_normals(spec: &DatasetSpec, log: &AccessLog) -> Result<Vec<(String, ImageBuffer)>> {
    match spec {
        DatasetSpec::NormalDir { normal } | DatasetSpec::PairedDir { normal, .. } => list_images(normal)?
            .into_iter()
            .map(|name| {
                let img = log.open(&normal.join(&name))?;
                Ok((name, img))
            })
            .collect(),
        DatasetSpec::Synthetic { count, width, height, seed } => {
            Ok((0..*count).map(|i| (synthetic_name(i), synthetic_normal(*seed, i, *width, *height))).collect())
        }
    }
}

/// Writes `normal/`, `low/` and `manifest.csv` under `dir`.
pub fn write_synthetic(dir: &Path, count: usize, width: usize, height: usize, seed: u64) -> Result<()> {
    let (nd, ld) = (dir.join("normal"), dir.join("low"));
    fs::create_dir_all(&nd)?;
    fs::create_dir_all(&ld)?;
    let mut manifest = format!("{}\n", SyntheticDarkener::csv_header());
    for i in 0..count {
        let pair = synthetic_pair(seed, i, width, height);
        pair.normal.write_ppm(&nd.join(&pair.name))?;
        pair.low.write_ppm(&ld.join(&pair.name))?;
        let d = pair.darkener.expect("synthetic pairs carry their darkener");
        manifest.push_str(&format!("{},{d}\n", pair.name));
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(gamma: f64, gain: f64) -> SyntheticDarkener {
        SyntheticDarkener { gamma, gain, sigma: 0.0, seed: 0 }
    }

    #[test]
    fn darken_closed_forms() {
        let black = ImageBuffer::filled(4, 3, [0.0; 3]);
        assert!(fixed(2.5, 0.3).apply(&black).data().iter().all(|&v| v == 0.0));
        let white = ImageBuffer::filled(4, 3, [1.0; 3]);
        assert!(fixed(2.0, 0.25).apply(&white).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn darkening_lowers_mean() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let img = procedural_image(16, 16, &mut rng);
            let d = SyntheticDarkener { sigma: 0.0, ..SyntheticDarkener::sample(&mut rng) };
            assert!(d.apply(&img).mean() < img.mean());
        }
    }

    #[test]
    fn sampled_parameters_in_range() {
        let mut rng = Rng::new(8);
        for _ in 0..200 {
            let d = SyntheticDarkener::sample(&mut rng);
            assert!((GAMMA_RANGE.0..GAMMA_RANGE.1).contains(&d.gamma));
            assert!((GAIN_RANGE.0..GAIN_RANGE.1).contains(&d.gain));
            assert!((SIGMA_RANGE.0..SIGMA_RANGE.1).contains(&d.sigma));
        }
    }

    #[test]
    fn synthetic_is_reproducible_and_prefix_stable() {
        let a = load_pairs(&DatasetSpec::Synthetic { count: 3, width: 8, height: 8, seed: 4 }, &AccessLog::new()).unwrap();
        let b = load_pairs(&DatasetSpec::Synthetic { count: 5, width: 8, height: 8, seed: 4 }, &AccessLog::new()).unwrap();
        assert_eq!(a[..], b[..3]);
        assert_ne!(a[0].normal, a[1].normal);
        assert!(a.iter().all(|p| p.low.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn normal_dir_is_not_paired() {
        let spec = DatasetSpec::NormalDir { normal: PathBuf::from("/nonexistent") };
        assert!(matches!(load_pairs(&spec, &AccessLog::new()), Err(Error::Config(_))));
    }
}
