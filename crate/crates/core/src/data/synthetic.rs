//! Deterministic two-domain segmentation benchmark.
//!
//! Each image holds one or more nested elliptical structures on a smoothly
//! varying background. Class `k` marks pixels inside the `k`-th nesting level,
//! so with three classes an image looks like a disc with a cup inside it.
//! Target images are the source renderings pushed through a photometric
//! shift (contrast, offset, blur, noise); masks are shared and exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Domain, DomainSplit, Sample, Split};
use super::filters::gaussian_blur;
use super::tensor::{ImageTensor, LabelMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticShiftSpec {
    /// Inclusive range of structures per image.
    pub shape_count_range: (usize, usize),
    pub classes: usize,
    pub intensity_offset: f64,
    pub blur_sigma: f64,
    pub contrast_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticShiftSpec {
    fn default() -> Self {
        Self {
            shape_count_range: (1, 2),
            classes: 3,
            intensity_offset: 0.12,
            blur_sigma: 1.0,
            contrast_scale: 0.6,
            noise_std: 0.08,
            seed: 7,
        }
    }
}

impl SyntheticShiftSpec {
    pub fn identity(seed: u64) -> Self {
        Self {
            intensity_offset: 0.0,
            blur_sigma: 0.0,
            contrast_scale: 1.0,
            noise_std: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.shape_count_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("shape_count_range ({lo}, {hi}) must satisfy 1 <= min <= max")));
        }
        if !(2..=16).contains(&self.classes) {
            return Err(Error::Config(format!("synthetic class count {} outside 2..=16", self.classes)));
        }
        if !self.blur_sigma.is_finite() || self.blur_sigma < 0.0 {
            return Err(Error::Config(format!("blur_sigma {} must be >= 0", self.blur_sigma)));
        }
        if !self.contrast_scale.is_finite() || self.contrast_scale <= 0.0 {
            return Err(Error::Config(format!("contrast_scale {} must be > 0", self.contrast_scale)));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if !self.intensity_offset.is_finite() {
            return Err(Error::Config("intensity_offset must be finite".into()));
        }
        Ok(())
    }
}

/// splitmix64 finalizer, used to derive independent per-sample seeds.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn render_source(spec: &SyntheticShiftSpec, size: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let s = size as f64;
    let levels = spec.classes - 1;
    let count = rng.random_range(spec.shape_count_range.0..=spec.shape_count_range.1);

    // nested ellipses per structure; level 0 is the outermost
    let mut structures: Vec<Vec<Ellipse>> = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.random_range(0.13..0.24) * s;
        let b = a * rng.random_range(0.75..1.0);
        let margin = a.max(b) + 1.0;
        let cx = rng.random_range(margin..(s - margin).max(margin + 1e-9));
        let cy = rng.random_range(margin..(s - margin).max(margin + 1e-9));
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let mut nest = Vec::with_capacity(levels);
        let mut scale = 1.0;
        for level in 0..levels {
            if level > 0 {
                scale *= rng.random_range(0.4..0.65);
            }
            let jitter = if level > 0 { (1.0 - scale) * 0.3 * a } else { 0.0 };
            nest.push(Ellipse {
                cx: cx + rng.random_range(-1.0..=1.0) * jitter,
                cy: cy + rng.random_range(-1.0..=1.0) * jitter,
                a: a * scale,
                b: b * scale,
                cos: theta.cos(),
                sin: theta.sin(),
            });
        }
        structures.push(nest);
    }

    let bg = rng.random_range(0.12..0.28);
    let grad_amp = rng.random_range(-0.08..0.08);
    let grad_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut level_intensity = vec![bg];
    for _ in 0..levels {
        let prev = *level_intensity.last().unwrap();
        let step = rng.random_range(0.7..0.9) / levels as f64;
        level_intensity.push(prev + step);
    }
    let texture = Normal::new(0.0, 0.01).unwrap();

    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut class = 0usize;
            for nest in &structures {
                for (level, e) in nest.iter().enumerate() {
                    if e.contains(px, py) {
                        class = class.max(level + 1);
                    }
                }
            }
            let g = ((px / s - 0.5) * grad_dir.cos() + (py / s - 0.5) * grad_dir.sin()) * grad_amp;
            image.push(level_intensity[class] + g + texture.sample(rng));
            mask.push(class as u8);
        }
    }
    (image, mask)
}

fn apply_shift(spec: &SyntheticShiftSpec, source: &ImageTensor, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let mut img = source.clone();
    if spec.contrast_scale != 1.0 || spec.intensity_offset != 0.0 {
        let vals = img
            .values()
            .iter()
            .map(|v| 0.5 + (v - 0.5) * spec.contrast_scale + spec.intensity_offset)
            .collect();
        img = ImageTensor::from_clamped(img.height(), img.width(), img.channels(), vals)?;
    }
    if spec.blur_sigma > 0.0 {
        img = gaussian_blur(&img, spec.blur_sigma)?;
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let vals = img.values().iter().map(|v| v + noise.sample(rng)).collect();
        img = ImageTensor::from_clamped(img.height(), img.width(), img.channels(), vals)?;
    }
    Ok(img)
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x7472_6169_6e00,
        Split::Test => 0x7465_7374_0000,
    }
}

/// Renders `n_train` + `n_test` paired source/target samples.
///
/// Target sample `i` shares geometry and mask with source sample `i`; only the
/// pixel values differ. Output is a pure function of the arguments.
pub fn generate_synthetic_pair(
    spec: &SyntheticShiftSpec,
    n_train: usize,
    n_test: usize,
    image_size: usize,
) -> Result<(DomainSplit, DomainSplit)> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config(format!("n_train ({n_train}) and n_test ({n_test}) must be >= 1")));
    }
    if image_size < 16 {
        return Err(Error::Config(format!("image_size {image_size} must be >= 16")));
    }

    let build = |split: Split, n: usize| -> Result<(Dataset, Dataset)> {
        let mut src = Vec::with_capacity(n);
        let mut tgt = Vec::with_capacity(n);
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        for i in 0..n {
            let salt = split_salt(split) + i as u64;
            let mut geometry = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, salt));
            let mut shift = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed ^ 0x5348_4946_5400_0000, salt));
            let (pixels, labels) = render_source(spec, image_size, &mut geometry);
            let image = ImageTensor::from_clamped(image_size, image_size, 1, pixels)?;
            let mask = LabelMask::new(image_size, image_size, spec.classes, labels)?;
            let shifted = apply_shift(spec, &image, &mut shift)?;
            src.push(Sample {
                id: format!("src-{tag}-{i:04}"),
                image,
                mask: Some(mask.clone()),
            });
            tgt.push(Sample {
                id: format!("tgt-{tag}-{i:04}"),
                image: shifted,
                mask: Some(mask),
            });
        }
        Ok((
            Dataset::new(Domain::Source, split, spec.classes, src)?,
            Dataset::new(Domain::Target, split, spec.classes, tgt)?,
        ))
    };

    let (src_train, tgt_train) = build(Split::Train, n_train)?;
    let (src_test, tgt_test) = build(Split::Test, n_test)?;
    Ok((
        DomainSplit {
            train: src_train,
            test: src_test,
        },
        DomainSplit {
            train: tgt_train,
            test: tgt_test,
        },
    ))
}
