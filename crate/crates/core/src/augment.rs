//! Photometric augmentation policies. Nothing here moves pixels, so label
//! masks stay valid for every augmented view.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::filters::gaussian_blur;
use crate::data::ImageTensor;
use crate::error::{Error, Result};

pub type RngState = ChaCha8Rng;

/// Inclusive parameter range; a collapsed range (`lo == hi`) is a constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange(pub f64, pub f64);

impl ParamRange {
    fn draw(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        self.0 + (self.1 - self.0) * u
    }

    fn check(&self, name: &str, min: f64, strict: bool) -> Result<()> {
        let ok = self.0.is_finite()
            && self.1.is_finite()
            && self.0 <= self.1
            && if strict { self.0 > min } else { self.0 >= min };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{name} range ({}, {}) invalid (lower bound must be {} {min})",
                self.0,
                self.1,
                if strict { ">" } else { ">=" }
            )))
        }
    }
}

/// Teacher-side view: additive Gaussian noise only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakPolicy {
    pub noise_std: ParamRange,
}

/// Student-side view: blur, contrast, brightness, gamma, each applied
/// independently with `probability`, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongPolicy {
    pub blur_sigma: ParamRange,
    pub contrast_scale: ParamRange,
    pub brightness_delta: ParamRange,
    pub gamma: ParamRange,
    pub probability: f64,
}

impl Default for WeakPolicy {
    fn default() -> Self {
        Self {
            noise_std: ParamRange(0.0, 0.05),
        }
    }
}

impl Default for StrongPolicy {
    fn default() -> Self {
        Self {
            blur_sigma: ParamRange(0.5, 2.0),
            contrast_scale: ParamRange(0.65, 1.5),
            brightness_delta: ParamRange(-0.1, 0.1),
            gamma: ParamRange(0.7, 1.5),
            probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AugmentationPolicy {
    Weak(WeakPolicy),
    Strong(StrongPolicy),
}

impl AugmentationPolicy {
    pub fn weak() -> Self {
        AugmentationPolicy::Weak(WeakPolicy::default())
    }

    pub fn strong() -> Self {
        AugmentationPolicy::Strong(StrongPolicy::default())
    }

    pub fn weak_identity() -> Self {
        AugmentationPolicy::Weak(WeakPolicy {
            noise_std: ParamRange(0.0, 0.0),
        })
    }

    pub fn strong_identity() -> Self {
        AugmentationPolicy::Strong(StrongPolicy {
            blur_sigma: ParamRange(0.0, 0.0),
            contrast_scale: ParamRange(1.0, 1.0),
            brightness_delta: ParamRange(0.0, 0.0),
            gamma: ParamRange(1.0, 1.0),
            probability: 1.0,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            AugmentationPolicy::Weak(_) => PolicyKind::Weak,
            AugmentationPolicy::Strong(_) => PolicyKind::Strong,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AugmentationPolicy::Weak(w) => w.noise_std.check("noise_std", 0.0, false),
            AugmentationPolicy::Strong(s) => {
                s.blur_sigma.check("blur_sigma", 0.0, false)?;
                s.contrast_scale.check("contrast_scale", 0.0, true)?;
                s.brightness_delta.check("brightness_delta", f64::NEG_INFINITY, false)?;
                s.gamma.check("gamma", 0.0, true)?;
                if !(0.0..=1.0).contains(&s.probability) {
                    return Err(Error::Config(format!("probability {} outside [0, 1]", s.probability)));
                }
                Ok(())
            }
        }
    }
}

fn map_values(image: &ImageTensor, f: impl Fn(f64) -> f64) -> Result<ImageTensor> {
    let vals = image.values().iter().map(|v| f(*v)).collect();
    ImageTensor::from_clamped(image.height(), image.width(), image.channels(), vals)
}

fn apply_weak(policy: &WeakPolicy, image: &ImageTensor, rng: &mut RngState) -> Result<ImageTensor> {
    let std = policy.noise_std.draw(rng);
    if std <= 0.0 {
        return Ok(image.clone());
    }
    let noise = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let vals = image.values().iter().map(|v| v + noise.sample(rng)).collect();
    ImageTensor::from_clamped(image.height(), image.width(), image.channels(), vals)
}

fn apply_strong(policy: &StrongPolicy, image: &ImageTensor, rng: &mut RngState) -> Result<ImageTensor> {
    // every decision and parameter is drawn up front so the stream layout
    // does not depend on which transforms fire
    let mut fire = [false; 4];
    for f in &mut fire {
        *f = rng.random::<f64>() < policy.probability;
    }
    let sigma = policy.blur_sigma.draw(rng);
    let scale = policy.contrast_scale.draw(rng);
    let delta = policy.brightness_delta.draw(rng);
    let gamma = policy.gamma.draw(rng);

    let mut out = image.clone();
    if fire[0] && sigma > 0.0 {
        out = gaussian_blur(&out, sigma)?;
    }
    if fire[1] && scale != 1.0 {
        let mean = out.mean();
        out = map_values(&out, |v| (v - mean) * scale + mean)?;
    }
    if fire[2] && delta != 0.0 {
        out = map_values(&out, |v| v + delta)?;
    }
    if fire[3] && gamma != 1.0 {
        out = map_values(&out, |v| v.powf(gamma))?;
    }
    Ok(out)
}

/// Applies one random draw of `policy`. Output shape equals input shape and
/// values stay in `[0, 1]`.
pub fn apply(policy: &AugmentationPolicy, image: &ImageTensor, rng: &mut RngState) -> Result<ImageTensor> {
    match policy {
        AugmentationPolicy::Weak(w) => apply_weak(w, image, rng),
        AugmentationPolicy::Strong(s) => apply_strong(s, image, rng),
    }
}

/// Weak and strong views of the same image from two independent sub-streams of `rng`.
pub fn sample_two_views(
    image: &ImageTensor,
    weak: &AugmentationPolicy,
    strong: &AugmentationPolicy,
    rng: &mut RngState,
) -> Result<(ImageTensor, ImageTensor)> {
    if weak.kind() != PolicyKind::Weak || strong.kind() != PolicyKind::Strong {
        return Err(Error::Config("sample_two_views expects a weak and a strong policy, in that order".into()));
    }
    let mut weak_rng = RngState::seed_from_u64(rng.next_u64());
    let mut strong_rng = RngState::seed_from_u64(rng.next_u64());
    Ok((apply(weak, image, &mut weak_rng)?, apply(strong, image, &mut strong_rng)?))
}
