use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for per-pixel probability sums.
pub const STOCHASTIC_TOL: f64 = 1e-5;

/// Dense image with values in `[0, 1]`, stored channel-planar (`c`, then `y`, then `x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Input(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Input(format!(
                "image buffer holds {} values, expected {}",
                values.len(),
                height * width * channels
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Input(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]`. Non-finite values map to 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut values: Vec<f64>) -> Result<Self> {
        for v in values.iter_mut() {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, channels, values)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert!(self.same_shape(other), "mean_abs_diff on mismatched shapes");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.values.len() as f64
    }
}

/// Per-pixel integer class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Input(format!("mask dimensions must be positive, got {height}x{width}")));
        }
        if classes == 0 || classes > 256 {
            return Err(Error::Input(format!("class count {classes} outside 1..=256")));
        }
        if values.len() != height * width {
            return Err(Error::Input(format!(
                "mask buffer holds {} values, expected {}",
                values.len(),
                height * width
            )));
        }
        if let Some(v) = values.iter().find(|v| usize::from(**v) >= classes) {
            return Err(Error::Data(format!("mask class index {v} not below class count {classes}")));
        }
        Ok(Self {
            height,
            width,
            classes,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Binary membership map for one class.
    pub fn class_support(&self, class_id: u8) -> Vec<bool> {
        self.values.iter().map(|v| *v == class_id).collect()
    }
}

/// Per-pixel class probability vectors, stored pixel-major (`y`, `x`, then class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelMap {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<f64>,
}

impl SoftLabelMap {
    /// Validates shape and row-stochasticity.
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::Input(format!(
                "soft label dimensions must be positive, got {height}x{width}x{classes}"
            )));
        }
        if values.len() != height * width * classes {
            return Err(Error::Input(format!(
                "soft label buffer holds {} values, expected {}",
                values.len(),
                height * width * classes
            )));
        }
        for (i, row) in values.chunks_exact(classes).enumerate() {
            let mut sum = 0.0;
            for p in row {
                if !p.is_finite() || *p < 0.0 || *p > 1.0 {
                    return Err(Error::Input(format!("probability {p} at pixel {i} outside [0, 1]")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Input(format!("probabilities at pixel {i} sum to {sum}")));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            values,
        })
    }

    /// One-hot map of a label mask.
    pub fn one_hot(mask: &LabelMask) -> Self {
        let k = mask.classes();
        let mut values = vec![0.0; mask.values().len() * k];
        for (i, c) in mask.values().iter().enumerate() {
            values[i * k + usize::from(*c)] = 1.0;
        }
        Self {
            height: mask.height(),
            width: mask.width(),
            classes: k,
            values,
        }
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Result<Self> {
        Self::new(height, width, classes, vec![1.0 / classes as f64; height * width * classes])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.classes;
        &self.values[i..i + self.classes]
    }

    pub fn same_shape(&self, other: &SoftLabelMap) -> bool {
        self.height == other.height && self.width == other.width && self.classes == other.classes
    }

    /// Largest deviation of any per-pixel sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.values
            .chunks_exact(self.classes)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Per-pixel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> LabelMask {
        let values = self
            .values
            .chunks_exact(self.classes)
            .map(|row| {
                let mut best = 0;
                for (k, p) in row.iter().enumerate().skip(1) {
                    if *p > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask {
            height: self.height,
            width: self.width,
            classes: self.classes,
            values,
        }
    }

    pub fn max_abs_diff(&self, other: &SoftLabelMap) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range() {
        assert!(ImageTensor::new(1, 2, 1, vec![0.5, 1.5]).is_err());
        assert!(ImageTensor::new(1, 2, 1, vec![0.5, f64::NAN]).is_err());
        assert!(ImageTensor::new(0, 2, 1, vec![]).is_err());
        let clamped = ImageTensor::from_clamped(1, 3, 1, vec![-0.2, 1.7, f64::NAN]).unwrap();
        assert_eq!(clamped.values(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn mask_rejects_class_out_of_range() {
        let err = LabelMask::new(1, 2, 3, vec![0, 3]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(LabelMask::new(1, 2, 3, vec![0, 2]).is_ok());
    }

    #[test]
    fn soft_labels_must_be_stochastic() {
        assert!(SoftLabelMap::new(1, 1, 2, vec![0.6, 0.3]).is_err());
        assert!(SoftLabelMap::new(1, 1, 2, vec![0.6, 0.4]).is_ok());
        assert!(SoftLabelMap::new(1, 1, 2, vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let m = SoftLabelMap::new(1, 2, 3, vec![0.4, 0.4, 0.2, 0.2, 0.4, 0.4]).unwrap();
        assert_eq!(m.argmax().values(), &[0, 1]);
    }
}
