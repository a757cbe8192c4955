#![allow(dead_code)]

use kdseg::blackbox::{OracleInfo, ProbabilityOracle};
use kdseg::data::{generate_synthetic_pair, DomainSplit, ImageTensor, SoftLabelMap, SyntheticShiftSpec};
use kdseg::model::{Architecture, ModelSpec};
use kdseg::optim::OptimizerConfig;
use kdseg::Result;

pub const SIDE: usize = 16;

pub fn tiny_pair(n_train: usize, n_test: usize) -> (DomainSplit, DomainSplit) {
    generate_synthetic_pair(&SyntheticShiftSpec::default(), n_train, n_test, SIDE).unwrap()
}

pub fn tiny_spec(arch: Architecture, seed: u64) -> ModelSpec {
    ModelSpec::new(arch, 2, 2, 1, 3, seed)
}

pub fn opt(epochs: usize, lr: f64, seed: u64) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: lr,
        batch_size: 2,
        epochs,
        seed,
    }
}

/// Parameter-free predictor: class scores are a fixed function of pixel
/// intensity.
pub struct IntensityStub;

impl ProbabilityOracle for IntensityStub {
    fn query(&self, image: &ImageTensor) -> Result<SoftLabelMap> {
        let (h, w) = (image.height(), image.width());
        let mut values = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = image.get(0, y, x);
                let scores = [0.2, 0.5, 0.8].map(|c: f64| (-(v - c).powi(2) * 20.0).exp());
                let z: f64 = scores.iter().sum();
                values.extend(scores.iter().map(|s| s / z));
            }
        }
        SoftLabelMap::new(h, w, 3, values)
    }

    fn info(&self) -> OracleInfo {
        OracleInfo {
            classes: 3,
            channels: 1,
            input_size: None,
        }
    }

    fn describe(&self) -> String {
        "stub:intensity".into()
    }
}
