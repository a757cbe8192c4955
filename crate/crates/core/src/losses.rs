//! Pixel-wise training objectives.
//!
//! Both losses are averaged over pixels (and over the batch by the caller's
//! weighting), use natural logs, and floor probabilities at [`PROB_FLOOR`]
//! before taking any log. The `*_with_grad` variants also return the gradient
//! with respect to the prediction / student probabilities in the same
//! pixel-major layout as [`SoftLabelMap`].

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageTensor, LabelMask, SoftLabelMap};
use crate::error::{Error, Result};
use crate::model::SegmentationModel;

pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Mean loss in nats.
    pub value: f64,
    pub pixel_count: usize,
}

fn check_mask(prediction: &SoftLabelMap, target: &LabelMask) -> Result<()> {
    if prediction.height() != target.height() || prediction.width() != target.width() {
        return Err(Error::Input(format!(
            "prediction {}x{} vs target {}x{}",
            prediction.height(),
            prediction.width(),
            target.height(),
            target.width()
        )));
    }
    if target.classes() > prediction.classes() {
        return Err(Error::Input(format!(
            "target declares {} classes, prediction has {}",
            target.classes(),
            prediction.classes()
        )));
    }
    Ok(())
}

fn check_maps(teacher: &SoftLabelMap, student: &SoftLabelMap) -> Result<()> {
    if !teacher.same_shape(student) {
        return Err(Error::Input(format!(
            "teacher {}x{}x{} vs student {}x{}x{}",
            teacher.height(),
            teacher.width(),
            teacher.classes(),
            student.height(),
            student.width(),
            student.classes()
        )));
    }
    Ok(())
}

pub fn cross_entropy(prediction: &SoftLabelMap, target: &LabelMask) -> Result<LossValue> {
    check_mask(prediction, target)?;
    let k = prediction.classes();
    let n = prediction.pixel_count();
    let total: f64 = target
        .values()
        .iter()
        .enumerate()
        .map(|(i, c)| -prediction.values()[i * k + usize::from(*c)].max(PROB_FLOOR).ln())
        .sum();
    Ok(LossValue {
        value: total / n as f64,
        pixel_count: n,
    })
}

pub fn cross_entropy_with_grad(prediction: &SoftLabelMap, target: &LabelMask) -> Result<(LossValue, Vec<f64>)> {
    let loss = cross_entropy(prediction, target)?;
    let k = prediction.classes();
    let n = prediction.pixel_count() as f64;
    let mut grad = vec![0.0; prediction.values().len()];
    for (i, c) in target.values().iter().enumerate() {
        let j = i * k + usize::from(*c);
        let p = prediction.values()[j];
        if p > PROB_FLOOR {
            grad[j] = -1.0 / (p * n);
        }
    }
    Ok((loss, grad))
}

/// `mean_pixels sum_k t_k (ln t_k - ln s_k)`, i.e. KL(teacher || student).
pub fn kl_distillation(teacher: &SoftLabelMap, student: &SoftLabelMap) -> Result<LossValue> {
    check_maps(teacher, student)?;
    let total: f64 = teacher
        .values()
        .iter()
        .zip(student.values())
        .map(|(t, s)| {
            if *t == 0.0 {
                0.0
            } else {
                t * (t.max(PROB_FLOOR).ln() - s.max(PROB_FLOOR).ln())
            }
        })
        .sum();
    let n = teacher.pixel_count();
    Ok(LossValue {
        value: total / n as f64,
        pixel_count: n,
    })
}

/// KL loss and its gradient with respect to the student probabilities only.
pub fn kl_distillation_with_grad(teacher: &SoftLabelMap, student: &SoftLabelMap) -> Result<(LossValue, Vec<f64>)> {
    let loss = kl_distillation(teacher, student)?;
    let n = teacher.pixel_count() as f64;
    let grad = teacher
        .values()
        .iter()
        .zip(student.values())
        .map(|(t, s)| if *s > PROB_FLOOR { -t / (s * n) } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

/// Supervision for one training image.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Hard(LabelMask),
    Soft(SoftLabelMap),
}

impl Target {
    pub fn loss_with_grad(&self, prediction: &SoftLabelMap) -> Result<(LossValue, Vec<f64>)> {
        match self {
            Target::Hard(mask) => cross_entropy_with_grad(prediction, mask),
            Target::Soft(teacher) => kl_distillation_with_grad(teacher, prediction),
        }
    }

    pub fn loss(&self, prediction: &SoftLabelMap) -> Result<LossValue> {
        match self {
            Target::Hard(mask) => cross_entropy(prediction, mask),
            Target::Soft(teacher) => kl_distillation(teacher, prediction),
        }
    }
}

/// Mean loss over a batch together with its parameter gradient.
pub fn batch_loss_and_grad(model: &SegmentationModel, batch: &[(ImageTensor, Target)]) -> Result<(f64, Vec<f64>)> {
    let mut grads = vec![0.0; model.num_parameters()];
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (image, target) in batch {
        let (pred, trace) = model.forward_traced(image)?;
        let (loss, mut dprobs) = target.loss_with_grad(&pred)?;
        dprobs.iter_mut().for_each(|g| *g *= scale);
        model.backward(&trace, &dprobs, &mut grads)?;
        total += loss.value * scale;
    }
    Ok((total, grads))
}

pub fn batch_loss(model: &SegmentationModel, batch: &[(ImageTensor, Target)]) -> Result<f64> {
    let mut total = 0.0;
    for (image, target) in batch {
        total += target.loss(&model.forward(image)?)?.value;
    }
    Ok(total / batch.len() as f64)
}

/// Finite-difference audit of the analytic gradient.
///
/// Compares the backpropagated gradient of the batch loss against central
/// differences with step `step` on `samples` parameters drawn without
/// replacement using `seed`. Returns the worst relative error
/// `|g - fd| / max(|g|, |fd|, 1e-7)`.
pub fn loss_gradient_check(
    model: &SegmentationModel,
    batch: &[(ImageTensor, Target)],
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("gradient check needs a non-empty batch".into()));
    }
    let (_, analytic) = batch_loss_and_grad(model, batch)?;
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample_indices(&mut rng, model.num_parameters(), samples.min(model.num_parameters()));
    let mut worst: f64 = 0.0;
    for idx in picks {
        let original = probe.parameters()[idx];
        probe.parameters_mut()[idx] = original + step;
        let plus = batch_loss(&probe, batch)?;
        probe.parameters_mut()[idx] = original - step;
        let minus = batch_loss(&probe, batch)?;
        probe.parameters_mut()[idx] = original;
        let fd = (plus - minus) / (2.0 * step);
        let g = analytic[idx];
        if !g.is_finite() || !fd.is_finite() {
            return Ok(f64::INFINITY);
        }
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, k: usize, v: Vec<f64>) -> SoftLabelMap {
        SoftLabelMap::new(h, w, k, v).unwrap()
    }

    #[test]
    fn ce_of_perfect_prediction_is_zero() {
        let mask = LabelMask::new(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        let loss = cross_entropy(&SoftLabelMap::one_hot(&mask), &mask).unwrap();
        assert!(loss.value <= 1e-6);
        assert_eq!(loss.pixel_count, 4);
    }

    #[test]
    fn ce_of_uniform_is_ln_k() {
        let mask = LabelMask::new(3, 3, 3, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]).unwrap();
        let loss = cross_entropy(&SoftLabelMap::uniform(3, 3, 3).unwrap(), &mask).unwrap();
        assert!((loss.value - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn ce_two_pixel_hand_case() {
        let p = map(1, 2, 2, vec![0.7, 0.3, 0.2, 0.8]);
        let t = LabelMask::new(1, 2, 2, vec![0, 1]).unwrap();
        let expect = -(0.7f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((cross_entropy(&p, &t).unwrap().value - expect).abs() < 1e-9);
    }

    #[test]
    fn kl_analytic_cases() {
        let p = map(1, 2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3]);
        assert!(kl_distillation(&p, &p).unwrap().value.abs() <= 1e-7);
        let t = map(1, 1, 2, vec![1.0, 0.0]);
        let s = map(1, 1, 2, vec![0.5, 0.5]);
        assert!((kl_distillation(&t, &s).unwrap().value - 2f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let a = SoftLabelMap::uniform(2, 2, 3).unwrap();
        let b = SoftLabelMap::uniform(2, 2, 2).unwrap();
        assert!(matches!(kl_distillation(&a, &b), Err(Error::Input(_))));
        let m = LabelMask::new(1, 4, 3, vec![0; 4]).unwrap();
        assert!(matches!(cross_entropy(&a, &m), Err(Error::Input(_))));
    }

    #[test]
    fn analytic_grad_matches_difference_quotient_on_probabilities() {
        let t = map(1, 2, 3, vec![0.1, 0.6, 0.3, 0.5, 0.25, 0.25]);
        let s = map(1, 2, 3, vec![0.3, 0.3, 0.4, 0.2, 0.5, 0.3]);
        let (_, g) = kl_distillation_with_grad(&t, &s).unwrap();
        // d/ds_j of the unnormalized objective; probabilities treated as free coordinates
        let f = |v: &[f64]| -> f64 {
            t.values().iter().zip(v).map(|(t, s)| t * (t.ln() - s.ln())).sum::<f64>() / 2.0
        };
        for j in 0..6 {
            let mut plus = s.values().to_vec();
            plus[j] += 1e-6;
            let mut minus = s.values().to_vec();
            minus[j] -= 1e-6;
            let fd = (f(&plus) - f(&minus)) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-6);
        }
    }

    fn random_map(seed: u64, pixels: usize, k: usize) -> SoftLabelMap {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::with_capacity(pixels * k);
        for _ in 0..pixels {
            let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            v.extend(row.iter().map(|x| x / s));
        }
        map(1, pixels, k, v)
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(a in any::<u64>(), b in any::<u64>()) {
            let t = random_map(a, 5, 3);
            let s = random_map(b, 5, 3);
            prop_assert!(kl_distillation(&t, &s).unwrap().value >= -1e-9);
        }

        #[test]
        fn ce_equals_kl_for_one_hot_teacher(a in any::<u64>(), labels in proptest::collection::vec(0u8..3, 4)) {
            let p = random_map(a, 4, 3);
            let mask = LabelMask::new(1, 4, 3, labels).unwrap();
            let kl = kl_distillation(&SoftLabelMap::one_hot(&mask), &p).unwrap().value;
            let ce = cross_entropy(&p, &mask).unwrap().value;
            prop_assert!((kl - ce).abs() < 1e-6);
        }
    }
}
