use super::tensor::ImageTensor;
use crate::error::Result;

/// Normalized 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with edge clamping. `sigma <= 0` is the identity.
pub fn gaussian_blur(image: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    if sigma <= 0.0 {
        return Ok(image.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(image.values().len());
    let mut tmp = vec![0.0; h * w];
    for c in 0..image.channels() {
        let plane = image.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[sy * w + x];
                }
                out.push(acc);
            }
        }
    }
    ImageTensor::from_clamped(h, w, image.channels(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.3);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let n = k.len();
        for i in 0..n / 2 {
            assert_eq!(k[i], k[n - 1 - i]);
        }
    }

    #[test]
    fn blur_keeps_constant_and_softens_edges() {
        let flat = ImageTensor::filled(8, 8, 1, 0.4).unwrap();
        let b = gaussian_blur(&flat, 1.5).unwrap();
        assert!(b.values().iter().all(|v| (v - 0.4).abs() < 1e-12));

        let step: Vec<f64> = (0..64).map(|i| if i % 8 < 4 { 0.0 } else { 1.0 }).collect();
        let img = ImageTensor::new(8, 8, 1, step).unwrap();
        let b = gaussian_blur(&img, 1.0).unwrap();
        assert!(b.get(0, 3, 3) > 0.0 && b.get(0, 3, 4) < 1.0);
    }
}
