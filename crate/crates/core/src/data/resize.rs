use super::tensor::{ImageTensor, LabelMask};
use crate::error::{Error, Result};

fn check_target(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Input(format!("resize target must be positive, got {h}x{w}")));
    }
    Ok(())
}

/// Source coordinate and interpolation weight for output index `dst` (half-pixel centers).
fn bilinear_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (pos.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

fn nearest_coord(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64;
    (pos.floor() as usize).min(src_len - 1)
}

/// Bilinear resize of every channel.
pub fn resize(image: &ImageTensor, h: usize, w: usize) -> Result<ImageTensor> {
    check_target(h, w)?;
    if image.height() == h && image.width() == w {
        return Ok(image.clone());
    }
    let ys: Vec<_> = (0..h).map(|y| bilinear_coord(y, image.height(), h)).collect();
    let xs: Vec<_> = (0..w).map(|x| bilinear_coord(x, image.width(), w)).collect();
    let mut out = Vec::with_capacity(h * w * image.channels());
    for c in 0..image.channels() {
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let top = lerp(image.get(c, y0, x0), image.get(c, y0, x1), tx);
                let bottom = lerp(image.get(c, y1, x0), image.get(c, y1, x1), tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    ImageTensor::from_clamped(h, w, image.channels(), out)
}

/// Nearest-neighbor resize, keeping labels integral.
pub fn resize_mask(mask: &LabelMask, h: usize, w: usize) -> Result<LabelMask> {
    check_target(h, w)?;
    let xs: Vec<_> = (0..w).map(|x| nearest_coord(x, mask.width(), w)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = nearest_coord(y, mask.height(), h);
        out.extend(xs.iter().map(|&sx| mask.get(sy, sx)));
    }
    LabelMask::new(h, w, mask.classes(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_resize() {
        let img = ImageTensor::new(2, 3, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(resize(&img, 2, 3).unwrap(), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageTensor::filled(5, 7, 2, 0.37).unwrap();
        let out = resize(&img, 11, 3).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.37));
    }

    #[test]
    fn mask_upsample_by_hand() {
        let m = LabelMask::new(2, 2, 2, vec![0, 1, 0, 1]).unwrap();
        let out = resize_mask(&m, 2, 4).unwrap();
        assert_eq!(out.values(), &[0, 0, 1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn zero_target_rejected() {
        let img = ImageTensor::filled(2, 2, 1, 0.0).unwrap();
        assert!(resize(&img, 0, 2).is_err());
    }

    proptest! {
        #[test]
        fn resized_mask_labels_come_from_nearest_oracle(
            h in 1usize..9, w in 1usize..9, oh in 1usize..13, ow in 1usize..13, seed in any::<u64>()
        ) {
            let vals: Vec<u8> = (0..h * w).map(|i| ((seed >> (i % 60)) as u8) % 3).collect();
            let m = LabelMask::new(h, w, 3, vals).unwrap();
            let out = resize_mask(&m, oh, ow).unwrap();
            // oracle: map each output center back into the source grid by real arithmetic
            for y in 0..oh {
                for x in 0..ow {
                    let sy = (((2 * y + 1) * h) / (2 * oh)).min(h - 1);
                    let sx = (((2 * x + 1) * w) / (2 * ow)).min(w - 1);
                    prop_assert_eq!(out.get(y, x), m.get(sy, sx));
                }
            }
        }
    }
}
