//! `images/<id>.png` + optional `masks/<id>.png` directory layout.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};

use super::dataset::{Dataset, Domain, Sample, Split};
use super::tensor::{ImageTensor, LabelMask};
use crate::error::{Error, Result};

fn decode_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            let vals = g.as_raw().iter().map(|v| f64::from(*v) / 255.0).collect();
            ImageTensor::new(h, w, 1, vals)
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            let g = img.to_luma16();
            let vals = g.as_raw().iter().map(|v| f64::from(*v) / 65535.0).collect();
            ImageTensor::new(h, w, 1, vals)
        }
        _ => {
            let rgb = img.to_rgb8();
            let mut vals = vec![0.0; h * w * 3];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    vals[c * h * w + i] = f64::from(px[c]) / 255.0;
                }
            }
            ImageTensor::new(h, w, 3, vals)
        }
    }
}

fn decode_mask(path: &Path, classes: usize) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let g = img.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    LabelMask::new(h, w, classes, g.into_raw()).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads every `images/*.png`, pairing each with `masks/<same name>` when present.
/// Samples are ordered by file name.
pub fn load_dataset(path: &Path, classes: usize, domain: Domain, split: Split) -> Result<Dataset> {
    let images_dir = path.join("images");
    let masks_dir = path.join("masks");
    let mut names: Vec<String> = fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .filter(|name| name.ends_with(".png"))
        .collect();
    names.sort();

    let mut samples = Vec::with_capacity(names.len());
    for name in names {
        let id = name.trim_end_matches(".png").to_string();
        let image = decode_image(&images_dir.join(&name))?;
        let mask_path = masks_dir.join(&name);
        let mask = if mask_path.exists() {
            let m = decode_mask(&mask_path, classes)?;
            if m.height() != image.height() || m.width() != image.width() {
                return Err(Error::Data(format!(
                    "{id}: mask {}x{} does not match image {}x{}",
                    m.height(),
                    m.width(),
                    image.height(),
                    image.width()
                )));
            }
            Some(m)
        } else {
            None
        };
        samples.push(Sample { id, image, mask });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no images found under {}", images_dir.display())));
    }
    Dataset::new(domain, split, classes, samples)
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a dataset in the directory layout read by [`load_dataset`].
/// Images are quantized to 8 bits.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let images_dir = path.join("images");
    let masks_dir = path.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for s in dataset.samples() {
        let (h, w) = (s.image.height() as u32, s.image.width() as u32);
        let file = images_dir.join(format!("{}.png", s.id));
        let result = if s.image.channels() == 1 {
            let raw = s.image.values().iter().map(|v| to_u8(*v)).collect();
            GrayImage::from_raw(w, h, raw).expect("buffer sized from image").save(&file)
        } else {
            let n = (h * w) as usize;
            let mut raw = Vec::with_capacity(n * 3);
            for i in 0..n {
                for c in 0..3.min(s.image.channels()) {
                    raw.push(to_u8(s.image.plane(c)[i]));
                }
                for _ in s.image.channels()..3 {
                    raw.push(0);
                }
            }
            ImageBuffer::<image::Rgb<u8>, _>::from_raw(w, h, raw).expect("buffer sized from image").save(&file)
        };
        result.map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;

        if let Some(m) = &s.mask {
            fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
            let file = masks_dir.join(format!("{}.png", s.id));
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, m.values().to_vec())
                .expect("buffer sized from mask")
                .save(&file)
                .map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, id: &str, pixels: &[u8], mask: &[u8]) {
        fs::create_dir_all(dir.join("images")).unwrap();
        fs::create_dir_all(dir.join("masks")).unwrap();
        GrayImage::from_raw(2, 2, pixels.to_vec())
            .unwrap()
            .save(dir.join("images").join(format!("{id}.png")))
            .unwrap();
        GrayImage::from_raw(2, 2, mask.to_vec())
            .unwrap()
            .save(dir.join("masks").join(format!("{id}.png")))
            .unwrap();
    }

    #[test]
    fn loads_four_labeled_pairs() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            write_pair(dir.path(), &format!("case{i}"), &[0, 64, 128, 255], &[0, 1, 2, 0]);
        }
        let ds = load_dataset(dir.path(), 3, Domain::Source, Split::Train).unwrap();
        assert_eq!(ds.len(), 4);
        assert!(ds.is_labeled());
        let img = &ds.samples()[0].image;
        assert_eq!(img.values()[3], 1.0);
        assert!(img.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mask_with_class_k_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "bad", &[0, 0, 0, 0], &[0, 1, 3, 0]);
        let err = load_dataset(dir.path(), 3, Domain::Source, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn shape_mismatch_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", &[0, 0, 0, 0], &[0, 1, 1, 0]);
        GrayImage::from_raw(1, 4, vec![0, 0, 0, 0])
            .unwrap()
            .save(dir.path().join("masks").join("a.png"))
            .unwrap();
        assert!(matches!(
            load_dataset(dir.path(), 3, Domain::Source, Split::Train),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn save_then_load_preserves_masks() {
        let dir = tempfile::tempdir().unwrap();
        let mask = LabelMask::new(2, 3, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let ds = Dataset::new(
            Domain::Target,
            Split::Test,
            3,
            vec![Sample {
                id: "x".into(),
                image: ImageTensor::new(2, 3, 1, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap(),
                mask: Some(mask.clone()),
            }],
        )
        .unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path(), 3, Domain::Target, Split::Test).unwrap();
        assert_eq!(back.samples()[0].mask.as_ref(), Some(&mask));
        assert!(back.samples()[0].image.mean_abs_diff(&ds.samples()[0].image) < 1.0 / 255.0);
    }
}
