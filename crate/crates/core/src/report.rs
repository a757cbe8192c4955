//! Static figures for a finished run directory: loss curves, metric bars and
//! prediction overlays. Missing pieces are skipped with a warning.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::warn;

use crate::data::{ImageTensor, LabelMask};
use crate::error::{Error, Result};
use crate::eval::Segmenter;
use crate::model::load_checkpoint;
use crate::pipeline::{ExperimentConfig, Manifest, MetricRow, StageId, StageReport, MANIFEST, METRICS_JSON};

pub const REPORT_DIR: &str = "report";
const OVERLAY_CASES: usize = 4;

const PALETTE: [[u8; 3]; 6] = [
    [230, 57, 70],
    [42, 157, 143],
    [69, 123, 157],
    [244, 162, 97],
    [131, 56, 236],
    [255, 209, 102],
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl ReportSummary {
    fn warn(&mut self, message: String) {
        warn!("{message}");
        self.warnings.push(message);
    }
}

fn class_color(class: u8) -> [u8; 3] {
    PALETTE[(usize::from(class).max(1) - 1) % PALETTE.len()]
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn draw_line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: [u8; 3]) {
    let (mut x0, mut y0) = from;
    let (x1, y1) = to;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, Rgb(color));
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn fill_rect(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: [u8; 3]) {
    for yy in y..(y + h).min(img.height()) {
        for xx in x..(x + w).min(img.width()) {
            img.put_pixel(xx, yy, Rgb(color));
        }
    }
}

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 24;

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = [40, 40, 40];
    draw_line(&mut img, (MARGIN as i64, MARGIN as i64), (MARGIN as i64, (H - MARGIN) as i64), axis);
    draw_line(
        &mut img,
        (MARGIN as i64, (H - MARGIN) as i64),
        ((W - MARGIN) as i64, (H - MARGIN) as i64),
        axis,
    );
    img
}

/// Epoch-loss curve, y axis spanning the curve's own range.
pub fn render_loss_curve(losses: &[f64]) -> RgbImage {
    let mut img = canvas();
    if losses.is_empty() {
        return img;
    }
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plot_w = f64::from(W - 2 * MARGIN);
    let plot_h = f64::from(H - 2 * MARGIN);
    let point = |i: usize, v: f64| {
        let x = if losses.len() > 1 {
            i as f64 / (losses.len() - 1) as f64 * plot_w
        } else {
            0.0
        };
        let y = (v - lo) / span * plot_h;
        (
            (f64::from(MARGIN) + x).round() as i64,
            (f64::from(H - MARGIN) - y).round() as i64,
        )
    };
    for i in 1..losses.len() {
        draw_line(&mut img, point(i - 1, losses[i - 1]), point(i, losses[i]), PALETTE[2]);
    }
    img
}

/// One bar per value, in order, scaled to `max_value`.
pub fn render_bars(values: &[f64], max_value: f64) -> RgbImage {
    let mut img = canvas();
    if values.is_empty() || max_value <= 0.0 {
        return img;
    }
    let plot_w = W - 2 * MARGIN;
    let plot_h = f64::from(H - 2 * MARGIN);
    let slot = plot_w / values.len() as u32;
    for (i, v) in values.iter().enumerate() {
        let h = (v.max(0.0) / max_value * plot_h).round() as u32;
        let x = MARGIN + 1 + i as u32 * slot + slot / 6;
        fill_rect(&mut img, x, H - MARGIN - h, slot * 2 / 3, h, PALETTE[i % PALETTE.len()]);
    }
    img
}

/// Grayscale image with each foreground class blended in its colour.
/// Output has the image's own height and width.
pub fn render_overlay(image: &ImageTensor, mask: &LabelMask) -> Result<RgbImage> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::Input("overlay: image and mask shapes differ".into()));
    }
    let (h, w) = (image.height(), image.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let gray = (0..image.channels()).map(|c| image.get(c, y, x)).sum::<f64>() / image.channels() as f64;
            let base = gray * 255.0;
            let class = mask.get(y, x);
            let px = if class == 0 {
                [base; 3]
            } else {
                let col = class_color(class);
                [0, 1, 2].map(|i| 0.55 * base + 0.45 * f64::from(col[i]))
            };
            img.put_pixel(x as u32, y as u32, Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8)));
        }
    }
    Ok(img)
}

fn hconcat(panels: &[RgbImage]) -> RgbImage {
    let h = panels.iter().map(RgbImage::height).max().unwrap_or(0);
    let w: u32 = panels.iter().map(RgbImage::width).sum::<u32>() + panels.len().saturating_sub(1) as u32 * 2;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in panels {
        for (x, y, px) in p.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *px);
        }
        x0 += p.width() + 2;
    }
    out
}

/// Writes figures for `run_dir` into `run_dir/report/`. An empty or
/// incomplete directory yields a (possibly empty) report with warnings.
pub fn generate_report(run_dir: &Path) -> Result<ReportSummary> {
    let mut summary = ReportSummary::default();
    let reports_dir = run_dir.join("reports");
    let mut stage_reports = Vec::new();
    for stage in StageId::ALL {
        let path = reports_dir.join(format!("{}.json", stage.file_stem()));
        if path.is_file() {
            stage_reports.push(read_json::<StageReport>(&path)?);
        }
    }
    let metrics_path = run_dir.join(METRICS_JSON);
    if stage_reports.is_empty() && !metrics_path.is_file() {
        summary.warn(format!("{}: no stage outputs found, report is empty", run_dir.display()));
        return Ok(summary);
    }
    let out = run_dir.join(REPORT_DIR);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    for report in &stage_reports {
        if report.epoch_losses.is_empty() {
            summary.warn(format!("{}: no loss curve (resumed stage)", report.stage.file_stem()));
            continue;
        }
        let path = out.join(format!("loss_{}.png", report.stage.file_stem()));
        save_png(&render_loss_curve(&report.epoch_losses), &path)?;
        summary.files.push(path);
    }

    if metrics_path.is_file() {
        let mut rows: Vec<MetricRow> = read_json(&metrics_path)?;
        rows.sort_by_key(|r| StageId::ALL.iter().position(|s| *s == r.stage));
        let dsc: Vec<f64> = rows.iter().map(|r| r.report.dsc_avg.mean).collect();
        let asd: Vec<f64> = rows.iter().map(|r| r.report.asd_avg.as_ref().map_or(0.0, |s| s.mean)).collect();
        let asd_max = asd.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
        for (name, img) in [("dsc_bars.png", render_bars(&dsc, 100.0)), ("asd_bars.png", render_bars(&asd, asd_max))] {
            let path = out.join(name);
            save_png(&img, &path)?;
            summary.files.push(path);
        }
    } else {
        summary.warn(format!("{} missing, no metric bars", metrics_path.display()));
    }

    let manifest_path = run_dir.join(MANIFEST);
    if !manifest_path.is_file() {
        summary.warn(format!("{} missing, no overlays", manifest_path.display()));
        return Ok(summary);
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    overlays(run_dir, &manifest.config, &out, &mut summary)?;
    Ok(summary)
}

fn overlays(run_dir: &Path, config: &ExperimentConfig, out: &Path, summary: &mut ReportSummary) -> Result<()> {
    let mut models = Vec::new();
    for stage in StageId::ALL {
        let path = run_dir.join("checkpoints").join(format!("{}.ckpt", stage.file_stem()));
        if path.is_file() {
            models.push(load_checkpoint(&path)?);
        } else {
            summary.warn(format!("{}: no checkpoint, skipped in overlays", stage.file_stem()));
        }
    }
    let (_, target) = match config.load_data() {
        Ok(d) => d,
        Err(e) => {
            summary.warn(format!("overlays skipped, data unavailable: {e}"));
            return Ok(());
        }
    };
    for sample in target.test.samples().iter().take(OVERLAY_CASES) {
        let truth = sample.mask.as_ref().expect("test split is labeled");
        let background = LabelMask::new(truth.height(), truth.width(), truth.classes(), vec![0; truth.height() * truth.width()])?;
        let mut panels = vec![render_overlay(&sample.image, &background)?, render_overlay(&sample.image, truth)?];
        for model in &models {
            let pred = model.predict(&sample.image)?.argmax();
            panels.push(render_overlay(&sample.image, &pred)?);
        }
        let path = out.join(format!("overlay_{}.png", sample.id));
        save_png(&hconcat(&panels), &path)?;
        summary.files.push(path);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_matches_image_shape() {
        let img = ImageTensor::filled(12, 20, 1, 0.5).unwrap();
        let mask = LabelMask::new(12, 20, 3, (0..240).map(|i| (i % 3) as u8).collect()).unwrap();
        let ov = render_overlay(&img, &mask).unwrap();
        assert_eq!((ov.width(), ov.height()), (20, 12));
        assert_eq!(ov.get_pixel(0, 0).0, [128, 128, 128]);
        assert_ne!(ov.get_pixel(1, 0).0, [128, 128, 128]);
    }

    #[test]
    fn empty_dir_is_an_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate_report(dir.path()).unwrap();
        assert!(summary.files.is_empty());
        assert_eq!(summary.warnings.len(), 1);
        assert!(!dir.path().join(REPORT_DIR).exists());
    }

    #[test]
    fn bars_are_ordered_and_scaled() {
        let img = render_bars(&[50.0, 100.0], 100.0);
        // Tallest bar reaches the top of the plot area.
        let top = |x: u32| (0..H).find(|y| img.get_pixel(x, *y).0 != [255, 255, 255]).unwrap();
        let slot = (W - 2 * MARGIN) / 2;
        let first = top(MARGIN + 1 + slot / 2);
        let second = top(MARGIN + 1 + slot + slot / 2);
        assert_eq!(second, MARGIN);
        assert!(first > second);
    }
}
