//! Dice score and average surface distance, per case and aggregated.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageTensor, LabelMask, SoftLabelMap};
use crate::error::{Error, Result};

/// Anything that maps an image to per-pixel class probabilities.
pub trait Segmenter {
    fn predict(&self, image: &ImageTensor) -> Result<SoftLabelMap>;
}

impl Segmenter for crate::model::SegmentationModel {
    fn predict(&self, image: &ImageTensor) -> Result<SoftLabelMap> {
        self.forward(image)
    }
}

fn check_shapes(prediction: &LabelMask, truth: &LabelMask) -> Result<()> {
    if !prediction.same_shape(truth) {
        return Err(Error::Input(format!(
            "prediction {}x{} vs truth {}x{}",
            prediction.height(),
            prediction.width(),
            truth.height(),
            truth.width()
        )));
    }
    Ok(())
}

/// Dice score in percent. Both empty gives 100, exactly one empty gives 0.
pub fn dice(prediction: &LabelMask, truth: &LabelMask, class_id: u8) -> Result<f64> {
    check_shapes(prediction, truth)?;
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (a, b) in prediction.values().iter().zip(truth.values()) {
        let (ia, ib) = (*a == class_id, *b == class_id);
        p += usize::from(ia);
        t += usize::from(ib);
        both += usize::from(ia && ib);
    }
    if p + t == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (p + t) as f64)
}

/// Pixels of `support` with at least one 4-neighbour outside it (the image
/// border counts as outside), i.e. the set minus its 4-connected erosion.
pub fn boundary(support: &[bool], height: usize, width: usize) -> Vec<bool> {
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && support[y as usize * width + x as usize]
    };
    let mut out = vec![false; support.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if inside(y, x) && !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

/// Stand-in for "no seed"; large enough to never win, small enough to keep
/// the parabola intersections finite.
const FAR: f64 = 1e20;

/// 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_distance_transform(seeds: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds.iter().map(|s| if *s { 0.0 } else { FAR }).collect();
    let n = height.max(width);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&grid[y * width..(y + 1) * width]);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&out[..width]);
    }
    grid
}

/// Symmetric average surface distance in pixels: the mean distance from the
/// boundary of the prediction to the boundary of the truth, averaged with the
/// reverse direction. `None` when either structure is empty.
pub fn average_surface_distance(prediction: &LabelMask, truth: &LabelMask, class_id: u8) -> Result<Option<f64>> {
    check_shapes(prediction, truth)?;
    let (h, w) = (truth.height(), truth.width());
    let p = prediction.class_support(class_id);
    let t = truth.class_support(class_id);
    if !p.contains(&true) || !t.contains(&true) {
        return Ok(None);
    }
    let bp = boundary(&p, h, w);
    let bt = boundary(&t, h, w);
    let mean_to = |from: &[bool], to: &[bool]| {
        let dt = squared_distance_transform(to, h, w);
        let (sum, count) = from
            .iter()
            .zip(&dt)
            .filter(|(f, _)| **f)
            .fold((0.0, 0usize), |(s, c), (_, d)| (s + d.sqrt(), c + 1));
        sum / count as f64
    };
    Ok(Some(0.5 * (mean_to(&bp, &bt) + mean_to(&bt, &bp))))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, std) = mean_std(values);
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u8,
    /// Per-case DSC in percent, in case order.
    pub dsc: Vec<f64>,
    /// Per-case ASD in pixels; `None` where undefined.
    pub asd: Vec<Option<f64>>,
    pub dsc_summary: Summary,
    pub asd_summary: Option<Summary>,
    pub asd_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub case_ids: Vec<String>,
    pub classes: Vec<ClassMetrics>,
    /// Per-case mean over foreground classes, then mean ± std over cases.
    pub dsc_avg: Summary,
    pub asd_avg: Option<Summary>,
}

impl MetricReport {
    pub fn case_count(&self) -> usize {
        self.case_ids.len()
    }

    pub fn mean_dsc(&self) -> f64 {
        self.dsc_avg.mean
    }

    /// Builds the report from per-case predicted and true masks.
    pub fn from_masks(case_ids: Vec<String>, pairs: &[(LabelMask, LabelMask)], classes: usize) -> Result<Self> {
        if pairs.is_empty() || case_ids.len() != pairs.len() {
            return Err(Error::Input("metric report needs one id per non-empty case".into()));
        }
        let mut per_class = Vec::with_capacity(classes.saturating_sub(1));
        for class_id in 1..classes as u8 {
            let mut dsc = Vec::with_capacity(pairs.len());
            let mut asd = Vec::with_capacity(pairs.len());
            for (pred, truth) in pairs {
                dsc.push(dice(pred, truth, class_id)?);
                asd.push(average_surface_distance(pred, truth, class_id)?);
            }
            let defined: Vec<f64> = asd.iter().flatten().copied().collect();
            per_class.push(ClassMetrics {
                class_id,
                dsc_summary: Summary::of(&dsc).expect("non-empty"),
                asd_summary: Summary::of(&defined),
                asd_undefined: asd.len() - defined.len(),
                dsc,
                asd,
            });
        }
        let case_dsc: Vec<f64> = (0..pairs.len())
            .map(|i| per_class.iter().map(|c| c.dsc[i]).sum::<f64>() / per_class.len() as f64)
            .collect();
        let case_asd: Vec<f64> = (0..pairs.len())
            .filter_map(|i| {
                let vals: Vec<f64> = per_class.iter().filter_map(|c| c.asd[i]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Ok(Self {
            case_ids,
            classes: per_class,
            dsc_avg: Summary::of(&case_dsc).expect("non-empty"),
            asd_avg: Summary::of(&case_asd),
        })
    }
}

/// Argmax-predicts every test case and scores each foreground class.
pub fn evaluate(model: &dyn Segmenter, test: &Dataset) -> Result<MetricReport> {
    if !test.is_labeled() {
        return Err(Error::Input("evaluation requires a fully labeled dataset".into()));
    }
    let mut ids = Vec::with_capacity(test.len());
    let mut pairs = Vec::with_capacity(test.len());
    for s in test.samples() {
        let probs = model.predict(&s.image)?;
        ids.push(s.id.clone());
        pairs.push((probs.argmax(), s.mask.clone().expect("checked labeled")));
    }
    MetricReport::from_masks(ids, &pairs, test.classes())
}

fn cell(s: Option<&Summary>) -> String {
    match s {
        Some(s) => format!("{:.2}±{:.2}", s.mean, s.std),
        None => "n/a".into(),
    }
}

/// Markdown-style table with one row per named report: per-class DSC, average
/// DSC, per-class ASD, average ASD.
pub fn metric_table(rows: &[(String, &MetricReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let class_ids: Vec<u8> = first.classes.iter().map(|c| c.class_id).collect();
    let mut header = vec!["Method".to_string()];
    header.extend(class_ids.iter().map(|c| format!("DSC[%] c{c}")));
    header.push("DSC[%] Avg".into());
    header.extend(class_ids.iter().map(|c| format!("ASD[px] c{c}")));
    header.push("ASD[px] Avg".into());
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for (name, report) in rows {
        let mut cells = vec![name.clone()];
        cells.extend(report.classes.iter().map(|c| cell(Some(&c.dsc_summary))));
        cells.push(cell(Some(&report.dsc_avg)));
        cells.extend(report.classes.iter().map(|c| cell(c.asd_summary.as_ref())));
        cells.push(cell(report.asd_avg.as_ref()));
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    out
}
