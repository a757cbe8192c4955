//! Seeded encoder-decoder segmentation networks.
//!
//! Two architectures share the same U-shaped layout (max-pool encoder,
//! nearest-upsample decoder, skip concatenation, 1x1 head):
//! `small-encdec` uses two 3x3 convolutions per block, `tiny-encdec` one.
//! There is no normalization or dropout, so train and eval mode compute the
//! same function.

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_into, read_checkpoint_spec, save_checkpoint, CHECKPOINT_VERSION};

use crate::data::{ImageTensor, SoftLabelMap};
use crate::error::{Error, Result};
use layers::{Act, Conv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    SmallEncdec,
    TinyEncdec,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::SmallEncdec => "small-encdec",
            Architecture::TinyEncdec => "tiny-encdec",
        }
    }

    fn convs_per_block(self) -> usize {
        match self {
            Architecture::SmallEncdec => 2,
            Architecture::TinyEncdec => 1,
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-encdec" => Ok(Architecture::SmallEncdec),
            "tiny-encdec" => Ok(Architecture::TinyEncdec),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Channels of the first encoder level; level `l` has `width_factor * 2^l`.
    pub width_factor: usize,
    /// Number of downsampling levels.
    pub depth: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, width_factor: usize, depth: usize, in_channels: usize, out_classes: usize, init_seed: u64) -> Self {
        Self {
            architecture,
            width_factor,
            depth,
            in_channels,
            out_classes,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_factor == 0 || self.width_factor > 64 {
            return Err(Error::Config(format!("width_factor {} outside 1..=64", self.width_factor)));
        }
        if !(2..=4).contains(&self.depth) {
            return Err(Error::Config(format!("depth {} outside 2..=4", self.depth)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if !(2..=256).contains(&self.out_classes) {
            return Err(Error::Config(format!("out_classes {} outside 2..=256", self.out_classes)));
        }
        Ok(())
    }

    /// Input height/width must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Same architecture and shape; seeds may differ.
    pub fn same_shape(&self, other: &ModelSpec) -> bool {
        self.architecture == other.architecture
            && self.width_factor == other.width_factor
            && self.depth == other.depth
            && self.in_channels == other.in_channels
            && self.out_classes == other.out_classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    convs: Vec<Conv>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    head: Conv,
    param_count: usize,
}

impl Layout {
    fn new(spec: &ModelSpec) -> Self {
        let mut offset = 0;
        let mut conv = |cin: usize, cout: usize, kernel: usize| {
            let c = Conv {
                cin,
                cout,
                kernel,
                offset,
            };
            offset += c.param_len();
            c
        };
        let per_block = spec.architecture.convs_per_block();
        let channels = |level: usize| spec.width_factor << level;
        let block = |cin: usize, cout: usize, conv: &mut dyn FnMut(usize, usize, usize) -> Conv| Block {
            convs: (0..per_block).map(|i| conv(if i == 0 { cin } else { cout }, cout, 3)).collect(),
        };

        let mut encoder = Vec::with_capacity(spec.depth + 1);
        let mut cin = spec.in_channels;
        for level in 0..=spec.depth {
            encoder.push(block(cin, channels(level), &mut conv));
            cin = channels(level);
        }
        // decoder[l] consumes upsampled level l+1 features concatenated with skip l
        let mut decoder: Vec<Option<Block>> = vec![None; spec.depth];
        for level in (0..spec.depth).rev() {
            decoder[level] = Some(block(channels(level + 1) + channels(level), channels(level), &mut conv));
        }
        let head = conv(channels(0), spec.out_classes, 1);
        Self {
            encoder,
            decoder: decoder.into_iter().map(|b| b.expect("every level filled")).collect(),
            head,
            param_count: offset,
        }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|b| b.convs.iter())
            .chain(std::iter::once(&self.head))
    }
}

struct ConvRecord {
    col: Vec<f64>,
    out: Act,
}

fn block_forward(block: &Block, params: &[f64], mut x: Act, records: Option<&mut Vec<ConvRecord>>) -> Act {
    let mut local = Vec::new();
    for conv in &block.convs {
        let (mut y, col) = conv.forward(params, &x);
        layers::relu_inplace(&mut y);
        if records.is_some() {
            local.push(ConvRecord { col, out: y.clone() });
        }
        x = y;
    }
    if let Some(r) = records {
        r.extend(local);
    }
    x
}

fn block_backward(block: &Block, params: &[f64], grads: &mut [f64], records: &[ConvRecord], mut dy: Act) -> Act {
    for (conv, rec) in block.convs.iter().zip(records).rev() {
        layers::relu_backward(&rec.out, &mut dy);
        dy = conv.backward(params, grads, &rec.col, &dy);
    }
    dy
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTrace {
    encoder: Vec<Vec<ConvRecord>>,
    pool_args: Vec<(Vec<u32>, usize, usize, usize)>,
    decoder: Vec<Vec<ConvRecord>>,
    head_col: Vec<f64>,
    probs: Vec<f64>,
    height: usize,
    width: usize,
}

pub struct SegmentationModel {
    spec: ModelSpec,
    layout: Layout,
    params: Vec<f64>,
    mode: Mode,
}

impl std::fmt::Debug for SegmentationModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegmentationModel")
            .field("spec", &self.spec)
            .field("param_count", &self.params.len())
            .field("mode", &self.mode)
            .finish()
    }
}

impl Clone for SegmentationModel {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            params: self.params.clone(),
            mode: self.mode,
        }
    }
}

/// Builds a freshly initialized model. Weights use fan-in scaled normal
/// initialization drawn from `spec.init_seed`; biases start at zero.
pub fn build_model(spec: &ModelSpec) -> Result<SegmentationModel> {
    spec.validate()?;
    let layout = Layout::new(spec);
    let mut params = vec![0.0; layout.param_count];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let head_offset = layout.head.offset;
    for conv in layout.convs() {
        // He init ahead of ReLU, unit-gain for the linear head
        let gain = if conv.offset == head_offset { 1.0 } else { 2.0 };
        let normal = Normal::new(0.0, (gain / conv.fan_in() as f64).sqrt()).expect("positive std");
        for w in &mut params[conv.offset..conv.offset + conv.weight_len()] {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(SegmentationModel {
        spec: spec.clone(),
        layout,
        params,
        mode: Mode::Train,
    })
}

/// Parameter count a spec would produce, without allocating the model.
pub fn parameter_count(spec: &ModelSpec) -> Result<usize> {
    spec.validate()?;
    Ok(Layout::new(spec).param_count)
}

impl SegmentationModel {
    pub(crate) fn from_parts(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        if params.len() != layout.param_count {
            return Err(Error::Checkpoint(format!(
                "parameter blob holds {} values, spec expects {}",
                params.len(),
                layout.param_count
            )));
        }
        Ok(Self {
            spec,
            layout,
            params,
            mode: Mode::Eval,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, image: &ImageTensor) -> Result<()> {
        if image.channels() != self.spec.in_channels {
            return Err(Error::Input(format!(
                "image has {} channels, model expects {}",
                image.channels(),
                self.spec.in_channels
            )));
        }
        let m = self.spec.size_multiple();
        if image.height() % m != 0 || image.width() % m != 0 {
            return Err(Error::Input(format!(
                "image {}x{} not divisible by {m} (depth {})",
                image.height(),
                image.width(),
                self.spec.depth
            )));
        }
        Ok(())
    }

    fn run(&self, image: &ImageTensor, mut trace: Option<&mut ForwardTrace>) -> Vec<f64> {
        let params = &self.params;
        let depth = self.spec.depth;
        let mut x = Act {
            c: image.channels(),
            h: image.height(),
            w: image.width(),
            data: image.values().to_vec(),
        };
        let mut skips = Vec::with_capacity(depth);
        for (level, block) in self.layout.encoder.iter().enumerate() {
            let mut rec = Vec::new();
            let h = block_forward(block, params, x, trace.is_some().then_some(&mut rec));
            if let Some(t) = trace.as_deref_mut() {
                t.encoder.push(rec);
            }
            if level < depth {
                let (pooled, arg) = layers::maxpool2(&h);
                if let Some(t) = trace.as_deref_mut() {
                    t.pool_args.push((arg, h.c, h.h, h.w));
                }
                skips.push(h);
                x = pooled;
            } else {
                x = h;
            }
        }
        let mut dec_records: Vec<Vec<ConvRecord>> = (0..depth).map(|_| Vec::new()).collect();
        for level in (0..depth).rev() {
            let up = layers::upsample2(&x);
            let cat = layers::concat(up, &skips[level]);
            x = block_forward(
                &self.layout.decoder[level],
                params,
                cat,
                trace.is_some().then_some(&mut dec_records[level]),
            );
        }
        let (logits, head_col) = self.layout.head.forward(params, &x);
        let probs = layers::softmax_pixels(&logits);
        if let Some(t) = trace {
            t.decoder = dec_records;
            t.head_col = head_col;
            t.probs = probs.clone();
        }
        probs
    }

    /// Per-pixel class probabilities for one image.
    pub fn forward(&self, image: &ImageTensor) -> Result<SoftLabelMap> {
        self.check_input(image)?;
        let probs = self.run(image, None);
        SoftLabelMap::new(image.height(), image.width(), self.spec.out_classes, probs)
    }

    /// Forward pass that keeps the intermediates needed by [`Self::backward`].
    pub fn forward_traced(&self, image: &ImageTensor) -> Result<(SoftLabelMap, ForwardTrace)> {
        self.check_input(image)?;
        let mut trace = ForwardTrace {
            encoder: Vec::new(),
            pool_args: Vec::new(),
            decoder: Vec::new(),
            head_col: Vec::new(),
            probs: Vec::new(),
            height: image.height(),
            width: image.width(),
        };
        let probs = self.run(image, Some(&mut trace));
        let map = SoftLabelMap::new(image.height(), image.width(), self.spec.out_classes, probs)?;
        Ok((map, trace))
    }

    /// Accumulates `d loss / d params` into `grads`, given the gradient of the
    /// loss with respect to the pixel-major output probabilities.
    pub fn backward(&self, trace: &ForwardTrace, dprobs: &[f64], grads: &mut [f64]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Input(format!(
                "gradient buffer holds {} values, model has {}",
                grads.len(),
                self.params.len()
            )));
        }
        if dprobs.len() != trace.probs.len() {
            return Err(Error::Input(format!(
                "probability gradient holds {} values, forward produced {}",
                dprobs.len(),
                trace.probs.len()
            )));
        }
        let params = &self.params;
        let depth = self.spec.depth;
        let dlogits = layers::softmax_backward(&trace.probs, dprobs, self.spec.out_classes, trace.height, trace.width);
        let mut d = self.layout.head.backward(params, grads, &trace.head_col, &dlogits);

        let mut dskips: Vec<Option<Act>> = (0..depth).map(|_| None).collect();
        for level in 0..depth {
            let dcat = block_backward(&self.layout.decoder[level], params, grads, &trace.decoder[level], d);
            let up_channels = self.spec.width_factor << (level + 1);
            let (dup, dskip) = layers::split_channels(dcat, up_channels);
            dskips[level] = Some(dskip);
            d = layers::upsample2_backward(&dup);
        }
        for level in (0..=depth).rev() {
            let dx = block_backward(&self.layout.encoder[level], params, grads, &trace.encoder[level], d);
            if level == 0 {
                break;
            }
            let (arg, c, h, w) = &trace.pool_args[level - 1];
            let mut dh = dskips[level - 1].take().unwrap_or_else(|| Act::zeros(*c, *h, *w));
            layers::maxpool2_backward(&dx, arg, &mut dh);
            d = dh;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(arch: Architecture, seed: u64) -> ModelSpec {
        ModelSpec::new(arch, 4, 2, 1, 3, seed)
    }

    fn image(h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(h, w, 1, (0..h * w).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn same_spec_same_parameters() {
        let a = build_model(&spec(Architecture::SmallEncdec, 3)).unwrap();
        let b = build_model(&spec(Architecture::SmallEncdec, 3)).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        let c = build_model(&spec(Architecture::SmallEncdec, 4)).unwrap();
        assert!(a.parameters().iter().zip(c.parameters()).any(|(x, y)| x != y));
    }

    #[test]
    fn tiny_has_fewer_parameters() {
        let small = parameter_count(&spec(Architecture::SmallEncdec, 0)).unwrap();
        let tiny = parameter_count(&spec(Architecture::TinyEncdec, 0)).unwrap();
        // width 4, depth 2, 1 -> 3 classes; counted by hand from the layout
        assert_eq!(small, SMALL_W4_D2);
        assert_eq!(tiny, TINY_W4_D2);
        assert!(tiny < small);
    }

    // enc: (1->4,4->4) (4->8,8->8) (8->16,16->16); dec: (24->8,8->8) (12->4,4->4); head 4->3
    const SMALL_W4_D2: usize = (9 * 4 + 4) + (36 * 4 + 4)
        + (36 * 8 + 8) + (72 * 8 + 8)
        + (72 * 16 + 16) + (144 * 16 + 16)
        + (216 * 8 + 8) + (72 * 8 + 8)
        + (108 * 4 + 4) + (36 * 4 + 4)
        + (4 * 3 + 3);
    // enc: 1->4, 4->8, 8->16; dec: 24->8, 12->4; head 4->3
    const TINY_W4_D2: usize = (9 * 4 + 4) + (36 * 8 + 8) + (72 * 16 + 16) + (216 * 8 + 8) + (108 * 4 + 4) + (4 * 3 + 3);

    #[test]
    fn forward_is_stochastic_and_deterministic() {
        let m = build_model(&spec(Architecture::SmallEncdec, 1)).unwrap();
        let img = image(16, 12);
        let a = m.forward(&img).unwrap();
        let b = m.forward(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width(), a.classes()), (16, 12, 3));
        assert!(a.max_row_sum_error() < 1e-5);
        assert!(a.values().iter().all(|p| *p > 0.0));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = build_model(&spec(Architecture::TinyEncdec, 1)).unwrap();
        assert!(matches!(m.forward(&image(10, 8)), Err(Error::Input(_))));
        let rgb = ImageTensor::filled(8, 8, 3, 0.5).unwrap();
        assert!(matches!(m.forward(&rgb), Err(Error::Input(_))));
    }

    #[test]
    fn unknown_architecture_is_config_error() {
        assert!(matches!("deeplab".parse::<Architecture>(), Err(Error::Config(_))));
        let bad: std::result::Result<ModelSpec, _> = serde_json::from_str(
            r#"{"architecture":"resnet","width_factor":4,"depth":2,"in_channels":1,"out_classes":3,"init_seed":0}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn traced_forward_matches_plain_forward() {
        let m = build_model(&spec(Architecture::SmallEncdec, 9)).unwrap();
        let img = image(8, 8);
        let (traced, _) = m.forward_traced(&img).unwrap();
        assert_eq!(traced, m.forward(&img).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = build_model(&ModelSpec::new(Architecture::SmallEncdec, 2, 2, 1, 3, 5)).unwrap();
        let img = image(8, 8);
        // loss = sum_i c_i * p_i with fixed coefficients
        let coeff: Vec<f64> = (0..8 * 8 * 3).map(|i| ((i * 31 % 7) as f64 - 3.0) / 3.0).collect();
        let loss = |model: &SegmentationModel| -> f64 {
            model.forward(&img).unwrap().values().iter().zip(&coeff).map(|(p, c)| p * c).sum()
        };
        let (_, trace) = m.forward_traced(&img).unwrap();
        let mut grads = vec![0.0; m.num_parameters()];
        m.backward(&trace, &coeff, &mut grads).unwrap();
        let step = 1e-5;
        for idx in (0..m.num_parameters()).step_by(37) {
            let mut plus = m.clone();
            plus.parameters_mut()[idx] += step;
            let mut minus = m.clone();
            minus.parameters_mut()[idx] -= step;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let denom = fd.abs().max(grads[idx].abs()).max(1e-8);
            assert!((fd - grads[idx]).abs() / denom < 1e-4 || (fd - grads[idx]).abs() < 1e-9, "param {idx}: fd {fd} vs {}", grads[idx]);
        }
    }
}
