//! Classifier definitions: a small feature extractor producing z, plus the
//! logit-head variants built from feature normalization (FN), weight
//! normalization (WN), and their combinations.
//!
//! Head modes and the raw per-class scores they produce:
//! - `standard`: W^T z + b
//! - `fn-only`:  W^T z~            where z~ = z / ||z||
//! - `wn-only`:  W~^T z            where W~_l = W_l / ||W_l||
//! - `he`:       W~^T z~ = cos(theta), every entry in [-1, 1]
//! - `m-he`:     -theta = -arccos(cos(theta)), every entry in [-pi, 0]
//!
//! Scale `s` and margin `m` are training-time concerns applied by the loss
//! (`objectives::margin_ce_loss`); inference-time scores never include them.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{contract, Result};
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Counts reads of the softmax bias vector by head construction. HE-family
/// heads must never touch it; the trainer's tests assert this stays flat
/// across an HE training run.
static BIAS_READS: AtomicU64 = AtomicU64::new(0);

pub fn bias_read_count() -> u64 {
    BIAS_READS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArchKind {
    /// Fully connected extractor for vector data.
    Mlp { input_dim: usize, hidden: Vec<usize> },
    /// conv3x3 -> relu -> pool2 -> conv3x3 -> relu -> pool2 -> dense,
    /// for square single-channel images.
    Conv { image_hw: usize, channels: (usize, usize) },
}

/// Extractor topology plus the feature/class dimensions of the softmax layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    pub activation: Activation,
    pub feature_dim: usize,
    pub classes: usize,
}

impl ArchitectureSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, feature_dim: usize, classes: usize) -> Self {
        ArchitectureSpec {
            kind: ArchKind::Mlp { input_dim, hidden },
            activation: Activation::Relu,
            feature_dim,
            classes,
        }
    }

    pub fn conv(image_hw: usize, channels: (usize, usize), feature_dim: usize, classes: usize) -> Self {
        ArchitectureSpec {
            kind: ArchKind::Conv { image_hw, channels },
            activation: Activation::Relu,
            feature_dim,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(contract("at least 2 classes required"));
        }
        if self.feature_dim == 0 {
            return Err(contract("feature_dim must be positive"));
        }
        match &self.kind {
            ArchKind::Mlp { input_dim, hidden } => {
                if *input_dim == 0 {
                    return Err(contract("input_dim must be positive"));
                }
                if hidden.is_empty() {
                    return Err(contract("mlp needs at least one hidden layer"));
                }
                if hidden.iter().any(|&h| h == 0) {
                    return Err(contract("hidden widths must be positive"));
                }
            }
            ArchKind::Conv { image_hw, channels } => {
                if *image_hw < 10 {
                    return Err(contract("conv extractor needs images of at least 10x10"));
                }
                if channels.0 == 0 || channels.1 == 0 {
                    return Err(contract("conv channels must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Flat input length one example occupies.
    pub fn input_len(&self) -> usize {
        match &self.kind {
            ArchKind::Mlp { input_dim, .. } => *input_dim,
            ArchKind::Conv { image_hw, .. } => image_hw * image_hw,
        }
    }

    /// Spatial size after the two conv+pool stages.
    fn conv_final_hw(&self) -> usize {
        match &self.kind {
            ArchKind::Conv { image_hw, .. } => ((image_hw - 2) / 2 - 2) / 2,
            _ => unreachable!("conv_final_hw on mlp"),
        }
    }

    /// Shapes of the extractor layer tensors, in declaration order, as
    /// (name, shape) pairs. The softmax layer is appended by `param_shapes`.
    fn extractor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match &self.kind {
            ArchKind::Mlp { input_dim, hidden } => {
                let mut dims = vec![*input_dim];
                dims.extend_from_slice(hidden);
                dims.push(self.feature_dim);
                for i in 0..dims.len() - 1 {
                    out.push((format!("fc{}.w", i + 1), vec![dims[i], dims[i + 1]]));
                    out.push((format!("fc{}.b", i + 1), vec![dims[i + 1]]));
                }
            }
            ArchKind::Conv { channels, .. } => {
                let (c1, c2) = *channels;
                let fhw = self.conv_final_hw();
                out.push(("conv1.w".into(), vec![c1, 1, 3, 3]));
                out.push(("conv1.b".into(), vec![c1]));
                out.push(("conv2.w".into(), vec![c2, c1, 3, 3]));
                out.push(("conv2.b".into(), vec![c2]));
                out.push(("fc1.w".into(), vec![c2 * fhw * fhw, self.feature_dim]));
                out.push(("fc1.b".into(), vec![self.feature_dim]));
            }
        }
        out
    }

    /// All parameter tensor shapes in declaration order, softmax layer last.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = self.extractor_shapes();
        out.push(("softmax.W".into(), vec![self.feature_dim, self.classes]));
        out.push(("softmax.b".into(), vec![self.classes]));
        out
    }
}

/// Logit-head selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Standard,
    FnOnly,
    WnOnly,
    He,
    MHe,
}

impl HeadMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(HeadMode::Standard),
            "fn-only" => Ok(HeadMode::FnOnly),
            "wn-only" => Ok(HeadMode::WnOnly),
            "he" => Ok(HeadMode::He),
            "m-he" => Ok(HeadMode::MHe),
            _ => Err(contract(format!("unknown head mode `{s}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadMode::Standard => "standard",
            HeadMode::FnOnly => "fn-only",
            HeadMode::WnOnly => "wn-only",
            HeadMode::He => "he",
            HeadMode::MHe => "m-he",
        }
    }

    /// True for the heads that carry scale and margin during training.
    pub fn is_angular(&self) -> bool {
        matches!(self, HeadMode::He | HeadMode::MHe)
    }
}

/// Head mode plus the training-time scale s and margin m. The margin is in
/// cosine units for `he` and radians for `m-he`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub mode: HeadMode,
    pub s: f64,
    pub m: f64,
}

impl HeadConfig {
    pub fn new(mode: HeadMode, s: f64, m: f64) -> Result<Self> {
        let cfg = HeadConfig { mode, s, m };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn standard() -> Self {
        HeadConfig { mode: HeadMode::Standard, s: 1.0, m: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) {
            return Err(contract(format!("head scale s = {} must be positive", self.s)));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Err(contract(format!("head margin m = {} must lie in [0, 1)", self.m)));
        }
        Ok(())
    }
}

/// Feature-extractor weights plus the softmax layer (columns W_l and bias b).
/// The bias is only ever read by the standard head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl ModelParams {
    /// He initialization (fan-in scaled Gaussian) for weights. Biases start
    /// at a small positive constant, which keeps relu features away from
    /// exact zero so the feature-normalization guard has room at init.
    pub fn init(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeds::rng(seeds::split(seed, "init"));
        let shapes = arch.param_shapes();
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut names = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let t = if name.ends_with(".b") {
                Tensor::new(shape, vec![0.01; n])?
            } else {
                let fan_in: usize = match shape.len() {
                    2 => shape[0],
                    4 => shape[1] * shape[2] * shape[3],
                    _ => shape.iter().product(),
                };
                let std = (2.0 / fan_in as f64).sqrt();
                let data: Vec<f64> = (0..n).map(|_| normal_sample(&mut rng) * std).collect();
                Tensor::new(shape, data)?
            };
            tensors.push(t);
            names.push(name);
        }
        Ok(ModelParams { tensors, names })
    }

    /// Wrap externally produced tensors; shapes must match the architecture.
    pub fn from_tensors(arch: &ArchitectureSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(contract(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        let mut names = Vec::with_capacity(shapes.len());
        for (t, (name, shape)) in tensors.iter().zip(&shapes) {
            if t.shape() != &shape[..] {
                return Err(contract(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            t.check_finite(name)?;
            names.push(name.clone());
        }
        Ok(ModelParams { tensors, names })
    }

    pub fn block_names(&self) -> &[String] {
        &self.names
    }

    /// Index of the softmax weight matrix in declaration order.
    pub fn softmax_w_index(&self) -> usize {
        self.tensors.len() - 2
    }

    pub fn softmax_w(&self) -> &Tensor {
        &self.tensors[self.tensors.len() - 2]
    }

    pub fn softmax_b(&self) -> &Tensor {
        &self.tensors[self.tensors.len() - 1]
    }
}

fn normal_sample(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple and portable.
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// A model's forward pass recorded on a tape: input leaf, parameter leaves
/// (aligned with `ModelParams::tensors` order), and the feature node z.
pub struct BoundModel {
    pub input: Var,
    pub param_vars: Vec<Var>,
    pub features: Var,
}

impl BoundModel {
    pub fn softmax_w_var(&self) -> Var {
        self.param_vars[self.param_vars.len() - 2]
    }

    pub fn softmax_b_var(&self) -> Var {
        self.param_vars[self.param_vars.len() - 1]
    }
}

/// Record the extractor forward pass z = z(x; omega) on `tape`.
///
/// `x` is a batch: `(B, input_dim)` for MLP, `(B, hw, hw)` or flattened
/// `(B, hw*hw)` for conv.
pub fn bind_features(
    tape: &mut Tape,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x: &Tensor,
) -> Result<BoundModel> {
    let batch = x.shape()[0];
    if x.row_len() != arch.input_len() {
        return Err(contract(format!(
            "input rows of {} values do not match architecture input of {}",
            x.row_len(),
            arch.input_len()
        )));
    }
    let input = tape.leaf(x.clone())?;
    let mut param_vars = Vec::with_capacity(params.tensors.len());
    for t in &params.tensors {
        param_vars.push(tape.leaf(t.clone())?);
    }
    let features = bind_features_from(tape, arch, &param_vars, input, batch)?;
    Ok(BoundModel { input, param_vars, features })
}

/// Extractor forward pass when the input and parameters are already on the
/// tape (used by attacks that re-run the model on a perturbed input leaf).
pub fn bind_features_from(
    tape: &mut Tape,
    arch: &ArchitectureSpec,
    param_vars: &[Var],
    input: Var,
    batch: usize,
) -> Result<Var> {
    match &arch.kind {
        ArchKind::Mlp { input_dim, hidden } => {
            let mut h = tape.reshape(input, vec![batch, *input_dim])?;
            let layers = hidden.len() + 1;
            for i in 0..layers {
                let w = param_vars[2 * i];
                let b = param_vars[2 * i + 1];
                h = tape.matmul(h, w)?;
                h = tape.add_row(h, b)?;
                if i + 1 < layers {
                    h = tape.relu(h)?;
                }
            }
            Ok(h)
        }
        ArchKind::Conv { image_hw, channels } => {
            let (_, c2) = *channels;
            let fhw = arch.conv_final_hw();
            let mut h = tape.reshape(input, vec![batch, 1, *image_hw, *image_hw])?;
            h = tape.conv2d(h, param_vars[0], param_vars[1])?;
            h = tape.relu(h)?;
            h = tape.max_pool2(h)?;
            h = tape.conv2d(h, param_vars[2], param_vars[3])?;
            h = tape.relu(h)?;
            h = tape.max_pool2(h)?;
            h = tape.reshape(h, vec![batch, c2 * fhw * fhw])?;
            h = tape.matmul(h, param_vars[4])?;
            h = tape.add_row(h, param_vars[5])?;
            Ok(h)
        }
    }
}

/// Raw per-class scores for a head mode, before any scale or margin.
/// `w` is the softmax weight leaf, `b` the bias leaf (read only by the
/// standard head).
pub fn head_scores(tape: &mut Tape, mode: HeadMode, z: Var, w: Var, b: Var) -> Result<Var> {
    match mode {
        HeadMode::Standard => {
            BIAS_READS.fetch_add(1, Ordering::Relaxed);
            let logits = tape.matmul(z, w)?;
            tape.add_row(logits, b)
        }
        HeadMode::FnOnly => {
            let zt = tape.fn_normalize_rows(z)?;
            tape.matmul(zt, w)
        }
        HeadMode::WnOnly => {
            let wt = tape.wn_normalize_cols(w)?;
            tape.matmul(z, wt)
        }
        HeadMode::He => {
            let zt = tape.fn_normalize_rows(z)?;
            let wt = tape.wn_normalize_cols(w)?;
            tape.matmul(zt, wt)
        }
        HeadMode::MHe => {
            let zt = tape.fn_normalize_rows(z)?;
            let wt = tape.wn_normalize_cols(w)?;
            let cos = tape.matmul(zt, wt)?;
            let theta = tape.arccos(cos)?;
            tape.negate(theta)
        }
    }
}

/// Convenience: bind the model and produce head scores in one call.
pub fn bind_scores(
    tape: &mut Tape,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    mode: HeadMode,
    x: &Tensor,
) -> Result<(BoundModel, Var)> {
    let bound = bind_features(tape, arch, params, x)?;
    let scores = head_scores(
        tape,
        mode,
        bound.features,
        bound.softmax_w_var(),
        bound.softmax_b_var(),
    )?;
    Ok((bound, scores))
}

/// Project each row of `z` onto the unit sphere. Errors if a row norm is
/// below 1e-12, identifying the row.
pub fn fn_normalize(z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(z.clone())?;
    let out = tape.fn_normalize_rows(v)?;
    Ok(tape.value(out).clone())
}

/// Project each column of `w` onto the unit sphere. Errors if a column norm
/// is below 1e-12.
pub fn wn_normalize(w: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(w.clone())?;
    let out = tape.wn_normalize_cols(v)?;
    Ok(tape.value(out).clone())
}

/// Extract features for a batch without keeping the tape.
pub fn extract_features(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind_features(&mut tape, arch, params, x)?;
    Ok(tape.value(bound.features).clone())
}

/// Raw head scores for a batch without keeping the tape.
pub fn head_logits(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    cfg: &HeadConfig,
    x: &Tensor,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let (_, scores) = bind_scores(&mut tape, arch, params, cfg.mode, x)?;
    Ok(tape.value(scores).clone())
}

/// Inference: probabilities (rows sum to 1) and argmax labels, ties broken
/// toward the smallest class index. Scale and margin are train-only and do
/// not appear here.
pub fn predict(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    cfg: &HeadConfig,
    x: &Tensor,
) -> Result<(Tensor, Vec<usize>)> {
    let scores = head_logits(arch, params, cfg, x)?;
    let probs = crate::tape::softmax(&scores)?;
    let labels = argmax_rows(&probs);
    Ok((probs, labels))
}

/// Row-wise argmax with ties broken toward the smallest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let (r, c) = (t.rows(), t.row_len());
    let d = t.data();
    (0..r)
        .map(|i| {
            let mut best = 0;
            for j in 1..c {
                if d[i * c + j] > d[i * c + best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
