//! Training and adversarial loss functions.
//!
//! The composite training objectives mirror the three framework rows, each
//! with and without hypersphere embedding:
//!
//! - pgd-at:  L_T = CE(f(x*), y)                         L_A = CE(f(x'), y)
//! - alp:     L_T = a CE(f(x), y) + (1-a) CE(f(x*), y)
//!                  + lambda ||W^T (z - z*)||_2          L_A = CE(f(x'), y)
//! - trades:  L_T = CE(f(x), y) + lambda CE(f(x*), f(x)) L_A = CE(f(x'), f(x))
//!
//! With an angular head (he, m-he) every CE-vs-label term routes through the
//! scaled margin loss `-log softmax(s (scores - m 1_y))`, the pairing term
//! uses the normalized weights and features, and the CE-between term stays
//! margin- and scale-free. Ablation heads (fn-only, wn-only) use plain CE on
//! their own scores, since those scores are not bounded cosines.

use crate::error::{contract, Result};
use crate::model::{
    bind_features, bind_features_from, head_scores, ArchitectureSpec, BoundModel, HeadConfig,
    HeadMode, ModelParams,
};
use crate::tape::{softmax, Tape, Var};
use crate::tensor::Tensor;

/// Loss selector: the four attack objectives, the pairing regularizer, and
/// the three composite training rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// CE between the prediction on the candidate and the true label.
    CeVsLabel,
    /// CE between the prediction on the candidate and the (frozen) clean
    /// prediction; the trades adversarial objective.
    CeVsPrediction,
    /// The scaled angular-margin CE; the "adaptive" attack objective.
    MarginCe,
    /// Negated logit-margin hinge; the C&W l-inf style objective.
    CwInf,
    /// Batch-mean l2 norm of the paired logit difference.
    PairingNorm,
    CompositeAlp,
    CompositeTrades,
    CompositePgdAt,
}

impl ObjectiveKind {
    pub fn is_composite(&self) -> bool {
        matches!(
            self,
            ObjectiveKind::CompositeAlp
                | ObjectiveKind::CompositeTrades
                | ObjectiveKind::CompositePgdAt
        )
    }
}

/// A fully specified objective: kind, head routing, and mixing weights.
/// `alpha`/`lambda` only matter for the composites that read them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub head: HeadConfig,
    pub alpha: f64,
    pub lambda: f64,
    /// Attack-side toggle: compute the objective through softmax(W^T z~)
    /// instead of softmax(W^T z + b). Valid only against a standard head.
    pub fn_in_objective: bool,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind, head: HeadConfig) -> Self {
        ObjectiveSpec { kind, head, alpha: 0.5, lambda: 0.5, fn_in_objective: false }
    }

    pub fn with_weights(mut self, alpha: f64, lambda: f64) -> Self {
        self.alpha = alpha;
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(contract(format!("alpha = {} must lie in [0, 1]", self.alpha)));
        }
        if self.lambda < 0.0 {
            return Err(contract(format!("lambda = {} must be nonnegative", self.lambda)));
        }
        if self.fn_in_objective && self.head.mode != HeadMode::Standard {
            return Err(contract(
                "fn_in_objective applies only to models with a standard head",
            ));
        }
        Ok(())
    }

    /// Head mode the adversarial objective evaluates through.
    pub fn attack_mode(&self) -> HeadMode {
        if self.fn_in_objective {
            HeadMode::FnOnly
        } else {
            self.head.mode
        }
    }
}

// ── Tape-level loss builders ─────────────────────────────────────────────

/// Per-example CE against labels from raw scores: -log softmax(scores)[y].
/// Returns a (B,) vector node.
pub fn ce_vec(tape: &mut Tape, scores: Var, y: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(scores)?;
    let picked = tape.pick(ls, y)?;
    tape.negate(picked)
}

/// Batch-mean CE against labels.
pub fn ce_mean(tape: &mut Tape, scores: Var, y: &[usize]) -> Result<Var> {
    let v = ce_vec(tape, scores, y)?;
    tape.mean(v)
}

/// Per-example scaled angular-margin CE: CE of s (scores - m 1_y) vs y.
/// Only meaningful for angular heads.
pub fn margin_ce_vec(
    tape: &mut Tape,
    scores: Var,
    y: &[usize],
    mode: HeadMode,
    s: f64,
    m: f64,
) -> Result<Var> {
    if !mode.is_angular() {
        return Err(contract(format!(
            "margin CE needs an angular head, got {}",
            mode.name()
        )));
    }
    let (b, l) = {
        let sh = tape.value(scores).shape();
        (sh[0], sh[1])
    };
    if y.len() != b {
        return Err(contract(format!("{b} score rows but {} labels", y.len())));
    }
    let mut margin = vec![0.0; b * l];
    for (i, &yi) in y.iter().enumerate() {
        if yi >= l {
            return Err(contract(format!("label {yi} out of range 0..{l}")));
        }
        margin[i * l + yi] = m;
    }
    let margin_leaf = tape.leaf(Tensor::matrix(b, l, margin)?)?;
    let shifted = tape.sub(scores, margin_leaf)?;
    let scaled = tape.scale(shifted, s)?;
    ce_vec(tape, scaled, y)
}

/// Per-example soft-label CE: -sum_i target_i log softmax(scores)_i, with the
/// target given as a probability node already on the tape (live for training,
/// a frozen leaf for attack objectives).
pub fn ce_between_vec(tape: &mut Tape, scores: Var, target_probs: Var) -> Result<Var> {
    let ls = tape.log_softmax(scores)?;
    let prod = tape.mul(target_probs, ls)?;
    let rows = tape.sum_axis(prod, 1)?;
    let b = tape.value(rows).shape()[0];
    let flat = tape.reshape(rows, vec![b])?;
    tape.negate(flat)
}

/// Batch-mean l2 norm of W_eff^T (z_clean - z_adv).
pub fn pairing_norm_mean(
    tape: &mut Tape,
    w_eff: Var,
    z_clean: Var,
    z_adv: Var,
) -> Result<Var> {
    let diff = tape.sub(z_clean, z_adv)?;
    let logit_diff = tape.matmul(diff, w_eff)?;
    let norms = tape.l2norm_axis(logit_diff, 1)?;
    tape.mean(norms)
}

/// Per-example logit-margin hinge: max(Z_y - max_{i != y} Z_i, 0).
/// Zero exactly when the example is already misclassified (ties count).
pub fn cw_inf_vec(tape: &mut Tape, logits: Var, y: &[usize]) -> Result<Var> {
    let (b, l) = {
        let sh = tape.value(logits).shape();
        (sh[0], sh[1])
    };
    if y.len() != b {
        return Err(contract(format!("{b} logit rows but {} labels", y.len())));
    }
    let zy = tape.pick(logits, y)?;
    // mask out the true class with a huge negative shift before the row max
    let mut mask = vec![0.0; b * l];
    for (i, &yi) in y.iter().enumerate() {
        if yi >= l {
            return Err(contract(format!("label {yi} out of range 0..{l}")));
        }
        mask[i * l + yi] = -1e30;
    }
    let mask_leaf = tape.leaf(Tensor::matrix(b, l, mask)?)?;
    let masked = tape.add(logits, mask_leaf)?;
    let other_max = tape.max_axis(masked, 1)?;
    let other_flat = tape.reshape(other_max, vec![b])?;
    let diff = tape.sub(zy, other_flat)?;
    tape.relu(diff)
}

// ── Plain-tensor wrappers (spec operation surfaces) ──────────────────────

/// Batch-mean CE loss from raw scores via the stable log-softmax.
pub fn ce_loss(scores: &Tensor, y: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(scores.clone())?;
    let loss = ce_mean(&mut tape, v, y)?;
    tape.value(loss).item()
}

/// Batch-mean soft-label CE between probability rows:
/// -sum_i f(x)_i log f(x')_i. Both arguments must be probability rows.
pub fn ce_between(pred_adv: &Tensor, pred_clean: &Tensor) -> Result<f64> {
    if pred_adv.shape() != pred_clean.shape() {
        return Err(contract("ce_between shapes differ"));
    }
    let (r, c) = (pred_clean.rows(), pred_clean.row_len());
    for (name, t) in [("pred-adv", pred_adv), ("pred-clean", pred_clean)] {
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                return Err(contract(format!("{name} row {i} is not a probability vector")));
            }
        }
    }
    let mut total = 0.0;
    for i in 0..r {
        for j in 0..c {
            let p = pred_clean.data()[i * c + j];
            if p > 0.0 {
                let q = pred_adv.data()[i * c + j];
                total -= p * q.ln();
            }
        }
    }
    let v = total / r as f64;
    if !v.is_finite() {
        return Err(crate::error::numeric("ce_between hit a zero predicted probability"));
    }
    Ok(v)
}

/// Batch-mean scaled angular-margin CE from raw angular scores.
pub fn margin_ce_loss(scores: &Tensor, y: &[usize], mode: HeadMode, s: f64, m: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(scores.clone())?;
    let vec = margin_ce_vec(&mut tape, v, y, mode, s, m)?;
    let loss = tape.mean(vec)?;
    tape.value(loss).item()
}

/// Batch-mean l2 norm of W_eff^T (z_clean - z_adv) on plain tensors.
pub fn pairing_norm(w_eff: &Tensor, z_clean: &Tensor, z_adv: &Tensor) -> Result<f64> {
    if z_clean.shape() != z_adv.shape() {
        return Err(contract("pairing_norm feature shapes differ"));
    }
    let mut tape = Tape::new();
    let w = tape.leaf(w_eff.clone())?;
    let zc = tape.leaf(z_clean.clone())?;
    let za = tape.leaf(z_adv.clone())?;
    let loss = pairing_norm_mean(&mut tape, w, zc, za)?;
    tape.value(loss).item()
}

/// Batch-mean C&W l-inf hinge on plain logits.
pub fn cw_inf_objective(logits: &Tensor, y: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(logits.clone())?;
    let vec = cw_inf_vec(&mut tape, v, y)?;
    let loss = tape.mean(vec)?;
    tape.value(loss).item()
}

// ── Composite training losses ─────────────────────────────────────────────

/// CE-vs-label routed by head mode: margin CE for angular heads, plain CE
/// otherwise.
fn routed_ce_mean(
    tape: &mut Tape,
    head: &HeadConfig,
    scores: Var,
    y: &[usize],
) -> Result<Var> {
    if head.mode.is_angular() {
        let v = margin_ce_vec(tape, scores, y, head.mode, head.s, head.m)?;
        tape.mean(v)
    } else {
        ce_mean(tape, scores, y)
    }
}

/// Effective pairing weight matrix node for a head mode: normalized columns
/// whenever the head normalizes weights.
fn pairing_weight(tape: &mut Tape, mode: HeadMode, w: Var) -> Result<Var> {
    match mode {
        HeadMode::Standard | HeadMode::FnOnly => Ok(w),
        _ => tape.wn_normalize_cols(w),
    }
}

/// Effective pairing feature node: normalized rows whenever the head
/// normalizes features.
fn pairing_feature(tape: &mut Tape, mode: HeadMode, z: Var) -> Result<Var> {
    match mode {
        HeadMode::Standard | HeadMode::WnOnly => Ok(z),
        _ => tape.fn_normalize_rows(z),
    }
}

/// The model bound on a tape with both the clean and adversarial branches
/// sharing one set of parameter leaves.
pub struct TrainingGraph {
    pub clean: BoundModel,
    pub adv_input: Var,
    pub adv_features: Var,
    pub loss: Var,
}

/// Record the selected composite training loss on a tape. Gradients then
/// flow to every parameter leaf (`graph.clean.param_vars`) and to both
/// input leaves.
pub fn training_loss_on_tape(
    tape: &mut Tape,
    spec: &ObjectiveSpec,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x_clean: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
) -> Result<TrainingGraph> {
    spec.validate()?;
    if !spec.kind.is_composite() {
        return Err(contract(format!(
            "training loss needs a composite objective, got {:?}",
            spec.kind
        )));
    }
    if x_clean.shape() != x_adv.shape() {
        return Err(contract("clean and adversarial batches must share a shape"));
    }
    let batch = x_clean.shape()[0];
    if y.len() != batch {
        return Err(contract(format!("{batch} inputs but {} labels", y.len())));
    }
    let clean = bind_features(tape, arch, params, x_clean)?;
    let adv_input = tape.leaf(x_adv.clone())?;
    let adv_features = bind_features_from(tape, arch, &clean.param_vars, adv_input, batch)?;
    let w = clean.softmax_w_var();
    let b = clean.softmax_b_var();
    let head = &spec.head;

    let loss = match spec.kind {
        ObjectiveKind::CompositePgdAt => {
            let adv_scores = head_scores(tape, head.mode, adv_features, w, b)?;
            routed_ce_mean(tape, head, adv_scores, y)?
        }
        ObjectiveKind::CompositeAlp => {
            let clean_scores = head_scores(tape, head.mode, clean.features, w, b)?;
            let adv_scores = head_scores(tape, head.mode, adv_features, w, b)?;
            let clean_ce = routed_ce_mean(tape, head, clean_scores, y)?;
            let adv_ce = routed_ce_mean(tape, head, adv_scores, y)?;
            let w_eff = pairing_weight(tape, head.mode, w)?;
            let zc = pairing_feature(tape, head.mode, clean.features)?;
            let za = pairing_feature(tape, head.mode, adv_features)?;
            let pair = pairing_norm_mean(tape, w_eff, zc, za)?;
            let a = tape.scale(clean_ce, spec.alpha)?;
            let bterm = tape.scale(adv_ce, 1.0 - spec.alpha)?;
            let c = tape.scale(pair, spec.lambda)?;
            let ab = tape.add(a, bterm)?;
            tape.add(ab, c)?
        }
        ObjectiveKind::CompositeTrades => {
            let clean_scores = head_scores(tape, head.mode, clean.features, w, b)?;
            let adv_scores = head_scores(tape, head.mode, adv_features, w, b)?;
            let clean_ce = routed_ce_mean(tape, head, clean_scores, y)?;
            // robust term: CE(f(x*), f(x)) on margin-free scores, gradients
            // flowing through both predictions as in the reference trades loss
            let clean_ls = tape.log_softmax(clean_scores)?;
            let clean_probs = tape.exp(clean_ls)?;
            let robust_vec = ce_between_vec(tape, adv_scores, clean_probs)?;
            let robust = tape.mean(robust_vec)?;
            let scaled = tape.scale(robust, spec.lambda)?;
            tape.add(clean_ce, scaled)?
        }
        _ => unreachable!("composite check above"),
    };
    Ok(TrainingGraph { clean, adv_input, adv_features, loss })
}

/// Composite training loss value on plain tensors.
pub fn training_loss(
    spec: &ObjectiveSpec,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x_clean: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let graph = training_loss_on_tape(&mut tape, spec, arch, params, x_clean, x_adv, y)?;
    tape.value(graph.loss).item()
}

/// Composite training loss and its gradients w.r.t. every parameter tensor,
/// in declaration order.
pub fn training_grads(
    spec: &ObjectiveSpec,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x_clean: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let graph = training_loss_on_tape(&mut tape, spec, arch, params, x_clean, x_adv, y)?;
    let loss = tape.value(graph.loss).item()?;
    tape.backward(graph.loss)?;
    let grads = graph
        .clean
        .param_vars
        .iter()
        .map(|&v| tape.grad(v))
        .collect();
    Ok((loss, grads))
}

// ── Adversarial objectives ────────────────────────────────────────────────

/// Target the adversarial objective compares against.
#[derive(Debug, Clone)]
pub enum AdvTarget {
    /// True labels.
    Labels(Vec<usize>),
    /// Frozen clean prediction (trades attack objective); rows sum to 1.
    FrozenPrediction(Tensor),
}

/// An adversarial objective recorded on a tape: the model binding plus
/// per-example and batch-mean loss nodes. The attack maximizes the mean;
/// restart selection compares per-example values.
pub struct AdvGraph {
    pub bound: BoundModel,
    pub per_example: Var,
    pub mean: Var,
}

/// Record the adversarial objective for candidate inputs `x_cand`.
pub fn adversarial_loss_on_tape(
    tape: &mut Tape,
    spec: &ObjectiveSpec,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x_cand: &Tensor,
    target: &AdvTarget,
) -> Result<AdvGraph> {
    spec.validate()?;
    let bound = bind_features(tape, arch, params, x_cand)?;
    let w = bound.softmax_w_var();
    let b = bound.softmax_b_var();
    let mode = spec.attack_mode();
    let scores = head_scores(tape, mode, bound.features, w, b)?;
    let per_example = match (spec.kind, target) {
        (ObjectiveKind::CeVsLabel, AdvTarget::Labels(y)) => ce_vec(tape, scores, y)?,
        (ObjectiveKind::MarginCe, AdvTarget::Labels(y)) => {
            margin_ce_vec(tape, scores, y, mode, spec.head.s, spec.head.m)?
        }
        (ObjectiveKind::CwInf, AdvTarget::Labels(y)) => {
            let hinge = cw_inf_vec(tape, scores, y)?;
            tape.negate(hinge)?
        }
        (ObjectiveKind::CeVsPrediction, AdvTarget::FrozenPrediction(p)) => {
            let frozen = tape.leaf(p.clone())?;
            ce_between_vec(tape, scores, frozen)?
        }
        (kind, _) => {
            return Err(contract(format!(
                "objective {kind:?} incompatible with the provided attack target"
            )))
        }
    };
    let mean = tape.mean(per_example)?;
    Ok(AdvGraph { bound, per_example, mean })
}

/// Per-example adversarial loss values (forward only).
pub fn adversarial_loss_values(
    spec: &ObjectiveSpec,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x_cand: &Tensor,
    target: &AdvTarget,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let graph = adversarial_loss_on_tape(&mut tape, spec, arch, params, x_cand, target)?;
    Ok(tape.value(graph.per_example).clone())
}

/// Batch-mean adversarial loss (forward only).
pub fn adversarial_loss(
    spec: &ObjectiveSpec,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x_cand: &Tensor,
    target: &AdvTarget,
) -> Result<f64> {
    let mut tape = Tape::new();
    let graph = adversarial_loss_on_tape(&mut tape, spec, arch, params, x_cand, target)?;
    tape.value(graph.mean).item()
}

/// Per-example losses and the gradient of the batch-mean adversarial loss
/// w.r.t. the candidate inputs.
pub fn adversarial_grad_x(
    spec: &ObjectiveSpec,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x_cand: &Tensor,
    target: &AdvTarget,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let graph = adversarial_loss_on_tape(&mut tape, spec, arch, params, x_cand, target)?;
    let losses = tape.value(graph.per_example).clone();
    tape.backward(graph.mean)?;
    Ok((losses, tape.grad(graph.bound.input)))
}

/// Clean prediction used as the frozen trades attack target.
pub fn frozen_prediction(
    spec: &ObjectiveSpec,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x_clean: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind_features(&mut tape, arch, params, x_clean)?;
    let w = bound.softmax_w_var();
    let b = bound.softmax_b_var();
    let scores = head_scores(&mut tape, spec.attack_mode(), bound.features, w, b)?;
    softmax(tape.value(scores))
}
