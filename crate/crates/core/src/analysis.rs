//! Executable verification of the gradient identities behind the attack and
//! training analysis, plus the gradient-ratio diagnostics.
//!
//! The checks here compare reverse-mode gradients against explicitly
//! reconstructed right-hand sides:
//!
//! - CE decomposition:  grad_x' CE(f(x'), f(x)) =
//!       -sum_{i != j} f(x)_i f(x')_j grad_x' (W_ij^T z'),  W_ij = W_i - W_j
//! - parameter form (standard head):  -grad_w CE =
//!       sum_{l != y} f_l ||W_yl|| (cos(theta_yl) grad ||z||
//!                                  + ||z|| grad cos(theta_yl))
//! - parameter form (fn head): same with the norm-gradient term absent
//! - batch softmax-weight gradient:  -grad_{W_l} CE(D) =
//!       sum_{x in D_l} z - sum_{x in D} f(x)_l z   (sum reduction)
//! - first-order expansion:  L(x + eps U_p(g)) - L(x) - eps ||g||_q has
//!       order eps^2 on smooth losses and vanishes on linear ones.
//!
//! Relative deviations are measured against the overall gradient scale:
//! max|a - b| / max(max|a|, max|b|, 1e-12).

use serde::Serialize;

use crate::attacks::{steepest_direction, NormKind};
use crate::error::{contract, Result};
use crate::model::{
    bind_features, head_scores, ArchitectureSpec, HeadMode, ModelParams,
};
use crate::objectives::{
    adversarial_grad_x, adversarial_loss, AdvTarget, ObjectiveKind, ObjectiveSpec,
};
use crate::seeds;
use crate::tape::{softmax, Tape};
use crate::tensor::Tensor;

/// Scale-relative deviation between two equally shaped tensors.
pub fn rel_deviation(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-12);
    crate::tensor::max_abs_diff(a, b) / scale
}

// ── Probe generation ─────────────────────────────────────────────────────

/// A random small MLP with the requested head-relevant dimensions, plus an
/// input whose relu pre-activations all sit at least 1e-6 from the kink
/// (resampled until they do).
pub struct Probe {
    pub arch: ArchitectureSpec,
    pub params: ModelParams,
    pub x: Tensor,
}

pub fn make_probe(seed: u64, input_dim: usize, hidden: usize, feat: usize, classes: usize) -> Probe {
    for attempt in 0..64 {
        let s = seeds::split_index(seed, attempt);
        let arch = ArchitectureSpec::mlp(input_dim, vec![hidden], feat, classes);
        let params = ModelParams::init(&arch, s).expect("probe init");
        let mut rng = seeds::rng(seeds::split(s, "probe-x"));
        let data: Vec<f64> = (0..input_dim)
            .map(|_| rand::Rng::gen_range(&mut rng, 0.05..0.95))
            .collect();
        let x = Tensor::matrix(1, input_dim, data).expect("probe x");
        if min_relu_preactivation(&arch, &params, &x) > 1e-6 {
            return Probe { arch, params, x };
        }
    }
    panic!("could not find a probe away from relu kinks");
}

/// Smallest |pre-activation| across the relu layers of an MLP forward pass.
/// Non-MLP architectures report infinity (no shared-kink hazard to dodge).
pub fn min_relu_preactivation(arch: &ArchitectureSpec, params: &ModelParams, x: &Tensor) -> f64 {
    let crate::model::ArchKind::Mlp { input_dim, hidden } = &arch.kind else {
        return f64::INFINITY;
    };
    let mut dims = vec![*input_dim];
    dims.extend_from_slice(hidden);
    dims.push(arch.feature_dim);
    let mut cur = x.data().to_vec();
    let mut min_abs = f64::INFINITY;
    for layer in 0..dims.len() - 1 {
        let (din, dout) = (dims[layer], dims[layer + 1]);
        let w = params.tensors[2 * layer].data();
        let b = params.tensors[2 * layer + 1].data();
        let mut next = vec![0.0; dout];
        for j in 0..dout {
            let mut acc = b[j];
            for i in 0..din {
                acc += cur[i] * w[i * dout + j];
            }
            next[j] = acc;
        }
        if layer + 1 < dims.len() - 1 {
            for v in &next {
                min_abs = min_abs.min(v.abs());
            }
            for v in next.iter_mut() {
                *v = v.max(0.0);
            }
        }
        cur = next;
    }
    min_abs
}

// ── Lemma 2: CE gradient decomposition ───────────────────────────────────

/// Gradient of the scalar (W_i - W_j)^T z(x') w.r.t. x', on the standard
/// extractor (bias drops out of the difference).
fn residual_logit_grad(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x: &Tensor,
    i: usize,
    j: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind_features(&mut tape, arch, params, x)?;
    let logits = tape.matmul(bound.features, bound.softmax_w_var())?;
    let si = tape.pick(logits, &[i])?;
    let sj = tape.pick(logits, &[j])?;
    let diff = tape.sub(si, sj)?;
    let seed = tape.sum(diff)?;
    tape.backward(seed)?;
    Ok(tape.grad(bound.input))
}

/// Soft or hard comparison target for the decomposition check.
pub enum DecompTarget {
    Soft(Tensor),
    Hard(usize),
}

/// Compare the reverse-mode gradient of CE(f(x'), target) w.r.t. x' against
/// the explicit residual-logit double sum. Returns the max abs deviation.
pub fn verify_ce_gradient_decomposition(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x_adv: &Tensor,
    target: &DecompTarget,
) -> Result<f64> {
    let classes = arch.classes;
    let head = crate::model::HeadConfig::standard();
    let (probs_adv, _) = crate::model::predict(arch, params, &head, x_adv)?;
    let f_adv = probs_adv.data();

    let (target_probs, autodiff) = match target {
        DecompTarget::Soft(p) => {
            let spec = ObjectiveSpec::new(ObjectiveKind::CeVsPrediction, head);
            let (_, g) = adversarial_grad_x(
                &spec,
                arch,
                params,
                x_adv,
                &AdvTarget::FrozenPrediction(p.clone()),
            )?;
            (p.data().to_vec(), g)
        }
        DecompTarget::Hard(y) => {
            let spec = ObjectiveSpec::new(ObjectiveKind::CeVsLabel, head);
            let (_, g) =
                adversarial_grad_x(&spec, arch, params, x_adv, &AdvTarget::Labels(vec![*y]))?;
            let mut onehot = vec![0.0; classes];
            onehot[*y] = 1.0;
            (onehot, g)
        }
    };

    // -sum_{i != j} f(x)_i f(x')_j grad(W_ij^T z')
    let mut explicit = vec![0.0; x_adv.len()];
    for i in 0..classes {
        if target_probs[i] == 0.0 {
            continue;
        }
        for j in 0..classes {
            if i == j {
                continue;
            }
            let coeff = -target_probs[i] * f_adv[j];
            let g = residual_logit_grad(arch, params, x_adv, i, j)?;
            for (e, gv) in explicit.iter_mut().zip(g.data()) {
                *e += coeff * gv;
            }
        }
    }
    let explicit_t = Tensor::new(x_adv.shape().to_vec(), explicit)?;
    Ok(crate::tensor::max_abs_diff(&autodiff, &explicit_t))
}

// ── Eq. (10): dominant-term diagnostic ───────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionReport {
    pub full_norm: f64,
    pub dominant_norm: f64,
    pub cosine: f64,
    pub residual_norm: f64,
}

/// How well the single dominant term f(x)_y f(x')_{y*} grad(W_{y y*}^T z')
/// approximates the full decomposition. Diagnostic only; no pass/fail.
pub fn dominant_term_report(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x_clean: &Tensor,
    x_adv: &Tensor,
    y: usize,
    y_star: usize,
) -> Result<DecompositionReport> {
    if y == y_star {
        return Err(contract("dominant term needs y* != y"));
    }
    let head = crate::model::HeadConfig::standard();
    let (p_clean, _) = crate::model::predict(arch, params, &head, x_clean)?;
    let (p_adv, _) = crate::model::predict(arch, params, &head, x_adv)?;
    let spec = ObjectiveSpec::new(ObjectiveKind::CeVsPrediction, head);
    let (_, full) = adversarial_grad_x(
        &spec,
        arch,
        params,
        x_adv,
        &AdvTarget::FrozenPrediction(p_clean.clone()),
    )?;
    let coeff = -p_clean.data()[y] * p_adv.data()[y_star];
    let gd = residual_logit_grad(arch, params, x_adv, y, y_star)?;
    let dominant: Vec<f64> = gd.data().iter().map(|v| coeff * v).collect();

    let full_norm = full.l2_norm();
    let dom_norm = dominant.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = full.data().iter().zip(&dominant).map(|(a, b)| a * b).sum();
    let cosine = if full_norm > 0.0 && dom_norm > 0.0 {
        dot / (full_norm * dom_norm)
    } else {
        0.0
    };
    let residual_norm = full
        .data()
        .iter()
        .zip(&dominant)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(DecompositionReport { full_norm, dominant_norm: dom_norm, cosine, residual_norm })
}

// ── Eq. (11)/(13): direction factorization ───────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct DirectionReport {
    /// max deviation of U_inf(c u) from U_inf(u) over probes (exact zero
    /// expected: sign is scale-free)
    pub inf_scale_dev: f64,
    /// max deviation of U_2(c u) from U_2(u) over probes
    pub l2_scale_dev: f64,
    /// cosine between the fn-head attack direction and -U_2(grad cos) in the
    /// two-class case, where the dominant term is the whole sum
    pub fn_direction_cosine: f64,
}

/// Check U_p(c u) == U_p(u) for c > 0 and, for a two-class fn-only head,
/// that the CE attack direction collapses onto -U_p(grad cos theta').
pub fn verify_direction_factorization(seed: u64) -> Result<DirectionReport> {
    let mut rng = seeds::rng(seeds::split(seed, "directions"));
    let mut inf_dev = 0.0f64;
    let mut l2_dev = 0.0f64;
    for _ in 0..100 {
        let u: Vec<f64> = (0..12).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
        let c: f64 = rand::Rng::gen_range(&mut rng, 0.1..50.0);
        let t = Tensor::vector(&u);
        let scaled = Tensor::vector(&u.iter().map(|v| c * v).collect::<Vec<_>>());
        let di = steepest_direction(&t, NormKind::LInf);
        let dic = steepest_direction(&scaled, NormKind::LInf);
        inf_dev = inf_dev.max(crate::tensor::max_abs_diff(&di, &dic));
        let d2 = steepest_direction(&t, NormKind::L2);
        let d2c = steepest_direction(&scaled, NormKind::L2);
        l2_dev = l2_dev.max(crate::tensor::max_abs_diff(&d2, &d2c));
    }

    // two-class fn-only model: find (x, x') predicted into different classes
    let mut cosine = f64::NAN;
    'outer: for attempt in 0..64 {
        let probe = make_probe(seeds::split_index(seed, attempt), 4, 8, 5, 2);
        let fn_head = crate::model::HeadConfig::new(HeadMode::FnOnly, 1.0, 0.0)?;
        let mut rng2 = seeds::rng(seeds::split_index(seeds::split(seed, "dirx"), attempt));
        for _ in 0..32 {
            let xa: Vec<f64> = (0..4).map(|_| rand::Rng::gen_range(&mut rng2, 0.05..0.95)).collect();
            let xadv = Tensor::matrix(1, 4, xa)?;
            let (_, lc) = crate::model::predict(&probe.arch, &probe.params, &fn_head, &probe.x)?;
            let (_, la) = crate::model::predict(&probe.arch, &probe.params, &fn_head, &xadv)?;
            let (y, y_star) = (lc[0], la[0]);
            if y == y_star {
                continue;
            }
            // attack direction: U_2 of the CE-between gradient on the fn head
            let spec = ObjectiveSpec::new(ObjectiveKind::CeVsPrediction, fn_head);
            let (pc, _) = crate::model::predict(&probe.arch, &probe.params, &fn_head, &probe.x)?;
            let (_, g) = adversarial_grad_x(
                &spec,
                &probe.arch,
                &probe.params,
                &xadv,
                &AdvTarget::FrozenPrediction(pc),
            )?;
            let attack_dir = steepest_direction(&g, NormKind::L2);
            // -U_2(grad cos theta'_{y y*}) built from the normalized feature
            let gcos = cos_theta_grad_x(&probe.arch, &probe.params, &xadv, y, y_star)?;
            let neg: Vec<f64> = gcos.data().iter().map(|v| -v).collect();
            let ref_dir = steepest_direction(&Tensor::new(gcos.shape().to_vec(), neg)?, NormKind::L2);
            let dot: f64 = attack_dir.data().iter().zip(ref_dir.data()).map(|(a, b)| a * b).sum();
            cosine = dot;
            break 'outer;
        }
    }
    Ok(DirectionReport { inf_scale_dev: inf_dev, l2_scale_dev: l2_dev, fn_direction_cosine: cosine })
}

/// grad_x cos(angle(W_y - W_y*, z~(x))) via the tape.
fn cos_theta_grad_x(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x: &Tensor,
    y: usize,
    y_star: usize,
) -> Result<Tensor> {
    let w = params.softmax_w();
    let (f, _l) = (w.shape()[0], w.shape()[1]);
    let mut wyl = vec![0.0; f];
    for r in 0..f {
        wyl[r] = w.data()[r * w.shape()[1] + y] - w.data()[r * w.shape()[1] + y_star];
    }
    let wnorm = wyl.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut tape = Tape::new();
    let bound = bind_features(&mut tape, arch, params, x)?;
    let zt = tape.fn_normalize_rows(bound.features)?;
    let wcol = tape.leaf(Tensor::matrix(f, 1, wyl)?)?;
    let dot = tape.matmul(zt, wcol)?;
    let cos = tape.scale(dot, 1.0 / wnorm)?;
    let seed = tape.sum(cos)?;
    tape.backward(seed)?;
    Ok(tape.grad(bound.input))
}

// ── Eq. (14)/(15): parameter-gradient forms ──────────────────────────────

/// grad w.r.t. every extractor tensor of ||z(x)|| and of cos(theta_yl) for
/// one residual weight, sharing a single forward tape.
fn norm_and_cos_grads(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x: &Tensor,
    wyl: &[f64],
    extractor_count: usize,
) -> Result<(Vec<Tensor>, Vec<Tensor>, f64, f64)> {
    let wnorm = wyl.iter().map(|v| v * v).sum::<f64>().sqrt();
    let f = wyl.len();
    let mut tape = Tape::new();
    let bound = bind_features(&mut tape, arch, params, x)?;
    let znorm = tape.l2norm_axis(bound.features, 1)?;
    let znorm_s = tape.sum(znorm)?;
    let wcol = tape.leaf(Tensor::matrix(f, 1, wyl.to_vec())?)?;
    let dot = tape.matmul(bound.features, wcol)?;
    let dot_flat = tape.reshape(dot, vec![1])?;
    let denom_rows = tape.l2norm_axis(bound.features, 1)?;
    let denom_flat = tape.reshape(denom_rows, vec![1])?;
    let denom = tape.scale(denom_flat, wnorm)?;
    let cos = tape.divide(dot_flat, denom)?;
    let cos_s = tape.sum(cos)?;

    let znorm_val = tape.value(znorm_s).item()?;
    let cos_val = tape.value(cos_s).item()?;

    tape.backward(znorm_s)?;
    let gnorm: Vec<Tensor> = bound.param_vars[..extractor_count]
        .iter()
        .map(|&v| tape.grad(v))
        .collect();
    tape.backward(cos_s)?;
    let gcos: Vec<Tensor> = bound.param_vars[..extractor_count]
        .iter()
        .map(|&v| tape.grad(v))
        .collect();
    Ok((gnorm, gcos, znorm_val, cos_val))
}

/// Reconstruct the parameter-gradient identity for the standard head
/// (with the norm term) or the fn-only head (norm term structurally absent)
/// and compare against the reverse-mode loss gradient. Returns the max
/// scale-relative deviation across extractor tensors.
pub fn verify_parameter_gradient_forms(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x: &Tensor,
    y: usize,
    mode: HeadMode,
) -> Result<f64> {
    if mode != HeadMode::Standard && mode != HeadMode::FnOnly {
        return Err(contract("parameter-form check runs on standard or fn-only heads"));
    }
    let classes = arch.classes;
    let extractor_count = params.tensors.len() - 2;
    let w = params.softmax_w();
    let l_cols = w.shape()[1];

    // direct loss gradient w.r.t. extractor parameters; bias is zeroed so the
    // standard head matches the identity's bias-free setting
    let mut p = params.clone();
    let last = p.tensors.len() - 1;
    p.tensors[last] = Tensor::zeros(vec![classes]);
    let probs = {
        let head = crate::model::HeadConfig { mode, s: 1.0, m: 0.0 };
        let (pr, _) = crate::model::predict(arch, &p, &head, x)?;
        pr
    };
    let lhs: Vec<Tensor> = {
        let mut tape = Tape::new();
        let bound = bind_features(&mut tape, arch, &p, x)?;
        let scores = head_scores(
            &mut tape,
            mode,
            bound.features,
            bound.softmax_w_var(),
            bound.softmax_b_var(),
        )?;
        let loss = crate::objectives::ce_mean(&mut tape, scores, &[y])?;
        tape.backward(loss)?;
        bound.param_vars[..extractor_count]
            .iter()
            .map(|&v| tape.grad(v))
            .collect()
    };

    // explicit right-hand side, term by term over l != y
    let mut rhs: Vec<Tensor> = lhs
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect();
    for l in 0..classes {
        if l == y {
            continue;
        }
        let mut wyl = vec![0.0; w.shape()[0]];
        for r in 0..w.shape()[0] {
            wyl[r] = w.data()[r * l_cols + y] - w.data()[r * l_cols + l];
        }
        let wnorm = wyl.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (gnorm, gcos, znorm, cos) =
            norm_and_cos_grads(arch, &p, x, &wyl, extractor_count)?;
        let fl = probs.data()[l];
        for t in 0..extractor_count {
            let dst = rhs[t].data_mut();
            match mode {
                HeadMode::Standard => {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += fl
                            * wnorm
                            * (cos * gnorm[t].data()[i] + znorm * gcos[t].data()[i]);
                    }
                }
                _ => {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += fl * wnorm * gcos[t].data()[i];
                    }
                }
            }
        }
    }

    // identity states -grad CE = rhs
    let mut dev = 0.0f64;
    for t in 0..extractor_count {
        let neg_lhs = Tensor::new(
            lhs[t].shape().to_vec(),
            lhs[t].data().iter().map(|v| -v).collect(),
        )?;
        dev = dev.max(rel_deviation(&neg_lhs, &rhs[t]));
    }
    Ok(dev)
}

// ── Eq. (16): batch softmax-weight gradient ──────────────────────────────

/// Compare the reverse-mode gradient of the sum-reduced batch CE w.r.t. the
/// softmax weight matrix against sum_{x in D_l} z - sum_{x in D} f(x)_l z,
/// column by column. Bias frozen at zero. Returns the max abs deviation.
pub fn verify_softmax_weight_gradient(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x: &Tensor,
    y: &[usize],
) -> Result<f64> {
    let classes = arch.classes;
    let mut p = params.clone();
    let last = p.tensors.len() - 1;
    p.tensors[last] = Tensor::zeros(vec![classes]);

    let (autodiff, feats, probs) = {
        let mut tape = Tape::new();
        let bound = bind_features(&mut tape, arch, &p, x)?;
        let logits = tape.matmul(bound.features, bound.softmax_w_var())?;
        let ls = tape.log_softmax(logits)?;
        let picked = tape.pick(ls, y)?;
        let neg = tape.negate(picked)?;
        let loss = tape.sum(neg)?;
        let feats = tape.value(bound.features).clone();
        let probs = softmax(tape.value(logits))?;
        tape.backward(loss)?;
        (tape.grad(bound.softmax_w_var()), feats, probs)
    };

    let fdim = arch.feature_dim;
    let mut explicit = vec![0.0; fdim * classes];
    let b = x.shape()[0];
    for l in 0..classes {
        for k in 0..b {
            let z = &feats.data()[k * fdim..(k + 1) * fdim];
            let indicator = if y[k] == l { 1.0 } else { 0.0 };
            let coeff = indicator - probs.data()[k * classes + l];
            // -grad_{W_l} = sum coeff * z  =>  grad_{W_l} = -sum coeff * z
            for r in 0..fdim {
                explicit[r * classes + l] -= coeff * z[r];
            }
        }
    }
    let explicit_t = Tensor::matrix(fdim, classes, explicit)?;
    Ok(crate::tensor::max_abs_diff(&autodiff, &explicit_t))
}

// ── Fig. 2: gradient ratios ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct BlockRatio {
    pub block: String,
    /// mean over probe examples of ||grad L(x*)|| / ||grad L(x)||; absent
    /// when every clean gradient in the block vanished
    pub mean_ratio: Option<f64>,
    pub examples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradRatioReport {
    pub blocks: Vec<BlockRatio>,
}

impl GradRatioReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,mean_ratio,examples\n");
        for b in &self.blocks {
            match b.mean_ratio {
                Some(r) => out.push_str(&format!("{},{},{}\n", b.block, r, b.examples)),
                None => out.push_str(&format!("{},,{}\n", b.block, b.examples)),
            }
        }
        out
    }

    pub fn all_finite_positive(&self) -> bool {
        self.blocks
            .iter()
            .filter_map(|b| b.mean_ratio)
            .all(|r| r.is_finite() && r > 0.0)
    }
}

/// Per-parameter-block expectation of ||grad L(x*)|| / ||grad L(x)|| over
/// matched clean/adversarial batches, one example at a time. The loss is the
/// head-routed CE (margin-aware for angular heads) selected by `objective`.
pub fn grad_ratio(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    objective: &ObjectiveSpec,
    x_clean: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
) -> Result<GradRatioReport> {
    if x_clean.shape() != x_adv.shape() {
        return Err(contract("clean and adversarial batches must share a shape"));
    }
    let b = x_clean.shape()[0];
    let d = x_clean.row_len();
    let names = params.block_names().to_vec();
    let nblocks = names.len();
    let mut sums = vec![0.0f64; nblocks];
    let mut counts = vec![0usize; nblocks];
    for i in 0..b {
        let mut shape = x_clean.shape().to_vec();
        shape[0] = 1;
        let xc = Tensor::new(shape.clone(), x_clean.data()[i * d..(i + 1) * d].to_vec())?;
        let xa = Tensor::new(shape, x_adv.data()[i * d..(i + 1) * d].to_vec())?;
        let gc = per_example_block_grads(arch, params, objective, &xc, y[i])?;
        let ga = per_example_block_grads(arch, params, objective, &xa, y[i])?;
        for t in 0..nblocks {
            let nc = gc[t].l2_norm();
            let na = ga[t].l2_norm();
            if nc > 0.0 {
                sums[t] += na / nc;
                counts[t] += 1;
            }
        }
    }
    let blocks = names
        .into_iter()
        .enumerate()
        .map(|(t, block)| BlockRatio {
            block,
            mean_ratio: if counts[t] > 0 { Some(sums[t] / counts[t] as f64) } else { None },
            examples: counts[t],
        })
        .collect();
    Ok(GradRatioReport { blocks })
}

fn per_example_block_grads(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    objective: &ObjectiveSpec,
    x: &Tensor,
    y: usize,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = bind_features(&mut tape, arch, params, x)?;
    let scores = head_scores(
        &mut tape,
        objective.head.mode,
        bound.features,
        bound.softmax_w_var(),
        bound.softmax_b_var(),
    )?;
    let loss = if objective.head.mode.is_angular() {
        let v = crate::objectives::margin_ce_vec(
            &mut tape,
            scores,
            &[y],
            objective.head.mode,
            objective.head.s,
            objective.head.m,
        )?;
        tape.mean(v)?
    } else {
        crate::objectives::ce_mean(&mut tape, scores, &[y])?
    };
    tape.backward(loss)?;
    Ok(bound.param_vars.iter().map(|&v| tape.grad(v)).collect())
}

// ── Lemma 1: first-order expansion scaling ───────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Report {
    /// (eps, |L(x + eps U_p(g)) - L(x) - eps ||g||_q|) per grid point
    pub remainders: Vec<(f64, f64)>,
    /// log-log regression slope over remainders above 1e-14; None when the
    /// remainder vanishes everywhere (linear objectives)
    pub slope: Option<f64>,
    pub max_remainder: f64,
}

/// Scaling of the first-order expansion remainder for a scalar objective.
/// `grad` must be the gradient of `f` at `x`.
pub fn lemma1_check_fn<F>(
    mut f: F,
    x: &Tensor,
    grad: &Tensor,
    eps_grid: &[f64],
    norm: NormKind,
) -> Result<Lemma1Report>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps_grid.len() < 3 {
        return Err(contract("lemma-1 grid needs at least 3 epsilon values"));
    }
    let base = f(x)?;
    let dir = steepest_direction(grad, norm);
    let dual = match norm {
        NormKind::LInf => grad.data().iter().map(|v| v.abs()).sum::<f64>(),
        NormKind::L2 => grad.l2_norm(),
    };
    let mut remainders = Vec::with_capacity(eps_grid.len());
    let mut max_rem = 0.0f64;
    for &eps in eps_grid {
        let stepped: Vec<f64> = x
            .data()
            .iter()
            .zip(dir.data())
            .map(|(xv, dv)| xv + eps * dv)
            .collect();
        let val = f(&Tensor::new(x.shape().to_vec(), stepped)?)?;
        let rem = (val - base - eps * dual).abs();
        max_rem = max_rem.max(rem);
        remainders.push((eps, rem));
    }
    let pts: Vec<(f64, f64)> = remainders
        .iter()
        .filter(|(_, r)| *r > 1e-14)
        .map(|&(e, r)| (e.ln(), r.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        Some((n * sxy - sx * sy) / (n * sxx - sx * sx))
    } else {
        None
    };
    Ok(Lemma1Report { remainders, slope, max_remainder: max_rem })
}

/// Lemma-1 scaling on a model CE objective: remainder of the expansion of
/// the adversarial loss along its steepest direction.
pub fn lemma1_scaling_check(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    objective: &ObjectiveSpec,
    x: &Tensor,
    y: &[usize],
    eps_grid: &[f64],
    norm: NormKind,
) -> Result<Lemma1Report> {
    let target = AdvTarget::Labels(y.to_vec());
    let (_, grad) = adversarial_grad_x(objective, arch, params, x, &target)?;
    lemma1_check_fn(
        |xp| adversarial_loss(objective, arch, params, xp, &target),
        x,
        &grad,
        eps_grid,
        norm,
    )
}
