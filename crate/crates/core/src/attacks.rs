//! First-order white-box attacks and zeroth-order gradient estimators.
//!
//! Every iterative attack follows the update
//!     x(t) = x(t-1) + eta * U_p(direction(t-1))
//! with U_2(u) = u/||u||_2 and U_inf(u) = sgn(u) (sgn(0) = 0), followed by
//! projection onto the eps-ball around the clean input (coordinate clip for
//! l-inf, radial rescale for l2) and the input range, after every step.
//!
//! Per-example randomness derives from counter-based seeds, so crafting a
//! batch in chunks (or in parallel) agrees bitwise with crafting it whole.
//! Gradients used for stepping are seeded from the summed per-example loss,
//! which keeps each example's gradient independent of batch composition.

use crate::error::{contract, Result};
use crate::model::{ArchitectureSpec, ModelParams};
use crate::objectives::{
    adversarial_loss_on_tape, frozen_prediction, AdvTarget, ObjectiveKind, ObjectiveSpec,
};
use crate::seeds;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::Rng;

/// Perturbation norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L2,
    LInf,
}

impl NormKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "2" | "l2" => Ok(NormKind::L2),
            "inf" | "linf" => Ok(NormKind::LInf),
            _ => Err(contract(format!("unknown norm `{s}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormKind::L2 => "2",
            NormKind::LInf => "inf",
        }
    }
}

/// Everything an attack needs besides the model: budget, step, iterations,
/// initialization, restarts, the adversarial objective, and clamp bounds.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub norm: NormKind,
    pub eps: f64,
    pub eta: f64,
    pub steps: usize,
    pub rand_init: bool,
    pub restarts: usize,
    /// Momentum decay; zero turns the momentum term off (bim/pgd).
    pub momentum_mu: f64,
    pub input_range: (f64, f64),
    pub objective: ObjectiveSpec,
    pub seed: u64,
}

impl AttackSpec {
    pub fn pgd(objective: ObjectiveSpec, eps: f64, eta: f64, steps: usize, seed: u64) -> Self {
        AttackSpec {
            norm: NormKind::LInf,
            eps,
            eta,
            steps,
            rand_init: true,
            restarts: 1,
            momentum_mu: 0.0,
            input_range: (0.0, 1.0),
            objective,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.eps < 0.0 {
            return Err(contract(format!("eps = {} must be nonnegative", self.eps)));
        }
        if self.steps == 0 {
            return Err(contract("steps must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(contract("restarts must be at least 1"));
        }
        if self.input_range.0 >= self.input_range.1 {
            return Err(contract("input range must be a nonempty interval"));
        }
        Ok(())
    }

    /// Advisory notes; nothing here is enforced.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.eta > self.eps && self.eps > 0.0 {
            w.push(format!(
                "step size eta = {} exceeds budget eps = {}; steps will be clipped",
                self.eta, self.eps
            ));
        }
        w
    }
}

/// Zeroth-order estimator family: Gaussian directions (nes) or Rademacher
/// directions (spsa).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZoFamily {
    Nes,
    Spsa,
}

impl ZoFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nes" => Ok(ZoFamily::Nes),
            "spsa" => Ok(ZoFamily::Spsa),
            _ => Err(contract(format!("unknown estimator `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradEstimatorSpec {
    pub family: ZoFamily,
    pub q: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl GradEstimatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(contract("estimator sample count q must be at least 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(contract(format!("sigma = {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

// ── Steepest directions ──────────────────────────────────────────────────

/// Write U_p(u) into `out`: the unit-ball maximizer of u^T v. For p=2 a
/// vanishing u maps to the zero vector; for p=inf, sgn(0) = 0.
pub fn steepest_dir_slice(u: &[f64], norm: NormKind, out: &mut [f64]) {
    match norm {
        NormKind::LInf => {
            for (o, &v) in out.iter_mut().zip(u) {
                *o = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        NormKind::L2 => {
            let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                out.fill(0.0);
            } else {
                for (o, &v) in out.iter_mut().zip(u) {
                    *o = v / n;
                }
            }
        }
    }
}

/// U_p(u) on a whole tensor (treated as one vector).
pub fn steepest_direction(u: &Tensor, norm: NormKind) -> Tensor {
    let mut out = vec![0.0; u.len()];
    steepest_dir_slice(u.data(), norm, &mut out);
    Tensor::new(u.shape().to_vec(), out).expect("direction entries are finite")
}

/// Project `cand` onto the eps-ball around `origin` and the input range,
/// in place, for one example slice.
pub fn project_slice(
    origin: &[f64],
    cand: &mut [f64],
    norm: NormKind,
    eps: f64,
    range: (f64, f64),
) {
    match norm {
        NormKind::LInf => {
            for (c, &o) in cand.iter_mut().zip(origin) {
                let lo = (o - eps).max(range.0);
                let hi = (o + eps).min(range.1);
                *c = c.clamp(lo, hi);
            }
        }
        NormKind::L2 => {
            let mut sq = 0.0;
            for (c, &o) in cand.iter().zip(origin) {
                sq += (c - o) * (c - o);
            }
            let n = sq.sqrt();
            if n > eps {
                let scale = eps / n;
                for (c, &o) in cand.iter_mut().zip(origin) {
                    *c = o + (*c - o) * scale;
                }
            }
            // clamping toward the range can only shrink each deviation, so
            // the ball constraint survives it
            for c in cand.iter_mut() {
                *c = c.clamp(range.0, range.1);
            }
        }
    }
}

fn rand_init_slice(
    origin: &[f64],
    out: &mut [f64],
    norm: NormKind,
    eps: f64,
    range: (f64, f64),
    seed: u64,
) {
    let mut rng = seeds::rng(seed);
    match norm {
        NormKind::LInf => {
            // uniform over the box intersection of the ball and the range
            for (o, &x) in out.iter_mut().zip(origin) {
                let lo = (x - eps).max(range.0);
                let hi = (x + eps).min(range.1);
                *o = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            }
        }
        NormKind::L2 => {
            // direction uniform on the sphere, radius eps * U^(1/d), then
            // the range clamp (a mild distortion at the boundary)
            let d = origin.len();
            let mut dir: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
            let r = eps * rng.gen::<f64>().powf(1.0 / d as f64);
            for v in dir.iter_mut() {
                *v *= r / n;
            }
            for ((o, &x), dv) in out.iter_mut().zip(origin).zip(dir) {
                *o = (x + dv).clamp(range.0, range.1);
            }
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

// ── White-box attacks ────────────────────────────────────────────────────

/// Per-example losses plus the gradient of the summed loss w.r.t. x. The
/// summed seed keeps each example's gradient free of the batch size.
fn loss_and_grad(
    spec: &ObjectiveSpec,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x: &Tensor,
    target: &AdvTarget,
) -> Result<(Vec<f64>, Tensor)> {
    let mut tape = Tape::new();
    let graph = adversarial_loss_on_tape(&mut tape, spec, arch, params, x, target)?;
    let losses = tape.value(graph.per_example).data().to_vec();
    let total = tape.sum(graph.per_example)?;
    tape.backward(total)?;
    Ok((losses, tape.grad(graph.bound.input)))
}

fn attack_target(
    spec: &ObjectiveSpec,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x_clean: &Tensor,
    y: &[usize],
) -> Result<AdvTarget> {
    match spec.kind {
        ObjectiveKind::CeVsPrediction => Ok(AdvTarget::FrozenPrediction(frozen_prediction(
            spec, arch, params, x_clean,
        )?)),
        _ => Ok(AdvTarget::Labels(y.to_vec())),
    }
}

/// Single-step sign attack: x + eps * sgn(grad L_A), clamped to the input
/// range. Requires the l-inf norm.
pub fn fgsm(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    spec: &AttackSpec,
    x: &Tensor,
    y: &[usize],
) -> Result<Tensor> {
    spec.validate()?;
    if spec.norm != NormKind::LInf {
        return Err(contract("fgsm is defined for the l-inf norm"));
    }
    let target = attack_target(&spec.objective, arch, params, x, y)?;
    let (_, grad) = loss_and_grad(&spec.objective, arch, params, x, &target)?;
    let d = x.row_len();
    let mut out = x.data().to_vec();
    for i in 0..x.shape()[0] {
        let row = &mut out[i * d..(i + 1) * d];
        let grow = &grad.data()[i * d..(i + 1) * d];
        let mut dir = vec![0.0; d];
        steepest_dir_slice(grow, NormKind::LInf, &mut dir);
        for (v, dv) in row.iter_mut().zip(&dir) {
            *v += spec.eps * dv;
        }
        project_slice(
            &x.data()[i * d..(i + 1) * d],
            row,
            NormKind::LInf,
            spec.eps,
            spec.input_range,
        );
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// One restart of the iterative attack on a batch (or sub-batch). `base`
/// is the global example index of row 0, used for per-example seeding.
fn iterative_restart(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    spec: &AttackSpec,
    x: &Tensor,
    target: &AdvTarget,
    restart: usize,
    base: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let b = x.shape()[0];
    let d = x.row_len();
    let mut cur = x.data().to_vec();
    if spec.rand_init {
        for i in 0..b {
            let seed = seeds::split_index(
                seeds::split_index(seeds::split(spec.seed, "attack-init"), (base + i) as u64),
                restart as u64,
            );
            let row = &mut cur[i * d..(i + 1) * d];
            rand_init_slice(
                &x.data()[i * d..(i + 1) * d],
                row,
                spec.norm,
                spec.eps,
                spec.input_range,
                seed,
            );
        }
    }
    let mut momentum = vec![0.0; b * d];
    let mut cand = Tensor::new(x.shape().to_vec(), cur)?;
    for _ in 0..spec.steps {
        let (_, grad) = loss_and_grad(&spec.objective, arch, params, &cand, target)?;
        let mut next = cand.data().to_vec();
        for i in 0..b {
            let grow = &grad.data()[i * d..(i + 1) * d];
            let mut dir = vec![0.0; d];
            if spec.momentum_mu > 0.0 {
                let l1: f64 = grow.iter().map(|v| v.abs()).sum();
                let mrow = &mut momentum[i * d..(i + 1) * d];
                for (m, &g) in mrow.iter_mut().zip(grow) {
                    *m = spec.momentum_mu * *m + if l1 > 0.0 { g / l1 } else { 0.0 };
                }
                steepest_dir_slice(mrow, spec.norm, &mut dir);
            } else {
                steepest_dir_slice(grow, spec.norm, &mut dir);
            }
            let row = &mut next[i * d..(i + 1) * d];
            for (v, dv) in row.iter_mut().zip(&dir) {
                *v += spec.eta * dv;
            }
            project_slice(
                &x.data()[i * d..(i + 1) * d],
                row,
                spec.norm,
                spec.eps,
                spec.input_range,
            );
        }
        cand = Tensor::new(x.shape().to_vec(), next)?;
    }
    let mut tape = Tape::new();
    let graph = adversarial_loss_on_tape(&mut tape, &spec.objective, arch, params, &cand, target)?;
    let losses = tape.value(graph.per_example).data().to_vec();
    Ok((cand, losses))
}

/// Iterative first-order attack (bim / pgd / mim, selected by the spec's
/// rand-init and momentum fields). Returns, per example, the restart
/// candidate with the highest adversarial loss.
pub fn iterative_attack(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    spec: &AttackSpec,
    x: &Tensor,
    y: &[usize],
) -> Result<Tensor> {
    spec.validate()?;
    let b = x.shape()[0];
    let d = x.row_len();
    if y.len() != b {
        return Err(contract(format!("{b} inputs but {} labels", y.len())));
    }
    let chunk = chunk_size(b);
    if chunk < b {
        return iterative_attack_chunked(arch, params, spec, x, y, chunk);
    }
    let mut best = x.data().to_vec();
    let mut best_loss = vec![f64::NEG_INFINITY; b];
    for r in 0..spec.restarts {
        // trades-style targets are re-evaluated per restart, frozen inside it
        let target = attack_target(&spec.objective, arch, params, x, y)?;
        let (cand, losses) = iterative_restart(arch, params, spec, x, &target, r, 0)?;
        for i in 0..b {
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                best[i * d..(i + 1) * d].copy_from_slice(&cand.data()[i * d..(i + 1) * d]);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), best)
}

/// Thread cap from SPHERE_AT_THREADS; defaults to 1 for exact
/// reproducibility (chunked crafting is bitwise identical either way).
pub fn thread_cap() -> usize {
    std::env::var("SPHERE_AT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn chunk_size(batch: usize) -> usize {
    let threads = thread_cap();
    if threads <= 1 || batch <= 1 {
        batch
    } else {
        batch.div_ceil(threads)
    }
}

fn slice_rows(x: &Tensor, lo: usize, hi: usize) -> Tensor {
    let d = x.row_len();
    let mut shape = x.shape().to_vec();
    shape[0] = hi - lo;
    Tensor::new(shape, x.data()[lo * d..hi * d].to_vec()).expect("row slice is well formed")
}

fn iterative_attack_chunked(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    spec: &AttackSpec,
    x: &Tensor,
    y: &[usize],
    chunk: usize,
) -> Result<Tensor> {
    let b = x.shape()[0];
    let d = x.row_len();
    let ranges: Vec<(usize, usize)> = (0..b.div_ceil(chunk))
        .map(|c| (c * chunk, ((c + 1) * chunk).min(b)))
        .collect();
    let mut results: Vec<Result<Tensor>> = Vec::with_capacity(ranges.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|&(lo, hi)| {
                let xs = slice_rows(x, lo, hi);
                let ys = y[lo..hi].to_vec();
                scope.spawn(move || attack_chunk(arch, params, spec, &xs, &ys, lo))
            })
            .collect();
        for h in handles {
            results.push(h.join().expect("attack worker panicked"));
        }
    });
    let mut out = vec![0.0; b * d];
    for (&(lo, hi), res) in ranges.iter().zip(results) {
        let t = res?;
        out[lo * d..hi * d].copy_from_slice(t.data());
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Full restart loop for one chunk. Per-example seeds use global indices so
/// the result is independent of the chunking.
fn attack_chunk(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    spec: &AttackSpec,
    x: &Tensor,
    y: &[usize],
    base: usize,
) -> Result<Tensor> {
    let b = x.shape()[0];
    let d = x.row_len();
    let mut best = x.data().to_vec();
    let mut best_loss = vec![f64::NEG_INFINITY; b];
    for r in 0..spec.restarts {
        let target = attack_target(&spec.objective, arch, params, x, y)?;
        let (cand, losses) = iterative_restart(arch, params, spec, x, &target, r, base)?;
        for i in 0..b {
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                best[i * d..(i + 1) * d].copy_from_slice(&cand.data()[i * d..(i + 1) * d]);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), best)
}

/// Swap the adversarial objective onto the fn-only head (or back). Valid
/// only against models with a standard head.
pub fn fn_in_objective_toggle(spec: &ObjectiveSpec, flag: bool) -> Result<ObjectiveSpec> {
    let mut out = *spec;
    out.fn_in_objective = flag;
    out.validate()?;
    Ok(out)
}

// ── Zeroth-order estimation ──────────────────────────────────────────────

/// Logit margin J(x, y) = Z(x)_y - max_{i != y} Z(x)_i per example, on the
/// head scores selected by the objective.
fn margin_j(
    spec: &ObjectiveSpec,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x: &Tensor,
    y: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (bound, scores) =
        crate::model::bind_scores(&mut tape, arch, params, spec.attack_mode(), x)?;
    let _ = bound;
    let t = tape.value(scores);
    let (b, l) = (t.rows(), t.row_len());
    let mut out = vec![0.0; b];
    for i in 0..b {
        let row = &t.data()[i * l..(i + 1) * l];
        let zy = row[y[i]];
        let other = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != y[i])
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        out[i] = zy - other;
    }
    Ok(out)
}

/// Two-sided smoothed estimate of grad_x J:
/// (1/q) sum_i (J(x + sigma u_i) - J(x - sigma u_i)) / (2 sigma) * u_i,
/// with u_i Gaussian (nes) or Rademacher (spsa). Deterministic per seed.
pub fn zo_gradient(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    objective: &ObjectiveSpec,
    est: &GradEstimatorSpec,
    x: &Tensor,
    y: &[usize],
) -> Result<Tensor> {
    est.validate()?;
    let b = x.shape()[0];
    let d = x.row_len();
    let mut acc = vec![0.0; b * d];
    let root = seeds::split(est.seed, "zo");
    for s in 0..est.q {
        let mut u = vec![0.0; b * d];
        for i in 0..b {
            let seed = seeds::split_index(seeds::split_index(root, i as u64), s as u64);
            let mut rng = seeds::rng(seed);
            let row = &mut u[i * d..(i + 1) * d];
            match est.family {
                ZoFamily::Nes => {
                    for v in row.iter_mut() {
                        *v = normal(&mut rng);
                    }
                }
                ZoFamily::Spsa => {
                    for v in row.iter_mut() {
                        *v = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    }
                }
            }
        }
        let mut xp = x.data().to_vec();
        let mut xm = x.data().to_vec();
        for (idx, &uv) in u.iter().enumerate() {
            xp[idx] += est.sigma * uv;
            xm[idx] -= est.sigma * uv;
        }
        let jp = margin_j(objective, arch, params, &Tensor::new(x.shape().to_vec(), xp)?, y)?;
        let jm = margin_j(objective, arch, params, &Tensor::new(x.shape().to_vec(), xm)?, y)?;
        for i in 0..b {
            let coeff = (jp[i] - jm[i]) / (2.0 * est.sigma);
            for j in 0..d {
                acc[i * d + j] += coeff * u[i * d + j];
            }
        }
    }
    for v in acc.iter_mut() {
        *v /= est.q as f64;
    }
    Tensor::new(x.shape().to_vec(), acc)
}

/// Iterative attack driven by the zeroth-order estimate instead of the
/// exact gradient. The untargeted objective is the negated margin -J, so
/// steps follow U_p(-g_hat).
pub fn zo_attack(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    spec: &AttackSpec,
    est: &GradEstimatorSpec,
    x: &Tensor,
    y: &[usize],
) -> Result<Tensor> {
    spec.validate()?;
    est.validate()?;
    let b = x.shape()[0];
    let d = x.row_len();
    if y.len() != b {
        return Err(contract(format!("{b} inputs but {} labels", y.len())));
    }
    let mut best = x.data().to_vec();
    let mut best_obj = vec![f64::NEG_INFINITY; b];
    for r in 0..spec.restarts {
        let mut cur = x.data().to_vec();
        if spec.rand_init {
            for i in 0..b {
                let seed = seeds::split_index(
                    seeds::split_index(seeds::split(spec.seed, "attack-init"), i as u64),
                    r as u64,
                );
                let row = &mut cur[i * d..(i + 1) * d];
                rand_init_slice(
                    &x.data()[i * d..(i + 1) * d],
                    row,
                    spec.norm,
                    spec.eps,
                    spec.input_range,
                    seed,
                );
            }
        }
        let mut cand = Tensor::new(x.shape().to_vec(), cur)?;
        for t in 0..spec.steps {
            let step_est = GradEstimatorSpec {
                seed: seeds::split_index(est.seed, (r * spec.steps + t) as u64),
                ..*est
            };
            let ghat = zo_gradient(arch, params, &spec.objective, &step_est, &cand, y)?;
            let mut next = cand.data().to_vec();
            for i in 0..b {
                let grow = &ghat.data()[i * d..(i + 1) * d];
                let neg: Vec<f64> = grow.iter().map(|v| -v).collect();
                let mut dir = vec![0.0; d];
                steepest_dir_slice(&neg, spec.norm, &mut dir);
                let row = &mut next[i * d..(i + 1) * d];
                for (v, dv) in row.iter_mut().zip(&dir) {
                    *v += spec.eta * dv;
                }
                project_slice(
                    &x.data()[i * d..(i + 1) * d],
                    row,
                    spec.norm,
                    spec.eps,
                    spec.input_range,
                );
            }
            cand = Tensor::new(x.shape().to_vec(), next)?;
        }
        let obj = margin_j(&spec.objective, arch, params, &cand, y)?;
        for i in 0..b {
            if -obj[i] > best_obj[i] {
                best_obj[i] = -obj[i];
                best[i * d..(i + 1) * d].copy_from_slice(&cand.data()[i * d..(i + 1) * d]);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), best)
}

/// Exact gradient of the margin J per example; the oracle the zo estimators
/// are judged against.
pub fn margin_grad_exact(
    spec: &ObjectiveSpec,
    arch: &ArchitectureSpec,
    params: &ModelParams,
    x: &Tensor,
    y: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (bound, scores) =
        crate::model::bind_scores(&mut tape, arch, params, spec.attack_mode(), x)?;
    let zy = tape.pick(scores, y)?;
    let t = tape.value(scores);
    let (b, l) = (t.rows(), t.row_len());
    let mut mask = vec![0.0; b * l];
    for (i, &yi) in y.iter().enumerate() {
        mask[i * l + yi] = -1e30;
    }
    let mask_leaf = tape.leaf(Tensor::matrix(b, l, mask)?)?;
    let masked = tape.add(scores, mask_leaf)?;
    let mx = tape.max_axis(masked, 1)?;
    let mx_flat = tape.reshape(mx, vec![b])?;
    let j = tape.sub(zy, mx_flat)?;
    let total = tape.sum(j)?;
    tape.backward(total)?;
    Ok(tape.grad(bound.input))
}
