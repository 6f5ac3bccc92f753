//! Outer minimization loops: standard training plus the adversarial
//! frameworks (pgd-at, alp, trades, free-at, fast-at), each usable with any
//! head mode.
//!
//! Per batch the generic frameworks (1) solve the inner maximization with
//! the row's adversarial objective and (2) take one momentum-SGD step on the
//! row's training objective. free-at replays each batch `m` times, sharing
//! one backward pass per replay between the parameter update and the
//! persistent perturbation update; fast-at takes a single randomized FGSM
//! step of size 1.25 eps per batch.
//!
//! Everything is reproducible: all randomness flows from the train seed
//! through fixed labels, and all reductions run in fixed order.

use std::time::Instant;

use rand::Rng;

use crate::attacks::{iterative_attack, steepest_dir_slice, AttackSpec, NormKind};
use crate::data::{batches, Dataset};
use crate::error::{contract, numeric, Result};
use crate::model::{ArchitectureSpec, HeadConfig, ModelParams};
use crate::objectives::{training_grads, ObjectiveKind, ObjectiveSpec};
use crate::seeds;
use crate::tensor::Tensor;

/// Training framework tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framework {
    Standard,
    PgdAt,
    Alp,
    Trades,
    FreeAt,
    FastAt,
}

impl Framework {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Framework::Standard),
            "pgd-at" => Ok(Framework::PgdAt),
            "alp" => Ok(Framework::Alp),
            "trades" => Ok(Framework::Trades),
            "free-at" => Ok(Framework::FreeAt),
            "fast-at" => Ok(Framework::FastAt),
            _ => Err(contract(format!("unknown framework `{s}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Framework::Standard => "standard",
            Framework::PgdAt => "pgd-at",
            Framework::Alp => "alp",
            Framework::Trades => "trades",
            Framework::FreeAt => "free-at",
            Framework::FastAt => "fast-at",
        }
    }
}

/// Full training recipe. `attack` carries the inner-maximization budget;
/// its objective field is overridden per framework row.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub framework: Framework,
    pub head: HeadConfig,
    pub attack: AttackSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the epoch budget at which the learning rate decays by
    /// 0.1; strictly increasing, inside (0,1).
    pub lr_decay_epochs: Vec<f64>,
    /// alp clean/adversarial mixing weight.
    pub alpha: f64,
    /// alp pairing weight, or the trades robust-term weight.
    pub lambda: f64,
    /// free-at replay count m.
    pub free_replays: usize,
    pub seed: u64,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.attack.validate()?;
        if self.epochs == 0 {
            return Err(contract("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(contract("batch size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(contract(format!("lr = {} must be positive", self.lr)));
        }
        if self.free_replays == 0 {
            return Err(contract("free_replays must be at least 1"));
        }
        let mut prev = 0.0;
        for &f in &self.lr_decay_epochs {
            if f <= prev || f >= 1.0 {
                return Err(contract(
                    "lr decay fractions must be strictly increasing inside (0,1)",
                ));
            }
            prev = f;
        }
        Ok(())
    }

    /// Training-objective row for this framework and head.
    pub fn training_objective(&self) -> ObjectiveSpec {
        let kind = match self.framework {
            Framework::Alp => ObjectiveKind::CompositeAlp,
            Framework::Trades => ObjectiveKind::CompositeTrades,
            // standard, pgd-at, free-at and fast-at all fit the
            // CE(f(x*), y) row; standard just feeds x* = x
            _ => ObjectiveKind::CompositePgdAt,
        };
        ObjectiveSpec::new(kind, self.head).with_weights(self.alpha, self.lambda)
    }

    /// Adversarial-objective row for this framework and head: trades attacks
    /// the clean prediction, everything else attacks the label.
    pub fn adversarial_objective(&self) -> ObjectiveSpec {
        let kind = match self.framework {
            Framework::Trades => ObjectiveKind::CeVsPrediction,
            _ => ObjectiveKind::CeVsLabel,
        };
        ObjectiveSpec::new(kind, self.head).with_weights(self.alpha, self.lambda)
    }
}

/// One completed epoch (for free-at, one completed data pass).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub train_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// CSV with the fixed schema. `include_wall` off writes 0 in the wall
    /// column so reruns compare byte-identically.
    pub fn to_csv(&self, include_wall: bool) -> String {
        let mut out = String::from("epoch,clean_acc,robust_acc,train_loss,wall_ms\n");
        for r in &self.records {
            let wall = if include_wall { r.wall_ms } else { 0 };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.clean_acc, r.robust_acc, r.train_loss, wall
            ));
        }
        out
    }
}

/// Momentum-SGD buffers, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &ModelParams) -> Self {
        SgdState {
            velocity: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }
}

/// Heavy-ball update: v <- mu v + g + wd theta; theta <- theta - lr v.
/// A non-finite gradient aborts before any tensor is touched.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(contract(format!(
            "{} gradients for {} parameter tensors",
            grads.len(),
            params.tensors.len()
        )));
    }
    for (g, t) in grads.iter().zip(&params.tensors) {
        if g.shape() != t.shape() {
            return Err(contract("gradient shape mismatch in sgd step"));
        }
        if !g.is_finite() {
            return Err(numeric("non-finite gradient; optimizer step aborted"));
        }
    }
    for i in 0..params.tensors.len() {
        let theta = params.tensors[i].data_mut();
        let v = state.velocity[i].data_mut();
        let g = grads[i].data();
        for j in 0..theta.len() {
            v[j] = momentum * v[j] + g[j] + weight_decay * theta[j];
            theta[j] -= lr * v[j];
        }
    }
    Ok(())
}

fn lr_at(spec: &TrainSpec, epoch: usize, total: usize) -> f64 {
    let mut lr = spec.lr;
    for &f in &spec.lr_decay_epochs {
        if epoch >= (f * total as f64).floor() as usize {
            lr *= 0.1;
        }
    }
    lr
}

/// Classification accuracy on a dataset, optionally under a per-example
/// white-box attack crafted against this same model.
pub fn evaluate(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    head: &HeadConfig,
    attack: Option<&AttackSpec>,
    ds: &Dataset,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(contract("evaluation dataset is empty"));
    }
    let chunk = 256;
    let mut correct = 0usize;
    let d = ds.inputs.row_len();
    let mut i = 0;
    while i < ds.len() {
        let hi = (i + chunk).min(ds.len());
        let mut shape = ds.inputs.shape().to_vec();
        shape[0] = hi - i;
        let x = Tensor::new(shape, ds.inputs.data()[i * d..hi * d].to_vec())?;
        let y = &ds.labels[i..hi];
        let x_eval = match attack {
            Some(a) => iterative_attack(arch, params, a, &x, y)?,
            None => x,
        };
        let (_, pred) = crate::model::predict(arch, params, head, &x_eval)?;
        correct += pred.iter().zip(y).filter(|(p, t)| p == t).count();
        i = hi;
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Hook invoked after every completed epoch (or free-at data pass) with the
/// freshly updated parameters and the history so far.
pub type EpochHook<'a> = &'a mut dyn FnMut(&ModelParams, &TrainHistory) -> Result<()>;

/// Train a model from scratch. See [`train_with_hook`] for checkpointing.
pub fn train(
    arch: &ArchitectureSpec,
    spec: &TrainSpec,
    train_data: &Dataset,
    eval_data: &Dataset,
) -> Result<(ModelParams, TrainHistory)> {
    train_with_hook(arch, spec, train_data, eval_data, &mut |_, _| Ok(()))
}

pub fn train_with_hook(
    arch: &ArchitectureSpec,
    spec: &TrainSpec,
    train_data: &Dataset,
    eval_data: &Dataset,
    hook: EpochHook<'_>,
) -> Result<(ModelParams, TrainHistory)> {
    spec.validate()?;
    arch.validate()?;
    if train_data.is_empty() {
        return Err(contract("training dataset is empty"));
    }
    if train_data.classes != arch.classes {
        return Err(contract(format!(
            "dataset has {} classes, architecture expects {}",
            train_data.classes, arch.classes
        )));
    }
    let mut params = ModelParams::init(arch, spec.seed)?;
    let mut state = SgdState::new(&params);
    let mut history = TrainHistory::default();

    match spec.framework {
        Framework::FreeAt => {
            free_at_train(arch, spec, train_data, eval_data, &mut params, &mut state, &mut history, hook)?;
        }
        _ => {
            generic_train(arch, spec, train_data, eval_data, &mut params, &mut state, &mut history, hook)?;
        }
    }
    Ok((params, history))
}

fn eval_attack_spec(spec: &TrainSpec) -> AttackSpec {
    // fixed evaluation attack: the training budget with the label objective,
    // random init, one restart, margin-free (adaptive evaluation is a
    // separate, explicit choice)
    let mut a = spec.attack.clone();
    a.objective = ObjectiveSpec::new(ObjectiveKind::CeVsLabel, spec.head);
    a.rand_init = true;
    a.restarts = 1;
    a.seed = seeds::split(spec.seed, "eval-attack");
    a
}

fn epoch_eval(
    arch: &ArchitectureSpec,
    spec: &TrainSpec,
    params: &ModelParams,
    eval_data: &Dataset,
) -> Result<(f64, f64)> {
    let clean = evaluate(arch, params, &spec.head, None, eval_data)?;
    let robust = if spec.framework == Framework::Standard || spec.attack.eps == 0.0 {
        evaluate(arch, params, &spec.head, None, eval_data)?
    } else {
        evaluate(arch, params, &spec.head, Some(&eval_attack_spec(spec)), eval_data)?
    };
    Ok((clean, robust))
}

#[allow(clippy::too_many_arguments)]
fn generic_train(
    arch: &ArchitectureSpec,
    spec: &TrainSpec,
    train_data: &Dataset,
    eval_data: &Dataset,
    params: &mut ModelParams,
    state: &mut SgdState,
    history: &mut TrainHistory,
    hook: EpochHook<'_>,
) -> Result<()> {
    let t_obj = spec.training_objective();
    let a_obj = spec.adversarial_objective();
    let shuffle_root = seeds::split(spec.seed, "shuffle");
    let attack_root = seeds::split(spec.seed, "attack");
    let mut batch_counter = 0u64;

    for epoch in 0..spec.epochs {
        let started = Instant::now();
        let lr = lr_at(spec, epoch, spec.epochs);
        let mut loss_sum = 0.0;
        let mut batches_seen = 0.0;
        for (x, y) in batches(train_data, spec.batch_size, seeds::split_index(shuffle_root, epoch as u64))? {
            let x_adv = match spec.framework {
                Framework::Standard => x.clone(),
                Framework::FastAt => {
                    fast_at_example(arch, params, spec, &a_obj, &x, &y, batch_counter, 1.0, 1.25)?
                }
                _ => {
                    if spec.attack.eps == 0.0 {
                        x.clone()
                    } else {
                        let mut a = spec.attack.clone();
                        a.objective = a_obj;
                        a.seed = seeds::split_index(attack_root, batch_counter);
                        iterative_attack(arch, params, &a, &x, &y)?
                    }
                }
            };
            let (loss, grads) = training_grads(&t_obj, arch, params, &x, &x_adv, &y)?;
            sgd_momentum_step(params, &grads, state, lr, spec.momentum, spec.weight_decay)?;
            loss_sum += loss;
            batches_seen += 1.0;
            batch_counter += 1;
        }
        let (clean_acc, robust_acc) = epoch_eval(arch, spec, params, eval_data)?;
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            clean_acc,
            robust_acc,
            train_loss: loss_sum / batches_seen,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        hook(params, history)?;
    }
    Ok(())
}

/// One fast-at adversarial batch: uniform init inside `init_scale * eps`,
/// a single sign step of `step_mult * eps`, then the ball/range projection.
#[allow(clippy::too_many_arguments)]
pub fn fast_at_example(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    spec: &TrainSpec,
    a_obj: &ObjectiveSpec,
    x: &Tensor,
    y: &[usize],
    batch_counter: u64,
    init_scale: f64,
    step_mult: f64,
) -> Result<Tensor> {
    if spec.attack.norm != NormKind::LInf {
        return Err(contract("fast-at is defined for the l-inf norm"));
    }
    let eps = spec.attack.eps;
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let range = spec.attack.input_range;
    let b = x.shape()[0];
    let d = x.row_len();
    let init_root = seeds::split(spec.seed, "fast-init");
    let mut start = x.data().to_vec();
    if init_scale > 0.0 {
        for i in 0..b {
            let mut rng = seeds::rng(seeds::split_index(
                seeds::split_index(init_root, batch_counter),
                i as u64,
            ));
            let row = &mut start[i * d..(i + 1) * d];
            for v in row.iter_mut() {
                *v = (*v + rng.gen_range(-init_scale * eps..=init_scale * eps))
                    .clamp(range.0, range.1);
            }
        }
    }
    let start_t = Tensor::new(x.shape().to_vec(), start)?;
    let (_, grad) = {
        let mut tape = crate::tape::Tape::new();
        let graph = crate::objectives::adversarial_loss_on_tape(
            &mut tape,
            a_obj,
            arch,
            params,
            &start_t,
            &crate::objectives::AdvTarget::Labels(y.to_vec()),
        )?;
        let total = tape.sum(graph.per_example)?;
        tape.backward(total)?;
        (tape.value(graph.per_example).clone(), tape.grad(graph.bound.input))
    };
    let mut out = start_t.data().to_vec();
    for i in 0..b {
        let grow = &grad.data()[i * d..(i + 1) * d];
        let mut dir = vec![0.0; d];
        steepest_dir_slice(grow, NormKind::LInf, &mut dir);
        let row = &mut out[i * d..(i + 1) * d];
        for (v, dv) in row.iter_mut().zip(&dir) {
            *v += step_mult * eps * dv;
        }
        crate::attacks::project_slice(
            &x.data()[i * d..(i + 1) * d],
            row,
            NormKind::LInf,
            eps,
            range,
        );
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// free-at: replay each batch m times; every replay shares one backward pass
/// between the theta step and the persistent-delta step. delta persists
/// across batches within a pass and resets at pass boundaries. The epoch
/// budget counts optimizer-step-equivalents, so the data is traversed
/// epochs/m times.
#[allow(clippy::too_many_arguments)]
fn free_at_train(
    arch: &ArchitectureSpec,
    spec: &TrainSpec,
    train_data: &Dataset,
    eval_data: &Dataset,
    params: &mut ModelParams,
    state: &mut SgdState,
    history: &mut TrainHistory,
    hook: EpochHook<'_>,
) -> Result<()> {
    let m = spec.free_replays;
    let passes = (spec.epochs / m).max(1);
    let d = train_data.inputs.row_len();
    let range = spec.attack.input_range;
    let eps = spec.attack.eps;
    let shuffle_root = seeds::split(spec.seed, "shuffle");
    let mut delta = vec![0.0; spec.batch_size * d];

    for pass in 0..passes {
        let started = Instant::now();
        let lr = lr_at(spec, pass, passes);
        let mut loss_sum = 0.0;
        let mut steps_seen = 0.0;
        delta.fill(0.0);
        for (x, y) in batches(train_data, spec.batch_size, seeds::split_index(shuffle_root, pass as u64))? {
            let b = x.shape()[0];
            for _ in 0..m {
                let slots = free_at_replay(
                    arch, spec, params, state, &x, &y, &mut delta[..b * d], lr, eps, range,
                )?;
                loss_sum += slots;
                steps_seen += 1.0;
            }
        }
        let (clean_acc, robust_acc) = epoch_eval(arch, spec, params, eval_data)?;
        history.records.push(EpochRecord {
            epoch: pass + 1,
            clean_acc,
            robust_acc,
            train_loss: loss_sum / steps_seen,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        hook(params, history)?;
    }
    Ok(())
}

/// One free-at replay on one batch: a theta step and a delta step sharing a
/// single backward pass. Returns the replay loss.
#[allow(clippy::too_many_arguments)]
pub fn free_at_replay(
    arch: &ArchitectureSpec,
    spec: &TrainSpec,
    params: &mut ModelParams,
    state: &mut SgdState,
    x: &Tensor,
    y: &[usize],
    delta: &mut [f64],
    lr: f64,
    eps: f64,
    range: (f64, f64),
) -> Result<f64> {
    let b = x.shape()[0];
    let d = x.row_len();
    // adversarial input from the persistent perturbation
    let mut adv = vec![0.0; b * d];
    for i in 0..b * d {
        adv[i] = (x.data()[i] + delta[i]).clamp(range.0, range.1);
    }
    let x_adv = Tensor::new(x.shape().to_vec(), adv)?;
    let t_obj = spec.training_objective();
    let mut tape = crate::tape::Tape::new();
    let graph = crate::objectives::training_loss_on_tape(
        &mut tape, &t_obj, arch, params, &x_adv, &x_adv, y,
    )?;
    let loss = tape.value(graph.loss).item()?;
    tape.backward(graph.loss)?;
    let grads: Vec<Tensor> = graph.clean.param_vars.iter().map(|&v| tape.grad(v)).collect();
    let gx = tape.grad(graph.adv_input);
    sgd_momentum_step(params, &grads, state, lr, spec.momentum, spec.weight_decay)?;
    // delta ascent: a full eps-sized sign step, then ball and range clips
    for i in 0..b {
        let grow = &gx.data()[i * d..(i + 1) * d];
        let mut dir = vec![0.0; d];
        steepest_dir_slice(grow, NormKind::LInf, &mut dir);
        for j in 0..d {
            let idx = i * d + j;
            let stepped = delta[idx] + eps * dir[j];
            let clipped = stepped.clamp(-eps, eps);
            // keep x + delta inside the input range as well
            delta[idx] = (x.data()[idx] + clipped).clamp(range.0, range.1) - x.data()[idx];
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_two_moons;
    use crate::model::HeadMode;

    fn base_spec(framework: Framework, head: HeadConfig, seed: u64) -> TrainSpec {
        let obj = ObjectiveSpec::new(ObjectiveKind::CeVsLabel, head);
        TrainSpec {
            framework,
            head,
            attack: AttackSpec::pgd(obj, 0.1, 0.025, 5, seed),
            epochs: 3,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_epochs: vec![0.75, 0.9],
            alpha: 0.5,
            lambda: 0.5,
            free_replays: 2,
            seed,
        }
    }

    #[test]
    fn sgd_plain_gradient_descent() {
        let arch = ArchitectureSpec::mlp(2, vec![2], 2, 2);
        let mut params = ModelParams::init(&arch, 0).unwrap();
        let before = params.tensors[0].clone();
        let mut grads: Vec<Tensor> = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        grads[0] = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 0.0]).unwrap();
        let mut state = SgdState::new(&params);
        sgd_momentum_step(&mut params, &grads, &mut state, 0.1, 0.0, 0.0).unwrap();
        for (a, (b, g)) in params.tensors[0]
            .data()
            .iter()
            .zip(before.data().iter().zip(grads[0].data()))
        {
            assert!((a - (b - 0.1 * g)).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let arch = ArchitectureSpec::mlp(2, vec![2], 2, 2);
        let mut params = ModelParams::init(&arch, 1).unwrap();
        let snapshot = params.clone();
        let grads: Vec<Tensor> = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let mut state = SgdState::new(&params);
        sgd_momentum_step(&mut params, &grads, &mut state, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(params, snapshot);
    }

    #[test]
    fn sgd_two_momentum_steps_closed_form() {
        // constant gradient g, momentum 0.9, no decay:
        // step1 moves lr*g, step2 moves 1.9*lr*g, total 2.9*lr*g
        let arch = ArchitectureSpec::mlp(2, vec![2], 2, 2);
        let mut params = ModelParams::init(&arch, 2).unwrap();
        let before = params.tensors[0].data()[0];
        let mut grads: Vec<Tensor> = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        grads[0] = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 0.0]).unwrap();
        let mut state = SgdState::new(&params);
        sgd_momentum_step(&mut params, &grads, &mut state, 0.01, 0.9, 0.0).unwrap();
        sgd_momentum_step(&mut params, &grads, &mut state, 0.01, 0.9, 0.0).unwrap();
        let moved = before - params.tensors[0].data()[0];
        assert!((moved - 0.01 * 3.0 * 2.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient_without_mutation() {
        let arch = ArchitectureSpec::mlp(2, vec![2], 2, 2);
        let mut params = ModelParams::init(&arch, 3).unwrap();
        let snapshot = params.clone();
        let mut grads: Vec<Tensor> = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let mut bad = Tensor::zeros(vec![2, 2]);
        bad.data_mut()[0] = f64::NAN;
        grads[0] = bad;
        let mut state = SgdState::new(&params);
        assert!(sgd_momentum_step(&mut params, &grads, &mut state, 0.1, 0.9, 0.0).is_err());
        assert_eq!(params, snapshot);
    }

    #[test]
    fn standard_training_is_reproducible_and_ignores_attack_budget() {
        let data = make_two_moons(32, 0.1, 5).unwrap();
        let arch = ArchitectureSpec::mlp(2, vec![8], 4, 2);
        let spec = base_spec(Framework::Standard, HeadConfig::standard(), 7);
        let (p1, h1) = train(&arch, &spec, &data, &data).unwrap();
        let (p2, h2) = train(&arch, &spec, &data, &data).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h1.clone());
        assert_eq!(
            h1.to_csv(false),
            h2.to_csv(false),
            "histories must agree byte for byte without wall time"
        );
    }

    #[test]
    fn pgd_at_with_zero_eps_matches_standard_training() {
        let data = make_two_moons(32, 0.1, 5).unwrap();
        let arch = ArchitectureSpec::mlp(2, vec![8], 4, 2);
        let mut adv = base_spec(Framework::PgdAt, HeadConfig::standard(), 9);
        adv.attack.eps = 0.0;
        adv.attack.eta = 0.0;
        let std_spec = base_spec(Framework::Standard, HeadConfig::standard(), 9);
        let (pa, ha) = train(&arch, &adv, &data, &data).unwrap();
        let (ps, hs) = train(&arch, &std_spec, &data, &data).unwrap();
        assert_eq!(pa, ps);
        for (a, s) in ha.records.iter().zip(&hs.records) {
            assert!((a.train_loss - s.train_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn one_small_step_decreases_training_loss() {
        let data = make_two_moons(64, 0.15, 3).unwrap();
        let arch = ArchitectureSpec::mlp(2, vec![8], 4, 2);
        let head = HeadConfig::new(HeadMode::He, 15.0, 0.2).unwrap();
        let spec = base_spec(Framework::PgdAt, head, 11);
        let t_obj = spec.training_objective();
        let mut params = ModelParams::init(&arch, 11).unwrap();
        let mut state = SgdState::new(&params);
        let mut decreased = 0;
        let probes = 20;
        let mut it = batches(&data, 16, 1).unwrap();
        for _ in 0..probes {
            let (x, y) = match it.next() {
                Some(b) => b,
                None => {
                    it = batches(&data, 16, 2).unwrap();
                    it.next().unwrap()
                }
            };
            let before = crate::objectives::training_loss(&t_obj, &arch, &params, &x, &x, &y).unwrap();
            let (_, grads) = training_grads(&t_obj, &arch, &params, &x, &x, &y).unwrap();
            sgd_momentum_step(&mut params, &grads, &mut state, 1e-4, 0.0, 0.0).unwrap();
            let after = crate::objectives::training_loss(&t_obj, &arch, &params, &x, &x, &y).unwrap();
            if after <= before {
                decreased += 1;
            }
        }
        assert!(
            decreased as f64 >= 0.95 * probes as f64,
            "descent sanity failed: {decreased}/{probes}"
        );
    }

    #[test]
    fn he_training_never_touches_the_bias() {
        let data = make_two_moons(24, 0.1, 2).unwrap();
        let arch = ArchitectureSpec::mlp(2, vec![6], 4, 2);
        let head = HeadConfig::new(HeadMode::He, 15.0, 0.2).unwrap();
        let mut spec = base_spec(Framework::PgdAt, head, 4);
        spec.epochs = 1;
        spec.attack.steps = 2;
        let before = crate::model::bias_read_count();
        // note: evaluation predicts through the he head as well
        train(&arch, &spec, &data, &data).unwrap();
        assert_eq!(crate::model::bias_read_count(), before);
    }

    #[test]
    fn evaluate_with_zero_eps_attack_equals_clean_accuracy() {
        let data = make_two_moons(40, 0.1, 6).unwrap();
        let arch = ArchitectureSpec::mlp(2, vec![8], 4, 2);
        let spec = base_spec(Framework::Standard, HeadConfig::standard(), 13);
        let (params, _) = train(&arch, &spec, &data, &data).unwrap();
        let clean = evaluate(&arch, &params, &spec.head, None, &data).unwrap();
        let mut a = spec.attack.clone();
        a.eps = 0.0;
        a.eta = 0.0;
        let attacked = evaluate(&arch, &params, &spec.head, Some(&a), &data).unwrap();
        assert_eq!(clean, attacked);
    }

    #[test]
    fn free_at_single_replay_without_persistence_matches_fgsm_at_step() {
        // one batch, m = 1, delta starting at zero: the replay's theta update
        // must equal a standard-at step on the clean batch (delta applies to
        // the *next* use), and delta must become the eps-sign step clipped to
        // the ball and range
        let data = make_two_moons(16, 0.1, 8).unwrap();
        let arch = ArchitectureSpec::mlp(2, vec![6], 4, 2);
        let spec = base_spec(Framework::FreeAt, HeadConfig::standard(), 21);
        let (x, y) = batches(&data, 16, 0).unwrap().next().unwrap();

        let mut p1 = ModelParams::init(&arch, 21).unwrap();
        let mut s1 = SgdState::new(&p1);
        let mut delta = vec![0.0; x.len()];
        free_at_replay(&arch, &spec, &mut p1, &mut s1, &x, &y, &mut delta, 0.05, 0.1, (0.0, 1.0))
            .unwrap();

        let mut p2 = ModelParams::init(&arch, 21).unwrap();
        let mut s2 = SgdState::new(&p2);
        let t_obj = spec.training_objective();
        let (_, grads) = training_grads(&t_obj, &arch, &p2, &x, &x, &y).unwrap();
        sgd_momentum_step(&mut p2, &grads, &mut s2, 0.05, spec.momentum, spec.weight_decay)
            .unwrap();
        assert_eq!(p1, p2);

        for (i, dv) in delta.iter().enumerate() {
            assert!(dv.abs() <= 0.1 + 1e-12);
            let moved = x.data()[i] + dv;
            assert!((0.0..=1.0).contains(&moved));
        }
    }

    #[test]
    fn free_at_epoch_accounting() {
        let data = make_two_moons(16, 0.1, 8).unwrap();
        let arch = ArchitectureSpec::mlp(2, vec![4], 3, 2);
        let mut spec = base_spec(Framework::FreeAt, HeadConfig::standard(), 2);
        spec.epochs = 4;
        spec.free_replays = 2;
        spec.attack.steps = 1;
        let (_, history) = train(&arch, &spec, &data, &data).unwrap();
        // 4 step-equivalents at m=2 -> 2 data passes -> 2 records
        assert_eq!(history.records.len(), 2);
    }

    #[test]
    fn fast_at_zero_init_with_unit_step_is_fgsm() {
        let data = make_two_moons(16, 0.1, 8).unwrap();
        let arch = ArchitectureSpec::mlp(2, vec![6], 4, 2);
        let spec = base_spec(Framework::FastAt, HeadConfig::standard(), 33);
        let params = ModelParams::init(&arch, 33).unwrap();
        let (x, y) = batches(&data, 16, 0).unwrap().next().unwrap();
        let a_obj = spec.adversarial_objective();
        let fast = fast_at_example(&arch, &params, &spec, &a_obj, &x, &y, 0, 0.0, 1.0).unwrap();
        let mut fg = spec.attack.clone();
        fg.objective = a_obj;
        let fgsm = crate::attacks::fgsm(&arch, &params, &fg, &x, &y).unwrap();
        assert_eq!(fast.data(), fgsm.data());
    }

    #[test]
    fn fast_at_projection_caps_the_overshoot() {
        let data = make_two_moons(16, 0.1, 8).unwrap();
        let arch = ArchitectureSpec::mlp(2, vec![6], 4, 2);
        let spec = base_spec(Framework::FastAt, HeadConfig::standard(), 34);
        let params = ModelParams::init(&arch, 34).unwrap();
        let (x, y) = batches(&data, 16, 0).unwrap().next().unwrap();
        let a_obj = spec.adversarial_objective();
        let adv = fast_at_example(&arch, &params, &spec, &a_obj, &x, &y, 0, 1.0, 1.25).unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= spec.attack.eps + 1e-12);
            assert!((0.0..=1.0).contains(a));
        }
    }
}
