//! Command implementations (everything except `verify`).

use std::path::{Path, PathBuf};

use serde_json::json;

use sphere_at_core::attacks::{
    fgsm, iterative_attack, zo_attack, AttackSpec, GradEstimatorSpec, NormKind, ZoFamily,
};
use sphere_at_core::checkpoint;
use sphere_at_core::config::{parse_ratio, AttackMethod, ExperimentConfig};
use sphere_at_core::data::{self, Dataset};
use sphere_at_core::error::{Error, Result};
use sphere_at_core::model::{ArchitectureSpec, HeadConfig, ModelParams};
use sphere_at_core::objectives::{ObjectiveKind, ObjectiveSpec};
use sphere_at_core::seeds;
use sphere_at_core::tensor::Tensor;
use sphere_at_core::{analysis, trainer};

use crate::{AttackArgs, DataArgs, VERSION};

// ── train ────────────────────────────────────────────────────────────────

pub fn cmd_train(config_path: &str) -> Result<()> {
    let cfg = ExperimentConfig::load(Path::new(config_path))?;
    let arch = cfg.architecture()?;
    let spec = cfg.train_spec()?;
    let (train_data, eval_data) = cfg.load_datasets()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join("config.resolved"),
        cfg.to_resolved_string(VERSION),
    )?;
    for w in spec.attack.warnings() {
        eprintln!("warning: {w}");
    }

    let every = cfg.checkpoint_every;
    let out_dir = cfg.out_dir.clone();
    let head = spec.head;
    let hook_arch = arch.clone();
    let mut hook = move |params: &ModelParams, history: &trainer::TrainHistory| -> Result<()> {
        let epoch = history.records.len();
        if every > 0 && epoch % every == 0 {
            checkpoint::save_model(
                &out_dir.join(format!("epoch-{epoch:04}.ckpt")),
                &hook_arch,
                &head,
                params,
            )?;
        }
        Ok(())
    };

    let started = std::time::Instant::now();
    let (params, history) = trainer::train_with_hook(&arch, &spec, &train_data, &eval_data, &mut hook)?;
    checkpoint::save_model(&cfg.out_dir.join("model.ckpt"), &arch, &spec.head, &params)?;
    std::fs::write(
        cfg.out_dir.join("history.csv"),
        history.to_csv(cfg.log_wall_time),
    )?;
    let last = history.records.last().expect("at least one epoch");
    println!(
        "trained {} ({} head) for {} epochs in {:.1}s: clean {:.4} robust {:.4}",
        spec.framework.name(),
        spec.head.mode.name(),
        history.records.len(),
        started.elapsed().as_secs_f64(),
        last.clean_acc,
        last.robust_acc,
    );
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

// ── shared dataset / attack assembly ─────────────────────────────────────

pub fn build_dataset(args: &DataArgs) -> Result<Dataset> {
    match args.dataset.as_str() {
        "two-moons" => data::make_two_moons(args.n, args.noise, args.data_seed),
        "synth-digits" => data::make_synth_digits(args.n, args.classes, args.data_seed),
        "idx" => {
            let img = args.idx_images.as_deref().ok_or_else(|| {
                Error::Parse("dataset idx requires --idx-images".into())
            })?;
            let lab = args.idx_labels.as_deref().ok_or_else(|| {
                Error::Parse("dataset idx requires --idx-labels".into())
            })?;
            let mut ds = data::load_idx_images(Path::new(img), Path::new(lab))?;
            ds.classes = args.classes.max(ds.classes);
            if args.n > 0 {
                ds = ds.take(args.n);
            }
            Ok(ds)
        }
        other => Err(Error::Parse(format!("unknown dataset `{other}`"))),
    }
}

fn build_objective(head: &HeadConfig, args: &AttackArgs) -> Result<ObjectiveSpec> {
    let kind = if args.adaptive { ObjectiveKind::MarginCe } else { ObjectiveKind::CeVsLabel };
    if args.adaptive && !head.mode.is_angular() {
        return Err(Error::Contract(
            "--adaptive needs an angular (he / m-he) head".into(),
        ));
    }
    let mut obj = ObjectiveSpec::new(kind, *head);
    if args.fn_objective {
        obj = sphere_at_core::attacks::fn_in_objective_toggle(&obj, true)?;
    }
    Ok(obj)
}

pub fn build_attack_spec(head: &HeadConfig, args: &AttackArgs) -> Result<(AttackMethod, AttackSpec)> {
    let method = AttackMethod::parse(&args.attack)?;
    let objective = build_objective(head, args)?;
    let (rand_init, mu) = match method {
        AttackMethod::Fgsm | AttackMethod::Bim => (false, 0.0),
        AttackMethod::Pgd => (!args.no_rand_init, 0.0),
        AttackMethod::Mim => (false, args.momentum_mu),
    };
    let spec = AttackSpec {
        norm: NormKind::parse(&args.norm)?,
        eps: parse_ratio(&args.eps)?,
        eta: parse_ratio(&args.eta)?,
        steps: if method == AttackMethod::Fgsm { 1 } else { args.steps as usize },
        rand_init,
        restarts: args.restarts as usize,
        momentum_mu: mu,
        input_range: (0.0, 1.0),
        objective,
        seed: args.seed,
    };
    spec.validate()?;
    Ok((method, spec))
}

/// Craft adversarial inputs for a whole dataset in chunks; returns the
/// crafted tensor and the robust accuracy.
fn craft_and_score(
    arch: &ArchitectureSpec,
    params: &ModelParams,
    head: &HeadConfig,
    method: AttackMethod,
    spec: &AttackSpec,
    zo: Option<&GradEstimatorSpec>,
    ds: &Dataset,
) -> Result<(Tensor, f64)> {
    let chunk = 256;
    let d = ds.inputs.row_len();
    let mut crafted = vec![0.0; ds.inputs.len()];
    let mut correct = 0usize;
    let mut i = 0;
    while i < ds.len() {
        let hi = (i + chunk).min(ds.len());
        let mut shape = ds.inputs.shape().to_vec();
        shape[0] = hi - i;
        let x = Tensor::new(shape, ds.inputs.data()[i * d..hi * d].to_vec())?;
        let y = &ds.labels[i..hi];
        let adv = match zo {
            Some(est) => zo_attack(arch, params, spec, est, &x, y)?,
            None => match method {
                AttackMethod::Fgsm => fgsm(arch, params, spec, &x, y)?,
                _ => iterative_attack(arch, params, spec, &x, y)?,
            },
        };
        let (_, pred) = sphere_at_core::model::predict(arch, params, head, &adv)?;
        correct += pred.iter().zip(y).filter(|(p, t)| p == t).count();
        crafted[i * d..hi * d].copy_from_slice(adv.data());
        i = hi;
    }
    Ok((
        Tensor::new(ds.inputs.shape().to_vec(), crafted)?,
        correct as f64 / ds.len() as f64,
    ))
}

// ── eval ─────────────────────────────────────────────────────────────────

pub fn cmd_eval(checkpoint_path: &str, dargs: &DataArgs, out: Option<&str>) -> Result<()> {
    let (arch, head, params) = checkpoint::load_model(Path::new(checkpoint_path))?;
    let ds = build_dataset(dargs)?;
    let acc = trainer::evaluate(&arch, &params, &head, None, &ds)?;
    println!("clean accuracy: {acc:.4} ({} examples)", ds.len());
    if let Some(path) = out {
        let report = json!({
            "tool_version": VERSION,
            "checkpoint": checkpoint_path,
            "dataset": dargs.dataset,
            "n": ds.len(),
            "clean_acc": acc,
        });
        std::fs::write(path, serde_json::to_string_pretty(&report).unwrap())?;
    }
    Ok(())
}

// ── attack ───────────────────────────────────────────────────────────────

pub fn cmd_attack(
    checkpoint_path: &str,
    dargs: &DataArgs,
    aargs: &AttackArgs,
    out: Option<&str>,
    dump_adv: Option<&str>,
) -> Result<()> {
    let (arch, head, params) = checkpoint::load_model(Path::new(checkpoint_path))?;
    let ds = build_dataset(dargs)?;
    let (method, spec) = build_attack_spec(&head, aargs)?;
    for w in spec.warnings() {
        eprintln!("warning: {w}");
    }
    let zo = match aargs.zo.as_deref() {
        Some(fam) => Some(GradEstimatorSpec {
            family: ZoFamily::parse(fam)?,
            q: aargs.q as usize,
            sigma: aargs.sigma,
            seed: seeds::split(aargs.seed, "zo-estimator"),
        }),
        None => None,
    };
    let clean_acc = trainer::evaluate(&arch, &params, &head, None, &ds)?;
    let (crafted, robust_acc) =
        craft_and_score(&arch, &params, &head, method, &spec, zo.as_ref(), &ds)?;
    let label = match (&zo, method) {
        (Some(_), _) => format!("{}-{}", aargs.zo.as_deref().unwrap(), spec.steps),
        (None, AttackMethod::Fgsm) => "fgsm".to_string(),
        (None, m) => format!("{}-{}", m.name(), spec.steps),
    };
    println!(
        "{label}: clean {clean_acc:.4} -> robust {robust_acc:.4} (eps {}, eta {}, {} examples)",
        spec.eps,
        spec.eta,
        ds.len()
    );
    if let Some(path) = dump_adv {
        let adv_ds = Dataset::new(crafted, ds.labels.clone(), ds.classes, "adv-batch", "attack")?;
        data::export_dataset(Path::new(path), &adv_ds)?;
    }
    if let Some(path) = out {
        let report = json!({
            "tool_version": VERSION,
            "checkpoint": checkpoint_path,
            "dataset": dargs.dataset,
            "n": ds.len(),
            "attack": label,
            "method": method.name(),
            "zo": aargs.zo,
            "norm": spec.norm.name(),
            "eps": spec.eps,
            "eta": spec.eta,
            "steps": spec.steps,
            "restarts": spec.restarts,
            "rand_init": spec.rand_init,
            "adaptive": aargs.adaptive,
            "fn_objective": aargs.fn_objective,
            "seed": aargs.seed,
            "clean_acc": clean_acc,
            "robust_acc": robust_acc,
        });
        std::fs::write(path, serde_json::to_string_pretty(&report).unwrap())?;
    }
    Ok(())
}

// ── report ───────────────────────────────────────────────────────────────

struct RunRow {
    run: String,
    framework: String,
    he: String,
    clean_acc: String,
    robust_acc: String,
    attack: String,
    eps: String,
    steps: String,
}

pub fn cmd_report(runs: &[String], out: Option<&str>) -> Result<()> {
    let mut rows = Vec::new();
    for run in runs {
        let dir = PathBuf::from(run);
        let hist_path = dir.join("history.csv");
        let cfg_path = dir.join("config.resolved");
        let hist = std::fs::read_to_string(&hist_path)
            .map_err(|e| Error::Io(format!("{}: {e}", hist_path.display())))?;
        let cfg = ExperimentConfig::load(&cfg_path)?;
        let last = hist
            .lines()
            .filter(|l| !l.trim().is_empty())
            .last()
            .ok_or_else(|| Error::Parse(format!("{}: empty history", hist_path.display())))?;
        let cols: Vec<&str> = last.split(',').collect();
        if cols.len() < 4 || cols[0] == "epoch" {
            return Err(Error::Parse(format!(
                "{}: no completed epochs recorded",
                hist_path.display()
            )));
        }
        rows.push(RunRow {
            run: run.clone(),
            framework: cfg.framework.name().to_string(),
            he: cfg.head.name().to_string(),
            clean_acc: cols[1].to_string(),
            robust_acc: cols[2].to_string(),
            attack: cfg.attack.name().to_string(),
            eps: cfg.eps.to_string(),
            steps: cfg.steps.to_string(),
        });
    }

    let mut csv = String::from("run,framework,he,clean_acc,robust_acc,attack,eps,steps\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.run, r.framework, r.he, r.clean_acc, r.robust_acc, r.attack, r.eps, r.steps
        ));
    }
    if let Some(path) = out {
        std::fs::write(path, &csv)?;
    }

    // aligned text view
    let headers = ["run", "framework", "he", "clean_acc", "robust_acc", "attack", "eps", "steps"];
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    let cells: Vec<[&str; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.run.as_str(),
                r.framework.as_str(),
                r.he.as_str(),
                r.clean_acc.as_str(),
                r.robust_acc.as_str(),
                r.attack.as_str(),
                r.eps.as_str(),
                r.steps.as_str(),
            ]
        })
        .collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let fmt_row = |row: &[&str; 8], widths: &[usize]| {
        row.iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let header_cells = ["run", "framework", "he", "clean_acc", "robust_acc", "attack", "eps", "steps"];
    println!("{}", fmt_row(&header_cells, &widths));
    for row in &cells {
        println!("{}", fmt_row(row, &widths));
    }
    Ok(())
}

// ── grad-ratio ───────────────────────────────────────────────────────────

pub fn cmd_grad_ratio(
    checkpoint_path: &str,
    dargs: &DataArgs,
    aargs: &AttackArgs,
    out: &str,
) -> Result<()> {
    let (arch, head, params) = checkpoint::load_model(Path::new(checkpoint_path))?;
    let ds = build_dataset(dargs)?;
    let (method, spec) = build_attack_spec(&head, aargs)?;
    let (adv, _) = craft_and_score(&arch, &params, &head, method, &spec, None, &ds)?;
    let objective = ObjectiveSpec::new(ObjectiveKind::CeVsLabel, head);
    let report = analysis::grad_ratio(&arch, &params, &objective, &ds.inputs, &adv, &ds.labels)?;
    std::fs::write(out, report.to_csv())?;
    for b in &report.blocks {
        match b.mean_ratio {
            Some(r) => println!("{}: {r:.4} ({} examples)", b.block, b.examples),
            None => println!("{}: no nonzero clean gradients", b.block),
        }
    }
    if !report.all_finite_positive() {
        return Err(Error::Numeric("gradient ratios must be finite and positive".into()));
    }
    Ok(())
}
