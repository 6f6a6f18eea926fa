use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use rll_core::data::{make_half_moons, split, Dataset};
use rll_core::io::{read_to_string, to_json_string, write_atomic};
use rll_core::nn::{
    build_anchored_ensemble, build_ensemble, evaluate, fit_temperature, load_checkpoint, mc_dropout_instances,
    save_checkpoint, train as train_net, AnchorConfig, InstanceSet, TrainConfig,
};
use rll_core::probe::{
    self as pr, parse_schedule, run_probe, trace_csv, verify_convergence, BatchConfig, Direction, ScalingProbe,
};
use rll_core::surface::{evaluate_grid, export_surface, summarize_surface, GridSpec};
use rll_core::uncertainty::Metric;

use crate::{
    BatchProbeArgs, CliError, CliResult, GenerateArgs, GridArgs, KindArg, PresetArg, ProbeArgs, TrainArgs,
};

/// Reference value for the zero-entry fraction on a trained single net.
const ZERO_ENTRY_REFERENCE: f64 = 0.063;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult {
    write_atomic(path, to_json_string(value, true).as_bytes())?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_floats(s: &str, what: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("{what}: `{t}` is not a number"))))
        .collect()
}

/// `lo:hi,lo:hi,..`
pub(crate) fn parse_ranges(s: &str, what: &str) -> CliResult<Vec<[f64; 2]>> {
    s.split(',')
        .map(|part| {
            let (lo, hi) = part
                .split_once(':')
                .ok_or_else(|| usage(format!("{what}: expected lo:hi, got `{part}`")))?;
            let p = |v: &str| v.trim().parse::<f64>().map_err(|_| usage(format!("{what}: `{v}` is not a number")));
            Ok([p(lo)?, p(hi)?])
        })
        .collect()
}

fn read_config(path: &Path) -> CliResult<TrainConfig> {
    if !path.exists() {
        return Err(usage(format!("config file {} not found", path.display())));
    }
    Ok(TrainConfig::from_json(&read_to_string(path)?)?)
}

pub fn generate(a: &GenerateArgs) -> CliResult {
    let ds = make_half_moons(a.n, a.noise, a.seed)?;
    ds.write_csv(&a.out)?;
    println!("{}", to_json_string(&json!({"command": "generate", "config": a, "rows": ds.len()}), false).trim_end());
    Ok(())
}

fn load_data(a: &TrainArgs) -> CliResult<(Dataset, Dataset)> {
    let ds = Dataset::read_csv(&a.data)?;
    if let Some(v) = &a.val {
        return Ok((ds, Dataset::read_csv(v)?));
    }
    let frac = a.val_frac.unwrap_or(1.0 / 3.0);
    if !(0.0..1.0).contains(&frac) {
        return Err(usage(format!("--val-frac must lie in [0, 1), got {frac}")));
    }
    let n_val = (ds.len() as f64 * frac).round() as usize;
    Ok(split(&ds, ds.len() - n_val, n_val, a.split_seed)?)
}

pub fn train(a: &TrainArgs) -> CliResult {
    let mut cfg = match (&a.config, a.preset) {
        (Some(p), _) => read_config(p)?,
        (None, Some(PresetArg::McDropout)) => TrainConfig::preset_mc_dropout(),
        (None, _) if a.kind == KindArg::Mcdropout => TrainConfig::preset_mc_dropout(),
        (None, _) => TrainConfig::preset_nn(),
    };
    if let Some(s) = a.prior_std {
        cfg.anchored = Some(AnchorConfig { prior_std: s });
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let k = a.k.unwrap_or(match a.kind {
        KindArg::Single => 1,
        KindArg::Ensemble | KindArg::Anchored => 5,
        KindArg::Mcdropout => 50,
    });
    if k == 0 {
        return Err(usage("--k must be >= 1"));
    }
    if a.kind == KindArg::Single && k != 1 {
        return Err(usage("--kind single requires --k 1"));
    }
    let (tr, va) = load_data(a)?;
    let (set, reports) = match a.kind {
        KindArg::Single | KindArg::Ensemble => build_ensemble(&cfg, &tr, &va, k, cfg.seed)?,
        KindArg::Anchored => {
            if cfg.anchored.is_none() {
                return Err(usage("--kind anchored needs anchored.prior_std in the config or --prior-std"));
            }
            build_anchored_ensemble(&cfg, &tr, &va, k, cfg.seed)?
        }
        KindArg::Mcdropout => {
            let (base, rep) = train_net(&cfg, &tr, &va, cfg.seed)?;
            (mc_dropout_instances(&base, cfg.dropout_rate, k, a.mask_seed)?, vec![rep])
        }
    };
    let set = if a.temperature {
        if va.is_empty() {
            return Err(usage("--temperature needs a non-empty validation split"));
        }
        let t = fit_temperature(&set, &va)?;
        set.with_temperature(Some(t))?
    } else {
        set
    };
    let eval = if va.is_empty() { None } else { Some(evaluate(&set, &va)) };
    let (accuracy, auc, auc_error) = match eval {
        None => (None, None, None),
        Some(Ok(e)) => (Some(e.accuracy), e.auc, None),
        Some(Err(e)) => (None, None, Some(e.to_string())),
    };
    save_checkpoint(&set, &a.out)?;
    let report = json!({
        "command": "train",
        "args": a,
        "config": cfg,
        "kind": set.kind().as_str(),
        "K": set.len(),
        "n_train": tr.len(),
        "n_val": va.len(),
        "temperature": set.temperature(),
        "members": reports,
        "val_accuracy": accuracy,
        "val_auc": auc,
        "val_auc_error": auc_error,
        "checkpoint": a.out,
    });
    write_json(&a.report.clone().unwrap_or_else(|| sibling(&a.out, ".report.json")), &report)
}

fn parse_metrics(s: &Option<String>) -> CliResult<Vec<Metric>> {
    match s {
        None => Ok(Metric::ALL.to_vec()),
        Some(list) => list
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.trim().parse::<Metric>().map_err(CliError::from))
            .collect(),
    }
}

pub fn grid(a: &GridArgs) -> CliResult {
    let metrics = parse_metrics(&a.metrics)?;
    if metrics.is_empty() {
        return Err(usage("--metrics must name at least one metric"));
    }
    let ranges = parse_ranges(&a.window, "--window")?;
    let [xr, yr] = ranges[..] else {
        return Err(usage("--window needs exactly two ranges"));
    };
    let spec = GridSpec::new(xr, yr, a.res)?;
    let set = load_checkpoint(&a.checkpoint)?;
    let surface = evaluate_grid(&set, &spec)?;
    export_surface(&surface, &a.out, &metrics)?;
    let summary = summarize_surface(&surface);
    let report = json!({
        "command": "grid",
        "config": a,
        "spec": spec,
        "metrics": metrics,
        "kind": set.kind().as_str(),
        "K": set.len(),
        "n_cells": summary.n_cells,
        "zero_entry_fraction": summary.zero_entry_fraction,
        "near_zero_entry_fraction": summary.near_zero_entry_fraction,
        "zero_entry_reference": ZERO_ENTRY_REFERENCE,
        "region_count": summary.region_count,
        "boundary_contact_cells": summary.boundary_contact_cells,
        "saturated_cells": summary.saturated_cells,
        "max_grad_norm": Metric::ALL.iter().map(|m| (m.as_str().to_string(), json!(summary.max_grad_norm[m.index()]))).collect::<serde_json::Map<_, _>>(),
    });
    write_json(&a.summary.clone().unwrap_or_else(|| sibling(&a.out, ".summary.json")), &report)
}

fn direction(s: &str) -> CliResult<Direction> {
    Ok(s.parse::<Direction>()?)
}

/// Verdict JSON in the published layout.
fn verdict_json(v: &pr::ProbeVerdict, args: &impl Serialize) -> serde_json::Value {
    json!({
        "config": args,
        "probe": v.probe,
        "per_instance": v.per_instance,
        "stabilized": v.stabilized,
        "hypothesis_met": v.hypothesis_met,
        "per_metric": v.per_metric,
        "all_converged": v.all_converged,
        "prediction_gradients": v.prediction_gradients,
        "prop2": v.one_hot,
        "logit_divergence_ok": v.logit_divergence_ok,
        "forward_check_max_err": v.forward_check_max_err,
        "grad_tol": v.grad_tol,
        "drift_tol": v.drift_tol,
    })
}

pub fn probe(a: &ProbeArgs) -> CliResult {
    let x = parse_floats(&a.x, "--x")?;
    let probe = ScalingProbe::new(x, a.dim, direction(&a.direction)?, parse_schedule(&a.schedule)?)?.with_tail(a.tail)?;
    let set: InstanceSet = load_checkpoint(&a.checkpoint)?;
    let trace = run_probe(&set, &probe)?;
    let verdict = verify_convergence(&trace, a.grad_tol, a.drift_tol);
    write_atomic(&a.out, trace_csv(&trace).as_bytes())?;
    write_json(&a.verdict.clone().unwrap_or_else(|| sibling(&a.out, ".verdict.json")), &verdict_json(&verdict, a))?;
    if verdict.all_converged == Some(false) {
        let failing: Vec<&str> = Metric::ALL
            .iter()
            .filter(|&&m| verdict.per_metric.get(m).converged == Some(false))
            .map(|m| m.as_str())
            .collect();
        return Err(CliError::Failure(format!("covered probe did not converge: {}", failing.join(", "))));
    }
    Ok(())
}

pub fn batch_probe(a: &BatchProbeArgs) -> CliResult {
    let cfg = BatchConfig {
        n_probes: a.n,
        seed: a.seed,
        sample_box: parse_ranges(&a.sample_box, "--box")?,
        schedule: parse_schedule(&a.schedule)?,
        dim: a.dim,
        direction: direction(&a.direction)?,
        tail: a.tail,
        grad_tol: a.grad_tol,
        drift_tol: a.drift_tol,
    };
    if cfg.schedule.len() < pr::MIN_SCHEDULE_LEN {
        return Err(usage(format!("schedule needs at least {} steps", pr::MIN_SCHEDULE_LEN)));
    }
    let set = load_checkpoint(&a.checkpoint)?;
    let rep = pr::batch_probe(&set, &cfg)?;
    let covered: Vec<usize> = rep.probes.iter().filter(|p| p.covered).map(|p| p.index).collect();
    let uncovered: Vec<usize> = rep.probes.iter().filter(|p| !p.covered).map(|p| p.index).collect();
    let report = json!({
        "command": "batch-probe",
        "args": a,
        "report": rep,
        "covered": covered,
        "uncovered": uncovered,
    });
    write_json(&a.out, &report)
}
