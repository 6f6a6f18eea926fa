//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{arr1, Array1, Array2};
use rll_core::affine::{fd_jacobian, linearize, signature, ActivationSignature};
use rll_core::data::{make_half_moons, split};
use rll_core::nn::{softmax, train, InstanceSet, MlpParams, TrainConfig};
use rll_core::probe::{
    batch_probe, off_boundary, relative_error, BatchConfig, ProbeVerdict, ScalingProbe, SMALL_ALPHA,
};
use rll_core::rng::{self, Stream};
use rll_core::surface::{evaluate_grid, near_zero_entry_fraction, zero_entry_fraction, GridSpec};
use rll_core::uncertainty::{
    analyze, class_variance, fd_metric_gradient, mutual_information, predictive_entropy, softmax_jacobian, Metric,
    PredictiveSummary,
};

const N_PROBES: usize = 100;
const PROBE_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn with_budget(budget: Duration, f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let mut o = f();
    let el = t.elapsed();
    if el > budget {
        o.pass = false;
        o.detail.push_str(&format!("; over runtime budget {:?}", budget));
    }
    (o, el)
}

fn max_abs(it: impl IntoIterator<Item = f64>) -> f64 {
    it.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn probe_config() -> BatchConfig {
    BatchConfig::new(N_PROBES, PROBE_SEED, vec![[-3.0, 3.0], [-3.0, 3.0]])
}

fn linearization_exactness() -> Outcome {
    let net = &common::fixtures().single.instances()[0].params;
    let mut r = rng::stream(11, Stream::Probe);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = arr1(&[rng::uniform(&mut r, -3.0, 3.0), rng::uniform(&mut r, -3.0, 3.0)]);
        let p = linearize(net, x.view()).unwrap();
        let f = net.forward(x.view()).unwrap();
        worst = worst.max(max_abs((&f - &(p.v.dot(&x) + &p.a)).iter().copied()));
    }
    outcome(worst <= 1e-9, format!("max |f - (Vx+a)| = {worst:.3e} over 1000 points (tol 1e-9)"))
}

fn jacobian_identity() -> Outcome {
    let net = &common::fixtures().single.instances()[0].params;
    let h = 1e-5;
    let mut r = rng::stream(12, Stream::Probe);
    let (mut n, mut worst) = (0, 0.0f64);
    while n < 200 {
        let x = arr1(&[rng::uniform(&mut r, -3.0, 3.0), rng::uniform(&mut r, -3.0, 3.0)]);
        if !off_boundary(&[net], &x, h) {
            continue;
        }
        let v = linearize(net, x.view()).unwrap().v;
        let fd = fd_jacobian(net, x.view(), h).unwrap();
        let rel = max_abs((&v - &fd).iter().copied()) / max_abs(v.iter().copied()).max(1e-300);
        worst = worst.max(rel);
        n += 1;
    }
    outcome(worst <= 1e-4, format!("max ‖V - FD‖max / ‖V‖max = {worst:.3e} over {n} off-boundary points (tol 1e-4)"))
}

/// Nets with temperature folded in, for signature recomputation.
fn nets(set: &InstanceSet) -> Vec<MlpParams> {
    set.nets().into_iter().map(|c| c.into_owned()).collect()
}

fn signatures_constant_after_beta(set: &InstanceSet, v: &ProbeVerdict) -> bool {
    let nets = nets(set);
    let probe = &v.probe;
    v.per_instance.iter().zip(&nets).all(|(iv, net)| match iv.beta {
        None => true,
        Some(b) => {
            let sig = |a: f64| -> ActivationSignature { signature(net, probe.point(a).view()) };
            let s0 = sig(probe.schedule[b]);
            probe.schedule[b..].iter().all(|&a| sig(a) == s0)
        }
    })
}

fn stabilization() -> Outcome {
    let set = &common::fixtures().single;
    let rep = batch_probe(set, &probe_config()).unwrap();
    let exact = rep.verdicts.iter().all(|v| signatures_constant_after_beta(set, v));
    let rate = rep.n_stabilized as f64 / rep.n_probes as f64;
    outcome(
        rate >= 0.99 && exact,
        format!(
            "{}/{} probes stabilized (need >= 99%); post-stabilization signatures constant: {exact}",
            rep.n_stabilized, rep.n_probes
        ),
    )
}

fn convergence() -> Outcome {
    let f = common::fixtures();
    let sets: [(&str, &InstanceSet); 4] = [
        ("single K=1", &f.single),
        ("ensemble K=5", &f.ensemble),
        ("anchored K=5", &f.anchored),
        ("mc-dropout K=50", &f.mc_dropout),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, set) in sets {
        let rep = batch_probe(set, &probe_config()).unwrap();
        let covered: Vec<&ProbeVerdict> = rep.verdicts.iter().filter(|v| v.hypothesis_met).collect();
        let ok = covered
            .iter()
            .filter(|v| {
                Metric::ALL.iter().all(|&m| {
                    let mv = v.per_metric.get(m);
                    mv.final_grad <= 1e-8 && mv.tail_drift <= 1e-9
                })
            })
            .count();
        let worst_grad = covered
            .iter()
            .flat_map(|v| Metric::ALL.map(|m| v.per_metric.get(m).final_grad))
            .fold(0.0, f64::max);
        let worst_drift = covered
            .iter()
            .flat_map(|v| Metric::ALL.map(|m| v.per_metric.get(m).tail_drift))
            .fold(0.0, f64::max);
        pass &= !covered.is_empty() && ok == covered.len();
        parts.push(format!(
            "{name}: {ok}/{} covered converged ({} uncovered; worst grad {worst_grad:.1e}, drift {worst_drift:.1e})",
            covered.len(),
            rep.n_uncovered
        ));
    }
    outcome(pass, parts.join("; "))
}

fn one_hot() -> Outcome {
    let set = &common::fixtures().single;
    let rep = batch_probe(set, &probe_config()).unwrap();
    let covered: Vec<&ProbeVerdict> = rep.verdicts.iter().filter(|v| v.one_hot.covered).collect();
    let ok = covered
        .iter()
        .filter(|v| v.one_hot.max_prob >= 1.0 - 1e-9 && v.one_hot.predicted_winner == Some(v.one_hot.winner))
        .count();
    let min_p = covered.iter().map(|v| v.one_hot.max_prob).fold(1.0, f64::min);
    outcome(
        !covered.is_empty() && ok == covered.len(),
        format!("{ok}/{} covered probes one-hot with predicted winner (min max-prob {min_p:.17})", covered.len()),
    )
}

fn zero_entry_footnote() -> Outcome {
    let s = evaluate_grid(&common::fixtures().single, &GridSpec::default()).unwrap();
    let frac = zero_entry_fraction(&s);
    let near = near_zero_entry_fraction(&s);
    outcome(
        (0.0..=0.15).contains(&frac),
        format!(
            "zero-entry fraction {:.2}% (tol 0), {:.2}% (tol 1e-12) on 200x200 grid; reference value 6.3%, accepted range [0%, 15%]",
            100.0 * frac,
            100.0 * near
        ),
    )
}

fn summary(rows: &[&[f64]]) -> PredictiveSummary {
    let (k, c) = (rows.len(), rows[0].len());
    PredictiveSummary::from_probs(Array2::from_shape_fn((k, c), |(i, j)| rows[i][j])).unwrap()
}

fn metric_identities() -> Outcome {
    let h = predictive_entropy(&summary(&[&[0.5, 0.5]])).value;
    let e1 = (h - 2f64.ln()).abs();
    let mi_same = mutual_information(&summary(&[&[0.3, 0.7], &[0.3, 0.7], &[0.3, 0.7]])).value.abs();
    let cv = class_variance(&summary(&[&[1.0, 0.0], &[0.0, 1.0]])).value;
    let mut r = rng::stream(13, Stream::Probe);
    let mut min_mi = f64::INFINITY;
    for _ in 0..10_000 {
        let k = 1 + (rng::uniform01(&mut r) * 10.0) as usize;
        let c = 2 + (rng::uniform01(&mut r) * 3.0) as usize;
        let scale = 10f64.powf(rng::uniform(&mut r, -1.0, 1.5));
        let logits = Array2::from_shape_fn((k, c), |_| scale * rng::standard_normal(&mut r));
        let s = PredictiveSummary::from_logits(logits).unwrap();
        min_mi = min_mi.min(mutual_information(&s).value);
    }
    let pass = e1 <= 1e-12 && mi_same <= 1e-12 && cv == 0.25 && min_mi >= -1e-9;
    outcome(
        pass,
        format!(
            "|H(uniform) - ln2| = {e1:.1e}; MI(identical) = {mi_same:.1e}; class variance(one-hot disagreement) = {cv}; min MI over 1e4 summaries = {min_mi:.2e}"
        ),
    )
}

fn softmax_machinery() -> Outcome {
    let mut r = rng::stream(14, Stream::Probe);
    let mut shift = 0.0f64;
    let mut jac = 0.0f64;
    let mut sig = 0.0f64;
    for _ in 0..1000 {
        let z = Array1::from_shape_fn(3, |_| 5.0 * rng::standard_normal(&mut r));
        let c = rng::uniform(&mut r, -50.0, 50.0);
        let p = softmax(z.view()).unwrap();
        shift = shift.max(max_abs((&p - &softmax((&z + c).view()).unwrap()).iter().copied()));
        let j = softmax_jacobian(p.view());
        let hh = 1e-6;
        for cp in 0..3 {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[cp] += hh;
            zm[cp] -= hh;
            let fd = (softmax(zp.view()).unwrap() - softmax(zm.view()).unwrap()) / (2.0 * hh);
            jac = jac.max(max_abs((0..3).map(|ci| fd[ci] - j[[ci, cp]])));
        }
        let pair = arr1(&[5.0 * rng::standard_normal(&mut r), 5.0 * rng::standard_normal(&mut r)]);
        let p1 = softmax(pair.view()).unwrap()[1];
        let s = 1.0 / (1.0 + (-(pair[1] - pair[0])).exp());
        sig = sig.max((p1 - s).abs());
    }
    outcome(
        shift <= 1e-12 && jac <= 1e-6 && sig <= 1e-12,
        format!("shift invariance {shift:.1e} (1e-12); Jacobian vs FD {jac:.1e} (1e-6); sigmoid equivalence {sig:.1e} (1e-12) on 1000 pairs"),
    )
}

fn training_sanity() -> Outcome {
    let ds = make_half_moons(750, 0.125, common::DATA_SEED).unwrap();
    let (tr, va) = split(&ds, 500, 250, common::DATA_SEED).unwrap();
    let cfg = TrainConfig::preset_nn();
    use rayon::prelude::*;
    let results: Vec<(f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let (_, rep) = train(&cfg, &tr, &va, seed).unwrap();
            (rep.val_accuracy.unwrap(), rep.val_auc.unwrap())
        })
        .collect();
    let ok = results.iter().filter(|(a, u)| *a >= 0.90 && *u >= 0.95).count();
    let accs: Vec<String> = results.iter().map(|(a, u)| format!("{a:.3}/{u:.3}")).collect();
    outcome(ok >= 8, format!("{ok}/10 seeds reach acc >= 0.90 and AUC >= 0.95 (acc/AUC: {})", accs.join(" ")))
}

fn gradient_oracle() -> Outcome {
    let f = common::fixtures();
    let sets: [(&str, &InstanceSet); 4] = [
        ("single", &f.single),
        ("ensemble", &f.ensemble),
        ("anchored", &f.anchored),
        ("mc-dropout", &f.mc_dropout),
    ];
    let h = 1e-5;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, set) in sets {
        let cfg = probe_config();
        let owned = nets(set);
        let (mut n, mut worst) = (0usize, 0.0f64);
        let mut i = 0;
        while n < 100 {
            let probe: ScalingProbe = cfg.probe(i).unwrap();
            i += 1;
            for &alpha in probe.schedule.iter().filter(|&&a| a <= SMALL_ALPHA) {
                let z = probe.point(alpha);
                if n >= 100 || !off_boundary(&owned, &z, h) {
                    continue;
                }
                let a = analyze(set, z.view()).unwrap();
                let m = &a.summary.mean_probs;
                for metric in Metric::ALL {
                    if metric == Metric::MaxProb && (m[0] - m[1]).abs() < 1e-6 {
                        continue;
                    }
                    let g = a.metric(metric).gradient.clone().unwrap();
                    let fd = fd_metric_gradient(set, metric, z.view(), h).unwrap();
                    worst = worst.max(relative_error(&g, fd.as_slice().unwrap()));
                }
                n += 1;
            }
        }
        pass &= worst <= 1e-4;
        parts.push(format!("{name}: {worst:.1e} over {n} points"));
    }
    outcome(
        pass,
        format!("max_j |g - fd| / max(‖g‖∞, 1e-6), alpha <= 2^4, tol 1e-4: {}", parts.join("; ")),
    )
}

type Criterion = (&'static str, u64, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("training sanity", 120, training_sanity),
        ("linearization exactness", 5, linearization_exactness),
        ("jacobian identity", 10, jacobian_identity),
        ("signature stabilization", 30, stabilization),
        ("metric convergence in the scaling limit", 300, convergence),
        ("one-hot limit", 30, one_hot),
        ("zero-entry fraction on default grid", 120, zero_entry_footnote),
        ("metric identities", 10, metric_identities),
        ("softmax machinery", 10, softmax_machinery),
        ("metric gradient oracle", 60, gradient_oracle),
    ];
    let t = Instant::now();
    common::fixtures();
    println!("acceptance: trained fixtures in {:.1?}", t.elapsed());
    let mut failed = 0;
    for (name, secs, f) in criteria {
        let (o, el) = with_budget(Duration::from_secs(secs), f);
        failed += usize::from(!o.pass);
        println!("[{}] {name} ({el:.2?}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
