//! `rll check`: numerical self-tests on a checkpoint.

use ndarray::{Array1, Array2, Axis};
use serde::Serialize;
use serde_json::json;

use rll_core::affine::{fd_jacobian, linearize};
use rll_core::io::to_json_string;
use rll_core::nn::{load_checkpoint_unvalidated, softmax, InstanceSet, MlpParams};
use rll_core::probe::off_boundary;
use rll_core::rng::{self, Stream};
use rll_core::uncertainty::{analyze_nets, entropy, Metric};

use crate::commands::write_json;
use crate::{CheckArgs, CliError, CliResult};

#[derive(Debug, Serialize)]
struct CheckResult {
    name: &'static str,
    passed: Option<bool>,
    value: Option<f64>,
    tolerance: Option<f64>,
    detail: String,
}

fn result(name: &'static str, value: f64, tol: f64, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name,
        passed: Some(value <= tol),
        value: Some(value),
        tolerance: Some(tol),
        detail: detail.into(),
    }
}

fn skipped(name: &'static str, why: &str) -> CheckResult {
    CheckResult {
        name,
        passed: None,
        value: None,
        tolerance: None,
        detail: format!("skipped: {why}"),
    }
}

fn max_abs(it: impl IntoIterator<Item = f64>) -> f64 {
    it.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn sample_points(d: usize, n: usize, seed: u64) -> Vec<Array1<f64>> {
    let mut r = rng::stream(seed, Stream::Probe);
    (0..n)
        .map(|_| Array1::from_shape_fn(d, |_| rng::uniform(&mut r, -3.0, 3.0)))
        .collect()
}

fn run_checks(set: &InstanceSet, points: &[Array1<f64>]) -> Vec<CheckResult> {
    let nets: Vec<MlpParams> = set.nets().into_iter().map(|c| c.into_owned()).collect();
    let mut out = Vec::new();

    let bad: Vec<usize> = nets.iter().enumerate().filter(|(_, n)| !n.is_finite()).map(|(i, _)| i).collect();
    out.push(CheckResult {
        name: "finite_weights",
        passed: Some(bad.is_empty()),
        value: Some(bad.len() as f64),
        tolerance: Some(0.0),
        detail: if bad.is_empty() {
            "all weights finite".into()
        } else {
            format!("non-finite weights in instances {bad:?}")
        },
    });
    if !bad.is_empty() {
        for name in ["linearization_exactness", "jacobian_fd", "sigmoid_equivalence", "metric_identities"] {
            out.push(skipped(name, "non-finite weights"));
        }
        return out;
    }

    let mut lin = 0.0f64;
    let mut jac = 0.0f64;
    let mut n_off = 0usize;
    let h = 1e-5;
    for net in &nets {
        for x in points {
            let Ok(p) = linearize(net, x.view()) else { continue };
            let f = net.forward(x.view()).expect("input dimension checked");
            lin = lin.max(max_abs((&f - &p.eval(x.view())).iter().copied()) / max_abs(f.iter().copied()).max(1.0));
            if off_boundary(&[net], x, h) {
                let fd = fd_jacobian(net, x.view(), h).expect("h > 0");
                jac = jac.max(max_abs((&p.v - &fd).iter().copied()) / max_abs(p.v.iter().copied()).max(1e-300));
                n_off += 1;
            }
        }
    }
    out.push(result(
        "linearization_exactness",
        lin,
        1e-9,
        format!("max |f - (Vx+a)| / max(|f|, 1) over {} points x {} instances", points.len(), nets.len()),
    ));
    out.push(result("jacobian_fd", jac, 1e-4, format!("max ‖V - FD‖ / ‖V‖ over {n_off} off-boundary evaluations")));

    if set.output_dim() == 2 {
        let mut worst = 0.0f64;
        for net in &nets {
            for x in points {
                let z = net.forward(x.view()).expect("input dimension checked");
                let p1 = softmax(z.view()).map(|p| p[1]).unwrap_or(f64::NAN);
                let s = 1.0 / (1.0 + (-(z[1] - z[0])).exp());
                worst = worst.max((p1 - s).abs());
            }
        }
        out.push(result("sigmoid_equivalence", worst, 1e-12, "|softmax_1 - sigmoid(z1 - z0)|"));
    } else {
        out.push(skipped("sigmoid_equivalence", "needs two classes"));
    }

    let c = set.output_dim() as f64;
    let mut worst = 0.0f64;
    let mut violations = Vec::new();
    for x in points {
        let Ok(a) = analyze_nets(&nets, x.view()) else { continue };
        let probs = &a.summary.per_instance_probs;
        let k = probs.nrows() as f64;
        let mean = probs.sum_axis(Axis(0)) / k;
        let h_mean = entropy(mean.view());
        let h_rows = probs.rows().into_iter().map(entropy).sum::<f64>() / k;
        worst = worst.max((a.metric(Metric::MutualInformation).value - (h_mean - h_rows)).abs());
        let h = a.metric(Metric::PredictiveEntropy).value;
        let v = a.metric(Metric::ClassVariance).value;
        let mi = a.metric(Metric::MutualInformation).value;
        if !(-1e-12..=c.ln() + 1e-12).contains(&h) || !(-1e-12..=0.25 + 1e-12).contains(&v) || mi < -1e-9 {
            violations.push(format!("range violation at {:?}", x.to_vec()));
        }
        // mean-prediction gradient equals the mean of instance gradients
        let mut sum = Array2::<f64>::zeros(a.mean_prob_jacobian.raw_dim());
        for net in &nets {
            sum += &analyze_nets(&[net], x.view()).expect("same point").mean_prob_jacobian;
        }
        sum /= k;
        worst = worst.max(max_abs((&sum - &a.mean_prob_jacobian).iter().copied()));
    }
    let mut r = result(
        "metric_identities",
        if violations.is_empty() { worst } else { f64::INFINITY },
        1e-12,
        "MI decomposition, metric ranges, gradient linearity",
    );
    if !violations.is_empty() {
        r.detail = format!("{}; {}", r.detail, violations.join("; "));
    }
    out.push(r);
    out
}

pub fn run(a: &CheckArgs) -> CliResult {
    if a.points == 0 {
        return Err(CliError::Usage("--points must be >= 1".into()));
    }
    let set = load_checkpoint_unvalidated(&a.checkpoint)?;
    let points = sample_points(set.input_dim(), a.points, a.seed);
    let checks = run_checks(&set, &points);
    let failed: Vec<&str> = checks.iter().filter(|c| c.passed == Some(false)).map(|c| c.name).collect();
    let report = json!({
        "command": "check",
        "config": a,
        "kind": set.kind().as_str(),
        "K": set.len(),
        "checks": checks,
        "passed": failed.is_empty(),
        "failed": failed,
    });
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => print!("{}", to_json_string(&report, true)),
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failure(format!("check failed: {}", failed.join(", "))))
    }
}
