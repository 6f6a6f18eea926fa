//! Axis-aligned scaling probes.
//!
//! A probe evaluates the instance set along `x' ⊙ α` where only coordinate
//! `dim` is scaled, by `+α` or `-α`. Each step records per-instance logits
//! and activation signatures plus the aggregate metrics and gradient norms.
//! The verifiers then check eventual signature stabilization, convergence of
//! all four metrics, one-hot limits and affine logit growth. Convergence is
//! only asserted on probes whose limiting pieces have no zero entries.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::{duplicate_column_audit_matrix, hash_hex, linearize, zero_entry_audit_matrix};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::nn::{softmax_unchecked, InstanceSet, MlpParams};
use crate::rng::{self, Stream};
use crate::uncertainty::{
    fd_metric_gradient, l2, metric_gradients_from_parts, metric_value, probability_jacobians, Metric,
    PredictiveSummary,
};

pub const MIN_SCHEDULE_LEN: usize = 8;
pub const DEFAULT_TAIL: usize = 4;
pub const DEFAULT_GRAD_TOL: f64 = 1e-8;
pub const DEFAULT_DRIFT_TOL: f64 = 1e-9;
pub const ONE_HOT_TOL: f64 = 1e-9;
pub const AFFINE_REL_TOL: f64 = 1e-6;
pub const DUP_COL_TOL: f64 = 1e-12;
/// Steps with `α` at most this get the forward-pass and FD cross-checks.
pub const SMALL_ALPHA: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "+")]
    Pos,
    #[serde(rename = "-")]
    Neg,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Pos => 1.0,
            Direction::Neg => -1.0,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Pos => "+",
            Direction::Neg => "-",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "+" | "pos" | "plus" => Ok(Direction::Pos),
            "-" | "neg" | "minus" => Ok(Direction::Neg),
            _ => Err(Error::invalid(format!("direction must be + or -, got `{s}`"))),
        }
    }
}

/// `base^0, base^1, .., base^(count-1)`.
pub fn geometric_schedule(base: f64, count: usize) -> Result<Vec<f64>> {
    if !(base > 1.0) || !base.is_finite() || count == 0 {
        return Err(Error::invalid("geometric schedule needs base > 1 and count >= 1"));
    }
    Ok((0..count).map(|i| base.powi(i as i32)).collect())
}

/// Parses `geom:base:count` or a comma-separated list of values.
pub fn parse_schedule(s: &str) -> Result<Vec<f64>> {
    if let Some(rest) = s.strip_prefix("geom:") {
        let (b, c) = rest
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("bad schedule `{s}`, expected geom:base:count")))?;
        let base: f64 = b.parse().map_err(|_| Error::invalid(format!("bad schedule base `{b}`")))?;
        let count: usize = c.parse().map_err(|_| Error::invalid(format!("bad schedule count `{c}`")))?;
        return geometric_schedule(base, count);
    }
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad schedule value `{t}`"))))
        .collect()
}

pub fn default_schedule() -> Vec<f64> {
    geometric_schedule(2.0, 21).expect("valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingProbe {
    pub base_x: Vec<f64>,
    pub dim: usize,
    pub direction: Direction,
    pub schedule: Vec<f64>,
    pub tail: usize,
}

impl ScalingProbe {
    /// Validated probe with the default tail window. The schedule must be
    /// strictly increasing, positive and at least [`MIN_SCHEDULE_LEN`] long.
    pub fn new(base_x: Vec<f64>, dim: usize, direction: Direction, schedule: Vec<f64>) -> Result<Self> {
        if schedule.len() < MIN_SCHEDULE_LEN {
            return Err(Error::invalid(format!(
                "schedule needs at least {MIN_SCHEDULE_LEN} steps, got {}",
                schedule.len()
            )));
        }
        Self::with_any_length(base_x, dim, direction, schedule)
    }

    /// Like [`ScalingProbe::new`] but accepts schedules of any non-zero
    /// length. Verifiers report short traces as not stabilized.
    pub fn with_any_length(base_x: Vec<f64>, dim: usize, direction: Direction, schedule: Vec<f64>) -> Result<Self> {
        if dim >= base_x.len() {
            return Err(Error::invalid(format!("dim {dim} out of range for a {}-d input", base_x.len())));
        }
        if base_x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("base point must be finite"));
        }
        if base_x[dim] == 0.0 {
            return Err(Error::invalid(format!("base point coordinate {dim} is zero; scaling it is a no-op")));
        }
        if schedule.is_empty() || schedule.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::invalid("schedule values must be finite and > 0"));
        }
        if schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("schedule must be strictly increasing"));
        }
        Ok(ScalingProbe {
            base_x,
            dim,
            direction,
            schedule,
            tail: DEFAULT_TAIL,
        })
    }

    pub fn with_tail(mut self, tail: usize) -> Result<Self> {
        if tail < 2 {
            return Err(Error::invalid("tail window must be >= 2"));
        }
        self.tail = tail;
        Ok(self)
    }

    pub fn point(&self, alpha: f64) -> Array1<f64> {
        let mut z = Array1::from(self.base_x.clone());
        z[self.dim] *= self.direction.sign() * alpha;
        z
    }

    /// Sign of coordinate `dim` of the probe point as `α` grows.
    pub fn ray_sign(&self) -> f64 {
        self.direction.sign() * self.base_x[self.dim].signum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStep {
    pub logits: Vec<f64>,
    pub sig_hash: u64,
    pub zero_entry: bool,
    /// Logits were not finite; probabilities come from the saturated limit.
    pub overflow: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeStep {
    pub alpha: f64,
    pub instances: Vec<InstanceStep>,
    pub mean_probs: Vec<f64>,
    /// [`Metric::ALL`] order.
    pub values: [f64; 4],
    pub grad_norms: [f64; 4],
    /// `‖∇ mean p_c‖₂` per class.
    pub class_grad_norms: Vec<f64>,
    /// Some instance has an exactly-zero probability or overflowed.
    pub saturated: bool,
    pub boundary_contact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrace {
    pub probe: ScalingProbe,
    pub steps: Vec<ProbeStep>,
    /// Each instance's `V` at the last step.
    pub final_v: Vec<Array2<f64>>,
    /// Largest `|forward - (V z + a)|` over steps with `α <= 16`.
    pub forward_check_max_err: f64,
}

impl ProbeTrace {
    pub fn n_instances(&self) -> usize {
        self.final_v.len()
    }

    fn tail_range(&self) -> std::ops::Range<usize> {
        let n = self.steps.len();
        n.saturating_sub(self.probe.tail)..n
    }
}

fn argmax_lowest(v: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Class that dominates as `α → ∞`: largest `v_cd` times the ray sign,
/// lowest index on ties.
pub fn predicted_winner(v: &Array2<f64>, dim: usize, ray_sign: f64) -> usize {
    argmax_lowest(v.column(dim).iter().map(|&e| e * ray_sign))
}

pub fn run_probe(set: &InstanceSet, probe: &ScalingProbe) -> Result<ProbeTrace> {
    if probe.base_x.len() != set.input_dim() {
        return Err(Error::invalid(format!(
            "probe point has {} coordinates, network expects {}",
            probe.base_x.len(),
            set.input_dim()
        )));
    }
    let nets = set.nets();
    let k = nets.len();
    let c = set.output_dim();
    let mut steps = Vec::with_capacity(probe.schedule.len());
    let mut final_v = Vec::new();
    let mut fwd_err = 0.0f64;
    for &alpha in &probe.schedule {
        let z = probe.point(alpha);
        let mut probs = Array2::zeros((k, c));
        let mut slopes = Vec::with_capacity(k);
        let mut inst = Vec::with_capacity(k);
        let mut boundary = false;
        for (i, net) in nets.iter().enumerate() {
            let piece = linearize(net, z.view())?;
            boundary |= piece.boundary_contact;
            let logits = piece.eval(z.view());
            let overflow = logits.iter().any(|v| !v.is_finite());
            if overflow {
                probs[[i, predicted_winner(&piece.v, probe.dim, probe.ray_sign())]] = 1.0;
            } else {
                probs.row_mut(i).assign(&softmax_unchecked(logits.view()));
                if alpha <= SMALL_ALPHA {
                    let direct = net.forward(z.view())?;
                    fwd_err = fwd_err.max((&direct - &logits).iter().fold(0.0f64, |m, e| m.max(e.abs())));
                }
            }
            inst.push(InstanceStep {
                logits: logits.to_vec(),
                sig_hash: piece.signature.hash(),
                zero_entry: zero_entry_audit_matrix(&piece.v, 0.0).has_zero,
                overflow,
            });
            // saturated instances contribute a zero probability Jacobian
            slopes.push(if overflow { Array2::zeros(piece.v.raw_dim()) } else { piece.v });
        }
        let slope_refs: Vec<&Array2<f64>> = slopes.iter().collect();
        let dp = probability_jacobians(&probs, &slope_refs);
        let grads = metric_gradients_from_parts(&probs, &dp);
        let saturated = inst.iter().any(|s| s.overflow) || probs.iter().any(|&p| p == 0.0);
        let summary = PredictiveSummary::from_probs(probs)?;
        let mut values = [0.0; 4];
        let mut grad_norms = [0.0; 4];
        for m in Metric::ALL {
            values[m.index()] = metric_value(&summary, m).value;
            grad_norms[m.index()] = l2(grads[m.index()].iter().copied());
        }
        let mut mean_jac = Array2::<f64>::zeros(dp[0].raw_dim());
        for g in &dp {
            mean_jac += g;
        }
        mean_jac /= k as f64;
        let class_grad_norms = mean_jac.rows().into_iter().map(|r| l2(r.iter().copied())).collect();
        steps.push(ProbeStep {
            alpha,
            instances: inst,
            mean_probs: summary.mean_probs.to_vec(),
            values,
            grad_norms,
            class_grad_norms,
            saturated,
            boundary_contact: boundary,
        });
        final_v = slopes;
    }
    // keep the true final slopes even for overflowed instances
    let z = probe.point(*probe.schedule.last().expect("non-empty"));
    for (i, net) in nets.iter().enumerate() {
        if steps.last().expect("non-empty").instances[i].overflow {
            final_v[i] = linearize(net, z.view())?.v;
        }
    }
    Ok(ProbeTrace {
        probe: probe.clone(),
        steps,
        final_v,
        forward_check_max_err: fwd_err,
    })
}

/// Index of the first step from which instance `k`'s signature stays fixed
/// to the end. Runs shorter than the tail window count as not found.
pub fn detect_stabilization(trace: &ProbeTrace, k: usize) -> Option<usize> {
    let hashes: Vec<u64> = trace.steps.iter().map(|s| s.instances[k].sig_hash).collect();
    let last = *hashes.last()?;
    let beta = hashes.iter().rposition(|&h| h != last).map_or(0, |i| i + 1);
    (hashes.len() - beta >= trace.probe.tail).then_some(beta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceVerdict {
    pub beta: Option<usize>,
    pub beta_alpha: Option<f64>,
    pub zero_entry: bool,
    pub dup_col: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricVerdict {
    /// `None` when the limiting pieces fail the hypothesis audit.
    pub converged: Option<bool>,
    pub tail_grad: f64,
    pub final_grad: f64,
    pub tail_drift: f64,
    pub final_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionGradientVerdict {
    pub covered: bool,
    pub class_tail_grad: Vec<f64>,
    pub passed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneHotVerdict {
    pub covered: bool,
    /// Argmax of the final mean probabilities.
    pub winner: usize,
    /// Argmax of the ray-signed column of the limiting `V` (K = 1 only).
    pub predicted_winner: Option<usize>,
    pub max_prob: f64,
    pub one_hot: bool,
    pub passed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogitDivergence {
    pub instance: usize,
    pub class: usize,
    pub slope: f64,
    pub expected_slope: f64,
    pub max_residual_rel: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerMetric {
    pub max_prob: MetricVerdict,
    pub class_variance: MetricVerdict,
    pub predictive_entropy: MetricVerdict,
    pub mutual_information: MetricVerdict,
}

impl PerMetric {
    pub fn get(&self, m: Metric) -> &MetricVerdict {
        match m {
            Metric::MaxProb => &self.max_prob,
            Metric::ClassVariance => &self.class_variance,
            Metric::PredictiveEntropy => &self.predictive_entropy,
            Metric::MutualInformation => &self.mutual_information,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeVerdict {
    pub probe: ScalingProbe,
    pub per_instance: Vec<InstanceVerdict>,
    pub stabilized: bool,
    /// Every instance stabilized in a piece whose `V` has no zero entry.
    pub hypothesis_met: bool,
    pub per_metric: PerMetric,
    pub all_converged: Option<bool>,
    pub prediction_gradients: PredictionGradientVerdict,
    pub one_hot: OneHotVerdict,
    pub logit_divergence_ok: Option<bool>,
    pub forward_check_max_err: f64,
    pub grad_tol: f64,
    pub drift_tol: f64,
}

fn instance_verdicts(trace: &ProbeTrace) -> Vec<InstanceVerdict> {
    (0..trace.n_instances())
        .map(|k| {
            let beta = detect_stabilization(trace, k);
            let v = &trace.final_v[k];
            InstanceVerdict {
                beta,
                beta_alpha: beta.map(|b| trace.steps[b].alpha),
                zero_entry: zero_entry_audit_matrix(v, 0.0).has_zero,
                dup_col: duplicate_column_audit_matrix(v, trace.probe.dim, DUP_COL_TOL).unwrap_or(true),
            }
        })
        .collect()
}

fn hypothesis(per_instance: &[InstanceVerdict]) -> bool {
    per_instance.iter().all(|v| v.beta.is_some() && !v.zero_entry)
}

pub fn verify_convergence(trace: &ProbeTrace, grad_tol: f64, drift_tol: f64) -> ProbeVerdict {
    let per_instance = instance_verdicts(trace);
    let stabilized = per_instance.iter().all(|v| v.beta.is_some());
    let covered = hypothesis(&per_instance);
    let tail = &trace.steps[trace.tail_range()];
    let metric = |m: Metric| {
        let i = m.index();
        let tail_grad = tail.iter().map(|s| s.grad_norms[i]).fold(0.0, f64::max);
        let (lo, hi) = tail
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.values[i]), hi.max(s.values[i])));
        let last = trace.steps.last().expect("non-empty");
        let tail_drift = hi - lo;
        MetricVerdict {
            converged: covered.then_some(tail_grad <= grad_tol && tail_drift <= drift_tol),
            tail_grad,
            final_grad: last.grad_norms[i],
            tail_drift,
            final_value: last.values[i],
        }
    };
    let per_metric = PerMetric {
        max_prob: metric(Metric::MaxProb),
        class_variance: metric(Metric::ClassVariance),
        predictive_entropy: metric(Metric::PredictiveEntropy),
        mutual_information: metric(Metric::MutualInformation),
    };
    let all_converged = covered.then(|| Metric::ALL.iter().all(|&m| per_metric.get(m).converged == Some(true)));
    let logit_divergence_ok = stabilized.then(|| verify_logit_divergence(trace).iter().all(|r| r.ok));
    ProbeVerdict {
        probe: trace.probe.clone(),
        stabilized,
        hypothesis_met: covered,
        per_metric,
        all_converged,
        prediction_gradients: verify_prediction_gradients(trace, grad_tol),
        one_hot: verify_one_hot_limit(trace),
        logit_divergence_ok,
        forward_check_max_err: trace.forward_check_max_err,
        grad_tol,
        drift_tol,
        per_instance,
    }
}

pub fn verify_prediction_gradients(trace: &ProbeTrace, grad_tol: f64) -> PredictionGradientVerdict {
    let covered = hypothesis(&instance_verdicts(trace));
    let c = trace.steps[0].class_grad_norms.len();
    let class_tail_grad: Vec<f64> = (0..c)
        .map(|ci| trace.steps[trace.tail_range()].iter().map(|s| s.class_grad_norms[ci]).fold(0.0, f64::max))
        .collect();
    let passed = covered.then(|| class_tail_grad.iter().all(|&g| g <= grad_tol));
    PredictionGradientVerdict {
        covered,
        class_tail_grad,
        passed,
    }
}

/// One-hot limit check. Covered only for a single instance whose limiting
/// `V` has no zero entry and no duplicate entries in column `dim`.
pub fn verify_one_hot_limit(trace: &ProbeTrace) -> OneHotVerdict {
    let iv = instance_verdicts(trace);
    let last = trace.steps.last().expect("non-empty");
    let winner = argmax_lowest(last.mean_probs.iter().copied());
    let max_prob = last.mean_probs[winner];
    let single = trace.n_instances() == 1;
    let covered = single && hypothesis(&iv) && !iv[0].dup_col;
    let predicted_winner = single.then(|| predicted_winner(&trace.final_v[0], trace.probe.dim, trace.probe.ray_sign()));
    let one_hot = max_prob >= 1.0 - ONE_HOT_TOL;
    OneHotVerdict {
        covered,
        winner,
        predicted_winner,
        max_prob,
        one_hot,
        passed: covered.then(|| one_hot && predicted_winner == Some(winner)),
    }
}

/// Within the stabilized piece the logits are affine in `α` with slope
/// `± v_cd x'_d`. Uses a two-point fit across the tail window.
pub fn verify_logit_divergence(trace: &ProbeTrace) -> Vec<LogitDivergence> {
    let mut out = Vec::new();
    let range = trace.tail_range();
    if range.len() < 2 {
        return out;
    }
    let tail = &trace.steps[range];
    let (first, last) = (&tail[0], &tail[tail.len() - 1]);
    let xd = trace.probe.base_x[trace.probe.dim] * trace.probe.direction.sign();
    for k in 0..trace.n_instances() {
        if detect_stabilization(trace, k).is_none() || tail.iter().any(|s| s.instances[k].overflow) {
            continue;
        }
        for c in 0..first.instances[k].logits.len() {
            let (l0, l1) = (first.instances[k].logits[c], last.instances[k].logits[c]);
            let slope = (l1 - l0) / (last.alpha - first.alpha);
            let expected_slope = trace.final_v[k][[c, trace.probe.dim]] * xd;
            let max_residual_rel = tail
                .iter()
                .map(|s| {
                    let pred = l0 + slope * (s.alpha - first.alpha);
                    let actual = s.instances[k].logits[c];
                    (pred - actual).abs() / actual.abs().max(1.0)
                })
                .fold(0.0, f64::max);
            let slope_ok = if expected_slope == 0.0 {
                slope == 0.0
            } else {
                (slope - expected_slope).abs() <= AFFINE_REL_TOL * expected_slope.abs()
            };
            out.push(LogitDivergence {
                instance: k,
                class: c,
                slope,
                expected_slope,
                max_residual_rel,
                ok: slope_ok && max_residual_rel <= AFFINE_REL_TOL,
            });
        }
    }
    out
}

/// Largest relative disagreement between analytic metric gradients and
/// central differences over the probe's steps with `α <= 16` that are not
/// within `h` of an activation boundary. `None` if no step qualifies.
pub fn fd_check_probe(set: &InstanceSet, probe: &ScalingProbe, h: f64) -> Result<Option<f64>> {
    let nets = set.nets();
    let mut worst: Option<f64> = None;
    for &alpha in probe.schedule.iter().filter(|&&a| a <= SMALL_ALPHA) {
        let z = probe.point(alpha);
        if !off_boundary(&nets, &z, h) {
            continue;
        }
        let a = crate::uncertainty::analyze_nets(&nets, z.view())?;
        for m in Metric::ALL {
            if m == Metric::MaxProb && has_near_tie(&a.summary.mean_probs) {
                continue;
            }
            let g = a.metric(m).gradient.as_ref().expect("analysis carries gradients");
            let fd = fd_metric_gradient(set, m, z.view(), h)?;
            let err = relative_error(g, fd.as_slice().expect("contiguous"));
            worst = Some(worst.map_or(err, |w| w.max(err)));
        }
    }
    Ok(worst)
}

/// `max_j |g_j - fd_j| / max(‖g‖∞, 1e-6)`.
pub fn relative_error(g: &[f64], fd: &[f64]) -> f64 {
    let scale = g.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-6);
    g.iter().zip(fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

fn has_near_tie(m: &Array1<f64>) -> bool {
    let mut v = m.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.len() > 1 && v[0] - v[1] < 1e-6
}

/// Signatures of every instance are unchanged at `z ± h e_j` for all `j`.
pub fn off_boundary(nets: &[impl AsRef<MlpParams>], z: &Array1<f64>, h: f64) -> bool {
    nets.iter().all(|n| {
        let n = n.as_ref();
        let base = crate::affine::signature(n, z.view());
        (0..z.len()).all(|j| {
            [h, -h].iter().all(|&s| {
                let mut w = z.clone();
                w[j] += s;
                crate::affine::signature(n, w.view()) == base
            })
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub n_probes: usize,
    pub seed: u64,
    /// Per-dimension `[lo, hi]` sampling box for base points.
    pub sample_box: Vec<[f64; 2]>,
    pub schedule: Vec<f64>,
    /// Scaled dimension; drawn uniformly per probe when absent.
    #[serde(default)]
    pub dim: Option<usize>,
    pub direction: Direction,
    pub tail: usize,
    pub grad_tol: f64,
    pub drift_tol: f64,
}

impl BatchConfig {
    pub fn new(n_probes: usize, seed: u64, sample_box: Vec<[f64; 2]>) -> Self {
        BatchConfig {
            n_probes,
            seed,
            sample_box,
            schedule: default_schedule(),
            dim: None,
            direction: Direction::Pos,
            tail: DEFAULT_TAIL,
            grad_tol: DEFAULT_GRAD_TOL,
            drift_tol: DEFAULT_DRIFT_TOL,
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.sample_box.len() != input_dim {
            return Err(Error::invalid(format!(
                "sampling box has {} ranges, network input has {input_dim} dims",
                self.sample_box.len()
            )));
        }
        if self.sample_box.iter().any(|[lo, hi]| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::invalid("sampling box ranges need finite lo < hi"));
        }
        if self.dim.is_some_and(|d| d >= input_dim) {
            return Err(Error::invalid("dim out of range"));
        }
        if !(self.grad_tol > 0.0 && self.drift_tol >= 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        Ok(())
    }

    /// The `i`-th probe, drawn from its own RNG stream.
    pub fn probe(&self, i: usize) -> Result<ScalingProbe> {
        let mut r = rng::stream_indexed(self.seed, Stream::Probe, i as u64);
        let d = self.sample_box.len();
        let dim = match self.dim {
            Some(dim) => dim,
            None => ((rng::uniform01(&mut r) * d as f64) as usize).min(d - 1),
        };
        let mut x: Vec<f64> = self.sample_box.iter().map(|[lo, hi]| rng::uniform(&mut r, *lo, *hi)).collect();
        while x[dim] == 0.0 {
            let [lo, hi] = self.sample_box[dim];
            x[dim] = rng::uniform(&mut r, lo, hi);
        }
        ScalingProbe::new(x, dim, self.direction, self.schedule.clone())?.with_tail(self.tail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSummary {
    pub index: usize,
    pub base_x: Vec<f64>,
    pub dim: usize,
    pub stabilized: bool,
    pub covered: bool,
    pub all_converged: Option<bool>,
    pub max_tail_grad: f64,
    pub max_tail_drift: f64,
    pub one_hot_covered: bool,
    pub one_hot_passed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchReport {
    pub config: BatchConfig,
    pub n_probes: usize,
    pub n_stabilized: usize,
    pub n_covered: usize,
    pub n_uncovered: usize,
    pub n_covered_converged: usize,
    pub stabilization_rate: Option<f64>,
    pub coverage_rate: Option<f64>,
    pub convergence_rate: Option<f64>,
    pub one_hot_covered: usize,
    pub one_hot_passed: usize,
    pub probes: Vec<ProbeSummary>,
    #[serde(skip)]
    pub verdicts: Vec<ProbeVerdict>,
}

fn rate(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn batch_probe(set: &InstanceSet, cfg: &BatchConfig) -> Result<BatchReport> {
    cfg.validate(set.input_dim())?;
    let verdicts = (0..cfg.n_probes)
        .into_par_iter()
        .map(|i| {
            let probe = cfg.probe(i)?;
            Ok(verify_convergence(&run_probe(set, &probe)?, cfg.grad_tol, cfg.drift_tol))
        })
        .collect::<Result<Vec<_>>>()?;
    let probes: Vec<ProbeSummary> = verdicts
        .iter()
        .enumerate()
        .map(|(index, v)| ProbeSummary {
            index,
            base_x: v.probe.base_x.clone(),
            dim: v.probe.dim,
            stabilized: v.stabilized,
            covered: v.hypothesis_met,
            all_converged: v.all_converged,
            max_tail_grad: Metric::ALL.iter().map(|&m| v.per_metric.get(m).tail_grad).fold(0.0, f64::max),
            max_tail_drift: Metric::ALL.iter().map(|&m| v.per_metric.get(m).tail_drift).fold(0.0, f64::max),
            one_hot_covered: v.one_hot.covered,
            one_hot_passed: v.one_hot.passed,
        })
        .collect();
    let n = probes.len();
    let n_stabilized = probes.iter().filter(|p| p.stabilized).count();
    let n_covered = probes.iter().filter(|p| p.covered).count();
    let n_covered_converged = probes.iter().filter(|p| p.all_converged == Some(true)).count();
    let one_hot_covered = probes.iter().filter(|p| p.one_hot_covered).count();
    let one_hot_passed = probes.iter().filter(|p| p.one_hot_passed == Some(true)).count();
    Ok(BatchReport {
        config: cfg.clone(),
        n_probes: n,
        n_stabilized,
        n_covered,
        n_uncovered: n - n_covered,
        n_covered_converged,
        stabilization_rate: rate(n_stabilized, n),
        coverage_rate: rate(n_covered, n),
        convergence_rate: rate(n_covered_converged, n_covered),
        one_hot_covered,
        one_hot_passed,
        probes,
        verdicts,
    })
}

/// One CSV with two row kinds sharing a header: per-instance rows fill
/// `instance`, the logits, `sig_hash` and `zero_entry`; aggregate rows fill
/// `metric`, `value` and `grad_norm`. Unused cells are empty.
pub fn trace_csv(trace: &ProbeTrace) -> String {
    let c = trace.steps.first().map_or(0, |s| s.mean_probs.len());
    let mut header = vec!["alpha".to_string(), "instance".into()];
    header.extend((0..c).map(|i| format!("logit{i}")));
    header.extend(["sig_hash", "zero_entry", "metric", "value", "grad_norm"].map(String::from));
    let width = header.len();
    let mut out = header.join(",");
    out.push('\n');
    for s in &trace.steps {
        let alpha = fmt_f64(s.alpha);
        for (k, inst) in s.instances.iter().enumerate() {
            let mut row = vec![alpha.clone(), k.to_string()];
            row.extend(inst.logits.iter().map(|&v| fmt_f64(v)));
            row.push(hash_hex(inst.sig_hash));
            row.push(u8::from(inst.zero_entry).to_string());
            row.extend([String::new(), String::new(), String::new()]);
            debug_assert_eq!(row.len(), width);
            out.push_str(&row.join(","));
            out.push('\n');
        }
        for m in Metric::ALL {
            let mut row = vec![alpha.clone(), String::new()];
            row.extend(std::iter::repeat_n(String::new(), c + 2));
            row.push(m.as_str().into());
            row.push(fmt_f64(s.values[m.index()]));
            row.push(fmt_f64(s.grad_norms[m.index()]));
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    out
}
