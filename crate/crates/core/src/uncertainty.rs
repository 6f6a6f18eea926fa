//! Uncertainty metrics over an instance set and their input gradients.
//!
//! All four metrics are computed from the `K x C` matrix of per-instance
//! class probabilities. Gradients go through the chain rule: for instance
//! `k`, `d p_k / d x = J(p_k) V_k` where `J` is the softmax Jacobian and
//! `V_k` the instance's local affine slope. Entropies are in nats and
//! `0 ln 0 = 0`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::affine::{linearize, AffinePiece};
use crate::error::{Error, Result};
use crate::nn::{softmax_unchecked, InstanceSet, MlpParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MaxProb,
    ClassVariance,
    PredictiveEntropy,
    MutualInformation,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::MaxProb,
        Metric::ClassVariance,
        Metric::PredictiveEntropy,
        Metric::MutualInformation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::MaxProb => "max_prob",
            Metric::ClassVariance => "class_variance",
            Metric::PredictiveEntropy => "predictive_entropy",
            Metric::MutualInformation => "mutual_information",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }
}

/// Raw values below this are reported as a numerical anomaly for mutual
/// information.
pub const MI_ANOMALY_TOL: f64 = -1e-9;

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    /// `K x C`; empty (0 columns) when built from probabilities only.
    pub logits: Array2<f64>,
    pub per_instance_probs: Array2<f64>,
    pub mean_probs: Array1<f64>,
}

impl PredictiveSummary {
    pub fn from_probs(probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() < 2 {
            return Err(Error::invalid("need at least one instance and two classes"));
        }
        for row in probs.rows() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (row.sum() - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid("probability rows must lie in [0, 1] and sum to 1"));
            }
        }
        let mean_probs = probs.mean_axis(Axis(0)).expect("non-empty");
        Ok(PredictiveSummary {
            logits: Array2::zeros((probs.nrows(), 0)),
            per_instance_probs: probs,
            mean_probs,
        })
    }

    pub fn from_logits(logits: Array2<f64>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logits must be finite"));
        }
        let mut probs = Array2::zeros(logits.raw_dim());
        for (mut out, row) in probs.rows_mut().into_iter().zip(logits.rows()) {
            out.assign(&softmax_unchecked(row));
        }
        let mut s = PredictiveSummary::from_probs(probs)?;
        s.logits = logits;
        Ok(s)
    }

    pub fn k(&self) -> usize {
        self.per_instance_probs.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.per_instance_probs.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricValue {
    pub metric: Metric,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradient: Option<Vec<f64>>,
    /// Set for mutual information below `-1e-9`; the raw value is kept.
    pub anomaly: bool,
}

impl MetricValue {
    fn plain(metric: Metric, value: f64) -> Self {
        let anomaly = metric == Metric::MutualInformation && value < MI_ANOMALY_TOL;
        MetricValue {
            metric,
            value,
            gradient: None,
            anomaly,
        }
    }

    pub fn gradient_norm(&self) -> Option<f64> {
        self.gradient.as_ref().map(|g| l2(g.iter().copied()))
    }
}

pub(crate) fn l2(it: impl IntoIterator<Item = f64>) -> f64 {
    it.into_iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn logits_matrix(nets: &[impl AsRef<MlpParams>], x: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
    let c = nets[0].as_ref().output_dim();
    let mut logits = Array2::zeros((nets.len(), c));
    for (mut row, net) in logits.rows_mut().into_iter().zip(nets) {
        row.assign(&net.as_ref().forward(x)?);
    }
    Ok(logits)
}

pub fn summarize(set: &InstanceSet, x: ArrayView1<'_, f64>) -> Result<PredictiveSummary> {
    let nets = set.nets();
    PredictiveSummary::from_logits(logits_matrix(&nets, x)?)
}

/// `-sum p ln p`, skipping exact zeros.
pub fn entropy(p: ArrayView1<'_, f64>) -> f64 {
    // `0.0 -` rather than negation so a zero sum gives +0
    0.0 - p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn max_prob_uncertainty(s: &PredictiveSummary) -> MetricValue {
    let max = s.mean_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    MetricValue::plain(Metric::MaxProb, 1.0 - max)
}

pub fn class_variance(s: &PredictiveSummary) -> MetricValue {
    let p = &s.per_instance_probs;
    let mean_sq = p.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
    let var = (&mean_sq - &s.mean_probs.mapv(|m| m * m)).mean().expect("C >= 2");
    MetricValue::plain(Metric::ClassVariance, var)
}

pub fn predictive_entropy(s: &PredictiveSummary) -> MetricValue {
    MetricValue::plain(Metric::PredictiveEntropy, entropy(s.mean_probs.view()))
}

pub fn mutual_information(s: &PredictiveSummary) -> MetricValue {
    let total = entropy(s.mean_probs.view());
    let aleatoric = s.per_instance_probs.rows().into_iter().map(entropy).sum::<f64>() / s.k() as f64;
    MetricValue::plain(Metric::MutualInformation, total - aleatoric)
}

pub fn metric_value(s: &PredictiveSummary, metric: Metric) -> MetricValue {
    match metric {
        Metric::MaxProb => max_prob_uncertainty(s),
        Metric::ClassVariance => class_variance(s),
        Metric::PredictiveEntropy => predictive_entropy(s),
        Metric::MutualInformation => mutual_information(s),
    }
}

/// `J[c][c'] = p_c (1{c = c'} - p_c')`.
pub fn softmax_jacobian(p: ArrayView1<'_, f64>) -> Array2<f64> {
    let n = p.len();
    Array2::from_shape_fn((n, n), |(c, cp)| p[c] * (f64::from(u8::from(c == cp)) - p[cp]))
}

fn argmax_lowest(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradients of all four metrics (in [`Metric::ALL`] order) from per-instance
/// probabilities and per-instance probability Jacobians `dp_k/dx` (`C x D`).
pub fn metric_gradients_from_parts(probs: &Array2<f64>, dp: &[Array2<f64>]) -> [Array1<f64>; 4] {
    let k = probs.nrows();
    let c = probs.ncols();
    let d = dp[0].ncols();
    let kf = k as f64;
    let mean = probs.mean_axis(Axis(0)).expect("non-empty");
    let mut dm = Array2::<f64>::zeros((c, d));
    for g in dp {
        dm += g;
    }
    dm /= kf;

    let mut g_max = Array1::zeros(d);
    g_max.scaled_add(-1.0, &dm.row(argmax_lowest(mean.view())));

    let entropy_grad = |p: ArrayView1<'_, f64>, g: &Array2<f64>| {
        let mut out = Array1::zeros(d);
        for ci in 0..c {
            if p[ci] > 0.0 {
                out.scaled_add(-(1.0 + p[ci].ln()), &g.row(ci));
            }
        }
        out
    };
    let g_ent = entropy_grad(mean.view(), &dm);

    let mut g_mean_row_ent = Array1::zeros(d);
    let mut g_var = Array1::zeros(d);
    for (row, g) in probs.rows().into_iter().zip(dp) {
        g_mean_row_ent += &entropy_grad(row, g);
        for ci in 0..c {
            g_var.scaled_add(2.0 * row[ci], &g.row(ci));
        }
    }
    g_mean_row_ent /= kf;
    g_var /= kf;
    for ci in 0..c {
        g_var.scaled_add(-2.0 * mean[ci], &dm.row(ci));
    }
    g_var /= c as f64;

    let g_mi = &g_ent - &g_mean_row_ent;
    [g_max, g_var, g_ent, g_mi]
}

/// Per-instance `dp_k/dx = J(p_k) V_k`.
pub fn probability_jacobians(probs: &Array2<f64>, slopes: &[&Array2<f64>]) -> Vec<Array2<f64>> {
    probs
        .rows()
        .into_iter()
        .zip(slopes)
        .map(|(p, v)| softmax_jacobian(p).dot(*v))
        .collect()
}

/// Everything the surface and probe modules need at one input.
#[derive(Debug, Clone)]
pub struct PointAnalysis {
    pub summary: PredictiveSummary,
    pub pieces: Vec<AffinePiece>,
    /// In [`Metric::ALL`] order, each with its gradient.
    pub metrics: Vec<MetricValue>,
    /// Gradient of the mean probabilities, `C x D`.
    pub mean_prob_jacobian: Array2<f64>,
    pub boundary_contact: bool,
}

impl PointAnalysis {
    pub fn metric(&self, m: Metric) -> &MetricValue {
        &self.metrics[m.index()]
    }
}

pub fn analyze_nets(nets: &[impl AsRef<MlpParams>], x: ArrayView1<'_, f64>) -> Result<PointAnalysis> {
    if nets.is_empty() {
        return Err(Error::invalid("empty instance list"));
    }
    let pieces = nets
        .iter()
        .map(|n| linearize(n.as_ref(), x))
        .collect::<Result<Vec<_>>>()?;
    let summary = PredictiveSummary::from_logits(logits_matrix(nets, x)?)?;
    let slopes: Vec<&Array2<f64>> = pieces.iter().map(|p| &p.v).collect();
    let dp = probability_jacobians(&summary.per_instance_probs, &slopes);
    let grads = metric_gradients_from_parts(&summary.per_instance_probs, &dp);
    let mut mean_jac = Array2::zeros(dp[0].raw_dim());
    for g in &dp {
        mean_jac += g;
    }
    mean_jac /= dp.len() as f64;
    let metrics = Metric::ALL
        .into_iter()
        .zip(grads)
        .map(|(m, g)| MetricValue {
            gradient: Some(g.to_vec()),
            ..metric_value(&summary, m)
        })
        .collect();
    let boundary_contact = pieces.iter().any(|p| p.boundary_contact);
    Ok(PointAnalysis {
        summary,
        pieces,
        metrics,
        mean_prob_jacobian: mean_jac,
        boundary_contact,
    })
}

pub fn analyze(set: &InstanceSet, x: ArrayView1<'_, f64>) -> Result<PointAnalysis> {
    analyze_nets(&set.nets(), x)
}

/// Value and analytic input gradient of one metric.
pub fn metric_gradient(set: &InstanceSet, metric: Metric, x: ArrayView1<'_, f64>) -> Result<MetricValue> {
    Ok(analyze(set, x)?.metrics.swap_remove(metric.index()))
}

/// Central-difference gradient of a metric (test and diagnostic oracle).
pub fn fd_metric_gradient(set: &InstanceSet, metric: Metric, x: ArrayView1<'_, f64>, h: f64) -> Result<Array1<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let mut g = Array1::zeros(x.len());
    for j in 0..x.len() {
        let mut xp = x.to_owned();
        let mut xm = x.to_owned();
        xp[j] += h;
        xm[j] -= h;
        let fp = metric_value(&summarize(set, xp.view())?, metric).value;
        let fm = metric_value(&summarize(set, xm.view())?, metric).value;
        g[j] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}
