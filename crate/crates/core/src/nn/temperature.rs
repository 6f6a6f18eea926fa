use ndarray::Array1;

use super::{log_softmax_at, InstanceSet};
use crate::data::Dataset;
use crate::error::{Error, Result};

const LOG_T_RANGE: (f64, f64) = (-3.0, 3.0);
const LOG_T_TOL: f64 = 1e-4;

fn nll(logits: &[Array1<f64>], labels: &[usize], t: f64) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| -log_softmax_at(z.mapv(|v| v / t).view(), y))
        .sum::<f64>()
        / logits.len() as f64
}

/// Temperature minimising the NLL of `softmax(z / T)`, by golden-section
/// search on `log T` over `[-3, 3]`.
pub fn fit_temperature_logits(logits: &[Array1<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::invalid("temperature fit needs a non-empty validation set"));
    }
    if logits.len() != labels.len() {
        return Err(Error::invalid("logits and labels differ in length"));
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let f = |u: f64| nll(logits, labels, u.exp());
    let (mut a, mut b) = LOG_T_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > LOG_T_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Ok(((a + b) / 2.0).exp())
}

/// Fits a temperature to the set's current logits (any existing temperature
/// is ignored). For multi-instance sets each instance's logits are fitted
/// jointly, one shared `T`.
pub fn fit_temperature(set: &InstanceSet, val: &Dataset) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::invalid("temperature fit needs a non-empty validation set"));
    }
    let mut logits = Vec::with_capacity(val.len() * set.len());
    let mut labels = Vec::with_capacity(val.len() * set.len());
    for inst in set.instances() {
        for (x, &y) in val.features().outer_iter().zip(val.labels()) {
            logits.push(inst.params.forward(x)?);
            labels.push(y);
        }
    }
    fit_temperature_logits(&logits, &labels)
}
