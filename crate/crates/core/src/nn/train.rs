use ndarray::{Array1, Array2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{eval, log_softmax_at, relu, softmax_unchecked, Layer, MlpParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Hidden layers `U(-sqrt(6/fan_in), sqrt(6/fan_in))`; output layer and
    /// all biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    #[default]
    KaimingUniform,
    /// `U(-sqrt(6/(fan_in+fan_out)), ..)` for every weight, zero biases.
    XavierUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    pub prior_std: f64,
}

/// Training hyperparameters.
///
/// Search ranges used to pick the presets: 1-5 hidden layers of width 15, 20
/// or 25; learning rate log-uniform on `[1e-4, 0.1]`; dropout uniform on
/// `[0, 0.5]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub lr: f64,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    #[serde(default)]
    pub anchored: Option<AnchorConfig>,
    #[serde(default)]
    pub init: InitScheme,
}

impl TrainConfig {
    /// Best single-network configuration for the half-moons task.
    pub fn preset_nn() -> Self {
        TrainConfig {
            hidden_sizes: vec![25, 25, 25],
            lr: 0.000538,
            dropout_rate: 0.014552,
            batch_size: 64,
            max_epochs: 20,
            patience: 5,
            seed: 0,
            anchored: None,
            init: InitScheme::KaimingUniform,
        }
    }

    /// Best MC-dropout configuration for the half-moons task.
    pub fn preset_mc_dropout() -> Self {
        TrainConfig {
            hidden_sizes: vec![25, 25, 25, 25],
            lr: 0.000526,
            dropout_rate: 0.205046,
            ..Self::preset_nn()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be >= 1"));
        }
        if let Some(a) = &self.anchored {
            if !(a.prior_std > 0.0) {
                return Err(Error::invalid(format!("prior_std must be > 0, got {}", a.prior_std)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_auc: Option<f64>,
}

/// Draws a fresh parameter set for the layer sizes `dims` (input first).
pub fn init_params<R: RngCore>(scheme: InitScheme, dims: &[usize], rng: &mut R) -> MlpParams {
    let n = dims.len() - 1;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (fan_in, fan_out) = (w[0] as f64, w[1] as f64);
            let (w_bound, b_bound) = match scheme {
                InitScheme::KaimingUniform if l + 1 < n => ((6.0 / fan_in).sqrt(), fan_in.sqrt().recip()),
                InitScheme::KaimingUniform => (fan_in.sqrt().recip(), fan_in.sqrt().recip()),
                InitScheme::XavierUniform => ((6.0 / (fan_in + fan_out)).sqrt(), 0.0),
            };
            let weights = Array2::from_shape_fn((w[1], w[0]), |_| rng::uniform(rng, -w_bound, w_bound));
            let bias = Array1::from_shape_fn(w[1], |_| if b_bound > 0.0 { rng::uniform(rng, -b_bound, b_bound) } else { 0.0 });
            Layer { weights, bias }
        })
        .collect();
    MlpParams { layers }
}

pub(crate) fn layer_dims(cfg: &TrainConfig, input_dim: usize, output_dim: usize) -> Vec<usize> {
    std::iter::once(input_dim)
        .chain(cfg.hidden_sizes.iter().copied())
        .chain(std::iter::once(output_dim))
        .collect()
}

/// `coef * sum (theta - anchor)^2`.
pub fn anchor_penalty(params: &MlpParams, anchor: &MlpParams, coef: f64) -> f64 {
    params
        .flat()
        .iter()
        .zip(anchor.flat())
        .map(|(p, a)| (p - a) * (p - a))
        .sum::<f64>()
        * coef
}

/// Mean cross-entropy over a batch plus an optional anchor penalty, and its
/// gradient with respect to every parameter.
///
/// `hidden_scales[l]` (shape `batch x n_l`) multiplies the ReLU outputs of
/// hidden layer `l`; pass `None` for no dropout.
pub fn batch_loss_grad(
    params: &MlpParams,
    x: &Array2<f64>,
    y: &[usize],
    hidden_scales: Option<&[Array2<f64>]>,
    penalty: Option<(&MlpParams, f64)>,
) -> (f64, Vec<Layer>) {
    let batch = x.nrows();
    let n_layers = params.layers.len();
    let mut inputs: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
    let mut pre: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
    let mut h = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let z = h.dot(&layer.weights.t()) + &layer.bias;
        inputs.push(h);
        h = if l + 1 < n_layers {
            let mut a = z.mapv(relu);
            if let Some(s) = hidden_scales {
                a *= &s[l];
            }
            a
        } else {
            z.clone()
        };
        pre.push(z);
    }
    let logits = &pre[n_layers - 1];
    let mut loss = 0.0;
    let mut delta = Array2::zeros(logits.raw_dim());
    for (b, row) in logits.outer_iter().enumerate() {
        loss -= log_softmax_at(row, y[b]);
        let mut p = softmax_unchecked(row);
        p[y[b]] -= 1.0;
        delta.row_mut(b).assign(&(p / batch as f64));
    }
    loss /= batch as f64;

    let mut grads: Vec<Layer> = Vec::with_capacity(n_layers);
    for l in (0..n_layers).rev() {
        let layer = &params.layers[l];
        let gw = delta.t().dot(&inputs[l]);
        let gb = delta.sum_axis(Axis(0));
        grads.push(Layer { weights: gw, bias: gb });
        if l > 0 {
            let mut d_in = delta.dot(&layer.weights);
            if let Some(s) = hidden_scales {
                d_in *= &s[l - 1];
            }
            d_in.zip_mut_with(&pre[l - 1], |d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = d_in;
        }
    }
    grads.reverse();

    if let Some((anchor, coef)) = penalty {
        loss += anchor_penalty(params, anchor, coef);
        for ((g, p), a) in grads.iter_mut().zip(&params.layers).zip(&anchor.layers) {
            g.weights.zip_mut_with(&(&p.weights - &a.weights), |gv, d| *gv += 2.0 * coef * d);
            g.bias.zip_mut_with(&(&p.bias - &a.bias), |gv, d| *gv += 2.0 * coef * d);
        }
    }
    (loss, grads)
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl Adam {
    fn new(params: &MlpParams, lr: f64) -> Self {
        let zeros: Vec<Layer> = params
            .layers
            .iter()
            .map(|l| Layer {
                weights: Array2::zeros(l.weights.raw_dim()),
                bias: Array1::zeros(l.bias.len()),
            })
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, params: &mut MlpParams, grads: &[Layer]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            p - lr * (*m / c1) / ((*v / c2).sqrt() + eps)
        };
        for (((p, g), m), v) in params.layers.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, &g, m, v| *p = update(*p, g, m, v));
            ndarray::Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| *p = update(*p, g, m, v));
        }
    }
}

pub(crate) fn mean_cross_entropy(params: &MlpParams, ds: &Dataset) -> f64 {
    let total: f64 = ds
        .features()
        .outer_iter()
        .zip(ds.labels())
        .map(|(x, &y)| -log_softmax_at(params.forward_unchecked(x).view(), y))
        .sum();
    total / ds.len() as f64
}

/// Trains with Adam on mean cross-entropy (plus the anchor penalty when
/// `anchor` is given), restoring the parameters of the best validation epoch.
/// With an empty validation set the training loss drives early stopping.
pub fn train(cfg: &TrainConfig, train: &Dataset, val: &Dataset, seed: u64) -> Result<(MlpParams, TrainReport)> {
    let (params, _, report) = train_inner(cfg, train, val, seed, None)?;
    Ok((params, report))
}

pub(crate) fn train_inner(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
    member: Option<usize>,
) -> Result<(MlpParams, Option<MlpParams>, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if train.class_counts().iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateSplit("training set has a single class".into()));
    }
    if !val.is_empty() && (val.dim() != train.dim() || val.n_classes() != train.n_classes()) {
        return Err(Error::invalid("training and validation sets disagree on shape"));
    }
    let dims = layer_dims(cfg, train.dim(), train.n_classes());
    let mut params = init_params(cfg.init, &dims, &mut rng::stream(seed, Stream::Init));
    let anchor = cfg
        .anchored
        .map(|_| init_params(cfg.init, &dims, &mut rng::stream(seed, Stream::Anchor)));
    let coef = cfg
        .anchored
        .map(|a| 1.0 / (2.0 * a.prior_std * a.prior_std * train.len() as f64))
        .unwrap_or(0.0);
    let penalty = anchor.as_ref().map(|a| (a, coef));

    let monitor = |p: &MlpParams| {
        if val.is_empty() {
            mean_cross_entropy(p, train)
        } else {
            mean_cross_entropy(p, val)
        }
    };
    let diverged = |epoch| Error::TrainingDiverged { epoch, member };

    let mut best_loss = monitor(&params);
    if !best_loss.is_finite() {
        return Err(diverged(0));
    }
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut wait = 0;
    let mut epochs_run = 0;
    let mut final_train_loss = mean_cross_entropy(&params, train);

    let mut adam = Adam::new(&params, cfg.lr);
    let mut shuffle_rng = rng::stream(seed, Stream::Shuffle);
    let mut dropout_rng = rng::stream(seed, Stream::Dropout);
    let keep = 1.0 - cfg.dropout_rate;

    for epoch in 1..=cfg.max_epochs {
        let perm = rng::permutation(&mut shuffle_rng, train.len());
        for chunk in perm.chunks(cfg.batch_size) {
            let xb = train.features().select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let scales: Option<Vec<Array2<f64>>> = (cfg.dropout_rate > 0.0).then(|| {
                cfg.hidden_sizes
                    .iter()
                    .map(|&n| {
                        Array2::from_shape_fn((chunk.len(), n), |_| {
                            if rng::bernoulli(&mut dropout_rng, keep) {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                    })
                    .collect()
            });
            let (loss, grads) = batch_loss_grad(&params, &xb, &yb, scales.as_deref(), penalty);
            if !loss.is_finite() {
                return Err(diverged(epoch));
            }
            adam.step(&mut params, &grads);
        }
        epochs_run = epoch;
        if !params.is_finite() {
            return Err(diverged(epoch));
        }
        let loss = monitor(&params);
        if !loss.is_finite() {
            return Err(diverged(epoch));
        }
        final_train_loss = mean_cross_entropy(&params, train);
        if loss < best_loss {
            best_loss = loss;
            best_params = params.clone();
            best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }

    let (val_accuracy, val_auc) = if val.is_empty() {
        (None, None)
    } else {
        let r = eval::evaluate_params(&best_params, val);
        (Some(r.accuracy), r.auc)
    };
    let report = TrainReport {
        epochs_run,
        best_epoch,
        best_val_loss: best_loss,
        final_train_loss,
        val_accuracy,
        val_auc,
    };
    Ok((best_params, anchor, report))
}
