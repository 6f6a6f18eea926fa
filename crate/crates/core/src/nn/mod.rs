//! ReLU multilayer perceptrons: parameters, forward pass and softmax, plus
//! training, multi-instance sets, calibration and checkpoints.

mod checkpoint;
mod eval;
mod instances;
mod temperature;
mod train;

pub use checkpoint::{checkpoint_json, load_checkpoint, load_checkpoint_unvalidated, save_checkpoint, CHECKPOINT_VERSION};
pub use eval::{auc_roc, evaluate, EvalReport};
pub use instances::{
    build_anchored_ensemble, build_ensemble, dropout_scales, mc_dropout_instances, params_id, Instance, InstanceKind,
    InstanceSet,
};
pub use temperature::{fit_temperature, fit_temperature_logits};
pub use train::{
    anchor_penalty, batch_loss_grad, init_params, train, AnchorConfig, InitScheme, TrainConfig, TrainReport,
};

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// One affine layer `z = W h + b`, with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::ShapeInconsistency(format!(
                "weight rows {} != bias length {}",
                weights.nrows(),
                bias.len()
            )));
        }
        Ok(Layer { weights, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Weights of a feed-forward classifier. Every layer but the last is followed
/// by a ReLU; the last layer emits raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl AsRef<MlpParams> for MlpParams {
    fn as_ref(&self) -> &MlpParams {
        self
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeInconsistency("network has no layers".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::ShapeInconsistency(format!(
                    "layer {} expects {} inputs but layer {} emits {}",
                    l + 1,
                    pair[1].in_dim(),
                    l,
                    pair[0].out_dim()
                )));
            }
        }
        for layer in &layers {
            if layer.weights.nrows() != layer.bias.len() {
                return Err(Error::ShapeInconsistency("weight rows != bias length".into()));
            }
            if layer.weights.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite parameter"));
            }
        }
        Ok(MlpParams { layers })
    }

    /// Builds without the finiteness check; used to represent checkpoints
    /// that `check` should be able to reject by name.
    pub fn new_unchecked_values(layers: Vec<Layer>) -> Result<Self> {
        match MlpParams::new(layers.clone()) {
            Err(Error::InvalidArgument(_)) => Ok(MlpParams { layers }),
            other => other,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(Layer::out_dim).collect()
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Flattened parameters, layer by layer, weights row-major then bias.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn check_input(&self, x: ArrayView1<'_, f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has length {} but network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite input"));
        }
        Ok(())
    }

    /// Logits at `x`.
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.dot(&h) + &layer.bias;
            if l < last {
                z.mapv_inplace(relu);
            }
            h = z;
        }
        h
    }

    /// Hidden pre-activations, one vector per hidden layer.
    pub fn pre_activations(&self, x: ArrayView1<'_, f64>) -> Vec<Array1<f64>> {
        let last = self.layers.len() - 1;
        let mut out = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for layer in &self.layers[..last] {
            let z = layer.weights.dot(&h) + &layer.bias;
            h = z.mapv(relu);
            out.push(z);
        }
        out
    }

    /// Forward pass with per-unit multipliers applied to every hidden layer's
    /// ReLU output. `scales[l][i]` multiplies unit `i` of hidden layer `l`.
    pub fn forward_scaled_hidden(&self, x: ArrayView1<'_, f64>, scales: &[Vec<f64>]) -> Result<Array1<f64>> {
        self.check_input(x)?;
        if scales.len() != self.n_hidden_layers()
            || scales.iter().zip(self.hidden_sizes()).any(|(s, n)| s.len() != n)
        {
            return Err(Error::invalid("hidden scale vectors do not match hidden sizes"));
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.dot(&h) + &layer.bias;
            if l < last {
                for (v, s) in z.iter_mut().zip(&scales[l]) {
                    *v = relu(*v) * s;
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Same network with logits divided by `t`.
    pub fn with_temperature(&self, t: f64) -> MlpParams {
        let mut out = self.clone();
        if t != 1.0 {
            let last = out.layers.last_mut().expect("non-empty");
            last.weights.mapv_inplace(|w| w / t);
            last.bias.mapv_inplace(|b| b / t);
        }
        out
    }
}

#[inline]
pub(crate) fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input is not finite"));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = logits.mapv(|z| (z - max).exp());
    let s = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

/// `log softmax(z)_c` without forming the probabilities.
pub(crate) fn log_softmax_at(logits: ArrayView1<'_, f64>, c: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits[c] - lse
}

#[cfg(test)]
mod tests {
    use super::test_nets::random_net;
    use super::*;
    use crate::rng::{self, Stream};
    use ndarray::array;
    use proptest::prelude::*;

    // Independent forward pass: explicit index loops over plain vectors.
    #[allow(clippy::needless_range_loop)]
    fn naive_forward(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = p.layers().len();
        for (l, layer) in p.layers().iter().enumerate() {
            let mut z = vec![0.0; layer.out_dim()];
            for i in 0..layer.out_dim() {
                let mut acc = layer.bias[i];
                for j in 0..layer.in_dim() {
                    acc += layer.weights[[i, j]] * h[j];
                }
                z[i] = if l + 1 < n { acc.max(0.0) } else { acc };
            }
            h = z;
        }
        h
    }

    #[test]
    fn identity_network() {
        let p = MlpParams::new(vec![Layer::new(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]).unwrap()]).unwrap();
        assert_eq!(p.forward(array![3.0, -2.0].view()).unwrap(), array![3.0, -2.0]);
    }

    #[test]
    fn dead_first_layer_yields_output_bias() {
        let p = MlpParams::new(vec![
            Layer::new(array![[1.0, 1.0], [2.0, 0.5]], array![-100.0, -100.0]).unwrap(),
            Layer::new(array![[3.0, -1.0], [0.5, 2.0]], array![0.25, -0.75]).unwrap(),
        ])
        .unwrap();
        assert_eq!(p.forward(array![1.0, 2.0].view()).unwrap(), array![0.25, -0.75]);
    }

    #[test]
    fn forward_matches_naive_loops() {
        for seed in 0..5 {
            let p = random_net(seed, &[2, 25, 25, 25, 2]);
            let mut r = rng::stream(seed, Stream::Probe);
            for _ in 0..50 {
                let x = [rng::uniform(&mut r, -3.0, 3.0), rng::uniform(&mut r, -3.0, 3.0)];
                let a = p.forward(ndarray::aview1(&x)).unwrap();
                let b = naive_forward(&p, &x);
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = random_net(1, &[2, 3, 2]);
        assert!(matches!(p.forward(array![1.0].view()), Err(Error::InvalidArgument(_))));
        assert!(matches!(p.forward(array![1.0, f64::NAN].view()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn layer_chain_is_validated() {
        let a = Layer::new(Array2::zeros((3, 2)), Array1::zeros(3)).unwrap();
        let b = Layer::new(Array2::zeros((2, 4)), Array1::zeros(2)).unwrap();
        assert!(matches!(MlpParams::new(vec![a, b]), Err(Error::ShapeInconsistency(_))));
        assert!(Layer::new(Array2::zeros((3, 2)), Array1::zeros(2)).is_err());
    }

    #[test]
    fn softmax_basics() {
        assert_eq!(softmax(array![0.0, 0.0].view()).unwrap(), array![0.5, 0.5]);
        let p = softmax(array![1000.0, 0.0].view()).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1e-300 && p[1] >= 0.0);
        assert!(softmax(array![f64::INFINITY, 0.0].view()).is_err());
    }

    #[test]
    fn sigmoid_equivalence_for_two_classes() {
        let mut r = rng::stream(11, Stream::Probe);
        for _ in 0..1000 {
            let z = array![rng::uniform(&mut r, -30.0, 30.0), rng::uniform(&mut r, -30.0, 30.0)];
            let p = softmax(z.view()).unwrap();
            let sig = 1.0 / (1.0 + (-(z[1] - z[0])).exp());
            assert!((p[1] - sig).abs() <= 1e-12);
        }
    }

    #[test]
    fn temperature_divides_logits() {
        let p = random_net(4, &[2, 5, 3]);
        let x = array![0.3, -1.2];
        let a = p.forward(x.view()).unwrap();
        let b = p.with_temperature(2.5).forward(x.view()).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u / 2.5 - v).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant_and_normalized(
            z in proptest::collection::vec(-50.0f64..50.0, 2..6),
            c in -100.0f64..100.0,
        ) {
            let a = softmax(ndarray::aview1(&z)).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = softmax(ndarray::aview1(&shifted)).unwrap();
            prop_assert!((a.sum() - 1.0).abs() <= 1e-12);
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}
