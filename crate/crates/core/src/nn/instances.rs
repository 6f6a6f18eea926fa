use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::train_inner;
use super::{MlpParams, TrainConfig, TrainReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::fnv1a64;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstanceKind {
    #[serde(rename = "single")]
    Single,
    #[serde(rename = "ensemble")]
    Ensemble,
    #[serde(rename = "anchored-ensemble")]
    AnchoredEnsemble,
    #[serde(rename = "mc-dropout")]
    McDropout,
}

impl InstanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InstanceKind::Single => "single",
            InstanceKind::Ensemble => "ensemble",
            InstanceKind::AnchoredEnsemble => "anchored-ensemble",
            InstanceKind::McDropout => "mc-dropout",
        }
    }
}

impl fmt::Display for InstanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InstanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(InstanceKind::Single),
            "ensemble" => Ok(InstanceKind::Ensemble),
            "anchored-ensemble" | "anchored" => Ok(InstanceKind::AnchoredEnsemble),
            "mc-dropout" | "mcdropout" => Ok(InstanceKind::McDropout),
            other => Err(Error::invalid(format!("unknown instance kind {other:?}"))),
        }
    }
}

/// One deterministic network of a set, with the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub params: MlpParams,
    pub seed: u64,
    pub anchor: Option<MlpParams>,
}

/// `K` networks whose softmax outputs are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSet {
    kind: InstanceKind,
    instances: Vec<Instance>,
    temperature: Option<f64>,
    base_id: Option<String>,
}

impl InstanceSet {
    pub fn new(kind: InstanceKind, instances: Vec<Instance>) -> Result<Self> {
        let first = instances
            .first()
            .ok_or_else(|| Error::invalid("an instance set needs at least one instance"))?;
        let (d, c) = (first.params.input_dim(), first.params.output_dim());
        for inst in &instances {
            if inst.params.input_dim() != d || inst.params.output_dim() != c {
                return Err(Error::ShapeInconsistency(
                    "instances disagree on input or output dimension".into(),
                ));
            }
            if let Some(a) = &inst.anchor {
                if a.hidden_sizes() != inst.params.hidden_sizes()
                    || a.input_dim() != d
                    || a.output_dim() != c
                {
                    return Err(Error::ShapeInconsistency("anchor shape differs from its instance".into()));
                }
            }
        }
        if kind == InstanceKind::McDropout {
            let h = first.params.hidden_sizes();
            if instances.iter().any(|i| i.params.hidden_sizes() != h) {
                return Err(Error::ShapeInconsistency("mc-dropout instances must share layer shapes".into()));
            }
        }
        Ok(InstanceSet {
            kind,
            instances,
            temperature: None,
            base_id: None,
        })
    }

    pub fn single(params: MlpParams, seed: u64) -> Self {
        InstanceSet::new(
            InstanceKind::Single,
            vec![Instance {
                params,
                seed,
                anchor: None,
            }],
        )
        .expect("one instance is always valid")
    }

    pub fn kind(&self) -> InstanceKind {
        self.kind
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.instances[0].params.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.instances[0].params.output_dim()
    }

    pub fn temperature(&self) -> Option<f64> {
        self.temperature
    }

    pub fn base_id(&self) -> Option<&str> {
        self.base_id.as_deref()
    }

    pub fn with_base_id(mut self, id: Option<String>) -> Self {
        self.base_id = id;
        self
    }

    /// Wraps every instance so its logits are divided by `t`.
    pub fn with_temperature(mut self, t: Option<f64>) -> Result<Self> {
        if let Some(t) = t {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::invalid(format!("temperature must be finite and > 0, got {t}")));
            }
        }
        self.temperature = t;
        Ok(self)
    }

    /// The networks to analyse, with any temperature folded into the output
    /// layer.
    pub fn nets(&self) -> Vec<Cow<'_, MlpParams>> {
        self.instances
            .iter()
            .map(|i| match self.temperature {
                Some(t) if t != 1.0 => Cow::Owned(i.params.with_temperature(t)),
                _ => Cow::Borrowed(&i.params),
            })
            .collect()
    }
}

/// Stable identifier of a parameter set: FNV-1a over the bit patterns of all
/// weights, hex encoded.
pub fn params_id(p: &MlpParams) -> String {
    let bytes = p.flat().into_iter().flat_map(|v| v.to_bits().to_le_bytes());
    format!("{:016x}", fnv1a64(bytes))
}

fn train_members(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    k: usize,
    base_seed: u64,
) -> Result<Vec<(Instance, TrainReport)>> {
    if k == 0 {
        return Err(Error::invalid("ensemble size must be >= 1"));
    }
    (0..k)
        .into_par_iter()
        .map(|m| {
            let seed = base_seed.wrapping_add(m as u64);
            let (params, anchor, report) = train_inner(cfg, train, val, seed, Some(m))?;
            Ok((Instance { params, seed, anchor }, report))
        })
        .collect()
}

/// `K` independent trainings with seeds `base_seed..base_seed+K`.
pub fn build_ensemble(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    k: usize,
    base_seed: u64,
) -> Result<(InstanceSet, Vec<TrainReport>)> {
    let cfg = TrainConfig {
        anchored: None,
        ..cfg.clone()
    };
    let (inst, reports): (Vec<_>, Vec<_>) = train_members(&cfg, train, val, k, base_seed)?.into_iter().unzip();
    let kind = if k == 1 {
        InstanceKind::Single
    } else {
        InstanceKind::Ensemble
    };
    Ok((InstanceSet::new(kind, inst)?, reports))
}

/// Ensemble whose members are regularised towards their own anchor draw:
/// loss = CE + sum (theta - anchor)^2 / (2 prior_std^2 N_train).
pub fn build_anchored_ensemble(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    k: usize,
    base_seed: u64,
) -> Result<(InstanceSet, Vec<TrainReport>)> {
    match cfg.anchored {
        Some(a) if a.prior_std > 0.0 => {}
        Some(a) => return Err(Error::invalid(format!("prior_std must be > 0, got {}", a.prior_std))),
        None => return Err(Error::invalid("anchored ensemble needs anchored.prior_std")),
    }
    let (inst, reports): (Vec<_>, Vec<_>) = train_members(cfg, train, val, k, base_seed)?.into_iter().unzip();
    Ok((InstanceSet::new(InstanceKind::AnchoredEnsemble, inst)?, reports))
}

/// Samples `K` dropout masks once and bakes each into a copy of `base`.
///
/// For every hidden unit a keep decision is drawn with probability
/// `1 - rate`. Kept units have their weight row and bias scaled by
/// `1 / (1 - rate)`; dropped units have them zeroed. Because ReLU is
/// positively homogeneous this equals scaling the unit's output.
pub fn mc_dropout_instances(base: &MlpParams, rate: f64, k: usize, seed: u64) -> Result<InstanceSet> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if k == 0 {
        return Err(Error::invalid("number of dropout instances must be >= 1"));
    }
    let instances = (0..k)
        .map(|m| {
            let inst_seed = seed.wrapping_add(m as u64);
            let mut params = base.clone();
            if rate > 0.0 {
                let scales = dropout_scales(&base.hidden_sizes(), rate, inst_seed);
                let n_hidden = params.n_hidden_layers();
                for (layer, s) in params.layers_mut()[..n_hidden].iter_mut().zip(&scales) {
                    for (i, &f) in s.iter().enumerate() {
                        layer.weights.row_mut(i).mapv_inplace(|w| w * f);
                        layer.bias[i] *= f;
                    }
                }
            }
            Instance {
                params,
                seed: inst_seed,
                anchor: None,
            }
        })
        .collect();
    Ok(InstanceSet::new(InstanceKind::McDropout, instances)?.with_base_id(Some(params_id(base))))
}

/// Per-unit output multipliers (`0` or `1/(1-rate)`) for one frozen mask.
pub fn dropout_scales(hidden_sizes: &[usize], rate: f64, seed: u64) -> Vec<Vec<f64>> {
    let keep = 1.0 - rate;
    let mut r = rng::stream(seed, Stream::Mask);
    hidden_sizes
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| if rng::bernoulli(&mut r, keep) { 1.0 / keep } else { 0.0 })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_nets::random_net;

    #[test]
    fn zero_rate_copies_base() {
        let base = random_net(1, &[2, 8, 8, 2]);
        let set = mc_dropout_instances(&base, 0.0, 4, 3).unwrap();
        assert_eq!(set.len(), 4);
        assert!(set.instances().iter().all(|i| i.params == base));
        assert_eq!(set.kind(), InstanceKind::McDropout);
    }

    #[test]
    fn frozen_masks_match_forward_with_scaled_units() {
        let base = random_net(2, &[2, 25, 25, 25, 25, 2]);
        let rate = 0.205046;
        let set = mc_dropout_instances(&base, rate, 5, 40).unwrap();
        let mut r = rng::stream(8, Stream::Probe);
        for inst in set.instances() {
            let scales = dropout_scales(&base.hidden_sizes(), rate, inst.seed);
            for _ in 0..100 {
                let x = ndarray::arr1(&[rng::uniform(&mut r, -3.0, 3.0), rng::uniform(&mut r, -3.0, 3.0)]);
                let a = inst.params.forward(x.view()).unwrap();
                let b = base.forward_scaled_hidden(x.view(), &scales).unwrap();
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()), "{u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn dropped_fraction_is_binomially_plausible() {
        let sizes = [25usize, 25, 25, 25];
        let rate = 0.205046;
        let k = 50;
        let units: usize = sizes.iter().sum::<usize>() * k;
        let dropped: usize = (0..k)
            .map(|m| {
                dropout_scales(&sizes, rate, 1000 + m as u64)
                    .iter()
                    .flatten()
                    .filter(|&&s| s == 0.0)
                    .count()
            })
            .sum();
        let mean = units as f64 * rate;
        let sd = (units as f64 * rate * (1.0 - rate)).sqrt();
        assert!((dropped as f64 - mean).abs() <= 3.0 * sd, "{dropped} vs {mean} +- {sd}");
    }

    #[test]
    fn invalid_rates_rejected() {
        let base = random_net(1, &[2, 3, 2]);
        assert!(mc_dropout_instances(&base, 1.0, 2, 0).is_err());
        assert!(mc_dropout_instances(&base, -0.1, 2, 0).is_err());
        assert!(mc_dropout_instances(&base, 0.5, 0, 0).is_err());
    }

    #[test]
    fn set_rejects_mismatched_members() {
        let a = Instance {
            params: random_net(1, &[2, 3, 2]),
            seed: 0,
            anchor: None,
        };
        let b = Instance {
            params: random_net(1, &[3, 3, 2]),
            seed: 1,
            anchor: None,
        };
        assert!(InstanceSet::new(InstanceKind::Ensemble, vec![a, b]).is_err());
        assert!(InstanceSet::new(InstanceKind::Ensemble, vec![]).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [
            InstanceKind::Single,
            InstanceKind::Ensemble,
            InstanceKind::AnchoredEnsemble,
            InstanceKind::McDropout,
        ] {
            assert_eq!(k.as_str().parse::<InstanceKind>().unwrap(), k);
        }
    }
}
