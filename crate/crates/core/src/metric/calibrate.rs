//! Fitting per-channel weights to human two-alternative judgments.

use percsim_autograd::{Adam, Graph, ParamBinding, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::distance::{distance_profile, MetricWeights};
use super::extractor::FeatureExtractor;
use crate::error::{Error, Result};
use crate::quality::TwoAfcTriplet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub steps: usize,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 1e-2, hidden: 32, seed: 0 }
    }
}

/// Precomputed distance profiles of each `(reference, p0)` and `(reference, p1)` pair.
#[derive(Clone, Debug, Default)]
pub struct CalibrationSet {
    pub p0: Vec<Vec<f64>>,
    pub p1: Vec<Vec<f64>>,
    pub h: Vec<f64>,
}

impl CalibrationSet {
    pub fn from_triplets(extractor: &dyn FeatureExtractor, triplets: &[TwoAfcTriplet]) -> Result<Self> {
        let mut set = Self::default();
        for t in triplets {
            set.p0.push(distance_profile(&t.reference, &t.p0, extractor)?);
            set.p1.push(distance_profile(&t.reference, &t.p1, extractor)?);
            set.h.push(t.h);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    fn check(&self, width: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Precondition("calibration needs at least one judgment".into()));
        }
        if self.p0.len() != self.len() || self.p1.len() != self.len() {
            return Err(Error::Dimension("profile and judgment counts differ".into()));
        }
        if self.p0.iter().chain(&self.p1).any(|p| p.len() != width) {
            return Err(Error::Dimension(format!("profiles must have {width} entries")));
        }
        if self.h.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return Err(Error::Domain("judgments must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Small network mapping `(d0, d1)` to the predicted fraction preferring `p1`.
#[derive(Clone, Debug)]
pub struct RankingHead {
    pub params: ParamStore,
}

impl RankingHead {
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let b1 = 1.0 / 2f64.sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        params.insert("rank.fc1.weight", Tensor::uniform(&[2, hidden], -b1, b1, &mut rng));
        params.insert("rank.fc1.bias", Tensor::zeros(&[1, hidden]));
        params.insert("rank.fc2.weight", Tensor::uniform(&[hidden, 1], -b2, b2, &mut rng));
        params.insert("rank.fc2.bias", Tensor::zeros(&[1, 1]));
        Self { params }
    }

    /// Pre-sigmoid score for `[N, 1]` distance columns.
    pub fn logits<'g>(p: &ParamBinding<'g, '_>, d0: Var<'g>, d1: Var<'g>) -> Var<'g> {
        let x = Var::concat(&[d0, d1], 1);
        let hidden = (x.matmul(p.get("rank.fc1.weight")) + p.get("rank.fc1.bias")).softplus();
        hidden.matmul(p.get("rank.fc2.weight")) + p.get("rank.fc2.bias")
    }

    pub fn predict(&self, d0: f64, d1: f64) -> f64 {
        let g = Graph::inference();
        let p = ParamBinding::frozen(&g, &self.params);
        let s = Self::logits(&p, g.constant(Tensor::new(&[1, 1], vec![d0])), g.constant(Tensor::new(&[1, 1], vec![d1])));
        s.sigmoid().item()
    }
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub weights: MetricWeights,
    pub head: RankingHead,
    /// Cross-entropy before each step.
    pub losses: Vec<f64>,
}

/// Minimize binary cross-entropy between the head's prediction and `h` over
/// the weights and the head jointly, clamping weights at zero after each step.
pub fn calibrate_profiles(set: &CalibrationSet, init: &MetricWeights, cfg: &CalibrationConfig) -> Result<Calibration> {
    let width = init.flat().len();
    set.check(width)?;
    if cfg.hidden == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("calibration needs a hidden width and a positive learning rate".into()));
    }
    let n = set.len();
    let stack = |rows: &[Vec<f64>]| Tensor::new(&[n, width], rows.concat());
    let (p0, p1) = (stack(&set.p0), stack(&set.p1));
    let h = Tensor::new(&[n, 1], set.h.clone());

    let mut params = RankingHead::init(cfg.hidden, cfg.seed).params;
    params.insert("w", Tensor::new(&[width, 1], init.flat()));
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let g = Graph::new();
        let p = ParamBinding::all_trainable(&g, &params);
        let w2 = p.get("w").square();
        let d0 = g.constant(p0.clone()).matmul(w2);
        let d1 = g.constant(p1.clone()).matmul(w2);
        let s = RankingHead::logits(&p, d0, d1);
        let loss = (s.softplus() - s * g.constant(h.clone())).mean();
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numeric("calibration loss".into()));
        }
        losses.push(value);
        let grads = p.gradients(&g.backward(loss));
        drop(p);
        adam.step(&mut params, &grads);
        if let Some(w) = params.get_mut("w") {
            w.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    let w = params.remove("w").expect("weights are present");
    Ok(Calibration { weights: init.with_flat(w.data()), head: RankingHead { params }, losses })
}

/// Calibrate all-ones initial weights on judged triplets.
pub fn calibrate(
    extractor: &dyn FeatureExtractor,
    triplets: &[TwoAfcTriplet],
    cfg: &CalibrationConfig,
) -> Result<Calibration> {
    let set = CalibrationSet::from_triplets(extractor, triplets)?;
    calibrate_profiles(&set, &MetricWeights::ones(extractor), cfg)
}
