//! Frozen convolutional feature extractor for the perceptual loss.
//!
//! A small fixed-weight CNN (random He-initialized, never trained). The
//! perceptual distance is the mean squared difference of activations after
//! each conv block; the layer set is part of the run configuration via
//! `channels`.

use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, ParamSet, TapedParams};
use crate::rng::rng_from_seed;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerceptualConfig {
    /// Output channels of each conv block; each block halves resolution.
    pub channels: Vec<usize>,
    /// Seed for the fixed random weights.
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            channels: vec![8, 16],
            seed: 7,
        }
    }
}

pub struct PerceptualNet {
    pub cfg: PerceptualConfig,
    pub ps: ParamSet,
    convs: Vec<Conv2d>,
}

impl PerceptualNet {
    pub fn new(cfg: PerceptualConfig) -> Self {
        let mut rng = rng_from_seed(cfg.seed);
        let mut ps = ParamSet::new();
        let mut convs = Vec::new();
        let mut ci = 3;
        for (i, &co) in cfg.channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut ps, &format!("perc.conv{i}"), ci, co, &mut rng));
            ci = co;
        }
        PerceptualNet { cfg, ps, convs }
    }

    pub fn inject(&self, t: &mut Tape) -> TapedParams {
        self.ps.inject(t)
    }

    /// Activations after each conv+relu block (max-pooled between blocks).
    pub fn features(&self, t: &mut Tape, tp: &TapedParams, x: Var) -> Vec<Var> {
        let mut acts = Vec::new();
        let mut cur = x;
        for (i, conv) in self.convs.iter().enumerate() {
            let c = conv.forward(t, tp, cur);
            let r = t.relu(c);
            acts.push(r);
            if i + 1 < self.convs.len() {
                cur = t.max_pool2(r);
            }
        }
        acts
    }

    /// Mean squared feature distance, averaged over the layer set.
    pub fn distance(&self, t: &mut Tape, tp: &TapedParams, a: Var, b: Var) -> Var {
        let fa = self.features(t, tp, a);
        let fb = self.features(t, tp, b);
        let mut terms = Vec::new();
        for (va, vb) in fa.iter().zip(fb.iter()) {
            terms.push(t.mse_mean(*va, *vb));
        }
        let mut acc = terms[0];
        for term in &terms[1..] {
            acc = t.add(acc, *term);
        }
        t.scale(acc, 1.0 / terms.len() as f64)
    }
}
