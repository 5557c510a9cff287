//! Parameter storage, layer building blocks, and the Adam optimizer.
//!
//! Parameters live in a [`ParamSet`] (named, flat, ordered). A forward pass
//! first injects every parameter onto a [`Tape`] via [`ParamSet::inject`],
//! then layers reference them through [`TapedParams`]. After `backward`,
//! gradients are read back by parameter id.

use ndarray::{Array1, Array4, ArrayD, Axis, Ix1, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Grads, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// A named, ordered collection of parameters and buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn alloc(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Total scalar count across the given parameters.
    pub fn scalar_count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.entries[id.0].value.len()).sum()
    }

    /// Put every entry on a tape as a leaf.
    pub fn inject(&self, tape: &mut Tape) -> TapedParams {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone()))
            .collect();
        TapedParams { vars }
    }

    /// Serialize a subset of parameters to a deterministic byte string
    /// (names, shapes, and little-endian values).
    pub fn serialize_subset(&self, ids: &[ParamId]) -> Vec<u8> {
        let mut out = Vec::new();
        for id in ids {
            let e = &self.entries[id.0];
            out.extend_from_slice(e.name.as_bytes());
            out.push(0);
            for d in e.value.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in e.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn named_blobs(&self) -> Vec<(String, ArrayD<f64>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Overwrite values from named blobs; every entry must be present with a
    /// matching shape.
    pub fn load_blobs(&mut self, blobs: &[(String, ArrayD<f64>)]) -> Result<(), String> {
        for e in &mut self.entries {
            let found = blobs.iter().find(|(n, _)| n == &e.name);
            match found {
                Some((_, v)) if v.shape() == e.value.shape() => e.value = v.clone(),
                Some((_, v)) => {
                    return Err(format!(
                        "shape mismatch for `{}`: checkpoint {:?}, model {:?}",
                        e.name,
                        v.shape(),
                        e.value.shape()
                    ))
                }
                None => return Err(format!("missing parameter `{}`", e.name)),
            }
        }
        Ok(())
    }
}

/// Tape handles for an injected [`ParamSet`].
pub struct TapedParams {
    vars: Vec<Var>,
}

impl TapedParams {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

// ---- layers ----

fn he_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = ps.alloc(&format!("{name}.w"), he_init(rng, &[out_dim, in_dim], in_dim), true);
        let b = ps.alloc(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_dim])), true);
        Linear { w, b }
    }

    pub fn forward(&self, t: &mut Tape, tp: &TapedParams, x: Var) -> Var {
        t.linear(x, tp.get(self.w), tp.get(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv2d {
    pub fn new(ps: &mut ParamSet, name: &str, ci: usize, co: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = ps.alloc(&format!("{name}.w"), he_init(rng, &[co, ci, 3, 3], ci * 9), true);
        let b = ps.alloc(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])), true);
        Conv2d { w, b }
    }

    pub fn forward(&self, t: &mut Tape, tp: &TapedParams, x: Var) -> Var {
        t.conv2d(x, tp.get(self.w), tp.get(self.b))
    }
}

/// Batch normalization with learnable scale/shift and frozen running
/// statistics. Normalization always uses the stored running mean/variance;
/// [`BatchNorm2d::update_stats`] refreshes them (EMA, no gradient) during
/// generator pretraining.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

/// Name suffixes that identify BN scale/shift parameters inside a `ParamSet`.
pub const BN_SCALE_SUFFIX: &str = ".bn.gamma";
pub const BN_SHIFT_SUFFIX: &str = ".bn.beta";

impl BatchNorm2d {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = ps.alloc(
            &format!("{name}{BN_SCALE_SUFFIX}"),
            ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            true,
        );
        let beta = ps.alloc(
            &format!("{name}{BN_SHIFT_SUFFIX}"),
            ArrayD::zeros(IxDyn(&[channels])),
            true,
        );
        let running_mean = ps.alloc(
            &format!("{name}.bn.running_mean"),
            ArrayD::zeros(IxDyn(&[channels])),
            false,
        );
        let running_var = ps.alloc(
            &format!("{name}.bn.running_var"),
            ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            false,
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &mut Tape, tp: &TapedParams, ps: &ParamSet, x: Var) -> Var {
        let mean = ps
            .value(self.running_mean)
            .clone()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let var = ps
            .value(self.running_var)
            .clone()
            .into_dimensionality::<Ix1>()
            .unwrap();
        t.bn_frozen(x, tp.get(self.gamma), tp.get(self.beta), &mean, &var, self.eps)
    }

    /// EMA update of the running statistics from a pre-normalization batch.
    pub fn update_stats(&self, ps: &mut ParamSet, batch: &Array4<f64>, momentum: f64) {
        let c = batch.shape()[1];
        let per_channel = (batch.len() / c) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let view = batch.index_axis(Axis(1), ch);
            let m = view.sum() / per_channel;
            let v = view.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / per_channel;
            mean[ch] = m;
            var[ch] = v;
        }
        let rm = ps.value_mut(self.running_mean);
        *rm = (&*rm * (1.0 - momentum) + &mean.view().into_dyn() * momentum).into_dyn();
        let rv = ps.value_mut(self.running_var);
        *rv = (&*rv * (1.0 - momentum) + &var.view().into_dyn() * momentum).into_dyn();
    }
}

// ---- optimizer ----

/// Adam with optional per-parameter learning-rate overrides.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    lr_override: Vec<Option<f64>>,
}

impl Adam {
    pub fn new(ps: &ParamSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: ps.entries.iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect(),
            v: ps.entries.iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect(),
            lr_override: vec![None; ps.len()],
        }
    }

    pub fn set_lr_for(&mut self, ids: &[ParamId], lr: f64) {
        for id in ids {
            self.lr_override[id.0] = Some(lr);
        }
    }

    /// Apply one update from tape gradients. Only trainable entries move.
    pub fn step(&mut self, ps: &mut ParamSet, tp: &TapedParams, grads: &Grads) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..ps.len() {
            if !ps.entries[i].trainable {
                continue;
            }
            let g = grads.get(tp.get(ParamId(i)));
            let lr = self.lr_override[i].unwrap_or(self.lr);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(m).and(v).and(g).and(&mut ps.entries[i].value).for_each(
                |m, v, &g, p| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + self.eps);
                },
            );
        }
    }

    pub fn state_blobs(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut blobs = vec![(
            "adam.step_count".to_string(),
            ArrayD::from_elem(IxDyn(&[1]), self.step_count as f64),
        )];
        for (i, m) in self.m.iter().enumerate() {
            blobs.push((format!("adam.m.{i}"), m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            blobs.push((format!("adam.v.{i}"), v.clone()));
        }
        blobs
    }

    pub fn load_state_blobs(&mut self, blobs: &[(String, ArrayD<f64>)]) -> Result<(), String> {
        let find = |name: &str| blobs.iter().find(|(n, _)| n == name).map(|(_, v)| v);
        if let Some(sc) = find("adam.step_count") {
            self.step_count = sc.iter().next().copied().unwrap_or(0.0) as u64;
        }
        for i in 0..self.m.len() {
            if let Some(m) = find(&format!("adam.m.{i}")) {
                self.m[i] = m.clone();
            }
            if let Some(v) = find(&format!("adam.v.{i}")) {
                self.v[i] = v.clone();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn adam_moves_only_trainable_params() {
        let mut rng = rng_from_seed(0);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "fc", 3, 2, &mut rng);
        let buf = ps.alloc("stats", ArrayD::from_elem(IxDyn(&[2]), 5.0), false);
        let before_buf = ps.value(buf).clone();
        let before_w = ps.value(lin.w).clone();

        let mut t = Tape::new();
        let tp = ps.inject(&mut t);
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[4, 3]), 0.5));
        let y = lin.forward(&mut t, &tp, x);
        let loss = t.mean(y);
        let grads = t.backward(loss);
        let mut opt = Adam::new(&ps, 0.1);
        opt.step(&mut ps, &tp, &grads);

        assert_eq!(ps.value(buf), &before_buf);
        assert_ne!(ps.value(lin.w), &before_w);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut ps = ParamSet::new();
        let x = ps.alloc("x", ArrayD::from_elem(IxDyn(&[2]), 3.0), true);
        let mut opt = Adam::new(&ps, 0.1);
        for _ in 0..500 {
            let mut t = Tape::new();
            let tp = ps.inject(&mut t);
            let xv = tp.get(x);
            let sq = t.mul(xv, xv);
            let loss = t.mean(sq);
            let grads = t.backward(loss);
            opt.step(&mut ps, &tp, &grads);
        }
        assert!(ps.value(x).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn serialize_subset_is_value_sensitive() {
        let mut rng = rng_from_seed(1);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "fc", 2, 2, &mut rng);
        let ids: Vec<ParamId> = ps.ids().collect();
        let a = ps.serialize_subset(&ids);
        ps.value_mut(lin.b)[[0]] += 1e-12;
        let b = ps.serialize_subset(&ids);
        assert_ne!(a, b);
    }
}
