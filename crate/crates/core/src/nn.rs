//! Parameter storage and the handful of layer types the networks are built
//! from. Layers are plain descriptors; their weights live in a
//! [`ParamStore`] under dotted names such as `backbone.stage1.conv.weight`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Named parameters plus non-trainable buffers (batch-norm running stats).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor<T>) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor<T>)> {
        self.params.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Same parameters in another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// SHA-256 over names, shapes and the f64 bit patterns of every value.
    pub fn digest(&self) -> String {
        self.digest_matching("")
    }

    pub fn digest_matching(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (section, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (name, t) in map.iter().filter(|(k, _)| k.starts_with(prefix)) {
                h.update(section.as_bytes());
                h.update(name.as_bytes());
                for &d in t.shape() {
                    h.update((d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    h.update(v.as_f64().to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

fn normal_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * std)).collect(),
    )
}

/// Square-kernel convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self { name: name.into(), cin, cout, k, stride, pad: k / 2 }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// He-normal weights, zero bias.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let std = (2.0 / (self.cin * self.k * self.k) as f64).sqrt();
        self.init_with(store, rng, std, 0.0);
    }

    pub fn init_with<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng, std: f64, bias: f64) {
        store.insert(&self.weight_name(), normal_tensor(rng, &[self.cout, self.cin, self.k, self.k], std));
        store.insert(&self.bias_name(), Tensor::full(&[self.cout], T::lit(bias)));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, &self.weight_name());
        let b = g.param(store, &self.bias_name());
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Fully connected layer `[M, din] -> [M, dout]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self { name: name.into(), din, dout }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let std = (2.0 / self.din as f64).sqrt();
        self.init_with(store, rng, std, 0.0);
    }

    pub fn init_with<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng, std: f64, bias: f64) {
        store.insert(&self.weight_name(), normal_tensor(rng, &[self.dout, self.din], std));
        store.insert(&self.bias_name(), Tensor::full(&[self.dout], T::lit(bias)));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, &self.weight_name());
        let b = g.param(store, &self.bias_name());
        g.linear(x, w, b)
    }
}

/// Batch normalisation over NCHW maps with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels, eps: 1e-5, momentum: 0.1 }
    }

    fn names(&self) -> [String; 4] {
        [
            format!("{}.weight", self.name),
            format!("{}.bias", self.name),
            format!("{}.running_mean", self.name),
            format!("{}.running_var", self.name),
        ]
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        let [w, b, rm, rv] = self.names();
        store.insert(&w, Tensor::full(&[self.channels], T::one()));
        store.insert(&b, Tensor::zeros(&[self.channels]));
        store.insert_buffer(&rm, Tensor::zeros(&[self.channels]));
        store.insert_buffer(&rv, Tensor::full(&[self.channels], T::one()));
    }

    /// Training mode normalises with batch statistics and records the
    /// running-stat update on the graph; inference mode uses the stored
    /// running statistics.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, train: bool) -> Var {
        let [wn, bn, rmn, rvn] = self.names();
        let gamma = g.param(store, &wn);
        let beta = g.param(store, &bn);
        let rm = store.buffer(&rmn).expect("running mean").clone();
        let rv = store.buffer(&rvn).expect("running var").clone();
        if train {
            let (n, _, h, w) = g.value(x).nchw();
            let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps);
            let count = (n * h * w) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_rm: Vec<T> =
                rm.data().iter().zip(&mean).map(|(&r, &b)| T::lit((1.0 - m) * r.as_f64() + m * b.as_f64())).collect();
            let new_rv: Vec<T> = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| T::lit((1.0 - m) * r.as_f64() + m * b.as_f64() * unbias))
                .collect();
            g.record_buffer_update(rmn, Tensor::from_vec(&[self.channels], new_rm));
            g.record_buffer_update(rvn, Tensor::from_vec(&[self.channels], new_rv));
            y
        } else {
            let inv: Vec<T> = rv.data().iter().map(|&v| T::one() / (v + T::lit(self.eps)).sqrt()).collect();
            let neg_mean_inv: Vec<T> = rm.data().iter().zip(&inv).map(|(&m, &i)| -m * i).collect();
            let inv = g.constant(Tensor::from_vec(&[self.channels], inv));
            let nmi = g.constant(Tensor::from_vec(&[self.channels], neg_mean_inv));
            let scale = g.mul(gamma, inv);
            let gm = g.mul(gamma, nmi);
            let shift = g.add(beta, gm);
            g.channel_affine(x, scale, shift)
        }
    }
}

/// Applies recorded running-stat updates to `store`.
pub fn apply_buffer_updates<T: Real>(store: &mut ParamStore<T>, updates: Vec<(String, Tensor<T>)>) {
    for (name, value) in updates {
        store.insert_buffer(&name, value);
    }
}
