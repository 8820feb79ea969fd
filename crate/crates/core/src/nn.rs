//! Parameter storage and the neural building blocks used by the model.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a named tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Insertion order is stable and defines ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "param_set",
                format!(
                    "`{}` is {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids of every parameter whose name starts with one of `prefixes`.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| prefixes.iter().any(|p| self.names[id.0].starts_with(p)))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Affine map `x W + b` over the last axis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.insert(
            format!("{name}.w"),
            xavier_uniform(rng, fan_in, fan_out, &[fan_in, fan_out]),
        )?;
        let bias = store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output dims".into()));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x);
            }
            x = layer.forward(tape, store, x)?;
        }
        Ok(x)
    }
}

/// Multi-head scaled dot-product attention over `[B, T, d]` inputs.
///
/// With `value`/`output` projections present this is the standard layer.
/// Without them, each head mixes its own slice of the input values across
/// positions only, so output coordinate `j` depends on input coordinate `j`
/// of the attended positions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: Option<ParamId>,
    pub output: Option<ParamId>,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        project_values: bool,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        let mut proj =
            |suffix: &str| store.insert(format!("{name}.{suffix}"), xavier_uniform(rng, dim, dim, &[dim, dim]));
        let query = proj("wq")?;
        let key = proj("wk")?;
        let (value, output) = if project_values {
            (Some(proj("wv")?), Some(proj("wo")?))
        } else {
            (None, None)
        };
        Ok(MultiHeadAttention {
            query,
            key,
            value,
            output,
            dim,
            heads,
        })
    }

    /// Attention probabilities `[B*heads, Tq, Tk]`.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, q: Var, k: Var) -> Result<Var> {
        let wq = tape.param(store, self.query);
        let wk = tape.param(store, self.key);
        let qp = tape.matmul(q, wq)?;
        let kp = tape.matmul(k, wk)?;
        let qh = tape.split_heads(qp, self.heads)?;
        let kh = tape.split_heads(kp, self.heads)?;
        let scores = tape.batch_matmul(qh, kh, true)?;
        let scaled = tape.scale(scores, 1.0 / ((self.dim / self.heads) as f64).sqrt());
        Ok(tape.softmax_last(scaled))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<Var> {
        for (name, x) in [("query", q), ("key", k), ("value", v)] {
            let s = tape.shape(x);
            if s.len() != 3 || s[2] != self.dim {
                return Err(Error::shape(
                    "attention",
                    format!("{name} must be [B, T, {}], got {s:?}", self.dim),
                ));
            }
        }
        let attn = self.weights(tape, store, q, k)?;
        let vp = match self.value {
            Some(wv) => {
                let wv = tape.param(store, wv);
                tape.matmul(v, wv)?
            }
            None => v,
        };
        let vh = tape.split_heads(vp, self.heads)?;
        let mixed = tape.batch_matmul(attn, vh, false)?;
        let merged = tape.merge_heads(mixed, self.heads)?;
        match self.output {
            Some(wo) => {
                let wo = tape.param(store, wo);
                tape.matmul(merged, wo)
            }
            None => Ok(merged),
        }
    }
}

/// Single-layer gated recurrent unit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gru {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, hidden: usize) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Config("GRU sizes must be positive".into()));
        }
        let w_input = store.insert(
            format!("{name}.w_ih"),
            xavier_uniform(rng, input, hidden, &[input, 3 * hidden]),
        )?;
        let w_hidden = store.insert(
            format!("{name}.w_hh"),
            xavier_uniform(rng, hidden, hidden, &[hidden, 3 * hidden]),
        )?;
        let b_input = store.insert(format!("{name}.b_ih"), Tensor::zeros(&[3 * hidden]))?;
        let b_hidden = store.insert(format!("{name}.b_hh"), Tensor::zeros(&[3 * hidden]))?;
        Ok(Gru {
            w_input,
            w_hidden,
            b_input,
            b_hidden,
            input,
            hidden,
        })
    }

    /// One step: gates in order reset, update, candidate.
    pub fn cell(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let h_dim = self.hidden;
        let wi = tape.param(store, self.w_input);
        let wh = tape.param(store, self.w_hidden);
        let bi = tape.param(store, self.b_input);
        let bh = tape.param(store, self.b_hidden);
        let xi = tape.matmul(x, wi)?;
        let xi = tape.add_bias(xi, bi)?;
        let hh = tape.matmul(h, wh)?;
        let hh = tape.add_bias(hh, bh)?;

        let xr = tape.slice_last(xi, 0, h_dim)?;
        let hr = tape.slice_last(hh, 0, h_dim)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);

        let xz = tape.slice_last(xi, h_dim, h_dim)?;
        let hz = tape.slice_last(hh, h_dim, h_dim)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);

        let xn = tape.slice_last(xi, 2 * h_dim, h_dim)?;
        let hn = tape.slice_last(hh, 2 * h_dim, h_dim)?;
        let rhn = tape.mul(r, hn)?;
        let n = tape.add(xn, rhn)?;
        let n = tape.tanh(n);

        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    /// Final hidden state for `seq[B, T, input]`, starting from zeros.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<Var> {
        let s = tape.shape(seq).to_vec();
        if s.len() != 3 || s[2] != self.input {
            return Err(Error::shape(
                "gru",
                format!("expected [B, T, {}], got {s:?}", self.input),
            ));
        }
        if s[1] == 0 {
            return Err(Error::Input("GRU needs a nonempty sequence".into()));
        }
        let mut h = tape.leaf(Tensor::zeros(&[s[0], self.hidden]));
        for t in 0..s[1] {
            let x = tape.select_axis1(seq, t)?;
            h = self.cell(tape, store, x, h)?;
        }
        Ok(h)
    }
}
