//! Neural building blocks on top of the tape: parameter store, linear
//! layers, layer normalization, depthwise+pointwise 1-D convolution, and
//! single-head scaled dot-product attention.
//!
//! Parameters live in a [`ParamStore`] as plain matrices; every forward
//! pass binds them onto a fresh tape as leaf nodes ([`ParamStore::bind`]),
//! which is what lets independent samples run on independent tapes.

use crate::matrix::Matrix;
use crate::tape::{NodeId, Tape};
use crate::{EvidentError, Result};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Handle to one parameter matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter matrices in registration order. The order is the
/// contract for optimizer state, gradient accumulation and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Replace a parameter by name; shapes must match. Used when loading
    /// checkpoints.
    pub fn set_by_name(&mut self, name: &str, value: Matrix) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| EvidentError::Parse(format!("unknown parameter '{name}'")))?;
        if self.values[idx].shape() != value.shape() {
            return Err(EvidentError::Dimension(format!(
                "parameter '{}' expects {:?}, got {:?}",
                name,
                self.values[idx].shape(),
                value.shape()
            )));
        }
        self.values[idx] = value;
        Ok(())
    }

    /// Create tape leaves for every parameter, in registration order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Binding<'t> {
        let nodes = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Binding { tape, nodes }
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.rows() * v.cols()).sum()
    }
}

/// Per-tape leaf nodes for every parameter in a store.
pub struct Binding<'t> {
    pub tape: &'t Tape,
    nodes: Vec<NodeId>,
}

impl<'t> Binding<'t> {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Gradients for all parameters, in registration order.
    pub fn param_grads(&self, grads: &crate::tape::Gradients) -> Vec<Matrix> {
        self.nodes.iter().map(|&n| grads.get(n).clone()).collect()
    }
}

/// Glorot-uniform weights: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("glorot shape")
}

/// Fully connected layer y = xW + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot_uniform(rng, d_in, d_out));
        let b = store.add(format!("{name}.b"), Matrix::zeros(1, d_out));
        Linear { w, b, d_in, d_out }
    }

    /// Same as [`Linear::new`] but with a preset bias row.
    pub fn with_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        bias: &[f64],
    ) -> Self {
        let d_out = bias.len();
        let w = store.add(format!("{name}.w"), glorot_uniform(rng, d_in, d_out));
        let b = store.add(format!("{name}.b"), Matrix::row_vector(bias));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, bind: &Binding, x: NodeId) -> NodeId {
        let (_, cols) = bind.tape.shape(x);
        assert!(
            cols == self.d_in,
            "linear layer expects {} input columns, got {}",
            self.d_in,
            cols
        );
        let t = bind.tape;
        t.add_row(t.matmul(x, bind.node(self.w)), bind.node(self.b))
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::ones(1, dim));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, dim));
        LayerNorm {
            gain,
            bias,
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, bind: &Binding, x: NodeId) -> NodeId {
        let t = bind.tape;
        let normed = t.layer_norm_rows(x, self.eps);
        t.add_row(t.mul_row(normed, bind.node(self.gain)), bind.node(self.bias))
    }
}

/// Per-channel temporal convolution followed by pointwise mixing.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub mix: Linear,
    pub kernel_len: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        dim: usize,
        kernel_len: usize,
    ) -> Result<Self> {
        if kernel_len % 2 == 0 {
            return Err(EvidentError::Config(format!(
                "conv kernel length must be odd, got {kernel_len}"
            )));
        }
        let kernel = store.add(
            format!("{name}.kernel"),
            glorot_uniform(rng, kernel_len, dim),
        );
        let mix = Linear::new(store, rng, &format!("{name}.mix"), dim, dim);
        Ok(Conv1d {
            kernel,
            mix,
            kernel_len,
        })
    }

    pub fn forward(&self, bind: &Binding, x: NodeId) -> NodeId {
        let t = bind.tape;
        let conv = t.conv_depthwise(x, bind.node(self.kernel));
        self.mix.forward(bind, conv)
    }
}

/// Single-head scaled dot-product self-attention:
/// softmax(Q K^T / sqrt(D)) V with learned Q, K, V projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, dim: usize) -> Self {
        Attention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            dim,
        }
    }

    pub fn forward(&self, bind: &Binding, x: NodeId) -> NodeId {
        let t = bind.tape;
        let q = self.q.forward(bind, x);
        let k = self.k.forward(bind, x);
        let v = self.v.forward(bind, x);
        let scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / (self.dim as f64).sqrt());
        let attn = t.softmax_rows(scores);
        t.matmul(attn, v)
    }

    /// Attention weights alone (rows sum to one); used by tests.
    pub fn attention_matrix(&self, bind: &Binding, x: NodeId) -> NodeId {
        let t = bind.tape;
        let q = self.q.forward(bind, x);
        let k = self.k.forward(bind, x);
        let scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / (self.dim as f64).sqrt());
        t.softmax_rows(scores)
    }
}

/// Two-layer MLP with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        Mlp2 {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d_in, d_hidden),
            l2: Linear::new(store, rng, &format!("{name}.l2"), d_hidden, d_out),
        }
    }

    pub fn forward(&self, bind: &Binding, x: NodeId) -> NodeId {
        let t = bind.tape;
        self.l2.forward(bind, t.gelu(self.l1.forward(bind, x)))
    }
}
