//! Parameterized layers. Each layer only knows the names of its parameters;
//! values live in a [`ParameterStore`] and are read through a [`Graph`].

use std::ops::Range;

use rand::Rng;

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParameterStore;

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: format!("{prefix}/w"),
            bias: format!("{prefix}/b"),
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }

    /// Xavier-uniform weights, zero bias.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        let bound = (6.0 / (self.in_dim + self.out_dim) as f64).sqrt();
        store.init_uniform(&self.weight, self.in_dim, self.out_dim, bound, rng)?;
        store.init_zeros(&self.bias, 1, self.out_dim)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.in_dim {
            return Err(NumericsError::shape(
                "linear",
                format!("input width {}", self.in_dim),
                format!("input width {cols}"),
            ));
        }
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    first: Linear,
    second: Linear,
}

impl Mlp {
    pub fn new(prefix: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp {
            first: Linear::new(&format!("{prefix}/0"), in_dim, hidden),
            second: Linear::new(&format!("{prefix}/1"), hidden, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }

    pub fn layers(&self) -> [&Linear; 2] {
        [&self.first, &self.second]
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        self.first.init(store, rng)?;
        self.second.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.relu(h)?;
        self.second.forward(g, h)
    }
}

/// Multi-head cross-attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(NumericsError::invalid(
                "MultiHeadAttention::new",
                format!("width {dim} not divisible by {heads} heads"),
            ));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(&format!("{prefix}/q"), dim, dim),
            key: Linear::new(&format!("{prefix}/k"), dim, dim),
            value: Linear::new(&format!("{prefix}/v"), dim, dim),
            output: Linear::new(&format!("{prefix}/o"), dim, dim),
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.query.out_dim
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        for l in [&self.query, &self.key, &self.value, &self.output] {
            l.init(store, rng)?;
        }
        Ok(())
    }

    /// Every query attends over all keys.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, values: Var) -> Result<Var> {
        let m = g.value(queries).rows();
        let n = g.value(keys).rows();
        let segments = vec![0..n; m];
        self.forward_segmented(g, queries, keys, values, &segments)
    }

    /// Query row `i` attends only over key rows `segments[i]`.
    pub fn forward_segmented(
        &self,
        g: &mut Graph,
        queries: Var,
        keys: Var,
        values: Var,
        segments: &[Range<usize>],
    ) -> Result<Var> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys)?;
        let v = self.value.forward(g, values)?;
        let mixed = g.attention(q, k, v, self.heads, segments)?;
        self.output.forward(g, mixed)
    }

    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys)?;
        let v = self.value.forward(g, values)?;
        let n = g.value(keys).rows();
        let m = g.value(queries).rows();
        let mixed = g.attention(q, k, v, self.heads, &vec![0..n; m])?;
        let weights = g
            .attention_weights(mixed)
            .map(<[Vec<f64>]>::to_vec)
            .unwrap_or_default();
        Ok((self.output.forward(g, mixed)?, weights))
    }
}

/// Gated recurrent unit with gates ordered `[reset | update | candidate]`:
///
/// ```text
/// r  = sigmoid(x Wir + bir + h Whr + bhr)
/// z  = sigmoid(x Wiz + biz + h Whz + bhz)
/// n  = tanh(x Win + bin + r * (h Whn + bhn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    hidden_dim: usize,
}

impl GruCell {
    pub fn new(prefix: &str, input_dim: usize, hidden_dim: usize) -> Self {
        GruCell {
            input: Linear::new(&format!("{prefix}/input"), input_dim, 3 * hidden_dim),
            hidden: Linear::new(&format!("{prefix}/hidden"), hidden_dim, 3 * hidden_dim),
            hidden_dim,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn input_layer(&self) -> &Linear {
        &self.input
    }

    pub fn hidden_layer(&self) -> &Linear {
        &self.hidden
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        self.input.init(store, rng)?;
        self.hidden.init(store, rng)
    }

    pub fn step(&self, g: &mut Graph, hidden: Var, input: Var) -> Result<Var> {
        let hd = self.hidden_dim;
        let (hr, hc) = (g.value(hidden).rows(), g.value(hidden).cols());
        if hc != hd || g.value(input).rows() != hr {
            return Err(NumericsError::shape(
                "gru_step",
                format!("hidden [{}, {hd}]", g.value(input).rows()),
                format!("hidden [{hr}, {hc}]"),
            ));
        }
        let xi = self.input.forward(g, input)?;
        let hh = self.hidden.forward(g, hidden)?;
        let (xr, xz, xn) = (g.slice_cols(xi, 0, hd)?, g.slice_cols(xi, hd, hd)?, g.slice_cols(xi, 2 * hd, hd)?);
        let (hr_, hz, hn) = (g.slice_cols(hh, 0, hd)?, g.slice_cols(hh, hd, hd)?, g.slice_cols(hh, 2 * hd, hd)?);
        let r = g.add(xr, hr_)?;
        let r = g.sigmoid(r)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let gated = g.mul(r, hn)?;
        let n = g.add(xn, gated)?;
        let n = g.tanh(n)?;
        // h' = n + z * (h - n)
        let diff = g.sub(hidden, n)?;
        let carry = g.mul(z, diff)?;
        g.add(n, carry)
    }
}

/// Mean over elements of `log(2b) + |target - mu| / b`.
pub fn laplace_nll(g: &mut Graph, mu: Var, scale: Var, target: Var) -> Result<Var> {
    if g.value(scale).data().iter().any(|&b| b <= 0.0) {
        return Err(NumericsError::invalid("laplace_nll", "non-positive scale"));
    }
    let two_b = g.scale(scale, 2.0)?;
    let log_term = g.log(two_b)?;
    let resid = g.sub(target, mu)?;
    let resid = g.abs(resid)?;
    let data_term = g.div(resid, scale)?;
    let total = g.add(log_term, data_term)?;
    g.mean(total)
}
