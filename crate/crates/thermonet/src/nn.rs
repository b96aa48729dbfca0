//! Neural-network building blocks: dense stacks, the LSTM cell, parameter
//! storage, initialization, and the adaptive-moment optimizer.
//!
//! All trainable parameters live in one flat `Vec<f64>` inside a
//! [`ParamSet`]; layer specs hold ranges into it. This keeps optimizer
//! state, gradient accumulation, and tape leaf creation trivially aligned.

use crate::autodiff::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected input of length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("gradient length {got} does not match parameter count {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error("non-finite gradient at parameter `{name}` index {index} (value {value})")]
    NonFiniteGradient {
        name: String,
        index: usize,
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Swish,
    Softplus,
    Relu,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Swish => x * Activation::Sigmoid.apply(x),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    pub fn apply_tape(self, t: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Sigmoid => t.sigmoid(x),
            Activation::Tanh => t.tanh(x),
            Activation::Swish => t.swish(x),
            Activation::Softplus => t.softplus(x),
            Activation::Relu => t.relu(x),
            Activation::Linear => x,
        }
    }
}

/// Flat parameter vector with named, shaped segments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSet {
    pub values: Vec<f64>,
    entries: Vec<ParamEntry>,
    /// Per-parameter clamp-at-zero flag (final free-energy layer).
    non_negative: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            values: Vec::new(),
            entries: Vec::new(),
            non_negative: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn alloc(&mut self, name: &str, shape: &[usize], non_negative: bool) -> Range<usize> {
        let n: usize = shape.iter().product();
        let offset = self.values.len();
        self.values.extend(std::iter::repeat(0.0).take(n));
        self.non_negative.extend(std::iter::repeat(non_negative).take(n));
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        offset..offset + n
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry_name(&self, index: usize) -> &str {
        self.entries
            .iter()
            .rev()
            .find(|e| e.offset <= index)
            .map(|e| e.name.as_str())
            .unwrap_or("<unknown>")
    }

    pub fn is_non_negative(&self, index: usize) -> bool {
        self.non_negative[index]
    }

    /// Clamp flagged parameters at zero.
    pub fn apply_constraints(&mut self) {
        for (v, &nn) in self.values.iter_mut().zip(self.non_negative.iter()) {
            if nn && *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    /// Insert every parameter as a leaf on the tape. Leaves come out with
    /// indices 0..len when the tape is fresh, so gradients can be read back
    /// positionally.
    pub fn leaves(&self, t: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|&v| t.leaf(v)).collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// One dense layer: a = Φ(W·x + b).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub non_negative: bool,
}

impl DenseLayer {
    pub fn alloc(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        non_negative: bool,
    ) -> Self {
        let w = params.alloc(&format!("{name}.w"), &[out_dim, in_dim], non_negative);
        let b = params.alloc(&format!("{name}.b"), &[out_dim], non_negative);
        DenseLayer {
            w,
            b,
            in_dim,
            out_dim,
            activation,
            non_negative,
        }
    }

    pub fn forward(&self, values: &[f64], x: &[f64], out: &mut Vec<f64>) -> Result<(), NnError> {
        if x.len() != self.in_dim {
            return Err(NnError::ShapeMismatch {
                expected: self.in_dim,
                got: x.len(),
            });
        }
        out.clear();
        let w = &values[self.w.clone()];
        let b = &values[self.b.clone()];
        for i in 0..self.out_dim {
            let row = &w[i * self.in_dim..(i + 1) * self.in_dim];
            let mut s = b[i];
            for (wj, xj) in row.iter().zip(x.iter()) {
                s += wj * xj;
            }
            out.push(self.activation.apply(s));
        }
        Ok(())
    }

    pub fn forward_tape(&self, t: &mut Tape, params: &[Var], x: &[Var]) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.out_dim);
        for i in 0..self.out_dim {
            let mut acc = params[self.b.start + i];
            for j in 0..self.in_dim {
                acc = t.fma(params[self.w.start + i * self.in_dim + j], x[j], acc);
            }
            out.push(self.activation.apply_tape(t, acc));
        }
        out
    }
}

/// Multi-layer dense network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `dims` lists layer sizes input-first; hidden layers get `hidden_act`,
    /// the final layer `out_act`. `non_negative_out` flags the last layer's
    /// weights and bias for the clamp constraint.
    #[allow(clippy::too_many_arguments)]
    pub fn alloc(
        params: &mut ParamSet,
        name: &str,
        dims: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        non_negative_out: bool,
    ) -> Self {
        let mut layers = Vec::new();
        for k in 0..dims.len() - 1 {
            let last = k == dims.len() - 2;
            layers.push(DenseLayer::alloc(
                params,
                &format!("{name}.l{k}"),
                dims[k],
                dims[k + 1],
                if last { out_act } else { hidden_act },
                last && non_negative_out,
            ));
        }
        Mlp { layers }
    }

    pub fn forward(&self, values: &[f64], x: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward(values, &cur, &mut next)?;
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_tape(&self, t: &mut Tape, params: &[Var], x: &[Var]) -> Vec<Var> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.forward_tape(t, params, &cur);
        }
        cur
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }
}

/// One LSTM cell with stacked gate parameters.
///
/// Rows of `w`/`r`/`b` are the concatenation [input; forget; candidate;
/// output], H rows per gate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmCell {
    pub w: Range<usize>,
    pub r: Range<usize>,
    pub b: Range<usize>,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Hidden and cell state of one LSTM layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

impl LstmCell {
    pub fn alloc(params: &mut ParamSet, name: &str, in_dim: usize, hidden: usize) -> Self {
        let w = params.alloc(&format!("{name}.w"), &[4 * hidden, in_dim], false);
        let r = params.alloc(&format!("{name}.r"), &[4 * hidden, hidden], false);
        let b = params.alloc(&format!("{name}.b"), &[4 * hidden], false);
        LstmCell {
            w,
            r,
            b,
            in_dim,
            hidden,
        }
    }

    /// One timestep: gate preactivations W·x + R·h + b, sigmoid gates,
    /// tanh candidate, c' = f⊙c + i⊙g, h' = o⊙tanh(c').
    pub fn step(&self, values: &[f64], x: &[f64], state: &LstmState) -> Result<LstmState, NnError> {
        if x.len() != self.in_dim {
            return Err(NnError::ShapeMismatch {
                expected: self.in_dim,
                got: x.len(),
            });
        }
        let h_dim = self.hidden;
        let w = &values[self.w.clone()];
        let r = &values[self.r.clone()];
        let b = &values[self.b.clone()];
        let mut pre = vec![0.0; 4 * h_dim];
        for (row, p) in pre.iter_mut().enumerate() {
            let mut s = b[row];
            let wr = &w[row * self.in_dim..(row + 1) * self.in_dim];
            for (wj, xj) in wr.iter().zip(x.iter()) {
                s += wj * xj;
            }
            let rr = &r[row * h_dim..(row + 1) * h_dim];
            for (rj, hj) in rr.iter().zip(state.h.iter()) {
                s += rj * hj;
            }
            *p = s;
        }
        let sig = |v: f64| Activation::Sigmoid.apply(v);
        let mut out = LstmState::zeros(h_dim);
        for k in 0..h_dim {
            let i = sig(pre[k]);
            let f = sig(pre[h_dim + k]);
            let g = pre[2 * h_dim + k].tanh();
            let o = sig(pre[3 * h_dim + k]);
            let c_new = f * state.c[k] + i * g;
            out.c[k] = c_new;
            out.h[k] = o * c_new.tanh();
        }
        Ok(out)
    }

    pub fn step_tape(
        &self,
        t: &mut Tape,
        params: &[Var],
        x: &[Var],
        h: &[Var],
        c: &[Var],
    ) -> (Vec<Var>, Vec<Var>) {
        let h_dim = self.hidden;
        let mut pre = Vec::with_capacity(4 * h_dim);
        for row in 0..4 * h_dim {
            let mut acc = params[self.b.start + row];
            for j in 0..self.in_dim {
                acc = t.fma(params[self.w.start + row * self.in_dim + j], x[j], acc);
            }
            for j in 0..h_dim {
                acc = t.fma(params[self.r.start + row * h_dim + j], h[j], acc);
            }
            pre.push(acc);
        }
        let mut h_new = Vec::with_capacity(h_dim);
        let mut c_new = Vec::with_capacity(h_dim);
        for k in 0..h_dim {
            let i = t.sigmoid(pre[k]);
            let f = t.sigmoid(pre[h_dim + k]);
            let g = t.tanh(pre[2 * h_dim + k]);
            let o = t.sigmoid(pre[3 * h_dim + k]);
            let fc = t.mul(f, c[k]);
            let ig = t.mul(i, g);
            let cn = t.add(fc, ig);
            let tn = t.tanh(cn);
            let hn = t.mul(o, tn);
            c_new.push(cn);
            h_new.push(hn);
        }
        (h_new, c_new)
    }
}

/// Stacked LSTM layers; layer k feeds its hidden state to layer k+1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmStack {
    pub cells: Vec<LstmCell>,
}

impl LstmStack {
    pub fn alloc(params: &mut ParamSet, name: &str, in_dim: usize, hidden: usize, layers: usize) -> Self {
        let mut cells = Vec::new();
        for k in 0..layers {
            let d = if k == 0 { in_dim } else { hidden };
            cells.push(LstmCell::alloc(params, &format!("{name}.l{k}"), d, hidden));
        }
        LstmStack { cells }
    }

    pub fn zero_state(&self) -> Vec<LstmState> {
        self.cells.iter().map(|c| LstmState::zeros(c.hidden)).collect()
    }

    pub fn step(
        &self,
        values: &[f64],
        x: &[f64],
        states: &[LstmState],
    ) -> Result<Vec<LstmState>, NnError> {
        let mut out = Vec::with_capacity(self.cells.len());
        let mut input = x.to_vec();
        for (cell, st) in self.cells.iter().zip(states.iter()) {
            let new = cell.step(values, &input, st)?;
            input = new.h.clone();
            out.push(new);
        }
        Ok(out)
    }
}

/// Uniform fan-in/fan-out initialization; zero biases except the LSTM
/// forget-gate bias (set to one), and absolute values where parameters are
/// constrained non-negative.
pub fn init_params(params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let entries = params.entries.clone();
    for e in &entries {
        let n: usize = e.shape.iter().product();
        let is_bias = e.shape.len() == 1;
        if is_bias {
            for k in 0..n {
                params.values[e.offset + k] = 0.0;
            }
            // forget-gate bias rows H..2H of the stacked LSTM bias
            if e.name.contains("lstm") && e.name.ends_with(".b") {
                let h = n / 4;
                for k in h..2 * h {
                    params.values[e.offset + k] = 1.0;
                }
            }
        } else {
            let (fan_out, fan_in) = (e.shape[0], e.shape[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for k in 0..n {
                let mut v: f64 = rng.gen_range(-bound..bound);
                if params.non_negative[e.offset + k] {
                    v = v.abs();
                }
                params.values[e.offset + k] = v;
            }
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, n_params: usize) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update; afterwards non-negative-flagged parameters are clamped
    /// at zero.
    pub fn step(&mut self, params: &mut ParamSet, grad: &[f64]) -> Result<(), NnError> {
        if grad.len() != params.len() {
            return Err(NnError::GradientShape {
                expected: params.len(),
                got: grad.len(),
            });
        }
        for (i, g) in grad.iter().enumerate() {
            if !g.is_finite() {
                return Err(NnError::NonFiniteGradient {
                    name: params.entry_name(i).to_string(),
                    index: i,
                    value: *g,
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params.values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        params.apply_constraints();
        Ok(())
    }
}
