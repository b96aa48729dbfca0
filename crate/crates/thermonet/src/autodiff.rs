//! Reverse-mode automatic differentiation on a scalar operation tape.
//!
//! Every value in a differentiable program is a [`Var`] referring to a node
//! on a [`Tape`]. Nodes are evaluated eagerly at construction, so the tape
//! is simultaneously the computation record and the value store.
//!
//! Two reverse sweeps are provided:
//!
//! * [`Tape::backward`] accumulates numeric adjoints — the ordinary
//!   gradient of one scalar output with respect to everything on the tape.
//! * [`Tape::grad_vars`] builds the adjoints as *new tape nodes*, so the
//!   returned gradients are themselves differentiable. Expressions that
//!   contain first derivatives (the free-energy stress and dissipation
//!   terms) can therefore be differentiated again by a later sweep.

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum AdError {
    #[error("gradient requested for variable {0} created after the output node {1}")]
    WrtAfterOutput(u32, u32),
}

/// Handle to a scalar node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    /// a*b + c
    Fma,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Abs,
    Sqrt,
    Max,
}

#[derive(Clone, Copy)]
struct OpRec {
    op: Op,
    a: u32,
    b: u32,
    c: u32,
}

/// Eagerly evaluated scalar computation graph.
pub struct Tape {
    ops: Vec<OpRec>,
    vals: Vec<f64>,
}

#[inline]
fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            ops: Vec::with_capacity(n),
            vals: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    #[inline]
    pub fn val(&self, v: Var) -> f64 {
        self.vals[v.0 as usize]
    }

    #[inline]
    fn push(&mut self, op: Op, a: u32, b: u32, c: u32, v: f64) -> Var {
        let i = self.ops.len() as u32;
        self.ops.push(OpRec { op, a, b, c });
        self.vals.push(v);
        Var(i)
    }

    /// A leaf node: an input, parameter, or constant.
    #[inline]
    pub fn leaf(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, 0, 0, 0, v)
    }

    /// Alias of [`Tape::leaf`] for values that are data rather than
    /// differentiation targets.
    #[inline]
    pub fn constant(&mut self, v: f64) -> Var {
        self.leaf(v)
    }

    #[inline]
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0 as usize] + self.vals[b.0 as usize];
        self.push(Op::Add, a.0, b.0, 0, v)
    }

    #[inline]
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0 as usize] - self.vals[b.0 as usize];
        self.push(Op::Sub, a.0, b.0, 0, v)
    }

    #[inline]
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0 as usize] * self.vals[b.0 as usize];
        self.push(Op::Mul, a.0, b.0, 0, v)
    }

    #[inline]
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0 as usize] / self.vals[b.0 as usize];
        self.push(Op::Div, a.0, b.0, 0, v)
    }

    #[inline]
    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.vals[a.0 as usize];
        self.push(Op::Neg, a.0, 0, 0, v)
    }

    /// Fused multiply-add a*b + c; the workhorse of dense layers.
    #[inline]
    pub fn fma(&mut self, a: Var, b: Var, c: Var) -> Var {
        let v = self.vals[a.0 as usize] * self.vals[b.0 as usize] + self.vals[c.0 as usize];
        self.push(Op::Fma, a.0, b.0, c.0, v)
    }

    #[inline]
    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.vals[a.0 as usize].exp();
        self.push(Op::Exp, a.0, 0, 0, v)
    }

    #[inline]
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.vals[a.0 as usize].ln();
        self.push(Op::Ln, a.0, 0, 0, v)
    }

    #[inline]
    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.vals[a.0 as usize].tanh();
        self.push(Op::Tanh, a.0, 0, 0, v)
    }

    #[inline]
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = sigmoid_stable(self.vals[a.0 as usize]);
        self.push(Op::Sigmoid, a.0, 0, 0, v)
    }

    #[inline]
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = softplus_stable(self.vals[a.0 as usize]);
        self.push(Op::Softplus, a.0, 0, 0, v)
    }

    #[inline]
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.vals[a.0 as usize].max(0.0);
        self.push(Op::Relu, a.0, 0, 0, v)
    }

    #[inline]
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.vals[a.0 as usize].abs();
        self.push(Op::Abs, a.0, 0, 0, v)
    }

    #[inline]
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.vals[a.0 as usize].sqrt();
        self.push(Op::Sqrt, a.0, 0, 0, v)
    }

    #[inline]
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0 as usize].max(self.vals[b.0 as usize]);
        self.push(Op::Max, a.0, b.0, 0, v)
    }

    /// x * sigmoid(x).
    #[inline]
    pub fn swish(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    /// Multiply by an f64 constant (creates the constant node).
    #[inline]
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let c = self.constant(k);
        self.mul(a, c)
    }

    /// Sum of a slice of vars.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut acc = match xs.first() {
            Some(&v) => v,
            None => return self.constant(0.0),
        };
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    /// Numeric adjoints of `out` with respect to every node at or below it.
    ///
    /// `adj` is resized and zeroed internally so callers can reuse the
    /// allocation across sweeps.
    pub fn backward(&self, out: Var, adj: &mut Vec<f64>) {
        let n = out.0 as usize + 1;
        adj.clear();
        adj.resize(n, 0.0);
        adj[out.0 as usize] = 1.0;
        for i in (0..n).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let rec = self.ops[i];
            let (a, b, c) = (rec.a as usize, rec.b as usize, rec.c as usize);
            match rec.op {
                Op::Leaf => {}
                Op::Add => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Op::Sub => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Op::Mul => {
                    adj[a] += g * self.vals[b];
                    adj[b] += g * self.vals[a];
                }
                Op::Div => {
                    let vb = self.vals[b];
                    adj[a] += g / vb;
                    adj[b] -= g * self.vals[i] / vb;
                }
                Op::Neg => adj[a] -= g,
                Op::Fma => {
                    adj[a] += g * self.vals[b];
                    adj[b] += g * self.vals[a];
                    adj[c] += g;
                }
                Op::Exp => adj[a] += g * self.vals[i],
                Op::Ln => adj[a] += g / self.vals[a],
                Op::Tanh => {
                    let y = self.vals[i];
                    adj[a] += g * (1.0 - y * y);
                }
                Op::Sigmoid => {
                    let y = self.vals[i];
                    adj[a] += g * y * (1.0 - y);
                }
                Op::Softplus => adj[a] += g * sigmoid_stable(self.vals[a]),
                Op::Relu => {
                    if self.vals[a] > 0.0 {
                        adj[a] += g;
                    }
                }
                Op::Abs => {
                    let s = if self.vals[a] > 0.0 {
                        1.0
                    } else if self.vals[a] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    adj[a] += g * s;
                }
                Op::Sqrt => adj[a] += g * 0.5 / self.vals[i],
                Op::Max => {
                    if self.vals[a] >= self.vals[b] {
                        adj[a] += g;
                    } else {
                        adj[b] += g;
                    }
                }
            }
        }
    }

    /// Gradient of scalar `out` with respect to the listed variables.
    pub fn grad(&self, out: Var, wrt: &[Var]) -> Result<Vec<f64>, AdError> {
        for w in wrt {
            if w.0 > out.0 {
                return Err(AdError::WrtAfterOutput(w.0, out.0));
            }
        }
        let mut adj = Vec::new();
        self.backward(out, &mut adj);
        Ok(wrt.iter().map(|w| adj[w.0 as usize]).collect())
    }

    /// Gradient of `out` with respect to `wrt`, returned as new tape nodes.
    ///
    /// The sweep is sparse: only ancestors of `out` are touched, so the cost
    /// is proportional to the subgraph, not the tape. Variables with no path
    /// to `out` map to a shared zero constant.
    pub fn grad_vars(&mut self, out: Var, wrt: &[Var]) -> Result<Vec<Var>, AdError> {
        for w in wrt {
            if w.0 > out.0 {
                return Err(AdError::WrtAfterOutput(w.0, out.0));
            }
        }
        use std::collections::{BinaryHeap, HashMap};
        let mut adj: HashMap<u32, Var> = HashMap::new();
        let mut heap: BinaryHeap<u32> = BinaryHeap::new();
        let one = self.constant(1.0);
        adj.insert(out.0, one);
        heap.push(out.0);
        let mut last = u32::MAX;
        while let Some(i) = heap.pop() {
            if i == last {
                continue; // duplicate heap entry
            }
            last = i;
            let g = match adj.get(&i) {
                Some(&g) => g,
                None => continue,
            };
            let rec = self.ops[i as usize];
            let (a, b, c) = (rec.a, rec.b, rec.c);
            let acc = |t: &mut Tape,
                           adj: &mut HashMap<u32, Var>,
                           heap: &mut BinaryHeap<u32>,
                           node: u32,
                           contrib: Var| {
                match adj.get(&node) {
                    Some(&prev) => {
                        let s = t.add(prev, contrib);
                        adj.insert(node, s);
                    }
                    None => {
                        adj.insert(node, contrib);
                        heap.push(node);
                    }
                }
            };
            match rec.op {
                Op::Leaf => {}
                Op::Add => {
                    acc(self, &mut adj, &mut heap, a, g);
                    acc(self, &mut adj, &mut heap, b, g);
                }
                Op::Sub => {
                    acc(self, &mut adj, &mut heap, a, g);
                    let ng = self.neg(g);
                    acc(self, &mut adj, &mut heap, b, ng);
                }
                Op::Mul => {
                    let ga = self.mul(g, Var(b));
                    acc(self, &mut adj, &mut heap, a, ga);
                    let gb = self.mul(g, Var(a));
                    acc(self, &mut adj, &mut heap, b, gb);
                }
                Op::Div => {
                    let ga = self.div(g, Var(b));
                    acc(self, &mut adj, &mut heap, a, ga);
                    let t = self.mul(g, Var(i));
                    let t = self.div(t, Var(b));
                    let gb = self.neg(t);
                    acc(self, &mut adj, &mut heap, b, gb);
                }
                Op::Neg => {
                    let ga = self.neg(g);
                    acc(self, &mut adj, &mut heap, a, ga);
                }
                Op::Fma => {
                    let ga = self.mul(g, Var(b));
                    acc(self, &mut adj, &mut heap, a, ga);
                    let gb = self.mul(g, Var(a));
                    acc(self, &mut adj, &mut heap, b, gb);
                    acc(self, &mut adj, &mut heap, c, g);
                }
                Op::Exp => {
                    let ga = self.mul(g, Var(i));
                    acc(self, &mut adj, &mut heap, a, ga);
                }
                Op::Ln => {
                    let ga = self.div(g, Var(a));
                    acc(self, &mut adj, &mut heap, a, ga);
                }
                Op::Tanh => {
                    let y2 = self.mul(Var(i), Var(i));
                    let one_c = self.constant(1.0);
                    let d = self.sub(one_c, y2);
                    let ga = self.mul(g, d);
                    acc(self, &mut adj, &mut heap, a, ga);
                }
                Op::Sigmoid => {
                    let one_c = self.constant(1.0);
                    let d = self.sub(one_c, Var(i));
                    let yd = self.mul(Var(i), d);
                    let ga = self.mul(g, yd);
                    acc(self, &mut adj, &mut heap, a, ga);
                }
                Op::Softplus => {
                    let s = self.sigmoid(Var(a));
                    let ga = self.mul(g, s);
                    acc(self, &mut adj, &mut heap, a, ga);
                }
                Op::Relu => {
                    // piecewise-constant slope; exact almost everywhere
                    let s = self.constant(if self.vals[a as usize] > 0.0 { 1.0 } else { 0.0 });
                    let ga = self.mul(g, s);
                    acc(self, &mut adj, &mut heap, a, ga);
                }
                Op::Abs => {
                    let va = self.vals[a as usize];
                    let s = self.constant(if va > 0.0 {
                        1.0
                    } else if va < 0.0 {
                        -1.0
                    } else {
                        0.0
                    });
                    let ga = self.mul(g, s);
                    acc(self, &mut adj, &mut heap, a, ga);
                }
                Op::Sqrt => {
                    let half = self.constant(0.5);
                    let gh = self.mul(g, half);
                    let ga = self.div(gh, Var(i));
                    acc(self, &mut adj, &mut heap, a, ga);
                }
                Op::Max => {
                    let to_a = self.vals[a as usize] >= self.vals[b as usize];
                    if to_a {
                        acc(self, &mut adj, &mut heap, a, g);
                    } else {
                        acc(self, &mut adj, &mut heap, b, g);
                    }
                }
            }
        }
        let zero = self.constant(0.0);
        Ok(wrt
            .iter()
            .map(|w| adj.get(&w.0).copied().unwrap_or(zero))
            .collect())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
