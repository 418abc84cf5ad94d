//! Parameter containers shared by the encoder, predictors and head.
//!
//! Containers are generic over the leaf type: `Tensor` for stored weights,
//! `Var` once bound into a [`Graph`]. `leaves` lists every leaf with its
//! checkpoint name in a fixed order; that order is what the optimizer and the
//! gradient reduction rely on.

use crate::error::Result;
use crate::numcore::{Graph, Rng, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// How a leaf is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Truncated normal, σ = 0.02.
    Weight,
    /// Zeros.
    Bias,
    /// Ones (LayerNorm γ).
    Gain,
}

pub type Leaves<'a, T> = Vec<(String, Role, &'a T)>;
pub type LeavesMut<'a, T> = Vec<(String, Role, &'a mut T)>;

/// Fills every leaf according to its role; weights draw from a stream keyed
/// by `(seed, name)`, so adding or removing a module never shifts the
/// initialization of the others.
pub(crate) fn initialize(leaves: LeavesMut<'_, Tensor>, seed: u64) {
    for (name, role, t) in leaves {
        match role {
            Role::Weight => {
                let mut rng = Rng::derive(seed, &name);
                *t = rng.trunc_normal_tensor(t.shape(), INIT_STD);
            }
            Role::Bias => *t = Tensor::zeros(t.shape()),
            Role::Gain => *t = Tensor::ones(t.shape()),
        }
    }
}

/// Affine map `x · wᵀ + b`; `w` is `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

impl Linear<Tensor> {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[out, inp]),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn identity(d: usize) -> Self {
        Linear {
            w: Tensor::eye(d),
            b: Tensor::zeros(&[d]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Linear<U> {
        Linear {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    pub(crate) fn leaves<'a>(&'a self, w: String, b: String, out: &mut Leaves<'a, T>) {
        out.push((w, Role::Weight, &self.w));
        out.push((b, Role::Bias, &self.b));
    }

    pub(crate) fn leaves_mut<'a>(&'a mut self, w: String, b: String, out: &mut LeavesMut<'a, T>) {
        out.push((w, Role::Weight, &mut self.w));
        out.push((b, Role::Bias, &mut self.b));
    }
}

impl Linear<Var> {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.w, self.b)
    }
}

/// LayerNorm scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub g: T,
    pub b: T,
}

impl Norm<Tensor> {
    pub fn new(d: usize) -> Self {
        Norm {
            g: Tensor::ones(&[d]),
            b: Tensor::zeros(&[d]),
        }
    }
}

impl<T> Norm<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Norm<U> {
        Norm {
            g: f(&self.g),
            b: f(&self.b),
        }
    }

    pub(crate) fn leaves<'a>(&'a self, prefix: &str, out: &mut Leaves<'a, T>) {
        out.push((format!("{prefix}.g"), Role::Gain, &self.g));
        out.push((format!("{prefix}.b"), Role::Bias, &self.b));
    }

    pub(crate) fn leaves_mut<'a>(&'a mut self, prefix: &str, out: &mut LeavesMut<'a, T>) {
        out.push((format!("{prefix}.g"), Role::Gain, &mut self.g));
        out.push((format!("{prefix}.b"), Role::Bias, &mut self.b));
    }
}

impl Norm<Var> {
    pub fn apply(&self, g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, self.g, self.b, eps)
    }
}

/// Query/key/value/output projections of a multi-head attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

impl Attention<Tensor> {
    pub fn zeros(d: usize) -> Self {
        Attention {
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            o: Linear::zeros(d, d),
        }
    }

    pub fn identity(d: usize) -> Self {
        Attention {
            q: Linear::identity(d),
            k: Linear::identity(d),
            v: Linear::identity(d),
            o: Linear::identity(d),
        }
    }
}

impl<T> Attention<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Attention<U> {
        Attention {
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
        }
    }

    /// Names `{prefix}.w{q,k,v,o}` / `{prefix}.b{q,k,v,o}`.
    pub(crate) fn leaves<'a>(&'a self, prefix: &str, out: &mut Leaves<'a, T>) {
        for (tag, lin) in [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)] {
            lin.leaves(format!("{prefix}.w{tag}"), format!("{prefix}.b{tag}"), out);
        }
    }

    pub(crate) fn leaves_mut<'a>(&'a mut self, prefix: &str, out: &mut LeavesMut<'a, T>) {
        let Attention { q, k, v, o } = self;
        for (tag, lin) in [("q", q), ("k", k), ("v", v), ("o", o)] {
            lin.leaves_mut(format!("{prefix}.w{tag}"), format!("{prefix}.b{tag}"), out);
        }
    }
}

/// Two linear layers with GELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl Ffn<Tensor> {
    pub fn zeros(inp: usize, hidden: usize, out: usize) -> Self {
        Ffn {
            fc1: Linear::zeros(hidden, inp),
            fc2: Linear::zeros(out, hidden),
        }
    }
}

impl<T> Ffn<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Ffn<U> {
        Ffn {
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }

    /// Names `{prefix}.w1`, `{prefix}.b1`, `{prefix}.w2`, `{prefix}.b2`.
    pub(crate) fn leaves<'a>(&'a self, prefix: &str, out: &mut Leaves<'a, T>) {
        self.fc1.leaves(format!("{prefix}.w1"), format!("{prefix}.b1"), out);
        self.fc2.leaves(format!("{prefix}.w2"), format!("{prefix}.b2"), out);
    }

    pub(crate) fn leaves_mut<'a>(&'a mut self, prefix: &str, out: &mut LeavesMut<'a, T>) {
        self.fc1.leaves_mut(format!("{prefix}.w1"), format!("{prefix}.b1"), out);
        self.fc2.leaves_mut(format!("{prefix}.w2"), format!("{prefix}.b2"), out);
    }
}

impl Ffn<Var> {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.apply(g, x)?;
        let h = g.gelu(h);
        self.fc2.apply(g, h)
    }
}
