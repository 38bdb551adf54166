//! Small parameterized layers on top of the tape.

use rand::Rng;

use crate::diffkit::{Bound, DiffError, ParamId, ParamStore, Tensor, Var};

/// `x @ w (+ b)` over the last axis; `w` is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(rng, &[fan_in, fan_out], std));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'_, 't>, x: Var<'t>) -> Result<Var<'t>, DiffError> {
        let y = x.matmul(p.var(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => Ok(y),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'_, 't>, x: Var<'t>) -> Result<Var<'t>, DiffError> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), Self::EPS)
    }
}

/// Pre-norm residual MLP: `x + W2 gelu(W1 LN(x))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'_, 't>, x: Var<'t>) -> Result<Var<'t>, DiffError> {
        let h = self.up.forward(p, self.norm.forward(p, x)?)?.gelu();
        x.add(self.down.forward(p, h)?)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.up.zero(store);
        self.down.zero(store);
    }
}

/// Broadcasts a per-row flag over `width` trailing entries, as 0/1 values.
pub fn expand_mask(valid: &[bool], width: usize) -> Tensor {
    let mut data = Vec::with_capacity(valid.len() * width);
    for &v in valid {
        data.extend(std::iter::repeat_n(if v { 1.0 } else { 0.0 }, width));
    }
    Tensor::new(vec![valid.len() * width], data).expect("length matches")
}
