//! Parameterized building blocks shared by every module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use spectra_numerics::{Float, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

/// Epsilon used by every layer normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// Creates parameters in an `f64` store from a seeded stream, so a model
/// initialized twice with one seed is identical at either precision.
pub struct Init<'a> {
    store: &'a mut ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f64>, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut self.rng));
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, 1.0))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Linear {
        let std = (1.0 / d_in as f64).sqrt();
        Linear {
            w: self.normal(&format!("{name}/w"), &[d_in, d_out], std),
            b: bias.then(|| self.zeros(&format!("{name}/b"), &[d_out])),
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.ones(&format!("{name}/gamma"), &[dim]),
            beta: self.zeros(&format!("{name}/beta"), &[dim]),
        }
    }
}

/// Row-wise affine map `x · W + b` with `W` stored `d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        Ok(match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)?
            }
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
    }
}
