//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Coordinates checked per parameter; parameters with fewer scalars are
    /// checked exhaustively.
    pub coords_per_param: usize,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is (near) zero are judged on absolute error instead.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            coords_per_param: 100,
            denominator_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }
}

fn eval<F>(store: &ParamStore<f64>, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(NumericsError::invalid("grad_check", "loss is not a scalar"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compares the gradients produced by [`Graph::backward`] against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`. `loss_fn` must be deterministic.
/// Parameter values are restored before returning.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut loss_fn: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store)?;
        if !g.value(loss).item().is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check" });
        }
        g.backward(loss, store)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = store.value(id).numel();
        let coords: Vec<usize> = if numel <= cfg.coords_per_param {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, cfg.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for &c in &coords {
            let original = store.value(id).data()[c];
            store.get_mut(id).value.data_mut()[c] = original + cfg.epsilon;
            let plus = eval(store, &mut loss_fn);
            store.get_mut(id).value.data_mut()[c] = original - cfg.epsilon;
            let minus = eval(store, &mut loss_fn);
            store.get_mut(id).value.data_mut()[c] = original;
            let numeric = (plus? - minus?) / (2.0 * cfg.epsilon);
            let analytic = store.get(id).grad.data()[c];
            let abs = (numeric - analytic).abs();
            let rel = abs / numeric.abs().max(analytic.abs()).max(cfg.denominator_floor);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        per_param.push(ParamCheck {
            name: store.get(id).name.clone(),
            checked: coords.len(),
            max_relative_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_relative_error = per_param.iter().map(|p| p.max_relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_param,
    })
}
