//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::TensorError;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per parameter (all of them when the parameter is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, coords_per_param: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    Ok(tape.value(out).item())
}

/// Compare the tape gradient of `f` with central differences on a random
/// subsample of coordinates of every parameter. `store` is restored on return.
pub fn finite_diff_check<F>(store: &mut ParamStore, f: F, cfg: GradCheckConfig) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape) -> Result<Var, TensorError>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_param = Vec::new();
    let mut overall: f64 = 0.0;
    for i in 0..store.len() {
        let id = ParamId(i);
        let numel = store.tensor(id).numel();
        let coords: Vec<usize> = if numel <= cfg.coords_per_param {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, cfg.coords_per_param).into_vec()
        };
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let orig = store.tensor(id).data()[c];
            store.get_mut(id).tensor.data_mut()[c] = orig + cfg.eps;
            let plus = evaluate(store, &f);
            store.get_mut(id).tensor.data_mut()[c] = orig - cfg.eps;
            let minus = evaluate(store, &f);
            store.get_mut(id).tensor.data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.eps);
            let a = analytic.get(id).expect("backward fills every parameter").data()[c];
            worst = worst.max(relative_error(a, numeric));
        }
        overall = overall.max(worst);
        per_param.push(ParamCheck { name: store.get(id).name.clone(), checked: coords.len(), max_rel_error: worst });
    }
    Ok(GradCheckReport { max_rel_error: overall, per_param })
}
