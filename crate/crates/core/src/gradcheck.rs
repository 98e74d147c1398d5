//! Central finite-difference audit of tape gradients.
//!
//! The audit only ever evaluates the forward pass of the closure it is given, so
//! it stays independent of the backward rules it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per parameter tensor; larger tensors are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compares analytic gradients of `loss` with central differences for every
/// trainable parameter of `store`.
///
/// Error metric per coordinate: `|analytic − fd| / (|fd| + 1e-8)`.
pub fn check<F>(store: &mut ParamStore<f64>, cfg: &GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = loss(&mut tape, store)?;
    let grads = tape.backward(root)?;
    let bound: Vec<_> = tape.bound_params().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let n = store.value(id).numel();
        let analytic = bound
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| grads.get(v))
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + cfg.step;
            let plus = eval(store, &loss)?;
            store.value_mut(id).data_mut()[c] = orig - cfg.step;
            let minus = eval(store, &loss)?;
            store.value_mut(id).data_mut()[c] = orig;
            let fd = (plus - minus) / (2.0 * cfg.step);
            let rel = (analytic[c] - fd).abs() / (fd.abs() + 1e-8);
            report.checked += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = format!(
                    "{}[{c}]: analytic {:.6e} vs fd {:.6e}",
                    store.name(id),
                    analytic[c],
                    fd
                );
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore<f64>, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = loss(&mut tape, store)?;
    Ok(tape.value(root).item())
}

/// Random-projection readout `Σ r ⊙ x` with a fixed random tensor `r`, turning any
/// layer output into a scalar whose gradient touches every output element.
pub fn readout(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = crate::tensor::Tensor::randn(tape.shape(x).to_vec(), 1.0, &mut rng);
    let rv = tape.constant(r);
    let prod = tape.mul(x, rv)?;
    Ok(tape.sum(prod))
}
