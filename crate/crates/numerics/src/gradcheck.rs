//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it is an
//! independent oracle for the tape's reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Gradients, ParameterStore};

#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|)`, or 0 when both sides are below `1e-10`
    /// in absolute difference (entries with no influence on the loss).
    pub fn relative_error(&self) -> f64 {
        let diff = (self.analytic - self.numeric).abs();
        if diff < 1e-10 {
            return 0.0;
        }
        diff / self.analytic.abs().max(self.numeric.abs())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    /// Draws discarded because a ReLU kink lay within the step.
    pub rejected: usize,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.probes
            .iter()
            .map(Probe::relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error() < tolerance
    }
}

/// Relative disagreement between the central differences at `h` and `h/2`
/// above which a probe is treated as straddling a kink. On smooth points
/// the two agree to `O(h^2)`.
pub const KINK_TOLERANCE: f64 = 1e-6;

/// Compares `analytic` gradients against central differences of `loss` at
/// `probes` random parameter entries drawn from names starting with
/// `prefix`. Entries whose analytic gradient is nonzero are preferred, so
/// probes land on parameters that actually influence the loss. An entry
/// whose finite difference crosses a nondifferentiable point is redrawn.
pub fn check_gradients(
    store: &ParameterStore,
    analytic: &Gradients,
    prefix: &str,
    probes: usize,
    step: f64,
    seed: u64,
    loss: impl Fn(&ParameterStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<(String, usize)> = Vec::new();
    let mut fallback: Vec<(String, usize)> = Vec::new();
    for (name, t) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let g = analytic.get(name);
        for i in 0..t.len() {
            let nonzero = g.is_some_and(|g| g.data()[i] != 0.0);
            if nonzero {
                candidates.push((name.to_string(), i));
            } else {
                fallback.push((name.to_string(), i));
            }
        }
    }
    if candidates.is_empty() {
        candidates = fallback;
    }
    let mut out = Vec::with_capacity(probes);
    let mut rejected = 0;
    let mut work = store.clone();
    let central = |work: &mut ParameterStore, name: &str, index: usize, h: f64| -> Result<f64> {
        let base = work.get(name)?.clone();
        let mut plus = base.clone();
        plus.data_mut()[index] += h;
        work.set(name, plus)?;
        let f_plus = loss(work)?;
        let mut minus = base.clone();
        minus.data_mut()[index] -= h;
        work.set(name, minus)?;
        let f_minus = loss(work)?;
        work.set(name, base)?;
        Ok((f_plus - f_minus) / (2.0 * h))
    };
    while out.len() < probes && !candidates.is_empty() {
        let (name, index) = candidates.swap_remove(rng.gen_range(0..candidates.len()));
        let numeric = central(&mut work, &name, index, step)?;
        let half = central(&mut work, &name, index, step / 2.0)?;
        let diff = (numeric - half).abs();
        if diff > 1e-10 && diff > KINK_TOLERANCE * numeric.abs().max(half.abs()) {
            rejected += 1;
            continue;
        }
        let analytic_value = analytic.get(&name).map_or(0.0, |g| g.data()[index]);
        out.push(Probe {
            name,
            index,
            analytic: analytic_value,
            numeric,
        });
    }
    Ok(GradCheckReport { probes: out, rejected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn loss(s: &ParameterStore) -> Result<f64> {
        let w = s.get("w")?.data();
        Ok((w[0] - 3e-5).abs() + w[1].sin() + w[2] * w[2])
    }

    fn setup(analytic: [f64; 3]) -> (ParameterStore, Gradients) {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::row_vector(vec![0.0, 0.4, -1.5])).unwrap();
        let mut grads = Gradients::new();
        grads.insert("w", Tensor::row_vector(analytic.to_vec()));
        (store, grads)
    }

    #[test]
    fn kink_within_step_is_redrawn() {
        let (store, grads) = setup([-1.0, 0.4f64.cos(), -3.0]);
        let report = check_gradients(&store, &grads, "w", 3, 1e-4, 1, loss).unwrap();
        assert_eq!(report.rejected, 1);
        assert_eq!(report.probes.len(), 2);
        assert!(report.passes(1e-6));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let (store, grads) = setup([-1.0, 0.4f64.cos(), -2.9]);
        let report = check_gradients(&store, &grads, "w", 3, 1e-4, 1, loss).unwrap();
        assert!(!report.passes(1e-4));
    }
}
