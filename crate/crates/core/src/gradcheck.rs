//! Finite-difference verification of the reverse pass.
//!
//! The checker records a forward/backward pass once, then re-evaluates the
//! loss with individual parameter scalars nudged by ±eps and compares the
//! symmetric difference quotient against the analytic gradient. Large
//! parameters are spot-checked at deterministically sampled coordinates so
//! composite modules stay affordable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, ValueId};
use crate::params::ParamStore;
use crate::tensor::Tensor4;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Step for the symmetric difference quotient.
    pub eps: f64,
    /// Maximum coordinates probed per parameter tensor.
    pub probes_per_param: usize,
    /// Seed for probe coordinate sampling.
    pub seed: u64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Corrupts one analytic gradient before comparison; the run must fail.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            probes_per_param: 4,
            seed: 0,
            tolerance: 1e-4,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Relative error with a small absolute floor so finite-difference noise on
/// near-zero gradients does not register as failure.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Checks every parameter the builder touches. The builder must record a
/// scalar loss; it is re-invoked for each probe evaluation, so it has to be
/// deterministic given the store contents.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    mut build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &mut ParamStore<f64>) -> Result<ValueId>,
{
    store.clear_grads();
    let mut graph: Graph<f64> = Graph::new();
    let loss = build(&mut graph, store)?;
    graph.backward(loss, store)?;

    let names = store.names();
    let mut analytic: Vec<(String, Tensor4<f64>)> = Vec::new();
    for name in &names {
        let g = store.grad(name).ok_or_else(|| CoreError::GradCheck {
            name: name.clone(),
            reason: "no gradient reached this parameter".into(),
        })?;
        analytic.push((name.clone(), g.clone()));
    }
    drop(graph);

    let mut eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let loss = build(&mut g, store)?;
        let t = g.value(loss);
        if t.shape().len() != 1 {
            return Err(CoreError::InvalidArgument(format!(
                "grad check loss must be scalar, got {}",
                t.shape()
            )));
        }
        Ok(t.at(0, 0, 0, 0))
    };

    let mut probes = Vec::new();
    let mut faulted = !opts.inject_fault;
    for (name, grad) in &analytic {
        let len = grad.shape().len();
        let indices: Vec<usize> = if len <= opts.probes_per_param {
            (0..len).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ crate::params::fnv1a64(name.as_bytes()));
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < opts.probes_per_param {
                picked.insert(rng.gen_range(0..len));
            }
            picked.into_iter().collect()
        };
        for index in indices {
            let original = store
                .value(name)
                .ok_or_else(|| CoreError::GradCheck {
                    name: name.clone(),
                    reason: "parameter vanished between passes".into(),
                })?
                .data()[index];
            let mut bump = |delta: f64, store: &mut ParamStore<f64>| -> Result<f64> {
                store.nudge(name, index, original + delta)?;
                let l = eval(store);
                store.nudge(name, index, original)?;
                l
            };
            let plus = bump(opts.eps, store)?;
            let minus = bump(-opts.eps, store)?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let mut a = grad.data()[index];
            if !faulted {
                a = a * 1.05 + 1e-2;
                faulted = true;
            }
            probes.push(Probe {
                name: name.clone(),
                index,
                analytic: a,
                numeric,
                rel_err: rel_err(a, numeric),
            });
        }
    }

    store.clear_grads();
    Ok(GradCheckReport {
        probes,
        tolerance: opts.tolerance,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::tensor::Shape4;

    #[test]
    fn quadratic_passes() {
        let mut store: ParamStore<f64> = ParamStore::new(3);
        let report = grad_check(
            &mut store,
            |g, store| {
                let w = g.param(store, "w", Shape4::new(1, 1, 1, 3), Init::HeUniform { fan_in: 3 })?;
                let sq = g.mul(w, w)?;
                g.sum_all(sq)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut store: ParamStore<f64> = ParamStore::new(3);
        let opts = GradCheckOptions {
            inject_fault: true,
            ..Default::default()
        };
        let report = grad_check(
            &mut store,
            |g, store| {
                let w = g.param(store, "w", Shape4::new(1, 1, 1, 4), Init::HeUniform { fan_in: 4 })?;
                let sq = g.mul(w, w)?;
                g.sum_all(sq)
            },
            &opts,
        )
        .unwrap();
        assert!(!report.passed());
    }
}
