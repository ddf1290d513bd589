//! Empirical estimates of the smoothness constant and gradient variance
//! used to instantiate the convergence bound on a live run.
//!
//! Both are heuristics: the true constants are suprema over the whole
//! parameter space, while these probe a neighbourhood of the current
//! iterate.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::GraphSample;
use crate::rng::{self, Purpose};
use crate::tensor::{Matrix, ParamId};

use super::client::{batch_gradient, full_gradient};
use super::Simulation;

fn sq_dist(a: &BTreeMap<ParamId, Matrix>, b: &BTreeMap<ParamId, Matrix>) -> Result<f64> {
    let mut total = 0.0;
    for (id, m) in a {
        let other = b
            .get(id)
            .ok_or_else(|| Error::Invariant(format!("gradient for parameter {} missing", id.0)))?;
        total += m.sub(other)?.frobenius_sq();
    }
    Ok(total)
}

/// Largest observed `‖∇G_k(x) − ∇G_k(x + δ)‖ / ‖δ‖` over `probes` random
/// perturbations of norm `radius` per client.
pub fn estimate_lipschitz(sim: &Simulation, probes: usize, radius: f64) -> Result<f64> {
    if probes == 0 || !(radius > 0.0) {
        return Err(Error::Config(
            "need at least one probe and a positive radius".into(),
        ));
    }
    let mut best = 0.0f64;
    for c in &sim.clients {
        let base = full_gradient(c, &c.params, &sim.ctx)?;
        for p in 0..probes {
            let mut rng = rng::stream(sim.cfg.seed, c.id as u64, p as u64, Purpose::Estimate);
            let mut moved = c.params.clone();
            let mut dirs = Vec::new();
            let mut norm_sq = 0.0;
            for (id, _, m) in c.params.entries() {
                let d = Matrix::from_fn(m.rows(), m.cols(), |_, _| StandardNormal.sample(&mut rng));
                norm_sq += d.frobenius_sq();
                dirs.push((id, d));
            }
            let scale = radius / norm_sq.sqrt().max(f64::MIN_POSITIVE);
            for (id, d) in dirs {
                let mut m = moved
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(d.rows(), d.cols()));
                m.axpy(scale, &d)?;
                moved.set(id, m)?;
            }
            let g = full_gradient(c, &moved, &sim.ctx)?;
            best = best.max(sq_dist(&base.grads, &g.grads)?.sqrt() / radius);
        }
    }
    Ok(best)
}

/// Mean over clients of `E‖g − ∇G_k‖²` for minibatch gradients `g` at the
/// current iterate, sampled without dropout.
pub fn estimate_sigma_sq(sim: &Simulation, draws: usize) -> Result<f64> {
    if draws == 0 {
        return Err(Error::Config("need at least one draw".into()));
    }
    let batch = sim.cfg.batch_size.max(1);
    let mut total = 0.0;
    for c in &sim.clients {
        let full = full_gradient(c, &c.params, &sim.ctx)?;
        let mut rng = rng::stream(sim.cfg.seed, c.id as u64, u64::MAX - 1, Purpose::Estimate);
        let mut acc = 0.0;
        for _ in 0..draws {
            let picks =
                rand::seq::index::sample(&mut rng, c.samples.len(), batch.min(c.samples.len()));
            let refs: Vec<&GraphSample> = picks.iter().map(|i| &c.samples[i]).collect();
            let g = batch_gradient(c, &c.params, &refs, &sim.ctx, None)?;
            acc += sq_dist(&g.grads, &full.grads)?;
        }
        total += acc / draws as f64;
    }
    Ok(total / sim.clients.len() as f64)
}
