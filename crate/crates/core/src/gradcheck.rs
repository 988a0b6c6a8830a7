//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

#[derive(Clone, Debug)]
pub struct FdConfig {
    /// Central difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Coordinates where both gradients are below this are skipped.
    pub min_abs_grad: f64,
    /// Sampled coordinates per tensor (all coordinates if the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Test hook: offset added to the first analytic gradient read, to prove
    /// the check fails on a wrong gradient.
    pub corrupt: Option<f64>,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-5,
            rel_tol: 1e-5,
            min_abs_grad: 1e-8,
            samples_per_tensor: 24,
            seed: 7,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdFailure {
    pub node: NodeId,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<FdFailure>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare tape gradients of `loss` w.r.t. the given leaf nodes against
/// central finite differences, re-running the forward pass per probe.
pub fn check_gradients(
    tape: &mut Tape<f64>,
    loss: NodeId,
    wrt: &[NodeId],
    cfg: &FdConfig,
) -> Result<FdReport> {
    tape.forward()?;
    tape.backward(loss)?;

    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(wrt.len());
    for id in wrt {
        let g = tape
            .grad(*id)
            .ok_or_else(|| Error::usage(format!("no gradient recorded for {:?}", id)))?;
        analytic.push(g.data);
    }
    if let (Some(delta), Some(first)) = (cfg.corrupt, analytic.first_mut()) {
        if let Some(v) = first.first_mut() {
            *v += delta;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FdReport::default();
    for (k, id) in wrt.iter().enumerate() {
        let numel = tape.shape(*id).numel();
        let coords: Vec<usize> = if numel <= cfg.samples_per_tensor {
            (0..numel).collect()
        } else {
            let mut set = std::collections::BTreeSet::new();
            if k == 0 && cfg.corrupt.is_some() {
                set.insert(0); // the corrupted coordinate must be checked
            }
            while set.len() < cfg.samples_per_tensor {
                set.insert(rng.random_range(0..numel));
            }
            set.into_iter().collect()
        };
        for coord in coords {
            let orig = tape.leaf_data(*id)[coord];
            tape.leaf_data_mut(*id)[coord] = orig + cfg.step;
            tape.forward()?;
            let up = tape.value(loss).data[0];
            tape.leaf_data_mut(*id)[coord] = orig - cfg.step;
            tape.forward()?;
            let down = tape.value(loss).data[0];
            tape.leaf_data_mut(*id)[coord] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[k][coord];
            if a.abs() < cfg.min_abs_grad && numeric.abs() < cfg.min_abs_grad {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            if rel > cfg.rel_tol {
                report.failures.push(FdFailure {
                    node: *id,
                    coord,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    // Leave the tape in a consistent state for the caller.
    tape.forward()?;
    Ok(report)
}
