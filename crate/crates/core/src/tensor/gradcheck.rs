//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Check at most this many coordinates per parameter (all when `None`).
    pub max_coords_per_param: Option<usize>,
    /// A coordinate whose one-sided slopes differ by more than this
    /// (relative) sits on a ReLU or max-pool kink and is skipped.
    pub kink_tol: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: None,
            kink_tol: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub kinks_skipped: usize,
    /// Coordinates where a perturbed evaluation was not finite.
    pub non_finite: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.checked > 0 && self.max_rel_error < tol
    }
}

fn evaluate<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    Ok(tape.scalar(loss))
}

/// Compares the tape's gradient of `f` against central differences for every
/// trainable tensor in `params`.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &mut ParamSet, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(Error::invalid(
            "grad_check",
            format!("eps {} outside [1e-6, 1e-3]", cfg.eps),
        ));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let base = tape.scalar(loss);
    tape.backward(loss)?;
    tape.collect_param_grads(params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = params
        .ids()
        .filter(|&id| params.get(id).requires_grad)
        .collect();

    for id in ids {
        let name = params.name(id).to_string();
        let analytic = params.get(id).grad.clone().unwrap_or_default();
        let len = analytic.len();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if k < len => {
                let mut picked = sample(&mut rng, len, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };
        for idx in coords {
            let original = params.get(id).values()[idx];
            params.get_mut(id).values_mut()[idx] = original + cfg.eps;
            let plus = evaluate(&f, params);
            params.get_mut(id).values_mut()[idx] = original - cfg.eps;
            let minus = evaluate(&f, params);
            params.get_mut(id).values_mut()[idx] = original;

            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(Error::NonFiniteValue { .. }), _)
                | (_, Err(Error::NonFiniteValue { .. }))
                | (Ok(_), Ok(_)) => {
                    report.non_finite.push((name.clone(), idx));
                    continue;
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let forward = (plus - base) / cfg.eps;
            let backward = (base - minus) / cfg.eps;
            if (forward - backward).abs() > cfg.kink_tol * numeric.abs().max(1.0) {
                report.kinks_skipped += 1;
                continue;
            }
            let a = analytic[idx];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
