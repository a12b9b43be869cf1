use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which coordinates a finite-difference check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// `count` distinct coordinates drawn with the given seed.
    Sample { count: usize, seed: u64 },
}

pub const DENOM_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate where the maximum was attained.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` against central differences `(f(θ+h) − f(θ−h)) / 2h`.
///
/// Relative error uses the denominator `max(|g|, |g_fd|, DENOM_FLOOR)`, so
/// coordinates whose gradient is below the floor are judged on absolute error.
/// Central differences at `h = 1e-6` carry round-off near `1e-10·|f|`, which
/// would otherwise dominate the ratio for near-zero gradients. `params` is
/// perturbed in place and restored before returning.
pub fn finite_diff_check<F>(
    params: &mut [f64],
    analytic: &[f64],
    h: f64,
    coords: Coords,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::dim(format!(
            "{} params but {} analytic grads",
            params.len(),
            analytic.len()
        )));
    }
    let idx: Vec<usize> = match coords {
        Coords::All => (0..params.len()).collect(),
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, params.len(), count.min(params.len())).into_vec();
            v.sort_unstable();
            v
        }
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: idx.len(),
    };
    for i in idx {
        let orig = params[i];
        params[i] = orig + h;
        let plus = f(params)?;
        params[i] = orig - h;
        let minus = f(params)?;
        params[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("objective not finite at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let g = analytic[i];
        let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(DENOM_FLOOR);
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.analytic = g;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
