use rand::seq::index::sample;
use rand::Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central-difference disagreement above which one-sided estimates are tried.
const KINK_SCREEN: f64 = 1e-6;

/// Outcome of comparing analytic gradients to central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Coordinates judged by a one-sided difference because a kink lies
    /// inside the central stencil.
    pub one_sided: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss);
    if v.shape() != (1, 1) {
        return Err(Error::NonScalarLoss(v.rows(), v.cols()));
    }
    Ok(v.item())
}

/// Checks the gradient of the scalar built by `f` against
/// `(f(θ+ε) - f(θ-ε)) / 2ε` on up to `max_coords` randomly chosen
/// coordinates (all of them when there are fewer).
///
/// When the central difference disagrees, the gradient is also compared with
/// second-order one-sided differences over `[θ-2ε, θ]` and `[θ, θ+2ε]`.
/// A ReLU-type kink within `ε` of `θ` spoils only the stencil that crosses
/// it; an incorrect gradient disagrees with all three estimates.
///
/// `f` must be deterministic; two evaluations at the same point that
/// disagree produce [`Error::NonDeterministic`].
pub fn grad_check<F>(
    f: F,
    store: &ParamStore,
    eps: f64,
    max_coords: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let first = evaluate(&f, store)?;
    let second = evaluate(&f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let analytic = tape.backward(loss)?.for_params(store);

    let mut coords = Vec::new();
    for (id, p) in store.iter() {
        for k in 0..p.value.len() {
            coords.push((id, k));
        }
    }
    let chosen: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(rng, coords.len(), max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        one_sided: 0,
    };
    let mut probe = store.clone();
    for c in chosen {
        let (id, k) = coords[c];
        let orig = store.get(id).data()[k];
        probe.get_mut(id).data_mut()[k] = orig + eps;
        let up = evaluate(&f, &probe)?;
        probe.get_mut(id).data_mut()[k] = orig - eps;
        let down = evaluate(&f, &probe)?;
        probe.get_mut(id).data_mut()[k] = orig;

        let a = analytic[id.0].data()[k];
        let rel_of = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let mut numeric = (up - down) / (2.0 * eps);
        let mut rel = rel_of(numeric);
        if rel > KINK_SCREEN {
            probe.get_mut(id).data_mut()[k] = orig + 2.0 * eps;
            let up2 = evaluate(&f, &probe)?;
            probe.get_mut(id).data_mut()[k] = orig - 2.0 * eps;
            let down2 = evaluate(&f, &probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let forward = (-3.0 * first + 4.0 * up - up2) / (2.0 * eps);
            let backward = (3.0 * first - 4.0 * down + down2) / (2.0 * eps);
            let side = if rel_of(forward) <= rel_of(backward) { forward } else { backward };
            // Only a clear improvement counts; on smooth stretches all three
            // estimates agree to O(ε²).
            if rel_of(side) * 10.0 < rel {
                numeric = side;
                rel = rel_of(side);
                report.one_sided += 1;
            }
        }
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((store.param(id).name.clone(), k, a, numeric));
        }
    }
    Ok(report)
}
