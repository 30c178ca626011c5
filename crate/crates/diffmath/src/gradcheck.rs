//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DiffError, Result};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Checking options.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter tensor.
    pub coords_per_tensor: usize,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            coords_per_tensor: 12,
            abs_floor: 1e-5,
            seed: 0,
        }
    }
}

/// Compares the tape gradient of `build` against central differences
/// `(f(x+h) − f(x−h)) / 2h` on a random subset of coordinates, returning
/// the maximum of `|a − n| / max(|a|, |n|, abs_floor)`.
///
/// `build` must be deterministic for fixed parameter values.
pub fn finite_diff_check<F>(
    params: &mut ParamSet<f64>,
    opts: &GradCheckOptions,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(DiffError::InvalidArgument("step must be positive".into()));
    }
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    tape.backward(loss, &mut [params])?;
    drop(tape);

    let mut eval = |params: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        Ok(tape.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.value(id).numel();
        let k = opts.coords_per_tensor.min(n);
        for j in sample(&mut rng, n, k).into_iter() {
            let analytic = params.grad(id).data()[j];
            let orig = params.value(id).data()[j];
            params.value_mut(id).data_mut()[j] = orig + opts.step;
            let up = eval(params)?;
            params.value_mut(id).data_mut()[j] = orig - opts.step;
            let down = eval(params)?;
            params.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let denom = analytic.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), j, analytic, numeric));
            }
        }
    }
    params.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn linear_loss_is_exact() {
        let mut p = ParamSet::new();
        let w = p
            .add(
                "w",
                Tensor::matrix(2, 2, vec![0.3, -1.2, 2.0, 0.7]).unwrap(),
            )
            .unwrap();
        let report = finite_diff_check(&mut p, &GradCheckOptions::default(), |tape, p| {
            let wv = tape.param(p, w);
            let s = tape.scale(wv, 3.5)?;
            tape.sum(s)
        })
        .unwrap();
        assert_eq!(report.coords_checked, 4);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // w · detach(w) reports gradient w where the true one is 2w
        let mut p = ParamSet::new();
        let w = p.add("w", Tensor::vector(vec![0.5, 1.5])).unwrap();
        let report = finite_diff_check(&mut p, &GradCheckOptions::default(), |tape, p| {
            let wv = tape.param(p, w);
            let d = tape.detach(wv)?;
            let m = tape.mul(wv, d)?;
            tape.sum(m)
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }
}
