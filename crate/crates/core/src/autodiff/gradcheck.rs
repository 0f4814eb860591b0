//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Which coordinates of each parameter get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// `count` coordinates drawn uniformly (without replacement) across all
    /// parameters together.
    Sample { count: usize, seed: u64 },
    /// Up to `count` coordinates from every parameter.
    PerParam { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub checked: usize,
    pub max_relative_error: f64,
}

/// Outcome of a finite-difference check.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub params: Vec<ParamCheck>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradientReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} tol={:.1e} ({} params)",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_relative_error,
            self.tolerance,
            self.params.len()
        )
    }
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences with step `h`. Every discrete choice made while building the
/// unperturbed function is recorded and replayed for the perturbed ones.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`
/// with `floor = 1e-6 * max(1, |f|)`, which keeps round-off in large losses
/// from dominating near-zero gradient entries.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Array],
    h: f64,
    tol: f64,
    coords: Coordinates,
) -> Result<GradientReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::recording();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let analytic = tape.gradient(out, &vars)?;
    compare_with_analytic(f, params, &analytic, h, tol, coords)
}

/// Like [`finite_difference_check`] but against caller-supplied gradients.
pub fn compare_with_analytic<F>(
    f: F,
    params: &[Array],
    analytic: &[Array],
    h: f64,
    tol: f64,
    coords: Coordinates,
) -> Result<GradientReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if analytic.len() != params.len() {
        return Err(Error::CountMismatch {
            what: "analytic gradients",
            expected: params.len(),
            found: analytic.len(),
        });
    }
    let tape = Tape::recording();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let base = tape.scalar(out);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("function value {base}")));
    }
    let selections = tape.selections();
    drop(tape);

    let eval = |perturbed: &[Array]| -> Result<f64> {
        let t = Tape::replaying(&selections);
        let vs: Vec<Var> = perturbed.iter().map(|p| t.leaf(p.clone())).collect();
        let o = f(&t, &vs)?;
        let v = t.scalar(o);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("perturbed function value {v}")));
        }
        Ok(v)
    };

    let floor = 1e-6 * base.abs().max(1.0);
    let targets: Vec<(usize, usize)> = match coords {
        Coordinates::All => params
            .iter()
            .enumerate()
            .flat_map(|(p, a)| (0..a.len()).map(move |c| (p, c)))
            .collect(),
        Coordinates::Sample { count, seed } => {
            let total: usize = params.iter().map(Array::len).sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks: Vec<usize> = sample(&mut rng, total, count.min(total)).into_vec();
            picks.sort_unstable();
            picks
                .into_iter()
                .map(|mut flat| {
                    let mut p = 0;
                    while flat >= params[p].len() {
                        flat -= params[p].len();
                        p += 1;
                    }
                    (p, flat)
                })
                .collect()
        }
        Coordinates::PerParam { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::new();
            for (p, a) in params.iter().enumerate() {
                let mut picks = sample(&mut rng, a.len(), count.min(a.len())).into_vec();
                picks.sort_unstable();
                out.extend(picks.into_iter().map(|c| (p, c)));
            }
            out
        }
    };

    let mut checks: Vec<ParamCheck> = (0..params.len())
        .map(|index| ParamCheck {
            index,
            checked: 0,
            max_relative_error: 0.0,
        })
        .collect();
    let mut work = params.to_vec();
    for (p, c) in targets {
        let original = work[p].data()[c];
        work[p].data_mut()[c] = original + h;
        let plus = eval(&work)?;
        work[p].data_mut()[c] = original - h;
        let minus = eval(&work)?;
        work[p].data_mut()[c] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[p].data()[c];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        let check = &mut checks[p];
        check.checked += 1;
        check.max_relative_error = check.max_relative_error.max(rel);
    }
    let max_relative_error = checks.iter().fold(0.0f64, |m, c| m.max(c.max_relative_error));
    Ok(GradientReport {
        params: checks,
        max_relative_error,
        tolerance: tol,
        passed: max_relative_error <= tol,
    })
}
