//! Central finite-difference check of tape gradients.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Coordinates sampled per parameter (all of them when fewer).
pub const SAMPLES_PER_PARAM: usize = 32;

const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub eps: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_abs_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_error).fold(0.0, f64::max)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn coordinates_checked(&self) -> usize {
        self.params.iter().map(|p| p.samples.len()).sum()
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>6} {:>12} {:>12}", "param", "coords", "max_abs", "max_rel")?;
        for p in &self.params {
            writeln!(
                f,
                "{:<28} {:>6} {:>12.3e} {:>12.3e}",
                p.name,
                p.samples.len(),
                p.max_abs_error,
                p.max_rel_error
            )?;
        }
        write!(
            f,
            "eps={:e} coords={} max_abs_error={:.3e} max_rel_error={:.3e}",
            self.eps,
            self.coordinates_checked(),
            self.max_abs_error(),
            self.max_rel_error()
        )
    }
}

fn evaluate<F>(forward: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(params, &mut tape)?;
    tape.value(loss).scalar()
}

/// Compares `backward` against central differences on a seeded sample of
/// coordinates of every parameter.
pub fn grad_check<F>(forward: F, params: &ParamStore, eps: f64, seed: u64) -> Result<GradReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "grad_check: eps must lie in (0, 1e-2], got {eps}"
        )));
    }

    let mut tape = Tape::new();
    let loss = forward(params, &mut tape)?;
    let first = tape.value(loss).scalar()?;
    let second = evaluate(&forward, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let analytic = tape.backward(loss, params.len())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradReport {
        eps,
        params: Vec::with_capacity(params.len()),
    };
    for id in params.ids() {
        let n = params.value(id).len();
        let mut coords: Vec<usize> = if n <= SAMPLES_PER_PARAM {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, SAMPLES_PER_PARAM).into_vec()
        };
        coords.sort_unstable();

        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            samples: Vec::with_capacity(coords.len()),
        };
        for flat in coords {
            let numeric = central_difference(&forward, &mut work, id, flat, eps)?;
            let a = analytic.params().coord(id, flat);
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
            check.samples.push(GradSample {
                index: flat,
                analytic: a,
                numeric,
            });
        }
        report.params.push(check);
    }
    Ok(report)
}

fn central_difference<F>(
    forward: &F,
    work: &mut ParamStore,
    id: ParamId,
    flat: usize,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let orig = work.value(id).data()[flat];
    work.value_mut(id).data_mut()[flat] = orig + eps;
    let plus = evaluate(forward, work);
    work.value_mut(id).data_mut()[flat] = orig - eps;
    let minus = evaluate(forward, work);
    work.value_mut(id).data_mut()[flat] = orig;
    Ok((plus? - minus?) / (2.0 * eps))
}
