use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic − numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// (parameter, element) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape(
            "finite_difference_check",
            format!("objective must be scalar, got {:?}", v.shape()),
        ));
    }
    Ok(v.item())
}

/// Compares the tape's analytic gradient of `f` against central differences
/// on every coordinate of every parameter.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = params.iter().map(|p| (0..p.len()).collect()).collect();
    check_coords(&f, params, h, &coords)
}

/// Like [`finite_difference_check`] but checks at most `per_param` randomly
/// chosen coordinates of each parameter.
pub fn finite_difference_check_sampled<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            if p.len() <= per_param {
                (0..p.len()).collect()
            } else {
                let mut v = sample(&mut rng, p.len(), per_param).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect();
    check_coords(&f, params, h, &coords)
}

fn check_coords<F>(f: &F, params: &[Tensor], h: f64, coords: &[Vec<usize>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step h must be positive, got {h}")));
    }
    let base = eval(f, params)?;
    let again = eval(f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::invalid(format!(
            "objective is not deterministic: {base} then {again}"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = params.to_vec();
    for (pi, idx) in coords.iter().enumerate() {
        for &j in idx {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let plus = eval(f, &work)?;
            work[pi].data_mut()[j] = orig - h;
            let minus = eval(f, &work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some((pi, j));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
