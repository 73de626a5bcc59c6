//! Central-difference gradient oracle.
//!
//! The objective is any closure that records a scalar loss on a tape from
//! a list of parameter leaves. Analytic gradients come from one
//! [`Tape::backward`] pass; numeric gradients from
//! `(f(p + eps) - f(p - eps)) / (2 eps)` per coordinate. Relative error per
//! coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.

use crate::error::{Error, Result};

use super::{Rng, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

/// One checked coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// The `±eps` probes took a different relu/clamp/l1 branch than the
    /// base point, so the central difference straddles a kink.
    pub crosses_kink: bool,
}

impl Mismatch {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// The coordinate with the largest relative error.
    pub worst: Option<Mismatch>,
    /// Every checked coordinate, in the order given.
    pub entries: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    /// Coordinates at or above `tol`.
    pub fn failures(&self, tol: f64) -> impl Iterator<Item = &Mismatch> {
        self.entries.iter().filter(move |m| m.rel_error() >= tol)
    }

    /// Failures whose probes stayed on one smooth piece.
    pub fn smooth_failures(&self, tol: f64) -> impl Iterator<Item = &Mismatch> {
        self.failures(tol).filter(|m| !m.crosses_kink)
    }

    pub fn kink_crossings(&self) -> usize {
        self.entries.iter().filter(|m| m.crosses_kink).count()
    }

    /// Largest relative error over coordinates that stayed on one smooth piece.
    pub fn smooth_max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|m| !m.crosses_kink)
            .map(Mismatch::rel_error)
            .fold(0.0, f64::max)
    }

    /// Every smooth coordinate is below `tol` and at most
    /// `max_kink_fraction` of the probes straddle a kink.
    pub fn passes_smooth(&self, tol: f64, max_kink_fraction: f64) -> bool {
        self.smooth_failures(tol).next().is_none()
            && self.kink_crossings() as f64 <= max_kink_fraction * self.checked as f64
    }
}

fn evaluate<F>(f: &F, params: &[Tensor], tracked: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if tracked {
                tape.leaf(p.clone())
            } else {
                tape.constant(p.clone())
            }
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check: objective returned shape {:?}",
            tape.value(loss).shape()
        )));
    }
    Ok((tape, vars, loss))
}

/// Relative error with the floored denominator used throughout the lab.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Check every coordinate of every parameter.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    finite_diff_check_at(f, params, eps, &coords)
}

/// Check only the listed `(parameter, element)` coordinates.
pub fn finite_diff_check_at<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "finite_diff_check: eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let (mut tape, vars, loss) = evaluate(&f, params, true)?;
    tape.backward(loss)?;
    let base_pattern = tape.branch_pattern();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();
    drop(tape);

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        entries: Vec::with_capacity(coords.len()),
    };
    for &(p, i) in coords {
        if p >= params.len() || i >= params[p].len() {
            return Err(Error::Contract(format!(
                "finite_diff_check: coordinate ({p}, {i}) out of range"
            )));
        }
        let orig = params[p].data()[i];
        work[p].data_mut()[i] = orig + eps;
        let (t_plus, _, l_plus) = evaluate(&f, &work, false)?;
        work[p].data_mut()[i] = orig - eps;
        let (t_minus, _, l_minus) = evaluate(&f, &work, false)?;
        work[p].data_mut()[i] = orig;

        let crosses_kink =
            t_plus.branch_pattern() != base_pattern || t_minus.branch_pattern() != base_pattern;
        let numeric = (t_plus.value(l_plus).item() - t_minus.value(l_minus).item()) / (2.0 * eps);
        let a = analytic[p].data()[i];
        let rel = relative_error(a, numeric);
        let entry = Mismatch {
            param: p,
            index: i,
            analytic: a,
            numeric,
            crosses_kink,
        };
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(entry.clone());
        }
        report.entries.push(entry);
    }
    Ok(report)
}

/// `count` distinct coordinates drawn uniformly over all parameter elements.
pub fn sample_coords(params: &[Tensor], count: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    rng.shuffle(&mut all);
    all.truncate(count);
    all.sort_unstable();
    all
}
