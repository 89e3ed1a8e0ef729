//! Central finite differences as an independent gradient oracle.
//!
//! Never calls into the backward machinery for expected values: it
//! re-evaluates the forward closure at perturbed parameter values, so a
//! bug in an analytic gradient cannot hide itself.

use crate::autodiff::{Real, Tensor};

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn ok(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-4);
    (a - b).abs() / scale
}

/// Compare analytic gradients of `f()` against central finite differences
/// for every element of every parameter in `params`.
///
/// `f` must rebuild the graph from the parameters' current data each call.
pub fn check<S: Real>(params: &[&Tensor<S>], f: impl Fn() -> Tensor<S>, h: f64) -> GradCheck {
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |i| (pi, i)))
        .collect();
    check_coords(params, f, h, &coords)
}

/// Same as [`check`] but only for the given `(param index, element index)`
/// coordinates; large graphs are probed on a sample.
///
/// Piecewise-smooth graphs (ReLU and friends) occasionally place a kink
/// inside the probe window: the two one-sided differences then disagree
/// and the central difference is their average, which no correct
/// (sub)gradient can match. When that happens the coordinate passes if
/// the analytic value matches either one-sided slope; a genuinely wrong
/// gradient matches neither.
pub fn check_coords<S: Real>(
    params: &[&Tensor<S>],
    f: impl Fn() -> Tensor<S>,
    h: f64,
    coords: &[(usize, usize)],
) -> GradCheck {
    for p in params {
        p.zero_grad();
    }
    let loss = f();
    loss.backward();
    let analytic: Vec<Vec<S>> =
        params.iter().map(|p| p.grad().unwrap_or_else(|| vec![S::ZERO; p.numel()])).collect();
    let base = loss.item().to_f64();

    let step = S::from_f64(h);
    let mut out = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    for &(pi, i) in coords {
        let p = params[pi];
        p.nudge(i, step);
        let up = f().item().to_f64();
        p.nudge(i, -(step + step));
        let down = f().item().to_f64();
        p.nudge(i, step);
        let central = (up - down) / (2.0 * h);
        let got = analytic[pi][i].to_f64();
        let mut err = rel_err(got, central);
        if err > 1e-6 {
            // Kink inside the window? Check the one-sided slopes.
            let forward = (up - base) / h;
            let backward = (base - down) / h;
            if rel_err(forward, backward) > 1e-3 {
                err = err.min(rel_err(got, forward)).min(rel_err(got, backward));
            }
        }
        out.max_abs_err = out.max_abs_err.max((got - central).abs());
        out.max_rel_err = out.max_rel_err.max(err);
        out.checked += 1;
    }
    out
}
