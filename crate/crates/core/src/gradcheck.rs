//! Central finite-difference checks of analytic gradients.

use crate::tensor::Tensors;

/// Step used for central differences.
pub const EPSILON: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound on the denominator of the relative error, so that gradients
/// which are zero up to rounding are compared absolutely.
pub const FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    /// `(tensor, index)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel <= TOLERANCE
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        if other.max_rel > self.max_rel || self.worst.is_none() {
            self.max_rel = self.max_rel.max(other.max_rel);
            self.worst = other.worst.or(self.worst);
        }
    }
}

/// Compares `analytic` against `(loss(p + ε) − loss(p − ε)) / 2ε` at up to
/// `per_tensor` evenly spaced coordinates of every tensor of `params`.
pub fn check<P, F>(params: &P, analytic: &P, loss: F, per_tensor: usize) -> GradCheck
where
    P: Tensors + Clone,
    F: Fn(&P) -> f64,
{
    let mut out = GradCheck::default();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.to_vec()).collect();
    let mut p = params.clone();
    for (ti, &len) in sizes.iter().enumerate() {
        if len == 0 {
            continue;
        }
        let step = (len / per_tensor.max(1)).max(1);
        for idx in (0..len).step_by(step).take(per_tensor) {
            let orig = p.tensors()[ti][idx];
            p.tensors_mut()[ti][idx] = orig + EPSILON;
            let up = loss(&p);
            p.tensors_mut()[ti][idx] = orig - EPSILON;
            let down = loss(&p);
            p.tensors_mut()[ti][idx] = orig;
            let numeric = (up - down) / (2.0 * EPSILON);
            let rel = relative_error(grads[ti][idx], numeric);
            out.checked += 1;
            if rel > out.max_rel || out.worst.is_none() {
                out.max_rel = out.max_rel.max(rel);
                out.worst = Some((ti, idx));
            }
        }
    }
    out
}

impl Tensors for Vec<Vec<f64>> {
    fn tensors(&self) -> Vec<&[f64]> {
        self.iter().map(Vec::as_slice).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().map(Vec::as_mut_slice).collect()
    }
}
