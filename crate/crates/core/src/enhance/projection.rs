use crate::tensornet::{l2_norm, Tensor};

/// Projects `delta` onto the L2 ball of radius `epsilon`: unchanged when inside,
/// otherwise rescaled to norm `epsilon`.
pub fn project_l2(delta: &Tensor<f32>, epsilon: f64) -> Tensor<f32> {
    let mut out = delta.clone();
    project_l2_in_place(out.data_mut(), epsilon);
    out
}

pub fn project_l2_in_place(delta: &mut [f32], epsilon: f64) {
    let epsilon = epsilon.max(0.0);
    let norm = l2_norm(delta);
    if norm <= epsilon {
        return;
    }
    let scale = epsilon / norm;
    for v in delta.iter_mut() {
        *v = (*v as f64 * scale) as f32;
    }
    // single-precision rounding can leave the norm a hair above the radius
    let mut margin = 1e-6f32;
    while l2_norm(delta) > epsilon {
        for v in delta.iter_mut() {
            *v *= 1.0 - margin;
        }
        margin = (margin * 2.0).min(1.0);
    }
}

/// One projected ascent step: `delta += step * dir / |dir|`, project onto the
/// `epsilon` ball, clamp `x + delta` into `[0, 1]`.
///
/// Writes the new image into `out` and the realised perturbation back into
/// `delta`. The realised perturbation always satisfies `|out - x| <= epsilon`.
pub fn ascent_step(x: &[f32], delta: &mut [f32], direction: &[f32], step: f64, epsilon: f64, out: &mut [f32]) {
    let gnorm = l2_norm(direction);
    if gnorm > 0.0 && gnorm.is_finite() {
        let scale = step / gnorm;
        for (d, g) in delta.iter_mut().zip(direction) {
            *d += (*g as f64 * scale) as f32;
        }
    }
    project_l2_in_place(delta, epsilon);
    realise(x, delta, epsilon, out);
}

/// `out = clamp(x + delta)`, then `delta = out - x`, shrinking until the
/// realised perturbation fits the budget.
pub fn realise(x: &[f32], delta: &mut [f32], epsilon: f64, out: &mut [f32]) {
    // `x + delta` rounds in f32, so a tiny shrink may not move the image;
    // the margin doubles until it does
    let mut margin = 1e-6;
    loop {
        for ((o, &xi), d) in out.iter_mut().zip(x).zip(delta.iter_mut()) {
            *o = (xi + *d).clamp(0.0, 1.0);
            *d = *o - xi;
        }
        let n = realised_norm(x, out);
        if n <= epsilon {
            return;
        }
        if !n.is_finite() || margin >= 1.0 {
            out.copy_from_slice(x);
            delta.iter_mut().for_each(|d| *d = 0.0);
            return;
        }
        let scale = ((1.0 - margin) * epsilon / n) as f32;
        for d in delta.iter_mut() {
            *d *= scale;
        }
        margin *= 2.0;
    }
}

pub fn realised_norm(x: &[f32], out: &[f32]) -> f64 {
    x.iter()
        .zip(out)
        .map(|(&a, &b)| {
            let d = b as f64 - a as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}
