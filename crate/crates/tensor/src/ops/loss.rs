//! Classification losses. Each kernel returns the mean (or class-weighted
//! mean) loss and its gradient with respect to the input.

use crate::error::{param_err, Result, TensorError};
use crate::ops::activation::sigmoid_scalar;
use crate::scalar::Scalar;

/// Smallest probability fed to a logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

fn check(op: &'static str, rows: usize, classes: usize, targets: &[usize], smoothing: f64) -> Result<()> {
    if targets.len() != rows {
        return Err(TensorError::Dimension {
            op,
            lhs: vec![rows, classes],
            rhs: vec![targets.len()],
        });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(param_err(op, format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let limit = classes.max(2);
    if let Some(&t) = targets.iter().find(|&&t| t >= limit) {
        return Err(TensorError::Label {
            op,
            target: t,
            classes: limit,
        });
    }
    Ok(())
}

fn sample_weights<T: Scalar>(targets: &[usize], class_weights: Option<&[T]>) -> (Vec<T>, T) {
    let w: Vec<T> = targets
        .iter()
        .map(|&t| class_weights.map_or(T::one(), |cw| cw[t]))
        .collect();
    let total = w.iter().copied().sum();
    (w, total)
}

/// Target distribution for one sample. A single column is the binary case,
/// where the smoothed target is `y(1 - eps) + eps / 2`.
fn smoothed<T: Scalar>(classes: usize, target: usize, smoothing: f64) -> Vec<T> {
    let k = classes.max(2);
    let off = smoothing / k as f64;
    let on = 1.0 - smoothing + off;
    if classes == 1 {
        vec![T::from_f64_lossy(if target == 1 { on } else { off })]
    } else {
        (0..classes)
            .map(|c| T::from_f64_lossy(if c == target { on } else { off }))
            .collect()
    }
}

/// Cross entropy on raw logits `[rows, classes]`. One column means a
/// sigmoid head with binary targets.
pub fn cross_entropy_logits<T: Scalar>(
    logits: &[T],
    classes: usize,
    targets: &[usize],
    smoothing: f64,
    class_weights: Option<&[T]>,
) -> Result<(T, Vec<T>)> {
    let rows = if classes == 0 { 0 } else { logits.len() / classes };
    check("cross_entropy", rows, classes, targets, smoothing)?;
    let (w, total) = sample_weights(targets, class_weights);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (r, &t) in targets.iter().enumerate() {
        let z = &logits[r * classes..(r + 1) * classes];
        let q = smoothed::<T>(classes, t, smoothing);
        let scale = w[r] / total;
        let g = &mut grad[r * classes..(r + 1) * classes];
        if classes == 1 {
            let (v, y) = (z[0], q[0]);
            let softplus = v.max(T::zero()) + (-v.abs()).exp().ln_1p();
            loss += scale * (softplus - y * v);
            g[0] = scale * (sigmoid_scalar(v) - y);
        } else {
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let log_total = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for c in 0..classes {
                let logp = (z[c] - max) - log_total;
                loss -= scale * q[c] * logp;
                g[c] = scale * (logp.exp() - q[c]);
            }
        }
    }
    Ok((loss, grad))
}

/// Cross entropy on probabilities `[rows, classes]` produced by a head that
/// applies its activation before pooling.
pub fn cross_entropy_probs<T: Scalar>(
    probs: &[T],
    classes: usize,
    targets: &[usize],
    smoothing: f64,
    class_weights: Option<&[T]>,
) -> Result<(T, Vec<T>)> {
    let rows = if classes == 0 { 0 } else { probs.len() / classes };
    check("cross_entropy_probs", rows, classes, targets, smoothing)?;
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let (w, total) = sample_weights(targets, class_weights);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); probs.len()];
    for (r, &t) in targets.iter().enumerate() {
        let p = &probs[r * classes..(r + 1) * classes];
        let q = smoothed::<T>(classes, t, smoothing);
        let scale = w[r] / total;
        let g = &mut grad[r * classes..(r + 1) * classes];
        if classes == 1 {
            let pos = p[0].max(floor);
            let neg = (T::one() - p[0]).max(floor);
            let y = q[0];
            loss -= scale * (y * pos.ln() + (T::one() - y) * neg.ln());
            g[0] = scale * ((T::one() - y) / neg - y / pos);
        } else {
            for c in 0..classes {
                let pc = p[c].max(floor);
                loss -= scale * q[c] * pc.ln();
                g[c] = -scale * q[c] / pc;
            }
        }
    }
    Ok((loss, grad))
}
