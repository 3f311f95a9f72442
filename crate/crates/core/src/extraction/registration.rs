//! Translation-only registration by normalized cross-correlation.
//!
//! The raw cross-correlation for every shift is taken from one zero-padded
//! FFT product; per-shift overlap means and variances come from summed-area
//! tables, so the score is the exact Pearson correlation over the overlap.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::Plane;

pub const DEFAULT_MAX_SHIFT: usize = 32;
pub const DEFAULT_MIN_SCORE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Registration {
    /// Shift to apply to the moving plane: `registered(x, y) =
    /// moving(x - dx, y - dy)`.
    pub dx: i32,
    pub dy: i32,
    pub score: f64,
    /// Score below the acceptance threshold.
    pub flagged: bool,
}

struct Sat {
    w: usize,
    v: Vec<f64>,
}

impl Sat {
    fn new(data: &[f64], w: usize, h: usize, f: impl Fn(f64) -> f64) -> Self {
        let sw = w + 1;
        let mut v = vec![0.0; sw * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(data[y * w + x]);
                v[(y + 1) * sw + x + 1] = v[y * sw + x + 1] + row;
            }
        }
        Self { w: sw, v }
    }

    /// Sum over `[x0, x1) x [y0, y1)`.
    fn rect(&self, x0: usize, x1: usize, y0: usize, y1: usize) -> f64 {
        let s = self.w;
        self.v[y1 * s + x1] - self.v[y0 * s + x1] - self.v[y1 * s + x0] + self.v[y0 * s + x0]
    }
}

fn fft2(buf: &mut [Complex<f64>], w: usize, h: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let row = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut tmp = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            tmp[y] = buf[y * w + x];
        }
        col.process(&mut tmp);
        for y in 0..h {
            buf[y * w + x] = tmp[y];
        }
    }
}

fn variance_is_zero(data: &[f64]) -> bool {
    data.iter().all(|&v| v == data[0])
}

/// Finds the integer shift within `max_shift` that best aligns `moving` to
/// `fixed`. Ties go to the first shift in row-major `(dy, dx)` order.
pub fn register_translation(moving: &Plane, fixed: &Plane, max_shift: usize, min_score: f64) -> Result<Registration> {
    if moving.width != fixed.width || moving.height != fixed.height {
        return Err(Error::Registration(format!(
            "plane sizes differ: {}x{} vs {}x{}",
            moving.width, moving.height, fixed.width, fixed.height
        )));
    }
    let (w, h) = (fixed.width, fixed.height);
    let f: Vec<f64> = fixed.data.iter().map(|&v| v as f64).collect();
    let m: Vec<f64> = moving.data.iter().map(|&v| v as f64).collect();
    if variance_is_zero(&f) || variance_is_zero(&m) {
        return Err(Error::Registration("flat plane (zero variance)".into()));
    }
    let d = max_shift.min(w - 1).min(h - 1);
    // centre both planes so the correlation sums stay well conditioned
    let fm = f.iter().sum::<f64>() / f.len() as f64;
    let mm = m.iter().sum::<f64>() / m.len() as f64;
    let f: Vec<f64> = f.iter().map(|v| v - fm).collect();
    let m: Vec<f64> = m.iter().map(|v| v - mm).collect();

    let (pw, ph) = (w + d, h + d);
    let mut planner = FftPlanner::new();
    let mut fa = vec![Complex::default(); pw * ph];
    let mut ma = vec![Complex::default(); pw * ph];
    for y in 0..h {
        for x in 0..w {
            fa[y * pw + x] = Complex::new(f[y * w + x], 0.0);
            ma[y * pw + x] = Complex::new(m[y * w + x], 0.0);
        }
    }
    fft2(&mut fa, pw, ph, false, &mut planner);
    fft2(&mut ma, pw, ph, false, &mut planner);
    for (a, b) in fa.iter_mut().zip(&ma) {
        *a *= b.conj();
    }
    fft2(&mut fa, pw, ph, true, &mut planner);
    let scale = 1.0 / (pw * ph) as f64;
    // fa[(dy mod ph) * pw + (dx mod pw)] = sum_x f(x) m(x - d)

    let (sf, sf2) = (Sat::new(&f, w, h, |v| v), Sat::new(&f, w, h, |v| v * v));
    let (sm, sm2) = (Sat::new(&m, w, h, |v| v), Sat::new(&m, w, h, |v| v * v));
    let d = d as i64;
    let mut best: Option<Registration> = None;
    for dy in -d..=d {
        for dx in -d..=d {
            let fx0 = dx.max(0) as usize;
            let fx1 = (w as i64 + dx.min(0)) as usize;
            let fy0 = dy.max(0) as usize;
            let fy1 = (h as i64 + dy.min(0)) as usize;
            let (mx0, mx1) = ((fx0 as i64 - dx) as usize, (fx1 as i64 - dx) as usize);
            let (my0, my1) = ((fy0 as i64 - dy) as usize, (fy1 as i64 - dy) as usize);
            let n = ((fx1 - fx0) * (fy1 - fy0)) as f64;
            let idx = dy.rem_euclid(ph as i64) as usize * pw + dx.rem_euclid(pw as i64) as usize;
            let cross = fa[idx].re * scale;
            let (a, a2) = (sf.rect(fx0, fx1, fy0, fy1), sf2.rect(fx0, fx1, fy0, fy1));
            let (b, b2) = (sm.rect(mx0, mx1, my0, my1), sm2.rect(mx0, mx1, my0, my1));
            let cov = cross - a * b / n;
            let var = (a2 - a * a / n) * (b2 - b * b / n);
            let score = if var > 0.0 { cov / var.sqrt() } else { 0.0 };
            if best.is_none_or(|b| score > b.score) {
                best = Some(Registration {
                    dx: dx as i32,
                    dy: dy as i32,
                    score,
                    flagged: score < min_score,
                });
            }
        }
    }
    Ok(best.expect("at least the zero shift"))
}
