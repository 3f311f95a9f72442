//! Otsu thresholding over the full 16-bit histogram, followed by a cap on
//! the bright fraction: when more than 10% of pixels lie above the Otsu
//! threshold it is raised to the 90th intensity percentile.

use std::cmp::Ordering;

use crate::error::{Error, Result};

pub const BINS: usize = 1 << 16;
pub const DEFAULT_BRIGHT_CAP: f64 = 0.10;
/// Keeps the squared score numerator within u128.
const MAX_PIXELS: u128 = 1 << 24;

pub fn histogram(data: &[u16]) -> Vec<u64> {
    let mut h = vec![0u64; BINS];
    for &v in data {
        h[v as usize] += 1;
    }
    h
}

/// Compares `a.0 / a.1` with `b.0 / b.1` exactly (denominators non-zero).
fn cmp_ratio(mut a: (u128, u128), mut b: (u128, u128)) -> Ordering {
    let mut flipped = false;
    loop {
        let (qa, qb) = (a.0 / a.1, b.0 / b.1);
        if qa != qb {
            let o = qa.cmp(&qb);
            return if flipped { o.reverse() } else { o };
        }
        let (ra, rb) = (a.0 % a.1, b.0 % b.1);
        match (ra == 0, rb == 0) {
            (true, true) => return Ordering::Equal,
            (true, false) => return if flipped { Ordering::Greater } else { Ordering::Less },
            (false, true) => return if flipped { Ordering::Less } else { Ordering::Greater },
            // ra/a.1 vs rb/b.1 is the reverse of a.1/ra vs b.1/rb
            (false, false) => {
                a = (a.1, ra);
                b = (b.1, rb);
                flipped = !flipped;
            }
        }
    }
}

/// Threshold `t` maximizing the between-class variance of `{v <= t}` and
/// `{v > t}`. Scores are compared exactly as rationals
/// `(N*S0 - n0*S)^2 / (n0*n1)`; the first maximum wins.
pub fn otsu_from_histogram(hist: &[u64]) -> Result<u16> {
    if hist.len() > BINS {
        return Err(Error::Threshold(format!("histogram has {} bins", hist.len())));
    }
    let n: u128 = hist.iter().map(|&c| c as u128).sum();
    if n > MAX_PIXELS {
        return Err(Error::Threshold(format!("{n} pixels exceed the supported {MAX_PIXELS}")));
    }
    let s: u128 = hist.iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();
    let distinct = hist.iter().filter(|&&c| c > 0).count();
    if distinct < 2 {
        return Err(Error::Threshold("degenerate histogram: fewer than two distinct intensities".into()));
    }
    let (mut n0, mut s0) = (0u128, 0u128);
    let mut best: Option<(usize, (u128, u128))> = None;
    for (t, &c) in hist.iter().enumerate() {
        n0 += c as u128;
        s0 += t as u128 * c as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (n * s0).abs_diff(n0 * s);
        let score = (diff * diff, n0 * n1);
        if best.is_none_or(|(_, b)| cmp_ratio(score, b) == Ordering::Greater) {
            best = Some((t, score));
        }
    }
    Ok(best.expect("two distinct intensities give a valid split").0 as u16)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    /// Plain Otsu threshold.
    pub otsu: u16,
    /// Threshold after the bright-fraction cap; foreground is `> value`.
    pub value: u16,
    pub capped: bool,
    pub foreground_fraction: f64,
}

/// Otsu threshold with the bright-fraction cap applied.
pub fn auto_threshold_histogram(hist: &[u64], cap: f64) -> Result<Threshold> {
    let otsu = otsu_from_histogram(hist)?;
    let n: u64 = hist.iter().sum();
    let above = |t: u16| hist[t as usize + 1..].iter().sum::<u64>();
    let mut value = otsu;
    let mut capped = false;
    if above(otsu) as f64 > cap * n as f64 {
        // smallest v with count(<= v) >= (1 - cap) * N
        let need = (1.0 - cap) * n as f64;
        let mut cum = 0u64;
        for (v, &c) in hist.iter().enumerate() {
            cum += c;
            if cum as f64 >= need {
                value = v as u16;
                break;
            }
        }
        capped = value != otsu;
    }
    Ok(Threshold {
        otsu,
        value,
        capped,
        foreground_fraction: above(value) as f64 / n as f64,
    })
}

pub fn auto_threshold(plane: &[u16]) -> Result<Threshold> {
    auto_threshold_histogram(&histogram(plane), DEFAULT_BRIGHT_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_comparison() {
        assert_eq!(cmp_ratio((1, 3), (2, 6)), Ordering::Equal);
        assert_eq!(cmp_ratio((1, 3), (1, 2)), Ordering::Less);
        assert_eq!(cmp_ratio((7, 2), (10, 3)), Ordering::Greater);
        assert_eq!(cmp_ratio((355, 113), (22, 7)), Ordering::Less);
        assert_eq!(cmp_ratio((u128::MAX, 3), (u128::MAX - 1, 3)), Ordering::Greater);
    }

    /// Scores every split with arbitrary-precision cross multiplication.
    fn brute_otsu(hist: &[u64]) -> usize {
        use num_bigint::BigUint;
        let n: u64 = hist.iter().sum();
        let s: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
        let mut best: Option<(usize, BigUint, BigUint)> = None;
        for t in 0..hist.len() {
            let n0: u64 = hist[..=t].iter().sum();
            let s0: u64 = hist[..=t].iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
            if n0 == 0 || n0 == n {
                continue;
            }
            let d = (BigUint::from(n) * s0).max(BigUint::from(n0) * s) - (BigUint::from(n) * s0).min(BigUint::from(n0) * s);
            let num = &d * &d;
            let den = BigUint::from(n0) * (n - n0);
            let better = match &best {
                None => true,
                Some((_, bn, bd)) => &num * bd > bn * &den,
            };
            if better {
                best = Some((t, num, den));
            }
        }
        best.unwrap().0
    }

    #[test]
    fn matches_big_integer_oracle() {
        use rand::Rng;
        let mut r = crate::rng::seeded(11);
        for _ in 0..30 {
            let bins = r.random_range(2..300);
            let hist: Vec<u64> = (0..bins).map(|_| if r.random_bool(0.3) { 0 } else { r.random_range(0..5000) }).collect();
            if hist.iter().filter(|&&c| c > 0).count() < 2 {
                continue;
            }
            assert_eq!(otsu_from_histogram(&hist).unwrap() as usize, brute_otsu(&hist));
        }
        // exact ties resolve to the first split
        let tie = [5u64, 0, 0, 5];
        assert_eq!(otsu_from_histogram(&tie).unwrap(), 0);
    }

    #[test]
    fn bimodal_split_between_modes() {
        let mut plane = vec![10u16; 500];
        plane.extend(std::iter::repeat_n(200u16, 500));
        let t = otsu_from_histogram(&histogram(&plane)).unwrap();
        assert!((10..200).contains(&t));
        assert_eq!(t, 10);
    }

    #[test]
    fn constant_plane_is_degenerate() {
        let err = auto_threshold(&[7u16; 64]).unwrap_err();
        assert!(matches!(err, Error::Threshold(_)));
    }

    #[test]
    fn thirty_percent_bright_is_capped() {
        let mut plane: Vec<u16> = (0..700).map(|i| 100 + (i % 50) as u16).collect();
        plane.extend((0..300).map(|i| 5000 + (i % 400) as u16));
        let t = auto_threshold(&plane).unwrap();
        assert!(t.capped);
        let above = plane.iter().filter(|&&v| v > t.value).count() as f64 / plane.len() as f64;
        let bin = plane.iter().filter(|&&v| v == t.value).count() as f64 / plane.len() as f64;
        assert!(above <= 0.10 + bin, "{above}");
        assert_eq!(above, t.foreground_fraction);
    }

    #[test]
    fn small_bright_fraction_keeps_otsu() {
        let mut plane = vec![100u16; 950];
        plane.extend([3000u16; 50]);
        let t = auto_threshold(&plane).unwrap();
        assert!(!t.capped);
        assert_eq!(t.value, t.otsu);
        assert_eq!(t.foreground_fraction, 0.05);
    }
}
