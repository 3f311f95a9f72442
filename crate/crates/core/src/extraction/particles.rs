//! Per-label measurements and the area / circularity filter.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::watershed::LabelImage;

pub const DEFAULT_MIN_AREA: usize = 25;
pub const DEFAULT_CIRCULARITY: (f64, f64) = (0.3, 1.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiStats {
    pub label: u32,
    /// Unweighted mean pixel coordinate.
    pub cx: f64,
    pub cy: f64,
    pub area: usize,
    pub perimeter: f64,
    /// `4 pi area / perimeter^2`, clamped to at most 1.
    pub circularity: f64,
}

/// Crofton perimeter from boundary entries counted along the four
/// directions 0, 90, 45 and 135 degrees: `(pi/4) (e0 + e90 + (e45 + e135)/sqrt 2)`.
pub fn crofton_perimeter(entries: [usize; 4]) -> f64 {
    let [e0, e90, e45, e135] = entries.map(|e| e as f64);
    PI / 4.0 * (e0 + e90 + (e45 + e135) * FRAC_1_SQRT_2)
}

pub fn circularity(area: usize, perimeter: f64) -> f64 {
    if perimeter <= 0.0 {
        return 0.0;
    }
    (4.0 * PI * area as f64 / (perimeter * perimeter)).min(1.0)
}

/// Measures every label; pixels outside the image count as background.
pub fn measure(img: &LabelImage) -> Vec<RoiStats> {
    let (w, h) = (img.width as i64, img.height as i64);
    let n = img.count as usize;
    let mut area = vec![0usize; n + 1];
    let mut sx = vec![0u64; n + 1];
    let mut sy = vec![0u64; n + 1];
    let mut entries = vec![[0usize; 4]; n + 1];
    let at = |x: i64, y: i64| -> u32 {
        if x < 0 || y < 0 || x >= w || y >= h {
            0
        } else {
            img.labels[(y * w + x) as usize]
        }
    };
    // predecessor offsets per direction; an entry is a pixel whose
    // predecessor carries a different label
    let steps = [(-1, 0), (0, -1), (-1, -1), (1, -1)];
    for y in 0..h {
        for x in 0..w {
            let l = at(x, y);
            if l == 0 {
                continue;
            }
            let l = l as usize;
            area[l] += 1;
            sx[l] += x as u64;
            sy[l] += y as u64;
            for (d, (ox, oy)) in steps.iter().enumerate() {
                if at(x + ox, y + oy) != l as u32 {
                    entries[l][d] += 1;
                }
            }
        }
    }
    (1..=n)
        .filter(|&l| area[l] > 0)
        .map(|l| {
            let perimeter = crofton_perimeter(entries[l]);
            RoiStats {
                label: l as u32,
                cx: sx[l] as f64 / area[l] as f64,
                cy: sy[l] as f64 / area[l] as f64,
                area: area[l],
                perimeter,
                circularity: circularity(area[l], perimeter),
            }
        })
        .collect()
}

/// Keeps ROIs with `area >= min_area` and circularity inside `circ_range`.
pub fn analyze_particles(img: &LabelImage, min_area: usize, circ_range: (f64, f64)) -> Vec<RoiStats> {
    measure(img)
        .into_iter()
        .filter(|r| r.area >= min_area && r.circularity >= circ_range.0 && r.circularity <= circ_range.1)
        .collect()
}
