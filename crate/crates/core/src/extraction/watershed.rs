//! Distance-transform watershed for splitting touching blobs in a binary
//! mask.
//!
//! Markers are the maxima of the Euclidean distance map whose dynamic (the
//! drop needed to reach a higher maximum) is at least `h`. Flooding grows the
//! markers in order of decreasing distance over 4-neighbours; a pixel that
//! touches two different regions becomes a one-pixel dividing line.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub const DEFAULT_H: f64 = 1.0;

/// Labels per pixel, 0 for background and dividing lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: u32,
}

/// Stand-in for an infinite squared distance; larger than any real one.
const FAR: f64 = 1e20;

/// 1-D squared distance transform of `f` (Felzenszwalb and Huttenlocher).
fn dt1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let parabola = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..f.len() {
        let mut s = parabola(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = parabola(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from each foreground pixel to the nearest
/// background pixel, where everything outside the image counts as
/// background. Background pixels get 0.
pub fn distance_transform(mask: &[bool], width: usize, height: usize) -> Vec<f64> {
    // pad by one background pixel on every side
    let (pw, ph) = (width + 2, height + 2);
    let mut g = vec![0.0f64; pw * ph];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                g[(y + 1) * pw + x + 1] = FAR;
            }
        }
    }
    let n = pw.max(ph);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0f64; n + 1]);
    let (mut line, mut out) = (vec![0.0f64; n], vec![0.0f64; n]);
    for x in 0..pw {
        for y in 0..ph {
            line[y] = g[y * pw + x];
        }
        dt1d(&line[..ph], &mut out[..ph], &mut v, &mut z);
        for y in 0..ph {
            g[y * pw + x] = out[y];
        }
    }
    for y in 0..ph {
        line[..pw].copy_from_slice(&g[y * pw..(y + 1) * pw]);
        dt1d(&line[..pw], &mut out[..pw], &mut v, &mut z);
        g[y * pw..(y + 1) * pw].copy_from_slice(&out[..pw]);
    }
    let mut d = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            d[y * width + x] = g[(y + 1) * pw + x + 1].sqrt();
        }
    }
    d
}

fn neighbours4(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % w, i / w);
    [
        (y > 0).then(|| i - w),
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

/// Pixel order by decreasing value, ties by index.
fn descending(values: &[f64], members: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut order: Vec<usize> = members.collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Peak pixels of the maxima of `values` (restricted to `mask`) whose
/// dynamic is at least `h`, in raster order. Each 4-connected mask component
/// keeps at least its highest peak.
pub fn h_maxima_markers(values: &[f64], mask: &[bool], width: usize, height: usize, h: f64) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    let order = descending(values, (0..values.len()).filter(|&i| mask[i]));
    let mut parent = vec![NONE; values.len()];
    // per root: peak pixel of the component
    let mut peak = vec![NONE; values.len()];
    let mut markers = Vec::new();
    for &p in &order {
        parent[p] = p;
        peak[p] = p;
        for q in neighbours4(p, width, height) {
            if parent[q] == NONE {
                continue;
            }
            let (rp, rq) = (find(&mut parent, p), find(&mut parent, q));
            if rp == rq {
                continue;
            }
            let (pp, pq) = (peak[rp], peak[rq]);
            // the lower peak ends here; its dynamic is its height above this level
            let higher_first = values[pp] > values[pq] || (values[pp] == values[pq] && pp < pq);
            let (keep, lose) = if higher_first { (rp, rq) } else { (rq, rp) };
            let lost_peak = peak[lose];
            if values[lost_peak] - values[p] >= h {
                markers.push(lost_peak);
            }
            parent[lose] = keep;
        }
    }
    for &p in &order {
        if find(&mut parent, p) == p {
            markers.push(peak[p]);
        }
    }
    markers.sort_unstable();
    markers
}

#[derive(PartialEq)]
struct Item {
    value: f64,
    seq: u64,
    index: usize,
}

impl Eq for Item {}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value.total_cmp(&other.value).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Splits the foreground of `mask` along distance-map ridges.
pub fn watershed_split(mask: &[bool], width: usize, height: usize, h: f64) -> LabelImage {
    const LINE: u32 = u32::MAX;
    let dist = distance_transform(mask, width, height);
    let markers = h_maxima_markers(&dist, mask, width, height, h);
    let mut labels = vec![0u32; width * height];
    let mut queued = vec![false; width * height];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for (k, &m) in markers.iter().enumerate() {
        labels[m] = k as u32 + 1;
        queued[m] = true;
    }
    for &m in &markers {
        for q in neighbours4(m, width, height) {
            if mask[q] && !queued[q] {
                queued[q] = true;
                heap.push(Item { value: dist[q], seq, index: q });
                seq += 1;
            }
        }
    }
    while let Some(Item { index: p, .. }) = heap.pop() {
        let mut found = 0u32;
        let mut conflict = false;
        for q in neighbours4(p, width, height) {
            let l = labels[q];
            if l != 0 && l != LINE {
                if found == 0 {
                    found = l;
                } else if found != l {
                    conflict = true;
                }
            }
        }
        if conflict || found == 0 {
            labels[p] = LINE;
            continue;
        }
        labels[p] = found;
        for q in neighbours4(p, width, height) {
            if mask[q] && !queued[q] {
                queued[q] = true;
                heap.push(Item { value: dist[q], seq, index: q });
                seq += 1;
            }
        }
    }
    for l in &mut labels {
        if *l == LINE {
            *l = 0;
        }
    }
    LabelImage {
        width,
        height,
        labels,
        count: markers.len() as u32,
    }
}
