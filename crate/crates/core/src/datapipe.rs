//! Everything between a manifest and a training batch: loading, blur,
//! standardization, augmentation, fold splitting, channel selection and
//! circular masking.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{load_patch, Channel, PatchData};
use crate::manifest::Manifest;
use crate::model::PATCH_SIZE;
use crate::rng;
use crate::synth::SynthPatch;

/// Patches held in memory with their labels and group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub channels: Vec<Channel>,
    pub patches: Vec<PatchData>,
    pub labels: Vec<usize>,
    pub groups: Vec<String>,
}

impl Dataset {
    pub fn new(classes: Vec<String>, channels: Vec<Channel>, patches: Vec<PatchData>, labels: Vec<usize>, groups: Vec<String>) -> Result<Self> {
        let ds = Self {
            classes,
            channels,
            patches,
            labels,
            groups,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patches.len() != self.labels.len() || self.patches.len() != self.groups.len() {
            problems.push("patch, label and group counts differ".to_string());
        }
        for (i, p) in self.patches.iter().enumerate() {
            if p.width != PATCH_SIZE || p.height != PATCH_SIZE {
                problems.push(format!("patch {i} is {}x{}, expected {PATCH_SIZE}x{PATCH_SIZE}", p.width, p.height));
            }
            if p.channels != self.channels {
                problems.push(format!("patch {i} channel order {:?} differs from {:?}", p.channels, self.channels));
            }
            if p.data.len() != p.channels.len() * p.width * p.height {
                problems.push(format!("patch {i} has {} values", p.data.len()));
            }
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.classes.len() {
                problems.push(format!("row {i}: label {l} outside class table"));
            }
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                problems.push(format!("row {i}: empty group"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(problems.join("; ")))
        }
    }

    /// Loads every patch a manifest references, paths relative to `base`.
    pub fn from_manifest(manifest: &Manifest, base: &Path) -> Result<Self> {
        manifest.validate()?;
        let labels = manifest.labels()?;
        let patches = manifest
            .rows
            .par_iter()
            .map(|r| load_patch(&base.join(&r.path)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest.classes.clone(), manifest.channels.clone(), patches, labels, manifest.groups())
    }

    pub fn from_synth(classes: Vec<String>, items: Vec<SynthPatch>) -> Result<Self> {
        let channels = items.first().map(|s| s.patch.channels.clone()).unwrap_or_default();
        let labels = items.iter().map(|s| s.class).collect();
        let groups = items.iter().map(|s| s.group.clone()).collect();
        let patches = items.into_iter().map(|s| s.patch).collect();
        Self::new(classes, channels, patches, labels, groups)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror index with the edge sample repeated (`c b a | a b c`).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur per channel, kernel radius `ceil(3 sigma)`,
/// mirrored borders.
pub fn gaussian_blur(p: &PatchData, sigma: f64) -> PatchData {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (p.width, p.height);
    let mut out = p.clone();
    let mut tmp = vec![0.0f64; w * h];
    for c in 0..p.channels.len() {
        let src = p.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * src[y * w + reflect(x as i64 + j as i64 - r, w as i64)] as f64)
                    .sum();
            }
        }
        let dst = &mut out.data[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * tmp[reflect(y as i64 + j as i64 - r, h as i64) * w + x])
                    .sum::<f64>() as f32;
            }
        }
    }
    out
}

/// Per-channel z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub channels: Vec<Channel>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit<'a>(patches: impl IntoIterator<Item = &'a PatchData>) -> Result<Self> {
        let patches: Vec<&PatchData> = patches.into_iter().collect();
        if patches.len() < 2 {
            return Err(Error::Data("standardization needs at least two patches".into()));
        }
        let channels = patches[0].channels.clone();
        if patches.iter().any(|p| p.channels != channels) {
            return Err(Error::Data("patches disagree on channel order".into()));
        }
        let n: usize = patches.iter().map(|p| p.width * p.height).sum();
        let mut mean = Vec::with_capacity(channels.len());
        let mut std = Vec::with_capacity(channels.len());
        for (c, ch) in channels.iter().enumerate() {
            let m = patches.iter().flat_map(|p| p.plane(c)).map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = patches.iter().flat_map(|p| p.plane(c)).map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
            if var <= 0.0 {
                return Err(Error::Data(format!("channel {ch} has zero variance")));
            }
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(Self { channels, mean, std })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,mean,std\n");
        for ((c, m), sd) in self.channels.iter().zip(&self.mean).zip(&self.std) {
            s.push_str(&format!("{c},{m},{sd}\n"));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |why: &str| Error::format("standardization", why.to_string());
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("channel,mean,std") {
            return Err(bad("missing header"));
        }
        let (mut channels, mut mean, mut std) = (Vec::new(), Vec::new(), Vec::new());
        for l in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = l.trim().split(',').collect();
            if f.len() != 3 {
                return Err(bad("expected three fields"));
            }
            channels.push(f[0].parse::<Channel>()?);
            mean.push(f[1].parse::<f64>().map_err(|_| bad("bad mean"))?);
            let s = f[2].parse::<f64>().map_err(|_| bad("bad std"))?;
            if !(s > 0.0) {
                return Err(bad("std must be positive"));
            }
            std.push(s);
        }
        if channels.is_empty() {
            return Err(bad("no channels"));
        }
        Ok(Self { channels, mean, std })
    }

    pub fn apply(&self, p: &mut PatchData) -> Result<()> {
        if p.channels != self.channels {
            return Err(Error::Data(format!("patch channels {:?} do not match statistics {:?}", p.channels, self.channels)));
        }
        let n = p.width * p.height;
        for c in 0..self.channels.len() {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in &mut p.data[c * n..(c + 1) * n] {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        Ok(())
    }
}

fn remap(p: &PatchData, src: impl Fn(usize, usize) -> (usize, usize)) -> PatchData {
    let s = p.width;
    let mut out = p.clone();
    for c in 0..p.channels.len() {
        let plane = p.plane(c);
        for y in 0..s {
            for x in 0..s {
                let (sx, sy) = src(x, y);
                out.data[c * s * s + y * s + x] = plane[sy * s + sx];
            }
        }
    }
    out
}

pub fn hflip(p: &PatchData) -> PatchData {
    let s = p.width;
    remap(p, |x, y| (s - 1 - x, y))
}

pub fn vflip(p: &PatchData) -> PatchData {
    let s = p.height;
    remap(p, |x, y| (x, s - 1 - y))
}

/// Counter-clockwise rotation by `quarter_turns * 90` degrees.
pub fn rot90(p: &PatchData, quarter_turns: usize) -> PatchData {
    let s = p.width;
    match quarter_turns % 4 {
        0 => p.clone(),
        1 => remap(p, |x, y| (s - 1 - y, x)),
        2 => remap(p, |x, y| (s - 1 - x, s - 1 - y)),
        _ => remap(p, |x, y| (y, s - 1 - x)),
    }
}

/// Horizontal flip, vertical flip and a right-angle rotation, each applied
/// independently with probability `p`. Always consumes four draws so the
/// stream stays aligned whatever `p` is.
pub fn augment<R: Rng + ?Sized>(patch: &PatchData, p: f64, rng: &mut R) -> PatchData {
    let draws = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let turns = rng.random_range(1..4usize);
    let mut out = if draws[0] < p { hflip(patch) } else { patch.clone() };
    if draws[1] < p {
        out = vflip(&out);
    }
    if draws[2] < p {
        out = rot90(&out, turns);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelConfig {
    NadhOnly,
    FadOnly,
    DodtOnly,
    NadhFad,
    All,
}

impl ChannelConfig {
    pub const ALL: [ChannelConfig; 5] = [Self::NadhOnly, Self::FadOnly, Self::DodtOnly, Self::NadhFad, Self::All];

    pub fn name(self) -> &'static str {
        match self {
            Self::NadhOnly => "nadh_only",
            Self::FadOnly => "fad_only",
            Self::DodtOnly => "dodt_only",
            Self::NadhFad => "nadh_fad",
            Self::All => "all",
        }
    }

    pub fn channels(self) -> Vec<Channel> {
        match self {
            Self::NadhOnly => vec![Channel::Nadh],
            Self::FadOnly => vec![Channel::Fad],
            Self::DodtOnly => vec![Channel::Dodt],
            Self::NadhFad => vec![Channel::Nadh, Channel::Fad],
            Self::All => vec![Channel::Nadh, Channel::Fad, Channel::Dodt],
        }
    }
}

impl fmt::Display for ChannelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parameter(format!("unknown channel configuration '{s}'")))
    }
}

/// Keeps the configured channels in the configuration's order.
pub fn select_channels(p: &PatchData, cfg: ChannelConfig) -> Result<PatchData> {
    let wanted = cfg.channels();
    let n = p.width * p.height;
    let mut data = Vec::with_capacity(wanted.len() * n);
    for &c in &wanted {
        let i = p
            .index_of(c)
            .ok_or_else(|| Error::Parameter(format!("{cfg} needs channel {c}, patch has {:?}", p.channels)))?;
        data.extend_from_slice(p.plane(i));
    }
    Ok(PatchData {
        width: p.width,
        height: p.height,
        channels: wanted,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskMode {
    KeepInside,
    KeepOutside,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::KeepInside => "keep_inside",
            Self::KeepOutside => "keep_outside",
        }
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "keep_inside" | "inside" => Ok(Self::KeepInside),
            "keep_outside" | "outside" => Ok(Self::KeepOutside),
            _ => Err(Error::Parameter(format!("unknown mask mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub diameter: f64,
    pub mode: MaskMode,
}

impl MaskSpec {
    pub const STANDARD_DIAMETERS: [f64; 4] = [5.0, 20.0, 40.0, 60.0];

    pub fn new(diameter: f64, mode: MaskMode) -> Result<Self> {
        if !(diameter > 0.0 && diameter <= PATCH_SIZE as f64) {
            return Err(Error::Parameter(format!("mask diameter {diameter} outside (0, {PATCH_SIZE}]")));
        }
        Ok(Self { diameter, mode })
    }

    pub fn label(&self) -> String {
        format!("{}_d{}", self.mode.name(), self.diameter)
    }

    /// True where the pixel survives.
    pub fn keep(&self, size: usize) -> Vec<bool> {
        let c = (size as f64 - 1.0) / 2.0;
        let r = self.diameter / 2.0;
        (0..size * size)
            .map(|i| {
                let d = ((i % size) as f64 - c).hypot((i / size) as f64 - c);
                (d <= r) == (self.mode == MaskMode::KeepInside)
            })
            .collect()
    }
}

/// Zeroes the masked-out pixels of every channel.
pub fn apply_circular_mask(p: &PatchData, m: &MaskSpec) -> PatchData {
    let keep = m.keep(p.width);
    let n = p.width * p.height;
    let mut out = p.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        if !keep[i % n] {
            *v = 0.0;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffled k-fold split; validation sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(Error::Parameter(format!("k = {k} folds needs 2 <= k <= {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "kfold"));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = n / k + usize::from(i < n % k);
        let mut val = order[start..start + len].to_vec();
        val.sort_unstable();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + len..]).copied().collect();
        train.sort_unstable();
        folds.push(Fold { train, val });
        start += len;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldBalance {
    pub val_class_counts: Vec<usize>,
    /// Largest absolute gap between a class's validation share and its
    /// global share.
    pub deviation: f64,
}

fn spread(counts: &[Vec<usize>], totals: &[usize]) -> f64 {
    let k = counts.len() as f64;
    let nc = totals.len();
    let mut acc = 0.0;
    for c in 0..nc {
        if totals[c] == 0 {
            continue;
        }
        let fr: Vec<f64> = counts.iter().map(|f| f[c] as f64 / totals[c] as f64).collect();
        let m = fr.iter().sum::<f64>() / k;
        acc += (fr.iter().map(|v| (v - m).powi(2)).sum::<f64>() / k).sqrt();
    }
    acc / nc as f64
}

/// Group-aware stratified k-fold. Groups are taken largest first (ties in
/// seeded order) and each goes to the fold that keeps the per-class fold
/// shares most even; ties prefer the smaller fold, then the lower index.
pub fn stratified_group_kfold(labels: &[usize], groups: &[String], n_classes: usize, k: usize, seed: u64) -> Result<(Vec<Fold>, Vec<FoldBalance>)> {
    if labels.len() != groups.len() {
        return Err(Error::Parameter("labels and groups differ in length".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Parameter(format!("label {l} outside {n_classes} classes")));
    }
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(g.as_str()).or_default().push(i);
    }
    if k < 2 || by_group.len() < k {
        return Err(Error::Parameter(format!("k = {k} folds needs at least k >= 2 groups, found {}", by_group.len())));
    }
    let mut members: Vec<Vec<usize>> = by_group.into_values().collect();
    members.shuffle(&mut rng::stream(seed, "group-kfold"));
    members.sort_by_key(|m| std::cmp::Reverse(m.len()));

    let mut totals = vec![0usize; n_classes];
    for &l in labels {
        totals[l] += 1;
    }
    let mut counts = vec![vec![0usize; n_classes]; k];
    let mut sizes = vec![0usize; k];
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
    for m in &members {
        let mut gc = vec![0usize; n_classes];
        for &i in m {
            gc[labels[i]] += 1;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for f in 0..k {
            for c in 0..n_classes {
                counts[f][c] += gc[c];
            }
            let score = spread(&counts, &totals);
            for c in 0..n_classes {
                counts[f][c] -= gc[c];
            }
            let better = match best {
                None => true,
                Some((s, size, _)) => score < s - 1e-15 || ((score - s).abs() <= 1e-15 && sizes[f] < size),
            };
            if better {
                best = Some((score, sizes[f], f));
            }
        }
        let f = best.expect("k >= 2").2;
        for c in 0..n_classes {
            counts[f][c] += gc[c];
        }
        sizes[f] += m.len();
        assigned[f].extend_from_slice(m);
    }

    let n = labels.len();
    let mut fold_of = vec![usize::MAX; n];
    for (f, rows) in assigned.iter().enumerate() {
        for &i in rows {
            fold_of[i] = f;
        }
    }
    let mut folds = Vec::with_capacity(k);
    let mut balance = Vec::with_capacity(k);
    for f in 0..k {
        let val: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let deviation = (0..n_classes)
            .filter(|&c| totals[c] > 0)
            .map(|c| {
                let share = if val.is_empty() { 0.0 } else { counts[f][c] as f64 / val.len() as f64 };
                (share - totals[c] as f64 / n as f64).abs()
            })
            .fold(0.0, f64::max);
        balance.push(FoldBalance {
            val_class_counts: counts[f].clone(),
            deviation,
        });
        folds.push(Fold { train, val });
    }
    assert_no_group_leak(&folds, groups)?;
    Ok((folds, balance))
}

/// Fails if any group id appears on both sides of a fold.
pub fn assert_no_group_leak(folds: &[Fold], groups: &[String]) -> Result<()> {
    for (f, fold) in folds.iter().enumerate() {
        let val: std::collections::BTreeSet<&str> = fold.val.iter().map(|&i| groups[i].as_str()).collect();
        if let Some(&i) = fold.train.iter().find(|&&i| val.contains(groups[i].as_str())) {
            return Err(Error::Data(format!("fold {f}: group {} on both sides", groups[i])));
        }
    }
    Ok(())
}

/// Line-delimited `row_index,fold,split` records.
pub fn export_folds<W: Write>(folds: &[Fold], mut out: W) -> std::io::Result<()> {
    writeln!(out, "row_index,fold,split")?;
    for (f, fold) in folds.iter().enumerate() {
        let mut rows: Vec<(usize, &str)> = fold.train.iter().map(|&i| (i, "train")).collect();
        rows.extend(fold.val.iter().map(|&i| (i, "val")));
        rows.sort_unstable();
        for (i, split) in rows {
            writeln!(out, "{i},{f},{split}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn patch(channels: Vec<Channel>, mut f: impl FnMut(usize, usize, usize) -> f32) -> PatchData {
        let s = PATCH_SIZE;
        let data = (0..channels.len() * s * s).map(|i| f(i / (s * s), (i % (s * s)) % s, (i % (s * s)) / s)).collect();
        PatchData {
            width: s,
            height: s,
            channels,
            data,
        }
    }

    fn random_patch(seed: u64) -> PatchData {
        let mut r = rng::seeded(seed);
        patch(vec![Channel::Nadh, Channel::Fad, Channel::Dodt], |_, _, _| r.random_range(0.0..1000.0))
    }

    #[test]
    fn blur_constant_impulse_and_mass() {
        let c = patch(vec![Channel::Nadh], |_, _, _| 123.5);
        for v in gaussian_blur(&c, 2.0).data {
            assert!((v - 123.5).abs() < 1e-4);
        }
        let imp = patch(vec![Channel::Nadh], |_, x, y| if x == 30 && y == 30 { 1.0 } else { 0.0 });
        let b = gaussian_blur(&imp, 2.0);
        // direct 2-D oracle: normalized outer-product kernel evaluated at each offset
        let r = 6i64;
        let norm: f64 = (-r..=r).map(|i| (-(i * i) as f64 / 8.0).exp()).sum();
        for y in 0..PATCH_SIZE as i64 {
            for x in 0..PATCH_SIZE as i64 {
                let (dx, dy) = (x - 30, y - 30);
                let want = if dx.abs() <= r && dy.abs() <= r {
                    (-((dx * dx + dy * dy) as f64) / 8.0).exp() / (norm * norm)
                } else {
                    0.0
                };
                assert!((b.data[(y * 64 + x) as usize] as f64 - want).abs() < 1e-7);
            }
        }
        let centre = b.data[30 * 64 + 30] as f64;
        assert!((centre - 1.0 / (2.0 * std::f64::consts::PI * 4.0)).abs() < 2e-3, "{centre}");
        let p = random_patch(3);
        let b = gaussian_blur(&p, 2.0);
        for c in 0..3 {
            let s0: f64 = p.plane(c).iter().map(|&v| v as f64).sum();
            let s1: f64 = b.plane(c).iter().map(|&v| v as f64).sum();
            assert!(((s1 - s0) / s0).abs() < 1e-4);
        }
    }

    #[test]
    fn standardization_formula_and_train_only() {
        let a = patch(vec![Channel::Nadh, Channel::Fad], |c, x, _| if c == 0 { 1.0 } else { x as f32 });
        let b = patch(vec![Channel::Nadh, Channel::Fad], |c, x, _| if c == 0 { 3.0 } else { 2.0 * x as f32 });
        let s = Standardization::fit([&a, &b]).unwrap();
        assert_eq!(s.mean[0], 2.0);
        assert_eq!(s.std[0], 1.0);
        // channel 1 values: x and 2x for x in 0..64, each 64 times
        let vals: Vec<f64> = (0..64).flat_map(|x| [x as f64, 2.0 * x as f64]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((s.mean[1] - m).abs() < 1e-9 && (s.std[1] - sd).abs() < 1e-9);

        let train: Vec<PatchData> = (0..8).map(random_patch).collect();
        let s = Standardization::fit(&train).unwrap();
        let mut z = train.clone();
        for p in &mut z {
            s.apply(p).unwrap();
        }
        assert_eq!(Standardization::from_csv(&s.to_csv()).unwrap(), s);
        let again = Standardization::fit(&z).unwrap();
        for c in 0..3 {
            assert!(again.mean[c].abs() < 1e-4);
            assert!((again.std[c] - 1.0).abs() < 1e-3);
        }
        let mut val = patch(vec![Channel::Nadh, Channel::Fad, Channel::Dodt], |_, _, _| 900.0);
        s.apply(&mut val).unwrap();
        assert!(val.data[0] > 0.5);
    }

    #[test]
    fn constant_channel_is_named() {
        let a = patch(vec![Channel::Nadh, Channel::Dodt], |c, x, _| if c == 1 { 5.0 } else { x as f32 });
        let err = Standardization::fit([&a, &a.clone()]).unwrap_err();
        assert!(err.to_string().contains("DODT"), "{err}");
    }

    #[test]
    fn augmentation_properties() {
        let p = random_patch(5);
        let mut r = rng::seeded(1);
        assert_eq!(augment(&p, 0.0, &mut r), p);
        assert_eq!(hflip(&hflip(&p)), p);
        assert_eq!(rot90(&rot90(&p, 1), 3), p);
        let a = augment(&p, 1.0, &mut rng::seeded(2));
        let b = augment(&p, 1.0, &mut rng::seeded(2));
        assert_eq!(a, b);
        assert_ne!(a, p);
        for c in 0..3 {
            let mut x: Vec<u32> = p.plane(c).iter().map(|v| v.to_bits()).collect();
            let mut y: Vec<u32> = a.plane(c).iter().map(|v| v.to_bits()).collect();
            x.sort_unstable();
            y.sort_unstable();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn blur_commutes_with_right_angle_transforms() {
        let p = random_patch(8);
        for t in 1..4 {
            let a = gaussian_blur(&rot90(&p, t), 2.0);
            let b = rot90(&gaussian_blur(&p, 2.0), t);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn channel_selection() {
        let p = random_patch(6);
        assert_eq!(select_channels(&p, ChannelConfig::All).unwrap(), p);
        let d = select_channels(&p, ChannelConfig::DodtOnly).unwrap();
        assert_eq!(d.data, p.plane(p.index_of(Channel::Dodt).unwrap()));
        assert_eq!(select_channels(&p, ChannelConfig::NadhOnly).unwrap().channels.len(), 1);
        let two = select_channels(&p, ChannelConfig::NadhFad).unwrap();
        assert_eq!(two.channels, vec![Channel::Nadh, Channel::Fad]);
        assert!(select_channels(&two, ChannelConfig::DodtOnly).is_err());
    }

    #[test]
    fn masks_partition_the_patch() {
        let p = random_patch(7);
        for d in [5.0, 20.0, 40.0, 60.0, 64.0] {
            let i = apply_circular_mask(&p, &MaskSpec::new(d, MaskMode::KeepInside).unwrap());
            let o = apply_circular_mask(&p, &MaskSpec::new(d, MaskMode::KeepOutside).unwrap());
            for k in 0..p.data.len() {
                assert!(i.data[k] == 0.0 || o.data[k] == 0.0);
                assert_eq!(i.data[k] + o.data[k], p.data[k]);
            }
        }
        let kept = MaskSpec::new(20.0, MaskMode::KeepInside).unwrap().keep(64).iter().filter(|&&k| k).count();
        assert!((kept as f64 - 314.0).abs() <= 4.0, "{kept}");
        let full = MaskSpec::new(64.0, MaskMode::KeepInside).unwrap().keep(64);
        assert!(!full[0] && !full[63] && full[32 * 64 + 32]);
        assert!(MaskSpec::new(65.0, MaskMode::KeepInside).is_err());
    }

    #[test]
    fn kfold_partitions() {
        let f = kfold_split(10, 5, 3).unwrap();
        let mut all: Vec<usize> = f.iter().flat_map(|x| x.val.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(f.iter().all(|x| x.val.len() == 2 && x.train.len() == 8));
        assert_eq!(f, kfold_split(10, 5, 3).unwrap());
        let big = kfold_split(5075, 5, 1).unwrap();
        assert!(big.iter().all(|x| x.val.len() == 1015));
        assert!(kfold_split(3, 5, 1).is_err());
    }

    fn grouped(r: &mut impl Rng, n_groups: usize, n_classes: usize) -> (Vec<usize>, Vec<String>) {
        let (mut labels, mut groups) = (Vec::new(), Vec::new());
        for g in 0..n_groups {
            for _ in 0..r.random_range(1..12) {
                labels.push(r.random_range(0..n_classes));
                groups.push(format!("g{g}"));
            }
        }
        (labels, groups)
    }

    #[test]
    fn group_folds_never_leak() {
        let mut r = rng::seeded(10);
        for t in 0..200 {
            let n_groups = r.random_range(5..30);
            let (labels, groups) = grouped(&mut r, n_groups, 3);
            let (folds, _) = stratified_group_kfold(&labels, &groups, 3, 5, t).unwrap();
            let mut seen = vec![0; labels.len()];
            for f in &folds {
                for &i in &f.val {
                    seen[i] += 1;
                }
                assert_eq!(f.train.len() + f.val.len(), labels.len());
            }
            assert!(seen.iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn group_folds_balance_matches_brute_force() {
        // 10 single-class groups of equal size, 5 per class; every fold
        // should receive one group of each class, which is also the
        // brute-force optimum of the class-count imbalance
        let labels: Vec<usize> = (0..10).flat_map(|g| vec![g % 2; 4]).collect();
        let groups: Vec<String> = (0..10).flat_map(|g| vec![format!("g{g}"); 4]).collect();
        let (folds, bal) = stratified_group_kfold(&labels, &groups, 2, 5, 0).unwrap();
        let mut best = usize::MAX;
        for code in 0..5usize.pow(10) {
            let mut c = [[0usize; 2]; 5];
            let mut x = code;
            for g in 0..10 {
                c[x % 5][g % 2] += 1;
                x /= 5;
            }
            let worst = c.iter().map(|f| f[0].abs_diff(f[1])).max().unwrap();
            best = best.min(worst);
        }
        let got = bal.iter().map(|b| (b.val_class_counts[0] / 4).abs_diff(b.val_class_counts[1] / 4)).max().unwrap();
        assert!(got <= best + 1);
        assert_eq!(best, 0);
        assert!(folds.iter().all(|f| f.val.len() == 8));

        let single = vec![0usize; 12];
        let g: Vec<String> = (0..12).map(|i| format!("g{}", i / 2)).collect();
        assert!(stratified_group_kfold(&single, &g, 1, 5, 0).is_ok());
        assert!(stratified_group_kfold(&single[..6], &g[..6], 1, 5, 0).is_err());
    }

    #[test]
    fn fold_export_lines() {
        let f = kfold_split(4, 2, 0).unwrap();
        let mut out = Vec::new();
        export_folds(&f, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert!(text.starts_with("row_index,fold,split\n0,0,"));
    }
}
