//! Single-cell patch extraction from full field-of-view images:
//! Otsu threshold on the segmentation channel, watershed split, particle
//! filter, 64x64 crops around each centroid and optional APC labelling on a
//! registered APC plane.

pub mod otsu;
pub mod particles;
pub mod registration;
pub mod watershed;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{load_image, save_patch, Channel, MultiChannelImage, PatchData, Plane};
use crate::manifest::{Manifest, ManifestRow};
use crate::model::PATCH_SIZE;
use crate::synth::{APC_NEGATIVE, APC_POSITIVE};

pub use otsu::Threshold;
pub use particles::RoiStats;
pub use registration::Registration;

#[derive(Debug, Clone, PartialEq)]
pub enum LabelMode {
    /// Positive / negative from the registered APC plane.
    Apc,
    /// Every patch gets this class; the APC plane is never read.
    Class(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    pub segmentation_channel: Channel,
    /// Channels stacked into each patch, in order.
    pub patch_channels: Vec<Channel>,
    pub label_mode: LabelMode,
    pub patch_size: usize,
    pub min_area: usize,
    pub circularity: (f64, f64),
    pub bright_cap: f64,
    pub watershed_h: f64,
    pub max_shift: usize,
    pub min_registration_score: f64,
    pub apc_disk_diameter: f64,
    /// Per-image threshold replacing the automatic one, keyed by source id.
    pub threshold_overrides: BTreeMap<String, u16>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            segmentation_channel: Channel::Nadh,
            patch_channels: vec![Channel::Nadh, Channel::Fad, Channel::Dodt],
            label_mode: LabelMode::Apc,
            patch_size: PATCH_SIZE,
            min_area: particles::DEFAULT_MIN_AREA,
            circularity: particles::DEFAULT_CIRCULARITY,
            bright_cap: otsu::DEFAULT_BRIGHT_CAP,
            watershed_h: watershed::DEFAULT_H,
            max_shift: registration::DEFAULT_MAX_SHIFT,
            min_registration_score: registration::DEFAULT_MIN_SCORE,
            apc_disk_diameter: 20.0,
            threshold_overrides: BTreeMap::new(),
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch_size == 0 || self.patch_size % 2 != 0 {
            problems.push(format!("patch size {} must be even and positive", self.patch_size));
        }
        if self.patch_channels.is_empty() {
            problems.push("no patch channels selected".into());
        }
        if self.patch_channels.contains(&Channel::Apc) {
            problems.push("APC cannot be a patch input channel".into());
        }
        let (lo, hi) = self.circularity;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            problems.push(format!("circularity range {:?} invalid", self.circularity));
        }
        if !(0.0..1.0).contains(&self.bright_cap) {
            problems.push(format!("bright cap {} outside [0, 1)", self.bright_cap));
        }
        if self.apc_disk_diameter <= 0.0 || self.apc_disk_diameter > self.patch_size as f64 {
            problems.push(format!("APC disk diameter {} invalid", self.apc_disk_diameter));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }
}

/// Rounds to the nearest integer with ties toward negative infinity.
pub fn round_half_down(v: f64) -> i64 {
    (v - 0.5).ceil() as i64
}

/// Top-left corner of the `size` window centred on `(cx, cy)`, or `None`
/// when the window leaves the image.
pub fn crop_window(cx: f64, cy: f64, size: usize, width: usize, height: usize) -> Option<(usize, usize)> {
    let half = (size / 2) as i64;
    let x0 = round_half_down(cx) - half;
    let y0 = round_half_down(cy) - half;
    let fits = x0 >= 0 && y0 >= 0 && x0 + size as i64 <= width as i64 && y0 + size as i64 <= height as i64;
    fits.then_some((x0 as usize, y0 as usize))
}

fn crop_plane(plane: &[u16], width: usize, x0: usize, y0: usize, size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        out.extend(plane[y * width + x0..y * width + x0 + size].iter().map(|&v| f32::from(v)));
    }
    out
}

/// Stacks the requested channels of the window centred at `(cx, cy)`.
pub fn crop_patch(img: &MultiChannelImage, cx: f64, cy: f64, size: usize, channels: &[Channel]) -> Result<Option<PatchData>> {
    let Some((x0, y0)) = crop_window(cx, cy, size, img.width, img.height) else {
        return Ok(None);
    };
    let mut data = Vec::with_capacity(channels.len() * size * size);
    for &c in channels {
        let plane = img
            .plane_data(c)
            .ok_or_else(|| Error::Data(format!("{}: channel {c} not present", img.source_id)))?;
        data.extend(crop_plane(plane, img.width, x0, y0, size));
    }
    Ok(Some(PatchData {
        width: size,
        height: size,
        channels: channels.to_vec(),
        data,
    }))
}

/// Pixels whose centre lies within `diameter / 2` of the patch centre.
pub fn central_disk(size: usize, diameter: f64) -> Vec<bool> {
    let c = (size as f64 - 1.0) / 2.0;
    let r2 = (diameter / 2.0).powi(2);
    (0..size * size)
        .map(|i| ((i % size) as f64 - c).powi(2) + ((i / size) as f64 - c).powi(2) <= r2)
        .collect()
}

/// Positive iff the mean APC intensity in the central disk exceeds the
/// field-of-view threshold. A missing threshold (flat APC plane) means no
/// cell is positive.
pub fn apc_label(apc_patch: &[f32], size: usize, diameter: f64, fov_threshold: Option<f64>) -> bool {
    let Some(t) = fov_threshold else {
        return false;
    };
    let disk = central_disk(size, diameter);
    let (sum, n) = apc_patch
        .iter()
        .zip(&disk)
        .filter(|(_, &d)| d)
        .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    n > 0 && sum / n as f64 > t
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedPatch {
    pub patch: PatchData,
    pub label: String,
    pub roi: RoiStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageExtraction {
    pub source_id: String,
    pub threshold: Threshold,
    pub overridden: bool,
    pub registration: Option<Registration>,
    /// Shift actually applied to the APC plane.
    pub applied_shift: (i32, i32),
    /// ROIs passing the particle filter.
    pub detected: usize,
    /// ROIs dropped because their window left the image.
    pub edge_rejected: usize,
    /// Sorted by (centroid y, centroid x).
    pub patches: Vec<ExtractedPatch>,
}

/// Runs the full pipeline on one image.
pub fn extract_image(img: &MultiChannelImage, cfg: &ExtractConfig) -> Result<ImageExtraction> {
    cfg.validate()?;
    let seg = img
        .plane_data(cfg.segmentation_channel)
        .ok_or_else(|| Error::Data(format!("{}: missing {} plane", img.source_id, cfg.segmentation_channel)))?;
    let hist = otsu::histogram(seg);
    let mut threshold = otsu::auto_threshold_histogram(&hist, cfg.bright_cap)?;
    let overridden = match cfg.threshold_overrides.get(&img.source_id) {
        Some(&t) => {
            threshold.value = t;
            threshold.capped = false;
            threshold.foreground_fraction = hist[t as usize + 1..].iter().sum::<u64>() as f64 / seg.len() as f64;
            true
        }
        None => false,
    };
    log::info!(
        "{}: threshold {} (otsu {}, capped {}, foreground {:.4})",
        img.source_id,
        threshold.value,
        threshold.otsu,
        threshold.capped,
        threshold.foreground_fraction
    );
    let mask: Vec<bool> = seg.iter().map(|&v| v > threshold.value).collect();
    let labels = watershed::watershed_split(&mask, img.width, img.height, cfg.watershed_h);
    let rois = particles::analyze_particles(&labels, cfg.min_area, cfg.circularity);

    let (apc, registration, applied_shift) = match &cfg.label_mode {
        LabelMode::Class(_) => (None, None, (0, 0)),
        LabelMode::Apc => {
            let apc = img
                .plane(Channel::Apc)
                .ok_or_else(|| Error::Labeling(format!("{}: APC plane absent", img.source_id)))?;
            let fixed = Plane::new(img.width, img.height, seg.to_vec())?;
            let (registration, shift) = match registration::register_translation(&apc, &fixed, cfg.max_shift, cfg.min_registration_score) {
                Ok(r) if !r.flagged => (Some(r), (r.dx, r.dy)),
                Ok(r) => {
                    warn!("{}: registration score {:.3} below threshold; APC left unshifted", img.source_id, r.score);
                    (Some(r), (0, 0))
                }
                Err(e) => {
                    warn!("{}: {e}; APC left unshifted", img.source_id);
                    (None, (0, 0))
                }
            };
            let registered = apc.shifted(shift.0, shift.1);
            let t = match otsu::auto_threshold_histogram(&otsu::histogram(&registered.data), cfg.bright_cap) {
                Ok(t) => Some(t.value as f64),
                Err(_) => None,
            };
            (Some((registered, t)), registration, shift)
        }
    };

    let mut patches = Vec::new();
    let mut edge_rejected = 0;
    for roi in &rois {
        let Some(patch) = crop_patch(img, roi.cx, roi.cy, cfg.patch_size, &cfg.patch_channels)? else {
            edge_rejected += 1;
            continue;
        };
        let label = match (&cfg.label_mode, &apc) {
            (LabelMode::Class(name), _) => name.clone(),
            (LabelMode::Apc, Some((plane, t))) => {
                let (x0, y0) = crop_window(roi.cx, roi.cy, cfg.patch_size, img.width, img.height).expect("window fits");
                let crop = crop_plane(&plane.data, img.width, x0, y0, cfg.patch_size);
                let positive = apc_label(&crop, cfg.patch_size, cfg.apc_disk_diameter, *t);
                if positive { APC_POSITIVE } else { APC_NEGATIVE }.to_string()
            }
            (LabelMode::Apc, None) => unreachable!("APC plane loaded in APC mode"),
        };
        patches.push(ExtractedPatch { patch, label, roi: *roi });
    }
    patches.sort_by(|a, b| a.roi.cy.total_cmp(&b.roi.cy).then(a.roi.cx.total_cmp(&b.roi.cx)));
    if patches.is_empty() {
        warn!("{}: no cells detected", img.source_id);
    }
    Ok(ImageExtraction {
        source_id: img.source_id.clone(),
        threshold,
        overridden,
        registration,
        applied_shift,
        detected: rois.len(),
        edge_rejected,
        patches,
    })
}

fn class_table(cfg: &ExtractConfig) -> Vec<String> {
    match &cfg.label_mode {
        LabelMode::Apc => vec![APC_NEGATIVE.into(), APC_POSITIVE.into()],
        LabelMode::Class(name) => vec![name.clone()],
    }
}

/// Extracts every image, writes patches to `out_dir/patches/` and the
/// manifest to `out_dir/manifest.csv`. Row order is (source id, centroid y,
/// centroid x) whatever order the images finish in.
pub fn extract_to_dir(
    inputs: &[PathBuf],
    channel_map: Option<&[Channel]>,
    cfg: &ExtractConfig,
    out_dir: &Path,
) -> Result<(Manifest, Vec<ImageExtraction>)> {
    cfg.validate()?;
    let mut results: Vec<ImageExtraction> = inputs
        .par_iter()
        .map(|p| {
            let img = load_image(p, channel_map)?;
            extract_image(&img, cfg)
        })
        .collect::<Result<_>>()?;
    results.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    for w in results.windows(2) {
        if w[0].source_id == w[1].source_id {
            return Err(Error::Data(format!("duplicate source id {}", w[0].source_id)));
        }
    }
    let pdir = out_dir.join("patches");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut manifest = Manifest::new(class_table(cfg), cfg.patch_channels.clone());
    for r in &results {
        for (k, p) in r.patches.iter().enumerate() {
            let rel = format!("patches/{}_{k:04}.afpt", r.source_id);
            save_patch(&p.patch, &out_dir.join(&rel))?;
            manifest.rows.push(ManifestRow {
                path: rel,
                label: p.label.clone(),
                group: r.source_id.clone(),
                cx: p.roi.cx,
                cy: p.roi.cy,
                area: p.roi.area,
                circularity: p.roi.circularity,
                shift_dx: r.applied_shift.0,
                shift_dy: r.applied_shift.1,
                threshold: r.threshold.value as f64,
                truth: None,
            });
        }
    }
    if manifest.rows.is_empty() {
        warn!("no cells detected in {} images", inputs.len());
    }
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok((manifest, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_fov, PhantomSpec};

    #[test]
    fn rounding_ties_go_down() {
        assert_eq!(round_half_down(2.5), 2);
        assert_eq!(round_half_down(-2.5), -3);
        assert_eq!(round_half_down(2.51), 3);
        assert_eq!(round_half_down(7.0), 7);
    }

    #[test]
    fn crop_window_boundaries() {
        assert_eq!(crop_window(512.0, 512.0, 64, 1024, 1024), Some((480, 480)));
        assert_eq!(crop_window(10.0, 10.0, 64, 1024, 1024), None);
        assert_eq!(crop_window(32.0, 32.0, 64, 1024, 1024), Some((0, 0)));
        assert_eq!(crop_window(992.0, 992.0, 64, 1024, 1024), Some((960, 960)));
        assert_eq!(crop_window(992.6, 40.0, 64, 1024, 1024), None);
    }

    #[test]
    fn apc_rule() {
        let size = 64;
        let disk = central_disk(size, 20.0);
        let n = disk.iter().filter(|&&d| d).count();
        assert!((n as f64 - 314.0).abs() <= 8.0, "{n}");
        let centre: Vec<f32> = disk.iter().map(|&d| if d { 3000.0 } else { 100.0 }).collect();
        assert!(apc_label(&centre, size, 20.0, Some(1000.0)));
        assert!(!apc_label(&vec![0.0; size * size], size, 20.0, None));
        let corner: Vec<f32> = (0..size * size)
            .map(|i| if i % size < 12 && i / size < 12 { 5000.0 } else { 100.0 })
            .collect();
        assert!(!apc_label(&corner, size, 20.0, Some(1000.0)));
    }

    #[test]
    fn small_phantom_round_trip() {
        let mut spec = PhantomSpec::segmentation(21);
        spec.width = 320;
        spec.height = 320;
        spec.n_cells = 15;
        spec.apc_shift = (4, -2);
        let (img, truth) = generate_fov(&spec, "fov").unwrap();
        let out = extract_image(&img, &ExtractConfig::default()).unwrap();
        assert_eq!(out.applied_shift, (-4, 2));
        assert!(out.patches.len() >= 14, "{}", out.patches.len());
        for p in &out.patches {
            let nearest = truth
                .iter()
                .min_by(|a, b| {
                    let da = (a.cx - p.roi.cx).hypot(a.cy - p.roi.cy);
                    let db = (b.cx - p.roi.cx).hypot(b.cy - p.roi.cy);
                    da.total_cmp(&db)
                })
                .unwrap();
            assert!((nearest.cx - p.roi.cx).hypot(nearest.cy - p.roi.cy) <= 2.0);
            let want = if spec.appearance.classes[nearest.class].apc_positive { APC_POSITIVE } else { APC_NEGATIVE };
            assert_eq!(p.label, want);
            assert_eq!(p.patch.data.len(), 3 * 64 * 64);
        }
    }

    #[test]
    fn class_mode_never_needs_apc() {
        let mut spec = PhantomSpec::segmentation(2);
        spec.width = 256;
        spec.height = 256;
        spec.n_cells = 6;
        spec.include_apc = false;
        let (img, _) = generate_fov(&spec, "f").unwrap();
        assert!(!img.has(Channel::Apc));
        let cfg = ExtractConfig {
            label_mode: LabelMode::Class("B_cell".into()),
            ..ExtractConfig::default()
        };
        let out = extract_image(&img, &cfg).unwrap();
        assert!(!out.patches.is_empty());
        assert!(out.patches.iter().all(|p| p.label == "B_cell"));
        assert!(matches!(extract_image(&img, &ExtractConfig::default()), Err(Error::Labeling(_))));
    }
}
