//! Seeded synthetic phantoms: full field-of-view images with known cell
//! positions and classes, and directly rendered single-cell patches.
//!
//! Each cell is an isotropic Gaussian profile (sigma = radius) cut off by a
//! hard disk of the cell radius. NADH and FAD amplitudes are drawn per cell
//! from the class distribution. The Dodt plane shows a class-independent
//! horizontal ramp across each cell silhouette. APC is a flat disk drawn
//! only for APC-positive classes.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{save_afim, save_patch, Channel, MultiChannelImage, PatchData};
use crate::manifest::{Manifest, ManifestRow, Truth};
use crate::model::PATCH_SIZE;
use crate::rng::{self, StreamRng};

pub const MAX_PACKING_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intensity {
    pub mean: f64,
    pub std: f64,
}

impl Intensity {
    pub const fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    fn sample(&self, rng: &mut StreamRng) -> f64 {
        let n = Normal::new(self.mean, self.std.max(0.0)).expect("finite intensity");
        n.sample(rng).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDef {
    pub name: String,
    pub nadh: Intensity,
    pub fad: Intensity,
    /// Radius range in pixels, inclusive.
    pub radius: (f64, f64),
    pub apc_positive: bool,
    /// Relative frequency among cells.
    pub weight: f64,
}

impl ClassDef {
    pub fn new(name: &str, nadh: Intensity, fad: Intensity, radius: (f64, f64), apc_positive: bool) -> Self {
        Self {
            name: name.into(),
            nadh,
            fad,
            radius,
            apc_positive,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseLevel {
    Low,
    High,
}

impl NoiseLevel {
    pub fn std(self) -> f64 {
        match self {
            NoiseLevel::Low => 40.0,
            NoiseLevel::High => 200.0,
        }
    }
}

/// Rendering parameters shared by FOV and direct-patch generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    pub classes: Vec<ClassDef>,
    pub background: f64,
    pub noise_std: f64,
    pub dodt_background: f64,
    /// Peak ramp amplitude across a cell in the Dodt plane.
    pub dodt_gradient: f64,
    pub apc_background: f64,
    pub apc_level: f64,
}

impl Appearance {
    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes.is_empty() {
            problems.push("no classes defined".to_string());
        }
        for c in &self.classes {
            for (what, v) in [("NADH", c.nadh), ("FAD", c.fad)] {
                if !(0.0..=65535.0).contains(&v.mean) {
                    problems.push(format!("class {}: {what} mean {} outside 16-bit range", c.name, v.mean));
                }
            }
            if !(c.radius.0 > 0.0 && c.radius.0 <= c.radius.1) {
                problems.push(format!("class {}: bad radius range {:?}", c.name, c.radius));
            }
            if c.weight <= 0.0 {
                problems.push(format!("class {}: weight must be positive", c.name));
            }
        }
        if self.noise_std < 0.0 {
            problems.push("noise std must be non-negative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }

    pub fn max_radius(&self) -> f64 {
        self.classes.iter().map(|c| c.radius.1).fold(0.0, f64::max)
    }

    fn pick_class(&self, rng: &mut StreamRng) -> usize {
        let total: f64 = self.classes.iter().map(|c| c.weight).sum();
        let mut u = rng.random::<f64>() * total;
        for (i, c) in self.classes.iter().enumerate() {
            if u < c.weight {
                return i;
            }
            u -= c.weight;
        }
        self.classes.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub n_cells: usize,
    pub appearance: Appearance,
    pub min_distance: f64,
    /// Minimum distance from a cell centre to the image border.
    pub edge_margin: f64,
    pub include_apc: bool,
    /// Misregistration of the APC plane, in pixels.
    pub apc_shift: (i32, i32),
    pub seed: u64,
}

impl PhantomSpec {
    /// Two classes with moderate NADH/FAD contrast, APC on one of them, and
    /// cells kept 34 px from the border so every cell yields a full patch.
    pub fn segmentation(seed: u64) -> Self {
        let radius = (7.0, 10.0);
        Self {
            width: 1024,
            height: 1024,
            n_cells: 50,
            appearance: Appearance {
                classes: vec![
                    ClassDef::new("T_cell", Intensity::new(2400.0, 300.0), Intensity::new(1600.0, 200.0), radius, true),
                    ClassDef::new("other", Intensity::new(1400.0, 200.0), Intensity::new(1200.0, 150.0), radius, false),
                ],
                background: 400.0,
                noise_std: NoiseLevel::Low.std(),
                dodt_background: 1000.0,
                dodt_gradient: 300.0,
                apc_background: 100.0,
                apc_level: 3000.0,
            },
            min_distance: 2.0 * radius.1 + 6.0,
            edge_margin: 34.0,
            include_apc: true,
            apc_shift: (0, 0),
            seed,
        }
    }

    /// True when the minimum centre distance rules out touching cells.
    pub fn non_overlapping(&self) -> bool {
        self.min_distance >= 2.0 * self.appearance.max_radius()
    }

    pub fn validate(&self) -> Result<()> {
        self.appearance.validate()?;
        let mut problems = Vec::new();
        if self.width < 2 * PATCH_SIZE || self.height < 2 * PATCH_SIZE {
            problems.push(format!("image {}x{} smaller than 128x128", self.width, self.height));
        }
        if 2.0 * self.edge_margin >= self.width.min(self.height) as f64 {
            problems.push("edge margin leaves no room for cells".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthCell {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub class: usize,
}

struct Canvas {
    width: usize,
    height: usize,
    nadh: Vec<f64>,
    fad: Vec<f64>,
    dodt: Vec<f64>,
    apc: Vec<f64>,
}

impl Canvas {
    fn new(width: usize, height: usize, a: &Appearance) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            nadh: vec![a.background; n],
            fad: vec![a.background; n],
            dodt: vec![a.dodt_background; n],
            apc: vec![a.apc_background; n],
        }
    }

    /// Visits pixels whose centre lies within `r` of `(cx, cy)`.
    fn disk(&self, cx: f64, cy: f64, r: f64, mut f: impl FnMut(usize, f64, f64)) {
        let x0 = (cx - r).floor().max(0.0) as usize;
        let y0 = (cy - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as i64).clamp(0, self.width as i64 - 1) as usize;
        let y1 = ((cy + r).ceil() as i64).clamp(0, self.height as i64 - 1) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    f(y * self.width + x, dx, dy);
                }
            }
        }
    }

    fn cell(&mut self, c: &TruthCell, nadh_amp: f64, fad_amp: f64, a: &Appearance, apc_at: Option<(f64, f64)>) {
        let r = c.radius;
        let mut nadh = std::mem::take(&mut self.nadh);
        let mut fad = std::mem::take(&mut self.fad);
        let mut dodt = std::mem::take(&mut self.dodt);
        self.disk(c.cx, c.cy, r, |i, dx, dy| {
            let profile = (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
            nadh[i] += nadh_amp * profile;
            fad[i] += fad_amp * profile;
            dodt[i] += a.dodt_gradient * dx / r;
        });
        self.nadh = nadh;
        self.fad = fad;
        self.dodt = dodt;
        if let Some((ax, ay)) = apc_at {
            let mut apc = std::mem::take(&mut self.apc);
            self.disk(ax, ay, r, |i, _, _| apc[i] += a.apc_level);
            self.apc = apc;
        }
    }

    fn finish(self, noise_std: f64, rng: &mut StreamRng, keep_apc: bool) -> Vec<(Channel, Vec<u16>)> {
        let noise = Normal::new(0.0, noise_std).expect("finite noise");
        let mut quantize = |plane: Vec<f64>| -> Vec<u16> {
            plane
                .into_iter()
                .map(|v| (v + noise.sample(rng)).round().clamp(0.0, 65535.0) as u16)
                .collect()
        };
        let mut out = vec![
            (Channel::Nadh, quantize(self.nadh)),
            (Channel::Fad, quantize(self.fad)),
            (Channel::Dodt, quantize(self.dodt)),
        ];
        if keep_apc {
            out.push((Channel::Apc, quantize(self.apc)));
        }
        out
    }
}

fn place_cells(spec: &PhantomSpec, rng: &mut StreamRng) -> Result<Vec<TruthCell>> {
    let a = &spec.appearance;
    let mut cells: Vec<TruthCell> = Vec::with_capacity(spec.n_cells);
    let (w, h, m) = (spec.width as f64, spec.height as f64, spec.edge_margin);
    for _ in 0..MAX_PACKING_ATTEMPTS {
        if cells.len() == spec.n_cells {
            break;
        }
        let class = a.pick_class(rng);
        let (r0, r1) = a.classes[class].radius;
        let radius = if r1 > r0 { rng.random_range(r0..=r1) } else { r0 };
        let cx = rng.random_range(m..w - m);
        let cy = rng.random_range(m..h - m);
        let clear = cells.iter().all(|c| (c.cx - cx).hypot(c.cy - cy) >= spec.min_distance);
        if clear {
            cells.push(TruthCell { cx, cy, radius, class });
        }
    }
    if cells.len() < spec.n_cells {
        return Err(Error::Parameter(format!(
            "packing infeasible: placed {} of {} cells in {MAX_PACKING_ATTEMPTS} attempts",
            cells.len(),
            spec.n_cells
        )));
    }
    Ok(cells)
}

/// Renders one field of view. The same spec always yields the same pixels.
pub fn generate_fov(spec: &PhantomSpec, source_id: &str) -> Result<(MultiChannelImage, Vec<TruthCell>)> {
    spec.validate()?;
    let a = &spec.appearance;
    let mut rng = rng::stream(spec.seed, "fov");
    let cells = place_cells(spec, &mut rng)?;
    let mut canvas = Canvas::new(spec.width, spec.height, a);
    for c in &cells {
        let class = &a.classes[c.class];
        let nadh = class.nadh.sample(&mut rng);
        let fad = class.fad.sample(&mut rng);
        let apc = (spec.include_apc && class.apc_positive)
            .then(|| (c.cx + spec.apc_shift.0 as f64, c.cy + spec.apc_shift.1 as f64));
        canvas.cell(c, nadh, fad, a, apc);
    }
    let planes = canvas.finish(a.noise_std, &mut rng, spec.include_apc);
    let img = MultiChannelImage::new(spec.width, spec.height, planes, source_id)?;
    Ok((img, cells))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthLabels {
    /// Rows labelled with the class name.
    Class,
    /// Rows labelled `positive` / `negative` from the class APC flag.
    Apc,
}

pub const APC_POSITIVE: &str = "positive";
pub const APC_NEGATIVE: &str = "negative";

/// Writes `n_fovs` images (`fov_###.afim`) and `truth.csv` into `dir`. FOV
/// `i` uses the seed derived from `(spec.seed, i)`.
pub fn generate_dataset(spec: &PhantomSpec, n_fovs: usize, labels: TruthLabels, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fovs: Vec<Result<(String, Vec<TruthCell>)>> = (0..n_fovs)
        .into_par_iter()
        .map(|i| {
            let id = format!("fov_{i:03}");
            let mut s = spec.clone();
            s.seed = rng::derive_seed(spec.seed, &id);
            let (img, cells) = generate_fov(&s, &id)?;
            save_afim(&img, &dir.join(format!("{id}.afim")))?;
            Ok((id, cells))
        })
        .collect();
    let classes = match labels {
        TruthLabels::Class => spec.appearance.classes.iter().map(|c| c.name.clone()).collect(),
        TruthLabels::Apc => vec![APC_NEGATIVE.to_string(), APC_POSITIVE.to_string()],
    };
    let mut channels = vec![Channel::Nadh, Channel::Fad, Channel::Dodt];
    if spec.include_apc {
        channels.push(Channel::Apc);
    }
    let mut manifest = Manifest::new(classes, channels);
    for fov in fovs {
        let (id, cells) = fov?;
        for (k, c) in cells.iter().enumerate() {
            let class = &spec.appearance.classes[c.class];
            let label = match labels {
                TruthLabels::Class => class.name.clone(),
                TruthLabels::Apc if class.apc_positive => APC_POSITIVE.into(),
                TruthLabels::Apc => APC_NEGATIVE.into(),
            };
            manifest.rows.push(ManifestRow {
                path: format!("{id}.afim#{k}"),
                label,
                group: id.clone(),
                cx: c.cx,
                cy: c.cy,
                area: disk_area(c.cx, c.cy, c.radius),
                circularity: 1.0,
                shift_dx: 0,
                shift_dy: 0,
                threshold: 0.0,
                truth: Some(Truth {
                    cx: c.cx,
                    cy: c.cy,
                    radius: c.radius,
                }),
            });
        }
    }
    manifest.save(&dir.join("truth.csv"))?;
    Ok(manifest)
}

/// Pixel count of a rasterized disk (pixel centres within `r`).
pub fn disk_area(cx: f64, cy: f64, r: f64) -> usize {
    let mut n = 0;
    let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
    let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                n += 1;
            }
        }
    }
    n
}

/// Direct single-cell patch synthesis, bypassing extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPhantomSpec {
    pub appearance: Appearance,
    /// Uniform offset of the cell centre from the patch centre, in pixels.
    pub center_jitter: f64,
    /// Consecutive patches sharing one pseudo field-of-view group.
    pub patches_per_group: usize,
    pub seed: u64,
}

impl PatchPhantomSpec {
    /// NADH and FAD both about 3x brighter in class `A`; Dodt and radius
    /// distributions identical across classes.
    pub fn binary_separable(seed: u64, noise: NoiseLevel) -> Self {
        let radius = (8.0, 11.0);
        Self {
            appearance: Appearance {
                classes: vec![
                    ClassDef::new("A", Intensity::new(3000.0, 300.0), Intensity::new(2100.0, 200.0), radius, true),
                    ClassDef::new("B", Intensity::new(1000.0, 150.0), Intensity::new(700.0, 100.0), radius, false),
                ],
                background: 400.0,
                noise_std: noise.std(),
                dodt_background: 1000.0,
                dodt_gradient: 300.0,
                apc_background: 100.0,
                apc_level: 3000.0,
            },
            center_jitter: 3.0,
            patches_per_group: 20,
            seed,
        }
    }

    /// Cells of radius 6..10 centred exactly on the patch centre, so all
    /// class signal lies inside the central 20 px disk.
    pub fn center_signal(seed: u64, noise: NoiseLevel) -> Self {
        let mut s = Self::binary_separable(seed, noise);
        for c in &mut s.appearance.classes {
            c.radius = (6.0, 10.0);
        }
        s.center_jitter = 0.0;
        s
    }

    /// Four classes separated by NADH/FAD ratio rather than brightness alone.
    pub fn multiclass(seed: u64, noise: NoiseLevel) -> Self {
        let radius = (8.0, 11.0);
        let mut s = Self::binary_separable(seed, noise);
        s.appearance.classes = vec![
            ClassDef::new("B_cell", Intensity::new(2800.0, 250.0), Intensity::new(900.0, 100.0), radius, false),
            ClassDef::new("T_cell", Intensity::new(1000.0, 120.0), Intensity::new(2600.0, 250.0), radius, true),
            ClassDef::new("monocyte", Intensity::new(2600.0, 250.0), Intensity::new(2400.0, 250.0), radius, false),
            ClassDef::new("NK_cell", Intensity::new(900.0, 100.0), Intensity::new(800.0, 100.0), radius, false),
        ];
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPatch {
    pub patch: PatchData,
    pub class: usize,
    pub group: String,
    pub truth: Truth,
}

fn render_patch(spec: &PatchPhantomSpec, index: usize, class: usize) -> SynthPatch {
    let a = &spec.appearance;
    let mut rng = rng::stream(spec.seed, &format!("patch-{index}"));
    let def = &a.classes[class];
    let centre = (PATCH_SIZE as f64 - 1.0) / 2.0;
    let j = spec.center_jitter;
    let (ox, oy) = if j > 0.0 {
        (rng.random_range(-j..=j), rng.random_range(-j..=j))
    } else {
        (0.0, 0.0)
    };
    let (r0, r1) = def.radius;
    let radius = if r1 > r0 { rng.random_range(r0..=r1) } else { r0 };
    let cell = TruthCell {
        cx: centre + ox,
        cy: centre + oy,
        radius,
        class,
    };
    let mut canvas = Canvas::new(PATCH_SIZE, PATCH_SIZE, a);
    let nadh = def.nadh.sample(&mut rng);
    let fad = def.fad.sample(&mut rng);
    canvas.cell(&cell, nadh, fad, a, None);
    let planes = canvas.finish(a.noise_std, &mut rng, false);
    let channels = planes.iter().map(|(c, _)| *c).collect();
    let data = planes.into_iter().flat_map(|(_, p)| p.into_iter().map(f32::from)).collect();
    SynthPatch {
        patch: PatchData {
            width: PATCH_SIZE,
            height: PATCH_SIZE,
            channels,
            data,
        },
        class,
        group: format!("fov_{:03}", index / spec.patches_per_group.max(1)),
        truth: Truth {
            cx: cell.cx,
            cy: cell.cy,
            radius,
        },
    }
}

/// `per_class` patches of every class, interleaved by class. Patch `i` is
/// rendered from its own stream derived from `(seed, i)`.
pub fn generate_patches(spec: &PatchPhantomSpec, per_class: usize) -> Result<Vec<SynthPatch>> {
    spec.appearance.validate()?;
    let k = spec.appearance.classes.len();
    Ok((0..per_class * k)
        .into_par_iter()
        .map(|i| render_patch(spec, i, i % k))
        .collect())
}

/// Writes patches under `dir/patches/` and a manifest at `dir/manifest.csv`
/// whose paths are relative to `dir`.
pub fn write_patch_dataset(spec: &PatchPhantomSpec, per_class: usize, dir: &Path) -> Result<Manifest> {
    let patches = generate_patches(spec, per_class)?;
    let pdir = dir.join("patches");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let classes = spec.appearance.classes.iter().map(|c| c.name.clone()).collect();
    let mut manifest = Manifest::new(classes, vec![Channel::Nadh, Channel::Fad, Channel::Dodt]);
    for (i, p) in patches.iter().enumerate() {
        let rel = format!("patches/p{i:05}.afpt");
        save_patch(&p.patch, &dir.join(&rel))?;
        manifest.rows.push(ManifestRow {
            path: rel,
            label: spec.appearance.classes[p.class].name.clone(),
            group: p.group.clone(),
            cx: p.truth.cx,
            cy: p.truth.cy,
            area: disk_area(p.truth.cx, p.truth.cy, p.truth.radius),
            circularity: 1.0,
            shift_dx: 0,
            shift_dy: 0,
            threshold: 0.0,
            truth: Some(p.truth),
        });
    }
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
