use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use afcyte::checkpoint;
use afcyte::datapipe::{export_folds, ChannelConfig, Dataset, MaskSpec, Standardization};
use afcyte::extraction::{extract_to_dir, ExtractConfig, LabelMode};
use afcyte::image::{parse_channel_list, sidecar_path, Channel};
use afcyte::manifest::Manifest;
use afcyte::metrics::{parse_records_csv, pr_curve, records_csv, render_report, Average};
use afcyte::perturb::{capacity_configurations, channel_configurations, run_sweep, spatial_configurations, SweepConfig, SweepKind};
use afcyte::synth::{generate_dataset, write_patch_dataset, NoiseLevel, PatchPhantomSpec, PhantomSpec, TruthLabels};
use afcyte::trainer::{blur_dataset, cross_validate, evaluate, fold_record, prepare_patch, write_fold_dir, Evaluation, Hyperparams, Task, Variant};
use afcyte::metrics::roc_curve;
use clap::parser::ValueSource;
use clap::ArgMatches;
use log::{info, warn};

use crate::run::{read_to_string, write, write_config, write_input_hashes, CliError, CliResult, RunLock};
use crate::{EvalArgs, ExtractArgs, HpArgs, PerturbArgs, ReportArgs, SynthArgs, TrainArgs};

/// The invoked subcommand and where each argument value came from.
pub struct Context {
    command: String,
    args: Vec<(String, String, String)>,
}

impl Context {
    pub fn new(command: &str, m: &ArgMatches, from_file: &BTreeSet<String>) -> Self {
        let mut ids: Vec<String> = m.ids().map(|i| i.as_str().to_string()).collect();
        ids.sort();
        let mut args = Vec::new();
        for id in ids {
            if id == "config" || id == "verbose" {
                continue;
            }
            let Ok(Some(raw)) = m.try_get_raw(&id) else { continue };
            let value = raw.map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>().join(",");
            let key = id.replace('_', "-");
            let source = if from_file.contains(&key) {
                "file"
            } else {
                match m.value_source(&id) {
                    Some(ValueSource::CommandLine) => "flag",
                    Some(ValueSource::EnvVariable) => "env",
                    _ => "default",
                }
            };
            args.push((key, value, source.to_string()));
        }
        Self {
            command: command.to_string(),
            args,
        }
    }

    fn write_config(&self, dir: &Path, resolved: &[(String, String)]) -> CliResult<()> {
        write_config(dir, &self.command, &self.args, resolved)
    }
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

pub fn synth(ctx: &Context, a: SynthArgs) -> CliResult<()> {
    let _lock = RunLock::acquire(&a.out)?;
    let noise = if a.noise == "high" { NoiseLevel::High } else { NoiseLevel::Low };
    if a.mode == "patches" {
        let spec = match a.preset.as_str() {
            "center" => PatchPhantomSpec::center_signal(a.seed, noise),
            "multiclass" => PatchPhantomSpec::multiclass(a.seed, noise),
            _ => PatchPhantomSpec::binary_separable(a.seed, noise),
        };
        if a.per_class == 0 {
            return Err(CliError::usage("--per-class must be at least 1"));
        }
        ctx.write_config(&a.out, &[])?;
        let m = write_patch_dataset(&spec, a.per_class, &a.out)?;
        println!("wrote {} patches in {} classes to {}", m.rows.len(), m.classes.len(), a.out.display());
    } else {
        let mut spec = PhantomSpec::segmentation(a.seed);
        spec.width = a.size;
        spec.height = a.size;
        spec.n_cells = a.cells;
        spec.apc_shift = (a.apc_shift_x, a.apc_shift_y);
        spec.appearance.noise_std = noise.std();
        spec.validate()?;
        ctx.write_config(&a.out, &[])?;
        let labels = if a.labels == "class" { TruthLabels::Class } else { TruthLabels::Apc };
        let m = generate_dataset(&spec, a.fovs, labels, &a.out)?;
        println!("wrote {} images with {} cells to {}", a.fovs, m.rows.len(), a.out.display());
    }
    Ok(())
}

fn extract_config(a: &ExtractArgs) -> CliResult<ExtractConfig> {
    let label_mode = match a.label.split_once(':') {
        None if a.label.eq_ignore_ascii_case("apc") => LabelMode::Apc,
        Some((k, name)) if k.eq_ignore_ascii_case("class") && !name.trim().is_empty() => LabelMode::Class(name.trim().to_string()),
        _ => return Err(CliError::usage(format!("--label must be apc or class:NAME, found '{}'", a.label))),
    };
    let mut threshold_overrides = BTreeMap::new();
    for o in &a.threshold_override {
        let parsed = o.split_once('=').and_then(|(id, v)| v.trim().parse::<u16>().ok().map(|v| (id.trim().to_string(), v)));
        match parsed {
            Some((id, v)) if !id.is_empty() => {
                threshold_overrides.insert(id, v);
            }
            _ => return Err(CliError::usage(format!("--threshold-override expects SOURCE_ID=VALUE, found '{o}'"))),
        }
    }
    let cfg = ExtractConfig {
        segmentation_channel: a.segmentation_channel.parse()?,
        patch_channels: parse_channel_list(&a.patch_channels)?,
        label_mode,
        min_area: a.min_area,
        circularity: (a.circularity_min, a.circularity_max),
        bright_cap: a.bright_cap,
        watershed_h: a.watershed_h,
        max_shift: a.max_shift,
        min_registration_score: a.min_registration_score,
        apc_disk_diameter: a.apc_diameter,
        threshold_overrides,
        ..ExtractConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn extract(ctx: &Context, a: ExtractArgs) -> CliResult<()> {
    let cfg = extract_config(&a)?;
    let channel_map: Option<Vec<Channel>> = a.channel_map.as_deref().map(parse_channel_list).transpose()?;
    for p in &a.inputs {
        if !p.is_file() {
            return Err(CliError::data(format!("input {} does not exist", p.display())));
        }
    }
    let _lock = RunLock::acquire(&a.out)?;
    let mut inputs = a.inputs.clone();
    inputs.extend(a.inputs.iter().map(|p| sidecar_path(p)).filter(|p| p.is_file()));
    write_input_hashes(&a.out, &inputs)?;
    ctx.write_config(&a.out, &[])?;

    let (manifest, results) = extract_to_dir(&a.inputs, channel_map.as_deref(), &cfg, &a.out)?;
    let mut s = String::from("source_id,otsu,threshold,capped,overridden,reg_dx,reg_dy,reg_score,reg_flagged,applied_dx,applied_dy,detected,edge_rejected,patches\n");
    for r in &results {
        let (dx, dy, score, flagged) = r.registration.as_ref().map_or((String::new(), String::new(), String::new(), String::new()), |g| {
            (g.dx.to_string(), g.dy.to_string(), format!("{:.6}", g.score), g.flagged.to_string())
        });
        if r.registration.as_ref().is_some_and(|g| g.flagged) {
            warn!("{}: registration score below threshold, APC plane left unshifted", r.source_id);
        }
        let _ = writeln!(
            s,
            "{},{},{},{},{},{dx},{dy},{score},{flagged},{},{},{},{},{}",
            r.source_id,
            r.threshold.otsu,
            r.threshold.value,
            r.threshold.capped,
            r.overridden,
            r.applied_shift.0,
            r.applied_shift.1,
            r.detected,
            r.edge_rejected,
            r.patches.len()
        );
    }
    write(&a.out.join("extraction.csv"), s)?;
    let labels = manifest.labels()?;
    let counts: Vec<String> = manifest
        .classes
        .iter()
        .enumerate()
        .map(|(k, c)| format!("{c}={}", labels.iter().filter(|&&l| l == k).count()))
        .collect();
    println!("extracted {} patches from {} images ({})", manifest.rows.len(), results.len(), counts.join(", "));
    Ok(())
}

fn hyperparams(a: &HpArgs) -> CliResult<Hyperparams> {
    let task: Task = a.task.parse()?;
    let mut hp = Hyperparams::for_task(task);
    macro_rules! set {
        ($($f:ident => $t:ident),*) => { $(if let Some(v) = a.$f { hp.$t = v; })* };
    }
    set!(epochs => epochs, lr => lr, batch_size => batch_size, dropout => dropout, label_smoothing => label_smoothing,
        weight_decay => weight_decay, augment_p => augment_p, swa_start => swa_start_fraction, blur_sigma => blur_sigma,
        class_weighting => class_weighting, threshold => threshold, folds => folds);
    if let Some(avg) = &a.average {
        hp.average = avg.parse::<Average>()?;
    }
    hp.seed = a.seed;
    hp.validate()?;
    Ok(hp)
}

fn variant(channels: &str, mask_mode: &str, diameter: f64, unfrozen: usize) -> CliResult<Variant> {
    let mask = match mask_mode.trim() {
        "none" | "" => None,
        m => Some(MaskSpec::new(diameter, m.parse()?)?),
    };
    if unfrozen > afcyte::model::FIRE_COUNT {
        return Err(CliError::usage(format!("--unfrozen-fires {unfrozen} exceeds {}", afcyte::model::FIRE_COUNT)));
    }
    Ok(Variant {
        channels: channels.parse()?,
        mask,
        unfrozen_fires: unfrozen,
    })
}

/// Loads a patch manifest and lists the files it references.
fn load_manifest(path: &Path) -> CliResult<(Manifest, PathBuf, Vec<PathBuf>)> {
    let m = Manifest::load(path)?;
    let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let mut files = vec![path.to_path_buf()];
    files.extend(m.rows.iter().map(|r| base.join(&r.path)));
    Ok((m, base, files))
}

fn load_dataset(path: &Path, out: &Path) -> CliResult<Dataset> {
    let (m, base, files) = load_manifest(path)?;
    write_input_hashes(out, &files)?;
    Ok(Dataset::from_manifest(&m, &base)?)
}

fn write_classes(dir: &Path, classes: &[String]) -> CliResult<()> {
    write(&dir.join("classes.txt"), classes.iter().map(|c| format!("{c}\n")).collect::<String>())
}

/// Per-row scores plus ROC and PR curves for binary tasks.
fn write_scores(dir: &Path, rows: &[usize], ev: &Evaluation, classes: &[String]) -> CliResult<()> {
    let mut s = String::from("row,label,prediction");
    for c in classes {
        let _ = write!(s, ",p_{c}");
    }
    s.push('\n');
    for ((r, sc), (l, p)) in rows.iter().zip(&ev.scores).zip(ev.labels.iter().zip(&ev.predictions)) {
        let _ = write!(s, "{r},{l},{p}");
        for v in sc {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    write(&dir.join("scores.csv"), s)?;
    if classes.len() == 2 {
        let truth: Vec<bool> = ev.labels.iter().map(|&l| l == 1).collect();
        let scores = ev.positive_scores();
        match (roc_curve(&scores, &truth), pr_curve(&scores, &truth)) {
            (Ok(roc), Ok(pr)) => {
                write(&dir.join("roc.csv"), roc.to_csv(("fpr", "tpr")))?;
                write(&dir.join("pr.csv"), pr.to_csv(("recall", "precision")))?;
            }
            _ => warn!("{}: one class only, curves skipped", dir.display()),
        }
    }
    Ok(())
}

pub fn train(ctx: &Context, a: TrainArgs) -> CliResult<()> {
    let hp = hyperparams(&a.hp)?;
    let var = variant(&a.channels, &a.mask_mode, a.mask_diameter, a.unfrozen_fires)?;
    let _lock = RunLock::acquire(&a.out)?;
    let mut resolved = hp.record();
    resolved.extend(var.record());
    ctx.write_config(&a.out, &resolved)?;
    let ds = load_dataset(&a.manifest, &a.out)?;
    info!("{} patches, class counts {:?}", ds.len(), ds.class_counts());
    let blurred = blur_dataset(&ds, hp.blur_sigma);
    let cv = cross_validate(&blurred, &hp, &var)?;

    let mut folds = Vec::new();
    export_folds(&cv.folds, &mut folds).map_err(|e| crate::run::io_err(&a.out.join("folds.csv"), e))?;
    write(&a.out.join("folds.csv"), folds)?;
    let mut bal = String::from("fold,val_rows");
    for c in &ds.classes {
        let _ = write!(bal, ",val_{c}");
    }
    bal.push_str(",deviation\n");
    for (i, (f, b)) in cv.folds.iter().zip(&cv.balance).enumerate() {
        let counts: Vec<String> = b.val_class_counts.iter().map(usize::to_string).collect();
        let _ = writeln!(bal, "{i},{},{},{:.6}", f.val.len(), counts.join(","), b.deviation);
    }
    write(&a.out.join("fold_balance.csv"), bal)?;

    for (i, (o, f)) in cv.outcomes.iter().zip(&cv.folds).enumerate() {
        let dir = a.out.join(format!("fold{i}"));
        write_fold_dir(&dir, o, &ds.classes, &hp, &var, hp.epochs)?;
        write_scores(&dir, &f.val, &o.evaluation, &ds.classes)?;
    }
    write(&a.out.join("metrics.csv"), records_csv(&cv.records))?;
    write_classes(&a.out, &ds.classes)?;
    let report = render_report(&ds.classes, &cv.records)?;
    write(&a.out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn eval(ctx: &Context, a: EvalArgs) -> CliResult<()> {
    let cfg = parse_kv(&read_to_string(&a.fold_dir.join("config.txt"))?);
    let get = |k: &str| cfg.get(k).ok_or_else(|| CliError::data(format!("{}/config.txt lacks '{k}'", a.fold_dir.display())));
    let bad = |k: &str| CliError::data(format!("{}/config.txt: bad value for '{k}'", a.fold_dir.display()));
    let mut hp = Hyperparams::for_task(get("task")?.parse()?);
    hp.threshold = get("threshold")?.parse().map_err(|_| bad("threshold"))?;
    hp.label_smoothing = get("label_smoothing")?.parse().map_err(|_| bad("label_smoothing"))?;
    hp.class_weighting = get("class_weighting")?.parse().map_err(|_| bad("class_weighting"))?;
    hp.blur_sigma = get("blur_sigma")?.parse().map_err(|_| bad("blur_sigma"))?;
    hp.average = get("average")?.parse()?;
    let diameter = match get("mask_diameter")?.as_str() {
        "none" => 20.0,
        d => d.parse().map_err(|_| bad("mask_diameter"))?,
    };
    let unfrozen = get("unfrozen_fires")?.parse().map_err(|_| bad("unfrozen_fires"))?;
    let var = variant(get("channels")?, get("mask_mode")?, diameter, unfrozen)?;
    let standardization = Standardization::from_csv(&read_to_string(&a.fold_dir.join("standardization.csv"))?)?;
    let ck = checkpoint::load(&a.fold_dir.join("checkpoint.afck"))?;

    let _lock = RunLock::acquire(&a.out)?;
    let mut resolved = hp.record();
    resolved.extend(var.record());
    ctx.write_config(&a.out, &resolved)?;
    let ds = load_dataset(&a.manifest, &a.out)?;
    let spec = ck.model.spec();
    let model_classes = if spec.is_binary() { 2 } else { spec.num_classes };
    if model_classes != ds.classes.len() {
        return Err(CliError::data(format!(
            "checkpoint predicts {model_classes} classes but the manifest has {}",
            ds.classes.len()
        )));
    }
    let blurred = blur_dataset(&ds, hp.blur_sigma);
    let patches = blurred
        .patches
        .iter()
        .map(|p| prepare_patch(p, &var, &standardization))
        .collect::<afcyte::Result<Vec<_>>>()?;
    let ev = evaluate(&ck.model, &patches, &ds.labels, model_classes, &hp)?;
    let record = fold_record(0, &ev, model_classes, &hp)?;
    let rows: Vec<usize> = (0..ds.len()).collect();
    write_scores(&a.out, &rows, &ev, &ds.classes)?;
    write(&a.out.join("metrics.csv"), records_csv(std::slice::from_ref(&record)))?;
    write_classes(&a.out, &ds.classes)?;
    let report = render_report(&ds.classes, &[record])?;
    write(&a.out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|_| CliError::usage(format!("--{flag}: cannot parse '{v}'"))))
        .collect()
}

pub fn perturb(ctx: &Context, a: PerturbArgs) -> CliResult<()> {
    let hp = hyperparams(&a.hp)?;
    let kind: SweepKind = a.kind.parse()?;
    let configurations = match kind {
        SweepKind::Spatial => spatial_configurations(&parse_list::<f64>("diameters", &a.diameters)?)?,
        SweepKind::Capacity => capacity_configurations(&parse_list::<usize>("unfrozen", &a.unfrozen)?)?,
        SweepKind::Channel => channel_configurations(&parse_list::<ChannelConfig>("channel-configs", &a.channel_configs)?),
    };
    let _lock = RunLock::acquire(&a.out)?;
    let mut resolved = hp.record();
    resolved.push(kv("sweep", kind));
    resolved.push(kv("configurations", configurations.iter().map(|c| c.id.as_str()).collect::<Vec<_>>().join(",")));
    ctx.write_config(&a.out, &resolved)?;
    let ds = load_dataset(&a.manifest, &a.out)?;
    let blurred = blur_dataset(&ds, hp.blur_sigma);
    let cfg = SweepConfig {
        kind,
        configurations,
        seed: hp.seed,
        base: hp,
    };
    let report = run_sweep(&blurred, &cfg)?;
    write(&a.out.join("sweep_folds.csv"), report.folds_csv())?;
    write(&a.out.join("sweep_summary.csv"), report.summary_csv())?;
    let text = report.text();
    write(&a.out.join("sweep.txt"), &text)?;
    print!("{text}");
    let failed = report.results.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        warn!("{failed} of {} configurations failed", report.results.len());
    }
    Ok(())
}

/// Plain table of a sweep summary file.
fn render_sweep_summary(text: &str) -> CliResult<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| CliError::data(format!("sweep summary lacks '{name}'")));
    let (cfg, status, mean, std, n, params) = (col("configuration")?, col("status")?, col("roc_auc_mean")?, col("roc_auc_std")?, col("n_folds")?, col("param_count")?);
    let mut s = format!("{:<22} {:>8} {:>8} {:>6} {:>9}\n", "configuration", "mean", "std", "folds", "params");
    for l in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != header.len() {
            return Err(CliError::data(format!("sweep summary row has {} fields, expected {}", f.len(), header.len())));
        }
        if f[status] == "ok" {
            let dash = |v: &str| if v.is_empty() { "-".to_string() } else { v.to_string() };
            let _ = writeln!(s, "{:<22} {:>8} {:>8} {:>6} {:>9}", f[cfg], dash(f[mean]), dash(f[std]), f[n], f[params]);
        } else {
            let _ = writeln!(s, "{:<22} FAILED", f[cfg]);
        }
    }
    Ok(s)
}

pub fn report(a: ReportArgs) -> CliResult<()> {
    let metrics = a.run.join("metrics.csv");
    let summary = a.run.join("sweep_summary.csv");
    let text = if metrics.is_file() {
        let records = parse_records_csv(&read_to_string(&metrics)?)?;
        let classes: Vec<String> = read_to_string(&a.run.join("classes.txt"))?.lines().map(String::from).collect();
        let text = render_report(&classes, &records)?;
        write(&a.run.join("report.txt"), &text)?;
        text
    } else if summary.is_file() {
        render_sweep_summary(&read_to_string(&summary)?)?
    } else {
        return Err(CliError::data(format!("{} holds neither metrics.csv nor sweep_summary.csv", a.run.display())));
    };
    print!("{text}");
    Ok(())
}
