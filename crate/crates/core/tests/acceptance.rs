//! End-to-end acceptance checks, one per criterion. Prints a PASS/FAIL line
//! for each and exits non-zero if any fails.

#[path = "../../tensor/tests/support/layers.rs"]
mod layers;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use afcyte::checkpoint::{self, TrainingMeta};
use afcyte::datapipe::{stratified_group_kfold, ChannelConfig, Dataset, MaskMode, MaskSpec};
use afcyte::extraction::{extract_image, extract_to_dir, otsu::otsu_from_histogram, ExtractConfig};
use afcyte::metrics::{basic_metrics, mcc, render_report, roc_curve, Average, ConfusionMatrix};
use afcyte::model::{Block, Model, ModelSpec, FIRE_COUNT};
use afcyte::perturb::{channel_configurations, run_sweep, Configuration, SweepConfig, SweepKind};
use afcyte::synth::{generate_dataset, generate_fov, generate_patches, NoiseLevel, PatchPhantomSpec, PhantomSpec, TruthLabels};
use afcyte::trainer::{blur_dataset, cross_validate, Hyperparams, Variant};
use afcyte_tensor::{numeric_check, GradCheckConfig, Tape, Tensor};
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

/// One random full-model instance: loss gradient w.r.t. the input and a
/// random sample of parameter elements, checked by central differences.
/// The network is piecewise linear with thousands of ReLU and max-pool
/// switch points, so the step is small enough not to straddle them.
fn full_model_instance(rng: &mut ChaCha8Rng) -> f64 {
    let channels = rng.random_range(1..=3);
    let classes = if rng.random_bool(0.5) { 2 } else { rng.random_range(3..=5) };
    let dropout = if rng.random_bool(0.5) { 0.1 } else { 0.0 };
    let spec = ModelSpec::new(channels, classes).with_dropout(dropout);
    let model = Model::<f64>::build(spec.clone(), rng.random()).unwrap();
    let x = layers::tensor(rng, &[2, channels, 64, 64], true);
    let targets: Vec<usize> = (0..2).map(|_| rng.random_range(0..classes)).collect();
    let smoothing = rng.random_range(0.0..0.2);
    let mask_seed: u64 = rng.random();

    let loss_of = |inputs: &[Tensor<f64>]| -> afcyte_tensor::Result<f64> {
        let m = Model::from_parts(spec.clone(), inputs[1..].to_vec()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(inputs[0].clone().with_requires_grad(false));
        let fw = m.forward(&mut tape, xv, true, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();
        let l = tape.cross_entropy_probs(fw.output, &targets, smoothing, None)?;
        Ok(tape.value(l).data()[0])
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let fw = model.forward(&mut tape, xv, true, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();
    let l = tape.cross_entropy_probs(fw.output, &targets, smoothing, None).unwrap();
    tape.backward(l).unwrap();

    let mut inputs = vec![x];
    inputs.extend(model.tensors().into_iter().cloned());
    let mut analytic = vec![tape.grad(xv).unwrap().to_vec()];
    analytic.extend(fw.params.iter().map(|&p| tape.grad(p).unwrap().to_vec()));
    let mut selection: Vec<Option<Vec<usize>>> = vec![None; inputs.len()];
    selection[0] = Some((0..4).map(|_| rng.random_range(0..inputs[0].numel())).collect());
    for _ in 0..8 {
        let k = rng.random_range(1..inputs.len());
        let idx = rng.random_range(0..inputs[k].numel());
        selection[k].get_or_insert_with(Vec::new).push(idx);
    }
    let cfg = GradCheckConfig {
        step: 1e-6,
        ..GradCheckConfig::default()
    };
    numeric_check(&inputs, &analytic, &selection, loss_of, cfg)
        .unwrap()
        .max_rel_error()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = Vec::new();
    for (i, (name, case)) in layers::LAYERS.iter().enumerate() {
        worst.push((name.to_string(), layers::check_layer(*case, 20, 7000 + i as u64).map_err(|e| e.to_string())?));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let model_worst = (0..20).map(|_| full_model_instance(&mut rng)).fold(0.0, f64::max);
    worst.push(("full model".into(), model_worst));
    let elapsed = start.elapsed();
    let (name, max) = worst.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    check(
        max < 1e-3 && elapsed < Duration::from_secs(120),
        format!("{} checks x 20 instances, worst {max:.2e} ({name}), {:.1}s", worst.len(), elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let m = Model::<f32>::build(ModelSpec::new(3, 2), 0).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    if m.trainable_params() != 735_936 {
        problems.push(format!("trainable {}", m.trainable_params()));
    }
    let mut want = vec![(Block::Stem, 14_208)];
    let fires = [11_920, 12_432, 45_344, 49_440, 104_880, 111_024, 188_992, 197_184];
    want.extend(fires.iter().enumerate().map(|(i, &n)| (Block::Fire(i), n)));
    want.push((Block::Classifier, 512));
    if m.block_params() != want {
        problems.push(format!("blocks {:?}", m.block_params()));
    }
    let shapes: [(&str, [usize; 3]); 13] = [
        ("features", [96, 32, 32]),
        ("maxpool1", [96, 16, 16]),
        ("fire1", [128, 16, 16]),
        ("fire2", [128, 16, 16]),
        ("fire3", [256, 16, 16]),
        ("maxpool2", [256, 8, 8]),
        ("fire4", [256, 8, 8]),
        ("fire5", [384, 8, 8]),
        ("fire6", [384, 8, 8]),
        ("fire7", [512, 8, 8]),
        ("maxpool3", [512, 4, 4]),
        ("fire8", [512, 4, 4]),
        ("classifier", [1, 1, 1]),
    ];
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 3, 64, 64]));
    let fw = m.forward(&mut tape, x, false, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    let got: Vec<(String, Vec<usize>)> = fw.stages.iter().map(|(n, v)| (n.clone(), tape.value(*v).shape()[1..].to_vec())).collect();
    let want_shapes: Vec<(String, Vec<usize>)> = shapes.iter().map(|(n, s)| (n.to_string(), s.to_vec())).collect();
    if got != want_shapes {
        problems.push(format!("stages {got:?}"));
    }
    if tape.value(fw.output).shape() != [1, 1] {
        problems.push(format!("output {:?}", tape.value(fw.output).shape()));
    }
    check(problems.is_empty(), if problems.is_empty() { "735,936 parameters, 10 blocks and 13 stage shapes match".into() } else { problems.join("; ") })
}

// ---------------------------------------------------------------- 3

/// Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie), by brute force.
fn rank_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
    }
    num / pairs
}

fn oracle_mcc(cm: &ConfusionMatrix) -> f64 {
    // Pearson correlation of one-hot truth and prediction vectors
    let k = cm.classes;
    let n = cm.total() as f64;
    let (mut cov_tp, mut cov_tt, mut cov_pp) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let t = cm.row_sum(c) as f64 / n;
        let p = cm.col_sum(c) as f64 / n;
        cov_tp += cm.get(c, c) as f64 / n - t * p;
        cov_tt += t - t * t;
        cov_pp += p - p * p;
    }
    if cov_tt * cov_pp == 0.0 {
        0.0
    } else {
        cov_tp / (cov_tt * cov_pp).sqrt()
    }
}

fn div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Precision, recall and F1 of class `c` from raw counts.
fn oracle_prf(cm: &ConfusionMatrix, c: usize) -> (f64, f64, f64) {
    let tp = cm.get(c, c) as f64;
    let fp: f64 = (0..cm.classes).filter(|&r| r != c).map(|r| cm.get(r, c) as f64).sum();
    let fn_: f64 = (0..cm.classes).filter(|&p| p != c).map(|p| cm.get(c, p) as f64).sum();
    (div(tp, tp + fp), div(tp, tp + fn_), div(2.0 * tp, 2.0 * tp + fp + fn_))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_auc: f64 = 0.0;
    for i in 0..200 {
        let n = rng.random_range(2..120);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        // every other instance draws from a small set so ties are common
        let scores: Vec<f64> = (0..n)
            .map(|_| if i % 2 == 0 { rng.random() } else { rng.random_range(0..5) as f64 / 4.0 })
            .collect();
        let auc = roc_curve(&scores, &labels).map_err(|e| e.to_string())?.auc;
        worst_auc = worst_auc.max((auc - rank_auc(&scores, &labels)).abs());
    }

    let mut worst_metric: f64 = 0.0;
    let mut cases = 0;
    let mut compare = |cm: &ConfusionMatrix, avg: Average| {
        let Ok(m) = basic_metrics(cm, avg) else { return };
        let classes: Vec<usize> = if avg == Average::Binary && cm.classes == 2 { vec![1] } else { (0..cm.classes).collect() };
        let per: Vec<(f64, f64, f64)> = classes.iter().map(|&c| oracle_prf(cm, c)).collect();
        let k = per.len() as f64;
        let p = per.iter().map(|x| x.0).sum::<f64>() / k;
        let r = per.iter().map(|x| x.1).sum::<f64>() / k;
        let f = per.iter().map(|x| x.2).sum::<f64>() / k;
        for (a, b) in [(m.precision, p), (m.recall, r), (m.f1, f), (mcc(cm).0, oracle_mcc(cm))] {
            worst_metric = worst_metric.max((a - b).abs());
        }
        cases += 1;
    };
    for a in 0..=5u64 {
        for b in 0..=5u64 {
            for c in 0..=5u64 {
                for d in 0..=5u64 {
                    compare(&ConfusionMatrix::from_rows(&[vec![a, b], vec![c, d]]).unwrap(), Average::Binary);
                }
            }
        }
    }
    for _ in 0..500 {
        let rows: Vec<Vec<u64>> = (0..6).map(|_| (0..6).map(|_| rng.random_range(0..20)).collect()).collect();
        compare(&ConfusionMatrix::from_rows(&rows).unwrap(), Average::Macro);
    }
    check(
        worst_auc <= 1e-9 && worst_metric <= 1e-12,
        format!("AUC gap {worst_auc:.1e} over 200 instances; metric gap {worst_metric:.1e} over {cases} matrices"),
    )
}

// ---------------------------------------------------------------- 4

/// First threshold maximizing n0*n1*(mean0 - mean1)^2, compared exactly.
fn exhaustive_otsu(hist: &[u64]) -> Option<u16> {
    let mut best: Option<(usize, BigUint, BigUint)> = None;
    for t in 0..hist.len() {
        let (n0, s0) = hist[..=t].iter().enumerate().fold((0u64, 0u64), |(n, s), (v, &c)| (n + c, s + v as u64 * c));
        let (n1, s1) = hist[t + 1..].iter().enumerate().fold((0u64, 0u64), |(n, s), (v, &c)| (n + c, s + (v + t + 1) as u64 * c));
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // n0*n1*(s0/n0 - s1/n1)^2 = (s0*n1 - s1*n0)^2 / (n0*n1)
        let d = (s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128).unsigned_abs();
        let num = BigUint::from(d) * BigUint::from(d);
        let den = BigUint::from(n0) * BigUint::from(n1);
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    best.map(|b| b.0 as u16)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = Vec::new();
    for i in 0..100 {
        let bins = rng.random_range(2..=512);
        let hist: Vec<u64> = match i % 3 {
            0 => (0..bins).map(|_| rng.random_range(0..1000)).collect(),
            1 => (0..bins).map(|_| if rng.random_bool(0.2) { rng.random_range(1..50_000) } else { 0 }).collect(),
            // two bumps, the usual image case
            _ => {
                let (a, b) = (rng.random_range(0..bins / 2), rng.random_range(bins / 2..bins));
                (0..bins)
                    .map(|v| {
                        let g = |m: usize| (-((v as f64 - m as f64) / 6.0).powi(2)).exp();
                        (3000.0 * g(a) + 1000.0 * g(b)) as u64 + rng.random_range(0..3)
                    })
                    .collect()
            }
        };
        let got = otsu_from_histogram(&hist).ok();
        let want = exhaustive_otsu(&hist);
        if got != want {
            mismatches.push(format!("#{i}: {got:?} vs {want:?}"));
        }
    }
    check(mismatches.is_empty(), if mismatches.is_empty() { "100 histograms match exactly".into() } else { mismatches.join(", ") })
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in [11u64, 12, 13] {
        let spec = PhantomSpec::segmentation(seed);
        if !spec.non_overlapping() || spec.n_cells != 50 {
            return Err("phantom spec is not 50 non-overlapping cells".into());
        }
        let (img, truth) = generate_fov(&spec, &format!("fov{seed}")).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let ex = extract_image(&img, &ExtractConfig::default()).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        let mut max_err: f64 = 0.0;
        let mut matched = BTreeSet::new();
        let mut oob = 0;
        for p in &ex.patches {
            let (k, d) = truth
                .iter()
                .enumerate()
                .map(|(k, t)| (k, ((t.cx - p.roi.cx).powi(2) + (t.cy - p.roi.cy).powi(2)).sqrt()))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            matched.insert(k);
            max_err = max_err.max(d);
            let x0 = p.roi.cx.round() - 32.0;
            let y0 = p.roi.cy.round() - 32.0;
            let inside = x0 >= -1.0 && y0 >= -1.0 && x0 + 64.0 <= img.width as f64 + 1.0 && y0 + 64.0 <= img.height as f64 + 1.0;
            if p.patch.width != 64 || p.patch.height != 64 || !inside {
                oob += 1;
            }
        }
        let pass = ex.patches.len() >= 45 && matched.len() == ex.patches.len() && max_err <= 2.0 && oob == 0 && secs < 30.0;
        ok &= pass;
        lines.push(format!("seed {seed}: {} patches, centroid error {max_err:.2} px, {oob} out of bounds, {secs:.1}s", ex.patches.len()));
    }
    check(ok, lines.join("; "))
}

// ---------------------------------------------------------------- 6, 7

fn binary_phantom() -> Dataset {
    let spec = PatchPhantomSpec::binary_separable(7, NoiseLevel::Low);
    let classes = spec.appearance.classes.iter().map(|c| c.name.clone()).collect();
    Dataset::from_synth(classes, generate_patches(&spec, 500).unwrap()).unwrap()
}

/// Default binary settings with a short schedule.
fn short_binary(epochs: usize) -> Hyperparams {
    Hyperparams {
        epochs,
        seed: 1,
        ..Hyperparams::binary()
    }
}

fn criterion_6(blurred: &Dataset) -> Outcome {
    let hp = short_binary(5);
    let start = Instant::now();
    let cv = cross_validate(blurred, &hp, &Variant::default()).map_err(|e| e.to_string())?;
    let auc = cv.aggregate.get("roc_auc").ok_or("no AUC")?;
    check(
        auc.mean >= 0.95 && cv.records.len() == 5,
        format!("mean ROC-AUC {:.4} (std {:.4}) over {} folds, {} epochs, {:.0}s", auc.mean, auc.std, cv.records.len(), hp.epochs, start.elapsed().as_secs_f64()),
    )
}

fn criterion_7(blurred: &Dataset) -> Outcome {
    let cfg = SweepConfig {
        kind: SweepKind::Channel,
        configurations: channel_configurations(&[ChannelConfig::DodtOnly, ChannelConfig::NadhOnly]),
        base: short_binary(5),
        seed: 1,
    };
    let report = run_sweep(blurred, &cfg).map_err(|e| e.to_string())?;
    let dodt = report.mean_roc_auc("dodt_only").ok_or("dodt_only failed")?;
    let nadh = report.mean_roc_auc("nadh_only").ok_or("nadh_only failed")?;
    check(
        (0.4..=0.6).contains(&dodt) && nadh >= 0.9,
        format!("dodt_only {dodt:.4}, nadh_only {nadh:.4}"),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let spec = PatchPhantomSpec::center_signal(8, NoiseLevel::Low);
    let classes = spec.appearance.classes.iter().map(|c| c.name.clone()).collect();
    let ds = Dataset::from_synth(classes, generate_patches(&spec, 200).unwrap()).unwrap();
    let hp = Hyperparams {
        epochs: 5,
        lr: 5e-5,
        seed: 2,
        ..Hyperparams::binary()
    };
    let blurred = blur_dataset(&ds, hp.blur_sigma);
    let cfg_of = |d: f64, mode: MaskMode| Configuration {
        id: MaskSpec::new(d, mode).unwrap().label(),
        variant: Variant {
            mask: Some(MaskSpec::new(d, mode).unwrap()),
            ..Variant::default()
        },
    };
    let mut configurations: Vec<Configuration> = MaskSpec::STANDARD_DIAMETERS.iter().map(|&d| cfg_of(d, MaskMode::KeepInside)).collect();
    configurations.push(cfg_of(40.0, MaskMode::KeepOutside));
    let cfg = SweepConfig {
        kind: SweepKind::Spatial,
        configurations,
        base: hp,
        seed: 2,
    };
    let report = run_sweep(&blurred, &cfg).map_err(|e| e.to_string())?;
    let inside: Vec<f64> = MaskSpec::STANDARD_DIAMETERS
        .iter()
        .map(|&d| report.mean_roc_auc(&MaskSpec::new(d, MaskMode::KeepInside).unwrap().label()).unwrap_or(f64::NAN))
        .collect();
    let outside = report.mean_roc_auc("keep_outside_d40").unwrap_or(f64::NAN);
    let monotone = inside.windows(2).all(|w| w[1] >= w[0] - 0.03);
    check(
        monotone && outside <= inside[2],
        format!("keep_inside d=5,20,40,60: {:.3?}; keep_outside d=40: {outside:.3}", inside),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut leaks = 0;
    let mut coverage = 0;
    let mut skipped = 0;
    for _ in 0..1000 {
        let n_groups = rng.random_range(2..40);
        let n_classes = rng.random_range(2..5);
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for g in 0..n_groups {
            for _ in 0..rng.random_range(1..15) {
                labels.push(rng.random_range(0..n_classes));
                groups.push(format!("g{g}"));
            }
        }
        let k = rng.random_range(2..=n_groups.min(10));
        let Ok((folds, _)) = stratified_group_kfold(&labels, &groups, n_classes, k, rng.random()) else {
            skipped += 1;
            continue;
        };
        let mut seen = vec![0usize; labels.len()];
        for f in &folds {
            let train: BTreeSet<&str> = f.train.iter().map(|&i| groups[i].as_str()).collect();
            if f.val.iter().any(|&i| train.contains(groups[i].as_str())) {
                leaks += 1;
            }
            for &i in &f.val {
                seen[i] += 1;
            }
            if f.train.len() + f.val.len() != labels.len() {
                coverage += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            coverage += 1;
        }
    }
    check(
        leaks == 0 && coverage == 0 && skipped == 0,
        format!("1000 datasets: {leaks} leaking folds, {coverage} coverage errors, {skipped} rejected"),
    )
}

// ---------------------------------------------------------------- 10

struct RunArtifacts {
    manifest: Vec<u8>,
    patches: BTreeMap<String, Vec<u8>>,
    checkpoints: Vec<Vec<u8>>,
    histories: Vec<String>,
    report: String,
}

fn pipeline_run(dir: &std::path::Path) -> Result<RunArtifacts, String> {
    let s = |e: afcyte::Error| e.to_string();
    let mut spec = PhantomSpec::segmentation(21);
    spec.width = 384;
    spec.height = 384;
    spec.n_cells = 18;
    let images = dir.join("images");
    generate_dataset(&spec, 2, TruthLabels::Apc, &images).map_err(s)?;
    let inputs = vec![images.join("fov_000.afim"), images.join("fov_001.afim")];
    let out = dir.join("patches");
    let (manifest, _) = extract_to_dir(&inputs, None, &ExtractConfig::default(), &out).map_err(s)?;
    let mut patches = BTreeMap::new();
    for r in &manifest.rows {
        patches.insert(r.path.clone(), std::fs::read(out.join(&r.path)).map_err(|e| e.to_string())?);
    }
    let ds = Dataset::from_manifest(&manifest, &out).map_err(s)?;
    let hp = Hyperparams {
        epochs: 2,
        folds: 2,
        seed: 5,
        ..Hyperparams::binary()
    };
    let cv = cross_validate(&blur_dataset(&ds, hp.blur_sigma), &hp, &Variant::default()).map_err(s)?;
    let checkpoints = cv
        .outcomes
        .iter()
        .map(|o| checkpoint::encode(&o.model, TrainingMeta { seed: o.seed, epoch: hp.epochs as u32, swa: true }))
        .collect();
    Ok(RunArtifacts {
        manifest: std::fs::read(out.join("manifest.csv")).map_err(|e| e.to_string())?,
        patches,
        checkpoints,
        histories: cv.outcomes.iter().map(|o| o.history.to_csv(&ds.classes)).collect(),
        report: render_report(&ds.classes, &cv.records).map_err(s)?,
    })
}

fn criterion_10() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let x = pipeline_run(a.path())?;
    let y = pipeline_run(b.path())?;
    let same = [
        ("manifest", x.manifest == y.manifest),
        ("patches", x.patches == y.patches),
        ("checkpoints", x.checkpoints == y.checkpoints),
        ("histories", x.histories == y.histories),
        ("report", x.report == y.report),
    ];
    let differing: Vec<&str> = same.iter().filter(|s| !s.1).map(|s| s.0).collect();
    check(
        differing.is_empty() && !x.patches.is_empty(),
        if differing.is_empty() {
            format!("{} patches, {} checkpoints, manifest and report byte-identical", x.patches.len(), x.checkpoints.len())
        } else {
            format!("differs: {}", differing.join(", "))
        },
    )
}

// ----------------------------------------------------------------

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let needs_phantom = wanted(6) || wanted(7);
    let blurred = needs_phantom.then(|| blur_dataset(&binary_phantom(), Hyperparams::binary().blur_sigma));
    let phantom = || blurred.as_ref().expect("phantom built");

    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "gradient checks", Box::new(criterion_1)),
        (2, "parameter count and shapes", Box::new(criterion_2)),
        (3, "ROC-AUC and threshold metrics", Box::new(criterion_3)),
        (4, "Otsu threshold", Box::new(criterion_4)),
        (5, "phantom extraction", Box::new(criterion_5)),
        (6, "binary phantom CV", Box::new(move || criterion_6(phantom()))),
        (7, "channel ablation", Box::new(move || criterion_7(phantom()))),
        (8, "spatial masking", Box::new(criterion_8)),
        (9, "group-disjoint folds", Box::new(criterion_9)),
        (10, "determinism", Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (n, name, run) in &criteria {
        if !wanted(*n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d}");
            }
        }
    }
    assert_eq!(FIRE_COUNT, 8);
    if failed > 0 {
        std::process::exit(1);
    }
}
