//! Per-fold training and evaluation, and k-fold cross-validation on top.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use afcyte_tensor::{AdamConfig, CosineSchedule, OptimState, SwaAccumulator, SwaOutcome, Tape, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::{self, TrainingMeta};
use crate::datapipe::{
    apply_circular_mask, augment, gaussian_blur, select_channels, stratified_group_kfold, ChannelConfig, Dataset, Fold, FoldBalance,
    MaskSpec, Standardization,
};
use crate::error::{Error, Result};
use crate::image::PatchData;
use crate::metrics::{aggregate_folds, binary_record, multiclass_record, Aggregate, Average, ConfusionMatrix, MetricRecord};
use crate::model::{Model, ModelSpec, FIRE_COUNT, PATCH_SIZE};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Binary,
    Multiclass,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" => Ok(Self::Binary),
            "multiclass" | "multi-class" | "multi" => Ok(Self::Multiclass),
            _ => Err(Error::Parameter(format!("unknown task '{s}' (binary or multiclass)"))),
        }
    }
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Self::Binary => "binary",
            Self::Multiclass => "multiclass",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub task: Task,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub augment_p: f64,
    /// Fraction of epochs after which SWA snapshots start.
    pub swa_start_fraction: f64,
    pub blur_sigma: f64,
    /// Inverse-frequency class weights in the loss.
    pub class_weighting: bool,
    pub threshold: f64,
    pub average: Average,
    pub folds: usize,
    pub seed: u64,
}

impl Hyperparams {
    pub fn binary() -> Self {
        Self {
            task: Task::Binary,
            epochs: 300,
            lr: 5e-6,
            batch_size: 16,
            dropout: 0.1,
            label_smoothing: 0.0,
            weight_decay: 0.001,
            augment_p: 0.6,
            swa_start_fraction: 0.75,
            blur_sigma: 2.0,
            class_weighting: false,
            threshold: 0.5,
            average: Average::Binary,
            folds: 5,
            seed: 0,
        }
    }

    pub fn multiclass() -> Self {
        Self {
            task: Task::Multiclass,
            batch_size: 32,
            label_smoothing: 0.2,
            weight_decay: 0.0005,
            augment_p: 0.0,
            average: Average::Macro,
            ..Self::binary()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Binary => Self::binary(),
            Task::Multiclass => Self::multiclass(),
        }
    }

    /// Lists every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("epochs must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("lr {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            v.push(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(0.0..=1.0).contains(&self.weight_decay) {
            v.push(format!("weight_decay {} outside [0, 1]", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.augment_p) {
            v.push(format!("augment_p {} outside [0, 1]", self.augment_p));
        }
        if !(0.0..=1.0).contains(&self.swa_start_fraction) {
            v.push(format!("swa_start_fraction {} outside [0, 1]", self.swa_start_fraction));
        }
        if !(self.blur_sigma > 0.0) {
            v.push(format!("blur_sigma {} must be positive", self.blur_sigma));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            v.push(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.folds < 2 {
            v.push(format!("folds {} must be >= 2", self.folds));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(v.join("; ")))
        }
    }

    /// First epoch (0-based) whose weights enter the SWA average; always
    /// leaves at least one snapshot.
    pub fn swa_start_epoch(&self) -> usize {
        ((self.swa_start_fraction * self.epochs as f64).floor() as usize).min(self.epochs.saturating_sub(1))
    }

    pub fn record(&self) -> Vec<(String, String)> {
        let average = self.average.name();
        [
            ("task", self.task.name().to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("dropout", self.dropout.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("augment_p", self.augment_p.to_string()),
            ("swa_start_fraction", self.swa_start_fraction.to_string()),
            ("swa_every", "1".to_string()),
            ("blur_sigma", self.blur_sigma.to_string()),
            ("class_weighting", self.class_weighting.to_string()),
            ("threshold", self.threshold.to_string()),
            ("average", average.to_string()),
            ("folds", self.folds.to_string()),
            ("seed", self.seed.to_string()),
            ("rotation_angles", "90,180,270".to_string()),
            ("mask_fill", "0 after standardization".to_string()),
            ("standardization", "per-fold training split".to_string()),
            ("fold_grouping", "group column".to_string()),
            ("eval_weights", "swa".to_string()),
            ("final_batch", "kept".to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Input transform and capacity variant applied identically at train and
/// eval time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub channels: ChannelConfig,
    pub mask: Option<MaskSpec>,
    pub unfrozen_fires: usize,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            channels: ChannelConfig::All,
            mask: None,
            unfrozen_fires: FIRE_COUNT,
        }
    }
}

impl Variant {
    pub fn record(&self) -> Vec<(String, String)> {
        vec![
            ("channels".into(), self.channels.name().into()),
            ("mask_mode".into(), self.mask.map_or("none".into(), |m| m.mode.name().into())),
            ("mask_diameter".into(), self.mask.map_or("none".into(), |m| m.diameter.to_string())),
            ("unfrozen_fires".into(), self.unfrozen_fires.to_string()),
        ]
    }
}

/// Blurs every patch once; blur commutes with flips and right-angle
/// rotations, so augmentation can run on the blurred patches.
pub fn blur_dataset(ds: &Dataset, sigma: f64) -> Dataset {
    Dataset {
        patches: ds.patches.par_iter().map(|p| gaussian_blur(p, sigma)).collect(),
        ..ds.clone()
    }
}

#[derive(Debug, Clone)]
pub struct PreparedFold {
    pub standardization: Standardization,
    pub train: Vec<PatchData>,
    pub train_labels: Vec<usize>,
    pub val: Vec<PatchData>,
    pub val_labels: Vec<usize>,
}

/// Channel selection, train-only standardization and masking of an already
/// blurred dataset.
pub fn prepare_fold(blurred: &Dataset, fold: &Fold, variant: &Variant) -> Result<PreparedFold> {
    let pick = |idx: &[usize]| -> Result<Vec<PatchData>> { idx.iter().map(|&i| select_channels(&blurred.patches[i], variant.channels)).collect() };
    let mut train = pick(&fold.train)?;
    let mut val = pick(&fold.val)?;
    let standardization = Standardization::fit(&train)?;
    for p in train.iter_mut().chain(val.iter_mut()) {
        standardization.apply(p)?;
        if let Some(m) = &variant.mask {
            *p = apply_circular_mask(p, m);
        }
    }
    Ok(PreparedFold {
        standardization,
        train,
        train_labels: fold.train.iter().map(|&i| blurred.labels[i]).collect(),
        val,
        val_labels: fold.val.iter().map(|&i| blurred.labels[i]).collect(),
    })
}

/// Applies a fold's fitted transform to one blurred patch.
pub fn prepare_patch(blurred: &PatchData, variant: &Variant, standardization: &Standardization) -> Result<PatchData> {
    let mut p = select_channels(blurred, variant.channels)?;
    standardization.apply(&mut p)?;
    Ok(match &variant.mask {
        Some(m) => apply_circular_mask(&p, m),
        None => p,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FoldHistory {
    pub epochs: Vec<EpochRecord>,
}

impl FoldHistory {
    pub fn to_csv(&self, classes: &[String]) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_loss");
        for c in classes {
            let _ = write!(s, ",tp_{c},tn_{c},fp_{c},fn_{c}");
        }
        s.push('\n');
        for e in &self.epochs {
            let _ = write!(s, "{},{},{},{}", e.epoch, e.lr, e.train_loss, e.val_loss);
            for k in 0..e.val_confusion.classes {
                let (tp, tn, fp, fn_) = e.val_confusion.one_vs_rest(k);
                let _ = write!(s, ",{tp},{tn},{fp},{fn_}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Per example: probability of the positive class (binary) or the class
    /// distribution (multi-class).
    pub scores: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub confusion: ConfusionMatrix,
    pub loss: f64,
}

impl Evaluation {
    /// Positive-class scores of a binary evaluation.
    pub fn positive_scores(&self) -> Vec<f64> {
        self.scores.iter().map(|s| *s.last().expect("non-empty score")).collect()
    }
}

fn batch_tensor(patches: &[&PatchData]) -> Result<Tensor<f32>> {
    let c = patches[0].channels.len();
    let mut data = Vec::with_capacity(patches.len() * c * PATCH_SIZE * PATCH_SIZE);
    for p in patches {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor::from_vec(&[patches.len(), c, PATCH_SIZE, PATCH_SIZE], data)?.with_requires_grad(false))
}

fn class_weights(labels: &[usize], classes: usize, enabled: bool) -> Option<Vec<f32>> {
    if !enabled {
        return None;
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    Some(
        counts
            .iter()
            .map(|&n| if n == 0 { 0.0 } else { labels.len() as f32 / (classes * n) as f32 })
            .collect(),
    )
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode scoring of prepared patches: no dropout, no augmentation.
pub fn evaluate(model: &Model<f32>, patches: &[PatchData], labels: &[usize], classes: usize, hp: &Hyperparams) -> Result<Evaluation> {
    let binary = model.spec().is_binary();
    let mut scores = Vec::with_capacity(patches.len());
    let mut predictions = Vec::with_capacity(patches.len());
    let mut loss_sum = 0.0;
    let weights = class_weights(labels, classes, hp.class_weighting);
    for (chunk, lab) in patches.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let refs: Vec<&PatchData> = chunk.iter().collect();
        let mut tape = Tape::new();
        let x = tape.leaf(batch_tensor(&refs)?);
        let fw = model.forward(&mut tape, x, false, &mut rng::seeded(0))?;
        let loss = tape.cross_entropy_probs(fw.output, lab, hp.label_smoothing, weights.as_deref())?;
        loss_sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
        let out = tape.value(fw.output);
        let heads = out.shape()[1];
        for row in out.data().chunks(heads) {
            if binary {
                let p = row[0] as f64;
                scores.push(vec![1.0 - p, p]);
                predictions.push(usize::from(p >= hp.threshold));
            } else {
                let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
                let arg = v
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                    .0;
                scores.push(v);
                predictions.push(arg);
            }
        }
    }
    let confusion = crate::metrics::confusion(labels, &predictions, classes.max(2))?;
    Ok(Evaluation {
        scores,
        predictions,
        labels: labels.to_vec(),
        confusion,
        loss: if patches.is_empty() { 0.0 } else { loss_sum / patches.len() as f64 },
    })
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub model: Model<f32>,
    pub history: FoldHistory,
    /// Evaluation of the final (SWA-averaged) weights.
    pub evaluation: Evaluation,
    pub swa: SwaOutcome,
    pub trainable_params: usize,
    pub standardization: Standardization,
    pub seed: u64,
}

fn model_spec(classes: usize, input_channels: usize, hp: &Hyperparams) -> ModelSpec {
    ModelSpec::new(input_channels, classes).with_dropout(hp.dropout)
}

/// Trains a fresh model on one prepared fold. Validation rows are only
/// scored, never used for updates.
pub fn train_fold(prep: &PreparedFold, classes: usize, hp: &Hyperparams, variant: &Variant, seed: u64) -> Result<FoldOutcome> {
    hp.validate()?;
    if prep.train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let input_channels = prep.train[0].channels.len();
    let mut model = Model::<f32>::build(model_spec(classes, input_channels, hp), rng::derive_seed(seed, "init"))?;
    let trainable_params = model.freeze_prefix(variant.unfrozen_fires)?;
    let adam = AdamConfig {
        lr: hp.lr,
        weight_decay: hp.weight_decay,
        ..AdamConfig::default()
    };
    let mut opt = OptimState::<f32>::new(adam, &model.param_sizes());
    let schedule = CosineSchedule::new(hp.lr, hp.epochs);
    let mut swa = SwaAccumulator::new();
    let swa_start = hp.swa_start_epoch();
    let mut shuffle_rng = rng::stream(seed, "shuffle");
    let mut aug_rng = rng::stream(seed, "augment");
    let mut drop_rng = rng::stream(seed, "dropout");
    let weights = class_weights(&prep.train_labels, classes, hp.class_weighting);
    let mut history = FoldHistory::default();
    let mut order: Vec<usize> = (0..prep.train.len()).collect();

    for epoch in 0..hp.epochs {
        let lr = schedule.step(&mut opt, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(hp.batch_size).enumerate() {
            let augmented: Vec<PatchData> = idx.iter().map(|&i| augment(&prep.train[i], hp.augment_p, &mut aug_rng)).collect();
            let refs: Vec<&PatchData> = augmented.iter().collect();
            let targets: Vec<usize> = idx.iter().map(|&i| prep.train_labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(batch_tensor(&refs)?);
            let fw = model.forward(&mut tape, x, true, &mut drop_rng)?;
            let loss = tape.cross_entropy_probs(fw.output, &targets, hp.label_smoothing, weights.as_deref())?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    lr,
                    detail: format!("loss {value}"),
                });
            }
            tape.backward(loss)?;
            model.collect_grads(&tape, &fw)?;
            if model.tensors().iter().any(|t| t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    lr,
                    detail: "non-finite gradient".into(),
                });
            }
            opt.adam_step(&mut model.tensors_mut())?;
            loss_sum += value * idx.len() as f64;
        }
        if epoch >= swa_start {
            swa.update(&model.tensors());
        }
        let ev = evaluate(&model, &prep.val, &prep.val_labels, classes, hp)?;
        let train_loss = loss_sum / prep.train.len() as f64;
        debug!("epoch {epoch}: lr {lr:e} train {train_loss:.5} val {:.5}", ev.loss);
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss: ev.loss,
            val_confusion: ev.confusion,
        });
    }
    let swa_outcome = swa.finalize(&mut model.tensors_mut());
    for t in model.tensors_mut() {
        t.zero_grad();
    }
    let evaluation = evaluate(&model, &prep.val, &prep.val_labels, classes, hp)?;
    Ok(FoldOutcome {
        model,
        history,
        evaluation,
        swa: swa_outcome,
        trainable_params,
        standardization: prep.standardization.clone(),
        seed,
    })
}

pub fn fold_record(fold: usize, ev: &Evaluation, classes: usize, hp: &Hyperparams) -> Result<MetricRecord> {
    if classes <= 2 {
        binary_record(fold, &ev.positive_scores(), &ev.labels, hp.threshold)
    } else {
        multiclass_record(fold, &ev.labels, &ev.predictions, classes, hp.average)
    }
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub folds: Vec<Fold>,
    pub balance: Vec<FoldBalance>,
    pub outcomes: Vec<FoldOutcome>,
    pub records: Vec<MetricRecord>,
    pub aggregate: Aggregate,
}

/// Stratified-group k-fold cross-validation of one variant. Folds train in
/// parallel; each fold's seed is derived from `hp.seed` and its index.
pub fn cross_validate(blurred: &Dataset, hp: &Hyperparams, variant: &Variant) -> Result<CvResult> {
    hp.validate()?;
    let classes = blurred.classes.len();
    let (folds, balance) = stratified_group_kfold(&blurred.labels, &blurred.groups, classes, hp.folds, rng::derive_seed(hp.seed, "folds"))?;
    let outcomes = folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let prep = prepare_fold(blurred, f, variant)?;
            let seed = rng::derive_seed(hp.seed, &format!("fold{i}"));
            let out = train_fold(&prep, classes, hp, variant, seed)?;
            info!("fold {i}: {} val rows, final val loss {:.4}", f.val.len(), out.evaluation.loss);
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let records = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| fold_record(i, &o.evaluation, classes, hp))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate_folds(&records)?;
    Ok(CvResult {
        folds,
        balance,
        outcomes,
        records,
        aggregate,
    })
}

pub fn format_record(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Writes `fold<i>/checkpoint.afck`, `history.csv` and `config.txt`.
pub fn write_fold_dir(dir: &Path, outcome: &FoldOutcome, classes: &[String], hp: &Hyperparams, variant: &Variant, epoch: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = TrainingMeta {
        seed: outcome.seed,
        epoch: epoch as u32,
        swa: matches!(outcome.swa, SwaOutcome::Averaged(_)),
    };
    checkpoint::save(&outcome.model, meta, &dir.join("checkpoint.afck"))?;
    let hist = dir.join("history.csv");
    fs::write(&hist, outcome.history.to_csv(classes)).map_err(|e| Error::io(&hist, e))?;
    let mut rec = hp.record();
    rec.extend(variant.record());
    rec.push(("fold_seed".into(), outcome.seed.to_string()));
    rec.push(("trainable_params".into(), outcome.trainable_params.to_string()));
    let cfg = dir.join("config.txt");
    fs::write(&cfg, format_record(&rec)).map_err(|e| Error::io(&cfg, e))?;
    let st = dir.join("standardization.csv");
    fs::write(&st, outcome.standardization.to_csv()).map_err(|e| Error::io(&st, e))?;
    Ok(())
}
