//! Confusion matrices, threshold metrics, ROC and PR curves, and fold
//! aggregation.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Parameter("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    /// `(tp, tn, fp, fn)` treating `k` as the positive class.
    pub fn one_vs_rest(&self, k: usize) -> (u64, u64, u64, u64) {
        let tp = self.get(k, k);
        let fp = self.col_sum(k) - tp;
        let fn_ = self.row_sum(k) - tp;
        (tp, self.total() - tp - fp - fn_, fp, fn_)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Parameter(format!("cannot add {}-class and {}-class matrices", self.classes, other.classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Parameter(format!("{} labels vs {} predictions", truth.len(), pred.len())));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::Parameter(format!("label pair ({t}, {p}) outside {classes} classes")));
        }
        cm.add(t, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Average {
    /// Positive class 1 of a two-class matrix; macro otherwise.
    #[default]
    Binary,
    Macro,
    /// Per-class values weighted by true-class support.
    Weighted,
}

impl Average {
    pub fn name(self) -> &'static str {
        match self {
            Self::Binary => "binary",
            Self::Macro => "macro",
            Self::Weighted => "weighted",
        }
    }
}

impl FromStr for Average {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" => Ok(Self::Binary),
            "macro" => Ok(Self::Macro),
            "weighted" => Ok(Self::Weighted),
            _ => Err(Error::Parameter(format!("unknown average '{s}' (binary, macro or weighted)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Some ratio had a zero denominator and was set to 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Classes with an undefined ratio among the averaged ones.
    pub flagged: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn class_metrics(cm: &ConfusionMatrix, k: usize) -> ClassMetrics {
    let tp = cm.get(k, k);
    let (precision, u1) = ratio(tp, cm.col_sum(k));
    let (recall, u2) = ratio(tp, cm.row_sum(k));
    let (f1, u3) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support: cm.row_sum(k),
        undefined: u1 || u2 || u3,
    }
}

pub fn basic_metrics(cm: &ConfusionMatrix, avg: Average) -> Result<BasicMetrics> {
    if cm.classes == 0 || cm.total() == 0 {
        return Err(Error::Parameter("empty confusion matrix".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.classes).map(|k| class_metrics(cm, k)).collect();
    let accuracy = cm.trace() as f64 / cm.total() as f64;
    let (weights, considered): (Vec<f64>, Vec<usize>) = match avg {
        Average::Binary if cm.classes == 2 => (vec![0.0, 1.0], vec![1]),
        Average::Binary | Average::Macro => (vec![1.0 / cm.classes as f64; cm.classes], (0..cm.classes).collect()),
        Average::Weighted => (
            per_class.iter().map(|m| m.support as f64 / cm.total() as f64).collect(),
            (0..cm.classes).collect(),
        ),
    };
    let avg_of = |f: fn(&ClassMetrics) -> f64| per_class.iter().zip(&weights).map(|(m, w)| w * f(m)).sum::<f64>();
    Ok(BasicMetrics {
        accuracy,
        precision: avg_of(|m| m.precision),
        recall: avg_of(|m| m.recall),
        f1: avg_of(|m| m.f1),
        flagged: considered.into_iter().filter(|&k| per_class[k].undefined).collect(),
        per_class,
    })
}

/// Generalized (Gorodkin) MCC. Returns `(value, undefined)`; an undefined
/// denominator gives 0.
pub fn mcc(cm: &ConfusionMatrix) -> (f64, bool) {
    let s = cm.total() as f64;
    let c = cm.trace() as f64;
    let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for k in 0..cm.classes {
        let (t, p) = (cm.row_sum(k) as f64, cm.col_sum(k) as f64);
        pt += p * t;
        pp += p * p;
        tt += t * t;
    }
    let den = ((s * s - pp) * (s * s - tt)).sqrt();
    if den == 0.0 {
        (0.0, true)
    } else {
        (((c * s - pt) / den).clamp(-1.0, 1.0), false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    /// `(x, y)` points: `(fpr, tpr)` for ROC, `(recall, precision)` for PR.
    pub points: Vec<(f64, f64)>,
    /// Score threshold reached at each point after the first.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

impl Curve {
    pub fn to_csv(&self, header: (&str, &str)) -> String {
        let mut s = format!("{},{}\n", header.0, header.1);
        for (x, y) in &self.points {
            let _ = writeln!(s, "{x},{y}");
        }
        s
    }
}

/// Cumulative `(threshold, tp, fp)` after each distinct score, highest
/// first; tied scores form one step.
fn sweep(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, u64, u64)>> {
    if scores.len() != labels.len() {
        return Err(Error::Parameter(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Parameter("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((t, tp, fp));
    }
    Ok(steps)
}

/// ROC curve over every distinct score with trapezoid AUC.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Curve> {
    let steps = sweep(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Parameter("ROC needs both positive and negative labels".into()));
    }
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    // 2 * area * pos * neg, exact in integers
    let mut twice_area = 0u128;
    let (mut last_tp, mut last_fp) = (0u64, 0u64);
    for &(t, tp, fp) in &steps {
        twice_area += (fp - last_fp) as u128 * (tp + last_tp) as u128;
        points.push((fp as f64 / neg, tp as f64 / pos));
        thresholds.push(t);
        (last_tp, last_fp) = (tp, fp);
    }
    Ok(Curve {
        points,
        thresholds,
        auc: twice_area as f64 / (2.0 * pos * neg),
    })
}

/// Precision-recall curve with step-wise AUC: each recall increment is
/// weighted by the precision reached at that threshold.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Curve> {
    let steps = sweep(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    if pos == 0.0 {
        return Err(Error::Parameter("PR curve needs at least one positive label".into()));
    }
    let mut points = vec![(0.0, 1.0)];
    let mut thresholds = Vec::new();
    let mut auc = 0.0;
    let mut last_recall = 0.0;
    for &(t, tp, fp) in &steps {
        let recall = tp as f64 / pos;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (recall - last_recall) * precision;
        points.push((recall, precision));
        thresholds.push(t);
        last_recall = recall;
    }
    Ok(Curve { points, thresholds, auc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub fold: usize,
    pub accuracy: f64,
    /// Positive-class values for binary tasks, averaged otherwise.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub flags: Vec<String>,
}

pub const RECORD_FIELDS: [&str; 7] = ["accuracy", "precision", "recall", "f1", "mcc", "roc_auc", "pr_auc"];

impl MetricRecord {
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.accuracy),
            Some(self.precision),
            Some(self.recall),
            Some(self.f1),
            Some(self.mcc),
            self.roc_auc,
            self.pr_auc,
        ]
    }

    pub fn csv_header() -> String {
        format!("fold,{},classes,confusion,flags", RECORD_FIELDS.join(","))
    }

    /// One line; the confusion counts are `;`-joined in row-major order.
    pub fn csv_line(&self) -> String {
        let vals: Vec<String> = self.values().iter().map(|v| v.map_or(String::new(), |x| x.to_string())).collect();
        let counts: Vec<String> = self.confusion.counts.iter().map(u64::to_string).collect();
        format!(
            "{},{},{},{},{}",
            self.fold,
            vals.join(","),
            self.confusion.classes,
            counts.join(";"),
            self.flags.join(";")
        )
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = |what: &str| Error::format("metric record", format!("{what} in '{line}'"));
        if f.len() != RECORD_FIELDS.len() + 4 {
            return Err(bad("wrong field count"));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("bad number"))
            }
        };
        let fold = f[0].parse().map_err(|_| bad("bad fold"))?;
        let req = |i: usize| num(f[i])?.ok_or_else(|| bad("missing value"));
        let classes: usize = f[8].parse().map_err(|_| bad("bad class count"))?;
        let counts = f[9]
            .split(';')
            .map(|c| c.parse::<u64>().map_err(|_| bad("bad count")))
            .collect::<Result<Vec<_>>>()?;
        if counts.len() != classes * classes {
            return Err(bad("confusion size"));
        }
        Ok(Self {
            fold,
            accuracy: req(1)?,
            precision: req(2)?,
            recall: req(3)?,
            f1: req(4)?,
            mcc: req(5)?,
            roc_auc: num(f[6])?,
            pr_auc: num(f[7])?,
            confusion: ConfusionMatrix { classes, counts },
            flags: f[10].split(';').filter(|s| !s.is_empty()).map(String::from).collect(),
        })
    }
}

pub fn records_csv(records: &[MetricRecord]) -> String {
    let mut s = MetricRecord::csv_header();
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn parse_records_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == MetricRecord::csv_header() => {}
        _ => return Err(Error::format("metric records", "missing header")),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricRecord::from_csv_line).collect()
}

fn record_from_cm(fold: usize, cm: ConfusionMatrix, avg: Average) -> Result<MetricRecord> {
    let b = basic_metrics(&cm, avg)?;
    let (m, undefined) = mcc(&cm);
    let mut flags: Vec<String> = b.flagged.iter().map(|k| format!("class{k}_undefined_ratio")).collect();
    if undefined {
        flags.push("mcc_undefined".into());
    }
    Ok(MetricRecord {
        fold,
        accuracy: b.accuracy,
        precision: b.precision,
        recall: b.recall,
        f1: b.f1,
        mcc: m,
        roc_auc: None,
        pr_auc: None,
        confusion: cm,
        flags,
    })
}

/// Binary record: hard predictions at `score >= threshold`, curves from the
/// raw scores. Undefined curves leave the AUC empty and add a flag.
pub fn binary_record(fold: usize, scores: &[f64], labels: &[usize], threshold: f64) -> Result<MetricRecord> {
    let pred: Vec<usize> = scores.iter().map(|&s| usize::from(s >= threshold)).collect();
    let cm = confusion(labels, &pred, 2)?;
    let mut r = record_from_cm(fold, cm, Average::Binary)?;
    let truth: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    match roc_curve(scores, &truth) {
        Ok(c) => r.roc_auc = Some(c.auc),
        Err(_) => r.flags.push("roc_undefined".into()),
    }
    match pr_curve(scores, &truth) {
        Ok(c) => r.pr_auc = Some(c.auc),
        Err(_) => r.flags.push("pr_undefined".into()),
    }
    Ok(r)
}

/// Multi-class record from argmax predictions.
pub fn multiclass_record(fold: usize, truth: &[usize], pred: &[usize], classes: usize, avg: Average) -> Result<MetricRecord> {
    record_from_cm(fold, confusion(truth, pred, classes)?, avg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub name: &'static str,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub folds: usize,
    pub metrics: Vec<Summary>,
    pub summed_confusion: ConfusionMatrix,
    /// Element-wise mean of the per-fold matrices.
    pub mean_confusion: Vec<f64>,
}

impl Aggregate {
    pub fn get(&self, name: &str) -> Option<&Summary> {
        self.metrics.iter().find(|s| s.name == name)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn aggregate_folds(records: &[MetricRecord]) -> Result<Aggregate> {
    let first = records.first().ok_or_else(|| Error::Parameter("no fold records to aggregate".into()))?;
    let mut summed = ConfusionMatrix::zeros(first.confusion.classes);
    for r in records {
        summed.merge(&r.confusion)?;
    }
    let mean_confusion = summed.counts.iter().map(|&c| c as f64 / records.len() as f64).collect();
    let mut metrics = Vec::new();
    for (i, name) in RECORD_FIELDS.iter().enumerate() {
        let vals: Vec<f64> = records.iter().filter_map(|r| r.values()[i]).collect();
        if vals.is_empty() {
            continue;
        }
        let (mean, std) = mean_std(&vals);
        metrics.push(Summary { name, mean, std, n: vals.len() });
    }
    Ok(Aggregate {
        folds: records.len(),
        metrics,
        summed_confusion: summed,
        mean_confusion,
    })
}

fn matrix_text(classes: &[String], cell: impl Fn(usize, usize) -> String) -> String {
    let w = classes.iter().map(|c| c.len()).max().unwrap_or(0).max(10);
    let mut s = format!("{:>w$} |", "true\\pred");
    for c in classes {
        let _ = write!(s, " {c:>w$}");
    }
    s.push('\n');
    for (i, c) in classes.iter().enumerate() {
        let _ = write!(s, "{c:>w$} |");
        for j in 0..classes.len() {
            let _ = write!(s, " {:>w$}", cell(i, j));
        }
        s.push('\n');
    }
    s
}

/// Plain-text cross-validation report: per-fold metrics, mean and std, and
/// the summed and fold-averaged confusion matrices.
pub fn render_report(classes: &[String], records: &[MetricRecord]) -> Result<String> {
    let agg = aggregate_folds(records)?;
    if agg.summed_confusion.classes != classes.len() {
        return Err(Error::Parameter(format!(
            "{} class names for a {}-class confusion matrix",
            classes.len(),
            agg.summed_confusion.classes
        )));
    }
    let mut s = String::new();
    let _ = writeln!(s, "{:<6} {}", "fold", RECORD_FIELDS.map(|f| format!("{f:>9}")).join(" "));
    for r in records {
        let vals: Vec<String> = r.values().iter().map(|v| v.map_or(format!("{:>9}", "-"), |x| format!("{x:>9.4}"))).collect();
        let _ = writeln!(s, "{:<6} {}", r.fold, vals.join(" "));
    }
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        let vals: Vec<String> = RECORD_FIELDS
            .iter()
            .map(|f| agg.get(f).map_or(format!("{:>9}", "-"), |m| format!("{:>9.4}", if pick == 0 { m.mean } else { m.std })))
            .collect();
        let _ = writeln!(s, "{label:<6} {}", vals.join(" "));
    }
    let flags: Vec<String> = records
        .iter()
        .filter(|r| !r.flags.is_empty())
        .map(|r| format!("fold {}: {}", r.fold, r.flags.join(", ")))
        .collect();
    if !flags.is_empty() {
        let _ = writeln!(s, "flags: {}", flags.join("; "));
    }
    let _ = writeln!(s, "\nconfusion matrix, summed over {} folds", agg.folds);
    s.push_str(&matrix_text(classes, |i, j| agg.summed_confusion.get(i, j).to_string()));
    let _ = writeln!(s, "\nconfusion matrix, mean per fold");
    let n = classes.len();
    s.push_str(&matrix_text(classes, |i, j| format!("{:.1}", agg.mean_confusion[i * n + j])));
    Ok(s)
}
