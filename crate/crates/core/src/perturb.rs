//! Perturbation sweeps: every configuration trains fresh models through the
//! full cross-validation, with its own derived seed.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;

use crate::datapipe::{ChannelConfig, Dataset, MaskMode, MaskSpec};
use crate::error::{Error, Result};
use crate::image::Channel;
use crate::metrics::{Aggregate, MetricRecord};
use crate::model::{Model, ModelSpec, FIRE_COUNT};
use crate::rng;
use crate::trainer::{cross_validate, Hyperparams, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Spatial,
    Capacity,
    Channel,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Spatial => "spatial",
            Self::Capacity => "capacity",
            Self::Channel => "channel",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spatial" => Ok(Self::Spatial),
            "capacity" => Ok(Self::Capacity),
            "channel" | "channels" => Ok(Self::Channel),
            _ => Err(Error::Parameter(format!("unknown sweep kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub id: String,
    pub variant: Variant,
}

/// Unperturbed baseline, then keep_inside and keep_outside at each
/// diameter in ascending order.
pub fn spatial_configurations(diameters: &[f64]) -> Result<Vec<Configuration>> {
    let mut ds = diameters.to_vec();
    ds.sort_by(f64::total_cmp);
    ds.dedup();
    let mut out = vec![Configuration {
        id: "baseline".into(),
        variant: Variant::default(),
    }];
    for mode in [MaskMode::KeepInside, MaskMode::KeepOutside] {
        for &d in &ds {
            let m = MaskSpec::new(d, mode)?;
            out.push(Configuration {
                id: m.label(),
                variant: Variant {
                    mask: Some(m),
                    ..Variant::default()
                },
            });
        }
    }
    Ok(out)
}

pub fn capacity_configurations(unfrozen: &[usize]) -> Result<Vec<Configuration>> {
    let mut ks = unfrozen.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if let Some(&k) = ks.iter().find(|&&k| k > FIRE_COUNT) {
        return Err(Error::Parameter(format!("unfrozen fire count {k} outside 0..={FIRE_COUNT}")));
    }
    Ok(ks
        .into_iter()
        .map(|k| Configuration {
            id: format!("unfrozen_{k}"),
            variant: Variant {
                unfrozen_fires: k,
                ..Variant::default()
            },
        })
        .collect())
}

pub fn channel_configurations(configs: &[ChannelConfig]) -> Vec<Configuration> {
    configs
        .iter()
        .map(|&c| Configuration {
            id: c.name().into(),
            variant: Variant {
                channels: c,
                ..Variant::default()
            },
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub kind: SweepKind,
    pub configurations: Vec<Configuration>,
    pub base: Hyperparams,
    pub seed: u64,
}

impl SweepConfig {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let mut problems = self.base.violations();
        if self.configurations.is_empty() {
            problems.push("no configurations".into());
        }
        let mut ids: Vec<&str> = self.configurations.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            problems.push("duplicate configuration ids".into());
        }
        if self.kind == SweepKind::Spatial && ds.classes.len() != 2 {
            problems.push(format!("spatial sweep needs a binary dataset, found {} classes", ds.classes.len()));
        }
        if self.kind == SweepKind::Channel {
            for c in [Channel::Nadh, Channel::Fad, Channel::Dodt] {
                if !ds.channels.contains(&c) {
                    problems.push(format!("channel sweep needs {c}"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }
}

/// Trainable-parameter count of a configuration's fresh model.
pub fn trainable_count(variant: &Variant, classes: usize) -> Result<usize> {
    let mut m = Model::<f32>::build(ModelSpec::new(variant.channels.channels().len(), classes), 0)?;
    m.freeze_prefix(variant.unfrozen_fires)
}

#[derive(Debug, Clone)]
pub struct ConfigResult {
    pub configuration: Configuration,
    pub seed: u64,
    pub param_count: usize,
    /// Per-fold records and their aggregate, or the error that stopped
    /// this configuration.
    pub outcome: std::result::Result<(Vec<MetricRecord>, Aggregate), String>,
}

impl ConfigResult {
    fn summary(&self, metric: &str) -> Option<(f64, f64)> {
        self.outcome.as_ref().ok().and_then(|(_, a)| a.get(metric)).map(|s| (s.mean, s.std))
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub folds: usize,
    pub results: Vec<ConfigResult>,
}

pub fn run_sweep(blurred: &Dataset, cfg: &SweepConfig) -> Result<SweepReport> {
    cfg.validate(blurred)?;
    let classes = blurred.classes.len();
    let results = cfg
        .configurations
        .par_iter()
        .map(|c| {
            let seed = rng::derive_seed(cfg.seed, &format!("{}/{}", cfg.kind, c.id));
            let hp = Hyperparams { seed, ..cfg.base.clone() };
            let param_count = trainable_count(&c.variant, classes)?;
            let outcome = match cross_validate(blurred, &hp, &c.variant) {
                Ok(cv) => Ok((cv.records, cv.aggregate)),
                Err(e) => {
                    warn!("configuration {} failed: {e}", c.id);
                    Err(e.to_string())
                }
            };
            Ok(ConfigResult {
                configuration: c.clone(),
                seed,
                param_count,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        kind: cfg.kind,
        folds: cfg.base.folds,
        results,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

impl SweepReport {
    pub fn get(&self, id: &str) -> Option<&ConfigResult> {
        self.results.iter().find(|r| r.configuration.id == id)
    }

    pub fn mean_roc_auc(&self, id: &str) -> Option<f64> {
        self.get(id).and_then(|r| r.summary("roc_auc")).map(|s| s.0)
    }

    /// One row per configuration and fold; failed configurations get a
    /// single row carrying the error.
    pub fn folds_csv(&self) -> String {
        let mut s = String::from("sweep,configuration,status,fold,roc_auc,pr_auc,accuracy,f1,mcc,param_count,error\n");
        for r in &self.results {
            let id = &r.configuration.id;
            match &r.outcome {
                Ok((records, _)) => {
                    for m in records {
                        let _ = writeln!(
                            s,
                            "{},{id},ok,{},{},{},{:.6},{:.6},{:.6},{},",
                            self.kind,
                            m.fold,
                            opt(m.roc_auc),
                            opt(m.pr_auc),
                            m.accuracy,
                            m.f1,
                            m.mcc,
                            r.param_count
                        );
                    }
                }
                Err(e) => {
                    let _ = writeln!(s, "{},{id},failed,,,,,,,{},\"{}\"", self.kind, r.param_count, e.replace('"', "'"));
                }
            }
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("sweep,configuration,status,roc_auc_mean,roc_auc_std,pr_auc_mean,pr_auc_std,n_folds,param_count\n");
        for r in &self.results {
            let roc = r.summary("roc_auc");
            let pr = r.summary("pr_auc");
            let n = r.outcome.as_ref().map_or(0, |(rec, _)| rec.len());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{n},{}",
                self.kind,
                r.configuration.id,
                if r.outcome.is_ok() { "ok" } else { "failed" },
                opt(roc.map(|v| v.0)),
                opt(roc.map(|v| v.1)),
                opt(pr.map(|v| v.0)),
                opt(pr.map(|v| v.1)),
                r.param_count
            );
        }
        s
    }

    /// Plain-text bar chart of mean ROC-AUC with the std as an error range.
    pub fn text(&self) -> String {
        const WIDTH: f64 = 40.0;
        let mut s = format!("{} sweep, {} folds\n", self.kind, self.folds);
        let _ = writeln!(s, "{:<22} {:>8} {:>8} {:>6} {:>9}  bar (ROC-AUC 0..1)", "configuration", "mean", "std", "folds", "params");
        for r in &self.results {
            let id = &r.configuration.id;
            match (r.summary("roc_auc"), &r.outcome) {
                (Some((m, sd)), Ok((rec, _))) => {
                    let bar = "#".repeat((m * WIDTH).round() as usize);
                    let _ = writeln!(s, "{id:<22} {m:>8.4} {sd:>8.4} {:>6} {:>9}  |{bar:<40}| +/- {sd:.3}", rec.len(), r.param_count);
                }
                (None, Ok((rec, a))) => {
                    let f1 = a.get("f1").map_or(0.0, |x| x.mean);
                    let _ = writeln!(s, "{id:<22} {:>8} {:>8} {:>6} {:>9}  macro F1 {f1:.4}", "-", "-", rec.len(), r.param_count);
                }
                (_, Err(e)) => {
                    let _ = writeln!(s, "{id:<22} FAILED: {e}");
                }
            }
        }
        s
    }
}
