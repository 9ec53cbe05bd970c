//! Flat `dotted.key = value` experiment files.
//!
//! ```text
//! # comments and blank lines are ignored
//! algorithm = fedopt
//! clients = 10
//! adversaries = 2
//! attack.name = ipm
//! attack.params.epsilon = 0.5
//! defense.name = trimmedmean
//! defense.params.beta = 0.2
//! ```
//!
//! Every key has a default, so an empty file is the desk-scale baseline:
//! FedSGD on synthetic blobs, 10 clients of which 4 adversarial, no attack,
//! Mean aggregation, 100 rounds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attacks::{attack_entry, build_attack, Attack, AttackSetup};
use crate::data::{BlobsSpec, ImageShape, PartitionMode, PoisonSpec, Trigger};
use crate::defenses::{build_defense, defense_entry, Defense};
use crate::error::{config_err, Error, Result};
use crate::fl::Algorithm;
use crate::model::Architecture;
use crate::params::Params;
use crate::registry::normalise;
use crate::train::TrainingHyper;

/// Parses `key = value` lines into a parameter bag. Keys are kept verbatim;
/// a repeated key is an error.
pub fn parse_pairs(text: &str) -> Result<Params> {
    let mut out = Params::new();
    let mut seen = std::collections::BTreeSet::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(config_err(format!("line {}: empty key", no + 1)));
        }
        if !seen.insert(k.to_string()) {
            return Err(config_err(format!("line {}: duplicate key `{k}`", no + 1)));
        }
        out.insert(k, v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs(BlobsSpec),
    /// First `train` / `test` samples of the IDX files in `dir`, or in
    /// `$FLP_DATA_DIR` when `dir` is unset.
    Mnist { dir: Option<PathBuf>, train: usize, test: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Logistic,
    Mlp { hidden: usize },
}

impl ModelKind {
    pub fn architecture(self, inputs: usize, classes: usize) -> Architecture {
        match self {
            ModelKind::Logistic => Architecture::Logistic { inputs, classes },
            ModelKind::Mlp { hidden } => Architecture::Mlp {
                inputs,
                hidden,
                classes,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub data: DataSource,
    pub partition: PartitionMode,
    pub model: ModelKind,
    pub n: usize,
    pub f: usize,
    /// `None` runs without an attack.
    pub attack: Option<String>,
    pub attack_params: Params,
    pub defense: String,
    pub defense_params: Params,
    pub hyper: TrainingHyper,
    pub poison: PoisonSpec,
    pub seed: u64,
    /// Rounds between evaluations.
    pub eval_interval: usize,
    /// Evaluations averaged into the summary row.
    pub summary_window: usize,
    /// Samples held out of the training split as server root data.
    pub root_size: usize,
    /// Clean accuracy for TAI/TDR. When unset, targeted runs train an
    /// attack-free twin to measure it.
    pub clean_acc: Option<f64>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_params(Params::new()).expect("defaults are valid")
    }
}

fn is_none(name: &str) -> bool {
    matches!(normalise(name).as_str(), "" | "none" | "noattack")
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_params(parse_pairs(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(msg) => config_err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_params(mut p: Params) -> Result<Self> {
        let attack_params = p.split_prefix("attack.params.");
        let defense_params = p.split_prefix("defense.params.");
        let algorithm = Algorithm::from_name(&p.string("algorithm", "fedsgd"))?;

        let data = match normalise(&p.string("data.source", "blobs")).as_str() {
            "blobs" => {
                let d = BlobsSpec::default();
                DataSource::Blobs(BlobsSpec {
                    side: p.usize("data.side", d.side)?,
                    classes: p.usize("data.classes", d.classes)?,
                    border: p.usize("data.border", d.border)?,
                    noise: p.f64("data.noise", d.noise)?,
                    train: p.usize("data.train", d.train)?,
                    test: p.usize("data.test", d.test)?,
                })
            }
            "mnist" => DataSource::Mnist {
                dir: p.opt::<PathBuf>("data.dir")?,
                train: p.usize("data.train", 2000)?,
                test: p.usize("data.test", 1000)?,
            },
            other => return Err(config_err(format!("data.source `{other}` is not blobs or mnist"))),
        };

        let partition = match normalise(&p.string("partition", "iid")).as_str() {
            "iid" => PartitionMode::Iid,
            "dirichlet" | "noniid" => PartitionMode::Dirichlet {
                alpha: p.positive("partition.alpha", 0.5)?,
            },
            other => return Err(config_err(format!("partition `{other}` is not iid or dirichlet"))),
        };

        let model = match normalise(&p.string("model", "logistic")).as_str() {
            "logistic" | "lr" => ModelKind::Logistic,
            "mlp" => ModelKind::Mlp {
                hidden: p.usize("model.hidden", 32)?,
            },
            other => return Err(config_err(format!("model `{other}` is not logistic or mlp"))),
        };

        let d = TrainingHyper::default();
        let default_epochs = if algorithm == Algorithm::FedSgd { 1 } else { 5 };
        let mut hyper = TrainingHyper {
            global_rounds: p.usize("train.rounds", d.global_rounds)?,
            local_epochs: p.usize("train.local_epochs", default_epochs)?,
            global_lr: p.f64("train.global_lr", d.global_lr)?,
            local_lr: p.f64("train.local_lr", d.local_lr)?,
            batch_size: p.usize("train.batch_size", d.batch_size)?,
            momentum: p.f64("train.momentum", d.momentum)?,
            weight_decay: p.f64("train.weight_decay", d.weight_decay)?,
            milestones: parse_list(&p.string("train.milestones", "0.5,0.8"))?,
            gamma: p.f64("train.gamma", d.gamma)?,
        };
        if algorithm == Algorithm::FedSgd {
            hyper.local_epochs = 1;
        }
        hyper.validate()?;

        let pd = PoisonSpec::default();
        let td = Trigger::default();
        let poison = PoisonSpec {
            source: p.usize("poison.source", pd.source)?,
            target: p.usize("poison.target", pd.target)?,
            ratio: p.f64("poison.ratio", pd.ratio)?,
            trigger: Trigger {
                x: p.usize("poison.trigger.x", td.x)?,
                y: p.usize("poison.trigger.y", td.y)?,
                w: p.usize("poison.trigger.w", td.w)?,
                h: p.usize("poison.trigger.h", td.h)?,
                value: p.f64("poison.trigger.value", td.value)?,
            },
            ..pd
        };

        let attack = Some(p.string("attack.name", "none")).filter(|a| !is_none(a));
        let cfg = Self {
            algorithm,
            data,
            partition,
            model,
            n: p.usize("clients", 10)?,
            f: p.usize("adversaries", 4)?,
            attack,
            attack_params,
            defense: p.string("defense.name", "mean"),
            defense_params,
            hyper,
            poison,
            seed: p.parse("seed", 0u64)?,
            eval_interval: p.usize("eval.interval", 5)?,
            summary_window: p.usize("eval.window", 10)?,
            root_size: p.usize("root.size", 100)?,
            clean_acc: p.opt_positive("baseline.acc")?,
            out: p.opt::<PathBuf>("out")?,
        };
        p.finish("config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cheap checks that need no data: ranges and registry names. Factory
    /// parameters are checked by [`ExperimentConfig::build_defense`] and
    /// [`ExperimentConfig::build_attack`].
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(config_err("clients must be >= 1"));
        }
        if self.f >= self.n && self.f > 0 {
            return Err(config_err(format!("adversaries ({}) must be < clients ({})", self.f, self.n)));
        }
        if self.eval_interval == 0 || self.summary_window == 0 {
            return Err(config_err("eval.interval and eval.window must be >= 1"));
        }
        if self.hyper.global_rounds == 0 {
            return Err(config_err("train.rounds must be >= 1"));
        }
        defense_entry(&self.defense)?;
        if let Some(a) = &self.attack {
            attack_entry(a)?;
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        match &self.data {
            DataSource::Blobs(b) => b.classes,
            DataSource::Mnist { .. } => 10,
        }
    }

    pub fn image(&self) -> ImageShape {
        match &self.data {
            DataSource::Blobs(b) => ImageShape {
                height: b.side,
                width: b.side,
            },
            DataSource::Mnist { .. } => ImageShape {
                height: 28,
                width: 28,
            },
        }
    }

    pub fn needs_root(&self) -> bool {
        defense_entry(&self.defense).map(|e| e.needs_root).unwrap_or(false)
    }

    pub fn build_defense(&self) -> Result<Box<dyn Defense>> {
        build_defense(&self.defense, self.defense_params.clone(), self.f)
    }

    pub fn attack_setup(&self) -> AttackSetup {
        AttackSetup {
            n: self.n,
            f: self.f,
            global_lr: self.algorithm.server_lr(&self.hyper),
            classes: self.classes(),
            image: Some(self.image()),
            poison: self.poison,
        }
    }

    pub fn build_attack(&self) -> Result<Option<Box<dyn Attack>>> {
        self.attack
            .as_deref()
            .map(|a| build_attack(a, self.attack_params.clone(), &self.attack_setup()))
            .transpose()
    }

    /// Same experiment without an attack.
    pub fn clean_twin(&self) -> Self {
        Self {
            attack: None,
            attack_params: Params::new(),
            clean_acc: None,
            out: None,
            ..self.clone()
        }
    }

    /// Canonical `key = value` text with every default spelled out. Parsing
    /// it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("algorithm", &self.algorithm.name());
        match &self.data {
            DataSource::Blobs(b) => {
                kv("data.source", &"blobs");
                kv("data.side", &b.side);
                kv("data.classes", &b.classes);
                kv("data.border", &b.border);
                kv("data.noise", &b.noise);
                kv("data.train", &b.train);
                kv("data.test", &b.test);
            }
            DataSource::Mnist { dir, train, test } => {
                kv("data.source", &"mnist");
                if let Some(d) = dir {
                    kv("data.dir", &d.display());
                }
                kv("data.train", train);
                kv("data.test", test);
            }
        }
        match self.partition {
            PartitionMode::Iid => kv("partition", &"iid"),
            PartitionMode::Dirichlet { alpha } => {
                kv("partition", &"dirichlet");
                kv("partition.alpha", &alpha);
            }
        }
        match self.model {
            ModelKind::Logistic => kv("model", &"logistic"),
            ModelKind::Mlp { hidden } => {
                kv("model", &"mlp");
                kv("model.hidden", &hidden);
            }
        }
        kv("clients", &self.n);
        kv("adversaries", &self.f);
        kv("attack.name", &self.attack.as_deref().unwrap_or("none"));
        for (k, v) in self.attack_params.iter() {
            kv(&format!("attack.params.{k}"), &v);
        }
        kv("defense.name", &self.defense);
        for (k, v) in self.defense_params.iter() {
            kv(&format!("defense.params.{k}"), &v);
        }
        let h = &self.hyper;
        kv("train.rounds", &h.global_rounds);
        kv("train.local_epochs", &h.local_epochs);
        kv("train.global_lr", &h.global_lr);
        kv("train.local_lr", &h.local_lr);
        kv("train.batch_size", &h.batch_size);
        kv("train.momentum", &h.momentum);
        kv("train.weight_decay", &h.weight_decay);
        let ms: Vec<String> = h.milestones.iter().map(f64::to_string).collect();
        kv("train.milestones", &ms.join(","));
        kv("train.gamma", &h.gamma);
        let ps = &self.poison;
        kv("poison.source", &ps.source);
        kv("poison.target", &ps.target);
        kv("poison.ratio", &ps.ratio);
        kv("poison.trigger.x", &ps.trigger.x);
        kv("poison.trigger.y", &ps.trigger.y);
        kv("poison.trigger.w", &ps.trigger.w);
        kv("poison.trigger.h", &ps.trigger.h);
        kv("poison.trigger.value", &ps.trigger.value);
        kv("seed", &self.seed);
        kv("eval.interval", &self.eval_interval);
        kv("eval.window", &self.summary_window);
        kv("root.size", &self.root_size);
        if let Some(a) = self.clean_acc {
            kv("baseline.acc", &a);
        }
        if let Some(o) = &self.out {
            kv("out", &o.display());
        }
        s
    }

    /// SHA-256 of the canonical text without the output path, as hex.
    pub fn hash(&self) -> String {
        let keyed = Self {
            out: None,
            ..self.clone()
        };
        hex::encode(Sha256::digest(keyed.to_text().as_bytes()))
    }

    pub fn partition_name(&self) -> String {
        match self.partition {
            PartitionMode::Iid => "iid".into(),
            PartitionMode::Dirichlet { alpha } => format!("dirichlet({alpha})"),
        }
    }
}

fn parse_list(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| config_err(format!("cannot parse list entry `{s}`")))
        })
        .collect()
}
