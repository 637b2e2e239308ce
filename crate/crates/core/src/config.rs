//! Run configuration: a flat `key = value` text format with optional
//! `[section]` headers, covering model geometry, flow policy, tracking,
//! synthetic data, training and paths.
//!
//! Keys are written `section.name`. Inside a `[section]` block the prefix
//! may be dropped. `#` starts a comment. Unknown keys are rejected.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow_mask::{Aggregation, Elimination, FlowPolicy, PartitionMode, Variant};
use crate::model::ModelConfig;
use crate::pipeline::RunConfig;
use crate::synth_bench::{SynthConfig, TrainConfig};

/// Shorthand keys accepted on input and mapped to their full path.
const ALIASES: &[(&str, &str)] = &[("K", "flow.top_k"), ("variant", "flow.variant")];

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    /// Parent of the per-command run directories.
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub run: RunConfig,
    pub synth: SynthConfig,
    /// Training settings; the `seed` field is replaced by [`Config::seed`].
    pub train: TrainConfig,
    pub paths: Paths,
    pub seed: u64,
    /// Token-elimination schedule. Only the `full` variant runs it; the
    /// schedule is kept while other variants are selected.
    pub elimination: Vec<Elimination>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            run: RunConfig::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
            seed: 0,
            elimination: Variant::Full.default_elimination(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected true or false, got {value:?}"),
        )),
    }
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| Error::config(key, format!("expected `lo,hi`, got {value:?}")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

/// `layer:count` entries separated by commas; empty for none.
fn parse_elimination(key: &str, value: &str) -> Result<Vec<Elimination>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (l, c) = item.split_once(':').ok_or_else(|| {
                Error::config(key, format!("expected `layer:count`, got {item:?}"))
            })?;
            Ok(Elimination {
                layer: parse(key, l.trim())?,
                count: parse(key, c.trim())?,
            })
        })
        .collect()
}

fn format_elimination(e: &[Elimination]) -> String {
    e.iter()
        .map(|e| format!("{}:{}", e.layer, e.count))
        .collect::<Vec<_>>()
        .join(",")
}

fn format_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl Config {
    /// Desk-scale defaults for the given variant.
    pub fn toy(variant: Variant) -> Self {
        Self {
            model: ModelConfig::toy(variant),
            elimination: ModelConfig::toy(Variant::Full).encoder.policy.elimination,
            ..Self::default()
        }
    }

    fn sync_elimination(&mut self) {
        let p = &mut self.model.encoder.policy;
        p.elimination = if p.variant == Variant::Full {
            self.elimination.clone()
        } else {
            Vec::new()
        };
    }

    pub fn policy(&self) -> &FlowPolicy {
        &self.model.encoder.policy
    }

    /// Training settings with the top-level seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Every key and its current value, in serialization order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = &self.model.geometry;
        let e = &self.model.encoder;
        let p = &e.policy;
        let r = &self.run;
        let s = &self.synth;
        let t = &self.train;
        vec![
            ("seed", self.seed.to_string()),
            ("geometry.template", g.template.to_string()),
            ("geometry.search", g.search.to_string()),
            ("geometry.dynamic", g.dynamic.to_string()),
            ("geometry.patch", g.patch.to_string()),
            ("model.dim", e.dim.to_string()),
            ("model.heads", e.heads.to_string()),
            ("model.ffn_dim", e.ffn_dim.to_string()),
            ("model.layers", p.layers.to_string()),
            ("flow.variant", p.variant.name().to_string()),
            ("flow.partition_layer", p.partition_layer.to_string()),
            ("flow.top_k", p.top_k.to_string()),
            ("flow.elimination", format_elimination(&self.elimination)),
            ("flow.partition_mode", p.partition_mode.to_string()),
            ("flow.aggregation", p.aggregation.to_string()),
            ("loss.iou", t.weights.iou.to_string()),
            ("loss.l1", t.weights.l1.to_string()),
            ("run.search_factor", r.search_factor.to_string()),
            ("run.template_factor", r.template_factor.to_string()),
            ("run.update_interval", r.update_interval.to_string()),
            ("run.update_threshold", r.update_threshold.to_string()),
            ("synth.frame_size", s.frame_size.to_string()),
            ("synth.length", s.length.to_string()),
            (
                "synth.target_size",
                format!("{},{}", s.target_size.0, s.target_size.1),
            ),
            ("synth.distractors", s.distractors.to_string()),
            ("synth.similarity", s.similarity.to_string()),
            ("synth.speed", s.speed.to_string()),
            ("synth.jitter", s.jitter.to_string()),
            ("synth.drift", s.drift.to_string()),
            ("synth.occlusion", s.occlusion.to_string()),
            ("synth.seed", s.seed.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.flip", t.flip.to_string()),
            ("train.max_shift", t.max_shift.to_string()),
            ("train.scale_jitter", t.scale_jitter.to_string()),
            ("train.max_dynamic_age", t.max_dynamic_age.to_string()),
            ("paths.out_dir", self.paths.out_dir.display().to_string()),
            ("paths.checkpoint", format_path(&self.paths.checkpoint)),
        ]
    }

    /// Sets one key (full path or alias) from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = ALIASES
            .iter()
            .find(|(a, _)| *a == key)
            .map_or(key, |(_, full)| full);
        let v = value.trim();
        let g = &mut self.model.geometry;
        let e = &mut self.model.encoder;
        let r = &mut self.run;
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "geometry.template" => g.template = parse(key, v)?,
            "geometry.search" => g.search = parse(key, v)?,
            "geometry.dynamic" => g.dynamic = parse(key, v)?,
            "geometry.patch" => g.patch = parse(key, v)?,
            "model.dim" => e.dim = parse(key, v)?,
            "model.heads" => e.heads = parse(key, v)?,
            "model.ffn_dim" => e.ffn_dim = parse(key, v)?,
            "model.layers" => e.policy.layers = parse(key, v)?,
            "flow.variant" => e.policy.variant = parse(key, v)?,
            "flow.partition_layer" => e.policy.partition_layer = parse(key, v)?,
            "flow.top_k" => e.policy.top_k = parse(key, v)?,
            "flow.elimination" => self.elimination = parse_elimination(key, v)?,
            "flow.partition_mode" => e.policy.partition_mode = parse::<PartitionMode>(key, v)?,
            "flow.aggregation" => e.policy.aggregation = parse::<Aggregation>(key, v)?,
            "loss.iou" => t.weights.iou = parse(key, v)?,
            "loss.l1" => t.weights.l1 = parse(key, v)?,
            "run.search_factor" => r.search_factor = parse(key, v)?,
            "run.template_factor" => r.template_factor = parse(key, v)?,
            "run.update_interval" => r.update_interval = parse(key, v)?,
            "run.update_threshold" => r.update_threshold = parse(key, v)?,
            "synth.frame_size" => s.frame_size = parse(key, v)?,
            "synth.length" => s.length = parse(key, v)?,
            "synth.target_size" => s.target_size = parse_pair(key, v)?,
            "synth.distractors" => s.distractors = parse(key, v)?,
            "synth.similarity" => s.similarity = parse(key, v)?,
            "synth.speed" => s.speed = parse(key, v)?,
            "synth.jitter" => s.jitter = parse(key, v)?,
            "synth.drift" => s.drift = parse(key, v)?,
            "synth.occlusion" => s.occlusion = parse_bool(key, v)?,
            "synth.seed" => s.seed = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.flip" => t.flip = parse_bool(key, v)?,
            "train.max_shift" => t.max_shift = parse(key, v)?,
            "train.scale_jitter" => t.scale_jitter = parse(key, v)?,
            "train.max_dynamic_age" => t.max_dynamic_age = parse(key, v)?,
            "paths.out_dir" => self.paths.out_dir = PathBuf::from(v),
            "paths.checkpoint" => self.paths.checkpoint = parse_path(v),
            _ => return Err(Error::config(key, "unknown key")),
        }
        self.sync_elimination();
        Ok(())
    }

    /// Applies `key = value` text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", n + 1),
                    format!("expected `key = value`, got {line:?}"),
                )
            })?;
            let k = k.trim();
            let full = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            self.set(&full, v)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides such as command-line `--set` flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.run.validate()?;
        self.synth.validate()?;
        let t = &self.train;
        if t.lr.is_nan() || t.lr < 0.0 {
            return Err(Error::config("train.lr", "must be non-negative"));
        }
        if t.batch == 0 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        if !(t.weights.iou >= 0.0 && t.weights.l1 >= 0.0) {
            return Err(Error::config(
                "loss.iou",
                "loss weights must be non-negative",
            ));
        }
        Ok(())
    }

    /// Sectioned text that [`parse_config`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (sec, name) = key.split_once('.').unwrap_or(("", key));
            if sec != section {
                out.push_str(&format!("\n[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out.trim_start().to_string()
    }
}

/// Parses configuration text over the full-size defaults and validates it.
pub fn parse_config(text: &str) -> Result<Config> {
    parse_config_over(Config::default(), text)
}

/// Parses configuration text on top of `base` and validates the result.
pub fn parse_config_over(mut base: Config, text: &str) -> Result<Config> {
    base.apply_text(text)?;
    base.validate()?;
    Ok(base)
}
