//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Keys are dotted:
//! `model.*`, `train.*`, `synth.*`, `domain.<id>.*`, plus `seed`, `seeds`,
//! `domains` and `output`. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Order};
use crate::synth::{default_task, CausalSpec, DomainSpec, ModalitySpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Role::Source),
            "target" => Ok(Role::Target),
            _ => Err(Error::Config(format!("unknown role `{s}` (expected source or target)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub spec: DomainSpec,
    pub role: Role,
}

/// Generator settings other than the widths, which come from the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub layout_seed: u64,
    pub text_invariant: usize,
    pub text_spurious: usize,
    pub text_weight: f64,
    pub video_invariant: usize,
    pub video_spurious: usize,
    pub video_weight: f64,
    pub confounder_dim: usize,
    pub confounder_scale: f64,
    pub label_noise: f64,
    pub spurious_edge: f64,
    pub nonlinear: bool,
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub domains: Vec<DomainEntry>,
    /// Replica seeds; empty means just `model.seed`.
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let (causal, domains) = default_task(7, 2000);
        let roles = [Role::Source, Role::Source, Role::Target];
        RunConfig {
            model: ModelConfig::default(),
            synth: SynthConfig {
                layout_seed: 7,
                text_invariant: causal.text.invariant.len(),
                text_spurious: causal.text.spurious.len(),
                text_weight: causal.text.label_weights[0],
                video_invariant: causal.video.invariant.len(),
                video_spurious: causal.video.spurious.len(),
                video_weight: causal.video.label_weights[0],
                confounder_dim: causal.confounder_dim,
                confounder_scale: causal.confounder_scale,
                label_noise: causal.label_noise,
                spurious_edge: causal.spurious_edge,
                nonlinear: causal.nonlinear,
                jitter: causal.jitter,
            },
            domains: domains
                .into_iter()
                .zip(roles)
                .map(|(spec, role)| DomainEntry { spec, role })
                .collect(),
            seeds: Vec::new(),
            output: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn valid_domain_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl RunConfig {
    /// Defaults overridden by a config file, then by `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    fn domain_mut(&mut self, id: &str) -> Result<&mut DomainEntry> {
        self.domains
            .iter_mut()
            .find(|d| d.spec.id == id)
            .ok_or_else(|| Error::Config(format!("domain `{id}` is not listed in `domains`")))
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.synth;
        match key {
            "seed" => m.seed = parse(key, value)?,
            "seeds" => self.seeds = list(value).iter().map(|v| parse(key, v)).collect::<Result<_>>()?,
            "output" => self.output = PathBuf::from(value),
            "domains" => {
                let ids = list(value);
                if ids.is_empty() {
                    return Err(Error::Config("`domains` must list at least one id".into()));
                }
                let mut next = Vec::new();
                for (i, id) in ids.iter().enumerate() {
                    if !valid_domain_id(id) {
                        return Err(Error::Config(format!("invalid domain id `{id}`")));
                    }
                    if next.iter().any(|d: &DomainEntry| &d.spec.id == id) {
                        return Err(Error::Config(format!("duplicate domain `{id}`")));
                    }
                    let entry = self
                        .domains
                        .iter()
                        .find(|d| &d.spec.id == id)
                        .cloned()
                        .unwrap_or(DomainEntry {
                            spec: DomainSpec {
                                id: id.clone(),
                                n: 2000,
                                spurious_sign: 1.0,
                                spurious_strength: 0.0,
                                seed: 1000 + i as u64,
                            },
                            role: Role::Target,
                        });
                    next.push(entry);
                }
                self.domains = next;
            }
            "model.text_dim" => m.text_dim = parse(key, value)?,
            "model.video_dim" => m.video_dim = parse(key, value)?,
            "model.text_tokens" => m.text_tokens = parse(key, value)?,
            "model.video_frames" => m.video_frames = parse(key, value)?,
            "model.num_classes" => m.num_classes = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.alpha" => m.alpha = parse(key, value)?,
            "model.order" => m.order = value.parse::<Order>()?,
            "model.keyframe" => m.keyframe = parse_bool(key, value)?,
            "model.stride" => m.stride = parse(key, value)?,
            "model.r_init" => m.r_init = parse(key, value)?,
            "model.r_init_floor" => m.r_init_floor = parse(key, value)?,
            "model.s_init" => m.s_init = parse(key, value)?,
            "model.unfreeze" => m.unfreeze = parse_bool(key, value)?,
            "train.epochs" => m.epochs = parse(key, value)?,
            "train.batch_size" => m.batch_size = parse(key, value)?,
            "train.lr" => m.optimizer.lr = parse(key, value)?,
            "train.beta1" => m.optimizer.beta1 = parse(key, value)?,
            "train.beta2" => m.optimizer.beta2 = parse(key, value)?,
            "train.epsilon" => m.optimizer.epsilon = parse(key, value)?,
            "train.warmup_epochs" => m.optimizer.warmup_epochs = parse(key, value)?,
            "train.mask_lr_scale" => m.mask_lr_scale = parse(key, value)?,
            "train.temperature" => m.temperature = parse(key, value)?,
            "train.temperature_decay" => m.temperature_decay = parse(key, value)?,
            "train.temperature_floor" => m.temperature_floor = parse(key, value)?,
            "train.val_fraction" => m.val_fraction = parse(key, value)?,
            "synth.layout_seed" => s.layout_seed = parse(key, value)?,
            "synth.text_invariant" => s.text_invariant = parse(key, value)?,
            "synth.text_spurious" => s.text_spurious = parse(key, value)?,
            "synth.text_weight" => s.text_weight = parse(key, value)?,
            "synth.video_invariant" => s.video_invariant = parse(key, value)?,
            "synth.video_spurious" => s.video_spurious = parse(key, value)?,
            "synth.video_weight" => s.video_weight = parse(key, value)?,
            "synth.confounder_dim" => s.confounder_dim = parse(key, value)?,
            "synth.confounder_scale" => s.confounder_scale = parse(key, value)?,
            "synth.label_noise" => s.label_noise = parse(key, value)?,
            "synth.spurious_edge" => s.spurious_edge = parse(key, value)?,
            "synth.nonlinear" => s.nonlinear = parse_bool(key, value)?,
            "synth.jitter" => s.jitter = parse(key, value)?,
            _ => {
                if let Some(rest) = key.strip_prefix("domain.") {
                    let (id, field) = rest
                        .rsplit_once('.')
                        .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
                    let d = self.domain_mut(id)?;
                    match field {
                        "n" => d.spec.n = parse(key, value)?,
                        "sign" => d.spec.spurious_sign = parse(key, value)?,
                        "strength" => d.spec.spurious_strength = parse(key, value)?,
                        "seed" => d.spec.seed = parse(key, value)?,
                        "role" => d.role = value.parse()?,
                        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                    }
                } else {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for d in &self.domains {
            d.spec.validate()?;
        }
        if !self.domains.iter().any(|d| d.role == Role::Source) {
            return Err(Error::Config("at least one domain must have role source".into()));
        }
        Ok(())
    }

    pub fn sources(&self) -> Vec<String> {
        self.ids_with(Role::Source)
    }

    pub fn targets(&self) -> Vec<String> {
        self.ids_with(Role::Target)
    }

    fn ids_with(&self, role: Role) -> Vec<String> {
        self.domains
            .iter()
            .filter(|d| d.role == role)
            .map(|d| d.spec.id.clone())
            .collect()
    }

    pub fn domain_specs(&self) -> Vec<DomainSpec> {
        self.domains.iter().map(|d| d.spec.clone()).collect()
    }

    /// Replica seeds (the model seed when none are listed).
    pub fn replica_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.model.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Generator structure implied by the model widths and synth settings.
    pub fn causal_spec(&self) -> Result<CausalSpec> {
        let s = &self.synth;
        let m = &self.model;
        let spec = CausalSpec {
            text: ModalitySpec::random_layout(
                m.text_dim,
                s.text_invariant,
                s.text_spurious,
                s.text_weight,
                s.layout_seed,
            )?,
            video: ModalitySpec::random_layout(
                m.video_dim,
                s.video_invariant,
                s.video_spurious,
                s.video_weight,
                s.layout_seed.wrapping_add(1),
            )?,
            num_classes: m.num_classes,
            confounder_dim: s.confounder_dim,
            confounder_scale: s.confounder_scale,
            label_noise: s.label_noise,
            spurious_edge: s.spurious_edge,
            nonlinear: s.nonlinear,
            text_tokens: m.text_tokens,
            video_frames: m.video_frames,
            jitter: s.jitter,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Fully resolved `key = value` listing, readable back by [`RunConfig::set`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", m.seed.to_string());
        kv(
            "seeds",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        kv("output", self.output.display().to_string());
        kv("model.text_dim", m.text_dim.to_string());
        kv("model.video_dim", m.video_dim.to_string());
        kv("model.text_tokens", m.text_tokens.to_string());
        kv("model.video_frames", m.video_frames.to_string());
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.alpha", m.alpha.to_string());
        kv("model.order", m.order.to_string());
        kv("model.keyframe", m.keyframe.to_string());
        kv("model.stride", m.stride.to_string());
        kv("model.r_init", m.r_init.to_string());
        kv("model.r_init_floor", m.r_init_floor.to_string());
        kv("model.s_init", m.s_init.to_string());
        kv("model.unfreeze", m.unfreeze.to_string());
        kv("train.epochs", m.epochs.to_string());
        kv("train.batch_size", m.batch_size.to_string());
        kv("train.lr", m.optimizer.lr.to_string());
        kv("train.beta1", m.optimizer.beta1.to_string());
        kv("train.beta2", m.optimizer.beta2.to_string());
        kv("train.epsilon", m.optimizer.epsilon.to_string());
        kv("train.warmup_epochs", m.optimizer.warmup_epochs.to_string());
        kv("train.mask_lr_scale", m.mask_lr_scale.to_string());
        kv("train.temperature", m.temperature.to_string());
        kv("train.temperature_decay", m.temperature_decay.to_string());
        kv("train.temperature_floor", m.temperature_floor.to_string());
        kv("train.val_fraction", m.val_fraction.to_string());
        kv("synth.layout_seed", s.layout_seed.to_string());
        kv("synth.text_invariant", s.text_invariant.to_string());
        kv("synth.text_spurious", s.text_spurious.to_string());
        kv("synth.text_weight", s.text_weight.to_string());
        kv("synth.video_invariant", s.video_invariant.to_string());
        kv("synth.video_spurious", s.video_spurious.to_string());
        kv("synth.video_weight", s.video_weight.to_string());
        kv("synth.confounder_dim", s.confounder_dim.to_string());
        kv("synth.confounder_scale", s.confounder_scale.to_string());
        kv("synth.label_noise", s.label_noise.to_string());
        kv("synth.spurious_edge", s.spurious_edge.to_string());
        kv("synth.nonlinear", s.nonlinear.to_string());
        kv("synth.jitter", s.jitter.to_string());
        kv(
            "domains",
            self.domains
                .iter()
                .map(|d| d.spec.id.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        for d in &self.domains {
            let p = format!("domain.{}", d.spec.id);
            kv(&format!("{p}.n"), d.spec.n.to_string());
            kv(&format!("{p}.sign"), d.spec.spurious_sign.to_string());
            kv(&format!("{p}.strength"), d.spec.spurious_strength.to_string());
            kv(&format!("{p}.seed"), d.spec.seed.to_string());
            kv(
                &format!("{p}.role"),
                match d.role {
                    Role::Source => "source",
                    Role::Target => "target",
                }
                .to_string(),
            );
        }
        out
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("model.alhpa", "0.1"), Err(Error::Config(_))));
        assert!(c.set("domain.nowhere.n", "5").is_err());
        assert!(c.set("domain.tgt.colour", "5").is_err());
        let err = c.apply_text("seed = 3\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# desk run\nmodel.alpha = 0.5  # strong\ntrain.epochs = 4\n").unwrap();
        let c = RunConfig::load(Some(&path), &["train.epochs=7".into()]).unwrap();
        assert_eq!(c.model.alpha, 0.5);
        assert_eq!(c.model.epochs, 7);
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("domains", "a,b").unwrap();
        c.set("domain.a.role", "source").unwrap();
        c.set("domain.b.strength", "0.25").unwrap();
        c.set("seeds", "1,2,3").unwrap();
        c.set("model.order", "joint").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(c.set("train.epochs", "many").is_err());
        assert!(c.set("model.order", "sideways").is_err());
        assert!(c.set("model.keyframe", "maybe").is_err());
        assert!(c.set("domains", "a,a").is_err());
        c.set("domain.tgt.role", "source").unwrap();
        c.set("domain.src_a.role", "target").unwrap();
        c.set("domain.src_b.role", "target").unwrap();
        c.set("domain.tgt.role", "target").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_causal_spec_matches_default_task() {
        let c = RunConfig::default();
        assert_eq!(c.causal_spec().unwrap(), default_task(7, 2000).0);
        assert_eq!(c.sources(), vec!["src_a".to_string(), "src_b".to_string()]);
        assert_eq!(c.targets(), vec!["tgt".to_string()]);
    }
}
