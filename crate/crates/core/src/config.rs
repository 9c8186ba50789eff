//! Training configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{Mode, StreamConfig};
use crate::error::{Error, Result};
use crate::senses::WarmupPolicy;

/// Which output objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Multiple sense vectors per token, selected by online clustering.
    Sense,
    /// One output embedding per token (requires `n_context = 1`).
    Baseline,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Sense => "sense",
            Objective::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sense" => Ok(Objective::Sense),
            "baseline" => Ok(Objective::Baseline),
            other => Err(Error::Config(format!("unknown objective '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub unroll_steps: usize,
    pub learning_rate: f64,
    /// Center update rate of the online clustering.
    pub sense_learning_rate: f64,
    /// Maximum senses per token.
    pub n_context: usize,
    /// Contextual representation width.
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub cluster_proj_dim: usize,
    /// Enqueued representations between projection refreshes.
    pub proj_update_interval: u64,
    /// Projection queue capacity.
    pub pca_sample: usize,
    /// Enqueue every n-th selected representation.
    pub proj_offer_stride: u64,
    /// Steps between pruning checks; 0 disables pruning.
    pub prune_interval: u64,
    pub remove_less_freqent_contexts: f64,
    pub warmup_steps: u64,
    pub warmup_policy: WarmupPolicy,
    pub mode: Mode,
    pub mask_rate: f64,
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub metrics_interval: u64,
    pub objective: Objective,
    pub center_init_std: f64,
    pub all_clip_norm_val: f64,
    pub min_count: u64,
    pub add_identity: bool,
    pub symmetrize_dictionary: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch_size: 16,
            unroll_steps: 16,
            learning_rate: 0.1,
            sense_learning_rate: 0.01,
            n_context: 3,
            hidden_dim: 32,
            embed_dim: 32,
            cluster_proj_dim: 16,
            proj_update_interval: 1000,
            pca_sample: 20_000,
            proj_offer_stride: 1,
            prune_interval: 10_000,
            remove_less_freqent_contexts: 0.1,
            warmup_steps: 2000,
            warmup_policy: WarmupPolicy::KeepWarmupSense,
            mode: Mode::Forward,
            mask_rate: 0.15,
            seed: 0,
            checkpoint_interval: 0,
            metrics_interval: 100,
            objective: Objective::Sense,
            center_init_std: 0.1,
            all_clip_norm_val: 10.0,
            min_count: 5,
            add_identity: true,
            symmetrize_dictionary: true,
        }
    }
}

/// Canonical keys with accepted aliases, in snapshot order.
pub const CONFIG_KEYS: &[(&str, &[&str])] = &[
    ("steps", &[]),
    ("batch_size", &[]),
    ("unroll_steps", &[]),
    ("learning_rate", &["lr"]),
    ("sense_learning_rate", &["alpha", "context_rep_lr"]),
    ("n_context", &["senses"]),
    ("hidden_dim", &["dim"]),
    ("embed_dim", &[]),
    ("cluster_proj_dim", &["pca_dim", "proj_dim"]),
    ("proj_update_interval", &[]),
    ("pca_sample", &["queue_size"]),
    ("proj_offer_stride", &[]),
    ("prune_interval", &[]),
    ("remove_less_freqent_contexts", &["prune_threshold"]),
    ("warmup_steps", &["contextual_warmup"]),
    ("warmup_policy", &[]),
    ("mode", &[]),
    ("mask_rate", &[]),
    ("seed", &[]),
    ("checkpoint_interval", &[]),
    ("metrics_interval", &[]),
    ("objective", &[]),
    ("center_init_std", &["sigma"]),
    ("all_clip_norm_val", &["clip_norm"]),
    ("min_count", &[]),
    ("add_identity", &[]),
    ("symmetrize_dictionary", &[]),
];

fn canonical_key(key: &str) -> Option<&'static str> {
    CONFIG_KEYS
        .iter()
        .find(|(k, aliases)| *k == key || aliases.contains(&key))
        .map(|(k, _)| *k)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value}: expected a boolean"))),
    }
}

impl TrainConfig {
    /// Sets one key (canonical name or alias).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key.trim())
            .ok_or_else(|| Error::Config(format!("unknown config key '{}'", key.trim())))?;
        let v = value.trim();
        match key {
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "unroll_steps" => self.unroll_steps = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "sense_learning_rate" => self.sense_learning_rate = parse(key, v)?,
            "n_context" => self.n_context = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "cluster_proj_dim" => self.cluster_proj_dim = parse(key, v)?,
            "proj_update_interval" => self.proj_update_interval = parse(key, v)?,
            "pca_sample" => self.pca_sample = parse(key, &v.replace(',', ""))?,
            "proj_offer_stride" => self.proj_offer_stride = parse(key, v)?,
            "prune_interval" => self.prune_interval = parse(key, v)?,
            "remove_less_freqent_contexts" => self.remove_less_freqent_contexts = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, &v.replace(',', ""))?,
            "warmup_policy" => self.warmup_policy = v.parse()?,
            "mode" => self.mode = v.parse()?,
            "mask_rate" => self.mask_rate = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            "metrics_interval" => self.metrics_interval = parse(key, v)?,
            "objective" => self.objective = v.parse()?,
            "center_init_std" => self.center_init_std = parse(key, v)?,
            "all_clip_norm_val" => self.all_clip_norm_val = parse(key, v)?,
            "min_count" => self.min_count = parse(key, v)?,
            "add_identity" => self.add_identity = parse_bool(key, v)?,
            "symmetrize_dictionary" => self.symmetrize_dictionary = parse_bool(key, v)?,
            _ => unreachable!("canonical key without setter: {key}"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let key = canonical_key(key)?;
        Some(match key {
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "unroll_steps" => self.unroll_steps.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "sense_learning_rate" => self.sense_learning_rate.to_string(),
            "n_context" => self.n_context.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "cluster_proj_dim" => self.cluster_proj_dim.to_string(),
            "proj_update_interval" => self.proj_update_interval.to_string(),
            "pca_sample" => self.pca_sample.to_string(),
            "proj_offer_stride" => self.proj_offer_stride.to_string(),
            "prune_interval" => self.prune_interval.to_string(),
            "remove_less_freqent_contexts" => self.remove_less_freqent_contexts.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "warmup_policy" => self.warmup_policy.as_str().to_string(),
            "mode" => self.mode.as_str().to_string(),
            "mask_rate" => self.mask_rate.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            "metrics_interval" => self.metrics_interval.to_string(),
            "objective" => self.objective.as_str().to_string(),
            "center_init_std" => self.center_init_std.to_string(),
            "all_clip_norm_val" => self.all_clip_norm_val.to_string(),
            "min_count" => self.min_count.to_string(),
            "add_identity" => self.add_identity.to_string(),
            "symmetrize_dictionary" => self.symmetrize_dictionary.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key in canonical order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in CONFIG_KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_context < 1 {
            return fail("n_context must be >= 1".into());
        }
        if self.hidden_dim < 1 || self.embed_dim < 1 {
            return fail("dimensions must be >= 1".into());
        }
        if self.cluster_proj_dim < 1 || self.cluster_proj_dim > self.hidden_dim {
            return fail(format!(
                "cluster_proj_dim must be in 1..={}",
                self.hidden_dim
            ));
        }
        if self.warmup_steps > 0 && self.warmup_steps >= self.steps {
            return fail(format!(
                "warmup_steps ({}) must be smaller than steps ({})",
                self.warmup_steps, self.steps
            ));
        }
        if self.warmup_policy == WarmupPolicy::DiscardWarmupSense && self.n_context < 2 {
            return fail("discard_warmup_sense requires n_context >= 2".into());
        }
        if self.objective == Objective::Baseline && self.n_context != 1 {
            return fail("the baseline objective requires n_context = 1".into());
        }
        if !(0.0..1.0).contains(&self.remove_less_freqent_contexts) {
            return fail("remove_less_freqent_contexts must be in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.sense_learning_rate) {
            return fail("sense_learning_rate must be in [0, 1]".into());
        }
        if !(self.learning_rate > 0.0) || !(self.all_clip_norm_val > 0.0) {
            return fail("learning_rate and all_clip_norm_val must be positive".into());
        }
        if self.proj_update_interval < 1 || self.pca_sample < 1 || self.proj_offer_stride < 1 {
            return fail("projection interval, queue size and stride must be >= 1".into());
        }
        if self.metrics_interval < 1 {
            return fail("metrics_interval must be >= 1".into());
        }
        self.stream_config().validate()
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            batch_size: self.batch_size,
            unroll_steps: self.unroll_steps,
            mode: self.mode,
            mask_rate: self.mask_rate,
            seed: crate::derive_seed(self.seed, crate::SeedStream::Batches),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("n_context", "6").unwrap();
        cfg.set("warmup_policy", "discard_warmup_sense").unwrap();
        cfg.set("mode", "masked").unwrap();
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn alias_keys_map_to_canonical_keys() {
        let cfg = TrainConfig::from_text(
            "pca_sample = 20,000\ncontextual_warmup = 20,000 # warm-up\npca_dim = 14\nsteps = 40000\n",
        )
        .unwrap();
        assert_eq!(cfg.pca_sample, 20_000);
        assert_eq!(cfg.warmup_steps, 20_000);
        assert_eq!(cfg.cluster_proj_dim, 14);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(TrainConfig::from_text("nope = 1").is_err());
        assert!(TrainConfig::from_text("steps = many").is_err());
        assert!(TrainConfig::from_text("steps").is_err());
    }

    #[test]
    fn validation_guards() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.n_context = 1;
        cfg.warmup_policy = WarmupPolicy::DiscardWarmupSense;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig {
            steps: 10,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.warmup_steps = 0;
        cfg.validate().unwrap();
        cfg.objective = Objective::Baseline;
        assert!(cfg.validate().is_err());
        cfg.n_context = 1;
        cfg.validate().unwrap();
    }
}
