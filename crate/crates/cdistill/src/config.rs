//! Run configuration and seed derivation.
//!
//! A [`RunConfig`] carries every knob of the pipeline with fixed defaults,
//! can be loaded from a `key = value` file, and hands out the per-stage
//! configs (task, sampler, trainer, decoding). All randomness flows from
//! the single `seed` through [`derive_seed`], so two runs with the same
//! config produce byte-identical artifacts.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::dist::{Fnv1a, TokenId};
use crate::models::{DecodeConfig, DecodeMode};
use crate::sampler::SamplerConfig;
use crate::tasks::ArithmeticTaskSpec;
use crate::trainer::TrainerConfig;
use crate::{Error, Result};

/// Derives an independent stream seed from the global seed and a purpose
/// label. Pure function of its inputs, stable across platforms.
pub fn derive_seed(global: u64, label: &str) -> u64 {
    let mut h = Fnv1a::new();
    h.update(&global.to_le_bytes());
    h.update(label.as_bytes());
    mix(h.finish())
}

/// Final avalanche step (splitmix64) so related labels map to unrelated
/// seeds.
pub(crate) fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Every pipeline setting, with defaults chosen for the bundled modular
/// arithmetic task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub modulus: u32,
    pub chain_len: usize,
    pub expert_corpus_lines: usize,
    pub amateur_corpus_lines: usize,
    pub eval_size: usize,
    pub expert_rho: f64,
    pub amateur_rho: f64,
    /// Context length for both models. The default covers a whole worked
    /// line of the default task, so fitted rows never mix distinct
    /// problems.
    pub order: usize,
    pub smoothing: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub greedy: bool,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub sample_problems: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    pub select_steps: bool,
    pub contrast_targets: bool,
    /// Sampling worker count; 0 means one per available core.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            modulus: 7,
            chain_len: 3,
            expert_corpus_lines: 1400,
            amateur_corpus_lines: 2400,
            eval_size: 300,
            expert_rho: 0.15,
            amateur_rho: 0.60,
            order: 12,
            smoothing: 0.05,
            alpha: 0.2,
            beta: 0.4,
            epsilon: 1e-12,
            greedy: true,
            temperature: 1.0,
            max_new_tokens: 128,
            sample_problems: 400,
            learning_rate: 0.1,
            steps: 1000,
            batch_size: 16,
            shuffle: true,
            select_steps: true,
            contrast_targets: true,
            jobs: 0,
        }
    }
}

impl RunConfig {
    /// Loads settings from a `key = value` file. Blank lines and lines
    /// starting with `#` are skipped; unknown or repeated keys are errors.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(path, lineno, format!("expected key = value, got {line:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if let Some(&first) = seen.get(key) {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("key {key:?} already set on line {first}"),
                ));
            }
            seen.insert(key.to_string(), lineno);
            cfg.set(key, value, path, lineno)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, path: &Path, line: usize) -> Result<()> {
        fn parse<T: std::str::FromStr>(
            value: &str,
            key: &str,
            path: &Path,
            line: usize,
        ) -> Result<T> {
            value.parse().map_err(|_| {
                Error::parse(path, line, format!("bad value {value:?} for {key}"))
            })
        }
        match key {
            "seed" => self.seed = parse(value, key, path, line)?,
            "modulus" => self.modulus = parse(value, key, path, line)?,
            "chain_len" => self.chain_len = parse(value, key, path, line)?,
            "expert_corpus_lines" => self.expert_corpus_lines = parse(value, key, path, line)?,
            "amateur_corpus_lines" => self.amateur_corpus_lines = parse(value, key, path, line)?,
            "eval_size" => self.eval_size = parse(value, key, path, line)?,
            "expert_rho" => self.expert_rho = parse(value, key, path, line)?,
            "amateur_rho" => self.amateur_rho = parse(value, key, path, line)?,
            "order" => self.order = parse(value, key, path, line)?,
            "smoothing" => self.smoothing = parse(value, key, path, line)?,
            "alpha" => self.alpha = parse(value, key, path, line)?,
            "beta" => self.beta = parse(value, key, path, line)?,
            "epsilon" => self.epsilon = parse(value, key, path, line)?,
            "greedy" => self.greedy = parse(value, key, path, line)?,
            "temperature" => self.temperature = parse(value, key, path, line)?,
            "max_new_tokens" => self.max_new_tokens = parse(value, key, path, line)?,
            "sample_problems" => self.sample_problems = parse(value, key, path, line)?,
            "learning_rate" => self.learning_rate = parse(value, key, path, line)?,
            "steps" => self.steps = parse(value, key, path, line)?,
            "batch_size" => self.batch_size = parse(value, key, path, line)?,
            "shuffle" => self.shuffle = parse(value, key, path, line)?,
            "select_steps" => self.select_steps = parse(value, key, path, line)?,
            "contrast_targets" => self.contrast_targets = parse(value, key, path, line)?,
            "jobs" => self.jobs = parse(value, key, path, line)?,
            other => {
                return Err(Error::parse(path, line, format!("unknown key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(2..=10).contains(&self.modulus) {
            problems.push(format!("modulus {} outside 2..=10", self.modulus));
        }
        if self.chain_len == 0 {
            problems.push("chain_len must be at least 1".into());
        }
        if self.expert_corpus_lines == 0 || self.amateur_corpus_lines == 0 {
            problems.push("corpus line counts must be positive".into());
        }
        if self.eval_size == 0 {
            problems.push("eval_size must be positive".into());
        }
        for (name, rho) in [("expert_rho", self.expert_rho), ("amateur_rho", self.amateur_rho)] {
            if !(0.0..=1.0).contains(&rho) {
                problems.push(format!("{name} {rho} outside [0, 1]"));
            }
        }
        if self.order == 0 {
            problems.push("order must be at least 1".into());
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            problems.push(format!("smoothing {} must be positive", self.smoothing));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            problems.push(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            problems.push(format!("beta {} must be finite and non-negative", self.beta));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= crate::dist::MAX_FLOOR) {
            problems.push(format!(
                "epsilon {} outside (0, {}]",
                self.epsilon,
                crate::dist::MAX_FLOOR
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push(format!("temperature {} must be positive", self.temperature));
        }
        if self.max_new_tokens == 0 {
            problems.push("max_new_tokens must be positive".into());
        }
        if self.sample_problems == 0 {
            problems.push("sample_problems must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Task spec for the stronger corpus. Expert and amateur share the
    /// same task seed so they describe the same problem stream and the
    /// same corruption sites, differing only in corruption rate and size.
    pub fn expert_task_spec(&self) -> ArithmeticTaskSpec {
        ArithmeticTaskSpec {
            modulus: self.modulus,
            chain_len: self.chain_len,
            corruption: self.expert_rho,
            train_size: self.expert_corpus_lines,
            eval_size: self.eval_size,
            seed: derive_seed(self.seed, "corpus"),
        }
    }

    pub fn amateur_task_spec(&self) -> ArithmeticTaskSpec {
        ArithmeticTaskSpec {
            modulus: self.modulus,
            chain_len: self.chain_len,
            corruption: self.amateur_rho,
            train_size: self.amateur_corpus_lines,
            eval_size: self.eval_size,
            seed: derive_seed(self.seed, "corpus"),
        }
    }

    pub fn decode_config(&self, eos: Option<TokenId>) -> DecodeConfig {
        DecodeConfig {
            mode: if self.greedy {
                DecodeMode::Greedy
            } else {
                DecodeMode::Sample {
                    temperature: self.temperature,
                }
            },
            max_new_tokens: self.max_new_tokens,
            seed: derive_seed(self.seed, "decode"),
            eos,
        }
    }

    pub fn sampler_config(&self, eos: Option<TokenId>) -> SamplerConfig {
        SamplerConfig {
            alpha: self.alpha,
            beta: self.beta,
            epsilon: self.epsilon,
            decode: self.decode_config(eos),
            select_steps: self.select_steps,
            contrast_targets: self.contrast_targets,
            seed: derive_seed(self.seed, "sampler"),
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: derive_seed(self.seed, "trainer"),
            shuffle: self.shuffle,
        }
    }

    /// Worker count with 0 resolved to the machine's parallelism.
    pub fn effective_jobs(&self) -> usize {
        if self.jobs == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.jobs
        }
    }
}
