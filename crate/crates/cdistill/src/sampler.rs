//! Contrastive sampling: walk expert trajectories, keep the steps where
//! the expert and a weaker amateur disagree, and build masked soft labels
//! from their probability ratio.
//!
//! For a retained step with expert distribution `p` and amateur
//! distribution `q`, the support keeps the tokens with `p(a) >= alpha *
//! max_a p`, each supported token gets the score `ln p(a) - ln max(q(a),
//! epsilon)`, and the label is the softmax of those scores over the
//! support. Steps are retained when the expert-to-amateur KL divergence
//! exceeds `beta`. Samples round-trip through a line-oriented JSON file
//! with a single header line.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::derive_seed;
use crate::dist::{
    kl_divergence, softmax, TokenDistribution, TokenId, TokenSequence, Vocabulary, MAX_FLOOR,
};
use crate::fsutil::atomic_write_with;
use crate::models::{generate_trajectory, DecodeConfig, LanguageModel};
use crate::{Error, Result};

/// Settings for one sampling pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Support mask threshold, relative to the expert's top probability.
    pub alpha: f64,
    /// Step selection threshold on the expert-to-amateur KL divergence.
    pub beta: f64,
    /// Floor for amateur probabilities inside log ratios.
    pub epsilon: f64,
    pub decode: DecodeConfig,
    /// When false, every generated step is kept regardless of `beta`.
    pub select_steps: bool,
    /// When false, labels renormalize the expert over the support instead
    /// of contrasting against the amateur.
    pub contrast_targets: bool,
    /// Identifies the pass in sample file headers.
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta {} must be finite and non-negative",
                self.beta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= MAX_FLOOR) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {} outside (0, {MAX_FLOOR}]",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// A prompt to sample from, tagged with a stable id. The id seeds the
/// per-problem decode stream, so results do not depend on problem order
/// or worker count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingProblem {
    pub id: String,
    pub prompt: Vec<TokenId>,
}

/// One retained step: the prefix it was taken at, the masked support, and
/// the soft label with its scores. `target` and `scores` are parallel to
/// `support`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveSample {
    pub problem_id: String,
    /// Position of the step inside the completion, counted from 0.
    pub step: usize,
    pub prefix: TokenSequence,
    pub support: Vec<TokenId>,
    pub target: Vec<f64>,
    pub scores: Vec<f64>,
    pub kl: f64,
}

impl ContrastiveSample {
    /// Label expanded to a dense vector over the full vocabulary.
    pub fn dense_target(&self, vocab_len: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_len];
        for (a, t) in self.support.iter().zip(&self.target) {
            out[*a as usize] = *t;
        }
        out
    }
}

/// Totals for one sampling pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSummary {
    pub problems: usize,
    pub steps_generated: usize,
    pub steps_retained: usize,
    /// Sum of support sizes over retained steps.
    pub tokens_retained: usize,
}

/// Strict threshold rule for keeping a step.
pub fn select_step(kl: f64, beta: f64) -> bool {
    kl > beta
}

/// Token ids with expert probability at least `alpha` times the expert's
/// maximum, ascending. Never empty for a valid distribution.
pub fn masked_support(expert: &TokenDistribution, alpha: f64) -> Result<Vec<TokenId>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
    }
    let max = expert
        .probs()
        .iter()
        .fold(f64::NEG_INFINITY, |m, &p| m.max(p));
    let threshold = alpha * max;
    Ok(expert
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(i, _)| i as TokenId)
        .collect())
}

/// Log ratios `ln p(a) - ln max(q(a), epsilon)` over the support.
pub fn contrast_scores(
    expert: &TokenDistribution,
    amateur: &TokenDistribution,
    support: &[TokenId],
    epsilon: f64,
) -> Result<Vec<f64>> {
    if expert.len() != amateur.len() {
        return Err(Error::LengthMismatch {
            what: "contrast_scores",
            left: expert.len(),
            right: amateur.len(),
        });
    }
    if !(epsilon > 0.0 && epsilon <= MAX_FLOOR) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside (0, {MAX_FLOOR}]"
        )));
    }
    if support.is_empty() {
        return Err(Error::Empty("support"));
    }
    let mut scores = Vec::with_capacity(support.len());
    for &a in support {
        if a as usize >= expert.len() {
            return Err(Error::TokenOutOfRange {
                id: a,
                vocab: expert.len(),
            });
        }
        let p = expert.prob(a);
        if p <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "support token {a} has zero expert probability"
            )));
        }
        scores.push(p.ln() - amateur.prob(a).max(epsilon).ln());
    }
    Ok(scores)
}

/// Contrastive label: scores and their softmax over the support.
pub fn contrast_target(
    expert: &TokenDistribution,
    amateur: &TokenDistribution,
    support: &[TokenId],
    epsilon: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let scores = contrast_scores(expert, amateur, support, epsilon)?;
    let target = softmax(&scores)?;
    Ok((scores, target))
}

/// Mask-only label: the expert restricted to the support and renormalized.
pub fn renormalized_target(expert: &TokenDistribution, support: &[TokenId]) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(Error::Empty("support"));
    }
    let mut mass = 0.0;
    for &a in support {
        if a as usize >= expert.len() {
            return Err(Error::TokenOutOfRange {
                id: a,
                vocab: expert.len(),
            });
        }
        mass += expert.prob(a);
    }
    if mass <= 0.0 {
        return Err(Error::InvalidArgument(
            "support carries no expert probability".into(),
        ));
    }
    Ok(support.iter().map(|&a| expert.prob(a) / mass).collect())
}

/// Decode settings for one problem: the shared stream seed is re-derived
/// from the problem id.
pub fn per_problem_decode(decode: &DecodeConfig, problem_id: &str) -> DecodeConfig {
    DecodeConfig {
        seed: derive_seed(decode.seed, problem_id),
        ..decode.clone()
    }
}

/// Samples one problem: decodes an expert trajectory, scores every step
/// against the amateur, and keeps the informative ones. Returns the
/// retained samples and the number of steps generated.
pub fn sample_problem(
    expert: &dyn LanguageModel,
    amateur: &dyn LanguageModel,
    problem: &SamplingProblem,
    cfg: &SamplerConfig,
) -> Result<(Vec<ContrastiveSample>, usize)> {
    cfg.validate()?;
    check_vocabs(expert.vocab(), amateur.vocab())?;
    let decode = per_problem_decode(&cfg.decode, &problem.id);
    let (seq, records) = generate_trajectory(expert, &problem.prompt, &decode)?;
    let steps_generated = records.len();
    let mut samples = Vec::new();
    for record in &records {
        let prefix_ids = seq.ids()[..problem.prompt.len() + record.position].to_vec();
        let prefix = TokenSequence::new(prefix_ids, problem.prompt.len())?;
        let amateur_dist = amateur.next_distribution(&prefix)?;
        let kl = kl_divergence(&record.dist, &amateur_dist, cfg.epsilon)?;
        if cfg.select_steps && !select_step(kl, cfg.beta) {
            continue;
        }
        let support = masked_support(&record.dist, cfg.alpha)?;
        let (scores, target) = if cfg.contrast_targets {
            contrast_target(&record.dist, &amateur_dist, &support, cfg.epsilon)?
        } else {
            let scores = contrast_scores(&record.dist, &amateur_dist, &support, cfg.epsilon)?;
            let target = renormalized_target(&record.dist, &support)?;
            (scores, target)
        };
        samples.push(ContrastiveSample {
            problem_id: problem.id.clone(),
            step: record.position,
            prefix,
            support,
            target,
            scores,
            kl,
        });
    }
    Ok((samples, steps_generated))
}

/// Runs [`sample_problem`] over a problem list, fanning out across `jobs`
/// worker threads. Output order follows input order and is identical for
/// any worker count.
pub fn run_sampling(
    expert: &dyn LanguageModel,
    amateur: &dyn LanguageModel,
    problems: &[SamplingProblem],
    cfg: &SamplerConfig,
    jobs: usize,
) -> Result<(Vec<ContrastiveSample>, SamplingSummary)> {
    use rayon::prelude::*;

    cfg.validate()?;
    check_vocabs(expert.vocab(), amateur.vocab())?;
    if jobs == 0 {
        return Err(Error::InvalidArgument("jobs must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("building worker pool: {e}")))?;
    let per_problem: Vec<(Vec<ContrastiveSample>, usize)> = pool.install(|| {
        problems
            .par_iter()
            .map(|p| sample_problem(expert, amateur, p, cfg))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut samples = Vec::new();
    let mut steps_generated = 0;
    for (mut s, generated) in per_problem {
        steps_generated += generated;
        samples.append(&mut s);
    }
    let summary = SamplingSummary {
        problems: problems.len(),
        steps_generated,
        steps_retained: samples.len(),
        tokens_retained: samples.iter().map(|s| s.support.len()).sum(),
    };
    Ok((samples, summary))
}

fn check_vocabs(expert: &Vocabulary, amateur: &Vocabulary) -> Result<()> {
    if expert != amateur {
        return Err(Error::VocabularyMismatch(format!(
            "expert vocabulary {} does not match amateur vocabulary {}",
            expert.fingerprint(),
            amateur.fingerprint()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sample files
// ---------------------------------------------------------------------------

/// First line of a sample file: the thresholds the pass ran with and the
/// fingerprint of the vocabulary the token ids refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesHeader {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub vocab_hash: String,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    problem_id: String,
    step: usize,
    prefix: Vec<TokenId>,
    support: Vec<TokenId>,
    target: Vec<f64>,
    scores: Vec<f64>,
    kl: f64,
}

/// Writes samples as one JSON object per line, header first.
pub fn write_samples(
    path: &Path,
    header: &SamplesHeader,
    samples: &[ContrastiveSample],
) -> Result<()> {
    atomic_write_with(path, |w| {
        serde_json::to_writer(&mut *w, header).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
        for s in samples {
            let record = SampleRecord {
                problem_id: s.problem_id.clone(),
                step: s.step,
                prefix: s.prefix.ids().to_vec(),
                support: s.support.clone(),
                target: s.target.clone(),
                scores: s.scores.clone(),
                kl: s.kl,
            };
            serde_json::to_writer(&mut *w, &record).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Reads a sample file back. Errors carry the offending line number.
pub fn read_samples(path: &Path) -> Result<(SamplesHeader, Vec<ContrastiveSample>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let header: SamplesHeader = match lines.next() {
        None => return Err(Error::parse(path, 1, "empty sample file")),
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::parse(path, 1, e.to_string()))?
        }
    };
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        samples.push(validate_record(record, path, lineno)?);
    }
    Ok((header, samples))
}

fn validate_record(record: SampleRecord, path: &Path, lineno: usize) -> Result<ContrastiveSample> {
    if record.support.is_empty() {
        return Err(Error::parse(path, lineno, "empty support"));
    }
    if !record.support.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::parse(path, lineno, "support not strictly ascending"));
    }
    if record.target.len() != record.support.len() || record.scores.len() != record.support.len() {
        return Err(Error::parse(
            path,
            lineno,
            format!(
                "support/target/scores lengths differ: {}/{}/{}",
                record.support.len(),
                record.target.len(),
                record.scores.len()
            ),
        ));
    }
    let mut mass = 0.0;
    for &t in &record.target {
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::parse(path, lineno, format!("bad target weight {t}")));
        }
        mass += t;
    }
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::parse(
            path,
            lineno,
            format!("target mass {mass} not within 1e-6 of 1"),
        ));
    }
    if !record.kl.is_finite() {
        return Err(Error::parse(path, lineno, format!("bad kl {}", record.kl)));
    }
    Ok(ContrastiveSample {
        problem_id: record.problem_id,
        step: record.step,
        prefix: TokenSequence::from_prompt(record.prefix),
        support: record.support,
        target: record.target,
        scores: record.scores,
        kl: record.kl,
    })
}
