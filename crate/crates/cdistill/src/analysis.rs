//! Diagnostics over expert/amateur disagreement, retained-label statistics,
//! and work accounting for pipeline comparisons. Everything renders to small
//! CSV tables; plotting stays out of scope.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dist::{kl_divergence, TokenSequence};
use crate::models::{generate_trajectory, LanguageModel};
use crate::sampler::{per_problem_decode, ContrastiveSample, SamplerConfig, SamplingProblem};
use crate::{Error, Result};

/// Width of the interior histogram bins.
const BIN_WIDTH: f64 = 0.1;
/// Interior bins cover [0, 1); everything at or above goes to the overflow.
const INTERIOR_BINS: usize = 10;
/// Divergence above which a step counts as strongly divergent.
const HIGH_KL: f64 = 0.4;

// ---------------------------------------------------------------------------
// Divergence report
// ---------------------------------------------------------------------------

/// Per-step KL statistics over full trajectories, with no step filtering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub steps: usize,
    /// Lower edges of the bins: `[0.0, 0.1, .., 1.0]`. `counts[i]` holds
    /// `[edges[i], edges[i] + 0.1)` and the final count holds everything at
    /// or above 1.0, so there is one count per edge.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Fraction of steps with KL in [0, 0.1).
    pub frac_low: f64,
    /// Fraction of steps with KL strictly above 0.4.
    pub frac_high: f64,
    /// Mean KL over steps where both models pick the same top token;
    /// absent when no step agrees.
    pub mean_kl_agreement: Option<f64>,
    /// Mean KL over steps where the top tokens differ; absent when every
    /// step agrees.
    pub mean_kl_disagreement: Option<f64>,
    /// Fraction of agreement steps whose KL still exceeds 0.4.
    pub frac_agreement_high: Option<f64>,
}

/// Histogram bin index for one KL value. Tiny negative values from float
/// round-off land in the first bin.
pub fn kl_bin(kl: f64) -> usize {
    let kl = kl.max(0.0);
    if kl >= BIN_WIDTH * INTERIOR_BINS as f64 {
        INTERIOR_BINS
    } else {
        (kl / BIN_WIDTH) as usize
    }
}

/// Decodes every problem with the expert, queries the amateur on each
/// prefix, and aggregates per-step divergence. No β-filter is applied; the
/// decode streams match the sampler's, so per-step KL values agree with a
/// sampling run over the same problems to float precision.
pub fn divergence_report(
    expert: &dyn LanguageModel,
    amateur: &dyn LanguageModel,
    problems: &[SamplingProblem],
    cfg: &SamplerConfig,
) -> Result<DivergenceReport> {
    cfg.validate()?;
    let mut counts = vec![0usize; INTERIOR_BINS + 1];
    let mut steps = 0usize;
    let mut low = 0usize;
    let mut high = 0usize;
    let mut agree_steps = 0usize;
    let mut agree_sum = 0.0f64;
    let mut agree_high = 0usize;
    let mut disagree_steps = 0usize;
    let mut disagree_sum = 0.0f64;
    for problem in problems {
        let decode = per_problem_decode(&cfg.decode, &problem.id);
        let (seq, records) = generate_trajectory(expert, &problem.prompt, &decode)?;
        for record in &records {
            let prefix_ids = seq.ids()[..problem.prompt.len() + record.position].to_vec();
            let prefix = TokenSequence::new(prefix_ids, problem.prompt.len())?;
            let amateur_dist = amateur.next_distribution(&prefix)?;
            let kl = kl_divergence(&record.dist, &amateur_dist, cfg.epsilon)?;
            steps += 1;
            counts[kl_bin(kl)] += 1;
            if kl.max(0.0) < BIN_WIDTH {
                low += 1;
            }
            if kl > HIGH_KL {
                high += 1;
            }
            if record.dist.top1() == amateur_dist.top1() {
                agree_steps += 1;
                agree_sum += kl;
                if kl > HIGH_KL {
                    agree_high += 1;
                }
            } else {
                disagree_steps += 1;
                disagree_sum += kl;
            }
        }
    }
    let frac = |c: usize| if steps == 0 { 0.0 } else { c as f64 / steps as f64 };
    Ok(DivergenceReport {
        steps,
        edges: (0..=INTERIOR_BINS).map(|i| i as f64 * BIN_WIDTH).collect(),
        counts,
        frac_low: frac(low),
        frac_high: frac(high),
        mean_kl_agreement: (agree_steps > 0).then(|| agree_sum / agree_steps as f64),
        mean_kl_disagreement: (disagree_steps > 0).then(|| disagree_sum / disagree_steps as f64),
        frac_agreement_high: (agree_steps > 0).then(|| agree_high as f64 / agree_steps as f64),
    })
}

impl DivergenceReport {
    /// One row per bin; the overflow row has an empty upper edge.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, &count) in self.counts.iter().enumerate() {
            let lo = self.edges[i];
            if i < INTERIOR_BINS {
                let _ = writeln!(out, "{lo},{},{count}", lo + BIN_WIDTH);
            } else {
                let _ = writeln!(out, "{lo},,{count}");
            }
        }
        out
    }

    /// Scalar summary; absent conditional means render as `NA`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "steps,{}", self.steps);
        let _ = writeln!(out, "frac_low,{}", self.frac_low);
        let _ = writeln!(out, "frac_high,{}", self.frac_high);
        let _ = writeln!(out, "mean_kl_agreement,{}", na(self.mean_kl_agreement));
        let _ = writeln!(out, "mean_kl_disagreement,{}", na(self.mean_kl_disagreement));
        let _ = writeln!(out, "frac_agreement_high,{}", na(self.frac_agreement_high));
        out
    }
}

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

// ---------------------------------------------------------------------------
// Label statistics
// ---------------------------------------------------------------------------

/// Retained labels at one completion position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositionRate {
    pub step: usize,
    pub count: usize,
    /// Retained labels at this position per sampled trajectory.
    pub rate: f64,
}

/// Shape statistics of a retained sample set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelStatsReport {
    pub samples: usize,
    /// Distinct problem ids among the samples.
    pub problems: usize,
    pub single_token_fraction: f64,
    pub mean_support_size: f64,
    /// Samples over generated steps, when the generation total is known.
    pub retained_rate: Option<f64>,
    pub per_position: Vec<PositionRate>,
}

/// Aggregates label shape over samples. `steps_generated` is the total
/// number of generated steps the samples were filtered from, when known.
pub fn label_stats(
    samples: &[ContrastiveSample],
    steps_generated: Option<usize>,
) -> Result<LabelStatsReport> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let problems: BTreeSet<&str> = samples.iter().map(|s| s.problem_id.as_str()).collect();
    let single = samples.iter().filter(|s| s.support.len() == 1).count();
    let support_total: usize = samples.iter().map(|s| s.support.len()).sum();
    let last_step = samples.iter().map(|s| s.step).max().unwrap_or(0);
    let mut per_position: Vec<PositionRate> = (0..=last_step)
        .map(|step| PositionRate {
            step,
            count: 0,
            rate: 0.0,
        })
        .collect();
    for s in samples {
        per_position[s.step].count += 1;
    }
    for row in &mut per_position {
        row.rate = row.count as f64 / problems.len() as f64;
    }
    Ok(LabelStatsReport {
        samples: samples.len(),
        problems: problems.len(),
        single_token_fraction: single as f64 / samples.len() as f64,
        mean_support_size: support_total as f64 / samples.len() as f64,
        retained_rate: steps_generated.map(|g| samples.len() as f64 / g as f64),
        per_position,
    })
}

impl LabelStatsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,step,value\n");
        let _ = writeln!(out, "samples,,{}", self.samples);
        let _ = writeln!(out, "problems,,{}", self.problems);
        let _ = writeln!(out, "single_token_fraction,,{}", self.single_token_fraction);
        let _ = writeln!(out, "mean_support_size,,{}", self.mean_support_size);
        let _ = writeln!(out, "retained_rate,,{}", na(self.retained_rate));
        for row in &self.per_position {
            let _ = writeln!(out, "position_rate,{},{}", row.step, row.rate);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Efficiency accounting
// ---------------------------------------------------------------------------

/// Work performed by one fine-tuning pipeline, in comparable units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineCounters {
    /// Problems the pipeline decoded.
    pub problems: usize,
    /// Token positions that received a training label.
    pub tuned_tokens: usize,
    pub wall_time_s: f64,
}

/// Side-by-side counters with contrastive-over-baseline ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub contrastive: PipelineCounters,
    pub baseline: PipelineCounters,
    /// Each ratio is contrastive over baseline, absent when the baseline
    /// count is zero.
    pub problem_ratio: Option<f64>,
    pub token_ratio: Option<f64>,
    pub wall_time_ratio: Option<f64>,
}

pub fn efficiency_report(
    contrastive: &PipelineCounters,
    baseline: &PipelineCounters,
) -> EfficiencyReport {
    let ratio = |a: f64, b: f64| (b != 0.0).then(|| a / b);
    EfficiencyReport {
        contrastive: *contrastive,
        baseline: *baseline,
        problem_ratio: ratio(contrastive.problems as f64, baseline.problems as f64),
        token_ratio: ratio(contrastive.tuned_tokens as f64, baseline.tuned_tokens as f64),
        wall_time_ratio: ratio(contrastive.wall_time_s, baseline.wall_time_s),
    }
}

impl EfficiencyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,contrastive,baseline,ratio\n");
        let _ = writeln!(
            out,
            "problems,{},{},{}",
            self.contrastive.problems,
            self.baseline.problems,
            na(self.problem_ratio)
        );
        let _ = writeln!(
            out,
            "tuned_tokens,{},{},{}",
            self.contrastive.tuned_tokens,
            self.baseline.tuned_tokens,
            na(self.token_ratio)
        );
        let _ = writeln!(
            out,
            "wall_time_s,{},{},{}",
            self.contrastive.wall_time_s,
            self.baseline.wall_time_s,
            na(self.wall_time_ratio)
        );
        out
    }
}
