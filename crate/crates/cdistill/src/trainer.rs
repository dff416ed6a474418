//! Fine-tuning on contrastive samples.
//!
//! The objective per sample is the forward KL from the soft label to the
//! model, `sum_a v(a) [ln v(a) - ln p(a)]`, whose gradient on the touched
//! logit row is simply `p - v`. [`fine_tune`] runs plain minibatch descent
//! over the sample list and records a loss/entropy trace. The module also
//! carries two diagnostic identities: the policy-gradient form of the same
//! gradient, and a first-order prediction for how one contrast-weighted
//! update moves the entropy of a single distribution.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dist::{TokenDistribution, TokenId, TokenSequence, MAX_FLOOR};
use crate::fsutil::atomic_write_with;
use crate::models::{KGramSoftmaxModel, LanguageModel};
use crate::sampler::{masked_support, ContrastiveSample};
use crate::{Error, Result};

/// Minibatch descent settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    /// Number of minibatch updates.
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Reshuffle the sample order at every epoch boundary.
    pub shuffle: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 0.1,
            steps: 1000,
            batch_size: 16,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainerConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// A loss that can be driven to positive infinity when the model assigns
/// zero mass to a labeled token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossValue {
    Finite(f64),
    Infinite,
}

impl LossValue {
    pub fn to_f64(self) -> f64 {
        match self {
            LossValue::Finite(x) => x,
            LossValue::Infinite => f64::INFINITY,
        }
    }
}

/// Forward KL from the sample label to the model's current prediction at
/// the sample prefix: `sum_a v(a) [ln v(a) - ln p(a)]`.
pub fn contrastive_loss(model: &dyn LanguageModel, sample: &ContrastiveSample) -> Result<LossValue> {
    validate_sample(sample, model.vocab().len())?;
    let p = model.next_distribution(&sample.prefix)?;
    let mut loss = 0.0;
    for (&a, &t) in sample.support.iter().zip(&sample.target) {
        if t == 0.0 {
            continue;
        }
        let pa = p.prob(a);
        if pa == 0.0 {
            return Ok(LossValue::Infinite);
        }
        loss += t * (t.ln() - pa.ln());
    }
    Ok(LossValue::Finite(loss))
}

/// Cross entropy of the model prediction under the sample label,
/// `-sum_a v(a) ln p(a)`. Differs from [`contrastive_loss`] by the label
/// entropy, a constant for the model.
pub fn cross_entropy_loss(
    model: &dyn LanguageModel,
    sample: &ContrastiveSample,
) -> Result<LossValue> {
    validate_sample(sample, model.vocab().len())?;
    let p = model.next_distribution(&sample.prefix)?;
    let mut loss = 0.0;
    for (&a, &t) in sample.support.iter().zip(&sample.target) {
        if t == 0.0 {
            continue;
        }
        let pa = p.prob(a);
        if pa == 0.0 {
            return Ok(LossValue::Infinite);
        }
        loss -= t * pa.ln();
    }
    Ok(LossValue::Finite(loss))
}

/// Analytic gradient of the sample loss on the one logit row the sample
/// touches: the row key and the dense row `p - v`.
pub fn loss_gradient(
    model: &KGramSoftmaxModel,
    sample: &ContrastiveSample,
) -> Result<(Vec<TokenId>, Vec<f64>)> {
    validate_sample(sample, model.vocab().len())?;
    sample.prefix.validate_against(model.vocab())?;
    let context = model.context_for(sample.prefix.ids());
    let p = model.distribution_for_context(&context)?;
    let mut grad = p.probs().to_vec();
    for (&a, &t) in sample.support.iter().zip(&sample.target) {
        grad[a as usize] -= t;
    }
    Ok((context, grad))
}

/// Same gradient assembled the policy-gradient way, as
/// `-sum_a v(a) grad ln p(a)`, compared entry-wise against
/// [`loss_gradient`]. Returns the largest absolute difference.
pub fn policy_gradient_identity_gap(
    model: &KGramSoftmaxModel,
    sample: &ContrastiveSample,
) -> Result<f64> {
    let (context, direct) = loss_gradient(model, sample)?;
    let p = model.distribution_for_context(&context)?;
    let v = sample.dense_target(model.vocab().len());
    let mut assembled = vec![0.0; model.vocab().len()];
    for (a, &va) in v.iter().enumerate() {
        if va == 0.0 {
            continue;
        }
        // grad_z ln p(a) has entries delta(a, j) - p(j).
        for (j, acc) in assembled.iter_mut().enumerate() {
            let indicator = if a == j { 1.0 } else { 0.0 };
            *acc -= va * (indicator - p.prob(j as TokenId));
        }
    }
    let gap = direct
        .iter()
        .zip(&assembled)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(gap)
}

/// Mean sample loss; infinite if any sample is infinitely surprising.
pub fn mean_contrastive_loss(
    model: &dyn LanguageModel,
    samples: &[ContrastiveSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("loss samples"));
    }
    let mut total = 0.0;
    for s in samples {
        match contrastive_loss(model, s)? {
            LossValue::Finite(x) => total += x,
            LossValue::Infinite => return Ok(f64::INFINITY),
        }
    }
    Ok(total / samples.len() as f64)
}

/// A hard label in sample form, used for teacher forcing.
pub fn one_hot_sample(
    problem_id: String,
    step: usize,
    prefix: TokenSequence,
    token: TokenId,
) -> ContrastiveSample {
    ContrastiveSample {
        problem_id,
        step,
        prefix,
        support: vec![token],
        target: vec![1.0],
        scores: vec![0.0],
        kl: 0.0,
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    /// Mean batch loss before the update.
    pub mean_loss: f64,
    /// Mean entropy of the touched rows after the update.
    pub mean_entropy: f64,
}

/// Loss and entropy per training step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub steps: Vec<TraceStep>,
}

impl TrainingTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_loss,mean_entropy\n");
        for s in &self.steps {
            use std::fmt::Write as _;
            let _ = writeln!(out, "{},{},{}", s.step, s.mean_loss, s.mean_entropy);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write_with(path, |w| {
            w.write_all(self.to_csv().as_bytes())?;
            Ok(())
        })
    }
}

/// Runs `cfg.steps` minibatch updates of plain gradient descent over
/// `samples` and returns the tuned model with its trace.
///
/// Batches are drawn without replacement within an epoch; the order is
/// reshuffled at each epoch boundary when `shuffle` is set. Several
/// samples in one batch can touch the same logit row; their gradients are
/// averaged so duplicated samples do not overdrive the row.
pub fn fine_tune(
    model: KGramSoftmaxModel,
    samples: &[ContrastiveSample],
    cfg: &TrainerConfig,
) -> Result<(KGramSoftmaxModel, TrainingTrace)> {
    cfg.validate()?;
    let mut model = model;
    let mut trace = TrainingTrace::default();
    if cfg.steps == 0 {
        return Ok((model, trace));
    }
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    for s in samples {
        validate_sample(s, model.vocab().len())?;
        s.prefix.validate_against(model.vocab())?;
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cursor = n;
    for step in 0..cfg.steps {
        if cursor >= n {
            if cfg.shuffle {
                order.shuffle(&mut rng);
            }
            cursor = 0;
        }
        let batch = &order[cursor..n.min(cursor + cfg.batch_size)];
        cursor += batch.len();

        let mut loss_total = 0.0;
        let mut grads: BTreeMap<Vec<TokenId>, (Vec<f64>, usize)> = BTreeMap::new();
        for &i in batch {
            loss_total += contrastive_loss(&model, &samples[i])?.to_f64();
            let (context, grad) = loss_gradient(&model, &samples[i])?;
            match grads.get_mut(&context) {
                Some((sum, count)) => {
                    for (s, g) in sum.iter_mut().zip(&grad) {
                        *s += g;
                    }
                    *count += 1;
                }
                None => {
                    grads.insert(context, (grad, 1));
                }
            }
        }
        let touched = grads.len();
        let mut entropy_total = 0.0;
        for (context, (sum, count)) in grads {
            let scale = cfg.learning_rate / count as f64;
            let row = model.row_mut(context.clone());
            for (w, g) in row.iter_mut().zip(&sum) {
                *w -= scale * g;
            }
            entropy_total += model.distribution_for_context(&context)?.entropy();
        }
        trace.steps.push(TraceStep {
            step,
            mean_loss: loss_total / batch.len() as f64,
            mean_entropy: entropy_total / touched as f64,
        });
    }
    Ok((model, trace))
}

fn validate_sample(sample: &ContrastiveSample, vocab_len: usize) -> Result<()> {
    if sample.support.is_empty() {
        return Err(Error::Empty("sample support"));
    }
    if sample.support.len() != sample.target.len() {
        return Err(Error::LengthMismatch {
            what: "sample target",
            left: sample.support.len(),
            right: sample.target.len(),
        });
    }
    let mut mass = 0.0;
    for (&a, &t) in sample.support.iter().zip(&sample.target) {
        if a as usize >= vocab_len {
            return Err(Error::TokenOutOfRange {
                id: a,
                vocab: vocab_len,
            });
        }
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::InvalidArgument(format!("bad target weight {t}")));
        }
        mass += t;
    }
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "target mass {mass} not within 1e-6 of 1"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Entropy probe
// ---------------------------------------------------------------------------

/// Settings for [`entropy_change_probe`]: the advantage temperature and
/// the update step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyProbe {
    pub temperature: f64,
    pub learning_rate: f64,
}

/// Measured and first-order-predicted entropy change for one probe update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyProbeReport {
    pub entropy_before: f64,
    pub entropy_after: f64,
    /// `entropy_after - entropy_before`.
    pub measured: f64,
    /// `-lr * Cov(ln p, p * advantage)` under the expert distribution.
    pub predicted: f64,
    /// `|measured - predicted|`; shrinks quadratically in the step size.
    pub residual: f64,
}

/// Applies one contrast-weighted update `z_a += lr * p(a) * A(a)` to the
/// expert's logits at a single state, where the advantage `A` is the
/// masked, temperature-scaled log-ratio against the amateur, and compares
/// the measured entropy change with its first-order prediction.
pub fn entropy_change_probe(
    expert: &TokenDistribution,
    amateur: &TokenDistribution,
    alpha: f64,
    epsilon: f64,
    probe: &EntropyProbe,
) -> Result<EntropyProbeReport> {
    if expert.len() != amateur.len() {
        return Err(Error::LengthMismatch {
            what: "entropy_change_probe",
            left: expert.len(),
            right: amateur.len(),
        });
    }
    if !(probe.temperature > 0.0 && probe.temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature {} must be positive and finite",
            probe.temperature
        )));
    }
    if !probe.learning_rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate {} must be finite",
            probe.learning_rate
        )));
    }
    if !(epsilon > 0.0 && epsilon <= MAX_FLOOR) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside (0, {MAX_FLOOR}]"
        )));
    }
    let support = masked_support(expert, alpha)?;
    let mut advantage = vec![0.0; expert.len()];
    for &a in &support {
        let p = expert.prob(a);
        let q = amateur.prob(a).max(epsilon);
        advantage[a as usize] = (p.ln() - q.ln()) / probe.temperature;
    }

    // Updated logits are ln p(a) + lr * p(a) * A(a); exponentiating gives
    // p(a) * exp(lr * p(a) * A(a)), which keeps zero-mass tokens at zero
    // without touching infinite logits.
    let lr = probe.learning_rate;
    let mut updated: Vec<f64> = expert
        .probs()
        .iter()
        .zip(&advantage)
        .map(|(&p, &a)| if p > 0.0 { p * (lr * p * a).exp() } else { 0.0 })
        .collect();
    let total: f64 = updated.iter().sum();
    for u in &mut updated {
        *u /= total;
    }
    let after = TokenDistribution::new(updated)?;

    // Cov under p of (ln p(a), p(a) A(a)); zero-mass tokens carry no
    // weight.
    let mut e_x = 0.0;
    let mut e_y = 0.0;
    let mut e_xy = 0.0;
    for (j, &p) in expert.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let x = p.ln();
        let y = p * advantage[j];
        e_x += p * x;
        e_y += p * y;
        e_xy += p * x * y;
    }
    let predicted = -lr * (e_xy - e_x * e_y);

    let entropy_before = expert.entropy();
    let entropy_after = after.entropy();
    let measured = entropy_after - entropy_before;
    Ok(EntropyProbeReport {
        entropy_before,
        entropy_after,
        measured,
        predicted,
        residual: (measured - predicted).abs(),
    })
}
