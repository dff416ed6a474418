//! Modular-sum chains, the bundled synthetic task.
//!
//! A problem presents `L` operands and asks for all running sums modulo `m`.
//! Its worked solution writes every partial, so a line for `3+4+2` under
//! `m = 7` reads:
//!
//! ```text
//! 3+4+2=3,0,2.
//! ```
//!
//! Corpora are corrupted at a controlled rate to manufacture an expertise
//! gap between two models trained on the same problem stream. Corruption is
//! clustered: a per-(problem, slot) site hash decides whether a site can be
//! touched at all, and each written occurrence inside an affected site then
//! flips an independent coin. The site pool never narrows below a quarter of
//! all sites, so a low rate yields many partially corrupted sites (mixed
//! evidence) while a high rate overwrites its sites outright. Two specs that
//! share a seed corrupt nested site sets and agree on the replacement digit,
//! whatever their rates.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, mix};
use crate::dist::{Fnv1a, TokenId, TokenSequence, Vocabulary};
use crate::fsutil::atomic_write;
use crate::models::{generate_trajectory, DecodeConfig, KGramSoftmaxModel, LanguageModel};
use crate::sampler::{per_problem_decode, SamplingProblem};
use crate::trainer::{fine_tune, one_hot_sample, TrainerConfig, TrainingTrace};
use crate::{Error, Result};

/// Fraction of sites that stays corruptible even at low rates. Keeping the
/// pool at least this wide concentrates low-rate corruption into mixed
/// sites instead of smearing fully corrupted ones across the corpus.
const SITE_FLOOR: f64 = 0.25;

// ---------------------------------------------------------------------------
// Vocabulary layout
// ---------------------------------------------------------------------------

/// Digits `0..m` take ids `0..m`, followed by the four structural tokens.
pub fn task_vocabulary(modulus: u32) -> Result<Vocabulary> {
    check_modulus(modulus)?;
    let mut tokens: Vec<String> = (0..modulus).map(|d| d.to_string()).collect();
    tokens.extend(["+", "=", ",", "."].map(String::from));
    Vocabulary::new(tokens)
}

pub fn plus_id(modulus: u32) -> TokenId {
    modulus
}

pub fn equals_id(modulus: u32) -> TokenId {
    modulus + 1
}

pub fn comma_id(modulus: u32) -> TokenId {
    modulus + 2
}

/// The full stop ending every solution; use it as the decoding eos.
pub fn stop_id(modulus: u32) -> TokenId {
    modulus + 3
}

fn check_modulus(modulus: u32) -> Result<()> {
    if !(2..=10).contains(&modulus) {
        return Err(Error::InvalidArgument(format!(
            "modulus {modulus} outside 2..=10"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Problems
// ---------------------------------------------------------------------------

/// Generation settings for one corpus: problem shape, corruption rate, and
/// corpus sizes, all derived from one task seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArithmeticTaskSpec {
    pub modulus: u32,
    pub chain_len: usize,
    /// Marginal probability that a written partial is replaced.
    pub corruption: f64,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl ArithmeticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        check_modulus(self.modulus)?;
        if self.chain_len == 0 {
            return Err(Error::InvalidArgument("chain_len must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return Err(Error::InvalidArgument(format!(
                "corruption {} outside [0, 1]",
                self.corruption
            )));
        }
        if self.train_size == 0 {
            return Err(Error::InvalidArgument("train_size must be positive".into()));
        }
        if self.eval_size == 0 {
            return Err(Error::InvalidArgument("eval_size must be positive".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        task_vocabulary(self.modulus)
    }
}

/// One instance: operands, their true running sums, and the tokenized prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    /// Text of the prompt without the equals sign, e.g. `3+4+2`.
    pub id: String,
    pub modulus: u32,
    pub operands: Vec<u32>,
    /// Running sums modulo `modulus`; the first entry is the first operand.
    pub partials: Vec<u32>,
    /// Token ids for `<operands>=`, ready to decode from.
    pub prompt: Vec<TokenId>,
}

impl Problem {
    pub fn new(modulus: u32, operands: Vec<u32>) -> Result<Self> {
        check_modulus(modulus)?;
        if operands.is_empty() {
            return Err(Error::Empty("problem operands"));
        }
        if let Some(&bad) = operands.iter().find(|&&d| d >= modulus) {
            return Err(Error::InvalidArgument(format!(
                "operand {bad} not a digit modulo {modulus}"
            )));
        }
        let mut partials = Vec::with_capacity(operands.len());
        let mut acc = 0;
        for &d in &operands {
            acc = (acc + d) % modulus;
            partials.push(acc);
        }
        let id = operands
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join("+");
        let mut prompt = Vec::with_capacity(2 * operands.len());
        for (i, &d) in operands.iter().enumerate() {
            if i > 0 {
                prompt.push(plus_id(modulus));
            }
            prompt.push(d);
        }
        prompt.push(equals_id(modulus));
        Ok(Problem {
            id,
            modulus,
            operands,
            partials,
            prompt,
        })
    }

    /// The final running sum, i.e. the answer being graded.
    pub fn gold(&self) -> u32 {
        *self.partials.last().expect("problems are never empty")
    }

    /// Tokens of the uncorrupted solution: partials joined by commas, then
    /// the stop token.
    pub fn clean_completion(&self) -> Vec<TokenId> {
        solution_tokens(self.modulus, &self.partials)
    }

    /// Prompt and clean solution concatenated.
    pub fn clean_line(&self) -> Vec<TokenId> {
        let mut line = self.prompt.clone();
        line.extend(self.clean_completion());
        line
    }
}

fn solution_tokens(modulus: u32, written: &[u32]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(2 * written.len());
    for (i, &d) in written.iter().enumerate() {
        if i > 0 {
            out.push(comma_id(modulus));
        }
        out.push(d);
    }
    out.push(stop_id(modulus));
    out
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

/// One training line: the underlying problem plus the tokens actually
/// written, which may carry corrupted partials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainLine {
    pub problem: Problem,
    pub tokens: Vec<TokenId>,
}

/// A generated dataset: training lines with worked (possibly corrupted)
/// solutions and held-out problems without solutions.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: ArithmeticTaskSpec,
    pub vocab: Vocabulary,
    pub train: Vec<TrainLine>,
    pub eval: Vec<Problem>,
}

/// Hash of (task seed, operands, slot) mapped to [0, 1). Identifies a
/// corruption site independently of the corruption rate.
fn site_unit(seed: u64, operands: &[u32], slot: usize, domain: &str) -> f64 {
    (site_word(seed, operands, slot, domain) >> 11) as f64 / (1u64 << 53) as f64
}

fn site_word(seed: u64, operands: &[u32], slot: usize, domain: &str) -> u64 {
    let mut h = Fnv1a::new();
    h.update(&seed.to_le_bytes());
    for &d in operands {
        h.update(&d.to_le_bytes());
    }
    h.update(&(slot as u64).to_le_bytes());
    h.update(domain.as_bytes());
    mix(h.finish())
}

/// The digit a corrupted site writes instead of the true partial. Uniform
/// over all digits, so it can coincide with the truth.
fn site_replacement(seed: u64, operands: &[u32], slot: usize, modulus: u32) -> u32 {
    (site_word(seed, operands, slot, "value") % u64::from(modulus)) as u32
}

/// Draws the train and eval streams for a spec. Both streams depend only on
/// the task seed, so specs sharing a seed see the same problems in the same
/// order and differ only in how many lines they keep and how corruption is
/// applied.
pub fn generate_corpus(spec: &ArithmeticTaskSpec) -> Result<Corpus> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    let activation = spec.corruption.max(SITE_FLOOR);
    let within_rate = spec.corruption / activation;

    let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "task-train"));
    let mut train = Vec::with_capacity(spec.train_size);
    for _ in 0..spec.train_size {
        let operands: Vec<u32> = (0..spec.chain_len)
            .map(|_| train_rng.random_range(0..spec.modulus))
            .collect();
        // One coin per slot, drawn whether or not it is used, so streams
        // generated at different rates stay aligned line for line.
        let coins: Vec<f64> = (0..spec.chain_len).map(|_| train_rng.random()).collect();
        let problem = Problem::new(spec.modulus, operands)?;
        let mut written = problem.partials.clone();
        for (slot, value) in written.iter_mut().enumerate() {
            let affected = spec.corruption > 0.0
                && site_unit(spec.seed, &problem.operands, slot, "site") < activation;
            if affected && coins[slot] < within_rate {
                *value = site_replacement(spec.seed, &problem.operands, slot, spec.modulus);
            }
        }
        let mut tokens = problem.prompt.clone();
        tokens.extend(solution_tokens(spec.modulus, &written));
        train.push(TrainLine { problem, tokens });
    }

    let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "task-eval"));
    let mut eval = Vec::with_capacity(spec.eval_size);
    for _ in 0..spec.eval_size {
        let operands: Vec<u32> = (0..spec.chain_len)
            .map(|_| eval_rng.random_range(0..spec.modulus))
            .collect();
        eval.push(Problem::new(spec.modulus, operands)?);
    }

    Ok(Corpus {
        spec: spec.clone(),
        vocab,
        train,
        eval,
    })
}

/// Projects training lines onto the prompts the sampler consumes. Duplicate
/// problems stay duplicated; the sampling distribution over problems is the
/// corpus distribution.
pub fn sampling_problems(lines: &[TrainLine]) -> Vec<SamplingProblem> {
    lines
        .iter()
        .map(|l| SamplingProblem {
            id: l.problem.id.clone(),
            prompt: l.problem.prompt.clone(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Verification and evaluation
// ---------------------------------------------------------------------------

/// Grades a completion by its last digit token: the answer counts as correct
/// iff the last digit equals the true final sum. Intermediate partials are
/// not graded, and a completion without any digit fails.
pub fn verify_answer(problem: &Problem, completion: &[TokenId]) -> bool {
    completion
        .iter()
        .rev()
        .find(|&&t| t < problem.modulus)
        .is_some_and(|&t| t == problem.gold())
}

/// Accuracy at one completion position, measured against the clean solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositionAccuracy {
    pub position: usize,
    pub total: usize,
    pub matches: usize,
    pub accuracy: f64,
}

/// Greedy-decoding scorecard over a problem set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub problems: usize,
    /// Fraction of problems whose final answer verifies.
    pub exact_match: f64,
    pub per_position: Vec<PositionAccuracy>,
}

impl EvalReport {
    /// Two-section table: the overall verification rate, then per-position
    /// agreement with the clean solutions.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,position,total,matches,value\n");
        let verified = (self.exact_match * self.problems as f64).round() as usize;
        let _ = writeln!(
            out,
            "exact_match,,{},{},{}",
            self.problems, verified, self.exact_match
        );
        for row in &self.per_position {
            let _ = writeln!(
                out,
                "position_match,{},{},{},{}",
                row.position, row.total, row.matches, row.accuracy
            );
        }
        out
    }
}

/// Decodes every problem with the per-problem decode stream and grades the
/// results. Position rows compare against the clean completion, so a
/// truncated generation counts as a miss at the positions it skipped.
pub fn evaluate(
    model: &dyn LanguageModel,
    problems: &[Problem],
    decode: &DecodeConfig,
) -> Result<EvalReport> {
    if problems.is_empty() {
        return Err(Error::Empty("evaluation problems"));
    }
    let mut verified = 0usize;
    let mut totals: Vec<(usize, usize)> = Vec::new();
    for problem in problems {
        let cfg = per_problem_decode(decode, &problem.id);
        let (seq, _) = generate_trajectory(model, &problem.prompt, &cfg)?;
        let generated = seq.generated();
        if verify_answer(problem, generated) {
            verified += 1;
        }
        let clean = problem.clean_completion();
        if totals.len() < clean.len() {
            totals.resize(clean.len(), (0, 0));
        }
        for (k, &want) in clean.iter().enumerate() {
            totals[k].0 += 1;
            if generated.get(k) == Some(&want) {
                totals[k].1 += 1;
            }
        }
    }
    let per_position = totals
        .iter()
        .enumerate()
        .map(|(position, &(total, matches))| PositionAccuracy {
            position,
            total,
            matches,
            accuracy: matches as f64 / total as f64,
        })
        .collect();
    Ok(EvalReport {
        problems: problems.len(),
        exact_match: verified as f64 / problems.len() as f64,
        per_position,
    })
}

// ---------------------------------------------------------------------------
// Rejection-sampling baseline
// ---------------------------------------------------------------------------

/// Work accounting for the baseline, comparable with a sampling summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftCounters {
    pub sampled_problems: usize,
    pub retained_trajectories: usize,
    /// Total generated tokens across retained trajectories; every one of
    /// them becomes a hard training label.
    pub tuned_tokens: usize,
}

/// Rejection sampling: decode one trajectory per problem, keep those whose
/// answer verifies, and fine-tune on every token of the kept trajectories
/// as a one-hot target.
pub fn sft_baseline(
    model: KGramSoftmaxModel,
    problems: &[Problem],
    decode: &DecodeConfig,
    cfg: &TrainerConfig,
) -> Result<(KGramSoftmaxModel, TrainingTrace, SftCounters)> {
    if problems.is_empty() {
        return Err(Error::Empty("baseline problems"));
    }
    let mut samples = Vec::new();
    let mut counters = SftCounters {
        sampled_problems: problems.len(),
        retained_trajectories: 0,
        tuned_tokens: 0,
    };
    for problem in problems {
        let decode = per_problem_decode(decode, &problem.id);
        let (seq, _) = generate_trajectory(&model, &problem.prompt, &decode)?;
        if !verify_answer(problem, seq.generated()) {
            continue;
        }
        counters.retained_trajectories += 1;
        counters.tuned_tokens += seq.generated().len();
        for (t, &token) in seq.generated().iter().enumerate() {
            let prefix_ids = seq.ids()[..problem.prompt.len() + t].to_vec();
            let prefix = TokenSequence::new(prefix_ids, problem.prompt.len())?;
            samples.push(one_hot_sample(problem.id.clone(), t, prefix, token));
        }
    }
    if counters.retained_trajectories == 0 {
        return Err(Error::Config(
            "rejection sampling kept no trajectory; the model and the problem set \
             do not fit together"
                .into(),
        ));
    }
    let (tuned, trace) = fine_tune(model, &samples, cfg)?;
    Ok((tuned, trace, counters))
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FileHeader {
    kind: String,
    #[serde(flatten)]
    spec: ArithmeticTaskSpec,
}

const CORPUS_KIND: &str = "arithmetic-corpus";
const PROBLEMS_KIND: &str = "arithmetic-problems";

fn render_tokens(modulus: u32, ids: &[TokenId]) -> String {
    ids.iter()
        .map(|&t| {
            if t < modulus {
                char::from_digit(t, 10).expect("digits stay below ten")
            } else if t == plus_id(modulus) {
                '+'
            } else if t == equals_id(modulus) {
                '='
            } else if t == comma_id(modulus) {
                ','
            } else {
                '.'
            }
        })
        .collect()
}

/// Writes a header line with the generating spec followed by one worked
/// solution per line, e.g. `3+4+2=3,0,2.`.
pub fn write_train_corpus(path: &Path, spec: &ArithmeticTaskSpec, lines: &[TrainLine]) -> Result<()> {
    let mut text = header_line(CORPUS_KIND, spec)?;
    for line in lines {
        text.push_str(&render_tokens(spec.modulus, &line.tokens));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

/// Writes a header line followed by one prompt per line, e.g. `3+4+2=`.
pub fn write_problems(path: &Path, spec: &ArithmeticTaskSpec, problems: &[Problem]) -> Result<()> {
    let mut text = header_line(PROBLEMS_KIND, spec)?;
    for problem in problems {
        text.push_str(&render_tokens(spec.modulus, &problem.prompt));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

fn header_line(kind: &str, spec: &ArithmeticTaskSpec) -> Result<String> {
    spec.validate()?;
    let header = FileHeader {
        kind: kind.into(),
        spec: spec.clone(),
    };
    let mut text = serde_json::to_string(&header)
        .map_err(|e| Error::Config(format!("unencodable task spec: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Reads a corpus written by [`write_train_corpus`]. Errors carry the
/// offending line number.
pub fn read_train_corpus(path: &Path) -> Result<(ArithmeticTaskSpec, Vocabulary, Vec<TrainLine>)> {
    let (spec, vocab, bodies) = read_task_file(path, CORPUS_KIND)?;
    let mut lines = Vec::with_capacity(bodies.len());
    for (lineno, body) in bodies {
        let line = parse_train_line(&spec, &body)
            .map_err(|msg| Error::parse(path, lineno, msg))?;
        lines.push(line);
    }
    if lines.len() != spec.train_size {
        return Err(Error::parse(
            path,
            lines.len() + 1,
            format!(
                "header announces {} training lines, file has {}",
                spec.train_size,
                lines.len()
            ),
        ));
    }
    Ok((spec, vocab, lines))
}

/// Reads a problem list written by [`write_problems`].
pub fn read_problems(path: &Path) -> Result<(ArithmeticTaskSpec, Vocabulary, Vec<Problem>)> {
    let (spec, vocab, bodies) = read_task_file(path, PROBLEMS_KIND)?;
    let mut problems = Vec::with_capacity(bodies.len());
    for (lineno, body) in bodies {
        let problem = parse_prompt_line(&spec, &body)
            .map_err(|msg| Error::parse(path, lineno, msg))?;
        problems.push(problem);
    }
    if problems.len() != spec.eval_size {
        return Err(Error::parse(
            path,
            problems.len() + 1,
            format!(
                "header announces {} problems, file has {}",
                spec.eval_size,
                problems.len()
            ),
        ));
    }
    Ok((spec, vocab, problems))
}

/// Parsed header plus the remaining body lines with their line numbers.
type TaskFileBody = (ArithmeticTaskSpec, Vocabulary, Vec<(usize, String)>);

fn read_task_file(path: &Path, kind: &str) -> Result<TaskFileBody> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header_text) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header line"))?;
    let header: FileHeader = serde_json::from_str(header_text)
        .map_err(|e| Error::parse(path, 1, format!("bad header: {e}")))?;
    if header.kind != kind {
        return Err(Error::parse(
            path,
            1,
            format!("expected kind {kind:?}, found {:?}", header.kind),
        ));
    }
    header
        .spec
        .validate()
        .map_err(|e| Error::parse(path, 1, format!("bad task spec: {e}")))?;
    let vocab = header.spec.vocabulary()?;
    let bodies = lines
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect::<Vec<_>>();
    Ok((header.spec, vocab, bodies))
}

/// Splits `3+4+2` into operand digits, validating count and range.
fn parse_operands(spec: &ArithmeticTaskSpec, text: &str) -> std::result::Result<Vec<u32>, String> {
    let parts: Vec<&str> = text.split('+').collect();
    if parts.len() != spec.chain_len {
        return Err(format!(
            "expected {} operands, found {}",
            spec.chain_len,
            parts.len()
        ));
    }
    parts
        .iter()
        .map(|p| parse_digit(spec.modulus, p))
        .collect()
}

fn parse_digit(modulus: u32, text: &str) -> std::result::Result<u32, String> {
    let mut chars = text.chars();
    let (Some(c), None) = (chars.next(), chars.next()) else {
        return Err(format!("expected a single digit, found {text:?}"));
    };
    let d = c
        .to_digit(10)
        .ok_or_else(|| format!("expected a digit, found {c:?}"))?;
    if d >= modulus {
        return Err(format!("digit {d} not below the modulus {modulus}"));
    }
    Ok(d)
}

fn parse_prompt_line(
    spec: &ArithmeticTaskSpec,
    text: &str,
) -> std::result::Result<Problem, String> {
    let body = text
        .strip_suffix('=')
        .ok_or_else(|| format!("prompt {text:?} does not end with '='"))?;
    if body.contains('=') {
        return Err(format!("prompt {text:?} has more than one '='"));
    }
    let operands = parse_operands(spec, body)?;
    Problem::new(spec.modulus, operands).map_err(|e| e.to_string())
}

fn parse_train_line(
    spec: &ArithmeticTaskSpec,
    text: &str,
) -> std::result::Result<TrainLine, String> {
    let (prompt_text, rest) = text
        .split_once('=')
        .ok_or_else(|| format!("line {text:?} has no '='"))?;
    let solution = rest
        .strip_suffix('.')
        .ok_or_else(|| format!("line {text:?} does not end with '.'"))?;
    if solution.contains('=') || solution.contains('.') {
        return Err(format!("line {text:?} has stray structure tokens"));
    }
    let operands = parse_operands(spec, prompt_text)?;
    let problem = Problem::new(spec.modulus, operands).map_err(|e| e.to_string())?;
    let parts: Vec<&str> = solution.split(',').collect();
    if parts.len() != spec.chain_len {
        return Err(format!(
            "expected {} partials, found {}",
            spec.chain_len,
            parts.len()
        ));
    }
    let written = parts
        .iter()
        .map(|p| parse_digit(spec.modulus, p))
        .collect::<std::result::Result<Vec<u32>, String>>()?;
    let mut tokens = problem.prompt.clone();
    tokens.extend(solution_tokens(spec.modulus, &written));
    Ok(TrainLine { problem, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DecodeMode, NGramCountModel};
    use crate::trainer::loss_gradient;
    use tempfile::tempdir;

    fn spec(corruption: f64, train: usize, eval: usize, seed: u64) -> ArithmeticTaskSpec {
        ArithmeticTaskSpec {
            modulus: 7,
            chain_len: 3,
            corruption,
            train_size: train,
            eval_size: eval,
            seed,
        }
    }

    fn greedy(modulus: u32) -> DecodeConfig {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            max_new_tokens: 128,
            seed: 0,
            eos: Some(stop_id(modulus)),
        }
    }

    /// Every problem of the default shape, once each, as clean lines.
    fn full_clean_corpus(modulus: u32) -> Vec<Vec<TokenId>> {
        let m = modulus;
        let mut lines = Vec::new();
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    let p = Problem::new(m, vec![a, b, c]).unwrap();
                    lines.push(p.clean_line());
                }
            }
        }
        lines
    }

    #[test]
    fn running_sums_wrap_at_the_modulus() {
        let p = Problem::new(7, vec![3, 4, 2]).unwrap();
        assert_eq!(p.id, "3+4+2");
        assert_eq!(p.partials, vec![3, 0, 2]);
        assert_eq!(p.gold(), 2);
        assert_eq!(p.prompt, vec![3, 7, 4, 7, 2, 8]);
        assert_eq!(p.clean_completion(), vec![3, 9, 0, 9, 2, 10]);
    }

    #[test]
    fn vocabulary_places_digits_then_structure() {
        let v = task_vocabulary(7).unwrap();
        assert_eq!(v.len(), 11);
        assert_eq!(v.token(plus_id(7)), Some("+"));
        assert_eq!(v.token(equals_id(7)), Some("="));
        assert_eq!(v.token(comma_id(7)), Some(","));
        assert_eq!(v.token(stop_id(7)), Some("."));
        assert!(task_vocabulary(1).is_err());
        assert!(task_vocabulary(11).is_err());
        assert!(Problem::new(7, vec![7]).is_err());
        assert!(Problem::new(7, vec![]).is_err());
    }

    #[test]
    fn a_clean_corpus_writes_only_true_partials() {
        let corpus = generate_corpus(&spec(0.0, 200, 5, 9)).unwrap();
        assert_eq!(corpus.train.len(), 200);
        assert_eq!(corpus.eval.len(), 5);
        for line in &corpus.train {
            assert_eq!(line.tokens, line.problem.clean_line());
            let completion = &line.tokens[line.problem.prompt.len()..];
            assert!(verify_answer(&line.problem, completion));
        }
    }

    #[test]
    fn full_corruption_hits_the_answer_slot_at_chance_rate() {
        let spec = ArithmeticTaskSpec {
            modulus: 10,
            chain_len: 3,
            corruption: 1.0,
            train_size: 1000,
            eval_size: 2,
            seed: 77,
        };
        let corpus = generate_corpus(&spec).unwrap();
        let again = generate_corpus(&spec).unwrap();
        assert_eq!(corpus, again);
        let mut hits = 0usize;
        for line in &corpus.train {
            let digits: Vec<TokenId> = line.tokens[line.problem.prompt.len()..]
                .iter()
                .copied()
                .filter(|&t| t < spec.modulus)
                .collect();
            assert_eq!(digits.len(), 3);
            if *digits.last().unwrap() == line.problem.gold() {
                hits += 1;
            }
        }
        // The replacement digit is uniform over all ten digits, truth
        // included, so the answer slot survives at chance rate.
        let rate = hits as f64 / corpus.train.len() as f64;
        assert!((rate - 0.1).abs() < 0.04, "rate {rate}");
    }

    #[test]
    fn specs_sharing_a_seed_corrupt_nested_sites() {
        let expert = generate_corpus(&spec(0.15, 300, 2, 4)).unwrap();
        let amateur = generate_corpus(&spec(0.60, 300, 2, 4)).unwrap();
        let mut expert_bad = 0usize;
        let mut amateur_bad = 0usize;
        for (e, a) in expert.train.iter().zip(&amateur.train) {
            assert_eq!(e.problem, a.problem);
            let truth = e.problem.clean_line();
            for (k, (&et, &at)) in e.tokens.iter().zip(&a.tokens).enumerate() {
                if et != truth[k] {
                    expert_bad += 1;
                    assert_eq!(at, et, "line {:?} slot {k}", e.problem.id);
                }
                if at != truth[k] {
                    amateur_bad += 1;
                }
            }
        }
        assert!(expert_bad > 0);
        assert!(amateur_bad > expert_bad);
    }

    #[test]
    fn marginal_corruption_matches_the_configured_rate() {
        let corpus = generate_corpus(&spec(0.6, 1000, 2, 21)).unwrap();
        let mut corrupted = 0usize;
        let mut slots = 0usize;
        for line in &corpus.train {
            let truth = line.problem.clean_line();
            // Separators never change, so token diffs count corrupted slots.
            corrupted += line
                .tokens
                .iter()
                .zip(&truth)
                .filter(|(got, want)| got != want)
                .count();
            slots += line.problem.partials.len();
        }
        // A corrupted slot shows a visible difference only when the
        // replacement digit differs from the truth: rate 0.6 times 6/7.
        let rate = corrupted as f64 / slots as f64;
        assert!((rate - 0.6 * 6.0 / 7.0).abs() < 0.05, "rate {rate}");
    }

    #[test]
    fn verification_grades_the_last_digit_only() {
        let p = Problem::new(7, vec![3, 4, 2]).unwrap();
        let comma = comma_id(7);
        let stop = stop_id(7);
        assert!(verify_answer(&p, &p.clean_completion()));
        assert!(verify_answer(&p, &[6, comma, 6, comma, 2, stop]));
        assert!(!verify_answer(&p, &[3, comma, 0, comma, 3, stop]));
        assert!(!verify_answer(&p, &[comma, stop]));
        assert!(!verify_answer(&p, &[]));
    }

    #[test]
    fn a_uniform_model_scores_near_chance() {
        let corpus = generate_corpus(&spec(0.0, 1, 1000, 5)).unwrap();
        let model = KGramSoftmaxModel::uniform(corpus.vocab.clone(), 2);
        let report = evaluate(&model, &corpus.eval, &greedy(7)).unwrap();
        assert_eq!(report.problems, 1000);
        // Greedy from a uniform row emits the lowest digit forever, so the
        // verification rate is the chance rate of a zero answer.
        assert!((report.exact_match - 1.0 / 7.0).abs() < 0.034);
    }

    #[test]
    fn a_fully_covered_model_solves_everything() {
        let vocab = task_vocabulary(7).unwrap();
        let lines = full_clean_corpus(7);
        let model = KGramSoftmaxModel::fit(vocab, 6, &lines, 1e-6).unwrap();
        let corpus = generate_corpus(&spec(0.0, 1, 120, 31)).unwrap();
        let report = evaluate(&model, &corpus.eval, &greedy(7)).unwrap();
        assert_eq!(report.exact_match, 1.0);
        assert!(report.per_position.iter().all(|row| row.accuracy == 1.0));
    }

    #[test]
    fn rejection_sampling_on_a_perfect_model_is_a_no_op() {
        let vocab = task_vocabulary(7).unwrap();
        let lines = full_clean_corpus(7);
        let model = KGramSoftmaxModel::fit(vocab, 6, &lines, 1e-9).unwrap();
        let corpus = generate_corpus(&spec(0.0, 1, 50, 13)).unwrap();
        let cfg = TrainerConfig {
            learning_rate: 0.1,
            steps: 40,
            batch_size: 16,
            seed: 3,
            shuffle: true,
        };
        let (tuned, trace, counters) =
            sft_baseline(model.clone(), &corpus.eval, &greedy(7), &cfg).unwrap();
        assert_eq!(counters.sampled_problems, 50);
        assert_eq!(counters.retained_trajectories, 50);
        assert_eq!(counters.tuned_tokens, 50 * 6);
        // At a saturated optimum every per-token gradient is negligible.
        for problem in &corpus.eval {
            let decode = per_problem_decode(&greedy(7), &problem.id);
            let (seq, _) = generate_trajectory(&model, &problem.prompt, &decode).unwrap();
            for (t, &token) in seq.generated().iter().enumerate() {
                let ids = seq.ids()[..problem.prompt.len() + t].to_vec();
                let prefix = TokenSequence::new(ids, problem.prompt.len()).unwrap();
                let sample = one_hot_sample(problem.id.clone(), t, prefix, token);
                let (_, grad) = loss_gradient(&model, &sample).unwrap();
                let largest = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
                assert!(largest < 1e-6, "gradient {largest}");
            }
        }
        assert!(trace.steps.iter().all(|s| s.mean_loss < 1e-6));
        let report = evaluate(&tuned, &corpus.eval, &greedy(7)).unwrap();
        assert_eq!(report.exact_match, 1.0);
    }

    #[test]
    fn rejection_sampling_reports_a_total_mismatch() {
        // A uniform model greedily emits zeros forever, so a problem whose
        // answer is not zero never verifies and nothing is retained.
        let model = KGramSoftmaxModel::uniform(task_vocabulary(7).unwrap(), 2);
        let problems = [Problem::new(7, vec![3, 4, 2]).unwrap()];
        let cfg = TrainerConfig::default();
        let err = sft_baseline(model, &problems, &greedy(7), &cfg).unwrap_err();
        assert!(err.to_string().contains("kept no trajectory"), "{err}");
    }

    #[test]
    fn the_expertise_gap_grows_with_the_corruption_rate() {
        let mut mean_gap = [0.0f64; 3];
        let rates = [0.0, 0.3, 0.6];
        for seed in [101u64, 102, 103] {
            let clean = generate_corpus(&spec(0.0, 400, 150, seed)).unwrap();
            let lines: Vec<Vec<TokenId>> =
                clean.train.iter().map(|l| l.tokens.clone()).collect();
            let expert =
                KGramSoftmaxModel::fit(clean.vocab.clone(), 6, &lines, 0.05).unwrap();
            let expert_acc = evaluate(&expert, &clean.eval, &greedy(7))
                .unwrap()
                .exact_match;
            for (i, &rate) in rates.iter().enumerate() {
                let noisy = generate_corpus(&spec(rate, 400, 150, seed)).unwrap();
                let noisy_lines: Vec<Vec<TokenId>> =
                    noisy.train.iter().map(|l| l.tokens.clone()).collect();
                let amateur =
                    NGramCountModel::fit(noisy.vocab.clone(), 6, &noisy_lines, 0.05).unwrap();
                let amateur_acc = evaluate(&amateur, &clean.eval, &greedy(7))
                    .unwrap()
                    .exact_match;
                let gap = expert_acc - amateur_acc;
                if rate == 0.6 {
                    assert!(gap > 0.0, "seed {seed} gap {gap}");
                }
                mean_gap[i] += gap / 3.0;
            }
        }
        assert!(
            mean_gap[2] > mean_gap[1] && mean_gap[1] > mean_gap[0],
            "gaps {mean_gap:?}"
        );
    }

    #[test]
    fn corpus_files_round_trip_exactly() {
        let dir = tempdir().unwrap();
        let spec = spec(0.15, 120, 40, 8);
        let corpus = generate_corpus(&spec).unwrap();
        let corpus_path = dir.path().join("train.txt");
        let problems_path = dir.path().join("eval.txt");
        write_train_corpus(&corpus_path, &spec, &corpus.train).unwrap();
        write_problems(&problems_path, &spec, &corpus.eval).unwrap();

        let (spec2, vocab2, lines2) = read_train_corpus(&corpus_path).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(vocab2, corpus.vocab);
        assert_eq!(lines2, corpus.train);

        let (spec3, _, problems3) = read_problems(&problems_path).unwrap();
        assert_eq!(spec3, spec);
        assert_eq!(problems3, corpus.eval);

        // Writing the parsed data again reproduces the bytes.
        let again = dir.path().join("again.txt");
        write_train_corpus(&again, &spec2, &lines2).unwrap();
        assert_eq!(
            std::fs::read(&corpus_path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn sampling_problems_preserve_duplicates() {
        let p = Problem::new(7, vec![1, 2, 3]).unwrap();
        let line = TrainLine {
            tokens: p.clean_line(),
            problem: p,
        };
        let prompts = sampling_problems(&[line.clone(), line]);
        assert_eq!(prompts.len(), 2);
        assert_eq!(prompts[0], prompts[1]);
        assert_eq!(prompts[0].id, "1+2+3");
    }

    #[test]
    fn malformed_files_report_the_offending_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        let spec = spec(0.0, 2, 2, 1);
        let header = header_line(CORPUS_KIND, &spec).unwrap();

        let cases = [
            format!("{header}3+4+2=3,0,2.\n3+4=3,0.\n"),
            format!("{header}3+4+2=3,0,2.\n3+4+2=3,0,9.\n"),
            format!("{header}3+4+2=3,0,2.\n3+4+2=3,0,2\n"),
            format!("{header}3+4+2=3,0,2.\n3+4+2=3,2.\n"),
        ];
        for text in &cases {
            std::fs::write(&path, text).unwrap();
            let err = read_train_corpus(&path).unwrap_err().to_string();
            assert!(err.contains(":3:"), "error {err:?} for {text:?}");
        }

        // Wrong kind and truncated files point at the header and the end.
        std::fs::write(&path, header_line(PROBLEMS_KIND, &spec).unwrap()).unwrap();
        let err = read_train_corpus(&path).unwrap_err().to_string();
        assert!(err.contains(":1:"), "error {err:?}");
        std::fs::write(&path, format!("{header}3+4+2=3,0,2.\n")).unwrap();
        let err = read_train_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("announces 2"), "error {err:?}");
    }

    #[test]
    fn problem_files_reject_damaged_prompts() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        let spec = spec(0.0, 2, 1, 1);
        let header = header_line(PROBLEMS_KIND, &spec).unwrap();
        for body in ["3+4+2", "3+4+9=", "3+4+2=0", "3+4+2=="] {
            std::fs::write(&path, format!("{header}{body}\n")).unwrap();
            let err = read_problems(&path).unwrap_err().to_string();
            assert!(err.contains(":2:"), "error {err:?} for {body:?}");
        }
    }
}
