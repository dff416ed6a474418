//! Pipeline driver: generate corpora and models, sample contrastive
//! training data, fine-tune, run the rejection-sampling baseline, evaluate,
//! and produce analysis reports. Settings come from built-in defaults, an
//! optional `key = value` config file, and command line flags, in that
//! order of precedence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use cdistill::analysis::{
    divergence_report, efficiency_report, label_stats, PipelineCounters,
};
use cdistill::config::RunConfig;
use cdistill::dist::Vocabulary;
use cdistill::fsutil::atomic_write;
use cdistill::models::{AnyModel, KGramSoftmaxModel, LanguageModel, NGramCountModel};
use cdistill::sampler::{read_samples, run_sampling, write_samples, SamplesHeader};
use cdistill::tasks::{
    evaluate, generate_corpus, read_problems, read_train_corpus, sampling_problems, stop_id,
    write_problems, write_train_corpus,
};
use cdistill::trainer::fine_tune;
use cdistill::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cdistill",
    version,
    about = "Contrastive expert/amateur distillation on a synthetic arithmetic task"
)]
struct Cli {
    /// Configuration file with `key = value` lines; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Print the machine-readable run summary as JSON on standard output.
    #[arg(long, global = true)]
    json: bool,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Every tunable setting, exposed as an optional flag. Unset flags leave
/// the config file or built-in value in place.
#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    modulus: Option<u32>,
    #[arg(long, global = true)]
    chain_len: Option<usize>,
    #[arg(long, global = true)]
    expert_corpus_lines: Option<usize>,
    #[arg(long, global = true)]
    amateur_corpus_lines: Option<usize>,
    #[arg(long, global = true)]
    eval_size: Option<usize>,
    #[arg(long, global = true)]
    expert_rho: Option<f64>,
    #[arg(long, global = true)]
    amateur_rho: Option<f64>,
    #[arg(long, global = true)]
    order: Option<usize>,
    #[arg(long, global = true)]
    smoothing: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    max_new_tokens: Option<usize>,
    #[arg(long, global = true)]
    sample_problems: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Minibatch size for fine-tuning.
    #[arg(long = "batch", global = true)]
    batch_size: Option<usize>,
    /// Sampling worker threads; 0 uses every available core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Keep every generated step instead of filtering by KL.
    #[arg(long, global = true)]
    no_select: bool,
    /// Renormalize the expert over the support instead of contrasting.
    #[arg(long, global = true)]
    no_contrast: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            seed,
            modulus,
            chain_len,
            expert_corpus_lines,
            amateur_corpus_lines,
            eval_size,
            expert_rho,
            amateur_rho,
            order,
            smoothing,
            alpha,
            beta,
            epsilon,
            temperature,
            max_new_tokens,
            sample_problems,
            learning_rate,
            steps,
            batch_size,
            jobs
        );
        if self.no_select {
            cfg.select_steps = false;
        }
        if self.no_contrast {
            cfg.contrast_targets = false;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate both corpora, the evaluation problems, and the two models.
    Gen {
        /// Directory receiving the generated artifacts.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Decode corpus problems with the expert and keep contrastive labels.
    Sample {
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        amateur: PathBuf,
        /// Training corpus whose first lines provide the problems.
        #[arg(long)]
        corpus: PathBuf,
        /// Number of corpus lines to decode; defaults to sample_problems.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the work summary JSON.
        #[arg(long)]
        summary_out: Option<PathBuf>,
    },
    /// Fine-tune a model on a sample file.
    Train {
        #[arg(long)]
        model_in: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        /// Where to write the per-step loss/entropy trace CSV.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Rejection-sampling baseline: decode every corpus problem, keep the
    /// verified trajectories, and fine-tune on all of their tokens.
    Sft {
        #[arg(long)]
        model_in: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        summary_out: Option<PathBuf>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Greedy-decode a problem file and grade the answers.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        problems: PathBuf,
        /// Where to write the report CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Divergence, label, and efficiency reports.
    Analyze {
        /// Expert model for the divergence report.
        #[arg(long, requires = "amateur", requires = "corpus")]
        expert: Option<PathBuf>,
        #[arg(long)]
        amateur: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Sample file for label statistics.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Summary of a sampling pipeline run; provides generation totals
        /// for label statistics and one side of the efficiency table.
        #[arg(long)]
        contrastive_summary: Option<PathBuf>,
        /// Summary of a baseline run; the other efficiency side.
        #[arg(long)]
        baseline_summary: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

/// Work summary one pipeline command writes and the analyzer reads back.
#[derive(Serialize, Deserialize)]
struct RunSummary {
    kind: String,
    problems: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    steps_generated: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    steps_retained: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    tokens_retained: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    retained_trajectories: Option<usize>,
    /// Token positions that received a training label.
    tuned_tokens: usize,
    wall_time_s: f64,
    config: serde_json::Value,
}

impl RunSummary {
    fn counters(&self) -> PipelineCounters {
        PipelineCounters {
            problems: self.problems,
            tuned_tokens: self.tuned_tokens,
            wall_time_s: self.wall_time_s,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cdistill: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    match &cli.command {
        Command::Gen { out_dir } => cmd_gen(&cfg, cli.json, out_dir),
        Command::Sample {
            expert,
            amateur,
            corpus,
            limit,
            out,
            summary_out,
        } => cmd_sample(&cfg, cli.json, expert, amateur, corpus, *limit, out, summary_out),
        Command::Train {
            model_in,
            samples,
            model_out,
            trace_out,
        } => cmd_train(&cfg, cli.json, model_in, samples, model_out, trace_out),
        Command::Sft {
            model_in,
            corpus,
            model_out,
            summary_out,
            trace_out,
        } => cmd_sft(&cfg, cli.json, model_in, corpus, model_out, summary_out, trace_out),
        Command::Eval {
            model,
            problems,
            out,
        } => cmd_eval(&cfg, cli.json, model, problems, out),
        Command::Analyze {
            expert,
            amateur,
            corpus,
            samples,
            contrastive_summary,
            baseline_summary,
            out_dir,
        } => cmd_analyze(
            &cfg,
            cli.json,
            expert.as_deref(),
            amateur.as_deref(),
            corpus.as_deref(),
            samples.as_deref(),
            contrastive_summary.as_deref(),
            baseline_summary.as_deref(),
            out_dir,
        ),
    }
}

fn echo(cfg: &RunConfig, command: &str) -> serde_json::Value {
    json!({ "command": command, "config": cfg })
}

/// Leading CSV comment identifying the producing command and config.
fn echo_comment(cfg: &RunConfig, command: &str) -> String {
    format!("# {}\n", echo(cfg, command))
}

fn write_summary(path: Option<&Path>, summary: &RunSummary, to_stdout: bool) -> Result<()> {
    let mut text = serde_json::to_string(summary)
        .map_err(|e| Error::Config(format!("unencodable summary: {e}")))?;
    text.push('\n');
    if let Some(path) = path {
        atomic_write(path, text.as_bytes())?;
    }
    if to_stdout {
        print!("{text}");
    }
    Ok(())
}

fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, 1, format!("bad summary: {e}")))
}

fn check_vocab(model: &dyn LanguageModel, vocab: &Vocabulary, what: &str) -> Result<()> {
    if model.vocab() != vocab {
        return Err(Error::VocabularyMismatch(format!(
            "{what} uses a different vocabulary than the task files"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(cfg: &RunConfig, json_out: bool, out_dir: &Path) -> Result<()> {
    let expert_spec = cfg.expert_task_spec();
    let amateur_spec = cfg.amateur_task_spec();
    let expert_corpus = generate_corpus(&expert_spec)?;
    let amateur_corpus = generate_corpus(&amateur_spec)?;

    let expert_corpus_path = out_dir.join("expert_corpus.txt");
    let amateur_corpus_path = out_dir.join("amateur_corpus.txt");
    let problems_path = out_dir.join("eval_problems.txt");
    write_train_corpus(&expert_corpus_path, &expert_spec, &expert_corpus.train)?;
    write_train_corpus(&amateur_corpus_path, &amateur_spec, &amateur_corpus.train)?;
    write_problems(&problems_path, &expert_spec, &expert_corpus.eval)?;

    let expert_lines: Vec<_> = expert_corpus.train.iter().map(|l| l.tokens.clone()).collect();
    let amateur_lines: Vec<_> = amateur_corpus.train.iter().map(|l| l.tokens.clone()).collect();
    let expert = KGramSoftmaxModel::fit(
        expert_corpus.vocab.clone(),
        cfg.order,
        &expert_lines,
        cfg.smoothing,
    )?;
    let amateur = NGramCountModel::fit(
        amateur_corpus.vocab.clone(),
        cfg.order,
        &amateur_lines,
        cfg.smoothing,
    )?;
    let expert_path = out_dir.join("expert.model.json");
    let amateur_path = out_dir.join("amateur.model.json");
    expert.save(&expert_path)?;
    amateur.save(&amateur_path)?;

    // The manifest carries the full config echo for the artifacts, which
    // themselves only embed their local parameters. Model snapshots stay
    // echo-free so that retraining with zero steps reproduces them byte
    // for byte.
    let manifest = json!({
        "kind": "gen-manifest",
        "config": cfg,
        "files": {
            "expert_corpus": expert_corpus_path,
            "amateur_corpus": amateur_corpus_path,
            "eval_problems": problems_path,
            "expert_model": expert_path,
            "amateur_model": amateur_path,
        },
    });
    let mut manifest_text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("unencodable manifest: {e}")))?;
    manifest_text.push('\n');
    atomic_write(&out_dir.join("manifest.json"), manifest_text.as_bytes())?;

    if json_out {
        println!("{manifest}");
    } else {
        println!(
            "wrote {} training lines, {} baseline lines, {} problems, and 2 models to {}",
            expert_corpus.train.len(),
            amateur_corpus.train.len(),
            expert_corpus.eval.len(),
            out_dir.display()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    cfg: &RunConfig,
    json_out: bool,
    expert: &Path,
    amateur: &Path,
    corpus: &Path,
    limit: Option<usize>,
    out: &Path,
    summary_out: &Option<PathBuf>,
) -> Result<()> {
    let expert = AnyModel::load(expert)?;
    let amateur = AnyModel::load(amateur)?;
    let (spec, vocab, lines) = read_train_corpus(corpus)?;
    check_vocab(&expert, &vocab, "the expert model")?;
    check_vocab(&amateur, &vocab, "the amateur model")?;
    let limit = limit.unwrap_or(cfg.sample_problems);
    if limit == 0 || limit > lines.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {limit} problems from a corpus of {}",
            lines.len()
        )));
    }
    let problems = sampling_problems(&lines[..limit]);
    let scfg = cfg.sampler_config(Some(stop_id(spec.modulus)));
    let start = Instant::now();
    let (samples, summary) =
        run_sampling(&expert, &amateur, &problems, &scfg, cfg.effective_jobs())?;
    let header = SamplesHeader {
        alpha: scfg.alpha,
        beta: scfg.beta,
        epsilon: scfg.epsilon,
        seed: scfg.seed,
        vocab_hash: vocab.fingerprint(),
    };
    write_samples(out, &header, &samples)?;
    let run = RunSummary {
        kind: "contrastive-pipeline".into(),
        problems: summary.problems,
        steps_generated: Some(summary.steps_generated),
        steps_retained: Some(summary.steps_retained),
        tokens_retained: Some(summary.tokens_retained),
        retained_trajectories: None,
        tuned_tokens: summary.steps_retained,
        wall_time_s: start.elapsed().as_secs_f64(),
        config: echo(cfg, "sample"),
    };
    write_summary(summary_out.as_deref(), &run, json_out)?;
    if !json_out {
        println!(
            "kept {} of {} steps over {} problems -> {}",
            summary.steps_retained,
            summary.steps_generated,
            summary.problems,
            out.display()
        );
    }
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    json_out: bool,
    model_in: &Path,
    samples_path: &Path,
    model_out: &Path,
    trace_out: &Option<PathBuf>,
) -> Result<()> {
    let model = AnyModel::load(model_in)?.into_kgram()?;
    let (header, samples) = read_samples(samples_path)?;
    if header.vocab_hash != model.vocab().fingerprint() {
        return Err(Error::VocabularyMismatch(
            "sample file was produced for a different vocabulary".into(),
        ));
    }
    let tcfg = cfg.trainer_config();
    let (tuned, trace) = fine_tune(model, &samples, &tcfg)?;
    tuned.save(model_out)?;
    if let Some(path) = trace_out {
        let text = format!("{}{}", echo_comment(cfg, "train"), trace.to_csv());
        atomic_write(path, text.as_bytes())?;
    }
    if json_out {
        println!(
            "{}",
            json!({
                "kind": "train",
                "samples": samples.len(),
                "steps": tcfg.steps,
                "final_mean_loss": trace.steps.last().map(|s| s.mean_loss),
                "config": echo(cfg, "train"),
            })
        );
    } else {
        println!(
            "tuned on {} samples for {} steps -> {}",
            samples.len(),
            tcfg.steps,
            model_out.display()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sft(
    cfg: &RunConfig,
    json_out: bool,
    model_in: &Path,
    corpus: &Path,
    model_out: &Path,
    summary_out: &Option<PathBuf>,
    trace_out: &Option<PathBuf>,
) -> Result<()> {
    let model = AnyModel::load(model_in)?.into_kgram()?;
    let (spec, vocab, lines) = read_train_corpus(corpus)?;
    check_vocab(&model, &vocab, "the model")?;
    let problems: Vec<_> = lines.iter().map(|l| l.problem.clone()).collect();
    let decode = cfg.decode_config(Some(stop_id(spec.modulus)));
    let tcfg = cfg.trainer_config();
    let start = Instant::now();
    let (tuned, trace, counters) = cdistill::tasks::sft_baseline(model, &problems, &decode, &tcfg)?;
    tuned.save(model_out)?;
    if let Some(path) = trace_out {
        let text = format!("{}{}", echo_comment(cfg, "sft"), trace.to_csv());
        atomic_write(path, text.as_bytes())?;
    }
    let run = RunSummary {
        kind: "baseline-pipeline".into(),
        problems: counters.sampled_problems,
        steps_generated: None,
        steps_retained: None,
        tokens_retained: None,
        retained_trajectories: Some(counters.retained_trajectories),
        tuned_tokens: counters.tuned_tokens,
        wall_time_s: start.elapsed().as_secs_f64(),
        config: echo(cfg, "sft"),
    };
    write_summary(summary_out.as_deref(), &run, json_out)?;
    if !json_out {
        println!(
            "kept {} of {} trajectories ({} tokens) -> {}",
            counters.retained_trajectories,
            counters.sampled_problems,
            counters.tuned_tokens,
            model_out.display()
        );
    }
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    json_out: bool,
    model: &Path,
    problems: &Path,
    out: &Option<PathBuf>,
) -> Result<()> {
    let model = AnyModel::load(model)?;
    let (spec, vocab, problems) = read_problems(problems)?;
    check_vocab(&model, &vocab, "the model")?;
    let decode = cfg.decode_config(Some(stop_id(spec.modulus)));
    let report = evaluate(&model, &problems, &decode)?;
    if let Some(path) = out {
        let text = format!("{}{}", echo_comment(cfg, "eval"), report.to_csv());
        atomic_write(path, text.as_bytes())?;
    }
    if json_out {
        println!(
            "{}",
            json!({
                "kind": "eval",
                "report": report,
                "config": echo(cfg, "eval"),
            })
        );
    } else {
        println!(
            "exact match {:.4} over {} problems",
            report.exact_match, report.problems
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    cfg: &RunConfig,
    json_out: bool,
    expert: Option<&Path>,
    amateur: Option<&Path>,
    corpus: Option<&Path>,
    samples: Option<&Path>,
    contrastive_summary: Option<&Path>,
    baseline_summary: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let mut written: Vec<PathBuf> = Vec::new();

    if let (Some(expert), Some(amateur), Some(corpus)) = (expert, amateur, corpus) {
        let expert = AnyModel::load(expert)?;
        let amateur = AnyModel::load(amateur)?;
        let (spec, vocab, lines) = read_train_corpus(corpus)?;
        check_vocab(&expert, &vocab, "the expert model")?;
        check_vocab(&amateur, &vocab, "the amateur model")?;
        let limit = cfg.sample_problems.min(lines.len());
        let problems = sampling_problems(&lines[..limit]);
        let scfg = cfg.sampler_config(Some(stop_id(spec.modulus)));
        let report = divergence_report(&expert, &amateur, &problems, &scfg)?;
        let hist = out_dir.join("divergence_hist.csv");
        let summary = out_dir.join("divergence_summary.csv");
        let comment = echo_comment(cfg, "analyze");
        atomic_write(&hist, format!("{comment}{}", report.histogram_csv()).as_bytes())?;
        atomic_write(
            &summary,
            format!("{comment}{}", report.summary_csv()).as_bytes(),
        )?;
        written.push(hist);
        written.push(summary);
    }

    if let Some(samples_path) = samples {
        let (_, samples) = read_samples(samples_path)?;
        let generated = match contrastive_summary {
            Some(path) => read_summary(path)?.steps_generated,
            None => None,
        };
        let report = label_stats(&samples, generated)?;
        let path = out_dir.join("label_stats.csv");
        let text = format!("{}{}", echo_comment(cfg, "analyze"), report.to_csv());
        atomic_write(&path, text.as_bytes())?;
        written.push(path);
    }

    if let (Some(contrastive), Some(baseline)) = (contrastive_summary, baseline_summary) {
        let report = efficiency_report(
            &read_summary(contrastive)?.counters(),
            &read_summary(baseline)?.counters(),
        );
        let path = out_dir.join("efficiency.csv");
        let text = format!("{}{}", echo_comment(cfg, "analyze"), report.to_csv());
        atomic_write(&path, text.as_bytes())?;
        written.push(path);
    }

    if written.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to analyze: pass --expert/--amateur/--corpus, --samples, \
             or both summaries"
                .into(),
        ));
    }
    if json_out {
        println!(
            "{}",
            json!({
                "kind": "analyze",
                "reports": written,
                "config": echo(cfg, "analyze"),
            })
        );
    } else {
        for path in &written {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
