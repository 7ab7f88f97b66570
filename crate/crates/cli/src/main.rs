//! `coconut`: data generation, training, ablations and reporting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use coconut_core::gradsuite::{run_suite, SuiteConfig};
use coconut_core::harness::{run_dir_name, run_many, write_run, BufferPolicy, Selection, Strategy, StrategyConfig};
use coconut_core::losses::NsptVariant;
use coconut_core::report::{collect_records, export_comparison, markdown_table, ResultRecord};
use coconut_core::synth::{generate_corpus, Corpus, CorpusSpec};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "coconut",
    version,
    about = "Class-incremental SLU with contrastive distillation"
)]
struct Cli {
    /// TOML file whose keys mirror the flags; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    GenerateData(GenerateArgs),
    /// Train one strategy per seed.
    Train(TrainArgs),
    /// Run the NSPT variant grid and the MM flag grid.
    Ablate(TrainArgs),
    /// Compare strategies across exemplars-per-class settings.
    SweepMemory(SweepArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradArgs),
    /// Aggregate run directories into the comparison table.
    Report(ReportArgs),
}

#[derive(Args, Default)]
struct CorpusArgs {
    #[arg(long)]
    num_intents: Option<usize>,
    #[arg(long)]
    min_class_size: Option<usize>,
    #[arg(long)]
    max_class_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    slot_concepts: Option<Vec<usize>>,
    #[arg(long)]
    synonyms: Option<usize>,
    #[arg(long)]
    min_slots: Option<usize>,
    #[arg(long)]
    max_slots: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    frames_per_word: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long = "corpus-seed")]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args, Default, Clone)]
struct RunArgs {
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    selection: Option<SelectionArg>,
    /// Exemplars per class.
    #[arg(long, conflicts_with = "memory_fraction")]
    memory: Option<usize>,
    /// Buffer size as a fraction of the training set.
    #[arg(long)]
    memory_fraction: Option<f64>,
    #[arg(long)]
    num_tasks: Option<usize>,
    #[arg(long)]
    epochs_first: Option<usize>,
    #[arg(long)]
    epochs_rest: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mix_ratio: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    kd_weight: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    learnable_tau: Option<bool>,
    #[arg(long)]
    tau_init: Option<f64>,
    #[arg(long)]
    lambda_mm: Option<f64>,
    #[arg(long)]
    variant: Option<VariantArg>,
    #[arg(long)]
    nspt_audio: Option<bool>,
    #[arg(long)]
    nspt_text: Option<bool>,
    #[arg(long)]
    mm_cls_only: Option<bool>,
    #[arg(long)]
    mm_exclude_rehearsal_anchors: Option<bool>,
    #[arg(long)]
    include_self_in_denominator: Option<bool>,
    #[arg(long)]
    weighted_accuracy: Option<bool>,
    #[arg(long)]
    wer_skip_prefix: Option<bool>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SelectionArg {
    Random,
    Herding,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    Nspt,
    Ntpt,
    NsptAa,
    NsptAn,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory written by `generate-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Exemplars-per-class settings.
    #[arg(long, value_delimiter = ',')]
    memory_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directories holding `result.json` files, directly or one level down.
    roots: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Config file layout.
#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    memory_sizes: Option<Vec<usize>>,
    strategies: Option<Vec<Strategy>>,
    corpus: CorpusSpec,
    run: StrategyConfig,
    grad_check: GradFile,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct GradFile {
    batches: Option<usize>,
    h: Option<f64>,
    tol: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl CorpusArgs {
    fn apply(self, s: &mut CorpusSpec) {
        set(&mut s.num_intents, self.num_intents);
        set(&mut s.min_class_size, self.min_class_size);
        set(&mut s.max_class_size, self.max_class_size);
        set(&mut s.slot_concepts, self.slot_concepts);
        set(&mut s.synonyms, self.synonyms);
        set(&mut s.min_slots, self.min_slots);
        set(&mut s.max_slots, self.max_slots);
        set(&mut s.d_in, self.d_in);
        set(&mut s.frames_per_word, self.frames_per_word);
        set(&mut s.noise_std, self.noise_std);
        set(&mut s.train_fraction, self.train_fraction);
        set(&mut s.seed, self.seed);
    }
}

impl RunArgs {
    fn apply(&self, c: &mut StrategyConfig) {
        set(&mut c.strategy, self.strategy);
        set(
            &mut c.selection,
            self.selection.map(|s| match s {
                SelectionArg::Random => Selection::Random,
                SelectionArg::Herding => Selection::Herding,
            }),
        );
        set(&mut c.buffer, self.memory.map(BufferPolicy::PerClass));
        set(&mut c.buffer, self.memory_fraction.map(BufferPolicy::Fraction));
        set(&mut c.num_tasks, self.num_tasks);
        set(&mut c.epochs_first, self.epochs_first);
        set(&mut c.epochs_rest, self.epochs_rest);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.mix_ratio, self.mix_ratio);
        set(&mut c.optimizer.lr, self.lr);
        set(&mut c.optimizer.weight_decay, self.weight_decay);
        set(&mut c.beam_width, self.beam_width);
        if self.kd_weight.is_some() {
            c.kd_weight = self.kd_weight;
        }
        let l = &mut c.loss;
        set(&mut l.tau, self.tau);
        set(&mut l.learnable_tau, self.learnable_tau);
        set(&mut l.tau_init, self.tau_init);
        set(&mut l.lambda_mm, self.lambda_mm);
        set(
            &mut l.nspt_variant,
            self.variant.map(|v| match v {
                VariantArg::Nspt => NsptVariant::Nspt,
                VariantArg::Ntpt => NsptVariant::Ntpt,
                VariantArg::NsptAa => NsptVariant::NsptAa,
                VariantArg::NsptAn => NsptVariant::NsptAn,
            }),
        );
        set(&mut l.nspt_audio, self.nspt_audio);
        set(&mut l.nspt_text, self.nspt_text);
        set(&mut l.mm_use_cls_only, self.mm_cls_only);
        set(&mut l.mm_exclude_rehearsal_anchors, self.mm_exclude_rehearsal_anchors);
        set(&mut l.include_self_in_denominator, self.include_self_in_denominator);
        set(&mut c.weighted_accuracy, self.weighted_accuracy);
        set(&mut c.wer_skip_prefix, self.wer_skip_prefix);
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Corpus, output root, seeds and base config after merging file and flags.
struct Resolved {
    corpus: Corpus,
    out: PathBuf,
    seeds: Vec<u64>,
    base: StrategyConfig,
}

fn resolve(file: &mut FileConfig, args: TrainArgs) -> anyhow::Result<Resolved> {
    let corpus = match args.data.or(file.data.take()) {
        Some(dir) => Corpus::load(&dir).with_context(|| format!("loading corpus from {}", dir.display()))?,
        None => {
            log::info!("no --data given, generating the corpus from the config");
            generate_corpus(&file.corpus)?
        }
    };
    let mut base = file.run.clone();
    args.run.apply(&mut base);
    Ok(Resolved {
        corpus,
        out: args.out.or(file.out.take()).unwrap_or_else(|| PathBuf::from("runs")),
        seeds: args.seeds.or(file.seeds.take()).unwrap_or_else(|| vec![base.seed]),
        base,
    })
}

/// Runs every config, writes each run directory and the comparison table.
fn run_all(corpus: &Corpus, configs: &[StrategyConfig], out: &Path) -> anyhow::Result<Vec<ResultRecord>> {
    for c in configs {
        c.validate()?;
    }
    log::info!("{} runs", configs.len());
    let start = Instant::now();
    let outputs = run_many(corpus, configs);
    let per_run = start.elapsed().as_secs_f64() / configs.len().max(1) as f64;
    let mut records = Vec::new();
    for out_run in outputs {
        let run = out_run?;
        let dir = run_dir_name(out, &run);
        let record = write_run(&dir, &run, corpus, per_run)?;
        log::info!(
            "{} {} seed {}: avg acc {:.4}, last acc {:.4}",
            record.strategy,
            record.setting,
            record.seed,
            record.avg_acc,
            record.last_acc
        );
        records.push(record);
    }
    let rows = export_comparison(&records, out)?;
    print!("{}", markdown_table(&rows));
    Ok(records)
}

fn with_seeds(base: &StrategyConfig, seeds: &[u64]) -> Vec<StrategyConfig> {
    seeds
        .iter()
        .map(|&seed| StrategyConfig { seed, ..base.clone() })
        .collect()
}

fn ablation_grid(base: &StrategyConfig) -> Vec<StrategyConfig> {
    let mut base = base.clone();
    if !base.strategy.uses_contrastive() {
        base.strategy = Strategy::Coconut;
    }
    let mut grid = Vec::new();
    for v in [
        NsptVariant::Nspt,
        NsptVariant::Ntpt,
        NsptVariant::NsptAa,
        NsptVariant::NsptAn,
    ] {
        let mut c = base.clone();
        c.loss.nspt_variant = v;
        grid.push(c);
    }
    for cls_only in [true, false] {
        for exclude in [true, false] {
            let mut c = base.clone();
            c.loss.mm_use_cls_only = cls_only;
            c.loss.mm_exclude_rehearsal_anchors = exclude;
            if !grid.contains(&c) {
                grid.push(c);
            }
        }
    }
    grid
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invariant = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<coconut_core::Error>(),
                    Some(coconut_core::Error::Invariant(_))
                )
            });
            ExitCode::from(if invariant { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenerateData(a) => {
            let mut spec = file.corpus;
            a.corpus.apply(&mut spec);
            let out = a.out.or(file.out).unwrap_or_else(|| PathBuf::from("data"));
            let corpus = generate_corpus(&spec)?;
            corpus.save(&out)?;
            println!(
                "{} examples ({} train, {} test), {} intents, vocabulary {} -> {}",
                corpus.examples.len(),
                corpus.train_ids().len(),
                corpus.test_ids().len(),
                corpus.num_intents(),
                corpus.vocab.len(),
                out.display()
            );
        }
        Command::Train(a) => {
            let r = resolve(&mut file, a)?;
            run_all(&r.corpus, &with_seeds(&r.base, &r.seeds), &r.out)?;
        }
        Command::Ablate(a) => {
            let r = resolve(&mut file, a)?;
            let configs: Vec<_> = ablation_grid(&r.base)
                .iter()
                .flat_map(|c| with_seeds(c, &r.seeds))
                .collect();
            run_all(&r.corpus, &configs, &r.out)?;
        }
        Command::SweepMemory(a) => {
            let sizes = a
                .memory_sizes
                .or(file.memory_sizes.take())
                .unwrap_or_else(|| vec![2, 4, 8, 30]);
            let strategies = a
                .strategies
                .or(file.strategies.take())
                .unwrap_or_else(|| vec![Strategy::Er, Strategy::Coconut]);
            let r = resolve(&mut file, a.train)?;
            let mut configs = Vec::new();
            for &m in &sizes {
                for &s in &strategies {
                    let c = StrategyConfig {
                        strategy: s,
                        buffer: BufferPolicy::PerClass(m),
                        ..r.base.clone()
                    };
                    configs.extend(with_seeds(&c, &r.seeds));
                }
            }
            run_all(&r.corpus, &configs, &r.out)?;
        }
        Command::GradCheck(a) => {
            let g = file.grad_check;
            let mut cfg = SuiteConfig::default();
            set(&mut cfg.batches, a.batches.or(g.batches));
            set(&mut cfg.h, a.h.or(g.h));
            set(&mut cfg.tol, a.tol.or(g.tol));
            set(&mut cfg.seed, a.seed.or(g.seed));
            let start = Instant::now();
            let entries = run_suite(&cfg)?;
            println!(
                "{:<22} {:>7} {:>12} {:>8} {:>8} {:>8}  result",
                "loss", "batches", "worst rel", "probes", "skipped", "teacher"
            );
            for e in &entries {
                println!(
                    "{:<22} {:>7} {:>12.3e} {:>8} {:>8} {:>8}  {}",
                    e.loss,
                    e.batches,
                    e.worst_rel_error,
                    e.probes,
                    e.skipped,
                    if e.teacher_grad_absent { "clean" } else { "LEAK" },
                    if e.passed { "PASS" } else { "FAIL" }
                );
            }
            println!("{:.1}s", start.elapsed().as_secs_f64());
            if let Some(out) = a.out.or(g.out) {
                if let Some(dir) = out.parent() {
                    fs::create_dir_all(dir)?;
                }
                fs::write(&out, serde_json::to_string_pretty(&entries)?)?;
            }
            if entries.iter().any(|e| !e.teacher_grad_absent) {
                bail!(coconut_core::Error::Invariant("teacher received a gradient".into()));
            }
            if entries.iter().any(|e| !e.passed) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Report(a) => {
            let mut roots = a.roots;
            if roots.is_empty() {
                roots.push(file.out.clone().unwrap_or_else(|| PathBuf::from("runs")));
            }
            let mut records = Vec::new();
            for root in &roots {
                records.extend(collect_records(root).with_context(|| format!("reading {}", root.display()))?);
            }
            if records.is_empty() {
                bail!("no result.json found under {:?}", roots);
            }
            let out = a.out.unwrap_or_else(|| roots[0].clone());
            let rows = export_comparison(&records, &out)?;
            print!("{}", markdown_table(&rows));
        }
    }
    Ok(ExitCode::SUCCESS)
}
