use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use trimf::config::RunConfig;
use trimf::data::{generate_synthetic, read_dataset_file, split_811, write_dataset_file, Dataset, SynthSpec};
use trimf::experiment::{threads_from_env, DataSource, ExperimentConfig, Runner, Suite};
use trimf::gradcheck::run_gradcheck;
use trimf::metrics::{evaluate, EvalReport};
use trimf::modality::{ModalityId, ModalityMask};
use trimf::model::{TriMF, Variant};
use trimf::tensor::DType;
use trimf::trainer::{load_checkpoint, restore_into, structural_diff, train, EVAL_BATCH};
use trimf::{Error, Result};

#[derive(Parser)]
#[command(name = "trimf", version, about = "Tri-modal fusion models: data, training, evaluation and experiment suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Synth {
        /// JSON generator spec; defaults to the desk spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the spec sample count.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train one model and write a run directory.
    Train {
        /// JSON run config; defaults to the desk config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file; overrides the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// full, no_sa, no_lmf or no_frcl.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; overrides the config.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, optionally with one modality masked out.
    Eval {
        /// `checkpoint.best` from a run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file with the shapes the checkpoint was trained on.
        #[arg(long)]
        data: PathBuf,
        /// Modality to mask out of every sample (image, text, tabular).
        #[arg(long)]
        mask: Vec<ModalityId>,
        /// Run config to check the checkpoint against.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate every sample instead of the checkpoint seed's test split.
        #[arg(long)]
        all: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run experiment suites over several seeds and write CSV tables.
    Experiment {
        /// comparative, robustness or ablation; repeat for several.
        #[arg(long, required = true)]
        suite: Vec<Suite>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, short)]
        out: PathBuf,
        /// Base run config; defaults to the desk config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fixed dataset shared by all seeds.
        #[arg(long, conflicts_with = "spec")]
        data: Option<PathBuf>,
        /// Generator spec, regenerated per seed.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Worker threads; defaults to TRIMF_THREADS or the core count.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check every differentiable op and the toy model against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print every case, not just the summary.
        #[arg(long, short)]
        verbose: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Synth { spec, seed, samples, out } => synth(spec.as_deref(), seed, samples, &out),
        Command::Train { config, data, variant, seed, out } => run_train(config.as_deref(), data, variant, seed, out),
        Command::Eval { checkpoint, data, mask, config, all, json } => {
            run_eval(&checkpoint, &data, &mask, config.as_deref(), all, json.as_deref())
        }
        Command::Experiment { suite, seeds, out, config, data, spec, threads } => {
            run_experiment(&suite, seeds, &out, config.as_deref(), data.as_deref(), spec.as_deref(), threads)
        }
        Command::Gradcheck { seed, verbose } => gradcheck(seed, verbose),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::UnsupportedMask { .. } = e {
                eprintln!("hint: mask at most one modality; every fused vector needs two present modalities");
            }
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn load_spec(path: Option<&Path>) -> Result<SynthSpec> {
    let Some(path) = path else { return Ok(SynthSpec::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_run(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::desk()), RunConfig::load)
}

fn synth(spec: Option<&Path>, seed: Option<u64>, samples: Option<usize>, out: &Path) -> Result<ExitCode> {
    let mut spec = load_spec(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = samples {
        spec.sample_count = n;
    }
    let dataset = generate_synthetic(&spec)?;
    write_dataset_file(out, &dataset)?;
    println!("wrote {} samples to {}", dataset.len(), out.display());
    for h in &dataset.header.modalities {
        println!("  {:<8} {} tokens x {}", h.id.name(), h.shape.token_count, h.shape.native_dim);
    }
    let rates: Vec<String> = dataset.label_rates().iter().map(|r| format!("{r:.3}")).collect();
    println!("  label rates: {}", rates.join(" "));
    Ok(ExitCode::SUCCESS)
}

fn run_train(
    config: Option<&Path>,
    data: Option<PathBuf>,
    variant: Option<Variant>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let mut run = load_run(config)?;
    if let Some(d) = data {
        run.dataset = d;
    }
    if let Some(v) = variant {
        run.variant = v;
    }
    if let Some(s) = seed {
        run.seed = s;
    }
    if let Some(o) = out {
        run.output_dir = o;
    }
    run.validate()?;
    let dataset = read_dataset_file(&run.dataset)?;
    let dir = run.output_dir.clone();
    let report = match run.dtype {
        DType::F32 => train::<f32>(&run, &dataset, Some(&dir))?.report,
        DType::F64 => train::<f64>(&run, &dataset, Some(&dir))?.report,
    };
    println!(
        "{} ({} parameters): {} epochs, best {} (val loss {:.5}), {:.1}s",
        report.variant, report.param_count, report.epochs_run, report.best_epoch, report.best_val_loss, report.seconds
    );
    println!("test macro AUROC {:.4}  AUPRC {:.4}", report.test.macro_auroc, report.test.macro_auprc);
    println!("run directory: {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn run_eval(
    checkpoint: &Path,
    data: &Path,
    masked: &[ModalityId],
    config: Option<&Path>,
    all: bool,
    json: Option<&Path>,
) -> Result<ExitCode> {
    let ckpt = load_checkpoint::<f64>(checkpoint)?;
    let arch = match config {
        None => ckpt.meta.arch.clone(),
        Some(path) => {
            let run = RunConfig::load(path)?;
            run.build(ckpt.meta.arch.inputs.clone(), ckpt.meta.arch.label_count)?.0
        }
    };
    let (model, mut store) = TriMF::new::<f64>(arch, ckpt.meta.seed)?;
    let diff = structural_diff(&store, &ckpt.params);
    if !diff.is_empty() {
        eprintln!("checkpoint does not match the configured model:");
        for line in &diff {
            eprintln!("  {line}");
        }
        return Err(Error::Config(format!("{} structural differences", diff.len())));
    }
    restore_into(&mut store, &ckpt)?;

    let dataset = read_dataset_file(data)?;
    check_shapes(&model, &dataset)?;
    let mask = masked.iter().fold(ModalityMask::ALL, |m, &x| m.without(x));
    let indices = if all {
        (0..dataset.len()).collect()
    } else {
        split_811(&dataset, ckpt.meta.seed)?.test
    };
    let view = dataset.subset(&indices).with_mask(mask);
    let report = evaluate(&model, &store, &view, EVAL_BATCH)?;
    print_report(&report);
    if let Some(path) = json {
        std::fs::write(path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn check_shapes(model: &TriMF, dataset: &Dataset) -> Result<()> {
    for m in ModalityId::ALL {
        let want = model.arch.inputs.get(m);
        match dataset.header.shape(m) {
            Some(got) if got == want => {}
            got => {
                return Err(Error::Config(format!(
                    "{m}: checkpoint expects {} x {}, dataset has {:?}",
                    want.token_count, want.native_dim, got
                )))
            }
        }
    }
    if dataset.header.label_count != model.arch.label_count {
        return Err(Error::Config(format!(
            "checkpoint has {} labels, dataset {}",
            model.arch.label_count, dataset.header.label_count
        )));
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    let pairs: Vec<&str> = r.active_pairs.iter().map(|p| p.name()).collect();
    println!("condition {}  ({} samples)", r.mask, r.sample_count);
    println!("active pairs: {}", pairs.join(", "));
    for (l, (roc, pr)) in r.auroc.iter().zip(&r.auprc).enumerate() {
        let f = |v: &Option<f64>| v.map_or("   -  ".to_string(), |x| format!("{x:.4}"));
        println!("  label {l:>2}  pos {:>4}  AUROC {}  AUPRC {}", r.positive_counts[l], f(roc), f(pr));
    }
    println!("macro AUROC {:.4}  AUPRC {:.4}", r.macro_auroc, r.macro_auprc);
}

fn run_experiment(
    suites: &[Suite],
    seeds: Vec<u64>,
    out: &Path,
    config: Option<&Path>,
    data: Option<&Path>,
    spec: Option<&Path>,
    threads: Option<usize>,
) -> Result<ExitCode> {
    let source = match data {
        Some(path) => DataSource::Fixed(Arc::new(read_dataset_file(path)?)),
        None => {
            let spec = load_spec(spec)?;
            spec.validate()?;
            DataSource::Synthetic(spec)
        }
    };
    let mut runner = Runner::new(ExperimentConfig {
        run: load_run(config)?,
        data: source,
        seeds,
        threads: threads.unwrap_or_else(threads_from_env),
    })?;
    let mut failed = 0;
    for &suite in suites {
        let output = runner.run_suite(suite)?;
        output.write(out)?;
        println!("{suite} ({:.0}s):", output.seconds);
        for s in &output.summary {
            let f = |m: Option<f64>, sd: Option<f64>| match (m, sd) {
                (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
                (Some(m), None) => format!("{m:.4}"),
                _ => "-".into(),
            };
            let regime = if s.regime.is_empty() { String::new() } else { format!(" [{}]", s.regime) };
            println!(
                "  {:<22}{:<5}{:<10} AUROC {:<18} AUPRC {:<18} seeds {}/{}",
                s.model,
                regime,
                s.condition,
                f(s.auroc_mean, s.auroc_std),
                f(s.auprc_mean, s.auprc_std),
                s.seeds_ok,
                s.seeds_ok + s.seeds_failed
            );
            failed += s.seeds_failed;
        }
        if suite == Suite::Robustness {
            for m in ["trimf", "trimf_no_frcl"] {
                if let Some(d) = output.mean_masked_drop(m) {
                    println!("  mean masked AUROC drop, {m}: {d:.4}");
                }
            }
        }
    }
    println!("tables written to {}", out.display());
    if failed > 0 {
        eprintln!("{failed} evaluations failed; see the status column");
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(seed: u64, verbose: bool) -> Result<ExitCode> {
    let report = run_gradcheck(seed)?;
    if verbose {
        for r in &report.results {
            println!(
                "{:<4} {:<28} {:>6} checked  worst rel {:.2e} at {}",
                if r.passed() { "ok" } else { "FAIL" },
                r.name,
                r.checked,
                r.worst_rel,
                r.worst_at
            );
        }
    }
    let worst = report.worst().expect("gradcheck has cases");
    println!(
        "{} cases in {:.1}s; worst relative error {:.2e} ({} at {})",
        report.results.len(),
        report.seconds,
        worst.worst_rel,
        worst.name,
        worst.worst_at
    );
    let failures = report.failures();
    if failures.is_empty() {
        println!("gradcheck passed");
        return Ok(ExitCode::SUCCESS);
    }
    for f in &failures {
        eprintln!(
            "FAIL {}: rel {:.2e} at {} (analytic {:.6e}, numeric {:.6e})",
            f.name, f.worst_rel, f.worst_at, f.analytic, f.numeric
        );
    }
    Ok(ExitCode::from(1))
}
