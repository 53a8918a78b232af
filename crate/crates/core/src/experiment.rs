//! Multi-seed experiment suites over trained models, with per-seed rows and
//! seed-averaged summaries written as CSV.
//!
//! * `comparative`: the tri-modal model against each standalone pair model
//!   and unimodal logistic probes, on complete test samples.
//! * `robustness`: with one modality masked at test time, the tri-modal model
//!   (regime A) against the pair model trained on the surviving modalities
//!   (regime B); plus the masked-condition drop of the full model against
//!   the variant trained without contrastive terms.
//! * `ablation`: the four variants on complete test samples.
//!
//! A [`Runner`] trains each `(model kind, seed)` at most once and reuses it
//! across suites.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{generate_synthetic, split_811, Dataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::modality::{ModalityId, ModalityMask, Pair};
use crate::model::{TriMF, Variant};
use crate::params::ParamStore;
use crate::probe::{probe_report, ProbeFeatures};
use crate::trainer::{train_on_split, write_atomic, TrainReport, EVAL_BATCH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Comparative,
    Robustness,
    Ablation,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Comparative, Suite::Robustness, Suite::Ablation];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Comparative => "comparative",
            Suite::Robustness => "robustness",
            Suite::Ablation => "ablation",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?} (comparative, robustness, ablation)")))
    }
}

/// What gets trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// All three pairs, the given variant.
    Tri(Variant),
    /// A standalone two-modality model.
    Pair(Pair),
}

impl ModelKind {
    pub fn name(self) -> String {
        match self {
            ModelKind::Tri(Variant::Full) => "trimf".into(),
            ModelKind::Tri(v) => format!("trimf_{v}"),
            ModelKind::Pair(p) => format!("bimf_{p}"),
        }
    }

    fn run_config(self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut run = base.clone();
        run.seed = seed;
        match self {
            ModelKind::Tri(v) => {
                run.variant = v;
                run.pairs = Pair::ALL.to_vec();
            }
            ModelKind::Pair(p) => {
                run.variant = Variant::Full;
                run.pairs = vec![p];
            }
        }
        run
    }
}

/// Where each seed's dataset comes from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Regenerated per seed with the spec's seed replaced.
    Synthetic(SynthSpec),
    /// One dataset shared by all seeds; seeds vary split and init.
    Fixed(Arc<Dataset>),
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// Base run; seed, variant and pairs are set per job.
    pub run: RunConfig,
    pub data: DataSource,
    pub seeds: Vec<u64>,
    /// Worker threads for independent training jobs.
    pub threads: usize,
}

impl ExperimentConfig {
    /// Desk defaults: the default synthetic spec, seeds 0..3.
    pub fn desk() -> Self {
        Self {
            run: RunConfig::desk(),
            data: DataSource::Synthetic(SynthSpec::default()),
            seeds: vec![0, 1, 2],
            threads: threads_from_env(),
        }
    }
}

/// `TRIMF_THREADS` if set and positive, else the available parallelism.
pub fn threads_from_env() -> usize {
    std::env::var("TRIMF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub struct Trained {
    pub model: TriMF,
    pub store: ParamStore<f32>,
    pub report: TrainReport,
}

/// One evaluated (seed, model, condition).
#[derive(Clone, Debug, Serialize)]
pub struct ResultRow {
    pub suite: String,
    pub seed: u64,
    pub model: String,
    /// `A`/`B` in the robustness suite, empty elsewhere.
    pub regime: String,
    /// Modalities available at test time.
    pub condition: String,
    pub macro_auroc: Option<f64>,
    pub macro_auprc: Option<f64>,
    pub param_count: Option<usize>,
    pub epochs: Option<usize>,
    pub train_seconds: Option<f64>,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

impl ResultRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub suite: String,
    pub model: String,
    pub regime: String,
    pub condition: String,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub auroc_mean: Option<f64>,
    pub auroc_std: Option<f64>,
    pub auprc_mean: Option<f64>,
    pub auprc_std: Option<f64>,
}

/// Full vs no-contrastive model under each test condition.
#[derive(Clone, Debug, Serialize)]
pub struct DropRow {
    pub seed: u64,
    pub model: String,
    pub condition: String,
    pub macro_auroc: Option<f64>,
    pub macro_auprc: Option<f64>,
    /// Unmasked AUROC minus this condition's AUROC.
    pub auroc_drop: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct SuiteOutput {
    pub suite: Suite,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    /// Robustness only.
    pub drops: Vec<DropRow>,
    pub seconds: f64,
}

impl SuiteOutput {
    pub fn summary_for(&self, model: &str, regime: &str, condition: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.model == model && s.regime == regime && s.condition == condition)
    }

    /// Mean over seeds of the average masked-condition drop of `model`.
    pub fn mean_masked_drop(&self, model: &str) -> Option<f64> {
        let drops: Vec<f64> = self
            .drops
            .iter()
            .filter(|d| d.model == model && d.condition != ModalityMask::ALL.to_string())
            .filter_map(|d| d.auroc_drop)
            .collect();
        (!drops.is_empty()).then(|| drops.iter().sum::<f64>() / drops.len() as f64)
    }

    /// Writes `<suite>.csv`, `<suite>_summary.csv` and, for robustness,
    /// `robustness_frcl.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = self.suite.name();
        write_atomic(&dir.join(format!("{name}.csv")), &to_csv(&self.rows)?)?;
        write_atomic(&dir.join(format!("{name}_summary.csv")), &to_csv(&self.summary)?)?;
        if self.suite == Suite::Robustness {
            write_atomic(&dir.join("robustness_frcl.csv"), &to_csv(&self.drops)?)?;
        }
        Ok(())
    }
}

fn to_csv<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Contract(format!("csv buffer: {e}")))
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    (Some(mean), std)
}

fn summarize(suite: Suite, rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    for r in rows {
        let k = (r.model.clone(), r.regime.clone(), r.condition.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(model, regime, condition)| {
            let group: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.model == model && r.regime == regime && r.condition == condition)
                .collect();
            let ok: Vec<&&ResultRow> = group.iter().filter(|r| r.ok()).collect();
            let roc: Vec<f64> = ok.iter().filter_map(|r| r.macro_auroc).collect();
            let pr: Vec<f64> = ok.iter().filter_map(|r| r.macro_auprc).collect();
            let (auroc_mean, auroc_std) = mean_std(&roc);
            let (auprc_mean, auprc_std) = mean_std(&pr);
            SummaryRow {
                suite: suite.name().into(),
                model,
                regime,
                condition,
                seeds_ok: ok.len(),
                seeds_failed: group.len() - ok.len(),
                auroc_mean,
                auroc_std,
                auprc_mean,
                auprc_std,
            }
        })
        .collect()
}

type Memo = HashMap<(ModelKind, u64), Arc<std::result::Result<Trained, String>>>;

pub struct Runner {
    pub config: ExperimentConfig,
    datasets: HashMap<u64, Arc<Dataset>>,
    models: Memo,
}

impl Runner {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.run.validate()?;
        if config.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        Ok(Self {
            config,
            datasets: HashMap::new(),
            models: HashMap::new(),
        })
    }

    pub fn dataset(&mut self, seed: u64) -> Result<Arc<Dataset>> {
        if let Some(d) = self.datasets.get(&seed) {
            return Ok(d.clone());
        }
        let d = match &self.config.data {
            DataSource::Synthetic(spec) => Arc::new(generate_synthetic(&SynthSpec { seed, ..spec.clone() })?),
            DataSource::Fixed(d) => d.clone(),
        };
        self.datasets.insert(seed, d.clone());
        Ok(d)
    }

    /// Number of models trained so far.
    pub fn trained_count(&self) -> usize {
        self.models.len()
    }

    /// Trains every missing `(kind, seed)` across the worker pool. Failures
    /// are kept as messages.
    pub fn ensure(&mut self, jobs: &[(ModelKind, u64)]) -> Result<()> {
        let mut todo: Vec<(ModelKind, u64)> = Vec::new();
        for &job in jobs {
            if !self.models.contains_key(&job) && !todo.contains(&job) {
                todo.push(job);
            }
        }
        if todo.is_empty() {
            return Ok(());
        }
        let mut inputs = Vec::with_capacity(todo.len());
        for &(kind, seed) in &todo {
            inputs.push((kind, seed, self.dataset(seed)?));
        }
        let base = &self.config.run;
        let next = Mutex::new(0usize);
        let done: Mutex<Vec<((ModelKind, u64), std::result::Result<Trained, String>)>> = Mutex::new(Vec::new());
        let workers = self.config.threads.clamp(1, inputs.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = {
                        let mut n = next.lock().expect("job counter");
                        let i = *n;
                        *n += 1;
                        i
                    };
                    let Some((kind, seed, data)) = inputs.get(i) else { break };
                    let run = kind.run_config(base, *seed);
                    log::info!("training {} seed {seed}", kind.name());
                    let outcome = split_811(data, *seed)
                        .and_then(|split| train_on_split::<f32>(&run, data, &split, None))
                        .map(|o| Trained {
                            model: o.model,
                            store: o.store,
                            report: o.report,
                        })
                        .map_err(|e| {
                            log::warn!("{} seed {seed} failed: {e}", kind.name());
                            e.to_string()
                        });
                    done.lock().expect("results").push(((*kind, *seed), outcome));
                });
            }
        });
        for (key, outcome) in done.into_inner().expect("results") {
            self.models.insert(key, Arc::new(outcome));
        }
        Ok(())
    }

    pub fn model(&self, kind: ModelKind, seed: u64) -> Option<Arc<std::result::Result<Trained, String>>> {
        self.models.get(&(kind, seed)).cloned()
    }

    fn split(&mut self, seed: u64) -> Result<(Arc<Dataset>, Split)> {
        let data = self.dataset(seed)?;
        let split = split_811(&data, seed)?;
        Ok((data, split))
    }

    fn eval_row(
        &mut self,
        suite: Suite,
        kind: ModelKind,
        seed: u64,
        regime: &str,
        mask: ModalityMask,
    ) -> Result<ResultRow> {
        let (data, split) = self.split(seed)?;
        let trained = self.model(kind, seed).expect("ensure() ran first");
        let mut row = ResultRow {
            suite: suite.name().into(),
            seed,
            model: kind.name(),
            regime: regime.into(),
            condition: mask.to_string(),
            macro_auroc: None,
            macro_auprc: None,
            param_count: None,
            epochs: None,
            train_seconds: None,
            status: "ok".into(),
        };
        match trained.as_ref() {
            Err(msg) => row.status = format!("failed: {msg}"),
            Ok(t) => {
                row.param_count = Some(t.report.param_count);
                row.epochs = Some(t.report.epochs_run);
                row.train_seconds = Some(t.report.seconds);
                let view = data.subset(&split.test).with_mask(mask);
                match evaluate(&t.model, &t.store, &view, EVAL_BATCH) {
                    Ok(r) => fill(&mut row, &r),
                    Err(e) => row.status = format!("failed: {e}"),
                }
            }
        }
        Ok(row)
    }

    fn probe_row(&mut self, seed: u64, m: ModalityId) -> Result<ResultRow> {
        let (data, split) = self.split(seed)?;
        let started = Instant::now();
        let kind = ProbeFeatures::Unimodal(m);
        let mut row = ResultRow {
            suite: Suite::Comparative.name().into(),
            seed,
            model: kind.name(),
            regime: String::new(),
            condition: ModalityMask::NONE.with(m).to_string(),
            macro_auroc: None,
            macro_auprc: None,
            param_count: None,
            epochs: None,
            train_seconds: None,
            status: "ok".into(),
        };
        match probe_report(&data.subset(&split.train), &data.subset(&split.val), &data.subset(&split.test), kind) {
            Ok(r) => fill(&mut row, &r),
            Err(e) => row.status = format!("failed: {e}"),
        }
        row.train_seconds = Some(started.elapsed().as_secs_f64());
        Ok(row)
    }

    pub fn run_suite(&mut self, suite: Suite) -> Result<SuiteOutput> {
        let started = Instant::now();
        let seeds = self.config.seeds.clone();
        let mut rows = Vec::new();
        let mut drops = Vec::new();
        match suite {
            Suite::Comparative => {
                let kinds: Vec<ModelKind> = std::iter::once(ModelKind::Tri(Variant::Full))
                    .chain(Pair::ALL.map(ModelKind::Pair))
                    .collect();
                self.ensure(&jobs(&kinds, &seeds))?;
                for &seed in &seeds {
                    for &kind in &kinds {
                        rows.push(self.eval_row(suite, kind, seed, "", ModalityMask::ALL)?);
                    }
                    for m in ModalityId::ALL {
                        rows.push(self.probe_row(seed, m)?);
                    }
                }
            }
            Suite::Robustness => {
                let kinds: Vec<ModelKind> = [ModelKind::Tri(Variant::Full), ModelKind::Tri(Variant::NoFrcl)]
                    .into_iter()
                    .chain(Pair::ALL.map(ModelKind::Pair))
                    .collect();
                self.ensure(&jobs(&kinds, &seeds))?;
                for &seed in &seeds {
                    for m in ModalityId::ALL {
                        let mask = ModalityMask::ALL.without(m);
                        let pair = Pair::from_mask(mask).expect("two modalities form a pair");
                        rows.push(self.eval_row(suite, ModelKind::Tri(Variant::Full), seed, "A", mask)?);
                        rows.push(self.eval_row(suite, ModelKind::Pair(pair), seed, "B", mask)?);
                    }
                    for variant in [Variant::Full, Variant::NoFrcl] {
                        drops.extend(self.drop_rows(ModelKind::Tri(variant), seed)?);
                    }
                }
            }
            Suite::Ablation => {
                let kinds: Vec<ModelKind> = Variant::ALL.map(ModelKind::Tri).to_vec();
                self.ensure(&jobs(&kinds, &seeds))?;
                for &seed in &seeds {
                    for &kind in &kinds {
                        rows.push(self.eval_row(suite, kind, seed, "", ModalityMask::ALL)?);
                    }
                }
            }
        }
        let summary = summarize(suite, &rows);
        Ok(SuiteOutput {
            suite,
            rows,
            summary,
            drops,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    fn drop_rows(&mut self, kind: ModelKind, seed: u64) -> Result<Vec<DropRow>> {
        let masks = std::iter::once(ModalityMask::ALL).chain(ModalityId::ALL.map(|m| ModalityMask::ALL.without(m)));
        let mut out = Vec::new();
        let mut full_auroc = None;
        for mask in masks {
            let r = self.eval_row(Suite::Robustness, kind, seed, "", mask)?;
            if mask == ModalityMask::ALL {
                full_auroc = r.macro_auroc;
            }
            out.push(DropRow {
                seed,
                model: r.model,
                condition: r.condition,
                macro_auroc: r.macro_auroc,
                macro_auprc: r.macro_auprc,
                auroc_drop: full_auroc.zip(r.macro_auroc).map(|(a, b)| a - b),
                status: r.status,
            });
        }
        Ok(out)
    }
}

fn jobs(kinds: &[ModelKind], seeds: &[u64]) -> Vec<(ModelKind, u64)> {
    seeds.iter().flat_map(|&s| kinds.iter().map(move |&k| (k, s))).collect()
}

fn fill(row: &mut ResultRow, report: &EvalReport) {
    row.macro_auroc = Some(report.macro_auroc);
    row.macro_auprc = Some(report.macro_auprc);
}
