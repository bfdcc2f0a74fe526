//! End-to-end runs behind the command-line tool: training every
//! (objective, seed) cell, evaluating saved models, the full benchmark and
//! synthetic data export. Every emitted byte depends only on the
//! configuration.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::AttackSpec;
use crate::config::{EpsilonSetting, RunConfig};
use crate::data::{export_pgm, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::{
    adversarial_metrics, clean_accuracy, contrast_histogram, epsilon_sweep, eps_key, shifted_brier, EvalReport,
    SeedFailure, SeedResult,
};
use crate::model::{load_params, save_params, Model, Network, ParameterSet};
use crate::objective::{ObjectiveKind, ObjectiveSpec};
use crate::train::{train, LogRow};

/// A trained model of one (objective, seed) cell.
#[derive(Clone, Debug)]
pub struct TrainedCell {
    pub method: String,
    pub seed: u64,
    pub params: ParameterSet,
    pub log: Vec<LogRow>,
}

/// Outcome of the epsilon selection sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpsilonChoice {
    pub epsilon: f64,
    /// `(epsilon, mean Standard adversarial accuracy)` over the grid; empty
    /// when the epsilon was fixed in the configuration.
    pub sweep: Vec<(f64, f64)>,
    pub threshold: f64,
    /// False when no grid value fell below the threshold and the largest
    /// one was used.
    pub crossed: bool,
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub epsilon: Option<EpsilonChoice>,
    pub reports: Vec<EvalReport>,
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Usage(format!("cannot start worker threads: {e}")))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn cell_stem(method: &str, seed: u64) -> String {
    format!("{method}_seed{seed}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows<R: AsRef<[String]>>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row.as_ref()).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    write_rows(
        path,
        &["epoch", "batch", "total", "ce_term", "consistency_term"],
        log.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.batch.to_string(),
                r.total.to_string(),
                r.ce_term.to_string(),
                r.consistency_term.to_string(),
            ]
        }),
    )
}

/// Loads the dataset named by the configuration and splits it.
pub fn load_data(cfg: &RunConfig, base: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train_ds, test_ds) = cfg.load_split(base)?;
    log::info!("data: {} train / {} test images", train_ds.len(), test_ds.len());
    Ok((train_ds, test_ds))
}

fn train_one(cfg: &RunConfig, model: &Model, data: &LabeledDataset, spec: &ObjectiveSpec, seed: u64) -> Result<TrainedCell> {
    log::info!("training {} seed {seed}", spec.display_name());
    let init = model.init_params(seed);
    let out = train(model, init, &cfg.sgd, spec, data, seed)?;
    Ok(TrainedCell {
        method: spec.display_name().to_string(),
        seed,
        params: out.params,
        log: out.log,
    })
}

/// Trains one cell per (spec, seed) in parallel. Results keep the input
/// order; each cell's failure is returned in place.
fn train_cells(
    cfg: &RunConfig,
    model: &Model,
    data: &LabeledDataset,
    specs: &[ObjectiveSpec],
    pool: &rayon::ThreadPool,
) -> Vec<(String, u64, Result<TrainedCell>)> {
    let jobs: Vec<(&ObjectiveSpec, u64)> = specs
        .iter()
        .flat_map(|s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    pool.install(|| {
        jobs.par_iter()
            .map(|&(s, seed)| (s.display_name().to_string(), seed, train_one(cfg, model, data, s, seed)))
            .collect()
    })
}

/// Copy of a borrowed error that keeps its exit-code class.
fn restate(e: &Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(m.clone()),
        other => Error::Data(other.to_string()),
    }
}

fn standard_spec() -> ObjectiveSpec {
    ObjectiveSpec::new(ObjectiveKind::Standard)
}

/// Picks the training epsilon: the smallest grid value where the mean
/// adversarial accuracy of `standard` models has fallen `drop` below their
/// mean clean accuracy (the grid starts at 0, so its first entry is clean).
pub fn select_epsilon(
    cfg: &RunConfig,
    model: &Model,
    standard: &[&ParameterSet],
    test: &LabeledDataset,
    pool: &rayon::ThreadPool,
) -> Result<EpsilonChoice> {
    let grid = &cfg.epsilon_selection.grid;
    let base = cfg.eval.attack.spec();
    let sweeps: Vec<Vec<(f64, f64)>> = pool.install(|| {
        standard
            .par_iter()
            .map(|p| epsilon_sweep(&Network::new(model, p), test, &base, grid))
            .collect::<Result<_>>()
    })?;
    let mean: Vec<(f64, f64)> = grid
        .iter()
        .enumerate()
        .map(|(i, &eps)| (eps, sweeps.iter().map(|s| s[i].1).sum::<f64>() / sweeps.len() as f64))
        .collect();
    let threshold = mean[0].1 - cfg.epsilon_selection.drop;
    let crossing = mean.iter().find(|&&(_, acc)| acc <= threshold);
    let (epsilon, crossed) = match crossing {
        Some(&(eps, _)) => (eps, true),
        None => (*grid.last().expect("validated grid"), false),
    };
    if !crossed {
        log::warn!("Standard accuracy never fell to {threshold} on the selection grid; using epsilon {epsilon}");
    }
    log::info!("selected training epsilon {epsilon}");
    Ok(EpsilonChoice {
        epsilon,
        sweep: mean,
        threshold,
        crossed,
    })
}

fn write_epsilon_choice(dir: &Path, choice: &EpsilonChoice) -> Result<()> {
    write_rows(
        &dir.join("epsilon_selection.csv"),
        &["epsilon", "standard_adv_accuracy", "selected"],
        choice
            .sweep
            .iter()
            .map(|&(e, a)| vec![e.to_string(), a.to_string(), (e == choice.epsilon).to_string()]),
    )
}

struct Trained {
    cells: Vec<(String, u64, Result<TrainedCell>)>,
    epsilon: Option<EpsilonChoice>,
    train_eps: Option<f64>,
}

/// Trains every configured objective for every seed, selecting the
/// training epsilon first when the configuration asks for it.
fn train_all(
    cfg: &RunConfig,
    model: &Model,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    pool: &rayon::ThreadPool,
) -> Result<Trained> {
    let needs_eps = cfg.inherits_train_attack();
    let mut cells = Vec::new();
    let (epsilon, train_eps) = match (cfg.train_attack.epsilon, needs_eps) {
        (EpsilonSetting::Fixed(e), _) => (None, Some(e)),
        (EpsilonSetting::Select, false) => (None, None),
        (EpsilonSetting::Select, true) => {
            let listed = cfg.objectives.iter().find(|o| o.kind == ObjectiveKind::Standard && o.name.is_none());
            let spec = listed.cloned().unwrap_or_else(standard_spec);
            let standard = train_cells(cfg, model, train_ds, std::slice::from_ref(&spec), pool);
            let ok: Vec<&ParameterSet> = standard
                .iter()
                .filter_map(|(_, _, r)| r.as_ref().ok().map(|c| &c.params))
                .collect();
            if ok.is_empty() {
                let (_, seed, r) = &standard[0];
                let err = r.as_ref().err().map(ToString::to_string).unwrap_or_default();
                return Err(Error::Numeric(format!(
                    "no Standard model trained for epsilon selection (seed {seed}: {err})"
                )));
            }
            let choice = select_epsilon(cfg, model, &ok, test_ds, pool)?;
            if listed.is_some() {
                cells.extend(standard);
            }
            let eps = choice.epsilon;
            (Some(choice), Some(eps))
        }
    };
    let remaining: Vec<ObjectiveSpec> = cfg
        .objectives
        .iter()
        .filter(|o| !cells.iter().any(|(m, _, _)| m == o.display_name()))
        .map(|o| cfg.resolve_objective(o, train_eps.unwrap_or(0.0)))
        .collect();
    cells.extend(train_cells(cfg, model, train_ds, &remaining, pool));
    // report in configuration order
    let order = |m: &str| cfg.objectives.iter().position(|o| o.display_name() == m).unwrap_or(usize::MAX);
    cells.sort_by_key(|(m, s, _)| (order(m), *s));
    Ok(Trained {
        cells,
        epsilon,
        train_eps,
    })
}

fn save_cell(dir: &Path, cfg: &RunConfig, cell: &TrainedCell, train_eps: Option<f64>) -> Result<PathBuf> {
    let stem = cell_stem(&cell.method, cell.seed);
    let path = dir.join("models").join(format!("{stem}.rtns"));
    save_params(&path, &cell.params, &cfg.model, Some(&cell.method), train_eps)?;
    write_log(&dir.join("logs").join(format!("{stem}.csv")), &cell.log)?;
    Ok(path)
}

fn prepare_output(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(&dir.join("models"))?;
    create_dir(&dir.join("logs"))?;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json() + "\n").map_err(|e| Error::io(&path, e))
}

/// Trains every (objective, seed) cell and saves parameters and training
/// logs under `output_dir`. Stops at the first failing cell.
pub fn train_command(cfg: &RunConfig, base: &Path) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let (train_ds, test_ds) = load_data(cfg, base)?;
    let model = Model::new(&cfg.model)?;
    let pool = pool(cfg.threads)?;
    prepare_output(dir, cfg)?;
    let trained = train_all(cfg, &model, &train_ds, &test_ds, &pool)?;
    if let Some(choice) = &trained.epsilon {
        write_epsilon_choice(dir, choice)?;
    }
    let mut paths = Vec::new();
    for (_, _, cell) in trained.cells {
        paths.push(save_cell(dir, cfg, &cell?, trained.train_eps)?);
    }
    Ok(paths)
}

/// Epsilon list for reporting: the configured list plus the training
/// epsilon, ascending.
fn eval_eps(cfg: &RunConfig, train_eps: Option<f64>) -> Vec<f64> {
    let mut eps = cfg.eval.eps_list.clone();
    if let Some(e) = train_eps {
        if !eps.contains(&e) {
            eps.push(e);
        }
    }
    eps.sort_by(f64::total_cmp);
    eps
}

/// Metrics of one model on the test split.
pub fn evaluate_model(
    cfg: &RunConfig,
    model: &Model,
    params: &ParameterSet,
    seed: u64,
    test: &LabeledDataset,
    eps_list: &[f64],
) -> Result<SeedResult> {
    let net = Network::new(model, params);
    let base = cfg.eval.attack.spec();
    Ok(SeedResult {
        seed,
        clean_accuracy: clean_accuracy(&net, test)?,
        adv_accuracy: epsilon_sweep(&net, test, &base, eps_list)?,
        brier: shifted_brier(&net, test, &cfg.eval.views, cfg.eval.brier_mode)?,
    })
}

/// Mean cross-entropy on clean and on attacked test images.
pub fn attack_harm(model: &Model, params: &ParameterSet, test: &LabeledDataset, spec: &AttackSpec) -> Result<(f64, f64)> {
    let net = Network::new(model, params);
    let clean = adversarial_metrics(&net, test, &AttackSpec { epsilon: 0.0, ..spec.clone() })?;
    let adv = adversarial_metrics(&net, test, spec)?;
    Ok((clean.mean_cross_entropy, adv.mean_cross_entropy))
}

fn group_reports(method_order: &[String], results: Vec<(String, u64, Result<SeedResult>)>) -> Vec<EvalReport> {
    method_order
        .iter()
        .map(|m| {
            let mut ok = Vec::new();
            let mut failed = Vec::new();
            for (_, seed, r) in results.iter().filter(|(name, _, _)| name == m) {
                match r {
                    Ok(res) => ok.push(res.clone()),
                    Err(e) => failed.push(SeedFailure {
                        seed: *seed,
                        error: e.to_string(),
                    }),
                }
            }
            EvalReport::new(m.clone(), ok, failed)
        })
        .collect()
}

/// Writes sweep, accuracy, Brier, aggregate, failure and histogram CSVs.
pub fn write_reports(dir: &Path, cfg: &RunConfig, reports: &[EvalReport], test: &LabeledDataset) -> Result<()> {
    let per_seed = || reports.iter().flat_map(|r| r.per_seed.iter().map(move |s| (&r.method, s)));
    write_rows(
        &dir.join("sweep.csv"),
        &["method", "seed", "epsilon", "adv_accuracy"],
        per_seed().flat_map(|(m, s)| {
            s.adv_accuracy
                .iter()
                .map(move |&(e, a)| vec![m.clone(), s.seed.to_string(), eps_key(e), a.to_string()])
        }),
    )?;
    write_rows(
        &dir.join("accuracy.csv"),
        &["method", "seed", "clean_accuracy"],
        per_seed().map(|(m, s)| vec![m.clone(), s.seed.to_string(), s.clean_accuracy.to_string()]),
    )?;
    write_rows(
        &dir.join("brier.csv"),
        &["method", "seed", "view", "brier"],
        per_seed().flat_map(|(m, s)| {
            s.brier
                .iter()
                .map(move |(v, b)| vec![m.clone(), s.seed.to_string(), v.clone(), b.to_string()])
        }),
    )?;
    write_rows(
        &dir.join("aggregate.csv"),
        &["method", "metric", "epsilon_or_view", "mean", "stddev"],
        reports.iter().flat_map(|r| {
            r.aggregate.iter().map(move |a| {
                vec![
                    r.method.clone(),
                    a.metric.clone(),
                    a.key.clone(),
                    a.mean.to_string(),
                    a.stddev.to_string(),
                ]
            })
        }),
    )?;
    write_rows(
        &dir.join("failures.csv"),
        &["method", "seed", "error"],
        reports.iter().flat_map(|r| {
            r.failures
                .iter()
                .map(move |f| vec![r.method.clone(), f.seed.to_string(), f.error.clone()])
        }),
    )?;
    let hist = contrast_histogram(test, &cfg.eval.views, cfg.eval.bins)?;
    write_rows(
        &dir.join("contrast_hist.csv"),
        &["view", "bin_low", "bin_high", "count"],
        hist.iter()
            .map(|h| vec![h.view.clone(), h.bin_low.to_string(), h.bin_high.to_string(), h.count.to_string()]),
    )
}

/// Evaluates saved parameter files on the configured test split and writes
/// the report CSVs. Methods and seeds come from each file's sidecar.
pub fn eval_command(cfg: &RunConfig, base: &Path, params: &[PathBuf]) -> Result<Vec<EvalReport>> {
    if params.is_empty() {
        return Err(Error::Usage("no parameter files given".into()));
    }
    let (_, test_ds) = load_data(cfg, base)?;
    let model = Model::new(&cfg.model)?;
    let mut loaded = Vec::new();
    for path in params {
        let (p, sidecar) = load_params(path)?;
        if sidecar.config.stage_widths != cfg.model.stage_widths
            || sidecar.config.num_classes != cfg.model.num_classes
            || sidecar.config.input_size != cfg.model.input_size
            || sidecar.config.input_channels != cfg.model.input_channels
            || sidecar.config.blocks_per_stage != cfg.model.blocks_per_stage
        {
            return Err(Error::config(
                "model",
                format!("{} was saved for a different model configuration", path.display()),
            ));
        }
        model.check_params(&p)?;
        let method = sidecar
            .method
            .clone()
            .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        loaded.push((method, sidecar.seed, p, sidecar.train_epsilon));
    }
    let mut order: Vec<String> = Vec::new();
    for (m, ..) in &loaded {
        if !order.contains(m) {
            order.push(m.clone());
        }
    }
    let fixed = match cfg.train_attack.epsilon {
        EpsilonSetting::Fixed(e) => Some(e),
        EpsilonSetting::Select => None,
    };
    let pool = pool(cfg.threads)?;
    let results: Vec<(String, u64, Result<SeedResult>)> = pool.install(|| {
        loaded
            .par_iter()
            .map(|(m, seed, p, train_eps)| {
                let eps = eval_eps(cfg, train_eps.or(fixed));
                (m.clone(), *seed, evaluate_model(cfg, &model, p, *seed, &test_ds, &eps))
            })
            .collect()
    });
    if let Some((m, seed, Err(e))) = results.iter().find(|(_, _, r)| r.is_err()) {
        return Err(Error::Numeric(format!("{m} seed {seed}: {e}")));
    }
    let reports = group_reports(&order, results);
    create_dir(&cfg.output_dir)?;
    write_reports(&cfg.output_dir, cfg, &reports, &test_ds)?;
    Ok(reports)
}

/// Full comparison: trains and evaluates every (objective, seed) cell,
/// then writes all CSVs and `summary.md`. Failing cells are recorded and
/// skipped.
pub fn bench_command(cfg: &RunConfig, base: &Path) -> Result<BenchOutcome> {
    let dir = &cfg.output_dir;
    let (train_ds, test_ds) = load_data(cfg, base)?;
    let model = Model::new(&cfg.model)?;
    let pool = pool(cfg.threads)?;
    prepare_output(dir, cfg)?;
    let trained = train_all(cfg, &model, &train_ds, &test_ds, &pool)?;
    if let Some(choice) = &trained.epsilon {
        write_epsilon_choice(dir, choice)?;
    }
    let eps = eval_eps(cfg, trained.train_eps);
    let results: Vec<(String, u64, Result<SeedResult>)> = pool.install(|| {
        trained
            .cells
            .par_iter()
            .map(|(m, seed, cell)| {
                let r = match cell {
                    Ok(c) => save_cell(dir, cfg, c, trained.train_eps)
                        .and_then(|_| evaluate_model(cfg, &model, &c.params, *seed, &test_ds, &eps)),
                    Err(e) => Err(restate(e)),
                };
                (m.clone(), *seed, r)
            })
            .collect()
    });
    for (m, seed, r) in &results {
        if let Err(e) = r {
            log::warn!("{m} seed {seed} failed: {e}");
        }
    }
    let order: Vec<String> = cfg.objectives.iter().map(|o| o.display_name().to_string()).collect();
    let reports = group_reports(&order, results);
    write_reports(dir, cfg, &reports, &test_ds)?;
    let summary = summary_markdown(cfg, &reports, trained.epsilon.as_ref(), trained.train_eps);
    let path = dir.join("summary.md");
    fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    Ok(BenchOutcome {
        epsilon: trained.epsilon,
        reports,
    })
}

fn fmt_stat(r: &EvalReport, metric: &str, key: &str) -> String {
    r.aggregate
        .iter()
        .find(|a| a.metric == metric && a.key == key)
        .map(|a| format!("{:.3} ± {:.3}", a.mean, a.stddev))
        .unwrap_or_else(|| "n/a".into())
}

/// Markdown table of mean ± standard deviation per method.
pub fn summary_markdown(cfg: &RunConfig, reports: &[EvalReport], choice: Option<&EpsilonChoice>, train_eps: Option<f64>) -> String {
    let mut out = String::from("# Benchmark summary\n\n");
    out.push_str(&format!(
        "Seeds: {:?}. Evaluation attack: {} PGD, {} steps.\n",
        cfg.seeds, cfg.eval.attack.norm, cfg.eval.attack.steps
    ));
    match (choice, train_eps) {
        (Some(c), Some(e)) => out.push_str(&format!(
            "Training epsilon {e} (first grid value where Standard accuracy fell to {:.3} or below{}).\n",
            c.threshold,
            if c.crossed { "" } else { "; no value crossed, largest used" }
        )),
        (None, Some(e)) => out.push_str(&format!("Training epsilon {e} (fixed).\n")),
        _ => {}
    }
    out.push('\n');
    let eps_col = train_eps.map(eps_key);
    let mut header = vec!["Method".to_string(), "Clean acc".to_string()];
    if let Some(e) = &eps_col {
        header.push(format!("Adv acc (eps {e})"));
    }
    header.extend(cfg.eval.views.iter().map(|v| format!("Brier {}", v.name)));
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in reports {
        let mut row = vec![r.method.clone(), fmt_stat(r, "clean_accuracy", "")];
        if let Some(e) = &eps_col {
            row.push(fmt_stat(r, "adv_accuracy", e));
        }
        row.extend(cfg.eval.views.iter().map(|v| fmt_stat(r, "brier", &v.name)));
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    let failures: Vec<String> = reports
        .iter()
        .flat_map(|r| r.failures.iter().map(move |f| format!("- {} seed {}: {}", r.method, f.seed, f.error)))
        .collect();
    if !failures.is_empty() {
        out.push_str("\nFailed runs:\n\n");
        out.push_str(&failures.join("\n"));
        out.push('\n');
    }
    out
}

/// Exports the configured synthetic dataset (unsplit) as PGM files plus a
/// manifest.
pub fn make_data_command(cfg: &RunConfig, base: &Path) -> Result<PathBuf> {
    if !matches!(cfg.dataset, crate::config::DatasetConfig::Synthetic(_)) {
        return Err(Error::config("dataset", "make-data needs a synthetic dataset"));
    }
    let ds = cfg.dataset.load(base)?;
    let dir = cfg.output_dir.join("data");
    export_pgm(&ds, &dir)?;
    Ok(dir)
}
