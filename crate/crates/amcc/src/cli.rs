//! Experiment commands behind the `amcc` binary: consensus evaluation,
//! active-querying runs, crowd simulation, and the sparsity / batch-size
//! sweeps. Every command resolves its full specification up front, echoes it
//! into the output for provenance, and is byte-deterministic given the same
//! arguments.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::Deserialize;

use crate::active::{
    run_active_loop, seeded_partition, QueryLedger, SelectionStrategy,
};
use crate::consensus::{consensus_labels, consensus_scores, fit};
use crate::io::{
    load_annotations, load_features, load_truth, report_rows, save_crowd, write_report,
    ReportFormat, ReportPayload, ReportRow,
};
use crate::metrics::{majority_vote, one_error, ranking_loss, set_accuracy};
use crate::model::{AmccConfig, AnnotationTensor, Dataset};
use crate::sim::{derive_seed, CrowdSpec, SimulatedCrowd};
use crate::{AmccError, Result};

/// Multi-label crowd consensus experiments.
#[derive(Debug, Parser)]
#[command(name = "amcc", version, about = "Multi-label crowd consensus and active querying")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the consensus model and report accuracy against ground truth.
    Consensus(RunArgs),
    /// Run the active query loop and write the per-round ledger.
    Active(RunArgs),
    /// Generate a synthetic crowd and write it as a replayable snapshot.
    Simulate(RunArgs),
    /// Consensus accuracy across annotation-removal ratios {0,10,20,30,50}%.
    SparsitySweep(RunArgs),
    /// Active-loop accuracy across batch sizes {2,5,10,25} at a fixed budget.
    BatchSweep(RunArgs),
}

/// Flags shared by every command; irrelevant flags are ignored by commands
/// that do not use them.
#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// TOML file mirroring the configuration fields by name, with optional
    /// [simulation], [data], and [partition] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; all randomness derives from it deterministically.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Independent repetitions averaged in the report.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Query rounds for active runs.
    #[arg(long, default_value_t = 20)]
    pub rounds: usize,
    /// Triplets per round; overrides the config file's batch_size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Selection strategy: amcc, random-worker, random-pair, no-label-corr,
    /// mv-random, or greedy-reliable.
    #[arg(long, default_value = "amcc")]
    pub strategy: String,
    /// Drop workers with fewer than this many annotations at ingestion.
    #[arg(long, default_value_t = 1)]
    pub min_annotations: usize,
    /// Output path (a directory for `simulate`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report encoding: csv or json.
    #[arg(long, default_value = "csv")]
    pub format: String,
}

/// Optional overrides for the model configuration, mirrored by field name.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    num_groups: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    r: Option<f64>,
    mu: Option<f64>,
    eta: Option<f64>,
    knn_k: Option<usize>,
    max_inner_iters: Option<usize>,
    convergence_tol: Option<f64>,
    batch_size: Option<usize>,
    consensus_threshold: Option<f64>,
    prob_floor: Option<f64>,
    simulation: Option<CrowdSpec>,
    data: Option<DataPaths>,
    partition: Option<PartitionFractions>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataPaths {
    annotations: PathBuf,
    features: Option<PathBuf>,
    truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionFractions {
    labeled: f64,
    unlabeled: f64,
}

impl Default for PartitionFractions {
    fn default() -> Self {
        // Labeled / unlabeled / test split used by active runs.
        PartitionFractions {
            labeled: 0.05,
            unlabeled: 0.70,
        }
    }
}

/// Where the annotations come from.
enum DataSource {
    Simulation(CrowdSpec),
    Files(DataPaths),
}

/// A command specification with every parameter resolved.
pub struct ExperimentSpec {
    command: &'static str,
    args: RunArgs,
    file: FileConfig,
    source: DataSource,
    strategy: SelectionStrategy,
    format: ReportFormat,
    partition: PartitionFractions,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| AmccError::InvalidConfig(format!(
        "config file {}: {e}",
        path.display()
    )))
}

impl ExperimentSpec {
    pub fn resolve(command: &'static str, args: RunArgs) -> Result<Self> {
        let file = load_file_config(args.config.as_deref())?;
        let strategy: SelectionStrategy = args.strategy.parse()?;
        let format: ReportFormat = args.format.parse()?;
        if args.repeats == 0 {
            return Err(AmccError::InvalidConfig("repeats must be at least 1".into()));
        }
        let source = match (&file.data, &file.simulation) {
            (Some(data), None) => DataSource::Files(data.clone()),
            (Some(_), Some(_)) => {
                return Err(AmccError::InvalidConfig(
                    "config sets both [data] and [simulation]; pick one".into(),
                ))
            }
            (None, Some(sim)) => DataSource::Simulation(sim.clone()),
            (None, None) => DataSource::Simulation(CrowdSpec::default()),
        };
        let partition = file.partition.unwrap_or_default();
        Ok(ExperimentSpec {
            command,
            args,
            file,
            source,
            strategy,
            format,
            partition,
        })
    }

    /// Build the model configuration for a known problem size, applying the
    /// file overrides. `beta` resolves before `mu` so an explicit `mu` wins.
    fn config_for(&self, num_labels: usize, num_workers: usize) -> AmccConfig<f64> {
        let f = &self.file;
        let mut cfg = AmccConfig::<f64>::new(num_labels, num_workers);
        if let Some(m) = f.num_groups {
            cfg = cfg.with_groups(m);
        }
        if let Some(v) = f.alpha {
            cfg = cfg.with_alpha(v);
        }
        if let Some(v) = f.beta {
            cfg = cfg.with_beta(v);
        }
        if let Some(v) = f.r {
            cfg = cfg.with_r(v);
        }
        if let Some(v) = f.mu {
            cfg = cfg.with_mu(v);
        }
        if let Some(v) = f.eta {
            cfg = cfg.with_eta(v);
        }
        if let Some(v) = f.knn_k {
            cfg = cfg.with_knn_k(v);
        }
        if let Some(v) = f.max_inner_iters {
            cfg = cfg.with_max_inner_iters(v);
        }
        if let Some(v) = f.convergence_tol {
            cfg = cfg.with_convergence_tol(v);
        }
        if let Some(v) = f.batch_size {
            cfg = cfg.with_batch_size(v);
        }
        if let Some(v) = f.consensus_threshold {
            cfg = cfg.with_consensus_threshold(v);
        }
        if let Some(v) = f.prob_floor {
            cfg.prob_floor = v;
        }
        if let Some(b) = self.args.batch {
            cfg = cfg.with_batch_size(b);
        }
        cfg
    }

    /// Every resolved parameter as sorted key=value pairs for the report.
    fn provenance(&self, cfg: &AmccConfig<f64>) -> BTreeMap<String, String> {
        let mut p = BTreeMap::new();
        p.insert("command".into(), self.command.to_string());
        p.insert("seed".into(), self.args.seed.to_string());
        p.insert("repeats".into(), self.args.repeats.to_string());
        p.insert("rounds".into(), self.args.rounds.to_string());
        p.insert("strategy".into(), self.strategy.to_string());
        p.insert("min_annotations".into(), self.args.min_annotations.to_string());
        p.insert(
            "source".into(),
            match &self.source {
                DataSource::Simulation(_) => "simulation".into(),
                DataSource::Files(d) => format!("files:{}", d.annotations.display()),
            },
        );
        if let DataSource::Simulation(sim) = &self.source {
            p.insert("sim_num_samples".into(), sim.num_samples.to_string());
            p.insert("sim_num_labels".into(), sim.num_labels.to_string());
            p.insert("sim_num_workers".into(), sim.num_workers().to_string());
            p.insert("sim_cardinality".into(), sim.cardinality.to_string());
            p.insert(
                "sim_correlation_strength".into(),
                sim.correlation_strength.to_string(),
            );
            p.insert("sim_annotation_rate".into(), sim.annotation_rate.to_string());
            p.insert("sim_negative_rate".into(), sim.negative_rate.to_string());
        }
        p.insert("num_labels".into(), cfg.num_labels.to_string());
        p.insert("num_workers".into(), cfg.num_workers.to_string());
        p.insert("num_groups".into(), cfg.num_groups.to_string());
        p.insert("alpha".into(), cfg.alpha.to_string());
        p.insert("beta".into(), cfg.beta.to_string());
        p.insert("r".into(), cfg.r.to_string());
        p.insert("mu".into(), cfg.mu.to_string());
        p.insert("eta".into(), cfg.eta.to_string());
        p.insert("knn_k".into(), cfg.knn_k.to_string());
        p.insert("max_inner_iters".into(), cfg.max_inner_iters.to_string());
        p.insert("convergence_tol".into(), cfg.convergence_tol.to_string());
        p.insert("batch_size".into(), cfg.batch_size.to_string());
        p.insert(
            "consensus_threshold".into(),
            cfg.consensus_threshold.to_string(),
        );
        p.insert("prob_floor".into(), cfg.prob_floor.to_string());
        p.insert(
            "partition".into(),
            format!("{}/{}", self.partition.labeled, self.partition.unlabeled),
        );
        p
    }

    fn out_path(&self, default_stem: &str) -> PathBuf {
        self.args.out.clone().unwrap_or_else(|| {
            PathBuf::from(format!("{default_stem}.{}", self.format))
        })
    }
}

/// Sample mean and (sample) standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn fmt_mean_std(values: &[f64]) -> String {
    let (mean, std) = mean_std(values);
    format!("{mean:.6} ± {std:.6}")
}

/// Metrics of one prediction set against truth; ranking metrics are `None`
/// when undefined on the data.
struct MetricTriple {
    accuracy: f64,
    one_minus_rl: Option<f64>,
    one_minus_oe: Option<f64>,
}

fn metric_triple(
    predicted: &[BTreeSet<usize>],
    scores: &Array2<f64>,
    truth: &[BTreeSet<usize>],
) -> Result<MetricTriple> {
    let accuracy = set_accuracy(predicted, truth)?;
    let one_minus_rl = match ranking_loss(scores.view(), truth) {
        Ok(rl) => Some(1.0 - rl),
        Err(AmccError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let one_minus_oe = match one_error(scores.view(), truth) {
        Ok(oe) => Some(1.0 - oe),
        Err(AmccError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricTriple {
        accuracy,
        one_minus_rl,
        one_minus_oe,
    })
}

/// One evaluation-ready problem instance: tensor plus truth.
struct Instance {
    tensor: AnnotationTensor,
    dataset: Dataset<f64>,
}

/// Materialize the problem for repeat `i`: simulated crowds are regenerated
/// per repeat, file-backed data is fixed (only the fit seed varies).
fn instance_for(spec: &ExperimentSpec, repeat: u64) -> Result<Instance> {
    match &spec.source {
        DataSource::Simulation(sim) => {
            let crowd =
                SimulatedCrowd::<f64>::from_spec(sim, derive_seed(spec.args.seed, "crowd", repeat))?;
            Ok(Instance {
                tensor: crowd.tensor.clone(),
                dataset: crowd.dataset.clone(),
            })
        }
        DataSource::Files(paths) => {
            let loaded = load_annotations(&paths.annotations, spec.args.min_annotations)?;
            let mut dataset =
                Dataset::<f64>::new(loaded.tensor.num_samples(), loaded.tensor.num_labels())?;
            if let Some(features) = &paths.features {
                dataset =
                    dataset.with_features(load_features::<f64>(features, &loaded.ids.samples)?)?;
            }
            if let Some(truth) = &paths.truth {
                dataset = dataset
                    .with_true_labels(load_truth(truth, &loaded.ids.samples, &loaded.ids.labels)?)?;
            }
            Ok(Instance {
                tensor: loaded.tensor,
                dataset,
            })
        }
    }
}

fn require_truth(dataset: &Dataset<f64>) -> Result<&Vec<BTreeSet<usize>>> {
    dataset.true_labels.as_ref().ok_or_else(|| {
        AmccError::Precondition(
            "evaluation needs ground truth: provide [data].truth or use simulation".into(),
        )
    })
}

/// Consensus predictions for every sample.
fn predict_all(
    tensor: &AnnotationTensor,
    model: &crate::model::ConsensusModel<f64>,
    cfg: &AmccConfig<f64>,
) -> Result<(Vec<BTreeSet<usize>>, Array2<f64>)> {
    let n = tensor.num_samples();
    let l = tensor.num_labels();
    let mut predicted = Vec::with_capacity(n);
    let mut scores = Array2::<f64>::zeros((n, l));
    for i in 0..n {
        predicted.push(consensus_labels(tensor, model, cfg, i)?);
        let s = consensus_scores(tensor, model, cfg, i)?;
        for lab in 0..l {
            scores[[i, lab]] = s.scores[lab];
        }
    }
    Ok((predicted, scores))
}

/// Fit on one instance and measure both the model and majority vote.
fn eval_once(
    instance: &Instance,
    cfg: &AmccConfig<f64>,
    fit_seed: u64,
) -> Result<(MetricTriple, MetricTriple)> {
    let truth = require_truth(&instance.dataset)?;
    let outcome = fit(&instance.tensor, cfg, fit_seed)?;
    let (predicted, scores) = predict_all(&instance.tensor, &outcome.model, cfg)?;
    let ours = metric_triple(&predicted, &scores, truth)?;
    let (mv_pred, mv_scores) = majority_vote::<f64>(&instance.tensor);
    let mv = metric_triple(&mv_pred, &mv_scores, truth)?;
    Ok((ours, mv))
}

fn push_stats(
    provenance: &mut BTreeMap<String, String>,
    prefix: &str,
    triples: &[MetricTriple],
) {
    let acc: Vec<f64> = triples.iter().map(|t| t.accuracy).collect();
    provenance.insert(format!("{prefix}_accuracy"), fmt_mean_std(&acc));
    let rl: Vec<f64> = triples.iter().filter_map(|t| t.one_minus_rl).collect();
    if !rl.is_empty() {
        provenance.insert(format!("{prefix}_one_minus_rl"), fmt_mean_std(&rl));
    }
    let oe: Vec<f64> = triples.iter().filter_map(|t| t.one_minus_oe).collect();
    if !oe.is_empty() {
        provenance.insert(format!("{prefix}_one_minus_oe"), fmt_mean_std(&oe));
    }
}

/// Fit + evaluate over `repeats` seeds; one row per repeat, mean ± std for
/// the model and the majority-vote baseline in the provenance block.
pub fn cmd_consensus(spec: &ExperimentSpec) -> Result<PathBuf> {
    let mut rows: Vec<ReportRow<f64>> = Vec::new();
    let mut ours_all = Vec::new();
    let mut mv_all = Vec::new();
    let mut cfg_echo: Option<AmccConfig<f64>> = None;
    for i in 0..spec.args.repeats {
        let instance = instance_for(spec, i as u64)?;
        let cfg = spec.config_for(instance.tensor.num_labels(), instance.tensor.num_workers());
        let (ours, mv) = eval_once(&instance, &cfg, derive_seed(spec.args.seed, "fit", i as u64))?;
        rows.push(ReportRow {
            round: i,
            queries: 0,
            cumulative_cost: 0.0,
            accuracy: Some(ours.accuracy),
            one_minus_rl: ours.one_minus_rl,
            one_minus_oe: ours.one_minus_oe,
        });
        ours_all.push(ours);
        mv_all.push(mv);
        cfg_echo.get_or_insert(cfg);
    }
    let cfg = cfg_echo.expect("at least one repeat");
    let mut provenance = spec.provenance(&cfg);
    push_stats(&mut provenance, "amcc", &ours_all);
    push_stats(&mut provenance, "mv", &mv_all);
    let path = spec.out_path("consensus-report");
    write_rows(&rows, &provenance, &path, spec.format)?;
    Ok(path)
}

fn write_rows(
    rows: &[ReportRow<f64>],
    provenance: &BTreeMap<String, String>,
    path: &Path,
    format: ReportFormat,
) -> Result<()> {
    crate::io::write_report_rows(rows, provenance, path, format)
}

/// Partitioned dataset and ledger for one active repeat.
fn active_once(
    spec: &ExperimentSpec,
    cfg: &AmccConfig<f64>,
    repeat: u64,
) -> Result<QueryLedger<f64>> {
    let DataSource::Simulation(sim) = &spec.source else {
        return Err(AmccError::Precondition(
            "the active command queries a simulated oracle; configure [simulation]".into(),
        ));
    };
    let crowd =
        SimulatedCrowd::<f64>::from_spec(sim, derive_seed(spec.args.seed, "crowd", repeat))?;
    let parts = seeded_partition(
        crowd.dataset.num_samples,
        spec.partition.labeled,
        spec.partition.unlabeled,
        derive_seed(spec.args.seed, "partition", repeat),
    )?;
    let dataset = crowd.dataset.clone().with_partition(parts)?;
    run_active_loop(
        &dataset,
        &crowd.tensor,
        &crowd,
        cfg,
        spec.strategy,
        spec.args.rounds,
        derive_seed(spec.args.seed, "loop", repeat),
    )
}

/// Mean per-round rows across several ledgers (aligned by round index, up to
/// the shortest run).
fn mean_ledger_rows(ledgers: &[QueryLedger<f64>]) -> Vec<ReportRow<f64>> {
    let per_run: Vec<Vec<ReportRow<f64>>> = ledgers
        .iter()
        .map(|l| report_rows(ReportPayload::Ledger(l)))
        .collect();
    let len = per_run.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|r| {
            let at: Vec<&ReportRow<f64>> = per_run.iter().map(|rows| &rows[r]).collect();
            let mean_of = |f: &dyn Fn(&ReportRow<f64>) -> Option<f64>| {
                let vals: Vec<f64> = at.iter().filter_map(|row| f(row)).collect();
                (vals.len() == at.len()).then(|| mean_std(&vals).0)
            };
            ReportRow {
                round: at[0].round,
                queries: at.iter().map(|row| row.queries).sum::<usize>() / at.len(),
                cumulative_cost: at.iter().map(|row| row.cumulative_cost).sum::<f64>()
                    / at.len() as f64,
                accuracy: mean_of(&|row| row.accuracy),
                one_minus_rl: mean_of(&|row| row.one_minus_rl),
                one_minus_oe: mean_of(&|row| row.one_minus_oe),
            }
        })
        .collect()
}

/// Run the active loop `repeats` times; per-round means in the rows, final
/// accuracy and cost summaries in the provenance block.
pub fn cmd_active(spec: &ExperimentSpec) -> Result<PathBuf> {
    let DataSource::Simulation(sim) = &spec.source else {
        return Err(AmccError::Precondition(
            "the active command queries a simulated oracle; configure [simulation]".into(),
        ));
    };
    let cfg = spec.config_for(sim.num_labels, sim.num_workers());
    let mut ledgers = Vec::with_capacity(spec.args.repeats);
    for i in 0..spec.args.repeats {
        let ledger = active_once(spec, &cfg, i as u64)?;
        if let Some(detail) = &ledger.aborted {
            // Persist what we have, then surface the failure.
            let path = spec.out_path("active-ledger");
            let provenance = spec.provenance(&cfg);
            write_report(
                ReportPayload::Ledger(&ledger),
                &provenance,
                &path,
                spec.format,
            )?;
            return Err(AmccError::Precondition(format!(
                "active loop aborted ({detail}); partial ledger written to {}",
                path.display()
            )));
        }
        ledgers.push(ledger);
    }
    let mut provenance = spec.provenance(&cfg);
    let finals: Vec<f64> = ledgers
        .iter()
        .filter_map(|l| l.rounds.last().and_then(|r| r.snapshot.as_ref()))
        .map(|s| s.accuracy)
        .collect();
    provenance.insert("final_accuracy".into(), fmt_mean_std(&finals));
    let costs: Vec<f64> = ledgers
        .iter()
        .filter_map(|l| l.rounds.last().map(|r| r.cumulative_cost))
        .collect();
    provenance.insert("final_cost".into(), fmt_mean_std(&costs));
    let rows = mean_ledger_rows(&ledgers);
    let path = spec.out_path("active-ledger");
    write_rows(&rows, &provenance, &path, spec.format)?;
    Ok(path)
}

/// Generate a crowd and write a replayable snapshot directory.
pub fn cmd_simulate(spec: &ExperimentSpec) -> Result<PathBuf> {
    let DataSource::Simulation(sim) = &spec.source else {
        return Err(AmccError::Precondition(
            "simulate requires [simulation] parameters, not [data]".into(),
        ));
    };
    let crowd =
        SimulatedCrowd::<f64>::from_spec(sim, derive_seed(spec.args.seed, "crowd", 0))?;
    let dir = spec
        .args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("amcc-crowd"));
    save_crowd(&crowd, &dir)?;
    let cfg = spec.config_for(sim.num_labels, sim.num_workers());
    let provenance = spec.provenance(&cfg);
    let mut body = serde_json::to_string_pretty(&provenance)
        .map_err(|e| AmccError::numerical("provenance serialization", e.to_string()))?;
    body.push('\n');
    fs::write(dir.join("spec.json"), body)?;
    Ok(dir)
}

const SPARSITY_RATIOS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.5];

/// Consensus accuracy after removing {0,10,20,30,50}% of annotations; the
/// crowd and fit seeds match `cmd_consensus`, so the 0% row reproduces it.
pub fn cmd_sparsity_sweep(spec: &ExperimentSpec) -> Result<PathBuf> {
    let DataSource::Simulation(_) = &spec.source else {
        return Err(AmccError::Precondition(
            "sparsity-sweep removes annotations from a simulated crowd; configure [simulation]"
                .into(),
        ));
    };
    let mut rows = Vec::new();
    let mut provenance_stats: Vec<(String, Vec<MetricTriple>, Vec<MetricTriple>)> = Vec::new();
    let mut cfg_echo: Option<AmccConfig<f64>> = None;
    for (j, &ratio) in SPARSITY_RATIOS.iter().enumerate() {
        let mut ours_all = Vec::new();
        let mut mv_all = Vec::new();
        for i in 0..spec.args.repeats {
            let mut instance = instance_for(spec, i as u64)?;
            if ratio > 0.0 {
                instance.tensor = crate::sim::sparsify(
                    &instance.tensor,
                    ratio,
                    derive_seed(spec.args.seed, "sparsify", (j as u64) << 32 | i as u64),
                )?;
            }
            let cfg =
                spec.config_for(instance.tensor.num_labels(), instance.tensor.num_workers());
            let (ours, mv) =
                eval_once(&instance, &cfg, derive_seed(spec.args.seed, "fit", i as u64))?;
            ours_all.push(ours);
            mv_all.push(mv);
            cfg_echo.get_or_insert(cfg);
        }
        let pct = (ratio * 100.0).round() as usize;
        rows.push(ReportRow {
            round: pct,
            queries: 0,
            cumulative_cost: 0.0,
            accuracy: Some(mean_std(&ours_all.iter().map(|t| t.accuracy).collect::<Vec<_>>()).0),
            one_minus_rl: mean_over(&ours_all, |t| t.one_minus_rl),
            one_minus_oe: mean_over(&ours_all, |t| t.one_minus_oe),
        });
        provenance_stats.push((format!("r{pct:02}"), ours_all, mv_all));
    }
    let cfg = cfg_echo.expect("at least one ratio evaluated");
    let mut provenance = spec.provenance(&cfg);
    for (prefix, ours, mv) in &provenance_stats {
        push_stats(&mut provenance, &format!("{prefix}_amcc"), ours);
        push_stats(&mut provenance, &format!("{prefix}_mv"), mv);
    }
    let path = spec.out_path("sparsity-report");
    write_rows(&rows, &provenance, &path, spec.format)?;
    Ok(path)
}

fn mean_over(triples: &[MetricTriple], f: impl Fn(&MetricTriple) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = triples.iter().filter_map(&f).collect();
    (vals.len() == triples.len()).then(|| mean_std(&vals).0)
}

const BATCH_SIZES: [usize; 4] = [2, 5, 10, 25];

/// Active runs across batch sizes at an equal total query budget
/// (rounds × batch from the flags); one curve per size, concatenated in the
/// rows with each curve restarting at round 0.
pub fn cmd_batch_sweep(spec: &ExperimentSpec) -> Result<PathBuf> {
    let DataSource::Simulation(sim) = &spec.source else {
        return Err(AmccError::Precondition(
            "batch-sweep queries a simulated oracle; configure [simulation]".into(),
        ));
    };
    let base_cfg = spec.config_for(sim.num_labels, sim.num_workers());
    let budget = spec.args.rounds * base_cfg.batch_size;
    if let Some(size) = BATCH_SIZES.iter().find(|&&s| !budget.is_multiple_of(s)) {
        return Err(AmccError::InvalidConfig(format!(
            "total budget rounds × batch = {budget} is not divisible by batch size {size}; \
             the equal-budget comparison needs identical totals across sizes {:?}",
            BATCH_SIZES
        )));
    }
    let mut rows = Vec::new();
    let mut provenance = spec.provenance(&base_cfg);
    provenance.insert("budget".into(), budget.to_string());
    provenance.insert(
        "sizes".into(),
        BATCH_SIZES.map(|s| s.to_string()).join(","),
    );
    for size in BATCH_SIZES {
        let rounds = budget / size;
        let cfg = base_cfg.clone().with_batch_size(size);
        let mut ledgers = Vec::with_capacity(spec.args.repeats);
        for i in 0..spec.args.repeats {
            let sub = ExperimentSpec {
                command: spec.command,
                args: RunArgs {
                    rounds,
                    ..spec.args.clone()
                },
                file: spec.file.clone(),
                source: DataSource::Simulation(sim.clone()),
                strategy: spec.strategy,
                format: spec.format,
                partition: spec.partition,
            };
            let ledger = active_once(&sub, &cfg, i as u64)?;
            if let Some(detail) = &ledger.aborted {
                return Err(AmccError::Precondition(format!(
                    "batch-sweep run aborted at size {size}: {detail}"
                )));
            }
            ledgers.push(ledger);
        }
        let finals: Vec<f64> = ledgers
            .iter()
            .filter_map(|l| l.rounds.last().and_then(|r| r.snapshot.as_ref()))
            .map(|s| s.accuracy)
            .collect();
        provenance.insert(format!("batch_{size:02}_final_accuracy"), fmt_mean_std(&finals));
        provenance.insert(format!("batch_{size:02}_rounds"), rounds.to_string());
        rows.extend(mean_ledger_rows(&ledgers));
    }
    let path = spec.out_path("batch-report");
    write_rows(&rows, &provenance, &path, spec.format)?;
    Ok(path)
}

/// Dispatch a parsed command line; returns the path written.
pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Consensus(args) => cmd_consensus(&ExperimentSpec::resolve("consensus", args)?),
        Command::Active(args) => cmd_active(&ExperimentSpec::resolve("active", args)?),
        Command::Simulate(args) => cmd_simulate(&ExperimentSpec::resolve("simulate", args)?),
        Command::SparsitySweep(args) => {
            cmd_sparsity_sweep(&ExperimentSpec::resolve("sparsity-sweep", args)?)
        }
        Command::BatchSweep(args) => {
            cmd_batch_sweep(&ExperimentSpec::resolve("batch-sweep", args)?)
        }
    }
}
