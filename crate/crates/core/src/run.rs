//! Run orchestration and persistence.
//!
//! Every run directory is self-describing: a copy of the effective config,
//! the seed, parameter and iteration traces, metrics, checkpoints, and the
//! final result. Re-evaluation needs nothing beyond the directory and
//! optional overrides.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::asng::{self, AsngState, IterRecord};
use crate::baseline::{self, BaselineVariant};
use crate::categorical::{DistributionParams, ThetaFloor};
use crate::config::{resolve_source, EvaluatorKind, RunConfig};
use crate::error::{Error, Result};
use crate::latency::{
    parse_device_powers, penalty_ms, LatencyEval, LatencyMode, LatencyModel, LatencyTable,
    LinkModel,
};
use crate::objective::{self, EvalCtx, Evaluator, ObjectiveBreakdown, TabularEvaluator, TabularSpec};
use crate::oracle::{self, OracleReport};
use crate::rng;
use crate::space::{self, ArchSample, SearchSpaceSpec};
use crate::supernet::{self, SupernetEvaluator, ToySupernet, ToyTask};

pub const CONFIG_FILE: &str = "config.json";
pub const RESULT_FILE: &str = "result.json";
pub const THETA_TRACE_FILE: &str = "theta_trace.csv";
pub const ITER_TRACE_FILE: &str = "iter_trace.csv";
pub const PRETRAIN_METRICS_FILE: &str = "pretrain_metrics.csv";
pub const RETRAIN_METRICS_FILE: &str = "retrain_metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const ORACLE_REPORT_FILE: &str = "oracle_report.csv";
pub const METRICS_FILE: &str = "metrics.csv";

/// Versioned weight checkpoint written by supernet-mode runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub net: ToySupernet,
}

impl Checkpoint {
    pub const CURRENT_VERSION: u32 = 1;

    fn wrap(net: &ToySupernet) -> Checkpoint {
        Checkpoint {
            format_version: Self::CURRENT_VERSION,
            net: net.clone(),
        }
    }

    fn load(path: &std::path::Path) -> Result<ToySupernet> {
        let checkpoint: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if checkpoint.format_version != Self::CURRENT_VERSION {
            return Err(Error::MissingArtifact(format!(
                "checkpoint format {} unsupported (expected {})",
                checkpoint.format_version,
                Self::CURRENT_VERSION
            )));
        }
        Ok(checkpoint.net)
    }
}

/// Loss/accuracy of the final model at one drop rate. Accuracy is absent
/// for tabular surrogates, which model loss only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateAccuracy {
    pub rate: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub block_ids: Vec<String>,
    pub choice_indices: Vec<usize>,
    pub split_position: usize,
    pub mid_block_split: bool,
    /// Canonical mixed-radix id, as a decimal string (can exceed u64).
    pub sample_id: String,
    pub objective: ObjectiveBreakdown,
    pub accuracy_per_rate: Vec<RateAccuracy>,
    pub wall_clock_ms: f64,
}

/// Space plus latency model assembled from a validated config.
pub struct Assembled {
    pub space: SearchSpaceSpec,
    pub latency_model: LatencyModel,
}

pub fn assemble(config: &RunConfig) -> Result<Assembled> {
    config.validate()?;
    let space = SearchSpaceSpec::from_json(&resolve_source(&config.space)?)?;

    let table = match &config.latency.table {
        Some(source) => Some(LatencyTable::parse(source, &resolve_source(source)?)?),
        None => None,
    };
    let powers = match &config.latency.device_power {
        Some(source) => parse_device_powers(source, &resolve_source(source)?)?,
        None => Default::default(),
    };
    let link = LinkModel {
        throughput_bps: config.latency.link.throughput_mbps * 1e6,
        bits_per_element: config.latency.link.bits_per_element,
        loss_prob: config.latency.link.loss_prob,
    };
    let latency_model = LatencyModel::new(
        config.mode,
        table,
        powers,
        link,
        config.latency.head_device.clone(),
        config.latency.tail_device.clone(),
    )?;
    if config.mode == LatencyMode::Tabular {
        let table = latency_model.table.as_ref().unwrap();
        for device in [&config.latency.head_device, &config.latency.tail_device] {
            table.validate_against(&space, device)?;
            if !table.has_fixed_rows(device) {
                eprintln!(
                    "warning: latency table has no fixed prefix/suffix rows for '{device}'; \
                     fixed stages cost 0 ms"
                );
            }
        }
    }
    Ok(Assembled {
        space,
        latency_model,
    })
}

fn build_tabular_evaluator(config: &RunConfig, space: &SearchSpaceSpec) -> Result<TabularEvaluator> {
    let section = config.tabular.as_ref().expect("validated");
    let spec = TabularSpec::from_json(&resolve_source(&section.scores)?)?;
    TabularEvaluator::new(space.clone(), spec)
}

struct TraceWriters {
    theta: std::io::BufWriter<fs::File>,
    iter: std::io::BufWriter<fs::File>,
    trace_every: u64,
}

impl TraceWriters {
    fn create(dir: &Path, trace_every: u64) -> Result<TraceWriters> {
        let mut theta = std::io::BufWriter::new(fs::File::create(dir.join(THETA_TRACE_FILE))?);
        writeln!(theta, "iteration,dim,category,value")?;
        let mut iter = std::io::BufWriter::new(fs::File::create(dir.join(ITER_TRACE_FILE))?);
        writeln!(
            iter,
            "t,objective_a,objective_b,utility_a,utility_b,eps_theta,delta,gamma,s_norm_sq,argmax_id"
        )?;
        Ok(TraceWriters {
            theta,
            iter,
            trace_every,
        })
    }

    fn record(&mut self, params: &DistributionParams, record: &IterRecord) -> Result<()> {
        if record.t % self.trace_every == 0 {
            for (d, row) in params.theta().iter().enumerate() {
                for (k, value) in row.iter().enumerate() {
                    writeln!(self.theta, "{},{},{},{}", record.t, d, k, value)?;
                }
            }
        }
        writeln!(
            self.iter,
            "{},{},{},{},{},{},{},{},{},{}",
            record.t,
            record.objectives[0],
            record.objectives[1],
            record.utilities[0],
            record.utilities[1],
            record.eps_theta,
            record.delta,
            record.gamma,
            record.s_norm_sq,
            record.most_likely_id
        )?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.theta.flush()?;
        self.iter.flush()?;
        Ok(())
    }
}

fn write_epoch_metrics(path: &Path, metrics: &[supernet::EpochMetrics]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{}\n",
            m.epoch, m.train_loss, m.val_loss, m.val_accuracy
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn update_iterations(config: &RunConfig, batches_per_epoch: u64) -> u64 {
    match (config.asng.update_iterations, config.asng.update_epochs) {
        (Some(iters), _) => iters,
        (None, Some(epochs)) => epochs * batches_per_epoch.max(1),
        (None, None) => 0, // unreachable after validation
    }
}

fn theta_floor(config: &RunConfig, dims: &[usize]) -> ThetaFloor {
    match config.asng.theta_min {
        Some(value) => ThetaFloor::fixed(value, dims.len()),
        None => ThetaFloor::default_for(dims),
    }
}

/// Final-model evaluation at every configured drop rate, plus the
/// dropout-averaged loss. The same convention is used when a run is written
/// and when it is re-evaluated, so stored results reproduce exactly.
fn final_rate_metrics(
    config: &RunConfig,
    sample: &ArchSample,
    evaluator_kind: EvaluatorKind,
    tabular: Option<&TabularEvaluator>,
    net: Option<(&ToySupernet, &ToyTask)>,
    rates: &[f64],
) -> Result<Vec<RateAccuracy>> {
    let seed = rng::derive_seed(config.seed, "final-eval", 0);
    let mut out = Vec::with_capacity(rates.len());
    for &rate in rates {
        match evaluator_kind {
            EvaluatorKind::Tabular => {
                let evaluator = tabular.expect("tabular evaluator present");
                let loss =
                    evaluator.eval_loss(sample, rate, &EvalCtx { batch: 0, seed })?;
                out.push(RateAccuracy {
                    rate,
                    loss,
                    accuracy: None,
                });
            }
            EvaluatorKind::Supernet => {
                let (net, task) = net.expect("supernet present");
                let (loss, accuracy) = supernet::evaluate(
                    net,
                    sample,
                    rate,
                    &task.val,
                    config.train.eval_mask_draws,
                    seed,
                    &config.train,
                )?;
                out.push(RateAccuracy {
                    rate,
                    loss,
                    accuracy: Some(accuracy),
                });
            }
        }
    }
    Ok(out)
}

fn result_for_sample(
    config: &RunConfig,
    assembled: &Assembled,
    method: &str,
    sample: &ArchSample,
    rate_metrics: Vec<RateAccuracy>,
    wall_clock_ms: f64,
) -> Result<RunResult> {
    let decoded = space::decode(sample, &assembled.space)?;
    let latency = assembled.latency_model.end_to_end(sample, &assembled.space)?;
    let loss =
        rate_metrics.iter().map(|m| m.loss).sum::<f64>() / rate_metrics.len().max(1) as f64;
    let penalty = penalty_ms(latency.total_ms, config.objective.t_th_ms);
    let block_ids: Vec<String> = sample
        .layer_choices()
        .iter()
        .enumerate()
        .map(|(l, &c)| assembled.space.layers[l].candidates[c].clone())
        .collect();
    Ok(RunResult {
        method: method.to_string(),
        seed: config.seed,
        config_hash: config.hash(),
        block_ids,
        choice_indices: sample.layer_choices().to_vec(),
        split_position: assembled.space.split_candidates[sample.split_index()],
        mid_block_split: decoded.split.mid_block,
        sample_id: space::sample_id(sample, &assembled.space).to_string(),
        objective: ObjectiveBreakdown {
            loss,
            latency,
            penalty_ms: penalty,
            combined: config.objective.eps_loss * loss + config.objective.eps_lat * penalty,
        },
        accuracy_per_rate: rate_metrics,
        wall_clock_ms,
    })
}

fn persist_result(dir: &Path, config: &RunConfig, result: &RunResult) -> Result<()> {
    fs::write(
        dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(config)?,
    )?;
    fs::write(
        dir.join(RESULT_FILE),
        serde_json::to_string_pretty(result)?,
    )?;
    Ok(())
}

/// The joint search: optional weight pre-training, the distribution update
/// over architecture and split dimensions, optional re-training of the most
/// likely sample, and persistence of every artifact.
pub fn run_search(config: &RunConfig, out_dir: &Path) -> Result<RunResult> {
    let started = Instant::now();
    let assembled = assemble(config)?;
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(config)?,
    )?;

    let dims = assembled.space.categorical_dims();
    let floor = theta_floor(config, &dims);
    floor.validate(&dims)?;
    let asng_config = config.asng.to_asng_config();
    let mut state = AsngState::new(&dims, &asng_config);
    let mut writers = TraceWriters::create(out_dir, config.asng.trace_every)?;
    let mut update_rng = rng::stream(config.seed, "distribution-update", 0);
    let seed = config.seed;

    let (final_theta, tabular_eval, trained) = match config.evaluator {
        EvaluatorKind::Tabular => {
            let evaluator = build_tabular_evaluator(config, &assembled.space)?;
            let iterations = update_iterations(config, 1);
            let theta = {
                let objective_fn = |t: u64, sample: &ArchSample| -> Result<f64> {
                    let ctx = EvalCtx {
                        batch: t,
                        seed: rng::derive_seed(seed, "update-ctx", t),
                    };
                    Ok(objective::objective(
                        &evaluator,
                        sample,
                        &assembled.latency_model,
                        &assembled.space,
                        &config.objective,
                        &ctx,
                    )?
                    .combined)
                };
                asng::run_distribution_update(
                    DistributionParams::uniform(&dims),
                    &mut state,
                    &floor,
                    iterations,
                    &mut update_rng,
                    objective_fn,
                    |s| space::sample_id(s, &assembled.space),
                    |params, record| writers.record(params, record),
                )?
            };
            (theta, Some(evaluator), None)
        }
        EvaluatorKind::Supernet => {
            let dataset_cfg = config.dataset.as_ref().expect("validated");
            let task = supernet::generate_task(dataset_cfg, config.seed)?;
            let mut net = ToySupernet::new(
                &assembled.space,
                dataset_cfg.input_dim,
                dataset_cfg.classes,
                config.seed,
            )?;
            let pretrain_metrics = supernet::pretrain(
                &mut net,
                &task,
                &config.train,
                config.objective.eps_loss,
                config.objective.train_dropout_rate,
                rng::derive_seed(config.seed, "pretrain", 0),
            )?;
            write_epoch_metrics(&out_dir.join(PRETRAIN_METRICS_FILE), &pretrain_metrics)?;

            let evaluator = SupernetEvaluator::new(
                net.clone(),
                task.val.clone(),
                config.train.batch_size,
                config.train.inverted_rescale,
            );
            let iterations = update_iterations(config, evaluator.num_batches());
            let theta = {
                let objective_fn = |t: u64, sample: &ArchSample| -> Result<f64> {
                    let ctx = EvalCtx {
                        batch: t,
                        seed: rng::derive_seed(seed, "update-ctx", t),
                    };
                    Ok(objective::objective(
                        &evaluator,
                        sample,
                        &assembled.latency_model,
                        &assembled.space,
                        &config.objective,
                        &ctx,
                    )?
                    .combined)
                };
                asng::run_distribution_update(
                    DistributionParams::uniform(&dims),
                    &mut state,
                    &floor,
                    iterations,
                    &mut update_rng,
                    objective_fn,
                    |s| space::sample_id(s, &assembled.space),
                    |params, record| writers.record(params, record),
                )?
            };
            (theta, None, Some(task))
        }
    };
    writers.finish()?;

    let best = final_theta.most_likely();
    let rate_metrics = match config.evaluator {
        EvaluatorKind::Tabular => final_rate_metrics(
            config,
            &best,
            EvaluatorKind::Tabular,
            tabular_eval.as_ref(),
            None,
            &config.objective.dropout_rates,
        )?,
        EvaluatorKind::Supernet => {
            let task = trained.as_ref().expect("task present");
            let dataset_cfg = config.dataset.as_ref().unwrap();
            // Re-train the chosen sub-network from scratch with the
            // split-boundary mask at the training rate.
            let mut fresh = ToySupernet::new(
                &assembled.space,
                dataset_cfg.input_dim,
                dataset_cfg.classes,
                rng::derive_seed(config.seed, "retrain-init", 0),
            )?;
            let retrain_metrics = supernet::train_subnetwork(
                &mut fresh,
                &best,
                task,
                &config.train,
                config.train.retrain_epochs,
                config.objective.train_dropout_rate,
                rng::derive_seed(config.seed, "retrain", 0),
            )?;
            write_epoch_metrics(&out_dir.join(RETRAIN_METRICS_FILE), &retrain_metrics)?;
            fs::write(
                out_dir.join(CHECKPOINT_FILE),
                serde_json::to_string(&Checkpoint::wrap(&fresh))?,
            )?;
            final_rate_metrics(
                config,
                &best,
                EvaluatorKind::Supernet,
                None,
                Some((&fresh, task)),
                &config.objective.dropout_rates,
            )?
        }
    };

    let result = result_for_sample(
        config,
        &assembled,
        "nasc",
        &best,
        rate_metrics,
        started.elapsed().as_secs_f64() * 1e3,
    )?;
    persist_result(out_dir, config, &result)?;
    Ok(result)
}

/// The comparison protocol: architecture-only search on the head device's
/// compute (no communication term), exhaustive split selection under the
/// full objective, then re-training with or without the split mask.
pub fn run_baseline(
    config: &RunConfig,
    variant: BaselineVariant,
    out_dir: &Path,
) -> Result<RunResult> {
    let started = Instant::now();
    let assembled = assemble(config)?;
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(config)?,
    )?;

    let mut writers = TraceWriters::create(out_dir, config.asng.trace_every)?;
    let mut update_rng = rng::stream(config.seed, "distribution-update", 0);
    let seed = config.seed;
    let split_ctx = EvalCtx {
        batch: 0,
        seed: rng::derive_seed(config.seed, "split-opt", 0),
    };

    let (choices, split_index, rate_metrics) = match config.evaluator {
        EvaluatorKind::Tabular => {
            let evaluator = build_tabular_evaluator(config, &assembled.space)?;
            let iterations = update_iterations(config, 1);
            let choices = baseline::hwnas_search(
                &assembled.space,
                &evaluator,
                &assembled.latency_model,
                &config.objective,
                &config.asng.to_asng_config(),
                config.asng.theta_min,
                iterations,
                &mut update_rng,
                |t| EvalCtx {
                    batch: t,
                    seed: rng::derive_seed(seed, "update-ctx", t),
                },
                |params, record| writers.record(params, record),
            )?;
            let (split_index, _) = baseline::split_point_opt(
                &choices,
                &assembled.space,
                &evaluator,
                &assembled.latency_model,
                &config.objective,
                &split_ctx,
            )?;
            let sample = ArchSample::new(choices.clone(), split_index);
            let metrics = final_rate_metrics(
                config,
                &sample,
                EvaluatorKind::Tabular,
                Some(&evaluator),
                None,
                &config.objective.dropout_rates,
            )?;
            (choices, split_index, metrics)
        }
        EvaluatorKind::Supernet => {
            let dataset_cfg = config.dataset.as_ref().expect("validated");
            let task = supernet::generate_task(dataset_cfg, config.seed)?;
            let mut net = ToySupernet::new(
                &assembled.space,
                dataset_cfg.input_dim,
                dataset_cfg.classes,
                config.seed,
            )?;
            let pretrain_metrics = supernet::pretrain(
                &mut net,
                &task,
                &config.train,
                config.objective.eps_loss,
                config.objective.train_dropout_rate,
                rng::derive_seed(config.seed, "pretrain", 0),
            )?;
            write_epoch_metrics(&out_dir.join(PRETRAIN_METRICS_FILE), &pretrain_metrics)?;

            let evaluator = SupernetEvaluator::new(
                net.clone(),
                task.val.clone(),
                config.train.batch_size,
                config.train.inverted_rescale,
            );
            let iterations = update_iterations(config, evaluator.num_batches());
            let choices = baseline::hwnas_search(
                &assembled.space,
                &evaluator,
                &assembled.latency_model,
                &config.objective,
                &config.asng.to_asng_config(),
                config.asng.theta_min,
                iterations,
                &mut update_rng,
                |t| EvalCtx {
                    batch: t,
                    seed: rng::derive_seed(seed, "update-ctx", t),
                },
                |params, record| writers.record(params, record),
            )?;
            // Scan split candidates against the whole validation set.
            let full_eval = SupernetEvaluator::new(
                net.clone(),
                task.val.clone(),
                task.val.len(),
                config.train.inverted_rescale,
            );
            let (split_index, _) = baseline::split_point_opt(
                &choices,
                &assembled.space,
                &full_eval,
                &assembled.latency_model,
                &config.objective,
                &split_ctx,
            )?;
            let sample = ArchSample::new(choices.clone(), split_index);

            let retrain_rate = match variant {
                BaselineVariant::WithDropout => config.objective.train_dropout_rate,
                BaselineVariant::WithoutDropout => 0.0,
            };
            let mut fresh = ToySupernet::new(
                &assembled.space,
                dataset_cfg.input_dim,
                dataset_cfg.classes,
                rng::derive_seed(config.seed, "retrain-init", 0),
            )?;
            let retrain_metrics = supernet::train_subnetwork(
                &mut fresh,
                &sample,
                &task,
                &config.train,
                config.train.retrain_epochs,
                retrain_rate,
                rng::derive_seed(config.seed, "retrain", 0),
            )?;
            write_epoch_metrics(&out_dir.join(RETRAIN_METRICS_FILE), &retrain_metrics)?;
            fs::write(
                out_dir.join(CHECKPOINT_FILE),
                serde_json::to_string(&Checkpoint::wrap(&fresh))?,
            )?;
            let metrics = final_rate_metrics(
                config,
                &sample,
                EvaluatorKind::Supernet,
                None,
                Some((&fresh, &task)),
                &config.objective.dropout_rates,
            )?;
            (choices, split_index, metrics)
        }
    };
    writers.finish()?;

    let sample = ArchSample::new(choices, split_index);
    let result = result_for_sample(
        config,
        &assembled,
        variant.method_name(),
        &sample,
        rate_metrics,
        started.elapsed().as_secs_f64() * 1e3,
    )?;
    persist_result(out_dir, config, &result)?;
    Ok(result)
}

/// Exhaustively enumerate the configured space and write the full ranking.
pub fn run_oracle(config: &RunConfig, cap: u64, out_dir: &Path) -> Result<OracleReport> {
    let assembled = assemble(config)?;
    let ctx = EvalCtx {
        batch: 0,
        seed: rng::derive_seed(config.seed, "oracle", 0),
    };
    let report = match config.evaluator {
        EvaluatorKind::Tabular => {
            let evaluator = build_tabular_evaluator(config, &assembled.space)?;
            oracle::enumerate_optimum(
                &assembled.space,
                &evaluator,
                &assembled.latency_model,
                &config.objective,
                &ctx,
                cap,
            )?
        }
        EvaluatorKind::Supernet => {
            let dataset_cfg = config.dataset.as_ref().expect("validated");
            let task = supernet::generate_task(dataset_cfg, config.seed)?;
            let mut net = ToySupernet::new(
                &assembled.space,
                dataset_cfg.input_dim,
                dataset_cfg.classes,
                config.seed,
            )?;
            supernet::pretrain(
                &mut net,
                &task,
                &config.train,
                config.objective.eps_loss,
                config.objective.train_dropout_rate,
                rng::derive_seed(config.seed, "pretrain", 0),
            )?;
            let evaluator = SupernetEvaluator::new(
                net,
                task.val.clone(),
                task.val.len(),
                config.train.inverted_rescale,
            );
            oracle::enumerate_optimum(
                &assembled.space,
                &evaluator,
                &assembled.latency_model,
                &config.objective,
                &ctx,
                cap,
            )?
        }
    };
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join(ORACLE_REPORT_FILE),
        oracle::report_csv(&report, &assembled.space),
    )?;
    Ok(report)
}

/// Overrides applied when re-evaluating a stored run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOverrides {
    /// Replace the rate set with a single rate.
    pub rate: Option<f64>,
    pub throughput_mbps: Option<f64>,
    pub t_th_ms: Option<f64>,
}

impl EvalOverrides {
    /// Parse `key=value` pairs: `p=<rate>`, `r_mbps=<throughput>`,
    /// `t_th_ms=<threshold>`.
    pub fn parse(pairs: &[String]) -> Result<EvalOverrides> {
        let mut overrides = EvalOverrides::default();
        for pair in pairs {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                Error::config("override", format!("expected key=value, got '{pair}'"))
            })?;
            let parsed: f64 = value.trim().parse().map_err(|_| {
                Error::config("override", format!("bad numeric value in '{pair}'"))
            })?;
            match key.trim() {
                "p" => overrides.rate = Some(parsed),
                "r_mbps" => overrides.throughput_mbps = Some(parsed),
                "t_th_ms" => overrides.t_th_ms = Some(parsed),
                other => {
                    return Err(Error::config(
                        "override",
                        format!("unknown key '{other}' (p | r_mbps | t_th_ms)"),
                    ))
                }
            }
        }
        Ok(overrides)
    }
}

/// One exported accuracy-vs-latency row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    pub rates: Vec<RateAccuracy>,
    pub latency: LatencyEval,
    pub penalty_ms: f64,
    pub combined: f64,
}

/// Column order: method, seed, one accuracy column per rate, total latency,
/// head compute, communication, tail compute, penalty, combined.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let rates: Vec<f64> = rows
        .first()
        .map(|r| r.rates.iter().map(|m| m.rate).collect())
        .unwrap_or_default();
    let mut out = String::from("method,seed");
    for rate in &rates {
        out.push_str(&format!(",acc@{rate}"));
    }
    out.push_str(",latency_ms,head_comp_ms,comm_ms,tail_comp_ms,penalty_ms,combined\n");
    for row in rows {
        out.push_str(&format!("{},{}", row.method, row.seed));
        for m in &row.rates {
            match m.accuracy {
                Some(a) => out.push_str(&format!(",{a}")),
                None => out.push(','),
            }
        }
        out.push_str(&format!(
            ",{},{},{},{},{},{}\n",
            row.latency.total_ms,
            row.latency.head_comp_ms,
            row.latency.comm_ms,
            row.latency.tail_comp_ms,
            row.penalty_ms,
            row.combined
        ));
    }
    out
}

/// Re-evaluate a stored run under optional overrides and emit its
/// accuracy-vs-latency row. Needs nothing beyond the run directory.
pub fn evaluate_run(run_dir: &Path, overrides: &EvalOverrides) -> Result<MetricsRow> {
    let config_path = run_dir.join(CONFIG_FILE);
    if !config_path.exists() {
        return Err(Error::MissingArtifact(config_path.display().to_string()));
    }
    let mut config = RunConfig::from_json(&fs::read_to_string(config_path)?)?;
    let result_path = run_dir.join(RESULT_FILE);
    if !result_path.exists() {
        return Err(Error::MissingArtifact(result_path.display().to_string()));
    }
    let stored: RunResult = serde_json::from_str(&fs::read_to_string(result_path)?)?;

    if let Some(r) = overrides.throughput_mbps {
        config.latency.link.throughput_mbps = r;
    }
    if let Some(t) = overrides.t_th_ms {
        config.objective.t_th_ms = t;
    }
    let rates: Vec<f64> = match overrides.rate {
        Some(rate) => vec![rate],
        None => config.objective.dropout_rates.clone(),
    };

    let assembled = assemble(&config)?;
    let sample = ArchSample::new(stored.choice_indices.clone(), {
        assembled
            .space
            .split_candidates
            .iter()
            .position(|&p| p == stored.split_position)
            .ok_or_else(|| Error::InvalidSpace("stored split not in space".into()))?
    });

    let rate_metrics = match config.evaluator {
        EvaluatorKind::Tabular => {
            let evaluator = build_tabular_evaluator(&config, &assembled.space)?;
            final_rate_metrics(
                &config,
                &sample,
                EvaluatorKind::Tabular,
                Some(&evaluator),
                None,
                &rates,
            )?
        }
        EvaluatorKind::Supernet => {
            let checkpoint_path = run_dir.join(CHECKPOINT_FILE);
            if !checkpoint_path.exists() {
                return Err(Error::MissingArtifact(checkpoint_path.display().to_string()));
            }
            let net = Checkpoint::load(&checkpoint_path)?;
            let task = supernet::generate_task(config.dataset.as_ref().unwrap(), config.seed)?;
            final_rate_metrics(
                &config,
                &sample,
                EvaluatorKind::Supernet,
                None,
                Some((&net, &task)),
                &rates,
            )?
        }
    };

    let latency = assembled.latency_model.end_to_end(&sample, &assembled.space)?;
    let loss =
        rate_metrics.iter().map(|m| m.loss).sum::<f64>() / rate_metrics.len().max(1) as f64;
    let penalty = penalty_ms(latency.total_ms, config.objective.t_th_ms);
    Ok(MetricsRow {
        method: stored.method,
        seed: stored.seed,
        rates: rate_metrics,
        latency,
        penalty_ms: penalty,
        combined: config.objective.eps_loss * loss + config.objective.eps_lat * penalty,
    })
}

/// Fit device powers from a measured latency table over a space's blocks.
/// Returns one (device, GFLOPS) entry per requested device (all devices in
/// the table when none is named).
pub fn estimate_powers(
    space_source: &str,
    table_source: &str,
    device: Option<&str>,
) -> Result<Vec<(String, f64)>> {
    let space = SearchSpaceSpec::from_json(&resolve_source(space_source)?)?;
    let table = LatencyTable::parse(table_source, &resolve_source(table_source)?)?;
    if table.is_empty() {
        return Err(Error::PowerEstimation("latency table is empty".into()));
    }
    let devices: Vec<String> = match device {
        Some(d) => vec![d.to_string()],
        None => table.devices().map(str::to_string).collect(),
    };
    let mut out = Vec::new();
    for device in devices {
        let pairs = table.measurement_pairs(&space, &device)?;
        out.push((device, crate::latency::estimate_power_gflops(&pairs)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;

    fn toy_tabular_config() -> RunConfig {
        let mut config =
            RunConfig::from_json(bundled::get("config/toy-tabular").unwrap()).unwrap();
        config.asng.update_iterations = Some(400);
        config
    }

    #[test]
    fn search_run_produces_a_self_describing_directory() {
        let dir = tempdir("run-search");
        let config = toy_tabular_config();
        let result = run_search(&config, &dir).unwrap();
        assert_eq!(result.method, "nasc");
        assert_eq!(result.seed, 42);
        for file in [CONFIG_FILE, RESULT_FILE, THETA_TRACE_FILE, ITER_TRACE_FILE] {
            assert!(dir.join(file).exists(), "{file} missing");
        }
        let iter_lines = fs::read_to_string(dir.join(ITER_TRACE_FILE)).unwrap();
        assert_eq!(iter_lines.lines().count(), 1 + 400);
        let theta_lines = fs::read_to_string(dir.join(THETA_TRACE_FILE)).unwrap();
        // 4 dims x 3 categories + 1 dim x 5 categories = 17 rows per iteration.
        assert_eq!(theta_lines.lines().count(), 1 + 400 * 17);
        cleanup(&dir);
    }

    #[test]
    fn search_is_deterministic_modulo_wall_clock() {
        let config = toy_tabular_config();
        let d1 = tempdir("det-1");
        let d2 = tempdir("det-2");
        let mut a = serde_json::to_value(run_search(&config, &d1).unwrap()).unwrap();
        let mut b = serde_json::to_value(run_search(&config, &d2).unwrap()).unwrap();
        a.as_object_mut().unwrap().remove("wall_clock_ms");
        b.as_object_mut().unwrap().remove("wall_clock_ms");
        assert_eq!(a, b);
        cleanup(&d1);
        cleanup(&d2);
    }

    #[test]
    fn stored_breakdown_reproduces_under_evaluate_run() {
        let dir = tempdir("run-eval");
        let config = toy_tabular_config();
        let result = run_search(&config, &dir).unwrap();
        let row = evaluate_run(&dir, &EvalOverrides::default()).unwrap();
        assert_eq!(row.method, result.method);
        assert_eq!(row.latency, result.objective.latency);
        assert_eq!(row.penalty_ms, result.objective.penalty_ms);
        assert!((row.combined - result.objective.combined).abs() < 1e-12);
        assert_eq!(row.rates, result.accuracy_per_rate);
        cleanup(&dir);
    }

    #[test]
    fn halving_throughput_doubles_comm_in_eval() {
        let dir = tempdir("run-eval-r");
        let config = toy_tabular_config();
        run_search(&config, &dir).unwrap();
        let base = evaluate_run(&dir, &EvalOverrides::default()).unwrap();
        let halved = evaluate_run(
            &dir,
            &EvalOverrides {
                throughput_mbps: Some(config.latency.link.throughput_mbps / 2.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((halved.latency.comm_ms - 2.0 * base.latency.comm_ms).abs() < 1e-9);
        cleanup(&dir);
    }

    #[test]
    fn rate_override_produces_single_column() {
        let dir = tempdir("run-eval-p");
        let config = toy_tabular_config();
        run_search(&config, &dir).unwrap();
        let row = evaluate_run(
            &dir,
            &EvalOverrides {
                rate: Some(0.2),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(row.rates.len(), 1);
        assert_eq!(row.rates[0].rate, 0.2);
        let csv = metrics_csv(&[row]);
        assert!(csv.starts_with("method,seed,acc@0.2,latency_ms"));
        cleanup(&dir);
    }

    #[test]
    fn supernet_run_round_trips_through_its_checkpoint() {
        // A shrunken supernet-mode run: the stored result must reproduce
        // exactly from the persisted checkpoint and config alone.
        let mut config =
            RunConfig::from_json(bundled::get("config/toy-supernet").unwrap()).unwrap();
        config.train.pretrain_epochs = 3;
        config.train.retrain_epochs = 5;
        config.asng.update_epochs = Some(2);
        config.dataset.as_mut().unwrap().train_size = 128;
        config.dataset.as_mut().unwrap().val_size = 64;
        let dir = tempdir("run-supernet");
        let result = run_search(&config, &dir).unwrap();
        assert!(dir.join(CHECKPOINT_FILE).exists());
        assert!(dir.join(PRETRAIN_METRICS_FILE).exists());
        assert!(dir.join(RETRAIN_METRICS_FILE).exists());
        assert!(result.accuracy_per_rate.iter().all(|m| m.accuracy.is_some()));

        let row = evaluate_run(&dir, &EvalOverrides::default()).unwrap();
        assert_eq!(row.rates, result.accuracy_per_rate);
        assert_eq!(row.latency, result.objective.latency);
        assert!((row.combined - result.objective.combined).abs() < 1e-12);
        cleanup(&dir);
    }

    #[test]
    fn baseline_shares_the_result_schema() {
        let dir = tempdir("run-baseline");
        let config = toy_tabular_config();
        let result = run_baseline(&config, BaselineVariant::WithDropout, &dir).unwrap();
        assert_eq!(result.method, "hwnas_with_dropout");
        // Same schema: parse as RunResult after a round trip.
        let text = fs::read_to_string(dir.join(RESULT_FILE)).unwrap();
        let parsed: RunResult = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, result);
        cleanup(&dir);
    }

    #[test]
    fn oracle_run_writes_the_full_ranking() {
        let dir = tempdir("run-oracle");
        let config = toy_tabular_config();
        let report = run_oracle(&config, 100_000, &dir).unwrap();
        assert_eq!(report.entries.len(), 405);
        let csv = fs::read_to_string(dir.join(ORACLE_REPORT_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 406);
        cleanup(&dir);
    }

    #[test]
    fn oracle_cap_refusal() {
        let config = toy_tabular_config();
        let dir = tempdir("run-oracle-cap");
        let err = run_oracle(&config, 10, &dir).unwrap_err();
        assert!(matches!(err, Error::SpaceTooLarge { .. }));
        cleanup(&dir);
    }

    #[test]
    fn estimate_powers_roundtrip_on_synthetic_table() {
        // A table generated exactly from a known power recovers it.
        let space_src = "bundled:space/toy-tabular";
        let space = SearchSpaceSpec::from_json(&resolve_source(space_src).unwrap()).unwrap();
        let mut text = String::from("layer_index,block_id,device_id,latency_ms\n");
        let pi_gflops = 2.0;
        for (l, layer) in space.layers.iter().enumerate() {
            for id in &layer.candidates {
                let block = space.block(id).unwrap();
                let flops = space::block_flops(block, layer) as f64;
                let ms = flops / (pi_gflops * 1e6);
                text.push_str(&format!("{l},{id},dev,{ms}\n"));
            }
        }
        let path = std::env::temp_dir().join("splitnas-estimate-test.csv");
        fs::write(&path, text).unwrap();
        let powers =
            estimate_powers(space_src, path.to_str().unwrap(), Some("dev")).unwrap();
        assert_eq!(powers.len(), 1);
        assert!((powers[0].1 - pi_gflops).abs() < 1e-9);
        fs::remove_file(path).ok();
    }

    #[test]
    fn override_parsing() {
        let o = EvalOverrides::parse(&[
            "p=0.2".to_string(),
            "r_mbps=4".to_string(),
            "t_th_ms=25".to_string(),
        ])
        .unwrap();
        assert_eq!(o.rate, Some(0.2));
        assert_eq!(o.throughput_mbps, Some(4.0));
        assert_eq!(o.t_th_ms, Some(25.0));
        assert!(EvalOverrides::parse(&["nope".to_string()]).is_err());
        assert!(EvalOverrides::parse(&["x=1".to_string()]).is_err());
    }

    fn tempdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "splitnas-test-{tag}-{}",
            std::process::id()
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn cleanup(dir: &Path) {
        fs::remove_dir_all(dir).ok();
    }
}
