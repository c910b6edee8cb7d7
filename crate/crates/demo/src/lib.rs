//! Browser demo over the core engine: three interactive operations exposed
//! to a static page through wasm-bindgen.
//!
//! 1. Step-wise joint search on the bundled tabular benchmark, for watching
//!    the categorical distribution concentrate onto the enumerated optimum.
//! 2. Latency profiles across every split point of the full 22-layer space,
//!    under adjustable link throughput and threshold.
//! 3. A seeded comparison of the joint search against the
//!    communication-blind protocol.
//!
//! All functions return JSON strings; everything is deterministic per seed.
//! The engine itself is plain Rust and fully testable on the host; only the
//! thin wrappers at the bottom are wasm-specific.

use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use splitnas_core::asng::{self, AsngState, IterRecord};
use splitnas_core::baseline;
use splitnas_core::categorical::{DistributionParams, ThetaFloor};
use splitnas_core::config::RunConfig;
use splitnas_core::error::{Error, Result};
use splitnas_core::latency::{parse_device_powers, LatencyMode, LatencyModel, LinkModel};
use splitnas_core::objective::{self, EvalCtx, Evaluator, TabularEvaluator, TabularSpec};
use splitnas_core::oracle;
use splitnas_core::rng;
use splitnas_core::space::{self, ArchSample, SearchSpaceSpec};
use splitnas_core::{bundled, supernet};

fn toy_setup() -> Result<(RunConfig, SearchSpaceSpec, TabularEvaluator, LatencyModel)> {
    let config = RunConfig::from_json(bundled::get("config/toy-tabular").expect("bundled"))?;
    let space = SearchSpaceSpec::from_json(bundled::get("space/toy-tabular").expect("bundled"))?;
    let spec = TabularSpec::from_json(bundled::get("scores/toy-tabular").expect("bundled"))?;
    let evaluator = TabularEvaluator::new(space.clone(), spec)?;
    let table = splitnas_core::latency::LatencyTable::parse(
        "bundled:table/toy-latency",
        bundled::get("table/toy-latency").expect("bundled"),
    )?;
    let latency = LatencyModel::new(
        LatencyMode::Tabular,
        Some(table),
        Default::default(),
        LinkModel {
            throughput_bps: config.latency.link.throughput_mbps * 1e6,
            bits_per_element: config.latency.link.bits_per_element,
            loss_prob: config.latency.link.loss_prob,
        },
        config.latency.head_device.clone(),
        config.latency.tail_device.clone(),
    )?;
    Ok((config, space, evaluator, latency))
}

#[derive(Serialize)]
struct SampleSummary {
    id: String,
    blocks: Vec<String>,
    split_position: usize,
    mid_block: bool,
    loss: f64,
    latency_ms: f64,
    penalty_ms: f64,
    combined: f64,
    feasible: bool,
}

fn summarize(
    sample: &ArchSample,
    space: &SearchSpaceSpec,
    evaluator: &dyn Evaluator,
    latency: &LatencyModel,
    config: &RunConfig,
) -> Result<SampleSummary> {
    let ctx = EvalCtx { batch: 0, seed: 0 };
    let breakdown =
        objective::objective(evaluator, sample, latency, space, &config.objective, &ctx)?;
    let decoded = space::decode(sample, space)?;
    Ok(SampleSummary {
        id: space::sample_id(sample, space).to_string(),
        blocks: sample
            .layer_choices()
            .iter()
            .enumerate()
            .map(|(l, &c)| space.layers[l].candidates[c].clone())
            .collect(),
        split_position: space.split_candidates[sample.split_index()],
        mid_block: decoded.split.mid_block,
        loss: breakdown.loss,
        latency_ms: breakdown.latency.total_ms,
        penalty_ms: breakdown.penalty_ms,
        combined: breakdown.combined,
        feasible: breakdown.latency.total_ms <= config.objective.t_th_ms,
    })
}

/// Step-wise joint search on the bundled tabular benchmark.
pub struct SearchEngine {
    config: RunConfig,
    space: SearchSpaceSpec,
    evaluator: TabularEvaluator,
    latency: LatencyModel,
    theta: DistributionParams,
    state: AsngState,
    floor: ThetaFloor,
    sampler: ChaCha12Rng,
    budget: u64,
    oracle_id: String,
    oracle_combined: f64,
    recent: Vec<IterRecord>,
}

impl SearchEngine {
    pub fn new(seed: u64) -> Result<SearchEngine> {
        let (mut config, space, evaluator, latency) = toy_setup()?;
        config.seed = seed;
        let dims = space.categorical_dims();
        let floor = match config.asng.theta_min {
            Some(value) => ThetaFloor::fixed(value, dims.len()),
            None => ThetaFloor::default_for(&dims),
        };
        let report = oracle::enumerate_optimum(
            &space,
            &evaluator,
            &latency,
            &config.objective,
            &EvalCtx { batch: 0, seed: 0 },
            oracle::DEFAULT_CAP,
        )?;
        Ok(SearchEngine {
            state: AsngState::new(&dims, &config.asng.to_asng_config()),
            theta: DistributionParams::uniform(&dims),
            sampler: rng::stream(seed, "distribution-update", 0),
            budget: config.asng.update_iterations.unwrap_or(2000),
            oracle_id: report.best().id.to_string(),
            oracle_combined: report.best().combined,
            recent: Vec::new(),
            config,
            space,
            evaluator,
            latency,
            floor,
        })
    }

    /// Advance up to `count` iterations and return a JSON snapshot.
    pub fn step(&mut self, count: u64) -> Result<String> {
        let remaining = self.budget.saturating_sub(self.state.t);
        let iterations = count.min(remaining);
        self.recent.clear();
        let seed = self.config.seed;
        let (space, evaluator, latency, objective_cfg) = (
            &self.space,
            &self.evaluator,
            &self.latency,
            &self.config.objective,
        );
        let recent = &mut self.recent;
        self.theta = asng::run_distribution_update(
            self.theta.clone(),
            &mut self.state,
            &self.floor,
            iterations,
            &mut self.sampler,
            |t, sample| {
                let ctx = EvalCtx {
                    batch: t,
                    seed: rng::derive_seed(seed, "update-ctx", t),
                };
                Ok(
                    objective::objective(evaluator, sample, latency, space, objective_cfg, &ctx)?
                        .combined,
                )
            },
            |sample| space::sample_id(sample, space),
            |_, record| {
                recent.push(record.clone());
                Ok(())
            },
        )?;

        #[derive(Serialize)]
        struct TracePoint {
            t: u64,
            objective: f64,
            delta: f64,
            eps_theta: f64,
        }
        #[derive(Serialize)]
        struct Snapshot<'a> {
            t: u64,
            budget: u64,
            done: bool,
            dims: Vec<usize>,
            candidate_labels: Vec<Vec<String>>,
            theta: &'a [Vec<f64>],
            argmax: SampleSummary,
            oracle_id: &'a str,
            oracle_combined: f64,
            trace: Vec<TracePoint>,
        }

        let mut candidate_labels: Vec<Vec<String>> = self
            .space
            .layers
            .iter()
            .map(|l| l.candidates.clone())
            .collect();
        candidate_labels.push(
            self.space
                .split_candidates
                .iter()
                .map(|p| format!("split {p}"))
                .collect(),
        );
        let snapshot = Snapshot {
            t: self.state.t,
            budget: self.budget,
            done: self.state.t >= self.budget,
            dims: self.space.categorical_dims(),
            candidate_labels,
            theta: self.theta.theta(),
            argmax: summarize(
                &self.theta.most_likely(),
                &self.space,
                &self.evaluator,
                &self.latency,
                &self.config,
            )?,
            oracle_id: &self.oracle_id,
            oracle_combined: self.oracle_combined,
            trace: self
                .recent
                .iter()
                .map(|r| TracePoint {
                    t: r.t,
                    objective: r.objectives[0].min(r.objectives[1]),
                    delta: r.delta,
                    eps_theta: r.eps_theta,
                })
                .collect(),
        };
        Ok(serde_json::to_string(&snapshot)?)
    }
}

/// Latency breakdown across every split position of the full 22-layer space
/// for a seeded random architecture, under the given link throughput and
/// threshold. `extended` selects the space with sub-unit expansion blocks.
pub fn latency_profile_json(
    extended: bool,
    arch_seed: u64,
    throughput_mbps: f64,
    t_th_ms: f64,
) -> Result<String> {
    if !(throughput_mbps > 0.0) {
        return Err(Error::config("throughput_mbps", "must be > 0"));
    }
    let space_name = if extended {
        "space/fbnet-extended"
    } else {
        "space/fbnet"
    };
    let space = SearchSpaceSpec::from_json(bundled::get(space_name).expect("bundled"))?;
    let powers = parse_device_powers(
        "bundled:power/reference-devices",
        bundled::get("power/reference-devices").expect("bundled"),
    )?;
    let latency = LatencyModel::new(
        LatencyMode::Flops,
        None,
        powers,
        LinkModel {
            throughput_bps: throughput_mbps * 1e6,
            bits_per_element: 32.0,
            loss_prob: 0.0,
        },
        "raspi4",
        "edgegpu",
    )?;

    let mut sampler = rng::stream(arch_seed, "profile-arch", 0);
    let choices = supernet::uniform_sample(&space.layer_dims(), &mut sampler).categories;

    #[derive(Serialize)]
    struct Row {
        split_position: usize,
        mid_block: bool,
        intermediate_elements: usize,
        head_comp_ms: f64,
        comm_ms: f64,
        tail_comp_ms: f64,
        total_ms: f64,
        penalty_ms: f64,
        feasible: bool,
    }
    #[derive(Serialize)]
    struct Profile {
        space: String,
        blocks: Vec<String>,
        throughput_mbps: f64,
        t_th_ms: f64,
        rows: Vec<Row>,
    }

    let mut rows = Vec::with_capacity(space.split_candidates.len());
    for split_index in 0..space.split_candidates.len() {
        let sample = ArchSample::new(choices.clone(), split_index);
        let eval = latency.end_to_end(&sample, &space)?;
        let decoded = space::decode(&sample, &space)?;
        rows.push(Row {
            split_position: space.split_candidates[split_index],
            mid_block: decoded.split.mid_block,
            intermediate_elements: eval.intermediate_elements,
            head_comp_ms: eval.head_comp_ms,
            comm_ms: eval.comm_ms,
            tail_comp_ms: eval.tail_comp_ms,
            total_ms: eval.total_ms,
            penalty_ms: splitnas_core::latency::penalty_ms(eval.total_ms, t_th_ms),
            feasible: eval.total_ms <= t_th_ms,
        });
    }
    let profile = Profile {
        space: space.name.clone(),
        blocks: choices
            .iter()
            .enumerate()
            .map(|(l, &c)| space.layers[l].candidates[c].clone())
            .collect(),
        throughput_mbps,
        t_th_ms,
        rows,
    };
    Ok(serde_json::to_string(&profile)?)
}

/// Run the joint search and the communication-blind protocol on the bundled
/// tabular benchmark for `seed_count` seeds and return the scatter points.
pub fn compare_protocols_json(seed_count: u64, iterations: u64) -> Result<String> {
    let (config, space, evaluator, latency) = toy_setup()?;
    let dims = space.categorical_dims();
    let floor = match config.asng.theta_min {
        Some(value) => ThetaFloor::fixed(value, dims.len()),
        None => ThetaFloor::default_for(&dims),
    };

    #[derive(Serialize)]
    struct ComparePoint {
        seed: u64,
        method: &'static str,
        #[serde(flatten)]
        summary: SampleSummary,
    }
    #[derive(Serialize)]
    struct Comparison {
        t_th_ms: f64,
        iterations: u64,
        points: Vec<ComparePoint>,
    }

    let mut points = Vec::new();
    for seed in 0..seed_count {
        // Joint search over architecture and split.
        let mut state = AsngState::new(&dims, &config.asng.to_asng_config());
        let mut sampler = rng::stream(seed, "distribution-update", 0);
        let theta = asng::run_distribution_update(
            DistributionParams::uniform(&dims),
            &mut state,
            &floor,
            iterations,
            &mut sampler,
            |t, sample| {
                let ctx = EvalCtx {
                    batch: t,
                    seed: rng::derive_seed(seed, "update-ctx", t),
                };
                Ok(objective::objective(
                    &evaluator,
                    sample,
                    &latency,
                    &space,
                    &config.objective,
                    &ctx,
                )?
                .combined)
            },
            |sample| space::sample_id(sample, &space),
            |_, _| Ok(()),
        )?;
        points.push(ComparePoint {
            seed,
            method: "nasc",
            summary: summarize(&theta.most_likely(), &space, &evaluator, &latency, &config)?,
        });

        // The protocol that ignores communication during the search.
        let mut sampler = rng::stream(seed, "distribution-update", 0);
        let choices = baseline::hwnas_search(
            &space,
            &evaluator,
            &latency,
            &config.objective,
            &config.asng.to_asng_config(),
            config.asng.theta_min,
            iterations,
            &mut sampler,
            |t| EvalCtx {
                batch: t,
                seed: rng::derive_seed(seed, "update-ctx", t),
            },
            |_, _| Ok(()),
        )?;
        let (split_index, _) = baseline::split_point_opt(
            &choices,
            &space,
            &evaluator,
            &latency,
            &config.objective,
            &EvalCtx {
                batch: 0,
                seed: rng::derive_seed(seed, "split-opt", 0),
            },
        )?;
        let sample = ArchSample::new(choices, split_index);
        points.push(ComparePoint {
            seed,
            method: "hwnas",
            summary: summarize(&sample, &space, &evaluator, &latency, &config)?,
        });
    }
    Ok(serde_json::to_string(&Comparison {
        t_th_ms: config.objective.t_th_ms,
        iterations,
        points,
    })?)
}

/// Sanity check used by the page footer.
pub fn engine_info_json() -> Result<String> {
    let (config, space, _, _) = toy_setup()?;
    Ok(serde_json::json!({
        "benchmark_space": space.name,
        "members": space.cardinality().to_string(),
        "t_th_ms": config.objective.t_th_ms,
        "iterations": config.asng.update_iterations,
    })
    .to_string())
}

/// wasm-bindgen exports backing the static page.
pub mod web {
    use wasm_bindgen::prelude::*;

    fn js_err(err: crate::Error) -> JsValue {
        JsValue::from_str(&err.to_string())
    }

    /// Step-wise joint search on the bundled tabular benchmark.
    #[wasm_bindgen]
    pub struct SearchDemo {
        inner: crate::SearchEngine,
    }

    #[wasm_bindgen]
    impl SearchDemo {
        #[wasm_bindgen(constructor)]
        pub fn new(seed: u32) -> Result<SearchDemo, JsValue> {
            Ok(SearchDemo {
                inner: crate::SearchEngine::new(u64::from(seed)).map_err(js_err)?,
            })
        }

        /// Advance up to `count` iterations; returns a JSON snapshot.
        pub fn step(&mut self, count: u32) -> Result<String, JsValue> {
            self.inner.step(u64::from(count)).map_err(js_err)
        }
    }

    /// Latency breakdown per split point of the full-scale space.
    #[wasm_bindgen]
    pub fn latency_profile(
        extended: bool,
        arch_seed: u32,
        throughput_mbps: f64,
        t_th_ms: f64,
    ) -> Result<String, JsValue> {
        crate::latency_profile_json(extended, u64::from(arch_seed), throughput_mbps, t_th_ms)
            .map_err(js_err)
    }

    /// Joint search vs the communication-blind protocol over several seeds.
    #[wasm_bindgen]
    pub fn compare_protocols(seed_count: u32, iterations: u32) -> Result<String, JsValue> {
        crate::compare_protocols_json(u64::from(seed_count), u64::from(iterations)).map_err(js_err)
    }

    #[wasm_bindgen]
    pub fn engine_info() -> Result<String, JsValue> {
        crate::engine_info_json().map_err(js_err)
    }
}
