//! The hardware-aware comparison protocol: conventional architecture search
//! that ignores communication, followed by post-hoc split-point selection
//! and re-training.
//!
//! The search stage reuses the same adaptive natural-gradient machinery as
//! the joint search, isolating the protocol difference: latency is the
//! whole-model compute on the end device (no communication term, no split
//! dimension), and the loss is evaluated at rate zero only (packet loss
//! assumed absent). The split point is then chosen by an exhaustive scan of
//! the full objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asng::{self, AsngConfig, AsngState, IterRecord};
use crate::categorical::{DistributionParams, ThetaFloor};
use crate::error::{Error, Result};
use crate::latency::{penalty_ms, LatencyModel};
use crate::objective::{self, EvalCtx, Evaluator, ObjectiveBreakdown, ObjectiveConfig};
use crate::space::{ArchSample, SearchSpaceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    WithDropout,
    WithoutDropout,
}

impl BaselineVariant {
    pub fn parse(s: &str) -> Result<BaselineVariant> {
        match s {
            "with-dropout" | "with_dropout" => Ok(BaselineVariant::WithDropout),
            "without-dropout" | "without_dropout" => Ok(BaselineVariant::WithoutDropout),
            other => Err(Error::config(
                "variant",
                format!("unknown variant '{other}' (with-dropout | without-dropout)"),
            )),
        }
    }

    pub fn method_name(&self) -> &'static str {
        match self {
            BaselineVariant::WithDropout => "hwnas_with_dropout",
            BaselineVariant::WithoutDropout => "hwnas_without_dropout",
        }
    }
}

/// Architecture-only search assuming the whole model runs on the head
/// device: the distribution covers the layer dimensions only, latency is
/// the on-device compute of the full model, and the loss is evaluated at
/// rate zero. Returns the most likely layer choices.
#[allow(clippy::too_many_arguments)]
pub fn hwnas_search<R, F>(
    space: &SearchSpaceSpec,
    evaluator: &dyn Evaluator,
    latency_model: &LatencyModel,
    objective_config: &ObjectiveConfig,
    asng_config: &AsngConfig,
    theta_floor: Option<f64>,
    iterations: u64,
    rng: &mut R,
    mut ctx_for: F,
    mut on_iter: impl FnMut(&DistributionParams, &IterRecord) -> Result<()>,
) -> Result<Vec<usize>>
where
    R: Rng,
    F: FnMut(u64) -> EvalCtx,
{
    asng_config.validate()?;
    let dims = space.layer_dims();
    let floor = match theta_floor {
        Some(value) => ThetaFloor::fixed(value, dims.len()),
        None => ThetaFloor::default_for(&dims),
    };
    floor.validate(&dims)?;
    let mut state = AsngState::new(&dims, asng_config);
    let params = DistributionParams::uniform(&dims);

    let objective = |t: u64, arch: &ArchSample| -> Result<f64> {
        let ctx = ctx_for(t);
        // The split dimension is excluded from the search; rate 0 makes the
        // loss independent of where a split would fall.
        let sample = ArchSample::new(arch.categories.clone(), 0);
        let loss = evaluator.eval_loss(&sample, 0.0, &ctx)?;
        let on_device_ms = latency_model.whole_model_ms(
            sample.layer_choices(),
            space,
            &latency_model.head_device,
        )?;
        let tau = penalty_ms(on_device_ms, objective_config.t_th_ms);
        Ok(objective_config.eps_loss * loss + objective_config.eps_lat * tau)
    };

    let arch_id = |arch: &ArchSample| -> u128 {
        let mut id: u128 = 0;
        for (&c, &k) in arch.categories.iter().zip(dims.iter()) {
            id = id * k as u128 + c as u128;
        }
        id
    };

    let final_params = asng::run_distribution_update(
        params,
        &mut state,
        &floor,
        iterations,
        rng,
        objective,
        arch_id,
        &mut on_iter,
    )?;
    Ok(final_params.most_likely().categories)
}

/// Exhaustive split-point selection for a fixed architecture: scans every
/// split candidate with the full objective (dropout-averaged loss, two-device
/// compute plus communication latency) and returns the best index; ties go
/// to the earliest split.
pub fn split_point_opt(
    layer_choices: &[usize],
    space: &SearchSpaceSpec,
    evaluator: &dyn Evaluator,
    latency_model: &LatencyModel,
    objective_config: &ObjectiveConfig,
    ctx: &EvalCtx,
) -> Result<(usize, ObjectiveBreakdown)> {
    let mut best: Option<(usize, ObjectiveBreakdown)> = None;
    for split_index in 0..space.split_candidates.len() {
        let sample = ArchSample::new(layer_choices.to_vec(), split_index);
        let breakdown = objective::objective(
            evaluator,
            &sample,
            latency_model,
            space,
            objective_config,
            ctx,
        )?;
        let better = match &best {
            None => true,
            Some((_, b)) => breakdown.combined < b.combined,
        };
        if better {
            best = Some((split_index, breakdown));
        }
    }
    best.ok_or_else(|| Error::InvalidSpace("space has no split candidates".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::{LatencyMode, LatencyTable, LinkModel};
    use crate::objective::{
        CountingEvaluator, DegradationCurve, SensitivityModel, TabularEvaluator, TabularSpec,
    };
    use crate::oracle;
    use crate::rng;
    use crate::space::tests_support::small_space;
    use std::collections::BTreeMap;

    const CTX: EvalCtx = EvalCtx { batch: 0, seed: 5 };

    fn uniform_latency_model() -> LatencyModel {
        // Every block costs the same on a device, so the on-device penalty
        // term is constant across architectures.
        let mut table = LatencyTable::default();
        for device in ["edge", "server"] {
            for layer in 0..3 {
                for block in ["e2", "e_half", "skip"] {
                    table.insert(layer, block, device, 1.0);
                }
            }
        }
        LatencyModel::new(
            LatencyMode::Tabular,
            Some(table),
            BTreeMap::new(),
            LinkModel {
                throughput_bps: 16_000.0,
                bits_per_element: 32.0,
                loss_prob: 0.0,
            },
            "edge",
            "server",
        )
        .unwrap()
    }

    fn scored_evaluator(space: &SearchSpaceSpec) -> TabularEvaluator {
        TabularEvaluator::new(
            space.clone(),
            TabularSpec {
                layer_scores: vec![
                    vec![0.1, 0.5, 0.9],
                    vec![0.6, 0.2, 0.8],
                    vec![0.3, 0.9, 0.1],
                ],
                split_scores: vec![0.0; 4],
                degradation: DegradationCurve {
                    scale: 0.5,
                    power: 1.0,
                },
                sensitivity: SensitivityModel::InverseIntermediate { scale: 4.0 },
            },
        )
        .unwrap()
    }

    #[test]
    fn hwnas_reduces_to_loss_minimization_on_uniform_latency() {
        let space = small_space();
        let evaluator = scored_evaluator(&space);
        let model = uniform_latency_model();
        let config = ObjectiveConfig {
            t_th_ms: 100.0, // on-device compute is far below threshold
            ..Default::default()
        };
        let mut hits = 0;
        for seed in 0..20 {
            let mut r = rng::stream(seed, "hwnas", 0);
            let choices = hwnas_search(
                &space,
                &evaluator,
                &model,
                &config,
                &AsngConfig::default(),
                Some(0.02),
                800,
                &mut r,
                |t| EvalCtx { batch: t, seed: 5 },
                |_, _| Ok(()),
            )
            .unwrap();
            if choices == vec![0, 1, 2] {
                hits += 1;
            }
        }
        // Brute-force argmin of the loss is (0, 1, 2); the search should
        // find it in nearly every seeded run.
        assert!(hits >= 18, "found loss optimum in {hits}/20 runs");
    }

    #[test]
    fn hwnas_never_evaluates_communication() {
        let space = small_space();
        let evaluator = scored_evaluator(&space);
        let model = uniform_latency_model();
        let config = ObjectiveConfig::default();
        let mut r = rng::stream(3, "hwnas-comm", 0);
        let _ = hwnas_search(
            &space,
            &evaluator,
            &model,
            &config,
            &AsngConfig::default(),
            None,
            200,
            &mut r,
            |t| EvalCtx { batch: t, seed: 1 },
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(model.comm_eval_count(), 0);
    }

    #[test]
    fn hwnas_matches_oracle_on_device_objective() {
        // Oracle check against brute force over the architecture dimensions
        // with the baseline's own objective (on-device compute, rate zero).
        let space = small_space();
        let evaluator = scored_evaluator(&space);
        let model = uniform_latency_model();
        let config = ObjectiveConfig {
            t_th_ms: 2.5,
            ..Default::default()
        };
        // Brute-force best over 3^3 architectures.
        let mut best: Option<(Vec<usize>, f64)> = None;
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let choices = vec![a, b, c];
                    let sample = ArchSample::new(choices.clone(), 0);
                    let loss = evaluator.eval_loss(&sample, 0.0, &CTX).unwrap();
                    let t = model.whole_model_ms(&choices, &space, "edge").unwrap();
                    let combined = loss + penalty_ms(t, config.t_th_ms);
                    if best.as_ref().map(|(_, v)| combined < *v).unwrap_or(true) {
                        best = Some((choices, combined));
                    }
                }
            }
        }
        let (expected, _) = best.unwrap();

        let mut hits = 0;
        for seed in 100..120 {
            let mut r = rng::stream(seed, "hwnas-oracle", 0);
            let choices = hwnas_search(
                &space,
                &evaluator,
                &model,
                &config,
                &AsngConfig::default(),
                Some(0.02),
                800,
                &mut r,
                |_| CTX,
                |_, _| Ok(()),
            )
            .unwrap();
            if choices == expected {
                hits += 1;
            }
        }
        assert!(hits >= 18, "matched the oracle in {hits}/20 runs");
    }

    #[test]
    fn split_scan_is_exhaustive_and_breaks_ties_early() {
        let space = small_space();
        // Flat loss and a huge threshold: every split ties, so the first
        // one wins.
        let evaluator = TabularEvaluator::new(
            space.clone(),
            TabularSpec {
                layer_scores: vec![vec![0.0; 3]; 3],
                split_scores: vec![0.0; 4],
                degradation: DegradationCurve {
                    scale: 0.0,
                    power: 1.0,
                },
                sensitivity: SensitivityModel::Constant { value: 0.0 },
            },
        )
        .unwrap();
        let model = uniform_latency_model();
        let config = ObjectiveConfig {
            t_th_ms: 1e9,
            ..Default::default()
        };
        let counting = CountingEvaluator::new(&evaluator);
        let (split, _) =
            split_point_opt(&[0, 0, 0], &space, &counting, &model, &config, &CTX).unwrap();
        assert_eq!(split, 0);
        // Exactly |splits| objective evaluations, each of |P| = 6 rates.
        assert_eq!(counting.calls(), 4 * 6);
    }

    #[test]
    fn split_scan_result_is_optimal_over_its_scan() {
        let space = small_space();
        let evaluator = scored_evaluator(&space);
        let model = uniform_latency_model();
        let config = ObjectiveConfig {
            t_th_ms: 10.0,
            ..Default::default()
        };
        let choices = vec![1usize, 0, 2];
        let (split, best) =
            split_point_opt(&choices, &space, &evaluator, &model, &config, &CTX).unwrap();
        for k in 0..4 {
            let sample = ArchSample::new(choices.clone(), k);
            let b =
                objective::objective(&evaluator, &sample, &model, &space, &config, &CTX).unwrap();
            assert!(
                best.combined <= b.combined + 1e-12,
                "split {k} beats {split}"
            );
        }
    }

    #[test]
    fn flat_loss_with_shrinking_boundary_prefers_latest_cheap_split() {
        // Hand-built 4-position case: with a bottleneck choice in the third
        // layer, the mid-block split at position 3 ships fewer elements than
        // any earlier boundary; with flat loss and zero compute cost the
        // scan picks it on communication latency alone.
        let space = small_space();
        let evaluator = TabularEvaluator::new(
            space.clone(),
            TabularSpec {
                layer_scores: vec![vec![0.0; 3]; 3],
                split_scores: vec![0.0; 4],
                degradation: DegradationCurve {
                    scale: 0.0,
                    power: 1.0,
                },
                sensitivity: SensitivityModel::Constant { value: 0.0 },
            },
        )
        .unwrap();
        let mut table = LatencyTable::default();
        for device in ["edge", "server"] {
            for layer in 0..3 {
                for block in ["e2", "e_half", "skip"] {
                    table.insert(layer, block, device, 0.0);
                }
            }
        }
        let model = LatencyModel::new(
            LatencyMode::Tabular,
            Some(table),
            BTreeMap::new(),
            LinkModel {
                throughput_bps: 16_000.0,
                bits_per_element: 32.0,
                loss_prob: 0.0,
            },
            "edge",
            "server",
        )
        .unwrap();
        let config = ObjectiveConfig {
            t_th_ms: 0.0, // every millisecond counts
            ..Default::default()
        };
        // Bottleneck at layer 2: the mid split ships 4 elements instead of 8.
        let choices = vec![0usize, 0, 1];
        let (split, b) =
            split_point_opt(&choices, &space, &evaluator, &model, &config, &CTX).unwrap();
        assert_eq!(split, 3);
        assert_eq!(b.latency.intermediate_elements, 4);
    }

    #[test]
    fn oracle_confirms_protocol_gap_on_a_comm_heavy_space() {
        // On a space where communication dominates, the architecture chosen
        // while ignoring communication can never beat the joint optimum.
        let space = small_space();
        let evaluator = scored_evaluator(&space);
        let model = uniform_latency_model();
        let config = ObjectiveConfig {
            t_th_ms: 12.0,
            ..Default::default()
        };
        let report = oracle::enumerate_optimum(
            &space,
            &evaluator,
            &model,
            &config,
            &CTX,
            oracle::DEFAULT_CAP,
        )
        .unwrap();

        let mut r = rng::stream(7, "gap", 0);
        let choices = hwnas_search(
            &space,
            &evaluator,
            &model,
            &config,
            &AsngConfig::default(),
            Some(0.02),
            800,
            &mut r,
            |_| CTX,
            |_, _| Ok(()),
        )
        .unwrap();
        let (_, baseline_best) =
            split_point_opt(&choices, &space, &evaluator, &model, &config, &CTX).unwrap();
        assert!(baseline_best.combined >= report.best().combined - 1e-12);
    }
}
