//! Adaptive stochastic natural-gradient update of the search distribution.
//!
//! Each iteration evaluates two sampled candidates, converts their objective
//! values into rank utilities (+2 better, -2 worse), forms a Monte-Carlo
//! natural-gradient estimate, and takes a step of trust-region-controlled
//! length. The trust region Delta adapts from an exponential moving average
//! of normalized step directions: coherent directions grow the step, noisy
//! directions shrink it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::categorical::{
    self, fisher_norm, fisher_sqrt_apply, nat_grad_log, DistributionParams, ParamVec, ThetaFloor,
};
use crate::error::{Error, Result};
use crate::space::ArchSample;

/// Hyperparameters of the update. Defaults follow the standard setting:
/// alpha 1.5, initial step scale 1, two samples per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsngConfig {
    pub alpha: f64,
    pub delta_init: f64,
    pub delta_max: f64,
    pub lambda_theta: usize,
    /// Whether `n_theta` counts the redundant last category of each
    /// dimension. Affects only the magnitude of the EMA rate beta.
    pub count_redundant_params: bool,
}

impl Default for AsngConfig {
    fn default() -> Self {
        AsngConfig {
            alpha: 1.5,
            delta_init: 1.0,
            delta_max: 1000.0,
            lambda_theta: 2,
            count_redundant_params: true,
        }
    }
}

impl AsngConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config("asng.alpha", "must be > 0"));
        }
        if !(self.delta_init > 0.0) {
            return Err(Error::config("asng.delta_init", "must be > 0"));
        }
        if !(self.delta_max >= self.delta_init) {
            return Err(Error::config("asng.delta_max", "must be >= delta_init"));
        }
        if self.lambda_theta != 2 {
            return Err(Error::config(
                "asng.lambda_theta",
                "only the two-sample utility scheme is supported",
            ));
        }
        Ok(())
    }

    pub fn n_theta(&self, dims: &[usize]) -> usize {
        if self.count_redundant_params {
            dims.iter().sum()
        } else {
            dims.iter().map(|k| k - 1).sum()
        }
    }
}

/// Mutable state of the adaptive step-size mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsngState {
    pub delta: f64,
    pub gamma: f64,
    /// EMA of normalized step directions, shaped like theta.
    pub s: ParamVec,
    pub t: u64,
    pub alpha: f64,
    pub delta_init: f64,
    pub delta_max: f64,
    pub n_theta: usize,
}

impl AsngState {
    pub fn new(dims: &[usize], config: &AsngConfig) -> AsngState {
        AsngState {
            delta: 1.0,
            gamma: 0.0,
            s: dims.iter().map(|&k| vec![0.0; k]).collect(),
            t: 0,
            alpha: config.alpha,
            delta_init: config.delta_init,
            delta_max: config.delta_max,
            n_theta: config.n_theta(dims),
        }
    }

    pub fn s_norm_sq(&self) -> f64 {
        self.s.iter().flatten().map(|v| v * v).sum()
    }
}

/// Rank utilities for two objective values under minimization: the smaller
/// objective earns +2, the other -2; exact ties earn 0 each. A non-finite
/// objective is treated as worst (two non-finite values tie).
pub fn utilities(objective_values: &[f64]) -> Result<Vec<f64>> {
    if objective_values.len() != 2 {
        return Err(Error::config(
            "lambda_theta",
            format!("expected 2 objective values, got {}", objective_values.len()),
        ));
    }
    let (a, b) = (objective_values[0], objective_values[1]);
    let ranked = match (a.is_finite(), b.is_finite()) {
        (false, false) => vec![0.0, 0.0],
        (false, true) => vec![-2.0, 2.0],
        (true, false) => vec![2.0, -2.0],
        (true, true) => {
            if a < b {
                vec![2.0, -2.0]
            } else if b < a {
                vec![-2.0, 2.0]
            } else {
                vec![0.0, 0.0]
            }
        }
    };
    Ok(ranked)
}

/// Monte-Carlo natural-gradient estimate:
/// `G = (1/lambda) * sum_i u_i * (a_i - theta)`.
pub fn theta_gradient(
    samples: &[ArchSample],
    utilities: &[f64],
    params: &DistributionParams,
) -> ParamVec {
    let lambda = samples.len() as f64;
    let mut grad: ParamVec = params.theta().iter().map(|r| vec![0.0; r.len()]).collect();
    for (sample, &u) in samples.iter().zip(utilities) {
        if u == 0.0 {
            continue;
        }
        let g = nat_grad_log(sample, params);
        for (acc_row, g_row) in grad.iter_mut().zip(&g) {
            for (acc, &v) in acc_row.iter_mut().zip(g_row) {
                *acc += u * v;
            }
        }
    }
    for row in &mut grad {
        for v in row {
            *v /= lambda;
        }
    }
    grad
}

/// What one update step did, for tracing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub utilities: Vec<f64>,
    pub eps_theta: f64,
    pub grad_fisher_norm: f64,
    /// True when the gradient was exactly zero and theta was left unchanged.
    pub degenerate: bool,
}

/// One distribution-update iteration over already-evaluated samples.
///
/// Computes the step scale `delta_theta = delta_init / Delta` and EMA rate
/// `beta = delta_theta / sqrt(n_theta)`, the gradient estimate G, the
/// adaptive learning rate `eps = delta_theta / ||G||_F`, then the projected
/// parameter update, the direction EMA s, its normalizer gamma, and the
/// trust-region update of Delta, in that order. A zero gradient leaves theta
/// and s unchanged while gamma, Delta, and t still advance.
pub fn step(
    state: &mut AsngState,
    params: &DistributionParams,
    floor: &ThetaFloor,
    samples: &[ArchSample],
    objective_values: &[f64],
) -> Result<(DistributionParams, StepOutcome)> {
    let delta_theta = state.delta_init / state.delta;
    // beta is an EMA rate; clamp at 1 so pathological trust-region collapse
    // on tiny parameter counts cannot push it past the valid range.
    let beta = (delta_theta / (state.n_theta as f64).sqrt()).min(1.0);

    let utils = utilities(objective_values)?;
    let grad = theta_gradient(samples, &utils, params);
    let gnorm = fisher_norm(&grad, params);

    let (next, eps_theta, degenerate) = if gnorm > 0.0 {
        let eps = delta_theta / gnorm;
        let stepped: ParamVec = params
            .theta()
            .iter()
            .zip(&grad)
            .map(|(t_row, g_row)| {
                t_row
                    .iter()
                    .zip(g_row)
                    .map(|(&t, &g)| t + eps * g)
                    .collect()
            })
            .collect();
        let projected = categorical::project(&DistributionParams::from_raw(stepped), floor)?;
        let direction = fisher_sqrt_apply(&grad, params);
        let fade = 1.0 - beta;
        let gain = (beta * (2.0 - beta)).sqrt();
        for (s_row, d_row) in state.s.iter_mut().zip(&direction) {
            for (s, &d) in s_row.iter_mut().zip(d_row) {
                *s = fade * *s + gain * d / gnorm;
            }
        }
        (projected, eps, false)
    } else {
        (params.clone(), 0.0, true)
    };

    state.gamma = (1.0 - beta) * (1.0 - beta) * state.gamma + beta * (2.0 - beta);
    let exponent = beta * (state.gamma - state.s_norm_sq() / state.alpha);
    state.delta = (state.delta * exponent.exp()).min(state.delta_max);
    state.t += 1;

    Ok((
        next,
        StepOutcome {
            utilities: utils,
            eps_theta,
            grad_fisher_norm: gnorm,
            degenerate,
        },
    ))
}

/// One row of the iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub t: u64,
    pub objectives: Vec<f64>,
    pub utilities: Vec<f64>,
    pub eps_theta: f64,
    pub delta: f64,
    pub gamma: f64,
    pub s_norm_sq: f64,
    /// Mixed-radix id of the current per-dimension argmax.
    pub most_likely_id: u128,
}

/// Run the distribution-update loop for a fixed number of iterations.
///
/// `objective` maps a sample to the penalized objective value; `sample_id`
/// maps the running argmax to its canonical id for the trace; `on_iter`
/// observes the updated parameters after every step (trace persistence).
/// An evaluator failure aborts the run after whatever `on_iter` has already
/// persisted.
#[allow(clippy::too_many_arguments)]
pub fn run_distribution_update<R, F, G, H>(
    mut params: DistributionParams,
    state: &mut AsngState,
    floor: &ThetaFloor,
    iterations: u64,
    rng: &mut R,
    mut objective: F,
    mut sample_id: G,
    mut on_iter: H,
) -> Result<DistributionParams>
where
    R: Rng,
    F: FnMut(u64, &ArchSample) -> Result<f64>,
    G: FnMut(&ArchSample) -> u128,
    H: FnMut(&DistributionParams, &IterRecord) -> Result<()>,
{
    for _ in 0..iterations {
        let t = state.t;
        let samples = params.sample_n(rng, 2);
        let objectives = vec![objective(t, &samples[0])?, objective(t, &samples[1])?];
        let (next, outcome) = step(state, &params, floor, &samples, &objectives)?;
        params = next;
        let record = IterRecord {
            t,
            objectives,
            utilities: outcome.utilities,
            eps_theta: outcome.eps_theta,
            delta: state.delta,
            gamma: state.gamma,
            s_norm_sq: state.s_norm_sq(),
            most_likely_id: sample_id(&params.most_likely()),
        };
        on_iter(&params, &record)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn sample(categories: Vec<usize>) -> ArchSample {
        ArchSample { categories }
    }

    #[test]
    fn utilities_better_worse_and_ties() {
        assert_eq!(utilities(&[0.3, 0.7]).unwrap(), vec![2.0, -2.0]);
        assert_eq!(utilities(&[0.7, 0.3]).unwrap(), vec![-2.0, 2.0]);
        assert_eq!(utilities(&[0.5, 0.5]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(utilities(&[f64::NAN, 1.0]).unwrap(), vec![-2.0, 2.0]);
        assert_eq!(
            utilities(&[f64::INFINITY, f64::NAN]).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(utilities(&[1.0]).is_err());
    }

    #[test]
    fn theta_gradient_hand_case() {
        let p = DistributionParams::from_theta(vec![vec![0.5, 0.5]]).unwrap();
        let samples = [sample(vec![0]), sample(vec![1])];
        let g = theta_gradient(&samples, &[2.0, -2.0], &p);
        assert!(close(g[0][0], 1.0, 1e-15));
        assert!(close(g[0][1], -1.0, 1e-15));
    }

    #[test]
    fn theta_gradient_zero_cases() {
        let p = DistributionParams::from_theta(vec![vec![0.5, 0.5]]).unwrap();
        // Zero utilities.
        let samples = [sample(vec![0]), sample(vec![1])];
        let g = theta_gradient(&samples, &[0.0, 0.0], &p);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
        // Identical samples with opposite utilities cancel.
        let samples = [sample(vec![0]), sample(vec![0])];
        let g = theta_gradient(&samples, &[2.0, -2.0], &p);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn step_hand_trace_from_uniform_binary() {
        // Single dimension of two categories: delta_theta = 1,
        // beta = 1/sqrt(2), G = (1, -1), ||G||_F = 2, eps = 1/2,
        // pre-projection theta' = (1, 0).
        let p = DistributionParams::from_theta(vec![vec![0.5, 0.5]]).unwrap();
        let cfg = AsngConfig::default();
        let mut state = AsngState::new(&[2], &cfg);
        // Tiny fixed floor so the projected value is visible.
        let floor = ThetaFloor::fixed(1e-3, 1);
        let samples = [sample(vec![0]), sample(vec![1])];
        let (next, outcome) = step(&mut state, &p, &floor, &samples, &[0.1, 0.9]).unwrap();

        assert!(close(outcome.grad_fisher_norm, 2.0, 1e-12));
        assert!(close(outcome.eps_theta, 0.5, 1e-12));
        assert!(close(next.theta()[0][0], 1.0 - 1e-3, 1e-12));
        assert!(close(next.theta()[0][1], 1e-3, 1e-12));

        // gamma after one step: beta * (2 - beta) with beta = 1/sqrt(2).
        let beta = 1.0 / 2f64.sqrt();
        assert!(close(state.gamma, beta * (2.0 - beta), 1e-12));
        assert!(close(state.gamma, 0.9142, 5e-5));
        // s is the unit Fisher-normalized direction scaled by sqrt(beta(2-beta)).
        assert!(close(state.s_norm_sq(), state.gamma, 1e-12));
        assert_eq!(state.t, 1);
    }

    #[test]
    fn step_zero_gradient_advances_clock_only() {
        let p = DistributionParams::from_theta(vec![vec![0.5, 0.5]]).unwrap();
        let cfg = AsngConfig::default();
        let mut state = AsngState::new(&[2], &cfg);
        let floor = ThetaFloor::default_for(&[2]);
        let samples = [sample(vec![0]), sample(vec![1])];
        let delta_before = state.delta;
        let (next, outcome) = step(&mut state, &p, &floor, &samples, &[0.5, 0.5]).unwrap();
        assert!(outcome.degenerate);
        assert_eq!(next, p);
        assert_eq!(state.t, 1);
        assert!(state.s_norm_sq() == 0.0);
        assert!(state.gamma > 0.0);
        assert!(state.delta != delta_before); // gamma moved, so Delta does too
    }

    #[test]
    fn step_is_deterministic_in_its_inputs() {
        let p = DistributionParams::uniform(&[3, 4]);
        let cfg = AsngConfig::default();
        let floor = ThetaFloor::default_for(&[3, 4]);
        let samples = [sample(vec![0, 2]), sample(vec![1, 1])];
        let objectives = [0.2, 0.8];

        let mut s1 = AsngState::new(&[3, 4], &cfg);
        let mut s2 = AsngState::new(&[3, 4], &cfg);
        let (n1, o1) = step(&mut s1, &p, &floor, &samples, &objectives).unwrap();
        let (n2, o2) = step(&mut s2, &p, &floor, &samples, &objectives).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(o1, o2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn repeated_preference_concentrates_mass_monotonically() {
        // Utilities always favor category 0: its mass never decreases until
        // the floor binds elsewhere.
        // The default 1/(D*K) floor would pin a single-dimension distribution
        // at uniform, so use an explicit small floor here.
        let dims = [3usize];
        let cfg = AsngConfig::default();
        let mut state = AsngState::new(&dims, &cfg);
        let floor = ThetaFloor::fixed(0.02, 1);
        let mut params = DistributionParams::uniform(&dims);
        let mut mass = params.theta()[0][0];
        for _ in 0..200 {
            let samples = [sample(vec![0]), sample(vec![1])];
            let (next, _) = step(&mut state, &params, &floor, &samples, &[0.0, 1.0]).unwrap();
            params = next;
            let m = params.theta()[0][0];
            assert!(m >= mass - 1e-12, "mass decreased: {m} < {mass}");
            mass = m;
        }
        assert!(mass > 0.8, "final mass {mass}");
    }

    #[test]
    fn delta_stays_in_range_and_s_tracks_gamma() {
        // Random utilities and samples; check the invariants that the trust
        // region stays in (0, delta_max] and ||s||^2 stays within a small
        // constant multiple of gamma.
        let dims = [3usize, 4, 2];
        let cfg = AsngConfig::default();
        let mut state = AsngState::new(&dims, &cfg);
        let floor = ThetaFloor::default_for(&dims);
        let mut params = DistributionParams::uniform(&dims);
        let mut rng = rng::stream(31, "invariants", 0);

        for _ in 0..10_000 {
            let samples = params.sample_n(&mut rng, 2);
            let objectives = [rng.random::<f64>(), rng.random::<f64>()];
            let (next, _) = step(&mut state, &params, &floor, &samples, &objectives).unwrap();
            params = next;
            assert!(state.delta > 0.0 && state.delta <= cfg.delta_max);
            assert!(state.gamma >= 0.0 && state.gamma <= 1.0 + 1e-12);
            assert!(state.s_norm_sq() <= 4.0 * state.gamma.max(1e-12));
            for row in params.theta() {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn run_update_zero_budget_returns_input() {
        let dims = [3usize, 3];
        let cfg = AsngConfig::default();
        let mut state = AsngState::new(&dims, &cfg);
        let floor = ThetaFloor::default_for(&dims);
        let params = DistributionParams::uniform(&dims);
        let mut rng = rng::stream(1, "budget", 0);
        let out = run_distribution_update(
            params.clone(),
            &mut state,
            &floor,
            0,
            &mut rng,
            |_, _| Ok(0.0),
            |_| 0,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(out, params);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn run_update_constant_objective_stays_near_uniform() {
        let dims = [3usize, 4];
        let cfg = AsngConfig::default();
        let mut state = AsngState::new(&dims, &cfg);
        let floor = ThetaFloor::default_for(&dims);
        let params = DistributionParams::uniform(&dims);
        let mut rng = rng::stream(2, "const", 0);
        let out = run_distribution_update(
            params,
            &mut state,
            &floor,
            500,
            &mut rng,
            |_, _| Ok(1.0),
            |_| 0,
            |_, _| Ok(()),
        )
        .unwrap();
        // All utility pairs tie; theta never moves.
        for (row, &k) in out.theta().iter().zip(dims.iter()) {
            for &v in row {
                assert!(close(v, 1.0 / k as f64, 1e-12));
            }
        }
    }

    #[test]
    fn run_update_propagates_evaluator_failure() {
        let dims = [3usize];
        let cfg = AsngConfig::default();
        let mut state = AsngState::new(&dims, &cfg);
        let floor = ThetaFloor::default_for(&dims);
        let params = DistributionParams::uniform(&dims);
        let mut rng = rng::stream(3, "fail", 0);
        let mut seen = 0u64;
        let result = run_distribution_update(
            params,
            &mut state,
            &floor,
            100,
            &mut rng,
            |t, _| {
                if t >= 5 {
                    Err(crate::Error::Eval("surrogate exploded".into()))
                } else {
                    Ok(1.0)
                }
            },
            |_| 0,
            |_, record| {
                seen = record.t + 1;
                Ok(())
            },
        );
        assert!(result.is_err());
        assert_eq!(seen, 5); // five complete iterations were observed
    }

    #[test]
    fn finds_optimum_on_separable_toy_objective() {
        // Minimize the number of dimensions that disagree with a target.
        let dims = [4usize, 4, 4, 5];
        let target = [1usize, 3, 0, 2];
        let cfg = AsngConfig::default();
        let floor = ThetaFloor::default_for(&dims);
        let mut hits = 0;
        for seed in 0..10 {
            let mut state = AsngState::new(&dims, &cfg);
            let mut rng = rng::stream(seed, "toy-opt", 0);
            let out = run_distribution_update(
                DistributionParams::uniform(&dims),
                &mut state,
                &floor,
                600,
                &mut rng,
                |_, s| {
                    Ok(s.categories
                        .iter()
                        .zip(&target)
                        .filter(|(c, t)| c != t)
                        .count() as f64)
                },
                |_| 0,
                |_, _| Ok(()),
            )
            .unwrap();
            if out.most_likely().categories == target {
                hits += 1;
            }
        }
        assert!(hits >= 9, "converged in {hits}/10 runs");
    }
}
