//! Product-of-categoricals search distribution.
//!
//! Each dimension d holds a probability vector theta_d over K_d categories;
//! the joint distribution factorizes, so sampling, argmax extraction, and
//! the natural gradient all decompose per dimension. The Fisher metric used
//! throughout is diag(1/theta) over the full redundant parameterization,
//! under which the natural gradient of the log-likelihood is `a - theta`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::ArchSample;

/// Parameter vectors shaped like theta: one `Vec<f64>` per dimension.
pub type ParamVec = Vec<Vec<f64>>;

/// Categorical parameters on a product of simplices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionParams {
    theta: ParamVec,
}

impl DistributionParams {
    /// Uniform initialization: theta_{d,k} = 1/K_d.
    pub fn uniform(dims: &[usize]) -> DistributionParams {
        DistributionParams {
            theta: dims.iter().map(|&k| vec![1.0 / k as f64; k]).collect(),
        }
    }

    /// Wrap explicit parameters, checking each dimension sums to 1.
    pub fn from_theta(theta: ParamVec) -> Result<DistributionParams> {
        for (d, row) in theta.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::InvalidConfig {
                    field: format!("theta[{d}]"),
                    message: "empty dimension".into(),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidConfig {
                    field: format!("theta[{d}]"),
                    message: format!("sums to {sum}, expected 1"),
                });
            }
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidConfig {
                    field: format!("theta[{d}]"),
                    message: "entries outside [0, 1]".into(),
                });
            }
        }
        Ok(DistributionParams { theta })
    }

    /// Wrap mid-update values that may transiently violate the simplex
    /// constraints; callers must project before the values escape.
    pub(crate) fn from_raw(theta: ParamVec) -> DistributionParams {
        DistributionParams { theta }
    }

    pub fn theta(&self) -> &ParamVec {
        &self.theta
    }

    pub fn dims(&self) -> Vec<usize> {
        self.theta.iter().map(Vec::len).collect()
    }

    pub fn num_dims(&self) -> usize {
        self.theta.len()
    }

    /// Total parameter count over the redundant parameterization.
    pub fn n_params(&self) -> usize {
        self.theta.iter().map(Vec::len).sum()
    }

    /// Draw one joint sample; each dimension is drawn independently from its
    /// categorical. Deterministic under a fixed RNG state.
    pub fn sample(&self, rng: &mut impl Rng) -> ArchSample {
        let categories = self
            .theta
            .iter()
            .map(|row| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return k;
                    }
                }
                row.len() - 1 // numeric residue
            })
            .collect();
        ArchSample { categories }
    }

    pub fn sample_n(&self, rng: &mut impl Rng, count: usize) -> Vec<ArchSample> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    /// Per-dimension argmax; the product structure makes the joint argmax
    /// separable. Ties break to the lowest category index.
    pub fn most_likely(&self) -> ArchSample {
        let categories = self
            .theta
            .iter()
            .map(|row| {
                let mut best = 0;
                for (k, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        ArchSample { categories }
    }

    pub fn log_prob(&self, sample: &ArchSample) -> f64 {
        sample
            .categories
            .iter()
            .zip(&self.theta)
            .map(|(&c, row)| row[c].ln())
            .sum()
    }
}

/// Natural gradient of `log P_theta(a)` under the categorical family:
/// `a - theta`, dimension-wise.
pub fn nat_grad_log(sample: &ArchSample, params: &DistributionParams) -> ParamVec {
    sample
        .categories
        .iter()
        .zip(params.theta())
        .map(|(&c, row)| {
            row.iter()
                .enumerate()
                .map(|(k, &t)| if k == c { 1.0 - t } else { -t })
                .collect()
        })
        .collect()
}

/// Fisher norm of a parameter-shaped vector:
/// `sqrt(sum_{d,k} g_{d,k}^2 / theta_{d,k})`.
///
/// A zero return signals a degenerate gradient; callers skip the step.
pub fn fisher_norm(grad: &ParamVec, params: &DistributionParams) -> f64 {
    let mut acc = 0.0;
    for (g_row, t_row) in grad.iter().zip(params.theta()) {
        for (&g, &t) in g_row.iter().zip(t_row) {
            acc += g * g / t;
        }
    }
    acc.sqrt()
}

/// Apply F(theta)^{1/2} entrywise: `g_{d,k} / sqrt(theta_{d,k})`. The L2 norm
/// of the result equals `fisher_norm(grad, params)`.
pub fn fisher_sqrt_apply(grad: &ParamVec, params: &DistributionParams) -> ParamVec {
    grad.iter()
        .zip(params.theta())
        .map(|(g_row, t_row)| {
            g_row
                .iter()
                .zip(t_row)
                .map(|(&g, &t)| g / t.sqrt())
                .collect()
        })
        .collect()
}

/// Per-dimension lower bounds on theta entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaFloor {
    floors: Vec<f64>,
}

impl ThetaFloor {
    /// Default floor 1/(D * K_d): every category remains reachable while the
    /// distribution can still concentrate.
    pub fn default_for(dims: &[usize]) -> ThetaFloor {
        let d = dims.len() as f64;
        ThetaFloor {
            floors: dims.iter().map(|&k| 1.0 / (d * k as f64)).collect(),
        }
    }

    /// The same floor value for every dimension.
    pub fn fixed(value: f64, num_dims: usize) -> ThetaFloor {
        ThetaFloor {
            floors: vec![value; num_dims],
        }
    }

    pub fn floor(&self, dim: usize) -> f64 {
        self.floors[dim]
    }

    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        if self.floors.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: dims.len(),
                got: self.floors.len(),
            });
        }
        for (d, (&f, &k)) in self.floors.iter().zip(dims).enumerate() {
            if !(0.0..1.0).contains(&f) || (k as f64) * f > 1.0 + 1e-15 {
                return Err(Error::InvalidConfig {
                    field: format!("theta_min[{d}]"),
                    message: format!("floor {f} infeasible for {k} categories"),
                });
            }
        }
        Ok(())
    }
}

/// Project parameters onto the feasible set: every entry at least the
/// dimension floor and every dimension summing to 1.
///
/// Per dimension: entries at or below the floor are fixed there and the
/// remaining mass is distributed over the free entries proportionally, then
/// re-checked until no new entry violates the floor. The procedure is
/// deterministic and idempotent.
pub fn project(params: &DistributionParams, floor: &ThetaFloor) -> Result<DistributionParams> {
    floor.validate(&params.dims())?;
    let theta = params
        .theta()
        .iter()
        .enumerate()
        .map(|(d, row)| project_dim(row, floor.floor(d)))
        .collect();
    Ok(DistributionParams { theta })
}

fn project_dim(row: &[f64], floor: f64) -> Vec<f64> {
    let k = row.len();
    let mut out = row.to_vec();
    let mut fixed = vec![false; k];
    loop {
        let mut num_fixed = 0usize;
        let mut free_sum = 0.0;
        for i in 0..k {
            if fixed[i] {
                num_fixed += 1;
            } else {
                free_sum += out[i];
            }
        }
        if num_fixed == k {
            return out;
        }
        let target = 1.0 - num_fixed as f64 * floor;
        if free_sum <= 0.0 || target <= 0.0 {
            // Degenerate input: spread the remaining mass evenly. Feasibility
            // (K * floor <= 1) guarantees the even share respects the floor.
            let share = target.max(0.0) / (k - num_fixed) as f64;
            for i in 0..k {
                if !fixed[i] {
                    out[i] = share.max(floor);
                }
            }
            return out;
        }
        let scale = target / free_sum;
        let mut newly_fixed = false;
        for i in 0..k {
            if !fixed[i] && out[i] * scale < floor {
                out[i] = floor;
                fixed[i] = true;
                newly_fixed = true;
            }
        }
        if !newly_fixed {
            for i in 0..k {
                if !fixed[i] {
                    out[i] *= scale;
                }
            }
            return out;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_init_per_dimension() {
        let p = DistributionParams::uniform(&[9, 23, 3]);
        for &v in &p.theta()[0] {
            assert!(close(v, 1.0 / 9.0, 1e-15));
        }
        for &v in &p.theta()[1] {
            assert!(close(v, 1.0 / 23.0, 1e-15));
        }
        for row in p.theta() {
            assert!(close(row.iter().sum::<f64>(), 1.0, 1e-12));
        }
        assert_eq!(p.n_params(), 9 + 23 + 3);
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let p = DistributionParams::uniform(&[4, 3, 5]);
        let a = p.sample_n(&mut rng::stream(7, "s", 0), 32);
        let b = p.sample_n(&mut rng::stream(7, "s", 0), 32);
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_matches_concentrated_mass() {
        let p = DistributionParams::from_theta(vec![vec![0.001, 0.998, 0.001]]).unwrap();
        let mut rng = rng::stream(3, "conc", 0);
        let hits = p
            .sample_n(&mut rng, 4000)
            .iter()
            .filter(|s| s.categories[0] == 1)
            .count();
        assert!(hits > 3960, "hits {hits}");
    }

    #[test]
    fn sampling_frequencies_near_uniform() {
        // 1e5 draws per dimension; empirical frequencies within 3 sigma of
        // the binomial bound around 1/K.
        let dims = [4usize, 7];
        let p = DistributionParams::uniform(&dims);
        let n = 100_000;
        let mut rng = rng::stream(11, "freq", 0);
        let samples = p.sample_n(&mut rng, n);
        for (d, &k) in dims.iter().enumerate() {
            let q = 1.0 / k as f64;
            let sigma = (q * (1.0 - q) / n as f64).sqrt();
            for cat in 0..k {
                let count = samples.iter().filter(|s| s.categories[d] == cat).count();
                let freq = count as f64 / n as f64;
                assert!(
                    (freq - q).abs() <= 3.0 * sigma,
                    "dim {d} cat {cat}: freq {freq} vs {q} (sigma {sigma})"
                );
            }
        }
    }

    #[test]
    fn most_likely_and_ties() {
        let p = DistributionParams::from_theta(vec![
            vec![0.7, 0.2, 0.1],
            vec![0.5, 0.5],
            vec![0.1, 0.2, 0.7],
        ])
        .unwrap();
        let a = p.most_likely();
        assert_eq!(a.categories, vec![0, 0, 2]);
    }

    #[test]
    fn most_likely_invariant_to_monotone_rescale() {
        // Argmax is unchanged by a positive scale applied within a dimension
        // (renormalized back onto the simplex).
        let base = vec![0.5, 0.3, 0.2];
        let p = DistributionParams::from_theta(vec![base.clone()]).unwrap();
        let scaled: Vec<f64> = base.iter().map(|v| v * 3.0).collect();
        let sum: f64 = scaled.iter().sum();
        let renorm: Vec<f64> = scaled.iter().map(|v| v / sum).collect();
        let q = DistributionParams::from_theta(vec![renorm]).unwrap();
        assert_eq!(p.most_likely(), q.most_likely());
    }

    #[test]
    fn nat_grad_log_direct_cases() {
        let p = DistributionParams::from_theta(vec![vec![1.0 / 3.0; 3]]).unwrap();
        let a = ArchSample {
            categories: vec![0],
        };
        let g = nat_grad_log(&a, &p);
        assert!(close(g[0][0], 2.0 / 3.0, 1e-15));
        assert!(close(g[0][1], -1.0 / 3.0, 1e-15));
        assert!(close(g[0][2], -1.0 / 3.0, 1e-15));
    }

    #[test]
    fn nat_grad_log_zero_at_delta_mass() {
        // With (near) all mass on one category, sampling it yields a
        // (near) zero vector.
        let p = DistributionParams::from_theta(vec![vec![1.0, 0.0]]).unwrap();
        let a = p.most_likely();
        let g = nat_grad_log(&a, &p);
        assert!(g[0].iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn nat_grad_log_mean_is_zero_under_the_distribution() {
        // Monte-Carlo: the expectation of a - theta is zero.
        let p = DistributionParams::from_theta(vec![
            vec![0.2, 0.3, 0.5],
            vec![0.6, 0.4],
        ])
        .unwrap();
        let n = 100_000;
        let mut rng = rng::stream(5, "mean", 0);
        let mut acc: ParamVec = p.theta().iter().map(|r| vec![0.0; r.len()]).collect();
        for _ in 0..n {
            let a = p.sample(&mut rng);
            let g = nat_grad_log(&a, &p);
            for (acc_row, g_row) in acc.iter_mut().zip(&g) {
                for (s, &v) in acc_row.iter_mut().zip(g_row) {
                    *s += v;
                }
            }
        }
        let max = acc
            .iter()
            .flatten()
            .map(|v| (v / n as f64).abs())
            .fold(0.0, f64::max);
        assert!(max <= 5e-3, "max |mean| {max}");
    }

    /// Finite-difference oracle for the natural gradient identity: the plain
    /// gradient of log P is computed by central differences, preconditioned
    /// by the inverse metric diag(theta), and projected onto the simplex
    /// tangent space under the diag(1/theta) inner product.
    pub(crate) fn nat_grad_fd_oracle(sample: &ArchSample, params: &DistributionParams) -> ParamVec {
        let h = 1e-5;
        params
            .theta()
            .iter()
            .enumerate()
            .map(|(d, row)| {
                let c = sample.categories[d];
                let log_p = |theta_k: &[f64]| -> f64 { theta_k[c].ln() };
                let mut grad: Vec<f64> = (0..row.len())
                    .map(|k| {
                        let mut plus = row.clone();
                        let mut minus = row.clone();
                        plus[k] += h;
                        minus[k] -= h;
                        (log_p(&plus) - log_p(&minus)) / (2.0 * h)
                    })
                    .collect();
                // Inverse metric, then Fisher-orthogonal projection onto
                // the zero-sum tangent space: v = u - (sum u) * theta.
                for (g, &t) in grad.iter_mut().zip(row) {
                    *g *= t;
                }
                let total: f64 = grad.iter().sum();
                grad.iter()
                    .zip(row)
                    .map(|(&u, &t)| u - total * t)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn nat_grad_matches_finite_difference_oracle() {
        let mut rng = rng::stream(17, "fd", 0);
        for _ in 0..25 {
            let k = 2 + (rng.random::<u32>() % 4) as usize;
            let mut row: Vec<f64> = (0..k).map(|_| 0.05 + rng.random::<f64>()).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
            let p = DistributionParams::from_theta(vec![row]).unwrap();
            let a = p.sample(&mut rng);
            let exact = nat_grad_log(&a, &p);
            let oracle = nat_grad_fd_oracle(&a, &p);
            for (e_row, o_row) in exact.iter().zip(&oracle) {
                for (&e, &o) in e_row.iter().zip(o_row) {
                    let rel = (e - o).abs() / e.abs().max(1e-3);
                    assert!(rel <= 1e-6, "exact {e} vs oracle {o}");
                }
            }
        }
    }

    #[test]
    fn fisher_norm_cases() {
        let p = DistributionParams::uniform(&[4]);
        let g = vec![vec![0.0; 4]];
        assert_eq!(fisher_norm(&g, &p), 0.0);

        // Uniform theta = 1/K: the metric is constant K, so the Fisher norm
        // is sqrt(K) times the L2 norm.
        let g = vec![vec![0.3, -0.1, 0.2, -0.4]];
        let l2: f64 = g[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(close(fisher_norm(&g, &p), 2.0 * l2, 1e-12));
    }

    #[test]
    fn fisher_norm_matches_dense_quadratic_form() {
        // g' F g with F = diag(1/theta) assembled as an explicit matrix.
        let mut rng = rng::stream(23, "quad", 0);
        for _ in 0..20 {
            let k = 2 + (rng.random::<u32>() % 5) as usize;
            let mut row: Vec<f64> = (0..k).map(|_| 0.1 + rng.random::<f64>()).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
            let g: Vec<f64> = (0..k).map(|_| rng.random::<f64>() - 0.5).collect();

            let mut f = vec![vec![0.0; k]; k];
            for i in 0..k {
                f[i][i] = 1.0 / row[i];
            }
            let mut quad = 0.0;
            for i in 0..k {
                for j in 0..k {
                    quad += g[i] * f[i][j] * g[j];
                }
            }
            let p = DistributionParams::from_theta(vec![row]).unwrap();
            let norm = fisher_norm(&vec![g.clone()], &p);
            assert!(close(norm * norm, quad, 1e-12 * quad.max(1.0)));
        }
    }

    #[test]
    fn fisher_sqrt_scales_uniform_quarter_by_two() {
        let p = DistributionParams::uniform(&[4]);
        let g = vec![vec![0.5, -0.25, 0.0, 0.125]];
        let y = fisher_sqrt_apply(&g, &p);
        for (a, b) in y[0].iter().zip(&g[0]) {
            assert!(close(*a, 2.0 * b, 1e-15));
        }
    }

    #[test]
    fn fisher_sqrt_norm_consistency_and_dense_oracle() {
        let mut rng = rng::stream(29, "sqrt", 0);
        for _ in 0..20 {
            let k = 2 + (rng.random::<u32>() % 5) as usize;
            let mut row: Vec<f64> = (0..k).map(|_| 0.1 + rng.random::<f64>()).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
            let g: Vec<f64> = (0..k).map(|_| rng.random::<f64>() - 0.5).collect();
            let p = DistributionParams::from_theta(vec![row.clone()]).unwrap();

            let y = fisher_sqrt_apply(&vec![g.clone()], &p);
            let l2: f64 = y[0].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(close(l2, fisher_norm(&vec![g.clone()], &p), 1e-12));

            // Dense square-root matrix of diag(1/theta) applied explicitly.
            let mut s = vec![vec![0.0; k]; k];
            for i in 0..k {
                s[i][i] = (1.0 / row[i]).sqrt();
            }
            for i in 0..k {
                let dense: f64 = (0..k).map(|j| s[i][j] * g[j]).sum();
                assert!(close(dense, y[0][i], 1e-10));
            }
        }
    }

    #[test]
    fn project_leaves_feasible_input_unchanged() {
        let p = DistributionParams::from_theta(vec![vec![0.5, 0.3, 0.2]]).unwrap();
        let floor = ThetaFloor::fixed(0.05, 1);
        let q = project(&p, &floor).unwrap();
        assert_eq!(p, q);
        // Idempotence on already-projected values.
        assert_eq!(project(&q, &floor).unwrap(), q);
    }

    #[test]
    fn project_clips_and_renormalizes_hand_case() {
        let raw = DistributionParams {
            theta: vec![vec![1.05, -0.05]],
        };
        let floor = ThetaFloor::fixed(0.01, 1);
        let q = project(&raw, &floor).unwrap();
        assert!(close(q.theta()[0][0], 0.99, 1e-12));
        assert!(close(q.theta()[0][1], 0.01, 1e-12));
    }

    #[test]
    fn project_rejects_infeasible_floor() {
        let p = DistributionParams::uniform(&[3]);
        let floor = ThetaFloor::fixed(0.4, 1);
        assert!(project(&p, &floor).is_err());
    }

    #[test]
    fn default_floor_rule() {
        let floor = ThetaFloor::default_for(&[3, 3, 5]);
        assert!(close(floor.floor(0), 1.0 / 9.0, 1e-15));
        assert!(close(floor.floor(2), 1.0 / 15.0, 1e-15));
        floor.validate(&[3, 3, 5]).unwrap();
    }

    proptest! {
        #[test]
        fn project_output_is_a_floored_probability_vector(
            values in proptest::collection::vec(-0.5f64..1.5, 2..8),
            floor_scale in 0.0f64..0.9,
        ) {
            let k = values.len();
            let floor_value = floor_scale / k as f64;
            let raw = DistributionParams { theta: vec![values] };
            let floor = ThetaFloor::fixed(floor_value, 1);
            let q = project(&raw, &floor).unwrap();
            let row = &q.theta()[0];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for &v in row {
                prop_assert!(v >= floor_value - 1e-15);
            }
            // Idempotent.
            let q2 = project(&q, &floor).unwrap();
            for (a, b) in q2.theta()[0].iter().zip(row) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn sample_ids_valid_under_any_theta(
            seed in 0u64..1000,
        ) {
            let p = DistributionParams::uniform(&[3, 4, 5]);
            let mut r = rng::stream(seed, "prop", 0);
            let s = p.sample(&mut r);
            prop_assert!(s.categories[0] < 3);
            prop_assert!(s.categories[1] < 4);
            prop_assert!(s.categories[2] < 5);
        }
    }
}
