//! The two anisotropic norm scales with power weights:
//!
//! ```text
//! ‖w^μ f‖_{p,q}   = ( ∫_I ( ∫_Ω |w(x)^μ f|^p dx )^{q/p} dt )^{1/q}    (time-outer)
//! |||w^μ f|||_{p,q} = ( ∫_Ω w(x)^{μp} ( ∫_I |f|^q dt )^{p/q} dx )^{1/p}  (space-outer)
//! ```
//!
//! computed by midpoint quadrature on cell-centered sampled fields. The
//! weight is evaluated at cell centers, so negative μ never touches the wall
//! itself. Every norm carries a two-level Richardson error estimate; norms
//! without error bars are not comparable across μ sweeps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::SampledField;
use crate::quad::pairwise_sum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormError {
    #[error("weight singularity unresolved: mu*p = {mu_p} <= -1 with mass in the first off-wall cell (norm divergent)")]
    UnresolvedWeightSingularity { mu_p: f64 },
    #[error("denominator norm is zero or vanishing")]
    DegenerateDenominator,
    #[error("fields must share one grid")]
    GridMismatch,
    #[error("invalid exponent: p and q must lie in (1, inf), got p={p}, q={q}")]
    BadExponents { p: f64, q: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nesting {
    TimeOuter,
    SpaceOuter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    None,
    /// distance to the wall x_n = 0, i.e. the last spatial coordinate
    Xn,
    /// distance to the boundary of a bounded domain, supplied as a closure
    Distance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedNormSpec {
    pub p: f64,
    pub q: f64,
    pub mu: f64,
    pub nesting: Nesting,
    pub weight: WeightKind,
}

impl WeightedNormSpec {
    pub fn unweighted(p: f64, q: f64, nesting: Nesting) -> Self {
        WeightedNormSpec {
            p,
            q,
            mu: 0.0,
            nesting,
            weight: WeightKind::None,
        }
    }

    pub fn validate(&self) -> Result<(), NormError> {
        if !(self.p > 1.0 && self.p.is_finite() && self.q > 1.0 && self.q.is_finite()) {
            return Err(NormError::BadExponents { p: self.p, q: self.q });
        }
        Ok(())
    }

    /// μ ∈ (−1/p, 1−1/p), the admissible range for the half-space oblique
    /// problem. Values outside are allowed but flagged.
    pub fn in_admissible_range(&self) -> bool {
        self.mu > -1.0 / self.p && self.mu < 1.0 - 1.0 / self.p
    }
}

/// A computed norm with its two-level quadrature error estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormValue {
    pub value: f64,
    pub error: f64,
    pub spec: WeightedNormSpec,
}

/// Weight evaluator used at cell centers.
pub enum WeightModel<'a> {
    None,
    Xn,
    Distance(&'a dyn Fn(&[f64]) -> f64),
}

impl WeightModel<'_> {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            WeightModel::None => 1.0,
            WeightModel::Xn => *x.last().unwrap(),
            WeightModel::Distance(d) => d(x),
        }
    }

    fn present(&self) -> bool {
        !matches!(self, WeightModel::None)
    }
}

/// `‖w^μ f‖_{p,q}` (time-outer) or `|||w^μ f|||_{p,q}` (space-outer) per
/// `spec.nesting`, with a Richardson error estimate from one coarsening.
pub fn weighted_norm(
    field: &SampledField,
    spec: &WeightedNormSpec,
    weight: &WeightModel,
) -> Result<NormValue, NormError> {
    spec.validate()?;
    guard_weight_singularity(field, spec, weight)?;
    let fine = norm_on_grid(field, spec, weight);
    let coarse = norm_on_grid(&field.coarsened(), spec, weight);
    // Midpoint quadrature is second order; Richardson factor 1/3.
    let error = (fine - coarse).abs() / 3.0;
    Ok(NormValue {
        value: fine,
        error,
        spec: *spec,
    })
}

/// Time-outer nesting: `‖w^μ f‖_{p,q}`.
pub fn norm_time_outer(
    field: &SampledField,
    spec: &WeightedNormSpec,
    weight: &WeightModel,
) -> Result<NormValue, NormError> {
    let spec = WeightedNormSpec {
        nesting: Nesting::TimeOuter,
        ..*spec
    };
    weighted_norm(field, &spec, weight)
}

/// Space-outer nesting: `|||w^μ f|||_{p,q}`.
pub fn norm_space_outer(
    field: &SampledField,
    spec: &WeightedNormSpec,
    weight: &WeightModel,
) -> Result<NormValue, NormError> {
    let spec = WeightedNormSpec {
        nesting: Nesting::SpaceOuter,
        ..*spec
    };
    weighted_norm(field, &spec, weight)
}

fn guard_weight_singularity(
    field: &SampledField,
    spec: &WeightedNormSpec,
    weight: &WeightModel,
) -> Result<(), NormError> {
    let mu_p = spec.mu * spec.p;
    if !weight.present() || mu_p > -1.0 {
        return Ok(());
    }
    // divergent unless the field vanishes on the cells nearest the wall
    let grid = &field.grid;
    let nspace = grid.ncells_space();
    let mut wmin = f64::INFINITY;
    let mut weights = Vec::with_capacity(nspace);
    for ix in 0..nspace {
        let w = weight.eval(&grid.space_center(ix));
        wmin = wmin.min(w);
        weights.push(w);
    }
    let layer = 1.5 * wmin;
    for it in 0..grid.time.ncells() {
        for ix in 0..nspace {
            if weights[ix] <= layer && field.value(it, ix) != 0.0 {
                return Err(NormError::UnresolvedWeightSingularity { mu_p });
            }
        }
    }
    Ok(())
}

fn norm_on_grid(field: &SampledField, spec: &WeightedNormSpec, weight: &WeightModel) -> f64 {
    let grid = &field.grid;
    let nspace = grid.ncells_space();
    let ntime = grid.time.ncells();
    let (p, q) = (spec.p, spec.q);

    let wpow: Vec<f64> = (0..nspace)
        .map(|ix| {
            let w = weight.eval(&grid.space_center(ix));
            if spec.mu == 0.0 || !weight.present() {
                1.0
            } else {
                w.powf(spec.mu * p)
            }
        })
        .collect();
    let vols: Vec<f64> = (0..nspace).map(|ix| grid.cell_volume(ix)).collect();

    match spec.nesting {
        Nesting::TimeOuter => {
            // ( Σ_t Δt ( Σ_x vol · w^{μp} |f|^p )^{q/p} )^{1/q}
            let per_t: Vec<f64> = (0..ntime)
                .map(|it| {
                    let inner: Vec<f64> = (0..nspace)
                        .map(|ix| vols[ix] * wpow[ix] * field.value(it, ix).abs().powf(p))
                        .collect();
                    grid.time.width(it) * pairwise_sum(&inner).powf(q / p)
                })
                .collect();
            pairwise_sum(&per_t).powf(1.0 / q)
        }
        Nesting::SpaceOuter => {
            // ( Σ_x vol · w^{μp} ( Σ_t Δt |f|^q )^{p/q} )^{1/p}
            let per_x: Vec<f64> = (0..nspace)
                .map(|ix| {
                    let inner: Vec<f64> = (0..ntime)
                        .map(|it| grid.time.width(it) * field.value(it, ix).abs().powf(q))
                        .collect();
                    vols[ix] * wpow[ix] * pairwise_sum(&inner).powf(p / q)
                })
                .collect();
            pairwise_sum(&per_x).powf(1.0 / p)
        }
    }
}

/// Coercive ratio `(‖w^μ ∂_t u‖ + Σ_{ij} ‖w^μ D_iD_j u‖) / ‖w^μ f‖` in the
/// scale selected by `spec`. `second` lists `(i, j, field)` for i ≤ j;
/// off-diagonal entries are counted twice, matching the sum over ordered
/// pairs. Errors are propagated to first order.
pub fn coercive_ratio(
    second: &[(usize, usize, &SampledField)],
    u_t: &SampledField,
    f: &SampledField,
    spec: &WeightedNormSpec,
    weight: &WeightModel,
) -> Result<RatioValue, NormError> {
    for (_, _, d2) in second {
        if d2.grid != u_t.grid || d2.grid != f.grid {
            return Err(NormError::GridMismatch);
        }
    }
    let den = weighted_norm(f, spec, weight)?;
    if den.value <= 0.0 || !den.value.is_finite() {
        return Err(NormError::DegenerateDenominator);
    }
    let mut num = 0.0;
    let mut num_err = 0.0;
    let ut_norm = weighted_norm(u_t, spec, weight)?;
    num += ut_norm.value;
    num_err += ut_norm.error;
    for (i, j, d2) in second {
        let mult = if i == j { 1.0 } else { 2.0 };
        let nv = weighted_norm(d2, spec, weight)?;
        num += mult * nv.value;
        num_err += mult * nv.error;
    }
    let ratio = num / den.value;
    let error = num_err / den.value + ratio * den.error / den.value;
    Ok(RatioValue { ratio, error })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RatioValue {
    pub ratio: f64,
    pub error: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Axis, Grid, SampledField};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_grid(nx: usize, nt: usize) -> Grid {
        Grid {
            space: vec![Axis::uniform(0.0, 1.0, nx)],
            time: Axis::uniform(0.0, 1.0, nt),
        }
    }

    fn spec(p: f64, q: f64, mu: f64, nesting: Nesting, weight: WeightKind) -> WeightedNormSpec {
        WeightedNormSpec {
            p,
            q,
            mu,
            nesting,
            weight,
        }
    }

    #[test]
    fn constant_field_has_unit_norm() {
        let f = SampledField::sample(unit_grid(8, 8), "f", |_, _| 1.0);
        for nesting in [Nesting::TimeOuter, Nesting::SpaceOuter] {
            let nv = weighted_norm(
                &f,
                &spec(2.0, 3.0, 0.0, nesting, WeightKind::None),
                &WeightModel::None,
            )
            .unwrap();
            assert_relative_eq!(nv.value, 1.0, max_relative = 1e-13);
        }
    }

    #[test]
    fn weighted_constant_matches_closed_form() {
        // ‖x^{0.25}·1‖ with p = 2: ( ∫_0^1 x^{0.5} dx )^{1/2} = sqrt(2/3).
        let f = SampledField::sample(unit_grid(256, 4), "f", |_, _| 1.0);
        let nv = weighted_norm(
            &f,
            &spec(2.0, 2.5, 0.25, Nesting::TimeOuter, WeightKind::Xn),
            &WeightModel::Xn,
        )
        .unwrap();
        let exact = (2.0_f64 / 3.0).sqrt();
        assert!((nv.value - exact).abs() < 2e-4, "{} vs {}", nv.value, exact);
        assert!((nv.value - exact).abs() < 10.0 * nv.error.max(1e-6));
        assert!((exact - 0.8165).abs() < 1e-4);
    }

    #[test]
    fn separable_field_factorizes_in_space_outer() {
        // |||g(x)h(t)|||_{p,q} = ‖g‖_p · ‖h‖_q
        let (p, q) = (2.5, 1.8);
        let g = |x: f64| 1.0 + x * x;
        let h = |t: f64| (1.0 + t).sqrt();
        let f = SampledField::sample(unit_grid(64, 64), "f", |x, t| g(x[0]) * h(t));
        let nv = weighted_norm(
            &f,
            &spec(p, q, 0.0, Nesting::SpaceOuter, WeightKind::None),
            &WeightModel::None,
        )
        .unwrap();
        // 1-D midpoint oracles for ‖g‖_p and ‖h‖_q on the same resolution
        let gp: f64 = (0..64)
            .map(|i| g((i as f64 + 0.5) / 64.0).powf(p) / 64.0)
            .sum::<f64>()
            .powf(1.0 / p);
        let hq: f64 = (0..64)
            .map(|i| h((i as f64 + 0.5) / 64.0).powf(q) / 64.0)
            .sum::<f64>()
            .powf(1.0 / q);
        assert_relative_eq!(nv.value, gp * hq, max_relative = 1e-12);
    }

    #[test]
    fn minkowski_ordering_for_q_ge_p() {
        // Minkowski's integral inequality with exponent q/p ≥ 1 gives
        // |||f|||_{p,q} ≥ ‖f‖_{p,q}: a field concentrated on a diagonal makes
        // the gap strict (e.g. two unit cells at (x1,t1), (x2,t2)).
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let grid = unit_grid(6, 5);
            let vals: Vec<f64> = (0..grid.ncells()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let f = SampledField::new(grid, vals, "f").unwrap();
            let (p, q) = (2.0, 3.5);
            let tri = weighted_norm(
                &f,
                &spec(p, q, 0.0, Nesting::SpaceOuter, WeightKind::None),
                &WeightModel::None,
            )
            .unwrap();
            let pq = weighted_norm(
                &f,
                &spec(p, q, 0.0, Nesting::TimeOuter, WeightKind::None),
                &WeightModel::None,
            )
            .unwrap();
            assert!(tri.value >= pq.value * (1.0 - 1e-12));
        }
    }

    #[test]
    fn singularity_guard_fires_iff_mass_at_wall() {
        let ones = SampledField::sample(unit_grid(16, 4), "f", |_, _| 1.0);
        let err = weighted_norm(
            &ones,
            &spec(2.0, 2.0, -0.6, Nesting::TimeOuter, WeightKind::Xn),
            &WeightModel::Xn,
        );
        assert!(matches!(
            err,
            Err(NormError::UnresolvedWeightSingularity { .. })
        ));

        // Same μ but the field vanishes near the wall: fine.
        let off_wall = SampledField::sample(unit_grid(16, 4), "f", |x, _| {
            if x[0] > 0.5 {
                1.0
            } else {
                0.0
            }
        });
        assert!(weighted_norm(
            &off_wall,
            &spec(2.0, 2.0, -0.6, Nesting::TimeOuter, WeightKind::Xn),
            &WeightModel::Xn,
        )
        .is_ok());
    }

    #[test]
    fn divergence_sentinel_under_refinement() {
        // For f ≡ 1 the weighted norm diverges under refinement iff μp ≤ −1.
        // Probe the raw quadrature by baking the weight into the values.
        let seq = |mu: f64, p: f64| -> Vec<f64> {
            [16usize, 32, 64, 128, 256]
                .iter()
                .map(|&nx| {
                    let f = SampledField::sample(unit_grid(nx, 2), "f", |x, _| x[0].powf(mu));
                    weighted_norm(
                        &f,
                        &spec(p, p, 0.0, Nesting::TimeOuter, WeightKind::None),
                        &WeightModel::None,
                    )
                    .unwrap()
                    .value
                })
                .collect()
        };
        let diverging = seq(-0.6, 2.0); // μp = −1.2
        assert!(diverging.windows(2).all(|w| w[1] > w[0] * 1.05));
        let converging = seq(-0.4, 2.0); // μp = −0.8
        let last_jump = (converging[4] - converging[3]).abs() / converging[3];
        assert!(last_jump < 0.05, "jump {last_jump}");
    }

    #[test]
    fn coercive_ratio_scaling_and_degeneracy() {
        let grid = unit_grid(8, 4);
        let d2 = SampledField::sample(grid.clone(), "d2", |x, t| x[0] + t);
        let ut = SampledField::sample(grid.clone(), "ut", |x, t| x[0] * t);
        let f = SampledField::sample(grid.clone(), "f", |x, _| 1.0 + x[0]);
        let sp = spec(2.0, 2.0, 0.0, Nesting::TimeOuter, WeightKind::None);
        let r1 = coercive_ratio(&[(0, 0, &d2)], &ut, &f, &sp, &WeightModel::None).unwrap();
        let f2 = f.map(|v| 2.0 * v);
        let d2b = d2.map(|v| 2.0 * v);
        let utb = ut.map(|v| 2.0 * v);
        let r2 = coercive_ratio(&[(0, 0, &d2b)], &utb, &f2, &sp, &WeightModel::None).unwrap();
        assert_relative_eq!(r1.ratio, r2.ratio, max_relative = 1e-13);

        let zero = SampledField::sample(grid, "f", |_, _| 0.0);
        assert!(matches!(
            coercive_ratio(&[(0, 0, &d2)], &ut, &zero, &sp, &WeightModel::None),
            Err(NormError::DegenerateDenominator)
        ));
    }

    proptest! {
        #[test]
        fn homogeneity_and_pq_collapse(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let grid = unit_grid(5, 4);
            let vals: Vec<f64> = (0..grid.ncells()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = SampledField::new(grid, vals, "f").unwrap();
            let c = rng.random_range(0.1..5.0);
            let sp = spec(2.2, 2.2, 0.0, Nesting::TimeOuter, WeightKind::None);
            let base = weighted_norm(&f, &sp, &WeightModel::None).unwrap().value;
            let scaled = weighted_norm(&f.map(|v| c * v), &sp, &WeightModel::None).unwrap().value;
            prop_assert!((scaled - c * base).abs() <= 1e-12 * scaled.max(1.0));

            // p = q: the two nestings agree.
            let tilde = weighted_norm(
                &f,
                &spec(2.2, 2.2, 0.0, Nesting::SpaceOuter, WeightKind::None),
                &WeightModel::None,
            ).unwrap().value;
            prop_assert!((tilde - base).abs() <= 1e-10 * base.max(1e-12));
        }

        #[test]
        fn monotonicity(seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let grid = unit_grid(4, 3);
            let small: Vec<f64> = (0..grid.ncells()).map(|_| rng.random_range(0.0..1.0)).collect();
            let bigger: Vec<f64> = small.iter().map(|v| v + rng.random_range(0.0..1.0)).collect();
            let fs = SampledField::new(grid.clone(), small, "f").unwrap();
            let fb = SampledField::new(grid, bigger, "g").unwrap();
            let sp = spec(1.7, 3.0, 0.0, Nesting::SpaceOuter, WeightKind::None);
            let ns = weighted_norm(&fs, &sp, &WeightModel::None).unwrap().value;
            let nb = weighted_norm(&fb, &sp, &WeightModel::None).unwrap().value;
            prop_assert!(ns <= nb * (1.0 + 1e-12));
        }
    }
}
