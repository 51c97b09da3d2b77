//! Half-space kernels of the operator: the Dirichlet kernel `Γ^D` and the
//! Neumann/oblique kernel `Γ^N`, with three evaluation routes.
//!
//! - **image**: exact in the reflection-symmetric class `A_{in}(t) = 0`:
//!   `Γ^D(x,y) = Γ(x,y) − Γ(x,ȳ)` and `Γ^N(x,y) = Γ(x,y) + Γ(x,ȳ)` with
//!   `ȳ = (y', −y_n)`.
//! - **integral-of-dirichlet**: the constructive formula
//!   `Γ^N(x,y;t,s) = ∫_{x_n}^∞ D_{y_n} Γ^D((x',z_n), y; t,s) dz_n`, truncated
//!   at `Z` with a recorded Gaussian tail bound. Differentiating the lower
//!   limit gives the identity `D_{x_n} Γ^N = −D_{y_n} Γ^D`, which reduces
//!   normal derivatives to Dirichlet-kernel derivatives.
//! - **numeric-oracle**: a fine finite-difference solve with narrow-Gaussian
//!   initial data, for the general (cross-term) class where no closed form
//!   exists; tagged with its own error estimate.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::convolve::{
    bundle_from_outputs, convolve, full_outputs, grid_eval_points, ConvolveError,
    DerivativeBundle, IntegrandTerm, OutputSpec, QuadConfig, SlabEval, SolutionKernel,
};
use crate::field::{Grid, SampledField};
use crate::kernel::{order_of, DerivPair, KernelError, KernelQuery, KernelSlab, DEFAULT_MAX_ORDER};
use crate::path::{CoefficientPath, PathError};
use crate::quad::Rule1d;
use crate::solver::{DomainChart, Drift, FaceBc, IbvpProblem, IbvpSolution, Mesh, MeshAxis};
use crate::source::SpaceTimeFn;

#[derive(Debug, Error)]
pub enum HalfspaceError {
    #[error("mode {mode:?} unavailable: {reason}")]
    ModeUnavailable { mode: HsMode, reason: String },
    #[error("truncation too small: estimated tail {tail:e} exceeds tolerance {tol:e}")]
    TruncationTooSmall { tail: f64, tol: f64 },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Convolve(#[from] ConvolveError),
    #[error("oracle solve failed: {0}")]
    Oracle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsMode {
    Image,
    IntegralOfDirichlet,
    NumericOracle,
}

/// Configuration of the finite-difference oracle (general-coefficient route).
#[derive(Debug, Clone)]
pub struct OracleConfig {
    /// nodes per axis of the truncated strip
    pub nnodes: usize,
    /// time steps between s and the largest queried t
    pub nsteps: usize,
    /// initial Gaussian width in units of the mesh spacing
    pub init_width_cells: f64,
    /// strip extent in units of sqrt(t−s)
    pub pad: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            nnodes: 241,
            nsteps: 600,
            init_width_cells: 3.0,
            pad: 10.0,
        }
    }
}

/// Handle bundling a coefficient path with an evaluation mode, derivative
/// cap, truncation rule and tolerances for the half-space kernels.
pub struct HalfspaceKernelHandle<'a> {
    path: &'a CoefficientPath,
    mode: HsMode,
    max_order: usize,
    tol: f64,
    /// minimum truncation margin in multiples of sqrt(t−s); the truncation
    /// rule guarantees `Z ≥ x_n + 8·sqrt(t−s)`
    trunc_margin: f64,
    forced_z: Option<f64>,
    pub oracle: OracleConfig,
}

impl<'a> HalfspaceKernelHandle<'a> {
    pub fn new(path: &'a CoefficientPath, mode: HsMode) -> Result<Self, HalfspaceError> {
        if mode == HsMode::Image && !path.is_reflection_symmetric() {
            return Err(HalfspaceError::ModeUnavailable {
                mode,
                reason: "image method requires A_in(t) = 0 for i < n (reflection symmetry)"
                    .to_string(),
            });
        }
        Ok(HalfspaceKernelHandle {
            path,
            mode,
            max_order: DEFAULT_MAX_ORDER,
            tol: 1e-9,
            trunc_margin: 8.0,
            forced_z: None,
            oracle: OracleConfig::default(),
        })
    }

    /// Image when the path allows it, otherwise the constructive integral.
    pub fn auto(path: &'a CoefficientPath) -> Self {
        let mode = if path.is_reflection_symmetric() {
            HsMode::Image
        } else {
            HsMode::IntegralOfDirichlet
        };
        Self::new(path, mode).unwrap()
    }

    pub fn with_max_order(mut self, m: usize) -> Self {
        self.max_order = m;
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    /// Force the z_n-truncation (testing hook for the tail-bound check).
    pub fn with_forced_truncation(mut self, z: f64) -> Self {
        self.forced_z = Some(z);
        self
    }

    pub fn path(&self) -> &CoefficientPath {
        self.path
    }

    pub fn mode(&self) -> HsMode {
        self.mode
    }

    fn whole(&self) -> crate::kernel::WholeSpaceKernel<'_> {
        // internal engine gets slack for the +1/+2 orders added by the
        // integral route and the backward equation
        crate::kernel::WholeSpaceKernel::new(self.path).with_max_order(self.max_order + 3)
    }

    fn check_order(&self, q: &KernelQuery) -> Result<(), HalfspaceError> {
        if q.order() > self.max_order {
            return Err(KernelError::OrderTooHigh {
                requested: q.order(),
                max: self.max_order,
            }
            .into());
        }
        Ok(())
    }

    fn image_available(&self) -> bool {
        self.path.is_reflection_symmetric()
    }

    fn require_image(&self) -> Result<(), HalfspaceError> {
        if !self.image_available() {
            return Err(HalfspaceError::ModeUnavailable {
                mode: HsMode::Image,
                reason: "path has cross terms a_in != 0".to_string(),
            });
        }
        Ok(())
    }

    /// `D_x^α D_y^β [Γ(x,y) ± Γ(x,ȳ)]`; `sign = −1` is Dirichlet, `+1` Neumann.
    fn image_deriv(&self, q: &KernelQuery, sign: f64) -> Result<f64, HalfspaceError> {
        self.require_image()?;
        if q.t <= q.s {
            return Ok(0.0);
        }
        let n = self.path.dim();
        let engine = self.whole();
        let direct = engine.derivative(q)?;
        let mut ybar = q.y.clone();
        ybar[n - 1] = -ybar[n - 1];
        let reflected = engine.derivative(&KernelQuery {
            y: ybar,
            ..q.clone()
        })?;
        let beta_n = q.beta[n - 1];
        let chain = if beta_n % 2 == 0 { 1.0 } else { -1.0 };
        Ok(direct + sign * chain * reflected)
    }

    /// `Γ^D(x, y; t, s)`.
    pub fn dirichlet(&self, x: &[f64], y: &[f64], t: f64, s: f64) -> Result<f64, HalfspaceError> {
        let q = KernelQuery::value(x.to_vec(), y.to_vec(), t, s);
        self.dirichlet_deriv(&q)
    }

    /// `D_x^α D_y^β Γ^D`.
    pub fn dirichlet_deriv(&self, q: &KernelQuery) -> Result<f64, HalfspaceError> {
        self.check_order(q)?;
        match self.mode {
            HsMode::Image | HsMode::IntegralOfDirichlet if self.image_available() => {
                self.image_deriv(q, -1.0)
            }
            HsMode::Image => unreachable!("image handles are validated at construction"),
            _ => {
                if q.order() > 0 {
                    return Err(HalfspaceError::ModeUnavailable {
                        mode: self.mode,
                        reason: "oracle route evaluates kernel values only; derivatives \
                                 require the image or integral route"
                            .to_string(),
                    });
                }
                let run = self.oracle_dirichlet_run(&q.y, q.s, q.t)?;
                Ok(run.eval(&q.x, q.t))
            }
        }
    }

    /// `∂_s D_x^α D_y^β Γ^D` via the backward equation
    /// `∂_s Γ^D = −a^{ij}(s) D_{y_i} D_{y_j} Γ^D`.
    pub fn dirichlet_ds(&self, q: &KernelQuery) -> Result<f64, HalfspaceError> {
        self.contract_backward(q, -1.0)
    }

    /// `∂_s D_x^α D_y^β Γ^N`, same backward equation for the Neumann kernel.
    pub fn neumann_ds(&self, q: &KernelQuery) -> Result<f64, HalfspaceError> {
        self.contract_backward(q, 1.0)
    }

    fn contract_backward(&self, q: &KernelQuery, sign: f64) -> Result<f64, HalfspaceError> {
        if self.path.is_breakpoint(q.s) {
            return Err(KernelError::AmbiguousTime(q.s).into());
        }
        self.check_order(q)?;
        if q.t <= q.s {
            return Ok(0.0);
        }
        let n = self.path.dim();
        let a = self.path.evaluate(q.s).clone();
        let mut acc = 0.0;
        for i in 0..n {
            for j in i..n {
                let aij = a[(i, j)];
                if aij == 0.0 {
                    continue;
                }
                let mult = if i == j { 1.0 } else { 2.0 };
                let mut beta = q.beta.clone();
                beta[i] += 1;
                beta[j] += 1;
                let sub = KernelQuery {
                    beta,
                    ..q.clone()
                };
                let v = if sign < 0.0 {
                    self.dirichlet_deriv_uncapped(&sub)?
                } else {
                    self.neumann_deriv_uncapped(&sub)?
                };
                acc -= mult * aij * v;
            }
        }
        Ok(acc)
    }

    fn dirichlet_deriv_uncapped(&self, q: &KernelQuery) -> Result<f64, HalfspaceError> {
        self.image_deriv(q, -1.0)
    }

    fn neumann_deriv_uncapped(&self, q: &KernelQuery) -> Result<f64, HalfspaceError> {
        match self.mode {
            HsMode::Image => self.image_deriv(q, 1.0),
            _ => self.integral_neumann_deriv(q),
        }
    }

    /// `Γ^N(x, y; t, s)`.
    pub fn neumann(&self, x: &[f64], y: &[f64], t: f64, s: f64) -> Result<f64, HalfspaceError> {
        let q = KernelQuery::value(x.to_vec(), y.to_vec(), t, s);
        self.neumann_deriv(&q)
    }

    /// `D_x^α D_y^β Γ^N` through the handle's mode.
    pub fn neumann_deriv(&self, q: &KernelQuery) -> Result<f64, HalfspaceError> {
        self.check_order(q)?;
        match self.mode {
            HsMode::Image => self.image_deriv(q, 1.0),
            HsMode::IntegralOfDirichlet => self.integral_neumann_deriv(q),
            HsMode::NumericOracle => {
                if q.order() > 0 {
                    return Err(HalfspaceError::ModeUnavailable {
                        mode: self.mode,
                        reason: "oracle route evaluates kernel values only".to_string(),
                    });
                }
                let run = self.oracle_neumann_run(&q.y, q.s, q.t)?;
                Ok(run.eval(&q.x, q.t))
            }
        }
    }

    /// Truncation limit for the z_n-integral: covers the integrand peak at
    /// `z_n ≈ y_n` and satisfies `Z ≥ x_n + 8 sqrt(t−s)`.
    pub fn truncation(&self, x_n: f64, y_n: f64, t: f64, s: f64) -> f64 {
        if let Some(z) = self.forced_z {
            return z;
        }
        let tau = t - s;
        let margin = self
            .trunc_margin
            .max((4.0 * (1.0 / self.tol).ln() / self.path.nu()).sqrt());
        x_n.max(y_n) + margin * tau.sqrt()
    }

    /// Constructive route: `D_x^α D_y^β Γ^N` with `α_n` reduced through
    /// `D_{x_n} Γ^N = −D_{y_n} Γ^D`, the rest via the truncated z_n-integral.
    fn integral_neumann_deriv(&self, q: &KernelQuery) -> Result<f64, HalfspaceError> {
        if q.t <= q.s {
            return Ok(0.0);
        }
        let n = self.path.dim();
        if q.alpha[n - 1] > 0 {
            // D_{x_n} Γ^N = −D_{y_n} Γ^D, applied once
            let mut alpha = q.alpha.clone();
            alpha[n - 1] -= 1;
            let mut beta = q.beta.clone();
            beta[n - 1] += 1;
            let reduced = KernelQuery {
                alpha,
                beta,
                ..q.clone()
            };
            return Ok(-self.dirichlet_eval_for_integral(&reduced)?);
        }

        let tau = q.t - q.s;
        let x_n = q.x[n - 1];
        let y_n = q.y[n - 1];
        let z_hi = self.truncation(x_n, y_n, q.t, q.s);
        let sigma = {
            let b = self.path.integrate(q.s, q.t).map_err(|e: PathError| {
                HalfspaceError::Oracle(e.to_string())
            })?;
            let lam = b
                .matrix()
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(0.0_f64, f64::max);
            (2.0 * lam).sqrt()
        };

        let rule = z_integration_rule(x_n, z_hi, y_n, sigma);
        let mut beta = q.beta.clone();
        beta[n - 1] += 1;
        let integrand = |z: f64| -> Result<f64, HalfspaceError> {
            let mut xz = q.x.clone();
            xz[n - 1] = z;
            self.dirichlet_eval_for_integral(&KernelQuery {
                alpha: q.alpha.clone(),
                beta: beta.clone(),
                x: xz,
                y: q.y.clone(),
                t: q.t,
                s: q.s,
            })
        };
        let mut vals = Vec::with_capacity(rule.len());
        for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
            vals.push(w * integrand(z)?);
        }
        let value = crate::quad::pairwise_sum(&vals);

        // Gaussian tail bound past Z, recorded against the tolerance.
        let at_z = integrand(z_hi)?.abs();
        let tail = at_z * (std::f64::consts::PI * tau / self.path.nu()).sqrt();
        if tail > self.tol {
            return Err(HalfspaceError::TruncationTooSmall {
                tail,
                tol: self.tol,
            });
        }
        Ok(value)
    }

    /// Dirichlet evaluations feeding the z_n-integral: image when symmetric,
    /// numeric oracle otherwise.
    fn dirichlet_eval_for_integral(&self, q: &KernelQuery) -> Result<f64, HalfspaceError> {
        if self.image_available() {
            return self.image_deriv(q, -1.0);
        }
        // general class: D_{y_n} by central difference across two oracle runs
        let n = self.path.dim();
        if order_of(&q.alpha) > 0 || order_of(&q.beta) > 1 || q.beta[n - 1] != order_of(&q.beta) as u32 {
            return Err(HalfspaceError::ModeUnavailable {
                mode: self.mode,
                reason: "general-coefficient integral route supports value and D_{y_n} only"
                    .to_string(),
            });
        }
        let h = 1e-3 * (q.t - q.s).sqrt().min(q.y[n - 1]).max(1e-6);
        let mut yp = q.y.clone();
        let mut ym = q.y.clone();
        yp[n - 1] += h;
        ym[n - 1] -= h;
        if q.beta[n - 1] == 0 {
            let run = self.oracle_dirichlet_run(&q.y, q.s, q.t)?;
            return Ok(run.eval(&q.x, q.t));
        }
        let rp = self.oracle_dirichlet_run(&yp, q.s, q.t)?;
        let rm = self.oracle_dirichlet_run(&ym, q.s, q.t)?;
        Ok((rp.eval(&q.x, q.t) - rm.eval(&q.x, q.t)) / (2.0 * h))
    }

    fn oracle_run(
        &self,
        y: &[f64],
        s: f64,
        t_max: f64,
        wall: FaceBc,
    ) -> Result<OracleRun, HalfspaceError> {
        let n = self.path.dim();
        let tau = t_max - s;
        if tau <= 0.0 {
            return Err(HalfspaceError::Oracle("t <= s".to_string()));
        }
        let cfg = &self.oracle;
        let pad = cfg.pad * tau.sqrt();
        // truncated strip: Dirichlet at the artificial far walls
        let mut axes = Vec::with_capacity(n);
        let mut bcs = Vec::with_capacity(2 * n);
        for k in 0..n {
            if k == n - 1 {
                let hi = y[k] + pad;
                axes.push(MeshAxis::uniform(0.0, hi, cfg.nnodes));
                bcs.push(wall.clone());
                bcs.push(FaceBc::Dirichlet);
            } else {
                axes.push(MeshAxis::uniform(y[k] - pad, y[k] + pad, cfg.nnodes));
                bcs.push(FaceBc::Dirichlet);
                bcs.push(FaceBc::Dirichlet);
            }
        }
        let mesh = Mesh { axes };
        let (lo, hi) = {
            let lo = mesh.axes.iter().map(|a| a.nodes[0]).collect::<Vec<_>>();
            let hi = mesh
                .axes
                .iter()
                .map(|a| *a.nodes.last().unwrap())
                .collect::<Vec<_>>();
            (lo, hi)
        };
        let problem = IbvpProblem {
            path: self.path,
            chart: DomainChart::rectangle(lo, hi),
            mesh: mesh.clone(),
            bcs,
            drift: Drift::None,
        };
        // narrow-Gaussian approximation of δ_y, sampled at the nodes
        let hmesh = mesh.axes[n - 1].nodes[1] - mesh.axes[n - 1].nodes[0];
        let w = cfg.init_width_cells * hmesh;
        let norm = (2.0 * std::f64::consts::PI * w * w).powf(-(n as f64) / 2.0);
        let init: Vec<f64> = (0..mesh.nnodes())
            .map(|flat| {
                let x = mesh.node(&mesh.unflat(flat));
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                norm * (-0.5 * r2 / (w * w)).exp()
            })
            .collect();
        let dt = tau / cfg.nsteps as f64;
        let sol = problem
            .solve_ivbp(&|_, _| 0.0, s, dt, cfg.nsteps, Some(init))
            .map_err(|e| HalfspaceError::Oracle(e.to_string()))?;
        Ok(OracleRun {
            sol,
            smoothing_width: w,
            spacing: hmesh,
        })
    }

    /// Fine FD solve approximating `Γ^D(·, y; ·, s)` on a truncated strip.
    pub fn oracle_dirichlet_run(
        &self,
        y: &[f64],
        s: f64,
        t_max: f64,
    ) -> Result<OracleRun, HalfspaceError> {
        self.oracle_run(y, s, t_max, FaceBc::Dirichlet)
    }

    /// Same oracle with the wall condition `D_n u = 0` (Neumann kernel).
    pub fn oracle_neumann_run(
        &self,
        y: &[f64],
        s: f64,
        t_max: f64,
    ) -> Result<OracleRun, HalfspaceError> {
        let n = self.path.dim();
        let mut gamma = vec![0.0; n];
        gamma[n - 1] = 1.0;
        self.oracle_run(
            y,
            s,
            t_max,
            FaceBc::Oblique(crate::solver::ObliqueField { gamma, gamma0: 0.5 }),
        )
    }

    /// `u = ∫∫ (Γ^D f_0 − D_y Γ^D · F) dy ds` and its gradient on `grid`.
    pub fn solve_dirichlet_divform(
        &self,
        rhs: &DivFormRhs,
        grid: &Grid,
        quad: &QuadConfig,
        two_level: bool,
    ) -> Result<DivFormSolution, HalfspaceError> {
        self.require_image()?;
        let n = self.path.dim();
        let kernel = ImageConvolution {
            path: self.path,
            sign: -1.0,
        };
        let mut outputs = Vec::new();
        let mut u_terms = Vec::new();
        if let Some(f0) = rhs.f0 {
            u_terms.push(IntegrandTerm {
                pair: DerivPair::value(n),
                source: f0,
                coeff: 1.0,
                singular_split: false,
            });
        }
        for (j, fj) in rhs.f_vec.iter().enumerate() {
            if let Some(fj) = fj {
                let mut beta = vec![0u32; n];
                beta[j] = 1;
                u_terms.push(IntegrandTerm {
                    pair: DerivPair {
                        alpha: vec![0; n],
                        beta,
                    },
                    source: *fj,
                    coeff: -1.0,
                    singular_split: false,
                });
            }
        }
        outputs.push(OutputSpec {
            tag: "u".to_string(),
            terms: u_terms,
        });
        for i in 0..n {
            let mut terms = Vec::new();
            let mut alpha = vec![0u32; n];
            alpha[i] = 1;
            if let Some(f0) = rhs.f0 {
                terms.push(IntegrandTerm {
                    pair: DerivPair::dx(alpha.clone(), n),
                    source: f0,
                    coeff: 1.0,
                    singular_split: false,
                });
            }
            for (j, fj) in rhs.f_vec.iter().enumerate() {
                if let Some(fj) = fj {
                    let mut beta = vec![0u32; n];
                    beta[j] = 1;
                    terms.push(IntegrandTerm {
                        pair: DerivPair {
                            alpha: alpha.clone(),
                            beta,
                        },
                        source: *fj,
                        coeff: -1.0,
                        // D_x D_y Γ^D is a second-order kernel
                        singular_split: true,
                    });
                }
            }
            outputs.push(OutputSpec {
                tag: format!("du{}", i + 1),
                terms,
            });
        }
        let pts = grid_eval_points(grid);
        let res = convolve(&kernel, &outputs, &pts, quad, two_level)?;
        let mut it = res.values.into_iter();
        let u = SampledField::new(grid.clone(), it.next().unwrap(), "u").unwrap();
        let grad = (0..n)
            .map(|i| {
                SampledField::new(grid.clone(), it.next().unwrap(), format!("du{}", i + 1))
                    .unwrap()
            })
            .collect();
        Ok(DivFormSolution {
            u,
            grad,
            quad_errors: res.errors,
        })
    }

    /// `u = ∫∫ Γ^N f dy ds` with `D_n u = 0` on the wall; returns u, Du,
    /// D²u (split-regularized) and `∂_t u` from the equation.
    pub fn solve_oblique(
        &self,
        f: &dyn SpaceTimeFn,
        grid: &Grid,
        quad: &QuadConfig,
        two_level: bool,
    ) -> Result<DerivativeBundle, HalfspaceError> {
        self.require_image()?;
        let n = self.path.dim();
        let kernel = ImageConvolution {
            path: self.path,
            sign: 1.0,
        };
        let (outputs, sec_pairs) = full_outputs(n, f);
        let pts = grid_eval_points(grid);
        let res = convolve(&kernel, &outputs, &pts, quad, two_level)?;
        Ok(bundle_from_outputs(
            self.path, f, grid, &outputs, res, sec_pairs,
        )?)
    }
}

/// Divergence-form right-hand side `f_0 + div(F)`.
pub struct DivFormRhs<'a> {
    pub f0: Option<&'a dyn SpaceTimeFn>,
    pub f_vec: Vec<Option<&'a dyn SpaceTimeFn>>,
}

pub struct DivFormSolution {
    pub u: SampledField,
    pub grad: Vec<SampledField>,
    pub quad_errors: Vec<f64>,
}

/// FD oracle output: a space-time field approximating a kernel column, with
/// its smoothing scale recorded.
pub struct OracleRun {
    pub sol: IbvpSolution,
    pub smoothing_width: f64,
    pub spacing: f64,
}

impl OracleRun {
    /// Multilinear interpolation in space, linear in time.
    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        let times = &self.sol.times;
        let k_hi = times
            .partition_point(|&tk| tk < t)
            .clamp(1, times.len() - 1);
        let (t0, t1) = (times[k_hi - 1], times[k_hi]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let v0 = self.eval_frame(x, k_hi - 1);
        let v1 = self.eval_frame(x, k_hi);
        (1.0 - w) * v0 + w * v1
    }

    fn eval_frame(&self, x: &[f64], k: usize) -> f64 {
        let mesh = &self.sol.mesh;
        let frame = &self.sol.frames[k];
        let n = mesh.dim();
        let mut idx = Vec::with_capacity(n);
        let mut frac = Vec::with_capacity(n);
        for (ax, &xi) in mesh.axes.iter().zip(x) {
            let nodes = &ax.nodes;
            if xi <= nodes[0] {
                idx.push(0);
                frac.push(0.0);
                continue;
            }
            if xi >= *nodes.last().unwrap() {
                idx.push(nodes.len() - 2);
                frac.push(1.0);
                continue;
            }
            let hi = nodes.partition_point(|&v| v <= xi);
            idx.push(hi - 1);
            frac.push((xi - nodes[hi - 1]) / (nodes[hi] - nodes[hi - 1]));
        }
        let corners = 1usize << n;
        let mut acc = 0.0;
        for mask in 0..corners {
            let mut w = 1.0;
            let mut id = Vec::with_capacity(n);
            for k2 in 0..n {
                if mask >> k2 & 1 == 0 {
                    w *= 1.0 - frac[k2];
                    id.push(idx[k2]);
                } else {
                    w *= frac[k2];
                    id.push(idx[k2] + 1);
                }
            }
            if w != 0.0 {
                acc += w * frame[mesh.flat(&id)];
            }
        }
        acc
    }
}

/// z_n-integration rule: fine Gauss panels where the integrand lives (near
/// `z ≈ y_n` and near the lower limit), coarse elsewhere.
fn z_integration_rule(lo: f64, hi: f64, y_n: f64, sigma: f64) -> Rule1d {
    let fine = |z: f64| -> bool {
        (z - y_n).abs() <= 3.5 * sigma || (z - lo).abs() <= 3.0 * sigma
    };
    let mut edges = vec![lo, hi];
    for k in -5i32..=5 {
        let e = y_n + k as f64 * sigma;
        if e > lo && e < hi {
            edges.push(e);
        }
    }
    let e = lo + 3.0 * sigma;
    if e < hi {
        edges.push(e);
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup();
    let mut rule = Rule1d::default();
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let width = if fine(mid) { 0.75 * sigma } else { 4.0 * sigma };
        let panels = ((b - a) / width).ceil().max(1.0) as usize;
        rule.extend(Rule1d::composite_gauss(a, b, panels, 8));
    }
    rule
}

/// Image-form half-space kernel as a convolution driver: `sign = −1` gives
/// `Γ^D`, `+1` gives `Γ^N`.
pub(crate) struct ImageConvolution<'a> {
    pub path: &'a CoefficientPath,
    pub sign: f64,
}

impl SolutionKernel for ImageConvolution<'_> {
    fn dim(&self) -> usize {
        self.path.dim()
    }

    fn halfspace(&self) -> bool {
        true
    }

    fn breakpoints(&self) -> &[f64] {
        self.path.breakpoints()
    }

    fn slab<'k>(
        &'k self,
        t: f64,
        s: f64,
        pairs: &[DerivPair],
    ) -> Box<dyn SlabEval + Send + Sync + 'k> {
        let n = self.path.dim();
        let beta_signs = pairs
            .iter()
            .map(|p| if p.beta[n - 1] % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        Box::new(ImageSlab {
            inner: KernelSlab::new(self.path, t, s, pairs),
            beta_signs,
            sign: self.sign,
            n,
        })
    }
}

struct ImageSlab {
    inner: KernelSlab,
    beta_signs: Vec<f64>,
    sign: f64,
    n: usize,
}

impl SlabEval for ImageSlab {
    fn eval_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.inner.eval_into(x, y, out);
        let mut ybar_buf = [0.0_f64; 8];
        let ybar = &mut ybar_buf[..self.n];
        ybar.copy_from_slice(y);
        ybar[self.n - 1] = -ybar[self.n - 1];
        let mut refl_buf = [0.0_f64; 64];
        assert!(out.len() <= 64, "too many derivative pairs in one slab");
        let refl = &mut refl_buf[..out.len()];
        self.inner.eval_into(x, ybar, refl);
        for ((o, r), bs) in out.iter_mut().zip(refl.iter()).zip(&self.beta_signs) {
            *o += self.sign * bs * r;
        }
    }

    fn std_scale(&self) -> f64 {
        self.inner.std_scale()
    }

    fn radius(&self, tol: f64) -> f64 {
        self.inner.gaussian_radius(tol)
    }
}

/// Shear `S` reducing the oblique condition `γ·Du = 0` (γ_n > 0) to
/// `D_n u = 0`: `z' = x' − (γ'/γ_n) x_n`, `z_n = x_n`.
pub fn shear_matrix(gamma: &[f64]) -> DMatrix<f64> {
    let n = gamma.len();
    assert!(gamma[n - 1] > 0.0, "oblique field needs gamma_n > 0");
    let mut s = DMatrix::identity(n, n);
    for i in 0..n - 1 {
        s[(i, n - 1)] = -gamma[i] / gamma[n - 1];
    }
    s
}

/// Transform a path under the shear: matrices become `S A S^T`, with the
/// ellipticity constant recomputed from the transformed spectra.
pub fn shear_path(path: &CoefficientPath, shear: &DMatrix<f64>) -> Result<CoefficientPath, PathError> {
    let spec = path.to_spec();
    let n = path.dim();
    let mut mats = Vec::new();
    let mut nu_eff = f64::INFINITY;
    for flat in &spec.matrices {
        let a = DMatrix::from_row_slice(n, n, flat);
        let mut m = shear * a * shear.transpose();
        // symmetrize away rounding noise
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        let eigs = m.clone().symmetric_eigen().eigenvalues;
        let lo = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = eigs.iter().cloned().fold(0.0_f64, f64::max);
        nu_eff = nu_eff.min(lo).min(1.0 / hi);
        mats.push(m);
    }
    CoefficientPath::new(spec.breakpoints, mats, nu_eff.min(1.0), n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convolve::QuadConfig;
    use crate::field::Axis;
    use crate::source::{manufactured_rhs, GaussianBump};
    use approx::assert_relative_eq;

    fn heat_1d() -> CoefficientPath {
        CoefficientPath::constant(DMatrix::identity(1, 1), 1.0).unwrap()
    }

    fn symmetric_2d() -> CoefficientPath {
        CoefficientPath::new(
            vec![0.0, 0.4, 1.0],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.7]),
                DMatrix::from_row_slice(2, 2, &[0.8, 0.0, 0.0, 1.3]),
            ],
            0.6,
            2,
        )
        .unwrap()
    }

    fn cross_2d() -> CoefficientPath {
        CoefficientPath::new(
            vec![0.0, 1.0],
            vec![DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.9])],
            0.5,
            2,
        )
        .unwrap()
    }

    fn g1(u: f64, tau: f64) -> f64 {
        (4.0 * std::f64::consts::PI * tau).powf(-0.5) * (-u * u / (4.0 * tau)).exp()
    }

    #[test]
    fn image_mode_requires_symmetry() {
        let path = cross_2d();
        assert!(matches!(
            HalfspaceKernelHandle::new(&path, HsMode::Image),
            Err(HalfspaceError::ModeUnavailable { .. })
        ));
        let auto = HalfspaceKernelHandle::auto(&path);
        assert_eq!(auto.mode(), HsMode::IntegralOfDirichlet);
    }

    #[test]
    fn one_dimensional_image_formulas() {
        let path = heat_1d();
        let h = HalfspaceKernelHandle::new(&path, HsMode::Image).unwrap();
        let (t, s) = (0.8, 0.3);
        let tau = t - s;
        for &(x, y) in &[(0.3, 0.7), (1.1, 0.2), (0.05, 0.04)] {
            let d = h.dirichlet(&[x], &[y], t, s).unwrap();
            assert_relative_eq!(d, g1(x - y, tau) - g1(x + y, tau), max_relative = 1e-13);
            let nmn = h.neumann(&[x], &[y], t, s).unwrap();
            assert_relative_eq!(nmn, g1(x - y, tau) + g1(x + y, tau), max_relative = 1e-13);
        }
        // Dirichlet condition at the wall, exactly
        assert_eq!(h.dirichlet(&[0.0], &[0.5], t, s).unwrap(), 0.0);
    }

    #[test]
    fn dirichlet_dy_matches_hand_formula_and_fd() {
        let path = heat_1d();
        let h = HalfspaceKernelHandle::new(&path, HsMode::Image).unwrap();
        let (x, y, t, s) = (0.4, 0.6, 0.9, 0.2);
        let tau: f64 = t - s;
        let q = KernelQuery {
            alpha: vec![0],
            beta: vec![1],
            x: vec![x],
            y: vec![y],
            t,
            s,
        };
        let v = h.dirichlet_deriv(&q).unwrap();
        // hand-differentiated image formula
        let hand = (x - y) / (2.0 * tau) * g1(x - y, tau) + (x + y) / (2.0 * tau) * g1(x + y, tau);
        assert_relative_eq!(v, hand, max_relative = 1e-10);
        // finite-difference cross-check
        let hh = 1e-5;
        let fd = (h.dirichlet(&[x], &[y + hh], t, s).unwrap()
            - h.dirichlet(&[x], &[y - hh], t, s).unwrap())
            / (2.0 * hh);
        assert!((v - fd).abs() < 1e-7);
    }

    #[test]
    fn image_kernel_forgets_the_wall_far_away() {
        let path = symmetric_2d();
        let h = HalfspaceKernelHandle::new(&path, HsMode::Image).unwrap();
        let whole = crate::kernel::WholeSpaceKernel::new(&path);
        let (t, s) = (1.0, 0.5);
        let tau: f64 = t - s;
        let x = vec![0.0, 3.0 * tau.sqrt()];
        for k in 0..4 {
            let y = vec![0.1, (10.0 + 3.0 * k as f64) * tau.sqrt()];
            let d = h.dirichlet(&x, &y, t, s).unwrap();
            let g = whole.gamma(&x, &y, t, s);
            assert!(
                ((d - g) / g).abs() <= 1e-10,
                "relative wall memory {} at y_n multiple {}",
                ((d - g) / g).abs(),
                10 + 3 * k
            );
        }
    }

    #[test]
    fn neumann_integral_route_matches_image() {
        let path = symmetric_2d();
        let image = HalfspaceKernelHandle::new(&path, HsMode::Image).unwrap();
        let integral =
            HalfspaceKernelHandle::new(&path, HsMode::IntegralOfDirichlet).unwrap();
        let (t, s) = (0.9, 0.15);
        let tau: f64 = t - s;
        for &(xn, yn, x1off) in &[
            (0.2, 0.5, 0.3),
            (0.05, 1.2, -0.4),
            (1.0, 0.1, 0.0),
            (2.0, 2.5, 1.0),
        ] {
            let x = vec![0.0, xn * tau.sqrt()];
            let y = vec![x1off * tau.sqrt(), yn * tau.sqrt()];
            let a = image.neumann(&x, &y, t, s).unwrap();
            let b = integral.neumann(&x, &y, t, s).unwrap();
            assert!(
                ((a - b) / a).abs() < 1e-7,
                "image {a} vs integral {b} at ({xn},{yn})"
            );
        }
    }

    #[test]
    fn neumann_normal_derivative_identity() {
        // D_{x_n} Γ^N = −D_{y_n} Γ^D, in both evaluation modes
        let path = symmetric_2d();
        for mode in [HsMode::Image, HsMode::IntegralOfDirichlet] {
            let h = HalfspaceKernelHandle::new(&path, mode).unwrap();
            let q_n = KernelQuery {
                alpha: vec![0, 1],
                beta: vec![0, 0],
                x: vec![0.2, 0.35],
                y: vec![-0.1, 0.6],
                t: 0.8,
                s: 0.2,
            };
            let lhs = h.neumann_deriv(&q_n).unwrap();
            let q_d = KernelQuery {
                alpha: vec![0, 0],
                beta: vec![0, 1],
                ..q_n.clone()
            };
            let rhs = -h.dirichlet_deriv(&q_d).unwrap();
            assert!((lhs - rhs).abs() < 1e-8 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn wall_boundary_decay_exponents() {
        // Γ^D ~ x_n and D_{x_n}Γ^N ~ x_n as x_n → 0: fitted log-log slope
        // within 0.1 of 1.
        let path = symmetric_2d();
        let h = HalfspaceKernelHandle::new(&path, HsMode::Image).unwrap();
        let (t, s) = (0.7, 0.2);
        let y = vec![0.2, 0.4];
        let mut dvals = Vec::new();
        let mut nvals = Vec::new();
        let ks: Vec<f64> = (4..=8).map(|k| 10f64.powi(-k)).collect();
        for &xn in &ks {
            let x = vec![0.0, xn];
            dvals.push(h.dirichlet(&x, &y, t, s).unwrap());
            let q = KernelQuery {
                alpha: vec![0, 1],
                beta: vec![0, 0],
                x,
                y: y.clone(),
                t,
                s,
            };
            nvals.push(h.neumann_deriv(&q).unwrap());
        }
        let slope = |vals: &[f64]| -> f64 {
            let mut acc = 0.0;
            for k in 1..vals.len() {
                acc += (vals[k - 1].abs() / vals[k].abs()).log10();
            }
            acc / (vals.len() - 1) as f64
        };
        assert!((slope(&dvals) - 1.0).abs() < 0.1, "gamma^D slope {}", slope(&dvals));
        assert!((slope(&nvals) - 1.0).abs() < 0.1, "D_n gamma^N slope {}", slope(&nvals));
    }

    #[test]
    fn neumann_kernel_conserves_mass() {
        let path = symmetric_2d();
        let h = HalfspaceKernelHandle::new(&path, HsMode::Image).unwrap();
        let (t, s) = (0.9, 0.4);
        let x = vec![0.3, 0.4];
        let b = path.integrate(s, t).unwrap();
        let lam = b
            .matrix()
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(0.0_f64, f64::max);
        let r = (6.0 * lam * 40.0_f64).sqrt();
        let r1 = Rule1d::composite_gauss(x[0] - r, x[0] + r, 28, 8);
        let r2 = Rule1d::composite_gauss(0.0, x[1] + r, 28, 8);
        let mut mass = 0.0;
        for (&y1, &w1) in r1.nodes.iter().zip(&r1.weights) {
            for (&y2, &w2) in r2.nodes.iter().zip(&r2.weights) {
                mass += w1 * w2 * h.neumann(&x, &[y1, y2], t, s).unwrap();
            }
        }
        assert!((mass - 1.0).abs() < 1e-8, "neumann mass {mass}");
    }

    #[test]
    fn forced_truncation_reports_tail() {
        let path = symmetric_2d();
        let h = HalfspaceKernelHandle::new(&path, HsMode::IntegralOfDirichlet)
            .unwrap()
            .with_forced_truncation(0.9); // integrand peak near y_n = 1.2 is cut
        let err = h.neumann(&[0.0, 0.2], &[0.0, 1.2], 1.0, 0.4);
        assert!(matches!(err, Err(HalfspaceError::TruncationTooSmall { .. })));
    }

    #[test]
    fn backward_equation_matches_finite_difference() {
        let path = symmetric_2d();
        let h = HalfspaceKernelHandle::new(&path, HsMode::Image).unwrap();
        let (x, y) = (vec![0.3, 0.4], vec![-0.2, 0.7]);
        let (t, s) = (0.95, 0.2);
        let q = KernelQuery::value(x.clone(), y.clone(), t, s);
        let ds_n = h.neumann_ds(&q).unwrap();
        let ds_d = h.dirichlet_ds(&q).unwrap();
        let hh = 1e-6;
        let fd_n = (h.neumann(&x, &y, t, s + hh).unwrap() - h.neumann(&x, &y, t, s - hh).unwrap())
            / (2.0 * hh);
        let fd_d = (h.dirichlet(&x, &y, t, s + hh).unwrap()
            - h.dirichlet(&x, &y, t, s - hh).unwrap())
            / (2.0 * hh);
        assert!((ds_n - fd_n).abs() < 1e-6, "{ds_n} vs {fd_n}");
        assert!((ds_d - fd_d).abs() < 1e-6, "{ds_d} vs {fd_d}");
        // breakpoint guard
        let at_bp = KernelQuery { s: 0.4, ..q };
        assert!(matches!(
            h.neumann_ds(&at_bp),
            Err(HalfspaceError::Kernel(KernelError::AmbiguousTime(_)))
        ));
    }

    #[test]
    fn oracle_matches_smoothed_image_kernel() {
        // With Gaussian initial data of width w the oracle computes the
        // kernel mollified by N_w; for the symmetric class that equals
        // N_Σ(x−y) − N_Σ(x−ȳ) with Σ = 2B + w² I. Closed form vs FD solve.
        let path = heat_1d();
        let mut h = HalfspaceKernelHandle::new(&path, HsMode::NumericOracle).unwrap();
        h.oracle.nnodes = 321;
        h.oracle.nsteps = 400;
        let (y, s, t) = (vec![0.8], 0.0, 0.25);
        let run = h.oracle_dirichlet_run(&y, s, t).unwrap();
        let w = run.smoothing_width;
        let sig2 = 2.0 * (t - s) + w * w;
        let nref = |u: f64| (2.0 * std::f64::consts::PI * sig2).powf(-0.5)
            * (-(u * u) / (2.0 * sig2)).exp();
        for &x in &[0.4, 0.8, 1.2, 0.1] {
            let got = run.eval(&[x], t);
            let want = nref(x - y[0]) - nref(x + y[0]);
            assert!(
                (got - want).abs() < 4e-3 * want.abs().max(0.1),
                "oracle {got} vs smoothed image {want} at x={x}"
            );
        }
    }

    #[test]
    fn oracle_handles_cross_terms() {
        // General class: no closed form. Check the structural facts the paper
        // guarantees: boundary condition, positivity inside, sub-unit mass.
        let path = cross_2d();
        let mut h = HalfspaceKernelHandle::new(&path, HsMode::NumericOracle).unwrap();
        h.oracle.nnodes = 61;
        h.oracle.nsteps = 120;
        let (y, s, t) = (vec![0.0, 0.5], 0.0, 0.08);
        let run = h.oracle_dirichlet_run(&y, s, t).unwrap();
        assert_eq!(run.eval(&[0.3, 0.0], t), 0.0);
        assert!(run.eval(&[0.0, 0.5], t) > 0.0);
        let mesh = &run.sol.mesh;
        let mass = crate::solver::conserved_sum(mesh, run.sol.frames.last().unwrap());
        assert!(mass > 0.5 && mass < 1.0 + 1e-6, "dirichlet mass {mass}");
    }

    #[test]
    fn divform_solution_vanishes_at_wall_and_recovers_manufactured() {
        let path = symmetric_2d();
        let h = HalfspaceKernelHandle::new(&path, HsMode::Image).unwrap();
        // u* compactly supported in the open half-space
        let u_star = GaussianBump::new(vec![0.0, 1.0], vec![0.22, 0.13], 0.5, 0.06);
        let f0 = manufactured_rhs(&u_star, &path);
        let rhs = DivFormRhs {
            f0: Some(&f0),
            f_vec: vec![None, None],
        };
        let grid = Grid {
            space: vec![Axis::uniform(-0.6, 0.6, 3), Axis::uniform(0.05, 1.6, 5)],
            time: Axis::uniform(0.45, 0.65, 2),
        };
        let mut quad = QuadConfig::default();
        quad.tol = 1e-4;
        let sol = h.solve_dirichlet_divform(&rhs, &grid, &quad, false).unwrap();
        let mut max_err = 0.0_f64;
        for it in 0..grid.time.ncells() {
            let t = grid.time.center(it);
            for ix in 0..grid.ncells_space() {
                let x = grid.space_center(ix);
                max_err = max_err.max((sol.u.value(it, ix) - u_star.value(&x, t)).abs());
            }
        }
        assert!(max_err < 2e-4, "divform manufactured error {max_err}");

        // trace check: u(x', x_n, t) ≤ C x_n close to the wall
        let pts: Vec<crate::convolve::EvalPoint> = (1..=4)
            .map(|k| crate::convolve::EvalPoint {
                x: vec![0.0, 0.02 * k as f64],
                t: 0.55,
            })
            .collect();
        let kernel = ImageConvolution {
            path: &path,
            sign: -1.0,
        };
        let outputs = vec![OutputSpec {
            tag: "u".into(),
            terms: vec![IntegrandTerm {
                pair: DerivPair::value(2),
                source: &f0,
                coeff: 1.0,
                singular_split: false,
            }],
        }];
        let res = convolve(&kernel, &outputs, &pts, &quad, false).unwrap();
        for (k, v) in res.values[0].iter().enumerate() {
            let xn = 0.02 * (k + 1) as f64;
            assert!(v.abs() <= 1.5 * xn, "trace slope at x_n={xn}: {v}");
        }
    }
}
