//! Space-time convolution of Green kernels against right-hand sides:
//! `u(x,t) = ∫_{−∞}^t ∫ K(x,y;t,s) f(y,s) dy ds` and its derivatives.
//!
//! The time integral is performed in `w = ln(t−s)` (geometric refinement
//! toward the `s → t` singularity) with Gauss panels split at coefficient
//! breakpoints and source kinks. The space integral per time slab uses tensor
//! Gauss–Legendre on one of two grids:
//!
//! - kernel-centered, scaled by the Gaussian width `~√(t−s)`, for slabs where
//!   the kernel is narrower than the source features;
//! - source-centered on the support box otherwise.
//!
//! Second derivatives of the solution are singular-integral limits; they are
//! computed with the cancellation split `∫ D²K (f(y,s) − f(x,s)) dy`, which is
//! exact because `∫ D²K dy = 0` for every kernel served here, and tames the
//! non-integrable `(t−s)^{-(n+2)/2}` factor against smooth sources.

use rayon::prelude::*;
use std::collections::BTreeMap;
use thiserror::Error;

use crate::field::{Grid, SampledField};
use crate::kernel::{DerivPair, KernelSlab};
use crate::path::CoefficientPath;
use crate::quad::{pairwise_sum, panel_edges, Rule1d};
use crate::source::SpaceTimeFn;

#[derive(Debug, Error)]
pub enum ConvolveError {
    #[error("quadrature did not converge: refinement difference {estimate:e} exceeds tolerance {tol:e} (output {output})")]
    QuadratureNotConverged {
        output: String,
        estimate: f64,
        tol: f64,
    },
    #[error("no integrand terms supplied")]
    EmptyOutputs,
}

/// Tuning knobs for the convolution quadrature. `refined()` produces the
/// second level used for a-posteriori error estimates.
#[derive(Debug, Clone)]
pub struct QuadConfig {
    /// Target accuracy; also the convergence threshold for two-level checks.
    pub tol: f64,
    /// Panel width in w = ln(t−s).
    pub w_panel_width: f64,
    /// Gauss nodes per w panel.
    pub w_nodes: usize,
    /// Nodes on the |z| ≤ 3σ Gaussian core, per axis.
    pub zeta_core_nodes: usize,
    /// Nodes per 2σ tail panel, per axis.
    pub zeta_tail_nodes: usize,
    /// Gauss nodes per source panel.
    pub src_nodes: usize,
    /// Source panels are at most `src_panel_factor · min(feature, √τ)` wide.
    pub src_panel_factor: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig {
            tol: 1e-5,
            w_panel_width: 0.9,
            w_nodes: 8,
            zeta_core_nodes: 14,
            zeta_tail_nodes: 5,
            src_nodes: 8,
            src_panel_factor: 0.9,
        }
    }
}

impl QuadConfig {
    /// Coarser, cheaper settings for parameter sweeps.
    pub fn sweep() -> Self {
        QuadConfig {
            tol: 1e-3,
            w_panel_width: 1.3,
            w_nodes: 6,
            zeta_core_nodes: 10,
            zeta_tail_nodes: 4,
            src_nodes: 6,
            src_panel_factor: 1.2,
        }
    }

    pub fn refined(&self) -> Self {
        QuadConfig {
            tol: self.tol,
            w_panel_width: self.w_panel_width * 2.0 / 3.0,
            w_nodes: self.w_nodes + 2,
            zeta_core_nodes: self.zeta_core_nodes * 3 / 2,
            zeta_tail_nodes: self.zeta_tail_nodes + 2,
            src_nodes: self.src_nodes + 2,
            src_panel_factor: self.src_panel_factor * 2.0 / 3.0,
        }
    }
}

/// A kernel family the convolution engine can drive: it builds per-(t,s)
/// slabs that evaluate a batch of `D_x^α D_y^β K` derivatives.
pub trait SolutionKernel: Sync {
    fn dim(&self) -> usize;
    /// Half-space kernels restrict y_n > 0 and are evaluated only at x_n > 0.
    fn halfspace(&self) -> bool;
    fn breakpoints(&self) -> &[f64];
    fn slab<'k>(
        &'k self,
        t: f64,
        s: f64,
        pairs: &[DerivPair],
    ) -> Box<dyn SlabEval + Send + Sync + 'k>;
}

pub trait SlabEval {
    fn eval_into(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// Largest Gaussian standard deviation of the slab, `sqrt(2 λ_max(B))`.
    fn std_scale(&self) -> f64;
    /// Radius beyond which the kernel is below `tol` of its peak.
    fn radius(&self, tol: f64) -> f64;
}

impl SlabEval for KernelSlab {
    fn eval_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        KernelSlab::eval_into(self, x, y, out)
    }

    fn std_scale(&self) -> f64 {
        KernelSlab::std_scale(self)
    }

    fn radius(&self, tol: f64) -> f64 {
        self.gaussian_radius(tol)
    }
}

/// The whole-space kernel as a convolution driver.
pub struct WholeSpaceConvolution<'a> {
    pub path: &'a CoefficientPath,
}

impl SolutionKernel for WholeSpaceConvolution<'_> {
    fn dim(&self) -> usize {
        self.path.dim()
    }

    fn halfspace(&self) -> bool {
        false
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
        Box::new(KernelSlab::new(self.path, t, s, pairs))
    }
}

/// One additive piece of an output: `coeff · D^pair K · f`, optionally with
/// the `f(y,s) − f(x,s)` cancellation on singular slabs.
pub struct IntegrandTerm<'a> {
    pub pair: DerivPair,
    pub source: &'a dyn SpaceTimeFn,
    pub coeff: f64,
    pub singular_split: bool,
}

pub struct OutputSpec<'a> {
    pub tag: String,
    pub terms: Vec<IntegrandTerm<'a>>,
}

#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub x: Vec<f64>,
    pub t: f64,
}

pub struct ConvolveResult {
    /// values[output][point]
    pub values: Vec<Vec<f64>>,
    /// max |fine − coarse| per output (zero when run single-level)
    pub errors: Vec<f64>,
}

pub fn convolve(
    kernel: &dyn SolutionKernel,
    outputs: &[OutputSpec],
    points: &[EvalPoint],
    quad: &QuadConfig,
    two_level: bool,
) -> Result<ConvolveResult, ConvolveError> {
    if outputs.is_empty() || outputs.iter().all(|o| o.terms.is_empty()) {
        return Err(ConvolveError::EmptyOutputs);
    }
    let coarse = convolve_level(kernel, outputs, points, quad);
    if !two_level {
        return Ok(ConvolveResult {
            values: coarse,
            errors: vec![0.0; outputs.len()],
        });
    }
    let fine = convolve_level(kernel, outputs, points, &quad.refined());
    let mut errors = Vec::with_capacity(outputs.len());
    for (out_idx, spec) in outputs.iter().enumerate() {
        let mut diff = 0.0_f64;
        let mut scale = 1.0_f64;
        for (a, b) in fine[out_idx].iter().zip(&coarse[out_idx]) {
            diff = diff.max((a - b).abs());
            scale = scale.max(a.abs());
        }
        if diff > quad.tol * scale {
            return Err(ConvolveError::QuadratureNotConverged {
                output: spec.tag.clone(),
                estimate: diff,
                tol: quad.tol * scale,
            });
        }
        errors.push(diff);
    }
    Ok(ConvolveResult {
        values: fine,
        errors,
    })
}

struct TermCtx<'a> {
    output: usize,
    pair_idx: usize,
    source: &'a dyn SpaceTimeFn,
    coeff: f64,
    split: bool,
    /// kernel-centered below this τ (∞ for unbounded sources)
    tau_near: f64,
    support: Option<(Vec<f64>, Vec<f64>)>,
    time_range: (f64, f64),
    feature: f64,
}

/// Kernel-centered axis rule: dense Gauss core on |z| ≤ 3σ, 2σ-wide tail
/// panels out to `radius`, optionally clipped from above at `hi`.
fn zeta_axis_rule(sigma: f64, radius: f64, quad: &QuadConfig, hi: Option<f64>) -> Rule1d {
    let top = hi.unwrap_or(radius).min(radius);
    if top <= -radius {
        return Rule1d::default();
    }
    let mut edges = vec![-radius.min(3.0 * sigma), radius.min(3.0 * sigma)];
    let mut r = 3.0 * sigma;
    while r < radius {
        let r2 = (r + 2.0 * sigma).min(radius);
        edges.push(r2);
        edges.push(-r2);
        r = r2;
    }
    edges.push(-radius);
    edges.push(radius);
    edges.retain(|&e| e <= top);
    edges.push(top);
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup();
    let mut rule = Rule1d::default();
    for pair in edges.windows(2) {
        if pair[1] <= pair[0] {
            continue;
        }
        let outer = pair[0].abs().max(pair[1].abs());
        let nn = if outer > 3.0 * sigma * (1.0 + 1e-9) {
            quad.zeta_tail_nodes
        } else {
            quad.zeta_core_nodes
        };
        rule.extend(Rule1d::gauss(pair[0], pair[1], nn));
    }
    rule
}

fn box_distance(x: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut d2 = 0.0;
    for ((xi, l), h) in x.iter().zip(lo).zip(hi) {
        let d = (l - xi).max(xi - h).max(0.0);
        d2 += d * d;
    }
    d2.sqrt()
}

/// Iterate a tensor product of per-axis rules; `f` receives node and weight.
fn tensor_loop(rules: &[&Rule1d], f: &mut dyn FnMut(&[f64], f64)) {
    let n = rules.len();
    let mut y = vec![0.0; n];
    fn recurse(
        k: usize,
        rules: &[&Rule1d],
        y: &mut [f64],
        w: f64,
        f: &mut dyn FnMut(&[f64], f64),
    ) {
        let rule = rules[k];
        let last = k == rules.len() - 1;
        for (node, weight) in rule.nodes.iter().zip(&rule.weights) {
            y[k] = *node;
            let wk = w * weight;
            if last {
                f(y, wk);
            } else {
                recurse(k + 1, rules, y, wk, f);
            }
        }
    }
    if rules.iter().any(|r| r.is_empty()) {
        return;
    }
    recurse(0, rules, &mut y, 1.0, f);
}

fn convolve_level(
    kernel: &dyn SolutionKernel,
    outputs: &[OutputSpec],
    points: &[EvalPoint],
    quad: &QuadConfig,
) -> Vec<Vec<f64>> {
    let n = kernel.dim();

    // Deduplicate derivative pairs across all terms.
    let mut pairs: Vec<DerivPair> = Vec::new();
    let mut terms: Vec<TermCtx> = Vec::new();
    for (oi, spec) in outputs.iter().enumerate() {
        for term in &spec.terms {
            let pair_idx = pairs
                .iter()
                .position(|p| *p == term.pair)
                .unwrap_or_else(|| {
                    pairs.push(term.pair.clone());
                    pairs.len() - 1
                });
            let feature = term.source.feature_scale();
            let tau_near = if term.source.support().is_none() {
                f64::INFINITY
            } else {
                0.25 * feature * feature
            };
            terms.push(TermCtx {
                output: oi,
                pair_idx,
                source: term.source,
                coeff: term.coeff,
                split: term.singular_split,
                tau_near,
                support: term.source.support(),
                time_range: term.source.time_range(),
                feature,
            });
        }
    }

    let mut results = vec![vec![0.0; points.len()]; outputs.len()];

    // Group evaluation points by time so slabs are shared.
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        groups.entry(p.t.to_bits()).or_default().push(i);
    }

    for (&tbits, idxs) in &groups {
        let t = f64::from_bits(tbits);
        let s_lo = terms
            .iter()
            .map(|c| c.time_range.0)
            .fold(f64::INFINITY, f64::min);
        let s_hi = terms
            .iter()
            .map(|c| c.time_range.1)
            .fold(f64::NEG_INFINITY, f64::max)
            .min(t);
        if !(s_hi > s_lo) {
            continue; // nothing active before t
        }
        let tau_hi = t - s_lo;
        let tau_floor = t - s_hi; // 0 when some source is active at t
        let sup_tot: f64 = terms.iter().map(|c| c.source.sup_bound()).sum();
        // keep t − τ strictly below t in floating point
        let ulp_floor = 8.0 * f64::EPSILON * t.abs().max(tau_hi);
        let tau_cut = if tau_floor > 0.0 {
            tau_floor
        } else {
            let eps = (quad.tol / (10.0 * sup_tot.max(1e-12))).powi(2);
            eps.clamp(1e-13 * tau_hi, 1e-4 * tau_hi).max(ulp_floor)
        };

        // Panel split points in w = ln τ: coefficient breakpoints, source
        // time kinks, near/far strategy switches.
        let mut wknots: Vec<f64> = Vec::new();
        {
            let mut push_tau = |tau: f64| {
                if tau > tau_cut * (1.0 + 1e-12) && tau < tau_hi * (1.0 - 1e-12) {
                    wknots.push(tau.ln());
                }
            };
            for &bp in kernel.breakpoints() {
                push_tau(t - bp);
            }
            for ctx in &terms {
                push_tau(t - ctx.time_range.0);
                push_tau(t - ctx.time_range.1);
                if ctx.tau_near.is_finite() {
                    push_tau(ctx.tau_near);
                }
                for k in ctx.source.time_knots() {
                    push_tau(t - k);
                }
            }
        }
        let edges = panel_edges(tau_cut.ln(), tau_hi.ln(), &wknots, quad.w_panel_width);
        let wrule = Rule1d::over_panels(&edges, quad.w_nodes);

        // Per s-node preparation: slab plus shared quadrature rules.
        struct SNode<'k> {
            s: f64,
            weight: f64,
            tau: f64,
            slab: Box<dyn SlabEval + Send + Sync + 'k>,
            radius: f64,
            sigma: f64,
            zeta_axis: Rule1d,
            /// source-centered groups: (representative term, members, per-axis rules)
            far_groups: Vec<(usize, Vec<usize>, Vec<Rule1d>)>,
        }
        let snodes: Vec<SNode> = wrule
            .nodes
            .iter()
            .zip(&wrule.weights)
            .map(|(&w, &gw)| {
                let tau = w.exp();
                let s = t - tau;
                let slab = kernel.slab(t, s, &pairs);
                let radius = slab.radius(1e-14);
                let sigma = slab.std_scale();
                let zeta_axis = zeta_axis_rule(sigma, radius, quad, None);

                let mut far_groups: Vec<(usize, Vec<usize>, Vec<Rule1d>)> = Vec::new();
                for (ti, ctx) in terms.iter().enumerate() {
                    if tau < ctx.tau_near || ctx.support.is_none() {
                        continue;
                    }
                    if s < ctx.time_range.0 || s > ctx.time_range.1 {
                        continue;
                    }
                    let (lo, hi) = ctx.support.clone().unwrap();
                    if let Some((_, members, _)) = far_groups.iter_mut().find(|(rep, _, _)| {
                        terms[*rep].support.as_ref() == Some(&(lo.clone(), hi.clone()))
                    }) {
                        members.push(ti);
                        continue;
                    }
                    let width =
                        (quad.src_panel_factor * ctx.feature.min(tau.sqrt())).max(1e-12);
                    let rules: Vec<Rule1d> = (0..n)
                        .map(|ax| {
                            let mut a = lo[ax];
                            let b = hi[ax];
                            if kernel.halfspace() && ax == n - 1 {
                                a = a.max(0.0);
                            }
                            if b <= a {
                                return Rule1d::default();
                            }
                            let panels = ((b - a) / width).ceil().max(1.0) as usize;
                            Rule1d::composite_gauss(a, b, panels, quad.src_nodes)
                        })
                        .collect();
                    far_groups.push((ti, vec![ti], rules));
                }

                SNode {
                    s,
                    weight: gw * tau,
                    tau,
                    slab,
                    radius,
                    sigma,
                    zeta_axis,
                    far_groups,
                }
            })
            .collect();

        // Parallel over evaluation points; deterministic assembly afterwards.
        let partials: Vec<Vec<Vec<f64>>> = idxs
            .par_iter()
            .map(|&pi| {
                let x = &points[pi].x;
                let mut per_output = vec![vec![0.0; snodes.len()]; outputs.len()];
                let mut kbuf = vec![0.0; pairs.len()];
                let mut y = vec![0.0; n];
                for (si, node) in snodes.iter().enumerate() {
                    let s = node.s;

                    // --- kernel-centered pass over near-regime terms ---
                    // terms sharing a source reuse one evaluation per node
                    let near_terms: Vec<(usize, f64, usize)> = {
                        let mut list: Vec<(usize, f64, usize)> = Vec::new();
                        let mut srcs: Vec<*const dyn SpaceTimeFn> = Vec::new();
                        for (ti, c) in terms.iter().enumerate() {
                            if !(node.tau < c.tau_near
                                && s >= c.time_range.0
                                && s <= c.time_range.1)
                            {
                                continue;
                            }
                            let fx = if c.split { c.source.eval(x, s) } else { 0.0 };
                            let keep = fx != 0.0
                                || match &c.support {
                                    None => true,
                                    Some((lo, hi)) => box_distance(x, lo, hi) <= node.radius,
                                };
                            if !keep {
                                continue;
                            }
                            let ptr = c.source as *const dyn SpaceTimeFn;
                            let sidx = srcs
                                .iter()
                                .position(|&p| std::ptr::eq(p, ptr))
                                .unwrap_or_else(|| {
                                    srcs.push(ptr);
                                    srcs.len() - 1
                                });
                            list.push((ti, fx, sidx));
                        }
                        list
                    };
                    let n_near_srcs = near_terms
                        .iter()
                        .map(|&(_, _, sidx)| sidx + 1)
                        .max()
                        .unwrap_or(0);
                    let mut src_vals = vec![0.0_f64; n_near_srcs];

                    if !near_terms.is_empty() {
                        // Unbounded sources oscillating faster than √τ need
                        // proportionally more nodes per axis.
                        let mut scale_up = 1usize;
                        for &(ti, _, _) in &near_terms {
                            let c = &terms[ti];
                            if c.support.is_none() && c.feature.is_finite() {
                                let f = (node.tau.sqrt() / c.feature).ceil();
                                scale_up = scale_up.max((f as usize).clamp(1, 8));
                            }
                        }
                        let scaled: Option<Rule1d> = (scale_up > 1).then(|| {
                            let mut q = quad.clone();
                            q.zeta_core_nodes *= scale_up;
                            q.zeta_tail_nodes *= scale_up;
                            zeta_axis_rule(node.sigma, node.radius, &q, None)
                        });
                        let base: &Rule1d = scaled.as_ref().unwrap_or(&node.zeta_axis);
                        // y_n = x_n − z_n > 0 requires z_n < x_n on the wall axis
                        let clipped: Option<Rule1d> =
                            (kernel.halfspace() && x[n - 1] < node.radius).then(|| {
                                let mut q = quad.clone();
                                q.zeta_core_nodes *= scale_up;
                                q.zeta_tail_nodes *= scale_up;
                                zeta_axis_rule(node.sigma, node.radius, &q, Some(x[n - 1]))
                            });
                        let last: &Rule1d = clipped.as_ref().unwrap_or(base);
                        let mut axis_refs: Vec<&Rule1d> = vec![base; n];
                        axis_refs[n - 1] = last;
                        let mut acc = vec![0.0; outputs.len()];
                        tensor_loop(&axis_refs, &mut |z: &[f64], wy: f64| {
                            for k in 0..n {
                                y[k] = x[k] - z[k];
                            }
                            node.slab.eval_into(x, &y, &mut kbuf);
                            let mut seen = 0usize;
                            for &(ti, _, sidx) in &near_terms {
                                if sidx >= seen {
                                    src_vals[sidx] = terms[ti].source.eval(&y, s);
                                    seen = sidx + 1;
                                }
                            }
                            for &(ti, fx, sidx) in &near_terms {
                                let c = &terms[ti];
                                let fv = src_vals[sidx] - fx;
                                if fv != 0.0 {
                                    acc[c.output] += wy * c.coeff * kbuf[c.pair_idx] * fv;
                                }
                            }
                        });
                        for (oi, a) in acc.iter().enumerate() {
                            per_output[oi][si] += a;
                        }
                    }

                    // --- source-centered passes, one per support box ---
                    for (rep, members, rules) in &node.far_groups {
                        let c0 = &terms[*rep];
                        let (lo, hi) = c0.support.as_ref().unwrap();
                        if box_distance(x, lo, hi) > node.radius {
                            continue;
                        }
                        let axis_refs: Vec<&Rule1d> = rules.iter().collect();
                        let mut acc = vec![0.0; outputs.len()];
                        // members sharing a source reuse one evaluation per node
                        let mut member_src: Vec<(usize, usize)> = Vec::new();
                        let mut srcs: Vec<*const dyn SpaceTimeFn> = Vec::new();
                        for &ti in members {
                            let ptr = terms[ti].source as *const dyn SpaceTimeFn;
                            let sidx = srcs
                                .iter()
                                .position(|&p| std::ptr::eq(p, ptr))
                                .unwrap_or_else(|| {
                                    srcs.push(ptr);
                                    srcs.len() - 1
                                });
                            member_src.push((ti, sidx));
                        }
                        let mut fvals = vec![0.0_f64; srcs.len()];
                        tensor_loop(&axis_refs, &mut |ynode: &[f64], wy: f64| {
                            node.slab.eval_into(x, ynode, &mut kbuf);
                            let mut seen = 0usize;
                            for &(ti, sidx) in &member_src {
                                if sidx >= seen {
                                    fvals[sidx] = terms[ti].source.eval(ynode, s);
                                    seen = sidx + 1;
                                }
                            }
                            for &(ti, sidx) in &member_src {
                                let c = &terms[ti];
                                let fv = fvals[sidx];
                                if fv != 0.0 {
                                    acc[c.output] += wy * c.coeff * kbuf[c.pair_idx] * fv;
                                }
                            }
                        });
                        for (oi, a) in acc.iter().enumerate() {
                            per_output[oi][si] += a;
                        }
                    }
                }
                per_output
            })
            .collect();

        for (local, &pi) in partials.iter().zip(idxs.iter()) {
            for (oi, per_snode) in local.iter().enumerate() {
                let weighted: Vec<f64> = per_snode
                    .iter()
                    .zip(snodes.iter())
                    .map(|(v, node)| v * node.weight)
                    .collect();
                results[oi][pi] = pairwise_sum(&weighted);
            }
        }
    }

    results
}

/// Evaluation points at the cell centers of a grid, time-major.
pub fn grid_eval_points(grid: &Grid) -> Vec<EvalPoint> {
    let mut pts = Vec::with_capacity(grid.ncells());
    for it in 0..grid.time.ncells() {
        let t = grid.time.center(it);
        for ix in 0..grid.ncells_space() {
            pts.push(EvalPoint {
                x: grid.space_center(ix),
                t,
            });
        }
    }
    pts
}

/// Solution plus derivative fields of a solve, with per-output quadrature
/// error estimates.
pub struct DerivativeBundle {
    pub u: SampledField,
    pub grad: Vec<SampledField>,
    pub second: Vec<(usize, usize, SampledField)>,
    pub u_t: SampledField,
    pub quad_errors: BTreeMap<String, f64>,
}

/// `u(x,t) = ∫∫ Γ f dy ds` on the cell centers of `grid`.
pub fn solve_whole_space(
    path: &CoefficientPath,
    f: &dyn SpaceTimeFn,
    grid: &Grid,
    quad: &QuadConfig,
    two_level: bool,
) -> Result<SampledField, ConvolveError> {
    let n = path.dim();
    let kernel = WholeSpaceConvolution { path };
    let outputs = vec![OutputSpec {
        tag: "u".to_string(),
        terms: vec![IntegrandTerm {
            pair: DerivPair::value(n),
            source: f,
            coeff: 1.0,
            singular_split: false,
        }],
    }];
    let pts = grid_eval_points(grid);
    let res = convolve(&kernel, &outputs, &pts, quad, two_level)?;
    Ok(SampledField::new(grid.clone(), res.values.into_iter().next().unwrap(), "u").unwrap())
}

/// The output list for a full solve: u, gradient, second derivatives.
pub(crate) fn full_outputs<'a>(
    n: usize,
    f: &'a dyn SpaceTimeFn,
) -> (Vec<OutputSpec<'a>>, Vec<(usize, usize)>) {
    let mut outputs = Vec::new();
    outputs.push(OutputSpec {
        tag: "u".to_string(),
        terms: vec![IntegrandTerm {
            pair: DerivPair::value(n),
            source: f,
            coeff: 1.0,
            singular_split: false,
        }],
    });
    for i in 0..n {
        let mut alpha = vec![0u32; n];
        alpha[i] = 1;
        outputs.push(OutputSpec {
            tag: format!("du{}", i + 1),
            terms: vec![IntegrandTerm {
                pair: DerivPair::dx(alpha, n),
                source: f,
                coeff: 1.0,
                singular_split: false,
            }],
        });
    }
    let mut sec_pairs = Vec::new();
    for i in 0..n {
        for j in i..n {
            let mut alpha = vec![0u32; n];
            alpha[i] += 1;
            alpha[j] += 1;
            sec_pairs.push((i, j));
            outputs.push(OutputSpec {
                tag: format!("d2u{}{}", i + 1, j + 1),
                terms: vec![IntegrandTerm {
                    pair: DerivPair::dx(alpha, n),
                    source: f,
                    coeff: 1.0,
                    singular_split: true,
                }],
            });
        }
    }
    (outputs, sec_pairs)
}

/// Whole-space solve returning `u`, `D_i u`, `D_i D_j u` (i ≤ j) and `∂_t u`
/// (recovered from the equation `∂_t u = a^{ij}(t) D_iD_j u + f`).
pub fn solve_whole_space_full(
    path: &CoefficientPath,
    f: &dyn SpaceTimeFn,
    grid: &Grid,
    quad: &QuadConfig,
    two_level: bool,
) -> Result<DerivativeBundle, ConvolveError> {
    let n = path.dim();
    let kernel = WholeSpaceConvolution { path };
    let (outputs, sec_pairs) = full_outputs(n, f);
    let pts = grid_eval_points(grid);
    let res = convolve(&kernel, &outputs, &pts, quad, two_level)?;
    bundle_from_outputs(path, f, grid, &outputs, res, sec_pairs)
}

pub(crate) fn bundle_from_outputs(
    path: &CoefficientPath,
    f: &dyn SpaceTimeFn,
    grid: &Grid,
    outputs: &[OutputSpec],
    res: ConvolveResult,
    sec_pairs: Vec<(usize, usize)>,
) -> Result<DerivativeBundle, ConvolveError> {
    let n = path.dim();
    let mut iter = res.values.into_iter();
    let u = SampledField::new(grid.clone(), iter.next().unwrap(), "u").unwrap();
    let mut grad = Vec::new();
    for i in 0..n {
        grad.push(
            SampledField::new(grid.clone(), iter.next().unwrap(), format!("du{}", i + 1))
                .unwrap(),
        );
    }
    let mut second = Vec::new();
    for &(i, j) in &sec_pairs {
        second.push((
            i,
            j,
            SampledField::new(
                grid.clone(),
                iter.next().unwrap(),
                format!("d2u{}{}", i + 1, j + 1),
            )
            .unwrap(),
        ));
    }

    // ∂_t u from the equation.
    let mut ut_vals = vec![0.0; grid.ncells()];
    let nspace = grid.ncells_space();
    for it in 0..grid.time.ncells() {
        let t = grid.time.center(it);
        let a = path.evaluate(t);
        for ix in 0..nspace {
            let x = grid.space_center(ix);
            let mut v = f.eval(&x, t);
            for (i, j, d2f) in &second {
                let mult = if i == j { 1.0 } else { 2.0 };
                v += mult * a[(*i, *j)] * d2f.value(it, ix);
            }
            ut_vals[it * nspace + ix] = v;
        }
    }
    let u_t = SampledField::new(grid.clone(), ut_vals, "ut").unwrap();

    let mut quad_errors = BTreeMap::new();
    for (spec, err) in outputs.iter().zip(&res.errors) {
        quad_errors.insert(spec.tag.clone(), *err);
    }
    Ok(DerivativeBundle {
        u,
        grad,
        second,
        u_t,
        quad_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Axis;
    use crate::source::{manufactured_rhs, ConstantSource, GaussianBump, SmoothBump};
    use nalgebra::DMatrix;

    fn piecewise_path(n: usize) -> CoefficientPath {
        let a1 = DMatrix::identity(n, n) * 1.6;
        let a2 = DMatrix::identity(n, n) * 0.7;
        CoefficientPath::new(vec![0.0, 0.5, 1.0], vec![a1, a2], 0.6, n).unwrap()
    }

    #[test]
    fn zero_source_gives_zero() {
        let path = piecewise_path(1);
        let bump = SmoothBump::new(vec![0.0], vec![0.5], 0.4, 0.3).with_amplitude(0.0);
        let grid = Grid {
            space: vec![Axis::uniform(-1.0, 1.0, 4)],
            time: Axis::uniform(0.0, 1.0, 2),
        };
        let u = solve_whole_space(&path, &bump, &grid, &QuadConfig::default(), false).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_source_integrates_to_elapsed_time() {
        // f ≡ 1 for s ∈ (0, ·): since ∫ Γ dy = 1 per slab, u(x, t) = t.
        let path = piecewise_path(1);
        let f = ConstantSource {
            dim: 1,
            value: 1.0,
            t_range: (0.0, 10.0),
        };
        let grid = Grid {
            space: vec![Axis::uniform(-0.5, 0.5, 2)],
            time: Axis::uniform(0.2, 1.0, 2),
        };
        let u = solve_whole_space(&path, &f, &grid, &QuadConfig::default(), true).unwrap();
        for it in 0..grid.time.ncells() {
            let t = grid.time.center(it);
            for ix in 0..grid.ncells_space() {
                assert!(
                    (u.value(it, ix) - t).abs() < 2e-5,
                    "u {} vs t {}",
                    u.value(it, ix),
                    t
                );
            }
        }
    }

    #[test]
    fn manufactured_solution_recovered() {
        let path = piecewise_path(1);
        let u_star = GaussianBump::new(vec![0.0], vec![0.3], 0.5, 0.12).with_amplitude(1.0);
        let f = manufactured_rhs(&u_star, &path);
        let grid = Grid {
            space: vec![Axis::uniform(-0.9, 0.9, 7)],
            time: Axis::uniform(0.3, 0.8, 3),
        };
        let u = solve_whole_space(&path, &f, &grid, &QuadConfig::default(), true).unwrap();
        let mut max_err = 0.0_f64;
        for it in 0..grid.time.ncells() {
            let t = grid.time.center(it);
            for ix in 0..grid.ncells_space() {
                let x = grid.space_center(ix);
                max_err = max_err.max((u.value(it, ix) - u_star.value(&x, t)).abs());
            }
        }
        assert!(max_err < 5e-5, "max manufactured error {max_err}");
    }

    #[test]
    fn second_derivatives_recovered_via_split() {
        let path = piecewise_path(1);
        let u_star = GaussianBump::new(vec![0.0], vec![0.3], 0.5, 0.12);
        let f = manufactured_rhs(&u_star, &path);
        let grid = Grid {
            space: vec![Axis::uniform(-0.5, 0.5, 4)],
            time: Axis::uniform(0.4, 0.7, 2),
        };
        let bundle =
            solve_whole_space_full(&path, &f, &grid, &QuadConfig::default(), false).unwrap();
        let mut max_err = 0.0_f64;
        let mut max_ut_err = 0.0_f64;
        for it in 0..grid.time.ncells() {
            let t = grid.time.center(it);
            for ix in 0..grid.ncells_space() {
                let x = grid.space_center(ix);
                let d2 = bundle.second[0].2.value(it, ix);
                max_err = max_err.max((d2 - u_star.dxi_dxj(0, 0, &x, t)).abs());
                let ut = bundle.u_t.value(it, ix);
                max_ut_err = max_ut_err.max((ut - u_star.dt(&x, t)).abs());
            }
        }
        assert!(max_err < 1e-3, "max d2 error {max_err}");
        assert!(max_ut_err < 1e-3, "max ut error {max_ut_err}");
    }
}
