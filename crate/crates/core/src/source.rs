//! Right-hand sides for the solution operators: smooth compactly supported
//! bumps, band-limited trigonometric packets, closure-backed analytic sources
//! and interpolants of sampled fields.

use crate::field::SampledField;
use crate::path::CoefficientPath;
use std::sync::Arc;

/// A space-time scalar field the convolution engine can integrate against.
pub trait SpaceTimeFn: Sync + Send {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], t: f64) -> f64;
    /// Spatial support box `(lo, hi)`; `None` means not compactly supported
    /// (the engine then always integrates on kernel-centered grids).
    fn support(&self) -> Option<(Vec<f64>, Vec<f64>)>;
    fn time_range(&self) -> (f64, f64);
    /// Smallest spatial length over which the source varies appreciably.
    fn feature_scale(&self) -> f64;
    fn sup_bound(&self) -> f64;
    /// Times where the source is not smooth (e.g. coefficient breakpoints
    /// baked into a manufactured right-hand side).
    fn time_knots(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// `amplitude · exp(1 − 1/(1 − ρ))` with `ρ = Σ((x_i−c_i)/w_i)² + ((t−c_t)/w_t)²`,
/// the classic C^∞ mollifier bump: identically zero outside the ellipsoid
/// ρ ≥ 1, equal to `amplitude` at the center. All derivatives used by
/// manufactured-solution tests are available in closed form.
#[derive(Debug, Clone)]
pub struct SmoothBump {
    pub center: Vec<f64>,
    pub widths: Vec<f64>,
    pub t_center: f64,
    pub t_width: f64,
    pub amplitude: f64,
}

impl SmoothBump {
    pub fn new(center: Vec<f64>, widths: Vec<f64>, t_center: f64, t_width: f64) -> Self {
        assert_eq!(center.len(), widths.len());
        SmoothBump {
            center,
            widths,
            t_center,
            t_width,
            amplitude: 1.0,
        }
    }

    pub fn with_amplitude(mut self, a: f64) -> Self {
        self.amplitude = a;
        self
    }

    fn rho(&self, x: &[f64], t: f64) -> f64 {
        let mut r = ((t - self.t_center) / self.t_width).powi(2);
        for ((xi, ci), wi) in x.iter().zip(&self.center).zip(&self.widths) {
            r += ((xi - ci) / wi).powi(2);
        }
        r
    }

    /// φ(ρ) and its first two derivatives in ρ.
    fn phi(rho: f64) -> (f64, f64, f64) {
        if rho >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        let g = 1.0 / (1.0 - rho);
        let phi = (1.0 - g).exp();
        let d1 = -phi * g * g;
        let d2 = phi * (g.powi(4) - 2.0 * g.powi(3));
        (phi, d1, d2)
    }

    pub fn value(&self, x: &[f64], t: f64) -> f64 {
        self.amplitude * Self::phi(self.rho(x, t)).0
    }

    pub fn dt(&self, x: &[f64], t: f64) -> f64 {
        let (_, d1, _) = Self::phi(self.rho(x, t));
        self.amplitude * d1 * 2.0 * (t - self.t_center) / (self.t_width * self.t_width)
    }

    pub fn dxi(&self, i: usize, x: &[f64], t: f64) -> f64 {
        let (_, d1, _) = Self::phi(self.rho(x, t));
        self.amplitude * d1 * 2.0 * (x[i] - self.center[i]) / (self.widths[i] * self.widths[i])
    }

    pub fn dxi_dxj(&self, i: usize, j: usize, x: &[f64], t: f64) -> f64 {
        let (_, d1, d2) = Self::phi(self.rho(x, t));
        let ri = 2.0 * (x[i] - self.center[i]) / (self.widths[i] * self.widths[i]);
        let rj = 2.0 * (x[j] - self.center[j]) / (self.widths[j] * self.widths[j]);
        let rij = if i == j {
            2.0 / (self.widths[i] * self.widths[i])
        } else {
            0.0
        };
        self.amplitude * (d2 * ri * rj + d1 * rij)
    }
}

impl SpaceTimeFn for SmoothBump {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn eval(&self, x: &[f64], t: f64) -> f64 {
        self.value(x, t)
    }

    fn support(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let lo = self
            .center
            .iter()
            .zip(&self.widths)
            .map(|(c, w)| c - w)
            .collect();
        let hi = self
            .center
            .iter()
            .zip(&self.widths)
            .map(|(c, w)| c + w)
            .collect();
        Some((lo, hi))
    }

    fn time_range(&self) -> (f64, f64) {
        (self.t_center - self.t_width, self.t_center + self.t_width)
    }

    fn feature_scale(&self) -> f64 {
        0.5 * self.widths.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    fn sup_bound(&self) -> f64 {
        self.amplitude.abs()
    }
}

/// Gaussian profile `amplitude · exp(−ρ/2)` truncated at `ρ = cutoff²`,
/// with `ρ = Σ((x_i−c_i)/w_i)² + ((t−c_t)/w_t)²`. Compactly supported with a
/// jump of `exp(−cutoff²/2)` at the edge (≈ 1.5e−8 at the default cutoff 6,
/// below the quadrature tolerances used against it), and analytic inside, so
/// tensor Gauss rules converge spectrally — unlike the flat-edge mollifier.
#[derive(Debug, Clone)]
pub struct GaussianBump {
    pub center: Vec<f64>,
    pub widths: Vec<f64>,
    pub t_center: f64,
    pub t_width: f64,
    pub amplitude: f64,
    pub cutoff: f64,
}

impl GaussianBump {
    pub fn new(center: Vec<f64>, widths: Vec<f64>, t_center: f64, t_width: f64) -> Self {
        assert_eq!(center.len(), widths.len());
        GaussianBump {
            center,
            widths,
            t_center,
            t_width,
            amplitude: 1.0,
            cutoff: 6.0,
        }
    }

    pub fn with_amplitude(mut self, a: f64) -> Self {
        self.amplitude = a;
        self
    }

    pub fn with_cutoff(mut self, c: f64) -> Self {
        self.cutoff = c;
        self
    }

    fn rho(&self, x: &[f64], t: f64) -> f64 {
        let mut r = ((t - self.t_center) / self.t_width).powi(2);
        for ((xi, ci), wi) in x.iter().zip(&self.center).zip(&self.widths) {
            r += ((xi - ci) / wi).powi(2);
        }
        r
    }

    pub fn value(&self, x: &[f64], t: f64) -> f64 {
        let rho = self.rho(x, t);
        if rho >= self.cutoff * self.cutoff {
            return 0.0;
        }
        self.amplitude * (-0.5 * rho).exp()
    }

    pub fn dt(&self, x: &[f64], t: f64) -> f64 {
        -self.value(x, t) * (t - self.t_center) / (self.t_width * self.t_width)
    }

    pub fn dxi(&self, i: usize, x: &[f64], t: f64) -> f64 {
        -self.value(x, t) * (x[i] - self.center[i]) / (self.widths[i] * self.widths[i])
    }

    pub fn dxi_dxj(&self, i: usize, j: usize, x: &[f64], t: f64) -> f64 {
        let v = self.value(x, t);
        let gi = (x[i] - self.center[i]) / (self.widths[i] * self.widths[i]);
        let gj = (x[j] - self.center[j]) / (self.widths[j] * self.widths[j]);
        let diag = if i == j {
            1.0 / (self.widths[i] * self.widths[i])
        } else {
            0.0
        };
        v * (gi * gj - diag)
    }
}

impl SpaceTimeFn for GaussianBump {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn eval(&self, x: &[f64], t: f64) -> f64 {
        self.value(x, t)
    }

    fn support(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let lo = self
            .center
            .iter()
            .zip(&self.widths)
            .map(|(c, w)| c - self.cutoff * w)
            .collect();
        let hi = self
            .center
            .iter()
            .zip(&self.widths)
            .map(|(c, w)| c + self.cutoff * w)
            .collect();
        Some((lo, hi))
    }

    fn time_range(&self) -> (f64, f64) {
        (
            self.t_center - self.cutoff * self.t_width,
            self.t_center + self.cutoff * self.t_width,
        )
    }

    fn feature_scale(&self) -> f64 {
        self.widths.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    fn sup_bound(&self) -> f64 {
        self.amplitude.abs()
    }
}

/// Sources with analytic time derivative, gradient and Hessian: the inputs
/// manufactured right-hand sides are built from.
pub trait BumpLike: SpaceTimeFn {
    fn value(&self, x: &[f64], t: f64) -> f64;
    fn dt(&self, x: &[f64], t: f64) -> f64;
    fn dxi(&self, i: usize, x: &[f64], t: f64) -> f64;
    fn dxi_dxj(&self, i: usize, j: usize, x: &[f64], t: f64) -> f64;
}

impl BumpLike for SmoothBump {
    fn value(&self, x: &[f64], t: f64) -> f64 {
        SmoothBump::value(self, x, t)
    }
    fn dt(&self, x: &[f64], t: f64) -> f64 {
        SmoothBump::dt(self, x, t)
    }
    fn dxi(&self, i: usize, x: &[f64], t: f64) -> f64 {
        SmoothBump::dxi(self, i, x, t)
    }
    fn dxi_dxj(&self, i: usize, j: usize, x: &[f64], t: f64) -> f64 {
        SmoothBump::dxi_dxj(self, i, j, x, t)
    }
}

impl BumpLike for GaussianBump {
    fn value(&self, x: &[f64], t: f64) -> f64 {
        GaussianBump::value(self, x, t)
    }
    fn dt(&self, x: &[f64], t: f64) -> f64 {
        GaussianBump::dt(self, x, t)
    }
    fn dxi(&self, i: usize, x: &[f64], t: f64) -> f64 {
        GaussianBump::dxi(self, i, x, t)
    }
    fn dxi_dxj(&self, i: usize, j: usize, x: &[f64], t: f64) -> f64 {
        GaussianBump::dxi_dxj(self, i, j, x, t)
    }
}

/// `cos(k·x + ω t + phase)` under a compactly supported envelope.
#[derive(Debug, Clone)]
pub struct TrigPacket {
    pub wave: Vec<f64>,
    pub omega: f64,
    pub phase: f64,
    pub envelope: GaussianBump,
}

impl SpaceTimeFn for TrigPacket {
    fn dim(&self) -> usize {
        self.envelope.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> f64 {
        let arg: f64 =
            x.iter().zip(&self.wave).map(|(xi, ki)| xi * ki).sum::<f64>() + self.omega * t
                + self.phase;
        arg.cos() * self.envelope.value(x, t)
    }

    fn support(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.envelope.support()
    }

    fn time_range(&self) -> (f64, f64) {
        self.envelope.time_range()
    }

    fn feature_scale(&self) -> f64 {
        let kmax = self.wave.iter().map(|k| k.abs()).fold(0.0, f64::max);
        let osc = if kmax > 0.0 { 1.0 / kmax } else { f64::INFINITY };
        self.envelope.feature_scale().min(osc)
    }

    fn sup_bound(&self) -> f64 {
        self.envelope.sup_bound()
    }
}

/// Closure-backed source for manufactured right-hand sides.
pub struct AnalyticSource {
    pub f: Arc<dyn Fn(&[f64], f64) -> f64 + Sync + Send>,
    pub dim: usize,
    pub support: Option<(Vec<f64>, Vec<f64>)>,
    pub time_range: (f64, f64),
    pub feature_scale: f64,
    pub sup_bound: f64,
    pub knots: Vec<f64>,
}

impl SpaceTimeFn for AnalyticSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], t: f64) -> f64 {
        if t < self.time_range.0 || t > self.time_range.1 {
            return 0.0;
        }
        (self.f)(x, t)
    }

    fn support(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.support.clone()
    }

    fn time_range(&self) -> (f64, f64) {
        self.time_range
    }

    fn feature_scale(&self) -> f64 {
        self.feature_scale
    }

    fn sup_bound(&self) -> f64 {
        self.sup_bound
    }

    fn time_knots(&self) -> Vec<f64> {
        self.knots.clone()
    }
}

/// The right-hand side `f = ∂_t u* − a^{ij}(t) D_i D_j u*` induced by a bump
/// chosen as the manufactured solution. The coefficient jumps of the path are
/// reported as time knots so quadrature panels split there.
pub fn manufactured_rhs<B: BumpLike + Clone + Send + Sync + 'static>(
    u_star: &B,
    path: &CoefficientPath,
) -> AnalyticSource {
    assert_eq!(u_star.dim(), path.dim());
    let u = u_star.clone();
    let p = path.clone();
    let n = path.dim();
    let sup = {
        // Crude but safe bound: amplitude times the largest derivative scale.
        let wmin = u_star.feature_scale();
        u_star.sup_bound() * (1.0 + (n * n) as f64 / (p.nu() * wmin * wmin)) * 60.0
    };
    AnalyticSource {
        f: Arc::new(move |x, t| {
            let a = p.evaluate(t);
            let mut val = u.dt(x, t);
            for i in 0..n {
                for j in 0..n {
                    let aij = a[(i, j)];
                    if aij != 0.0 {
                        val -= aij * u.dxi_dxj(i, j, x, t);
                    }
                }
            }
            val
        }),
        dim: n,
        support: u_star.support(),
        time_range: u_star.time_range(),
        feature_scale: u_star.feature_scale(),
        sup_bound: sup,
        knots: path.breakpoints().to_vec(),
    }
}

/// Constant-in-space source over a time window (not compactly supported).
pub struct ConstantSource {
    pub dim: usize,
    pub value: f64,
    pub t_range: (f64, f64),
}

impl SpaceTimeFn for ConstantSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _x: &[f64], t: f64) -> f64 {
        if t >= self.t_range.0 && t <= self.t_range.1 {
            self.value
        } else {
            0.0
        }
    }

    fn support(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    fn time_range(&self) -> (f64, f64) {
        self.t_range
    }

    fn feature_scale(&self) -> f64 {
        f64::INFINITY
    }

    fn sup_bound(&self) -> f64 {
        self.value.abs()
    }
}

/// Multilinear interpolant of a cell-centered sampled field, zero outside the
/// grid box. Lets the solution operators consume serialized right-hand sides.
pub struct InterpolatedField<'a> {
    pub field: &'a SampledField,
}

impl InterpolatedField<'_> {
    fn interp_axis(centers: &[f64], v: f64) -> (usize, usize, f64) {
        // Clamped linear interpolation between adjacent cell centers.
        if v <= centers[0] {
            return (0, 0, 0.0);
        }
        if v >= *centers.last().unwrap() {
            let last = centers.len() - 1;
            return (last, last, 0.0);
        }
        let hi = centers.partition_point(|&c| c <= v);
        let lo = hi - 1;
        let w = (v - centers[lo]) / (centers[hi] - centers[lo]);
        (lo, hi, w)
    }
}

impl SpaceTimeFn for InterpolatedField<'_> {
    fn dim(&self) -> usize {
        self.field.grid.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> f64 {
        let grid = &self.field.grid;
        if t < grid.time.lo() || t > grid.time.hi() {
            return 0.0;
        }
        for (xi, ax) in x.iter().zip(&grid.space) {
            if *xi < ax.lo() || *xi > ax.hi() {
                return 0.0;
            }
        }
        let tc = grid.time.centers();
        let (t0, t1, wt) = Self::interp_axis(&tc, t);
        let axes_interp: Vec<(usize, usize, f64)> = x
            .iter()
            .zip(&grid.space)
            .map(|(xi, ax)| Self::interp_axis(&ax.centers(), *xi))
            .collect();
        let mut acc = 0.0;
        // Tensor-product blend over the 2^(d+1) corner cells.
        let corners = 1usize << x.len();
        for (ti, tw) in [(t0, 1.0 - wt), (t1, wt)] {
            if tw == 0.0 && t0 != t1 {
                continue;
            }
            for mask in 0..corners {
                let mut w = tw;
                let mut flat = 0;
                for (k, (lo, hi, frac)) in axes_interp.iter().enumerate() {
                    let (idx, cw) = if mask >> k & 1 == 0 {
                        (*lo, 1.0 - frac)
                    } else {
                        (*hi, *frac)
                    };
                    if *lo == *hi && mask >> k & 1 == 1 {
                        w = 0.0;
                    }
                    w *= cw.max(0.0);
                    flat = flat * grid.space[k].ncells() + idx;
                }
                if w != 0.0 {
                    acc += w * self.field.value(ti, flat);
                }
            }
        }
        acc
    }

    fn support(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let grid = &self.field.grid;
        Some((
            grid.space.iter().map(|a| a.lo()).collect(),
            grid.space.iter().map(|a| a.hi()).collect(),
        ))
    }

    fn time_range(&self) -> (f64, f64) {
        (self.field.grid.time.lo(), self.field.grid.time.hi())
    }

    fn feature_scale(&self) -> f64 {
        self.field
            .grid
            .space
            .iter()
            .map(|ax| {
                (0..ax.ncells())
                    .map(|i| ax.width(i))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn sup_bound(&self) -> f64 {
        self.field.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn time_knots(&self) -> Vec<f64> {
        self.field.grid.time.centers()
    }
}
