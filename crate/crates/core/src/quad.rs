//! Quadrature building blocks: Gauss–Legendre rules, panel subdivision and
//! deterministic pairwise summation.

/// Gauss–Legendre nodes and weights on `[-1, 1]`, by Newton iteration on the
/// Legendre recurrence. Accurate to machine precision for n up to several
/// hundred.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for k in 0..m {
        // Chebyshev-like initial guess.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n and P_n' by upward recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[k] = -x;
        nodes[n - 1 - k] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[k] = w;
        weights[n - 1 - k] = w;
    }
    if n == 1 {
        nodes[0] = 0.0;
        weights[0] = 2.0;
    }
    if n % 2 == 1 && n > 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// A 1-D quadrature rule as explicit (node, weight) pairs.
#[derive(Debug, Clone, Default)]
pub struct Rule1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule1d {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gauss–Legendre rule mapped to `[a, b]`.
    pub fn gauss(a: f64, b: f64, n: usize) -> Self {
        let (xs, ws) = gauss_legendre(n);
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        Rule1d {
            nodes: xs.iter().map(|x| mid + half * x).collect(),
            weights: ws.iter().map(|w| w * half).collect(),
        }
    }

    /// Composite Gauss rule: `panels` equal panels on `[a, b]`, `n` nodes each.
    pub fn composite_gauss(a: f64, b: f64, panels: usize, n: usize) -> Self {
        let mut rule = Rule1d::default();
        for k in 0..panels {
            let pa = a + (b - a) * k as f64 / panels as f64;
            let pb = a + (b - a) * (k + 1) as f64 / panels as f64;
            rule.extend(Rule1d::gauss(pa, pb, n));
        }
        rule
    }

    /// Composite Gauss rule over a list of panel edges.
    pub fn over_panels(edges: &[f64], n: usize) -> Self {
        let mut rule = Rule1d::default();
        for w in edges.windows(2) {
            if w[1] > w[0] {
                rule.extend(Rule1d::gauss(w[0], w[1], n));
            }
        }
        rule
    }

    pub fn extend(&mut self, other: Rule1d) {
        self.nodes.extend(other.nodes);
        self.weights.extend(other.weights);
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let vals: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .collect();
        pairwise_sum(&vals)
    }
}

/// Subdivide `[a, b]` so that no panel is wider than `max_width`, keeping the
/// interior split points in `knots` as panel edges (kinks of the integrand).
pub fn panel_edges(a: f64, b: f64, knots: &[f64], max_width: f64) -> Vec<f64> {
    assert!(b > a);
    let mut cuts: Vec<f64> = vec![a];
    let mut inner: Vec<f64> = knots
        .iter()
        .cloned()
        .filter(|&k| k > a + 1e-300 && k < b)
        .collect();
    inner.sort_by(|x, y| x.partial_cmp(y).unwrap());
    inner.dedup();
    cuts.extend(inner);
    cuts.push(b);
    let mut edges = Vec::new();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            continue;
        }
        let parts = ((hi - lo) / max_width).ceil().max(1.0) as usize;
        for k in 0..parts {
            edges.push(lo + (hi - lo) * k as f64 / parts as f64);
        }
    }
    edges.push(b);
    edges.dedup();
    edges
}

/// Pairwise (cascade) summation: deterministic and far more accurate than a
/// running sum for long vectors.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
