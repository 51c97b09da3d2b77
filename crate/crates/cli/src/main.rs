//! `parakernel`: kernel evaluation, bound certification, coercive sweeps and
//! cylinder solves, with reproducible configs and machine-readable reports.
//!
//! Exit codes: 0 success, 1 verification failure (bound violated or sweep
//! unbounded in range, or comparison drift), 2 usage error, 3 numerical
//! failure.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use parakernel::convolve::QuadConfig;
use parakernel::estimate::{
    certify_bound, coercive_sweep, mollify_and_compare, BoundTemplate, KernelId, ProbeSpec,
    SweepConfig, SweepDomain, SweepGeometry,
};
use parakernel::field::SampledField;
use parakernel::halfspace::{shear_matrix, shear_path, HalfspaceKernelHandle, HsMode};
use parakernel::kernel::{KernelQuery, WholeSpaceKernel};
use parakernel::norms::Nesting;
use parakernel::path::{CoefficientPath, PathSpec};
use parakernel::report::{atomic_write, config_hash, SweepReport, Verdict};
use parakernel::solver::{
    solution_to_field, DomainChart, Drift, FaceBc, IbvpProblem, Mesh, MeshAxis, ObliqueField,
};
use parakernel::source::{InterpolatedField, SpaceTimeFn};

/// Marker for operator/usage errors (exit code 2).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

#[derive(Parser)]
#[command(name = "parakernel", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate Green-kernel queries from a JSON file to CSV.
    Kernel(KernelArgs),
    /// Certify a pointwise kernel bound family; exit 1 on FAIL.
    Verify(VerifyArgs),
    /// Coercive-ratio sweep over the weight exponent mu.
    Scan(ScanArgs),
    /// Finite-difference solve of the oblique IBVP on a bounded cylinder.
    Solve(SolveArgs),
    /// Compare two sweep reports point by point; exit 1 on drift.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelType {
    Whole,
    Dirichlet,
    Neumann,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelMode {
    Image,
    Integral,
    Oracle,
}

#[derive(Args)]
struct KernelArgs {
    #[arg(long = "type", value_enum)]
    kernel_type: KernelType,
    #[arg(long, value_enum, default_value = "image")]
    mode: KernelMode,
    #[arg(long)]
    query_file: PathBuf,
    #[arg(long)]
    path: PathBuf,
    #[arg(long, default_value_t = 4)]
    max_order: usize,
    /// Constant oblique field: queries are reduced to D_n u = 0 by a shear.
    #[arg(long)]
    shear: Option<PathBuf>,
    #[arg(long, default_value = "kernel_values.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundName {
    Gamma,
    DsGamma,
    Dirichlet,
    DsDirichlet,
    Neumann,
    DsNeumann,
}

impl From<BoundName> for KernelId {
    fn from(b: BoundName) -> KernelId {
        match b {
            BoundName::Gamma => KernelId::Gamma,
            BoundName::DsGamma => KernelId::DsGamma,
            BoundName::Dirichlet => KernelId::Dirichlet,
            BoundName::DsDirichlet => KernelId::DsDirichlet,
            BoundName::Neumann => KernelId::Neumann,
            BoundName::DsNeumann => KernelId::DsNeumann,
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    bound: BoundName,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "verify_out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleName {
    /// time-outer nesting, the L_{p,q} scale
    Lpq,
    /// space-outer nesting, the tilde scale
    Tilde,
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long, value_enum)]
    scale: ScaleName,
    #[arg(long)]
    p: f64,
    #[arg(long)]
    q: f64,
    #[arg(long)]
    mu_from: f64,
    #[arg(long)]
    mu_to: f64,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "scan_out")]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    domain: PathBuf,
    #[arg(long)]
    path: PathBuf,
    #[arg(long)]
    gamma: Option<PathBuf>,
    #[arg(long = "f")]
    f_file: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    t0: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    steps: usize,
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value = "comparison.json")]
    out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct VerifyConfig {
    path: PathSpec,
    #[serde(default = "default_order_cap")]
    order_cap: usize,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default)]
    probes: Option<ProbeSpec>,
    #[serde(default)]
    seed: u64,
    /// also run the falsification controls (each R exponent inflated by one)
    #[serde(default)]
    falsify: bool,
}

fn default_order_cap() -> usize {
    2
}

fn default_epsilon() -> f64 {
    0.1
}

#[derive(Debug, Serialize, Deserialize)]
struct ScanConfig {
    path: PathSpec,
    #[serde(default = "default_domain")]
    domain: SweepDomain,
    #[serde(default = "default_family")]
    family_size: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    geometry: Option<SweepGeometry>,
    /// quadrature preset: "sweep" (default) or "accurate"
    #[serde(default)]
    quad: Option<String>,
}

fn default_domain() -> SweepDomain {
    SweepDomain::HalfspaceOblique
}

fn default_family() -> usize {
    12
}

#[derive(Debug, Serialize, Deserialize)]
struct GammaSpec {
    gamma: Vec<f64>,
    #[serde(default = "default_gamma0")]
    gamma0: f64,
}

fn default_gamma0() -> f64 {
    0.1
}

#[derive(Debug, Serialize, Deserialize)]
struct GradeSpec {
    axis: usize,
    ratio: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum DomainSpec {
    Rectangle {
        lo: Vec<f64>,
        hi: Vec<f64>,
        nnodes: Vec<usize>,
        #[serde(default)]
        dirichlet_faces: Vec<usize>,
        #[serde(default)]
        graded: Option<GradeSpec>,
    },
    /// half-strip: a rectangle whose face x_n = 0 is the physical wall and
    /// whose opposite face is an artificial truncation (Dirichlet)
    HalfStrip {
        lo: Vec<f64>,
        hi: Vec<f64>,
        nnodes: Vec<usize>,
        #[serde(default)]
        graded: Option<GradeSpec>,
    },
    Graph {
        x1_lo: f64,
        x1_hi: f64,
        height: f64,
        kink: f64,
        coef: f64,
        delta: f64,
        nnodes: Vec<usize>,
        #[serde(default)]
        dirichlet_faces: Vec<usize>,
        #[serde(default)]
        graded: Option<GradeSpec>,
    },
}

fn main() {
    if let Ok(threads) = std::env::var("PARAKERNEL_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<Usage>().is_some() { 2 } else { 3 };
            std::process::exit(code);
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Kernel(args) => cmd_kernel(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Scan(args) => cmd_scan(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("malformed {}: {e}", path.display())))
}

fn load_path(path_file: &Path) -> Result<CoefficientPath> {
    let spec: PathSpec = load_json(path_file)?;
    CoefficientPath::from_spec(&spec)
        .map_err(|e| usage(format!("invalid coefficient path: {e}")))
}

fn cmd_kernel(args: KernelArgs) -> Result<i32> {
    let mut path = load_path(&args.path)?;
    let mut queries: Vec<KernelQuery> = load_json(&args.query_file)?;

    if let Some(shear_file) = &args.shear {
        let gs: GammaSpec = load_json(shear_file)?;
        if gs.gamma.len() != path.dim() {
            return Err(usage("shear gamma dimension mismatch"));
        }
        if queries.iter().any(|q| q.order() > 0) {
            return Err(usage(
                "--shear supports value queries only: derivative multi-indices do not \
                 transform componentwise under the change of variables",
            ));
        }
        let s = shear_matrix(&gs.gamma);
        path = shear_path(&path, &s)
            .map_err(|e| usage(format!("sheared path fails ellipticity validation: {e}")))?;
        let n = path.dim();
        for q in &mut queries {
            let sx: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| s[(i, j)] * q.x[j]).sum())
                .collect();
            let sy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| s[(i, j)] * q.y[j]).sum())
                .collect();
            q.x = sx;
            q.y = sy;
        }
    }

    let mut rows = String::from("index,value\n");
    for (k, q) in queries.iter().enumerate() {
        let value = match args.kernel_type {
            KernelType::Whole => WholeSpaceKernel::new(&path)
                .with_max_order(args.max_order)
                .derivative(q)
                .with_context(|| format!("query {k}"))?,
            KernelType::Dirichlet | KernelType::Neumann => {
                let mode = match args.mode {
                    KernelMode::Image => HsMode::Image,
                    KernelMode::Integral => HsMode::IntegralOfDirichlet,
                    KernelMode::Oracle => HsMode::NumericOracle,
                };
                let handle = HalfspaceKernelHandle::new(&path, mode)
                    .map_err(|e| usage(e.to_string()))?
                    .with_max_order(args.max_order);
                match args.kernel_type {
                    KernelType::Dirichlet => handle.dirichlet_deriv(q),
                    _ => handle.neumann_deriv(q),
                }
                .with_context(|| format!("query {k}"))?
            }
        };
        rows.push_str(&format!("{k},{value}\n"));
    }
    atomic_write(&args.out, rows.as_bytes())?;
    println!("wrote {} values to {}", queries.len(), args.out.display());
    Ok(0)
}

#[derive(Serialize)]
struct VerifySummary {
    bound: String,
    config_hash: String,
    seed: u64,
    epsilon: f64,
    order_cap: usize,
    sigma_bundle: f64,
    all_pass: bool,
    falsification_all_fail: Option<bool>,
    templates: Vec<TemplateOutcome>,
}

#[derive(Serialize)]
struct TemplateOutcome {
    alpha: Vec<u32>,
    beta: Vec<u32>,
    sigma: f64,
    c: f64,
    max_ratio: f64,
    verdict: Verdict,
}

fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    let cfg_text = std::fs::read_to_string(&args.config)
        .map_err(|e| usage(format!("cannot read config: {e}")))?;
    let cfg: VerifyConfig =
        serde_json::from_str(&cfg_text).map_err(|e| usage(format!("malformed config: {e}")))?;
    let path = CoefficientPath::from_spec(&cfg.path)
        .map_err(|e| usage(format!("invalid coefficient path: {e}")))?;
    let kernel: KernelId = args.bound.into();
    let probes = cfg.probes.clone().unwrap_or_default();

    let pairs = parakernel::estimate::index_pairs(path.dim(), cfg.order_cap);
    let mut templates = Vec::new();
    let mut sigma_bundle = f64::INFINITY;
    let mut all_pass = true;
    let mut csv = String::from("alpha,beta,sigma,c,max_ratio,verdict\n");
    for (alpha, beta) in pairs {
        let template = BoundTemplate::paper(kernel, alpha.clone(), beta.clone(), cfg.epsilon, path.dim());
        let report = certify_bound(&path, &template, &probes, cfg.seed)?;
        let fit = report.fit.clone().unwrap();
        let max_ratio = report
            .points
            .iter()
            .map(|p| p.value)
            .fold(0.0_f64, f64::max);
        sigma_bundle = sigma_bundle.min(fit.sigma);
        all_pass &= report.verdict.passed();
        csv.push_str(&format!(
            "\"{alpha:?}\",\"{beta:?}\",{},{},{max_ratio},{}\n",
            fit.sigma,
            fit.c,
            match &report.verdict {
                Verdict::Pass => "PASS".to_string(),
                Verdict::Fail { reason } => format!("FAIL: {reason}"),
                Verdict::Info => "INFO".to_string(),
            }
        ));
        templates.push(TemplateOutcome {
            alpha,
            beta,
            sigma: fit.sigma,
            c: fit.c,
            max_ratio,
            verdict: report.verdict,
        });
    }

    // falsification controls: inflate each applicable R exponent by one
    let falsification_all_fail = if cfg.falsify && kernel.is_halfspace() {
        let mut all_fail = true;
        for bump_x in [true, false] {
            let base = BoundTemplate::paper(
                kernel,
                vec![0; path.dim()],
                vec![0; path.dim()],
                cfg.epsilon,
                path.dim(),
            );
            let wrong = if bump_x {
                base.with_rx_power(1.0)
            } else {
                base.with_ry_power(1.0)
            };
            let report = certify_bound(&path, &wrong, &probes, cfg.seed)?;
            all_fail &= !report.verdict.passed();
        }
        Some(all_fail)
    } else {
        None
    };

    let summary = VerifySummary {
        bound: format!("{:?}", kernel),
        config_hash: config_hash(cfg_text.as_bytes()),
        seed: cfg.seed,
        epsilon: cfg.epsilon,
        order_cap: cfg.order_cap,
        sigma_bundle,
        all_pass,
        falsification_all_fail,
        templates,
    };
    std::fs::create_dir_all(&args.out)?;
    atomic_write(
        &args.out.join("report.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    atomic_write(&args.out.join("report.csv"), csv.as_bytes())?;

    let ok = all_pass && falsification_all_fail.unwrap_or(true);
    println!(
        "verify {:?}: {} ({} templates, sigma_bundle = {})",
        kernel,
        if ok { "PASS" } else { "FAIL" },
        summary.templates.len(),
        sigma_bundle
    );
    Ok(if ok { 0 } else { 1 })
}

fn cmd_scan(args: ScanArgs) -> Result<i32> {
    let cfg_text = std::fs::read_to_string(&args.config)
        .map_err(|e| usage(format!("cannot read config: {e}")))?;
    let cfg: ScanConfig =
        serde_json::from_str(&cfg_text).map_err(|e| usage(format!("malformed config: {e}")))?;
    let path = CoefficientPath::from_spec(&cfg.path)
        .map_err(|e| usage(format!("invalid coefficient path: {e}")))?;
    if args.steps < 1 {
        return Err(usage("--steps must be at least 1"));
    }
    let mu_values: Vec<f64> = (0..args.steps)
        .map(|k| {
            if args.steps == 1 {
                args.mu_from
            } else {
                args.mu_from
                    + (args.mu_to - args.mu_from) * k as f64 / (args.steps - 1) as f64
            }
        })
        .collect();
    let sweep_cfg = SweepConfig {
        domain: cfg.domain,
        p: args.p,
        q: args.q,
        nesting: match args.scale {
            ScaleName::Lpq => Nesting::TimeOuter,
            ScaleName::Tilde => Nesting::SpaceOuter,
        },
        mu_values,
        family_size: cfg.family_size,
        seed: cfg.seed,
        geometry: cfg.geometry.clone().unwrap_or_default(),
    };
    let quad = match cfg.quad.as_deref() {
        None | Some("sweep") => QuadConfig::sweep(),
        Some("accurate") => QuadConfig::default(),
        Some(other) => return Err(usage(format!("unknown quad preset {other}"))),
    };
    let mut report = coercive_sweep(&path, &sweep_cfg, &quad)?;
    report.provenance.config_hash = config_hash(cfg_text.as_bytes());
    std::fs::create_dir_all(&args.out)?;
    report.write_all(&args.out, "sweep")?;
    let ok = report.verdict.passed();
    println!(
        "scan: {} over {} mu points (reports in {})",
        if ok { "PASS" } else { "FAIL" },
        report.points.len(),
        args.out.display()
    );
    Ok(if ok { 0 } else { 1 })
}

fn build_mesh(nnodes: &[usize], lo: &[f64], hi: &[f64], graded: &Option<GradeSpec>) -> Result<Mesh> {
    if nnodes.len() != lo.len() {
        return Err(usage("nnodes length must match the dimension"));
    }
    let axes = nnodes
        .iter()
        .enumerate()
        .map(|(k, &n)| match graded {
            Some(g) if g.axis == k => MeshAxis::graded(lo[k], hi[k], n, g.ratio),
            _ => MeshAxis::uniform(lo[k], hi[k], n),
        })
        .collect();
    Ok(Mesh { axes })
}

fn cmd_solve(args: SolveArgs) -> Result<i32> {
    let domain: DomainSpec = load_json(&args.domain)?;
    let path = load_path(&args.path)?;
    let gamma: Option<GammaSpec> = match &args.gamma {
        Some(p) => Some(load_json(p)?),
        None => None,
    };
    let f_field = SampledField::read(&args.f_file)
        .map_err(|e| usage(format!("cannot read rhs field: {e}")))?;
    let f_interp = InterpolatedField { field: &f_field };

    let oblique_bc = |n: usize, axis: usize| -> FaceBc {
        match &gamma {
            Some(g) => FaceBc::Oblique(ObliqueField {
                gamma: g.gamma.clone(),
                gamma0: g.gamma0,
            }),
            None => {
                let mut gv = vec![0.0; n];
                gv[axis] = 1.0;
                FaceBc::Oblique(ObliqueField {
                    gamma: gv,
                    gamma0: 0.5,
                })
            }
        }
    };

    let (chart, mesh, bcs) = match &domain {
        DomainSpec::Rectangle {
            lo,
            hi,
            nnodes,
            dirichlet_faces,
            graded,
        } => {
            let n = lo.len();
            let mesh = build_mesh(nnodes, lo, hi, graded)?;
            let bcs = (0..2 * n)
                .map(|face| {
                    if dirichlet_faces.contains(&face) {
                        FaceBc::Dirichlet
                    } else {
                        oblique_bc(n, face / 2)
                    }
                })
                .collect();
            (DomainChart::rectangle(lo.clone(), hi.clone()), mesh, bcs)
        }
        DomainSpec::HalfStrip { lo, hi, nnodes, graded } => {
            let n = lo.len();
            if lo[n - 1] != 0.0 {
                return Err(usage("half-strip requires lo[n-1] = 0 (the wall)"));
            }
            let mesh = build_mesh(nnodes, lo, hi, graded)?;
            // wall face oblique, the opposite artificial face Dirichlet,
            // tangential truncations Dirichlet
            let bcs = (0..2 * n)
                .map(|face| {
                    if face == 2 * (n - 1) {
                        oblique_bc(n, n - 1)
                    } else {
                        FaceBc::Dirichlet
                    }
                })
                .collect();
            (DomainChart::rectangle(lo.clone(), hi.clone()), mesh, bcs)
        }
        DomainSpec::Graph {
            x1_lo,
            x1_hi,
            height,
            kink,
            coef,
            delta,
            nnodes,
            dirichlet_faces,
            graded,
        } => {
            let chart = DomainChart::graph(*x1_lo, *x1_hi, *height, *kink, *coef, *delta);
            let (lo, hi) = chart.chart_box();
            let mesh = build_mesh(nnodes, &lo, &hi, graded)?;
            let bcs = (0..4)
                .map(|face| {
                    if dirichlet_faces.contains(&face) {
                        FaceBc::Dirichlet
                    } else {
                        oblique_bc(2, face / 2)
                    }
                })
                .collect();
            (chart, mesh, bcs)
        }
    };

    let problem = IbvpProblem {
        path: &path,
        chart,
        mesh,
        bcs,
        drift: Drift::None,
    };
    if args.dt <= 0.0 || args.steps == 0 {
        return Err(usage("--dt must be positive and --steps nonzero"));
    }
    let sol = problem.solve_ivbp(
        &|x, t| f_interp.eval(x, t),
        args.t0,
        args.dt,
        args.steps,
        None,
    )?;
    let field = solution_to_field(&sol, "u");
    match args.out.extension().and_then(|e| e.to_str()) {
        Some("csv") => field.write_csv(&args.out)?,
        _ => field.write_bin(&args.out)?,
    }

    let cfg_blob = serde_json::to_vec(&(
        std::fs::read_to_string(&args.domain)?,
        std::fs::read_to_string(&args.path)?,
        args.t0,
        args.dt,
        args.steps,
    ))?;
    let report = serde_json::json!({
        "config_hash": config_hash(&cfg_blob),
        "lib_version": env!("CARGO_PKG_VERSION"),
        "t0": args.t0,
        "dt": args.dt,
        "steps": args.steps,
        "max_residual": sol.residuals.iter().cloned().fold(0.0_f64, f64::max),
        "out": args.out.display().to_string(),
    });
    atomic_write(&args.report, serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!(
        "solved {} steps, max residual {:e}",
        args.steps,
        sol.residuals.iter().cloned().fold(0.0_f64, f64::max)
    );
    Ok(0)
}

fn cmd_compare(args: CompareArgs) -> Result<i32> {
    let a: SweepReport = load_json(&args.a)?;
    let b: SweepReport = load_json(&args.b)?;
    let cmp = mollify_and_compare(&a, &b).map_err(|e| usage(e.to_string()))?;
    atomic_write(&args.out, serde_json::to_string_pretty(&cmp)?.as_bytes())?;
    println!(
        "compare: max relative difference {:e}, {}",
        cmp.max_rel_diff,
        if cmp.any_flagged {
            "DRIFT flagged"
        } else {
            "within error bars"
        }
    );
    Ok(if cmp.any_flagged { 1 } else { 0 })
}
