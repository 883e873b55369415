use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mtlab::mesh::{build_mesh, DomainSpec, Point};
use mtlab::runner::{run_experiment, DomainSource, ExperimentConfig, Pipeline, THREADS_ENV};

#[derive(Parser)]
#[command(name = "mtlab", version, about = "Finite-element experiments for the mean-zero Moser-Trudinger inequality")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Domain {
    /// Mesh file in `mt-mesh v1` format.
    #[arg(long, conflicts_with = "domain")]
    mesh: Option<PathBuf>,
    /// Generate the mesh instead: `square` or `disk` (unit radius).
    #[arg(long)]
    domain: Option<String>,
    /// Target mesh size for a generated domain.
    #[arg(long, default_value_t = 0.05)]
    h: f64,
}

impl Domain {
    fn source(&self) -> anyhow::Result<Option<DomainSource>> {
        Ok(match (&self.mesh, self.domain.as_deref()) {
            (Some(m), _) => Some(DomainSource::File { mesh: m.clone() }),
            (None, Some(d)) => Some(DomainSource::Spec(named_domain(d, self.h)?)),
            (None, None) => None,
        })
    }
}

fn named_domain(name: &str, h: f64) -> anyhow::Result<DomainSpec> {
    Ok(match name {
        "square" => DomainSpec::unit_square(h),
        "disk" => DomainSpec::disk(1.0, h),
        _ => bail!("unknown domain `{name}`, expected `square` or `disk`"),
    })
}

#[derive(Args, Clone)]
struct Common {
    #[command(flatten)]
    domain: Domain,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "mtlab-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated mesh to a file.
    Mesh {
        /// `square`, `disk` or `polygon`.
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 0.05)]
        h: f64,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        /// Polygon vertices, counter-clockwise: `x,y;x,y;...`.
        #[arg(long)]
        vertices: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// First nonzero Neumann eigenvalue.
    Eigen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Subcritical maximizer at one eps.
    Maximize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Maximizers along a decreasing eps grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        eps_grid: Vec<f64>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Green function at the boundary node nearest to a hint.
    Green {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        p_hint: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        fit_annulus: Option<Vec<f64>>,
    },
    /// A_p and the bound over equispaced boundary points.
    GreenSurvey {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Moser-type test functions and the sign of the margin.
    Testfn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        p_hint: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', required = true)]
        eps_grid: Vec<f64>,
    },
    /// Checks of the radial blow-up profile.
    VerifyProfile {
        #[arg(long, default_value_t = 1e3)]
        rmax: f64,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value = "mtlab-out")]
        out: PathBuf,
    },
    /// Gradient, mean and square integrals of the test function pieces.
    Appendix {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        p_hint: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', required = true)]
        eps_grid: Vec<f64>,
        /// Without a domain: A_p of the flat local model.
        #[arg(long, default_value_t = 0.0)]
        a_p: f64,
        /// Without a domain: area used in the mean terms.
        #[arg(long, default_value_t = std::f64::consts::PI)]
        area: f64,
    },
    /// Neumann mean-field problem by energy minimization.
    Meanfield {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rho: f64,
        /// Field file or `expr:<expression in x, y>`.
        #[arg(long, default_value = "expr:1")]
        f: String,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        rho_sweep_steps: usize,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Empirical constant of the mean-zero inequality over random fields.
    Corollary {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// eigen, green, sweep, testfn and the comparison table.
    FullReport {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        p_hint: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        eps_grid: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        testfn_eps_grid: Option<Vec<f64>>,
    },
    /// Run a TOML experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn pair(v: Option<Vec<f64>>, name: &str) -> anyhow::Result<Option<[f64; 2]>> {
    match v {
        None => Ok(None),
        Some(v) if v.len() == 2 => Ok(Some([v[0], v[1]])),
        Some(_) => bail!("--{name} takes two comma-separated numbers"),
    }
}

fn config(pipeline: Pipeline, c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(pipeline, c.out.clone(), c.domain.source()?);
    cfg.alpha = c.alpha;
    cfg.seed = c.seed;
    Ok(cfg)
}

fn parse_vertices(s: &str) -> anyhow::Result<Vec<Point>> {
    s.split(';')
        .map(|p| {
            let v: Vec<f64> = p.split(',').map(|t| t.trim().parse()).collect::<Result<_, _>>()?;
            if v.len() != 2 {
                bail!("vertex `{p}` needs two coordinates");
            }
            Ok([v[0], v[1]])
        })
        .collect()
}

/// Exit code 2 for rejected input.
struct Usage(anyhow::Error);

fn build(command: Command) -> Result<Option<ExperimentConfig>, Usage> {
    let u = Usage;
    Ok(Some(match command {
        Command::Mesh { domain, h, radius, vertices, out } => {
            let spec = match domain.as_str() {
                "polygon" => {
                    let v = vertices.ok_or_else(|| u(anyhow::anyhow!("--vertices is required for a polygon")))?;
                    DomainSpec::polygon(parse_vertices(&v).map_err(u)?, h)
                }
                "disk" => DomainSpec::disk(radius, h),
                d => named_domain(d, h).map_err(u)?,
            };
            let mesh = build_mesh(&spec).map_err(|e| u(e.into()))?;
            std::fs::write(&out, mesh.to_text())
                .with_context(|| format!("writing {}", out.display()))
                .map_err(u)?;
            eprintln!("{} nodes, {} triangles, h = {}", mesh.num_nodes(), mesh.num_triangles(), mesh.max_edge_length());
            return Ok(None);
        }
        Command::Eigen { common, tol } => {
            let mut c = config(Pipeline::Eigen, &common).map_err(u)?;
            if let Some(t) = tol {
                c.tolerances.eigen = t;
            }
            c
        }
        Command::Maximize { common, eps, restarts, tol } => {
            let mut c = config(Pipeline::Maximize, &common).map_err(u)?;
            c.params.eps = eps;
            c.params.restarts = restarts.unwrap_or(c.params.restarts);
            c.tolerances.maximize = tol.unwrap_or(c.tolerances.maximize);
            c
        }
        Command::Sweep { common, eps_grid, restarts, tol } => {
            let mut c = config(Pipeline::Sweep, &common).map_err(u)?;
            c.params.eps_grid = eps_grid;
            c.params.restarts = restarts.unwrap_or(c.params.restarts);
            c.tolerances.maximize = tol.unwrap_or(c.tolerances.maximize);
            c
        }
        Command::Green { common, p_hint, fit_annulus } => {
            let mut c = config(Pipeline::Green, &common).map_err(u)?;
            c.params.p_hint = pair(p_hint, "p-hint").map_err(u)?;
            c.params.fit_annulus = pair(fit_annulus, "fit-annulus").map_err(u)?;
            c
        }
        Command::GreenSurvey { common, samples } => {
            let mut c = config(Pipeline::GreenSurvey, &common).map_err(u)?;
            c.params.survey_samples = samples;
            c
        }
        Command::Testfn { common, p_hint, eps_grid } => {
            let mut c = config(Pipeline::Testfn, &common).map_err(u)?;
            c.params.p_hint = pair(p_hint, "p-hint").map_err(u)?;
            c.params.testfn_eps_grid = eps_grid;
            c
        }
        Command::VerifyProfile { rmax, n, out } => {
            let mut c = ExperimentConfig::new(Pipeline::VerifyProfile, out, None);
            c.params.rmax = rmax;
            c.params.n = n;
            c
        }
        Command::Appendix { common, p_hint, eps_grid, a_p, area } => {
            let mut c = config(Pipeline::Appendix, &common).map_err(u)?;
            c.params.p_hint = pair(p_hint, "p-hint").map_err(u)?;
            c.params.testfn_eps_grid = eps_grid;
            c.params.a_p = a_p;
            c.params.area = area;
            c
        }
        Command::Meanfield { common, rho, f, samples, rho_sweep_steps, tol } => {
            let mut c = config(Pipeline::Meanfield, &common).map_err(u)?;
            c.params.rho = rho;
            c.params.f = f;
            c.params.samples = samples;
            c.params.rho_sweep_steps = rho_sweep_steps;
            c.tolerances.meanfield = tol.unwrap_or(c.tolerances.meanfield);
            c
        }
        Command::Corollary { common, samples, seeds } => {
            let mut c = config(Pipeline::Corollary, &common).map_err(u)?;
            c.params.samples = samples;
            c.params.seeds = seeds;
            c
        }
        Command::FullReport { common, p_hint, eps_grid, testfn_eps_grid } => {
            let mut c = config(Pipeline::FullReport, &common).map_err(u)?;
            c.params.p_hint = pair(p_hint, "p-hint").map_err(u)?;
            if let Some(g) = eps_grid {
                c.params.eps_grid = g;
            }
            if let Some(g) = testfn_eps_grid {
                c.params.testfn_eps_grid = g;
            }
            c
        }
        Command::Run { config } => ExperimentConfig::from_file(&config)
            .with_context(|| format!("reading {}", config.display()))
            .map_err(u)?,
    }))
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let cfg = match build(cli.command) {
        Ok(Some(c)) => c,
        Ok(None) => return ExitCode::SUCCESS,
        Err(Usage(e)) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let manifest = match run_experiment(&cfg) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_solver_failure() { 3 } else { 2 });
        }
    };
    if let Some(e) = &manifest.error {
        eprintln!("error: {e}");
    }
    let primary = cfg.output_dir.join(cfg.pipeline.primary_output());
    if manifest.error.is_none() {
        match std::fs::read_to_string(&primary) {
            Ok(s) => print!("{s}"),
            Err(e) => eprintln!("error: reading {}: {e}", primary.display()),
        }
    }
    eprintln!("status {:?}; outputs in {}", manifest.status, cfg.output_dir.display());
    ExitCode::from(manifest.exit_code() as u8)
}
