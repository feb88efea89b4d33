use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use qoip_core::experiments::{compare_variants, convergence_study, ComparisonRecord, ManufacturedSolution};
use qoip_core::forms::estimate_eta_star;
use qoip_core::smoothers::{
    e1_vector_operator, ec0_operator, ep_operator, ep_tilde_operator, moment_residual, normal_bubble, transfer_matrix,
    Smoother,
};
use qoip_core::{FeFunction, FeSpace, LameCoefficients, Mesh, MethodConfig, Problem, SmootherChoice, SpaceKind, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "qoip", version, about = "Quasi-optimal interior penalty experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SmootherArg {
    Full,
    Tilde,
    Identity,
}

#[derive(Subcommand)]
enum Command {
    /// Convergence study of one method on a manufactured solution.
    Run {
        #[arg(long, default_value = "poisson")]
        problem: String,
        /// sip, nip, hl or c0ip; defaults to the natural variant of the problem.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value_t = 1)]
        p: usize,
        /// Penalty; defaults to 10 p^2 (Poisson), 10 (elasticity), 4 eta_* (biharmonic).
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, value_enum, default_value = "full")]
        smoother: SmootherArg,
        /// ms-p1, ms-p2, ms-e1, ms-b1; defaults to the smooth solution of the problem.
        #[arg(long)]
        load: Option<String>,
        #[arg(long, default_value = "builtin:square:2")]
        mesh: String,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Fail unless the final EOC reaches this value.
        #[arg(long)]
        min_eoc: Option<f64>,
        /// Fail if any quasi-optimality ratio exceeds this value.
        #[arg(long)]
        max_ratio: Option<f64>,
    },
    /// Moment and invariance checks for every smoother.
    CheckSmoothers {
        #[arg(long, default_value = "builtin:square:2")]
        mesh: String,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Estimated coercivity threshold of the symmetric forms.
    EtaStar {
        #[arg(long, default_value = "builtin:square:4")]
        mesh: String,
        #[arg(long, default_value_t = 1)]
        p: usize,
        /// 1 for the DG form, 2 for the C0 interior penalty form.
        #[arg(long, default_value_t = 1)]
        order: usize,
    },
    /// Difference between the smoothed and the classical penalized Crouzeix-Raviart solutions.
    CompareVariants {
        #[arg(long, default_value = "ms-e1")]
        load: String,
        #[arg(long, default_value = "builtin:square:2")]
        mesh: String,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 10.0)]
        eta: f64,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Fail unless the final EOC reaches this value.
        #[arg(long)]
        min_eoc: Option<f64>,
    },
}

fn load_mesh(spec: &str) -> Result<Mesh> {
    if let Some(rest) = spec.strip_prefix("builtin:square:") {
        let n: usize = rest.parse().with_context(|| format!("bad mesh size in '{spec}'"))?;
        return Ok(Mesh::structured_unit_square(n)?);
    }
    let loaded = Mesh::load(spec).with_context(|| format!("reading mesh file '{spec}'"))?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    Ok(loaded.mesh)
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

#[allow(clippy::too_many_arguments)]
fn run(
    problem: &str,
    variant: Option<String>,
    p: usize,
    eta: Option<f64>,
    smoother: SmootherArg,
    load: Option<String>,
    mesh: &str,
    levels: usize,
    lame: (f64, f64),
    out: &Option<PathBuf>,
    format: Format,
    min_eoc: Option<f64>,
    max_ratio: Option<f64>,
) -> Result<bool> {
    let problem: Problem = problem.parse()?;
    let variant: Variant = match variant {
        Some(v) => v.parse()?,
        None => match problem {
            Problem::Poisson => Variant::Sip,
            Problem::Elasticity => Variant::Hl,
            Problem::Biharmonic => Variant::C0ip,
        },
    };
    let smoother = match (smoother, problem) {
        (SmootherArg::Identity, _) => SmootherChoice::Identity,
        (SmootherArg::Full, Problem::Poisson) => SmootherChoice::Ep,
        (SmootherArg::Tilde, Problem::Poisson) => SmootherChoice::EpTilde,
        (SmootherArg::Full, Problem::Elasticity) => SmootherChoice::E1Vector,
        (SmootherArg::Full, Problem::Biharmonic) => SmootherChoice::Ec0,
        (SmootherArg::Tilde, _) => bail!("the modified smoother exists for the Poisson problem only"),
    };
    let lame = match problem {
        Problem::Elasticity => Some(LameCoefficients::new(lame.0, lame.1)?),
        _ => None,
    };
    let p = match problem {
        Problem::Poisson => p,
        Problem::Elasticity => 1,
        Problem::Biharmonic => 2,
    };
    let method = MethodConfig { problem, variant, p, eta, smoother, lame };
    let name = load.unwrap_or_else(|| {
        match problem {
            Problem::Poisson => "ms-p1",
            Problem::Elasticity => "ms-e1",
            Problem::Biharmonic => "ms-b1",
        }
        .to_string()
    });
    let ms = ManufacturedSolution::by_name(&name, lame.map_or(1.0, |l| l.mu))?;
    let base = load_mesh(mesh)?;
    let record = convergence_study(&ms, &method, &base, levels)?;
    let w = output(out)?;
    match format {
        Format::Csv => record.write_csv(w)?,
        Format::Json => record.write_json(w)?,
    }
    let mut ok = true;
    if let Some(min) = min_eoc {
        let e = record.final_eoc().unwrap_or(f64::NAN);
        if !(e >= min) {
            eprintln!("final EOC {e:.3} below {min}");
            ok = false;
        }
    }
    if let Some(max) = max_ratio {
        for l in &record.levels {
            if let Some(r) = l.ratio {
                if r > max || r < 1.0 - 1e-6 {
                    eprintln!("level {}: ratio {r:.4} outside [1, {max}]", l.level);
                    ok = false;
                }
            }
        }
    }
    Ok(ok)
}

fn check_smoothers(mesh: &str, samples: usize, tol: f64) -> Result<bool> {
    let mesh = Arc::new(load_mesh(mesh)?);
    let space = |kind| -> Result<Arc<FeSpace>> { Ok(Arc::new(FeSpace::new(mesh.clone(), kind)?)) };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut random = |s: &Arc<FeSpace>| {
        let c = (0..s.dof_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeFunction::new(s.clone(), c)
    };
    let mut ok = true;
    let mut ops: Vec<(String, Smoother)> = Vec::new();
    for p in 1..=3 {
        let v = space(SpaceKind::BrokenP(p))?;
        ops.push((format!("E_{p}"), ep_operator(&v)?));
        if p >= 2 {
            ops.push((format!("E~_{p}"), ep_tilde_operator(&v)?));
        }
    }
    ops.push(("E_1 vector".into(), e1_vector_operator(&space(SpaceKind::CrouzeixRaviartVec)?)?));
    ops.push(("E_C0".into(), ec0_operator(&space(SpaceKind::LagrangeP0BC(2))?)?));
    println!("moment conservation ({samples} random inputs each, tol {tol:e})");
    for (name, op) in &ops {
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let sigma = random(op.input());
            worst = worst.max(moment_residual(&sigma, &op.apply(&sigma)?)?);
        }
        let pass = worst <= tol;
        ok &= pass;
        println!("  {:<11} {:.2e}  {}", name, worst, if pass { "ok" } else { "FAILED" });
    }

    println!("invariance on conforming inputs");
    for (name, op) in &ops {
        let input = op.input().clone();
        let reproduced = match input.kind() {
            SpaceKind::BrokenP(p) => {
                // E_p fixes the degree-p Lagrange space, E~_p is only claimed on degree 1
                let q = if name.starts_with("E~") { 1 } else { p };
                let lag = space(SpaceKind::LagrangeP0BC(q))?;
                let s = random(&lag);
                let sigma = FeFunction::new(input.clone(), transfer_matrix(&lag, &input)?.mul_vec(&s.coeffs));
                Some((s, sigma))
            }
            SpaceKind::CrouzeixRaviartVec => None,
            _ => {
                let z = FeFunction::zeros(input.clone());
                Some((z.clone(), z))
            }
        };
        let Some((s, sigma)) = reproduced else { continue };
        let out = op.apply(&sigma)?;
        let mut worst: f64 = 0.0;
        for k in 0..mesh.num_elements() {
            for l in [[1.0 / 3.0; 3], [0.6, 0.2, 0.2], [0.1, 0.1, 0.8]] {
                worst = worst.max((out.jet(k, l)?[0].value - s.jet(k, l)?[0].value).abs());
            }
        }
        let pass = worst <= tol;
        ok &= pass;
        println!("  {:<11} {:.2e}  {}", name, worst, if pass { "ok" } else { "FAILED" });
    }

    let mut scaled = Vec::new();
    for &f in mesh.interior_faces() {
        let b = normal_bubble(&mesh, f)?;
        scaled.push(b.scale * mesh.face(f).length);
    }
    let c = scaled.first().copied().unwrap_or(f64::NAN);
    println!("normal bubble normalization: c_F |F| = {c:.6} on every interior face");
    println!(
        "  note: the squared four-factor bubble integrates to |F|/630 along F, so the normalization \
         constant is 630, not the 30 quoted for it; it is computed numerically per face"
    );
    println!("{}", if ok { "all smoother checks passed" } else { "smoother checks FAILED" });
    Ok(ok)
}

fn write_comparison(rows: &[ComparisonRecord], w: Box<dyn Write>, format: Format) -> Result<()> {
    match format {
        Format::Json => serde_json::to_writer_pretty(w, rows)?,
        Format::Csv => {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(["level", "h", "dofs", "difference", "eoc"])?;
            for r in rows {
                out.write_record([
                    r.level.to_string(),
                    format!("{:.6e}", r.h),
                    r.dofs.to_string(),
                    format!("{:.6e}", r.difference),
                    r.eoc.map(|e| format!("{e:.6e}")).unwrap_or_default(),
                ])?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            problem,
            variant,
            p,
            eta,
            smoother,
            load,
            mesh,
            levels,
            mu,
            lambda,
            out,
            format,
            min_eoc,
            max_ratio,
        } => run(&problem, variant, p, eta, smoother, load, &mesh, levels, (mu, lambda), &out, format, min_eoc, max_ratio),
        Command::CheckSmoothers { mesh, samples, tol } => check_smoothers(&mesh, samples, tol),
        Command::EtaStar { mesh, p, order } => {
            let mesh = Arc::new(load_mesh(&mesh)?);
            let kind = if order == 2 { SpaceKind::LagrangeP0BC(p) } else { SpaceKind::BrokenP(p) };
            let value = estimate_eta_star(&FeSpace::new(mesh.clone(), kind)?, order)?;
            println!("{value:.12}");
            Ok(true)
        }
        Command::CompareVariants { load, mesh, levels, eta, mu, lambda, out, format, min_eoc } => {
            let lame = LameCoefficients::new(mu, lambda)?;
            let ms = ManufacturedSolution::by_name(&load, mu)?;
            let rows = compare_variants(&ms.load, lame, eta, &load_mesh(&mesh)?, levels)?;
            write_comparison(&rows, output(&out)?, format)?;
            match min_eoc {
                Some(min) => {
                    let e = rows.last().and_then(|r| r.eoc).unwrap_or(f64::NAN);
                    if !(e >= min) {
                        eprintln!("final EOC {e:.3} below {min}");
                    }
                    Ok(e >= min)
                }
                None => Ok(true),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
