use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hyperreg::applications::{
    ap3_reduction, brute_force_find, corners_reduction, pattern_reduction, removal_run, simplex_reduction,
    symmetrize, three_term_progressions, PatternKind, RemovalConfig, SymmetrizeMode,
};
use hyperreg::counting::{count_homomorphisms, counting_lemma_check_with, total_maps, DEFAULT_SAMPLES};
use hyperreg::io::{
    chain_to_json, emit_json, read_chain, read_grid, read_partition_system, serialize_chain, trace_csv, Envelope,
    ExperimentConfig, Format,
};
use hyperreg::quasirandom::{deviation_function, oct_with_budget, quasirandomness_report, threshold_schedule, OctStrategy};
use hyperreg::regularity::{complete_template, regularize, EtaSchedule, PartitionSystem, RegularizeConfig};
use hyperreg::{Chain, Error, IndexSet};

#[derive(Parser)]
#[command(name = "hyperreg", version, about = "Hypergraph regularity experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Cap on template-to-host maps enumerated exactly.
    #[arg(long, global = true, default_value_t = 100_000_000)]
    budget_maps: u128,
    #[arg(long, global = true, default_value_t = 64)]
    budget_retries: usize,
    #[arg(long, global = true, default_value_t = 50)]
    max_iters: usize,
    /// Override η per level, comma separated, level 1 first.
    #[arg(long, global = true, value_delimiter = ',')]
    eta: Option<Vec<f64>>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = OutFormat::Json)]
    format: OutFormat,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Naive,
    Contraction,
    Materialized,
    Streaming,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    Corner,
    AxisSimplex,
    Pattern,
}

#[derive(Subcommand)]
enum Command {
    /// Down-closure of a chain file, in canonical form.
    Closure { chain: PathBuf },
    /// Relative density of every index.
    Density { chain: PathBuf },
    /// Oct of the centered indicator at one index (1-based parts, comma separated).
    Oct {
        chain: PathBuf,
        #[arg(long, value_delimiter = ',')]
        index: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Strategy::Contraction)]
        strategy: Strategy,
    },
    /// Quasirandomness verdict of a chain against a template.
    Quasirandom { chain: PathBuf, template: PathBuf },
    /// Threshold schedule for given densities (one per level, level 1 first).
    Thresholds {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        template_size: usize,
        #[arg(long, value_delimiter = ',')]
        densities: Vec<f64>,
    },
    /// Exact homomorphism count.
    CountHom { template: PathBuf, host: PathBuf },
    /// Homomorphism probability against the density product.
    CountingCheck { template: PathBuf, host: PathBuf },
    /// Energy-increment regularization from a partition system or a chain's top split.
    Regularize {
        input: PathBuf,
        /// Template chain; the complete k-chain on the same parts by default.
        #[arg(long)]
        template: Option<PathBuf>,
        /// Read the input as a partition system instead of a chain.
        #[arg(long)]
        system: bool,
    },
    /// Corners via the three line families.
    Corners {
        grid: PathBuf,
        /// Also report the best central symmetrization.
        #[arg(long)]
        symmetrize: bool,
    },
    /// Three-term progressions via corners (input: a dim=1 grid).
    Ap3 { set: PathBuf },
    /// Axis simplices via hyperplane families.
    Simplex { grid: PathBuf },
    /// Homothetic copies a + dX of a pattern, X given as `x1 x2;y1 y2;...`.
    Pattern {
        grid: PathBuf,
        #[arg(long)]
        points: String,
    },
    /// Regularize-then-prune simplex removal.
    Removal {
        chain: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        a: f64,
        #[arg(long, default_value_t = 1)]
        r: usize,
    },
    /// Brute-force configuration finder.
    Oracle {
        grid: PathBuf,
        #[arg(long, value_enum)]
        kind: OracleKind,
        #[arg(long)]
        points: Option<String>,
    },
}

struct Output {
    bytes: Vec<u8>,
    pass: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            let written = match &cli.out {
                Some(p) => std::fs::write(p, &out.bytes).map_err(Error::from),
                None => std::io::stdout().write_all(&out.bytes).map_err(Error::from),
            };
            match written {
                Ok(()) if out.pass => ExitCode::from(0),
                Ok(()) => ExitCode::from(1),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn config(cli: &Cli, command: &str, inputs: &[&Path]) -> hyperreg::Result<ExperimentConfig> {
    let c = ExperimentConfig {
        command: command.to_string(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        seed: cli.seed,
        budget_maps: cli.budget_maps,
        budget_retries: cli.budget_retries,
        max_iters: cli.max_iters,
        eta: cli.eta.clone(),
        epsilon: cli.epsilon,
        format: match cli.format {
            OutFormat::Json => Format::Json,
            OutFormat::Csv => Format::Csv,
        },
        out: cli.out.as_ref().map(|p| p.display().to_string()),
    };
    c.validate()?;
    Ok(c)
}

fn envelope<T: Serialize>(config: ExperimentConfig, pass: bool, report: T) -> hyperreg::Result<Output> {
    Ok(Output { bytes: emit_json(&Envelope { config, pass, report })?, pass })
}

fn epsilon(cli: &Cli) -> f64 {
    cli.epsilon.unwrap_or(0.1)
}

fn parse_points(s: &str) -> hyperreg::Result<Vec<Vec<i64>>> {
    s.split(';')
        .map(|p| {
            p.split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::InvalidArgument(format!("bad coordinate `{t}`"))))
                .collect()
        })
        .collect()
}

fn regularize_config(cli: &Cli) -> RegularizeConfig {
    RegularizeConfig {
        eta: cli.eta.clone().map_or(EtaSchedule::Faithful, EtaSchedule::Override),
        max_iters: cli.max_iters,
        retry_budget: cli.budget_retries,
        seed: cli.seed,
        ..RegularizeConfig::default()
    }
}

fn run(cli: &Cli) -> hyperreg::Result<Output> {
    match &cli.command {
        Command::Closure { chain } => {
            let c = read_chain(chain)?;
            let bytes = match cli.format {
                OutFormat::Json => chain_to_json(&c)?.into_bytes(),
                OutFormat::Csv => serialize_chain(&c).into_bytes(),
            };
            Ok(Output { bytes, pass: true })
        }
        Command::Density { chain } => {
            let cfg = config(cli, "density", &[chain])?;
            let c = read_chain(chain)?;
            #[derive(Serialize)]
            struct Row {
                index: IndexSet,
                edges: usize,
                star: usize,
                density: Option<String>,
            }
            let mut rows = Vec::new();
            for a in IndexSet::all_up_to(c.part_count(), c.k()) {
                let star = c.star_count(a)?;
                let density = c.relative_density(a).ok().map(|d| d.to_string());
                rows.push(Row { index: a, edges: c.slice_count(a), star, density });
            }
            envelope(cfg, true, rows)
        }
        Command::Oct { chain, index, strategy } => {
            let cfg = config(cli, "oct", &[chain])?;
            let c = read_chain(chain)?;
            let a = IndexSet::from_one_based(index);
            let f = deviation_function::<f64>(&c, a)?;
            let s = match strategy {
                Strategy::Naive => OctStrategy::Naive,
                Strategy::Contraction => OctStrategy::Contraction,
                Strategy::Materialized => OctStrategy::Materialized,
                Strategy::Streaming => OctStrategy::Streaming,
            };
            let o = oct_with_budget(&f, s, usize::try_from(cli.budget_maps).unwrap_or(usize::MAX))?;
            #[derive(Serialize)]
            struct R {
                index: IndexSet,
                oct: f64,
            }
            envelope(cfg, true, R { index: a, oct: o })
        }
        Command::Quasirandom { chain, template } => {
            let cfg = config(cli, "quasirandom", &[chain, template])?;
            let r = quasirandomness_report(&read_chain(chain)?, &read_chain(template)?, epsilon(cli))?;
            envelope(cfg, r.verdict, r)
        }
        Command::Thresholds { k, template_size, densities } => {
            let cfg = config(cli, "thresholds", &[])?;
            let dens: Vec<(IndexSet, f64)> = densities
                .iter()
                .enumerate()
                .map(|(l, &d)| (IndexSet::from_bits((1u32 << (l + 1)) - 1), d))
                .collect();
            let s = threshold_schedule(epsilon(cli), *template_size, &dens, *k)?;
            envelope(cfg, true, s)
        }
        Command::CountHom { template, host } => {
            let cfg = config(cli, "count-hom", &[template, host])?;
            let (t, h) = (read_chain(template)?, read_chain(host)?);
            let total = total_maps(&t, &h)?;
            if total > cli.budget_maps {
                return Err(Error::BudgetExceeded(format!("{total} maps exceed --budget-maps {}", cli.budget_maps)));
            }
            let c = count_homomorphisms(&t, &h)?;
            #[derive(Serialize)]
            struct R {
                count: String,
                total_maps: String,
                probability: String,
            }
            envelope(
                cfg,
                true,
                R { count: c.exact_count.to_string(), total_maps: c.total_maps.to_string(), probability: c.probability.to_string() },
            )
        }
        Command::CountingCheck { template, host } => {
            let cfg = config(cli, "counting-check", &[template, host])?;
            let v = counting_lemma_check_with(
                &read_chain(template)?,
                &read_chain(host)?,
                epsilon(cli),
                cli.budget_maps,
                DEFAULT_SAMPLES,
                cli.seed,
            )?;
            envelope(cfg, v.pass, v)
        }
        Command::Regularize { input, template, system } => {
            let mut inputs: Vec<&Path> = vec![input];
            if let Some(t) = template {
                inputs.push(t);
            }
            let cfg = config(cli, "regularize", &inputs)?;
            let p0 = if *system {
                read_partition_system(input)?
            } else {
                PartitionSystem::top_split(&read_chain(input)?)
            };
            let j: Chain = match template {
                Some(t) => read_chain(t)?,
                None => complete_template(p0.partition().part_count(), p0.k())?,
            };
            let (_, trace) = regularize(&p0, &j, epsilon(cli), &regularize_config(cli))?;
            let pass = trace.converged;
            match cli.format {
                OutFormat::Csv => Ok(Output { bytes: trace_csv(&trace).into_bytes(), pass }),
                OutFormat::Json => envelope(cfg, pass, trace),
            }
        }
        Command::Corners { grid, symmetrize: sym } => {
            let cfg = config(cli, "corners", &[grid])?;
            let g = read_grid(grid)?;
            let r = corners_reduction(&g)?.report();
            let pass = r.degenerate == g.len() && r.degenerate_edge_disjoint;
            #[derive(Serialize)]
            struct R {
                #[serde(flatten)]
                report: hyperreg::applications::ConfigurationReport,
                symmetrization: Option<hyperreg::applications::Symmetrization>,
            }
            let symmetrization = if *sym { Some(symmetrize(&g, SymmetrizeMode::Exhaustive)?) } else { None };
            envelope(cfg, pass, R { report: r, symmetrization })
        }
        Command::Ap3 { set } => {
            let cfg = config(cli, "ap3", &[set])?;
            let g = read_grid(set)?;
            if g.dim() != 1 {
                return Err(Error::WrongDimension { expected: 1, got: g.dim() });
            }
            let a: BTreeSet<i64> = g.points().iter().map(|p| p[0]).collect();
            let red = ap3_reduction(&a, g.side())?;
            let corners = corners_reduction(&red.grid)?.report().configurations;
            let mut found: Vec<(i64, i64)> = corners.iter().map(|c| red.progression(c)).collect();
            found.sort();
            found.dedup();
            let direct = three_term_progressions(&a);
            #[derive(Serialize)]
            struct R {
                corners: usize,
                progressions: Vec<(i64, i64)>,
                direct: usize,
            }
            let pass = found == direct;
            envelope(cfg, pass, R { corners: corners.len(), direct: direct.len(), progressions: found })
        }
        Command::Simplex { grid } => {
            let cfg = config(cli, "simplex", &[grid])?;
            let g = read_grid(grid)?;
            let r = simplex_reduction(&g)?.report();
            let pass = r.degenerate == g.len() && r.degenerate_edge_disjoint;
            envelope(cfg, pass, r)
        }
        Command::Pattern { grid, points } => {
            let cfg = config(cli, "pattern", &[grid])?;
            let m = pattern_reduction(&parse_points(points)?, &read_grid(grid)?)?;
            envelope(cfg, m.is_some(), m)
        }
        Command::Removal { chain, a, r } => {
            let cfg = config(cli, "removal", &[chain])?;
            let h = read_chain(chain)?;
            let rc = RemovalConfig { a: *a, regularize: RegularizeConfig { r: *r, ..regularize_config(cli) } };
            let report = removal_run(&h, &rc)?;
            let pass = report.simplices_after == 0;
            envelope(cfg, pass, report)
        }
        Command::Oracle { grid, kind, points } => {
            let cfg = config(cli, "oracle", &[grid])?;
            let k = match kind {
                OracleKind::Corner => PatternKind::Corner,
                OracleKind::AxisSimplex => PatternKind::AxisSimplex,
                OracleKind::Pattern => PatternKind::Pattern(parse_points(
                    points.as_deref().ok_or_else(|| Error::InvalidArgument("--points is required".into()))?,
                )?),
            };
            let budget = u64::try_from(cli.budget_maps).unwrap_or(u64::MAX);
            let found = brute_force_find(&read_grid(grid)?, &k, budget)?;
            envelope(cfg, true, found)
        }
    }
}
