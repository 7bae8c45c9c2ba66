//! `lambdacgd` command-line front end.
//!
//! Tabular output is CSV with a header row; single results are JSON on stdout.
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lambdacgd::calibration::PrivacyBudget;
use lambdacgd::matrix::make_c_lambda;
use lambdacgd::metrics::{
    diagonal_strategy, evaluate, full_batch_bounds, lambda_grid, normalized_rmse_ratio,
    optimize_lambda, sweep_lambda, Factorization, Family, Objective, DEFAULT_GRID,
};
use lambdacgd::noise::{NoiseMode, NoiseStream, NoiseStreamConfig, TestVectors};
use lambdacgd::sensitivity::{
    bruteforce_profile, leftmost_column_sum_norm, normalized_c_lambda, sens_c_lambda_closed,
    sens_min_sep, sens_normalized, ParticipationSchema,
};
use lambdacgd::trainer::{theta_hash, train, write_trace_jsonl, TrainConfig};

/// Environment variable naming the default directory for output files.
const OUT_DIR_ENV: &str = "LAMBDACGD_OUT_DIR";

/// Largest `n` for which `sens` also runs exhaustive enumeration.
const BRUTE_FORCE_MAX_N: usize = 24;

const AGREEMENT_TOL: f64 = 1e-10;

#[derive(Parser)]
#[command(name = "lambdacgd", version, about = "Correlated-noise DP analysis and training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sensitivity of C_lambda (or its column-normalized form) three ways.
    Sens {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        b: usize,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        normalized: bool,
    },
    /// Full-batch RMSE of the trivial and diagonal factorizations and the lower bound.
    Bounds {
        #[arg(long)]
        n: usize,
    },
    /// RMSE/MaxSE over a lambda grid, plus the optimized lambda.
    SweepLambda {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        b: usize,
        #[arg(long, value_enum, default_value_t = Metric::Rmse)]
        metric: Metric,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
        #[arg(long)]
        normalized: bool,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// RMSE and MaxSE of each factorization family at its optimized lambda.
    RmseTable {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        b: usize,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Column-normalized over plain RMSE ratio for several k.
    RatioNormalized {
        /// Horizon; defaults to k * b for each k.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        b: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4, 8])]
        k_list: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        grid: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step timing and draw accounting of the streaming noise generator.
    BenchNoise {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        steps: u64,
        #[arg(long, value_enum, default_value_t = Mode::Lambda)]
        mode: Mode,
        /// Bandwidth for `banded` mode.
        #[arg(long, default_value_t = 2)]
        p: usize,
        #[arg(long, default_value_t = 0.9)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Private training from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Trace destination (JSON lines); defaults to trace.jsonl in the output directory.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Write or verify noise-stream test vectors.
    TestVectors {
        #[arg(long, conflicts_with = "check", required_unless_present = "check")]
        emit: Option<PathBuf>,
        #[arg(long)]
        check: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Lambda)]
        mode: Mode,
        #[arg(long, default_value_t = 2)]
        p: usize,
        #[arg(long, default_value_t = 0.9)]
        lambda: f64,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Rmse,
    Maxse,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Independent,
    Lambda,
    /// Band of the inverse square-root prefix-sum factorization.
    Banded,
}

fn noise_mode(mode: Mode, p: usize, lambda: f64) -> Result<NoiseMode> {
    Ok(match mode {
        Mode::Independent => NoiseMode::Independent,
        Mode::Lambda => NoiseMode::LambdaCancel { lambda },
        Mode::Banded => {
            if p == 0 {
                bail!("bandwidth p must be at least 1");
            }
            // coefficients of (1 - x)^{1/2}
            let mut c = vec![1.0];
            for j in 1..p {
                let prev = c[j - 1];
                c.push(prev * (j as f64 - 1.5) / j as f64);
            }
            NoiseMode::BandedInverse { coeffs: c }
        }
    })
}

fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => {
            let p = resolve(p);
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)
                    .with_context(|| format!("creating {}", parent.display()))?;
            }
            Box::new(BufWriter::new(
                File::create(&p).with_context(|| format!("creating {}", p.display()))?,
            ))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn write_csv<T: Serialize>(out: &Option<PathBuf>, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(output(out)?);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn agree(a: f64, b: f64) -> bool {
    let s = a.abs().max(b.abs());
    s == 0.0 || (a - b).abs() / s <= AGREEMENT_TOL
}

fn cmd_sens(n: usize, k: usize, b: usize, lambda: f64, normalized: bool) -> Result<()> {
    let schema = ParticipationSchema::new(n, k, b)?;
    let (structural, closed, brute) = if normalized {
        let m = normalized_c_lambda(n, lambda)?;
        let brute = (n <= BRUTE_FORCE_MAX_N)
            .then(|| bruteforce_profile(&m, &schema, 1 << 25))
            .transpose()?
            .map(|mut p| p.pop().expect("k >= 1").sens);
        (
            leftmost_column_sum_norm(&m, &schema)?,
            sens_normalized(n, k, b, lambda)?,
            brute,
        )
    } else {
        let c = make_c_lambda(n, lambda)?;
        let brute = (n <= BRUTE_FORCE_MAX_N)
            .then(|| bruteforce_profile(&c, &schema, 1 << 25))
            .transpose()?
            .map(|mut p| p.pop().expect("k >= 1").sens);
        (
            sens_min_sep(&c, &schema)?,
            sens_c_lambda_closed(n, k, b, lambda)?,
            brute,
        )
    };
    let consistent = agree(structural, closed) && brute.is_none_or(|v| agree(v, structural));

    #[derive(Serialize)]
    struct Report {
        n: usize,
        k: usize,
        b: usize,
        lambda: f64,
        normalized: bool,
        sens: f64,
        structural: f64,
        closed_form: f64,
        brute_force: Option<f64>,
        consistent: bool,
    }
    print_json(&Report {
        n,
        k,
        b,
        lambda,
        normalized,
        sens: structural,
        structural,
        closed_form: closed,
        brute_force: brute,
        consistent,
    })?;
    if !consistent {
        bail!("sensitivity computations disagree beyond {AGREEMENT_TOL:e}");
    }
    Ok(())
}

fn cmd_bounds(n: usize) -> Result<()> {
    let b = full_batch_bounds(n)?;

    #[derive(Serialize)]
    struct Report {
        n: usize,
        trivial: f64,
        diagonal: f64,
        lower: f64,
        trivial_over_diagonal: f64,
        diagonal_over_lower: f64,
        trivial_over_lower: f64,
    }
    print_json(&Report {
        n,
        trivial: b.trivial,
        diagonal: b.diagonal,
        lower: b.lower,
        trivial_over_diagonal: b.trivial / b.diagonal,
        diagonal_over_lower: b.diagonal / b.lower,
        trivial_over_lower: b.trivial / b.lower,
    })
}

fn family(normalized: bool) -> Family {
    if normalized {
        Family::Normalized
    } else {
        Family::Lambda
    }
}

#[derive(Serialize)]
struct LambdaStar {
    metric: &'static str,
    lambda_star: f64,
    value: f64,
    grid_lambda: f64,
    grid_value: f64,
}

fn cmd_sweep(
    schema: ParticipationSchema,
    metric: Metric,
    grid: usize,
    normalized: bool,
    out: &Option<PathBuf>,
) -> Result<()> {
    let fam = family(normalized);
    let rows = sweep_lambda(fam, &schema, grid)?;
    let (objective, name) = match metric {
        Metric::Rmse => (Objective::Rmse, "rmse"),
        Metric::Maxse => (Objective::MaxSe, "maxse"),
    };
    let best = optimize_lambda(&objective, fam, &schema, grid, &[])?;
    write_csv(out, &["n", "k", "b", "lambda", "rmse", "maxse", "sens"], &rows)?;
    let star = LambdaStar {
        metric: name,
        lambda_star: best.lambda,
        value: best.value,
        grid_lambda: best.grid_lambda,
        grid_value: best.grid_value,
    };
    if out.is_some() {
        print_json(&star)
    } else {
        eprintln!("{}", serde_json::to_string(&star)?);
        Ok(())
    }
}

fn cmd_rmse_table(schema: ParticipationSchema, grid: usize, out: &Option<PathBuf>) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        label: String,
        n: usize,
        k: usize,
        b: usize,
        lambda: Option<f64>,
        rmse: f64,
        maxse: f64,
        sens: f64,
    }
    let n = schema.n();
    let mut rows = Vec::new();
    let mut push = |label: &str, lambda: Option<f64>, r: lambdacgd::metrics::MetricReport| {
        rows.push(Row {
            label: label.into(),
            n,
            k: schema.k(),
            b: schema.b(),
            lambda,
            rmse: r.rmse,
            maxse: r.maxse,
            sens: r.sens,
        })
    };
    push("dp-sgd", None, evaluate(&Factorization::dp_sgd(n)?, &schema)?);
    for (fam, label) in [(Family::Lambda, "lambda"), (Family::Normalized, "lambda-normalized")] {
        let best = optimize_lambda(&Objective::Rmse, fam, &schema, grid, &[])?;
        push(label, Some(best.lambda), fam.report(&schema, best.lambda)?);
    }
    push("diag-quarter", None, evaluate(&diagonal_strategy(n)?, &schema)?);
    write_csv(
        out,
        &["label", "n", "k", "b", "lambda", "rmse", "maxse", "sens"],
        &rows,
    )
}

fn cmd_ratio(
    n: Option<usize>,
    b: usize,
    k_list: &[usize],
    grid: usize,
    out: &Option<PathBuf>,
) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        n: usize,
        k: usize,
        b: usize,
        lambda: f64,
        ratio: f64,
    }
    let mut ks = k_list.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::new();
    for k in ks {
        let n = n.unwrap_or(k * b);
        ParticipationSchema::new(n, k, b)?;
        for lambda in lambda_grid(grid, &[])?.into_iter().filter(|&l| l > 0.0) {
            rows.push(Row {
                n,
                k,
                b,
                lambda,
                ratio: normalized_rmse_ratio(n, k, b, lambda)?,
            });
        }
    }
    write_csv(out, &["n", "k", "b", "lambda", "ratio"], &rows)
}

fn cmd_bench(
    d: usize,
    steps: u64,
    mode: NoiseMode,
    seed: u64,
    out: &Option<PathBuf>,
) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        step: u64,
        nanos: u128,
        fresh_blocks: u64,
        regenerated_blocks: u64,
        saved_states: usize,
    }
    let cfg = NoiseStreamConfig::new(mode, d, 1.0, seed)?;
    let mut stream = NoiseStream::new(cfg)?.with_horizon(steps);
    let mut buf = vec![0.0; d];
    let mut rows = Vec::with_capacity(steps as usize);
    for step in 1..=steps {
        let t = Instant::now();
        stream.next_noise_into(&mut buf)?;
        let nanos = t.elapsed().as_nanos();
        let acc = stream.draw_accounting();
        rows.push(Row {
            step,
            nanos,
            fresh_blocks: acc.fresh_blocks,
            regenerated_blocks: acc.regenerated_blocks,
            saved_states: stream.saved_states(),
        });
    }
    write_csv(
        out,
        &["step", "nanos", "fresh_blocks", "regenerated_blocks", "saved_states"],
        &rows,
    )
}

fn cmd_train(
    path: &Path,
    trace: &Option<PathBuf>,
    lambda: Option<f64>,
    seed: Option<u64>,
    epsilon: Option<f64>,
    delta: Option<f64>,
) -> Result<()> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config: TrainConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(l) = lambda {
        config.lambda = l;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    if epsilon.is_some() || delta.is_some() {
        config.budget = PrivacyBudget::new(
            epsilon.unwrap_or(config.budget.epsilon()),
            delta.unwrap_or(config.budget.delta()),
        )?;
    }
    let (theta, tr) = train(&config)?;
    let trace_path = trace.clone().unwrap_or_else(|| PathBuf::from("trace.jsonl"));
    let w = output(&Some(trace_path.clone()))?;
    write_trace_jsonl(w, &config, &tr)?;

    #[derive(Serialize)]
    struct Summary {
        trace: PathBuf,
        steps: usize,
        final_loss: f64,
        theta_hash: String,
        theta_final: Vec<f64>,
        sigma_multiplier: f64,
        sens: f64,
        noise_std: f64,
    }
    print_json(&Summary {
        trace: resolve(&trace_path),
        steps: tr.records.len(),
        final_loss: tr.final_loss,
        theta_hash: theta_hash(&theta),
        theta_final: theta,
        sigma_multiplier: tr.sigma_multiplier,
        sens: tr.sens,
        noise_std: tr.noise_std,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_test_vectors(
    emit: &Option<PathBuf>,
    check: &Option<PathBuf>,
    mode: NoiseMode,
    d: usize,
    steps: usize,
    seed: u64,
    scale: f64,
) -> Result<()> {
    if let Some(path) = check {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let tv: TestVectors = serde_json::from_str(&text)?;
        return match tv.first_mismatch()? {
            None => {
                println!("ok: {} steps x {} coordinates match", tv.steps, tv.d);
                Ok(())
            }
            Some((i, j)) => bail!("mismatch at step {} coordinate {j}", i + 1),
        };
    }
    let cfg = NoiseStreamConfig::new(mode, d, scale, seed)?;
    let tv = TestVectors::generate(&cfg, steps)?;
    let mut w = output(emit)?;
    serde_json::to_writer_pretty(&mut w, &tv)?;
    writeln!(w)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sens {
            n,
            k,
            b,
            lambda,
            normalized,
        } => cmd_sens(n, k, b, lambda, normalized),
        Command::Bounds { n } => cmd_bounds(n),
        Command::SweepLambda {
            n,
            k,
            b,
            metric,
            grid,
            normalized,
            out,
        } => cmd_sweep(ParticipationSchema::new(n, k, b)?, metric, grid, normalized, &out),
        Command::RmseTable { n, k, b, grid, out } => {
            cmd_rmse_table(ParticipationSchema::new(n, k, b)?, grid, &out)
        }
        Command::RatioNormalized {
            n,
            b,
            k_list,
            grid,
            out,
        } => cmd_ratio(n, b, &k_list, grid, &out),
        Command::BenchNoise {
            d,
            steps,
            mode,
            p,
            lambda,
            seed,
            out,
        } => cmd_bench(d, steps, noise_mode(mode, p, lambda)?, seed, &out),
        Command::Train {
            config,
            trace,
            lambda,
            seed,
            epsilon,
            delta,
        } => cmd_train(&config, &trace, lambda, seed, epsilon, delta),
        Command::TestVectors {
            emit,
            check,
            mode,
            p,
            lambda,
            d,
            steps,
            seed,
            scale,
        } => cmd_test_vectors(
            &emit,
            &check,
            noise_mode(mode, p, lambda)?,
            d,
            steps,
            seed,
            scale,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
