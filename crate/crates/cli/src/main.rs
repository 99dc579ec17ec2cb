use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use radiomap::data::{group_by_position, parse_dataset, Dataset, GridSpec, Position, RadioMap};
use radiomap::dgp::{build_dgp_radio_map, DgpMapOptions};
use radiomap::error::ErrorKind;
use radiomap::eval::{compute_errors, emit_cdf_svg, summarize};
use radiomap::gp::{build_gp_radio_map, GpMapOptions};
use radiomap::pipeline::{load_config, run_pipeline};
use radiomap::positioning::{locate, Estimate};
use radiomap::simulator::{sample_chessboard, ChessboardConfig};
use radiomap::stats::levene_statistic;
use radiomap::{Error, Result};

#[derive(Parser)]
#[command(name = "radiomap", version, about = "Probabilistic WiFi radio maps and one-shot positioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Gp,
    Dgp,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the chessboard survey: train.jsonl, test.jsonl, truth.json.
    Simulate {
        #[arg(long, default_value_t = 9)]
        rows: usize,
        #[arg(long, default_value_t = 9)]
        cols: usize,
        #[arg(long, default_value_t = 10)]
        train_per_grid: usize,
        #[arg(long, default_value_t = 1)]
        test_per_grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Levene's test across the locations at which one AP was surveyed.
    Levene {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ap: String,
        /// Records within this distance share a group.
        #[arg(long, default_value_t = 0.0)]
        tol: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Fit a radio map over a unit-cell grid.
    Fit {
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optimizer iterations (GP) or training steps (DGP).
        #[arg(long)]
        iters: Option<usize>,
        /// Inducing points per DGP layer.
        #[arg(long)]
        inducing: Option<usize>,
        /// Width of both DGP hidden layers.
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// MAP cell for every observation line.
    Locate {
        #[arg(long)]
        radiomap: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error statistics of estimates against true positions.
    Evaluate {
        #[arg(long)]
        estimates: PathBuf,
        /// JSONL whose lines carry the true `x` and `y`, in estimate order
        /// (a test survey from `simulate` qualifies).
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        label: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Simulate, fit GP and DGP maps, locate and compare.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize)]
struct ObsLine {
    obs: BTreeMap<String, f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Input => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            rows,
            cols,
            train_per_grid,
            test_per_grid,
            seed,
            out,
        } => {
            let config = ChessboardConfig {
                rows,
                cols,
                train_per_grid,
                test_per_grid,
                seed,
                ..Default::default()
            };
            let board = sample_chessboard(&config)?;
            fs::create_dir_all(&out)?;
            write_dataset(&board.train, &out.join("train.jsonl"))?;
            write_dataset(&board.test, &out.join("test.jsonl"))?;
            fs::write(out.join("truth.json"), board.truth.to_radio_map().to_json() + "\n")?;
            println!(
                "{} training and {} test records in {}",
                board.train.len(),
                board.test.len(),
                out.display()
            );
        }
        Command::Levene {
            dataset,
            ap,
            tol,
            alpha,
        } => {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::Validation(format!("alpha must lie in (0, 1), got {alpha}")));
            }
            let data = read_dataset(&dataset)?;
            let groups: Vec<Vec<f64>> = group_by_position(&data, &ap, tol)?
                .into_iter()
                .map(|(_, v)| v)
                .collect();
            let r = levene_statistic(&groups)?;
            println!("W = {}", r.w);
            println!("df1 = {}", r.df1);
            println!("df2 = {}", r.df2);
            println!("p = {}", r.p_value);
            if r.rejects(alpha) {
                println!("heteroscedastic: reject equal variances at alpha = {alpha}");
            } else {
                println!("no evidence against equal variances at alpha = {alpha}");
            }
        }
        Command::Fit {
            model,
            dataset,
            rows,
            cols,
            seed,
            iters,
            inducing,
            hidden,
            out,
        } => {
            let data = read_dataset(&dataset)?;
            let grid = GridSpec::unit(rows, cols)?;
            let map = match model {
                Model::Gp => {
                    if inducing.is_some() || hidden.is_some() {
                        return Err(Error::Validation(
                            "--inducing and --hidden apply to the dgp model only".into(),
                        ));
                    }
                    let mut opts = GpMapOptions::default();
                    if let Some(n) = iters {
                        opts.fit.max_iters = n;
                    }
                    build_gp_radio_map(&data, &grid, &opts)?.0
                }
                Model::Dgp => {
                    let mut opts = DgpMapOptions {
                        seed,
                        ..Default::default()
                    };
                    if let Some(n) = iters {
                        opts.steps = n;
                    }
                    if let Some(k) = inducing {
                        opts.config.k_l = k;
                        opts.config.k_h = k;
                    }
                    if let Some(d) = hidden {
                        opts.config.d_l = d;
                        opts.config.d_h = d;
                    }
                    build_dgp_radio_map(&data, &grid, &opts)?
                }
            };
            fs::write(&out, map.to_json() + "\n")?;
        }
        Command::Locate { radiomap, obs, out } => {
            let map = RadioMap::from_json(&fs::read_to_string(&radiomap)?)?;
            let mut w = BufWriter::new(File::create(&out)?);
            for (line, obs) in read_obs(&obs)? {
                let est = locate(&obs, &map).map_err(|e| Error::Validation(format!("line {line}: {e}")))?;
                serde_json::to_writer(&mut w, &est)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        Command::Evaluate {
            estimates,
            truth,
            label,
            out,
            svg,
        } => {
            let est: Vec<Estimate> = read_jsonl(&estimates)?;
            let truth: Vec<Position> = read_jsonl(&truth)?;
            let report = summarize(&compute_errors(&est, &truth)?, &label);
            fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
            if let Some(path) = svg {
                emit_cdf_svg(std::slice::from_ref(&report), &path)?;
            }
            match report.mean_error {
                Some(m) => println!("{label}: mean error {m} over {} estimates", report.errors.len()),
                None => println!("{label}: no estimates"),
            }
        }
        Command::Pipeline { config, out } => {
            let config = load_config(&config)?;
            let report = run_pipeline(&config, &out)?;
            for r in [&report.gp, &report.dgp] {
                if let Some(m) = r.mean_error {
                    println!("{}: mean error {m}", r.label);
                }
            }
        }
    }
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(BufReader::new(File::open(path)?))
}

fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    data.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Non-blank lines deserialized one by one, with 1-based line numbers in
/// parse errors.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    Ok(read_jsonl_numbered(path)?.into_iter().map(|(_, v)| v).collect())
}

fn read_jsonl_numbered<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let mut items = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        items.push((i + 1, v));
    }
    Ok(items)
}

fn read_obs(path: &Path) -> Result<Vec<(usize, BTreeMap<String, f64>)>> {
    let lines: Vec<(usize, ObsLine)> = read_jsonl_numbered(path)?;
    lines
        .into_iter()
        .map(|(i, l)| {
            if l.obs.is_empty() {
                return Err(Error::Validation(format!("line {i}: empty observation")));
            }
            Ok((i, l.obs))
        })
        .collect()
}
