//! Closed-loop simulation and benchmark CLI.
//!
//! `simulate` runs one closed loop and writes a per-step CSV; `study` runs
//! the warm-vs-cold statistical comparison over many trials and error
//! levels; `emit` writes the built-in benchmark model and its offline
//! terminal data to model files.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mld_mpc::cartpole::{build_controller, CartPoleParams};
use mld_mpc::io;
use mld_mpc::sim::{run_closed_loop, run_study, ErrorModel, SimOptions, StudyConfig};
use mld_mpc::{BnbConfig, Controller, LinkMatrices, Mode, StageData};
use nalgebra::{DMatrix, DVector};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "mld-mpc", version, about = "Warm-started branch-and-bound MPC for MLD systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation and write a per-step CSV.
    Simulate(SimulateArgs),
    /// Run the warm-vs-cold statistical study and write row + summary CSVs.
    Study(StudyArgs),
    /// Write the built-in benchmark model (and optionally its terminal data).
    Emit(EmitArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Model file (JSON). Without it the built-in cart-pole benchmark is
    /// used, including its terminal penalty and terminal constraint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prediction horizon.
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    /// Closed-loop steps per trial.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Base RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optimality tolerance of the branch-and-bound search.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Propagate the persistent-feasibility upper bound between steps.
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    upper_bound: Switch,
    /// Initial state, comma separated. Defaults to the benchmark push state.
    #[arg(long, value_delimiter = ',')]
    x0: Option<Vec<f64>>,
    /// Per-node solver log.
    #[arg(long)]
    verbose: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Warm,
    Cold,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ModeArg::Warm => vec![Mode::Warm],
            ModeArg::Cold => vec![Mode::Cold],
            ModeArg::Both => vec![Mode::Warm, Mode::Cold],
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Error scale c (per-state deviation is c times the state bound).
    #[arg(long, default_value_t = 0.0)]
    error_scale: f64,
    /// Trial index selecting the error substream.
    #[arg(long, default_value_t = 0)]
    trial: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Warm)]
    mode: ModeArg,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Error scale c; repeat the flag for several levels.
    #[arg(long = "error-scale", required = true)]
    error_scales: Vec<f64>,
    /// Trials per error level.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    /// Per-step rows CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Aggregated summary CSV path (defaults to `<out>.agg.csv`).
    #[arg(long)]
    summary_out: Option<PathBuf>,
}

#[derive(Args)]
struct EmitArgs {
    /// Where to write the benchmark MLD model.
    #[arg(long)]
    model_out: PathBuf,
    /// Optionally also compute and write the offline terminal data.
    #[arg(long)]
    terminal_out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    horizon: usize,
}

fn build(common: &CommonArgs) -> Result<(Controller, DVector<f64>)> {
    let (ctrl, default_x0) = match &common.model {
        None => {
            let (ctrl, _) = build_controller(&CartPoleParams::default(), common.horizon)
                .context("building the benchmark controller")?;
            let x0 = DVector::from_row_slice(&[0.0, 0.0, 1.0, 0.0]);
            (ctrl, x0)
        }
        Some(path) => {
            let model = io::read_model(path).context("reading the model file")?;
            let stage = Arc::new(StageData::build(
                &model,
                DMatrix::identity(model.n_x, model.n_x),
                DMatrix::identity(model.input_dim(), model.input_dim()),
                None,
                common.horizon,
            )?);
            let links = LinkMatrices::identity(&stage);
            let x0 = DVector::zeros(model.n_x);
            (Controller::new(stage, links), x0)
        }
    };
    let x0 = match &common.x0 {
        Some(v) => {
            if v.len() != ctrl.stage.model.n_x {
                bail!(
                    "--x0 has {} entries, the model has {} states",
                    v.len(),
                    ctrl.stage.model.n_x
                );
            }
            DVector::from_row_slice(v)
        }
        None => default_x0,
    };
    Ok((ctrl, x0))
}

fn bnb_config(common: &CommonArgs) -> BnbConfig {
    BnbConfig {
        epsilon: common.epsilon,
        verbose: common.verbose,
        ..BnbConfig::default()
    }
}

fn out_writer(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p).context("creating output file")?),
        None => Box::new(std::io::stdout()),
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(args) => simulate(args),
        Command::Study(args) => study(args),
        Command::Emit(args) => emit(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let (ctrl, x0) = build(&args.common)?;
    let err = ErrorModel::new(args.error_scale, ctrl.stage_scale(), args.common.seed);
    let mut w = out_writer(args.out.as_ref())?;
    writeln!(
        w,
        "trial,tau,mode,c,qp_count,cover_size,theta_star,warmstart_pre_ms,warmstart_post_ms,solve_ms,terminated"
    )?;
    for mode in args.mode.modes() {
        let opts = SimOptions {
            mode,
            bnb: bnb_config(&args.common),
            upper_bound_propagation: args.common.upper_bound == Switch::On,
        };
        let trace = run_closed_loop(&ctrl, &x0, args.common.steps, &err, args.trial, &opts)?;
        let n = trace.steps.len();
        for (k, s) in trace.steps.iter().enumerate() {
            let theta = if s.objective.is_finite() {
                format!("{:.9e}", s.objective)
            } else {
                "inf".into()
            };
            writeln!(
                w,
                "{},{},{},{:.9e},{},{},{},{:.3},{:.3},{:.3},{}",
                args.trial,
                s.tau,
                mode,
                args.error_scale,
                s.qp_count,
                s.cover_size,
                theta,
                s.warm_pre_ms,
                s.warm_post_ms,
                s.solve_ms,
                (trace.infeasible_termination && k + 1 == n) as u8
            )?;
        }
        if trace.infeasible_termination {
            eprintln!("{mode}: terminated at an infeasible state after {n} steps");
        }
    }
    Ok(())
}

fn study(args: StudyArgs) -> Result<()> {
    let (ctrl, x0) = build(&args.common)?;
    let cfg = StudyConfig {
        steps: args.common.steps,
        trials: args.trials,
        error_scales: args.error_scales.clone(),
        base_seed: args.common.seed,
        modes: args.mode.modes(),
        bnb: bnb_config(&args.common),
        upper_bound_propagation: args.common.upper_bound == Switch::On,
    };
    let result = run_study(&ctrl, &x0, &cfg)?;
    let mut w = std::fs::File::create(&args.out).context("creating rows CSV")?;
    result.write_rows_csv(&mut w)?;
    let summary_path = args
        .summary_out
        .unwrap_or_else(|| args.out.with_extension("agg.csv"));
    let mut w = std::fs::File::create(&summary_path).context("creating summary CSV")?;
    result.write_summary_csv(&mut w)?;
    for (scale, mode, done) in &result.completed {
        eprintln!(
            "c={scale:.1e} {mode}: {done}/{} trials completed, median QP count {:.1}",
            args.trials,
            result.median_qp_count(*scale, *mode)
        );
    }
    Ok(())
}

fn emit(args: EmitArgs) -> Result<()> {
    let params = CartPoleParams::default();
    let model = mld_mpc::cartpole::build_cartpole_mld(&params)?;
    io::write_model(&args.model_out, &model)?;
    eprintln!("wrote {}", args.model_out.display());
    if let Some(tpath) = args.terminal_out {
        let (_, terminal) = build_controller(&params, args.horizon)?;
        io::write_terminal_data(&tpath, &terminal)?;
        eprintln!("wrote {}", tpath.display());
    }
    Ok(())
}
