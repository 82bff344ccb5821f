use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use netslice::allocator::{compare_with_oracle, random_oracle_instance};
use netslice::controller::PidGains;
use netslice::engine::{
    emit_csv, emit_isolation_csv, isolation_report, load_config, run_simulation, ControllerChoice, EngineError,
};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Controller {
    Dpp,
    Pid,
}

/// Run a slicing scenario and write per-slot and summary CSVs.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// Scenario config file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Fading seed; defaults to the scenario's `rng_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of slots; defaults to the scenario's horizon.
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long, value_enum)]
    controller: Option<Controller>,
    #[arg(long)]
    kp: Option<f64>,
    #[arg(long)]
    ki: Option<f64>,
    #[arg(long)]
    kd: Option<f64>,
    /// Power penalty weight.
    #[arg(long)]
    v: Option<f64>,
    /// Steer overloaded self-managed slices to their offered load.
    #[arg(long)]
    no_isolation: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Check the allocator against exhaustive search before running.
    #[arg(long)]
    oracle_check: bool,
}

const ORACLE_INSTANCES: usize = 100;

fn oracle_check(seed: u64, phy: &netslice::scenario::PhyParams) -> Result<bool, EngineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for n in 0..ORACLE_INSTANCES {
        let (w, ch, small) = random_oracle_instance(phy, 3, 3, &mut rng);
        let cmp = compare_with_oracle(&w, &ch, &small)?;
        if !cmp.matches() {
            failures += 1;
            eprintln!(
                "oracle mismatch on instance {n}: allocator {} oracle {} tolerance {}",
                cmp.allocator_objective, cmp.oracle_objective, cmp.tolerance
            );
        }
    }
    eprintln!(
        "oracle check: {}/{ORACLE_INSTANCES} instances match",
        ORACLE_INSTANCES - failures
    );
    Ok(failures == 0)
}

fn run(args: Args) -> Result<ExitCode, EngineError> {
    let (mut scn, mut cfg) = load_config(&args.scenario)?;
    if let Some(seed) = args.seed {
        scn.rng_seed = seed;
    }
    if let Some(slots) = args.slots {
        scn.horizon_slots = slots;
    }
    let mut gains = match cfg.controller {
        ControllerChoice::Pid(g) => g,
        ControllerChoice::DriftPlusPenalty => PidGains::default_for(scn.slot_duration_s),
    };
    gains.kp = args.kp.unwrap_or(gains.kp);
    gains.ki = args.ki.unwrap_or(gains.ki);
    gains.kd = args.kd.unwrap_or(gains.kd);
    match args.controller {
        Some(Controller::Dpp) => cfg.controller = ControllerChoice::DriftPlusPenalty,
        Some(Controller::Pid) => cfg.controller = ControllerChoice::Pid(gains),
        None => {
            if let ControllerChoice::Pid(_) = cfg.controller {
                cfg.controller = ControllerChoice::Pid(gains);
            }
        }
    }
    if let Some(v) = args.v {
        cfg.v = v;
    }
    if args.no_isolation {
        cfg.isolation = false;
    }
    cfg.validate()?;

    if args.oracle_check && !oracle_check(scn.rng_seed, &scn.phy)? {
        return Ok(ExitCode::FAILURE);
    }

    let result = run_simulation(&scn, &cfg)?;
    for path in emit_csv(&scn, &result, &args.out)? {
        eprintln!("wrote {}", path.display());
    }
    let has_event = scn.events.events().first().is_some_and(|e| e.slot < scn.horizon_slots);
    if has_event {
        let report = isolation_report(&scn, &result, cfg.isolation_window)?;
        eprintln!("wrote {}", emit_isolation_csv(&report, &args.out)?.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
