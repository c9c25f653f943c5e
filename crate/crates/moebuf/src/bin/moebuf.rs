use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use moebuf::error::{Error, Result};
use moebuf::spec::{ExperimentSpec, RoutingKind, Scenario};
use moebuf::trace::{route_gates, write_json, GateFile};
use moebuf::{checkpoint, harness};
use moebuf_core::{ModelConfig, RoutingStrategy, ToyModel};

/// Mixture-of-experts buffer contention lab.
#[derive(Parser, Debug)]
#[command(name = "moebuf", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrity attack on the default victim, one run per seed.
    Demo(ScenarioArgs),
    /// Attack success across capacity slack values, endpoints included.
    SweepCapacity(ScenarioArgs),
    /// Victim first versus last, with top-1 and top-2 routing.
    Position(ScenarioArgs),
    /// Denial-of-expert attack against the victim's preferred expert.
    Denial(ScenarioArgs),
    /// Pinned adversarial batch against probes sharing the victim's prefix.
    Transfer(ScenarioArgs),
    /// Pinned adversarial batch under each mitigation.
    Mitigate(ScenarioArgs),
    /// Route a gate-matrix file and print the plan and buffers.
    Route(RouteArgs),
    /// Initialise a model and write its checkpoint.
    InitModel(InitArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RoutingArg {
    Vanilla,
    Unlimited,
    Sampled,
}

impl From<RoutingArg> for RoutingKind {
    fn from(r: RoutingArg) -> Self {
        match r {
            RoutingArg::Vanilla => RoutingKind::Vanilla,
            RoutingArg::Unlimited => RoutingKind::Unlimited,
            RoutingArg::Sampled => RoutingKind::Sampled,
        }
    }
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Experiment spec (JSON). Without it every default below applies.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// First run seed (overrides the spec's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the spec's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Deployment routing (overrides the spec's `routing`).
    #[arg(long, value_enum)]
    routing: Option<RoutingArg>,
    /// Model checkpoint to load instead of initialising from the spec.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fixture for transfer and mitigate; the built-in one otherwise.
    #[arg(long)]
    fixture: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RouteArgs {
    /// Gate-matrix file: {schema_version, batch, seq_len, experts, rows}.
    #[arg(long)]
    gates: PathBuf,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    /// Buffer capacity B_e; required for vanilla and sampled.
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long, value_enum, default_value = "vanilla")]
    routing: RoutingArg,
    /// Seed for sampled routing.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InitArgs {
    /// Spec whose `model` section configures the model.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Model seed (overrides `model.seed`).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
}

fn defaults_help() -> String {
    let s = ExperimentSpec::default();
    let m = ModelConfig::default();
    let a = s.attack;
    format!(
        "Spec defaults (any key may be omitted; `scenario` is required in a spec file):
  schema_version   {}
  seed             {}   (runs use seed, seed+1, ...)
  seeds            {}
  routing          vanilla   (vanilla | unlimited | sampled)
  victim_seed      {}
  capacity_values  {:?}   (plus C = n/k and C = 0)
  shuffles         {}
  denial.layer     {}
  denial.expert    victim's most used expert in that layer
  denial.capacity_slack  {}   (slack of the deployment the denial attack targets)
  probes           {}
  fixture          built-in
  checkpoint       none (initialise from model)
  output_dir       {}
  model.blocks {}  model.d_model {}  model.vocab {}  model.max_seq_len {}
  model.experts {}  model.top_k {}  model.capacity_slack {}  model.d_ff {}  model.seed {}
  attack.iterations       {} ({} for denial)
  attack.replace_per_seq  {}
  attack.batch_size       {}
  attack.seq_len          {}
  attack.target_position  last (batch_size - 1)
  attack.loss_scale       probability   (probability | logit)
  attack.sentinel_init    {}

Exit status: 0 success, 2 spec error, 1 runtime error.",
        s.schema_version,
        s.seed,
        s.seeds,
        s.victim_seed,
        s.capacity_values,
        s.shuffles,
        s.denial.layer,
        s.denial.capacity_slack,
        s.probes,
        s.output_dir.display(),
        m.blocks,
        m.d_model,
        m.vocab,
        m.max_seq_len,
        m.experts,
        m.top_k,
        m.capacity_slack,
        m.d_ff,
        m.seed,
        moebuf::spec::DEFAULT_ITERATIONS,
        moebuf::spec::DEFAULT_DENIAL_ITERATIONS,
        a.replace_per_seq,
        a.batch_size,
        a.seq_len,
        a.sentinel_init,
    )
}

fn scenario_spec(scenario: Scenario, args: &ScenarioArgs) -> Result<ExperimentSpec> {
    let mut spec = match &args.spec {
        Some(path) => {
            let spec = ExperimentSpec::from_path(path)?;
            if spec.scenario != scenario {
                return Err(Error::Spec(format!(
                    "scenario: spec names {}, subcommand runs {}",
                    spec.scenario.name(),
                    scenario.name()
                )));
            }
            spec
        }
        None => ExperimentSpec::for_scenario(scenario),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(out) = &args.out {
        spec.output_dir = out.clone();
    }
    if let Some(r) = args.routing {
        spec.routing = r.into();
    }
    if let Some(c) = &args.checkpoint {
        spec.checkpoint = Some(c.clone());
    }
    if let Some(f) = &args.fixture {
        spec.fixture = Some(f.clone());
    }
    let spec = spec.resolved();
    harness::preflight(&spec)?;
    Ok(spec)
}

fn run_scenario(scenario: Scenario, args: &ScenarioArgs) -> Result<()> {
    let spec = scenario_spec(scenario, args)?;
    let report = harness::run(&spec)?;
    let root = spec.output_dir.join(scenario.name());
    harness::check_artifacts(&root)?;
    println!(
        "{}: report written to {} ({} ms)",
        scenario.name(),
        root.join("report.json").display(),
        report.wall_clock_ms
    );
    Ok(())
}

fn route(args: &RouteArgs) -> Result<()> {
    let gates = GateFile::load(&args.gates)?.to_gates()?;
    let need_cap = || {
        args.capacity
            .ok_or_else(|| Error::Spec("--capacity is required for vanilla and sampled routing".into()))
    };
    let routing = match args.routing {
        RoutingArg::Unlimited => RoutingStrategy::Unlimited,
        RoutingArg::Vanilla => RoutingStrategy::Vanilla { capacity: need_cap()? },
        RoutingArg::Sampled => RoutingStrategy::Sampled {
            capacity: need_cap()?,
            seed: args.seed,
        },
    };
    if args.top_k == 0 || args.top_k > gates.num_experts() {
        return Err(Error::Spec(format!(
            "top_k = {} must lie in 1..={} (experts)",
            args.top_k,
            gates.num_experts()
        )));
    }
    let output = route_gates(&gates, args.top_k, routing)?;
    match &args.out {
        Some(path) => write_json(path, &output),
        None => {
            println!("{}", serde_json::to_string_pretty(&output)?);
            Ok(())
        }
    }
}

fn init_model(args: &InitArgs) -> Result<()> {
    let mut config = match &args.spec {
        Some(path) => ExperimentSpec::from_path(path)?.model,
        None => ModelConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| Error::Spec(format!("model: {e}")))?;
    let model = ToyModel::init(config)?;
    checkpoint::save(&model, &args.out)?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let help = defaults_help();
    let matches = Cli::command()
        .mut_subcommands(|sub| sub.after_help(help.clone()))
        .after_help(help.clone())
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    let result = match &cli.command {
        Command::Demo(a) => run_scenario(Scenario::Demo, a),
        Command::SweepCapacity(a) => run_scenario(Scenario::CapacitySweep, a),
        Command::Position(a) => run_scenario(Scenario::PositionStudy, a),
        Command::Denial(a) => run_scenario(Scenario::Denial, a),
        Command::Transfer(a) => run_scenario(Scenario::Transfer, a),
        Command::Mitigate(a) => run_scenario(Scenario::MitigationSuite, a),
        Command::Route(a) => route(a),
        Command::InitModel(a) => init_model(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
