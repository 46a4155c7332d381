use clap::{Args, Parser, Subcommand};
use mapd::env::{gen_orders, read_orders, reset, step, write_orders, Order, RewardConfig};
use mapd::eval::{
    evaluate, EvalMode, ExpertPolicy, NetworkPolicy, Policy, RandomPolicy,
};
use mapd::map::{compute_pfci, load_map, GridMap, DEFAULT_ALPHA_PFCI};
use mapd::obs::{build_observation, predicted_paths, write_observation, write_sidecar, ObsContext};
use mapd::policy::infer::SampleMode;
use mapd::policy::{ParamStore, PolicyConfig};
use mapd::trainer::{train_with_orders, TrainConfig, TrainError};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_INPUT: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "mapd", version, about = "Warehouse multi-agent pickup-and-delivery toolkit")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Emit machine-readable JSON instead of a human summary.
    #[arg(long, global = true)]
    json: bool,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Graph and complexity metrics for a grid map.
    MapStats(MapStatsArgs),
    /// Sample a random order stream and write it as CSV.
    GenOrders(GenOrdersArgs),
    /// Run the planner on an instance and stream per-step events.
    Plan(RolloutArgs),
    /// Roll out a policy and stream per-step events.
    Simulate(SimulateArgs),
    /// Train a policy.
    Train(TrainArgs),
    /// Evaluate a policy over seeds and write a report.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct MapStatsArgs {
    #[arg(long)]
    map: PathBuf,
    /// Scaling constant of the complexity index.
    #[arg(long, default_value_t = DEFAULT_ALPHA_PFCI)]
    alpha: f64,
}

#[derive(Args)]
struct GenOrdersArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    count: usize,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    map: PathBuf,
    /// Order CSV; omit for an idle instance.
    #[arg(long)]
    orders: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    agents: usize,
    #[arg(long, default_value_t = 100)]
    steps: u32,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    rollout: RolloutArgs,
    /// `random`, `expert`, or `network:<dir>` with a trained checkpoint.
    #[arg(long, default_value = "expert")]
    policy: String,
    /// Write observation tensors for every agent and step into this
    /// directory, with a sidecar describing the layout.
    #[arg(long)]
    dump_obs: Option<PathBuf>,
    #[arg(long, default_value_t = 11)]
    fov: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    map: PathBuf,
    /// Order CSV replayed by every environment; omit to sample fresh
    /// streams per environment.
    #[arg(long)]
    orders: Option<PathBuf>,
    /// JSON file with training settings; missing fields use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured agent count.
    #[arg(long)]
    agents: Option<usize>,
    /// Override the configured iteration count.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    rollout: RolloutArgs,
    #[arg(long, default_value = "expert")]
    policy: String,
    /// Comma-separated evaluation seeds; defaults to the global seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Single fixed goal per agent instead of the lifelong order stream.
    #[arg(long)]
    one_shot: bool,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Diverged(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Diverged(m) => write!(f, "{m}"),
        }
    }
}

fn input_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn read_map(path: &Path) -> Result<GridMap, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("map");
    load_map(&text, name).map_err(input_err)
}

fn read_order_file(path: &Path, n_agents: usize) -> Result<Vec<Vec<Order>>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    read_orders(&text, n_agents).map_err(input_err)
}

fn load_instance(args: &RolloutArgs) -> Result<(GridMap, Vec<Vec<Order>>), CliError> {
    let map = read_map(&args.map)?;
    let orders = match &args.orders {
        Some(p) => read_order_file(p, args.agents)?,
        None => vec![Vec::new(); args.agents],
    };
    if orders.len() != args.agents {
        return Err(CliError::Input(format!(
            "order file covers {} agents but {} requested",
            orders.len(),
            args.agents
        )));
    }
    Ok((map, orders))
}

fn network_dir(spec: &str) -> Option<&str> {
    spec.strip_prefix("network:")
}

fn load_network(dir: &str, seed: u64) -> Result<NetworkPolicy, CliError> {
    let dir = Path::new(dir);
    let cfg_text = std::fs::read_to_string(dir.join("policy.json"))
        .map_err(|e| CliError::Input(format!("cannot read policy.json in {}: {e}", dir.display())))?;
    let cfg: PolicyConfig = serde_json::from_str(&cfg_text).map_err(input_err)?;
    let store = ParamStore::load(&dir.join("final"))
        .map_err(|e| CliError::Input(format!("cannot load checkpoint in {}: {e}", dir.display())))?;
    Ok(NetworkPolicy::new(store, cfg, SampleMode::Argmax, seed))
}

fn make_policy(spec: &str, seed: u64) -> Result<Box<dyn Policy>, CliError> {
    match spec {
        "random" => Ok(Box::new(RandomPolicy::new(seed))),
        "expert" => Ok(Box::new(ExpertPolicy)),
        other => match network_dir(other) {
            Some(dir) => Ok(Box::new(load_network(dir, seed)?)),
            None => Err(CliError::Input(format!(
                "unknown policy '{other}' (expected random, expert, or network:<dir>)"
            ))),
        },
    }
}

#[derive(Serialize)]
struct StepLine<'a> {
    t: u32,
    actions: Vec<usize>,
    rewards: &'a [f64],
    events: Vec<String>,
    goals_completed: u64,
    orders_completed: u64,
}

#[derive(Serialize)]
struct RolloutSummary {
    kind: &'static str,
    steps: u32,
    n_agents: usize,
    goals_completed: u64,
    orders_completed: u64,
    throughput: f64,
    total_reward: f64,
    collision_events: u64,
}

fn run_rollout(
    map: &GridMap,
    orders: &[Vec<Order>],
    args: &RolloutArgs,
    seed: u64,
    mut policy: Box<dyn Policy>,
    dump: Option<(&Path, usize)>,
) -> Result<RolloutSummary, CliError> {
    let mut state = reset(map, args.agents, orders, seed).map_err(input_err)?;
    let reward_cfg = RewardConfig::default();
    let ctx = dump.map(|_| ObsContext::new(map));
    if let Some((dir, fov)) = dump {
        std::fs::create_dir_all(dir).map_err(input_err)?;
        write_sidecar(dir, fov).map_err(input_err)?;
    }
    let stdout = std::io::stdout();
    let mut total_reward = 0.0;
    let mut collisions = 0u64;
    for _ in 0..args.steps {
        if let (Some((dir, fov)), Some(ctx)) = (dump, ctx.as_ref()) {
            let paths = predicted_paths(&state);
            for i in 0..state.n_agents() {
                let obs = build_observation(&state, i, fov, &paths, ctx).map_err(input_err)?;
                let tag = format!("t{:05}_a{}", state.t, i);
                write_observation(dir, &tag, &obs).map_err(input_err)?;
            }
        }
        let actions = policy.joint_action(&state);
        let out = step(&mut state, &actions, &reward_cfg).map_err(input_err)?;
        total_reward += out.rewards.iter().sum::<f64>();
        collisions += out
            .events
            .iter()
            .filter(|e| **e == mapd::env::Event::Collided)
            .count() as u64;
        let line = StepLine {
            t: state.t,
            actions: actions.iter().map(|a| a.index()).collect(),
            rewards: &out.rewards,
            events: out.events.iter().map(|e| format!("{e:?}")).collect(),
            goals_completed: state.goals_completed,
            orders_completed: state.orders_completed,
        };
        use std::io::Write;
        writeln!(
            stdout.lock(),
            "{}",
            serde_json::to_string(&line).expect("step line serializes")
        )
        .map_err(input_err)?;
    }
    Ok(RolloutSummary {
        kind: "summary",
        steps: args.steps,
        n_agents: args.agents,
        goals_completed: state.goals_completed,
        orders_completed: state.orders_completed,
        throughput: state.goals_completed as f64 / args.steps as f64,
        total_reward,
        collision_events: collisions,
    })
}

fn print_summary(summary: &RolloutSummary) {
    println!("{}", serde_json::to_string(summary).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::MapStats(a) => {
            let map = read_map(&a.map)?;
            let metrics = compute_pfci(&map, a.alpha).map_err(input_err)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&metrics).expect("serializable"));
            } else {
                println!("map: {} ({}x{})", a.map.display(), map.height(), map.width());
                println!("rho_o  (obstacle density):  {:.4}", metrics.rho_o);
                println!("rho_t  (traversability):    {:.4}", metrics.rho_t);
                println!("rho_e  (edge density):      {:.4}", metrics.rho_e);
                println!("v_e    (complexity index):  {:.4}", metrics.v_e);
                println!("l_corr (mean corridor len): {:.4}", metrics.l_corr);
            }
            if let Some(out) = &cli.out {
                let text = serde_json::to_string_pretty(&metrics).expect("serializable");
                std::fs::write(out, text).map_err(input_err)?;
            }
            Ok(())
        }
        Cmd::GenOrders(a) => {
            let map = read_map(&a.map)?;
            if map.free_cells().len() < 2 {
                return Err(CliError::Input("map needs at least two free cells".into()));
            }
            let orders = gen_orders(&map, a.count, cli.seed);
            let rows: Vec<(Order, i64)> = orders.into_iter().map(|o| (o, -1)).collect();
            match &cli.out {
                Some(path) => {
                    let file = std::fs::File::create(path).map_err(input_err)?;
                    write_orders(&rows, file).map_err(input_err)?;
                }
                None => {
                    write_orders(&rows, std::io::stdout()).map_err(input_err)?;
                }
            }
            Ok(())
        }
        Cmd::Plan(a) => {
            let (map, orders) = load_instance(a)?;
            let summary = run_rollout(&map, &orders, a, cli.seed, Box::new(ExpertPolicy), None)?;
            print_summary(&summary);
            Ok(())
        }
        Cmd::Simulate(a) => {
            let (map, orders) = load_instance(&a.rollout)?;
            if a.fov < 3 || a.fov % 2 == 0 {
                return Err(CliError::Input(format!("fov must be odd and >= 3, got {}", a.fov)));
            }
            let policy = make_policy(&a.policy, cli.seed)?;
            let dump = a.dump_obs.as_deref().map(|d| (d, a.fov));
            let summary = run_rollout(&map, &orders, &a.rollout, cli.seed, policy, dump)?;
            print_summary(&summary);
            Ok(())
        }
        Cmd::Train(a) => {
            let map = read_map(&a.map)?;
            let mut cfg: TrainConfig = match &a.config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| {
                        CliError::Input(format!("cannot read {}: {e}", path.display()))
                    })?;
                    serde_json::from_str(&text).map_err(input_err)?
                }
                None => TrainConfig::default(),
            };
            cfg.seed = cli.seed;
            if let Some(n) = a.agents {
                cfg.n_agents = n;
            }
            if let Some(k) = a.iters {
                cfg.iterations = k;
            }
            let fixed = match &a.orders {
                Some(p) => Some(read_order_file(p, cfg.n_agents)?),
                None => None,
            };
            let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("train_out"));
            match train_with_orders(
                &map,
                &cfg,
                &RewardConfig::default(),
                &out_dir,
                fixed.as_deref(),
            ) {
                Ok(out) => {
                    if let Some(last) = out.metrics.last() {
                        println!(
                            "{}",
                            serde_json::to_string(last).expect("metrics serialize")
                        );
                    }
                    Ok(())
                }
                Err(e @ TrainError::Diverged { .. }) => Err(CliError::Diverged(e.to_string())),
                Err(e) => Err(CliError::Input(e.to_string())),
            }
        }
        Cmd::Evaluate(a) => {
            let (map, orders) = load_instance(&a.rollout)?;
            let seeds: Vec<u64> = match &a.seeds {
                Some(s) => s
                    .split(',')
                    .map(|p| p.trim().parse::<u64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::Input(format!("bad --seeds: {e}")))?,
                None => vec![cli.seed],
            };
            if seeds.is_empty() {
                return Err(CliError::Input("--seeds must not be empty".into()));
            }
            let mode = if a.one_shot { EvalMode::OneShot } else { EvalMode::Lifelong };
            // validate the policy spec up front so the closure below cannot fail
            make_policy(&a.policy, cli.seed)?;
            let report = evaluate(
                &map,
                &orders,
                a.rollout.agents,
                a.rollout.steps,
                &seeds,
                mode,
                &RewardConfig::default(),
                |s| make_policy(&a.policy, s).expect("policy spec validated above"),
            )
            .map_err(input_err)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            } else {
                println!(
                    "policy={} seeds={} throughput={:.4}+-{:.4} reward={:.2}+-{:.2}",
                    report.policy,
                    seeds.len(),
                    report.mean_throughput,
                    report.std_throughput,
                    report.mean_reward,
                    report.std_reward
                );
                if let Some(soc) = report.mean_sum_of_costs {
                    println!("mean sum-of-costs={soc:.2} success rate={:.2}", report.success_rate.unwrap_or(0.0));
                }
            }
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out).map_err(input_err)?;
                report.write_json(&out.join("report.json")).map_err(input_err)?;
                report.write_csv(&out.join("report.csv")).map_err(input_err)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(CliError::Diverged(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DIVERGED)
        }
    }
}
