use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use backstep::bench::{self, ScalingSettings};
use backstep::config::{Condition, RunConfig};
use backstep::curriculum::Checkpoint;
use backstep::demo::{validate_replay, Demonstration, Recorder};
use backstep::env::keydoor::KeyDoorGridConfig;
use backstep::env::{Action, EnvSpec};
use backstep::eval::EvalMode;
use backstep::policy::Policy;
use backstep::service::{ActionRef, RunRequest, Service};

#[derive(Parser)]
#[command(name = "backstep", version, about = "Learn from a single demonstration with a reverse curriculum")]
struct Cli {
    /// Data directory holding demos, runs and checkpoints.
    #[arg(long, global = true, env = "BACKSTEP_DATA_DIR", default_value = "backstep-data")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP/WebSocket service.
    Serve {
        #[arg(long, env = "BACKSTEP_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "BACKSTEP_PORT", default_value_t = 8080)]
        port: u16,
    },
    /// Record a demonstration from an action script.
    Record(RecordArgs),
    /// Interactive recorder session on stdin (one command per line).
    Session {
        /// cliff:<n>[:<seed>], keydoor, or keydoor:<map file>
        #[arg(long)]
        env: String,
    },
    /// Record a shortest solution: the walk itself for a cliff, exhaustive
    /// search for a key-door map.
    Solve {
        /// cliff:<n>[:<seed>], keydoor, or keydoor:<map file>
        #[arg(long, default_value = "keydoor")]
        env: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Demo(DemoCommand),
    #[command(subcommand)]
    Run(RunCommand),
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Print a default run configuration.
    Config {
        /// cliff:<n>[:<seed>] or keydoor
        #[arg(default_value = "keydoor")]
        env: String,
    },
}

#[derive(Args)]
struct RecordArgs {
    /// cliff:<n>[:<seed>], keydoor, or keydoor:<map file>
    #[arg(long)]
    env: String,
    /// Comma-separated action names or indices; `rewind:<k>` undoes k steps.
    #[arg(long)]
    actions: String,
    /// Store under this name in the data directory.
    #[arg(long)]
    name: Option<String>,
    /// Also write the demonstration file here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "")]
    note: String,
}

#[derive(Subcommand)]
enum DemoCommand {
    List,
    /// Print a stored demonstration as JSON.
    Show { name: String },
    Delete { name: String },
    /// Replay a stored demonstration or a file and report the first divergence.
    Validate {
        name: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Store a demonstration file under a name.
    Import { path: PathBuf, #[arg(long)] name: String },
    /// Write a stored demonstration to a file.
    Export { name: String, #[arg(long)] out: PathBuf },
}

#[derive(Subcommand)]
enum RunCommand {
    /// Train in the foreground, printing one JSON status per line. Ctrl-C
    /// stops the run and writes a checkpoint.
    Start {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        demo: Option<String>,
        #[arg(long)]
        run_id: Option<String>,
        /// Print every n-th status only.
        #[arg(long, default_value_t = 1)]
        every: u64,
    },
    /// Continue a stopped or finished run from its checkpoint.
    Resume {
        run_id: String,
        #[arg(long, default_value_t = 1)]
        every: u64,
    },
    List,
    Status { run_id: String },
    /// Print the recorded status stream of a run.
    Events { run_id: String },
}

#[derive(Clone, Copy, ValueEnum)]
enum ConditionArg {
    FromStart,
    DemoCurriculum,
    Both,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Steps to 95% greedy success versus cliff length.
    Scaling {
        #[arg(long, value_enum, default_value = "both")]
        condition: ConditionArg,
        /// Sizes for the from-start condition, as `lo..=hi`.
        #[arg(long, default_value = "4..=12")]
        from_start_n: String,
        /// Sizes for the curriculum condition, as `lo..=hi`.
        #[arg(long, default_value = "4..=20")]
        curriculum_n: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 10_000_000)]
        budget: u64,
        #[arg(long)]
        batch_steps: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Directory for points.csv, geomeans.csv, report.json and scaling.gp.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained run under action perturbations.
    Eval {
        /// Run whose checkpoint and config to load.
        #[arg(long)]
        run: String,
        /// greedy, sample, sticky:<p> or epsilon:<p>; repeatable.
        #[arg(long = "mode", default_values_t = ["greedy".to_string(), "sticky:0.25".to_string(), "epsilon:0.01".to_string()])]
        modes: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_env(s: &str) -> anyhow::Result<EnvSpec> {
    if let Some(path) = s.strip_prefix("keydoor:") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading map {path}"))?;
        return Ok(EnvSpec::KeyDoorGrid(KeyDoorGridConfig::parse(&text)?));
    }
    Ok(s.parse()?)
}

fn parse_range(s: &str) -> anyhow::Result<Vec<usize>> {
    let (lo, hi) = s.split_once("..=").context("ranges look like 4..=12")?;
    let (lo, hi): (usize, usize) = (lo.trim().parse()?, hi.trim().parse()?);
    if lo > hi {
        bail!("empty range {s}");
    }
    Ok((lo..=hi).collect())
}

fn resolve_action(names: &[&str], token: &str) -> anyhow::Result<Action> {
    if let Ok(i) = token.parse::<u32>() {
        return Ok(Action(i));
    }
    names
        .iter()
        .position(|n| *n == token)
        .map(|i| Action(i as u32))
        .with_context(|| format!("unknown action '{token}'; choose from {}", names.join(", ")))
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn record(service: &Service, args: RecordArgs) -> anyhow::Result<()> {
    let spec = parse_env(&args.env)?;
    let mut rec = Recorder::new(&spec)?.with_note(args.note);
    let names: Vec<&str> = rec.env().action_names().to_vec();
    for token in args.actions.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if let Some(k) = token.strip_prefix("rewind:") {
            rec.rewind(k.parse()?)?;
        } else {
            rec.step(resolve_action(&names, token)?)?;
        }
    }
    let demo = rec.finish()?;
    finish_demo(service, &demo, args.name.as_deref(), args.out.as_deref())
}

fn finish_demo(service: &Service, demo: &Demonstration, name: Option<&str>, out: Option<&std::path::Path>) -> anyhow::Result<()> {
    if name.is_none() && out.is_none() {
        bail!("give --name to store the demonstration or --out to write it to a file");
    }
    if let Some(path) = out {
        demo.save(path)?;
        println!("wrote {} ({} steps, return {})", path.display(), demo.len(), demo.total_return());
    }
    if let Some(name) = name {
        let entry = service.store().save_demo(name, demo, false)?;
        print_json(&entry)?;
    }
    Ok(())
}

fn session(service: &Service, env: &str) -> anyhow::Result<()> {
    let spec = parse_env(env)?;
    let created = service.session_create(&spec, None)?;
    let id = created.session.session_id.clone();
    let token = created.token.clone();
    println!("{}", serde_json::to_string(&created.session)?);
    println!("# commands: <action>, rewind <k>, view, save <name>, discard, quit");
    let stdin = std::io::stdin();
    for line in stdin.lock().lines() {
        let line = line?;
        let words: Vec<&str> = line.split_whitespace().collect();
        let reply = match words.as_slice() {
            [] => continue,
            ["quit"] | ["exit"] => break,
            ["view"] => serde_json::to_value(service.session_view(&id)?).map_err(Into::into),
            ["rewind", k] => k
                .parse::<usize>()
                .map_err(anyhow::Error::from)
                .and_then(|k| Ok(serde_json::to_value(service.session_rewind(&id, &token, k)?)?)),
            ["save", name] => service.session_save(&id, &token, name).map_err(Into::into).and_then(|e| Ok(serde_json::to_value(e)?)),
            ["discard"] => serde_json::to_value(service.session_discard(&id, &token)?).map_err(Into::into),
            [action] => {
                let a = action.parse::<u32>().map(ActionRef::Index).unwrap_or_else(|_| ActionRef::Name(action.to_string()));
                service.session_step(&id, &token, &a).map_err(Into::into).and_then(|v| Ok(serde_json::to_value(v)?))
            }
            _ => Err(anyhow::anyhow!("unrecognized command '{line}'")),
        };
        match reply {
            Ok(v) => println!("{v}"),
            Err(e) => println!("{}", serde_json::json!({ "error": e.to_string() })),
        }
        std::io::stdout().flush()?;
    }
    Ok(())
}

fn follow(service: &Service, run_id: &str, every: u64) -> anyhow::Result<ExitCode> {
    {
        let service = service.clone();
        let id = run_id.to_owned();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build();
            if let Ok(rt) = rt {
                if rt.block_on(tokio::signal::ctrl_c()).is_ok() {
                    eprintln!("stopping run {id}; writing checkpoint");
                    let _ = service.run_request_stop(&id);
                }
            }
        });
    }
    let sub = service.run_subscribe(run_id)?;
    if let Some(mut rx) = sub.events {
        loop {
            match rx.blocking_recv() {
                Ok(status) => {
                    if status.tau_moved || status.iteration % every.max(1) == 0 {
                        println!("{}", serde_json::to_string(&status)?);
                    }
                }
                Err(tokio::sync::broadcast::error::RecvError::Lagged(_)) => continue,
                Err(tokio::sync::broadcast::error::RecvError::Closed) => break,
            }
        }
    }
    let view = service.run_wait(run_id)?;
    eprintln!("{}", serde_json::to_string_pretty(&view)?);
    Ok(match view.summary {
        Some(s) if s.converged => ExitCode::SUCCESS,
        _ => ExitCode::from(3),
    })
}

fn bench_scaling(cmd: BenchCommand) -> anyhow::Result<ExitCode> {
    let BenchCommand::Scaling { condition, from_start_n, curriculum_n, seeds, budget, batch_steps, workers, learning_rate, out } = cmd
    else {
        unreachable!()
    };
    let mut settings = ScalingSettings { budget, ..ScalingSettings::default() };
    if let Some(l) = batch_steps {
        settings.curriculum.batch_steps = l;
    }
    if let Some(m) = workers {
        settings.curriculum.workers = m;
    }
    if let Some(a) = learning_rate {
        settings.learner.learning_rate = a;
    }
    let seeds: Vec<u64> = (0..seeds).collect();
    let mut points = Vec::new();
    if matches!(condition, ConditionArg::FromStart | ConditionArg::Both) {
        points.extend(bench::run_scaling_experiment(&parse_range(&from_start_n)?, &seeds, Condition::FromStart, &settings)?);
    }
    if matches!(condition, ConditionArg::DemoCurriculum | ConditionArg::Both) {
        points.extend(bench::run_scaling_experiment(&parse_range(&curriculum_n)?, &seeds, Condition::DemoCurriculum, &settings)?);
    }
    let report = bench::fit_and_report(&points);
    print!("{}", bench::points_to_csv(&points));
    println!();
    print!("{}", report.to_table());
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("points.csv"), bench::points_to_csv(&points))?;
        std::fs::write(dir.join("geomeans.csv"), bench::geomeans_csv(&report))?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        std::fs::write(dir.join("scaling.gp"), bench::gnuplot_script("geomeans.csv"))?;
        eprintln!("wrote results to {}", dir.display());
    }
    Ok(if report.is_inconclusive() { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn bench_eval(service: &Service, run: &str, modes: &[String], episodes: usize, seed: u64) -> anyhow::Result<()> {
    let config: RunConfig = service.store().read_run_config(run)?;
    let checkpoint: Checkpoint = service.store().load_checkpoint(run)?;
    let policy = Policy::for_spec(config.policy.clone().into(), &config.env)?;
    for m in modes {
        let mode: EvalMode = m.parse()?;
        let summary = bench::evaluate_perturbed(&policy, &checkpoint.params, &config.env, mode, episodes, seed)?;
        println!("{}", serde_json::to_string(&summary)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Command::Bench(cmd @ BenchCommand::Scaling { .. }) = cli.command {
        return bench_scaling(cmd);
    }
    if let Command::Config { env } = &cli.command {
        let spec = parse_env(env)?;
        let config = match spec {
            EnvSpec::BlindCliffWalk(c) => RunConfig { env: EnvSpec::BlindCliffWalk(c.clone()), ..RunConfig::cliff_walk(c.n_states) },
            spec @ EnvSpec::KeyDoorGrid(_) => RunConfig { env: spec, ..RunConfig::key_door() },
        };
        print!("{}", config.to_toml());
        return Ok(ExitCode::SUCCESS);
    }
    let service = Service::open(&cli.data_dir).with_context(|| format!("opening {}", cli.data_dir.display()))?;
    match cli.command {
        Command::Serve { host, port } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                log::info!("listening on http://{}", listener.local_addr()?);
                backstep::service::http::serve(service, listener).await
            })?;
        }
        Command::Record(args) => record(&service, args)?,
        Command::Session { env } => session(&service, &env)?,
        Command::Solve { env, name, out } => {
            let spec = parse_env(&env)?;
            let actions = match &spec {
                EnvSpec::BlindCliffWalk(c) => c.correct_actions(),
                EnvSpec::KeyDoorGrid(c) => c.solve().context("the map has no solution")?.actions,
            };
            let demo = backstep::demo::record(&spec, actions, "shortest solution")?;
            finish_demo(&service, &demo, name.as_deref(), out.as_deref())?;
        }
        Command::Demo(cmd) => match cmd {
            DemoCommand::List => print_json(&service.demo_list())?,
            DemoCommand::Show { name } => print_json(&service.demo_get(&name)?)?,
            DemoCommand::Delete { name } => service.demo_delete(&name)?,
            DemoCommand::Validate { name, file } => {
                let demo = match (name, file) {
                    (_, Some(path)) => Demonstration::load(path)?,
                    (Some(name), None) => Demonstration::load(service.store().root().join("demos").join(format!("{name}.demo")))?,
                    (None, None) => bail!("give a demonstration name or --file"),
                };
                let report = validate_replay(&demo, &demo.env_spec()?)?;
                print_json(&report)?;
                if !report.is_exact() {
                    return Ok(ExitCode::from(4));
                }
            }
            DemoCommand::Import { path, name } => {
                let entry = service.store().save_demo(&name, &Demonstration::load(path)?, false)?;
                print_json(&entry)?;
            }
            DemoCommand::Export { name, out } => service.store().load_demo(&name)?.save(out)?,
        },
        Command::Run(cmd) => match cmd {
            RunCommand::Start { config, demo, run_id, every } => {
                let config = RunConfig::load(&config)?;
                let view = service.run_start(RunRequest { run_id, demo, config })?;
                eprintln!("started run {}", view.run_id);
                return follow(&service, &view.run_id, every);
            }
            RunCommand::Resume { run_id, every } => {
                service.run_resume(&run_id)?;
                return follow(&service, &run_id, every);
            }
            RunCommand::List => print_json(&service.run_list()?)?,
            RunCommand::Status { run_id } => print_json(&service.run_status(&run_id)?)?,
            RunCommand::Events { run_id } => {
                for s in service.store().read_statuses(&run_id)? {
                    println!("{}", serde_json::to_string(&s)?);
                }
            }
        },
        Command::Bench(BenchCommand::Eval { run, modes, episodes, seed }) => bench_eval(&service, &run, &modes, episodes, seed)?,
        Command::Bench(BenchCommand::Scaling { .. }) | Command::Config { .. } => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

