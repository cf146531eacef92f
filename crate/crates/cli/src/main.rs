use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskswitch::checkpoint::{self, Checkpoint};
use maskswitch::config::RunConfig;
use maskswitch::eval;
use maskswitch::model::{self, infer_config};
use maskswitch::policies::Policy;
use maskswitch::synth::{generate_dataset, Dataset, FamilyCounts};
use maskswitch::trainer::{self, StepLog, TrainState};
use maskswitch::{Error, Result};

#[derive(Parser)]
#[command(name = "maskswitch", version, about = "Per-instance mask resolution selection on synthetic shapes")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "MASKSWITCH_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train and eval splits under `<out-dir>/train` and `<out-dir>/eval`.
    Gen(GenArgs),
    /// Pretrain, then train jointly; writes `model.ckpt` and the logs.
    Train(TrainArgs),
    /// Evaluate one policy on the eval split.
    Eval(EvalArgs),
    /// Evaluate several checkpoint/policy pairs and tabulate them.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Training instances per family.
    #[arg(long)]
    train_per_family: Option<usize>,
    /// Evaluation instances per family.
    #[arg(long)]
    eval_per_family: Option<usize>,
}

#[derive(Args)]
struct PolicyArgs {
    /// `fixed`, `size-based` or `dynamic` (also `fixed-K`).
    #[arg(long)]
    policy: Option<String>,
    /// Rung for `--policy fixed`.
    #[arg(long)]
    rung: Option<usize>,
}

impl PolicyArgs {
    fn resolve(&self, default: Policy) -> Result<Policy> {
        match (self.policy.as_deref(), self.rung) {
            (None, None) => Ok(default),
            (None, Some(k)) | (Some("fixed"), Some(k)) => {
                Ok(Policy::Fixed(maskswitch::policies::fixed_select(k).map_err(cfg_err)?))
            }
            (Some("fixed"), None) => Err(Error::Config("`--policy fixed` needs `--rung`".into())),
            (Some(p), None) => p.parse(),
            (Some(p), Some(_)) => Err(Error::Config(format!("`--rung` only applies to `--policy fixed`, not `{p}`"))),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root produced by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Budget target C_t.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    joint_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Start from this checkpoint's weights and skip pretraining.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root produced by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Also write per-instance contour overlays.
    #[arg(long)]
    overlays: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Dataset root produced by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// `CHECKPOINT@POLICY`, repeated.
    #[arg(long = "run", required = true, num_args = 1)]
    runs: Vec<String>,
}

fn cfg_err(e: Error) -> Error {
    Error::Config(e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn cmd_gen(mut cfg: RunConfig, args: &GenArgs, out: &Path) -> Result<()> {
    if let Some(s) = args.seed {
        cfg.dataset.seed = s;
    }
    if let Some(n) = args.train_per_family {
        cfg.dataset.train = FamilyCounts::uniform(n);
    }
    if let Some(n) = args.eval_per_family {
        cfg.dataset.eval = FamilyCounts::uniform(n);
    }
    cfg.validate()?;
    let d = &cfg.dataset;
    let train = generate_dataset(&d.train, &d.sizes, d.seed, &out.join("train"))?;
    let test = generate_dataset(&d.eval, &d.sizes, d.eval_seed(), &out.join("eval"))?;
    println!("{} train and {} eval instances written to {}", train.records.len(), test.records.len(), out.display());
    Ok(())
}

struct JsonLines(BufWriter<fs::File>, PathBuf);

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let f = fs::File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        Ok(Self(BufWriter::new(f), path))
    }

    fn push(&mut self, log: &StepLog) -> Result<()> {
        let line = serde_json::to_string(log).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(self.0, "{line}").map_err(|e| Error::Io { path: self.1.clone(), source: e })
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush().map_err(|e| Error::Io { path: self.1, source: e })
    }
}

fn cmd_train(mut cfg: RunConfig, args: &TrainArgs, out: &Path) -> Result<()> {
    let t = &mut cfg.trainer;
    t.policy = args.policy.resolve(t.policy)?;
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.pretrain_steps {
        t.pretrain_steps = v;
    }
    if let Some(v) = args.joint_steps {
        t.joint_steps = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.budget {
        cfg.cost.target = v;
    }
    cfg.validate().map_err(cfg_err)?;
    let data = Dataset::load(&args.data.join("train"))?;
    if data.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    create_dir(out)?;
    let hash = cfg.hash();
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let with_switch = cfg.trainer.policy.uses_switch();
    let mut state = match &args.init {
        Some(p) => {
            let mut params = checkpoint::load(p, None)?.state.params;
            let fresh = model::init_params::<f32>(&infer_config(&params)?, cfg.trainer.seed, true)?;
            if with_switch && !maskswitch::msm::has_msm(&params) {
                for (name, t) in fresh.iter().filter(|(n, _)| n.starts_with("msm.")) {
                    params.insert(name, t.clone())?;
                }
            }
            TrainState::new(params)
        }
        None => {
            let params = model::init_params(&cfg.model, cfg.trainer.seed, with_switch)?;
            let mut state = TrainState::new(params);
            let mut log = JsonLines::create(out.join("pretrain_log.jsonl"))?;
            trainer::pretrain(&mut state, &data, &cfg.trainer, &cfg.cost, |l| log.push(l))?;
            log.finish()?;
            state
        }
    };
    let mut log = JsonLines::create(out.join("train_log.jsonl"))?;
    trainer::train_joint(&mut state, &data, &cfg.trainer, &cfg.cost, |l| log.push(l))?;
    log.finish()?;
    if !with_switch {
        state.params = drop_switch(&state.params);
        state.momentum.retain(|n, _| !n.starts_with("msm."));
    }
    let path = out.join("model.ckpt");
    checkpoint::save(&Checkpoint { config_hash: hash, state }, &path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}

fn drop_switch(p: &maskswitch::diff::ParamStore<f32>) -> maskswitch::diff::ParamStore<f32> {
    let mut out = maskswitch::diff::ParamStore::new(p.seed());
    for (name, t) in p.iter().filter(|(n, _)| !n.starts_with("msm.")) {
        out.insert(name, t.clone()).expect("unique names");
    }
    out
}

fn run_eval(
    ckpt: &Path,
    data: &Dataset,
    policy: Policy,
    cfg: &RunConfig,
    out: &Path,
    overlays: bool,
) -> Result<eval::EvalReport> {
    let ck = checkpoint::load(ckpt, None)?;
    if policy.uses_switch() && !maskswitch::msm::has_msm(&ck.state.params) {
        return Err(Error::Config(format!("{} has no switch weights; the dynamic policy needs them", ckpt.display())));
    }
    let preds = eval::predict(&ck.state.params, data, policy)?;
    let report = eval::report(&preds, policy, &cfg.cost, &ck.config_hash)?;
    eval::write_report(&report, out)?;
    if overlays {
        eval::write_overlays(&preds, &out.join("overlays"))?;
    }
    Ok(report)
}

fn cmd_eval(cfg: RunConfig, args: &EvalArgs, out: &Path) -> Result<()> {
    let policy = args.policy.resolve(cfg.eval.policy)?;
    let data = Dataset::load(&args.data.join("eval"))?;
    let r = run_eval(&args.checkpoint, &data, policy, &cfg, out, args.overlays || cfg.eval.overlays)?;
    println!(
        "{}: oracle-AP {:.4}, mean IoU {:.4}, E(C) {:.3} ({:+.1}%)",
        r.policy, r.oracle_ap, r.mean_iou, r.expected_cost, r.delta_pct
    );
    Ok(())
}

fn cmd_compare(cfg: RunConfig, args: &CompareArgs, out: &Path) -> Result<()> {
    let data = Dataset::load(&args.data.join("eval"))?;
    let mut reports = Vec::new();
    for (i, run) in args.runs.iter().enumerate() {
        let (ckpt, policy) =
            run.rsplit_once('@').ok_or_else(|| Error::Config(format!("`{run}` is not CHECKPOINT@POLICY")))?;
        let policy: Policy = policy.parse()?;
        let dir = out.join(format!("run{i}_{policy}"));
        reports.push(run_eval(Path::new(ckpt), &data, policy, &cfg, &dir, false)?);
    }
    create_dir(out)?;
    let table = eval::comparison_csv(&reports);
    write_file(&out.join("comparison.csv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Parse { .. } => 3,
        Error::NonFinite { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = load_config(cli.config.as_deref()).and_then(|cfg| match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(cfg, a, &cli.out_dir),
        Cmd::Train(a) => cmd_train(cfg, a, &cli.out_dir),
        Cmd::Eval(a) => cmd_eval(cfg, a, &cli.out_dir),
        Cmd::Compare(a) => cmd_compare(cfg, a, &cli.out_dir),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
