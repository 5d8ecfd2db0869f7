//! Command-line front end: one subcommand per stage or evaluation, each
//! reading a config file plus flag overrides and writing into `--out`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind as ClapKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analytics::{ablation_harness, export_policy_grid, skip_ratio_stats, write_skip_ratios, write_traces};
use crate::config::{MiaConfig, RunConfig};
use crate::controller::{DimensionSet, MaskBundle};
use crate::cost::{model_flops, SampleFlops};
use crate::data::{load_splits, synth_generate, write_directory, Dataset};
use crate::error::MiaError;
use crate::model::Policy;
use crate::robust::{self, AttackKind, AttackSpec};
use crate::train::log::RunLog;
use crate::train::stages::{cotrain, evaluate, finetune_rl, pretrain_controller, train_backbone};
use crate::train::state::{Stage, TrainState};

#[derive(Debug, Parser)]
#[command(name = "mia-former", version, about = "Input-adaptive vision transformer: training, evaluation and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset as PNGs, labels.csv and a packed file.
    SynthData(Common),
    /// Train the dense backbone (unless --ckpt holds one) and pretrain the controller.
    PretrainController(Common),
    /// Co-train backbone and controller toward the FLOPs target.
    Cotrain(Common),
    /// Actor-critic fine-tuning from a co-trained checkpoint.
    FinetuneRl(Common),
    /// Clean accuracy and FLOPs ratio on the validation split.
    Eval(Common),
    /// Clean and adversarial accuracy under PGD and FGSM.
    AttackEval(Common),
    /// FLOPs ratio of a policy.
    Flops(FlopsArgs),
    /// Per-sample policy traces, skip ratios and policy grids.
    TracePolicy(TraceArgs),
    /// Retrain and evaluate every dynamic-dimension subset from a pretrained checkpoint.
    Ablate(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run config (JSON). Defaults to the checkpoint's config, else the built-in one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub target_flops_ratio: Option<f64>,
    /// Fraction of controller weights inherited at the actor-critic stage.
    #[arg(long)]
    pub inherit: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Epochs of the stage this command trains.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory [default: runs/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint directory to start from.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// pgd, fgsm or all.
    #[arg(long)]
    pub attack: Option<String>,
    /// Dynamic dimensions, e.g. head+token, all or none.
    #[arg(long)]
    pub dims: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    AllOn,
    SkipAll,
    Eval,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "eval")]
    pub policy: PolicyArg,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of per-sample policy grids to draw.
    #[arg(long, default_value_t = 8)]
    pub grids: usize,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(MiaError),
}

impl From<MiaError> for Failure {
    fn from(e: MiaError) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::PretrainController(_) => "pretrain-controller",
            Command::Cotrain(_) => "cotrain",
            Command::FinetuneRl(_) => "finetune-rl",
            Command::Eval(_) => "eval",
            Command::AttackEval(_) => "attack-eval",
            Command::Flops(_) => "flops",
            Command::TracePolicy(_) => "trace-policy",
            Command::Ablate(_) => "ablate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::SynthData(c)
            | Command::PretrainController(c)
            | Command::Cotrain(c)
            | Command::FinetuneRl(c)
            | Command::Eval(c)
            | Command::AttackEval(c)
            | Command::Ablate(c) => c,
            Command::Flops(f) => &f.common,
            Command::TracePolicy(t) => &t.common,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ClapKind::DisplayHelp | ClapKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let name = cli.command.name();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let mut cmd = Cli::command();
            cmd.build();
            let usage = cmd
                .find_subcommand_mut(name)
                .map(|c| c.render_usage().to_string())
                .unwrap_or_default();
            eprintln!("error: {msg}\n\n{usage}\n\nFor more information, try 'mia-former {name} --help'.");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Outcome<Self> {
        fs::create_dir_all(dir).map_err(|e| MiaError::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Failure::Runtime(MiaError::Invalid(format!(
                "{} is in use by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            )))),
            Err(e) => Err(MiaError::io(&path, e).into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Content hash in the style of a git blob: the digest of a typed,
/// length-prefixed header followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash of a file or directory tree: blobs listed by relative path.
pub fn tree_hash(path: &Path) -> Result<String, MiaError> {
    let mut entries = Vec::new();
    collect_files(path, path, &mut entries)?;
    entries.sort();
    let mut h = Sha256::new();
    for (rel, blob) in &entries {
        h.update(format!("{blob} {rel}\n").as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, p: &Path, out: &mut Vec<(String, String)>) -> Result<(), MiaError> {
    let meta = fs::metadata(p).map_err(|e| MiaError::io(p, e))?;
    if meta.is_dir() {
        for entry in fs::read_dir(p).map_err(|e| MiaError::io(p, e))? {
            let entry = entry.map_err(|e| MiaError::io(p, e))?;
            collect_files(root, &entry.path(), out)?;
        }
    } else {
        let bytes = fs::read(p).map_err(|e| MiaError::io(p, e))?;
        let rel = p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/");
        out.push((rel, blob_hash(&bytes)));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct InputEntry {
    name: String,
    hash: String,
}

/// Self-description of one CLI run, written as `run_manifest.json`.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    version: &'static str,
    config_hash: String,
    input_hash: String,
    inputs: Vec<InputEntry>,
    seed: u64,
    config: RunConfig,
}

struct Context {
    name: &'static str,
    out: PathBuf,
    inputs: Vec<InputEntry>,
    _lock: DirLock,
}

impl Context {
    fn new(cmd: &Command) -> Outcome<Self> {
        let c = cmd.common();
        let out = c.out.clone().unwrap_or_else(|| Path::new("runs").join(cmd.name()));
        let lock = DirLock::acquire(&out)?;
        let mut inputs = Vec::new();
        if let Some(p) = &c.config {
            inputs.push(InputEntry {
                name: format!("config:{}", p.display()),
                hash: tree_hash(p)?,
            });
        }
        if let Some(p) = &c.ckpt {
            inputs.push(InputEntry {
                name: format!("checkpoint:{}", p.display()),
                hash: tree_hash(p)?,
            });
        }
        Ok(Self {
            name: cmd.name(),
            out,
            inputs,
            _lock: lock,
        })
    }

    fn add_dataset(&mut self, data: &Dataset) {
        self.inputs.push(InputEntry {
            name: "dataset".into(),
            hash: data.content_hash(),
        });
    }

    fn manifest(&self, run: &RunConfig) -> Outcome<()> {
        let mut h = Sha256::new();
        for i in &self.inputs {
            h.update(format!("{} {}\n", i.hash, i.name).as_bytes());
        }
        let m = RunManifest {
            command: self.name.to_string(),
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION"),
            config_hash: run.hash(),
            input_hash: hex::encode(h.finalize()),
            inputs: self
                .inputs
                .iter()
                .map(|i| InputEntry {
                    name: i.name.clone(),
                    hash: i.hash.clone(),
                })
                .collect(),
            seed: run.model.seed,
            config: run.clone(),
        };
        let path = self.out.join("run_manifest.json");
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| MiaError::io(&path, e).into())
    }
}

fn same_architecture(a: &MiaConfig, b: &MiaConfig) -> bool {
    (a.num_blocks, a.num_heads, a.head_dim, a.token_grid, a.use_class_token, a.patch_size, a.image_size, a.in_channels, a.num_classes)
        == (b.num_blocks, b.num_heads, b.head_dim, b.token_grid, b.use_class_token, b.patch_size, b.image_size, b.in_channels, b.num_classes)
        && a.mlp_ratio == b.mlp_ratio
        && a.controller_hidden == b.controller_hidden
        && a.head_feature_dim == b.head_feature_dim
}

/// Config file (or checkpoint config, or defaults) with flag overrides.
fn resolve_config(c: &Common, ckpt: Option<&TrainState>) -> Outcome<RunConfig> {
    let mut run = match (&c.config, ckpt) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(s)) => s.run.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        run.model.seed = s;
    }
    if let Some(r) = c.target_flops_ratio {
        run.model.target_flops_ratio = r;
    }
    if let Some(r) = c.inherit {
        run.model.inherit_fraction = r;
    }
    if let Some(b) = c.beta {
        run.model.beta = b;
    }
    run.model.validate()?;
    if let Some(s) = ckpt {
        if !same_architecture(&s.run.model, &run.model) {
            return Err(Failure::Runtime(MiaError::Checkpoint(
                "the config describes a different architecture than the checkpoint".into(),
            )));
        }
    }
    Ok(run)
}

fn parse_dims(c: &Common) -> Outcome<Option<DimensionSet>> {
    c.dims
        .as_deref()
        .map(|d| d.parse().map_err(|e: MiaError| Failure::Usage(e.to_string())))
        .transpose()
}

fn need_ckpt<'a>(c: &'a Common, what: &str) -> Outcome<&'a Path> {
    c.ckpt
        .as_deref()
        .ok_or_else(|| Failure::Usage(format!("--ckpt is required ({what})")))
}

/// Loads the checkpoint and applies the resolved config to it.
fn load_state(c: &Common, path: &Path) -> Outcome<TrainState> {
    let mut state = TrainState::load(path)?;
    let run = resolve_config(c, Some(&state))?;
    state.seed = run.model.seed;
    state.run = run;
    if let Some(d) = parse_dims(c)? {
        state.dims = d;
    }
    Ok(state)
}

fn execute(cmd: &Command) -> Outcome<()> {
    let c = cmd.common();
    // usage problems are reported before anything touches the disk
    let dims = parse_dims(c)?;
    let attacks = match cmd {
        Command::AttackEval(_) => attack_list(c.attack.as_deref())?,
        _ => Vec::new(),
    };
    match cmd {
        Command::Cotrain(_) => drop(need_ckpt(c, "a controller-pretrained checkpoint")?),
        Command::FinetuneRl(_) => drop(need_ckpt(c, "a co-trained checkpoint")?),
        Command::Eval(_) | Command::AttackEval(_) | Command::TracePolicy(_) => drop(need_ckpt(c, "the model to evaluate")?),
        Command::Ablate(_) => drop(need_ckpt(c, "a controller-pretrained checkpoint")?),
        Command::Flops(f) if f.policy == PolicyArg::Eval => drop(need_ckpt(c, "the eval policy needs weights")?),
        _ => {}
    }
    let mut ctx = Context::new(cmd)?;
    match cmd {
        Command::SynthData(_) => synth_data(&mut ctx, c),
        Command::PretrainController(_) => pretrain(&mut ctx, c),
        Command::Cotrain(_) => cotrain_cmd(&mut ctx, c),
        Command::FinetuneRl(_) => finetune_cmd(&mut ctx, c),
        Command::Eval(_) => eval_cmd(&mut ctx, c, dims),
        Command::AttackEval(_) => attack_cmd(&mut ctx, c, dims, &attacks),
        Command::Flops(f) => flops_cmd(&mut ctx, c, f.policy, dims),
        Command::TracePolicy(t) => trace_cmd(&mut ctx, c, dims, t.grids),
        Command::Ablate(_) => ablate_cmd(&mut ctx, c, dims),
    }
}

fn attack_list(arg: Option<&str>) -> Outcome<Vec<AttackSpec>> {
    match arg.unwrap_or("all") {
        "all" => Ok(vec![AttackSpec::pgd(), AttackSpec::fgsm()]),
        other => {
            let kind: AttackKind = other.parse().map_err(|e: MiaError| Failure::Usage(e.to_string()))?;
            Ok(vec![AttackSpec::default_for(kind)])
        }
    }
}

fn synth_data(ctx: &mut Context, c: &Common) -> Outcome<()> {
    let mut run = resolve_config(c, None)?;
    let cfg = run.model.validate()?;
    let (samples, seed) = match &mut run.data.source {
        crate::config::DataSource::Synthetic { samples, seed } => {
            if let Some(s) = c.seed {
                *seed = s;
            }
            (*samples, *seed)
        }
        _ => (5000, c.seed.unwrap_or(7)),
    };
    let data = synth_generate(cfg.num_classes, samples, seed, cfg.in_channels, cfg.image_size)?;
    write_directory(&data, &ctx.out)?;
    ctx.add_dataset(&data);
    ctx.manifest(&run)?;
    println!("wrote {} samples ({} classes, seed {seed}) to {}", data.len(), data.num_classes, ctx.out.display());
    println!("content hash {}", data.content_hash());
    Ok(())
}

fn pretrain(ctx: &mut Context, c: &Common) -> Outcome<()> {
    let mut state = match &c.ckpt {
        Some(p) => load_state(c, p)?,
        None => TrainState::new(resolve_config(c, None)?)?,
    };
    if let Some(e) = c.epochs {
        state.run.training.backbone_epochs = e;
    }
    let (data, splits) = load_splits(&state.run)?;
    ctx.add_dataset(&data);
    ctx.manifest(&state.run)?;
    let mut log = RunLog::new(Some(&ctx.out))?;
    if state.stage == Stage::Backbone && !state.stage_complete {
        train_backbone(&mut state, &splits, &mut log)?;
        state.save(&ctx.out.join("backbone"))?;
        if let Some(r) = state.history.last() {
            println!("backbone: {} epochs, val accuracy {:.4}", state.epoch, r.clean_acc);
        }
    }
    let outcome = pretrain_controller(&mut state, &splits, &mut log)?;
    state.save(&ctx.out.join("checkpoint"))?;
    println!(
        "controller pretraining: {} epochs, hard loss {}, converged {}",
        outcome.epochs, outcome.hard_loss, outcome.converged
    );
    if !outcome.converged {
        return Err(Failure::Runtime(MiaError::Stage(format!(
            "controller pretraining stopped at hard loss {} after {} epochs",
            outcome.hard_loss, outcome.epochs
        ))));
    }
    Ok(())
}

fn cotrain_cmd(ctx: &mut Context, c: &Common) -> Outcome<()> {
    let mut state = load_state(c, need_ckpt(c, "")?)?;
    if let Some(e) = c.epochs {
        state.run.training.cotrain_epochs = e;
    }
    let (data, splits) = load_splits(&state.run)?;
    ctx.add_dataset(&data);
    ctx.manifest(&state.run)?;
    let mut log = RunLog::new(Some(&ctx.out))?;
    cotrain(&mut state, &splits, &mut log)?;
    state.save(&ctx.out.join("checkpoint"))?;
    if let Some(r) = state.history.last() {
        println!(
            "cotrain: {} epochs, train exec ratio {:.4}, val accuracy {:.4}, val exec ratio {:.4}",
            state.epoch,
            r.exec_ratio_mean.unwrap_or(f64::NAN),
            r.clean_acc,
            r.val_exec_ratio
        );
    }
    Ok(())
}

fn finetune_cmd(ctx: &mut Context, c: &Common) -> Outcome<()> {
    let mut state = load_state(c, need_ckpt(c, "")?)?;
    if let Some(e) = c.epochs {
        state.run.training.rl_total_epochs = e;
    }
    let (data, splits) = load_splits(&state.run)?;
    ctx.add_dataset(&data);
    ctx.manifest(&state.run)?;
    let mut log = RunLog::new(Some(&ctx.out))?;
    log.keep_rewards = false;
    let report = finetune_rl(&mut state, &splits, &mut log)?;
    state.save(&ctx.out.join("checkpoint"))?;
    if let Some(r) = report {
        println!(
            "inherited {} of {} controller weights; re-initialized {} tensors",
            r.inherited,
            r.total,
            r.reinitialized.len()
        );
    }
    if let Some(r) = state.history.last() {
        println!(
            "finetune-rl: {} epochs, reward {:.4}, val accuracy {:.4}, val exec ratio {:.4}",
            state.epoch,
            r.reward_mean.unwrap_or(f64::NAN),
            r.clean_acc,
            r.val_exec_ratio
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRow {
    checkpoint: String,
    dims: String,
    samples: usize,
    accuracy: f64,
    exec_ratio_mean: f64,
    exec_ratio_std: f64,
}

fn eval_cmd(ctx: &mut Context, c: &Common, dims: Option<DimensionSet>) -> Outcome<()> {
    let path = need_ckpt(c, "")?;
    let state = load_state(c, path)?;
    let dims = dims.unwrap_or(state.dims);
    let cfg = state.run.model.validate()?;
    let (data, splits) = load_splits(&state.run)?;
    ctx.add_dataset(&data);
    ctx.manifest(&state.run)?;
    let eval = evaluate(&cfg, &state.params, &splits.val, Policy::eval(&state.params, dims))?;
    let flops = model_flops(&cfg, eval.traces.iter().map(|t| (t.sample_id, t.blocks.as_slice())))?;
    flops.write_csv(&ctx.out.join("flops.csv"))?;
    let row = EvalRow {
        checkpoint: path.display().to_string(),
        dims: dims.to_string(),
        samples: splits.val.len(),
        accuracy: eval.accuracy,
        exec_ratio_mean: eval.exec_mean,
        exec_ratio_std: eval.exec_std,
    };
    write_one(&ctx.out.join("eval.csv"), &row)?;
    println!(
        "accuracy {:.4} exec ratio {:.4} ± {:.4} ({} samples)",
        row.accuracy, row.exec_ratio_mean, row.exec_ratio_std, row.samples
    );
    Ok(())
}

fn write_one<R: Serialize>(path: &Path, row: &R) -> Outcome<()> {
    let f = File::create(path).map_err(|e| MiaError::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.serialize(row).map_err(|e| MiaError::Data(format!("{}: {e}", path.display())))?;
    w.flush().map_err(|e| MiaError::io(path, e))?;
    Ok(())
}

fn attack_cmd(ctx: &mut Context, c: &Common, dims: Option<DimensionSet>, attacks: &[AttackSpec]) -> Outcome<()> {
    let path = need_ckpt(c, "")?;
    let state = load_state(c, path)?;
    let dims = dims.unwrap_or(state.dims);
    let cfg = state.run.model.validate()?;
    let (data, splits) = load_splits(&state.run)?;
    ctx.add_dataset(&data);
    ctx.manifest(&state.run)?;
    let report = robust::evaluate(&cfg, &state.params, &splits.val, attacks, &path.display().to_string(), dims)?;
    report.write_csv(&ctx.out.join("robust.csv"))?;
    print!("{}", report.summary());
    Ok(())
}

fn flops_cmd(ctx: &mut Context, c: &Common, policy: PolicyArg, dims: Option<DimensionSet>) -> Outcome<()> {
    let state = match &c.ckpt {
        Some(p) => Some(load_state(c, p)?),
        None => None,
    };
    let run = match &state {
        Some(s) => s.run.clone(),
        None => resolve_config(c, None)?,
    };
    let cfg = run.model.validate()?;
    let fixed = |m: MaskBundle| -> Outcome<f64> {
        Ok(SampleFlops::from_bundles(&cfg, 0, &vec![m; cfg.num_blocks])?.ratio)
    };
    let ratio = match policy {
        PolicyArg::AllOn => fixed(MaskBundle::all_on(&cfg))?,
        PolicyArg::SkipAll => fixed(MaskBundle::skipped(&cfg, 0.0))?,
        PolicyArg::Eval => {
            let state = state.as_ref().expect("checked before");
            let dims = dims.unwrap_or(state.dims);
            let (data, splits) = load_splits(&run)?;
            ctx.add_dataset(&data);
            evaluate(&cfg, &state.params, &splits.val, Policy::eval(&state.params, dims))?.exec_mean
        }
    };
    ctx.manifest(&run)?;
    println!("ratio {ratio:.6}");
    Ok(())
}

fn trace_cmd(ctx: &mut Context, c: &Common, dims: Option<DimensionSet>, grids: usize) -> Outcome<()> {
    let state = load_state(c, need_ckpt(c, "")?)?;
    let dims = dims.unwrap_or(state.dims);
    let cfg = state.run.model.validate()?;
    let (data, splits) = load_splits(&state.run)?;
    ctx.add_dataset(&data);
    ctx.manifest(&state.run)?;
    let eval = evaluate(&cfg, &state.params, &splits.val, Policy::eval(&state.params, dims))?;
    write_traces(&ctx.out.join("trace.csv"), &eval.traces)?;
    let stats = skip_ratio_stats(&eval.traces, &cfg)?;
    write_skip_ratios(&ctx.out.join("skip_ratios.csv"), &stats)?;
    let dir = ctx.out.join("grids");
    fs::create_dir_all(&dir).map_err(|e| MiaError::io(&dir, e))?;
    for t in eval.traces.iter().take(grids) {
        export_policy_grid(t, &cfg, &dir.join(format!("sample_{:06}.svg", t.sample_id)))?;
    }
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!("block  skip    heads   tokens");
    for s in &stats {
        println!("{:<6} {:.4}  {:<7} {}", s.block, s.block_skip, opt(s.head_skip), opt(s.token_skip));
    }
    Ok(())
}

fn ablate_cmd(ctx: &mut Context, c: &Common, dims: Option<DimensionSet>) -> Outcome<()> {
    let mut state = load_state(c, need_ckpt(c, "")?)?;
    if let Some(e) = c.epochs {
        state.run.training.cotrain_epochs = e;
    }
    let (data, splits) = load_splits(&state.run)?;
    ctx.add_dataset(&data);
    ctx.manifest(&state.run)?;
    let subsets = match dims {
        Some(d) => vec![d],
        None => DimensionSet::subsets(),
    };
    let rl = state.run.training.rl_total_epochs > 0;
    let rows = ablation_harness(&state, &splits, &subsets, Some(&ctx.out), rl)?;
    println!("{:<18} {:>9} {:>10}", "dims", "accuracy", "exec ratio");
    for r in &rows {
        match (&r.error, r.accuracy, r.exec_ratio) {
            (None, Some(a), Some(e)) => println!("{:<18} {a:>9.4} {e:>10.4}", r.dims),
            (err, _, _) => println!("{:<18} failed: {}", r.dims, err.as_deref().unwrap_or("unknown")),
        }
    }
    if rows.iter().any(|r| r.error.is_some()) {
        return Err(Failure::Runtime(MiaError::Invalid("some ablation cells failed".into())));
    }
    Ok(())
}
