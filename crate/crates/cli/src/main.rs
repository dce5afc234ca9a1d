//! `ltpeft`: generate the benchmark, pretrain a backbone, run the adaptation
//! phases, fit the expert mixture and evaluate, one stage per invocation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ltpeft_core::config::RunConfig;
use ltpeft_core::data::{LongTailDataset, SplitKind};
use ltpeft_core::metrics::SplitReport;
use ltpeft_core::moe::{accuracy, save_scores, ExpertScores};
use ltpeft_core::pipeline::{self as pl, RunLayout};
use ltpeft_core::train::{Checkpoint, FrozenBackbone, PhaseKind, PhaseTag, Stage};
use ltpeft_core::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "ltpeft", version, about = "Long-tailed prompt tuning on a synthetic benchmark")]
#[command(after_long_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn config_help() -> String {
    format!(
        "Configuration keys (key = value; `--set key=value` overrides):\n{}",
        RunConfig::help_text()
    )
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file; defaults to the run directory's config.txt.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Which expert to operate on (1 or 2).
    #[arg(long)]
    expert: Option<u8>,
}

#[derive(Args, Clone)]
struct Stages {
    #[command(flatten)]
    common: Common,
    /// Run directory holding the inputs.
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Run directory for the outputs; defaults to the input directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct PhaseArgs {
    #[command(flatten)]
    stages: Stages,
    /// Continue from this phase's checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed epochs and write a resumable checkpoint.
    #[arg(long, value_name = "EPOCHS")]
    stop_after: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the source and long-tailed target datasets.
    #[command(after_long_help = config_help())]
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Pretrain the backbone on the source domain.
    #[command(after_long_help = config_help())]
    Pretrain(Stages),
    /// Classifier-only training on the frozen backbone (linear-probe baseline).
    #[command(after_long_help = config_help())]
    Probe(PhaseArgs),
    /// Shared prompt, adapters and classifier.
    #[command(after_long_help = config_help())]
    Phase1(PhaseArgs),
    /// Group prompts, keys and classifier on top of phase 1.
    #[command(after_long_help = config_help())]
    Phase2(PhaseArgs),
    /// Phases 1 and 2 trained together for both phases' epochs.
    #[command(after_long_help = config_help())]
    Joint(PhaseArgs),
    /// Fit the mixture of the two phase-2 experts.
    #[command(after_long_help = config_help())]
    Phase3(Stages),
    /// Shot-split accuracy of a checkpoint on the target validation set.
    #[command(after_long_help = config_help())]
    Eval {
        #[command(flatten)]
        stages: Stages,
        /// Stage checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Phase-3 scorer; also evaluates the fused experts.
        #[arg(long)]
        moe: Option<PathBuf>,
        /// Phase-2 checkpoint of the other expert (defaults to the run layout).
        #[arg(long)]
        ckpt2: Option<PathBuf>,
    },
    /// Cluster statistics and k-NN accuracy of frozen and adapted features.
    #[command(after_long_help = config_help())]
    Analyze {
        #[command(flatten)]
        stages: Stages,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(common: &Common, run_dir: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, run_dir) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(dir)) if dir.join("config.txt").exists() => RunConfig::load(&dir.join("config.txt"))?,
        _ => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(e) = common.expert {
        cfg.expert = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Ctx {
    cfg: RunConfig,
    input: RunLayout,
    out: RunLayout,
}

impl Ctx {
    fn new(s: &Stages) -> Result<Self> {
        Ok(Self {
            cfg: load_config(&s.common, Some(&s.input))?,
            input: RunLayout::new(&s.input),
            out: RunLayout::new(s.out.as_ref().unwrap_or(&s.input)),
        })
    }

    fn expert(&self) -> u8 {
        self.cfg.expert
    }

    fn target(&self) -> Result<LongTailDataset> {
        let path = self.input.target();
        pl::require(&path, "gen-data")?;
        LongTailDataset::load(&path)
    }

    fn backbone(&self, expert: u8) -> Result<FrozenBackbone> {
        let path = self.input.checkpoint(expert, PhaseTag::Pretrain);
        pl::require(&path, &format!("pretrain --expert {expert}"))?;
        let ckpt = Checkpoint::load(&path, None)?;
        pl::backbone_from_checkpoint(&self.cfg.with_expert(expert), &ckpt)
    }

    /// A stage checkpoint, refused if it was trained against another backbone.
    fn stage_checkpoint(&self, path: &Path, producer: &str, bb: &FrozenBackbone) -> Result<Checkpoint> {
        pl::require(path, producer)?;
        Checkpoint::load(path, Some(bb.digest()))
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, out } => gen_data(&common, &out),
        Command::Pretrain(s) => pretrain(&Ctx::new(&s)?),
        Command::Probe(a) => phase(&a, PhaseKind::Probe),
        Command::Phase1(a) => phase(&a, PhaseKind::Phase1),
        Command::Phase2(a) => phase(&a, PhaseKind::Phase2),
        Command::Joint(a) => phase(&a, PhaseKind::Joint),
        Command::Phase3(s) => phase3(&Ctx::new(&s)?),
        Command::Eval {
            stages,
            ckpt,
            moe,
            ckpt2,
        } => eval(&Ctx::new(&stages)?, &ckpt, moe.as_deref(), ckpt2.as_deref()),
        Command::Analyze { stages, ckpt } => analyze(&Ctx::new(&stages)?, &ckpt),
    }
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common, None)?;
    let layout = RunLayout::new(out);
    let (source1, target) = pl::generate(&cfg.with_expert(1))?;
    let (source2, target2) = pl::generate(&cfg.with_expert(2))?;
    if target != target2 {
        return Err(Error::Config("expert overrides changed the target dataset".into()));
    }
    pl::write_file(&out.join("config.txt"), cfg.to_text())?;
    pl::write_file(&layout.source(1), source1.to_bytes())?;
    pl::write_file(&layout.source(2), source2.to_bytes())?;
    pl::write_file(&layout.target(), target.to_bytes())?;
    println!(
        "target: {} classes, {} train / {} val images; train counts {:?}",
        target.classes(),
        target.train().len(),
        target.val().len(),
        target.train_counts()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn pretrain(ctx: &Ctx) -> Result<()> {
    let e = ctx.expert();
    let path = ctx.input.source(e);
    pl::require(&path, "gen-data")?;
    let source = LongTailDataset::load(&path)?;
    let (bb, report) = pl::pretrain(&ctx.cfg, &source)?;
    let ckpt = pl::backbone_checkpoint(&ctx.cfg, &bb, &report);
    let out = ctx.out.checkpoint(e, PhaseTag::Pretrain);
    pl::ensure_parent(&out)?;
    ckpt.save(&out)?;
    pl::write_file(&ctx.out.metrics(e, PhaseTag::Pretrain), &ckpt.metrics)?;
    println!(
        "expert {e}: source train accuracy {:.2}%, backbone digest {}",
        report.train_accuracy,
        bb.digest()
    );
    Ok(())
}

fn phase(args: &PhaseArgs, kind: PhaseKind) -> Result<()> {
    let ctx = Ctx::new(&args.stages)?;
    let e = ctx.expert();
    let bb = ctx.backbone(e)?;
    let target = ctx.target()?;
    let tag = kind.tag();
    let out = ctx.out.checkpoint(e, tag);

    let mut trainer = if args.resume && out.exists() {
        let ckpt = Checkpoint::load(&out, Some(bb.digest()))?;
        log::info!("resuming {tag} at epoch {}", ckpt.epoch);
        pl::resume_trainer(kind, &ctx.cfg, &bb, &target, &ckpt)?
    } else {
        let state = match kind {
            PhaseKind::Phase2 => {
                let p1 = ctx.input.checkpoint(e, PhaseTag::Phase1);
                let ckpt = ctx.stage_checkpoint(&p1, &format!("phase1 --expert {e}"), &bb)?;
                if (ckpt.epoch as usize) < ctx.cfg.train.epochs {
                    return Err(Error::Dependency(format!(
                        "{} stopped at epoch {} of {}; finish it with `phase1 --resume`",
                        p1.display(),
                        ckpt.epoch,
                        ctx.cfg.train.epochs
                    )));
                }
                pl::state_from_checkpoint(&ctx.cfg, &ckpt)?
            }
            _ => pl::initial_state(&ctx.cfg, &bb, &target)?,
        };
        pl::trainer(kind, &ctx.cfg, &bb, &target, state)?
    };

    let stop = args.stop_after.unwrap_or(usize::MAX);
    while !trainer.finished() && trainer.epoch() < stop {
        let s = trainer.run_epoch()?;
        log::info!(
            "{tag} epoch {:>3}: loss {:.4} (balanced {:.4}, key {:.4}), lr {:.5}",
            s.epoch,
            s.loss_total,
            s.loss_balanced,
            s.loss_key,
            s.lr
        );
    }
    bb.verify()?;
    pl::ensure_parent(&out)?;
    trainer.checkpoint().save(&out)?;
    pl::write_file(&ctx.out.metrics(e, tag), trainer.metrics_csv())?;
    if trainer.finished() {
        let scores = trainer.scores(SplitKind::Val)?;
        println!("{}", pl::describe(tag.as_str(), &pl::report(&ctx.cfg, &target, &scores)?));
    } else {
        println!("{tag}: stopped after epoch {}; resume with --resume", trainer.epoch());
    }
    Ok(())
}

fn expert_state(ctx: &Ctx, expert: u8, path: &Path) -> Result<(FrozenBackbone, Checkpoint)> {
    let bb = ctx.backbone(expert)?;
    let ckpt = ctx.stage_checkpoint(path, &format!("phase2 --expert {expert}"), &bb)?;
    Ok((bb, ckpt))
}

fn stage_scores(
    ctx: &Ctx,
    expert: u8,
    bb: &FrozenBackbone,
    ckpt: &Checkpoint,
    target: &LongTailDataset,
    split: SplitKind,
) -> Result<Tensor> {
    let kind = pl::kind_of(ckpt.phase)
        .ok_or_else(|| Error::Dependency(format!("{} checkpoint holds no expert state", ckpt.phase)))?;
    let cfg = ctx.cfg.with_expert(expert);
    let state = pl::state_from_checkpoint(&cfg, ckpt)?;
    pl::scores(&cfg, bb, &state, kind.stage(), target, split)
}

fn phase3(ctx: &Ctx) -> Result<()> {
    let target = ctx.target()?;
    let (bb1, c1) = expert_state(ctx, 1, &ctx.input.checkpoint(1, PhaseTag::Phase2))?;
    let (bb2, c2) = expert_state(ctx, 2, &ctx.input.checkpoint(2, PhaseTag::Phase2))?;
    let train_labels = pl::labels(&target, SplitKind::Train);
    let train = ExpertScores::new(
        stage_scores(ctx, 1, &bb1, &c1, &target, SplitKind::Train)?,
        stage_scores(ctx, 2, &bb2, &c2, &target, SplitKind::Train)?,
        train_labels,
    )?;
    let (state, report) = pl::phase3(&ctx.cfg, &train)?;
    bb1.verify()?;
    bb2.verify()?;
    let ckpt = pl::moe_checkpoint(&ctx.cfg, &state, &report, [bb1.digest(), bb2.digest()]);
    let out = ctx.out.moe();
    pl::ensure_parent(&out)?;
    ckpt.save(&out)?;
    println!(
        "W_base {:.4} ({} of {} training samples correct); {} conflicts, expert-1 share {}",
        report.w_base,
        report.base_correct,
        train.len(),
        report.conflicts,
        report.balance.map_or_else(|| "n/a".into(), |b| format!("{b:.3}"))
    );
    Ok(())
}

fn eval(ctx: &Ctx, ckpt_path: &Path, moe: Option<&Path>, ckpt2: Option<&Path>) -> Result<()> {
    let e = ctx.expert();
    let target = ctx.target()?;
    let bb = ctx.backbone(e)?;
    let ckpt = ctx.stage_checkpoint(ckpt_path, "the training stage", &bb)?;
    let scores = stage_scores(ctx, e, &bb, &ckpt, &target, SplitKind::Val)?;
    let labels = pl::labels(&target, SplitKind::Val);
    let mut rows: Vec<(String, SplitReport)> = vec![(format!("expert{e}"), pl::report(&ctx.cfg, &target, &scores)?)];
    let stem = ckpt_path.file_stem().and_then(|s| s.to_str()).unwrap_or("eval");
    let dir = ckpt_path.parent().unwrap_or(Path::new("."));
    save_scores(&dir.join(format!("{stem}.scores_val.csv")), &scores, &labels)?;

    if let Some(moe_path) = moe {
        pl::require(moe_path, "phase3")?;
        let moe_ckpt = Checkpoint::load(moe_path, None)?;
        let state = pl::moe_from_checkpoint(&moe_ckpt)?;
        let other = 3 - e;
        let default2 = ctx.input.checkpoint(other, PhaseTag::Phase2);
        let (bb2, c2) = expert_state(ctx, other, ckpt2.unwrap_or(&default2))?;
        let scores2 = stage_scores(ctx, other, &bb2, &c2, &target, SplitKind::Val)?;
        rows.push((format!("expert{other}"), pl::report(&ctx.cfg, &target, &scores2)?));
        let (vo, vl) = if e == 1 { (scores, scores2) } else { (scores2, scores) };
        let both = ExpertScores::new(vo, vl, labels.clone())?;
        let base = ltpeft_core::moe::MoeState::inert(state.w_base, state.eps).fuse_all(&both)?;
        rows.push(("w_base".into(), pl::report(&ctx.cfg, &target, &base)?));
        let fused = state.fuse_all(&both)?;
        rows.push(("moe".into(), pl::report(&ctx.cfg, &target, &fused)?));
        log::info!(
            "fused accuracy {:.2}% at W_base {:.4}",
            accuracy(&fused, &labels),
            state.w_base
        );
    }

    let mut csv = format!("model,{}\n", SplitReport::csv_header());
    for (name, r) in &rows {
        println!("{}", pl::describe(name, r));
        csv.push_str(&format!("{name},{}\n", r.csv_row()));
    }
    pl::write_file(&dir.join(format!("{stem}.eval.csv")), csv)
}

fn analyze(ctx: &Ctx, ckpt_path: &Path) -> Result<()> {
    let e = ctx.expert();
    let target = ctx.target()?;
    let bb = ctx.backbone(e)?;
    let ckpt = ctx.stage_checkpoint(ckpt_path, "the training stage", &bb)?;
    let kind = pl::kind_of(ckpt.phase)
        .ok_or_else(|| Error::Dependency(format!("{} checkpoint holds no expert state", ckpt.phase)))?;
    let state = pl::state_from_checkpoint(&ctx.cfg, &ckpt)?;
    let frozen = pl::analyze(&ctx.cfg, &bb, &state, Stage::Frozen, &target)?;
    let adapted = pl::analyze(&ctx.cfg, &bb, &state, kind.stage(), &target)?;
    let mut csv = String::from("features,mean_r,d,gamma,knn\n");
    for (name, a) in [("frozen", &frozen), (ckpt.phase.as_str(), &adapted)] {
        let mean_r = a.cluster.r.iter().sum::<f64>() / a.cluster.r.len() as f64;
        println!("{name:<8} {}  k-NN {:.2}%", a.cluster, a.knn);
        csv.push_str(&format!("{name},{mean_r},{},{},{}\n", a.cluster.d, a.cluster.gamma, a.knn));
    }
    let stem = ckpt_path.file_stem().and_then(|s| s.to_str()).unwrap_or("analyze");
    let dir = ckpt_path.parent().unwrap_or(Path::new("."));
    pl::write_file(&dir.join(format!("{stem}.analyze.csv")), csv)
}
