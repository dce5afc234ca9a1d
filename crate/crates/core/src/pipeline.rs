//! Stage orchestration shared by the command-line driver and the end-to-end
//! tests: data generation, pretraining, the adaptation phases, evaluation,
//! feature analysis and the mixture of experts, plus the on-disk run layout.

use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::backbone::{BackboneParams, Classifier};
use crate::config::RunConfig;
use crate::data::{generate_dataset, shot_split, LongTailDataset, ShotTag, ShotThresholds, SplitKind};
use crate::error::{Error, Result};
use crate::metrics::{cluster_metrics, knn_accuracy, predictions, split_accuracy, ClusterStats, SplitReport};
use crate::moe::{run_phase3, ExpertScores, MoeState, Phase3Report, ScorerMlp};
use crate::params::ParamDigest;
use crate::rng::stream;
use crate::train::{
    class_centric_init, extract_features, pretrain_backbone, AdaptState, Checkpoint, FrozenBackbone,
    PhaseKind, PhaseTag, PhaseTrainer, PretrainReport, Stage,
};

/// File locations inside a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Source-domain dataset of `expert` (the experts pretrain on different renderings).
    pub fn source(&self, expert: u8) -> PathBuf {
        self.root.join("data").join(format!("source{expert}.ltds"))
    }

    pub fn target(&self) -> PathBuf {
        self.root.join("data").join("target.ltds")
    }

    pub fn expert_dir(&self, expert: u8) -> PathBuf {
        self.root.join(format!("expert{expert}"))
    }

    pub fn checkpoint(&self, expert: u8, tag: PhaseTag) -> PathBuf {
        self.expert_dir(expert).join(format!("{tag}.ltck"))
    }

    pub fn metrics(&self, expert: u8, tag: PhaseTag) -> PathBuf {
        self.expert_dir(expert).join(format!("{tag}.metrics.csv"))
    }

    pub fn scores(&self, expert: u8, tag: PhaseTag, split: SplitKind) -> PathBuf {
        let s = match split {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
        };
        self.expert_dir(expert).join(format!("{tag}.scores_{s}.csv"))
    }

    pub fn moe(&self) -> PathBuf {
        self.root.join("moe.ltck")
    }
}

/// Creates the parent directory of `path` if needed.
pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Loads a stage input, turning a missing file into a dependency error that
/// names the stage that produces it.
pub fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "missing {}; run `{producer}` first",
            path.display()
        )))
    }
}

/// Source dataset of this run's expert and the shared target dataset.
pub fn generate(cfg: &RunConfig) -> Result<(LongTailDataset, LongTailDataset)> {
    generate_dataset(&cfg.resolved().data)
}

pub fn pretrain(cfg: &RunConfig, source: &LongTailDataset) -> Result<(FrozenBackbone, PretrainReport)> {
    let r = cfg.resolved();
    pretrain_backbone(&r.vit, source, &r.pretrain)
}

/// Pretraining checkpoint holding the backbone parameters.
pub fn backbone_checkpoint(cfg: &RunConfig, bb: &FrozenBackbone, report: &PretrainReport) -> Checkpoint {
    let mut c = Checkpoint::new(PhaseTag::Pretrain, bb.digest());
    c.epoch = report.epoch_losses.len() as u32;
    c.config = cfg.to_text();
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    c.metrics = csv;
    c.put("backbone", bb.params());
    c
}

pub fn backbone_from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<FrozenBackbone> {
    if ckpt.phase != PhaseTag::Pretrain {
        return Err(Error::Dependency(format!("{} checkpoint holds no backbone", ckpt.phase)));
    }
    let vit = cfg.resolved().vit;
    let mut params = BackboneParams::init(&vit, &mut stream(0, 0));
    ckpt.get("backbone", &mut params)?;
    let bb = FrozenBackbone::freeze(vit, params);
    if bb.digest() != ckpt.backbone_digest {
        return Err(Error::DigestMismatch {
            expected: ckpt.backbone_digest.hex(),
            found: bb.digest().hex(),
        });
    }
    Ok(bb)
}

/// Class-centric classifier plus freshly initialised prompts and adapters.
pub fn initial_state(cfg: &RunConfig, bb: &FrozenBackbone, target: &LongTailDataset) -> Result<AdaptState<Tensor>> {
    let r = cfg.resolved();
    let cls = class_centric_init(bb, target)?;
    Ok(AdaptState::init(&r.vit, &r.pool, cls, r.train.seed))
}

/// An initial state with the right shapes, for loading checkpoints into.
pub fn state_template(cfg: &RunConfig) -> AdaptState<Tensor> {
    let r = cfg.resolved();
    let cls = Classifier {
        weight: Tensor::zeros([r.data.classes, r.vit.dim]),
    };
    AdaptState::init(&r.vit, &r.pool, cls, r.train.seed)
}

pub fn state_from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<AdaptState<Tensor>> {
    let mut state = state_template(cfg);
    ckpt.get("state", &mut state)?;
    Ok(state)
}

pub fn kind_of(tag: PhaseTag) -> Option<PhaseKind> {
    match tag {
        PhaseTag::Probe => Some(PhaseKind::Probe),
        PhaseTag::Phase1 => Some(PhaseKind::Phase1),
        PhaseTag::Phase2 => Some(PhaseKind::Phase2),
        PhaseTag::Joint => Some(PhaseKind::Joint),
        PhaseTag::Pretrain | PhaseTag::Phase3 => None,
    }
}

/// Trainer for `kind` starting from `state`; joint training runs the
/// epochs of both decoupled phases.
pub fn trainer<'a>(
    kind: PhaseKind,
    cfg: &RunConfig,
    bb: &'a FrozenBackbone,
    target: &'a LongTailDataset,
    state: AdaptState<Tensor>,
) -> Result<PhaseTrainer<'a>> {
    let r = cfg.resolved();
    PhaseTrainer::new(kind, bb, target, phase_train_config(kind, &r), r.gcl, r.pool.ensemble, state, cfg.to_text())
}

pub fn resume_trainer<'a>(
    kind: PhaseKind,
    cfg: &RunConfig,
    bb: &'a FrozenBackbone,
    target: &'a LongTailDataset,
    ckpt: &Checkpoint,
) -> Result<PhaseTrainer<'a>> {
    let r = cfg.resolved();
    PhaseTrainer::resume(
        kind,
        bb,
        target,
        phase_train_config(kind, &r),
        r.gcl,
        r.pool.ensemble,
        state_template(cfg),
        ckpt,
    )
}

fn phase_train_config(kind: PhaseKind, r: &RunConfig) -> crate::train::TrainConfig {
    let mut t = r.train.clone();
    if kind == PhaseKind::Joint {
        t.epochs *= 2;
    }
    t
}

pub fn shot_tags(cfg: &RunConfig, target: &LongTailDataset) -> Result<Vec<ShotTag>> {
    shot_split(&target.train_counts(), ShotThresholds::scaled(cfg.data.n_max))
}

/// Raw scores on `split` for a state evaluated at `stage`.
pub fn scores(
    cfg: &RunConfig,
    bb: &FrozenBackbone,
    state: &AdaptState<Tensor>,
    stage: Stage,
    target: &LongTailDataset,
    split: SplitKind,
) -> Result<Tensor> {
    crate::train::expert_scores(bb.cfg(), bb.params(), state, stage, cfg.pool.ensemble, target, split)
}

pub fn labels(target: &LongTailDataset, split: SplitKind) -> Vec<usize> {
    target.split(split).labels.iter().map(|&y| y as usize).collect()
}

pub fn report(cfg: &RunConfig, target: &LongTailDataset, scores: &Tensor) -> Result<SplitReport> {
    split_accuracy(&predictions(scores), &labels(target, SplitKind::Val), &shot_tags(cfg, target)?)
}

/// Cluster statistics of val features and cosine k-NN accuracy (train → val).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureAnalysis {
    pub cluster: ClusterStats,
    pub knn: f64,
}

pub fn analyze(
    cfg: &RunConfig,
    bb: &FrozenBackbone,
    state: &AdaptState<Tensor>,
    stage: Stage,
    target: &LongTailDataset,
) -> Result<FeatureAnalysis> {
    let ens = cfg.pool.ensemble;
    let train = extract_features(bb.cfg(), bb.params(), state, stage, ens, target, SplitKind::Train)?;
    let val = extract_features(bb.cfg(), bb.params(), state, stage, ens, target, SplitKind::Val)?;
    Ok(FeatureAnalysis {
        cluster: cluster_metrics(&val.features, &val.labels, cfg.eval.distance)?,
        knn: knn_accuracy(&train.features, &train.labels, &val.features, &val.labels, cfg.eval.knn)?,
    })
}

/// Fits the mixture on training scores of both experts.
pub fn phase3(cfg: &RunConfig, train: &ExpertScores) -> Result<(MoeState, Phase3Report)> {
    run_phase3(train, &cfg.resolved().moe)
}

/// Phase-3 checkpoint; the header carries the first expert's digest and the
/// config echo records both.
pub fn moe_checkpoint(
    cfg: &RunConfig,
    state: &MoeState,
    report: &Phase3Report,
    digests: [ParamDigest; 2],
) -> Checkpoint {
    let mut c = Checkpoint::new(PhaseTag::Phase3, digests[0]);
    c.epoch = report.epoch_mse.len() as u32;
    c.config = format!(
        "# expert1 {}\n# expert2 {}\n{}",
        digests[0].hex(),
        digests[1].hex(),
        cfg.to_text()
    );
    let mut csv = String::from("epoch,mse\n");
    for (e, m) in report.epoch_mse.iter().enumerate() {
        csv.push_str(&format!("{e},{m}\n"));
    }
    c.metrics = csv;
    c.tensors.insert("w_base".into(), Tensor::scalar(state.w_base));
    c.tensors.insert("eps".into(), Tensor::scalar(state.eps));
    if let Some(mlp) = &state.scorer {
        c.put("scorer", mlp);
    }
    c
}

pub fn moe_from_checkpoint(ckpt: &Checkpoint) -> Result<MoeState> {
    if ckpt.phase != PhaseTag::Phase3 {
        return Err(Error::Dependency(format!("{} checkpoint holds no scorer", ckpt.phase)));
    }
    let scalar = |name: &str| {
        ckpt.tensors
            .get(name)
            .map(Tensor::item)
            .ok_or_else(|| Error::Dependency(format!("scorer checkpoint lacks '{name}'")))
    };
    let scorer = if ckpt.has("scorer") {
        let w1 = ckpt
            .tensors
            .get("scorer.w1")
            .ok_or_else(|| Error::Dependency("scorer checkpoint lacks 'scorer.w1'".into()))?;
        let mut mlp = ScorerMlp::init(w1.rows() / 2, w1.cols(), 0);
        ckpt.get("scorer", &mut mlp)?;
        Some(mlp)
    } else {
        None
    };
    Ok(MoeState {
        w_base: scalar("w_base")?,
        eps: scalar("eps")?,
        scorer,
    })
}

/// The expert digests recorded by [`moe_checkpoint`].
pub fn moe_expert_digests(ckpt: &Checkpoint) -> Option<[String; 2]> {
    let mut lines = ckpt.config.lines();
    let a = lines.next()?.strip_prefix("# expert1 ")?.to_string();
    let b = lines.next()?.strip_prefix("# expert2 ")?.to_string();
    Some([a, b])
}

/// Summary line of a split report.
pub fn describe(tag: &str, r: &SplitReport) -> String {
    format!("{tag:<8} {r}")
}
