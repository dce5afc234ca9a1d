//! Read-only forward passes over whole splits, fanned out over a bounded
//! thread pool.

use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::backbone::{BackboneParams, ViTConfig};
use crate::data::{LongTailDataset, SplitKind};
use crate::error::{Error, Result};

use super::model::{AdaptState, Bound, Stage, Trainable};

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

/// Evaluation parallelism: `LTPEFT_THREADS` if set to a positive integer,
/// otherwise the number of available cores.
pub fn eval_threads() -> usize {
    std::env::var("LTPEFT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Class-token features of a split with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

struct Outputs {
    features: Tensor,
    scores: Option<Tensor>,
}

fn run_split(
    vit: &ViTConfig,
    backbone: &BackboneParams,
    state: &AdaptState<Tensor>,
    stage: Stage,
    ensemble: usize,
    data: &LongTailDataset,
    split: SplitKind,
    with_scores: bool,
) -> Result<Outputs> {
    let n = data.split(split).len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(EVAL_CHUNK)
        .map(|s| (s, (s + EVAL_CHUNK).min(n)))
        .collect();
    let work = |&(s, e): &(usize, usize)| -> Result<(Tensor, Option<Tensor>)> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, vit, backbone, state, stage, Trainable::NONE, ensemble);
        let images: Vec<&[f32]> = (s..e).map(|i| data.image(split, i)).collect();
        let out = bound.forward(&images)?;
        let scores = if with_scores {
            Some((*bound.scores(out.features)?.value()).clone())
        } else {
            None
        };
        Ok(((*out.features.value()).clone(), scores))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_threads())
        .build()
        .map_err(|e| Error::Config(format!("cannot start evaluation threads: {e}")))?;
    let parts: Vec<(Tensor, Option<Tensor>)> =
        pool.install(|| chunks.par_iter().map(work).collect::<Result<_>>())?;
    let stack = |ts: Vec<&Tensor>, cols: usize| -> Tensor {
        let mut data = Vec::with_capacity(n * cols);
        for t in ts {
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec([n, cols], data)
    };
    let features = stack(parts.iter().map(|p| &p.0).collect(), vit.dim);
    let scores = with_scores.then(|| {
        let c = state.classifier.weight.rows();
        stack(parts.iter().map(|p| p.1.as_ref().expect("scores requested")).collect(), c)
    });
    Ok(Outputs { features, scores })
}

/// Final-norm class tokens `c_L` of every sample in `split`.
pub fn extract_features(
    vit: &ViTConfig,
    backbone: &BackboneParams,
    state: &AdaptState<Tensor>,
    stage: Stage,
    ensemble: usize,
    data: &LongTailDataset,
    split: SplitKind,
) -> Result<FeatureSet> {
    let out = run_split(vit, backbone, state, stage, ensemble, data, split, false)?;
    Ok(FeatureSet {
        features: out.features,
        labels: data.split(split).labels.iter().map(|&y| y as usize).collect(),
    })
}

/// Raw cosine-classifier scores `[N×C]` of every sample in `split`.
pub fn expert_scores(
    vit: &ViTConfig,
    backbone: &BackboneParams,
    state: &AdaptState<Tensor>,
    stage: Stage,
    ensemble: usize,
    data: &LongTailDataset,
    split: SplitKind,
) -> Result<Tensor> {
    let out = run_split(vit, backbone, state, stage, ensemble, data, split, true)?;
    Ok(out.scores.expect("scores requested"))
}
