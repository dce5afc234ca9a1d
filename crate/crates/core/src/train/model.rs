//! Adaptable state (prompts, adapters, pool, classifier) and the staged
//! forward pass over a frozen backbone.

use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::{
    cosine_scores, init_adapters, AdapterLayer, AdapterParams, BackboneParams, BoundVit,
    Classifier, ClassifierParams, GroupTokens, ViTConfig,
};
use crate::error::{Error, Result};
use crate::params::{bind, join, MapLeaves, ParamTree};
use crate::prompts::{
    ensemble_vars, init_prompts, match_group_prompts, GroupPromptPool, PoolConfig, PromptPool,
    SharedPrompt,
};
use crate::rng::stream;

/// Everything trained on top of the frozen backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptState<T> {
    pub shared: SharedPrompt<T>,
    pub adapters: Vec<AdapterLayer<T>>,
    pub pool: PromptPool<T>,
    pub classifier: Classifier<T>,
}

impl<T> ParamTree<T> for AdaptState<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.shared.visit(&join(prefix, "shared"), f);
        self.adapters.visit(&join(prefix, "adapters"), f);
        self.pool.visit(&join(prefix, "pool"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.shared.visit_mut(&join(prefix, "shared"), f);
        self.adapters.visit_mut(&join(prefix, "adapters"), f);
        self.pool.visit_mut(&join(prefix, "pool"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

impl<T> MapLeaves<T> for AdaptState<T> {
    type Mapped<U> = AdaptState<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AdaptState<U> {
        AdaptState {
            shared: self.shared.map_leaves(f),
            adapters: self.adapters.map_leaves(f),
            pool: self.pool.map_leaves(f),
            classifier: self.classifier.map_leaves(f),
        }
    }
}

impl AdaptState<Tensor> {
    /// Fresh prompts and pool, zero-output adapters and the given classifier.
    pub fn init(vit: &ViTConfig, pool: &PoolConfig, classifier: ClassifierParams, seed: u64) -> Self {
        let (shared, pool) = init_prompts(vit, pool, seed);
        let adapters: AdapterParams = init_adapters(vit, &mut stream(seed, 0x4144_4150));
        Self {
            shared,
            adapters,
            pool,
            classifier,
        }
    }
}

/// Which sub-trees receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Trainable {
    pub shared: bool,
    pub adapters: bool,
    pub pool: bool,
    pub classifier: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        shared: false,
        adapters: false,
        pool: false,
        classifier: false,
    };
}

/// Which adaptation modules take part in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Frozen backbone only; no prompts, no adapters.
    Frozen,
    /// Shared prompt in every layer plus adapters.
    Phase1,
    /// Phase 1 plus matched group prompts in layers `K+1..=L`.
    Phase2,
}

/// Backbone and adaptation state recorded on one tape.
pub struct Bound<'t, 'c> {
    pub vit: BoundVit<'t, 'c>,
    pub pool: PromptPool<Var<'t>>,
    pub classifier: Classifier<Var<'t>>,
    pub stage: Stage,
    pub ensemble: usize,
    tape: &'t Tape,
    group_slices: std::cell::RefCell<Vec<Option<Vec<Var<'t>>>>>,
}

impl<'t, 'c> Bound<'t, 'c> {
    pub fn new(
        tape: &'t Tape,
        cfg: &'c ViTConfig,
        backbone: &BackboneParams,
        state: &AdaptState<Tensor>,
        stage: Stage,
        trainable: Trainable,
        ensemble: usize,
    ) -> Self {
        let prompted = stage != Stage::Frozen;
        let vit = BoundVit {
            cfg,
            backbone: bind(tape, backbone, false),
            adapters: prompted.then(|| bind(tape, &state.adapters, trainable.adapters)),
            shared: prompted.then(|| bind(tape, &state.shared, trainable.shared).layers),
        };
        let pool = bind(tape, &state.pool, trainable.pool);
        let n = pool.len();
        Self {
            vit,
            pool,
            classifier: bind(tape, &state.classifier, trainable.classifier),
            stage,
            ensemble,
            tape,
            group_slices: std::cell::RefCell::new(vec![None; n]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Tokens after the first `K` blocks, `[B·T×d]`.
    pub fn front(&self, images: &[&[f32]]) -> Result<Var<'t>> {
        let x = self.vit.embed(self.tape, images)?;
        self.vit
            .run_blocks(x, images.len(), 0..self.vit.cfg.shared_layers, None)
    }

    /// Remaining blocks without group prompts; final-norm class tokens `[B×d]`.
    pub fn back_plain(&self, x_k: Var<'t>, batch: usize) -> Result<Var<'t>> {
        let cfg = self.vit.cfg;
        let x = self.vit.run_blocks(x_k, batch, cfg.shared_layers..cfg.layers, None)?;
        self.vit.class_features(x, batch)
    }

    /// Per-layer `[p×d]` slices of pool prompt `i`, bound once per tape.
    fn slices(&self, i: usize) -> Result<Vec<Var<'t>>> {
        if let Some(s) = &self.group_slices.borrow()[i] {
            return Ok(s.clone());
        }
        let cfg = self.vit.cfg;
        let (p, d) = (cfg.prompt_len, cfg.dim);
        let prompt = self.pool.prompts[i];
        let s: Vec<Var<'t>> = (0..cfg.group_layers())
            .map(|j| prompt.narrow(j * p * d, [p, d]))
            .collect::<std::result::Result<_, _>>()?;
        self.group_slices.borrow_mut()[i] = Some(s.clone());
        Ok(s)
    }

    /// Ensembled group prompts for each sample, stacked per group layer.
    pub fn group_tokens(&self, matched: &[Vec<usize>]) -> Result<GroupTokens<'t>> {
        let cfg = self.vit.cfg;
        let mut layers = Vec::with_capacity(cfg.group_layers());
        for j in 0..cfg.group_layers() {
            let mut rows = Vec::with_capacity(matched.len());
            for w in matched {
                let per_layer: Vec<Var<'t>> = w
                    .iter()
                    .map(|&i| self.slices(i).map(|s| s[j]))
                    .collect::<Result<_>>()?;
                let idx: Vec<usize> = (0..per_layer.len()).collect();
                rows.push(ensemble_vars(&per_layer, &idx)?);
            }
            layers.push(Var::concat_rows(&rows)?);
        }
        Ok(GroupTokens { layers })
    }

    /// Remaining blocks with the matched group prompts; class tokens `[B×d]`.
    pub fn back_grouped(&self, x_k: Var<'t>, matched: &[Vec<usize>]) -> Result<Var<'t>> {
        let cfg = self.vit.cfg;
        let batch = matched.len();
        if cfg.prompt_len == 0 || cfg.group_layers() == 0 {
            return self.back_plain(x_k, batch);
        }
        let group = self.group_tokens(matched)?;
        let x = self
            .vit
            .run_blocks(x_k, batch, cfg.shared_layers..cfg.layers, Some(&group))?;
        self.vit.class_features(x, batch)
    }

    /// Top-k pool indices for each query against the current key values.
    pub fn match_queries(&self, queries: &[Vec<f64>]) -> Result<Vec<Vec<usize>>> {
        let keys: Vec<Tensor> = self.pool.keys.iter().map(|k| (*k.value()).clone()).collect();
        queries
            .iter()
            .map(|q| match_group_prompts(q, &keys, self.ensemble))
            .collect()
    }

    /// Full uncached pass: class features, plus the phase-1 queries and matched
    /// indices when the stage uses group prompts.
    pub fn forward(&self, images: &[&[f32]]) -> Result<Forward<'t>> {
        let b = images.len();
        let x_k = self.front(images)?;
        match self.stage {
            Stage::Frozen | Stage::Phase1 => Ok(Forward {
                features: self.back_plain(x_k, b)?,
                queries: None,
                matched: None,
            }),
            Stage::Phase2 => {
                let q = self.back_plain(x_k.detach(), b)?;
                let queries = rows_of(&q.value());
                let matched = self.match_queries(&queries)?;
                Ok(Forward {
                    features: self.back_grouped(x_k, &matched)?,
                    queries: Some(queries),
                    matched: Some(matched),
                })
            }
        }
    }

    pub fn scores(&self, features: Var<'t>) -> Result<Var<'t>> {
        cosine_scores(
            features,
            self.classifier.weight,
            self.vit.cfg.classifier_scale,
        )
    }
}

/// Output of [`Bound::forward`].
pub struct Forward<'t> {
    pub features: Var<'t>,
    pub queries: Option<Vec<Vec<f64>>>,
    pub matched: Option<Vec<Vec<usize>>>,
}

pub(crate) fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Ensures a classifier matches the feature width and class count.
pub(crate) fn check_classifier(cls: &ClassifierParams, classes: usize, dim: usize) -> Result<()> {
    if cls.weight.shape() != [classes, dim] {
        return Err(Error::Config(format!(
            "classifier shape {:?} does not match {classes} classes × {dim} dims",
            cls.weight.shape()
        )));
    }
    Ok(())
}

/// The first `size` entries of a pool.
pub fn truncate_pool(pool: &GroupPromptPool, size: usize) -> GroupPromptPool {
    PromptPool {
        keys: pool.keys[..size].to_vec(),
        prompts: pool.prompts[..size].to_vec(),
    }
}
