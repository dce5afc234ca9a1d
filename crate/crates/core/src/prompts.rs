//! Shared prompt, keyed group-prompt pool, query–key matching and ensembling.

use crate::autodiff::{Tensor, Var};
use crate::backbone::{ViTConfig, NORM_FLOOR};
use crate::error::{Error, Result};
use crate::params::{join, MapLeaves, ParamTree};
use crate::rng::{stream, truncated_normal};

/// Standard deviation of the truncated-normal prompt initialisation.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// One `[p_len × d]` token matrix per transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedPrompt<T> {
    pub layers: Vec<T>,
}

/// `m` keyed prompts; each prompt holds `L − K` stacked `[p_len × d]` slices.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool<T> {
    pub keys: Vec<T>,
    pub prompts: Vec<T>,
}

pub type GroupPromptPool = PromptPool<Tensor>;

impl<T> ParamTree<T> for SharedPrompt<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, t) in self.layers.iter().enumerate() {
            f(join(prefix, &format!("u{i}")), t);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, t) in self.layers.iter_mut().enumerate() {
            f(join(prefix, &format!("u{i}")), t);
        }
    }
}

impl<T> MapLeaves<T> for SharedPrompt<T> {
    type Mapped<U> = SharedPrompt<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> SharedPrompt<U> {
        SharedPrompt {
            layers: self.layers.iter().map(|t| f(t)).collect(),
        }
    }
}

impl<T> ParamTree<T> for PromptPool<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, t) in self.keys.iter().enumerate() {
            f(join(prefix, &format!("key{i}")), t);
        }
        for (i, t) in self.prompts.iter().enumerate() {
            f(join(prefix, &format!("prompt{i}")), t);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, t) in self.keys.iter_mut().enumerate() {
            f(join(prefix, &format!("key{i}")), t);
        }
        for (i, t) in self.prompts.iter_mut().enumerate() {
            f(join(prefix, &format!("prompt{i}")), t);
        }
    }
}

impl<T> MapLeaves<T> for PromptPool<T> {
    type Mapped<U> = PromptPool<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> PromptPool<U> {
        PromptPool {
            keys: self.keys.iter().map(|t| f(t)).collect(),
            prompts: self.prompts.iter().map(|t| f(t)).collect(),
        }
    }
}

impl<T> PromptPool<T> {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Pool size `m` and ensemble width `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolConfig {
    pub size: usize,
    pub ensemble: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            size: 20,
            ensemble: 2,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.ensemble == 0 || self.ensemble > self.size {
            return Err(Error::Config(format!(
                "pool ensemble k={} must lie in 1..=m={}",
                self.ensemble, self.size
            )));
        }
        Ok(())
    }
}

/// Truncated-normal prompts; keys drawn the same way then unit-normalised.
pub fn init_prompts(
    vit: &ViTConfig,
    pool: &PoolConfig,
    seed: u64,
) -> (SharedPrompt<Tensor>, GroupPromptPool) {
    let mut rng = stream(seed, 0x5052_4f4d);
    let (p, d) = (vit.prompt_len, vit.dim);
    let shared = SharedPrompt {
        layers: (0..vit.layers)
            .map(|_| truncated_normal(&mut rng, [p, d], PROMPT_INIT_STD))
            .collect(),
    };
    let prompts = (0..pool.size)
        .map(|_| truncated_normal(&mut rng, [vit.group_layers(), p, d], PROMPT_INIT_STD))
        .collect();
    let keys = (0..pool.size)
        .map(|_| {
            let k = truncated_normal(&mut rng, [d], PROMPT_INIT_STD);
            let norm = k.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            k.map(|v| v / norm)
        })
        .collect();
    (shared, PromptPool { keys, prompts })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    dot / (na * nb)
}

/// Indices of the `k` keys with the largest cosine similarity to `query`,
/// most similar first; equal similarities resolve to the lower index.
pub fn match_group_prompts(query: &[f64], keys: &[Tensor], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > keys.len() {
        return Err(Error::Config(format!(
            "ensemble k={k} must lie in 1..={}",
            keys.len()
        )));
    }
    if query.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("zero-norm prompt query".into()));
    }
    let mut ranked: Vec<(usize, f64)> = keys
        .iter()
        .enumerate()
        .map(|(i, key)| (i, cosine(query, key.data())))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(i, _)| i).collect())
}

/// Elementwise mean of the selected prompts.
pub fn ensemble_prompts(pool: &GroupPromptPool, selected: &[usize]) -> Result<Tensor> {
    let first = selected
        .first()
        .ok_or_else(|| Error::Degenerate("empty prompt selection".into()))?;
    let mut out = Tensor::zeros(pool.prompts[*first].shape().to_vec());
    for &i in selected {
        let p = pool
            .prompts
            .get(i)
            .ok_or_else(|| Error::Config(format!("prompt index {i} out of range")))?;
        out.add_assign(p);
    }
    let k = selected.len() as f64;
    Ok(out.map(|v| v / k))
}

/// Taped counterpart of [`ensemble_prompts`]; gradient reaches only the selected prompts.
pub fn ensemble_vars<'t>(prompts: &[Var<'t>], selected: &[usize]) -> Result<Var<'t>> {
    let (first, rest) = selected
        .split_first()
        .ok_or_else(|| Error::Degenerate("empty prompt selection".into()))?;
    let mut acc = prompts[*first];
    for &i in rest {
        acc = acc.add(prompts[i])?;
    }
    Ok(acc.scale(1.0 / selected.len() as f64))
}
