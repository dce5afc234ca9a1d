//! Phase-1 features reused by phase 2: tokens after block K and the query.

use crate::autodiff::{Tape, Tensor};
use crate::backbone::{BackboneParams, ViTConfig};
use crate::data::{LongTailDataset, SplitKind};
use crate::error::{Error, Result};
use crate::params::{ParamDigest, ParamTree};

use super::model::{rows_of, AdaptState, Bound, Stage, Trainable};

/// `(c_K, z_K)` as one `[T×d]` block and the phase-1 class token `c_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub tokens_k: Tensor,
    pub query: Vec<f64>,
}

/// Per-sample phase-1 features of one split, valid only for the phase-1
/// parameters they were computed with.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    digest: ParamDigest,
    split: SplitKind,
    entries: Vec<Option<CacheEntry>>,
}

/// Digest of everything the phase-1 part of the forward pass depends on.
pub fn phase1_digest(backbone: &BackboneParams, state: &AdaptState<Tensor>) -> ParamDigest {
    struct Phase1View<'a>(&'a BackboneParams, &'a AdaptState<Tensor>);
    impl ParamTree<Tensor> for Phase1View<'_> {
        fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
            self.0.visit(&crate::params::join(prefix, "backbone"), f);
            self.1.shared.visit(&crate::params::join(prefix, "shared"), f);
            self.1.adapters.visit(&crate::params::join(prefix, "adapters"), f);
        }
        fn visit_mut<'a>(&'a mut self, _: &str, _: &mut dyn FnMut(String, &'a mut Tensor)) {
            unreachable!("read-only view")
        }
    }
    ParamDigest::of(&Phase1View(backbone, state))
}

impl ForwardCache {
    /// Runs the phase-1 pass over every sample of `split`, `chunk` at a time.
    pub fn build(
        vit: &ViTConfig,
        backbone: &BackboneParams,
        state: &AdaptState<Tensor>,
        data: &LongTailDataset,
        split: SplitKind,
        chunk: usize,
    ) -> Result<Self> {
        let n = data.split(split).len();
        let t = vit.tokens();
        let mut entries = Vec::with_capacity(n);
        let idx: Vec<usize> = (0..n).collect();
        for part in idx.chunks(chunk.max(1)) {
            let tape = Tape::new();
            let bound = Bound::new(&tape, vit, backbone, state, Stage::Phase1, Trainable::NONE, 1);
            let images: Vec<&[f32]> = part.iter().map(|&i| data.image(split, i)).collect();
            let x_k = bound.front(&images)?;
            let q = bound.back_plain(x_k, part.len())?;
            let xv = x_k.value();
            for (r, query) in rows_of(&q.value()).into_iter().enumerate() {
                let rows = xv.data()[r * t * vit.dim..(r + 1) * t * vit.dim].to_vec();
                entries.push(Some(CacheEntry {
                    tokens_k: Tensor::from_vec([t, vit.dim], rows),
                    query,
                }));
            }
        }
        Ok(Self {
            digest: phase1_digest(backbone, state),
            split,
            entries,
        })
    }

    pub fn digest(&self) -> ParamDigest {
        self.digest
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The entry for sample `i` of `split`, provided it was computed under
    /// phase-1 parameters with digest `expected`.
    pub fn get(&self, split: SplitKind, i: usize, expected: ParamDigest) -> Result<&CacheEntry> {
        if split != self.split || expected != self.digest {
            return Err(Error::CacheMiss);
        }
        self.entries
            .get(i)
            .and_then(Option::as_ref)
            .ok_or(Error::CacheMiss)
    }

    /// Drops one entry; the next lookup of it is a miss.
    pub fn evict(&mut self, i: usize) {
        if let Some(e) = self.entries.get_mut(i) {
            *e = None;
        }
    }
}
