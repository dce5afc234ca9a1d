//! Flat `key = value` run configuration covering every stage of the pipeline.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown and repeated keys are
//! rejected with the offending line number. Every key has a documented
//! default; [`KEYS`] lists them with the origin of each value.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::ViTConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::GclConfig;
use crate::metrics::{ClusterDistance, DEFAULT_KNN};
use crate::moe::MoeConfig;
use crate::prompts::PoolConfig;
use crate::train::{PretrainConfig, TrainConfig};

/// Settings that turn a run into the second expert: a backbone of another
/// width, pretrained from another seed on another source rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert2 {
    /// Added to `seed` for the backbone initialisation and pretraining order.
    pub seed_offset: u64,
    pub dim: usize,
    /// Added to `seed` for the source-domain classes and samples.
    pub source_seed_offset: u64,
}

impl Default for Expert2 {
    fn default() -> Self {
        Self {
            seed_offset: 1000,
            dim: 24,
            source_seed_offset: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub knn: usize,
    pub distance: ClusterDistance,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn: DEFAULT_KNN,
            distance: ClusterDistance::Euclidean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Drives the dataset, initialisation and every training stream.
    pub seed: u64,
    /// Which expert this run trains: 1, or 2 with the `expert2.*` overrides.
    pub expert: u8,
    pub data: DatasetSpec,
    pub vit: ViTConfig,
    pub pool: PoolConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub gcl: GclConfig,
    pub moe: MoeConfig,
    pub eval: EvalConfig,
    pub expert2: Expert2,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            expert: 1,
            data: DatasetSpec::default(),
            vit: ViTConfig::default(),
            pool: PoolConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            gcl: GclConfig::default(),
            moe: MoeConfig::default(),
            eval: EvalConfig::default(),
            expert2: Expert2::default(),
            out_dir: "runs".into(),
        }
    }
}

/// One documented configuration key.
pub struct KeyDoc {
    pub key: &'static str,
    /// Meaning and the origin of the default value.
    pub doc: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> std::result::Result<(), String>,
}

impl KeyDoc {
    pub fn default_value(&self) -> String {
        (self.get)(&RunConfig::default())
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("invalid value '{v}': {e}"))
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ , $doc:literal;)*) => {
        /// Every configuration key in canonical order.
        pub static KEYS: &[KeyDoc] = &[$(
            KeyDoc {
                key: $key,
                doc: $doc,
                get: |c| c.$($field).+.to_string(),
                set: |c, v| {
                    c.$($field).+ = parse(v)?;
                    Ok(())
                },
            },
        )*];
    };
}

keys! {
    "seed" => seed, "run seed for data, initialisation and sampling (invented)";
    "expert" => expert, "1 = first expert, 2 = apply the expert2.* overrides (invented)";
    "out_dir" => out_dir, "default output directory (invented)";

    "data.classes" => data.classes, "target classes C (desk benchmark)";
    "data.n_max" => data.n_max, "largest target class size (desk benchmark)";
    "data.imbalance" => data.imbalance, "imbalance ratio rho = n_max/n_min (desk benchmark)";
    "data.val_per_class" => data.val_per_class, "balanced target validation images per class (desk benchmark)";
    "data.source_classes" => data.source_classes, "source-domain classes used for pretraining (invented)";
    "data.source_per_class" => data.source_per_class, "source training images per class (invented)";
    "data.source_val_per_class" => data.source_val_per_class, "source validation images per class (invented)";
    "data.image" => data.image, "image side in pixels; also the ViT input size (desk scale)";
    "data.channels" => data.channels, "image channels (desk scale)";
    "data.parts" => data.parts, "quadrant patterns in the shared part bank (invented)";
    "data.class_detail" => data.class_detail, "class-specific prototype detail amplitude (invented)";
    "data.noise" => data.noise, "per-pixel Gaussian noise std (invented)";
    "data.domain_shift" => data.domain_shift, "strength of the target rendering offset (invented)";
    "data.subdomains" => data.subdomains, "target sub-domains with distinct rendering offsets (invented)";

    "vit.layers" => vit.layers, "transformer blocks L (desk scale; ViT-B/16 has 12)";
    "vit.dim" => vit.dim, "embedding width d (desk scale)";
    "vit.heads" => vit.heads, "attention heads (desk scale)";
    "vit.mlp_dim" => vit.mlp_dim, "FFN hidden width (desk scale)";
    "vit.patch" => vit.patch, "patch side (desk scale)";
    "vit.prompt_len" => vit.prompt_len, "prompt tokens per layer (paper: 10)";
    "vit.shared_layers" => vit.shared_layers, "blocks K with only the shared prompt (paper: K = L/2)";
    "vit.adapter_dim" => vit.adapter_dim, "adapter bottleneck width (desk scale)";
    "vit.adapter_scale" => vit.adapter_scale, "adapter output scale s (AdaptFormer: 0.1)";
    "vit.classifier_scale" => vit.classifier_scale, "cosine classifier temperature sigma (unstated in paper; 16)";
    "vit.ln_eps" => vit.ln_eps, "layer-norm epsilon (ViT: 1e-5)";

    "pool.size" => pool.size, "group prompts m (paper: 20)";
    "pool.ensemble" => pool.ensemble, "prompts ensembled per sample k (paper: 2)";

    "pretrain.epochs" => pretrain.epochs, "source pretraining epochs (invented)";
    "pretrain.batch" => pretrain.batch, "source pretraining batch (invented)";
    "pretrain.lr" => pretrain.lr, "source pretraining peak lr (invented)";
    "pretrain.warmup_epochs" => pretrain.warmup_epochs, "source pretraining warmup (invented)";
    "pretrain.weight_decay" => pretrain.weight_decay, "source pretraining weight decay (invented)";
    "pretrain.momentum" => pretrain.momentum, "source pretraining momentum (invented)";

    "train.batch" => train.batch, "batch size B per sampler (desk scale)";
    "train.lr_per_256" => train.lr_per_256, "lr per 256 samples, base lr = x*B/256 (paper: 0.002)";
    "train.warmup_epochs" => train.warmup_epochs, "linear warmup epochs (paper: 5)";
    "train.weight_decay" => train.weight_decay, "SGD weight decay (paper: 1e-2)";
    "train.momentum" => train.momentum, "SGD momentum (paper: 0.9)";
    "train.epochs" => train.epochs, "epochs per phase E (paper: 40)";
    "train.eta" => train.eta, "initial instance-batch weight eta (paper: 0.5)";

    "gcl.alpha" => gcl.alpha, "logit-adjustment strength alpha (GCL: 1)";
    "gcl.lambda_plus" => gcl.lambda_plus, "positive focusing parameter (paper: 0)";
    "gcl.lambda_minus" => gcl.lambda_minus, "negative focusing parameter (paper: 4)";
    "gcl.noise" => gcl.noise_enabled, "Gaussian noise in the logit adjustment (GCL: true)";
    "gcl.variant" => gcl.variant, "A-GCL formula: asl_corrected | paper_literal";

    "moe.hidden" => moe.hidden, "scorer MLP hidden width (desk scale; paper: 2048)";
    "moe.epochs" => moe.epochs, "scorer training epochs (paper: 50)";
    "moe.lr" => moe.lr, "scorer learning rate (paper: 0.01)";
    "moe.momentum" => moe.momentum, "scorer SGD momentum (paper: 0.9)";
    "moe.batch" => moe.batch, "scorer batch size (invented)";
    "moe.eps" => moe.eps, "W_base search tolerance epsilon (invented: 1e-3)";

    "eval.knn" => eval.knn, "k of the cosine k-NN probe (unstated in paper; 20)";
    "eval.distance" => eval.distance, "cluster distance: euclidean | cosine_angular";

    "expert2.seed_offset" => expert2.seed_offset, "backbone seed offset of the second expert (invented)";
    "expert2.dim" => expert2.dim, "embedding width of the second expert (invented)";
    "expert2.source_seed_offset" => expert2.source_seed_offset, "source-domain seed offset of the second expert (invented)";
}

impl RunConfig {
    /// Parses a configuration document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = n + 1;
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {lineno}: expected 'key = value'")));
            };
            let (k, v) = (k.trim(), v.trim());
            let Some(entry) = KEYS.iter().find(|e| e.key == k) else {
                return Err(Error::Config(format!("line {lineno}: unknown key '{k}'")));
            };
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {lineno}: key '{k}' repeated")));
            }
            (entry.set)(&mut cfg, v).map_err(|e| Error::Config(format!("line {lineno}: {k}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let entry = KEYS
            .iter()
            .find(|e| e.key == key)
            .ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        (entry.set)(self, value).map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.iter().find(|e| e.key == key).map(|e| (e.get)(self))
    }

    /// Every key with its value, in canonical order; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in KEYS {
            let _ = writeln!(out, "{} = {}", e.key, (e.get)(self));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.expert, 1 | 2) {
            return Err(Error::Config(format!("expert must be 1 or 2, got {}", self.expert)));
        }
        if self.moe.hidden == 0 || self.moe.batch == 0 || self.eval.knn == 0 {
            return Err(Error::Config("moe.hidden, moe.batch and eval.knn must be positive".into()));
        }
        let resolved = self.resolved();
        resolved.data.validate()?;
        resolved.vit.validate()?;
        resolved.pool.validate()?;
        resolved.train.validate()?;
        resolved.gcl.validate()?;
        Ok(())
    }

    /// The configuration with seeds distributed to every stage, image shape
    /// copied into the ViT and, for expert 2, its overrides applied.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.data.seed = self.seed;
        c.data.source_seed = self.seed;
        c.pretrain.seed = self.seed;
        c.train.seed = self.seed;
        c.moe.seed = self.seed;
        c.vit.image = self.data.image;
        c.vit.channels = self.data.channels;
        if self.expert == 2 {
            c.pretrain.seed = self.seed.wrapping_add(self.expert2.seed_offset);
            c.data.source_seed = self.seed.wrapping_add(self.expert2.source_seed_offset);
            c.vit.dim = self.expert2.dim;
        }
        c
    }

    /// The same run for the other expert.
    pub fn with_expert(&self, expert: u8) -> Self {
        Self {
            expert,
            ..self.clone()
        }
    }

    /// Text for `--help`: every key, its default and where it comes from.
    pub fn help_text() -> String {
        let width = KEYS.iter().map(|e| e.key.len()).max().unwrap_or(0);
        let mut out = String::new();
        for e in KEYS {
            let _ = writeln!(out, "  {:width$} = {:<10} {}", e.key, e.default_value(), e.doc);
        }
        out
    }
}
