//! Training objectives: GCL logit re-scaling, asymmetric GCL, key matching,
//! the phase-2 composite, the dual-sampling weight schedule and phase-3 MSE.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::NORM_FLOOR;
use crate::error::{Error, Result, TensorError};

/// Floor applied to every log argument.
pub const LOG_FLOOR: f64 = 1e-12;

/// `E|ε|` for a standard normal ε, used in place of a draw at evaluation.
pub const EXPECTED_ABS_NORMAL: f64 = 0.797_884_560_802_865_4;

/// Which reading of the asymmetric loss to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormulaVariant {
    /// Negated printed form: negatives contribute `p_i^λ− · log p_i`.
    PaperLiteral,
    /// Asymmetric-loss convention: negatives contribute `p_i^λ− · log(1 − p_i)`.
    AslCorrected,
}

impl std::str::FromStr for FormulaVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper_literal" => Ok(Self::PaperLiteral),
            "asl_corrected" => Ok(Self::AslCorrected),
            other => Err(format!("unknown formula variant {other:?}")),
        }
    }
}

impl std::fmt::Display for FormulaVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PaperLiteral => "paper_literal",
            Self::AslCorrected => "asl_corrected",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GclConfig {
    pub alpha: f64,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub noise_enabled: bool,
    pub variant: FormulaVariant,
}

impl Default for GclConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda_plus: 0.0,
            lambda_minus: 4.0,
            noise_enabled: true,
            variant: FormulaVariant::AslCorrected,
        }
    }
}

impl GclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || self.lambda_plus < 0.0 || self.lambda_minus < 0.0 {
            return Err(Error::Config(
                "gcl alpha must be positive and focusing parameters nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-class training counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    counts: Vec<usize>,
}

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Config("class counts are empty".into()));
        }
        let missing: Vec<usize> = counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(i, _)| i)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingClasses(missing));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn n_max(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// `log n_max − log n_i` per class.
    pub fn log_gaps(&self) -> Vec<f64> {
        let top = (self.n_max() as f64).ln();
        self.counts.iter().map(|&n| top - (n as f64).ln()).collect()
    }
}

/// `v = α(ŝ − (log n_max − log n_i)·|ε|)` with an explicit `|ε|` per element.
pub fn gcl_adjust_with<'t>(
    scores: Var<'t>,
    counts: &ClassCounts,
    cfg: &GclConfig,
    eps_abs: &Tensor,
) -> Result<Var<'t>> {
    let s = scores.value();
    let c = s.cols();
    if c != counts.classes() || eps_abs.len() != s.len() {
        return Err(TensorError::Broadcast {
            lhs: s.shape().to_vec(),
            rhs: vec![counts.classes()],
        }
        .into());
    }
    let gaps = counts.log_gaps();
    let shift: Vec<f64> = eps_abs
        .data()
        .iter()
        .enumerate()
        .map(|(i, e)| gaps[i % c] * e)
        .collect();
    let shift = scores
        .tape()
        .constant(Tensor::from_vec(s.shape().to_vec(), shift));
    Ok(scores.sub(shift)?.scale(cfg.alpha))
}

/// GCL re-scaling. At train time with noise on, `|ε|` is a fresh |N(0,1)|
/// draw per element; otherwise it is its expectation √(2/π).
pub fn gcl_adjust<'t>(
    scores: Var<'t>,
    counts: &ClassCounts,
    cfg: &GclConfig,
    rng: &mut impl Rng,
    train: bool,
) -> Result<Var<'t>> {
    let shape = scores.shape();
    let n: usize = shape.iter().product();
    let eps = if train && cfg.noise_enabled {
        let draws = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z.abs()
            })
            .collect();
        Tensor::from_vec(shape, draws)
    } else {
        Tensor::full(shape, EXPECTED_ABS_NORMAL)
    };
    gcl_adjust_with(scores, counts, cfg, &eps)
}

/// Summed positive and negative terms of the asymmetric loss over a batch,
/// before negation and averaging.
pub fn agcl_terms<'t>(
    logits: Var<'t>,
    labels: &[usize],
    cfg: &GclConfig,
) -> Result<(Var<'t>, Var<'t>)> {
    let v = logits.value();
    let (b, c) = v.dims2()?;
    if labels.len() != b || labels.iter().any(|&j| j >= c) {
        return Err(Error::Config(format!(
            "labels {labels:?} do not fit logits of shape {:?}",
            v.shape()
        )));
    }
    let tape = logits.tape();
    let mut onehot = Tensor::zeros([b, c]);
    for (r, &j) in labels.iter().enumerate() {
        onehot.data_mut()[r * c + j] = 1.0;
    }
    let others = tape.constant(onehot.map(|x| 1.0 - x));
    let onehot = tape.constant(onehot);
    let p = logits.softmax(1)?;
    let one_minus_p = p.affine(-1.0, 1.0);
    let pos = one_minus_p
        .powf(cfg.lambda_plus)
        .mul(p.ln_floor(LOG_FLOOR))?
        .mul(onehot)?
        .sum();
    let neg_log = match cfg.variant {
        FormulaVariant::AslCorrected => one_minus_p.ln_floor(LOG_FLOOR),
        FormulaVariant::PaperLiteral => p.ln_floor(LOG_FLOOR),
    };
    let neg = p.powf(cfg.lambda_minus).mul(neg_log)?.mul(others)?.sum();
    Ok((pos, neg))
}

/// Batch-mean asymmetric GCL loss on already-adjusted logits `[B×C]`.
pub fn agcl_loss<'t>(logits: Var<'t>, labels: &[usize], cfg: &GclConfig) -> Result<Var<'t>> {
    let (pos, neg) = agcl_terms(logits, labels, cfg)?;
    let b = labels.len() as f64;
    Ok(pos.add(neg)?.scale(-1.0 / b))
}

/// `L_cls`: GCL adjustment followed by the asymmetric loss.
pub fn classification_loss<'t>(
    scores: Var<'t>,
    labels: &[usize],
    counts: &ClassCounts,
    cfg: &GclConfig,
    rng: &mut impl Rng,
    train: bool,
) -> Result<Var<'t>> {
    let v = gcl_adjust(scores, counts, cfg, rng, train)?;
    agcl_loss(v, labels, cfg)
}

/// Batch-mean softmax cross-entropy.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let cfg = GclConfig {
        lambda_plus: 0.0,
        ..GclConfig::default()
    };
    let (pos, _) = agcl_terms(logits, labels, &cfg)?;
    Ok(pos.scale(-1.0 / labels.len() as f64))
}

/// `1 − (1/k)·Σ_i ⟨q, k_i⟩` averaged over a batch. `queries[b]` is a detached
/// query; `matched[b]` lists indices into `keys` for that sample.
pub fn key_loss<'t>(
    tape: &'t Tape,
    queries: &[Tensor],
    matched: &[Vec<usize>],
    keys: &[Var<'t>],
) -> Result<Var<'t>> {
    if queries.is_empty() || queries.len() != matched.len() {
        return Err(Error::Config("key loss needs one match list per query".into()));
    }
    let mut q_rows = Vec::new();
    let mut k_rows = Vec::new();
    let d = queries[0].len();
    for (q, w) in queries.iter().zip(matched) {
        if w.is_empty() {
            return Err(Error::Degenerate("empty key match".into()));
        }
        if q.data().iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate("zero-norm key-loss query".into()));
        }
        for &i in w {
            let key = keys
                .get(i)
                .ok_or_else(|| Error::Config(format!("key index {i} out of range")))?;
            if key.value().data().iter().all(|&v| v == 0.0) {
                return Err(Error::Degenerate(format!("key {i} has zero norm")));
            }
            k_rows.push(key.reshape([1, d])?);
            q_rows.extend_from_slice(q.data());
        }
    }
    let n = k_rows.len();
    let k = Var::concat_rows(&k_rows)?.normalize_rows(NORM_FLOOR);
    let q = tape
        .constant(Tensor::from_vec([n, d], q_rows))
        .normalize_rows(NORM_FLOOR);
    let mean_cos = k.mul(q)?.sum().scale(1.0 / n as f64);
    Ok(mean_cos.affine(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchKind {
    Balanced,
    Instance,
}

impl BatchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BatchKind::Balanced => "balanced",
            BatchKind::Instance => "instance",
        }
    }
}

/// Dual-sampling weight schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    pub eta: f64,
    pub epochs: usize,
    pub epoch: usize,
}

/// β = 1 for class-balanced batches, η(E − e)/E for instance-balanced ones.
pub fn beta_schedule(state: &ScheduleState, kind: BatchKind) -> f64 {
    match kind {
        BatchKind::Balanced => 1.0,
        BatchKind::Instance => {
            if state.epochs == 0 {
                return 0.0;
            }
            let e = state.epoch.min(state.epochs);
            state.eta * (state.epochs - e) as f64 / state.epochs as f64
        }
    }
}

/// `β·L_cls(ŝ, y) + L_key`.
#[allow(clippy::too_many_arguments)]
pub fn phase2_loss<'t>(
    scores: Var<'t>,
    labels: &[usize],
    queries: &[Tensor],
    matched: &[Vec<usize>],
    keys: &[Var<'t>],
    beta: f64,
    counts: &ClassCounts,
    cfg: &GclConfig,
    eps_abs: &Tensor,
) -> Result<Var<'t>> {
    let v = gcl_adjust_with(scores, counts, cfg, eps_abs)?;
    let cls = agcl_loss(v, labels, cfg)?;
    let key = key_loss(scores.tape(), queries, matched, keys)?;
    Ok(cls.scale(beta).add(key)?)
}

/// Squared error between a predicted weight and its binary target.
pub fn mse_loss(w_moe: f64, target: f64) -> f64 {
    (w_moe - target) * (w_moe - target)
}

/// Batch-mean squared error on the tape; `pred` and `target` share a shape.
pub fn mse_loss_var<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let t = pred.tape().constant(target.clone());
    let diff = pred.sub(t)?;
    Ok(diff.mul(diff)?.mean())
}
