//! Two-expert score mixture: `ŝ = W·ŝ_vo + (1 − W)·ŝ_vl` with a searched base
//! weight and a per-sample offset predicted by a small MLP trained on the
//! samples where the experts disagree.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Uniform};

use crate::autodiff::{softmax, Activation, Tape, Tensor, Var};
use crate::data::epoch_batches;
use crate::error::{Error, Result};
use crate::losses::mse_loss_var;
use crate::params::{bind, param_struct, zeros_like};
use crate::rng::stream;
use crate::train::{sgd_update, Sgd};

/// Grid resolution of the coarse W search; plateaus narrower than one cell
/// can be missed, so it is kept at the 1e-3 resolution accuracy is judged at.
pub const SEARCH_GRID: usize = 1000;

/// Aligned score matrices of the two experts.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertScores {
    pub vo: Tensor,
    pub vl: Tensor,
    pub labels: Vec<usize>,
}

impl ExpertScores {
    pub fn new(vo: Tensor, vl: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, c) = vo.dims2()?;
        if vl.shape() != vo.shape() || labels.len() != n {
            return Err(Error::Config(format!(
                "expert scores {:?} and {:?} with {} labels are not aligned",
                vo.shape(),
                vl.shape(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Config(format!("label {y} out of range for {c} classes")));
        }
        Ok(Self { vo, vl, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.vo.cols()
    }

    /// Correct top-1 predictions when every sample is fused with `w`.
    pub fn fused_correct(&self, w: f64) -> usize {
        (0..self.len())
            .filter(|&i| argmax(&fuse(self.vo.row(i), self.vl.row(i), w)) == self.labels[i])
            .count()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy in percent of a score matrix.
pub fn accuracy(scores: &Tensor, labels: &[usize]) -> f64 {
    let n = labels.len().max(1);
    let correct = (0..labels.len())
        .filter(|&i| argmax(scores.row(i)) == labels[i])
        .count();
    100.0 * correct as f64 / n as f64
}

/// `W·vo + (1 − W)·vl` with `W` clamped to `[0, 1]`.
pub fn fuse(vo: &[f64], vl: &[f64], w: f64) -> Vec<f64> {
    let w = w.clamp(0.0, 1.0);
    if w == 1.0 {
        return vo.to_vec();
    }
    if w == 0.0 {
        return vl.to_vec();
    }
    vo.iter().zip(vl).map(|(a, b)| w * a + (1.0 - w) * b).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchResult {
    pub w: f64,
    pub correct: usize,
}

/// Maximises fused top-1 accuracy over `W ∈ [0, 1]`.
///
/// Accuracy is piecewise constant in `W`. The best point of a 1/1000 grid
/// (smallest `W` on ties) fixes the winning plateau; its two edges are then
/// located by bisection to within `eps`, and the plateau midpoint returned.
pub fn search_w_base(scores: &ExpertScores, eps: f64) -> SearchResult {
    let eps = eps.max(1e-12);
    let at = |g: usize| g as f64 / SEARCH_GRID as f64;
    let grid: Vec<usize> = (0..=SEARCH_GRID)
        .map(|g| scores.fused_correct(at(g)))
        .collect();
    let best = *grid.iter().max().expect("grid is nonempty");
    let g_lo = grid.iter().position(|&c| c == best).expect("max is present");
    let mut g_hi = g_lo;
    while g_hi < SEARCH_GRID && grid[g_hi + 1] == best {
        g_hi += 1;
    }
    let on = |w: f64| scores.fused_correct(w) == best;
    let edge = |mut inside: f64, mut outside: f64| {
        while (outside - inside).abs() > eps {
            let mid = 0.5 * (inside + outside);
            if on(mid) {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    };
    let left = if g_lo == 0 { 0.0 } else { edge(at(g_lo), at(g_lo - 1)) };
    let right = if g_hi == SEARCH_GRID {
        1.0
    } else {
        edge(at(g_hi), at(g_hi + 1))
    };
    let mid = 0.5 * (left + right);
    // A plateau split by a narrow dip would put the midpoint off the optimum.
    let w = if on(mid) { mid } else { at(g_lo) };
    SearchResult { w, correct: best }
}

/// Samples where exactly one expert is right, with `Ŵ = 1` when it is the
/// visual-only expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ConflictSet {
    pub indices: Vec<usize>,
    pub targets: Vec<f64>,
}

impl ConflictSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Fraction of conflicts won by the visual-only expert.
    pub fn balance(&self) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        Some(self.targets.iter().sum::<f64>() / self.len() as f64)
    }
}

pub fn build_conflict_set(scores: &ExpertScores) -> ConflictSet {
    let mut indices = Vec::new();
    let mut targets = Vec::new();
    for i in 0..scores.len() {
        let a = argmax(scores.vo.row(i));
        let b = argmax(scores.vl.row(i));
        let y = scores.labels[i];
        if a != b && ((a == y) != (b == y)) {
            indices.push(i);
            targets.push(if a == y { 1.0 } else { 0.0 });
        }
    }
    ConflictSet { indices, targets }
}

param_struct! {
    /// Three affine layers `2C → H → H → 1` with ReLU between them.
    pub struct ScorerMlp { w1, b1, w2, b2, w3, b3 }
}

impl ScorerMlp<Tensor> {
    /// Xavier-uniform hidden layers and a zero final layer, so the offset
    /// starts at exactly zero.
    pub fn init(classes: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = stream(seed, 0x4d4f_4500);
        let mut xavier = |i: usize, o: usize| {
            let bound = (6.0 / (i + o) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            Tensor::from_vec([i, o], (0..i * o).map(|_| dist.sample(&mut rng)).collect())
        };
        Self {
            w1: xavier(2 * classes, hidden),
            b1: Tensor::zeros([hidden]),
            w2: xavier(hidden, hidden),
            b2: Tensor::zeros([hidden]),
            w3: Tensor::zeros([hidden, 1]),
            b3: Tensor::zeros([1]),
        }
    }

    pub fn classes(&self) -> usize {
        self.w1.rows() / 2
    }
}

/// `[N×2C]` scorer inputs: both experts' score rows, each softmax-normalised.
pub fn scorer_inputs(vo: &Tensor, vl: &Tensor) -> Result<Tensor> {
    let (n, c) = vo.dims2()?;
    let (pa, pb) = (softmax(vo, 1)?, softmax(vl, 1)?);
    let mut data = Vec::with_capacity(n * 2 * c);
    for r in 0..n {
        data.extend_from_slice(pa.row(r));
        data.extend_from_slice(pb.row(r));
    }
    Ok(Tensor::from_vec([n, 2 * c], data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Plateau-edge tolerance of the W_base search.
    pub eps: f64,
    pub seed: u64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            epochs: 50,
            lr: 0.01,
            momentum: 0.9,
            batch: 32,
            eps: 1e-3,
            seed: 0,
        }
    }
}

/// Searched base weight plus the offset MLP; `scorer = None` is the inert
/// state that fuses with `W_base` everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeState {
    pub w_base: f64,
    pub eps: f64,
    pub scorer: Option<ScorerMlp<Tensor>>,
}

impl MoeState {
    pub fn inert(w_base: f64, eps: f64) -> Self {
        Self {
            w_base,
            eps,
            scorer: None,
        }
    }

    /// Unclamped `W_base + ψ(·)` for each row of the inputs.
    pub fn raw_weights(&self, vo: &Tensor, vl: &Tensor) -> Result<Vec<f64>> {
        let n = vo.rows();
        let Some(mlp) = &self.scorer else {
            return Ok(vec![self.w_base; n]);
        };
        if vo.cols() != mlp.classes() {
            return Err(Error::Config(format!(
                "scorer trained for {} classes, scores have {}",
                mlp.classes(),
                vo.cols()
            )));
        }
        let x = scorer_inputs(vo, vl)?;
        let tape = Tape::new();
        let m = bind(&tape, mlp, false);
        let out = mlp_forward(tape.constant(x), &m)?;
        Ok(out.value().data().iter().map(|o| self.w_base + o).collect())
    }

    /// `W_moe = clamp(W_base + W_offset, 0, 1)` per sample.
    pub fn weights(&self, vo: &Tensor, vl: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .raw_weights(vo, vl)?
            .into_iter()
            .map(|w| w.clamp(0.0, 1.0))
            .collect())
    }

    /// Fused scores `[N×C]`.
    pub fn fuse_all(&self, scores: &ExpertScores) -> Result<Tensor> {
        let w = self.weights(&scores.vo, &scores.vl)?;
        let c = scores.classes();
        let mut data = Vec::with_capacity(scores.len() * c);
        for (i, wi) in w.iter().enumerate() {
            data.extend(fuse(scores.vo.row(i), scores.vl.row(i), *wi));
        }
        Ok(Tensor::from_vec([scores.len(), c], data))
    }
}

fn mlp_forward<'t>(x: Var<'t>, m: &ScorerMlp<Var<'t>>) -> Result<Var<'t>> {
    Ok(x.linear(m.w1, m.b1)?
        .activation(Activation::Relu)
        .linear(m.w2, m.b2)?
        .activation(Activation::Relu)
        .linear(m.w3, m.b3)?)
}

/// One-sample scorer output: `clamp(W_base + ψ(softmax(vo), softmax(vl)))`.
pub fn scorer_forward(state: &MoeState, vo: &[f64], vl: &[f64]) -> Result<f64> {
    let c = vo.len();
    let w = state.weights(
        &Tensor::from_vec([1, c], vo.to_vec()),
        &Tensor::from_vec([1, c], vl.to_vec()),
    )?;
    Ok(w[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase3Report {
    pub w_base: f64,
    pub base_correct: usize,
    pub conflicts: usize,
    pub balance: Option<f64>,
    /// Mean squared error on the conflict set after each epoch.
    pub epoch_mse: Vec<f64>,
}

/// Searches `W_base` on training scores, then fits the offset MLP to the
/// conflict set by minimising `(W_base + ψ − Ŵ)²` with SGD.
pub fn run_phase3(train: &ExpertScores, cfg: &MoeConfig) -> Result<(MoeState, Phase3Report)> {
    if train.is_empty() {
        return Err(Error::Degenerate("phase 3 needs at least one training sample".into()));
    }
    let search = search_w_base(train, cfg.eps);
    let conflicts = build_conflict_set(train);
    let mut report = Phase3Report {
        w_base: search.w,
        base_correct: search.correct,
        conflicts: conflicts.len(),
        balance: conflicts.balance(),
        epoch_mse: Vec::new(),
    };
    if conflicts.is_empty() {
        log::warn!("no conflicting predictions between experts; mixture falls back to W_base");
        return Ok((MoeState::inert(search.w, cfg.eps), report));
    }
    let pick = |t: &Tensor| -> Tensor {
        let c = t.cols();
        let mut d = Vec::with_capacity(conflicts.len() * c);
        for &i in &conflicts.indices {
            d.extend_from_slice(t.row(i));
        }
        Tensor::from_vec([conflicts.len(), c], d)
    };
    let inputs = scorer_inputs(&pick(&train.vo), &pick(&train.vl))?;
    let mut mlp = ScorerMlp::init(train.classes(), cfg.hidden, cfg.seed);
    let mut momenta = zeros_like(&mlp);
    let sgd = Sgd {
        momentum: cfg.momentum,
        weight_decay: 0.0,
    };
    let mut order_rng = stream(cfg.seed, 0x4d4f_4501);
    let n = conflicts.len();
    let width = inputs.cols();
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(n, cfg.batch, &mut order_rng) {
            let mut x = Vec::with_capacity(idx.len() * width);
            let mut y = Vec::with_capacity(idx.len());
            for &i in &idx {
                x.extend_from_slice(inputs.row(i));
                y.push(conflicts.targets[i] - search.w);
            }
            let tape = Tape::new();
            let m = bind(&tape, &mlp, true);
            let out = mlp_forward(tape.constant(Tensor::from_vec([idx.len(), width], x)), &m)?;
            let loss = mse_loss_var(out, &Tensor::from_vec([idx.len(), 1], y))?;
            if !loss.value().item().is_finite() {
                return Err(Error::NonFinite("phase-3 scorer loss".into()));
            }
            let grads = tape.backward(loss)?;
            sgd_update(&mut mlp, &m, &grads, &mut momenta, cfg.lr, sgd)?;
        }
        let state = MoeState {
            w_base: search.w,
            eps: cfg.eps,
            scorer: Some(mlp.clone()),
        };
        let raw = state.raw_weights(&pick(&train.vo), &pick(&train.vl))?;
        let mse = raw
            .iter()
            .zip(&conflicts.targets)
            .map(|(w, t)| (w - t) * (w - t))
            .sum::<f64>()
            / n as f64;
        report.epoch_mse.push(mse);
    }
    Ok((
        MoeState {
            w_base: search.w,
            eps: cfg.eps,
            scorer: Some(mlp),
        },
        report,
    ))
}

/// `sample_id,label,s_0..s_{C−1}` with shortest round-trip float formatting.
pub fn scores_to_csv(scores: &Tensor, labels: &[usize]) -> String {
    let c = scores.cols();
    let mut out = String::from("sample_id,label");
    for k in 0..c {
        let _ = write!(out, ",s_{k}");
    }
    out.push('\n');
    for (i, &y) in labels.iter().enumerate() {
        let _ = write!(out, "{i},{y}");
        for v in scores.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn scores_from_csv(text: &str) -> std::result::Result<(Tensor, Vec<usize>), String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty score file")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "label" {
        return Err("header must be sample_id,label,s_0..".into());
    }
    let c = cols.len() - 2;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != c + 2 {
            return Err(format!("line {}: expected {} fields", ln + 2, c + 2));
        }
        if fields[0].parse::<usize>().ok() != Some(labels.len()) {
            return Err(format!("line {}: sample ids must run 0, 1, 2, …", ln + 2));
        }
        labels.push(
            fields[1]
                .parse::<usize>()
                .map_err(|e| format!("line {}: label: {e}", ln + 2))?,
        );
        for f in &fields[2..] {
            data.push(f.parse::<f64>().map_err(|e| format!("line {}: {e}", ln + 2))?);
        }
    }
    Ok((Tensor::from_vec([labels.len(), c], data), labels))
}

pub fn save_scores(path: &Path, scores: &Tensor, labels: &[usize]) -> Result<()> {
    std::fs::write(path, scores_to_csv(scores, labels)).map_err(|e| Error::io(path, e))
}

pub fn load_scores(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scores_from_csv(&text).map_err(|r| Error::corrupt(path, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::from_vec([rows.len(), c], rows.concat())
    }

    #[test]
    fn fuse_cases() {
        let (a, b) = ([2.0, 0.0], [0.0, 2.0]);
        assert_eq!(fuse(&a, &b, 1.0), a);
        assert_eq!(fuse(&a, &b, 0.0), b);
        assert_eq!(fuse(&a, &b, 0.5), vec![1.0, 1.0]);
        assert_eq!(fuse(&a, &b, 1.7), a);
    }

    #[test]
    fn dominant_expert_search() {
        let s = ExpertScores::new(
            t(&[&[3.0, 0.0], &[0.0, 3.0], &[3.0, 0.0]]),
            t(&[&[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]),
            vec![0, 1, 0],
        )
        .unwrap();
        let r = search_w_base(&s, 1e-3);
        assert_eq!(r.correct, 3);
        assert_eq!(s.fused_correct(r.w), 3);
    }

    #[test]
    fn identical_experts_give_midpoint() {
        let m = t(&[&[1.0, 0.0], &[0.2, 0.3]]);
        let s = ExpertScores::new(m.clone(), m, vec![0, 0]).unwrap();
        assert_eq!(search_w_base(&s, 1e-3).w, 0.5);
    }

    #[test]
    fn search_matches_exhaustive_grid() {
        let mut rng = stream(17, 0);
        for _ in 0..5 {
            let (n, c) = (50, 4);
            let mut draw = || Tensor::from_vec([n, c], (0..n * c).map(|_| rng.random::<f64>()).collect());
            let (vo, vl) = (draw(), draw());
            let labels = (0..n).map(|i| (i * 7) % c).collect();
            let s = ExpertScores::new(vo, vl, labels).unwrap();
            let r = search_w_base(&s, 1e-3);
            let oracle = (0..=1000).map(|k| s.fused_correct(k as f64 / 1000.0)).max().unwrap();
            assert!(s.fused_correct(r.w) + 1 >= oracle);
            assert!(s.fused_correct(r.w) >= s.fused_correct(0.0).max(s.fused_correct(1.0)));
        }
    }

    #[test]
    fn conflict_set_cases() {
        let m = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let same = ExpertScores::new(m.clone(), m, vec![0, 1]).unwrap();
        assert!(build_conflict_set(&same).is_empty());

        // Rows: VO right, VO right, VL right, VL right, both wrong (3 classes).
        let vo = t(&[&[1., 0., 0.], &[0., 1., 0.], &[1., 0., 0.], &[0., 0., 1.], &[0., 1., 0.]]);
        let vl = t(&[&[0., 1., 0.], &[1., 0., 0.], &[0., 1., 0.], &[0., 1., 0.], &[0., 0., 1.]]);
        let s = ExpertScores::new(vo, vl, vec![0, 1, 1, 1, 0]).unwrap();
        let cs = build_conflict_set(&s);
        assert_eq!(cs.indices, vec![0, 1, 2, 3]);
        assert_eq!(cs.targets, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(cs.balance(), Some(0.5));
    }

    #[test]
    fn scorer_init_and_clamp() {
        let mlp = ScorerMlp::init(3, 8, 0);
        let state = MoeState {
            w_base: 0.3,
            eps: 1e-3,
            scorer: Some(mlp.clone()),
        };
        assert_eq!(scorer_forward(&state, &[1.0, 2.0, 3.0], &[0.0, 0.0, 1.0]).unwrap(), 0.3);
        let mut pushed = mlp;
        pushed.b3 = Tensor::from_vec([1], vec![0.5]);
        let state = MoeState {
            w_base: 0.9,
            eps: 1e-3,
            scorer: Some(pushed),
        };
        assert_eq!(scorer_forward(&state, &[1.0, 2.0, 3.0], &[0.0, 0.0, 1.0]).unwrap(), 1.0);
        assert!(scorer_forward(&state, &[1.0, 2.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn scorer_matches_scalar_mlp() {
        let mut mlp = ScorerMlp::init(2, 3, 4);
        mlp.w3 = Tensor::from_vec([3, 1], vec![0.2, -0.1, 0.3]);
        mlp.b3 = Tensor::from_vec([1], vec![0.05]);
        let state = MoeState {
            w_base: 0.25,
            eps: 1e-3,
            scorer: Some(mlp.clone()),
        };
        let (vo, vl) = ([0.3, -0.2], [1.0, 0.5]);
        let sm = |v: &[f64]| {
            let z: f64 = v.iter().map(|x| x.exp()).sum();
            v.iter().map(|x| x.exp() / z).collect::<Vec<_>>()
        };
        let x: Vec<f64> = sm(&vo).into_iter().chain(sm(&vl)).collect();
        let layer = |x: &[f64], w: &Tensor, b: &Tensor, relu: bool| -> Vec<f64> {
            (0..w.cols())
                .map(|j| {
                    let s = b.data()[j] + (0..x.len()).map(|i| x[i] * w.data()[i * w.cols() + j]).sum::<f64>();
                    if relu { s.max(0.0) } else { s }
                })
                .collect()
        };
        let h1 = layer(&x, &mlp.w1, &mlp.b1, true);
        let h2 = layer(&h1, &mlp.w2, &mlp.b2, true);
        let o = layer(&h2, &mlp.w3, &mlp.b3, false)[0];
        let got = scorer_forward(&state, &vo, &vl).unwrap();
        assert!((got - (0.25 + o).clamp(0.0, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn inert_state_fuses_with_base() {
        let s = ExpertScores::new(t(&[&[1.0, 0.0]]), t(&[&[0.0, 3.0]]), vec![0]).unwrap();
        let fused = MoeState::inert(0.75, 1e-3).fuse_all(&s).unwrap();
        assert_eq!(fused.data(), fuse(&[1.0, 0.0], &[0.0, 3.0], 0.75).as_slice());
    }

    #[test]
    fn separable_conflicts_are_learned() {
        // VO always says class 0; VL says class 2 when VO is right and the
        // true class 1 otherwise, so the winner is readable from VL's scores.
        let (n, c) = (80, 3);
        let mut vo = Vec::new();
        let mut vl = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let vo_wins = i % 2 == 0;
            vo.extend([5.0, 0.0, 0.0]);
            vl.extend(if vo_wins { [0.0, 0.0, 5.0] } else { [0.0, 5.0, 0.0] });
            labels.push(if vo_wins { 0 } else { 1 });
        }
        let s = ExpertScores::new(Tensor::from_vec([n, c], vo), Tensor::from_vec([n, c], vl), labels).unwrap();
        let cfg = MoeConfig {
            hidden: 16,
            lr: 0.05,
            ..MoeConfig::default()
        };
        let (state, report) = run_phase3(&s, &cfg).unwrap();
        assert_eq!(report.conflicts, n);
        assert!(*report.epoch_mse.last().unwrap() < 0.05, "{report:?}");
        let (again, _) = run_phase3(&s, &cfg).unwrap();
        assert_eq!(state, again);
    }

    #[test]
    fn csv_round_trip() {
        let s = t(&[&[0.1, -2.5e-7], &[3.0, 1.0 / 3.0]]);
        let text = scores_to_csv(&s, &[1, 0]);
        assert!(text.starts_with("sample_id,label,s_0,s_1\n"));
        let (back, labels) = scores_from_csv(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(labels, vec![1, 0]);
    }
}
