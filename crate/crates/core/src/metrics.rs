//! Evaluation and feature analysis: shot-split accuracy, a cosine k-NN probe
//! and the inner/inter-class distance ratio γ.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::data::ShotTag;
use crate::error::{Error, Result};

/// Neighbours consulted by the k-NN probe unless configured otherwise.
pub const DEFAULT_KNN: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitReport {
    /// Sample-weighted accuracy over every evaluated sample, percent.
    pub overall: f64,
    /// Macro-averages over the classes of each split; `None` if the split has
    /// no evaluated class.
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    /// Per-class accuracy; `None` for a class without samples.
    pub per_class: Vec<Option<f64>>,
}

impl SplitReport {
    pub fn split(&self, tag: ShotTag) -> Option<f64> {
        match tag {
            ShotTag::Many => self.many,
            ShotTag::Medium => self.medium,
            ShotTag::Few => self.few,
        }
    }

    pub fn csv_header() -> &'static str {
        "overall,many,medium,few"
    }

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
        format!("{:.4},{},{},{}", self.overall, f(self.many), f(self.medium), f(self.few))
    }
}

impl fmt::Display for SplitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        write!(
            f,
            "overall {:.2}  many {}  medium {}  few {}",
            self.overall,
            s(self.many),
            s(self.medium),
            s(self.few)
        )
    }
}

/// Shot-split accuracy of predictions; `tags` holds one tag per class.
pub fn split_accuracy(preds: &[usize], labels: &[usize], tags: &[ShotTag]) -> Result<SplitReport> {
    if preds.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Degenerate("no samples to evaluate".into()));
    }
    let c = tags.len();
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= c {
            return Err(Error::Config(format!("label {y} out of range for {c} classes")));
        }
        totals[y] += 1;
        hits[y] += usize::from(p == y);
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &n)| (n > 0).then(|| 100.0 * h as f64 / n as f64))
        .collect();
    let macro_avg = |tag: ShotTag| {
        let accs: Vec<f64> = per_class
            .iter()
            .zip(tags)
            .filter(|(_, t)| **t == tag)
            .filter_map(|(a, _)| *a)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    };
    Ok(SplitReport {
        overall: 100.0 * hits.iter().sum::<usize>() as f64 / labels.len() as f64,
        many: macro_avg(ShotTag::Many),
        medium: macro_avg(ShotTag::Medium),
        few: macro_avg(ShotTag::Few),
        per_class,
    })
}

/// Top-1 predictions of a score matrix; the lowest class wins ties.
pub fn predictions(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows())
        .map(|i| crate::moe::argmax(scores.row(i)))
        .collect()
}

fn unit_rows(x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            let r = x.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.to_vec()
            }
        })
        .collect()
}

/// Cosine k-NN accuracy, percent: each val feature takes the majority label
/// of its `k` most similar train features (smallest class on vote ties,
/// earlier train index on similarity ties).
pub fn knn_accuracy(
    train: &Tensor,
    train_labels: &[usize],
    val: &Tensor,
    val_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k-NN needs k ≥ 1".into()));
    }
    if train_labels.is_empty() {
        return Err(Error::Degenerate("k-NN needs a nonempty train set".into()));
    }
    if train.rows() != train_labels.len() || val.rows() != val_labels.len() || train.cols() != val.cols() {
        return Err(Error::Config("k-NN features and labels are not aligned".into()));
    }
    if val_labels.is_empty() {
        return Err(Error::Degenerate("k-NN needs a nonempty val set".into()));
    }
    let classes = train_labels.iter().chain(val_labels).max().copied().unwrap_or(0) + 1;
    let (tr, va) = (unit_rows(train), unit_rows(val));
    let k = k.min(tr.len());
    let correct: usize = va
        .par_iter()
        .zip(val_labels)
        .map(|(q, &y)| {
            let mut sims: Vec<(f64, usize)> = tr
                .iter()
                .enumerate()
                .map(|(j, t)| (q.iter().zip(t).map(|(a, b)| a * b).sum::<f64>(), j))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes];
            for &(_, j) in &sims[..k] {
                votes[train_labels[j]] += 1;
            }
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            usize::from(best == y)
        })
        .sum();
    Ok(100.0 * correct as f64 / val_labels.len() as f64)
}

/// Distance used by the cluster statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClusterDistance {
    #[default]
    Euclidean,
    /// Angle between vectors, in radians.
    CosineAngular,
}

impl FromStr for ClusterDistance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine_angular" => Ok(Self::CosineAngular),
            _ => Err(format!("unknown distance '{s}' (euclidean | cosine_angular)")),
        }
    }
}

impl fmt::Display for ClusterDistance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Euclidean => "euclidean",
            Self::CosineAngular => "cosine_angular",
        })
    }
}

impl ClusterDistance {
    pub fn between(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Self::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Self::CosineAngular => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return 0.0;
                }
                (dot / (na * nb)).clamp(-1.0, 1.0).acos()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterStats {
    /// Mean distance of each class's samples to their class centre.
    pub r: Vec<f64>,
    /// Mean distance between class centres over unordered pairs.
    pub d: f64,
    /// `Σ R_i / (C·D)`.
    pub gamma: f64,
}

impl fmt::Display for ClusterStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mean_r = self.r.iter().sum::<f64>() / self.r.len().max(1) as f64;
        write!(f, "mean R {:.4}  D {:.4}  gamma {:.4}", mean_r, self.d, self.gamma)
    }
}

/// Inner-class distances, mean inter-centre distance and their ratio over
/// `features` `[N×d]` with labels in `0..C`; every class needs a sample.
pub fn cluster_metrics(features: &Tensor, labels: &[usize], dist: ClusterDistance) -> Result<ClusterStats> {
    let (n, dim) = features.dims2()?;
    if n != labels.len() {
        return Err(Error::Config(format!("{n} features for {} labels", labels.len())));
    }
    let c = labels.iter().max().map_or(0, |m| m + 1);
    if c < 2 {
        return Err(Error::Degenerate(
            "cluster statistics need at least two classes".into(),
        ));
    }
    let mut centers = vec![vec![0.0; dim]; c];
    let mut counts = vec![0usize; c];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, v) in centers[y].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    let missing: Vec<usize> = (0..c).filter(|&k| counts[k] == 0).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    for (center, &m) in centers.iter_mut().zip(&counts) {
        center.iter_mut().for_each(|v| *v /= m as f64);
    }
    let mut r = vec![0.0; c];
    for (i, &y) in labels.iter().enumerate() {
        r[y] += dist.between(features.row(i), &centers[y]);
    }
    for (ri, &m) in r.iter_mut().zip(&counts) {
        *ri /= m as f64;
    }
    let mut total = 0.0;
    for a in 0..c {
        for b in a + 1..c {
            total += dist.between(&centers[a], &centers[b]);
        }
    }
    let d = total / (c * (c - 1) / 2) as f64;
    if d == 0.0 {
        return Err(Error::Degenerate("all class centres coincide".into()));
    }
    let gamma = r.iter().sum::<f64>() / (c as f64 * d);
    Ok(ClusterStats { r, d, gamma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use ShotTag::*;

    #[test]
    fn split_cases() {
        let r = split_accuracy(&[0, 1, 2], &[0, 1, 2], &[Many, Medium, Few]).unwrap();
        assert_eq!((r.overall, r.many, r.medium, r.few), (100.0, Some(100.0), Some(100.0), Some(100.0)));

        let r = split_accuracy(&[0, 1], &[0, 0], &[Few, Many]).unwrap();
        assert_eq!(r.overall, 50.0);
        assert_eq!(r.few, Some(50.0));
        assert_eq!(r.many, None);
        assert_eq!(r.medium, None);
    }

    #[test]
    fn handcrafted_six_samples() {
        // class 0 (many): 2/3, class 1 (medium): 1/1, class 2 (few): 0/2.
        let labels = [0, 0, 0, 1, 2, 2];
        let preds = [0, 0, 1, 1, 0, 1];
        let r = split_accuracy(&preds, &labels, &[Many, Medium, Few]).unwrap();
        assert!((r.overall - 50.0).abs() < 1e-12);
        assert!((r.many.unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.medium, Some(100.0));
        assert_eq!(r.few, Some(0.0));
        // Overall is recoverable from the per-class vector and counts.
        let counts = [3.0, 1.0, 2.0];
        let back: f64 = r.per_class.iter().zip(counts).map(|(a, n)| a.unwrap() * n).sum::<f64>() / 6.0;
        assert!((back - r.overall).abs() < 1e-12);
        assert!(split_accuracy(&[0], &[0, 1], &[Many, Few]).is_err());
    }

    #[test]
    fn knn_cases() {
        let train = Tensor::from_vec([3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.2]);
        let val = Tensor::from_vec([1, 2], vec![0.0, 1.0]);
        assert_eq!(knn_accuracy(&train, &[0, 1, 2], &val, &[1], 1).unwrap(), 100.0);

        let train = Tensor::from_vec([4, 2], vec![1.0, 0.1, 1.0, -0.1, -1.0, 0.1, -1.0, -0.1]);
        let val = Tensor::from_vec([2, 2], vec![2.0, 0.0, -3.0, 0.0]);
        assert_eq!(knn_accuracy(&train, &[0, 0, 1, 1], &val, &[0, 1], 2).unwrap(), 100.0);
        assert!(knn_accuracy(&Tensor::zeros([0, 2]), &[], &val, &[0, 1], 2).is_err());
        assert!(knn_accuracy(&train, &[0, 0, 1, 1], &val, &[0, 1], 0).is_err());
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = stream(3, 0);
        let (n, m, d, c, k) = (50, 20, 5, 4, 7);
        let mut draw = |rows: usize| Tensor::from_vec([rows, d], (0..rows * d).map(|_| rng.random::<f64>() - 0.5).collect());
        let (tr, va) = (draw(n), draw(m));
        let tl: Vec<usize> = (0..n).map(|i| i % c).collect();
        let vl: Vec<usize> = (0..m).map(|i| (i * 3) % c).collect();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut correct = 0;
        for i in 0..m {
            let mut used = vec![false; n];
            let mut votes = vec![0; c];
            for _ in 0..k {
                let mut best: Option<usize> = None;
                for j in 0..n {
                    if !used[j] && best.is_none_or(|b| cos(va.row(i), tr.row(j)) > cos(va.row(i), tr.row(b))) {
                        best = Some(j);
                    }
                }
                used[best.unwrap()] = true;
                votes[tl[best.unwrap()]] += 1;
            }
            let top = (0..c).fold(0, |b, x| if votes[x] > votes[b] { x } else { b });
            correct += usize::from(top == vl[i]);
        }
        let expect = 100.0 * correct as f64 / m as f64;
        assert!((knn_accuracy(&tr, &tl, &va, &vl, k).unwrap() - expect).abs() < 1e-12);
        // Cosine votes ignore per-vector scale.
        let scaled = Tensor::from_vec([m, d], (0..m * d).map(|i| va.data()[i] * (1 + i / d) as f64).collect());
        assert_eq!(knn_accuracy(&tr, &tl, &scaled, &vl, k).unwrap(), expect);
    }

    #[test]
    fn cluster_cases() {
        let at_centres = Tensor::from_vec([4, 2], vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 2.0, 0.0]);
        let s = cluster_metrics(&at_centres, &[0, 0, 1, 1], ClusterDistance::Euclidean).unwrap();
        assert_eq!(s.r, vec![0.0, 0.0]);
        assert_eq!(s.gamma, 0.0);

        let spread = Tensor::from_vec([4, 2], vec![0.0, 1.0, 0.0, -1.0, 2.0, 1.0, 2.0, -1.0]);
        let s = cluster_metrics(&spread, &[0, 0, 1, 1], ClusterDistance::Euclidean).unwrap();
        assert_eq!(s.d, 2.0);
        assert_eq!(s.r, vec![1.0, 1.0]);
        assert_eq!(s.gamma, 0.5);

        assert!(cluster_metrics(&spread, &[0, 0, 0, 0], ClusterDistance::Euclidean).is_err());
        assert!(matches!(
            cluster_metrics(&spread, &[0, 0, 2, 2], ClusterDistance::Euclidean),
            Err(Error::MissingClasses(m)) if m == vec![1]
        ));
    }

    #[test]
    fn cluster_matches_double_loop_and_is_rigid_invariant() {
        let mut rng = stream(5, 0);
        let (n, d) = (30, 4);
        let x = Tensor::from_vec([n, d], (0..n * d).map(|_| rng.random::<f64>()).collect());
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let s = cluster_metrics(&x, &labels, ClusterDistance::Euclidean).unwrap();

        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let mut centers = vec![vec![0.0; d]; 3];
        for c in 0..3 {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            for k in 0..d {
                centers[c][k] = members.iter().map(|&i| x.row(i)[k]).sum::<f64>() / members.len() as f64;
            }
            let r: f64 = members.iter().map(|&i| dist(x.row(i), &centers[c])).sum::<f64>() / members.len() as f64;
            assert!((s.r[c] - r).abs() < 1e-12);
        }
        let dd = (dist(&centers[0], &centers[1]) + dist(&centers[0], &centers[2]) + dist(&centers[1], &centers[2])) / 3.0;
        assert!((s.d - dd).abs() < 1e-12);

        // Rotate the first two axes, translate and scale uniformly.
        let (cs, sn) = (0.6, 0.8);
        let moved = Tensor::from_vec(
            [n, d],
            (0..n)
                .flat_map(|i| {
                    let r = x.row(i);
                    let mut v = vec![cs * r[0] - sn * r[1], sn * r[0] + cs * r[1], r[2], r[3]];
                    v.iter_mut().for_each(|e| *e = 3.0 * *e + 1.5);
                    v
                })
                .collect(),
        );
        let t = cluster_metrics(&moved, &labels, ClusterDistance::Euclidean).unwrap();
        assert!((t.gamma - s.gamma).abs() < 1e-12);
    }
}
