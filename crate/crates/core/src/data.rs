//! Synthetic two-domain benchmark: a balanced source domain for pretraining
//! and a long-tailed, visually shifted target domain, plus the samplers and
//! the binary dataset format.
//!
//! Images are assembled from a shared bank of quadrant "parts". Source and
//! target classes pick different part combinations, so a backbone pretrained
//! on the source learns reusable part detectors but has never seen a target
//! class. The target is further rendered with a fixed contrast, brightness and
//! texture offset, which opens a domain gap.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::{BatchKind, ClassCounts};
use crate::rng::{stream, StreamRng};

pub const LTDS_MAGIC: &[u8; 4] = b"LTDS";
pub const LTDS_VERSION: u32 = 1;

const PURPOSE_PARTS: u64 = 1;
const PURPOSE_TARGET_CLASSES: u64 = 2;
const PURPOSE_TARGET_SAMPLES: u64 = 3;
const PURPOSE_SOURCE_CLASSES: u64 = 4;
const PURPOSE_SOURCE_SAMPLES: u64 = 5;
const PURPOSE_SHIFT: u64 = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    /// Target classes C.
    pub classes: usize,
    /// Training images of the largest target class.
    pub n_max: usize,
    /// Imbalance ratio ρ = n_max / n_min.
    pub imbalance: f64,
    /// Target validation images per class.
    pub val_per_class: usize,
    pub source_classes: usize,
    pub source_per_class: usize,
    pub source_val_per_class: usize,
    pub image: usize,
    pub channels: usize,
    /// Number of quadrant patterns in the shared part bank.
    pub parts: usize,
    /// Amplitude of the class-specific detail added to each prototype.
    pub class_detail: f64,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    /// Strength of the target rendering offset; 0 renders like the source.
    pub domain_shift: f64,
    /// Target sub-domains, each with its own rendering offset; class `c`
    /// belongs to sub-domain `c mod S`.
    pub subdomains: usize,
    /// Seeds the part bank, the target classes and the target samples.
    pub seed: u64,
    /// Seeds the source classes and samples.
    pub source_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 30,
            n_max: 100,
            imbalance: 100.0,
            val_per_class: 20,
            source_classes: 30,
            source_per_class: 40,
            source_val_per_class: 10,
            image: 8,
            channels: 1,
            parts: 6,
            class_detail: 0.3,
            noise: 0.8,
            domain_shift: 1.0,
            subdomains: 1,
            seed: 0,
            source_seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.classes == 0 || self.n_max == 0 || self.source_classes == 0 {
            return bad("class counts and n_max must be positive");
        }
        if !(self.imbalance >= 1.0) {
            return bad("imbalance ratio must be at least 1");
        }
        if self.image == 0 || self.image % 2 != 0 || self.channels == 0 {
            return bad("image side must be positive and even; channels positive");
        }
        if self.subdomains == 0 {
            return bad("at least one target sub-domain is required");
        }
        if self.parts == 0 || self.source_per_class == 0 {
            return bad("part bank and source classes must be nonempty");
        }
        if self.noise < 0.0 || self.class_detail < 0.0 || self.domain_shift < 0.0 {
            return bad("noise, detail and shift must be nonnegative");
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image * self.image * self.channels
    }

    /// `n_i = round(n_max · ρ^{−i/(C−1)})` for zero-based class `i`.
    pub fn train_counts(&self) -> Vec<usize> {
        let c = self.classes;
        (0..c)
            .map(|i| {
                let frac = if c > 1 { i as f64 / (c - 1) as f64 } else { 0.0 };
                let n = (self.n_max as f64 * self.imbalance.powf(-frac)).round() as usize;
                n.max(1)
            })
            .collect()
    }
}

/// Images (row-major `H×W×ch`, f32) and labels of one split.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Split {
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongTailDataset {
    classes: usize,
    image: usize,
    channels: usize,
    train: Split,
    val: Split,
    by_class: Vec<Vec<usize>>,
}

impl LongTailDataset {
    pub fn new(classes: usize, image: usize, channels: usize, train: Split, val: Split) -> Result<Self> {
        let pixels = image * image * channels;
        for (name, s) in [("train", &train), ("val", &val)] {
            if s.images.len() != s.labels.len() * pixels {
                return Err(Error::Config(format!(
                    "{name} split holds {} pixels for {} labels of {pixels} pixels",
                    s.images.len(),
                    s.labels.len()
                )));
            }
            if let Some(&bad) = s.labels.iter().find(|&&y| y as usize >= classes) {
                return Err(Error::Config(format!("{name} label {bad} out of range")));
            }
        }
        let mut by_class = vec![Vec::new(); classes];
        for (i, &y) in train.labels.iter().enumerate() {
            by_class[y as usize].push(i);
        }
        Ok(Self {
            classes,
            image,
            channels,
            train,
            val,
            by_class,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_side(&self) -> usize {
        self.image
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.image * self.image * self.channels
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
        }
    }

    pub fn train(&self) -> &Split {
        &self.train
    }

    pub fn val(&self) -> &Split {
        &self.val
    }

    pub fn image(&self, kind: SplitKind, i: usize) -> &[f32] {
        let p = self.pixels();
        &self.split(kind).images[i * p..(i + 1) * p]
    }

    pub fn label(&self, kind: SplitKind, i: usize) -> usize {
        self.split(kind).labels[i] as usize
    }

    /// Training indices of each class.
    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.by_class
    }

    pub fn train_counts(&self) -> Vec<usize> {
        self.by_class.iter().map(Vec::len).collect()
    }

    pub fn val_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.classes];
        for &y in &self.val.labels {
            out[y as usize] += 1;
        }
        out
    }

    /// Training counts as [`ClassCounts`]; fails listing every empty class.
    pub fn class_counts(&self) -> Result<ClassCounts> {
        ClassCounts::new(self.train_counts())
    }
}

/// Shared "world" from which both domains are rendered.
struct World {
    parts: Vec<Vec<f64>>,
    quadrant: usize,
}

impl World {
    fn new(spec: &DatasetSpec) -> Self {
        let quadrant = spec.image / 2;
        let mut rng = stream(spec.seed, PURPOSE_PARTS);
        let parts = (0..spec.parts)
            .map(|_| smooth_pattern(&mut rng, quadrant, spec.channels))
            .collect();
        Self { parts, quadrant }
    }

    /// Class prototypes: one distinct part per quadrant plus fine detail.
    fn prototypes(&self, spec: &DatasetSpec, classes: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
        let n_parts = self.parts.len();
        let combos = n_parts.pow(4);
        let mut used = std::collections::HashSet::new();
        (0..classes)
            .map(|_| {
                let combo = loop {
                    let pick: [usize; 4] = std::array::from_fn(|_| rng.random_range(0..n_parts));
                    if used.len() >= combos || used.insert(pick) {
                        break pick;
                    }
                };
                let mut img = vec![0.0; spec.pixels()];
                for (q, &part) in combo.iter().enumerate() {
                    self.paste(&mut img, spec, q, &self.parts[part]);
                }
                for v in &mut img {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += spec.class_detail * z;
                }
                img
            })
            .collect()
    }

    fn paste(&self, img: &mut [f64], spec: &DatasetSpec, quadrant: usize, part: &[f64]) {
        let (qy, qx) = (quadrant / 2, quadrant % 2);
        let s = self.quadrant;
        let ch = spec.channels;
        for y in 0..s {
            for x in 0..s {
                for c in 0..ch {
                    let (iy, ix) = (qy * s + y, qx * s + x);
                    img[(iy * spec.image + ix) * ch + c] = part[(y * s + x) * ch + c];
                }
            }
        }
    }
}

/// Unit-variance Gaussian field blurred by a 3×3 box filter and rescaled.
fn smooth_pattern(rng: &mut StreamRng, side: usize, ch: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..side * side * ch).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = vec![0.0; raw.len()];
    for y in 0..side {
        for x in 0..side {
            for c in 0..ch {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < side && (xx as usize) < side {
                            acc += raw[((yy as usize) * side + xx as usize) * ch + c];
                            n += 1.0;
                        }
                    }
                }
                out[(y * side + x) * ch + c] = acc / n;
            }
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64)
        .sqrt()
        .max(1e-12);
    out.iter().map(|v| (v - mean) / sd).collect()
}

/// Fixed pixel-space rendering offset of the target domain.
struct Shift {
    contrast: f64,
    brightness: f64,
    texture: Vec<f64>,
}

impl Shift {
    fn new(spec: &DatasetSpec, subdomain: usize) -> Self {
        let mut rng = stream(spec.seed, PURPOSE_SHIFT + 16 * subdomain as u64);
        let s = spec.domain_shift;
        let texture = smooth_pattern(&mut rng, spec.image, spec.channels)
            .into_iter()
            .map(|v| 0.5 * s * v)
            .collect();
        Self {
            contrast: 1.0 - 0.4 * s.min(2.0),
            brightness: 0.3 * s,
            texture,
        }
    }

    fn apply(&self, img: &mut [f64]) {
        for (v, t) in img.iter_mut().zip(&self.texture) {
            *v = self.contrast * *v + self.brightness + t;
        }
    }
}

fn render(
    protos: &[Vec<f64>],
    counts: &[usize],
    noise: f64,
    shifts: &[Shift],
    rng: &mut StreamRng,
) -> Split {
    let mut split = Split::default();
    for (c, (proto, &n)) in protos.iter().zip(counts).enumerate() {
        for _ in 0..n {
            let mut img: Vec<f64> = proto
                .iter()
                .map(|p| {
                    let z: f64 = StandardNormal.sample(rng);
                    p + noise * z
                })
                .collect();
            if !shifts.is_empty() {
                shifts[c % shifts.len()].apply(&mut img);
            }
            split.images.extend(img.iter().map(|&v| v as f32));
            split.labels.push(c as u32);
        }
    }
    split
}

/// Balanced source domain and long-tailed target domain.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(LongTailDataset, LongTailDataset)> {
    spec.validate()?;
    let world = World::new(spec);

    let mut src_rng = stream(spec.source_seed, PURPOSE_SOURCE_CLASSES);
    let src_protos = world.prototypes(spec, spec.source_classes, &mut src_rng);
    let mut src_rng = stream(spec.source_seed, PURPOSE_SOURCE_SAMPLES);
    let src_train = render(
        &src_protos,
        &vec![spec.source_per_class; spec.source_classes],
        spec.noise,
        &[],
        &mut src_rng,
    );
    let src_val = render(
        &src_protos,
        &vec![spec.source_val_per_class; spec.source_classes],
        spec.noise,
        &[],
        &mut src_rng,
    );
    let source = LongTailDataset::new(spec.source_classes, spec.image, spec.channels, src_train, src_val)?;

    let mut tgt_rng = stream(spec.seed, PURPOSE_TARGET_CLASSES);
    let tgt_protos = world.prototypes(spec, spec.classes, &mut tgt_rng);
    let shifts: Vec<Shift> = (0..spec.subdomains).map(|k| Shift::new(spec, k)).collect();
    let mut tgt_rng = stream(spec.seed, PURPOSE_TARGET_SAMPLES);
    let train = render(&tgt_protos, &spec.train_counts(), spec.noise, &shifts, &mut tgt_rng);
    let val = render(
        &tgt_protos,
        &vec![spec.val_per_class; spec.classes],
        spec.noise,
        &shifts,
        &mut tgt_rng,
    );
    let target = LongTailDataset::new(spec.classes, spec.image, spec.channels, train, val)?;
    Ok((source, target))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShotTag {
    Many,
    Medium,
    Few,
}

impl ShotTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShotTag::Many => "many",
            ShotTag::Medium => "medium",
            ShotTag::Few => "few",
        }
    }
}

/// `n ≥ many` is many-shot, `n ≤ few` is few-shot, anything between is medium.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShotThresholds {
    pub many: usize,
    pub few: usize,
}

impl ShotThresholds {
    /// The 100/20 thresholds scaled linearly with the largest class size.
    pub fn scaled(n_max: usize) -> Self {
        Self {
            many: n_max,
            few: ((n_max as f64) / 5.0).round() as usize,
        }
    }
}

impl Default for ShotThresholds {
    fn default() -> Self {
        Self { many: 100, few: 20 }
    }
}

pub fn shot_split(counts: &[usize], t: ShotThresholds) -> Result<Vec<ShotTag>> {
    if t.few >= t.many {
        return Err(Error::Config(format!(
            "few-shot threshold {} must be below many-shot threshold {}",
            t.few, t.many
        )));
    }
    Ok(counts
        .iter()
        .map(|&n| {
            if n >= t.many {
                ShotTag::Many
            } else if n <= t.few {
                ShotTag::Few
            } else {
                ShotTag::Medium
            }
        })
        .collect())
}

fn ensure_nonempty(ds: &LongTailDataset, batch: usize) -> Result<()> {
    if ds.train().is_empty() {
        return Err(Error::Degenerate("cannot sample from an empty training split".into()));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(())
}

/// Classes uniformly with replacement, then one instance uniformly within each.
pub fn class_balanced_batch(ds: &LongTailDataset, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    ensure_nonempty(ds, batch)?;
    let present: Vec<&Vec<usize>> = ds.class_index().iter().filter(|v| !v.is_empty()).collect();
    Ok((0..batch)
        .map(|_| {
            let members = present[rng.random_range(0..present.len())];
            members[rng.random_range(0..members.len())]
        })
        .collect())
}

/// Uniform over training instances.
pub fn instance_balanced_batch(ds: &LongTailDataset, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    ensure_nonempty(ds, batch)?;
    let n = ds.train().len();
    Ok((0..batch).map(|_| rng.random_range(0..n)).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub kind: BatchKind,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPair {
    pub instance: Batch,
    pub balanced: Batch,
}

impl BatchPair {
    pub fn iter(&self) -> impl Iterator<Item = &Batch> {
        [&self.instance, &self.balanced].into_iter()
    }
}

/// One instance-balanced then one class-balanced batch from the same stream.
pub fn dual_sample(ds: &LongTailDataset, batch: usize, rng: &mut impl Rng) -> Result<BatchPair> {
    let instance = instance_balanced_batch(ds, batch, rng)?;
    let balanced = class_balanced_batch(ds, batch, rng)?;
    Ok(BatchPair {
        instance: Batch {
            kind: BatchKind::Instance,
            indices: instance,
        },
        balanced: Batch {
            kind: BatchKind::Balanced,
            indices: balanced,
        },
    })
}

/// A shuffled pass over the training split in batches, used for pretraining.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

impl LongTailDataset {
    /// LTDS encoding: magic, version, `C`, image height, width and channels,
    /// train counts and val counts per class (u32 each), the sample count,
    /// then all train-then-val pixels as f32 and labels as u32, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * (self.train.images.len() + self.val.images.len()));
        out.extend_from_slice(LTDS_MAGIC);
        let put = |v: u32, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
        put(LTDS_VERSION, &mut out);
        put(self.classes as u32, &mut out);
        put(self.image as u32, &mut out);
        put(self.image as u32, &mut out);
        put(self.channels as u32, &mut out);
        for n in self.train_counts() {
            put(n as u32, &mut out);
        }
        for n in self.val_counts() {
            put(n as u32, &mut out);
        }
        put(self.train.len() as u32, &mut out);
        put(self.val.len() as u32, &mut out);
        for s in [&self.train, &self.val] {
            for v in &s.images {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in [&self.train, &self.val] {
            for y in &s.labels {
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != LTDS_MAGIC {
            return Err("bad magic".into());
        }
        let version = cur.u32()?;
        if version != LTDS_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let classes = cur.u32()? as usize;
        let (h, w, ch) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
        if h != w {
            return Err(format!("non-square images {h}×{w}"));
        }
        let train_counts: Vec<usize> = (0..classes).map(|_| cur.u32().map(|v| v as usize)).collect::<std::result::Result<_, _>>()?;
        let val_counts: Vec<usize> = (0..classes).map(|_| cur.u32().map(|v| v as usize)).collect::<std::result::Result<_, _>>()?;
        let n_train = cur.u32()? as usize;
        let n_val = cur.u32()? as usize;
        let pixels = h * w * ch;
        let read_px = |n: usize, cur: &mut Cursor| -> std::result::Result<Vec<f32>, String> {
            let raw = cur.take(n * pixels * 4)?;
            Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
        };
        let train_px = read_px(n_train, &mut cur)?;
        let val_px = read_px(n_val, &mut cur)?;
        let read_labels = |n: usize, cur: &mut Cursor| -> std::result::Result<Vec<u32>, String> {
            (0..n).map(|_| cur.u32()).collect()
        };
        let train_labels = read_labels(n_train, &mut cur)?;
        let val_labels = read_labels(n_val, &mut cur)?;
        if cur.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
        }
        let ds = LongTailDataset::new(
            classes,
            h,
            ch,
            Split {
                images: train_px,
                labels: train_labels,
            },
            Split {
                images: val_px,
                labels: val_labels,
            },
        )
        .map_err(|e| e.to_string())?;
        if ds.train_counts() != train_counts || ds.val_counts() != val_counts {
            return Err("per-class counts disagree with labels".into());
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::corrupt(path, reason))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            classes: 6,
            n_max: 20,
            imbalance: 10.0,
            val_per_class: 3,
            source_classes: 4,
            source_per_class: 5,
            source_val_per_class: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn profile_endpoints() {
        let spec = DatasetSpec::default();
        let n = spec.train_counts();
        assert_eq!(n[0], 100);
        assert_eq!(n[29], 1);
        assert!(n.windows(2).all(|w| w[0] >= w[1]));
        let flat = DatasetSpec {
            imbalance: 1.0,
            ..spec
        };
        assert!(flat.train_counts().iter().all(|&c| c == 100));
    }

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let spec = small_spec();
        let (s1, t1) = generate_dataset(&spec).unwrap();
        let (s2, t2) = generate_dataset(&spec).unwrap();
        assert_eq!(t1.to_bytes(), t2.to_bytes());
        assert_eq!(s1.to_bytes(), s2.to_bytes());
        assert_eq!(t1.train_counts(), spec.train_counts());
        assert_eq!(t1.val_counts(), vec![3; 6]);
        assert_eq!(s1.train_counts(), vec![5; 4]);
    }

    #[test]
    fn source_seed_leaves_target_unchanged() {
        let spec = small_spec();
        let (s1, t1) = generate_dataset(&spec).unwrap();
        let (s2, t2) = generate_dataset(&DatasetSpec {
            source_seed: 9,
            ..spec
        })
        .unwrap();
        assert_eq!(t1, t2);
        assert_ne!(s1, s2);
    }

    #[test]
    fn ltds_round_trip_and_corruption() {
        let (_, t) = generate_dataset(&small_spec()).unwrap();
        let bytes = t.to_bytes();
        let back = LongTailDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes(), bytes);
        assert!(LongTailDataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(LongTailDataset::from_bytes(&bad).is_err());
    }

    #[test]
    fn shot_boundaries() {
        let t = ShotThresholds::default();
        assert_eq!(
            shot_split(&[100, 20, 50, 101, 21, 1], t).unwrap(),
            vec![
                ShotTag::Many,
                ShotTag::Few,
                ShotTag::Medium,
                ShotTag::Many,
                ShotTag::Medium,
                ShotTag::Few
            ]
        );
        assert_eq!(ShotThresholds::scaled(100), t);
        assert!(shot_split(&[1], ShotThresholds { many: 5, few: 5 }).is_err());
    }

    #[test]
    fn samplers_are_reproducible_and_in_split() {
        let (_, t) = generate_dataset(&small_spec()).unwrap();
        let a = dual_sample(&t, 16, &mut stream(4, 0)).unwrap();
        let b = dual_sample(&t, 16, &mut stream(4, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.instance.kind, BatchKind::Instance);
        assert_eq!(a.balanced.kind, BatchKind::Balanced);
        for batch in a.iter() {
            assert_eq!(batch.indices.len(), 16);
            assert!(batch.indices.iter().all(|&i| i < t.train().len()));
        }
    }

    #[test]
    fn single_class_balanced_batch() {
        let ds = LongTailDataset::new(
            3,
            2,
            1,
            Split {
                images: vec![0.0; 8],
                labels: vec![2, 2],
            },
            Split::default(),
        )
        .unwrap();
        let b = class_balanced_batch(&ds, 10, &mut stream(0, 0)).unwrap();
        assert!(b.iter().all(|&i| ds.label(SplitKind::Train, i) == 2));
        let empty = LongTailDataset::new(2, 2, 1, Split::default(), Split::default()).unwrap();
        assert!(instance_balanced_batch(&empty, 4, &mut stream(0, 0)).is_err());
    }
}
