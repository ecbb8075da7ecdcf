//! Synthetic upstream/downstream dataset generation with controllable
//! difficulty, plus parametric label-preserving domain shifts.
//!
//! Classes are smooth low-frequency prototype patterns plus per-sample
//! Gaussian pixel noise. Downstream classes perturb their upstream
//! parent's prototype by a sub-pattern at one fifth of the parent
//! amplitude, so `separation` controls the coarse margin and the
//! fine-grained margin shrinks with it.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

const PARENT_AMP: f64 = 0.35;
const CHILD_RATIO: f64 = 0.2;
const PATTERN_MODES: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_classes_upstream: usize,
    pub num_classes_downstream: usize,
    /// Downstream class -> upstream parent. None derives contiguous groups.
    #[serde(default)]
    pub class_tree: Option<Vec<usize>>,
    /// Margin scale between class prototypes; higher is easier.
    pub separation: f64,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub noise_std: f64,
    /// Training samples per downstream class (test and upstream sets use
    /// the same count, from disjoint seed streams).
    pub samples_per_class: usize,
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes_upstream == 0 || self.num_classes_downstream == 0 {
            return Err(Error::Config("task class counts must be positive".into()));
        }
        if self.separation < 0.0 {
            return Err(Error::Config("task.separation must be >= 0".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("task.noise_std must be >= 0".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("task.samples_per_class must be positive".into()));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("task image dimensions must be positive".into()));
        }
        if let Some(tree) = &self.class_tree {
            if tree.len() != self.num_classes_downstream {
                return Err(Error::Config(format!(
                    "task.class_tree has {} entries, expected {}",
                    tree.len(),
                    self.num_classes_downstream
                )));
            }
            if let Some(&bad) = tree.iter().find(|&&p| p >= self.num_classes_upstream) {
                return Err(Error::Config(format!(
                    "task.class_tree parent {bad} out of range"
                )));
            }
        }
        Ok(())
    }

    /// The parent map, deriving contiguous groups when unspecified.
    pub fn tree(&self) -> Vec<usize> {
        if let Some(tree) = &self.class_tree {
            return tree.clone();
        }
        let (up, down) = (self.num_classes_upstream, self.num_classes_downstream);
        (0..down).map(|c| c * up / down).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<(Tensor, usize)>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A by-index subset (used for fixed evaluation pools).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug)]
pub struct SyntheticTask {
    pub upstream: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub class_tree: Vec<usize>,
    pub warnings: Vec<String>,
}

/// A smooth random pattern in [-1, 1]: a few low-frequency cosine modes.
fn prototype_pattern(size: usize, channels: usize, r: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; channels * size * size];
    for c in 0..channels {
        let mut norm = 0.0;
        let modes: Vec<(f64, f64, f64, f64)> = (0..PATTERN_MODES)
            .map(|_| {
                let fx = r.gen_range(0..3) as f64;
                let fy = r.gen_range(0..3) as f64;
                let amp: f64 = r.gen_range(-1.0..1.0);
                let phase = r.gen_range(0.0..std::f64::consts::TAU);
                norm += amp.abs();
                (fx, fy, amp, phase)
            })
            .collect();
        let norm = norm.max(1e-12);
        for y in 0..size {
            for x in 0..size {
                let mut v = 0.0;
                for &(fx, fy, amp, phase) in &modes {
                    let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64)
                        / size as f64
                        + phase;
                    v += amp * arg.cos();
                }
                out[c * size * size + y * size + x] = v / norm;
            }
        }
    }
    out
}

fn render_sample(
    proto: &[f64],
    noise_std: f64,
    shape: &[usize],
    r: &mut impl Rng,
) -> Result<Tensor> {
    let data = proto
        .iter()
        .map(|&p| {
            let z: f64 = StandardNormal.sample(r);
            (p + noise_std * z).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

fn class_set(
    protos: &[Vec<f64>],
    spec: &TaskSpec,
    per_class: usize,
    stream: &str,
) -> Result<Dataset> {
    let shape = [spec.channels, spec.image_size, spec.image_size];
    let mut samples = Vec::with_capacity(protos.len() * per_class);
    for (class, proto) in protos.iter().enumerate() {
        let mut r = rng::substream(spec.seed, stream, class as u64);
        for _ in 0..per_class {
            samples.push((render_sample(proto, spec.noise_std, &shape, &mut r)?, class));
        }
    }
    Ok(Dataset {
        samples,
        num_classes: protos.len(),
    })
}

/// Generate the upstream set and the downstream train/test split.
/// Degenerate specs (prototypes that coincide) produce warnings, not
/// errors.
pub fn make_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let tree = spec.tree();
    let pixels = spec.channels * spec.image_size * spec.image_size;
    let parent_amp = PARENT_AMP * spec.separation;
    let child_amp = parent_amp * CHILD_RATIO;

    let mut warnings = Vec::new();
    if parent_amp < 1e-9 {
        warnings.push("separation ~ 0: class prototypes coincide; accuracy is chance".into());
    } else if child_amp < 1e-9 && spec.num_classes_downstream > spec.num_classes_upstream {
        warnings.push("sub-prototype amplitude ~ 0: sibling classes coincide".into());
    }

    let mut up_protos = Vec::with_capacity(spec.num_classes_upstream);
    for parent in 0..spec.num_classes_upstream {
        let mut r = rng::substream(spec.seed, "proto-up", parent as u64);
        let pattern = prototype_pattern(spec.image_size, spec.channels, &mut r);
        let proto: Vec<f64> = pattern.iter().map(|&p| 0.5 + parent_amp * p).collect();
        up_protos.push(proto);
    }

    let mut down_protos = Vec::with_capacity(spec.num_classes_downstream);
    for (class, &parent) in tree.iter().enumerate() {
        let mut r = rng::substream(spec.seed, "proto-sub", class as u64);
        let sub = prototype_pattern(spec.image_size, spec.channels, &mut r);
        let proto: Vec<f64> = (0..pixels)
            .map(|i| up_protos[parent][i] + child_amp * sub[i])
            .collect();
        down_protos.push(proto);
    }

    Ok(SyntheticTask {
        upstream: class_set(&up_protos, spec, spec.samples_per_class, "up-train")?,
        train: class_set(&down_protos, spec, spec.samples_per_class, "down-train")?,
        test: class_set(&down_protos, spec, spec.samples_per_class, "down-test")?,
        class_tree: tree,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Identity,
    Invert,
    EdgeSketch,
    StyleNoise,
    Blur,
    Contrast,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 6] = [
        ShiftKind::Identity,
        ShiftKind::Invert,
        ShiftKind::EdgeSketch,
        ShiftKind::StyleNoise,
        ShiftKind::Blur,
        ShiftKind::Contrast,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::Identity => "identity",
            ShiftKind::Invert => "invert",
            ShiftKind::EdgeSketch => "edge_sketch",
            ShiftKind::StyleNoise => "style_noise",
            ShiftKind::Blur => "blur",
            ShiftKind::Contrast => "contrast",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shift kind `{s}`")))
    }
}

/// A label-preserving pixel transform; every kind is the identity at
/// strength 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DomainShift {
    pub kind: ShiftKind,
    pub strength: f64,
}

impl DomainShift {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Config(format!(
                "shift strength {} outside [0, 1]",
                self.strength
            )));
        }
        Ok(())
    }
}

fn image_dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

fn blend(orig: &[f64], alt: &[f64], s: f64) -> Vec<f64> {
    orig.iter()
        .zip(alt)
        .map(|(&o, &a)| ((1.0 - s) * o + s * a).clamp(0.0, 1.0))
        .collect()
}

/// Normalized gradient-magnitude image.
fn edges(data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let mut max = 0.0f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| data[ch * h * w + yy * w + xx];
                let dx = if x + 1 < w { at(y, x + 1) - at(y, x) } else { 0.0 };
                let dy = if y + 1 < h { at(y + 1, x) - at(y, x) } else { 0.0 };
                let g = (dx * dx + dy * dy).sqrt();
                out[ch * h * w + y * w + x] = g;
                max = max.max(g);
            }
        }
    }
    if max > 0.0 {
        for v in &mut out {
            *v /= max;
        }
    }
    out
}

fn box_blur(data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut count = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = y as i64 + dy;
                        let xx = x as i64 + dx;
                        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                            acc += data[ch * h * w + yy as usize * w + xx as usize];
                            count += 1.0;
                        }
                    }
                }
                out[ch * h * w + y * w + x] = acc / count;
            }
        }
    }
    out
}

/// Transform one image. `seed`/`index` only matter for the stochastic
/// style-noise kind, which derives a per-image low-frequency field.
pub fn shift_image(image: &Tensor, shift: &DomainShift, seed: u64, index: u64) -> Result<Tensor> {
    shift.validate()?;
    let s = shift.strength;
    if s == 0.0 {
        // exact identity at strength 0, for every kind
        return Ok(image.clone());
    }
    let (c, h, w) = image_dims(image.shape());
    let data = image.data();
    let out = match shift.kind {
        ShiftKind::Identity => data.to_vec(),
        ShiftKind::Invert => data
            .iter()
            .map(|&v| ((1.0 - s) * v + s * (1.0 - v)).clamp(0.0, 1.0))
            .collect(),
        ShiftKind::EdgeSketch => blend(data, &edges(data, c, h, w), s),
        ShiftKind::StyleNoise => {
            let mut r = rng::substream(seed, "style-noise", index);
            let field = prototype_pattern(h, c, &mut r);
            data.iter()
                .zip(&field)
                .map(|(&v, &f)| (v + s * 0.3 * f).clamp(0.0, 1.0))
                .collect()
        }
        ShiftKind::Blur => blend(data, &box_blur(data, c, h, w), s),
        ShiftKind::Contrast => data
            .iter()
            .map(|&v| (0.5 + (1.0 - s) * (v - 0.5)).clamp(0.0, 1.0))
            .collect(),
    };
    Tensor::from_vec(image.shape().to_vec(), out)
}

/// Transform a whole dataset; labels are untouched.
pub fn apply_shift(dataset: &Dataset, shift: &DomainShift, seed: u64) -> Result<Dataset> {
    let samples = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, (x, y))| Ok((shift_image(x, shift, seed, i as u64)?, *y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        num_classes: dataset.num_classes,
    })
}

/// Write a dataset as a flat little-endian f64 tensor file plus a JSON
/// manifest (shapes, labels, seed) for reproducibility audits.
pub fn export_dataset(ds: &Dataset, dir: &Path, name: &str, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let shape = ds
        .samples
        .first()
        .map(|(t, _)| t.shape().to_vec())
        .ok_or_else(|| Error::Data("cannot export an empty dataset".into()))?;
    let mut bytes = Vec::with_capacity(ds.len() * shape.iter().product::<usize>() * 8);
    for (img, _) in &ds.samples {
        for v in img.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(dir.join(format!("{name}.bin")), bytes)?;
    let manifest = serde_json::json!({
        "count": ds.len(),
        "image_shape": shape,
        "num_classes": ds.num_classes,
        "labels": ds.samples.iter().map(|(_, y)| *y).collect::<Vec<_>>(),
        "seed": seed,
    });
    std::fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn import_dataset(dir: &Path, name: &str) -> Result<Dataset> {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.json")))?)?;
    let shape: Vec<usize> = serde_json::from_value(manifest["image_shape"].clone())?;
    let labels: Vec<usize> = serde_json::from_value(manifest["labels"].clone())?;
    let num_classes: usize = serde_json::from_value(manifest["num_classes"].clone())?;
    let numel: usize = shape.iter().product();
    let bytes = std::fs::read(dir.join(format!("{name}.bin")))?;
    if bytes.len() != labels.len() * numel * 8 {
        return Err(Error::Data(format!(
            "tensor file holds {} bytes, manifest implies {}",
            bytes.len(),
            labels.len() * numel * 8
        )));
    }
    let mut samples = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let data: Vec<f64> = bytes[i * numel * 8..(i + 1) * numel * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        samples.push((Tensor::from_vec(shape.clone(), data)?, label));
    }
    Ok(Dataset {
        samples,
        num_classes,
    })
}

/// Bit-level hash of every sample, for the split-disjointness audit.
pub fn sample_hashes(ds: &Dataset) -> HashSet<u64> {
    ds.samples
        .iter()
        .map(|(img, _)| {
            // FNV-1a over the raw bit patterns
            let mut h: u64 = 0xcbf29ce484222325;
            for v in img.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
            h
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec {
            num_classes_upstream: 3,
            num_classes_downstream: 6,
            class_tree: None,
            separation: 1.0,
            image_size: 8,
            channels: 1,
            noise_std: 0.05,
            samples_per_class: 10,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_task(&spec()).unwrap();
        let b = make_task(&spec()).unwrap();
        for ((xa, ya), (xb, yb)) in a.train.samples.iter().zip(&b.train.samples) {
            assert!(xa.bits_eq(xb));
            assert_eq!(ya, yb);
        }
    }

    #[test]
    fn splits_are_disjoint_by_hash() {
        let task = make_task(&spec()).unwrap();
        let train = sample_hashes(&task.train);
        let test = sample_hashes(&task.test);
        assert_eq!(train.len(), task.train.len());
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn label_marginals_are_uniform() {
        let task = make_task(&spec()).unwrap();
        let mut counts = vec![0usize; task.train.num_classes];
        for (_, y) in &task.train.samples {
            counts[*y] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
    }

    #[test]
    fn derived_tree_groups_children_contiguously() {
        let task = make_task(&spec()).unwrap();
        assert_eq!(task.class_tree, vec![0, 0, 1, 1, 2, 2]);
        // every downstream class has exactly one parent, in range
        assert!(task.class_tree.iter().all(|&p| p < 3));
    }

    #[test]
    fn zero_separation_warns_and_collapses() {
        let mut s = spec();
        s.separation = 0.0;
        s.noise_std = 0.0;
        let task = make_task(&s).unwrap();
        assert!(!task.warnings.is_empty());
        // all prototypes coincide: every sample is the same flat image
        let first = &task.train.samples[0].0;
        for (img, _) in &task.train.samples {
            assert!(img.bits_eq(first));
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let mut s = spec();
        s.separation = 10.0; // saturating amplitude
        s.noise_std = 0.5;
        let task = make_task(&s).unwrap();
        for (img, _) in &task.train.samples {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn strength_zero_is_identity_for_every_kind() {
        let task = make_task(&spec()).unwrap();
        for kind in ShiftKind::ALL {
            let shift = DomainShift { kind, strength: 0.0 };
            let shifted = apply_shift(&task.test, &shift, 11).unwrap();
            for ((a, _), (b, _)) in task.test.samples.iter().zip(&shifted.samples) {
                assert!(a.bits_eq(b), "{kind:?} at strength 0 changed pixels");
            }
        }
    }

    #[test]
    fn invert_at_full_strength_is_an_involution() {
        let task = make_task(&spec()).unwrap();
        let shift = DomainShift { kind: ShiftKind::Invert, strength: 1.0 };
        let once = apply_shift(&task.test, &shift, 0).unwrap();
        let twice = apply_shift(&once, &shift, 0).unwrap();
        for ((a, _), (b, _)) in task.test.samples.iter().zip(&twice.samples) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shifts_preserve_labels_and_range() {
        let task = make_task(&spec()).unwrap();
        for kind in ShiftKind::ALL {
            let shift = DomainShift { kind, strength: 0.7 };
            let shifted = apply_shift(&task.test, &shift, 5).unwrap();
            for ((_, ya), (img, yb)) in task.test.samples.iter().zip(&shifted.samples) {
                assert_eq!(ya, yb);
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn style_noise_is_deterministic_per_seed() {
        let task = make_task(&spec()).unwrap();
        let shift = DomainShift { kind: ShiftKind::StyleNoise, strength: 0.6 };
        let a = apply_shift(&task.test, &shift, 9).unwrap();
        let b = apply_shift(&task.test, &shift, 9).unwrap();
        let c = apply_shift(&task.test, &shift, 10).unwrap();
        assert!(a.samples[0].0.bits_eq(&b.samples[0].0));
        assert!(!a.samples[0].0.bits_eq(&c.samples[0].0));
    }

    #[test]
    fn export_import_roundtrip_is_exact() {
        let task = make_task(&spec()).unwrap();
        let dir = std::env::temp_dir().join("ftlab-data-test");
        export_dataset(&task.test, &dir, "test", 7).unwrap();
        let back = import_dataset(&dir, "test").unwrap();
        assert_eq!(back.len(), task.test.len());
        for ((a, ya), (b, yb)) in task.test.samples.iter().zip(&back.samples) {
            assert!(a.bits_eq(b));
            assert_eq!(ya, yb);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec();
        s.class_tree = Some(vec![0, 0, 0]);
        assert!(make_task(&s).is_err()); // wrong length
        let mut s = spec();
        s.class_tree = Some(vec![9, 0, 0, 0, 0, 0]);
        assert!(make_task(&s).is_err()); // parent out of range
        let mut s = spec();
        s.samples_per_class = 0;
        assert!(make_task(&s).is_err());
    }
}
