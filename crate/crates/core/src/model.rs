//! Toy vision transformer: patch embedding, pre-norm attention/FFN blocks
//! with residuals, class-token readout. Hosts the fine-tuning attachments
//! and provides the training step used by the tracking loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AttackTarget;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::peft::{AdapterPlace, AdapterSite, Ia3Slot, PeftAttachment, PeftSpec, Site};
use crate::rng;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of transformer blocks.
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub num_classes: usize,
    pub ffn_ratio: usize,
}

fn default_channels() -> usize {
    1
}

impl Default for ModelConfig {
    /// Desk-scale default: minutes-scale runs, deep enough that peripheral
    /// vs. intermediate layers are distinct.
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            embed_dim: 64,
            heads: 4,
            patch_size: 4,
            image_size: 16,
            channels: 1,
            num_classes: 2,
            ffn_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
            ("ffn_ratio", self.ffn_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.embed_dim ({}) must be divisible by heads ({})",
                self.embed_dim, self.heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "model.image_size ({}) must be divisible by patch_size ({})",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_ratio * self.embed_dim
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Ordered name -> tensor store for model and attachment parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Params { map }
    }
}

/// Every parameter name and shape implied by a config, in name order.
pub fn census(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let h = cfg.ffn_hidden();
    let mut out = vec![
        ("cls".to_string(), vec![1, d]),
        ("head.b".to_string(), vec![cfg.num_classes]),
        ("head.w".to_string(), vec![d, cfg.num_classes]),
        ("patch.b".to_string(), vec![d]),
        ("patch.w".to_string(), vec![cfg.patch_dim(), d]),
    ];
    for i in 0..cfg.depth {
        let p = format!("block{i}");
        out.push((format!("{p}.attn.wk"), vec![d, d]));
        out.push((format!("{p}.attn.wo"), vec![d, d]));
        out.push((format!("{p}.attn.wq"), vec![d, d]));
        out.push((format!("{p}.attn.wv"), vec![d, d]));
        out.push((format!("{p}.ffn.b1"), vec![h]));
        out.push((format!("{p}.ffn.b2"), vec![d]));
        out.push((format!("{p}.ffn.w1"), vec![d, h]));
        out.push((format!("{p}.ffn.w2"), vec![h, d]));
        out.push((format!("{p}.ln1.b"), vec![d]));
        out.push((format!("{p}.ln1.g"), vec![d]));
        out.push((format!("{p}.ln2.b"), vec![d]));
        out.push((format!("{p}.ln2.g"), vec![d]));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Bias terms in the sense of bias-only fine-tuning.
pub fn is_bias(name: &str) -> bool {
    name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2")
}

fn is_gain_like(name: &str) -> bool {
    name.ends_with(".g")
}

/// Truncated normal draw: std 0.02, resampled outside two standard
/// deviations.
pub fn trunc_normal(r: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(r);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fresh parameters: truncated-normal weights (std 0.02), zero biases,
/// unit layer-norm gains.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "model-init");
    let mut params = Params::new();
    for (name, shape) in census(cfg) {
        let numel: usize = shape.iter().product();
        let t = if is_bias(&name) {
            Tensor::zeros(shape)
        } else if is_gain_like(&name) {
            Tensor::ones(shape)
        } else {
            let data = (0..numel).map(|_| trunc_normal(&mut r, 0.02)).collect();
            Tensor::from_vec(shape, data)?
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Check a parameter store against the census.
pub fn validate_params(cfg: &ModelConfig, params: &Params) -> Result<()> {
    let expected = census(cfg);
    if params.len() != expected.len() {
        return Err(Error::Contract(format!(
            "parameter store has {} tensors, census expects {}",
            params.len(),
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let t = params.get(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Contract(format!(
                "parameter `{name}` has shape {:?}, census expects {:?}",
                t.shape(),
                shape
            )));
        }
    }
    Ok(())
}

/// Flat-index map realizing patch extraction: row per patch in raster
/// order, each row the patch's pixels channel-major.
pub fn patch_map(cfg: &ModelConfig) -> Vec<usize> {
    let (s, ps, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let side = s / ps;
    let mut map = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..side {
        for px in 0..side {
            for ch in 0..c {
                for dy in 0..ps {
                    for dx in 0..ps {
                        map.push(ch * s * s + (py * ps + dy) * s + (px * ps + dx));
                    }
                }
            }
        }
    }
    map
}

/// Split an image into flattened patches.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let expect = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: expect.to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    let map = patch_map(cfg);
    let data = map.iter().map(|&i| image.data()[i]).collect();
    Tensor::from_vec(vec![cfg.num_patches(), cfg.patch_dim()], data)
}

/// Multi-head self-attention on a bare sequence, used directly by tests;
/// the training path builds the same graph through [`GraphBuilder`].
pub fn attention(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let q = {
        let w = tape.constant(wq.clone());
        tape.matmul(xv, w)?
    };
    let k = {
        let w = tape.constant(wk.clone());
        tape.matmul(xv, w)?
    };
    let v = {
        let w = tape.constant(wv.clone());
        tape.matmul(xv, w)?
    };
    let merged = attention_heads(&mut tape, q, k, v, heads)?;
    let wov = tape.constant(wo.clone());
    let out = tape.matmul(merged, wov)?;
    Ok(tape.value(out).clone())
}

/// Scaled dot-product attention per head, concatenated.
fn attention_heads(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = tape.value(q).shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let weights = tape.softmax(scaled, 1)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    tape.concat_cols(&outs)
}

/// Builds the forward graph for a batch, inserting every parameter (base
/// and attachment) exactly once as a leaf.
pub struct GraphBuilder<'a> {
    pub tape: Tape,
    cfg: &'a ModelConfig,
    leaves: BTreeMap<String, Var>,
    peft: Option<&'a PeftAttachment>,
}

impl<'a> GraphBuilder<'a> {
    pub fn new(
        cfg: &'a ModelConfig,
        params: &Params,
        peft: Option<&'a PeftAttachment>,
        trainable: Option<&BTreeSet<String>>,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let mut leaves = BTreeMap::new();
        let wants = |name: &str| trainable.map_or(false, |set| set.contains(name));
        for (name, t) in params.iter() {
            let var = tape.leaf(t.clone().requires_grad(wants(name)));
            leaves.insert(name.clone(), var);
        }
        if let Some(att) = peft {
            for (name, t) in att.extras.iter() {
                let var = tape.leaf(t.clone().requires_grad(wants(name)));
                leaves.insert(name.clone(), var);
            }
        }
        Ok(GraphBuilder {
            tape,
            cfg,
            leaves,
            peft,
        })
    }

    pub fn leaf(&self, name: &str) -> Result<Var> {
        self.leaves
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no leaf for parameter `{name}`")))
    }

    pub fn leaves(&self) -> &BTreeMap<String, Var> {
        &self.leaves
    }

    /// Insert one image as a leaf and run it to a `[1, classes]` logits row.
    pub fn logits_for_image(&mut self, image: &Tensor, input_grad: bool) -> Result<(Var, Var)> {
        let expect = [self.cfg.channels, self.cfg.image_size, self.cfg.image_size];
        if image.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: expect.to_vec(),
                rhs: image.shape().to_vec(),
            });
        }
        let img = self.tape.leaf(image.clone().requires_grad(input_grad));
        let logits = self.forward_from(img)?;
        Ok((img, logits))
    }

    fn forward_from(&mut self, img: Var) -> Result<Var> {
        let cfg = self.cfg;
        let map = std::sync::Arc::new(patch_map(cfg));
        let patches =
            self.tape
                .gather(img, vec![cfg.num_patches(), cfg.patch_dim()], map)?;
        let pw = self.leaf("patch.w")?;
        let pb = self.leaf("patch.b")?;
        let embedded = self.tape.matmul(patches, pw)?;
        let embedded = self.tape.add_row(embedded, pb)?;
        let cls = self.leaf("cls")?;
        let mut seq = self.tape.concat_rows(&[cls, embedded])?;

        for block in 0..cfg.depth {
            seq = self.block(seq, block)?;
        }

        let cls_row = self.tape.slice_rows(seq, 0, 1)?;
        let hw = self.leaf("head.w")?;
        let hb = self.leaf("head.b")?;
        let logits = self.tape.matmul(cls_row, hw)?;
        self.tape.add_row(logits, hb)
    }

    fn block(&mut self, seq: Var, block: usize) -> Result<Var> {
        let p = format!("block{block}");
        // attention sub-layer
        let g1 = self.leaf(&format!("{p}.ln1.g"))?;
        let b1 = self.leaf(&format!("{p}.ln1.b"))?;
        let h = self.tape.layer_norm(seq, g1, b1)?;
        let q = self.projected(h, block, Site::Wq, &format!("{p}.attn.wq"))?;
        let mut k = self.projected(h, block, Site::Wk, &format!("{p}.attn.wk"))?;
        let mut v = self.projected(h, block, Site::Wv, &format!("{p}.attn.wv"))?;
        k = self.ia3_scaled(k, block, Ia3Slot::Keys)?;
        v = self.ia3_scaled(v, block, Ia3Slot::Values)?;
        let merged = attention_heads(&mut self.tape, q, k, v, self.cfg.heads)?;
        let mut attn_out = self.projected(merged, block, Site::Wo, &format!("{p}.attn.wo"))?;
        attn_out = self.adapter(attn_out, block, AdapterPlace::AttnOut)?;
        let seq = self.tape.add(seq, attn_out)?;

        // feedforward sub-layer
        let g2 = self.leaf(&format!("{p}.ln2.g"))?;
        let b2 = self.leaf(&format!("{p}.ln2.b"))?;
        let f = self.tape.layer_norm(seq, g2, b2)?;
        let w1 = self.leaf(&format!("{p}.ffn.w1"))?;
        let fb1 = self.leaf(&format!("{p}.ffn.b1"))?;
        let f = self.tape.matmul(f, w1)?;
        let f = self.tape.add_row(f, fb1)?;
        let f = self.tape.gelu(f);
        let f = self.ia3_scaled(f, block, Ia3Slot::FfnInner)?;
        let w2 = self.leaf(&format!("{p}.ffn.w2"))?;
        let fb2 = self.leaf(&format!("{p}.ffn.b2"))?;
        let f = self.tape.matmul(f, w2)?;
        let mut f = self.tape.add_row(f, fb2)?;
        f = self.adapter(f, block, AdapterPlace::Ffn)?;
        self.tape.add(seq, f)
    }

    /// x . W, plus the scaled low-rank path when a LoRA site is attached.
    fn projected(&mut self, x: Var, block: usize, site: Site, weight: &str) -> Result<Var> {
        let w = self.leaf(weight)?;
        let base = self.tape.matmul(x, w)?;
        let Some(lora) = self.peft.and_then(|a| a.lora(block, site)) else {
            return Ok(base);
        };
        let a = self.leaf(&lora.a)?;
        let b = self.leaf(&lora.b)?;
        let xa = self.tape.matmul(x, a)?;
        let xab = self.tape.matmul(xa, b)?;
        let scaled = self.tape.scale(xab, lora.scaling);
        self.tape.add(base, scaled)
    }

    fn ia3_scaled(&mut self, x: Var, block: usize, slot: Ia3Slot) -> Result<Var> {
        let Some(name) = self.peft.and_then(|a| a.ia3(block, slot)) else {
            return Ok(x);
        };
        let vec = self.leaf(&name)?;
        self.tape.mul_row(x, vec)
    }

    fn adapter(&mut self, h: Var, block: usize, place: AdapterPlace) -> Result<Var> {
        let Some(site) = self.peft.and_then(|a| a.adapter(block, place)) else {
            return Ok(h);
        };
        match site {
            AdapterSite::Plain(names) => {
                let g = self.leaf(&names.ln_g)?;
                let b = self.leaf(&names.ln_b)?;
                let a = self.tape.layer_norm(h, g, b)?;
                let dw = self.leaf(&names.down_w)?;
                let db = self.leaf(&names.down_b)?;
                let a = self.tape.matmul(a, dw)?;
                let a = self.tape.add_row(a, db)?;
                let a = self.tape.gelu(a);
                let uw = self.leaf(&names.up_w)?;
                let ub = self.leaf(&names.up_b)?;
                let a = self.tape.matmul(a, uw)?;
                let a = self.tape.add_row(a, ub)?;
                self.tape.add(h, a)
            }
            AdapterSite::Kron(names) => {
                let g = self.leaf(&names.ln_g)?;
                let b = self.leaf(&names.ln_b)?;
                let a = self.tape.layer_norm(h, g, b)?;
                let dw = self.kron_weight(&names.shared_a, &names.down_s, &names.down_t)?;
                let db = self.leaf(&names.down_b)?;
                let a = self.tape.matmul(a, dw)?;
                let a = self.tape.add_row(a, db)?;
                let a = self.tape.gelu(a);
                let uw = self.kron_weight(&names.shared_a, &names.up_s, &names.up_t)?;
                let ub = self.leaf(&names.up_b)?;
                let a = self.tape.matmul(a, uw)?;
                let a = self.tape.add_row(a, ub)?;
                self.tape.add(h, a)
            }
        }
    }

    /// Sum of Kronecker products: W = sum_i A_i (x) (s_i t_i^T).
    fn kron_weight(&mut self, shared_a: &[String], s: &[String], t: &[String]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for ((an, sn), tn) in shared_a.iter().zip(s).zip(t) {
            let a = self.leaf(an)?;
            let sv = self.leaf(sn)?;
            let tv = self.leaf(tn)?;
            let outer = self.tape.matmul(sv, tv)?;
            let term = self.tape.kron(a, outer)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => self.tape.add(prev, term)?,
            });
        }
        acc.ok_or_else(|| Error::Config("compacter with zero kron factors".into()))
    }
}

/// Logits for a batch of images without any gradient bookkeeping.
pub fn forward_logits(
    cfg: &ModelConfig,
    params: &Params,
    peft: Option<&PeftAttachment>,
    images: &[Tensor],
) -> Result<Tensor> {
    let mut builder = GraphBuilder::new(cfg, params, peft, None)?;
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        let (_, logits) = builder.logits_for_image(img, false)?;
        rows.push(logits);
    }
    let all = builder.tape.concat_rows(&rows)?;
    Ok(builder.tape.value(all).clone())
}

/// Mean cross-entropy of a logits matrix against labels.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss).item())
}

/// Batch loss plus gradients for the requested parameter names.
pub fn loss_and_param_grads(
    cfg: &ModelConfig,
    params: &Params,
    peft: Option<&PeftAttachment>,
    images: &[Tensor],
    labels: &[usize],
    trainable: &BTreeSet<String>,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut builder = GraphBuilder::new(cfg, params, peft, Some(trainable))?;
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        let (_, logits) = builder.logits_for_image(img, false)?;
        rows.push(logits);
    }
    let all = builder.tape.concat_rows(&rows)?;
    let loss = builder.tape.cross_entropy(all, labels)?;
    builder.tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for name in trainable {
        let var = builder.leaf(name)?;
        let g = builder
            .tape
            .grad(var)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
        grads.insert(name.clone(), g.to_vec());
    }
    Ok((builder.tape.value(loss).item(), grads))
}

/// Loss and input gradient for one sample; parameters stay frozen.
pub fn loss_and_input_grad(
    cfg: &ModelConfig,
    params: &Params,
    peft: Option<&PeftAttachment>,
    image: &Tensor,
    label: usize,
) -> Result<(f64, Tensor)> {
    let mut builder = GraphBuilder::new(cfg, params, peft, None)?;
    let (img, logits) = builder.logits_for_image(image, true)?;
    let loss = builder.tape.cross_entropy(logits, &[label])?;
    builder.tape.backward(loss)?;
    let g = builder
        .tape
        .grad(img)
        .ok_or_else(|| Error::Contract("input gradient missing".into()))?;
    Ok((
        builder.tape.value(loss).item(),
        Tensor::from_vec(image.shape().to_vec(), g.to_vec())?,
    ))
}

/// Adaptive-moment optimizer with decoupled weight decay
/// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    fn update(&mut self, name: &str, tensor: &mut Tensor, grad: &[f64], opt: &OptimConfig) {
        let n = tensor.numel();
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for ((p, &g), (mi, vi)) in tensor
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = BETA1 * *mi + (1.0 - BETA1) * g;
            *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= opt.lr * (mhat / (vhat.sqrt() + ADAM_EPS) + opt.weight_decay * *p);
        }
    }
}

/// One optimizer step over a batch. Only tensors named in `trainable`
/// change; everything else is untouched. Returns the batch loss.
pub fn train_step(
    cfg: &ModelConfig,
    params: &mut Params,
    peft: Option<&mut PeftAttachment>,
    trainable: &BTreeSet<String>,
    images: &[Tensor],
    labels: &[usize],
    opt: &OptimConfig,
    state: &mut AdamState,
) -> Result<f64> {
    if trainable.is_empty() {
        return Err(Error::Config("empty trainable set".into()));
    }
    let peft_ref = peft.as_deref();
    let (loss, grads) = loss_and_param_grads(cfg, params, peft_ref, images, labels, trainable)?;
    if !loss.is_finite() {
        return Err(Error::Diverged { step: state.step });
    }
    state.step += 1;
    let mut extras = peft.map(|a| &mut a.extras);
    for (name, grad) in &grads {
        let tensor = if params.contains(name) {
            params.get_mut(name)?
        } else if let Some(extras) = extras.as_deref_mut() {
            extras.get_mut(name)?
        } else {
            return Err(Error::Contract(format!(
                "trainable parameter `{name}` not found"
            )));
        };
        state.update(name, tensor, grad, opt);
    }
    Ok(loss)
}

/// Accuracy of argmax predictions over a labeled dataset. Evaluation of
/// disjoint samples is farmed out in parallel; parameters are shared
/// read-only.
pub fn dataset_accuracy(
    cfg: &ModelConfig,
    params: &Params,
    peft: Option<&PeftAttachment>,
    data: &[(Tensor, usize)],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("accuracy over an empty dataset".into()));
    }
    let correct: usize = data
        .par_chunks(32)
        .map(|chunk| -> Result<usize> {
            let images: Vec<Tensor> = chunk.iter().map(|(x, _)| x.clone()).collect();
            let logits = forward_logits(cfg, params, peft, &images)?;
            Ok(chunk
                .iter()
                .enumerate()
                .filter(|(i, (_, y))| logits.argmax_row(*i) == *y)
                .count())
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / data.len() as f64)
}

/// Attack adapter: a frozen model snapshot as a PGD loss oracle.
pub struct ModelTarget<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Params,
    pub peft: Option<&'a PeftAttachment>,
}

impl AttackTarget for ModelTarget<'_> {
    fn loss_and_input_grad(&self, x: &Tensor, label: i64) -> Result<(f64, Tensor)> {
        loss_and_input_grad(self.cfg, self.params, self.peft, x, label as usize)
    }

    fn predict(&self, x: &Tensor) -> Result<i64> {
        let logits = forward_logits(self.cfg, self.params, self.peft, std::slice::from_ref(x))?;
        Ok(logits.argmax_row(0) as i64)
    }
}

/// Versioned checkpoint container.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    #[serde(default)]
    pub extras: BTreeMap<String, Tensor>,
    #[serde(default)]
    pub peft: Option<PeftSpec>,
}

impl Checkpoint {
    pub fn new(cfg: &ModelConfig, params: &Params) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            params: params.clone().into_map(),
            extras: BTreeMap::new(),
            peft: None,
        }
    }

    pub fn with_attachment(mut self, att: &PeftAttachment) -> Self {
        self.extras = att.extras.clone().into_map();
        self.peft = Some(att.spec.clone());
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} unsupported (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }

    pub fn params(&self) -> Params {
        Params::from_map(self.params.clone())
    }
}
