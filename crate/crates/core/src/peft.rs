//! The seven fine-tuning strategies and their attachment to the host
//! model, plus the two-dimensional decomposition registry (information
//! location x mechanism).
//!
//! Every attachment is function-identical to the frozen model at step 0
//! under identity init: LoRA zero-initializes B, adapters zero-initialize
//! the up-projection, Compacter zeroes the up-projection's s factors, and
//! IA3 vectors start at one.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{census, is_bias, trunc_normal, ModelConfig, Params};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftMethod {
    FullFt,
    LinearProbe,
    Lora,
    BitFit,
    Adapter,
    Compacter,
    Ia3,
}

impl PeftMethod {
    pub const ALL: [PeftMethod; 7] = [
        PeftMethod::FullFt,
        PeftMethod::LinearProbe,
        PeftMethod::Lora,
        PeftMethod::BitFit,
        PeftMethod::Adapter,
        PeftMethod::Compacter,
        PeftMethod::Ia3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PeftMethod::FullFt => "full_ft",
            PeftMethod::LinearProbe => "linear_probe",
            PeftMethod::Lora => "lora",
            PeftMethod::BitFit => "bitfit",
            PeftMethod::Adapter => "adapter",
            PeftMethod::Compacter => "compacter",
            PeftMethod::Ia3 => "ia3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        PeftMethod::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fine-tuning method `{s}`")))
    }
}

/// Attachment sites within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Wq,
    Wk,
    Wv,
    Wo,
    /// Sequentially after the attention output projection.
    AttnOut,
    /// Sequentially after the feedforward network.
    Ffn,
}

impl Site {
    fn label(&self) -> &'static str {
        match self {
            Site::Wq => "wq",
            Site::Wk => "wk",
            Site::Wv => "wv",
            Site::Wo => "wo",
            Site::AttnOut => "attn",
            Site::Ffn => "ffn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ia3Slot {
    Keys,
    Values,
    FfnInner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterPlace {
    AttnOut,
    Ffn,
}

impl AdapterPlace {
    fn label(&self) -> &'static str {
        match self {
            AdapterPlace::AttnOut => "attn",
            AdapterPlace::Ffn => "ffn",
        }
    }

    fn site(&self) -> Site {
        match self {
            AdapterPlace::AttnOut => Site::AttnOut,
            AdapterPlace::Ffn => Site::Ffn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Attached model is function-identical to the frozen model at step 0.
    #[default]
    Identity,
    /// All new tensors drawn truncated-normal (IA3 around one).
    Random,
}

/// A fine-tuning method plus its hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeftSpec {
    pub method: PeftMethod,
    /// LoRA rank.
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// LoRA scaling numerator; the applied factor is alpha / rank.
    #[serde(default = "default_alpha")]
    pub lora_alpha: f64,
    /// Adapter/Compacter bottleneck divisor.
    #[serde(default = "default_reduction")]
    pub reduction_factor: usize,
    /// Compacter Kronecker factor count.
    #[serde(default = "default_kron_factors")]
    pub kron_factors: usize,
    /// Target sites; None applies the method's standard locations.
    #[serde(default)]
    pub locations: Option<Vec<Site>>,
    #[serde(default)]
    pub init: InitMode,
}

fn default_rank() -> usize {
    4
}

fn default_alpha() -> f64 {
    8.0
}

fn default_reduction() -> usize {
    8
}

fn default_kron_factors() -> usize {
    4
}

impl PeftSpec {
    pub fn new(method: PeftMethod) -> Self {
        PeftSpec {
            method,
            rank: default_rank(),
            lora_alpha: default_alpha(),
            reduction_factor: default_reduction(),
            kron_factors: default_kron_factors(),
            locations: None,
            init: InitMode::Identity,
        }
    }

    /// Standard locations per method.
    pub fn default_sites(method: PeftMethod) -> &'static [Site] {
        match method {
            PeftMethod::Lora => &[Site::Wk, Site::Wv, Site::Wq, Site::Wo],
            PeftMethod::Ia3 => &[Site::Wk, Site::Wv, Site::Ffn],
            PeftMethod::Adapter | PeftMethod::Compacter => &[Site::AttnOut, Site::Ffn],
            _ => &[],
        }
    }

    fn valid_sites(method: PeftMethod) -> &'static [Site] {
        Self::default_sites(method)
    }

    pub fn resolved_sites(&self) -> Vec<Site> {
        self.locations
            .clone()
            .unwrap_or_else(|| Self::default_sites(self.method).to_vec())
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let valid = Self::valid_sites(self.method);
        for site in self.resolved_sites() {
            if !valid.contains(&site) {
                return Err(Error::Config(format!(
                    "peft.locations: site `{}` is not valid for method `{}`",
                    site.label(),
                    self.method.name()
                )));
            }
        }
        match self.method {
            PeftMethod::Lora => {
                if self.rank < 1 || self.rank > cfg.embed_dim {
                    return Err(Error::Config(format!(
                        "peft.rank ({}) must lie in 1..={}",
                        self.rank, cfg.embed_dim
                    )));
                }
            }
            PeftMethod::Adapter | PeftMethod::Compacter => {
                if self.reduction_factor == 0 || cfg.embed_dim % self.reduction_factor != 0 {
                    return Err(Error::Config(format!(
                        "peft.reduction_factor ({}) must divide embed_dim ({})",
                        self.reduction_factor, cfg.embed_dim
                    )));
                }
                if self.method == PeftMethod::Compacter {
                    let bottleneck = cfg.embed_dim / self.reduction_factor;
                    let n = self.kron_factors;
                    if n == 0 || cfg.embed_dim % n != 0 || bottleneck % n != 0 {
                        return Err(Error::Config(format!(
                            "peft.kron_factors ({n}) must divide embed_dim ({}) and the bottleneck ({bottleneck})",
                            cfg.embed_dim
                        )));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Name bundle for a LoRA site.
#[derive(Debug, Clone)]
pub struct LoraSite {
    pub a: String,
    pub b: String,
    pub scaling: f64,
}

#[derive(Debug, Clone)]
pub struct PlainAdapter {
    pub ln_g: String,
    pub ln_b: String,
    pub down_w: String,
    pub down_b: String,
    pub up_w: String,
    pub up_b: String,
}

#[derive(Debug, Clone)]
pub struct KronAdapter {
    pub ln_g: String,
    pub ln_b: String,
    pub shared_a: Vec<String>,
    pub down_s: Vec<String>,
    pub down_t: Vec<String>,
    pub down_b: String,
    pub up_s: Vec<String>,
    pub up_t: Vec<String>,
    pub up_b: String,
}

#[derive(Debug, Clone)]
pub enum AdapterSite {
    Plain(PlainAdapter),
    Kron(KronAdapter),
}

/// A method bound to a model: new trainable tensors plus the subset of
/// base parameters the method unfreezes.
#[derive(Debug, Clone)]
pub struct PeftAttachment {
    pub spec: PeftSpec,
    pub extras: Params,
    trainable_base: BTreeSet<String>,
    sites: Vec<Site>,
    blocks: usize,
}

fn lora_names(block: usize, site: Site) -> (String, String) {
    let p = format!("peft.block{block}.lora.{}", site.label());
    (format!("{p}.a"), format!("{p}.b"))
}

fn adapter_prefix(block: usize, method: PeftMethod, place: AdapterPlace) -> String {
    format!(
        "peft.block{block}.{}.{}",
        if method == PeftMethod::Compacter { "compacter" } else { "adapter" },
        place.label()
    )
}

fn ia3_name(block: usize, slot: Ia3Slot) -> String {
    let tag = match slot {
        Ia3Slot::Keys => "lk",
        Ia3Slot::Values => "lv",
        Ia3Slot::FfnInner => "lff",
    };
    format!("peft.block{block}.ia3.{tag}")
}

fn shared_kron_name(factor: usize) -> String {
    format!("peft.shared.kron.a{factor}")
}

impl PeftAttachment {
    pub fn method(&self) -> PeftMethod {
        self.spec.method
    }

    /// LoRA tensors for a projection site, when attached there.
    pub fn lora(&self, block: usize, site: Site) -> Option<LoraSite> {
        if self.spec.method != PeftMethod::Lora || !self.sites.contains(&site) {
            return None;
        }
        let (a, b) = lora_names(block, site);
        Some(LoraSite {
            a,
            b,
            scaling: self.spec.lora_alpha / self.spec.rank as f64,
        })
    }

    /// IA3 scaling vector for a slot, when attached there.
    pub fn ia3(&self, block: usize, slot: Ia3Slot) -> Option<String> {
        if self.spec.method != PeftMethod::Ia3 {
            return None;
        }
        let wanted = match slot {
            Ia3Slot::Keys => Site::Wk,
            Ia3Slot::Values => Site::Wv,
            Ia3Slot::FfnInner => Site::Ffn,
        };
        self.sites
            .contains(&wanted)
            .then(|| ia3_name(block, slot))
    }

    /// Adapter (plain or Kronecker-parameterized) at a place, when attached.
    pub fn adapter(&self, block: usize, place: AdapterPlace) -> Option<AdapterSite> {
        let method = self.spec.method;
        if method != PeftMethod::Adapter && method != PeftMethod::Compacter {
            return None;
        }
        if !self.sites.contains(&place.site()) {
            return None;
        }
        let p = adapter_prefix(block, method, place);
        if method == PeftMethod::Adapter {
            return Some(AdapterSite::Plain(PlainAdapter {
                ln_g: format!("{p}.ln.g"),
                ln_b: format!("{p}.ln.b"),
                down_w: format!("{p}.down.w"),
                down_b: format!("{p}.down.b"),
                up_w: format!("{p}.up.w"),
                up_b: format!("{p}.up.b"),
            }));
        }
        let n = self.spec.kron_factors;
        Some(AdapterSite::Kron(KronAdapter {
            ln_g: format!("{p}.ln.g"),
            ln_b: format!("{p}.ln.b"),
            shared_a: (0..n).map(shared_kron_name).collect(),
            down_s: (0..n).map(|j| format!("{p}.down.s{j}")).collect(),
            down_t: (0..n).map(|j| format!("{p}.down.t{j}")).collect(),
            down_b: format!("{p}.down.b"),
            up_s: (0..n).map(|j| format!("{p}.up.s{j}")).collect(),
            up_t: (0..n).map(|j| format!("{p}.up.t{j}")).collect(),
            up_b: format!("{p}.up.b"),
        }))
    }

    /// Base parameters this method unfreezes.
    pub fn trainable_base(&self) -> &BTreeSet<String> {
        &self.trainable_base
    }

    /// The full trainable set: unfrozen base names plus all new tensors.
    pub fn trainable(&self) -> BTreeSet<String> {
        let mut set = self.trainable_base.clone();
        set.extend(self.extras.names().cloned());
        set
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self, base: &Params) -> usize {
        let base_count: usize = self
            .trainable_base
            .iter()
            .filter_map(|n| base.get(n).ok())
            .map(Tensor::numel)
            .sum();
        base_count + self.extras.scalar_count()
    }

    /// Trainable fraction of the attached model.
    pub fn trainable_fraction(&self, base: &Params) -> f64 {
        let trainable = self.trainable_scalars(base) as f64;
        let frozen = (base.scalar_count() - (self.trainable_scalars(base) - self.extras.scalar_count())) as f64;
        trainable / (trainable + frozen)
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }
}

/// Bind a method to a model: decide the trainable base subset and create
/// the method's new tensors, initialized so the attached model equals the
/// frozen one (under identity init).
pub fn attach(
    spec: &PeftSpec,
    cfg: &ModelConfig,
    params: &Params,
    seed: u64,
) -> Result<PeftAttachment> {
    cfg.validate()?;
    spec.validate(cfg)?;
    let mut r = rng::stream(seed, "peft-init");
    let d = cfg.embed_dim;
    let random = spec.init == InitMode::Random;
    let mut draw = |shape: Vec<usize>| -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, (0..numel).map(|_| trunc_normal(&mut r, 0.02)).collect())
            .expect("shape/data agree")
    };

    let trainable_base: BTreeSet<String> = match spec.method {
        PeftMethod::FullFt => census(cfg).into_iter().map(|(n, _)| n).collect(),
        PeftMethod::LinearProbe => ["head.w", "head.b"].iter().map(|s| s.to_string()).collect(),
        PeftMethod::BitFit => census(cfg)
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| is_bias(n))
            .collect(),
        _ => BTreeSet::new(),
    };

    let mut extras = Params::new();
    let sites = spec.resolved_sites();
    match spec.method {
        PeftMethod::Lora => {
            for block in 0..cfg.depth {
                for &site in &sites {
                    let (a_name, b_name) = lora_names(block, site);
                    extras.insert(a_name, draw(vec![d, spec.rank]));
                    let b = if random {
                        draw(vec![spec.rank, d])
                    } else {
                        Tensor::zeros(vec![spec.rank, d])
                    };
                    extras.insert(b_name, b);
                }
            }
        }
        PeftMethod::Adapter => {
            let bottleneck = d / spec.reduction_factor;
            for block in 0..cfg.depth {
                for place in [AdapterPlace::AttnOut, AdapterPlace::Ffn] {
                    if !sites.contains(&place.site()) {
                        continue;
                    }
                    let p = adapter_prefix(block, spec.method, place);
                    extras.insert(format!("{p}.ln.g"), Tensor::ones(vec![d]));
                    extras.insert(format!("{p}.ln.b"), Tensor::zeros(vec![d]));
                    extras.insert(format!("{p}.down.w"), draw(vec![d, bottleneck]));
                    extras.insert(format!("{p}.down.b"), Tensor::zeros(vec![bottleneck]));
                    let up = if random {
                        draw(vec![bottleneck, d])
                    } else {
                        Tensor::zeros(vec![bottleneck, d])
                    };
                    extras.insert(format!("{p}.up.w"), up);
                    extras.insert(format!("{p}.up.b"), Tensor::zeros(vec![d]));
                }
            }
        }
        PeftMethod::Compacter => {
            let bottleneck = d / spec.reduction_factor;
            let n = spec.kron_factors;
            for j in 0..n {
                extras.insert(shared_kron_name(j), draw(vec![n, n]));
            }
            for block in 0..cfg.depth {
                for place in [AdapterPlace::AttnOut, AdapterPlace::Ffn] {
                    if !sites.contains(&place.site()) {
                        continue;
                    }
                    let p = adapter_prefix(block, spec.method, place);
                    extras.insert(format!("{p}.ln.g"), Tensor::ones(vec![d]));
                    extras.insert(format!("{p}.ln.b"), Tensor::zeros(vec![d]));
                    for j in 0..n {
                        // down: [d, bottleneck] = A_j (x) s_j t_j^T
                        extras.insert(format!("{p}.down.s{j}"), draw(vec![d / n, 1]));
                        extras.insert(format!("{p}.down.t{j}"), draw(vec![1, bottleneck / n]));
                        // up: [bottleneck, d]; s zeroed for identity init
                        let up_s = if random {
                            draw(vec![bottleneck / n, 1])
                        } else {
                            Tensor::zeros(vec![bottleneck / n, 1])
                        };
                        extras.insert(format!("{p}.up.s{j}"), up_s);
                        extras.insert(format!("{p}.up.t{j}"), draw(vec![1, d / n]));
                    }
                    extras.insert(format!("{p}.down.b"), Tensor::zeros(vec![bottleneck]));
                    extras.insert(format!("{p}.up.b"), Tensor::zeros(vec![d]));
                }
            }
        }
        PeftMethod::Ia3 => {
            for block in 0..cfg.depth {
                for (slot, site, len) in [
                    (Ia3Slot::Keys, Site::Wk, d),
                    (Ia3Slot::Values, Site::Wv, d),
                    (Ia3Slot::FfnInner, Site::Ffn, cfg.ffn_hidden()),
                ] {
                    if !sites.contains(&site) {
                        continue;
                    }
                    let t = if random {
                        let mut t = draw(vec![len]);
                        for v in t.data_mut() {
                            *v += 1.0;
                        }
                        t
                    } else {
                        Tensor::ones(vec![len])
                    };
                    extras.insert(ia3_name(block, slot), t);
                }
            }
        }
        PeftMethod::FullFt | PeftMethod::LinearProbe | PeftMethod::BitFit => {}
    }

    // all referenced base names must exist
    for name in &trainable_base {
        params.get(name)?;
    }

    Ok(PeftAttachment {
        spec: spec.clone(),
        extras,
        trainable_base,
        sites,
        blocks: cfg.depth,
    })
}

/// y = x W + (alpha/r) x A B; the low-rank path of a LoRA site.
pub fn lora_forward(
    x: &Tensor,
    w: &Tensor,
    a: &Tensor,
    b: &Tensor,
    alpha: f64,
) -> Result<Tensor> {
    let rank = a.shape()[1];
    if rank < 1 || rank > w.shape()[0].min(w.shape()[1]) {
        return Err(Error::Config(format!(
            "lora rank {rank} exceeds the projection dimensions {:?}",
            w.shape()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let base = tape.matmul(xv, wv)?;
    let xa = tape.matmul(xv, av)?;
    let xab = tape.matmul(xa, bv)?;
    let scaled = tape.scale(xab, alpha / rank as f64);
    let out = tape.add(base, scaled)?;
    Ok(tape.value(out).clone())
}

/// Fold every LoRA update into the base weights: W' = W + (alpha/r) A B.
pub fn merge_lora(params: &Params, att: &PeftAttachment, cfg: &ModelConfig) -> Result<Params> {
    if att.spec.method != PeftMethod::Lora {
        return Err(Error::Config("merge_lora on a non-LoRA attachment".into()));
    }
    let mut merged = params.clone();
    for block in 0..cfg.depth {
        for (site, weight) in [
            (Site::Wq, format!("block{block}.attn.wq")),
            (Site::Wk, format!("block{block}.attn.wk")),
            (Site::Wv, format!("block{block}.attn.wv")),
            (Site::Wo, format!("block{block}.attn.wo")),
        ] {
            let Some(lora) = att.lora(block, site) else {
                continue;
            };
            let a = att.extras.get(&lora.a)?;
            let b = att.extras.get(&lora.b)?;
            let mut tape = Tape::new();
            let av = tape.constant(a.clone());
            let bv = tape.constant(b.clone());
            let ab = tape.matmul(av, bv)?;
            let delta = tape.scale(ab, lora.scaling);
            let delta = tape.value(delta).data().to_vec();
            let w = merged.get_mut(&weight)?;
            for (p, dv) in w.data_mut().iter_mut().zip(delta) {
                *p += dv;
            }
        }
    }
    Ok(merged)
}

/// Information-location axis of the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InfoLocation {
    Attn,
    Ffn,
    Representation,
    Bias,
}

/// Mechanism axis of the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mechanism {
    ProjectionLayers,
    MatrixReparam,
    ElementwiseMult,
    DirectUpdate,
}

#[derive(Debug, Clone)]
pub struct DecompRow {
    pub method: PeftMethod,
    pub locations: &'static [InfoLocation],
    pub mechanisms: &'static [Mechanism],
}

/// The decomposition registry covers the five PEFT methods; full
/// fine-tuning and linear probing are not decomposed.
pub fn registry() -> &'static [DecompRow] {
    use InfoLocation::*;
    use Mechanism::*;
    static ROWS: std::sync::OnceLock<Vec<DecompRow>> = std::sync::OnceLock::new();
    ROWS.get_or_init(|| {
        vec![
            DecompRow {
                method: PeftMethod::Lora,
                locations: &[Attn],
                mechanisms: &[MatrixReparam],
            },
            DecompRow {
                method: PeftMethod::Ia3,
                locations: &[Representation],
                mechanisms: &[ElementwiseMult],
            },
            DecompRow {
                method: PeftMethod::Adapter,
                locations: &[Representation],
                mechanisms: &[ProjectionLayers],
            },
            DecompRow {
                method: PeftMethod::Compacter,
                locations: &[Representation],
                mechanisms: &[ProjectionLayers, MatrixReparam],
            },
            DecompRow {
                method: PeftMethod::BitFit,
                locations: &[Attn, Ffn, Bias],
                mechanisms: &[DirectUpdate],
            },
        ]
    })
}

/// Decomposition row for a method; None for full fine-tuning and linear
/// probing, which sit outside the PEFT decomposition.
pub fn decomposition(method: PeftMethod) -> Option<&'static DecompRow> {
    registry().iter().find(|row| row.method == method)
}

/// The registry as CSV, one indicator column per axis component.
pub fn registry_csv() -> String {
    use InfoLocation::*;
    use Mechanism::*;
    let mut out = String::from(
        "method,attn,ffn,representation,bias,projection_layers,matrix_reparam,elementwise_mult,direct_update\n",
    );
    for row in registry() {
        let has_l = |l: InfoLocation| row.locations.contains(&l) as u8;
        let has_m = |m: Mechanism| row.mechanisms.contains(&m) as u8;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.method.name(),
            has_l(Attn),
            has_l(Ffn),
            has_l(Representation),
            has_l(Bias),
            has_m(ProjectionLayers),
            has_m(MatrixReparam),
            has_m(ElementwiseMult),
            has_m(DirectUpdate),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, init_params};
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            depth: 2,
            embed_dim: 16,
            heads: 2,
            patch_size: 4,
            image_size: 8,
            channels: 1,
            num_classes: 3,
            ffn_ratio: 2,
        }
    }

    fn rand_images(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Tensor> {
        let mut r = rng::stream(seed, "peft-test-images");
        (0..n)
            .map(|_| {
                let numel = cfg.channels * cfg.image_size * cfg.image_size;
                Tensor::from_vec(
                    vec![cfg.channels, cfg.image_size, cfg.image_size],
                    (0..numel).map(|_| r.gen::<f64>()).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    fn attach_method(method: PeftMethod, cfg: &ModelConfig, params: &Params) -> PeftAttachment {
        let mut spec = PeftSpec::new(method);
        if method == PeftMethod::Compacter && cfg.embed_dim / spec.reduction_factor < spec.kron_factors {
            // small test config: keep the bottleneck divisible by the factor count
            spec.reduction_factor = cfg.embed_dim / spec.kron_factors;
        }
        attach(&spec, cfg, params, 42).unwrap()
    }

    #[test]
    fn bitfit_trainable_set_is_exactly_the_bias_census() {
        let cfg = cfg();
        let params = init_params(&cfg, 0).unwrap();
        let att = attach_method(PeftMethod::BitFit, &cfg, &params);
        let expected: BTreeSet<String> = census(&cfg)
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| is_bias(n))
            .collect();
        assert_eq!(att.trainable_base(), &expected);
        assert!(att.extras.is_empty());
        assert!(att.trainable_fraction(&params) < 0.01);
    }

    #[test]
    fn full_ft_fraction_is_one() {
        let cfg = cfg();
        let params = init_params(&cfg, 0).unwrap();
        let att = attach_method(PeftMethod::FullFt, &cfg, &params);
        assert_eq!(att.trainable_fraction(&params), 1.0);
        assert_eq!(att.trainable_scalars(&params), params.scalar_count());
    }

    #[test]
    fn linear_probe_trains_head_only() {
        let cfg = cfg();
        let params = init_params(&cfg, 0).unwrap();
        let att = attach_method(PeftMethod::LinearProbe, &cfg, &params);
        assert_eq!(att.trainable().len(), 2);
        assert!(att.trainable().contains("head.w"));
    }

    #[test]
    fn identity_at_init_for_all_additive_methods() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let images = rand_images(&cfg, 4, 9);
        let frozen = forward_logits(&cfg, &params, None, &images).unwrap();
        for method in [
            PeftMethod::Lora,
            PeftMethod::Adapter,
            PeftMethod::Compacter,
            PeftMethod::Ia3,
        ] {
            let att = attach_method(method, &cfg, &params);
            let attached = forward_logits(&cfg, &params, Some(&att), &images).unwrap();
            for (a, b) in frozen.data().iter().zip(attached.data()) {
                assert_eq!(a, b, "{:?} breaks identity at init", method);
            }
        }
    }

    #[test]
    fn random_init_breaks_identity() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let images = rand_images(&cfg, 2, 10);
        let frozen = forward_logits(&cfg, &params, None, &images).unwrap();
        let mut spec = PeftSpec::new(PeftMethod::Lora);
        spec.init = InitMode::Random;
        let att = attach(&spec, &cfg, &params, 7).unwrap();
        let attached = forward_logits(&cfg, &params, Some(&att), &images).unwrap();
        let diff: f64 = frozen
            .data()
            .iter()
            .zip(attached.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn trainable_fraction_ordering_at_default_config() {
        let cfg = cfg();
        let params = init_params(&cfg, 0).unwrap();
        let count =
            |m: PeftMethod| attach_method(m, &cfg, &params).trainable_scalars(&params);
        let lora = count(PeftMethod::Lora);
        let adapter = count(PeftMethod::Adapter);
        assert!(count(PeftMethod::LinearProbe) < lora);
        assert!(count(PeftMethod::BitFit) < lora);
        assert!(count(PeftMethod::Ia3) < lora);
        assert!(lora < adapter);
        assert!(adapter < count(PeftMethod::FullFt));
        assert!(count(PeftMethod::Compacter) < adapter);
    }

    #[test]
    fn adapter_bottleneck_matches_reduction_factor() {
        let cfg = cfg();
        let params = init_params(&cfg, 0).unwrap();
        let att = attach_method(PeftMethod::Adapter, &cfg, &params);
        let down = att.extras.get("peft.block0.adapter.attn.down.w").unwrap();
        assert_eq!(down.shape(), &[64, 8]); // 64 / 8 = 8
    }

    #[test]
    fn compacter_weight_equals_explicit_kron_sum() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 3).unwrap();
        let mut spec = PeftSpec::new(PeftMethod::Compacter);
        spec.reduction_factor = 4; // bottleneck 4, divisible by 4 kron factors
        spec.init = InitMode::Random; // exercise nonzero up-projection too
        let att = attach(&spec, &cfg, &params, 5).unwrap();
        let n = spec.kron_factors;
        let d = cfg.embed_dim;
        let bottleneck = d / spec.reduction_factor;
        // brute-force sum of Kronecker blocks for the block0 attn down-projection
        let mut w = vec![0.0; d * bottleneck];
        for j in 0..n {
            let a = att.extras.get(&shared_kron_name(j)).unwrap();
            let s = att
                .extras
                .get(&format!("peft.block0.compacter.attn.down.s{j}"))
                .unwrap();
            let t = att
                .extras
                .get(&format!("peft.block0.compacter.attn.down.t{j}"))
                .unwrap();
            let (br, bs) = (d / n, bottleneck / n);
            for ai in 0..n {
                for aj in 0..n {
                    for u in 0..br {
                        for v in 0..bs {
                            w[(ai * br + u) * bottleneck + (aj * bs + v)] +=
                                a.data()[ai * n + aj] * s.data()[u] * t.data()[v];
                        }
                    }
                }
            }
        }
        // the graph path computes the same weight; compare on a probe input
        let mut tape = Tape::new();
        let names: Vec<String> = (0..n).map(shared_kron_name).collect();
        let s_names: Vec<String> = (0..n)
            .map(|j| format!("peft.block0.compacter.attn.down.s{j}"))
            .collect();
        let t_names: Vec<String> = (0..n)
            .map(|j| format!("peft.block0.compacter.attn.down.t{j}"))
            .collect();
        let mut acc = None;
        for j in 0..n {
            let a = tape.constant(att.extras.get(&names[j]).unwrap().clone());
            let s = tape.constant(att.extras.get(&s_names[j]).unwrap().clone());
            let t = tape.constant(att.extras.get(&t_names[j]).unwrap().clone());
            let outer = tape.matmul(s, t).unwrap();
            let term = tape.kron(a, outer).unwrap();
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term).unwrap(),
            });
        }
        let got = tape.value(acc.unwrap());
        assert_eq!(got.shape(), &[d, bottleneck]);
        for (x, y) in got.data().iter().zip(&w) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ia3_zero_values_vector_kills_attention_output() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 4).unwrap();
        let images = rand_images(&cfg, 2, 11);
        // zero l_v: attention contributes nothing, pre- or post-WO
        let mut att = attach_method(PeftMethod::Ia3, &cfg, &params);
        for block in 0..cfg.depth {
            let name = ia3_name(block, Ia3Slot::Values);
            *att.extras.get_mut(&name).unwrap() = Tensor::zeros(vec![cfg.embed_dim]);
        }
        let with_zero_lv = forward_logits(&cfg, &params, Some(&att), &images).unwrap();
        // reference: same model with all four attention projections zeroed
        let mut no_attn = params.clone();
        for block in 0..cfg.depth {
            for w in ["wq", "wk", "wv", "wo"] {
                *no_attn.get_mut(&format!("block{block}.attn.{w}")).unwrap() =
                    Tensor::zeros(vec![cfg.embed_dim, cfg.embed_dim]);
            }
        }
        let mut att_ref = attach_method(PeftMethod::Ia3, &cfg, &no_attn);
        for block in 0..cfg.depth {
            let name = ia3_name(block, Ia3Slot::Values);
            *att_ref.extras.get_mut(&name).unwrap() = Tensor::zeros(vec![cfg.embed_dim]);
        }
        let reference = forward_logits(&cfg, &no_attn, Some(&att_ref), &images).unwrap();
        for (a, b) in with_zero_lv.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_merge_equals_two_path_inference() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 6).unwrap();
        let mut spec = PeftSpec::new(PeftMethod::Lora);
        spec.init = InitMode::Random; // nonzero delta so the check is nontrivial
        let att = attach(&spec, &cfg, &params, 13).unwrap();
        let images = rand_images(&cfg, 3, 14);
        let two_path = forward_logits(&cfg, &params, Some(&att), &images).unwrap();
        let merged = merge_lora(&params, &att, &cfg).unwrap();
        let folded = forward_logits(&cfg, &merged, None, &images).unwrap();
        for (a, b) in two_path.data().iter().zip(folded.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn lora_forward_zero_b_is_base_projection() {
        let mut r = rng::stream(8, "lora-test");
        let x = Tensor::from_vec(vec![2, 6], (0..12).map(|_| r.gen::<f64>()).collect()).unwrap();
        let w = Tensor::from_vec(vec![6, 6], (0..36).map(|_| r.gen::<f64>()).collect()).unwrap();
        let a = Tensor::from_vec(vec![6, 2], (0..12).map(|_| r.gen::<f64>()).collect()).unwrap();
        let b = Tensor::zeros(vec![2, 6]);
        let y = lora_forward(&x, &w, &a, &b, 8.0).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let base = tape.matmul(xv, wv).unwrap();
        assert_eq!(y.data(), tape.value(base).data());
    }

    #[test]
    fn lora_rank_above_dimensions_is_rejected() {
        let x = Tensor::zeros(vec![2, 4]);
        let w = Tensor::zeros(vec![4, 4]);
        let a = Tensor::zeros(vec![4, 5]);
        let b = Tensor::zeros(vec![5, 4]);
        assert!(lora_forward(&x, &w, &a, &b, 8.0).is_err());
        let cfg = small_cfg();
        let mut spec = PeftSpec::new(PeftMethod::Lora);
        spec.rank = cfg.embed_dim + 1;
        assert!(spec.validate(&cfg).is_err());
    }

    #[test]
    fn invalid_location_is_a_config_error() {
        let cfg = cfg();
        let mut spec = PeftSpec::new(PeftMethod::Ia3);
        spec.locations = Some(vec![Site::Wq]);
        let err = spec.validate(&cfg).unwrap_err().to_string();
        assert!(err.contains("wq"), "{err}");
    }

    #[test]
    fn decomposition_matches_published_rows() {
        let lora = decomposition(PeftMethod::Lora).unwrap();
        assert_eq!(lora.locations, &[InfoLocation::Attn]);
        assert_eq!(lora.mechanisms, &[Mechanism::MatrixReparam]);
        let bitfit = decomposition(PeftMethod::BitFit).unwrap();
        assert_eq!(
            bitfit.locations,
            &[InfoLocation::Attn, InfoLocation::Ffn, InfoLocation::Bias]
        );
        assert_eq!(bitfit.mechanisms, &[Mechanism::DirectUpdate]);
        let compacter = decomposition(PeftMethod::Compacter).unwrap();
        assert_eq!(compacter.locations, &[InfoLocation::Representation]);
        assert_eq!(
            compacter.mechanisms,
            &[Mechanism::ProjectionLayers, Mechanism::MatrixReparam]
        );
        assert!(decomposition(PeftMethod::FullFt).is_none());
        assert_eq!(registry().len(), 5);
    }
}
