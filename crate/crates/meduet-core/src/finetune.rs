//! Downstream heads on top of the pretrained encoder: latent-space
//! segmentation and volume classification, fine-tuned with prototype-based
//! style augmentation.
//!
//! The augmentation path mixes each labeled volume's style tokens toward a
//! prototype built from unlabeled target-domain volumes, decodes the mixed
//! factors through the frozen pretrained model, and trains the head on both
//! the clean and augmented inputs plus a KL consistency term between their
//! predictions. Labels are never touched by augmentation: the mixer operates
//! on latent tokens only and the caller pairs the original mask with both
//! views.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use meduet_tensor::{Tape, TensorId};
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::arrayio::{read_array_container, write_array_container};
use crate::codes::extract_codes;
use crate::corpus::{read_volume, render_seg_mask, ContentSpec, CorpusManifest, NUM_SEG_CLASSES};
use crate::model::{
    insert_block_params, insert_linear_params, resize_pos_embed, Forward, Model, ModelDims,
};
use crate::optim::{AdamConfig, AdamW};
use crate::params::{BoundParams, ParamStore};
use crate::tokenizer::read_latent;
use crate::trainer::load_train_data;
use crate::{Error, Result};

/// Smoothing constant in the soft-Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

// ---- label budgets and augmentation schedule ----

/// How much of the non-target pool carries labels during fine-tuning.
/// Serializes as its display string; deserializes from "1shot", a fraction
/// string, or a bare number, so config files and CLI flags share one syntax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(into = "String")]
pub enum LabelBudget {
    /// Exactly one labeled volume.
    OneShot,
    /// A fraction of the pool, in (0, 1]; at least one volume survives.
    Fraction(f64),
}

impl From<LabelBudget> for String {
    fn from(b: LabelBudget) -> String {
        b.to_string()
    }
}

impl LabelBudget {
    pub fn fraction(f: f64) -> Result<Self> {
        if f > 0.0 && f <= 1.0 {
            Ok(LabelBudget::Fraction(f))
        } else {
            Err(Error::Config(format!(
                "label fraction {} must lie in (0, 1]",
                f
            )))
        }
    }
}

impl<'de> Deserialize<'de> for LabelBudget {
    fn deserialize<D>(d: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = LabelBudget;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "\"1shot\" or a fraction in (0, 1]")
            }

            fn visit_str<E: serde::de::Error>(self, s: &str) -> std::result::Result<LabelBudget, E> {
                s.parse().map_err(E::custom)
            }

            fn visit_f64<E: serde::de::Error>(self, f: f64) -> std::result::Result<LabelBudget, E> {
                LabelBudget::fraction(f).map_err(E::custom)
            }

            fn visit_i64<E: serde::de::Error>(self, i: i64) -> std::result::Result<LabelBudget, E> {
                LabelBudget::fraction(i as f64).map_err(E::custom)
            }

            fn visit_u64<E: serde::de::Error>(self, u: u64) -> std::result::Result<LabelBudget, E> {
                LabelBudget::fraction(u as f64).map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

impl LabelBudget {
    pub fn count(&self, pool: usize) -> usize {
        match *self {
            LabelBudget::OneShot => 1,
            LabelBudget::Fraction(f) => ((f * pool as f64).floor() as usize).clamp(1, pool.max(1)),
        }
    }
}

impl FromStr for LabelBudget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("1shot") || t.eq_ignore_ascii_case("1-shot") {
            return Ok(LabelBudget::OneShot);
        }
        let f: f64 = t.parse().map_err(|_| {
            Error::Config(format!(
                "label budget '{}' is neither '1shot' nor a fraction",
                s
            ))
        })?;
        Self::fraction(f)
    }
}

impl fmt::Display for LabelBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LabelBudget::OneShot => write!(f, "1shot"),
            LabelBudget::Fraction(x) => write!(f, "{}", x),
        }
    }
}

/// Style-augmentation knobs. The per-budget presets trade augmentation
/// pressure against label volume: the scarcer the labels, the more of the
/// batch is augmented and the harder the styles are pushed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    /// Probability that a batch sample receives an augmented twin.
    pub p_aug: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub lambda_aug: f64,
    pub lambda_cons: f64,
    /// Prototype EMA decay.
    pub ema_decay: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self::for_budget(LabelBudget::Fraction(0.1))
    }
}

impl AugConfig {
    pub fn for_budget(budget: LabelBudget) -> Self {
        let (p_aug, alpha_min, alpha_max) = match budget {
            LabelBudget::OneShot => (0.9, 0.4, 0.8),
            LabelBudget::Fraction(f) if f <= 0.10 => (0.8, 0.4, 0.8),
            LabelBudget::Fraction(f) if f <= 0.50 => (0.6, 0.3, 0.6),
            LabelBudget::Fraction(_) => (0.3, 0.2, 0.5),
        };
        Self {
            p_aug,
            alpha_min,
            alpha_max,
            lambda_aug: 0.4,
            lambda_cons: 0.3,
            ema_decay: 0.90,
        }
    }

    /// Plain supervised fine-tuning: no augmented twins, no extra terms.
    pub fn off() -> Self {
        Self {
            p_aug: 0.0,
            alpha_min: 0.0,
            alpha_max: 0.0,
            lambda_aug: 0.0,
            lambda_cons: 0.0,
            ema_decay: 0.90,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_aug) {
            return Err(Error::Config(format!("p_aug {} outside [0, 1]", self.p_aug)));
        }
        if !(0.0 <= self.alpha_min && self.alpha_min <= self.alpha_max && self.alpha_max <= 1.0) {
            return Err(Error::Config(format!(
                "alpha range [{}, {}] must satisfy 0 <= min <= max <= 1",
                self.alpha_min, self.alpha_max
            )));
        }
        if self.lambda_aug < 0.0 || self.lambda_cons < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema decay {} outside [0, 1)",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

// ---- style prototype ----

/// Running estimate of the target domain's style, seeded from K unlabeled
/// volumes and updated only through the EMA rule.
#[derive(Debug, Clone)]
pub struct StylePrototype {
    pub s_pro: Array1<f64>,
    pub k: usize,
    pub decay: f64,
}

/// Elementwise mean of the given style codes.
pub fn style_prototype(codes: &[Array1<f64>], decay: f64) -> Result<StylePrototype> {
    let first = codes
        .first()
        .ok_or_else(|| Error::Config("style prototype needs at least one code".into()))?;
    let d = first.len();
    if codes.iter().any(|c| c.len() != d) {
        return Err(Error::Config("style codes disagree on width".into()));
    }
    let mut s_pro = Array1::zeros(d);
    for c in codes {
        s_pro += c;
    }
    s_pro /= codes.len() as f64;
    Ok(StylePrototype {
        s_pro,
        k: codes.len(),
        decay,
    })
}

impl StylePrototype {
    /// s_pro = decay * s_pro + (1 - decay) * batch_mean.
    pub fn ema_update(&mut self, batch_mean: &Array1<f64>) {
        assert_eq!(batch_mean.len(), self.s_pro.len(), "prototype width");
        let d = self.decay;
        self.s_pro
            .zip_mut_with(batch_mean, |s, &b| *s = d * *s + (1.0 - d) * b);
    }
}

// ---- augmentation ----

/// Token-wise linear mix toward a broadcast prototype:
/// s' = (1 - alpha) * s + alpha * s_pro.
pub fn mix_styles(style: &Array2<f64>, s_pro: &Array1<f64>, alpha: f64) -> Array2<f64> {
    assert_eq!(style.ncols(), s_pro.len(), "style width");
    let shifted = s_pro.mapv(|x| x * alpha);
    let mut out = style.mapv(|x| x * (1.0 - alpha));
    for mut row in out.axis_iter_mut(Axis(0)) {
        row += &shifted;
    }
    out
}

/// Produces the augmented latent tokens for one volume through the frozen
/// model: factor the tokens, mix the style grid toward the prototype, and
/// decode the recombined factors. Content tokens pass through untouched and
/// no gradient flows into the pretrained weights.
pub fn style_augment(
    model: &Model,
    tokens: &Array2<f64>,
    s_pro: &Array1<f64>,
    alpha: f64,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {} outside [0, 1]", alpha)));
    }
    let dims = &model.dims;
    if s_pro.len() != dims.d_s {
        return Err(Error::Config(format!(
            "prototype width {} != style width {}",
            s_pro.len(),
            dims.d_s
        )));
    }
    if tokens.dim() != (dims.l(), dims.patch_dim()) {
        return Err(Error::Config(format!(
            "token grid {:?} does not match a {}-token volume of width {}",
            tokens.dim(),
            dims.l(),
            dims.patch_dim()
        )));
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let tok = tape.constant(tokens.clone());
    let (c, s) = {
        let mut f = Forward::new(&mut tape, &bound, dims);
        f.encode_to_factors(tok, 1)
    };
    let mixed = mix_styles(tape.value(s), s_pro, alpha);
    let mixed = tape.constant(mixed);
    let out = {
        let mut f = Forward::new(&mut tape, &bound, dims);
        let h = f.aggregate(c, mixed);
        f.decode(h, 1, None)
    };
    Ok(tape.value(out).clone())
}

/// Mean over rows of KL(softmax(aug) || softmax(clean)).
pub fn consistency_loss(tape: &mut Tape, logits_aug: TensorId, logits_clean: TensorId) -> TensorId {
    tape.kl_softmax(logits_aug, logits_clean)
}

// ---- dice ----

/// 2|A and B| / (|A| + |B|) for one class; 1.0 when the class is absent from
/// both masks.
pub fn dice(a: &[u8], b: &[u8], class: u8) -> f64 {
    assert_eq!(a.len(), b.len(), "mask length");
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let ia = x == class;
        let ib = y == class;
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Mean dice over the foreground classes 1..n_classes.
pub fn mean_foreground_dice(a: &[u8], b: &[u8], n_classes: usize) -> f64 {
    let fg = (1..n_classes).map(|c| dice(a, b, c as u8)).sum::<f64>();
    fg / (n_classes - 1) as f64
}

// ---- segmentation model ----

pub const SEG_ARRAYS: &str = "segmodel.mdar";
pub const SEG_META: &str = "segmodel.json";

/// Encoder-initialized segmentation head: the pretrained embed, positional
/// table, and encoder blocks, followed by fresh decoder blocks and a linear
/// per-token head that emits class logits for every latent voxel in the
/// token's patch. Token logits are unpacked to the latent grid and resampled
/// to volume resolution.
pub struct SegModel {
    pub dims: ModelDims,
    pub n_classes: usize,
    pub dec_blocks: usize,
    pub volume_side: usize,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct SegMeta {
    dims: ModelDims,
    n_classes: usize,
    dec_blocks: usize,
    volume_side: usize,
}

/// Copies embed, positional table, and encoder blocks from a pretrained
/// model into a head's store, resampling the positional table when the token
/// grids differ. Errors unless the full encoder transfers.
fn inherit_encoder_params(
    params: &mut ParamStore,
    dims: &ModelDims,
    model: &Model,
) -> Result<usize> {
    let mut copied = params.load_matching(&model.params);
    if model.dims.l() != dims.l() {
        if model.dims.d_h != dims.d_h {
            return Err(Error::Config(format!(
                "cannot inherit encoder across widths {} -> {}",
                model.dims.d_h, dims.d_h
            )));
        }
        *params.get_mut("pos") = resize_pos_embed(
            model.params.get("pos"),
            model.dims.tokens_per_side(),
            dims.tokens_per_side(),
        );
        copied += 1;
    }
    // embed.w, embed.b, pos, and 16 arrays per encoder block.
    let expected = 3 + 16 * dims.enc_blocks;
    if copied != expected {
        return Err(Error::Config(format!(
            "encoder inheritance copied {} arrays, expected {}",
            copied, expected
        )));
    }
    Ok(copied)
}

impl SegModel {
    pub fn init(
        dims: ModelDims,
        n_classes: usize,
        dec_blocks: usize,
        volume_side: usize,
        seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        if n_classes < 2 {
            return Err(Error::Config("segmentation needs at least 2 classes".into()));
        }
        if dec_blocks == 0 {
            return Err(Error::Config("seg decoder needs at least one block".into()));
        }
        if volume_side < dims.latent_side {
            return Err(Error::Config(format!(
                "volume side {} below latent side {}; logits cannot downsample",
                volume_side, dims.latent_side
            )));
        }
        let full = Model::init(dims.clone(), seed);
        let mut params = full.params.filtered(&["embed.", "pos", "enc."]);
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5e6dec);
        for i in 0..dec_blocks {
            insert_block_params(&mut params, &mut rng, &format!("segdec.{}", i), dims.d_h, dims.mlp_ratio);
        }
        insert_linear_params(
            &mut params,
            &mut rng,
            "seghead",
            dims.d_h,
            n_classes * dims.patch.pow(3),
        );
        Ok(Self {
            dims,
            n_classes,
            dec_blocks,
            volume_side,
            params,
        })
    }

    pub fn from_pretrained(
        model: &Model,
        n_classes: usize,
        dec_blocks: usize,
        volume_side: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut seg = Self::init(model.dims.clone(), n_classes, dec_blocks, volume_side, seed)?;
        seg.inherit_encoder(model)?;
        Ok(seg)
    }

    pub fn inherit_encoder(&mut self, model: &Model) -> Result<usize> {
        inherit_encoder_params(&mut self.params, &self.dims, model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_array_container(&dir.join(SEG_ARRAYS), &self.params.to_container())?;
        let meta = SegMeta {
            dims: self.dims.clone(),
            n_classes: self.n_classes,
            dec_blocks: self.dec_blocks,
            volume_side: self.volume_side,
        };
        let text = serde_json::to_string_pretty(&meta)?;
        std::fs::write(dir.join(SEG_META), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(SEG_META);
        if !meta_path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "no segmentation head at {}; run augment-train first",
                dir.display()
            )));
        }
        let meta: SegMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        let mut seg = Self::init(
            meta.dims,
            meta.n_classes,
            meta.dec_blocks,
            meta.volume_side,
            0,
        )?;
        let container = read_array_container(&dir.join(SEG_ARRAYS))?;
        seg.params.load_values(&container)?;
        Ok(seg)
    }

    /// Per-voxel class logits for a stacked batch of token grids. Rows come
    /// back volume-major: seqs * volume_side^3 rows of n_classes logits.
    pub fn seg_logits(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: TensorId,
        seqs: usize,
    ) -> TensorId {
        let l = self.dims.l();
        let grid = {
            let mut f = Forward::new(tape, bound, &self.dims);
            let h = f.embed(tokens);
            let mut h = f.encode(h, seqs);
            for i in 0..self.dec_blocks {
                h = f.block(&format!("segdec.{}", i), h, seqs);
            }
            f.linear("seghead", h)
        };
        let mut per_vol = Vec::with_capacity(seqs);
        for v in 0..seqs {
            let rows = tape.slice_rows(grid, v * l, (v + 1) * l);
            let vox = tape.voxelize_rows(rows, self.n_classes, self.dims.latent_side, self.dims.patch);
            per_vol.push(tape.upsample_trilinear(vox, self.dims.latent_side, self.volume_side));
        }
        if per_vol.len() == 1 {
            per_vol[0]
        } else {
            tape.concat_rows(&per_vol)
        }
    }
}

/// Argmax segmentation for one volume with frozen weights.
pub fn predict_seg(seg: &SegModel, tokens: &Array2<f64>) -> Vec<u8> {
    let mut tape = Tape::new();
    let bound = seg.params.bind(&mut tape, false);
    let tok = tape.constant(tokens.clone());
    let logits = seg.seg_logits(&mut tape, &bound, tok, 1);
    tape.value(logits)
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0usize;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// Equal-weight sum of mean cross-entropy and soft-Dice loss. The Dice term
/// averages the smoothed per-class ratio over every class channel including
/// background, so all-background volumes still carry a well-defined loss.
pub fn seg_task_loss(
    tape: &mut Tape,
    logits: TensorId,
    labels: &[usize],
    n_classes: usize,
) -> TensorId {
    let rows = labels.len();
    assert!(rows > 0, "empty label set");
    let ce = tape.cross_entropy_sum(logits, labels);
    let ce = tape.scale(ce, 1.0 / rows as f64);

    let p = tape.softmax_rows(logits);
    let mut onehot = Array2::zeros((rows, n_classes));
    for (i, &c) in labels.iter().enumerate() {
        onehot[[i, c]] = 1.0;
    }
    let y = tape.constant(onehot);
    let py = tape.mul(p, y);
    let inter = tape.col_sum(py);
    let psum = tape.col_sum(p);
    let ysum = tape.col_sum(y);
    let denom = tape.add(psum, ysum);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let den = tape.add_scalar(denom, DICE_EPS);
    let ratio = tape.div(num, den);
    let mean_dice = tape.mean_all(ratio);
    let neg = tape.scale(mean_dice, -1.0);
    let dice_loss = tape.add_scalar(neg, 1.0);

    let a = tape.scale(ce, 0.5);
    let b = tape.scale(dice_loss, 0.5);
    tape.add(a, b)
}

// ---- fine-tuning data ----

/// Everything fine-tuning needs, resident in memory: patch tokens and pooled
/// style codes per volume, voxel class masks rendered from each volume's
/// content record, and the per-volume content class for the classification
/// head.
pub struct SegData {
    pub tokens: Vec<Array2<f64>>,
    pub style_codes: Vec<Array1<f64>>,
    pub labels: Vec<Vec<u8>>,
    pub content_labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub n_domains: usize,
    pub volume_side: usize,
}

/// Loads cached latents plus per-volume masks and style codes. Masks are
/// re-rendered from the stored content records, so they are exact regardless
/// of tokenizer fidelity; style codes come from the frozen model.
pub fn load_seg_data(
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    cache_dir: &Path,
    model: &Model,
) -> Result<SegData> {
    let base = load_train_data(manifest, cache_dir, &model.dims)?;
    let mut labels = Vec::with_capacity(manifest.entries.len());
    let mut content_labels = Vec::with_capacity(manifest.entries.len());
    let mut style_codes = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let (_, sidecar) = read_volume(corpus_dir, &entry.stem)?;
        labels.push(render_seg_mask(&sidecar.content, manifest.side));
        content_labels.push(sidecar.content.content_label());
        let (lat, _) = read_latent(cache_dir, &entry.stem)?;
        let code = extract_codes(model, &lat, &entry.stem, entry.domain_id)?;
        style_codes.push(Array1::from(code.s0));
    }
    Ok(SegData {
        tokens: base.tokens,
        style_codes,
        labels,
        content_labels,
        domains: base.domains,
        n_domains: base.n_domains,
        volume_side: manifest.side,
    })
}

// ---- fine-tuning driver ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub labels: LabelBudget,
    /// Domain held out for evaluation; its volumes contribute unlabeled style
    /// codes only.
    pub target_domain: usize,
    /// Volumes seeding the style prototype.
    pub k_prototype: usize,
    /// Target volumes per prototype EMA update.
    pub proto_batch: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub aug: AugConfig,
    pub dec_blocks: usize,
    /// Skip encoder inheritance; architecture and seeds stay identical.
    pub from_scratch: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let labels = LabelBudget::Fraction(0.1);
        Self {
            labels,
            target_domain: 0,
            k_prototype: 4,
            proto_batch: 2,
            steps: 300,
            batch_size: 4,
            lr: 3e-4,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            clip_norm: 1.0,
            aug: AugConfig::for_budget(labels),
            dec_blocks: 2,
            from_scratch: false,
            seed: 23,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if self.k_prototype == 0 || self.proto_batch == 0 {
            return Err(Error::Config("prototype pools must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..=0.5).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside [0, 0.5]",
                self.warmup_frac
            )));
        }
        if self.dec_blocks == 0 {
            return Err(Error::Config("seg decoder needs at least one block".into()));
        }
        self.aug.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            warmup_frac: self.warmup_frac,
            total_steps: self.steps,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegReport {
    pub labels: String,
    pub target_domain: usize,
    pub from_scratch: bool,
    pub n_labeled: usize,
    pub n_eval: usize,
    pub steps: usize,
    pub final_loss: f64,
    /// Dice per foreground class, volume-averaged, classes 1..n_classes.
    pub dice_per_class: Vec<f64>,
    pub mean_dice: f64,
}

/// Splits the corpus around the target domain: labeled volumes come from the
/// shuffled non-target pool under the budget; the shuffled target domain
/// provides prototype sources first and evaluation volumes after (falling
/// back to the whole domain when the prototype consumes it).
struct DomainSplit {
    labeled: Vec<usize>,
    proto_src: Vec<usize>,
    eval: Vec<usize>,
}

fn split_domains(
    data: &SegData,
    cfg: &FinetuneConfig,
    rng: &mut ChaCha12Rng,
    aug_on: bool,
) -> Result<DomainSplit> {
    let n = data.tokens.len();
    if cfg.target_domain >= data.n_domains {
        return Err(Error::Config(format!(
            "target domain {} outside corpus range {}",
            cfg.target_domain, data.n_domains
        )));
    }
    let mut target: Vec<usize> = (0..n).filter(|&i| data.domains[i] == cfg.target_domain).collect();
    let mut pool: Vec<usize> = (0..n).filter(|&i| data.domains[i] != cfg.target_domain).collect();
    if pool.is_empty() {
        return Err(Error::Config(
            "no labeled volumes outside the target domain".into(),
        ));
    }
    if target.is_empty() {
        return Err(Error::Config("target domain has no volumes".into()));
    }
    shuffle(&mut pool, rng);
    shuffle(&mut target, rng);
    let n_labeled = cfg.labels.count(pool.len()).min(pool.len());
    let labeled = pool[..n_labeled].to_vec();
    let k = if aug_on { cfg.k_prototype.min(target.len()) } else { 0 };
    let proto_src = target[..k].to_vec();
    let eval = if target.len() > k {
        target[k..].to_vec()
    } else {
        target.clone()
    };
    Ok(DomainSplit {
        labeled,
        proto_src,
        eval,
    })
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Volume-averaged dice per foreground class over the eval set.
fn eval_dice(seg: &SegModel, data: &SegData, eval: &[usize]) -> (Vec<f64>, f64) {
    let mut per_class = vec![0.0; seg.n_classes - 1];
    for &v in eval {
        let pred = predict_seg(seg, &data.tokens[v]);
        for cls in 1..seg.n_classes {
            per_class[cls - 1] += dice(&pred, &data.labels[v], cls as u8);
        }
    }
    for d in per_class.iter_mut() {
        *d /= eval.len() as f64;
    }
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    (per_class, mean)
}

/// Fine-tunes a segmentation head against the combined supervised and
/// consistency objective, then reports Dice on the held-out target domain.
/// The pretrained model always drives the augmentation path; `from_scratch`
/// only controls whether the head inherits its encoder.
pub fn finetune_segmentation(
    model: &Model,
    data: &SegData,
    cfg: &FinetuneConfig,
) -> Result<(SegModel, SegReport)> {
    cfg.validate()?;
    let vs3 = data.volume_side.pow(3);
    if data.labels.iter().any(|m| m.len() != vs3) {
        return Err(Error::Config("mask length != volume_side^3".into()));
    }
    let aug_on = cfg.aug.p_aug > 0.0;
    if aug_on && data.style_codes.iter().any(|c| c.len() != model.dims.d_s) {
        return Err(Error::Config("style code width != model d_s".into()));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let split = split_domains(data, cfg, &mut rng, aug_on)?;
    let mut proto = if aug_on {
        let codes: Vec<Array1<f64>> = split
            .proto_src
            .iter()
            .map(|&i| data.style_codes[i].clone())
            .collect();
        Some(style_prototype(&codes, cfg.aug.ema_decay)?)
    } else {
        None
    };

    let mut seg = SegModel::init(
        model.dims.clone(),
        NUM_SEG_CLASSES,
        cfg.dec_blocks,
        data.volume_side,
        cfg.seed,
    )?;
    if !cfg.from_scratch {
        seg.inherit_encoder(model)?;
    }
    let mut opt = AdamW::new(&seg.params, cfg.adam());

    let l = seg.dims.l();
    let pd = seg.dims.patch_dim();
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| split.labeled[rng.gen_range(0..split.labeled.len())])
            .collect();
        let mut aug_views: Vec<Option<Array2<f64>>> = Vec::with_capacity(picks.len());
        for &v in &picks {
            if aug_on && rng.gen::<f64>() < cfg.aug.p_aug {
                let alpha = rng.gen_range(cfg.aug.alpha_min..=cfg.aug.alpha_max);
                let p = proto.as_ref().expect("prototype exists while augmenting");
                aug_views.push(Some(style_augment(model, &data.tokens[v], &p.s_pro, alpha)?));
            } else {
                aug_views.push(None);
            }
        }

        let b = picks.len();
        let mut tape = Tape::new();
        let bound = seg.params.bind(&mut tape, true);
        let mut clean = Array2::zeros((b * l, pd));
        for (bi, &v) in picks.iter().enumerate() {
            clean
                .slice_mut(s![bi * l..(bi + 1) * l, ..])
                .assign(&data.tokens[v]);
        }
        let clean = tape.constant(clean);
        let logits_clean = seg.seg_logits(&mut tape, &bound, clean, b);
        let mut labels: Vec<usize> = Vec::with_capacity(b * vs3);
        for &v in &picks {
            labels.extend(data.labels[v].iter().map(|&c| c as usize));
        }
        let l_sup = seg_task_loss(&mut tape, logits_clean, &labels, seg.n_classes);

        let aug_idx: Vec<usize> = (0..b).filter(|&i| aug_views[i].is_some()).collect();
        let total = if aug_idx.is_empty() {
            l_sup
        } else {
            let ba = aug_idx.len();
            let mut stack = Array2::zeros((ba * l, pd));
            for (bi, &i) in aug_idx.iter().enumerate() {
                stack
                    .slice_mut(s![bi * l..(bi + 1) * l, ..])
                    .assign(aug_views[i].as_ref().expect("augmented view"));
            }
            let aug_in = tape.constant(stack);
            let logits_aug = seg.seg_logits(&mut tape, &bound, aug_in, ba);
            let mut labels_aug: Vec<usize> = Vec::with_capacity(ba * vs3);
            for &i in &aug_idx {
                labels_aug.extend(data.labels[picks[i]].iter().map(|&c| c as usize));
            }
            let l_aug = seg_task_loss(&mut tape, logits_aug, &labels_aug, seg.n_classes);
            let clean_rows: Vec<TensorId> = aug_idx
                .iter()
                .map(|&i| tape.slice_rows(logits_clean, i * vs3, (i + 1) * vs3))
                .collect();
            let clean_sub = if clean_rows.len() == 1 {
                clean_rows[0]
            } else {
                tape.concat_rows(&clean_rows)
            };
            let l_cons = consistency_loss(&mut tape, logits_aug, clean_sub);
            let t_aug = tape.scale(l_aug, cfg.aug.lambda_aug);
            let t_cons = tape.scale(l_cons, cfg.aug.lambda_cons);
            let t = tape.add(l_sup, t_aug);
            tape.add(t, t_cons)
        };

        let val = tape.scalar(total);
        if !val.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite fine-tune loss {} at step {}",
                val, step
            )));
        }
        final_loss = val;
        tape.backward(total);
        let mut grads = bound.collect_grads(&tape, &seg.params);
        drop(tape);
        opt.step(&mut seg.params, &mut grads);

        if let Some(p) = proto.as_mut() {
            let all_target: Vec<usize> = (0..data.tokens.len())
                .filter(|&i| data.domains[i] == cfg.target_domain)
                .collect();
            let nb = cfg.proto_batch.min(all_target.len());
            let mut mean = Array1::zeros(model.dims.d_s);
            for _ in 0..nb {
                mean += &data.style_codes[all_target[rng.gen_range(0..all_target.len())]];
            }
            mean /= nb as f64;
            p.ema_update(&mean);
        }
    }

    let (dice_per_class, mean_dice) = eval_dice(&seg, data, &split.eval);
    let report = SegReport {
        labels: cfg.labels.to_string(),
        target_domain: cfg.target_domain,
        from_scratch: cfg.from_scratch,
        n_labeled: split.labeled.len(),
        n_eval: split.eval.len(),
        steps: cfg.steps,
        final_loss,
        dice_per_class,
        mean_dice,
    };
    Ok((seg, report))
}

// ---- classification preset ----

/// Volume classifier: the inherited encoder, token-mean pooling, and one
/// linear head over the pooled hidden state.
pub struct ClsModel {
    pub dims: ModelDims,
    pub n_classes: usize,
    pub params: ParamStore,
}

impl ClsModel {
    pub fn init(dims: ModelDims, n_classes: usize, seed: u64) -> Result<Self> {
        dims.validate()?;
        if n_classes < 2 {
            return Err(Error::Config("classification needs at least 2 classes".into()));
        }
        let full = Model::init(dims.clone(), seed);
        let mut params = full.params.filtered(&["embed.", "pos", "enc."]);
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xc1a55);
        insert_linear_params(&mut params, &mut rng, "clshead", dims.d_h, n_classes);
        Ok(Self {
            dims,
            n_classes,
            params,
        })
    }

    pub fn inherit_encoder(&mut self, model: &Model) -> Result<usize> {
        inherit_encoder_params(&mut self.params, &self.dims, model)
    }

    /// One logit row per volume in the stacked batch.
    pub fn logits(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: TensorId,
        seqs: usize,
    ) -> TensorId {
        let mut f = Forward::new(tape, bound, &self.dims);
        let h = f.embed(tokens);
        let h = f.encode(h, seqs);
        let pooled = f.pool(h);
        f.linear("clshead", pooled)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClsReport {
    pub labels: String,
    pub target_domain: usize,
    pub from_scratch: bool,
    pub n_labeled: usize,
    pub n_eval: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub accuracy: f64,
}

/// Classification twin of [`finetune_segmentation`]: same split, budget, and
/// augmentation scheme, with per-volume cross-entropy as the task loss and
/// target-domain accuracy in the report.
pub fn finetune_classification(
    model: &Model,
    data: &SegData,
    cfg: &FinetuneConfig,
) -> Result<(ClsModel, ClsReport)> {
    cfg.validate()?;
    let aug_on = cfg.aug.p_aug > 0.0;
    let n_classes = ContentSpec::num_content_classes();
    if data.content_labels.iter().any(|&c| c >= n_classes) {
        return Err(Error::Config("content label outside class range".into()));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let split = split_domains(data, cfg, &mut rng, aug_on)?;
    let mut proto = if aug_on {
        let codes: Vec<Array1<f64>> = split
            .proto_src
            .iter()
            .map(|&i| data.style_codes[i].clone())
            .collect();
        Some(style_prototype(&codes, cfg.aug.ema_decay)?)
    } else {
        None
    };

    let mut cls = ClsModel::init(model.dims.clone(), n_classes, cfg.seed)?;
    if !cfg.from_scratch {
        cls.inherit_encoder(model)?;
    }
    let mut opt = AdamW::new(&cls.params, cfg.adam());

    let l = cls.dims.l();
    let pd = cls.dims.patch_dim();
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| split.labeled[rng.gen_range(0..split.labeled.len())])
            .collect();
        let mut aug_views: Vec<Option<Array2<f64>>> = Vec::with_capacity(picks.len());
        for &v in &picks {
            if aug_on && rng.gen::<f64>() < cfg.aug.p_aug {
                let alpha = rng.gen_range(cfg.aug.alpha_min..=cfg.aug.alpha_max);
                let p = proto.as_ref().expect("prototype exists while augmenting");
                aug_views.push(Some(style_augment(model, &data.tokens[v], &p.s_pro, alpha)?));
            } else {
                aug_views.push(None);
            }
        }

        let b = picks.len();
        let mut tape = Tape::new();
        let bound = cls.params.bind(&mut tape, true);
        let mut clean = Array2::zeros((b * l, pd));
        for (bi, &v) in picks.iter().enumerate() {
            clean
                .slice_mut(s![bi * l..(bi + 1) * l, ..])
                .assign(&data.tokens[v]);
        }
        let clean = tape.constant(clean);
        let logits_clean = cls.logits(&mut tape, &bound, clean, b);
        let labels: Vec<usize> = picks.iter().map(|&v| data.content_labels[v]).collect();
        let ce = tape.cross_entropy_sum(logits_clean, &labels);
        let l_sup = tape.scale(ce, 1.0 / b as f64);

        let aug_idx: Vec<usize> = (0..b).filter(|&i| aug_views[i].is_some()).collect();
        let total = if aug_idx.is_empty() {
            l_sup
        } else {
            let ba = aug_idx.len();
            let mut stack = Array2::zeros((ba * l, pd));
            for (bi, &i) in aug_idx.iter().enumerate() {
                stack
                    .slice_mut(s![bi * l..(bi + 1) * l, ..])
                    .assign(aug_views[i].as_ref().expect("augmented view"));
            }
            let aug_in = tape.constant(stack);
            let logits_aug = cls.logits(&mut tape, &bound, aug_in, ba);
            let labels_aug: Vec<usize> = aug_idx.iter().map(|&i| labels[i]).collect();
            let ce_aug = tape.cross_entropy_sum(logits_aug, &labels_aug);
            let l_aug = tape.scale(ce_aug, 1.0 / ba as f64);
            let clean_rows: Vec<TensorId> = aug_idx
                .iter()
                .map(|&i| tape.slice_rows(logits_clean, i, i + 1))
                .collect();
            let clean_sub = if clean_rows.len() == 1 {
                clean_rows[0]
            } else {
                tape.concat_rows(&clean_rows)
            };
            let l_cons = consistency_loss(&mut tape, logits_aug, clean_sub);
            let t_aug = tape.scale(l_aug, cfg.aug.lambda_aug);
            let t_cons = tape.scale(l_cons, cfg.aug.lambda_cons);
            let t = tape.add(l_sup, t_aug);
            tape.add(t, t_cons)
        };

        let val = tape.scalar(total);
        if !val.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite fine-tune loss {} at step {}",
                val, step
            )));
        }
        final_loss = val;
        tape.backward(total);
        let mut grads = bound.collect_grads(&tape, &cls.params);
        drop(tape);
        opt.step(&mut cls.params, &mut grads);

        if let Some(p) = proto.as_mut() {
            let all_target: Vec<usize> = (0..data.tokens.len())
                .filter(|&i| data.domains[i] == cfg.target_domain)
                .collect();
            let nb = cfg.proto_batch.min(all_target.len());
            let mut mean = Array1::zeros(model.dims.d_s);
            for _ in 0..nb {
                mean += &data.style_codes[all_target[rng.gen_range(0..all_target.len())]];
            }
            mean /= nb as f64;
            p.ema_update(&mean);
        }
    }

    let mut correct = 0usize;
    for &v in &split.eval {
        let mut tape = Tape::new();
        let bound = cls.params.bind(&mut tape, false);
        let tok = tape.constant(data.tokens[v].clone());
        let logits = cls.logits(&mut tape, &bound, tok, 1);
        let row = tape.value(logits);
        let mut best = 0usize;
        for j in 0..row.ncols() {
            if row[[0, j]] > row[[0, best]] {
                best = j;
            }
        }
        if best == data.content_labels[v] {
            correct += 1;
        }
    }
    let report = ClsReport {
        labels: cfg.labels.to_string(),
        target_domain: cfg.target_domain,
        from_scratch: cfg.from_scratch,
        n_labeled: split.labeled.len(),
        n_eval: split.eval.len(),
        steps: cfg.steps,
        final_loss,
        accuracy: correct as f64 / split.eval.len() as f64,
    };
    Ok((cls, report))
}
