//! Training loop: pair sampling, the per-step forward graph of the demixing
//! pipeline, loss assembly, optimizer and EMA teacher updates, metrics, and
//! bit-exact checkpointing.
//!
//! One step builds the whole graph on a fresh tape: mix, encode, unmix with
//! mask-token fill, factorize, domain heads, aggregate, decode, the two
//! re-encoding passes (distillation and quadruplet), then a single backward
//! sweep. Teacher parameters are bound as constants so they can never
//! receive gradient; teacher-derived tensors are additionally stop-gradient
//! wrapped inside the losses.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use meduet_tensor::{Tape, TensorId};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::arrayio::{bytes_sha256, read_array_container, write_array_container};
use crate::corpus::CorpusManifest;
use crate::losses::{
    domain_loss, masked_token_distill, mftd_loss, siqc_loss, total_loss, FactorStreams,
};
use crate::mixing::{
    mix, sample_mask, stream_weight_cols, MaskMode, MixMask, ReconForm, ReconScope,
    dual_recon_loss,
};
use crate::model::{patchify, Forward, Model, ModelDims};
use crate::optim::{ema_decay_at, AdamConfig, AdamW};
use crate::params::{BoundParams, ParamStore};
use crate::tokenizer::read_latent;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct Seeds {
    pub init: u64,
    pub sampler: u64,
    pub mask: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { init: 7, sampler: 11, mask: 13 }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct Ablation {
    pub no_ld: bool,
    pub no_mftd: bool,
    pub no_siqc: bool,
    /// Drops the factor split entirely: no domain loss, no quadruplet
    /// contrast, distillation on raw encoder tokens.
    pub no_disent: bool,
    /// Vanilla masked reconstruction: each volume is encoded alone with its
    /// own zeroed-out positions, streams cover the full grid, and every
    /// position is scored.
    pub no_demix: bool,
}

impl Ablation {
    pub fn any(&self) -> bool {
        self.no_ld || self.no_mftd || self.no_siqc || self.no_disent || self.no_demix
    }

    /// Enables one flag by its external name (case-insensitive).
    pub fn set(&mut self, name: &str) -> Result<()> {
        match name.to_ascii_lowercase().as_str() {
            "no_ld" => self.no_ld = true,
            "no_mftd" => self.no_mftd = true,
            "no_siqc" => self.no_siqc = true,
            "no_disent" => self.no_disent = true,
            "no_demix" => self.no_demix = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation '{}' (expected no_Ld, no_MFTD, no_SiQC, no_disent, no_demix)",
                    other
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// Pairs per step; each pair consumes two distinct volumes.
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_c: f64,
    /// Probability that a token comes from the first volume of the pair.
    pub rho: f64,
    pub mask_block: usize,
    pub mask_mode: MaskMode,
    /// Fraction of total steps before distillation turns on.
    pub mftd_activation_frac: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub grl_lambda: f64,
    pub recon_form: ReconForm,
    pub recon_scope: ReconScope,
    pub force_cross_domain: bool,
    pub log_every: usize,
    /// Overwrite the checkpoint every n steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Upper bound on scalar parameters, enforced before allocation.
    pub max_params: usize,
    pub ablation: Ablation,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            clip_norm: 1.0,
            lambda1: 0.2,
            lambda2: 0.5,
            lambda3: 0.3,
            lambda_c: 0.5,
            rho: 0.5,
            mask_block: 1,
            mask_mode: MaskMode::Bernoulli,
            mftd_activation_frac: 0.2,
            ema_start: 0.997,
            ema_end: 0.9997,
            grl_lambda: 1.0,
            recon_form: ReconForm::MeanPerElement,
            recon_scope: ReconScope::MaskedAsEq1,
            force_cross_domain: false,
            log_every: 50,
            checkpoint_every: 0,
            max_params: 20_000_000,
            ablation: Ablation::default(),
            seeds: Seeds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda_c", self.lambda_c),
            ("grl_lambda", self.grl_lambda),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{} must be >= 0, got {}", name, v)));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(0.0 < self.ema_start && self.ema_start <= self.ema_end && self.ema_end < 1.0) {
            return Err(Error::Config(format!(
                "EMA decay range ({}, {}) violates 0 < start <= end < 1",
                self.ema_start, self.ema_end
            )));
        }
        if !(0.0..=1.0).contains(&self.mftd_activation_frac) {
            return Err(Error::Config("mftd_activation_frac outside [0, 1]".into()));
        }
        Ok(())
    }

    /// First step index at which distillation is active.
    pub fn mftd_activation_step(&self) -> usize {
        (self.mftd_activation_frac * self.total_steps as f64).floor() as usize
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            warmup_frac: self.warmup_frac,
            total_steps: self.total_steps,
            clip_norm: self.clip_norm,
        }
    }
}

/// Pretraining inputs: one token grid (L x patch_dim) and one domain label
/// per volume.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub tokens: Vec<Array2<f64>>,
    pub domains: Vec<usize>,
    pub n_domains: usize,
    pub tokenizer_hash: Option<String>,
}

/// Loads cached latents listed in the manifest and patchifies them into
/// token grids matching `dims`.
pub fn load_train_data(
    manifest: &CorpusManifest,
    cache_dir: &Path,
    dims: &ModelDims,
) -> Result<TrainData> {
    let mut tokens = Vec::with_capacity(manifest.entries.len());
    let mut domains = Vec::with_capacity(manifest.entries.len());
    let mut hash: Option<String> = None;
    for entry in &manifest.entries {
        let (lat, sidecar) = read_latent(cache_dir, &entry.stem)?;
        if lat.channels != dims.c_lat || lat.side != dims.latent_side {
            return Err(Error::Config(format!(
                "latent {} has shape ({}, {}^3) but model expects ({}, {}^3)",
                entry.stem, lat.channels, lat.side, dims.c_lat, dims.latent_side
            )));
        }
        if sidecar.domain_id >= manifest.n_domains {
            return Err(Error::Config(format!(
                "latent {} has domain {} outside corpus range {}",
                entry.stem, sidecar.domain_id, manifest.n_domains
            )));
        }
        match &hash {
            None => hash = Some(sidecar.tokenizer_hash.clone()),
            Some(h) if *h != sidecar.tokenizer_hash => {
                return Err(Error::MissingPrerequisite(format!(
                    "latent cache mixes tokenizers ({} vs {}); re-run tokenization",
                    h, sidecar.tokenizer_hash
                )))
            }
            _ => {}
        }
        tokens.push(patchify(&lat, dims.patch));
        domains.push(sidecar.domain_id);
    }
    Ok(TrainData {
        tokens,
        domains,
        n_domains: manifest.n_domains,
        tokenizer_hash: hash,
    })
}

/// One step's sampled pairs and masks. In demixing mode there is one mix
/// mask per pair; in no_demix mode there is one visibility mask per member
/// (all firsts, then all seconds).
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub pairs: Vec<(usize, usize)>,
    pub masks: Vec<MixMask>,
}

/// Draws `batch_size` pairs without replacement from the volume pool and one
/// mask per pair (or per member in no_demix mode).
pub fn sample_step_batch(
    cfg: &TrainConfig,
    dims: &ModelDims,
    data: &TrainData,
    sampler_rng: &mut ChaCha12Rng,
    mask_rng: &mut ChaCha12Rng,
) -> Result<StepBatch> {
    let n = data.tokens.len();
    let want = 2 * cfg.batch_size;
    if n < want {
        return Err(Error::Config(format!(
            "corpus has {} volumes but a batch of {} pairs needs {}",
            n, cfg.batch_size, want
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..want {
        let j = sampler_rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut pairs: Vec<(usize, usize)> =
        (0..cfg.batch_size).map(|p| (idx[2 * p], idx[2 * p + 1])).collect();

    if cfg.force_cross_domain {
        for p in 0..pairs.len() {
            if data.domains[pairs[p].0] != data.domains[pairs[p].1] {
                continue;
            }
            let fixed = (0..pairs.len()).find(|&q| {
                q != p
                    && data.domains[pairs[q].1] != data.domains[pairs[p].0]
                    && data.domains[pairs[p].1] != data.domains[pairs[q].0]
            });
            match fixed {
                Some(q) => {
                    let (a, b) = (pairs[p].1, pairs[q].1);
                    pairs[p].1 = b;
                    pairs[q].1 = a;
                }
                None => {
                    return Err(Error::Config(
                        "force_cross_domain could not build cross-domain pairs; \
                         corpus may be single-domain"
                            .into(),
                    ))
                }
            }
        }
    }

    let n_masks = if cfg.ablation.no_demix { want } else { cfg.batch_size };
    let masks = (0..n_masks)
        .map(|_| sample_mask(dims.l(), cfg.rho, cfg.mask_block, cfg.mask_mode, mask_rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(StepBatch { pairs, masks })
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub l_r: TensorId,
    pub l_d: Option<TensorId>,
    pub l_mftd: Option<TensorId>,
    pub l_siqc: Option<TensorId>,
    pub total: TensorId,
}

/// Builds the full per-step loss graph on `tape`. Exposed separately from
/// the step driver so tests can bind the teacher trainably and assert its
/// gradients stay empty.
pub fn build_step_graph(
    tape: &mut Tape,
    dims: &ModelDims,
    cfg: &TrainConfig,
    student: &BoundParams,
    teacher: &BoundParams,
    data: &TrainData,
    batch: &StepBatch,
    mftd_active: bool,
) -> Result<StepLosses> {
    let abl = cfg.ablation;
    let b = batch.pairs.len();
    let l = dims.l();
    let pd = dims.patch_dim();

    let mut zi = Array2::zeros((b * l, pd));
    let mut zj = Array2::zeros((b * l, pd));
    for (p, &(i, j)) in batch.pairs.iter().enumerate() {
        zi.slice_mut(s![p * l..(p + 1) * l, ..]).assign(&data.tokens[i]);
        zj.slice_mut(s![p * l..(p + 1) * l, ..]).assign(&data.tokens[j]);
    }
    let zi_c = tape.constant(zi.clone());
    let zj_c = tape.constant(zj.clone());

    // Encode and split into the two per-source streams (b sequences each).
    let (hi, hj, recon_masks) = if !abl.no_demix {
        let mut zmix = Array2::zeros((b * l, pd));
        for (p, &(i, j)) in batch.pairs.iter().enumerate() {
            let m = mix(&data.tokens[i], &data.tokens[j], &batch.masks[p]);
            zmix.slice_mut(s![p * l..(p + 1) * l, ..]).assign(&m);
        }
        let zmix_c = tape.constant(zmix);
        let h = {
            let mut f = Forward::new(tape, student, dims);
            let e = f.embed(zmix_c);
            f.encode(e, b)
        };
        let keep_i: Vec<bool> = batch.masks.iter().flat_map(|m| m.m.iter().copied()).collect();
        let keep_j: Vec<bool> = keep_i.iter().map(|&k| !k).collect();
        let mask_tok = student.id("mask_token");
        let hi = tape.fill_rows(h, mask_tok, &keep_i);
        let hj = tape.fill_rows(h, mask_tok, &keep_j);
        (hi, hj, batch.masks.clone())
    } else {
        // Each member is encoded alone with its own hidden positions zeroed;
        // streams then cover the full grid.
        assert_eq!(batch.masks.len(), 2 * b, "no_demix needs one mask per member");
        let mut stack = Array2::zeros((2 * b * l, pd));
        for (p, &(i, j)) in batch.pairs.iter().enumerate() {
            let mut vi = data.tokens[i].clone();
            for (t, &visible) in batch.masks[p].m.iter().enumerate() {
                if !visible {
                    vi.row_mut(t).fill(0.0);
                }
            }
            let mut vj = data.tokens[j].clone();
            for (t, &visible) in batch.masks[b + p].m.iter().enumerate() {
                if !visible {
                    vj.row_mut(t).fill(0.0);
                }
            }
            stack.slice_mut(s![p * l..(p + 1) * l, ..]).assign(&vi);
            stack
                .slice_mut(s![(b + p) * l..(b + p + 1) * l, ..])
                .assign(&vj);
        }
        let stack_c = tape.constant(stack);
        let h = {
            let mut f = Forward::new(tape, student, dims);
            let e = f.embed(stack_c);
            f.encode(e, 2 * b)
        };
        let hi = tape.slice_rows(h, 0, b * l);
        let hj = tape.slice_rows(h, b * l, 2 * b * l);
        (hi, hj, vec![MixMask::all_from_first(l); b])
    };

    // Factor split (token-wise) unless disentanglement is ablated.
    let factors = if !abl.no_disent {
        let mut f = Forward::new(tape, student, dims);
        let (ci, si) = f.factorize(hi);
        let (cj, sj) = f.factorize(hj);
        Some((ci, si, cj, sj))
    } else {
        None
    };

    // Domain-adversarial loss on pooled factors.
    let l_d = match factors {
        Some((ci, si, cj, sj)) if !abl.no_ld => {
            let (content, style) = {
                let mut f = Forward::new(tape, student, dims);
                let pci = f.pool(ci);
                let pcj = f.pool(cj);
                let psi = f.pool(si);
                let psj = f.pool(sj);
                let pc = f.tape.concat_rows(&[pci, pcj]);
                let ps = f.tape.concat_rows(&[psi, psj]);
                f.classify_domains(pc, ps, cfg.grl_lambda)
            };
            let labels: Vec<usize> = batch
                .pairs
                .iter()
                .map(|&(i, _)| data.domains[i])
                .chain(batch.pairs.iter().map(|&(_, j)| data.domains[j]))
                .collect();
            Some(domain_loss(tape, content, style, &labels)?)
        }
        _ => None,
    };

    // Reconstruction through aggregate + decoder (or the raw stream when the
    // factor split is ablated).
    let (zhat_i, zhat_j) = {
        let mut f = Forward::new(tape, student, dims);
        let dec_in_i = match factors {
            Some((ci, si, _, _)) => f.aggregate(ci, si),
            None => hi,
        };
        let dec_in_j = match factors {
            Some((_, _, cj, sj)) => f.aggregate(cj, sj),
            None => hj,
        };
        let zhat_i = f.decode(dec_in_i, b, None);
        let zhat_j = f.decode(dec_in_j, b, None);
        (zhat_i, zhat_j)
    };
    let scope = if abl.no_demix { ReconScope::Full } else { cfg.recon_scope };
    let l_r = dual_recon_loss(
        tape,
        zhat_i,
        zi_c,
        zhat_j,
        zj_c,
        &recon_masks,
        cfg.recon_form,
        scope,
    );

    // Distillation: re-encode both reconstructions through student and
    // teacher, score factor (or token) discrepancies on each stream's
    // visible region.
    let l_mftd = if mftd_active && !abl.no_mftd {
        let stacked = tape.concat_rows(&[zhat_i, zhat_j]);
        let (w_i, w_j) = if abl.no_demix {
            let ones = Array2::ones((b * l, 1));
            (tape.constant(ones.clone()), tape.constant(ones))
        } else {
            let (wi, wj) = stream_weight_cols(&recon_masks, ReconScope::MaskedAsEq1);
            (tape.constant(wi), tape.constant(wj))
        };
        if !abl.no_disent {
            let (sc, ss) = {
                let mut f = Forward::new(tape, student, dims);
                f.encode_to_factors(stacked, 2 * b)
            };
            let (tc, ts) = {
                let mut f = Forward::new(tape, teacher, dims);
                f.encode_to_factors(stacked, 2 * b)
            };
            let half = b * l;
            let st = FactorStreams {
                c_i: tape.slice_rows(sc, 0, half),
                s_i: tape.slice_rows(ss, 0, half),
                c_j: tape.slice_rows(sc, half, 2 * half),
                s_j: tape.slice_rows(ss, half, 2 * half),
            };
            let te = FactorStreams {
                c_i: tape.slice_rows(tc, 0, half),
                s_i: tape.slice_rows(ts, 0, half),
                c_j: tape.slice_rows(tc, half, 2 * half),
                s_j: tape.slice_rows(ts, half, 2 * half),
            };
            Some(mftd_loss(tape, st, te, &recon_masks, cfg.lambda_c))
        } else {
            // Token-level distillation on raw encoder outputs.
            let hs = {
                let mut f = Forward::new(tape, student, dims);
                let e = f.embed(stacked);
                f.encode(e, 2 * b)
            };
            let ht = {
                let mut f = Forward::new(tape, teacher, dims);
                let e = f.embed(stacked);
                f.encode(e, 2 * b)
            };
            let half = b * l;
            let hs_i = tape.slice_rows(hs, 0, half);
            let hs_j = tape.slice_rows(hs, half, 2 * half);
            let ht_i = tape.slice_rows(ht, 0, half);
            let ht_j = tape.slice_rows(ht, half, 2 * half);
            Some(masked_token_distill(tape, hs_i, ht_i, hs_j, ht_j, w_i, w_j))
        }
    } else {
        None
    };

    // Quadruplet contrast over swapped views.
    let l_siqc = match factors {
        Some((ci, si, cj, sj)) if !abl.no_siqc => {
            let (z_ij, z_ji) = {
                let mut f = Forward::new(tape, student, dims);
                let a_ij = f.aggregate(ci, sj);
                let a_ji = f.aggregate(cj, si);
                let z_ij = f.decode(a_ij, b, None);
                let z_ji = f.decode(a_ji, b, None);
                (z_ij, z_ji)
            };
            let quad = tape.concat_rows(&[zi_c, zj_c, z_ij, z_ji]);
            let pooled = |tape: &mut Tape, bound: &BoundParams| {
                let (c, s) = {
                    let mut f = Forward::new(tape, bound, dims);
                    f.encode_to_factors(quad, 4 * b)
                };
                let pc = tape.pool_rows(c, l);
                let ps = tape.pool_rows(s, l);
                let nc = tape.l2_normalize_rows(pc, 1e-12);
                let ns = tape.l2_normalize_rows(ps, 1e-12);
                (nc, ns)
            };
            let (qc_blocks, qs_blocks) = pooled(tape, student);
            let (kc_blocks, ks_blocks) = pooled(tape, teacher);
            // Blocks are view-major (all i, all j, all ij, all ji); the
            // contrast wants quadruplet-major rows.
            let interleave = |tape: &mut Tape, blocks: TensorId| {
                let parts: Vec<TensorId> = (0..4)
                    .map(|v| tape.slice_rows(blocks, v * b, (v + 1) * b))
                    .collect();
                tape.interleave_rows(&parts)
            };
            let qc = interleave(tape, qc_blocks);
            let qs = interleave(tape, qs_blocks);
            let kc = interleave(tape, kc_blocks);
            let ks = interleave(tape, ks_blocks);
            let alpha_c = student.id("alpha_c");
            let alpha_s = student.id("alpha_s");
            Some(siqc_loss(tape, qc, kc, qs, ks, alpha_c, alpha_s))
        }
        _ => None,
    };

    let total = total_loss(tape, l_r, l_d, l_mftd, l_siqc, cfg.lambda1, cfg.lambda2, cfg.lambda3);
    Ok(StepLosses { l_r, l_d, l_mftd, l_siqc, total })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub l_r: f64,
    pub l_d: Option<f64>,
    pub l_mftd: Option<f64>,
    pub l_siqc: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub ema_decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    /// ChaCha word position, decimal u128.
    word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    step: usize,
    dims: ModelDims,
    train: TrainConfig,
    config_hash: String,
    tokenizer_hash: Option<String>,
    sampler_rng: RngState,
    mask_rng: RngState,
    metrics: Vec<MetricRecord>,
}

pub const CHECKPOINT_ARRAYS: &str = "checkpoint.mdar";
pub const CHECKPOINT_META: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Hash of everything that defines a run's computation.
pub fn config_hash(dims: &ModelDims, cfg: &TrainConfig) -> String {
    let blob = serde_json::to_vec(&(dims, cfg)).expect("config serializes");
    bytes_sha256(&blob)
}

pub struct Trainer {
    pub dims: ModelDims,
    pub cfg: TrainConfig,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub opt: AdamW,
    pub step: usize,
    pub metrics: Vec<MetricRecord>,
    pub tokenizer_hash: Option<String>,
    sampler_rng: ChaCha12Rng,
    mask_rng: ChaCha12Rng,
}

impl Trainer {
    pub fn new(dims: ModelDims, cfg: TrainConfig) -> Result<Self> {
        dims.validate()?;
        cfg.validate()?;
        let count = dims.param_count();
        if count > cfg.max_params {
            return Err(Error::Config(format!(
                "model would hold {} parameters, above the {} limit",
                count, cfg.max_params
            )));
        }
        let model = Model::init(dims.clone(), cfg.seeds.init);
        let teacher = model.teacher_init();
        let opt = AdamW::new(&model.params, cfg.adam());
        let sampler_rng = ChaCha12Rng::seed_from_u64(cfg.seeds.sampler);
        let mask_rng = ChaCha12Rng::seed_from_u64(cfg.seeds.mask);
        Ok(Self {
            dims,
            cfg,
            student: model.params,
            teacher,
            opt,
            step: 0,
            metrics: Vec::new(),
            tokenizer_hash: None,
            sampler_rng,
            mask_rng,
        })
    }

    pub fn mftd_active(&self) -> bool {
        !self.cfg.ablation.no_mftd && self.step >= self.cfg.mftd_activation_step()
    }

    /// Runs one full Algorithm-1 iteration and advances the step counter.
    pub fn train_step(&mut self, data: &TrainData) -> Result<MetricRecord> {
        if data.n_domains != self.dims.n_domains {
            return Err(Error::Config(format!(
                "corpus has {} domains but model heads expect {}",
                data.n_domains, self.dims.n_domains
            )));
        }
        let batch = sample_step_batch(
            &self.cfg,
            &self.dims,
            data,
            &mut self.sampler_rng,
            &mut self.mask_rng,
        )?;
        let mftd_active = self.mftd_active();

        let mut tape = Tape::new();
        let student = self.student.bind(&mut tape, true);
        let teacher = self.teacher.bind(&mut tape, false);
        let losses = build_step_graph(
            &mut tape,
            &self.dims,
            &self.cfg,
            &student,
            &teacher,
            data,
            &batch,
            mftd_active,
        )?;
        let total = tape.scalar(losses.total);
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {} at step {}",
                total, self.step
            )));
        }
        let record = MetricRecord {
            step: self.step,
            lr: self.opt.lr_at(self.opt.steps_taken()),
            l_r: tape.scalar(losses.l_r),
            l_d: losses.l_d.map(|id| tape.scalar(id)),
            l_mftd: losses.l_mftd.map(|id| tape.scalar(id)),
            l_siqc: losses.l_siqc.map(|id| tape.scalar(id)),
            total,
            grad_norm: 0.0,
            ema_decay: ema_decay_at(
                self.step,
                self.cfg.total_steps,
                self.cfg.ema_start,
                self.cfg.ema_end,
            ),
        };

        tape.backward(losses.total);
        let mut grads = student.collect_grads(&tape, &self.student);
        drop(tape);
        let grad_norm = self.opt.step(&mut self.student, &mut grads);
        self.teacher.ema_update(&self.student, record.ema_decay);
        self.step += 1;
        Ok(MetricRecord { grad_norm, ..record })
    }

    /// Runs to total_steps, streaming metrics and checkpointing into
    /// `out_dir`. On a non-finite loss the last-good state is saved before
    /// the error propagates.
    pub fn run(&mut self, data: &TrainData, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir)?;
        self.tokenizer_hash = data.tokenizer_hash.clone();
        let metrics_path = out_dir.join(METRICS_FILE);
        let mut sink = if self.step == 0 {
            fs::File::create(&metrics_path)?
        } else {
            fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?
        };

        while self.step < self.cfg.total_steps {
            match self.train_step(data) {
                Ok(rec) => {
                    let log_every = self.cfg.log_every.max(1);
                    if rec.step % log_every == 0 || rec.step + 1 == self.cfg.total_steps {
                        writeln!(sink, "{}", serde_json::to_string(&rec)?)?;
                        self.metrics.push(rec);
                    }
                    if self.cfg.checkpoint_every > 0
                        && self.step % self.cfg.checkpoint_every == 0
                        && self.step < self.cfg.total_steps
                    {
                        self.save_checkpoint(out_dir)?;
                    }
                }
                Err(e @ Error::Numerical(_)) => {
                    // Parameters are untouched for the failing step; persist
                    // them so the run can be inspected or resumed.
                    self.save_checkpoint(out_dir)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        self.save_checkpoint(out_dir)?;
        Ok(out_dir.join(CHECKPOINT_ARRAYS))
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for (name, arr) in self.student.iter() {
            entries.insert(format!("student.{}", name), arr.clone());
        }
        for (name, arr) in self.teacher.iter() {
            entries.insert(format!("teacher.{}", name), arr.clone());
        }
        for (key, arr) in self.opt.state_entries(&self.student) {
            entries.insert(key, arr);
        }
        entries.insert("step".into(), Array2::from_elem((1, 1), self.step as f64));
        write_array_container(&dir.join(CHECKPOINT_ARRAYS), &entries)?;

        let meta = CheckpointMeta {
            version: 1,
            step: self.step,
            dims: self.dims.clone(),
            train: self.cfg.clone(),
            config_hash: config_hash(&self.dims, &self.cfg),
            tokenizer_hash: self.tokenizer_hash.clone(),
            sampler_rng: RngState {
                seed: self.cfg.seeds.sampler,
                word_pos: self.sampler_rng.get_word_pos().to_string(),
            },
            mask_rng: RngState {
                seed: self.cfg.seeds.mask,
                word_pos: self.mask_rng.get_word_pos().to_string(),
            },
            metrics: self.metrics.clone(),
        };
        fs::write(dir.join(CHECKPOINT_META), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let meta_raw = fs::read_to_string(dir.join(CHECKPOINT_META)).map_err(|_| {
            Error::MissingPrerequisite(format!(
                "no checkpoint metadata in {}; run pretraining first",
                dir.display()
            ))
        })?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_raw)?;
        let entries = read_array_container(&dir.join(CHECKPOINT_ARRAYS))?;

        let mut trainer = Trainer::new(meta.dims, meta.train)?;
        let strip = |prefix: &str| -> BTreeMap<String, Array2<f64>> {
            entries
                .iter()
                .filter_map(|(k, v)| {
                    k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone()))
                })
                .collect()
        };
        trainer.student.load_values(&strip("student."))?;
        trainer.teacher.load_values(&strip("teacher."))?;
        trainer.opt.load_state(&trainer.student, &entries)?;
        trainer.step = meta.step;
        trainer.metrics = meta.metrics;
        trainer.tokenizer_hash = meta.tokenizer_hash;
        let parse_pos = |s: &str| -> Result<u128> {
            s.parse()
                .map_err(|_| Error::Config(format!("bad RNG position '{}' in checkpoint", s)))
        };
        trainer.sampler_rng = ChaCha12Rng::seed_from_u64(meta.sampler_rng.seed);
        trainer.sampler_rng.set_word_pos(parse_pos(&meta.sampler_rng.word_pos)?);
        trainer.mask_rng = ChaCha12Rng::seed_from_u64(meta.mask_rng.seed);
        trainer.mask_rng.set_word_pos(parse_pos(&meta.mask_rng.word_pos)?);
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            c_lat: 2,
            latent_side: 4,
            patch: 2,
            d_h: 16,
            d_c: 8,
            d_s: 4,
            enc_blocks: 2,
            dec_blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            clf_hidden: 8,
            n_domains: 3,
        }
    }

    fn tiny_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            batch_size: 2,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(dims: &ModelDims, n: usize) -> TrainData {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let l = dims.l();
        let pd = dims.patch_dim();
        let tokens = (0..n)
            .map(|_| Array2::from_shape_fn((l, pd), |_| rng.gen::<f64>() - 0.5))
            .collect();
        let domains = (0..n).map(|v| v % 3).collect();
        TrainData { tokens, domains, n_domains: 3, tokenizer_hash: None }
    }

    #[test]
    fn zero_steps_leaves_initial_parameters() {
        let dims = tiny_dims();
        let data = tiny_data(&dims, 6);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(dims.clone(), tiny_cfg(0)).unwrap();
        t.run(&data, dir.path()).unwrap();
        let fresh = Model::init(dims, TrainConfig::default().seeds.init);
        for ((_, a), (_, b)) in t.student.iter().zip(fresh.params.iter()) {
            assert_eq!(a, b);
        }
        assert!(dir.path().join(CHECKPOINT_ARRAYS).exists());
    }

    #[test]
    fn training_is_deterministic_in_the_seeds() {
        let dims = tiny_dims();
        let data = tiny_data(&dims, 8);
        let mut a = Trainer::new(dims.clone(), tiny_cfg(4)).unwrap();
        let mut b = Trainer::new(dims, tiny_cfg(4)).unwrap();
        for _ in 0..4 {
            let ra = a.train_step(&data).unwrap();
            let rb = b.train_step(&data).unwrap();
            assert_eq!(ra, rb);
        }
        for ((_, x), (_, y)) in a.student.iter().zip(b.student.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let dims = tiny_dims();
        let data = tiny_data(&dims, 8);
        let dir = tempfile::tempdir().unwrap();

        let mut straight = Trainer::new(dims.clone(), tiny_cfg(6)).unwrap();
        let mut records = Vec::new();
        for _ in 0..6 {
            records.push(straight.train_step(&data).unwrap());
        }

        let mut first = Trainer::new(dims, tiny_cfg(6)).unwrap();
        for _ in 0..3 {
            first.train_step(&data).unwrap();
        }
        first.save_checkpoint(dir.path()).unwrap();
        let mut resumed = Trainer::load_checkpoint(dir.path()).unwrap();
        assert_eq!(resumed.step, 3);
        for k in 3..6 {
            let rec = resumed.train_step(&data).unwrap();
            assert_eq!(rec, records[k], "step {} after resume", k);
        }
        for ((_, x), (_, y)) in straight.student.iter().zip(resumed.student.iter()) {
            assert_eq!(x, y);
        }
        for ((_, x), (_, y)) in straight.teacher.iter().zip(resumed.teacher.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn mftd_activates_at_the_configured_fraction() {
        let dims = tiny_dims();
        let data = tiny_data(&dims, 6);
        let mut cfg = tiny_cfg(4);
        cfg.mftd_activation_frac = 0.5;
        let mut t = Trainer::new(dims, cfg).unwrap();
        for step in 0..4 {
            let rec = t.train_step(&data).unwrap();
            if step < 2 {
                assert!(rec.l_mftd.is_none(), "distillation early at step {}", step);
            } else {
                assert!(rec.l_mftd.is_some(), "distillation missing at step {}", step);
            }
        }
    }

    #[test]
    fn ablation_flags_remove_their_terms() {
        let dims = tiny_dims();
        let data = tiny_data(&dims, 6);
        let run_one = |ablation: Ablation| -> MetricRecord {
            let mut cfg = tiny_cfg(1);
            cfg.mftd_activation_frac = 0.0;
            cfg.ablation = ablation;
            let mut t = Trainer::new(dims.clone(), cfg).unwrap();
            t.train_step(&data).unwrap()
        };
        let base = run_one(Ablation::default());
        assert!(base.l_d.is_some() && base.l_mftd.is_some() && base.l_siqc.is_some());

        let no_ld = run_one(Ablation { no_ld: true, ..Default::default() });
        assert!(no_ld.l_d.is_none() && no_ld.l_siqc.is_some());

        let no_mftd = run_one(Ablation { no_mftd: true, ..Default::default() });
        assert!(no_mftd.l_mftd.is_none());

        let no_siqc = run_one(Ablation { no_siqc: true, ..Default::default() });
        assert!(no_siqc.l_siqc.is_none());

        let no_disent = run_one(Ablation { no_disent: true, ..Default::default() });
        assert!(no_disent.l_d.is_none() && no_disent.l_siqc.is_none());
        assert!(no_disent.l_mftd.is_some(), "token-level distillation stays on");

        let no_demix = run_one(Ablation { no_demix: true, ..Default::default() });
        assert!(no_demix.l_d.is_some() && no_demix.l_siqc.is_some());
    }

    #[test]
    fn teacher_parameters_receive_no_gradient() {
        let dims = tiny_dims();
        let data = tiny_data(&dims, 6);
        let mut cfg = tiny_cfg(1);
        cfg.mftd_activation_frac = 0.0;
        let t = Trainer::new(dims.clone(), cfg.clone()).unwrap();
        let batch = StepBatch {
            pairs: vec![(0, 1), (2, 3)],
            masks: vec![
                MixMask { m: vec![true, false, true, false, true, false, true, false] },
                MixMask { m: vec![false, true, false, true, false, true, false, true] },
            ],
        };
        let mut tape = Tape::new();
        let student = t.student.bind(&mut tape, true);
        // Bind the teacher TRAINABLY; stop-gradients inside the losses must
        // still keep every teacher gradient buffer empty.
        let teacher = t.teacher.bind(&mut tape, true);
        let losses =
            build_step_graph(&mut tape, &dims, &cfg, &student, &teacher, &data, &batch, true)
                .unwrap();
        tape.backward(losses.total);
        for name in t.teacher.names() {
            let id = teacher.id(name);
            assert!(tape.grad(id).is_none(), "teacher param {} got gradient", name);
        }
        // Sanity: the student did get gradients.
        let some_grad = t
            .student
            .names()
            .filter(|n| tape.grad(student.id(n)).is_some())
            .count();
        assert!(some_grad > 0);
    }

    #[test]
    fn reconstruction_improves_over_a_short_run() {
        let dims = tiny_dims();
        let data = tiny_data(&dims, 8);
        let mut cfg = tiny_cfg(60);
        cfg.warmup_frac = 0.1;
        let mut t = Trainer::new(dims, cfg).unwrap();
        let mut l_r = Vec::new();
        for _ in 0..60 {
            l_r.push(t.train_step(&data).unwrap().l_r);
        }
        let early: f64 = l_r[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = l_r[50..].iter().sum::<f64>() / 10.0;
        assert!(
            late < early,
            "reconstruction did not improve: early {} late {}",
            early,
            late
        );
    }

    #[test]
    fn nan_input_aborts_with_checkpoint() {
        let dims = tiny_dims();
        let mut data = tiny_data(&dims, 6);
        data.tokens[0][[0, 0]] = f64::NAN;
        data.tokens[1][[0, 0]] = f64::NAN;
        data.tokens[2][[0, 0]] = f64::NAN;
        data.tokens[3][[0, 0]] = f64::NAN;
        data.tokens[4][[0, 0]] = f64::NAN;
        data.tokens[5][[0, 0]] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(dims, tiny_cfg(3)).unwrap();
        let err = t.run(&data, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(dir.path().join(CHECKPOINT_ARRAYS).exists());
    }

    #[test]
    fn oversized_configs_are_refused() {
        let mut dims = tiny_dims();
        dims.d_h = 4096;
        dims.heads = 4;
        match Trainer::new(dims, tiny_cfg(1)) {
            Err(Error::Config(msg)) => assert!(msg.contains("limit")),
            other => panic!("expected a parameter budget refusal, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn cross_domain_pairing_is_enforced_when_asked() {
        let dims = tiny_dims();
        let mut data = tiny_data(&dims, 12);
        data.domains = vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
        let mut cfg = tiny_cfg(1);
        cfg.batch_size = 4;
        cfg.force_cross_domain = true;
        let mut sampler = ChaCha12Rng::seed_from_u64(5);
        let mut masker = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..30 {
            let batch = sample_step_batch(&cfg, &dims, &data, &mut sampler, &mut masker).unwrap();
            for &(i, j) in &batch.pairs {
                assert_ne!(data.domains[i], data.domains[j]);
            }
        }
    }

    #[test]
    fn metrics_and_checkpoint_files_are_written() {
        let dims = tiny_dims();
        let data = tiny_data(&dims, 6);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(dims, tiny_cfg(3)).unwrap();
        t.run(&data, dir.path()).unwrap();
        let lines = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let records: Vec<MetricRecord> = lines
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records.len(), 3);
        assert_eq!(records.last().unwrap().step, 2);
        assert!(dir.path().join(CHECKPOINT_META).exists());
    }
}
