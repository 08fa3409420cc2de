//! Volume <-> latent tokenizer, frozen before backbone pretraining.
//!
//! Two modes share one interface:
//!
//! * `deterministic`: space-to-depth with block 4 (64 latent channels)
//!   followed by per-channel power-of-two scaling calibrated on the corpus.
//!   Multiplication by powers of two is exact in IEEE754, so
//!   decode(encode(v)) reproduces v bit for bit.
//! * `learned`: a stride-4 patch convolution (space-to-depth + linear) with
//!   two 1x1x1 conv layers and GELU on each side, compressing 4^3 patches to
//!   4 channels (16x fewer values). Trained on reconstruction MSE; training
//!   fails loudly if the held-out MSE stays above the configured threshold.
//!   After training, per-channel latent standardization is folded into the
//!   boundary linear layers, so cached latents come out near unit scale.
//!
//! Latent grids are channel-major: value(c, z, y, x) at c*d^3 + z*d^2 + y*d + x.

use std::collections::BTreeMap;
use std::path::Path;

use meduet_tensor::Tape;
use ndarray::{Array2, ArrayView2, Axis};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::arrayio;
use crate::corpus::{CorpusManifest, Volume};
use crate::optim::{AdamConfig, AdamW};
use crate::params::{trunc_normal, zeros, ParamStore};
use crate::{Error, Result};

/// Channel-major cubic latent grid.
#[derive(Debug, Clone)]
pub struct LatentVolume {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

impl LatentVolume {
    pub fn zeros(channels: usize, side: usize) -> Self {
        Self {
            channels,
            side,
            data: vec![0.0; channels * side * side * side],
        }
    }

    /// Voxel-major matrix view: rows are voxels in z-major raster order,
    /// columns are channels.
    pub fn to_rows(&self) -> Array2<f64> {
        let n = self.side * self.side * self.side;
        Array2::from_shape_fn((n, self.channels), |(v, c)| self.data[c * n + v])
    }

    pub fn from_rows(rows: &ArrayView2<f64>, side: usize) -> Self {
        let n = side * side * side;
        let channels = rows.ncols();
        assert_eq!(rows.nrows(), n, "from_rows: row count != side^3");
        let mut data = vec![0.0; channels * n];
        for v in 0..n {
            for c in 0..channels {
                data[c * n + v] = rows[[v, c]];
            }
        }
        Self {
            channels,
            side,
            data,
        }
    }
}

/// Space-to-depth over a channel-major cubic grid: each block^3 cell of the
/// grid becomes one row, with columns laid out channel-major then z-major
/// within the block (col = c * block^3 + bz * block^2 + by * block + bx).
pub fn cube_to_rows(data: &[f64], channels: usize, side: usize, block: usize) -> Array2<f64> {
    assert!(side % block == 0, "cube_to_rows: side {} % block {}", side, block);
    let g = side / block;
    let n = side * side * side;
    let b3 = block * block * block;
    let mut out = Array2::zeros((g * g * g, channels * b3));
    for gz in 0..g {
        for gy in 0..g {
            for gx in 0..g {
                let row = gz * g * g + gy * g + gx;
                for c in 0..channels {
                    for bz in 0..block {
                        for by in 0..block {
                            for bx in 0..block {
                                let (z, y, x) = (gz * block + bz, gy * block + by, gx * block + bx);
                                let src = c * n + z * side * side + y * side + x;
                                let col = c * b3 + bz * block * block + by * block + bx;
                                out[[row, col]] = data[src];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of [`cube_to_rows`].
pub fn rows_to_cube(m: &ArrayView2<f64>, channels: usize, side: usize, block: usize) -> Vec<f64> {
    let g = side / block;
    let n = side * side * side;
    let b3 = block * block * block;
    assert_eq!(m.nrows(), g * g * g, "rows_to_cube: row count");
    assert_eq!(m.ncols(), channels * b3, "rows_to_cube: col count");
    let mut data = vec![0.0; channels * n];
    for gz in 0..g {
        for gy in 0..g {
            for gx in 0..g {
                let row = gz * g * g + gy * g + gx;
                for c in 0..channels {
                    for bz in 0..block {
                        for by in 0..block {
                            for bx in 0..block {
                                let (z, y, x) = (gz * block + bz, gy * block + by, gx * block + bx);
                                let dst = c * n + z * side * side + y * side + x;
                                let col = c * b3 + bz * block * block + by * block + bx;
                                data[dst] = m[[row, col]];
                            }
                        }
                    }
                }
            }
        }
    }
    data
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    Deterministic,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub mode: TokenizerMode,
    pub block: usize,
    /// Latent channels in learned mode (deterministic mode forces block^3).
    pub c_lat: usize,
    pub hidden: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Trailing fraction of the corpus held out for the MSE gate.
    pub val_fraction: f64,
    pub mse_threshold: f64,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            mode: TokenizerMode::Learned,
            block: 4,
            c_lat: 4,
            hidden: 128,
            train_steps: 2000,
            batch: 1024,
            lr: 3e-3,
            val_fraction: 0.2,
            mse_threshold: 5e-3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Tokenizer {
    Deterministic(DeterministicTokenizer),
    Learned(LearnedTokenizer),
}

impl Tokenizer {
    pub fn c_lat(&self) -> usize {
        match self {
            Tokenizer::Deterministic(t) => t.block * t.block * t.block,
            Tokenizer::Learned(t) => t.c_lat,
        }
    }

    pub fn block(&self) -> usize {
        match self {
            Tokenizer::Deterministic(t) => t.block,
            Tokenizer::Learned(t) => t.block,
        }
    }

    pub fn encode(&self, vol: &Volume) -> LatentVolume {
        match self {
            Tokenizer::Deterministic(t) => t.encode(vol),
            Tokenizer::Learned(t) => t.encode(vol),
        }
    }

    pub fn decode(&self, lat: &LatentVolume) -> Volume {
        match self {
            Tokenizer::Deterministic(t) => t.decode(lat),
            Tokenizer::Learned(t) => t.decode(lat),
        }
    }

    /// Content hash over mode, geometry, and every parameter bit. Pretraining
    /// records this and refuses checkpoints whose tokenizer changed.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        match self {
            Tokenizer::Deterministic(t) => {
                bytes.extend_from_slice(b"det");
                bytes.extend_from_slice(&(t.block as u64).to_le_bytes());
                for &s in &t.scales {
                    bytes.extend_from_slice(&s.to_le_bytes());
                }
            }
            Tokenizer::Learned(t) => {
                bytes.extend_from_slice(b"lrn");
                for d in [t.block, t.c_lat, t.hidden] {
                    bytes.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for (_, arr) in t.params.iter() {
                    for &v in arr.iter() {
                        bytes.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        arrayio::bytes_sha256(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = BTreeMap::new();
        let meta = match self {
            Tokenizer::Deterministic(t) => {
                entries.insert(
                    "scales".to_string(),
                    Array2::from_shape_vec((1, t.scales.len()), t.scales.clone())
                        .expect("scales shape"),
                );
                TokenizerMeta {
                    mode: TokenizerMode::Deterministic,
                    block: t.block,
                    c_lat: t.block * t.block * t.block,
                    hidden: 0,
                    val_mse: None,
                }
            }
            Tokenizer::Learned(t) => {
                for (name, arr) in t.params.iter() {
                    entries.insert(name.to_string(), arr.clone());
                }
                TokenizerMeta {
                    mode: TokenizerMode::Learned,
                    block: t.block,
                    c_lat: t.c_lat,
                    hidden: t.hidden,
                    val_mse: t.val_mse,
                }
            }
        };
        arrayio::write_array_container(path, &entries)?;
        let sidecar = path.with_extension("json");
        let file = std::fs::File::create(sidecar)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = path.with_extension("json");
        let bytes = std::fs::read(&sidecar)
            .map_err(|e| Error::MissingPrerequisite(format!("{}: {}", sidecar.display(), e)))?;
        let meta: TokenizerMeta = serde_json::from_slice(&bytes)?;
        let entries = arrayio::read_array_container(path)?;
        match meta.mode {
            TokenizerMode::Deterministic => {
                let scales = entries
                    .get("scales")
                    .ok_or_else(|| Error::Config("tokenizer container missing scales".into()))?;
                Ok(Tokenizer::Deterministic(DeterministicTokenizer {
                    block: meta.block,
                    scales: scales.iter().copied().collect(),
                }))
            }
            TokenizerMode::Learned => {
                let mut t = LearnedTokenizer::init(meta.block, meta.c_lat, meta.hidden, 0);
                t.params.load_values(&entries)?;
                t.val_mse = meta.val_mse;
                Ok(Tokenizer::Learned(t))
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenizerMeta {
    mode: TokenizerMode,
    block: usize,
    c_lat: usize,
    hidden: usize,
    val_mse: Option<f64>,
}

// ---- deterministic mode ----

#[derive(Debug, Clone)]
pub struct DeterministicTokenizer {
    pub block: usize,
    /// Per-channel power-of-two scale.
    pub scales: Vec<f64>,
}

impl DeterministicTokenizer {
    /// Calibrates per-channel scales on sample volumes: the nearest power of
    /// two to 1/std keeps channels near unit variance while the round trip
    /// stays bit-exact.
    pub fn calibrate(block: usize, sample: &[&Volume]) -> Self {
        assert!(!sample.is_empty(), "calibrate needs at least one volume");
        let c = block * block * block;
        let mut sums = vec![0.0; c];
        let mut sqs = vec![0.0; c];
        let mut count = 0usize;
        for vol in sample {
            let rows = cube_to_rows(&vol.data, 1, vol.side, block);
            count += rows.nrows();
            for row in rows.axis_iter(Axis(0)) {
                for (ch, &v) in row.iter().enumerate() {
                    sums[ch] += v;
                    sqs[ch] += v * v;
                }
            }
        }
        let scales = (0..c)
            .map(|ch| {
                let mean = sums[ch] / count as f64;
                let var = (sqs[ch] / count as f64 - mean * mean).max(0.0);
                if var <= 1e-12 {
                    1.0
                } else {
                    let exp = (-0.5 * var.log2()).round().clamp(-8.0, 8.0);
                    exp.exp2()
                }
            })
            .collect();
        Self { block, scales }
    }

    pub fn encode(&self, vol: &Volume) -> LatentVolume {
        let side = vol.side / self.block;
        let mut rows = cube_to_rows(&vol.data, 1, vol.side, self.block);
        for (c, scale) in self.scales.iter().enumerate() {
            rows.column_mut(c).mapv_inplace(|v| v * scale);
        }
        LatentVolume::from_rows(&rows.view(), side)
    }

    pub fn decode(&self, lat: &LatentVolume) -> Volume {
        let mut rows = lat.to_rows();
        for (c, scale) in self.scales.iter().enumerate() {
            rows.column_mut(c).mapv_inplace(|v| v / scale);
        }
        let side = lat.side * self.block;
        Volume {
            side,
            data: rows_to_cube(&rows.view(), 1, side, self.block),
        }
    }
}

// ---- learned mode ----

#[derive(Debug, Clone)]
pub struct LearnedTokenizer {
    pub block: usize,
    pub c_lat: usize,
    pub hidden: usize,
    pub params: ParamStore,
    pub val_mse: Option<f64>,
}

impl LearnedTokenizer {
    pub fn init(block: usize, c_lat: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d_in = block * block * block;
        let mut p = ParamStore::new();
        let lin = |p: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut ChaCha12Rng| {
            let std = (2.0 / (din + dout) as f64).sqrt();
            p.insert(&format!("{}.w", name), trunc_normal(rng, din, dout, std));
            p.insert(&format!("{}.b", name), zeros(1, dout));
        };
        lin(&mut p, "enc.0", d_in, hidden, &mut rng);
        lin(&mut p, "enc.1", hidden, hidden, &mut rng);
        lin(&mut p, "enc.2", hidden, c_lat, &mut rng);
        lin(&mut p, "dec.0", c_lat, hidden, &mut rng);
        lin(&mut p, "dec.1", hidden, hidden, &mut rng);
        lin(&mut p, "dec.2", hidden, d_in, &mut rng);
        Self {
            block,
            c_lat,
            hidden,
            params: p,
            val_mse: None,
        }
    }

    fn encode_rows(&self, patches: &Array2<f64>) -> Array2<f64> {
        let h = gelu_mat(&(patches.dot(self.params.get("enc.0.w")) + self.params.get("enc.0.b")));
        let h = gelu_mat(&(h.dot(self.params.get("enc.1.w")) + self.params.get("enc.1.b")));
        h.dot(self.params.get("enc.2.w")) + self.params.get("enc.2.b")
    }

    fn decode_rows(&self, z: &Array2<f64>) -> Array2<f64> {
        let h = gelu_mat(&(z.dot(self.params.get("dec.0.w")) + self.params.get("dec.0.b")));
        let h = gelu_mat(&(h.dot(self.params.get("dec.1.w")) + self.params.get("dec.1.b")));
        h.dot(self.params.get("dec.2.w")) + self.params.get("dec.2.b")
    }

    pub fn encode(&self, vol: &Volume) -> LatentVolume {
        let patches = cube_to_rows(&vol.data, 1, vol.side, self.block);
        let z = self.encode_rows(&patches);
        LatentVolume::from_rows(&z.view(), vol.side / self.block)
    }

    pub fn decode(&self, lat: &LatentVolume) -> Volume {
        let z = lat.to_rows();
        let patches = self.decode_rows(&z);
        let side = lat.side * self.block;
        Volume {
            side,
            data: rows_to_cube(&patches.view(), 1, side, self.block),
        }
    }

    /// Replaces z by (z - mu) / sigma inside the encoder's output layer and
    /// compensates in the decoder's input layer. Model function is unchanged.
    fn fold_standardization(&mut self, mu: &[f64], sigma: &[f64]) {
        {
            let w = self.params.get_mut("enc.2.w");
            for (c, &s) in sigma.iter().enumerate() {
                w.column_mut(c).mapv_inplace(|v| v / s);
            }
        }
        {
            let b = self.params.get_mut("enc.2.b");
            for c in 0..mu.len() {
                b[[0, c]] = (b[[0, c]] - mu[c]) / sigma[c];
            }
        }
        // Decoder sees z' where z = z' * sigma + mu.
        let dec_w_adjust: Array2<f64> = {
            let w = self.params.get("dec.0.w");
            let mut mu_row = Array2::zeros((1, w.ncols()));
            for (i, &m) in mu.iter().enumerate() {
                let contrib = &w.row(i) * m;
                let mut acc = mu_row.row_mut(0);
                acc += &contrib;
            }
            mu_row
        };
        {
            let w = self.params.get_mut("dec.0.w");
            for (i, &s) in sigma.iter().enumerate() {
                w.row_mut(i).mapv_inplace(|v| v * s);
            }
        }
        {
            let b = self.params.get_mut("dec.0.b");
            *b = &*b + &dec_w_adjust;
        }
    }
}

fn gelu_mat(a: &Array2<f64>) -> Array2<f64> {
    const C: f64 = 0.7978845608028654;
    a.mapv(|x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()))
}

/// Trains the learned tokenizer on patch reconstruction. Volumes are split
/// train/held-out by trailing `val_fraction`; the held-out full-volume MSE
/// must beat `mse_threshold` or this errors out.
pub fn train_tokenizer(
    cfg: &TokenizerConfig,
    volumes: &[Volume],
) -> Result<LearnedTokenizer> {
    if volumes.len() < 2 {
        return Err(Error::Config("tokenizer training needs at least 2 volumes".into()));
    }
    let n_val = ((volumes.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, volumes.len() - 1);
    let (train, val) = volumes.split_at(volumes.len() - n_val);

    let mut tok = LearnedTokenizer::init(cfg.block, cfg.c_lat, cfg.hidden, cfg.seed);
    let mut patch_rows: Vec<Array2<f64>> = train
        .iter()
        .map(|v| cube_to_rows(&v.data, 1, v.side, cfg.block))
        .collect();
    let all = ndarray::concatenate(
        Axis(0),
        &patch_rows.iter().map(|p| p.view()).collect::<Vec<_>>(),
    )
    .expect("patch stack");
    patch_rows.clear();

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x70cb);
    let mut order: Vec<usize> = (0..all.nrows()).collect();
    let mut opt = AdamW::new(
        &tok.params,
        AdamConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            warmup_frac: 0.02,
            total_steps: cfg.train_steps,
            clip_norm: 1.0,
            ..Default::default()
        },
    );
    let mut cursor = all.nrows(); // force initial shuffle
    for _ in 0..cfg.train_steps {
        if cursor + cfg.batch > all.nrows() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let take = cfg.batch.min(all.nrows());
        let mut batch = Array2::zeros((take, all.ncols()));
        for (bi, &ri) in order[cursor..cursor + take].iter().enumerate() {
            batch.row_mut(bi).assign(&all.row(ri));
        }
        cursor += take;

        let mut tape = Tape::new();
        let bound = tok.params.bind(&mut tape, true);
        let x = tape.constant(batch);
        let z = forward_tok(&mut tape, &bound, "enc", x);
        let rec = forward_tok(&mut tape, &bound, "dec", z);
        let diff = tape.sub(rec, x);
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Numerical("tokenizer training loss is not finite".into()));
        }
        tape.backward(loss);
        let mut grads = bound.collect_grads(&tape, &tok.params);
        opt.step(&mut tok.params, &mut grads);
    }

    // Fold latent standardization into the boundary layers.
    let z_all = tok.encode_rows(&all);
    let mut mu = vec![0.0; cfg.c_lat];
    let mut sig = vec![0.0; cfg.c_lat];
    for c in 0..cfg.c_lat {
        let col = z_all.column(c);
        let m = col.sum() / col.len() as f64;
        let v = col.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
        mu[c] = m;
        sig[c] = v.sqrt().max(1e-6);
    }
    tok.fold_standardization(&mu, &sig);

    // Held-out gate on full volumes.
    let mut total = 0.0;
    let mut count = 0usize;
    for v in val {
        let rec = tok.decode(&tok.encode(v));
        total += v
            .data
            .iter()
            .zip(&rec.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>();
        count += v.data.len();
    }
    let mse = total / count as f64;
    tok.val_mse = Some(mse);
    if mse > cfg.mse_threshold {
        return Err(Error::Numerical(format!(
            "tokenizer held-out MSE {:.3e} exceeds threshold {:.3e}",
            mse, cfg.mse_threshold
        )));
    }
    Ok(tok)
}

fn forward_tok(
    tape: &mut Tape,
    bound: &crate::params::BoundParams,
    stack: &str,
    x: meduet_tensor::TensorId,
) -> meduet_tensor::TensorId {
    let mut h = x;
    for layer in 0..3 {
        let w = bound.id(&format!("{}.{}.w", stack, layer));
        let b = bound.id(&format!("{}.{}.b", stack, layer));
        h = tape.matmul(h, w);
        h = tape.add_row(h, b);
        if layer < 2 {
            h = tape.gelu(h);
        }
    }
    h
}

// ---- latent cache files ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentSidecar {
    pub shape: [usize; 4],
    pub dtype: String,
    pub source_stem: String,
    pub domain_id: usize,
    pub content_seed: u64,
    pub tokenizer_hash: String,
}

pub fn write_latent(dir: &Path, stem: &str, lat: &LatentVolume, sidecar: &LatentSidecar) -> Result<()> {
    let data32: Vec<f32> = lat.data.iter().map(|&v| v as f32).collect();
    arrayio::write_f32_raw(&dir.join(format!("{}.lat.f32", stem)), &data32)?;
    let file = std::fs::File::create(dir.join(format!("{}.lat.json", stem)))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), sidecar)?;
    Ok(())
}

pub fn read_latent(dir: &Path, stem: &str) -> Result<(LatentVolume, LatentSidecar)> {
    let sidecar_path = dir.join(format!("{}.lat.json", stem));
    let bytes = std::fs::read(&sidecar_path)
        .map_err(|e| Error::MissingPrerequisite(format!("{}: {}", sidecar_path.display(), e)))?;
    let sidecar: LatentSidecar = serde_json::from_slice(&bytes)?;
    let raw = arrayio::read_f32_raw(&dir.join(format!("{}.lat.f32", stem)))?;
    let [c, d, _, _] = sidecar.shape;
    if raw.len() != c * d * d * d {
        return Err(Error::Config(format!(
            "latent {}: {} values for shape {:?}",
            stem,
            raw.len(),
            sidecar.shape
        )));
    }
    Ok((
        LatentVolume {
            channels: c,
            side: d,
            data: raw.iter().map(|&v| v as f64).collect(),
        },
        sidecar,
    ))
}

/// Encodes every corpus volume and writes the latent cache next to `cache_dir`.
pub fn tokenize_corpus(
    tok: &Tokenizer,
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    cache_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(cache_dir)?;
    let hash = tok.content_hash();
    for entry in &manifest.entries {
        let (vol, sidecar) = crate::corpus::read_volume(corpus_dir, &entry.stem)?;
        let lat = tok.encode(&vol);
        write_latent(
            cache_dir,
            &entry.stem,
            &lat,
            &LatentSidecar {
                shape: [lat.channels, lat.side, lat.side, lat.side],
                dtype: "f32-le".to_string(),
                source_stem: entry.stem.clone(),
                domain_id: sidecar.domain_id,
                content_seed: sidecar.content_seed,
                tokenizer_hash: hash.clone(),
            },
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{render_phantom, ContentSpec, DomainSpec};

    fn sample_volume(seed: u64, side: usize) -> Volume {
        render_phantom(
            &ContentSpec::generate(seed),
            &DomainSpec::preset((seed % 3) as usize),
            side,
            seed ^ 0xbeef,
        )
    }

    #[test]
    fn cube_rows_round_trip_exactly() {
        let vol = sample_volume(3, 16);
        let rows = cube_to_rows(&vol.data, 1, 16, 4);
        assert_eq!(rows.dim(), (64, 64));
        let back = rows_to_cube(&rows.view(), 1, 16, 4);
        assert_eq!(back, vol.data);
    }

    #[test]
    fn cube_rows_known_layout() {
        // 2x2x2 grid, block 2: a single row, columns in z-major block order.
        let data: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let rows = cube_to_rows(&data, 1, 2, 2);
        assert_eq!(rows.dim(), (1, 8));
        for (i, &v) in rows.row(0).iter().enumerate() {
            assert_eq!(v, i as f64);
        }
    }

    #[test]
    fn deterministic_round_trip_is_bit_exact() {
        let vols: Vec<Volume> = (0..3).map(|s| sample_volume(s, 16)).collect();
        let refs: Vec<&Volume> = vols.iter().collect();
        let tok = DeterministicTokenizer::calibrate(4, &refs);
        for v in &vols {
            let lat = tok.encode(v);
            assert_eq!(lat.channels, 64);
            assert_eq!(lat.side, 4);
            let back = tok.decode(&lat);
            for (a, b) in v.data.iter().zip(&back.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn deterministic_scales_are_powers_of_two() {
        let vols: Vec<Volume> = (0..2).map(|s| sample_volume(s + 9, 16)).collect();
        let refs: Vec<&Volume> = vols.iter().collect();
        let tok = DeterministicTokenizer::calibrate(4, &refs);
        for &s in &tok.scales {
            assert_eq!(s.log2().fract(), 0.0, "scale {} not a power of two", s);
        }
    }

    #[test]
    fn learned_training_reduces_reconstruction_error() {
        let vols: Vec<Volume> = (0..8).map(|s| sample_volume(s + 40, 16)).collect();
        let init = LearnedTokenizer::init(4, 4, 32, 7);
        let mse = |tok: &LearnedTokenizer| {
            let v = &vols[7];
            let rec = tok.decode(&tok.encode(v));
            v.data
                .iter()
                .zip(&rec.data)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                / v.data.len() as f64
        };
        let before = mse(&init);
        let cfg = TokenizerConfig {
            hidden: 32,
            train_steps: 120,
            batch: 256,
            mse_threshold: 1.0, // gate off; this test checks improvement only
            seed: 7,
            ..Default::default()
        };
        let trained = train_tokenizer(&cfg, &vols).unwrap();
        let after = mse(&trained);
        assert!(after < before * 0.5, "before {:.4} after {:.4}", before, after);
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let vols: Vec<Volume> = (0..4).map(|s| sample_volume(s + 80, 8)).collect();
        let cfg = TokenizerConfig {
            block: 2,
            c_lat: 2,
            hidden: 16,
            train_steps: 30,
            batch: 64,
            mse_threshold: 1.0,
            seed: 5,
            ..Default::default()
        };
        let t1 = train_tokenizer(&cfg, &vols).unwrap();
        let t2 = train_tokenizer(&cfg, &vols).unwrap();
        assert_eq!(
            Tokenizer::Learned(t1).content_hash(),
            Tokenizer::Learned(t2).content_hash()
        );
    }

    #[test]
    fn unreachable_threshold_is_a_numerical_error() {
        let vols: Vec<Volume> = (0..3).map(|s| sample_volume(s + 60, 8)).collect();
        let cfg = TokenizerConfig {
            block: 2,
            c_lat: 2,
            hidden: 8,
            train_steps: 5,
            batch: 32,
            mse_threshold: 1e-12,
            seed: 2,
            ..Default::default()
        };
        assert!(matches!(
            train_tokenizer(&cfg, &vols),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn standardization_fold_preserves_the_model_function() {
        let vols: Vec<Volume> = (0..3).map(|s| sample_volume(s + 100, 8)).collect();
        let mut tok = LearnedTokenizer::init(2, 2, 16, 3);
        let before = tok.decode(&tok.encode(&vols[0]));
        let mu = vec![0.3, -0.2];
        let sig = vec![1.7, 0.4];
        tok.fold_standardization(&mu, &sig);
        let after = tok.decode(&tok.encode(&vols[0]));
        for (a, b) in before.data.iter().zip(&after.data) {
            assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vols: Vec<Volume> = (0..2).map(|s| sample_volume(s, 8)).collect();
        let refs: Vec<&Volume> = vols.iter().collect();
        let det = Tokenizer::Deterministic(DeterministicTokenizer::calibrate(2, &refs));
        let path = dir.path().join("tok.mdar");
        det.save(&path).unwrap();
        let back = Tokenizer::load(&path).unwrap();
        assert_eq!(det.content_hash(), back.content_hash());

        let lrn = Tokenizer::Learned(LearnedTokenizer::init(2, 2, 16, 11));
        let path2 = dir.path().join("tok2.mdar");
        lrn.save(&path2).unwrap();
        let back2 = Tokenizer::load(&path2).unwrap();
        assert_eq!(lrn.content_hash(), back2.content_hash());
    }

    #[test]
    fn latent_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lat = LatentVolume {
            channels: 2,
            side: 2,
            data: (0..16).map(|v| v as f64 * 0.5).collect(),
        };
        let sc = LatentSidecar {
            shape: [2, 2, 2, 2],
            dtype: "f32-le".into(),
            source_stem: "vol_00000".into(),
            domain_id: 1,
            content_seed: 99,
            tokenizer_hash: "abc".into(),
        };
        write_latent(dir.path(), "vol_00000", &lat, &sc).unwrap();
        let (back, sc2) = read_latent(dir.path(), "vol_00000").unwrap();
        assert_eq!(back.channels, 2);
        assert_eq!(back.data, lat.data);
        assert_eq!(sc2.domain_id, 1);
    }
}
