//! Token mixing: mask sampling, the mixing and unmixing maps, and the dual
//! reconstruction loss.
//!
//! A mask entry of true means the token at that position comes from the first
//! volume of the pair; false means the second. Positions never move, so
//! unmixing is pure bookkeeping plus absence flags.

use meduet_tensor::{Tape, TensorId};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixMask {
    pub m: Vec<bool>,
}

impl MixMask {
    pub fn all_from_first(l: usize) -> Self {
        Self { m: vec![true; l] }
    }

    pub fn all_from_second(l: usize) -> Self {
        Self { m: vec![false; l] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn count_first(&self) -> usize {
        self.m.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            m: self.m.iter().map(|b| !b).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Independent Bernoulli(rho) per cell.
    Bernoulli,
    /// Exactly floor(rho * cells) ones, positions uniform.
    FixedCount,
}

/// Samples a mask over `l` tokens. With `block_size > 1` the tokens are
/// treated as a cubic grid and contiguous cubic blocks share one value, so
/// `l` must be a perfect cube divisible blockwise.
pub fn sample_mask<R: Rng>(
    l: usize,
    rho: f64,
    block_size: usize,
    mode: MaskMode,
    rng: &mut R,
) -> Result<MixMask> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("mix ratio {} outside [0, 1]", rho)));
    }
    if block_size == 0 {
        return Err(Error::Config("block_size must be >= 1".into()));
    }
    if block_size == 1 {
        let cells = sample_cells(l, rho, mode, rng);
        return Ok(MixMask { m: cells });
    }
    let side = cube_side(l)
        .ok_or_else(|| Error::Config(format!("block mode needs cubic token count, got {}", l)))?;
    if side % block_size != 0 {
        return Err(Error::Config(format!(
            "token grid side {} not divisible by block size {}",
            side, block_size
        )));
    }
    let bs = side / block_size;
    let cells = sample_cells(bs.pow(3), rho, mode, rng);
    let mut m = vec![false; l];
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let cell = (z / block_size) * bs * bs + (y / block_size) * bs + (x / block_size);
                m[z * side * side + y * side + x] = cells[cell];
            }
        }
    }
    Ok(MixMask { m })
}

fn sample_cells<R: Rng>(n: usize, rho: f64, mode: MaskMode, rng: &mut R) -> Vec<bool> {
    match mode {
        MaskMode::Bernoulli => (0..n).map(|_| rng.gen::<f64>() < rho).collect(),
        MaskMode::FixedCount => {
            let ones = (rho * n as f64).floor() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            // Partial Fisher-Yates: the first `ones` slots are the chosen set.
            for i in 0..ones.min(n.saturating_sub(1)) {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            let mut m = vec![false; n];
            for &i in idx.iter().take(ones) {
                m[i] = true;
            }
            m
        }
    }
}

fn cube_side(l: usize) -> Option<usize> {
    let s = (l as f64).cbrt().round() as usize;
    (s.pow(3) == l).then_some(s)
}

/// out[t] = M[t] ? z_i[t] : z_j[t].
pub fn mix(z_i: &Array2<f64>, z_j: &Array2<f64>, mask: &MixMask) -> Array2<f64> {
    assert_eq!(z_i.dim(), z_j.dim(), "mix: grid shapes differ");
    assert_eq!(z_i.nrows(), mask.len(), "mix: mask length");
    let mut out = z_j.clone();
    for (t, &take_i) in mask.m.iter().enumerate() {
        if take_i {
            out.row_mut(t).assign(&z_i.row(t));
        }
    }
    out
}

/// A token grid where some positions are absent. Absent rows are zeroed and
/// flagged; consumers fill them (mask token) or skip them (loss weighting).
#[derive(Debug, Clone)]
pub struct MaskedGrid {
    pub rows: Array2<f64>,
    pub present: Vec<bool>,
}

/// Splits an encoded mixed grid back into its two per-source streams.
pub fn unmix(encoded: &Array2<f64>, mask: &MixMask) -> (MaskedGrid, MaskedGrid) {
    assert_eq!(encoded.nrows(), mask.len(), "unmix: mask length");
    let mut rows_i = encoded.clone();
    let mut rows_j = encoded.clone();
    for (t, &from_i) in mask.m.iter().enumerate() {
        if from_i {
            rows_j.row_mut(t).fill(0.0);
        } else {
            rows_i.row_mut(t).fill(0.0);
        }
    }
    (
        MaskedGrid {
            rows: rows_i,
            present: mask.m.clone(),
        },
        MaskedGrid {
            rows: rows_j,
            present: mask.complement().m,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReconForm {
    /// Each stream's sum of squares divided by its unmasked element count.
    #[serde(rename = "mean")]
    MeanPerElement,
    /// Raw sum of squares.
    #[serde(rename = "sum")]
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconScope {
    /// Score each stream only where its tokens were visible in the mix.
    MaskedAsEq1,
    /// Score every position in both streams.
    Full,
}

/// Per-stream loss weight columns for a batch of masks, stacked pair-major:
/// row p*L + t weights pair p's token t. Returns (w_i, w_j).
pub fn stream_weight_cols(masks: &[MixMask], scope: ReconScope) -> (Array2<f64>, Array2<f64>) {
    let l = masks.first().map_or(0, |m| m.len());
    let rows = masks.len() * l;
    let mut w_i = Array2::zeros((rows, 1));
    let mut w_j = Array2::zeros((rows, 1));
    for (p, mask) in masks.iter().enumerate() {
        assert_eq!(mask.len(), l, "stream_weight_cols: ragged masks");
        for (t, &from_i) in mask.m.iter().enumerate() {
            let (wi, wj) = match scope {
                ReconScope::MaskedAsEq1 => {
                    if from_i {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                }
                ReconScope::Full => (1.0, 1.0),
            };
            w_i[[p * l + t, 0]] = wi;
            w_j[[p * l + t, 0]] = wj;
        }
    }
    (w_i, w_j)
}

/// Dual reconstruction loss over a batch of pairs. Predicted and target grids
/// stack all pairs row-wise ((pairs * L) x D); `masks` holds one mask per
/// pair. In mean form each stream is normalized by its own unmasked element
/// count; an empty stream contributes zero.
pub fn dual_recon_loss(
    tape: &mut Tape,
    zhat_i: TensorId,
    z_i: TensorId,
    zhat_j: TensorId,
    z_j: TensorId,
    masks: &[MixMask],
    form: ReconForm,
    scope: ReconScope,
) -> TensorId {
    let d = tape.value(zhat_i).ncols();
    let (w_i, w_j) = stream_weight_cols(masks, scope);
    let term = |tape: &mut Tape, zhat: TensorId, z: TensorId, w: &Array2<f64>| {
        let active = w.iter().filter(|&&v| v != 0.0).count();
        let wid = tape.constant(w.clone());
        let diff = tape.sub(zhat, z);
        let sq = tape.square(diff);
        let weighted = tape.mul_col(sq, wid);
        let total = tape.sum_all(weighted);
        match form {
            ReconForm::Sum => total,
            ReconForm::MeanPerElement => {
                if active == 0 {
                    tape.scale(total, 0.0)
                } else {
                    tape.scale(total, 1.0 / (active * d) as f64)
                }
            }
        }
    };
    let li = term(tape, zhat_i, z_i, &w_i);
    let lj = term(tape, zhat_j, z_j, &w_j);
    tape.add(li, lj)
}
