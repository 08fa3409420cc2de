//! Volume-level factor codes from a frozen pretrained model: tile, encode,
//! split, pool. Plus the L2 + temperature normalization used by the
//! conditioning path, and a JSONL cache.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use meduet_tensor::Tape;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::model::{patchify, Forward, Model};
use crate::tokenizer::LatentVolume;
use crate::{Error, Result};

pub const NORM_EPS: f64 = 1e-8;

/// One volume's pooled content and style vectors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FactorCode {
    pub volume: String,
    pub domain_id: usize,
    pub c0: Vec<f64>,
    pub s0: Vec<f64>,
}

fn crop_latent(lat: &LatentVolume, side: usize, z0: usize, y0: usize, x0: usize) -> LatentVolume {
    let n_full = lat.side * lat.side * lat.side;
    let n = side * side * side;
    let mut out = LatentVolume::zeros(lat.channels, side);
    for c in 0..lat.channels {
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    let src = c * n_full
                        + (z0 + z) * lat.side * lat.side
                        + (y0 + y) * lat.side
                        + (x0 + x);
                    let dst = c * n + z * side * side + y * side + x;
                    out.data[dst] = lat.data[src];
                }
            }
        }
    }
    out
}

/// Mean content/style factors of one model-sized grid.
fn sub_volume_codes(model: &Model, sub: &LatentVolume) -> (Array1<f64>, Array1<f64>) {
    let dims = &model.dims;
    let tokens = patchify(sub, dims.patch);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let (c, s) = {
        let mut f = Forward::new(&mut tape, &bound, dims);
        let t = f.tape.constant(tokens);
        f.encode_to_factors(t, 1)
    };
    let pc = tape.pool_rows(c, dims.l());
    let ps = tape.pool_rows(s, dims.l());
    let c0 = tape.value(pc).row(0).to_owned();
    let s0 = tape.value(ps).row(0).to_owned();
    (c0, s0)
}

/// Tiles the volume into model-sized sub-volumes, encodes each through the
/// frozen model, and averages the token-pooled factors over tiles.
pub fn extract_codes(
    model: &Model,
    lat: &LatentVolume,
    volume: &str,
    domain_id: usize,
) -> Result<FactorCode> {
    let dims = &model.dims;
    if lat.channels != dims.c_lat {
        return Err(Error::Config(format!(
            "volume {} has {} channels, model expects {}",
            volume, lat.channels, dims.c_lat
        )));
    }
    let sub = dims.latent_side;
    if lat.side % sub != 0 {
        return Err(Error::Config(format!(
            "volume {} side {} is not tileable by model grid {}",
            volume, lat.side, sub
        )));
    }
    let g = lat.side / sub;
    let mut c0 = Array1::zeros(dims.d_c);
    let mut s0 = Array1::zeros(dims.d_s);
    for gz in 0..g {
        for gy in 0..g {
            for gx in 0..g {
                let crop = crop_latent(lat, sub, gz * sub, gy * sub, gx * sub);
                let (c, s) = sub_volume_codes(model, &crop);
                c0 = c0 + &c;
                s0 = s0 + &s;
            }
        }
    }
    let tiles = (g * g * g) as f64;
    Ok(FactorCode {
        volume: volume.to_string(),
        domain_id,
        c0: (c0 / tiles).to_vec(),
        s0: (s0 / tiles).to_vec(),
    })
}

/// L2 normalization with temperature: v/(‖v‖+ε) · (1/τ). Zero maps to zero.
pub fn norm_tau(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {}", tau)));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = 1.0 / ((norm + NORM_EPS) * tau);
    Ok(v.iter().map(|x| x * scale).collect())
}

pub fn write_codes(path: &Path, codes: &[FactorCode]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for code in codes {
        writeln!(f, "{}", serde_json::to_string(code)?)?;
    }
    Ok(())
}

pub fn read_codes(path: &Path) -> Result<Vec<FactorCode>> {
    let f = fs::File::open(path).map_err(|e| {
        Error::MissingPrerequisite(format!("{}: {}", path.display(), e))
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
