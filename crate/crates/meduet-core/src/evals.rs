//! Identifiability and controllability diagnostics: linear probes over the
//! factor codes, silhouette scores, the guidance-weight consistency sweep,
//! a kernel MMD proxy on raw voxels, and embedding export for external
//! projection tools.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use meduet_tensor::Tape;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::codes::FactorCode;
use crate::corpus::Volume;
use crate::diffusion::{sample_latent, DdpmSchedule, Denoiser, GuidanceConfig};
use crate::finetune::{mean_foreground_dice, predict_seg, SegModel};
use crate::model::{Forward, Model};
use crate::{Error, Result};

/// Minimum samples per class before a probe is considered meaningful.
pub const PROBE_MIN_PER_CLASS: usize = 10;
/// L2 penalty on the probe weights.
pub const PROBE_L2: f64 = 1e-3;
/// Convergence tolerance on the probe's full-batch loss.
pub const PROBE_TOL: f64 = 1e-6;
const PROBE_MAX_ITERS: usize = 20_000;

// ---- linear probe ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Which factor fed the probe, "content" or "style".
    pub target: String,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub chance: f64,
    /// One-vs-rest macro-averaged AUC.
    pub auc: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

fn softmax_inplace(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

/// Mean cross-entropy + L2, with gradients. Pure ndarray; the probe stays
/// outside the tape so its convergence tolerance is cheap to reach.
fn probe_loss_grad(
    x: &Array2<f64>,
    labels: &[usize],
    w: &Array2<f64>,
    b: &Array1<f64>,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = x.nrows();
    let k = w.ncols();
    let mut p = x.dot(w);
    for mut row in p.axis_iter_mut(Axis(0)) {
        row += b;
    }
    let mut loss = 0.0;
    for (i, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
        softmax_inplace(row.as_slice_mut().expect("contiguous row"));
        loss -= row[labels[i]].max(1e-300).ln();
    }
    loss /= n as f64;
    loss += PROBE_L2 * w.iter().map(|v| v * v).sum::<f64>();
    let mut g = p;
    for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        row[labels[i]] -= 1.0;
    }
    g /= n as f64;
    let mut gw = x.t().dot(&g);
    gw.zip_mut_with(w, |gv, &wv| *gv += 2.0 * PROBE_L2 * wv);
    let mut gb = Array1::zeros(k);
    for row in g.axis_iter(Axis(0)) {
        gb += &row;
    }
    (loss, gw, gb)
}

/// Monotone full-batch gradient descent: steps that raise the loss are
/// rejected and halve the rate, accepted steps grow it. Deterministic.
fn fit_probe(x: &Array2<f64>, labels: &[usize], k: usize) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols();
    let mut w = Array2::zeros((d, k));
    let mut b = Array1::zeros(k);
    let mut lr = 1.0;
    let (mut loss, mut gw, mut gb) = probe_loss_grad(x, labels, &w, &b);
    for _ in 0..PROBE_MAX_ITERS {
        let wc = &w - &(lr * &gw);
        let bc = &b - &(lr * &gb);
        let (lc, gwc, gbc) = probe_loss_grad(x, labels, &wc, &bc);
        if lc <= loss {
            let gain = loss - lc;
            w = wc;
            b = bc;
            loss = lc;
            gw = gwc;
            gb = gbc;
            lr *= 1.1;
            if gain < PROBE_TOL {
                break;
            }
        } else {
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        }
    }
    (w, b)
}

/// Midrank AUC of `scores` against binary relevance.
fn binary_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    let np = positive.iter().filter(|&&p| p).count();
    let nn = n - np;
    if np == 0 || nn == 0 {
        return f64::NAN;
    }
    let rank_sum: f64 = (0..n).filter(|&i| positive[i]).map(|i| ranks[i]).sum();
    (rank_sum - (np * (np + 1)) as f64 / 2.0) / (np * nn) as f64
}

/// Trains a multinomial logistic probe on a stratified 70/30 split and
/// scores the held-out side. Features are standardized with train-split
/// statistics. Labels must cover every class id below their maximum with at
/// least [`PROBE_MIN_PER_CLASS`] samples each.
pub fn linear_probe(
    x: &Array2<f64>,
    labels: &[usize],
    target: &str,
    seed: u64,
) -> Result<ProbeReport> {
    if x.nrows() != labels.len() {
        return Err(Error::Config(format!(
            "{} codes but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    if k < 2 {
        return Err(Error::Config("probe needs at least 2 classes".into()));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(cls) = counts.iter().position(|&c| c < PROBE_MIN_PER_CLASS) {
        return Err(Error::Config(format!(
            "class {} has {} samples, probe needs {}",
            cls, counts[cls], PROBE_MIN_PER_CLASS
        )));
    }

    // Stratified split: 70% of each class trains, the rest tests.
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for cls in 0..k {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == cls).collect();
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        let cut = ((members.len() as f64) * 0.7).floor() as usize;
        let cut = cut.clamp(1, members.len() - 1);
        train_idx.extend_from_slice(&members[..cut]);
        test_idx.extend_from_slice(&members[cut..]);
    }

    let gather = |idx: &[usize]| -> (Array2<f64>, Vec<usize>) {
        let mut m = Array2::zeros((idx.len(), x.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            m.row_mut(r).assign(&x.row(i));
        }
        (m, idx.iter().map(|&i| labels[i]).collect())
    };
    let (mut xtr, ytr) = gather(&train_idx);
    let (mut xte, yte) = gather(&test_idx);

    // Standardize with train statistics.
    for c in 0..xtr.ncols() {
        let col = xtr.column(c);
        let mean = col.sum() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        let sd = var.sqrt().max(1e-12);
        xtr.column_mut(c).mapv_inplace(|v| (v - mean) / sd);
        xte.column_mut(c).mapv_inplace(|v| (v - mean) / sd);
    }

    let (w, b) = fit_probe(&xtr, &ytr, k);

    let mut logits = xte.dot(&w);
    for mut row in logits.axis_iter_mut(Axis(0)) {
        row += &b;
    }
    let mut probs = logits;
    for mut row in probs.axis_iter_mut(Axis(0)) {
        softmax_inplace(row.as_slice_mut().expect("contiguous row"));
    }
    let mut correct = 0usize;
    let mut class_correct = vec![0usize; k];
    let mut class_total = vec![0usize; k];
    for (i, &y) in yte.iter().enumerate() {
        let row = probs.row(i);
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        class_total[y] += 1;
        if best == y {
            correct += 1;
            class_correct[y] += 1;
        }
    }
    let mut auc_sum = 0.0;
    let mut auc_n = 0usize;
    for cls in 0..k {
        let scores: Vec<f64> = (0..yte.len()).map(|i| probs[[i, cls]]).collect();
        let pos: Vec<bool> = yte.iter().map(|&y| y == cls).collect();
        let a = binary_auc(&scores, &pos);
        if a.is_finite() {
            auc_sum += a;
            auc_n += 1;
        }
    }
    Ok(ProbeReport {
        target: target.to_string(),
        accuracy: correct as f64 / yte.len() as f64,
        per_class: (0..k)
            .map(|c| class_correct[c] as f64 / class_total[c].max(1) as f64)
            .collect(),
        chance: 1.0 / k as f64,
        auc: auc_sum / auc_n.max(1) as f64,
        seed,
        n_train: ytr.len(),
        n_test: yte.len(),
    })
}

// ---- silhouette ----

/// Mean silhouette with Euclidean distance. Points in singleton clusters
/// score 0 by convention.
pub fn silhouette(x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let n = x.nrows();
    if n != labels.len() {
        return Err(Error::Config(format!(
            "{} points but {} labels",
            n,
            labels.len()
        )));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Config("silhouette needs at least 2 clusters".into()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        (&x.row(i) - &x.row(j)).iter().map(|d| d * d).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let own_size = labels.iter().filter(|&&l| l == own).count();
        if own_size == 1 {
            continue; // scores 0
        }
        let mut a = 0.0;
        for j in 0..n {
            if j != i && labels[j] == own {
                a += dist(i, j);
            }
        }
        a /= (own_size - 1) as f64;
        let mut b = f64::INFINITY;
        for &other in &distinct {
            if other == own {
                continue;
            }
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for j in 0..n {
                if labels[j] == other {
                    sum += dist(i, j);
                    cnt += 1;
                }
            }
            b = b.min(sum / cnt as f64);
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

// ---- consistency sweep ----

/// Guidance-weight grid; the report carries one R_D and R_C value per
/// (w_c, w_s) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    pub w_c: Vec<f64>,
    pub w_s: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            w_c: vec![0.0, 1.5, 3.0],
            w_s: vec![0.0, 1.5, 3.0],
        }
    }
}

/// A content reference: its token grid (for the reference segmentation) and
/// its content code (for conditioning).
#[derive(Debug, Clone)]
pub struct SweepRef {
    pub tokens: Array2<f64>,
    pub c_code: Vec<f64>,
}

/// A style donor drawn from a non-reference domain.
#[derive(Debug, Clone)]
pub struct StyleDonor {
    pub s_code: Vec<f64>,
    pub domain: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub w_c: Vec<f64>,
    pub w_s: Vec<f64>,
    /// r_d[i][j]: mean Dice between reference and generated segmentations at
    /// (w_c[i], w_s[j]).
    pub r_d: Vec<Vec<f64>>,
    /// r_c[i][j]: fraction of generations classified into the donor domain.
    pub r_c: Vec<Vec<f64>>,
}

/// Sweeps every (reference, donor) pair over the guidance grid. The three
/// closures keep the sweep independent of any particular generator or
/// heads: `generate` maps (content code, style code, w_c, w_s) to latent
/// tokens, `segment` predicts voxel classes, `classify` predicts a domain.
pub fn consistency_sweep<G, S, C>(
    refs: &[SweepRef],
    donors: &[StyleDonor],
    grid: &SweepGrid,
    n_seg_classes: usize,
    mut generate: G,
    mut segment: S,
    mut classify: C,
) -> Result<SweepReport>
where
    G: FnMut(&[f64], &[f64], f64, f64) -> Result<Array2<f64>>,
    S: FnMut(&Array2<f64>) -> Vec<u8>,
    C: FnMut(&Array2<f64>) -> usize,
{
    if grid.w_c.is_empty() || grid.w_s.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if refs.is_empty() || donors.is_empty() {
        return Err(Error::Config("sweep needs references and style donors".into()));
    }
    let pairs = (refs.len() * donors.len()) as f64;
    let mut r_d = vec![vec![0.0; grid.w_s.len()]; grid.w_c.len()];
    let mut r_c = vec![vec![0.0; grid.w_s.len()]; grid.w_c.len()];
    for (i, &wc) in grid.w_c.iter().enumerate() {
        for (j, &ws) in grid.w_s.iter().enumerate() {
            let mut dice_acc = 0.0;
            let mut hits = 0usize;
            for r in refs {
                let seg_ref = segment(&r.tokens);
                for d in donors {
                    let gen = generate(&r.c_code, &d.s_code, wc, ws)?;
                    let seg_gen = segment(&gen);
                    dice_acc += mean_foreground_dice(&seg_gen, &seg_ref, n_seg_classes);
                    hits += (classify(&gen) == d.domain) as usize;
                }
            }
            r_d[i][j] = dice_acc / pairs;
            r_c[i][j] = hits as f64 / pairs;
        }
    }
    Ok(SweepReport {
        w_c: grid.w_c.clone(),
        w_s: grid.w_s.clone(),
        r_d,
        r_c,
    })
}

/// Domain prediction from the pretraining run's style branch: factor the
/// tokens, pool the style grid, and take the style head's argmax.
pub fn classify_style_domain(model: &Model, tokens: &Array2<f64>) -> usize {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let tok = tape.constant(tokens.clone());
    let logits = {
        let mut f = Forward::new(&mut tape, &bound, &model.dims);
        let (c, s) = f.encode_to_factors(tok, 1);
        let pc = f.pool(c);
        let ps = f.pool(s);
        f.classify_domains(pc, ps, 0.0).1
    };
    let row = tape.value(logits);
    let mut best = 0usize;
    for j in 1..row.ncols() {
        if row[[0, j]] > row[[0, best]] {
            best = j;
        }
    }
    best
}

/// Wires the sweep to the trained artifacts: the diffusion sampler as the
/// generator, the fine-tuned head as the segmenter, and the pretraining
/// style classifier for R_C. Deterministic in `seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_consistency_sweep(
    model: &Model,
    seg: &SegModel,
    den: &Denoiser,
    guidance: &GuidanceConfig,
    schedule: &DdpmSchedule,
    refs: &[SweepRef],
    donors: &[StyleDonor],
    grid: &SweepGrid,
    seed: u64,
) -> Result<SweepReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    consistency_sweep(
        refs,
        donors,
        grid,
        seg.n_classes,
        |c, s, wc, ws| {
            let g = GuidanceConfig {
                w_c: wc,
                w_s: ws,
                ..*guidance
            };
            sample_latent(den, &g, schedule, c, s, &mut rng)
        },
        |tokens| predict_seg(seg, tokens),
        |tokens| classify_style_domain(model, tokens),
    )
}

// ---- MMD proxy ----

/// Block-mean downsample to an 8x8x8 grid, flattened z-major. The side must
/// be a positive multiple of 8.
pub fn pool_to_grid8(vol: &Volume) -> Result<Vec<f64>> {
    let side = vol.side;
    if side < 8 || side % 8 != 0 {
        return Err(Error::Config(format!(
            "volume side {} is not a multiple of 8",
            side
        )));
    }
    let b = side / 8;
    let inv = 1.0 / (b * b * b) as f64;
    let mut out = vec![0.0; 512];
    for gz in 0..8 {
        for gy in 0..8 {
            for gx in 0..8 {
                let mut acc = 0.0;
                for dz in 0..b {
                    for dy in 0..b {
                        for dx in 0..b {
                            acc += vol.voxel(gx * b + dx, gy * b + dy, gz * b + dz);
                        }
                    }
                }
                out[gz * 64 + gy * 8 + gx] = acc * inv;
            }
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median Euclidean distance over all unordered pairs in the union.
pub fn median_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut dists = Vec::new();
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            dists.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = dists.len();
    if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    }
}

/// Biased MMD^2 with an RBF kernel exp(-d^2 / (2 bw^2)).
pub fn mmd_sq_with_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>], bw: f64) -> f64 {
    assert!(bw > 0.0, "bandwidth must be positive");
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / (2.0 * bw * bw)).exp();
    let mean_kk = |u: &[Vec<f64>], v: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for x in u {
            for y in v {
                s += k(x, y);
            }
        }
        s / (u.len() * v.len()) as f64
    };
    mean_kk(a, a) + mean_kk(b, b) - 2.0 * mean_kk(a, b)
}

/// MMD^2 between two volume sets on pooled 8^3 voxels, with the median
/// pairwise distance of the union as the kernel bandwidth. A zero median
/// (all points identical) reports 0 outright.
pub fn mmd_proxy(set_a: &[Volume], set_b: &[Volume]) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Config("mmd needs two non-empty sets".into()));
    }
    let a: Vec<Vec<f64>> = set_a.iter().map(pool_to_grid8).collect::<Result<_>>()?;
    let b: Vec<Vec<f64>> = set_b.iter().map(pool_to_grid8).collect::<Result<_>>()?;
    let union: Vec<Vec<f64>> = a.iter().chain(b.iter()).cloned().collect();
    let bw = median_pairwise_distance(&union);
    if bw == 0.0 {
        return Ok(0.0);
    }
    Ok(mmd_sq_with_bandwidth(&a, &b, bw))
}

// ---- embedding export ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub record: String,
    pub count: usize,
    pub d_c: usize,
    pub d_s: usize,
}

/// Writes a header line followed by one JSON record per code. Returns the
/// number of code records written.
pub fn export_embeddings(codes: &[FactorCode], path: &Path) -> Result<usize> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let header = EmbeddingHeader {
        record: "header".into(),
        count: codes.len(),
        d_c: codes.first().map_or(0, |c| c.c0.len()),
        d_s: codes.first().map_or(0, |c| c.s0.len()),
    };
    let mut out = fs::File::create(path)?;
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for code in codes {
        writeln!(out, "{}", serde_json::to_string(code)?)?;
    }
    Ok(codes.len())
}

pub fn read_embeddings(path: &Path) -> Result<(EmbeddingHeader, Vec<FactorCode>)> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| {
        Error::MissingPrerequisite(format!("{} is empty; run the export first", path.display()))
    })??;
    let header: EmbeddingHeader = serde_json::from_str(&first)?;
    if header.record != "header" {
        return Err(Error::Config(format!(
            "{} does not start with a header record",
            path.display()
        )));
    }
    let mut codes = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        codes.push(serde_json::from_str(&line)?);
    }
    if codes.len() != header.count {
        return Err(Error::Config(format!(
            "header promises {} records, file holds {}",
            header.count,
            codes.len()
        )));
    }
    Ok((header, codes))
}
