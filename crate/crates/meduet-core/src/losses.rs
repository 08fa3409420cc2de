//! Training objectives: domain-adversarial cross-entropy over pooled factors,
//! masked factor distillation against the EMA teacher, the quadruplet
//! contrast over swapped views, and the weighted total.
//!
//! Teacher-derived tensors are stop-gradient wrapped here regardless of how
//! the caller bound them, so teacher parameters can never receive gradient
//! through these losses.

use meduet_tensor::{Tape, TensorId};
use ndarray::Array2;

use crate::mixing::{stream_weight_cols, MixMask, ReconScope};
use crate::{Error, Result};

/// View order within a quadruplet group: original i, original j, content-i
/// with style-j, content-j with style-i.
pub const QUAD_VIEWS: usize = 4;
/// Positive partner per view in content space (same content identity).
pub const CONTENT_POSITIVE: [usize; QUAD_VIEWS] = [2, 3, 0, 1];
/// Positive partner per view in style space (same style identity).
pub const STYLE_POSITIVE: [usize; QUAD_VIEWS] = [3, 2, 1, 0];

pub const SCORE_NEG_INF: f64 = -1e9;
pub const ALPHA_SCALE_CAP: f64 = 100.0;

/// Domain-adversarial loss. Logit stacks hold the pooled-content and
/// pooled-style classifier outputs for both pair members: rows 0..B are the
/// first volumes, rows B..2B the second. Returns the per-pair mean of
/// CE(content head) + CE(style head) summed over both members, so two
/// uniform heads over n domains give 4 ln n.
pub fn domain_loss(
    tape: &mut Tape,
    content_logits: TensorId,
    style_logits: TensorId,
    labels: &[usize],
) -> Result<TensorId> {
    let n_domains = tape.value(content_logits).ncols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_domains) {
        return Err(Error::Config(format!(
            "domain label {} out of range (n_domains = {})",
            bad, n_domains
        )));
    }
    let rows = tape.value(content_logits).nrows();
    if rows != labels.len() || rows % 2 != 0 {
        return Err(Error::Config(format!(
            "domain loss expects 2 rows per pair, got {} rows for {} labels",
            rows,
            labels.len()
        )));
    }
    let pairs = rows / 2;
    let ce_c = tape.cross_entropy_sum(content_logits, labels);
    let ce_s = tape.cross_entropy_sum(style_logits, labels);
    let total = tape.add(ce_c, ce_s);
    Ok(tape.scale(total, 1.0 / pairs as f64))
}

/// Student and teacher factor grids for both unmixed streams of a batch,
/// each (pairs * L) x width, pair-major rows.
#[derive(Debug, Clone, Copy)]
pub struct FactorStreams {
    pub c_i: TensorId,
    pub s_i: TensorId,
    pub c_j: TensorId,
    pub s_j: TensorId,
}

/// One factor space's masked distillation. Per token the discrepancy is the
/// dimension-mean squared distance between the student grid and the
/// stop-gradient teacher grid; stream i is weighted by `w_i` (a constant
/// (rows x 1) column on the tape), stream j by `w_j`, and the weighted sum is
/// averaged over all tokens of all pairs.
pub fn masked_token_distill(
    tape: &mut Tape,
    student_i: TensorId,
    teacher_i: TensorId,
    student_j: TensorId,
    teacher_j: TensorId,
    w_i: TensorId,
    w_j: TensorId,
) -> TensorId {
    let rows = tape.value(student_i).nrows();
    assert_eq!(tape.value(w_i).nrows(), rows, "stream-i weights vs grid rows");
    assert_eq!(tape.value(w_j).nrows(), rows, "stream-j weights vs grid rows");
    let delta = |tape: &mut Tape, s: TensorId, t: TensorId| {
        let t = tape.stop_gradient(t);
        let diff = tape.sub(s, t);
        let sq = tape.square(diff);
        tape.row_mean(sq)
    };
    let di = delta(tape, student_i, teacher_i);
    let dj = delta(tape, student_j, teacher_j);
    let wi = tape.mul_col(di, w_i);
    let wj = tape.mul_col(dj, w_j);
    let sum = tape.add(wi, wj);
    let total = tape.sum_all(sum);
    tape.scale(total, 1.0 / rows as f64)
}

/// Masked factor distillation. Each stream is scored where its tokens were
/// visible in the mix; the content term is weighted by `lambda_c`, the style
/// term enters unweighted.
pub fn mftd_loss(
    tape: &mut Tape,
    student: FactorStreams,
    teacher: FactorStreams,
    masks: &[MixMask],
    lambda_c: f64,
) -> TensorId {
    let l = masks.first().map(|m| m.len()).unwrap_or(0);
    let rows = masks.len() * l;
    for id in [student.c_i, student.s_i, student.c_j, student.s_j] {
        assert_eq!(tape.value(id).nrows(), rows, "factor grid rows vs masks");
    }
    let (w_i, w_j) = stream_weight_cols(masks, ReconScope::MaskedAsEq1);
    let w_i = tape.constant(w_i);
    let w_j = tape.constant(w_j);

    let content = masked_token_distill(
        tape, student.c_i, teacher.c_i, student.c_j, teacher.c_j, w_i, w_j,
    );
    let style = masked_token_distill(
        tape, student.s_i, teacher.s_i, student.s_j, teacher.s_j, w_i, w_j,
    );
    let weighted = tape.scale(content, lambda_c);
    tape.add(weighted, style)
}

/// One factor space's half of the quadruplet contrast. Queries and keys are
/// pooled, L2-normalized view features, 4 rows per pair in QUAD_VIEWS order;
/// scores are scaled by exp(alpha) clamped to ALPHA_SCALE_CAP, self-scores
/// are pushed to -1e9, and each anchor contrasts its single positive against
/// the remaining views of its own quadruplet.
fn quad_contrast(
    tape: &mut Tape,
    queries: TensorId,
    keys: TensorId,
    alpha: TensorId,
    positive: &[usize; QUAD_VIEWS],
) -> TensorId {
    let rows = tape.value(queries).nrows();
    assert!(rows > 0 && rows % QUAD_VIEWS == 0, "rows must group into quadruplets");
    let keys = tape.stop_gradient(keys);
    let scores = tape.group_scores(queries, keys, QUAD_VIEWS);
    let scale = tape.exp_clamped(alpha, ALPHA_SCALE_CAP);
    let scaled = tape.mul_scalar_node(scores, scale);

    let mut self_mask = Array2::zeros((rows, QUAD_VIEWS));
    let mut pos_onehot = Array2::zeros((rows, QUAD_VIEWS));
    for a in 0..rows {
        let v = a % QUAD_VIEWS;
        self_mask[[a, v]] = SCORE_NEG_INF;
        pos_onehot[[a, positive[v]]] = 1.0;
    }
    let self_mask = tape.constant(self_mask);
    let pos_onehot = tape.constant(pos_onehot);

    let masked = tape.add(scaled, self_mask);
    let lse = tape.logsumexp_rows(masked);
    let pos_scores = tape.mul(masked, pos_onehot);
    let lse_sum = tape.sum_all(lse);
    let pos_sum = tape.sum_all(pos_scores);
    let diff = tape.sub(lse_sum, pos_sum);
    tape.scale(diff, 1.0 / rows as f64)
}

/// Quadruplet contrast over both factor spaces. All four inputs are
/// (pairs * 4) x width matrices of pooled, unit-norm view features in
/// QUAD_VIEWS order; queries come from the student, keys from the teacher.
pub fn siqc_loss(
    tape: &mut Tape,
    content_q: TensorId,
    content_k: TensorId,
    style_q: TensorId,
    style_k: TensorId,
    alpha_c: TensorId,
    alpha_s: TensorId,
) -> TensorId {
    let lc = quad_contrast(tape, content_q, content_k, alpha_c, &CONTENT_POSITIVE);
    let ls = quad_contrast(tape, style_q, style_k, alpha_s, &STYLE_POSITIVE);
    tape.add(lc, ls)
}

/// Weighted objective: L_r + l1 * L_d + l2 * L_MFTD + l3 * L_SiQC.
/// Absent components (ablations) are skipped entirely.
pub fn total_loss(
    tape: &mut Tape,
    l_r: TensorId,
    l_d: Option<TensorId>,
    l_mftd: Option<TensorId>,
    l_siqc: Option<TensorId>,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
) -> TensorId {
    let mut total = l_r;
    for (term, weight) in [(l_d, lambda1), (l_mftd, lambda2), (l_siqc, lambda3)] {
        if let Some(id) = term {
            let scaled = tape.scale(id, weight);
            total = tape.add(total, scaled);
        }
    }
    total
}
