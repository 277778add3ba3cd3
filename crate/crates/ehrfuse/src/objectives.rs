//! Training objectives: masked multi-label cross-entropy, bimodal
//! temperature-scaled contrastive alignment anchored on the code modality,
//! the parent-level auxiliary losses, and their weighted combination.

use crate::tensor::{Tape, TensorError, TensorId, TensorResult};

/// Probabilities are clamped into `[eps, 1 - eps]` before logs.
pub const PROB_EPS: f64 = 1e-12;

const COSINE_GUARD: f64 = 1e-12;

/// Per-visit binary cross-entropy summed over labels, averaged over the
/// unmasked visits. A fully masked input contributes an exact zero (with a
/// warning, since it usually means a batching bug).
pub fn multilabel_ce(
    tape: &mut Tape,
    probs: TensorId,
    targets: &[f64],
    mask: &[bool],
) -> TensorResult<TensorId> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] * shape[1] != targets.len() || shape[0] != mask.len() {
        return Err(TensorError::BadShape {
            op: "multilabel_ce",
            expected: format!("[{} x {}] targets with a {}-entry mask", shape[0], shape[1], shape[0]),
            got: vec![targets.len(), mask.len()],
        });
    }
    let valid = mask.iter().filter(|m| **m).count();
    if valid == 0 {
        log::warn!("multilabel_ce: every visit is masked; loss is 0");
        return Ok(tape.scalar_const(0.0));
    }
    let (t, labels) = (shape[0], shape[1]);

    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.log(p);
    let neg_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_const(neg_p, 1.0);
    let log_q = tape.log(one_minus_p);

    let y = tape.constant(vec![t, labels], targets.to_vec())?;
    let y_inv: Vec<f64> = targets.iter().map(|v| 1.0 - v).collect();
    let y_neg = tape.constant(vec![t, labels], y_inv)?;

    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(y_neg, log_q)?;
    let both = tape.add(pos, neg)?;
    let per_visit = tape.row_sums(both)?;

    let mask_col: Vec<f64> = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
    let mask_t = tape.constant(vec![t, 1], mask_col)?;
    let masked = tape.mul(per_visit, mask_t)?;
    let total = tape.sum_all(masked);
    Ok(tape.scale(total, -1.0 / valid as f64))
}

/// Two-direction InfoNCE over cosine similarities of matched patient-level
/// representations: `alpha_con` weights the forward direction, `1 -
/// alpha_con` the reverse, averaged over the batch. Zero-norm rows behave as
/// similarity 0. With a single patient both directions are exactly zero.
pub fn bimodal_contrastive(
    tape: &mut Tape,
    h1: TensorId,
    h2: TensorId,
    tau: f64,
    alpha_con: f64,
) -> TensorResult<TensorId> {
    if tape.shape(h1) != tape.shape(h2) {
        return Err(TensorError::DimensionMismatch {
            op: "bimodal_contrastive",
            lhs: tape.shape(h1).to_vec(),
            rhs: tape.shape(h2).to_vec(),
        });
    }
    let n1 = tape.guarded_row_normalize(h1, COSINE_GUARD)?;
    let n2 = tape.guarded_row_normalize(h2, COSINE_GUARD)?;
    let n2t = tape.transpose(n2)?;
    let sims = tape.matmul(n1, n2t)?;
    let scaled = tape.scale(sims, 1.0 / tau);

    let diag = tape.take_diag(scaled)?;
    let lse_fwd = tape.log_sum_exp_rows(scaled)?;
    let fwd = tape.sub(lse_fwd, diag)?;

    let scaled_t = tape.transpose(scaled)?;
    let lse_rev = tape.log_sum_exp_rows(scaled_t)?;
    let rev = tape.sub(lse_rev, diag)?;

    let fwd_w = tape.scale(fwd, alpha_con);
    let rev_w = tape.scale(rev, 1.0 - alpha_con);
    let combined = tape.add(fwd_w, rev_w)?;
    Ok(tape.mean_all(combined))
}

/// Sum of the two code-anchored pairs: (code, demo) and (code, note).
pub fn contrastive_total(
    tape: &mut Tape,
    code: TensorId,
    demo: TensorId,
    note: TensorId,
    tau: f64,
    alpha_con: f64,
) -> TensorResult<TensorId> {
    let ch = bimodal_contrastive(tape, code, demo, tau, alpha_con)?;
    let cw = bimodal_contrastive(tape, code, note, tau, alpha_con)?;
    tape.add(ch, cw)
}

/// Sum of the three per-modality parent-level cross-entropies.
pub fn hierarchical_loss(
    tape: &mut Tape,
    parent_probs: &[TensorId; 3],
    targets: &[f64],
    mask: &[bool],
) -> TensorResult<TensorId> {
    let mut total = None;
    for head in parent_probs {
        let term = multilabel_ce(tape, *head, targets, mask)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("three heads"))
}

/// Weighted sum of loss parts. Zero-weight parts are skipped outright, so an
/// ablated objective is bit-identical to never building that term.
pub fn total_loss(tape: &mut Tape, parts: &[(TensorId, f64)]) -> TensorResult<TensorId> {
    for (_, w) in parts {
        if *w < 0.0 {
            return Err(TensorError::Contract(format!("negative loss weight {w}")));
        }
    }
    let mut total = None;
    for (id, w) in parts {
        if *w == 0.0 {
            continue;
        }
        let scaled = if *w == 1.0 { *id } else { tape.scale(*id, *w) };
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    Ok(total.unwrap_or_else(|| tape.scalar_const(0.0)))
}
