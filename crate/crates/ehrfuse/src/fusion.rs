//! Code-centric fusion stack: temporal projectors, cross-modal transformers
//! keyed on the code stream, per-stream self-attention, the gated adaptation
//! fusion, and the prediction head.

use crate::nn::{linear, Fwd, Linear};
use crate::tensor::{Tape, TensorError, TensorId, TensorResult};

/// Layer-norm affine handles.
#[derive(Debug, Clone, Copy)]
pub struct LnWires {
    pub gain: TensorId,
    pub bias: TensorId,
}

/// Projection handles of one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttnWires {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

/// One pre-norm transformer layer. `ln_kv` is present on cross-modal layers
/// (it normalizes the key/value stream) and absent on self-attention layers.
pub struct BlockWires {
    pub ln_q: LnWires,
    pub ln_kv: Option<LnWires>,
    pub attn: AttnWires,
    pub ln_ff: LnWires,
    pub ffn: (Linear, Linear),
}

/// Gated-fusion handles: trimodal gate, displacement projection, trainable
/// norm-ratio scale, and the output layer norm.
pub struct MagWires {
    pub gate: Linear,
    pub disp: Linear,
    pub beta: TensorId,
    pub ln: LnWires,
}

pub const LN_EPS: f64 = 1e-5;
const NORM_GUARD: f64 = 1e-12;

/// Visit-axis attention mask: `true` entries may be attended. Row `i` covers
/// query position `i`; with `causal` only keys at positions `<= i` are open.
/// `valid_keys`, when given, closes padded key positions.
pub fn attention_mask(
    t_q: usize,
    t_k: usize,
    causal: bool,
    valid_keys: Option<&[bool]>,
) -> Option<Vec<bool>> {
    if !causal && valid_keys.is_none() {
        return None;
    }
    let mut mask = vec![true; t_q * t_k];
    for i in 0..t_q {
        for j in 0..t_k {
            let open = (!causal || j <= i) && valid_keys.map_or(true, |v| v[j]);
            mask[i * t_k + j] = open;
        }
    }
    Some(mask)
}

/// Attention core: `Softmax(Q K^T / sqrt(d_k)) V` with optional masking.
/// Weights are row-stochastic over the open key positions.
pub fn scaled_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    mask: Option<&[bool]>,
) -> TensorResult<TensorId> {
    let d_k = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax(scaled, 1, mask)?;
    tape.matmul(weights, v)
}

/// Single-block cross-modal attention exactly as the architecture defines
/// it: queries projected from the first stream, keys and values from the
/// second, no biases.
pub fn cross_modal_attention(
    tape: &mut Tape,
    q_src: TensorId,
    kv_src: TensorId,
    wq: TensorId,
    wk: TensorId,
    wv: TensorId,
    mask: Option<&[bool]>,
) -> TensorResult<TensorId> {
    let q = tape.matmul(q_src, wq)?;
    let k = tape.matmul(kv_src, wk)?;
    let v = tape.matmul(kv_src, wv)?;
    scaled_attention(tape, q, k, v, mask)
}

/// Multi-head attention with per-head slices of width `d / heads`; the same
/// visit mask applies to every head.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_src: TensorId,
    kv_src: TensorId,
    wires: &AttnWires,
    heads: usize,
    mask: Option<&[bool]>,
) -> TensorResult<TensorId> {
    let d = tape.shape(q_src)[1];
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Contract(format!(
            "attention width {d} is not divisible into {heads} heads"
        )));
    }
    let dh = d / heads;
    let q = linear(tape, q_src, wires.wq)?;
    let k = linear(tape, kv_src, wires.wk)?;
    let v = linear(tape, kv_src, wires.wv)?;
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        outputs.push(scaled_attention(tape, qh, kh, vh, mask)?);
    }
    let cat = tape.concat(&outputs, 1)?;
    linear(tape, cat, wires.wo)
}

fn layer_norm(tape: &mut Tape, x: TensorId, ln: LnWires) -> TensorResult<TensorId> {
    tape.layer_norm(x, ln.gain, ln.bias, LN_EPS)
}

fn feed_forward(tape: &mut Tape, x: TensorId, ffn: (Linear, Linear)) -> TensorResult<TensorId> {
    let h = linear(tape, x, ffn.0)?;
    let h = tape.relu(h);
    linear(tape, h, ffn.1)
}

/// Pre-norm transformer layer. With `kv_src` present the block cross-attends
/// to that stream; otherwise it self-attends. Residuals add the normalized
/// input, so a zero-weight block propagates `LM(x)`.
pub fn transformer_block(
    fwd: &mut Fwd,
    x: TensorId,
    kv_src: Option<TensorId>,
    wires: &BlockWires,
    heads: usize,
    mask: Option<&[bool]>,
) -> TensorResult<TensorId> {
    let xn = layer_norm(fwd.tape, x, wires.ln_q)?;
    let kvn = match (kv_src, wires.ln_kv) {
        (Some(kv), Some(ln_kv)) => layer_norm(fwd.tape, kv, ln_kv)?,
        (Some(kv), None) => kv,
        (None, _) => xn,
    };
    let attn = multi_head_attention(fwd.tape, xn, kvn, &wires.attn, heads, mask)?;
    let attn = fwd.dropout(attn)?;
    let mid = fwd.tape.add(attn, xn)?;
    let midn = layer_norm(fwd.tape, mid, wires.ln_ff)?;
    let ff = feed_forward(fwd.tape, midn, wires.ffn)?;
    let ff = fwd.dropout(ff)?;
    fwd.tape.add(ff, midn)
}

/// Cross-modal transformer: the running stream starts from the target
/// modality and every layer cross-attends into the (layer-0) code stream.
pub fn cmt_forward(
    fwd: &mut Fwd,
    code_stream: TensorId,
    target_stream: TensorId,
    layers: &[BlockWires],
    heads: usize,
    mask: Option<&[bool]>,
) -> TensorResult<TensorId> {
    let mut z = target_stream;
    for wires in layers {
        z = transformer_block(fwd, z, Some(code_stream), wires, heads, mask)?;
    }
    Ok(z)
}

/// Per-stream self-attention transformer over the visit axis.
pub fn self_attention_stream(
    fwd: &mut Fwd,
    x: TensorId,
    layers: &[BlockWires],
    heads: usize,
    mask: Option<&[bool]>,
) -> TensorResult<TensorId> {
    let mut h = x;
    for wires in layers {
        h = transformer_block(fwd, h, None, wires, heads, mask)?;
    }
    Ok(h)
}

/// Temporal projector: a width-`w` convolution along the visit axis with
/// left zero padding so the visit count is preserved and no future visit
/// leaks backwards. Width 1 keeps even single-visit patients trivial.
pub fn temporal_project(
    tape: &mut Tape,
    x: TensorId,
    kernel: TensorId,
    bias: TensorId,
) -> TensorResult<TensorId> {
    let width = tape.shape(kernel)[0];
    let padded = if width > 1 {
        let d = tape.shape(x)[1];
        let zeros = tape.constant(vec![width - 1, d], vec![0.0; (width - 1) * d])?;
        tape.concat(&[zeros, x], 0)?
    } else {
        x
    };
    let conv = tape.conv1d(padded, kernel)?;
    tape.add_row_broadcast(conv, bias)
}

/// The norm-ratio combination step: `alpha = min(||y_t|| / ||disp_t|| * beta, 1)`
/// per visit (zero when the displacement vanishes, clamped into `[0, 1]`),
/// and the pre-norm fusion `y + alpha * disp`.
pub fn mag_combine(
    tape: &mut Tape,
    y: TensorId,
    disp: TensorId,
    beta: TensorId,
) -> TensorResult<(TensorId, TensorId)> {
    let ny = tape.row_l2_norms(y)?;
    let nd = tape.row_l2_norms(disp)?;
    let ratio = tape.guarded_div(ny, nd, NORM_GUARD)?;
    let scaled = tape.mul(ratio, beta)?;
    let capped = tape.min_const(scaled, 1.0);
    // beta can drift negative during training; alpha stays in [0, 1]
    let alpha = tape.relu(capped);
    let shifted = tape.row_scale(disp, alpha)?;
    let fused = tape.add(y, shifted)?;
    Ok((alpha, fused))
}

/// Gated trimodal fusion: a scalar gate per visit from all three streams, a
/// displacement built from the two cross-modal streams, norm-ratio scaling,
/// then layer norm and dropout.
///
/// `code_centred` keeps the code stream as the fusion base; otherwise the
/// base is the mean of the three streams.
pub fn mag_fuse(
    fwd: &mut Fwd,
    y_code: TensorId,
    y_demo: TensorId,
    y_note: TensorId,
    wires: &MagWires,
    code_centred: bool,
) -> TensorResult<TensorId> {
    let all = fwd.tape.concat(&[y_code, y_demo, y_note], 1)?;
    let gate = linear(fwd.tape, all, wires.gate)?;
    let pair = fwd.tape.concat(&[y_demo, y_note], 1)?;
    let gated = fwd.tape.row_scale(pair, gate)?;
    let disp = linear(fwd.tape, gated, wires.disp)?;
    let base = if code_centred {
        y_code
    } else {
        let sum = fwd.tape.add(y_code, y_demo)?;
        let sum = fwd.tape.add(sum, y_note)?;
        fwd.tape.scale(sum, 1.0 / 3.0)
    };
    let (_alpha, fused) = mag_combine(fwd.tape, base, disp, wires.beta)?;
    let normed = layer_norm(fwd.tape, fused, wires.ln)?;
    fwd.dropout(normed)
}

/// Plain additive fusion used by the gate ablation: sum of the three
/// streams, then the same layer norm and dropout.
pub fn sum_fuse(
    fwd: &mut Fwd,
    y_code: TensorId,
    y_demo: TensorId,
    y_note: TensorId,
    ln: LnWires,
) -> TensorResult<TensorId> {
    let sum = fwd.tape.add(y_code, y_demo)?;
    let sum = fwd.tape.add(sum, y_note)?;
    let normed = layer_norm(fwd.tape, sum, ln)?;
    fwd.dropout(normed)
}

/// Prediction head: independent per-label probabilities.
pub fn predict(tape: &mut Tape, m: TensorId, head: Linear) -> TensorResult<TensorId> {
    let logits = linear(tape, m, head)?;
    Ok(tape.sigmoid(logits))
}
