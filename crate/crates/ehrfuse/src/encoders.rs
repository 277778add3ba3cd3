//! Modality-specific encoders. Each produces one feature row per visit and
//! finishes with Linear + ReLU (+ dropout), so encoder outputs are
//! elementwise nonnegative.
//!
//! * codes: bag-of-codes sum over an embedding table, then projection;
//! * demographics: one embedding table per attribute, concatenated;
//! * notes: word embeddings through parallel 1D convolutions (one per filter
//!   width), ReLU, max-over-time, concatenated and projected;
//! * parent heads: per-modality `Sigmoid(Linear(..))` predicting next-visit
//!   parent categories.

use crate::data::DEMO_ATTRS;
use crate::nn::{linear, Fwd, Linear};
use crate::tensor::{Tape, TensorId, TensorResult};

pub struct CodeEncoderWires {
    pub table: TensorId,
    pub proj: Linear,
}

pub struct DemoEncoderWires {
    pub tables: [TensorId; DEMO_ATTRS],
    pub proj: Linear,
}

pub struct NoteEncoderWires {
    pub word_table: TensorId,
    /// One (kernel, bias) pair per filter width.
    pub convs: Vec<(TensorId, TensorId)>,
    pub proj: Linear,
}

/// Per-visit code-set encoder: sum the embedding rows of the present codes
/// (order- and duplicate-free by construction), then project.
pub fn encode_codes(
    fwd: &mut Fwd,
    wires: &CodeEncoderWires,
    code_sets: &[Vec<usize>],
) -> TensorResult<TensorId> {
    let bags = fwd.tape.embed_sum_rows(wires.table, code_sets)?;
    let h = linear(fwd.tape, bags, wires.proj)?;
    let h = fwd.tape.relu(h);
    fwd.dropout(h)
}

/// Per-visit demographics encoder: per-attribute lookups concatenated, then
/// projected.
pub fn encode_demographics(
    fwd: &mut Fwd,
    wires: &DemoEncoderWires,
    demo: &[[usize; DEMO_ATTRS]],
) -> TensorResult<TensorId> {
    let mut columns = Vec::with_capacity(DEMO_ATTRS);
    for a in 0..DEMO_ATTRS {
        let idx: Vec<usize> = demo.iter().map(|d| d[a]).collect();
        columns.push(fwd.tape.embed_rows(wires.tables[a], &idx)?);
    }
    let cat = fwd.tape.concat(&columns, 1)?;
    let h = linear(fwd.tape, cat, wires.proj)?;
    let h = fwd.tape.relu(h);
    fwd.dropout(h)
}

/// Per-visit note encoder: embed tokens, run every conv filter (ReLU before
/// the max, in that order), max-pool over time, concatenate the pooled
/// vectors, project.
///
/// Each note must be at least as long as the widest filter; the data module
/// pads to length 4.
pub fn encode_notes(
    fwd: &mut Fwd,
    wires: &NoteEncoderWires,
    notes: &[Vec<usize>],
) -> TensorResult<TensorId> {
    let mut visit_rows = Vec::with_capacity(notes.len());
    for note in notes {
        let embedded = fwd.tape.embed_rows(wires.word_table, note)?;
        let mut pooled = Vec::with_capacity(wires.convs.len());
        for &(kernel, bias) in &wires.convs {
            let conv = fwd.tape.conv1d(embedded, kernel)?;
            let conv = fwd.tape.add_row_broadcast(conv, bias)?;
            let act = fwd.tape.relu(conv);
            pooled.push(fwd.tape.max_over_time(act)?);
        }
        visit_rows.push(fwd.tape.concat(&pooled, 1)?);
    }
    let stacked = fwd.tape.concat(&visit_rows, 0)?;
    let h = linear(fwd.tape, stacked, wires.proj)?;
    let h = fwd.tape.relu(h);
    fwd.dropout(h)
}

/// Parent-category prediction head: `Sigmoid(Linear(m_bar))`, one instance
/// per modality.
pub fn parent_head(tape: &mut Tape, head: Linear, m_bar: TensorId) -> TensorResult<TensorId> {
    let logits = linear(tape, m_bar, head)?;
    Ok(tape.sigmoid(logits))
}
