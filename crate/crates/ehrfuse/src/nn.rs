//! Shared wiring helpers: the forward-pass context and the affine layer.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, TensorId, TensorResult};

/// Everything a forward pass threads through the network: the tape, the
/// train/eval switch, the dropout rate, and the RNG that draws the masks.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub train: bool,
    pub dropout_rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Fwd<'_> {
    pub fn dropout(&mut self, id: TensorId) -> TensorResult<TensorId> {
        self.tape.dropout(id, self.dropout_rate, self.train, self.rng)
    }
}

/// Weight and bias handles of one affine layer, bound to the current tape.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: TensorId,
    pub b: TensorId,
}

/// `x @ w + b` over rows.
pub fn linear(tape: &mut Tape, x: TensorId, l: Linear) -> TensorResult<TensorId> {
    let xw = tape.matmul(x, l.w)?;
    tape.add_row_broadcast(xw, l.b)
}
