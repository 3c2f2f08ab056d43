//! Layers shared by every model: affine maps and the gated recurrent cell.

use rand::Rng;

use crate::error::{NumError, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::DenseArray;

/// `x · W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_init(format!("{prefix}.w"), &[input, output], Init::Glorot, rng)?;
        let bias = if bias {
            Some(store.add_init(format!("{prefix}.b"), &[output], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, bias: bool) -> Result<Self> {
        let weight = store.id(&format!("{prefix}.w"))?;
        let shape = store.value(weight).shape().to_vec();
        let bias = if bias {
            Some(store.id(&format!("{prefix}.b"))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input: shape[0],
            output: shape[1],
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Gated recurrent cell.
///
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `n = tanh(xW_n + (r⊙h)U_n + b_n)`, `h' = (1−z)⊙h + z⊙n`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    pub input: usize,
    pub hidden: usize,
}

const GATES: [&str; 3] = ["z", "r", "n"];

impl Gru {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut ids = Vec::with_capacity(9);
        for g in GATES {
            ids.push(store.add_init(format!("{prefix}.w_{g}"), &[input, hidden], Init::Glorot, rng)?);
            ids.push(store.add_init(format!("{prefix}.u_{g}"), &[hidden, hidden], Init::Glorot, rng)?);
            ids.push(store.add_init(format!("{prefix}.b_{g}"), &[hidden], Init::Zeros, rng)?);
        }
        Ok(Self::from_ids(&ids, input, hidden))
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut ids = Vec::with_capacity(9);
        for g in GATES {
            for kind in ["w", "u", "b"] {
                ids.push(store.id(&format!("{prefix}.{kind}_{g}"))?);
            }
        }
        let shape = store.value(ids[0]).shape().to_vec();
        Ok(Self::from_ids(&ids, shape[0], shape[1]))
    }

    fn from_ids(ids: &[ParamId], input: usize, hidden: usize) -> Self {
        Self {
            w: [ids[0], ids[3], ids[6]],
            u: [ids[1], ids[4], ids[7]],
            b: [ids[2], ids[5], ids[8]],
            input,
            hidden,
        }
    }

    /// Zero initial state.
    pub fn initial_state(&self, tape: &mut Tape) -> Var {
        tape.constant(DenseArray::zeros(&[self.hidden]))
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, state: Var, input: Var) -> Result<Var> {
        gru_step(tape, store, self, state, input)
    }

    /// Runs the cell over `inputs` from a zero state; returns every hidden state.
    pub fn unroll(&self, tape: &mut Tape, store: &ParamStore, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.is_empty() {
            return Err(NumError::EmptyInput("gru unroll"));
        }
        let mut h = self.initial_state(tape);
        let mut states = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h = self.step(tape, store, h, x)?;
            states.push(h);
        }
        Ok(states)
    }
}

pub fn gru_step(
    tape: &mut Tape,
    store: &ParamStore,
    cell: &Gru,
    state: Var,
    input: Var,
) -> Result<Var> {
    let h_len = tape.value(state).len();
    let x_len = tape.value(input).len();
    if h_len != cell.hidden || x_len != cell.input {
        return Err(NumError::Dimension {
            op: "gru_step",
            left: vec![cell.input, cell.hidden],
            right: vec![x_len, h_len],
        });
    }
    let gate = |tape: &mut Tape, k: usize, h: Var| -> Result<Var> {
        let w = tape.param(store, cell.w[k]);
        let u = tape.param(store, cell.u[k]);
        let b = tape.param(store, cell.b[k]);
        let xw = tape.matmul(input, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        tape.add_row_bias(s, b)
    };
    let z_pre = gate(tape, 0, state)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, 1, state)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, state)?;
    let n_pre = gate(tape, 2, rh)?;
    let n = tape.tanh(n_pre);
    let diff = tape.sub(n, state)?;
    let step = tape.mul(z, diff)?;
    tape.add(state, step)
}
