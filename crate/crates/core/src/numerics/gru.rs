//! Standard gated recurrent unit cell composed from tape primitives.
//! Candidate state uses the reset-inside form: n = tanh(W_n x + b_in + r * (U_n h + b_hn)).

use crate::error::Result;

use super::tape::{Tape, Var};

/// The 6 weight matrices and 6 biases of one GRU cell, as tape handles.
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_iz: Var,
    pub b_hz: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_ir: Var,
    pub b_hr: Var,
    pub w_n: Var,
    pub u_n: Var,
    pub b_in: Var,
    pub b_hn: Var,
}

/// One step: x [B, in], h [B, hid] -> h' [B, hid].
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let zx = tape.linear(x, p.w_z, p.b_iz)?;
    let zh = tape.linear(h, p.u_z, p.b_hz)?;
    let z_pre = tape.add(zx, zh)?;
    let z = tape.sigmoid(z_pre);

    let rx = tape.linear(x, p.w_r, p.b_ir)?;
    let rh = tape.linear(h, p.u_r, p.b_hr)?;
    let r_pre = tape.add(rx, rh)?;
    let r = tape.sigmoid(r_pre);

    let nx = tape.linear(x, p.w_n, p.b_in)?;
    let nh = tape.linear(h, p.u_n, p.b_hn)?;
    let gated = tape.mul(r, nh)?;
    let n_pre = tape.add(nx, gated)?;
    let n = tape.tanh(n_pre);

    // h' = (1 - z) * n + z * h
    let neg_z = tape.scalar_mul(z, -1.0);
    let one_minus_z = tape.add_scalar(neg_z, 1.0);
    let a = tape.mul(one_minus_z, n)?;
    let b = tape.mul(z, h)?;
    tape.add(a, b)
}
