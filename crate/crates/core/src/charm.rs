//! Channel Harmonized Attention Refinement Module: causal gate,
//! per-position channel attention, grouped channel shuffle, and
//! dual-convolution spatial attention over a [B, C, 3, L] grid whose rows
//! are the diag / proc / med-history modalities.

use crate::error::{CafeError, Result};
use crate::numerics::{Tape, Var};

pub const REDUCTION: usize = 4;
pub const SHUFFLE_GROUPS: usize = 4;
pub const IN_EPS: f64 = 1e-5;

/// Channel-MLP width for embedding dim `c` at reduction ratio 4.
pub fn channel_hidden(c: usize) -> usize {
    (c / REDUCTION).max(1)
}

/// Tape handles for all CHARM parameters.
pub struct CharmVars {
    pub ca_w1: Var, // [C, C/r]
    pub ca_b1: Var, // [C/r]
    pub ca_w2: Var, // [C/r, C]
    pub ca_b2: Var, // [C]
    pub conv1_k: Var, // [C, C, 7, 7]
    pub conv1_b: Var, // [C]
    pub in1_gamma: Var, // [C]
    pub in1_beta: Var,  // [C]
    pub conv2_k: Var, // [C, C, 7, 7]
    pub conv2_b: Var, // [C]
    pub in2_gamma: Var, // [C]
    pub in2_beta: Var,  // [C]
    pub gate_a: Var, // [1]
    pub gate_b: Var, // [1]
}

/// Fused-grid input: embeddings, slot validity, and per-slot aggregated
/// causal effects. `mask` is row-major [B, H, W] with 0/1 entries.
pub struct CharmInput {
    pub x: Var,        // [B, C, H, W]
    pub mask: Vec<f64>,
    pub tau_grid: Var, // [B, 1, H, W]
}

/// Eq. 4-7: per-position bottleneck MLP over channels, sigmoid to an
/// attention map, multiply into X.
pub fn channel_attention(tape: &mut Tape, x: Var, p: &CharmVars) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 {
        return Err(CafeError::shape(format!("channel_attention: x {xs:?}")));
    }
    let [b, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
    let perm = tape.permute(x, &[0, 2, 3, 1])?; // [B, H, W, C]
    let flat = tape.reshape(perm, &[b * h * w, c])?;
    let hid = tape.linear(flat, p.ca_w1, p.ca_b1)?;
    let hid = tape.relu(hid);
    let out = tape.linear(hid, p.ca_w2, p.ca_b2)?;
    let out = tape.reshape(out, &[b, h, w, c])?;
    let out = tape.permute(out, &[0, 3, 1, 2])?; // back to [B, C, H, W]
    let attn = tape.sigmoid(out);
    tape.mul(x, attn)
}

/// Eq. 8-9: when C is divisible by g, transpose the (g, C/g) channel
/// grouping; otherwise identity.
pub fn channel_shuffle(tape: &mut Tape, x: Var, g: usize) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 {
        return Err(CafeError::shape(format!("channel_shuffle: x {xs:?}")));
    }
    let [b, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
    if g <= 1 || c % g != 0 {
        return Ok(x);
    }
    let grouped = tape.reshape(x, &[b, g, c / g, h, w])?;
    let swapped = tape.permute(grouped, &[0, 2, 1, 3, 4])?;
    tape.reshape(swapped, &[b, c, h, w])
}

/// Eq. 10-12: F = Conv7x7(IN(ReLU(Conv7x7(X)))); A = sigma(IN(F));
/// output = X * A. Both convs preserve the channel count.
pub fn spatial_attention(tape: &mut Tape, x: Var, p: &CharmVars) -> Result<Var> {
    let c1 = tape.conv7x7(x, p.conv1_k, p.conv1_b)?;
    let r1 = tape.relu(c1);
    let n1 = tape.instance_norm(r1, p.in1_gamma, p.in1_beta, IN_EPS)?;
    let f = tape.conv7x7(n1, p.conv2_k, p.conv2_b)?;
    let n2 = tape.instance_norm(f, p.in2_gamma, p.in2_beta, IN_EPS)?;
    let attn = tape.sigmoid(n2);
    tape.mul(x, attn)
}

/// Eq. 13: gate = sigma(a * tau_grid + b), broadcast over channels.
pub fn causal_gate(tape: &mut Tape, x: Var, tau_grid: Var, a: Var, b: Var) -> Result<Var> {
    tape.value(tau_grid).check_finite("causal gate tau")?;
    let scaled = tape.mul_scalar_var(tau_grid, a)?;
    let pre = tape.add_scalar_var(scaled, b)?;
    let gate = tape.sigmoid(pre);
    tape.mul_bcast_chan(x, gate)
}

/// Full pipeline: causal gate -> channel attention -> channel shuffle ->
/// spatial attention, then a mask-aware mean per modality row. A row with
/// zero valid slots pools to a zero vector.
pub fn charm_forward(
    tape: &mut Tape,
    input: &CharmInput,
    p: &CharmVars,
) -> Result<(Var, [Var; 3])> {
    let xs = tape.value(input.x).shape().to_vec();
    if xs.len() != 4 || xs[2] != 3 {
        return Err(CafeError::shape(format!("charm_forward: x {xs:?}, want [B,C,3,L]")));
    }
    let [b, _, h, w] = [xs[0], xs[1], xs[2], xs[3]];
    if input.mask.len() != b * h * w {
        return Err(CafeError::shape(format!(
            "charm_forward: mask len {} for [B,H,W] = [{b},{h},{w}]",
            input.mask.len()
        )));
    }
    if input.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(CafeError::data("charm_forward: mask entries must be 0 or 1"));
    }

    let gated = causal_gate(tape, input.x, input.tau_grid, p.gate_a, p.gate_b)?;
    let chan = channel_attention(tape, gated, p)?;
    let shuf = channel_shuffle(tape, chan, SHUFFLE_GROUPS)?;
    let out = spatial_attention(tape, shuf, p)?;

    let mut pooled = Vec::with_capacity(3);
    for row in 0..3 {
        let mut row_mask = Vec::with_capacity(b * w);
        for bi in 0..b {
            row_mask.extend_from_slice(&input.mask[(bi * h + row) * w..(bi * h + row) * w + w]);
        }
        pooled.push(tape.masked_mean_row(out, row, &row_mask)?);
    }
    Ok((out, [pooled[0], pooled[1], pooled[2]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use crate::numerics::{grad_check, rng};
    use rand::Rng;

    fn zero_vars(tape: &mut Tape, c: usize) -> CharmVars {
        let cr = channel_hidden(c);
        CharmVars {
            ca_w1: tape.leaf(Tensor::zeros(&[c, cr]), true),
            ca_b1: tape.leaf(Tensor::zeros(&[cr]), true),
            ca_w2: tape.leaf(Tensor::zeros(&[cr, c]), true),
            ca_b2: tape.leaf(Tensor::zeros(&[c]), true),
            conv1_k: tape.leaf(Tensor::zeros(&[c, c, 7, 7]), true),
            conv1_b: tape.leaf(Tensor::zeros(&[c]), true),
            in1_gamma: tape.leaf(Tensor::full(&[c], 1.0), true),
            in1_beta: tape.leaf(Tensor::zeros(&[c]), true),
            conv2_k: tape.leaf(Tensor::zeros(&[c, c, 7, 7]), true),
            conv2_b: tape.leaf(Tensor::zeros(&[c]), true),
            in2_gamma: tape.leaf(Tensor::full(&[c], 1.0), true),
            in2_beta: tape.leaf(Tensor::zeros(&[c]), true),
            gate_a: tape.leaf(Tensor::zeros(&[1]), true),
            gate_b: tape.leaf(Tensor::zeros(&[1]), true),
        }
    }

    fn random_vars(tape: &mut Tape, c: usize, rng: &mut impl Rng) -> CharmVars {
        let cr = channel_hidden(c);
        CharmVars {
            ca_w1: tape.leaf(Tensor::uniform_init(&[c, cr], c, rng), true),
            ca_b1: tape.leaf(Tensor::uniform_init(&[cr], c, rng), true),
            ca_w2: tape.leaf(Tensor::uniform_init(&[cr, c], cr, rng), true),
            ca_b2: tape.leaf(Tensor::uniform_init(&[c], cr, rng), true),
            conv1_k: tape.leaf(Tensor::uniform_init(&[c, c, 7, 7], c * 49, rng), true),
            conv1_b: tape.leaf(Tensor::uniform_init(&[c], c * 49, rng), true),
            in1_gamma: tape.leaf(Tensor::full(&[c], 1.0), true),
            in1_beta: tape.leaf(Tensor::zeros(&[c]), true),
            conv2_k: tape.leaf(Tensor::uniform_init(&[c, c, 7, 7], c * 49, rng), true),
            conv2_b: tape.leaf(Tensor::uniform_init(&[c], c * 49, rng), true),
            in2_gamma: tape.leaf(Tensor::full(&[c], 1.0), true),
            in2_beta: tape.leaf(Tensor::zeros(&[c]), true),
            gate_a: tape.leaf(Tensor::scalar(0.7), true),
            gate_b: tape.leaf(Tensor::scalar(-0.2), true),
        }
    }

    fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..numel).map(|_| rng.random_range(lo..hi)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn channel_attention_zero_params_halves_input() {
        let mut tape = Tape::new();
        let mut r = rng::stream(1, "ca-zero");
        let xt = random_tensor(&[1, 8, 2, 2], -1.0, 1.0, &mut r);
        let x = tape.leaf(xt.clone(), true);
        let p = zero_vars(&mut tape, 8);
        let out = channel_attention(&mut tape, x, &p).unwrap();
        for (o, i) in tape.value(out).data().iter().zip(xt.data()) {
            assert!((o - 0.5 * i).abs() < 1e-6);
        }
        // zero input stays zero regardless of attention values
        let x0 = tape.leaf(Tensor::zeros(&[1, 8, 2, 2]), true);
        let out0 = channel_attention(&mut tape, x0, &p).unwrap();
        assert!(tape.value(out0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_attention_matches_position_loop() {
        let (b, c, h, w) = (1usize, 8usize, 2usize, 2usize);
        let cr = channel_hidden(c);
        let mut tape = Tape::new();
        let mut r = rng::stream(2, "ca-loop");
        let xt = random_tensor(&[b, c, h, w], -1.0, 1.0, &mut r);
        let x = tape.leaf(xt.clone(), true);
        let p = random_vars(&mut tape, c, &mut r);
        let out = channel_attention(&mut tape, x, &p).unwrap();

        let w1 = tape.value(p.ca_w1).data().to_vec();
        let b1 = tape.value(p.ca_b1).data().to_vec();
        let w2 = tape.value(p.ca_w2).data().to_vec();
        let b2 = tape.value(p.ca_b2).data().to_vec();
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    // per-position channel vector
                    let vin: Vec<f64> = (0..c)
                        .map(|ci| xt.data()[((bi * c + ci) * h + hi) * w + wi])
                        .collect();
                    let hid: Vec<f64> = (0..cr)
                        .map(|k| {
                            let mut v = b1[k];
                            for ci in 0..c {
                                v += vin[ci] * w1[ci * cr + k];
                            }
                            v.max(0.0)
                        })
                        .collect();
                    for ci in 0..c {
                        let mut pre = b2[ci];
                        for k in 0..cr {
                            pre += hid[k] * w2[k * c + ci];
                        }
                        let a = 1.0 / (1.0 + (-pre).exp());
                        let want = vin[ci] * a;
                        let got = tape.value(out).data()[((bi * c + ci) * h + hi) * w + wi];
                        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn shuffle_c8_g4_order_and_c6_identity() {
        let mut tape = Tape::new();
        // channel ci holds constant value ci
        let mut data = Vec::new();
        for ci in 0..8 {
            data.extend(std::iter::repeat(ci as f64).take(2));
        }
        let x = tape.leaf(Tensor::new(vec![1, 8, 1, 2], data).unwrap(), false);
        let out = channel_shuffle(&mut tape, x, 4).unwrap();
        let got: Vec<f64> = tape.value(out).data().iter().step_by(2).copied().collect();
        assert_eq!(got, vec![0.0, 2.0, 4.0, 6.0, 1.0, 3.0, 5.0, 7.0]);

        let x6 = tape.leaf(Tensor::new(vec![1, 6, 1, 1], (0..6).map(f64::from).collect()).unwrap(), false);
        let out6 = channel_shuffle(&mut tape, x6, 4).unwrap();
        assert_eq!(tape.value(out6).data(), tape.value(x6).data());
    }

    #[test]
    fn shuffle_g_then_c_over_g_restores_input() {
        for c in [4usize, 8, 64] {
            let mut tape = Tape::new();
            let mut r = rng::stream(c as u64, "shuffle-inv");
            let xt = random_tensor(&[2, c, 3, 2], -1.0, 1.0, &mut r);
            let x = tape.leaf(xt.clone(), false);
            let once = channel_shuffle(&mut tape, x, 4).unwrap();
            let back = channel_shuffle(&mut tape, once, c / 4).unwrap();
            assert_eq!(tape.value(back).data(), xt.data(), "C = {c}");
        }
    }

    #[test]
    fn spatial_attention_zero_params_halves_input() {
        let mut tape = Tape::new();
        let mut r = rng::stream(3, "sa-zero");
        let xt = random_tensor(&[1, 4, 3, 2], -1.0, 1.0, &mut r);
        let x = tape.leaf(xt.clone(), true);
        let p = zero_vars(&mut tape, 4);
        let out = spatial_attention(&mut tape, x, &p).unwrap();
        for (o, i) in tape.value(out).data().iter().zip(xt.data()) {
            assert!((o - 0.5 * i).abs() < 1e-6);
        }
        let x0 = tape.leaf(Tensor::zeros(&[1, 4, 3, 2]), true);
        let out0 = spatial_attention(&mut tape, x0, &p).unwrap();
        assert!(tape.value(out0).data().iter().all(|&v| v == 0.0));
    }

    // loop oracles for the composed spatial check
    fn conv_oracle(x: &[f64], k: &[f64], bias: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * h * w];
        for co in 0..c {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = bias[co];
                    for ci in 0..c {
                        for ky in 0..7isize {
                            for kx in 0..7isize {
                                let sy = y + ky - 3;
                                let sx = xx + kx - 3;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += x[(ci * h + sy as usize) * w + sx as usize]
                                        * k[((co * c + ci) * 7 + ky as usize) * 7 + kx as usize];
                                }
                            }
                        }
                    }
                    out[(co * h + y as usize) * w + xx as usize] = acc;
                }
            }
        }
        out
    }

    fn in_oracle(x: &[f64], gamma: &[f64], beta: &[f64], c: usize, plane: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * plane];
        for ci in 0..c {
            let s = &x[ci * plane..(ci + 1) * plane];
            let mean = s.iter().sum::<f64>() / plane as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
            for p in 0..plane {
                out[ci * plane + p] = gamma[ci] * (s[p] - mean) / (var + IN_EPS).sqrt() + beta[ci];
            }
        }
        out
    }

    #[test]
    fn spatial_attention_matches_composed_oracle() {
        let (c, h, w) = (4usize, 3usize, 2usize);
        let mut tape = Tape::new();
        let mut r = rng::stream(4, "sa-loop");
        let xt = random_tensor(&[1, c, h, w], -1.0, 1.0, &mut r);
        let x = tape.leaf(xt.clone(), true);
        let p = random_vars(&mut tape, c, &mut r);
        let out = spatial_attention(&mut tape, x, &p).unwrap();

        let k1 = tape.value(p.conv1_k).data().to_vec();
        let b1 = tape.value(p.conv1_b).data().to_vec();
        let k2 = tape.value(p.conv2_k).data().to_vec();
        let b2 = tape.value(p.conv2_b).data().to_vec();
        let ones = vec![1.0; c];
        let zeros = vec![0.0; c];
        let c1 = conv_oracle(xt.data(), &k1, &b1, c, h, w);
        let r1: Vec<f64> = c1.iter().map(|v| v.max(0.0)).collect();
        let n1 = in_oracle(&r1, &ones, &zeros, c, h * w);
        let f = conv_oracle(&n1, &k2, &b2, c, h, w);
        let n2 = in_oracle(&f, &ones, &zeros, c, h * w);
        for i in 0..c * h * w {
            let a = 1.0 / (1.0 + (-n2[i]).exp());
            let want = xt.data()[i] * a;
            let got = tape.value(out).data()[i];
            assert!((got - want).abs() < 1e-4, "elem {i}: {got} vs {want}");
        }
    }

    #[test]
    fn causal_gate_neutral_saturation_and_oracle() {
        let mut tape = Tape::new();
        let mut r = rng::stream(5, "gate");
        let xt = random_tensor(&[1, 4, 3, 2], -1.0, 1.0, &mut r);
        let tt = random_tensor(&[1, 1, 3, 2], -1.0, 1.0, &mut r);
        let x = tape.leaf(xt.clone(), true);
        let t = tape.leaf(tt.clone(), false);

        let a0 = tape.leaf(Tensor::scalar(0.0), true);
        let b0 = tape.leaf(Tensor::scalar(0.0), true);
        let out = causal_gate(&mut tape, x, t, a0, b0).unwrap();
        for (o, i) in tape.value(out).data().iter().zip(xt.data()) {
            assert!((o - 0.5 * i).abs() < 1e-6);
        }

        // saturation bound needs 64-bit evaluation; f32 rounding alone is ~1e-7
        crate::numerics::precision::with_precision(crate::numerics::Precision::F64, || {
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone(), true);
            let t = tape.leaf(tt.clone(), false);
            let a0 = tape.leaf(Tensor::scalar(0.0), true);
            let b20 = tape.leaf(Tensor::scalar(20.0), true);
            let sat = causal_gate(&mut tape, x, t, a0, b20).unwrap();
            for (o, i) in tape.value(sat).data().iter().zip(xt.data()) {
                assert!((o - i).abs() < 1e-8);
            }
        });

        let av = tape.leaf(Tensor::scalar(1.3), true);
        let bv = tape.leaf(Tensor::scalar(-0.4), true);
        let g = causal_gate(&mut tape, x, t, av, bv).unwrap();
        for ci in 0..4 {
            for p in 0..6 {
                let gate = 1.0 / (1.0 + (-(1.3 * tt.data()[p] - 0.4)).exp());
                let want = xt.data()[ci * 6 + p] * gate;
                let got = tape.value(g).data()[ci * 6 + p];
                assert!((got - want).abs() < 1e-5);
            }
        }

        let bad = tape.leaf(Tensor::new(vec![1, 1, 3, 2], vec![f64::NAN; 6]).unwrap(), false);
        assert!(causal_gate(&mut tape, x, bad, av, bv).is_err());
    }

    #[test]
    fn forward_neutral_params_give_eighth_of_masked_mean() {
        // C = 6 is not divisible by 4, so the shuffle stage is identity and
        // the three neutral 0.5 gains compose to 0.125.
        let (b, c, h, w) = (1usize, 6usize, 3usize, 4usize);
        let mut tape = Tape::new();
        let mut r = rng::stream(6, "fw-neutral");
        let xt = random_tensor(&[b, c, h, w], -1.0, 1.0, &mut r);
        let mut mask = vec![1.0; b * h * w];
        mask[2] = 0.0; // pad one diag slot
        for i in 2 * w..3 * w {
            mask[i] = 0.0; // med row fully masked (first visit)
        }
        // zero the padded slots as the contract requires
        let mut xd = xt.data().to_vec();
        for ci in 0..c {
            xd[(ci * h) * w + 2] = 0.0;
            for wi in 0..w {
                xd[(ci * h + 2) * w + wi] = 0.0;
            }
        }
        let xt = Tensor::new(vec![b, c, h, w], xd).unwrap();
        let x = tape.leaf(xt.clone(), true);
        let tau = tape.leaf(Tensor::zeros(&[b, 1, h, w]), false);
        let p = zero_vars(&mut tape, c);
        let input = CharmInput {
            x,
            mask: mask.clone(),
            tau_grid: tau,
        };
        let (_, pooled) = charm_forward(&mut tape, &input, &p).unwrap();

        for row in 0..2 {
            let vals = tape.value(pooled[row]).data();
            for ci in 0..c {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for wi in 0..w {
                    let m = mask[row * w + wi];
                    acc += m * xt.data()[(ci * h + row) * w + wi];
                    cnt += m;
                }
                let want = 0.125 * acc / cnt;
                assert!((vals[ci] - want).abs() < 1e-5, "row {row} ch {ci}");
            }
        }
        // fully-masked med row pools to zero
        assert!(tape.value(pooled[2]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_slots_never_contribute() {
        // same visible slots, different garbage in padded slots -> same pooled
        let (b, c, h, w) = (1usize, 8usize, 3usize, 4usize);
        let mut r = rng::stream(7, "fw-mask");
        let base = random_tensor(&[b, c, h, w], -1.0, 1.0, &mut r);
        let mut mask = vec![1.0; b * h * w];
        mask[3] = 0.0;
        mask[w + 1] = 0.0;

        let run = |pad_value: f64| {
            let mut xd = base.data().to_vec();
            for ci in 0..c {
                xd[(ci * h) * w + 3] = 0.0;
                xd[(ci * h + 1) * w + 1] = 0.0;
            }
            // padded-slot embeddings must be zero; only tau may differ there
            let mut tape = Tape::new();
            let mut pr = rng::stream(8, "fw-mask-params");
            let p = random_vars(&mut tape, c, &mut pr);
            let x = tape.leaf(Tensor::new(vec![b, c, h, w], xd).unwrap(), true);
            let mut tau_d = vec![0.1; h * w];
            tau_d[3] = pad_value;
            let tau = tape.leaf(Tensor::new(vec![b, 1, h, w], tau_d).unwrap(), false);
            let input = CharmInput {
                x,
                mask: mask.clone(),
                tau_grid: tau,
            };
            let (_, pooled) = charm_forward(&mut tape, &input, &p).unwrap();
            pooled.map(|v| tape.value(v).data().to_vec())
        };
        // zero embeddings stay zero through gate, attention, shuffle, and
        // convolution inputs, so the padded slot's tau value cannot leak
        // into any pooled output
        let a = run(0.9);
        let b_ = run(-0.9);
        for row in 0..3 {
            for ci in 0..c {
                assert!((a[row][ci] - b_[row][ci]).abs() < 1e-7, "row {row} ch {ci}");
            }
        }
    }

    #[test]
    fn slot_permutation_equivariance_without_spatial() {
        // gate + channel attention act per slot: permuting W slots permutes
        // outputs identically, so a masked mean is invariant.
        let (b, c, h, w) = (1usize, 8usize, 3usize, 4usize);
        let mut r = rng::stream(9, "fw-perm");
        let xt = random_tensor(&[b, c, h, w], -1.0, 1.0, &mut r);
        let tt = random_tensor(&[b, 1, h, w], -1.0, 1.0, &mut r);
        let perm = [2usize, 0, 3, 1];

        let run = |xt: &Tensor, tt: &Tensor| {
            let mut tape = Tape::new();
            let mut pr = rng::stream(10, "fw-perm-params");
            let p = random_vars(&mut tape, c, &mut pr);
            let x = tape.leaf(xt.clone(), false);
            let t = tape.leaf(tt.clone(), false);
            let gated = causal_gate(&mut tape, x, t, p.gate_a, p.gate_b).unwrap();
            let chan = channel_attention(&mut tape, gated, &p).unwrap();
            let mask = vec![1.0; b * h * w];
            let mut out = Vec::new();
            for row in 0..3 {
                let mut row_mask = Vec::new();
                for bi in 0..b {
                    row_mask.extend_from_slice(&mask[(bi * h + row) * w..(bi * h + row) * w + w]);
                }
                let m = tape.masked_mean_row(chan, row, &row_mask).unwrap();
                out.push(tape.value(m).data().to_vec());
            }
            out
        };

        let permute_w = |t: &Tensor, chans: usize| {
            let mut d = t.data().to_vec();
            for ci in 0..chans {
                for hi in 0..h {
                    let basei = (ci * h + hi) * w;
                    let orig: Vec<f64> = (0..w).map(|wi| t.data()[basei + wi]).collect();
                    for wi in 0..w {
                        d[basei + wi] = orig[perm[wi]];
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), d).unwrap()
        };

        let base = run(&xt, &tt);
        let shuffled = run(&permute_w(&xt, c), &permute_w(&tt, 1));
        for row in 0..3 {
            for ci in 0..c {
                assert!(
                    (base[row][ci] - shuffled[row][ci]).abs() < 1e-6,
                    "row {row} ch {ci}"
                );
            }
        }
    }

    #[test]
    fn full_forward_passes_grad_check() {
        let (b, c, h, w) = (1usize, 8usize, 3usize, 4usize);
        let cr = channel_hidden(c);
        let mut r = rng::stream(11, "fw-gc");
        let mut mask = vec![1.0; b * h * w];
        mask[1] = 0.0;
        let mut xd = random_tensor(&[b, c, h, w], -1.0, 1.0, &mut r).data().to_vec();
        for ci in 0..c {
            xd[(ci * h) * w + 1] = 0.0;
        }
        let inputs = vec![
            Tensor::new(vec![b, c, h, w], xd).unwrap(),
            random_tensor(&[b, 1, h, w], -1.0, 1.0, &mut r),
            random_tensor(&[c, cr], -0.4, 0.4, &mut r),
            random_tensor(&[cr], -0.4, 0.4, &mut r),
            random_tensor(&[cr, c], -0.4, 0.4, &mut r),
            random_tensor(&[c], -0.4, 0.4, &mut r),
            random_tensor(&[c, c, 7, 7], -0.1, 0.1, &mut r),
            random_tensor(&[c], -0.1, 0.1, &mut r),
            random_tensor(&[c], 0.8, 1.2, &mut r),
            random_tensor(&[c], -0.2, 0.2, &mut r),
            random_tensor(&[c, c, 7, 7], -0.1, 0.1, &mut r),
            random_tensor(&[c], -0.1, 0.1, &mut r),
            random_tensor(&[c], 0.8, 1.2, &mut r),
            random_tensor(&[c], -0.2, 0.2, &mut r),
            Tensor::scalar(0.6),
            Tensor::scalar(-0.3),
        ];
        let mask_c = mask.clone();
        let report = grad_check(
            move |tape, vars| {
                let p = CharmVars {
                    ca_w1: vars[2],
                    ca_b1: vars[3],
                    ca_w2: vars[4],
                    ca_b2: vars[5],
                    conv1_k: vars[6],
                    conv1_b: vars[7],
                    in1_gamma: vars[8],
                    in1_beta: vars[9],
                    conv2_k: vars[10],
                    conv2_b: vars[11],
                    in2_gamma: vars[12],
                    in2_beta: vars[13],
                    gate_a: vars[14],
                    gate_b: vars[15],
                };
                let input = CharmInput {
                    x: vars[0],
                    mask: mask_c.clone(),
                    tau_grid: vars[1],
                };
                let (_, pooled) = charm_forward(tape, &input, &p)?;
                let cat = tape.concat(&pooled, 1)?;
                Ok(tape.sum(cat))
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
