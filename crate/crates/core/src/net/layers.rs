//! Building blocks of the recurrent registration network, recorded on a
//! [`Tape`], with plain-value wrappers for standalone use.

use std::f64::consts::PI;

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::deform::LocalDeformParams;
use crate::error::{Error, Result};
use crate::geometry::{Grid2D, Image2D};

/// Floor applied to the squashed widths so the Gaussian stays finite when
/// the logistic underflows.
pub const SIGMA_FLOOR: f64 = 1e-9;

/// Convolution weights bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv(tape: &mut Tape, x: Var, c: &ConvVars) -> Var {
    tape.conv2d(x, c.weight, c.bias, c.stride, c.pad)
}

/// Gates and proposal of a convolutional GRU. `gates` maps `concat(x, h)` to
/// the reset and update pre-activations (in that channel order), `proposal`
/// maps `concat(x, r⊙h)` to the candidate state.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub gates: ConvVars,
    pub proposal: ConvVars,
}

/// Two 3×3 convolutions with an identity skip.
#[derive(Clone, Copy, Debug)]
pub struct ResidualVars {
    pub first: ConvVars,
    pub second: ConvVars,
}

#[derive(Clone, Debug)]
pub struct Gr2uVars {
    pub residual: Vec<ResidualVars>,
    pub gru: GruVars,
}

/// The two 1×1 heads of a position network.
#[derive(Clone, Copy, Debug)]
pub struct PositionVars {
    pub left: ConvVars,
    pub right: ConvVars,
}

#[derive(Clone, Copy, Debug)]
pub struct ParamNetVars {
    pub conv: ConvVars,
    pub conv2: ConvVars,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `h_t = (1 - z)⊙h + z⊙tanh(W_p * [x, r⊙h] + b_p)` with
/// `[r, z] = ψ(W_g * [x, h] + b_g)`.
pub fn conv_gru_step_on_tape(tape: &mut Tape, x: Var, h: Var, g: &GruVars) -> Var {
    let (c, _, _) = tape.value(h).chw();
    let xh = tape.concat(&[x, h]);
    let pre = conv(tape, xh, &g.gates);
    let gates = tape.sigmoid(pre);
    let r = tape.channels(gates, 0, c);
    let z = tape.channels(gates, c, c);
    let rh = tape.mul(r, h);
    let xrh = tape.concat(&[x, rh]);
    let pre = conv(tape, xrh, &g.proposal);
    let proposal = tape.tanh(pre);
    // h + z⊙(h̃ - h) rounds differently from the blend; keep the blend so the
    // z=0 and z=1 cases are exact
    let one_minus_z = {
        let neg = tape.scale(z, -1.0);
        tape.offset(neg, 1.0)
    };
    let keep = tape.mul(one_minus_z, h);
    let take = tape.mul(z, proposal);
    tape.add(keep, take)
}

pub fn residual_block_on_tape(tape: &mut Tape, x: Var, r: &ResidualVars) -> Var {
    let a = conv(tape, x, &r.first);
    let a = tape.tanh(a);
    let b = conv(tape, a, &r.second);
    let s = tape.add(x, b);
    tape.tanh(s)
}

/// Returns `(output, new_state)`: output is `tanh(res + h_t)` where `res` is
/// the residual stack applied to `x` and `h_t` the C-GRU state.
pub fn gr2u_block_on_tape(tape: &mut Tape, x: Var, h: Var, g: &Gr2uVars) -> (Var, Var) {
    let mut res = x;
    for block in &g.residual {
        res = residual_block_on_tape(tape, res, block);
    }
    let state = conv_gru_step_on_tape(tape, res, h, &g.gru);
    let sum = tape.add(res, state);
    (tape.tanh(sum), state)
}

/// Expected coordinate under a `[1,h,w]` distribution; `coords` is the
/// level's `[2,h,w]` coordinate tensor as constants.
pub fn soft_position_on_tape(tape: &mut Tape, p: Var, coords_x: Var, coords_y: Var) -> (Var, Var) {
    let px = tape.mul(p, coords_x);
    let py = tape.mul(p, coords_y);
    (tape.sum(px), tape.sum(py))
}

pub fn position_certainty_on_tape(tape: &mut Tape, left: Var, right: Var) -> Var {
    let d = tape.sub(left, right);
    let a = tape.abs(d);
    let l1 = tape.sum(a);
    let neg = tape.scale(l1, -1.0);
    tape.offset(neg, 2.0)
}

/// Soft position and certainty `(x, y, w)` of one encoder level.
pub fn position_network_on_tape(
    tape: &mut Tape,
    features: Var,
    p: &PositionVars,
    coords_x: Var,
    coords_y: Var,
) -> (Var, Var, Var) {
    let l = conv(tape, features, &p.left);
    let left = tape.spatial_softmax(l);
    let r = conv(tape, features, &p.right);
    let right = tape.spatial_softmax(r);
    let (x, y) = soft_position_on_tape(tape, left, coords_x, coords_y);
    let w = position_certainty_on_tape(tape, left, right);
    (x, y, w)
}

/// Certainty-weighted mean of the level positions; plain mean when every
/// weight is zero.
pub fn fuse_positions_on_tape(tape: &mut Tape, triples: &[(Var, Var, Var)]) -> (Var, Var) {
    let total_w: f64 = triples.iter().map(|t| tape.value(t.2).item()).sum();
    if total_w == 0.0 {
        let k = 1.0 / triples.len() as f64;
        let mut sx = triples[0].0;
        let mut sy = triples[0].1;
        for t in &triples[1..] {
            sx = tape.add(sx, t.0);
            sy = tape.add(sy, t.1);
        }
        return (tape.scale(sx, k), tape.scale(sy, k));
    }
    let mut nx = tape.mul(triples[0].0, triples[0].2);
    let mut ny = tape.mul(triples[0].1, triples[0].2);
    let mut den = triples[0].2;
    for t in &triples[1..] {
        let ax = tape.mul(t.0, t.2);
        let ay = tape.mul(t.1, t.2);
        nx = tape.add(nx, ax);
        ny = tape.add(ny, ay);
        den = tape.add(den, t.2);
    }
    (tape.div(nx, den), tape.div(ny, den))
}

/// Raw head `(c1..c5)` from the final feature map.
pub fn parameter_network_on_tape(tape: &mut Tape, features: Var, p: &ParamNetVars) -> Var {
    let c = conv(tape, features, &p.conv);
    let (channels, _, _) = tape.value(c).chw();
    let half = channels / 2;
    let a = tape.channels(c, 0, half);
    let a = tape.tanh(a);
    let a = conv(tape, a, &p.conv2);
    let a = tape.tanh(a);
    let b = tape.channels(c, half, channels - half);
    let b = tape.spatial_softmax(b);
    let ab = tape.mul(a, b);
    let pooled = tape.spatial_sum(ab);
    let hidden = tape.matvec(p.fc1_w, pooled);
    let hidden = tape.add(hidden, p.fc1_b);
    let hidden = tape.tanh(hidden);
    let out = tape.matvec(p.fc2_w, hidden);
    tape.add(out, p.fc2_b)
}

/// Packs `[x, y, σx, σy, α, vx, vy]` from the raw head and fused position.
pub fn squash_params_on_tape(tape: &mut Tape, raw: Var, x: Var, y: Var, sigma_max: f64) -> Var {
    let c: Vec<Var> = (0..5).map(|i| tape.index(raw, i)).collect();
    let sx = tape.sigmoid(c[0]);
    let sx = tape.scale(sx, sigma_max);
    let sx = tape.clamp_min(sx, SIGMA_FLOOR);
    let sy = tape.sigmoid(c[1]);
    let sy = tape.scale(sy, sigma_max);
    let sy = tape.clamp_min(sy, SIGMA_FLOOR);
    let vx = tape.tanh(c[2]);
    let vy = tape.tanh(c[3]);
    let alpha = tape.sigmoid(c[4]);
    let alpha = tape.scale(alpha, PI);
    tape.stack(&[x, y, sx, sy, alpha, vx, vy])
}

/// Network input `[coord_x, coord_y, F, M∘f]` as a `[4,H,W]` tensor.
pub fn assemble_input(fixed: &Image2D, moving_warped: &Image2D, grid: &Grid2D) -> Result<Tensor> {
    if !fixed.grid().same_shape(grid) || !moving_warped.grid().same_shape(grid) {
        return Err(Error::Shape(format!(
            "network input expects {}x{} images",
            grid.height(),
            grid.width()
        )));
    }
    let mut data = grid.coordinate_tensor().into_data();
    data.extend_from_slice(fixed.to_tensor().data());
    data.extend_from_slice(moving_warped.to_tensor().data());
    Ok(Tensor::new(&[4, grid.height(), grid.width()], data))
}

/// Weights of a standalone C-GRU; see [`conv_gru_step_on_tape`] for layout.
#[derive(Clone, Debug)]
pub struct GruWeights {
    pub gates_weight: Tensor,
    pub gates_bias: Tensor,
    pub proposal_weight: Tensor,
    pub proposal_bias: Tensor,
}

impl GruWeights {
    /// All-zero weights for `channels` state channels and a 3×3 kernel.
    pub fn zeros(channels: usize) -> Self {
        Self {
            gates_weight: Tensor::zeros(&[2 * channels, 2 * channels, 3, 3]),
            gates_bias: Tensor::zeros(&[2 * channels]),
            proposal_weight: Tensor::zeros(&[channels, 2 * channels, 3, 3]),
            proposal_bias: Tensor::zeros(&[channels]),
        }
    }

    fn bind(&self, tape: &mut Tape) -> GruVars {
        let conv = |tape: &mut Tape, w: &Tensor, b: &Tensor| ConvVars {
            weight: tape.constant(w.clone()),
            bias: tape.constant(b.clone()),
            stride: 1,
            pad: 1,
        };
        GruVars {
            gates: conv(tape, &self.gates_weight, &self.gates_bias),
            proposal: conv(tape, &self.proposal_weight, &self.proposal_bias),
        }
    }

    fn check(&self, x: &Tensor, h: &Tensor) -> Result<()> {
        check_same_shape(x, h, "C-GRU input and state")?;
        let c = h.shape()[0];
        let expect = [
            (&self.gates_weight, vec![2 * c, 2 * c, 3, 3]),
            (&self.gates_bias, vec![2 * c]),
            (&self.proposal_weight, vec![c, 2 * c, 3, 3]),
            (&self.proposal_bias, vec![c]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "C-GRU weight {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One C-GRU update on `[C,H,W]` maps.
pub fn conv_gru_step(x: &Tensor, h_prev: &Tensor, weights: &GruWeights) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(Error::Shape("C-GRU expects [C,H,W] maps".into()));
    }
    weights.check(x, h_prev)?;
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let hv = tape.constant(h_prev.clone());
    let out = conv_gru_step_on_tape(&mut tape, xv, hv, &vars);
    Ok(tape.value(out).clone())
}

/// Weights of a standalone GR2U block.
#[derive(Clone, Debug)]
pub struct Gr2uWeights {
    /// `(w1, b1, w2, b2)` per residual block.
    pub residual: Vec<(Tensor, Tensor, Tensor, Tensor)>,
    pub gru: GruWeights,
}

impl Gr2uWeights {
    pub fn zeros(channels: usize, blocks: usize) -> Self {
        let w = || Tensor::zeros(&[channels, channels, 3, 3]);
        let b = || Tensor::zeros(&[channels]);
        Self {
            residual: (0..blocks).map(|_| (w(), b(), w(), b())).collect(),
            gru: GruWeights::zeros(channels),
        }
    }
}

/// GR2U forward; returns `(output, new_state)`.
pub fn gr2u_block(x: &Tensor, h_prev: &Tensor, weights: &Gr2uWeights) -> Result<(Tensor, Tensor)> {
    if x.shape().len() != 3 {
        return Err(Error::Shape("GR2U expects [C,H,W] maps".into()));
    }
    weights.gru.check(x, h_prev)?;
    let c = x.shape()[0];
    let mut tape = Tape::new();
    let mut residual = Vec::new();
    for (w1, b1, w2, b2) in &weights.residual {
        for w in [w1, w2] {
            if w.shape() != [c, c, 3, 3] {
                return Err(Error::Shape(format!("residual weight {:?}", w.shape())));
            }
        }
        let mut bind = |w: &Tensor, b: &Tensor| ConvVars {
            weight: tape.constant(w.clone()),
            bias: tape.constant(b.clone()),
            stride: 1,
            pad: 1,
        };
        let first = bind(w1, b1);
        let second = bind(w2, b2);
        residual.push(ResidualVars { first, second });
    }
    let gru = weights.gru.bind(&mut tape);
    let vars = Gr2uVars { residual, gru };
    let xv = tape.constant(x.clone());
    let hv = tape.constant(h_prev.clone());
    let (out, state) = gr2u_block_on_tape(&mut tape, xv, hv, &vars);
    Ok((tape.value(out).clone(), tape.value(state).clone()))
}

/// Expected `(x, y)` under a probability map laid out on `grid`.
pub fn soft_position(p: &Tensor, grid: &Grid2D) -> Result<(f64, f64)> {
    if p.len() != grid.len() {
        return Err(Error::Shape(format!(
            "probability map has {} entries, grid {}",
            p.len(),
            grid.len()
        )));
    }
    let xs = grid.coords_x().iter();
    let ys = grid.coords_y().iter();
    let mut acc = (0.0, 0.0);
    for ((&pi, &x), &y) in p.data().iter().zip(xs).zip(ys) {
        acc.0 += pi * x;
        acc.1 += pi * y;
    }
    Ok(acc)
}

/// `2 - Σ|p_l - p_r|`.
pub fn position_certainty(left: &Tensor, right: &Tensor) -> Result<f64> {
    check_same_shape(left, right, "position certainty")?;
    let l1: f64 = left
        .data()
        .iter()
        .zip(right.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(2.0 - l1)
}

pub fn fuse_positions(triples: &[(f64, f64, f64)]) -> (f64, f64) {
    let total: f64 = triples.iter().map(|t| t.2).sum();
    if total == 0.0 {
        let k = 1.0 / triples.len() as f64;
        let sx: f64 = triples.iter().map(|t| t.0).sum();
        let sy: f64 = triples.iter().map(|t| t.1).sum();
        return (sx * k, sy * k);
    }
    let nx: f64 = triples.iter().map(|t| t.0 * t.2).sum();
    let ny: f64 = triples.iter().map(|t| t.1 * t.2).sum();
    (nx / total, ny / total)
}

pub fn squash_params(raw: [f64; 5], position: (f64, f64), sigma_max: f64) -> LocalDeformParams {
    LocalDeformParams {
        center: position,
        sigma_x: (sigmoid(raw[0]) * sigma_max).max(SIGMA_FLOOR),
        sigma_y: (sigmoid(raw[1]) * sigma_max).max(SIGMA_FLOOR),
        alpha: sigmoid(raw[4]) * PI,
        weight: (raw[2].tanh(), raw[3].tanh()),
    }
}
