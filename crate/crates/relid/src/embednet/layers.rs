//! Layer builders over the graph: dense, LSTM, GRU, bidirectional
//! wrappers, TDNN context layers, statistics pooling, and attention
//! pooling.
//!
//! Each layer family has an `*_init` that inserts named tensors into a
//! ParamSet and a forward that wires graph nodes against a Binding. The
//! initialization convention is uniform(-1/sqrt(fanin), +1/sqrt(fanin)),
//! except where a zero start is wanted (output layers, so untrained
//! models score exactly uniform).

use ndarray::Array2;
use rand::Rng;

use crate::embednet::graph::{Graph, NodeId};
use crate::embednet::params::{Binding, ParamSet};
use crate::error::{Error, Result};

/// Variance floor inside statistics pooling; keeps the std branch
/// differentiable on (numerically) constant inputs.
pub const STATS_VAR_FLOOR: f64 = 1e-10;

fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, fanin: usize) -> Array2<f64> {
    let a = 1.0 / (fanin.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

/// Inserts `{name}.w` (in x out) and `{name}.b` (1 x out).
pub fn dense_init<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<()> {
    ps.insert(&format!("{name}.w"), uniform_init(rng, in_dim, out_dim, in_dim))?;
    ps.insert(&format!("{name}.b"), Array2::zeros((1, out_dim)))
}

/// Zero-started dense layer: with this as the output layer, an untrained
/// model emits uniform posteriors and cross entropy of exactly ln L.
pub fn dense_init_zero(
    ps: &mut ParamSet,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<()> {
    ps.insert(&format!("{name}.w"), Array2::zeros((in_dim, out_dim)))?;
    ps.insert(&format!("{name}.b"), Array2::zeros((1, out_dim)))
}

/// x (B x in) -> x W + b (B x out); no activation.
pub fn affine(g: &mut Graph, bd: &Binding, name: &str, x: NodeId) -> Result<NodeId> {
    let w = bd.id(&format!("{name}.w"))?;
    let b = bd.id(&format!("{name}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Inserts LSTM parameters: `{name}.wx` (in x 4H), `{name}.wh` (H x 4H),
/// `{name}.b` (1 x 4H), gate blocks ordered input, forget, candidate,
/// output. The forget block of the bias starts at +1.
pub fn lstm_init<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    in_dim: usize,
    hidden: usize,
) -> Result<()> {
    ps.insert(&format!("{name}.wx"), uniform_init(rng, in_dim, 4 * hidden, in_dim))?;
    ps.insert(&format!("{name}.wh"), uniform_init(rng, hidden, 4 * hidden, hidden))?;
    let mut b = Array2::zeros((1, 4 * hidden));
    for j in hidden..2 * hidden {
        b[[0, j]] = 1.0;
    }
    ps.insert(&format!("{name}.b"), b)
}

fn lstm_hidden(g: &Graph, bd: &Binding, name: &str) -> Result<usize> {
    Ok(g.value(bd.id(&format!("{name}.wh"))?).nrows())
}

/// One LSTM step: (x_t 1 x in, h 1 x H, c 1 x H) -> (h', c').
pub fn lstm_step(
    g: &mut Graph,
    bd: &Binding,
    name: &str,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let hdim = lstm_hidden(g, bd, name)?;
    let wx = bd.id(&format!("{name}.wx"))?;
    let wh = bd.id(&format!("{name}.wh"))?;
    let b = bd.id(&format!("{name}.b"))?;
    let zx = g.matmul(x, wx)?;
    let zh = g.matmul(h, wh)?;
    let zsum = g.add(zx, zh)?;
    let z = g.add_row(zsum, b)?;
    let gi = {
        let s = g.slice_cols(z, 0, hdim)?;
        g.sigmoid(s)?
    };
    let gf = {
        let s = g.slice_cols(z, hdim, hdim)?;
        g.sigmoid(s)?
    };
    let gc = {
        let s = g.slice_cols(z, 2 * hdim, hdim)?;
        g.tanh(s)?
    };
    let go = {
        let s = g.slice_cols(z, 3 * hdim, hdim)?;
        g.sigmoid(s)?
    };
    let fc = g.mul(gf, c)?;
    let ic = g.mul(gi, gc)?;
    let c_new = g.add(fc, ic)?;
    let tc = g.tanh(c_new)?;
    let h_new = g.mul(go, tc)?;
    Ok((h_new, c_new))
}

/// Inserts GRU parameters: `{name}.wx` (in x 3H), `{name}.wh` (H x 3H),
/// `{name}.b` (1 x 3H), gate blocks ordered reset, update, candidate.
pub fn gru_init<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    in_dim: usize,
    hidden: usize,
) -> Result<()> {
    ps.insert(&format!("{name}.wx"), uniform_init(rng, in_dim, 3 * hidden, in_dim))?;
    ps.insert(&format!("{name}.wh"), uniform_init(rng, hidden, 3 * hidden, hidden))?;
    ps.insert(&format!("{name}.b"), Array2::zeros((1, 3 * hidden)))
}

fn gru_hidden(g: &Graph, bd: &Binding, name: &str) -> Result<usize> {
    Ok(g.value(bd.id(&format!("{name}.wh"))?).nrows())
}

/// One GRU step with update-gate carry: h' = z c h + (1-z) c n, so a
/// saturated update gate freezes the state.
pub fn gru_step(
    g: &mut Graph,
    bd: &Binding,
    name: &str,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let hdim = gru_hidden(g, bd, name)?;
    let wx = bd.id(&format!("{name}.wx"))?;
    let wh = bd.id(&format!("{name}.wh"))?;
    let b = bd.id(&format!("{name}.b"))?;
    let zx0 = g.matmul(x, wx)?;
    let zx = g.add_row(zx0, b)?;
    let zh = g.matmul(h, wh)?;
    let gate = |g: &mut Graph, zx: NodeId, zh: NodeId, block: usize| -> Result<NodeId> {
        let a = g.slice_cols(zx, block * hdim, hdim)?;
        let b = g.slice_cols(zh, block * hdim, hdim)?;
        let s = g.add(a, b)?;
        g.sigmoid(s)
    };
    let r = gate(g, zx, zh, 0)?;
    let z = gate(g, zx, zh, 1)?;
    let n = {
        let a = g.slice_cols(zx, 2 * hdim, hdim)?;
        let hb = g.slice_cols(zh, 2 * hdim, hdim)?;
        let rh = g.mul(r, hb)?;
        let s = g.add(a, rh)?;
        g.tanh(s)?
    };
    // h' = n + z * (h - n).
    let neg_n = g.scale(n, -1.0)?;
    let h_minus_n = g.add(h, neg_n)?;
    let carried = g.mul(z, h_minus_n)?;
    g.add(n, carried)
}

/// Which way a recurrence consumes its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Runs an LSTM over the rows of `x` (T x in), returning one 1 x H state
/// per time step, always in time order. A Backward pass consumes the
/// sequence reversed, so its slot t holds the state after reading
/// x_{T-1} down to x_t.
pub fn lstm_forward_seq(
    g: &mut Graph,
    bd: &Binding,
    name: &str,
    x: NodeId,
    dir: Direction,
) -> Result<Vec<NodeId>> {
    let t_len = g.value(x).nrows();
    if t_len == 0 {
        return Err(Error::shape("lstm_forward_seq", "empty sequence"));
    }
    let hdim = lstm_hidden(g, bd, name)?;
    let mut h = g.zeros(1, hdim)?;
    let mut c = g.zeros(1, hdim)?;
    let mut out = vec![0usize; t_len];
    let order: Vec<usize> = match dir {
        Direction::Forward => (0..t_len).collect(),
        Direction::Backward => (0..t_len).rev().collect(),
    };
    for t in order {
        let xt = g.slice_rows(x, t, 1)?;
        let (h2, c2) = lstm_step(g, bd, name, xt, h, c)?;
        h = h2;
        c = c2;
        out[t] = h;
    }
    Ok(out)
}

/// GRU analogue of [`lstm_forward_seq`].
pub fn gru_forward_seq(
    g: &mut Graph,
    bd: &Binding,
    name: &str,
    x: NodeId,
    dir: Direction,
) -> Result<Vec<NodeId>> {
    let t_len = g.value(x).nrows();
    if t_len == 0 {
        return Err(Error::shape("gru_forward_seq", "empty sequence"));
    }
    let hdim = gru_hidden(g, bd, name)?;
    let mut h = g.zeros(1, hdim)?;
    let mut out = vec![0usize; t_len];
    let order: Vec<usize> = match dir {
        Direction::Forward => (0..t_len).collect(),
        Direction::Backward => (0..t_len).rev().collect(),
    };
    for t in order {
        let xt = g.slice_rows(x, t, 1)?;
        h = gru_step(g, bd, name, xt, h)?;
        out[t] = h;
    }
    Ok(out)
}

fn zip_directions(
    g: &mut Graph,
    fwd: Vec<NodeId>,
    bwd: Vec<NodeId>,
) -> Result<NodeId> {
    let rows: Vec<NodeId> = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| g.concat_cols(&[f, b]))
        .collect::<Result<_>>()?;
    g.concat_rows(&rows)
}

/// Bidirectional LSTM: output row t is [forward state ; backward state],
/// a T x 2H matrix.
pub fn bilstm_forward(
    g: &mut Graph,
    bd: &Binding,
    name_fwd: &str,
    name_bwd: &str,
    x: NodeId,
) -> Result<NodeId> {
    let fwd = lstm_forward_seq(g, bd, name_fwd, x, Direction::Forward)?;
    let bwd = lstm_forward_seq(g, bd, name_bwd, x, Direction::Backward)?;
    zip_directions(g, fwd, bwd)
}

/// Bidirectional GRU, same output layout as [`bilstm_forward`].
pub fn bigru_forward(
    g: &mut Graph,
    bd: &Binding,
    name_fwd: &str,
    name_bwd: &str,
    x: NodeId,
) -> Result<NodeId> {
    let fwd = gru_forward_seq(g, bd, name_fwd, x, Direction::Forward)?;
    let bwd = gru_forward_seq(g, bd, name_bwd, x, Direction::Backward)?;
    zip_directions(g, fwd, bwd)
}

/// Inserts TDNN layer parameters for `offsets.len()` context blocks:
/// `{name}.w` ((in * blocks) x out) and `{name}.b`.
pub fn tdnn_init<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    offsets: &[i64],
) -> Result<()> {
    let fanin = in_dim * offsets.len();
    ps.insert(&format!("{name}.w"), uniform_init(rng, fanin, out_dim, fanin))?;
    ps.insert(&format!("{name}.b"), Array2::zeros((1, out_dim)))
}

/// Context gather, affine, ReLU. Output has T - span + 1 rows.
pub fn tdnn_forward(
    g: &mut Graph,
    bd: &Binding,
    name: &str,
    x: NodeId,
    offsets: &[i64],
) -> Result<NodeId> {
    let gathered = g.context_gather(x, offsets)?;
    let a = affine(g, bd, name, gathered)?;
    g.relu(a)
}

/// Statistics pooling: per-dimension mean and standard deviation of the
/// rows, concatenated to a 1 x 2D vector. The variance is floored at
/// STATS_VAR_FLOOR before the square root.
pub fn stats_pool(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let mean = g.mean_rows(x)?;
    let sq = g.mul(x, x)?;
    let mean_sq = g.mean_rows(sq)?;
    let mm = g.mul(mean, mean)?;
    let neg_mm = g.scale(mm, -1.0)?;
    let var = g.add(mean_sq, neg_mm)?;
    let std = g.sqrt_floored(var, STATS_VAR_FLOOR)?;
    g.concat_cols(&[mean, std])
}

/// Inserts attention parameters: `{name}.w` (K x A), `{name}.b` (1 x A),
/// `{name}.u` (A x 1).
pub fn attention_init<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    in_dim: usize,
    attn_dim: usize,
) -> Result<()> {
    ps.insert(&format!("{name}.w"), uniform_init(rng, in_dim, attn_dim, in_dim))?;
    ps.insert(&format!("{name}.b"), Array2::zeros((1, attn_dim)))?;
    ps.insert(&format!("{name}.u"), uniform_init(rng, attn_dim, 1, attn_dim))
}

/// Attention pooling over the rows of `h` (T x K): scores each row with
/// a one-layer tanh scorer, softmax-normalizes over time, and returns
/// the weighted sum (1 x K) together with the weights (1 x T).
pub fn attention_forward(
    g: &mut Graph,
    bd: &Binding,
    name: &str,
    h: NodeId,
) -> Result<(NodeId, NodeId)> {
    if g.value(h).nrows() == 0 {
        return Err(Error::shape("attention_forward", "empty sequence"));
    }
    let w = bd.id(&format!("{name}.w"))?;
    let b = bd.id(&format!("{name}.b"))?;
    let u = bd.id(&format!("{name}.u"))?;
    let hw = g.matmul(h, w)?;
    let pre = g.add_row(hw, b)?;
    let scores = g.tanh(pre)?;
    let logits = g.matmul(scores, u)?; // T x 1
    let logits_row = g.transpose(logits)?; // 1 x T
    let weights = g.softmax_rows(logits_row)?;
    let pooled = g.matmul(weights, h)?; // 1 x K
    Ok((pooled, weights))
}
