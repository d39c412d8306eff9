//! Shifted-window multi-head attention and the Swin transformer layer.
//!
//! Feature maps inside this module are channels-last, `[b, h, w, c]`.
//! Window, shift, pad and crop are all expressed as index gathers so they
//! differentiate for free and roundtrip bit-exactly.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Additive logit penalty for token pairs that were not adjacent before the shift.
pub const MASK_VALUE: f64 = -100.0;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(window: usize, shift: usize) -> Result<Self> {
        if window == 0 || shift >= window {
            return Err(Error::Invalid(format!("window spec needs 0 <= shift < window, got window {window} shift {shift}")));
        }
        Ok(WindowSpec { window, shift })
    }

    pub fn unshifted(window: usize) -> Result<Self> {
        Self::new(window, 0)
    }

    /// Shift used by every second layer of a stack.
    pub fn shifted(window: usize) -> Result<Self> {
        Self::new(window, window / 2)
    }

    /// Spec of layer `i` in a stack that alternates plain and shifted windows.
    pub fn alternating(window: usize, i: usize) -> Result<Self> {
        if i % 2 == 0 {
            Self::unshifted(window)
        } else {
            Self::shifted(window)
        }
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Draws from N(0, std²) truncated to ±2 std.
pub(crate) fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::lit(v);
        }
    })
}

/// Affine map over the last dimension, `x · w + b` with `w: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub w: P,
    pub b: P,
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<Linear<Q>> {
        Ok(Linear {
            w: f(&join(prefix, "w"), &self.w)?,
            b: f(&join(prefix, "b"), &self.b)?,
        })
    }
}

impl<T: Scalar> Linear<Tensor<T>> {
    pub fn init(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: trunc_normal(&[inp, out], 0.02, rng),
            b: Tensor::zeros([out]),
        }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            w: Tensor::zeros([inp, out]),
            b: Tensor::zeros([out]),
        }
    }
}

impl Linear<Var> {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add(y, self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<P> {
    pub gamma: P,
    pub beta: P,
}

impl<P> LayerNorm<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<LayerNorm<Q>> {
        Ok(LayerNorm {
            gamma: f(&join(prefix, "gamma"), &self.gamma)?,
            beta: f(&join(prefix, "beta"), &self.beta)?,
        })
    }
}

impl<T: Scalar> LayerNorm<Tensor<T>> {
    pub fn init(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full([dim], T::one()),
            beta: Tensor::zeros([dim]),
        }
    }
}

impl LayerNorm<Var> {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta, T::lit(LN_EPS))
    }
}

/// Query, key/value and output projections plus the relative position bias
/// table `[(2w-1)², heads]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    pub q: Linear<P>,
    pub kv: Linear<P>,
    pub proj: Linear<P>,
    pub rel_bias: P,
    pub heads: usize,
}

impl<P> AttentionParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<AttentionParams<Q>> {
        Ok(AttentionParams {
            q: self.q.map(&join(prefix, "q"), f)?,
            kv: self.kv.map(&join(prefix, "kv"), f)?,
            proj: self.proj.map(&join(prefix, "proj"), f)?,
            rel_bias: f(&join(prefix, "rel_bias"), &self.rel_bias)?,
            heads: self.heads,
        })
    }
}

impl<T: Scalar> AttentionParams<Tensor<T>> {
    pub fn init(embed: usize, heads: usize, window: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || embed % heads != 0 {
            return Err(Error::Invalid(format!("embed {embed} not divisible by heads {heads}")));
        }
        let side = 2 * window - 1;
        Ok(AttentionParams {
            q: Linear::init(embed, embed, rng),
            kv: Linear::init(embed, 2 * embed, rng),
            proj: Linear::init(embed, embed, rng),
            rel_bias: trunc_normal(&[side * side, heads], 0.02, rng),
            heads,
        })
    }
}

/// One transformer layer: attention and MLP, each pre-normed with a residual.
#[derive(Clone, Debug, PartialEq)]
pub struct StlParams<P> {
    pub norm1: LayerNorm<P>,
    pub attn: AttentionParams<P>,
    pub norm2: LayerNorm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

impl<P> StlParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<StlParams<Q>> {
        Ok(StlParams {
            norm1: self.norm1.map(&join(prefix, "norm1"), f)?,
            attn: self.attn.map(&join(prefix, "attn"), f)?,
            norm2: self.norm2.map(&join(prefix, "norm2"), f)?,
            fc1: self.fc1.map(&join(prefix, "fc1"), f)?,
            fc2: self.fc2.map(&join(prefix, "fc2"), f)?,
        })
    }
}

impl<T: Scalar> StlParams<Tensor<T>> {
    pub fn init(embed: usize, heads: usize, window: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = embed * mlp_ratio;
        Ok(StlParams {
            norm1: LayerNorm::init(embed),
            attn: AttentionParams::init(embed, heads, window, rng)?,
            norm2: LayerNorm::init(embed),
            fc1: Linear::init(embed, hidden, rng),
            fc2: Linear::init(hidden, embed, rng),
        })
    }

    /// Zeroes the two projections that feed the residual sums, making the
    /// layer an exact identity.
    pub fn zero_residual_branches(&mut self) {
        let zero = |l: &mut Linear<Tensor<T>>| {
            l.w.data_mut().fill(T::zero());
            l.b.data_mut().fill(T::zero());
        };
        zero(&mut self.attn.proj);
        zero(&mut self.fc2);
    }
}

fn dims4<T: Scalar>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [b, h, w, c] => Ok([b, h, w, c]),
        ref s => Err(Error::shape(op, s, &[0, 0, 0, 0])),
    }
}

/// Splits `[b, h, w, c]` into `[b·nWin, window², c]` row-major tiles.
pub fn window_partition<T: Scalar>(tape: &mut Tape<T>, x: Var, window: usize) -> Result<Var> {
    let [b, h, w, c] = dims4(tape, x, "window_partition")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Invalid(format!("{h}x{w} is not divisible into {window}x{window} windows")));
    }
    let (nh, nw) = (h / window, w / window);
    let mut starts = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..window {
                    let row = ((bi * h + wy * window + ty) * w + wx * window) * c;
                    starts.extend((0..window).map(|tx| row + tx * c));
                }
            }
        }
    }
    tape.gather_blocks(x, starts.into(), c, vec![b * nh * nw, window * window, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(tape: &mut Tape<T>, wins: Var, window: usize, h: usize, w: usize) -> Result<Var> {
    let shape = tape.shape(wins).to_vec();
    let ok = shape.len() == 3 && window > 0 && h % window == 0 && w % window == 0 && shape[1] == window * window;
    let per_image = if ok { (h / window) * (w / window) } else { 0 };
    if !ok || per_image == 0 || shape[0] % per_image != 0 {
        return Err(Error::shape("window_reverse", &shape, &[h, w, window]));
    }
    let (b, c, nw) = (shape[0] / per_image, shape[2], w / window);
    let mut starts = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let win = bi * per_image + (y / window) * nw + x / window;
                let tok = (y % window) * window + x % window;
                starts.push((win * window * window + tok) * c);
            }
        }
    }
    tape.gather_blocks(wins, starts.into(), c, vec![b, h, w, c])
}

/// Toroidal roll by `(-s, -s)`; a negative `s` rolls the other way.
pub fn cyclic_shift<T: Scalar>(tape: &mut Tape<T>, x: Var, s: isize) -> Result<Var> {
    roll2(tape, x, s, s)
}

fn roll2<T: Scalar>(tape: &mut Tape<T>, x: Var, sy: isize, sx: isize) -> Result<Var> {
    let [b, h, w, c] = dims4(tape, x, "cyclic_shift")?;
    if sy == 0 && sx == 0 {
        return Ok(x);
    }
    let roll = |i: usize, n: usize, s: isize| (i as isize + s).rem_euclid(n as isize) as usize;
    let mut starts = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for y in 0..h {
            let row = (bi * h + roll(y, h, sy)) * w;
            starts.extend((0..w).map(|xx| (row + roll(xx, w, sx)) * c));
        }
    }
    tape.gather_blocks(x, starts.into(), c, vec![b, h, w, c])
}

/// Additive mask `[nWin, window², window²]` for a grid rolled by `shift`:
/// zero where both tokens came from the same unwrapped region, `-100` otherwise.
/// An axis spanning a single window is never rolled, so it contributes no
/// regions.
pub fn shift_attention_mask<T: Scalar>(h: usize, w: usize, window: usize, shift: usize) -> Result<Tensor<T>> {
    if shift == 0 || shift >= window || h % window != 0 || w % window != 0 {
        return Err(Error::Invalid(format!(
            "mask needs 0 < shift < window and {h}x{w} divisible by {window}"
        )));
    }
    let region = |i: usize, n: usize| {
        if n == window || i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw, t) = (h / window, w / window, window * window);
    let mut out = Vec::with_capacity(nh * nw * t * t);
    for wy in 0..nh {
        for wx in 0..nw {
            let labels: Vec<usize> = (0..t)
                .map(|k| {
                    let (y, x) = (wy * window + k / window, wx * window + k % window);
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            for &li in &labels {
                out.extend(labels.iter().map(|&lj| if li == lj { T::zero() } else { T::lit(MASK_VALUE) }));
            }
        }
    }
    Tensor::new([nh * nw, t, t], out)
}

/// `index[i·T + j]` is the bias-table row for query token `i`, key token `j`.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let side = 2 * window - 1;
    let mut index = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let dy = i / window + window - 1 - j / window;
            let dx = i % window + window - 1 - j % window;
            index.push(dy * side + dx);
        }
    }
    index
}

/// Softmax attention weights `[nW, heads, T, T]` and values `[nW, heads, T, d]`.
fn attention_probs<T: Scalar>(
    tape: &mut Tape<T>,
    q_src: Var,
    kv_src: Var,
    p: &AttentionParams<Var>,
    window: usize,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let shape = tape.shape(q_src).to_vec();
    if shape.len() != 3 || tape.shape(kv_src) != shape.as_slice() {
        return Err(Error::shape("window_attention", &shape, tape.shape(kv_src)));
    }
    let (nw, t, c) = (shape[0], shape[1], shape[2]);
    let heads = p.heads;
    if t != window * window || heads == 0 || c % heads != 0 || tape.shape(p.q.w) != [c, c] {
        return Err(Error::shape("window_attention", &shape, tape.shape(p.q.w)));
    }
    let d = c / heads;

    let q = p.q.forward(tape, q_src)?;
    let q = tape.scale(q, T::lit((d as f64).powf(-0.5)));
    let q = tape.reshape(q, [nw, t, heads, d])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;

    let kv = p.kv.forward(tape, kv_src)?;
    let kv = tape.reshape(kv, [nw, t, 2, heads, d])?;
    // k comes out pre-transposed as [nW, heads, d, T]
    let k = tape.narrow(kv, 2, 0, 1)?;
    let k = tape.reshape(k, [nw, t, heads, d])?;
    let k = tape.permute(k, &[0, 2, 3, 1])?;
    let v = tape.narrow(kv, 2, 1, 1)?;
    let v = tape.reshape(v, [nw, t, heads, d])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;

    let mut logits = tape.matmul(q, k)?;

    let rel = relative_position_index(window);
    let mut bias_index = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        bias_index.extend(rel.iter().map(|&r| r * heads + h));
    }
    let bias = tape.gather(p.rel_bias, bias_index.into(), vec![heads, t, t])?;
    logits = tape.add(logits, bias)?;

    if let Some(mask) = mask {
        let ms = tape.shape(mask).to_vec();
        if ms.len() != 3 || ms[1] != t || ms[2] != t || ms[0] == 0 || nw % ms[0] != 0 {
            return Err(Error::shape("window_attention mask", &ms, &[nw, t, t]));
        }
        let per_image = ms[0];
        let m = tape.reshape(mask, [per_image, 1, t, t])?;
        let l = tape.reshape(logits, [nw / per_image, per_image, heads, t, t])?;
        let l = tape.add(l, m)?;
        logits = tape.reshape(l, [nw, heads, t, t])?;
    }
    let probs = tape.softmax(logits, 3)?;
    Ok((probs, v))
}

/// Multi-head attention within windows: queries from `q_src`, keys and
/// values from `kv_src`, both `[nW, window², embed]`. `mask`, if given, is
/// `[nWin per image, T, T]` and is added to the logits of every head.
pub fn window_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q_src: Var,
    kv_src: Var,
    p: &AttentionParams<Var>,
    window: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let (probs, v) = attention_probs(tape, q_src, kv_src, p, window, mask)?;
    let shape = tape.shape(q_src).to_vec();
    let out = tape.matmul(probs, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, shape)?;
    p.proj.forward(tape, out)
}

/// Full (shifted) window attention on `[b, h, w, c]` maps whose sides are
/// multiples of the window.
pub fn shifted_window_attention<T: Scalar>(
    tape: &mut Tape<T>,
    xq: Var,
    xkv: Var,
    p: &AttentionParams<Var>,
    spec: WindowSpec,
) -> Result<Var> {
    let [b, h, w, c] = dims4(tape, xq, "shifted_window_attention")?;
    let axis_shift = |n: usize| if n == spec.window { 0 } else { spec.shift as isize };
    let (sy, sx) = (axis_shift(h), axis_shift(w));
    let (sq, skv) = if xq == xkv {
        let sq = roll2(tape, xq, sy, sx)?;
        (sq, sq)
    } else {
        (roll2(tape, xq, sy, sx)?, roll2(tape, xkv, sy, sx)?)
    };
    let wq = window_partition(tape, sq, spec.window)?;
    let wkv = if skv == sq { wq } else { window_partition(tape, skv, spec.window)? };
    let mask = if sy != 0 || sx != 0 {
        Some(tape.constant(shift_attention_mask(h, w, spec.window, spec.shift)?))
    } else {
        None
    };
    let out = window_attention(tape, wq, wkv, p, spec.window, mask)?;
    let out = window_reverse(tape, out, spec.window, h, w)?;
    debug_assert_eq!(tape.shape(out), [b, h, w, c]);
    roll2(tape, out, -sy, -sx)
}

/// Transformer layer on `[b, h, w, c]`; sides must be window multiples.
pub fn stl_block<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &StlParams<Var>, spec: WindowSpec) -> Result<Var> {
    cross_stl_block(tape, x, x, p, spec)
}

/// As [`stl_block`] with keys and values taken from `x_kv`. Both streams go
/// through the same first norm; the residual is on the query stream.
pub fn cross_stl_block<T: Scalar>(
    tape: &mut Tape<T>,
    x_q: Var,
    x_kv: Var,
    p: &StlParams<Var>,
    spec: WindowSpec,
) -> Result<Var> {
    if tape.shape(x_q) != tape.shape(x_kv) {
        return Err(Error::shape("cross_stl_block", tape.shape(x_q), tape.shape(x_kv)));
    }
    dims4(tape, x_q, "stl_block")?;
    tape.scope(|tape| {
        let nq = p.norm1.forward(tape, x_q)?;
        let nkv = if x_kv == x_q { nq } else { p.norm1.forward(tape, x_kv)? };
        let a = shifted_window_attention(tape, nq, nkv, &p.attn, spec)?;
        let x1 = tape.add(x_q, a)?;
        let n2 = p.norm2.forward(tape, x1)?;
        let hdn = p.fc1.forward(tape, n2)?;
        let hdn = tape.gelu(hdn);
        let m = p.fc2.forward(tape, hdn)?;
        tape.add(x1, m)
    })
}

/// Reflection index into `0..n` for any `i`, bouncing off both ends without
/// repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads bottom and right of `[b, h, w, c]` by reflection up to the next
/// multiple of `window`.
pub fn reflect_pad<T: Scalar>(tape: &mut Tape<T>, x: Var, window: usize) -> Result<Var> {
    let [b, h, w, c] = dims4(tape, x, "reflect_pad")?;
    if window == 0 {
        return Err(Error::Invalid("window must be positive".into()));
    }
    let (ph, pw) = (h.div_ceil(window) * window, w.div_ceil(window) * window);
    if (ph, pw) == (h, w) {
        return Ok(x);
    }
    let mut starts = Vec::with_capacity(b * ph * pw);
    for bi in 0..b {
        for y in 0..ph {
            let row = (bi * h + reflect(y, h)) * w;
            starts.extend((0..pw).map(|xx| (row + reflect(xx, w)) * c));
        }
    }
    tape.gather_blocks(x, starts.into(), c, vec![b, ph, pw, c])
}

/// Keeps the top-left `h × w` region of `[b, H, W, c]`.
pub fn crop_to<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let [b, ph, pw, c] = dims4(tape, x, "crop")?;
    if h > ph || w > pw || h == 0 || w == 0 {
        return Err(Error::shape("crop", &[b, ph, pw, c], &[b, h, w, c]));
    }
    if (h, w) == (ph, pw) {
        return Ok(x);
    }
    let starts: Rc<[usize]> = (0..b).flat_map(|bi| (0..h).map(move |y| (bi * ph + y) * pw * c)).collect();
    tape.gather_blocks(x, starts, w * c, vec![b, h, w, c])
}
