//! The two-branch fusion network.
//!
//! Stage layout, image domain `[b, c, h, w]` throughout except inside the
//! transformer groups:
//!
//! ```text
//! ir_lr ──bicubic──┬─ conv ─ N groups ─┐
//!                  │                   ├─ L ACF blocks ─ concat ─ conv ─ P groups ─ conv·gelu·conv·gelu·conv ─┐
//! rgb ─────────────┼─ conv ─ N groups ─┘                                                                   │
//!                  └───────────────────────────────────────────────────────────────────────────────(+)─────┴─ ir_sr
//! ```
//!
//! A group is a stack of transformer layers on reflect-padded tokens
//! followed by a 3×3 conv and a residual connection around the whole group.
//! An ACF block is one such group per branch whose layers alternate self
//! attention and cross attention to the other branch.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{cross_stl_block, crop_to, join, reflect_pad, stl_block, StlParams, WindowSpec};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::resample::bicubic_resize_var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Residual groups per shallow branch.
    pub n_stl: usize,
    /// Fusion blocks.
    pub n_acf: usize,
    /// Residual groups in reconstruction.
    pub n_rec: usize,
    pub embed: usize,
    pub heads: usize,
    pub window: usize,
    pub scale: usize,
    pub guide_channels: usize,
    pub ir_channels: usize,
    pub mlp_ratio: usize,
    /// Transformer layers per shallow group.
    pub ex_depth: usize,
    /// Layers per ACF branch group; alternates self and cross, so even.
    pub acf_depth: usize,
    /// Transformer layers per reconstruction group.
    pub rec_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

const CONFIG_KEYS: [&str; 13] = [
    "n_stl",
    "n_acf",
    "n_rec",
    "embed",
    "heads",
    "window",
    "scale",
    "guide_channels",
    "ir_channels",
    "mlp_ratio",
    "ex_depth",
    "acf_depth",
    "rec_depth",
];

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            n_stl: 2,
            n_acf: 3,
            n_rec: 3,
            embed: 60,
            heads: 6,
            window: 9,
            scale: 8,
            guide_channels: 3,
            ir_channels: 1,
            mlp_ratio: 2,
            ex_depth: 6,
            acf_depth: 6,
            rec_depth: 6,
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            n_stl: 1,
            n_acf: 1,
            n_rec: 1,
            embed: 8,
            heads: 2,
            window: 3,
            ex_depth: 1,
            acf_depth: 2,
            rec_depth: 1,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_stl", self.n_stl),
            ("n_acf", self.n_acf),
            ("n_rec", self.n_rec),
            ("embed", self.embed),
            ("heads", self.heads),
            ("window", self.window),
            ("scale", self.scale),
            ("guide_channels", self.guide_channels),
            ("ir_channels", self.ir_channels),
            ("mlp_ratio", self.mlp_ratio),
            ("ex_depth", self.ex_depth),
            ("acf_depth", self.acf_depth),
            ("rec_depth", self.rec_depth),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("model config: {k} must be at least 1")));
        }
        if self.embed % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "model config: embed {} not divisible by heads {}",
                self.embed, self.heads
            )));
        }
        if self.acf_depth % 2 != 0 {
            return Err(Error::Invalid(format!("model config: acf_depth {} must be even", self.acf_depth)));
        }
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        &CONFIG_KEYS
    }

    pub fn get(&self, key: &str) -> Option<usize> {
        Some(match key {
            "n_stl" => self.n_stl,
            "n_acf" => self.n_acf,
            "n_rec" => self.n_rec,
            "embed" => self.embed,
            "heads" => self.heads,
            "window" => self.window,
            "scale" => self.scale,
            "guide_channels" => self.guide_channels,
            "ir_channels" => self.ir_channels,
            "mlp_ratio" => self.mlp_ratio,
            "ex_depth" => self.ex_depth,
            "acf_depth" => self.acf_depth,
            "rec_depth" => self.rec_depth,
            _ => return None,
        })
    }

    /// Sets one field from text. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v: usize = value
            .trim()
            .parse()
            .map_err(|_| Error::Invalid(format!("model config: {key} expects an integer, got {value:?}")))?;
        let slot = match key {
            "n_stl" => &mut self.n_stl,
            "n_acf" => &mut self.n_acf,
            "n_rec" => &mut self.n_rec,
            "embed" => &mut self.embed,
            "heads" => &mut self.heads,
            "window" => &mut self.window,
            "scale" => &mut self.scale,
            "guide_channels" => &mut self.guide_channels,
            "ir_channels" => &mut self.ir_channels,
            "mlp_ratio" => &mut self.mlp_ratio,
            "ex_depth" => &mut self.ex_depth,
            "acf_depth" => &mut self.acf_depth,
            "rec_depth" => &mut self.rec_depth,
            _ => return Err(Error::Invalid(format!("unknown model config key {key:?}"))),
        };
        *slot = v;
        Ok(())
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for k in CONFIG_KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).unwrap_or_default());
        }
        s
    }

    /// First key whose value differs, with both values.
    pub fn mismatch(&self, other: &ModelConfig) -> Option<(&'static str, usize, usize)> {
        CONFIG_KEYS
            .iter()
            .map(|&k| (k, self.get(k).unwrap_or_default(), other.get(k).unwrap_or_default()))
            .find(|(_, a, b)| a != b)
    }
}

/// 3×3 convolution, `w: [out, in, 3, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub w: P,
    pub b: P,
}

impl<P> Conv<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<Conv<Q>> {
        Ok(Conv {
            w: f(&join(prefix, "w"), &self.w)?,
            b: f(&join(prefix, "b"), &self.b)?,
        })
    }
}

impl<T: Scalar> Conv<Tensor<T>> {
    /// He (fan-in) normal init, zero bias.
    pub fn init(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (inp * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Conv {
            w: Tensor::from_fn([out, inp, 3, 3], |_| T::lit(normal.sample(rng))),
            b: Tensor::zeros([out]),
        }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Conv {
            w: Tensor::zeros([out, inp, 3, 3]),
            b: Tensor::zeros([out]),
        }
    }
}

impl Conv<Var> {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.w, self.b)
    }
}

/// Transformer layers on tokens, then a conv, wrapped in a residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Group<P> {
    pub layers: Vec<StlParams<P>>,
    pub conv: Conv<P>,
}

impl<P> Group<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<Group<Q>> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(&join(prefix, &format!("layers.{i}")), f))
            .collect::<Result<_>>()?;
        Ok(Group {
            layers,
            conv: self.conv.map(&join(prefix, "conv"), f)?,
        })
    }
}

impl<T: Scalar> Group<Tensor<T>> {
    pub fn init(cfg: &ModelConfig, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        let layers = (0..depth)
            .map(|_| StlParams::init(cfg.embed, cfg.heads, cfg.window, cfg.mlp_ratio, rng))
            .collect::<Result<_>>()?;
        Ok(Group {
            layers,
            conv: Conv::init(cfg.embed, cfg.embed, rng),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch<P> {
    pub conv: Conv<P>,
    pub groups: Vec<Group<P>>,
}

impl<P> Branch<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<Branch<Q>> {
        Ok(Branch {
            conv: self.conv.map(&join(prefix, "conv"), f)?,
            groups: map_groups(&self.groups, prefix, f)?,
        })
    }
}

fn map_groups<P, Q>(
    groups: &[Group<P>],
    prefix: &str,
    f: &mut impl FnMut(&str, &P) -> Result<Q>,
) -> Result<Vec<Group<Q>>> {
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| g.map(&join(prefix, &format!("groups.{i}")), f))
        .collect()
}

/// One fusion block: a group per branch. Even layers attend within the
/// branch, odd layers attend to the other branch.
#[derive(Clone, Debug, PartialEq)]
pub struct AcfBlock<P> {
    pub ir: Group<P>,
    pub rgb: Group<P>,
}

impl<P> AcfBlock<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<AcfBlock<Q>> {
        Ok(AcfBlock {
            ir: self.ir.map(&join(prefix, "ir"), f)?,
            rgb: self.rgb.map(&join(prefix, "rgb"), f)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction<P> {
    pub merge: Conv<P>,
    pub groups: Vec<Group<P>>,
    pub conv1: Conv<P>,
    pub conv2: Conv<P>,
    pub conv_out: Conv<P>,
}

impl<P> Reconstruction<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<Reconstruction<Q>> {
        Ok(Reconstruction {
            merge: self.merge.map(&join(prefix, "merge"), f)?,
            groups: map_groups(&self.groups, prefix, f)?,
            conv1: self.conv1.map(&join(prefix, "conv1"), f)?,
            conv2: self.conv2.map(&join(prefix, "conv2"), f)?,
            conv_out: self.conv_out.map(&join(prefix, "conv_out"), f)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub shallow_ir: Branch<P>,
    pub shallow_rgb: Branch<P>,
    pub acf: Vec<AcfBlock<P>>,
    pub rec: Reconstruction<P>,
}

impl<P> ModelParams<P> {
    /// Structure-preserving map; `f` sees every tensor with its canonical name.
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<ModelParams<Q>> {
        Ok(ModelParams {
            shallow_ir: self.shallow_ir.map("shallow_ir", f)?,
            shallow_rgb: self.shallow_rgb.map("shallow_rgb", f)?,
            acf: self
                .acf
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("acf.{i}"), f))
                .collect::<Result<_>>()?,
            rec: self.rec.map("rec", f)?,
        })
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &P)) {
        let _ = self.map(&mut |name, p| {
            f(name, p);
            Ok(())
        });
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n.to_string()));
        out
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    /// Fresh weights; the last reconstruction conv starts at zero so the
    /// untrained model reproduces the bicubic upsample.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed;
        let groups = |depth: usize, n: usize, rng: &mut _| -> Result<Vec<Group<Tensor<T>>>> {
            (0..n).map(|_| Group::init(cfg, depth, rng)).collect()
        };
        Ok(ModelParams {
            shallow_ir: Branch {
                conv: Conv::init(cfg.ir_channels, e, rng),
                groups: groups(cfg.ex_depth, cfg.n_stl, rng)?,
            },
            shallow_rgb: Branch {
                conv: Conv::init(cfg.guide_channels, e, rng),
                groups: groups(cfg.ex_depth, cfg.n_stl, rng)?,
            },
            acf: (0..cfg.n_acf)
                .map(|_| {
                    Ok(AcfBlock {
                        ir: Group::init(cfg, cfg.acf_depth, rng)?,
                        rgb: Group::init(cfg, cfg.acf_depth, rng)?,
                    })
                })
                .collect::<Result<_>>()?,
            rec: Reconstruction {
                merge: Conv::init(2 * e, e, rng),
                groups: groups(cfg.rec_depth, cfg.n_rec, rng)?,
                conv1: Conv::init(e, e, rng),
                conv2: Conv::init(e, e, rng),
                conv_out: Conv::zeros(e, cfg.ir_channels),
            },
        })
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.numel());
        n
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<Tensor<U>> {
        self.map(&mut |_, t| Ok(t.cast())).expect("infallible")
    }

    /// Registers every tensor on `tape`, as trainable leaves or as constants.
    pub fn to_vars(&self, tape: &mut Tape<T>, trainable: bool) -> ModelParams<Var> {
        self.map(&mut |_, t| {
            Ok(if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            })
        })
        .expect("infallible")
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        self.for_each(|n, t| {
            out.insert(n.to_string(), t.clone());
        });
        out
    }

    /// Rebuilds parameters for `cfg` from named tensors, checking every
    /// name and shape. Names in `named` that the config does not use are an
    /// error as well.
    pub fn from_named(cfg: &ModelConfig, named: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let template = ModelParams::<Vec<usize>>::shapes(cfg)?;
        let mut used = 0;
        let params = template.map(&mut |name, shape| {
            let t = named
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    shape
                )));
            }
            used += 1;
            Ok(t.clone())
        })?;
        if used != named.len() {
            let known = template.names();
            let extra = named.keys().find(|k| !known.contains(k)).cloned().unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(params)
    }
}

impl ModelParams<Vec<usize>> {
    /// Parameter shapes implied by `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ModelParams::<Tensor<f32>>::init(cfg, &mut rng)?.map(&mut |_, t| Ok(t.shape().to_vec()))
    }
}

/// Closed-form parameter count of the model built from `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let e = cfg.embed;
    let hidden = e * cfg.mlp_ratio;
    let side = 2 * cfg.window - 1;
    let linear = |i: usize, o: usize| i * o + o;
    let conv = |i: usize, o: usize| o * i * 9 + o;
    let stl = 2 * (2 * e) + linear(e, e) + linear(e, 2 * e) + linear(e, e) + side * side * cfg.heads + linear(e, hidden) + linear(hidden, e);
    let group = |depth: usize| depth * stl + conv(e, e);
    conv(cfg.ir_channels, e)
        + conv(cfg.guide_channels, e)
        + 2 * cfg.n_stl * group(cfg.ex_depth)
        + 2 * cfg.n_acf * group(cfg.acf_depth)
        + conv(2 * e, e)
        + cfg.n_rec * group(cfg.rec_depth)
        + 2 * conv(e, e)
        + conv(e, cfg.ir_channels)
}

fn dims4<T: Scalar>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::shape(op, s, &[0, 0, 0, 0])),
    }
}

fn to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.permute(x, &[0, 2, 3, 1])
}

fn to_image<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.permute(x, &[0, 3, 1, 2])
}

/// Residual group on `[b, embed, h, w]`.
pub fn group_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, g: &Group<Var>, window: usize) -> Result<Var> {
    let [_, _, h, w] = dims4(tape, x, "group")?;
    tape.scope(|tape| {
        let t = to_tokens(tape, x)?;
        let mut t = reflect_pad(tape, t, window)?;
        for (i, layer) in g.layers.iter().enumerate() {
            t = stl_block(tape, t, layer, WindowSpec::alternating(window, i)?)?;
        }
        let t = crop_to(tape, t, h, w)?;
        let y = to_image(tape, t)?;
        let y = g.conv.forward(tape, y)?;
        tape.add(x, y)
    })
}

/// Input conv then the branch's residual groups.
pub fn shallow_extract<T: Scalar>(tape: &mut Tape<T>, img: Var, branch: &Branch<Var>, window: usize) -> Result<Var> {
    let [_, c, _, _] = dims4(tape, img, "shallow_extract")?;
    let want = tape.shape(branch.conv.w)[1];
    if c != want {
        return Err(Error::Invalid(format!("shallow_extract: branch expects {want} channels, got {c}")));
    }
    let mut f = branch.conv.forward(tape, img)?;
    for g in &branch.groups {
        f = group_forward(tape, f, g, window)?;
    }
    Ok(f)
}

/// One fusion block on `[b, embed, h, w]` features of both branches. Each
/// cross layer reads the other branch as it was before either cross update.
pub fn acf_block<T: Scalar>(
    tape: &mut Tape<T>,
    f_ir: Var,
    f_rgb: Var,
    block: &AcfBlock<Var>,
    window: usize,
) -> Result<(Var, Var)> {
    if tape.shape(f_ir) != tape.shape(f_rgb) {
        return Err(Error::shape("acf_block", tape.shape(f_ir), tape.shape(f_rgb)));
    }
    if block.ir.layers.len() != block.rgb.layers.len() || block.ir.layers.len() % 2 != 0 {
        return Err(Error::Invalid("acf_block: branches need the same even number of layers".into()));
    }
    let [_, _, h, w] = dims4(tape, f_ir, "acf_block")?;
    tape.scope(|tape| {
        let ti = to_tokens(tape, f_ir)?;
        let mut ti = reflect_pad(tape, ti, window)?;
        let tr = to_tokens(tape, f_rgb)?;
        let mut tr = reflect_pad(tape, tr, window)?;
        for k in (0..block.ir.layers.len()).step_by(2) {
            let own = WindowSpec::alternating(window, k)?;
            let cross = WindowSpec::alternating(window, k + 1)?;
            let ai = stl_block(tape, ti, &block.ir.layers[k], own)?;
            let ar = stl_block(tape, tr, &block.rgb.layers[k], own)?;
            ti = cross_stl_block(tape, ai, ar, &block.ir.layers[k + 1], cross)?;
            tr = cross_stl_block(tape, ar, ai, &block.rgb.layers[k + 1], cross)?;
        }
        let mut out = [f_ir, f_rgb];
        for ((t, g), o) in [ti, tr].into_iter().zip([&block.ir, &block.rgb]).zip(out.iter_mut()) {
            let t = crop_to(tape, t, h, w)?;
            let y = to_image(tape, t)?;
            let y = g.conv.forward(tape, y)?;
            *o = tape.add(*o, y)?;
        }
        Ok((out[0], out[1]))
    })
}

/// Merges both branches and maps back to a `[b, ir_channels, h, w]` residual.
pub fn fuse_and_reconstruct<T: Scalar>(
    tape: &mut Tape<T>,
    f_ir: Var,
    f_rgb: Var,
    rec: &Reconstruction<Var>,
    window: usize,
) -> Result<Var> {
    if tape.shape(f_ir) != tape.shape(f_rgb) {
        return Err(Error::shape("fuse_and_reconstruct", tape.shape(f_ir), tape.shape(f_rgb)));
    }
    let cat = tape.concat(f_ir, f_rgb, 1)?;
    let mut f = rec.merge.forward(tape, cat)?;
    for g in &rec.groups {
        f = group_forward(tape, f, g, window)?;
    }
    tape.scope(|tape| {
        let y = rec.conv1.forward(tape, f)?;
        let y = tape.gelu(y);
        let y = rec.conv2.forward(tape, y)?;
        let y = tape.gelu(y);
        rec.conv_out.forward(tape, y)
    })
}

/// Super-resolves `ir_lr: [b, ir_c, h, w]` guided by `rgb: [b, guide_c, h·s, w·s]`.
/// An all-zero guide is the unguided mode.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    ir_lr: Var,
    rgb: Var,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
) -> Result<Var> {
    let [b, ic, h, w] = dims4(tape, ir_lr, "forward")?;
    let [gb, gc, gh, gw] = dims4(tape, rgb, "forward")?;
    if b != gb || ic != cfg.ir_channels || gc != cfg.guide_channels || gh != h * cfg.scale || gw != w * cfg.scale {
        return Err(Error::Invalid(format!(
            "forward: IR {:?} and guide {:?} do not match scale {} with {} IR / {} guide channels",
            [b, ic, h, w],
            [gb, gc, gh, gw],
            cfg.scale,
            cfg.ir_channels,
            cfg.guide_channels
        )));
    }
    let up = bicubic_resize_var(tape, ir_lr, gh, gw)?;
    let mut f_ir = shallow_extract(tape, up, &params.shallow_ir, cfg.window)?;
    let mut f_rgb = shallow_extract(tape, rgb, &params.shallow_rgb, cfg.window)?;
    for block in &params.acf {
        (f_ir, f_rgb) = acf_block(tape, f_ir, f_rgb, block, cfg.window)?;
    }
    let res = fuse_and_reconstruct(tape, f_ir, f_rgb, &params.rec, cfg.window)?;
    tape.add(up, res)
}

/// Inference on plain tensors with a no-grad tape.
pub fn infer(cfg: &ModelConfig, params: &ModelParams<Tensor<f32>>, ir_lr: &Tensor<f32>, rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::no_grad();
    let pv = params.to_vars(&mut tape, false);
    let x = tape.constant(ir_lr.clone());
    let g = tape.constant(rgb.clone());
    let y = forward(&mut tape, x, g, cfg, &pv)?;
    let out = tape.value(y).clone();
    if !out.all_finite() {
        return Err(Error::NonFinite("model output"));
    }
    Ok(out)
}
