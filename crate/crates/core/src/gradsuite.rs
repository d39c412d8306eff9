//! Finite-difference gradient suite shared by the tests and the `gradcheck`
//! command.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::metrics::{l1_loss, l2_loss};
use crate::model::{forward, Conv, ModelConfig, ModelParams};
use crate::numerics::{finite_diff_check, GradCheckReport, Tape, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.tolerance
    }
}

/// Entry with the largest error relative to its tolerance.
pub fn worst(entries: &[SuiteEntry]) -> Option<&SuiteEntry> {
    entries
        .iter()
        .max_by(|a, b| (a.report.max_rel_err / a.tolerance).total_cmp(&(b.report.max_rel_err / b.tolerance)))
}

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn signed(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand_tensor(shape, seed, -1.0, 1.0)
}

/// `sum(out ∘ w)` with fixed weights so each output coordinate has its own
/// nonzero sensitivity.
fn weighted_sum(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let w = rand_tensor(tape.shape(out), 99, 0.5, 2.5);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn op_check(
    name: &str,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<SuiteEntry> {
    let report = finite_diff_check(
        |tape, v| {
            let out = f(tape, v)?;
            weighted_sum(tape, out)
        },
        inputs,
        1e-5,
        None,
    )?;
    Ok(SuiteEntry {
        name: name.to_string(),
        report,
        tolerance: OP_TOLERANCE,
    })
}

/// Every differentiable tape operation in 64-bit arithmetic.
pub fn op_suite() -> Result<Vec<SuiteEntry>> {
    let away_from_zero = signed(&[3, 4], 26).map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 });
    let pair = [signed(&[2, 3, 4], 9), signed(&[3, 1], 10)];
    let shapes = [signed(&[2, 3, 4], 27), signed(&[2, 2, 4], 28)];
    let idx: Rc<[usize]> = vec![0, 5, 5, 23, 7, 1].into();
    let starts: Rc<[usize]> = vec![20, 0, 8, 8].into();
    let wy = Rc::new(signed(&[5, 3], 29));
    let wx = Rc::new(signed(&[4, 2], 30));
    // targets offset so |pred − gt| stays clear of the L1 kink
    let pred = signed(&[2, 5], 31);
    let gt = Rc::new(pred.map(|v| v + 0.3));

    let mut out = vec![
        op_check("matmul", &[signed(&[3, 4], 2), signed(&[4, 5], 3)], |t, v| t.matmul(v[0], v[1]))?,
        op_check("matmul_batched", &[signed(&[2, 3, 4], 4), signed(&[4, 2], 5)], |t, v| t.matmul(v[0], v[1]))?,
        op_check("matmul_broadcast", &[signed(&[2, 1, 3, 4], 6), signed(&[3, 4, 2], 7)], |t, v| {
            t.matmul(v[0], v[1])
        })?,
        op_check("add_broadcast", &pair, |t, v| t.add(v[0], v[1]))?,
        op_check("sub_broadcast", &pair, |t, v| t.sub(v[0], v[1]))?,
        op_check("mul_broadcast", &pair, |t, v| t.mul(v[0], v[1]))?,
        op_check("add_scalar", &[away_from_zero.clone()], |t, v| Ok(t.add_scalar(v[0], 0.5)))?,
        op_check("scale", &[away_from_zero.clone()], |t, v| Ok(t.scale(v[0], -1.75)))?,
        op_check("abs", &[away_from_zero.clone()], |t, v| Ok(t.abs(v[0])))?,
        op_check("gelu", &[away_from_zero.clone()], |t, v| Ok(t.gelu(v[0])))?,
        op_check("sum", &[away_from_zero.clone()], |t, v| Ok(t.sum(v[0])))?,
        op_check("mean", &[away_from_zero], |t, v| Ok(t.mean(v[0])))?,
        op_check("softmax_last", &[signed(&[3, 5], 13)], |t, v| t.softmax(v[0], 1))?,
        op_check("softmax_outer", &[signed(&[4, 2, 3], 14)], |t, v| t.softmax(v[0], 0))?,
        op_check(
            "layer_norm",
            &[signed(&[4, 5], 16), signed(&[5], 17), signed(&[5], 18)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        )?,
        op_check(
            "conv2d_3x3",
            &[signed(&[1, 2, 5, 5], 20), signed(&[3, 2, 3, 3], 21), signed(&[3], 22)],
            |t, v| t.conv2d(v[0], v[1], v[2]),
        )?,
        op_check(
            "conv2d_1x1",
            &[signed(&[2, 3, 4, 3], 23), signed(&[2, 3, 1, 1], 24), signed(&[2], 25)],
            |t, v| t.conv2d(v[0], v[1], v[2]),
        )?,
        op_check("permute", &shapes, |t, v| t.permute(v[0], &[2, 0, 1]))?,
        op_check("narrow", &shapes, |t, v| t.narrow(v[0], 1, 1, 2))?,
        op_check("reshape", &shapes, |t, v| t.reshape(v[0], [6, 4]))?,
        op_check("concat", &shapes, |t, v| t.concat(v[0], v[1], 1))?,
        op_check("gather", &shapes, |t, v| t.gather(v[0], idx.clone(), vec![2, 3]))?,
        op_check("gather_blocks", &shapes, |t, v| t.gather_blocks(v[0], starts.clone(), 4, vec![2, 2, 4]))?,
        op_check("separable", &[signed(&[2, 1, 3, 2], 31)], |t, v| t.separable(v[0], wy.clone(), wx.clone()))?,
    ];
    for (name, l2) in [("l1_loss", false), ("l2_loss", true)] {
        let gt = gt.clone();
        let report = finite_diff_check(
            move |tape, v| {
                let g = tape.constant((*gt).clone());
                if l2 {
                    l2_loss(tape, v[0], g)
                } else {
                    l1_loss(tape, v[0], g)
                }
            },
            std::slice::from_ref(&pred),
            1e-5,
            None,
        )?;
        out.push(SuiteEntry {
            name: name.into(),
            report,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(out)
}

/// Tiny model at scale 4 so a 12×12 guide pairs with a 3×3 IR input.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        scale: 4,
        ..ModelConfig::tiny()
    }
}

/// Parameters with a live output conv and attention weights large enough
/// that attention is far from uniform.
pub fn gradcheck_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<Tensor<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ModelParams::<Tensor<f64>>::init(cfg, &mut rng)?;
    let mut p = p.map(&mut |n, t| {
        let s = if n.contains(".layers.") && !n.contains("norm") { 15.0 } else { 1.0 };
        Ok(t.map(|v| v * s))
    })?;
    p.rec.conv_out = Conv::init(cfg.embed, cfg.ir_channels, &mut rng);
    p.rec.conv_out.b = rand_tensor(&[cfg.ir_channels], seed + 1, 0.0, 1.0);
    Ok(p)
}

/// Key biases only shift every logit of a query row equally, so their exact
/// gradient is zero and central differences measure pure rounding noise.
pub fn is_key_bias(name: &str) -> bool {
    name.ends_with("attn.kv.b")
}

/// End-to-end L2 loss gradient of the tiny model with respect to both
/// images and every parameter tensor (sampled coordinates).
pub fn model_check(coords_per_tensor: usize) -> Result<SuiteEntry> {
    let cfg = gradcheck_model_config();
    let p = gradcheck_params(&cfg, 35)?;
    let lr = 12 / cfg.scale;
    let mut inputs = vec![
        rand_tensor(&[1, cfg.ir_channels, lr, lr], 36, 0.0, 1.0),
        rand_tensor(&[1, cfg.guide_channels, 12, 12], 37, 0.0, 1.0),
    ];
    p.for_each(|n, t| {
        if !is_key_bias(n) {
            inputs.push(t.clone());
        }
    });
    let gt = rand_tensor(&[1, cfg.ir_channels, 12, 12], 38, 0.0, 1.0);
    let report = finite_diff_check(
        |tape, v| {
            let mut it = v[2..].iter();
            let pv = p.map(&mut |n, t| {
                Ok(if is_key_bias(n) {
                    tape.constant(t.clone())
                } else {
                    *it.next().expect("one input per checked parameter")
                })
            })?;
            let out = forward(tape, v[0], v[1], &cfg, &pv)?;
            let g = tape.constant(gt.clone());
            l2_loss(tape, out, g)
        },
        &inputs,
        1e-5,
        Some(coords_per_tensor),
    )?;
    Ok(SuiteEntry {
        name: "tiny_model_end_to_end".into(),
        report,
        tolerance: MODEL_TOLERANCE,
    })
}
