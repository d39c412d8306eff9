use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |ad − fd| / max(|ad|, |fd|, 1e-8)` over all checked coordinates.
    pub max_rel_err: f64,
    /// Input and flat coordinate where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Checks the gradient of a scalar function of `inputs` by central
/// differences with step `eps`.
///
/// `f` rebuilds the computation on a fresh tape for every evaluation. When
/// `max_coords` is set, at most that many evenly spaced coordinates of each
/// input are perturbed.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::Invalid("gradient check needs a scalar function".into()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let zeros = Tensor::zeros(inputs[k].shape().to_vec());
        let ad = grads.get(*v).unwrap_or(&zeros);
        let step = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        for i in (0..n).step_by(step) {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = ad.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if !rel.is_finite() {
                return Err(Error::NonFinite("finite_diff_check"));
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (k, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
