use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max_rel={:.3e} max_abs={:.3e} {}",
            self.op_name,
            self.max_rel_error,
            self.max_abs_error,
            if self.passed { "ok" } else { "FAILED" }
        )
    }
}

/// Fixed projection weights in [0.5, 1.5) so every output element matters.
fn projection(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^= z >> 31;
            0.5 + (z >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn projected<F>(f: &F, inputs: &[Tensor<f64>], weights: Option<&[f64]>) -> Result<(f64, usize)>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::<f64>::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = g.value(f(&g, &vars)?);
    let w = match weights {
        Some(w) => w.to_vec(),
        None => projection(out.numel()),
    };
    Ok((out.data().iter().zip(&w).map(|(o, w)| o * w).sum(), out.numel()))
}

/// Compares the recorded gradient of `f` against central finite differences
/// (step `1e-5`) at 64-bit precision. The output of `f` is reduced to a scalar
/// by a fixed weighting so that non-scalar operators are fully exercised.
/// Relative error is `|a-n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(op_name: &str, f: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with_step(op_name, f, inputs, tol, 1e-5)
}

pub fn grad_check_with_step<F>(
    op_name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    tol: f64,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::<f64>::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &leaves)?;
    let n_out = g.value(out).numel();
    let weights = projection(n_out);
    let w = g.constant(Tensor::new(g.shape(out), weights.clone())?);
    let weighted = g.mul(out, w)?;
    let loss = g.sum(weighted);
    g.backward(loss)?;

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g.grad(leaves[i]).unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for j in 0..input.numel() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] = input.data()[j] + step;
            let (plus, _) = projected(&f, &probe, Some(&weights))?;
            probe[i].data_mut()[j] = input.data()[j] - step;
            let (minus, _) = projected(&f, &probe, Some(&weights))?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(GradCheckReport { op_name: op_name.to_string(), max_rel_error: max_rel, max_abs_error: max_abs, passed: max_rel <= tol })
}
