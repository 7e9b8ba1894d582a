//! Gated recurrent unit built from graph primitives.
//!
//! ```text
//! z_t = σ(x_t W_z + h_{t−1} U_z + b_z)
//! r_t = σ(x_t W_r + h_{t−1} U_r + b_r)
//! n_t = tanh(x_t W_n + (r_t ⊙ h_{t−1}) U_n + b_n)
//! h_t = (1 − z_t) ⊙ n_t + z_t ⊙ h_{t−1}
//! ```
//!
//! The reset gate multiplies the previous state before the recurrent
//! product. The initial state is zero.

use super::{Graph, Result, Tensor, TensorError, Var};

/// GRU weights as plain tensors: `w_*: [D×H]`, `u_*: [H×H]`, `b_*: [H]`.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w: [Tensor; 3],
    pub u: [Tensor; 3],
    pub b: [Tensor; 3],
}

/// GRU weights already recorded on a graph, gate order (z, r, n).
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w: [Var; 3],
    pub u: [Var; 3],
    pub b: [Var; 3],
}

impl GruParams {
    pub fn record(&self, g: &mut Graph) -> GruVars {
        GruVars {
            w: self.w.clone().map(|t| g.param(t)),
            u: self.u.clone().map(|t| g.param(t)),
            b: self.b.clone().map(|t| g.param(t)),
        }
    }
}

/// Runs the recurrence over `inputs` (each `[1×D]`) and returns every state
/// plus the final one (each `[1×H]`).
pub fn gru_forward(g: &mut Graph, p: &GruVars, inputs: &[Var]) -> Result<(Vec<Var>, Var)> {
    let first = *inputs.first().ok_or(TensorError::EmptySequence)?;
    let d = g.shape(first).to_vec();
    for &x in inputs {
        if g.shape(x) != d.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "gru",
                lhs: d,
                rhs: g.shape(x).to_vec(),
            });
        }
    }
    let hidden = g.shape(p.u[0])[0];
    let bias: Vec<Var> = p
        .b
        .iter()
        .map(|&b| g.reshape(b, &[1, hidden]))
        .collect::<Result<_>>()?;
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let gate = |g: &mut Graph, k: usize, state: Var| -> Result<Var> {
            let xw = g.matmul(x, p.w[k])?;
            let hu = g.matmul(state, p.u[k])?;
            let s = g.add(xw, hu)?;
            g.add(s, bias[k])
        };
        let zs = gate(g, 0, h)?;
        let z = g.sigmoid(zs)?;
        let rs = gate(g, 1, h)?;
        let r = g.sigmoid(rs)?;
        let rh = g.mul(r, h)?;
        let ns = gate(g, 2, rh)?;
        let n = g.tanh(ns)?;
        // h = n + z ⊙ (h − n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        h = g.add(n, zd)?;
        states.push(h);
    }
    Ok((states, h))
}
