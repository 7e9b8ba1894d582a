use super::{Graph, Result, Tensor, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so exactly-zero gradients do
/// not turn round-off into a failure.
const REL_FLOOR: f64 = 1e-6;

/// Relative finite-difference steps, tried in order.
const STEPS: [f64; 4] = [1e-5, 1e-6, 1e-7, 1e-4];

/// Checks the gradient of the scalar built by `f` with respect to every
/// element of every input (or only the listed elements when `subset` is
/// given for that input).
///
/// The step is `h = 1e-5 · max(1, |x|)`. Error per element is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`. When that
/// exceeds `tol` the element is retried with steps 10× and 100× smaller,
/// then 10× larger, and the smallest error is kept: a kink (ReLU, |·|) inside the
/// stencil spoils the larger steps, while round-off in losses summed over
/// many terms swamps tiny gradients at the smaller ones. A wrong backward
/// rule disagrees at every step.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let all: Vec<Option<Vec<usize>>> = vec![None; inputs.len()];
    gradient_check_subset(f, inputs, &all, tol)
}

pub fn gradient_check_subset<F>(f: F, inputs: &[Tensor], subset: &[Option<Vec<usize>>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        tol,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input.shape());
        let indices: Vec<usize> = match subset.get(i).cloned().flatten() {
            Some(idx) => idx,
            None => (0..input.len()).collect(),
        };
        for j in indices {
            let x = input.data()[j];
            let a = analytic.data()[j];
            let mut err = f64::INFINITY;
            for step in STEPS {
                let h = step * x.abs().max(1.0);
                work[i].data_mut()[j] = x + h;
                let up = eval(&work)?;
                work[i].data_mut()[j] = x - h;
                let down = eval(&work)?;
                work[i].data_mut()[j] = x;
                let numeric = (up - down) / (2.0 * h);
                err = err.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR));
                if err <= tol {
                    break;
                }
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
