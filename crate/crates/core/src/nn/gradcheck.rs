use rand::seq::index::sample;

use super::{Graph, Tensor, Var};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input index, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences with step `h`, on at most `per_input` randomly chosen
/// entries of each input.
pub fn gradient_check(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    h: f64,
    per_input: usize,
    seed: u64,
) -> GradCheckReport {
    let eval = |values: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        (g, vars, loss)
    };
    let (mut g, vars, loss) = eval(inputs);
    g.backward(loss);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut rng = rng_from_seed(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let picks: Vec<usize> = if t.len() <= per_input {
            (0..t.len()).collect()
        } else {
            sample(&mut rng, t.len(), per_input).into_vec()
        };
        for i in picks {
            let orig = t.data[i];
            work[k].data[i] = orig + h;
            let (gp, _, lp) = eval(&work);
            work[k].data[i] = orig - h;
            let (gm, _, lm) = eval(&work);
            work[k].data[i] = orig;
            let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
            let a = analytic[k][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    report
}
