//! Discrete optimal-transport checks of the β-weighted cycle objective.
//!
//! For measures μ on 𝒳 and ν on 𝒴 with maps `G: 𝒴 → 𝒳`, `F: 𝒳 → 𝒴`, the
//! primal cost is `K = min_π Σ π_ij c(x_i, y_j)` with
//! `c(x, y) = ‖x − G(y)‖ + (1/β)‖F(x) − y‖`. Distances are ℓ₁ norms, the same
//! distance the training losses use. All problems are solved exactly as
//! linear programs.

use microlp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

pub const MAX_SUPPORT: usize = 16;
pub const SANDWICH_TOL: f64 = 1e-8;
const MARGINAL_TOL: f64 = 1e-9;

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let m = DiscreteMeasure { points, weights };
        m.validate()?;
        Ok(m)
    }

    pub fn dirac(point: Vec<f64>) -> Self {
        DiscreteMeasure {
            points: vec![point],
            weights: vec![1.0],
        }
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n == 0 || n > MAX_SUPPORT || self.weights.len() != n {
            return Err(Error::InvalidArgument(format!(
                "measure needs 1..={MAX_SUPPORT} points with one weight each, got {n} points and {} weights",
                self.weights.len()
            )));
        }
        let d = self.dim();
        if d == 0 || self.points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("measure points must share a positive dimension".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument("measure weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("measure weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Push-forward through `map`.
    pub fn push(&self, map: impl Fn(&[f64]) -> Vec<f64>) -> DiscreteMeasure {
        DiscreteMeasure {
            points: self.points.iter().map(|p| map(p)).collect(),
            weights: self.weights.clone(),
        }
    }
}

/// Transport plan; `plan[i][j]` is the mass moved from source `i` to target `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub plan: Vec<Vec<f64>>,
}

impl Coupling {
    /// Largest marginal violation against `(mu, nu)`.
    pub fn marginal_error(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        let mut err: f64 = 0.0;
        for (row, w) in self.plan.iter().zip(&mu.weights) {
            err = err.max((row.iter().sum::<f64>() - w).abs());
        }
        for (j, w) in nu.weights.iter().enumerate() {
            err = err.max((self.plan.iter().map(|r| r[j]).sum::<f64>() - w).abs());
        }
        err
    }

    pub fn cost(&self, c: impl Fn(usize, usize) -> f64) -> f64 {
        let mut total = 0.0;
        for (i, row) in self.plan.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                total += p * c(i, j);
            }
        }
        total
    }
}

/// Potential values on the relevant point set of each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialPair {
    /// Points of 𝒳 (supp μ, then G(supp ν)) and the values of the 𝒳-side potential.
    pub x_points: Vec<Vec<f64>>,
    pub x_values: Vec<f64>,
    /// Points of 𝒴 (supp ν, then F(supp μ)) and the values of the 𝒴-side potential.
    pub y_points: Vec<Vec<f64>>,
    pub y_values: Vec<f64>,
    pub lipschitz: f64,
}

impl PotentialPair {
    /// Largest excess of `|f(p) − f(q)| − L‖p − q‖` over both sides.
    pub fn lipschitz_violation(&self) -> f64 {
        let side = |pts: &[Vec<f64>], vals: &[f64]| {
            let mut worst = f64::NEG_INFINITY;
            for a in 0..pts.len() {
                for b in 0..pts.len() {
                    worst = worst.max((vals[a] - vals[b]).abs() - self.lipschitz * distance(&pts[a], &pts[b]));
                }
            }
            worst
        };
        side(&self.x_points, &self.x_values).max(side(&self.y_points, &self.y_values))
    }
}

fn check_pair(mu: &DiscreteMeasure, nu: &DiscreteMeasure, beta: f64) -> Result<()> {
    mu.validate()?;
    nu.validate()?;
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

fn lp_error(what: &str, e: impl std::fmt::Display, dump: impl Serialize) -> Error {
    let instance = serde_json::to_string(&dump).unwrap_or_default();
    Error::Lp(format!("{what}: {e}; instance {instance}"))
}

/// Minimum of `Σ π_ij cost[i][j]` over couplings of `(a, b)`.
pub fn transport(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> Result<(f64, Coupling)> {
    let (n, m) = (a.len(), b.len());
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = (0..n)
        .map(|i| (0..m).map(|j| lp.add_var(cost[i][j], (0.0, f64::INFINITY))).collect())
        .collect();
    for i in 0..n {
        let row: LinearExpr = (0..m).map(|j| (vars[i][j], 1.0)).collect();
        lp.add_constraint(row, ComparisonOp::Eq, a[i]);
    }
    for j in 0..m {
        let col: LinearExpr = (0..n).map(|i| (vars[i][j], 1.0)).collect();
        lp.add_constraint(col, ComparisonOp::Eq, b[j]);
    }
    let dump = || (a.to_vec(), b.to_vec(), cost.to_vec());
    let sol = lp
        .solve()
        .map_err(|e| lp_error("transport", e, dump()))?
        .into_solution()
        .map_err(|_| lp_error("transport", "solve interrupted", dump()))?;
    let plan: Vec<Vec<f64>> = vars
        .iter()
        .map(|row| row.iter().map(|&v| sol.var_value(v).max(0.0)).collect())
        .collect();
    let coupling = Coupling { plan };
    let k = coupling.cost(|i, j| cost[i][j]);
    Ok((k, coupling))
}

/// `c(x_i, y_j)` for the β-weighted cycle problem.
pub fn cost_matrix(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    g: impl Fn(&[f64]) -> Vec<f64>,
    f: impl Fn(&[f64]) -> Vec<f64>,
    beta: f64,
) -> Vec<Vec<f64>> {
    let gy: Vec<Vec<f64>> = nu.points.iter().map(|y| g(y)).collect();
    let fx: Vec<Vec<f64>> = mu.points.iter().map(|x| f(x)).collect();
    mu.points
        .iter()
        .zip(&fx)
        .map(|(x, fxi)| {
            nu.points
                .iter()
                .zip(&gy)
                .map(|(y, gyj)| distance(x, gyj) + distance(fxi, y) / beta)
                .collect()
        })
        .collect()
}

/// Optimal primal cost `K` and an optimal coupling.
pub fn primal_cost(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    g: impl Fn(&[f64]) -> Vec<f64>,
    f: impl Fn(&[f64]) -> Vec<f64>,
    beta: f64,
) -> Result<(f64, Coupling)> {
    check_pair(mu, nu, beta)?;
    let cost = cost_matrix(mu, nu, g, f, beta);
    let (k, pi) = transport(&mu.weights, &nu.weights, &cost)?;
    let err = pi.marginal_error(mu, nu);
    if err > MARGINAL_TOL {
        return Err(lp_error("transport", format!("marginal error {err:e}"), (mu, nu, beta)));
    }
    Ok((k, pi))
}

/// Wasserstein-1 distance with ℓ₁ ground cost.
pub fn w1(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    mu.validate()?;
    nu.validate()?;
    let cost: Vec<Vec<f64>> = mu
        .points
        .iter()
        .map(|x| nu.points.iter().map(|y| distance(x, y)).collect())
        .collect();
    Ok(transport(&mu.weights, &nu.weights, &cost)?.0)
}

/// `max_D Σ a_i D(p_i) − Σ b_j D(q_j)` over `L`-Lipschitz `D` on `p ∪ q`.
/// Returns the maximum and the potential on the concatenated points.
pub fn lipschitz_potential(
    p: &[Vec<f64>],
    a: &[f64],
    q: &[Vec<f64>],
    b: &[f64],
    lipschitz: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    let points: Vec<Vec<f64>> = p.iter().chain(q).cloned().collect();
    let coef: Vec<f64> = a.iter().copied().chain(b.iter().map(|v| -v)).collect();
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    // The objective is shift invariant (equal total masses), so one value is pinned.
    let vars: Vec<_> = coef
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            if k == 0 {
                lp.add_var(c, (0.0, 0.0))
            } else {
                lp.add_var(c, (f64::NEG_INFINITY, f64::INFINITY))
            }
        })
        .collect();
    for s in 0..points.len() {
        for t in 0..points.len() {
            if s != t {
                lp.add_constraint(
                    [(vars[s], 1.0), (vars[t], -1.0)],
                    ComparisonOp::Le,
                    lipschitz * distance(&points[s], &points[t]),
                );
            }
        }
    }
    let dump = || (p.to_vec(), a.to_vec(), q.to_vec(), b.to_vec(), lipschitz);
    let sol = lp
        .solve()
        .map_err(|e| lp_error("potential", e, dump()))?
        .into_solution()
        .map_err(|_| lp_error("potential", "solve interrupted", dump()))?;
    let values: Vec<f64> = vars.iter().map(|&v| sol.var_value(v)).collect();
    let objective = coef.iter().zip(&values).map(|(c, v)| c * v).sum();
    Ok((objective, points, values))
}

/// `ℓ_Disc`: the sum of the two discriminator maxima over 1/β-Lipschitz
/// potentials.
pub fn max_disc_term(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    g: impl Fn(&[f64]) -> Vec<f64>,
    f: impl Fn(&[f64]) -> Vec<f64>,
    beta: f64,
) -> Result<(f64, PotentialPair)> {
    check_pair(mu, nu, beta)?;
    let l = 1.0 / beta;
    let gy = nu.push(&g);
    let fx = mu.push(&f);
    let (dx, x_points, x_values) = lipschitz_potential(&mu.points, &mu.weights, &gy.points, &gy.weights, l)?;
    let (dy, y_points, y_values) = lipschitz_potential(&nu.points, &nu.weights, &fx.points, &fx.weights, l)?;
    Ok((
        dx + dy,
        PotentialPair {
            x_points,
            x_values,
            y_points,
            y_values,
            lipschitz: l,
        },
    ))
}

/// `Σ μ_i ‖x_i − G(F(x_i))‖ + (1/β) Σ ν_j ‖y_j − F(G(y_j))‖`.
pub fn cycle_term(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    g: impl Fn(&[f64]) -> Vec<f64>,
    f: impl Fn(&[f64]) -> Vec<f64>,
    beta: f64,
) -> f64 {
    let x: f64 = mu.points.iter().zip(&mu.weights).map(|(p, w)| w * distance(p, &g(&f(p)))).sum();
    let y: f64 = nu.points.iter().zip(&nu.weights).map(|(p, w)| w * distance(p, &f(&g(p)))).sum();
    x + y / beta
}

/// Affine map `A·v + b` with `A` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub dim: usize,
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        AffineMap {
            dim,
            matrix,
            offset: vec![0.0; dim],
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.offset[i] + (0..self.dim).map(|k| self.matrix[i * self.dim + k] * v[k]).sum::<f64>())
            .collect()
    }
}

/// A self-contained problem instance, serialisable for failure reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtInstance {
    pub mu: DiscreteMeasure,
    pub nu: DiscreteMeasure,
    pub g: AffineMap,
    pub f: AffineMap,
    pub beta: f64,
}

pub const TRIAL_BETAS: [f64; 4] = [0.5, 1.0, 2.0, 10.0];

impl OtInstance {
    /// Random instance with supports of 1..=8 points in 1..=3 dimensions.
    pub fn random(seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let d = rng.random_range(1..=3usize);
        let measure = |rng: &mut crate::rng::Rng| {
            let n = rng.random_range(1..=8usize);
            let points = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            DiscreteMeasure {
                points,
                weights: raw.iter().map(|w| w / total).collect(),
            }
        };
        let mu = measure(&mut rng);
        let nu = measure(&mut rng);
        let map = |rng: &mut crate::rng::Rng| AffineMap {
            dim: d,
            matrix: (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            offset: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let g = map(&mut rng);
        let f = map(&mut rng);
        let beta = TRIAL_BETAS[rng.random_range(0..TRIAL_BETAS.len())];
        OtInstance { mu, nu, g, f, beta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub k: f64,
    pub disc: f64,
    pub cycle: f64,
    pub lower: f64,
    pub upper: f64,
    pub lower_holds: bool,
    pub upper_holds: bool,
    pub instance: OtInstance,
}

impl SandwichReport {
    pub fn passes(&self) -> bool {
        self.lower_holds && self.upper_holds
    }
}

/// Evaluates `½ℓ_Disc ≤ K ≤ ½(ℓ_Disc + ℓ_cycle)` within [`SANDWICH_TOL`].
pub fn verify_sandwich(instance: &OtInstance) -> Result<SandwichReport> {
    let OtInstance { mu, nu, g, f, beta } = instance;
    let gm = |v: &[f64]| g.apply(v);
    let fm = |v: &[f64]| f.apply(v);
    let (k, _) = primal_cost(mu, nu, gm, fm, *beta)?;
    let (disc, potentials) = max_disc_term(mu, nu, gm, fm, *beta)?;
    if potentials.lipschitz_violation() > 1e-9 {
        return Err(lp_error("potential", "Lipschitz constraint violated", instance));
    }
    let cycle = cycle_term(mu, nu, gm, fm, *beta);
    let lower = 0.5 * disc;
    let upper = 0.5 * (disc + cycle);
    let report = SandwichReport {
        k,
        disc,
        cycle,
        lower,
        upper,
        lower_holds: lower <= k + SANDWICH_TOL,
        upper_holds: k <= upper + SANDWICH_TOL,
        instance: instance.clone(),
    };
    if !report.passes() {
        log::warn!("sandwich violated: K={k} lower={lower} upper={upper} beta={beta}");
        log::debug!("instance {}", serde_json::to_string(instance).unwrap_or_default());
    }
    Ok(report)
}

/// Runs `trials` seeded random instances.
pub fn run_trials(trials: usize, seed: u64) -> Result<Vec<SandwichReport>> {
    (0..trials)
        .map(|i| verify_sandwich(&OtInstance::random(derive_seed(seed, "duality", i as u64))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn id(v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    #[test]
    fn dirac_examples() {
        let mu = DiscreteMeasure::dirac(vec![0.0]);
        let (k, _) = primal_cost(&mu, &mu, id, id, 1.0).unwrap();
        assert_eq!(k, 0.0);
        let nu = DiscreteMeasure::dirac(vec![3.0]);
        let g = |_: &[f64]| vec![0.0];
        let f = |_: &[f64]| vec![3.0];
        assert_eq!(primal_cost(&mu, &nu, g, f, 1.0).unwrap().0, 0.0);
        let g1 = |_: &[f64]| vec![1.0];
        assert!((primal_cost(&mu, &nu, g1, f, 1.0).unwrap().0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_measures_are_rejected() {
        assert!(DiscreteMeasure::new(vec![vec![0.0]], vec![0.9]).is_err());
        assert!(DiscreteMeasure::new(vec![vec![0.0], vec![1.0, 2.0]], vec![0.5, 0.5]).is_err());
        assert!(DiscreteMeasure::uniform(vec![vec![0.0]; 17]).is_err());
        let mu = DiscreteMeasure::dirac(vec![0.0]);
        assert!(primal_cost(&mu, &mu, id, id, 0.0).is_err());
    }

    /// Every vertex of the transportation polytope has a support of at most
    /// `n + m − 1` cells whose columns in the marginal system are independent;
    /// enumerate all such supports and solve each one directly.
    fn vertex_minimum(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> f64 {
        let (n, m) = (a.len(), b.len());
        let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
        let r = n + m - 1;
        let mut best = f64::INFINITY;
        let mut pick = vec![0usize; r];
        fn next(pick: &mut [usize], total: usize) -> bool {
            let r = pick.len();
            let mut k = r;
            while k > 0 {
                k -= 1;
                if pick[k] < total - r + k {
                    pick[k] += 1;
                    for t in k + 1..r {
                        pick[t] = pick[t - 1] + 1;
                    }
                    return true;
                }
            }
            false
        }
        for (k, p) in pick.iter_mut().enumerate() {
            *p = k;
        }
        loop {
            // Rows: n row sums and the first m−1 column sums (the last is implied).
            let mut mat = vec![vec![0.0; r + 1]; r];
            for (c, &idx) in pick.iter().enumerate() {
                let (i, j) = cells[idx];
                mat[i][c] = 1.0;
                if j + 1 < m {
                    mat[n + j][c] = 1.0;
                }
            }
            for i in 0..n {
                mat[i][r] = a[i];
            }
            for j in 0..m - 1 {
                mat[n + j][r] = b[j];
            }
            if let Some(sol) = solve_square(mat) {
                if sol.iter().all(|&v| v >= -1e-12) {
                    let c: f64 = pick.iter().zip(&sol).map(|(&idx, v)| v * cost[cells[idx].0][cells[idx].1]).sum();
                    best = best.min(c);
                }
            }
            if !next(&mut pick, cells.len()) {
                break;
            }
        }
        best
    }

    fn solve_square(mut mat: Vec<Vec<f64>>) -> Option<Vec<f64>> {
        let r = mat.len();
        for col in 0..r {
            let piv = (col..r).max_by(|&p, &q| mat[p][col].abs().total_cmp(&mat[q][col].abs()))?;
            if mat[piv][col].abs() < 1e-12 {
                return None;
            }
            mat.swap(col, piv);
            for row in 0..r {
                if row != col {
                    let factor = mat[row][col] / mat[col][col];
                    if factor != 0.0 {
                        for k in col..=r {
                            mat[row][k] -= factor * mat[col][k];
                        }
                    }
                }
            }
        }
        Some((0..r).map(|i| mat[i][r] / mat[i][i]).collect())
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn uniform_six_by_six_matches_permutation_vertices() {
        // With uniform weights the polytope's vertices are the scaled permutation matrices.
        let perms = permutations(6);
        for seed in 0..5 {
            let mut inst = OtInstance::random(seed);
            let mut rng = rng_from_seed(100 + seed);
            let d = inst.g.dim;
            let pts = |rng: &mut crate::rng::Rng| (0..6).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            inst.mu = DiscreteMeasure::uniform(pts(&mut rng)).unwrap();
            inst.nu = DiscreteMeasure::uniform(pts(&mut rng)).unwrap();
            let (g, f) = (|v: &[f64]| inst.g.apply(v), |v: &[f64]| inst.f.apply(v));
            let cost = cost_matrix(&inst.mu, &inst.nu, g, f, inst.beta);
            let (k, pi) = primal_cost(&inst.mu, &inst.nu, g, f, inst.beta).unwrap();
            let brute = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>() / 6.0)
                .fold(f64::INFINITY, f64::min);
            assert!((k - brute).abs() < 1e-9, "{k} vs {brute}");
            assert!(pi.marginal_error(&inst.mu, &inst.nu) < 1e-9);
        }
    }

    #[test]
    fn general_weights_match_vertex_enumeration() {
        for seed in 0..6 {
            let inst = OtInstance::random(200 + seed);
            let mu = DiscreteMeasure {
                points: inst.mu.points.iter().take(3).cloned().collect(),
                weights: vec![0.2, 0.5, 0.3][..inst.mu.len().min(3)].to_vec(),
            };
            let mu = DiscreteMeasure::new(mu.points.clone(), {
                let s: f64 = mu.weights.iter().sum();
                mu.weights.iter().map(|w| w / s).collect()
            })
            .unwrap();
            let (g, f) = (|v: &[f64]| inst.g.apply(v), |v: &[f64]| inst.f.apply(v));
            let nu = DiscreteMeasure {
                points: inst.nu.points.iter().take(4).cloned().collect(),
                weights: vec![0.1, 0.4, 0.3, 0.2][..inst.nu.len().min(4)].to_vec(),
            };
            let nu = DiscreteMeasure::new(nu.points.clone(), {
                let s: f64 = nu.weights.iter().sum();
                nu.weights.iter().map(|w| w / s).collect()
            })
            .unwrap();
            let cost = cost_matrix(&mu, &nu, g, f, inst.beta);
            let (k, _) = primal_cost(&mu, &nu, g, f, inst.beta).unwrap();
            let brute = vertex_minimum(&mu.weights, &nu.weights, &cost);
            assert!((k - brute).abs() < 1e-9, "seed {seed}: {k} vs {brute}");
        }
    }

    #[test]
    fn disc_term_examples() {
        let mu = DiscreteMeasure::new(vec![vec![0.0, 1.0], vec![2.0, -1.0]], vec![0.3, 0.7]).unwrap();
        let (d, pot) = max_disc_term(&mu, &mu, id, id, 1.0).unwrap();
        assert!(d.abs() < 1e-12);
        assert!(pot.lipschitz_violation() < 1e-12);
        // Dirac pair at distance 2.5; G pushes ν onto its own support, off μ.
        let a = DiscreteMeasure::dirac(vec![0.0]);
        let b = DiscreteMeasure::dirac(vec![2.5]);
        let (_, pot) = max_disc_term(&a, &b, id, id, 1.0).unwrap();
        let x_side = pot.x_values[0] - pot.x_values[1];
        assert!((x_side - 2.5).abs() < 1e-12);
        assert!((x_side - w1(&a, &b.push(id)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn disc_term_scales_with_inverse_beta() {
        for seed in 0..10 {
            let inst = OtInstance::random(300 + seed);
            let (g, f) = (|v: &[f64]| inst.g.apply(v), |v: &[f64]| inst.f.apply(v));
            let (d1, _) = max_disc_term(&inst.mu, &inst.nu, g, f, inst.beta).unwrap();
            let (d2, _) = max_disc_term(&inst.mu, &inst.nu, g, f, 2.0 * inst.beta).unwrap();
            assert!((d2 - 0.5 * d1).abs() < 1e-9, "{d1} {d2}");
        }
    }

    #[test]
    fn x_side_potential_is_dual_to_w1() {
        // Two routes to W₁(μ, G#ν): the transport LP and the Lipschitz-potential LP.
        for seed in 0..10 {
            let inst = OtInstance::random(400 + seed);
            let g = |v: &[f64]| inst.g.apply(v);
            let gy = inst.nu.push(g);
            let primal = w1(&inst.mu, &gy).unwrap();
            let (dual, _, _) = lipschitz_potential(&inst.mu.points, &inst.mu.weights, &gy.points, &gy.weights, 1.0).unwrap();
            assert!((primal - dual).abs() < 1e-9, "{primal} vs {dual}");
        }
    }

    #[test]
    fn cycle_term_examples() {
        let mu = DiscreteMeasure::dirac(vec![1.0]);
        let nu = DiscreteMeasure::dirac(vec![2.0]);
        assert_eq!(cycle_term(&mu, &nu, id, id, 3.0), 0.0);
        // G∘F shifts x by 0.2; F∘G shifts y by 0.5.
        let f = |v: &[f64]| vec![v[0] + 10.0];
        let g = |v: &[f64]| if v[0] > 5.0 { vec![v[0] - 9.8] } else { vec![v[0] - 9.5] };
        let c = cycle_term(&mu, &nu, g, f, 10.0);
        assert!((c - 0.25).abs() < 1e-12, "{c}");
        let inst = OtInstance::random(7);
        let (gm, fm) = (|v: &[f64]| inst.g.apply(v), |v: &[f64]| inst.f.apply(v));
        let mut oracle = 0.0;
        for (p, w) in inst.mu.points.iter().zip(&inst.mu.weights) {
            let back = inst.g.apply(&inst.f.apply(p));
            oracle += w * p.iter().zip(&back).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
        for (p, w) in inst.nu.points.iter().zip(&inst.nu.weights) {
            let back = inst.f.apply(&inst.g.apply(p));
            oracle += w * p.iter().zip(&back).map(|(a, b)| (a - b).abs()).sum::<f64>() / inst.beta;
        }
        assert!((cycle_term(&inst.mu, &inst.nu, gm, fm, inst.beta) - oracle).abs() < 1e-12);
    }

    #[test]
    fn identical_measures_with_identity_maps_are_tight() {
        let mu = DiscreteMeasure::new(vec![vec![0.1], vec![0.9], vec![-0.4]], vec![0.2, 0.3, 0.5]).unwrap();
        let inst = OtInstance {
            nu: mu.clone(),
            mu,
            g: AffineMap::identity(1),
            f: AffineMap::identity(1),
            beta: 2.0,
        };
        let r = verify_sandwich(&inst).unwrap();
        assert!(r.k.abs() < 1e-12 && r.disc.abs() < 1e-12 && r.cycle == 0.0);
        assert!(r.passes());
    }

    #[test]
    fn lower_bound_holds_on_random_instances() {
        for r in run_trials(30, 1).unwrap() {
            assert!(r.lower_holds, "{r:?}");
        }
    }

    #[test]
    fn identity_maps_break_the_upper_bound() {
        // c(x, y) = (1 + 1/β)|x − y| for identity maps, so K = 2d at β = 1 while
        // the averaged bound only reaches d.
        let d = 1.5;
        let inst = OtInstance {
            mu: DiscreteMeasure::dirac(vec![0.0]),
            nu: DiscreteMeasure::dirac(vec![d]),
            g: AffineMap::identity(1),
            f: AffineMap::identity(1),
            beta: 1.0,
        };
        let r = verify_sandwich(&inst).unwrap();
        assert!((r.k - 2.0 * d).abs() < 1e-12);
        assert!((r.upper - d).abs() < 1e-12);
        assert!(r.lower_holds && !r.upper_holds);
    }

    #[test]
    fn random_instances_are_reproducible() {
        assert_eq!(OtInstance::random(5), OtInstance::random(5));
        let inst = OtInstance::random(5);
        assert!(inst.mu.validate().is_ok() && inst.nu.validate().is_ok());
        assert!(TRIAL_BETAS.contains(&inst.beta));
    }

    fn arb_measure(d: usize) -> impl Strategy<Value = DiscreteMeasure> {
        (1usize..6).prop_flat_map(move |n| {
            (
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), n),
                prop::collection::vec(0.05f64..1.0, n),
            )
                .prop_map(|(points, raw)| {
                    let s: f64 = raw.iter().sum();
                    let mut weights: Vec<f64> = raw.iter().map(|w| w / s).collect();
                    let rest: f64 = weights[1..].iter().sum();
                    weights[0] = 1.0 - rest;
                    DiscreteMeasure { points, weights }
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn w1_is_a_metric(a in arb_measure(2), b in arb_measure(2), c in arb_measure(2)) {
            let ab = w1(&a, &b).unwrap();
            let ba = w1(&b, &a).unwrap();
            let bc = w1(&b, &c).unwrap();
            let ac = w1(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!(w1(&a, &a).unwrap().abs() < 1e-9);
        }
    }
}
