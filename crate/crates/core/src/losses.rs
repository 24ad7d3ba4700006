//! β-cycleGAN objective. `x` lives in the artifact-free domain, `y` in the
//! artifact domain; `G: y → x` removes artifacts and `F: x → y` adds them.
//! Distances are mean absolute differences per pixel, averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionOverride;
use crate::error::{Error, Result};
use crate::networks::{discriminator_graph, generator_graph, BoundParams, DiscriminatorConfig, GeneratorConfig};
use crate::nn::{Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    /// Weights used on measured data.
    pub const REAL: LossWeights = LossWeights {
        lambda: 10.0,
        beta: 10.0,
        gamma: 1.0,
    };
    /// Weights used on synthetic data.
    pub const SYNTHETIC: LossWeights = LossWeights {
        lambda: 10.0,
        beta: 1.0,
        gamma: 5.0,
    };
    /// Weights for the small synthetic preset: the synthetic λ and β with a
    /// heavier identity term, which coarse 64×64 phantoms need to pass
    /// through unchanged.
    pub const TOY: LossWeights = LossWeights {
        lambda: 10.0,
        beta: 1.0,
        gamma: 20.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("loss weight {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Discriminator,
    Generator,
}

/// Unweighted cycle distances on each side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleComponents {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cycle_x: f64,
    pub cycle_y: f64,
    pub identity: f64,
    #[serde(rename = "adv_G")]
    pub adv_g: f64,
    #[serde(rename = "adv_F")]
    pub adv_f: f64,
    #[serde(rename = "disc_X")]
    pub disc_x: f64,
    #[serde(rename = "disc_Y")]
    pub disc_y: f64,
    #[serde(rename = "total_G")]
    pub total_g: f64,
    #[serde(rename = "total_D")]
    pub total_d: f64,
}

impl LossReport {
    pub fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("cycle_x", self.cycle_x),
            ("cycle_y", self.cycle_y),
            ("identity", self.identity),
            ("adv_G", self.adv_g),
            ("adv_F", self.adv_f),
            ("disc_X", self.disc_x),
            ("disc_Y", self.disc_y),
            ("total_G", self.total_g),
            ("total_D", self.total_d),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.fields().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("cannot compare {} and {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}

fn batch_distance(batch: &[Vec<f64>], map: impl Fn(&[f64]) -> Vec<f64>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        total += mean_abs_diff(s, &map(s))?;
    }
    Ok(total / batch.len() as f64)
}

/// `mean |x − G(F(x))| + (1/β)·mean |y − F(G(y))|`.
pub fn cycle_loss_beta(
    x_batch: &[Vec<f64>],
    y_batch: &[Vec<f64>],
    g: impl Fn(&[f64]) -> Vec<f64>,
    f: impl Fn(&[f64]) -> Vec<f64>,
    beta: f64,
) -> Result<(f64, CycleComponents)> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let x = batch_distance(x_batch, |s| g(&f(s)))?;
    let y = batch_distance(y_batch, |s| f(&g(s)))?;
    Ok((x + y / beta, CycleComponents { x, y }))
}

/// `mean |x − G(x)| + mean |y − F(y)|`.
pub fn identity_loss(
    x_batch: &[Vec<f64>],
    y_batch: &[Vec<f64>],
    g: impl Fn(&[f64]) -> Vec<f64>,
    f: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<f64> {
    Ok(batch_distance(x_batch, g)? + batch_distance(y_batch, f)?)
}

fn mean_sq(v: &[f64], target: f64) -> f64 {
    v.iter().map(|s| (s - target).powi(2)).sum::<f64>() / v.len() as f64
}

/// Least-squares adversarial loss. The generator role ignores `real`.
pub fn lsgan_losses(real: &[f64], fake: &[f64], role: Role) -> f64 {
    match role {
        Role::Discriminator => 0.5 * mean_sq(real, 1.0) + 0.5 * mean_sq(fake, 0.0),
        Role::Generator => mean_sq(fake, 1.0),
    }
}

/// `λ·(cycle_x + cycle_y/β) + adv_G + adv_F + γ·identity`.
pub fn compose_generator_loss(cycle: CycleComponents, adv_g: f64, adv_f: f64, identity: f64, w: &LossWeights) -> f64 {
    w.lambda * (cycle.x + cycle.y / w.beta) + (adv_g + adv_f) + w.gamma * identity
}

/// Nodes of the generator objective for one unpaired sample.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorObjective {
    pub cycle_x: Var,
    pub cycle_y: Var,
    pub identity_x: Var,
    pub identity_y: Var,
    pub adv_g: Var,
    pub adv_f: Var,
    pub total: Var,
}

/// Parameters of the four networks bound on one graph.
pub struct BoundModels<'a> {
    pub g: &'a BoundParams,
    pub f: &'a BoundParams,
    pub d_x: &'a BoundParams,
    pub d_y: &'a BoundParams,
    pub generator: &'a GeneratorConfig,
    pub discriminator: &'a DiscriminatorConfig,
}

/// Builds the full generator objective for clean sample `x` and artifact
/// sample `y` (both `[1, H, W]`).
pub fn generator_objective<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    y: Var,
    m: &BoundModels,
    w: &LossWeights,
) -> Result<GeneratorObjective> {
    w.validate()?;
    let ovr = AttentionOverride::default();
    let gy = generator_graph(g, y, m.g, m.generator, ovr)?;
    let fx = generator_graph(g, x, m.f, m.generator, ovr)?;
    let fgy = generator_graph(g, gy, m.f, m.generator, ovr)?;
    let gfx = generator_graph(g, fx, m.g, m.generator, ovr)?;
    let gx = generator_graph(g, x, m.g, m.generator, ovr)?;
    let fy = generator_graph(g, y, m.f, m.generator, ovr)?;
    let cycle_x = g.l1_mean(x, gfx);
    let cycle_y = g.l1_mean(y, fgy);
    let identity_x = g.l1_mean(x, gx);
    let identity_y = g.l1_mean(y, fy);
    let sx = discriminator_graph(g, gy, m.d_x, m.discriminator)?;
    let sy = discriminator_graph(g, fx, m.d_y, m.discriminator)?;
    let adv_g = g.mse_const(sx, 1.0);
    let adv_f = g.mse_const(sy, 1.0);
    let total = g.weighted_sum(&[
        (cycle_x, w.lambda),
        (cycle_y, w.lambda / w.beta),
        (adv_g, 1.0),
        (adv_f, 1.0),
        (identity_x, w.gamma),
        (identity_y, w.gamma),
    ]);
    Ok(GeneratorObjective {
        cycle_x,
        cycle_y,
        identity_x,
        identity_y,
        adv_g,
        adv_f,
        total,
    })
}

/// Discriminator objective on one real and one (detached) fake sample.
pub fn discriminator_objective<T: Real>(
    g: &mut Graph<T>,
    real: Var,
    fake: Var,
    d: &BoundParams,
    cfg: &DiscriminatorConfig,
) -> Result<Var> {
    let sr = discriminator_graph(g, real, d, cfg)?;
    let sf = discriminator_graph(g, fake, d, cfg)?;
    let lr = g.mse_const(sr, 1.0);
    let lf = g.mse_const(sf, 0.0);
    Ok(g.weighted_sum(&[(lr, 0.5), (lf, 0.5)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{init_parameters, ModelConfig, ParameterSet};
    use std::cell::Cell;
    use crate::nn::{gradient_check, Tensor};
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn lookup(table: &[(f64, f64)]) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
        move |s: &[f64]| {
            s.iter()
                .map(|v| table.iter().find(|(k, _)| k == v).map(|(_, o)| *o).unwrap())
                .collect()
        }
    }

    #[test]
    fn cycle_scalar_example() {
        // The example assigns F(1) two values (0.5 on the x side, 1.5 on the
        // y side), so F answers by call order: x side first.
        let calls = Cell::new(0);
        let f = |s: &[f64]| {
            calls.set(calls.get() + 1);
            vec![if calls.get() == 1 { 0.5 } else { 1.5 }; s.len()]
        };
        let g = lookup(&[(0.5, 0.8), (2.0, 1.0)]);
        let (l, c) = cycle_loss_beta(&[vec![1.0]], &[vec![2.0]], g, f, 10.0).unwrap();
        assert!((c.x - 0.2).abs() < 1e-15 && (c.y - 0.5).abs() < 1e-15);
        assert!((l - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cycle_identity_maps_vanish() {
        let id = |s: &[f64]| s.to_vec();
        let (l, c) = cycle_loss_beta(&[vec![0.3, -0.2]], &[vec![1.0, 2.0]], id, id, 3.0).unwrap();
        assert_eq!((l, c.x, c.y), (0.0, 0.0, 0.0));
        assert_eq!(identity_loss(&[vec![0.3]], &[vec![1.0]], id, id).unwrap(), 0.0);
    }

    #[test]
    fn cycle_beta_scaling() {
        let g = |s: &[f64]| s.iter().map(|v| 0.9 * v + 0.1).collect::<Vec<_>>();
        let f = |s: &[f64]| s.iter().map(|v| v * v).collect::<Vec<_>>();
        let xb = vec![vec![0.2, 0.7, -0.4]];
        let yb = vec![vec![1.2, -0.3, 0.5]];
        let (l1, c1) = cycle_loss_beta(&xb, &yb, g, f, 2.0).unwrap();
        let (l2, c2) = cycle_loss_beta(&xb, &yb, g, f, 4.0).unwrap();
        assert_eq!(c1, c2);
        assert!(((l1 - c1.x) / 2.0 - (l2 - c2.x)).abs() < 1e-15);
        assert!(cycle_loss_beta(&xb, &yb, g, f, 0.0).is_err());
        assert!(cycle_loss_beta(&xb, &[vec![1.0]], g, |s: &[f64]| s[..1].to_vec(), 1.0).is_err());
    }

    #[test]
    fn identity_example() {
        let g = lookup(&[(1.0, 0.9)]);
        let f = lookup(&[(0.0, 0.2)]);
        let l = identity_loss(&[vec![1.0]], &[vec![0.0]], g, f).unwrap();
        assert!((l - 0.3).abs() < 1e-15);
    }

    #[test]
    fn lsgan_examples() {
        assert_eq!(lsgan_losses(&[1.0; 4], &[0.0; 4], Role::Discriminator), 0.0);
        assert_eq!(lsgan_losses(&[0.3], &[1.0; 4], Role::Generator), 0.0);
        let mut rng = rng_from_seed(5);
        let real: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fake: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut oracle_d = 0.0;
        for r in &real {
            oracle_d += 0.5 * (r - 1.0) * (r - 1.0) / 16.0;
        }
        for f in &fake {
            oracle_d += 0.5 * f * f / 9.0;
        }
        let oracle_g: f64 = fake.iter().map(|f| (f - 1.0) * (f - 1.0)).sum::<f64>() / 9.0;
        assert!((lsgan_losses(&real, &fake, Role::Discriminator) - oracle_d).abs() < 1e-9);
        assert!((lsgan_losses(&real, &fake, Role::Generator) - oracle_g).abs() < 1e-9);
    }

    #[test]
    fn composition_examples() {
        let zero = CycleComponents { x: 0.0, y: 0.0 };
        assert_eq!(compose_generator_loss(zero, 0.0, 0.0, 0.0, &LossWeights::REAL), 0.0);
        let w = LossWeights {
            lambda: 10.0,
            beta: 1.0,
            gamma: 1.0,
        };
        let c = CycleComponents { x: 0.25, y: 0.0 };
        assert!((compose_generator_loss(c, 0.25, 0.25, 0.3, &w) - 3.3).abs() < 1e-12);
        assert_eq!((LossWeights::REAL.lambda, LossWeights::REAL.beta, LossWeights::REAL.gamma), (10.0, 10.0, 1.0));
        assert_eq!(
            (LossWeights::SYNTHETIC.lambda, LossWeights::SYNTHETIC.beta, LossWeights::SYNTHETIC.gamma),
            (10.0, 1.0, 5.0)
        );
        assert!(LossWeights { gamma: 0.0, ..w }.validate().is_err());
    }

    proptest! {
        #[test]
        fn larger_beta_never_increases_cycle(
            xs in prop::collection::vec(-1.0f64..1.0, 1..10),
            a in -2.0f64..2.0, b in -1.0f64..1.0,
            beta in 0.1f64..20.0, factor in 1.0f64..5.0,
        ) {
            let g = move |s: &[f64]| s.iter().map(|v| a * v + b).collect::<Vec<_>>();
            let f = |s: &[f64]| s.iter().map(|v| v.sin()).collect::<Vec<_>>();
            let ys: Vec<f64> = xs.iter().map(|v| v * 1.7).collect();
            let (l1, _) = cycle_loss_beta(&[xs.clone()], &[ys.clone()], g, f, beta).unwrap();
            let (l2, _) = cycle_loss_beta(&[xs], &[ys], g, f, beta * factor).unwrap();
            prop_assert!(l2 <= l1 + 1e-15);
        }
    }

    fn toy_models() -> (GeneratorConfig, DiscriminatorConfig, Vec<crate::networks::ParameterSet>) {
        let gc = GeneratorConfig {
            depth: 2,
            base_channels: 2,
            use_cbam: true,
            norm: true,
            reduction: 2,
        };
        let dc = DiscriminatorConfig::with_base(2);
        let sets = vec![
            init_parameters(&ModelConfig::Generator(gc), 1).unwrap(),
            init_parameters(&ModelConfig::Generator(gc), 2).unwrap(),
            init_parameters(&ModelConfig::Discriminator(dc.clone()), 3).unwrap(),
            init_parameters(&ModelConfig::Discriminator(dc.clone()), 4).unwrap(),
        ];
        (gc, dc, sets)
    }

    fn image(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        Tensor::new(vec![1, n, n], (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn graph_objective_matches_value_composition() {
        let (gc, dc, sets) = toy_models();
        let w = LossWeights::SYNTHETIC;
        let mut g = Graph::<f64>::new();
        let bound: Vec<BoundParams> = sets.iter().map(|s| s.bind(&mut g, true)).collect();
        let x = g.constant(image(16, 7));
        let y = g.constant(image(16, 8));
        let m = BoundModels {
            g: &bound[0],
            f: &bound[1],
            d_x: &bound[2],
            d_y: &bound[3],
            generator: &gc,
            discriminator: &dc,
        };
        let o = generator_objective(&mut g, x, y, &m, &w).unwrap();
        let c = CycleComponents {
            x: g.scalar(o.cycle_x),
            y: g.scalar(o.cycle_y),
        };
        let id = g.scalar(o.identity_x) + g.scalar(o.identity_y);
        let expected = compose_generator_loss(c, g.scalar(o.adv_g), g.scalar(o.adv_f), id, &w);
        assert!((g.scalar(o.total) - expected).abs() < 1e-9);
    }

    fn perturbed(sets: &[ParameterSet], seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = rng_from_seed(seed);
        sets.iter()
            .flat_map(|s| s.arrays.iter())
            .map(|a| {
                Tensor::new(
                    a.shape.clone(),
                    a.data.iter().map(|&v| v as f64 + rng.random_range(-0.05..0.05)).collect(),
                )
            })
            .collect()
    }

    fn split_bind(sets: &[ParameterSet], vars: &[Var]) -> Vec<BoundParams> {
        let mut out = Vec::new();
        let mut at = 0;
        for s in sets {
            let n = s.arrays.len();
            out.push(BoundParams::from_vars(s, vars[at..at + n].to_vec()));
            at += n;
        }
        out
    }

    #[test]
    fn generator_objective_gradients() {
        let (gc, dc, sets) = toy_models();
        let mut inputs = perturbed(&sets, 9);
        inputs.push(image(16, 10));
        inputs.push(image(16, 11));
        let n = inputs.len();
        let report = gradient_check(
            &inputs,
            |g, v| {
                let b = split_bind(&sets, &v[..n - 2]);
                let m = BoundModels {
                    g: &b[0],
                    f: &b[1],
                    d_x: &b[2],
                    d_y: &b[3],
                    generator: &gc,
                    discriminator: &dc,
                };
                generator_objective(g, v[n - 2], v[n - 1], &m, &LossWeights::REAL).unwrap().total
            },
            1e-6,
            2,
            12,
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn discriminator_objective_gradients() {
        let (_, dc, sets) = toy_models();
        let mut inputs = perturbed(&sets[2..3], 13);
        inputs.push(image(16, 14));
        inputs.push(image(16, 15));
        let n = inputs.len();
        let report = gradient_check(
            &inputs,
            |g, v| {
                let b = BoundParams::from_vars(&sets[2], v[..n - 2].to_vec());
                discriminator_objective(g, v[n - 2], v[n - 1], &b, &dc).unwrap()
            },
            1e-6,
            4,
            16,
        );
        assert!(report.passes(1e-4), "{report:?}");
    }
}
