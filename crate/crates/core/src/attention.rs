//! Convolutional block attention: a channel gate ("what") followed by a
//! spatial gate ("where"). In matrix form, with `Z ∈ ℝ^{HW×C}`, the output is
//! `Y = A Z T` where `T = diag(channel weights of Z)` and
//! `A = diag(spatial weights of Z T)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Real, Tensor, Var};
use crate::rng::rng_from_seed;

/// Features of one sample, stored channel-major (`[C, H, W]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height * width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map needs C ≥ 1 and HW ≥ 1, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature map entry {i}")));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds from the row-major `HW×C` matrix `Z`.
    pub fn from_matrix(height: usize, width: usize, channels: usize, z: &[f64]) -> Result<Self> {
        let n = height * width;
        if z.len() != n * channels {
            return Err(Error::ShapeMismatch(format!(
                "matrix has {} entries, expected {}",
                z.len(),
                n * channels
            )));
        }
        let mut data = vec![0.0; n * channels];
        for p in 0..n {
            for c in 0..channels {
                data[c * n + p] = z[p * channels + c];
            }
        }
        FeatureMap::new(channels, height, width, data)
    }

    /// Row-major `HW×C` matrix `Z`.
    pub fn to_matrix(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut z = vec![0.0; n * self.channels];
        for c in 0..self.channels {
            for p in 0..n {
                z[p * self.channels + c] = self.data[c * n + p];
            }
        }
        z
    }

    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }
}

pub const DEFAULT_REDUCTION: usize = 8;
pub const SPATIAL_KERNEL: usize = 7;

/// Shared two-layer MLP `C → C/r → C` with a ReLU between and no biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAttentionParams {
    pub channels: usize,
    pub hidden: usize,
    /// `hidden × channels`.
    pub mlp_hidden: Vec<f64>,
    /// `channels × hidden`.
    pub mlp_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialAttentionParams {
    /// `[1, 2, 7, 7]`: input channel 0 is the channel mean, 1 the channel max.
    pub kernel: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbamParams {
    pub channel: ChannelAttentionParams,
    pub spatial: SpatialAttentionParams,
}

/// Hidden width for `channels` at reduction ratio `r` (floored, at least 1).
pub fn hidden_width(channels: usize, r: usize) -> usize {
    (channels / r.max(1)).max(1)
}

pub(crate) fn xavier_uniform(rng: &mut crate::rng::Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-a..=a)).collect()
}

impl CbamParams {
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = hidden_width(channels, reduction);
        CbamParams {
            channel: ChannelAttentionParams {
                channels,
                hidden,
                mlp_hidden: vec![0.0; hidden * channels],
                mlp_out: vec![0.0; channels * hidden],
            },
            spatial: SpatialAttentionParams {
                kernel: vec![0.0; 2 * SPATIAL_KERNEL * SPATIAL_KERNEL],
                bias: 0.0,
            },
        }
    }

    pub fn random(channels: usize, reduction: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut p = CbamParams::zeros(channels, reduction);
        let h = p.channel.hidden;
        p.channel.mlp_hidden = xavier_uniform(&mut rng, channels, h, h * channels);
        p.channel.mlp_out = xavier_uniform(&mut rng, h, channels, h * channels);
        let kk = SPATIAL_KERNEL * SPATIAL_KERNEL;
        p.spatial.kernel = xavier_uniform(&mut rng, 2 * kk, kk, 2 * kk);
        p
    }

    fn check(&self, z: &FeatureMap) -> Result<()> {
        let c = &self.channel;
        if c.channels != z.channels
            || c.mlp_hidden.len() != c.hidden * c.channels
            || c.mlp_out.len() != c.hidden * c.channels
        {
            return Err(Error::ShapeMismatch(format!(
                "channel attention for {} channels applied to {} channels",
                c.channels, z.channels
            )));
        }
        if self.spatial.kernel.len() != 2 * SPATIAL_KERNEL * SPATIAL_KERNEL {
            return Err(Error::ShapeMismatch(format!(
                "spatial kernel has {} weights, expected {}",
                self.spatial.kernel.len(),
                2 * SPATIAL_KERNEL * SPATIAL_KERNEL
            )));
        }
        Ok(())
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> CbamVars {
        let c = &self.channel;
        let mut leaf = |shape: Vec<usize>, data: &[f64]| {
            let t = Tensor::new(shape, data.iter().map(|&v| T::from_f64(v)).collect());
            if trainable {
                g.param(t)
            } else {
                g.constant(t)
            }
        };
        CbamVars {
            mlp_hidden: leaf(vec![c.hidden, c.channels], &c.mlp_hidden),
            mlp_out: leaf(vec![c.channels, c.hidden], &c.mlp_out),
            kernel: leaf(vec![1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], &self.spatial.kernel),
            bias: leaf(vec![1], &[self.spatial.bias]),
        }
    }
}

/// CBAM parameters as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct CbamVars {
    pub mlp_hidden: Var,
    pub mlp_out: Var,
    pub kernel: Var,
    pub bias: Var,
}

/// Replaces the sigmoid gates with constants (test hook).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AttentionOverride {
    pub channel: Option<f64>,
    pub spatial: Option<f64>,
}

pub fn channel_gate<T: Real>(g: &mut Graph<T>, z: Var, p: &CbamVars) -> Var {
    let avg = g.spatial_mean(z);
    let max = g.spatial_max(z);
    let branch = |g: &mut Graph<T>, v: Var| {
        let h = g.linear(p.mlp_hidden, v, None);
        let h = g.relu(h);
        g.linear(p.mlp_out, h, None)
    };
    let a = branch(g, avg);
    let m = branch(g, max);
    let s = g.add(a, m);
    g.sigmoid(s)
}

pub fn spatial_gate<T: Real>(g: &mut Graph<T>, z: Var, p: &CbamVars) -> Var {
    let avg = g.channel_mean(z);
    let max = g.channel_max(z);
    let stacked = g.concat(&[avg, max]);
    let s = g.conv2d(stacked, p.kernel, Some(p.bias), 1, SPATIAL_KERNEL / 2);
    g.sigmoid(s)
}

/// Channel gate, then spatial gate on the channel-refined features.
pub fn cbam_graph<T: Real>(g: &mut Graph<T>, z: Var, p: &CbamVars, ovr: AttentionOverride) -> Var {
    let (c, h, w) = g.value(z).chw();
    let cw = match ovr.channel {
        Some(v) => g.constant(Tensor::filled(vec![c], T::from_f64(v))),
        None => channel_gate(g, z, p),
    };
    let refined = g.scale_channels(z, cw);
    let sw = match ovr.spatial {
        Some(v) => g.constant(Tensor::filled(vec![1, h, w], T::from_f64(v))),
        None => spatial_gate(g, refined, p),
    };
    g.scale_spatial(refined, sw)
}

/// Length-`C` channel weights in (0, 1).
pub fn channel_attention(z: &FeatureMap, params: &CbamParams) -> Result<Vec<f64>> {
    params.check(z)?;
    let mut g = Graph::<f64>::new();
    let p = params.bind(&mut g, false);
    let zv = g.constant(z.tensor());
    let out = channel_gate(&mut g, zv, &p);
    Ok(g.value(out).data.clone())
}

/// `H×W` spatial weights in (0, 1), row-major.
pub fn spatial_attention(z: &FeatureMap, params: &CbamParams) -> Result<Vec<f64>> {
    params.check(z)?;
    let mut g = Graph::<f64>::new();
    let p = params.bind(&mut g, false);
    let zv = g.constant(z.tensor());
    let out = spatial_gate(&mut g, zv, &p);
    Ok(g.value(out).data.clone())
}

pub fn cbam(z: &FeatureMap, params: &CbamParams) -> Result<FeatureMap> {
    cbam_with(z, params, AttentionOverride::default())
}

pub fn cbam_with(z: &FeatureMap, params: &CbamParams, ovr: AttentionOverride) -> Result<FeatureMap> {
    params.check(z)?;
    let mut g = Graph::<f64>::new();
    let p = params.bind(&mut g, false);
    let zv = g.constant(z.tensor());
    let out = cbam_graph(&mut g, zv, &p, ovr);
    FeatureMap::new(z.channels, z.height, z.width, g.value(out).data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;
    use proptest::prelude::*;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = rng_from_seed(seed);
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_parameters_give_half() {
        let z = random_map(5, 4, 3, 1);
        let p = CbamParams::zeros(5, 2);
        assert!(channel_attention(&z, &p).unwrap().iter().all(|&v| v == 0.5));
        assert!(spatial_attention(&z, &p).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_channels_double_the_mlp() {
        let p = CbamParams::random(4, 2, 3);
        let levels = [0.3, -1.2, 0.8, 2.0];
        let mut data = Vec::new();
        for l in levels {
            data.extend(std::iter::repeat(l).take(12));
        }
        let z = FeatureMap::new(4, 3, 4, data).unwrap();
        let got = channel_attention(&z, &p).unwrap();
        let mlp = mlp_by_hand(&p.channel, &levels);
        for c in 0..4 {
            assert!((got[c] - sigmoid(2.0 * mlp[c])).abs() < 1e-12);
        }
    }

    fn mlp_by_hand(p: &ChannelAttentionParams, v: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..p.hidden)
            .map(|r| (0..p.channels).map(|c| p.mlp_hidden[r * p.channels + c] * v[c]).sum::<f64>().max(0.0))
            .collect();
        (0..p.channels)
            .map(|c| (0..p.hidden).map(|r| p.mlp_out[c * p.hidden + r] * h[r]).sum())
            .collect()
    }

    #[test]
    fn channel_attention_hand_arithmetic() {
        // Four channels, r = 2, hand-specified MLP.
        let mut p = CbamParams::zeros(4, 2);
        p.channel.mlp_hidden = vec![0.5, -0.25, 0.1, 0.0, -0.3, 0.2, 0.4, -0.1];
        p.channel.mlp_out = vec![1.0, -0.5, 0.2, 0.3, -0.7, 0.6, 0.05, 0.9];
        let z = random_map(4, 3, 3, 7);
        let n = 9;
        let avg: Vec<f64> = (0..4).map(|c| z.data[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let max: Vec<f64> = (0..4)
            .map(|c| z.data[c * n..(c + 1) * n].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let (a, m) = (mlp_by_hand(&p.channel, &avg), mlp_by_hand(&p.channel, &max));
        let got = channel_attention(&z, &p).unwrap();
        for c in 0..4 {
            assert!((got[c] - sigmoid(a[c] + m[c])).abs() < 1e-6);
        }
    }

    #[test]
    fn spatial_attention_matches_dense_convolution() {
        let z = random_map(3, 8, 8, 2);
        let p = CbamParams::random(3, 2, 5);
        let mut p = p;
        p.spatial.bias = 0.17;
        let got = spatial_attention(&z, &p).unwrap();
        let n = 64;
        let pooled: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let vals: Vec<f64> = (0..3).map(|c| z.data[c * n + i]).collect();
                [vals.iter().sum::<f64>() / 3.0, vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)]
            })
            .collect();
        for r in 0..8i64 {
            for c in 0..8i64 {
                let mut acc = p.spatial.bias;
                for k in 0..2 {
                    for dr in -3..=3i64 {
                        for dc in -3..=3i64 {
                            let (rr, cc) = (r + dr, c + dc);
                            if (0..8).contains(&rr) && (0..8).contains(&cc) {
                                let w = p.spatial.kernel[(k * 7 + (dr + 3) as usize) * 7 + (dc + 3) as usize];
                                acc += w * pooled[(rr * 8 + cc) as usize][k];
                            }
                        }
                    }
                }
                assert!((got[(r * 8 + c) as usize] - sigmoid(acc)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_kernel_gives_sigmoid_of_bias() {
        let z = random_map(2, 5, 6, 3);
        let mut p = CbamParams::zeros(2, 8);
        p.spatial.bias = -0.8;
        for v in spatial_attention(&z, &p).unwrap() {
            assert!((v - sigmoid(-0.8)).abs() < 1e-15);
        }
    }

    #[test]
    fn forced_gates() {
        let z = random_map(3, 4, 4, 4);
        let p = CbamParams::random(3, 2, 1);
        let one = AttentionOverride {
            channel: Some(1.0),
            spatial: Some(1.0),
        };
        assert_eq!(cbam_with(&z, &p, one).unwrap(), z);
        let zero = AttentionOverride {
            channel: Some(0.0),
            spatial: Some(0.0),
        };
        assert!(cbam_with(&z, &p, zero).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cbam_is_the_composition() {
        let z = random_map(6, 5, 5, 8);
        let p = CbamParams::random(6, 2, 9);
        let cw = channel_attention(&z, &p).unwrap();
        let n = 25;
        let refined = FeatureMap::new(6, 5, 5, (0..6 * n).map(|i| z.data[i] * cw[i / n]).collect()).unwrap();
        let sw = spatial_attention(&refined, &p).unwrap();
        let out = cbam(&z, &p).unwrap();
        for i in 0..6 * n {
            assert!((out.data[i] - refined.data[i] * sw[i % n]).abs() < 1e-15);
        }
    }

    #[test]
    fn matrix_form_a_z_t() {
        let (c, h, w) = (3, 3, 4);
        let n = h * w;
        let z = random_map(c, h, w, 12);
        let p = CbamParams::random(c, 2, 13);
        let t = channel_attention(&z, &p).unwrap();
        let zm = z.to_matrix();
        let zt: Vec<f64> = (0..n * c).map(|i| zm[i] * t[i % c]).collect();
        let a = spatial_attention(&FeatureMap::from_matrix(h, w, c, &zt).unwrap(), &p).unwrap();
        // Explicit dense A (HW×HW) and T (C×C).
        let mut a_mat = vec![0.0; n * n];
        (0..n).for_each(|i| a_mat[i * n + i] = a[i]);
        let mut t_mat = vec![0.0; c * c];
        (0..c).for_each(|i| t_mat[i * c + i] = t[i]);
        let mut az = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                az[i * c + j] = (0..n).map(|k| a_mat[i * n + k] * zm[k * c + j]).sum();
            }
        }
        let mut azt = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                azt[i * c + j] = (0..c).map(|k| az[i * c + k] * t_mat[k * c + j]).sum();
            }
        }
        let y = cbam(&z, &p).unwrap().to_matrix();
        for (p, q) in y.iter().zip(&azt) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let z = random_map(3, 4, 4, 1);
        let p = CbamParams::zeros(4, 2);
        assert!(matches!(cbam(&z, &p), Err(Error::ShapeMismatch(_))));
        assert!(FeatureMap::new(2, 2, 2, vec![0.0; 7]).is_err());
        assert!(FeatureMap::new(1, 1, 2, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let z = random_map(8, 6, 6, 21);
        let p = CbamParams::random(8, 2, 22);
        let inputs = vec![
            z.tensor::<f64>(),
            Tensor::new(vec![p.channel.hidden, 8], p.channel.mlp_hidden.clone()),
            Tensor::new(vec![8, p.channel.hidden], p.channel.mlp_out.clone()),
            Tensor::new(vec![1, 2, 7, 7], p.spatial.kernel.clone()),
            Tensor::new(vec![1], vec![0.1]),
        ];
        let target = random_map(8, 6, 6, 23).tensor::<f64>();
        let report = gradient_check(
            &inputs,
            |g, v| {
                let vars = CbamVars {
                    mlp_hidden: v[1],
                    mlp_out: v[2],
                    kernel: v[3],
                    bias: v[4],
                };
                let y = cbam_graph(g, v[0], &vars, AttentionOverride::default());
                let t = g.constant(target.clone());
                let d = g.add(y, t);
                g.mse_const(d, 0.0)
            },
            1e-6,
            60,
            5,
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    proptest! {
        #[test]
        fn shape_preserved_and_bounded(c in 1usize..6, h in 1usize..7, w in 1usize..7, seed in 0u64..500) {
            let z = random_map(c, h, w, seed);
            let p = CbamParams::random(c, 2, seed + 1);
            let y = cbam(&z, &p).unwrap();
            prop_assert_eq!((y.channels, y.height, y.width), (c, h, w));
            for (a, b) in y.data.iter().zip(&z.data) {
                prop_assert!(a.abs() <= b.abs());
            }
            for v in spatial_attention(&z, &p).unwrap().into_iter().chain(channel_attention(&z, &p).unwrap()) {
                prop_assert!(v > 0.0 && v < 1.0);
            }
        }
    }
}
