//! U-Net generator with CBAM-gated skips and a PatchGAN discriminator, their
//! parameter sets and on-disk checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{cbam_graph, hidden_width, xavier_uniform, AttentionOverride, CbamVars, SPATIAL_KERNEL};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{Graph, Real, Tensor, Var};
use crate::rng::rng_from_seed;
use crate::tomo::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub use_cbam: bool,
    pub norm: bool,
    pub reduction: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            depth: 4,
            base_channels: 32,
            use_cbam: true,
            norm: true,
            reduction: crate::attention::DEFAULT_REDUCTION,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!("generator depth must be ≥ 2, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.reduction == 0 {
            return Err(Error::InvalidArgument(
                "base_channels and reduction must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Inputs must be divisible by this factor along both axes.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Output channels of the four stride-2 convolutions.
    pub channels: [usize; 4],
    /// Width of the final per-patch dense layer.
    pub dense_width: usize,
    pub norm: bool,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: [32, 64, 128, 256],
            dense_width: 1,
            norm: true,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn with_base(base: usize) -> Self {
        DiscriminatorConfig {
            channels: [base, 2 * base, 4 * base, 8 * base],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) || self.dense_width == 0 {
            return Err(Error::InvalidArgument("discriminator widths must be positive".into()));
        }
        Ok(())
    }
}

pub const DISC_MIN_SIZE: usize = 16;
const DISC_KERNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zero,
    One,
}

/// Named parameter arrays of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub config: ModelConfig,
    pub init: String,
    pub arrays: Vec<ParamArray>,
}

impl ParameterSet {
    pub fn count(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.arrays.iter().map(|a| a.data.len()).collect()
    }

    /// Checks names and shapes against the layout implied by the config.
    pub fn validate(&self) -> Result<()> {
        let expected = layout(&self.config)?;
        if expected.len() != self.arrays.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter set has {} arrays, config implies {}",
                self.arrays.len(),
                expected.len()
            )));
        }
        for ((name, shape, _), a) in expected.iter().zip(&self.arrays) {
            if *name != a.name || *shape != a.shape || a.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    a.name, a.shape, name, shape
                )));
            }
        }
        Ok(())
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let values: Vec<Tensor<T>> = self
            .arrays
            .iter()
            .map(|a| Tensor::new(a.shape.clone(), a.data.iter().map(|&v| T::from_f64(v as f64)).collect()))
            .collect();
        self.bind_values(g, values, trainable)
    }

    /// Binds explicit values (same order and shapes as `arrays`).
    pub fn bind_values<T: Real>(&self, g: &mut Graph<T>, values: Vec<Tensor<T>>, trainable: bool) -> BoundParams {
        assert_eq!(values.len(), self.arrays.len());
        let mut index = HashMap::with_capacity(values.len());
        let mut vars = Vec::with_capacity(values.len());
        for (a, t) in self.arrays.iter().zip(values) {
            let v = if trainable { g.param(t) } else { g.constant(t) };
            index.insert(a.name.clone(), vars.len());
            vars.push(v);
        }
        BoundParams { vars, index }
    }
}

/// Parameter set bound to graph nodes.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Wraps nodes already on a graph, in the order of `set.arrays`.
    pub fn from_vars(set: &ParameterSet, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), set.arrays.len());
        let index = set.arrays.iter().enumerate().map(|(i, a)| (a.name.clone(), i)).collect();
        BoundParams { vars, index }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))]
    }

    fn maybe(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }
}

type Layout = Vec<(String, Vec<usize>, Init)>;

fn conv_entries(out: &mut Layout, prefix: &str, cin: usize, cout: usize, k: usize, transposed: bool) {
    let shape = if transposed {
        vec![cin, cout, k, k]
    } else {
        vec![cout, cin, k, k]
    };
    out.push((
        format!("{prefix}.w"),
        shape,
        Init::Xavier {
            fan_in: cin * k * k,
            fan_out: cout * k * k,
        },
    ));
    out.push((format!("{prefix}.b"), vec![cout], Init::Zero));
}

fn norm_entries(out: &mut Layout, prefix: &str, c: usize) {
    out.push((format!("{prefix}.gamma"), vec![c], Init::One));
    out.push((format!("{prefix}.beta"), vec![c], Init::Zero));
}

fn block_entries(out: &mut Layout, prefix: &str, cin: usize, cout: usize, norm: bool) {
    conv_entries(out, &format!("{prefix}.conv1"), cin, cout, 3, false);
    if norm {
        norm_entries(out, &format!("{prefix}.bn1"), cout);
    }
    conv_entries(out, &format!("{prefix}.conv2"), cout, cout, 3, false);
    if norm {
        norm_entries(out, &format!("{prefix}.bn2"), cout);
    }
}

fn layout(config: &ModelConfig) -> Result<Layout> {
    let mut out = Vec::new();
    match config {
        ModelConfig::Generator(cfg) => {
            cfg.validate()?;
            let d = cfg.depth;
            for l in 0..d {
                let cin = if l == 0 { 1 } else { cfg.channels(l - 1) };
                block_entries(&mut out, &format!("enc{l}"), cin, cfg.channels(l), cfg.norm);
            }
            for l in (0..d - 1).rev() {
                let c = cfg.channels(l);
                conv_entries(&mut out, &format!("up{l}"), cfg.channels(l + 1), c, 3, true);
                if cfg.norm {
                    norm_entries(&mut out, &format!("up{l}.bn"), c);
                }
                if cfg.use_cbam {
                    let h = hidden_width(c, cfg.reduction);
                    let kk = SPATIAL_KERNEL * SPATIAL_KERNEL;
                    let p = format!("skip{l}.cbam");
                    out.push((format!("{p}.mlp_hidden"), vec![h, c], Init::Xavier { fan_in: c, fan_out: h }));
                    out.push((format!("{p}.mlp_out"), vec![c, h], Init::Xavier { fan_in: h, fan_out: c }));
                    out.push((
                        format!("{p}.kernel"),
                        vec![1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL],
                        Init::Xavier {
                            fan_in: 2 * kk,
                            fan_out: kk,
                        },
                    ));
                    out.push((format!("{p}.bias"), vec![1], Init::Zero));
                }
                block_entries(&mut out, &format!("dec{l}"), 2 * c, c, cfg.norm);
            }
            conv_entries(&mut out, "out", cfg.channels(0), 1, 1, false);
        }
        ModelConfig::Discriminator(cfg) => {
            cfg.validate()?;
            let mut cin = 1;
            for (i, &c) in cfg.channels.iter().enumerate() {
                conv_entries(&mut out, &format!("conv{i}"), cin, c, DISC_KERNEL, false);
                if cfg.norm && i > 0 {
                    norm_entries(&mut out, &format!("bn{i}"), c);
                }
                cin = c;
            }
            conv_entries(&mut out, "dense", cin, cfg.dense_width, 1, false);
        }
    }
    Ok(out)
}

/// Xavier-uniform weights, zero biases, unit norm scales; deterministic per seed.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    let mut rng = rng_from_seed(seed);
    let arrays = layout(config)?
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Xavier { fan_in, fan_out } => xavier_uniform(&mut rng, fan_in, fan_out, n)
                    .into_iter()
                    .map(|v| v as f32)
                    .collect(),
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
            };
            ParamArray { name, shape, data }
        })
        .collect();
    Ok(ParameterSet {
        config: config.clone(),
        init: format!("xavier-uniform weights, zero biases, seed {seed}"),
        arrays,
    })
}

fn conv_block<T: Real>(g: &mut Graph<T>, x: Var, p: &BoundParams, prefix: &str, norm: bool) -> Var {
    let mut h = x;
    for i in 1..=2 {
        let c = format!("{prefix}.conv{i}");
        h = g.conv2d(h, p.get(&format!("{c}.w")), p.maybe(&format!("{c}.b")), 1, 1);
        h = g.relu(h);
        if norm {
            let n = format!("{prefix}.bn{i}");
            h = g.norm(h, p.get(&format!("{n}.gamma")), p.get(&format!("{n}.beta")));
        }
    }
    h
}

fn check_generator_input(cfg: &GeneratorConfig, h: usize, w: usize) -> Result<()> {
    let m = cfg.size_multiple();
    if h % m != 0 || w % m != 0 || h < m || w < m {
        return Err(Error::ShapeMismatch(format!(
            "generator of depth {} needs sides divisible by {m}, got {h}x{w}",
            cfg.depth
        )));
    }
    Ok(())
}

/// Builds the generator on `g` for input `x` (`[1, H, W]`).
pub fn generator_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    cfg: &GeneratorConfig,
    ovr: AttentionOverride,
) -> Result<Var> {
    let (c, h, w) = g.value(x).chw();
    if c != 1 {
        return Err(Error::ShapeMismatch(format!("generator expects 1 channel, got {c}")));
    }
    check_generator_input(cfg, h, w)?;
    let d = cfg.depth;
    let mut skips = Vec::with_capacity(d - 1);
    let mut h_var = x;
    for l in 0..d {
        h_var = conv_block(g, h_var, p, &format!("enc{l}"), cfg.norm);
        if l + 1 < d {
            skips.push(h_var);
            h_var = g.avg_pool2(h_var);
        }
    }
    for l in (0..d - 1).rev() {
        let up = format!("up{l}");
        let mut u = g.conv_transpose2d(h_var, p.get(&format!("{up}.w")), p.maybe(&format!("{up}.b")), 2, 1, 1);
        u = g.relu(u);
        if cfg.norm {
            u = g.norm(u, p.get(&format!("{up}.bn.gamma")), p.get(&format!("{up}.bn.beta")));
        }
        let mut skip = skips[l];
        if cfg.use_cbam {
            let pre = format!("skip{l}.cbam");
            let vars = CbamVars {
                mlp_hidden: p.get(&format!("{pre}.mlp_hidden")),
                mlp_out: p.get(&format!("{pre}.mlp_out")),
                kernel: p.get(&format!("{pre}.kernel")),
                bias: p.get(&format!("{pre}.bias")),
            };
            skip = cbam_graph(g, skip, &vars, ovr);
        }
        let cat = g.concat(&[skip, u]);
        h_var = conv_block(g, cat, p, &format!("dec{l}"), cfg.norm);
    }
    Ok(g.conv2d(h_var, p.get("out.w"), p.maybe("out.b"), 1, 0))
}

/// Builds the discriminator on `g`; the result is an `[dense_width, H/16, W/16]`
/// map of patch scores.
pub fn discriminator_graph<T: Real>(g: &mut Graph<T>, x: Var, p: &BoundParams, cfg: &DiscriminatorConfig) -> Result<Var> {
    let (c, h, w) = g.value(x).chw();
    if c != 1 {
        return Err(Error::ShapeMismatch(format!("discriminator expects 1 channel, got {c}")));
    }
    if h < DISC_MIN_SIZE || w < DISC_MIN_SIZE {
        return Err(Error::ShapeMismatch(format!(
            "discriminator needs at least {DISC_MIN_SIZE}x{DISC_MIN_SIZE}, got {h}x{w}"
        )));
    }
    let mut hv = x;
    for i in 0..cfg.channels.len() {
        let pre = format!("conv{i}");
        hv = g.conv2d(hv, p.get(&format!("{pre}.w")), p.maybe(&format!("{pre}.b")), 2, 1);
        if cfg.norm && i > 0 {
            hv = g.norm(hv, p.get(&format!("bn{i}.gamma")), p.get(&format!("bn{i}.beta")));
        }
        hv = g.leaky_relu(hv, cfg.leaky_slope);
    }
    Ok(g.conv2d(hv, p.get("dense.w"), p.maybe("dense.b"), 1, 0))
}

fn generator_config(params: &ParameterSet) -> Result<&GeneratorConfig> {
    match &params.config {
        ModelConfig::Generator(c) => Ok(c),
        ModelConfig::Discriminator(_) => Err(Error::ShapeMismatch(
            "expected generator parameters, found a discriminator".into(),
        )),
    }
}

/// Runs the generator on an image already in network units. Per-sample
/// normalisation statistics are used in both modes, so `mode` does not
/// change the result.
pub fn generator_forward(image: &ImageGrid, params: &ParameterSet, config: &GeneratorConfig, mode: Mode) -> Result<ImageGrid> {
    let _ = mode;
    if generator_config(params)? != config {
        return Err(Error::ShapeMismatch("parameter set was built for a different generator config".into()));
    }
    params.validate()?;
    check_generator_input(config, image.height, image.width)?;
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(Tensor::new(
        vec![1, image.height, image.width],
        image.values.iter().map(|&v| v as f32).collect(),
    ));
    let y = generator_graph(&mut g, x, &bound, config, AttentionOverride::default())?;
    let values: Vec<f64> = g.value(y).data.iter().map(|&v| v as f64).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generator output".into()));
    }
    Ok(image.with_values(values))
}

/// Patch scores as a row-major `H'×W'` map (first dense output channel).
pub fn discriminator_forward(image: &ImageGrid, params: &ParameterSet, config: &DiscriminatorConfig) -> Result<(usize, usize, Vec<f64>)> {
    if params.config != ModelConfig::Discriminator(config.clone()) {
        return Err(Error::ShapeMismatch("parameter set was built for a different discriminator config".into()));
    }
    params.validate()?;
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(Tensor::new(
        vec![1, image.height, image.width],
        image.values.iter().map(|&v| v as f32).collect(),
    ));
    let y = discriminator_graph(&mut g, x, &bound, config)?;
    let (_, h, w) = g.value(y).chw();
    Ok((h, w, g.value(y).data[..h * w].iter().map(|&v| v as f64).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub config: ModelConfig,
    pub init: String,
    pub parameter_count: usize,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub step: u64,
    pub models: BTreeMap<String, ModelEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `models` into `dir`: one manifest plus one little-endian f32 file per
/// array.
pub fn save_checkpoint(dir: &Path, step: u64, models: &[(&str, &ParameterSet)], extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = BTreeMap::new();
    for (model, params) in models {
        if params.arrays.iter().any(|a| a.data.iter().any(|v| !v.is_finite())) {
            log::warn!("checkpoint model {model} contains non-finite parameters");
        }
        let mut arrays = Vec::with_capacity(params.arrays.len());
        for a in &params.arrays {
            let file = format!("{model}.{}.bin", a.name);
            let bytes = f32_bytes(&a.data);
            fs::write(dir.join(&file), &bytes)?;
            arrays.push(ArrayEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                file,
                sha256: io::sha256_hex(&bytes),
            });
        }
        entries.insert(
            model.to_string(),
            ModelEntry {
                config: params.config.clone(),
                init: params.init.clone(),
                parameter_count: params.count(),
                arrays,
            },
        );
    }
    let manifest = CheckpointManifest {
        version: 1,
        step,
        models: entries,
        extra,
    };
    io::write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)?;
    Ok(())
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    if !path.exists() {
        return Err(Error::Checkpoint(format!("no checkpoint manifest at {}", path.display())));
    }
    io::read_json(&path)
}

/// Loads one model's arrays; files of other models are never opened.
pub fn load_model(dir: &Path, model: &str) -> Result<ParameterSet> {
    let manifest = read_checkpoint_manifest(dir)?;
    let entry = manifest
        .models
        .get(model)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no model {model}")))?;
    let mut arrays = Vec::with_capacity(entry.arrays.len());
    for a in &entry.arrays {
        let path = dir.join(&a.file);
        let bytes = fs::read(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let expected = a.shape.iter().product::<usize>() as u64 * 4;
        if bytes.len() as u64 != expected {
            return Err(Error::LengthMismatch {
                path: path.clone(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        let actual = io::sha256_hex(&bytes);
        if actual != a.sha256 {
            return Err(Error::HashMismatch {
                path: path.clone(),
                expected: a.sha256.clone(),
                actual,
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push(ParamArray {
            name: a.name.clone(),
            shape: a.shape.clone(),
            data,
        });
    }
    let params = ParameterSet {
        config: entry.config.clone(),
        init: entry.init.clone(),
        arrays,
    };
    params.validate()?;
    Ok(params)
}
