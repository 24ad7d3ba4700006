//! Metal artifact synthesis: material decomposition, metal insertion,
//! polychromatic projection (beam hardening), Poisson noise and FBP, plus the
//! unpaired dataset builder.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::phantom;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tomo::{
    fbp_reconstruct, forward_project, FilterKind, ImageGrid, ProjectionGeometry, Sinogram,
};

/// Attenuation (mm⁻¹) of the three materials at a single energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialAttenuation {
    pub water: f64,
    pub bone: f64,
    pub metal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumModel {
    /// Bin energies in keV.
    pub energies: Vec<f64>,
    pub weights: Vec<f64>,
    pub mu_water: Vec<f64>,
    pub mu_bone: Vec<f64>,
    pub mu_metal: Vec<f64>,
    /// Energy at which clean images are expressed.
    pub reference_energy: f64,
    pub reference: MaterialAttenuation,
}

impl Default for SpectrumModel {
    /// Five bins over 40–120 keV. Water and cortical bone follow tabulated
    /// mass attenuation; the metal is titanium-shaped, scaled to 20× water at
    /// 70 keV.
    fn default() -> Self {
        SpectrumModel {
            energies: vec![40.0, 60.0, 80.0, 100.0, 120.0],
            weights: vec![0.15, 0.30, 0.28, 0.18, 0.09],
            mu_water: vec![0.02683, 0.02059, 0.01837, 0.01707, 0.01614],
            mu_bone: vec![0.1278, 0.0604, 0.0428, 0.0356, 0.0325],
            mu_metal: vec![1.594, 0.5516, 0.2917, 0.1959, 0.1548],
            reference_energy: 70.0,
            reference: MaterialAttenuation {
                water: 0.01946,
                bone: 0.0509,
                metal: 0.3892,
            },
        }
    }
}

impl SpectrumModel {
    /// Single bin at the reference energy: projection becomes linear.
    pub fn monochromatic() -> Self {
        let d = SpectrumModel::default();
        SpectrumModel {
            energies: vec![d.reference_energy],
            weights: vec![1.0],
            mu_water: vec![d.reference.water],
            mu_bone: vec![d.reference.bone],
            mu_metal: vec![d.reference.metal],
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.energies.len();
        if k == 0 {
            return Err(Error::InvalidSpectrum("no energy bins".into()));
        }
        for (name, v) in [
            ("weights", &self.weights),
            ("mu_water", &self.mu_water),
            ("mu_bone", &self.mu_bone),
            ("mu_metal", &self.mu_metal),
        ] {
            if v.len() != k {
                return Err(Error::InvalidSpectrum(format!(
                    "{name} has {} entries for {k} energies",
                    v.len()
                )));
            }
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidSpectrum("negative weight".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpectrum(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        for (name, mu) in [
            ("mu_water", &self.mu_water),
            ("mu_bone", &self.mu_bone),
            ("mu_metal", &self.mu_metal),
        ] {
            if mu.iter().any(|m| !(*m > 0.0)) {
                return Err(Error::InvalidSpectrum(format!("{name} must be positive")));
            }
            if mu.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::InvalidSpectrum(format!(
                    "{name} must decrease with energy"
                )));
            }
        }
        if self.energies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSpectrum("energies must increase".into()));
        }
        Ok(())
    }

    /// `−ln Σ_k w_k exp(−Σ_m μ_{m,k} L_m)` for material path lengths
    /// `(water, bone, metal)`, evaluated as a log-sum-exp.
    pub fn effective_projection(&self, water: f64, bone: f64, metal: f64) -> f64 {
        let exponents: Vec<f64> = (0..self.energies.len())
            .map(|k| {
                self.weights[k].ln()
                    - (self.mu_water[k] * water + self.mu_bone[k] * bone + self.mu_metal[k] * metal)
            })
            .collect();
        let m = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = exponents.iter().map(|e| (e - m).exp()).sum();
        -(m + s.ln())
    }

    /// Water-equivalent path length producing polychromatic projection `p`.
    fn water_thickness(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return 0.0;
        }
        let mu_max = self.mu_water.iter().cloned().fold(0.0, f64::max);
        let mu_min = self.mu_water.iter().cloned().fold(f64::INFINITY, f64::min);
        // p(t) is increasing and concave with slope in [mu_min, mu_max].
        let mut lo = p / mu_max;
        let mut hi = p / mu_min;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.effective_projection(mid, 0.0, 0.0) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * hi.max(1.0) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetalMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub components: usize,
}

impl MetalMask {
    pub fn empty(height: usize, width: usize) -> Self {
        MetalMask {
            height,
            width,
            mask: vec![false; height * width],
            components: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn as_image(&self, spacing: f64) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            values: self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            spacing,
            window: (0.0, 1.0),
        }
    }

    pub fn from_image(image: &ImageGrid) -> Self {
        let mask: Vec<bool> = image.values.iter().map(|&v| v > 0.5).collect();
        let (components, _) = connected_components(&mask, image.height, image.width);
        MetalMask {
            height: image.height,
            width: image.width,
            mask,
            components,
        }
    }
}

/// 4-connected component labelling; returns the count and per-component areas.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> (usize, Vec<usize>) {
    let mut label = vec![usize::MAX; mask.len()];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = areas.len();
        let mut area = 0;
        label[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            area += 1;
            let (r, c) = (p / width, p % width);
            let mut push = |q: usize| {
                if mask[q] && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if r > 0 {
                push(p - width);
            }
            if r + 1 < height {
                push(p + width);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < width {
                push(p + 1);
            }
        }
        areas.push(area);
    }
    (areas.len(), areas)
}

/// Volume fractions per pixel; `1 − Σ` is air.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialMap {
    pub height: usize,
    pub width: usize,
    pub water: Vec<f64>,
    pub bone: Vec<f64>,
    pub metal: Vec<f64>,
}

/// Soft-threshold decomposition. Below `low` a pixel is water scaled by
/// density (`v / low`), above `high` it is bone, and in between the two
/// fractions ramp linearly. With `(low, high)` equal to the reference water and
/// bone attenuations this reproduces the image exactly up to `high`.
pub fn segment_materials(image: &ImageGrid, thresholds: (f64, f64)) -> Result<MaterialMap> {
    let (low, high) = thresholds;
    if !(low < high) || low <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "segmentation thresholds must satisfy 0 < low < high, got {thresholds:?}"
        )));
    }
    if let Some(i) = image.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("image pixel {i}")));
    }
    let n = image.values.len();
    let mut water = vec![0.0; n];
    let mut bone = vec![0.0; n];
    for (i, &v) in image.values.iter().enumerate() {
        if v <= low {
            water[i] = (v / low).clamp(0.0, 1.0);
        } else if v >= high {
            bone[i] = 1.0;
        } else {
            let t = (v - low) / (high - low);
            water[i] = 1.0 - t;
            bone[i] = t;
        }
    }
    Ok(MaterialMap {
        height: image.height,
        width: image.width,
        water,
        bone,
        metal: vec![0.0; n],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetalShapeConfig {
    /// Semi-axis range as a fraction of image width.
    pub min_axis_frac: f64,
    pub max_axis_frac: f64,
    pub max_attempts: usize,
}

impl Default for MetalShapeConfig {
    fn default() -> Self {
        MetalShapeConfig {
            min_axis_frac: 0.02,
            max_axis_frac: 0.06,
            max_attempts: 2000,
        }
    }
}

const BODY_MARGIN: usize = 2;

/// True when every masked pixel has only body pixels within `BODY_MARGIN`.
fn inside_with_margin(mask: &[bool], values: &[f64], threshold: f64, h: usize, w: usize) -> bool {
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (r, c) = (i / w, i % w);
        for rr in r.saturating_sub(BODY_MARGIN)..(r + BODY_MARGIN + 1).min(h) {
            for cc in c.saturating_sub(BODY_MARGIN)..(c + BODY_MARGIN + 1).min(w) {
                if values[rr * w + cc] <= threshold {
                    return false;
                }
            }
        }
    }
    true
}

/// Inserts one or two (equally likely) random metal ellipses at the
/// reference metal attenuation. When the image has pixels above
/// `body_threshold`, centres are drawn from them and every metal pixel must
/// sit at least two pixels inside that region.
pub fn insert_metal(
    image: &ImageGrid,
    metal_value: f64,
    body_threshold: f64,
    shape: &MetalShapeConfig,
    rng_seed: u64,
) -> Result<(ImageGrid, MetalMask)> {
    let (h, w) = (image.height, image.width);
    let mut rng = rng_from_seed(rng_seed);
    let count = if rng.random_bool(0.5) { 1 } else { 2 };
    let body: Vec<usize> = (0..h * w)
        .filter(|&i| image.values[i] > body_threshold)
        .collect();
    let side = w.min(h) as f64;

    for _ in 0..shape.max_attempts {
        let mut mask = vec![false; h * w];
        for _ in 0..count {
            let (r0, c0) = if body.is_empty() {
                (
                    rng.random_range(0.25..0.75) * h as f64,
                    rng.random_range(0.25..0.75) * w as f64,
                )
            } else {
                let p = body[rng.random_range(0..body.len())];
                (
                    (p / w) as f64 + rng.random_range(-0.5..0.5),
                    (p % w) as f64 + rng.random_range(-0.5..0.5),
                )
            };
            let a = side * rng.random_range(shape.min_axis_frac..=shape.max_axis_frac);
            let b = side * rng.random_range(shape.min_axis_frac..=shape.max_axis_frac);
            let phi = rng.random_range(0.0..std::f64::consts::PI);
            let (s, c) = phi.sin_cos();
            for r in 0..h {
                for col in 0..w {
                    let dy = r as f64 - r0;
                    let dx = col as f64 - c0;
                    let u = dx * c + dy * s;
                    let v = -dx * s + dy * c;
                    if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                        mask[r * w + col] = true;
                    }
                }
            }
        }
        let (components, areas) = connected_components(&mask, h, w);
        let touches_edge = (0..h).any(|r| mask[r * w] || mask[r * w + w - 1])
            || (0..w).any(|c| mask[c] || mask[(h - 1) * w + c]);
        let outside_body = !body.is_empty() && !inside_with_margin(&mask, &image.values, body_threshold, h, w);
        if components != count || areas.iter().any(|&a| a < 4) || touches_edge || outside_body {
            continue;
        }
        let values = image
            .values
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { metal_value } else { v })
            .collect();
        return Ok((
            image.with_values(values),
            MetalMask {
                height: h,
                width: w,
                mask,
                components,
            },
        ));
    }
    Err(Error::PlacementFailed {
        attempts: shape.max_attempts,
        height: h,
        width: w,
    })
}

/// Beam-hardened projection of a material map with metal at `mask`.
pub fn polychromatic_project(
    materials: &MaterialMap,
    mask: &MetalMask,
    spectrum: &SpectrumModel,
    geom: &ProjectionGeometry,
) -> Result<Sinogram> {
    spectrum.validate()?;
    if materials.height != mask.height || materials.width != mask.width {
        return Err(Error::ShapeMismatch(format!(
            "material map {}x{} vs mask {}x{}",
            materials.height, materials.width, mask.height, mask.width
        )));
    }
    let mut water = materials.water.clone();
    let mut bone = materials.bone.clone();
    let mut metal = materials.metal.clone();
    for (i, &m) in mask.mask.iter().enumerate() {
        if m {
            water[i] = 0.0;
            bone[i] = 0.0;
            metal[i] = 1.0;
        }
    }
    let as_image = |v: Vec<f64>| ImageGrid {
        height: materials.height,
        width: materials.width,
        values: v,
        spacing: geom.pixel_spacing,
        window: (0.0, 1.0),
    };
    let lw = forward_project(&as_image(water), geom)?;
    let lb = forward_project(&as_image(bone), geom)?;
    let lm = forward_project(&as_image(metal), geom)?;
    let values = (0..lw.values.len())
        .map(|i| spectrum.effective_projection(lw.values[i], lb.values[i], lm.values[i]))
        .collect();
    Sinogram::new(values, geom.clone())
}

/// Replaces each line integral with `−ln(max(N, 1) / I₀)` where
/// `N ~ Poisson(I₀ e^{−p})`.
pub fn add_poisson_noise(sino: &Sinogram, incident_photons: f64, rng_seed: u64) -> Result<Sinogram> {
    if !(incident_photons > 0.0) || !incident_photons.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "incident photon count must be positive and finite, got {incident_photons}"
        )));
    }
    if let Some(v) = sino.values.iter().find(|v| **v < -1e-9) {
        return Err(Error::InvalidArgument(format!(
            "sinogram values must be non-negative, found {v}"
        )));
    }
    let mut rng = rng_from_seed(rng_seed);
    let values = sino
        .values
        .iter()
        .map(|&p| {
            let mean = incident_photons * (-p.max(0.0)).exp();
            let counts = if mean > 0.0 {
                Poisson::new(mean).map(|d| d.sample(&mut rng)).unwrap_or(mean)
            } else {
                0.0
            };
            -(counts.max(1.0) / incident_photons).ln()
        })
        .collect();
    Sinogram::new(values, sino.geometry.clone())
}

/// Maps each polychromatic projection to the water-equivalent line integral
/// at the reference energy (first-order water beam-hardening correction).
pub fn water_precorrect(sino: &Sinogram, spectrum: &SpectrumModel) -> Sinogram {
    let mu_ref = spectrum.reference.water;
    sino.with_values(
        sino.values
            .iter()
            .map(|&p| mu_ref * spectrum.water_thickness(p))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub spectrum: SpectrumModel,
    /// `None` disables photon noise.
    pub incident_photons: Option<f64>,
    pub thresholds: (f64, f64),
    pub metal: MetalShapeConfig,
    pub filter: FilterKind,
    pub water_correction: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        let spectrum = SpectrumModel::default();
        let thresholds = (spectrum.reference.water, spectrum.reference.bone);
        SynthesisConfig {
            spectrum,
            incident_photons: Some(1e6),
            thresholds,
            metal: MetalShapeConfig::default(),
            filter: FilterKind::Hann,
            water_correction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub artifact: ImageGrid,
    pub clean: ImageGrid,
    pub mask: MetalMask,
}

/// Full synthesis for one clean image. `insert` disables metal insertion
/// when false (the degenerate pipeline used for calibration).
pub fn synthesize_case_with(
    clean: &ImageGrid,
    config: &SynthesisConfig,
    geom: &ProjectionGeometry,
    rng_seed: u64,
    insert: bool,
) -> Result<SynthCase> {
    clean.validate()?;
    let spectrum = &config.spectrum;
    let materials = segment_materials(clean, config.thresholds)?;
    let mask = if insert {
        insert_metal(
            clean,
            spectrum.reference.metal,
            0.5 * spectrum.reference.water,
            &config.metal,
            derive_seed(rng_seed, "metal", 0),
        )?
        .1
    } else {
        MetalMask::empty(clean.height, clean.width)
    };
    let mut sino = polychromatic_project(&materials, &mask, spectrum, geom)?;
    if let Some(i0) = config.incident_photons {
        sino = add_poisson_noise(&sino, i0, derive_seed(rng_seed, "noise", 0))?;
    }
    if config.water_correction {
        sino = water_precorrect(&sino, spectrum);
    }
    let rec = fbp_reconstruct(&sino, config.filter);
    let artifact = ImageGrid {
        spacing: clean.spacing,
        window: clean.window,
        ..rec
    };
    Ok(SynthCase {
        artifact,
        clean: clean.clone(),
        mask,
    })
}

pub fn synthesize_case(
    clean: &ImageGrid,
    config: &SynthesisConfig,
    geom: &ProjectionGeometry,
    rng_seed: u64,
) -> Result<SynthCase> {
    synthesize_case_with(clean, config, geom, rng_seed, true)
}

/// Sizes of the four disjoint splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCounts {
    pub train_artifact: usize,
    pub train_clean: usize,
    pub test_artifact: usize,
    pub test_clean: usize,
}

impl DatasetCounts {
    pub fn total(&self) -> usize {
        self.train_artifact + self.train_clean + self.test_artifact + self.test_clean
    }
}

impl Default for DatasetCounts {
    /// 2:1 artifact:clean training ratio.
    fn default() -> Self {
        DatasetCounts {
            train_artifact: 800,
            train_clean: 400,
            test_artifact: 100,
            test_clean: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path stem relative to the dataset root.
    pub file: String,
    pub source: String,
    pub seed: u64,
    pub header_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub geometry: ProjectionGeometry,
    pub synthesis: SynthesisConfig,
    pub counts: DatasetCounts,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

pub const SPLIT_TRAIN_ARTIFACT: &str = "train_artifact";
pub const SPLIT_TRAIN_CLEAN: &str = "train_clean";
pub const SPLIT_TEST_ARTIFACT: &str = "test_artifact";
pub const SPLIT_TEST_CLEAN: &str = "test_clean";
pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<(PathBuf, DatasetManifest)> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        if !file.exists() {
            return Err(Error::Dataset(format!(
                "manifest {} does not exist",
                file.display()
            )));
        }
        let manifest: DatasetManifest = io::read_json(&file)?;
        let root = file
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((root, manifest))
    }

    pub fn split(&self, name: &str) -> &[ManifestEntry] {
        self.splits.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn manifest_hash(&self) -> Result<String> {
        Ok(io::sha256_hex(&serde_json::to_vec(self)?))
    }
}

/// Lists clean source images in `dir` (`*.json` array stems or 16-bit PNGs),
/// sorted by file name.
pub fn list_sources(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!(
            "source directory {} does not exist",
            dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("json") | Some("png")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!(
            "source directory {} contains no images",
            dir.display()
        )));
    }
    Ok(files)
}

pub fn load_source(path: &Path, window: (f64, f64), spacing: f64) -> Result<ImageGrid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => io::import_external(path, io::ExternalFormat::Png16, window, spacing),
        _ => io::read_image(&path.with_extension("")),
    }
}

/// Writes `count` random phantoms into `dir` as array files.
pub fn write_phantoms(
    dir: &Path,
    count: usize,
    size: usize,
    pixel_spacing: f64,
    spectrum: &SpectrumModel,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for i in 0..count {
        let img = phantom::random_body(size, pixel_spacing, spectrum, derive_seed(seed, "phantom", i as u64));
        io::write_image(&dir.join(format!("phantom_{i:05}")), &img, "clean")?;
    }
    Ok(())
}

/// Builds the unpaired training pools and the paired test splits.
pub fn build_dataset(
    clean_dir: &Path,
    out_dir: &Path,
    counts: DatasetCounts,
    synthesis: &SynthesisConfig,
    geom: &ProjectionGeometry,
    seed: u64,
) -> Result<DatasetManifest> {
    synthesis.spectrum.validate()?;
    let mut sources = list_sources(clean_dir)?;
    if sources.len() < counts.total() {
        return Err(Error::Dataset(format!(
            "{} source images available but {} requested",
            sources.len(),
            counts.total()
        )));
    }
    // Deterministic Fisher-Yates over the sorted listing.
    let mut rng = rng_from_seed(derive_seed(seed, "split", 0));
    for i in (1..sources.len()).rev() {
        let j = rng.random_range(0..=i);
        sources.swap(i, j);
    }
    fs::create_dir_all(out_dir).map_err(|e| {
        Error::Dataset(format!("cannot create {}: {e}", out_dir.display()))
    })?;

    let config_hash = io::sha256_hex(&serde_json::to_vec(&(synthesis, geom, counts, seed))?);
    let window = crate::phantom::DEFAULT_WINDOW;
    let mut splits: BTreeMap<String, Vec<ManifestEntry>> = BTreeMap::new();
    let mut cursor = 0usize;
    let mut take = |n: usize| {
        let s = &sources[cursor..cursor + n];
        cursor += n;
        s.to_vec()
    };
    let layout = [
        (SPLIT_TRAIN_ARTIFACT, take(counts.train_artifact), true),
        (SPLIT_TRAIN_CLEAN, take(counts.train_clean), false),
        (SPLIT_TEST_ARTIFACT, take(counts.test_artifact), true),
        (SPLIT_TEST_CLEAN, take(counts.test_clean), false),
    ];
    for (split, files, with_metal) in layout {
        let mut entries = Vec::with_capacity(files.len());
        for (i, src) in files.iter().enumerate() {
            let clean = load_source(src, window, geom.pixel_spacing)?;
            let source = src
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let case_seed = derive_seed(seed, split, i as u64);
            let rel = format!("{split}/{i:05}");
            let stem = out_dir.join(&rel);
            let mut entry = ManifestEntry {
                file: rel.clone(),
                source,
                seed: case_seed,
                header_sha256: String::new(),
                ground_truth: None,
                mask: None,
            };
            if with_metal {
                let case = synthesize_case(&clean, synthesis, geom, case_seed)?;
                entry.header_sha256 = io::write_image(&stem, &case.artifact, "artifact")?;
                if split == SPLIT_TEST_ARTIFACT {
                    let gt = format!("{split}_gt/{i:05}");
                    let mk = format!("{split}_mask/{i:05}");
                    io::write_image(&out_dir.join(&gt), &case.clean, "ground_truth")?;
                    io::write_image(&out_dir.join(&mk), &case.mask.as_image(clean.spacing), "mask")?;
                    entry.ground_truth = Some(gt);
                    entry.mask = Some(mk);
                }
            } else {
                entry.header_sha256 = io::write_image(&stem, &clean, "clean")?;
            }
            entries.push(entry);
        }
        splits.insert(split.to_string(), entries);
    }

    let manifest = DatasetManifest {
        version: 1,
        seed,
        config_hash,
        geometry: geom.clone(),
        synthesis: synthesis.clone(),
        counts,
        splits,
    };
    io::write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
