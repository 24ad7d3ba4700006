//! PSNR/SSIM and the method comparison over the artifact and clean test splits.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classical::{run_baseline, BaselineMethod, BaselineOptions};
use crate::error::{Error, Result};
use crate::io;
use crate::networks::{load_model, ParameterSet};
use crate::synthesis::{DatasetManifest, MetalMask, SPLIT_TEST_ARTIFACT, SPLIT_TEST_CLEAN};
use crate::tomo::ImageGrid;
use crate::training::infer_with;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("metric inputs have {} and {} values", a.len(), b.len())));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(Error::InvalidArgument(format!("data range must be positive, got {data_range}")));
    }
    Ok(())
}

/// `10·log₁₀(range² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr_values(x: &[f64], reference: &[f64], data_range: f64) -> Result<f64> {
    same_len(x, reference)?;
    check_range(data_range)?;
    let mse = x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

pub fn psnr(x: &ImageGrid, reference: &ImageGrid, data_range: f64) -> Result<f64> {
    shapes_match(x, reference)?;
    psnr_values(&x.values, &reference.values, data_range)
}

fn shapes_match(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: SSIM_WINDOW,
            sigma: SSIM_SIGMA,
            k1: SSIM_K1,
            k2: SSIM_K2,
        }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output is `(h − k + 1) × (w − k + 1)`.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..n).map(|t| k[t] * img[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..n).map(|t| k[t] * rows[(r + t) * wo + c]).sum();
        }
    }
    out
}

/// Mean local SSIM over every window position fully inside the image.
pub fn ssim_values(x: &[f64], y: &[f64], height: usize, width: usize, data_range: f64, p: &SsimParams) -> Result<f64> {
    same_len(x, y)?;
    check_range(data_range)?;
    if x.len() != height * width {
        return Err(Error::ShapeMismatch(format!("{} values for {height}x{width}", x.len())));
    }
    if height < p.window || width < p.window {
        return Err(Error::ShapeMismatch(format!(
            "image {height}x{width} is smaller than the {}x{} SSIM window",
            p.window, p.window
        )));
    }
    let k = gaussian_kernel(p.window, p.sigma);
    let c1 = (p.k1 * data_range).powi(2);
    let c2 = (p.k2 * data_range).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = filter_valid(x, height, width, &k);
    let my = filter_valid(y, height, width, &k);
    let sxx = filter_valid(&prod(x, x), height, width, &k);
    let syy = filter_valid(&prod(y, y), height, width, &k);
    let sxy = filter_valid(&prod(x, y), height, width, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cov = sxy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

pub fn ssim(x: &ImageGrid, reference: &ImageGrid, data_range: f64, p: &SsimParams) -> Result<f64> {
    shapes_match(x, reference)?;
    ssim_values(&x.values, &reference.values, x.height, x.width, data_range, p)
}

/// Clips both images to the reference window and scores them with the window
/// width as data range.
pub fn windowed_metrics(x: &ImageGrid, reference: &ImageGrid, p: &SsimParams) -> Result<(f64, f64)> {
    shapes_match(x, reference)?;
    let (lo, hi) = reference.window;
    let clip = |img: &ImageGrid| img.values.iter().map(|v| v.clamp(lo, hi)).collect::<Vec<f64>>();
    let (a, b) = (clip(x), clip(reference));
    let range = hi - lo;
    Ok((
        psnr_values(&a, &b, range)?,
        ssim_values(&a, &b, x.height, x.width, range, p)?,
    ))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub split: String,
    pub images: Vec<String>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

impl MetricsRecord {
    pub fn new(method: &str, split: &str, images: Vec<String>, psnr: Vec<f64>, ssim: Vec<f64>) -> Result<Self> {
        if psnr.is_empty() || psnr.len() != ssim.len() || psnr.len() != images.len() {
            return Err(Error::InvalidArgument(format!("no metrics for {method} on {split}")));
        }
        let (psnr_mean, psnr_std) = mean_std(&psnr);
        let (ssim_mean, ssim_std) = mean_std(&ssim);
        Ok(MetricsRecord {
            method: method.to_string(),
            split: split.to_string(),
            images,
            psnr,
            ssim,
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
        })
    }
}

/// One column of the comparison.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodSpec {
    Input,
    Baseline(BaselineMethod),
    Model { name: String, generator: ParameterSet },
}

impl MethodSpec {
    pub fn model(name: &str, checkpoint: &Path) -> Result<Self> {
        Ok(MethodSpec::Model {
            name: name.to_string(),
            generator: load_model(checkpoint, "G")?,
        })
    }

    pub fn name(&self) -> String {
        match self {
            MethodSpec::Input => "Input".to_string(),
            MethodSpec::Baseline(m) => m.to_string(),
            MethodSpec::Model { name, .. } => name.clone(),
        }
    }

    fn apply(&self, image: &ImageGrid, mask: &MetalMask, ctx: &EvalContext) -> Result<ImageGrid> {
        match self {
            MethodSpec::Input => Ok(image.clone()),
            MethodSpec::Baseline(m) => run_baseline(image, mask, &ctx.manifest.geometry, *m, &ctx.baseline),
            MethodSpec::Model { generator, .. } => infer_with(image, generator),
        }
    }
}

struct EvalContext {
    root: PathBuf,
    manifest: DatasetManifest,
    baseline: BaselineOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    #[serde(default)]
    pub ssim: SsimParams,
    /// Number of test cases that get a PNG montage.
    #[serde(default)]
    pub montage_cases: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ssim: SsimParams::default(),
            montage_cases: 0,
        }
    }
}

pub const ARTIFACT_TABLE: &str = "table_artifact.csv";
pub const CLEAN_TABLE: &str = "table_clean.csv";
pub const PER_IMAGE: &str = "metrics_per_image.csv";

struct Case {
    name: String,
    input: ImageGrid,
    reference: ImageGrid,
    mask: MetalMask,
}

fn load_cases(ctx: &EvalContext, split: &str) -> Result<Vec<Case>> {
    let entries = ctx.manifest.split(split);
    if entries.is_empty() {
        return Err(Error::Dataset(format!("test split {split} is empty")));
    }
    entries
        .iter()
        .map(|e| {
            let input = io::read_image(&ctx.root.join(&e.file))?;
            let (reference, mask) = match (&e.ground_truth, &e.mask) {
                (Some(gt), Some(mk)) => (
                    io::read_image(&ctx.root.join(gt))?,
                    MetalMask::from_image(&io::read_image(&ctx.root.join(mk))?),
                ),
                _ => (input.clone(), MetalMask::empty(input.height, input.width)),
            };
            Ok(Case {
                name: e.file.clone(),
                input,
                reference,
                mask,
            })
        })
        .collect()
}

/// Scores every method on the artifact split (against the metal-free ground
/// truth) and on the clean split (against the input itself), writing
/// per-image metrics, both tables and optional montages into `out_dir`.
pub fn evaluate_methods(
    manifest_path: &Path,
    methods: &[MethodSpec],
    baseline: &BaselineOptions,
    opts: &EvalOptions,
    out_dir: &Path,
) -> Result<Vec<MetricsRecord>> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods to evaluate".into()));
    }
    let (root, manifest) = DatasetManifest::load(manifest_path)?;
    let ctx = EvalContext {
        root,
        manifest,
        baseline: baseline.clone(),
    };
    fs::create_dir_all(out_dir)?;
    let mut per_image = csv::Writer::from_path(out_dir.join(PER_IMAGE))?;
    per_image.write_record(["split", "method", "image", "psnr", "ssim"])?;
    let mut records = Vec::new();
    for (split, table) in [(SPLIT_TEST_ARTIFACT, ARTIFACT_TABLE), (SPLIT_TEST_CLEAN, CLEAN_TABLE)] {
        let cases = load_cases(&ctx, split)?;
        let mut outputs: Vec<Vec<ImageGrid>> = Vec::with_capacity(methods.len());
        let mut split_records = Vec::with_capacity(methods.len());
        for m in methods {
            let (mut ps, mut ss, mut names, mut outs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for c in &cases {
                let out = m.apply(&c.input, &c.mask, &ctx)?;
                let (p, s) = windowed_metrics(&out, &c.reference, &opts.ssim)?;
                per_image.write_record([split, &m.name(), &c.name, &p.to_string(), &s.to_string()])?;
                ps.push(p);
                ss.push(s);
                names.push(c.name.clone());
                if outs.len() < opts.montage_cases {
                    outs.push(out);
                }
            }
            split_records.push(MetricsRecord::new(&m.name(), split, names, ps, ss)?);
            outputs.push(outs);
        }
        write_table(&out_dir.join(table), &split_records)?;
        for (k, c) in cases.iter().take(opts.montage_cases).enumerate() {
            let panels: Vec<&ImageGrid> = outputs.iter().map(|o| &o[k]).collect();
            let path = out_dir.join("montage").join(format!("{split}_{k:03}.png"));
            write_montage(&path, &c.input, &panels, &c.reference)?;
        }
        records.extend(split_records);
    }
    per_image.flush()?;
    Ok(records)
}

pub fn write_table(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["Algorithm", "PSNR", "PSNR_std", "SSIM", "SSIM_std", "N"])?;
    for r in records {
        w.write_record([
            r.method.clone(),
            format!("{:.4}", r.psnr_mean),
            format!("{:.4}", r.psnr_std),
            format!("{:.6}", r.ssim_mean),
            format!("{:.6}", r.ssim_std),
            r.psnr.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TableRow {
    #[serde(rename = "Algorithm")]
    pub algorithm: String,
    #[serde(rename = "PSNR")]
    pub psnr: f64,
    #[serde(rename = "PSNR_std")]
    pub psnr_std: f64,
    #[serde(rename = "SSIM")]
    pub ssim: f64,
    #[serde(rename = "SSIM_std")]
    pub ssim_std: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

pub fn read_table(path: &Path) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<TableRow>, _>>()?;
    Ok(rows)
}

/// Markdown rendering of a table file.
pub fn markdown_table(title: &str, rows: &[TableRow]) -> String {
    let mut s = format!("### {title}\n\n| Algorithm | PSNR (dB) | SSIM |\n|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.2} ± {:.2} | {:.4} ± {:.4} |\n",
            r.algorithm, r.psnr, r.psnr_std, r.ssim, r.ssim_std
        ));
    }
    s
}

/// Row of panels: input, each method output, reference, then the absolute
/// difference between the input and each output.
pub fn write_montage(path: &Path, input: &ImageGrid, outputs: &[&ImageGrid], reference: &ImageGrid) -> Result<()> {
    let (lo, hi) = reference.window;
    let (h, w) = (reference.height, reference.width);
    let to_u8 = |v: f64, lo: f64, hi: f64| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut panels: Vec<Vec<u8>> = Vec::new();
    panels.push(input.values.iter().map(|&v| to_u8(v, lo, hi)).collect());
    for o in outputs {
        panels.push(o.values.iter().map(|&v| to_u8(v, lo, hi)).collect());
    }
    panels.push(reference.values.iter().map(|&v| to_u8(v, lo, hi)).collect());
    for o in outputs {
        panels.push(
            input
                .values
                .iter()
                .zip(&o.values)
                .map(|(a, b)| to_u8((a.clamp(lo, hi) - b.clamp(lo, hi)).abs(), 0.0, 0.25 * (hi - lo)))
                .collect(),
        );
    }
    let total_w = panels.len() * w;
    let mut data = vec![0u8; total_w * h];
    for (k, p) in panels.iter().enumerate() {
        for r in 0..h {
            data[r * total_w + k * w..r * total_w + (k + 1) * w].copy_from_slice(&p[r * w..(r + 1) * w]);
        }
    }
    io::write_png8(path, total_w, h, &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    /// Direct 2D-window SSIM, independent of the separable filter.
    fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize, range: f64) -> f64 {
        let n = 11usize;
        let mut win = vec![0.0; n * n];
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                win[i * n + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                total += win[i * n + j];
            }
        }
        let c1 = (0.01 * range) * (0.01 * range);
        let c2 = (0.03 * range) * (0.03 * range);
        let mut acc = 0.0;
        let mut count = 0.0;
        for r in 0..=h - n {
            for c in 0..=w - n {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wt = win[i * n + j] / total;
                        mx += wt * x[(r + i) * w + c + j];
                        my += wt * y[(r + i) * w + c + j];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wt = win[i * n + j] / total;
                        let a = x[(r + i) * w + c + j] - mx;
                        let b = y[(r + i) * w + c + j] - my;
                        vx += wt * a * a;
                        vy += wt * b * b;
                        cov += wt * a * b;
                    }
                }
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        acc / count
    }

    fn random_pair(h: usize, w: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let a: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let b = a.iter().map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect();
        (a, b)
    }

    #[test]
    fn psnr_examples() {
        let a = vec![0.3; 64];
        assert_eq!(psnr_values(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr_values(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr_values(&a, &b[..10], 1.0).is_err());
        assert!(psnr_values(&a, &b, 0.0).is_err());
        let (x, y) = random_pair(16, 16, 3);
        let mse: f64 = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / 256.0;
        assert!((psnr_values(&x, &y, 2.0).unwrap() - 10.0 * (4.0 / mse).log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_examples() {
        let p = SsimParams::default();
        let (x, y) = random_pair(20, 24, 1);
        assert_eq!(ssim_values(&x, &x, 20, 24, 1.0, &p).unwrap(), 1.0);
        // Constant images: only the luminance term survives.
        let (c, d) = (0.4, 0.25);
        let a = vec![c; 144];
        let b = vec![c + d; 144];
        let c1 = (0.01f64).powi(2);
        let c2 = (0.03f64).powi(2);
        let closed = ((2.0 * c * (c + d) + c1) * c2) / ((c * c + (c + d) * (c + d) + c1) * c2);
        assert!((ssim_values(&a, &b, 12, 12, 1.0, &p).unwrap() - closed).abs() < 1e-9);
        assert!(ssim_values(&x[..100], &y[..100], 10, 10, 1.0, &p).is_err());
    }

    #[test]
    fn metrics_match_oracles_on_random_pairs() {
        for seed in 0..20 {
            let (h, w) = (16 + (seed as usize % 5), 18 + (seed as usize % 3));
            let (x, y) = random_pair(h, w, seed);
            let got = ssim_values(&x, &y, h, w, 1.0, &SsimParams::default()).unwrap();
            assert!((got - ssim_oracle(&x, &y, h, w, 1.0)).abs() < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn metric_properties() {
        let (x, y) = random_pair(16, 16, 9);
        let p = SsimParams::default();
        let a = ssim_values(&x, &y, 16, 16, 1.0, &p).unwrap();
        let b = ssim_values(&y, &x, 16, 16, 1.0, &p).unwrap();
        assert!((a - b).abs() < 1e-15);
        let shift = |v: &[f64]| v.iter().map(|q| q + 0.37).collect::<Vec<_>>();
        let p1 = psnr_values(&x, &y, 1.0).unwrap();
        let p2 = psnr_values(&shift(&x), &shift(&y), 1.0).unwrap();
        assert!((p1 - p2).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn record_aggregates() {
        let r = MetricsRecord::new("m", "s", vec!["a".into(), "b".into()], vec![20.0, 30.0], vec![0.5, 0.7]).unwrap();
        assert_eq!(r.psnr_mean, 25.0);
        assert!((r.ssim_mean - 0.6).abs() < 1e-15);
        assert_eq!(r.psnr_std, 5.0);
        assert!(MetricsRecord::new("m", "s", vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn windowed_metrics_clip_to_the_window() {
        let img = ImageGrid::new(12, 12, vec![0.03; 144], 1.0, (0.0, 0.06)).unwrap();
        let mut hot = img.clone();
        hot.values[5] = 5.0;
        let mut clipped = img.clone();
        clipped.values[5] = 0.06;
        let p = SsimParams::default();
        assert_eq!(windowed_metrics(&hot, &img, &p).unwrap(), windowed_metrics(&clipped, &img, &p).unwrap());
        assert_eq!(windowed_metrics(&img, &img, &p).unwrap(), (PSNR_CAP, 1.0));
    }

    #[test]
    fn tables_round_trip_and_montage() {
        let dir = tempfile::tempdir().unwrap();
        let r = MetricsRecord::new("LI", "s", vec!["a".into()], vec![21.5], vec![0.75]).unwrap();
        let path = dir.path().join("t.csv");
        write_table(&path, &[r]).unwrap();
        let rows = read_table(&path).unwrap();
        assert_eq!(rows[0].algorithm, "LI");
        assert_eq!(rows[0].psnr, 21.5);
        assert!(markdown_table("T", &rows).contains("| LI | 21.50 ± 0.00 | 0.7500 ± 0.0000 |"));
        let img = ImageGrid::new(8, 8, vec![0.02; 64], 1.0, (0.0, 0.06)).unwrap();
        let m = dir.path().join("m.png");
        write_montage(&m, &img, &[&img, &img], &img).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(&m).unwrap()));
        let reader = decoder.read_info().unwrap();
        assert_eq!((reader.info().width, reader.info().height), (8 * 6, 8));
    }
}
