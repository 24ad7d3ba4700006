//! Sinogram-domain metal artifact reduction baselines: linear interpolation
//! (LI) and normalized MAR (NMAR).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthesis::MetalMask;
use crate::tomo::{fbp_reconstruct, forward_project, FilterKind, ImageGrid, ProjectionGeometry, Sinogram};

/// Rays that intersect metal, one flag per sinogram entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetalTrace {
    pub num_views: usize,
    pub num_bins: usize,
    pub mask: Vec<bool>,
}

impl MetalTrace {
    pub fn empty(num_views: usize, num_bins: usize) -> Self {
        MetalTrace {
            num_views,
            num_bins,
            mask: vec![false; num_views * num_bins],
        }
    }

    pub fn row(&self, view: usize) -> &[bool] {
        &self.mask[view * self.num_bins..(view + 1) * self.num_bins]
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    fn check(&self, sino: &Sinogram) -> Result<()> {
        let g = &sino.geometry;
        if g.num_views != self.num_views || g.num_bins != self.num_bins {
            return Err(Error::GeometryMismatch(format!(
                "trace is {}x{}, sinogram is {}x{}",
                self.num_views, self.num_bins, g.num_views, g.num_bins
            )));
        }
        Ok(())
    }
}

const TRACE_EPS: f64 = 1e-9;

pub fn metal_trace(mask: &MetalMask, geom: &ProjectionGeometry) -> Result<MetalTrace> {
    if mask.is_empty() {
        log::warn!("metal mask is empty; returning an empty metal trace");
        geom.validate()?;
        return Ok(MetalTrace::empty(geom.num_views, geom.num_bins));
    }
    let sino = forward_project(&mask.as_image(geom.pixel_spacing), geom)?;
    Ok(MetalTrace {
        num_views: geom.num_views,
        num_bins: geom.num_bins,
        mask: sino.values.iter().map(|&v| v > TRACE_EPS).collect(),
    })
}

/// Fills masked runs of one row in place. Interior runs get the straight
/// line between their two unmasked neighbours; runs touching an edge repeat
/// the single available neighbour; a fully masked row becomes zero.
fn interpolate_row(row: &mut [f64], masked: &[bool]) {
    let n = row.len();
    let mut i = 0;
    while i < n {
        if !masked[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && masked[i] {
            i += 1;
        }
        let end = i; // exclusive
        let left = start.checked_sub(1).map(|l| row[l]);
        let right = (end < n).then(|| row[end]);
        match (left, right) {
            (Some(a), Some(b)) => {
                let span = (end - start + 1) as f64;
                for k in start..end {
                    let t = (k - start + 1) as f64 / span;
                    row[k] = a + t * (b - a);
                }
            }
            (Some(a), None) => row[start..end].iter_mut().for_each(|v| *v = a),
            (None, Some(b)) => row[start..end].iter_mut().for_each(|v| *v = b),
            (None, None) => row[start..end].iter_mut().for_each(|v| *v = 0.0),
        }
    }
}

pub fn li_interpolate(sino: &Sinogram, trace: &MetalTrace) -> Result<Sinogram> {
    trace.check(sino)?;
    let mut out = sino.clone();
    for v in 0..trace.num_views {
        interpolate_row(out.row_mut(v), trace.row(v));
    }
    Ok(out)
}

/// NMAR: normalise by the prior's projection, interpolate, denormalise.
pub fn nmar(sino: &Sinogram, prior: &ImageGrid, trace: &MetalTrace, geom: &ProjectionGeometry) -> Result<Sinogram> {
    trace.check(sino)?;
    if sino.geometry != *geom {
        return Err(Error::GeometryMismatch(
            "sinogram geometry differs from the NMAR geometry".into(),
        ));
    }
    let prior_proj = forward_project(prior, geom)?;
    let peak = prior_proj.values.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(
            "NMAR prior has no positive projection".into(),
        ));
    }
    let floor = 1e-6 * peak;
    let norm: Vec<f64> = prior_proj.values.iter().map(|&p| p.max(floor)).collect();
    normalized_interpolate(sino, &norm, trace)
}

fn normalized_interpolate(sino: &Sinogram, norm: &[f64], trace: &MetalTrace) -> Result<Sinogram> {
    let normalized = sino.with_values(sino.values.iter().zip(norm).map(|(s, n)| s / n).collect());
    let interpolated = li_interpolate(&normalized, trace)?;
    let values = (0..sino.values.len())
        .map(|i| {
            if trace.mask[i] {
                interpolated.values[i] * norm[i]
            } else {
                sino.values[i]
            }
        })
        .collect();
    Ok(sino.with_values(values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Li,
    Nmar,
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "li" => Ok(BaselineMethod::Li),
            "nmar" => Ok(BaselineMethod::Nmar),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMethod::Li => "LI",
            BaselineMethod::Nmar => "NMAR",
        })
    }
}

/// Parameters of the NMAR tissue-class prior and the reconstruction filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineOptions {
    pub filter: FilterKind,
    /// Soft-tissue value written into the prior.
    pub water: f64,
    /// Below this the prior is air.
    pub air_threshold: f64,
    /// Above this the prior keeps the smoothed value (bone).
    pub bone_threshold: f64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        let water = crate::synthesis::SpectrumModel::default().reference.water;
        BaselineOptions {
            filter: FilterKind::Hann,
            water,
            air_threshold: 0.5 * water,
            bone_threshold: 1.35 * water,
        }
    }
}

fn smooth3(image: &ImageGrid) -> ImageGrid {
    let (h, w) = (image.height, image.width);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for cc in c.saturating_sub(1)..(c + 2).min(w) {
                    acc += image.values[rr * w + cc];
                    n += 1.0;
                }
            }
            out[r * w + c] = acc / n;
        }
    }
    image.with_values(out)
}

/// Three-class prior from an LI reconstruction: air to zero, soft tissue to
/// water, bone kept.
pub fn nmar_prior(li_image: &ImageGrid, opts: &BaselineOptions) -> ImageGrid {
    smooth3(li_image).map(|v| {
        if v < opts.air_threshold {
            0.0
        } else if v < opts.bone_threshold {
            opts.water
        } else {
            v
        }
    })
}

pub fn run_baseline(
    artifact: &ImageGrid,
    mask: &MetalMask,
    geom: &ProjectionGeometry,
    method: BaselineMethod,
    opts: &BaselineOptions,
) -> Result<ImageGrid> {
    if mask.height != artifact.height || mask.width != artifact.width {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs image {}x{}",
            mask.height, mask.width, artifact.height, artifact.width
        )));
    }
    let sino = forward_project(artifact, geom)?;
    let trace = metal_trace(mask, geom)?;
    let li = li_interpolate(&sino, &trace)?;
    let repaired = match method {
        BaselineMethod::Li => li,
        BaselineMethod::Nmar => {
            let li_image = fbp_reconstruct(&li, opts.filter);
            let prior = nmar_prior(&li_image, opts);
            nmar(&sino, &prior, &trace, geom)?
        }
    };
    let rec = fbp_reconstruct(&repaired, opts.filter);
    let values = rec
        .values
        .iter()
        .zip(&mask.mask)
        .zip(&artifact.values)
        .map(|((&r, &m), &a)| if m { a } else { r })
        .collect();
    Ok(artifact.with_values(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tomo::disk;
    use rand::Rng as _;

    fn geom(n: usize, views: usize) -> ProjectionGeometry {
        ProjectionGeometry::parallel(n, views, 1.0).unwrap()
    }

    #[test]
    fn centred_disk_trace_covers_central_bins() {
        let g = geom(32, 30);
        let d = disk(32, 1.0, 4.0, 1.0);
        let trace = metal_trace(&MetalMask::from_image(&d), &g).unwrap();
        let nb = g.num_bins;
        let centre = (0..nb)
            .min_by(|&a, &b| g.bin_offset(a).abs().partial_cmp(&g.bin_offset(b).abs()).unwrap())
            .unwrap();
        for v in 0..g.num_views {
            assert!(trace.row(v)[centre]);
            assert!(!trace.row(v)[0] && !trace.row(v)[nb - 1]);
        }
    }

    #[test]
    fn empty_mask_gives_empty_trace() {
        let g = geom(16, 8);
        let t = metal_trace(&MetalMask::empty(16, 16), &g).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.mask.len(), 8 * g.num_bins);
    }

    /// A ray meets the open support of a pixel's bilinear tent iff its
    /// detector offset is within `ps (|cos| + |sin|)` of the pixel centre.
    #[test]
    fn trace_matches_support_oracle() {
        let n = 16;
        let g = geom(n, 17);
        let mut rng = rng_from_seed(4);
        let mask: Vec<bool> = (0..n * n).map(|_| rng.random_bool(0.05)).collect();
        let mm = MetalMask {
            height: n,
            width: n,
            mask: mask.clone(),
            components: 0,
        };
        let trace = metal_trace(&mm, &g).unwrap();
        let centre = 0.5 * (n as f64 - 1.0);
        let mut checked = 0;
        for v in 0..g.num_views {
            let (s, c) = g.angles[v].sin_cos();
            let reach = c.abs() + s.abs();
            for b in 0..g.num_bins {
                let off = g.bin_offset(b);
                let mut margin = f64::INFINITY;
                let mut hit = false;
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    let x = (i % n) as f64 - centre;
                    let y = centre - (i / n) as f64;
                    let gap = reach - (x * c + y * s - off).abs();
                    hit |= gap > 0.0;
                    margin = margin.min(gap.abs());
                }
                if margin > 1e-3 {
                    assert_eq!(trace.row(v)[b], hit, "view {v} bin {b}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 17 * 20);
    }

    fn sino_from(rows: usize, values: Vec<f64>) -> Sinogram {
        let nb = values.len() / rows;
        let g = ProjectionGeometry {
            num_views: rows,
            num_bins: nb,
            angles: (0..rows).map(|v| v as f64 * std::f64::consts::PI / rows as f64).collect(),
            detector_spacing: 1.0,
            image_size: 8,
            pixel_spacing: 1.0,
        };
        Sinogram::new(values, g).unwrap()
    }

    #[test]
    fn li_formula_on_interior_run() {
        let mut row: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        row[9] = 2.0;
        row[20] = 7.5;
        let sino = sino_from(1, row.clone());
        let mut trace = MetalTrace::empty(1, 30);
        (10..20).for_each(|b| trace.mask[b] = true);
        let out = li_interpolate(&sino, &trace).unwrap();
        for k in 0..10 {
            let expected = 2.0 + (k + 1) as f64 * (7.5 - 2.0) / 11.0;
            assert!((out.values[10 + k] - expected).abs() < 1e-12);
        }
        for b in (0..10).chain(20..30) {
            assert_eq!(out.values[b], row[b]);
        }
        let none = li_interpolate(&sino, &MetalTrace::empty(1, 30)).unwrap();
        assert_eq!(none, sino);
    }

    #[test]
    fn li_edge_and_full_rows() {
        let sino = sino_from(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let mut t = MetalTrace::empty(3, 4);
        t.mask[0] = true;
        t.mask[1] = true;
        t.mask[7] = true;
        t.mask[8..12].iter_mut().for_each(|m| *m = true);
        let out = li_interpolate(&sino, &t).unwrap();
        assert_eq!(&out.values[0..4], &[3.0, 3.0, 3.0, 4.0]);
        assert_eq!(&out.values[4..8], &[5.0, 6.0, 7.0, 7.0]);
        assert_eq!(&out.values[8..12], &[0.0; 4]);
    }

    /// Independent row interpolation: for each masked bin, search outward for
    /// the nearest unmasked bins and interpolate by distance.
    fn oracle_row(row: &[f64], masked: &[bool]) -> Vec<f64> {
        let n = row.len();
        (0..n)
            .map(|i| {
                if !masked[i] {
                    return row[i];
                }
                let l = (0..i).rev().find(|&j| !masked[j]);
                let r = (i + 1..n).find(|&j| !masked[j]);
                match (l, r) {
                    (Some(l), Some(r)) => {
                        let w = (i - l) as f64 / (r - l) as f64;
                        row[l] * (1.0 - w) + row[r] * w
                    }
                    (Some(l), None) => row[l],
                    (None, Some(r)) => row[r],
                    (None, None) => 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn li_matches_rowwise_oracle() {
        let mut rng = rng_from_seed(9);
        let (v, b) = (12, 25);
        let values: Vec<f64> = (0..v * b).map(|_| rng.random_range(0.0..5.0)).collect();
        let sino = sino_from(v, values.clone());
        let mut t = MetalTrace::empty(v, b);
        t.mask.iter_mut().for_each(|m| *m = rng.random_bool(0.3));
        let out = li_interpolate(&sino, &t).unwrap();
        for r in 0..v {
            let expected = oracle_row(&values[r * b..(r + 1) * b], t.row(r));
            for (a, e) in out.row(r).iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12);
            }
        }
        let twice = li_interpolate(&out, &t).unwrap();
        for (a, e) in twice.values.iter().zip(&out.values) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    fn random_case(seed: u64) -> (ImageGrid, MetalTrace, ProjectionGeometry) {
        let n = 16;
        let g = geom(n, 12);
        let mut rng = rng_from_seed(seed);
        let img = ImageGrid::new(
            n,
            n,
            (0..n * n).map(|_| rng.random_range(0.5..1.5)).collect(),
            1.0,
            (0.0, 2.0),
        )
        .unwrap();
        let d = disk(n, 1.0, 2.5, 1.0);
        let trace = metal_trace(&MetalMask::from_image(&d), &g).unwrap();
        (img, trace, g)
    }

    #[test]
    fn nmar_perfect_prior_is_fixed_point() {
        let (img, trace, g) = random_case(1);
        let sino = forward_project(&img, &g).unwrap();
        let out = nmar(&sino, &img, &trace, &g).unwrap();
        for (a, b) in out.values.iter().zip(&sino.values) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn nmar_with_constant_normalizer_is_li() {
        let (img, trace, g) = random_case(2);
        let sino = forward_project(&img, &g).unwrap();
        let li = li_interpolate(&sino, &trace).unwrap();
        let out = normalized_interpolate(&sino, &vec![3.0; sino.values.len()], &trace).unwrap();
        for (a, b) in out.values.iter().zip(&li.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nmar_matches_staged_oracle() {
        let (img, trace, g) = random_case(3);
        let sino = forward_project(&img, &g).unwrap();
        let prior = img.map(|v| (v - 0.3).max(0.2));
        let out = nmar(&sino, &prior, &trace, &g).unwrap();
        let pp = forward_project(&prior, &g).unwrap();
        let peak = pp.values.iter().cloned().fold(0.0, f64::max);
        let nb = g.num_bins;
        for v in 0..g.num_views {
            let norm: Vec<f64> = pp.row(v).iter().map(|p| p.max(1e-6 * peak)).collect();
            let ratio: Vec<f64> = sino.row(v).iter().zip(&norm).map(|(s, n)| s / n).collect();
            let filled = oracle_row(&ratio, trace.row(v));
            for b in 0..nb {
                let expected = if trace.row(v)[b] { filled[b] * norm[b] } else { sino.row(v)[b] };
                assert!((out.row(v)[b] - expected).abs() < 1e-12 * (1.0 + expected.abs()));
            }
        }
    }

    #[test]
    fn nmar_rejects_zero_prior() {
        let (img, trace, g) = random_case(4);
        let sino = forward_project(&img, &g).unwrap();
        let zero = img.map(|_| 0.0);
        assert!(matches!(nmar(&sino, &zero, &trace, &g), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn empty_mask_baseline_is_round_trip() {
        let g = ProjectionGeometry::parallel(64, 180, 4.0).unwrap();
        let img = crate::phantom::random_body(64, 4.0, &crate::synthesis::SpectrumModel::default(), 8);
        let mask = MetalMask::empty(64, 64);
        let opts = BaselineOptions::default();
        for method in [BaselineMethod::Li, BaselineMethod::Nmar] {
            let out = run_baseline(&img, &mask, &g, method, &opts).unwrap();
            let direct = fbp_reconstruct(&forward_project(&img, &g).unwrap(), opts.filter);
            assert_eq!(out.values, direct.values);
        }
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("LI".parse::<BaselineMethod>().unwrap(), BaselineMethod::Li);
        assert_eq!("nmar".parse::<BaselineMethod>().unwrap(), BaselineMethod::Nmar);
        assert!(matches!("adn".parse::<BaselineMethod>(), Err(Error::UnknownMethod(_))));
    }
}
