//! 2D parallel-beam projector and filtered backprojection.
//!
//! Images live on a square pixel grid centred on the origin. A ray is
//! parameterised by its view angle `theta` and signed detector offset `s`:
//! it is the line `{ s·(cos θ, sin θ) + t·(−sin θ, cos θ) }`. The image is
//! treated as the bilinear interpolant of its pixel values (zero outside the
//! grid), and projection integrates that interpolant exactly along each ray.

use std::f64::consts::PI;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGeometry {
    pub num_views: usize,
    pub num_bins: usize,
    pub angles: Vec<f64>,
    pub detector_spacing: f64,
    pub image_size: usize,
    pub pixel_spacing: f64,
}

impl ProjectionGeometry {
    /// Uniform views over `[0, π)` and enough unit-pixel bins to cover the
    /// image diagonal.
    pub fn parallel(image_size: usize, num_views: usize, pixel_spacing: f64) -> Result<Self> {
        if image_size == 0 || num_views == 0 {
            return Err(Error::InvalidArgument(
                "image_size and num_views must be positive".into(),
            ));
        }
        let num_bins = (std::f64::consts::SQRT_2 * image_size as f64).ceil() as usize;
        Self::new(image_size, num_views, num_bins, pixel_spacing, pixel_spacing)
    }

    pub fn new(
        image_size: usize,
        num_views: usize,
        num_bins: usize,
        pixel_spacing: f64,
        detector_spacing: f64,
    ) -> Result<Self> {
        let angles = (0..num_views)
            .map(|v| PI * v as f64 / num_views as f64)
            .collect();
        let geom = ProjectionGeometry {
            num_views,
            num_bins,
            angles,
            detector_spacing,
            image_size,
            pixel_spacing,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::GeometryMismatch(m.to_string()));
        if self.num_views == 0 || self.num_bins == 0 || self.image_size == 0 {
            return bad("dimensions must be positive");
        }
        if self.angles.len() != self.num_views {
            return bad("num_views must equal the number of angles");
        }
        if self.angles.windows(2).any(|w| w[1] <= w[0]) {
            return bad("angles must be strictly increasing");
        }
        if !(self.pixel_spacing > 0.0 && self.detector_spacing > 0.0) {
            return bad("spacings must be positive");
        }
        let half_diag = std::f64::consts::FRAC_1_SQRT_2
            * (self.image_size as f64 - 1.0)
            * self.pixel_spacing;
        let half_span = 0.5 * (self.num_bins as f64) * self.detector_spacing;
        if half_span + 1e-9 < half_diag {
            return bad("detector span does not cover the image diagonal");
        }
        Ok(())
    }

    /// Signed offset of bin `b` from the rotation centre.
    pub fn bin_offset(&self, b: usize) -> f64 {
        (b as f64 - 0.5 * (self.num_bins as f64 - 1.0)) * self.detector_spacing
    }

}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major, row 0 at the top (+y).
    pub values: Vec<f64>,
    /// Millimetres per pixel.
    pub spacing: f64,
    pub window: (f64, f64),
}

impl ImageGrid {
    pub const MIN_SIDE: usize = 8;

    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        spacing: f64,
        window: (f64, f64),
    ) -> Result<Self> {
        let img = ImageGrid {
            height,
            width,
            values,
            spacing,
            window,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn zeros(height: usize, width: usize, spacing: f64, window: (f64, f64)) -> Self {
        ImageGrid {
            height,
            width,
            values: vec![0.0; height * width],
            spacing,
            window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < Self::MIN_SIDE || self.width < Self::MIN_SIDE {
            return Err(Error::ShapeMismatch(format!(
                "image must be at least {0}x{0}, got {1}x{2}",
                Self::MIN_SIDE,
                self.height,
                self.width
            )));
        }
        if self.values.len() != self.height * self.width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{} image",
                self.values.len(),
                self.height,
                self.width
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image pixel {i}")));
        }
        if self.window.1 <= self.window.0 {
            return Err(Error::InvalidArgument(
                "intensity window must satisfy low < high".into(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn with_values(&self, values: Vec<f64>) -> ImageGrid {
        debug_assert_eq!(values.len(), self.values.len());
        ImageGrid {
            values,
            ..self.clone()
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    /// Maps the intensity window affinely onto `[-1, 1]`, clipping outside it.
    pub fn normalized(&self) -> Vec<f64> {
        let (lo, hi) = self.window;
        self.values
            .iter()
            .map(|&v| 2.0 * (v.clamp(lo, hi) - lo) / (hi - lo) - 1.0)
            .collect()
    }

    /// Inverse of [`ImageGrid::normalized`] (without the clip).
    pub fn from_normalized(template: &ImageGrid, normalized: &[f64]) -> ImageGrid {
        let (lo, hi) = template.window;
        template.with_values(
            normalized
                .iter()
                .map(|&u| lo + 0.5 * (u + 1.0) * (hi - lo))
                .collect(),
        )
    }

    fn require_square(&self, geom: &ProjectionGeometry) -> Result<()> {
        if self.height != geom.image_size || self.width != geom.image_size {
            return Err(Error::GeometryMismatch(format!(
                "image is {}x{} but geometry expects {}x{}",
                self.height, self.width, geom.image_size, geom.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sinogram {
    /// `num_views × num_bins`, view-major.
    pub values: Vec<f64>,
    pub geometry: ProjectionGeometry,
}

impl Sinogram {
    pub fn zeros(geometry: &ProjectionGeometry) -> Self {
        Sinogram {
            values: vec![0.0; geometry.num_views * geometry.num_bins],
            geometry: geometry.clone(),
        }
    }

    pub fn new(values: Vec<f64>, geometry: ProjectionGeometry) -> Result<Self> {
        if values.len() != geometry.num_views * geometry.num_bins {
            return Err(Error::GeometryMismatch(format!(
                "{} sinogram values for {} views x {} bins",
                values.len(),
                geometry.num_views,
                geometry.num_bins
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sinogram".into()));
        }
        Ok(Sinogram { values, geometry })
    }

    pub fn row(&self, view: usize) -> &[f64] {
        let nb = self.geometry.num_bins;
        &self.values[view * nb..(view + 1) * nb]
    }

    pub fn row_mut(&mut self, view: usize) -> &mut [f64] {
        let nb = self.geometry.num_bins;
        &mut self.values[view * nb..(view + 1) * nb]
    }

    pub fn with_values(&self, values: Vec<f64>) -> Sinogram {
        Sinogram {
            values,
            geometry: self.geometry.clone(),
        }
    }
}

/// Bilinear sample point: up to four `(pixel index, weight)` pairs.
#[inline]
fn bilinear_taps(n: usize, row: f64, col: f64, taps: &mut [(usize, f64); 4]) -> usize {
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let r0 = r0 as isize;
    let c0 = c0 as isize;
    let n_i = n as isize;
    let mut k = 0;
    for (dr, wr) in [(0isize, 1.0 - fr), (1, fr)] {
        let r = r0 + dr;
        if r < 0 || r >= n_i || wr == 0.0 {
            continue;
        }
        for (dc, wc) in [(0isize, 1.0 - fc), (1, fc)] {
            let c = c0 + dc;
            if c < 0 || c >= n_i || wc == 0.0 {
                continue;
            }
            taps[k] = ((r * n_i + c) as usize, wr * wc);
            k += 1;
        }
    }
    k
}

/// Walks ray `(view, bin)` and hands each bilinear tap (pixel index,
/// quadrature weight) to `visit`. Between consecutive crossings of the
/// interpolation grid the interpolant restricted to the ray is quadratic, so
/// Simpson's rule on each such segment integrates it exactly.
fn for_each_ray_tap(
    geom: &ProjectionGeometry,
    view: usize,
    bin: usize,
    mut visit: impl FnMut(usize, f64),
) {
    let n = geom.image_size;
    let nf = n as f64;
    let ps = geom.pixel_spacing;
    let (sin, cos) = geom.angles[view].sin_cos();
    let s = geom.bin_offset(bin);
    let centre = 0.5 * (nf - 1.0);
    // col(t) = col0 + dcol·t, row(t) = row0 + drow·t, in pixel index units.
    let col0 = s * cos / ps + centre;
    let dcol = -sin / ps;
    let row0 = centre - s * sin / ps;
    let drow = -cos / ps;

    // Clip to the open support (-1, n) on both axes.
    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for (p0, dp) in [(col0, dcol), (row0, drow)] {
        if dp.abs() < 1e-15 {
            if p0 <= -1.0 || p0 >= nf {
                return;
            }
            continue;
        }
        let a = (-1.0 - p0) / dp;
        let b = (nf - p0) / dp;
        t_lo = t_lo.max(a.min(b));
        t_hi = t_hi.min(a.max(b));
    }
    if t_hi <= t_lo {
        return;
    }

    let mut breaks = Vec::with_capacity(2 * n + 4);
    breaks.push(t_lo);
    breaks.push(t_hi);
    for (p0, dp) in [(col0, dcol), (row0, drow)] {
        if dp.abs() < 1e-15 {
            continue;
        }
        for k in 0..n {
            let t = (k as f64 - p0) / dp;
            if t > t_lo && t < t_hi {
                breaks.push(t);
            }
        }
    }
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut taps = [(0usize, 0.0f64); 4];
    let mut emit = |t: f64, w: f64, visit: &mut dyn FnMut(usize, f64)| {
        let row = row0 + drow * t;
        let col = col0 + dcol * t;
        let m = bilinear_taps(n, row, col, &mut taps);
        for &(idx, tw) in &taps[..m] {
            visit(idx, tw * w);
        }
    };
    for seg in breaks.windows(2) {
        let (ta, tb) = (seg[0], seg[1]);
        let h = tb - ta;
        if h <= 0.0 {
            continue;
        }
        let w = h / 6.0;
        emit(ta, w, &mut visit);
        emit(0.5 * (ta + tb), 4.0 * w, &mut visit);
        emit(tb, w, &mut visit);
    }
}

/// Line integrals of `image` along every ray of `geom`.
pub fn forward_project(image: &ImageGrid, geom: &ProjectionGeometry) -> Result<Sinogram> {
    geom.validate()?;
    image.require_square(geom)?;
    let mut sino = Sinogram::zeros(geom);
    let nb = geom.num_bins;
    for v in 0..geom.num_views {
        for b in 0..nb {
            let mut acc = 0.0;
            for_each_ray_tap(geom, v, b, |idx, w| acc += w * image.values[idx]);
            sino.values[v * nb + b] = acc;
        }
    }
    Ok(sino)
}

/// Exact transpose of [`forward_project`] (unfiltered backprojection).
pub fn backproject_adjoint(sino: &Sinogram, spacing: f64, window: (f64, f64)) -> ImageGrid {
    let geom = &sino.geometry;
    let n = geom.image_size;
    let mut out = vec![0.0; n * n];
    let nb = geom.num_bins;
    for v in 0..geom.num_views {
        for b in 0..nb {
            let p = sino.values[v * nb + b];
            if p == 0.0 {
                continue;
            }
            for_each_ray_tap(geom, v, b, |idx, w| out[idx] += w * p);
        }
    }
    ImageGrid {
        height: n,
        width: n,
        values: out,
        spacing,
        window,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    RamLak,
    Hann,
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ram-lak" | "ramlak" | "ramp" => Ok(FilterKind::RamLak),
            "hann" | "hanning" => Ok(FilterKind::Hann),
            other => Err(Error::UnknownFilter(other.to_string())),
        }
    }
}

/// Frequency response of the band-limited ramp, built from the spatial
/// Ram-Lak kernel so the DC term is consistent with the discrete sampling.
fn ramp_response(len: usize, tau: f64, kind: FilterKind) -> Vec<f64> {
    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    for (i, k) in kernel.iter_mut().enumerate() {
        let n = if i <= len / 2 {
            i as i64
        } else {
            i as i64 - len as i64
        };
        let h = if n == 0 {
            0.25 / (tau * tau)
        } else if n % 2 == 0 {
            0.0
        } else {
            -1.0 / ((n as f64) * PI * tau).powi(2)
        };
        *k = Complex::new(h * tau, 0.0);
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut kernel);
    kernel
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let f = if i <= len / 2 { i } else { len - i } as f64 / (len as f64 / 2.0);
            let w = match kind {
                FilterKind::RamLak => 1.0,
                FilterKind::Hann => 0.5 * (1.0 + (PI * f).cos()),
            };
            c.re * w
        })
        .collect()
}

/// Applies the ramp filter row-by-row.
pub fn filter_sinogram(sino: &Sinogram, kind: FilterKind) -> Sinogram {
    let geom = &sino.geometry;
    let nb = geom.num_bins;
    let len = (2 * nb).next_power_of_two();
    let response = ramp_response(len, geom.detector_spacing, kind);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut out = Sinogram::zeros(geom);
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for v in 0..geom.num_views {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (c, &p) in buf.iter_mut().zip(sino.row(v)) {
            c.re = p;
        }
        fwd.process(&mut buf);
        for (c, &h) in buf.iter_mut().zip(&response) {
            *c *= h;
        }
        inv.process(&mut buf);
        for (o, c) in out.row_mut(v).iter_mut().zip(&buf) {
            *o = c.re / len as f64;
        }
    }
    out
}

/// Pixel-driven backprojection with linear interpolation between bins,
/// scaled by `π / num_views`.
pub fn backproject_pixel_driven(sino: &Sinogram, spacing: f64, window: (f64, f64)) -> ImageGrid {
    let geom = &sino.geometry;
    let n = geom.image_size;
    let nb = geom.num_bins;
    let ps = geom.pixel_spacing;
    let centre = 0.5 * (n as f64 - 1.0);
    let bin_centre = 0.5 * (nb as f64 - 1.0);
    let mut out = vec![0.0; n * n];
    for (v, &theta) in geom.angles.iter().enumerate() {
        let (sin, cos) = theta.sin_cos();
        let row_vals = sino.row(v);
        for r in 0..n {
            let y = (centre - r as f64) * ps;
            for c in 0..n {
                let x = (c as f64 - centre) * ps;
                let u = (x * cos + y * sin) / geom.detector_spacing + bin_centre;
                let u0 = u.floor();
                let f = u - u0;
                let i0 = u0 as isize;
                let mut val = 0.0;
                if i0 >= 0 && (i0 as usize) < nb {
                    val += (1.0 - f) * row_vals[i0 as usize];
                }
                if i0 + 1 >= 0 && ((i0 + 1) as usize) < nb {
                    val += f * row_vals[(i0 + 1) as usize];
                }
                out[r * n + c] += val;
            }
        }
    }
    let scale = PI / geom.num_views as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    ImageGrid {
        height: n,
        width: n,
        values: out,
        spacing,
        window,
    }
}

/// Oversampling of the filtered projections used by [`fbp_reconstruct`].
pub const FBP_UPSAMPLE: usize = 4;

/// Filters every row and resamples it `factor` times more finely by zero
/// padding its spectrum, so the backprojector's linear interpolation runs on
/// a band-limited curve rather than on the bins. Row `v` holds
/// `num_bins * factor` samples; sample `j` sits at bin coordinate `j / factor`.
pub fn filter_sinogram_upsampled(sino: &Sinogram, kind: FilterKind, factor: usize) -> Vec<f64> {
    let geom = &sino.geometry;
    let nb = geom.num_bins;
    let factor = factor.max(1);
    let len = (2 * nb).next_power_of_two();
    let fine = len * factor;
    let response = ramp_response(len, geom.detector_spacing, kind);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(fine);
    let zero = Complex::new(0.0, 0.0);
    let mut buf = vec![zero; len];
    let mut wide = vec![zero; fine];
    let mut out = vec![0.0; geom.num_views * nb * factor];
    let half = len / 2;
    for v in 0..geom.num_views {
        buf.iter_mut().for_each(|c| *c = zero);
        for (c, &p) in buf.iter_mut().zip(sino.row(v)) {
            c.re = p;
        }
        fwd.process(&mut buf);
        for (c, &h) in buf.iter_mut().zip(&response) {
            *c *= h;
        }
        wide.iter_mut().for_each(|c| *c = zero);
        wide[..half].copy_from_slice(&buf[..half]);
        wide[fine - half + 1..].copy_from_slice(&buf[half + 1..]);
        if factor > 1 {
            // Split the Nyquist bin between ±f so the interpolant stays real.
            wide[half] = buf[half] * 0.5;
            wide[fine - half] = buf[half] * 0.5;
        } else {
            wide[half] = buf[half];
        }
        inv.process(&mut wide);
        let row = &mut out[v * nb * factor..(v + 1) * nb * factor];
        for (o, c) in row.iter_mut().zip(&wide) {
            *o = c.re / len as f64;
        }
    }
    out
}

/// Filtered backprojection onto the grid described by `sino.geometry`.
pub fn fbp_reconstruct(sino: &Sinogram, filter: FilterKind) -> ImageGrid {
    let geom = &sino.geometry;
    let k = FBP_UPSAMPLE;
    let rows = filter_sinogram_upsampled(sino, filter, k);
    let n = geom.image_size;
    let nf = geom.num_bins * k;
    let ps = geom.pixel_spacing;
    let centre = 0.5 * (n as f64 - 1.0);
    let bin_centre = 0.5 * (geom.num_bins as f64 - 1.0);
    let step = k as f64 / geom.detector_spacing;
    let mut out = vec![0.0; n * n];
    for (v, &theta) in geom.angles.iter().enumerate() {
        let (sin, cos) = theta.sin_cos();
        let row = &rows[v * nf..(v + 1) * nf];
        for r in 0..n {
            let y = (centre - r as f64) * ps;
            let base = y * sin * step + bin_centre * k as f64;
            for c in 0..n {
                let x = (c as f64 - centre) * ps;
                let u = x * cos * step + base;
                let u0 = u.floor();
                let f = u - u0;
                let i0 = u0 as isize;
                let mut val = 0.0;
                if i0 >= 0 && (i0 as usize) < nf {
                    val += (1.0 - f) * row[i0 as usize];
                }
                if i0 + 1 >= 0 && ((i0 + 1) as usize) < nf {
                    val += f * row[(i0 + 1) as usize];
                }
                out[r * n + c] += val;
            }
        }
    }
    let scale = PI / geom.num_views as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    ImageGrid {
        height: n,
        width: n,
        values: out,
        spacing: ps,
        window: (0.0, 1.0),
    }
}

/// As [`fbp_reconstruct`], resolving the filter by name.
pub fn fbp_reconstruct_named(sino: &Sinogram, filter_name: &str) -> Result<ImageGrid> {
    let kind: FilterKind = filter_name.parse()?;
    Ok(fbp_reconstruct(sino, kind))
}

/// Analytic ellipse description used by phantoms: centre, semi-axes, rotation
/// (all in millimetres / radians) and additive attenuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub phi: f64,
    pub value: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Rasterises additive ellipses with `supersample²` samples per pixel.
pub fn rasterize_ellipses(
    size: usize,
    pixel_spacing: f64,
    ellipses: &[Ellipse],
    supersample: usize,
    window: (f64, f64),
) -> ImageGrid {
    let ss = supersample.max(1);
    let centre = 0.5 * (size as f64 - 1.0);
    let mut values = vec![0.0; size * size];
    let inv = 1.0 / (ss * ss) as f64;
    for r in 0..size {
        for c in 0..size {
            let mut acc = 0.0;
            for i in 0..ss {
                for j in 0..ss {
                    let dy = (i as f64 + 0.5) / ss as f64 - 0.5;
                    let dx = (j as f64 + 0.5) / ss as f64 - 0.5;
                    let x = (c as f64 - centre + dx) * pixel_spacing;
                    let y = (centre - r as f64 - dy) * pixel_spacing;
                    for e in ellipses {
                        if e.contains(x, y) {
                            acc += e.value;
                        }
                    }
                }
            }
            values[r * size + c] = acc * inv;
        }
    }
    ImageGrid {
        height: size,
        width: size,
        values,
        spacing: pixel_spacing,
        window,
    }
}

/// Modified Shepp-Logan phantom (intensities in `[0, 1]`) filling the grid.
pub fn shepp_logan(size: usize, pixel_spacing: f64) -> ImageGrid {
    let r = 0.5 * size as f64 * pixel_spacing;
    let e = |cx: f64, cy: f64, a: f64, b: f64, deg: f64, value: f64| Ellipse {
        cx: cx * r,
        cy: cy * r,
        a: a * r,
        b: b * r,
        phi: deg.to_radians(),
        value,
    };
    let ellipses = [
        e(0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
        e(0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
        e(0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
        e(-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
        e(0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
        e(0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
        e(0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
        e(-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
        e(0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
        e(0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
    ];
    rasterize_ellipses(size, pixel_spacing, &ellipses, 4, (0.0, 1.0))
}

/// Uniform disk of radius `radius` (mm) and attenuation `value`, centred.
pub fn disk(size: usize, pixel_spacing: f64, radius: f64, value: f64) -> ImageGrid {
    let e = Ellipse {
        cx: 0.0,
        cy: 0.0,
        a: radius,
        b: radius,
        phi: 0.0,
        value,
    };
    rasterize_ellipses(size, pixel_spacing, &[e], 4, (0.0, value.max(1e-12)))
}
