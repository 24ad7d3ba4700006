//! Random anatomical-ish phantoms built from ellipses. These stand in for a
//! directory of clean CT slices when none is supplied.

use std::f64::consts::PI;

use rand::Rng as _;

use crate::rng::rng_from_seed;
use crate::synthesis::SpectrumModel;
use crate::tomo::{rasterize_ellipses, Ellipse, ImageGrid};

/// Default display/normalisation window in mm⁻¹: air to dense bone.
pub const DEFAULT_WINDOW: (f64, f64) = (0.0, 0.06);

/// A torso-like slice: body outline, fat rim, organs of slightly different
/// density, lungs on some slices, a vertebra and a few ribs.
pub fn random_body(size: usize, pixel_spacing: f64, spectrum: &SpectrumModel, seed: u64) -> ImageGrid {
    let mut rng = rng_from_seed(seed);
    let water = spectrum.reference.water;
    let bone = spectrum.reference.bone;
    let fov = size as f64 * pixel_spacing;
    let mut ellipses = Vec::new();

    let body_a = fov * rng.random_range(0.36..0.45);
    let body_b = fov * rng.random_range(0.27..0.36);
    let body_phi = rng.random_range(-0.1..0.1);
    let fat = water * rng.random_range(0.88..0.93);
    ellipses.push(Ellipse {
        cx: 0.0,
        cy: 0.0,
        a: body_a,
        b: body_b,
        phi: body_phi,
        value: fat,
    });
    let rim = rng.random_range(0.85..0.93);
    let soft = water * rng.random_range(1.0..1.04);
    ellipses.push(Ellipse {
        cx: 0.0,
        cy: 0.0,
        a: body_a * rim,
        b: body_b * rim,
        phi: body_phi,
        value: soft - fat,
    });

    let inner_a = body_a * rim;
    let inner_b = body_b * rim;
    let in_body = |rng: &mut crate::rng::Rng, margin: f64| -> (f64, f64) {
        let r = rng.random::<f64>().sqrt() * (1.0 - margin);
        let t = rng.random_range(0.0..2.0 * PI);
        (r * inner_a * t.cos(), r * inner_b * t.sin())
    };

    if rng.random_bool(0.35) {
        // Lungs: two large low-density lobes.
        let la = inner_a * rng.random_range(0.28..0.38);
        let lb = inner_b * rng.random_range(0.45..0.6);
        let lung = -soft * rng.random_range(0.65..0.8);
        for side in [-1.0, 1.0] {
            ellipses.push(Ellipse {
                cx: side * inner_a * 0.45,
                cy: inner_b * 0.1,
                a: la,
                b: lb,
                phi: side * rng.random_range(0.0..0.25),
                value: lung,
            });
        }
    }

    let organs = rng.random_range(2..6);
    for _ in 0..organs {
        let (cx, cy) = in_body(&mut rng, 0.35);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        ellipses.push(Ellipse {
            cx,
            cy,
            a: inner_a * rng.random_range(0.12..0.35),
            b: inner_b * rng.random_range(0.12..0.35),
            phi: rng.random_range(0.0..PI),
            value: sign * water * rng.random_range(0.02..0.08),
        });
    }

    // Vertebra towards the posterior (bottom) side.
    let vb = bone * rng.random_range(0.55..0.85) - soft;
    let vy = -inner_b * rng.random_range(0.55..0.7);
    let vr = fov * rng.random_range(0.045..0.065);
    ellipses.push(Ellipse {
        cx: rng.random_range(-0.03..0.03) * fov,
        cy: vy,
        a: vr,
        b: vr * rng.random_range(0.8..1.0),
        phi: 0.0,
        value: vb,
    });
    let ribs = rng.random_range(0..5);
    for _ in 0..ribs {
        let t = rng.random_range(0.0..2.0 * PI);
        let r = rng.random_range(0.86..0.94);
        ellipses.push(Ellipse {
            cx: r * inner_a * t.cos(),
            cy: r * inner_b * t.sin(),
            a: fov * rng.random_range(0.012..0.022),
            b: fov * rng.random_range(0.008..0.014),
            phi: t + 0.5 * PI,
            value: bone * rng.random_range(0.5..0.8) - soft,
        });
    }

    rasterize_ellipses(size, pixel_spacing, &ellipses, 3, DEFAULT_WINDOW)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic_and_physical() {
        let spectrum = SpectrumModel::default();
        let a = random_body(64, 4.0, &spectrum, 11);
        let b = random_body(64, 4.0, &spectrum, 11);
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| *v >= 0.0 && v.is_finite()));
        let max = a.values.iter().cloned().fold(0.0, f64::max);
        assert!(max > spectrum.reference.water && max < DEFAULT_WINDOW.1);
        assert_ne!(a, random_body(64, 4.0, &spectrum, 12));
    }
}
