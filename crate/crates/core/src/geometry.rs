//! Vector primitives, sampling on and in the unit ball, and the projection
//! marginals used to size band searches and calibrate noise.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-300;

/// Absolute tolerance of the marginal quadratures.
pub const QUADRATURE_TOL: f64 = 1e-10;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn unit_vector(d: usize, axis: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[axis] = 1.0;
    e
}

pub fn check_dimension(d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidDimension(d));
    }
    Ok(())
}

/// `x / ‖x‖`.
pub fn normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    Ok(scale(x, 1.0 / n))
}

pub fn normalize_in_place(x: &mut [f64]) -> Result<()> {
    let n = norm(x);
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    x.iter_mut().for_each(|v| *v /= n);
    Ok(())
}

/// Angle in `[0, π]` between two nonzero vectors.
pub fn angle(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if !(na >= ZERO_NORM && nb >= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(cos.acos())
}

/// Uniform direction on the unit sphere, written into `out`.
pub fn sample_unit_sphere_into(out: &mut [f64], rng: &mut SimRng) {
    loop {
        out.iter_mut().for_each(|v| *v = rng.normal());
        let n = norm(out);
        if n >= ZERO_NORM {
            out.iter_mut().for_each(|v| *v /= n);
            return;
        }
    }
}

/// Uniform point in the unit ball: uniform direction times `U^{1/d}`.
pub fn sample_unit_ball_into(out: &mut [f64], rng: &mut SimRng) {
    sample_unit_sphere_into(out, rng);
    let r = rng.uniform_open0().powf(1.0 / out.len() as f64);
    out.iter_mut().for_each(|v| *v *= r);
}

pub fn sample_unit_sphere(d: usize, rng: &mut SimRng) -> Vec<f64> {
    let mut out = vec![0.0; d];
    sample_unit_sphere_into(&mut out, rng);
    out
}

pub fn sample_unit_ball(d: usize, rng: &mut SimRng) -> Vec<f64> {
    let mut out = vec![0.0; d];
    sample_unit_ball_into(&mut out, rng);
    out
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        // min depth guards against peaked integrands fooling the first estimate
        if depth >= 50 || (depth >= 4 && delta.abs() <= 15.0 * tol) {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth + 1)
    }

    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 0)
}

/// Probability that `w·X ∈ [lo, hi]` for a fixed unit `w`, where the density
/// of the projection is proportional to `(1 - t²)^{power/2}`.
///
/// Substituting `t = sin φ` turns the density into `cos^{power+1} φ`, which is
/// smooth on the whole interval even when `power < 0`.
fn projection_mass(lo: f64, hi: f64, power: i32) -> f64 {
    let lo = lo.clamp(-1.0, 1.0);
    let hi = hi.clamp(-1.0, 1.0);
    if hi <= lo {
        return 0.0;
    }
    let exponent = power + 1;
    let density = move |phi: f64| phi.cos().max(0.0).powi(exponent);
    let total = adaptive_simpson(&density, -FRAC_PI_2, FRAC_PI_2, QUADRATURE_TOL);
    adaptive_simpson(&density, lo.asin(), hi.asin(), QUADRATURE_TOL) / total
}

/// `P[w·X ∈ [lo, hi]]` for `X` uniform on the unit sphere in `R^d`.
/// The projection density is proportional to `(1 - t²)^{(d-3)/2}`.
pub fn sphere_projection_mass(lo: f64, hi: f64, d: usize) -> f64 {
    projection_mass(lo, hi, d as i32 - 3)
}

/// `P[w·Z ∈ [lo, hi]]` for `Z` uniform in the unit ball in `R^d`.
/// The projection density is proportional to `(1 - t²)^{(d-1)/2}`.
pub fn ball_projection_mass(lo: f64, hi: f64, d: usize) -> f64 {
    projection_mass(lo, hi, d as i32 - 1)
}

/// Probability that a uniform ball draw lands in the query band
/// `-b ≤ W·x̂ ≤ -b/2`. Only the direction matters, so this is a sphere mass.
pub fn band_fraction(b: f64, d: usize) -> Result<f64> {
    check_dimension(d)?;
    if !(b > 0.0 && b <= 1.0) {
        return Err(Error::InvalidBand(b));
    }
    Ok(sphere_projection_mass(-b, -0.5 * b, d))
}

/// Closed form of [`band_fraction`] in the plane: arc measure over the circle.
pub fn band_fraction_planar(b: f64) -> f64 {
    (b.asin() - (0.5 * b).asin()) / PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::function::gamma::ln_gamma;

    #[test]
    fn normalize_examples() {
        let v = normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let e = unit_vector(5, 0);
        assert_eq!(normalize(&e).unwrap(), e);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(normalize(&[1e-320, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn angle_examples() {
        let e1 = unit_vector(3, 0);
        let e2 = unit_vector(3, 1);
        let m1 = scale(&e1, -1.0);
        assert_eq!(angle(&e1, &e1).unwrap(), 0.0);
        assert!((angle(&e1, &e2).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((angle(&e1, &m1).unwrap() - PI).abs() < 1e-15);
        assert!(angle(&e1, &[0.0; 3]).is_err());
        // nearly parallel vectors must not produce NaN
        let a = [1.0, 1e-9, 0.0];
        assert!(angle(&a, &scale(&a, 3.0)).unwrap().is_finite());
    }

    #[test]
    fn random_ball_points_normalize_to_unit() {
        let mut rng = SimRng::new(1);
        for d in [2, 3, 7, 50] {
            for _ in 0..1000 {
                let x = sample_unit_ball(d, &mut rng);
                assert!(norm(&x) <= 1.0);
                let n = normalize(&x).unwrap();
                assert!((norm(&n) - 1.0).abs() < 1e-12);
                assert!((dot(&n, &x) - norm(&x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ball_radial_cdf() {
        // P[‖Z‖ ≤ 1/2] = 2^{-d}
        let n = 100_000;
        for d in [2usize, 3, 5] {
            let mut rng = SimRng::new(10 + d as u64);
            let hits = (0..n)
                .filter(|_| norm(&sample_unit_ball(d, &mut rng)) <= 0.5)
                .count() as f64;
            let p = 0.5f64.powi(d as i32);
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((hits / n as f64 - p).abs() <= 3.0 * sigma, "d={d}");
        }
    }

    #[test]
    fn ball_component_means_vanish() {
        let n = 100_000;
        let d = 4;
        let mut rng = SimRng::new(99);
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_unit_ball(d, &mut rng)).collect();
        for j in 0..d {
            let mean = draws.iter().map(|z| z[j]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|z| (z[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!(mean.abs() <= 3.0 * se, "component {j}: {mean} vs se {se}");
        }
    }

    #[test]
    fn sphere_draws_have_unit_norm() {
        let mut rng = SimRng::new(5);
        for d in [2, 3, 10, 100] {
            for _ in 0..1000 {
                assert!((norm(&sample_unit_sphere(d, &mut rng)) - 1.0).abs() < 1e-12);
            }
        }
    }

    fn wallis(power: i32) -> f64 {
        // ∫_{-π/2}^{π/2} cos^n φ dφ = √π Γ((n+1)/2) / Γ(n/2 + 1)
        let n = power as f64;
        PI.sqrt() * (ln_gamma((n + 1.0) / 2.0) - ln_gamma(n / 2.0 + 1.0)).exp()
    }

    #[test]
    fn quadrature_matches_wallis_integrals() {
        for n in [0, 1, 2, 5, 12, 40, 200] {
            let q = adaptive_simpson(
                &|p: f64| p.cos().max(0.0).powi(n),
                -FRAC_PI_2,
                FRAC_PI_2,
                1e-10,
            );
            assert!((q - wallis(n)).abs() < 1e-9, "n={n}: {q} vs {}", wallis(n));
        }
    }

    #[test]
    fn sphere_mass_is_a_distribution() {
        for d in [2, 3, 6, 20] {
            assert!((sphere_projection_mass(-1.0, 1.0, d) - 1.0).abs() < 1e-9);
            assert!((ball_projection_mass(-1.0, 1.0, d) - 1.0).abs() < 1e-9);
            assert!((sphere_projection_mass(0.0, 1.0, d) - 0.5).abs() < 1e-9);
        }
        // d = 3: Archimedes, the projection is uniform on [-1, 1]
        assert!((sphere_projection_mass(-0.3, 0.1, 3) - 0.2).abs() < 1e-9);
    }

    #[test]
    fn planar_band_fraction_matches_arc_measure() {
        for b in [0.01, 0.2, 0.5, 0.9, 1.0] {
            let q = band_fraction(b, 2).unwrap();
            assert!((q - band_fraction_planar(b)).abs() < 1e-8, "b={b}");
        }
    }

    #[test]
    fn planar_band_fraction_monte_carlo() {
        // 10^7 angles on the circle against the quadrature at b = 1
        let n = 10_000_000u64;
        let mut rng = SimRng::new(2024);
        let mut hits = 0u64;
        for _ in 0..n {
            let t = (2.0 * PI * rng.uniform()).cos();
            if (-1.0..=-0.5).contains(&t) {
                hits += 1;
            }
        }
        let p = band_fraction(1.0, 2).unwrap();
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() <= 3.0 * sigma);
    }

    #[test]
    fn band_fraction_bounds_and_monotone() {
        for d in [2, 5, 10] {
            for b in [1.0, 0.5] {
                let f = band_fraction(b, d).unwrap();
                assert!(f > 0.0 && f < 0.5);
            }
            // shrinking bands below the bulk of the projection mass
            let mut prev = f64::INFINITY;
            for b in [0.1, 0.03, 0.01, 1e-3, 1e-4, 1e-5] {
                let f = band_fraction(b, d).unwrap();
                assert!(f > 0.0 && f < prev);
                prev = f;
            }
            assert!(prev < 1e-5);
        }
        assert!(matches!(band_fraction(0.0, 3), Err(Error::InvalidBand(_))));
        assert!(matches!(band_fraction(1.5, 3), Err(Error::InvalidBand(_))));
        assert!(matches!(
            band_fraction(0.5, 1),
            Err(Error::InvalidDimension(1))
        ));
    }

    #[test]
    fn sphere_marginal_matches_density() {
        use crate::stats::{ks_one_sample, SIGNIFICANCE};
        for d in [3usize, 4, 8] {
            let mut rng = SimRng::new(4000 + d as u64);
            let t: Vec<f64> = (0..100_000)
                .map(|_| sample_unit_sphere(d, &mut rng)[0])
                .collect();
            let outcome = ks_one_sample(&t, |x| sphere_projection_mass(-1.0, x, d));
            assert!(outcome.passes(SIGNIFICANCE), "d={d}: {outcome:?}");
        }
    }

    #[test]
    fn sphere_mass_matches_beta_cdf() {
        use statrs::distribution::{Beta, ContinuousCDF};
        for d in [3usize, 5, 8, 20] {
            let a = (d as f64 - 1.0) / 2.0;
            let beta = Beta::new(a, a).unwrap();
            for t in [-0.9, -0.4, 0.0, 0.25, 0.7] {
                let exact = beta.cdf((t + 1.0) / 2.0);
                assert!((sphere_projection_mass(-1.0, t, d) - exact).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn planar_sphere_angles_uniform() {
        use crate::stats::{chi_square_uniform, SIGNIFICANCE};
        let mut rng = SimRng::new(77);
        let mut bins = [0u64; 16];
        for _ in 0..100_000 {
            let x = sample_unit_sphere(2, &mut rng);
            let a = x[1].atan2(x[0]).rem_euclid(2.0 * PI);
            bins[((a / (2.0 * PI) * 16.0) as usize).min(15)] += 1;
        }
        assert!(chi_square_uniform(&bins).passes(SIGNIFICANCE));
    }

    #[test]
    fn band_conditioned_ball_directions_match_sphere() {
        use crate::stats::{ks_two_sample, SIGNIFICANCE};
        for d in [2usize, 5, 10] {
            let b = 0.3;
            let mut rng = SimRng::new(500 + d as u64);
            let w = sample_unit_sphere(d, &mut rng);
            let probe = sample_unit_sphere(d, &mut rng);
            let band = |x: &[f64]| (-b..=-0.5 * b).contains(&dot(&w, x));
            let mut ball = Vec::new();
            while ball.len() < 10_000 {
                let x = normalize(&sample_unit_ball(d, &mut rng)).unwrap();
                if band(&x) {
                    ball.push(x);
                }
            }
            let mut sphere = Vec::new();
            while sphere.len() < 10_000 {
                let x = sample_unit_sphere(d, &mut rng);
                if band(&x) {
                    sphere.push(x);
                }
            }
            for dir in [&w, &probe] {
                let a: Vec<f64> = ball.iter().map(|x| dot(dir, x)).collect();
                let s: Vec<f64> = sphere.iter().map(|x| dot(dir, x)).collect();
                assert!(ks_two_sample(&a, &s).passes(SIGNIFICANCE), "d={d}");
            }
        }
    }

    proptest! {
        #[test]
        fn normalize_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 2..12)) {
            prop_assume!(norm(&v) > 1e-6);
            let a = normalize(&v).unwrap();
            let b = normalize(&a).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn angle_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-1.0f64..1.0, 4),
            b in proptest::collection::vec(-1.0f64..1.0, 4),
            lambda in 1e-3f64..1e3,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ab = angle(&a, &b).unwrap();
            prop_assert!((ab - angle(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ab - angle(&a, &scale(&b, lambda)).unwrap()).abs() < 1e-7);
            prop_assert!((0.0..=PI).contains(&ab));
        }
    }
}
