//! Numerical checks of the geometric estimates behind the kinetic limit:
//! twisted-tube volumes, near-colinearity after scattering, and the scalar
//! product of two scattered directions.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::collision::{scatter_unchecked, Restitution};
use crate::error::{Error, Result};
use crate::estimators::EstimateWithCI;
use crate::geometry::{point_segment_distance, sample_unit_sphere, sphere_measure, vector, Vector};
use crate::rng::{sample_key, stream};

const BLOCK: usize = 1 << 14;

/// Counts hits of `hit` over `n` draws, in fixed blocks of independent
/// streams so the result does not depend on the thread count.
fn count_hits<F>(n: usize, seed: u64, hit: F) -> usize
where
    F: Fn(&mut crate::rng::Stream) -> bool + Sync,
{
    (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, b as u64);
            let m = BLOCK.min(n - b * BLOCK);
            (0..m).filter(|_| hit(&mut rng)).count()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// `([x1, x2] ∪ [x2, x3]) + B(0, eps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeSpec<const D: usize> {
    pub waypoints: [Vector<D>; 3],
    pub eps: f64,
}

impl<const D: usize> TubeSpec<D> {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Invalid("tube radius must be positive".into()));
        }
        let w = &self.waypoints;
        if w[0] == w[1] || w[1] == w[2] || w[0] == w[2] {
            return Err(Error::Invalid("tube waypoints must be distinct".into()));
        }
        Ok(())
    }

    pub fn contains(&self, p: &Vector<D>) -> bool {
        let w = &self.waypoints;
        point_segment_distance(p, &w[0], &w[1]) <= self.eps
            || point_segment_distance(p, &w[1], &w[2]) <= self.eps
    }

    fn bounding_box(&self) -> (Vector<D>, Vector<D>) {
        let w = &self.waypoints;
        let lo = w[0].inf(&w[1]).inf(&w[2]).add_scalar(-self.eps);
        let hi = w[0].sup(&w[1]).sup(&w[2]).add_scalar(self.eps);
        (lo, hi)
    }
}

/// Volume of a single capsule `[a, b] + B(0, eps)`.
pub fn capsule_volume<const D: usize>(length: f64, eps: f64) -> f64 {
    if D == 2 {
        2.0 * eps * length + PI * eps * eps
    } else {
        PI * eps * eps * length + 4.0 / 3.0 * PI * eps.powi(3)
    }
}

/// Monte Carlo volume of the tube, sampling its bounding box.
pub fn tube_volume_mc<const D: usize>(
    spec: &TubeSpec<D>,
    n_mc: usize,
    seed: u64,
) -> Result<EstimateWithCI> {
    spec.validate()?;
    if n_mc < 1000 {
        return Err(Error::Invalid("n_mc must be at least 1000".into()));
    }
    let (lo, hi) = spec.bounding_box();
    let box_vol: f64 = (hi - lo).iter().product();
    let k = count_hits(n_mc, seed, |rng| {
        let p = Vector::<D>::from_fn(|i, _| rng.random_range(lo[i]..hi[i]));
        spec.contains(&p)
    });
    let p = EstimateWithCI::proportion(k, n_mc);
    Ok(EstimateWithCI::new(
        p.mean * box_vol,
        p.std_error * box_vol,
        n_mc,
    ))
}

/// Tube bent by `angle` at the origin: `(-L1, 0, ..)`, `0`, `L2 (cos, sin, ..)`.
/// Angle 0 is aligned, π folds the second segment back onto the first.
pub fn bent_tube<const D: usize>(l1: f64, l2: f64, angle: f64, eps: f64) -> TubeSpec<D> {
    let mut a = [0.0; 3];
    a[0] = -l1;
    let mut c = [0.0; 3];
    c[0] = l2 * angle.cos();
    c[1] = l2 * angle.sin();
    TubeSpec {
        waypoints: [vector(&a[..D]), Vector::zeros(), vector(&c[..D])],
        eps,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub angle: f64,
    pub volume: EstimateWithCI,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TubeSweepReport {
    pub d: usize,
    pub rows: Vec<SweepRow>,
    pub aligned_closed_form: f64,
    /// Aligned volume is at least every other volume up to 4 combined sigma.
    pub aligned_is_max: bool,
    /// Aligned MC volume within 4 sigma of the closed form.
    pub aligned_matches_closed_form: bool,
}

impl TubeSweepReport {
    pub fn passed(&self) -> bool {
        self.aligned_is_max && self.aligned_matches_closed_form
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Invalid(e.to_string());
        out.write_record(["d", "angle", "volume", "std_error"])
            .map_err(io)?;
        for r in &self.rows {
            out.write_record([
                self.d.to_string(),
                format!("{:.17e}", r.angle),
                format!("{:.17e}", r.volume.mean),
                format!("{:.17e}", r.volume.std_error),
            ])
            .map_err(io)?;
        }
        out.flush().map_err(|e| Error::Invalid(e.to_string()))
    }
}

/// Sweeps the bend angle over `n_angles` values in `[0, π]`.
pub fn verify_tube_lemma<const D: usize>(
    lengths: (f64, f64),
    eps: f64,
    n_angles: usize,
    n_mc: usize,
    seed: u64,
) -> Result<TubeSweepReport> {
    let (l1, l2) = lengths;
    if !(l1 > 0.0 && l2 > 0.0 && eps > 0.0) || n_angles < 2 {
        return Err(Error::Invalid(
            "lengths and eps must be positive, n_angles >= 2".into(),
        ));
    }
    let rows = (0..n_angles)
        .map(|j| {
            let angle = PI * j as f64 / (n_angles - 1) as f64;
            let spec = bent_tube::<D>(l1, l2, angle, eps);
            Ok(SweepRow {
                angle,
                volume: tube_volume_mc(&spec, n_mc, sample_key(seed, j as u64))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let a = rows[0].volume;
    let aligned_is_max = rows
        .iter()
        .all(|r| r.volume.mean <= a.mean + 4.0 * a.std_error.hypot(r.volume.std_error));
    let aligned_closed_form = capsule_volume::<D>(l1 + l2, eps);
    let aligned_matches_closed_form = (a.mean - aligned_closed_form).abs() <= 4.0 * a.std_error;
    Ok(TubeSweepReport {
        d: D,
        rows,
        aligned_closed_form,
        aligned_is_max,
        aligned_matches_closed_form,
    })
}

/// Scalar product of the normalised post-collision directions for normals
/// `σ` and `ω`, parametrised by `cos θ0 = v̂·σ`, `cos θ = v̂·ω` and the
/// squared component `u2` of `ω` orthogonal to the plane of `v` and `σ`.
/// The sign of `sin θ` selects the side of that plane.
pub fn appendix_f(theta0: f64, theta: f64, u2: f64, r: f64) -> Result<f64> {
    let (s0, c0) = theta0.sin_cos();
    let (s, c) = theta.sin_cos();
    if !(0.0..=1.0).contains(&u2) || u2 + c * c > 1.0 + 1e-12 {
        return Err(Error::AppendixDomain);
    }
    Restitution::new(r)?;
    let b = s.signum() * (1.0 - u2 - c * c).max(0.0).sqrt();
    let k = 1.0 + r;
    let num = 1.0 - k * c0 * c0 - k * c * c + k * k * c0 * c * (c0 * c + s0 * b);
    let den = ((1.0 - (1.0 - r * r) * c0 * c0) * (1.0 - (1.0 - r * r) * c * c)).sqrt();
    Ok(num / den)
}

/// The angle θ1 at which the two scattered directions are opposite.
pub fn theta1(theta0: f64, r: f64) -> f64 {
    let (s0, c0) = theta0.sin_cos();
    (-r * c0).atan2(s0)
}

/// `(θ0, θ, u2)` of `(v, σ, ω)` in the convention of [`appendix_f`].
pub fn decompose(v: &Vector<3>, sigma: &Vector<3>, omega: &Vector<3>) -> (f64, f64, f64) {
    let e = v.normalize();
    let c0 = e.dot(sigma);
    let n = (sigma - e * c0).normalize();
    let s0 = (1.0 - c0 * c0).max(0.0).sqrt();
    let c = e.dot(omega).clamp(-1.0, 1.0);
    let b = omega.dot(&n);
    let theta = b.signum() * c.acos();
    (s0.atan2(c0), theta, (1.0 - c * c - b * b).max(0.0))
}

/// Direct evaluation: `(κ_σ v / |κ_σ v|)·(κ_ω v / |κ_ω v|)`.
pub fn appendix_f_raw<const D: usize>(
    v: &Vector<D>,
    sigma: &Vector<D>,
    omega: &Vector<D>,
    r: f64,
) -> f64 {
    let a = scatter_unchecked(v, sigma, r).normalize();
    let b = scatter_unchecked(v, omega, r).normalize();
    a.dot(&b)
}

/// Measure of incoming normals `ω` (v·ω < 0) after which the new direction is
/// within `1 - δ` of `±p`, by uniform sampling of the sphere.
pub fn colinearity_pathological_measure<const D: usize>(
    v: &Vector<D>,
    p: &Vector<D>,
    delta: f64,
    r: Restitution,
    n_mc: usize,
    seed: u64,
) -> Result<EstimateWithCI> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Invalid("delta must be in (0, 1]".into()));
    }
    if v.norm() == 0.0 {
        return Err(Error::ZeroVelocity);
    }
    if (p.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::NonUnitNormal(p.norm()));
    }
    let rr = r.value();
    let k = count_hits(n_mc, seed, |rng| {
        let om: Vector<D> = sample_unit_sphere(rng);
        if v.dot(&om) >= 0.0 {
            return false;
        }
        let w = scatter_unchecked(v, &om, rr).normalize();
        1.0 - w.dot(p).abs() <= delta
    });
    let s = sphere_measure::<D>();
    let e = EstimateWithCI::proportion(k, n_mc);
    Ok(EstimateWithCI::new(e.mean * s, e.std_error * s, n_mc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingRow {
    pub pair: usize,
    pub delta: f64,
    pub measure: EstimateWithCI,
    pub measure_quarter: EstimateWithCI,
    pub ratio: f64,
    /// 4-sigma slack on the ratio from both estimates.
    pub ratio_slack: f64,
    /// `measure / sqrt(delta)`.
    pub sqrt_constant: f64,
}

impl ScalingRow {
    pub fn within(&self, bound: f64) -> bool {
        self.ratio <= bound * (1.0 + self.ratio_slack)
    }
}

/// Ratios `m(δ)/m(δ/4)` for `n_pairs` random `(v, p)` at each `δ`.
pub fn colinearity_scaling<const D: usize>(
    r: Restitution,
    deltas: &[f64],
    n_pairs: usize,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    let mut rng = stream(seed, u64::MAX);
    let pairs: Vec<(Vector<D>, Vector<D>)> = (0..n_pairs)
        .map(|_| {
            let speed = rng.random_range(0.5..2.0);
            (
                sample_unit_sphere::<D, _>(&mut rng) * speed,
                sample_unit_sphere(&mut rng),
            )
        })
        .collect();
    let mut rows = Vec::new();
    for (i, (v, p)) in pairs.iter().enumerate() {
        for (j, &delta) in deltas.iter().enumerate() {
            let key = sample_key(seed, (i * deltas.len() + j) as u64);
            let m = colinearity_pathological_measure(v, p, delta, r, n_mc, sample_key(key, 0))?;
            let q =
                colinearity_pathological_measure(v, p, delta / 4.0, r, n_mc, sample_key(key, 1))?;
            let ratio = m.mean / q.mean;
            let rel = |e: &EstimateWithCI| {
                if e.mean > 0.0 {
                    e.std_error / e.mean
                } else {
                    f64::INFINITY
                }
            };
            rows.push(ScalingRow {
                pair: i,
                delta,
                measure: m,
                measure_quarter: q,
                ratio,
                ratio_slack: 4.0 * rel(&m).hypot(rel(&q)),
                sqrt_constant: m.mean / delta.sqrt(),
            });
        }
    }
    Ok(rows)
}

pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], d: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Invalid(e.to_string());
    out.write_record([
        "d",
        "pair",
        "delta",
        "measure",
        "measure_quarter",
        "ratio",
        "ratio_slack",
        "sqrt_constant",
    ])
    .map_err(io)?;
    for r in rows {
        out.write_record([
            d.to_string(),
            r.pair.to_string(),
            format!("{:e}", r.delta),
            format!("{:.17e}", r.measure.mean),
            format!("{:.17e}", r.measure_quarter.mean),
            format!("{:.17e}", r.ratio),
            format!("{:.17e}", r.ratio_slack),
            format!("{:.17e}", r.sqrt_constant),
        ])
        .map_err(io)?;
    }
    out.flush().map_err(|e| Error::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_tube_area() {
        let spec = TubeSpec {
            waypoints: [
                vector::<2>(&[0.0, 0.0]),
                vector(&[1.0, 0.0]),
                vector(&[2.0, 0.0]),
            ],
            eps: 0.1,
        };
        let e = tube_volume_mc(&spec, 1_000_000, 1).unwrap();
        let exact = 0.4 + PI * 0.01;
        assert!((exact - 0.431_415_9).abs() < 1e-7);
        assert!((e.mean - exact).abs() < 4.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn bend_is_smaller() {
        let straight = TubeSpec {
            waypoints: [
                vector::<2>(&[0.0, 0.0]),
                vector(&[1.0, 0.0]),
                vector(&[2.0, 0.0]),
            ],
            eps: 0.1,
        };
        let bend = TubeSpec {
            waypoints: [
                vector::<2>(&[0.0, 0.0]),
                vector(&[1.0, 0.0]),
                vector(&[1.0, 1.0]),
            ],
            eps: 0.1,
        };
        let a = tube_volume_mc(&straight, 1_000_000, 2).unwrap();
        let b = tube_volume_mc(&bend, 8_000_000, 3).unwrap();
        // the corner loses eps² (tan(α/2) - α/2) ≈ 2.1e-3 against the straight tube
        assert!(a.mean - b.mean > 4.0 * a.std_error.hypot(b.std_error));
        assert!(
            (a.mean - b.mean - 0.01 * (1.0 - PI / 4.0)).abs()
                < 4.0 * a.std_error.hypot(b.std_error)
        );
        // union bounds
        let cap = capsule_volume::<2>(1.0, 0.1);
        assert!(b.mean <= 2.0 * cap + 4.0 * b.std_error && b.mean >= cap - 4.0 * b.std_error);
    }

    #[test]
    fn tube_validation() {
        let o = vector::<2>(&[0.0, 0.0]);
        assert!(tube_volume_mc(
            &TubeSpec {
                waypoints: [o, o, vector(&[1.0, 0.0])],
                eps: 0.1
            },
            1000,
            0
        )
        .is_err());
        let s = bent_tube::<2>(1.0, 1.0, 1.0, 0.0);
        assert!(s.validate().is_err());
        assert!(tube_volume_mc(&bent_tube::<2>(1.0, 1.0, 1.0, 0.1), 10, 0).is_err());
    }

    #[test]
    fn backtracking_is_one_capsule() {
        let e = tube_volume_mc(&bent_tube::<3>(1.0, 1.0, PI, 0.1), 200_000, 4).unwrap();
        assert!((e.mean - capsule_volume::<3>(1.0, 0.1)).abs() < 4.0 * e.std_error);
    }

    #[test]
    fn appendix_endpoints() {
        for r in [0.3, 0.5, 0.9] {
            for j in 0..50 {
                let t0 = 0.5 * PI + (j as f64 + 0.5) * 0.5 * PI / 50.0;
                assert!((appendix_f(t0, t0, 0.0, r).unwrap() - 1.0).abs() < 1e-10);
                assert!((appendix_f(t0, theta1(t0, r), 0.0, r).unwrap() + 1.0).abs() < 1e-10);
                let c0 = t0.cos();
                let g = |x: f64| (1.0 - (1.0 + r) * x) / (1.0 - (1.0 - r * r) * x).sqrt();
                assert!((appendix_f(t0, 1.5 * PI, 0.0, r).unwrap() - g(c0 * c0)).abs() < 1e-12);
            }
        }
        assert!(matches!(
            appendix_f(1.0, 0.0, 0.5, 0.5),
            Err(Error::AppendixDomain)
        ));
        assert!(appendix_f(1.0, 1.0, -0.1, 0.5).is_err());
    }

    #[test]
    fn raw_vector_cross_check() {
        let mut rng = stream(11, 0);
        for _ in 0..10_000 {
            let v: Vector<3> = sample_unit_sphere(&mut rng);
            let s: Vector<3> = sample_unit_sphere(&mut rng);
            let w: Vector<3> = sample_unit_sphere(&mut rng);
            let r = rng.random_range(0.05..1.0);
            let (t0, t, u2) = decompose(&v, &s, &w);
            let f = appendix_f(t0, t, u2, r).unwrap();
            assert!((f - appendix_f_raw(&v, &s, &w, r)).abs() < 1e-10);
            assert!(f.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn colinearity_full_delta() {
        let r = Restitution::new(0.5).unwrap();
        let v = vector::<2>(&[1.0, 0.3]);
        let p = vector::<2>(&[0.0, 1.0]);
        let e = colinearity_pathological_measure(&v, &p, 1.0, r, 100_000, 0).unwrap();
        assert!((e.mean - PI).abs() < 4.0 * e.std_error + 1e-12);
        let small =
            colinearity_pathological_measure(&vector::<2>(&[1.0, 0.0]), &p, 1e-4, r, 1_000_000, 1)
                .unwrap();
        assert!(small.mean > 0.0 && small.mean < 0.1);
        assert!(colinearity_pathological_measure(&v, &p, 0.0, r, 10, 0).is_err());
        assert!(colinearity_pathological_measure(&Vector::zeros(), &p, 0.5, r, 10, 0).is_err());
    }
}
