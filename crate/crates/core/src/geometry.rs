//! Vectors in d = 2 or 3, ray/sphere intersection, sampling on the unit
//! sphere and quadrature rules over it.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::SVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Vector<const D: usize> = SVector<f64, D>;

pub(crate) const fn check_dim<const D: usize>() {
    assert!(D == 2 || D == 3, "only d = 2 and d = 3 are supported");
}

/// Build a vector from a slice of length `D`.
pub fn vector<const D: usize>(c: &[f64]) -> Vector<D> {
    Vector::<D>::from_column_slice(c)
}

/// |S^{d-1}|.
pub fn sphere_measure<const D: usize>() -> f64 {
    const { check_dim::<D>() };
    if D == 2 {
        2.0 * PI
    } else {
        4.0 * PI
    }
}

/// Volume of the unit ball in R^d.
pub fn unit_ball_volume<const D: usize>() -> f64 {
    const { check_dim::<D>() };
    if D == 2 {
        PI
    } else {
        4.0 * PI / 3.0
    }
}

/// Volume of the unit ball in R^{d-1}: the collision cross-section of a
/// radius-1 scatterer.
pub fn cross_section<const D: usize>() -> f64 {
    const { check_dim::<D>() };
    if D == 2 {
        2.0
    } else {
        PI
    }
}

pub fn ball_volume<const D: usize>(radius: f64) -> f64 {
    unit_ball_volume::<D>() * radius.powi(D as i32)
}

/// Smallest `s >= 0` with `|x + s v - center| = eps`.
///
/// A start on the boundary counts as a hit at `s = 0` when moving inward and
/// as no hit when moving outward. Grazing rays are misses.
pub fn ray_sphere_first_hit<const D: usize>(
    x: &Vector<D>,
    v: &Vector<D>,
    center: &Vector<D>,
    eps: f64,
) -> Result<Option<f64>> {
    let a = v.norm_squared();
    if a == 0.0 {
        return Err(Error::ZeroVelocity);
    }
    let w = x - center;
    let b = w.dot(v);
    let c = w.norm_squared() - eps * eps;
    let eps2 = eps * eps;
    if c.abs() <= 1e-10 * eps2 {
        return Ok(if b < 0.0 { Some(0.0) } else { None });
    }
    if c < 0.0 {
        return Err(Error::StartedInside);
    }
    if b >= 0.0 {
        return Ok(None);
    }
    let disc = b * b - a * c;
    if disc < 1e-14 * a * eps2 {
        return Ok(None);
    }
    Ok(Some(c / (-b + disc.sqrt())))
}

/// Unit normal of the scatterer at a contact point, pointing outward.
pub fn outward_normal_at_hit<const D: usize>(
    x_hit: &Vector<D>,
    center: &Vector<D>,
    eps: f64,
) -> Result<Vector<D>> {
    let w = x_hit - center;
    let n = w.norm();
    if (n - eps).abs() > 1e-9 * eps {
        return Err(Error::PointNotOnSphere);
    }
    Ok(w / n)
}

pub fn sample_unit_sphere<const D: usize, R: Rng + ?Sized>(rng: &mut R) -> Vector<D> {
    const { check_dim::<D>() };
    loop {
        let g = Vector::<D>::from_fn(|_, _| rng.sample(StandardNormal));
        let n = g.norm();
        if n > 1e-12 {
            return g / n;
        }
    }
}

/// Uniform point in the ball `B(center, radius)`.
pub fn sample_in_ball<const D: usize, R: Rng + ?Sized>(
    center: &Vector<D>,
    radius: f64,
    rng: &mut R,
) -> Vector<D> {
    let dir = sample_unit_sphere::<D, R>(rng);
    let u: f64 = rng.random();
    center + dir * (radius * u.powf(1.0 / D as f64))
}

/// Euclidean distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance<const D: usize>(p: &Vector<D>, a: &Vector<D>, b: &Vector<D>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let s = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * s)).norm()
}

/// Unit vectors completing `e` (assumed unit) to an orthonormal basis.
pub fn orthonormal_complement<const D: usize>(e: &Vector<D>) -> Vec<Vector<D>> {
    const { check_dim::<D>() };
    if D == 2 {
        return vec![vector(&[-e[1], e[0]])];
    }
    let mut k = 0;
    for i in 1..D {
        if e[i].abs() < e[k].abs() {
            k = i;
        }
    }
    let mut a = Vector::<D>::zeros();
    a[k] = 1.0;
    let u = (a - e * e.dot(&a)).normalize();
    let w = vector::<3>(&[e[0], e[1], e[2]]).cross(&vector::<3>(&[u[0], u[1], u[2]]));
    vec![u, vector(&[w[0], w[1], w[2]])]
}

/// Gauss-Legendre nodes and weights on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(NonZeroUsize::new(n.max(1)).unwrap());
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    rule.as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (mid + half * x, half * w))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SphereQuadrature<const D: usize> {
    pub nodes: Vec<(Vector<D>, f64)>,
    pub order: usize,
}

impl<const D: usize> SphereQuadrature<D> {
    pub fn integrate<F: FnMut(&Vector<D>) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().map(|(w, wt)| wt * f(w)).sum()
    }

    pub fn weight_sum(&self) -> f64 {
        self.nodes.iter().map(|(_, w)| w).sum()
    }
}

/// d = 2: `order` equispaced angles. d = 3: Gauss-Legendre in the cosine of
/// the angle to e1, split at the equator (`order/2` nodes per half), times
/// `2·order` equispaced azimuths.
pub fn build_quadrature<const D: usize>(order: usize) -> Result<SphereQuadrature<D>> {
    const { check_dim::<D>() };
    if order < 4 {
        return Err(Error::QuadratureOrder(order));
    }
    let mut nodes = Vec::new();
    if D == 2 {
        let h = 2.0 * PI / order as f64;
        for j in 0..order {
            let th = h * j as f64;
            nodes.push((vector(&[th.cos(), th.sin()]), h));
        }
    } else {
        let half = order.div_ceil(2);
        let n_phi = 2 * order;
        let dphi = 2.0 * PI / n_phi as f64;
        let mut polar = gauss_legendre(half, -1.0, 0.0);
        polar.extend(gauss_legendre(half, 0.0, 1.0));
        for (c, w) in polar {
            let s = (1.0 - c * c).max(0.0).sqrt();
            for j in 0..n_phi {
                let phi = dphi * j as f64;
                nodes.push((vector(&[c, s * phi.cos(), s * phi.sin()]), w * dphi));
            }
        }
    }
    Ok(SphereQuadrature { nodes, order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn v2(x: f64, y: f64) -> Vector<2> {
        vector(&[x, y])
    }

    #[test]
    fn hit_examples() {
        let o = v2(0.0, 0.0);
        let e = v2(1.0, 0.0);
        let s = ray_sphere_first_hit(&o, &e, &v2(2.0, 0.0), 0.5)
            .unwrap()
            .unwrap();
        assert!((s - 1.5).abs() < 1e-15);
        assert_eq!(
            ray_sphere_first_hit(&o, &e, &v2(0.0, 2.0), 0.5).unwrap(),
            None
        );
        let s = ray_sphere_first_hit(&o, &e, &v2(2.0, 0.3), 0.5)
            .unwrap()
            .unwrap();
        // bisection on |x + s v - c| - eps over the entry interval
        let g = |s: f64| (v2(s, 0.0) - v2(2.0, 0.3)).norm() - 0.5;
        let (mut lo, mut hi) = (0.0, 2.0);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if g(m) > 0.0 {
                lo = m;
            } else {
                hi = m;
            }
        }
        assert!((s - lo).abs() < 1e-12);
        assert!((s - 1.6).abs() < 1e-12);
    }

    #[test]
    fn hit_errors_and_boundary() {
        let c = v2(0.0, 0.0);
        assert_eq!(
            ray_sphere_first_hit(&v2(1.0, 0.0), &v2(0.0, 0.0), &c, 0.5),
            Err(Error::ZeroVelocity)
        );
        assert_eq!(
            ray_sphere_first_hit(&v2(0.1, 0.0), &v2(1.0, 0.0), &c, 0.5),
            Err(Error::StartedInside)
        );
        let on = v2(0.5, 0.0);
        assert_eq!(
            ray_sphere_first_hit(&on, &v2(1.0, 0.0), &c, 0.5).unwrap(),
            None
        );
        assert_eq!(
            ray_sphere_first_hit(&on, &v2(-1.0, 0.0), &c, 0.5).unwrap(),
            Some(0.0)
        );
        // tangent ray
        assert_eq!(
            ray_sphere_first_hit(&v2(-2.0, 0.5), &v2(1.0, 0.0), &c, 0.5).unwrap(),
            None
        );
    }

    #[test]
    fn normal_examples() {
        let c = v2(2.0, 0.0);
        assert!(
            (outward_normal_at_hit(&v2(1.5, 0.0), &c, 0.5).unwrap() - v2(-1.0, 0.0)).norm() < 1e-15
        );
        assert!(
            (outward_normal_at_hit(&v2(2.0, 0.5), &c, 0.5).unwrap() - v2(0.0, 1.0)).norm() < 1e-15
        );
        assert!(
            (outward_normal_at_hit(&v2(2.3, 0.4), &c, 0.5).unwrap() - v2(0.6, 0.8)).norm() < 1e-12
        );
        assert_eq!(
            outward_normal_at_hit(&v2(2.3, 0.0), &c, 0.5),
            Err(Error::PointNotOnSphere)
        );
    }

    #[test]
    fn sphere_samples_unit_and_centred() {
        let mut rng = stream(11, 0);
        let n = 1_000_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let w: Vector<2> = sample_unit_sphere(&mut rng);
            assert!((w.norm() - 1.0).abs() < 1e-12);
            mean[0] += w[0];
            mean[1] += w[1];
        }
        let sigma = 1.0 / (2.0 * n as f64).sqrt();
        for m in mean {
            assert!((m / n as f64).abs() < 4.0 * sigma);
        }
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let w: Vector<3> = sample_unit_sphere(&mut rng);
            acc += w[0].abs();
            acc2 += w[0] * w[0];
        }
        let m = acc / n as f64;
        let sd = ((acc2 / n as f64 - m * m) / n as f64).sqrt();
        assert!((m - 0.5).abs() < 4.0 * sd);
    }

    #[test]
    fn quadrature_weights_and_nodes() {
        let q = build_quadrature::<2>(8).unwrap();
        assert_eq!(q.nodes.len(), 8);
        assert!((q.weight_sum() - 2.0 * PI).abs() < 1e-12 * 2.0 * PI);
        for order in [4, 16, 64] {
            let q = build_quadrature::<3>(order).unwrap();
            assert!((q.weight_sum() - 4.0 * PI).abs() < 1e-12 * 4.0 * PI);
            for (w, _) in &q.nodes {
                assert!((w.norm() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(
            build_quadrature::<2>(3).unwrap_err(),
            Error::QuadratureOrder(3)
        );
    }

    #[test]
    fn uniform_circle_rule_error_on_abs_cos() {
        // The equispaced rule sums |cos| to 2 h cot(h/2) when order is a
        // multiple of 4, an O(h^2) deficit caused by the kinks.
        for order in [256usize, 1024] {
            let q = build_quadrature::<2>(order).unwrap();
            let val = q.integrate(|w| w[0].abs());
            let h = 2.0 * PI / order as f64;
            let exact_sum = 2.0 * h / (0.5 * h).tan();
            assert!((val - exact_sum).abs() < 1e-12);
            assert!((val - 4.0).abs() < h * h / 3.0 * 1.01);
        }
        let q = build_quadrature::<3>(64).unwrap();
        assert!((q.integrate(|w| w[0].abs()) - 2.0 * PI).abs() < 1e-8);
    }

    #[test]
    fn d3_rule_converges_on_smooth_integrand() {
        // exp(w.a) integrates to 4 pi sinh|a|/|a|
        let a = vector::<3>(&[0.3, -0.7, 0.5]);
        let exact = 4.0 * PI * a.norm().sinh() / a.norm();
        let err = |o| {
            (build_quadrature::<3>(o)
                .unwrap()
                .integrate(|w| w.dot(&a).exp())
                - exact)
                .abs()
        };
        assert!(err(8) < 1e-6);
        assert!(err(16) < 1e-13);
    }

    #[test]
    fn complement_is_orthonormal() {
        let mut rng = stream(3, 1);
        for _ in 0..100 {
            let e: Vector<3> = sample_unit_sphere(&mut rng);
            let c = orthonormal_complement(&e);
            assert!((c[0].norm() - 1.0).abs() < 1e-12 && (c[1].norm() - 1.0).abs() < 1e-12);
            assert!(
                c[0].dot(&e).abs() < 1e-12
                    && c[1].dot(&e).abs() < 1e-12
                    && c[0].dot(&c[1]).abs() < 1e-12
            );
        }
    }

    #[test]
    fn segment_distance() {
        let a = v2(0.0, 0.0);
        let b = v2(1.0, 0.0);
        assert!((point_segment_distance(&v2(0.5, 0.3), &a, &b) - 0.3).abs() < 1e-15);
        assert!((point_segment_distance(&v2(2.0, 0.0), &a, &b) - 1.0).abs() < 1e-15);
        assert!((point_segment_distance(&v2(-3.0, 4.0), &a, &b) - 5.0).abs() < 1e-15);
    }
}
