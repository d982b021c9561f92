//! The inelastic reflection law and the constants of its collision kernel.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_quadrature, SphereQuadrature, Vector};

/// Restitution coefficient, `0 < r <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Restitution(f64);

impl Restitution {
    pub fn new(r: f64) -> Result<Self> {
        if r > 0.0 && r <= 1.0 {
            Ok(Restitution(r))
        } else {
            Err(Error::Restitution(r))
        }
    }

    pub fn elastic() -> Self {
        Restitution(1.0)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Restitution {
    type Error = Error;
    fn try_from(r: f64) -> Result<Self> {
        Restitution::new(r)
    }
}

impl From<Restitution> for f64 {
    fn from(r: Restitution) -> f64 {
        r.0
    }
}

fn check_unit<const D: usize>(omega: &Vector<D>) -> Result<()> {
    let n = omega.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::NonUnitNormal(n));
    }
    Ok(())
}

/// `v' = v - (1+r)(v·ω)ω`.
pub fn scatter<const D: usize>(
    v: &Vector<D>,
    omega: &Vector<D>,
    r: Restitution,
) -> Result<Vector<D>> {
    check_unit(omega)?;
    Ok(scatter_unchecked(v, omega, r.0))
}

/// `'v = v - (1+1/r)(v·ω)ω`, the pre-collisional velocity leading to `v`.
pub fn inverse_scatter<const D: usize>(
    v: &Vector<D>,
    omega: &Vector<D>,
    r: Restitution,
) -> Result<Vector<D>> {
    check_unit(omega)?;
    Ok(inverse_scatter_unchecked(v, omega, r.0))
}

#[inline]
pub(crate) fn scatter_unchecked<const D: usize>(
    v: &Vector<D>,
    omega: &Vector<D>,
    r: f64,
) -> Vector<D> {
    v - omega * ((1.0 + r) * v.dot(omega))
}

#[inline]
pub(crate) fn inverse_scatter_unchecked<const D: usize>(
    v: &Vector<D>,
    omega: &Vector<D>,
    r: f64,
) -> Vector<D> {
    v - omega * ((1.0 + 1.0 / r) * v.dot(omega))
}

/// Absolute Jacobian determinant of `v -> scatter(v, ω, r)`.
pub fn scatter_jacobian(r: Restitution) -> f64 {
    r.0
}

type ConstantCache = Mutex<HashMap<(usize, usize, u8), f64>>;

fn cache() -> &'static ConstantCache {
    static CACHE: std::sync::OnceLock<ConstantCache> = std::sync::OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn cached_moment<const D: usize>(quad: &SphereQuadrature<D>, power: i32) -> f64 {
    let key = (D, quad.order, power as u8);
    if let Some(&v) = cache().lock().unwrap().get(&key) {
        return v;
    }
    let val = quad.integrate(|w| w[0].abs().powi(power));
    cache().lock().unwrap().insert(key, val);
    val
}

/// `C_d = ∫ |e1·σ| dσ` by the given rule.
pub fn collision_constant_cd<const D: usize>(quad: &SphereQuadrature<D>) -> f64 {
    cached_moment(quad, 1)
}

/// `K_d = ∫ |e1·ω|³ dω` by the given rule.
pub fn cubed_cosine_constant<const D: usize>(quad: &SphereQuadrature<D>) -> f64 {
    cached_moment(quad, 3)
}

/// Rule used for the kernel constants: fine enough that both constants are
/// accurate to better than 1e-8.
pub fn reference_quadrature<const D: usize>() -> SphereQuadrature<D> {
    let order = if D == 2 { 1 << 16 } else { 64 };
    build_quadrature::<D>(order).expect("valid order")
}

/// `C_d` from the reference rule.
pub fn cd<const D: usize>() -> f64 {
    collision_constant_cd(&reference_quadrature::<D>())
}

/// `K_d` from the reference rule.
pub fn kd<const D: usize>() -> f64 {
    cubed_cosine_constant(&reference_quadrature::<D>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_unit_sphere, vector};
    use crate::rng::stream;
    use rand::Rng;
    use std::f64::consts::PI;

    fn v2(x: f64, y: f64) -> Vector<2> {
        vector(&[x, y])
    }

    #[test]
    fn restitution_range() {
        assert!(Restitution::new(0.0).is_err());
        assert!(Restitution::new(1.2).is_err());
        assert!(Restitution::new(f64::NAN).is_err());
        assert_eq!(Restitution::new(1.0).unwrap(), Restitution::elastic());
    }

    #[test]
    fn scatter_examples() {
        let h = Restitution::new(0.5).unwrap();
        assert_eq!(
            scatter(&v2(1.0, 0.0), &v2(-1.0, 0.0), h).unwrap(),
            v2(-0.5, 0.0)
        );
        assert_eq!(
            scatter(&v2(1.0, 0.0), &v2(0.0, 1.0), h).unwrap(),
            v2(1.0, 0.0)
        );
        assert_eq!(
            scatter(&v2(1.0, 0.0), &v2(-1.0, 0.0), Restitution::elastic()).unwrap(),
            v2(-1.0, 0.0)
        );
        assert_eq!(
            inverse_scatter(&v2(-0.5, 0.0), &v2(-1.0, 0.0), h).unwrap(),
            v2(1.0, 0.0)
        );
        assert_eq!(
            inverse_scatter(&v2(1.0, 0.0), &v2(0.0, 1.0), h).unwrap(),
            v2(1.0, 0.0)
        );
        assert!(matches!(
            scatter(&v2(1.0, 0.0), &v2(2.0, 0.0), h),
            Err(Error::NonUnitNormal(_))
        ));
        assert!(inverse_scatter(&v2(1.0, 0.0), &v2(0.0, 0.5), h).is_err());
    }

    #[test]
    fn finite_difference_jacobian() {
        let mut rng = stream(5, 0);
        for _ in 0..100 {
            let r = Restitution::new(rng.random_range(0.05..1.0)).unwrap();
            let om: Vector<2> = sample_unit_sphere(&mut rng);
            let v = v2(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let h = 1e-6;
            let col = |e: Vector<2>| {
                (scatter(&(v + e * h), &om, r).unwrap() - scatter(&(v - e * h), &om, r).unwrap())
                    / (2.0 * h)
            };
            let c0 = col(v2(1.0, 0.0));
            let c1 = col(v2(0.0, 1.0));
            let det = c0[0] * c1[1] - c0[1] * c1[0];
            assert!((det.abs() - scatter_jacobian(r)).abs() < 1e-6);
        }
        assert_eq!(scatter_jacobian(Restitution::new(0.5).unwrap()), 0.5);
    }

    #[test]
    fn kernel_constants() {
        assert!((cd::<2>() - 4.0).abs() < 1e-8);
        assert!((cd::<3>() - 2.0 * PI).abs() < 1e-8);
        // antiderivative of |cos|^3: sin - sin^3/3 over a quarter period, times 4
        assert!((kd::<2>() - 4.0 * (1.0 - 1.0 / 3.0)).abs() < 1e-8);
        // 2 pi ∫_{-1}^{1} |c|^3 dc = pi
        assert!((kd::<3>() - PI).abs() < 1e-8);
    }

    #[test]
    fn kernel_constants_are_rotation_invariant() {
        let q = reference_quadrature::<2>();
        let mut rng = stream(9, 0);
        for _ in 0..5 {
            let e: Vector<2> = sample_unit_sphere(&mut rng);
            assert!((q.integrate(|w| w.dot(&e).abs()) - 4.0).abs() < 1e-8);
            assert!((q.integrate(|w| w.dot(&-e).abs().powi(3)) - 8.0 / 3.0).abs() < 1e-8);
        }
        // d = 3: a generic axis puts the kink across the product grid, so the
        // error decays algebraically with the order instead of vanishing.
        let e = vector::<3>(&[0.48, -0.6, 0.64]);
        let err = |o| {
            (build_quadrature::<3>(o)
                .unwrap()
                .integrate(|w| w.dot(&e).abs())
                - 2.0 * PI)
                .abs()
        };
        let (e64, e256) = (err(64), err(256));
        assert!(e64 < 1e-3 && e256 < e64 / 8.0);
    }
}
