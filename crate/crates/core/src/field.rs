//! Poisson scatterer configurations restricted to a ball.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::collision::Restitution;
use crate::error::{Error, Result};
use crate::geometry::{ball_volume, sample_in_ball, Vector};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticParams {
    pub d: usize,
    pub r: Restitution,
    pub eps: f64,
    pub mu: f64,
    pub bg_locked: bool,
}

impl KineticParams {
    pub fn new(d: usize, r: Restitution, eps: f64, mu: f64) -> Result<Self> {
        let p = KineticParams {
            d,
            r,
            eps,
            mu,
            bg_locked: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// Boltzmann-Grad scaling: `mu = eps^{-(d-1)}`.
    pub fn bg_locked(d: usize, r: Restitution, eps: f64) -> Result<Self> {
        let p = KineticParams {
            d,
            r,
            eps,
            mu: eps.powi(1 - d as i32),
            bg_locked: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d != 2 && self.d != 3 {
            return Err(Error::Dimension(self.d));
        }
        if !(self.eps > 0.0) || !(self.mu > 0.0) {
            return Err(Error::Invalid(format!(
                "eps and mu must be positive (eps={}, mu={})",
                self.eps, self.mu
            )));
        }
        if self.bg_locked {
            let s = self.mu * self.eps.powi(self.d as i32 - 1);
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Invalid(format!(
                    "Boltzmann-Grad lock requires mu*eps^(d-1) = 1, got {s}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ball<const D: usize> {
    pub center: Vector<D>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScattererField<const D: usize> {
    pub centers: Vec<Vector<D>>,
    pub region_center: Vector<D>,
    pub region_radius: f64,
    pub seed: u64,
    pub params: KineticParams,
}

impl<const D: usize> ScattererField<D> {
    pub fn empty(region: Ball<D>, params: KineticParams) -> Self {
        ScattererField {
            centers: Vec::new(),
            region_center: region.center,
            region_radius: region.radius,
            seed: 0,
            params,
        }
    }

    pub fn with_centers(centers: Vec<Vector<D>>, region: Ball<D>, params: KineticParams) -> Self {
        ScattererField {
            centers,
            ..Self::empty(region, params)
        }
    }

    /// True when some centre lies in the closed ball `B(x, eps)`.
    pub fn overlaps(&self, x: &Vector<D>) -> bool {
        let e2 = self.params.eps * self.params.eps;
        self.centers.iter().any(|c| (c - x).norm_squared() <= e2)
    }

    /// Number of centres in the closed ball `b`.
    pub fn count_in(&self, b: &Ball<D>) -> usize {
        let r2 = b.radius * b.radius;
        self.centers
            .iter()
            .filter(|c| (*c - b.center).norm_squared() <= r2)
            .count()
    }

    /// CSV dump, one centre per row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let header: Vec<&str> = ["cx", "cy", "cz"][..D].to_vec();
        let io = |e: csv::Error| Error::Invalid(e.to_string());
        out.write_record(&header).map_err(io)?;
        for c in &self.centers {
            out.write_record(c.iter().map(|x| format!("{x:.17e}")))
                .map_err(io)?;
        }
        out.flush().map_err(|e| Error::Invalid(e.to_string()))
    }
}

/// Smallest ball that contains every scatterer able to touch a particle
/// starting at `x` with speed `|v|` before time `t`.
pub fn dynamical_ball<const D: usize>(x: &Vector<D>, v: &Vector<D>, t: f64, eps: f64) -> Ball<D> {
    Ball {
        center: *x,
        radius: t * v.norm() + eps,
    }
}

/// One Poisson configuration of intensity `params.mu` in `region`.
pub fn sample_field<const D: usize>(
    region: Ball<D>,
    params: KineticParams,
    seed: u64,
) -> Result<ScattererField<D>> {
    if !(region.radius > 0.0) {
        return Err(Error::Invalid("region radius must be positive".into()));
    }
    let mean = params.mu * ball_volume::<D>(region.radius);
    if mean > 1e8 {
        return Err(Error::FieldTooDense(mean));
    }
    let mut rng = stream(seed, 0);
    let n = if mean > 0.0 {
        Poisson::new(mean)
            .map_err(|e| Error::Invalid(e.to_string()))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let centers = (0..n)
        .map(|_| sample_in_ball(&region.center, region.radius, &mut rng))
        .collect();
    Ok(ScattererField {
        centers,
        region_center: region.center,
        region_radius: region.radius,
        seed,
        params,
    })
}

/// Reports whether the start point sits inside a scatterer. The field is
/// returned untouched; callers freeze the particle instead of deleting.
pub fn filter_initial_overlap<const D: usize>(
    field: ScattererField<D>,
    x0: &Vector<D>,
) -> (ScattererField<D>, bool) {
    let o = field.overlaps(x0);
    (field, o)
}

/// Uniform draw from a ball, exposed for callers that build fields by hand.
pub fn uniform_in<const D: usize, R: Rng + ?Sized>(b: &Ball<D>, rng: &mut R) -> Vector<D> {
    sample_in_ball(&b.center, b.radius, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::vector;
    use std::f64::consts::PI;

    fn params(mu: f64) -> KineticParams {
        KineticParams::new(2, Restitution::new(0.5).unwrap(), 0.1, mu).unwrap()
    }

    #[test]
    fn dynamical_ball_examples() {
        let o = vector::<2>(&[0.0, 0.0]);
        let b = dynamical_ball(&o, &vector(&[2.0, 0.0]), 3.0, 0.1);
        assert_eq!(b.center, o);
        assert!((b.radius - 6.1).abs() < 1e-15);
        assert_eq!(dynamical_ball(&o, &o, 3.0, 0.1).radius, 0.1);
        assert_eq!(
            dynamical_ball(&o, &vector(&[2.0, 0.0]), 0.0, 0.1).radius,
            0.1
        );
    }

    #[test]
    fn params_validation() {
        let r = Restitution::new(0.5).unwrap();
        let p = KineticParams::bg_locked(2, r, 0.05).unwrap();
        assert!((p.mu - 20.0).abs() < 1e-12);
        assert!(KineticParams::bg_locked(3, r, 0.1).unwrap().mu - 100.0 < 1e-9);
        let bad = KineticParams { mu: 3.0, ..p };
        assert!(bad.validate().is_err());
        assert!(KineticParams::new(4, r, 0.1, 1.0).is_err());
        assert!(KineticParams::new(2, r, 0.0, 1.0).is_err());
    }

    #[test]
    fn deterministic_and_confined() {
        let region = Ball {
            center: vector::<2>(&[1.0, -1.0]),
            radius: 3.0,
        };
        let a = sample_field(region, params(2.0), 42).unwrap();
        let b = sample_field(region, params(2.0), 42).unwrap();
        assert_eq!(a.centers, b.centers);
        for c in &a.centers {
            assert!((c - region.center).norm() <= region.radius);
        }
        let c = sample_field(region, params(2.0), 43).unwrap();
        assert_ne!(a.centers, c.centers);
    }

    #[test]
    fn vanishing_intensity_gives_empty_field() {
        let region = Ball {
            center: vector::<2>(&[0.0, 0.0]),
            radius: 1.0,
        };
        for s in 0..100 {
            assert!(sample_field(region, params(1e-300), s)
                .unwrap()
                .centers
                .is_empty());
        }
    }

    #[test]
    fn too_dense_is_rejected() {
        let region = Ball {
            center: vector::<2>(&[0.0, 0.0]),
            radius: 1e5,
        };
        assert!(matches!(
            sample_field(region, params(1.0), 0),
            Err(Error::FieldTooDense(_))
        ));
    }

    #[test]
    fn mean_count_matches_intensity() {
        let region = Ball {
            center: vector::<2>(&[0.0, 0.0]),
            radius: 10.0,
        };
        let n = 10_000;
        let total: usize = (0..n)
            .map(|s| sample_field(region, params(1.0), s).unwrap().centers.len())
            .sum();
        let mean = total as f64 / n as f64;
        let lam = 100.0 * PI;
        assert!((mean - lam).abs() < 4.0 * (lam / n as f64).sqrt());
    }

    #[test]
    fn overlap_detection() {
        let region = Ball {
            center: vector::<2>(&[0.0, 0.0]),
            radius: 1.0,
        };
        let x0 = vector::<2>(&[0.0, 0.0]);
        let (_, o) = filter_initial_overlap(ScattererField::empty(region, params(1.0)), &x0);
        assert!(!o);
        let f = ScattererField::with_centers(vec![vector(&[0.05, 0.0])], region, params(1.0));
        let (f2, o) = filter_initial_overlap(f.clone(), &x0);
        assert!(o);
        assert_eq!(f2, f);
    }

    #[test]
    fn csv_dump_header() {
        let region = Ball {
            center: vector::<3>(&[0.0, 0.0, 0.0]),
            radius: 1.0,
        };
        let p = KineticParams::new(3, Restitution::elastic(), 0.1, 5.0).unwrap();
        let f = sample_field(region, p, 1).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("cx,cy,cz\n"));
        assert_eq!(s.lines().count(), f.centers.len() + 1);
    }
}
