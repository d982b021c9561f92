//! Series solutions of the linear inelastic Boltzmann equation: the adjoint
//! series ψ (observables of a Dirac start), the Duhamel series for f, their
//! truncation tails, and the kinetic-energy bound.
//!
//! The collision operator integrates `λ|v·ω|` over the whole sphere. With
//! [`Kernel::FullSphere`] λ = 1; with [`Kernel::Hemisphere`] only incoming
//! directions (v·ω ≤ 0) count, which halves the rate and matches a particle
//! among Poisson scatterers at density `eps^{1-d}`.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::collision::{cd, inverse_scatter_unchecked, kd, scatter_unchecked, Restitution};
use crate::error::{Error, Result};
use crate::geometry::{
    gauss_legendre, orthonormal_complement, sample_unit_sphere, sphere_measure, SphereQuadrature,
    Vector,
};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Kernel {
    FullSphere,
    Hemisphere,
}

impl Kernel {
    /// λ in `λ|v·ω|` over the full sphere.
    pub fn weight(self) -> f64 {
        match self {
            Kernel::FullSphere => 1.0,
            Kernel::Hemisphere => 0.5,
        }
    }

    /// Loss rate per unit speed, `λ C_d`.
    pub fn rate<const D: usize>(self) -> f64 {
        self.weight() * cd::<D>()
    }
}

/// Bounded test function with a declared sup-norm.
pub trait TestFunction<const D: usize>: Sync {
    fn eval(&self, x: &Vector<D>, v: &Vector<D>) -> f64;
    fn sup_norm(&self) -> f64;
    /// `Some(c)` when the function is identically `c`.
    fn constant_value(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl<const D: usize> TestFunction<D> for Constant {
    fn eval(&self, _: &Vector<D>, _: &Vector<D>) -> f64 {
        self.0
    }
    fn sup_norm(&self) -> f64 {
        self.0.abs()
    }
    fn constant_value(&self) -> Option<f64> {
        Some(self.0)
    }
}

/// `exp(1 - 1/(1 - s²))` for `|s| < 1`, else 0. Smooth, compactly supported,
/// maximum 1 at 0.
pub fn bump_profile(s: f64) -> f64 {
    let s2 = s * s;
    if s2 >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s2)).exp()
    }
}

/// Product bump in position and velocity, sup-norm 1.
#[derive(Debug, Clone, Copy)]
pub struct Bump<const D: usize> {
    pub x_center: Vector<D>,
    pub x_radius: f64,
    pub v_center: Vector<D>,
    pub v_radius: f64,
}

impl<const D: usize> TestFunction<D> for Bump<D> {
    fn eval(&self, x: &Vector<D>, v: &Vector<D>) -> f64 {
        let a = bump_profile((x - self.x_center).norm() / self.x_radius);
        if a == 0.0 {
            return 0.0;
        }
        a * bump_profile((v - self.v_center).norm() / self.v_radius)
    }
    fn sup_norm(&self) -> f64 {
        1.0
    }
}

/// Wraps a closure together with its sup-norm.
pub struct FnTest<F> {
    pub f: F,
    pub sup: f64,
}

impl<const D: usize, F: Fn(&Vector<D>, &Vector<D>) -> f64 + Sync> TestFunction<D> for FnTest<F> {
    fn eval(&self, x: &Vector<D>, v: &Vector<D>) -> f64 {
        (self.f)(x, v)
    }
    fn sup_norm(&self) -> f64 {
        self.sup
    }
}

/// Non-negative initial density with an optional exponential velocity moment
/// `sup f0 e^{α|v|^p} <= moment_bound`.
pub struct InitialDatum<const D: usize> {
    pub evaluator: Box<dyn Fn(&Vector<D>, &Vector<D>) -> f64 + Sync + Send>,
    pub exp_moment: Option<(f64, f64)>,
    pub moment_bound: f64,
}

impl<const D: usize> InitialDatum<D> {
    pub fn eval(&self, x: &Vector<D>, v: &Vector<D>) -> f64 {
        (self.evaluator)(x, v)
    }

    /// Checks `f0 e^{α|v|^p} <= moment_bound` on the given points.
    pub fn check_moment(&self, grid: &[(Vector<D>, Vector<D>)]) -> bool {
        let Some((alpha, p)) = self.exp_moment else {
            return false;
        };
        grid.iter().all(|(x, v)| {
            let f = self.eval(x, v);
            f >= 0.0 && f * (alpha * v.norm().powf(p)).exp() <= self.moment_bound * (1.0 + 1e-12)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum McScheme {
    /// Uniform simplex times and uniform directions, weighted by the integrand.
    Uniform,
    /// Times and directions drawn from the collision law itself.
    Collision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesConfig {
    pub k_max: usize,
    pub quad_order: usize,
    pub mc_samples: usize,
    pub tail_tol: f64,
    /// Highest k evaluated by quadrature; larger k use Monte Carlo.
    pub quad_max_k: Option<usize>,
    pub scheme: McScheme,
    pub seed: u64,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        SeriesConfig {
            k_max: 12,
            quad_order: 16,
            mc_samples: 1_000_000,
            tail_tol: 1e-6,
            quad_max_k: None,
            scheme: McScheme::Collision,
            seed: 0,
        }
    }
}

impl SeriesConfig {
    fn quad_max<const D: usize>(&self) -> usize {
        self.quad_max_k.unwrap_or(if D == 2 { 3 } else { 2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TermMethod {
    Exact,
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Term {
    pub k: usize,
    pub value: f64,
    pub std_error: f64,
    pub method: TermMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesValue {
    pub value: f64,
    /// Upper bound on the discarded terms `k > k_used`.
    pub tail_estimate: f64,
    pub k_used: usize,
    /// Monte Carlo standard error of `value` (0 when fully deterministic).
    pub std_error: f64,
    pub truncated: bool,
    pub ill_conditioned: bool,
    pub terms: Vec<Term>,
}

impl SeriesValue {
    pub fn partial_sums(&self) -> Vec<f64> {
        self.terms
            .iter()
            .scan(0.0, |acc, t| {
                *acc += t.value;
                Some(*acc)
            })
            .collect()
    }
}

/// Times `t_1 > ... > t_k` in `(0, t)` and the directions `ω_1 ... ω_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionSequence<const D: usize> {
    pub times: Vec<f64>,
    pub omegas: Vec<Vector<D>>,
}

impl<const D: usize> CollisionSequence<D> {
    pub fn k(&self) -> usize {
        self.times.len()
    }

    pub fn validate(&self, t: f64) -> Result<()> {
        if self.times.len() != self.omegas.len() {
            return Err(Error::Invalid("times and omegas differ in length".into()));
        }
        let mut prev = t;
        for &s in &self.times {
            if !(s > 0.0 && s < prev) {
                return Err(Error::Invalid(
                    "collision times must decrease inside (0, t)".into(),
                ));
            }
            prev = s;
        }
        for w in &self.omegas {
            if (w.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::NonUnitNormal(w.norm()));
            }
        }
        Ok(())
    }
}

/// `v^(0) = v`, `v^(j) = κ_{ω_j}(v^(j-1))`.
pub fn forward_velocity_chain<const D: usize>(
    v: &Vector<D>,
    seq: &CollisionSequence<D>,
    r: Restitution,
) -> Vec<Vector<D>> {
    let mut out = vec![*v];
    for w in &seq.omegas {
        let last = *out.last().unwrap();
        out.push(scatter_unchecked(&last, w, r.value()));
    }
    out
}

/// `v^{-0} = v`, `v^{-j} = κ_{ω_j}^{-1}(v^{-(j-1)})`.
pub fn backward_velocity_chain<const D: usize>(
    v: &Vector<D>,
    seq: &CollisionSequence<D>,
    r: Restitution,
) -> Vec<Vector<D>> {
    let mut out = vec![*v];
    for w in &seq.omegas {
        let last = *out.last().unwrap();
        out.push(inverse_scatter_unchecked(&last, w, r.value()));
    }
    out
}

/// `P(N > k)` for `N ~ Poisson(lam)`, summed from the upper side.
pub fn poisson_upper_tail(lam: f64, k: usize) -> f64 {
    if lam <= 0.0 {
        return 0.0;
    }
    let mut log_p = -lam + (k + 1) as f64 * lam.ln() - ln_factorial(k + 1);
    let mut sum = 0.0;
    let mut j = k + 1;
    loop {
        let p = log_p.exp();
        sum += p;
        j += 1;
        log_p += lam.ln() - (j as f64).ln();
        if (j as f64 > lam && p < 1e-18 * sum.max(1e-300)) || j > k + 10_000 {
            break;
        }
    }
    sum.min(1.0)
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|i| (i as f64).ln()).sum()
}

/// Quadrature over incoming directions `{ω : v̂·ω <= 0}`, stored in the
/// frame (v̂, complement).
struct HemiRule {
    coeffs: Vec<([f64; 3], f64)>,
}

impl HemiRule {
    fn new<const D: usize>(n: usize) -> Self {
        let n = n.max(2);
        let mut coeffs = Vec::new();
        if D == 2 {
            for (a, w) in gauss_legendre(n, 0.5 * PI, 1.5 * PI) {
                coeffs.push(([a.cos(), a.sin(), 0.0], w));
            }
        } else {
            let n_phi = n;
            let dphi = 2.0 * PI / n_phi as f64;
            for (c, w) in gauss_legendre(n.div_ceil(2).max(2), -1.0, 0.0) {
                let s = (1.0 - c * c).sqrt();
                for j in 0..n_phi {
                    let p = dphi * (j as f64 + 0.5);
                    coeffs.push(([c, s * p.cos(), s * p.sin()], w * dphi));
                }
            }
        }
        HemiRule { coeffs }
    }

    fn nodes<const D: usize>(&self, v: &Vector<D>) -> Vec<(Vector<D>, f64)> {
        let e = v.normalize();
        let comp = orthonormal_complement(&e);
        self.coeffs
            .iter()
            .map(|(c, w)| {
                let mut om = e * c[0];
                for (i, b) in comp.iter().enumerate() {
                    om += b * c[i + 1];
                }
                (om, *w)
            })
            .collect()
    }
}

struct AdjointQuad<'a, const D: usize, P: TestFunction<D> + ?Sized> {
    phi: &'a P,
    r: f64,
    a: f64,
    kfac: f64,
    rules: Vec<(Vec<(f64, f64)>, HemiRule)>,
}

impl<const D: usize, P: TestFunction<D> + ?Sized> AdjointQuad<'_, D, P> {
    /// Contribution of exactly `k` further collisions in the remaining time
    /// `tau`, starting from `(x, v)`.
    fn term(&self, k: usize, tau: f64, x: &Vector<D>, v: &Vector<D>) -> f64 {
        let speed = v.norm();
        if k == 0 {
            return (-self.a * speed * tau).exp() * self.phi.eval(&(x + v * tau), v);
        }
        if speed == 0.0 || tau <= 0.0 {
            return 0.0;
        }
        let (times, hemi) = &self.rules[k - 1];
        let dirs = hemi.nodes(v);
        let mut acc = 0.0;
        for &(u, wt) in times {
            let s = u * tau;
            let decay = (-self.a * speed * s).exp();
            let y = x + v * s;
            let mut inner = 0.0;
            for (om, wo) in &dirs {
                let vn = v.dot(om);
                let vp = scatter_unchecked(v, om, self.r);
                inner += wo * vn.abs() * self.term(k - 1, tau - s, &y, &vp);
            }
            acc += wt * tau * decay * inner;
        }
        self.kfac * acc
    }
}

fn rules_for<const D: usize>(quad_order: usize, k: usize) -> Vec<(Vec<(f64, f64)>, HemiRule)> {
    let n = quad_order.max(4);
    (0..k)
        .map(|_| (gauss_legendre(n, 0.0, 1.0), HemiRule::new::<D>(n)))
        .collect()
}

/// k-th term of ψ by nested quadrature.
pub fn adjoint_term_quadrature<const D: usize, P: TestFunction<D> + ?Sized>(
    phi: &P,
    k: usize,
    t: f64,
    x: &Vector<D>,
    v: &Vector<D>,
    r: Restitution,
    kernel: Kernel,
    quad_order: usize,
) -> f64 {
    let q = AdjointQuad {
        phi,
        r: r.value(),
        a: kernel.rate::<D>(),
        kfac: 2.0 * kernel.weight(),
        rules: rules_for::<D>(quad_order, k),
    };
    q.term(k, t, x, v)
}

fn sample_incoming<const D: usize>(v: &Vector<D>, rng: &mut Stream) -> Vector<D> {
    let e = v.normalize();
    let comp = orthonormal_complement(&e);
    if D == 2 {
        let s: f64 = rng.random_range(-1.0..1.0);
        let c = (1.0 - s * s).sqrt();
        e * (-c) + comp[0] * s
    } else {
        let u: f64 = rng.random();
        let c = u.sqrt();
        let s = (1.0 - c * c).max(0.0).sqrt();
        let p: f64 = rng.random_range(0.0..2.0 * PI);
        e * (-c) + comp[0] * (s * p.cos()) + comp[1] * (s * p.sin())
    }
}

const BLOCK: usize = 4096;

/// Per-path outcome summed over a block: (sum_k, sum of path totals, sum of squares).
fn mc_blocks<F>(n: usize, seed: u64, f: F) -> Vec<(Vec<f64>, f64, f64)>
where
    F: Fn(&mut Stream, &mut Vec<f64>) -> f64 + Sync,
{
    let n_blocks = n.div_ceil(BLOCK);
    (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, b as u64);
            let m = BLOCK.min(n - b * BLOCK);
            let mut sums = Vec::new();
            let mut tot = 0.0;
            let mut tot2 = 0.0;
            for _ in 0..m {
                let y = f(&mut rng, &mut sums);
                tot += y;
                tot2 += y * y;
            }
            (sums, tot, tot2)
        })
        .collect()
}

fn reduce_blocks(blocks: Vec<(Vec<f64>, f64, f64)>, n: usize, len: usize) -> (Vec<f64>, f64) {
    let mut per_k = vec![0.0; len];
    let mut tot = 0.0;
    let mut tot2 = 0.0;
    for (s, a, b) in blocks {
        for (i, x) in s.iter().enumerate() {
            per_k[i] += x;
        }
        tot += a;
        tot2 += b;
    }
    let nf = n as f64;
    for x in per_k.iter_mut() {
        *x /= nf;
    }
    let mean = tot / nf;
    let var = (tot2 / nf - mean * mean).max(0.0);
    (per_k, (var / (nf - 1.0).max(1.0)).sqrt())
}

/// Terms `k_lo..=k_hi` of ψ by simulating the collision process. Returns the
/// per-k means and the standard error of their sum.
pub fn adjoint_terms_collision_mc<const D: usize, P: TestFunction<D> + ?Sized>(
    phi: &P,
    k_lo: usize,
    k_hi: usize,
    t: f64,
    x: &Vector<D>,
    v: &Vector<D>,
    r: Restitution,
    kernel: Kernel,
    n: usize,
    seed: u64,
) -> (Vec<f64>, f64) {
    let a = kernel.rate::<D>();
    let rr = r.value();
    let len = k_hi + 1 - k_lo;
    let blocks = mc_blocks(n, seed, |rng, sums| {
        if sums.is_empty() {
            sums.resize(len, 0.0);
        }
        let mut y = *x;
        let mut u = *v;
        let mut now = 0.0;
        let mut k = 0;
        loop {
            let speed = u.norm();
            let tau = if speed > 0.0 {
                let e: f64 = rng.random();
                -(1.0 - e).ln() / (a * speed)
            } else {
                f64::INFINITY
            };
            if now + tau >= t {
                y += u * (t - now);
                break;
            }
            now += tau;
            y += u * tau;
            k += 1;
            if k > k_hi {
                return 0.0;
            }
            let om = sample_incoming(&u, rng);
            u = scatter_unchecked(&u, &om, rr);
        }
        if k < k_lo {
            return 0.0;
        }
        let val = phi.eval(&y, &u);
        sums[k - k_lo] += val;
        val
    });
    reduce_blocks(blocks, n, len)
}

/// k-th term of ψ by uniform Monte Carlo over the time simplex and the
/// sphere. Returns (mean, standard error).
pub fn adjoint_term_uniform_mc<const D: usize, P: TestFunction<D> + ?Sized>(
    phi: &P,
    k: usize,
    t: f64,
    x: &Vector<D>,
    v: &Vector<D>,
    r: Restitution,
    kernel: Kernel,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    let a = kernel.rate::<D>();
    let lam = kernel.weight();
    let rr = r.value();
    let vol = t.powi(k as i32) / (1..=k).map(|i| i as f64).product::<f64>()
        * sphere_measure::<D>().powi(k as i32);
    let blocks = mc_blocks(n, seed, |rng, _| {
        let mut ts: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..t)).collect();
        ts.sort_by(|p, q| q.total_cmp(p));
        let mut u = *v;
        let mut y = *x;
        let mut prev = t;
        let mut log_w = 0.0;
        let mut w = 1.0;
        for &tj in &ts {
            let dt = prev - tj;
            log_w -= a * u.norm() * dt;
            y += u * dt;
            let om: Vector<D> = sample_unit_sphere(rng);
            w *= lam * u.dot(&om).abs();
            u = scatter_unchecked(&u, &om, rr);
            prev = tj;
        }
        log_w -= a * u.norm() * prev;
        y += u * prev;
        vol * w * log_w.exp() * phi.eval(&y, &u)
    });
    let (_, se) = reduce_blocks(
        blocks.iter().map(|(_, a, b)| (vec![], *a, *b)).collect(),
        n,
        0,
    );
    let mean = blocks.iter().map(|(_, a, _)| a).sum::<f64>() / n as f64;
    (mean, se)
}

/// Terms `P(N(τ) = k)` of the collision count for a unit starting speed run
/// for clock `τ = |v|t`, on Chebyshev points of `[0, tau_max]`.
struct CountProfile {
    tau_max: f64,
    nodes: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl CountProfile {
    fn new<const D: usize>(tau_max: f64, k_max: usize, a: f64, r: f64) -> Self {
        let n = 64;
        let nodes: Vec<f64> = (0..=n)
            .map(|j| 0.5 * tau_max * (1.0 - (PI * j as f64 / n as f64).cos()))
            .collect();
        let s_rule = gauss_legendre(64, 0.0, 1.0);
        // post-collision speed ratio under the collision law of the angle
        let q: Vec<(f64, f64)> = gauss_legendre(48, 0.0, 1.0)
            .into_iter()
            .map(|(u, w)| {
                let c2 = if D == 2 { 1.0 - u * u } else { u };
                ((1.0 - (1.0 - r * r) * c2).sqrt(), w)
            })
            .collect();
        let mut values = vec![nodes.iter().map(|&s| (-a * s).exp()).collect::<Vec<f64>>()];
        for _ in 1..=k_max {
            let prev = values.last().unwrap();
            let next: Vec<f64> = nodes
                .iter()
                .map(|&tau| {
                    let mut acc = 0.0;
                    for &(z, ws) in &s_rule {
                        let s = z * tau;
                        let inner: f64 = q
                            .iter()
                            .map(|&(qq, wq)| wq * barycentric(&nodes, prev, qq * (tau - s)))
                            .sum();
                        acc += ws * tau * a * (-a * s).exp() * inner;
                    }
                    acc
                })
                .collect();
            values.push(next);
        }
        CountProfile {
            tau_max,
            nodes,
            values,
        }
    }

    fn eval(&self, k: usize, tau: f64) -> f64 {
        if self.tau_max == 0.0 {
            return self.values[k][0];
        }
        barycentric(&self.nodes, &self.values[k], tau)
    }
}

/// Barycentric interpolation on Chebyshev-Lobatto points.
fn barycentric(nodes: &[f64], f: &[f64], x: f64) -> f64 {
    let n = nodes.len() - 1;
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..=n {
        let d = x - nodes[j];
        if d == 0.0 {
            return f[j];
        }
        let mut w = if j % 2 == 0 { 1.0 } else { -1.0 };
        if j == 0 || j == n {
            w *= 0.5;
        }
        num += w / d * f[j];
        den += w / d;
    }
    num / den
}

/// Number of terms needed for the Poisson tail to drop below `tol`.
fn choose_k(lam: f64, sup: f64, tol: f64, k_max: usize) -> (usize, bool) {
    for k in 0..=k_max {
        if sup * poisson_upper_tail(lam, k) <= tol {
            return (k, false);
        }
    }
    (k_max, true)
}

/// ψ(t, x, v): the expectation of φ at time `t` for the linear collision
/// process started from `(x, v)`, expanded by number of collisions.
pub fn adjoint_series_psi<const D: usize, P: TestFunction<D> + ?Sized>(
    phi: &P,
    t: f64,
    x: &Vector<D>,
    v: &Vector<D>,
    r: Restitution,
    kernel: Kernel,
    cfg: &SeriesConfig,
) -> Result<SeriesValue> {
    if t < 0.0 {
        return Err(Error::Invalid("t must be non-negative".into()));
    }
    let a = kernel.rate::<D>();
    let lam = a * v.norm() * t;
    let sup = phi.sup_norm();
    let (k_used, truncated) = choose_k(lam, sup, cfg.tail_tol, cfg.k_max);
    let tail = sup * poisson_upper_tail(lam, k_used);
    let mut terms = Vec::new();
    let mut std_error = 0.0;
    if let Some(c) = phi.constant_value() {
        let prof = CountProfile::new::<D>(v.norm() * t, k_used, a, r.value());
        for k in 0..=k_used {
            let val = if k == 0 {
                (-lam).exp()
            } else {
                prof.eval(k, v.norm() * t)
            };
            terms.push(Term {
                k,
                value: c * val,
                std_error: 0.0,
                method: TermMethod::Exact,
            });
        }
    } else {
        let kq = cfg.quad_max::<D>().min(k_used);
        for k in 0..=kq {
            let val = adjoint_term_quadrature(phi, k, t, x, v, r, kernel, cfg.quad_order);
            let method = if k == 0 {
                TermMethod::Exact
            } else {
                TermMethod::Quadrature
            };
            terms.push(Term {
                k,
                value: val,
                std_error: 0.0,
                method,
            });
        }
        if k_used > kq {
            match cfg.scheme {
                McScheme::Collision => {
                    let (vals, se) = adjoint_terms_collision_mc(
                        phi,
                        kq + 1,
                        k_used,
                        t,
                        x,
                        v,
                        r,
                        kernel,
                        cfg.mc_samples,
                        cfg.seed,
                    );
                    for (i, val) in vals.into_iter().enumerate() {
                        terms.push(Term {
                            k: kq + 1 + i,
                            value: val,
                            std_error: f64::NAN,
                            method: TermMethod::MonteCarlo,
                        });
                    }
                    std_error = se;
                }
                McScheme::Uniform => {
                    let mut var = 0.0;
                    for k in kq + 1..=k_used {
                        let (m, se) = adjoint_term_uniform_mc(
                            phi,
                            k,
                            t,
                            x,
                            v,
                            r,
                            kernel,
                            cfg.mc_samples,
                            cfg.seed.wrapping_add(k as u64),
                        );
                        var += se * se;
                        terms.push(Term {
                            k,
                            value: m,
                            std_error: se,
                            method: TermMethod::MonteCarlo,
                        });
                    }
                    std_error = var.sqrt();
                }
            }
        }
    }
    let value = terms.iter().map(|t| t.value).sum();
    Ok(SeriesValue {
        value,
        tail_estimate: tail,
        k_used,
        std_error,
        truncated,
        ill_conditioned: false,
        terms,
    })
}

/// Upper bound on the k-th Duhamel term from the split into `s` collisions
/// with `|v̂·ω| > β` and `k - s` with `|v̂·ω| <= β`.
pub fn duhamel_term_bound<const D: usize>(
    k: usize,
    t: f64,
    speed: f64,
    r: Restitution,
    kernel: Kernel,
    alpha: f64,
    p: f64,
    moment_bound: f64,
) -> f64 {
    if k == 0 {
        return moment_bound * (-alpha * speed.powf(p)).exp();
    }
    let r = r.value();
    let kf = k as f64;
    let c = kernel.weight() * sphere_measure::<D>() * speed / (r * r);
    let ln_pref = kf * (t * c).ln() - ln_factorial(k);
    let mut total = 0.0;
    for s in 0..=k {
        let beta: f64 = if s == 0 {
            1.0 / kf
        } else if s == k {
            0.5
        } else {
            r.powi((s * (s + 1)) as i32) / (k - s) as f64
        };
        let q = (1.0 + (1.0 / (r * r) - 1.0) * beta * beta).sqrt();
        let j = (k - s) as f64;
        let ln_binom = ln_factorial(k) - ln_factorial(s) - ln_factorial(k - s);
        let ln_term = ln_binom
            + ln_pref
            + kf * s as f64 * (1.0 / r).ln()
            + 0.5 * j * j * q.ln()
            + if j > 0.0 { j * beta.ln() } else { 0.0 }
            - alpha * q.powf(s as f64 * p) * speed.powf(p);
        total += ln_term.exp();
    }
    moment_bound * total
}

/// Sum of [`duhamel_term_bound`] over `k > k_used`.
pub fn duhamel_tail_bound<const D: usize>(
    k_used: usize,
    t: f64,
    speed: f64,
    r: Restitution,
    kernel: Kernel,
    alpha: f64,
    p: f64,
    moment_bound: f64,
) -> f64 {
    let mut sum = 0.0;
    let mut small = 0;
    for k in k_used + 1..k_used + 400 {
        let b = duhamel_term_bound::<D>(k, t, speed, r, kernel, alpha, p, moment_bound);
        if !b.is_finite() {
            return f64::INFINITY;
        }
        sum += b;
        if b <= 1e-16 * sum.max(1e-300) {
            small += 1;
            if small > 5 {
                break;
            }
        } else {
            small = 0;
        }
    }
    sum
}

struct DuhamelQuad<'a, const D: usize> {
    f0: &'a InitialDatum<D>,
    r: f64,
    a: f64,
    kfac: f64,
    rules: Vec<(Vec<(f64, f64)>, HemiRule)>,
}

impl<const D: usize> DuhamelQuad<'_, D> {
    fn term(&self, k: usize, tau: f64, x: &Vector<D>, v: &Vector<D>) -> f64 {
        let speed = v.norm();
        if k == 0 {
            return (-self.a * speed * tau).exp() * self.f0.eval(&(x - v * tau), v);
        }
        if speed == 0.0 || tau <= 0.0 {
            return 0.0;
        }
        let (times, hemi) = &self.rules[k - 1];
        let dirs = hemi.nodes(v);
        let r2 = self.r * self.r;
        let mut acc = 0.0;
        for &(u, wt) in times {
            let s = u * tau;
            let decay = (-self.a * speed * s).exp();
            let y = x - v * s;
            let mut inner = 0.0;
            for (om, wo) in &dirs {
                let vn = v.dot(om);
                let vb = inverse_scatter_unchecked(v, om, self.r);
                inner += wo * vn.abs() / r2 * self.term(k - 1, tau - s, &y, &vb);
            }
            acc += wt * tau * decay * inner;
        }
        self.kfac * acc
    }
}

/// k-th term of the Duhamel series by uniform Monte Carlo.
pub fn duhamel_term_uniform_mc<const D: usize>(
    f0: &InitialDatum<D>,
    k: usize,
    t: f64,
    x: &Vector<D>,
    v: &Vector<D>,
    r: Restitution,
    kernel: Kernel,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    let a = kernel.rate::<D>();
    let lam = kernel.weight();
    let rr = r.value();
    let vol = t.powi(k as i32) / (1..=k).map(|i| i as f64).product::<f64>()
        * sphere_measure::<D>().powi(k as i32);
    let blocks = mc_blocks(n, seed, |rng, _| {
        let mut ts: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..t)).collect();
        ts.sort_by(|p, q| q.total_cmp(p));
        let mut u = *v;
        let mut y = x - v * t;
        let mut log_w = -a * v.norm() * t;
        let mut w = 1.0;
        for &tj in &ts {
            let om: Vector<D> = sample_unit_sphere(rng);
            w *= lam * u.dot(&om).abs() / (rr * rr);
            let ub = inverse_scatter_unchecked(&u, &om, rr);
            log_w += a * tj * (u.norm() - ub.norm());
            y += (u - ub) * tj;
            u = ub;
        }
        vol * w * log_w.exp() * f0.eval(&y, &u)
    });
    let nf = n as f64;
    let tot: f64 = blocks.iter().map(|b| b.1).sum();
    let tot2: f64 = blocks.iter().map(|b| b.2).sum();
    let mean = tot / nf;
    (
        mean,
        ((tot2 / nf - mean * mean).max(0.0) / (nf - 1.0).max(1.0)).sqrt(),
    )
}

/// f(t, x, v) from the Duhamel series with initial datum `f0`.
pub fn duhamel_series_f<const D: usize>(
    f0: &InitialDatum<D>,
    t: f64,
    x: &Vector<D>,
    v: &Vector<D>,
    r: Restitution,
    kernel: Kernel,
    cfg: &SeriesConfig,
) -> Result<SeriesValue> {
    let Some((alpha, p)) = f0.exp_moment else {
        return Err(Error::Invalid(
            "initial datum needs an exponential moment".into(),
        ));
    };
    if t < 0.0 {
        return Err(Error::Invalid("t must be non-negative".into()));
    }
    let speed = v.norm();
    let bound = |k| duhamel_tail_bound::<D>(k, t, speed, r, kernel, alpha, p, f0.moment_bound);
    let mut k_used = cfg.k_max;
    let mut truncated = true;
    for k in 0..=cfg.k_max {
        if bound(k) <= cfg.tail_tol {
            k_used = k;
            truncated = false;
            break;
        }
    }
    let tail = bound(k_used);
    let a = kernel.rate::<D>();
    let kq = cfg.quad_max::<D>().min(k_used);
    let mut terms = Vec::new();
    let mut var = 0.0;
    for k in 0..=k_used {
        if k <= kq {
            let q = DuhamelQuad {
                f0,
                r: r.value(),
                a,
                kfac: 2.0 * kernel.weight(),
                rules: rules_for::<D>(cfg.quad_order, k),
            };
            let method = if k == 0 {
                TermMethod::Exact
            } else {
                TermMethod::Quadrature
            };
            terms.push(Term {
                k,
                value: q.term(k, t, x, v),
                std_error: 0.0,
                method,
            });
        } else {
            let (m, se) = duhamel_term_uniform_mc(
                f0,
                k,
                t,
                x,
                v,
                r,
                kernel,
                cfg.mc_samples,
                cfg.seed.wrapping_add(k as u64),
            );
            var += se * se;
            terms.push(Term {
                k,
                value: m,
                std_error: se,
                method: TermMethod::MonteCarlo,
            });
        }
    }
    let ill_conditioned = k_used > 0 && terms[k_used].value.abs() > terms[0].value.abs();
    Ok(SeriesValue {
        value: terms.iter().map(|t| t.value).sum(),
        tail_estimate: tail,
        k_used,
        std_error: var.sqrt(),
        truncated,
        ill_conditioned,
        terms,
    })
}

/// Initial data for the pairing `∫ ψ(t) f0`.
pub enum Pairing<'a, const D: usize> {
    Dirac {
        x0: Vector<D>,
        v0: Vector<D>,
    },
    /// Weighted points `(x, v, w)` approximating `f0(dx, dv)`.
    Grid(&'a [(Vector<D>, Vector<D>, f64)]),
}

/// `∫ ψ(t, x, v) f0(dx, dv)`.
pub fn duality_pairing<const D: usize, P: TestFunction<D> + ?Sized>(
    phi: &P,
    f0: &Pairing<D>,
    t: f64,
    r: Restitution,
    kernel: Kernel,
    cfg: &SeriesConfig,
) -> Result<f64> {
    match f0 {
        Pairing::Dirac { x0, v0 } => Ok(adjoint_series_psi(phi, t, x0, v0, r, kernel, cfg)?.value),
        Pairing::Grid(pts) => {
            let mut acc = 0.0;
            for (i, (x, v, w)) in pts.iter().enumerate() {
                let c = SeriesConfig {
                    seed: cfg.seed.wrapping_add(i as u64),
                    ..*cfg
                };
                acc += w * adjoint_series_psi(phi, t, x, v, r, kernel, &c)?.value;
            }
            Ok(acc)
        }
    }
}

/// Energy bound `(E0^{-1/2} + ((1-r²)/2) K_d t)^{-2}` for a mass-one solution.
pub fn haff_energy_bound<const D: usize>(
    e0: f64,
    r: Restitution,
    t: f64,
    quad: &SphereQuadrature<D>,
) -> Result<f64> {
    let k = crate::collision::cubed_cosine_constant(quad);
    haff_with_constant(e0, r, t, k)
}

/// [`haff_energy_bound`] for the given kernel: `K_d` is scaled by λ.
pub fn haff_energy_bound_for<const D: usize>(
    kernel: Kernel,
    e0: f64,
    r: Restitution,
    t: f64,
) -> Result<f64> {
    haff_with_constant(e0, r, t, kernel.weight() * kd::<D>())
}

fn haff_with_constant(e0: f64, r: Restitution, t: f64, k: f64) -> Result<f64> {
    if e0 < 0.0 {
        return Err(Error::NegativeEnergy(e0));
    }
    if e0 == 0.0 {
        return Ok(0.0);
    }
    let r = r.value();
    Ok(e0 / (1.0 + 0.5 * (1.0 - r * r) * k * t * e0.sqrt()).powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::reference_quadrature;
    use crate::geometry::vector;

    fn v2(x: f64, y: f64) -> Vector<2> {
        vector(&[x, y])
    }

    fn half() -> Restitution {
        Restitution::new(0.5).unwrap()
    }

    #[test]
    fn kernel_rates() {
        assert!((Kernel::FullSphere.rate::<2>() - 4.0).abs() < 1e-8);
        assert!((Kernel::Hemisphere.rate::<2>() - 2.0).abs() < 1e-8);
        assert!((Kernel::Hemisphere.rate::<3>() - PI).abs() < 1e-8);
    }

    #[test]
    fn poisson_tail_matches_direct_sum() {
        let lam: f64 = 2.0;
        let mut cdf = 0.0;
        let mut p = (-lam).exp();
        for k in 0..15 {
            cdf += p;
            assert!((poisson_upper_tail(lam, k) - (1.0 - cdf)).abs() < 1e-14);
            p *= lam / (k + 1) as f64;
        }
        assert_eq!(poisson_upper_tail(0.0, 3), 0.0);
    }

    #[test]
    fn constant_function_is_fixed() {
        let cfg = SeriesConfig::default();
        for kernel in [Kernel::Hemisphere, Kernel::FullSphere] {
            let cfg = SeriesConfig { k_max: 30, ..cfg };
            let s = adjoint_series_psi(
                &Constant(1.0),
                1.0,
                &v2(0.0, 0.0),
                &v2(1.0, 0.0),
                half(),
                kernel,
                &cfg,
            )
            .unwrap();
            assert!(!s.truncated);
            assert!((s.value - 1.0).abs() <= 1e-6, "{kernel:?} {}", s.value);
        }
        let s = adjoint_series_psi(
            &Constant(1.0),
            0.7,
            &vector::<3>(&[0.0, 0.0, 0.0]),
            &vector(&[0.3, 0.9, -0.2]),
            half(),
            Kernel::Hemisphere,
            &cfg,
        )
        .unwrap();
        assert!((s.value - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn zero_time_and_zero_speed() {
        let phi = Bump {
            x_center: v2(0.2, 0.0),
            x_radius: 1.0,
            v_center: v2(1.0, 0.0),
            v_radius: 2.0,
        };
        let cfg = SeriesConfig {
            mc_samples: 1000,
            ..Default::default()
        };
        let x = v2(0.1, 0.1);
        let v = v2(1.0, 0.2);
        let s = adjoint_series_psi(&phi, 0.0, &x, &v, half(), Kernel::Hemisphere, &cfg).unwrap();
        assert_eq!(s.value, phi.eval(&x, &v));
        assert_eq!(s.k_used, 0);
        let z = v2(0.0, 0.0);
        let s = adjoint_series_psi(&phi, 3.0, &x, &z, half(), Kernel::Hemisphere, &cfg).unwrap();
        assert_eq!(s.value, phi.eval(&x, &z));
    }

    #[test]
    fn first_term_matches_one_dimensional_oracle() {
        // φ = g(x·e1) with v = e1: the k=1 term is
        // λ ∫_0^t e^{-a s} ∫ |cos| e^{-a q (t-s)} g(s + (t-s) q cosθ') dθ ds
        // evaluated here by brute-force midpoint sums.
        let phi = FnTest {
            f: |x: &Vector<2>, v: &Vector<2>| (-(x[0] - 0.8).powi(2)).exp() * (1.0 + 0.1 * v[1]),
            sup: 1.1,
        };
        let t = 1.0;
        let a = 2.0;
        let r = 0.5;
        let q = adjoint_term_quadrature(
            &phi,
            1,
            t,
            &v2(0.0, 0.0),
            &v2(1.0, 0.0),
            half(),
            Kernel::Hemisphere,
            32,
        );
        let n = 2000;
        let mut acc = 0.0;
        for i in 0..n {
            let s = (i as f64 + 0.5) * t / n as f64;
            for j in 0..n {
                let al = 0.5 * PI + (j as f64 + 0.5) * PI / n as f64;
                let om = v2(al.cos(), al.sin());
                let vp = v2(1.0, 0.0) - om * ((1.0 + r) * om[0]);
                let y = v2(s, 0.0) + vp * (t - s);
                acc += (-a * s).exp()
                    * om[0].abs()
                    * (-a * vp.norm() * (t - s)).exp()
                    * phi.eval(&y, &vp);
            }
        }
        let brute = acc * (t / n as f64) * (PI / n as f64);
        assert!((q - brute).abs() < 1e-6, "{q} vs {brute}");
    }

    #[test]
    fn quadrature_and_mc_agree_on_low_terms() {
        let phi = Bump {
            x_center: v2(0.6, 0.1),
            x_radius: 0.8,
            v_center: v2(0.5, 0.0),
            v_radius: 1.0,
        };
        let x = v2(0.0, 0.0);
        let v = v2(1.0, 0.0);
        for k in 1..=2 {
            let q = adjoint_term_quadrature(&phi, k, 1.0, &x, &v, half(), Kernel::Hemisphere, 24);
            let (m, se) = adjoint_term_uniform_mc(
                &phi,
                k,
                1.0,
                &x,
                &v,
                half(),
                Kernel::Hemisphere,
                400_000,
                7 + k as u64,
            );
            assert!(
                (q - m).abs() < 4.0 * se,
                "k={k} quad {q} uniform {m} ± {se}"
            );
            let (vals, se) = adjoint_terms_collision_mc(
                &phi,
                k,
                k,
                1.0,
                &x,
                &v,
                half(),
                Kernel::Hemisphere,
                400_000,
                3,
            );
            assert!(
                (q - vals[0]).abs() < 4.0 * se,
                "k={k} quad {q} collision {} ± {se}",
                vals[0]
            );
        }
    }

    #[test]
    fn kernels_differ_by_rate_only() {
        // constant profile: P(N=0) = e^{-a t}
        let cfg = SeriesConfig::default();
        let s = adjoint_series_psi(
            &Constant(1.0),
            1.0,
            &v2(0.0, 0.0),
            &v2(1.0, 0.0),
            half(),
            Kernel::FullSphere,
            &cfg,
        )
        .unwrap();
        assert!((s.terms[0].value - (-4.0f64).exp()).abs() < 1e-8);
        // elastic: the speed never changes, so counts are exactly Poisson(a t)
        let s = adjoint_series_psi(
            &Constant(1.0),
            1.0,
            &v2(0.0, 0.0),
            &v2(1.0, 0.0),
            Restitution::elastic(),
            Kernel::Hemisphere,
            &cfg,
        )
        .unwrap();
        let mut p = (-2.0f64).exp();
        for (k, t) in s.terms.iter().enumerate() {
            assert!((t.value - p).abs() < 1e-8, "k={k}");
            p *= 2.0 / (k + 1) as f64;
        }
    }

    #[test]
    fn chains() {
        let seq = CollisionSequence {
            times: vec![0.5, 0.2],
            omegas: vec![v2(0.0, 1.0), v2(0.0, -1.0)],
        };
        seq.validate(1.0).unwrap();
        let v = v2(1.0, 0.0);
        assert_eq!(forward_velocity_chain(&v, &seq, half()), vec![v, v, v]);
        let bad = CollisionSequence {
            times: vec![0.2, 0.5],
            omegas: seq.omegas.clone(),
        };
        assert!(bad.validate(1.0).is_err());
        let empty = CollisionSequence::<2> {
            times: vec![],
            omegas: vec![],
        };
        assert_eq!(backward_velocity_chain(&v, &empty, half()), vec![v]);
    }

    #[test]
    fn haff_examples() {
        let q = reference_quadrature::<2>();
        assert!((haff_energy_bound(1.0, half(), 1.0, &q).unwrap() - 0.25).abs() < 1e-8);
        assert_eq!(haff_energy_bound(2.0, half(), 0.0, &q).unwrap(), 2.0);
        assert!(
            (haff_energy_bound(2.0, Restitution::elastic(), 5.0, &q).unwrap() - 2.0).abs() < 1e-12
        );
        assert_eq!(haff_energy_bound(0.0, half(), 1.0, &q).unwrap(), 0.0);
        assert!(haff_energy_bound(-1.0, half(), 1.0, &q).is_err());
        assert!(
            (haff_energy_bound_for::<2>(Kernel::Hemisphere, 1.0, half(), 1.0).unwrap()
                - 1.0 / 2.25)
                .abs()
                < 1e-8
        );
    }

    fn gaussian_datum() -> InitialDatum<2> {
        InitialDatum {
            evaluator: Box::new(|x: &Vector<2>, v: &Vector<2>| {
                (-(x.norm_squared()) - (v - v2(1.0, 0.0)).norm_squared()).exp()
            }),
            // e^{-|v-e|²} e^{|v|²/2} <= e^{1}: (|v|²/2 - |v-e|² <= 1)
            exp_moment: Some((0.5, 2.0)),
            moment_bound: 1.0f64.exp(),
        }
    }

    #[test]
    fn duhamel_zero_time_and_moment_check() {
        let f0 = gaussian_datum();
        let grid: Vec<_> = (0..50)
            .map(|i| (v2(0.1 * i as f64, 0.0), v2(-2.0 + 0.1 * i as f64, 0.3)))
            .collect();
        assert!(f0.check_moment(&grid));
        let cfg = SeriesConfig {
            k_max: 0,
            ..Default::default()
        };
        let x = v2(0.3, -0.2);
        let v = v2(0.5, 0.5);
        let s = duhamel_series_f(&f0, 0.0, &x, &v, half(), Kernel::Hemisphere, &cfg).unwrap();
        assert!((s.value - f0.eval(&x, &v)).abs() < 1e-15);
    }

    #[test]
    fn duhamel_tail_bound_is_finite_and_decreasing() {
        let r = half();
        let b: Vec<f64> = (0..8)
            .map(|k| duhamel_tail_bound::<2>(k, 0.2, 1.0, r, Kernel::Hemisphere, 0.5, 2.0, 1.0))
            .collect();
        for w in b.windows(2) {
            assert!(w[1] <= w[0] && w[1].is_finite());
        }
    }

    #[test]
    fn elastic_duality_on_a_grid() {
        // ∫ φ f(t) = ∫ ψ(t) f0, both sides by midpoint sums over a bounded
        // phase-space box, r = 1, short time, k <= 2.
        let r = Restitution::elastic();
        let t = 0.15;
        let phi = Bump {
            x_center: v2(0.15, 0.0),
            x_radius: 0.6,
            v_center: v2(1.0, 0.0),
            v_radius: 1.2,
        };
        let f0 = InitialDatum {
            evaluator: Box::new(|x: &Vector<2>, v: &Vector<2>| {
                bump_profile(x.norm() / 0.6) * bump_profile((v - v2(1.0, 0.0)).norm() / 1.2)
            }),
            exp_moment: Some((1.0, 2.0)),
            moment_bound: (2.2f64 * 2.2).exp(),
        };
        let cfg = SeriesConfig {
            k_max: 2,
            quad_order: 8,
            quad_max_k: Some(2),
            ..Default::default()
        };
        let n = 10;
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        let hx = 1.6 / n as f64;
        let hv = 2.4 / n as f64;
        for i in 0..n {
            for j in 0..n {
                let x = v2(-0.8 + hx * (i as f64 + 0.5), -0.8 + hx * (j as f64 + 0.5));
                for k in 0..n {
                    for l in 0..n {
                        let v = v2(-0.2 + hv * (k as f64 + 0.5), -1.2 + hv * (l as f64 + 0.5));
                        let p = phi.eval(&x, &v);
                        let f = f0.eval(&x, &v);
                        if p > 0.0 {
                            lhs +=
                                p * duhamel_series_f(&f0, t, &x, &v, r, Kernel::Hemisphere, &cfg)
                                    .unwrap()
                                    .value;
                        }
                        if f > 0.0 {
                            rhs += f * adjoint_series_psi(
                                &phi,
                                t,
                                &x,
                                &v,
                                r,
                                Kernel::Hemisphere,
                                &cfg,
                            )
                            .unwrap()
                            .value;
                        }
                    }
                }
            }
        }
        let w = (hx * hv).powi(2);
        let (lhs, rhs) = (lhs * w, rhs * w);
        // k > 2 is discarded on both sides: P(N > 2) ~ (a |v| t)^3/6 with
        // |v| <= 2.2.
        let lam = 2.0 * 2.2 * t;
        let trunc = lam.powi(3) / 6.0 * rhs.abs().max(lhs.abs());
        assert!(
            (lhs - rhs).abs() < trunc + 0.02 * rhs.abs(),
            "{lhs} vs {rhs}"
        );
    }
}
