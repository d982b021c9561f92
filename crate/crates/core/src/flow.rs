//! Event-driven forward flow of the tagged particle.

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::collision::scatter_unchecked;
use crate::error::Error;
use crate::field::{dynamical_ball, sample_field, KineticParams, ScattererField};
use crate::geometry::{
    outward_normal_at_hit, point_segment_distance, ray_sphere_first_hit, Vector,
};
use crate::rng::sample_key;

/// Reflection rule `(v, ω, r) -> v'` used by the flow.
pub type ScatterLaw<const D: usize> = fn(&Vector<D>, &Vector<D>, f64) -> Vector<D>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionEvent<const D: usize> {
    pub time: f64,
    pub scatterer_index: usize,
    pub omega: Vector<D>,
    pub v_pre: Vector<D>,
    pub v_post: Vector<D>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Flags {
    pub frozen_overlap: bool,
    pub collapse_guard_tripped: bool,
    pub simultaneous_collision: bool,
    pub recollision_detected: bool,
    pub interference_detected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guards {
    pub max_events: usize,
    /// Smallest admissible time between two collisions; 0 disables the check.
    pub min_gap: f64,
}

impl Default for Guards {
    fn default() -> Self {
        Guards {
            max_events: 100_000,
            min_gap: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<const D: usize> {
    pub initial: (Vector<D>, Vector<D>),
    pub events: Vec<CollisionEvent<D>>,
    pub final_state: (Vector<D>, Vector<D>),
    pub elapsed: f64,
    pub flags: Flags,
    pub free_flight_gaps: Vec<f64>,
}

impl<const D: usize> Trajectory<D> {
    /// Position at each collision, preceded by the start point.
    pub fn vertices(&self) -> Vec<Vector<D>> {
        let mut pts = vec![self.initial.0];
        let mut x = self.initial.0;
        let mut v = self.initial.1;
        let mut t = 0.0;
        for e in &self.events {
            x += v * (e.time - t);
            t = e.time;
            v = e.v_post;
            pts.push(x);
        }
        pts
    }

    /// Velocity at time `s` (right-continuous).
    pub fn velocity_at(&self, s: f64) -> Vector<D> {
        let mut v = self.initial.1;
        for e in &self.events {
            if e.time > s {
                break;
            }
            v = e.v_post;
        }
        v
    }

    /// One JSON object per trajectory, for line-delimited dumps.
    pub fn to_json(&self) -> serde_json::Value {
        let arr = |v: &Vector<D>| v.iter().copied().collect::<Vec<f64>>();
        json!({
            "x0": arr(&self.initial.0),
            "v0": arr(&self.initial.1),
            "x": arr(&self.final_state.0),
            "v": arr(&self.final_state.1),
            "elapsed": self.elapsed,
            "flags": self.flags,
            "events": self.events.iter().map(|e| json!({
                "time": e.time,
                "scatterer": e.scatterer_index,
                "omega": arr(&e.omega),
                "v_pre": arr(&e.v_pre),
                "v_post": arr(&e.v_post),
            })).collect::<Vec<_>>(),
        })
    }
}

fn default_law<const D: usize>(v: &Vector<D>, w: &Vector<D>, r: f64) -> Vector<D> {
    scatter_unchecked(v, w, r)
}

/// Integrate the flow up to time `t`.
pub fn evolve<const D: usize>(
    x0: &Vector<D>,
    v0: &Vector<D>,
    field: &ScattererField<D>,
    t: f64,
    guards: Guards,
) -> Trajectory<D> {
    evolve_with_law(x0, v0, field, t, guards, default_law::<D>)
}

/// [`evolve`] with a substitute reflection rule (used to check that the
/// conservation suites catch a broken law).
pub fn evolve_with_law<const D: usize>(
    x0: &Vector<D>,
    v0: &Vector<D>,
    field: &ScattererField<D>,
    t: f64,
    guards: Guards,
    law: ScatterLaw<D>,
) -> Trajectory<D> {
    let eps = field.params.eps;
    let r = field.params.r.value();
    let mut traj = Trajectory {
        initial: (*x0, *v0),
        events: Vec::new(),
        final_state: (*x0, *v0),
        elapsed: t.max(0.0),
        flags: Flags::default(),
        free_flight_gaps: Vec::new(),
    };
    if field.overlaps(x0) {
        traj.flags.frozen_overlap = true;
        return traj;
    }
    if t <= 0.0 || v0.norm_squared() == 0.0 {
        return traj;
    }
    let tie = 1e-12 * t;
    let mut x = *x0;
    let mut v = *v0;
    let mut now = 0.0;
    let mut last: Option<usize> = None;
    let mut hits: Vec<(f64, usize)> = Vec::new();
    loop {
        let remaining = t - now;
        hits.clear();
        let mut best = f64::INFINITY;
        for (i, c) in field.centers.iter().enumerate() {
            let s = match ray_sphere_first_hit(&x, &v, c, eps) {
                Ok(Some(s)) => s,
                Ok(None) => continue,
                Err(Error::StartedInside) if Some(i) != last && (x - c).dot(&v) < 0.0 => 0.0,
                Err(_) => continue,
            };
            if Some(i) == last && s < tie {
                continue;
            }
            if s <= remaining + tie {
                best = best.min(s);
                hits.push((s, i));
            }
        }
        if hits.is_empty() || best > remaining {
            x += v * remaining;
            now = t;
            break;
        }
        let mut chosen = usize::MAX;
        let mut n_tied = 0;
        let mut s_hit = best;
        for &(s, i) in &hits {
            if s <= best + tie {
                n_tied += 1;
                if i < chosen {
                    chosen = i;
                    s_hit = s;
                }
            }
        }
        if n_tied > 1 {
            traj.flags.simultaneous_collision = true;
        }
        x += v * s_hit;
        now += s_hit;
        let c = &field.centers[chosen];
        let omega = outward_normal_at_hit(&x, c, eps).unwrap_or_else(|_| (x - c).normalize());
        let v_post = law(&v, &omega, r);
        if let Some(prev) = traj.events.last() {
            let gap = now - prev.time;
            traj.free_flight_gaps.push(gap);
            if guards.min_gap > 0.0 && gap < guards.min_gap {
                traj.flags.collapse_guard_tripped = true;
            }
        }
        if traj.events.iter().any(|e| e.scatterer_index == chosen) {
            traj.flags.recollision_detected = true;
        }
        traj.events.push(CollisionEvent {
            time: now,
            scatterer_index: chosen,
            omega,
            v_pre: v,
            v_post,
        });
        v = v_post;
        last = Some(chosen);
        // With r > 0 no finite collision sequence stops the particle, so a
        // speed whose square underflows only arises in a runaway collapse.
        let underflow = !(v.norm_squared() >= f64::MIN_POSITIVE);
        if traj.flags.collapse_guard_tripped || underflow || traj.events.len() >= guards.max_events
        {
            traj.flags.collapse_guard_tripped = true;
            break;
        }
    }
    traj.final_state = (x, v);
    traj.elapsed = now;
    traj.flags.interference_detected = detect_interference(&traj, field);
    traj
}

/// A collided scatterer whose centre is within `2 eps` of an earlier,
/// non-adjacent free-flight segment, i.e. whose ball meets the `eps`-tube of
/// that segment.
fn detect_interference<const D: usize>(traj: &Trajectory<D>, field: &ScattererField<D>) -> bool {
    let pts = traj.vertices();
    let reach = 2.0 * field.params.eps;
    for (k, e) in traj.events.iter().enumerate() {
        let n = k + 1;
        let c = &field.centers[e.scatterer_index];
        for p in 0..n.saturating_sub(1) {
            if point_segment_distance(c, &pts[p], &pts[p + 1]) <= reach {
                return true;
            }
        }
    }
    false
}

/// Per-seed summary of one flow run.
#[derive(Debug, Clone, Copy)]
pub struct RunSummary {
    pub events: usize,
    pub min_gap: f64,
    pub flags: Flags,
}

#[derive(Debug, Clone, Serialize)]
pub struct CountDistribution {
    pub histogram: Vec<u64>,
    pub n_seeds: usize,
    pub mean_count: f64,
    pub collapse_frequency: f64,
    pub simultaneous_frequency: f64,
    pub recollision_frequency: f64,
    pub overlap_frequency: f64,
    pub min_gap: Option<f64>,
}

/// Sample one annealed trajectory: fresh Poisson field on the dynamical ball.
pub fn sample_trajectory<const D: usize>(
    params: KineticParams,
    x0: &Vector<D>,
    v0: &Vector<D>,
    t: f64,
    guards: Guards,
    key: u64,
) -> Trajectory<D> {
    let ball = dynamical_ball(x0, v0, t, params.eps);
    let field = sample_field(ball, params, key).expect("dynamical ball has positive radius");
    evolve(x0, v0, &field, t, guards)
}

pub fn collision_count_distribution<const D: usize>(
    params: KineticParams,
    x0: &Vector<D>,
    v0: &Vector<D>,
    t: f64,
    n_seeds: usize,
    guards: Guards,
    seed: u64,
) -> CountDistribution {
    let runs: Vec<RunSummary> = (0..n_seeds as u64)
        .into_par_iter()
        .map(|i| {
            let tr = sample_trajectory(params, x0, v0, t, guards, sample_key(seed, i));
            RunSummary {
                events: tr.events.len(),
                min_gap: tr
                    .free_flight_gaps
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min),
                flags: tr.flags,
            }
        })
        .collect();
    let max = runs.iter().map(|r| r.events).max().unwrap_or(0);
    let mut histogram = vec![0u64; max + 1];
    for r in &runs {
        histogram[r.events] += 1;
    }
    let n = n_seeds.max(1) as f64;
    let freq = |f: fn(&Flags) -> bool| runs.iter().filter(|r| f(&r.flags)).count() as f64 / n;
    let min_gap = runs.iter().map(|r| r.min_gap).fold(f64::INFINITY, f64::min);
    CountDistribution {
        n_seeds,
        mean_count: runs.iter().map(|r| r.events as f64).sum::<f64>() / n,
        collapse_frequency: freq(|f| f.collapse_guard_tripped),
        simultaneous_frequency: freq(|f| f.simultaneous_collision),
        recollision_frequency: freq(|f| f.recollision_detected),
        overlap_frequency: freq(|f| f.frozen_overlap),
        min_gap: min_gap.is_finite().then_some(min_gap),
        histogram,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapSummary {
    pub count: usize,
    pub min: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    pub max: f64,
}

/// Quantiles of the pooled inter-collision gaps; `None` when no trajectory
/// has two collisions.
pub fn min_gap_statistics<const D: usize>(trajectories: &[Trajectory<D>]) -> Option<GapSummary> {
    let mut gaps: Vec<f64> = trajectories
        .iter()
        .flat_map(|t| t.free_flight_gaps.iter().copied())
        .collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| gaps[((gaps.len() - 1) as f64 * p).round() as usize];
    Some(GapSummary {
        count: gaps.len(),
        min: gaps[0],
        q05: q(0.05),
        median: q(0.5),
        q95: q(0.95),
        max: gaps[gaps.len() - 1],
    })
}
