//! Exact sampler and closed forms for the lens distance process `(Z, J)`.
//!
//! For skewness `beta > 0` the distance process on the local-time clock is
//! piecewise linear with slope `+beta` while `J = 1` and `-beta` while
//! `J = 0`; the flag flips at state-dependent rates
//!
//! ```text
//! (z, 1) -> (z, 0)   at rate (1+beta) / (2z)
//! (z, 0) -> (z, 1)   at rate (1-beta) / (2z)
//! ```
//!
//! Because the motion between flips is deterministic, the level at which the
//! next flip occurs can be sampled exactly by inverting the integrated
//! hazard along the ramp — no time discretization anywhere. Three variants
//! are supported: the plain process, its transform by the harmonic function
//! `h(z,1) = z`, `h(z,0) = z(1-beta)/(1+beta)` (conditioned to climb; the
//! flip rates swap their `1±beta` factors), and the transform by
//! `h⁻(z,1) = 1 - z/b`, `h⁻(z,0) = 1 - (z/b)(1-beta)/(1+beta)` (conditioned
//! to stay below the barrier `b`), whose integrated hazards are still in
//! closed logarithmic form and are inverted by bisection.
//!
//! Negative `beta` is handled by the exact flag relabeling `j <-> 1-j`: the
//! process with skewness `-beta` and flag `j` evolves like the one with
//! skewness `beta` and flag `1-j`, and `J = 1` then marks decreasing
//! stretches. All public entry points apply that reduction internally.

use std::io::Write;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{open_unit, Beta};
use crate::stats::{self, Estimate};

/// State of the distance process: nonnegative level and flag.
/// `j = 0` means the lower path of the pair sits at the origin,
/// `j = 1` means the upper one does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZjState {
    pub z: f64,
    pub j: u8,
}

impl ZjState {
    pub fn new(z: f64, j: u8) -> Result<Self> {
        if !(z.is_finite() && z >= 0.0) {
            return Err(Error::invalid(format!("ZjState: z must be >= 0, got {z}")));
        }
        if j > 1 {
            return Err(Error::invalid(format!("ZjState: flag must be 0 or 1, got {j}")));
        }
        Ok(ZjState { z, j })
    }
}

/// Which conditioning to simulate under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    /// The unconditioned process.
    Plain,
    /// Transform by the harmonic function `h`; drifts to arbitrarily high
    /// levels (used for entrance ascents).
    HUp,
    /// Transform by `h⁻`: conditioned never to reach the barrier.
    HMinus { barrier: f64 },
}

/// Why a simulated path ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminal {
    /// Absorbed at the floor truncation level.
    Floor,
    /// Reached the ceiling of the stop rule.
    Ceiling,
    /// Ran out of local-time budget.
    Horizon,
}

/// `(t, z, j)` at the start of one linear stretch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakpoint {
    pub t: f64,
    pub z: f64,
    pub j: u8,
}

/// A piecewise-linear path of the distance process on the local-time clock.
#[derive(Debug, Clone)]
pub struct ZjPath {
    /// Signed skewness the path was generated under.
    pub beta: f64,
    /// Breakpoints, starting with the initial state; flags alternate.
    pub points: Vec<Breakpoint>,
    pub end_t: f64,
    pub end_z: f64,
    pub terminal: Terminal,
    /// Set by [`reverse_path`]: the flag-vs-slope convention is inverted.
    pub reversed: bool,
}

/// One linear stretch of a path.
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub z0: f64,
    pub z1: f64,
    pub j: u8,
}

impl ZjPath {
    pub fn duration(&self) -> f64 {
        self.end_t
    }

    pub fn sup_z(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.z)
            .fold(self.end_z, f64::max)
    }

    /// Number of flag flips along the path.
    pub fn n_flips(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    pub fn segments(&self) -> impl Iterator<Item = Segment> + '_ {
        (0..self.points.len()).map(move |k| {
            let p = self.points[k];
            let (t1, z1) = if k + 1 < self.points.len() {
                (self.points[k + 1].t, self.points[k + 1].z)
            } else {
                (self.end_t, self.end_z)
            };
            Segment {
                t0: p.t,
                t1,
                z0: p.z,
                z1,
                j: p.j,
            }
        })
    }

    /// Clock time and level of the path maximum.
    pub fn argmax(&self) -> (f64, f64) {
        let mut best = (self.end_t, self.end_z);
        for p in &self.points {
            if p.z > best.1 {
                best = (p.t, p.z);
            }
        }
        best
    }

    /// Local time spent strictly above `level` within the clock window.
    pub fn occupation_above(&self, level: f64, t_lo: f64, t_hi: f64) -> f64 {
        let mut total = 0.0;
        for s in self.segments() {
            let (t0, t1) = (s.t0.max(t_lo), s.t1.min(t_hi));
            if t1 <= t0 {
                continue;
            }
            // z is linear on [s.t0, s.t1]
            let slope = (s.z1 - s.z0) / (s.t1 - s.t0);
            let za = s.z0 + slope * (t0 - s.t0);
            let zb = s.z0 + slope * (t1 - s.t0);
            let (lo, hi) = (za.min(zb), za.max(zb));
            if hi <= level {
                continue;
            }
            if lo >= level {
                total += t1 - t0;
            } else {
                total += (t1 - t0) * (hi - level) / (hi - lo);
            }
        }
        total
    }

    /// Flips at levels above `cut` within the clock window.
    pub fn flips_above(&self, cut: f64, t_lo: f64, t_hi: f64) -> usize {
        self.points
            .iter()
            .skip(1)
            .filter(|p| p.z > cut && p.t >= t_lo && p.t <= t_hi)
            .count()
    }

    /// When absorbed at a floor, the local time still to run before the
    /// level would reach zero in a straight line: `end_z / |beta|`.
    pub fn truncation_tail_bound(&self) -> Option<f64> {
        (self.terminal == Terminal::Floor).then(|| self.end_z / self.beta.abs())
    }
}

/// Stop conditions for [`simulate_zj`]; any subset may be active, but the
/// rule must guarantee termination (a floor, a clock horizon, or a ceiling
/// under the climbing transform).
#[derive(Debug, Clone, Copy, Default)]
pub struct StopRule {
    pub ceiling: Option<f64>,
    pub floor: Option<f64>,
    pub max_t: Option<f64>,
}

impl StopRule {
    pub fn at_floor(eps: f64) -> Self {
        StopRule {
            floor: Some(eps),
            ..Default::default()
        }
    }

    pub fn ceiling_or_floor(v: f64, eps: f64) -> Self {
        StopRule {
            ceiling: Some(v),
            floor: Some(eps),
            max_t: None,
        }
    }

    pub fn horizon(t: f64) -> Self {
        StopRule {
            max_t: Some(t),
            ..Default::default()
        }
    }

    fn validate(&self, kind: Transform) -> Result<()> {
        for (name, v) in [
            ("ceiling", self.ceiling),
            ("floor", self.floor),
            ("max_t", self.max_t),
        ] {
            if let Some(x) = v {
                if !(x.is_finite() && x > 0.0) {
                    return Err(Error::invalid(format!("stop rule: {name} must be > 0, got {x}")));
                }
            }
        }
        let terminating = self.floor.is_some()
            || self.max_t.is_some()
            || (matches!(kind, Transform::HUp) && self.ceiling.is_some());
        if !terminating {
            return Err(Error::invalid(
                "stop rule cannot guarantee termination (set a floor or horizon)",
            ));
        }
        Ok(())
    }
}

// ---------- flip-level sampling ----------

/// Exponent bookkeeping for the closed-form ramps, with `bp = |beta|`.
fn plain_up_level(z: f64, bp: f64, u: f64) -> f64 {
    z * u.powf(-2.0 * bp / (1.0 + bp))
}

fn plain_down_level(z: f64, bp: f64, u: f64) -> f64 {
    z * u.powf(2.0 * bp / (1.0 - bp))
}

fn hup_up_level(z: f64, bp: f64, u: f64) -> f64 {
    z * u.powf(-2.0 * bp / (1.0 - bp))
}

fn hup_down_level(z: f64, bp: f64, u: f64) -> f64 {
    z * u.powf(2.0 * bp / (1.0 + bp))
}

/// Integrated flip hazard of the barrier transform along the upward ramp
/// from `z` to `v`, `z < v < b`. Diverges as `v -> b`.
fn hminus_up_hazard(z: f64, v: f64, b: f64, bp: f64) -> f64 {
    (1.0 + bp) / (2.0 * bp) * (v / z).ln() + ((b - z) / (b - v)).ln()
}

/// Integrated flip hazard of the barrier transform along the downward ramp
/// from `z` to `v`, `0 < v < z <= b`. Diverges as `v -> 0`.
fn hminus_down_hazard(z: f64, v: f64, b: f64, bp: f64) -> f64 {
    let c = (1.0 + bp) * b;
    (1.0 - bp) / (2.0 * bp) * (z / v).ln() + ((c - (1.0 - bp) * z) / (c - (1.0 - bp) * v)).ln()
}

/// Solve `hazard(v) = target` for `v` in `(lo, hi)` by bisection, where the
/// hazard is continuous and monotone on the bracket. Relative tolerance
/// 1e-12 on the level.
fn invert_hazard(mut lo: f64, mut hi: f64, target: f64, increasing: bool, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let val = f(mid);
        let go_right = if increasing { val < target } else { val > target };
        if go_right {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1e-300) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// The level at which the flag next flips, by exact inversion of the
/// integrated hazard along the current ramp. `u` is a uniform on (0,1);
/// the flip level is a deterministic function of `(state, u)`.
///
/// Negative skewness is reduced to positive by the flag relabeling.
pub fn jump_level(state: ZjState, beta: Beta, kind: Transform, u: f64) -> Result<f64> {
    if state.z <= 0.0 {
        return Err(Error::invalid("jump_level: absorbed state (z = 0)"));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::invalid(format!("jump_level: u must be in (0,1), got {u}")));
    }
    let bp = beta.abs();
    let j = if beta.is_positive() { state.j } else { 1 - state.j };
    let z = state.z;
    match kind {
        Transform::Plain => Ok(if j == 1 {
            plain_up_level(z, bp, u)
        } else {
            plain_down_level(z, bp, u)
        }),
        Transform::HUp => Ok(if j == 1 {
            hup_up_level(z, bp, u)
        } else {
            hup_down_level(z, bp, u)
        }),
        Transform::HMinus { barrier } => {
            if !(barrier.is_finite() && barrier > 0.0) {
                return Err(Error::invalid("jump_level: barrier must be > 0"));
            }
            if z > barrier || (z == barrier && j == 1) {
                return Err(Error::invalid(format!(
                    "jump_level: z = {z} at or above the barrier {barrier}"
                )));
            }
            let target = -u.ln();
            if j == 1 {
                let f = |v: f64| hminus_up_hazard(z, v, barrier, bp);
                Ok(invert_hazard(z, barrier, target, true, f))
            } else {
                // bracket downward: hazard grows without bound as v -> 0
                let f = |v: f64| hminus_down_hazard(z, v, barrier, bp);
                let mut lo = 0.5 * z;
                while f(lo) < target {
                    lo *= 0.5;
                }
                Ok(invert_hazard(lo, z, target, false, f))
            }
        }
    }
}

// ---------- path simulation ----------

struct RawPath {
    points: Vec<Breakpoint>,
    end_t: f64,
    end_z: f64,
    terminal: Terminal,
}

const FLIP_CAP: usize = 10_000_000;

/// Core loop in the positive-skewness convention (`j = 1` ascends).
fn simulate_positive(
    rng: &mut ChaCha8Rng,
    z0: f64,
    j0: u8,
    bp: f64,
    kind: Transform,
    stop: StopRule,
) -> Result<RawPath> {
    let beta_for_levels = Beta::new(bp).expect("positive beta");
    let mut points = vec![Breakpoint { t: 0.0, z: z0, j: j0 }];
    let mut t = 0.0;
    let mut z = z0;
    let mut j = j0;
    for _ in 0..FLIP_CAP {
        let u = open_unit(rng);
        let level = jump_level(ZjState { z, j }, beta_for_levels, kind, u)?;
        // the ramp may hit a stop before the flip
        let (stop_level, terminal) = if j == 1 {
            match stop.ceiling {
                Some(v) if level >= v => (v, Some(Terminal::Ceiling)),
                _ => (level, None),
            }
        } else {
            match stop.floor {
                Some(eps) if level <= eps => (eps, Some(Terminal::Floor)),
                _ => (level, None),
            }
        };
        let ramp_time = (stop_level - z).abs() / bp;
        if let Some(t_max) = stop.max_t {
            if t + ramp_time >= t_max {
                let dz = bp * (t_max - t);
                let end_z = if j == 1 { z + dz } else { z - dz };
                return Ok(RawPath {
                    points,
                    end_t: t_max,
                    end_z,
                    terminal: Terminal::Horizon,
                });
            }
        }
        t += ramp_time;
        z = stop_level;
        if let Some(term) = terminal {
            return Ok(RawPath {
                points,
                end_t: t,
                end_z: z,
                terminal: term,
            });
        }
        j = 1 - j;
        points.push(Breakpoint { t, z, j });
    }
    Err(Error::Degenerate(format!("simulate_zj: flip cap {FLIP_CAP} hit")))
}

fn finish_path(raw: RawPath, beta: Beta) -> ZjPath {
    let mut points = raw.points;
    if !beta.is_positive() {
        for p in &mut points {
            p.j = 1 - p.j;
        }
    }
    ZjPath {
        beta: beta.get(),
        points,
        end_t: raw.end_t,
        end_z: raw.end_z,
        terminal: raw.terminal,
        reversed: false,
    }
}

/// Simulate the distance process from `(z0, j0)` until a stop condition,
/// by alternating exact flip-level draws. The elapsed clock time between
/// breakpoints is `|dz| / |beta|` exactly.
pub fn simulate_zj(
    z0: f64,
    j0: u8,
    beta: Beta,
    kind: Transform,
    stop: StopRule,
    seed: u64,
) -> Result<ZjPath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_zj_with(&mut rng, z0, j0, beta, kind, stop)
}

/// Same as [`simulate_zj`] but drawing from a caller-owned stream, so that
/// composite constructions consume one seed.
pub fn simulate_zj_with(
    rng: &mut ChaCha8Rng,
    z0: f64,
    j0: u8,
    beta: Beta,
    kind: Transform,
    stop: StopRule,
) -> Result<ZjPath> {
    if !(z0.is_finite() && z0 > 0.0) {
        return Err(Error::invalid(format!("simulate_zj: z0 must be > 0, got {z0}")));
    }
    if j0 > 1 {
        return Err(Error::invalid("simulate_zj: flag must be 0 or 1"));
    }
    stop.validate(kind)?;
    if let Some(eps) = stop.floor {
        if eps >= z0 {
            return Err(Error::invalid(format!(
                "simulate_zj: floor {eps} must lie below z0 = {z0}"
            )));
        }
    }
    if let Transform::HMinus { barrier } = kind {
        let j_pos = if beta.is_positive() { j0 } else { 1 - j0 };
        if z0 > barrier || (z0 == barrier && j_pos == 1) {
            return Err(Error::invalid(
                "simulate_zj: start at or above the barrier",
            ));
        }
    }
    let j_pos = if beta.is_positive() { j0 } else { 1 - j0 };
    let raw = simulate_positive(rng, z0, j_pos, beta.abs(), kind, stop)?;
    Ok(finish_path(raw, beta))
}

/// A path conditioned on its maximum: an entrance ascent (climbing
/// transform from `eps_entrance`, killed on hitting `b`, arriving on an
/// ascending stretch) concatenated with a barrier-transform descent from
/// `(b, descending)` run down to `eps_floor`. The maximum `b` is attained
/// exactly at the junction.
pub fn conditioned_max_path(
    b: f64,
    beta: Beta,
    eps_entrance: f64,
    eps_floor: f64,
    seed: u64,
) -> Result<ZjPath> {
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::invalid("conditioned_max_path: b must be > 0"));
    }
    for (name, eps) in [("eps_entrance", eps_entrance), ("eps_floor", eps_floor)] {
        if !(eps > 0.0 && eps < b) {
            return Err(Error::invalid(format!(
                "conditioned_max_path: {name} must lie in (0, b), got {eps}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bp = beta.abs();
    let up = simulate_positive(
        &mut rng,
        eps_entrance,
        1,
        bp,
        Transform::HUp,
        StopRule {
            ceiling: Some(b),
            floor: None,
            max_t: None,
        },
    )?;
    debug_assert_eq!(up.terminal, Terminal::Ceiling);
    let t_max = up.end_t;
    let down = simulate_positive(
        &mut rng,
        b,
        0,
        bp,
        Transform::HMinus { barrier: b },
        StopRule::at_floor(eps_floor),
    )?;
    let mut points = up.points;
    points.push(Breakpoint { t: t_max, z: b, j: 0 });
    points.extend(down.points.iter().skip(1).map(|p| Breakpoint {
        t: p.t + t_max,
        z: p.z,
        j: p.j,
    }));
    let raw = RawPath {
        points,
        end_t: t_max + down.end_t,
        end_z: down.end_z,
        terminal: Terminal::Floor,
    };
    Ok(finish_path(raw, beta))
}

/// Entrance ascent alone: the climbing transform from `(eps_entrance, 1)`
/// killed on hitting `b`.
pub fn entrance_ascent(b: f64, beta: Beta, eps_entrance: f64, seed: u64) -> Result<ZjPath> {
    if !(eps_entrance > 0.0 && eps_entrance < b) {
        return Err(Error::invalid(
            "entrance_ascent: eps_entrance must lie in (0, b)",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j0 = if beta.is_positive() { 1 } else { 0 };
    simulate_zj_with(
        rng_mut(&mut rng),
        eps_entrance,
        j0,
        beta,
        Transform::HUp,
        StopRule {
            ceiling: Some(b),
            floor: None,
            max_t: None,
        },
    )
}

fn rng_mut(rng: &mut ChaCha8Rng) -> &mut ChaCha8Rng {
    rng
}

/// Time-reverse a floor-terminated path: breakpoints are mapped
/// `t -> duration - t` and re-emitted in order. Each stretch keeps its flag,
/// so on the reversed path ascending stretches carry the flag that marked
/// descending ones on the forward path — the flag-vs-slope convention
/// inverts, which is what the `reversed` marker records.
pub fn reverse_path(p: &ZjPath) -> Result<ZjPath> {
    if p.terminal != Terminal::Floor {
        return Err(Error::invalid(
            "reverse_path: path must have terminated at its floor",
        ));
    }
    let ell = p.end_t;
    let segs: Vec<Segment> = p.segments().collect();
    let mut points = Vec::with_capacity(segs.len() + 1);
    for s in segs.iter().rev() {
        points.push(Breakpoint {
            t: ell - s.t1,
            z: s.z1,
            j: s.j,
        });
    }
    let first = segs.first().expect("paths have at least one segment");
    Ok(ZjPath {
        beta: p.beta,
        points,
        end_t: ell,
        end_z: first.z0,
        terminal: p.terminal,
        reversed: !p.reversed,
    })
}

// ---------- closed forms ----------

fn flag_for_sign(beta: Beta, j: u8) -> u8 {
    if beta.is_positive() {
        j
    } else {
        1 - j
    }
}

/// Probability that the level ever reaches `v` from `(z, j)`:
/// `1` for `v <= z`, else `z/v` on an ascending-flag start and
/// `(z/v)(1-beta)/(1+beta)` on a descending one.
pub fn closed_hitting(z: f64, j: u8, v: f64, beta: Beta) -> Result<f64> {
    if !(z > 0.0 && v > 0.0) {
        return Err(Error::invalid("closed_hitting: z and v must be > 0"));
    }
    if j > 1 {
        return Err(Error::invalid("closed_hitting: flag must be 0 or 1"));
    }
    if v <= z {
        return Ok(1.0);
    }
    let bp = beta.abs();
    Ok(match flag_for_sign(beta, j) {
        1 => z / v,
        _ => z / v * (1.0 - bp) / (1.0 + bp),
    })
}

/// Potential density `u((x, j), (z, k))` of the plain process: expected
/// local time per unit level spent at `(z, k)` before absorption, started
/// from `(x, j)`.
pub fn closed_potential(x: f64, j: u8, z: f64, k: u8, beta: Beta) -> Result<f64> {
    if !(x > 0.0 && z > 0.0) {
        return Err(Error::invalid("closed_potential: x and z must be > 0"));
    }
    if j > 1 || k > 1 {
        return Err(Error::invalid("closed_potential: flags must be 0 or 1"));
    }
    let bp = beta.abs();
    let (j, k) = (flag_for_sign(beta, j), flag_for_sign(beta, k));
    let plus = (1.0 + bp) / (2.0 * bp * bp);
    let minus = (1.0 - bp) / (2.0 * bp * bp);
    let val = if z <= x {
        match (j, k) {
            (0, 0) | (1, 0) => plus,
            _ => minus,
        }
    } else {
        let ratio = x / z;
        match (j, k) {
            (0, 0) | (0, 1) => minus * ratio,
            _ => plus * ratio,
        }
    };
    Ok(val)
}

/// Average of [`closed_potential`] over the level bin `[lo, hi)`, exact by
/// piecewise integration (the density is constant below `x` and `c x / z`
/// above).
pub fn closed_potential_bin_mean(x: f64, j: u8, lo: f64, hi: f64, k: u8, beta: Beta) -> Result<f64> {
    if !(hi > lo && lo >= 0.0) {
        return Err(Error::invalid("closed_potential_bin_mean: bad bin"));
    }
    let width = hi - lo;
    let below_hi = hi.min(x);
    let mut integral = 0.0;
    if below_hi > lo {
        let c = closed_potential(x, j, 0.5 * (lo + below_hi), k, beta)?;
        integral += c * (below_hi - lo);
    }
    if hi > x {
        let above_lo = lo.max(x);
        // density c * x / z on (x, inf); recover c from any point above x
        let c = closed_potential(x, j, 2.0 * x, k, beta)? * 2.0;
        integral += c * x * (hi / above_lo).ln();
    }
    Ok(integral / width)
}

/// Harmonic function of the plain process: on an ascending-flag state it is
/// the level itself, on a descending one the level scaled by
/// `(1-beta)/(1+beta)`.
pub fn harmonic_h(z: f64, j: u8, beta: Beta) -> f64 {
    let bp = beta.abs();
    match flag_for_sign(beta, j.min(1)) {
        1 => z,
        _ => z * (1.0 - bp) / (1.0 + bp),
    }
}

/// Density of the reference measure under which the descent from the
/// maximum and the reversed entrance ascent are adjoint:
/// `m(z, 1) = (1-beta)/(2 beta^2) (1 - z/b)`,
/// `m(z, 0) = (1+beta)/(2 beta^2) - (1-beta)/(2 beta^2) z/b`.
pub fn duality_measure_m(z: f64, j: u8, b: f64, beta: Beta) -> Result<f64> {
    if !(z > 0.0 && z < b) {
        return Err(Error::invalid(format!(
            "duality_measure_m: z must lie in (0, b), got z = {z}, b = {b}"
        )));
    }
    if j > 1 {
        return Err(Error::invalid("duality_measure_m: flag must be 0 or 1"));
    }
    let bp = beta.abs();
    let plus = (1.0 + bp) / (2.0 * bp * bp);
    let minus = (1.0 - bp) / (2.0 * bp * bp);
    Ok(match flag_for_sign(beta, j) {
        1 => minus * (1.0 - z / b),
        _ => plus - minus * z / b,
    })
}

/// Closed-form probability that the jump chain returns to its start state:
/// `(1-beta)/(1+beta)`, independent of the start level and flag.
pub fn return_probability(beta: Beta) -> f64 {
    let bp = beta.abs();
    (1.0 - bp) / (1.0 + bp)
}

/// Monte Carlo counterpart of [`return_probability`]: from `(x, descending)`
/// the chain flips somewhere below `x` and returns iff it ever climbs back
/// to the level `x` (after which it must cross `x` downward again, which is
/// the re-entry into the start state).
pub fn mc_return_probability(beta: Beta, replicas: usize, seed: u64) -> Result<Estimate> {
    if replicas == 0 {
        return Err(Error::invalid("mc_return_probability: replicas = 0"));
    }
    let bp = beta.abs();
    let beta_pos = Beta::new(bp).expect("positive beta");
    let successes = crate::experiments::parallel_count(replicas, seed, "return-prob", move |rng| {
        let u = open_unit(rng);
        let v = plain_down_level(1.0, bp, u);
        let path = simulate_zj_with(
            rng,
            v,
            1,
            beta_pos,
            Transform::Plain,
            StopRule::ceiling_or_floor(1.0, 1e-9 * v),
        )
        .expect("valid zj parameters");
        path.terminal == Terminal::Ceiling
    });
    stats::wilson_interval(successes, replicas, 1.96)
}

/// Monte Carlo estimate of the probability that the level reaches `v`
/// before absorption, to compare against [`closed_hitting`].
pub fn mc_hitting(z: f64, j: u8, v: f64, beta: Beta, replicas: usize, seed: u64) -> Result<Estimate> {
    if replicas == 0 {
        return Err(Error::invalid("mc_hitting: replicas = 0"));
    }
    if !(z > 0.0 && v > z) {
        return Err(Error::invalid("mc_hitting: need 0 < z < v"));
    }
    let successes = crate::experiments::parallel_count(replicas, seed, "hitting", move |rng| {
        let path = simulate_zj_with(
            rng,
            z,
            j,
            beta,
            Transform::Plain,
            StopRule::ceiling_or_floor(v, 1e-8 * z),
        )
        .expect("valid zj parameters");
        path.terminal == Terminal::Ceiling
    });
    stats::wilson_interval(successes, replicas, 1.96)
}

/// Binned occupation-density estimate of the plain process with normal CIs,
/// one histogram per arrival flag.
#[derive(Debug, Clone)]
pub struct OccupationEstimate {
    pub edges: Vec<f64>,
    /// `density[k][bin]` for arrival flag `k`.
    pub density: [Vec<Estimate>; 2],
}

/// Accumulate per-flag local time of one path into `sums` (bins x flags),
/// optionally swapping the flag labels (used to realize the relabeled
/// process without re-simulating).
pub(crate) fn accumulate_occupation(
    path: &ZjPath,
    edges: &[f64],
    swap_flags: bool,
    sums: &mut [[f64; 2]],
) {
    let bp = path.beta.abs();
    for s in path.segments() {
        let (lo, hi) = (s.z0.min(s.z1), s.z0.max(s.z1));
        let k = if swap_flags { 1 - s.j } else { s.j } as usize;
        // locate first bin whose upper edge exceeds lo
        let start = edges.partition_point(|e| *e <= lo).saturating_sub(1);
        for bin in start..edges.len() - 1 {
            let (a, b) = (edges[bin], edges[bin + 1]);
            if a >= hi {
                break;
            }
            let overlap = hi.min(b) - lo.max(a);
            if overlap > 0.0 {
                sums[bin][k] += overlap / bp;
            }
        }
    }
}

/// Estimate the occupation density of the plain process started at
/// `(x, j)` and absorbed at `1e-8 x`, over the level bins given by `edges`.
pub fn estimate_potential(
    x: f64,
    j: u8,
    beta: Beta,
    edges: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<OccupationEstimate> {
    if replicas == 0 {
        return Err(Error::invalid("estimate_potential: replicas = 0"));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) || edges[0] < 0.0 {
        return Err(Error::invalid("estimate_potential: edges must be increasing and >= 0"));
    }
    if !(x > 0.0) {
        return Err(Error::invalid("estimate_potential: x must be > 0"));
    }
    let n_bins = edges.len() - 1;
    let floor = 1e-8 * x;
    let edges_owned = edges.to_vec();
    let stats2 = crate::experiments::parallel_moments(
        replicas,
        seed,
        "potential",
        2 * n_bins,
        move |rng, scratch| {
            let path = simulate_zj_with(rng, x, j, beta, Transform::Plain, StopRule::at_floor(floor))
                .expect("valid zj parameters");
            let mut sums = vec![[0.0f64; 2]; n_bins];
            accumulate_occupation(&path, &edges_owned, false, &mut sums);
            for (bin, pair) in sums.iter().enumerate() {
                scratch[bin] = pair[0];
                scratch[n_bins + bin] = pair[1];
            }
        },
    );
    let mut density = [Vec::with_capacity(n_bins), Vec::with_capacity(n_bins)];
    for k in 0..2 {
        for bin in 0..n_bins {
            let width = edges[bin + 1] - edges[bin];
            let est = stats2.interval(k * n_bins + bin, 1.96);
            density[k].push(Estimate {
                mean: est.mean / width,
                ci_lo: est.ci_lo / width,
                ci_hi: est.ci_hi / width,
                n: est.n,
                method: est.method,
            });
        }
    }
    Ok(OccupationEstimate {
        edges: edges.to_vec(),
        density,
    })
}

/// Write a path as CSV rows `t,z,j` (breakpoints plus the terminal point).
pub fn write_path_csv(path: &ZjPath, out: &mut impl Write) -> Result<()> {
    writeln!(out, "t,z,j")?;
    for p in &path.points {
        writeln!(out, "{},{},{}", p.t, p.z, p.j)?;
    }
    let last_j = path.points.last().map(|p| p.j).unwrap_or(0);
    writeln!(out, "{},{},{last_j}", path.end_t, path.end_z)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::replica_rng;

    fn beta(b: f64) -> Beta {
        Beta::new(b).unwrap()
    }

    fn st(z: f64, j: u8) -> ZjState {
        ZjState::new(z, j).unwrap()
    }

    #[test]
    fn jump_level_closed_forms() {
        let b = beta(0.5);
        let v = jump_level(st(1.0, 0), b, Transform::Plain, 0.25).unwrap();
        assert!((v - 0.0625).abs() < 1e-15); // 0.25^2
        let v = jump_level(st(1.0, 1), b, Transform::Plain, 0.25).unwrap();
        assert!((v - 0.25f64.powf(-2.0 / 3.0)).abs() < 1e-12);
        assert!((v - 2.5198420997897464).abs() < 1e-12);
        let v = jump_level(st(1.0, 1), b, Transform::HUp, 0.25).unwrap();
        assert!((v - 16.0).abs() < 1e-12); // 0.25^-2
        // relabeled: beta < 0 with flipped flag gives the same level
        let v_neg = jump_level(st(1.0, 0), beta(-0.5), Transform::HUp, 0.25).unwrap();
        assert!((v_neg - 16.0).abs() < 1e-12);
    }

    #[test]
    fn jump_level_rejects_bad_states() {
        let b = beta(0.5);
        assert!(jump_level(st(0.0, 0), b, Transform::Plain, 0.5).is_err());
        assert!(jump_level(st(1.0, 0), b, Transform::Plain, 0.0).is_err());
        assert!(jump_level(st(1.0, 0), b, Transform::Plain, 1.0).is_err());
        let hm = Transform::HMinus { barrier: 1.0 };
        assert!(jump_level(st(1.0, 1), b, hm, 0.5).is_err()); // at barrier, ascending
        assert!(jump_level(st(1.5, 0), b, hm, 0.5).is_err()); // above barrier
        assert!(jump_level(st(1.0, 0), b, hm, 0.5).is_ok()); // 1.0- descent start
    }

    #[test]
    fn barrier_inversion_solves_the_hazard() {
        let bp = 0.5;
        let b = beta(bp);
        let barrier = 2.0;
        for &z in &[0.1, 0.5, 1.0, 1.9, 1.999] {
            for &u in &[0.999, 0.6, 0.25, 1e-3, 1e-9] {
                let target = -f64::ln(u);
                let v = jump_level(st(z, 1), b, Transform::HMinus { barrier }, u).unwrap();
                assert!(v > z && v < barrier);
                // the root is accurate to ~1e-12 in the level; translate
                // through the local hazard slope to gate the residual
                let res = hminus_up_hazard(z, v, barrier, bp);
                let slope = (1.0 + bp) / (2.0 * bp * v) + 1.0 / (barrier - v);
                assert!(
                    (res - target).abs() <= slope * 1e-11 * v + 1e-9,
                    "up residual at z={z}, u={u}: {res} vs {target}"
                );
                let w = jump_level(st(z, 0), b, Transform::HMinus { barrier }, u).unwrap();
                assert!(w > 0.0 && w < z);
                let res = hminus_down_hazard(z, w, barrier, bp);
                let c = (1.0 + bp) * barrier;
                let slope = (1.0 - bp) / (2.0 * bp * w) + (1.0 - bp) / (c - (1.0 - bp) * w);
                assert!(
                    (res - target).abs() <= slope * 1e-11 * w.max(1e-30) + 1e-9,
                    "down residual at z={z}, u={u}: {res} vs {target}"
                );
            }
        }
        // ascending flips crowd against the barrier as z -> b
        let z = barrier * (1.0 - 1e-9);
        for u in [0.9, 0.5, 0.1] {
            let v = jump_level(st(z, 1), b, Transform::HMinus { barrier }, u).unwrap();
            assert!(v > z && v < barrier);
        }
    }

    #[test]
    fn paths_are_structurally_sound() {
        for (seed, bv, j0) in [(1u64, 0.5, 0u8), (2, 0.25, 1), (3, 0.75, 0), (4, -0.5, 1)] {
            let b = beta(bv);
            let path = simulate_zj(1.0, j0, b, Transform::Plain, StopRule::at_floor(1e-8), seed)
                .unwrap();
            assert_eq!(path.terminal, Terminal::Floor);
            assert!(path.duration().is_finite() && path.duration() > 0.0);
            assert!((path.end_z - 1e-8).abs() < 1e-20);
            for w in path.points.windows(2) {
                assert!(w[1].t > w[0].t, "clock must increase");
                assert_eq!(w[1].j, 1 - w[0].j, "flags must alternate");
                let dt = w[1].t - w[0].t;
                let dz = (w[1].z - w[0].z).abs();
                // the clock accumulates rounding at scale ulp(t)
                let tol = 1e-9 * dt + 1e-13 * w[1].t.max(1.0);
                assert!((dz / bv.abs() - dt).abs() <= tol);
            }
            for s in path.segments() {
                let ascending = s.z1 > s.z0;
                let expect_j = if bv > 0.0 {
                    u8::from(ascending)
                } else {
                    u8::from(!ascending)
                };
                assert_eq!(s.j, expect_j, "flag-slope pairing broken");
            }
            assert!(path.truncation_tail_bound().unwrap() > 0.0);
        }
    }

    #[test]
    fn negative_skew_is_the_exact_relabeling() {
        let pos = simulate_zj(1.0, 1, beta(0.5), Transform::Plain, StopRule::at_floor(1e-6), 77)
            .unwrap();
        let neg = simulate_zj(1.0, 0, beta(-0.5), Transform::Plain, StopRule::at_floor(1e-6), 77)
            .unwrap();
        assert_eq!(pos.points.len(), neg.points.len());
        for (p, q) in pos.points.iter().zip(&neg.points) {
            assert_eq!(p.t, q.t);
            assert_eq!(p.z, q.z);
            assert_eq!(p.j, 1 - q.j);
        }
    }

    #[test]
    fn descent_cycles_contract_geometrically() {
        // every plain path reaches the floor
        let bv = 0.5;
        let b = beta(bv);
        for seed in 0..200u64 {
            let path =
                simulate_zj(1.0, 0, b, Transform::Plain, StopRule::at_floor(1e-9), 900 + seed)
                    .unwrap();
            assert_eq!(path.terminal, Terminal::Floor);
        }
        // unbiased cycle draws: mean log-contraction per down-up cycle is
        // -4 beta^2 / (1 - beta^2)
        let cycle_logs: Vec<f64> = (0..20_000u64)
            .map(|i| {
                let mut rng = replica_rng(14, "cycle", i);
                let down = jump_level(st(1.0, 0), b, Transform::Plain, open_unit(&mut rng)).unwrap();
                let up = jump_level(st(down, 1), b, Transform::Plain, open_unit(&mut rng)).unwrap();
                up.ln()
            })
            .collect();
        let est = stats::normal_interval(&cycle_logs, 1.96).unwrap();
        let target = -4.0 * bv * bv / (1.0 - bv * bv);
        let se = (est.ci_hi - est.ci_lo) / (2.0 * 1.96);
        assert!(
            (est.mean - target).abs() <= 5.0 * se,
            "contraction {} vs {target}",
            est.mean
        );
    }

    #[test]
    fn closed_hitting_values() {
        let b = beta(0.5);
        assert!((closed_hitting(1.0, 1, 2.0, b).unwrap() - 0.5).abs() < 1e-15);
        assert!((closed_hitting(1.0, 0, 2.0, b).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(closed_hitting(3.0, 0, 2.0, b).unwrap(), 1.0);
        assert_eq!(closed_hitting(3.0, 1, 2.0, beta(-0.8)).unwrap(), 1.0);
        assert!(closed_hitting(0.0, 0, 1.0, b).is_err());
        assert!(closed_hitting(1.0, 0, -1.0, b).is_err());
        // relabeling: descending start for beta < 0 is flag 1
        assert!((closed_hitting(1.0, 1, 2.0, beta(-0.5)).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn closed_potential_values() {
        let b = beta(0.5);
        assert!((closed_potential(1.0, 0, 0.5, 0, b).unwrap() - 3.0).abs() < 1e-15);
        assert!((closed_potential(1.0, 0, 2.0, 0, b).unwrap() - 0.5).abs() < 1e-15);
        assert!((closed_potential(1.0, 1, 0.5, 1, b).unwrap() - 1.0).abs() < 1e-15);
        // relabeling identity at negative skew
        for (j, k) in [(0u8, 0u8), (0, 1), (1, 0), (1, 1)] {
            let neg = closed_potential(1.0, j, 1.7, k, beta(-0.5)).unwrap();
            let pos = closed_potential(1.0, 1 - j, 1.7, 1 - k, b).unwrap();
            assert_eq!(neg, pos);
        }
        assert!(closed_potential(0.0, 0, 1.0, 0, b).is_err());
    }

    #[test]
    fn harmonic_values_and_martingale() {
        let b = beta(0.5);
        assert_eq!(harmonic_h(1.0, 1, b), 1.0);
        assert!((harmonic_h(1.0, 0, b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(harmonic_h(0.0, 1, b), 0.0);
        assert_eq!(harmonic_h(0.0, 0, b), 0.0);

        // stopped harmonic mean is conserved
        let (z0, j0, v) = (1.0, 0u8, 4.0);
        let samples: Vec<f64> = (0..20_000)
            .map(|i| {
                let mut rng = replica_rng(5, "unit-martingale", i);
                let p = simulate_zj_with(&mut rng, z0, j0, b, Transform::Plain,
                    StopRule::ceiling_or_floor(v, 1e-7)).unwrap();
                let j_end = if p.terminal == Terminal::Ceiling { 1 } else { 0 };
                harmonic_h(p.end_z, j_end, b)
            })
            .collect();
        let est = stats::normal_interval(&samples, 1.96).unwrap();
        let se = (est.ci_hi - est.ci_lo) / (2.0 * 1.96);
        assert!(
            (est.mean - harmonic_h(z0, j0, b)).abs() <= 5.0 * se,
            "martingale mean {} vs {}",
            est.mean,
            harmonic_h(z0, j0, b)
        );
    }

    #[test]
    fn duality_measure_values() {
        let b = beta(0.5);
        assert!((duality_measure_m(0.5, 1, 1.0, b).unwrap() - 0.5).abs() < 1e-15);
        assert!((duality_measure_m(0.5, 0, 1.0, b).unwrap() - 2.5).abs() < 1e-15);
        assert!(duality_measure_m(1.0 - 1e-12, 1, 1.0, b).unwrap() < 1e-10);
        assert!(duality_measure_m(1.5, 1, 1.0, b).is_err());
        assert!(duality_measure_m(0.0, 1, 1.0, b).is_err());
    }

    #[test]
    fn return_probability_closed_and_mc() {
        assert!((return_probability(beta(0.5)) - 1.0 / 3.0).abs() < 1e-15);
        assert!(return_probability(beta(0.999)) < 6e-4);
        let est = mc_return_probability(beta(0.5), 20_000, 99).unwrap();
        assert!(
            est.within_half_widths(1.0 / 3.0, 5.0),
            "return prob {} ci [{}, {}]",
            est.mean,
            est.ci_lo,
            est.ci_hi
        );
        assert!(mc_return_probability(beta(0.5), 0, 1).is_err());
    }

    #[test]
    fn conditioned_path_peaks_at_junction() {
        let b = beta(0.5);
        for seed in 0..50u64 {
            let p = conditioned_max_path(1.0, b, 1e-6, 1e-6, 4000 + seed).unwrap();
            let (t_max, z_max) = p.argmax();
            assert_eq!(z_max, 1.0, "max must be exactly the target level");
            // never re-attains the barrier after the junction
            for pt in p.points.iter().filter(|pt| pt.t > t_max) {
                assert!(pt.z < 1.0);
            }
            // arrives ascending, leaves descending
            let at_max = p.points.iter().find(|pt| pt.t == t_max).unwrap();
            assert_eq!(at_max.j, 0, "post-max stretch must descend");
            assert_eq!(p.terminal, Terminal::Floor);
        }
        assert!(conditioned_max_path(1.0, b, 0.0, 1e-6, 1).is_err());
        assert!(conditioned_max_path(1.0, b, 1e-6, 2.0, 1).is_err());
    }

    #[test]
    fn reversal_is_an_involution_preserving_duration() {
        let b = beta(0.5);
        let p = conditioned_max_path(1.0, b, 1e-6, 1e-6, 123).unwrap();
        let r = reverse_path(&p).unwrap();
        assert_eq!(r.duration(), p.duration());
        assert!(r.reversed && !p.reversed);
        // reversed convention: ascending stretches carry flag 0
        for s in r.segments() {
            if s.z1 > s.z0 {
                assert_eq!(s.j, 0);
            } else {
                assert_eq!(s.j, 1);
            }
        }
        let rr = reverse_path(&r).unwrap();
        assert!(!rr.reversed);
        assert_eq!(rr.points.len(), p.points.len());
        for (a, c) in rr.points.iter().zip(&p.points) {
            assert!((a.t - c.t).abs() <= 1e-12 * p.duration().max(1.0));
            assert_eq!(a.z, c.z);
            assert_eq!(a.j, c.j);
        }
        // ceiling-terminated paths cannot be reversed
        let up = simulate_zj(1.0, 1, b, Transform::Plain, StopRule::ceiling_or_floor(2.0, 1e-9), 3)
            .unwrap();
        if up.terminal == Terminal::Ceiling {
            assert!(reverse_path(&up).is_err());
        }
    }

    #[test]
    fn ascent_flip_law_matches_conditioned_plain_chain() {
        // The climbing transform's first flip level from (1, ascending),
        // capped at v, must agree with the plain chain's first flip level
        // conditioned on reaching v: acceptance is by rejection sampling.
        let b = beta(0.5);
        let v = 50.0;
        let mut conditioned = Vec::new();
        let mut i = 0u64;
        while conditioned.len() < 1000 {
            let mut rng = replica_rng(21, "rejection", i);
            i += 1;
            let path = simulate_zj_with(&mut rng, 1.0, 1, b, Transform::Plain,
                StopRule::ceiling_or_floor(v, 1e-9)).unwrap();
            if path.terminal == Terminal::Ceiling {
                let first_flip = path
                    .points
                    .get(1)
                    .map(|p| p.z)
                    .unwrap_or(v)
                    .min(v);
                conditioned.push(first_flip);
            }
        }
        let transformed: Vec<f64> = (0..4000)
            .map(|k| {
                let mut rng = replica_rng(22, "hup-flip", k);
                let u = open_unit(&mut rng);
                hup_up_level(1.0, 0.5, u).min(v)
            })
            .collect();
        let (d, p) = stats::ks_two_sample(&conditioned, &transformed).unwrap();
        assert!(p > 0.01, "rejection cross-check failed: D = {d}, p = {p}");
    }

    #[test]
    fn potential_estimate_integrates_to_closed_total_below_start() {
        // total expected local time below the start level is x / beta^2
        let b = beta(0.5);
        let edges: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let occ = estimate_potential(1.0, 0, b, &edges, 30_000, 31).unwrap();
        let mut total = 0.0;
        let mut se2 = 0.0;
        for k in 0..2 {
            for (bin, est) in occ.density[k].iter().enumerate() {
                let w = occ.edges[bin + 1] - occ.edges[bin];
                total += est.mean * w;
                let se = (est.ci_hi - est.ci_lo) / (2.0 * 1.96) * w;
                se2 += se * se;
            }
        }
        let target = 1.0 / (0.5 * 0.5);
        assert!(
            (total - target).abs() <= 5.0 * se2.sqrt().max(1e-3),
            "total occupation {total} vs {target}"
        );
        assert!(estimate_potential(1.0, 0, b, &edges, 0, 1).is_err());
        assert!(estimate_potential(1.0, 0, b, &[0.2], 10, 1).is_err());
    }

    #[test]
    fn stop_rule_validation() {
        let b = beta(0.5);
        assert!(simulate_zj(1.0, 0, b, Transform::Plain, StopRule::default(), 1).is_err());
        assert!(simulate_zj(1.0, 0, b, Transform::Plain, StopRule::at_floor(-1.0), 1).is_err());
        assert!(simulate_zj(1.0, 0, b, Transform::Plain, StopRule::at_floor(2.0), 1).is_err());
        assert!(simulate_zj(0.0, 0, b, Transform::Plain, StopRule::at_floor(1e-6), 1).is_err());
        let horizon = simulate_zj(1.0, 0, b, Transform::Plain, StopRule::horizon(0.5), 1).unwrap();
        assert_eq!(horizon.terminal, Terminal::Horizon);
        assert!((horizon.duration() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn path_csv_has_header_and_terminal_row() {
        let p = simulate_zj(1.0, 0, beta(0.5), Transform::Plain, StopRule::at_floor(1e-4), 8)
            .unwrap();
        let mut buf = Vec::new();
        write_path_csv(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,z,j\n"));
        assert_eq!(text.lines().count(), p.points.len() + 2);
    }
}
