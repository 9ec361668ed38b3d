//! Coupled lattice flow of skew walkers driven by one shared noise.
//!
//! All walkers read the same uniform `u_k` at step `k`. Off the origin a
//! walker follows the driving increment `xi_k = +h` iff `u_k >= 1/2`; at the
//! origin it moves up iff `u_k >= (1-beta)/2`. The single event where a
//! walker at 0 moves against the driving increment is the discrete
//! local-time kick: the exact identity
//!
//! ```text
//! X_n = x0 + B_n + beta * Lhat_n
//! ```
//!
//! then *defines* the discrete local time `Lhat`, which is nondecreasing and
//! increases by `2h/|beta|` exactly at kicks. Initial points are snapped to
//! the even sublattice `2hZ` so all walkers share parity: the flow is
//! monotone and walkers coalesce exactly instead of crossing.
//!
//! Positions are kept as integer lattice indices internally; the exported
//! `f64` sequences are exact integer multiples of `h`.

use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Skewness parameter with `|beta|` strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beta(f64);

impl Beta {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta != 0.0 && beta.abs() < 1.0) {
            return Err(Error::invalid(format!(
                "beta must have |beta| in (0,1), got {beta}"
            )));
        }
        Ok(Beta(beta))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn abs(self) -> f64 {
        self.0.abs()
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0.0
    }

    /// Probability threshold for the up-move at the origin: `u >= (1-beta)/2`.
    pub fn origin_up_threshold(self) -> f64 {
        0.5 * (1.0 - self.0)
    }
}

/// One shared realization of the driving randomness on a lattice of
/// `n_steps` steps of size `dt`, with space step `h = sqrt(dt)`.
#[derive(Debug, Clone)]
pub struct NoisePath {
    pub n_steps: usize,
    pub dt: f64,
    pub h: f64,
    pub seed: u64,
    pub uniforms: Vec<f64>,
}

/// Deterministic uniforms on (0,1) from a seeded counter-based stream.
pub fn gen_noise(n_steps: usize, dt: f64, seed: u64) -> Result<NoisePath> {
    if n_steps == 0 {
        return Err(Error::invalid("gen_noise: n_steps must be >= 1"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("gen_noise: dt must be > 0, got {dt}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniforms = (0..n_steps).map(|_| open_unit(&mut rng)).collect();
    Ok(NoisePath {
        n_steps,
        dt,
        h: dt.sqrt(),
        seed,
        uniforms,
    })
}

/// Draw from the open interval (0,1).
pub(crate) fn open_unit(rng: &mut impl Rng) -> f64 {
    rng.sample(rand::distributions::Open01)
}

impl NoisePath {
    /// Build a path from explicit uniforms (used by tests and replays).
    pub fn from_uniforms(uniforms: Vec<f64>, dt: f64) -> Result<Self> {
        if uniforms.is_empty() {
            return Err(Error::EmptyInput("from_uniforms: no uniforms".into()));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("from_uniforms: dt must be > 0"));
        }
        if uniforms.iter().any(|u| !(*u > 0.0 && *u < 1.0)) {
            return Err(Error::invalid("from_uniforms: uniforms must lie in (0,1)"));
        }
        Ok(NoisePath {
            n_steps: uniforms.len(),
            dt,
            h: dt.sqrt(),
            seed: 0,
            uniforms,
        })
    }

    /// Driving increment `xi_k = +h` iff `u_k >= 1/2`.
    pub fn xi(&self, k: usize) -> f64 {
        if self.uniforms[k] >= 0.5 {
            self.h
        } else {
            -self.h
        }
    }
}

/// One walker trajectory with its exact discrete local time.
#[derive(Debug, Clone)]
pub struct WalkerPath {
    /// Starting position, snapped to the even sublattice `2hZ`.
    pub x0: f64,
    /// `positions[n]` for `n = 0..=n_steps`.
    pub positions: Vec<f64>,
    /// Discrete local time `lhat[n] = (positions[n] - x0 - B_n) / beta`.
    pub lhat: Vec<f64>,
    /// Cumulative count of steps `k <= n` with `positions[k] == 0`.
    pub zero_visits: Vec<u32>,
}

/// All walker paths driven by one noise, plus coalescence bookkeeping.
#[derive(Debug, Clone)]
pub struct FlowPaths {
    pub beta: Beta,
    pub h: f64,
    pub dt: f64,
    /// Walkers sorted by snapped starting point.
    pub walkers: Vec<WalkerPath>,
    /// Partial sums of the driving increments, `b[n] = B_n`, `b[0] = 0`.
    pub b: Vec<f64>,
    /// For each adjacent pair `(i, i+1)`: first step at which they are equal.
    adjacent_merge: Vec<Option<usize>>,
}

/// Single update rule shared by every walker.
///
/// `pos` must be an integer multiple of `h`. Off the origin the walker
/// follows the driving increment; at the origin it moves up iff
/// `u >= (1-beta)/2`, so the same `u` drives every walker.
pub fn step_walker(pos: f64, u: f64, beta: Beta, h: f64) -> f64 {
    if pos == 0.0 {
        if u >= beta.origin_up_threshold() {
            h
        } else {
            -h
        }
    } else if u >= 0.5 {
        pos + h
    } else {
        pos - h
    }
}

fn snap_even(x: f64, h: f64) -> i64 {
    2 * (x / (2.0 * h)).round() as i64
}

/// Simulate every walker of the flow over the full horizon of `noise`.
///
/// Initial points are snapped to `2hZ` and sorted; the returned walkers keep
/// that order at every step (monotonicity), and walkers that become equal
/// stay equal forever.
pub fn simulate_flow(noise: &NoisePath, beta: Beta, initial_points: &[f64]) -> Result<FlowPaths> {
    if initial_points.is_empty() {
        return Err(Error::EmptyInput("simulate_flow: no initial points".into()));
    }
    if initial_points.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("simulate_flow: non-finite initial point"));
    }
    let h = noise.h;
    let n = noise.n_steps;
    let mut idx0: Vec<i64> = initial_points.iter().map(|&x| snap_even(x, h)).collect();
    idx0.sort_unstable();
    let w = idx0.len();

    let up_thr = beta.origin_up_threshold();
    let bv = beta.get();

    let mut idx: Vec<i64> = idx0.clone();
    let mut b: i64 = 0;

    let mut walkers: Vec<WalkerPath> = idx0
        .iter()
        .map(|&i0| {
            let x0 = i0 as f64 * h;
            let mut positions = Vec::with_capacity(n + 1);
            let mut lhat = Vec::with_capacity(n + 1);
            let mut zero_visits = Vec::with_capacity(n + 1);
            positions.push(x0);
            lhat.push(0.0);
            zero_visits.push(u32::from(i0 == 0));
            WalkerPath {
                x0,
                positions,
                lhat,
                zero_visits,
            }
        })
        .collect();
    let mut b_path = Vec::with_capacity(n + 1);
    b_path.push(0.0);
    let mut adjacent_merge: Vec<Option<usize>> = (0..w.saturating_sub(1))
        .map(|i| if idx0[i] == idx0[i + 1] { Some(0) } else { None })
        .collect();

    for k in 0..n {
        let u = noise.uniforms[k];
        let xi: i64 = if u >= 0.5 { 1 } else { -1 };
        b += xi;
        for (wi, id) in idx.iter_mut().enumerate() {
            if *id == 0 {
                *id = if u >= up_thr { 1 } else { -1 };
            } else {
                *id += xi;
            }
            let wp = &mut walkers[wi];
            wp.positions.push(*id as f64 * h);
            // kick count: (idx - idx0 - b) is 0 or +-2 per kick, sign of beta
            let m = *id - idx0[wi] - b;
            wp.lhat.push(m as f64 * h / bv);
            let prev = *wp.zero_visits.last().unwrap();
            wp.zero_visits.push(prev + u32::from(*id == 0));
        }
        b_path.push(b as f64 * h);
        for i in 0..w.saturating_sub(1) {
            if adjacent_merge[i].is_none() && idx[i] == idx[i + 1] {
                adjacent_merge[i] = Some(k + 1);
            }
        }
    }

    Ok(FlowPaths {
        beta,
        h,
        dt: noise.dt,
        walkers,
        b: b_path,
        adjacent_merge,
    })
}

impl FlowPaths {
    pub fn n_steps(&self) -> usize {
        self.b.len() - 1
    }

    /// First step at which walkers `i` and `j` occupy the same site, if any
    /// within the horizon. With walkers sorted, `i..j` all being equal is the
    /// same as every adjacent pair in between being equal, so the pair time
    /// is the max of the adjacent merge times.
    pub fn coalescence_step(&self, i: usize, j: usize) -> Result<Option<usize>> {
        let w = self.walkers.len();
        if i >= w || j >= w {
            return Err(Error::IndexOutOfRange(format!(
                "coalescence_step: ({i}, {j}) with {w} walkers"
            )));
        }
        if i == j {
            return Ok(Some(0));
        }
        let (lo, hi) = (i.min(j), i.max(j));
        let mut latest = 0usize;
        for k in lo..hi {
            match self.adjacent_merge[k] {
                Some(s) => latest = latest.max(s),
                None => return Ok(None),
            }
        }
        Ok(Some(latest))
    }

    fn lattice_index(&self, walker: usize, step: usize) -> i64 {
        (self.walkers[walker].positions[step] / self.h).round() as i64
    }
}

/// Image structure of the flow at one step: the two semi-infinite
/// uncompressed ranges and the discrete middle set between them.
#[derive(Debug, Clone)]
pub struct GapStructure {
    /// Max of the lower uncompressed range.
    pub y1: f64,
    /// Min of the upper uncompressed range.
    pub y2: f64,
    /// Distinct walker positions strictly between `y1` and `y2`.
    pub middle: Vec<f64>,
}

/// Decompose the image of a grid flow at `step` into a lower translation
/// range, an upper translation range and the compressed middle set.
///
/// A walker belongs to a translation range while the image gap to its
/// neighbor equals the initial gap. When no gap is compressed yet, the split
/// is placed mid-grid, so `y1` and `y2` come out as adjacent image values
/// with an empty middle.
pub fn gap_structure(flow: &FlowPaths, step: usize) -> Result<GapStructure> {
    let w = flow.walkers.len();
    if step >= flow.b.len() {
        return Err(Error::IndexOutOfRange(format!("gap_structure: step {step}")));
    }
    let idx: Vec<i64> = (0..w).map(|i| flow.lattice_index(i, step)).collect();
    let idx0: Vec<i64> = (0..w).map(|i| flow.lattice_index(i, 0)).collect();
    let mut distinct = idx.clone();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Degenerate(format!(
            "gap_structure: only {} distinct image values",
            distinct.len()
        )));
    }
    // longest prefix / suffix with every image gap equal to the initial gap
    let gap_kept = |i: usize| idx[i + 1] - idx[i] == idx0[i + 1] - idx0[i];
    let mut a = 0usize; // last index of the lower range
    while a + 1 < w && gap_kept(a) {
        a += 1;
    }
    let mut bstart = w - 1; // first index of the upper range
    while bstart > 0 && gap_kept(bstart - 1) {
        bstart -= 1;
    }
    if a >= bstart {
        // fully uncompressed: split mid-grid
        let mid = (w - 1) / 2;
        let y1 = idx[mid] as f64 * flow.h;
        let y2 = idx[mid + 1] as f64 * flow.h;
        return Ok(GapStructure {
            y1,
            y2,
            middle: Vec::new(),
        });
    }
    let y1 = idx[a] as f64 * flow.h;
    let y2 = idx[bstart] as f64 * flow.h;
    let mut middle: Vec<f64> = idx[a + 1..bstart]
        .iter()
        .filter(|&&v| v > idx[a] && v < idx[bstart])
        .map(|&v| v as f64 * flow.h)
        .collect();
    middle.dedup();
    Ok(GapStructure { y1, y2, middle })
}

/// Modulus of continuity of the driving walk over a step window:
/// `delta(r) = max { |B_u - B_v| : u, v in window, |u - v| <= r }`.
fn driving_modulus(flow: &FlowPaths, window: &std::ops::Range<usize>) -> Vec<f64> {
    let len = window.end - window.start;
    let mut delta = vec![0.0f64; len];
    for u in window.clone() {
        for v in u + 1..window.end {
            let d = (flow.b[u] - flow.b[v]).abs();
            let r = v - u;
            if d > delta[r] {
                delta[r] = d;
            }
        }
    }
    // make nondecreasing in r
    for r in 1..len {
        if delta[r] < delta[r - 1] {
            delta[r] = delta[r - 1];
        }
    }
    delta
}

/// Worst ratio `|X_u - X_v| / (2 delta(|u-v|))` over all walkers and all
/// step pairs in `window`. Pairs with `u = v` contribute 0. The lattice
/// analogue of the continuum bound leaves one step of slack, so the result
/// is at most `1 + h / (2 delta(1))`.
pub fn modulus_check(flow: &FlowPaths, window: std::ops::Range<usize>) -> Result<f64> {
    if window.is_empty() || window.end > flow.b.len() {
        return Err(Error::invalid(format!(
            "modulus_check: bad window {window:?} for horizon {}",
            flow.b.len()
        )));
    }
    if window.end - window.start < 2 {
        return Ok(0.0);
    }
    let delta = driving_modulus(flow, &window);
    let mut worst: f64 = 0.0;
    for wp in &flow.walkers {
        for u in window.clone() {
            for v in u + 1..window.end {
                let dx = (wp.positions[u] - wp.positions[v]).abs();
                let ratio = dx / (2.0 * delta[v - u]);
                if ratio > worst {
                    worst = ratio;
                }
            }
        }
    }
    Ok(worst)
}

/// Number of pairs in `window` violating `|X_u - X_v| <= 2 delta(|u-v|) + 2h`.
pub fn modulus_violations(flow: &FlowPaths, window: std::ops::Range<usize>) -> Result<usize> {
    if window.is_empty() || window.end > flow.b.len() {
        return Err(Error::invalid("modulus_violations: bad window"));
    }
    if window.end - window.start < 2 {
        return Ok(0);
    }
    let delta = driving_modulus(flow, &window);
    let slack = 2.0 * flow.h;
    let mut violations = 0usize;
    for wp in &flow.walkers {
        for u in window.clone() {
            for v in u + 1..window.end {
                let dx = (wp.positions[u] - wp.positions[v]).abs();
                if dx > 2.0 * delta[v - u] + slack + 1e-12 {
                    violations += 1;
                }
            }
        }
    }
    Ok(violations)
}

/// Write flow snapshots as CSV rows `walker_index,x0,step,position,lhat`.
pub fn write_snapshot_csv(
    flow: &FlowPaths,
    steps: &[usize],
    out: &mut impl Write,
) -> Result<()> {
    writeln!(out, "walker_index,x0,step,position,lhat")?;
    for (wi, wp) in flow.walkers.iter().enumerate() {
        for &s in steps {
            if s < wp.positions.len() {
                writeln!(
                    out,
                    "{wi},{},{s},{},{}",
                    wp.x0, wp.positions[s], wp.lhat[s]
                )?;
            }
        }
    }
    Ok(())
}

/// Write the pairwise coalescence table as CSV rows `i,j,step` (step empty
/// when the pair did not merge within the horizon).
pub fn write_coalescence_csv(flow: &FlowPaths, out: &mut impl Write) -> Result<()> {
    writeln!(out, "i,j,step")?;
    let w = flow.walkers.len();
    for i in 0..w {
        for j in i + 1..w {
            match flow.coalescence_step(i, j)? {
                Some(s) => writeln!(out, "{i},{j},{s}")?,
                None => writeln!(out, "{i},{j},")?,
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::pair_coalescence_step;

    fn beta(b: f64) -> Beta {
        Beta::new(b).unwrap()
    }

    #[test]
    fn beta_range_enforced() {
        assert!(Beta::new(0.5).is_ok());
        assert!(Beta::new(-0.5).is_ok());
        for bad in [0.0, 1.0, -1.0, 1.5, f64::NAN] {
            assert!(Beta::new(bad).is_err());
        }
    }

    #[test]
    fn noise_is_deterministic_and_scaled() {
        let a = gen_noise(1, 0.01, 42).unwrap();
        let b = gen_noise(1, 0.01, 42).unwrap();
        assert_eq!(a.uniforms, b.uniforms);
        assert_eq!(a.h, 0.01f64.sqrt());
        assert!(gen_noise(0, 0.01, 1).is_err());
        assert!(gen_noise(10, 0.0, 1).is_err());
        assert!(gen_noise(10, -1.0, 1).is_err());
    }

    #[test]
    fn noise_increments_clt_bound() {
        let n = 1_000_000usize;
        let noise = gen_noise(n, 0.01, 7).unwrap();
        let mean: f64 = (0..n).map(|k| noise.xi(k)).sum::<f64>() / n as f64;
        let bound = 4.0 / (n as f64).sqrt() * noise.h;
        assert!(mean.abs() <= bound, "mean {mean} vs CLT bound {bound}");
    }

    #[test]
    fn step_rule_examples() {
        let h = 0.1;
        let b = beta(0.5);
        assert_eq!(step_walker(0.0, 0.10, b, h), -h); // 0.10 < 0.25
        assert_eq!(step_walker(0.0, 0.30, b, h), h); // 0.30 >= 0.25, kick
        assert_eq!(step_walker(2.0 * h, 0.30, b, h), h); // off zero follows xi
        assert_eq!(step_walker(2.0 * h, 0.30, beta(-0.7), h), h);
    }

    #[test]
    fn equal_starts_stay_identical() {
        let noise = gen_noise(2000, 1e-3, 3).unwrap();
        let flow = simulate_flow(&noise, beta(0.5), &[0.3, 0.3]).unwrap();
        assert_eq!(flow.walkers[0].positions, flow.walkers[1].positions);
        assert_eq!(flow.coalescence_step(0, 1).unwrap(), Some(0));
        assert_eq!(flow.coalescence_step(1, 1).unwrap(), Some(0));
        assert!(flow.coalescence_step(0, 5).is_err());
    }

    #[test]
    fn rejects_empty_initial_points() {
        let noise = gen_noise(10, 1e-3, 3).unwrap();
        assert!(simulate_flow(&noise, beta(0.5), &[]).is_err());
        assert!(simulate_flow(&noise, beta(0.5), &[f64::INFINITY]).is_err());
    }

    #[test]
    fn local_time_increments_only_at_zero_visits() {
        for &bv in &[0.5, -0.5, 0.25, -0.8] {
            let noise = gen_noise(20_000, 1e-3, 11).unwrap();
            let b = beta(bv);
            let flow = simulate_flow(&noise, b, &[0.0]).unwrap();
            let wp = &flow.walkers[0];
            let kick = 2.0 * noise.h / bv.abs();
            let mut max_inc: f64 = 0.0;
            for n in 0..noise.n_steps {
                let inc = wp.lhat[n + 1] - wp.lhat[n];
                assert!(inc >= 0.0, "lhat must be nondecreasing");
                if inc != 0.0 {
                    assert!(wp.positions[n] == 0.0, "increment away from zero");
                    assert!((inc - kick).abs() < 1e-12);
                }
                max_inc = max_inc.max(inc);
            }
            assert!((max_inc - kick).abs() < 1e-12, "no kick happened in 20k steps");
            // zero_visits is the cumulative visit count
            let visits = wp.positions.iter().filter(|&&p| p == 0.0).count() as u32;
            assert_eq!(*wp.zero_visits.last().unwrap(), visits);
        }
    }

    #[test]
    fn identity_monotonicity_absorption() {
        for (seed, bv) in [(1u64, 0.5), (2, -0.5), (3, 0.75), (4, -0.25)] {
            let noise = gen_noise(5000, 1e-3, seed).unwrap();
            let b = beta(bv);
            let pts: Vec<f64> = (-8..8).map(|i| i as f64 * 0.25).collect();
            let flow = simulate_flow(&noise, b, &pts).unwrap();
            for wp in &flow.walkers {
                for n in 0..=noise.n_steps {
                    let rhs = wp.x0 + flow.b[n] + bv * wp.lhat[n];
                    assert!((wp.positions[n] - rhs).abs() <= 1e-9);
                }
            }
            let w = flow.walkers.len();
            for n in 0..=noise.n_steps {
                for i in 0..w - 1 {
                    assert!(
                        flow.walkers[i].positions[n] <= flow.walkers[i + 1].positions[n],
                        "order broken at step {n}"
                    );
                }
            }
            // absorption: once an adjacent pair is equal it stays equal
            for i in 0..w - 1 {
                if let Some(s) = flow.adjacent_merge[i] {
                    for n in s..=noise.n_steps {
                        assert_eq!(flow.walkers[i].positions[n], flow.walkers[i + 1].positions[n]);
                    }
                }
            }
        }
    }

    #[test]
    fn coalescence_is_almost_sure_at_pilot_horizon() {
        // Pair started from -1 and +1 at beta = 0.5. The coalescence time
        // has a heavy 1/sqrt(T) tail, so the pilot horizon is very long; the
        // streaming pair engine exits early at the merge step, which keeps
        // the average cost moderate.
        let dt = 0.04;
        let max_steps = 250_000_000; // T = 1e7
        let mut merged = 0;
        let n_seeds = 100;
        for s in 0..n_seeds {
            if pair_coalescence_step(-1.0, 1.0, beta(0.5), dt, max_steps, 1000 + s).is_some() {
                merged += 1;
            }
        }
        let frac = merged as f64 / n_seeds as f64;
        assert!(frac >= 0.99, "only {frac} of pairs coalesced");
    }

    #[test]
    fn coalescence_shifts_earlier_under_refinement() {
        // x0 = 0 and x0 = 2h: halving h (at fixed dt scaling h = sqrt(dt))
        // halves the initial gap, so coalescence comes stochastically earlier.
        let b = beta(0.5);
        let sample_times = |dt: f64, seed0: u64| -> Vec<f64> {
            (0..400)
                .filter_map(|s| {
                    let h = dt.sqrt();
                    pair_coalescence_step(0.0, 2.0 * h, b, dt, 4_000_000, seed0 + s)
                        .map(|n| n as f64 * dt)
                })
                .collect()
        };
        let coarse = sample_times(4e-4, 10);
        let fine = sample_times(1e-4, 5000);
        assert!(coarse.len() >= 390 && fine.len() >= 390);
        let mut c = coarse.clone();
        let mut f = fine.clone();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        f.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // compare deciles: the finer lattice should merge earlier throughout
        for q in 1..=9 {
            let qc = c[q * c.len() / 10];
            let qf = f[q * f.len() / 10];
            assert!(qf <= qc, "decile {q}: fine {qf} not earlier than coarse {qc}");
        }
    }

    #[test]
    fn gap_structure_at_step_zero_and_errors() {
        let noise = gen_noise(4000, 1e-3, 5).unwrap();
        let b = beta(0.5);
        let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.1).collect();
        let flow = simulate_flow(&noise, b, &grid).unwrap();
        let gs = gap_structure(&flow, 0).unwrap();
        assert!(gs.middle.is_empty());
        let spacing = flow.walkers[1].x0 - flow.walkers[0].x0;
        assert!((gs.y2 - gs.y1 - spacing).abs() < 1e-12);

        let two = simulate_flow(&noise, b, &[0.0, 0.1]).unwrap();
        assert!(gap_structure(&two, 0).is_err());
        assert!(gap_structure(&flow, 10_000_000).is_err());
    }

    #[test]
    fn gap_structure_after_motion() {
        // Window wide relative to the driving range so the translation
        // ranges are genuine; outside (y1, y2) local time must vanish.
        let noise = gen_noise(20_000, 1e-4, 9).unwrap(); // T = 2, range ~ sqrt(2)
        let b = beta(0.5);
        let grid: Vec<f64> = (-60..=60).map(|i| i as f64 * 0.1).collect();
        let flow = simulate_flow(&noise, b, &grid).unwrap();
        for &step in &[5000usize, 20_000] {
            let gs = gap_structure(&flow, step).unwrap();
            assert!(gs.y1 < gs.y2);
            assert!(!gs.middle.is_empty(), "driving walk moved; expected compression");
            // middle points share lattice parity: spacing at least 2h
            for w in gs.middle.windows(2) {
                assert!(w[1] - w[0] >= 2.0 * flow.h - 1e-12);
            }
            for wp in &flow.walkers {
                if wp.positions[step] <= gs.y1 || wp.positions[step] >= gs.y2 {
                    assert_eq!(wp.lhat[step], 0.0, "local time outside the middle window");
                }
            }
        }
    }

    #[test]
    fn modulus_constant_drive_and_bound() {
        // constant driving segment, walker off zero: X moves exactly with B
        let noise = NoisePath::from_uniforms(vec![0.9; 200], 1e-2).unwrap();
        let flow = simulate_flow(&noise, beta(0.5), &[2.0 * noise.h]).unwrap();
        let worst = modulus_check(&flow, 0..201).unwrap();
        assert!(worst <= 0.5 + 1e-12);

        for seed in 0..4u64 {
            let noise = gen_noise(4000, 1e-3, 100 + seed).unwrap();
            let flow = simulate_flow(&noise, beta(if seed % 2 == 0 { 0.5 } else { -0.5 }), &[-0.5, 0.0, 0.5]).unwrap();
            for start in [0usize, 1500, 3000] {
                let window = start..start + 300;
                assert_eq!(modulus_violations(&flow, window.clone()).unwrap(), 0);
                let worst = modulus_check(&flow, window.clone()).unwrap();
                let delta1 = noise.h; // delta(1) = h always
                assert!(worst <= 1.0 + 2.0 * noise.h / delta1);
            }
        }
        assert!(modulus_check(&flow_dummy(), 5..5).is_err());
    }

    fn flow_dummy() -> FlowPaths {
        let noise = gen_noise(10, 1e-2, 0).unwrap();
        simulate_flow(&noise, beta(0.5), &[0.0]).unwrap()
    }

    #[test]
    fn csv_exports_have_headers() {
        let noise = gen_noise(50, 1e-2, 0).unwrap();
        let flow = simulate_flow(&noise, beta(0.5), &[0.0, 0.4]).unwrap();
        let mut snap = Vec::new();
        write_snapshot_csv(&flow, &[0, 25, 50], &mut snap).unwrap();
        let text = String::from_utf8(snap).unwrap();
        assert!(text.starts_with("walker_index,x0,step,position,lhat\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 3);
        let mut coal = Vec::new();
        write_coalescence_csv(&flow, &mut coal).unwrap();
        assert!(String::from_utf8(coal).unwrap().starts_with("i,j,step\n"));
    }
}
