//! The named experiment registry.
//!
//! Every experiment resolves its parameters from an [`ExpConfig`] (unset
//! fields fall back to the registry defaults), runs its verification checks,
//! and returns pass/fail records plus the raw data as CSV text. Outputs are
//! deterministic functions of the configuration.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{self, Beta};
use crate::lens;
use crate::report::CheckRecord;
use crate::semiflat;
use crate::stats::{self, Estimate};
use crate::zj::{self, StopRule, Terminal, Transform, ZjPath, ZjState};

use super::{parallel_moments, parallel_samples};

/// Experiment names accepted by [`run_experiment`].
pub const EXPERIMENTS: &[&str] = &[
    "hitting",
    "potential",
    "jump-law",
    "return-prob",
    "martingale",
    "duality-m",
    "time-reversal",
    "lens-tail",
    "lens-intensity",
    "independence-max",
    "weight-factor",
    "race-25",
    "stage-22",
    "flow-gaps",
    "modulus",
];

/// Configuration shared by all experiments; unset fields use per-experiment
/// defaults.
#[derive(Debug, Clone, Default)]
pub struct ExpConfig {
    pub beta: Option<f64>,
    pub seed: u64,
    pub replicas: Option<usize>,
    pub z: Option<f64>,
    pub j: Option<u8>,
    pub v: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub eps: Option<f64>,
    pub k_const: Option<f64>,
    pub grid_level: Option<u32>,
    pub realizations: Option<usize>,
}

/// Output of one named experiment: pass/fail records plus raw CSV data.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<CheckRecord>,
    pub csv: String,
}

impl ExperimentOutput {
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }
}

pub fn run_experiment(name: &str, cfg: &ExpConfig) -> Result<ExperimentOutput> {
    match name {
        "hitting" => hitting(cfg),
        "potential" => potential(cfg),
        "jump-law" => jump_law(cfg),
        "return-prob" => return_prob(cfg),
        "martingale" => martingale(cfg),
        "duality-m" => duality_m(cfg),
        "time-reversal" => time_reversal(cfg),
        "lens-tail" => lens_tail(cfg),
        "lens-intensity" => lens_intensity(cfg),
        "independence-max" => independence_max(cfg),
        "weight-factor" => weight_factor(cfg),
        "race-25" => race_25(cfg),
        "stage-22" => stage_22(cfg),
        "flow-gaps" => flow_gaps(cfg),
        "modulus" => modulus(cfg),
        other => Err(Error::invalid(format!(
            "unknown experiment '{other}'; expected one of {EXPERIMENTS:?}"
        ))),
    }
}

fn betas_of(cfg: &ExpConfig) -> Result<Vec<Beta>> {
    match cfg.beta {
        Some(b) => Ok(vec![Beta::new(b)?]),
        None => Ok([0.25, 0.5, 0.75].map(|b| Beta::new(b).unwrap()).to_vec()),
    }
}

fn single_beta(cfg: &ExpConfig, default: f64) -> Result<Beta> {
    Beta::new(cfg.beta.unwrap_or(default))
}

fn record(
    name: &str,
    beta: Beta,
    seed: u64,
    est: f64,
    target: f64,
    pass: bool,
) -> CheckRecord {
    CheckRecord::new(name, est, target, pass)
        .param_f64("beta", beta.get())
        .param("seed", seed)
}

// ---------- hitting (closed levels 1, z/v, (z/v)(1-b)/(1+b)) ----------

fn hitting(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let betas = betas_of(cfg)?;
    let z = cfg.z.unwrap_or(1.0);
    let vs = match cfg.v {
        Some(v) => vec![v],
        None => vec![2.0 * z, 4.0 * z, 8.0 * z],
    };
    let js: Vec<u8> = match cfg.j {
        Some(j) => vec![j],
        None => vec![0, 1],
    };
    let n = cfg.replicas.unwrap_or(100_000);
    let mut records = Vec::new();
    let mut csv = String::from("beta,z,j,v,estimate,ci_lo,ci_hi,target,pass\n");
    for &beta in &betas {
        for &j in &js {
            for &v in &vs {
                let target = zj::closed_hitting(z, j, v, beta)?;
                let seed = cfg.seed ^ (j as u64) << 8 ^ (v.to_bits() >> 32) ^ beta.get().to_bits();
                let est = zj::mc_hitting(z, j, v, beta, n, seed)?;
                let pass = est.within_half_widths(target, 4.0);
                let _ = writeln!(
                    csv,
                    "{},{z},{j},{v},{},{},{},{target},{pass}",
                    beta.get(),
                    est.mean,
                    est.ci_lo,
                    est.ci_hi
                );
                records.push(
                    record("hitting", beta, cfg.seed, est.mean, target, pass)
                        .with_ci(est.ci_lo, est.ci_hi)
                        .param_f64("z", z)
                        .param("j", j)
                        .param_f64("v", v)
                        .param("replicas", n),
                );
            }
        }
    }
    Ok(ExperimentOutput { records, csv })
}

// ---------- potential densities ----------

fn potential(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let beta = single_beta(cfg, 0.5)?;
    let x = cfg.z.unwrap_or(1.0);
    let n = cfg.replicas.unwrap_or(100_000);
    let n_bins = 20usize;
    let z_max = 2.0 * x;
    let edges: Vec<f64> = (0..=n_bins)
        .map(|i| z_max * i as f64 / n_bins as f64)
        .collect();
    let mut records = Vec::new();
    let mut csv = String::from("start_j,flag_k,bin_lo,bin_hi,estimate,ci_lo,ci_hi,target,ok\n");
    for j in [0u8, 1u8] {
        let occ = zj::estimate_potential(x, j, beta, &edges, n, cfg.seed ^ u64::from(j))?;
        for k in [0usize, 1usize] {
            let mut hits = 0usize;
            for bin in 0..n_bins {
                let (lo, hi) = (edges[bin], edges[bin + 1]);
                let target = zj::closed_potential_bin_mean(x, j, lo, hi, k as u8, beta)?;
                let est = occ.density[k][bin];
                let ok = est.brackets(target);
                hits += usize::from(ok);
                let _ = writeln!(
                    csv,
                    "{j},{k},{lo},{hi},{},{},{},{target},{ok}",
                    est.mean, est.ci_lo, est.ci_hi
                );
            }
            let frac = hits as f64 / n_bins as f64;
            records.push(
                record("potential", beta, cfg.seed, frac, 0.9, frac >= 0.9)
                    .param_f64("x", x)
                    .param("start_j", j)
                    .param("flag_k", k as u8)
                    .param("replicas", n),
            );
        }
    }
    Ok(ExperimentOutput { records, csv })
}

// ---------- jump-ratio law ----------

fn jump_law(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let betas = betas_of(cfg)?;
    let n = cfg.replicas.unwrap_or(10_000);
    let mut records = Vec::new();
    let mut csv = String::from("beta,n,D,p\n");
    for &beta in &betas {
        let bp = beta.abs();
        let seed = cfg.seed ^ beta.get().to_bits();
        let down_flag = if beta.is_positive() { 0 } else { 1 };
        let ratios = parallel_samples(n, seed, "jump-law", move |rng| {
            let u = flow::open_unit(rng);
            zj::jump_level(ZjState { z: 1.0, j: down_flag }, beta, Transform::Plain, u)
                .expect("valid state")
        });
        let exponent = (1.0 - bp) / (2.0 * bp);
        let (d, p) = stats::ks_one_sample(&ratios, |r| r.clamp(0.0, 1.0).powf(exponent))?;
        let _ = writeln!(csv, "{},{n},{d},{p}", beta.get());
        records.push(
            record("jump-law", beta, cfg.seed, p, 0.01, p > 0.01)
                .param("replicas", n)
                .param_f64("ks_d", d),
        );
    }
    Ok(ExperimentOutput { records, csv })
}

// ---------- return probability ----------

fn return_prob(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let beta = single_beta(cfg, 0.5)?;
    let n = cfg.replicas.unwrap_or(100_000);
    let target = zj::return_probability(beta);
    let est = zj::mc_return_probability(beta, n, cfg.seed)?;
    let pass = est.within_half_widths(target, 4.0);
    let mut csv = String::from("beta,estimate,ci_lo,ci_hi,target,pass\n");
    let _ = writeln!(
        csv,
        "{},{},{},{},{target},{pass}",
        beta.get(),
        est.mean,
        est.ci_lo,
        est.ci_hi
    );
    Ok(ExperimentOutput {
        records: vec![record("return-prob", beta, cfg.seed, est.mean, target, pass)
            .with_ci(est.ci_lo, est.ci_hi)
            .param("replicas", n)],
        csv,
    })
}

// ---------- harmonic martingale at stopping ----------

fn martingale(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let betas = betas_of(cfg)?;
    let z0 = cfg.z.unwrap_or(1.0);
    let v = cfg.v.unwrap_or(4.0 * z0);
    let n = cfg.replicas.unwrap_or(20_000);
    let floor = 1e-7 * z0;
    let mut records = Vec::new();
    let mut csv = String::from("beta,z0,j0,estimate,ci_lo,ci_hi,target,pass\n");
    for &beta in &betas {
        for j0 in [0u8, 1u8] {
            let seed = cfg.seed ^ beta.get().to_bits() ^ u64::from(j0) << 17;
            let samples = parallel_samples(n, seed, "martingale", move |rng| {
                let p = zj::simulate_zj_with(
                    rng,
                    z0,
                    j0,
                    beta,
                    Transform::Plain,
                    StopRule::ceiling_or_floor(v, floor),
                )
                .expect("valid parameters");
                let ascending = if beta.is_positive() { 1 } else { 0 };
                let j_end = if p.terminal == Terminal::Ceiling {
                    ascending
                } else {
                    1 - ascending
                };
                zj::harmonic_h(p.end_z, j_end, beta)
            });
            let est = stats::normal_interval(&samples, 1.96)?;
            let target = zj::harmonic_h(z0, j0, beta);
            let se = (est.ci_hi - est.ci_lo) / (2.0 * 1.96);
            let pass = (est.mean - target).abs() <= 4.0 * se;
            let _ = writeln!(
                csv,
                "{},{z0},{j0},{},{},{},{target},{pass}",
                beta.get(),
                est.mean,
                est.ci_lo,
                est.ci_hi
            );
            records.push(
                record("martingale", beta, cfg.seed, est.mean, target, pass)
                    .with_ci(est.ci_lo, est.ci_hi)
                    .param_f64("z0", z0)
                    .param("j0", j0)
                    .param_f64("v", v)
                    .param("replicas", n),
            );
        }
    }
    Ok(ExperimentOutput { records, csv })
}

// ---------- duality measure of the entrance ascent ----------

fn duality_m(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let beta = single_beta(cfg, 0.5)?;
    let b = cfg.b.unwrap_or(1.0);
    let n = cfg.replicas.unwrap_or(20_000);
    let eps_entrance = 1e-6 * b;
    let n_bins = 20usize;
    let edges: Vec<f64> = (0..=n_bins).map(|i| b * i as f64 / n_bins as f64).collect();
    let edges_for = edges.clone();
    // occupation of the ascent binned in the reversed-path flag convention
    // (descending stretches carry flag 1), under which the ascent realizes
    // the process whose potential the duality measure is
    let moments = parallel_moments(n, cfg.seed, "duality-m", 2 * n_bins, move |rng, out| {
        let ascending = if beta.is_positive() { 1 } else { 0 };
        let path = zj::simulate_zj_with(
            rng,
            eps_entrance,
            ascending,
            beta,
            Transform::HUp,
            StopRule {
                ceiling: Some(b),
                floor: None,
                max_t: None,
            },
        )
        .expect("valid parameters");
        let mut sums = vec![[0.0f64; 2]; n_bins];
        zj::accumulate_occupation(&path, &edges_for, true, &mut sums);
        for (bin, pair) in sums.iter().enumerate() {
            out[bin] = pair[0];
            out[n_bins + bin] = pair[1];
        }
    });
    let mut records = Vec::new();
    let mut csv = String::from("flag,bin_lo,bin_hi,estimate,ci_lo,ci_hi,target,ok\n");
    for k in [0usize, 1usize] {
        let mut hits = 0usize;
        for bin in 0..n_bins {
            let (lo, hi) = (edges[bin], edges[bin + 1]);
            let width = hi - lo;
            let raw = moments.interval(k * n_bins + bin, 1.96);
            let est = Estimate {
                mean: raw.mean / width,
                ci_lo: raw.ci_lo / width,
                ci_hi: raw.ci_hi / width,
                ..raw
            };
            // the density is linear in z, so the bin mean is the midpoint value
            let target = zj::duality_measure_m(0.5 * (lo + hi), k as u8, b, beta)?;
            let ok = est.brackets(target);
            hits += usize::from(ok);
            let _ = writeln!(
                csv,
                "{k},{lo},{hi},{},{},{},{target},{ok}",
                est.mean, est.ci_lo, est.ci_hi
            );
        }
        let frac = hits as f64 / n_bins as f64;
        records.push(
            record("duality-m", beta, cfg.seed, frac, 0.9, frac >= 0.9)
                .param_f64("b", b)
                .param("flag", k as u8)
                .param("replicas", n),
        );
    }
    Ok(ExperimentOutput { records, csv })
}

// ---------- time reversal of the conditioned path ----------

struct ReversalFunctionals {
    ascent_dur: f64,
    descent_dur: f64,
    flips_before: f64,
    flips_after: f64,
    occ_before: f64,
    occ_after: f64,
}

fn reversal_functionals(p: &ZjPath, b: f64) -> ReversalFunctionals {
    let (t_max, _) = p.argmax();
    let ell = p.duration();
    let cut = 1e-3 * b;
    // the occupation above b/2 has a large atom (paths that cross it on a
    // single stretch); snap to a fixed grid so roundoff does not split the
    // atom differently between the forward and reversed ensembles
    let snap = |x: f64| (x / (1e-9 * b)).round() * (1e-9 * b);
    ReversalFunctionals {
        ascent_dur: t_max,
        descent_dur: ell - t_max,
        flips_before: p.flips_above(cut, 0.0, t_max) as f64,
        flips_after: p.flips_above(cut, t_max, ell) as f64,
        occ_before: snap(p.occupation_above(0.5 * b, 0.0, t_max)),
        occ_after: snap(p.occupation_above(0.5 * b, t_max, ell)),
    }
}

fn time_reversal(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let beta = single_beta(cfg, 0.5)?;
    let b = cfg.b.unwrap_or(1.0);
    let n = cfg.replicas.unwrap_or(5_000);
    let eps = 1e-6 * b;
    let make = |label: &'static str, seed: u64, reversed: bool| -> Vec<ReversalFunctionals> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let s = crate::seed::replica_seed(seed, label, i as u64);
                let p = zj::conditioned_max_path(b, beta, eps, eps, s).expect("valid parameters");
                let p = if reversed {
                    zj::reverse_path(&p).expect("floor-terminated")
                } else {
                    p
                };
                reversal_functionals(&p, b)
            })
            .collect()
    };
    let fwd = make("reversal-fwd", cfg.seed, false);
    let rev = make("reversal-rev", cfg.seed ^ 0x5555, true);

    let mut records = Vec::new();
    let mut csv = String::from("functional,D,p\n");
    let mut ks_record = |name: &str, a: Vec<f64>, c: Vec<f64>| -> Result<()> {
        let (d, p) = stats::ks_two_sample(&a, &c)?;
        let _ = writeln!(csv, "{name},{d},{p}");
        records.push(
            record(&format!("time-reversal/{name}"), beta, cfg.seed, p, 0.01, p > 0.01)
                .param_f64("b", b)
                .param("replicas", n)
                .param_f64("ks_d", d),
        );
        Ok(())
    };
    ks_record(
        "ascent-duration",
        fwd.iter().map(|f| f.ascent_dur).collect(),
        rev.iter().map(|f| f.ascent_dur).collect(),
    )?;
    ks_record(
        "descent-duration",
        fwd.iter().map(|f| f.descent_dur).collect(),
        rev.iter().map(|f| f.descent_dur).collect(),
    )?;
    ks_record(
        "flips-before-max",
        fwd.iter().map(|f| f.flips_before).collect(),
        rev.iter().map(|f| f.flips_before).collect(),
    )?;
    ks_record(
        "flips-after-max",
        fwd.iter().map(|f| f.flips_after).collect(),
        rev.iter().map(|f| f.flips_after).collect(),
    )?;
    ks_record(
        "occupation-before-max",
        fwd.iter().map(|f| f.occ_before).collect(),
        rev.iter().map(|f| f.occ_before).collect(),
    )?;
    ks_record(
        "occupation-after-max",
        fwd.iter().map(|f| f.occ_after).collect(),
        rev.iter().map(|f| f.occ_after).collect(),
    )?;

    // the barrier-transform descent must agree in law with the reversed
    // entrance ascent; durations and flip counts are reversal-invariant
    let ascents: Vec<ZjPath> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = crate::seed::replica_seed(cfg.seed, "reversal-ascent", i as u64);
            zj::entrance_ascent(b, beta, eps, s).expect("valid parameters")
        })
        .collect();
    let descents: Vec<ZjPath> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = crate::seed::replica_seed(cfg.seed, "reversal-descent", i as u64);
            let descending = if beta.is_positive() { 0 } else { 1 };
            zj::simulate_zj(
                b,
                descending,
                beta,
                Transform::HMinus { barrier: b },
                StopRule::at_floor(eps),
                s,
            )
            .expect("valid parameters")
        })
        .collect();
    let cut = 1e-3 * b;
    ks_record(
        "descent-vs-reversed-ascent-duration",
        ascents.iter().map(|p| p.duration()).collect(),
        descents.iter().map(|p| p.duration()).collect(),
    )?;
    ks_record(
        "descent-vs-reversed-ascent-flips",
        ascents
            .iter()
            .map(|p| p.flips_above(cut, 0.0, f64::INFINITY) as f64)
            .collect(),
        descents
            .iter()
            .map(|p| p.flips_above(cut, 0.0, f64::INFINITY) as f64)
            .collect(),
    )?;
    Ok(ExperimentOutput { records, csv })
}

// ---------- lens tail law ----------

fn lens_tail(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let beta = single_beta(cfg, 0.5)?;
    let a = cfg.a.unwrap_or(1.0);
    let n = cfg.replicas.unwrap_or(100_000);
    let mut records = Vec::new();
    let mut csv = String::from("check,param,estimate,ci_lo,ci_hi,target\n");

    // exact route: conditioned samples, P(sup >= v | sup >= a) = a/v
    let thresholds = [2.0 * a, 4.0 * a, 8.0 * a];
    for (v, est) in lens::lens_tail_exact(beta, a, &thresholds, n, cfg.seed)? {
        let target = a / v;
        let pass = est.within_half_widths(target, 4.0);
        let _ = writeln!(
            csv,
            "exact,{v},{},{},{},{target}",
            est.mean, est.ci_lo, est.ci_hi
        );
        records.push(
            record("lens-tail/exact", beta, cfg.seed, est.mean, target, pass)
                .with_ci(est.ci_lo, est.ci_hi)
                .param_f64("a", a)
                .param_f64("v", v)
                .param("replicas", n),
        );
    }

    // flow route: (1/eps) P(opening > v) for the pair with the upper walker
    // at the origin, under lattice refinement
    let eps = cfg.eps.unwrap_or(1.0 / 16.0);
    let v = cfg.v.unwrap_or(0.5);
    let n_flow = 20_000;
    let horizon = 40.0;
    let mut upper = Vec::new();
    for refine in [4u32, 8, 16] {
        let (est, _) = lens::lens_tail_flow(
            beta,
            eps,
            v,
            refine,
            horizon,
            true,
            n_flow,
            cfg.seed ^ u64::from(refine),
        )?;
        let _ = writeln!(
            csv,
            "flow-upper-refine,{refine},{},{},{},{}",
            est.mean,
            est.ci_lo,
            est.ci_hi,
            1.0 / v
        );
        upper.push(est);
    }
    for k in 0..2 {
        let (e0, e1) = (upper[k], upper[k + 1]);
        let width = (e1.ci_hi - e1.ci_lo).max(e0.ci_hi - e0.ci_lo);
        let diff = (e1.mean - e0.mean).abs();
        records.push(
            record(
                &format!("lens-tail/flow-refinement-{k}"),
                beta,
                cfg.seed,
                diff,
                width,
                diff < width,
            )
            .param_f64("eps", eps)
            .param_f64("v", v),
        );
    }
    let finest = upper[2];
    let target = 1.0 / v;
    records.push(
        record(
            "lens-tail/flow-vs-reciprocal",
            beta,
            cfg.seed,
            finest.mean,
            target,
            (finest.mean - target).abs() <= 0.1 * target,
        )
        .with_ci(finest.ci_lo, finest.ci_hi)
        .param_f64("eps", eps)
        .param_f64("v", v),
    );

    // side ratio: pair (0, eps) versus (-eps, 0) carries (1-b)/(1+b)
    let (lower, _) = lens::lens_tail_flow(beta, eps, v, 16, horizon, false, n_flow, cfg.seed ^ 99)?;
    let ratio = lower.mean / finest.mean;
    let se_u = (finest.ci_hi - finest.ci_lo) / (2.0 * 1.96);
    let se_l = (lower.ci_hi - lower.ci_lo) / (2.0 * 1.96);
    let se_ratio =
        ratio * ((se_u / finest.mean).powi(2) + (se_l / lower.mean).powi(2)).sqrt();
    let bp = beta.abs();
    let ratio_target = (1.0 - bp) / (1.0 + bp);
    let _ = writeln!(
        csv,
        "side-ratio,{eps},{ratio},{},{},{ratio_target}",
        ratio - 1.96 * se_ratio,
        ratio + 1.96 * se_ratio
    );
    records.push(
        record(
            "lens-tail/side-ratio",
            beta,
            cfg.seed,
            ratio,
            ratio_target,
            (ratio - ratio_target).abs() <= 4.0 * se_ratio,
        )
        .with_ci(ratio - 1.96 * se_ratio, ratio + 1.96 * se_ratio)
        .param_f64("eps", eps)
        .param_f64("v", v),
    );
    Ok(ExperimentOutput { records, csv })
}

// ---------- grid point process intensity ----------

fn census_params(cfg: &ExpConfig) -> Result<lens::GridCensusParams> {
    Ok(lens::GridCensusParams {
        beta: single_beta(cfg, 0.5)?,
        level: cfg.grid_level.unwrap_or(5),
        a: cfg.a.unwrap_or(1.0),
        v: cfg.v.unwrap_or(0.5),
        refine: 4,
        horizon: 96.0,
        realizations: cfg.realizations.unwrap_or(400),
        seed: cfg.seed,
    })
}

fn lens_intensity(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let p = census_params(cfg)?;
    let beta = p.beta;
    let out = lens::grid_point_process(&p)?;
    let bp = beta.abs();
    let combined = out.mean_left + out.mean_right;
    let target = (p.a / p.v) * (1.0 + (1.0 - bp) / (1.0 + bp));
    let mut records = vec![record(
        "lens-intensity/combined-mean",
        beta,
        cfg.seed,
        combined,
        target,
        (combined - target).abs() <= 0.1 * target,
    )
    .param_f64("a", p.a)
    .param_f64("v", p.v)
    .param("level", p.level)
    .param("realizations", p.realizations)
    .param("unresolved", out.census.unresolved as u64)
    .param("unresolved_above_v", out.census.unresolved_above_v as u64)];

    let totals: Vec<u64> = out
        .counts_left
        .iter()
        .zip(&out.counts_right)
        .map(|(l, r)| l + r)
        .collect();
    let (ratio, (lo, hi)) = stats::poisson_dispersion(&totals)?;
    records.push(
        record(
            "lens-intensity/dispersion",
            beta,
            cfg.seed,
            ratio,
            1.0,
            lo <= 1.0 && 1.0 <= hi,
        )
        .with_ci(lo, hi),
    );

    let left: Vec<f64> = out.counts_left.iter().map(|&c| c as f64).collect();
    let right: Vec<f64> = out.counts_right.iter().map(|&c| c as f64).collect();
    let (corr, (clo, chi)) = stats::correlation_ci(&left, &right)?;
    records.push(
        record(
            "lens-intensity/window-correlation",
            beta,
            cfg.seed,
            corr,
            0.0,
            clo <= 0.0 && 0.0 <= chi,
        )
        .with_ci(clo, chi),
    );

    let mut csv = String::from("x,spacing,max_opening,opening_level\n");
    for r in out.census.records.iter().take(50_000) {
        let _ = writeln!(csv, "{},{},{},{}", r.x, out.census.spacing, r.max_opening, r.opening_level);
    }
    Ok(ExperimentOutput { records, csv })
}

// ---------- independence and max identity ----------

fn independence_max(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let beta = single_beta(cfg, 0.5)?;
    let spacing = 0.5f64.powi(cfg.grid_level.unwrap_or(5) as i32);
    let h = spacing / 4.0;
    let dt = h * h;
    let horizon_steps = (600.0 / dt).ceil() as usize;
    let n = cfg.realizations.unwrap_or(4_000);
    let out = lens::independence_and_max(
        -spacing,
        0.0,
        spacing,
        beta,
        dt,
        horizon_steps,
        n,
        cfg.seed,
    )?;
    let records = vec![
        record(
            "independence-max/chi2",
            beta,
            cfg.seed,
            out.chi2_p,
            0.01,
            out.chi2_p > 0.01,
        )
        .param_f64("spacing", spacing)
        .param("resolved", out.resolved as u64)
        .param_f64("chi2_stat", out.chi2_stat),
        record(
            "independence-max/max-identity-violations",
            beta,
            cfg.seed,
            out.max_identity_violations as f64,
            0.0,
            out.max_identity_violations == 0,
        )
        .param("resolved", out.resolved as u64)
        .param("skipped", out.skipped as u64),
    ];
    let csv = format!(
        "chi2_stat,chi2_p,violations,resolved,skipped\n{},{},{},{},{}\n",
        out.chi2_stat, out.chi2_p, out.max_identity_violations, out.resolved, out.skipped
    );
    Ok(ExperimentOutput { records, csv })
}

// ---------- half-line weight factors ----------

fn weight_factor(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let mut p = census_params(cfg)?;
    p.realizations = cfg.realizations.unwrap_or(300);
    let beta = p.beta;
    let bp = beta.abs();
    let run = |v: f64, seed: u64| -> Result<(f64, f64, f64, f64)> {
        let mut q = p;
        q.v = v;
        q.seed = seed;
        let out = lens::grid_point_process(&q)?;
        let total_left: u64 = out.counts_left.iter().sum();
        let total_right: u64 = out.counts_right.iter().sum();
        if total_left < 100 || total_right < 100 {
            return Err(Error::Degenerate(format!(
                "weight_factor: insufficient counts ({total_left}, {total_right})"
            )));
        }
        let norm = q.a / v;
        let r = q.realizations as f64;
        // Poisson-scale standard errors for the normalized means
        let se_l = (out.mean_left / r).sqrt() / norm;
        let se_r = (out.mean_right / r).sqrt() / norm;
        Ok((out.mean_left / norm, out.mean_right / norm, se_l, se_r))
    };
    let (wl, wr, se_l, se_r) = run(p.v, cfg.seed)?;
    let light_target = (1.0 - bp) / (1.0 + bp);
    let (light, heavy, se_light, se_heavy, light_side) = if wl <= wr {
        (wl, wr, se_l, se_r, "left")
    } else {
        (wr, wl, se_r, se_l, "right")
    };
    let mut records = vec![
        record(
            "weight-factor/light-side",
            beta,
            cfg.seed,
            light,
            light_target,
            (light - light_target).abs() <= 4.0 * se_light,
        )
        .with_ci(light - 1.96 * se_light, light + 1.96 * se_light)
        .param("light_half_line", light_side)
        .param_f64("v", p.v),
        record(
            "weight-factor/heavy-side",
            beta,
            cfg.seed,
            heavy,
            1.0,
            (heavy - 1.0).abs() <= 4.0 * se_heavy,
        )
        .with_ci(heavy - 1.96 * se_heavy, heavy + 1.96 * se_heavy)
        .param_f64("v", p.v),
    ];
    // the normalized product is threshold-invariant
    let (wl2, wr2, se_l2, se_r2) = run(2.0 * p.v, cfg.seed ^ 0xABCD)?;
    let prod1 = wl * wr;
    let prod2 = wl2 * wr2;
    let se1 = prod1 * ((se_l / wl).powi(2) + (se_r / wr).powi(2)).sqrt();
    let se2 = prod2 * ((se_l2 / wl2).powi(2) + (se_r2 / wr2).powi(2)).sqrt();
    let combined = (se1 * se1 + se2 * se2).sqrt();
    records.push(
        record(
            "weight-factor/product-invariance",
            beta,
            cfg.seed,
            prod2 - prod1,
            0.0,
            (prod2 - prod1).abs() <= 4.0 * combined,
        )
        .param_f64("v1", p.v)
        .param_f64("v2", 2.0 * p.v),
    );
    let csv = format!(
        "v,weight_left,weight_right,light_side\n{},{wl},{wr},{light_side}\n{},{wl2},{wr2},\n",
        p.v,
        2.0 * p.v
    );
    Ok(ExperimentOutput { records, csv })
}

// ---------- excursion races ----------

fn race_25(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let beta = single_beta(cfg, -0.25)?;
    let eps = cfg.eps.unwrap_or(0.5);
    let target = semiflat::race_closed(beta, eps)?;
    let base_n = cfg.replicas.unwrap_or(20_000);
    let mut csv = String::from("h,estimate,ci_lo,ci_hi,target\n");
    let mut levels = Vec::new();
    for (k, inv_h) in [32.0f64, 64.0, 128.0].iter().enumerate() {
        let h = 1.0 / inv_h;
        let n = (base_n / (1 << k)).max(5_000);
        let est = semiflat::race_probability(beta, eps, h * h, n, cfg.seed ^ (k as u64))?;
        let _ = writeln!(csv, "{h},{},{},{},{target}", est.mean, est.ci_lo, est.ci_hi);
        levels.push(est);
    }
    let mut records = Vec::new();
    for k in 0..2 {
        let (e0, e1) = (levels[k], levels[k + 1]);
        let slack = 2.0 * (e0.half_width() + e1.half_width());
        let (d0, d1) = ((e0.mean - target).abs(), (e1.mean - target).abs());
        records.push(
            record(
                &format!("race-25/monotone-approach-{k}"),
                beta,
                cfg.seed,
                d1,
                d0,
                d1 <= d0 + slack,
            )
            .param_f64("eps", eps),
        );
    }
    let finest = levels[2];
    records.push(
        record(
            "race-25/final",
            beta,
            cfg.seed,
            finest.mean,
            target,
            (finest.mean - target).abs() <= 0.1 * target,
        )
        .with_ci(finest.ci_lo, finest.ci_hi)
        .param_f64("eps", eps),
    );
    Ok(ExperimentOutput { records, csv })
}

fn stage_22(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let beta = single_beta(cfg, -0.5)?;
    let k_const = cfg.k_const.unwrap_or(10.0);
    let ell0 = 1.0;
    let alpha = semiflat::alpha(beta, k_const)?;
    let target = 0.5f64.powf(alpha);
    let base_n = cfg.replicas.unwrap_or(16_000);
    let mut csv = String::from("h,doublings,estimate,ci_lo,ci_hi,target\n");
    let mut levels = Vec::new();
    for (k, inv_h) in [32.0f64, 64.0, 128.0].iter().enumerate() {
        let h = ell0 / inv_h;
        let n = (base_n / (1 << k)).max(4_000);
        let est = semiflat::stage_survival(beta, k_const, ell0, 1, h * h, n, cfg.seed ^ (k as u64))?;
        let _ = writeln!(csv, "{h},1,{},{},{},{target}", est.mean, est.ci_lo, est.ci_hi);
        levels.push(est);
    }
    let mut records = Vec::new();
    for k in 0..2 {
        let (e0, e1) = (levels[k], levels[k + 1]);
        let slack = 2.0 * (e0.half_width() + e1.half_width());
        let (d0, d1) = ((e0.mean - target).abs(), (e1.mean - target).abs());
        records.push(
            record(
                &format!("stage-22/monotone-approach-{k}"),
                beta,
                cfg.seed,
                d1,
                d0,
                d1 <= d0 + slack,
            )
            .param_f64("K", k_const),
        );
    }
    let finest = levels[2];
    records.push(
        record(
            "stage-22/final",
            beta,
            cfg.seed,
            finest.mean,
            target,
            (finest.mean - target).abs() <= 0.1 * target,
        )
        .with_ci(finest.ci_lo, finest.ci_hi)
        .param_f64("K", k_const)
        .param_f64("alpha", alpha),
    );
    // multiplicativity over two consecutive stages, at the middle lattice
    let h = ell0 / 64.0;
    let one = levels[1];
    let two = semiflat::stage_survival(
        beta,
        k_const,
        ell0,
        2,
        h * h,
        (base_n / 2).max(4_000),
        cfg.seed ^ 0xBEEF,
    )?;
    let se_one = one.half_width() / 1.96;
    let se_two = two.half_width() / 1.96;
    let prod = one.mean * one.mean;
    let combined = 1.96 * (se_two + 2.0 * one.mean * se_one);
    let _ = writeln!(
        csv,
        "{h},2,{},{},{},{prod}",
        two.mean, two.ci_lo, two.ci_hi
    );
    records.push(
        record(
            "stage-22/two-stage-multiplicativity",
            beta,
            cfg.seed,
            two.mean,
            prod,
            (two.mean - prod).abs() <= combined,
        )
        .with_ci(two.ci_lo, two.ci_hi)
        .param_f64("K", k_const),
    );
    Ok(ExperimentOutput { records, csv })
}

// ---------- flow image structure ----------

fn flow_gaps(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let beta = single_beta(cfg, 0.5)?;
    let n_steps = 20_000usize;
    let dt = 1e-4;
    let noise = flow::gen_noise(n_steps, dt, cfg.seed)?;
    let grid: Vec<f64> = (-60..=60).map(|i| i as f64 * 0.1).collect();
    let fp = flow::simulate_flow(&noise, beta, &grid)?;
    let steps = [n_steps / 4, n_steps / 2, n_steps];
    let mut records = Vec::new();
    let mut csv = String::from("step,y1,y2,middle_size\n");
    let mut outside_violations = 0usize;
    let mut spacing_violations = 0usize;
    let mut middle_sizes = Vec::new();
    for &s in &steps {
        let gs = flow::gap_structure(&fp, s)?;
        let _ = writeln!(csv, "{s},{},{},{}", gs.y1, gs.y2, gs.middle.len());
        middle_sizes.push(gs.middle.len());
        for w in gs.middle.windows(2) {
            if w[1] - w[0] < 2.0 * fp.h - 1e-12 {
                spacing_violations += 1;
            }
        }
        for wp in &fp.walkers {
            if (wp.positions[s] <= gs.y1 || wp.positions[s] >= gs.y2) && wp.lhat[s] != 0.0 {
                outside_violations += 1;
            }
        }
    }
    records.push(
        record(
            "flow-gaps/zero-local-time-outside",
            beta,
            cfg.seed,
            outside_violations as f64,
            0.0,
            outside_violations == 0,
        )
        .param("steps_checked", steps.len() as u64),
    );
    records.push(
        record(
            "flow-gaps/middle-spacing",
            beta,
            cfg.seed,
            spacing_violations as f64,
            0.0,
            spacing_violations == 0,
        ),
    );
    let nonempty = middle_sizes.iter().filter(|&&m| m > 0).count();
    records.push(
        record(
            "flow-gaps/compression-present",
            beta,
            cfg.seed,
            nonempty as f64,
            steps.len() as f64,
            nonempty == steps.len(),
        ),
    );
    Ok(ExperimentOutput { records, csv })
}

// ---------- flow structure and modulus ----------

fn modulus(cfg: &ExpConfig) -> Result<ExperimentOutput> {
    let runs = cfg.realizations.unwrap_or(20);
    let n_steps = 100_000usize;
    let dt = 1e-4;
    let walkers: Vec<f64> = (0..64).map(|i| -2.0 + 4.0 * i as f64 / 63.0).collect();
    let mut identity_violations = 0usize;
    let mut order_violations = 0usize;
    let mut absorption_violations = 0usize;
    let mut sign_violations = 0usize;
    let mut modulus_bad = 0usize;
    let mut worst_ratio: f64 = 0.0;
    let mut csv = String::from("run,beta,worst_ratio,modulus_violations\n");
    for run in 0..runs {
        let bv = if run % 2 == 0 { 0.5 } else { -0.5 };
        let beta = Beta::new(bv)?;
        let noise = flow::gen_noise(
            n_steps,
            dt,
            crate::seed::replica_seed(cfg.seed, "modulus", run as u64),
        )?;
        let fp = flow::simulate_flow(&noise, beta, &walkers)?;
        let w = fp.walkers.len();
        for wi in 0..w {
            let wp = &fp.walkers[wi];
            let mut prev_l = 0.0f64;
            for n in 0..=n_steps {
                let rhs = wp.x0 + fp.b[n] + bv * wp.lhat[n];
                if (wp.positions[n] - rhs).abs() > 1e-9 {
                    identity_violations += 1;
                }
                if wp.lhat[n] < prev_l {
                    sign_violations += 1;
                }
                prev_l = wp.lhat[n];
                if wi + 1 < w && wp.positions[n] > fp.walkers[wi + 1].positions[n] {
                    order_violations += 1;
                }
            }
        }
        for i in 0..w - 1 {
            if let Some(s) = fp.coalescence_step(i, i + 1)? {
                for n in (s..=n_steps).step_by(97) {
                    if fp.walkers[i].positions[n] != fp.walkers[i + 1].positions[n] {
                        absorption_violations += 1;
                    }
                }
            }
        }
        let mut run_worst: f64 = 0.0;
        for start in [0usize, n_steps / 2 - 128, n_steps - 256] {
            let window = start..start + 256;
            modulus_bad += flow::modulus_violations(&fp, window.clone())?;
            run_worst = run_worst.max(flow::modulus_check(&fp, window)?);
        }
        worst_ratio = worst_ratio.max(run_worst);
        let _ = writeln!(csv, "{run},{bv},{run_worst},{modulus_bad}");
    }
    let mk = |name: &str, count: usize| {
        CheckRecord::new(&format!("modulus/{name}"), count as f64, 0.0, count == 0)
            .param("runs", runs as u64)
            .param("seed", cfg.seed)
    };
    let mut records = vec![
        mk("identity-violations", identity_violations),
        mk("order-violations", order_violations),
        mk("absorption-violations", absorption_violations),
        mk("local-time-monotonicity-violations", sign_violations),
        mk("modulus-violations", modulus_bad),
    ];
    records.push(
        CheckRecord::new("modulus/worst-ratio", worst_ratio, 3.0, worst_ratio <= 3.0)
            .param("runs", runs as u64)
            .param("seed", cfg.seed),
    );
    Ok(ExperimentOutput { records, csv })
}
