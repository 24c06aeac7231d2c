//! Euler simulation of the hybrid dynamics and empirical stability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::controls::ControlLaw;
use crate::dynamics::{FieldEval, HybridState};
use crate::error::{FlownetError, Result};
use crate::model::Model;
use crate::network::min_cut;

/// Integration and ensemble settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimOptions {
    pub dt: f64,
    pub horizon: f64,
    pub seeds: usize,
    /// Seed of the first replicate; replicate `i` uses `seed + i`.
    pub seed: u64,
    /// Stored stamps per trajectory, at most.
    pub max_records: usize,
    /// Slope below which a replicate counts as bounded.
    pub slope_tol: f64,
    /// How often an undecided ensemble is rerun with a fourfold horizon.
    pub extensions: u32,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            dt: 1e-2,
            horizon: 5e3,
            seeds: 10,
            seed: 1,
            max_records: 2000,
            slope_tol: 1e-3,
            extensions: 1,
        }
    }
}

/// Recorded stamps of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<HybridState>,
    /// `(1/t) int_0^t |x|_1`, 0 at `t = 0`.
    pub running_avg: Vec<f64>,
    /// Mass entering at the origin over the run.
    pub inflow: f64,
    /// Mass leaving the destination over the run.
    pub outflow: f64,
    /// Net mass added by clipping into the state space.
    pub clipped: f64,
    /// Largest clipping correction of a single step.
    pub max_clip: f64,
    pub jumps: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &HybridState {
        self.states
            .last()
            .expect("trajectories hold at least the initial stamp")
    }

    /// `t, s, x_1..x_K, avg` with 1-based mode numbers.
    pub fn to_csv(&self) -> String {
        let k = self.states.first().map_or(0, |h| h.x.len());
        let mut out = String::from("t,s");
        for i in 1..=k {
            out.push_str(&format!(",x{i}"));
        }
        out.push_str(",avg\n");
        for ((t, h), a) in self.times.iter().zip(&self.states).zip(&self.running_avg) {
            out.push_str(&format!("{t},{}", h.s + 1));
            for v in &h.x {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{a}\n"));
        }
        out
    }

    /// Least-squares slope of the running average over the second half.
    pub fn tail_slope(&self) -> f64 {
        let n = self.times.len();
        let start = n / 2;
        let pts: Vec<(f64, f64)> = (start..n).map(|i| (self.times[i], self.running_avg[i])).collect();
        if pts.len() < 2 {
            return 0.0;
        }
        let m = pts.len() as f64;
        let mt = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let ma = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let cov: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ma)).sum();
        let var: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
        if var > 0.0 {
            cov / var
        } else {
            0.0
        }
    }
}

/// Runs one replicate from `x0` in mode `s0`. Between mode jumps the field
/// is integrated by explicit Euler; steps are shortened to land on jump
/// times and every step is clipped into the state space.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    model: &Model,
    law: &ControlLaw,
    alpha: f64,
    x0: &[f64],
    s0: usize,
    horizon: f64,
    dt: f64,
    seed: u64,
    max_records: usize,
) -> Result<Trajectory> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(FlownetError::Scenario(format!("time step must be positive, got {dt}")));
    }
    let k = model.link_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev = FieldEval::new(model, law, alpha);
    let mut x = x0.to_vec();
    let mut g = vec![0.0; k];
    let (mut s, mut t) = (s0, 0.0);
    let mut next_jump = jump_time(model, s, t, &mut rng);
    let steps = (horizon / dt).ceil().max(1.0);
    let every = horizon / max_records.max(1) as f64;
    let mut next_record = every;
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![HybridState { s, x: x.clone() }],
        running_avg: vec![0.0],
        inflow: 0.0,
        outflow: 0.0,
        clipped: 0.0,
        max_clip: 0.0,
        jumps: 0,
    };
    let mut integral = 0.0;
    let end = steps * dt;
    while t < end - 1e-12 {
        let h = dt.min(end - t).min(next_jump.0 - t);
        let out = ev.eval(s, &x, &mut g);
        integral += h * x.iter().sum::<f64>();
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += h * gi;
        }
        let unclipped: f64 = x.iter().sum();
        let clip = model.clamp(&mut x);
        let mass_after: f64 = x.iter().sum();
        if !mass_after.is_finite() {
            return Err(FlownetError::NonFiniteState(t));
        }
        traj.inflow += h * alpha;
        traj.outflow += h * out;
        if clip > 0.0 {
            traj.clipped += mass_after - unclipped;
        }
        traj.max_clip = traj.max_clip.max(clip);
        t += h;
        if t >= next_jump.0 - 1e-12 {
            s = next_jump.1;
            traj.jumps += 1;
            next_jump = jump_time(model, s, t, &mut rng);
        }
        if t >= next_record - 1e-9 || t >= end - 1e-12 {
            traj.times.push(t);
            traj.states.push(HybridState { s, x: x.clone() });
            traj.running_avg.push(integral / t);
            next_record += every;
        }
    }
    Ok(traj)
}

fn jump_time<R: Rng>(model: &Model, s: usize, t: f64, rng: &mut R) -> (f64, usize) {
    match model.modes.next_jump(s, rng) {
        Some((hold, next)) => (t + hold, next),
        None => (f64::INFINITY, s),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Unstable,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityVerdict {
    pub verdict: Verdict,
    /// Largest tail slope over the replicates.
    pub slope: f64,
    /// Smallest tail slope over the replicates.
    pub min_slope: f64,
    /// Mean final running average.
    pub plateau: f64,
}

/// Simulates `opts.seeds` replicates from the empty network and classifies
/// by the tail slope of the running average: stable when every slope is
/// below `slope_tol`, unstable when every slope exceeds ten times that.
/// Undecided ensembles are rerun with a fourfold horizon up to
/// `opts.extensions` times.
pub fn classify_stability(model: &Model, law: &ControlLaw, alpha: f64, opts: &SimOptions) -> Result<StabilityVerdict> {
    let mut o = *opts;
    loop {
        let v = classify_once(model, law, alpha, &o)?;
        if v.verdict != Verdict::Undecided || o.extensions == 0 {
            return Ok(v);
        }
        o.horizon *= 4.0;
        o.extensions -= 1;
    }
}

fn classify_once(model: &Model, law: &ControlLaw, alpha: f64, opts: &SimOptions) -> Result<StabilityVerdict> {
    let x0 = vec![0.0; model.link_count()];
    let runs: Vec<(f64, f64)> = (0..opts.seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = opts.seed.wrapping_add(i);
            let s0 = initial_mode(model, seed);
            simulate(
                model,
                law,
                alpha,
                &x0,
                s0,
                opts.horizon,
                opts.dt,
                seed,
                opts.max_records,
            )
            .map(|tr| (tr.tail_slope(), *tr.running_avg.last().unwrap_or(&0.0)))
        })
        .collect::<Result<_>>()?;
    let slope = runs.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let min_slope = runs.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let plateau = runs.iter().map(|r| r.1).sum::<f64>() / runs.len().max(1) as f64;
    let verdict = if slope < opts.slope_tol {
        Verdict::Stable
    } else if min_slope > 10.0 * opts.slope_tol {
        Verdict::Unstable
    } else {
        Verdict::Undecided
    };
    Ok(StabilityVerdict {
        verdict,
        slope,
        min_slope,
        plateau,
    })
}

/// Initial mode drawn from the steady state.
fn initial_mode(model: &Model, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    let mut u: f64 = rng.random();
    for (s, &p) in model.p.iter().enumerate() {
        if u < p {
            return s;
        }
        u -= p;
    }
    model.mode_count() - 1
}

/// Bisection on the demand; undecided counts as unstable. No demand above
/// the min cut of the largest per-mode capacities can be served, so the
/// bracket starts just above it. Returns the midpoint of the final bracket.
pub fn simulated_throughput(model: &Model, law: &ControlLaw, opts: &SimOptions, tol: f64) -> Result<f64> {
    let fmax: Vec<f64> = (0..model.link_count()).map(|k| model.max_capacity(k)).collect();
    let (mut lo, mut hi) = (0.0, 1.05 * min_cut(&model.net, &fmax).0 + tol);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if classify_stability(model, law, mid, opts)?.verdict == Verdict::Stable {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::synthesize_open_loop;
    use crate::flow::{LinkFlow, ModedFlow};
    use crate::modes::ModeSystem;
    use crate::network::{build_network, Storage};

    fn single(caps: Vec<f64>, ms: ModeSystem) -> (Model, ControlLaw) {
        let net = build_network(vec![Storage::Infinite], &[]).unwrap();
        let flow = ModedFlow::nominal(LinkFlow::ctm(1.0, 1.0, 1.0, false), caps.len()).with_send_caps(caps);
        let m = Model::new(net, vec![flow], ms).unwrap();
        let law = synthesize_open_loop(&m).0;
        (m, law)
    }

    fn flip() -> ModeSystem {
        ModeSystem::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()
    }

    #[test]
    fn single_link_reaches_fixed_point() {
        let (m, law) = single(vec![1.0], ModeSystem::single());
        let tr = simulate(&m, &law, 0.5, &[0.0], 0, 50.0, 1e-2, 1, 100).unwrap();
        assert!((tr.final_state().x[0] - 0.5).abs() < 1e-6);
        assert_eq!(tr.jumps, 0);
    }

    #[test]
    fn deterministic_per_seed() {
        let (m, law) = single(vec![1.0, 0.0], flip());
        let a = simulate(&m, &law, 0.4, &[0.0], 0, 100.0, 1e-2, 7, 100).unwrap();
        let b = simulate(&m, &law, 0.4, &[0.0], 0, 100.0, 1e-2, 7, 100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mass_balance() {
        let (m, law) = single(vec![1.0, 0.0], flip());
        let tr = simulate(&m, &law, 0.8, &[0.0], 0, 200.0, 1e-2, 3, 100).unwrap();
        let total: f64 = tr.final_state().x.iter().sum();
        let err = (tr.inflow - tr.outflow + tr.clipped - total).abs();
        assert!(err <= 1e-6 * 200.0 * 1e-2 * tr.inflow.max(1.0), "{err}");
        assert!(tr.clipped.abs() < 1e-12);
    }

    #[test]
    fn halving_step_is_first_order() {
        let (m, law) = single(vec![1.0], ModeSystem::single());
        let a = simulate(&m, &law, 0.5, &[0.0], 0, 3.0, 2e-2, 1, 10).unwrap();
        let b = simulate(&m, &law, 0.5, &[0.0], 0, 3.0, 1e-2, 1, 10).unwrap();
        let diff = (a.final_state().x[0] - b.final_state().x[0]).abs();
        assert!(diff < 2.0 * 2e-2 * m.slope_bound(), "{diff}");
    }

    #[test]
    fn drift_signs_classify() {
        let (m, law) = single(vec![1.0, 0.0], flip());
        let opts = SimOptions {
            horizon: 2000.0,
            seeds: 5,
            ..SimOptions::default()
        };
        assert_eq!(
            classify_stability(&m, &law, 0.0, &opts).unwrap().verdict,
            Verdict::Stable
        );
        assert_eq!(
            classify_stability(&m, &law, 0.4, &opts).unwrap().verdict,
            Verdict::Stable
        );
        let up = classify_stability(&m, &law, 0.6, &opts).unwrap();
        assert_eq!(up.verdict, Verdict::Unstable);
        let grow = simulate(&m, &law, 0.8, &[0.0], 0, 2000.0, 1e-2, 2, 500).unwrap();
        assert!(grow.tail_slope() > 0.1);
    }

    #[test]
    fn csv_header() {
        let (m, law) = single(vec![1.0], ModeSystem::single());
        let tr = simulate(&m, &law, 0.5, &[0.0], 0, 1.0, 0.5, 1, 2).unwrap();
        let csv = tr.to_csv();
        assert!(csv.starts_with("t,s,x1,avg\n0,1,0,0\n"));
        assert_eq!(csv.lines().count(), 1 + tr.times.len());
    }
}
