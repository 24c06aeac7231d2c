//! Disruption modes: an ergodic CTMC plus sensor and actuator faults.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{FlownetError, Result};

/// Sensor fault `T_{s,k}` on one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SensorFault {
    Identity,
    /// `x_k + delta`, clipped at zero.
    Bias {
        delta: f64,
    },
    /// Reads zero regardless of the state.
    DenialOfService,
}

impl SensorFault {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            SensorFault::Identity => x,
            SensorFault::Bias { delta } => (x + delta).max(0.0),
            SensorFault::DenialOfService => 0.0,
        }
    }
}

/// Actuator fault replacing the desired flow on one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActuatorFault {
    /// The pair is unmetered: `mu_kj = f_k(s, x_k)`.
    Disengage,
    /// `mu_kj + delta`, clipped at zero.
    Offset { delta: f64 },
}

/// Mode set with transition rates and per-mode faults.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSystem {
    rates: Vec<Vec<f64>>,
    sensor: Vec<Vec<(usize, SensorFault)>>,
    actuator: Vec<Vec<(usize, ActuatorFault)>>,
}

impl ModeSystem {
    /// Builds from off-diagonal rates `lambda[s][s']`; diagonal entries are ignored.
    pub fn new(rates: Vec<Vec<f64>>) -> Result<Self> {
        let m = rates.len();
        if m == 0 {
            return Err(FlownetError::InvalidModes("need at least one mode".into()));
        }
        let mut rates = rates;
        for (s, row) in rates.iter_mut().enumerate() {
            if row.len() != m {
                return Err(FlownetError::InvalidModes(format!(
                    "rate row {} has {} entries, expected {m}",
                    s + 1,
                    row.len()
                )));
            }
            row[s] = 0.0;
            if let Some(bad) = row.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
                return Err(FlownetError::InvalidModes(format!(
                    "rate {bad} in row {} is not a finite nonnegative number",
                    s + 1
                )));
            }
        }
        check_ergodic(&rates)?;
        Ok(ModeSystem {
            rates,
            sensor: vec![Vec::new(); m],
            actuator: vec![Vec::new(); m],
        })
    }

    /// One mode, no faults.
    pub fn single() -> Self {
        ModeSystem::new(vec![vec![0.0]]).expect("single mode is ergodic")
    }

    pub fn with_sensor_fault(mut self, s: usize, link: usize, fault: SensorFault) -> Self {
        self.sensor[s].retain(|(k, _)| *k != link);
        if fault != SensorFault::Identity {
            self.sensor[s].push((link, fault));
        }
        self
    }

    pub fn with_actuator_fault(mut self, s: usize, pair: usize, fault: ActuatorFault) -> Self {
        self.actuator[s].retain(|(p, _)| *p != pair);
        self.actuator[s].push((pair, fault));
        self
    }

    pub fn mode_count(&self) -> usize {
        self.rates.len()
    }

    pub fn rate(&self, s: usize, t: usize) -> f64 {
        self.rates[s][t]
    }

    pub fn rates(&self) -> &[Vec<f64>] {
        &self.rates
    }

    /// Total exit rate of mode `s`.
    pub fn exit_rate(&self, s: usize) -> f64 {
        self.rates[s].iter().sum()
    }

    /// Generator matrix with `-sum` on the diagonal.
    pub fn generator(&self) -> DMatrix<f64> {
        let m = self.mode_count();
        DMatrix::from_fn(m, m, |i, j| if i == j { -self.exit_rate(i) } else { self.rates[i][j] })
    }

    pub fn sensor_faults(&self, s: usize) -> &[(usize, SensorFault)] {
        &self.sensor[s]
    }

    pub fn actuator_faults(&self, s: usize) -> &[(usize, ActuatorFault)] {
        &self.actuator[s]
    }

    pub fn has_sensor_faults(&self) -> bool {
        self.sensor.iter().any(|v| !v.is_empty())
    }

    /// Observed densities `T_s(x)`.
    pub fn observe(&self, s: usize, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.observe_into(s, x, &mut out);
        out
    }

    pub fn observe_into(&self, s: usize, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
        for &(k, fault) in &self.sensor[s] {
            if k < out.len() {
                out[k] = fault.apply(x[k]);
            }
        }
    }

    /// Samples the holding time in `s` and the next mode; `None` for absorbing single modes.
    pub fn next_jump<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Option<(f64, usize)> {
        let total = self.exit_rate(s);
        if total <= 0.0 {
            return None;
        }
        let hold = Exp::new(total).expect("positive rate").sample(rng);
        let mut u = rng.random::<f64>() * total;
        let mut next = s;
        for (t, &r) in self.rates[s].iter().enumerate() {
            if r <= 0.0 {
                continue;
            }
            next = t;
            if u < r {
                break;
            }
            u -= r;
        }
        Some((hold, next))
    }
}

fn check_ergodic(rates: &[Vec<f64>]) -> Result<()> {
    let m = rates.len();
    let reach = |forward: bool| {
        let mut seen = vec![false; m];
        seen[0] = true;
        let mut stack = vec![0];
        while let Some(u) = stack.pop() {
            for v in 0..m {
                let r = if forward { rates[u][v] } else { rates[v][u] };
                if r > 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen
    };
    for forward in [true, false] {
        if let Some(s) = reach(forward).iter().position(|&b| !b) {
            return Err(FlownetError::NotErgodic(if forward { 1 } else { s + 1 }));
        }
    }
    Ok(())
}

/// Stationary distribution of the mode chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub p: Vec<f64>,
}

impl SteadyState {
    /// Max absolute residual of the global balance equations.
    pub fn residual(&self, ms: &ModeSystem) -> f64 {
        let m = ms.mode_count();
        let mut worst = (self.p.iter().sum::<f64>() - 1.0).abs();
        for s in 0..m {
            let out = self.p[s] * ms.exit_rate(s);
            let inn: f64 = (0..m).map(|t| self.p[t] * ms.rate(t, s)).sum();
            worst = worst.max((out - inn).abs());
        }
        worst
    }
}

/// Solves `p^T Lambda = 0`, `sum p = 1`.
pub fn steady_state(ms: &ModeSystem) -> Result<SteadyState> {
    let m = ms.mode_count();
    let mut a = ms.generator().transpose();
    for j in 0..m {
        a[(m - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(m);
    rhs[m - 1] = 1.0;
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or(FlownetError::Singular("steady-state balance"))?;
    let p = sol.iter().map(|v| v.max(0.0)).collect::<Vec<_>>();
    let total: f64 = p.iter().sum();
    Ok(SteadyState {
        p: p.into_iter().map(|v| v / total).collect(),
    })
}

/// Mode path `[(mode, entry_time)]` on `[0, horizon)`.
pub fn sample_path<R: Rng + ?Sized>(ms: &ModeSystem, s0: usize, horizon: f64, rng: &mut R) -> Vec<(usize, f64)> {
    let mut path = vec![(s0, 0.0)];
    let (mut s, mut t) = (s0, 0.0);
    while let Some((hold, next)) = ms.next_jump(s, rng) {
        t += hold;
        if t >= horizon {
            break;
        }
        s = next;
        path.push((s, t));
    }
    path
}

/// Fraction of `[0, horizon)` spent in each mode.
pub fn occupancy(path: &[(usize, f64)], modes: usize, horizon: f64) -> Vec<f64> {
    let mut occ = vec![0.0; modes];
    for (i, &(s, t)) in path.iter().enumerate() {
        let end = path.get(i + 1).map_or(horizon, |p| p.1);
        occ[s] += end - t;
    }
    occ.iter().map(|o| o / horizon).collect()
}

/// The four-mode chain of the example network.
pub fn example_rates() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 1.0, 1.0, 0.0],
        vec![1.0, 0.0, 0.0, 1.0],
        vec![1.0, 0.0, 0.0, 1.0],
        vec![0.0, 1.0, 1.0, 0.0],
    ]
}
