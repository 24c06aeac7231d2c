//! A network together with its flow functions and disruption modes.

use crate::error::{FlownetError, Result};
use crate::flow::ModedFlow;
use crate::modes::{steady_state, ModeSystem};
use crate::network::{access_sets, AccessSets, Network};

/// Everything the dynamics need apart from the control law and demand.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub flows: Vec<ModedFlow>,
    pub modes: ModeSystem,
    /// Steady-state mode probabilities.
    pub p: Vec<f64>,
    pub access: AccessSets,
    caps: Vec<Vec<f64>>,
    critical: Vec<f64>,
}

impl Model {
    pub fn new(net: Network, flows: Vec<ModedFlow>, modes: ModeSystem) -> Result<Self> {
        if flows.len() != net.link_count() {
            return Err(FlownetError::Scenario(format!(
                "{} flow specs for {} links",
                flows.len(),
                net.link_count()
            )));
        }
        for (k, f) in flows.iter().enumerate() {
            f.validate(k + 1)?;
            if f.mode_count() != modes.mode_count() {
                return Err(FlownetError::InvalidFlow {
                    link: k + 1,
                    reason: format!(
                        "caps given for {} modes, system has {}",
                        f.mode_count(),
                        modes.mode_count()
                    ),
                });
            }
            if f.storage() != net.storage(k) {
                return Err(FlownetError::InvalidFlow {
                    link: k + 1,
                    reason: "storage disagrees with the network".into(),
                });
            }
        }
        for s in 0..modes.mode_count() {
            for &(k, _) in modes.sensor_faults(s) {
                if k >= net.link_count() {
                    return Err(FlownetError::InvalidModes(format!(
                        "sensor fault in mode {} references link {}",
                        s + 1,
                        k + 1
                    )));
                }
            }
            for &(p, _) in modes.actuator_faults(s) {
                if p >= net.pair_count() {
                    return Err(FlownetError::InvalidModes(format!(
                        "actuator fault in mode {} references pair {}",
                        s + 1,
                        p + 1
                    )));
                }
            }
        }
        let p = steady_state(&modes)?.p;
        let caps = (0..modes.mode_count())
            .map(|s| flows.iter().map(|f| f.mode_capacity(s).0).collect())
            .collect();
        let critical = flows.iter().map(ModedFlow::critical_density).collect();
        let access = access_sets(&net);
        Ok(Model {
            net,
            flows,
            modes,
            p,
            access,
            caps,
            critical,
        })
    }

    pub fn link_count(&self) -> usize {
        self.net.link_count()
    }

    pub fn mode_count(&self) -> usize {
        self.modes.mode_count()
    }

    /// `F_{s,k}` for every link.
    pub fn mode_capacities(&self, s: usize) -> &[f64] {
        &self.caps[s]
    }

    /// `sum_s p_s F_{s,k}`.
    pub fn expected_capacities(&self) -> Vec<f64> {
        (0..self.link_count())
            .map(|k| (0..self.mode_count()).map(|s| self.p[s] * self.caps[s][k]).sum())
            .collect()
    }

    /// `F_k^max`.
    pub fn max_capacity(&self, k: usize) -> f64 {
        self.caps.iter().map(|c| c[k]).fold(0.0, f64::max)
    }

    /// `max_{s,k} F_{s,k}`.
    pub fn max_capacity_overall(&self) -> f64 {
        (0..self.link_count()).map(|k| self.max_capacity(k)).fold(0.0, f64::max)
    }

    /// Nominal critical density `x_k^c`.
    pub fn critical(&self, k: usize) -> f64 {
        self.critical[k]
    }

    pub fn criticals(&self) -> &[f64] {
        &self.critical
    }

    pub fn sending(&self, k: usize, s: usize, x: f64) -> f64 {
        self.flows[k].sending(s, x)
    }

    pub fn receiving(&self, k: usize, s: usize, x: f64) -> f64 {
        self.flows[k].receiving(s, x)
    }

    pub fn jam(&self, k: usize) -> f64 {
        self.flows[k].jam()
    }

    /// Largest Lipschitz constant among all flow functions.
    pub fn slope_bound(&self) -> f64 {
        self.flows.iter().map(ModedFlow::slope_bound).fold(0.0, f64::max)
    }

    /// Clamps a density vector into the state space.
    pub fn clamp(&self, x: &mut [f64]) -> f64 {
        let mut moved = 0.0;
        for (k, v) in x.iter_mut().enumerate() {
            let c = v.clamp(0.0, self.jam(k));
            moved += (c - *v).abs();
            *v = c;
        }
        moved
    }
}
