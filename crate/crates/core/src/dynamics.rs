//! Actual flows and the density vector field, plus runtime lemma audits.

use rand::Rng;
use serde::Serialize;

use crate::controls::{random_state, sample_extent, ControlLaw};
use crate::model::Model;

/// Discrete mode and densities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HybridState {
    pub s: usize,
    pub x: Vec<f64>,
}

/// Actual flows per pair and density rates per link.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub q: Vec<f64>,
    pub g: Vec<f64>,
}

/// Actual flows from desired flows `mu` at `(s, x)`.
pub fn actual_flow(model: &Model, mu: &[f64], s: usize, x: &[f64], q: &mut [f64]) {
    let net = &model.net;
    for k in 0..net.link_count() {
        let outs = net.out_pairs(k);
        if outs.is_empty() {
            continue;
        }
        let total: f64 = outs.iter().map(|&p| mu[p]).sum();
        let f = model.sending(k, s, x[k]);
        for &p in outs {
            q[p] = if mu[p] <= 0.0 {
                0.0
            } else {
                mu[p].min(mu[p] / total * f)
            };
        }
    }
    for j in 0..net.link_count() {
        let ins = net.in_pairs(j);
        if ins.is_empty() {
            continue;
        }
        let r = model.receiving(j, s, x[j]);
        if r.is_infinite() {
            continue;
        }
        let total: f64 = ins.iter().map(|&p| mu[p]).sum();
        for &p in ins {
            if mu[p] > 0.0 {
                q[p] = q[p].min(mu[p] / total * r);
            }
        }
    }
}

/// Reusable buffers for repeated field evaluations.
#[derive(Debug, Clone)]
pub struct FieldEval<'a> {
    pub model: &'a Model,
    pub law: &'a ControlLaw,
    pub alpha: f64,
    obs: Vec<f64>,
    mu: Vec<f64>,
    q: Vec<f64>,
}

impl<'a> FieldEval<'a> {
    pub fn new(model: &'a Model, law: &'a ControlLaw, alpha: f64) -> Self {
        let np = model.net.pair_count();
        FieldEval {
            model,
            law,
            alpha,
            obs: vec![0.0; model.link_count()],
            mu: vec![0.0; np],
            q: vec![0.0; np],
        }
    }

    /// Writes `G(s, x)` into `g`; returns the destination outflow `f_K(s, x_K)`.
    pub fn eval(&mut self, s: usize, x: &[f64], g: &mut [f64]) -> f64 {
        let model = self.model;
        let net = &model.net;
        model.modes.observe_into(s, x, &mut self.obs);
        self.law.evaluate(model, s, x, &self.obs, &mut self.mu);
        actual_flow(model, &self.mu, s, x, &mut self.q);
        g.iter_mut().for_each(|v| *v = 0.0);
        for (p, &(k, j)) in net.pairs().iter().enumerate() {
            g[k] -= self.q[p];
            g[j] += self.q[p];
        }
        g[net.origin()] += self.alpha;
        let dest = net.destination();
        let out = model.sending(dest, s, x[dest]);
        g[dest] -= out;
        out
    }

    /// Actual flows of the last [`FieldEval::eval`] call.
    pub fn last_q(&self) -> &[f64] {
        &self.q
    }

    /// Desired flows of the last [`FieldEval::eval`] call.
    pub fn last_mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn field(&mut self, s: usize, x: &[f64]) -> FlowField {
        let mut g = vec![0.0; x.len()];
        self.eval(s, x, &mut g);
        FlowField { q: self.q.clone(), g }
    }
}

/// `G(s, x)` under `law` with demand `alpha`.
pub fn vector_field(model: &Model, law: &ControlLaw, alpha: f64, s: usize, x: &[f64]) -> FlowField {
    FieldEval::new(model, law, alpha).field(s, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LemmaViolationKind {
    /// An outflow `q_kj` decreased as `x_k` grew.
    OutflowDecreasing,
    /// An inflow `q_ik` increased as `x_k` grew.
    InflowIncreasing,
    /// `|G_k|` exceeded the bound.
    Unbounded,
    /// `G_k` increased as `x_k` grew.
    SelfIncreasing,
    /// `G_l` decreased as a neighbouring `x_k` grew.
    NeighbourDecreasing,
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaViolation {
    pub kind: LemmaViolationKind,
    pub mode: usize,
    pub link: usize,
    pub other: usize,
    pub state: Vec<f64>,
    pub delta: f64,
    pub amount: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LemmaReport {
    pub samples: usize,
    pub bound: f64,
    pub violations: Vec<LemmaViolation>,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: LemmaViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

const LEMMA_TOL: f64 = 1e-9;
const MAX_WITNESSES: usize = 50;

/// Randomised coordinate-perturbation audit of monotone `q`, bounded `G`
/// and cooperative `G`.
pub fn check_lemmas<R: Rng + ?Sized>(
    law: &ControlLaw,
    model: &Model,
    alpha: f64,
    samples: usize,
    rng: &mut R,
) -> LemmaReport {
    let net = &model.net;
    let bound = 2.0 * model.max_capacity_overall() + alpha;
    let mut report = LemmaReport {
        samples,
        bound,
        violations: Vec::new(),
    };
    let mut ev = FieldEval::new(model, law, alpha);
    let k_all = model.link_count();
    let mut ga = vec![0.0; k_all];
    let mut gb = vec![0.0; k_all];
    for _ in 0..samples {
        let s = rng.random_range(0..model.mode_count());
        let x = random_state(model, rng);
        let k = rng.random_range(0..k_all);
        let room = sample_extent(model, k) - x[k];
        if room <= 1e-9 {
            continue;
        }
        let delta = rng.random_range(0.0..room.min(0.5 * sample_extent(model, k)).max(1e-9));
        if delta <= 0.0 {
            continue;
        }
        let mut y = x.clone();
        y[k] += delta;
        ev.eval(s, &x, &mut ga);
        let qa = ev.last_q().to_vec();
        ev.eval(s, &y, &mut gb);
        let qb = ev.last_q();
        let mut push = |kind, other, amount| {
            if report.violations.len() < MAX_WITNESSES {
                report.violations.push(LemmaViolation {
                    kind,
                    mode: s,
                    link: k,
                    other,
                    state: x.clone(),
                    delta,
                    amount,
                });
            }
        };
        for &p in net.out_pairs(k) {
            let d = qb[p] - qa[p];
            if d < -LEMMA_TOL {
                push(LemmaViolationKind::OutflowDecreasing, net.pairs()[p].1, d);
            }
        }
        for &p in net.in_pairs(k) {
            let d = qb[p] - qa[p];
            if d > LEMMA_TOL {
                push(LemmaViolationKind::InflowIncreasing, net.pairs()[p].0, d);
            }
        }
        for (l, (&a, &b)) in ga.iter().zip(&gb).enumerate() {
            if a.abs().max(b.abs()) > bound + LEMMA_TOL {
                push(LemmaViolationKind::Unbounded, l, a.abs().max(b.abs()));
            }
        }
        if gb[k] - ga[k] > LEMMA_TOL {
            push(LemmaViolationKind::SelfIncreasing, k, gb[k] - ga[k]);
        }
        for &l in net.outs(k).iter().chain(net.ins(k)) {
            if gb[l] - ga[l] < -LEMMA_TOL {
                push(LemmaViolationKind::NeighbourDecreasing, l, gb[l] - ga[l]);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::Routing;
    use crate::flow::{LinkFlow, ModedFlow};
    use crate::modes::ModeSystem;
    use crate::network::{build_network, Storage};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(cap: f64) -> Model {
        let net = build_network(vec![Storage::Infinite], &[]).unwrap();
        let flows = vec![ModedFlow::nominal(LinkFlow::ctm(1.0, cap, 1.0, false), 1)];
        Model::new(net, flows, ModeSystem::single()).unwrap()
    }

    #[test]
    fn single_pair_sending_binds() {
        let net = build_network(vec![Storage::Infinite; 2], &[(0, 1)]).unwrap();
        let flows = vec![ModedFlow::nominal(LinkFlow::ctm(1.0, 1.0, 1.0, false), 1); 2];
        let m = Model::new(net, flows, ModeSystem::single()).unwrap();
        let mut q = vec![0.0];
        actual_flow(&m, &[2.0], 0, &[5.0, 0.0], &mut q);
        assert_eq!(q, vec![1.0]);
    }

    #[test]
    fn diverge_three_way_min() {
        // link 2 finite with receiving flow 0.3 at the chosen density
        let f0 = ModedFlow::nominal(LinkFlow::ctm(1.0, 2.0, 1.0, false), 1);
        let base1 = LinkFlow {
            storage: Storage::Finite { jam: 1.0 },
            ..LinkFlow::ctm(1.0, 1.0, 1.0, false)
        };
        let f1 = ModedFlow::nominal(base1, 1);
        let f2 = ModedFlow::nominal(LinkFlow::ctm(1.0, 1.0, 1.0, false), 1);
        let f3 = f2.clone();
        let net = build_network(
            vec![Storage::Infinite, base1.storage, Storage::Infinite, Storage::Infinite],
            &[(0, 1), (0, 2), (1, 3), (2, 3)],
        )
        .unwrap();
        let m = Model::new(net, vec![f0, f1, f2, f3], ModeSystem::single()).unwrap();
        let mut q = vec![0.0; 4];
        let mu = [0.5, 0.5, 0.0, 0.0];
        actual_flow(&m, &mu, 0, &[2.0, 0.7, 0.0, 0.0], &mut q);
        assert!((q[0] - 0.3).abs() < 1e-12);
        assert_eq!(q[1], 0.5);
    }

    #[test]
    fn empty_link_sends_nothing() {
        let m = single(1.0);
        let law = ControlLaw::OpenLoop(vec![]);
        let fld = vector_field(&m, &law, 1.0, 0, &[0.0]);
        assert_eq!(fld.g, vec![1.0]);
    }

    #[test]
    fn single_link_equilibrium() {
        let m = single(1.0);
        let law = ControlLaw::OpenLoop(vec![]);
        let fld = vector_field(&m, &law, 0.4, 0, &[0.4]);
        assert_eq!(fld.g, vec![0.0]);
    }

    #[test]
    fn empty_chain_fills_origin_only() {
        let net = build_network(vec![Storage::Infinite; 3], &[(0, 1), (1, 2)]).unwrap();
        let flows = vec![ModedFlow::nominal(LinkFlow::ctm(1.0, 1.0, 1.0, false), 1); 3];
        let m = Model::new(net, flows, ModeSystem::single()).unwrap();
        let law = ControlLaw::Routing(Routing::logit(&m.net, 1.0));
        let fld = vector_field(&m, &law, 1.0, 0, &[0.0; 3]);
        assert_eq!(fld.g, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_law_satisfies_lemmas() {
        let net = build_network(vec![Storage::Infinite; 3], &[(0, 1), (1, 2)]).unwrap();
        let flows = vec![ModedFlow::nominal(LinkFlow::ctm(1.0, 1.0, 1.0, false), 1); 3];
        let m = Model::new(net, flows, ModeSystem::single()).unwrap();
        let law = ControlLaw::OpenLoop(vec![0.7, 0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(check_lemmas(&law, &m, 0.5, 2000, &mut rng).passed());
    }

    #[test]
    fn violating_law_witnessed() {
        let net = build_network(vec![Storage::Infinite; 2], &[(0, 1)]).unwrap();
        let flows = vec![ModedFlow::nominal(LinkFlow::ctm(1.0, 1.0, 1.0, false), 1); 2];
        let m = Model::new(net, flows, ModeSystem::single()).unwrap();
        // desired flow shrinks as the upstream density grows
        let law = ControlLaw::custom(|_m: &Model, _s, x: &[f64], _o: &[f64], out: &mut [f64]| {
            out[0] = (1.0 - x[0]).max(0.0);
        });
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rep = check_lemmas(&law, &m, 0.5, 2000, &mut rng);
        assert!(rep.count(LemmaViolationKind::OutflowDecreasing) > 0);
    }
}
