//! Control laws, control synthesis and the control-law audit.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlownetError, Result};
use crate::model::Model;
use crate::modes::ActuatorFault;
use crate::network::{max_flow_p1, node_capacitated_flow, FlowRatios, Network};

/// Split rule at a link with several downstream links.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivergeRule {
    /// Shares proportional to `exp(-nu x_j)` over downstream links.
    Logit { nu: f64 },
}

/// Allocation rule at a link with several upstream links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeRule {
    /// Requests pass through; the actual-flow rule shares receiving flow proportionally.
    Proportional,
    /// Upstream links served in the given order (0-based link ids).
    Priority { order: Vec<usize> },
    /// Priority ordered by pressure `F_i (x_i - x_k)`, highest first.
    MaxPressure,
}

/// `mu_kj = max(0, u - kappa (x_j - x_j^c))` on one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampMeter {
    pub pair: usize,
    pub u: f64,
    pub kappa: f64,
}

/// Distributed routing: diverge splits, merge priorities and ramp meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    /// Per link; `None` on diverges means an even split.
    pub diverge: Vec<Option<DivergeRule>>,
    /// Per link.
    pub merge: Vec<MergeRule>,
    pub meters: Vec<RampMeter>,
}

impl Routing {
    /// Logit with sensitivity `nu` at every diverge, proportional merges.
    pub fn logit(net: &Network, nu: f64) -> Self {
        let k = net.link_count();
        Routing {
            diverge: (0..k)
                .map(|l| (net.outs(l).len() > 1).then_some(DivergeRule::Logit { nu }))
                .collect(),
            merge: vec![MergeRule::Proportional; k],
            meters: Vec::new(),
        }
    }

    pub fn with_merge(mut self, link: usize, rule: MergeRule) -> Self {
        self.merge[link] = rule;
        self
    }

    pub fn with_meter(mut self, meter: RampMeter) -> Self {
        self.meters.push(meter);
        self
    }
}

/// One term `offset - x_link` of a density-dependent rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTerm {
    pub offset: f64,
    pub link: usize,
}

/// Desired flow on one pair under a density-dependent law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairRule {
    /// The upstream sending flow.
    Sending,
    Zero,
    /// Minimum of the terms, using observed densities, clipped to
    /// `[0, r_j(x_j^obs)]`.
    Affine {
        terms: Vec<AffineTerm>,
    },
}

/// Signature of a user-supplied evaluator `(model, s, x, observed, out)`.
pub type CustomFn = dyn Fn(&Model, usize, &[f64], &[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
pub struct CustomLaw(pub Arc<CustomFn>);

impl fmt::Debug for CustomLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomLaw")
    }
}

/// A control law `mu(s, x)`.
#[derive(Debug, Clone)]
pub enum ControlLaw {
    Routing(Routing),
    /// `table[s][pair]`.
    ModeDependent(Vec<Vec<f64>>),
    OpenLoop(Vec<f64>),
    /// One rule per pair.
    DensityDependent(Vec<PairRule>),
    Custom(CustomLaw),
}

impl ControlLaw {
    pub fn custom<F>(f: F) -> Self
    where
        F: Fn(&Model, usize, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        ControlLaw::Custom(CustomLaw(Arc::new(f)))
    }

    pub fn name(&self) -> &'static str {
        match self {
            ControlLaw::Routing(_) => "routing",
            ControlLaw::ModeDependent(_) => "md",
            ControlLaw::OpenLoop(_) => "ol",
            ControlLaw::DensityDependent(_) => "dd",
            ControlLaw::Custom(_) => "custom",
        }
    }

    /// True when `mu` does not depend on the densities.
    pub fn is_constant_in_x(&self) -> bool {
        matches!(self, ControlLaw::ModeDependent(_) | ControlLaw::OpenLoop(_))
    }

    /// Checks that the law fits the model's pair and mode counts.
    pub fn validate(&self, model: &Model) -> Result<()> {
        let np = model.net.pair_count();
        let k = model.link_count();
        let bad = |m: String| Err(FlownetError::InvalidControl(m));
        match self {
            ControlLaw::Routing(r) => {
                if r.diverge.len() != k || r.merge.len() != k {
                    return bad("routing rules must cover every link".into());
                }
                for (l, rule) in r.merge.iter().enumerate() {
                    if let MergeRule::Priority { order } = rule {
                        if let Some(&i) = order.iter().find(|i| !model.net.ins(l).contains(i)) {
                            return bad(format!("priority at link {} lists non-upstream link {}", l + 1, i + 1));
                        }
                    }
                }
                for m in &r.meters {
                    if m.pair >= np || !(m.u >= 0.0 && m.kappa >= 0.0) {
                        return bad(format!("invalid ramp meter on pair {}", m.pair + 1));
                    }
                }
            }
            ControlLaw::ModeDependent(t) => {
                if t.len() != model.mode_count() || t.iter().any(|row| row.len() != np) {
                    return bad("mode-dependent table has the wrong shape".into());
                }
            }
            ControlLaw::OpenLoop(mu) => {
                if mu.len() != np {
                    return bad("open-loop vector has the wrong length".into());
                }
            }
            ControlLaw::DensityDependent(rules) => {
                if rules.len() != np {
                    return bad("density-dependent rules must cover every pair".into());
                }
                for rule in rules {
                    if let PairRule::Affine { terms } = rule {
                        if terms.iter().any(|t| t.link >= k) {
                            return bad("density-dependent term references a missing link".into());
                        }
                    }
                }
            }
            ControlLaw::Custom(_) => {}
        }
        Ok(())
    }

    /// Desired flows `mu(s, x)`; `obs` holds the observed densities `T_s(x)`.
    ///
    /// Physical sending and receiving terms use the true densities `x`;
    /// decision variables use `obs`. Actuator faults of mode `s` are applied last.
    pub fn evaluate(&self, model: &Model, s: usize, x: &[f64], obs: &[f64], out: &mut [f64]) {
        let net = &model.net;
        match self {
            ControlLaw::Routing(r) => eval_routing(r, model, s, x, obs, out),
            ControlLaw::ModeDependent(t) => out.copy_from_slice(&t[s]),
            ControlLaw::OpenLoop(mu) => out.copy_from_slice(mu),
            ControlLaw::DensityDependent(rules) => {
                for (p, rule) in rules.iter().enumerate() {
                    let (k, j) = net.pairs()[p];
                    out[p] = match rule {
                        PairRule::Sending => model.sending(k, s, x[k]),
                        PairRule::Zero => 0.0,
                        PairRule::Affine { terms } => {
                            let v = terms
                                .iter()
                                .map(|t| t.offset - obs[t.link])
                                .fold(f64::INFINITY, f64::min);
                            v.min(model.flows[j].base.receiving(obs[j])).max(0.0)
                        }
                    };
                }
            }
            ControlLaw::Custom(f) => (f.0)(model, s, x, obs, out),
        }
        for &(p, fault) in model.modes.actuator_faults(s) {
            let k = net.pairs()[p].0;
            out[p] = match fault {
                ActuatorFault::Disengage => model.sending(k, s, x[k]),
                ActuatorFault::Offset { delta } => (out[p] + delta).max(0.0),
            };
        }
    }

    /// `mu(s, x)` with the mode's sensor faults applied.
    pub fn desired(&self, model: &Model, s: usize, x: &[f64]) -> Vec<f64> {
        let obs = model.modes.observe(s, x);
        let mut out = vec![0.0; model.net.pair_count()];
        self.evaluate(model, s, x, &obs, &mut out);
        out
    }
}

/// Logit shares `exp(-nu x_j) / sum_l exp(-nu x_l)`.
pub fn logit_shares(nu: f64, xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = xs.iter().map(|&x| (-nu * (x - lo)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Serves `requests` in order against receiving flow `r`.
pub fn priority_merge(r: f64, requests: &[f64]) -> Vec<f64> {
    let mut rem = r;
    requests
        .iter()
        .map(|&d| {
            let q = d.min(rem.max(0.0)).max(0.0);
            rem -= q;
            q
        })
        .collect()
}

fn eval_routing(r: &Routing, model: &Model, s: usize, x: &[f64], obs: &[f64], out: &mut [f64]) {
    let net = &model.net;
    for k in 0..net.link_count() {
        let f = model.sending(k, s, x[k]);
        let outs = net.out_pairs(k);
        match (outs.len(), r.diverge[k]) {
            (0, _) => {}
            (1, _) => out[outs[0]] = f,
            (n, rule) => {
                let nu = match rule {
                    Some(DivergeRule::Logit { nu }) => nu,
                    None => 0.0,
                };
                let lo = outs
                    .iter()
                    .map(|&p| obs[net.pairs()[p].1])
                    .fold(f64::INFINITY, f64::min);
                let mut total = 0.0;
                for &p in outs {
                    let w = (-nu * (obs[net.pairs()[p].1] - lo)).exp();
                    out[p] = w;
                    total += w;
                }
                debug_assert!(n > 1);
                for &p in outs {
                    out[p] = out[p] / total * f;
                }
            }
        }
    }
    for m in &r.meters {
        let j = net.pairs()[m.pair].1;
        out[m.pair] = (m.u - m.kappa * (obs[j] - model.critical(j))).max(0.0);
    }
    for j in 0..net.link_count() {
        let ins = net.in_pairs(j);
        if ins.len() < 2 {
            continue;
        }
        let order: Vec<usize> = match &r.merge[j] {
            MergeRule::Proportional => continue,
            MergeRule::Priority { order } => {
                let mut o: Vec<usize> = order.clone();
                for &i in net.ins(j) {
                    if !o.contains(&i) {
                        o.push(i);
                    }
                }
                o
            }
            MergeRule::MaxPressure => {
                let mut o: Vec<usize> = net.ins(j).to_vec();
                let pressure = |i: usize| model.flows[i].capacity() * (obs[i] - obs[j]);
                o.sort_by(|&a, &b| pressure(b).total_cmp(&pressure(a)).then(a.cmp(&b)));
                o
            }
        };
        let mut rem = model.receiving(j, s, x[j]);
        for i in order {
            let p = net.pair_id(i, j).expect("upstream pair");
            let q = out[p].min(rem.max(0.0));
            out[p] = q;
            rem -= q;
        }
    }
}

/// Mode-dependent control: per mode, a max-flow on node capacities
/// `min{f_k(s, x_k^c), r_k(s, x_k^c)}`.
pub fn synthesize_mode_dependent(model: &Model) -> ControlLaw {
    ControlLaw::ModeDependent(mode_dependent_table(model).1)
}

/// Per-mode max-flow values and pair flows of the mode-dependent synthesis.
pub fn mode_dependent_table(model: &Model) -> (Vec<f64>, Vec<Vec<f64>>) {
    (0..model.mode_count())
        .map(|s| {
            let caps: Vec<f64> = (0..model.link_count())
                .map(|k| {
                    let xc = model.critical(k);
                    model.sending(k, s, xc).min(model.receiving(k, s, xc))
                })
                .collect();
            node_capacitated_flow(&model.net, &caps)
        })
        .unzip()
}

/// Open-loop control `mu_kj = beta_kj F_k^max` from the expected-capacity max-flow.
pub fn synthesize_open_loop(model: &Model) -> (ControlLaw, FlowRatios) {
    let ratios = max_flow_p1(&model.net, &model.expected_capacities());
    let mu = model
        .net
        .pairs()
        .iter()
        .enumerate()
        .map(|(p, &(k, _))| ratios.beta[p] * model.max_capacity(k))
        .collect();
    (ControlLaw::OpenLoop(mu), ratios)
}

/// The density-dependent law designed for the seven-link example network.
///
/// `link5_infinite` selects `min{2 - T_5(x_5), 2 - x_6}` on pair (1,5).
pub fn example_density_dependent(net: &Network, link5_infinite: bool) -> Result<ControlLaw> {
    let pair = |a: usize, b: usize| {
        net.pair_id(a - 1, b - 1)
            .ok_or_else(|| FlownetError::InvalidControl(format!("builtin dd law needs pair ({a}, {b})")))
    };
    let term = |offset: f64, link: usize| AffineTerm { offset, link: link - 1 };
    if net.link_count() != 7 || net.pair_count() != 8 {
        return Err(FlownetError::InvalidControl(
            "builtin dd law is defined for the seven-link example network".into(),
        ));
    }
    let mut rules = vec![PairRule::Sending; 8];
    rules[pair(1, 2)?] = PairRule::Affine {
        terms: vec![term(2.0, 2)],
    };
    rules[pair(5, 6)?] = PairRule::Affine {
        terms: vec![term(2.0, 6)],
    };
    rules[pair(1, 5)?] = PairRule::Affine {
        terms: if link5_infinite {
            vec![term(2.0, 5), term(2.0, 6)]
        } else {
            vec![term(2.0, 5)]
        },
    };
    rules[pair(2, 4)?] = PairRule::Zero;
    for (a, b) in [(2, 3), (3, 7), (4, 6), (6, 7)] {
        rules[pair(a, b)?] = PairRule::Sending;
    }
    Ok(ControlLaw::DensityDependent(rules))
}

/// Kind of control-law violation found by [`validate_control`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlViolationKind {
    /// `mu_kj` decreased as `x_k` grew.
    OutflowNotMonotone,
    /// `mu_ik` increased as `x_k` grew.
    InflowNotMonotone,
    /// Outflow changed by more than the sending flow.
    OutflowUnbounded,
    /// Inflow changed by more than the receiving flow.
    InflowUnbounded,
    /// `mu_kj` moves in opposite directions in two modes.
    ModeSignMismatch,
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlViolation {
    pub kind: ControlViolationKind,
    pub mode: usize,
    pub link: usize,
    pub pair: Option<usize>,
    pub state: Vec<f64>,
    pub delta: f64,
    pub amount: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ControlAudit {
    pub samples: usize,
    pub violations: Vec<ControlViolation>,
}

impl ControlAudit {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

const AUDIT_TOL: f64 = 1e-9;
/// Cap on stored witnesses per audit.
const MAX_WITNESSES: usize = 50;

/// Upper end of the sampling range for link `k`.
pub(crate) fn sample_extent(model: &Model, k: usize) -> f64 {
    let jam = model.jam(k);
    if jam.is_finite() {
        jam
    } else {
        2.0 * model.critical(k) + 2.0
    }
}

pub(crate) fn random_state<R: Rng + ?Sized>(model: &Model, rng: &mut R) -> Vec<f64> {
    (0..model.link_count())
        .map(|k| {
            // a quarter of the samples sit on the domain edges, where kinks live
            match rng.random_range(0..8) {
                0 => 0.0,
                1 => model.critical(k).min(sample_extent(model, k)),
                _ => rng.random_range(0.0..=sample_extent(model, k)),
            }
        })
        .collect()
}

/// Randomised finite-difference audit of the monotonicity, boundedness and
/// cross-mode sign-consistency requirements on `mu`.
pub fn validate_control<R: Rng + ?Sized>(law: &ControlLaw, model: &Model, samples: usize, rng: &mut R) -> ControlAudit {
    let net = &model.net;
    let mut audit = ControlAudit {
        samples,
        violations: Vec::new(),
    };
    let push = |v: ControlViolation, audit: &mut ControlAudit| {
        if audit.violations.len() < MAX_WITNESSES {
            audit.violations.push(v);
        }
    };
    for _ in 0..samples {
        let x = random_state(model, rng);
        let k = rng.random_range(0..model.link_count());
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
        let mut signs: Vec<Vec<f64>> = Vec::with_capacity(model.mode_count());
        for s in 0..model.mode_count() {
            let a = law.desired(model, s, &x);
            let b = law.desired(model, s, &y);
            let d: Vec<f64> = a.iter().zip(&b).map(|(a, b)| b - a).collect();
            let witness = |kind, pair, amount| ControlViolation {
                kind,
                mode: s,
                link: k,
                pair,
                state: x.clone(),
                delta,
                amount,
            };
            let mut out_sum = 0.0;
            for &p in net.out_pairs(k) {
                out_sum += d[p];
                if d[p] < -AUDIT_TOL {
                    push(
                        witness(ControlViolationKind::OutflowNotMonotone, Some(p), d[p]),
                        &mut audit,
                    );
                }
            }
            let mut in_sum = 0.0;
            for &p in net.in_pairs(k) {
                in_sum += d[p];
                if d[p] > AUDIT_TOL {
                    push(
                        witness(ControlViolationKind::InflowNotMonotone, Some(p), d[p]),
                        &mut audit,
                    );
                }
            }
            let df = model.sending(k, s, y[k]) - model.sending(k, s, x[k]);
            if !net.out_pairs(k).is_empty() && out_sum.abs() > df.abs() + AUDIT_TOL {
                push(
                    witness(ControlViolationKind::OutflowUnbounded, None, out_sum),
                    &mut audit,
                );
            }
            let (rx, ry) = (model.receiving(k, s, x[k]), model.receiving(k, s, y[k]));
            if rx.is_finite() && !net.in_pairs(k).is_empty() && in_sum.abs() > (ry - rx).abs() + AUDIT_TOL {
                push(witness(ControlViolationKind::InflowUnbounded, None, in_sum), &mut audit);
            }
            signs.push(d);
        }
        for p in 0..net.pair_count() {
            let up = signs.iter().position(|d| d[p] > AUDIT_TOL);
            let down = signs.iter().position(|d| d[p] < -AUDIT_TOL);
            if let (Some(a), Some(_)) = (up, down) {
                push(
                    ControlViolation {
                        kind: ControlViolationKind::ModeSignMismatch,
                        mode: a,
                        link: k,
                        pair: Some(p),
                        state: x.clone(),
                        delta,
                        amount: signs[a][p],
                    },
                    &mut audit,
                );
            }
        }
    }
    audit
}
