//! Lyapunov drift certificates, the density-dependent lower bound, and
//! certified throughput by bisection on the demand.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::capacity::capacity_summary;
use crate::controls::ControlLaw;
use crate::dynamics::FieldEval;
use crate::error::{FlownetError, Result};
use crate::grid::for_each_point;
use crate::invariant::{build_box, build_generic_box, build_monotone_box, verify_box, BoxMethod, InvariantBox};
use crate::model::Model;
use crate::modes::ModeSystem;
use crate::network::max_flow_p1;

/// Largest number of free coordinates an extremal problem may have.
pub const MAX_FREE_AXES: usize = 12;
const BKS_TOL: f64 = 1e-10;
/// Face grid used when the corner-based generic box fails verification.
const REFINED_FACE_POINTS: usize = 9;

/// Numerical settings of the certificates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CertifyOptions {
    /// Points per free axis for `I*` and `O*`.
    pub grid: usize,
    /// Points per free axis for the spillback check.
    pub prop_grid: usize,
    /// Cap on grid evaluations per extremal problem.
    pub budget: usize,
    pub probe: f64,
    /// Bisection tolerance on the demand.
    pub tol: f64,
    /// Boundary samples when verifying generic boxes.
    pub box_samples: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            grid: 9,
            prop_grid: 17,
            budget: 100_000,
            probe: crate::invariant::DEFAULT_PROBE,
            tol: 1e-3,
            box_samples: 10_000,
        }
    }
}

/// Which drift condition to test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Drift,
    Spillback,
}

/// Unbounded links and the link sets attached to each of them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BottleneckStructure {
    /// Links whose upper bound is infinite.
    pub unbounded: Vec<usize>,
    /// Upstream links that are unbounded, per link.
    pub m_mu: Vec<Vec<usize>>,
    /// Upstream links that are bounded, per link.
    pub m_tilde: Vec<Vec<usize>>,
    /// Downstream links that are unbounded, per link.
    pub n_mu: Vec<Vec<usize>>,
    /// Downstream links that can congest and spill back, per link.
    pub spill: Vec<Vec<usize>>,
}

/// Derives the structure of `bx`. A downstream link `j` of `k` is a
/// spillback link when its upper bound is finite and above `x^c_j`, the
/// sending flows of its upstream links exceed `r_j` at some corner of the
/// box in some mode, and every link on a path from `k` to `j` qualifies too.
pub fn bottleneck_structure(model: &Model, bx: &InvariantBox, probe: f64) -> BottleneckStructure {
    let net = &model.net;
    let kk = net.link_count();
    let unbounded = bx.unbounded();
    let is_unb = |k: usize| bx.upper[k].is_infinite();
    let can_spill = spillback_capable(model, bx, probe);
    let mut m_mu = Vec::with_capacity(kk);
    let mut m_tilde = Vec::with_capacity(kk);
    let mut n_mu = Vec::with_capacity(kk);
    let mut spill = Vec::with_capacity(kk);
    for k in 0..kk {
        let m = model.access.m(k);
        let n = model.access.n(k);
        m_mu.push(m.iter().copied().filter(|&l| is_unb(l)).collect());
        m_tilde.push(m.iter().copied().filter(|&l| !is_unb(l)).collect());
        n_mu.push(n.iter().copied().filter(|&l| is_unb(l)).collect());
        let cand: Vec<usize> = n
            .iter()
            .copied()
            .filter(|&j| !is_unb(j) && bx.upper[j] > model.critical(j) + 1e-12 && can_spill[j])
            .collect();
        let chained = cand
            .iter()
            .copied()
            .filter(|&j| {
                n.iter()
                    .filter(|&&l| l != j && model.access.reaches(l, j))
                    .all(|l| cand.contains(l))
            })
            .collect();
        spill.push(chained);
    }
    BottleneckStructure {
        unbounded,
        m_mu,
        m_tilde,
        n_mu,
        spill,
    }
}

fn box_corners(bx: &InvariantBox, top: &[f64], mut visit: impl FnMut(&[f64])) {
    let kk = bx.len();
    let mut x = vec![0.0; kk];
    if kk <= 12 {
        for mask in 0..(1usize << kk) {
            for l in 0..kk {
                x[l] = if mask >> l & 1 == 1 { top[l] } else { bx.lower[l] };
            }
            visit(&x);
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0xc0);
        for _ in 0..4096 {
            for l in 0..kk {
                x[l] = if rng.random_bool(0.5) { top[l] } else { bx.lower[l] };
            }
            visit(&x);
        }
    }
}

fn spillback_capable(model: &Model, bx: &InvariantBox, probe: f64) -> Vec<bool> {
    let net = &model.net;
    let top = bx.materialised_upper(model, probe);
    let mut out = vec![false; net.link_count()];
    box_corners(bx, &top, |x| {
        for s in 0..model.mode_count() {
            for j in 0..net.link_count() {
                let supply: f64 = net.ins(j).iter().map(|&i| model.sending(i, s, x[i])).sum();
                if supply > model.receiving(j, s, x[j]) + 1e-12 {
                    out[j] = true;
                }
            }
        }
    });
    out
}

/// The ramp `rho` of a spillback link: 0 below the box, 1 above, linear between.
pub fn rho(bx: &InvariantBox, link: usize, x: f64) -> f64 {
    let (lo, hi) = (bx.lower[link], bx.upper[link]);
    if x >= hi {
        1.0
    } else if x < lo {
        0.0
    } else {
        (x - lo) / (hi - lo)
    }
}

/// Slope of the middle piece on the closed box interval, 0 outside.
fn rho_slope(bx: &InvariantBox, link: usize, x: f64) -> f64 {
    let (lo, hi) = (bx.lower[link], bx.upper[link]);
    if hi > lo && x >= lo && x <= hi {
        1.0 / (hi - lo)
    } else {
        0.0
    }
}

/// Solves `z^s + sum_s' lambda(s,s') (b^s' - b^s) = sum_s' p_s' z^s'` with
/// `b^1 = 0`, then shifts so that `min b = 0`. Returns `b` and the residual.
pub fn solve_bks(ms: &ModeSystem, p: &[f64], z: &[f64]) -> Result<(Vec<f64>, f64)> {
    let m = ms.mode_count();
    let mean: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
    let mut b = vec![0.0; m];
    if m > 1 {
        let n = m - 1;
        let mut a = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for s in 1..m {
            for t in 1..m {
                a[(s - 1, t - 1)] = if s == t { -ms.exit_rate(s) } else { ms.rate(s, t) };
            }
            rhs[s - 1] = mean - z[s];
        }
        let sol = a.lu().solve(&rhs).ok_or(FlownetError::Singular("b system"))?;
        for s in 1..m {
            b[s] = sol[s - 1];
        }
        let low = b.iter().copied().fold(f64::INFINITY, f64::min);
        b.iter_mut().for_each(|v| *v -= low);
    }
    Ok((b.clone(), bks_residual(ms, z, &b, mean)))
}

fn bks_residual(ms: &ModeSystem, z: &[f64], b: &[f64], mean: f64) -> f64 {
    (0..ms.mode_count())
        .map(|s| {
            let jump: f64 = (0..ms.mode_count()).map(|t| ms.rate(s, t) * (b[t] - b[s])).sum();
            (z[s] + jump - mean).abs()
        })
        .fold(0.0, f64::max)
}

/// Weights `a_k > 0` with `eta_k a_k + delta sum_{n in N_k} a_n < 0`.
///
/// `links` lists the unbounded links, `eta` their expected drifts in the
/// same order, `n_mu` the unbounded downstream links of every link.
/// Links are levelled from the destination upwards; level `i` gets
/// `(-delta N / M)^(i-1)` when `delta >= |M|` and `-delta N^(i-1) / M`
/// otherwise, with `M = max eta` and `N = max |N_k|`. Should the
/// inequality not hold strictly, the base is doubled until it does.
pub fn build_ak(links: &[usize], eta: &[f64], delta: f64, n_mu: &[Vec<usize>]) -> Result<Vec<f64>> {
    for (&k, &e) in links.iter().zip(eta) {
        if e >= 0.0 {
            return Err(FlownetError::NonnegativeDrift(k + 1, e));
        }
    }
    if links.is_empty() {
        return Ok(Vec::new());
    }
    if delta <= 0.0 {
        return Ok(vec![1.0; links.len()]);
    }
    let big_m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let big_n = links.iter().map(|&k| n_mu[k].len()).max().unwrap_or(0) as f64;
    let level = levels(links, n_mu);
    let appendix = |i: usize| {
        let i = i as f64;
        if delta >= big_m.abs() {
            (-delta * big_n / big_m).powf(i - 1.0)
        } else {
            -delta * big_n.powf(i - 1.0) / big_m
        }
    };
    let mut a: Vec<f64> = level.iter().map(|&i| appendix(i)).collect();
    let mut base = 2.0 * (delta * big_n / big_m.abs()).max(1.0);
    for _ in 0..64 {
        if ak_strict(links, eta, delta, n_mu, &a) {
            return Ok(a);
        }
        a = level.iter().map(|&i| base.powi(i as i32 - 1)).collect();
        base *= 2.0;
    }
    Err(FlownetError::NonnegativeDrift(links[0] + 1, big_m))
}

/// Level 1 for links without unbounded downstream links, then upwards.
fn levels(links: &[usize], n_mu: &[Vec<usize>]) -> Vec<usize> {
    let mut level = vec![0usize; links.len()];
    let mut i = 1;
    while level.contains(&0) {
        let ready: Vec<usize> = (0..links.len())
            .filter(|&x| {
                level[x] == 0
                    && n_mu[links[x]].iter().all(|n| {
                        links
                            .iter()
                            .position(|l| l == n)
                            .is_none_or(|y| level[y] != 0 && level[y] < i)
                    })
            })
            .collect();
        for x in ready {
            level[x] = i;
        }
        i += 1;
    }
    level
}

fn ak_strict(links: &[usize], eta: &[f64], delta: f64, n_mu: &[Vec<usize>], a: &[f64]) -> bool {
    links.iter().enumerate().all(|(x, &k)| {
        let coupling: f64 = n_mu[k]
            .iter()
            .filter_map(|n| links.iter().position(|l| l == n))
            .map(|y| a[y])
            .sum();
        eta[x] * a[x] + delta * coupling < 0.0 && a[x] > 0.0
    })
}

/// `z`, `b`, `a` and `eta` of a drift certificate, by unbounded link.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub links: Vec<usize>,
    /// `z[i][s] = I*_k(s) - O*_k(s)`.
    pub z: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    pub eta: Vec<f64>,
    pub delta: f64,
    pub bks_residual: f64,
}

impl Certificate {
    /// Re-checks every defining property.
    pub fn is_valid(&self, model: &Model, n_mu: &[Vec<usize>]) -> bool {
        let mut ok = self.bks_residual <= BKS_TOL;
        for (i, z) in self.z.iter().enumerate() {
            let mean: f64 = model.p.iter().zip(z).map(|(a, b)| a * b).sum();
            ok &= (mean - self.eta[i]).abs() <= 1e-12 * mean.abs().max(1.0);
            ok &= bks_residual(&model.modes, z, &self.b[i], mean) <= BKS_TOL;
            ok &= self.b[i].iter().all(|&v| v >= 0.0);
        }
        ok && self.eta.iter().all(|&e| e < 0.0) && ak_strict(&self.links, &self.eta, self.delta, n_mu, &self.a)
    }
}

/// Evaluates potentials and drift expressions over one box.
pub struct DriftEval<'a> {
    pub model: &'a Model,
    pub bx: &'a InvariantBox,
    pub structure: &'a BottleneckStructure,
    gamma: Vec<Vec<f64>>,
    top: Vec<f64>,
    ev: FieldEval<'a>,
    g: Vec<f64>,
    x: Vec<f64>,
}

impl<'a> DriftEval<'a> {
    pub fn new(
        model: &'a Model,
        law: &'a ControlLaw,
        alpha: f64,
        bx: &'a InvariantBox,
        structure: &'a BottleneckStructure,
        probe: f64,
    ) -> Self {
        let ratios = max_flow_p1(&model.net, &model.expected_capacities());
        let kk = model.link_count();
        let gamma = (0..kk).map(|m| (0..kk).map(|k| ratios.gamma(m, k)).collect()).collect();
        DriftEval {
            model,
            bx,
            structure,
            gamma,
            top: bx.materialised_upper(model, probe),
            ev: FieldEval::new(model, law, alpha),
            g: vec![0.0; kk],
            x: vec![0.0; kk],
        }
    }

    pub fn gamma(&self, m: usize, k: usize) -> f64 {
        self.gamma[m][k]
    }

    /// `(I_k(s, x), O_k(s, x))`.
    pub fn potentials(&mut self, k: usize, s: usize, x: &[f64]) -> (f64, f64) {
        let dest_out = self.ev.eval(s, x, &mut self.g);
        self.potentials_from_last(k, x, dest_out)
    }

    fn potentials_from_last(&self, k: usize, x: &[f64], dest_out: f64) -> (f64, f64) {
        let net = &self.model.net;
        let q = self.ev.last_q();
        let mut inflow: f64 = self
            .model
            .access
            .m(k)
            .iter()
            .map(|&m| self.gamma[m][k] * self.g[m])
            .sum();
        inflow += net.in_pairs(k).iter().map(|&p| q[p]).sum::<f64>();
        if k == net.origin() {
            inflow += self.ev.alpha;
        }
        let mut outflow = if k == net.destination() {
            dest_out
        } else {
            net.out_pairs(k).iter().map(|&p| q[p]).sum()
        };
        for &n in &self.structure.spill[k] {
            outflow -= rho(self.bx, n, x[n]) * self.g[n];
        }
        (inflow, outflow)
    }

    fn pinned(&self, k: usize) -> f64 {
        self.model.critical(k).max(self.bx.lower[k])
    }

    /// `(I*_k(s), O*_k(s))` by corners plus a uniform grid over the free coordinates.
    pub fn extremal(&mut self, k: usize, s: usize, points: usize, budget: usize) -> Result<(f64, f64)> {
        let st = self.structure;
        let mut free_i: Vec<(usize, (f64, f64))> = st.m_mu[k]
            .iter()
            .map(|&m| (m, (self.bx.lower[m], self.model.critical(m).max(self.bx.lower[m]))))
            .collect();
        free_i.extend(st.m_tilde[k].iter().map(|&m| (m, (self.bx.lower[m], self.top[m]))));
        let free_o: Vec<(usize, (f64, f64))> = st.spill[k]
            .iter()
            .map(|&n| (n, (self.bx.lower[n], self.top[n])))
            .collect();
        for free in [&free_i, &free_o] {
            if free.len() > MAX_FREE_AXES {
                return Err(FlownetError::TooManyFreeCoordinates(free.len(), MAX_FREE_AXES));
            }
        }
        let i_star = self.optimise(k, s, &free_i, points, budget, true);
        let o_star = self.optimise(k, s, &free_o, points, budget, false);
        Ok((i_star, o_star))
    }

    fn optimise(
        &mut self,
        k: usize,
        s: usize,
        free: &[(usize, (f64, f64))],
        points: usize,
        budget: usize,
        inflow: bool,
    ) -> f64 {
        let axes: Vec<(f64, f64)> = free.iter().map(|f| f.1).collect();
        let mut x = std::mem::take(&mut self.x);
        x.copy_from_slice(&self.top);
        x[k] = self.pinned(k);
        let mut best = if inflow { f64::NEG_INFINITY } else { f64::INFINITY };
        for_each_point(&axes, points, budget, |pt| {
            for (i, &(l, _)) in free.iter().enumerate() {
                x[l] = pt[i];
            }
            let (a, b) = self.potentials(k, s, &x);
            best = if inflow { best.max(a) } else { best.min(b) };
        });
        self.x = x;
        best
    }

    /// The spillback drift expression with spillback offsets `b[i][s]`
    /// for the spillback links of `k` (in order).
    fn prop_expression(&mut self, k: usize, s: usize, x: &[f64], b: &[Vec<f64>]) -> f64 {
        self.ev.eval(s, x, &mut self.g);
        let ms = &self.model.modes;
        let mut e = self.g[k];
        e += self
            .model
            .access
            .m(k)
            .iter()
            .map(|&m| self.gamma[m][k] * self.g[m])
            .sum::<f64>();
        for (i, &n) in self.structure.spill[k].iter().enumerate() {
            let r = rho(self.bx, n, x[n]);
            let jump: f64 = (0..ms.mode_count()).map(|t| ms.rate(s, t) * (b[i][t] - b[i][s])).sum();
            e += r * self.g[n] + rho_slope(self.bx, n, x[n]) * self.g[n] * b[i][s] + r * jump;
        }
        e
    }
}

/// Outcome of one drift check at a fixed demand.
#[derive(Debug, Clone, Serialize)]
pub struct DriftCheck {
    pub certified: bool,
    /// Expected drift bound per unbounded link, in `structure.unbounded` order.
    pub drifts: Vec<f64>,
    pub certificate: Option<Certificate>,
}

/// `z_k^s = I*_k(s) - O*_k(s)` for every unbounded link.
fn drift_table(de: &mut DriftEval, opts: &CertifyOptions) -> Result<Vec<Vec<f64>>> {
    let links = de.structure.unbounded.clone();
    let m = de.model.mode_count();
    links
        .iter()
        .map(|&k| {
            (0..m)
                .map(|s| de.extremal(k, s, opts.grid, opts.budget).map(|(i, o)| i - o))
                .collect()
        })
        .collect()
}

fn expected(p: &[f64], z: &[f64]) -> f64 {
    p.iter().zip(z).map(|(a, b)| a * b).sum()
}

/// Drift criterion: every unbounded link must have `sum_s p_s (I*_k(s) - O*_k(s)) < 0`.
/// On success the certificate `(z, b, a)` is attached.
pub fn drift_check(de: &mut DriftEval, alpha: f64, opts: &CertifyOptions) -> Result<DriftCheck> {
    let z = drift_table(de, opts)?;
    let eta: Vec<f64> = z.iter().map(|zk| expected(&de.model.p, zk)).collect();
    let certified = eta.iter().all(|&e| e < 0.0);
    let certificate = if certified {
        Some(certificate(de, alpha, z, &eta)?)
    } else {
        None
    };
    Ok(DriftCheck {
        certified,
        drifts: eta,
        certificate,
    })
}

fn certificate(de: &DriftEval, alpha: f64, z: Vec<Vec<f64>>, eta: &[f64]) -> Result<Certificate> {
    let model = de.model;
    let st = de.structure;
    let bound = 2.0 * model.max_capacity_overall() + alpha;
    let mut delta: f64 = 0.0;
    for &k in &st.unbounded {
        for &n in &st.n_mu[k] {
            delta = delta.max(de.gamma(k, n) * bound);
        }
    }
    let mut b = Vec::with_capacity(z.len());
    let mut residual: f64 = 0.0;
    for zk in &z {
        let (bk, r) = solve_bks(&model.modes, &model.p, zk)?;
        residual = residual.max(r);
        b.push(bk);
    }
    let a = build_ak(&st.unbounded, eta, delta, &st.n_mu)?;
    Ok(Certificate {
        links: st.unbounded.clone(),
        z,
        b,
        a,
        eta: eta.to_vec(),
        delta,
        bks_residual: residual,
    })
}

/// Spillback criterion. Per unbounded link the better of two offset choices is
/// kept: zero spillback offsets, which is the plain drift, and offsets
/// from [`solve_bks`] applied to `G_n` at the upper reference point, checked
/// on a grid over the free coordinates with `x_k` at `x^c_k` and at a probe.
pub fn spillback_check(de: &mut DriftEval, alpha: f64, opts: &CertifyOptions) -> Result<DriftCheck> {
    let base = drift_check(de, alpha, opts)?;
    let model = de.model;
    let st = de.structure;
    let m = model.mode_count();
    let mut drifts = base.drifts.clone();
    for (i, &k) in st.unbounded.iter().enumerate() {
        if drifts[i] < 0.0 {
            continue;
        }
        let mut reference = de.top.clone();
        reference[k] = de.pinned(k);
        let mut b = Vec::new();
        for &n in &st.spill[k] {
            let zn: Vec<f64> = (0..m)
                .map(|s| {
                    de.ev.eval(s, &reference, &mut de.g);
                    de.g[n]
                })
                .collect();
            b.push(solve_bks(&model.modes, &model.p, &zn)?.0);
        }
        let mut free: Vec<(usize, (f64, f64))> = st.m_mu[k]
            .iter()
            .map(|&l| (l, (de.bx.lower[l], model.critical(l).max(de.bx.lower[l]))))
            .collect();
        free.extend(st.m_tilde[k].iter().map(|&l| (l, (de.bx.lower[l], de.top[l]))));
        free.extend(st.spill[k].iter().map(|&l| (l, (de.bx.lower[l], de.top[l]))));
        if free.len() > MAX_FREE_AXES {
            return Err(FlownetError::TooManyFreeCoordinates(free.len(), MAX_FREE_AXES));
        }
        let axes: Vec<(f64, f64)> = free.iter().map(|f| f.1).collect();
        let pin = de.pinned(k);
        let mut value = 0.0;
        for s in 0..m {
            let mut worst = f64::NEG_INFINITY;
            for xk in [pin, pin + opts.probe] {
                let mut x = reference.clone();
                x[k] = xk;
                for_each_point(&axes, opts.prop_grid, opts.budget, |pt| {
                    for (j, &(l, _)) in free.iter().enumerate() {
                        x[l] = pt[j];
                    }
                    worst = worst.max(de.prop_expression(k, s, &x, &b));
                });
            }
            value += model.p[s] * worst;
        }
        drifts[i] = drifts[i].min(value);
    }
    let certified = drifts.iter().all(|&d| d < 0.0);
    Ok(DriftCheck {
        certified,
        drifts,
        certificate: base.certificate,
    })
}

/// Lower bound on the throughput of a density-dependent law whose box
/// bounds every link but the origin and whose desired inflows never exceed
/// receiving flows.
pub fn lower_bound_at(
    model: &Model,
    law: &ControlLaw,
    bx: &InvariantBox,
    structure: &BottleneckStructure,
    opts: &CertifyOptions,
) -> Result<f64> {
    lower_bound_structure(model, law, bx, structure, opts.probe)?;
    lower_bound_value(model, law, bx, structure, opts)
}

/// Checks the restrictions the lower bound needs: every link other than the
/// origin bounded, and controlled inflow never above the receiving flow.
pub fn lower_bound_structure(
    model: &Model,
    law: &ControlLaw,
    bx: &InvariantBox,
    structure: &BottleneckStructure,
    probe: f64,
) -> Result<()> {
    let origin = model.net.origin();
    if structure.unbounded.iter().any(|&k| k != origin) {
        return Err(FlownetError::StructureViolated(format!(
            "links {:?} are unbounded",
            structure
                .unbounded
                .iter()
                .filter(|&&k| k != origin)
                .map(|k| k + 1)
                .collect::<Vec<_>>()
        )));
    }
    check_inflow_below_receiving(model, law, bx, probe)
}

/// The lower-bound expression itself, without the structural checks.
pub fn lower_bound_value(
    model: &Model,
    law: &ControlLaw,
    bx: &InvariantBox,
    structure: &BottleneckStructure,
    opts: &CertifyOptions,
) -> Result<f64> {
    let net = &model.net;
    let origin = net.origin();
    let top = bx.materialised_upper(model, opts.probe);
    let free: Vec<usize> = structure.spill[origin].clone();
    if free.len() > MAX_FREE_AXES {
        return Err(FlownetError::TooManyFreeCoordinates(free.len(), MAX_FREE_AXES));
    }
    let axes: Vec<(f64, f64)> = free.iter().map(|&l| (bx.lower[l], top[l])).collect();
    let kk = net.link_count();
    let mut obs = vec![0.0; kk];
    let mut mu = vec![0.0; net.pair_count()];
    let mut bound = 0.0;
    for s in 0..model.mode_count() {
        let mut x = top.clone();
        x[origin] = model.critical(origin).max(bx.lower[origin]);
        let mut best = f64::INFINITY;
        for_each_point(&axes, opts.grid, opts.budget, |pt| {
            for (i, &l) in free.iter().enumerate() {
                x[l] = pt[i];
            }
            model.modes.observe_into(s, &x, &mut obs);
            law.evaluate(model, s, &x, &obs, &mut mu);
            let sent = |k: usize, p: usize| {
                let total: f64 = net.out_pairs(k).iter().map(|&o| mu[o]).sum();
                if mu[p] <= 0.0 {
                    0.0
                } else {
                    mu[p].min(mu[p] / total * model.sending(k, s, x[k]))
                }
            };
            let out_of = |k: usize| -> f64 {
                if k == net.destination() {
                    model.sending(k, s, x[k])
                } else {
                    net.out_pairs(k).iter().map(|&p| sent(k, p)).sum()
                }
            };
            let mut v = out_of(origin);
            for &n in &free {
                let inflow: f64 = net.in_pairs(n).iter().map(|&p| sent(net.pairs()[p].0, p)).sum();
                v -= rho(bx, n, x[n]) * (inflow - out_of(n));
            }
            best = best.min(v);
        });
        bound += model.p[s] * best;
    }
    Ok(bound)
}

/// Outcome of the lower-bound search.
#[derive(Debug, Clone)]
pub struct LowerBound {
    /// Largest demand not above the bound evaluated on its own box.
    pub alpha: f64,
    /// Bound value at that demand.
    pub bound: f64,
    /// First structural restriction that fails on that box, if any. The
    /// value is then an evaluation of the expression, not a guarantee.
    pub violation: Option<String>,
}

/// Largest demand `alpha` with `alpha` at most the lower-bound expression on
/// a box built at `alpha` with the origin left unbounded.
pub fn dd_lower_bound(model: &Model, law: &ControlLaw, opts: &CertifyOptions) -> Result<LowerBound> {
    let origin = model.net.origin();
    let bound_at = |alpha: f64| -> Result<LowerBound> {
        let mut bx = build_generic_box(model, law, alpha, opts.probe, 2, true, &[origin])?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x7e40 ^ alpha.to_bits());
        if !verify_box(model, law, alpha, &bx, opts.box_samples, opts.probe, &mut rng).passed() {
            bx = build_generic_box(model, law, alpha, opts.probe, REFINED_FACE_POINTS, false, &[origin])?;
        }
        let st = bottleneck_structure(model, &bx, opts.probe);
        let violation = match lower_bound_structure(model, law, &bx, &st, opts.probe) {
            Ok(()) => None,
            Err(FlownetError::StructureViolated(m)) => Some(m),
            Err(e) => return Err(e),
        };
        let bound = lower_bound_value(model, law, &bx, &st, opts)?;
        Ok(LowerBound {
            alpha,
            bound,
            violation,
        })
    };
    let first = bound_at(0.0)?;
    if first.bound <= 0.0 {
        return Ok(LowerBound { alpha: 0.0, ..first });
    }
    let (mut lo, mut hi) = (0.0, capacity_summary(model).mecc + 1.0);
    let mut best = first;
    while hi - lo > opts.tol {
        let mid = 0.5 * (lo + hi);
        let at = bound_at(mid)?;
        if at.bound >= mid {
            lo = mid;
            best = at;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

fn check_inflow_below_receiving(model: &Model, law: &ControlLaw, bx: &InvariantBox, probe: f64) -> Result<()> {
    let net = &model.net;
    let top = bx.materialised_upper(model, probe);
    let mut obs = vec![0.0; net.link_count()];
    let mut mu = vec![0.0; net.pair_count()];
    let mut violation = None;
    let mut check = |x: &[f64]| {
        for s in 0..model.mode_count() {
            model.modes.observe_into(s, x, &mut obs);
            law.evaluate(model, s, x, &obs, &mut mu);
            for k in 0..net.link_count() {
                if k == net.origin() {
                    continue;
                }
                let inflow: f64 = net.in_pairs(k).iter().map(|&p| mu[p]).sum();
                let r = model.receiving(k, s, x[k]);
                if inflow > r + 1e-9 && violation.is_none() {
                    violation = Some((k, s, inflow, r));
                }
            }
        }
    };
    box_corners(bx, &top, &mut check);
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e4);
    let mut x = vec![0.0; net.link_count()];
    for _ in 0..2000 {
        for l in 0..x.len() {
            x[l] = rng.random_range(bx.lower[l]..=top[l]);
        }
        check(&x);
    }
    match violation {
        None => Ok(()),
        Some((k, s, inflow, r)) => Err(FlownetError::StructureViolated(format!(
            "desired inflow {inflow:.4} exceeds receiving flow {r:.4} on link {} in mode {}",
            k + 1,
            s + 1
        ))),
    }
}

/// A box ready for the drift checks.
#[derive(Debug, Clone, Serialize)]
pub struct PreparedBox {
    pub bx: InvariantBox,
    /// How the box was obtained; a closed form that failed verification
    /// falls back to [`BoxMethod::Monotone`].
    pub method: BoxMethod,
    pub verified: bool,
}

/// Builds and verifies the box for `law` at `alpha`.
pub fn prepare_box(
    model: &Model,
    law: &ControlLaw,
    alpha: f64,
    method: BoxMethod,
    opts: &CertifyOptions,
) -> Result<PreparedBox> {
    let (bx, method) = match build_box(model, law, alpha, method, opts.probe) {
        Ok(bx) => (bx, method),
        Err(FlownetError::StructureViolated(_)) => {
            (build_monotone_box(model, law, alpha, opts.probe)?, BoxMethod::Monotone)
        }
        Err(e) => return Err(e),
    };
    Ok(verified(model, law, alpha, bx, method, opts))
}

fn verified(
    model: &Model,
    law: &ControlLaw,
    alpha: f64,
    bx: InvariantBox,
    method: BoxMethod,
    opts: &CertifyOptions,
) -> PreparedBox {
    let mut rng = ChaCha8Rng::seed_from_u64(0xb0c5 ^ alpha.to_bits());
    let verified = verify_box(model, law, alpha, &bx, opts.box_samples, opts.probe, &mut rng).passed();
    PreparedBox { bx, method, verified }
}

/// Every box worth trying at `alpha`: the requested construction (when it
/// builds and verifies) followed by the generic one.
fn candidate_boxes(
    model: &Model,
    law: &ControlLaw,
    alpha: f64,
    method: BoxMethod,
    opts: &CertifyOptions,
) -> Result<Vec<PreparedBox>> {
    let mut out = Vec::new();
    if method != BoxMethod::Monotone {
        match build_box(model, law, alpha, method, opts.probe) {
            Ok(bx) => {
                let p = verified(model, law, alpha, bx, method, opts);
                if p.verified {
                    out.push(p);
                }
            }
            Err(FlownetError::StructureViolated(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let bx = build_monotone_box(model, law, alpha, opts.probe)?;
    let generic = verified(model, law, alpha, bx, BoxMethod::Monotone, opts);
    if generic.verified {
        out.push(generic);
    } else {
        let bx = build_generic_box(model, law, alpha, opts.probe, REFINED_FACE_POINTS, false, &[])?;
        out.push(verified(model, law, alpha, bx, BoxMethod::Monotone, opts));
    }
    Ok(out)
}

/// Full check at one demand: box, structure, drift condition.
#[derive(Debug, Clone, Serialize)]
pub struct Assessment {
    pub alpha: f64,
    pub criterion: Criterion,
    pub prepared: PreparedBox,
    pub structure: BottleneckStructure,
    pub check: DriftCheck,
}

impl Assessment {
    pub fn certified(&self) -> bool {
        self.prepared.verified && self.check.certified
    }

    /// Largest expected drift bound, `-inf` when nothing is unbounded and
    /// `+inf` when the box failed verification.
    pub fn worst_drift(&self) -> f64 {
        if !self.prepared.verified {
            return f64::INFINITY;
        }
        self.check.drifts.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Checks `criterion` at `alpha` on each candidate box and keeps the first
/// that certifies, or else the one with the smallest worst drift. Any
/// verified invariant box is admissible, so trying several is sound.
pub fn assess(
    model: &Model,
    law: &ControlLaw,
    alpha: f64,
    method: BoxMethod,
    criterion: Criterion,
    opts: &CertifyOptions,
) -> Result<Assessment> {
    let mut best: Option<Assessment> = None;
    for prepared in candidate_boxes(model, law, alpha, method, opts)? {
        let structure = bottleneck_structure(model, &prepared.bx, opts.probe);
        let check = {
            let mut de = DriftEval::new(model, law, alpha, &prepared.bx, &structure, opts.probe);
            match criterion {
                Criterion::Drift => drift_check(&mut de, alpha, opts)?,
                Criterion::Spillback => spillback_check(&mut de, alpha, opts)?,
            }
        };
        let a = Assessment {
            alpha,
            criterion,
            prepared,
            structure,
            check,
        };
        if a.certified() {
            return Ok(a);
        }
        if best.as_ref().is_none_or(|b| a.worst_drift() < b.worst_drift()) {
            best = Some(a);
        }
    }
    Ok(best.expect("the generic box is always a candidate"))
}

/// Largest demand certified by bisection on `[0, MECC + 1]`, with the
/// assessment at that demand.
pub fn certified_throughput(
    model: &Model,
    law: &ControlLaw,
    method: BoxMethod,
    criterion: Criterion,
    opts: &CertifyOptions,
) -> Result<(f64, Assessment)> {
    let mut lo_assessment = assess(model, law, 0.0, method, criterion, opts)?;
    if !lo_assessment.certified() {
        return Ok((0.0, lo_assessment));
    }
    let (mut lo, mut hi) = (0.0, capacity_summary(model).mecc + 1.0);
    let top = assess(model, law, hi, method, criterion, opts)?;
    if top.certified() {
        return Ok((hi, top));
    }
    while hi - lo > opts.tol {
        let mid = 0.5 * (lo + hi);
        let a = assess(model, law, mid, method, criterion, opts)?;
        if a.certified() {
            lo = mid;
            lo_assessment = a;
        } else {
            hi = mid;
        }
    }
    Ok((lo, lo_assessment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::{synthesize_open_loop, Routing};
    use crate::flow::{LinkFlow, ModedFlow};
    use crate::network::{build_network, Storage};

    fn two_mode() -> ModeSystem {
        ModeSystem::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()
    }

    fn single_link(caps: Vec<f64>, ms: ModeSystem) -> Model {
        let base = LinkFlow::ctm(1.0, 1.0, 1.0, false);
        let net = build_network(vec![Storage::Infinite], &[]).unwrap();
        let flow = ModedFlow::nominal(base, caps.len()).with_send_caps(caps);
        Model::new(net, vec![flow], ms).unwrap()
    }

    fn opts() -> CertifyOptions {
        CertifyOptions {
            box_samples: 2000,
            ..CertifyOptions::default()
        }
    }

    #[test]
    fn rho_ramp() {
        let bx = InvariantBox {
            lower: vec![1.0],
            upper: vec![3.0],
        };
        assert_eq!(rho(&bx, 0, 0.5), 0.0);
        assert_eq!(rho(&bx, 0, 1.0), 0.0);
        assert_eq!(rho(&bx, 0, 2.0), 0.5);
        assert_eq!(rho(&bx, 0, 3.0), 1.0);
        assert_eq!(rho(&bx, 0, 7.0), 1.0);
        assert_eq!(rho_slope(&bx, 0, 3.0), 0.5);
        assert_eq!(rho_slope(&bx, 0, 3.5), 0.0);
    }

    #[test]
    fn bks_two_modes_by_hand() {
        let (b, r) = solve_bks(&two_mode(), &[0.5, 0.5], &[1.0, -1.0]).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12 && b[1].abs() < 1e-12, "{b:?}");
        assert!(r <= 1e-12);
    }

    #[test]
    fn bks_constant_z_gives_zero() {
        let ms = ModeSystem::new(crate::modes::example_rates()).unwrap();
        let (b, r) = solve_bks(&ms, &[0.25; 4], &[0.3; 4]).unwrap();
        assert!(b.iter().all(|v| v.abs() < 1e-12) && r < 1e-12);
    }

    #[test]
    fn ak_delta_nonpositive_is_all_ones() {
        let n_mu = vec![vec![1], vec![]];
        assert_eq!(build_ak(&[0, 1], &[-1.0, -1.0], 0.0, &n_mu).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn ak_chain_doubles() {
        // chain 0 -> 1 -> 2, all unbounded, M = -1, delta = 2, N = 1
        let n_mu = vec![vec![1, 2], vec![2], vec![]];
        let a = build_ak(&[0, 1, 2], &[-1.0; 3], 2.0, &n_mu).unwrap();
        assert!(ak_strict(&[0, 1, 2], &[-1.0; 3], 2.0, &n_mu, &a));
        assert!(a[2] < a[1] && a[1] < a[0]);
    }

    #[test]
    fn ak_single_link() {
        assert_eq!(build_ak(&[0], &[-0.5], 1.0, &[vec![]]).unwrap(), vec![1.0]);
    }

    #[test]
    fn ak_rejects_nonnegative_drift() {
        assert!(matches!(
            build_ak(&[0], &[0.0], 1.0, &[vec![]]),
            Err(FlownetError::NonnegativeDrift(1, _))
        ));
    }

    #[test]
    fn single_link_two_modes_open_loop() {
        let m = single_link(vec![1.0, 0.0], two_mode());
        let law = synthesize_open_loop(&m).0;
        let o = opts();
        let yes = assess(&m, &law, 0.4, BoxMethod::Monotone, Criterion::Drift, &o).unwrap();
        assert!(yes.certified());
        assert!((yes.check.drifts[0] - (0.4 - 0.5)).abs() < 1e-9);
        let cert = yes.check.certificate.as_ref().unwrap();
        assert!(cert.is_valid(&m, &yes.structure.n_mu));
        let no = assess(&m, &law, 0.6, BoxMethod::Monotone, Criterion::Drift, &o).unwrap();
        assert!(!no.certified());
        let (a, _) = certified_throughput(&m, &law, BoxMethod::Monotone, Criterion::Drift, &o).unwrap();
        assert!((a - 0.5).abs() <= o.tol, "{a}");
    }

    #[test]
    fn single_link_constant_capacity() {
        let m = single_link(vec![1.0], ModeSystem::single());
        let law = synthesize_open_loop(&m).0;
        let o = opts();
        let (a, _) = certified_throughput(&m, &law, BoxMethod::Monotone, Criterion::Drift, &o).unwrap();
        assert!((a - 1.0).abs() <= o.tol, "{a}");
    }

    #[test]
    fn zero_demand_certified() {
        let m = single_link(vec![1.0, 0.0], two_mode());
        let law = ControlLaw::Routing(Routing::logit(&m.net, 1.0));
        let a = assess(&m, &law, 0.0, BoxMethod::Monotone, Criterion::Drift, &opts()).unwrap();
        assert!(a.certified());
    }

    #[test]
    fn potentials_identity_on_chain() {
        let st = Storage::Finite { jam: 2.0 };
        let net = build_network(vec![Storage::Infinite, st, st], &[(0, 1), (1, 2)]).unwrap();
        let flows = (0..3)
            .map(|k| {
                ModedFlow::nominal(LinkFlow::ctm(1.0, 1.0, 1.0, k > 0), 2).with_send_caps(if k == 2 {
                    vec![1.0, 0.2]
                } else {
                    vec![f64::INFINITY; 2]
                })
            })
            .collect();
        let m = Model::new(net, flows, two_mode()).unwrap();
        let law = ControlLaw::Routing(Routing::logit(&m.net, 1.0));
        let bx = InvariantBox {
            lower: vec![0.0; 3],
            upper: vec![f64::INFINITY, 2.0, 2.0],
        };
        let st = bottleneck_structure(&m, &bx, 100.0);
        assert_eq!(st.unbounded, vec![0]);
        assert_eq!(st.spill[0], vec![1, 2]);
        let mut de = DriftEval::new(&m, &law, 0.7, &bx, &st, 100.0);
        let x = [3.0, 1.2, 1.7];
        for s in 0..2 {
            let (i, o) = de.potentials(0, s, &x);
            let f = crate::dynamics::vector_field(&m, &law, 0.7, s, &x);
            let want = f.g[0] + st.spill[0].iter().map(|&n| rho(&bx, n, x[n]) * f.g[n]).sum::<f64>();
            assert!((i - o - want).abs() < 1e-12);
        }
    }
}
