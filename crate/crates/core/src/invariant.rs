//! Rectangular invariant sets and their sampled verification.

use rand::Rng;
use serde::Serialize;

use crate::controls::ControlLaw;
use crate::dynamics::FieldEval;
use crate::error::{FlownetError, Result};
use crate::flow::SendingFamily;
use crate::grid::for_each_point;
use crate::model::Model;

/// Default offset above `x^c` used wherever an infinite upper bound must be
/// turned into a concrete density.
pub const DEFAULT_PROBE: f64 = 100.0;
const FACE_TOL: f64 = 1e-9;
/// Builders aim well inside the verification tolerance.
/// Multiple of the probe used to detect probe-dependent upper faces.
const FAR_PROBE: f64 = 10.0;
/// Grid evaluations per face in the refined construction.
const FACE_BUDGET: usize = 4096;
const BUILD_TOL: f64 = 1e-12;
const DAMPING: f64 = 0.5;
const FIXED_POINT_ITERS: usize = 100_000;
const FIXED_POINT_TOL: f64 = 1e-10;

/// `prod_k [lower_k, upper_k]`, with `upper_k` possibly infinite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InvariantBox {
    /// The whole state space.
    pub fn full(model: &Model) -> Self {
        InvariantBox {
            lower: vec![0.0; model.link_count()],
            upper: (0..model.link_count()).map(|k| model.jam(k)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// Links with an infinite upper bound.
    pub fn unbounded(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.upper[k].is_infinite()).collect()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&v, (&lo, &hi))| v >= lo - tol && v <= hi + tol)
    }

    /// Upper bound with infinity replaced by `max(x^c, lower) + probe`.
    pub fn upper_or_probe(&self, model: &Model, k: usize, probe: f64) -> f64 {
        if self.upper[k].is_finite() {
            self.upper[k]
        } else {
            model.critical(k).max(self.lower[k]) + probe
        }
    }

    /// The box with every infinite bound replaced by its probe value.
    pub fn materialised_upper(&self, model: &Model, probe: f64) -> Vec<f64> {
        (0..self.len()).map(|k| self.upper_or_probe(model, k, probe)).collect()
    }
}

/// How boxes are built for a control law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoxMethod {
    /// Closed-form box of the logit routing on the example network.
    Logit { nu: f64 },
    /// Receiving-flow bound for mode-dependent controls.
    ModeDependent,
    /// Face-wise bisection for any cooperative law.
    Monotone,
}

/// Sample budget used by [`build_box`] to check closed-form boxes.
pub const CLOSED_FORM_SAMPLES: usize = 10_000;

/// Builds a box for `law` at demand `alpha`.
///
/// Closed-form boxes are checked with [`verify_box`] before being returned;
/// one that is not invariant is reported as `StructureViolated`.
pub fn build_box(model: &Model, law: &ControlLaw, alpha: f64, method: BoxMethod, probe: f64) -> Result<InvariantBox> {
    use rand::SeedableRng;
    let bx = match method {
        BoxMethod::Logit { nu } => build_logit_box(model, alpha, nu)?,
        BoxMethod::ModeDependent => build_md_box(model, law)?,
        BoxMethod::Monotone => return build_monotone_box(model, law, alpha, probe),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xb0c5);
    let check = verify_box(model, law, alpha, &bx, CLOSED_FORM_SAMPLES, probe, &mut rng);
    match check.witness {
        None => Ok(bx),
        Some(w) => Err(FlownetError::StructureViolated(format!(
            "closed-form box is not invariant: G_{} = {:.3e} on the {} face in mode {}",
            w.link + 1,
            w.g,
            if w.upper_face { "upper" } else { "lower" },
            w.mode + 1
        ))),
    }
}

fn damped_fixed_point<F: Fn(f64) -> f64>(phi: F, x0: f64, what: &'static str) -> Result<f64> {
    let mut x = x0;
    for _ in 0..FIXED_POINT_ITERS {
        let next = (1.0 - DAMPING) * x + DAMPING * phi(x);
        if !next.is_finite() {
            return Err(FlownetError::FixedPointDiverged(what));
        }
        if (next - x).abs() <= FIXED_POINT_TOL {
            return Ok(next);
        }
        x = next;
    }
    Err(FlownetError::FixedPointDiverged(what))
}

const EXAMPLE_PAIRS: [(usize, usize); 8] = [(0, 1), (0, 4), (1, 2), (1, 3), (2, 6), (3, 5), (4, 5), (5, 6)];

/// Box for the logit routing of the seven-link example network.
///
/// Disruption flags are read off the model: a sensor fault on link 5 turns
/// on the cyber case, a mode with reduced capacity on link 6 the physical
/// case, and finite storage on link 2 the finite case.
pub fn build_logit_box(model: &Model, alpha: f64, nu: f64) -> Result<InvariantBox> {
    let net = &model.net;
    if net.link_count() != 7 || net.pairs() != EXAMPLE_PAIRS {
        return Err(FlownetError::Scenario(
            "the logit box needs the seven-link example network".into(),
        ));
    }
    let v = match model.flows[0].base.sending {
        SendingFamily::Ctm { v, .. } => v,
        _ => {
            return Err(FlownetError::Scenario(
                "the logit box needs a CTM sending flow on link 1".into(),
            ))
        }
    };
    let f: Vec<f64> = model.flows.iter().map(|fl| fl.capacity()).collect();
    let cyber = (0..model.mode_count()).any(|s| model.modes.sensor_faults(s).iter().any(|&(k, _)| k == 4));
    let f6_min = (0..model.mode_count())
        .map(|s| model.mode_capacities(s)[5])
        .fold(f64::INFINITY, f64::min);
    let f6_max = model.max_capacity(5);
    let f5_max = model.max_capacity(4);
    let physical = f6_min < f[5];
    let finite = net.storage(1).is_finite();
    let e = |x: f64| (-nu * x).exp();

    let mut lo = vec![0.0; 7];
    lo[0] = alpha / v;
    let a = (v * lo[0]).min(f[0]);
    if cyber {
        let w2 = damped_fixed_point(|w| a * e(w) / (e(w) + 1.0) / v, 0.0, "omega_2")?;
        let w5 = damped_fixed_point(|w| a * e(w) / (e(w2) + e(w)) / v, 0.0, "omega_5")?;
        lo[1] = w2;
        lo[4] = w5;
    } else {
        lo[1] = a / (2.0 * v);
        lo[4] = lo[1];
    }
    lo[2] = (v * lo[1]).min(f[1]) / (2.0 * v);
    lo[3] = lo[2];
    lo[5] = ((v * lo[3]).min(f[3]) + (v * lo[4]).min(f[4])) / v;
    lo[6] = ((v * lo[2]).min(f[2]) + (v * lo[5]).min(f6_min)) / v;

    let mut hi = vec![f64::INFINITY; 7];
    if finite && physical {
        for k in [1, 3, 4, 5] {
            hi[k] = model.jam(k);
        }
        for k in [2, 6] {
            hi[k] = model.critical(k);
        }
    } else {
        if cyber {
            // x1 is unbounded, so link 1 may send its full capacity.
            let a = f[0];
            let s2p = damped_fixed_point(|s| a * e(s) / (e(s) + 1.0) / v, 0.0, "sigma_2'")?;
            let s5 = a / (e(s2p) + 1.0) / v;
            let s2 = damped_fixed_point(|s| a * e(s) / (e(s) + e(s5)) / v, 0.0, "sigma_2")?;
            hi[1] = s2;
            hi[4] = s5;
        } else {
            hi[1] = f[0] / (2.0 * v);
            hi[4] = hi[1];
        }
        hi[2] = (v * hi[1]).min(f[1]) / (2.0 * v);
        hi[3] = hi[2];
        let f6_bar = (v * hi[3]).min(f[3]) + (v * hi[4]).min(f5_max);
        hi[5] = if f6_bar < f6_min { f6_bar / v } else { f64::INFINITY };
        let f7_bar = (v * hi[2]).min(f[2]) + (v * hi[5]).min(f6_max);
        let f7_min = (0..model.mode_count())
            .map(|s| model.mode_capacities(s)[6])
            .fold(f64::INFINITY, f64::min);
        hi[6] = if f7_bar <= f7_min { f7_bar / v } else { f64::INFINITY };
    }
    for k in 0..7 {
        hi[k] = hi[k].min(model.jam(k)).max(lo[k]);
    }
    Ok(InvariantBox { lower: lo, upper: hi })
}

/// Box for a mode-dependent control: `x̄_k = min_s sup{x : inflow_k(s) <= r_k(s, x)}`
/// on finite links, `x^c_k` on infinite ones, `∞` at the origin.
pub fn build_md_box(model: &Model, law: &ControlLaw) -> Result<InvariantBox> {
    let table = match law {
        ControlLaw::ModeDependent(t) => t,
        _ => return Err(FlownetError::InvalidControl("md box needs a mode-dependent law".into())),
    };
    let net = &model.net;
    let kk = net.link_count();
    let mut hi = vec![f64::INFINITY; kk];
    for &k in net.topo_order().iter().rev() {
        if k == net.origin() {
            continue;
        }
        if !net.storage(k).is_finite() {
            hi[k] = model.critical(k);
            continue;
        }
        let mut bound = model.jam(k);
        for (s, mu) in table.iter().enumerate() {
            let inflow: f64 = net.in_pairs(k).iter().map(|&p| mu[p]).sum();
            bound = bound.min(sup_receiving_at_least(model, k, s, inflow));
        }
        hi[k] = bound.max(model.critical(k).min(model.jam(k)));
    }
    Ok(InvariantBox {
        lower: vec![0.0; kk],
        upper: hi,
    })
}

/// `sup{x in [0, jam] : r_k(s, x) >= level}` by bisection (r is non-increasing).
fn sup_receiving_at_least(model: &Model, k: usize, s: usize, level: f64) -> f64 {
    let jam = model.jam(k);
    if model.receiving(k, s, jam) >= level {
        return jam;
    }
    if model.receiving(k, s, 0.0) < level {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, jam);
    while hi - lo > 1e-12 * jam.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if model.receiving(k, s, mid) >= level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Links whose density changes `G_k` somewhere, found by random probing.
fn field_dependencies(model: &Model, law: &ControlLaw, alpha: f64, probe: f64) -> Vec<Vec<usize>> {
    use rand::SeedableRng;
    let kk = model.link_count();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let mut ev = FieldEval::new(model, law, alpha);
    let mut deps = vec![vec![false; kk]; kk];
    let extent: Vec<f64> = (0..kk)
        .map(|k| {
            if model.jam(k).is_finite() {
                model.jam(k)
            } else {
                model.critical(k) + probe
            }
        })
        .collect();
    let mut ga = vec![0.0; kk];
    let mut gb = vec![0.0; kk];
    // Most samples stay near the critical densities, where saturating
    // controls still respond.
    let local: Vec<f64> = (0..kk).map(|k| extent[k].min(4.0 * model.critical(k) + 1.0)).collect();
    for n in 0..96 {
        let scale = if n % 4 == 0 { &extent } else { &local };
        let x: Vec<f64> = scale.iter().map(|&e| rng.random_range(0.0..=e)).collect();
        for s in 0..model.mode_count() {
            ev.eval(s, &x, &mut ga);
            for l in 0..kk {
                let mut y = x.clone();
                y[l] = rng.random_range(0.0..=scale[l]);
                ev.eval(s, &y, &mut gb);
                for k in 0..kk {
                    if (ga[k] - gb[k]).abs() > 1e-12 {
                        deps[k][l] = true;
                    }
                }
            }
        }
    }
    for k in 0..kk {
        for &j in model.net.outs(k).iter().chain(model.net.ins(k)) {
            deps[k][j] = true;
        }
    }
    (0..kk)
        .map(|k| (0..kk).filter(|&l| l != k && deps[k][l]).collect())
        .collect()
}

/// Extremes of `G_k` over all modes at the corners of the box in the
/// coordinates `deps`, with `x_k = c` and the rest at the box midpoint.
/// With `points > 2` a uniform grid over `deps` is added, for fields that
/// are not monotone in every coordinate.
#[allow(clippy::too_many_arguments)]
fn face_extremes(
    ev: &mut FieldEval,
    k: usize,
    c: f64,
    deps: &[usize],
    points: usize,
    lo: &[f64],
    hi: &[f64],
    x: &mut [f64],
    g: &mut [f64],
) -> (f64, f64) {
    let model = ev.model;
    let (mut gmin, mut gmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for l in 0..x.len() {
        x[l] = 0.5 * (lo[l] + hi[l]);
    }
    x[k] = c;
    let axes: Vec<(f64, f64)> = deps.iter().map(|&l| (lo[l], hi[l])).collect();
    for_each_point(&axes, points, FACE_BUDGET, |pt| {
        for (i, &l) in deps.iter().enumerate() {
            x[l] = pt[i];
        }
        for s in 0..model.mode_count() {
            ev.eval(s, x, g);
            gmin = gmin.min(g[k]);
            gmax = gmax.max(g[k]);
        }
    });
    (gmin, gmax)
}

fn probe_tops(model: &Model, lo: &[f64], hi: &[f64], probe: f64) -> Vec<f64> {
    (0..lo.len())
        .map(|k| {
            if hi[k].is_finite() {
                hi[k]
            } else {
                model.critical(k).max(lo[k]) + probe
            }
        })
        .collect()
}

/// Largest `c` in `[lo_k, top_k]` with `G_k >= 0` over the face `x_k = c`.
#[allow(clippy::too_many_arguments)]
fn raise_lower(
    ev: &mut FieldEval,
    k: usize,
    deps: &[usize],
    points: usize,
    lo: &[f64],
    top: &[f64],
    x: &mut [f64],
    g: &mut [f64],
) -> f64 {
    let mut ok = |c: f64| face_extremes(ev, k, c, deps, points, lo, top, x, g).0 >= -BUILD_TOL;
    let (mut a, mut b) = (lo[k], top[k]);
    if ok(b) {
        return b;
    }
    while b - a > 1e-10 * b.max(1.0) {
        let m = 0.5 * (a + b);
        if ok(m) {
            a = m;
        } else {
            b = m;
        }
    }
    a
}

/// Smallest `c` in `[from, to]` with `G_k <= 0` over the face `x_k = c`,
/// or `None` if even `to` fails.
#[allow(clippy::too_many_arguments)]
fn least_upper(
    ev: &mut FieldEval,
    k: usize,
    deps: &[usize],
    points: usize,
    lo: &[f64],
    top: &[f64],
    (from, to): (f64, f64),
    x: &mut [f64],
    g: &mut [f64],
) -> Option<f64> {
    let mut ok = |c: f64| face_extremes(ev, k, c, deps, points, lo, top, x, g).1 <= BUILD_TOL;
    let (mut a, mut b) = (from, to);
    if ok(a) {
        return Some(a);
    }
    if !ok(b) {
        return None;
    }
    while b - a > 1e-10 * b.max(1.0) {
        let m = 0.5 * (a + b);
        if ok(m) {
            b = m;
        } else {
            a = m;
        }
    }
    Some(b)
}

/// Generic box for any cooperative law.
///
/// Lower faces are raised while `G_k >= 0` holds over the face against the
/// whole state space. Upper faces then grow from the lower corner until
/// `G_k <= 0` holds on each of them, giving the least invariant box above
/// the lower bounds; links that cannot be bounded below the probe become
/// unbounded. Extremes over a face are taken at corners of the coordinates
/// `G_k` depends on, which is exact for cooperative fields.
pub fn build_monotone_box(model: &Model, law: &ControlLaw, alpha: f64, probe: f64) -> Result<InvariantBox> {
    build_generic_box(model, law, alpha, probe, 2, true, &[])
}

/// [`build_monotone_box`] with face extremes taken over a grid of `points`
/// per dependent coordinate instead of corners only. Without `raise` the
/// lower faces stay at zero, where no link can lose mass. Links in `open`
/// keep their full range.
pub fn build_generic_box(
    model: &Model,
    law: &ControlLaw,
    alpha: f64,
    probe: f64,
    points: usize,
    raise: bool,
    open: &[usize],
) -> Result<InvariantBox> {
    let kk = model.link_count();
    let deps = field_dependencies(model, law, alpha, probe);
    if let Some(d) = deps.iter().find(|d| d.len() > 14) {
        return Err(FlownetError::TooManyFreeCoordinates(d.len(), 14));
    }
    let mut ev = FieldEval::new(model, law, alpha);
    let mut x = vec![0.0; kk];
    let mut g = vec![0.0; kk];
    let full: Vec<f64> = (0..kk).map(|k| model.jam(k)).collect();
    let mut lo = vec![0.0; kk];
    if raise {
        raise_lowers(model, &mut ev, &deps, points, &mut lo, &full, probe, &mut x, &mut g);
    }

    // Uppers that only hold because unbounded neighbours sit at the probe
    // are released and the sweep restarts.
    let mut released = vec![false; kk];
    for &k in open {
        released[k] = true;
    }
    let hi = loop {
        let mut hi: Vec<f64> = (0..kk).map(|k| if released[k] { full[k] } else { lo[k] }).collect();
        let mut converged = false;
        for _sweep in 0..500 {
            let mut moved = 0.0f64;
            for k in 0..kk {
                if hi[k].is_infinite() {
                    continue;
                }
                let top = probe_tops(model, &lo, &hi, probe);
                let limit = if full[k].is_finite() {
                    full[k]
                } else {
                    model.critical(k).max(lo[k]) + probe
                };
                match least_upper(&mut ev, k, &deps[k], points, &lo, &top, (hi[k], limit), &mut x, &mut g) {
                    Some(c) => {
                        moved = moved.max(c - hi[k]);
                        hi[k] = c;
                    }
                    None => {
                        moved = f64::INFINITY;
                        hi[k] = full[k];
                    }
                }
            }
            if moved <= 1e-9 {
                converged = true;
                break;
            }
        }
        if !converged {
            hi = greatest_uppers(model, &mut ev, &deps, points, &lo, &full, probe, &mut x, &mut g);
        }
        let far = probe_tops(model, &lo, &hi, FAR_PROBE * probe);
        let mut changed = false;
        for k in 0..kk {
            if hi[k] < full[k]
                && face_extremes(&mut ev, k, hi[k], &deps[k], points, &lo, &far, &mut x, &mut g).1 > BUILD_TOL
            {
                released[k] = true;
                changed = true;
            }
        }
        if !changed {
            break hi;
        }
    };
    if raise {
        raise_lowers(model, &mut ev, &deps, points, &mut lo, &hi, probe, &mut x, &mut g);
    }
    Ok(InvariantBox { lower: lo, upper: hi })
}

#[allow(clippy::too_many_arguments)]
fn raise_lowers(
    model: &Model,
    ev: &mut FieldEval,
    deps: &[Vec<usize>],
    points: usize,
    lo: &mut [f64],
    hi: &[f64],
    probe: f64,
    x: &mut [f64],
    g: &mut [f64],
) {
    for _sweep in 0..200 {
        let mut moved = 0.0f64;
        for k in 0..lo.len() {
            let top = probe_tops(model, lo, hi, probe);
            let raised = raise_lower(ev, k, &deps[k], points, lo, &top, x, g);
            if hi[k].is_finite() || raised < top[k] {
                moved = moved.max(raised - lo[k]);
                lo[k] = raised;
            }
        }
        if moved <= 1e-9 {
            break;
        }
    }
}

/// Upper faces lowered from the full space while they stay invariant.
#[allow(clippy::too_many_arguments)]
fn greatest_uppers(
    model: &Model,
    ev: &mut FieldEval,
    deps: &[Vec<usize>],
    points: usize,
    lo: &[f64],
    full: &[f64],
    probe: f64,
    x: &mut [f64],
    g: &mut [f64],
) -> Vec<f64> {
    let mut hi = full.to_vec();
    for _sweep in 0..200 {
        let mut moved = 0.0f64;
        for k in 0..hi.len() {
            let top = probe_tops(model, lo, &hi, probe);
            if let Some(b) = least_upper(ev, k, &deps[k], points, lo, &top, (lo[k], top[k]), x, g) {
                let old = if hi[k].is_finite() { hi[k] } else { top[k] + 1.0 };
                moved = moved.max(old - b);
                hi[k] = b;
            }
        }
        if moved <= 1e-9 {
            break;
        }
    }
    hi
}

/// A boundary point where the field points outwards.
#[derive(Debug, Clone, Serialize)]
pub struct BoxWitness {
    pub mode: usize,
    pub link: usize,
    pub upper_face: bool,
    pub state: Vec<f64>,
    pub g: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoxVerification {
    pub samples: usize,
    pub witness: Option<BoxWitness>,
}

impl BoxVerification {
    pub fn passed(&self) -> bool {
        self.witness.is_none()
    }
}

/// Samples boundary points of every face (random interior coordinates, a
/// quarter of them snapped to corners) and checks the field points inwards
/// in every mode.
pub fn verify_box<R: Rng + ?Sized>(
    model: &Model,
    law: &ControlLaw,
    alpha: f64,
    bx: &InvariantBox,
    samples: usize,
    probe: f64,
    rng: &mut R,
) -> BoxVerification {
    let kk = model.link_count();
    let top = bx.materialised_upper(model, probe);
    let mut ev = FieldEval::new(model, law, alpha);
    let mut x = vec![0.0; kk];
    let mut g = vec![0.0; kk];
    for n in 0..samples {
        let k = n % kk;
        let upper_face = bx.upper[k].is_finite() && rng.random_bool(0.5);
        for l in 0..kk {
            let (a, b) = (bx.lower[l], top[l]);
            x[l] = if rng.random_bool(0.25) {
                if rng.random_bool(0.5) {
                    b
                } else {
                    a
                }
            } else {
                a + (b - a) * rng.random::<f64>()
            };
        }
        x[k] = if upper_face { bx.upper[k] } else { bx.lower[k] };
        for s in 0..model.mode_count() {
            ev.eval(s, &x, &mut g);
            let bad = if upper_face { g[k] > FACE_TOL } else { g[k] < -FACE_TOL };
            if bad {
                return BoxVerification {
                    samples: n + 1,
                    witness: Some(BoxWitness {
                        mode: s,
                        link: k,
                        upper_face,
                        state: x.clone(),
                        g: g[k],
                    }),
                };
            }
        }
    }
    BoxVerification { samples, witness: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::synthesize_mode_dependent;
    use crate::flow::{LinkFlow, ModedFlow};
    use crate::modes::ModeSystem;
    use crate::network::{build_network, Storage};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(finite: bool, caps: Vec<f64>, rates: Vec<Vec<f64>>) -> Model {
        let base = LinkFlow::ctm(1.0, 1.0, 1.0, finite);
        let net = build_network(vec![base.storage], &[]).unwrap_or_else(|_| unreachable!());
        let m = caps.len();
        let flow = ModedFlow::nominal(base, m).with_send_caps(caps);
        let ms = if m == 1 {
            ModeSystem::single()
        } else {
            ModeSystem::new(rates).unwrap()
        };
        Model::new(net, vec![flow], ms).unwrap()
    }

    fn chain(finite: bool) -> Model {
        let st = if finite {
            Storage::Finite { jam: 2.0 }
        } else {
            Storage::Infinite
        };
        let net = build_network(vec![Storage::Infinite, st, st], &[(0, 1), (1, 2)]).unwrap();
        let flows = (0..3)
            .map(|k| ModedFlow::nominal(LinkFlow::ctm(1.0, 1.0, 1.0, finite && k > 0), 1))
            .collect();
        Model::new(net, flows, ModeSystem::single()).unwrap()
    }

    #[test]
    fn full_space_verifies() {
        let m = chain(true);
        let law = ControlLaw::Routing(crate::controls::Routing::logit(&m.net, 1.0));
        let bx = InvariantBox::full(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(verify_box(&m, &law, 0.7, &bx, 2000, DEFAULT_PROBE, &mut rng).passed());
    }

    #[test]
    fn shrunken_box_fails_with_witness() {
        let m = chain(false);
        let law = ControlLaw::Routing(crate::controls::Routing::logit(&m.net, 1.0));
        let bx = InvariantBox {
            lower: vec![0.0; 3],
            upper: vec![f64::INFINITY, 0.1, f64::INFINITY],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = verify_box(&m, &law, 0.7, &bx, 1000, DEFAULT_PROBE, &mut rng);
        let w = v.witness.expect("witness");
        assert_eq!(w.link, 1);
        assert!(w.upper_face && w.g > 0.0);
    }

    #[test]
    fn monotone_box_chain() {
        let m = chain(false);
        let law = ControlLaw::Routing(crate::controls::Routing::logit(&m.net, 1.0));
        let bx = build_monotone_box(&m, &law, 0.5, DEFAULT_PROBE).unwrap();
        // x1 settles at alpha / v; downstream links carry 0.5 at density 0.5
        for k in 0..3 {
            assert!((bx.lower[k] - 0.5).abs() < 1e-8, "{bx:?}");
            assert!((bx.upper[k] - 0.5).abs() < 1e-8, "{bx:?}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(verify_box(&m, &law, 0.5, &bx, 3000, DEFAULT_PROBE, &mut rng).passed());
    }

    #[test]
    fn monotone_box_zero_demand_collapses() {
        let m = chain(true);
        let law = ControlLaw::Routing(crate::controls::Routing::logit(&m.net, 1.0));
        let bx = build_monotone_box(&m, &law, 0.0, DEFAULT_PROBE).unwrap();
        assert!(bx.upper.iter().all(|&u| u.abs() < 1e-8));
    }

    #[test]
    fn monotone_box_keeps_origin_unbounded_when_capacity_can_vanish() {
        let m = single(false, vec![1.0, 0.0], vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let law = ControlLaw::OpenLoop(vec![]);
        let bx = build_monotone_box(&m, &law, 0.3, DEFAULT_PROBE).unwrap();
        assert!(bx.upper[0].is_infinite());
    }

    #[test]
    fn md_box_inverts_linear_receiving() {
        // inflow 0.5 into a link with r = 1 - (x - 1) gives x̄ = 1.5
        let st = Storage::Finite { jam: 2.0 };
        let net = build_network(vec![Storage::Infinite, st], &[(0, 1)]).unwrap();
        let flows = vec![
            ModedFlow::nominal(LinkFlow::ctm(1.0, 0.5, 1.0, false), 1),
            ModedFlow::nominal(LinkFlow::ctm(1.0, 1.0, 1.0, true), 1),
        ];
        let m = Model::new(net, flows, ModeSystem::single()).unwrap();
        let law = synthesize_mode_dependent(&m);
        let bx = build_md_box(&m, &law).unwrap();
        assert!((bx.upper[1] - 1.5).abs() < 1e-9, "{bx:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(verify_box(&m, &law, 0.4, &bx, 4000, DEFAULT_PROBE, &mut rng).passed());
    }

    #[test]
    fn md_box_infinite_storage_is_finite() {
        let m = chain(false);
        let law = synthesize_mode_dependent(&m);
        let bx = build_md_box(&m, &law).unwrap();
        assert!(bx.upper[0].is_infinite());
        assert!(bx.upper[1].is_finite() && bx.upper[2].is_finite());
    }

    #[test]
    fn fixed_point_converges() {
        let x = damped_fixed_point(|x| 0.5 * (-x).exp(), 0.0, "t").unwrap();
        assert!((x - 0.5 * (-x).exp()).abs() < 1e-9);
    }

    #[test]
    fn fixed_point_reports_divergence() {
        assert!(matches!(
            damped_fixed_point(|x| 3.0 * x + 1.0, 0.0, "t"),
            Err(FlownetError::FixedPointDiverged("t"))
        ));
    }
}
