//! Random instances and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use flownet::controls::{synthesize_mode_dependent, synthesize_open_loop, Routing};
use flownet::flow::{LinkFlow, ModedFlow};
use flownet::invariant::BoxMethod;
use flownet::modes::ModeSystem;
use flownet::{build_network, ControlLaw, Model, Storage};
use rand::Rng;

/// Edges of a random DAG on `k` links in topological order, with link 0 the
/// only source and link `k - 1` the only sink.
pub fn random_dag<R: Rng>(rng: &mut R, k: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for j in 1..k {
        edges.push((rng.random_range(0..j), j));
    }
    for i in 0..k.saturating_sub(1) {
        if !edges.iter().any(|&(a, _)| a == i) {
            edges.push((i, rng.random_range(i + 1..k)));
        }
    }
    for _ in 0..rng.random_range(0..=k) {
        let a = rng.random_range(0..k - 1);
        let b = rng.random_range(a + 1..k);
        edges.push((a, b));
    }
    edges.sort();
    edges.dedup();
    edges
}

/// Whether removing `cut` (bitmask over links) separates link 0 from link `k - 1`.
fn separates(k: usize, edges: &[(usize, usize)], cut: u32) -> bool {
    let open = |l: usize| cut >> l & 1 == 0;
    if !open(0) || !open(k - 1) {
        return true;
    }
    let mut seen = vec![false; k];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(a) = stack.pop() {
        for &(x, y) in edges {
            if x == a && open(y) && !seen[y] {
                seen[y] = true;
                stack.push(y);
            }
        }
    }
    !seen[k - 1]
}

/// Minimum link-capacity cut by enumerating every subset of links.
pub fn brute_min_cut(k: usize, edges: &[(usize, usize)], caps: &[f64]) -> f64 {
    (0u32..1 << k)
        .filter(|&c| separates(k, edges, c))
        .map(|c| (0..k).filter(|l| c >> l & 1 == 1).map(|l| caps[l]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

pub fn random_rates<R: Rng>(rng: &mut R, m: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|s| {
            (0..m)
                .map(|t| if s == t { 0.0 } else { rng.random_range(0.2..2.0) })
                .collect()
        })
        .collect()
}

/// CTM links with unit speeds; `caps[s][k]` caps the sending flow of link `k` in mode `s`.
pub fn model_from(
    edges: &[(usize, usize)],
    base: &[f64],
    finite: &[bool],
    caps: &[Vec<f64>],
    rates: Vec<Vec<f64>>,
) -> Model {
    let k = base.len();
    let storage = (0..k)
        .map(|l| {
            if finite[l] {
                Storage::Finite { jam: 2.0 * base[l] }
            } else {
                Storage::Infinite
            }
        })
        .collect();
    let net = build_network(storage, edges).expect("valid network");
    let flows = (0..k)
        .map(|l| {
            ModedFlow::nominal(LinkFlow::ctm(1.0, base[l], 1.0, finite[l]), caps.len())
                .with_send_caps(caps.iter().map(|c| c[l]).collect())
        })
        .collect();
    Model::new(net, flows, ModeSystem::new(rates).expect("ergodic")).expect("valid model")
}

/// A random single-path (one to four links) or diamond instance with two
/// modes, one link partly disrupted in the second, and an ol, md or logit law.
pub fn random_instance<R: Rng>(rng: &mut R, diamond: bool) -> (Model, ControlLaw, BoxMethod, &'static str) {
    let (k, edges): (usize, Vec<(usize, usize)>) = if diamond {
        (4, vec![(0, 1), (0, 2), (1, 3), (2, 3)])
    } else {
        let k = rng.random_range(1..=4);
        (k, (0..k - 1).map(|i| (i, i + 1)).collect())
    };
    let base: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();
    let finite: Vec<bool> = (0..k).map(|l| l > 0 && rng.random_bool(0.5)).collect();
    let hit = rng.random_range(0..k);
    let mut caps = vec![vec![f64::INFINITY; k]; 2];
    caps[1][hit] = base[hit] * rng.random_range(0.0..0.8);
    let model = model_from(&edges, &base, &finite, &caps, random_rates(rng, 2));
    let (law, method, label) = match rng.random_range(0..3) {
        0 => (synthesize_open_loop(&model).0, BoxMethod::Monotone, "ol"),
        1 => (synthesize_mode_dependent(&model), BoxMethod::ModeDependent, "md"),
        _ => {
            let nu = rng.random_range(0.5..3.0);
            (
                ControlLaw::Routing(Routing::logit(&model.net, nu)),
                BoxMethod::Monotone,
                "logit",
            )
        }
    };
    (model, law, method, label)
}
