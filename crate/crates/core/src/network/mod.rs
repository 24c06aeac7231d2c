//! Link graphs of single-origin single-destination acyclic networks.
//!
//! Links are indexed from 0 internally; link 0 is the origin and link `K-1`
//! the destination. User-facing messages and reports number links from 1.

mod maxflow;

use serde::{Deserialize, Serialize};

use crate::error::{FlownetError, Result};
use maxflow::LinkFlowGraph;

/// Storage space of a link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    Infinite,
    /// Finite storage with jam density `x^max`.
    Finite {
        jam: f64,
    },
}

impl Storage {
    pub fn is_finite(&self) -> bool {
        matches!(self, Storage::Finite { .. })
    }

    /// Upper end of the density domain, `+inf` for infinite storage.
    pub fn max_density(&self) -> f64 {
        match *self {
            Storage::Infinite => f64::INFINITY,
            Storage::Finite { jam } => jam,
        }
    }
}

/// Validated link graph.
#[derive(Debug, Clone)]
pub struct Network {
    out_adj: Vec<Vec<usize>>,
    in_adj: Vec<Vec<usize>>,
    storage: Vec<Storage>,
    pairs: Vec<(usize, usize)>,
    out_pairs: Vec<Vec<usize>>,
    in_pairs: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

/// Builds and validates a network from per-link storage and 0-based edges.
pub fn build_network(storage: Vec<Storage>, edges: &[(usize, usize)]) -> Result<Network> {
    let k = storage.len();
    if k == 0 {
        return Err(FlownetError::EmptyNetwork);
    }
    let mut out_adj = vec![Vec::new(); k];
    let mut in_adj = vec![Vec::new(); k];
    for &(a, b) in edges {
        if a >= k || b >= k {
            return Err(FlownetError::EdgeOutOfRange(a + 1, b + 1, k));
        }
        if a == b {
            return Err(FlownetError::SelfLoop(a + 1));
        }
        if !out_adj[a].contains(&b) {
            out_adj[a].push(b);
            in_adj[b].push(a);
        }
    }
    for adj in out_adj.iter_mut().chain(in_adj.iter_mut()) {
        adj.sort_unstable();
    }

    // Kahn's algorithm; smallest ready link first keeps the order canonical.
    let mut indeg: Vec<usize> = in_adj.iter().map(Vec::len).collect();
    let mut ready: std::collections::BTreeSet<usize> = (0..k).filter(|&i| indeg[i] == 0).collect();
    let mut topo = Vec::with_capacity(k);
    while let Some(&u) = ready.iter().next() {
        ready.remove(&u);
        topo.push(u);
        for &v in &out_adj[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                ready.insert(v);
            }
        }
    }
    if topo.len() < k {
        let culprit = (0..k).find(|&i| indeg[i] > 0).unwrap_or(0);
        return Err(FlownetError::CycleDetected(culprit + 1));
    }
    for i in 1..k {
        if in_adj[i].is_empty() {
            return Err(FlownetError::MultipleOrigins(i + 1));
        }
    }
    if !in_adj[0].is_empty() {
        return Err(FlownetError::UnreachableLink(1));
    }
    for i in 0..k - 1 {
        if out_adj[i].is_empty() {
            return Err(FlownetError::MultipleDestinations(i + 1));
        }
    }
    if !out_adj[k - 1].is_empty() {
        return Err(FlownetError::UnreachableLink(k));
    }
    if storage[0].is_finite() {
        return Err(FlownetError::OriginFiniteStorage);
    }
    for (i, s) in storage.iter().enumerate() {
        if let Storage::Finite { jam } = s {
            if !(jam.is_finite() && *jam > 0.0) {
                return Err(FlownetError::InvalidFlow {
                    link: i + 1,
                    reason: format!("jam density must be positive and finite, got {jam}"),
                });
            }
        }
    }

    let mut pairs = Vec::new();
    let mut out_pairs = vec![Vec::new(); k];
    let mut in_pairs = vec![Vec::new(); k];
    for (a, outs) in out_adj.iter().enumerate() {
        for &b in outs {
            out_pairs[a].push(pairs.len());
            in_pairs[b].push(pairs.len());
            pairs.push((a, b));
        }
    }
    for ip in in_pairs.iter_mut() {
        ip.sort_by_key(|&p| pairs[p].0);
    }

    Ok(Network {
        out_adj,
        in_adj,
        storage,
        pairs,
        out_pairs,
        in_pairs,
        topo,
    })
}

impl Network {
    pub fn link_count(&self) -> usize {
        self.storage.len()
    }

    pub fn origin(&self) -> usize {
        0
    }

    pub fn destination(&self) -> usize {
        self.storage.len() - 1
    }

    /// Downstream adjacent links `O_k`.
    pub fn outs(&self, k: usize) -> &[usize] {
        &self.out_adj[k]
    }

    /// Upstream adjacent links `I_k`.
    pub fn ins(&self, k: usize) -> &[usize] {
        &self.in_adj[k]
    }

    pub fn storage(&self, k: usize) -> Storage {
        self.storage[k]
    }

    pub fn storages(&self) -> &[Storage] {
        &self.storage
    }

    /// Adjacent pairs `(k, j)` in canonical order; `N_p = pairs().len()`.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// Pair ids leaving link `k`.
    pub fn out_pairs(&self, k: usize) -> &[usize] {
        &self.out_pairs[k]
    }

    /// Pair ids entering link `k`.
    pub fn in_pairs(&self, k: usize) -> &[usize] {
        &self.in_pairs[k]
    }

    pub fn pair_id(&self, k: usize, j: usize) -> Option<usize> {
        self.out_pairs[k].iter().copied().find(|&p| self.pairs[p].1 == j)
    }

    /// Links in topological order (origin first).
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Returns a copy with every link switched to the given storage, except the origin.
    pub fn with_storage(&self, storage: Vec<Storage>) -> Result<Network> {
        let edges: Vec<_> = self.pairs.clone();
        build_network(storage, &edges)
    }

    /// True when every origin-destination path meets `links`.
    pub fn is_cut(&self, links: &[usize]) -> bool {
        let k = self.link_count();
        let mut blocked = vec![false; k];
        for &l in links {
            if l < k {
                blocked[l] = true;
            }
        }
        if blocked[0] {
            return true;
        }
        let mut seen = vec![false; k];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            if u == k - 1 {
                return false;
            }
            for &v in &self.out_adj[u] {
                if !seen[v] && !blocked[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        true
    }
}

/// Reachability sets `M_k` (links from which k is accessible) and `N_k`
/// (links accessible from k).
#[derive(Debug, Clone, PartialEq)]
pub struct AccessSets {
    pub upstream: Vec<Vec<usize>>,
    pub downstream: Vec<Vec<usize>>,
    reach: Vec<Vec<bool>>,
}

impl AccessSets {
    /// `M_k`.
    pub fn m(&self, k: usize) -> &[usize] {
        &self.upstream[k]
    }

    /// `N_k`.
    pub fn n(&self, k: usize) -> &[usize] {
        &self.downstream[k]
    }

    /// True when `to` is accessible from `from` (strictly, `from != to`).
    pub fn reaches(&self, from: usize, to: usize) -> bool {
        self.reach[from][to]
    }
}

pub fn access_sets(net: &Network) -> AccessSets {
    let k = net.link_count();
    let mut reach = vec![vec![false; k]; k];
    for &u in net.topo_order().iter().rev() {
        for &v in net.outs(u) {
            reach[u][v] = true;
            for w in 0..k {
                if reach[v][w] {
                    reach[u][w] = true;
                }
            }
        }
    }
    let downstream = (0..k).map(|u| (0..k).filter(|&w| reach[u][w]).collect()).collect();
    let upstream = (0..k).map(|w| (0..k).filter(|&u| reach[u][w]).collect()).collect();
    AccessSets {
        upstream,
        downstream,
        reach,
    }
}

/// A set of links meeting every origin-destination path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cut {
    pub links: Vec<usize>,
}

impl Cut {
    pub fn capacity(&self, caps: &[f64]) -> f64 {
        self.links.iter().map(|&k| caps[k]).sum()
    }
}

fn max_flow_value(net: &Network, caps: &[f64]) -> f64 {
    LinkFlowGraph::new(caps, net.pairs())
        .solve(net.origin(), net.destination())
        .value
}

/// Minimum cut capacity `C(F; K)` with a witness cut.
///
/// Ties are broken toward the lexicographically first link set: links are
/// considered in index order and kept whenever some minimum cut still
/// contains everything kept so far; redundant members are then pruned.
pub fn min_cut(net: &Network, caps: &[f64]) -> (f64, Cut) {
    let k = net.link_count();
    let value = max_flow_value(net, caps);
    let tol = 1e-9 * (1.0 + value.abs());
    let mut forced: Vec<usize> = Vec::new();
    let mut work: Vec<f64> = caps.to_vec();
    // Large finite stand-in for "cannot be cut".
    let big = caps.iter().map(|c| c.abs()).sum::<f64>() + 1.0;
    for link in 0..k {
        let mut trial = work.clone();
        trial[link] = 0.0;
        let forced_cap: f64 = forced.iter().map(|&f| caps[f]).sum::<f64>() + caps[link];
        let rest = max_flow_value(net, &trial);
        if forced_cap + rest <= value + tol {
            forced.push(link);
            work = trial;
        } else {
            work[link] = big;
        }
    }
    for i in (0..forced.len()).rev() {
        let mut without = forced.clone();
        without.remove(i);
        if net.is_cut(&without) {
            forced = without;
        }
    }
    (value, Cut { links: forced })
}

/// Solution of the expected-capacity max-flow problem and the derived ratios.
#[derive(Debug, Clone)]
pub struct FlowRatios {
    /// Optimal origin flow `max u_1`.
    pub value: f64,
    /// `u*_kj` per pair.
    pub ustar: Vec<f64>,
    /// Diverging ratios `beta_kj` per pair.
    pub beta: Vec<f64>,
    /// `gamma[m][k]`; zero where k is not accessible from m, one on the diagonal.
    pub gamma: Vec<Vec<f64>>,
}

impl FlowRatios {
    pub fn gamma(&self, m: usize, k: usize) -> f64 {
        self.gamma[m][k]
    }
}

/// Solves the expected-capacity max-flow problem and derives `beta`, `gamma`.
///
/// Diverges carrying no optimal flow split uniformly.
pub fn max_flow_p1(net: &Network, expected_caps: &[f64]) -> FlowRatios {
    let sol = LinkFlowGraph::new(expected_caps, net.pairs()).solve(net.origin(), net.destination());
    let k = net.link_count();
    let mut beta = vec![0.0; net.pair_count()];
    for link in 0..k {
        let outs = net.out_pairs(link);
        let total: f64 = outs.iter().map(|&p| sol.pair_flow[p]).sum();
        for &p in outs {
            beta[p] = if total > 1e-12 {
                sol.pair_flow[p] / total
            } else {
                1.0 / outs.len() as f64
            };
        }
    }
    let gamma = flow_ratio_matrix(net, &beta);
    FlowRatios {
        value: sol.value,
        ustar: sol.pair_flow,
        beta,
        gamma,
    }
}

/// `gamma_mk = sum_{i in I_k} gamma_mi beta_ik`, `gamma_mm = 1`.
pub fn flow_ratio_matrix(net: &Network, beta: &[f64]) -> Vec<Vec<f64>> {
    let k = net.link_count();
    let mut gamma = vec![vec![0.0; k]; k];
    for m in 0..k {
        gamma[m][m] = 1.0;
        for &link in net.topo_order() {
            if link == m {
                continue;
            }
            let g: f64 = net
                .in_pairs(link)
                .iter()
                .map(|&p| gamma[m][net.pairs()[p].0] * beta[p])
                .sum();
            gamma[m][link] = g;
        }
    }
    gamma
}

/// Max-flow on arbitrary node capacities, returning per-pair flows.
pub fn node_capacitated_flow(net: &Network, caps: &[f64]) -> (f64, Vec<f64>) {
    let sol = LinkFlowGraph::new(caps, net.pairs()).solve(net.origin(), net.destination());
    (sol.value, sol.pair_flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inf(k: usize) -> Vec<Storage> {
        vec![Storage::Infinite; k]
    }

    pub(crate) fn example7() -> Network {
        let edges = [(0, 1), (0, 4), (1, 2), (1, 3), (3, 5), (4, 5), (2, 6), (5, 6)];
        build_network(inf(7), &edges).unwrap()
    }

    #[test]
    fn chain_builds() {
        let net = build_network(inf(3), &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(net.outs(0), &[1]);
        assert_eq!(net.ins(2), &[1]);
        assert_eq!(net.pair_count(), 2);
    }

    #[test]
    fn example_network_has_eight_pairs() {
        assert_eq!(example7().pair_count(), 8);
    }

    #[test]
    fn cycle_rejected() {
        let err = build_network(inf(2), &[(0, 1), (1, 0)]).unwrap_err();
        assert!(matches!(err, FlownetError::CycleDetected(_)));
    }

    #[test]
    fn second_origin_rejected() {
        let err = build_network(inf(3), &[(0, 2), (1, 2)]).unwrap_err();
        assert_eq!(err, FlownetError::MultipleOrigins(2));
    }

    #[test]
    fn dead_end_rejected() {
        let err = build_network(inf(3), &[(0, 1), (0, 2)]).unwrap_err();
        assert_eq!(err, FlownetError::MultipleDestinations(2));
    }

    #[test]
    fn finite_origin_rejected() {
        let st = vec![Storage::Finite { jam: 2.0 }, Storage::Infinite];
        assert_eq!(
            build_network(st, &[(0, 1)]).unwrap_err(),
            FlownetError::OriginFiniteStorage
        );
    }

    #[test]
    fn access_sets_chain_and_single() {
        let net = build_network(inf(3), &[(0, 1), (1, 2)]).unwrap();
        let a = access_sets(&net);
        assert_eq!(a.m(2), &[0, 1]);
        assert_eq!(a.n(0), &[1, 2]);
        let single = build_network(inf(1), &[]).unwrap();
        let a = access_sets(&single);
        assert!(a.m(0).is_empty() && a.n(0).is_empty());
    }

    #[test]
    fn access_sets_example() {
        let a = access_sets(&example7());
        // M_6 = {1,2,4,5}, N_2 = {3,4,6,7} in 1-based numbering
        assert_eq!(a.m(5), &[0, 1, 3, 4]);
        assert_eq!(a.n(1), &[2, 3, 5, 6]);
        for k in 0..7 {
            assert!(!a.m(k).contains(&k));
            for &j in a.n(k) {
                assert!(a.m(j).contains(&k));
            }
        }
    }

    #[test]
    fn min_cut_chain_bottleneck() {
        let net = build_network(inf(3), &[(0, 1), (1, 2)]).unwrap();
        let (v, cut) = min_cut(&net, &[2.0, 1.0, 2.0]);
        assert_eq!(v, 1.0);
        assert_eq!(cut.links, vec![1]);
    }

    #[test]
    fn min_cut_diamond() {
        let net = build_network(inf(4), &[(0, 1), (0, 2), (1, 3), (2, 3)]).unwrap();
        let (v, cut) = min_cut(&net, &[10.0, 1.0, 2.0, 10.0]);
        assert_eq!(v, 3.0);
        assert_eq!(cut.links, vec![1, 2]);
    }

    #[test]
    fn min_cut_prefers_first_link_on_ties() {
        let net = build_network(inf(3), &[(0, 1), (1, 2)]).unwrap();
        let (_, cut) = min_cut(&net, &[1.0, 1.0, 1.0]);
        assert_eq!(cut.links, vec![0]);
        let (v, cut) = min_cut(&net, &[0.0, 1.0, 0.0]);
        assert_eq!(v, 0.0);
        assert_eq!(cut.links, vec![0]);
    }

    #[test]
    fn p1_chain() {
        let net = build_network(inf(3), &[(0, 1), (1, 2)]).unwrap();
        let r = max_flow_p1(&net, &[2.0, 1.0, 2.0]);
        assert_eq!(r.ustar, vec![1.0, 1.0]);
        assert_eq!(r.gamma(0, 2), 1.0);
    }

    #[test]
    fn p1_diamond_split() {
        let net = build_network(inf(4), &[(0, 1), (0, 2), (1, 3), (2, 3)]).unwrap();
        let r = max_flow_p1(&net, &[10.0, 1.0, 2.0, 10.0]);
        assert_eq!(r.value, 3.0);
        let p01 = net.pair_id(0, 1).unwrap();
        let p02 = net.pair_id(0, 2).unwrap();
        assert_eq!((r.ustar[p01], r.ustar[p02]), (1.0, 2.0));
        assert!((r.beta[p01] - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.gamma(0, 3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn p1_example_solution() {
        let net = example7();
        // expected capacities of the reconstructed example network
        let caps = [1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 1.0];
        let r = max_flow_p1(&net, &caps);
        assert_eq!(r.value, 1.0);
        let u = |a: usize, b: usize| r.ustar[net.pair_id(a - 1, b - 1).unwrap()];
        for (a, b) in [(1, 2), (2, 3), (3, 7), (1, 5), (5, 6), (6, 7)] {
            assert_eq!(u(a, b), 0.5, "u*_{a}{b}");
        }
        assert_eq!(u(2, 4), 0.0);
        assert_eq!(u(4, 6), 0.0);
        let (mc, _) = min_cut(&net, &caps);
        assert_eq!(mc, r.value);
    }

    #[test]
    fn zero_flow_diverge_splits_uniformly() {
        let net = build_network(inf(4), &[(0, 1), (0, 2), (1, 3), (2, 3)]).unwrap();
        let r = max_flow_p1(&net, &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(r.value, 0.0);
        let p01 = net.pair_id(0, 1).unwrap();
        assert_eq!(r.beta[p01], 0.5);
        for row in &r.gamma {
            assert!(row.iter().all(|g| g.is_finite()));
        }
    }
}
