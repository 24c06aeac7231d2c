//! Node-capacitated max-flow on a link DAG.
//!
//! Every link `k` becomes an arc `in(k) -> out(k)` carrying the link capacity;
//! every adjacent pair `(k, j)` becomes an uncapacitated arc `out(k) -> in(j)`.
//! Augmenting paths are found by BFS over arcs in insertion order, so results
//! are deterministic for a given pair ordering.

use std::collections::VecDeque;

const EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Arc {
    to: usize,
    cap: f64,
    rev: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LinkFlowGraph {
    arcs: Vec<Vec<Arc>>,
    pair_arc: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub(crate) struct MaxFlowSolution {
    pub value: f64,
    /// Flow on each adjacent pair, in the network's pair order.
    pub pair_flow: Vec<f64>,
}

fn in_node(k: usize) -> usize {
    2 * k
}
fn out_node(k: usize) -> usize {
    2 * k + 1
}

impl LinkFlowGraph {
    pub fn new(link_caps: &[f64], pairs: &[(usize, usize)]) -> Self {
        let n = link_caps.len();
        let mut g = LinkFlowGraph {
            arcs: vec![Vec::new(); 2 * n],
            pair_arc: Vec::with_capacity(pairs.len()),
        };
        for (k, &c) in link_caps.iter().enumerate() {
            g.add_arc(in_node(k), out_node(k), c.max(0.0));
        }
        for &(k, j) in pairs {
            let a = g.add_arc(out_node(k), in_node(j), f64::INFINITY);
            g.pair_arc.push(a);
        }
        g
    }

    fn add_arc(&mut self, from: usize, to: usize, cap: f64) -> (usize, usize) {
        let rev_from = self.arcs[to].len();
        let rev_to = self.arcs[from].len();
        self.arcs[from].push(Arc { to, cap, rev: rev_from });
        self.arcs[to].push(Arc {
            to: from,
            cap: 0.0,
            rev: rev_to,
        });
        (from, rev_to)
    }

    pub fn solve(mut self, source_link: usize, sink_link: usize) -> MaxFlowSolution {
        let s = in_node(source_link);
        let t = out_node(sink_link);
        let nodes = self.arcs.len();
        let mut value = 0.0;
        loop {
            let mut prev: Vec<Option<(usize, usize)>> = vec![None; nodes];
            let mut seen = vec![false; nodes];
            seen[s] = true;
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                if u == t {
                    break;
                }
                for (i, a) in self.arcs[u].iter().enumerate() {
                    if a.cap > EPS && !seen[a.to] {
                        seen[a.to] = true;
                        prev[a.to] = Some((u, i));
                        queue.push_back(a.to);
                    }
                }
            }
            if !seen[t] {
                break;
            }
            let mut push = f64::INFINITY;
            let mut v = t;
            while let Some((u, i)) = prev[v] {
                push = push.min(self.arcs[u][i].cap);
                v = u;
            }
            if !push.is_finite() {
                // An uncapacitated path: flow is unbounded. Link capacities are
                // always finite, so this only happens for a zero-link path.
                value = f64::INFINITY;
                break;
            }
            let mut v = t;
            while let Some((u, i)) = prev[v] {
                self.arcs[u][i].cap -= push;
                let (to, rev) = (self.arcs[u][i].to, self.arcs[u][i].rev);
                self.arcs[to][rev].cap += push;
                v = u;
            }
            value += push;
        }

        let pair_flow = self
            .pair_arc
            .iter()
            .map(|&(u, i)| {
                let a = &self.arcs[u][i];
                // flow = residual capacity of the reverse arc
                self.arcs[a.to][a.rev].cap
            })
            .collect();
        MaxFlowSolution { value, pair_flow }
    }
}
