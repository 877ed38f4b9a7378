use super::{ConnectionKind, Network};

/// Circuit enumeration stops once this many have been found.
pub const CYCLE_ENUMERATION_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleCount {
    pub count: usize,
    /// True when enumeration stopped at [`CYCLE_ENUMERATION_CAP`].
    pub capped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronStats {
    pub total: usize,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// One row of structural statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopologySummary {
    pub parameters: usize,
    pub clusters: usize,
    pub connections: usize,
    pub depth: usize,
    pub max_in_degree: usize,
    pub cycles: CycleCount,
    pub neurons: NeuronStats,
}

impl Network {
    /// Adjacency over order indices, optionally restricted to feedforward edges.
    fn adjacency(&self, feedforward_only: bool) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.clusters.len()];
        for conn in self.connections.values() {
            if feedforward_only && self.connection_kind(conn) != ConnectionKind::Feedforward {
                continue;
            }
            let s = self.order_of(conn.source).expect("endpoint exists");
            let t = self.order_of(conn.target).expect("endpoint exists");
            adj[s].push(t);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Edge count of the longest path in the feedforward-only subgraph.
    pub fn topological_depth(&self) -> usize {
        // Feedforward edges always point to a higher order index, so the
        // order itself is a topological order.
        let adj = self.adjacency(true);
        let mut longest = vec![0usize; adj.len()];
        for s in 0..adj.len() {
            for &t in &adj[s] {
                longest[t] = longest[t].max(longest[s] + 1);
            }
        }
        longest.into_iter().max().unwrap_or(0)
    }

    pub fn max_in_degree(&self) -> usize {
        let mut indeg = vec![0usize; self.clusters.len()];
        for conn in self.connections.values() {
            indeg[self.order_of(conn.target).expect("endpoint exists")] += 1;
        }
        indeg.into_iter().max().unwrap_or(0)
    }

    /// Elementary circuits of the full connection graph (Johnson).
    pub fn count_cycles(&self) -> CycleCount {
        count_elementary_circuits(&self.adjacency(false), CYCLE_ENUMERATION_CAP)
    }

    pub fn neuron_stats(&self) -> NeuronStats {
        let counts: Vec<usize> = self.clusters.iter().map(|c| c.neurons()).collect();
        let total: usize = counts.iter().sum();
        NeuronStats {
            total,
            min: counts.iter().copied().min().unwrap_or(0),
            max: counts.iter().copied().max().unwrap_or(0),
            mean: total as f64 / counts.len().max(1) as f64,
        }
    }

    pub fn summary(&self) -> TopologySummary {
        TopologySummary {
            parameters: self.parameter_count(),
            clusters: self.cluster_count(),
            connections: self.connection_count(),
            depth: self.topological_depth(),
            max_in_degree: self.max_in_degree(),
            cycles: self.count_cycles(),
            neurons: self.neuron_stats(),
        }
    }
}

/// Johnson's algorithm over vertices `0..n`. For each start vertex `s`,
/// circuits whose least vertex is `s` are enumerated in the subgraph induced
/// by `{s, s+1, ...}`.
pub(crate) fn count_elementary_circuits(adj: &[Vec<usize>], cap: usize) -> CycleCount {
    let n = adj.len();
    let mut search = Johnson {
        adj,
        blocked: vec![false; n],
        blocked_by: vec![Vec::new(); n],
        start: 0,
        found: 0,
        cap,
    };
    for s in 0..n {
        if search.found >= cap {
            break;
        }
        search.start = s;
        for v in s..n {
            search.blocked[v] = false;
            search.blocked_by[v].clear();
        }
        search.circuit(s);
    }
    CycleCount {
        count: search.found.min(cap),
        capped: search.found >= cap,
    }
}

struct Johnson<'a> {
    adj: &'a [Vec<usize>],
    blocked: Vec<bool>,
    blocked_by: Vec<Vec<usize>>,
    start: usize,
    found: usize,
    cap: usize,
}

impl Johnson<'_> {
    fn unblock(&mut self, u: usize) {
        let mut pending = vec![u];
        while let Some(x) = pending.pop() {
            if !self.blocked[x] {
                continue;
            }
            self.blocked[x] = false;
            pending.append(&mut self.blocked_by[x]);
        }
    }

    fn circuit(&mut self, v: usize) -> bool {
        if self.found >= self.cap {
            return true;
        }
        let mut closed = false;
        self.blocked[v] = true;
        let adj = self.adj;
        for &w in &adj[v] {
            if w < self.start {
                continue;
            }
            if w == self.start {
                self.found += 1;
                closed = true;
                if self.found >= self.cap {
                    return true;
                }
            } else if !self.blocked[w] && self.circuit(w) {
                closed = true;
            }
        }
        if closed {
            self.unblock(v);
        } else {
            for &w in &adj[v] {
                if w >= self.start && !self.blocked_by[w].contains(&v) {
                    self.blocked_by[w].push(v);
                }
            }
        }
        closed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Counts simple cycles by brute force: every cycle is found once from
    /// its least vertex, extending paths through strictly larger vertices.
    pub(crate) fn brute_force_cycles(adj: &[Vec<usize>]) -> usize {
        fn extend(adj: &[Vec<usize>], start: usize, v: usize, on_path: &mut Vec<bool>) -> usize {
            let mut total = 0;
            for &w in &adj[v] {
                if w == start {
                    total += 1;
                } else if w > start && !on_path[w] {
                    on_path[w] = true;
                    total += extend(adj, start, w, on_path);
                    on_path[w] = false;
                }
            }
            total
        }
        (0..adj.len())
            .map(|s| {
                let mut on_path = vec![false; adj.len()];
                on_path[s] = true;
                extend(adj, s, s, &mut on_path)
            })
            .sum()
    }

    #[test]
    fn small_graphs() {
        assert_eq!(count_elementary_circuits(&[vec![1], vec![2], vec![]], 100).count, 0);
        assert_eq!(count_elementary_circuits(&[vec![1], vec![0]], 100).count, 1);
        // A→B, B→C, C→A, B→A
        let tri = vec![vec![1], vec![2, 0], vec![0]];
        assert_eq!(count_elementary_circuits(&tri, 100).count, 2);
        assert_eq!(brute_force_cycles(&tri), 2);
    }

    #[test]
    fn complete_graph_counts() {
        // Complete digraph on n vertices has Σ_{k=2..n} C(n,k)(k-1)! circuits.
        for n in 2..=6usize {
            let adj: Vec<Vec<usize>> = (0..n)
                .map(|i| (0..n).filter(|&j| j != i).collect())
                .collect();
            let mut expected = 0usize;
            for k in 2..=n {
                let choose: usize = (0..k).map(|i| n - i).product::<usize>() / (1..=k).product::<usize>();
                let perms: usize = (1..k).product();
                expected += choose * perms;
            }
            let got = count_elementary_circuits(&adj, usize::MAX);
            assert_eq!(got.count, expected, "n = {n}");
            assert!(!got.capped);
        }
    }

    #[test]
    fn cap_is_respected() {
        let n = 8;
        let adj: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect();
        let got = count_elementary_circuits(&adj, 50);
        assert_eq!(got, CycleCount { count: 50, capped: true });
    }

    #[test]
    fn matches_brute_force_on_random_graphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let n = rng.random_range(1..8);
            let p = rng.random_range(0.1..0.6);
            let adj: Vec<Vec<usize>> = (0..n)
                .map(|i| (0..n).filter(|&j| j != i && rng.random_bool(p)).collect())
                .collect();
            assert_eq!(
                count_elementary_circuits(&adj, usize::MAX).count,
                brute_force_cycles(&adj)
            );
        }
    }
}
