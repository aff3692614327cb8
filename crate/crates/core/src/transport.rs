//! Exact min-cost assignment of unit-demand agents to capacitated types.
//!
//! Every agent takes exactly one type; type `j` takes at most `caps[j]`
//! agents. This is a transportation problem (and a min-cost flow with unit
//! source arcs), solved by successive shortest paths. Because each agent
//! carries one unit, the residual graph collapses onto the types: moving from
//! type `u` to type `v` means re-assigning one agent currently in `u`, and the
//! cheapest such agent is kept in a lazily-invalidated heap per `(u, v)`.
//! Each insertion is then a Dijkstra run over `|T|` nodes.
//!
//! Costs are fixed-point integers (see [`to_fixed`]) so optima are exact and
//! reproducible. Type prices are kept as node potentials; at every point they
//! certify optimality of the current assignment:
//!
//! * each agent sits in a type minimizing `cost + price`;
//! * prices are non-negative, and positive only on full types.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::{Error, Result};

/// Fixed-point units per cost unit (minute).
pub const COST_SCALE: f64 = 1e9;

const INF: i64 = i64::MAX / 4;
const NONE: u32 = u32::MAX;

/// Rounds a cost to the fixed-point grid.
pub fn to_fixed(x: f64) -> i64 {
    debug_assert!(x.is_finite() && x.abs() < 1e8, "cost out of range: {x}");
    (x * COST_SCALE).round() as i64
}

pub fn from_fixed(x: i64) -> f64 {
    x as f64 / COST_SCALE
}

pub fn from_fixed_wide(x: i128) -> f64 {
    x as f64 / COST_SCALE
}

#[derive(Clone, Copy, Debug)]
enum Pred {
    Source,
    Move { from: u32, agent: u32 },
}

/// Incremental solver. Agents are inserted one at a time; after each
/// insertion the assignment of the inserted agents is optimal.
pub struct TransportSolver<'a> {
    costs: &'a [i64],
    n_types: usize,
    caps: Vec<u32>,
    counts: Vec<u32>,
    prices: Vec<i64>,
    assign: Vec<u32>,
    generation: Vec<u32>,
    // (u * n_types + v) -> min-heap of (cost[b][v] - cost[b][u], b, generation)
    moves: Vec<BinaryHeap<Reverse<(i64, u32, u32)>>>,
    dist: Vec<i64>,
    done: Vec<bool>,
    pred: Vec<Pred>,
}

impl<'a> TransportSolver<'a> {
    /// `costs` is row-major, one row of `n_types` entries per agent.
    pub fn new(costs: &'a [i64], n_types: usize, caps: &[u32]) -> Result<Self> {
        if n_types == 0 || caps.len() != n_types || costs.len() % n_types != 0 {
            return Err(Error::Internal(format!(
                "cost table of {} entries does not match {} types / {} capacities",
                costs.len(),
                n_types,
                caps.len()
            )));
        }
        let n_agents = costs.len() / n_types;
        Ok(TransportSolver {
            costs,
            n_types,
            caps: caps.to_vec(),
            counts: vec![0; n_types],
            prices: vec![0; n_types],
            assign: vec![NONE; n_agents],
            generation: vec![0; n_agents],
            moves: (0..n_types * n_types).map(|_| BinaryHeap::new()).collect(),
            dist: vec![INF; n_types],
            done: vec![false; n_types],
            pred: vec![Pred::Source; n_types],
        })
    }

    pub fn n_agents(&self) -> usize {
        self.assign.len()
    }

    fn row(&self, agent: usize) -> &'a [i64] {
        let t = self.n_types;
        &self.costs[agent * t..(agent + 1) * t]
    }

    /// Cheapest move of one agent out of `from` into `to`, as (raw cost change, agent).
    fn best_move(&mut self, from: usize, to: usize) -> Option<(i64, u32)> {
        let heap = &mut self.moves[from * self.n_types + to];
        while let Some(&Reverse((key, b, g))) = heap.peek() {
            if self.generation[b as usize] == g && self.assign[b as usize] == from as u32 {
                return Some((key, b));
            }
            heap.pop();
        }
        None
    }

    fn place(&mut self, agent: usize, ty: usize) {
        let t = self.n_types;
        self.assign[agent] = ty as u32;
        self.generation[agent] = self.generation[agent].wrapping_add(1);
        let g = self.generation[agent];
        let row = self.row(agent);
        for k in 0..t {
            if k != ty {
                self.moves[ty * t + k].push(Reverse((row[k] - row[ty], agent as u32, g)));
            }
        }
    }

    /// Adds `agent` and restores optimality along one shortest augmenting path.
    pub fn insert(&mut self, agent: usize) -> Result<()> {
        if self.assign[agent] != NONE {
            return Err(Error::Internal(format!("agent {agent} inserted twice")));
        }
        let t = self.n_types;
        let row = self.row(agent);
        for j in 0..t {
            self.dist[j] = row[j] + self.prices[j];
            self.done[j] = false;
            self.pred[j] = Pred::Source;
        }

        let target = loop {
            let mut u = usize::MAX;
            let mut best = INF;
            for j in 0..t {
                if !self.done[j] && self.dist[j] < best {
                    best = self.dist[j];
                    u = j;
                }
            }
            if u == usize::MAX {
                return Err(Error::Infeasible(format!(
                    "no capacity left for agent {agent}"
                )));
            }
            self.done[u] = true;
            if self.counts[u] < self.caps[u] {
                break u;
            }
            if self.counts[u] == 0 {
                continue;
            }
            for v in 0..t {
                if self.done[v] {
                    continue;
                }
                if let Some((key, b)) = self.best_move(u, v) {
                    let reduced = key + self.prices[v] - self.prices[u];
                    debug_assert!(reduced >= 0, "negative reduced cost {reduced}");
                    let nd = best + reduced;
                    if nd < self.dist[v] {
                        self.dist[v] = nd;
                        self.pred[v] = Pred::Move {
                            from: u as u32,
                            agent: b,
                        };
                    }
                }
            }
        };

        let reach = self.dist[target];
        for j in 0..t {
            if self.done[j] && self.dist[j] < reach {
                self.prices[j] += reach - self.dist[j];
            }
        }

        let mut v = target;
        loop {
            match self.pred[v] {
                Pred::Source => {
                    self.place(agent, v);
                    break;
                }
                Pred::Move { from, agent: b } => {
                    self.place(b as usize, v);
                    v = from as usize;
                }
            }
        }
        self.counts[target] += 1;
        Ok(())
    }

    /// Inserts every agent in index order.
    pub fn solve_all(&mut self) -> Result<()> {
        let total_cap: u64 = self.caps.iter().map(|&c| c as u64).sum();
        if (self.n_agents() as u64) > total_cap {
            return Err(Error::Infeasible(format!(
                "{} agents but total capacity {total_cap}",
                self.n_agents()
            )));
        }
        for a in 0..self.n_agents() {
            self.insert(a)?;
        }
        Ok(())
    }

    pub fn assignment(&self) -> Vec<usize> {
        self.assign.iter().map(|&j| j as usize).collect()
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Type prices (fixed-point), zero on types with spare capacity.
    pub fn prices(&self) -> &[i64] {
        &self.prices
    }

    pub fn total_cost(&self) -> i128 {
        self.assign
            .iter()
            .enumerate()
            .filter(|(_, &j)| j != NONE)
            .map(|(a, &j)| self.row(a)[j as usize] as i128)
            .sum()
    }

    /// `shift[k][j]`: minimum cost change of re-assigning a chain of agents so
    /// that type `k` loses one agent and type `j` gains one (0 when `k == j`,
    /// `None` when impossible). Computed over the current assignment, which
    /// must be complete and optimal (there are then no negative cycles).
    pub fn chain_costs(&mut self) -> Vec<Option<i64>> {
        let t = self.n_types;
        let mut d = vec![INF; t * t];
        for u in 0..t {
            d[u * t + u] = 0;
            for v in 0..t {
                if u != v {
                    if let Some((key, _)) = self.best_move(u, v) {
                        d[u * t + v] = key;
                    }
                }
            }
        }
        for m in 0..t {
            for u in 0..t {
                let um = d[u * t + m];
                if um >= INF {
                    continue;
                }
                for v in 0..t {
                    let mv = d[m * t + v];
                    if mv < INF && um + mv < d[u * t + v] {
                        d[u * t + v] = um + mv;
                    }
                }
            }
        }
        d.into_iter().map(|x| (x < INF).then_some(x)).collect()
    }
}

/// Result of a one-shot solve.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransportSolution {
    pub assignment: Vec<usize>,
    pub counts: Vec<u32>,
    pub prices: Vec<i64>,
    pub total_cost: i128,
}

/// Minimum-cost assignment of every agent to one type within `caps`.
pub fn solve_transport(costs: &[i64], n_types: usize, caps: &[u32]) -> Result<TransportSolution> {
    let mut solver = TransportSolver::new(costs, n_types, caps)?;
    solver.solve_all()?;
    Ok(TransportSolution {
        assignment: solver.assignment(),
        counts: solver.counts().to_vec(),
        prices: solver.prices().to_vec(),
        total_cost: solver.total_cost(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Exhaustive minimum over all assignments within capacity.
    fn brute(costs: &[i64], t: usize, caps: &[u32]) -> Option<i128> {
        let a = costs.len() / t;
        let mut best: Option<i128> = None;
        let mut choice = vec![0usize; a];
        loop {
            let mut counts = vec![0u32; t];
            for &c in &choice {
                counts[c] += 1;
            }
            if counts.iter().zip(caps).all(|(c, k)| c <= k) {
                let v: i128 = choice.iter().enumerate().map(|(i, &c)| costs[i * t + c] as i128).sum();
                best = Some(best.map_or(v, |b| b.min(v)));
            }
            let mut i = 0;
            loop {
                if i == a {
                    return best;
                }
                choice[i] += 1;
                if choice[i] < t {
                    break;
                }
                choice[i] = 0;
                i += 1;
            }
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<i64>, usize, Vec<u32>)> {
        (1usize..=6, 1usize..=3).prop_flat_map(|(a, t)| {
            (
                proptest::collection::vec(-50i64..50, a * t),
                Just(t),
                proptest::collection::vec(0u32..=4, t),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_enumeration((costs, t, caps) in instance()) {
            let a = costs.len() / t;
            let total: u32 = caps.iter().sum();
            match solve_transport(&costs, t, &caps) {
                Ok(sol) => {
                    prop_assert!(a as u32 <= total);
                    prop_assert_eq!(Some(sol.total_cost), brute(&costs, t, &caps));
                    // Price certificate.
                    for (i, &j) in sol.assignment.iter().enumerate() {
                        let mine = costs[i * t + j] + sol.prices[j];
                        for k in 0..t {
                            prop_assert!(mine <= costs[i * t + k] + sol.prices[k]);
                        }
                    }
                    for j in 0..t {
                        prop_assert!(sol.prices[j] >= 0);
                        prop_assert!(sol.counts[j] <= caps[j]);
                        if sol.prices[j] > 0 {
                            prop_assert_eq!(sol.counts[j], caps[j]);
                        }
                    }
                }
                Err(Error::Infeasible(_)) => prop_assert!(a as u32 > total),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }

    #[test]
    fn contention_moves_earlier_agent() {
        // Both prefer type 0 (cap 1); agent 1 loses more by moving.
        let costs = [0, 1, 0, 10];
        let sol = solve_transport(&costs, 2, &[1, 1]).unwrap();
        assert_eq!(sol.assignment, vec![1, 0]);
        assert_eq!(sol.total_cost, 1);
        assert!(sol.prices[0] > 0);
    }

    #[test]
    fn over_capacity_is_infeasible() {
        assert!(matches!(
            solve_transport(&[0, 0, 0], 1, &[2]),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn fixed_point_round_trip() {
        assert_eq!(to_fixed(1.5), 1_500_000_000);
        assert_eq!(from_fixed(to_fixed(-2.25)), -2.25);
    }
}
