//! VCG auctions inside one driver group.
//!
//! Given the group's integer task allocation `f_row`, drivers bid a cost per
//! task pair; the operator picks the assignment maximizing declared savings
//! `sum (cbar - b)` subject to every driver taking one task and task pair
//! `rs` receiving exactly `f_row[rs]` drivers. Each driver is paid
//!
//! ```text
//! w_a = (Z* - savings_a + cbar[rs(a)]) - max Z_{-a}
//! ```
//!
//! where `max Z_{-a}` is the best declared savings of the other drivers when
//! `a` is absent. With one driver fewer than allocated tasks, one task unit
//! is left to a dedicated vehicle (zero savings), so the task constraints
//! become `<= f_row`.
//!
//! The removal problems are not re-solved: dropping `a` from an optimal
//! assignment leaves an optimal assignment of the rest with a hole at
//! `rs(a)`, and the best removal solution moves that hole along one cheapest
//! chain of re-assignments. All chains come from a single all-pairs pass over
//! the task-pair graph.

use serde::{Deserialize, Serialize};

use crate::network::ZonePair;
use crate::transport::{from_fixed, from_fixed_wide, solve_transport, to_fixed, TransportSolver};
use crate::{Error, Result};

/// Declared costs, one row per driver of the group.
#[derive(Clone, Debug, PartialEq)]
pub struct BidMatrix {
    types: usize,
    b: Vec<f64>,
}

impl BidMatrix {
    pub fn new(b: Vec<f64>, types: usize) -> Result<Self> {
        if types == 0 || b.len() % types != 0 {
            return Err(Error::Domain(format!(
                "{} bids do not form rows of {types}",
                b.len()
            )));
        }
        if b.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("bids must be finite".into()));
        }
        Ok(BidMatrix { types, b })
    }

    pub fn drivers(&self) -> usize {
        self.b.len() / self.types
    }

    pub fn types(&self) -> usize {
        self.types
    }

    pub fn row(&self, driver: usize) -> &[f64] {
        &self.b[driver * self.types..(driver + 1) * self.types]
    }

    /// `cbar - b`, row-major.
    pub fn savings(&self, cbar: &[f64]) -> Vec<f64> {
        self.b
            .iter()
            .enumerate()
            .map(|(i, b)| cbar[i % self.types] - b)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    /// Task-pair index per driver.
    pub y: Vec<usize>,
    /// Drivers per task pair.
    pub counts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub allocation: Allocation,
    pub rewards: Vec<f64>,
    /// `reward - true cost` per driver.
    pub payoffs: Vec<f64>,
    pub declared_surplus: f64,
    pub true_surplus: f64,
    /// Units of the group's allocation left to dedicated vehicles. Always
    /// zero for the group itself; slack only appears in removal problems.
    pub slack_tasks: Vec<u32>,
}

/// One driver's line in an auction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverRecord {
    pub driver: usize,
    pub task_pair: ZonePair,
    pub reward: f64,
    pub payoff: f64,
}

impl AuctionOutcome {
    pub fn records(&self, driver_ids: &[usize], task_pairs: &[ZonePair]) -> Vec<DriverRecord> {
        self.allocation
            .y
            .iter()
            .enumerate()
            .map(|(i, &rs)| DriverRecord {
                driver: driver_ids[i],
                task_pair: task_pairs[rs],
                reward: self.rewards[i],
                payoff: self.payoffs[i],
            })
            .collect()
    }
}

fn check_row(drivers: usize, f_row: &[u32]) -> Result<()> {
    let total: u64 = f_row.iter().map(|&x| x as u64).sum();
    if total != drivers as u64 {
        return Err(Error::Infeasible(format!(
            "allocation of {total} tasks for {drivers} drivers"
        )));
    }
    Ok(())
}

fn fixed_costs(savings: &[f64]) -> Vec<i64> {
    savings.iter().map(|&s| -to_fixed(s)).collect()
}

/// Exact assignment maximizing `sum savings` with task-pair counts equal to
/// `f_row`. Returns the allocation and its objective.
pub fn solve_group_assignment(savings: &[f64], f_row: &[u32]) -> Result<(Allocation, f64)> {
    let types = f_row.len();
    if types == 0 || savings.len() % types != 0 {
        return Err(Error::Domain("savings table does not match allocation row".into()));
    }
    if savings.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("savings must be finite".into()));
    }
    check_row(savings.len() / types, f_row)?;
    let costs = fixed_costs(savings);
    let sol = solve_transport(&costs, types, f_row)?;
    Ok((
        Allocation {
            y: sol.assignment,
            counts: sol.counts,
        },
        -from_fixed_wide(sol.total_cost),
    ))
}

/// Allocation and VCG reward per driver for the given bids.
pub fn vcg_auction(bids: &BidMatrix, f_row: &[u32], cbar: &[f64]) -> Result<(Allocation, Vec<f64>)> {
    let types = bids.types();
    if f_row.len() != types || cbar.len() != types {
        return Err(Error::Domain("bid width does not match allocation row".into()));
    }
    check_row(bids.drivers(), f_row)?;
    let costs = fixed_costs(&bids.savings(cbar));
    let mut solver = TransportSolver::new(&costs, types, f_row)?;
    solver.solve_all()?;
    let chains = solver.chain_costs();

    // Best hole shift ending at each task pair; staying put costs nothing.
    let shift: Vec<i64> = (0..types)
        .map(|j| {
            (0..types)
                .filter_map(|k| chains[k * types + j])
                .fold(0i64, i64::min)
        })
        .collect();
    let y = solver.assignment();
    let rewards = y.iter().map(|&j| cbar[j] + from_fixed(shift[j])).collect();
    Ok((
        Allocation {
            y,
            counts: solver.counts().to_vec(),
        },
        rewards,
    ))
}

/// VCG rewards for the given bids.
pub fn vcg_rewards(bids: &BidMatrix, f_row: &[u32], cbar: &[f64]) -> Result<Vec<f64>> {
    vcg_auction(bids, f_row, cbar).map(|(_, w)| w)
}

/// Best declared savings of all drivers except `absent`, task counts capped
/// at `f_row`, solved from scratch. Fixed-point units.
pub fn removal_surplus_from_scratch(bids: &BidMatrix, f_row: &[u32], cbar: &[f64], absent: usize) -> Result<i128> {
    let types = bids.types();
    let costs: Vec<i64> = (0..bids.drivers())
        .filter(|&a| a != absent)
        .flat_map(|a| bids.row(a).iter().zip(cbar).map(|(b, c)| -to_fixed(c - b)))
        .collect();
    let sol = solve_transport(&costs, types, f_row)?;
    Ok(-sol.total_cost)
}

/// Rewards computed with one from-scratch removal solve per driver.
pub fn vcg_rewards_from_scratch(bids: &BidMatrix, f_row: &[u32], cbar: &[f64]) -> Result<Vec<f64>> {
    let types = bids.types();
    let costs = fixed_costs(&bids.savings(cbar));
    let base = solve_transport(&costs, types, f_row)?;
    let z_star = -base.total_cost;
    (0..bids.drivers())
        .map(|a| {
            let j = base.assignment[a];
            let own = -costs[a * types + j] as i128;
            let without = removal_surplus_from_scratch(bids, f_row, cbar, a)?;
            Ok(cbar[j] + from_fixed_wide(z_star - own - without))
        })
        .collect()
}

/// Maps a driver's private costs to the bids it submits.
pub trait BiddingRule: Sync {
    fn bid(&self, driver: usize, private_costs: &[f64]) -> Vec<f64>;
}

/// Bid the private cost.
#[derive(Clone, Copy, Debug, Default)]
pub struct Truthful;

impl BiddingRule for Truthful {
    fn bid(&self, _driver: usize, private_costs: &[f64]) -> Vec<f64> {
        private_costs.to_vec()
    }
}

impl<F> BiddingRule for F
where
    F: Fn(usize, &[f64]) -> Vec<f64> + Sync,
{
    fn bid(&self, driver: usize, private_costs: &[f64]) -> Vec<f64> {
        self(driver, private_costs)
    }
}

/// Collects bids from every driver of the group (rows of `private_costs`),
/// runs the VCG auction and scores it against the private costs.
pub fn run_group_auction(
    private_costs: &[f64],
    f_row: &[u32],
    cbar: &[f64],
    rule: &dyn BiddingRule,
) -> Result<AuctionOutcome> {
    let types = f_row.len();
    if types == 0 || private_costs.len() % types != 0 {
        return Err(Error::Domain("private cost table does not match allocation row".into()));
    }
    let drivers = private_costs.len() / types;
    let mut b = Vec::with_capacity(private_costs.len());
    for a in 0..drivers {
        let row = rule.bid(a, &private_costs[a * types..(a + 1) * types]);
        if row.len() != types {
            return Err(Error::Domain(format!("driver {a} bid on {} task pairs", row.len())));
        }
        b.extend(row);
    }
    let bids = BidMatrix::new(b, types)?;
    let (allocation, rewards) = vcg_auction(&bids, f_row, cbar)?;

    let mut declared = 0.0;
    let mut truth = 0.0;
    let mut payoffs = Vec::with_capacity(drivers);
    for (a, &j) in allocation.y.iter().enumerate() {
        let c = private_costs[a * types + j];
        declared += cbar[j] - bids.row(a)[j];
        truth += cbar[j] - c;
        payoffs.push(rewards[a] - c);
    }
    Ok(AuctionOutcome {
        allocation,
        rewards,
        payoffs,
        declared_surplus: declared,
        true_surplus: truth,
        slack_tasks: vec![0; types],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_driver() {
        let (alloc, z) = solve_group_assignment(&[3.0], &[1]).unwrap();
        assert_eq!(alloc.y, vec![0]);
        assert!((z - 3.0).abs() < 1e-9);

        let bids = BidMatrix::new(vec![4.0], 1).unwrap();
        let w = vcg_rewards(&bids, &[1], &[10.0]).unwrap();
        assert!((w[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn two_by_two_assignment() {
        let (alloc, z) = solve_group_assignment(&[8.0, 1.0, 6.0, 1.0], &[1, 1]).unwrap();
        assert_eq!(alloc.y, vec![0, 1]);
        assert!((z - 9.0).abs() < 1e-9);
    }

    #[test]
    fn same_type_rewards_equal_cbar() {
        let bids = BidMatrix::new(vec![3.0, 5.0], 1).unwrap();
        let w = vcg_rewards(&bids, &[2], &[7.0]).unwrap();
        assert!(w.iter().all(|x| (x - 7.0).abs() < 1e-9));
    }

    #[test]
    fn worked_reward_example() {
        let bids = BidMatrix::new(vec![2.0, 9.0, 4.0, 9.0], 2).unwrap();
        let (alloc, w) = vcg_auction(&bids, &[1, 1], &[10.0, 10.0]).unwrap();
        assert_eq!(alloc.y, vec![0, 1]);
        assert!((w[0] - 5.0).abs() < 1e-9, "{w:?}");
        assert!((w[1] - 10.0).abs() < 1e-9, "{w:?}");
        let scratch = vcg_rewards_from_scratch(&bids, &[1, 1], &[10.0, 10.0]).unwrap();
        assert_eq!(w, scratch);
    }

    #[test]
    fn wrong_row_total_is_infeasible() {
        assert!(matches!(
            solve_group_assignment(&[1.0, 2.0], &[2, 1]),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn truthful_outcome_surpluses_agree() {
        let private = [1.0, 2.0, 0.5, 3.0, 2.0, 1.0, 0.0, 0.0, 4.0, 1.0];
        let out = run_group_auction(&private, &[3, 2], &[5.0, 6.0], &Truthful).unwrap();
        assert_eq!(out.declared_surplus, out.true_surplus);
        assert_eq!(out.allocation.counts, vec![3, 2]);
        let savings: Vec<f64> = private
            .iter()
            .enumerate()
            .map(|(i, c)| [5.0, 6.0][i % 2] - c)
            .collect();
        let (alloc, z) = solve_group_assignment(&savings, &[3, 2]).unwrap();
        assert_eq!(alloc, out.allocation);
        assert!((z - out.true_surplus).abs() < 1e-8);
    }
}
