//! Global matching over all drivers: the single large assignment problem the
//! hierarchical scheme is compared against.
//!
//! Every driver takes one task pair, task pair `rs` takes at most `n[rs]`
//! drivers, and total savings `sum (cbar - c)` is maximized. The optimal
//! task prices `lambda >= 0` give the competitive equilibrium rewards
//! `w = cbar - lambda`, and each driver's utility is `rho_a = max (w - c_a)`.

use serde::{Deserialize, Serialize};

use crate::scenario::Instance;
use crate::transport::{from_fixed, from_fixed_wide, to_fixed, TransportSolver};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalMatching {
    /// Task-pair index per driver.
    pub y: Vec<usize>,
    pub lambda: Vec<f64>,
    pub surplus: f64,
    /// Surplus in fixed-point units, exact for the quantized costs.
    pub surplus_fixed: i128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub w: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Largest violation of each equilibrium condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    /// Each driver gets a utility-maximizing task pair and `rho` is that utility.
    pub utility_max: f64,
    /// Capacity, non-negative task prices, and full use of priced task pairs.
    pub supply_demand: f64,
    /// Each driver is assigned exactly once.
    pub conservation: f64,
    pub tol: f64,
}

impl EquilibriumReport {
    pub fn utility_max_ok(&self) -> bool {
        self.utility_max <= self.tol
    }

    pub fn supply_demand_ok(&self) -> bool {
        self.supply_demand <= self.tol
    }

    pub fn conservation_ok(&self) -> bool {
        self.conservation <= self.tol
    }

    pub fn passed(&self) -> bool {
        self.utility_max_ok() && self.supply_demand_ok() && self.conservation_ok()
    }
}

fn fixed_costs(inst: &Instance) -> Vec<i64> {
    let t = inst.num_task_pairs();
    inst.private_costs
        .iter()
        .enumerate()
        .map(|(i, &c)| -to_fixed(inst.cbar[i % t] - c))
        .collect()
}

/// Solves the global assignment exactly.
pub fn solve_global_relaxation(inst: &Instance) -> Result<GlobalMatching> {
    let t = inst.num_task_pairs();
    if inst.private_costs.len() != inst.num_drivers() * t {
        return Err(Error::Validation("instance has no private costs loaded".into()));
    }
    let costs = fixed_costs(inst);
    let mut solver = TransportSolver::new(&costs, t, &inst.n)?;
    solver.solve_all()?;
    let y = solver.assignment();
    let surplus = y
        .iter()
        .enumerate()
        .map(|(a, &j)| inst.cbar[j] - inst.private_row(a)[j])
        .sum();
    Ok(GlobalMatching {
        y,
        lambda: solver.prices().iter().map(|&p| from_fixed(p)).collect(),
        surplus,
        surplus_fixed: -solver.total_cost(),
    })
}

/// Rewards `w = cbar - lambda` and driver utilities `rho_a = max (w - c_a)`.
pub fn extract_equilibrium(m: &GlobalMatching, inst: &Instance) -> Equilibrium {
    let w: Vec<f64> = inst.cbar.iter().zip(&m.lambda).map(|(c, l)| c - l).collect();
    let rho = (0..inst.num_drivers())
        .map(|a| {
            inst.private_row(a)
                .iter()
                .zip(&w)
                .map(|(c, w)| w - c)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Equilibrium { w, rho }
}

/// Checks an assignment (`None` = unassigned) against rewards and utilities.
pub fn verify_equilibrium(y: &[Option<usize>], eq: &Equilibrium, inst: &Instance, tol: f64) -> EquilibriumReport {
    let t = inst.num_task_pairs();
    let mut utility = 0.0f64;
    let mut conservation = 0.0f64;
    let mut counts = vec![0u64; t];
    for a in 0..inst.num_drivers() {
        let c = inst.private_row(a);
        let rho = eq.rho[a];
        for k in 0..t {
            utility = utility.max(eq.w[k] - c[k] - rho);
        }
        match y.get(a).copied().flatten() {
            Some(j) => {
                counts[j] += 1;
                utility = utility.max((eq.w[j] - c[j] - rho).abs());
            }
            None => conservation = conservation.max(1.0),
        }
    }
    if y.len() > inst.num_drivers() {
        conservation = conservation.max(1.0);
    }

    let mut supply = 0.0f64;
    for j in 0..t {
        let price = inst.cbar[j] - eq.w[j];
        let n = inst.n[j] as u64;
        supply = supply.max(counts[j].saturating_sub(n) as f64);
        supply = supply.max(-price);
        if price > tol {
            supply = supply.max(n.saturating_sub(counts[j]) as f64);
        }
    }
    EquilibriumReport {
        utility_max: utility,
        supply_demand: supply,
        conservation,
        tol,
    }
}

/// Drivers per (OD group, task pair), row-major.
pub fn aggregate_matching(y: &[usize], inst: &Instance) -> Vec<u32> {
    let t = inst.num_task_pairs();
    let mut agg = vec![0u32; inst.num_od() * t];
    for (a, &j) in y.iter().enumerate() {
        agg[inst.driver_od[a] as usize * t + j] += 1;
    }
    agg
}

pub const BRUTE_FORCE_MAX_DRIVERS: usize = 8;
pub const BRUTE_FORCE_MAX_TYPES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BruteForce {
    pub surplus_fixed: i128,
    pub surplus: f64,
    /// Every optimal assignment, in lexicographic order.
    pub optima: Vec<Vec<usize>>,
}

/// Enumerates every feasible assignment of a tiny instance.
pub fn brute_force_oracle(inst: &Instance) -> Result<BruteForce> {
    let (a, t) = (inst.num_drivers(), inst.num_task_pairs());
    if a > BRUTE_FORCE_MAX_DRIVERS || t > BRUTE_FORCE_MAX_TYPES {
        return Err(Error::TooLarge(format!(
            "brute force takes at most {BRUTE_FORCE_MAX_DRIVERS} drivers and {BRUTE_FORCE_MAX_TYPES} task pairs, got {a} and {t}"
        )));
    }
    let savings: Vec<i128> = fixed_costs(inst).iter().map(|&c| -(c as i128)).collect();
    let mut best: Option<i128> = None;
    let mut optima = Vec::new();
    let mut y = vec![0usize; a];
    let total = t.pow(a as u32);
    for code in 0..total {
        let mut x = code;
        for slot in y.iter_mut().rev() {
            *slot = x % t;
            x /= t;
        }
        let mut counts = vec![0u32; t];
        for &j in &y {
            counts[j] += 1;
        }
        if counts.iter().zip(&inst.n).any(|(c, n)| c > n) {
            continue;
        }
        let z: i128 = y.iter().enumerate().map(|(i, &j)| savings[i * t + j]).sum();
        match best {
            Some(b) if z < b => {}
            Some(b) if z == b => optima.push(y.clone()),
            _ => {
                best = Some(z);
                optima = vec![y.clone()];
            }
        }
    }
    let surplus_fixed = best.ok_or_else(|| Error::Infeasible("no feasible assignment".into()))?;
    Ok(BruteForce {
        surplus_fixed,
        surplus: from_fixed_wide(surplus_fixed),
        optima,
    })
}
