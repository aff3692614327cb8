//! Browser demo: a four-group market whose fluid partition reacts to the
//! noise scale, the Gumbel noise behind it, and a single group auction with
//! an optional liar.
//!
//! Each export takes plain numbers and returns a JSON string; the `*_view`
//! functions underneath are ordinary Rust and tested natively.

use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use csdmatch::auction::{run_group_auction, Truthful};
use csdmatch::master::{build_kernel, extract_duals, round_partition, sinkhorn_solve, SinkhornConfig};
use csdmatch::scenario::{gumbel_mean, sample_gumbel, stream_rng};

/// Detour minutes for four driver groups (rows) and four task pairs.
pub const DETOUR: [f64; 16] = [
    2.0, 9.0, 14.0, 6.0, //
    8.0, 3.0, 11.0, 7.0, //
    12.0, 10.0, 1.5, 9.0, //
    5.0, 6.0, 8.0, 4.0,
];
pub const CBAR: [f64; 4] = [18.0, 15.0, 21.0, 12.0];
pub const GROUPS: [u32; 4] = [40, 25, 30, 35];
pub const TASKS: [u32; 4] = [30, 45, 25, 50];

#[derive(Debug, Serialize)]
pub struct PartitionView {
    pub theta: f64,
    pub rows: usize,
    pub cols: usize,
    pub fluid: Vec<f64>,
    pub integer: Vec<u32>,
    pub lambda: Vec<f64>,
    pub reward: Vec<f64>,
    pub capacity: Vec<u32>,
    pub iterations: usize,
}

/// Solves the demo market at `theta` with task counts scaled by `capacity`.
pub fn partition_view(theta: f64, capacity: f64) -> Result<PartitionView, String> {
    if !(capacity > 0.0 && capacity.is_finite()) {
        return Err(format!("capacity scale must be positive, got {capacity}"));
    }
    let n: Vec<u32> = TASKS.iter().map(|&x| ((x as f64 * capacity).round() as u32).max(1)).collect();
    let k = build_kernel(&DETOUR, &CBAR, theta).map_err(|e| e.to_string())?;
    let sol = sinkhorn_solve(&k, &GROUPS, &n, &SinkhornConfig::default()).map_err(|e| e.to_string())?;
    let duals = extract_duals(&sol.log_u, &sol.log_v, theta, &CBAR).map_err(|e| e.to_string())?;
    let savings: Vec<f64> = DETOUR.iter().enumerate().map(|(i, c)| CBAR[i % 4] - c).collect();
    let integer = round_partition(&sol.partition, &GROUPS, &n, &savings).map_err(|e| e.to_string())?;
    Ok(PartitionView {
        theta,
        rows: 4,
        cols: 4,
        fluid: sol.partition.f,
        integer: integer.counts,
        lambda: duals.lambda,
        reward: duals.w,
        capacity: n,
        iterations: sol.iterations,
    })
}

#[derive(Debug, Serialize)]
pub struct HistogramView {
    pub edges: Vec<f64>,
    pub counts: Vec<u32>,
    /// Gumbel density at each bin centre, scaled to counts.
    pub expected: Vec<f64>,
    pub sample_mean: f64,
    pub mean: f64,
}

pub fn histogram_view(theta: f64, count: usize, bins: usize, seed: u64) -> Result<HistogramView, String> {
    if count == 0 || bins == 0 {
        return Err("need at least one draw and one bin".into());
    }
    let mut rng = stream_rng(seed, 0);
    let draws = sample_gumbel(theta, count, &mut rng).map_err(|e| e.to_string())?;
    let (lo, hi) = (-3.0 / theta, 7.0 / theta);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u32; bins];
    for &x in &draws {
        if (lo..hi).contains(&x) {
            counts[((x - lo) / width) as usize] += 1;
        }
    }
    let edges: Vec<f64> = (0..=bins).map(|b| lo + b as f64 * width).collect();
    let expected = (0..bins)
        .map(|b| {
            let z = theta * (lo + (b as f64 + 0.5) * width);
            theta * (-z - (-z).exp()).exp() * width * count as f64
        })
        .collect();
    Ok(HistogramView {
        edges,
        counts,
        expected,
        sample_mean: draws.iter().sum::<f64>() / count as f64,
        mean: gumbel_mean(theta),
    })
}

#[derive(Debug, Serialize)]
pub struct AuctionView {
    pub drivers: usize,
    pub types: usize,
    pub costs: Vec<f64>,
    pub cbar: Vec<f64>,
    pub slots: Vec<u32>,
    pub truthful: Side,
    /// Outcome when `liar` adds `shift` to every declared cost.
    pub misreport: Side,
    pub liar: usize,
}

#[derive(Debug, Serialize)]
pub struct Side {
    pub task: Vec<usize>,
    pub reward: Vec<f64>,
    pub payoff: Vec<f64>,
    pub surplus: f64,
}

/// A random group of `drivers` with `types` task pairs, auctioned truthfully
/// and with one driver shading its bids by `shift`.
pub fn auction_view(drivers: usize, types: usize, liar: usize, shift: f64, seed: u64) -> Result<AuctionView, String> {
    if drivers == 0 || types == 0 || drivers > 12 || types > 4 {
        return Err("drivers must be 1..=12 and task pairs 1..=4".into());
    }
    if liar >= drivers {
        return Err(format!("no driver {liar}"));
    }
    let mut rng = stream_rng(seed, 1);
    let costs: Vec<f64> = (0..drivers * types).map(|_| (rng.random_range(1.0..15.0f64) * 10.0).round() / 10.0).collect();
    let cbar: Vec<f64> = (0..types).map(|_| (rng.random_range(12.0..20.0f64)).round()).collect();
    let mut slots = vec![0u32; types];
    for a in 0..drivers {
        slots[a % types] += 1;
    }
    let side = |o: csdmatch::auction::AuctionOutcome| Side {
        task: o.allocation.y,
        reward: o.rewards,
        payoff: o.payoffs,
        surplus: o.true_surplus,
    };
    let truthful = run_group_auction(&costs, &slots, &cbar, &Truthful).map_err(|e| e.to_string())?;
    let rule = |d: usize, c: &[f64]| -> Vec<f64> {
        if d == liar {
            c.iter().map(|x| x + shift).collect()
        } else {
            c.to_vec()
        }
    };
    let lied = run_group_auction(&costs, &slots, &cbar, &rule).map_err(|e| e.to_string())?;
    Ok(AuctionView {
        drivers,
        types,
        costs,
        cbar,
        slots,
        truthful: side(truthful),
        misreport: side(lied),
        liar,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn partition(theta: f64, capacity: f64) -> Result<String, JsValue> {
    to_js(partition_view(theta, capacity))
}

#[wasm_bindgen]
pub fn gumbel_histogram(theta: f64, count: usize, bins: usize, seed: u64) -> Result<String, JsValue> {
    to_js(histogram_view(theta, count, bins, seed))
}

#[wasm_bindgen]
pub fn auction(drivers: usize, types: usize, liar: usize, shift: f64, seed: u64) -> Result<String, JsValue> {
    to_js(auction_view(drivers, types, liar, shift, seed))
}
