#![allow(dead_code)]

use csdmatch::network::{all_zone_times, synthetic_network, SyntheticNetworkParams, TravelTimeMatrix};
use csdmatch::scenario::{generate_instance, Instance, ScenarioParams};

/// A small symmetric road network with eight zones.
pub fn small_times(seed: u64) -> TravelTimeMatrix {
    let net = synthetic_network(&SyntheticNetworkParams {
        num_nodes: 40,
        num_roads: 60,
        num_zones: 8,
        extent_km: 10.0,
        speed_kmh: 50.0,
        seed,
    })
    .unwrap();
    all_zone_times(&net).unwrap()
}

/// Forty zones on a few hundred intersections.
pub fn medium_times(seed: u64) -> TravelTimeMatrix {
    let net = synthetic_network(&SyntheticNetworkParams {
        num_nodes: 200,
        num_roads: 300,
        num_zones: 40,
        extent_km: 15.0,
        speed_kmh: 50.0,
        seed,
    })
    .unwrap();
    all_zone_times(&net).unwrap()
}

pub fn instance(t: &TravelTimeMatrix, num_od: usize, num_task_pairs: usize, num_drivers: usize, theta: f64, seed: u64) -> Instance {
    let params = ScenarioParams {
        num_od,
        num_task_pairs,
        num_drivers,
        theta,
        seed,
        ..ScenarioParams::default()
    };
    generate_instance(&params, t).unwrap()
}

pub mod group_value {
    use csdmatch::auction::solve_group_assignment;
    use csdmatch::master::logit_value_function;
    use csdmatch::scenario::{gumbel_mean, sample_gumbel, stream_rng};

    /// Allocation shares; `q p` is integral for q in {50, 500, 5000}.
    pub const SHARES: [f64; 5] = [0.3, 0.2, 0.2, 0.16, 0.14];
    pub const DETOUR: [f64; 5] = [4.0, 2.5, 6.0, 1.0, 3.5];
    pub const CBAR: [f64; 5] = [7.0, 4.0, 8.5, 2.0, 5.5];

    /// Fluid value of a group of `q` drivers with the fixed shares, shifted to
    /// mode-0 Gumbel noise.
    pub fn fluid(q: u32, theta: f64) -> f64 {
        let f: Vec<f64> = SHARES.iter().map(|p| p * q as f64).collect();
        logit_value_function(&f, &DETOUR, &CBAR, theta, q as f64).unwrap() + q as f64 * gumbel_mean(theta)
    }

    /// Mean optimal surplus of `reps` sampled groups.
    pub fn sampled(q: u32, theta: f64, reps: usize, seed: u64) -> f64 {
        let f_row: Vec<u32> = SHARES.iter().map(|p| (p * q as f64).round() as u32).collect();
        assert_eq!(f_row.iter().sum::<u32>(), q);
        let mut total = 0.0;
        for r in 0..reps {
            let mut rng = stream_rng(seed, r as u64);
            let eps = sample_gumbel(theta, q as usize * 5, &mut rng).unwrap();
            let savings: Vec<f64> = eps
                .iter()
                .enumerate()
                .map(|(i, e)| CBAR[i % 5] - (DETOUR[i % 5] - e))
                .collect();
            total += solve_group_assignment(&savings, &f_row).unwrap().1;
        }
        total / reps as f64
    }

    pub fn relative_gap(q: u32, theta: f64, reps: usize, seed: u64) -> f64 {
        let z = fluid(q, theta);
        (sampled(q, theta, reps, seed) - z).abs() / z.abs()
    }
}
