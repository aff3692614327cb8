//! Synthetic matching instances.
//!
//! An instance fixes the driver groups (one per origin-destination pair), the
//! task supply per pickup-delivery pair, the detour and dedicated-vehicle
//! costs, and every driver's private cost `c = C - eps` with `eps` i.i.d.
//! Gumbel noise of scale `theta`.
//!
//! Random streams come from one ChaCha8 seed split by stream id, one stream
//! per entity kind ([`STREAM_PAIRS`], [`STREAM_DRIVERS`], [`STREAM_TASKS`],
//! [`STREAM_NOISE`]), so instances are reproducible across platforms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::network::{detour_cost, TravelTimeMatrix, ZonePair};
use crate::{Error, Result};

pub const STREAM_PAIRS: u64 = 0;
pub const STREAM_DRIVERS: u64 = 1;
pub const STREAM_TASKS: u64 = 2;
pub const STREAM_NOISE: u64 = 3;

/// Costs live on a 2^-32 minute grid, so that `c + eps == C` holds exactly
/// in floating point.
const GRID: f64 = 4_294_967_296.0;

pub fn quantize(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub num_od: usize,
    pub num_task_pairs: usize,
    pub num_drivers: usize,
    /// Logit scale of the private-cost noise.
    pub theta: f64,
    /// Dedicated cost per minute of task travel time.
    pub gamma: f64,
    pub seed: u64,
    /// Tasks per driver.
    pub task_multiplier: usize,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            num_od: 100,
            num_task_pairs: 100,
            num_drivers: 50_000,
            theta: 1.0,
            gamma: 3.0,
            seed: 0,
            task_multiplier: 2,
        }
    }
}

impl ScenarioParams {
    pub fn num_tasks(&self) -> usize {
        self.task_multiplier * self.num_drivers
    }

    pub fn validate(&self, available_pairs: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return fail(format!("theta must be positive, got {}", self.theta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.num_od == 0 || self.num_task_pairs == 0 {
            return fail("need at least one OD pair and one task pair".into());
        }
        if self.num_od > available_pairs || self.num_task_pairs > available_pairs {
            return fail(format!(
                "{} OD / {} task pairs requested, network has {available_pairs} zone pairs",
                self.num_od, self.num_task_pairs
            ));
        }
        if self.num_drivers < self.num_od {
            return fail(format!(
                "{} drivers cannot cover {} OD pairs",
                self.num_drivers, self.num_od
            ));
        }
        if self.num_tasks() < self.num_task_pairs {
            return fail(format!(
                "{} tasks cannot cover {} task pairs",
                self.num_tasks(),
                self.num_task_pairs
            ));
        }
        Ok(())
    }
}

/// One matching problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub params: ScenarioParams,
    pub od_pairs: Vec<ZonePair>,
    pub task_pairs: Vec<ZonePair>,
    /// Drivers per OD pair.
    pub q: Vec<u32>,
    /// Tasks per task pair.
    pub n: Vec<u32>,
    /// Detour minutes, `|W| x |T|` row-major.
    pub detour: Vec<f64>,
    /// Dedicated-vehicle cost per task pair.
    pub cbar: Vec<f64>,
    /// OD index of every driver.
    pub driver_od: Vec<u32>,
    /// `|A| x |T|` row-major; stored in a separate binary block.
    #[serde(skip)]
    pub private_costs: Vec<f64>,
}

impl Instance {
    pub fn num_od(&self) -> usize {
        self.od_pairs.len()
    }

    pub fn num_task_pairs(&self) -> usize {
        self.task_pairs.len()
    }

    pub fn num_drivers(&self) -> usize {
        self.driver_od.len()
    }

    pub fn detour_at(&self, od: usize, rs: usize) -> f64 {
        self.detour[od * self.task_pairs.len() + rs]
    }

    pub fn detour_row(&self, od: usize) -> &[f64] {
        let t = self.task_pairs.len();
        &self.detour[od * t..(od + 1) * t]
    }

    pub fn private_row(&self, driver: usize) -> &[f64] {
        let t = self.task_pairs.len();
        &self.private_costs[driver * t..(driver + 1) * t]
    }

    /// Noise draw that produced `driver`'s private cost for `rs`.
    pub fn noise(&self, driver: usize, rs: usize) -> f64 {
        self.detour_at(self.driver_od[driver] as usize, rs) - self.private_row(driver)[rs]
    }

    /// Driver indices per OD group, ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.od_pairs.len()];
        for (a, &od) in self.driver_od.iter().enumerate() {
            g[od as usize].push(a);
        }
        g
    }

    /// Checks the structural invariants; returns the first violation.
    pub fn check(&self) -> Result<()> {
        let (w, t, a) = (self.num_od(), self.num_task_pairs(), self.num_drivers());
        let bad = |m: String| Err(Error::Internal(m));
        if self.q.len() != w || self.n.len() != t || self.cbar.len() != t || self.detour.len() != w * t {
            return bad("dimension mismatch".into());
        }
        if self.private_costs.len() != a * t {
            return bad(format!("private cost table has {} entries, expected {}", self.private_costs.len(), a * t));
        }
        if let Some(i) = self.q.iter().position(|&x| x == 0) {
            return bad(format!("OD {i} has no drivers"));
        }
        if let Some(i) = self.n.iter().position(|&x| x == 0) {
            return bad(format!("task pair {i} has no tasks"));
        }
        if self.q.iter().map(|&x| x as usize).sum::<usize>() != a {
            return bad("driver counts do not add up".into());
        }
        if self.n.iter().map(|&x| x as usize).sum::<usize>() != self.params.task_multiplier * a {
            return bad("task counts do not add up".into());
        }
        let mut counted = vec![0u32; w];
        for &od in &self.driver_od {
            counted[od as usize] += 1;
        }
        if counted != self.q {
            return bad("driver_od disagrees with q".into());
        }
        Ok(())
    }

    /// Serializes the instance (without private costs) as JSON.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Reads the JSON document; private costs are left empty.
    pub fn read_json(path: impl AsRef<Path>) -> Result<Instance> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_private_costs(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_cost_block(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_private_costs(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let mut r = BufReader::new(File::open(path)?);
        self.private_costs = read_cost_block(&mut r, self.num_drivers(), self.num_task_pairs())?;
        Ok(())
    }

    /// Single-file binary cache: JSON header followed by the private costs.
    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let json = serde_json::to_vec(self)?;
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        write_cost_block(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<Instance> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Config("not an instance cache file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported cache version {version}")));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let mut inst: Instance = serde_json::from_slice(&json)?;
        inst.private_costs = read_cost_block(&mut r, inst.num_drivers(), inst.num_task_pairs())?;
        Ok(inst)
    }

    /// Loads either format: a binary cache, or a JSON document with an
    /// optional private-cost sidecar.
    pub fn load(path: impl AsRef<Path>, private_costs: Option<&Path>) -> Result<Instance> {
        let path = path.as_ref();
        let mut head = [0u8; 4];
        File::open(path)?.read_exact(&mut head).ok();
        let mut inst = if &head == CACHE_MAGIC {
            Instance::read_cache(path)?
        } else {
            Instance::read_json(path)?
        };
        if let Some(p) = private_costs {
            inst.read_private_costs(p)?;
        }
        Ok(inst)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"CSDI";
const COSTS_MAGIC: &[u8; 4] = b"CSDC";
const FORMAT_VERSION: u32 = 1;

fn write_cost_block(w: &mut impl Write, inst: &Instance) -> Result<()> {
    w.write_all(COSTS_MAGIC)?;
    w.write_u64::<LittleEndian>(inst.num_drivers() as u64)?;
    w.write_u64::<LittleEndian>(inst.num_task_pairs() as u64)?;
    for &c in &inst.private_costs {
        w.write_f64::<LittleEndian>(c)?;
    }
    Ok(())
}

fn read_cost_block(r: &mut impl Read, drivers: usize, tasks: usize) -> Result<Vec<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != COSTS_MAGIC {
        return Err(Error::Config("not a private-cost block".into()));
    }
    let a = r.read_u64::<LittleEndian>()? as usize;
    let t = r.read_u64::<LittleEndian>()? as usize;
    if (a, t) != (drivers, tasks) {
        return Err(Error::Config(format!(
            "private costs are {a}x{t}, instance is {drivers}x{tasks}"
        )));
    }
    let mut out = vec![0.0; a * t];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

/// `count` draws with CDF `exp(-exp(-theta x))` (mode 0, mean `0.5772/theta`).
pub fn sample_gumbel(theta: f64, count: usize, rng: &mut impl RngCore) -> Result<Vec<f64>> {
    let dist = gumbel(theta)?;
    Ok((0..count).map(|_| dist.sample(rng)).collect())
}

fn gumbel(theta: f64) -> Result<Gumbel<f64>> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Domain(format!("Gumbel scale theta must be positive, got {theta}")));
    }
    Gumbel::new(0.0, 1.0 / theta).map_err(|e| Error::Domain(e.to_string()))
}

/// Mean of the mode-0 noise, `euler_gamma / theta`.
pub fn gumbel_mean(theta: f64) -> f64 {
    0.577_215_664_901_532_9 / theta
}

/// Cost of serving a task with the operator's own vehicle.
pub fn dedicated_cost(t_rs: f64, gamma: f64) -> f64 {
    gamma * t_rs
}

/// `|W| x |T|` detour table on the cost grid.
pub fn detour_matrix(t: &TravelTimeMatrix, od_pairs: &[ZonePair], task_pairs: &[ZonePair]) -> Vec<f64> {
    od_pairs
        .iter()
        .flat_map(|&od| task_pairs.iter().map(move |&rs| quantize(detour_cost(t, od, rs))))
        .collect()
}

/// Counts per category: one guaranteed per category, the rest uniform.
fn covering_counts(total: usize, categories: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..categories).collect();
    labels.extend((categories..total).map(|_| rng.random_range(0..categories)));
    labels
}

/// Samples an instance on the given travel-time matrix.
pub fn generate_instance(params: &ScenarioParams, t: &TravelTimeMatrix) -> Result<Instance> {
    let candidates = t.candidate_pairs();
    params.validate(candidates.len())?;
    let seed = params.seed;

    let mut rng = stream_rng(seed, STREAM_PAIRS);
    let od_pairs: Vec<ZonePair> = index::sample(&mut rng, candidates.len(), params.num_od)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let task_pairs: Vec<ZonePair> = index::sample(&mut rng, candidates.len(), params.num_task_pairs)
        .into_iter()
        .map(|i| candidates[i])
        .collect();

    let driver_od: Vec<u32> = covering_counts(params.num_drivers, params.num_od, &mut stream_rng(seed, STREAM_DRIVERS))
        .into_iter()
        .map(|x| x as u32)
        .collect();
    let mut q = vec![0u32; params.num_od];
    for &od in &driver_od {
        q[od as usize] += 1;
    }
    let mut n = vec![0u32; params.num_task_pairs];
    for rs in covering_counts(params.num_tasks(), params.num_task_pairs, &mut stream_rng(seed, STREAM_TASKS)) {
        n[rs] += 1;
    }

    let detour = detour_matrix(t, &od_pairs, &task_pairs);
    let cbar: Vec<f64> = task_pairs
        .iter()
        .map(|&rs| dedicated_cost(t.pair_time(rs), params.gamma))
        .collect();

    let tcount = task_pairs.len();
    let noise = gumbel(params.theta)?;
    let mut rng = stream_rng(seed, STREAM_NOISE);
    let mut private_costs = Vec::with_capacity(driver_od.len() * tcount);
    for &od in &driver_od {
        let row = &detour[od as usize * tcount..(od as usize + 1) * tcount];
        for &c in row {
            let eps = quantize(noise.sample(&mut rng));
            private_costs.push(c - eps);
        }
    }

    let inst = Instance {
        params: params.clone(),
        od_pairs,
        task_pairs,
        q,
        n,
        detour,
        cbar,
        driver_od,
        private_costs,
    };
    inst.check()?;
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{all_zone_times, synthetic_network, SyntheticNetworkParams};

    fn small_times() -> TravelTimeMatrix {
        let net = synthetic_network(&SyntheticNetworkParams {
            num_nodes: 30,
            num_roads: 45,
            num_zones: 8,
            extent_km: 6.0,
            speed_kmh: 40.0,
            seed: 11,
        })
        .unwrap();
        all_zone_times(&net).unwrap()
    }

    fn params(w: usize, t: usize, a: usize) -> ScenarioParams {
        ScenarioParams {
            num_od: w,
            num_task_pairs: t,
            num_drivers: a,
            seed: 42,
            ..ScenarioParams::default()
        }
    }

    #[test]
    fn dedicated_cost_examples() {
        assert_eq!(dedicated_cost(10.0, 3.0), 30.0);
        assert_eq!(dedicated_cost(0.0, 3.0), 0.0);
        assert_eq!(dedicated_cost(7.25, 1.0), 7.25);
    }

    #[test]
    fn same_seed_same_bytes() {
        let t = small_times();
        let a = generate_instance(&params(5, 6, 40), &t).unwrap();
        let b = generate_instance(&params(5, 6, 40), &t).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let bits = |i: &Instance| i.private_costs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = generate_instance(&ScenarioParams { seed: 43, ..params(5, 6, 40) }, &t).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn tiny_instance_invariants() {
        let t = small_times();
        let p = params(2, 2, 4);
        let inst = generate_instance(&p, &t).unwrap();
        assert_eq!(inst.q.iter().sum::<u32>(), 4);
        assert_eq!(inst.n.iter().sum::<u32>(), 8);
        assert!(inst.q.iter().all(|&x| x >= 1));
        assert!(inst.n.iter().all(|&x| x >= 1));
        for (w, &od) in inst.od_pairs.iter().enumerate() {
            assert_ne!(od.0, od.1);
            for (r, &rs) in inst.task_pairs.iter().enumerate() {
                assert_eq!(inst.detour_at(w, r), quantize(detour_cost(&t, od, rs)));
                assert!(inst.detour_at(w, r) >= 0.0);
            }
        }
        for (r, &rs) in inst.task_pairs.iter().enumerate() {
            assert_eq!(inst.cbar[r], 3.0 * t.pair_time(rs));
        }
        // Re-draw the noise stream: c + eps must reproduce C bit for bit.
        let mut rng = stream_rng(p.seed, STREAM_NOISE);
        let eps = sample_gumbel(p.theta, 4 * 2, &mut rng).unwrap();
        for a in 0..4 {
            for r in 0..2 {
                let e = quantize(eps[a * 2 + r]);
                let od = inst.driver_od[a] as usize;
                assert_eq!(inst.private_row(a)[r] + e, inst.detour_at(od, r));
                assert_eq!(inst.noise(a, r), e);
            }
        }
    }

    #[test]
    fn infeasible_params() {
        let t = small_times();
        assert!(matches!(generate_instance(&params(5, 5, 3), &t), Err(Error::Config(_))));
        assert!(matches!(
            generate_instance(&ScenarioParams { theta: 0.0, ..params(2, 2, 4) }, &t),
            Err(Error::Config(_))
        ));
        assert!(matches!(generate_instance(&params(10_000, 2, 20_000), &t), Err(Error::Config(_))));
    }

    #[test]
    fn gumbel_domain() {
        let mut rng = stream_rng(1, 0);
        assert!(matches!(sample_gumbel(0.0, 1, &mut rng), Err(Error::Domain(_))));
        assert!(matches!(sample_gumbel(-1.0, 1, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn gumbel_moments() {
        let mut rng = stream_rng(7, 0);
        let mut xs = sample_gumbel(1.0, 1_000_000, &mut rng).unwrap();
        xs.sort_by(f64::total_cmp);
        let median = xs[xs.len() / 2];
        assert!((median - (-(2f64.ln()).ln())).abs() < 0.01, "median {median}");

        let ys = sample_gumbel(2.0, 1_000_000, &mut rng).unwrap();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        assert!((mean - 0.5772 / 2.0).abs() < 0.005, "mean {mean}");

        let zs = sample_gumbel(100.0, 100_000, &mut rng).unwrap();
        let m = zs.iter().sum::<f64>() / zs.len() as f64;
        let var = zs.iter().map(|z| (z - m).powi(2)).sum::<f64>() / (zs.len() - 1) as f64;
        assert!(var < 1e-3, "variance {var}");
    }

    #[test]
    fn cache_and_sidecar_round_trip() {
        let t = small_times();
        let inst = generate_instance(&params(3, 4, 25), &t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("i.bin");
        inst.write_cache(&cache).unwrap();
        assert_eq!(Instance::load(&cache, None).unwrap(), inst);

        let json = dir.path().join("i.json");
        let costs = dir.path().join("i.costs");
        inst.write_json(&json).unwrap();
        inst.write_private_costs(&costs).unwrap();
        assert_eq!(Instance::load(&json, Some(&costs)).unwrap(), inst);
    }
}
