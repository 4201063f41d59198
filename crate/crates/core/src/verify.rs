//! End-to-end suite: profiles to `(g, b)` to models to inequality sweeps,
//! plus the closed-form geodesic campaign against breadth-first search.

use crate::energy::{
    capacity_vs_cutoff, certified_pi_ratio, clarkson_check, cs_instance, laakso_cutoff, pi_ratio, psi_scale, subadditivity_check,
    EnergyGraph, InequalityName, InequalityRecord, NodeFunction,
};
use crate::error::{Error, Result};
use crate::laakso::{
    occupation_rows, volume_scale, GeodesicKind, GraphSummary, LaaksoModel, LaaksoPoint, OccupationRow,
    QuotientGraph, UltraCoord,
};
use num_bigint::BigInt;
use num_rational::BigRational;
use crate::scaling::{derive_gb, rational_to_f64, BranchingProfile, DyadicProfile, GbPair, ProfileFile, Synthesis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Rounds to 12 significant digits.
pub fn sig12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// Independent generator for item `item` of sweep `sweep`.
pub fn item_rng(seed: u64, sweep: u32, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sweep as u64) << 40) ^ item);
    rng
}

fn default_range() -> (i32, i32) {
    (-4, 10)
}
fn default_c() -> f64 {
    1.0
}
fn default_balls() -> usize {
    50
}
fn default_functions() -> usize {
    30
}
fn default_pairs() -> usize {
    1000
}
fn default_volume() -> usize {
    200
}
fn default_energy_pairs() -> usize {
    200
}
fn default_pencil() -> usize {
    10_000
}
fn default_budget() -> usize {
    200_000
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub p: f64,
    #[serde(default)]
    pub dh: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub phi_file: Option<PathBuf>,
    #[serde(default)]
    pub psi_file: Option<PathBuf>,
    /// Levels on which power-law profiles are sampled.
    #[serde(default = "default_range")]
    pub profile_range: (i32, i32),
    #[serde(default = "default_c")]
    pub admissibility_c: f64,
    pub window: (i32, i32),
    /// Repeat the volume and PI sweeps on the window `[m - 1, n]`.
    #[serde(default = "default_true")]
    pub refine: bool,
    #[serde(default = "default_balls")]
    pub balls: usize,
    #[serde(default = "default_functions")]
    pub functions: usize,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_pairs")]
    pub triples: usize,
    #[serde(default = "default_volume")]
    pub volume_samples: usize,
    #[serde(default = "default_energy_pairs")]
    pub energy_pairs: usize,
    #[serde(default = "default_pencil")]
    pub pencil_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Maximum number of `(copy, vertex)` pairs per model.
    #[serde(default = "default_budget")]
    pub node_budget: usize,
    #[serde(default)]
    pub csv_dir: Option<PathBuf>,
}

impl SuiteConfig {
    pub fn power_law(p: f64, dh: f64, beta: f64, window: (i32, i32)) -> Self {
        Self {
            p,
            dh: Some(dh),
            beta: Some(beta),
            phi_file: None,
            psi_file: None,
            profile_range: default_range(),
            admissibility_c: default_c(),
            window,
            refine: true,
            balls: default_balls(),
            functions: default_functions(),
            pairs: default_pairs(),
            triples: default_pairs(),
            volume_samples: default_volume(),
            energy_pairs: default_energy_pairs(),
            pencil_samples: default_pencil(),
            seed: 0,
            node_budget: default_budget(),
            csv_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 1.0) {
            return Err(Error::Invalid(format!("p = {} must exceed 1", self.p)));
        }
        if self.window.0 > self.window.1 {
            return Err(Error::Invalid(format!("window {:?} is empty", self.window)));
        }
        let sizes = [
            self.balls,
            self.functions,
            self.pairs,
            self.triples,
            self.volume_samples,
            self.energy_pairs,
            self.pencil_samples,
        ];
        if sizes.contains(&0) {
            return Err(Error::Invalid("sweep sizes must be at least 1".into()));
        }
        let powers = self.dh.is_some() && self.beta.is_some();
        let files = self.phi_file.is_some() && self.psi_file.is_some();
        if powers == files {
            return Err(Error::Invalid("give either dh and beta or phi_file and psi_file".into()));
        }
        Ok(())
    }

    pub fn profiles(&self, base: &Path) -> Result<(DyadicProfile, DyadicProfile)> {
        if let (Some(dh), Some(beta)) = (self.dh, self.beta) {
            let (lo, hi) = self.profile_range;
            return Ok((DyadicProfile::power_law(dh, lo, hi)?, DyadicProfile::power_law(beta, lo, hi)?));
        }
        let load = |p: &PathBuf| -> Result<DyadicProfile> {
            let path = if p.is_absolute() { p.clone() } else { base.join(p) };
            let file: ProfileFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            DyadicProfile::from_file(&file)
        };
        Ok((load(self.phi_file.as_ref().unwrap())?, load(self.psi_file.as_ref().unwrap())?))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeodesicTally {
    pub pairs: usize,
    pub monotone: usize,
    pub one_inversion: usize,
    pub two_inversions: usize,
    pub mismatches: usize,
    pub first_mismatch: Option<String>,
}

impl GeodesicTally {
    fn add(&mut self, kind: GeodesicKind) {
        self.pairs += 1;
        match kind {
            GeodesicKind::Monotone => self.monotone += 1,
            GeodesicKind::OneInversion => self.one_inversion += 1,
            GeodesicKind::TwoInversions => self.two_inversions += 1,
        }
    }

    pub fn all_kinds(&self) -> bool {
        self.monotone > 0 && self.one_inversion > 0 && self.two_inversions > 0
    }

    fn merge(&mut self, other: &Self) {
        self.pairs += other.pairs;
        self.monotone += other.monotone;
        self.one_inversion += other.one_inversion;
        self.two_inversions += other.two_inversions;
        self.mismatches += other.mismatches;
        if self.first_mismatch.is_none() {
            self.first_mismatch = other.first_mismatch.clone();
        }
    }
}

fn point_label(model: &LaaksoModel, p: &LaaksoPoint) -> String {
    serde_json::to_string(&model.point_to_json(p)).unwrap_or_default()
}

fn check_pair(model: &LaaksoModel, qg: &QuotientGraph, x: &LaaksoPoint, y: &LaaksoPoint, tally: &mut GeodesicTally) -> Result<()> {
    let (d, kind) = model.distance(x, y)?;
    let oracle = qg.oracle_distance(qg.node_of(model, x), qg.node_of(model, y))?;
    tally.add(kind);
    if d != oracle {
        tally.mismatches += 1;
        if tally.first_mismatch.is_none() {
            tally.first_mismatch = Some(format!(
                "{} {} closed={d} oracle={oracle}",
                point_label(model, x),
                point_label(model, y)
            ));
        }
    }
    Ok(())
}

/// Pairs built to force detours: both points share a tree vertex and differ
/// at one or two levels whose wormholes the vertex is not.
pub fn crafted_pairs(model: &LaaksoModel) -> Vec<(LaaksoPoint, LaaksoPoint)> {
    let glued: Vec<i32> = model.levels_iter().filter(|&k| model.g.digit(k).map_or(false, |d| d > 1)).collect();
    let mut out = Vec::new();
    let mut found = [false; 2];
    for t in 0..model.tree.num_vertices() {
        if found.iter().all(|f| *f) {
            break;
        }
        let lt = model.tree.vertex_level[t];
        let free: Vec<i32> = glued.iter().copied().filter(|&k| lt != Some(k) && lt.map_or(true, |l| k > l)).collect();
        let base = model.canonicalize(LaaksoPoint { u: UltraCoord { digits: vec![0; model.levels()] }, t });
        for (i, want) in [1usize, 2].iter().enumerate() {
            if found[i] || free.len() < *want {
                continue;
            }
            for w in free.windows(*want) {
                let mut u = base.u.clone();
                for &k in w {
                    u.digits[(k - model.m) as usize] = 1;
                }
                let y = model.canonicalize(LaaksoPoint { u, t });
                let kind = match model.distance(&base, &y) {
                    Ok((_, k)) => k,
                    Err(_) => continue,
                };
                let hit = if *want == 1 { kind == GeodesicKind::OneInversion } else { kind == GeodesicKind::TwoInversions };
                if hit {
                    out.push((base.clone(), y));
                    found[i] = true;
                    break;
                }
            }
        }
    }
    out
}

/// Exact comparison of the closed-form distance with breadth-first search on
/// `pairs` random canonical pairs and the crafted detour pairs.
pub fn geodesic_campaign(model: &LaaksoModel, qg: &QuotientGraph, pairs: usize, seed: u64) -> Result<GeodesicTally> {
    let parts: Vec<Result<GeodesicTally>> = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, 1, i as u64);
            let x = model.random_point(&mut rng);
            let y = model.random_point(&mut rng);
            let mut t = GeodesicTally::default();
            check_pair(model, qg, &x, &y, &mut t)?;
            Ok(t)
        })
        .collect();
    let mut tally = GeodesicTally::default();
    for p in parts {
        tally.merge(&p?);
    }
    for (x, y) in crafted_pairs(model) {
        check_pair(model, qg, &x, &y, &mut tally)?;
    }
    Ok(tally)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTally {
    pub triples: usize,
    pub symmetry_failures: usize,
    pub triangle_failures: usize,
    pub lipschitz_failures: usize,
    /// Largest `d_L / max(d_U, d_T)` seen.
    pub max_lipschitz_ratio: f64,
}

pub fn metric_checks(model: &LaaksoModel, triples: usize, seed: u64) -> Result<MetricTally> {
    let rows: Vec<Result<(bool, bool, bool, f64)>> = (0..triples)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, 2, i as u64);
            let x = model.random_point(&mut rng);
            let y = model.random_point(&mut rng);
            let z = model.random_point(&mut rng);
            let dxy = model.distance(&x, &y)?.0;
            let sym = dxy == model.distance(&y, &x)?.0;
            let tri = model.distance(&x, &z)?.0 <= dxy + model.distance(&y, &z)?.0;
            let prod = model.ultra_distance(&x.u, &y.u).max(model.tree.distance(x.t, y.t));
            let lip = dxy <= 3 * prod;
            let ratio = if prod == 0 { 0.0 } else { dxy as f64 / prod as f64 };
            Ok((sym, tri, lip, ratio))
        })
        .collect();
    let mut t = MetricTally { triples, ..Default::default() };
    for r in rows {
        let (sym, tri, lip, ratio) = r?;
        t.symmetry_failures += !sym as usize;
        t.triangle_failures += !tri as usize;
        t.lipschitz_failures += !lip as usize;
        t.max_lipschitz_ratio = t.max_lipschitz_ratio.max(ratio);
    }
    Ok(t)
}

/// A model together with its quotient graph and energy graph.
pub struct Fixture {
    pub model: LaaksoModel,
    pub graph: QuotientGraph,
    pub energy: EnergyGraph,
}

impl Fixture {
    pub fn build(g: &BranchingProfile, b: &BranchingProfile, window: (i32, i32), budget: usize) -> Result<Self> {
        let model = LaaksoModel::build(g, b, window.0, window.1, budget)?;
        let graph = QuotientGraph::build(&model)?;
        let energy = EnergyGraph::from_quotient(&graph);
        Ok(Self { model, graph, energy })
    }

    /// Mass-weighted random node.
    pub fn sample_center<R: Rng>(&self, rng: &mut R) -> usize {
        WeightedIndex::new(&self.energy.masses).expect("positive total mass").sample(rng)
    }

    pub fn center_point(&self, node: usize) -> LaaksoPoint {
        self.graph.rep_point(&self.model, node)
    }

    /// The same point in the model refined by one level.
    pub fn refine_point(&self, finer: &Fixture, p: &LaaksoPoint) -> usize {
        let mut digits = vec![0; finer.model.levels()];
        let shift = (self.model.m - finer.model.m) as usize;
        digits[shift..].copy_from_slice(&p.u.digits);
        let q = finer.model.canonicalize(LaaksoPoint { u: UltraCoord { digits }, t: p.t });
        finer.graph.node_of(&finer.model, &q)
    }
}

/// One sampled `(center, r)` with its measured constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: f64,
    pub constant: f64,
    pub witness_center: usize,
}

fn dyadic_radius<R: Rng>(rng: &mut R, lo: i32, hi: i32) -> f64 {
    (rng.gen_range(lo..=hi.max(lo)) as f64).exp2()
}

/// Ball masses for the atomic measure together with bounds valid for every
/// refinement: each `m`-cell copy lies within 3 units of its center, so it
/// surely lies in `B(x, r)` when its center is closer than `r - 3` units and
/// can only meet the ball when its center is closer than `r + 3` units.
#[derive(Clone, Debug, PartialEq)]
pub struct BallMass {
    pub lower: BigRational,
    pub measured: BigRational,
    pub upper: BigRational,
}

pub fn ball_mass_bounds(qg: &QuotientGraph, node: usize, r: f64) -> BallMass {
    let rr = r / qg.edge_length;
    let dist = qg.bfs(node, (rr + 3.0).ceil() as u32);
    let mut counts = [0u64; 3];
    for (&d, &k) in dist.iter().zip(&qg.multiplicity) {
        if d == u32::MAX || k == 0 {
            continue;
        }
        let d = d as f64;
        counts[0] += if d + 3.0 < rr { k as u64 } else { 0 };
        counts[1] += if d < rr { k as u64 } else { 0 };
        counts[2] += if d - 3.0 < rr { k as u64 } else { 0 };
    }
    let mass = |c: u64| &qg.mass_unit * BigRational::from_integer(BigInt::from(c));
    BallMass { lower: mass(counts[0]), measured: mass(counts[1]), upper: mass(counts[2]) }
}

/// One volume sample: the atomic ratio and the certified two-sided constant
/// `max(upper / V, V / lower)` with `V = V_g(r) V_b(r)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub r: f64,
    pub ratio: f64,
    pub certified: f64,
    pub witness_center: usize,
}

fn volume_row(fx: &Fixture, node: usize, r: f64) -> Result<VolumeRow> {
    let b = ball_mass_bounds(&fx.graph, node, r);
    let v = volume_scale(&fx.model, r)?;
    let lower = rational_to_f64(&b.lower);
    let certified = if lower > 0.0 { (rational_to_f64(&b.upper) / v).max(v / lower) } else { f64::INFINITY };
    Ok(VolumeRow { r, ratio: rational_to_f64(&b.measured) / v, certified, witness_center: node })
}

/// Volume rows at mass-weighted centers with dyadic radii in `[2^{m+2}, 2^n]`,
/// repeated at the same points of `finer` when given.
pub fn volume_sweep(fx: &Fixture, finer: Option<&Fixture>, samples: usize, seed: u64) -> Result<(Vec<VolumeRow>, Vec<VolumeRow>)> {
    let (m, n) = (fx.model.m, fx.model.n);
    let rows: Vec<Result<(VolumeRow, Option<VolumeRow>)>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, 3, i as u64);
            let c = fx.sample_center(&mut rng);
            let r = dyadic_radius(&mut rng, (m + 2).min(n), n);
            let fine = match finer {
                Some(f) => Some(volume_row(f, fx.refine_point(f, &fx.center_point(c)), r)?),
                None => None,
            };
            Ok((volume_row(fx, c, r)?, fine))
        })
        .collect();
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    for r in rows {
        let (a, b) = r?;
        coarse.push(a);
        fine.extend(b);
    }
    Ok((coarse, fine))
}

/// Smallest `C` with every atomic ratio in `[1/C, C]`.
pub fn two_sided_constant(rows: &[VolumeRow]) -> f64 {
    rows.iter().map(|r| r.ratio.max(1.0 / r.ratio)).fold(1.0, f64::max)
}

pub fn certified_constant(rows: &[VolumeRow]) -> f64 {
    rows.iter().map(|r| r.certified).fold(1.0, f64::max)
}

fn smooth(graph: &EnergyGraph, f: &[f64]) -> Vec<f64> {
    (0..graph.num_nodes())
        .map(|v| {
            let inc = graph.incident(v);
            let sum: f64 = inc.iter().map(|&e| f[graph.other(e, v)]).sum::<f64>() + f[v];
            sum / (inc.len() + 1) as f64
        })
        .collect()
}

/// Test function `i` for a ball of radius `r` around `center`: truncated
/// distance functions, smoothed digit indicators and smoothed random values,
/// in rotation.
pub fn test_function(fx: &Fixture, dist: &[u32], r: f64, i: usize, rng: &mut ChaCha8Rng) -> NodeFunction {
    let model = &fx.model;
    let nn = fx.energy.num_nodes();
    let ru = r / model.unit();
    let values = match i % 3 {
        0 => {
            let cap = ru * (1 + i / 3) as f64 / 2.0;
            dist.iter().map(|&d| (d as f64).min(cap)).collect()
        }
        1 => {
            let levels: Vec<i32> = model.levels_iter().filter(|&k| model.g.digit(k).map_or(false, |d| d > 1)).collect();
            if levels.is_empty() {
                dist.iter().map(|&d| ((d as f64) / ru).min(4.0).powi(2)).collect()
            } else {
                let k = levels[(i / 3) % levels.len()];
                let j = rng.gen_range(0..model.g.digit(k).unwrap_or(1)) as u32;
                let mut hit = vec![0.0; nn];
                let mut total = vec![0.0; nn];
                let nv = model.tree.num_vertices();
                for c in 0..model.num_copies {
                    let on = model.copy_coord(c).digits[(k - model.m) as usize] == j;
                    for t in 0..nv {
                        let node = fx.graph.node(c, t);
                        total[node] += 1.0;
                        if on {
                            hit[node] += 1.0;
                        }
                    }
                }
                let ind: Vec<f64> = hit.iter().zip(&total).map(|(h, t)| h / t).collect();
                smooth(&fx.energy, &ind)
            }
        }
        _ => {
            let raw: Vec<f64> = (0..nn).map(|_| rng.gen_range(-1.0..1.0)).collect();
            smooth(&fx.energy, &raw)
        }
    };
    NodeFunction { values }
}

/// Carries a node function to the window refined by one level, affine along
/// every coarse edge and constant across the new gluing digit.
pub fn transfer(coarse: &Fixture, fine: &Fixture, f: &NodeFunction) -> NodeFunction {
    let nv = coarse.model.tree.num_vertices();
    let shift = (coarse.model.m - fine.model.m) as usize;
    let values = fine
        .graph
        .reps
        .iter()
        .map(|&(c, t)| {
            let u = fine.model.copy_coord(c as usize);
            let cc = coarse.model.copy_index(&UltraCoord { digits: u.digits[shift..].to_vec() });
            let at = |v: usize| f.values[coarse.graph.node(cc, v)];
            let t = t as usize;
            if t < nv {
                at(t)
            } else {
                let [a, b] = fine.model.tree.cells[fine.model.tree.creator[t]].ends;
                0.5 * (at(a) + at(b))
            }
        })
        .collect();
    NodeFunction { values }
}

/// Per-ball maxima over the test family (dilation 4) of the atomic PI ratio
/// and of its certified upper bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiRow {
    pub r: f64,
    pub ratio: f64,
    pub certified: f64,
    pub witness_center: usize,
}

/// PI rows at mass-weighted centers with dyadic radii in `[2^m, 2^{n-2}]`;
/// the same balls and transferred functions are evaluated on `finer` when given.
pub fn pi_sweep(fx: &Fixture, finer: Option<&Fixture>, balls: usize, functions: usize, p: f64, seed: u64) -> Result<(Vec<PiRow>, Vec<PiRow>)> {
    let (m, n) = (fx.model.m, fx.model.n);
    let rows: Vec<Result<(PiRow, Option<PiRow>)>> = (0..balls)
        .into_par_iter()
        .map(|b| {
            let mut rng = item_rng(seed, 4, b as u64);
            let c = fx.sample_center(&mut rng);
            let r = dyadic_radius(&mut rng, m, n - 2);
            let dist = fx.energy.hops(c);
            let fine = finer.map(|f| {
                let node = fx.refine_point(f, &fx.center_point(c));
                (f, node, f.energy.hops(node))
            });
            let mut coarse = PiRow { r, ratio: 0.0, certified: 0.0, witness_center: c };
            let mut refined = fine.as_ref().map(|&(_, node, _)| PiRow { r, ratio: 0.0, certified: 0.0, witness_center: node });
            for i in 0..functions {
                let mut frng = item_rng(seed, 5, ((b as u64) << 16) | i as u64);
                let func = test_function(fx, &dist, r, i, &mut frng);
                coarse.ratio = coarse.ratio.max(pi_ratio(&fx.model, &fx.energy, &dist, r, &func, p, 4.0)?);
                coarse.certified =
                    coarse.certified.max(certified_pi_ratio(&fx.model, &fx.graph, &dist, r, &func, p, 4.0)?);
                if let (Some((f, _, fd)), Some(row)) = (&fine, refined.as_mut()) {
                    let g = transfer(fx, f, &func);
                    row.ratio = row.ratio.max(pi_ratio(&f.model, &f.energy, fd, r, &g, p, 4.0)?);
                    row.certified = row.certified.max(certified_pi_ratio(&f.model, &f.graph, fd, r, &g, p, 4.0)?);
                }
            }
            Ok((coarse, refined))
        })
        .collect();
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    for r in rows {
        let (a, b) = r?;
        coarse.push(a);
        fine.extend(b);
    }
    Ok((coarse, fine))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub r: f64,
    pub witness_center: usize,
    pub capacity: f64,
    pub lower_bound: f64,
    pub cutoff_energy: f64,
    /// `cap · r^{p-1} V_b(r) / m(B)`.
    pub normalized: f64,
    /// `E(φ) · r^{p-1} V_b(r) / m(B)`.
    pub cutoff_normalized: f64,
    pub effective_factor: f64,
    pub truncated: bool,
    pub consistent: bool,
}

pub fn capacity_sweep(fx: &Fixture, balls: usize, p: f64, seed: u64) -> Result<Vec<CapacityRow>> {
    let (m, n) = (fx.model.m, fx.model.n);
    (0..balls)
        .into_par_iter()
        .map(|b| {
            let mut rng = item_rng(seed, 6, b as u64);
            let c = fx.sample_center(&mut rng);
            let r = dyadic_radius(&mut rng, m, n - 2);
            let x = fx.center_point(c);
            let cmp = capacity_vs_cutoff(&fx.model, &fx.graph, &fx.energy, &x, r, p, 256.0)?;
            let scale = psi_scale(&fx.model, r, p)? / cmp.ball_mass;
            Ok(CapacityRow {
                r,
                witness_center: c,
                capacity: cmp.capacity.value,
                lower_bound: cmp.capacity.lower_bound,
                cutoff_energy: cmp.cutoff_energy,
                normalized: cmp.normalized,
                cutoff_normalized: cmp.cutoff_energy * scale,
                effective_factor: cmp.effective_factor,
                truncated: cmp.truncated,
                consistent: cmp.consistent,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsRow {
    pub r: f64,
    pub witness_center: usize,
    pub c2: f64,
    pub c3: f64,
    pub inconsistent_pairs: usize,
}

pub fn cs_sweep(fx: &Fixture, balls: usize, functions: usize, p: f64, seed: u64) -> Result<Vec<CsRow>> {
    let (m, n) = (fx.model.m, fx.model.n);
    (0..balls)
        .into_par_iter()
        .map(|b| {
            let mut rng = item_rng(seed, 7, b as u64);
            let c = fx.sample_center(&mut rng);
            let r = dyadic_radius(&mut rng, m, n - 2);
            let cut = laakso_cutoff(&fx.model, &fx.graph, &fx.center_point(c), r)?;
            let dist = fx.energy.hops(c);
            let mut inst = Vec::with_capacity(functions);
            for i in 0..functions {
                let mut frng = item_rng(seed, 8, ((b as u64) << 16) | i as u64);
                let f = test_function(fx, &dist, r, i, &mut frng);
                inst.push(cs_instance(&fx.model, &fx.energy, &dist, r, &f, &cut.function, p, 256.0)?);
            }
            let c2 = inst.iter().map(|i| i.c2).fold(0.0, f64::max);
            let c3 = inst.iter().map(|i| i.c3).fold(0.0, f64::max);
            Ok(CsRow { r, witness_center: c, c2, c3, inconsistent_pairs: cut.inconsistent_pairs })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxiomTally {
    pub p: f64,
    pub pairs: usize,
    pub clarkson_failures: usize,
    pub subadditivity_failures: usize,
    /// Smallest signed relative margin of Clarkson in the direction of the inequality.
    pub clarkson_margin: f64,
    pub subadditivity_margin: f64,
}

pub fn energy_axioms(fx: &Fixture, pairs: usize, p: f64, seed: u64) -> AxiomTally {
    let nn = fx.energy.num_nodes();
    let rows: Vec<(bool, bool, f64, f64)> = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, 9, ((p * 1000.0) as u64) << 20 | i as u64);
            let mut draw = || NodeFunction { values: (0..nn).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let (f, g) = (draw(), draw());
            let c = clarkson_check(&fx.energy, &f, &g, p);
            let s = subadditivity_check(&fx.energy, &f, &g, p);
            let rel = |a: f64, b: f64| (a - b) / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
            let cm = if p <= 2.0 { rel(c.lhs, c.rhs) } else { rel(c.rhs, c.lhs) };
            (c.holds, s.holds, cm, rel(s.rhs, s.lhs))
        })
        .collect();
    let mut t = AxiomTally {
        p,
        pairs,
        clarkson_failures: 0,
        subadditivity_failures: 0,
        clarkson_margin: f64::INFINITY,
        subadditivity_margin: f64::INFINITY,
    };
    for (c, s, cm, sm) in rows {
        t.clarkson_failures += !c as usize;
        t.subadditivity_failures += !s as usize;
        t.clarkson_margin = t.clarkson_margin.min(cm);
        t.subadditivity_margin = t.subadditivity_margin.min(sm);
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PencilSummary {
    pub samples: usize,
    pub length: u64,
    pub kind: GeodesicKind,
    pub wrong_lengths: usize,
    pub distinct_paths: usize,
    /// 99th percentile of the normalized occupation over the rows.
    pub percentile99: f64,
    pub max_normalized: f64,
    pub rows: usize,
}

/// Two top-level boundary points on copies differing at every glued level.
pub fn far_pair(model: &LaaksoModel) -> (LaaksoPoint, LaaksoPoint) {
    let x = model.canonicalize(LaaksoPoint { u: UltraCoord { digits: vec![0; model.levels()] }, t: 1 });
    let digits = model.levels_iter().map(|k| model.g.digit(k).unwrap_or(1) as u32 - 1).collect();
    let y = model.canonicalize(LaaksoPoint { u: UltraCoord { digits }, t: 2.min(model.tree.num_vertices() - 1) });
    (x, y)
}

pub fn pencil_check(fx: &Fixture, samples: usize, seed: u64) -> Result<(PencilSummary, Vec<OccupationRow>)> {
    let (x, y) = far_pair(&fx.model);
    let base = fx.model.geodesic(&x, &y)?;
    let paths: Vec<Result<(bool, Vec<usize>)>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, 10, i as u64);
            let w = fx.model.sample_pencil(&base, &mut rng);
            let ok = w.copies.len() as u64 == base.total_length;
            Ok((ok, fx.graph.walk_nodes(&fx.model, &w, &x, &y)?))
        })
        .collect();
    let mut wrong = 0;
    let mut nodes = Vec::with_capacity(samples);
    for p in paths {
        let (ok, path) = p?;
        if !ok || path.len() as u64 != base.total_length + 1 {
            wrong += 1;
        }
        nodes.push(path);
    }
    let oracle = fx.graph.oracle_distance(fx.graph.node_of(&fx.model, &x), fx.graph.node_of(&fx.model, &y))?;
    if oracle != base.total_length {
        wrong = samples;
    }
    let distinct = nodes.iter().collect::<std::collections::HashSet<_>>().len();
    let rows = occupation_rows(&fx.model, &nodes, base.total_length)?;
    let mut norm: Vec<f64> = rows.iter().map(|r| r.normalized).collect();
    norm.sort_by(f64::total_cmp);
    let percentile99 = if norm.is_empty() { 0.0 } else { norm[((norm.len() - 1) as f64 * 0.99).round() as usize] };
    Ok((
        PencilSummary {
            samples,
            length: base.total_length,
            kind: base.kind,
            wrong_lengths: wrong,
            distinct_paths: distinct,
            percentile99,
            max_normalized: norm.last().copied().unwrap_or(0.0),
            rows: rows.len(),
        },
        rows,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub threshold: Option<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub g_digits: Vec<u64>,
    pub b_digits: Vec<u64>,
    pub lo_level: i32,
    pub g_slack: f64,
    pub b_slack: f64,
    pub g_bound: f64,
    pub b_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub window: (i32, i32),
    pub copies: usize,
    pub tree_vertices: usize,
    pub graph: GraphSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckOutcome>,
    pub records: Vec<InequalityRecord>,
    pub geodesic: GeodesicTally,
    pub metric: MetricTally,
    pub synthesis: SynthesisSummary,
    pub model: ModelSummary,
    pub refined_model: Option<ModelSummary>,
    /// Certified two-sided volume constant.
    pub volume_constant: f64,
    /// Two-sided constant of the atomic ratios alone.
    pub volume_ratio_constant: f64,
    pub refined_volume_constant: Option<f64>,
    /// Largest atomic PI ratio.
    pub pi_constant: f64,
    /// Largest certified PI ratio.
    pub pi_certified: f64,
    pub refined_pi_constant: Option<f64>,
    pub refined_pi_certified: Option<f64>,
    pub capacity_envelope: f64,
    pub cs_envelope: (f64, f64),
    pub energy_axioms: Vec<AxiomTally>,
    pub pencil: PencilSummary,
    pub warnings: Vec<String>,
    pub pass: bool,
}

impl VerificationReport {
    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Slack bound `2^{θ2+2} C^3`.
pub fn slack_bound(theta2: f64, c: f64) -> f64 {
    (theta2 + 2.0).exp2() * c.powi(3)
}

fn synthesis_summary(gb: &GbPair) -> (SynthesisSummary, bool) {
    let g_bound = slack_bound(gb.g_bounds.theta2, gb.g_bounds.c);
    let b_bound = slack_bound(gb.b_bounds.theta2, gb.b_bounds.c);
    let alphabet = |s: &Synthesis| s.profile.digits.iter().all(|&d| d == s.low_digit || d == s.high_digit);
    let pass = gb.g.slack <= g_bound && gb.b.slack <= b_bound && alphabet(&gb.g) && alphabet(&gb.b);
    (
        SynthesisSummary {
            g_digits: gb.g.profile.digits.clone(),
            b_digits: gb.b.profile.digits.clone(),
            lo_level: gb.g.profile.lo_level,
            g_slack: sig12(gb.g.slack),
            b_slack: sig12(gb.b.slack),
            g_bound: sig12(g_bound),
            b_bound: sig12(b_bound),
        },
        pass,
    )
}

fn model_summary(fx: &Fixture) -> ModelSummary {
    ModelSummary {
        window: (fx.model.m, fx.model.n),
        copies: fx.model.num_copies,
        tree_vertices: fx.model.tree.num_vertices(),
        graph: fx.graph.summary(),
    }
}

/// Per-scale envelope records.
fn records_by_scale(name: InequalityName, rows: &[(f64, f64, usize)], threshold: Option<f64>) -> Vec<InequalityRecord> {
    let mut scales: Vec<f64> = rows.iter().map(|r| r.0).collect();
    scales.sort_by(f64::total_cmp);
    scales.dedup();
    scales
        .into_iter()
        .map(|s| {
            let (mut best, mut who) = (0.0f64, 0usize);
            for &(_, c, w) in rows.iter().filter(|row| row.0 == s) {
                if c > best {
                    best = c;
                    who = w;
                }
            }
            InequalityRecord {
                name,
                scale: s,
                measured: sig12(best),
                threshold,
                witnesses: vec![format!("center={who}")],
                pass: best.is_finite() && threshold.map_or(true, |t| best <= t),
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(name)).map_err(|e| Error::Invalid(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub const VOLUME_LIMIT: f64 = 64.0;
pub const PENCIL_LIMIT: f64 = 32.0;

/// Runs every check; `base` resolves relative profile paths.
pub fn run_suite(cfg: &SuiteConfig, base: &Path) -> Result<VerificationReport> {
    cfg.validate()?;
    let (phi, psi) = cfg.profiles(base)?;
    let gb = derive_gb(&phi, &psi, cfg.p, cfg.admissibility_c)?;
    let (synthesis, synthesis_pass) = synthesis_summary(&gb);
    let fx = Fixture::build(&gb.g.profile, &gb.b.profile, cfg.window, cfg.node_budget)?;
    let finer = if cfg.refine {
        Some(Fixture::build(&gb.g.profile, &gb.b.profile, (cfg.window.0 - 1, cfg.window.1), cfg.node_budget)?)
    } else {
        None
    };
    let seed = cfg.seed;
    let mut checks = Vec::new();
    let mut records = Vec::new();
    let mut warnings = Vec::new();

    checks.push(CheckOutcome {
        name: "synthesis".into(),
        pass: synthesis_pass,
        measured: synthesis.g_slack.max(synthesis.b_slack),
        threshold: Some(synthesis.g_bound.min(synthesis.b_bound)),
        detail: format!("g slack {} of {}, b slack {} of {}", synthesis.g_slack, synthesis.g_bound, synthesis.b_slack, synthesis.b_bound),
    });

    let geodesic = geodesic_campaign(&fx.model, &fx.graph, cfg.pairs, seed)?;
    if !geodesic.all_kinds() {
        warnings.push(format!(
            "geodesic campaign saw monotone={}, one={}, two={}",
            geodesic.monotone, geodesic.one_inversion, geodesic.two_inversions
        ));
    }
    checks.push(CheckOutcome {
        name: "geodesic".into(),
        pass: geodesic.mismatches == 0,
        measured: geodesic.mismatches as f64,
        threshold: Some(0.0),
        detail: geodesic.first_mismatch.clone().unwrap_or_else(|| format!("{} pairs exact", geodesic.pairs)),
    });

    let mut metric = metric_checks(&fx.model, cfg.triples, seed)?;
    metric.max_lipschitz_ratio = sig12(metric.max_lipschitz_ratio);
    checks.push(CheckOutcome {
        name: "metric".into(),
        pass: metric.symmetry_failures + metric.triangle_failures + metric.lipschitz_failures == 0,
        measured: metric.max_lipschitz_ratio,
        threshold: Some(3.0),
        detail: format!(
            "symmetry {} triangle {} lipschitz {} failures",
            metric.symmetry_failures, metric.triangle_failures, metric.lipschitz_failures
        ),
    });

    let (mut vol, mut vol_fine) = volume_sweep(&fx, finer.as_ref(), cfg.volume_samples, seed)?;
    for r in vol.iter_mut().chain(vol_fine.iter_mut()) {
        r.ratio = sig12(r.ratio);
        r.certified = sig12(r.certified);
    }
    let volume_ratio_constant = sig12(two_sided_constant(&vol));
    let volume_constant = sig12(certified_constant(&vol));
    let refined_volume_constant = finer.as_ref().map(|_| sig12(certified_constant(&vol_fine)));
    let vol_pass = volume_constant <= VOLUME_LIMIT
        && volume_ratio_constant <= volume_constant
        && refined_volume_constant.map_or(true, |c| c <= volume_constant);
    checks.push(CheckOutcome {
        name: "volume".into(),
        pass: vol_pass,
        measured: volume_constant,
        threshold: Some(VOLUME_LIMIT),
        detail: format!("atomic ratios within {volume_ratio_constant}, refined certified {:?}", refined_volume_constant),
    });
    let v_rows: Vec<_> = vol.iter().map(|r| (r.r, r.certified, r.witness_center)).collect();
    records.extend(records_by_scale(InequalityName::V, &v_rows, Some(VOLUME_LIMIT)));

    let (mut pi, mut pi_fine) = pi_sweep(&fx, finer.as_ref(), cfg.balls, cfg.functions, cfg.p, seed)?;
    for r in pi.iter_mut().chain(pi_fine.iter_mut()) {
        r.ratio = sig12(r.ratio);
        r.certified = sig12(r.certified);
    }
    let pi_constant = pi.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let pi_certified = pi.iter().map(|r| r.certified).fold(0.0, f64::max);
    let refined_pi_constant = finer.as_ref().map(|_| pi_fine.iter().map(|r| r.ratio).fold(0.0, f64::max));
    let refined_pi_certified = finer.as_ref().map(|_| pi_fine.iter().map(|r| r.certified).fold(0.0, f64::max));
    checks.push(CheckOutcome {
        name: "pi".into(),
        pass: pi_constant.is_finite()
            && pi_certified.is_finite()
            && refined_pi_certified.map_or(true, |c| c <= pi_certified),
        measured: pi_constant,
        threshold: None,
        detail: format!(
            "certified {pi_certified}, refined atomic {:?}, refined certified {:?}",
            refined_pi_constant, refined_pi_certified
        ),
    });
    let pi_rows: Vec<_> = pi.iter().map(|r| (r.r, r.ratio, r.witness_center)).collect();
    records.extend(records_by_scale(InequalityName::Pi, &pi_rows, None));

    let cap = capacity_sweep(&fx, cfg.balls, cfg.p, seed)?;
    let capacity_envelope = sig12(cap.iter().map(|r| r.normalized).fold(0.0, f64::max));
    let cap_feasible = cap.iter().all(|r| r.capacity <= r.cutoff_energy && r.consistent);
    let truncated = cap.iter().filter(|r| r.truncated).count();
    if truncated > 0 {
        warnings.push(format!("{truncated} of {} capacity balls truncated to the window", cap.len()));
    }
    checks.push(CheckOutcome {
        name: "capacity".into(),
        pass: cap_feasible && capacity_envelope.is_finite(),
        measured: capacity_envelope,
        threshold: None,
        detail: format!("cap <= cutoff energy on all {} balls: {cap_feasible}", cap.len()),
    });
    let cap_rows: Vec<_> = cap.iter().map(|r| (r.r, r.normalized, r.witness_center)).collect();
    records.extend(records_by_scale(InequalityName::CapLe, &cap_rows, None));

    let cs = cs_sweep(&fx, cfg.balls, cfg.functions, cfg.p, seed)?;
    let c2 = sig12(cs.iter().map(|r| r.c2).fold(0.0, f64::max));
    let c3 = sig12(cs.iter().map(|r| r.c3).fold(0.0, f64::max));
    let cs_consistent = cs.iter().all(|r| r.inconsistent_pairs == 0);
    checks.push(CheckOutcome {
        name: "cs".into(),
        pass: c2.is_finite() && c3.is_finite() && cs_consistent,
        measured: c2.max(c3),
        threshold: None,
        detail: format!("C2={c2} C3={c3}, glued pairs consistent: {cs_consistent}"),
    });
    let cs_rows: Vec<_> = cs.iter().map(|r| (r.r, r.c2.max(r.c3), r.witness_center)).collect();
    records.extend(records_by_scale(InequalityName::Cs, &cs_rows, None));

    let mut axioms = Vec::new();
    for p in [1.5, 2.0, 3.0] {
        let mut t = energy_axioms(&fx, cfg.energy_pairs, p, seed);
        t.clarkson_margin = sig12(t.clarkson_margin);
        t.subadditivity_margin = sig12(t.subadditivity_margin);
        records.push(InequalityRecord {
            name: InequalityName::Clarkson,
            scale: p,
            measured: t.clarkson_failures as f64,
            threshold: Some(0.0),
            witnesses: vec![format!("margin={}", t.clarkson_margin)],
            pass: t.clarkson_failures == 0,
        });
        records.push(InequalityRecord {
            name: InequalityName::Subadd,
            scale: p,
            measured: t.subadditivity_failures as f64,
            threshold: Some(0.0),
            witnesses: vec![format!("margin={}", t.subadditivity_margin)],
            pass: t.subadditivity_failures == 0,
        });
        axioms.push(t);
    }
    let axiom_failures: usize = axioms.iter().map(|t| t.clarkson_failures + t.subadditivity_failures).sum();
    checks.push(CheckOutcome {
        name: "energy_axioms".into(),
        pass: axiom_failures == 0,
        measured: axiom_failures as f64,
        threshold: Some(0.0),
        detail: format!("{} pairs for each p in 1.5, 2, 3", cfg.energy_pairs),
    });

    let (mut pencil, occupation) = pencil_check(&fx, cfg.pencil_samples, seed)?;
    pencil.percentile99 = sig12(pencil.percentile99);
    pencil.max_normalized = sig12(pencil.max_normalized);
    checks.push(CheckOutcome {
        name: "pencil".into(),
        pass: pencil.wrong_lengths == 0 && pencil.percentile99 <= PENCIL_LIMIT,
        measured: pencil.percentile99,
        threshold: Some(PENCIL_LIMIT),
        detail: format!("{} samples of length {}, {} rows", pencil.samples, pencil.length, pencil.rows),
    });
    if pencil.rows == 0 {
        warnings.push("pencil pair too short for any occupation row".into());
    }

    if let Some(dir) = &cfg.csv_dir {
        let dir = if dir.is_absolute() { dir.clone() } else { base.join(dir) };
        write_csv(&dir, "volume.csv", &vol)?;
        write_csv(&dir, "pi.csv", &pi)?;
        if finer.is_some() {
            write_csv(&dir, "volume_refined.csv", &vol_fine)?;
            write_csv(&dir, "pi_refined.csv", &pi_fine)?;
        }
        let cap_csv: Vec<SweepRow> =
            cap.iter().map(|r| SweepRow { r: r.r, constant: sig12(r.normalized), witness_center: r.witness_center }).collect();
        write_csv(&dir, "capacity.csv", &cap_csv)?;
        let cs_csv: Vec<SweepRow> = cs
            .iter()
            .map(|r| SweepRow { r: r.r, constant: sig12(r.c2.max(r.c3)), witness_center: r.witness_center })
            .collect();
        write_csv(&dir, "cs.csv", &cs_csv)?;
        write_csv(&dir, "occupation.csv", &occupation)?;
    }

    let pass = checks.iter().all(|c| c.pass);
    Ok(VerificationReport {
        checks,
        records,
        geodesic,
        metric,
        synthesis,
        model: model_summary(&fx),
        refined_model: finer.as_ref().map(model_summary),
        volume_constant,
        volume_ratio_constant,
        refined_volume_constant,
        pi_constant,
        pi_certified,
        refined_pi_constant,
        refined_pi_certified,
        capacity_envelope,
        cs_envelope: (c2, c3),
        energy_axioms: axioms,
        pencil,
        warnings,
        pass,
    })
}
