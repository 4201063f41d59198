//! The Laakso-type quotient `L(g, b)` on a finite window.
//!
//! A point is a pair `(u, t)` of an ultrametric digit vector over the window
//! levels and a tree vertex; `(u, t) ~ (u', t)` when `t` is a level-`k`
//! wormhole and `u, u'` differ only at level `k`. Distances are computed in
//! closed form from the tree and checked against breadth-first search on the
//! explicitly glued graph.

use crate::error::{Error, Result};
use crate::scaling::{format_rational, pow2, rational_to_f64, volume_profile, BranchingProfile, DigitRole, VolumeProfile};
use crate::tree::TreeModel;
use num_bigint::BigInt;
use num_rational::BigRational;
use petgraph::unionfind::UnionFind;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

pub const DEFAULT_PAIR_BUDGET: usize = 4_000_000;

/// Digits `u(k)` for window levels, stored at index `k - m`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UltraCoord {
    pub digits: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LaaksoPoint {
    pub u: UltraCoord,
    pub t: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeodesicKind {
    Monotone,
    OneInversion,
    TwoInversions,
}

/// Tree walk together with the copy used for each edge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Walk {
    pub vertices: Vec<usize>,
    /// `copies[i]` carries the edge `vertices[i] → vertices[i + 1]`.
    pub copies: Vec<UltraCoord>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub u: UltraCoord,
    pub path: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeodesicDescription {
    pub kind: GeodesicKind,
    /// Length in units of `2^{m-1}`.
    pub total_length: u64,
    pub segments: Vec<Segment>,
    /// Detour wormholes with their levels, `n*` first.
    pub inversion_points: Vec<(usize, i32)>,
    pub walk: Walk,
}

#[derive(Clone, Debug)]
pub struct LaaksoModel {
    pub g: BranchingProfile,
    pub b: BranchingProfile,
    pub m: i32,
    pub n: i32,
    pub tree: TreeModel,
    pub g_volume: VolumeProfile,
    radix: Vec<u32>,
    strides: Vec<usize>,
    pub num_copies: usize,
}

impl LaaksoModel {
    pub fn build(g: &BranchingProfile, b: &BranchingProfile, m: i32, n: i32, budget: usize) -> Result<Self> {
        if g.role != DigitRole::Gluing {
            return Err(Error::InvalidProfile("g must be a gluing profile".into()));
        }
        if m < g.lo_level || n > g.hi_level {
            return Err(Error::LevelOutOfRange { level: if m < g.lo_level { m } else { n }, lo: g.lo_level, hi: g.hi_level });
        }
        let nv = crate::tree::vertex_count(b, m, n)?;
        let radix: Vec<u32> = (m..=n).map(|k| g.digit(k).map(|d| d as u32)).collect::<Result<_>>()?;
        let mut strides = Vec::with_capacity(radix.len());
        let mut copies: usize = 1;
        for &r in &radix {
            strides.push(copies);
            copies = copies.saturating_mul(r as usize);
        }
        let pairs = copies.saturating_mul(nv);
        if pairs > budget {
            return Err(Error::Budget { needed: pairs, budget });
        }
        let tree = TreeModel::build(b, m, n, budget)?;
        let g_volume = volume_profile(g)?;
        Ok(Self { g: g.clone(), b: b.clone(), m, n, tree, g_volume, radix, strides, num_copies: copies })
    }

    pub fn levels(&self) -> usize {
        self.radix.len()
    }

    pub fn levels_iter(&self) -> std::ops::RangeInclusive<i32> {
        self.m..=self.n
    }

    pub fn unit(&self) -> f64 {
        self.tree.unit()
    }

    pub fn copy_index(&self, u: &UltraCoord) -> usize {
        u.digits.iter().zip(&self.strides).map(|(&d, &s)| d as usize * s).sum()
    }

    pub fn copy_coord(&self, mut c: usize) -> UltraCoord {
        let digits = self
            .radix
            .iter()
            .map(|&r| {
                let d = (c % r as usize) as u32;
                c /= r as usize;
                d
            })
            .collect();
        UltraCoord { digits }
    }

    pub fn check_point(&self, p: &LaaksoPoint) -> Result<()> {
        self.tree.check_vertex(p.t)?;
        if p.u.digits.len() != self.levels() {
            return Err(Error::InvalidPoint(format!("expected {} digits, got {}", self.levels(), p.u.digits.len())));
        }
        for (i, (&d, &r)) in p.u.digits.iter().zip(&self.radix).enumerate() {
            if d >= r {
                return Err(Error::InvalidPoint(format!("digit {d} at level {} exceeds g = {r}", self.m + i as i32)));
            }
        }
        Ok(())
    }

    /// Representative with digit 0 at the wormhole level of `t`.
    pub fn canonicalize(&self, mut p: LaaksoPoint) -> LaaksoPoint {
        if let Some(k) = self.tree.vertex_level[p.t] {
            p.u.digits[(k - self.m) as usize] = 0;
        }
        p
    }

    pub fn is_canonical(&self, p: &LaaksoPoint) -> bool {
        match self.tree.vertex_level[p.t] {
            Some(k) => p.u.digits[(k - self.m) as usize] == 0,
            None => true,
        }
    }

    pub fn random_coord<R: Rng>(&self, rng: &mut R) -> UltraCoord {
        UltraCoord { digits: self.radix.iter().map(|&r| rng.gen_range(0..r)).collect() }
    }

    pub fn random_point<R: Rng>(&self, rng: &mut R) -> LaaksoPoint {
        let u = self.random_coord(rng);
        let t = rng.gen_range(0..self.tree.num_vertices());
        self.canonicalize(LaaksoPoint { u, t })
    }

    /// Ultrametric distance `2^{max differing level}` in units (0 if equal).
    pub fn ultra_distance(&self, u: &UltraCoord, v: &UltraCoord) -> u64 {
        match (0..self.levels()).rev().find(|&i| u.digits[i] != v.digits[i]) {
            Some(i) => self.tree.units_of_level(self.m + i as i32),
            None => 0,
        }
    }

    fn differing_mask(&self, u: &UltraCoord, v: &UltraCoord) -> u64 {
        u.digits.iter().zip(&v.digits).enumerate().filter(|(_, (a, b))| a != b).fold(0, |acc, (i, _)| acc | 1 << i)
    }

    /// Closed-form distance in units together with the geodesic case.
    pub fn distance(&self, x: &LaaksoPoint, y: &LaaksoPoint) -> Result<(u64, GeodesicKind)> {
        let plan = self.plan(x, y)?;
        Ok((plan.length, plan.kind))
    }

    fn plan(&self, x: &LaaksoPoint, y: &LaaksoPoint) -> Result<Plan> {
        for p in [x, y] {
            self.check_point(p)?;
            if !self.is_canonical(p) {
                return Err(Error::InvalidPoint(format!("point at vertex {} is not canonical", p.t)));
            }
        }
        let tr = &self.tree;
        let (t, s) = (x.t, y.t);
        let dts = tr.distance(t, s);
        let need = self.differing_mask(&x.u, &y.u);
        let missing = need & !tr.segment_level_mask(t, s);
        if missing == 0 {
            return Ok(Plan { kind: GeodesicKind::Monotone, length: dts, detours: vec![], visits: vec![t, s], need });
        }
        let top = |mask: u64| self.m + (63 - mask.leading_zeros()) as i32;
        let n1 = top(missing);
        let base_mask = tr.segment_level_mask(t, s);
        let by_distance = |k: i32| -> Result<Vec<(u64, usize)>> {
            let mut v: Vec<(u64, usize)> =
                tr.wormholes_at(k)?.iter().map(|&w| (tr.distance_to_segment(w, t, s), w)).collect();
            v.sort();
            Ok(v)
        };
        let firsts = by_distance(n1)?;
        let below = need & ((1u64 << (n1 - self.m)) - 1);
        if below == 0 {
            let (d1, w1) = firsts[0];
            if need & !(base_mask | tr.segment_level_mask(w1, t) | tr.segment_level_mask(w1, s)) != 0 {
                return Err(Error::Invalid(format!("detour to {w1} does not cover the needed levels")));
            }
            return Ok(Plan {
                kind: GeodesicKind::OneInversion,
                length: dts + 2 * d1,
                detours: vec![(w1, n1)],
                visits: vec![t, w1, s],
                need,
            });
        }
        let n2 = top(below);
        let seconds = by_distance(n2)?;
        let reach = firsts.last().unwrap().0 + seconds.last().unwrap().0;
        let mut bound = firsts[0].0 + seconds[0].0;
        loop {
            let mut pairs = Vec::new();
            for &(d1, w1) in firsts.iter().take_while(|e| e.0 <= bound) {
                let foot = tr.meet_point(w1, t, s);
                for &(d2, w2) in seconds.iter().take_while(|e| e.0 <= bound) {
                    let extra = d1 + d2.min(tr.distance_to_segment(w2, foot, w1));
                    if extra <= bound {
                        pairs.push((extra, w1, w2));
                    }
                }
            }
            pairs.sort();
            for (extra, w1, w2) in pairs {
                let hull = base_mask
                    | tr.segment_level_mask(w1, t)
                    | tr.segment_level_mask(w1, s)
                    | tr.segment_level_mask(w2, t)
                    | tr.segment_level_mask(w2, s)
                    | tr.segment_level_mask(w1, w2);
                if need & !hull != 0 {
                    continue;
                }
                let length = dts + 2 * extra;
                if extra == tr.distance_to_segment(w1, t, s) {
                    return Ok(Plan {
                        kind: GeodesicKind::OneInversion,
                        length,
                        detours: vec![(w1, n1)],
                        visits: vec![t, w1, s],
                        need,
                    });
                }
                let via = |a: usize, b: usize| tr.distance(t, a) + tr.distance(a, b) + tr.distance(b, s);
                let visits = if via(w1, w2) <= via(w2, w1) { vec![t, w1, w2, s] } else { vec![t, w2, w1, s] };
                return Ok(Plan {
                    kind: GeodesicKind::TwoInversions,
                    length,
                    detours: vec![(w1, n1), (w2, n2)],
                    visits,
                    need,
                });
            }
            if bound >= reach {
                return Err(Error::Invalid(format!("no wormhole pair at levels {n1}, {n2} connects {t} and {s}")));
            }
            bound = (2 * bound).max(1).min(reach);
        }
    }

    /// Lower bound `d_T(t, s) + 2 max_k d(W_k, [t, s])` over the inversion
    /// levels reported by the geodesic.
    pub fn inversion_lower_bound(&self, x: &LaaksoPoint, y: &LaaksoPoint, geo: &GeodesicDescription) -> Result<u64> {
        let tr = &self.tree;
        let mut worst = 0;
        for &(_, k) in &geo.inversion_points {
            let (_, d) = tr.nearest_wormhole(k, x.t, y.t)?;
            worst = worst.max(d);
        }
        Ok(tr.distance(x.t, y.t) + 2 * worst)
    }

    /// Closed-form geodesic: distance, case, and an explicit walk realizing it.
    pub fn geodesic(&self, x: &LaaksoPoint, y: &LaaksoPoint) -> Result<GeodesicDescription> {
        let plan = self.plan(x, y)?;
        let tr = &self.tree;
        let mut vertices = vec![x.t];
        for pair in plan.visits.windows(2) {
            vertices.extend(tr.geodesic(pair[0], pair[1]).into_iter().skip(1));
        }

        let mut current = x.u.clone();
        let mut pending = plan.need;
        let mut copies = Vec::with_capacity(vertices.len().saturating_sub(1));
        for i in 0..vertices.len() {
            if let Some(k) = tr.vertex_level[vertices[i]] {
                let bit = 1u64 << (k - self.m);
                if pending & bit != 0 {
                    current.digits[(k - self.m) as usize] = y.u.digits[(k - self.m) as usize];
                    pending &= !bit;
                }
            }
            if i + 1 < vertices.len() {
                copies.push(current.clone());
            }
        }
        if pending != 0 {
            return Err(Error::Invalid(format!(
                "walk from {} to {} misses wormhole levels (mask {pending:b})",
                x.t, y.t
            )));
        }
        let walk = Walk { vertices, copies };
        if walk.copies.len() as u64 != plan.length {
            return Err(Error::Invalid("walk length disagrees with closed form".into()));
        }
        Ok(GeodesicDescription {
            kind: plan.kind,
            total_length: plan.length,
            segments: segments_of(&walk, &x.u),
            inversion_points: plan.detours,
            walk,
        })
    }

    /// Open ball `B_T(t, r)` meets wormholes of level `≥ n + 2` (with
    /// `2^{n-1} ≤ r < 2^n`) in at most one point; returns it with its level.
    pub fn high_wormhole_in_ball(&self, t: usize, r: f64) -> Result<Option<(usize, i32)>> {
        let n = crate::scaling::dyadic_floor(r) + 1;
        let rr = r / self.unit();
        let mut found = Vec::new();
        for k in (n + 2).max(self.m)..=self.n {
            let (w, d) = self.tree.nearest_wormhole(k, t, t)?;
            if (d as f64) < rr {
                found.push((w, k));
            }
        }
        if found.len() > 1 {
            return Err(Error::Invalid(format!("ball around {t} of radius {r} meets {} high wormholes", found.len())));
        }
        Ok(found.pop())
    }

    /// Product balls `B_U(u^{(k)}, 8r) × B_T(t, r)` covering the preimage of `B(x, r)`.
    pub fn preimage_cover(&self, x: &LaaksoPoint, r: f64) -> Result<Vec<ProductBall>> {
        self.check_point(x)?;
        let centers = match self.high_wormhole_in_ball(x.t, r)? {
            None => vec![x.u.clone()],
            Some((_, k)) => (0..self.radix[(k - self.m) as usize])
                .map(|d| {
                    let mut u = x.u.clone();
                    u.digits[(k - self.m) as usize] = d;
                    u
                })
                .collect(),
        };
        Ok(centers
            .into_iter()
            .map(|u| ProductBall { u, ultra_radius: 8.0 * r, t: x.t, tree_radius: r })
            .collect())
    }

    pub fn in_product_ball(&self, ball: &ProductBall, p: &LaaksoPoint) -> bool {
        let du = self.ultra_distance(&ball.u, &p.u) as f64 * self.unit();
        let dt = self.tree.distance(ball.t, p.t) as f64 * self.unit();
        du < ball.ultra_radius && dt < ball.tree_radius
    }

    /// Resamples the digits of the deterministic geodesic at every level
    /// `k ∈ [m, k0]` on the stretch between the first and last visits of
    /// `W_k`, where `2^{k0+3} ≤ D < 2^{k0+4}`.
    pub fn sample_pencil<R: Rng>(&self, base: &GeodesicDescription, rng: &mut R) -> Walk {
        let walk = &base.walk;
        let d_metric = base.total_length as f64 * self.unit();
        if base.total_length == 0 {
            return walk.clone();
        }
        let k0 = crate::scaling::dyadic_floor(d_metric) - 3;
        let mut copies = walk.copies.clone();
        for k in self.m..=k0.min(self.n) {
            let hits: Vec<usize> =
                (0..walk.vertices.len()).filter(|&i| self.tree.is_wormhole(walk.vertices[i], k)).collect();
            let (Some(&first), Some(&last)) = (hits.first(), hits.last()) else { continue };
            let li = (k - self.m) as usize;
            let xi = rng.gen_range(0..self.radix[li]);
            for c in &mut copies[first..last] {
                c.digits[li] = xi;
            }
        }
        Walk { vertices: walk.vertices.clone(), copies }
    }

    pub fn point_to_json(&self, p: &LaaksoPoint) -> PointJson {
        PointJson {
            u: p.u.digits.iter().enumerate().map(|(i, &d)| (self.m + i as i32, d)).collect(),
            t: p.t,
        }
    }

    pub fn point_from_json(&self, j: &PointJson) -> Result<LaaksoPoint> {
        let mut digits = vec![0u32; self.levels()];
        for (&k, &d) in &j.u {
            if k < self.m || k > self.n {
                if d != 0 {
                    return Err(Error::InvalidPoint(format!("digit at level {k} outside window")));
                }
                continue;
            }
            digits[(k - self.m) as usize] = d;
        }
        let p = LaaksoPoint { u: UltraCoord { digits }, t: j.t };
        self.check_point(&p)?;
        Ok(p)
    }

    pub fn to_json(&self) -> ModelJson {
        ModelJson { g: self.g.clone(), b: self.b.clone(), window: (self.m, self.n) }
    }

    pub fn from_json(j: &ModelJson, budget: usize) -> Result<Self> {
        Self::build(&j.g, &j.b, j.window.0, j.window.1, budget)
    }

    /// `V_g(2^{m-1})`, the mass of one copy.
    pub fn copy_mass(&self) -> BigRational {
        self.g_volume.at_level(self.m - 1).expect("window inside g's range").clone()
    }
}

struct Plan {
    kind: GeodesicKind,
    length: u64,
    detours: Vec<(usize, i32)>,
    visits: Vec<usize>,
    need: u64,
}

fn segments_of(walk: &Walk, start: &UltraCoord) -> Vec<Segment> {
    if walk.copies.is_empty() {
        return vec![Segment { u: start.clone(), path: walk.vertices.clone() }];
    }
    let mut out: Vec<Segment> = Vec::new();
    for (i, c) in walk.copies.iter().enumerate() {
        match out.last_mut() {
            Some(seg) if &seg.u == c => seg.path.push(walk.vertices[i + 1]),
            _ => out.push(Segment { u: c.clone(), path: vec![walk.vertices[i], walk.vertices[i + 1]] }),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProductBall {
    pub u: UltraCoord,
    pub ultra_radius: f64,
    pub t: usize,
    pub tree_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointJson {
    pub u: BTreeMap<i32, u32>,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelJson {
    pub g: BranchingProfile,
    pub b: BranchingProfile,
    pub window: (i32, i32),
}

/// Explicitly glued graph: one node per equivalence class of `(copy, vertex)`.
#[derive(Clone, Debug)]
pub struct QuotientGraph {
    num_vertices: usize,
    lookup: Vec<u32>,
    /// First `(copy, vertex)` pair of each class.
    pub reps: Vec<(u32, u32)>,
    pub class_size: Vec<u32>,
    /// Mass of a node is `multiplicity · mass_unit`.
    pub multiplicity: Vec<u32>,
    pub mass_unit: BigRational,
    pub edges: Vec<(u32, u32)>,
    offsets: Vec<usize>,
    adj: Vec<u32>,
    /// Metric length of every edge.
    pub edge_length: f64,
    /// `m_U` weight carried by every edge.
    pub edge_weight: f64,
}

impl QuotientGraph {
    pub fn build(model: &LaaksoModel) -> Result<Self> {
        let nv = model.tree.num_vertices();
        let pairs = model.num_copies * nv;
        if pairs > u32::MAX as usize {
            return Err(Error::Budget { needed: pairs, budget: u32::MAX as usize });
        }
        let mut uf: UnionFind<u32> = UnionFind::new(pairs);
        for (li, &r) in model.radix.iter().enumerate() {
            if r < 2 {
                continue;
            }
            let stride = model.strides[li];
            let k = model.m + li as i32;
            for &w in model.tree.wormholes_at(k)? {
                for c in 0..model.num_copies {
                    if (c / stride) % r as usize != 0 {
                        continue;
                    }
                    for d in 1..r as usize {
                        uf.union((c * nv + w) as u32, ((c + d * stride) * nv + w) as u32);
                    }
                }
            }
        }
        let mut label = vec![u32::MAX; pairs];
        let mut lookup = vec![0u32; pairs];
        let mut reps = Vec::new();
        let mut class_size = Vec::new();
        for idx in 0..pairs {
            let root = uf.find(idx as u32) as usize;
            if label[root] == u32::MAX {
                label[root] = reps.len() as u32;
                reps.push(((idx / nv) as u32, (idx % nv) as u32));
                class_size.push(0);
            }
            lookup[idx] = label[root];
            class_size[label[root] as usize] += 1;
        }
        drop(label);
        let multiplicity: Vec<u32> = reps
            .iter()
            .zip(&class_size)
            .map(|(&(_, t), &s)| if model.tree.vertex_level[t as usize] == Some(model.m) { s } else { 0 })
            .collect();
        let mass_unit = model.copy_mass() * &model.tree.atom;
        let mut edges = Vec::with_capacity(model.num_copies * model.tree.edges.len());
        for c in 0..model.num_copies {
            for &(a, b) in &model.tree.edges {
                edges.push((lookup[c * nv + a], lookup[c * nv + b]));
            }
        }
        let nn = reps.len();
        let mut offsets = vec![0usize; nn + 1];
        for &(a, b) in &edges {
            offsets[a as usize + 1] += 1;
            offsets[b as usize + 1] += 1;
        }
        for i in 0..nn {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut adj = vec![0u32; 2 * edges.len()];
        for &(a, b) in &edges {
            adj[fill[a as usize]] = b;
            fill[a as usize] += 1;
            adj[fill[b as usize]] = a;
            fill[b as usize] += 1;
        }
        Ok(Self {
            num_vertices: nv,
            lookup,
            reps,
            class_size,
            multiplicity,
            mass_unit,
            edges,
            offsets,
            adj,
            edge_length: model.unit(),
            edge_weight: rational_to_f64(&model.copy_mass()),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.reps.len()
    }

    pub fn node(&self, copy: usize, t: usize) -> usize {
        self.lookup[copy * self.num_vertices + t] as usize
    }

    pub fn node_of(&self, model: &LaaksoModel, p: &LaaksoPoint) -> usize {
        self.node(model.copy_index(&p.u), p.t)
    }

    pub fn rep_point(&self, model: &LaaksoModel, node: usize) -> LaaksoPoint {
        let (c, t) = self.reps[node];
        LaaksoPoint { u: model.copy_coord(c as usize), t: t as usize }
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.adj[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn node_mass(&self, v: usize) -> BigRational {
        &self.mass_unit * BigRational::from_integer(BigInt::from(self.multiplicity[v]))
    }

    pub fn node_mass_f64(&self) -> Vec<f64> {
        let unit = rational_to_f64(&self.mass_unit);
        self.multiplicity.iter().map(|&k| k as f64 * unit).collect()
    }

    pub fn total_mass(&self) -> BigRational {
        let total: u64 = self.multiplicity.iter().map(|&k| k as u64).sum();
        &self.mass_unit * BigRational::from_integer(BigInt::from(total))
    }

    /// Graph distances from `s` (units), `u32::MAX` when unreachable or beyond `limit`.
    pub fn bfs(&self, s: usize, limit: u32) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.num_nodes()];
        dist[s] = 0;
        let mut q = VecDeque::from([s as u32]);
        while let Some(v) = q.pop_front() {
            let dv = dist[v as usize];
            if dv >= limit {
                continue;
            }
            for &w in self.neighbors(v as usize) {
                if dist[w as usize] == u32::MAX {
                    dist[w as usize] = dv + 1;
                    q.push_back(w);
                }
            }
        }
        dist
    }

    /// Breadth-first distance between two nodes in units.
    pub fn oracle_distance(&self, a: usize, b: usize) -> Result<u64> {
        if a == b {
            return Ok(0);
        }
        let mut dist = vec![u32::MAX; self.num_nodes()];
        dist[a] = 0;
        let mut q = VecDeque::from([a as u32]);
        while let Some(v) = q.pop_front() {
            for &w in self.neighbors(v as usize) {
                if dist[w as usize] == u32::MAX {
                    dist[w as usize] = dist[v as usize] + 1;
                    if w as usize == b {
                        return Ok(dist[w as usize] as u64);
                    }
                    q.push_back(w);
                }
            }
        }
        Err(Error::Disconnected(a, b))
    }

    pub fn is_connected(&self) -> bool {
        self.num_nodes() == 0 || self.bfs(0, u32::MAX).iter().all(|&d| d != u32::MAX)
    }

    /// Mass of the open ball `B(node, r)` (metric radius).
    pub fn ball_measure(&self, node: usize, r: f64) -> BigRational {
        let rr = r / self.edge_length;
        let limit = rr.ceil().max(0.0) as u32;
        let dist = self.bfs(node, limit);
        let count: u64 = dist
            .iter()
            .zip(&self.multiplicity)
            .filter(|(&d, _)| d != u32::MAX && (d as f64) < rr)
            .map(|(_, &k)| k as u64)
            .sum();
        &self.mass_unit * BigRational::from_integer(BigInt::from(count))
    }

    /// Node sequence of a walk, after checking that consecutive copies agree
    /// on the shared vertex and that the endpoints are `x` and `y`.
    pub fn walk_nodes(&self, model: &LaaksoModel, walk: &Walk, x: &LaaksoPoint, y: &LaaksoPoint) -> Result<Vec<usize>> {
        let vs = &walk.vertices;
        if vs.first() != Some(&x.t) || vs.last() != Some(&y.t) || walk.copies.len() + 1 != vs.len() {
            return Err(Error::Invalid("walk endpoints or shape do not match".into()));
        }
        if walk.copies.is_empty() {
            let (a, b) = (self.node_of(model, x), self.node_of(model, y));
            return if a == b { Ok(vec![a]) } else { Err(Error::Invalid("empty walk between distinct nodes".into())) };
        }
        let mut nodes = Vec::with_capacity(vs.len());
        nodes.push(self.node(model.copy_index(&walk.copies[0]), vs[0]));
        if nodes[0] != self.node_of(model, x) {
            return Err(Error::Invalid("walk does not start at x".into()));
        }
        for i in 0..walk.copies.len() {
            let c = model.copy_index(&walk.copies[i]);
            if i > 0 && self.node(c, vs[i]) != nodes[i] {
                return Err(Error::Invalid(format!("copy change at step {i} is not through a matching wormhole")));
            }
            if self.tree_adjacent(model, vs[i], vs[i + 1]).is_none() {
                return Err(Error::Invalid(format!("vertices {} and {} are not adjacent", vs[i], vs[i + 1])));
            }
            nodes.push(self.node(c, vs[i + 1]));
        }
        if *nodes.last().unwrap() != self.node_of(model, y) {
            return Err(Error::Invalid("walk does not end at y".into()));
        }
        Ok(nodes)
    }

    fn tree_adjacent(&self, model: &LaaksoModel, a: usize, b: usize) -> Option<()> {
        model.tree.neighbors(a).contains(&b).then_some(())
    }

    pub fn summary(&self) -> GraphSummary {
        GraphSummary {
            nodes: self.num_nodes(),
            edges: self.edges.len(),
            total_mass: format_rational(&self.total_mass()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub nodes: usize,
    pub edges: usize,
    pub total_mass: String,
}

/// `V_g(r) V_b(r)` for a metric radius.
pub fn volume_scale(model: &LaaksoModel, r: f64) -> Result<f64> {
    Ok(rational_to_f64(model.g_volume.at_radius(r)?) * rational_to_f64(model.tree.volume.at_radius(r)?))
}

/// Per-time occupation statistic of pencil samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupationRow {
    pub step: usize,
    pub time: f64,
    pub level: i32,
    pub max_count: u64,
    pub samples: u64,
    /// Three-sigma lower bound of the top occupation probability, times `V_g(2^{k(t)}) / V_g(2^{m-1})`.
    pub normalized: f64,
}

/// Occupation rows for times with `k(t) ≥ m`, where
/// `k(t) = min(⌊log2 t⌋, ⌊log2 (D - t)⌋) - 3`.
pub fn occupation_rows(model: &LaaksoModel, paths: &[Vec<usize>], total_length: u64) -> Result<Vec<OccupationRow>> {
    let n = paths.len() as u64;
    let unit = model.unit();
    let d = total_length as f64 * unit;
    let base = rational_to_f64(&model.copy_mass());
    let mut rows = Vec::new();
    for step in 1..total_length as usize {
        let t = step as f64 * unit;
        let level = crate::scaling::dyadic_floor(t).min(crate::scaling::dyadic_floor(d - t)) - 3;
        if level < model.m {
            continue;
        }
        let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
        for p in paths {
            *counts.entry(p[step]).or_default() += 1;
        }
        let max_count = counts.values().copied().max().unwrap_or(0);
        let p_hat = max_count as f64 / n as f64;
        let lower = (p_hat - 3.0 * (p_hat * (1.0 - p_hat) / n as f64).sqrt()).max(0.0);
        let vg = rational_to_f64(model.g_volume.at_level(level.min(model.n))?);
        rows.push(OccupationRow { step, time: t, level, max_count, samples: n, normalized: lower * vg / base });
    }
    Ok(rows)
}

/// Metric length `2^k` as an exact rational.
pub fn level_length(k: i32) -> BigRational {
    pow2(k as i64)
}
