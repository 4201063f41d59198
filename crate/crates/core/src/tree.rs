//! Finite-window model `T_{m,n}` of the branching R-tree.
//!
//! Edges are the level-`m` star edges and all have length one unit, where a
//! unit is `2^{m-1}` in metric terms. Vertex ids are assigned top-down, level
//! by level, so refining the window (`m → m-1`) keeps every existing id.

use crate::error::{Error, Result};
use crate::scaling::{pow2, volume_profile, BranchingProfile, VolumeProfile};
use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const DEFAULT_BUDGET: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub level: i32,
    pub center: usize,
    /// Attachment points; the first two entries of `boundary`.
    pub ends: [usize; 2],
    /// All `b(level)` boundary points, ends first.
    pub boundary: Vec<usize>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TreeModel {
    pub b: BranchingProfile,
    pub m: i32,
    pub n: i32,
    /// `Some(k)` when the vertex is the center of a `k`-cell.
    pub vertex_level: Vec<Option<i32>>,
    /// Cell that introduced the vertex (as center or as new boundary point).
    pub creator: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub cells: Vec<Cell>,
    /// `cells_by_level[k - m]`.
    pub cells_by_level: Vec<Vec<usize>>,
    /// `wormholes[k - m]`: centers of the `k`-cells.
    pub wormholes: Vec<Vec<usize>>,
    /// Mass placed on each `m`-center.
    pub atom: BigRational,
    pub volume: VolumeProfile,
    end_index: HashMap<(i32, usize), Vec<usize>>,
    adj_offsets: Vec<usize>,
    adj: Vec<usize>,
    parent: Vec<usize>,
    depth: Vec<u32>,
    up: Vec<Vec<u32>>,
}

/// Number of vertices of `T_{m,n}` without building it.
pub fn vertex_count(b: &BranchingProfile, m: i32, n: i32) -> Result<usize> {
    let mut cells: usize = 1;
    let mut count: usize = 1 + b.digit(n)? as usize;
    for k in (m..n).rev() {
        cells = cells.saturating_mul(b.digit(k + 1)? as usize);
        count = count.saturating_add(cells.saturating_mul(b.digit(k)? as usize - 1));
    }
    Ok(count)
}

impl TreeModel {
    pub fn build(b: &BranchingProfile, m: i32, n: i32, budget: usize) -> Result<Self> {
        if m > n {
            return Err(Error::Invalid(format!("window [{m}, {n}] is empty")));
        }
        if m < b.lo_level || n > b.hi_level {
            return Err(Error::LevelOutOfRange {
                level: if m < b.lo_level { m } else { n },
                lo: b.lo_level,
                hi: b.hi_level,
            });
        }
        let needed = vertex_count(b, m, n)?;
        if needed > budget {
            return Err(Error::Budget { needed, budget });
        }
        let volume = volume_profile(b)?;
        let atom = volume.at_level(m)?.clone();

        let mut vertex_level: Vec<Option<i32>> = Vec::with_capacity(needed);
        let mut creator: Vec<usize> = Vec::with_capacity(needed);
        let mut cells: Vec<Cell> = Vec::new();
        let mut cells_by_level = vec![Vec::new(); (n - m + 1) as usize];
        let mut edges = Vec::with_capacity(needed.saturating_sub(1));

        let mut new_vertex = |level: Option<i32>, cell: usize, vl: &mut Vec<Option<i32>>| {
            vl.push(level);
            creator.push(cell);
            vl.len() - 1
        };

        let top_center = new_vertex(Some(n), 0, &mut vertex_level);
        let boundary: Vec<usize> =
            (0..b.digit(n)?).map(|_| new_vertex(None, 0, &mut vertex_level)).collect();
        cells.push(Cell {
            level: n,
            center: top_center,
            ends: [boundary[0], boundary[1.min(boundary.len() - 1)]],
            boundary,
            parent: None,
            children: Vec::new(),
        });
        cells_by_level[(n - m) as usize].push(0);

        for k in (m..n).rev() {
            let bk = b.digit(k)? as usize;
            let parents = cells_by_level[(k + 1 - m) as usize].clone();
            for pc in parents {
                let (pcenter, pboundary) = (cells[pc].center, cells[pc].boundary.clone());
                for &leaf in &pboundary {
                    let id = cells.len();
                    let center = new_vertex(Some(k), id, &mut vertex_level);
                    let mut boundary = vec![pcenter, leaf];
                    for _ in 2..bk {
                        boundary.push(new_vertex(None, id, &mut vertex_level));
                    }
                    cells.push(Cell {
                        level: k,
                        center,
                        ends: [pcenter, leaf],
                        boundary,
                        parent: Some(pc),
                        children: Vec::new(),
                    });
                    cells[pc].children.push(id);
                    cells_by_level[(k - m) as usize].push(id);
                }
            }
        }
        for &c in &cells_by_level[0] {
            for &leaf in &cells[c].boundary {
                edges.push((cells[c].center, leaf));
            }
        }
        let nv = vertex_level.len();
        debug_assert_eq!(nv, needed);

        let mut end_index: HashMap<(i32, usize), Vec<usize>> = HashMap::new();
        for (id, c) in cells.iter().enumerate() {
            if c.parent.is_some() {
                for &e in &c.ends {
                    end_index.entry((c.level, e)).or_default().push(id);
                }
            }
        }
        let wormholes = cells_by_level
            .iter()
            .map(|ids| ids.iter().map(|&c| cells[c].center).collect())
            .collect();

        let mut degree = vec![0usize; nv + 1];
        for &(a, c) in &edges {
            degree[a + 1] += 1;
            degree[c + 1] += 1;
        }
        for i in 0..nv {
            degree[i + 1] += degree[i];
        }
        let adj_offsets = degree;
        let mut fill = adj_offsets.clone();
        let mut adj = vec![0usize; 2 * edges.len()];
        for &(a, c) in &edges {
            adj[fill[a]] = c;
            fill[a] += 1;
            adj[fill[c]] = a;
            fill[c] += 1;
        }

        let mut t = TreeModel {
            b: b.clone(),
            m,
            n,
            vertex_level,
            creator,
            edges,
            cells,
            cells_by_level,
            wormholes,
            atom,
            volume,
            end_index,
            adj_offsets,
            adj,
            parent: vec![0; nv],
            depth: vec![0; nv],
            up: Vec::new(),
        };
        t.root_at_zero();
        Ok(t)
    }

    fn root_at_zero(&mut self) {
        let nv = self.num_vertices();
        let mut seen = vec![false; nv];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for i in self.adj_offsets[v]..self.adj_offsets[v + 1] {
                let w = self.adj[i];
                if !seen[w] {
                    seen[w] = true;
                    self.parent[w] = v;
                    self.depth[w] = self.depth[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        let levels = (usize::BITS - nv.leading_zeros()).max(1) as usize;
        let mut up = vec![self.parent.iter().map(|&p| p as u32).collect::<Vec<u32>>()];
        for j in 1..levels {
            let prev = &up[j - 1];
            let next = prev.iter().map(|&p| prev[p as usize]).collect();
            up.push(next);
        }
        self.up = up;
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_level.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[self.adj_offsets[v]..self.adj_offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj_offsets[v + 1] - self.adj_offsets[v]
    }

    /// Metric length of one edge, `2^{m-1}`.
    pub fn unit(&self) -> f64 {
        ((self.m - 1) as f64).exp2()
    }

    pub fn unit_exact(&self) -> BigRational {
        pow2((self.m - 1) as i64)
    }

    /// Length in units of a metric length `2^k`.
    pub fn units_of_level(&self, k: i32) -> u64 {
        1u64 << (k - self.m + 1)
    }

    pub fn is_wormhole(&self, v: usize, k: i32) -> bool {
        self.vertex_level[v] == Some(k)
    }

    pub fn wormholes_at(&self, k: i32) -> Result<&[usize]> {
        self.check_level(k)?;
        Ok(&self.wormholes[(k - self.m) as usize])
    }

    pub fn cells_at(&self, k: i32) -> Result<&[usize]> {
        self.check_level(k)?;
        Ok(&self.cells_by_level[(k - self.m) as usize])
    }

    pub fn check_level(&self, k: i32) -> Result<()> {
        if k < self.m || k > self.n {
            return Err(Error::LevelOutOfRange { level: k, lo: self.m, hi: self.n });
        }
        Ok(())
    }

    pub fn check_vertex(&self, v: usize) -> Result<()> {
        if v >= self.num_vertices() {
            return Err(Error::InvalidPoint(format!("vertex {v} not in tree of {} vertices", self.num_vertices())));
        }
        Ok(())
    }

    pub fn vertex_mass(&self, v: usize) -> BigRational {
        if self.vertex_level[v] == Some(self.m) {
            self.atom.clone()
        } else {
            BigRational::zero()
        }
    }

    pub fn vertex_mass_f64(&self, v: usize) -> f64 {
        if self.vertex_level[v] == Some(self.m) {
            crate::scaling::rational_to_f64(&self.atom)
        } else {
            0.0
        }
    }

    pub fn lca(&self, mut x: usize, mut y: usize) -> usize {
        if self.depth[x] < self.depth[y] {
            std::mem::swap(&mut x, &mut y);
        }
        let mut diff = self.depth[x] - self.depth[y];
        let mut j = 0;
        while diff > 0 {
            if diff & 1 == 1 {
                x = self.up[j][x] as usize;
            }
            diff >>= 1;
            j += 1;
        }
        if x == y {
            return x;
        }
        for j in (0..self.up.len()).rev() {
            if self.up[j][x] != self.up[j][y] {
                x = self.up[j][x] as usize;
                y = self.up[j][y] as usize;
            }
        }
        self.parent[x]
    }

    /// Distance in units.
    pub fn distance(&self, x: usize, y: usize) -> u64 {
        let l = self.lca(x, y);
        (self.depth[x] + self.depth[y] - 2 * self.depth[l]) as u64
    }

    pub fn geodesic(&self, x: usize, y: usize) -> Vec<usize> {
        let l = self.lca(x, y);
        let mut path = Vec::new();
        let mut v = x;
        while v != l {
            path.push(v);
            v = self.parent[v];
        }
        path.push(l);
        let mut tail = Vec::new();
        let mut v = y;
        while v != l {
            tail.push(v);
            v = self.parent[v];
        }
        path.extend(tail.into_iter().rev());
        path
    }

    /// Branch point `c(ρ, x, y)` with `[ρ,x] ∩ [ρ,y] = [ρ, c]`.
    pub fn meet_point(&self, rho: usize, x: usize, y: usize) -> usize {
        let cands = [self.lca(rho, x), self.lca(rho, y), self.lca(x, y)];
        *cands.iter().max_by_key(|&&v| self.depth[v]).unwrap()
    }

    /// Distance in units from `c` to the segment `[x, y]`.
    pub fn distance_to_segment(&self, c: usize, x: usize, y: usize) -> u64 {
        (self.distance(c, x) + self.distance(c, y) - self.distance(x, y)) / 2
    }

    /// Bit `k - m` is set when `[x, y]` contains a level-`k` wormhole.
    pub fn segment_level_mask(&self, x: usize, y: usize) -> u64 {
        let l = self.lca(x, y);
        let mut mask = 0u64;
        for start in [x, y] {
            let mut v = start;
            loop {
                if let Some(k) = self.vertex_level[v] {
                    mask |= 1 << (k - self.m);
                }
                if v == l {
                    break;
                }
                v = self.parent[v];
            }
        }
        mask
    }

    pub fn segment_hits_level(&self, x: usize, y: usize, k: i32) -> Result<bool> {
        self.check_level(k)?;
        Ok(self.segment_level_mask(x, y) >> (k - self.m) & 1 == 1)
    }

    /// Level at which `v` was introduced.
    pub fn creation_level(&self, v: usize) -> i32 {
        self.cells[self.creator[v]].level
    }

    pub fn ancestor_cell(&self, mut cell: usize, k: i32) -> usize {
        while self.cells[cell].level < k {
            cell = self.cells[cell].parent.expect("level within window");
        }
        cell
    }

    /// All `k`-cells containing `v`.
    pub fn cells_containing(&self, v: usize, k: i32) -> Vec<usize> {
        if self.creation_level(v) <= k {
            vec![self.ancestor_cell(self.creator[v], k)]
        } else {
            self.end_index.get(&(k, v)).cloned().unwrap_or_default()
        }
    }

    /// `k`-cells other than `cell` sharing a point with it, with the shared point.
    pub fn adjacent_cells(&self, cell: usize) -> Vec<(usize, usize)> {
        let c = &self.cells[cell];
        let mut out = Vec::new();
        if c.parent.is_none() {
            return out;
        }
        for &e in &c.ends {
            for &o in self.end_index.get(&(c.level, e)).map(|v| v.as_slice()).unwrap_or(&[]) {
                if o != cell {
                    out.push((o, e));
                }
            }
        }
        out
    }

    /// Level-`k` wormhole nearest to `[x, y]` (smallest id on ties) and its distance in units.
    pub fn nearest_wormhole(&self, k: i32, x: usize, y: usize) -> Result<(usize, u64)> {
        self.check_level(k)?;
        let mut cands: Vec<usize> = Vec::new();
        let mut last_cell = usize::MAX;
        for v in self.geodesic(x, y) {
            for c in self.cells_containing(v, k) {
                if c == last_cell {
                    continue;
                }
                last_cell = c;
                cands.push(c);
                cands.extend(self.adjacent_cells(c).into_iter().map(|(o, _)| o));
            }
        }
        cands.sort_unstable();
        cands.dedup();
        let best = cands
            .into_iter()
            .map(|c| {
                let w = self.cells[c].center;
                (self.distance_to_segment(w, x, y), w)
            })
            .min()
            .expect("every vertex lies in some cell of each window level");
        Ok((best.1, best.0))
    }

    /// All vertices of a cell (center, boundary and everything below).
    pub fn cell_vertices(&self, cell: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![cell];
        while let Some(c) = stack.pop() {
            out.push(self.cells[c].center);
            out.extend_from_slice(&self.cells[c].boundary);
            stack.extend_from_slice(&self.cells[c].children);
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Cutoff equal to 1 on `cell`, decaying linearly across each adjacent cell
    /// of the same level toward its far end, and 0 elsewhere. Adjacent cells
    /// missing at the window boundary are simply absent.
    pub fn cell_cutoff(&self, cell: usize) -> TreeFunction {
        let mut values = vec![0.0; self.num_vertices()];
        self.raise_cell_cutoff(cell, &mut values);
        TreeFunction { values }
    }

    fn raise_cell_cutoff(&self, cell: usize, values: &mut [f64]) {
        for v in self.cell_vertices(cell) {
            values[v] = 1.0;
        }
        for (other, x) in self.adjacent_cells(cell) {
            let oc = &self.cells[other];
            let far = if oc.ends[0] == x { oc.ends[1] } else { oc.ends[0] };
            let span = self.distance(x, far) as f64;
            for v in self.cell_vertices(other) {
                let c = self.meet_point(v, x, far);
                let phi = self.distance(c, far) as f64 / span;
                if phi > values[v] {
                    values[v] = phi;
                }
            }
        }
    }

    /// Cell-level cutoff for the ball `B(t, r)`: with `2^{k-1} ≤ r < 2^k`,
    /// the maximum of the cell cutoffs of all `k`-cells meeting the first
    /// `k`-cell containing `t`. Identically 1 when `k > n`.
    pub fn ball_cutoff(&self, t: usize, r: f64) -> Result<TreeFunction> {
        self.check_vertex(t)?;
        let k = crate::scaling::dyadic_floor(r) + 1;
        if k > self.n {
            return Ok(TreeFunction { values: vec![1.0; self.num_vertices()] });
        }
        if k <= self.m {
            return Err(Error::Invalid(format!("radius {r} below the window resolution")));
        }
        let base = *self.cells_containing(t, k).iter().min().expect("t lies in a k-cell");
        let mut values = vec![0.0; self.num_vertices()];
        self.raise_cell_cutoff(base, &mut values);
        for (other, _) in self.adjacent_cells(base) {
            self.raise_cell_cutoff(other, &mut values);
        }
        Ok(TreeFunction { values })
    }

    /// `Σ |Δf|^p / len^{p-1}` over all edges, metric units.
    pub fn p_energy(&self, f: &TreeFunction, p: f64) -> f64 {
        let scale = self.unit().powf(1.0 - p);
        self.edges.iter().map(|&(a, c)| (f.values[a] - f.values[c]).abs().powf(p)).sum::<f64>() * scale
    }

    /// Energy restricted to the open metric ball `B(center, radius)`, counting
    /// the covered fraction of each edge.
    pub fn ball_p_energy(&self, f: &TreeFunction, p: f64, center: usize, radius: f64) -> f64 {
        let rr = radius / self.unit();
        let scale = self.unit().powf(1.0 - p);
        self.edges
            .iter()
            .map(|&(a, c)| {
                let frac = edge_fraction(self.distance(center, a) as f64, self.distance(center, c) as f64, rr);
                frac * (f.values[a] - f.values[c]).abs().powf(p)
            })
            .sum::<f64>()
            * scale
    }

    /// Vertices of the open ball `B(center, radius)` (metric radius).
    pub fn ball(&self, center: usize, radius: f64) -> Vec<usize> {
        let rr = radius / self.unit();
        (0..self.num_vertices()).filter(|&v| (self.distance(center, v) as f64) < rr).collect()
    }

    /// `Σ_B m |f - f_B|^p / (r^{p-1} V_b(r) E_{λB}(f))`; zero when the numerator vanishes.
    pub fn pi_ratio(&self, f: &TreeFunction, p: f64, center: usize, radius: f64, dilation: f64) -> Result<f64> {
        let ball = self.ball(center, radius);
        let mass: f64 = ball.iter().map(|&v| self.vertex_mass_f64(v)).sum();
        if mass == 0.0 {
            return Err(Error::Invalid(format!("ball ({center}, {radius}) carries no mass")));
        }
        let mean = ball.iter().map(|&v| self.vertex_mass_f64(v) * f.values[v]).sum::<f64>() / mass;
        let lhs: f64 = ball.iter().map(|&v| self.vertex_mass_f64(v) * (f.values[v] - mean).abs().powf(p)).sum();
        if lhs == 0.0 {
            return Ok(0.0);
        }
        let energy = self.ball_p_energy(f, p, center, dilation * radius);
        let vb = crate::scaling::rational_to_f64(self.volume.at_radius(radius)?);
        Ok(lhs / (radius.powf(p - 1.0) * vb * energy))
    }

    pub fn to_json(&self) -> TreeJson {
        TreeJson {
            b: self.b.clone(),
            window: (self.m, self.n),
            vertices: self
                .vertex_level
                .iter()
                .enumerate()
                .map(|(id, &level)| TreeVertexJson {
                    id,
                    level,
                    mass: crate::scaling::format_rational(&self.vertex_mass(id)),
                })
                .collect(),
            edges: self.edges.clone(),
            unit: crate::scaling::format_rational(&self.unit_exact()),
        }
    }

    /// Rebuilds the model from its JSON form and checks that it matches.
    pub fn from_json(json: &TreeJson) -> Result<Self> {
        let t = Self::build(&json.b, json.window.0, json.window.1, json.vertices.len().max(1))?;
        if t.edges != json.edges || t.to_json().vertices != json.vertices {
            return Err(Error::Invalid("tree JSON does not match its branching profile".into()));
        }
        Ok(t)
    }
}

/// Measure of `{s ∈ [0,1] : min(da + s, db + 1 - s) < r}`.
pub fn edge_fraction(da: f64, db: f64, r: f64) -> f64 {
    let alpha = (r - da).clamp(0.0, 1.0);
    let beta = (r - db).clamp(0.0, 1.0);
    (alpha + beta).min(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeFunction {
    pub values: Vec<f64>,
}

impl TreeFunction {
    pub fn constant(t: &TreeModel, c: f64) -> Self {
        Self { values: vec![c; t.num_vertices()] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeVertexJson {
    pub id: usize,
    pub level: Option<i32>,
    pub mass: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeJson {
    pub b: BranchingProfile,
    pub window: (i32, i32),
    pub vertices: Vec<TreeVertexJson>,
    pub edges: Vec<(usize, usize)>,
    pub unit: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scaling::DigitRole;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn constant_tree(d: u64, m: i32, n: i32) -> TreeModel {
        let b = BranchingProfile::constant(d, m.min(0), n.max(1), DigitRole::Branching).unwrap();
        TreeModel::build(&b, m, n, DEFAULT_BUDGET).unwrap()
    }

    fn bfs(t: &TreeModel, s: usize) -> Vec<u64> {
        let mut dist = vec![u64::MAX; t.num_vertices()];
        dist[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            for &w in t.neighbors(v) {
                if dist[w] == u64::MAX {
                    dist[w] = dist[v] + 1;
                    q.push_back(w);
                }
            }
        }
        dist
    }

    fn bfs_path(t: &TreeModel, x: usize, y: usize) -> Vec<usize> {
        let mut prev = vec![usize::MAX; t.num_vertices()];
        prev[x] = x;
        let mut q = VecDeque::from([x]);
        while let Some(v) = q.pop_front() {
            for &w in t.neighbors(v) {
                if prev[w] == usize::MAX {
                    prev[w] = v;
                    q.push_back(w);
                }
            }
        }
        let mut path = vec![y];
        while *path.last().unwrap() != x {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse();
        path
    }

    #[test]
    fn single_star_is_a_path() {
        let t = constant_tree(2, 1, 1);
        assert_eq!(t.num_vertices(), 3);
        assert_eq!(t.edges.len(), 2);
        assert_eq!(t.unit(), 1.0);
        assert_eq!(t.distance(1, 2), 2);
    }

    #[test]
    fn figure_three_tree() {
        let b = BranchingProfile::new(-1, 1, vec![6, 3, 2], DigitRole::Branching).unwrap();
        let t = TreeModel::build(&b, -1, 0, DEFAULT_BUDGET).unwrap();
        assert_eq!(t.num_vertices(), 19);
        assert_eq!(t.degree(0), 3);
        assert_eq!(t.wormholes_at(-1).unwrap().len(), 3);
        for &w in t.wormholes_at(-1).unwrap() {
            assert_eq!(t.degree(w), 6);
        }
    }

    #[test]
    fn cells_split_at_center() {
        let t = constant_tree(2, 0, 2);
        for &c in t.cells_at(1).unwrap() {
            let cell = &t.cells[c];
            assert_eq!(cell.children.len(), 2);
            for &ch in &cell.children {
                assert!(t.cells[ch].ends.contains(&cell.center));
            }
        }
    }

    #[test]
    fn structural_invariants() {
        for (d, m, n) in [(2, -1, 3), (3, 0, 3), (4, -1, 1)] {
            let t = constant_tree(d, m, n);
            let nv = t.num_vertices();
            assert_eq!(t.edges.len(), nv - 1);
            assert_eq!(vertex_count(&t.b, m, n).unwrap(), nv);
            let d0 = bfs(&t, 0);
            assert!(d0.iter().all(|&x| x != u64::MAX), "connected");
            let far = (0..nv).max_by_key(|&v| d0[v]).unwrap();
            let ecc = *bfs(&t, far).iter().max().unwrap();
            assert_eq!(ecc as f64 * t.unit(), (n as f64).exp2(), "diameter");
            for k in m..=n {
                for &c in t.cells_at(k).unwrap() {
                    let cell = &t.cells[c];
                    assert_eq!(t.distance(cell.ends[0], cell.ends[1]) as f64 * t.unit(), (k as f64).exp2());
                    let mass: BigRational = t.cell_vertices(c).iter().map(|&v| t.vertex_mass(v)).sum();
                    assert_eq!(&mass, t.volume.at_level(k).unwrap());
                    if k > m {
                        assert_eq!(cell.children.len() as u64, t.b.digit(k).unwrap());
                    }
                }
                let cells = t.cells_at(k).unwrap();
                for (i, &a) in cells.iter().enumerate() {
                    let va = t.cell_vertices(a);
                    for &bc in &cells[i + 1..] {
                        let shared = t.cell_vertices(bc).iter().filter(|v| va.binary_search(v).is_ok()).count();
                        assert!(shared <= 1);
                    }
                }
            }
            for v in 0..nv {
                match t.vertex_level[v] {
                    Some(k) => assert_eq!(t.degree(v) as u64, t.b.digit(k).unwrap()),
                    None => assert_eq!(t.degree(v), 1),
                }
            }
        }
    }

    #[test]
    fn cell_nesting() {
        let t = constant_tree(3, -1, 2);
        for c in 0..t.cells.len() {
            if let Some(p) = t.cells[c].parent {
                let pv = t.cell_vertices(p);
                assert!(t.cell_vertices(c).iter().all(|v| pv.binary_search(v).is_ok()));
            }
        }
    }

    #[test]
    fn refinement_keeps_ids() {
        let coarse = constant_tree(3, 1, 3);
        let fine = constant_tree(3, 0, 3);
        assert_eq!(&fine.vertex_level[..coarse.num_vertices()], &coarse.vertex_level[..]);
        for (a, c) in coarse.cells.iter().zip(&fine.cells) {
            assert_eq!((a.center, a.ends), (c.center, c.ends));
        }
    }

    #[test]
    fn budget_enforced() {
        let b = BranchingProfile::constant(4, 0, 8, DigitRole::Branching).unwrap();
        assert!(matches!(TreeModel::build(&b, 0, 8, 1000), Err(Error::Budget { .. })));
        assert!(matches!(TreeModel::build(&b, -1, 3, 1000), Err(Error::LevelOutOfRange { .. })));
    }

    #[test]
    fn leaf_to_leaf_across_hub() {
        let t = constant_tree(2, 1, 1);
        assert_eq!(t.distance(1, 2) as f64 * t.unit(), 2.0);
        assert_eq!(t.distance(1, 1), 0);
    }

    #[test]
    fn tripod_meet_point() {
        let t = constant_tree(3, 1, 1);
        assert_eq!(t.meet_point(1, 2, 3), 0);
        let path = constant_tree(2, 0, 2);
        let g = path.geodesic(1, 2);
        assert_eq!(path.meet_point(g[0], g[g.len() / 2], g[g.len() - 1]), g[g.len() / 2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn distance_matches_bfs(x in 0usize..1000, y in 0usize..1000, z in 0usize..1000) {
            let t = constant_tree(3, 0, 3);
            let nv = t.num_vertices();
            let (x, y, z) = (x % nv, y % nv, z % nv);
            let dx = bfs(&t, x);
            prop_assert_eq!(t.distance(x, y), dx[y]);
            prop_assert_eq!(t.geodesic(x, y), bfs_path(&t, x, y));
            let c = t.meet_point(x, y, z);
            let on_all = |a: usize, b: usize| bfs_path(&t, a, b).contains(&c);
            prop_assert!(on_all(x, y) && on_all(y, z) && on_all(x, z));
            prop_assert_eq!(t.distance(x, c) + t.distance(c, y), t.distance(x, y));
        }

        #[test]
        fn nearest_wormhole_matches_scan(x in 0usize..2000, y in 0usize..2000, kk in 0i32..4) {
            let b = BranchingProfile::new(-1, 2, vec![3, 2, 3, 2], DigitRole::Branching).unwrap();
            let t = TreeModel::build(&b, -1, 2, DEFAULT_BUDGET).unwrap();
            let nv = t.num_vertices();
            let (x, y, k) = (x % nv, y % nv, kk - 1);
            let seg = bfs_path(&t, x, y);
            let mut best = (u64::MAX, usize::MAX);
            for &w in t.wormholes_at(k).unwrap() {
                let dw = bfs(&t, w);
                let d = seg.iter().map(|&s| dw[s]).min().unwrap();
                best = best.min((d, w));
            }
            let (w, d) = t.nearest_wormhole(k, x, y).unwrap();
            prop_assert_eq!((d, w), best);
            let hits = seg.iter().any(|&v| t.is_wormhole(v, k));
            prop_assert_eq!(t.segment_hits_level(x, y, k).unwrap(), hits);
            if hits {
                prop_assert_eq!(d, 0);
            }
            if t.distance(x, y) >= t.units_of_level(k) {
                prop_assert!(d <= t.units_of_level(k - 1));
            }
        }
    }

    #[test]
    fn interior_cell_cutoff_energy() {
        let t = constant_tree(2, 0, 4);
        for p in [1.5, 2.0, 3.0] {
            for k in 1..4 {
                for &c in t.cells_at(k).unwrap() {
                    let f = t.cell_cutoff(c);
                    let neighbors = t.adjacent_cells(c).len();
                    let expected = neighbors as f64 / ((p - 1.0) * k as f64).exp2();
                    assert!((t.p_energy(&f, p) - expected).abs() < 1e-12 * expected.max(1.0));
                    assert!(f.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
            let interior = t.cells_at(2).unwrap().iter().filter(|&&c| t.adjacent_cells(c).len() == 2).count();
            assert!(interior > 0);
        }
    }

    #[test]
    fn whole_window_cutoff_is_one() {
        let t = constant_tree(3, 0, 2);
        let f = t.cell_cutoff(0);
        assert!(f.values.iter().all(|&v| v == 1.0));
        assert_eq!(t.p_energy(&f, 2.0), 0.0);
    }

    #[test]
    fn cutoff_respects_lemma_bound() {
        let b = BranchingProfile::new(0, 3, vec![2, 3, 2, 3], DigitRole::Branching).unwrap();
        let t = TreeModel::build(&b, 0, 3, DEFAULT_BUDGET).unwrap();
        let sup = t.b.sup() as f64;
        for p in [1.5, 2.0, 3.0] {
            for k in 1..=3 {
                let bound = 2.0 * (sup - 1.0) / ((p - 1.0) * k as f64).exp2();
                for &c in t.cells_at(k).unwrap() {
                    assert!(t.p_energy(&t.cell_cutoff(c), p) <= bound + 1e-12);
                }
            }
        }
        let k1: Vec<_> = t.cells_at(1).unwrap().to_vec();
        let worst = k1.iter().map(|&c| t.p_energy(&t.cell_cutoff(c), 2.0)).fold(0.0, f64::max);
        assert!(worst <= 2.0);
    }

    #[test]
    fn energy_of_single_edge() {
        let t = constant_tree(2, 2, 2);
        let mut f = TreeFunction::constant(&t, 0.0);
        assert_eq!(t.p_energy(&f, 2.5), 0.0);
        f.values[1] = 1.0;
        let ell: f64 = 2.0;
        assert!((t.p_energy(&f, 2.5) - ell.powf(-1.5)).abs() < 1e-15);
    }

    #[test]
    fn edge_fraction_cases() {
        assert_eq!(edge_fraction(0.0, 1.0, 5.0), 1.0);
        assert_eq!(edge_fraction(3.0, 4.0, 3.25), 0.25);
        assert_eq!(edge_fraction(3.0, 3.0, 3.25), 0.5);
        assert_eq!(edge_fraction(3.0, 4.0, 2.0), 0.0);
    }

    #[test]
    fn pi_ratio_on_path() {
        // b ≡ 2 gives a path; f = distance to center has |∇f| = 1.
        let t = constant_tree(2, 0, 5);
        let center = 0;
        let f = TreeFunction {
            values: (0..t.num_vertices()).map(|v| t.distance(center, v) as f64 * t.unit()).collect(),
        };
        assert_eq!(t.pi_ratio(&TreeFunction::constant(&t, 2.0), 2.0, center, 4.0, 1.0).unwrap(), 0.0);
        let r = 4.0;
        let ratio = t.pi_ratio(&f, 2.0, center, r, 1.0).unwrap();
        // Closed form: atoms of mass 1 at odd unit distances 1,3,5,7 (metric 0.5 ...) on both sides.
        let ball = t.ball(center, r);
        let masses: Vec<f64> = ball.iter().map(|&v| t.vertex_mass_f64(v)).collect();
        let m: f64 = masses.iter().sum();
        let vals: Vec<f64> = ball.iter().map(|&v| f.values[v]).collect();
        let mean = masses.iter().zip(&vals).map(|(a, b)| a * b).sum::<f64>() / m;
        let lhs: f64 = masses.iter().zip(&vals).map(|(a, b)| a * (b - mean).powi(2)).sum();
        let rhs = r * 4.0 * (2.0 * r);
        assert!((ratio - lhs / rhs).abs() < 1e-12);
        assert!(ratio < 1.0);
    }

    #[test]
    fn ball_cutoff_support_and_value() {
        let t = constant_tree(3, 0, 4);
        let r = 2.0;
        for t0 in [0usize, 5, 17, 40] {
            let f = t.ball_cutoff(t0, r).unwrap();
            for v in 0..t.num_vertices() {
                let d = t.distance(t0, v) as f64 * t.unit();
                if d < r {
                    assert_eq!(f.values[v], 1.0);
                }
                if d >= 8.0 * r {
                    assert_eq!(f.values[v], 0.0);
                }
            }
        }
        assert!(t.ball_cutoff(0, 16.0).unwrap().values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn json_round_trip() {
        let t = constant_tree(3, 0, 2);
        let s = serde_json::to_string(&t.to_json()).unwrap();
        let back = TreeModel::from_json(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(back.to_json(), t.to_json());
    }
}
