//! Discrete p-energy on weighted graphs, p-capacity, the lifted Laakso cutoff
//! and the Poincaré / cutoff-Sobolev evaluators.

use crate::error::{Error, Result};
use crate::laakso::{LaaksoModel, LaaksoPoint, QuotientGraph};
use crate::scaling::rational_to_f64;
use crate::tree::{edge_fraction, TreeModel};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Clone, Debug, PartialEq)]
pub struct NodeFunction {
    pub values: Vec<f64>,
}

impl NodeFunction {
    pub fn constant(n: usize, c: f64) -> Self {
        Self { values: vec![c; n] }
    }

    pub fn max(&self, other: &Self) -> Self {
        Self { values: self.values.iter().zip(&other.values).map(|(a, b)| a.max(*b)).collect() }
    }

    pub fn min(&self, other: &Self) -> Self {
        Self { values: self.values.iter().zip(&other.values).map(|(a, b)| a.min(*b)).collect() }
    }

    pub fn combine(&self, other: &Self, s: f64) -> Self {
        Self { values: self.values.iter().zip(&other.values).map(|(a, b)| a + s * b).collect() }
    }

    pub fn clipped(&self) -> Self {
        Self { values: self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
}

/// Graph with per-edge metric length and `λ` weight and per-node mass.
/// The energy of `f` is `Σ_e w_e |f(a) - f(b)|^p / len_e^{p-1}`.
#[derive(Clone, Debug)]
pub struct EnergyGraph {
    pub edges: Vec<Edge>,
    pub lengths: Vec<f64>,
    pub weights: Vec<f64>,
    pub masses: Vec<f64>,
    offsets: Vec<usize>,
    incident: Vec<usize>,
}

impl EnergyGraph {
    pub fn new(masses: Vec<f64>, edges: Vec<(usize, usize, f64, f64)>) -> Result<Self> {
        let n = masses.len();
        for &(a, b, len, w) in &edges {
            if a >= n || b >= n || a == b {
                return Err(Error::Invalid(format!("bad edge ({a}, {b}) in graph of {n} nodes")));
            }
            if !(len > 0.0) || !(w > 0.0) {
                return Err(Error::Invalid(format!("edge ({a}, {b}) needs positive length and weight")));
            }
        }
        let mut offsets = vec![0usize; n + 1];
        for &(a, b, _, _) in &edges {
            offsets[a + 1] += 1;
            offsets[b + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut incident = vec![0usize; 2 * edges.len()];
        for (e, &(a, b, _, _)) in edges.iter().enumerate() {
            incident[fill[a]] = e;
            fill[a] += 1;
            incident[fill[b]] = e;
            fill[b] += 1;
        }
        Ok(Self {
            edges: edges.iter().map(|&(a, b, _, _)| Edge { a, b }).collect(),
            lengths: edges.iter().map(|e| e.2).collect(),
            weights: edges.iter().map(|e| e.3).collect(),
            masses,
            offsets,
            incident,
        })
    }

    pub fn from_quotient(qg: &QuotientGraph) -> Self {
        let edges = qg.edges.iter().map(|&(a, b)| (a as usize, b as usize, qg.edge_length, qg.edge_weight)).collect();
        Self::new(qg.node_mass_f64(), edges).expect("quotient edges are valid")
    }

    pub fn from_tree(tree: &TreeModel) -> Self {
        let masses = (0..tree.num_vertices()).map(|v| tree.vertex_mass_f64(v)).collect();
        let edges = tree.edges.iter().map(|&(a, b)| (a, b, tree.unit(), 1.0)).collect();
        Self::new(masses, edges).expect("tree edges are valid")
    }

    pub fn num_nodes(&self) -> usize {
        self.masses.len()
    }

    pub fn incident(&self, v: usize) -> &[usize] {
        &self.incident[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn other(&self, e: usize, v: usize) -> usize {
        let Edge { a, b } = self.edges[e];
        if a == v {
            b
        } else {
            a
        }
    }

    fn coefficient(&self, e: usize, p: f64) -> f64 {
        self.weights[e] * self.lengths[e].powf(1.0 - p)
    }

    /// Per-edge energy, the discrete energy measure of `f`.
    pub fn edge_energies(&self, f: &NodeFunction, p: f64) -> Vec<f64> {
        self.edges
            .iter()
            .enumerate()
            .map(|(e, &Edge { a, b })| self.coefficient(e, p) * (f.values[a] - f.values[b]).abs().powf(p))
            .collect()
    }

    pub fn p_energy(&self, f: &NodeFunction, p: f64) -> f64 {
        self.edge_energies(f, p).iter().sum()
    }

    /// Energy over the open ball of radius `radius` around the source of
    /// `dist` (graph distances in edge counts, uniform length `unit`),
    /// counting the covered fraction of each edge.
    pub fn ball_energy(&self, f: &NodeFunction, p: f64, dist: &[u32], unit: f64, radius: f64) -> f64 {
        let rr = radius / unit;
        self.edges
            .iter()
            .enumerate()
            .map(|(e, &Edge { a, b })| {
                let (da, db) = (dist[a], dist[b]);
                if da == u32::MAX && db == u32::MAX {
                    return 0.0;
                }
                let frac = edge_fraction(da as f64, db as f64, rr);
                if frac == 0.0 {
                    return 0.0;
                }
                frac * self.weights[e] * (f.values[a] - f.values[b]).abs().powf(p)
            })
            .sum::<f64>()
            * unit.powf(1.0 - p)
    }

    /// Hop distances from `source`.
    pub fn hops(&self, source: usize) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.num_nodes()];
        dist[source] = 0;
        let mut q = VecDeque::from([source]);
        while let Some(v) = q.pop_front() {
            for &e in self.incident(v) {
                let w = self.other(e, v);
                if dist[w] == u32::MAX {
                    dist[w] = dist[v] + 1;
                    q.push_back(w);
                }
            }
        }
        dist
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxiomCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Clarkson's inequality for the energy: `E(f+g) + E(f-g)` is at least
/// (p ≤ 2) or at most (p ≥ 2) `2 (E(f)^{1/(p-1)} + E(g)^{1/(p-1)})^{p-1}`.
pub fn clarkson_check(graph: &EnergyGraph, f: &NodeFunction, g: &NodeFunction, p: f64) -> AxiomCheck {
    let lhs = graph.p_energy(&f.combine(g, 1.0), p) + graph.p_energy(&f.combine(g, -1.0), p);
    let q = 1.0 / (p - 1.0);
    let rhs = 2.0 * (graph.p_energy(f, p).powf(q) + graph.p_energy(g, p).powf(q)).powf(p - 1.0);
    let slack = 1e-9 * lhs.abs().max(rhs.abs());
    let lower = lhs >= rhs - slack;
    let upper = lhs <= rhs + slack;
    let holds = if p < 2.0 {
        lower
    } else if p > 2.0 {
        upper
    } else {
        lower && upper
    };
    AxiomCheck { lhs, rhs, holds }
}

/// `E(f ∨ g) + E(f ∧ g) ≤ E(f) + E(g)`.
pub fn subadditivity_check(graph: &EnergyGraph, f: &NodeFunction, g: &NodeFunction, p: f64) -> AxiomCheck {
    let lhs = graph.p_energy(&f.max(g), p) + graph.p_energy(&f.min(g), p);
    let rhs = graph.p_energy(f, p) + graph.p_energy(g, p);
    AxiomCheck { lhs, rhs, holds: lhs <= rhs * (1.0 + 1e-9) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapacityProblem {
    pub source: Vec<usize>,
    pub sink: Vec<usize>,
    pub p: f64,
    /// Target relative gap between the value and its lower bound.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl CapacityProblem {
    pub fn new(source: Vec<usize>, sink: Vec<usize>, p: f64) -> Self {
        Self { source, sink, p, tolerance: 1e-10, max_iterations: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    /// Energy of the returned feasible minimizer.
    pub value: f64,
    /// Convexity bound `E(f) - Σ_i |∂_i E(f)| max(f_i, 1 - f_i)`.
    pub lower_bound: f64,
    pub iterations: usize,
    /// `(value - lower_bound) / value`.
    pub residual: f64,
    #[serde(skip)]
    pub minimizer: Vec<f64>,
    /// Energies of each clipped iterate next to its unclipped step.
    #[serde(skip)]
    pub clip_trace: Vec<(f64, f64)>,
}

struct Reduced {
    free: Vec<usize>,
    index: Vec<usize>,
    edges: Vec<(usize, usize, f64)>,
}

const PINNED: usize = usize::MAX;

/// Minimizes the p-energy over `f` with `f = 1` on the source and `f = 0` on
/// the sink by damped Newton steps on `Σ c_e (|Δf|^2 + ε)^{p/2}`, annealing
/// `ε` from `1e-3` to `1e-14`, with Jacobi-preconditioned conjugate
/// gradients for the linear systems.
pub fn solve_capacity(graph: &EnergyGraph, prob: &CapacityProblem, warm: Option<&NodeFunction>) -> Result<CapacityResult> {
    let n = graph.num_nodes();
    let p = prob.p;
    if !(p > 1.0) {
        return Err(Error::Invalid(format!("exponent {p} must exceed 1")));
    }
    if prob.source.is_empty() || prob.sink.is_empty() {
        return Err(Error::Invalid("source and sink must be nonempty".into()));
    }
    let mut f = vec![0.0; n];
    let mut role = vec![0u8; n];
    for &v in &prob.sink {
        role[v] = 2;
    }
    for &v in &prob.source {
        if role[v] == 2 {
            return Err(Error::Invalid(format!("node {v} is in both source and sink")));
        }
        role[v] = 1;
        f[v] = 1.0;
    }
    let reach = graph.hops(prob.source[0]);
    if prob.sink.iter().all(|&v| reach[v] == u32::MAX) {
        return Err(Error::Disconnected(prob.source[0], prob.sink[0]));
    }
    let red = reduce(graph, &role, p);
    if let Some(w) = warm {
        for &v in &red.free {
            f[v] = w.values[v].clamp(0.0, 1.0);
        }
    }
    let energy = |f: &[f64]| -> f64 { red.edges.iter().map(|&(a, b, c)| c * (f[a] - f[b]).abs().powf(p)).sum() };
    let smooth = |f: &[f64], eps: f64| -> f64 {
        red.edges.iter().map(|&(a, b, c)| c * ((f[a] - f[b]).powi(2) + eps).powf(p / 2.0)).sum()
    };
    let m = red.free.len();
    let mut iterations = 0;
    let mut clip_trace = Vec::new();
    let mut best = certify(&red, &f, p, energy(&f));
    if m == 0 || best.1 <= prob.tolerance {
        return Ok(finish(best, f, iterations, clip_trace));
    }
    let mut eps = 1e-3;
    loop {
        for _ in 0..60 {
            iterations += 1;
            if iterations > prob.max_iterations {
                return Err(Error::NoConvergence { iterations, best: best.0, residual: best.1 });
            }
            let mut grad = vec![0.0; m];
            let mut diag = vec![0.0; m];
            let mut hess: Vec<(usize, usize, f64)> = Vec::with_capacity(red.edges.len());
            for &(a, b, c) in &red.edges {
                let d = f[a] - f[b];
                let s = d * d + eps;
                let g1 = c * p * s.powf(p / 2.0 - 1.0) * d;
                let h = c * p * s.powf(p / 2.0 - 1.0) * (1.0 + (p - 2.0) * d * d / s);
                let (ia, ib) = (red.index[a], red.index[b]);
                if ia != PINNED {
                    grad[ia] += g1;
                    diag[ia] += h;
                }
                if ib != PINNED {
                    grad[ib] -= g1;
                    diag[ib] += h;
                }
                hess.push((ia, ib, h));
            }
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm < 1e-15 {
                break;
            }
            let step = pcg(&hess, &diag, &grad, 1e-12, 20 * m + 100);
            let e0 = smooth(&f, eps);
            let mut t = 1.0;
            let mut accepted = false;
            let slope: f64 = grad.iter().zip(&step).map(|(g, s)| g * s).sum();
            while t > 1e-12 {
                let mut trial = f.clone();
                for (i, &v) in red.free.iter().enumerate() {
                    trial[v] = f[v] - t * step[i];
                }
                let raw = energy(&trial);
                for &v in &red.free {
                    trial[v] = trial[v].clamp(0.0, 1.0);
                }
                let e1 = smooth(&trial, eps);
                if e1 <= e0 - 1e-4 * t * slope.max(0.0) || e1 < e0 {
                    clip_trace.push((energy(&trial), raw));
                    f = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            let cur = certify(&red, &f, p, energy(&f));
            if cur.0 <= best.0 || cur.1 < best.1 {
                best = cur;
            }
            if !accepted || (e0 - smooth(&f, eps)).abs() <= 1e-14 * e0.max(1e-300) {
                break;
            }
        }
        if eps <= 1e-14 {
            break;
        }
        eps = (eps * 1e-2).max(1e-14);
    }
    let cur = certify(&red, &f, p, energy(&f));
    if cur.1 > prob.tolerance {
        return Err(Error::NoConvergence { iterations, best: cur.0, residual: cur.1 });
    }
    Ok(finish(cur, f, iterations, clip_trace))
}

fn reduce(graph: &EnergyGraph, role: &[u8], p: f64) -> Reduced {
    let n = graph.num_nodes();
    let mut index = vec![PINNED; n];
    let mut free = Vec::new();
    for v in 0..n {
        if role[v] == 0 {
            index[v] = free.len();
            free.push(v);
        }
    }
    let edges = graph
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| role[e.a] == 0 || role[e.b] == 0 || role[e.a] != role[e.b])
        .map(|(i, e)| (e.a, e.b, graph.coefficient(i, p)))
        .collect();
    Reduced { free, index, edges }
}

/// `(E(f), relative gap)` for the convexity lower bound over `[0, 1]`-valued competitors.
fn certify(red: &Reduced, f: &[f64], p: f64, value: f64) -> (f64, f64, f64) {
    let mut grad = vec![0.0; red.free.len()];
    for &(a, b, c) in &red.edges {
        let d = f[a] - f[b];
        let g = c * p * d.abs().powf(p - 1.0) * d.signum();
        if red.index[a] != PINNED {
            grad[red.index[a]] += g;
        }
        if red.index[b] != PINNED {
            grad[red.index[b]] -= g;
        }
    }
    let slack: f64 = red.free.iter().zip(&grad).map(|(&v, g)| g.abs() * f[v].max(1.0 - f[v])).sum();
    let lower = (value - slack).max(0.0);
    let gap = if value > 0.0 { (value - lower) / value } else { 0.0 };
    (value, gap, lower)
}

fn finish(c: (f64, f64, f64), f: Vec<f64>, iterations: usize, clip_trace: Vec<(f64, f64)>) -> CapacityResult {
    CapacityResult { value: c.0, lower_bound: c.2, iterations, residual: c.1, minimizer: f, clip_trace }
}

fn pcg(hess: &[(usize, usize, f64)], diag: &[f64], rhs: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
    let m = rhs.len();
    let apply = |x: &[f64], y: &mut [f64]| {
        y.iter_mut().for_each(|v| *v = 0.0);
        for &(a, b, h) in hess {
            let xa = if a != PINNED { x[a] } else { 0.0 };
            let xb = if b != PINNED { x[b] } else { 0.0 };
            if a != PINNED {
                y[a] += h * (xa - xb);
            }
            if b != PINNED {
                y[b] += h * (xb - xa);
            }
        }
    };
    let precond = |r: &[f64]| -> Vec<f64> { r.iter().zip(diag).map(|(r, d)| if *d > 0.0 { r / d } else { *r }).collect() };
    let mut x = vec![0.0; m];
    let mut r = rhs.to_vec();
    let mut z = precond(&r);
    let mut d = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let r0 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut q = vec![0.0; m];
    for _ in 0..max_iter {
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= tol * r0 {
            break;
        }
        apply(&d, &mut q);
        let dq: f64 = d.iter().zip(&q).map(|(a, b)| a * b).sum();
        if dq <= 0.0 {
            break;
        }
        let alpha = rz / dq;
        for i in 0..m {
            x[i] += alpha * d[i];
            r[i] -= alpha * q[i];
        }
        z = precond(&r);
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..m {
            d[i] = z[i] + beta * d[i];
        }
    }
    x
}

/// Lifted cutoff for the ball `B(x, r)` together with its consistency audit.
#[derive(Clone, Debug, PartialEq)]
pub struct LaaksoCutoff {
    pub function: NodeFunction,
    /// Number of `(copy, vertex)` pairs whose value differed from their node's.
    pub inconsistent_pairs: usize,
    /// Largest distance (units) from `x` to a node where the cutoff is positive.
    pub support_radius: u64,
    /// The support reaches past the window, so the complement of `256B` is empty.
    pub truncated: bool,
}

/// `φ(v, s) = φ_T(s)` when `v` lies in some `B_U(u^{(k)}, 64r)`, where the
/// centers come from the covering dichotomy of `B(x, 8r)`, and 0 otherwise.
pub fn laakso_cutoff(model: &LaaksoModel, qg: &QuotientGraph, x: &LaaksoPoint, r: f64) -> Result<LaaksoCutoff> {
    let phi_t = model.tree.ball_cutoff(x.t, r)?;
    let centers: Vec<_> = model.preimage_cover(x, 8.0 * r)?.into_iter().map(|b| b.u).collect();
    let unit = model.unit();
    let nv = model.tree.num_vertices();
    let inside: Vec<bool> = (0..model.num_copies)
        .map(|c| {
            let u = model.copy_coord(c);
            centers.iter().any(|k| (model.ultra_distance(k, &u) as f64) * unit < 64.0 * r)
        })
        .collect();
    let mut values = vec![f64::NAN; qg.num_nodes()];
    let mut inconsistent_pairs = 0;
    for c in 0..model.num_copies {
        for t in 0..nv {
            let v = if inside[c] { phi_t.values[t] } else { 0.0 };
            let node = qg.node(c, t);
            if values[node].is_nan() {
                values[node] = v;
            } else if values[node] != v {
                inconsistent_pairs += 1;
            }
        }
    }
    let dist = qg.bfs(qg.node_of(model, x), u32::MAX);
    let support_radius =
        values.iter().zip(&dist).filter(|(v, _)| **v > 0.0).map(|(_, &d)| d as u64).max().unwrap_or(0);
    let truncated = dist.iter().all(|&d| (d as f64) * unit < 256.0 * r);
    Ok(LaaksoCutoff { function: NodeFunction { values }, inconsistent_pairs, support_radius, truncated })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InequalityName {
    V,
    Pi,
    CapLe,
    Cs,
    Clarkson,
    Subadd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityRecord {
    pub name: InequalityName,
    pub scale: f64,
    pub measured: f64,
    /// `None` when only finiteness is required.
    pub threshold: Option<f64>,
    pub witnesses: Vec<String>,
    pub pass: bool,
}

/// `r^{p-1} V_b(r)`, the walk-scale function on the quotient.
pub fn psi_scale(model: &LaaksoModel, r: f64, p: f64) -> Result<f64> {
    Ok(r.powf(p - 1.0) * rational_to_f64(model.tree.volume.at_radius(r)?))
}

/// Mass-weighted `Σ_B m |f - f_B|^p` over the open ball of radius `r`.
pub fn ball_deviation(graph: &EnergyGraph, dist: &[u32], unit: f64, r: f64, f: &NodeFunction, p: f64) -> Result<f64> {
    let rr = r / unit;
    let ball: Vec<usize> = (0..graph.num_nodes()).filter(|&v| dist[v] != u32::MAX && (dist[v] as f64) < rr).collect();
    let mass: f64 = ball.iter().map(|&v| graph.masses[v]).sum();
    if mass == 0.0 {
        return Err(Error::Invalid(format!("ball of radius {r} carries no mass")));
    }
    let mean = ball.iter().map(|&v| graph.masses[v] * f.values[v]).sum::<f64>() / mass;
    Ok(ball.iter().map(|&v| graph.masses[v] * (f.values[v] - mean).abs().powf(p)).sum())
}

/// Poincaré ratio `Σ_B m|f - f_B|^p / (Ψ(r) E_{λB}(f))` with `Ψ(r) = r^{p-1}V_b(r)`.
pub fn pi_ratio(
    model: &LaaksoModel,
    graph: &EnergyGraph,
    dist: &[u32],
    r: f64,
    f: &NodeFunction,
    p: f64,
    dilation: f64,
) -> Result<f64> {
    let unit = model.unit();
    let lhs = ball_deviation(graph, dist, unit, r, f, p)?;
    if lhs == 0.0 {
        return Ok(0.0);
    }
    let energy = graph.ball_energy(f, p, dist, unit, dilation * r);
    if energy == 0.0 {
        return Err(Error::Invalid(format!("nonconstant function with zero energy on ball of radius {r}")));
    }
    Ok(lhs / (psi_scale(model, r, p)? * energy))
}

/// Upper bound for the PI ratio of the non-atomic space, for `f` extended
/// affinely along each `m`-cell star and constant below it.
///
/// Every point of an `m`-cell copy lies within 3 units of its center. The
/// numerator is `min_c Σ_K m(K) max_{v ∈ K} |f(v) - c|^p` over cell copies
/// `K` that can meet `B(x, r)`; the denominator uses the energy of the cell
/// copies surely contained in `B(x, dilation·r)`. Both bounds tighten when
/// the window is refined.
pub fn certified_pi_ratio(
    model: &LaaksoModel,
    qg: &QuotientGraph,
    dist: &[u32],
    r: f64,
    f: &NodeFunction,
    p: f64,
    dilation: f64,
) -> Result<f64> {
    let tree = &model.tree;
    let rr = r / model.unit();
    let outer = dilation * rr;
    let mut spans = Vec::new();
    let mut energy = 0.0;
    for c in 0..model.num_copies {
        for &cell in tree.cells_at(model.m)? {
            let k = &tree.cells[cell];
            let center = qg.node(c, k.center);
            let d = dist[center];
            if d == u32::MAX {
                continue;
            }
            let d = d as f64;
            let fc = f.values[center];
            if d - 3.0 < rr {
                let (mut lo, mut hi) = (fc, fc);
                for &b in &k.boundary {
                    let v = f.values[qg.node(c, b)];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                spans.push((lo, hi));
            }
            if d + 3.0 < outer {
                for &b in &k.boundary {
                    energy += (fc - f.values[qg.node(c, b)]).abs().powf(p);
                }
            }
        }
    }
    let energy = energy * qg.edge_weight * model.unit().powf(1.0 - p);
    let mass = rational_to_f64(&qg.mass_unit);
    let upper = |c: f64| -> f64 { spans.iter().map(|&(lo, hi)| (hi - c).max(c - lo).powf(p)).sum::<f64>() * mass };
    let lo = spans.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let hi = spans.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    if spans.is_empty() || hi == lo {
        return Ok(0.0);
    }
    let (mut a, mut b) = (lo, hi);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..90 {
        let (x1, x2) = (b - phi * (b - a), a + phi * (b - a));
        if upper(x1) <= upper(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let numerator = upper(0.5 * (a + b));
    if energy == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(numerator / (psi_scale(model, r, p)? * energy))
}

pub fn pi_evaluate(
    model: &LaaksoModel,
    graph: &EnergyGraph,
    center: usize,
    r: f64,
    f: &NodeFunction,
    p: f64,
    threshold: Option<f64>,
) -> Result<InequalityRecord> {
    let dist = graph.hops(center);
    let ratio = pi_ratio(model, graph, &dist, r, f, p, 4.0)?;
    Ok(InequalityRecord {
        name: InequalityName::Pi,
        scale: r,
        measured: ratio,
        threshold,
        witnesses: vec![format!("center={center}")],
        pass: ratio.is_finite() && threshold.map_or(true, |t| ratio <= t),
    })
}

/// Smallest `(C_2, C_3)` in the sense of `C_2 + C_3` with
/// `∫|f|^p|∇φ|^p ≤ C_2 ∫|∇f|^p + C_3 Ψ(r)^{-1} ∫|f|^p dm` over the region
/// `B(center, factor·r)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsInstance {
    pub lhs: f64,
    pub energy: f64,
    pub mass_term: f64,
    pub c2: f64,
    pub c3: f64,
}

pub fn cs_instance(
    model: &LaaksoModel,
    graph: &EnergyGraph,
    dist: &[u32],
    r: f64,
    f: &NodeFunction,
    phi: &NodeFunction,
    p: f64,
    factor: f64,
) -> Result<CsInstance> {
    let unit = model.unit();
    let rr = factor * r / unit;
    let lhs: f64 = graph
        .edges
        .iter()
        .enumerate()
        .map(|(e, &Edge { a, b })| {
            let frac = edge_fraction(dist[a] as f64, dist[b] as f64, rr);
            let fp = 0.5 * (f.values[a].abs().powf(p) + f.values[b].abs().powf(p));
            frac * graph.coefficient(e, p) * fp * (phi.values[a] - phi.values[b]).abs().powf(p)
        })
        .sum();
    let energy = graph.ball_energy(f, p, dist, unit, factor * r);
    let mass: f64 = (0..graph.num_nodes())
        .filter(|&v| (dist[v] as f64) < rr)
        .map(|v| graph.masses[v] * f.values[v].abs().powf(p))
        .sum();
    let mass_term = mass / psi_scale(model, r, p)?;
    let (mut c2, mut c3) = (0.0, 0.0);
    if lhs > 0.0 {
        if energy == 0.0 && mass_term == 0.0 {
            return Err(Error::Invalid("cutoff-Sobolev instance with vanishing right side".into()));
        }
        if energy >= mass_term {
            c2 = lhs / energy;
        } else {
            c3 = lhs / mass_term;
        }
    }
    Ok(CsInstance { lhs, energy, mass_term, c2, c3 })
}

pub fn cs_evaluate(instances: &[CsInstance], r: f64, threshold: Option<f64>) -> InequalityRecord {
    let c2 = instances.iter().map(|i| i.c2).fold(0.0, f64::max);
    let c3 = instances.iter().map(|i| i.c3).fold(0.0, f64::max);
    InequalityRecord {
        name: InequalityName::Cs,
        scale: r,
        measured: c2.max(c3),
        threshold,
        witnesses: vec![format!("C2={c2:.12e}"), format!("C3={c3:.12e}")],
        pass: c2.is_finite() && c3.is_finite() && threshold.map_or(true, |t| c2.max(c3) <= t),
    }
}

/// Capacity of `B(x, r)` against the complement of `B(x, ρ)` where `ρ` is
/// the smaller of `factor·r` and one unit past the cutoff support, compared
/// with the energy of the lifted cutoff.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityComparison {
    pub capacity: CapacityResult,
    pub cutoff_energy: f64,
    pub ball_mass: f64,
    /// `cap · Ψ(r) / m(B)`.
    pub normalized: f64,
    pub effective_factor: f64,
    pub truncated: bool,
    pub consistent: bool,
}

pub fn capacity_vs_cutoff(
    model: &LaaksoModel,
    qg: &QuotientGraph,
    graph: &EnergyGraph,
    x: &LaaksoPoint,
    r: f64,
    p: f64,
    factor: f64,
) -> Result<CapacityComparison> {
    let cut = laakso_cutoff(model, qg, x, r)?;
    let unit = model.unit();
    let center = qg.node_of(model, x);
    let dist = graph.hops(center);
    let outer = (factor * r / unit).min((cut.support_radius + 1) as f64);
    if (cut.support_radius as f64) * unit >= factor * r {
        return Err(Error::Invalid(format!("cutoff support {} exceeds {factor}r", cut.support_radius)));
    }
    let source: Vec<usize> = (0..graph.num_nodes()).filter(|&v| (dist[v] as f64) * unit < r).collect();
    let sink: Vec<usize> = (0..graph.num_nodes()).filter(|&v| dist[v] as f64 >= outer).collect();
    let capacity = if sink.is_empty() {
        // The constant 1 is admissible against an empty complement.
        CapacityResult { value: 0.0, lower_bound: 0.0, iterations: 0, residual: 0.0, minimizer: vec![1.0; graph.num_nodes()], clip_trace: Vec::new() }
    } else {
        solve_capacity(graph, &CapacityProblem::new(source.clone(), sink, p), Some(&cut.function))?
    };
    let cutoff_energy = graph.p_energy(&cut.function, p);
    let ball_mass: f64 = source.iter().map(|&v| graph.masses[v]).sum();
    let normalized = capacity.value * psi_scale(model, r, p)? / ball_mass;
    Ok(CapacityComparison {
        capacity,
        cutoff_energy,
        ball_mass,
        normalized,
        effective_factor: outer * unit / r,
        truncated: cut.truncated || outer * unit < factor * r,
        consistent: cut.inconsistent_pairs == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laakso::{UltraCoord, DEFAULT_PAIR_BUDGET};
    use crate::scaling::{BranchingProfile, DigitRole};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path(lengths: &[f64]) -> EnergyGraph {
        let edges = lengths.iter().enumerate().map(|(i, &l)| (i, i + 1, l, 1.0)).collect();
        EnergyGraph::new(vec![1.0; lengths.len() + 1], edges).unwrap()
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> NodeFunction {
        NodeFunction { values: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() }
    }

    #[test]
    fn series_path_capacity() {
        for p in [1.5, 2.0, 3.0] {
            let g = path(&[0.5, 1.0, 0.25, 2.0, 0.75]);
            let res = solve_capacity(&g, &CapacityProblem::new(vec![0], vec![5], p), None).unwrap();
            let l: f64 = 4.5;
            assert_relative_eq!(res.value, l.powf(1.0 - p), max_relative = 1e-8);
            assert!(res.lower_bound <= res.value);
        }
    }

    #[test]
    fn parallel_paths_add() {
        // Two routes of lengths 2 and 3 between nodes 0 and 1.
        let edges = vec![(0, 2, 1.0, 1.0), (2, 1, 1.0, 1.0), (0, 3, 1.0, 1.0), (3, 4, 1.0, 1.0), (4, 1, 1.0, 1.0)];
        let g = EnergyGraph::new(vec![1.0; 5], edges).unwrap();
        for p in [1.5, 2.0, 3.0] {
            let res = solve_capacity(&g, &CapacityProblem::new(vec![0], vec![1], p), None).unwrap();
            let expect = 2f64.powf(1.0 - p) + 3f64.powf(1.0 - p);
            assert_relative_eq!(res.value, expect, max_relative = 1e-8);
        }
    }

    #[test]
    fn single_edge_with_dangling_part() {
        let edges = vec![(0, 1, 0.5, 1.0), (1, 2, 1.0, 1.0), (2, 3, 1.0, 1.0), (0, 4, 1.0, 1.0)];
        let g = EnergyGraph::new(vec![1.0; 5], edges).unwrap();
        let res = solve_capacity(&g, &CapacityProblem::new(vec![0, 4], vec![1], 2.5), None).unwrap();
        assert_relative_eq!(res.value, 0.5f64.powf(-1.5), max_relative = 1e-8);
    }

    #[test]
    fn clipping_never_raises_energy() {
        let edges = vec![(0, 1, 1.0, 1.0), (1, 2, 1.0, 1.0), (2, 3, 1.0, 1.0), (1, 3, 2.0, 1.0), (3, 4, 0.5, 1.0)];
        let g = EnergyGraph::new(vec![1.0; 5], edges).unwrap();
        let warm = NodeFunction { values: vec![1.0, 3.0, -2.0, 0.7, 0.0] };
        let res = solve_capacity(&g, &CapacityProblem::new(vec![0], vec![4], 1.7), Some(&warm)).unwrap();
        assert!(!res.clip_trace.is_empty());
        for &(clipped, raw) in &res.clip_trace {
            assert!(clipped <= raw * (1.0 + 1e-12));
        }
    }

    #[test]
    fn capacity_monotone_in_sets() {
        let edges: Vec<_> = (0..9).map(|i| (i, i + 1, 1.0, 1.0)).chain([(0, 5, 3.0, 1.0)]).collect();
        let g = EnergyGraph::new(vec![1.0; 10], edges).unwrap();
        let cap = |a: Vec<usize>, b: Vec<usize>| solve_capacity(&g, &CapacityProblem::new(a, b, 2.0), None).unwrap().value;
        assert!(cap(vec![0], vec![9]) <= cap(vec![0, 1], vec![9]) + 1e-12);
        assert!(cap(vec![0], vec![9]) <= cap(vec![0], vec![8, 9]) + 1e-12);
    }

    #[test]
    fn disjoint_source_and_sink_required() {
        let g = path(&[1.0, 1.0]);
        assert!(solve_capacity(&g, &CapacityProblem::new(vec![0], vec![0], 2.0), None).is_err());
        let iso = EnergyGraph::new(vec![1.0; 3], vec![(0, 1, 1.0, 1.0)]).unwrap();
        assert!(matches!(
            solve_capacity(&iso, &CapacityProblem::new(vec![0], vec![2], 2.0), None),
            Err(Error::Disconnected(..))
        ));
    }

    #[test]
    fn energy_axioms_on_random_pairs() {
        let edges: Vec<_> = (0..30).map(|i| (i, (i * 7 + 3) % 31, 0.5 + (i % 3) as f64, 1.0 + (i % 2) as f64)).filter(|e| e.0 != e.1).collect();
        let g = EnergyGraph::new(vec![1.0; 31], edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in [1.5, 2.0, 3.0] {
            for _ in 0..50 {
                let (f, h) = (random(31, &mut rng), random(31, &mut rng));
                assert!(clarkson_check(&g, &f, &h, p).holds, "p={p}");
                assert!(subadditivity_check(&g, &f, &h, p).holds);
            }
            let f = random(31, &mut rng);
            let zero = NodeFunction::constant(31, 0.0);
            let c = clarkson_check(&g, &f, &zero, p);
            assert_relative_eq!(c.lhs, 2.0 * g.p_energy(&f, p), max_relative = 1e-12);
            assert!(c.holds);
        }
    }

    fn model(g: Vec<u64>, b: Vec<u64>, m: i32, n: i32) -> LaaksoModel {
        let lo = m.min(0);
        let hi = n.max(1);
        let pad = |v: Vec<u64>, fill: u64| {
            let mut out = vec![fill; (hi - lo + 1) as usize];
            for (i, d) in v.into_iter().enumerate() {
                out[(m - lo) as usize + i] = d;
            }
            out
        };
        let g = BranchingProfile::new(lo, hi, pad(g, 1), DigitRole::Gluing).unwrap();
        let b = BranchingProfile::new(lo, hi, pad(b, 2), DigitRole::Branching).unwrap();
        LaaksoModel::build(&g, &b, m, n, DEFAULT_PAIR_BUDGET).unwrap()
    }

    #[test]
    fn single_copy_energy_is_tree_energy() {
        let lm = model(vec![1, 1, 1, 1], vec![2, 3, 2, 2], 0, 3);
        let qg = QuotientGraph::build(&lm).unwrap();
        let g = EnergyGraph::from_quotient(&qg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random(g.num_nodes(), &mut rng);
        let tf = crate::tree::TreeFunction { values: f.values.clone() };
        assert_relative_eq!(g.p_energy(&f, 2.5), lm.tree.p_energy(&tf, 2.5), max_relative = 1e-12);
        for c in 0..lm.tree.num_vertices() {
            let dist = g.hops(c);
            let ours = pi_ratio(&lm, &g, &dist, 2.0, &f, 2.0, 4.0).unwrap();
            let tree = lm.tree.pi_ratio(&tf, 2.0, c, 2.0, 4.0).unwrap();
            assert_relative_eq!(ours, tree, max_relative = 1e-12);
        }
    }

    #[test]
    fn energy_decomposes_over_copies() {
        let lm = model(vec![2, 1, 3], vec![2, 3, 2], 0, 2);
        let qg = QuotientGraph::build(&lm).unwrap();
        let g = EnergyGraph::from_quotient(&qg);
        let f = random(g.num_nodes(), &mut ChaCha8Rng::seed_from_u64(3));
        let tree_sum: f64 = (0..lm.num_copies)
            .map(|c| {
                let tf = crate::tree::TreeFunction {
                    values: (0..lm.tree.num_vertices()).map(|t| f.values[qg.node(c, t)]).collect(),
                };
                lm.tree.p_energy(&tf, 1.5)
            })
            .sum();
        assert_relative_eq!(g.p_energy(&f, 1.5), qg.edge_weight * tree_sum, max_relative = 1e-12);
        assert_eq!(g.p_energy(&NodeFunction::constant(g.num_nodes(), 0.3), 1.5), 0.0);
    }

    #[test]
    fn cutoff_is_well_defined_and_feasible() {
        let lm = model(vec![2, 2, 1, 2, 1], vec![2, 2, 3, 2, 2], 0, 4);
        let qg = QuotientGraph::build(&lm).unwrap();
        let g = EnergyGraph::from_quotient(&qg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..6 {
            let x = lm.random_point(&mut rng);
            let cut = laakso_cutoff(&lm, &qg, &x, 1.0).unwrap();
            assert_eq!(cut.inconsistent_pairs, 0);
            let dist = g.hops(qg.node_of(&lm, &x));
            for v in 0..g.num_nodes() {
                if (dist[v] as f64) < 1.0 / lm.unit() {
                    assert_eq!(cut.function.values[v], 1.0);
                }
            }
            let cmp = capacity_vs_cutoff(&lm, &qg, &g, &x, 1.0, 2.0, 256.0).unwrap();
            assert!(cmp.capacity.value <= cmp.cutoff_energy);
            assert!(cmp.normalized.is_finite() && cmp.normalized >= 0.0);
            assert!(cmp.effective_factor <= 256.0);
        }
    }

    #[test]
    fn single_copy_cutoff_is_tree_cutoff() {
        let lm = model(vec![1, 1, 1, 1], vec![2, 3, 2, 2], 0, 3);
        let qg = QuotientGraph::build(&lm).unwrap();
        let x = LaaksoPoint { u: UltraCoord { digits: vec![0; 4] }, t: 5 };
        let cut = laakso_cutoff(&lm, &qg, &x, 1.0).unwrap();
        assert_eq!(cut.function.values, lm.tree.ball_cutoff(5, 1.0).unwrap().values);
    }

    #[test]
    fn cs_trivial_cases() {
        let lm = model(vec![2, 1, 2], vec![2, 2, 2], 0, 2);
        let qg = QuotientGraph::build(&lm).unwrap();
        let g = EnergyGraph::from_quotient(&qg);
        let x = lm.random_point(&mut ChaCha8Rng::seed_from_u64(5));
        let cut = laakso_cutoff(&lm, &qg, &x, 1.0).unwrap();
        let dist = g.hops(qg.node_of(&lm, &x));
        let off: NodeFunction = NodeFunction { values: cut.function.values.iter().map(|&v| if v == 1.0 { 1.0 } else { 0.0 }).collect() };
        let flat = NodeFunction { values: off.values.iter().zip(&cut.function.values).map(|(_, &c)| if c == 0.0 { 1.0 } else { 0.0 }).collect() };
        let inst = cs_instance(&lm, &g, &dist, 1.0, &flat, &cut.function, 2.0, 256.0).unwrap();
        assert!(inst.lhs >= 0.0);
        let one = NodeFunction::constant(g.num_nodes(), 1.0);
        let inst = cs_instance(&lm, &g, &dist, 1.0, &one, &cut.function, 2.0, 256.0).unwrap();
        assert_relative_eq!(inst.lhs, g.p_energy(&cut.function, 2.0), max_relative = 1e-12);
        assert_eq!(inst.c2, 0.0);
    }
}
