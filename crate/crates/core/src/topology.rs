//! Time-varying network topology.
//!
//! A [`TopologySchedule`] is an ordered list of contiguous time segments, each
//! carrying an undirected 0/1 adjacency matrix. The module also hosts the
//! structural measures used for node grading (k-shell, betweenness), the
//! spectral quantities behind the epidemic threshold, the service utility of a
//! network after nodes are removed, and seeded small-world generators.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Retries allowed when a generated small-world graph comes out disconnected.
pub const CONNECTIVITY_RETRIES: usize = 100;

/// Undirected simple graph stored as sorted neighbour lists.
///
/// Serializes as a dense matrix of 0/1 rows.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl fmt::Debug for Adjacency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Adjacency")
            .field("n", &self.len())
            .field("edges", &self.edge_count())
            .finish()
    }
}

impl Adjacency {
    /// Graph on `n` nodes without edges.
    pub fn empty(n: usize) -> Self {
        Self {
            neighbors: vec![Vec::new(); n],
        }
    }

    /// Builds a graph from an undirected edge list. Duplicate edges collapse.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = Self::empty(n);
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::domain(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::domain(format!("self-loop on node {a}")));
            }
            adj.add_edge(a, b);
        }
        Ok(adj)
    }

    /// Validates and converts a dense 0/1 matrix.
    pub fn from_dense(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let mut neighbors = vec![Vec::new(); n];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::domain(format!(
                    "adjacency row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 if i == j => {
                        return Err(Error::domain(format!("nonzero diagonal at node {i}")))
                    }
                    1 => neighbors[i].push(j),
                    other => {
                        return Err(Error::domain(format!(
                            "adjacency entry ({i}, {j}) is {other}, expected 0 or 1"
                        )))
                    }
                }
            }
        }
        for (i, row) in rows.iter().enumerate() {
            for j in 0..i {
                if row[j] != rows[j][i] {
                    return Err(Error::domain(format!(
                        "adjacency is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { neighbors })
    }

    /// Parses an edge list with one `i j` pair (0-based) per line.
    ///
    /// Blank lines and lines starting with `#` are skipped. The node count is
    /// the larger of `min_nodes` and one past the largest index seen.
    pub fn from_edge_list(text: &str, min_nodes: usize) -> Result<Self> {
        let mut edges = Vec::new();
        let mut n = min_nodes;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse = |s: Option<&str>| -> Result<usize> {
                s.ok_or_else(|| Error::Parse {
                    path: format!("line {}", lineno + 1),
                    message: "expected two node indices".into(),
                })?
                .parse::<usize>()
                .map_err(|e| Error::Parse {
                    path: format!("line {}", lineno + 1),
                    message: e.to_string(),
                })
            };
            let a = parse(parts.next())?;
            let b = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(Error::Parse {
                    path: format!("line {}", lineno + 1),
                    message: "trailing tokens after edge".into(),
                });
            }
            n = n.max(a + 1).max(b + 1);
            edges.push((a, b));
        }
        Self::from_edges(n, &edges)
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        let n = self.len();
        let mut rows = vec![vec![0u8; n]; n];
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                rows[i][j] = 1;
            }
        }
        rows
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (i, j) in self.edges() {
            out.push_str(&format!("{i} {j}\n"));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    fn add_edge(&mut self, a: usize, b: usize) {
        if let Err(pos) = self.neighbors[a].binary_search(&b) {
            self.neighbors[a].insert(pos, b);
        }
        if let Err(pos) = self.neighbors[b].binary_search(&a) {
            self.neighbors[b].insert(pos, a);
        }
    }

    fn remove_edge(&mut self, a: usize, b: usize) {
        if let Ok(pos) = self.neighbors[a].binary_search(&b) {
            self.neighbors[a].remove(pos);
        }
        if let Ok(pos) = self.neighbors[b].binary_search(&a) {
            self.neighbors[b].remove(pos);
        }
    }

    /// Sizes of connected components among the nodes where `keep` is true.
    fn component_sizes(&self, keep: &[bool]) -> Vec<usize> {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut sizes = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..n {
            if !keep[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let mut size = 0;
            while let Some(u) = queue.pop_front() {
                size += 1;
                for &v in &self.neighbors[u] {
                    if keep[v] && !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            sizes.push(size);
        }
        sizes
    }

    pub fn is_connected(&self) -> bool {
        self.len() <= 1 || self.component_sizes(&vec![true; self.len()]).len() == 1
    }

    /// Applies a node relabelling: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::empty(self.len());
        for (i, j) in self.edges() {
            out.add_edge(perm[i], perm[j]);
        }
        out
    }
}

impl TryFrom<Vec<Vec<u8>>> for Adjacency {
    type Error = Error;

    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self> {
        Self::from_dense(&rows)
    }
}

impl From<Adjacency> for Vec<Vec<u8>> {
    fn from(adj: Adjacency) -> Self {
        adj.to_dense()
    }
}

/// A network at one instant together with the per-node service utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub adjacency: Adjacency,
    /// Utility per unit time contributed by each node.
    pub service_weights: Vec<f64>,
}

impl GraphSnapshot {
    pub fn new(adjacency: Adjacency, service_weights: Vec<f64>) -> Result<Self> {
        if service_weights.len() != adjacency.len() {
            return Err(Error::domain(format!(
                "{} service weights for {} nodes",
                service_weights.len(),
                adjacency.len()
            )));
        }
        if let Some(w) = service_weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::domain(format!("invalid service weight {w}")));
        }
        Ok(Self {
            adjacency,
            service_weights,
        })
    }

    pub fn total_utility(&self) -> f64 {
        self.service_weights.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub adjacency: Adjacency,
}

#[derive(Deserialize)]
struct RawSchedule {
    n_nodes: usize,
    segments: Vec<Segment>,
}

/// Piecewise-constant topology over `[0, horizon_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule")]
pub struct TopologySchedule {
    n_nodes: usize,
    segments: Vec<Segment>,
}

impl TryFrom<RawSchedule> for TopologySchedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        Self::new(raw.n_nodes, raw.segments)
    }
}

impl TopologySchedule {
    pub fn new(n_nodes: usize, segments: Vec<Segment>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::domain("a schedule needs at least one node"));
        }
        if segments.is_empty() {
            return Err(Error::domain("a schedule needs at least one segment"));
        }
        if segments[0].t_start != 0.0 {
            return Err(Error::domain(format!(
                "first segment starts at {}, expected 0",
                segments[0].t_start
            )));
        }
        for (k, seg) in segments.iter().enumerate() {
            if !(seg.t_end > seg.t_start) || !seg.t_end.is_finite() {
                return Err(Error::domain(format!(
                    "segment {k} has non-positive length ({}, {})",
                    seg.t_start, seg.t_end
                )));
            }
            if seg.adjacency.len() != n_nodes {
                return Err(Error::domain(format!(
                    "segment {k} adjacency has {} nodes, expected {n_nodes}",
                    seg.adjacency.len()
                )));
            }
            if k > 0 && segments[k - 1].t_end != seg.t_start {
                return Err(Error::domain(format!(
                    "segments {} and {k} are not contiguous",
                    k - 1
                )));
            }
        }
        Ok(Self { n_nodes, segments })
    }

    /// Single segment covering `[0, horizon]`.
    pub fn constant(adjacency: Adjacency, horizon: f64) -> Result<Self> {
        let n = adjacency.len();
        Self::new(
            n,
            vec![Segment {
                t_start: 0.0,
                t_end: horizon,
                adjacency,
            }],
        )
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn horizon_end(&self) -> f64 {
        self.segments.last().map(|s| s.t_end).unwrap_or(0.0)
    }

    /// Index of the segment containing `t`. Boundary instants belong to the
    /// segment that starts there, except the horizon end which belongs to the
    /// last segment.
    pub fn segment_index_at(&self, t: f64) -> Result<usize> {
        let end = self.horizon_end();
        if !(0.0..=end).contains(&t) {
            return Err(Error::domain(format!("time {t} outside [0, {end}]")));
        }
        let idx = self.segments.partition_point(|s| s.t_start <= t);
        Ok(idx.saturating_sub(1).min(self.segments.len() - 1))
    }

    pub fn adjacency_at(&self, t: f64) -> Result<&Adjacency> {
        Ok(&self.segments[self.segment_index_at(t)?].adjacency)
    }

    /// Number of pairwise-distinct adjacency matrices.
    pub fn distinct_matrices(&self) -> usize {
        self.distinct_ids().into_iter().max().map_or(0, |m| m + 1)
    }

    /// For each segment, the index of the first segment with an equal matrix
    /// (renumbered densely from zero).
    pub fn distinct_ids(&self) -> Vec<usize> {
        let mut reps: Vec<usize> = Vec::new();
        let mut ids = Vec::with_capacity(self.segments.len());
        for (k, seg) in self.segments.iter().enumerate() {
            match reps
                .iter()
                .position(|&r| self.segments[r].adjacency == seg.adjacency)
            {
                Some(id) => ids.push(id),
                None => {
                    ids.push(reps.len());
                    reps.push(k);
                }
            }
        }
        ids
    }

    /// The segment intervals, in order.
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        self.segments.iter().map(|s| (s.t_start, s.t_end)).collect()
    }

    /// One segment of this schedule shifted to start at time zero.
    pub fn slot(&self, k: usize) -> Result<TopologySchedule> {
        let seg = self
            .segments
            .get(k)
            .ok_or_else(|| Error::domain(format!("slot {k} out of range")))?;
        Self::constant(seg.adjacency.clone(), seg.t_end - seg.t_start)
    }
}

/// k-core decomposition: each node's shell index is the largest `k` such that
/// it survives iterated removal of nodes with degree below `k`.
pub fn k_shell(adjacency: &Adjacency) -> Vec<usize> {
    let n = adjacency.len();
    let mut degree: Vec<usize> = (0..n).map(|i| adjacency.degree(i)).collect();
    let mut removed = vec![false; n];
    let mut shell = vec![0; n];
    let mut k = 0;
    for _ in 0..n {
        let (v, d) = (0..n)
            .filter(|&i| !removed[i])
            .map(|i| (i, degree[i]))
            .min_by_key(|&(i, d)| (d, i))
            .expect("an unremoved node remains");
        k = k.max(d);
        shell[v] = k;
        removed[v] = true;
        for &u in adjacency.neighbors(v) {
            if !removed[u] {
                degree[u] -= 1;
            }
        }
    }
    shell
}

/// Unnormalized shortest-path betweenness over unordered node pairs
/// (Brandes accumulation; endpoints excluded, disconnected pairs contribute 0).
pub fn betweenness(adjacency: &Adjacency) -> Vec<f64> {
    let n = adjacency.len();
    let mut score = vec![0.0; n];
    let mut stack = Vec::with_capacity(n);
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut sigma = vec![0.0f64; n];
    let mut dist = vec![-1i64; n];
    let mut delta = vec![0.0; n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        stack.clear();
        for p in preds.iter_mut() {
            p.clear();
        }
        sigma.fill(0.0);
        dist.fill(-1);
        delta.fill(0.0);
        sigma[s] = 1.0;
        dist[s] = 0;
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            stack.push(v);
            for &w in adjacency.neighbors(v) {
                if dist[w] < 0 {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        while let Some(w) = stack.pop() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                score[w] += delta[w];
            }
        }
    }
    // every unordered pair was counted from both endpoints
    score.iter_mut().for_each(|x| *x /= 2.0);
    score
}

/// Eigenvalues of a dense real matrix as `(re, im)` pairs.
///
/// Symmetric input takes the symmetric tridiagonal path; everything else goes
/// through a Hessenberg/real-Schur decomposition.
pub(crate) fn eigenvalues(matrix: DMatrix<f64>) -> Vec<(f64, f64)> {
    if matrix.nrows() == 0 {
        return Vec::new();
    }
    if matrix == matrix.transpose() {
        matrix
            .symmetric_eigenvalues()
            .iter()
            .map(|&x| (x, 0.0))
            .collect()
    } else {
        matrix
            .complex_eigenvalues()
            .iter()
            .map(|c| (c.re, c.im))
            .collect()
    }
}

fn dense_from_rows(matrix: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = matrix.len();
    if let Some((i, row)) = matrix.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(Error::domain(format!(
            "matrix is not square: row {i} has {} entries, expected {n}",
            row.len()
        )));
    }
    if matrix.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::domain("matrix has non-finite entries"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| matrix[i][j]))
}

/// `max |λ_i|` over the eigenvalues of a square real matrix.
pub fn spectral_radius(matrix: &[Vec<f64>]) -> Result<f64> {
    Ok(eigenvalues(dense_from_rows(matrix)?)
        .into_iter()
        .map(|(re, im)| re.hypot(im))
        .fold(0.0, f64::max))
}

/// Spectrum of `ΛA − M` restricted to the nodes where `keep` is true.
///
/// With strictly positive infection rates the matrix is similar to the
/// symmetric `Λ^{1/2} A Λ^{1/2} − M`, which is what gets decomposed.
pub(crate) fn threshold_spectrum(
    infection: &[f64],
    adjacency: &Adjacency,
    recovery: &[f64],
    keep: &[bool],
) -> Vec<(f64, f64)> {
    let idx: Vec<usize> = (0..adjacency.len()).filter(|&i| keep[i]).collect();
    let m = idx.len();
    let symmetric = idx.iter().all(|&i| infection[i] > 0.0);
    let mut mat = DMatrix::zeros(m, m);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            let mut v = if adjacency.has_edge(i, j) {
                if symmetric {
                    (infection[i] * infection[j]).sqrt()
                } else {
                    infection[i]
                }
            } else {
                0.0
            };
            if a == b {
                v -= recovery[i];
            }
            mat[(a, b)] = v;
        }
    }
    eigenvalues(mat)
}

fn check_rates(infection: &[f64], adjacency: &Adjacency, recovery: &[f64]) -> Result<()> {
    let n = adjacency.len();
    if infection.len() != n || recovery.len() != n {
        return Err(Error::domain(format!(
            "rate vectors of length {} and {} for {n} nodes",
            infection.len(),
            recovery.len()
        )));
    }
    if infection
        .iter()
        .chain(recovery)
        .any(|r| !r.is_finite() || *r < 0.0)
    {
        return Err(Error::domain("rates must be finite and non-negative"));
    }
    Ok(())
}

/// Real part of the rightmost eigenvalue of `ΛA − M`. Negative means the
/// compromise process dies out, positive means it spreads.
pub fn epidemic_threshold(
    infection_rates: &[f64],
    adjacency: &Adjacency,
    recovery_rates: &[f64],
) -> Result<f64> {
    check_rates(infection_rates, adjacency, recovery_rates)?;
    let keep = vec![true; adjacency.len()];
    Ok(
        threshold_spectrum(infection_rates, adjacency, recovery_rates, &keep)
            .into_iter()
            .map(|(re, _)| re)
            .fold(f64::NEG_INFINITY, f64::max),
    )
}

/// Spectral radius of `ΛA − M` over the kept nodes (0 when nothing is kept).
pub fn threshold_radius(
    infection_rates: &[f64],
    adjacency: &Adjacency,
    recovery_rates: &[f64],
    keep: &[bool],
) -> Result<f64> {
    check_rates(infection_rates, adjacency, recovery_rates)?;
    if keep.len() != adjacency.len() {
        return Err(Error::domain("keep mask has the wrong length"));
    }
    Ok(
        threshold_spectrum(infection_rates, adjacency, recovery_rates, keep)
            .into_iter()
            .map(|(re, im)| re.hypot(im))
            .fold(0.0, f64::max),
    )
}

/// How connectivity enters the utility of a modified network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityModel {
    /// Weight sum of the remaining nodes times the fraction of them that sits
    /// in the largest connected component.
    #[default]
    ComponentWeighted,
    /// Weight sum of the remaining nodes only.
    WeightSum,
}

/// Utility per unit time of the network once `removed` nodes are taken out.
pub fn network_utility(snapshot: &GraphSnapshot, removed: &[usize]) -> f64 {
    network_utility_with(snapshot, removed, UtilityModel::default())
}

pub fn network_utility_with(
    snapshot: &GraphSnapshot,
    removed: &[usize],
    model: UtilityModel,
) -> f64 {
    let n = snapshot.adjacency.len();
    let mut keep = vec![true; n];
    for &r in removed {
        if r < n {
            keep[r] = false;
        }
    }
    utility_of_kept(snapshot, &keep, model)
}

pub(crate) fn utility_of_kept(snapshot: &GraphSnapshot, keep: &[bool], model: UtilityModel) -> f64 {
    let remaining = keep.iter().filter(|&&k| k).count();
    if remaining == 0 {
        return 0.0;
    }
    let weight: f64 = snapshot
        .service_weights
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(w, _)| w)
        .sum();
    match model {
        UtilityModel::WeightSum => weight,
        UtilityModel::ComponentWeighted => {
            let largest = snapshot
                .adjacency
                .component_sizes(keep)
                .into_iter()
                .max()
                .unwrap_or(0);
            weight * largest as f64 / remaining as f64
        }
    }
}

/// Ring lattice with `mean_degree / 2` neighbours on each side, rewired with
/// probability `rewire_prob` per edge. Disconnected draws are rejected and
/// regenerated from the continuing random stream.
pub fn generate_small_world(
    n: usize,
    mean_degree: usize,
    rewire_prob: f64,
    seed: u64,
) -> Result<Adjacency> {
    if n < 3 {
        return Err(Error::domain(format!(
            "small-world graph needs n >= 3, got {n}"
        )));
    }
    if mean_degree % 2 != 0 || mean_degree == 0 || mean_degree >= n {
        return Err(Error::domain(format!(
            "mean degree must be even and in [2, n), got {mean_degree}"
        )));
    }
    if !(0.0..=1.0).contains(&rewire_prob) {
        return Err(Error::domain(format!(
            "rewire probability {rewire_prob} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..CONNECTIVITY_RETRIES {
        let g = rewired_lattice(n, mean_degree, rewire_prob, &mut rng);
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::Generation(format!(
        "no connected graph after {CONNECTIVITY_RETRIES} attempts (n={n}, k={mean_degree}, p={rewire_prob})"
    )))
}

fn rewired_lattice(n: usize, k: usize, p: f64, rng: &mut ChaCha8Rng) -> Adjacency {
    let mut g = Adjacency::empty(n);
    for u in 0..n {
        for j in 1..=k / 2 {
            g.add_edge(u, (u + j) % n);
        }
    }
    if p == 0.0 {
        return g;
    }
    for j in 1..=k / 2 {
        for u in 0..n {
            let v = (u + j) % n;
            if !g.has_edge(u, v) || !rng.gen_bool(p) {
                continue;
            }
            if g.degree(u) >= n - 1 {
                continue;
            }
            let w = loop {
                let w = rng.gen_range(0..n);
                if w != u && !g.has_edge(u, w) {
                    break w;
                }
            };
            g.remove_edge(u, v);
            g.add_edge(u, w);
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScheduleKind {
    /// One matrix for every segment.
    Static,
    /// `period` base matrices cycled over the segments.
    Periodic { period: usize },
    /// A fresh rewiring for every segment.
    General,
}

/// Small-world parameters used by [`generate_schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphModel {
    pub mean_degree: usize,
    pub rewire_prob: f64,
}

impl Default for GraphModel {
    fn default() -> Self {
        Self {
            mean_degree: 4,
            rewire_prob: 0.1,
        }
    }
}

/// Builds a schedule over the given contiguous intervals. Every matrix is a
/// connected small-world graph; seeds for the individual matrices are drawn
/// in order from a stream seeded with `seed`.
pub fn generate_schedule(
    kind: ScheduleKind,
    n: usize,
    intervals: &[(f64, f64)],
    model: GraphModel,
    seed: u64,
) -> Result<TopologySchedule> {
    if intervals.is_empty() {
        return Err(Error::domain("segment list is empty"));
    }
    let distinct = match kind {
        ScheduleKind::Static => 1,
        ScheduleKind::Periodic { period } if period == 0 => {
            return Err(Error::domain("periodic schedule needs period >= 1"))
        }
        ScheduleKind::Periodic { period } => period.min(intervals.len()),
        ScheduleKind::General => intervals.len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases = (0..distinct)
        .map(|_| {
            let s: u64 = rng.gen();
            generate_small_world(n, model.mean_degree, model.rewire_prob, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let segments = intervals
        .iter()
        .enumerate()
        .map(|(k, &(t_start, t_end))| Segment {
            t_start,
            t_end,
            adjacency: bases[k % distinct].clone(),
        })
        .collect();
    TopologySchedule::new(n, segments)
}
