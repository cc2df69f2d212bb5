//! Undirected network representation, random-graph generation, and the
//! neighborhood-exposure summary function.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Immutable undirected graph over units `0..n`. No self-loops, no parallel
/// edges. Neighbor lists are kept sorted so iteration order is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    n: usize,
    edges: Vec<(u32, u32)>,
    neighbor_lists: Vec<Vec<u32>>,
    degrees: Vec<u32>,
}

impl Network {
    /// Builds a network from an edge iterable. Pairs are normalized to
    /// `i < j`; self-loops and duplicates are rejected.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut normalized: Vec<(u32, u32)> = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::Input(format!("self-loop at unit {a}")));
            }
            if a as usize >= n || b as usize >= n {
                return Err(Error::Input(format!(
                    "edge ({a}, {b}) out of range for n={n}"
                )));
            }
            normalized.push((a.min(b), a.max(b)));
        }
        normalized.sort_unstable();
        if normalized.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("duplicate edge".into()));
        }
        let mut neighbor_lists = vec![Vec::new(); n];
        for &(i, j) in &normalized {
            neighbor_lists[i as usize].push(j);
            neighbor_lists[j as usize].push(i);
        }
        for list in &mut neighbor_lists {
            list.sort_unstable();
        }
        let degrees = neighbor_lists.iter().map(|l| l.len() as u32).collect();
        Ok(Network {
            n,
            edges: normalized,
            neighbor_lists,
            degrees,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn degree(&self, i: usize) -> u32 {
        self.degrees[i]
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbor_lists[i]
    }

    pub fn mean_degree(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        2.0 * self.edges.len() as f64 / self.n as f64
    }

    /// The symmetric GCN propagation operator with entries
    /// `1/sqrt(d_i d_j)` on edges and zero elsewhere.
    pub fn gcn_operator(&self) -> GcnOperator {
        let inv_sqrt_deg: Vec<f64> = self
            .degrees
            .iter()
            .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
            .collect();
        GcnOperator {
            neighbor_lists: self.neighbor_lists.clone(),
            inv_sqrt_deg,
        }
    }

    /// Writes the plain-text edge list: header `# n=<count>`, then one
    /// `i j` pair per line with `i < j`, LF line endings.
    pub fn write_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            write!(w, "# n={}\n", self.n)?;
            for &(i, j) in &self.edges {
                write!(w, "{i} {j}\n")?;
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }

    pub fn read_edge_list(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::io(path, "empty edge-list file"))?
            .map_err(|e| Error::io(path, e))?;
        let n: usize = header
            .strip_prefix("# n=")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::io(path, format!("bad header line {header:?}")))?;
        let mut edges = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse = |s: Option<&str>| -> Result<u32> {
                s.and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::io(path, format!("bad edge line {line:?}")))
            };
            let i = parse(parts.next())?;
            let j = parse(parts.next())?;
            edges.push((i, j));
        }
        Network::from_edges(n, edges)
    }

    /// Dense `n x n` symmetric adjacency; brute-force oracle helper for
    /// tests and small-graph checks.
    pub fn dense_adjacency(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n, self.n));
        for &(i, j) in &self.edges {
            a[(i as usize, j as usize)] = 1.0;
            a[(j as usize, i as usize)] = 1.0;
        }
        a
    }
}

/// Precomputed sparse application of the symmetric normalized adjacency
/// `D^{-1/2} A D^{-1/2}` (no self-loops). Rows of isolated units map to zero.
#[derive(Debug, Clone)]
pub struct GcnOperator {
    neighbor_lists: Vec<Vec<u32>>,
    inv_sqrt_deg: Vec<f64>,
}

impl GcnOperator {
    pub fn n(&self) -> usize {
        self.neighbor_lists.len()
    }

    /// Applies the operator to a dense `n x d` matrix.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let (n, d) = x.dim();
        assert_eq!(n, self.n(), "row count mismatch in GCN operator");
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let wi = self.inv_sqrt_deg[i];
            if wi == 0.0 {
                continue;
            }
            let mut row = out.row_mut(i);
            for &j in &self.neighbor_lists[i] {
                let w = wi * self.inv_sqrt_deg[j as usize];
                row.scaled_add(w, &x.row(j as usize));
            }
        }
        out
    }
}

/// Per-unit neighborhood exposure values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureVector(Vec<f64>);

impl ExposureVector {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Input("exposure value outside [0, 1]".into()));
        }
        Ok(ExposureVector(z))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for ExposureVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Samples an Erdős–Rényi graph `G(n, p)` with `p = expected_degree/(n-1)`,
/// so the mean degree concentrates at `expected_degree`. Deterministic for a
/// given seed.
pub fn generate_random_graph(n: usize, expected_degree: f64, seed: u64) -> Result<Network> {
    if n < 2 {
        return Err(Error::Config(format!("need n >= 2, got {n}")));
    }
    if !(expected_degree >= 0.0) {
        return Err(Error::Config(format!(
            "expected_degree must be non-negative, got {expected_degree}"
        )));
    }
    // expected_degree = n-1 is allowed: it makes p = 1 (complete graph).
    if expected_degree > (n - 1) as f64 {
        return Err(Error::Config(format!(
            "expected_degree {expected_degree} must not exceed n-1 = {}",
            n - 1
        )));
    }
    let p = expected_degree / (n - 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n as u32 {
        for j in (i + 1)..n as u32 {
            if p >= 1.0 || rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Network::from_edges(n, edges)
}

/// Neighborhood exposure `z_i = (sum of neighbor treatments) / degree`,
/// with `z_i = 0` for isolated units.
pub fn neighbor_exposure(network: &Network, t: &[u8]) -> Result<ExposureVector> {
    if t.len() != network.n() {
        return Err(Error::Input(format!(
            "treatment length {} does not match n={}",
            t.len(),
            network.n()
        )));
    }
    if t.iter().any(|&v| v > 1) {
        return Err(Error::Input("treatment entries must be 0 or 1".into()));
    }
    let z = (0..network.n())
        .map(|i| {
            let nbrs = network.neighbors(i);
            if nbrs.is_empty() {
                0.0
            } else {
                let s: u32 = nbrs.iter().map(|&j| t[j as usize] as u32).sum();
                s as f64 / nbrs.len() as f64
            }
        })
        .collect();
    ExposureVector::new(z)
}

/// Mean of `v` over each unit's neighborhood (`D^{-1} A v`), zero for
/// isolated units. Shared plumbing for the data generators.
pub fn neighbor_mean_aggregate(network: &Network, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != network.n() {
        return Err(Error::Input(format!(
            "vector length {} does not match n={}",
            v.len(),
            network.n()
        )));
    }
    Ok((0..network.n())
        .map(|i| {
            let nbrs = network.neighbors(i);
            if nbrs.is_empty() {
                0.0
            } else {
                nbrs.iter().map(|&j| v[j as usize]).sum::<f64>() / nbrs.len() as f64
            }
        })
        .collect())
}
