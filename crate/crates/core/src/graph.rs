//! Sparse graph storage, symmetric normalization and batch extraction.
//!
//! Adjacency follows the in-edge convention: `A[i][j] = 1` iff the edge
//! `j → i` exists, so row `i` lists the nodes that send messages to `i`.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Csr;

/// Which propagation operator a model aggregates with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PropagationKind {
    /// `Ã = (D+I)^{-1/2} (A+I) (D+I)^{-1/2}`
    Gcn,
    /// `D^{-1} A`: mean over in-neighbors, zero rows for isolated nodes.
    Mean,
}

/// Immutable CSR graph with cached normalized operators.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    n: usize,
    adj: Csr,
    degrees: Vec<usize>,
    norm: Csr,
    mean: Csr,
}

impl SparseGraph {
    /// Build from `(u, v)` edge pairs meaning `u → v`. Duplicates collapse,
    /// self-loops in the input are dropped (the normalization adds its own),
    /// and `undirected` inserts the reverse of every edge.
    pub fn build(n: usize, edges: &[(usize, usize)], undirected: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            for x in [u, v] {
                if x >= n {
                    return Err(Error::NodeOutOfRange { index: x, n });
                }
            }
            if u == v {
                continue;
            }
            rows[v].push(u);
            if undirected {
                rows[u].push(v);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        Self::from_adjacency_arrays(n, row_ptr, col_idx)
    }

    fn from_adjacency_arrays(n: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>) -> Result<Self> {
        let nnz = col_idx.len();
        let adj = Csr::new(n, n, row_ptr, col_idx, vec![1.0; nnz])?;
        let degrees: Vec<usize> = (0..n).map(|i| adj.row(i).0.len()).collect();
        let inv_sqrt: Vec<f64> = degrees.iter().map(|&d| 1.0 / ((d + 1) as f64).sqrt()).collect();

        let mut n_ptr = Vec::with_capacity(n + 1);
        n_ptr.push(0);
        let mut n_col = Vec::with_capacity(nnz + n);
        let mut n_val = Vec::with_capacity(nnz + n);
        let mut m_val = Vec::with_capacity(nnz);
        for i in 0..n {
            let (cols, _) = adj.row(i);
            let mut self_done = false;
            for &j in cols {
                if !self_done && j > i {
                    n_col.push(i);
                    n_val.push(inv_sqrt[i] * inv_sqrt[i]);
                    self_done = true;
                }
                n_col.push(j);
                n_val.push(inv_sqrt[i] * inv_sqrt[j]);
                m_val.push(1.0 / degrees[i] as f64);
            }
            if !self_done {
                n_col.push(i);
                n_val.push(inv_sqrt[i] * inv_sqrt[i]);
            }
            n_ptr.push(n_col.len());
        }
        let norm = Csr::new(n, n, n_ptr, n_col, n_val)?;
        let mean = Csr::new(n, n, adj.row_ptr().to_vec(), adj.col_idx().to_vec(), m_val)?;
        Ok(Self {
            n,
            adj,
            degrees,
            norm,
            mean,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Number of stored directed edges.
    pub fn num_edges(&self) -> usize {
        self.adj.nnz()
    }

    /// 0/1 adjacency `A`.
    pub fn adjacency(&self) -> &Csr {
        &self.adj
    }

    /// Normalized adjacency `Ã`, self-loops included.
    pub fn normalized(&self) -> &Csr {
        &self.norm
    }

    pub fn operator(&self, kind: PropagationKind) -> &Csr {
        match kind {
            PropagationKind::Gcn => &self.norm,
            PropagationKind::Mean => &self.mean,
        }
    }

    /// In-degree of every node.
    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// In-neighbors of `i` (no self-loop).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.adj.row(i).0
    }

    /// All directed edges as `(src, dst)`, ordered by destination then source.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| self.neighbors(i).iter().map(move |&j| (j, i)))
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.neighbors(i).iter().all(|&j| self.neighbors(j).binary_search(&i).is_ok()))
    }

    /// SHA-256 over the node count and CSR structure.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.n as u64).to_le_bytes());
        for &p in self.adj.row_ptr() {
            h.update((p as u64).to_le_bytes());
        }
        for &c in self.adj.col_idx() {
            h.update((c as u64).to_le_bytes());
        }
        h.finalize().into()
    }

    /// Relabel nodes: node `i` becomes `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::dims("permute", self.n, perm.len()));
        }
        let edges: Vec<_> = self.edges().into_iter().map(|(u, v)| (perm[u], perm[v])).collect();
        Self::build(self.n, &edges, false)
    }
}

/// Position of a node inside a [`BatchContext`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalIndex {
    Batch(usize),
    Boundary(usize),
}

/// Row blocks of one propagation operator restricted to the batch rows.
#[derive(Clone, Debug)]
pub struct OperatorBlocks {
    /// `|B| × |B|` in-batch block.
    pub inner: Csr,
    /// `|B| × |N_B^c|` out-of-batch block.
    pub outer: Csr,
}

/// A mini-batch with its out-of-batch neighbors and extracted blocks.
#[derive(Clone, Debug)]
pub struct BatchContext {
    batch: Vec<usize>,
    boundary: Vec<usize>,
    gcn: OperatorBlocks,
    mean: OperatorBlocks,
    global_to_local: HashMap<usize, LocalIndex>,
}

impl BatchContext {
    /// Split the batch rows of every operator into in-batch and boundary
    /// blocks. The boundary is sorted by global id.
    pub fn new(g: &SparseGraph, batch: &[usize]) -> Result<Self> {
        validate_batch(g, batch)?;
        let mut global_to_local = HashMap::with_capacity(batch.len() * 2);
        for (p, &v) in batch.iter().enumerate() {
            global_to_local.insert(v, LocalIndex::Batch(p));
        }
        let mut boundary: Vec<usize> = batch
            .iter()
            .flat_map(|&v| g.neighbors(v).iter().copied())
            .filter(|u| !global_to_local.contains_key(u))
            .collect();
        boundary.sort_unstable();
        boundary.dedup();
        for (q, &u) in boundary.iter().enumerate() {
            global_to_local.insert(u, LocalIndex::Boundary(q));
        }
        let gcn = split_rows(g.operator(PropagationKind::Gcn), batch, &boundary, &global_to_local)?;
        let mean = split_rows(g.operator(PropagationKind::Mean), batch, &boundary, &global_to_local)?;
        Ok(Self {
            batch: batch.to_vec(),
            boundary,
            gcn,
            mean,
            global_to_local,
        })
    }

    pub fn batch(&self) -> &[usize] {
        &self.batch
    }

    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn blocks(&self, kind: PropagationKind) -> &OperatorBlocks {
        match kind {
            PropagationKind::Gcn => &self.gcn,
            PropagationKind::Mean => &self.mean,
        }
    }

    /// `Ã_{B,B}`
    pub fn a_bb(&self) -> &Csr {
        &self.gcn.inner
    }

    /// `Ã_{B,N_B^c}`
    pub fn a_bc(&self) -> &Csr {
        &self.gcn.outer
    }

    pub fn local(&self, global: usize) -> Option<LocalIndex> {
        self.global_to_local.get(&global).copied()
    }
}

fn validate_batch(g: &SparseGraph, batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut seen = vec![false; g.num_nodes()];
    for &v in batch {
        if v >= g.num_nodes() {
            return Err(Error::NodeOutOfRange {
                index: v,
                n: g.num_nodes(),
            });
        }
        if std::mem::replace(&mut seen[v], true) {
            return Err(Error::DuplicateNode(v));
        }
    }
    Ok(())
}

fn split_rows(
    op: &Csr,
    batch: &[usize],
    boundary: &[usize],
    local: &HashMap<usize, LocalIndex>,
) -> Result<OperatorBlocks> {
    let mut in_ptr = vec![0];
    let mut in_entries: Vec<(usize, f64)> = Vec::new();
    let mut in_col = Vec::new();
    let mut in_val = Vec::new();
    let mut out_ptr = vec![0];
    let mut out_col = Vec::new();
    let mut out_val = Vec::new();
    for &v in batch {
        let (cols, vals) = op.row(v);
        in_entries.clear();
        for (&j, &x) in cols.iter().zip(vals) {
            match local[&j] {
                LocalIndex::Batch(p) => in_entries.push((p, x)),
                // global order and boundary order agree, so this stays sorted
                LocalIndex::Boundary(q) => {
                    out_col.push(q);
                    out_val.push(x);
                }
            }
        }
        in_entries.sort_unstable_by_key(|e| e.0);
        for &(p, x) in &in_entries {
            in_col.push(p);
            in_val.push(x);
        }
        in_ptr.push(in_col.len());
        out_ptr.push(out_col.len());
    }
    Ok(OperatorBlocks {
        inner: Csr::new(batch.len(), batch.len(), in_ptr, in_col, in_val)?,
        outer: Csr::new(batch.len(), boundary.len(), out_ptr, out_col, out_val)?,
    })
}

/// Cut statistics of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphCut {
    /// Edges from `N_B^c` into `B`.
    pub cut_edges: usize,
    /// `|N_B^c|`
    pub boundary_size: usize,
}

pub fn graph_cut(g: &SparseGraph, batch: &[usize]) -> Result<GraphCut> {
    validate_batch(g, batch)?;
    let mut in_batch = vec![false; g.num_nodes()];
    for &v in batch {
        in_batch[v] = true;
    }
    let mut on_boundary = vec![false; g.num_nodes()];
    let mut cut_edges = 0;
    let mut boundary_size = 0;
    for &v in batch {
        for &u in g.neighbors(v) {
            if !in_batch[u] {
                cut_edges += 1;
                if !std::mem::replace(&mut on_boundary[u], true) {
                    boundary_size += 1;
                }
            }
        }
    }
    Ok(GraphCut {
        cut_edges,
        boundary_size,
    })
}

/// Read a tab-separated edge list. Lines starting with `#` are comments,
/// except a `# nodes: N` header which fixes the node count. Without it the
/// count is `n` if given, else the largest id plus one.
pub fn read_edge_list(path: &Path, n: Option<usize>, undirected: bool) -> Result<SparseGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut edges = Vec::new();
    let mut header_n = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("nodes:") {
                header_n = Some(v.trim().parse::<usize>().map_err(|e| Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    msg: format!("bad node count: {e}"),
                })?);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let parse = |s: Option<&str>| -> Result<usize> {
            s.ok_or_else(|| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: "expected `u<TAB>v`".into(),
            })?
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!("bad node id: {e}"),
            })
        };
        let u = parse(parts.next())?;
        let v = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: "expected exactly two columns".into(),
            });
        }
        edges.push((u, v));
    }
    let n = n
        .or(header_n)
        .unwrap_or_else(|| edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0));
    SparseGraph::build(n, &edges, undirected)
}

/// Write every stored directed edge, preceded by a `# nodes: N` header.
pub fn write_edge_list(g: &SparseGraph, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "# nodes: {}", g.num_nodes()).expect("write to Vec");
    for (u, v) in g.edges() {
        writeln!(out, "{u}\t{v}").expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path6() -> SparseGraph {
        // v1..v6 as 0..5
        SparseGraph::build(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)], true).unwrap()
    }

    #[test]
    fn path_normalization() {
        let g = path6();
        assert!((g.normalized().get(2, 3) - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.normalized().get(0, 0) - 0.5).abs() < 1e-15);
        assert!(g.is_symmetric());
    }

    #[test]
    fn single_node_is_self_loop() {
        let g = SparseGraph::build(1, &[], false).unwrap();
        assert_eq!(g.normalized().to_dense().data(), &[1.0]);
    }

    #[test]
    fn triangle_is_uniform_third() {
        let g = SparseGraph::build(3, &[(0, 1), (1, 2), (2, 0)], true).unwrap();
        for v in g.normalized().to_dense().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicates_collapse_and_direction_respected() {
        let g = SparseGraph::build(3, &[(0, 1), (0, 1), (1, 1)], false).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.neighbors(1), &[0]);
        assert!(g.neighbors(0).is_empty());
        assert!(!g.is_symmetric());
    }

    #[test]
    fn build_errors() {
        assert!(matches!(SparseGraph::build(0, &[], true), Err(Error::EmptyGraph)));
        assert!(matches!(
            SparseGraph::build(2, &[(0, 2)], true),
            Err(Error::NodeOutOfRange { index: 2, n: 2 })
        ));
    }

    #[test]
    fn batch_of_first_three_path_nodes() {
        let g = path6();
        let ctx = BatchContext::new(&g, &[0, 1, 2]).unwrap();
        assert_eq!(ctx.boundary(), &[3]);
        assert_eq!(ctx.a_bc().nnz(), 1);
        assert!((ctx.a_bc().get(2, 0) - 1.0 / 3.0).abs() < 1e-15);
        let cut = graph_cut(&g, &[0, 1, 2]).unwrap();
        assert_eq!(cut.boundary_size, 1);
        assert_eq!(cut.cut_edges, 1);
    }

    #[test]
    fn whole_graph_batch_has_no_boundary() {
        let g = path6();
        let all: Vec<_> = (0..6).collect();
        let ctx = BatchContext::new(&g, &all).unwrap();
        assert!(ctx.boundary().is_empty());
        assert_eq!(ctx.a_bc().cols(), 0);
        assert_eq!(ctx.a_bb(), g.normalized());
        let cut = graph_cut(&g, &all).unwrap();
        assert_eq!((cut.cut_edges, cut.boundary_size), (0, 0));
    }

    #[test]
    fn batch_errors() {
        let g = path6();
        assert!(matches!(BatchContext::new(&g, &[1, 1]), Err(Error::DuplicateNode(1))));
        assert!(matches!(BatchContext::new(&g, &[]), Err(Error::EmptyBatch)));
        assert!(BatchContext::new(&g, &[9]).is_err());
    }

    #[test]
    fn unordered_batch_keeps_given_order() {
        let g = path6();
        let ctx = BatchContext::new(&g, &[4, 2, 3]).unwrap();
        assert_eq!(ctx.boundary(), &[1, 5]);
        assert_eq!(ctx.local(3), Some(LocalIndex::Batch(2)));
        assert_eq!(ctx.local(5), Some(LocalIndex::Boundary(1)));
        // row of node 4 (local 0): neighbors 3 (local 2) and 5 (boundary 1)
        assert_eq!(ctx.a_bb().row(0).0, &[0, 2]);
        assert_eq!(ctx.a_bc().row(0).0, &[1]);
    }

    #[test]
    fn edge_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.tsv");
        let g = SparseGraph::build(7, &[(0, 1), (2, 5), (5, 6)], true).unwrap();
        write_edge_list(&g, &p).unwrap();
        let g2 = read_edge_list(&p, None, false).unwrap();
        assert_eq!(g.adjacency(), g2.adjacency());
        write_edge_list(&g2, &p).unwrap();
        let g3 = read_edge_list(&p, None, false).unwrap();
        assert_eq!(g2.adjacency(), g3.adjacency());
        assert_eq!(g.fingerprint(), g3.fingerprint());
    }

    #[test]
    fn edge_list_parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.tsv");
        fs::write(&p, "# comment\n0\t1\n1 x\n").unwrap();
        match read_edge_list(&p, None, true) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
