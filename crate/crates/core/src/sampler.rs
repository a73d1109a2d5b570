//! Node partitions used as mini-batches.
//!
//! Three samplers: a seeded uniform split, a locality-aware greedy growth
//! that keeps the edge cut low, and random-walk node sets.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionMethod {
    Random,
    Locality,
    RandomWalk,
    /// Loaded from a partition file.
    File,
}

impl PartitionMethod {
    pub fn name(self) -> &'static str {
        match self {
            PartitionMethod::Random => "random",
            PartitionMethod::Locality => "locality",
            PartitionMethod::RandomWalk => "random-walk",
            PartitionMethod::File => "file",
        }
    }
}

impl std::str::FromStr for PartitionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "locality" | "metis" => Ok(Self::Locality),
            "random-walk" | "rw" => Ok(Self::RandomWalk),
            other => Err(Error::InvalidArgument(format!("unknown partition method `{other}`"))),
        }
    }
}

/// Disjoint, non-empty clusters covering a target node set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub clusters: Vec<Vec<usize>>,
    pub method: PartitionMethod,
    pub seed: u64,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// Check that clusters are non-empty, pairwise disjoint and within `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for c in &self.clusters {
            if c.is_empty() {
                return Err(Error::InvalidArgument("partition has an empty cluster".into()));
            }
            for &v in c {
                if v >= n {
                    return Err(Error::NodeOutOfRange { index: v, n });
                }
                if std::mem::replace(&mut seen[v], true) {
                    return Err(Error::DuplicateNode(v));
                }
            }
        }
        Ok(())
    }

    /// Merge clusters into batches of `per_batch` clusters each, after a
    /// seeded shuffle of the cluster order. Node lists of merged batches
    /// are sorted.
    pub fn group(&self, per_batch: usize, seed: u64) -> Result<Partition> {
        if per_batch == 0 {
            return Err(Error::InvalidArgument("clusters per batch must be positive".into()));
        }
        if per_batch == 1 {
            return Ok(self.clone());
        }
        let mut order: Vec<usize> = (0..self.clusters.len()).collect();
        order.shuffle(&mut seed::rng(seed));
        let clusters = order
            .chunks(per_batch)
            .map(|chunk| {
                let mut merged: Vec<usize> = chunk.iter().flat_map(|&c| self.clusters[c].iter().copied()).collect();
                merged.sort_unstable();
                merged
            })
            .collect();
        Ok(Partition {
            clusters,
            method: self.method,
            seed: self.seed,
        })
    }

    /// SHA-256 over the cluster lists, order-sensitive.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.clusters.len() as u64).to_le_bytes());
        for c in &self.clusters {
            h.update((c.len() as u64).to_le_bytes());
            for &v in c {
                h.update((v as u64).to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

fn cluster_sizes(total: usize, k: usize) -> Vec<usize> {
    (0..k).map(|c| total / k + usize::from(c < total % k)).collect()
}

fn check_counts(nodes: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("number of clusters must be positive".into()));
    }
    if k > nodes {
        return Err(Error::InvalidArgument(format!("{k} clusters requested for {nodes} nodes")));
    }
    Ok(())
}

/// Shuffle `nodes` and split into `k` clusters whose sizes differ by at most one.
pub fn random_partition(nodes: &[usize], k: usize, seed: u64) -> Result<Partition> {
    check_counts(nodes.len(), k)?;
    let mut shuffled = nodes.to_vec();
    shuffled.shuffle(&mut seed::rng(seed));
    let mut clusters = Vec::with_capacity(k);
    let mut rest = shuffled.as_slice();
    for size in cluster_sizes(nodes.len(), k) {
        let (head, tail) = rest.split_at(size);
        clusters.push(head.to_vec());
        rest = tail;
    }
    Ok(Partition {
        clusters,
        method: PartitionMethod::Random,
        seed,
    })
}

/// Locality-aware partition of all nodes. See [`locality_partition_of`].
pub fn locality_partition(g: &SparseGraph, k: usize, seed: u64) -> Result<Partition> {
    let nodes: Vec<usize> = (0..g.num_nodes()).collect();
    locality_partition_of(g, &nodes, k, seed)
}

/// Greedy graph growing on the subgraph induced by `nodes`.
///
/// Clusters are grown one after another up to near-equal target sizes.
/// Each starts from a non-isolated unassigned node of minimum remaining
/// degree (ties broken by a seeded random rank) and repeatedly absorbs the
/// frontier node with the most edges into the cluster, earliest-discovered
/// first. When the frontier runs dry the cluster continues from the
/// unassigned node of minimum remaining degree.
pub fn locality_partition_of(g: &SparseGraph, nodes: &[usize], k: usize, seed: u64) -> Result<Partition> {
    check_counts(nodes.len(), k)?;
    let n = g.num_nodes();
    let mut in_target = vec![false; n];
    for &v in nodes {
        if v >= n {
            return Err(Error::NodeOutOfRange { index: v, n });
        }
        if std::mem::replace(&mut in_target[v], true) {
            return Err(Error::DuplicateNode(v));
        }
    }
    let mut rank: Vec<usize> = (0..n).collect();
    rank.shuffle(&mut seed::rng(seed));

    // undirected view restricted to the target set
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &v in nodes {
        for &u in g.neighbors(v) {
            if in_target[u] {
                nbrs[v].push(u);
                nbrs[u].push(v);
            }
        }
    }
    for l in &mut nbrs {
        l.sort_unstable();
        l.dedup();
    }
    let mut remaining_deg: Vec<usize> = nbrs.iter().map(Vec::len).collect();

    let mut assigned = vec![false; n];
    let mut gain = vec![0usize; n];
    let mut clusters = Vec::with_capacity(k);
    let mut order_counter = 0usize;

    // A fresh cluster avoids starting on an isolated node, which would
    // force an early restart; restarts take isolated nodes first.
    let pick_seed = |assigned: &[bool], remaining_deg: &[usize], fresh: bool| -> Option<usize> {
        nodes
            .iter()
            .copied()
            .filter(|&v| !assigned[v])
            .min_by_key(|&v| (fresh && remaining_deg[v] == 0, remaining_deg[v], rank[v]))
    };

    for target in cluster_sizes(nodes.len(), k) {
        let mut cluster = Vec::with_capacity(target);
        let mut heap: BinaryHeap<(usize, Reverse<usize>, usize)> = BinaryHeap::new();
        let mut touched: Vec<usize> = Vec::new();
        while cluster.len() < target {
            let next = loop {
                match heap.pop() {
                    Some((gv, _, v)) if !assigned[v] && gain[v] == gv => break Some(v),
                    Some(_) => continue,
                    None => break None,
                }
            };
            let v = match next {
                Some(v) => v,
                None => pick_seed(&assigned, &remaining_deg, cluster.is_empty()).expect("sizes sum to target count"),
            };
            assigned[v] = true;
            cluster.push(v);
            for &u in &nbrs[v] {
                remaining_deg[u] -= 1;
                if !assigned[u] {
                    gain[u] += 1;
                    touched.push(u);
                    order_counter += 1;
                    heap.push((gain[u], Reverse(order_counter), u));
                }
            }
        }
        for u in touched {
            gain[u] = 0;
        }
        cluster.sort_unstable();
        clusters.push(cluster);
    }
    Ok(Partition {
        clusters,
        method: PartitionMethod::Locality,
        seed,
    })
}

/// Union of random walks from `num_roots` distinct uniformly chosen roots,
/// sorted. A walk at a node without in-neighbors stays put.
pub fn random_walk_batch(g: &SparseGraph, num_roots: usize, walk_len: usize, seed: u64) -> Result<Vec<usize>> {
    if num_roots == 0 {
        return Err(Error::InvalidArgument("need at least one root".into()));
    }
    let n = g.num_nodes();
    let mut rng = seed::rng(seed);
    let all: Vec<usize> = (0..n).collect();
    let roots: Vec<usize> = all.choose_multiple(&mut rng, num_roots.min(n)).copied().collect();
    let mut visited = vec![false; n];
    for root in roots {
        let mut cur = root;
        visited[cur] = true;
        for _ in 0..walk_len {
            if let Some(&next) = g.neighbors(cur).choose(&mut rng) {
                cur = next;
            }
            visited[cur] = true;
        }
    }
    Ok((0..n).filter(|&v| visited[v]).collect())
}

/// Partition all nodes into `k` near-equal clusters grown by random walks
/// over unassigned nodes.
pub fn random_walk_partition(g: &SparseGraph, k: usize, walk_len: usize, seed: u64) -> Result<Partition> {
    let n = g.num_nodes();
    check_counts(n, k)?;
    let mut rng = seed::rng(seed);
    let mut assigned = vec![false; n];
    let mut unassigned: Vec<usize> = (0..n).collect();
    let mut clusters = Vec::with_capacity(k);
    for target in cluster_sizes(n, k) {
        let mut cluster: Vec<usize> = Vec::with_capacity(target);
        while cluster.len() < target {
            unassigned.retain(|&v| !assigned[v]);
            let root = *unassigned.choose(&mut rng).expect("sizes sum to n");
            assigned[root] = true;
            cluster.push(root);
            let mut cur = root;
            let mut stuck = 0;
            while cluster.len() < target && stuck < walk_len.max(1) {
                let open: Vec<usize> = g.neighbors(cur).iter().copied().filter(|&u| !assigned[u]).collect();
                if let Some(&u) = open.choose(&mut rng) {
                    assigned[u] = true;
                    cluster.push(u);
                    cur = u;
                    stuck = 0;
                } else {
                    // restart from a random member of the cluster
                    cur = cluster[rng.random_range(0..cluster.len())];
                    stuck += 1;
                }
            }
        }
        cluster.sort_unstable();
        clusters.push(cluster);
    }
    Ok(Partition {
        clusters,
        method: PartitionMethod::RandomWalk,
        seed,
    })
}

/// One line per cluster, space-separated node ids.
pub fn write_partition(p: &Partition, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for c in &p.clusters {
        let line: Vec<String> = c.iter().map(ToString::to_string).collect();
        writeln!(out, "{}", line.join(" ")).expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_partition(path: &Path) -> Result<Partition> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut clusters = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cluster = line
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>().map_err(|e| Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    msg: format!("bad node id `{t}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        clusters.push(cluster);
    }
    Ok(Partition {
        clusters,
        method: PartitionMethod::File,
        seed: 0,
    })
}
