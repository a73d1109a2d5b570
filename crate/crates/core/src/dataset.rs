//! Synthetic generators and the plain-text dataset directory format.
//!
//! A dataset directory holds four files:
//!
//! * `edges.tsv`: `u<TAB>v` per line, optional `# nodes: N` header. Edges
//!   are read as undirected.
//! * `features.csv`: one node per line, comma-separated `f64`, no header.
//! * `labels.csv`: one class id per line, optional `# classes: C` header.
//! * `masks.csv`: three lines (train, val, test) of space-separated node ids.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{read_edge_list, write_edge_list, SparseGraph};
use crate::linalg::{spmm, DenseMatrix};
use crate::seed;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Masks {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graph: SparseGraph,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub masks: Masks,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    /// Check feature rows, label range, mask bounds and mask disjointness.
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.num_nodes();
        if self.features.rows() != n {
            return Err(Error::dims("dataset features", n, self.features.rows()));
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        if self.labels.len() != n {
            return Err(Error::dims("dataset labels", n, self.labels.len()));
        }
        if let Some((node, &label)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                node,
                label,
                classes: self.num_classes,
            });
        }
        let mut owner = vec![None; n];
        for (name, ids) in [("train", &self.masks.train), ("val", &self.masks.val), ("test", &self.masks.test)] {
            for &v in ids {
                if v >= n {
                    return Err(Error::NodeOutOfRange { index: v, n });
                }
                if let Some(prev) = owner[v].replace(name) {
                    return Err(Error::InvalidArgument(format!("node {v} is in both the {prev} and {name} masks")));
                }
            }
        }
        Ok(())
    }
}

fn split_masks(mut ids: Vec<usize>, rng: &mut impl Rng) -> Masks {
    ids.shuffle(rng);
    let n = ids.len();
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Masks { train, val, test }
}

fn gaussian_row(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Double star: leaves 0,1 on center 2, leaves 4,5 on center 3, centers
/// joined. Its two orbits {0,1,4,5} and {2,3} get one random feature row
/// each and are the two classes. Masks: train {0,1,2,3}, val {4}, test {5}.
pub fn gen_double_star(feature_dim: usize, seed: u64) -> Result<Dataset> {
    if feature_dim == 0 {
        return Err(Error::InvalidArgument("feature_dim must be positive".into()));
    }
    let graph = SparseGraph::build(6, &[(0, 2), (1, 2), (2, 3), (3, 4), (3, 5)], true)?;
    let mut rng = seed::rng(seed);
    let leaf = gaussian_row(feature_dim, &mut rng);
    let center = gaussian_row(feature_dim, &mut rng);
    let is_center = |i: usize| i == 2 || i == 3;
    let features = DenseMatrix::from_fn(6, feature_dim, |i, j| if is_center(i) { center[j] } else { leaf[j] });
    Ok(Dataset {
        name: "double-star".into(),
        graph,
        features,
        labels: (0..6).map(|i| usize::from(is_center(i))).collect(),
        num_classes: 2,
        masks: Masks {
            train: vec![0, 1, 2, 3],
            val: vec![4],
            test: vec![5],
        },
    })
}

/// `copies` disjoint copies of one G(base_n, p_edge) graph. Copy `c` maps
/// base node `j` to `c * base_n + j`; features, labels and mask membership
/// are shared by all copies of a base node. Labels split the base nodes at
/// the median of their aggregated feature sum, giving two classes.
pub fn gen_duplication(base_n: usize, copies: usize, p_edge: f64, feature_dim: usize, seed: u64) -> Result<Dataset> {
    if base_n == 0 || copies == 0 || feature_dim == 0 {
        return Err(Error::InvalidArgument("base_n, copies and feature_dim must be positive".into()));
    }
    if !(0.0..=1.0).contains(&p_edge) {
        return Err(Error::InvalidArgument(format!("edge probability {p_edge} outside [0, 1]")));
    }
    let mut rng = seed::rng(seed::derive(seed, "graph"));
    let mut base_edges = Vec::new();
    for i in 0..base_n {
        for j in (i + 1)..base_n {
            if rng.random_bool(p_edge) {
                base_edges.push((i, j));
            }
        }
    }
    let base = SparseGraph::build(base_n, &base_edges, true)?;
    let mut frng = seed::rng(seed::derive(seed, "features"));
    let base_x = DenseMatrix::from_fn(base_n, feature_dim, |_, _| frng.sample(StandardNormal));
    let agg = spmm(base.normalized(), &base_x)?;
    let score: Vec<f64> = (0..base_n).map(|i| agg.row(i).iter().sum()).collect();
    let mut sorted = score.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[base_n / 2];
    let base_labels: Vec<usize> = score.iter().map(|&s| usize::from(s >= median)).collect();
    let base_masks = split_masks((0..base_n).collect(), &mut seed::rng(seed::derive(seed, "masks")));

    let n = base_n * copies;
    let edges: Vec<(usize, usize)> = (0..copies)
        .flat_map(|c| base_edges.iter().map(move |&(u, v)| (c * base_n + u, c * base_n + v)))
        .collect();
    let expand = |ids: &[usize]| -> Vec<usize> {
        let mut out: Vec<usize> = (0..copies).flat_map(|c| ids.iter().map(move |&j| c * base_n + j)).collect();
        out.sort_unstable();
        out
    };
    Ok(Dataset {
        name: format!("duplication-{base_n}x{copies}"),
        graph: SparseGraph::build(n, &edges, true)?,
        features: DenseMatrix::from_fn(n, feature_dim, |i, j| base_x.get(i % base_n, j)),
        labels: (0..n).map(|i| base_labels[i % base_n]).collect(),
        num_classes: 2,
        masks: Masks {
            train: expand(&base_masks.train),
            val: expand(&base_masks.val),
            test: expand(&base_masks.test),
        },
    })
}

/// Stochastic block model with `blocks` contiguous, near-equal blocks.
/// Features are the block one-hot plus `noise` times standard normal
/// entries; labels are the blocks; masks are a seeded 60/20/20 split.
pub fn gen_sbm(
    n: usize,
    blocks: usize,
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if blocks == 0 || blocks > n {
        return Err(Error::InvalidArgument(format!("{blocks} blocks for {n} nodes")));
    }
    if feature_dim < blocks {
        return Err(Error::InvalidArgument(format!(
            "feature_dim {feature_dim} cannot hold a one-hot of {blocks} blocks"
        )));
    }
    for p in [p_in, p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("edge probability {p} outside [0, 1]")));
        }
    }
    let block = |i: usize| i * blocks / n;
    let mut rng = seed::rng(seed::derive(seed, "graph"));
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if block(i) == block(j) { p_in } else { p_out };
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let mut frng = seed::rng(seed::derive(seed, "features"));
    let features = DenseMatrix::from_fn(n, feature_dim, |i, j| {
        let z: f64 = frng.sample(StandardNormal);
        f64::from(u8::from(j == block(i))) + noise * z
    });
    Ok(Dataset {
        name: format!("sbm-{n}-{blocks}"),
        graph: SparseGraph::build(n, &edges, true)?,
        features,
        labels: (0..n).map(block).collect(),
        num_classes: blocks,
        masks: split_masks((0..n).collect(), &mut seed::rng(seed::derive(seed, "masks"))),
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        msg: msg.into(),
    }
}

fn read_features(path: &Path) -> Result<DenseMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cols = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|e| parse_err(path, i + 1, format!("bad number `{tok}`: {e}")))?;
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => return Err(parse_err(path, i + 1, format!("expected {c} columns, found {width}"))),
            Some(_) => {}
        }
        rows += 1;
    }
    DenseMatrix::new(rows, cols.unwrap_or(0), data)
}

fn read_labels(path: &Path) -> Result<(Vec<usize>, Option<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut classes = None;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("classes:") {
                classes = Some(
                    v.trim()
                        .parse()
                        .map_err(|e| parse_err(path, i + 1, format!("bad class count: {e}")))?,
                );
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        labels.push(
            line.parse()
                .map_err(|e| parse_err(path, i + 1, format!("bad label `{line}`: {e}")))?,
        );
    }
    Ok((labels, classes))
}

fn read_masks(path: &Path) -> Result<Masks> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    if lines.len() != 3 {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("expected 3 lines (train, val, test), found {}", lines.len()),
        });
    }
    let parse_line = |i: usize| -> Result<Vec<usize>> {
        lines[i]
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| parse_err(path, i + 1, format!("bad node id `{t}`: {e}"))))
            .collect()
    };
    Ok(Masks {
        train: parse_line(0)?,
        val: parse_line(1)?,
        test: parse_line(2)?,
    })
}

/// Load and validate a dataset directory. Errors name the offending file.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let features_path = dir.join("features.csv");
    let labels_path = dir.join("labels.csv");
    let masks_path = dir.join("masks.csv");
    let features = read_features(&features_path)?;
    let graph = read_edge_list(&dir.join("edges.tsv"), Some(features.rows()), true)?;
    let (labels, classes) = read_labels(&labels_path)?;
    if labels.len() != features.rows() {
        return Err(Error::Format {
            path: labels_path,
            msg: format!("{} labels for {} feature rows", labels.len(), features.rows()),
        });
    }
    let masks = read_masks(&masks_path)?;
    let num_classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m + 1));
    let ds = Dataset {
        name: dir.file_name().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned()),
        graph,
        features,
        labels,
        num_classes,
        masks,
    };
    ds.validate().map_err(|e| match e {
        Error::LabelOutOfRange { .. } => Error::Format {
            path: labels_path.clone(),
            msg: e.to_string(),
        },
        Error::InvalidArgument(msg) => Error::Format {
            path: masks_path.clone(),
            msg,
        },
        Error::NodeOutOfRange { .. } => Error::Format {
            path: masks_path.clone(),
            msg: e.to_string(),
        },
        other => other,
    })?;
    Ok(ds)
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// Write the four dataset files into `dir`, creating it if needed.
/// Floats use Rust's shortest round-trip formatting, so save → load is exact.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_edge_list(&ds.graph, &dir.join("edges.tsv"))?;
    let mut feats = String::new();
    for i in 0..ds.features.rows() {
        let row: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(feats, "{}", row.join(",")).expect("write to String");
    }
    let mut labels = format!("# classes: {}\n", ds.num_classes);
    for l in &ds.labels {
        writeln!(labels, "{l}").expect("write to String");
    }
    let masks = format!(
        "{}\n{}\n{}\n",
        join_ids(&ds.masks.train),
        join_ids(&ds.masks.val),
        join_ids(&ds.masks.test)
    );
    for (name, body) in [("features.csv", feats), ("labels.csv", labels), ("masks.csv", masks)] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Counts reported by the conformance checker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSummary {
    pub nodes: usize,
    /// Undirected edges (each symmetric pair counted once).
    pub undirected_edges: usize,
    pub features: usize,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Load a dataset directory and summarize it; any format violation is an error.
pub fn check_dataset_dir(dir: &Path) -> Result<DatasetSummary> {
    let ds = load_dataset(dir)?;
    let mut pairs: HashMap<(usize, usize), ()> = HashMap::new();
    for (u, v) in ds.graph.edges() {
        pairs.insert((u.min(v), u.max(v)), ());
    }
    Ok(DatasetSummary {
        nodes: ds.num_nodes(),
        undirected_edges: pairs.len(),
        features: ds.features.cols(),
        classes: ds.num_classes,
        train: ds.masks.train.len(),
        val: ds.masks.val.len(),
        test: ds.masks.test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::graph_cut;
    use crate::sampler::locality_partition;
    use crate::wl::wl_refine;

    #[test]
    fn double_star_structure() {
        let ds = gen_double_star(4, 1).unwrap();
        ds.validate().unwrap();
        let t = wl_refine(&ds.graph, &ds.features, 4).unwrap();
        assert_eq!(t.num_classes(4), 2);
        assert_eq!(t.colors(4)[0], t.colors(4)[5]);
        assert_eq!(t.colors(4)[2], t.colors(4)[3]);
    }

    #[test]
    fn duplication_single_copy_is_base() {
        let a = gen_duplication(10, 1, 0.3, 3, 5).unwrap();
        let b = gen_duplication(10, 3, 0.3, 3, 5).unwrap();
        assert_eq!(a.num_nodes(), 10);
        assert_eq!(b.num_nodes(), 30);
        assert_eq!(b.graph.num_edges(), 3 * a.graph.num_edges());
        for i in 0..30 {
            assert_eq!(b.features.row(i), a.features.row(i % 10));
            assert_eq!(b.labels[i], a.labels[i % 10]);
        }
        b.validate().unwrap();
        assert_eq!(b.masks.train.len(), 3 * a.masks.train.len());
    }

    #[test]
    fn sbm_without_cross_edges_partitions_cleanly() {
        let ds = gen_sbm(40, 4, 0.5, 0.0, 4, 0.1, 2).unwrap();
        let p = locality_partition(&ds.graph, 4, 0).unwrap();
        let cut: usize = p.clusters.iter().map(|c| graph_cut(&ds.graph, c).unwrap().cut_edges).sum();
        assert_eq!(cut, 0);
    }

    #[test]
    fn sbm_singletons_and_masks() {
        let ds = gen_sbm(5, 5, 0.9, 0.2, 5, 0.0, 1).unwrap();
        assert_eq!(ds.labels, vec![0, 1, 2, 3, 4]);
        let ds = gen_sbm(100, 4, 0.2, 0.01, 6, 0.5, 1).unwrap();
        assert_eq!((ds.masks.train.len(), ds.masks.val.len(), ds.masks.test.len()), (60, 20, 20));
        ds.validate().unwrap();
        assert_eq!(ds, gen_sbm(100, 4, 0.2, 0.01, 6, 0.5, 1).unwrap());
        assert!(gen_sbm(10, 4, 0.2, 0.01, 3, 0.5, 1).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let ds = gen_sbm(50, 3, 0.3, 0.02, 5, 0.7, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let mut back = load_dataset(dir.path()).unwrap();
        back.name = ds.name.clone();
        assert_eq!(back, ds);
        let summary = check_dataset_dir(dir.path()).unwrap();
        assert_eq!(summary.nodes, 50);
        assert_eq!(summary.undirected_edges * 2, ds.graph.num_edges());
    }

    #[test]
    fn overlapping_masks_name_the_node() {
        let ds = gen_sbm(20, 2, 0.3, 0.05, 2, 0.1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let v = ds.masks.train[0];
        let masks = format!("{}\n{}\n{} {}\n", join_ids(&ds.masks.train), join_ids(&ds.masks.val), join_ids(&ds.masks.test), v);
        fs::write(dir.path().join("masks.csv"), masks).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&format!("node {v}")), "{err}");
        assert!(err.contains("masks.csv"), "{err}");
    }

    #[test]
    fn ragged_features_and_bad_labels() {
        let ds = gen_sbm(10, 2, 0.3, 0.05, 2, 0.1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::write(dir.path().join("labels.csv"), "# classes: 2\n0\n1\n0\n1\n0\n1\n0\n1\n0\n7\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("labels.csv"), "{err}");
        fs::write(dir.path().join("features.csv"), "1,2\n3\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        fs::remove_file(dir.path().join("edges.tsv")).unwrap();
        fs::write(dir.path().join("features.csv"), "1,2\n3,4\n").unwrap();
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("edges.tsv"));
    }
}
