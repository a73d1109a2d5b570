//! 1-WL color refinement, used as an independent oracle for embedding
//! equality between nodes.
//!
//! A node's signature at round `r + 1` is its own round-`r` color plus the
//! sorted multiset of `(color, Ã weight)` over its closed neighborhood.
//! Signatures are mapped to dense ids in sorted order, so colors do not
//! depend on node numbering.

use std::collections::BTreeMap;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::linalg::DenseMatrix;
use crate::model::{forward_full, Activation, Arch, GnnModel, LEAKY_SLOPE};
use crate::seed;

const WEIGHT_SCALE: f64 = 1e12;

/// Colors of every node after each refinement round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColorTable {
    rounds: Vec<Vec<usize>>,
}

impl ColorTable {
    /// Number of refinement rounds performed (round 0 is the feature hash).
    pub fn num_rounds(&self) -> usize {
        self.rounds.len() - 1
    }

    pub fn colors(&self, round: usize) -> &[usize] {
        &self.rounds[round]
    }

    pub fn final_colors(&self) -> &[usize] {
        self.rounds.last().expect("round 0 always present")
    }

    pub fn num_classes(&self, round: usize) -> usize {
        self.rounds[round].iter().max().map_or(0, |&m| m + 1)
    }

    /// Nodes grouped by color, ordered by color id.
    pub fn classes(&self, round: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes(round)];
        for (v, &c) in self.rounds[round].iter().enumerate() {
            out[c].push(v);
        }
        out
    }
}

fn canonical<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut ids = BTreeMap::new();
    for k in keys {
        ids.entry(k.clone()).or_insert(0usize);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    keys.iter().map(|k| ids[k]).collect()
}

fn feature_key(row: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 are the same feature value
    row.iter().map(|&v| if v == 0.0 { 0 } else { v.to_bits() }).collect()
}

/// Refine for `rounds` rounds. Round 0 colors hash feature rows by exact
/// value equality.
pub fn wl_refine(g: &SparseGraph, x: &DenseMatrix, rounds: usize) -> Result<ColorTable> {
    let n = g.num_nodes();
    if x.rows() != n {
        return Err(Error::dims("wl_refine: feature rows", n, x.rows()));
    }
    let keys: Vec<Vec<u64>> = (0..n).map(|i| feature_key(x.row(i))).collect();
    let mut table = vec![canonical(&keys)];
    let norm = g.normalized();
    for _ in 0..rounds {
        let prev = table.last().expect("non-empty");
        let sigs: Vec<(usize, Vec<(usize, i64)>)> = (0..n)
            .map(|i| {
                let (cols, vals) = norm.row(i);
                let mut ms: Vec<(usize, i64)> = cols
                    .iter()
                    .zip(vals)
                    .map(|(&u, &w)| (prev[u], (w * WEIGHT_SCALE).round() as i64))
                    .collect();
                ms.sort_unstable();
                (prev[i], ms)
            })
            .collect();
        table.push(canonical(&sigs));
    }
    Ok(ColorTable { rounds: table })
}

/// Refine until the class count stops growing.
pub fn wl_refine_stable(g: &SparseGraph, x: &DenseMatrix) -> Result<ColorTable> {
    let mut table = wl_refine(g, x, 0)?;
    loop {
        let r = table.num_rounds();
        let next = wl_refine(g, x, r + 1)?;
        if next.num_classes(r + 1) == table.num_classes(r) {
            return Ok(table);
        }
        table = next;
    }
}

/// Outcome of checking that equal colors give equal embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorInvarianceReport {
    /// Same-color pairs compared per trial (each node against its class representative).
    pub pairs: usize,
    pub trials: usize,
    /// Largest row gap over all pairs and trials.
    pub max_gap: f64,
    /// Pair-trials with a gap above the tolerance.
    pub violations: usize,
}

/// Outcome of checking that distinct colors give distinct embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationReport {
    pub pairs: usize,
    pub trials: usize,
    /// Fraction of trials separating each checked pair.
    pub separated_fraction: Vec<f64>,
    /// Fraction of pairs separated in every trial.
    pub all_trials_fraction: f64,
}

pub const INVARIANCE_TOL: f64 = 1e-9;
pub const SEPARATION_TOL: f64 = 1e-6;

fn random_layer(
    g: &SparseGraph,
    x: &DenseMatrix,
    arch: Arch,
    width: usize,
    rounds: usize,
    seed: u64,
) -> Result<DenseMatrix> {
    let mut dims = vec![x.cols()];
    dims.extend(std::iter::repeat_n(width, rounds));
    let model = GnnModel::init(arch, &dims, Activation::LeakyRelu(LEAKY_SLOPE), seed)?.with_output_activation(true);
    Ok(forward_full(&model, g, x)?.0)
}

fn row_gap(h: &DenseMatrix, i: usize, j: usize) -> f64 {
    h.row(i).iter().zip(h.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Compare layer-`rounds` embeddings of `trials` random LeakyReLU models
/// within every round-`rounds` color class.
pub fn check_color_invariance(
    g: &SparseGraph,
    x: &DenseMatrix,
    arch: Arch,
    width: usize,
    rounds: usize,
    trials: usize,
    seed: u64,
) -> Result<ColorInvarianceReport> {
    let table = wl_refine(g, x, rounds)?;
    let classes = table.classes(rounds);
    let pairs = classes.iter().map(|c| c.len().saturating_sub(1)).sum();
    let mut max_gap = 0.0f64;
    let mut violations = 0;
    for t in 0..trials {
        let h = random_layer(g, x, arch, width, rounds, seed::derive_indexed(seed, "invariance", t as u64))?;
        for class in &classes {
            for &v in &class[1..] {
                let gap = row_gap(&h, class[0], v);
                max_gap = max_gap.max(gap);
                violations += usize::from(gap > INVARIANCE_TOL);
            }
        }
    }
    Ok(ColorInvarianceReport {
        pairs,
        trials,
        max_gap,
        violations,
    })
}

/// For distinct-color pairs at round `rounds` (all of them, or `max_pairs`
/// sampled uniformly), the fraction of random GCN draws whose
/// layer-`rounds` rows differ by more than [`SEPARATION_TOL`].
pub fn check_color_separation(
    g: &SparseGraph,
    x: &DenseMatrix,
    width: usize,
    rounds: usize,
    trials: usize,
    max_pairs: Option<usize>,
    seed: u64,
) -> Result<SeparationReport> {
    let table = wl_refine(g, x, rounds)?;
    let colors = table.colors(rounds);
    let n = g.num_nodes();
    let mut all_pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if colors[i] != colors[j] {
                all_pairs.push((i, j));
            }
        }
    }
    let pairs = match max_pairs {
        Some(m) if m < all_pairs.len() => {
            let mut rng = seed::rng(seed::derive(seed, "pairs"));
            let mut picked = index::sample(&mut rng, all_pairs.len(), m).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|p| all_pairs[p]).collect()
        }
        _ => all_pairs,
    };
    let mut hits = vec![0usize; pairs.len()];
    for t in 0..trials {
        let h = random_layer(g, x, Arch::Gcn, width, rounds, seed::derive_indexed(seed, "separation", t as u64))?;
        for (hit, &(i, j)) in hits.iter_mut().zip(&pairs) {
            *hit += usize::from(row_gap(&h, i, j) > SEPARATION_TOL);
        }
    }
    let denom = trials.max(1) as f64;
    let separated_fraction: Vec<f64> = hits.iter().map(|&h| h as f64 / denom).collect();
    let all = hits.iter().filter(|&&h| h == trials).count();
    Ok(SeparationReport {
        pairs: pairs.len(),
        trials,
        all_trials_fraction: if pairs.is_empty() { 1.0 } else { all as f64 / pairs.len() as f64 },
        separated_fraction,
    })
}
