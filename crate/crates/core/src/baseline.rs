//! Reference schemes: plain subgraph training, historical embeddings and
//! full-batch gradient descent.

use crate::error::{Error, Result};
use crate::graph::{BatchContext, SparseGraph};
use crate::linalg::{spmm, DenseMatrix};
use crate::model::{
    backward, forward_batch, forward_full, forward_with_offsets, softmax_xent, BatchMode, ForwardTape, GnnModel,
    Propagation,
};
use crate::train::layerwise_embeddings;

/// Mini-batch forward that drops every out-of-batch message.
pub fn forward_plain_subgraph(model: &GnnModel, ctx: &BatchContext, x_batch: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(forward_batch(model, ctx, x_batch, BatchMode::Plain)?.0)
}

/// Cached per-node embeddings `H^(0) … H^(L-1)` used in place of the
/// fresh boundary embeddings, with a staleness counter per node.
///
/// Layer 0 is cached like the others, so a zero-initialized store sends
/// no boundary messages until nodes have been visited.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryStore {
    tables: Vec<DenseMatrix>,
    staleness: Vec<u64>,
}

impl HistoryStore {
    pub fn zeros(n: usize, model: &GnnModel) -> Self {
        let dims = model.dims();
        Self {
            tables: dims[..dims.len() - 1].iter().map(|&d| DenseMatrix::zeros(n, d)).collect(),
            staleness: vec![0; n],
        }
    }

    /// Fill every table with exact embeddings of `model`.
    pub fn warm_start(model: &GnnModel, g: &SparseGraph, x: &DenseMatrix, chunk: usize) -> Result<Self> {
        let mut layers = layerwise_embeddings(model, g, x, chunk)?;
        layers.pop();
        Ok(Self {
            tables: layers,
            staleness: vec![0; g.num_nodes()],
        })
    }

    pub fn num_layers(&self) -> usize {
        self.tables.len()
    }

    pub fn table(&self, layer: usize) -> &DenseMatrix {
        &self.tables[layer]
    }

    pub fn staleness(&self, node: usize) -> u64 {
        self.staleness[node]
    }

    pub fn max_staleness(&self) -> u64 {
        self.staleness.iter().copied().max().unwrap_or(0)
    }

    /// Age every node by one step.
    pub fn tick(&mut self) {
        self.staleness.iter_mut().for_each(|s| *s += 1);
    }

    fn write(&mut self, layer: usize, nodes: &[usize], rows: &DenseMatrix) {
        for (p, &v) in nodes.iter().enumerate() {
            self.tables[layer].row_mut(v).copy_from_slice(rows.row(p));
        }
    }

    fn reset(&mut self, nodes: &[usize]) {
        for &v in nodes {
            self.staleness[v] = 0;
        }
    }
}

/// Mini-batch forward with boundary messages read from `hist`. Afterwards
/// the batch rows of every table hold the fresh embeddings and their
/// staleness is reset.
pub fn forward_gas<'a>(
    model: &GnnModel,
    ctx: &'a BatchContext,
    x_batch: &DenseMatrix,
    hist: &mut HistoryStore,
) -> Result<(DenseMatrix, ForwardTape<'a>)> {
    if hist.num_layers() != model.num_layers() {
        return Err(Error::dims("forward_gas: history layers", model.num_layers(), hist.num_layers()));
    }
    let blocks = ctx.blocks(model.arch().propagation());
    let boundary = ctx.boundary();
    let snapshot = &*hist;
    let (out, mut tape) = forward_with_offsets(model, Propagation::Sparse(&blocks.inner), x_batch, |l| {
        if boundary.is_empty() {
            return Ok(None);
        }
        Ok(Some(spmm(&blocks.outer, &snapshot.table(l).select_rows(boundary))?))
    })?;
    tape.embeddings_touched += boundary.len() * model.num_layers();
    for (l, h) in tape.inputs.iter().enumerate() {
        hist.write(l, ctx.batch(), h);
    }
    hist.reset(ctx.batch());
    Ok((out, tape))
}

/// Gradient descent on the whole-graph loss over `train`. Returns the
/// trained model and the loss before each update.
pub fn train_full_batch(
    model: &GnnModel,
    g: &SparseGraph,
    x: &DenseMatrix,
    labels: &[usize],
    train: &[usize],
    epochs: usize,
    lr: f64,
) -> Result<(GnnModel, Vec<f64>)> {
    let mut model = model.clone();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (logits, tape) = forward_full(&model, g, x)?;
        let (loss, grad) = softmax_xent(&logits, labels, train)?;
        let (grads, _) = backward(&model, &tape, &grad)?;
        model.apply_update(&grads, lr);
        losses.push(loss);
    }
    Ok((model, losses))
}

/// Embedding reads of a recursive neighborhood expansion without caching:
/// every node at every depth requests its own and its in-neighbors'
/// previous-layer embeddings. Saturates at `u64::MAX`.
pub fn recursive_expansion_accesses(g: &SparseGraph, batch: &[usize], layers: usize) -> Result<u64> {
    let n = g.num_nodes();
    let mut demand = vec![0u64; n];
    for &v in batch {
        if v >= n {
            return Err(Error::NodeOutOfRange { index: v, n });
        }
        demand[v] += 1;
    }
    let mut total = 0u64;
    for _ in 0..layers {
        let mut next = demand.clone();
        for (i, &d) in demand.iter().enumerate() {
            if d == 0 {
                continue;
            }
            for &j in g.neighbors(i) {
                next[j] = next[j].saturating_add(d);
            }
        }
        total = next.iter().fold(total, |t, &d| t.saturating_add(d));
        demand = next;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_double_star, gen_sbm};
    use crate::model::{accuracy, Activation, Arch};

    #[test]
    fn whole_graph_batch_is_full() {
        let ds = gen_sbm(30, 3, 0.3, 0.05, 4, 0.3, 1).unwrap();
        let m = GnnModel::init(Arch::Gcn, &[4, 5, 3], Activation::Relu, 2).unwrap();
        let all: Vec<usize> = (0..30).collect();
        let ctx = BatchContext::new(&ds.graph, &all).unwrap();
        let plain = forward_plain_subgraph(&m, &ctx, &ds.features).unwrap();
        let full = forward_full(&m, &ds.graph, &ds.features).unwrap().0;
        assert!(plain.max_abs_diff(&full) < 1e-12);
    }

    #[test]
    fn plain_misses_boundary_message() {
        let ds = gen_double_star(3, 1).unwrap();
        let m = GnnModel::init(Arch::Gcn, &[3, 4, 2], Activation::Relu, 3).unwrap();
        let batch = [0, 1, 2];
        let ctx = BatchContext::new(&ds.graph, &batch).unwrap();
        let plain = forward_plain_subgraph(&m, &ctx, &ds.features.select_rows(&batch)).unwrap();
        let full = forward_full(&m, &ds.graph, &ds.features).unwrap().0;
        let gap: f64 = plain.row(2).iter().zip(full.row(2)).map(|(a, b)| (a - b).abs()).sum();
        assert!(gap > 1e-6);
    }

    #[test]
    fn disconnected_batch_matches_full() {
        let ds = gen_sbm(40, 2, 0.4, 0.0, 3, 0.2, 3).unwrap();
        let m = GnnModel::init(Arch::SageMean, &[3, 4, 2], Activation::Relu, 3).unwrap();
        let batch: Vec<usize> = (0..20).collect();
        let ctx = BatchContext::new(&ds.graph, &batch).unwrap();
        assert!(ctx.boundary().is_empty());
        let plain = forward_plain_subgraph(&m, &ctx, &ds.features.select_rows(&batch)).unwrap();
        let full = forward_full(&m, &ds.graph, &ds.features).unwrap().0;
        assert!(plain.max_abs_diff(&full.select_rows(&batch)) < 1e-12);
    }

    #[test]
    fn zero_history_equals_plain() {
        let ds = gen_double_star(3, 1).unwrap();
        let m = GnnModel::init(Arch::Gcn, &[3, 4, 2], Activation::Relu, 3).unwrap();
        let batch = [0, 1, 2];
        let ctx = BatchContext::new(&ds.graph, &batch).unwrap();
        let xb = ds.features.select_rows(&batch);
        let mut hist = HistoryStore::zeros(6, &m);
        let (gas, _) = forward_gas(&m, &ctx, &xb, &mut hist).unwrap();
        assert!(gas.max_abs_diff(&forward_plain_subgraph(&m, &ctx, &xb).unwrap()) < 1e-15);
        assert_eq!(hist.table(0).row(1), ds.features.row(1));
    }

    #[test]
    fn frozen_weights_exact_after_one_epoch() {
        let ds = gen_sbm(40, 2, 0.3, 0.05, 3, 0.3, 5).unwrap();
        let m = GnnModel::init(Arch::Gcn, &[3, 4, 2], Activation::Relu, 3).unwrap();
        let full = forward_full(&m, &ds.graph, &ds.features).unwrap().0;
        let clusters: [Vec<usize>; 2] = [(0..20).collect(), (20..40).collect()];
        let ctxs: Vec<BatchContext> = clusters.iter().map(|c| BatchContext::new(&ds.graph, c).unwrap()).collect();
        let mut hist = HistoryStore::zeros(40, &m);
        for ctx in &ctxs {
            forward_gas(&m, ctx, &ds.features.select_rows(ctx.batch()), &mut hist).unwrap();
        }
        for ctx in &ctxs {
            hist.tick();
            let (out, _) = forward_gas(&m, ctx, &ds.features.select_rows(ctx.batch()), &mut hist).unwrap();
            assert!(out.max_abs_diff(&full.select_rows(ctx.batch())) < 1e-6);
            assert_eq!(hist.staleness(ctx.batch()[0]), 0);
        }
        assert!(hist.max_staleness() <= 1);
    }

    #[test]
    fn updated_weights_make_history_stale() {
        let ds = gen_sbm(40, 2, 0.3, 0.05, 3, 0.3, 5).unwrap();
        let mut m = GnnModel::init(Arch::Gcn, &[3, 4, 2], Activation::Relu, 3).unwrap();
        let clusters: [Vec<usize>; 2] = [(0..20).collect(), (20..40).collect()];
        let ctxs: Vec<BatchContext> = clusters.iter().map(|c| BatchContext::new(&ds.graph, c).unwrap()).collect();
        let mut hist = HistoryStore::zeros(40, &m);
        for _ in 0..2 {
            for ctx in &ctxs {
                forward_gas(&m, ctx, &ds.features.select_rows(ctx.batch()), &mut hist).unwrap();
            }
        }
        for w in m.params_mut() {
            *w = w.scale(1.5);
        }
        let full = forward_full(&m, &ds.graph, &ds.features).unwrap().0;
        let (out, _) = forward_gas(&m, &ctxs[0], &ds.features.select_rows(ctxs[0].batch()), &mut hist).unwrap();
        assert!(out.max_abs_diff(&full.select_rows(ctxs[0].batch())) > 1e-6);
    }

    #[test]
    fn warm_start_is_exact_immediately() {
        let ds = gen_sbm(30, 3, 0.3, 0.05, 3, 0.3, 2).unwrap();
        let m = GnnModel::init(Arch::SageMean, &[3, 4, 4, 2], Activation::Relu, 1).unwrap();
        let mut hist = HistoryStore::warm_start(&m, &ds.graph, &ds.features, 7).unwrap();
        let batch: Vec<usize> = (5..15).collect();
        let ctx = BatchContext::new(&ds.graph, &batch).unwrap();
        let (out, _) = forward_gas(&m, &ctx, &ds.features.select_rows(&batch), &mut hist).unwrap();
        let full = forward_full(&m, &ds.graph, &ds.features).unwrap().0;
        assert!(out.max_abs_diff(&full.select_rows(&batch)) < 1e-10);
    }

    #[test]
    fn full_batch_training() {
        let ds = gen_sbm(20, 2, 0.5, 0.05, 2, 0.3, 7).unwrap();
        let m = GnnModel::init(Arch::Gcn, &[2, 8, 2], Activation::Relu, 1).unwrap();
        let (same, _) = train_full_batch(&m, &ds.graph, &ds.features, &ds.labels, &ds.masks.train, 5, 0.0).unwrap();
        assert_eq!(same, m);
        let (trained, losses) = train_full_batch(&m, &ds.graph, &ds.features, &ds.labels, &ds.masks.train, 200, 0.5).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let logits = forward_full(&trained, &ds.graph, &ds.features).unwrap().0;
        assert!(accuracy(&logits, &ds.labels, &ds.masks.train) >= 0.95);
    }

    #[test]
    fn recursive_expansion_on_path() {
        // path 0-1-2, batch {0}: depth 1 reads {0,1}; depth 2 reads {0,1} from 0 and {0,1,2} from 1
        let g = SparseGraph::build(3, &[(0, 1), (1, 2)], true).unwrap();
        assert_eq!(recursive_expansion_accesses(&g, &[0], 0).unwrap(), 0);
        assert_eq!(recursive_expansion_accesses(&g, &[0], 1).unwrap(), 2);
        assert_eq!(recursive_expansion_accesses(&g, &[0], 2).unwrap(), 2 + 5);
        assert!(recursive_expansion_accesses(&g, &[3], 1).is_err());
    }

    #[test]
    fn convex_linear_model_descends() {
        // one linear layer with softmax cross-entropy is convex in W
        let ds = gen_sbm(30, 3, 0.3, 0.05, 4, 0.5, 4).unwrap();
        let m = GnnModel::init(Arch::Gcn, &[4, 3], Activation::Identity, 9).unwrap();
        let (_, losses) = train_full_batch(&m, &ds.graph, &ds.features, &ds.labels, &ds.masks.train, 100, 0.1).unwrap();
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }
}
