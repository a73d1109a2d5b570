//! Mini-batch training loop, layer-wise inference and approximation metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::baseline::{forward_gas, HistoryStore};
use crate::compensation::{precompute_with, BasicEmbeddings, Compensation, PrecomputeConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{BatchContext, SparseGraph};
use crate::linalg::{spmm, DenseMatrix};
use crate::model::{
    accuracy, backward, forward_batch, forward_full, softmax_xent, BatchMode, ForwardTape, GnnModel, Gradients,
};
use crate::sampler::Partition;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Whole-graph gradient descent, one step per epoch.
    Full,
    /// Mini-batches without out-of-batch messages.
    Plain,
    /// Mini-batches with historical boundary embeddings.
    Gas,
    /// Mini-batches with topological compensation.
    Top,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Plain => "plain",
            Method::Gas => "gas",
            Method::Top => "top",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "plain" | "cluster" => Ok(Self::Plain),
            "gas" => Ok(Self::Gas),
            "top" => Ok(Self::Top),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub lr: f64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
    /// Partition clusters merged into one batch.
    pub clusters_per_batch: usize,
    /// Steps between metric rows; 0 means once per epoch.
    pub eval_every: usize,
    /// Epochs between compensation refits from the current model; 0 disables.
    pub refresh_every: usize,
    /// Drop validation and test nodes from the batches.
    pub remove_eval_nodes: bool,
    /// Fill the history with exact embeddings before training (GAS only).
    pub gas_warm_start: bool,
    /// Node chunk for layer-wise evaluation.
    pub eval_chunk: usize,
    /// Seconds added to every wall-clock entry, e.g. preprocessing time.
    pub wall_offset_s: f64,
    /// Write 0 for wall-clock time so metric files are reproducible.
    pub deterministic_time: bool,
}

impl TrainConfig {
    pub fn new(method: Method, epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            method,
            epochs,
            lr,
            momentum: 0.0,
            seed,
            clusters_per_batch: 1,
            eval_every: 0,
            refresh_every: 0,
            remove_eval_nodes: false,
            gas_warm_start: false,
            eval_chunk: 1024,
            wall_offset_s: 0.0,
            deterministic_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.clusters_per_batch == 0 || self.eval_chunk == 0 {
            return Err(Error::InvalidArgument("clusters_per_batch and eval_chunk must be positive".into()));
        }
        Ok(())
    }
}

/// One evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    /// Whole-graph training loss at this point.
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub wall_s: f64,
    /// Largest number of embedding rows a single step has read so far.
    pub peak_embeddings: usize,
}

pub const METRICS_HEADER: &str = "step,epoch,loss,train_acc,val_acc,test_acc,wall_s,peak_embeddings";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?},{:?},{}",
            r.step, r.epoch, r.loss, r.train_acc, r.val_acc, r.test_acc, r.wall_s, r.peak_embeddings
        )
        .expect("write to String");
    }
    out
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// The batches training iterates over: partition clusters merged
/// `clusters_per_batch` at a time (seeded by `derive(seed, "group")`),
/// optionally restricted to training nodes. Compensations for `top` must
/// be built for exactly these batches.
pub fn training_batches(partition: &Partition, cfg: &TrainConfig, ds: &Dataset) -> Result<Partition> {
    let mut p = partition.group(cfg.clusters_per_batch, seed::derive(cfg.seed, "group"))?;
    if cfg.remove_eval_nodes {
        let mut is_train = vec![false; ds.num_nodes()];
        for &v in &ds.masks.train {
            is_train[v] = true;
        }
        p.clusters = p
            .clusters
            .into_iter()
            .map(|c| c.into_iter().filter(|&v| is_train[v]).collect::<Vec<_>>())
            .filter(|c| !c.is_empty())
            .collect();
    }
    Ok(p)
}

/// All layer inputs and the output, `[H^(0), …, H^(L)]`, computed one
/// layer at a time over node chunks of `chunk` rows.
pub fn layerwise_embeddings(model: &GnnModel, g: &SparseGraph, x: &DenseMatrix, chunk: usize) -> Result<Vec<DenseMatrix>> {
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk size must be positive".into()));
    }
    let n = g.num_nodes();
    if x.rows() != n || x.cols() != model.dims()[0] {
        return Err(Error::dims("layerwise inference: features", format!("{n}x{}", model.dims()[0]), format!("{}x{}", x.rows(), x.cols())));
    }
    let op = g.operator(model.arch().propagation());
    let mut out = vec![x.clone()];
    for (l, layer) in model.layers().iter().enumerate() {
        let h = out.last().expect("non-empty");
        let act = model.layer_activation(l);
        let mut next = DenseMatrix::zeros(n, layer.weight.cols());
        let rows: Vec<usize> = (0..n).collect();
        for part in rows.chunks(chunk) {
            let z = spmm(&op.select_rows(part), h)?;
            let mut p = z.dot(&layer.weight);
            if let Some(w_nbr) = &layer.weight_nbr {
                p = h.select_rows(part).dot(&layer.weight).add(&z.dot(w_nbr));
            }
            for (r, &v) in part.iter().enumerate() {
                for (o, &val) in next.row_mut(v).iter_mut().zip(p.row(r)) {
                    *o = act.apply(val);
                }
            }
        }
        out.push(next);
    }
    Ok(out)
}

/// Whole-graph output computed layer by layer in node chunks.
pub fn layerwise_inference(model: &GnnModel, g: &SparseGraph, x: &DenseMatrix, chunk: usize) -> Result<DenseMatrix> {
    Ok(layerwise_embeddings(model, g, x, chunk)?.pop().expect("input layer present"))
}

/// `sqrt(Σ_i ‖H*_{B_i} − H_{B_i}‖²_F) / ‖H*‖_F` over disjoint batches.
pub fn relative_approx_error(h_star: &DenseMatrix, batches: &[(Vec<usize>, DenseMatrix)]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut num = 0.0;
    for (nodes, h) in batches {
        let diff = h_star.select_rows(nodes).sub(h);
        num += diff.frobenius_norm().powi(2);
    }
    Ok(num.sqrt() / h_star.frobenius_norm())
}

/// Mean over batches of full-output accuracy minus batch-output accuracy.
pub fn accuracy_degradation(h_star: &DenseMatrix, batches: &[(Vec<usize>, DenseMatrix)], labels: &[usize]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (nodes, h) in batches {
        if nodes.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let local: Vec<usize> = (0..nodes.len()).collect();
        let y: Vec<usize> = nodes.iter().map(|&v| labels[v]).collect();
        total += accuracy(&h_star.select_rows(nodes), &y, &local) - accuracy(h, &y, &local);
    }
    Ok(total / batches.len() as f64)
}

/// Whole-graph mean loss over the training mask and its gradient.
pub fn full_loss_grad(model: &GnnModel, ds: &Dataset) -> Result<(f64, Gradients)> {
    let (logits, tape) = forward_full(model, &ds.graph, &ds.features)?;
    let (loss, grad) = softmax_xent(&logits, &ds.labels, &ds.masks.train)?;
    Ok((loss, backward(model, &tape, &grad)?.0))
}

/// Positions of training nodes within a batch.
pub fn local_train_mask(batch: &[usize], is_train: &[bool]) -> Vec<usize> {
    batch.iter().enumerate().filter(|(_, &v)| is_train[v]).map(|(p, _)| p).collect()
}

/// Mean loss over the batch's training nodes and its gradient, or `None`
/// when the batch holds no training node.
pub fn batch_loss_grad(
    model: &GnnModel,
    ds: &Dataset,
    ctx: &BatchContext,
    mode: BatchMode<'_>,
) -> Result<Option<(f64, Gradients)>> {
    let mut is_train = vec![false; ds.num_nodes()];
    ds.masks.train.iter().for_each(|&v| is_train[v] = true);
    let mask = local_train_mask(ctx.batch(), &is_train);
    if mask.is_empty() {
        return Ok(None);
    }
    let (logits, tape) = forward_batch(model, ctx, &ds.features.select_rows(ctx.batch()), mode)?;
    let labels: Vec<usize> = ctx.batch().iter().map(|&v| ds.labels[v]).collect();
    let (loss, grad) = softmax_xent(&logits, &labels, &mask)?;
    Ok(Some((loss, backward(model, &tape, &grad)?.0)))
}

/// Everything [`train`] needs besides the config and the model.
#[derive(Clone, Copy, Debug)]
pub struct TrainInputs<'a> {
    pub data: &'a Dataset,
    /// Batches from [`training_batches`]; required for mini-batch methods.
    pub batches: Option<&'a Partition>,
    /// One per batch, in batch order; required for `top`.
    pub comps: Option<&'a [Compensation]>,
    /// Settings for refits when `refresh_every` is set.
    pub refresh: Option<&'a PrecomputeConfig>,
}

struct Optimizer {
    lr: f64,
    momentum: f64,
    velocity: Option<Gradients>,
}

impl Optimizer {
    fn step(&mut self, model: &mut GnnModel, grads: &Gradients) {
        if self.momentum == 0.0 {
            model.apply_update(grads, self.lr);
            return;
        }
        let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(model));
        for (vi, gi) in v.params_mut().into_iter().zip(grads.params()) {
            *vi = vi.scale(self.momentum);
            vi.add_assign(gi);
        }
        model.apply_update(v, self.lr);
    }
}

fn evaluate(model: &GnnModel, ds: &Dataset, chunk: usize) -> Result<(f64, f64, f64, f64)> {
    let logits = layerwise_inference(model, &ds.graph, &ds.features, chunk)?;
    let loss = if ds.masks.train.is_empty() {
        0.0
    } else {
        softmax_xent(&logits, &ds.labels, &ds.masks.train)?.0
    };
    Ok((
        loss,
        accuracy(&logits, &ds.labels, &ds.masks.train),
        accuracy(&logits, &ds.labels, &ds.masks.val),
        accuracy(&logits, &ds.labels, &ds.masks.test),
    ))
}

/// Run training. A metric row is written before the first step, every
/// `eval_every` steps (or once per epoch) and after the last step.
/// Mini-batch methods sample a batch uniformly with replacement at each
/// step; an epoch is as many steps as there are batches.
pub fn train(cfg: &TrainConfig, model: &GnnModel, inputs: TrainInputs<'_>) -> Result<(GnnModel, Vec<MetricsRow>)> {
    cfg.validate()?;
    let ds = inputs.data;
    ds.validate()?;
    let start = Instant::now();
    let wall = |start: &Instant| {
        if cfg.deterministic_time {
            0.0
        } else {
            cfg.wall_offset_s + start.elapsed().as_secs_f64()
        }
    };
    let mut model = model.clone();
    let mut opt = Optimizer {
        lr: cfg.lr,
        momentum: cfg.momentum,
        velocity: None,
    };
    let mut rows = Vec::new();
    let mut peak = 0usize;
    let record = |model: &GnnModel, step: usize, epoch: usize, peak: usize, rows: &mut Vec<MetricsRow>| -> Result<()> {
        let (loss, train_acc, val_acc, test_acc) = evaluate(model, ds, cfg.eval_chunk)?;
        rows.push(MetricsRow {
            step,
            epoch,
            loss,
            train_acc,
            val_acc,
            test_acc,
            wall_s: wall(&start),
            peak_embeddings: peak,
        });
        Ok(())
    };

    if cfg.method == Method::Full {
        let eval_every = if cfg.eval_every == 0 { 1 } else { cfg.eval_every };
        record(&model, 0, 0, peak, &mut rows)?;
        for step in 1..=cfg.epochs {
            let (logits, tape) = forward_full(&model, &ds.graph, &ds.features)?;
            peak = peak.max(tape.embeddings_touched);
            let (_, grad) = softmax_xent(&logits, &ds.labels, &ds.masks.train)?;
            let (grads, _) = backward(&model, &tape, &grad)?;
            opt.step(&mut model, &grads);
            if step % eval_every == 0 || step == cfg.epochs {
                record(&model, step, step, peak, &mut rows)?;
            }
        }
        return Ok((model, rows));
    }

    let batches = inputs
        .batches
        .ok_or_else(|| Error::InvalidArgument(format!("method `{}` needs a partition", cfg.method.name())))?;
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batches.validate(ds.num_nodes())?;
    let ctxs = batches
        .clusters
        .iter()
        .map(|c| BatchContext::new(&ds.graph, c))
        .collect::<Result<Vec<_>>>()?;
    let mut comps: Vec<Compensation> = Vec::new();
    if cfg.method == Method::Top {
        let given = inputs.comps.ok_or_else(|| Error::MissingCompensation(cfg.method.name().into()))?;
        if given.len() != ctxs.len() || given.iter().zip(&ctxs).any(|(c, x)| c.batch() != x.batch()) {
            return Err(Error::CompensationMismatch);
        }
        comps = given.to_vec();
    }
    if cfg.refresh_every > 0 && cfg.method == Method::Top && inputs.refresh.is_none() {
        return Err(Error::InvalidArgument("refresh_every needs compensation settings".into()));
    }
    let mut hist = match cfg.method {
        Method::Gas if cfg.gas_warm_start => Some(HistoryStore::warm_start(&model, &ds.graph, &ds.features, cfg.eval_chunk)?),
        Method::Gas => Some(HistoryStore::zeros(ds.num_nodes(), &model)),
        _ => None,
    };
    let mut is_train = vec![false; ds.num_nodes()];
    ds.masks.train.iter().for_each(|&v| is_train[v] = true);
    let masks: Vec<Vec<usize>> = ctxs.iter().map(|c| local_train_mask(c.batch(), &is_train)).collect();
    let labels: Vec<Vec<usize>> = ctxs.iter().map(|c| c.batch().iter().map(|&v| ds.labels[v]).collect()).collect();
    let feats: Vec<DenseMatrix> = ctxs.iter().map(|c| ds.features.select_rows(c.batch())).collect();

    let steps_per_epoch = ctxs.len();
    let total = steps_per_epoch * cfg.epochs;
    let eval_every = if cfg.eval_every == 0 { steps_per_epoch } else { cfg.eval_every };
    let mut rng = seed::rng(seed::derive(cfg.seed, "sample"));
    record(&model, 0, 0, peak, &mut rows)?;
    for step in 1..=total {
        let epoch = (step - 1) / steps_per_epoch + 1;
        if cfg.method == Method::Top
            && cfg.refresh_every > 0
            && epoch > 1
            && (step - 1) % steps_per_epoch == 0
            && (epoch - 1) % cfg.refresh_every == 0
        {
            let refit = inputs.refresh.expect("checked above");
            let act = model.clone().with_output_activation(true);
            let hbar = BasicEmbeddings::from_models(&ds.graph, &ds.features, &[act])?;
            comps = precompute_with(&ds.graph, &hbar, batches, model.arch().propagation(), refit)?.compensations;
        }
        let b = rng.random_range(0..steps_per_epoch);
        if let Some(h) = hist.as_mut() {
            h.tick();
        }
        let ctx = &ctxs[b];
        let (logits, tape): (DenseMatrix, ForwardTape<'_>) = match cfg.method {
            Method::Plain => forward_batch(&model, ctx, &feats[b], BatchMode::Plain)?,
            Method::Top => forward_batch(&model, ctx, &feats[b], BatchMode::Compensated(&comps[b]))?,
            Method::Gas => forward_gas(&model, ctx, &feats[b], hist.as_mut().expect("gas history"))?,
            Method::Full => unreachable!("handled above"),
        };
        peak = peak.max(tape.embeddings_touched);
        if !masks[b].is_empty() {
            let (_, grad) = softmax_xent(&logits, &labels[b], &masks[b])?;
            let (grads, _) = backward(&model, &tape, &grad)?;
            opt.step(&mut model, &grads);
        }
        if step % eval_every == 0 || step == total {
            record(&model, step, epoch, peak, &mut rows)?;
        }
    }
    Ok((model, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compensation::{precompute_all, CompMode};
    use crate::dataset::{gen_duplication, gen_double_star, gen_sbm};
    use crate::model::{Activation, Arch};
    use crate::sampler::{locality_partition, random_partition};

    fn random_graph(n: usize, p: f64, seed: u64) -> SparseGraph {
        let mut rng = seed::rng(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        SparseGraph::build(n, &edges, true).unwrap()
    }

    #[test]
    fn layerwise_matches_full() {
        for (n, chunk) in [(6, 1), (50, 7), (50, 50)] {
            let g = random_graph(n, 0.15, n as u64);
            let x = DenseMatrix::gaussian(n, 3, &mut seed::rng(1));
            for arch in [Arch::Gcn, Arch::SageMean] {
                let m = GnnModel::init(arch, &[3, 5, 4, 2], Activation::Relu, 4).unwrap();
                let full = forward_full(&m, &g, &x).unwrap().0;
                let lw = layerwise_inference(&m, &g, &x, chunk).unwrap();
                assert!(lw.max_abs_diff(&full) < 1e-10);
            }
        }
        let g = random_graph(5, 0.5, 1);
        let m = GnnModel::init(Arch::Gcn, &[3, 2], Activation::Relu, 4).unwrap();
        assert!(layerwise_inference(&m, &g, &DenseMatrix::zeros(5, 3), 0).is_err());
    }

    #[test]
    fn approx_error_edges() {
        let h = DenseMatrix::gaussian(6, 3, &mut seed::rng(2));
        let split = |m: &DenseMatrix| vec![(vec![0, 1, 2], m.select_rows(&[0, 1, 2])), (vec![3, 4, 5], m.select_rows(&[3, 4, 5]))];
        assert_eq!(relative_approx_error(&h, &split(&h)).unwrap(), 0.0);
        let zero = DenseMatrix::zeros(6, 3);
        assert!((relative_approx_error(&h, &split(&zero)).unwrap() - 1.0).abs() < 1e-15);
        assert!(relative_approx_error(&h, &[]).is_err());
    }

    #[test]
    fn approx_error_hand_assembled() {
        let ds = gen_double_star(3, 1).unwrap();
        let m = GnnModel::init(Arch::Gcn, &[3, 4, 2], Activation::Relu, 5).unwrap();
        let full = forward_full(&m, &ds.graph, &ds.features).unwrap().0;
        let batch = vec![0, 1, 2];
        let ctx = BatchContext::new(&ds.graph, &batch).unwrap();
        let plain = forward_batch(&m, &ctx, &ds.features.select_rows(&batch), BatchMode::Plain).unwrap().0;
        let mut num = 0.0;
        for (p, &v) in batch.iter().enumerate() {
            for j in 0..2 {
                num += (full.get(v, j) - plain.get(p, j)).powi(2);
            }
        }
        let mut den = 0.0;
        for v in full.data() {
            den += v * v;
        }
        let want = num.sqrt() / den.sqrt();
        let got = relative_approx_error(&full, &[(batch, plain)]).unwrap();
        assert!((got - want).abs() < 1e-14);
        assert!(got > 0.0);
    }

    #[test]
    fn degradation_edges() {
        let logits = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let flipped = logits.scale(-1.0);
        let labels = [0, 1];
        let b = |m: &DenseMatrix| vec![(vec![0, 1], m.clone())];
        assert_eq!(accuracy_degradation(&logits, &b(&logits), &labels).unwrap(), 0.0);
        assert_eq!(accuracy_degradation(&logits, &b(&flipped), &labels).unwrap(), 1.0);
    }

    fn double_star_setup() -> (Dataset, Partition, Vec<Compensation>) {
        let ds = gen_double_star(4, 3).unwrap();
        let batches = Partition {
            clusters: vec![vec![0, 1, 2], vec![3, 4, 5]],
            method: crate::sampler::PartitionMethod::File,
            seed: 0,
        };
        let mut pc = PrecomputeConfig::new(vec![4, 4, 4], 9);
        pc.mode = CompMode::Exact;
        let comps = precompute_all(&ds.graph, &ds.features, &batches, Arch::Gcn, &pc).unwrap().compensations;
        (ds, batches, comps)
    }

    #[test]
    fn lr_zero_keeps_metrics() {
        let (ds, batches, comps) = double_star_setup();
        let m = GnnModel::init(Arch::Gcn, &[4, 4, 2], Activation::Relu, 1).unwrap();
        let mut cfg = TrainConfig::new(Method::Top, 3, 0.0, 1);
        cfg.deterministic_time = true;
        let inputs = TrainInputs {
            data: &ds,
            batches: Some(&batches),
            comps: Some(&comps),
            refresh: None,
        };
        let (out, rows) = train(&cfg, &m, inputs).unwrap();
        assert_eq!(out, m);
        assert!(rows.windows(2).all(|w| (w[0].loss, w[0].test_acc) == (w[1].loss, w[1].test_acc)));
        assert!(rows.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn top_without_comps_is_an_error() {
        let (ds, batches, _) = double_star_setup();
        let m = GnnModel::init(Arch::Gcn, &[4, 4, 2], Activation::Relu, 1).unwrap();
        let cfg = TrainConfig::new(Method::Top, 1, 0.1, 1);
        let inputs = TrainInputs {
            data: &ds,
            batches: Some(&batches),
            comps: None,
            refresh: None,
        };
        assert!(matches!(train(&cfg, &m, inputs), Err(Error::MissingCompensation(_))));
    }

    #[test]
    fn whole_graph_batch_follows_full_batch_gd() {
        let ds = gen_duplication(6, 2, 0.4, 3, 1).unwrap();
        let all = Partition {
            clusters: vec![(0..12).collect()],
            method: crate::sampler::PartitionMethod::File,
            seed: 0,
        };
        let comps = precompute_all(&ds.graph, &ds.features, &all, Arch::Gcn, &PrecomputeConfig::new(vec![3, 3], 1))
            .unwrap()
            .compensations;
        let m = GnnModel::init(Arch::Gcn, &[3, 4, 2], Activation::Relu, 2).unwrap();
        let mut a = m.clone();
        let mut b = m.clone();
        for _ in 0..10 {
            let cfg = TrainConfig::new(Method::Top, 1, 0.3, 1);
            let inputs = TrainInputs {
                data: &ds,
                batches: Some(&all),
                comps: Some(&comps),
                refresh: None,
            };
            a = train(&cfg, &a, inputs).unwrap().0;
            let (_, g) = full_loss_grad(&b, &ds).unwrap();
            b.apply_update(&g, 0.3);
            let diff = a.params().iter().zip(b.params()).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max);
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn double_star_top_matches_full_batch_accuracy() {
        let (ds, batches, comps) = double_star_setup();
        let m = GnnModel::init(Arch::Gcn, &[4, 8, 2], Activation::Relu, 1).unwrap();
        let mut cfg = TrainConfig::new(Method::Top, 100, 0.2, 1);
        cfg.deterministic_time = true;
        let inputs = TrainInputs {
            data: &ds,
            batches: Some(&batches),
            comps: Some(&comps),
            refresh: None,
        };
        let (_, top_rows) = train(&cfg, &m, inputs).unwrap();
        let full_cfg = TrainConfig { method: Method::Full, ..cfg.clone() };
        let (_, full_rows) = train(&full_cfg, &m, TrainInputs { comps: None, batches: None, ..inputs }).unwrap();
        assert_eq!(top_rows.last().unwrap().train_acc, full_rows.last().unwrap().train_acc);
    }

    #[test]
    fn methods_run_and_log() {
        let ds = gen_sbm(60, 3, 0.3, 0.02, 4, 0.3, 2).unwrap();
        let p = locality_partition(&ds.graph, 6, 1).unwrap();
        let m = GnnModel::init(Arch::SageMean, &[4, 8, 3], Activation::Relu, 1).unwrap();
        let mut pc = PrecomputeConfig::new(vec![4, 4, 4], 3);
        for method in [Method::Full, Method::Plain, Method::Gas, Method::Top] {
            let mut cfg = TrainConfig::new(method, 4, 0.1, 7);
            cfg.clusters_per_batch = 2;
            cfg.momentum = 0.5;
            cfg.refresh_every = 2;
            let batches = training_batches(&p, &cfg, &ds).unwrap();
            pc.k = Some(3);
            let comps = precompute_all(&ds.graph, &ds.features, &batches, Arch::SageMean, &pc).unwrap().compensations;
            let inputs = TrainInputs {
                data: &ds,
                batches: Some(&batches),
                comps: Some(&comps),
                refresh: Some(&pc),
            };
            let (_, rows) = train(&cfg, &m, inputs).unwrap();
            assert!(rows.len() >= 5);
            assert!(rows.iter().all(|r| r.loss.is_finite()));
            let csv = metrics_csv(&rows);
            assert!(csv.starts_with(METRICS_HEADER));
            assert_eq!(csv.lines().count(), rows.len() + 1);
        }
    }

    #[test]
    fn removing_eval_nodes_keeps_only_train() {
        let ds = gen_sbm(40, 2, 0.3, 0.05, 2, 0.3, 2).unwrap();
        let p = random_partition(&(0..40).collect::<Vec<_>>(), 4, 1).unwrap();
        let mut cfg = TrainConfig::new(Method::Plain, 1, 0.1, 1);
        cfg.remove_eval_nodes = true;
        let b = training_batches(&p, &cfg, &ds).unwrap();
        assert_eq!(b.num_nodes(), ds.masks.train.len());
    }
}
