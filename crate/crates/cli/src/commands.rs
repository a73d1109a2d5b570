//! Subcommand bodies. Each writes its outputs plus `<command>.manifest`
//! under `--out`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use topcomp_core::baseline::{forward_gas, HistoryStore};
use topcomp_core::compensation::{precompute_all, read_cache, write_cache, CacheHeader, SampleMode};
use topcomp_core::dataset::{check_dataset_dir, gen_duplication, gen_double_star, gen_sbm, load_dataset, save_dataset};
use topcomp_core::model::{accuracy, forward_batch, read_checkpoint, softmax_xent, write_checkpoint, Activation, BatchMode};
use topcomp_core::sampler::{
    locality_partition, random_partition, random_walk_partition, read_partition, write_partition, PartitionMethod,
};
use topcomp_core::train::{
    accuracy_degradation, layerwise_inference, relative_approx_error, train as run_training, training_batches,
    write_metrics, TrainInputs,
};
use topcomp_core::{
    seed, Arch, BatchContext, CompMode, Compensation, Dataset, DenseMatrix, GnnModel, Method, Partition,
    PrecomputeConfig, TrainConfig,
};

use crate::manifest::Manifest;
use crate::{BatchArgs, CheckArgs, CompArgs, Common, EvalArgs, GenArgs, ModelArgs, PartitionArgs, PrecomputeArgs, ReportArgs, TrainArgs};

const PARTITION_FILE: &str = "partition.txt";
const CACHE_FILE: &str = "compensation.bin";
const METRICS_FILE: &str = "metrics.csv";
const CHECKPOINT_FILE: &str = "model.ckpt";

fn start(command: &str, common: &Common, threads: usize) -> Result<Manifest> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let mut m = Manifest::new(command);
    m.set("out", common.out.display());
    m.set("seed", common.seed);
    m.set("stat.threads", threads);
    Ok(m)
}

fn finish(m: &Manifest, common: &Common) -> Result<()> {
    let command = m.get("command").expect("set by start");
    m.write(&common.out.join(format!("{command}.manifest")))
}

fn sub_seed(m: &mut Manifest, root: u64, label: &str) -> u64 {
    let s = seed::derive(root, label);
    m.set(&format!("seed.{label}"), s);
    s
}

fn existing(path: &Path, what: &str) -> Result<()> {
    ensure!(path.exists(), "{what} {} does not exist", path.display());
    Ok(())
}

fn load(path: &Path, m: &mut Manifest) -> Result<Dataset> {
    existing(path, "dataset directory")?;
    let ds = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    m.set("data", path.display());
    m.set("stat.graph_hash", hex(&ds.graph.fingerprint()));
    Ok(ds)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").expect("write to String");
        s
    })
}

fn record_model(m: &mut Manifest, a: &ModelArgs) -> Result<Arch> {
    m.set("arch", &a.arch);
    m.set("layers", a.layers);
    m.set("hidden", a.hidden);
    ensure!(a.layers >= 1 && a.hidden >= 1, "layers and hidden must be positive");
    Ok(a.arch.parse()?)
}

fn model_dims(a: &ModelArgs, ds: &Dataset) -> Vec<usize> {
    let mut dims = vec![ds.features.cols()];
    dims.extend(std::iter::repeat_n(a.hidden, a.layers - 1));
    dims.push(ds.num_classes);
    dims
}

fn record_batches(m: &mut Manifest, a: &BatchArgs) {
    m.set("clusters_per_batch", a.clusters_per_batch);
    m.set("remove_eval_nodes", a.remove_eval_nodes);
}

fn record_comp(m: &mut Manifest, a: &CompArgs, model: &ModelArgs, ds: &Dataset, comp_seed: u64) -> Result<PrecomputeConfig> {
    if let Some(k) = a.k {
        ensure!(k >= 1, "k must be at least 1");
        m.set("k", k);
    }
    m.set("n_inits", a.n_inits);
    m.set("mode", &a.mode);
    m.set("power_iterations", a.power_iterations);
    let width = a.basis_width.unwrap_or(model.hidden);
    if let Some(w) = a.basis_width {
        m.set("basis_width", w);
    }
    let mut dims = vec![ds.features.cols()];
    dims.extend(std::iter::repeat_n(width, model.layers));
    let mut cfg = PrecomputeConfig::new(dims, comp_seed);
    cfg.k = a.k;
    cfg.n_inits = a.n_inits;
    cfg.mode = a.mode.parse()?;
    cfg.power_iterations = a.power_iterations;
    m.set("stat.k_effective", cfg.rank());
    Ok(cfg)
}

/// Training config carrying only what decides the batch list.
fn batch_config(a: &BatchArgs, train_seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(Method::Plain, 1, 0.0, train_seed);
    cfg.clusters_per_batch = a.clusters_per_batch;
    cfg.remove_eval_nodes = a.remove_eval_nodes;
    cfg
}

pub fn gen(a: &GenArgs, threads: usize) -> Result<()> {
    let mut m = start("gen", &a.common, threads)?;
    let data_seed = sub_seed(&mut m, a.common.seed, "data");
    m.set("kind", &a.kind);
    m.set("feature_dim", a.feature_dim);
    let ds = match a.kind.as_str() {
        "double-star" => gen_double_star(a.feature_dim, data_seed)?,
        "duplication" => {
            m.set("base_n", a.base_n);
            m.set("copies", a.copies);
            m.set("p_edge", a.p_edge);
            gen_duplication(a.base_n, a.copies, a.p_edge, a.feature_dim, data_seed)?
        }
        "sbm" => {
            m.set("nodes", a.nodes);
            m.set("blocks", a.blocks);
            m.set("p_in", a.p_in);
            m.set("p_out", a.p_out);
            m.set("noise", a.noise);
            gen_sbm(a.nodes, a.blocks, a.p_in, a.p_out, a.feature_dim, a.noise, data_seed)?
        }
        other => bail!("unknown dataset kind `{other}` (double-star, duplication, sbm)"),
    };
    save_dataset(&ds, &a.common.out)?;
    m.set("stat.nodes", ds.num_nodes());
    m.set("stat.edges", ds.graph.num_edges());
    m.set("stat.graph_hash", hex(&ds.graph.fingerprint()));
    println!("wrote {} ({} nodes) to {}", ds.name, ds.num_nodes(), a.common.out.display());
    finish(&m, &a.common)
}

pub fn partition(a: &PartitionArgs, threads: usize) -> Result<()> {
    let mut m = start("partition", &a.common, threads)?;
    let ds = load(&a.data, &mut m)?;
    m.set("method", &a.method);
    m.set("clusters", a.clusters);
    let method: PartitionMethod = a.method.parse()?;
    let p = match method {
        PartitionMethod::Random => {
            let s = sub_seed(&mut m, a.common.seed, "partition");
            let nodes: Vec<usize> = (0..ds.num_nodes()).collect();
            random_partition(&nodes, a.clusters, s)?
        }
        PartitionMethod::Locality => locality_partition(&ds.graph, a.clusters, sub_seed(&mut m, a.common.seed, "partition"))?,
        PartitionMethod::RandomWalk => {
            m.set("walk_len", a.walk_len);
            random_walk_partition(&ds.graph, a.clusters, a.walk_len, sub_seed(&mut m, a.common.seed, "walk"))?
        }
        PartitionMethod::File => bail!("`file` is not a partitioning method"),
    };
    let cut: usize = p
        .clusters
        .iter()
        .map(|c| topcomp_core::graph_cut(&ds.graph, c).map(|g| g.cut_edges))
        .sum::<topcomp_core::Result<usize>>()?;
    write_partition(&p, &a.common.out.join(PARTITION_FILE))?;
    m.set("stat.clusters", p.len());
    m.set("stat.cut_edges", cut);
    m.set("stat.partition_hash", hex(&p.fingerprint()));
    println!("{} clusters, {cut} cut edges", p.len());
    finish(&m, &a.common)
}

fn load_partition(path: &Path, ds: &Dataset, m: &mut Manifest) -> Result<Partition> {
    existing(path, "partition file")?;
    let p = read_partition(path)?;
    p.validate(ds.num_nodes()).with_context(|| format!("partition {} does not fit the dataset", path.display()))?;
    m.set("partition", path.display());
    Ok(p)
}

pub fn precompute(a: &PrecomputeArgs, threads: usize) -> Result<()> {
    let mut m = start("precompute", &a.common, threads)?;
    let ds = load(&a.data, &mut m)?;
    let p = load_partition(&a.partition, &ds, &mut m)?;
    let arch = record_model(&mut m, &a.model)?;
    record_batches(&mut m, &a.batches);
    let comp_seed = sub_seed(&mut m, a.common.seed, "compensation");
    let train_seed = sub_seed(&mut m, a.common.seed, "train");
    let cfg = record_comp(&mut m, &a.comp, &a.model, &ds, comp_seed)?;
    let batches = training_batches(&p, &batch_config(&a.batches, train_seed), &ds)?;
    let pre = precompute_all(&ds.graph, &ds.features, &batches, arch, &cfg)?;
    let header = CacheHeader {
        graph_hash: ds.graph.fingerprint(),
        partition_hash: batches.fingerprint(),
        k: cfg.rank() as u64,
        seed: comp_seed,
        n_inits: cfg.n_inits as u64,
    };
    let path = a.common.out.join(CACHE_FILE);
    write_cache(&path, &header, &pre.compensations)?;
    m.set("stat.batches", batches.len());
    m.set("stat.preprocess_s", pre.wall_s);
    m.set("stat.stored_bytes", pre.stored_bytes);
    m.set("stat.partition_hash", hex(&header.partition_hash));
    println!(
        "{} compensations, {} bytes, {:.3}s -> {}",
        pre.compensations.len(),
        pre.stored_bytes,
        pre.wall_s,
        path.display()
    );
    finish(&m, &a.common)
}

/// Seconds recorded by the `precompute` run that wrote `cache`, if any.
fn preprocess_seconds(cache: &Path) -> Option<f64> {
    let manifest = cache.parent()?.join("precompute.manifest");
    Manifest::read(&manifest).ok()?.get("stat.preprocess_s")?.parse().ok()
}

pub fn train(a: &TrainArgs, threads: usize) -> Result<()> {
    let mut m = start("train", &a.common, threads)?;
    let ds = load(&a.data, &mut m)?;
    let method: Method = a.method.parse()?;
    m.set("method", method.name());
    let arch = record_model(&mut m, &a.model)?;
    record_batches(&mut m, &a.batches);
    for (k, v) in [("epochs", a.epochs.to_string()), ("lr", a.lr.to_string()), ("momentum", a.momentum.to_string())] {
        m.set(k, v);
    }
    m.set("eval_every", a.eval_every);
    m.set("refresh_every", a.refresh_every);
    m.set("gas_warm_start", a.gas_warm_start);
    m.set("eval_chunk", a.eval_chunk);
    m.set("deterministic_time", a.deterministic_time);
    if method == Method::Top && a.cache.is_none() {
        bail!("method `top` needs a compensation cache: run `topcomp precompute` and pass --cache");
    }
    let init_seed = sub_seed(&mut m, a.common.seed, "init");
    let train_seed = sub_seed(&mut m, a.common.seed, "train");
    let model = GnnModel::init(arch, &model_dims(&a.model, &ds), Activation::Relu, init_seed)?;
    let mut cfg = TrainConfig::new(method, a.epochs, a.lr, train_seed);
    cfg.momentum = a.momentum;
    cfg.clusters_per_batch = a.batches.clusters_per_batch;
    cfg.remove_eval_nodes = a.batches.remove_eval_nodes;
    cfg.eval_every = a.eval_every;
    cfg.refresh_every = a.refresh_every;
    cfg.gas_warm_start = a.gas_warm_start;
    cfg.eval_chunk = a.eval_chunk;
    cfg.deterministic_time = a.deterministic_time;
    cfg.validate()?;

    let batches = match (&a.partition, method) {
        (None, Method::Full) => None,
        (None, _) => bail!("method `{}` needs --partition", method.name()),
        (Some(path), _) => Some(training_batches(&load_partition(path, &ds, &mut m)?, &cfg, &ds)?),
    };
    let mut comps: Option<Vec<Compensation>> = None;
    let mut refresh: Option<PrecomputeConfig> = None;
    if let Some(cache) = &a.cache {
        existing(cache, "compensation cache")?;
        m.set("cache", cache.display());
        let (header, loaded) = read_cache(cache)?;
        ensure!(header.graph_hash == ds.graph.fingerprint(), "cache {} was built for a different graph", cache.display());
        let b = batches.as_ref().ok_or_else(|| anyhow!("--cache needs --partition"))?;
        ensure!(
            header.partition_hash == b.fingerprint(),
            "cache {} was built for different batches (check --partition, --seed, --clusters-per-batch, --remove-eval-nodes)",
            cache.display()
        );
        if a.refresh_every > 0 {
            let mut r = PrecomputeConfig::new(vec![ds.features.cols()], header.seed);
            r.k = Some(header.k as usize);
            r.mode = loaded.first().map_or(CompMode::Fast, Compensation::mode);
            r.sample = SampleMode::Uniform;
            refresh = Some(r);
        }
        if !a.deterministic_time {
            if let Some(s) = preprocess_seconds(cache) {
                cfg.wall_offset_s = s;
                m.set("stat.wall_offset_s", s);
            }
        }
        comps = Some(loaded);
    }
    let inputs = TrainInputs {
        data: &ds,
        batches: batches.as_ref(),
        comps: comps.as_deref(),
        refresh: refresh.as_ref(),
    };
    let (trained, rows) = run_training(&cfg, &model, inputs)?;
    write_metrics(&rows, &a.common.out.join(METRICS_FILE))?;
    write_checkpoint(&trained, &a.common.out.join(CHECKPOINT_FILE))?;
    let last = rows.last().expect("training writes a final row");
    m.set("stat.final_test_acc", last.test_acc);
    println!(
        "{}: {} steps, loss {:.4}, train {:.3}, val {:.3}, test {:.3}",
        method.name(),
        last.step,
        last.loss,
        last.train_acc,
        last.val_acc,
        last.test_acc
    );
    finish(&m, &a.common)
}

pub fn eval(a: &EvalArgs, threads: usize) -> Result<()> {
    let mut m = start("eval", &a.common, threads)?;
    let ds = load(&a.data, &mut m)?;
    existing(&a.checkpoint, "checkpoint")?;
    m.set("checkpoint", a.checkpoint.display());
    m.set("chunk", a.chunk);
    ensure!(a.chunk >= 1, "chunk must be positive");
    let model = read_checkpoint(&a.checkpoint)?;
    let logits = layerwise_inference(&model, &ds.graph, &ds.features, a.chunk)?;
    let loss = if ds.masks.train.is_empty() {
        0.0
    } else {
        softmax_xent(&logits, &ds.labels, &ds.masks.train)?.0
    };
    let report = format!(
        "loss: {loss:?}\ntrain_acc: {:?}\nval_acc: {:?}\ntest_acc: {:?}\n",
        accuracy(&logits, &ds.labels, &ds.masks.train),
        accuracy(&logits, &ds.labels, &ds.masks.val),
        accuracy(&logits, &ds.labels, &ds.masks.test)
    );
    fs::write(a.common.out.join("eval.txt"), &report)?;
    print!("{report}");
    finish(&m, &a.common)
}

fn method_outputs(
    model: &GnnModel,
    ds: &Dataset,
    p: &Partition,
    comps: Option<&[Compensation]>,
) -> Result<Vec<(Vec<usize>, DenseMatrix)>> {
    let mut out = Vec::with_capacity(p.len());
    for (i, c) in p.clusters.iter().enumerate() {
        let ctx = BatchContext::new(&ds.graph, c)?;
        let mode = comps.map_or(BatchMode::Plain, |cs| BatchMode::Compensated(&cs[i]));
        out.push((c.clone(), forward_batch(model, &ctx, &ds.features.select_rows(c), mode)?.0));
    }
    Ok(out)
}

/// One in-order sweep from an empty history, so each batch sees the
/// boundary embeddings written by earlier batches of the same sweep.
fn gas_outputs(model: &GnnModel, ds: &Dataset, p: &Partition) -> Result<Vec<(Vec<usize>, DenseMatrix)>> {
    let mut hist = HistoryStore::zeros(ds.num_nodes(), model);
    let mut out = Vec::with_capacity(p.len());
    for c in &p.clusters {
        let ctx = BatchContext::new(&ds.graph, c)?;
        hist.tick();
        out.push((c.clone(), forward_gas(model, &ctx, &ds.features.select_rows(c), &mut hist)?.0));
    }
    Ok(out)
}

pub fn invariance_report(a: &ReportArgs, threads: usize) -> Result<()> {
    let mut m = start("invariance-report", &a.common, threads)?;
    let ds = load(&a.data, &mut m)?;
    let arch = record_model(&mut m, &a.model)?;
    m.set("clusters", &a.clusters);
    m.set("partition_method", &a.partition_method);
    let model = match &a.checkpoint {
        Some(path) => {
            existing(path, "checkpoint")?;
            m.set("checkpoint", path.display());
            read_checkpoint(path)?
        }
        None => {
            let s = sub_seed(&mut m, a.common.seed, "init");
            GnnModel::init(arch, &model_dims(&a.model, &ds), Activation::Relu, s)?
        }
    };
    ensure!(model.dims()[0] == ds.features.cols(), "checkpoint expects {} input features", model.dims()[0]);
    let part_seed = sub_seed(&mut m, a.common.seed, "partition");
    let comp_seed = sub_seed(&mut m, a.common.seed, "compensation");
    let mut comp_model = a.model.clone();
    comp_model.layers = model.num_layers();
    let cfg = record_comp(&mut m, &a.comp, &comp_model, &ds, comp_seed)?;
    let method: PartitionMethod = a.partition_method.parse()?;
    let counts: Vec<usize> = a
        .clusters
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad cluster count `{s}`")))
        .collect::<Result<_>>()?;
    let h_star = layerwise_inference(&model, &ds.graph, &ds.features, 1024)?;
    let mut csv = String::from("clusters,method,rel_error,acc_degradation\n");
    let mut table = format!("{:>8}  {:<6} {:>12} {:>16}\n", "clusters", "method", "rel_error", "acc_degradation");
    for &k in &counts {
        let nodes: Vec<usize> = (0..ds.num_nodes()).collect();
        let p = match method {
            PartitionMethod::Random => random_partition(&nodes, k, part_seed)?,
            PartitionMethod::Locality => locality_partition(&ds.graph, k, part_seed)?,
            other => bail!("invariance-report supports random and locality partitions, not `{}`", other.name()),
        };
        let comps = precompute_all(&ds.graph, &ds.features, &p, model.arch(), &cfg)?.compensations;
        let rows = [
            ("plain", method_outputs(&model, &ds, &p, None)?),
            ("gas", gas_outputs(&model, &ds, &p)?),
            ("top", method_outputs(&model, &ds, &p, Some(&comps))?),
        ];
        for (name, outs) in rows {
            let err = relative_approx_error(&h_star, &outs)?;
            let deg = accuracy_degradation(&h_star, &outs, &ds.labels)?;
            writeln!(csv, "{k},{name},{err:?},{deg:?}").expect("write to String");
            writeln!(table, "{k:>8}  {name:<6} {err:>12.3e} {deg:>16.4}").expect("write to String");
        }
    }
    fs::write(a.common.out.join("report.csv"), &csv)?;
    fs::write(a.common.out.join("report.txt"), &table)?;
    print!("{table}");
    finish(&m, &a.common)
}

pub fn check(a: &CheckArgs, threads: usize) -> Result<()> {
    let mut m = start("check", &a.common, threads)?;
    existing(&a.data, "dataset directory")?;
    m.set("data", a.data.display());
    let s = check_dataset_dir(&a.data)?;
    let text = format!(
        "nodes: {}\nundirected_edges: {}\nfeatures: {}\nclasses: {}\ntrain: {}\nval: {}\ntest: {}\n",
        s.nodes, s.undirected_edges, s.features, s.classes, s.train, s.val, s.test
    );
    fs::write(a.common.out.join("check.txt"), &text)?;
    print!("{text}");
    finish(&m, &a.common)
}
