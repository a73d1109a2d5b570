//! Basic embeddings, coefficient estimation and per-batch compensation.
//!
//! A [`Compensation`] stores the factors of the extra in-batch term
//! `d_hat_a · (q_s · H_S)`, which stands in for the messages that
//! out-of-batch neighbors would send to the batch. Both factors are built
//! once from the embeddings of randomly initialized models and then reused
//! at every training step, so training reads in-batch rows only.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;

use crate::bytes::{Reader, Writer};
use crate::error::{Error, Result};
use crate::graph::{BatchContext, PropagationKind, SparseGraph};
use crate::linalg::{pinv_solve, range_finder_with, spmm, spmm_t, Csr, DenseMatrix, RangeFinderOptions, DEFAULT_RCOND};
use crate::model::{forward_full, Activation, Arch, GnnModel, LEAKY_SLOPE};
use crate::sampler::Partition;
use crate::seed;

/// Concatenated layer-wise embeddings `[H^(0) | H^(1) | … | H^(L)]` of one
/// or more models, stacked side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicEmbeddings {
    pub matrix: DenseMatrix,
    /// Width of every block, in column order.
    pub block_dims: Vec<usize>,
    /// Initialization seed of each model.
    pub seeds: Vec<u64>,
}

impl BasicEmbeddings {
    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    /// Embeddings of the given models, each block activated as the model
    /// itself activates it.
    pub fn from_models(g: &SparseGraph, x: &DenseMatrix, models: &[GnnModel]) -> Result<Self> {
        if x.rows() != g.num_nodes() {
            return Err(Error::dims("basic embeddings: feature rows", g.num_nodes(), x.rows()));
        }
        if models.is_empty() {
            return Err(Error::InvalidArgument("need at least one model".into()));
        }
        let mut blocks = Vec::new();
        for m in models {
            let (out, tape) = forward_full(m, g, x)?;
            blocks.extend(tape.inputs);
            blocks.push(out);
        }
        let refs: Vec<&DenseMatrix> = blocks.iter().collect();
        Ok(Self {
            matrix: DenseMatrix::hstack(&refs)?,
            block_dims: blocks.iter().map(DenseMatrix::cols).collect(),
            seeds: models.iter().map(GnnModel::seed).collect(),
        })
    }
}

/// Layer widths `[d, d, …, d]` for `layers` layers on `d` input features.
pub fn uniform_dims(d: usize, layers: usize) -> Vec<usize> {
    vec![d; layers + 1]
}

/// Embeddings of `n_inits` randomly initialized models with LeakyReLU on
/// every layer. Model `i` is seeded with `derive_indexed(seed, "init", i)`.
/// `dims[0]` must equal the feature width; a single-entry `dims` yields `X`.
pub fn basic_embeddings(
    g: &SparseGraph,
    x: &DenseMatrix,
    arch: Arch,
    dims: &[usize],
    n_inits: usize,
    seed: u64,
) -> Result<BasicEmbeddings> {
    if dims.first() != Some(&x.cols()) {
        return Err(Error::dims("basic embeddings: input width", x.cols(), dims.first().copied().unwrap_or(0)));
    }
    if n_inits == 0 {
        return Err(Error::InvalidArgument("n_inits must be positive".into()));
    }
    let models = (0..n_inits)
        .map(|i| {
            let s = seed::derive_indexed(seed, "init", i as u64);
            Ok(GnnModel::init(arch, dims, Activation::LeakyRelu(LEAKY_SLOPE), s)?.with_output_activation(true))
        })
        .collect::<Result<Vec<_>>>()?;
    BasicEmbeddings::from_models(g, x, &models)
}

/// Minimum-norm least-squares `R` with `R · H̄_B ≈ H̄_{N^c}`, of shape
/// `|boundary| × |batch|`.
pub fn estimate_r_exact(hbar: &BasicEmbeddings, ctx: &BatchContext) -> Result<DenseMatrix> {
    let h_b = hbar.matrix.select_rows(ctx.batch());
    if ctx.boundary().is_empty() {
        return Ok(DenseMatrix::zeros(0, ctx.len()));
    }
    let h_n = hbar.matrix.select_rows(ctx.boundary());
    Ok(pinv_solve(&h_b.transpose(), &h_n.transpose(), DEFAULT_RCOND)?.transpose())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompMode {
    /// Dense coefficients fitted on the whole batch.
    Exact,
    /// Low-rank factors from a range finder and a node subsample.
    Fast,
}

impl CompMode {
    pub fn name(self) -> &'static str {
        match self {
            CompMode::Exact => "exact",
            CompMode::Fast => "fast",
        }
    }
}

impl std::str::FromStr for CompMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "fast" => Ok(Self::Fast),
            other => Err(Error::InvalidArgument(format!("unknown compensation mode `{other}`"))),
        }
    }
}

/// How the fast path picks the subsample `S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// `k` nodes uniformly without replacement.
    Uniform,
    /// `S = B`; the range finder still uses rank `k`.
    WholeBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FastConfig {
    pub k: usize,
    pub seed: u64,
    pub sample: SampleMode,
    pub power_iterations: usize,
}

impl FastConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            sample: SampleMode::Uniform,
            power_iterations: 0,
        }
    }
}

/// Precomputed compensation factors for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Compensation {
    batch: Vec<usize>,
    kind: PropagationKind,
    mode: CompMode,
    /// Positions of `S` within the batch.
    s_local: Vec<usize>,
    /// `k × |S|`
    q_s: DenseMatrix,
    /// `|B| × k`
    d_hat_a: DenseMatrix,
}

impl Compensation {
    /// Assemble from parts, validating shapes and finiteness.
    pub fn from_parts(
        batch: Vec<usize>,
        kind: PropagationKind,
        mode: CompMode,
        s_local: Vec<usize>,
        q_s: DenseMatrix,
        d_hat_a: DenseMatrix,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(&bad) = s_local.iter().find(|&&p| p >= batch.len()) {
            return Err(Error::NodeOutOfRange { index: bad, n: batch.len() });
        }
        if q_s.cols() != s_local.len() {
            return Err(Error::dims("compensation q_s columns", s_local.len(), q_s.cols()));
        }
        if d_hat_a.shape() != (batch.len(), q_s.rows()) {
            return Err(Error::dims(
                "compensation d_hat_a",
                format!("{}x{}", batch.len(), q_s.rows()),
                format!("{}x{}", d_hat_a.rows(), d_hat_a.cols()),
            ));
        }
        if !q_s.is_finite() || !d_hat_a.is_finite() {
            return Err(Error::NonFinite("compensation factors"));
        }
        Ok(Self {
            batch,
            kind,
            mode,
            s_local,
            q_s,
            d_hat_a,
        })
    }

    /// Exact coefficients: `S = B`, `q_s = I`, `d_hat_a = Ã_{B,N^c} · R`.
    pub fn exact(hbar: &BasicEmbeddings, ctx: &BatchContext, kind: PropagationKind) -> Result<Self> {
        let nb = ctx.len();
        let d_hat_a = if ctx.boundary().is_empty() {
            DenseMatrix::zeros(nb, nb)
        } else {
            spmm(&ctx.blocks(kind).outer, &estimate_r_exact(hbar, ctx)?)?
        };
        Self::from_parts(ctx.batch().to_vec(), kind, CompMode::Exact, (0..nb).collect(), DenseMatrix::identity(nb), d_hat_a)
    }

    pub fn batch(&self) -> &[usize] {
        &self.batch
    }

    pub fn kind(&self) -> PropagationKind {
        self.kind
    }

    pub fn mode(&self) -> CompMode {
        self.mode
    }

    /// Rank of the compensation term.
    pub fn k(&self) -> usize {
        self.q_s.rows()
    }

    pub fn s_local(&self) -> &[usize] {
        &self.s_local
    }

    /// Global ids of the subsample `S`.
    pub fn s_nodes(&self) -> Vec<usize> {
        self.s_local.iter().map(|&p| self.batch[p]).collect()
    }

    pub fn q_s(&self) -> &DenseMatrix {
        &self.q_s
    }

    pub fn d_hat_a(&self) -> &DenseMatrix {
        &self.d_hat_a
    }

    /// Bytes held by the stored factors and index lists.
    pub fn stored_bytes(&self) -> usize {
        8 * (self.batch.len() + self.s_local.len() + self.q_s.data().len() + self.d_hat_a.data().len())
    }

    fn check_rows(&self, h: &DenseMatrix) -> Result<()> {
        if h.rows() != self.batch.len() {
            return Err(Error::dims("compensation: embedding rows", self.batch.len(), h.rows()));
        }
        Ok(())
    }

    /// `d_hat_a · (q_s · H_S)` together with the number of multiply-adds it took.
    pub fn term(&self, h_b: &DenseMatrix) -> Result<(DenseMatrix, u64)> {
        self.check_rows(h_b)?;
        let d = h_b.cols();
        let k = self.k();
        let mut flops = 0u64;
        let mut t = DenseMatrix::zeros(k, d);
        for i in 0..k {
            for (j, &p) in self.s_local.iter().enumerate() {
                let q = self.q_s.get(i, j);
                let src = h_b.row(p);
                for (o, &v) in t.row_mut(i).iter_mut().zip(src) {
                    *o += q * v;
                }
                flops += d as u64;
            }
        }
        let mut out = DenseMatrix::zeros(self.batch.len(), d);
        for r in 0..self.batch.len() {
            for c in 0..k {
                let a = self.d_hat_a.get(r, c);
                let src = t.row(c);
                for (o, &v) in out.row_mut(r).iter_mut().zip(src) {
                    *o += a * v;
                }
                flops += d as u64;
            }
        }
        Ok((out, flops))
    }

    /// `inner · H_B + d_hat_a · (q_s · H_S)`.
    pub fn apply(&self, inner: &Csr, h_b: &DenseMatrix) -> Result<DenseMatrix> {
        let mut z = spmm(inner, h_b)?;
        if z.rows() != self.batch.len() {
            return Err(Error::dims("compensation: inner block rows", self.batch.len(), z.rows()));
        }
        z.add_assign(&self.term(h_b)?.0);
        Ok(z)
    }

    /// Adjoint of [`Compensation::apply`].
    pub fn apply_transpose(&self, inner: &Csr, g: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_rows(g)?;
        let mut out = spmm_t(inner, g)?;
        let t = self.d_hat_a.t_dot(g);
        let back = self.q_s.t_dot(&t);
        for (j, &p) in self.s_local.iter().enumerate() {
            for (o, &v) in out.row_mut(p).iter_mut().zip(back.row(j)) {
                *o += v;
            }
        }
        Ok(out)
    }
}

/// `a_bb · h_b + d_hat_a · (q_s · H_S)`.
pub fn apply_compensation(comp: &Compensation, a_bb: &Csr, h_b: &DenseMatrix) -> Result<DenseMatrix> {
    comp.apply(a_bb, h_b)
}

/// Fast-path coefficients before they are folded into `Ã_{B,N^c}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FastFit {
    /// Positions of `S` within the batch, sorted.
    pub s_local: Vec<usize>,
    /// `Q_Sᵀ`, `k × |S|`
    pub q_s: DenseMatrix,
    /// `R̂`, `|boundary| × k`
    pub r_hat: DenseMatrix,
}

impl FastFit {
    /// Boundary rows of `hbar` as reconstructed from the batch rows:
    /// `R̂ · Q_Sᵀ · H̄_S`.
    pub fn reconstruct(&self, hbar: &BasicEmbeddings, ctx: &BatchContext) -> DenseMatrix {
        let h_b = hbar.matrix.select_rows(ctx.batch());
        self.r_hat.dot(&self.q_s.dot(&h_b.select_rows(&self.s_local)))
    }
}

/// `Q` spans the range of `H̄_B`, `S` samples `k` batch nodes and
/// `R̂ = H̄_{N^c} (Q_Sᵀ H̄_S)†`.
pub fn fit_fast(hbar: &BasicEmbeddings, ctx: &BatchContext, cfg: &FastConfig) -> Result<FastFit> {
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let nb = ctx.len();
    let k = cfg.k.min(nb).min(hbar.cols());
    let h_b = hbar.matrix.select_rows(ctx.batch());
    let q = range_finder_with(
        &h_b,
        k,
        seed::derive(cfg.seed, "range"),
        RangeFinderOptions {
            power_iterations: cfg.power_iterations,
        },
    )?;
    let mut s_local: Vec<usize> = match cfg.sample {
        SampleMode::Uniform => index::sample(&mut seed::rng(seed::derive(cfg.seed, "subset")), nb, k).into_vec(),
        SampleMode::WholeBatch => (0..nb).collect(),
    };
    s_local.sort_unstable();
    let q_s = q.select_rows(&s_local).transpose();
    let r_hat = if ctx.boundary().is_empty() {
        DenseMatrix::zeros(0, q_s.rows())
    } else {
        let c = q_s.dot(&h_b.select_rows(&s_local));
        let h_n = hbar.matrix.select_rows(ctx.boundary());
        pinv_solve(&c.transpose(), &h_n.transpose(), DEFAULT_RCOND)?.transpose()
    };
    Ok(FastFit { s_local, q_s, r_hat })
}

/// Low-rank compensation from [`fit_fast`] with `d_hat_a = Ã_{B,N^c} R̂`.
pub fn build_compensation_fast(
    hbar: &BasicEmbeddings,
    ctx: &BatchContext,
    kind: PropagationKind,
    cfg: &FastConfig,
) -> Result<Compensation> {
    let fit = fit_fast(hbar, ctx, cfg)?;
    let nb = ctx.len();
    let d_hat_a = if ctx.boundary().is_empty() {
        DenseMatrix::zeros(nb, fit.q_s.rows())
    } else {
        spmm(&ctx.blocks(kind).outer, &fit.r_hat)?
    };
    Compensation::from_parts(ctx.batch().to_vec(), kind, CompMode::Fast, fit.s_local, fit.q_s, d_hat_a)
}

/// Settings shared by every batch in [`precompute_all`].
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputeConfig {
    /// Layer widths of the random models; `dims[0]` is the feature width.
    pub dims: Vec<usize>,
    pub n_inits: usize,
    /// Rank of the fast path; defaults to the feature width.
    pub k: Option<usize>,
    pub mode: CompMode,
    pub sample: SampleMode,
    pub power_iterations: usize,
    pub seed: u64,
}

impl PrecomputeConfig {
    /// Fast mode, one init, `k` equal to the feature width.
    pub fn new(dims: Vec<usize>, seed: u64) -> Self {
        Self {
            dims,
            n_inits: 1,
            k: None,
            mode: CompMode::Fast,
            sample: SampleMode::Uniform,
            power_iterations: 0,
            seed,
        }
    }

    pub fn rank(&self) -> usize {
        self.k.unwrap_or(self.dims[0])
    }
}

#[derive(Clone, Debug)]
pub struct Precomputed {
    pub compensations: Vec<Compensation>,
    /// Seconds spent on basic embeddings plus all batch builds.
    pub wall_s: f64,
    pub stored_bytes: usize,
}

/// Build one compensation per cluster from freshly computed basic
/// embeddings. Batches are processed in parallel; batch `i` draws its
/// randomness from `derive_indexed(seed, "batch", i)`.
pub fn precompute_all(
    g: &SparseGraph,
    x: &DenseMatrix,
    partition: &Partition,
    arch: Arch,
    cfg: &PrecomputeConfig,
) -> Result<Precomputed> {
    let start = Instant::now();
    let hbar = basic_embeddings(g, x, arch, &cfg.dims, cfg.n_inits, seed::derive(cfg.seed, "basic"))?;
    let mut out = precompute_with(g, &hbar, partition, arch.propagation(), cfg)?;
    out.wall_s = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Like [`precompute_all`] with given basic embeddings.
pub fn precompute_with(
    g: &SparseGraph,
    hbar: &BasicEmbeddings,
    partition: &Partition,
    kind: PropagationKind,
    cfg: &PrecomputeConfig,
) -> Result<Precomputed> {
    let start = Instant::now();
    partition.validate(g.num_nodes())?;
    if hbar.matrix.rows() != g.num_nodes() {
        return Err(Error::dims("precompute: embedding rows", g.num_nodes(), hbar.matrix.rows()));
    }
    let compensations = partition
        .clusters
        .par_iter()
        .enumerate()
        .map(|(i, cluster)| {
            let ctx = BatchContext::new(g, cluster)?;
            match cfg.mode {
                CompMode::Exact => Compensation::exact(hbar, &ctx, kind),
                CompMode::Fast => {
                    let fast = FastConfig {
                        k: cfg.rank(),
                        seed: seed::derive_indexed(cfg.seed, "batch", i as u64),
                        sample: cfg.sample,
                        power_iterations: cfg.power_iterations,
                    };
                    build_compensation_fast(hbar, &ctx, kind, &fast)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let stored_bytes = compensations.iter().map(Compensation::stored_bytes).sum();
    Ok(Precomputed {
        compensations,
        wall_s: start.elapsed().as_secs_f64(),
        stored_bytes,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"TOPC";
const CACHE_VERSION: u32 = 1;

/// Provenance recorded in a compensation cache file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheHeader {
    pub graph_hash: [u8; 32],
    pub partition_hash: [u8; 32],
    pub k: u64,
    pub seed: u64,
    pub n_inits: u64,
}

fn kind_tag(kind: PropagationKind) -> u8 {
    match kind {
        PropagationKind::Gcn => 0,
        PropagationKind::Mean => 1,
    }
}

fn write_matrix(w: &mut Writer, m: &DenseMatrix) {
    w.u64(m.rows() as u64);
    w.u64(m.cols() as u64);
    for &v in m.data() {
        w.f64(v);
    }
}

fn read_matrix(r: &mut Reader<'_>) -> std::result::Result<DenseMatrix, String> {
    let rows = r.len(0)?;
    let cols = r.len(0)?;
    let count = rows.checked_mul(cols).ok_or("matrix size overflows")?;
    let data = (0..count).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
    DenseMatrix::new(rows, cols, data).map_err(|e| e.to_string())
}

fn read_ids(r: &mut Reader<'_>) -> std::result::Result<Vec<usize>, String> {
    let len = r.len(8)?;
    (0..len).map(|_| r.u64().map(|v| v as usize)).collect()
}

pub fn encode_cache(header: &CacheHeader, comps: &[Compensation]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CACHE_MAGIC);
    w.u32(CACHE_VERSION);
    w.bytes(&header.graph_hash);
    w.bytes(&header.partition_hash);
    w.u64(header.k);
    w.u64(header.seed);
    w.u64(header.n_inits);
    w.u64(comps.len() as u64);
    for c in comps {
        w.u8(kind_tag(c.kind));
        w.u8(u8::from(c.mode == CompMode::Fast));
        w.u64(c.batch.len() as u64);
        c.batch.iter().for_each(|&v| w.u64(v as u64));
        w.u64(c.s_local.len() as u64);
        c.s_local.iter().for_each(|&v| w.u64(v as u64));
        write_matrix(&mut w, &c.q_s);
        write_matrix(&mut w, &c.d_hat_a);
    }
    w.buf
}

pub fn decode_cache(bytes: &[u8]) -> std::result::Result<(CacheHeader, Vec<Compensation>), String> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CACHE_MAGIC {
        return Err("not a compensation cache".into());
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(format!("unsupported cache version {version}"));
    }
    let header = CacheHeader {
        graph_hash: r.take(32)?.try_into().expect("length checked"),
        partition_hash: r.take(32)?.try_into().expect("length checked"),
        k: r.u64()?,
        seed: r.u64()?,
        n_inits: r.u64()?,
    };
    let count = r.len(1)?;
    let mut comps = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = match r.u8()? {
            0 => PropagationKind::Gcn,
            1 => PropagationKind::Mean,
            t => return Err(format!("unknown operator tag {t}")),
        };
        let mode = match r.u8()? {
            0 => CompMode::Exact,
            1 => CompMode::Fast,
            t => return Err(format!("unknown mode tag {t}")),
        };
        let batch = read_ids(&mut r)?;
        let s_local = read_ids(&mut r)?;
        let q_s = read_matrix(&mut r)?;
        let d_hat_a = read_matrix(&mut r)?;
        comps.push(Compensation::from_parts(batch, kind, mode, s_local, q_s, d_hat_a).map_err(|e| e.to_string())?);
    }
    if !r.is_empty() {
        return Err("trailing bytes after last block".into());
    }
    Ok((header, comps))
}

pub fn write_cache(path: &Path, header: &CacheHeader, comps: &[Compensation]) -> Result<()> {
    fs::write(path, encode_cache(header, comps)).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<(CacheHeader, Vec<Compensation>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes).map_err(|msg| Error::Format { path: path.into(), msg })
}
