//! GCN and mean-aggregator SAGE models with hand-written reverse mode.
//!
//! Embeddings are row vectors. A GCN layer computes
//! `H' = σ((P · H) · W)` and a SAGE-mean layer computes
//! `H' = σ(H · W_self + (P · H) · W_nbr)`, where `P` is the propagation
//! operator: the normalized adjacency for GCN, the in-neighbor mean for
//! SAGE, or a batch-restricted (optionally compensated) version of either.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::compensation::Compensation;
use crate::error::{Error, Result};
use crate::graph::{BatchContext, PropagationKind, SparseGraph};
use crate::linalg::{spmm, spmm_t, Csr, DenseMatrix};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Gcn,
    SageMean,
}

impl Arch {
    pub fn propagation(self) -> PropagationKind {
        match self {
            Arch::Gcn => PropagationKind::Gcn,
            Arch::SageMean => PropagationKind::Mean,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Gcn => "gcn",
            Arch::SageMean => "sage",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Arch::Gcn),
            "sage" | "sage-mean" => Ok(Arch::SageMean),
            other => Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Default negative slope for [`Activation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }
}

/// Weights of one layer. For SAGE-mean, `weight` acts on the node itself
/// and `weight_nbr` on the aggregated neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub weight_nbr: Option<DenseMatrix>,
}

impl Layer {
    fn matrices(&self) -> impl Iterator<Item = &DenseMatrix> {
        std::iter::once(&self.weight).chain(self.weight_nbr.as_ref())
    }

    fn matrices_mut(&mut self) -> impl Iterator<Item = &mut DenseMatrix> {
        std::iter::once(&mut self.weight).chain(self.weight_nbr.as_mut())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnModel {
    arch: Arch,
    dims: Vec<usize>,
    activation: Activation,
    activate_output: bool,
    seed: u64,
    layers: Vec<Layer>,
}

impl GnnModel {
    /// Glorot-uniform initialization from `seed`. `dims` lists the input
    /// width followed by every layer's output width. The last layer is
    /// linear unless [`GnnModel::with_output_activation`] is set.
    pub fn init(arch: Arch, dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer dims {dims:?}")));
        }
        let mut rng = seed::rng(seed);
        let mut glorot = |fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a))
        };
        let layers = dims
            .windows(2)
            .map(|w| {
                let weight = glorot(w[0], w[1]);
                let weight_nbr = (arch == Arch::SageMean).then(|| glorot(w[0], w[1]));
                Layer { weight, weight_nbr }
            })
            .collect();
        Ok(Self {
            arch,
            dims: dims.to_vec(),
            activation,
            activate_output: false,
            seed,
            layers,
        })
    }

    /// Build from explicit weights; shapes must chain through `dims`.
    pub fn from_layers(
        arch: Arch,
        dims: &[usize],
        activation: Activation,
        activate_output: bool,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        if layers.len() + 1 != dims.len() {
            return Err(Error::dims("GnnModel::from_layers", dims.len() - 1, layers.len()));
        }
        for (l, layer) in layers.iter().enumerate() {
            let want = (dims[l], dims[l + 1]);
            let sage = arch == Arch::SageMean;
            if layer.weight.shape() != want
                || layer.weight_nbr.is_some() != sage
                || layer.weight_nbr.as_ref().is_some_and(|w| w.shape() != want)
            {
                return Err(Error::dims("GnnModel::from_layers", format!("{want:?}"), format!("layer {l}")));
            }
            if !layer.matrices().all(DenseMatrix::is_finite) {
                return Err(Error::NonFinite("model weights"));
            }
        }
        Ok(Self {
            arch,
            dims: dims.to_vec(),
            activation,
            activate_output,
            seed: 0,
            layers,
        })
    }

    pub fn with_output_activation(mut self, on: bool) -> Self {
        self.activate_output = on;
        self
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn activates_output(&self) -> bool {
        self.activate_output
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// All weight matrices in layer order (self before neighbor weight).
    pub fn params(&self) -> Vec<&DenseMatrix> {
        self.layers.iter().flat_map(Layer::matrices).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.layers.iter_mut().flat_map(Layer::matrices_mut).collect()
    }

    /// Activation applied after layer `l`.
    pub fn layer_activation(&self, l: usize) -> Activation {
        if l + 1 == self.layers.len() && !self.activate_output {
            Activation::Identity
        } else {
            self.activation
        }
    }

    /// `W ← W − lr · grad`
    pub fn apply_update(&mut self, grads: &Gradients, lr: f64) {
        for (w, g) in self.params_mut().into_iter().zip(grads.params()) {
            w.axpy(-lr, g);
        }
    }
}

/// Gradients with the same layout as the model's weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &GnnModel) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| Layer {
                weight: DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
                weight_nbr: l.weight_nbr.as_ref().map(|w| DenseMatrix::zeros(w.rows(), w.cols())),
            })
            .collect();
        Self { layers }
    }

    pub fn params(&self) -> Vec<&DenseMatrix> {
        self.layers.iter().flat_map(Layer::matrices).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.layers.iter_mut().flat_map(Layer::matrices_mut).collect()
    }

    pub fn axpy(&mut self, alpha: f64, other: &Gradients) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.axpy(alpha, b);
        }
    }

    pub fn norm(&self) -> f64 {
        self.params()
            .iter()
            .map(|m| m.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute entrywise difference over all parameters.
    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        self.params()
            .iter()
            .zip(other.params())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// The linear propagation applied at every layer.
#[derive(Clone, Copy, Debug)]
pub enum Propagation<'a> {
    /// A plain sparse operator: the whole graph or an in-batch block.
    Sparse(&'a Csr),
    /// In-batch block plus the low-rank compensation term.
    Compensated {
        inner: &'a Csr,
        comp: &'a Compensation,
    },
}

impl Propagation<'_> {
    /// Rows of `H` the operator reads.
    pub fn input_rows(&self) -> usize {
        match self {
            Propagation::Sparse(a) => a.cols(),
            Propagation::Compensated { inner, .. } => inner.cols(),
        }
    }

    pub fn output_rows(&self) -> usize {
        match self {
            Propagation::Sparse(a) => a.rows(),
            Propagation::Compensated { inner, .. } => inner.rows(),
        }
    }

    pub fn apply(&self, h: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            Propagation::Sparse(a) => spmm(a, h),
            Propagation::Compensated { inner, comp } => comp.apply(inner, h),
        }
    }

    /// Adjoint: `Pᵀ · g`.
    pub fn apply_transpose(&self, g: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            Propagation::Sparse(a) => spmm_t(a, g),
            Propagation::Compensated { inner, comp } => comp.apply_transpose(inner, g),
        }
    }
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTape<'a> {
    pub op: Propagation<'a>,
    /// `H^(l)` fed into layer `l`.
    pub inputs: Vec<DenseMatrix>,
    /// `P · H^(l)`
    pub propagated: Vec<DenseMatrix>,
    /// Pre-activations of every layer.
    pub pre: Vec<DenseMatrix>,
    pub output: DenseMatrix,
    /// Node embeddings read by the propagation, summed over layers.
    pub embeddings_touched: usize,
}

impl ForwardTape<'_> {
    /// Recompute the output from the recorded input features.
    pub fn replay(&self, model: &GnnModel) -> Result<DenseMatrix> {
        Ok(forward(model, self.op, &self.inputs[0])?.0)
    }
}

/// Forward pass under an arbitrary propagation operator.
pub fn forward<'a>(model: &GnnModel, op: Propagation<'a>, x: &DenseMatrix) -> Result<(DenseMatrix, ForwardTape<'a>)> {
    forward_with_offsets(model, op, x, |_| Ok(None))
}

/// Forward pass where `offset(l)` may add a constant to the propagated
/// input `P · H^(l)` of layer `l`. Constants carry no gradient, so the
/// tape works with [`backward`] unchanged.
pub fn forward_with_offsets<'a>(
    model: &GnnModel,
    op: Propagation<'a>,
    x: &DenseMatrix,
    mut offset: impl FnMut(usize) -> Result<Option<DenseMatrix>>,
) -> Result<(DenseMatrix, ForwardTape<'a>)> {
    if x.rows() != op.input_rows() {
        return Err(Error::dims("forward: feature rows", op.input_rows(), x.rows()));
    }
    if op.input_rows() != op.output_rows() {
        return Err(Error::dims("forward: square operator", op.output_rows(), op.input_rows()));
    }
    if x.cols() != model.dims[0] {
        return Err(Error::dims("forward: feature width", model.dims[0], x.cols()));
    }
    let mut inputs = Vec::with_capacity(model.num_layers());
    let mut propagated = Vec::with_capacity(model.num_layers());
    let mut pre = Vec::with_capacity(model.num_layers());
    let mut touched = 0;
    let mut h = x.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        touched += op.input_rows();
        let mut z = op.apply(&h)?;
        if let Some(extra) = offset(l)? {
            if extra.shape() != z.shape() {
                return Err(Error::dims(
                    "forward: layer offset",
                    format!("{:?}", z.shape()),
                    format!("{:?}", extra.shape()),
                ));
            }
            z.add_assign(&extra);
        }
        let p = match &layer.weight_nbr {
            None => z.dot(&layer.weight),
            Some(w_nbr) => {
                let mut p = h.dot(&layer.weight);
                p.add_assign(&z.dot(w_nbr));
                p
            }
        };
        let act = model.layer_activation(l);
        let next = p.map(|v| act.apply(v));
        inputs.push(std::mem::replace(&mut h, next));
        propagated.push(z);
        pre.push(p);
    }
    let tape = ForwardTape {
        op,
        inputs,
        propagated,
        pre,
        output: h.clone(),
        embeddings_touched: touched,
    };
    Ok((h, tape))
}

/// Whole-graph message passing.
pub fn forward_full<'g>(model: &GnnModel, g: &'g SparseGraph, x: &DenseMatrix) -> Result<(DenseMatrix, ForwardTape<'g>)> {
    if x.rows() != g.num_nodes() {
        return Err(Error::dims("forward_full", g.num_nodes(), x.rows()));
    }
    forward(model, Propagation::Sparse(g.operator(model.arch.propagation())), x)
}

/// How a mini-batch treats its out-of-batch neighbors.
#[derive(Clone, Copy, Debug)]
pub enum BatchMode<'a> {
    /// Drop the out-of-batch messages.
    Plain,
    /// Replace them with the compensation term.
    Compensated(&'a Compensation),
}

/// Mini-batch forward on in-batch features only.
pub fn forward_batch<'a>(
    model: &GnnModel,
    ctx: &'a BatchContext,
    x_batch: &DenseMatrix,
    mode: BatchMode<'a>,
) -> Result<(DenseMatrix, ForwardTape<'a>)> {
    let inner = &ctx.blocks(model.arch.propagation()).inner;
    let op = match mode {
        BatchMode::Plain => Propagation::Sparse(inner),
        BatchMode::Compensated(comp) => {
            if comp.batch() != ctx.batch() {
                return Err(Error::CompensationMismatch);
            }
            if comp.kind() != model.arch.propagation() {
                return Err(Error::InvalidArgument(
                    "compensation was built for a different propagation operator".into(),
                ));
            }
            Propagation::Compensated { inner, comp }
        }
    };
    forward(model, op, x_batch)
}

/// Reverse mode through a recorded forward pass. Returns the weight
/// gradients and the gradient with respect to the input features.
pub fn backward(model: &GnnModel, tape: &ForwardTape<'_>, grad_out: &DenseMatrix) -> Result<(Gradients, DenseMatrix)> {
    if tape.inputs.len() != model.num_layers() {
        return Err(Error::dims("backward: tape length", model.num_layers(), tape.inputs.len()));
    }
    for (l, layer) in model.layers.iter().enumerate() {
        if tape.inputs[l].cols() != layer.weight.rows() || tape.pre[l].cols() != layer.weight.cols() {
            return Err(Error::dims("backward: tape/model layer", format!("{:?}", layer.weight.shape()), format!("layer {l}")));
        }
    }
    if grad_out.shape() != tape.output.shape() {
        return Err(Error::dims(
            "backward: grad_out",
            format!("{:?}", tape.output.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut grads = Gradients::zeros_like(model);
    let mut g = grad_out.clone();
    for l in (0..model.num_layers()).rev() {
        let act = model.layer_activation(l);
        let pre = &tape.pre[l];
        let g_pre = DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * act.derivative(pre.get(i, j)));
        let layer = &model.layers[l];
        g = match &layer.weight_nbr {
            None => {
                grads.layers[l].weight = tape.propagated[l].t_dot(&g_pre);
                tape.op.apply_transpose(&g_pre.dot_t(&layer.weight))?
            }
            Some(w_nbr) => {
                grads.layers[l].weight = tape.inputs[l].t_dot(&g_pre);
                grads.layers[l].weight_nbr = Some(tape.propagated[l].t_dot(&g_pre));
                let mut g_h = g_pre.dot_t(&layer.weight);
                g_h.add_assign(&tape.op.apply_transpose(&g_pre.dot_t(w_nbr))?);
                g_h
            }
        };
    }
    Ok((grads, g))
}

/// Mean softmax cross-entropy over the rows in `mask`, and its gradient
/// with respect to `logits` (zero outside the mask).
pub fn softmax_xent(logits: &DenseMatrix, labels: &[usize], mask: &[usize]) -> Result<(f64, DenseMatrix)> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if labels.len() != logits.rows() {
        return Err(Error::dims("softmax_xent: labels", logits.rows(), labels.len()));
    }
    let classes = logits.cols();
    let scale = 1.0 / mask.len() as f64;
    let mut grad = DenseMatrix::zeros(logits.rows(), classes);
    let mut loss = 0.0;
    for &i in mask {
        if i >= logits.rows() {
            return Err(Error::NodeOutOfRange {
                index: i,
                n: logits.rows(),
            });
        }
        let y = labels[i];
        if y >= classes {
            return Err(Error::LabelOutOfRange {
                node: i,
                label: y,
                classes,
            });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g_row = grad.row_mut(i);
        for (j, g) in g_row.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *g = scale * (p - if j == y { 1.0 } else { 0.0 });
        }
    }
    Ok((loss * scale, grad))
}

/// Fraction of `mask` rows whose argmax equals the label; 0 for an empty mask.
pub fn accuracy(logits: &DenseMatrix, labels: &[usize], mask: &[usize]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    let pred = logits.argmax_rows();
    let hits = mask.iter().filter(|&&i| pred[i] == labels[i]).count();
    hits as f64 / mask.len() as f64
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TOPW";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialize a model.
///
/// Layout, all integers and floats little-endian:
///
/// ```text
/// magic  "TOPW"          4 bytes
/// version u32            = 1
/// arch    u8             0 = gcn, 1 = sage-mean
/// act     u8             0 = identity, 1 = relu, 2 = leaky relu
/// slope   f64            leaky slope (0 otherwise)
/// act_out u8             1 if the last layer is activated
/// seed    u64            init seed
/// L       u32            number of layers
/// dims    (L+1) × u32
/// for each layer l: W_l as dims[l]·dims[l+1] f64 row-major,
///                   then W_nbr_l in the same shape for sage-mean
/// ```
pub fn encode_checkpoint(model: &GnnModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match model.arch {
        Arch::Gcn => 0,
        Arch::SageMean => 1,
    });
    let (act, slope) = match model.activation {
        Activation::Identity => (0u8, 0.0),
        Activation::Relu => (1, 0.0),
        Activation::LeakyRelu(s) => (2, s),
    };
    out.push(act);
    out.extend_from_slice(&slope.to_le_bytes());
    out.push(u8::from(model.activate_output));
    out.extend_from_slice(&model.seed.to_le_bytes());
    out.extend_from_slice(&(model.num_layers() as u32).to_le_bytes());
    for &d in &model.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for w in model.params() {
        for v in w.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<GnnModel, String> {
    let mut r = crate::bytes::Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let arch = match r.u8()? {
        0 => Arch::Gcn,
        1 => Arch::SageMean,
        t => return Err(format!("unknown arch tag {t}")),
    };
    let act_tag = r.u8()?;
    let slope = r.f64()?;
    let activation = match act_tag {
        0 => Activation::Identity,
        1 => Activation::Relu,
        2 => Activation::LeakyRelu(slope),
        t => return Err(format!("unknown activation tag {t}")),
    };
    let activate_output = r.u8()? != 0;
    let seed = r.u64()?;
    let num_layers = r.u32()? as usize;
    let dims = (0..=num_layers).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let mut read_block = |rows: usize, cols: usize| -> std::result::Result<DenseMatrix, String> {
        let data = (0..rows * cols).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        DenseMatrix::new(rows, cols, data).map_err(|e| e.to_string())
    };
    let mut layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let weight = read_block(dims[l], dims[l + 1])?;
        let weight_nbr = match arch {
            Arch::SageMean => Some(read_block(dims[l], dims[l + 1])?),
            Arch::Gcn => None,
        };
        layers.push(Layer { weight, weight_nbr });
    }
    if !r.is_empty() {
        return Err("trailing bytes".into());
    }
    let mut m = GnnModel::from_layers(arch, &dims, activation, activate_output, layers).map_err(|e| e.to_string())?;
    m.seed = seed;
    Ok(m)
}

pub fn write_checkpoint(model: &GnnModel, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<GnnModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|msg| Error::Format { path: path.into(), msg })
}
