//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Everything operates on minibatches stored row-major: an input of shape
//! `(batch, in_dim)` produces an output of shape `(batch, out_dim)`. The
//! single-vector entry points are thin wrappers over a batch of one.

mod adam;
mod gradcheck;
mod persist;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{
    finite_difference_check, relative_error_at, relative_errors, summarize, GradCheck,
};
pub use persist::{read_parameter_set, write_parameter_set, PARAMS_MAGIC, PARAMS_VERSION};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    /// Code used by the binary parameter format.
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(S::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation and the activated value.
    #[inline]
    fn derivative<S: Scalar>(self, pre: S, activated: S) -> S {
        match self {
            Activation::Identity => S::one(),
            Activation::Relu => {
                if pre > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => S::one() - activated * activated,
        }
    }
}

/// How a forward pass treats dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Fresh dropout masks; the tape is meant for a backward pass.
    TrainWithDropout,
    /// No dropout; the output is a pure function of parameters and input.
    EvalDeterministic,
    /// Fresh dropout masks at inference time (Monte-Carlo dropout).
    EvalWithDropout,
}

impl Mode {
    fn uses_dropout(self) -> bool {
        !matches!(self, Mode::EvalDeterministic)
    }
}

/// Fully connected layer `y = act(W x + b)`, followed by inverted dropout
/// on `y` when `dropout_rate > 0` and the mode asks for it.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<S> {
    /// `(out_dim, in_dim)`
    pub weights: Array2<S>,
    pub biases: Array1<S>,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl<S: Scalar> DenseLayer<S> {
    pub fn new(
        weights: Array2<S>,
        biases: Array1<S>,
        activation: Activation,
        dropout_rate: f64,
    ) -> Result<Self> {
        if biases.len() != weights.nrows() {
            return Err(Error::shape(format!(
                "bias length {} does not match weight rows {}",
                biases.len(),
                weights.nrows()
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        if weights.iter().chain(biases.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite layer parameter".into()));
        }
        Ok(Self {
            weights,
            biases,
            activation,
            dropout_rate,
        })
    }

    /// Random layer with weights and biases drawn from
    /// `U(-1/√in_dim, 1/√in_dim)`, whatever the activation.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 {
            return Err(Error::shape("a layer needs at least one input"));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist =
            Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| S::c(dist.sample(rng)));
        let biases = Array1::from_shape_fn(out_dim, |_| S::c(dist.sample(rng)));
        Self::new(weights, biases, activation, dropout_rate)
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Inverted-dropout mask for one layer over a minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<S> {
    /// `(batch, out_dim)`; `true` keeps the unit.
    pub keep: Array2<bool>,
    /// `1 / (1 - rate)`
    pub scale: S,
}

impl<S: Scalar> DropoutMask<S> {
    pub fn sample<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Self {
        let keep_prob = 1.0 - rate;
        let keep = Array2::from_shape_simple_fn((rows, cols), || rng.random::<f64>() < keep_prob);
        Self {
            keep,
            scale: S::c(1.0 / keep_prob),
        }
    }

    fn multiplier(&self, row: usize, col: usize) -> S {
        if self.keep[[row, col]] {
            self.scale
        } else {
            S::zero()
        }
    }
}

/// Per-layer dropout masks for one forward pass; `None` where a layer had
/// no dropout applied.
pub type Masks<S> = Vec<Option<DropoutMask<S>>>;

#[derive(Debug, Clone)]
struct LayerRecord<S> {
    input: Array2<S>,
    pre: Array2<S>,
    activated: Array2<S>,
    mask: Option<DropoutMask<S>>,
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    layers: Vec<LayerRecord<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input.nrows())
    }

    /// The masks that were applied, in layer order.
    pub fn masks(&self) -> Masks<S> {
        self.layers.iter().map(|l| l.mask.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient<S> {
    pub weights: Array2<S>,
    pub biases: Array1<S>,
}

/// Gradient with the same shape as a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<S> {
    pub layers: Vec<LayerGradient<S>>,
}

impl<S: Scalar> Gradient<S> {
    pub fn zeros_like(params: &ParameterSet<S>) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    biases: Array1::zeros(l.biases.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradient<S>) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::State("gradient layer counts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weights.dim() != b.weights.dim() {
                return Err(Error::State("gradient shapes differ".into()));
            }
            a.weights += &b.weights;
            a.biases += &b.biases;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: S) {
        for l in &mut self.layers {
            l.weights.mapv_inplace(|v| v * factor);
            l.biases.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights
                .iter()
                .chain(l.biases.iter())
                .all(|v| v.is_finite())
        })
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_zero()))
    }

    pub fn max_abs(&self) -> S {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
            .fold(S::zero(), |acc, v| acc.max(v.abs()))
    }
}

/// `x Wᵀ + b` for a batch of rows. Batches of a few rows use a plain
/// unrolled loop; the blocked matrix product only pays off for larger ones.
fn affine<S: Scalar>(input: &Array2<S>, layer: &DenseLayer<S>) -> Array2<S> {
    const SMALL_BATCH: usize = 16;
    if input.nrows() <= SMALL_BATCH {
        if let (Some(x), Some(w)) = (input.as_slice(), layer.weights.as_slice()) {
            let (in_dim, out_dim) = (layer.in_dim(), layer.out_dim());
            let mut out = Array2::zeros((input.nrows(), out_dim));
            for (xr, orow) in x.chunks_exact(in_dim).zip(out.rows_mut()) {
                for ((o, wr), b) in orow
                    .into_iter()
                    .zip(w.chunks_exact(in_dim))
                    .zip(&layer.biases)
                {
                    *o = dot_unrolled(xr, wr) + *b;
                }
            }
            return out;
        }
    }
    let mut pre = input.dot(&layer.weights.t());
    pre += &layer.biases;
    pre
}

fn dot_unrolled<S: Scalar>(a: &[S], b: &[S]) -> S {
    // Independent lanes let the compiler vectorize; the tree reduction keeps
    // the dependency chain short for narrow inputs.
    const LANES: usize = 16;
    let mut acc = [S::zero(); LANES];
    let wide = a.len() - a.len() % LANES;
    for (ac, bc) in a[..wide]
        .chunks_exact(LANES)
        .zip(b[..wide].chunks_exact(LANES))
    {
        for lane in 0..LANES {
            acc[lane] += ac[lane] * bc[lane];
        }
    }
    let narrow = a.len() - a.len() % 4;
    for (ac, bc) in a[wide..narrow]
        .chunks_exact(4)
        .zip(b[wide..narrow].chunks_exact(4))
    {
        for lane in 0..4 {
            acc[lane] += ac[lane] * bc[lane];
        }
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for lane in 0..width {
            let upper = acc[lane + width];
            acc[lane] += upper;
        }
    }
    let mut total = acc[0];
    for (x, y) in a[narrow..].iter().zip(&b[narrow..]) {
        total += *x * *y;
    }
    total
}

/// Ordered stack of dense layers whose dimensions chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<S> {
    pub layers: Vec<DenseLayer<S>>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new(layers: Vec<DenseLayer<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("a network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Multilayer perceptron with `hidden` layers of the given widths, each
    /// using `hidden_activation` and `hidden_dropout`, then a linear output
    /// layer without dropout.
    pub fn mlp<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        hidden_activation: Activation,
        hidden_dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for &width in hidden {
            layers.push(DenseLayer::init(
                prev,
                width,
                hidden_activation,
                hidden_dropout,
                rng,
            )?);
            prev = width;
        }
        layers.push(DenseLayer::init(
            prev,
            out_dim,
            Activation::Identity,
            0.0,
            rng,
        )?);
        Self::new(layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| l.dropout_rate > 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights
                .iter()
                .chain(l.biases.iter())
                .all(|v| v.is_finite())
        })
    }

    /// Draws one mask per dropout layer for a batch of `rows` inputs.
    /// Layers with rate 0 consume no randomness.
    pub fn sample_masks<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Masks<S> {
        self.layers
            .iter()
            .map(|l| {
                (l.dropout_rate > 0.0)
                    .then(|| DropoutMask::sample(rows, l.out_dim(), l.dropout_rate, rng))
            })
            .collect()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: ArrayView2<S>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<S>, Tape<S>)> {
        let masks = if mode.uses_dropout() {
            self.sample_masks(input.nrows(), rng)
        } else {
            vec![None; self.layers.len()]
        };
        self.forward_with_masks(input, &masks)
    }

    /// Forward pass with caller-supplied masks; deterministic.
    pub fn forward_with_masks(
        &self,
        input: ArrayView2<S>,
        masks: &[Option<DropoutMask<S>>],
    ) -> Result<(Array2<S>, Tape<S>)> {
        let mut records = Vec::with_capacity(self.layers.len());
        let out = self.run(input, masks, Some(&mut records))?;
        Ok((out, Tape { layers: records }))
    }

    /// [`forward_with_masks`](Self::forward_with_masks) without recording a
    /// tape.
    pub fn forward_masked(
        &self,
        input: ArrayView2<S>,
        masks: &[Option<DropoutMask<S>>],
    ) -> Result<Array2<S>> {
        self.run(input, masks, None)
    }

    /// Dropout-free forward pass without a tape.
    pub fn forward_eval(&self, input: ArrayView2<S>) -> Result<Array2<S>> {
        let masks = vec![None; self.layers.len()];
        self.run(input, &masks, None)
    }

    fn run(
        &self,
        input: ArrayView2<S>,
        masks: &[Option<DropoutMask<S>>],
        mut records: Option<&mut Vec<LayerRecord<S>>>,
    ) -> Result<Array2<S>> {
        if masks.len() != self.layers.len() {
            return Err(Error::State(format!(
                "{} masks supplied for {} layers",
                masks.len(),
                self.layers.len()
            )));
        }
        let rows = input.nrows();
        let mut current = input.to_owned();
        for (i, (layer, mask)) in self.layers.iter().zip(masks).enumerate() {
            if current.ncols() != layer.in_dim() {
                return Err(Error::shape(format!(
                    "layer {i}: expected input dimension {}, got {}",
                    layer.in_dim(),
                    current.ncols()
                )));
            }
            if let Some(m) = mask {
                if m.keep.dim() != (rows, layer.out_dim()) {
                    return Err(Error::State(format!(
                        "layer {i}: dropout mask shape mismatch"
                    )));
                }
            }
            let pre = affine(&current, layer);
            let act = layer.activation;
            let activated = pre.mapv(|v| act.apply(v));
            let dropped = |m: &DropoutMask<S>| {
                Zip::from(&activated).and(&m.keep).map_collect(|&v, &keep| {
                    if keep {
                        v * m.scale
                    } else {
                        S::zero()
                    }
                })
            };
            current = match (records.as_deref_mut(), mask) {
                (Some(records), _) => {
                    let out = mask.as_ref().map_or_else(|| activated.clone(), dropped);
                    records.push(LayerRecord {
                        input: current,
                        pre,
                        activated,
                        mask: mask.clone(),
                    });
                    out
                }
                (None, Some(m)) => dropped(m),
                (None, None) => activated,
            };
        }
        Ok(current)
    }

    /// Single-vector convenience wrapper around [`forward`](Self::forward).
    pub fn forward_vec<R: Rng + ?Sized>(
        &self,
        input: ArrayView1<S>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array1<S>, Tape<S>)> {
        let batch = input.insert_axis(Axis(0));
        let (out, tape) = self.forward(batch, mode, rng)?;
        Ok((out.row(0).to_owned(), tape))
    }

    /// Gradient of a scalar `L` with respect to the parameters and the
    /// input, given `dL/d(output)` for the batch recorded on `tape`.
    pub fn backward(
        &self,
        tape: &Tape<S>,
        output_gradient: ArrayView2<S>,
    ) -> Result<(Gradient<S>, Array2<S>)> {
        if tape.layers.len() != self.layers.len() {
            return Err(Error::State(format!(
                "tape has {} layers, network has {}",
                tape.layers.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, rec)) in self.layers.iter().zip(&tape.layers).enumerate() {
            if rec.input.ncols() != layer.in_dim() || rec.pre.ncols() != layer.out_dim() {
                return Err(Error::State(format!("tape does not match layer {i}")));
            }
        }
        let rows = tape.batch_size();
        if output_gradient.dim() != (rows, self.out_dim()) {
            return Err(Error::shape(format!(
                "output gradient has shape {:?}, expected ({rows}, {})",
                output_gradient.dim(),
                self.out_dim()
            )));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_gradient.to_owned();
        for (layer, rec) in self.layers.iter().zip(&tape.layers).rev() {
            let act = layer.activation;
            if let Some(m) = &rec.mask {
                Zip::indexed(&mut upstream).for_each(|(r, c), g| *g *= m.multiplier(r, c));
            }
            Zip::from(&mut upstream)
                .and(&rec.pre)
                .and(&rec.activated)
                .for_each(|g, &p, &a| *g *= act.derivative(p, a));
            let weights = upstream.t().dot(&rec.input);
            let biases = upstream.sum_axis(Axis(0));
            let input_grad = upstream.dot(&layer.weights);
            grads.push(LayerGradient { weights, biases });
            upstream = input_grad;
        }
        grads.reverse();
        Ok((Gradient { layers: grads }, upstream))
    }
}

/// Flat, index-addressable view of a parameter container. Used by the
/// finite-difference checker and by tests that perturb single weights.
pub trait FlatParams<S> {
    fn num_params(&self) -> usize;
    fn param(&self, index: usize) -> S;
    fn set_param(&mut self, index: usize, value: S);
}

fn locate(index: usize, sizes: impl Iterator<Item = (usize, usize)>) -> (usize, bool, usize) {
    let mut offset = index;
    for (layer, (w, b)) in sizes.enumerate() {
        if offset < w {
            return (layer, true, offset);
        }
        offset -= w;
        if offset < b {
            return (layer, false, offset);
        }
        offset -= b;
    }
    panic!("parameter index {index} out of range");
}

fn flat_get<S: Copy>(w: &Array2<S>, b: &Array1<S>, is_weight: bool, offset: usize) -> S {
    if is_weight {
        let cols = w.ncols();
        w[[offset / cols, offset % cols]]
    } else {
        b[offset]
    }
}

fn flat_set<S>(w: &mut Array2<S>, b: &mut Array1<S>, is_weight: bool, offset: usize, value: S) {
    if is_weight {
        let cols = w.ncols();
        w[[offset / cols, offset % cols]] = value;
    } else {
        b[offset] = value;
    }
}

impl<S: Scalar> FlatParams<S> for ParameterSet<S> {
    fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    fn param(&self, index: usize) -> S {
        let (l, is_w, off) = locate(
            index,
            self.layers
                .iter()
                .map(|l| (l.weights.len(), l.biases.len())),
        );
        flat_get(&self.layers[l].weights, &self.layers[l].biases, is_w, off)
    }

    fn set_param(&mut self, index: usize, value: S) {
        let (l, is_w, off) = locate(
            index,
            self.layers
                .iter()
                .map(|l| (l.weights.len(), l.biases.len())),
        );
        let layer = &mut self.layers[l];
        flat_set(&mut layer.weights, &mut layer.biases, is_w, off, value);
    }
}

impl<S: Scalar> FlatParams<S> for Gradient<S> {
    fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    fn param(&self, index: usize) -> S {
        let (l, is_w, off) = locate(
            index,
            self.layers
                .iter()
                .map(|l| (l.weights.len(), l.biases.len())),
        );
        flat_get(&self.layers[l].weights, &self.layers[l].biases, is_w, off)
    }

    fn set_param(&mut self, index: usize, value: S) {
        let (l, is_w, off) = locate(
            index,
            self.layers
                .iter()
                .map(|l| (l.weights.len(), l.biases.len())),
        );
        let layer = &mut self.layers[l];
        flat_set(&mut layer.weights, &mut layer.biases, is_w, off, value);
    }
}
