use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{gemm, DenseArray};
use crate::error::{QflowError, Result};

use super::batchnorm::{BatchNormLayer, BatchNormSettings, BnTape};
use super::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One affine layer, optionally batch-normalized before its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in × out`, so that `y = x · W + b` for row-major batches.
    pub weight: DenseArray,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub norm: Option<BatchNormLayer>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Uniform fan-in initialization `U(-1/√fan_in, 1/√fan_in)` for weights and bias.
    pub fn init_uniform<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        norm: Option<BatchNormSettings>,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..=bound)).collect();
        let bias = (0..out_dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Self {
            weight: DenseArray::new(in_dim, out_dim, weight)?,
            bias,
            activation,
            norm: norm.map(|s| BatchNormLayer::new(out_dim, s)).transpose()?,
        })
    }

    pub fn zero_init(&mut self) {
        self.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }
}

/// Fixed-topology architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Normalize the network input and every hidden pre-activation.
    pub batch_norm: Option<BatchNormSettings>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    input: DenseArray,
    norm: Option<BnTape>,
    output: DenseArray,
}

/// Activations recorded during a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct Tape {
    mode: Mode,
    recorded: bool,
    input_norm: Option<BnTape>,
    layers: Vec<LayerTape>,
}

impl Tape {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Parameter gradients in the order of [`MlpNetwork::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// `None` when only input gradients were requested.
    pub params: Option<ParamGrads>,
    pub input: DenseArray,
}

/// Multi-layer perceptron with manual forward/backward passes.
#[derive(Debug, Clone)]
pub struct MlpNetwork {
    name: String,
    input_norm: Option<BatchNormLayer>,
    layers: Vec<DenseLayer>,
    cache: Option<Tape>,
}

impl PartialEq for MlpNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.input_norm == other.input_norm && self.layers == other.layers
    }
}

impl MlpNetwork {
    pub fn new<R: Rng + ?Sized>(name: impl Into<String>, spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        if spec.input_dim == 0 || spec.output_dim == 0 {
            return Err(QflowError::InvalidArgument(format!(
                "network dims must be positive (input {}, output {})",
                spec.input_dim, spec.output_dim
            )));
        }
        let input_norm = spec
            .batch_norm
            .map(|s| BatchNormLayer::new(spec.input_dim, s))
            .transpose()?;
        let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
        let mut prev = spec.input_dim;
        for &width in &spec.hidden {
            layers.push(DenseLayer::init_uniform(prev, width, spec.hidden_activation, spec.batch_norm, rng)?);
            prev = width;
        }
        layers.push(DenseLayer::init_uniform(prev, spec.output_dim, spec.output_activation, None, rng)?);
        Self::from_layers(name, input_norm, layers)
    }

    pub fn from_layers(
        name: impl Into<String>,
        input_norm: Option<BatchNormLayer>,
        layers: Vec<DenseLayer>,
    ) -> Result<Self> {
        let name = name.into();
        if layers.is_empty() {
            return Err(QflowError::InvalidArgument(format!("network {name} has no layers")));
        }
        if let Some(n) = &input_norm {
            if n.dim() != layers[0].in_dim() {
                return Err(QflowError::dims(format!("{name} input norm"), layers[0].in_dim(), n.dim()));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(QflowError::dims(format!("{name} layer {i} bias"), l.out_dim(), l.bias.len()));
            }
            if let Some(n) = &l.norm {
                if n.dim() != l.out_dim() {
                    return Err(QflowError::dims(format!("{name} layer {i} norm"), l.out_dim(), n.dim()));
                }
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(QflowError::dims(
                    format!("{name} layer {i} input"),
                    layers[i - 1].out_dim(),
                    l.in_dim(),
                ));
            }
        }
        Ok(Self {
            name,
            input_norm,
            layers,
            cache: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim())
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub(crate) fn parts_mut(&mut self) -> (Option<&mut BatchNormLayer>, &mut [DenseLayer]) {
        (self.input_norm.as_mut(), &mut self.layers)
    }

    pub fn input_norm(&self) -> Option<&BatchNormLayer> {
        self.input_norm.as_ref()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.input_norm.is_some() || self.layers.iter().any(|l| l.norm.is_some())
    }

    fn check_input(&self, input: &DenseArray) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(QflowError::dims(
                format!("{} layer 0 input", self.name),
                self.input_dim(),
                input.cols(),
            ));
        }
        Ok(())
    }

    fn run_inner(&self, input: &DenseArray, mode: Mode, record: bool) -> Result<(DenseArray, Option<Tape>)> {
        self.check_input(input)?;
        let mut x;
        let mut input_tape = None;
        match &self.input_norm {
            Some(bn) => {
                let (y, t) = bn.forward(input, mode);
                x = y;
                input_tape = Some(t);
            }
            None => x = input.clone(),
        }
        let mut tapes = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        for layer in &self.layers {
            let mut z = DenseArray::zeros(x.rows(), layer.out_dim());
            for r in 0..z.rows() {
                z.row_mut(r).copy_from_slice(&layer.bias);
            }
            gemm(1.0, &x, false, &layer.weight, false, 1.0, &mut z);
            let mut norm_tape = None;
            if let Some(bn) = &layer.norm {
                let (y, t) = bn.forward(&z, mode);
                z = y;
                norm_tape = Some(t);
            }
            let act = layer.activation;
            if act != Activation::Identity {
                z.map_inplace(|v| act.apply(v));
            }
            if record {
                tapes.push(LayerTape {
                    input: x,
                    norm: norm_tape,
                    output: z.clone(),
                });
            } else if mode == Mode::Train {
                // batch statistics must survive for apply_running_stats
                tapes.push(LayerTape {
                    input: DenseArray::zeros(0, 0),
                    norm: norm_tape,
                    output: DenseArray::zeros(0, 0),
                });
            }
            x = z;
        }
        let tape = (record || mode == Mode::Train).then_some(Tape {
            mode,
            recorded: record,
            input_norm: input_tape,
            layers: tapes,
        });
        Ok((x, tape))
    }

    /// Pure forward pass returning the tape needed for [`Self::backward_tape`].
    /// Running statistics are not touched; see [`Self::apply_running_stats`].
    pub fn run(&self, input: &DenseArray, mode: Mode) -> Result<(DenseArray, Tape)> {
        let (y, tape) = self.run_inner(input, mode, true)?;
        Ok((y, tape.expect("recording forward yields a tape")))
    }

    /// Eval-mode forward with no recording and no mutation.
    pub fn predict(&self, input: &DenseArray) -> Result<DenseArray> {
        Ok(self.run_inner(input, Mode::Eval, false)?.0)
    }

    /// Folds the batch statistics of a train-mode tape into the running statistics.
    pub fn apply_running_stats(&mut self, tape: &Tape) {
        if tape.mode != Mode::Train {
            return;
        }
        if let (Some(bn), Some(t)) = (self.input_norm.as_mut(), tape.input_norm.as_ref()) {
            bn.update_running(t);
        }
        for (layer, lt) in self.layers.iter_mut().zip(&tape.layers) {
            if let (Some(bn), Some(nt)) = (layer.norm.as_mut(), lt.norm.as_ref()) {
                bn.update_running(nt);
            }
        }
    }

    /// Forward pass that caches its tape for a following [`Self::backward`]. In train
    /// mode running statistics are updated.
    pub fn forward(&mut self, input: &DenseArray, mode: Mode) -> Result<DenseArray> {
        if self.cache.is_some() {
            return Err(QflowError::ReentrantForward(self.name.clone()));
        }
        let (y, tape) = self.run(input, mode)?;
        self.apply_running_stats(&tape);
        self.cache = Some(tape);
        Ok(y)
    }

    /// Drops a pending cached forward.
    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn has_cached_forward(&self) -> bool {
        self.cache.is_some()
    }

    /// Backward through the cached forward, consuming it.
    pub fn backward(&mut self, upstream: &DenseArray) -> Result<Gradients> {
        let tape = self
            .cache
            .take()
            .ok_or_else(|| QflowError::NoCachedForward(self.name.clone()))?;
        self.backward_tape(&tape, upstream, true)
    }

    /// Backpropagates `upstream` (∂loss/∂output) through a recorded tape.
    pub fn backward_tape(&self, tape: &Tape, upstream: &DenseArray, with_params: bool) -> Result<Gradients> {
        if !tape.recorded || tape.layers.len() != self.layers.len() {
            return Err(QflowError::NoCachedForward(format!("{} (tape without activations)", self.name)));
        }
        let last = tape.layers.last().expect("non-empty");
        if upstream.shape() != last.output.shape() {
            let ctx = format!("{} upstream gradient", self.name);
            return Err(if upstream.rows() != last.output.rows() {
                QflowError::dims(ctx, last.output.rows(), upstream.rows())
            } else {
                QflowError::dims(ctx, last.output.cols(), upstream.cols())
            });
        }
        let mut per_layer: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        let mut grad = upstream.clone();
        for (layer, lt) in self.layers.iter().zip(&tape.layers).rev() {
            let act = layer.activation;
            if act != Activation::Identity {
                for (g, &y) in grad.data_mut().iter_mut().zip(lt.output.data()) {
                    *g *= act.derivative_from_output(y);
                }
            }
            let mut norm_grads = None;
            if let (Some(bn), Some(nt)) = (&layer.norm, &lt.norm) {
                let (dx, dg, db) = bn.backward(nt, &grad);
                grad = dx;
                norm_grads = Some((dg, db));
            }
            let mut tensors = Vec::new();
            if with_params {
                let mut dw = DenseArray::zeros(layer.in_dim(), layer.out_dim());
                gemm(1.0, &lt.input, true, &grad, false, 0.0, &mut dw);
                let mut db = vec![0.0; layer.out_dim()];
                for r in grad.iter_rows() {
                    for (d, v) in db.iter_mut().zip(r) {
                        *d += v;
                    }
                }
                tensors.push(dw.into_data());
                tensors.push(db);
                if let Some((dg, dbeta)) = norm_grads {
                    tensors.push(dg);
                    tensors.push(dbeta);
                }
            }
            per_layer.push(tensors);
            let mut dx = DenseArray::zeros(grad.rows(), layer.in_dim());
            gemm(1.0, &grad, false, &layer.weight, true, 0.0, &mut dx);
            grad = dx;
        }
        let mut input_norm_grads = None;
        if let (Some(bn), Some(nt)) = (&self.input_norm, &tape.input_norm) {
            let (dx, dg, db) = bn.backward(nt, &grad);
            grad = dx;
            input_norm_grads = Some((dg, db));
        }
        let params = with_params.then(|| {
            let mut tensors = Vec::new();
            if let Some((dg, db)) = input_norm_grads {
                tensors.push(dg);
                tensors.push(db);
            }
            for t in per_layer.into_iter().rev() {
                tensors.extend(t);
            }
            ParamGrads { tensors }
        });
        Ok(Gradients { params, input: grad })
    }

    /// Trainable tensors: input-norm (γ, β), then per layer W, b and (γ, β) when normalized.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(bn) = &self.input_norm {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(&l.bias);
            if let Some(bn) = &l.norm {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(bn) = &mut self.input_norm {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(&mut l.bias);
            if let Some(bn) = &mut l.norm {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.len()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().sum()
    }

    /// Running statistics of every batch-norm layer, input norm first.
    pub fn running_stats(&self) -> Vec<&[f64]> {
        self.norms().flat_map(|bn| [bn.running_mean.as_slice(), bn.running_var.as_slice()]).collect()
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(bn) = &mut self.input_norm {
            out.push(&mut bn.running_mean);
            out.push(&mut bn.running_var);
        }
        for l in &mut self.layers {
            if let Some(bn) = &mut l.norm {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out
    }

    pub fn norms(&self) -> impl Iterator<Item = &BatchNormLayer> {
        self.input_norm.iter().chain(self.layers.iter().filter_map(|l| l.norm.as_ref()))
    }
}
