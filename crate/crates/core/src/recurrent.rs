//! Stacked (bi)directional LSTM student network with exact backpropagation
//! through time.
//!
//! Gate blocks are always concatenated in the order `[i, f, g, o]`: rows
//! `0..H` of `W`, `U` and `b` belong to the input gate, `H..2H` to the forget
//! gate, `2H..3H` to the candidate and `3H..4H` to the output gate. Checkpoints
//! depend on this layout.
//!
//! A bidirectional layer runs one cell left to right and a second cell right
//! to left, and emits `[h_fw(t) | h_bw(t)]` at every timestep. The sequence
//! summary fed to the classifier head is the final forward state concatenated
//! with the backward state at the first timestep.

use rand::Rng as _;
use rand_distr::{Bernoulli, Distribution, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{gemv_into, gemv_t_into, outer_acc, sigmoid, Matrix};
use crate::rng;

pub const MAX_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackConfig {
    pub depth: usize,
    pub hidden: usize,
    pub bidirectional: bool,
    pub recurrent_dropout: f64,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            hidden: 64,
            bidirectional: true,
            recurrent_dropout: 0.5,
            num_classes: 40,
            input_channels: 128,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            return Err(Error::domain(format!(
                "depth must be in 1..={MAX_DEPTH}, got {}",
                self.depth
            )));
        }
        if self.hidden == 0 || self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::domain(
                "hidden, num_classes and input_channels must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.recurrent_dropout) {
            return Err(Error::domain(format!(
                "recurrent dropout must be in [0, 1), got {}",
                self.recurrent_dropout
            )));
        }
        Ok(())
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Width of the per-timestep output of every layer, and of the feature vector.
    pub fn feature_dim(&self) -> usize {
        self.hidden * self.directions()
    }

    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_channels
        } else {
            self.feature_dim()
        }
    }
}

/// Parameters of one LSTM cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    /// `4H x input_dim`
    pub w: Matrix,
    /// `4H x H`
    pub u: Matrix,
    /// `1 x 4H`
    pub b: Matrix,
}

impl LstmCellParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w: Matrix::zeros(4 * hidden, input_dim),
            u: Matrix::zeros(4 * hidden, hidden),
            b: Matrix::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.u.rows() != 4 * h || self.w.rows() != 4 * h || self.b.shape() != (1, 4 * h) {
            return Err(Error::shape(format!(
                "inconsistent cell parameters W {:?} U {:?} b {:?}",
                self.w.shape(),
                self.u.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub forward: LstmCellParams,
    pub backward: Option<LstmCellParams>,
}

/// Dense classifier on top of the feature vector: `logits = features * W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead {
    /// `feature_dim x num_classes`
    pub w: Matrix,
    /// `1 x num_classes`
    pub b: Matrix,
}

/// All trainable tensors of a stack. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layers: Vec<LayerParams>,
    pub head: DenseHead,
}

pub type Gradients = Parameters;

impl Parameters {
    pub fn zeros(config: &StackConfig) -> Self {
        let layers = (0..config.depth)
            .map(|l| {
                let input = config.layer_input_dim(l);
                LayerParams {
                    forward: LstmCellParams::zeros(input, config.hidden),
                    backward: config
                        .bidirectional
                        .then(|| LstmCellParams::zeros(input, config.hidden)),
                }
            })
            .collect();
        Self {
            layers,
            head: DenseHead {
                w: Matrix::zeros(config.feature_dim(), config.num_classes),
                b: Matrix::zeros(1, config.num_classes),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let zc = |c: &LstmCellParams| LstmCellParams {
            w: z(&c.w),
            u: z(&c.u),
            b: z(&c.b),
        };
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    forward: zc(&l.forward),
                    backward: l.backward.as_ref().map(zc),
                })
                .collect(),
            head: DenseHead {
                w: z(&self.head.w),
                b: z(&self.head.b),
            },
        }
    }

    /// Tensor names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (dir, present) in [("fw", true), ("bw", layer.backward.is_some())] {
                if present {
                    for t in ["W", "U", "b"] {
                        names.push(format!("layer{l}.{dir}.{t}"));
                    }
                }
            }
        }
        names.push("head.W".into());
        names.push("head.b".into());
        names
    }

    /// Tensors in the same order as [`Parameters::names`].
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for cell in std::iter::once(&layer.forward).chain(layer.backward.as_ref()) {
                out.extend([&cell.w, &cell.u, &cell.b]);
            }
        }
        out.extend([&self.head.w, &self.head.b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for cell in std::iter::once(&mut layer.forward).chain(layer.backward.as_mut()) {
                out.extend([&mut cell.w, &mut cell.u, &mut cell.b]);
            }
        }
        out.extend([&mut self.head.w, &mut self.head.b]);
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|m| m.data().len()).sum()
    }

    /// `self += alpha * other`; shapes must match.
    pub fn axpy(&mut self, alpha: f64, other: &Parameters) -> Result<()> {
        let others = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != others.len() {
            return Err(Error::shape("parameter sets have different layouts"));
        }
        for (a, b) in mine.into_iter().zip(others) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

/// The student network.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStack {
    config: StackConfig,
    pub params: Parameters,
}

fn glorot(rng: &mut rng::Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape by construction")
}

impl LstmStack {
    /// Glorot-uniform weights, zero biases except the forget gate at 1.0.
    pub fn init(config: StackConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let cell = |layer: usize, dir: u64| {
            let input = config.layer_input_dim(layer);
            let mut rng = rng::stream(seed, "init.cell", &[layer as u64, dir]);
            let w = glorot(&mut rng, 4 * h, input, input, 4 * h);
            let u = glorot(&mut rng, 4 * h, h, h, 4 * h);
            let mut b = Matrix::zeros(1, 4 * h);
            b.data_mut()[h..2 * h].fill(1.0);
            LstmCellParams { w, u, b }
        };
        let layers = (0..config.depth)
            .map(|l| LayerParams {
                forward: cell(l, 0),
                backward: config.bidirectional.then(|| cell(l, 1)),
            })
            .collect();
        let mut rng = rng::stream(seed, "init.head", &[]);
        let f = config.feature_dim();
        let c = config.num_classes;
        let head = DenseHead {
            w: glorot(&mut rng, f, c, f, c),
            b: Matrix::zeros(1, c),
        };
        Ok(Self {
            config,
            params: Parameters { layers, head },
        })
    }

    /// Wraps existing parameters, checking they match `config`.
    pub fn from_parts(config: StackConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        let expected = Parameters::zeros(&config);
        let ok = expected.names() == params.names()
            && expected
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if !ok {
            return Err(Error::shape("parameters do not match the stack configuration"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn check_signal(&self, signal: &Matrix) -> Result<()> {
        if signal.cols() != self.config.input_channels {
            return Err(Error::shape(format!(
                "signal has {} channels, stack expects {}",
                signal.cols(),
                self.config.input_channels
            )));
        }
        if !signal.is_finite() {
            return Err(Error::Numeric("signal contains non-finite values".into()));
        }
        Ok(())
    }

    /// Runs the stack. In training mode, dropout masks are drawn from `seed`
    /// and a trace for [`LstmStack::backward`] is kept.
    pub fn forward(&self, signal: &Matrix, training: bool, seed: u64) -> Result<ForwardOutput> {
        if training {
            let masks = DropoutMasks::sample(&self.config, seed);
            self.forward_with_masks(signal, &masks)
        } else {
            self.check_signal(signal)?;
            let (_, features, logits) = self.run(signal, None);
            Ok(ForwardOutput {
                logits,
                features,
                trace: None,
            })
        }
    }

    /// Training-mode forward pass with explicit dropout masks.
    pub fn forward_with_masks(&self, signal: &Matrix, masks: &DropoutMasks) -> Result<ForwardOutput> {
        self.check_signal(signal)?;
        masks.check(&self.config)?;
        let (layers, features, logits) = self.run(signal, Some(masks));
        Ok(ForwardOutput {
            logits: logits.clone(),
            features: features.clone(),
            trace: Some(ForwardTrace {
                config: self.config,
                signal: signal.clone(),
                layers,
                features,
            }),
        })
    }

    /// Inference-mode logits and features.
    pub fn infer(&self, signal: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.forward(signal, false, 0)?;
        Ok((out.logits, out.features))
    }

    /// Per-timestep outputs of the final layer (inference mode), `T x feature_dim`.
    pub fn sequence_outputs(&self, signal: &Matrix) -> Result<Matrix> {
        self.check_signal(signal)?;
        let (layers, _, _) = self.run(signal, None);
        Ok(layers.last().expect("depth >= 1").output())
    }

    fn run(
        &self,
        signal: &Matrix,
        masks: Option<&DropoutMasks>,
    ) -> (Vec<LayerTrace>, Vec<f64>, Vec<f64>) {
        let steps = signal.rows();
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.config.depth);
        for (l, layer) in self.params.layers.iter().enumerate() {
            let input_owned;
            let input = match traces.last() {
                None => signal,
                Some(prev) => {
                    input_owned = prev.output();
                    &input_owned
                }
            };
            let mask_fw = masks.map(|m| m.layers[l].0.as_slice());
            let fw = run_direction(&layer.forward, input, false, mask_fw, self.config.recurrent_dropout);
            let bw = layer.backward.as_ref().map(|cell| {
                let mask_bw = masks.and_then(|m| m.layers[l].1.as_deref());
                run_direction(cell, input, true, mask_bw, self.config.recurrent_dropout)
            });
            traces.push(LayerTrace { fw, bw });
        }
        let last = traces.last().expect("depth >= 1");
        let mut features = last.fw.hidden.row(steps - 1).to_vec();
        if let Some(bw) = &last.bw {
            features.extend_from_slice(bw.hidden.row(0));
        }
        debug_assert_eq!(features.len(), self.config.feature_dim());
        let logits = self.head_forward(&features);
        (traces, features, logits)
    }

    fn head_forward(&self, features: &[f64]) -> Vec<f64> {
        let head = &self.params.head;
        let mut logits = head.b.data().to_vec();
        for (f, &x) in features.iter().enumerate() {
            for (o, &w) in logits.iter_mut().zip(head.w.row(f)) {
                *o += x * w;
            }
        }
        logits
    }

    /// Gradients of `sum_k grad_logits[k] * logits[k]` with respect to every
    /// parameter, using the trace (and dropout masks) of `out`.
    pub fn backward(&self, out: &ForwardOutput, grad_logits: &[f64]) -> Result<Gradients> {
        let trace = out.trace.as_ref().ok_or_else(|| {
            Error::State("backward requires a trace from a training-mode forward pass".into())
        })?;
        if trace.config != self.config {
            return Err(Error::State("trace was produced by a differently configured stack".into()));
        }
        if grad_logits.len() != self.config.num_classes {
            return Err(Error::shape(format!(
                "grad_logits has length {}, expected {}",
                grad_logits.len(),
                self.config.num_classes
            )));
        }
        if grad_logits.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite logit gradient".into()));
        }

        let cfg = &self.config;
        let h = cfg.hidden;
        let steps = trace.signal.rows();
        let mut grads = self.params.zeros_like();

        // Head.
        outer_acc(&mut grads.head.w, &trace.features, grad_logits);
        for (g, &d) in grads.head.b.data_mut().iter_mut().zip(grad_logits) {
            *g += d;
        }
        let mut d_features = vec![0.0; cfg.feature_dim()];
        gemv_into(&self.params.head.w, grad_logits, &mut d_features);

        // Gradient w.r.t. the final layer's per-timestep outputs.
        let mut d_out = Matrix::zeros(steps, cfg.feature_dim());
        d_out.row_mut(steps - 1)[..h].copy_from_slice(&d_features[..h]);
        if cfg.bidirectional {
            d_out.row_mut(0)[h..].copy_from_slice(&d_features[h..]);
        }

        for l in (0..cfg.depth).rev() {
            let layer_trace = &trace.layers[l];
            let params = &self.params.layers[l];
            let input_owned;
            let input = if l == 0 {
                &trace.signal
            } else {
                input_owned = trace.layers[l - 1].output();
                &input_owned
            };
            let mut d_input = (l > 0).then(|| Matrix::zeros(steps, input.cols()));
            let layer_grads = &mut grads.layers[l];
            backprop_direction(
                &params.forward,
                &mut layer_grads.forward,
                input,
                &layer_trace.fw,
                false,
                &d_out,
                0,
                d_input.as_mut(),
            );
            if let (Some(p), Some(g), Some(tr)) = (
                params.backward.as_ref(),
                layer_grads.backward.as_mut(),
                layer_trace.bw.as_ref(),
            ) {
                backprop_direction(p, g, input, tr, true, &d_out, h, d_input.as_mut());
            }
            if let Some(d) = d_input {
                d_out = d;
            }
        }
        Ok(grads)
    }
}

/// Result of [`LstmStack::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub features: Vec<f64>,
    pub trace: Option<ForwardTrace>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    config: StackConfig,
    signal: Matrix,
    layers: Vec<LayerTrace>,
    features: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    fw: DirectionTrace,
    bw: Option<DirectionTrace>,
}

impl LayerTrace {
    fn output(&self) -> Matrix {
        match &self.bw {
            None => self.fw.hidden.clone(),
            Some(bw) => {
                let steps = self.fw.hidden.rows();
                let h = self.fw.hidden.cols();
                let mut out = Matrix::zeros(steps, 2 * h);
                for t in 0..steps {
                    let row = out.row_mut(t);
                    row[..h].copy_from_slice(self.fw.hidden.row(t));
                    row[h..].copy_from_slice(bw.hidden.row(t));
                }
                out
            }
        }
    }
}

/// Per-timestep caches of one direction, indexed by absolute time.
#[derive(Debug, Clone)]
struct DirectionTrace {
    /// Post-activation gates `[i, f, g, o]`, `T x 4H`.
    gates: Matrix,
    cells: Matrix,
    hidden: Matrix,
    /// Scaled mask `m / (1 - p)` applied to the recurrent input, if any.
    mask: Option<Vec<f64>>,
}

/// Gate activations of a single cell step.
#[derive(Debug, Clone, PartialEq)]
pub struct GateCache {
    pub input: Vec<f64>,
    pub forget: Vec<f64>,
    pub candidate: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellStep {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub gates: GateCache,
}

/// One LSTM step:
/// `c = f*c_prev + i*g`, `h = o*tanh(c)` with `i, f, o = sigmoid(.)`, `g = tanh(.)`.
pub fn cell_forward(x: &[f64], h_prev: &[f64], c_prev: &[f64], p: &LstmCellParams) -> Result<CellStep> {
    p.check()?;
    let h = p.hidden();
    if x.len() != p.input_dim() || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::shape(format!(
            "cell expects x[{}], h[{h}], c[{h}]; got x[{}], h[{}], c[{}]",
            p.input_dim(),
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    if x.iter().chain(h_prev).chain(c_prev).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite cell input".into()));
    }
    let mut gates = vec![0.0; 4 * h];
    let mut c = vec![0.0; h];
    let mut h_out = vec![0.0; h];
    cell_step(p, x, h_prev, c_prev, &mut gates, &mut c, &mut h_out);
    Ok(CellStep {
        h: h_out,
        c,
        gates: GateCache {
            input: gates[..h].to_vec(),
            forget: gates[h..2 * h].to_vec(),
            candidate: gates[2 * h..3 * h].to_vec(),
            output: gates[3 * h..].to_vec(),
        },
    })
}

#[inline]
fn cell_step(
    p: &LstmCellParams,
    x: &[f64],
    h_in: &[f64],
    c_prev: &[f64],
    gates: &mut [f64],
    c: &mut [f64],
    h_out: &mut [f64],
) {
    let h = h_out.len();
    gates.copy_from_slice(p.b.data());
    gemv_into(&p.w, x, gates);
    gemv_into(&p.u, h_in, gates);
    for k in 0..h {
        let i = sigmoid(gates[k]);
        let f = sigmoid(gates[h + k]);
        let g = gates[2 * h + k].tanh();
        let o = sigmoid(gates[3 * h + k]);
        gates[k] = i;
        gates[h + k] = f;
        gates[2 * h + k] = g;
        gates[3 * h + k] = o;
        c[k] = f * c_prev[k] + i * g;
        h_out[k] = o * c[k].tanh();
    }
}

fn run_direction(
    p: &LstmCellParams,
    input: &Matrix,
    reverse: bool,
    mask: Option<&[f64]>,
    dropout: f64,
) -> DirectionTrace {
    let steps = input.rows();
    let h = p.hidden();
    let mut gates = Matrix::zeros(steps, 4 * h);
    let mut cells = Matrix::zeros(steps, h);
    let mut hidden = Matrix::zeros(steps, h);
    let scaled: Option<Vec<f64>> = mask.map(|m| m.iter().map(|&v| v / (1.0 - dropout)).collect());

    let zeros = vec![0.0; h];
    let mut h_in = vec![0.0; h];
    let mut c_buf = vec![0.0; h];
    let mut h_buf = vec![0.0; h];
    let mut g_buf = vec![0.0; 4 * h];
    let mut prev: Option<usize> = None;
    for k in 0..steps {
        let t = if reverse { steps - 1 - k } else { k };
        let (h_prev, c_prev) = match prev {
            Some(tp) => (hidden.row(tp), cells.row(tp)),
            None => (zeros.as_slice(), zeros.as_slice()),
        };
        match &scaled {
            Some(m) => {
                for ((d, &hv), &mv) in h_in.iter_mut().zip(h_prev).zip(m) {
                    *d = hv * mv;
                }
            }
            None => h_in.copy_from_slice(h_prev),
        }
        cell_step(p, input.row(t), &h_in, c_prev, &mut g_buf, &mut c_buf, &mut h_buf);
        gates.row_mut(t).copy_from_slice(&g_buf);
        cells.row_mut(t).copy_from_slice(&c_buf);
        hidden.row_mut(t).copy_from_slice(&h_buf);
        prev = Some(t);
    }
    DirectionTrace {
        gates,
        cells,
        hidden,
        mask: scaled,
    }
}

/// BPTT through one direction. `d_out` holds gradients w.r.t. the layer's
/// per-timestep output; this direction owns columns `col..col + H`.
#[allow(clippy::too_many_arguments)]
fn backprop_direction(
    p: &LstmCellParams,
    g: &mut LstmCellParams,
    input: &Matrix,
    tr: &DirectionTrace,
    reverse: bool,
    d_out: &Matrix,
    col: usize,
    mut d_input: Option<&mut Matrix>,
) {
    let steps = input.rows();
    let h = p.hidden();
    let zeros = vec![0.0; h];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    let mut h_in = vec![0.0; h];
    let mut dh_in = vec![0.0; h];

    for k in (0..steps).rev() {
        let t = if reverse { steps - 1 - k } else { k };
        let tp = if k == 0 {
            None
        } else if reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };
        let (h_prev, c_prev) = match tp {
            Some(tp) => (tr.hidden.row(tp), tr.cells.row(tp)),
            None => (zeros.as_slice(), zeros.as_slice()),
        };
        match &tr.mask {
            Some(m) => {
                for ((d, &hv), &mv) in h_in.iter_mut().zip(h_prev).zip(m) {
                    *d = hv * mv;
                }
            }
            None => h_in.copy_from_slice(h_prev),
        }

        let gates = tr.gates.row(t);
        let c = tr.cells.row(t);
        let d_out_row = &d_out.row(t)[col..col + h];
        for j in 0..h {
            let i = gates[j];
            let f = gates[h + j];
            let gg = gates[2 * h + j];
            let o = gates[3 * h + j];
            let tc = c[j].tanh();
            let dh = d_out_row[j] + dh_next[j];
            let d_o = dh * tc;
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            let d_i = dc * gg;
            let d_g = dc * i;
            let d_f = dc * c_prev[j];
            dc_next[j] = dc * f;
            da[j] = d_i * i * (1.0 - i);
            da[h + j] = d_f * f * (1.0 - f);
            da[2 * h + j] = d_g * (1.0 - gg * gg);
            da[3 * h + j] = d_o * o * (1.0 - o);
        }

        outer_acc(&mut g.w, &da, input.row(t));
        outer_acc(&mut g.u, &da, &h_in);
        for (gb, &d) in g.b.data_mut().iter_mut().zip(&da) {
            *gb += d;
        }
        if let Some(dx) = d_input.as_deref_mut() {
            gemv_t_into(&p.w, &da, dx.row_mut(t));
        }
        dh_in.fill(0.0);
        gemv_t_into(&p.u, &da, &mut dh_in);
        match &tr.mask {
            Some(m) => {
                for ((d, &v), &mv) in dh_next.iter_mut().zip(&dh_in).zip(m) {
                    *d = v * mv;
                }
            }
            None => dh_next.copy_from_slice(&dh_in),
        }
    }
}

/// Variational recurrent dropout masks: one binary mask per layer and
/// direction, reused at every timestep of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    p: f64,
    /// Per layer: forward mask and optional backward mask, entries in `{0, 1}`.
    layers: Vec<(Vec<f64>, Option<Vec<f64>>)>,
}

impl DropoutMasks {
    /// Draws Bernoulli(1 - p) masks. With `p == 0` every mask is all ones.
    pub fn sample(config: &StackConfig, seed: u64) -> Self {
        let p = config.recurrent_dropout;
        let keep = Bernoulli::new(1.0 - p).expect("validated dropout");
        let draw = |l: usize, dir: u64| -> Vec<f64> {
            let mut rng = rng::stream(seed, "dropout", &[l as u64, dir]);
            (0..config.hidden)
                .map(|_| if keep.sample(&mut rng) { 1.0 } else { 0.0 })
                .collect()
        };
        let layers = (0..config.depth)
            .map(|l| (draw(l, 0), config.bidirectional.then(|| draw(l, 1))))
            .collect();
        Self { p, layers }
    }

    /// Masks that keep every unit.
    pub fn keep_all(config: &StackConfig) -> Self {
        let ones = vec![1.0; config.hidden];
        Self {
            p: config.recurrent_dropout,
            layers: (0..config.depth)
                .map(|_| (ones.clone(), config.bidirectional.then(|| ones.clone())))
                .collect(),
        }
    }

    pub fn keep_fraction(&self) -> f64 {
        let (kept, total) = self
            .layers
            .iter()
            .flat_map(|(f, b)| std::iter::once(f).chain(b.as_ref()))
            .fold((0.0, 0usize), |(k, n), m| (k + m.iter().sum::<f64>(), n + m.len()));
        kept / total as f64
    }

    fn check(&self, config: &StackConfig) -> Result<()> {
        let ok = self.p == config.recurrent_dropout
            && self.layers.len() == config.depth
            && self.layers.iter().all(|(f, b)| {
                f.len() == config.hidden
                    && b.as_ref().map(Vec::len) == config.bidirectional.then_some(config.hidden)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::shape("dropout masks do not match the stack configuration"))
        }
    }
}

/// Inverted dropout: `h * mask / (1 - p)`.
pub fn apply_recurrent_dropout(h: &[f64], mask: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if h.len() != mask.len() {
        return Err(Error::shape(format!("h[{}] vs mask[{}]", h.len(), mask.len())));
    }
    if p == 0.0 {
        return Ok(h.to_vec());
    }
    let scale = 1.0 / (1.0 - p);
    Ok(h.iter().zip(mask).map(|(&v, &m)| v * m * scale).collect())
}

/// Draws a single Bernoulli(1 - p) mask of length `n`.
pub fn sample_mask(n: usize, p: f64, rng: &mut rng::Rng) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random::<f64>() >= p { 1.0 } else { 0.0 })
        .collect()
}
