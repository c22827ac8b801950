//! Fully connected denoiser with a sinusoidal index embedding.
//!
//! The network maps `[x | emb(index)]` through SiLU hidden layers to a
//! linear head of width `D · head_channels`. Parameters live in one flat
//! vector, layer by layer, each layer storing its `out × in` weight matrix
//! row-major followed by its `out` biases; the head comes last.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kl_basis::phi_at;

pub const DEFAULT_HIDDEN_WIDTH: usize = 128;
pub const DEFAULT_HIDDEN_LAYERS: usize = 3;
pub const DEFAULT_EMBED_DIM: usize = 64;

/// Threshold on `|Σ φ_m(t)|` below which the fine-tune correction is pinned to 1.
pub const CORRECTION_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x · sigmoid(x)`
    Silu,
    Identity,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    #[inline]
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// How the integer index reaches the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Embed the raw index (grid step `k`, or the composite `N(m-1)+k`).
    Composite,
    /// Reduce a composite index to its grid step `((index-1) mod N) + 1`
    /// before embedding, so the network cannot see the basis term.
    StepOnly { n_steps: usize },
}

/// Multiplicative output correction `c(t) = √t / Σ_{m≤M} φ_m(t)` applied
/// after initializing a KL network from baseline weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputCorrection {
    pub m_terms: usize,
    pub n_steps: usize,
}

impl OutputCorrection {
    /// Grid step addressed by a (possibly composite) index.
    pub fn step_of(&self, index: usize) -> usize {
        step_of(index, self.n_steps)
    }

    /// Returns the factor and whether the clamp was hit.
    pub fn factor(&self, index: usize) -> (f64, bool) {
        let t = self.step_of(index) as f64 / self.n_steps as f64;
        let sum: f64 = (1..=self.m_terms).map(|m| phi_at(m, t)).sum();
        if sum.abs() < CORRECTION_CLAMP {
            (1.0, true)
        } else {
            (t.sqrt() / sum, false)
        }
    }
}

fn step_of(index: usize, n_steps: usize) -> usize {
    if index == 0 {
        0
    } else {
        (index - 1) % n_steps + 1
    }
}

/// Sinusoidal embedding of an integer index: `[sin(i·f_j) | cos(i·f_j)]`
/// with `f_j = 10000^(-j/half)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeIndexEmbedding {
    pub index: usize,
    pub embed_dim: usize,
}

impl TimeIndexEmbedding {
    pub fn new(index: usize, embed_dim: usize) -> Self {
        Self { index, embed_dim }
    }

    pub fn vector(&self) -> Array1<f64> {
        let mut out = Array1::zeros(self.embed_dim);
        write_embedding(self.index, out.as_slice_mut().expect("contiguous"));
        out
    }
}

fn write_embedding(index: usize, out: &mut [f64]) {
    let dim = out.len();
    let half = dim / 2;
    let ln_base = 10_000f64.ln();
    for j in 0..half {
        let freq = (-ln_base * j as f64 / half as f64).exp();
        let arg = index as f64 * freq;
        out[j] = arg.sin();
        out[half + j] = arg.cos();
    }
    if dim % 2 == 1 {
        out[dim - 1] = 0.0;
    }
}

/// Architecture choices fixed at construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Largest index the network accepts.
    pub max_index: usize,
}

impl DenoiserConfig {
    pub fn new(data_dim: usize, max_index: usize) -> Self {
        Self {
            data_dim,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden: vec![DEFAULT_HIDDEN_WIDTH; DEFAULT_HIDDEN_LAYERS],
            activation: Activation::Silu,
            max_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInit {
    Zero,
    /// Same fan-in uniform rule as the hidden layers; used by gradient checks.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub data_dim: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub head_channels: usize,
    pub activation: Activation,
    pub embedding: EmbeddingMode,
    pub max_index: usize,
    pub correction: Option<OutputCorrection>,
    pub flat_params: Vec<f64>,
}

struct Trace {
    /// Layer inputs: `[x | emb]`, then every hidden activation.
    inputs: Vec<Array2<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Array2<f64>>,
    /// Per-row output scale from the correction (1 when absent).
    scale: Array1<f64>,
    output: Array2<f64>,
}

impl DenoiserParams {
    pub fn init<R: Rng + ?Sized>(
        config: &DenoiserConfig,
        head_channels: usize,
        head: HeadInit,
        rng: &mut R,
    ) -> Result<Self> {
        if config.data_dim == 0 || config.embed_dim == 0 || head_channels == 0 {
            return Err(Error::Validation(
                "data_dim, embed_dim and head_channels must be positive".into(),
            ));
        }
        if config.hidden.is_empty() || config.hidden.contains(&0) {
            return Err(Error::Validation(
                "hidden layer widths must be positive".into(),
            ));
        }
        let mut params = Self {
            data_dim: config.data_dim,
            embed_dim: config.embed_dim,
            hidden: config.hidden.clone(),
            head_channels,
            activation: config.activation,
            embedding: EmbeddingMode::Composite,
            max_index: config.max_index,
            correction: None,
            flat_params: Vec::new(),
        };
        let shapes = params.layer_shapes();
        let last = shapes.len() - 1;
        let mut flat = Vec::with_capacity(Self::count_for(&shapes));
        for (l, &(fan_in, out)) in shapes.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = (fan_in + 1) * out;
            if l == last && head == HeadInit::Zero {
                flat.extend(std::iter::repeat_n(0.0, n));
            } else {
                flat.extend((0..n).map(|_| rng.random_range(-bound..bound)));
            }
        }
        params.flat_params = flat;
        Ok(params)
    }

    pub fn config(&self) -> DenoiserConfig {
        DenoiserConfig {
            data_dim: self.data_dim,
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            max_index: self.max_index,
        }
    }

    /// `(in, out)` per layer, head last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.data_dim + self.embed_dim;
        for &w in &self.hidden {
            shapes.push((fan_in, w));
            fan_in = w;
        }
        shapes.push((fan_in, self.output_dim()));
        shapes
    }

    fn count_for(shapes: &[(usize, usize)]) -> usize {
        shapes.iter().map(|(i, o)| (i + 1) * o).sum()
    }

    pub fn param_count(&self) -> usize {
        Self::count_for(&self.layer_shapes())
    }

    pub fn output_dim(&self) -> usize {
        self.data_dim * self.head_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.flat_params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, layer shapes need {}",
                self.flat_params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    pub fn embed(&self, index: usize) -> Array1<f64> {
        TimeIndexEmbedding::new(self.effective_index(index), self.embed_dim).vector()
    }

    fn effective_index(&self, index: usize) -> usize {
        match self.embedding {
            EmbeddingMode::Composite => index,
            EmbeddingMode::StepOnly { n_steps } => step_of(index, n_steps),
        }
    }

    fn layer_views(
        &self,
        layer: usize,
        shapes: &[(usize, usize)],
    ) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let offset: usize = shapes[..layer].iter().map(|(i, o)| (i + 1) * o).sum();
        let (fan_in, out) = shapes[layer];
        let w = ArrayView2::from_shape(
            (out, fan_in),
            &self.flat_params[offset..offset + out * fan_in],
        )
        .expect("weight block shape");
        let b =
            ArrayView1::from(&self.flat_params[offset + out * fan_in..offset + (fan_in + 1) * out]);
        (w, b)
    }

    fn check_inputs(&self, x: ArrayView2<f64>, indices: &[usize]) -> Result<()> {
        if x.ncols() != self.data_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.data_dim
            )));
        }
        if x.nrows() != indices.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} indices",
                x.nrows(),
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i > self.max_index) {
            return Err(Error::Domain(format!(
                "index {bad} exceeds network limit {}",
                self.max_index
            )));
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<f64>, indices: &[usize]) -> Result<Trace> {
        self.validate()?;
        self.check_inputs(x, indices)?;
        let rows = x.nrows();
        let d = self.data_dim;
        let mut input = Array2::zeros((rows, d + self.embed_dim));
        input.slice_mut(s![.., ..d]).assign(&x);
        for (r, &idx) in indices.iter().enumerate() {
            let mut row = input.row_mut(r);
            let tail = row.as_slice_mut().expect("row-major input");
            write_embedding(self.effective_index(idx), &mut tail[d..]);
        }

        let shapes = self.layer_shapes();
        let last = shapes.len() - 1;
        let mut inputs = Vec::with_capacity(shapes.len());
        let mut pre = Vec::with_capacity(last);
        inputs.push(input);
        for layer in 0..last {
            let (w, b) = self.layer_views(layer, &shapes);
            let z = inputs[layer].dot(&w.t()) + b;
            let act = self.activation;
            let a = z.mapv(|v| act.apply(v));
            pre.push(z);
            inputs.push(a);
        }
        let (w, b) = self.layer_views(last, &shapes);
        let mut output = inputs[last].dot(&w.t()) + b;
        let scale = self.output_scale(indices);
        if self.correction.is_some() {
            output
                .axis_iter_mut(Axis(0))
                .zip(scale.iter())
                .for_each(|(mut row, &c)| row *= c);
        }
        Ok(Trace {
            inputs,
            pre,
            scale,
            output,
        })
    }

    fn output_scale(&self, indices: &[usize]) -> Array1<f64> {
        match &self.correction {
            Some(c) => indices.iter().map(|&i| c.factor(i).0).collect(),
            None => Array1::ones(indices.len()),
        }
    }

    /// Prediction for one input, length `D · head_channels`.
    pub fn forward(&self, x: ArrayView1<f64>, index: usize) -> Result<Array1<f64>> {
        let out = self.forward_batch(x.insert_axis(Axis(0)), &[index])?;
        Ok(out.row(0).to_owned())
    }

    /// Row-wise predictions; rows never interact.
    pub fn forward_batch(&self, x: ArrayView2<f64>, indices: &[usize]) -> Result<Array2<f64>> {
        Ok(self.run(x, indices)?.output)
    }

    /// Gradient of a scalar loss with respect to `flat_params`, given the
    /// loss gradient at the output.
    pub fn backward(
        &self,
        x: ArrayView1<f64>,
        index: usize,
        output_grad: ArrayView1<f64>,
    ) -> Result<Vec<f64>> {
        self.backward_batch(
            x.insert_axis(Axis(0)),
            &[index],
            output_grad.insert_axis(Axis(0)),
        )
    }

    /// Summed parameter gradient over all rows.
    pub fn backward_batch(
        &self,
        x: ArrayView2<f64>,
        indices: &[usize],
        output_grad: ArrayView2<f64>,
    ) -> Result<Vec<f64>> {
        let trace = self.run(x, indices)?;
        self.backward_trace(&trace, output_grad)
    }

    /// Forward then backward where the output gradient depends on the
    /// predictions; returns `(value, gradient)`.
    pub fn forward_backward<F>(
        &self,
        x: ArrayView2<f64>,
        indices: &[usize],
        loss: F,
    ) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        let trace = self.run(x, indices)?;
        let (value, grad_out) = loss(&trace.output)?;
        let grad = self.backward_trace(&trace, grad_out.view())?;
        Ok((value, grad))
    }

    fn backward_trace(&self, trace: &Trace, output_grad: ArrayView2<f64>) -> Result<Vec<f64>> {
        if output_grad.dim() != trace.output.dim() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                output_grad.dim(),
                trace.output.dim()
            )));
        }
        let shapes = self.layer_shapes();
        let last = shapes.len() - 1;
        let mut grad = vec![0.0; self.flat_params.len()];
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for &(i, o) in &shapes {
            offsets.push(acc);
            acc += (i + 1) * o;
        }

        let mut delta = output_grad.to_owned();
        if self.correction.is_some() {
            delta
                .axis_iter_mut(Axis(0))
                .zip(trace.scale.iter())
                .for_each(|(mut row, &c)| row *= c);
        }
        for layer in (0..=last).rev() {
            let (fan_in, out) = shapes[layer];
            let off = offsets[layer];
            let (gw, gb) = grad[off..off + (fan_in + 1) * out].split_at_mut(out * fan_in);
            let mut gw = ArrayViewMut2::from_shape((out, fan_in), gw).expect("weight grad shape");
            gw.assign(&delta.t().dot(&trace.inputs[layer]));
            for (g, v) in gb.iter_mut().zip(delta.sum_axis(Axis(0)).iter()) {
                *g = *v;
            }
            if layer == 0 {
                break;
            }
            let (w, _) = self.layer_views(layer, &shapes);
            let mut upstream = delta.dot(&w);
            let act = self.activation;
            Zip::from(&mut upstream)
                .and(&trace.pre[layer - 1])
                .for_each(|g, &z| *g *= act.derivative(z));
            delta = upstream;
        }
        Ok(grad)
    }

    /// Widen the single-channel head to `m_terms` channels by copying its
    /// weights, so every channel reproduces the original output.
    pub fn expand_head(&self, m_terms: usize) -> Result<Self> {
        if self.head_channels != 1 {
            return Err(Error::Validation(format!(
                "head already has {} channels",
                self.head_channels
            )));
        }
        if m_terms == 0 {
            return Err(Error::Validation("m_terms must be positive".into()));
        }
        self.validate()?;
        let shapes = self.layer_shapes();
        let last = shapes.len() - 1;
        let (w, b) = self.layer_views(last, &shapes);
        let head_offset = self.param_count() - (shapes[last].0 + 1) * shapes[last].1;
        let mut flat = self.flat_params[..head_offset].to_vec();
        for _ in 0..m_terms {
            flat.extend(w.iter());
        }
        for _ in 0..m_terms {
            flat.extend(b.iter());
        }
        let mut out = self.clone();
        out.head_channels = m_terms;
        out.flat_params = flat;
        out.validate()?;
        Ok(out)
    }
}
