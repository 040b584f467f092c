//! Dense ReLU network with one softmax head per task.
//!
//! All parameters live in one flat vector. Every layer occupies a contiguous
//! slice laid out as a row-major `(fan_out, fan_in)` weight matrix followed
//! by `fan_out` biases. Hidden layers come first, then the heads in task
//! order, so the shared backbone is a single prefix of the vector.

mod schedule;

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{for_each_block, UNIT_BLOCK};
use crate::quant::{quantize_unchecked, QuantConfig};

pub use schedule::{OptimConfig, PlateauSchedule, ScheduleStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task_id: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub heads: Vec<HeadSpec>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidSpec("at least one hidden layer required".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidSpec("hidden widths must be positive".into()));
        }
        if self.heads.is_empty() {
            return Err(Error::InvalidSpec("at least one head required".into()));
        }
        for (i, head) in self.heads.iter().enumerate() {
            if head.task_id != i + 1 {
                return Err(Error::InvalidSpec(format!(
                    "head task ids must be 1..=T in order, found {} at position {}",
                    head.task_id,
                    i + 1
                )));
            }
            if head.num_classes < 2 {
                return Err(Error::InvalidSpec(format!(
                    "head {} needs at least 2 classes",
                    head.task_id
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self, task_id: usize) -> Result<usize> {
        task_id
            .checked_sub(1)
            .and_then(|i| self.heads.get(i))
            .map(|h| h.num_classes)
            .ok_or(Error::NoSuchHead(task_id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Hidden(usize),
    Head(usize),
}

/// Placement of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
    /// Quantization range `s = C/√fan_in`.
    pub scale: f64,
}

impl Layer {
    pub fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn weight_range(&self) -> Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias_range(&self) -> Range<usize> {
        self.offset + self.fan_in * self.fan_out..self.offset + self.len()
    }

    pub fn name(&self) -> String {
        match self.kind {
            LayerKind::Hidden(i) => format!("hidden{}", i + 1),
            LayerKind::Head(t) => format!("head{t}"),
        }
    }
}

/// Which parameter values a pass runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Raw,
    /// Evaluate with every parameter replaced by its `total_bits` quantization.
    Quantized {
        total_bits: u32,
    },
}

/// Labeled inputs for one task.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub task_id: usize,
}

#[derive(Debug, Clone, Copy)]
enum Accumulate {
    /// Mean-loss gradient.
    Gradient,
    /// Sum over samples of the squared per-sample gradient.
    SquaredPerSample,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

impl Network {
    /// All-zero network.
    pub fn zeros(spec: NetworkSpec, quant: &QuantConfig) -> Result<Self> {
        spec.validate()?;
        quant.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut fan_in = spec.input_dim;
        for (i, &width) in spec.hidden_dims.iter().enumerate() {
            let layer = Layer {
                kind: LayerKind::Hidden(i),
                fan_in,
                fan_out: width,
                offset,
                scale: quant.layer_scale(fan_in),
            };
            offset += layer.len();
            layers.push(layer);
            fan_in = width;
        }
        for head in &spec.heads {
            let layer = Layer {
                kind: LayerKind::Head(head.task_id),
                fan_in,
                fan_out: head.num_classes,
                offset,
                scale: quant.layer_scale(fan_in),
            };
            offset += layer.len();
            layers.push(layer);
        }
        Ok(Network {
            spec,
            layers,
            params: vec![0.0; offset],
        })
    }

    /// Uniform initialization on `[-s/√3, s/√3]` per layer.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, quant: &QuantConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(spec, quant)?;
        for layer in net.layers.clone() {
            let bound = layer.scale / 3f64.sqrt();
            for p in &mut net.params[layer.range()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn hidden_count(&self) -> usize {
        self.spec.hidden_dims.len()
    }

    /// Index into [`Network::layers`] of the head for `task_id`.
    pub fn head_index(&self, task_id: usize) -> Result<usize> {
        self.spec.num_classes(task_id)?;
        Ok(self.hidden_count() + task_id - 1)
    }

    /// Parameter range of the shared hidden layers.
    pub fn backbone_range(&self) -> Range<usize> {
        0..self.layers[self.hidden_count()].offset
    }

    pub fn head_range(&self, task_id: usize) -> Result<Range<usize>> {
        Ok(self.layers[self.head_index(task_id)?].range())
    }

    /// Backbone plus the head of `task_id`: everything a pass on that task touches.
    pub fn active_ranges(&self, task_id: usize) -> Result<[Range<usize>; 2]> {
        Ok([self.backbone_range(), self.head_range(task_id)?])
    }

    /// Per-parameter quantization scale.
    pub fn param_scales(&self) -> Vec<f64> {
        let mut scales = vec![0.0; self.params.len()];
        for layer in &self.layers {
            scales[layer.range()].fill(layer.scale);
        }
        scales
    }

    fn quantized_params(&self, total_bits: u32) -> Vec<f64> {
        let mut q = self.params.clone();
        for layer in &self.layers {
            for p in &mut q[layer.range()] {
                *p = quantize_unchecked(*p, total_bits, layer.scale);
            }
        }
        q
    }

    fn check_inputs(&self, inputs: ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "expected {} input columns, got {}",
                self.spec.input_dim,
                inputs.ncols()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input"));
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[usize], rows: usize, task_id: usize) -> Result<()> {
        let classes = self.spec.num_classes(task_id)?;
        if labels.len() != rows {
            return Err(Error::Shape(format!("{rows} inputs but {} labels", labels.len())));
        }
        if rows == 0 {
            return Err(Error::EmptyData("batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Shape(format!(
                "label {bad} outside the {classes} classes of task {task_id}"
            )));
        }
        Ok(())
    }

    fn weights<'a>(&self, params: &'a [f64], layer: &Layer) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let w =
            ArrayView2::from_shape((layer.fan_out, layer.fan_in), &params[layer.weight_range()]).expect("layer shape");
        let b = ArrayView1::from(&params[layer.bias_range()]);
        (w, b)
    }

    /// Hidden activations and logits for `inputs` through the head `head`.
    fn trace(&self, params: &[f64], inputs: ArrayView2<'_, f64>, head: usize) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.hidden_count());
        for layer in &self.layers[..self.hidden_count()] {
            let input = acts.last().map_or(inputs, |a| a.view());
            let (w, b) = self.weights(params, layer);
            let mut z = affine(input, w, b);
            z.mapv_inplace(|v| v.max(0.0));
            acts.push(z);
        }
        let (w, b) = self.weights(params, &self.layers[head]);
        let logits = affine(acts.last().expect("hidden layer").view(), w, b);
        (acts, logits)
    }

    /// Propagates `delta` (loss gradient w.r.t. the logits) back through the
    /// network, adding the parameter gradients into `out`.
    #[allow(clippy::too_many_arguments)]
    fn backprop(
        &self,
        params: &[f64],
        inputs: ArrayView2<'_, f64>,
        acts: &[Array2<f64>],
        mut delta: Array2<f64>,
        head: usize,
        out: &mut [f64],
        mode: Accumulate,
    ) {
        let path: Vec<usize> = (0..self.hidden_count()).chain(std::iter::once(head)).collect();
        for (depth, &li) in path.iter().enumerate().rev() {
            let layer = &self.layers[li];
            let input = if depth == 0 { inputs } else { acts[depth - 1].view() };
            let (w_out, rest) =
                out[layer.offset..layer.offset + layer.len()].split_at_mut(layer.fan_in * layer.fan_out);
            let w_grad = ArrayViewMut2::from_shape((layer.fan_out, layer.fan_in), w_out).expect("layer shape");
            match mode {
                Accumulate::Gradient => {
                    accumulate_outer(delta.view(), input, w_grad);
                    for (g, col) in rest.iter_mut().zip(delta.columns()) {
                        *g += col.sum();
                    }
                }
                Accumulate::SquaredPerSample => {
                    let d2 = delta.mapv(|v| v * v);
                    let a2 = input.mapv(|v| v * v);
                    accumulate_outer(d2.view(), a2.view(), w_grad);
                    for (g, col) in rest.iter_mut().zip(d2.columns()) {
                        *g += col.sum();
                    }
                }
            }
            if depth > 0 {
                let (w, _) = self.weights(params, layer);
                let mut next = Array2::<f64>::zeros((delta.nrows(), layer.fan_in));
                let d = delta.view();
                for_each_block(next.view_mut(), Axis(1), UNIT_BLOCK, |k0, mut block| {
                    let wb = w.slice(s![.., k0..k0 + block.ncols()]);
                    general_mat_mul(1.0, &d, &wb, 0.0, &mut block);
                });
                Zip::from(&mut next).and(&acts[depth - 1]).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = next;
            }
        }
    }

    /// Logits `[batch × num_classes(task_id)]`.
    pub fn forward(&self, inputs: ArrayView2<'_, f64>, task_id: usize, mode: ParamMode) -> Result<Array2<f64>> {
        let head = self.head_index(task_id)?;
        self.check_inputs(inputs)?;
        let (_, logits) = match mode {
            ParamMode::Raw => self.trace(&self.params, inputs, head),
            ParamMode::Quantized { total_bits } => self.trace(&self.quantized_params(total_bits), inputs, head),
        };
        Ok(logits)
    }

    /// Mean softmax cross-entropy and its gradient w.r.t. every parameter.
    /// Entries outside the backbone and the batch's head are zero.
    pub fn backward(&self, batch: &Batch, mode: ParamMode) -> Result<(f64, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let loss = self.backward_into(batch.inputs.view(), &batch.labels, batch.task_id, mode, &mut grads)?;
        Ok((loss, grads))
    }

    /// Like [`Network::backward`] but writes into `grads`, touching only the
    /// active ranges of `task_id`.
    pub fn backward_into(
        &self,
        inputs: ArrayView2<'_, f64>,
        labels: &[usize],
        task_id: usize,
        mode: ParamMode,
        grads: &mut [f64],
    ) -> Result<f64> {
        let head = self.head_index(task_id)?;
        self.check_inputs(inputs)?;
        self.check_labels(labels, inputs.nrows(), task_id)?;
        if grads.len() != self.params.len() {
            return Err(Error::Misaligned {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let quantized;
        let params = match mode {
            ParamMode::Raw => &self.params,
            ParamMode::Quantized { total_bits } => {
                quantized = self.quantized_params(total_bits);
                &quantized
            }
        };
        let (acts, logits) = self.trace(params, inputs, head);
        let n = inputs.nrows() as f64;
        let (log_probs, probs) = log_softmax(logits);
        let loss = -labels.iter().enumerate().map(|(i, &y)| log_probs[[i, y]]).sum::<f64>() / n;
        let mut delta = probs;
        for (i, &y) in labels.iter().enumerate() {
            delta[[i, y]] -= 1.0;
        }
        delta.mapv_inplace(|v| v / n);
        for range in self.active_ranges(task_id)? {
            grads[range].fill(0.0);
        }
        self.backprop(params, inputs, &acts, delta, head, grads, Accumulate::Gradient);
        Ok(loss)
    }

    /// Sum of squared per-sample gradients of `ln p(y_i | x_i)`, with each
    /// `y_i` drawn by `sample_label` from the model's predictive distribution.
    /// Added into `out` for the active ranges of `task_id`.
    pub(crate) fn accumulate_squared_score<F>(
        &self,
        inputs: ArrayView2<'_, f64>,
        task_id: usize,
        mut sample_label: F,
        out: &mut [f64],
    ) -> Result<()>
    where
        F: FnMut(ArrayView1<'_, f64>) -> usize,
    {
        let head = self.head_index(task_id)?;
        self.check_inputs(inputs)?;
        let (acts, logits) = self.trace(&self.params, inputs, head);
        let (_, mut delta) = log_softmax(logits);
        for mut row in delta.rows_mut() {
            let y = sample_label(row.view());
            row[y] -= 1.0;
        }
        self.backprop(
            &self.params,
            inputs,
            &acts,
            delta,
            head,
            out,
            Accumulate::SquaredPerSample,
        );
        Ok(())
    }

    /// Summed cross-entropy and number of correct argmax predictions.
    pub fn evaluate(
        &self,
        inputs: ArrayView2<'_, f64>,
        labels: &[usize],
        task_id: usize,
        mode: ParamMode,
    ) -> Result<(f64, usize)> {
        self.check_labels(labels, inputs.nrows(), task_id)?;
        let logits = self.forward(inputs, task_id, mode)?;
        let (log_probs, _) = log_softmax(logits);
        let mut loss = 0.0;
        let mut correct = 0;
        for (row, &y) in log_probs.rows().into_iter().zip(labels) {
            loss -= row[y];
            if argmax(row) == y {
                correct += 1;
            }
        }
        Ok((loss, correct))
    }

    /// `params -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        let all = 0..self.params.len();
        self.sgd_step_ranges(grads, lr, &[all])
    }

    /// SGD restricted to `ranges`; entries elsewhere must have zero gradient.
    pub fn sgd_step_ranges(&mut self, grads: &[f64], lr: f64, ranges: &[Range<usize>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Misaligned {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        for range in ranges {
            if grads[range.clone()].iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { task: None });
            }
        }
        for range in ranges {
            for (p, g) in self.params[range.clone()].iter_mut().zip(&grads[range.clone()]) {
                *p -= lr * g;
            }
        }
        Ok(())
    }

    /// [`Network::sgd_step_ranges`] followed by clamping each stepped
    /// parameter into `[lower[i], upper[i]]`, in one pass over memory.
    pub fn sgd_step_clamped(
        &mut self,
        grads: &[f64],
        lr: f64,
        ranges: &[Range<usize>],
        lower: &[f64],
        upper: &[f64],
    ) -> Result<()> {
        for bound in [lower.len(), upper.len()] {
            if bound != self.params.len() {
                return Err(Error::Misaligned {
                    expected: self.params.len(),
                    got: bound,
                });
            }
        }
        self.sgd_step_ranges(grads, lr, &[])?;
        for range in ranges {
            if grads[range.clone()].iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { task: None });
            }
        }
        for range in ranges {
            let r = range.clone();
            for (((p, g), &lo), &hi) in self.params[r.clone()]
                .iter_mut()
                .zip(&grads[r.clone()])
                .zip(&lower[r.clone()])
                .zip(&upper[r])
            {
                *p = (*p - lr * g).clamp(lo, hi);
            }
        }
        Ok(())
    }
}

/// `a · wᵀ + b` computed in fixed blocks of output units.
fn affine(a: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut z = Array2::<f64>::zeros((a.nrows(), w.nrows()));
    for_each_block(z.view_mut(), Axis(1), UNIT_BLOCK, |j0, mut block| {
        let cols = block.ncols();
        let wb = w.slice(s![j0..j0 + cols, ..]);
        general_mat_mul(1.0, &a, &wb.t(), 0.0, &mut block);
        let bb = b.slice(s![j0..j0 + cols]);
        for mut row in block.rows_mut() {
            row += &bb;
        }
    });
    z
}

/// `out += deltaᵀ · input`, blocked over output units.
fn accumulate_outer(delta: ArrayView2<'_, f64>, input: ArrayView2<'_, f64>, out: ArrayViewMut2<'_, f64>) {
    for_each_block(out, Axis(0), UNIT_BLOCK, |j0, mut block| {
        let d = delta.slice(s![.., j0..j0 + block.nrows()]);
        general_mat_mul(1.0, &d.t(), &input, 1.0, &mut block);
    });
}

/// Row-wise log-softmax and softmax.
fn log_softmax(mut logits: Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    let probs = logits.mapv(f64::exp);
    (logits, probs)
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(input: usize, hidden: &[usize], heads: &[usize]) -> NetworkSpec {
        NetworkSpec {
            input_dim: input,
            hidden_dims: hidden.to_vec(),
            activation: Activation::Relu,
            heads: heads
                .iter()
                .enumerate()
                .map(|(i, &c)| HeadSpec {
                    task_id: i + 1,
                    num_classes: c,
                })
                .collect(),
        }
    }

    fn random_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::init(spec(5, &[7, 6], &[3, 4]), &QuantConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(spec(3, &[], &[2]).validate().is_err());
        assert!(spec(3, &[4], &[1]).validate().is_err());
        let mut s = spec(3, &[4], &[2, 2]);
        s.heads[1].task_id = 3;
        assert!(s.validate().is_err());
        assert!(spec(3, &[4], &[2, 2]).validate().is_ok());
    }

    #[test]
    fn layout_matches_fan_in_plus_one_times_fan_out() {
        let net = random_net(1);
        let expected = (5 + 1) * 7 + (7 + 1) * 6 + (6 + 1) * 3 + (6 + 1) * 4;
        assert_eq!(net.num_params(), expected);
        assert_eq!(net.backbone_range(), 0..(6 * 7 + 8 * 6));
        let s = QuantConfig::default().layer_scale(5);
        assert_eq!(net.layers()[0].scale, s);
        for layer in net.layers() {
            let bound = layer.scale / 3f64.sqrt();
            assert!(net.params()[layer.range()].iter().all(|p| p.abs() <= bound));
        }
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let net = Network::zeros(spec(4, &[3], &[2]), &QuantConfig::default()).unwrap();
        let x = array![[1.0, -2.0, 3.0, 0.5], [0.0, 0.0, 9.0, 1.0]];
        let logits = net.forward(x.view(), 1, ParamMode::Raw).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_hidden_layer() {
        let mut net = Network::zeros(spec(2, &[2], &[2]), &QuantConfig::default()).unwrap();
        // identity hidden weights, head copies the hidden units
        net.params_mut()[..4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let head = net.layers()[1];
        net.params_mut()[head.offset..head.offset + 4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let logits = net.forward(array![[1.0, -1.0]].view(), 1, ParamMode::Raw).unwrap();
        assert_eq!(logits, array![[1.0, 0.0]]);
    }

    #[test]
    fn forward_errors() {
        let net = random_net(2);
        let x = Array2::<f64>::zeros((2, 5));
        assert!(matches!(
            net.forward(x.view(), 3, ParamMode::Raw),
            Err(Error::NoSuchHead(3))
        ));
        let mut bad = x.clone();
        bad[[0, 1]] = f64::NAN;
        assert!(matches!(
            net.forward(bad.view(), 1, ParamMode::Raw),
            Err(Error::NonFinite(_))
        ));
        assert!(net
            .forward(Array2::<f64>::zeros((2, 4)).view(), 1, ParamMode::Raw)
            .is_err());
    }

    #[test]
    fn quantized_forward_close_to_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::init(spec(20, &[32, 32], &[5]), &QuantConfig::default(), &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 20), |(i, j)| ((i * 20 + j) as f64 * 0.37).sin());
        let raw = net.forward(x.view(), 1, ParamMode::Raw).unwrap();
        let q = net
            .forward(x.view(), 1, ParamMode::Quantized { total_bits: 20 })
            .unwrap();
        for (a, b) in raw.iter().zip(q.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
        assert_ne!(raw, q);
    }

    #[test]
    fn logistic_unit_gradient() {
        // hidden unit passes x through, head logits are [0, θ·h]
        let mut net = Network::zeros(spec(1, &[1], &[2]), &QuantConfig::default()).unwrap();
        net.params_mut()[0] = 1.0;
        let batch = Batch {
            inputs: array![[1.0]],
            labels: vec![1],
            task_id: 1,
        };
        let (loss, grads) = net.backward(&batch, ParamMode::Raw).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        let head = net.layers()[1];
        // weights [w0, w1], then biases [b0, b1]
        assert_eq!(grads[head.offset + 1], -0.5);
        assert_eq!(grads[head.offset], 0.5);
    }

    #[test]
    fn uniform_logits_loss_is_log_classes() {
        let net = Network::zeros(spec(3, &[4], &[7]), &QuantConfig::default()).unwrap();
        let batch = Batch {
            inputs: Array2::from_elem((5, 3), 0.3),
            labels: vec![0, 1, 2, 3, 6],
            task_id: 1,
        };
        let (loss, _) = net.backward(&batch, ParamMode::Raw).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn other_heads_get_zero_gradient() {
        let net = random_net(3);
        let batch = Batch {
            inputs: Array2::from_shape_fn((6, 5), |(i, j)| (i as f64 - j as f64) * 0.3),
            labels: vec![0, 1, 2, 0, 1, 2],
            task_id: 1,
        };
        let (_, grads) = net.backward(&batch, ParamMode::Raw).unwrap();
        let other = net.head_range(2).unwrap();
        assert!(grads[other].iter().all(|&g| g == 0.0));
        assert!(grads[net.backbone_range()].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn sgd_examples() {
        let mut net = Network::zeros(spec(1, &[1], &[2]), &QuantConfig::default()).unwrap();
        net.params_mut()[0] = 1.0;
        let mut grads = vec![0.0; net.num_params()];
        let before = net.params().to_vec();
        net.sgd_step(&grads, 0.05).unwrap();
        assert_eq!(net.params(), &before[..]);
        grads[0] = 0.5;
        net.sgd_step(&grads, 0.05).unwrap();
        assert_eq!(net.params()[0], 0.975);
        grads[0] = f64::INFINITY;
        assert!(matches!(net.sgd_step(&grads, 0.05), Err(Error::Diverged { .. })));
    }

    #[test]
    fn sgd_steps_compose() {
        let mut a = random_net(4);
        let mut b = a.clone();
        let g1: Vec<f64> = (0..a.num_params()).map(|i| (i as f64).sin() * 0.25).collect();
        let g2: Vec<f64> = (0..a.num_params()).map(|i| (i as f64).cos() * 0.5).collect();
        a.sgd_step(&g1, 0.1).unwrap();
        a.sgd_step(&g2, 0.1).unwrap();
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| x + y).collect();
        b.sgd_step(&sum, 0.1).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn clamped_step_matches_step_then_clamp() {
        let mut a = random_net(3);
        let mut b = a.clone();
        let len = a.num_params();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grads: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lower: Vec<f64> = a.params().iter().map(|p| p - 0.01).collect();
        let upper: Vec<f64> = a.params().iter().map(|p| p + 0.02).collect();
        let ranges = a.active_ranges(2).unwrap();
        a.sgd_step_clamped(&grads, 0.05, &ranges, &lower, &upper).unwrap();
        b.sgd_step_ranges(&grads, 0.05, &ranges).unwrap();
        for r in &ranges {
            for i in r.clone() {
                b.params_mut()[i] = b.params()[i].clamp(lower[i], upper[i]);
            }
        }
        assert_eq!(a.params(), b.params());
        assert!(a.sgd_step_clamped(&grads, 0.05, &ranges, &lower[1..], &upper).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let net = random_net(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = Array2::from_shape_fn((8, 5), |_| rng.random_range(-1.0..1.0));
        let batch = Batch {
            inputs,
            labels: vec![0, 1, 2, 3, 0, 1, 2, 3],
            task_id: 2,
        };
        let (_, grads) = net.backward(&batch, ParamMode::Raw).unwrap();
        let loss = |n: &Network| {
            let (sum, _) = n
                .evaluate(batch.inputs.view(), &batch.labels, 2, ParamMode::Raw)
                .unwrap();
            sum / 8.0
        };
        let h = 1e-5;
        let active = net.active_ranges(2).unwrap();
        for i in active.into_iter().flatten() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let scale = grads[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (grads[i] - numeric).abs() / scale < 1e-5,
                "param {i}: {} vs {numeric}",
                grads[i]
            );
        }
    }
}
