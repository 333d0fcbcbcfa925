//! Per-point MLP classifiers with symmetric pooling, exact reverse-mode
//! gradients, Adam, training and checkpointing.
//!
//! A [`ClassifierModel`] is an encoder (dense layers with ReLU, applied to each
//! point independently), a pooling reduction over points that yields the
//! latent feature, and a head of dense layers ending in class logits.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::par::Exec;
use crate::seed;

pub fn points_to_array(points: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, j)| points[i][j])
}

pub fn array_to_points(a: &Array2<f64>) -> Vec<Vec3> {
    a.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// out x in
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        DenseLayer {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn xavier(input: usize, output: usize, rng: &mut seed::Rng) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        DenseLayer {
            weight: Array2::from_shape_simple_fn((output, input), || rng.random_range(-a..=a)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Applies the layer to each row of `x` (n x in -> n x out).
    pub fn forward_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend(self.weight.iter());
        out.extend(self.bias.iter());
    }

    fn read_flat(&mut self, src: &[f64]) -> usize {
        let nw = self.weight.len();
        let nb = self.bias.len();
        self.weight.iter_mut().zip(&src[..nw]).for_each(|(d, s)| *d = *s);
        self.bias.iter_mut().zip(&src[nw..nw + nb]).for_each(|(d, s)| *d = *s);
        nw + nb
    }
}

/// Gradient of a loss with respect to one [`DenseLayer`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGrad {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    fn add_assign(&mut self, other: &LayerGrad) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    fn scale(&mut self, s: f64) {
        self.weight *= s;
        self.bias *= s;
    }
}

pub(crate) fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Backward pass through a per-point dense layer followed by ReLU.
/// `d_act` is overwritten with the pre-activation gradient.
pub(crate) fn dense_relu_backward(
    layer: &DenseLayer,
    input: &Array2<f64>,
    act: &Array2<f64>,
    d_act: &mut Array2<f64>,
    grad: Option<&mut LayerGrad>,
) -> Array2<f64> {
    ndarray::Zip::from(&mut *d_act).and(act).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    dense_backward(layer, input, d_act, grad)
}

/// Backward pass through a per-point dense layer given the output gradient.
pub(crate) fn dense_backward(
    layer: &DenseLayer,
    input: &Array2<f64>,
    d_out: &Array2<f64>,
    grad: Option<&mut LayerGrad>,
) -> Array2<f64> {
    if let Some(g) = grad {
        g.weight += &d_out.t().dot(input);
        g.bias += &d_out.sum_axis(Axis(0));
    }
    d_out.dot(&layer.weight)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Mean,
}

/// Layer widths and pooling of a classifier family.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub tag: String,
    pub encoder_widths: Vec<usize>,
    pub pooling: Pooling,
    /// Hidden head widths; the final C-way layer is implied.
    pub head_widths: Vec<usize>,
}

impl Architecture {
    /// Max-pooled encoder 64-128, head 64. The white-box model.
    pub fn arch_a() -> Self {
        Architecture {
            tag: "arch-a".into(),
            encoder_widths: vec![64, 128],
            pooling: Pooling::Max,
            head_widths: vec![64],
        }
    }

    /// Mean-pooled encoder 32-64-128, head 64. The held-out victim.
    pub fn arch_b() -> Self {
        Architecture {
            tag: "arch-b".into(),
            encoder_widths: vec![32, 64, 128],
            pooling: Pooling::Mean,
            head_widths: vec![64],
        }
    }

    pub fn by_tag(tag: &str) -> Result<Self> {
        match tag {
            "arch-a" | "a" | "A" => Ok(Self::arch_a()),
            "arch-b" | "b" | "B" => Ok(Self::arch_b()),
            other => Err(Error::invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub arch: Architecture,
    pub num_classes: usize,
    pub encoder: Vec<DenseLayer>,
    pub head: Vec<DenseLayer>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    input: Array2<f64>,
    enc_acts: Vec<Array2<f64>>,
    argmax: Option<Vec<usize>>,
    head_inputs: Vec<Array1<f64>>,
    pub latent: Array1<f64>,
    pub logits: Array1<f64>,
}

impl ForwardTrace {
    pub fn num_points(&self) -> usize {
        self.input.nrows()
    }

    pub fn prediction(&self) -> usize {
        argmax(self.logits.as_slice().unwrap())
    }

    /// Which rectifiers fired and which points won each max-pool feature.
    /// Inputs with equal signatures lie in one region where the network is
    /// affine, so finite differences inside it are exact up to rounding.
    pub fn linear_region(&self) -> (Vec<bool>, Option<Vec<usize>>) {
        let fired = self
            .enc_acts
            .iter()
            .flat_map(|a| a.iter())
            .chain(self.head_inputs.iter().skip(1).flat_map(|h| h.iter()))
            .map(|&v| v > 0.0)
            .collect();
        (fired, self.argmax.clone())
    }
}

/// Gradients of all classifier parameters, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub encoder: Vec<LayerGrad>,
    pub head: Vec<LayerGrad>,
}

impl ModelGrads {
    pub fn zeros_like(model: &ClassifierModel) -> Self {
        ModelGrads {
            encoder: model.encoder.iter().map(LayerGrad::zeros_like).collect(),
            head: model.head.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            a.add_assign(b);
        }
        for (a, b) in self.head.iter_mut().zip(&other.head) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.encoder.iter_mut().chain(self.head.iter_mut()).for_each(|g| g.scale(s));
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.encoder.iter().chain(&self.head) {
            out.extend(g.weight.iter());
            out.extend(g.bias.iter());
        }
        out
    }
}

/// Input gradient plus (optionally) parameter gradients.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    pub param_grads: Option<ModelGrads>,
    /// n x 3
    pub input_grad: Array2<f64>,
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl ClassifierModel {
    pub fn new(arch: Architecture, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least 2 classes"));
        }
        if arch.encoder_widths.is_empty() {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        let mut rng = seed::rng(seed);
        let mut encoder = Vec::new();
        let mut dim = 3;
        for &w in &arch.encoder_widths {
            encoder.push(DenseLayer::xavier(dim, w, &mut rng));
            dim = w;
        }
        let mut head = Vec::new();
        for &w in arch.head_widths.iter().chain(std::iter::once(&num_classes)) {
            head.push(DenseLayer::xavier(dim, w, &mut rng));
            dim = w;
        }
        Ok(ClassifierModel {
            arch,
            num_classes,
            encoder,
            head,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().map(|l| l.output_dim()).unwrap_or(3)
    }

    pub fn num_params(&self) -> usize {
        self.encoder.iter().chain(&self.head).map(DenseLayer::num_params).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.encoder.iter().chain(&self.head) {
            l.write_flat(&mut out);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut at = 0;
        for l in self.encoder.iter_mut().chain(self.head.iter_mut()) {
            at += l.read_flat(&params[at..]);
        }
        Ok(())
    }

    /// Order-sensitive checksum of every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        self.params_flat().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
        })
    }

    /// Runs the per-point encoder and pooling only.
    pub fn encode(&self, points: &Array2<f64>) -> Array1<f64> {
        self.encode_trace(points).0
    }

    fn encode_trace(&self, points: &Array2<f64>) -> (Array1<f64>, Vec<Array2<f64>>, Option<Vec<usize>>) {
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.encoder.len());
        for (l, layer) in self.encoder.iter().enumerate() {
            let x = if l == 0 { points } else { &acts[l - 1] };
            let mut a = layer.forward_rows(x);
            relu_inplace(&mut a);
            acts.push(a);
        }
        let last = acts.last().unwrap();
        let (latent, argmax) = match self.arch.pooling {
            Pooling::Max => {
                let f = last.ncols();
                let mut best = vec![0usize; f];
                let mut val = last.row(0).to_owned();
                for (i, row) in last.rows().into_iter().enumerate().skip(1) {
                    for j in 0..f {
                        if row[j] > val[j] {
                            val[j] = row[j];
                            best[j] = i;
                        }
                    }
                }
                (val, Some(best))
            }
            Pooling::Mean => (last.mean_axis(Axis(0)).unwrap(), None),
        };
        (latent, acts, argmax)
    }

    /// Applies the head to a latent vector, returning logits.
    pub fn classify_latent(&self, latent: &Array1<f64>) -> Array1<f64> {
        let mut h = latent.clone();
        let last = self.head.len() - 1;
        for (l, layer) in self.head.iter().enumerate() {
            h = layer.forward_vec(&h);
            if l < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    pub fn forward_trace(&self, points: &Array2<f64>) -> ForwardTrace {
        let (latent, enc_acts, argmax) = self.encode_trace(points);
        let mut head_inputs = Vec::with_capacity(self.head.len());
        let mut h = latent.clone();
        let last = self.head.len() - 1;
        for (l, layer) in self.head.iter().enumerate() {
            let mut z = layer.forward_vec(&h);
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            head_inputs.push(std::mem::replace(&mut h, z));
        }
        ForwardTrace {
            input: points.clone(),
            enc_acts,
            argmax,
            head_inputs,
            latent,
            logits: h,
        }
    }

    /// Logits and latent feature for a cloud.
    pub fn forward(&self, cloud: &PointCloud) -> (Vec<f64>, Vec<f64>) {
        let t = self.forward_trace(&points_to_array(&cloud.points));
        (t.logits.to_vec(), t.latent.to_vec())
    }

    pub fn predict(&self, cloud: &PointCloud) -> usize {
        self.predict_points(&cloud.points)
    }

    pub fn predict_points(&self, points: &[Vec3]) -> usize {
        let latent = self.encode(&points_to_array(points));
        argmax(self.classify_latent(&latent).as_slice().unwrap())
    }

    /// Reverse-mode pass for a loss whose gradient is `d_logits` on the
    /// logits plus an optional extra gradient `d_latent` on the latent feature.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_logits: Option<&[f64]>,
        d_latent: Option<&[f64]>,
        want_params: bool,
    ) -> GradientBundle {
        let mut grads = want_params.then(|| ModelGrads::zeros_like(self));
        let mut g_latent = Array1::<f64>::zeros(trace.latent.len());
        if let Some(dl) = d_logits {
            let mut g = Array1::from(dl.to_vec());
            let last = self.head.len() - 1;
            for l in (0..self.head.len()).rev() {
                let layer = &self.head[l];
                let input = &trace.head_inputs[l];
                if l < last {
                    // head_inputs[l + 1] is the post-ReLU output of layer l.
                    let out = &trace.head_inputs[l + 1];
                    ndarray::Zip::from(&mut g).and(out).for_each(|gi, &o| {
                        if o <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                }
                if let Some(gr) = grads.as_mut() {
                    let lg = &mut gr.head[l];
                    for (r, &gr_r) in g.iter().enumerate() {
                        if gr_r != 0.0 {
                            lg.weight.row_mut(r).scaled_add(gr_r, input);
                        }
                    }
                    lg.bias += &g;
                }
                g = layer.weight.t().dot(&g);
            }
            g_latent = g;
        }
        if let Some(extra) = d_latent {
            for (a, b) in g_latent.iter_mut().zip(extra) {
                *a += *b;
            }
        }
        let last_act = trace.enc_acts.last().unwrap();
        let n = last_act.nrows();
        let mut d_act = Array2::<f64>::zeros(last_act.raw_dim());
        match (&self.arch.pooling, &trace.argmax) {
            (Pooling::Max, Some(arg)) => {
                for (j, &i) in arg.iter().enumerate() {
                    d_act[[i, j]] = g_latent[j];
                }
            }
            _ => {
                let inv = 1.0 / n as f64;
                for mut row in d_act.rows_mut() {
                    row.scaled_add(inv, &g_latent);
                }
            }
        }
        for l in (0..self.encoder.len()).rev() {
            let input = if l == 0 { &trace.input } else { &trace.enc_acts[l - 1] };
            let g = grads.as_mut().map(|gr| &mut gr.encoder[l]);
            d_act = dense_relu_backward(&self.encoder[l], input, &trace.enc_acts[l], &mut d_act, g);
        }
        GradientBundle {
            param_grads: grads,
            input_grad: d_act,
        }
    }
}

/// Gradients of `logits . loss_grad_on_logits` with respect to the input
/// points and every parameter.
pub fn backward_input(model: &ClassifierModel, cloud: &PointCloud, loss_grad_on_logits: &[f64]) -> GradientBundle {
    let trace = model.forward_trace(&points_to_array(&cloud.points));
    model.backward(&trace, Some(loss_grad_on_logits), None, true)
}

/// Softmax cross-entropy with max-shift; returns loss and d loss / d logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[target] - m);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.first_moment.len(), "parameter count mismatch");
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// `adam_step` in free-function form.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) {
    state.step(params, grads);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.002,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    /// Mean loss of every minibatch, in order.
    pub batch_losses: Vec<f64>,
}

pub(crate) fn label_of(cloud: &PointCloud, num_classes: usize) -> Result<usize> {
    match cloud.label {
        Some(y) if y < num_classes => Ok(y),
        Some(y) => Err(Error::invalid(format!("label {y} out of range for {num_classes} classes"))),
        None => Err(Error::invalid("training cloud has no label")),
    }
}

pub fn accuracy(model: &ClassifierModel, data: &[PointCloud]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = Exec::default()
        .map_slice(data, |c| Some(model.predict(c)) == c.label)
        .into_iter()
        .filter(|h| *h)
        .count();
    hits as f64 / data.len() as f64
}

/// Mean cross-entropy and its parameter gradient over a set of labelled clouds.
pub(crate) fn batch_ce_grads(model: &ClassifierModel, items: &[(&PointCloud, usize)]) -> (f64, ModelGrads) {
    let per: Vec<(f64, ModelGrads)> = Exec::default().map_slice(items, |(c, y)| {
        let trace = model.forward_trace(&points_to_array(&c.points));
        let (loss, g) = cross_entropy(trace.logits.as_slice().unwrap(), *y);
        let b = model.backward(&trace, Some(&g), None, true);
        (loss, b.param_grads.unwrap())
    });
    let mut total = ModelGrads::zeros_like(model);
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += l;
        total.add_assign(g);
    }
    let inv = 1.0 / items.len() as f64;
    total.scale(inv);
    (loss * inv, total)
}

/// Shared minibatch loop: seeded shuffle, per-batch gradient callback, Adam.
pub(crate) fn train_loop<F>(
    model: &ClassifierModel,
    train: &[PointCloud],
    test: &[PointCloud],
    cfg: &TrainConfig,
    mut batch_grad: F,
) -> Result<(ClassifierModel, TrainHistory)>
where
    F: FnMut(&ClassifierModel, &[usize], u64) -> Result<(f64, ModelGrads)>,
{
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    for c in train.iter().chain(test) {
        label_of(c, model.num_classes)?;
    }
    let mut model = model.clone();
    let mut params = model.params_flat();
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut shuffle_rng = seed::rng(seed::derive(cfg.seed, "shuffle"));
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_no = 0u64;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_grad(&model, batch, batch_no)?;
            batch_no += 1;
            adam.step(&mut params, &grads.flat());
            model.set_params_flat(&params)?;
            history.batch_losses.push(loss);
        }
        history.train_accuracy.push(accuracy(&model, train));
        history.test_accuracy.push(accuracy(&model, test));
    }
    Ok((model, history))
}

/// Supervised training with mean cross-entropy per minibatch.
/// `epochs = 0` returns the initialization unchanged.
pub fn train_classifier(
    model: &ClassifierModel,
    train: &[PointCloud],
    test: &[PointCloud],
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    let c = model.num_classes;
    train_loop(model, train, test, cfg, |m, batch, _| {
        let items: Vec<(&PointCloud, usize)> = batch
            .iter()
            .map(|&i| (&train[i], train[i].label.unwrap_or(0).min(c - 1)))
            .collect();
        Ok(batch_ce_grads(m, &items))
    })
}

pub const CHECKPOINT_FORMAT: &str = "pc-advkit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned textual container shared by classifiers and transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub arch_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    #[serde(default)]
    pub num_classes: usize,
    /// `[out, in]` for every dense layer in parameter order.
    pub layer_shapes: Vec<[usize; 2]>,
    pub params: Vec<f64>,
    pub training_seed: u64,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }
}

impl ClassifierModel {
    pub fn to_checkpoint(&self, training_seed: u64, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch_tag: self.arch.tag.clone(),
            architecture: Some(self.arch.clone()),
            num_classes: self.num_classes,
            layer_shapes: self
                .encoder
                .iter()
                .chain(&self.head)
                .map(|l| [l.output_dim(), l.input_dim()])
                .collect(),
            params: self.params_flat(),
            training_seed,
            metadata,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = ck
            .architecture
            .clone()
            .ok_or_else(|| Error::invalid("checkpoint has no classifier architecture"))?;
        let mut model = ClassifierModel::new(arch, ck.num_classes, 0)?;
        let shapes: Vec<[usize; 2]> = model
            .encoder
            .iter()
            .chain(&model.head)
            .map(|l| [l.output_dim(), l.input_dim()])
            .collect();
        if shapes != ck.layer_shapes {
            return Err(Error::invalid("checkpoint layer shapes do not match its architecture"));
        }
        model.set_params_flat(&ck.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch(pooling: Pooling) -> Architecture {
        Architecture {
            tag: "test".into(),
            encoder_widths: vec![5, 7],
            pooling,
            head_widths: vec![6],
        }
    }

    fn cloud(n: usize, s: u64) -> PointCloud {
        let mut rng = seed::rng(s);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_model_outputs_last_bias() {
        let mut m = ClassifierModel::new(Architecture::arch_a(), 4, 1).unwrap();
        let zeros = vec![0.0; m.num_params()];
        m.set_params_flat(&zeros).unwrap();
        let last = m.head.len() - 1;
        m.head[last].bias = Array1::from(vec![0.1, -0.2, 0.3, 0.4]);
        let (logits, _) = m.forward(&cloud(10, 2));
        assert_eq!(logits, vec![0.1, -0.2, 0.3, 0.4]);
    }

    #[test]
    fn duplicated_points_under_max_pool() {
        let m = ClassifierModel::new(Architecture::arch_a(), 3, 5).unwrap();
        let c = cloud(20, 3);
        let mut doubled = c.points.clone();
        doubled.extend(c.points.iter().copied());
        let (a, _) = m.forward(&c);
        let (b, _) = m.forward(&PointCloud::new(doubled).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn non_argmax_point_gets_zero_gradient() {
        let m = ClassifierModel::new(small_arch(Pooling::Max), 3, 8).unwrap();
        let c = cloud(40, 4);
        let trace = m.forward_trace(&points_to_array(&c.points));
        let b = m.backward(&trace, Some(&[1.0, -0.5, 0.25]), None, false);
        let critical: std::collections::BTreeSet<usize> = trace.argmax.clone().unwrap().into_iter().collect();
        for i in 0..c.len() {
            if !critical.contains(&i) {
                assert!(b.input_grad.row(i).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn mean_pool_identity_encoder_has_equal_rows() {
        let arch = Architecture {
            tag: "lin".into(),
            encoder_widths: vec![3],
            pooling: Pooling::Mean,
            head_widths: vec![],
        };
        let mut m = ClassifierModel::new(arch, 2, 0).unwrap();
        m.encoder[0].weight = Array2::eye(3);
        // Shift so every coordinate is positive and the ReLU passes everything.
        m.encoder[0].bias = Array1::from(vec![5.0, 5.0, 5.0]);
        let b = backward_input(&m, &cloud(9, 1), &[1.0, -1.0]);
        let first = b.input_grad.row(0).to_owned();
        for row in b.input_grad.rows() {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, g) = cross_entropy(&[0.0; 4], 2);
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        let (l, g) = cross_entropy(&[1000.0, 0.0, 0.0, 0.0], 0);
        assert!(l.abs() < 1e-12 && l.is_finite());
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_gradient_by_differences() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let (_, g) = cross_entropy(&logits, 1);
        for i in 0..4 {
            let h = 1e-6;
            let mut up = logits;
            up[i] += h;
            let mut dn = logits;
            dn[i] -= h;
            let fd = (cross_entropy(&up, 1).0 - cross_entropy(&dn, 1).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut s = AdamState::new(3, 0.01);
        let mut p = vec![1.0, -2.0, 3.0];
        for _ in 0..5 {
            s.step(&mut p, &[0.0; 3]);
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_constant_gradient_moves_against_it() {
        let mut s = AdamState::new(2, 0.01);
        let mut p = vec![0.0, 0.0];
        for _ in 0..100 {
            s.step(&mut p, &[2.0, -0.5]);
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
        // Steady-state step size approaches lr.
        assert!((p[0] + 1.0).abs() < 1e-6 && (p[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn adam_hand_trace() {
        // lr 0.1, b1 0.9, b2 0.999, eps 1e-8, x0 = 1, grads 0.5, -1, 2.
        // t=1: m=0.05 v=0.00025 mh=0.5 vh=0.25 -> x = 1 - 0.1*0.5/0.5 = 0.9
        // t=2: m=0.045-0.1=-0.055 v=0.00024975+0.001=0.00124975
        //      mh=-0.055/0.19 vh=0.00124975/0.001999 -> x = 0.9 + 0.1*0.2894737/0.7906927
        // t=3: m=-0.0495+0.2=0.1505 v=0.0012485+0.004=0.0052485
        //      mh=0.1505/0.271 vh=0.0052485/0.002997001
        let mut s = AdamState::new(1, 0.1);
        let mut x = vec![1.0];
        s.step(&mut x, &[0.5]);
        let x1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((x[0] - x1).abs() < 1e-12);
        s.step(&mut x, &[-1.0]);
        let x2 = x1 + 0.1 * (0.055 / 0.19) / ((0.001_249_75f64 / 0.001_999).sqrt() + 1e-8);
        assert!((x[0] - x2).abs() < 1e-9, "{} vs {x2}", x[0]);
        s.step(&mut x, &[2.0]);
        let v3 = 0.999 * 0.001_249_75 + 0.001 * 4.0;
        let x3 = x2 - 0.1 * (0.1505 / 0.271) / ((v3 / (1.0 - 0.999f64.powi(3))).sqrt() + 1e-8);
        assert!((x[0] - x3).abs() < 1e-9, "{} vs {x3}", x[0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ClassifierModel::new(Architecture::arch_b(), 5, 11).unwrap();
        let ck = m.to_checkpoint(11, serde_json::Value::Null);
        let json = ck.to_json().unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(ClassifierModel::from_checkpoint(&back).unwrap(), m);
    }

    #[test]
    fn architectures_differ_in_size() {
        let a = ClassifierModel::new(Architecture::arch_a(), 4, 0).unwrap();
        let b = ClassifierModel::new(Architecture::arch_b(), 4, 0).unwrap();
        assert_ne!(a.num_params(), b.num_params());
        assert_eq!(a.latent_dim(), 128);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let m = ClassifierModel::new(Architecture::arch_a(), 2, 0).unwrap();
        let err = train_classifier(&m, &[], &[], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }
}
