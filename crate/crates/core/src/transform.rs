//! Point-wise transformation models.
//!
//! [`TransformModel`] is a learnable per-point map `3 -> h -> 3` with a ReLU in
//! between and an optional residual connection. [`adversarial_learn`] trains it
//! adversarially against a frozen classifier: perturbations are searched to
//! survive the transform, then the transform is updated to undo them while
//! keeping clean clouds recognizable. [`AnalyticTransform`] provides the
//! learning-free translation, rotation, shearing and jittering baselines.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackInstance, Objective, PerturbationState};
use crate::error::{Error, Result};
use crate::geometry::{add, mat_vec, rotation_z, Mat3, PointCloud, Vec3};
use crate::metrics::nearest_pairs;
use crate::nn::{
    array_to_points, cross_entropy, dense_backward, dense_relu_backward, points_to_array, relu_inplace, AdamState,
    Checkpoint, ClassifierModel, DenseLayer, LayerGrad, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
use crate::par::Exec;
use crate::seed;

pub const TRANSFORM_TAG: &str = "transform-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct TransformModel {
    /// h x 3
    pub layer1: DenseLayer,
    /// 3 x h
    pub layer2: DenseLayer,
    pub residual: bool,
}

/// Hidden activations of one transform application.
#[derive(Clone, Debug)]
pub struct TransformTrace {
    hidden: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformGrads {
    pub layer1: LayerGrad,
    pub layer2: LayerGrad,
}

impl TransformGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in [&self.layer1, &self.layer2] {
            out.extend(g.weight.iter());
            out.extend(g.bias.iter());
        }
        out
    }
}

impl TransformModel {
    /// Residual transform whose second layer is zero, so it starts as the
    /// exact identity.
    pub fn identity(hidden: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        TransformModel {
            layer1: DenseLayer::xavier(3, hidden, &mut rng),
            layer2: DenseLayer::zeros(hidden, 3),
            residual: true,
        }
    }

    pub fn hidden(&self) -> usize {
        self.layer1.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layer1.num_params() + self.layer2.num_params()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in [&self.layer1, &self.layer2] {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::invalid("transform parameter count mismatch"));
        }
        let mut it = params.iter();
        for l in [&mut self.layer1, &mut self.layer2] {
            l.weight.iter_mut().for_each(|w| *w = *it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = *it.next().unwrap());
        }
        Ok(())
    }

    pub fn forward_array(&self, x: &Array2<f64>) -> (Array2<f64>, TransformTrace) {
        let mut hidden = self.layer1.forward_rows(x);
        relu_inplace(&mut hidden);
        let mut y = self.layer2.forward_rows(&hidden);
        if self.residual {
            y += x;
        }
        (y, TransformTrace { hidden })
    }

    /// Gradient with respect to the input and, if requested, the parameters.
    pub fn backward_array(
        &self,
        x: &Array2<f64>,
        trace: &TransformTrace,
        d_out: &Array2<f64>,
        want_params: bool,
    ) -> (Option<TransformGrads>, Array2<f64>) {
        let mut g1 = LayerGrad::zeros_like(&self.layer1);
        let mut g2 = LayerGrad::zeros_like(&self.layer2);
        let mut d_hidden = dense_backward(&self.layer2, &trace.hidden, d_out, want_params.then_some(&mut g2));
        let mut d_in = dense_relu_backward(
            &self.layer1,
            x,
            &trace.hidden,
            &mut d_hidden,
            want_params.then_some(&mut g1),
        );
        if self.residual {
            d_in += d_out;
        }
        let grads = want_params.then_some(TransformGrads { layer1: g1, layer2: g2 });
        (grads, d_in)
    }

    pub fn to_checkpoint(&self, training_seed: u64) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch_tag: TRANSFORM_TAG.into(),
            architecture: None,
            num_classes: 0,
            layer_shapes: vec![
                [self.layer1.output_dim(), 3],
                [3, self.layer2.input_dim()],
            ],
            params: self.params_flat(),
            training_seed,
            metadata: serde_json::json!({ "residual": self.residual }),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.arch_tag != TRANSFORM_TAG {
            return Err(Error::invalid(format!("expected a {TRANSFORM_TAG} checkpoint, got {}", ck.arch_tag)));
        }
        let hidden = match ck.layer_shapes.as_slice() {
            [[h, 3], [3, h2]] if h == h2 => *h,
            _ => return Err(Error::invalid("transform checkpoint has unexpected layer shapes")),
        };
        let mut t = TransformModel {
            layer1: DenseLayer::zeros(3, hidden),
            layer2: DenseLayer::zeros(hidden, 3),
            residual: ck.metadata.get("residual").and_then(|v| v.as_bool()).unwrap_or(true),
        };
        t.set_params_flat(&ck.params)?;
        Ok(t)
    }
}

pub fn apply_transform(t: &TransformModel, cloud: &PointCloud) -> PointCloud {
    let (y, _) = t.forward_array(&points_to_array(&cloud.points));
    PointCloud {
        points: array_to_points(&y),
        normals: None,
        label: cloud.label,
    }
}

/// Reverse-mode gradients of `<output_grad, T(cloud)>` with respect to the
/// transform parameters and the input points.
pub fn transform_backward(
    t: &TransformModel,
    cloud: &PointCloud,
    output_grad: &Array2<f64>,
) -> Result<(TransformGrads, Array2<f64>)> {
    if output_grad.dim() != (cloud.len(), 3) {
        return Err(Error::invalid("output gradient must be n x 3"));
    }
    let x = points_to_array(&cloud.points);
    let (_, trace) = t.forward_array(&x);
    let (g, d_in) = t.backward_array(&x, &trace, output_grad, true);
    Ok((g.unwrap(), d_in))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvLearnConfig {
    /// Outer rounds (L1).
    pub rounds: usize,
    /// Perturbation steps per round (L2).
    pub delta_steps: usize,
    /// Transform steps per round (L3).
    pub transform_steps: usize,
    pub beta: f64,
    pub lambda3: f64,
    pub lr_transform: f64,
    pub hidden: usize,
}

impl Default for AdvLearnConfig {
    fn default() -> Self {
        AdvLearnConfig {
            rounds: 10,
            delta_steps: 500,
            transform_steps: 50,
            beta: 1.0,
            lambda3: 10.0,
            lr_transform: 0.001,
            hidden: 16,
        }
    }
}

impl AdvLearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.delta_steps == 0 || self.transform_steps == 0 {
            return Err(Error::invalid("adversarial learning iteration counts must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("transform hidden width must be positive"));
        }
        Ok(())
    }
}

/// Per-step diagnostics of [`adversarial_learn`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvLearnTrace {
    /// Total transform-side loss at every transform step.
    pub transform_loss: Vec<f64>,
    /// Clean-cloud cross-entropy through the transform at every transform step.
    pub clean_ce: Vec<f64>,
    /// Mean perturbation-side loss over the working set after each round.
    pub attack_loss: Vec<f64>,
}

struct Working {
    state: PerturbationState,
    adam: AdamState,
    label: usize,
    target: usize,
}

/// Transform-side objective on one (clean, adversarial) pair: cross-entropy of
/// the transformed adversarial cloud and of the transformed clean cloud toward
/// the true label, plus a Chamfer term keeping the transform close to its input.
pub fn transform_step_loss(
    model: &ClassifierModel,
    t: &TransformModel,
    clean: &[Vec3],
    adv: &[Vec3],
    label: usize,
    cfg: &AdvLearnConfig,
) -> (f64, f64, TransformGrads) {
    let x_adv = points_to_array(adv);
    let (y_adv, tr_adv) = t.forward_array(&x_adv);
    let f_adv = model.forward_trace(&y_adv);
    let (ce_adv, g_adv) = cross_entropy(f_adv.logits.as_slice().unwrap(), label);
    let mut d_y_adv = model.backward(&f_adv, Some(&g_adv), None, false).input_grad;

    let x_clean = points_to_array(clean);
    let (y_clean, tr_clean) = t.forward_array(&x_clean);
    let f_clean = model.forward_trace(&y_clean);
    let (ce_clean, g_clean) = cross_entropy(f_clean.logits.as_slice().unwrap(), label);
    let mut d_y_clean = model.backward(&f_clean, Some(&g_clean), None, false).input_grad;
    d_y_clean *= cfg.beta;

    // Directed Chamfer from the adversarial cloud to its transformed image.
    let transformed = array_to_points(&y_adv);
    let pairs = nearest_pairs(adv, &transformed);
    let n = adv.len() as f64;
    let mut chamfer = 0.0;
    for (i, &(j, d)) in pairs.iter().enumerate() {
        chamfer += d;
        for a in 0..3 {
            d_y_adv[[j, a]] -= cfg.lambda3 * 2.0 * (adv[i][a] - transformed[j][a]) / n;
        }
    }
    chamfer /= n;

    let (ga, _) = t.backward_array(&x_adv, &tr_adv, &d_y_adv, true);
    let (gc, _) = t.backward_array(&x_clean, &tr_clean, &d_y_clean, true);
    let mut g = ga.unwrap();
    let gc = gc.unwrap();
    g.layer1.weight += &gc.layer1.weight;
    g.layer1.bias += &gc.layer1.bias;
    g.layer2.weight += &gc.layer2.weight;
    g.layer2.bias += &gc.layer2.bias;
    let total = ce_adv + cfg.beta * ce_clean + cfg.lambda3 * chamfer;
    (total, ce_clean, g)
}

/// Two-step adversarial learning of a transform against a frozen classifier.
///
/// Each of the `rounds` outer iterations first runs `delta_steps` perturbation
/// updates on every working instance, attacking both `f` and `f(T(.))`, then
/// `transform_steps` transform updates, each on one instance chosen
/// round-robin. The classifier is only read.
pub fn adversarial_learn(
    model: &ClassifierModel,
    working_set: &[AttackInstance],
    cfg: &AdvLearnConfig,
    attack_cfg: &AttackConfig,
    seed_value: u64,
) -> Result<(TransformModel, AdvLearnTrace)> {
    adversarial_learn_with(model, working_set, cfg, attack_cfg, seed_value, Exec::default())
}

pub fn adversarial_learn_with(
    model: &ClassifierModel,
    working_set: &[AttackInstance],
    cfg: &AdvLearnConfig,
    attack_cfg: &AttackConfig,
    seed_value: u64,
    exec: Exec,
) -> Result<(TransformModel, AdvLearnTrace)> {
    cfg.validate()?;
    if working_set.is_empty() {
        return Err(Error::invalid("adversarial learning needs a nonempty working set"));
    }
    let mut working = Vec::with_capacity(working_set.len());
    for (i, inst) in working_set.iter().enumerate() {
        let label = inst
            .cloud
            .label
            .ok_or_else(|| Error::invalid(format!("instance {} has no label", inst.id)))?;
        let icfg = attack_cfg.for_target(inst.target);
        icfg.validate(model.num_classes)?;
        let mut state = PerturbationState::new(&inst.cloud, icfg.k_neighbors)?;
        state.randomize(icfg.bound, seed::derive_indexed(seed_value, "advlearn-delta", i as u64));
        let adam = AdamState::new(state.delta.len(), icfg.lr);
        working.push(Working {
            state,
            adam,
            label,
            target: inst.target,
        });
    }
    let mut t = TransformModel::identity(cfg.hidden, seed::derive(seed_value, "transform-init"));
    let mut t_params = t.params_flat();
    let mut t_adam = AdamState::new(t_params.len(), cfg.lr_transform);
    let mut trace = AdvLearnTrace::default();
    let mut cursor = 0usize;
    for _round in 0..cfg.rounds {
        let t_ref = &t;
        let losses: Vec<f64> = {
            let mut out = vec![0.0; working.len()];
            exec.for_each_mut(&mut working, |_, w| {
                let icfg = attack_cfg.for_target(w.target);
                for _ in 0..cfg.delta_steps {
                    let eval = attack::evaluate(model, &w.state, &icfg, &Objective::Dual(t_ref), 0);
                    w.adam.step(&mut w.state.delta, &eval.delta_grad);
                    attack::project_bound_inplace(&mut w.state.delta, icfg.bound);
                }
            });
            for (o, w) in out.iter_mut().zip(&working) {
                let icfg = attack_cfg.for_target(w.target);
                *o = attack::evaluate(model, &w.state, &icfg, &Objective::Dual(t_ref), 0).loss.total;
            }
            out
        };
        trace.attack_loss.push(losses.iter().sum::<f64>() / losses.len() as f64);
        for _ in 0..cfg.transform_steps {
            let w = &working[cursor % working.len()];
            cursor += 1;
            let adv = w.state.adversarial_points();
            let (loss, ce_clean, g) = transform_step_loss(model, &t, &w.state.clean.points, &adv, w.label, cfg);
            t_adam.step(&mut t_params, &g.flat());
            t.set_params_flat(&t_params)?;
            trace.transform_loss.push(loss);
            trace.clean_ce.push(ce_clean);
        }
    }
    Ok((t, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalyticKind {
    Translation,
    Rotation,
    Shearing,
    Jittering,
}

impl AnalyticKind {
    pub const ALL: [AnalyticKind; 4] = [
        AnalyticKind::Translation,
        AnalyticKind::Rotation,
        AnalyticKind::Shearing,
        AnalyticKind::Jittering,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(AnalyticKind::Translation),
            "rotation" => Ok(AnalyticKind::Rotation),
            "shearing" => Ok(AnalyticKind::Shearing),
            "jittering" => Ok(AnalyticKind::Jittering),
            other => Err(Error::invalid(format!("unknown transform kind {other:?}"))),
        }
    }

    fn param_count(self) -> usize {
        match self {
            AnalyticKind::Translation | AnalyticKind::Jittering => 3,
            AnalyticKind::Rotation => 1,
            AnalyticKind::Shearing => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Cloud,
    Point,
}

/// Largest admissible parameter magnitude for a kind and scope. Rotation is
/// in degrees; jittering is the clip value of N(0, 0.01^2) noise.
pub fn max_amount(kind: AnalyticKind, scope: Scope) -> f64 {
    match (kind, scope) {
        (AnalyticKind::Translation, Scope::Cloud) => 0.2,
        (AnalyticKind::Translation, Scope::Point) => 0.02,
        (AnalyticKind::Rotation, Scope::Cloud) => 180.0,
        (AnalyticKind::Rotation, Scope::Point) => 5.0,
        (AnalyticKind::Shearing, Scope::Cloud) => 0.2,
        (AnalyticKind::Shearing, Scope::Point) => 0.1,
        (AnalyticKind::Jittering, Scope::Cloud) => 0.05,
        (AnalyticKind::Jittering, Scope::Point) => 0.02,
    }
}

pub const JITTER_SIGMA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalyticParams {
    /// Explicit parameters shared by every point: translation `[x, y, z]`,
    /// rotation `[degrees]`, shearing `[xy, xz, yx, yz, zx, zy]`, jitter `[x, y, z]`.
    Fixed(Vec<f64>),
    /// Parameters drawn uniformly in `[-amount, amount]` (jitter: Gaussian
    /// clipped at `amount`), once per cloud or once per point.
    Random { amount: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticTransform {
    pub kind: AnalyticKind,
    pub scope: Scope,
    pub params: AnalyticParams,
    pub seed: u64,
}

/// Per-point affine maps `p -> m p + t`; a single entry applies to every point.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineField {
    pub maps: Vec<(Mat3, Vec3)>,
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl AffineField {
    pub fn map(&self, i: usize) -> &(Mat3, Vec3) {
        if self.maps.len() == 1 {
            &self.maps[0]
        } else {
            &self.maps[i]
        }
    }

    pub fn apply(&self, points: &[Vec3]) -> Vec<Vec3> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (m, t) = self.map(i);
                add(mat_vec(m, *p), *t)
            })
            .collect()
    }

    /// Pulls an output gradient back through the maps (`m^T g`).
    pub fn pullback(&self, grad: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(grad.raw_dim());
        for i in 0..grad.nrows() {
            let (m, _) = self.map(i);
            for a in 0..3 {
                out[[i, a]] = m[0][a] * grad[[i, 0]] + m[1][a] * grad[[i, 1]] + m[2][a] * grad[[i, 2]];
            }
        }
        out
    }
}

fn shear_matrix(s: &[f64]) -> Mat3 {
    [[1.0, s[0], s[1]], [s[2], 1.0, s[3]], [s[4], s[5], 1.0]]
}

fn map_from(kind: AnalyticKind, p: &[f64]) -> (Mat3, Vec3) {
    match kind {
        AnalyticKind::Translation | AnalyticKind::Jittering => (IDENTITY, [p[0], p[1], p[2]]),
        AnalyticKind::Rotation => (rotation_z(p[0] * PI / 180.0), [0.0; 3]),
        AnalyticKind::Shearing => (shear_matrix(p), [0.0; 3]),
    }
}

impl AnalyticTransform {
    pub fn random(kind: AnalyticKind, scope: Scope, seed: u64) -> Self {
        AnalyticTransform {
            kind,
            scope,
            params: AnalyticParams::Random {
                amount: max_amount(kind, scope),
            },
            seed,
        }
    }

    pub fn fixed(kind: AnalyticKind, scope: Scope, values: Vec<f64>) -> Self {
        AnalyticTransform {
            kind,
            scope,
            params: AnalyticParams::Fixed(values),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let max = max_amount(self.kind, self.scope);
        match &self.params {
            AnalyticParams::Fixed(v) => {
                if v.len() != self.kind.param_count() {
                    return Err(Error::invalid(format!(
                        "{:?} takes {} parameters, got {}",
                        self.kind,
                        self.kind.param_count(),
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite() || x.abs() > max + 1e-12) {
                    return Err(Error::invalid(format!("{:?} parameters must lie within +-{max}", self.kind)));
                }
            }
            AnalyticParams::Random { amount } => {
                if !(0.0..=max + 1e-12).contains(amount) {
                    return Err(Error::invalid(format!("{:?} amount must lie in [0, {max}]", self.kind)));
                }
            }
        }
        Ok(())
    }

    /// Draws the concrete affine maps for a cloud of `n` points.
    pub fn realize(&self, n: usize) -> Result<AffineField> {
        self.validate()?;
        let mut rng = seed::rng(self.seed);
        let normal = Normal::new(0.0, JITTER_SIGMA).unwrap();
        let mut draw = |amount: f64| -> Vec<f64> {
            (0..self.kind.param_count())
                .map(|_| match self.kind {
                    AnalyticKind::Jittering => normal.sample(&mut rng).clamp(-amount, amount),
                    _ if amount == 0.0 => 0.0,
                    _ => rng.random_range(-amount..=amount),
                })
                .collect()
        };
        let maps = match (&self.params, self.scope) {
            (AnalyticParams::Fixed(v), _) => vec![map_from(self.kind, v)],
            (AnalyticParams::Random { amount }, Scope::Cloud) => vec![map_from(self.kind, &draw(*amount))],
            (AnalyticParams::Random { amount }, Scope::Point) => {
                (0..n).map(|_| map_from(self.kind, &draw(*amount))).collect()
            }
        };
        Ok(AffineField { maps })
    }
}

pub fn apply_analytic(t: &AnalyticTransform, cloud: &PointCloud) -> Result<PointCloud> {
    let field = t.realize(cloud.len())?;
    Ok(PointCloud {
        points: field.apply(&cloud.points),
        normals: None,
        label: cloud.label,
    })
}
