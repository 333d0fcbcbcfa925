//! Normal-direction attack with a hard per-point bound.
//!
//! Each point may only slide along its clean-cloud normal, `p' = p + delta * u`,
//! with `|delta| <= B`. The shift lengths are optimized with Adam against a
//! misclassification term plus Hausdorff and Chamfer regularizers.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2, estimate_normals, PointCloud, Vec3};
use crate::metrics::{full_report, nearest_pairs, MetricReport};
use crate::nn::{array_to_points, cross_entropy, points_to_array, AdamState, ClassifierModel};
use crate::par::Exec;
use crate::seed;
use crate::transform::{AnalyticKind, AnalyticTransform, Scope, TransformModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub bound: f64,
    /// Hausdorff weight.
    pub lambda1: f64,
    /// Chamfer weight.
    pub lambda2: f64,
    /// Weight of the through-transform term when attacking `f` and `f(T(.))` jointly.
    pub alpha: f64,
    pub iterations: usize,
    pub lr: f64,
    pub target_class: usize,
    pub k_neighbors: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            bound: 0.02,
            lambda1: 0.1,
            lambda2: 1.0,
            alpha: 1.0,
            iterations: 500,
            lr: 0.01,
            target_class: 0,
            k_neighbors: 20,
        }
    }
}

impl AttackConfig {
    pub fn for_target(&self, target: usize) -> Self {
        AttackConfig {
            target_class: target,
            ..self.clone()
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.bound > 0.0 && self.bound <= 1.0) {
            return Err(Error::invalid(format!("bound must lie in (0, 1], got {}", self.bound)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("attack needs at least one iteration"));
        }
        if !(self.lr > 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() || !self.alpha.is_finite() {
            return Err(Error::invalid("attack weights and learning rate must be finite, lr > 0"));
        }
        if self.k_neighbors == 0 {
            return Err(Error::invalid("k_neighbors must be positive"));
        }
        if self.target_class >= num_classes {
            return Err(Error::invalid(format!(
                "target class {} out of range for {num_classes} classes",
                self.target_class
            )));
        }
        Ok(())
    }
}

/// One cloud to attack toward one target class.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackInstance {
    pub id: String,
    pub cloud: PointCloud,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationState {
    pub clean: PointCloud,
    /// Unit normals of the clean cloud, fixed for the whole attack.
    pub normals: Vec<Vec3>,
    pub delta: Vec<f64>,
}

impl PerturbationState {
    /// Zero perturbation. Normals carried by the cloud are used as given,
    /// otherwise they are estimated with `k` neighbors.
    pub fn new(clean: &PointCloud, k: usize) -> Result<Self> {
        clean.validate()?;
        if clean.len() < 2 {
            return Err(Error::invalid("attack needs at least two points"));
        }
        let normals = match &clean.normals {
            Some(n) => n.clone(),
            None => estimate_normals(clean, k)?.cloud.normals.unwrap(),
        };
        Ok(PerturbationState {
            clean: clean.clone(),
            normals,
            delta: vec![0.0; clean.len()],
        })
    }

    /// Uniform initialization in `[-bound/10, bound/10]`.
    pub fn randomize(&mut self, bound: f64, seed_value: u64) {
        let mut rng = seed::rng(seed_value);
        let r = bound / 10.0;
        for d in &mut self.delta {
            *d = rng.random_range(-r..=r);
        }
    }

    pub fn adversarial_points(&self) -> Vec<Vec3> {
        self.clean
            .points
            .iter()
            .zip(&self.normals)
            .zip(&self.delta)
            .map(|((p, u), d)| [p[0] + d * u[0], p[1] + d * u[1], p[2] + d * u[2]])
            .collect()
    }
}

pub fn materialize(state: &PerturbationState) -> PointCloud {
    PointCloud {
        points: state.adversarial_points(),
        normals: None,
        label: state.clean.label,
    }
}

pub fn project_bound(delta: &[f64], bound: f64) -> Vec<f64> {
    delta.iter().map(|d| d.clamp(-bound, bound)).collect()
}

pub fn project_bound_inplace(delta: &mut [f64], bound: f64) {
    for d in delta {
        *d = d.clamp(-bound, bound);
    }
}

/// What the misclassification term is measured on.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// `f(P')`.
    Plain,
    /// `f(T(P'))` only.
    Transformed(&'a TransformModel),
    /// `f(P') + alpha * f(T(P'))`.
    Dual(&'a TransformModel),
    /// `f(A_t(P'))` with a fresh random point-wise analytic transform at each
    /// iteration, cycling through the four kinds.
    AnalyticEnsemble { scope: Scope, seed: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub misclassification: f64,
    pub hausdorff: f64,
    pub chamfer: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub delta_grad: Vec<f64>,
    /// Prediction of the untransformed model on `P'`.
    pub prediction: usize,
}

fn through_model(model: &ClassifierModel, x: &Array2<f64>, target: usize) -> (f64, Array2<f64>) {
    let trace = model.forward_trace(x);
    let (ce, g) = cross_entropy(trace.logits.as_slice().unwrap(), target);
    (ce, model.backward(&trace, Some(&g), None, false).input_grad)
}

/// Loss and gradient with respect to `delta` at the current state.
/// `iteration` selects the random transform of the analytic ensemble.
pub fn evaluate(
    model: &ClassifierModel,
    state: &PerturbationState,
    cfg: &AttackConfig,
    objective: &Objective,
    iteration: u64,
) -> Evaluation {
    let target = cfg.target_class;
    let adv = state.adversarial_points();
    let n = adv.len();
    let x = points_to_array(&adv);
    let mut d_x = Array2::<f64>::zeros((n, 3));
    let mut mis = 0.0;

    let prediction = match objective {
        Objective::Plain | Objective::Dual(_) => {
            let trace = model.forward_trace(&x);
            let (ce, g) = cross_entropy(trace.logits.as_slice().unwrap(), target);
            mis += ce;
            d_x += &model.backward(&trace, Some(&g), None, false).input_grad;
            trace.prediction()
        }
        _ => model.predict_points(&adv),
    };
    match objective {
        Objective::Plain => {}
        Objective::Transformed(t) | Objective::Dual(t) => {
            let w = if matches!(objective, Objective::Dual(_)) { cfg.alpha } else { 1.0 };
            let (y, tr) = t.forward_array(&x);
            let (ce, mut d_y) = through_model(model, &y, target);
            mis += w * ce;
            d_y *= w;
            let (_, d) = t.backward_array(&x, &tr, &d_y, false);
            d_x += &d;
        }
        Objective::AnalyticEnsemble { scope, seed: s } => {
            let kind = AnalyticKind::ALL[(iteration % 4) as usize];
            let field = AnalyticTransform::random(kind, *scope, seed::derive_indexed(*s, "ensemble", iteration))
                .realize(n)
                .expect("maximal ranges are always valid");
            let y = points_to_array(&field.apply(&adv));
            let (ce, d_y) = through_model(model, &y, target);
            mis += ce;
            d_x += &field.pullback(&d_y);
        }
    }

    let clean = &state.clean.points;
    let pairs = nearest_pairs(&adv, clean);
    let mut chamfer = 0.0;
    let mut worst = 0usize;
    for (i, &(j, d)) in pairs.iter().enumerate() {
        chamfer += d;
        if d > pairs[worst].1 {
            worst = i;
        }
        for a in 0..3 {
            d_x[[i, a]] += cfg.lambda2 * 2.0 * (adv[i][a] - clean[j][a]) / n as f64;
        }
    }
    chamfer /= n as f64;
    let (wj, hausdorff) = pairs[worst];
    for a in 0..3 {
        d_x[[worst, a]] += cfg.lambda1 * 2.0 * (adv[worst][a] - clean[wj][a]);
    }

    let delta_grad = (0..n)
        .map(|i| {
            let u = state.normals[i];
            d_x[[i, 0]] * u[0] + d_x[[i, 1]] * u[1] + d_x[[i, 2]] * u[2]
        })
        .collect();
    Evaluation {
        loss: LossBreakdown {
            total: mis + cfg.lambda1 * hausdorff + cfg.lambda2 * chamfer,
            misclassification: mis,
            hausdorff,
            chamfer,
        },
        delta_grad,
        prediction,
    }
}

/// Attack loss on `f(P')`, or on `f(T(P'))` when a transform is given, and its
/// gradient with respect to the shift lengths.
pub fn attack_loss(
    model: &ClassifierModel,
    state: &PerturbationState,
    cfg: &AttackConfig,
    transform: Option<&TransformModel>,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate(model.num_classes)?;
    if state.delta.len() != state.clean.len() || state.normals.len() != state.clean.len() {
        return Err(Error::invalid("delta and normals must have one entry per point"));
    }
    let objective = match transform {
        Some(t) => Objective::Transformed(t),
        None => Objective::Plain,
    };
    let e = evaluate(model, state, cfg, &objective, 0);
    Ok((e.loss.total, e.delta_grad))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackResult {
    #[serde(skip)]
    pub adversarial: PointCloud,
    /// Shift lengths of the returned iterate; absent for coordinate attacks.
    #[serde(skip)]
    pub delta: Option<Vec<f64>>,
    pub target_class: usize,
    pub success: bool,
    pub iterations_used: usize,
    pub metrics: MetricReport,
    pub final_losses: LossBreakdown,
}

impl AttackResult {
    /// JSON record with the instance id attached.
    pub fn record(&self, instance_id: &str) -> serde_json::Value {
        serde_json::json!({
            "instance_id": instance_id,
            "target_class": self.target_class,
            "success": self.success,
            "iterations_used": self.iterations_used,
            "losses": self.final_losses,
        })
    }
}

pub fn run_ita(
    model: &ClassifierModel,
    clean: &PointCloud,
    cfg: &AttackConfig,
    transform: Option<&TransformModel>,
    seed_value: u64,
) -> Result<AttackResult> {
    let objective = match transform {
        Some(t) => Objective::Transformed(t),
        None => Objective::Plain,
    };
    run_ita_with(model, clean, cfg, &objective, seed_value)
}

/// Adam over the shift lengths with projection after every step. Success is a
/// targeted hit of `model` on `P'`; the lowest-loss successful iterate is
/// returned, otherwise the last one.
pub fn run_ita_with(
    model: &ClassifierModel,
    clean: &PointCloud,
    cfg: &AttackConfig,
    objective: &Objective,
    seed_value: u64,
) -> Result<AttackResult> {
    cfg.validate(model.num_classes)?;
    let mut state = PerturbationState::new(clean, cfg.k_neighbors)?;
    state.randomize(cfg.bound, seed::derive(seed_value, "delta-init"));
    let mut adam = AdamState::new(state.delta.len(), cfg.lr);
    let mut best: Option<(LossBreakdown, Vec<f64>, usize)> = None;
    let mut last = LossBreakdown::default();
    for t in 1..=cfg.iterations {
        let e = evaluate(model, &state, cfg, objective, t as u64 - 1);
        if e.prediction == cfg.target_class && best.as_ref().is_none_or(|b| e.loss.total < b.0.total) {
            best = Some((e.loss, state.delta.clone(), t));
        }
        last = e.loss;
        if t < cfg.iterations {
            adam.step(&mut state.delta, &e.delta_grad);
            project_bound_inplace(&mut state.delta, cfg.bound);
        }
    }
    let (losses, success, iterations_used) = match best {
        Some((l, d, t)) => {
            state.delta = d;
            (l, true, t)
        }
        None => (last, false, cfg.iterations),
    };
    let adversarial = materialize(&state);
    let metrics = full_report(&adversarial, clean, cfg.k_neighbors)?;
    Ok(AttackResult {
        adversarial,
        delta: Some(state.delta),
        target_class: cfg.target_class,
        success,
        iterations_used,
        metrics,
        final_losses: losses,
    })
}

/// Attacks every instance independently; instance `i` uses sub-seed `i`.
pub fn attack_batch(
    model: &ClassifierModel,
    instances: &[AttackInstance],
    cfg: &AttackConfig,
    objective: &Objective,
    seed_value: u64,
    exec: Exec,
) -> Result<Vec<AttackResult>> {
    let indexed: Vec<(usize, &AttackInstance)> = instances.iter().enumerate().collect();
    exec.map_slice(&indexed, |(i, inst)| {
        run_ita_with(
            model,
            &inst.cloud,
            &cfg.for_target(inst.target),
            objective,
            seed::derive_indexed(seed_value, "attack", *i as u64),
        )
    })
    .into_iter()
    .collect()
}

pub const FGSM_ITERATIONS: usize = 100;

pub fn fgsm_baseline(model: &ClassifierModel, clean: &PointCloud, epsilon: f64, target: usize) -> Result<AttackResult> {
    fgsm_baseline_with(model, clean, epsilon, target, FGSM_ITERATIONS, 20)
}

/// Targeted iterated sign-gradient descent on raw coordinates with step
/// `epsilon / iterations`, clipped to the L-infinity ball of radius `epsilon`.
pub fn fgsm_baseline_with(
    model: &ClassifierModel,
    clean: &PointCloud,
    epsilon: f64,
    target: usize,
    iterations: usize,
    k_metrics: usize,
) -> Result<AttackResult> {
    clean.validate()?;
    if target >= model.num_classes {
        return Err(Error::invalid(format!("target class {target} out of range")));
    }
    if !(epsilon >= 0.0) || iterations == 0 {
        return Err(Error::invalid("fgsm needs epsilon >= 0 and at least one iteration"));
    }
    let base = points_to_array(&clean.points);
    let mut x = base.clone();
    let step = epsilon / iterations as f64;
    if epsilon > 0.0 {
        for _ in 0..iterations {
            let (_, g) = through_model(model, &x, target);
            ndarray::Zip::from(&mut x).and(&g).and(&base).for_each(|v, &gi, &b| {
                let s = if gi > 0.0 {
                    1.0
                } else if gi < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *v = (*v - step * s).clamp(b - epsilon, b + epsilon);
            });
        }
    }
    let trace = model.forward_trace(&x);
    let (ce, _) = cross_entropy(trace.logits.as_slice().unwrap(), target);
    let adversarial = PointCloud {
        points: array_to_points(&x),
        normals: None,
        label: clean.label,
    };
    let metrics = full_report(&adversarial, clean, k_metrics)?;
    let chamfer_sum: f64 = adversarial
        .points
        .iter()
        .map(|p| clean.points.iter().map(|q| dist2(*p, *q)).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(AttackResult {
        adversarial,
        delta: None,
        target_class: target,
        success: trace.prediction() == target,
        iterations_used: iterations,
        metrics,
        final_losses: LossBreakdown {
            total: ce,
            misclassification: ce,
            hausdorff: metrics.d_hausdorff,
            chamfer: chamfer_sum / clean.len() as f64,
        },
    })
}
