//! Input-space defenses and latent-constraint adversarial training.

use ndarray::Array1;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::{run_ita, AttackConfig};
use crate::error::{Error, Result};
use crate::geometry::{estimate_normals, knn, PointCloud};
use crate::nn::{
    batch_ce_grads, label_of, points_to_array, train_loop, ClassifierModel, ForwardTrace, ModelGrads, TrainConfig,
    TrainHistory,
};
use crate::par::Exec;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    pub srs_keep: f64,
    pub sor_k: usize,
    pub sor_std_mult: f64,
    pub noise_sigma_frac: f64,
    pub noise_k: usize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            srs_keep: 0.875,
            sor_k: 2,
            sor_std_mult: 1.1,
            noise_sigma_frac: 0.02,
            noise_k: 20,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.srs_keep > 0.0 && self.srs_keep <= 1.0) {
            return Err(Error::invalid("srs_keep must lie in (0, 1]"));
        }
        if self.sor_k == 0 || !(self.sor_std_mult > 0.0) {
            return Err(Error::invalid("sor_k must be >= 1 and sor_std_mult > 0"));
        }
        if !(self.noise_sigma_frac >= 0.0) || self.noise_k == 0 {
            return Err(Error::invalid("noise_sigma_frac must be >= 0 and noise_k >= 1"));
        }
        Ok(())
    }
}

/// Uniform random subset of `round(keep * n)` points without replacement,
/// in original order.
pub fn srs(cloud: &PointCloud, keep: f64, seed_value: u64) -> Result<PointCloud> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::invalid(format!("keep fraction must lie in (0, 1], got {keep}")));
    }
    let n = cloud.len();
    let m = ((keep * n as f64).round() as usize).max(1).min(n);
    let mut rng = seed::rng(seed_value);
    let mut idx = sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(cloud.select(&idx))
}

/// Drops points whose mean distance to their `k` nearest neighbors exceeds
/// `mean + std_mult * std` of that statistic over the cloud.
pub fn sor(cloud: &PointCloud, k: usize, std_mult: f64) -> Result<PointCloud> {
    if cloud.len() <= k || k == 0 {
        return Err(Error::invalid(format!("sor needs more than k = {k} points")));
    }
    let index = knn(cloud, k);
    let stats: Vec<f64> = index
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            nb.iter()
                .map(|&j| crate::geometry::dist2(cloud.points[i], cloud.points[j]).sqrt())
                .sum::<f64>()
                / nb.len() as f64
        })
        .collect();
    let n = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / n;
    let std = (stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    // Rounding slack so that equal statistics computed in different orders
    // never split.
    let threshold = mean + std_mult * std + 1e-12 * mean.abs();
    let keep: Vec<usize> = (0..stats.len()).filter(|&i| stats[i] <= threshold).collect();
    if keep.is_empty() {
        return Err(Error::InvalidState("statistical outlier removal discarded every point".into()));
    }
    Ok(cloud.select(&keep))
}

/// Shifts every point along its estimated normal by `g * r`, with
/// `g ~ N(0, sigma_frac^2)` and `r` the bounding-sphere radius.
pub fn noise_along_normal(cloud: &PointCloud, sigma_frac: f64, k: usize, seed_value: u64) -> Result<PointCloud> {
    if !(sigma_frac >= 0.0) {
        return Err(Error::invalid("sigma_frac must be nonnegative"));
    }
    if sigma_frac == 0.0 || cloud.len() < 2 {
        return Ok(cloud.clone());
    }
    let normals = estimate_normals(cloud, k)?.cloud.normals.unwrap();
    let r = cloud.bounding_radius();
    let dist = Normal::new(0.0, sigma_frac).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seed::rng(seed_value);
    let points = cloud
        .points
        .iter()
        .zip(&normals)
        .map(|(p, u)| {
            let s = dist.sample(&mut rng) * r;
            [p[0] + s * u[0], p[1] + s * u[1], p[2] + s * u[2]]
        })
        .collect();
    Ok(PointCloud {
        points,
        normals: None,
        label: cloud.label,
    })
}

/// Latent features of a set of clouds plus accumulated latent gradients.
struct FeatureGraph<'m> {
    model: &'m ClassifierModel,
    traces: Vec<ForwardTrace>,
    grads: Vec<Array1<f64>>,
    loss: f64,
}

impl<'m> FeatureGraph<'m> {
    fn new(model: &'m ClassifierModel) -> Self {
        FeatureGraph {
            model,
            traces: Vec::new(),
            grads: Vec::new(),
            loss: 0.0,
        }
    }

    fn add(&mut self, cloud: &PointCloud) -> usize {
        let t = self.model.forward_trace(&points_to_array(&cloud.points));
        self.grads.push(Array1::zeros(t.latent.len()));
        self.traces.push(t);
        self.traces.len() - 1
    }

    /// Adds `w * ||z_a - z_b||` with subgradient 0 at coincidence.
    fn distance(&mut self, a: usize, b: usize, w: f64) {
        let diff = &self.traces[a].latent - &self.traces[b].latent;
        let d = diff.dot(&diff).sqrt();
        self.loss += w * d;
        if d > 0.0 {
            let g = diff * (w / d);
            self.grads[a] += &g;
            self.grads[b] -= &g;
        }
    }

    fn finish(self) -> (f64, ModelGrads) {
        let mut total = ModelGrads::zeros_like(self.model);
        for (t, g) in self.traces.iter().zip(&self.grads) {
            let b = self.model.backward(t, None, Some(g.as_slice().unwrap()), true);
            total.add_assign(&b.param_grads.unwrap());
        }
        (self.loss, total)
    }
}

/// `w1 * ||e(P) - e(P')|| + (w2 / J) * sum_j ||e(P) - e(P_j)||` over the
/// pooled encoder features, with gradients for every parameter (only the
/// encoder receives nonzero values).
pub fn intra_class_loss(
    model: &ClassifierModel,
    clean: &PointCloud,
    adversarial: &PointCloud,
    same_class: &[PointCloud],
    w1: f64,
    w2: f64,
) -> Result<(f64, ModelGrads)> {
    if same_class.is_empty() {
        return Err(Error::invalid("intra-class loss needs J >= 1 same-class clouds"));
    }
    let mut g = FeatureGraph::new(model);
    let p = g.add(clean);
    let a = g.add(adversarial);
    g.distance(p, a, w1);
    let wj = w2 / same_class.len() as f64;
    for c in same_class {
        let j = g.add(c);
        g.distance(p, j, wj);
    }
    Ok(g.finish())
}

/// Clouds of one other class for the inter-class term, with the anchor's
/// adversarial example targeted at that class if one was generated.
#[derive(Clone, Debug)]
pub struct InterClassGroup {
    pub class: usize,
    pub targeted_adversarial: Option<PointCloud>,
    pub batch: Vec<PointCloud>,
}

/// Negated mean feature distance from the anchor, and from its targeted
/// adversarial examples, to clouds of other classes. Normalized by the number
/// of groups times J (C - 1 groups covers every other class).
pub fn inter_class_loss(
    model: &ClassifierModel,
    clean: &PointCloud,
    groups: &[InterClassGroup],
    w3: f64,
    w4: f64,
) -> Result<(f64, ModelGrads)> {
    let y = clean
        .label
        .ok_or_else(|| Error::invalid("inter-class anchor must be labelled"))?;
    if groups.is_empty() {
        return Err(Error::invalid("inter-class loss needs at least one other class"));
    }
    let j_count = groups[0].batch.len();
    if j_count == 0 || groups.iter().any(|g| g.batch.len() != j_count) {
        return Err(Error::invalid("every inter-class group needs the same J >= 1 clouds"));
    }
    for grp in groups {
        if grp.class == y || grp.batch.iter().any(|c| c.label == Some(y)) {
            return Err(Error::invalid(format!("inter-class batch contains the anchor class {y}")));
        }
    }
    let norm = (groups.len() * j_count) as f64;
    let mut g = FeatureGraph::new(model);
    let p = g.add(clean);
    for grp in groups {
        let adv = grp.targeted_adversarial.as_ref().map(|a| g.add(a));
        for c in &grp.batch {
            let j = g.add(c);
            g.distance(p, j, -w3 / norm);
            if let Some(a) = adv {
                g.distance(a, j, -w4 / norm);
            }
        }
    }
    Ok(g.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvTrainConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub omega4: f64,
    pub omega5: f64,
    pub omega6: f64,
    /// Same-class (and per other class) clouds drawn for each anchor.
    pub j: usize,
    /// `None` trains on clean clouds only.
    pub inner_attack: Option<AttackConfig>,
    /// Non-true classes attacked per anchor.
    pub targeted_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        AdvTrainConfig {
            omega1: 1.0,
            omega2: 1.0,
            omega3: 1.0,
            omega4: 1.0,
            omega5: 0.1,
            omega6: 0.1,
            j: 4,
            inner_attack: Some(AttackConfig {
                bound: 0.02,
                iterations: 50,
                ..AttackConfig::default()
            }),
            targeted_classes: 3,
            epochs: 10,
            batch_size: 64,
            lr: 0.001,
            seed: 0,
        }
    }
}

impl AdvTrainConfig {
    /// Plain adversarial training: same attack, no latent constraints.
    pub fn vanilla(&self) -> Self {
        AdvTrainConfig {
            omega5: 0.0,
            omega6: 0.0,
            ..self.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.j == 0 {
            return Err(Error::invalid("J must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("adversarial training needs batch_size >= 2"));
        }
        if self.targeted_classes == 0 {
            return Err(Error::invalid("targeted_classes must be at least 1"));
        }
        Ok(())
    }
}

struct AnchorPlan {
    index: usize,
    label: usize,
    targets: Vec<usize>,
    attack_seed: u64,
    same: Vec<usize>,
    others: Vec<(usize, Vec<usize>)>,
}

fn pick(pool: &[usize], j: usize, rng: &mut seed::Rng) -> Vec<usize> {
    let mut idx = sample(rng, pool.len(), j).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i]).collect()
}

/// Adversarial training with intra- and inter-class latent constraints.
///
/// Each minibatch attacks every anchor with the inner attack against the
/// current model (toward up to `targeted_classes` random wrong classes),
/// trains on clean and adversarial clouds together, and adds the weighted
/// latent constraints averaged over anchors.
pub fn adversarial_train(
    model: &ClassifierModel,
    train: &[PointCloud],
    test: &[PointCloud],
    cfg: &AdvTrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    cfg.validate()?;
    let c = model.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, cl) in train.iter().enumerate() {
        by_class[label_of(cl, c)?].push(i);
    }
    let present = by_class.iter().filter(|v| !v.is_empty()).count();
    if present < 2 {
        return Err(Error::invalid("adversarial training needs at least two classes"));
    }
    let constrained = cfg.omega5 != 0.0 || cfg.omega6 != 0.0;
    if constrained {
        if let Some(y) = by_class.iter().position(|v| !v.is_empty() && v.len() < cfg.j + 1) {
            return Err(Error::invalid(format!("class {y} has fewer than J + 1 = {} instances", cfg.j + 1)));
        }
    }
    if let Some(a) = &cfg.inner_attack {
        a.validate(c)?;
    }
    let exec = Exec::default();
    train_loop(model, train, test, &cfg.train_config(), |m, batch, batch_no| {
        let mut rng = seed::rng(seed::derive_indexed(cfg.seed, "adv-train-batch", batch_no));
        let plans: Vec<AnchorPlan> = batch
            .iter()
            .map(|&i| {
                let y = train[i].label.unwrap();
                let wrong: Vec<usize> = (0..c).filter(|&k| k != y && !by_class[k].is_empty()).collect();
                let t = cfg.targeted_classes.min(wrong.len());
                let targets = if cfg.inner_attack.is_some() { pick(&wrong, t, &mut rng) } else { Vec::new() };
                let targets = if targets.is_empty() {
                    targets
                } else {
                    // Shuffle which target feeds the classification term.
                    let first = rng.random_range(0..targets.len());
                    let mut t = targets;
                    t.rotate_left(first);
                    t
                };
                let attack_seed = rng.random();
                let (same, others) = if constrained {
                    let pool: Vec<usize> = by_class[y].iter().copied().filter(|&k| k != i).collect();
                    let same = pick(&pool, cfg.j, &mut rng);
                    let groups: Vec<usize> = if targets.is_empty() {
                        pick(&wrong, t, &mut rng)
                    } else {
                        targets.clone()
                    };
                    let others = groups
                        .into_iter()
                        .map(|k| {
                            let j = cfg.j.min(by_class[k].len());
                            (k, pick(&by_class[k], j, &mut rng))
                        })
                        .collect();
                    (same, others)
                } else {
                    (Vec::new(), Vec::new())
                };
                AnchorPlan {
                    index: i,
                    label: y,
                    targets,
                    attack_seed,
                    same,
                    others,
                }
            })
            .collect();

        let adversarial: Vec<Vec<PointCloud>> = match &cfg.inner_attack {
            None => plans.iter().map(|_| Vec::new()).collect(),
            Some(acfg) => exec
                .map_slice(&plans, |p| {
                    p.targets
                        .iter()
                        .enumerate()
                        .map(|(k, &t)| {
                            let s = seed::derive_indexed(p.attack_seed, "target", k as u64);
                            run_ita(m, &train[p.index], &acfg.for_target(t), None, s).map(|r| {
                                let mut adv = r.adversarial;
                                adv.label = Some(p.label);
                                adv
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .into_iter()
                .collect::<Result<_>>()?,
        };

        let mut items: Vec<(&PointCloud, usize)> = plans.iter().map(|p| (&train[p.index], p.label)).collect();
        for (p, advs) in plans.iter().zip(&adversarial) {
            if let Some(a) = advs.first() {
                items.push((a, p.label));
            }
        }
        let (mut loss, mut grads) = batch_ce_grads(m, &items);
        if !constrained {
            return Ok((loss, grads));
        }

        let per: Vec<Result<(f64, ModelGrads)>> = exec.map_range(plans.len(), |k| {
            let p = &plans[k];
            let anchor = &train[p.index];
            let adv = adversarial[k].first().unwrap_or(anchor);
            let same: Vec<PointCloud> = p.same.iter().map(|&i| train[i].clone()).collect();
            let (li, mut gi) = intra_class_loss(m, anchor, adv, &same, cfg.omega1, cfg.omega2)?;
            gi.scale(cfg.omega5);
            let groups: Vec<InterClassGroup> = p
                .others
                .iter()
                .enumerate()
                .map(|(g, (class, idx))| InterClassGroup {
                    class: *class,
                    targeted_adversarial: adversarial[k].get(g).cloned(),
                    batch: idx.iter().map(|&i| train[i].clone()).collect(),
                })
                .collect();
            let (le, mut ge) = inter_class_loss(m, anchor, &groups, cfg.omega3, cfg.omega4)?;
            ge.scale(cfg.omega6);
            gi.add_assign(&ge);
            Ok((cfg.omega5 * li + cfg.omega6 * le, gi))
        });
        let inv = 1.0 / plans.len() as f64;
        for r in per {
            let (l, mut g) = r?;
            g.scale(inv);
            grads.add_assign(&g);
            loss += l * inv;
        }
        Ok((loss, grads))
    })
}

/// Mean pairwise latent distance within classes and across classes.
pub fn feature_statistics(model: &ClassifierModel, data: &[PointCloud]) -> (f64, f64) {
    let feats: Vec<Array1<f64>> = Exec::default().map_slice(data, |c| model.encode(&points_to_array(&c.points)));
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..data.len() {
        for j in i + 1..data.len() {
            let d = &feats[i] - &feats[j];
            let d = d.dot(&d).sqrt();
            if data[i].label == data[j].label {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra.max(1) as f64, inter / n_inter.max(1) as f64)
}
