//! Objective assembly, Adam with cosine decay, and the training loop.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamVector, Tape, Tensor, Var};
use crate::curvature::{self, CurvatureError, CurvatureSample};
use crate::data::{self, DataError, EncodedDataset};
use crate::fairness::{FairnessError, SetMetrics};
use crate::mmd::{self, KernelSpec, MmdError};
use crate::nn::{Activation, FairModel, MlpSpec, Mode, NnError};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {losses:?}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        losses: LossBreakdown,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Curvature(#[from] CurvatureError),
    #[error(transparent)]
    Mmd(#[from] MmdError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "advdebias")]
    AdvDebias,
    #[serde(rename = "laftr-gnl1")]
    LaftrGnl1,
    #[serde(rename = "cuma")]
    Cuma,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Normal, Method::AdvDebias, Method::LaftrGnl1, Method::Cuma];

    pub fn name(self) -> &'static str {
        match self {
            Method::Normal => "normal",
            Method::AdvDebias => "advdebias",
            Method::LaftrGnl1 => "laftr-gnl1",
            Method::Cuma => "cuma",
        }
    }

    fn adversary(self) -> Option<AdvLoss> {
        match self {
            Method::Normal => None,
            Method::AdvDebias | Method::Cuma => Some(AdvLoss::CrossEntropy),
            Method::LaftrGnl1 => Some(AdvLoss::GroupL1),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}; expected one of normal, advdebias, laftr-gnl1, cuma"))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvLoss {
    CrossEntropy,
    GroupL1,
}

/// Layer widths and regularization of the two-head network; the input width
/// comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone_hidden: usize,
    pub representation: usize,
    pub head_hidden: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = MlpSpec::new(1, 0);
        Self {
            backbone_hidden: spec.backbone_hidden,
            representation: spec.representation,
            head_hidden: spec.head_hidden,
            activation: spec.activation,
            dropout: spec.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub alpha: f64,
    pub gamma: f64,
    pub h: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub bandwidths: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Cuma,
            alpha: 1.0,
            gamma: 1.0,
            h: 1.0,
            lr: 1e-3,
            weight_decay: 1e-5,
            epochs: 50,
            batch_size: 128,
            seed: 0,
            model: ModelConfig::default(),
            bandwidths: KernelSpec::default().bandwidths().to_vec(),
            finetune_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!(
                "alpha and gamma must be finite and non-negative, got {} and {}",
                self.alpha, self.gamma
            ));
        }
        if self.h == 0.0 || !self.h.is_finite() {
            return bad(format!("curvature step h must be finite and nonzero, got {}", self.h));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay non-negative".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 4 {
            return bad(format!("batch size must be at least 4, got {}", self.batch_size));
        }
        self.kernel()?;
        Ok(())
    }

    pub fn kernel(&self) -> Result<KernelSpec, TrainError> {
        Ok(KernelSpec::new(self.bandwidths.clone())?)
    }

    pub fn mlp_spec(&self, input_dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            backbone_hidden: self.model.backbone_hidden,
            representation: self.model.representation,
            head_hidden: self.model.head_hidden,
            classes: 2,
            activation: self.model.activation,
            dropout: self.model.dropout,
            seed: self.seed,
        }
    }

    fn uses_adversary(&self) -> Option<AdvLoss> {
        self.method.adversary().filter(|_| self.alpha > 0.0)
    }

    fn uses_cm(&self) -> bool {
        self.method == Method::Cuma && self.gamma > 0.0
    }
}

/// Per-batch objective components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_clf")]
    pub clf: f64,
    #[serde(rename = "L_adv")]
    pub adv: f64,
    #[serde(rename = "L_cm")]
    pub cm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(clf: f64, adv: f64, cm: f64, alpha: f64, gamma: f64) -> Self {
        Self {
            clf,
            adv,
            cm,
            total: clf - alpha * adv + gamma * cm,
        }
    }

    fn is_finite(&self) -> bool {
        self.clf.is_finite() && self.adv.is_finite() && self.cm.is_finite() && self.total.is_finite()
    }
}

/// Mean cross-entropy of the utility logits against `y`.
pub fn loss_clf(tape: &mut Tape, logits: Var, y: &[u8]) -> Result<Var, AutodiffError> {
    let labels: Vec<usize> = y.iter().map(|&v| v as usize).collect();
    tape.softmax_cross_entropy(logits, &labels)
}

/// Adversary loss for predicting `a` from its logits.
pub fn loss_adv(tape: &mut Tape, logits: Var, a: &[u8], variant: AdvLoss) -> Result<Var, TrainError> {
    match variant {
        AdvLoss::CrossEntropy => Ok(loss_clf(tape, logits, a)?),
        AdvLoss::GroupL1 => {
            let counts = [
                a.iter().filter(|&&g| g == 0).count(),
                a.iter().filter(|&&g| g == 1).count(),
            ];
            if counts.contains(&0) {
                return Err(TrainError::Config(
                    "group-normalized l1 loss needs both groups in every batch".into(),
                ));
            }
            let probs = tape.softmax(logits)?;
            let pick = tape.constant(Tensor::matrix(2, 1, vec![0.0, 1.0])?);
            let p1 = tape.matmul(probs, pick)?;
            let target = tape.constant(Tensor::matrix(a.len(), 1, a.iter().map(|&g| g as f64).collect())?);
            let diff = tape.sub(p1, target)?;
            let dev = tape.abs(diff);
            let weights = a.iter().map(|&g| 0.5 / counts[g as usize] as f64).collect();
            let w = tape.constant(Tensor::matrix(a.len(), 1, weights)?);
            let weighted = tape.mul(dev, w)?;
            Ok(tape.sum(weighted))
        }
    }
}

/// `lr0 · (1 + cos(π t / T)) / 2`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "adam state length");
        assert_eq!(grads.len(), self.m.len(), "gradient length");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Curvature-matching term over one batch and its gradient over θ_s ∪ θ_t.
#[derive(Clone, Debug)]
pub struct CmOutcome {
    pub value: f64,
    pub grad: ParamVector,
    pub samples: Vec<CurvatureSample>,
}

/// `mmd²` between the per-sample curvatures of the two groups in `rows`.
///
/// The gradient is assembled from the analytic derivative of the statistic
/// with respect to each curvature, times that curvature's parameter
/// gradient, one sample at a time.
pub fn curvature_matching(
    model: &FairModel,
    data: &EncodedDataset,
    rows: &[usize],
    h: f64,
    kernel: &KernelSpec,
) -> Result<CmOutcome, TrainError> {
    let per_sample = rows
        .par_iter()
        .map(|&i| curvature::curvature_fd_with_grad(model, data.x.row(i), data.y[i], h, i))
        .collect::<Result<Vec<_>, _>>()?;
    let (mut p, mut q) = (Vec::new(), Vec::new());
    for (&i, (c, _)) in rows.iter().zip(&per_sample) {
        if data.a[i] == 0 {
            p.push(*c)
        } else {
            q.push(*c)
        }
    }
    let (value, gp, gq) = mmd::mmd2_with_grad(&p, &q, kernel)?;
    let mut grad = vec![0.0; per_sample[0].1.len()];
    let (mut ip, mut iq) = (gp.iter(), gq.iter());
    let mut samples = Vec::with_capacity(rows.len());
    for (&i, (c, g)) in rows.iter().zip(&per_sample) {
        let w = if data.a[i] == 0 { ip.next() } else { iq.next() }.expect("partition sizes");
        for (acc, gi) in grad.iter_mut().zip(g.as_slice()) {
            *acc += w * gi;
        }
        samples.push(CurvatureSample {
            id: i,
            group: data.a[i],
            value: *c,
        });
    }
    Ok(CmOutcome {
        value,
        grad: ParamVector::from_flat(&per_sample[0].1, grad)?,
        samples,
    })
}

/// Value of [`curvature_matching`] without the gradient.
pub fn curvature_matching_value(
    model: &FairModel,
    data: &EncodedDataset,
    rows: &[usize],
    h: f64,
    kernel: &KernelSpec,
) -> Result<f64, TrainError> {
    let (p, q) = curvature::group_curvatures(model, data, rows, h)?;
    let values = |s: Vec<CurvatureSample>| s.into_iter().map(|c| c.value).collect::<Vec<_>>();
    Ok(mmd::mmd2(&values(p), &values(q), kernel)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub delta_eo: f64,
    pub delta_dp: f64,
}

impl From<SetMetrics> for EvalMetrics {
    fn from(m: SetMetrics) -> Self {
        let p = m.as_percent();
        Self {
            accuracy: p.accuracy,
            delta_eo: p.delta_eo,
            delta_dp: p.delta_dp,
        }
    }
}

/// Percent-valued metrics of the eval-mode model on one dataset.
pub fn evaluate(model: &FairModel, data: &EncodedDataset) -> Result<EvalMetrics, TrainError> {
    let pred = model.predict(&data.x)?;
    Ok(SetMetrics::compute(&pred, &data.y, &data.a)?.into())
}

/// One line of the per-epoch log. Batch losses are averaged over the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub eval: BTreeMap<String, Option<EvalMetrics>>,
}

/// Emitted after every optimizer step.
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub step: usize,
    pub losses: &'a LossBreakdown,
    pub model: &'a FairModel,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FairModel,
    pub epochs: Vec<EpochLog>,
}

/// Trains from a fresh initialization, or from `config.finetune_from`.
pub fn train(
    config: &TrainConfig,
    train_set: &EncodedDataset,
    eval_sets: &[(String, &EncodedDataset)],
) -> Result<TrainOutcome, TrainError> {
    train_observed(config, train_set, eval_sets, &mut |_| {})
}

pub fn train_observed(
    config: &TrainConfig,
    train_set: &EncodedDataset,
    eval_sets: &[(String, &EncodedDataset)],
    observer: &mut dyn FnMut(StepEvent<'_>),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let spec = config.mlp_spec(train_set.dim());
    let model = match &config.finetune_from {
        Some(path) => {
            let model = FairModel::load(path)?;
            check_finetune_spec(&model.spec, &spec)?;
            model
        }
        None => FairModel::init(spec)?,
    };
    fit(model, config, train_set, eval_sets, observer)
}

/// Continues training `model` with fresh optimizer state and schedule.
/// Zero epochs return the model untouched.
pub fn finetune(
    model: FairModel,
    config: &TrainConfig,
    train_set: &EncodedDataset,
    eval_sets: &[(String, &EncodedDataset)],
) -> Result<TrainOutcome, TrainError> {
    check_finetune_spec(&model.spec, &config.mlp_spec(train_set.dim()))?;
    if config.epochs == 0 {
        TrainConfig {
            epochs: 1,
            ..config.clone()
        }
        .validate()?;
        return Ok(TrainOutcome {
            model,
            epochs: Vec::new(),
        });
    }
    config.validate()?;
    fit(model, config, train_set, eval_sets, &mut |_| {})
}

fn check_finetune_spec(found: &MlpSpec, wanted: &MlpSpec) -> Result<(), TrainError> {
    let arch = |s: &MlpSpec| MlpSpec { seed: 0, ..s.clone() };
    if arch(found) != arch(wanted) {
        return Err(TrainError::Config(format!(
            "checkpoint architecture {found:?} does not match configured {wanted:?}"
        )));
    }
    Ok(())
}

fn fit(
    mut model: FairModel,
    config: &TrainConfig,
    train_set: &EncodedDataset,
    eval_sets: &[(String, &EncodedDataset)],
    observer: &mut dyn FnMut(StepEvent<'_>),
) -> Result<TrainOutcome, TrainError> {
    let kernel = config.kernel()?;
    let adversary = config.uses_adversary();
    let counts = train_set.group_counts();
    if config.method == Method::Cuma && counts.contains(&0) {
        return Err(TrainError::Config(
            "curvature matching needs samples from both groups".into(),
        ));
    }
    let mut cm = config.uses_cm();
    let plan_for = |epoch: usize| data::stratified_batches(&train_set.a, config.batch_size, config.seed, epoch);
    let first_plan = plan_for(0)?;
    if cm && !first_plan.cm_enabled {
        log::warn!("a group has fewer than two training samples; curvature matching disabled");
        cm = false;
    }
    let total_steps = config.epochs * first_plan.batches.len();
    let mut adam = AdamState::new(model.param_count());
    let mut dropout_rng = seed::rng(config.seed, "dropout");
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let mut first_plan = Some(first_plan);
    for epoch in 0..config.epochs {
        let plan = match first_plan.take() {
            Some(p) => p,
            None => plan_for(epoch)?,
        };
        let mut sums = LossBreakdown::default();
        let mut lr = config.lr;
        for (b, rows) in plan.batches.iter().enumerate() {
            lr = cosine_lr(config.lr, step, total_steps);
            let y: Vec<u8> = rows.iter().map(|&i| train_set.y[i]).collect();
            let a: Vec<u8> = rows.iter().map(|&i| train_set.a[i]).collect();
            let mut tape = Tape::new();
            let vars = model.leaves(&mut tape);
            let x = tape.constant(train_set.rows(rows));
            let rep = model.backbone_on_tape(&mut tape, &vars.backbone, x, Mode::Train(&mut dropout_rng))?;
            let logits = model.head_on_tape(&mut tape, &vars.utility, rep, Mode::Train(&mut dropout_rng))?;
            let l_clf = loss_clf(&mut tape, logits, &y)?;
            let (objective, l_adv) = match adversary {
                Some(variant) => {
                    let reversed = crate::nn::reverse_gradient(&mut tape, rep, config.alpha);
                    let adv_logits =
                        model.head_on_tape(&mut tape, &vars.adversary, reversed, Mode::Train(&mut dropout_rng))?;
                    let l_adv = loss_adv(&mut tape, adv_logits, &a, variant)?;
                    (tape.add(l_clf, l_adv)?, Some(l_adv))
                }
                None => (l_clf, None),
            };
            let mut grad: Vec<f64> = tape
                .grad(objective, &vars.all())?
                .into_iter()
                .flat_map(Tensor::into_data)
                .collect();
            let cm_value = if cm {
                let out = curvature_matching(&model, train_set, rows, config.h, &kernel)?;
                for (g, c) in grad.iter_mut().zip(out.grad.as_slice()) {
                    *g += config.gamma * c;
                }
                out.value
            } else {
                0.0
            };
            let losses = LossBreakdown::assemble(
                tape.item(l_clf),
                l_adv.map_or(0.0, |v| tape.item(v)),
                cm_value,
                config.alpha,
                config.gamma,
            );
            if !losses.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    losses,
                });
            }
            let mut params = model.flat_params();
            if config.weight_decay > 0.0 {
                for (g, p) in grad.iter_mut().zip(&params) {
                    *g += config.weight_decay * p;
                }
            }
            adam.update(&mut params, &grad, lr);
            model.set_flat_params(&params);
            sums.clf += losses.clf;
            sums.adv += losses.adv;
            sums.cm += losses.cm;
            sums.total += losses.total;
            observer(StepEvent {
                epoch,
                batch: b,
                step,
                losses: &losses,
                model: &model,
            });
            step += 1;
        }
        let k = plan.batches.len() as f64;
        let mut eval = BTreeMap::new();
        for (name, set) in eval_sets {
            let metrics = match evaluate(&model, set) {
                Ok(m) => Some(m),
                Err(e) => {
                    log::warn!("epoch {epoch}: metrics on {name} unavailable: {e}");
                    None
                }
            };
            eval.insert(name.clone(), metrics);
        }
        let entry = EpochLog {
            epoch,
            lr,
            losses: LossBreakdown {
                clf: sums.clf / k,
                adv: sums.adv / k,
                cm: sums.cm / k,
                total: sums.total / k,
            },
            eval,
        };
        log::info!(
            "epoch {epoch}: total {:.5} clf {:.5} adv {:.5} cm {:.5}",
            entry.losses.total,
            entry.losses.clf,
            entry.losses.adv,
            entry.losses.cm
        );
        epochs.push(entry);
    }
    Ok(TrainOutcome { model, epochs })
}

/// Eval-mode objective over a whole dataset (no dropout). The curvature
/// term uses every row of the set.
pub fn full_objective(
    model: &FairModel,
    config: &TrainConfig,
    set: &EncodedDataset,
) -> Result<LossBreakdown, TrainError> {
    let rows: Vec<usize> = (0..set.len()).collect();
    let mut tape = Tape::new();
    let vars = model.leaves(&mut tape);
    let x = tape.constant(set.x.clone());
    let out = model.forward_on_tape(&mut tape, &vars, x, Mode::Eval, None)?;
    let clf = loss_clf(&mut tape, out.utility, &set.y)?;
    let adv = match config.uses_adversary() {
        Some(variant) => {
            let l = loss_adv(&mut tape, out.adversary, &set.a, variant)?;
            tape.item(l)
        }
        None => 0.0,
    };
    let cm = if config.uses_cm() && !set.group_counts().contains(&0) {
        curvature_matching_value(model, set, &rows, config.h, &config.kernel()?)?
    } else {
        0.0
    };
    Ok(LossBreakdown::assemble(
        tape.item(clf),
        adv,
        cm,
        config.alpha,
        config.gamma,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_biased, SynthSpec};

    #[test]
    fn clf_loss_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap());
        let l = loss_clf(&mut tape, z, &[0, 1]).unwrap();
        assert!((tape.item(l) - 2f64.ln()).abs() < 1e-15);
        let sure = tape.constant(Tensor::matrix(2, 2, vec![800.0, 0.0, 0.0, 800.0]).unwrap());
        let l = loss_clf(&mut tape, sure, &[0, 1]).unwrap();
        assert_eq!(tape.item(l), 0.0);
    }

    #[test]
    fn clf_loss_is_mean_of_per_sample() {
        let logits = [0.3, -1.2, 2.0, 0.5, -0.7, 0.1];
        let y = [1u8, 0, 1];
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(3, 2, logits.to_vec()).unwrap());
        let l = loss_clf(&mut tape, z, &y).unwrap();
        let per: f64 = (0..3)
            .map(|i| {
                let mut t = Tape::new();
                let z = t.constant(Tensor::matrix(1, 2, logits[2 * i..2 * i + 2].to_vec()).unwrap());
                let l = loss_clf(&mut t, z, &y[i..i + 1]).unwrap();
                t.item(l)
            })
            .sum();
        assert!((tape.item(l) - per / 3.0).abs() < 1e-15);
    }

    #[test]
    fn adv_loss_examples() {
        let a = [0u8, 1, 1, 0, 1];
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[5, 2]));
        let ce = loss_adv(&mut tape, z, &a, AdvLoss::CrossEntropy).unwrap();
        assert!((tape.item(ce) - 2f64.ln()).abs() < 1e-15);
        let l1 = loss_adv(&mut tape, z, &a, AdvLoss::GroupL1).unwrap();
        assert!((tape.item(l1) - 0.5).abs() < 1e-15);
        let perfect: Vec<f64> = a
            .iter()
            .flat_map(|&g| if g == 1 { [0.0, 800.0] } else { [800.0, 0.0] })
            .collect();
        let p = tape.constant(Tensor::matrix(5, 2, perfect).unwrap());
        let ce = loss_adv(&mut tape, p, &a, AdvLoss::CrossEntropy).unwrap();
        let l1 = loss_adv(&mut tape, p, &a, AdvLoss::GroupL1).unwrap();
        assert_eq!(tape.item(ce), 0.0);
        assert_eq!(tape.item(l1), 0.0);
        assert!(loss_adv(&mut tape, z, &[1, 1, 1, 1, 1], AdvLoss::GroupL1).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step() {
        let mut adam = AdamState::new(1);
        let mut p = [0.0];
        adam.update(&mut p, &[0.5], 1e-3);
        // m̂ = 0.5, v̂ = 0.25, so the step is lr · 0.5 / (0.5 + 1e-8)
        let expected = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-18);
        assert!((p[0] + 9.99998e-4).abs() < 2e-9);
    }

    #[test]
    fn assembled_total_identity() {
        let l = LossBreakdown::assemble(0.7, 0.4, 0.2, 1.5, 2.0);
        assert_eq!(l.total, 0.7 - 1.5 * 0.4 + 2.0 * 0.2);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("adv".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                alpha: -1.0,
                ..ok.clone()
            },
            TrainConfig {
                epochs: 0,
                ..ok.clone()
            },
            TrainConfig { h: 0.0, ..ok.clone() },
            TrainConfig {
                batch_size: 2,
                ..ok.clone()
            },
            TrainConfig {
                bandwidths: vec![],
                ..ok.clone()
            },
        ] {
            assert!(matches!(
                bad.validate(),
                Err(TrainError::Config(_)) | Err(TrainError::Mmd(_))
            ));
        }
    }

    fn small_config(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            epochs: 2,
            batch_size: 32,
            seed: 5,
            model: ModelConfig {
                backbone_hidden: 16,
                representation: 8,
                head_hidden: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cm_gradient_leaves_adversary_alone() {
        let data = synth_biased(&SynthSpec::new(80, 6, 0.6, 1.0, 3)).unwrap();
        let cfg = small_config(Method::Cuma);
        let model = FairModel::init(cfg.mlp_spec(6)).unwrap();
        let rows: Vec<usize> = (0..12).collect();
        let out = curvature_matching(&model, &data.train, &rows, 1.0, &cfg.kernel().unwrap()).unwrap();
        assert_eq!(out.grad.len(), model.classifier_params().len());
        assert!(out.value >= 0.0);
        let value = curvature_matching_value(&model, &data.train, &rows, 1.0, &cfg.kernel().unwrap()).unwrap();
        assert!((value - out.value).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth_biased(&SynthSpec::new(120, 6, 0.6, 1.0, 3)).unwrap();
        let cfg = small_config(Method::Cuma);
        let a = train(&cfg, &data.train, &[]).unwrap();
        let b = train(&cfg, &data.train, &[]).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epochs, b.epochs);
    }

    #[test]
    fn cuma_without_gamma_tracks_advdebias() {
        let data = synth_biased(&SynthSpec::new(120, 6, 0.6, 1.0, 3)).unwrap();
        let trace = |cfg: &TrainConfig| {
            let mut params = Vec::new();
            train_observed(cfg, &data.train, &[], &mut |e| params.push(e.model.flat_params())).unwrap();
            params
        };
        let cuma = TrainConfig {
            gamma: 0.0,
            ..small_config(Method::Cuma)
        };
        let adv = small_config(Method::AdvDebias);
        assert_eq!(trace(&cuma), trace(&adv));
    }

    #[test]
    fn normal_total_is_clf() {
        let data = synth_biased(&SynthSpec::new(120, 6, 0.6, 1.0, 3)).unwrap();
        let mut seen = 0;
        train_observed(&small_config(Method::Normal), &data.train, &[], &mut |e| {
            assert_eq!(e.losses.total, e.losses.clf);
            assert_eq!((e.losses.adv, e.losses.cm), (0.0, 0.0));
            seen += 1;
        })
        .unwrap();
        assert!(seen > 0);
    }

    #[test]
    fn recorded_totals_satisfy_identity() {
        let data = synth_biased(&SynthSpec::new(120, 6, 0.6, 1.0, 3)).unwrap();
        let cfg = TrainConfig {
            alpha: 0.7,
            gamma: 1.3,
            ..small_config(Method::Cuma)
        };
        train_observed(&cfg, &data.train, &[], &mut |e| {
            let l = e.losses;
            assert_eq!(l.total, l.clf - 0.7 * l.adv + 1.3 * l.cm);
            assert!(l.cm > 0.0 && l.adv > 0.0);
        })
        .unwrap();
    }

    #[test]
    fn finetune_uses_fresh_state() {
        let data = synth_biased(&SynthSpec::new(120, 6, 0.6, 1.0, 3)).unwrap();
        let cfg = small_config(Method::Normal);
        let base = train(&cfg, &data.train, &[]).unwrap().model;
        let cont = finetune(base.clone(), &cfg, &data.train, &[]).unwrap().model;
        let fresh = fit(base.clone(), &cfg, &data.train, &[], &mut |_| {}).unwrap().model;
        assert_eq!(cont, fresh);
        assert_ne!(cont, base);
        let zero = TrainConfig {
            epochs: 0,
            ..cfg.clone()
        };
        assert_eq!(finetune(base.clone(), &zero, &data.train, &[]).unwrap().model, base);
    }

    #[test]
    fn finetune_from_checkpoint_checks_architecture() {
        let data = synth_biased(&SynthSpec::new(120, 6, 0.6, 1.0, 3)).unwrap();
        let cfg = small_config(Method::Normal);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        FairModel::init(cfg.mlp_spec(7)).unwrap().save(&path).unwrap();
        let ft = TrainConfig {
            finetune_from: Some(path),
            ..cfg
        };
        assert!(matches!(train(&ft, &data.train, &[]), Err(TrainError::Config(_))));
    }

    #[test]
    fn cuma_needs_both_groups() {
        let mut data = synth_biased(&SynthSpec::new(120, 6, 0.6, 1.0, 3)).unwrap().train;
        data.a.iter_mut().for_each(|g| *g = 0);
        assert!(matches!(
            train(&small_config(Method::Cuma), &data, &[]),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn epoch_log_shape() {
        let data = synth_biased(&SynthSpec::new(120, 6, 0.6, 1.0, 3)).unwrap();
        let out = train(
            &small_config(Method::LaftrGnl1),
            &data.train,
            &[("test".into(), &data.test)],
        )
        .unwrap();
        assert_eq!(out.epochs.len(), 2);
        let line = serde_json::to_value(&out.epochs[0]).unwrap();
        for key in ["epoch", "lr", "L_clf", "L_adv", "L_cm", "total", "eval"] {
            assert!(line.get(key).is_some(), "{key}");
        }
        assert!(line["eval"]["test"]["delta_eo"].is_number());
    }
}
