//! Reference implementations used to check the engine: finite differences,
//! dense Hessians, naive statistics, and the gradcheck suites.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autodiff::{value_and_grad, AutodiffError, ParamVector, Tape, Tensor, Var};
use crate::curvature::{self, curvature_of, estimate_direction};
use crate::data::{EncodedDataset, WhiteningStats};
use crate::mmd::{self, KernelSpec};
use crate::nn::{Activation, FairModel, MlpSpec, Mode, ModelVars};
use crate::seed::Rng;
use crate::train;

pub type LossFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + 'a;

/// Computes a parameter gradient of a loss; the engine is the default.
pub type GradientProvider<'a> = dyn Fn(&LossFn<'_>, &ParamVector) -> Result<ParamVector, AutodiffError> + 'a;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("power iteration did not converge within {0} steps")]
    NotConverged(usize),
    #[error("dense Hessian limited to 200 parameters, got {0}")]
    TooLarge(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub fn engine_gradient(loss: &LossFn<'_>, params: &ParamVector) -> Result<ParamVector, AutodiffError> {
    value_and_grad(loss, params).map(|(_, g)| g)
}

pub fn loss_value(loss: &LossFn<'_>, params: &ParamVector) -> Result<f64, AutodiffError> {
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let out = loss(&mut tape, &vars)?;
    Ok(tape.item(out))
}

/// Central differences of a scalar function of a flat vector.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let plus = f(&probe);
            probe[i] = x[i] - step;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`, or `‖a − b‖` when `b` vanishes.
pub fn normwise_relative(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Symmetrized Hessian from central differences of exact gradients.
pub fn fd_hessian(loss: &LossFn<'_>, params: &ParamVector, step: f64) -> Result<Vec<Vec<f64>>, AutodiffError> {
    let n = params.len();
    let mut h = vec![vec![0.0; n]; n];
    let mut probe = params.clone();
    for j in 0..n {
        let base = params.as_slice()[j];
        probe.as_mut_slice()[j] = base + step;
        let plus = engine_gradient(loss, &probe)?;
        probe.as_mut_slice()[j] = base - step;
        let minus = engine_gradient(loss, &probe)?;
        probe.as_mut_slice()[j] = base;
        for i in 0..n {
            h[i][j] = (plus.as_slice()[i] - minus.as_slice()[i]) / (2.0 * step);
        }
    }
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (h[i][j] + h[j][i]);
            h[i][j] = s;
            h[j][i] = s;
        }
    }
    Ok(h)
}

pub fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value of a symmetric matrix by power iteration, stopped
/// when the estimate changes by less than `tolerance` relative.
pub fn spectral_norm(m: &[Vec<f64>], tolerance: f64) -> Result<f64, VerifyError> {
    const MAX_STEPS: usize = 10_000;
    let n = m.len();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
    let s = norm(&v);
    v.iter_mut().for_each(|x| *x /= s);
    let mut estimate = 0.0;
    for _ in 0..MAX_STEPS {
        let w = mat_vec(m, &v);
        let next = norm(&w);
        if next == 0.0 {
            return Ok(0.0);
        }
        let converged = (next - estimate).abs() <= tolerance * next;
        estimate = next;
        if converged {
            return Ok(estimate);
        }
        v = w.into_iter().map(|x| x / next).collect();
    }
    Err(VerifyError::NotConverged(MAX_STEPS))
}

/// σ(∇²L) at `params` from a dense finite-difference Hessian.
pub fn hessian_spectral_norm(loss: &LossFn<'_>, params: &ParamVector, tolerance: f64) -> Result<f64, VerifyError> {
    if params.len() > 200 {
        return Err(VerifyError::TooLarge(params.len()));
    }
    spectral_norm(&fd_hessian(loss, params, 1e-4)?, tolerance)
}

/// `‖H ṽ‖` with ṽ the normalized gradient sign, from the dense Hessian.
pub fn hv_norm_along_sign(loss: &LossFn<'_>, params: &ParamVector) -> Result<f64, VerifyError> {
    if params.len() > 200 {
        return Err(VerifyError::TooLarge(params.len()));
    }
    let g = engine_gradient(loss, params)?;
    let Some(v) = estimate_direction(g.as_slice()) else {
        return Ok(0.0);
    };
    Ok(norm(&mat_vec(&fd_hessian(loss, params, 1e-4)?, &v)))
}

/// The squared-discrepancy statistic written out as explicit sums.
pub fn naive_mmd2(p: &[f64], q: &[f64], spec: &KernelSpec) -> f64 {
    let k = |x: f64, y: f64| {
        let mut s = 0.0;
        for &sigma in spec.bandwidths() {
            s += (-(x - y) * (x - y) / (2.0 * sigma * sigma)).exp();
        }
        s
    };
    let (m, n) = (p.len() as f64, q.len() as f64);
    let mut pp = 0.0;
    for &a in p {
        for &b in p {
            pp += k(a, b);
        }
    }
    let mut pq = 0.0;
    for &a in p {
        for &b in q {
            pq += k(a, b);
        }
    }
    let mut qq = 0.0;
    for &a in q {
        for &b in q {
            qq += k(a, b);
        }
    }
    pp / (m * m) - 2.0 * pq / (m * n) + qq / (n * n)
}

/// Equalized-odds gap from a directly tallied table; `None` when a cell is
/// empty.
pub fn brute_force_delta_eo(pred: &[u8], y: &[u8], a: &[u8]) -> Option<f64> {
    let mut total = [[0u64; 2]; 2];
    let mut wrong = [[0u64; 2]; 2];
    for i in 0..pred.len() {
        total[a[i] as usize][y[i] as usize] += 1;
        if pred[i] != y[i] {
            wrong[a[i] as usize][y[i] as usize] += 1;
        }
    }
    let mut gap = 0.0;
    for label in 0..2 {
        if total[0][label] == 0 || total[1][label] == 0 {
            return None;
        }
        let r0 = wrong[0][label] as f64 / total[0][label] as f64;
        let r1 = wrong[1][label] as f64 / total[1][label] as f64;
        gap += (r0 - r1).abs();
    }
    Some(gap)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl SuiteReport {
    fn new(name: &str, cases: usize, max_error: f64, tolerance: f64, failure: Option<String>) -> Self {
        Self {
            name: name.to_string(),
            cases,
            max_error,
            tolerance,
            passed: failure.is_none() && max_error < tolerance,
            failure,
        }
    }

    fn errored(name: &str, tolerance: f64, e: impl std::fmt::Display) -> Self {
        Self::new(name, 0, f64::INFINITY, tolerance, Some(e.to_string()))
    }
}

/// Tanh two-head model with random inputs, for oracle comparisons.
pub fn oracle_model(
    seed: u64,
    input: usize,
    backbone_hidden: usize,
    representation: usize,
    head_hidden: usize,
) -> FairModel {
    FairModel::init(MlpSpec {
        input_dim: input,
        backbone_hidden,
        representation,
        head_hidden,
        classes: 2,
        activation: Activation::Tanh,
        dropout: 0.0,
        seed,
    })
    .expect("valid oracle spec")
}

/// Dataset of `rows` random whitened-scale samples with both groups and
/// both labels present.
pub fn oracle_dataset(seed: u64, rows: usize, dim: usize) -> EncodedDataset {
    let mut rng = Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let x = Tensor::matrix(rows, dim, (0..rows * dim).map(|_| normal.sample(&mut rng)).collect()).expect("shape");
    EncodedDataset {
        x,
        y: (0..rows).map(|i| ((i / 2) % 2) as u8).collect(),
        a: (0..rows).map(|i| (i % 2) as u8).collect(),
        feature_names: (0..dim).map(|j| format!("f{j}")).collect(),
        stats: std::sync::Arc::new(WhiteningStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }),
        rejected: 0,
    }
}

fn model_loss<'a>(
    model: &'a FairModel,
    data: &'a EncodedDataset,
) -> impl Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + 'a {
    let nb = model.backbone.segments().len();
    let nu = model.utility.segments().len();
    move |tape: &mut Tape, p: &[Var]| {
        let vars = ModelVars {
            backbone: p[..nb].to_vec(),
            utility: p[nb..nb + nu].to_vec(),
            adversary: p[nb + nu..].to_vec(),
        };
        let x = tape.constant(data.x.clone());
        let out = model.forward_on_tape(tape, &vars, x, Mode::Eval, None)?;
        let y: Vec<usize> = data.y.iter().map(|&v| v as usize).collect();
        let a: Vec<usize> = data.a.iter().map(|&v| v as usize).collect();
        let lu = tape.softmax_cross_entropy(out.utility, &y)?;
        let la = tape.softmax_cross_entropy(out.adversary, &a)?;
        let la = tape.scale(la, 0.5);
        tape.add(lu, la)
    }
}

/// Engine gradients of ten random two-head tanh networks (153 parameters)
/// against central differences.
pub fn first_order_suite(provider: &GradientProvider<'_>) -> SuiteReport {
    const NAME: &str = "first-order";
    const TOL: f64 = 1e-6;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let model = oracle_model(100 + seed, 4, 8, 5, 4);
        let data = oracle_dataset(200 + seed, 6, 4);
        let loss = model_loss(&model, &data);
        let params = ParamVector::concat(&[&model.backbone, &model.utility, &model.adversary]).expect("unique names");
        let analytic = match provider(&loss, &params) {
            Ok(g) => g,
            Err(e) => return SuiteReport::errored(NAME, TOL, e),
        };
        let f = |x: &[f64]| {
            loss_value(&loss, &ParamVector::from_flat(&params, x.to_vec()).expect("layout")).unwrap_or(f64::NAN)
        };
        let fd = central_difference(&f, params.as_slice(), 1e-5);
        worst = worst.max(normwise_relative(analytic.as_slice(), &fd));
    }
    SuiteReport::new(NAME, 10, worst, TOL, None)
}

/// Gradient of the batch curvature-matching term against central
/// differences of its value, on ten random tanh networks.
pub fn second_order_suite() -> SuiteReport {
    const NAME: &str = "second-order";
    const TOL: f64 = 1e-4;
    let kernel = KernelSpec::default();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let model = oracle_model(300 + seed, 3, 4, 3, 3);
        let data = oracle_dataset(400 + seed, 6, 3);
        let rows: Vec<usize> = (0..data.len()).collect();
        let analytic = match train::curvature_matching(&model, &data, &rows, 0.5, &kernel) {
            Ok(out) => out.grad,
            Err(e) => return SuiteReport::errored(NAME, TOL, e),
        };
        let base = model.classifier_params();
        let f = |x: &[f64]| {
            let mut m = model.clone();
            m.set_classifier_params(x);
            train::curvature_matching_value(&m, &data, &rows, 0.5, &kernel).unwrap_or(f64::NAN)
        };
        let fd = central_difference(&f, base.as_slice(), 1e-5);
        worst = worst.max(normwise_relative(analytic.as_slice(), &fd));
    }
    SuiteReport::new(NAME, 10, worst, TOL, None)
}

/// Curvature estimates against a dense Hessian on ten random tanh networks
/// with at most 50 parameters, plus exactness on a quadratic.
pub fn curvature_suite() -> SuiteReport {
    const NAME: &str = "curvature-oracle";
    const TOL: f64 = 1e-2;
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for seed in 0..10u64 {
        let model = oracle_model(500 + seed, 2, 4, 3, 3);
        let mut rng = Rng::seed_from_u64(600 + seed);
        let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let y = (seed % 2) as u8;
        let loss = curvature::sample_loss(&model, &x, y);
        let params = model.classifier_params();
        let run = || -> Result<(f64, f64, f64), Box<dyn std::error::Error>> {
            let exact = hv_norm_along_sign(&loss, &params)?;
            let sigma = hessian_spectral_norm(&loss, &params, 1e-10)?;
            let c = curvature::curvature_fd(&model, &x, y, 1e-3, 0)?;
            Ok((exact, sigma, c))
        };
        match run() {
            Ok((exact, sigma, c)) => {
                worst = worst.max((c - exact).abs() / exact);
                if c > sigma + 1e-2 && failure.is_none() {
                    failure = Some(format!("seed {seed}: estimate {c} exceeds spectral norm {sigma}"));
                }
            }
            Err(e) => return SuiteReport::errored(NAME, TOL, e),
        }
    }
    let quad = |tape: &mut Tape, p: &[Var]| {
        let sq = tape.mul(p[0], p[0])?;
        let s = tape.sum(sq);
        Ok(tape.scale(s, 1.5))
    };
    let theta = ParamVector::new(vec![("t".into(), Tensor::vector(vec![0.3, -0.8, 1.7]))]).expect("one segment");
    for h in [1e-3, 1.0, 10.0] {
        match curvature_of(&quad, &theta, h, 0) {
            Ok(c) if (c - 3.0).abs() <= 1e-10 => {}
            Ok(c) => failure = failure.or(Some(format!("quadratic at h={h}: {c} instead of 3"))),
            Err(e) => return SuiteReport::errored(NAME, TOL, e),
        }
    }
    SuiteReport::new(NAME, 13, worst, TOL, failure)
}

/// Optimized statistic against explicit sums, plus its exact special cases.
pub fn mmd_suite() -> SuiteReport {
    const NAME: &str = "mmd-oracle";
    const TOL: f64 = 1e-12;
    let spec = KernelSpec::default();
    let mut rng = Rng::seed_from_u64(7);
    let normal = Normal::new(0.0, 2.0).expect("positive std");
    let sample = |rng: &mut Rng| -> Vec<f64> {
        let len = rng.random_range(1..12);
        (0..len).map(|_| normal.sample(rng)).collect()
    };
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for _ in 0..1000 {
        let (p, q) = (sample(&mut rng), sample(&mut rng));
        let fast = mmd::mmd2(&p, &q, &spec).expect("nonempty");
        worst = worst.max((fast - naive_mmd2(&p, &q, &spec)).abs());
        if mmd::mmd2(&p, &p, &spec).expect("nonempty") != 0.0 && failure.is_none() {
            failure = Some(format!("mmd2(S, S) != 0 for {p:?}"));
        }
    }
    for _ in 0..10_000 {
        let (p, q) = (sample(&mut rng), sample(&mut rng));
        let v = mmd::mmd2(&p, &q, &spec).expect("nonempty");
        if v < -1e-12 && failure.is_none() {
            failure = Some(format!("negative value {v}"));
        }
    }
    let single = mmd::mmd2(&[0.0], &[2.0], &spec).expect("nonempty");
    if (single - 2.828372).abs() > 1e-5 {
        failure = failure.or(Some(format!("singleton case gave {single}")));
    }
    SuiteReport::new(NAME, 11_001, worst, TOL, failure)
}

pub fn run_all() -> Vec<SuiteReport> {
    vec![
        first_order_suite(&engine_gradient),
        second_order_suite(),
        curvature_suite(),
        mmd_suite(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_on_known_spectra() {
        let m = vec![vec![3.0, 0.0], vec![0.0, 1.0]];
        assert!((spectral_norm(&m, 1e-12).unwrap() - 3.0).abs() < 1e-6);
        let neg = vec![vec![-4.0, 0.0], vec![0.0, 1.0]];
        assert!((spectral_norm(&neg, 1e-12).unwrap() - 4.0).abs() < 1e-6);
        assert_eq!(spectral_norm(&[vec![0.0]], 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn power_iteration_reports_non_convergence() {
        // a Jordan block: the estimate creeps towards 1 far too slowly
        let m = vec![vec![1.0, 1.0], vec![0.0, 1.0]];
        assert!(matches!(spectral_norm(&m, 1e-12), Err(VerifyError::NotConverged(_))));
    }

    #[test]
    fn quadratic_hessian_norm() {
        let loss = |tape: &mut Tape, p: &[Var]| {
            let sq = tape.mul(p[0], p[0])?;
            let s = tape.sum(sq);
            Ok(tape.scale(s, 1.5))
        };
        let p = ParamVector::new(vec![("t".into(), Tensor::vector(vec![1.0, 2.0]))]).unwrap();
        assert!((hessian_spectral_norm(&loss, &p, 1e-12).unwrap() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn hessian_size_guard() {
        let loss = |tape: &mut Tape, p: &[Var]| Ok(tape.sum(p[0]));
        let p = ParamVector::new(vec![("t".into(), Tensor::zeros(&[201]))]).unwrap();
        assert!(matches!(
            hessian_spectral_norm(&loss, &p, 1e-6),
            Err(VerifyError::TooLarge(201))
        ));
    }

    #[test]
    fn brute_force_worked_example() {
        // cells (total, errors): A0Y0 (10,1), A0Y1 (10,2), A1Y0 (10,3), A1Y1 (5,1)
        let mut pred = Vec::new();
        let mut y = Vec::new();
        let mut a = Vec::new();
        for (g, label, total, errors) in [(0u8, 0u8, 10, 1), (0, 1, 10, 2), (1, 0, 10, 3), (1, 1, 5, 1)] {
            for i in 0..total {
                a.push(g);
                y.push(label);
                pred.push(if i < errors { 1 - label } else { label });
            }
        }
        assert!((brute_force_delta_eo(&pred, &y, &a).unwrap() - 0.2).abs() < 1e-15);
        assert!(brute_force_delta_eo(&[0], &[0], &[0]).is_none());
    }

    #[test]
    fn suites_pass_on_the_engine() {
        for report in run_all() {
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn corrupted_gradient_fails_first_order() {
        let corrupt = |loss: &LossFn<'_>, p: &ParamVector| {
            let mut g = engine_gradient(loss, p)?;
            g.as_mut_slice().iter_mut().for_each(|v| *v *= 1.001);
            Ok(g)
        };
        let report = first_order_suite(&corrupt);
        assert!(!report.passed);
        assert!(report.max_error > 1e-6);
    }
}
