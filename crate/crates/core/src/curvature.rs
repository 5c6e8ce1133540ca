//! Per-sample loss curvature along the gradient-sign direction.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradnorm_difference_from, AutodiffError, ParamVector, Tape, Tensor, Var};
use crate::data::EncodedDataset;
use crate::nn::{FairModel, Mode};

#[derive(Debug, thiserror::Error)]
pub enum CurvatureError {
    #[error("non-finite gradient while estimating curvature of sample {sample}")]
    NonFinite { sample: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("curvature dump: {0}")]
    Csv(#[from] csv::Error),
}

/// `sign(g) / ‖sign(g)‖` with `sign(0) = 0`; `None` when `g` is all zeros.
pub fn estimate_direction(g: &[f64]) -> Option<Vec<f64>> {
    let signs: Vec<f64> = g
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    let nonzero = signs.iter().filter(|s| **s != 0.0).count();
    if nonzero == 0 {
        return None;
    }
    let scale = 1.0 / (nonzero as f64).sqrt();
    Some(signs.into_iter().map(|s| s * scale).collect())
}

fn direction_segments(layout: &ParamVector, grads: &[Tensor]) -> Option<Vec<Tensor>> {
    let flat: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
    let dir = estimate_direction(&flat)?;
    Some(ParamVector::from_flat(layout, dir).expect("same length").tensors())
}

fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(Tensor::is_finite)
}

/// `‖∇L(θ + hṽ) − ∇L(θ)‖ / |h|` by two first-order gradients. Zero at
/// stationary points.
pub fn curvature_of<F>(loss: &F, params: &ParamVector, h: f64, sample: usize) -> Result<f64, CurvatureError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + ?Sized,
{
    if h == 0.0 {
        return Err(AutodiffError::ZeroStep.into());
    }
    let gradient_at = |p: &ParamVector| -> Result<Vec<Tensor>, CurvatureError> {
        let mut tape = Tape::new();
        let vars = p.leaves(&mut tape);
        let l = loss(&mut tape, &vars)?;
        let g = tape.grad(l, &vars)?;
        if !all_finite(&g) {
            return Err(CurvatureError::NonFinite { sample });
        }
        Ok(g)
    };
    let g0 = gradient_at(params)?;
    let Some(dir) = direction_segments(params, &g0) else {
        return Ok(0.0);
    };
    let mut shifted = params.clone();
    let flat_dir: Vec<f64> = dir.iter().flat_map(|t| t.data().iter().copied()).collect();
    for (p, d) in shifted.as_mut_slice().iter_mut().zip(&flat_dir) {
        *p += h * d;
    }
    let g1 = gradient_at(&shifted)?;
    let sq: f64 = g1
        .iter()
        .zip(&g0)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    Ok(sq.sqrt() / h.abs())
}

/// Curvature value and its gradient with respect to `params`, the direction
/// held constant. Flat points give zero value and zero gradient.
pub fn curvature_with_grad<F>(
    loss: &F,
    params: &ParamVector,
    h: f64,
    sample: usize,
) -> Result<(f64, ParamVector), CurvatureError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + ?Sized,
{
    if h == 0.0 {
        return Err(AutodiffError::ZeroStep.into());
    }
    let mut tape = Tape::with_higher_order();
    let vars = params.leaves(&mut tape);
    let l = loss(&mut tape, &vars)?;
    let g0 = tape.grad_graph(l, &vars)?;
    let g0_values: Vec<Tensor> = g0.iter().map(|&v| tape.value(v).clone()).collect();
    if !all_finite(&g0_values) {
        return Err(CurvatureError::NonFinite { sample });
    }
    let Some(dir) = direction_segments(params, &g0_values) else {
        return Ok((0.0, params.zeros_like()));
    };
    let c = gradnorm_difference_from(&mut tape, loss, &vars, &g0, &dir, h)?;
    let value = tape.item(c);
    let grads = tape.grad(c, &vars)?;
    if !value.is_finite() || !all_finite(&grads) {
        return Err(CurvatureError::NonFinite { sample });
    }
    Ok((value, ParamVector::from_tensors(params, grads)?))
}

/// Eval-mode cross-entropy of one sample as a function of the classifier
/// parameters (backbone segments then utility segments).
pub fn sample_loss<'a>(
    model: &'a FairModel,
    x: &'a [f64],
    y: u8,
) -> impl Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + 'a {
    let split = model.backbone.segments().len();
    move |tape: &mut Tape, p: &[Var]| {
        let xv = tape.constant(Tensor::from_parts(vec![1, x.len()], x.to_vec()));
        let rep = model.backbone_on_tape(tape, &p[..split], xv, Mode::Eval)?;
        let logits = model.head_on_tape(tape, &p[split..], rep, Mode::Eval)?;
        tape.softmax_cross_entropy(logits, &[y as usize])
    }
}

/// Curvature of the classification loss at one sample.
pub fn curvature_fd(model: &FairModel, x: &[f64], y: u8, h: f64, sample: usize) -> Result<f64, CurvatureError> {
    curvature_of(&sample_loss(model, x, y), &model.classifier_params(), h, sample)
}

/// Curvature at one sample and its gradient over the classifier parameters.
pub fn curvature_fd_with_grad(
    model: &FairModel,
    x: &[f64],
    y: u8,
    h: f64,
    sample: usize,
) -> Result<(f64, ParamVector), CurvatureError> {
    curvature_with_grad(&sample_loss(model, x, y), &model.classifier_params(), h, sample)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureSample {
    pub id: usize,
    pub group: u8,
    pub value: f64,
}

/// Curvatures of the given rows split by group, each list in input order.
pub fn group_curvatures(
    model: &FairModel,
    data: &EncodedDataset,
    rows: &[usize],
    h: f64,
) -> Result<(Vec<CurvatureSample>, Vec<CurvatureSample>), CurvatureError> {
    let samples = rows
        .par_iter()
        .map(|&i| {
            curvature_fd(model, data.x.row(i), data.y[i], h, i).map(|value| CurvatureSample {
                id: i,
                group: data.a[i],
                value,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(samples.into_iter().partition(|s| s.group == 0))
}

/// Writes `id,group,curvature` rows.
pub fn write_curvatures_csv(path: &Path, samples: &[CurvatureSample]) -> Result<(), CurvatureError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "group", "curvature"])?;
    for s in samples {
        w.write_record([s.id.to_string(), s.group.to_string(), s.value.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpSpec};
    use crate::verify;

    type LossFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + Sync;

    fn quadratic(diag: Vec<f64>) -> Box<LossFn> {
        Box::new(move |tape: &mut Tape, p: &[Var]| {
            let k = tape.constant(Tensor::vector(diag.iter().map(|d| 0.5 * d).collect()));
            let sq = tape.mul(p[0], p[0])?;
            let w = tape.mul(sq, k)?;
            Ok(tape.sum(w))
        })
    }

    fn vector(v: Vec<f64>) -> ParamVector {
        ParamVector::new(vec![("t".into(), Tensor::vector(v))]).unwrap()
    }

    #[test]
    fn direction_examples() {
        let k = 1.0 / 2f64.sqrt();
        assert_eq!(estimate_direction(&[0.2, -0.7]).unwrap(), [k, -k]);
        assert_eq!(estimate_direction(&[5.0]).unwrap(), [1.0]);
        assert_eq!(estimate_direction(&[0.0, 3.0]).unwrap(), [0.0, 1.0]);
        assert!(estimate_direction(&[0.0, 0.0]).is_none());
    }

    #[test]
    fn isotropic_quadratic_is_exact() {
        let loss = quadratic(vec![3.0; 4]);
        let p = vector(vec![0.3, -1.2, 2.0, 0.7]);
        for h in [1e-3, 1.0, 10.0, -0.5] {
            let c = curvature_of(&loss, &p, h, 0).unwrap();
            assert!((c - 3.0).abs() < 1e-10, "h={h}: {c}");
        }
    }

    #[test]
    fn diag_three_one_gives_sqrt_five() {
        let loss = quadratic(vec![3.0, 1.0]);
        let p = vector(vec![0.4, -0.9]);
        let c = curvature_of(&loss, &p, 1e-3, 0).unwrap();
        assert!((c - 5f64.sqrt()).abs() < 1e-9);
        let sigma = verify::hessian_spectral_norm(&*loss, &p, 1e-12).unwrap();
        assert!((sigma - 3.0).abs() < 1e-6);
    }

    #[test]
    fn flat_point_is_zero() {
        let loss = quadratic(vec![3.0; 2]);
        let p = vector(vec![0.0, 0.0]);
        assert_eq!(curvature_of(&loss, &p, 1.0, 0).unwrap(), 0.0);
        let (v, g) = curvature_with_grad(&loss, &p, 1.0, 0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_step_rejected() {
        let loss = quadratic(vec![1.0]);
        assert!(curvature_of(&loss, &vector(vec![1.0]), 0.0, 0).is_err());
    }

    #[test]
    fn non_finite_names_the_sample() {
        let loss: Box<LossFn> = Box::new(|tape: &mut Tape, p: &[Var]| {
            let r = tape.recip(p[0]);
            Ok(tape.sum(r))
        });
        assert!(matches!(
            curvature_of(&loss, &vector(vec![0.0]), 1.0, 17),
            Err(CurvatureError::NonFinite { sample: 17 })
        ));
    }

    fn tiny_tanh(seed: u64) -> FairModel {
        let spec = MlpSpec {
            input_dim: 2,
            backbone_hidden: 4,
            representation: 3,
            head_hidden: 3,
            classes: 2,
            activation: Activation::Tanh,
            dropout: 0.0,
            seed,
        };
        FairModel::init(spec).unwrap()
    }

    #[test]
    fn first_order_convergence_in_h() {
        let model = tiny_tanh(4);
        assert!(model.classifier_params().len() <= 50);
        let x = [0.8, -0.3];
        let loss = sample_loss(&model, &x, 1);
        let params = model.classifier_params();
        let exact = verify::hv_norm_along_sign(&loss, &params).unwrap();
        let steps = [1e-1, 1e-2, 1e-3];
        let errs: Vec<f64> = steps
            .iter()
            .map(|&h| (curvature_fd(&model, &x, 1, h, 0).unwrap() - exact).abs())
            .collect();
        let slopes: Vec<f64> = errs.iter().zip(steps).map(|(e, h)| e / h).collect();
        let (lo, hi) = slopes
            .iter()
            .fold((f64::MAX, 0.0f64), |(l, u), &s| (l.min(s), u.max(s)));
        assert!(hi / lo < 4.0, "{errs:?}");
        let last = errs[1] / errs[2];
        assert!(last > 5.0 && last < 20.0, "{errs:?}");
        assert!(errs[2] / exact < 1e-2);
    }

    #[test]
    fn with_grad_matches_value_path() {
        let model = tiny_tanh(9);
        let x = [1.1, 0.4];
        let a = curvature_fd(&model, &x, 0, 0.5, 0).unwrap();
        let (b, g) = curvature_fd_with_grad(&model, &x, 0, 0.5, 0).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert_eq!(g.len(), model.classifier_params().len());
    }

    #[test]
    fn groups_partition_in_order() {
        let model = FairModel::init(MlpSpec::new(2, 3)).unwrap();
        let x = Tensor::matrix(4, 2, vec![0.1, 0.2, 0.1, 0.2, -1.0, 0.5, 0.3, 0.3]).unwrap();
        let data = EncodedDataset {
            x,
            y: vec![1, 1, 0, 1],
            a: vec![0, 1, 1, 0],
            feature_names: vec!["p".into(), "q".into()],
            stats: std::sync::Arc::new(crate::data::WhiteningStats {
                mean: vec![0.0; 2],
                std: vec![1.0; 2],
            }),
            rejected: 0,
        };
        let (g0, g1) = group_curvatures(&model, &data, &[0, 1, 2, 3], 1.0).unwrap();
        assert_eq!(g0.iter().map(|s| s.id).collect::<Vec<_>>(), [0, 3]);
        assert_eq!(g1.iter().map(|s| s.id).collect::<Vec<_>>(), [1, 2]);
        assert_eq!(g0[0].value, g1[0].value);
        assert!(g0.iter().chain(&g1).all(|s| s.value >= 0.0));
        let (one0, one1) = group_curvatures(&model, &data, &[0, 1], 1.0).unwrap();
        assert_eq!((one0.len(), one1.len()), (1, 1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_curvatures_csv(&path, &[g0, g1].concat()).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), 5);
    }
}
