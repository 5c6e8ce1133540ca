//! Squared maximum mean discrepancy between two scalar samples under a
//! mixed RBF kernel `k(x, y) = Σ_σ exp(-(x - y)² / (2σ²))`.
//!
//! The estimator is the biased V-statistic: diagonal terms of the two
//! within-sample sums are included, which keeps it non-negative.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MmdError {
    #[error("MMD needs two non-empty samples (got {p} and {q} values)")]
    EmptySample { p: usize, q: usize },
    #[error("kernel bandwidths must be positive and finite, got {0:?}")]
    InvalidBandwidth(Vec<f64>),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Bandwidth set of the mixed RBF kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    bandwidths: Vec<f64>,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            bandwidths: vec![1.0, 2.0, 4.0, 8.0, 16.0],
        }
    }
}

impl KernelSpec {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self, MmdError> {
        if bandwidths.is_empty() || bandwidths.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(MmdError::InvalidBandwidth(bandwidths));
        }
        Ok(Self { bandwidths })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    fn coefficients(&self) -> impl Iterator<Item = f64> + '_ {
        self.bandwidths.iter().map(|s| -1.0 / (2.0 * s * s))
    }
}

pub fn kernel(x: f64, y: f64, spec: &KernelSpec) -> f64 {
    let d2 = (x - y) * (x - y);
    spec.coefficients().map(|c| (c * d2).exp()).sum()
}

/// `∂k(x, y)/∂x`.
fn kernel_dx(x: f64, y: f64, spec: &KernelSpec) -> f64 {
    let d = x - y;
    let d2 = d * d;
    spec.coefficients().map(|c| 2.0 * c * d * (c * d2).exp()).sum()
}

fn check(p: &[f64], q: &[f64]) -> Result<(), MmdError> {
    if p.is_empty() || q.is_empty() {
        Err(MmdError::EmptySample { p: p.len(), q: q.len() })
    } else {
        Ok(())
    }
}

fn pair_sum(a: &[f64], b: &[f64], spec: &KernelSpec) -> f64 {
    a.iter()
        .map(|&x| b.iter().map(|&y| kernel(x, y, spec)).sum::<f64>())
        .sum()
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Biased squared discrepancy between the empirical distributions of `p`
/// and `q`. All three pair sums run over sorted copies in the same order, so
/// equal multisets give exactly zero.
pub fn mmd2(p: &[f64], q: &[f64], spec: &KernelSpec) -> Result<f64, MmdError> {
    check(p, q)?;
    let (p, q) = (sorted(p), sorted(q));
    let (m, n) = (p.len() as f64, q.len() as f64);
    Ok(pair_sum(&p, &p, spec) / (m * m) - 2.0 * pair_sum(&p, &q, spec) / (m * n) + pair_sum(&q, &q, spec) / (n * n))
}

/// Value of [`mmd2`] together with its partial derivatives with respect to
/// every element of `p` and of `q`.
pub fn mmd2_with_grad(p: &[f64], q: &[f64], spec: &KernelSpec) -> Result<(f64, Vec<f64>, Vec<f64>), MmdError> {
    let value = mmd2(p, q, spec)?;
    let (m, n) = (p.len() as f64, q.len() as f64);
    let side = |own: &[f64], other: &[f64], own_n: f64| -> Vec<f64> {
        own.iter()
            .map(|&x| {
                let within: f64 = own.iter().map(|&y| kernel_dx(x, y, spec)).sum();
                let cross: f64 = other.iter().map(|&y| kernel_dx(x, y, spec)).sum();
                2.0 * within / (own_n * own_n) - 2.0 * cross / (m * n)
            })
            .collect()
    };
    Ok((value, side(p, q, m), side(q, p, n)))
}

/// Mean kernel value over all pairs of two `[k, 1]` columns.
fn mean_kernel_on_tape(tape: &mut Tape, a: Var, b: Var, spec: &KernelSpec) -> Result<Var, AutodiffError> {
    let (ra, rb) = (tape.shape(a)[0], tape.shape(b)[0]);
    let left = tape.broadcast_cols(a, rb)?;
    let bt = tape.transpose(b)?;
    let right = tape.broadcast_rows(bt, ra)?;
    let d = tape.sub(left, right)?;
    let d2 = tape.mul(d, d)?;
    let mut total: Option<Var> = None;
    for c in spec.coefficients() {
        let scaled = tape.scale(d2, c);
        let e = tape.exp(scaled);
        total = Some(match total {
            None => e,
            Some(t) => tape.add(t, e)?,
        });
    }
    let k = total.expect("kernel spec is non-empty");
    Ok(tape.mean(k))
}

/// [`mmd2`] recorded on a tape over single-element nodes, so it can be
/// differentiated with respect to the sample values.
pub fn mmd2_on_tape(tape: &mut Tape, p: &[Var], q: &[Var], spec: &KernelSpec) -> Result<Var, MmdError> {
    if p.is_empty() || q.is_empty() {
        return Err(MmdError::EmptySample { p: p.len(), q: q.len() });
    }
    let pc = tape.stack(p)?;
    let qc = tape.stack(q)?;
    let pp = mean_kernel_on_tape(tape, pc, pc, spec)?;
    let pq = mean_kernel_on_tape(tape, pc, qc, spec)?;
    let qq = mean_kernel_on_tape(tape, qc, qc, spec)?;
    let cross = tape.scale(pq, -2.0);
    let s = tape.add(pp, cross)?;
    Ok(tape.add(s, qq)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::Tensor;

    /// Direct triple-sum evaluation, no symmetry shortcuts.
    fn naive(p: &[f64], q: &[f64], s: &[f64]) -> f64 {
        let k = |x: f64, y: f64| {
            s.iter()
                .map(|sig| (-(x - y).powi(2) / (2.0 * sig * sig)).exp())
                .sum::<f64>()
        };
        let (m, n) = (p.len() as f64, q.len() as f64);
        let mut a = 0.0;
        for &x in p {
            for &y in p {
                a += k(x, y);
            }
        }
        let mut b = 0.0;
        for &x in p {
            for &y in q {
                b += k(x, y);
            }
        }
        let mut c = 0.0;
        for &x in q {
            for &y in q {
                c += k(x, y);
            }
        }
        a / (m * m) - 2.0 * b / (m * n) + c / (n * n)
    }

    #[test]
    fn kernel_on_diagonal_is_bandwidth_count() {
        assert_eq!(kernel(0.37, 0.37, &KernelSpec::default()), 5.0);
    }

    #[test]
    fn kernel_zero_two() {
        let expected =
            (-2.0f64).exp() + (-0.5f64).exp() + (-0.125f64).exp() + (-1.0f64 / 32.0).exp() + (-1.0f64 / 128.0).exp();
        let k = kernel(0.0, 2.0, &KernelSpec::default());
        assert!((k - expected).abs() < 1e-15);
        assert!((k - 3.585814).abs() < 1e-6);
        assert_eq!(k, kernel(2.0, 0.0, &KernelSpec::default()));
    }

    #[test]
    fn singleton_pair() {
        let v = mmd2(&[0.0], &[2.0], &KernelSpec::default()).unwrap();
        let closed = 10.0 - 2.0 * kernel(0.0, 2.0, &KernelSpec::default());
        assert!((v - closed).abs() < 1e-14);
        assert!((v - 2.828372).abs() < 1e-5);
    }

    #[test]
    fn identical_multisets_cancel() {
        let s = [0.3, 1.7, 1.7, -4.0];
        assert_eq!(mmd2(&s, &s, &KernelSpec::default()).unwrap(), 0.0);
        assert_eq!(mmd2(&s, &[1.7, -4.0, 0.3, 1.7], &KernelSpec::default()).unwrap(), 0.0);
    }

    #[test]
    fn empty_sample_rejected() {
        assert_eq!(
            mmd2(&[], &[1.0], &KernelSpec::default()).unwrap_err(),
            MmdError::EmptySample { p: 0, q: 1 }
        );
    }

    #[test]
    fn bad_bandwidth_rejected() {
        assert!(KernelSpec::new(vec![]).is_err());
        assert!(KernelSpec::new(vec![1.0, 0.0]).is_err());
        assert!(KernelSpec::new(vec![2.0]).is_ok());
    }

    #[test]
    fn tape_and_analytic_gradients_agree() {
        let p = [0.5, 2.0, 3.5];
        let q = [0.1, 4.0];
        let spec = KernelSpec::default();
        let (v, gp, gq) = mmd2_with_grad(&p, &q, &spec).unwrap();
        let mut tape = Tape::new();
        let pv: Vec<Var> = p.iter().map(|&x| tape.leaf(Tensor::scalar(x))).collect();
        let qv: Vec<Var> = q.iter().map(|&x| tape.leaf(Tensor::scalar(x))).collect();
        let out = mmd2_on_tape(&mut tape, &pv, &qv, &spec).unwrap();
        assert!((tape.item(out) - v).abs() < 1e-13);
        let all: Vec<Var> = pv.iter().chain(&qv).copied().collect();
        let g = tape.grad(out, &all).unwrap();
        for (a, b) in g.iter().map(|t| t.item()).zip(gp.iter().chain(&gq)) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }

    #[test]
    fn analytic_gradient_matches_fd() {
        let p = [0.2, 1.4, 1.5, 3.0];
        let q = [0.9, 2.2, 5.0];
        let spec = KernelSpec::default();
        let (_, gp, gq) = mmd2_with_grad(&p, &q, &spec).unwrap();
        let step = 1e-5;
        for i in 0..p.len() {
            let (mut a, mut b) = (p, p);
            a[i] += step;
            b[i] -= step;
            let fd = (mmd2(&a, &q, &spec).unwrap() - mmd2(&b, &q, &spec).unwrap()) / (2.0 * step);
            assert!(
                (gp[i] - fd).abs() <= 1e-6 * gp[i].abs().max(1e-3),
                "p{i}: {} vs {fd}",
                gp[i]
            );
        }
        for j in 0..q.len() {
            let (mut a, mut b) = (q, q);
            a[j] += step;
            b[j] -= step;
            let fd = (mmd2(&p, &a, &spec).unwrap() - mmd2(&p, &b, &spec).unwrap()) / (2.0 * step);
            assert!(
                (gq[j] - fd).abs() <= 1e-6 * gq[j].abs().max(1e-3),
                "q{j}: {} vs {fd}",
                gq[j]
            );
        }
    }

    fn sample() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-20.0f64..20.0, 1..12)
    }

    proptest! {
        #[test]
        fn matches_naive(p in sample(), q in sample()) {
            let spec = KernelSpec::default();
            let v = mmd2(&p, &q, &spec).unwrap();
            prop_assert!((v - naive(&p, &q, spec.bandwidths())).abs() < 1e-12);
        }

        #[test]
        fn non_negative_and_symmetric(p in sample(), q in sample()) {
            let spec = KernelSpec::default();
            let a = mmd2(&p, &q, &spec).unwrap();
            let b = mmd2(&q, &p, &spec).unwrap();
            prop_assert!(a >= -1e-12);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn scale_invariance(p in sample(), q in sample(), c in 0.1f64..10.0) {
            let spec = KernelSpec::default();
            let scaled = KernelSpec::new(spec.bandwidths().iter().map(|s| s * c).collect()).unwrap();
            let ps: Vec<f64> = p.iter().map(|x| x * c).collect();
            let qs: Vec<f64> = q.iter().map(|x| x * c).collect();
            let a = mmd2(&p, &q, &spec).unwrap();
            let b = mmd2(&ps, &qs, &scaled).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
