//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails. Criterion 7 needs the
//! Communities-and-Crime splits in `CURVMATCH_CC_DIR` (train.csv, test.csv,
//! schema.json) and is skipped otherwise.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use curvmatch::harness::{self, DataSource, EvalSetSpec, ExperimentSpec};
use curvmatch::train::{self, Method, ModelConfig, TrainConfig};
use curvmatch::{data, fairness, verify, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let first = verify::first_order_suite(&verify::engine_gradient);
    let second = verify::second_order_suite();
    let elapsed = start.elapsed();
    check(
        first.passed && second.passed && elapsed < Duration::from_secs(60),
        format!(
            "first-order max rel {:.2e} (< 1e-6), second-order max rel {:.2e} (< 1e-4), {:.1}s (< 60s)",
            first.max_error,
            second.max_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn curvature_oracle() -> Verdict {
    let start = Instant::now();
    let report = verify::curvature_suite();
    let elapsed = start.elapsed();
    check(
        report.passed && elapsed < Duration::from_secs(120),
        format!(
            "max rel vs exact {:.2e} (< 1e-2), {}, {:.1}s (< 120s)",
            report.max_error,
            report
                .failure
                .as_deref()
                .unwrap_or("bounded by spectral norm, quadratic exact"),
            elapsed.as_secs_f64()
        ),
    )
}

fn mmd_correctness() -> Verdict {
    let report = verify::mmd_suite();
    // {0} vs {2}: each bandwidth contributes 2 (1 - exp(-4 / (2 s^2))).
    let closed: f64 = [1.0f64, 2.0, 4.0, 8.0, 16.0]
        .iter()
        .map(|s| 2.0 * (1.0 - (-2.0 / (s * s)).exp()))
        .sum();
    let pinned_ok = (closed - 2.828372).abs() < 1e-5;
    check(
        report.passed && pinned_ok,
        format!(
            "max |fast - naive| {:.2e} (< 1e-12), closed form {closed:.6}{}",
            report.max_error,
            report.failure.map(|f| format!(", {f}")).unwrap_or_default()
        ),
    )
}

fn metric_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut compared = 0;
    let mut mismatches = 0;
    while compared < 10_000 {
        let n = rng.random_range(4..60);
        let bits = |rng: &mut ChaCha8Rng| -> Vec<u8> { (0..n).map(|_| rng.random_range(0..2)).collect() };
        let (pred, y, a) = (bits(&mut rng), bits(&mut rng), bits(&mut rng));
        let Some(oracle) = verify::brute_force_delta_eo(&pred, &y, &a) else {
            continue;
        };
        compared += 1;
        if fairness::delta_eo(&pred, &y, &a).ok() != Some(oracle) {
            mismatches += 1;
        }
    }
    // FPR 1/10 vs 3/10, FNR 2/10 vs 2/10.
    let mut pred = Vec::new();
    let mut y = Vec::new();
    let mut a = Vec::new();
    for (group, wrong_neg, wrong_pos) in [(0u8, 1, 2), (1u8, 3, 2)] {
        for i in 0..10 {
            pred.push(u8::from(i < wrong_neg));
            y.push(0);
            a.push(group);
        }
        for i in 0..10 {
            pred.push(u8::from(i >= wrong_pos));
            y.push(1);
            a.push(group);
        }
    }
    let worked = fairness::delta_eo(&pred, &y, &a).unwrap_or(f64::NAN);
    check(
        mismatches == 0 && format!("{worked:.6}") == "0.200000",
        format!("{mismatches} mismatches in {compared} random tables, worked example {worked:.6}"),
    )
}

fn tiny_config(method: Method, alpha: f64, gamma: f64) -> TrainConfig {
    TrainConfig {
        method,
        alpha,
        gamma,
        epochs: 3,
        batch_size: 48,
        seed: 17,
        model: ModelConfig {
            backbone_hidden: 16,
            representation: 8,
            head_hidden: 8,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn trajectory(config: &TrainConfig, set: &curvmatch::EncodedDataset) -> (Vec<Vec<f64>>, Vec<(f64, f64)>) {
    let mut params = Vec::new();
    let mut losses = Vec::new();
    train::train_observed(config, set, &[], &mut |event| {
        params.push(event.model.flat_params());
        losses.push((event.losses.total, event.losses.clf));
    })
    .expect("training succeeds");
    (params, losses)
}

fn reduction_identity() -> Verdict {
    let synth = data::synth_biased(&SynthSpec::new(400, 8, 0.7, 0.5, 5)).expect("generator");
    let (adv, _) = trajectory(&tiny_config(Method::AdvDebias, 1.0, 0.0), &synth.train);
    let (cuma, _) = trajectory(&tiny_config(Method::Cuma, 1.0, 0.0), &synth.train);
    let bit_identical = adv.len() == cuma.len()
        && adv
            .iter()
            .zip(&cuma)
            .all(|(p, q)| p.iter().zip(q).all(|(x, y)| x.to_bits() == y.to_bits()));
    let (normal, losses) = trajectory(&tiny_config(Method::Normal, 1.0, 1.0), &synth.train);
    let worst = losses
        .iter()
        .map(|(total, clf)| (total - clf).abs() / clf.abs().max(1.0))
        .fold(0.0, f64::max);
    let (zeroed, _) = trajectory(&tiny_config(Method::Cuma, 0.0, 0.0), &synth.train);
    let zero_weights_match = zeroed == normal;
    check(
        bit_identical && worst <= f64::EPSILON && zero_weights_match,
        format!(
            "{} steps, cuma(gamma=0) vs advdebias bit-identical: {bit_identical}; normal max |total - L_clf| {worst:.1e}; cuma(alpha=gamma=0) == normal: {zero_weights_match}",
            adv.len()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn directional() -> Verdict {
    let seeds = 5;
    let mut shifted = Vec::new();
    let mut accuracy = Vec::new();
    let mut slowest: f64 = 0.0;
    for method in [Method::Normal, Method::AdvDebias, Method::Cuma] {
        let mut eo = Vec::new();
        let mut acc = Vec::new();
        for seed in 0..seeds {
            let mut spec = ExperimentSpec::new(
                TrainConfig {
                    method,
                    seed,
                    ..TrainConfig::default()
                },
                DataSource::Synthetic(SynthSpec::new(2000, 20, 0.7, 0.5, 42)),
            );
            spec.eval = vec![EvalSetSpec::gaussian("gaussian")];
            let start = Instant::now();
            let report = match harness::run(&spec) {
                Ok(r) => r,
                Err(e) => return Verdict::Fail(format!("{method} seed {seed}: {e}")),
            };
            slowest = slowest.max(start.elapsed().as_secs_f64());
            let run = &report.runs[0];
            eo.push(run.set("gaussian").expect("shift set").delta_eo);
            acc.push(run.set("test").expect("test set").accuracy);
        }
        shifted.push(median(eo));
        accuracy.push(median(acc));
    }
    let [normal, adv, cuma] = [shifted[0], shifted[1], shifted[2]];
    let acc_gap = accuracy[0] - accuracy[2];
    check(
        cuma < normal && cuma <= adv && acc_gap.abs() <= 5.0 && slowest < 300.0,
        format!(
            "median shifted dEO normal {normal:.2} advdebias {adv:.2} cuma {cuma:.2}; median acc normal {:.2} cuma {:.2}; slowest run {slowest:.0}s",
            accuracy[0], accuracy[2]
        ),
    )
}

fn real_data() -> Verdict {
    let Some(dir) = std::env::var_os("CURVMATCH_CC_DIR").map(PathBuf::from) else {
        return Verdict::Skip("CURVMATCH_CC_DIR not set".into());
    };
    let base = |alpha: f64| {
        let mut spec = ExperimentSpec::new(
            TrainConfig {
                method: Method::Cuma,
                alpha,
                ..TrainConfig::default()
            },
            DataSource::Csv {
                train: dir.join("train.csv"),
                test: dir.join("test.csv"),
                schema: dir.join("schema.json"),
            },
        );
        spec.eval = vec![EvalSetSpec::gaussian("gaussian")];
        spec
    };
    let shifted = |alpha: f64| -> Result<(f64, f64), String> {
        let report = harness::run(&base(alpha)).map_err(|e| e.to_string())?;
        let run = &report.runs[0];
        Ok((
            run.set("test").expect("test").accuracy,
            run.set("gaussian").expect("shift").delta_eo,
        ))
    };
    let results: Result<Vec<_>, _> = [0.1, 1.0, 10.0].into_iter().map(shifted).collect();
    let results = match results {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(e),
    };
    let (acc, eo) = results[1];
    let ordering = results[0].1 > eo + 2.0;
    check(
        (eo - 28.69).abs() <= 5.0 && (acc - 85.20).abs() <= 3.0 && ordering,
        format!(
            "alpha=1 acc {acc:.2} shifted dEO {eo:.2}; shifted dEO alpha=0.1 {:.2}, alpha=10 {:.2}",
            results[0].1, results[2].1
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut spec = ExperimentSpec::new(
        TrainConfig {
            epochs: 4,
            ..tiny_config(Method::Cuma, 1.0, 1.0)
        },
        DataSource::Synthetic(SynthSpec::new(600, 10, 0.7, 0.5, 3)),
    );
    spec.eval = vec![EvalSetSpec::gaussian("gaussian"), EvalSetSpec::uniform("uniform")];
    spec.repeats = 2;
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        spec.output_dir = Some(dir.path().join(name));
        if let Err(e) = harness::run(&spec) {
            return Verdict::Fail(e.to_string());
        }
        outputs.push(std::fs::read(dir.path().join(name).join("metrics.json")).expect("metrics written"));
    }
    check(
        outputs[0] == outputs[1],
        format!("two runs wrote {} and {} bytes", outputs[0].len(), outputs[1].len()),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradients),
        ("curvature oracle", curvature_oracle),
        ("mmd correctness", mmd_correctness),
        ("metric correctness", metric_correctness),
        ("reduction identity", reduction_identity),
        ("directional shift robustness", directional),
        ("real-data check", real_data),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (tag, detail) = match run() {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {} {name}: {tag} ({detail})", i + 1);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
