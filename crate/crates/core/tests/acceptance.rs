//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed. The
//! process fails if any criterion fails, except those listed in
//! `KNOWN_UNATTAINABLE`, which still print FAIL together with the reason.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sli_cascade::forest::best_split;
use sli_cascade::logit::{fit_logit, gradient, log_likelihood, WaldRow};
use sli_cascade::metrics::{auc_roc, basic_metrics, ConfusionMatrix};
use sli_cascade::neighbors::fit_knn;
use sli_cascade::pipeline::{run_cascade, CascadeConfig};
use sli_cascade::stats::spearman;
use sli_cascade::tabular::{synth_dataset, FeatureMatrix};

/// Criteria whose literal wording cannot be met, with the reason.
const KNOWN_UNATTAINABLE: &[(u32, &str)] = &[(
    2,
    "z = 1.25727/0.28994 = 4.3363 has two-sided p = 1.449e-5, so the published \"~0\" row cannot satisfy p < 1e-5",
)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

fn names(v: usize) -> Vec<String> {
    (0..v).map(|j| format!("x{j}")).collect()
}

// 1 -------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cm = ConfusionMatrix {
        tp: 238,
        fp: 4,
        tn: 67,
        fn_: 5,
    };
    let m = basic_metrics(&cm).expect("metrics");
    let elapsed = start.elapsed();
    let checks = [
        ("accuracy", m.accuracy, 0.9713, 1e-4),
        ("precision", m.precision.unwrap_or(f64::NAN), 238.0 / 242.0, 1e-4),
        ("recall", m.recall.unwrap_or(f64::NAN), 0.97942, 1e-4),
        ("neg_recall", m.neg_recall.unwrap_or(f64::NAN), 0.94366, 1e-4),
        ("f1", m.f1.unwrap_or(f64::NAN), 0.98144, 1e-4),
    ];
    let mut failed: Vec<String> = checks
        .iter()
        .filter(|(_, got, want, tol)| !((got - want).abs() <= *tol))
        .map(|(n, got, want, _)| format!("{n}={got} want {want}"))
        .collect();
    if elapsed >= Duration::from_secs(1) {
        failed.push(format!("runtime {elapsed:?}"));
    }
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("accuracy {:.4}%, f1 {:.5}", 100.0 * m.accuracy, m.f1.unwrap_or(0.0))
        } else {
            failed.join("; ")
        },
    )
}

// 2 -------------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let start = Instant::now();
    // (estimate, std_error, published z, published p or None for "~0")
    let rows: [(&str, f64, f64, f64, Option<f64>); 6] = [
        ("Verbos sin declinar", 1.25727, 0.28994, 4.336, None),
        ("Morfemas por oracion", -0.84605, 0.08618, -9.817, None),
        ("Errores", 0.85750, 0.11493, 7.461, None),
        ("Promedio silabas", -2.64640, 1.10947, -2.385, Some(0.01707)),
        ("Frecuencia de tipos", -2.73838, 0.91128, -3.005, Some(0.00266)),
        ("Pasado regular", -0.05929, 0.01623, -3.652, Some(0.00026)),
    ];
    let mut failed = Vec::new();
    for (name, est, se, z, p) in rows {
        let r = WaldRow::from_estimate(name, est, se).expect("wald row");
        if !((r.z_value - z).abs() <= 0.002) {
            failed.push(format!("{name}: z={:.4} want {z}", r.z_value));
        }
        match p {
            Some(p) if !((r.p_value - p).abs() <= 5e-5) => {
                failed.push(format!("{name}: p={:.6} want {p}", r.p_value))
            }
            None if !(r.p_value < 1e-5) => failed.push(format!("{name}: p={:.4e} not < 1e-5", r.p_value)),
            _ => {}
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(1) {
        failed.push(format!("runtime {elapsed:?}"));
    }
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            "six rows reproduced".to_owned()
        } else {
            failed.join("; ")
        },
    )
}

// 3 -------------------------------------------------------------------------

fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    // rank = 1 + #smaller + (#equal - 1) / 2
    x.iter()
        .map(|&a| {
            let smaller = x.iter().filter(|&&b| b < a).count() as f64;
            let equal = x.iter().filter(|&&b| b == a).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_free = 0.0f64;
    let mut worst_tied = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(3..=50);
        // tie-free: random permutations of distinct values
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let rx = oracle_ranks(&x);
        let ry = oracle_ranks(&y);
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        let nf = n as f64;
        let closed = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        let got = spearman(&x, &y).expect("spearman");
        worst_free = worst_free.max((got - closed).abs());

        // tied: small integer alphabet
        let xt: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..4))).collect();
        let yt: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..4))).collect();
        let oracle = oracle_pearson(&oracle_ranks(&xt), &oracle_ranks(&yt));
        match spearman(&xt, &yt) {
            Ok(got) => worst_tied = worst_tied.max((got - oracle).abs()),
            Err(_) => {
                if oracle.is_finite() {
                    worst_tied = f64::INFINITY;
                }
            }
        }
    }
    outcome(
        worst_free <= 1e-12 && worst_tied <= 1e-12,
        format!("max deviation tie-free {worst_free:.2e}, tied {worst_tied:.2e}"),
    )
}

// 4 -------------------------------------------------------------------------

fn oracle_gain(col: &[f64], y: &[u8], t: f64) -> Option<f64> {
    let q = |c: [f64; 2]| {
        let n = c[0] + c[1];
        c[0] * c[1] / (n * n)
    };
    let mut l = [0.0; 2];
    let mut r = [0.0; 2];
    for (&v, &c) in col.iter().zip(y) {
        if v <= t {
            l[c as usize] += 1.0;
        } else {
            r[c as usize] += 1.0;
        }
    }
    let (nl, nr) = (l[0] + l[1], r[0] + r[1]);
    if nl == 0.0 || nr == 0.0 {
        return None;
    }
    let n = nl + nr;
    Some(q([l[0] + r[0], l[1] + r[1]]) - nl / n * q(l) - nr / n * q(r))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = Vec::new();
    for case in 0..200 {
        let n = rng.random_range(2..=20);
        let v = rng.random_range(1..=5);
        // small integer alphabets create repeated values and gain ties
        let alphabet = rng.random_range(2..=6);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..v).map(|_| f64::from(rng.random_range(0..alphabet))).collect())
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            labels[0] = 1 - labels[0];
        }
        let data = FeatureMatrix::from_rows(&rows, labels.clone(), names(v)).expect("matrix");

        // exhaustive: all features, all midpoints
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..v {
            let col = data.column(f);
            let mut distinct = col.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            for w in distinct.windows(2) {
                let t = (w[0] + w[1]) / 2.0;
                let Some(g) = oracle_gain(&col, &labels, t) else { continue };
                let better = match best {
                    None => true,
                    Some((bg, bf, bt)) => {
                        g > bg + 1e-12 || ((g - bg).abs() <= 1e-12 && (f, t) < (bf, bt))
                    }
                };
                if better {
                    best = Some((g, f, t));
                }
            }
        }
        let rows_idx: Vec<usize> = (0..n).collect();
        let features: Vec<usize> = (0..v).collect();
        let got = best_split(&data, &rows_idx, &features, 1).expect("split");
        let same = match (got, best) {
            (None, None) => true,
            (Some(s), Some((g, f, t))) => s.feature == f && s.threshold == t && (s.gain - g).abs() <= 1e-12,
            _ => false,
        };
        if !same {
            mismatches.push(format!("case {case}: got {got:?}, oracle {best:?}"));
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches.is_empty() && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        if mismatches.is_empty() {
            format!("200/200 datasets agree in {elapsed:?}")
        } else {
            mismatches.into_iter().take(3).collect::<Vec<_>>().join("; ")
        },
    )
}

// 5 -------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failed = Vec::new();

    let mut worst_rel = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(20..=80);
        let v = rng.random_range(1..=4);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..v).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let data = FeatureMatrix::from_rows(&rows, labels, names(v)).expect("matrix");
        let beta: Vec<f64> = (0..=v).map(|_| rng.random_range(-1.5..1.5)).collect();
        let g = gradient(&data, &beta).expect("gradient");
        let h = 1e-5;
        let fd: Vec<f64> = (0..=v)
            .map(|j| {
                let mut up = beta.clone();
                let mut down = beta.clone();
                up[j] += h;
                down[j] -= h;
                (log_likelihood(&data, &up).unwrap() - log_likelihood(&data, &down).unwrap()) / (2.0 * h)
            })
            .collect();
        let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst_rel = worst_rel.max(num / den);
    }
    if !(worst_rel < 1e-6) {
        failed.push(format!("gradient relative error {worst_rel:.2e}"));
    }

    let labels: Vec<u8> = (0..200).map(|i| u8::from(i % 4 != 0)).collect();
    let intercept_only = FeatureMatrix::new(vec![], labels, vec![]).expect("matrix");
    let b0 = fit_logit(&intercept_only).expect("fit").coefficients[0];
    if !((b0 - 3f64.ln()).abs() <= 1e-6) {
        failed.push(format!("intercept {b0} vs ln 3"));
    }

    let mut worst_score = 0.0f64;
    for seed in 0..10u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = 400;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![r.random_range(-3.0..3.0), r.random_range(0.0..50.0), r.random_range(-1.0..1.0)])
            .collect();
        let labels: Vec<u8> = rows
            .iter()
            .map(|x| {
                let eta = 0.4 + 0.9 * x[0] - 0.03 * x[1];
                u8::from(r.random::<f64>() < 1.0 / (1.0 + (-eta).exp()))
            })
            .collect();
        let data = FeatureMatrix::from_rows(&rows, labels, names(3)).expect("matrix");
        let m = fit_logit(&data).expect("fit");
        let g = gradient(&data, &m.coefficients).expect("gradient");
        worst_score = worst_score.max(g.iter().fold(0.0, |a, b| a.max(b.abs())));
    }
    if !(worst_score <= 1e-6) {
        failed.push(format!("score equations off by {worst_score:.2e}"));
    }
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("gradient rel err {worst_rel:.1e}, intercept {b0:.9}, score residual {worst_score:.1e}")
        } else {
            failed.join("; ")
        },
    )
}

// 6 -------------------------------------------------------------------------

fn oracle_knn(train: &[Vec<f64>], labels: &[u8], q: &[f64], k: usize) -> (f64, u8) {
    let v = q.len();
    let n = train.len() as f64;
    let mut means = vec![0.0; v];
    let mut sds = vec![0.0; v];
    for j in 0..v {
        means[j] = train.iter().map(|r| r[j]).sum::<f64>() / n;
        sds[j] = (train.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n).sqrt();
    }
    let z = |x: &[f64]| -> Vec<f64> { (0..v).map(|j| (x[j] - means[j]) / sds[j]).collect() };
    let qz = z(q);
    let mut all: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let rz = z(r);
            (rz.iter().zip(&qz).map(|(a, b)| (a - b) * (a - b)).sum(), i)
        })
        .collect();
    // full sort by (distance, index)
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nb = &all[..k];
    let ones = nb.iter().filter(|(_, i)| labels[*i] == 1).count();
    let proba = ones as f64 / k as f64;
    let class = if 2 * ones > k {
        1
    } else if 2 * ones < k {
        0
    } else {
        let d1: f64 = nb.iter().filter(|(_, i)| labels[*i] == 1).map(|(d, _)| d).sum();
        let d0: f64 = nb.iter().filter(|(_, i)| labels[*i] == 0).map(|(d, _)| d).sum();
        if d0 < d1 {
            0
        } else {
            1
        }
    };
    (proba, class)
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut ties = 0;
    let mut queries = 0;
    while queries < 500 {
        let n = rng.random_range(4..=300);
        let v = rng.random_range(1..=10);
        let grid = rng.random_bool(0.5);
        let draw = |rng: &mut ChaCha8Rng| {
            if grid {
                f64::from(rng.random_range(0..3))
            } else {
                rng.random_range(-5.0..5.0)
            }
        };
        let train: Vec<Vec<f64>> = (0..n).map(|_| (0..v).map(|_| draw(&mut rng)).collect()).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let Ok(data) = FeatureMatrix::from_rows(&train, labels.clone(), names(v)) else { continue };
        // even k makes split votes possible
        let k = 2 * rng.random_range(1..=(n / 2).clamp(1, 10));
        let Ok(model) = fit_knn(&data, k) else { continue };
        for _ in 0..10 {
            let q: Vec<f64> = (0..v).map(|_| draw(&mut rng)).collect();
            let (p, c) = oracle_knn(&train, &labels, &q, k);
            if p == 0.5 {
                ties += 1;
            }
            if model.predict_proba(&q).unwrap() != p || model.predict(&q).unwrap() != c {
                mismatches += 1;
            }
            queries += 1;
        }
    }
    outcome(
        mismatches == 0 && ties > 0,
        format!("{mismatches} mismatches over {queries} queries ({ties} split votes)"),
    )
}

// 7 -------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    let mut mismatches = 0;
    for n in 2..=12usize {
        for mask in 0u32..(1 << n) {
            let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            if pos == 0 || pos == n {
                continue;
            }
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5)) / 4.0).collect();
            let mut wins = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        if scores[i] > scores[j] {
                            wins += 1.0;
                        } else if scores[i] == scores[j] {
                            wins += 0.5;
                        }
                    }
                }
            }
            let oracle = wins / (pos * (n - pos)) as f64;
            if auc_roc(&labels, &scores).unwrap() != oracle {
                mismatches += 1;
            }
            checked += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over {checked} instances"))
}

// 8 -------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let planted: Vec<String> = (1..=6).map(|j| format!("inf_{j}")).collect();
    let mut recovered = 0;
    let mut min_acc = f64::INFINITY;
    let mut notes = Vec::new();
    let mut ok = true;
    for seed in 1..=10u64 {
        let data = synth_dataset(1000, 6, 37, seed).expect("synth");
        let config = CascadeConfig {
            seed,
            ..Default::default()
        };
        let start = Instant::now();
        let result = single_threaded(|| run_cascade(&data, &config));
        let elapsed = start.elapsed();
        if elapsed >= Duration::from_secs(60) {
            ok = false;
            notes.push(format!("seed {seed} took {elapsed:?}"));
        }
        match result {
            Ok(report) => {
                let surviving = &report.stage2.trace.surviving;
                if planted.iter().all(|f| surviving.contains(f)) {
                    recovered += 1;
                    let acc = report.evaluation.metrics.accuracy;
                    min_acc = min_acc.min(acc);
                    if acc < 0.90 {
                        ok = false;
                        notes.push(format!("seed {seed} accuracy {acc:.4}"));
                    }
                } else {
                    notes.push(format!("seed {seed} kept {surviving:?}"));
                }
            }
            Err(e) => notes.push(format!("seed {seed}: {e}")),
        }
    }
    ok &= recovered >= 9;
    notes.insert(
        0,
        format!("{recovered}/10 seeds recover all planted features, lowest accuracy {min_acc:.4}"),
    );
    outcome(ok, notes.join("; "))
}

// 9 -------------------------------------------------------------------------

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_sli-cascade"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_default()
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = tmp.path();
    let data = dir.join("d.csv");
    let data_s = data.to_str().unwrap();
    if !run_cli(&["synth", "--n", "400", "--informative", "4", "--noise", "8", "--seed", "9", "--out", data_s]) {
        return outcome(false, "synth failed");
    }
    let mut dirs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "4")] {
        let out = dir.join(name);
        let ok = run_cli(&[
            "run", "--data", data_s, "--label", "group", "--seed", "7", "--n-trees", "200", "--threads", threads,
            "--out", out.to_str().unwrap(),
        ]);
        if !ok {
            return outcome(false, format!("run {name} failed"));
        }
        dirs.push(out);
    }
    let files = ["cascade_report.json", "evaluation.json", "roc_points.csv", "wald_table.txt"];
    let mut differing = Vec::new();
    for f in files {
        let base = read(&dirs[0], f);
        if base.is_empty() {
            differing.push(format!("{f} missing"));
        }
        for d in &dirs[1..] {
            if read(d, f) != base {
                differing.push(format!("{f} differs in {}", d.file_name().unwrap().to_string_lossy()));
            }
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            "repeat run and 1 vs 4 threads byte-identical".to_owned()
        } else {
            differing.join("; ")
        },
    )
}

// 10 ------------------------------------------------------------------------

fn criterion_10() -> Outcome {
    let data = synth_dataset(1063, 6, 37, 1063).expect("synth");
    let config = CascadeConfig {
        seed: 10,
        n_trees: 500,
        ..Default::default()
    };
    let start = Instant::now();
    let result = single_threaded(|| run_cascade(&data, &config));
    let elapsed = start.elapsed();
    match result {
        Ok(r) => outcome(
            elapsed < Duration::from_secs(30),
            format!("{elapsed:.2?} single-threaded, {} features kept", r.stage3.features.len()),
        ),
        Err(e) => outcome(false, format!("cascade failed: {e}")),
    }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "confusion-matrix arithmetic", criterion_1),
        (2, "Wald z and p reproduction", criterion_2),
        (3, "Spearman closed form and tie oracle", criterion_3),
        (4, "CART split vs exhaustive search", criterion_4),
        (5, "logistic gradient, intercept, score equations", criterion_5),
        (6, "k-NN vs exhaustive neighbour sort", criterion_6),
        (7, "rank AUC vs pair counting", criterion_7),
        (8, "end-to-end synthetic recovery", criterion_8),
        (9, "determinism across runs and threads", criterion_9),
        (10, "1063x43 cascade with 500 trees", criterion_10),
    ];
    let mut unexpected = 0;
    for (id, title, check) in criteria {
        let o = check();
        let known = KNOWN_UNATTAINABLE.iter().find(|(k, _)| *k == id);
        println!(
            "{} criterion {id:>2} ({title}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            match known {
                Some((_, why)) => println!("     known: {why}"),
                None => unexpected += 1,
            }
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} acceptance criteria failed");
        std::process::exit(1);
    }
}
