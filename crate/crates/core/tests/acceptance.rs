//! Acceptance gate. Every criterion runs in one test function so the
//! runtime budgets are measured without other tests competing for the CPU.
//! Each criterion prints a PASS/FAIL line to stderr (outside libtest's
//! capture) and the test fails if any criterion fails.

use std::io::Write;
use std::time::{Duration, Instant};

use flbench::attacks::attack_names;
use flbench::data::Batch;
use flbench::defenses::{build_defense, defense_names, Defense, ServerContext};
use flbench::harness::{parse_pairs, run_experiment, run_to_dir, tai, tdr, time_aggregation, ExperimentConfig, ExperimentReport};
use flbench::model::{Architecture, Model};
use flbench::params::Params;
use flbench::rng::stream;
use flbench::vector::UpdateVector;
use rand::Rng;
use rand_distr::StandardNormal;

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

fn within(budget: Duration, started: Instant) -> (bool, String) {
    let took = started.elapsed();
    (took < budget, format!("{:.1}s of {}s", took.as_secs_f64(), budget.as_secs()))
}

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_params(parse_pairs(text).unwrap()).unwrap()
}

fn run(text: &str) -> ExperimentReport {
    run_experiment(&config(text)).unwrap()
}

fn clean_acc(text: &str) -> f64 {
    run_experiment(&config(text).clean_twin()).unwrap().summary.final_acc
}

fn gaussian_batch(rng: &mut impl Rng, n: usize, d: usize) -> Vec<UpdateVector> {
    (0..n)
        .map(|_| UpdateVector((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()))
        .collect()
}

// ---- brute-force aggregator oracles ----

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(vs: &[&[f64]]) -> Vec<f64> {
    let d = vs[0].len();
    (0..d).map(|j| vs.iter().map(|v| v[j]).sum::<f64>() / vs.len() as f64).collect()
}

fn sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs
}

/// Score of `i` within `pool`: sum of the `k` smallest squared distances to
/// the other pool members, by full sort.
fn oracle_score(vs: &[UpdateVector], pool: &[usize], i: usize, k: usize) -> f64 {
    let ds = sorted(pool.iter().filter(|&&j| j != i).map(|&j| sq_dist(&vs[i], &vs[j])).collect());
    ds.iter().take(k).sum()
}

fn oracle_krum_order(vs: &[UpdateVector], f: usize) -> Vec<usize> {
    let n = vs.len();
    let pool: Vec<usize> = (0..n).collect();
    let scores: Vec<f64> = (0..n).map(|i| oracle_score(vs, &pool, i, n - f - 2)).collect();
    let mut order = pool;
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    order
}

fn oracle_krum(vs: &[UpdateVector], f: usize) -> Vec<f64> {
    vs[oracle_krum_order(vs, f)[0]].0.clone()
}

fn oracle_multikrum(vs: &[UpdateVector], f: usize) -> Vec<f64> {
    let order = oracle_krum_order(vs, f);
    let chosen: Vec<&[f64]> = order[..vs.len() - f].iter().map(|&i| vs[i].0.as_slice()).collect();
    mean_of(&chosen)
}

fn column(vs: &[UpdateVector], j: usize) -> Vec<f64> {
    vs.iter().map(|v| v[j]).collect()
}

fn median_sorted(s: &[f64]) -> f64 {
    let m = s.len();
    if m % 2 == 1 {
        s[m / 2]
    } else {
        (s[m / 2 - 1] + s[m / 2]) / 2.0
    }
}

fn oracle_median(vs: &[UpdateVector]) -> Vec<f64> {
    (0..vs[0].len()).map(|j| median_sorted(&sorted(column(vs, j)))).collect()
}

fn oracle_trimmed(vs: &[UpdateVector], k: usize) -> Vec<f64> {
    let n = vs.len();
    (0..vs[0].len())
        .map(|j| {
            let s = sorted(column(vs, j));
            s[k..n - k].iter().sum::<f64>() / (n - 2 * k) as f64
        })
        .collect()
}

fn oracle_bulyan(vs: &[UpdateVector], f: usize) -> Vec<f64> {
    let n = vs.len();
    let mut pool: Vec<usize> = (0..n).collect();
    let mut selected = Vec::new();
    while selected.len() < n - 2 * f {
        let k = pool.len().saturating_sub(f + 2).max(1);
        let best = *pool
            .iter()
            .min_by(|&&a, &&b| {
                oracle_score(vs, &pool, a, k)
                    .partial_cmp(&oracle_score(vs, &pool, b, k))
                    .unwrap()
                    .then(a.cmp(&b))
            })
            .unwrap();
        pool.retain(|&i| i != best);
        selected.push(best);
    }
    let picked: Vec<UpdateVector> = selected.iter().map(|&i| vs[i].clone()).collect();
    let beta = selected.len() - 2 * f;
    (0..vs[0].len())
        .map(|j| {
            let col = column(&picked, j);
            let med = median_sorted(&sorted(col.clone()));
            let mut by_gap = col;
            by_gap.sort_by(|a, b| (a - med).abs().partial_cmp(&(b - med).abs()).unwrap());
            by_gap[..beta].iter().sum::<f64>() / beta as f64
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn aggregator_oracles() -> Outcome {
    let started = Instant::now();
    let ctx = ServerContext::bare(0, 0);
    let mut worst = 0.0_f64;
    let mut mismatches = Vec::new();
    let rules = ["krum", "multikrum", "median", "trimmedmean", "bulyan"];
    for (r, rule) in rules.iter().enumerate() {
        let mut rng = stream(2024, "acceptance/oracles", r as u64, 0);
        for case in 0..200 {
            let d = rng.random_range(1..=4);
            let (n, f, beta) = match *rule {
                "krum" | "multikrum" => {
                    let n = rng.random_range(3..=9);
                    (n, rng.random_range(0..=(n - 3) / 2), 0.0)
                }
                "bulyan" => {
                    let n = rng.random_range(3..=9);
                    (n, rng.random_range(0..=(n - 3) / 4), 0.0)
                }
                _ => (rng.random_range(1..=9), 0, rng.random_range(0.0..0.5)),
            };
            let vs = gaussian_batch(&mut rng, n, d);
            let mut params = Params::new();
            if *rule == "trimmedmean" {
                params.insert("beta", beta.to_string());
            }
            let defense = build_defense(rule, params, f).unwrap();
            let got = defense.aggregate(&vs, &ctx).unwrap().vector;
            let want = match *rule {
                "krum" => oracle_krum(&vs, f),
                "multikrum" => oracle_multikrum(&vs, f),
                "median" => oracle_median(&vs),
                "trimmedmean" => {
                    let k = (beta * n as f64 + 1e-9).floor() as usize;
                    if 2 * k >= n {
                        continue;
                    }
                    oracle_trimmed(&vs, k)
                }
                _ => oracle_bulyan(&vs, f),
            };
            let err = max_abs_diff(&got, &want);
            worst = worst.max(err);
            if err > 1e-9 {
                mismatches.push(format!("{rule}#{case}"));
            }
        }
    }
    let (fast, t) = within(Duration::from_secs(10), started);
    outcome(
        mismatches.is_empty() && fast,
        format!("5 rules x 200 instances, max |diff| {worst:.1e}, mismatches {mismatches:?}, {t}"),
    )
}

fn gradient_check() -> Outcome {
    let arch = Architecture::Mlp {
        inputs: 20,
        hidden: 16,
        classes: 5,
    };
    let mut rng = stream(7, "acceptance/gradcheck", 0, 0);
    let model = Model::init(arch, &mut rng);
    let samples = 8;
    let batch = Batch {
        features: (0..samples * 20).map(|_| rng.random_range(0.0..1.0)).collect(),
        labels: (0..samples).map(|_| rng.random_range(0..5)).collect(),
        dim: 20,
        image: None,
    };
    let (_, grad) = model.loss_and_grad(&batch);
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let i = rng.random_range(0..arch.param_count());
        let mut plus = model.clone();
        plus.params.0[i] += h;
        let mut minus = model.clone();
        minus.params.0[i] -= h;
        let numeric = (plus.loss(&batch) - minus.loss(&batch)) / (2.0 * h);
        let scale = grad[i].abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { (grad[i] - numeric).abs() / scale };
        worst = worst.max(rel);
    }
    outcome(worst < 1e-4, format!("100 coordinates, max relative error {worst:.2e}"))
}

fn clean_baseline() -> Outcome {
    let started = Instant::now();
    let sgd = run("algorithm = fedsgd\nclients = 10\nadversaries = 0\ntrain.rounds = 100").summary.final_acc;
    let opt = run("algorithm = fedopt\nclients = 10\nadversaries = 0\ntrain.rounds = 100\ntrain.local_epochs = 5")
        .summary
        .final_acc;
    let (fast, t) = within(Duration::from_secs(120), started);
    outcome(
        sgd >= 0.95 && (sgd - opt).abs() <= 0.02 && fast,
        format!("FedSGD {sgd:.4}, FedOpt {opt:.4}, {t}"),
    )
}

fn mpa_direction() -> Outcome {
    let started = Instant::now();
    let mut good = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let base = format!("clients = 25\nadversaries = 12\nattack.name = signflipping\nseed = {seed}");
        let clean = clean_acc(&base);
        let acc = |defense: &str| run(&format!("{base}\ndefense.name = {defense}")).summary.final_acc;
        let (mean, median, fltrust) = (acc("mean"), acc("median"), acc("fltrust"));
        let ok = clean - mean >= 0.25 && clean - median <= 0.10 && clean - fltrust <= 0.10;
        good += ok as usize;
        rows.push(format!("s{seed}: clean {clean:.3} mean {mean:.3} median {median:.3} fltrust {fltrust:.3}"));
    }
    let (fast, t) = within(Duration::from_secs(600), started);
    outcome(good >= 4 && fast, format!("{good}/5 seeds [{}], {t}", rows.join("; ")))
}

fn dpa_direction() -> Outcome {
    let started = Instant::now();
    let mut good = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let base = format!("clients = 10\nadversaries = 2\nattack.name = badnets\npoison.ratio = 0.3125\nseed = {seed}");
        let mean = run(&format!("{base}\ndefense.name = mean"));
        let clean = mean.clean_acc.unwrap();
        let krum = run(&format!("{base}\ndefense.name = krum\nbaseline.acc = {clean}"));
        let (m_acc, m_asr) = (mean.summary.final_acc, mean.summary.final_asr.unwrap());
        let k_asr = krum.summary.final_asr.unwrap();
        let ok = m_asr >= 0.7 && clean - m_acc <= 0.05 && k_asr <= 0.25;
        good += ok as usize;
        rows.push(format!("s{seed}: mean asr {m_asr:.3} acc {m_acc:.3} (clean {clean:.3}) krum asr {k_asr:.3}"));
    }
    let (fast, t) = within(Duration::from_secs(600), started);
    outcome(good >= 4 && fast, format!("{good}/5 seeds [{}], {t}", rows.join("; ")))
}

fn algorithm_asymmetry() -> Outcome {
    let mut pass = true;
    let mut rows = Vec::new();
    for attack in ["ipm", "signflipping"] {
        let mut degradation = [0.0; 2];
        for (k, algorithm) in ["fedsgd", "fedopt"].iter().enumerate() {
            for seed in 0..3 {
                let base = format!(
                    "algorithm = {algorithm}\nclients = 10\nadversaries = 3\ndefense.name = trimmedmean\nattack.name = {attack}\nseed = {seed}"
                );
                degradation[k] += (clean_acc(&base) - run(&base).summary.final_acc) / 3.0;
            }
        }
        pass &= degradation[0] >= degradation[1];
        rows.push(format!("{attack}: FedSGD {:.3} vs FedOpt {:.3}", degradation[0], degradation[1]));
    }
    outcome(pass, format!("mean ACC degradation over 3 seeds, {}", rows.join("; ")))
}

fn ratio_monotonicity() -> Outcome {
    let mut pass = true;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let accs: Vec<f64> = [5, 10, 24]
            .iter()
            .map(|f| {
                run(&format!("clients = 50\nadversaries = {f}\nattack.name = signflipping\nseed = {seed}"))
                    .summary
                    .final_acc
            })
            .collect();
        pass &= accs.windows(2).all(|w| w[0] >= w[1]);
        rows.push(format!("s{seed}: {:.3} {:.3} {:.3}", accs[0], accs[1], accs[2]));
    }
    outcome(pass, format!("ratios 0.1/0.2/0.48 [{}]", rows.join("; ")))
}

fn metric_formulas() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let pass = close(tdr(0.9, 0.9, 0.0).unwrap(), 2.0)
        && close(tdr(0.72, 0.9, 0.2).unwrap(), 1.6)
        && close(tai(0.9, 0.9, 1.0).unwrap(), 2.0)
        && close(tai(0.45, 0.9, 0.0).unwrap(), 0.5)
        && tai(0.5, 0.0, 0.1).is_err()
        && tdr(0.5, 0.0, 0.1).is_err();
    outcome(pass, "TDR optimum 2.0, worked values, undefined at zero clean accuracy")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut checked = Vec::new();
    let cases = [
        "attack.name = alie\ndefense.name = flame\nclients = 10\nadversaries = 2",
        "attack.name = dba\ndefense.name = crfl\nclients = 10\nadversaries = 2\nmodel = mlp\nalgorithm = fedopt",
        "attack.name = minmax\ndefense.name = bucketing\npartition = dirichlet\nclients = 10\nadversaries = 2\nalgorithm = fedavg",
    ];
    for (k, case) in cases.iter().enumerate() {
        let cfg = config(&format!("{case}\ntrain.rounds = 20\nseed = 11"));
        let read = |run: &str| {
            let out = dir.path().join(format!("{k}-{run}"));
            run_to_dir(&cfg, &out, &out.join("summary.csv")).unwrap();
            std::fs::read(out.join("rounds.jsonl")).unwrap()
        };
        let (a, b) = (read("a"), read("b"));
        pass &= !a.is_empty() && a == b;
        checked.push(format!("{} bytes", a.len()));
    }
    outcome(pass, format!("3 configs rerun, rounds.jsonl identical ({})", checked.join(", ")))
}

fn full_matrix_smoke() -> Outcome {
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut runs = 0;
    for attack in attack_names() {
        for defense in defense_names() {
            for algorithm in ["fedsgd", "fedopt"] {
                runs += 1;
                let text = format!(
                    "algorithm = {algorithm}\nattack.name = {attack}\ndefense.name = {defense}\nclients = 10\nadversaries = 1\ntrain.rounds = 3\neval.interval = 1"
                );
                match run_experiment(&config(&text)) {
                    Ok(r) if r.final_model.params.is_finite() => {}
                    Ok(_) => failures.push(format!("{attack}/{defense}/{algorithm}: non-finite model")),
                    Err(e) => failures.push(format!("{attack}/{defense}/{algorithm}: {e}")),
                }
            }
        }
    }
    let (fast, t) = within(Duration::from_secs(900), started);
    outcome(
        runs == 15 * 18 * 2 && failures.is_empty() && fast,
        format!("{runs} runs, failures {failures:?}, {t}"),
    )
}

fn complexity_ordering() -> Outcome {
    let (n, d, f) = (100, 10_000, 24);
    let mut rng = stream(3, "acceptance/timing", 0, 0);
    let subs = gaussian_batch(&mut rng, n, d);
    let ctx = ServerContext::bare(0, 3);
    let time = |name: &str| {
        let rule: Box<dyn Defense> = build_defense(name, Params::new(), f).unwrap();
        time_aggregation(rule.as_ref(), &subs, &ctx).unwrap()
    };
    let (median, krum, bulyan) = (time("median"), time("krum"), time("bulyan"));
    outcome(
        median < krum && krum < bulyan,
        format!("n={n} d={d} f={f}: median {median:.2e}s, krum {krum:.2e}s, bulyan {bulyan:.2e}s"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 11] = [
        ("aggregator oracles", aggregator_oracles),
        ("MLP gradient check", gradient_check),
        ("clean baseline", clean_baseline),
        ("MPA direction", mpa_direction),
        ("DPA direction", dpa_direction),
        ("FedSGD vs FedOpt asymmetry", algorithm_asymmetry),
        ("adversary-ratio monotonicity", ratio_monotonicity),
        ("TAI/TDR formulas", metric_formulas),
        ("determinism", determinism),
        ("full-matrix smoke", full_matrix_smoke),
        ("complexity ordering", complexity_ordering),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        writeln!(err, "criterion {:>2} {verdict} {name}: {}", i + 1, o.detail).unwrap();
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
