//! Experiment orchestration: data, federation, evaluation schedule, outputs.

use std::fs::File;
use std::hint::black_box;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use super::config::{DataSource, ExperimentConfig};
use super::metrics::{append_summary, tail_mean, tdr, tai, MetricsRecord, SummaryRow};
use crate::data::{load_mnist, partition, Dataset, PartitionSpec, MNIST_DIR_ENV};
use crate::defenses::{Defense, ServerContext};
use crate::error::{config_err, Error, Result};
use crate::fl::{Federation, FederationSetup, RoundSubmission};
use crate::model::Model;
use crate::rng::stream;
use crate::vector::{median, UpdateVector};

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Blobs(spec) => spec.generate(cfg.seed),
        DataSource::Mnist { dir, train, test } => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => std::env::var_os(MNIST_DIR_ENV)
                    .map(PathBuf::from)
                    .ok_or_else(|| config_err(format!("data.source = mnist needs data.dir or ${MNIST_DIR_ENV}")))?,
            };
            load_mnist(&dir, *train, *test)
        }
    }
}

/// Sample indices per client, plus the server's root set when the rule needs one.
pub type ClientSplit = (Vec<Vec<usize>>, Option<Vec<usize>>);

/// Client partitions and, for rules that need one, a disjoint server root set.
pub fn split_clients(cfg: &ExperimentConfig, train: &Dataset) -> Result<ClientSplit> {
    let spec = PartitionSpec {
        mode: cfg.partition,
        clients: cfg.n,
    };
    let mut rng = stream(cfg.seed, "partition", 0, 0);
    if !cfg.needs_root() {
        return Ok((partition(train, &spec, &mut rng)?, None));
    }
    if cfg.root_size == 0 || cfg.root_size >= train.len() {
        return Err(config_err(format!(
            "root.size {} must be in 1..{}",
            cfg.root_size,
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut stream(cfg.seed, "root", 0, 0));
    let (root, rest) = order.split_at(cfg.root_size);
    let parts = partition(&train.subset(rest), &spec, &mut rng)?
        .into_iter()
        .map(|p| p.into_iter().map(|i| rest[i]).collect())
        .collect();
    Ok((parts, Some(root.to_vec())))
}

pub fn build_federation(cfg: &ExperimentConfig, train: Dataset) -> Result<Federation> {
    let (partitions, root) = split_clients(cfg, &train)?;
    let arch = cfg.model.architecture(train.dim, train.classes);
    Federation::new(FederationSetup {
        algorithm: cfg.algorithm,
        hyper: cfg.hyper.clone(),
        seed: cfg.seed,
        global: Model::init(arch, &mut stream(cfg.seed, "model/init", 0, 0)),
        train,
        partitions,
        adversaries: cfg.f,
        root,
        defense: cfg.build_defense()?,
        attack: cfg.build_attack()?,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub records: Vec<MetricsRecord>,
    pub summary: SummaryRow,
    /// Clean accuracy used for TAI/TDR, when they apply.
    pub clean_acc: Option<f64>,
    pub final_model: Model,
}

fn record(fed: &Federation, test: &Dataset, probe: Option<(&Dataset, usize)>, sub: &RoundSubmission) -> Result<MetricsRecord> {
    let e = fed.evaluate(test, probe)?;
    let r = MetricsRecord {
        round: sub.round + 1,
        acc: e.acc,
        asr: e.asr,
        agg_seconds: sub.agg_seconds,
        survivors: sub.aggregate.survivors.as_ref().map(Vec::len),
        fallback: sub.aggregate.fallback,
        warning: sub.warning.clone(),
        error: None,
    };
    r.check()?;
    Ok(r)
}

/// Runs the experiment, handing each evaluation record to `sink` as soon as
/// it exists. On a failed round the sink receives a final record carrying
/// the error before the error is returned.
pub fn run_experiment_with(cfg: &ExperimentConfig, sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let mut fed = build_federation(cfg, train)?;
    let probe = match fed.attack() {
        Some(a) => a.probe(&test, cfg.seed)?,
        None => None,
    };
    let probe_ref = probe.as_ref().map(|(d, t)| (d, *t));
    let mut records = Vec::new();
    let mut agg_times = Vec::new();
    let rounds = cfg.hyper.global_rounds;
    for t in 0..rounds {
        let sub = match fed.run_round() {
            Ok(s) => s,
            Err(e) => {
                let at = fed.evaluate(&test, probe_ref).ok();
                let diag = MetricsRecord {
                    round: t,
                    acc: at.map_or(0.0, |e| e.acc),
                    asr: at.and_then(|e| e.asr),
                    agg_seconds: 0.0,
                    survivors: None,
                    fallback: false,
                    warning: None,
                    error: Some(e.to_string()),
                };
                sink(&diag)?;
                return Err(Error::Diverged {
                    round: t,
                    detail: e.to_string(),
                });
            }
        };
        agg_times.push(sub.agg_seconds);
        if (t + 1) % cfg.eval_interval == 0 || t + 1 == rounds {
            let r = record(&fed, &test, probe_ref, &sub)?;
            sink(&r)?;
            records.push(r);
        }
    }

    let accs: Vec<f64> = records.iter().map(|r| r.acc).collect();
    let asrs: Vec<f64> = records.iter().filter_map(|r| r.asr).collect();
    let final_acc = tail_mean(&accs, cfg.summary_window).unwrap_or(0.0);
    let final_asr = tail_mean(&asrs, cfg.summary_window);
    let clean_acc = match (final_asr, cfg.clean_acc) {
        (None, _) => None,
        (Some(_), Some(c)) => Some(c),
        (Some(_), None) => Some(run_experiment(&cfg.clean_twin())?.summary.final_acc),
    };
    let (tai_v, tdr_v) = match (final_asr, clean_acc) {
        (Some(asr), Some(c)) => (Some(tai(final_acc, c, asr)?), Some(tdr(final_acc, c, asr)?)),
        _ => (None, None),
    };
    let summary = SummaryRow {
        config_hash: cfg.hash(),
        attack: cfg.attack.clone().unwrap_or_else(|| "none".into()),
        defense: fed.defense().name().to_string(),
        algorithm: cfg.algorithm.name().to_string(),
        partition: cfg.partition_name(),
        final_acc,
        final_asr,
        tai: tai_v,
        tdr: tdr_v,
        agg_time: median(&agg_times),
    };
    Ok(ExperimentReport {
        records,
        summary,
        clean_acc,
        final_model: fed.global.clone(),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(cfg, &mut |_| Ok(()))
}

/// Runs `cfg` writing `rounds.jsonl` and `timing.jsonl` into `dir` and
/// appending the summary row to `summary`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path, summary: &Path) -> Result<ExperimentReport> {
    std::fs::create_dir_all(dir)?;
    let mut rounds = BufWriter::new(File::create(dir.join("rounds.jsonl"))?);
    let mut timing = BufWriter::new(File::create(dir.join("timing.jsonl"))?);
    let result = run_experiment_with(cfg, &mut |r| {
        serde_json::to_writer(&mut rounds, r)?;
        rounds.write_all(b"\n")?;
        writeln!(timing, "{{\"round\":{},\"agg_seconds\":{:e}}}", r.round, r.agg_seconds)?;
        Ok(())
    });
    rounds.flush()?;
    timing.flush()?;
    let report = result?;
    if let Some(parent) = summary.parent() {
        std::fs::create_dir_all(parent)?;
    }
    append_summary(summary, &report.summary)?;
    Ok(report)
}

/// Median wall time of 10 calls to `defense.aggregate`, after one untimed
/// warm-up call.
pub fn time_aggregation(defense: &dyn Defense, subs: &[UpdateVector], ctx: &ServerContext<'_>) -> Result<f64> {
    black_box(defense.aggregate(subs, ctx)?);
    let mut times = Vec::with_capacity(10);
    for _ in 0..10 {
        let start = Instant::now();
        black_box(defense.aggregate(black_box(subs), ctx)?);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&times))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defenses::build_defense;
    use crate::params::Params;

    /// Small blobs run; keys in `extra` override the base ones.
    fn quick(extra: &str) -> ExperimentConfig {
        let base = "data.train = 300\ndata.test = 100\ntrain.rounds = 6\neval.interval = 2\nclients = 5\nadversaries = 1";
        let mut p = crate::harness::parse_pairs(base).unwrap();
        for (k, v) in crate::harness::parse_pairs(extra).unwrap().iter() {
            p.insert(k, v);
        }
        ExperimentConfig::from_params(p).unwrap()
    }

    #[test]
    fn evaluates_on_the_interval_and_at_the_end() {
        let cfg = quick("train.rounds = 7");
        let r = run_experiment(&cfg).unwrap();
        let rounds: Vec<usize> = r.records.iter().map(|m| m.round).collect();
        assert_eq!(rounds, vec![2, 4, 6, 7]);
        assert!(r.records.iter().all(|m| m.asr.is_none()));
        assert_eq!(r.summary.attack, "none");
        assert_eq!(r.summary.tai, None);
    }

    #[test]
    fn targeted_runs_get_tai_and_tdr() {
        let cfg = quick("attack.name = badnets");
        let r = run_experiment(&cfg).unwrap();
        let clean = r.clean_acc.unwrap();
        let asr = r.summary.final_asr.unwrap();
        let want = r.summary.final_acc / clean + asr;
        assert!((r.summary.tai.unwrap() - want).abs() < 1e-12);
        assert!((r.summary.tdr.unwrap() - (want - 2.0 * asr + 1.0)).abs() < 1e-12);
        let twin = run_experiment(&cfg.clean_twin()).unwrap();
        assert_eq!(clean, twin.summary.final_acc);
    }

    #[test]
    fn summary_is_mean_of_last_window() {
        let cfg = quick("train.rounds = 8\neval.interval = 1\neval.window = 3");
        let r = run_experiment(&cfg).unwrap();
        let last: Vec<f64> = r.records[5..].iter().map(|m| m.acc).collect();
        assert!((r.summary.final_acc - last.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn root_data_is_disjoint_from_clients() {
        let cfg = quick("defense.name = fltrust\nroot.size = 40");
        let (train, _) = load_data(&cfg).unwrap();
        let (parts, root) = split_clients(&cfg, &train).unwrap();
        let root = root.unwrap();
        assert_eq!(root.len(), 40);
        let mut all: Vec<usize> = parts.concat();
        assert_eq!(all.len() + 40, train.len());
        all.extend(&root);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), train.len());
        run_experiment(&cfg).unwrap();
    }

    #[test]
    fn files_are_written_and_reruns_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick("attack.name = alie\ndefense.name = median");
        let summary = dir.path().join("summary.csv");
        run_to_dir(&cfg, &dir.path().join("a"), &summary).unwrap();
        run_to_dir(&cfg, &dir.path().join("b"), &summary).unwrap();
        let a = std::fs::read(dir.path().join("a/rounds.jsonl")).unwrap();
        let b = std::fs::read(dir.path().join("b/rounds.jsonl")).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
        let lines = String::from_utf8(a).unwrap();
        assert_eq!(lines.lines().count(), 3);
        for l in lines.lines() {
            let r: MetricsRecord = serde_json::from_str(l).unwrap();
            r.check().unwrap();
        }
        let csv = std::fs::read_to_string(&summary).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(dir.path().join("a/timing.jsonl").exists());
    }

    #[test]
    fn divergence_leaves_a_diagnostic_record() {
        let cfg = quick("attack.name = gaussian\nattack.params.sigma = 1e308\nadversaries = 2");
        let mut seen = Vec::new();
        let err = run_experiment_with(&cfg, &mut |r| {
            seen.push(r.clone());
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        let last = seen.last().unwrap();
        assert!(last.error.is_some());
    }

    #[test]
    fn timing_is_median_of_positive_samples() {
        let subs: Vec<UpdateVector> = (0..20).map(|i| UpdateVector(vec![i as f64; 500])).collect();
        let d = build_defense("median", Params::new(), 0).unwrap();
        let t = time_aggregation(d.as_ref(), &subs, &ServerContext::bare(0, 0)).unwrap();
        assert!(t > 0.0 && t.is_finite());
    }
}
