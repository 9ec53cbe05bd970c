//! Client-side local training and model evaluation.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{config_err, Error, Result};
use crate::model::Model;
use crate::rng::StreamRng;
use crate::vector::UpdateVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyper {
    pub global_rounds: usize,
    pub local_epochs: usize,
    pub global_lr: f64,
    pub local_lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `global_rounds` at which the local LR is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl Default for TrainingHyper {
    fn default() -> Self {
        Self {
            global_rounds: 100,
            local_epochs: 1,
            global_lr: 1.0,
            local_lr: 0.05,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.5, 0.8],
            gamma: 0.01,
        }
    }
}

impl TrainingHyper {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(config_err("local_epochs and batch_size must be positive"));
        }
        for (name, v) in [
            ("local_lr", self.local_lr),
            ("global_lr", self.global_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(config_err("momentum must be < 1"));
        }
        Ok(())
    }

    /// Local LR for 0-based round `t` under the multi-step schedule.
    pub fn lr_at(&self, t: usize) -> f64 {
        let drops = self
            .milestones
            .iter()
            .filter(|&&m| t >= (m * self.global_rounds as f64).round() as usize)
            .count();
        self.local_lr * self.gamma.powi(drops as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Honest,
    Adversary,
}

/// Per-client persistent state. Adversaries hold ids `0..f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub role: Role,
    pub indices: Vec<usize>,
    pub momentum: Vec<f64>,
}

impl ClientState {
    pub fn new(id: usize, adversaries: usize, indices: Vec<usize>) -> Self {
        Self {
            id,
            role: if id < adversaries {
                Role::Adversary
            } else {
                Role::Honest
            },
            indices,
            momentum: Vec::new(),
        }
    }

    pub fn is_adversary(&self) -> bool {
        self.role == Role::Adversary
    }
}

/// Points where an attack may intervene in local training. The default
/// implementation is honest training.
pub trait TrainHooks {
    fn batch(&mut self, batch: Batch, _step: usize, _rng: &mut StreamRng) -> Result<Batch> {
        Ok(batch)
    }

    /// Rewrites the data-loss gradient before weight decay and momentum.
    fn grad(&mut self, _grad: &mut [f64], _params: &[f64], _start: &[f64], _step: usize) {}

    fn after_step(&mut self, _params: &mut [f64], _start: &[f64], _step: usize) {}
}

pub struct Honest;

impl TrainHooks for Honest {}

/// Everything a client needs for one round of local training.
pub struct LocalJob<'a> {
    pub model: &'a Model,
    pub data: &'a Dataset,
    pub indices: &'a [usize],
    pub steps: usize,
    pub lr: f64,
    pub hyper: &'a TrainingHyper,
}

/// Runs `steps` mini-batch SGD steps from `job.model` and returns
/// `w_local - w_start`. The input model is left untouched; the momentum
/// buffer carries over between calls.
pub fn local_train(
    job: &LocalJob<'_>,
    momentum: &mut Vec<f64>,
    rng: &mut StreamRng,
    hooks: &mut dyn TrainHooks,
) -> Result<UpdateVector> {
    if job.indices.is_empty() {
        return Err(config_err("client has an empty partition"));
    }
    let start: &[f64] = &job.model.params;
    let d = start.len();
    if momentum.len() != d {
        *momentum = vec![0.0; d];
    }
    let mut w = start.to_vec();
    let bs = job.hyper.batch_size.min(job.indices.len());
    for step in 0..job.steps {
        let pick: Vec<usize> = sample_indices(rng, job.indices.len(), bs)
            .into_iter()
            .map(|k| job.indices[k])
            .collect();
        let batch = hooks.batch(job.data.batch(&pick), step, rng)?;
        let (_, mut g) = crate::model::loss_and_grad(&job.model.arch, &w, &batch, true);
        hooks.grad(&mut g, &w, start, step);
        let (mu, wd) = (job.hyper.momentum, job.hyper.weight_decay);
        for ((wi, gi), bi) in w.iter_mut().zip(&g).zip(momentum.iter_mut()) {
            let gt = gi + wd * *wi;
            *bi = mu * *bi + gt;
            *wi -= job.lr * *bi;
        }
        hooks.after_step(&mut w, start, step);
    }
    let delta: Vec<f64> = w.iter().zip(start).map(|(a, b)| a - b).collect();
    if delta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("local update"));
    }
    Ok(UpdateVector(delta))
}

/// Fraction of samples whose predicted class equals their label.
pub fn accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let correct = (0..ds.len())
        .filter(|&i| model.predict(ds.sample(i)) == ds.labels[i])
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Fraction of probe samples classified as `target`.
pub fn attack_success(model: &Model, probe: &Dataset, target: usize) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::EmptyInput("ASR probe set"));
    }
    let hits = (0..probe.len())
        .filter(|&i| model.predict(probe.sample(i)) == target)
        .count();
    Ok(hits as f64 / probe.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub acc: f64,
    pub asr: Option<f64>,
}

/// Clean accuracy, plus ASR when a probe set and target label are given.
pub fn evaluate(model: &Model, test: &Dataset, probe: Option<(&Dataset, usize)>) -> Result<Evaluation> {
    Ok(Evaluation {
        acc: accuracy(model, test)?,
        asr: probe
            .map(|(p, target)| attack_success(model, p, target))
            .transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::rng::stream;

    fn toy_data() -> Dataset {
        let feats = vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.5, 1.0, 1.0];
        Dataset::new(feats, vec![0, 1, 1, 0], 2, 2, None).unwrap()
    }

    #[test]
    fn schedule_drops_at_milestones() {
        let h = TrainingHyper {
            global_rounds: 10,
            local_lr: 1.0,
            ..Default::default()
        };
        assert_eq!(h.lr_at(0), 1.0);
        assert_eq!(h.lr_at(4), 1.0);
        assert!((h.lr_at(5) - 0.01).abs() < 1e-15);
        assert!((h.lr_at(7) - 0.01).abs() < 1e-15);
        assert!((h.lr_at(8) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_lr_gives_zero_update() {
        let ds = toy_data();
        let arch = Architecture::Logistic {
            inputs: 2,
            classes: 2,
        };
        let model = Model::init(arch, &mut stream(0, "init", 0, 0));
        let hyper = TrainingHyper::default();
        let job = LocalJob {
            model: &model,
            data: &ds,
            indices: &[0, 1, 2, 3],
            steps: 3,
            lr: 0.0,
            hyper: &hyper,
        };
        let d = local_train(&job, &mut Vec::new(), &mut stream(0, "t", 0, 0), &mut Honest).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    /// Softmax-regression gradient written independently of the model code.
    fn logistic_grad_oracle(w: &[f64], ds: &Dataset, classes: usize) -> Vec<f64> {
        let dim = ds.dim;
        let mut g = vec![0.0; w.len()];
        for i in 0..ds.len() {
            let x = ds.sample(i);
            let z: Vec<f64> = (0..classes)
                .map(|k| w[classes * dim + k] + (0..dim).map(|j| w[k * dim + j] * x[j]).sum::<f64>())
                .collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            for k in 0..classes {
                let p = z[k].exp() / denom;
                let err = p - if ds.labels[i] == k { 1.0 } else { 0.0 };
                for j in 0..dim {
                    g[k * dim + j] += err * x[j] / ds.len() as f64;
                }
                g[classes * dim + k] += err / ds.len() as f64;
            }
        }
        g
    }

    #[test]
    fn one_full_batch_step_is_minus_lr_times_gradient() {
        let ds = toy_data();
        let arch = Architecture::Logistic {
            inputs: 2,
            classes: 2,
        };
        let model = Model::init(arch, &mut stream(3, "init", 0, 0));
        let hyper = TrainingHyper {
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 4,
            ..Default::default()
        };
        let lr = 0.3;
        let job = LocalJob {
            model: &model,
            data: &ds,
            indices: &[0, 1, 2, 3],
            steps: 1,
            lr,
            hyper: &hyper,
        };
        let d = local_train(&job, &mut Vec::new(), &mut stream(0, "t", 0, 0), &mut Honest).unwrap();
        let g = logistic_grad_oracle(&model.params, &ds, 2);
        for (di, gi) in d.iter().zip(&g) {
            assert!((di + lr * gi).abs() < 1e-12, "{di} vs {}", -lr * gi);
        }
    }

    #[test]
    fn momentum_and_weight_decay_follow_sgd_recurrence() {
        let ds = toy_data();
        let arch = Architecture::Logistic {
            inputs: 2,
            classes: 2,
        };
        let model = Model::init(arch, &mut stream(4, "init", 0, 0));
        let hyper = TrainingHyper {
            batch_size: 4,
            ..Default::default()
        };
        let lr = 0.1;
        let job = LocalJob {
            model: &model,
            data: &ds,
            indices: &[0, 1, 2, 3],
            steps: 2,
            lr,
            hyper: &hyper,
        };
        let mut buf = Vec::new();
        let d = local_train(&job, &mut buf, &mut stream(0, "t", 0, 0), &mut Honest).unwrap();
        // replay two steps by hand
        let mut w = model.params.to_vec();
        let mut b = vec![0.0; w.len()];
        for _ in 0..2 {
            let g = logistic_grad_oracle(&w, &ds, 2);
            for i in 0..w.len() {
                b[i] = 0.9 * b[i] + g[i] + 5e-4 * w[i];
                w[i] -= lr * b[i];
            }
        }
        for i in 0..w.len() {
            assert!((d[i] - (w[i] - model.params[i])).abs() < 1e-12);
            assert!((buf[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_input_untouched() {
        let ds = toy_data();
        let arch = Architecture::Mlp {
            inputs: 2,
            hidden: 4,
            classes: 2,
        };
        let model = Model::init(arch, &mut stream(5, "init", 0, 0));
        let before = model.clone();
        let hyper = TrainingHyper {
            batch_size: 2,
            ..Default::default()
        };
        let job = LocalJob {
            model: &model,
            data: &ds,
            indices: &[0, 1, 2, 3],
            steps: 4,
            lr: 0.1,
            hyper: &hyper,
        };
        let run = || local_train(&job, &mut Vec::new(), &mut stream(9, "t", 1, 2), &mut Honest).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(model, before);
    }

    #[test]
    fn empty_partition_is_config_error() {
        let ds = toy_data();
        let model = Model::init(
            Architecture::Logistic {
                inputs: 2,
                classes: 2,
            },
            &mut stream(0, "i", 0, 0),
        );
        let hyper = TrainingHyper::default();
        let job = LocalJob {
            model: &model,
            data: &ds,
            indices: &[],
            steps: 1,
            lr: 0.1,
            hyper: &hyper,
        };
        assert!(matches!(
            local_train(&job, &mut Vec::new(), &mut stream(0, "t", 0, 0), &mut Honest),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn accuracy_and_asr_extremes() {
        let ds = toy_data();
        // weights favour class 1 for every input via bias
        let m = Model::new(
            Architecture::Logistic {
                inputs: 2,
                classes: 2,
            },
            UpdateVector(vec![0.0, 0.0, 0.0, 0.0, 0.0, 5.0]),
        )
        .unwrap();
        let e = evaluate(&m, &ds, Some((&ds, 1))).unwrap();
        assert_eq!(e.acc, 0.5);
        assert_eq!(e.asr, Some(1.0));
        let perfect = Dataset::new(ds.features.clone(), vec![1; 4], 2, 2, None).unwrap();
        assert_eq!(accuracy(&m, &perfect).unwrap(), 1.0);
        assert!(accuracy(&m, &Dataset::new(vec![], vec![], 2, 2, None).unwrap()).is_err());
    }
}
