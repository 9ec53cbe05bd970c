//! FedSGD, FedAvg and FedOpt: one server, `n` simulated clients, and the
//! round protocol tying local training, attacks and aggregation together.
//!
//! Client `i` trains on `stream(seed, "train", i, round)`, so results do not
//! depend on how rayon schedules the clients. Submissions are always ordered
//! by client id before the defense sees them.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{craft_round, Attack, HookEnv};
use crate::data::Dataset;
use crate::defenses::{aggregate_checked, crfl_smoothed_predict, Aggregate, Defense, ServerContext};
use crate::error::{config_err, Error, Result};
use crate::model::Model;
use crate::registry::lookup;
use crate::rng::stream;
use crate::train::{local_train, ClientState, Evaluation, Honest, LocalJob, TrainHooks, TrainingHyper};
use crate::vector::{median, UpdateVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    FedSgd,
    FedAvg,
    FedOpt,
}

pub static ALGORITHMS: &[(&str, Algorithm)] = &[
    ("fedsgd", Algorithm::FedSgd),
    ("fedavg", Algorithm::FedAvg),
    ("fedopt", Algorithm::FedOpt),
];

pub fn algorithm_names() -> Vec<&'static str> {
    ALGORITHMS.iter().map(|(n, _)| *n).collect()
}

impl Algorithm {
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(*lookup("algorithm", name, ALGORITHMS)?)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedSgd => "fedsgd",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedOpt => "fedopt",
        }
    }

    /// Local SGD steps per round; FedSGD always takes exactly one.
    pub fn local_steps(self, hyper: &TrainingHyper) -> usize {
        match self {
            Algorithm::FedSgd => 1,
            Algorithm::FedAvg | Algorithm::FedOpt => hyper.local_epochs,
        }
    }

    /// Server learning rate. Only FedOpt honours `global_lr`.
    pub fn server_lr(self, hyper: &TrainingHyper) -> f64 {
        match self {
            Algorithm::FedSgd | Algorithm::FedAvg => 1.0,
            Algorithm::FedOpt => hyper.global_lr,
        }
    }
}

/// What the server received and decided in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSubmission {
    pub round: usize,
    /// Post-attack submissions in client-id order, as `w_i - w`. Under FedAvg
    /// the client sends `w_i`; the server subtracts the global model it
    /// broadcast before running the rule.
    pub updates: Vec<UpdateVector>,
    pub aggregate: Aggregate,
    /// Wall time of the aggregation call alone.
    pub agg_seconds: f64,
    pub warning: Option<String>,
}

/// Inputs for [`Federation::new`].
#[derive(Debug)]
pub struct FederationSetup {
    pub algorithm: Algorithm,
    pub hyper: TrainingHyper,
    pub seed: u64,
    pub global: Model,
    pub train: Dataset,
    /// Sample indices of client `i`; the first `adversaries` are malicious.
    pub partitions: Vec<Vec<usize>>,
    pub adversaries: usize,
    /// Server root data, disjoint from every partition. Required by FLTrust.
    pub root: Option<Vec<usize>>,
    pub defense: Box<dyn Defense>,
    pub attack: Option<Box<dyn Attack>>,
}

#[derive(Debug)]
pub struct Federation {
    pub algorithm: Algorithm,
    pub hyper: TrainingHyper,
    pub seed: u64,
    pub global: Model,
    pub clients: Vec<ClientState>,
    train: Dataset,
    defense: Box<dyn Defense>,
    attack: Option<Box<dyn Attack>>,
    root: Option<ClientState>,
    round: usize,
    previous_global_update: Option<Vec<f64>>,
    previous_aggregate: Option<Vec<f64>>,
    history: Vec<Vec<f64>>,
}

impl Federation {
    /// Builds the clients, then lets the attack prepare on the training split
    /// and, if it asks for one, runs a calibration pass.
    pub fn new(setup: FederationSetup) -> Result<Self> {
        setup.hyper.validate()?;
        let n = setup.partitions.len();
        if n == 0 {
            return Err(config_err("need at least one client"));
        }
        if setup.adversaries >= n && setup.adversaries > 0 {
            return Err(config_err(format!(
                "f = {} must be smaller than n = {n}",
                setup.adversaries
            )));
        }
        let bound = setup.train.len();
        let all = setup.partitions.iter().chain(setup.root.iter());
        if all.flatten().any(|&i| i >= bound) {
            return Err(config_err("partition index outside the training set"));
        }
        let clients: Vec<ClientState> = setup
            .partitions
            .into_iter()
            .enumerate()
            .map(|(id, idx)| ClientState::new(id, setup.adversaries, idx))
            .collect();
        let d = setup.global.params.len();
        let mut fed = Self {
            algorithm: setup.algorithm,
            hyper: setup.hyper,
            seed: setup.seed,
            global: setup.global,
            clients,
            train: setup.train,
            defense: setup.defense,
            attack: setup.attack,
            root: setup.root.map(|idx| ClientState::new(usize::MAX, 0, idx)),
            round: 0,
            previous_global_update: None,
            previous_aggregate: None,
            history: vec![vec![0.0; d]; n],
        };
        fed.prepare_attack()?;
        Ok(fed)
    }

    fn prepare_attack(&mut self) -> Result<()> {
        let f = self.adversaries();
        let Some(attack) = self.attack.as_mut() else {
            return Ok(());
        };
        if f == 0 {
            return Ok(());
        }
        attack.prepare(&self.train, self.seed)?;
        if attack.needs_calibration() {
            let norms = self.calibration_norms()?;
            self.attack.as_mut().unwrap().calibrate(median(&norms));
        }
        Ok(())
    }

    /// Norms of the honest clients' first-round updates, computed on scratch
    /// momentum and a separate stream so the real run is unaffected.
    fn calibration_norms(&self) -> Result<Vec<f64>> {
        let steps = self.algorithm.local_steps(&self.hyper);
        let lr = self.hyper.lr_at(0);
        self.clients
            .par_iter()
            .filter(|c| !c.is_adversary())
            .map(|c| {
                let job = LocalJob {
                    model: &self.global,
                    data: &self.train,
                    indices: &c.indices,
                    steps,
                    lr,
                    hyper: &self.hyper,
                };
                let mut momentum = Vec::new();
                let mut rng = stream(self.seed, "calibration", c.id as u64, 0);
                local_train(&job, &mut momentum, &mut rng, &mut Honest).map(|u| u.norm())
            })
            .collect()
    }

    pub fn n(&self) -> usize {
        self.clients.len()
    }

    pub fn adversaries(&self) -> usize {
        self.clients.iter().filter(|c| c.is_adversary()).count()
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn defense(&self) -> &dyn Defense {
        self.defense.as_ref()
    }

    pub fn attack(&self) -> Option<&dyn Attack> {
        self.attack.as_deref()
    }

    /// Local training on every client, in parallel, returned in id order.
    fn train_clients(&mut self, lr: f64) -> Result<Vec<UpdateVector>> {
        let t = self.round;
        let steps = self.algorithm.local_steps(&self.hyper);
        let (global, train, hyper, seed) = (&self.global, &self.train, &self.hyper, self.seed);
        let attack = self.attack.as_deref();
        let prev = self.previous_global_update.as_deref();
        self.clients
            .par_iter_mut()
            .map(|c| {
                let job = LocalJob {
                    model: global,
                    data: train,
                    indices: &c.indices,
                    steps,
                    lr,
                    hyper,
                };
                let mut hooks: Box<dyn TrainHooks> = match attack {
                    Some(a) if c.is_adversary() => a.hooks(&HookEnv {
                        client: c.id,
                        round: t,
                        seed,
                        arch: global.arch,
                        lr,
                        previous_global_update: prev,
                    })?,
                    _ => Box::new(Honest),
                };
                let mut rng = stream(seed, "train", c.id as u64, t as u64);
                local_train(&job, &mut c.momentum, &mut rng, hooks.as_mut())
            })
            .collect()
    }

    fn root_update(&mut self, lr: f64) -> Result<Option<UpdateVector>> {
        let Some(root) = self.root.as_mut() else {
            return Ok(None);
        };
        let job = LocalJob {
            model: &self.global,
            data: &self.train,
            indices: &root.indices,
            steps: self.algorithm.local_steps(&self.hyper),
            lr,
            hyper: &self.hyper,
        };
        let mut rng = stream(self.seed, "server/root", 0, self.round as u64);
        local_train(&job, &mut root.momentum, &mut rng, &mut Honest).map(Some)
    }

    /// One communication round: local training with attack hooks, crafting,
    /// aggregation, the server step and the defense's post-update hook.
    pub fn run_round(&mut self) -> Result<RoundSubmission> {
        let t = self.round;
        let lr = self.hyper.lr_at(t);
        let n = self.n();
        let f = self.adversaries();
        let mut updates = self.train_clients(lr)?;
        let mut warning = None;
        if let (Some(attack), true) = (self.attack.as_deref(), f > 0) {
            let (own, benign) = updates.split_at(f);
            let crafted = craft_round(attack, t, self.seed, n, own, benign, &self.global.params)?;
            warning = crafted.warning;
            updates.splice(..f, crafted.updates);
        }
        let root = self.root_update(lr)?;
        let ctx = ServerContext {
            round: t,
            seed: self.seed,
            previous_aggregate: self.previous_aggregate.as_deref(),
            history: (t > 0).then_some(self.history.as_slice()),
            global: Some(&self.global),
            root_update: root.as_deref(),
        };
        let started = Instant::now();
        let aggregate = aggregate_checked(self.defense.as_ref(), &updates, &ctx)?;
        let agg_seconds = started.elapsed().as_secs_f64();

        let mut next = self.global.params.clone();
        next.axpy(self.algorithm.server_lr(&self.hyper), &aggregate.vector);
        self.defense.post_update(&mut next, &ctx)?;
        if !next.is_finite() {
            return Err(Error::NonFinite("global model"));
        }
        let step: Vec<f64> = next.iter().zip(self.global.params.iter()).map(|(a, b)| a - b).collect();
        self.previous_global_update = Some(step);
        self.previous_aggregate = Some(aggregate.vector.0.clone());
        for (h, u) in self.history.iter_mut().zip(&updates) {
            h.iter_mut().zip(u.iter()).for_each(|(a, b)| *a += b);
        }
        self.global.params = next;
        self.round += 1;
        Ok(RoundSubmission {
            round: t,
            updates,
            aggregate,
            agg_seconds,
            warning,
        })
    }

    /// Class predictions of the current global model, through the defense's
    /// smoothed inference when it has one.
    pub fn predict_all(&self, ds: &Dataset, label: &str) -> Result<Vec<usize>> {
        match self.defense.smoothing() {
            Some((sigma, votes)) => {
                let mut rng = stream(self.seed, label, 0, self.round as u64);
                (0..ds.len())
                    .map(|i| crfl_smoothed_predict(&self.global, ds.sample(i), sigma, votes, &mut rng))
                    .collect()
            }
            None => Ok((0..ds.len()).map(|i| self.global.predict(ds.sample(i))).collect()),
        }
    }

    /// ACC on `test`, plus ASR on `probe` (samples that should be pushed to
    /// the given target label).
    pub fn evaluate(&self, test: &Dataset, probe: Option<(&Dataset, usize)>) -> Result<Evaluation> {
        if test.is_empty() {
            return Err(Error::EmptyInput("evaluation set"));
        }
        let pred = self.predict_all(test, "eval/acc")?;
        let acc = pred.iter().zip(&test.labels).filter(|(p, l)| p == l).count() as f64 / test.len() as f64;
        let asr = match probe {
            Some((p, target)) => {
                if p.is_empty() {
                    return Err(Error::EmptyInput("ASR probe set"));
                }
                let pred = self.predict_all(p, "eval/asr")?;
                Some(pred.iter().filter(|&&c| c == target).count() as f64 / p.len() as f64)
            }
            None => None,
        };
        Ok(Evaluation { acc, asr })
    }
}
