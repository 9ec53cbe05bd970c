//! Poisoning attacks.
//!
//! Every attack declares the stage at which it acts and what it is allowed to
//! see. Data-stage and training-time attacks steer local training through
//! [`TrainHooks`]; post-training and update-time attacks rewrite the
//! adversaries' finished updates in [`Attack::craft`].

mod data_poison;
mod hybrid;
mod model_poison;

use std::fmt::Debug;

pub use data_poison::{BadNets, LabelFlipping};
pub use hybrid::{neurotoxin_mask, AlterMin, Dba, EdgeCase, ModelReplacement, Neurotoxin};
pub use model_poison::{
    alie_z_max, fang_krum_pick, min_attack_gamma, Alie, Fang, Gaussian, Ipm, Mimic, MinAttack, MinRule,
    Perturbation, SignFlipping,
};

use crate::data::{Dataset, ImageShape, PoisonSpec};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::params::Params;
use crate::registry::lookup;
use crate::rng::{stream, StreamRng};
use crate::train::{Honest, TrainHooks};
use crate::vector::UpdateVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Poisons the adversary's training batches.
    Data,
    /// Changes the local optimisation itself.
    TrainingTime,
    /// Rewrites the adversary's own finished update.
    PostTraining,
    /// Builds submissions after observing other clients' updates.
    UpdateTime,
}

/// What an attacker may observe, one flag per knowledge column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Knowledge {
    pub train_data: bool,
    pub training_process: bool,
    pub benign_updates: bool,
    pub malicious_updates: bool,
    pub defense: bool,
}

impl Knowledge {
    const NONE: Self = Self {
        train_data: false,
        training_process: false,
        benign_updates: false,
        malicious_updates: false,
        defense: false,
    };
    const BENIGN: Self = Self {
        benign_updates: true,
        ..Self::NONE
    };
    const DATA: Self = Self {
        train_data: true,
        ..Self::NONE
    };
    const COLLUDING: Self = Self {
        benign_updates: true,
        malicious_updates: true,
        defense: true,
        ..Self::NONE
    };
}

/// Facts about the federation an attack is built against.
#[derive(Debug, Clone)]
pub struct AttackSetup {
    pub n: usize,
    pub f: usize,
    pub global_lr: f64,
    pub classes: usize,
    pub image: Option<ImageShape>,
    /// Poisoning geometry and labels from the `poison.*` keys.
    pub poison: PoisonSpec,
}

impl AttackSetup {
    /// Model-replacement scale `n / eta_g`.
    pub fn replacement_scale(&self) -> f64 {
        self.n as f64 / self.global_lr
    }
}

/// Everything a training hook may look at for one adversary in one round.
#[derive(Debug, Clone)]
pub struct HookEnv<'a> {
    pub client: usize,
    pub round: usize,
    pub seed: u64,
    pub arch: Architecture,
    /// Local learning rate in force this round.
    pub lr: f64,
    /// `w^{t-1} - w^{t-2}`, absent in the first round.
    pub previous_global_update: Option<&'a [f64]>,
}

/// View handed to [`Attack::craft`]. `own` holds the pre-attack updates of the
/// adversaries being crafted for, starting at client id `first`.
#[derive(Debug, Clone)]
pub struct AttackContext<'a> {
    pub round: usize,
    pub seed: u64,
    pub n: usize,
    pub f: usize,
    pub first: usize,
    pub own: &'a [UpdateVector],
    /// Empty unless the attack's knowledge grants benign updates.
    pub benign: &'a [UpdateVector],
    pub global: &'a [f64],
}

impl AttackContext<'_> {
    pub fn rng(&self, label: &str, client: usize) -> StreamRng {
        stream(self.seed, label, client as u64, self.round as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crafted {
    pub updates: Vec<UpdateVector>,
    /// Set when an attack had to settle for a fallback, e.g. an exhausted search.
    pub warning: Option<String>,
}

impl Crafted {
    pub fn new(updates: Vec<UpdateVector>) -> Self {
        Self { updates, warning: None }
    }
}

pub trait Attack: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn stage(&self) -> Stage;
    fn knowledge(&self) -> Knowledge;

    /// One-off setup before the first round. `train` is the whole training
    /// split, standing in for auxiliary data the adversary holds.
    fn prepare(&mut self, _train: &Dataset, _seed: u64) -> Result<()> {
        Ok(())
    }

    /// Whether the harness should measure honest update norms before training
    /// and pass their median to [`Attack::calibrate`].
    fn needs_calibration(&self) -> bool {
        false
    }

    fn calibrate(&mut self, _median_honest_norm: f64) {}

    /// Training hooks for one adversary. Defaults to honest training.
    fn hooks<'a>(&'a self, _env: &HookEnv<'a>) -> Result<Box<dyn TrainHooks + 'a>> {
        Ok(Box::new(Honest))
    }

    /// Final submissions, one per entry of `ctx.own`. Defaults to the
    /// pre-attack updates unchanged.
    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Crafted> {
        Ok(Crafted::new(ctx.own.to_vec()))
    }

    /// Backdoor probe for ASR: inputs carrying the attack's trigger, with
    /// the label the attacker wants. `None` for untargeted attacks.
    fn probe(&self, _test: &Dataset, _seed: u64) -> Result<Option<(Dataset, usize)>> {
        Ok(None)
    }
}

/// Runs `craft` after checking that the context carries no more than the
/// attack is entitled to, then validates the output shape.
pub fn craft_checked(attack: &dyn Attack, ctx: &AttackContext<'_>) -> Result<Crafted> {
    let k = attack.knowledge();
    if !k.benign_updates && !ctx.benign.is_empty() {
        return Err(Error::Harness(format!(
            "{} may not observe benign updates",
            attack.name()
        )));
    }
    if !k.malicious_updates && ctx.own.len() > 1 {
        return Err(Error::Harness(format!(
            "{} may not observe other adversaries' updates",
            attack.name()
        )));
    }
    let out = attack.craft(ctx)?;
    if out.updates.len() != ctx.own.len() {
        return Err(Error::Integrity(format!(
            "{} returned {} updates for {} adversaries",
            attack.name(),
            out.updates.len(),
            ctx.own.len()
        )));
    }
    for u in &out.updates {
        if u.len() != ctx.global.len() {
            return Err(Error::Dimension {
                expected: ctx.global.len(),
                found: u.len(),
            });
        }
        if !u.is_finite() {
            return Err(Error::NonFinite("attack output"));
        }
    }
    Ok(out)
}

/// Crafts submissions for all `own.len()` adversaries (ids `0..own.len()`),
/// giving each call exactly the view its knowledge row allows: colluding
/// attacks are called once with every adversary, the rest once per adversary.
pub fn craft_round(
    attack: &dyn Attack,
    round: usize,
    seed: u64,
    n: usize,
    own: &[UpdateVector],
    benign: &[UpdateVector],
    global: &[f64],
) -> Result<Crafted> {
    let k = attack.knowledge();
    let f = own.len();
    let benign_view: &[UpdateVector] = if k.benign_updates { benign } else { &[] };
    let base = AttackContext {
        round,
        seed,
        n,
        f,
        first: 0,
        own,
        benign: benign_view,
        global,
    };
    if f == 0 {
        return Ok(Crafted::new(Vec::new()));
    }
    if k.malicious_updates {
        return craft_checked(attack, &base);
    }
    let mut updates = Vec::with_capacity(f);
    let mut warning = None;
    for i in 0..f {
        let ctx = AttackContext {
            first: i,
            own: &own[i..=i],
            ..base.clone()
        };
        let out = craft_checked(attack, &ctx)?;
        updates.extend(out.updates);
        warning = warning.or(out.warning);
    }
    Ok(Crafted { updates, warning })
}

type Factory = fn(&mut Params, &AttackSetup) -> Result<Box<dyn Attack>>;

pub struct AttackEntry {
    pub stage: Stage,
    pub knowledge: Knowledge,
    pub build: Factory,
}

fn boxed<A: Attack + 'static>(a: A) -> Result<Box<dyn Attack>> {
    Ok(Box::new(a))
}

pub static ATTACKS: &[(&str, AttackEntry)] = &[
    ("gaussian", AttackEntry { stage: Stage::PostTraining, knowledge: Knowledge::NONE, build: |p, _| boxed(Gaussian::from_params(p)?) }),
    ("signflipping", AttackEntry { stage: Stage::PostTraining, knowledge: Knowledge::NONE, build: |p, _| boxed(SignFlipping::from_params(p)?) }),
    ("alie", AttackEntry { stage: Stage::UpdateTime, knowledge: Knowledge::BENIGN, build: |p, s| boxed(Alie::from_params(p, s)?) }),
    ("ipm", AttackEntry { stage: Stage::UpdateTime, knowledge: Knowledge::BENIGN, build: |p, _| boxed(Ipm::from_params(p)?) }),
    ("fang", AttackEntry { stage: Stage::UpdateTime, knowledge: Knowledge::COLLUDING, build: |p, _| boxed(Fang::from_params(p)?) }),
    ("minmax", AttackEntry { stage: Stage::UpdateTime, knowledge: Knowledge::BENIGN, build: |p, _| boxed(MinAttack::from_params(p, MinRule::MaxDistance)?) }),
    ("minsum", AttackEntry { stage: Stage::UpdateTime, knowledge: Knowledge::BENIGN, build: |p, _| boxed(MinAttack::from_params(p, MinRule::SumDistance)?) }),
    ("mimic", AttackEntry { stage: Stage::UpdateTime, knowledge: Knowledge::BENIGN, build: |p, _| boxed(Mimic::from_params(p)?) }),
    ("labelflipping", AttackEntry { stage: Stage::Data, knowledge: Knowledge::DATA, build: |p, s| boxed(LabelFlipping::from_params(p, s)?) }),
    ("badnets", AttackEntry { stage: Stage::Data, knowledge: Knowledge::DATA, build: |p, s| boxed(BadNets::from_params(p, s)?) }),
    ("dba", AttackEntry { stage: Stage::Data, knowledge: Knowledge::DATA, build: |p, s| boxed(Dba::from_params(p, s)?) }),
    ("altermin", AttackEntry { stage: Stage::TrainingTime, knowledge: Knowledge::DATA, build: |p, s| boxed(AlterMin::from_params(p, s)?) }),
    ("modelreplacement", AttackEntry { stage: Stage::TrainingTime, knowledge: Knowledge::DATA, build: |p, s| boxed(ModelReplacement::from_params(p, s)?) }),
    ("edgecase", AttackEntry { stage: Stage::Data, knowledge: Knowledge::DATA, build: |p, s| boxed(EdgeCase::from_params(p, s)?) }),
    ("neurotoxin", AttackEntry { stage: Stage::TrainingTime, knowledge: Knowledge::DATA, build: |p, s| boxed(Neurotoxin::from_params(p, s)?) }),
];

pub fn attack_names() -> Vec<&'static str> {
    ATTACKS.iter().map(|(n, _)| *n).collect()
}

pub fn attack_entry(name: &str) -> Result<&'static AttackEntry> {
    lookup("attack", name, ATTACKS)
}

pub fn build_attack(name: &str, mut params: Params, setup: &AttackSetup) -> Result<Box<dyn Attack>> {
    let entry = attack_entry(name)?;
    let attack = (entry.build)(&mut params, setup)?;
    params.finish(name)?;
    Ok(attack)
}

/// Probe for backdoors stamped with a pixel pattern: every test sample whose
/// label is not already the target, with the full trigger applied.
pub(crate) fn trigger_probe(test: &Dataset, spec: &PoisonSpec) -> Result<Option<(Dataset, usize)>> {
    let img = test
        .image
        .ok_or_else(|| crate::error::config_err("pixel triggers need image data"))?;
    spec.trigger.check(img)?;
    let keep: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] != spec.target).collect();
    let mut probe = test.subset(&keep);
    let pixels = spec.trigger.pixels();
    for i in 0..probe.len() {
        let row = &mut probe.features[i * probe.dim..(i + 1) * probe.dim];
        crate::data::stamp_pixels(row, img.width, &pixels, spec.trigger.value);
    }
    Ok(Some((probe, spec.target)))
}
