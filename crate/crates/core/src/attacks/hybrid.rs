//! Hybrid attacks that poison data and also steer local training or scale
//! the result: DBA, AlterMin, ModelReplacement, EdgeCase and Neurotoxin.

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::data_poison::TriggerHooks;
use super::{trigger_probe, Attack, AttackContext, AttackSetup, Crafted, HookEnv, Knowledge, Stage};
use crate::data::{embed_trigger, make_edge_case, poison_count, Batch, Dataset, EdgeCaseParams, PoisonKind, PoisonSpec};
use crate::error::{config_err, Error, Result};
use crate::model::{loss_and_grad, Architecture};
use crate::params::Params;
use crate::rng::{stream, StreamRng};
use crate::train::TrainHooks;
use crate::vector::{clip_to_norm, dot, norm};

fn trigger_spec(setup: &AttackSetup) -> Result<PoisonSpec> {
    let spec = PoisonSpec {
        kind: PoisonKind::PixelTrigger,
        ..setup.poison
    };
    spec.validate(setup.classes, setup.image)?;
    Ok(spec)
}

fn scale_all(ctx: &AttackContext<'_>, k: f64) -> Crafted {
    Crafted::new(ctx.own.iter().map(|g| g.scaled(k)).collect())
}

/// Distributed backdoor: adversary `k` trains on quadrant `k mod 4` of the
/// trigger and scales its update.
#[derive(Debug, Clone)]
pub struct Dba {
    pub spec: PoisonSpec,
    pub scale: f64,
}

impl Dba {
    pub fn from_params(p: &mut Params, setup: &AttackSetup) -> Result<Self> {
        let spec = trigger_spec(setup)?;
        let scale = p.positive("scale", setup.replacement_scale())?;
        Ok(Self { spec, scale })
    }

    pub fn local_spec(&self, client: usize) -> PoisonSpec {
        PoisonSpec {
            kind: PoisonKind::DistributedTrigger { part: client },
            ..self.spec
        }
    }
}

impl Attack for Dba {
    fn name(&self) -> &'static str {
        "dba"
    }
    fn stage(&self) -> Stage {
        Stage::Data
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::DATA
    }

    fn hooks<'a>(&'a self, env: &HookEnv<'a>) -> Result<Box<dyn TrainHooks + 'a>> {
        Ok(Box::new(TriggerHooks {
            spec: self.local_spec(env.client),
        }))
    }

    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Crafted> {
        Ok(scale_all(ctx, self.scale))
    }

    fn probe(&self, test: &Dataset, _: u64) -> Result<Option<(Dataset, usize)>> {
        trigger_probe(test, &self.spec)
    }
}

/// Alternating minimisation between the backdoor loss and a stealth term
/// pulling the update toward the previous global update.
#[derive(Debug, Clone)]
pub struct AlterMin {
    pub spec: PoisonSpec,
    /// Share of the class (backdoor) loss; the stealth term gets `1 - alpha`.
    pub alpha: f64,
    pub alternations: usize,
    /// Step size of each stealth step.
    pub stealth_rate: f64,
}

impl AlterMin {
    pub fn from_params(p: &mut Params, setup: &AttackSetup) -> Result<Self> {
        let alpha = p.f64("alpha", 0.5)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(config_err(format!("altermin.alpha {alpha} outside [0, 1]")));
        }
        let alternations = p.usize("alternations", 5)?;
        if alternations == 0 {
            return Err(config_err("altermin.alternations must be >= 1"));
        }
        let stealth_rate = p.f64("stealth_rate", 1.0)?;
        if !(0.0..=1.0).contains(&stealth_rate) {
            return Err(config_err("altermin.stealth_rate must be in [0, 1]"));
        }
        Ok(Self {
            spec: trigger_spec(setup)?,
            alpha,
            alternations,
            stealth_rate,
        })
    }
}

struct AlterHooks {
    spec: PoisonSpec,
    arch: Architecture,
    lr: f64,
    alpha: f64,
    alternations: usize,
    rate: f64,
    reference: Option<Vec<f64>>,
    last: Option<Batch>,
}

impl AlterHooks {
    fn stealth(&self, w: &mut [f64], start: &[f64]) {
        let k = self.rate * (1.0 - self.alpha);
        if k == 0.0 {
            return;
        }
        for (j, (wi, si)) in w.iter_mut().zip(start).enumerate() {
            let target = self.reference.as_ref().map_or(0.0, |r| r[j]);
            *wi -= k * ((*wi - si) - target);
        }
    }
}

impl TrainHooks for AlterHooks {
    fn batch(&mut self, batch: Batch, _: usize, rng: &mut StreamRng) -> Result<Batch> {
        let poisoned = embed_trigger(&batch, &self.spec, rng)?;
        self.last = Some(poisoned.clone());
        Ok(poisoned)
    }

    fn grad(&mut self, g: &mut [f64], _: &[f64], _: &[f64], _: usize) {
        g.iter_mut().for_each(|x| *x *= self.alpha);
    }

    fn after_step(&mut self, w: &mut [f64], start: &[f64], _: usize) {
        self.stealth(w, start);
        let Some(batch) = self.last.take() else {
            return;
        };
        for _ in 1..self.alternations {
            if self.alpha > 0.0 {
                let (_, g) = loss_and_grad(&self.arch, w, &batch, true);
                for (wi, gi) in w.iter_mut().zip(&g) {
                    *wi -= self.lr * self.alpha * gi;
                }
            }
            self.stealth(w, start);
        }
        self.last = Some(batch);
    }
}

impl Attack for AlterMin {
    fn name(&self) -> &'static str {
        "altermin"
    }
    fn stage(&self) -> Stage {
        Stage::TrainingTime
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::DATA
    }

    fn hooks<'a>(&'a self, env: &HookEnv<'a>) -> Result<Box<dyn TrainHooks + 'a>> {
        Ok(Box::new(AlterHooks {
            spec: self.spec,
            arch: env.arch,
            lr: env.lr,
            alpha: self.alpha,
            alternations: self.alternations,
            rate: self.stealth_rate,
            reference: env.previous_global_update.map(<[f64]>::to_vec),
            last: None,
        }))
    }

    fn probe(&self, test: &Dataset, _: u64) -> Result<Option<(Dataset, usize)>> {
        trigger_probe(test, &self.spec)
    }
}

/// Gradient of `1 - cos(w, anchor)` with respect to `w`.
pub(crate) fn cosine_distance_grad(w: &[f64], anchor: &[f64]) -> Option<Vec<f64>> {
    let (nw, na) = (norm(w), norm(anchor));
    if nw == 0.0 || na == 0.0 {
        return None;
    }
    let c = dot(w, anchor) / (nw * na);
    Some(
        w.iter()
            .zip(anchor)
            .map(|(wi, ai)| -(ai / (nw * na) - c * wi / (nw * nw)))
            .collect(),
    )
}

/// Constrain-and-scale: backdoor training with a cosine anomaly term against
/// the received global model, then the update is scaled by `n / eta_g`.
#[derive(Debug, Clone)]
pub struct ModelReplacement {
    pub spec: PoisonSpec,
    pub alpha: f64,
    pub scale: f64,
}

impl ModelReplacement {
    pub fn from_params(p: &mut Params, setup: &AttackSetup) -> Result<Self> {
        let alpha = p.f64("alpha", 0.5)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(config_err(format!("modelreplacement.alpha {alpha} outside [0, 1]")));
        }
        Ok(Self {
            spec: trigger_spec(setup)?,
            alpha,
            scale: p.positive("scale", setup.replacement_scale())?,
        })
    }
}

struct ConstrainHooks {
    spec: PoisonSpec,
    alpha: f64,
}

impl TrainHooks for ConstrainHooks {
    fn batch(&mut self, batch: Batch, _: usize, rng: &mut StreamRng) -> Result<Batch> {
        embed_trigger(&batch, &self.spec, rng)
    }

    fn grad(&mut self, g: &mut [f64], w: &[f64], start: &[f64], _: usize) {
        if self.alpha == 1.0 {
            return;
        }
        let ano = cosine_distance_grad(w, start);
        for (j, gi) in g.iter_mut().enumerate() {
            *gi = self.alpha * *gi + ano.as_ref().map_or(0.0, |a| (1.0 - self.alpha) * a[j]);
        }
    }
}

impl Attack for ModelReplacement {
    fn name(&self) -> &'static str {
        "modelreplacement"
    }
    fn stage(&self) -> Stage {
        Stage::TrainingTime
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::DATA
    }

    fn hooks<'a>(&'a self, _: &HookEnv<'a>) -> Result<Box<dyn TrainHooks + 'a>> {
        Ok(Box::new(ConstrainHooks {
            spec: self.spec,
            alpha: self.alpha,
        }))
    }

    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Crafted> {
        Ok(scale_all(ctx, self.scale))
    }

    fn probe(&self, test: &Dataset, _: u64) -> Result<Option<(Dataset, usize)>> {
        trigger_probe(test, &self.spec)
    }
}

/// Edge-case backdoor: half of each batch comes from a tail pool of
/// transformed source-class samples labelled as the target, and the local
/// model is projected back into an L2 ball of radius `rho` after every step.
#[derive(Debug, Clone)]
pub struct EdgeCase {
    pub spec: PoisonSpec,
    pub transform: EdgeCaseParams,
    pub mix: f64,
    /// `None` until set explicitly or by calibration.
    pub rho: Option<f64>,
    /// Also apply the model-replacement scale before submission.
    pub scaled: bool,
    pub scale: f64,
    pool: Option<Dataset>,
}

impl EdgeCase {
    pub fn from_params(p: &mut Params, setup: &AttackSetup) -> Result<Self> {
        let spec = PoisonSpec {
            kind: PoisonKind::EdgeCase,
            ..setup.poison
        };
        spec.validate(setup.classes, setup.image)?;
        let mix = p.f64("mix", 0.5)?;
        if !(0.0..=1.0).contains(&mix) {
            return Err(config_err(format!("edgecase.mix {mix} outside [0, 1]")));
        }
        let rho = p.opt_positive("rho")?;
        let d = EdgeCaseParams::default();
        let transform = EdgeCaseParams {
            rotation_deg: p.f64("rotation", d.rotation_deg)?,
            contrast: p.f64("contrast", d.contrast)?,
            shift: p.f64("shift", d.shift)?,
            noise: p.f64("noise", d.noise)?,
            min_samples: d.min_samples,
        };
        Ok(Self {
            spec,
            transform,
            mix,
            rho,
            scaled: p.bool("scaled", false)?,
            scale: setup.replacement_scale(),
            pool: None,
        })
    }

    pub fn pool(&self) -> Option<&Dataset> {
        self.pool.as_ref()
    }
}

struct EdgeHooks<'a> {
    pool: &'a Dataset,
    mix: f64,
    rho: f64,
}

impl TrainHooks for EdgeHooks<'_> {
    fn batch(&mut self, mut batch: Batch, _: usize, rng: &mut StreamRng) -> Result<Batch> {
        let k = poison_count(self.mix, batch.len());
        if k == 0 {
            return Ok(batch);
        }
        let mut slots = sample_indices(rng, batch.len(), k).into_vec();
        slots.sort_unstable();
        for i in slots {
            let src = rng.random_range(0..self.pool.len());
            batch.sample_mut(i).copy_from_slice(self.pool.sample(src));
            batch.labels[i] = self.pool.labels[src];
        }
        Ok(batch)
    }

    fn after_step(&mut self, w: &mut [f64], start: &[f64], _: usize) {
        let mut delta: Vec<f64> = w.iter().zip(start).map(|(a, b)| a - b).collect();
        clip_to_norm(&mut delta, self.rho);
        for ((wi, si), di) in w.iter_mut().zip(start).zip(&delta) {
            *wi = si + di;
        }
    }
}

impl Attack for EdgeCase {
    fn name(&self) -> &'static str {
        "edgecase"
    }
    fn stage(&self) -> Stage {
        Stage::Data
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::DATA
    }

    fn prepare(&mut self, train: &Dataset, seed: u64) -> Result<()> {
        let mut rng = stream(seed, "attack/edgecase/train", 0, 0);
        self.pool = Some(make_edge_case(train, &self.spec, &self.transform, &mut rng)?);
        Ok(())
    }

    fn needs_calibration(&self) -> bool {
        self.rho.is_none()
    }

    fn calibrate(&mut self, median_honest_norm: f64) {
        self.rho = Some(2.0 * median_honest_norm);
    }

    fn hooks<'a>(&'a self, _: &HookEnv<'a>) -> Result<Box<dyn TrainHooks + 'a>> {
        let pool = self
            .pool
            .as_ref()
            .ok_or_else(|| Error::Harness("edgecase used before prepare()".into()))?;
        let rho = self
            .rho
            .ok_or_else(|| Error::Harness("edgecase.rho neither set nor calibrated".into()))?;
        Ok(Box::new(EdgeHooks {
            pool,
            mix: self.mix,
            rho,
        }))
    }

    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Crafted> {
        Ok(if self.scaled {
            scale_all(ctx, self.scale)
        } else {
            Crafted::new(ctx.own.to_vec())
        })
    }

    /// Tail samples built from the test split, labelled as the target.
    fn probe(&self, test: &Dataset, seed: u64) -> Result<Option<(Dataset, usize)>> {
        let mut rng = stream(seed, "attack/edgecase/test", 0, 0);
        let pool = make_edge_case(test, &self.spec, &self.transform, &mut rng)?;
        Ok(Some((pool, self.spec.target)))
    }
}

/// Mask of the `round(k_ratio * d)` coordinates with the smallest magnitude in
/// `previous` (ties to the lower index). No previous update masks nothing.
pub fn neurotoxin_mask(previous: Option<&[f64]>, d: usize, k_ratio: f64) -> Vec<bool> {
    let Some(prev) = previous else {
        return vec![true; d];
    };
    let k = ((k_ratio * d as f64).round() as usize).min(d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| prev[a].abs().total_cmp(&prev[b].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; d];
    for &j in &order[..k] {
        mask[j] = true;
    }
    mask
}

/// Backdoor training confined to coordinates the benign clients rarely move,
/// with gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Neurotoxin {
    pub spec: PoisonSpec,
    pub k_ratio: f64,
    pub clip: f64,
}

impl Neurotoxin {
    pub fn from_params(p: &mut Params, setup: &AttackSetup) -> Result<Self> {
        let k_ratio = p.f64("k_ratio", 0.95)?;
        if !(k_ratio > 0.0 && k_ratio <= 1.0) {
            return Err(config_err(format!("neurotoxin.k_ratio {k_ratio} outside (0, 1]")));
        }
        Ok(Self {
            spec: trigger_spec(setup)?,
            k_ratio,
            clip: p.positive("clip", 10.0)?,
        })
    }
}

struct ToxinHooks {
    spec: PoisonSpec,
    mask: Vec<bool>,
    clip: f64,
}

impl TrainHooks for ToxinHooks {
    fn batch(&mut self, batch: Batch, _: usize, rng: &mut StreamRng) -> Result<Batch> {
        embed_trigger(&batch, &self.spec, rng)
    }

    fn grad(&mut self, g: &mut [f64], _: &[f64], _: &[f64], _: usize) {
        clip_to_norm(g, self.clip);
    }

    fn after_step(&mut self, w: &mut [f64], start: &[f64], _: usize) {
        for ((wi, si), keep) in w.iter_mut().zip(start).zip(&self.mask) {
            if !keep {
                *wi = *si;
            }
        }
    }
}

impl Attack for Neurotoxin {
    fn name(&self) -> &'static str {
        "neurotoxin"
    }
    fn stage(&self) -> Stage {
        Stage::TrainingTime
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::DATA
    }

    fn hooks<'a>(&'a self, env: &HookEnv<'a>) -> Result<Box<dyn TrainHooks + 'a>> {
        let d = env.arch.param_count();
        Ok(Box::new(ToxinHooks {
            spec: self.spec,
            mask: neurotoxin_mask(env.previous_global_update, d, self.k_ratio),
            clip: self.clip,
        }))
    }

    fn probe(&self, test: &Dataset, _: u64) -> Result<Option<(Dataset, usize)>> {
        trigger_probe(test, &self.spec)
    }
}
