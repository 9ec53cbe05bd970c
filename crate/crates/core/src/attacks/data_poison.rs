//! Data poisoning: label flipping and BadNets.

use super::{trigger_probe, Attack, AttackSetup, HookEnv, Knowledge, Stage};
use crate::data::{embed_trigger, flip_labels, Batch, Dataset, LabelFlipMode, PoisonKind, PoisonSpec};
use crate::error::{config_err, Result};
use crate::params::Params;
use crate::rng::StreamRng;
use crate::train::TrainHooks;

/// Relabels the adversary's training batches.
#[derive(Debug, Clone)]
pub struct LabelFlipping {
    pub mode: LabelFlipMode,
    pub spec: PoisonSpec,
    pub classes: usize,
}

impl LabelFlipping {
    pub fn from_params(p: &mut Params, setup: &AttackSetup) -> Result<Self> {
        let mode = match p.string("mode", "target").as_str() {
            "target" => LabelFlipMode::Target,
            "inverse" => LabelFlipMode::Inverse,
            "random" => LabelFlipMode::Random,
            other => {
                return Err(config_err(format!(
                    "labelflipping.mode `{other}` is not one of target, inverse, random"
                )))
            }
        };
        let spec = PoisonSpec {
            kind: PoisonKind::LabelFlip(mode),
            ..setup.poison
        };
        spec.validate(setup.classes, setup.image)?;
        Ok(Self {
            mode,
            spec,
            classes: setup.classes,
        })
    }
}

struct FlipHooks<'a>(&'a LabelFlipping);

impl TrainHooks for FlipHooks<'_> {
    fn batch(&mut self, batch: Batch, _: usize, rng: &mut StreamRng) -> Result<Batch> {
        let a = self.0;
        Ok(flip_labels(&batch, a.mode, &a.spec, a.classes, rng))
    }
}

impl Attack for LabelFlipping {
    fn name(&self) -> &'static str {
        "labelflipping"
    }
    fn stage(&self) -> Stage {
        Stage::Data
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::DATA
    }

    fn hooks<'a>(&'a self, _: &HookEnv<'a>) -> Result<Box<dyn TrainHooks + 'a>> {
        Ok(Box::new(FlipHooks(self)))
    }

    /// Only the targeted mode has a success criterion: source-class test
    /// samples predicted as the target.
    fn probe(&self, test: &Dataset, _: u64) -> Result<Option<(Dataset, usize)>> {
        if self.mode != LabelFlipMode::Target {
            return Ok(None);
        }
        let keep: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] == self.spec.source).collect();
        Ok(Some((test.subset(&keep), self.spec.target)))
    }
}

/// Stamps the pixel trigger on a fixed share of each training batch and
/// relabels those samples to the target.
#[derive(Debug, Clone)]
pub struct BadNets {
    pub spec: PoisonSpec,
}

impl BadNets {
    pub fn from_params(p: &mut Params, setup: &AttackSetup) -> Result<Self> {
        let mut spec = PoisonSpec {
            kind: PoisonKind::PixelTrigger,
            ..setup.poison
        };
        spec.ratio = p.f64("ratio", spec.ratio)?;
        spec.validate(setup.classes, setup.image)?;
        Ok(Self { spec })
    }
}

/// Training hooks that only poison batches with `spec`.
pub(crate) struct TriggerHooks {
    pub spec: PoisonSpec,
}

impl TrainHooks for TriggerHooks {
    fn batch(&mut self, batch: Batch, _: usize, rng: &mut StreamRng) -> Result<Batch> {
        embed_trigger(&batch, &self.spec, rng)
    }
}

impl Attack for BadNets {
    fn name(&self) -> &'static str {
        "badnets"
    }
    fn stage(&self) -> Stage {
        Stage::Data
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::DATA
    }

    fn hooks<'a>(&'a self, _: &HookEnv<'a>) -> Result<Box<dyn TrainHooks + 'a>> {
        Ok(Box::new(TriggerHooks { spec: self.spec }))
    }

    fn probe(&self, test: &Dataset, _: u64) -> Result<Option<(Dataset, usize)>> {
        trigger_probe(test, &self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::tests::setup;
    use crate::data::ImageShape;
    use crate::model::Architecture;
    use crate::rng::stream;

    fn env() -> HookEnv<'static> {
        HookEnv {
            client: 0,
            round: 0,
            seed: 0,
            arch: Architecture::Logistic {
                inputs: 144,
                classes: 10,
            },
            lr: 0.01,
            previous_global_update: None,
        }
    }

    fn batch(n: usize) -> Batch {
        let ds = Dataset::new(
            vec![0.25; n * 144],
            (0..n).map(|i| i % 10).collect(),
            144,
            10,
            Some(ImageShape { height: 12, width: 12 }),
        )
        .unwrap();
        ds.all()
    }

    #[test]
    fn badnets_poisons_twenty_of_sixty_four() {
        let mut p = Params::from_pairs([("ratio", "0.32")]);
        let a = BadNets::from_params(&mut p, &setup(10, 2)).unwrap();
        let mut h = a.hooks(&env()).unwrap();
        let b = batch(64);
        let out = h.batch(b.clone(), 0, &mut stream(0, "b", 0, 0)).unwrap();
        let stamped = (0..64).filter(|&i| out.sample(i)[0] == 1.0).count();
        assert_eq!(stamped, 20);
        assert_eq!(crate::data::poison_count(0.32, 64), 20);
        assert_eq!(crate::data::poison_count(0.5 / 64.0, 64), 1);
        let a = BadNets::from_params(&mut Params::new(), &setup(10, 2)).unwrap();
        let out = a.hooks(&env()).unwrap().batch(b, 0, &mut stream(0, "b", 0, 0)).unwrap();
        let stamped: Vec<usize> = (0..64).filter(|&i| out.sample(i)[0] == 1.0).collect();
        assert_eq!(stamped.len(), 20);
        assert!(stamped.iter().all(|&i| out.labels[i] == 1));
        assert_eq!(out.len(), 64);
    }

    #[test]
    fn label_flip_target_mode() {
        let a = LabelFlipping::from_params(&mut Params::new(), &setup(10, 2)).unwrap();
        let b = batch(20);
        let out = a.hooks(&env()).unwrap().batch(b.clone(), 0, &mut stream(0, "f", 0, 0)).unwrap();
        for i in 0..20 {
            let want = if b.labels[i] == 7 { 1 } else { b.labels[i] };
            assert_eq!(out.labels[i], want);
        }
        let mut p = Params::from_pairs([("mode", "inverse")]);
        let inv = LabelFlipping::from_params(&mut p, &setup(10, 2)).unwrap();
        let out = inv.hooks(&env()).unwrap().batch(b.clone(), 0, &mut stream(0, "f", 0, 0)).unwrap();
        assert!(out.labels.iter().zip(&b.labels).all(|(o, l)| o + l == 9));
        assert!(inv.probe(&Dataset::new(vec![0.0; 144], vec![7], 144, 10, None).unwrap(), 0).unwrap().is_none());
        let mut bad = Params::from_pairs([("mode", "sideways")]);
        assert!(LabelFlipping::from_params(&mut bad, &setup(10, 2)).is_err());
    }

    #[test]
    fn label_flip_probe_is_source_class() {
        let a = LabelFlipping::from_params(&mut Params::new(), &setup(10, 2)).unwrap();
        let test = Dataset::new(vec![0.0; 3 * 144], vec![7, 2, 7], 144, 10, None).unwrap();
        let (probe, target) = a.probe(&test, 0).unwrap().unwrap();
        assert_eq!(probe.labels, vec![7, 7]);
        assert_eq!(target, 1);
    }
}
