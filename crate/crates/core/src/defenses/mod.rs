//! Aggregation rules. Every rule sees only the submitted vectors and a server
//! context; it never learns which clients are adversarial.

mod backdoor;
mod clipping;
pub mod cluster;
mod filtering;
mod statistical;

pub use backdoor::{flame_lambda, DeepSight, Flame};
pub use clipping::{crfl_smoothed_predict, CenteredClipping, Crfl, FlTrust, NormClipping};
pub use filtering::{foolsgold_weights, Auror, FoolsGold, SignGuard};
pub use statistical::{
    bulyan_selection, krum_scores, Bucketing, Bulyan, DnC, Krum, Mean, Median, MultiKrum, Rfa,
    TrimmedMean,
};

use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Params;
use crate::registry::lookup;
use crate::rng::{stream, StreamRng};
use crate::vector::{check_batch, coordinate_median, UpdateVector};

/// Read-only server state handed to a rule for one round.
#[derive(Debug, Clone, Copy)]
pub struct ServerContext<'a> {
    /// 0-based round index.
    pub round: usize,
    pub seed: u64,
    /// Aggregate returned in the previous round, if any.
    pub previous_aggregate: Option<&'a [f64]>,
    /// Per-client sums of all earlier submissions, indexed like the submissions.
    pub history: Option<&'a [Vec<f64>]>,
    /// Global model at the start of the round.
    pub global: Option<&'a Model>,
    /// Update the server computed on its own root data.
    pub root_update: Option<&'a [f64]>,
}

impl<'a> ServerContext<'a> {
    pub fn bare(round: usize, seed: u64) -> Self {
        Self {
            round,
            seed,
            previous_aggregate: None,
            history: None,
            global: None,
            root_update: None,
        }
    }

    pub fn rng(&self, label: &str) -> StreamRng {
        stream(self.seed, label, 0, self.round as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub vector: UpdateVector,
    /// Indices of the submissions that contributed, for filtering rules.
    pub survivors: Option<Vec<usize>>,
    /// True when the rule gave up on its own procedure and used a fallback.
    pub fallback: bool,
}

impl Aggregate {
    pub fn plain(vector: UpdateVector) -> Self {
        Self {
            vector,
            survivors: None,
            fallback: false,
        }
    }

    pub fn filtered(vector: UpdateVector, survivors: Vec<usize>) -> Self {
        Self {
            vector,
            survivors: Some(survivors),
            fallback: false,
        }
    }

    /// Coordinate-wise median of everything, flagged as a fallback.
    pub fn median_fallback(subs: &[UpdateVector]) -> Result<Self> {
        Ok(Self {
            vector: coordinate_median(subs)?,
            survivors: None,
            fallback: true,
        })
    }
}

pub trait Defense: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn aggregate(&self, subs: &[UpdateVector], ctx: &ServerContext<'_>) -> Result<Aggregate>;

    /// Hook applied to the new global parameters after the server step.
    fn post_update(&self, _global: &mut [f64], _ctx: &ServerContext<'_>) -> Result<()> {
        Ok(())
    }

    /// `(sigma, votes)` when evaluation should use randomised smoothing.
    fn smoothing(&self) -> Option<(f64, usize)> {
        None
    }
}

/// Runs `defense` and checks the integrity of what it returns.
pub fn aggregate_checked(defense: &dyn Defense, subs: &[UpdateVector], ctx: &ServerContext<'_>) -> Result<Aggregate> {
    let d = check_batch(subs)?;
    let out = defense.aggregate(subs, ctx)?;
    if out.vector.len() != d {
        return Err(Error::Integrity(format!(
            "{} returned {} coordinates, expected {d}",
            defense.name(),
            out.vector.len()
        )));
    }
    if !out.vector.is_finite() {
        return Err(Error::Integrity(format!("{} returned non-finite values", defense.name())));
    }
    Ok(out)
}

type Factory = fn(&mut Params, Option<usize>) -> Result<Box<dyn Defense>>;

/// Registry row: whether the rule assumes a known adversary bound (and so
/// receives `f`), plus its factory.
pub struct DefenseEntry {
    pub bounded: bool,
    pub needs_root: bool,
    pub build: Factory,
}

fn boxed<D: Defense + 'static>(d: D) -> Result<Box<dyn Defense>> {
    Ok(Box::new(d))
}

fn need_f(f: Option<usize>) -> usize {
    f.unwrap_or(0)
}

pub static DEFENSES: &[(&str, DefenseEntry)] = &[
    ("mean", DefenseEntry { bounded: false, needs_root: false, build: |p, _| boxed(Mean::from_params(p)?) }),
    ("krum", DefenseEntry { bounded: true, needs_root: false, build: |p, f| boxed(Krum::from_params(p, need_f(f))?) }),
    ("multikrum", DefenseEntry { bounded: true, needs_root: false, build: |p, f| boxed(MultiKrum::from_params(p, need_f(f))?) }),
    ("median", DefenseEntry { bounded: false, needs_root: false, build: |p, _| boxed(Median::from_params(p)?) }),
    ("trimmedmean", DefenseEntry { bounded: false, needs_root: false, build: |p, _| boxed(TrimmedMean::from_params(p)?) }),
    ("bulyan", DefenseEntry { bounded: true, needs_root: false, build: |p, f| boxed(Bulyan::from_params(p, need_f(f))?) }),
    ("rfa", DefenseEntry { bounded: false, needs_root: false, build: |p, _| boxed(Rfa::from_params(p)?) }),
    ("fltrust", DefenseEntry { bounded: false, needs_root: true, build: |p, _| boxed(FlTrust::from_params(p)?) }),
    ("centeredclipping", DefenseEntry { bounded: false, needs_root: false, build: |p, _| boxed(CenteredClipping::from_params(p)?) }),
    ("dnc", DefenseEntry { bounded: true, needs_root: false, build: |p, f| boxed(DnC::from_params(p, need_f(f))?) }),
    ("bucketing", DefenseEntry { bounded: true, needs_root: false, build: |p, f| boxed(Bucketing::from_params(p, need_f(f))?) }),
    ("signguard", DefenseEntry { bounded: false, needs_root: false, build: |p, _| boxed(SignGuard::from_params(p)?) }),
    ("auror", DefenseEntry { bounded: false, needs_root: false, build: |p, _| boxed(Auror::from_params(p)?) }),
    ("foolsgold", DefenseEntry { bounded: false, needs_root: false, build: |p, _| boxed(FoolsGold::from_params(p)?) }),
    ("normclipping", DefenseEntry { bounded: false, needs_root: false, build: |p, _| boxed(NormClipping::from_params(p)?) }),
    ("crfl", DefenseEntry { bounded: false, needs_root: false, build: |p, _| boxed(Crfl::from_params(p)?) }),
    ("deepsight", DefenseEntry { bounded: false, needs_root: false, build: |p, _| boxed(DeepSight::from_params(p)?) }),
    ("flame", DefenseEntry { bounded: false, needs_root: false, build: |p, _| boxed(Flame::from_params(p)?) }),
];

pub fn defense_names() -> Vec<&'static str> {
    DEFENSES.iter().map(|(n, _)| *n).collect()
}

pub fn defense_entry(name: &str) -> Result<&'static DefenseEntry> {
    lookup("defense", name, DEFENSES)
}

/// Builds a rule by name. `f` is forwarded only to bounded-adversary rules;
/// a `f` key in `params` overrides it.
pub fn build_defense(name: &str, mut params: Params, f: usize) -> Result<Box<dyn Defense>> {
    let entry = defense_entry(name)?;
    let f_override = if entry.bounded { params.opt_usize("f")? } else { None };
    let f_given = entry.bounded.then_some(f_override.unwrap_or(f));
    let defense = (entry.build)(&mut params, f_given)?;
    params.finish(name)?;
    Ok(defense)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_eighteen_rules() {
        assert_eq!(DEFENSES.len(), 18);
        for name in defense_names() {
            build_defense(name, Params::new(), 1).unwrap();
        }
    }

    #[test]
    fn lookup_suggests() {
        let err = build_defense("kruum", Params::new(), 1).unwrap_err().to_string();
        assert!(err.contains("krum"), "{err}");
    }

    #[test]
    fn unknown_parameter_rejected() {
        let p = Params::from_pairs([("betta", "0.1")]);
        assert!(build_defense("trimmedmean", p, 0).is_err());
    }

    #[test]
    fn unbounded_rules_never_see_f() {
        // `f` is not a recognised key for rules without the bounded-adversary assumption
        let p = Params::from_pairs([("f", "2")]);
        assert!(build_defense("median", p, 0).is_err());
    }
}
