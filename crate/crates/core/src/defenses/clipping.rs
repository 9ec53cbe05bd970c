//! Magnitude-bounding rules: FLTrust, CenteredClipping, NormClipping, CRFL.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Aggregate, Defense, ServerContext};
use crate::error::{config_err, Error, Result};
use crate::model::{argmax, Model};
use crate::params::Params;
use crate::vector::{check_batch, clip_to_norm, cosine_unchecked, mean, norm, UpdateVector};

/// Trust-bootstrapped aggregation around the server's root-data update.
#[derive(Debug, Clone, Default)]
pub struct FlTrust;

impl FlTrust {
    pub fn from_params(_: &mut Params) -> Result<Self> {
        Ok(Self)
    }

    /// ReLU-clipped cosine similarity of each update to `g0`.
    pub fn trust_scores(subs: &[UpdateVector], g0: &[f64]) -> Vec<f64> {
        subs.iter()
            .map(|g| cosine_unchecked(g, g0).value.max(0.0))
            .collect()
    }
}

impl Defense for FlTrust {
    fn name(&self) -> &'static str {
        "fltrust"
    }

    fn aggregate(&self, subs: &[UpdateVector], ctx: &ServerContext<'_>) -> Result<Aggregate> {
        let d = check_batch(subs)?;
        let g0 = ctx
            .root_update
            .ok_or_else(|| Error::Harness("fltrust needs a server root update".into()))?;
        if g0.len() != d {
            return Err(Error::Dimension {
                expected: d,
                found: g0.len(),
            });
        }
        let g0_norm = norm(g0);
        let trust = Self::trust_scores(subs, g0);
        let mut acc = UpdateVector::zeros(d);
        let mut total = 0.0;
        let mut survivors = Vec::new();
        for (i, (g, s)) in subs.iter().zip(&trust).enumerate() {
            let gn = norm(g);
            if *s <= 0.0 || gn == 0.0 {
                continue;
            }
            acc.axpy(s * g0_norm / gn, g);
            total += s;
            survivors.push(i);
        }
        if total <= 0.0 {
            return Ok(Aggregate {
                vector: UpdateVector(g0.to_vec()),
                survivors: Some(Vec::new()),
                fallback: true,
            });
        }
        acc.iter_mut().for_each(|x| *x /= total);
        Ok(Aggregate::filtered(acc, survivors))
    }
}

/// Iterative clipping centred on the previous round's aggregate.
#[derive(Debug, Clone)]
pub struct CenteredClipping {
    pub tau: f64,
    pub iterations: usize,
}

impl CenteredClipping {
    pub fn from_params(p: &mut Params) -> Result<Self> {
        let tau = p.positive("tau", 10.0)?;
        let iterations = p.usize("iterations", 1)?;
        if iterations == 0 {
            return Err(config_err("centeredclipping.iterations must be >= 1"));
        }
        Ok(Self { tau, iterations })
    }
}

impl Defense for CenteredClipping {
    fn name(&self) -> &'static str {
        "centeredclipping"
    }

    fn aggregate(&self, subs: &[UpdateVector], ctx: &ServerContext<'_>) -> Result<Aggregate> {
        let d = check_batch(subs)?;
        let mut v = match ctx.previous_aggregate {
            Some(prev) if prev.len() == d => prev.to_vec(),
            Some(prev) => {
                return Err(Error::Dimension {
                    expected: d,
                    found: prev.len(),
                })
            }
            None => vec![0.0; d],
        };
        let n = subs.len() as f64;
        for _ in 0..self.iterations {
            let mut step = vec![0.0; d];
            for x in subs {
                let diff: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - b).collect();
                let dn = norm(&diff);
                let scale = if dn > 0.0 { (self.tau / dn).min(1.0) } else { 1.0 };
                for (s, df) in step.iter_mut().zip(&diff) {
                    *s += df * scale / n;
                }
            }
            for (vi, s) in v.iter_mut().zip(&step) {
                *vi += s;
            }
        }
        Ok(Aggregate::plain(UpdateVector(v)))
    }
}

/// Clip every update to norm `bound`, then average.
#[derive(Debug, Clone)]
pub struct NormClipping {
    pub bound: f64,
}

impl NormClipping {
    pub fn from_params(p: &mut Params) -> Result<Self> {
        Ok(Self {
            bound: p.positive("bound", 1.0)?,
        })
    }
}

impl Defense for NormClipping {
    fn name(&self) -> &'static str {
        "normclipping"
    }

    fn aggregate(&self, subs: &[UpdateVector], _: &ServerContext<'_>) -> Result<Aggregate> {
        check_batch(subs)?;
        let clipped: Vec<UpdateVector> = subs
            .iter()
            .map(|v| {
                let mut c = v.clone();
                clip_to_norm(&mut c, self.bound);
                c
            })
            .collect();
        Ok(Aggregate::plain(mean(&clipped)?))
    }
}

/// Mean aggregation followed by clipping the global parameters to `rho` and
/// perturbing them with Gaussian noise of std `sigma`.
#[derive(Debug, Clone)]
pub struct Crfl {
    pub rho: f64,
    pub sigma: f64,
    /// Noisy copies used by smoothed inference.
    pub votes: usize,
}

impl Crfl {
    pub fn from_params(p: &mut Params) -> Result<Self> {
        let rho = p.positive("rho", 30.0)?;
        let sigma = p.f64("sigma", 0.002)?;
        if sigma < 0.0 {
            return Err(config_err("crfl.sigma must be >= 0"));
        }
        let votes = p.usize("votes", 5)?;
        if votes == 0 {
            return Err(config_err("crfl.votes must be >= 1"));
        }
        Ok(Self { rho, sigma, votes })
    }
}

impl Defense for Crfl {
    fn name(&self) -> &'static str {
        "crfl"
    }

    fn aggregate(&self, subs: &[UpdateVector], _: &ServerContext<'_>) -> Result<Aggregate> {
        Ok(Aggregate::plain(mean(subs)?))
    }

    fn post_update(&self, global: &mut [f64], ctx: &ServerContext<'_>) -> Result<()> {
        clip_to_norm(global, self.rho);
        if self.sigma > 0.0 {
            let noise = Normal::new(0.0, self.sigma).map_err(|e| config_err(e.to_string()))?;
            let mut rng = ctx.rng("defense/crfl");
            global.iter_mut().for_each(|w| *w += noise.sample(&mut rng));
        }
        Ok(())
    }

    fn smoothing(&self) -> Option<(f64, usize)> {
        Some((self.sigma, self.votes))
    }
}

/// Randomised-smoothing prediction: majority vote over `votes` copies of the
/// model with N(0, sigma^2) parameter noise. Ties go to the lowest class.
pub fn crfl_smoothed_predict(model: &Model, x: &[f64], sigma: f64, votes: usize, rng: &mut impl Rng) -> Result<usize> {
    if sigma == 0.0 {
        return Ok(model.predict(x));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| config_err(e.to_string()))?;
    let mut counts = vec![0usize; model.arch.classes()];
    for _ in 0..votes.max(1) {
        let mut noisy = model.clone();
        noisy.params.iter_mut().for_each(|w| *w += noise.sample(rng));
        counts[noisy.predict(x)] += 1;
    }
    let as_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    Ok(argmax(&as_f))
}
