//! Backdoor-oriented filters: DeepSight and FLAME.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::cluster::{single_linkage_admit, two_means};
use super::statistical::norms;
use super::{Aggregate, Defense, ServerContext};
use crate::error::{config_err, Error, Result};
use crate::model::{softmax, Model};
use crate::params::Params;
use crate::vector::{check_batch, clip_to_norm, cosine_unchecked, mean, median, UpdateVector};

fn clipped_mean(subs: &[UpdateVector], idx: &[usize], radius: f64) -> Result<UpdateVector> {
    let clipped: Vec<UpdateVector> = idx
        .iter()
        .map(|&i| {
            let mut v = subs[i].clone();
            clip_to_norm(&mut v, radius);
            v
        })
        .collect();
    mean(&clipped)
}

/// Classifies updates by output-layer energy (NEUP), probe-output ratios
/// (DDif) and bias-update cosine distances, then drops clusters dominated
/// by suspicious updates.
#[derive(Debug, Clone)]
pub struct DeepSight {
    /// Fraction of the largest NEUP a neuron must reach to count as an exceedance.
    pub tau: f64,
    pub probes: usize,
    /// Clusters with at least this share of suspicious members are dropped.
    pub drop_fraction: f64,
}

impl DeepSight {
    pub fn from_params(p: &mut Params) -> Result<Self> {
        let tau = p.positive("tau", 0.01)?;
        let probes = p.usize("probes", 2000)?;
        let drop_fraction = p.positive("drop_fraction", 1.0 / 3.0)?;
        if probes == 0 {
            return Err(config_err("deepsight.probes must be >= 1"));
        }
        Ok(Self {
            tau,
            probes,
            drop_fraction,
        })
    }

    /// Normalised update energy of each output neuron.
    pub fn neup(global: &Model, update: &[f64]) -> Vec<f64> {
        let arch = global.arch;
        let classes = arch.classes();
        let w = &update[arch.output_weight_range()];
        let b = &update[arch.output_bias_range()];
        let fan_in = w.len() / classes;
        let energy: Vec<f64> = (0..classes)
            .map(|k| {
                let e = w[k * fan_in..(k + 1) * fan_in].iter().map(|x| x.abs()).sum::<f64>() + b[k].abs();
                e * e
            })
            .collect();
        let total: f64 = energy.iter().sum();
        if total == 0.0 {
            return vec![1.0 / classes as f64; classes];
        }
        energy.into_iter().map(|e| e / total).collect()
    }

    /// Count of neurons whose NEUP reaches `max(tau, 1/classes)` of the maximum.
    pub fn exceedances(&self, neup: &[f64]) -> usize {
        let top = neup.iter().copied().fold(0.0, f64::max);
        let cut = self.tau.max(1.0 / neup.len() as f64) * top;
        neup.iter().filter(|&&c| c >= cut).count()
    }

    /// Suspicion labels: a client is suspicious when its exceedance count is
    /// at most half the median count.
    pub fn suspicious(&self, neups: &[Vec<f64>]) -> Vec<bool> {
        let te: Vec<f64> = neups.iter().map(|c| self.exceedances(c) as f64).collect();
        let half = median(&te) / 2.0;
        te.iter().map(|&t| t <= half).collect()
    }
}

impl Defense for DeepSight {
    fn name(&self) -> &'static str {
        "deepsight"
    }

    fn aggregate(&self, subs: &[UpdateVector], ctx: &ServerContext<'_>) -> Result<Aggregate> {
        check_batch(subs)?;
        let global = ctx
            .global
            .ok_or_else(|| Error::Harness("deepsight needs the global model".into()))?;
        let n = subs.len();
        let classes = global.arch.classes();
        let neups: Vec<Vec<f64>> = subs.iter().map(|u| Self::neup(global, u)).collect();
        let suspicious = self.suspicious(&neups);

        let mut rng = ctx.rng("defense/deepsight");
        let inputs = global.arch.inputs();
        let probes: Vec<Vec<f64>> = (0..self.probes)
            .map(|_| (0..inputs).map(|_| rng.random::<f64>()).collect())
            .collect();
        let base: Vec<Vec<f64>> = probes.iter().map(|x| global.forward(x)).collect();
        let ddifs: Vec<Vec<f64>> = subs
            .iter()
            .map(|u| {
                let local = Model::new(global.arch, global.params.add(u)).expect("same architecture");
                let mut acc = vec![0.0; classes];
                for (x, pg) in probes.iter().zip(&base) {
                    let pl = softmax(&local.logits(x));
                    for k in 0..classes {
                        acc[k] += pl[k] / pg[k].max(1e-12) / self.probes as f64;
                    }
                }
                acc
            })
            .collect();
        let bias = global.arch.output_bias_range();
        let cos_rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| 1.0 - cosine_unchecked(&subs[i][bias.clone()], &subs[j][bias.clone()]).value)
                    .collect()
            })
            .collect();
        let features: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut f = ddifs[i].clone();
                f.extend_from_slice(&neups[i]);
                f.extend_from_slice(&cos_rows[i]);
                f
            })
            .collect();
        let labels = two_means(&features);
        let mut survivors = Vec::new();
        for cluster in 0..2 {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == cluster).collect();
            if members.is_empty() {
                continue;
            }
            let bad = members.iter().filter(|&&i| suspicious[i]).count();
            if (bad as f64) < self.drop_fraction * members.len() as f64 {
                survivors.extend(members);
            }
        }
        survivors.sort_unstable();
        if survivors.is_empty() {
            return Aggregate::median_fallback(subs);
        }
        let radius = median(&norms(subs));
        Ok(Aggregate::filtered(clipped_mean(subs, &survivors, radius)?, survivors))
    }
}

/// Noise multiplier `(1/eps) * sqrt(2 ln(1.25/delta))`.
pub fn flame_lambda(epsilon: f64, delta: f64) -> f64 {
    (2.0 * (1.25 / delta).ln()).sqrt() / epsilon
}

/// Cosine single-linkage admission, median-norm clipping, and Gaussian noise.
#[derive(Debug, Clone)]
pub struct Flame {
    pub epsilon: f64,
    pub delta: f64,
}

impl Flame {
    pub fn from_params(p: &mut Params) -> Result<Self> {
        let epsilon = p.positive("epsilon", 3000.0)?;
        let delta = p.positive("delta", 1e-5)?;
        if delta >= 1.25 {
            return Err(config_err("flame.delta must be < 1.25"));
        }
        Ok(Self { epsilon, delta })
    }

    /// Admitted indices: the first single-linkage component over cosine
    /// distance to hold a strict majority.
    pub fn admitted(subs: &[UpdateVector]) -> Option<Vec<usize>> {
        let n = subs.len();
        let dist: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { 0.0 } else { 1.0 - cosine_unchecked(&subs[i], &subs[j]).value })
                    .collect()
            })
            .collect();
        single_linkage_admit(&dist, n / 2 + 1)
    }

    /// Aggregate before noise, plus the median norm used for clipping.
    pub fn denoised(&self, subs: &[UpdateVector]) -> Result<Option<(UpdateVector, Vec<usize>, f64)>> {
        check_batch(subs)?;
        let Some(admitted) = Self::admitted(subs) else {
            return Ok(None);
        };
        let radius = median(&norms(subs));
        Ok(Some((clipped_mean(subs, &admitted, radius)?, admitted, radius)))
    }
}

impl Defense for Flame {
    fn name(&self) -> &'static str {
        "flame"
    }

    fn aggregate(&self, subs: &[UpdateVector], ctx: &ServerContext<'_>) -> Result<Aggregate> {
        if subs.len() < 3 {
            return Err(config_err("flame needs at least 3 submissions"));
        }
        let Some((mut v, admitted, radius)) = self.denoised(subs)? else {
            return Aggregate::median_fallback(subs);
        };
        let sigma = flame_lambda(self.epsilon, self.delta) * radius;
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|e| config_err(e.to_string()))?;
            let mut rng = ctx.rng("defense/flame");
            v.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
        }
        Ok(Aggregate::filtered(v, admitted))
    }
}
