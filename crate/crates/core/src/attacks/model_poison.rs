//! Model poisoning: Gaussian, SignFlipping, ALIE, IPM, Mimic, Fang, MinMax
//! and MinSum.

use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use super::{Attack, AttackContext, AttackSetup, Crafted, Knowledge, Stage};
use crate::error::{config_err, Error, Result};
use crate::params::Params;
use crate::vector::{coordinate_std, mean, norm, sq_dist, UpdateVector};

fn need_benign<'a>(ctx: &'a AttackContext<'_>, who: &str) -> Result<&'a [UpdateVector]> {
    if ctx.benign.is_empty() {
        return Err(Error::Harness(format!("{who} needs at least one benign update")));
    }
    Ok(ctx.benign)
}

/// Each adversary submits i.i.d. `N(0, sigma^2)` noise.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub sigma: f64,
}

impl Gaussian {
    pub fn from_params(p: &mut Params) -> Result<Self> {
        Ok(Self {
            sigma: p.positive("sigma", 30.0)?,
        })
    }
}

impl Attack for Gaussian {
    fn name(&self) -> &'static str {
        "gaussian"
    }
    fn stage(&self) -> Stage {
        Stage::PostTraining
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::NONE
    }

    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Crafted> {
        let noise = Normal::new(0.0, self.sigma).map_err(|e| config_err(e.to_string()))?;
        let d = ctx.global.len();
        let updates = (0..ctx.own.len())
            .map(|k| {
                let mut rng = ctx.rng("attack/gaussian", ctx.first + k);
                UpdateVector((0..d).map(|_| noise.sample(&mut rng)).collect())
            })
            .collect();
        Ok(Crafted::new(updates))
    }
}

/// `g_mal = -lambda * g`.
#[derive(Debug, Clone)]
pub struct SignFlipping {
    pub lambda: f64,
}

impl SignFlipping {
    pub fn from_params(p: &mut Params) -> Result<Self> {
        Ok(Self {
            lambda: p.positive("lambda", 1.0)?,
        })
    }
}

impl Attack for SignFlipping {
    fn name(&self) -> &'static str {
        "signflipping"
    }
    fn stage(&self) -> Stage {
        Stage::PostTraining
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::NONE
    }

    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Crafted> {
        Ok(Crafted::new(ctx.own.iter().map(|g| g.scaled(-self.lambda)).collect()))
    }
}

/// Largest `z` with `Phi(z) < (n - floor(n/2 + 1)) / (n - f)`, i.e. the
/// standard-normal quantile of that ratio.
pub fn alie_z_max(n: usize, f: usize) -> Result<f64> {
    if f >= n {
        return Err(config_err(format!("ALIE needs at least one benign client, got n={n}, f={f}")));
    }
    let s = (n - (n / 2 + 1)) as f64 / (n - f) as f64;
    if !(s > 0.0 && s < 1.0) {
        return Err(config_err(format!(
            "ALIE quantile {s} outside (0, 1) for n={n}, f={f}"
        )));
    }
    let phi = StdNormal::standard();
    Ok(phi.inverse_cdf(s))
}

/// A Little Is Enough: `mu - z_max * sigma` per coordinate of the benign
/// updates.
#[derive(Debug, Clone)]
pub struct Alie {
    pub z_max: f64,
}

impl Alie {
    pub fn from_params(p: &mut Params, setup: &AttackSetup) -> Result<Self> {
        let z_max = match p.opt_f64("z")? {
            Some(z) => z,
            None => alie_z_max(setup.n, setup.f)?,
        };
        Ok(Self { z_max })
    }
}

impl Attack for Alie {
    fn name(&self) -> &'static str {
        "alie"
    }
    fn stage(&self) -> Stage {
        Stage::UpdateTime
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::BENIGN
    }

    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Crafted> {
        let benign = need_benign(ctx, "alie")?;
        let mu = mean(benign)?;
        let sigma = coordinate_std(benign, &mu);
        let g: Vec<f64> = mu.iter().zip(&sigma).map(|(m, s)| m - self.z_max * s).collect();
        Ok(Crafted::new(vec![UpdateVector(g); ctx.own.len()]))
    }
}

/// Inner-product manipulation: `-epsilon` times the benign sum (or mean).
#[derive(Debug, Clone)]
pub struct Ipm {
    pub epsilon: f64,
    pub use_mean: bool,
}

impl Ipm {
    pub fn from_params(p: &mut Params) -> Result<Self> {
        Ok(Self {
            epsilon: p.positive("epsilon", 0.5)?,
            use_mean: p.bool("use_mean", false)?,
        })
    }
}

impl Attack for Ipm {
    fn name(&self) -> &'static str {
        "ipm"
    }
    fn stage(&self) -> Stage {
        Stage::UpdateTime
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::BENIGN
    }

    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Crafted> {
        let benign = need_benign(ctx, "ipm")?;
        let mut sum = UpdateVector::zeros(ctx.global.len());
        for g in benign {
            sum.axpy(1.0, g);
        }
        let k = if self.use_mean {
            self.epsilon / benign.len() as f64
        } else {
            self.epsilon
        };
        Ok(Crafted::new(vec![sum.scaled(-k); ctx.own.len()]))
    }
}

/// Every adversary copies one fixed benign update.
#[derive(Debug, Clone)]
pub struct Mimic {
    /// Position in the benign list; 0 is the first benign client.
    pub target: usize,
}

impl Mimic {
    pub fn from_params(p: &mut Params) -> Result<Self> {
        Ok(Self {
            target: p.usize("target", 0)?,
        })
    }
}

impl Attack for Mimic {
    fn name(&self) -> &'static str {
        "mimic"
    }
    fn stage(&self) -> Stage {
        Stage::UpdateTime
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::BENIGN
    }

    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Crafted> {
        let benign = need_benign(ctx, "mimic")?;
        let copy = benign.get(self.target).ok_or_else(|| {
            config_err(format!(
                "mimic.target {} out of range for {} benign clients",
                self.target,
                benign.len()
            ))
        })?;
        Ok(Crafted::new(vec![copy.clone(); ctx.own.len()]))
    }
}

/// Index Krum would select among `candidates` when told to expect `f`
/// attackers. Uses `max(len - f - 2, 1)` neighbours so it stays defined when
/// the server-side precondition does not hold. Ties go to the lower index.
pub fn fang_krum_pick(candidates: &[UpdateVector], f: usize) -> usize {
    let n = candidates.len();
    if n <= 1 {
        return 0;
    }
    let k = n.saturating_sub(f + 2).clamp(1, n - 1);
    let mut best: Option<(usize, f64)> = None;
    let mut row = Vec::with_capacity(n - 1);
    for i in 0..n {
        row.clear();
        row.extend((0..n).filter(|&j| j != i).map(|j| sq_dist(&candidates[i], &candidates[j])));
        row.sort_unstable_by(f64::total_cmp);
        let score: f64 = row[..k].iter().sum();
        match best {
            Some((_, b)) if score >= b - 1e-9 * b.abs() => {}
            _ => best = Some((i, score)),
        }
    }
    best.map_or(0, |b| b.0)
}

/// Krum-targeted Fang attack in update space: every adversary submits
/// `-lambda * sign(mean of the adversaries' own updates)`, with `lambda`
/// halved from `lambda` until the local Krum replay picks a crafted copy.
#[derive(Debug, Clone)]
pub struct Fang {
    pub lambda: f64,
    pub min_lambda: f64,
}

impl Fang {
    pub fn from_params(p: &mut Params) -> Result<Self> {
        let lambda = p.positive("lambda", 10.0)?;
        let min_lambda = p.positive("min_lambda", 1e-5)?;
        if min_lambda > lambda {
            return Err(config_err("fang.min_lambda must not exceed fang.lambda"));
        }
        Ok(Self { lambda, min_lambda })
    }

    /// Accepted `lambda` (or the last one tried) and whether the search succeeded.
    pub fn search(&self, own: &[UpdateVector], benign: &[UpdateVector]) -> Result<(f64, Vec<f64>, bool)> {
        let f = own.len();
        let direction: Vec<f64> = mean(own)?.iter().map(|&x| sign(x)).collect();
        let mut pool: Vec<UpdateVector> = Vec::with_capacity(f + benign.len());
        pool.resize(f, UpdateVector::zeros(direction.len()));
        pool.extend(benign.iter().cloned());
        let mut lambda = self.lambda;
        loop {
            let cand = UpdateVector(direction.iter().map(|s| -lambda * s).collect());
            for slot in pool.iter_mut().take(f) {
                slot.clone_from(&cand);
            }
            if fang_krum_pick(&pool, f) < f {
                return Ok((lambda, direction, true));
            }
            if lambda / 2.0 < self.min_lambda {
                return Ok((lambda, direction, false));
            }
            lambda /= 2.0;
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Attack for Fang {
    fn name(&self) -> &'static str {
        "fang"
    }
    fn stage(&self) -> Stage {
        Stage::UpdateTime
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::COLLUDING
    }

    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Crafted> {
        if ctx.own.is_empty() {
            return Ok(Crafted::new(Vec::new()));
        }
        let (lambda, direction, accepted) = self.search(ctx.own, ctx.benign)?;
        let g = UpdateVector(direction.iter().map(|s| -lambda * s).collect());
        Ok(Crafted {
            updates: vec![g; ctx.own.len()],
            warning: (!accepted).then(|| format!("fang: no lambda >= {} was selected by Krum", self.min_lambda)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinRule {
    /// MinMax: largest distance to any benign update.
    MaxDistance,
    /// MinSum: summed squared distance to all benign updates.
    SumDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    InverseUnit,
    InverseSign,
    InverseStd,
}

impl Perturbation {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Self::InverseUnit),
            "sign" => Ok(Self::InverseSign),
            "std" => Ok(Self::InverseStd),
            other => Err(config_err(format!(
                "perturbation `{other}` is not one of unit, sign, std"
            ))),
        }
    }

    pub fn vector(self, benign: &[UpdateVector], center: &[f64]) -> Vec<f64> {
        match self {
            Self::InverseUnit => {
                let n = norm(center);
                if n == 0.0 {
                    vec![0.0; center.len()]
                } else {
                    center.iter().map(|x| -x / n).collect()
                }
            }
            Self::InverseSign => center.iter().map(|&x| -sign(x)).collect(),
            Self::InverseStd => coordinate_std(benign, center).into_iter().map(|s| -s).collect(),
        }
    }
}

fn min_rule_lhs(rule: MinRule, g: &[f64], benign: &[UpdateVector]) -> f64 {
    match rule {
        MinRule::MaxDistance => benign.iter().map(|b| sq_dist(g, b)).fold(0.0, f64::max).sqrt(),
        MinRule::SumDistance => benign.iter().map(|b| sq_dist(g, b)).sum(),
    }
}

fn min_rule_rhs(rule: MinRule, benign: &[UpdateVector]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in benign.iter().enumerate() {
        match rule {
            MinRule::MaxDistance => {
                for b in &benign[i + 1..] {
                    best = best.max(sq_dist(a, b));
                }
            }
            MinRule::SumDistance => {
                best = best.max(benign.iter().map(|b| sq_dist(a, b)).sum());
            }
        }
    }
    match rule {
        MinRule::MaxDistance => best.sqrt(),
        MinRule::SumDistance => best,
    }
}

/// Largest `gamma` in `[0, 20]` (50 bisection steps) for which
/// `center + gamma * direction` satisfies `rule` against `benign`.
pub fn min_attack_gamma(benign: &[UpdateVector], center: &[f64], direction: &[f64], rule: MinRule) -> f64 {
    let rhs = min_rule_rhs(rule, benign);
    // absorbs rounding in the mean when every benign update is the same
    let slack = 1e-12 * rhs
        + match rule {
            MinRule::MaxDistance => 1e-14 * norm(center),
            MinRule::SumDistance => 1e-28 * norm(center).powi(2) * benign.len() as f64,
        };
    let ok = |gamma: f64| {
        let g: Vec<f64> = center.iter().zip(direction).map(|(c, p)| c + gamma * p).collect();
        min_rule_lhs(rule, &g, benign) <= rhs + slack
    };
    let (mut lo, mut hi) = (0.0, 20.0);
    if ok(hi) {
        return hi;
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// MinMax / MinSum: push the benign mean as far along the perturbation as the
/// distance constraint allows.
#[derive(Debug, Clone)]
pub struct MinAttack {
    pub rule: MinRule,
    pub perturbation: Perturbation,
}

impl MinAttack {
    pub fn from_params(p: &mut Params, rule: MinRule) -> Result<Self> {
        Ok(Self {
            rule,
            perturbation: Perturbation::parse(&p.string("perturbation", "unit"))?,
        })
    }

    pub fn build(&self, benign: &[UpdateVector]) -> Result<(UpdateVector, f64)> {
        let center = mean(benign)?;
        let dir = self.perturbation.vector(benign, &center);
        let gamma = min_attack_gamma(benign, &center, &dir, self.rule);
        let mut g = center;
        g.axpy(gamma, &dir);
        Ok((g, gamma))
    }
}

impl Attack for MinAttack {
    fn name(&self) -> &'static str {
        match self.rule {
            MinRule::MaxDistance => "minmax",
            MinRule::SumDistance => "minsum",
        }
    }
    fn stage(&self) -> Stage {
        Stage::UpdateTime
    }
    fn knowledge(&self) -> Knowledge {
        Knowledge::BENIGN
    }

    fn craft(&self, ctx: &AttackContext<'_>) -> Result<Crafted> {
        let (g, _) = self.build(need_benign(ctx, self.name())?)?;
        Ok(Crafted::new(vec![g; ctx.own.len()]))
    }
}
