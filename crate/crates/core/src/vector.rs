//! Flat update vectors and the distance/statistics primitives every
//! aggregator is built from. All arithmetic is `f64`; nothing here mutates
//! its inputs.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flattened model update (gradient, weight delta, or full weights).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UpdateVector(pub Vec<f64>);

impl UpdateVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.iter().map(|x| x * k).collect())
    }

    pub fn add(&self, other: &[f64]) -> Self {
        Self(self.0.iter().zip(other).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &[f64]) -> Self {
        Self(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &[f64]) {
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += k * b;
        }
    }
}

impl From<Vec<f64>> for UpdateVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for UpdateVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for UpdateVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

pub fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Validates a batch of updates: non-empty, equal lengths, finite entries.
/// Returns the common dimension.
pub fn check_batch(vs: &[UpdateVector]) -> Result<usize> {
    let first = vs.first().ok_or(Error::EmptyInput("update list"))?;
    let d = first.len();
    for v in vs {
        if v.len() != d {
            return Err(Error::Dimension {
                expected: d,
                found: v.len(),
            });
        }
        check_finite(v, "update vector")?;
    }
    Ok(d)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Squared Euclidean distance without validation; callers check dimensions.
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len(a, b)?;
    check_finite(a, "l2_distance input")?;
    check_finite(b, "l2_distance input")?;
    Ok(sq_dist(a, b).sqrt())
}

/// Cosine similarity. `degenerate` is set when either input has zero norm, in
/// which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine> {
    check_same_len(a, b)?;
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> Cosine {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// 1-D median; even counts take the mean of the two middle values.
/// Reorders `xs`.
pub fn median_in_place(xs: &mut [f64]) -> f64 {
    let n = xs.len();
    assert!(n > 0, "median of empty slice");
    let mid = n / 2;
    let (lower, m, _) = xs.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_max + upper)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    median_in_place(&mut xs.to_vec())
}

pub fn coordinate_median(vs: &[UpdateVector]) -> Result<UpdateVector> {
    let d = check_batch(vs)?;
    let mut column = vec![0.0; vs.len()];
    let out = (0..d)
        .map(|j| {
            for (c, v) in column.iter_mut().zip(vs) {
                *c = v[j];
            }
            median_in_place(&mut column)
        })
        .collect();
    Ok(UpdateVector(out))
}

pub fn mean(vs: &[UpdateVector]) -> Result<UpdateVector> {
    let d = check_batch(vs)?;
    let mut acc = vec![0.0; d];
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    let k = 1.0 / vs.len() as f64;
    acc.iter_mut().for_each(|a| *a *= k);
    Ok(UpdateVector(acc))
}

/// Weighted mean `Σ w_i v_i / Σ w_i`. Returns `None` if the weights sum to 0.
pub fn weighted_mean(vs: &[UpdateVector], weights: &[f64]) -> Option<UpdateVector> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || vs.is_empty() {
        return None;
    }
    let mut acc = UpdateVector::zeros(vs[0].len());
    for (v, w) in vs.iter().zip(weights) {
        if *w != 0.0 {
            acc.axpy(w / total, v);
        }
    }
    Some(acc)
}

/// Per-coordinate sample standard deviation (n - 1 denominator; 0 for n = 1).
pub fn coordinate_std(vs: &[UpdateVector], mean: &[f64]) -> Vec<f64> {
    let n = vs.len();
    if n < 2 {
        return vec![0.0; mean.len()];
    }
    let mut acc = vec![0.0; mean.len()];
    for v in vs {
        for ((a, x), m) in acc.iter_mut().zip(v.iter()).zip(mean) {
            *a += (x - m) * (x - m);
        }
    }
    acc.into_iter().map(|s| (s / (n - 1) as f64).sqrt()).collect()
}

/// Rescales `v` onto the L2 ball of radius `radius` if it lies outside.
pub fn clip_to_norm(v: &mut [f64], radius: f64) {
    let n = norm(v);
    if n > radius && n > 0.0 {
        let k = radius / n;
        v.iter_mut().for_each(|x| *x *= k);
    }
}

/// Full matrix of pairwise squared distances.
pub(crate) fn pairwise_sq_dists(vs: &[UpdateVector]) -> Vec<Vec<f64>> {
    let n = vs.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(&vs[i], &vs[j]);
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn uv(v: &[f64]) -> UpdateVector {
        UpdateVector(v.to_vec())
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(l2_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(l2_distance(&[1.0, 2.0, 3.0], &[4.0, 6.0, 3.0]).unwrap(), 5.0);
    }

    #[test]
    fn l2_errors() {
        assert!(matches!(
            l2_distance(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            l2_distance(&[f64::NAN], &[1.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap().value, 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-2.0, 0.0]).unwrap().value, -1.0);
        let z = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.degenerate);
    }

    #[test]
    fn median_examples() {
        let m = coordinate_median(&[uv(&[1., 2.]), uv(&[3., 4.]), uv(&[5., 6.])]).unwrap();
        assert_eq!(m.0, vec![3.0, 4.0]);
        let m = coordinate_median(&[uv(&[1.]), uv(&[2.]), uv(&[3.]), uv(&[4.])]).unwrap();
        assert_eq!(m.0, vec![2.5]);
        assert!(matches!(coordinate_median(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn median_matches_sort_oracle() {
        let mut rng = crate::rng::stream(3, "median-oracle", 0, 0);
        for _ in 0..50 {
            let vs: Vec<UpdateVector> = (0..5)
                .map(|_| UpdateVector((0..3).map(|_| rng.random_range(-5.0..5.0)).collect()))
                .collect();
            let got = coordinate_median(&vs).unwrap();
            for j in 0..3 {
                let mut col: Vec<f64> = vs.iter().map(|v| v[j]).collect();
                col.sort_by(f64::total_cmp);
                assert_eq!(got[j], col[2]);
            }
        }
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 3)
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in vec3(), b in vec3(), c in vec3()) {
            let ab = l2_distance(&a, &b).unwrap();
            let bc = l2_distance(&b, &c).unwrap();
            let ac = l2_distance(&a, &c).unwrap();
            prop_assert!(ac <= (ab + bc) * (1.0 + 1e-9) + 1e-12);
            prop_assert_eq!(ab, l2_distance(&b, &a).unwrap());
        }

        #[test]
        fn median_permutation_invariant(
            rows in prop::collection::vec(vec3(), 1..8),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let vs: Vec<UpdateVector> = rows.into_iter().map(UpdateVector).collect();
            let mut shuffled = vs.clone();
            shuffled.shuffle(&mut crate::rng::stream(seed, "perm", 0, 0));
            prop_assert_eq!(coordinate_median(&vs).unwrap(), coordinate_median(&shuffled).unwrap());
        }

        #[test]
        fn cosine_scale(a in vec3(), k in 0.01f64..100.0) {
            prop_assume!(norm(&a) > 1e-6);
            let pos = cosine_similarity(&a, &a.iter().map(|x| x * k).collect::<Vec<_>>()).unwrap();
            let neg = cosine_similarity(&a, &a.iter().map(|x| -x * k).collect::<Vec<_>>()).unwrap();
            prop_assert!((pos.value - 1.0).abs() <= 1e-12);
            prop_assert!((neg.value + 1.0).abs() <= 1e-12);
        }
    }
}
