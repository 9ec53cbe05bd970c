use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{config_err, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PartitionMode {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub clients: usize,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(config_err("partition needs at least one client"));
        }
        if let PartitionMode::Dirichlet { alpha } = self.mode {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(config_err(format!("dirichlet alpha must be > 0, got {alpha}")));
            }
        }
        Ok(())
    }
}

fn indices_by_class(ds: &Dataset, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for idx in &mut by_class {
        idx.shuffle(rng);
    }
    by_class
}

/// Splits sample indices among clients. Partitions are disjoint, cover the
/// dataset, and each holds at least one sample.
pub fn partition(ds: &Dataset, spec: &PartitionSpec, rng: &mut StreamRng) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let n = spec.clients;
    if ds.len() < n {
        return Err(config_err(format!(
            "{} samples cannot cover {n} clients",
            ds.len()
        )));
    }
    let by_class = indices_by_class(ds, rng);
    let mut parts = vec![Vec::new(); n];
    match spec.mode {
        PartitionMode::Iid => {
            // one running dealer across classes keeps both class and quantity balance
            let mut k = 0usize;
            for idx in by_class {
                for i in idx {
                    parts[k % n].push(i);
                    k += 1;
                }
            }
        }
        PartitionMode::Dirichlet { alpha } => {
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| config_err(e.to_string()))?;
            for idx in by_class {
                let mut props: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
                let total: f64 = props.iter().sum();
                if total > 0.0 && total.is_finite() {
                    props.iter_mut().for_each(|p| *p /= total);
                } else {
                    props.fill(1.0 / n as f64);
                }
                let m = idx.len();
                let mut start = 0usize;
                let mut cum = 0.0;
                for (c, p) in props.iter().enumerate() {
                    cum += p;
                    let end = if c + 1 == n {
                        m
                    } else {
                        ((cum * m as f64).floor() as usize).clamp(start, m)
                    };
                    parts[c].extend_from_slice(&idx[start..end]);
                    start = end;
                }
            }
            fill_empty(&mut parts);
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

fn fill_empty(parts: &mut [Vec<usize>]) {
    while let Some(empty) = parts.iter().position(Vec::is_empty) {
        let largest = (0..parts.len())
            .max_by_key(|&i| (parts[i].len(), std::cmp::Reverse(i)))
            .expect("non-empty client list");
        let moved = parts[largest].pop().expect("largest partition has samples");
        parts[empty].push(moved);
    }
}
