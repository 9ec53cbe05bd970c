//! Small deterministic clustering routines shared by the filtering defenses.

use crate::vector::sq_dist;

/// Lloyd's 2-means with a deterministic start: the point farthest from the
/// centroid, then the point farthest from that one. Returns a 0/1 label per
/// point; identical points all land in cluster 0.
pub fn two_means(points: &[Vec<f64>]) -> Vec<usize> {
    let n = points.len();
    if n < 2 {
        return vec![0; n];
    }
    let d = points[0].len();
    let mut centroid = vec![0.0; d];
    for p in points {
        for (c, x) in centroid.iter_mut().zip(p) {
            *c += x / n as f64;
        }
    }
    let farthest = |from: &[f64]| {
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let dist = sq_dist(p, from);
            if dist > best_d {
                best = i;
                best_d = dist;
            }
        }
        (best, best_d)
    };
    let (a, _) = farthest(&centroid);
    let (b, spread) = farthest(&points[a]);
    if spread <= 0.0 {
        return vec![0; n];
    }
    let mut centers = [points[a].clone(), points[b].clone()];
    let mut labels = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let l = usize::from(sq_dist(p, &centers[1]) < sq_dist(p, &centers[0]));
            if labels[i] != l {
                labels[i] = l;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (k, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == k)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            center.iter_mut().for_each(|c| *c = 0.0);
            for p in &members {
                for (c, x) in center.iter_mut().zip(p.iter()) {
                    *c += x / members.len() as f64;
                }
            }
        }
    }
    labels
}

/// Indices of the larger 2-means cluster; on a tie, the cluster holding the
/// lowest index.
pub fn majority(labels: &[usize]) -> Vec<usize> {
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let zeros = labels.len() - ones;
    let keep = if ones > zeros || (ones == zeros && labels.first() == Some(&1)) {
        1
    } else {
        0
    };
    (0..labels.len()).filter(|&i| labels[i] == keep).collect()
}

/// Exact 1-D 2-means: the split of the sorted values minimising the summed
/// within-cluster squared error. Returns the distance between the centres.
pub fn split_gap_1d(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let total: f64 = values.iter().sum();
    let total_sq: f64 = values.iter().map(|v| v * v).sum();
    let (mut left, mut left_sq) = (0.0, 0.0);
    let mut best = (f64::INFINITY, 0.0);
    for k in 1..n {
        left += values[k - 1];
        left_sq += values[k - 1] * values[k - 1];
        let (nl, nr) = (k as f64, (n - k) as f64);
        let right = total - left;
        let sse = (left_sq - left * left / nl) + (total_sq - left_sq - right * right / nr);
        if sse < best.0 - 1e-15 {
            best = (sse, right / nr - left / nl);
        }
    }
    best.1
}

/// Single-linkage agglomeration over a symmetric distance matrix. Merges edges
/// in increasing distance order and returns the first component that reaches
/// `min_size`, together with every point joined at that same distance.
pub fn single_linkage_admit(dist: &[Vec<f64>], min_size: usize) -> Option<Vec<usize>> {
    let n = dist.len();
    if min_size <= 1 {
        return (n > 0).then(|| (0..n).collect());
    }
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((dist[i][j], i, j));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut parent: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut k = 0;
    while k < edges.len() {
        let level = edges[k].0;
        let mut hit = None;
        // merge the whole tie group before checking sizes
        while k < edges.len() && edges[k].0 == level {
            let (_, i, j) = edges[k];
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                let (big, small) = if size[ri] >= size[rj] { (ri, rj) } else { (rj, ri) };
                parent[small] = big;
                size[big] += size[small];
                if size[big] >= min_size && hit.is_none() {
                    hit = Some(big);
                }
            }
            k += 1;
        }
        if let Some(h) = hit {
            let root = find(&mut parent, h);
            return Some((0..n).filter(|&i| find(&mut parent, i) == root).collect());
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_means_separates_obvious_groups() {
        let pts: Vec<Vec<f64>> = [0.0, 0.1, 0.2, 5.0, 5.1]
            .iter()
            .map(|&x| vec![x, -x])
            .collect();
        let labels = two_means(&pts);
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[1], labels[2]);
        assert_eq!(labels[3], labels[4]);
        assert_ne!(labels[0], labels[3]);
        assert_eq!(majority(&labels), vec![0, 1, 2]);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![vec![1.0, 2.0]; 4];
        assert_eq!(two_means(&pts), vec![0; 4]);
        assert_eq!(majority(&[0, 0, 0, 0]), vec![0, 1, 2, 3]);
    }

    /// Brute-force split search written without prefix sums.
    fn gap_oracle(xs: &[f64]) -> f64 {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let mut best = (f64::INFINITY, 0.0);
        for k in 1..v.len() {
            let (a, b) = v.split_at(k);
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let sse: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
                + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            if sse < best.0 - 1e-15 {
                best = (sse, mb - ma);
            }
        }
        best.1
    }

    #[test]
    fn split_gap_matches_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(0, "gap", 0, 0);
        for _ in 0..100 {
            let xs: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
            let fast = split_gap_1d(&mut xs.clone());
            assert!((fast - gap_oracle(&xs)).abs() < 1e-9);
        }
        assert!((split_gap_1d(&mut [0.0, 0.0, 10.0]) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn single_linkage_admits_majority_component() {
        let pos: [f64; 6] = [0.0, 0.1, 0.15, 0.3, 9.0, 9.1];
        let dist: Vec<Vec<f64>> = pos
            .iter()
            .map(|a| pos.iter().map(|b| (a - b).abs()).collect())
            .collect();
        assert_eq!(single_linkage_admit(&dist, 4), Some(vec![0, 1, 2, 3]));
        assert_eq!(single_linkage_admit(&dist, 6).map(|v| v.len()), Some(6));
    }

    #[test]
    fn single_linkage_includes_ties() {
        // three points pairwise at 1.0 plus a far one; min size 2 admits all three
        let dist = vec![
            vec![0.0, 1.0, 1.0, 5.0],
            vec![1.0, 0.0, 1.0, 5.0],
            vec![1.0, 1.0, 0.0, 5.0],
            vec![5.0, 5.0, 5.0, 0.0],
        ];
        assert_eq!(single_linkage_admit(&dist, 2), Some(vec![0, 1, 2]));
    }
}
