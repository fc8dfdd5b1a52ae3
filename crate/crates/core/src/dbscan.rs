//! Density-based clustering (DBSCAN) over small point sets.

/// Label carried by points that belong to no cluster.
pub const NOISE: i64 = -1;

const UNVISITED: i64 = i64::MIN;

/// Clusters `points` with DBSCAN.
///
/// A point is core when at least `min_pts` points (itself included) lie within
/// `eps` (inclusive). Clusters are the maximal density-connected sets; every
/// other point is labeled [`NOISE`]. Clusters are numbered in the order their
/// first core point appears in the input, and a border point reachable from
/// several clusters joins the lowest-numbered one.
pub fn dbscan<P: AsRef<[f64]>>(points: &[P], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = points.len();
    let eps_sq = eps * eps;
    let region = |i: usize| -> Vec<usize> {
        let pi = points[i].as_ref();
        (0..n)
            .filter(|&j| {
                let d: f64 = pi.iter().zip(points[j].as_ref()).map(|(a, b)| (a - b) * (a - b)).sum();
                d <= eps_sq
            })
            .collect()
    };

    let mut labels = vec![UNVISITED; n];
    let mut cluster = 0;
    for seed in 0..n {
        if labels[seed] != UNVISITED {
            continue;
        }
        let seeds = region(seed);
        if seeds.len() < min_pts.max(1) {
            labels[seed] = NOISE;
            continue;
        }
        labels[seed] = cluster;
        let mut queue = std::collections::VecDeque::from(seeds);
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = cluster;
            }
            if labels[j] != UNVISITED {
                continue;
            }
            labels[j] = cluster;
            let next = region(j);
            if next.len() >= min_pts.max(1) {
                queue.extend(next);
            }
        }
        cluster += 1;
    }
    labels
}
