//! Static kd-tree over 3D points.
//!
//! Neighbor sets are defined by the total order `(squared distance, point
//! index)`, so results do not depend on traversal order and ties at the k-th
//! neighbor are always resolved toward the lower input index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use nalgebra::Point3;

const LEAF_SIZE: usize = 12;

static NEXT_TREE_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Index into the point slice the tree was built from.
    pub index: usize,
    pub dist_sq: f64,
}

impl Neighbor {
    pub fn dist(&self) -> f64 {
        self.dist_sq.sqrt()
    }
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    // points and original indices stored in tree order
    coords: Vec<[f64; 3]>,
    indices: Vec<usize>,
    // tree slot of each original index
    slots: Vec<usize>,
    nodes: Vec<Node>,
    // bounding box per node, parallel to `nodes`
    boxes: Vec<[[f64; 3]; 2]>,
    id: u64,
}

/// Reusable buffer for repeated k-nearest queries.
///
/// It also remembers the previous result: the farthest of the previous k
/// neighbors from the new query bounds the new k-th distance, so a nearby
/// follow-up query becomes a radius search.
#[derive(Debug, Default)]
pub struct KnnScratch {
    heap: BinaryHeap<Neighbor>,
    out: Vec<Neighbor>,
    // (tree id, k) that produced `out`
    last: Option<(u64, usize)>,
}

impl KdTree {
    pub fn new(points: &[Point3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        let mut boxes = Vec::new();
        if !points.is_empty() {
            build(points, &mut order, 0, &mut nodes, &mut boxes);
        }
        let coords = order
            .iter()
            .map(|&i| [points[i].x, points[i].y, points[i].z])
            .collect();
        let mut slots = vec![0; order.len()];
        for (slot, &i) in order.iter().enumerate() {
            slots[i] = slot;
        }
        KdTree {
            coords,
            indices: order,
            slots,
            nodes,
            boxes,
            id: NEXT_TREE_ID.fetch_add(1, AtomicOrdering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn nearest(&self, q: &Point3<f64>) -> Option<Neighbor> {
        let mut scratch = KnnScratch::default();
        self.knn_with(q, 1, &mut scratch).first().copied()
    }

    /// The `k` nearest points sorted ascending by `(distance, index)`.
    pub fn knn(&self, q: &Point3<f64>, k: usize) -> Vec<Neighbor> {
        let mut scratch = KnnScratch::default();
        self.knn_with(q, k, &mut scratch).to_vec()
    }

    pub fn knn_with<'a>(
        &self,
        q: &Point3<f64>,
        k: usize,
        scratch: &'a mut KnnScratch,
    ) -> &'a [Neighbor] {
        let q = [q.x, q.y, q.z];
        let k = k.min(self.len());
        let warm = scratch.last == Some((self.id, k)) && k > 0 && scratch.out.len() == k;
        // same expression as the leaf scan, so every previous neighbor passes
        let bound = warm.then(|| {
            scratch
                .out
                .iter()
                .map(|n| dist_sq(&self.coords[self.slots[n.index]], &q))
                .fold(0.0, f64::max)
        });
        scratch.heap.clear();
        scratch.out.clear();
        scratch.last = None;
        if k == 0 || self.nodes.is_empty() {
            return &scratch.out;
        }
        match bound {
            Some(r_sq) => {
                self.collect_within(0, &q, r_sq, &mut scratch.out);
                if scratch.out.len() > k {
                    scratch.out.select_nth_unstable(k - 1);
                    scratch.out.truncate(k);
                }
            }
            None => {
                self.search(0, &q, k, &mut scratch.heap);
                scratch.out.extend(scratch.heap.drain());
            }
        }
        scratch.out.sort_unstable();
        scratch.last = Some((self.id, k));
        &scratch.out
    }

    /// Indices of all points with distance `<= radius`, ascending by index.
    pub fn within_radius(&self, q: &Point3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.radius_search(0, &[q.x, q.y, q.z], radius * radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn search(&self, node: usize, q: &[f64; 3], k: usize, heap: &mut BinaryHeap<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let cand = Neighbor {
                        index: self.indices[slot],
                        dist_sq: dist_sq(&self.coords[slot], q),
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if let Some(mut worst) = heap.peek_mut() {
                        if cand < *worst {
                            *worst = cand;
                        }
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let (near, far) = if q[axis] < value { (left, right) } else { (right, left) };
                if heap.len() < k || heap.peek().is_some_and(|w| self.box_dist_sq(near, q) <= w.dist_sq) {
                    self.search(near, q, k, heap);
                }
                if heap.len() < k || heap.peek().is_some_and(|w| self.box_dist_sq(far, q) <= w.dist_sq) {
                    self.search(far, q, k, heap);
                }
            }
        }
    }

    fn collect_within(&self, node: usize, q: &[f64; 3], r_sq: f64, out: &mut Vec<Neighbor>) {
        if self.box_dist_sq(node, q) > r_sq {
            return;
        }
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let d = dist_sq(&self.coords[slot], q);
                    if d <= r_sq {
                        out.push(Neighbor {
                            index: self.indices[slot],
                            dist_sq: d,
                        });
                    }
                }
            }
            Node::Split { left, right, .. } => {
                self.collect_within(left, q, r_sq, out);
                self.collect_within(right, q, r_sq, out);
            }
        }
    }

    fn box_dist_sq(&self, node: usize, q: &[f64; 3]) -> f64 {
        let [lo, hi] = &self.boxes[node];
        let mut d = 0.0;
        for a in 0..3 {
            let gap = (lo[a] - q[a]).max(q[a] - hi[a]).max(0.0);
            d += gap * gap;
        }
        d
    }

    fn radius_search(&self, node: usize, q: &[f64; 3], r_sq: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let p = &self.coords[slot];
                    let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    if d <= r_sq {
                        out.push(self.indices[slot]);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_search(near, q, r_sq, out);
                if diff * diff <= r_sq {
                    self.radius_search(far, q, r_sq, out);
                }
            }
        }
    }
}

#[inline]
fn dist_sq(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let dz = p[2] - q[2];
    dx * dx + dy * dy + dz * dz
}

fn build(
    points: &[Point3<f64>],
    order: &mut [usize],
    offset: usize,
    nodes: &mut Vec<Node>,
    boxes: &mut Vec<[[f64; 3]; 2]>,
) -> usize {
    let id = nodes.len();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    boxes.push([lo, hi]);
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);

    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let value = points[order[mid]][axis];

    // placeholder, patched once children exist
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (left_part, right_part) = order.split_at_mut(mid);
    let left = build(points, left_part, offset, nodes, boxes);
    let right = build(points, right_part, offset + mid, nodes, boxes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[Point3<f64>], q: &Point3<f64>, k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = points
            .iter()
            .enumerate()
            .map(|(index, p)| Neighbor {
                index,
                dist_sq: (p - q).norm_squared(),
            })
            .collect();
        all.sort();
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..40 {
            let n = rng.gen_range(1..400);
            let points: Vec<Point3<f64>> = (0..n)
                .map(|_| Point3::new(rng.gen(), rng.gen(), rng.gen::<f64>() * 0.1))
                .collect();
            let tree = KdTree::new(&points);
            for _ in 0..20 {
                let q = Point3::new(rng.gen(), rng.gen(), rng.gen());
                let k = rng.gen_range(1..60);
                assert_eq!(tree.knn(&q, k), brute_knn(&points, &q, k), "trial {trial}");
            }
        }
    }

    #[test]
    fn warm_started_queries_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut points: Vec<Point3<f64>> = (0..300)
            .map(|_| Point3::new(rng.gen(), rng.gen(), 0.0))
            .collect();
        // lattice block for exact ties
        for i in 0..5 {
            for j in 0..5 {
                points.push(Point3::new(0.1 * i as f64, 0.1 * j as f64, 0.5));
            }
        }
        let tree = KdTree::new(&points);
        let other = KdTree::new(&points[..50]);
        let mut scratch = KnnScratch::default();
        let mut q = Point3::new(0.5, 0.5, 0.2);
        for step in 0..500 {
            let k = if step % 50 < 40 { 30 } else { 7 };
            q += if step % 13 == 0 {
                Vector3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), 0.0)
            } else {
                Vector3::new(0.05, 0.0, -0.01)
            };
            if step % 17 == 0 {
                q = Point3::new(0.2, 0.2, 0.5);
            }
            let got = tree.knn_with(&q, k, &mut scratch).to_vec();
            assert_eq!(got, brute_knn(&points, &q, k), "step {step}");
            if step % 29 == 0 {
                // interleaving another tree must not reuse this tree's bound
                let got = other.knn_with(&q, k, &mut scratch).to_vec();
                assert_eq!(got, brute_knn(&points[..50], &q, k));
            }
        }
        assert_eq!(tree.knn_with(&q, 1000, &mut scratch).len(), points.len());
    }

    #[test]
    fn ties_resolve_to_lower_index() {
        // lattice points produce many equal distances
        let mut points = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                points.push(Point3::new(i as f64, j as f64, 0.0));
            }
        }
        points.push(Point3::new(2.0, 2.0, 0.0));
        let tree = KdTree::new(&points);
        let q = Point3::new(2.5, 2.5, 0.0);
        for k in 1..20 {
            assert_eq!(tree.knn(&q, k), brute_knn(&points, &q, k));
        }
    }

    #[test]
    fn radius_query_is_inclusive() {
        let points = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(2.0, 0.0, 0.0)];
        let tree = KdTree::new(&points);
        assert_eq!(tree.within_radius(&Point3::origin(), 1.0), vec![0, 1]);
    }

    #[test]
    fn empty_tree_answers_nothing() {
        let tree = KdTree::new(&[]);
        assert!(tree.nearest(&Point3::origin()).is_none());
        assert!(tree.knn(&Point3::origin(), 3).is_empty());
    }
}
