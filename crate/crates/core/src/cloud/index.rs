use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{distance_sq, LabeledCloud, Point3};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

/// A neighbor returned by a k-NN query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub ordinal: usize,
    pub distance: f64,
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

/// Static 3-D KD-tree. Results are sorted by distance, ties by ordinal.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

// Max-heap entry ordered by (squared distance, ordinal).
#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .total_cmp(&other.0)
            .then_with(|| self.1.cmp(&other.1))
    }
}

impl SpatialIndex {
    pub fn build(cloud: &LabeledCloud) -> Self {
        Self::from_points(&cloud.points)
    }

    pub fn from_points(points: &[Point3]) -> Self {
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build_node(0, points.len());
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis])
        });
        let value = pts[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap()
    }

    /// The `min(k, N)` nearest points to `query`.
    pub fn knn(&self, query: &Point3, k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::arg("k must be at least 1"));
        }
        Ok(self.knn_unchecked(query, k))
    }

    pub(crate) fn knn_unchecked(&self, query: &Point3, k: usize) -> Vec<Neighbor> {
        if self.points.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        let mut found = heap.into_vec();
        found.sort_unstable();
        found
            .into_iter()
            .map(|Candidate(d2, ordinal)| Neighbor {
                ordinal,
                distance: d2.sqrt(),
            })
            .collect()
    }

    fn search(&self, node: usize, q: &Point3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate(distance_sq(q, &self.points[i]), i);
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
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
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, heap);
                // equality must still be visited: a tie with a lower ordinal may live there
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }

    /// k nearest neighbors of every indexed point, excluding the point itself.
    pub fn knn_graph(&self, k: usize) -> Vec<Vec<Neighbor>> {
        (0..self.points.len())
            .map(|i| {
                self.knn_unchecked(&self.points[i], k + 1)
                    .into_iter()
                    .filter(|n| n.ordinal != i)
                    .take(k)
                    .collect()
            })
            .collect()
    }
}

/// Exhaustive k-NN with the same ordering contract as [`SpatialIndex::knn`].
pub fn knn_brute_force(points: &[Point3], query: &Point3, k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Candidate> = points
        .iter()
        .enumerate()
        .map(|(i, p)| Candidate(distance_sq(query, p), i))
        .collect();
    all.sort_unstable();
    all.truncate(k);
    all.into_iter()
        .map(|Candidate(d2, ordinal)| Neighbor {
            ordinal,
            distance: d2.sqrt(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn line_example() {
        let idx =
            SpatialIndex::from_points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let nn = idx.knn(&[0.9, 0.0, 0.0], 2).unwrap();
        assert_eq!(nn.iter().map(|n| n.ordinal).collect::<Vec<_>>(), [1, 0]);
        assert!((nn[0].distance - 0.1).abs() < 1e-12);
        assert!((nn[1].distance - 0.9).abs() < 1e-12);
    }

    #[test]
    fn k_larger_than_n_and_zero() {
        let idx = SpatialIndex::from_points(&[[0.0; 3], [1.0; 3]]);
        assert_eq!(idx.knn(&[0.0; 3], 10).unwrap().len(), 2);
        assert!(idx.knn(&[0.0; 3], 0).is_err());
        let empty = SpatialIndex::from_points(&[]);
        assert!(empty.knn(&[0.0; 3], 3).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_ordinal() {
        // many duplicates straddling split planes
        let mut pts = Vec::new();
        for i in 0..200 {
            pts.push([(i % 5) as f64, 0.0, 0.0]);
        }
        let idx = SpatialIndex::from_points(&pts);
        for q in [[2.0, 0.0, 0.0], [2.5, 0.0, 0.0], [0.0, 1.0, 0.0]] {
            for k in [1, 7, 40, 41, 199] {
                assert_eq!(idx.knn(&q, k).unwrap(), knn_brute_force(&pts, &q, k));
            }
        }
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut r = rng::seeded(11);
        for trial in 0..20 {
            let n = if trial == 0 { 1000 } else { r.random_range(1..400) };
            let pts: Vec<Point3> = (0..n)
                .map(|_| {
                    [
                        r.random_range(-10.0..10.0),
                        r.random_range(-10.0..10.0),
                        // quantized axis forces exact ties
                        (r.random_range(0..4) as f64) * 0.5,
                    ]
                })
                .collect();
            let idx = SpatialIndex::from_points(&pts);
            for _ in 0..25 {
                let q = [
                    r.random_range(-12.0..12.0),
                    r.random_range(-12.0..12.0),
                    r.random_range(-1.0..3.0),
                ];
                let k = if trial == 0 { 8 } else { r.random_range(1..20) };
                assert_eq!(idx.knn(&q, k).unwrap(), knn_brute_force(&pts, &q, k));
            }
        }
    }

    #[test]
    fn graph_excludes_self() {
        let pts = [[0.0; 3], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let g = SpatialIndex::from_points(&pts).knn_graph(1);
        assert_eq!(g[0][0].ordinal, 1);
        assert_eq!(g[2][0].ordinal, 1);
    }
}
