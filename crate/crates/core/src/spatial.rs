//! Static k-d tree for exact nearest-neighbor and fixed-radius queries.
//!
//! The tree is generic over the dimension so the same structure indexes 3-D
//! positions and 33-D feature descriptors. Results are sorted by ascending
//! distance with ties broken by ascending index, which makes every query
//! deterministic for a given point set.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::cloud::Point3;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

/// Pruning slack so rounding can never drop a boundary point.
const PRUNE_SLACK: f64 = 1e-12;

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

/// Immutable k-d tree over `D`-dimensional points.
#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    /// `points` permuted into `order`, so leaves scan contiguous memory.
    sorted: Vec<[f64; D]>,
    nodes: Vec<Node>,
}

/// A query hit: index into the indexed set and Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

impl Neighbor {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.index.cmp(&other.index))
    }
}

struct HeapItem(Neighbor);

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.cmp_key(&other.0)
    }
}

/// Euclidean distance, summed in axis order. Brute-force checks in tests use
/// the same formula so boundary decisions agree bit for bit.
#[inline]
pub fn distance<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut sum = 0.0;
    for k in 0..D {
        let d = a[k] - b[k];
        sum += d * d;
    }
    sum.sqrt()
}

impl<const D: usize> KdTree<D> {
    /// Builds the tree; fails on the first non-finite coordinate.
    pub fn build(points: Vec<[f64; D]>) -> Result<Self> {
        if let Some(index) = points
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Data {
                index,
                message: "non-finite coordinate".into(),
            });
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build_node(&points, &mut order, 0, &mut nodes);
        }
        let sorted = order.iter().map(|&i| points[i]).collect();
        Ok(Self {
            points,
            order,
            sorted,
            nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64; D] {
        &self.points[index]
    }

    pub fn points(&self) -> &[[f64; D]] {
        &self.points
    }

    /// The `min(k, n)` nearest points, ascending by (distance, index).
    pub fn k_nearest(&self, query: &[f64; D], k: usize) -> Vec<Neighbor> {
        assert!(k >= 1, "k must be at least 1");
        if self.points.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_recurse(0, query, k, &mut heap);
        let mut out: Vec<Neighbor> = heap.into_iter().map(|h| h.0).collect();
        out.sort_by(Neighbor::cmp_key);
        out
    }

    /// Nearest point, or `None` for an empty tree.
    pub fn nearest(&self, query: &[f64; D]) -> Option<Neighbor> {
        self.k_nearest(query, 1).into_iter().next()
    }

    /// Nearest point within `max_distance` (inclusive).
    pub fn nearest_within(&self, query: &[f64; D], max_distance: f64) -> Option<Neighbor> {
        if self.points.is_empty() {
            return None;
        }
        let mut best: Option<Neighbor> = None;
        let mut offsets = [0.0; D];
        self.nearest_within_recurse(0, query, max_distance, &mut offsets, 0.0, &mut best);
        best
    }

    /// All points with distance `<= radius`, ascending by (distance, index).
    pub fn radius_query(&self, query: &[f64; D], radius: f64) -> Vec<Neighbor> {
        assert!(radius > 0.0, "radius must be positive");
        let mut out = Vec::new();
        if !self.points.is_empty() {
            self.radius_recurse(0, query, radius, &mut out);
        }
        out.sort_by(Neighbor::cmp_key);
        out
    }

    fn knn_recurse(
        &self,
        node: usize,
        query: &[f64; D],
        k: usize,
        heap: &mut BinaryHeap<HeapItem>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let candidate = Neighbor {
                        index: self.order[slot],
                        distance: distance(query, &self.sorted[slot]),
                    };
                    if heap.len() < k {
                        heap.push(HeapItem(candidate));
                    } else if candidate.cmp_key(&heap.peek().unwrap().0) == Ordering::Less {
                        heap.pop();
                        heap.push(HeapItem(candidate));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_recurse(near, query, k, heap);
                let worst = heap.peek().map(|h| h.0.distance).unwrap_or(f64::INFINITY);
                if heap.len() < k || diff.abs() <= worst * (1.0 + PRUNE_SLACK) {
                    self.knn_recurse(far, query, k, heap);
                }
            }
        }
    }

    /// `offsets[a]` is the query's distance to the current cell along axis
    /// `a` (zero inside), `cell_sq` their sum of squares: a lower bound on
    /// the squared distance to anything in the cell.
    #[allow(clippy::too_many_arguments)]
    fn nearest_within_recurse(
        &self,
        node: usize,
        query: &[f64; D],
        max_distance: f64,
        offsets: &mut [f64; D],
        cell_sq: f64,
        best: &mut Option<Neighbor>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                let bound = best.map_or(max_distance, |b| b.distance);
                let cutoff = bound * bound * (1.0 + 1e-9);
                for slot in start..end {
                    let p = &self.sorted[slot];
                    let mut sq = 0.0;
                    for k in 0..D {
                        let d = query[k] - p[k];
                        sq += d * d;
                    }
                    if sq > cutoff {
                        continue;
                    }
                    let d = sq.sqrt();
                    if d > max_distance {
                        continue;
                    }
                    let candidate = Neighbor {
                        index: self.order[slot],
                        distance: d,
                    };
                    if best.is_none_or(|b| candidate.cmp_key(&b) == Ordering::Less) {
                        *best = Some(candidate);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.nearest_within_recurse(near, query, max_distance, offsets, cell_sq, best);
                let saved = offsets[axis];
                let far_sq = cell_sq - saved * saved + diff * diff;
                let bound = best.map_or(max_distance, |b| b.distance);
                if far_sq <= bound * bound * (1.0 + PRUNE_SLACK) + f64::MIN_POSITIVE {
                    offsets[axis] = diff.abs();
                    self.nearest_within_recurse(far, query, max_distance, offsets, far_sq, best);
                    offsets[axis] = saved;
                }
            }
        }
    }

    fn radius_recurse(&self, node: usize, query: &[f64; D], radius: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let d = distance(query, &self.sorted[slot]);
                    if d <= radius {
                        out.push(Neighbor {
                            index: self.order[slot],
                            distance: d,
                        });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let bound = radius * (1.0 + PRUNE_SLACK);
                if diff <= bound {
                    self.radius_recurse(left, query, radius, out);
                }
                if diff >= -bound {
                    self.radius_recurse(right, query, radius, out);
                }
            }
        }
    }
}

fn build_node<const D: usize>(
    points: &[[f64; D]],
    order: &mut [usize],
    offset: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    // Split on the axis of largest spread.
    let mut lo = [f64::INFINITY; D];
    let mut hi = [f64::NEG_INFINITY; D];
    for &i in order.iter() {
        for k in 0..D {
            lo[k] = lo[k].min(points[i][k]);
            hi[k] = hi[k].max(points[i][k]);
        }
    }
    let axis = (0..D)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    if hi[axis] - lo[axis] == 0.0 {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis]
            .total_cmp(&points[b][axis])
            .then(a.cmp(&b))
    });
    let value = points[order[mid]][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (left_part, right_part) = order.split_at_mut(mid);
    let left = build_node(points, left_part, offset, nodes);
    let right = build_node(points, right_part, offset + mid, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

/// 3-D index over cloud positions.
pub type SpatialIndex = KdTree<3>;

#[inline]
pub fn to_array(p: &Point3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

/// Builds a 3-D index over positions.
pub fn build_index(points: &[Point3]) -> Result<SpatialIndex> {
    KdTree::build(points.iter().map(to_array).collect())
}

impl KdTree<3> {
    pub fn k_nearest_point(&self, query: &Point3, k: usize) -> Vec<Neighbor> {
        self.k_nearest(&to_array(query), k)
    }

    pub fn radius_query_point(&self, query: &Point3, radius: f64) -> Vec<Neighbor> {
        self.radius_query(&to_array(query), radius)
    }

    pub fn nearest_point_within(&self, query: &Point3, max_distance: f64) -> Option<Neighbor> {
        self.nearest_within(&to_array(query), max_distance)
    }
}
