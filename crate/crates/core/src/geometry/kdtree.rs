use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::GeometryError;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Balanced k-d tree over a fixed set of `D`-dimensional points.
///
/// Immutable after construction; queries take `&self` and are safe to share
/// across threads.
#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl<const D: usize> KdTree<D> {
    pub fn new(points: &[[f64; D]]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64; D] {
        &self.points[i]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; D];
        let mut hi = [f64::NEG_INFINITY; D];
        for &i in &self.order[start..end] {
            for d in 0..D {
                lo[d] = lo[d].min(self.points[i][d]);
                hi[d] = hi[d].max(self.points[i][d]);
            }
        }
        let axis = (0..D)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest indexed points to `query`, ordered by distance then
    /// index. `exclude` omits one member of the indexed set (the query's own
    /// index when the query is itself an indexed point).
    pub fn knn(
        &self,
        query: &[f64; D],
        k: usize,
        exclude: Option<usize>,
    ) -> Result<Vec<usize>, GeometryError> {
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if k > available || (exclude.is_some() && k >= self.len()) {
            return Err(GeometryError::NeighborCount {
                k,
                size: self.len(),
            });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        let mut found = heap.into_vec();
        found.sort();
        Ok(found.into_iter().map(|c| c.index).collect())
    }

    /// Index of the nearest indexed point and its squared distance.
    pub fn nearest(&self, query: &[f64; D]) -> Result<(usize, f64), GeometryError> {
        let idx = self.knn(query, 1, None)?[0];
        Ok((idx, dist2(&self.points[idx], query)))
    }

    fn search(
        &self,
        node: usize,
        q: &[f64; D],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        dist2: dist2(&self.points[i], q),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap holds k items") {
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
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                let worst = heap.peek().map_or(f64::INFINITY, |c| c.dist2);
                if heap.len() < k || diff * diff <= worst {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }

    /// Neighbors of every indexed point among the others.
    pub fn knn_all(&self, k: usize) -> Result<Vec<Vec<usize>>, GeometryError> {
        (0..self.len())
            .map(|i| self.knn(&self.points[i], k, Some(i)))
            .collect()
    }
}

#[inline]
pub(crate) fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for d in 0..D {
        let t = a[d] - b[d];
        s += t * t;
    }
    s
}

/// Exhaustive k-nearest search with the same (distance, index) ordering.
pub fn brute_force_knn<const D: usize>(
    points: &[[f64; D]],
    query: &[f64; D],
    k: usize,
    exclude: Option<usize>,
) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| (dist2(p, query), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn collinear_neighbors_exclude_self() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.knn(&pts[0], 2, Some(0)).unwrap(), vec![1, 2]);
        assert_eq!(tree.knn(&pts[0], 3, Some(0)).unwrap(), vec![1, 2, 3]);
        assert!(tree.knn(&pts[0], 4, Some(0)).is_err());
    }

    #[test]
    fn k_equal_size_minus_one_returns_everyone_else() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 2]> = (0..30).map(|_| [rng.random(), rng.random()]).collect();
        let tree = KdTree::new(&pts);
        for i in 0..30 {
            let mut got = tree.knn(&pts[i], 29, Some(i)).unwrap();
            got.sort();
            let want: Vec<usize> = (0..30).filter(|&j| j != i).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn matches_brute_force_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let tree = KdTree::new(&pts);
        for _ in 0..50 {
            let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            assert_eq!(tree.knn(&q, 8, None).unwrap(), brute_force_knn(&pts, &q, 8, None));
        }
    }

    #[test]
    fn duplicates_are_found() {
        let pts = [[0.5, 0.5], [0.5, 0.5], [2.0, 2.0]];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.knn(&pts[0], 1, Some(0)).unwrap(), vec![1]);
        assert_eq!(tree.knn(&pts[1], 1, Some(1)).unwrap(), vec![0]);
    }
}
