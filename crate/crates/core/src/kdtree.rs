//! Static k-d tree for exact k-nearest-neighbor queries.
//!
//! Results are ordered by `(squared distance, index)`, so equidistant points
//! resolve to the lower index.

use alloc::vec::Vec;
use core::cmp::Ordering;

#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// One query result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

fn cmp_neighbor(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.dist_sq.total_cmp(&b.dist_sq).then(a.index.cmp(&b.index))
}

fn dist_sq<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for k in 0..D {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

impl<const D: usize> KdTree<D> {
    pub fn new(points: Vec<[f64; D]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build(&points, &mut order, 0, &mut nodes);
        Self { points, nodes, root }
    }

    fn build(points: &[[f64; D]], idx: &mut [usize], depth: usize, nodes: &mut Vec<Node>) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % D;
        idx.sort_unstable_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let id = nodes.len();
        nodes.push(Node { point: idx[mid], axis, left: None, right: None });
        let (lo, rest) = idx.split_at_mut(mid);
        let left = Self::build(points, lo, depth + 1, nodes);
        let right = Self::build(points, &mut rest[1..], depth + 1, nodes);
        nodes[id].left = left;
        nodes[id].right = right;
        Some(id)
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

    /// The `k` nearest points to `query`, closest first.
    pub fn nearest(&self, query: &[f64; D], k: usize) -> Vec<Neighbor> {
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search(self.root, query, k, &mut best);
        }
        best
    }

    fn search(&self, node: Option<usize>, q: &[f64; D], k: usize, best: &mut Vec<Neighbor>) {
        let Some(id) = node else { return };
        let n = self.nodes[id];
        let p = &self.points[n.point];
        let cand = Neighbor { index: n.point, dist_sq: dist_sq(p, q) };
        if best.len() < k || cmp_neighbor(&cand, best.last().unwrap()) == Ordering::Less {
            let pos = best.partition_point(|b| cmp_neighbor(b, &cand) == Ordering::Less);
            best.insert(pos, cand);
            best.truncate(k);
        }
        let diff = q[n.axis] - p[n.axis];
        let (first, second) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(first, q, k, best);
        // `<=` keeps equidistant candidates reachable for the index tie-break.
        if best.len() < k || diff * diff <= best.last().unwrap().dist_sq {
            self.search(second, q, k, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};

    fn brute<const D: usize>(pts: &[[f64; D]], q: &[f64; D], k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> =
            pts.iter().enumerate().map(|(i, p)| Neighbor { index: i, dist_sq: dist_sq(p, q) }).collect();
        all.sort_by(cmp_neighbor);
        all.truncate(k);
        all
    }

    #[test]
    fn matches_brute_force_2d_and_3d() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for n in [1usize, 2, 7, 50, 300] {
            let p2: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0..8) as f64, rng.random_range(0..8) as f64]).collect();
            let p3: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let t2 = KdTree::new(p2.clone());
            let t3 = KdTree::new(p3.clone());
            for _ in 0..40 {
                let q2 = [rng.random_range(-1.0..9.0), rng.random_range(-1.0..9.0)];
                let q3 = [rng.random(), rng.random(), rng.random()];
                for k in [1, 3, 8] {
                    assert_eq!(t2.nearest(&q2, k), brute(&p2, &q2, k));
                    assert_eq!(t3.nearest(&q3, k), brute(&p3, &q3, k));
                }
            }
            // Integer grid points produce many exact ties.
            for x in 0..8 {
                for y in 0..8 {
                    let q = [x as f64 + 0.5, y as f64];
                    assert_eq!(t2.nearest(&q, 3), brute(&p2, &q, 3));
                }
            }
        }
    }

    #[test]
    fn duplicates_break_ties_by_index() {
        let t = KdTree::new(vec![[1.0, 1.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]]);
        let got: Vec<usize> = t.nearest(&[1.0, 1.0], 2).iter().map(|n| n.index).collect();
        assert_eq!(got, vec![0, 2]);
    }

    #[test]
    fn empty_tree() {
        let t: KdTree<2> = KdTree::new(vec![]);
        assert!(t.nearest(&[0.0, 0.0], 3).is_empty());
    }
}
