//! Static 3-d tree over a point slice for exact nearest-neighbor queries.
//! Ties resolve to the lowest point index, matching a linear scan.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum KdNode {
    Leaf { start: u32, end: u32 },
    Split { axis: u8, value: f64, left: u32, right: u32 },
}

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<u32>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(points, &mut order, 0, &mut nodes);
        }
        KdTree {
            points: points.to_vec(),
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// `(index, distance)` of the nearest point, or `None` when empty.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        self.nearest_within(q, f64::INFINITY)
    }

    /// Nearest point with distance `<= max_dist`.
    pub fn nearest_within(&self, q: &Vec3, max_dist: f64) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let limit = if max_dist.is_finite() { max_dist * max_dist } else { f64::INFINITY };
        let mut best = (limit, usize::MAX);
        self.search(0, q, &mut best);
        (best.1 != usize::MAX).then(|| (best.1, best.0.sqrt()))
    }

    fn search(&self, node: u32, q: &Vec3, best: &mut (f64, usize)) {
        match &self.nodes[node as usize] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[*start as usize..*end as usize] {
                    let d2 = (self.points[i as usize] - q).norm_squared();
                    if d2 < best.0 || (d2 == best.0 && (i as usize) < best.1) {
                        *best = (d2, i as usize);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis as usize] - value;
                let (near, far) = if diff <= 0.0 { (*left, *right) } else { (*right, *left) };
                self.search(near, q, best);
                if diff * diff <= best.0 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build(points: &[Vec3], order: &mut [u32], offset: usize, nodes: &mut Vec<KdNode>) -> u32 {
    let index = nodes.len() as u32;
    if order.len() <= LEAF_SIZE {
        nodes.push(KdNode::Leaf {
            start: offset as u32,
            end: (offset + order.len()) as u32,
        });
        return index;
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in order.iter() {
        lo = lo.inf(&points[i as usize]);
        hi = hi.sup(&points[i as usize]);
    }
    let ext = hi - lo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    let value = points[order[mid] as usize][axis];
    nodes.push(KdNode::Leaf { start: 0, end: 0 });
    let (l, r) = order.split_at_mut(mid);
    let left = build(points, l, offset, nodes);
    let right = build(points, r, offset + mid, nodes);
    nodes[index as usize] = KdNode::Split {
        axis: axis as u8,
        value,
        left,
        right,
    };
    index
}

/// Linear scan with the same tie-breaking as [`KdTree::nearest`].
pub fn nearest_brute_force(points: &[Vec3], q: &Vec3) -> Option<(usize, f64)> {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if d2 < best.0 {
            best = (d2, i);
        }
    }
    (best.1 != usize::MAX).then(|| (best.1, best.0.sqrt()))
}
