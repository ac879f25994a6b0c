//! Trip flows between the regions of a batch.

use crate::numeric::Matrix;
use crate::prompt::BoundaryPrompt;
use crate::rtree::{Entry, RTree, DEFAULT_BRANCHING};
use crate::trips::Trip;

/// Origins and destinations of all trips, indexed separately.
#[derive(Clone, Debug)]
pub struct TripIndex {
    origins: RTree<u32>,
    dests: RTree<u32>,
    n_trips: usize,
}

impl TripIndex {
    pub fn new(trips: &[Trip]) -> Self {
        let mk = |f: &dyn Fn(&Trip) -> crate::geometry::Point| {
            RTree::bulk_load(
                trips
                    .iter()
                    .enumerate()
                    .map(|(i, t)| Entry {
                        point: f(t),
                        item: i as u32,
                    })
                    .collect(),
                DEFAULT_BRANCHING,
            )
        };
        Self {
            origins: mk(&|t| t.origin),
            dests: mk(&|t| t.dest),
            n_trips: trips.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.n_trips
    }

    pub fn is_empty(&self) -> bool {
        self.n_trips == 0
    }

    fn inside(tree: &RTree<u32>, b: &BoundaryPrompt) -> Vec<u32> {
        let mut out = Vec::new();
        tree.visit_rect(&b.mbr(), |e| {
            if b.contains(e.point) {
                out.push(e.item);
            }
        });
        out.sort_unstable();
        out
    }

    pub fn flows(&self, regions: &[BoundaryPrompt]) -> FlowMatrix {
        let outs: Vec<Vec<u32>> = regions.iter().map(|b| Self::inside(&self.origins, b)).collect();
        let ins: Vec<Vec<u32>> = regions.iter().map(|b| Self::inside(&self.dests, b)).collect();
        let n = regions.len();
        let mut flow = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                flow.set(i, j, sorted_intersection(&outs[i], &ins[j]) as f64);
            }
        }
        FlowMatrix {
            flow,
            outflow: outs.iter().map(|v| v.len() as f64).collect(),
            inflow: ins.iter().map(|v| v.len() as f64).collect(),
        }
    }
}

fn sorted_intersection(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `flow(i, j)` counts trips starting in region `i` and ending in region
/// `j`; outflow and inflow count trips leaving or entering each region
/// to or from anywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMatrix {
    pub flow: Matrix,
    pub outflow: Vec<f64>,
    pub inflow: Vec<f64>,
}
