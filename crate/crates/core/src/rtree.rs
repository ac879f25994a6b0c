//! A point R-tree with sort-tile-recursive bulk loading.
//!
//! Entries are `(Point, T)` pairs. Nodes live in an arena; leaves hold entry
//! indices. An incremental Guttman-style insertion path (linear split) is kept
//! alongside the bulk loader so both construction strategies can be measured.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geometry::{Point, Rect};

pub const DEFAULT_BRANCHING: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry<T> {
    pub point: Point,
    pub item: T,
}

#[derive(Clone, Debug)]
enum Children {
    Leaf(Vec<usize>),
    Inner(Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    mbr: Rect,
    children: Children,
}

#[derive(Clone, Debug)]
pub struct RTree<T> {
    entries: Vec<Entry<T>>,
    nodes: Vec<Node>,
    root: Option<usize>,
    branching: usize,
}

impl<T: Copy + Ord> RTree<T> {
    pub fn new(branching: usize) -> Self {
        assert!(branching >= 2, "branching factor must be at least 2");
        Self {
            entries: Vec::new(),
            nodes: Vec::new(),
            root: None,
            branching,
        }
    }

    /// Sort-tile-recursive bulk load. The resulting tree depends only on the
    /// set of entries, not on their input order.
    pub fn bulk_load(mut entries: Vec<Entry<T>>, branching: usize) -> Self {
        let mut tree = Self::new(branching);
        if entries.is_empty() {
            return tree;
        }
        entries.sort_by(|a, b| {
            a.point
                .x
                .total_cmp(&b.point.x)
                .then(a.point.y.total_cmp(&b.point.y))
                .then(a.item.cmp(&b.item))
        });
        tree.entries = entries;

        let idx: Vec<usize> = (0..tree.entries.len()).collect();
        let leaf_groups = {
            let entries = &tree.entries;
            str_partition(idx, branching, |i| entries[i].point)
        };
        let mut level: Vec<usize> = leaf_groups
            .into_iter()
            .map(|group| {
                let mbr = Rect::from_points(group.iter().map(|&i| tree.entries[i].point)).unwrap();
                tree.push_node(Node {
                    mbr,
                    children: Children::Leaf(group),
                })
            })
            .collect();

        while level.len() > 1 {
            let groups = {
                let nodes = &tree.nodes;
                str_partition(level, branching, |i| nodes[i].mbr.center())
            };
            level = groups
                .into_iter()
                .map(|group| {
                    let mbr = group
                        .iter()
                        .map(|&i| tree.nodes[i].mbr)
                        .reduce(Rect::union)
                        .unwrap();
                    tree.push_node(Node {
                        mbr,
                        children: Children::Inner(group),
                    })
                })
                .collect();
        }
        tree.root = level.first().copied();
        tree
    }

    fn push_node(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn bounds(&self) -> Option<Rect> {
        self.root.map(|r| self.nodes[r].mbr)
    }

    pub fn height(&self) -> usize {
        let mut h = 0;
        let mut cur = self.root;
        while let Some(n) = cur {
            h += 1;
            cur = match &self.nodes[n].children {
                Children::Inner(c) => c.first().copied(),
                Children::Leaf(_) => None,
            };
        }
        h
    }

    /// Insert one entry, splitting overflowing nodes (linear split).
    pub fn insert(&mut self, point: Point, item: T) {
        let e = self.entries.len();
        self.entries.push(Entry { point, item });
        let Some(root) = self.root else {
            let r = self.push_node(Node {
                mbr: Rect::from_point(point),
                children: Children::Leaf(vec![e]),
            });
            self.root = Some(r);
            return;
        };
        if let Some(sibling) = self.insert_rec(root, e) {
            let mbr = self.nodes[root].mbr.union(self.nodes[sibling].mbr);
            let r = self.push_node(Node {
                mbr,
                children: Children::Inner(vec![root, sibling]),
            });
            self.root = Some(r);
        }
    }

    fn insert_rec(&mut self, node: usize, e: usize) -> Option<usize> {
        let p = self.entries[e].point;
        self.nodes[node].mbr = self.nodes[node].mbr.expand(p);
        match &self.nodes[node].children {
            Children::Leaf(_) => {
                if let Children::Leaf(items) = &mut self.nodes[node].children {
                    items.push(e);
                }
            }
            Children::Inner(children) => {
                let best = *children
                    .iter()
                    .min_by(|&&a, &&b| {
                        let ea = enlargement(self.nodes[a].mbr, p);
                        let eb = enlargement(self.nodes[b].mbr, p);
                        ea.total_cmp(&eb)
                            .then(self.nodes[a].mbr.area().total_cmp(&self.nodes[b].mbr.area()))
                    })
                    .unwrap();
                if let Some(split) = self.insert_rec(best, e) {
                    if let Children::Inner(children) = &mut self.nodes[node].children {
                        children.push(split);
                    }
                }
            }
        }
        let overflow = match &self.nodes[node].children {
            Children::Leaf(v) | Children::Inner(v) => v.len() > self.branching,
        };
        overflow.then(|| self.split(node))
    }

    fn split(&mut self, node: usize) -> usize {
        let is_leaf = matches!(self.nodes[node].children, Children::Leaf(_));
        let members = match &mut self.nodes[node].children {
            Children::Leaf(v) | Children::Inner(v) => std::mem::take(v),
        };
        let rect_of = |tree: &Self, i: usize| {
            if is_leaf {
                Rect::from_point(tree.entries[i].point)
            } else {
                tree.nodes[i].mbr
            }
        };
        // Linear split: seeds are the pair with greatest normalized separation.
        let rects: Vec<Rect> = members.iter().map(|&i| rect_of(self, i)).collect();
        let all = rects.iter().copied().reduce(Rect::union).unwrap();
        let axis_seeds = |lo: fn(&Rect) -> f64, hi: fn(&Rect) -> f64, extent: f64| {
            let (mut hi_low, mut lo_high) = (0usize, 0usize);
            for (k, r) in rects.iter().enumerate() {
                if lo(r) > lo(&rects[hi_low]) {
                    hi_low = k;
                }
                if hi(r) < hi(&rects[lo_high]) {
                    lo_high = k;
                }
            }
            let sep = (lo(&rects[hi_low]) - hi(&rects[lo_high])) / extent.max(f64::MIN_POSITIVE);
            (sep, lo_high, hi_low)
        };
        let sx = axis_seeds(|r| r.min_x, |r| r.max_x, all.width());
        let sy = axis_seeds(|r| r.min_y, |r| r.max_y, all.height());
        let (_, mut s1, mut s2) = if sx.0 >= sy.0 { sx } else { sy };
        if s1 == s2 {
            s2 = if s1 == 0 { 1 } else { 0 };
        }
        if s1 > s2 {
            std::mem::swap(&mut s1, &mut s2);
        }
        let min_fill = (self.branching / 2).max(1);
        let mut g1 = vec![members[s1]];
        let mut g2 = vec![members[s2]];
        let mut r1 = rects[s1];
        let mut r2 = rects[s2];
        let rest: Vec<usize> = (0..members.len()).filter(|&k| k != s1 && k != s2).collect();
        let total = rest.len();
        for (done, k) in rest.into_iter().enumerate() {
            let remaining = total - done;
            let to_g1 = if g1.len() + remaining <= min_fill {
                true
            } else if g2.len() + remaining <= min_fill {
                false
            } else {
                let e1 = r1.union(rects[k]).area() - r1.area();
                let e2 = r2.union(rects[k]).area() - r2.area();
                e1 < e2 || (e1 == e2 && g1.len() <= g2.len())
            };
            if to_g1 {
                g1.push(members[k]);
                r1 = r1.union(rects[k]);
            } else {
                g2.push(members[k]);
                r2 = r2.union(rects[k]);
            }
        }
        let wrap = |v: Vec<usize>| {
            if is_leaf {
                Children::Leaf(v)
            } else {
                Children::Inner(v)
            }
        };
        self.nodes[node].children = wrap(g1);
        self.nodes[node].mbr = r1;
        self.push_node(Node {
            mbr: r2,
            children: wrap(g2),
        })
    }

    /// All entries whose point lies in `rect` (inclusive), in tree order.
    pub fn query_rect(&self, rect: &Rect) -> Vec<&Entry<T>> {
        let mut out = Vec::new();
        self.visit_rect(rect, |e| out.push(e));
        out
    }

    pub fn visit_rect<'a, F: FnMut(&'a Entry<T>)>(&'a self, rect: &Rect, mut f: F) {
        let Some(root) = self.root else { return };
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if !node.mbr.intersects(rect) {
                continue;
            }
            match &node.children {
                Children::Inner(c) => stack.extend(c.iter().copied()),
                Children::Leaf(items) => {
                    for &i in items {
                        let e = &self.entries[i];
                        if rect.contains(e.point) {
                            f(e);
                        }
                    }
                }
            }
        }
    }

    pub fn count_in_rect(&self, rect: &Rect) -> usize {
        let mut n = 0;
        self.visit_rect(rect, |_| n += 1);
        n
    }

    /// Exact k nearest entries by Euclidean distance, ties broken by item order.
    /// Returns `(distance, entry)` pairs in ascending order.
    pub fn nearest_k(&self, p: Point, k: usize) -> Vec<(f64, &Entry<T>)> {
        let mut out = Vec::with_capacity(k.min(self.len()));
        let Some(root) = self.root else { return out };
        if k == 0 {
            return out;
        }
        let mut heap = BinaryHeap::new();
        heap.push(Candidate {
            dist2: self.nodes[root].mbr.min_dist2(p),
            kind: Kind::Node(root),
        });
        while let Some(c) = heap.pop() {
            match c.kind {
                Kind::Entry(_, i) => {
                    out.push((c.dist2.sqrt(), &self.entries[i]));
                    if out.len() == k {
                        break;
                    }
                }
                Kind::Node(n) => match &self.nodes[n].children {
                    Children::Inner(ch) => {
                        for &m in ch {
                            heap.push(Candidate {
                                dist2: self.nodes[m].mbr.min_dist2(p),
                                kind: Kind::Node(m),
                            });
                        }
                    }
                    Children::Leaf(items) => {
                        for &i in items {
                            let e = &self.entries[i];
                            heap.push(Candidate {
                                dist2: e.point.dist2(p),
                                kind: Kind::Entry(e.item, i),
                            });
                        }
                    }
                },
            }
        }
        out
    }
}

fn enlargement(r: Rect, p: Point) -> f64 {
    r.expand(p).area() - r.area()
}

/// Partition `items` into groups of at most `b` by sorting on x, slicing into
/// vertical slabs, then sorting each slab on y.
fn str_partition<F: Fn(usize) -> Point>(mut items: Vec<usize>, b: usize, key: F) -> Vec<Vec<usize>> {
    let n = items.len();
    let pages = n.div_ceil(b);
    let slabs = (pages as f64).sqrt().ceil() as usize;
    let slab_size = slabs.max(1) * b;
    items.sort_by(|&i, &j| key(i).x.total_cmp(&key(j).x).then(i.cmp(&j)));
    let mut groups = Vec::with_capacity(pages);
    for slab in items.chunks_mut(slab_size) {
        slab.sort_by(|&i, &j| key(i).y.total_cmp(&key(j).y).then(i.cmp(&j)));
        groups.extend(slab.chunks(b).map(|c| c.to_vec()));
    }
    groups
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind<T> {
    // Nodes sort before entries at equal distance so every tied entry is
    // discovered before the first one is emitted.
    Node(usize),
    Entry(T, usize),
}

struct Candidate<T> {
    dist2: f64,
    kind: Kind<T>,
}

impl<T: Ord> Candidate<T> {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then_with(|| match (&self.kind, &other.kind) {
            (Kind::Node(a), Kind::Node(b)) => a.cmp(b),
            (Kind::Node(_), Kind::Entry(..)) => Ordering::Less,
            (Kind::Entry(..), Kind::Node(_)) => Ordering::Greater,
            (Kind::Entry(a, i), Kind::Entry(b, j)) => a.cmp(b).then(i.cmp(j)),
        })
    }
}

impl<T: Ord> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}
impl<T: Ord> Eq for Candidate<T> {}
impl<T: Ord> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Ord> Ord for Candidate<T> {
    // BinaryHeap is a max-heap; invert for nearest-first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key_cmp(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_entries(n: usize, seed: u64) -> Vec<Entry<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n as u32)
            .map(|i| Entry {
                point: Point::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)),
                item: i,
            })
            .collect()
    }

    fn brute_rect(entries: &[Entry<u32>], r: &Rect) -> Vec<u32> {
        let mut v: Vec<u32> = entries.iter().filter(|e| r.contains(e.point)).map(|e| e.item).collect();
        v.sort();
        v
    }

    #[test]
    fn rect_queries_match_scan_for_both_builders() {
        let entries = random_entries(2_000, 7);
        let bulk = RTree::bulk_load(entries.clone(), 8);
        let mut inc = RTree::new(8);
        for e in &entries {
            inc.insert(e.point, e.item);
        }
        assert_eq!(bulk.len(), 2_000);
        assert_eq!(inc.len(), 2_000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = rng.random_range(0.0..100.0);
            let y = rng.random_range(0.0..100.0);
            let r = Rect::new(x, y, x + rng.random_range(0.0..30.0), y + rng.random_range(0.0..30.0));
            let expect = brute_rect(&entries, &r);
            for tree in [&bulk, &inc] {
                let mut got: Vec<u32> = tree.query_rect(&r).iter().map(|e| e.item).collect();
                got.sort();
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn knn_matches_full_sort() {
        let entries = random_entries(1_000, 11);
        let tree = RTree::bulk_load(entries.clone(), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let q = Point::new(rng.random_range(-10.0..110.0), rng.random_range(-10.0..110.0));
            let mut all: Vec<(f64, u32)> = entries.iter().map(|e| (e.point.dist(q), e.item)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let got: Vec<u32> = tree.nearest_k(q, 5).iter().map(|(_, e)| e.item).collect();
            let want: Vec<u32> = all[..5].iter().map(|x| x.1).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn knn_ties_break_by_item() {
        let pts = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
        let entries: Vec<Entry<u32>> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Entry {
                point: Point::new(x, y),
                item: 10 - i as u32,
            })
            .collect();
        let tree = RTree::bulk_load(entries, 2);
        let got: Vec<u32> = tree.nearest_k(Point::new(0.0, 0.0), 4).iter().map(|(_, e)| e.item).collect();
        assert_eq!(got, vec![7, 8, 9, 10]);
    }

    #[test]
    fn knn_with_k_beyond_len_returns_all() {
        let entries = random_entries(10, 1);
        let tree = RTree::bulk_load(entries, 4);
        let got = tree.nearest_k(Point::new(50.0, 50.0), 100);
        assert_eq!(got.len(), 10);
        assert!(got.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn bulk_load_is_order_independent() {
        let entries = random_entries(500, 2);
        let mut rev = entries.clone();
        rev.reverse();
        let a = RTree::bulk_load(entries, 8);
        let b = RTree::bulk_load(rev, 8);
        assert_eq!(a.entries(), b.entries());
        assert_eq!(a.height(), b.height());
    }

    #[test]
    fn empty_tree() {
        let t: RTree<u32> = RTree::bulk_load(Vec::new(), 8);
        assert!(t.is_empty());
        assert!(t.query_rect(&Rect::new(0.0, 0.0, 1.0, 1.0)).is_empty());
        assert!(t.nearest_k(Point::new(0.0, 0.0), 3).is_empty());
    }
}
