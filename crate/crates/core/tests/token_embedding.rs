mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use bpurf_core::embedding::transr::corrupt_tail;
use bpurf_core::embedding::{aggregate_region, embed_subgraphs, init_transr, EncoderParams, NodeBatch, TokenEmbeddingTable, TransrConfig};
use bpurf_core::extraction::{extract_token_set, RegionSubgraph, SubEdge, VirtualBitmap};
use bpurf_core::geometry::{Point, Rect};
use bpurf_core::graph::{GraphBundle, TokenRef};
use bpurf_core::numeric::{Matrix, Tape};
use bpurf_core::prompt::BoundaryPrompt;
use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

struct Fixture {
    bundle: GraphBundle,
    table: TokenEmbeddingTable,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (_, bundle) = city(&small_config(21));
        let table = init_transr(
            &bundle.graph,
            &TransrConfig {
                dim: 16,
                epochs: 50,
                ..Default::default()
            },
        )
        .unwrap();
        Fixture { bundle, table }
    })
}

fn random_params(n_types: usize, n_rel: usize, dim: usize, layers: usize, seed: u64) -> EncoderParams {
    let mut r = rng(seed);
    let mut p = EncoderParams::init(n_types, n_rel, dim, layers, &mut r).unwrap();
    for l in &mut p.layers {
        for b in &mut l.bias {
            *b = Matrix::random_normal(1, dim, 0.2, &mut r);
        }
    }
    p
}

fn extract(b: &GraphBundle, rect: Rect) -> Option<RegionSubgraph> {
    let mut bm = VirtualBitmap::for_graph(&b.graph);
    let mut sub = extract_token_set(&BoundaryPrompt::rect(rect).ok()?, &b.graph, &b.gir, &b.svindex, &mut bm).ok()?;
    sub.augment(&b.graph, 3, 60.0);
    Some(sub)
}

fn encode(subs: &[&RegionSubgraph], table: &TokenEmbeddingTable, params: &EncoderParams) -> Matrix {
    let batch = NodeBatch::build(subs, table, params.n_rel_slots, false).unwrap();
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false).unwrap();
    let h = batch.encode(&mut tape, params, &vars).unwrap();
    tape.value(h).clone()
}

#[test]
fn transr_separates_edges_from_fresh_corruptions() {
    let f = fixture();
    let g = &f.bundle.graph;
    let mut r = rng(99);
    let (mut pos, mut neg, mut n_pos, mut n_neg) = (0.0, 0.0, 0usize, 0usize);
    for (rel, rt) in g.relations().iter().enumerate() {
        for &(a, b) in g.edges(rel) {
            let (h, t) = (TokenRef::new(rt.src_type, a), TokenRef::new(rt.dst_type, b));
            pos += f.table.score(h, rel, t);
            n_pos += 1;
            for _ in 0..5 {
                neg += f.table.score(h, rel, corrupt_tail(g, t, &mut r));
                n_neg += 1;
            }
        }
    }
    let (pos, neg) = (pos / n_pos as f64, neg / n_neg as f64);
    assert!(neg - pos >= 0.1, "mean positive {pos:.4}, mean negative {neg:.4}");
}

/// Dense re-implementation of the encoder: per relation slot an adjacency
/// count matrix, row-normalised, averaged over the slots a node uses.
fn dense_encode(sub: &RegionSubgraph, table: &TokenEmbeddingTable, p: &EncoderParams) -> Vec<Vec<f64>> {
    let nodes: Vec<TokenRef> = sub.nodes().collect();
    let n = nodes.len();
    let d = p.dim;
    let pos = |t: TokenRef| nodes.iter().position(|&u| u == t).unwrap();
    let mut adj = vec![vec![vec![0.0; n]; n]; p.n_rel_slots];
    for e in &sub.induced_edges {
        let (a, b) = (pos(e.src), pos(e.dst));
        adj[e.relation as usize][a][b] += 1.0;
        adj[e.relation as usize][b][a] += 1.0;
    }
    let aug = p.n_rel_slots - 1;
    for &(x, y) in &sub.augmented_edges {
        let (a, b) = (pos(x), pos(y));
        adj[aug][a][b] += 1.0;
        adj[aug][b][a] += 1.0;
    }
    let mut h: Vec<Vec<f64>> = nodes.iter().map(|&t| table.row(t).to_vec()).collect();
    let matvec = |x: &[f64], w: &Matrix| -> Vec<f64> { (0..d).map(|j| (0..d).map(|i| x[i] * w.get(i, j)).sum()).collect() };
    for layer in &p.layers {
        let mut next = Vec::with_capacity(n);
        for v in 0..n {
            let ty = nodes[v].type_index as usize;
            let mut out = matvec(&h[v], &layer.w_self[ty]);
            for (o, b) in out.iter_mut().zip(layer.bias[ty].data()) {
                *o += b;
            }
            let active: Vec<usize> = (0..p.n_rel_slots).filter(|&s| adj[s][v].iter().sum::<f64>() > 0.0).collect();
            for &s in &active {
                let deg: f64 = adj[s][v].iter().sum();
                let mut mean = vec![0.0; d];
                for u in 0..n {
                    for k in 0..d {
                        mean[k] += adj[s][v][u] * h[u][k] / deg;
                    }
                }
                for (o, m) in out.iter_mut().zip(matvec(&mean, &layer.w_rel[s])) {
                    *o += m / active.len() as f64;
                }
            }
            next.push(out.into_iter().map(|x| x.max(0.0)).collect());
        }
        h = next;
    }
    h
}

#[test]
fn encoder_matches_dense_oracle_on_twenty_nodes() {
    let f = fixture();
    let g = &f.bundle.graph;
    let mut r = rng(4);
    // A hand-built 20-node subgraph with random relation and proximity edges.
    let poi = g.type_index("poi").unwrap();
    let road = g.type_index("road").unwrap();
    let cat = g.type_index("poi_category").unwrap();
    let mut spatial: Vec<TokenRef> = (0..8).map(|i| TokenRef::new(poi, i * 3)).chain((0..6).map(|i| TokenRef::new(road, i * 5))).collect();
    let mut virt: Vec<TokenRef> = (0..6).map(|i| TokenRef::new(cat, i)).collect();
    spatial.sort_unstable();
    virt.sort_unstable();
    let mut induced = BTreeSet::new();
    for _ in 0..14 {
        let a = spatial[r.random_range(0..spatial.len())];
        let b = virt[r.random_range(0..virt.len())];
        induced.insert(SubEdge {
            relation: r.random_range(0..g.relations().len() as u16),
            src: a,
            dst: b,
        });
    }
    let mut aug = BTreeSet::new();
    for _ in 0..10 {
        let a = spatial[r.random_range(0..spatial.len())];
        let b = spatial[r.random_range(0..spatial.len())];
        if a != b {
            aug.insert((a.min(b), a.max(b)));
        }
    }
    let sub = RegionSubgraph {
        spatial_tokens: spatial,
        virtual_tokens: virt,
        induced_edges: induced.into_iter().collect(),
        augmented_edges: aug.into_iter().collect(),
        center: Point::new(0.0, 0.0),
    };
    assert_eq!(sub.token_count(), 20);
    let params = random_params(g.types().len(), g.relations().len(), f.table.dim, 2, 8);
    let got = encode(&[&sub], &f.table, &params);
    let want = dense_encode(&sub, &f.table, &params);
    for (v, row) in want.iter().enumerate() {
        for (k, w) in row.iter().enumerate() {
            assert!((got.get(v, k) - w).abs() <= 1e-10, "node {v} dim {k}: {} vs {w}", got.get(v, k));
        }
    }
}

#[test]
fn encoder_matches_dense_oracle_on_extracted_regions() {
    let f = fixture();
    let g = &f.bundle.graph;
    let bbox = g.bbox().unwrap();
    let params = random_params(g.types().len(), g.relations().len(), f.table.dim, 2, 9);
    let mut r = rng(5);
    let mut done = 0;
    while done < 5 {
        let Some(sub) = extract(&f.bundle, random_rect(&mut r, &bbox, 0.003, 0.02)) else { continue };
        let got = encode(&[&sub], &f.table, &params);
        for (v, row) in dense_encode(&sub, &f.table, &params).iter().enumerate() {
            for (k, w) in row.iter().enumerate() {
                assert!((got.get(v, k) - w).abs() <= 1e-10);
            }
        }
        done += 1;
    }
}

#[test]
fn sum_keeps_size_that_mean_would_lose() {
    // One type, every row the same vector: type-wise means agree, sums do not.
    let v = vec![0.3, -0.2, 0.5];
    let table = TokenEmbeddingTable {
        dim: 3,
        type_names: vec!["poi".into()],
        types: vec![Matrix::from_rows(&vec![v.clone(); 5]).unwrap()],
        relation_vectors: vec![],
        relation_matrices: vec![],
    };
    let sub = |n: u32| RegionSubgraph {
        spatial_tokens: (0..n).map(|i| TokenRef::new(0, i)).collect(),
        virtual_tokens: vec![],
        induced_edges: vec![],
        augmented_edges: vec![],
        center: Point::new(0.0, 0.0),
    };
    let params = EncoderParams::identity(1, 0, 3, 2);
    let (small, large) = (sub(1), sub(3));
    let hs = embed_subgraphs(&[&small, &large], &table, &params, false).unwrap();
    assert_eq!(hs.row(0), &[0.3, 0.0, 0.5]);
    assert_eq!(hs.row(1), &[0.3 * 3.0, 0.0, 0.5 * 3.0]);
    let mean = |k: usize, n: f64| -> Vec<f64> { hs.row(k).iter().map(|x| x / n).collect() };
    assert_eq!(mean(0, 1.0), mean(1, 3.0));
    assert_ne!(hs.row(0), hs.row(1));
}

#[test]
fn tokens_outside_the_subgraph_do_not_matter() {
    let f = fixture();
    let g = &f.bundle.graph;
    let bbox = g.bbox().unwrap();
    let params = random_params(g.types().len(), g.relations().len(), f.table.dim, 2, 10);
    let mut r = rng(6);
    let mut done = 0;
    while done < 10 {
        let Some(a) = extract(&f.bundle, random_rect(&mut r, &bbox, 0.005, 0.03)) else { continue };
        let Some(b) = extract(&f.bundle, random_rect(&mut r, &bbox, 0.005, 0.03)) else { continue };
        let alone = embed_subgraphs(&[&a], &f.table, &params, false).unwrap();
        // Batched next to another region.
        let paired = embed_subgraphs(&[&a, &b], &f.table, &params, false).unwrap();
        assert_eq!(alone.row(0), paired.row(0));
        // Every table row of a token outside `a` overwritten.
        let inside: BTreeSet<TokenRef> = a.nodes().collect();
        let mut other = f.table.clone();
        for (ti, m) in other.types.iter_mut().enumerate() {
            for l in 0..m.rows() {
                if !inside.contains(&TokenRef::new(ti as u16, l as u32)) {
                    m.row_mut(l).iter_mut().for_each(|x| *x = r.random_range(-1.0..1.0));
                }
            }
        }
        assert_eq!(alone, embed_subgraphs(&[&a], &other, &params, false).unwrap());
        done += 1;
    }
}

/// Relabel local ids within every type by a random permutation, moving the
/// table rows along, so the encoder sees the same graph in another node order.
fn relabel(sub: &RegionSubgraph, table: &TokenEmbeddingTable, seed: u64) -> (RegionSubgraph, TokenEmbeddingTable) {
    let mut r = rng(seed);
    let perms: Vec<Vec<u32>> = table
        .types
        .iter()
        .map(|m| {
            let mut p: Vec<u32> = (0..m.rows() as u32).collect();
            p.shuffle(&mut r);
            p
        })
        .collect();
    let map = |t: TokenRef| TokenRef::new(t.type_index, perms[t.type_index as usize][t.local_id as usize]);
    let mut new_table = table.clone();
    for (ti, m) in table.types.iter().enumerate() {
        for l in 0..m.rows() {
            new_table.types[ti].row_mut(perms[ti][l] as usize).copy_from_slice(m.row(l));
        }
    }
    let sorted = |v: Vec<TokenRef>| {
        let mut v = v;
        v.sort_unstable();
        v
    };
    let mut induced: Vec<SubEdge> = sub
        .induced_edges
        .iter()
        .map(|e| SubEdge {
            relation: e.relation,
            src: map(e.src),
            dst: map(e.dst),
        })
        .collect();
    induced.sort_unstable();
    let mut aug: Vec<(TokenRef, TokenRef)> = sub
        .augmented_edges
        .iter()
        .map(|&(a, b)| {
            let (a, b) = (map(a), map(b));
            (a.min(b), a.max(b))
        })
        .collect();
    aug.sort_unstable();
    let out = RegionSubgraph {
        spatial_tokens: sorted(sub.spatial_tokens.iter().map(|&t| map(t)).collect()),
        virtual_tokens: sorted(sub.virtual_tokens.iter().map(|&t| map(t)).collect()),
        induced_edges: induced,
        augmented_edges: aug,
        center: sub.center,
    };
    (out, new_table)
}

fn rect_in(bbox: &Rect) -> impl Strategy<Value = Rect> {
    let b = *bbox;
    (0.0..1.0f64, 0.0..1.0f64, 0.05..0.2f64, 0.05..0.2f64).prop_map(move |(x, y, w, h)| {
        let x0 = b.min_x + x * (1.0 - w) * b.width();
        let y0 = b.min_y + y * (1.0 - h) * b.height();
        Rect::new(x0, y0, x0 + w * b.width(), y0 + h * b.height())
    })
}

fn city_bbox() -> Rect {
    fixture().bundle.graph.bbox().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(32) })]

    #[test]
    fn aggregation_is_distributive(rect in rect_in(&city_bbox()), cut in 0.2..0.8f64, seed in 0u64..1000) {
        let f = fixture();
        let g = &f.bundle.graph;
        let x = rect.min_x + cut * rect.width();
        let left = Rect::new(rect.min_x, rect.min_y, x - 1e-6, rect.max_y);
        let right = Rect::new(x + 1e-6, rect.min_y, rect.max_x, rect.max_y);
        let (Some(a), Some(b)) = (extract(&f.bundle, left), extract(&f.bundle, right)) else { return Ok(()) };
        let params = random_params(g.types().len(), g.relations().len(), f.table.dim, 2, seed);
        let (ha, hb) = (encode(&[&a], &f.table, &params), encode(&[&b], &f.table, &params));
        let (ta, tb): (Vec<u16>, Vec<u16>) = (a.nodes().map(|t| t.type_index).collect(), b.nodes().map(|t| t.type_index).collect());
        let k = g.types().len();
        let (sa, sb) = (aggregate_region(&ha, &ta, k), aggregate_region(&hb, &tb, k));
        let mut rows: Vec<Vec<f64>> = (0..ha.rows()).map(|i| ha.row(i).to_vec()).collect();
        rows.extend((0..hb.rows()).map(|i| hb.row(i).to_vec()));
        let union = aggregate_region(&Matrix::from_rows(&rows).unwrap(), &[ta, tb].concat(), k);
        let max_gap = union.iter().zip(&sa).zip(&sb).map(|((u, p), q)| (u - p - q).abs()).fold(0.0, f64::max);
        prop_assert!(max_gap <= 1e-9, "gap {}", max_gap);
        // A fixed linear head is additive over the parts.
        let w: Vec<f64> = (0..union.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let head = |v: &[f64]| -> f64 { v.iter().zip(&w).map(|(x, y)| x * y).sum() };
        prop_assert!((head(&union) - head(&sa) - head(&sb)).abs() <= 1e-8);
        // The batched path aggregates the same way.
        let batched = embed_subgraphs(&[&a, &b], &f.table, &params, false).unwrap();
        prop_assert!(batched.row(0).iter().zip(&sa).all(|(p, q)| (p - q).abs() <= 1e-9));
        prop_assert!(batched.row(1).iter().zip(&sb).all(|(p, q)| (p - q).abs() <= 1e-9));
    }

    #[test]
    fn node_order_does_not_change_region_embedding(rect in rect_in(&city_bbox()), seed in 0u64..1000) {
        let f = fixture();
        let g = &f.bundle.graph;
        let Some(sub) = extract(&f.bundle, rect) else { return Ok(()) };
        let params = random_params(g.types().len(), g.relations().len(), f.table.dim, 2, seed);
        let (moved, table) = relabel(&sub, &f.table, seed);
        let a = embed_subgraphs(&[&sub], &f.table, &params, false).unwrap();
        let b = embed_subgraphs(&[&moved], &table, &params, false).unwrap();
        let gap = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(gap <= 1e-9, "gap {}", gap);
    }
}
