//! Interaction weights between region subgraphs: structure (DTW over sorted
//! degree sequences), position (normalized center distance) and neighbor
//! (top-k nearest centers).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::numeric::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureTransform {
    Raw,
    ExpNegNormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageAgg {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Structure,
    Position,
    Neighbor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub structure: bool,
    pub position: bool,
    pub neighbor: bool,
    pub k_neighbor: usize,
    pub structure_transform: StructureTransform,
    pub message_agg: MessageAgg,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            structure: true,
            position: true,
            neighbor: true,
            k_neighbor: 5,
            structure_transform: StructureTransform::ExpNegNormalized,
            message_agg: MessageAgg::Mean,
        }
    }
}

impl ChannelConfig {
    pub fn none() -> Self {
        Self {
            structure: false,
            position: false,
            neighbor: false,
            ..Self::default()
        }
    }

    /// Enabled channels in concat order.
    pub fn enabled(&self) -> Vec<Channel> {
        let mut out = Vec::new();
        if self.structure {
            out.push(Channel::Structure);
        }
        if self.position {
            out.push(Channel::Position);
        }
        if self.neighbor {
            out.push(Channel::Neighbor);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighbor && self.k_neighbor == 0 {
            return Err(Error::InvalidConfig("k_neighbor must be at least 1".into()));
        }
        Ok(())
    }
}

/// Dynamic time warping with cost |a_i - b_j|. Against an empty sequence the
/// distance is the sum of absolute values of the other.
pub fn dtw<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return a.iter().chain(b).map(|&v| v.into().abs()).sum();
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &ai in a {
        let ai: f64 = ai.into();
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = (ai - b[j - 1].into()).abs();
            cur[j] = cost + prev[j - 1].min(prev[j]).min(cur[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Raw structure distance: DTW summed over node types.
pub fn structure_distance(a: &[Vec<u32>], b: &[Vec<u32>]) -> f64 {
    let empty = Vec::new();
    (0..a.len().max(b.len()))
        .map(|t| dtw(a.get(t).unwrap_or(&empty), b.get(t).unwrap_or(&empty)))
        .sum()
}

/// Pairwise structure weights for a batch of degree-sequence sets.
///
/// In the normalized mode the raw distances are min-max scaled over all
/// entries of the matrix (the zero diagonal included) and mapped through
/// `exp(-s)`, so every weight lies in `[e^-1, 1]`.
pub fn gamma_structure(degrees: &[Vec<Vec<u32>>], transform: StructureTransform) -> Matrix {
    let n = degrees.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| structure_distance(&degrees[i], &degrees[j]))
        .collect();
    let mut raw = Matrix::zeros(n, n);
    for (&(i, j), &v) in pairs.iter().zip(&vals) {
        raw.set(i, j, v);
        raw.set(j, i, v);
    }
    match transform {
        StructureTransform::Raw => raw,
        StructureTransform::ExpNegNormalized => {
            let (lo, hi) = raw
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            raw.map(|v| {
                let s = if span > 0.0 { (v - lo) / span } else { 0.0 };
                (-s).exp()
            })
        }
    }
}

fn center_distances(centers: &[Point]) -> Result<Matrix> {
    let n = centers.len();
    if n < 2 {
        return Err(Error::BatchTooSmall { needed: 2, got: n });
    }
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = centers[i].dist(centers[j]);
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    Ok(d)
}

/// `exp(-d~)` where `d~` is the center distance min-max normalized over
/// distinct pairs. The diagonal is 1.
pub fn gamma_position(centers: &[Point]) -> Result<Matrix> {
    let d = center_distances(centers)?;
    let n = centers.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lo = lo.min(d.get(i, j));
                hi = hi.max(d.get(i, j));
            }
        }
    }
    let span = hi - lo;
    let mut g = Matrix::filled(n, n, 1.0);
    for i in 0..n {
        for j in 0..n {
            if i != j && span > 0.0 {
                g.set(i, j, (-(d.get(i, j) - lo) / span).exp());
            }
        }
    }
    Ok(g)
}

/// 0/1 weights for the `k` nearest other centers of each row (ties by index)
/// and the selected index sets.
pub fn gamma_neighbor(centers: &[Point], k: usize) -> Result<(Matrix, Vec<Vec<usize>>)> {
    let d = center_distances(centers)?;
    let n = centers.len();
    let mut g = Matrix::zeros(n, n);
    let mut sets = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| d.get(i, a).total_cmp(&d.get(i, b)).then(a.cmp(&b)));
        others.truncate(k);
        for &j in &others {
            g.set(i, j, 1.0);
        }
        sets.push(others);
    }
    Ok((g, sets))
}

/// Row-operator for one channel: entry (i, j) is the weight with which
/// `h_j` enters `m_i`. Relevance sets exclude `i` itself; empty sets give a
/// zero row.
pub fn message_operator(gamma: &Matrix, relevant: &[Vec<usize>], agg: MessageAgg) -> Matrix {
    let n = gamma.rows();
    let mut a = Matrix::zeros(n, n);
    for (i, rel) in relevant.iter().enumerate() {
        let norm = match agg {
            MessageAgg::Mean if !rel.is_empty() => 1.0 / rel.len() as f64,
            _ => 1.0,
        };
        for &j in rel {
            a.set(i, j, gamma.get(i, j) * norm);
        }
    }
    a
}

/// All other rows, for the structure and position channels.
pub fn all_others(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect()
}

/// Message operators for every enabled channel, in concat order. A single
/// subgraph gets zero operators.
pub fn channel_operators(
    config: &ChannelConfig,
    degrees: &[Vec<Vec<u32>>],
    centers: &[Point],
) -> Result<Vec<Matrix>> {
    config.validate()?;
    let n = centers.len();
    if degrees.len() != n {
        return Err(Error::shape("channel_operators", "degree and center counts differ"));
    }
    let enabled = config.enabled();
    if n < 2 {
        return Ok(vec![Matrix::zeros(n, n); enabled.len()]);
    }
    let others = all_others(n);
    enabled
        .into_iter()
        .map(|c| {
            Ok(match c {
                Channel::Structure => {
                    message_operator(&gamma_structure(degrees, config.structure_transform), &others, config.message_agg)
                }
                Channel::Position => message_operator(&gamma_position(centers)?, &others, config.message_agg),
                Channel::Neighbor => {
                    let (g, sets) = gamma_neighbor(centers, config.k_neighbor)?;
                    message_operator(&g, &sets, config.message_agg)
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dtw_examples() {
        assert_eq!(dtw(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(dtw(&[1.0], &[4.0]), 3.0);
        assert_eq!(dtw(&[1.0, 2.0], &[2.0]), 1.0);
        assert_eq!(dtw::<f64>(&[], &[]), 0.0);
        assert_eq!(dtw(&[], &[2.0, -3.0]), 5.0);
        assert_eq!(dtw(&[3u32, 1], &[2]), 2.0);
    }

    #[test]
    fn structure_self_zero() {
        let g = vec![vec![3, 1], vec![2, 2, 1]];
        assert_eq!(structure_distance(&g, &g), 0.0);
        let m = gamma_structure(&[g.clone(), g.clone()], StructureTransform::Raw);
        assert_eq!(m.data(), &[0.0; 4]);
    }

    #[test]
    fn structure_normalized_range() {
        let ds = vec![vec![vec![3, 1]], vec![vec![2]], vec![vec![5, 5, 4]]];
        let m = gamma_structure(&ds, StructureTransform::ExpNegNormalized);
        for &v in m.data() {
            assert!(((-1f64).exp() - 1e-15..=1.0).contains(&v));
        }
        for i in 0..3 {
            assert_eq!(m.get(i, i), 1.0);
        }
    }

    #[test]
    fn position_extremes() {
        let c = [Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(5.0, 0.0)];
        let g = gamma_position(&c).unwrap();
        assert_eq!(g.get(0, 1), 1.0);
        assert!((g.get(0, 2) - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(g.get(2, 0), g.get(0, 2));
        let same = gamma_position(&[Point::new(1.0, 1.0); 3]).unwrap();
        assert!(same.data().iter().all(|&v| v == 1.0));
        assert!(matches!(gamma_position(&c[..1]), Err(Error::BatchTooSmall { .. })));
    }

    #[test]
    fn neighbor_small_cases() {
        let c = [Point::new(0.0, 0.0), Point::new(1.0, 0.0)];
        let (g, sets) = gamma_neighbor(&c, 1).unwrap();
        assert_eq!(sets, vec![vec![1], vec![0]]);
        assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0]);
        let c3 = [Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(2.0, 0.0)];
        let (g, _) = gamma_neighbor(&c3, 7).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.get(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn mean_operator_rows() {
        let g = Matrix::filled(3, 3, 0.5);
        let a = message_operator(&g, &[vec![1, 2], vec![], vec![0]], MessageAgg::Mean);
        assert_eq!(a.row(0), &[0.0, 0.25, 0.25]);
        assert_eq!(a.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(a.row(2), &[0.5, 0.0, 0.0]);
    }

    #[test]
    fn single_subgraph_gets_zero_operators() {
        let ops = channel_operators(&ChannelConfig::default(), &[vec![]], &[Point::new(0.0, 0.0)]).unwrap();
        assert_eq!(ops.len(), 3);
        assert!(ops.iter().all(|m| m.data() == [0.0]));
    }
}
