//! Contrastive, mobility-reconstruction and flow-prediction losses on the tape.

use super::flows::FlowMatrix;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Tape, Var};

/// `-Σ_i log(exp(r_i·p_i/τ) / Σ_j exp(r_i·p_j/τ))` on L2-normalized rows;
/// the other rows' positives act as negatives.
pub fn info_nce(tape: &mut Tape, r: Var, p: Var, tau: f64) -> Result<Var> {
    let b = tape.value(r).rows();
    if b == 0 {
        return Err(Error::BatchTooSmall { needed: 1, got: 0 });
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let rn = tape.normalize_rows(r)?;
    let pn = tape.normalize_rows(p)?;
    let pt = tape.transpose(pn)?;
    let s = tape.matmul(rn, pt)?;
    let s = tape.scale(s, 1.0 / tau)?;
    let ls = tape.log_softmax_row(s)?;
    let eye = tape.constant(Matrix::identity(b))?;
    let diag = tape.mul(ls, eye)?;
    let total = tape.sum(diag)?;
    tape.scale(total, -1.0)
}

/// `log(1 + flow)` with rows normalized to sum to one; all-zero rows become
/// uniform.
pub fn mobility_target(flow: &Matrix) -> Matrix {
    let n = flow.cols();
    let mut t = flow.map(|v| v.ln_1p());
    for i in 0..t.rows() {
        let row = t.row_mut(i);
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v = if s > 0.0 { *v / s } else { 1.0 / n as f64 };
        }
    }
    t
}

/// Mean squared error between `softmax_row(H M_f Hᵀ)` and the flow target.
pub fn mobility_loss(tape: &mut Tape, h: Var, target: &Matrix, m_f: Var) -> Result<Var> {
    let hm = tape.matmul(h, m_f)?;
    let ht = tape.transpose(h)?;
    let logits = tape.matmul(hm, ht)?;
    let pred = tape.softmax_row(logits)?;
    let t = tape.constant(target.clone())?;
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Per-region `(log(1 + outflow), log(1 + inflow))`, each column z-scored
/// over the batch with population sd; zero-variance columns become zeros.
pub fn pred_targets(flows: &FlowMatrix) -> Matrix {
    let n = flows.outflow.len();
    let mut t = Matrix::zeros(n, 2);
    for (c, col) in [&flows.outflow, &flows.inflow].into_iter().enumerate() {
        let v: Vec<f64> = col.iter().map(|x| x.ln_1p()).collect();
        let mean = v.iter().sum::<f64>() / n.max(1) as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
        let sd = var.sqrt();
        for (i, x) in v.iter().enumerate() {
            t.set(i, c, if sd > 1e-12 { (x - mean) / sd } else { 0.0 });
        }
    }
    t
}

/// Mean squared error of `H W_p` against the flow-total targets.
pub fn pred_loss(tape: &mut Tape, h: Var, target: &Matrix, w_p: Var) -> Result<Var> {
    let pred = tape.matmul(h, w_p)?;
    let t = tape.constant(target.clone())?;
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nce_value(r: &Matrix, p: &Matrix, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let rv = tape.constant(r.clone()).unwrap();
        let pv = tape.constant(p.clone()).unwrap();
        let l = info_nce(&mut tape, rv, pv, tau).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let r = Matrix::row_vector(vec![1.0, 2.0]);
        let p = Matrix::row_vector(vec![-3.0, 0.5]);
        assert_eq!(nce_value(&r, &p, 0.1), 0.0);
    }

    #[test]
    fn two_orthogonal_pairs() {
        let r = Matrix::identity(2);
        let want = 2.0 * -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((nce_value(&r, &r, 1.0) - want).abs() < 1e-12);
        assert!((want / 2.0 - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn empty_batch_is_error() {
        let mut tape = Tape::new();
        let r = tape.constant(Matrix::zeros(0, 3)).unwrap();
        assert!(matches!(info_nce(&mut tape, r, r, 0.1), Err(Error::BatchTooSmall { .. })));
    }

    #[test]
    fn target_rows() {
        let f = Matrix::from_rows(&[vec![0.0, 5.0], vec![0.0, 0.0]]).unwrap();
        let t = mobility_target(&f);
        assert_eq!(t.data(), &[0.0, 1.0, 0.5, 0.5]);
    }

    #[test]
    fn constant_totals_give_zero_targets() {
        let f = FlowMatrix {
            flow: Matrix::zeros(3, 3),
            outflow: vec![4.0; 3],
            inflow: vec![1.0; 3],
        };
        assert!(pred_targets(&f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_gives_mean_squared_targets() {
        let f = FlowMatrix {
            flow: Matrix::zeros(3, 3),
            outflow: vec![1.0, 5.0, 9.0],
            inflow: vec![0.0, 2.0, 2.0],
        };
        let t = pred_targets(&f);
        let mut tape = Tape::new();
        let h = tape.constant(Matrix::filled(3, 4, 0.3)).unwrap();
        let w = tape.constant(Matrix::zeros(4, 2)).unwrap();
        let l = pred_loss(&mut tape, h, &t, w).unwrap();
        let want = t.data().iter().map(|v| v * v).sum::<f64>() / 6.0;
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }
}
