//! Manifold attention over a sequence of SPD matrices.
//!
//! Queries, keys and values are BiMap projections `W x Wᵀ`. Similarities are
//! `1 / (1 + ln(1 + d_LEM))`, each row is softmax-normalized, and every output
//! is the weighted Log-Euclidean mean of the values.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::StiefelParam;
use crate::error::{MattError, Result};
use crate::geometry::similarity_from_distance;
use crate::layers::bimap;
use crate::spd::{mat_exp_sym, mat_log_spd, SpdMatrix, SymmetricMatrix};

/// Ordered SPD matrices of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdSequence {
    epochs: Vec<SpdMatrix>,
}

impl SpdSequence {
    pub fn new(epochs: Vec<SpdMatrix>) -> Result<Self> {
        let first = epochs
            .first()
            .ok_or_else(|| MattError::EmptyInput("SPD sequence needs at least one element".into()))?;
        let n = first.dim();
        if let Some(bad) = epochs.iter().find(|p| p.dim() != n) {
            return Err(MattError::Shape(format!(
                "sequence mixes dimensions {n} and {}",
                bad.dim()
            )));
        }
        Ok(Self { epochs })
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.epochs[0].dim()
    }

    pub fn epochs(&self) -> &[SpdMatrix] {
        &self.epochs
    }

    pub fn into_inner(self) -> Vec<SpdMatrix> {
        self.epochs
    }
}

/// Similarities `α` and their row-softmax `α′`, both `m × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub raw: DMatrix<f64>,
    pub probabilities: DMatrix<f64>,
}

pub fn row_softmax(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|x| *x = (*x - max).exp());
        let sum = row.sum();
        row.unscale_mut(sum);
    }
    out
}

fn check_weights(x: &SpdSequence, ws: [&StiefelParam; 3]) -> Result<()> {
    let (r, c) = (ws[0].rows(), ws[0].cols());
    for w in ws {
        if w.rows() != r || w.cols() != c {
            return Err(MattError::Shape(format!(
                "attention weights disagree: {r}x{c} vs {}x{}",
                w.rows(),
                w.cols()
            )));
        }
    }
    if c != x.dim() {
        return Err(MattError::Shape(format!(
            "attention weights have {c} columns for inputs of dim {}",
            x.dim()
        )));
    }
    Ok(())
}

/// Queries, keys and values, one `bimap` per epoch and weight.
pub fn qkv_loop(
    x: &SpdSequence,
    wq: &StiefelParam,
    wk: &StiefelParam,
    wv: &StiefelParam,
) -> Result<(SpdSequence, SpdSequence, SpdSequence)> {
    check_weights(x, [wq, wk, wv])?;
    let map = |w: &StiefelParam| -> Result<SpdSequence> {
        SpdSequence::new(x.epochs().iter().map(|p| bimap(p, w)).collect::<Result<_>>()?)
    };
    Ok((map(wq)?, map(wk)?, map(wv)?))
}

/// Horizontal concatenation `[x₁ … x_m]`, `d_c × (m·d_c)`.
pub fn concat_epochs(x: &SpdSequence) -> DMatrix<f64> {
    let n = x.dim();
    let mut h = DMatrix::zeros(n, n * x.len());
    for (i, p) in x.epochs().iter().enumerate() {
        h.columns_mut(i * n, n).copy_from(p.matrix());
    }
    h
}

/// Queries, keys and values with one product `W [x₁ … x_m]` per weight,
/// followed by per-block right multiplication by `Wᵀ`.
pub fn batched_qkv(
    x: &SpdSequence,
    wq: &StiefelParam,
    wk: &StiefelParam,
    wv: &StiefelParam,
) -> Result<(SpdSequence, SpdSequence, SpdSequence)> {
    check_weights(x, [wq, wk, wv])?;
    let h = concat_epochs(x);
    let n = x.dim();
    let map = |w: &StiefelParam| -> Result<SpdSequence> {
        let wm = w.matrix();
        let y = wm * &h;
        let wt = wm.transpose();
        let out = (0..x.len())
            .map(|i| SpdMatrix::from_symmetrized(&(y.columns(i * n, n) * &wt)))
            .collect::<Result<Vec<_>>>()?;
        SpdSequence::new(out)
    };
    Ok((map(wq)?, map(wk)?, map(wv)?))
}

/// `α_ij = sim(q_i, k_j)`, computed from the matrix logs once per element.
pub fn similarity_matrix(q: &SpdSequence, k: &SpdSequence) -> Result<DMatrix<f64>> {
    if q.len() != k.len() || q.dim() != k.dim() {
        return Err(MattError::Shape("query and key sequences differ in shape".into()));
    }
    let lq = q.epochs().iter().map(mat_log_spd).collect::<Result<Vec<_>>>()?;
    let lk = k.epochs().iter().map(mat_log_spd).collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(q.len(), k.len(), |i, j| {
        similarity_from_distance((lq[i].matrix() - lk[j].matrix()).norm())
    }))
}

/// The full attention block; returns the outputs `v′` and the attention matrix.
pub fn attention_forward(
    x: &SpdSequence,
    wq: &StiefelParam,
    wk: &StiefelParam,
    wv: &StiefelParam,
) -> Result<(SpdSequence, AttentionMatrix)> {
    let (q, k, v) = qkv_loop(x, wq, wk, wv)?;
    let raw = similarity_matrix(&q, &k)?;
    let probabilities = row_softmax(&raw);
    let lv = v.epochs().iter().map(mat_log_spd).collect::<Result<Vec<_>>>()?;
    let n = v.dim();
    let outputs = (0..x.len())
        .map(|i| {
            let mut acc = DMatrix::zeros(n, n);
            for (l, log) in lv.iter().enumerate() {
                acc += log.matrix() * probabilities[(i, l)];
            }
            mat_exp_sym(&SymmetricMatrix::new(crate::spd::sym_part(&acc))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((SpdSequence::new(outputs)?, AttentionMatrix { raw, probabilities }))
}

/// Mean attention received by each epoch (column means of `α′`).
pub fn attention_scores(att: &AttentionMatrix) -> DVector<f64> {
    let p = &att.probabilities;
    DVector::from_fn(p.ncols(), |j, _| p.column(j).mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{random_orthogonal, random_spd, seeded_rng};
    use proptest::prelude::*;

    fn random_sequence(m: usize, n: usize, seed: u64) -> SpdSequence {
        let mut rng = seeded_rng(seed);
        SpdSequence::new((0..m).map(|_| random_spd(n, 1.5, &mut rng)).collect()).unwrap()
    }

    fn weights(rows: usize, cols: usize, seed: u64) -> [StiefelParam; 3] {
        let mut rng = seeded_rng(seed);
        [
            StiefelParam::random(rows, cols, &mut rng).unwrap(),
            StiefelParam::random(rows, cols, &mut rng).unwrap(),
            StiefelParam::random(rows, cols, &mut rng).unwrap(),
        ]
    }

    #[test]
    fn single_epoch_passes_value_through() {
        let x = random_sequence(1, 5, 1);
        let [wq, wk, wv] = weights(3, 5, 2);
        let (out, att) = attention_forward(&x, &wq, &wk, &wv).unwrap();
        assert_eq!(att.probabilities, DMatrix::from_element(1, 1, 1.0));
        let v = bimap(&x.epochs()[0], &wv).unwrap();
        assert!((out.epochs()[0].matrix() - v.matrix()).norm() < 1e-10);
    }

    #[test]
    fn identical_inputs_give_uniform_rows() {
        let mut rng = seeded_rng(3);
        let p = random_spd(5, 1.0, &mut rng);
        let x = SpdSequence::new(vec![p.clone(); 4]).unwrap();
        let [wq, wk, wv] = weights(3, 5, 4);
        let (out, att) = attention_forward(&x, &wq, &wk, &wv).unwrap();
        assert!(att.probabilities.iter().all(|a| (a - 0.25).abs() < 1e-10));
        let v = bimap(&p, &wv).unwrap();
        for o in out.epochs() {
            assert!((o.matrix() - v.matrix()).norm() < 1e-10);
        }
    }

    #[test]
    fn diagonal_case_matches_scalar_evaluation() {
        let x = SpdSequence::new(vec![
            SpdMatrix::from_diagonal(&[1.0, 1.0, 1.0]).unwrap(),
            SpdMatrix::from_diagonal(&[4.0, 1.0, 1.0]).unwrap(),
        ])
        .unwrap();
        let w = StiefelParam::truncated_identity(2, 3).unwrap();
        let (out, att) = attention_forward(&x, &w, &w, &w).unwrap();
        // Projected logs: diag(0,0) and diag(ln 4, 0).
        let l4 = 4f64.ln();
        let s_off = 1.0 / (1.0 + (1.0 + l4).ln());
        let p_same = 1.0f64.exp() / (1.0f64.exp() + s_off.exp());
        let p_other = 1.0 - p_same;
        assert!((att.raw[(0, 1)] - s_off).abs() < 1e-14);
        assert!((att.raw[(1, 1)] - 1.0).abs() < 1e-14);
        assert!((att.probabilities[(0, 0)] - p_same).abs() < 1e-14);
        let v0 = DMatrix::from_diagonal(&DVector::from_vec(vec![(p_other * l4).exp(), 1.0]));
        let v1 = DMatrix::from_diagonal(&DVector::from_vec(vec![(p_same * l4).exp(), 1.0]));
        assert!((out.epochs()[0].matrix() - v0).norm() < 1e-12);
        assert!((out.epochs()[1].matrix() - v1).norm() < 1e-12);
    }

    #[test]
    fn batched_matches_loop() {
        for (m, seed) in [(1usize, 5u64), (5, 6), (7, 7)] {
            let x = random_sequence(m, 6, seed);
            let [wq, wk, wv] = weights(4, 6, seed + 100);
            let a = qkv_loop(&x, &wq, &wk, &wv).unwrap();
            let b = batched_qkv(&x, &wq, &wk, &wv).unwrap();
            for (sa, sb) in [(&a.0, &b.0), (&a.1, &b.1), (&a.2, &b.2)] {
                for (pa, pb) in sa.epochs().iter().zip(sb.epochs()) {
                    assert!((pa.matrix() - pb.matrix()).amax() < 1e-12);
                }
            }
        }
        assert_eq!(concat_epochs(&random_sequence(5, 6, 1)).shape(), (6, 30));
    }

    #[test]
    fn scores_examples() {
        let uniform = AttentionMatrix {
            raw: DMatrix::from_element(3, 3, 1.0),
            probabilities: DMatrix::from_element(3, 3, 1.0 / 3.0),
        };
        assert!(attention_scores(&uniform).iter().all(|s| (s - 1.0 / 3.0).abs() < 1e-15));
        let limit = AttentionMatrix {
            raw: DMatrix::from_element(2, 2, 1.0),
            probabilities: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
        };
        assert_eq!(attention_scores(&limit).as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn weight_shape_errors() {
        let x = random_sequence(2, 5, 8);
        let [wq, wk, _] = weights(3, 5, 9);
        let wrong = StiefelParam::truncated_identity(3, 4).unwrap();
        assert!(matches!(attention_forward(&x, &wq, &wk, &wrong), Err(MattError::Shape(_))));
        assert!(matches!(SpdSequence::new(vec![]), Err(MattError::EmptyInput(_))));
    }

    #[test]
    fn congruence_equivariance_at_truncated_identity() {
        let mut rng = seeded_rng(10);
        let (n, p) = (5, 3);
        // R = blockdiag(R1, R2) commutes with the truncation to the first p coordinates.
        let mut r = DMatrix::zeros(n, n);
        r.view_mut((0, 0), (p, p)).copy_from(&random_orthogonal(p, &mut rng));
        r.view_mut((p, p), (n - p, n - p)).copy_from(&random_orthogonal(n - p, &mut rng));
        let x = random_sequence(4, n, 11);
        let rotated = SpdSequence::new(
            x.epochs()
                .iter()
                .map(|e| SpdMatrix::from_symmetrized(&(&r * e.matrix() * r.transpose())).unwrap())
                .collect(),
        )
        .unwrap();
        let w = StiefelParam::truncated_identity(p, n).unwrap();
        let (out, att) = attention_forward(&x, &w, &w, &w).unwrap();
        let (out_r, att_r) = attention_forward(&rotated, &w, &w, &w).unwrap();
        assert!((att.probabilities - att_r.probabilities).amax() < 1e-10);
        let r1 = r.view((0, 0), (p, p)).clone_owned();
        for (a, b) in out.epochs().iter().zip(out_r.epochs()) {
            let expect = &r1 * a.matrix() * r1.transpose();
            assert!((expect - b.matrix()).norm() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn outputs_spd_rows_stochastic_and_bounded(seed in any::<u64>(), m in 1usize..6) {
            let x = random_sequence(m, 5, seed);
            let [wq, wk, wv] = weights(3, 5, seed ^ 0xABCD);
            let (out, att) = attention_forward(&x, &wq, &wk, &wv).unwrap();
            for o in out.epochs() {
                prop_assert!(o.verify().is_ok());
            }
            let e = std::f64::consts::E;
            let (lo, hi) = (1.0 / (1.0 + (m as f64 - 1.0) * e), e / (e + m as f64 - 1.0));
            for i in 0..m {
                prop_assert!((att.probabilities.row(i).sum() - 1.0).abs() < 1e-10);
                for j in 0..m {
                    let a = att.raw[(i, j)];
                    prop_assert!(a > 0.0 && a <= 1.0);
                    let p = att.probabilities[(i, j)];
                    prop_assert!(p >= lo - 1e-15 && p <= hi + 1e-15);
                }
            }
            let s = attention_scores(&att);
            prop_assert!((s.sum() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>()) {
            let m = 4;
            let x = random_sequence(m, 4, seed);
            let [wq, wk, wv] = weights(3, 4, seed.wrapping_add(1));
            let perm = [2usize, 0, 3, 1];
            let px = SpdSequence::new(perm.iter().map(|&i| x.epochs()[i].clone()).collect()).unwrap();
            let (out, att) = attention_forward(&x, &wq, &wk, &wv).unwrap();
            let (pout, patt) = attention_forward(&px, &wq, &wk, &wv).unwrap();
            for (a, &i) in perm.iter().enumerate() {
                prop_assert!((pout.epochs()[a].matrix() - out.epochs()[i].matrix()).norm() < 1e-10);
                for (b, &j) in perm.iter().enumerate() {
                    prop_assert!((patt.probabilities[(a, b)] - att.probabilities[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }
}
