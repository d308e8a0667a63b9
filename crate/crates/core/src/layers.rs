//! Euclidean feature extraction, the covariance bridge onto the SPD manifold,
//! and the SPD layers BiMap, ReEig and LogEig-flatten, plus the FC head.
//!
//! These are plain (tape-free) evaluations. The trainable model in
//! [`crate::model`] records the same computations on a tape.

use nalgebra::{DMatrix, DVector};

use crate::attention::SpdSequence;
use crate::autodiff::tape::{flatten_upper, softmax_all, PROB_FLOOR};
use crate::autodiff::StiefelParam;
use crate::data::Trial;
use crate::error::{MattError, Result};
use crate::spd::{eigh, mat_log_spd, regularize_spd, symmetrize, SpdMatrix};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_EPS_RE: f64 = 1e-4;

/// Shape of the two-layer convolutional front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub spatial_filters: usize,
    pub temporal_filters: usize,
    pub temporal_kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    /// Motor-imagery defaults.
    pub fn mi(channels: usize) -> Self {
        Self {
            spatial_filters: channels,
            temporal_filters: 20,
            temporal_kernel: 12,
            stride: 1,
        }
    }

    /// SSVEP settings: long temporal kernel, many temporal filters.
    pub fn ssvep(channels: usize) -> Self {
        Self {
            spatial_filters: channels,
            temporal_filters: 100,
            temporal_kernel: 125,
            stride: 1,
        }
    }

    pub fn validate(&self, timepoints: usize) -> Result<()> {
        if self.spatial_filters == 0 || self.temporal_filters == 0 || self.temporal_kernel == 0 || self.stride == 0 {
            return Err(MattError::Config("convolution sizes must be positive".into()));
        }
        if self.temporal_kernel > timepoints {
            return Err(MattError::Shape(format!(
                "temporal kernel {} is longer than the {timepoints}-sample signal",
                self.temporal_kernel
            )));
        }
        Ok(())
    }

    /// Length of the feature map for `timepoints` input samples.
    pub fn output_len(&self, timepoints: usize) -> Result<usize> {
        self.validate(timepoints)?;
        Ok((timepoints - self.temporal_kernel) / self.stride + 1)
    }

    pub fn param_count(&self, channels: usize) -> usize {
        self.spatial_filters * channels + self.temporal_filters * self.spatial_filters * self.temporal_kernel
    }
}

/// Conv weights. `spatial` is `F1 × C`; `temporal` is `d_c × (F1·k)` with
/// column `c·k + τ` holding tap `τ` of input channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub spatial: DMatrix<f64>,
    pub temporal: DMatrix<f64>,
}

impl ConvWeights {
    pub fn check(&self, spec: &ConvSpec, channels: usize) -> Result<()> {
        let want_sp = (spec.spatial_filters, channels);
        let want_tm = (spec.temporal_filters, spec.spatial_filters * spec.temporal_kernel);
        if self.spatial.shape() != want_sp || self.temporal.shape() != want_tm {
            return Err(MattError::Shape(format!(
                "conv weights {:?}/{:?}, expected {want_sp:?}/{want_tm:?}",
                self.spatial.shape(),
                self.temporal.shape()
            )));
        }
        Ok(())
    }
}

/// Output of the feature extractor, `d_c × T′`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: DMatrix<f64>,
}

impl FeatureMap {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.iter().all(|x| x.is_finite()) {
            return Err(MattError::NonFinite("feature map".into()));
        }
        Ok(Self { values })
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn timepoints(&self) -> usize {
        self.values.ncols()
    }
}

/// Stack `kernel` lagged copies of each row: output row `c·k + τ`, column `s`
/// holds `x[c, s·stride + τ]`.
pub fn unfold(x: &DMatrix<f64>, kernel: usize, stride: usize) -> Result<DMatrix<f64>> {
    let (rows, t) = x.shape();
    if kernel == 0 || stride == 0 || kernel > t {
        return Err(MattError::Shape(format!("kernel {kernel} over {t} samples")));
    }
    let out_t = (t - kernel) / stride + 1;
    Ok(DMatrix::from_fn(rows * kernel, out_t, |r, s| {
        x[(r / kernel, s * stride + r % kernel)]
    }))
}

/// Spatial convolution (kernel `C × 1`) then temporal convolution
/// (kernel `1 × k` over all spatial maps), both linear.
pub fn feature_extract(trial: &Trial, spec: &ConvSpec, weights: &ConvWeights) -> Result<FeatureMap> {
    spec.validate(trial.timepoints())?;
    weights.check(spec, trial.channels())?;
    let spatial = &weights.spatial * &trial.samples;
    let lagged = unfold(&spatial, spec.temporal_kernel, spec.stride)?;
    FeatureMap::new(&weights.temporal * lagged)
}

/// Sample covariance `Z Zᵀ / (L − 1)` of a row-centered block.
pub fn sample_covariance(block: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let len = block.ncols();
    if len < 2 {
        return Err(MattError::Shape(format!("covariance needs >= 2 samples, got {len}")));
    }
    let mut z = block.clone();
    for mut row in z.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    Ok(&z * z.transpose() / (len - 1) as f64)
}

/// Length of each of `m` epochs cut from `timepoints` samples.
pub fn epoch_len(timepoints: usize, m: usize) -> Result<usize> {
    if m == 0 {
        return Err(MattError::Shape("epoch count must be positive".into()));
    }
    let len = timepoints / m;
    if len < 2 {
        return Err(MattError::Shape(format!(
            "{m} epochs over {timepoints} samples leaves {len} per epoch, need >= 2"
        )));
    }
    Ok(len)
}

/// Cut the map into `m` contiguous epochs, dropping the tail remainder, and
/// turn each into a regularized covariance.
pub fn e2r(fm: &FeatureMap, m: usize, eps: f64) -> Result<SpdSequence> {
    let len = epoch_len(fm.timepoints(), m)?;
    let epochs = (0..m)
        .map(|i| {
            let cov = sample_covariance(&fm.values.columns(i * len, len).clone_owned())?;
            regularize_spd(&symmetrize(&cov)?, eps)
        })
        .collect::<Result<Vec<_>>>()?;
    SpdSequence::new(epochs)
}

/// `W X Wᵀ`.
pub fn bimap(x: &SpdMatrix, w: &StiefelParam) -> Result<SpdMatrix> {
    if w.cols() != x.dim() {
        return Err(MattError::Shape(format!(
            "bimap weight {}x{} on a {}x{} input",
            w.rows(),
            w.cols(),
            x.dim(),
            x.dim()
        )));
    }
    let wm = w.matrix();
    SpdMatrix::from_symmetrized(&(wm * x.matrix() * wm.transpose()))
}

/// Clamp eigenvalues from below at `eps_re`.
pub fn reeig(p: &SpdMatrix, eps_re: f64) -> Result<SpdMatrix> {
    if !(eps_re > 0.0) {
        return Err(MattError::Config(format!("rectification threshold {eps_re} must be positive")));
    }
    let eig = eigh(p.matrix())?;
    let clamped = eig.values.map(|s| s.max(eps_re));
    SpdMatrix::from_spectrum(&eig.vectors, &clamped)
}

/// Matrix log, then the row-major upper triangle with off-diagonals × √2.
pub fn r2e(p: &SpdMatrix) -> Result<DVector<f64>> {
    let log = mat_log_spd(p)?;
    Ok(DVector::from_column_slice(flatten_upper(log.matrix()).as_slice()))
}

/// Inverse of the flatten step of [`r2e`].
pub fn unflatten_upper(v: &DVector<f64>, n: usize) -> Result<DMatrix<f64>> {
    if v.len() != n * (n + 1) / 2 {
        return Err(MattError::Shape(format!(
            "vector of length {} does not flatten a {n}x{n} matrix",
            v.len()
        )));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            let x = if i == j { v[k] } else { v[k] / std::f64::consts::SQRT_2 };
            m[(i, j)] = x;
            m[(j, i)] = x;
            k += 1;
        }
    }
    Ok(m)
}

/// Fully connected layer: `classes × D` weight and length-`classes` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FcWeights {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl FcWeights {
    pub fn zeros(classes: usize, inputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(classes, inputs),
            bias: DVector::zeros(classes),
        }
    }
}

/// Pre-softmax scores of the concatenated per-epoch vectors.
pub fn head_logits(vectors: &[DVector<f64>], fc: &FcWeights) -> Result<DVector<f64>> {
    let total: usize = vectors.iter().map(|v| v.len()).sum();
    if total != fc.weight.ncols() || fc.bias.len() != fc.weight.nrows() {
        return Err(MattError::Shape(format!(
            "head input of length {total} for weight {}x{} and bias {}",
            fc.weight.nrows(),
            fc.weight.ncols(),
            fc.bias.len()
        )));
    }
    let z = DVector::from_iterator(total, vectors.iter().flat_map(|v| v.iter().copied()));
    Ok(&fc.weight * z + &fc.bias)
}

pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let m = DMatrix::from_column_slice(logits.len(), 1, logits.as_slice());
    DVector::from_column_slice(softmax_all(&m).as_slice())
}

/// Affine map then softmax.
pub fn classify_head(vectors: &[DVector<f64>], fc: &FcWeights) -> Result<DVector<f64>> {
    Ok(softmax(&head_logits(vectors, fc)?))
}

/// `−ln p[label]`, with `p` clamped at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &DVector<f64>, label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or(MattError::Index {
        index: label,
        bound: probs.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::lem_distance;
    use crate::sampling::{gaussian_matrix, random_spd, seeded_rng};
    use crate::spd::mat_exp_sym;
    use crate::spd::SymmetricMatrix;
    use proptest::prelude::*;

    fn trial(samples: DMatrix<f64>) -> Trial {
        Trial { samples, label: 0 }
    }

    #[test]
    fn unit_kernel_identity_weights_pass_through() {
        let mut rng = seeded_rng(1);
        let x = gaussian_matrix(3, 10, 1.0, &mut rng);
        let spec = ConvSpec {
            spatial_filters: 3,
            temporal_filters: 3,
            temporal_kernel: 1,
            stride: 1,
        };
        let w = ConvWeights {
            spatial: DMatrix::identity(3, 3),
            temporal: DMatrix::identity(3, 3),
        };
        let fm = feature_extract(&trial(x.clone()), &spec, &w).unwrap();
        assert_eq!(fm.values, x);
    }

    #[test]
    fn constant_input_ones_kernel() {
        let spec = ConvSpec {
            spatial_filters: 1,
            temporal_filters: 1,
            temporal_kernel: 4,
            stride: 1,
        };
        let w = ConvWeights {
            spatial: DMatrix::from_element(1, 1, 1.0),
            temporal: DMatrix::from_element(1, 4, 1.0),
        };
        let fm = feature_extract(&trial(DMatrix::from_element(1, 9, 1.0)), &spec, &w).unwrap();
        assert_eq!(fm.timepoints(), 6);
        assert!(fm.values.iter().all(|v| *v == 4.0));
    }

    #[test]
    fn kernel_longer_than_signal() {
        let spec = ConvSpec {
            spatial_filters: 1,
            temporal_filters: 1,
            temporal_kernel: 12,
            stride: 1,
        };
        let w = ConvWeights {
            spatial: DMatrix::from_element(1, 1, 1.0),
            temporal: DMatrix::from_element(1, 12, 1.0),
        };
        let r = feature_extract(&trial(DMatrix::zeros(1, 5)), &spec, &w);
        assert!(matches!(r, Err(MattError::Shape(_))));
    }

    #[test]
    fn strided_convolution_matches_direct_sum() {
        let mut rng = seeded_rng(2);
        let x = gaussian_matrix(3, 20, 1.0, &mut rng);
        let spec = ConvSpec {
            spatial_filters: 2,
            temporal_filters: 4,
            temporal_kernel: 5,
            stride: 3,
        };
        let w = ConvWeights {
            spatial: gaussian_matrix(2, 3, 1.0, &mut rng),
            temporal: gaussian_matrix(4, 10, 1.0, &mut rng),
        };
        let fm = feature_extract(&trial(x.clone()), &spec, &w).unwrap();
        assert_eq!(fm.timepoints(), (20 - 5) / 3 + 1);
        for o in 0..4 {
            for s in 0..fm.timepoints() {
                let mut acc = 0.0;
                for f in 0..2 {
                    for tau in 0..5 {
                        let sp: f64 = (0..3).map(|c| w.spatial[(f, c)] * x[(c, s * 3 + tau)]).sum();
                        acc += w.temporal[(o, f * 5 + tau)] * sp;
                    }
                }
                assert!((acc - fm.values[(o, s)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ssvep_settings() {
        let s = ConvSpec::ssvep(8);
        assert_eq!(s.temporal_kernel, 125);
        assert_eq!(s.temporal_filters, 100);
        let mi = ConvSpec::mi(22);
        assert_eq!((mi.spatial_filters, mi.temporal_filters, mi.temporal_kernel), (22, 20, 12));
    }

    #[test]
    fn epoch_split_arithmetic() {
        assert_eq!(epoch_len(15, 3).unwrap(), 5);
        assert_eq!(epoch_len(17, 3).unwrap(), 5);
        assert!(matches!(epoch_len(5, 3), Err(MattError::Shape(_))));
        assert_eq!(DEFAULT_EPS, 1e-5);
    }

    #[test]
    fn e2r_uses_contiguous_epochs() {
        let mut rng = seeded_rng(3);
        let values = gaussian_matrix(4, 17, 1.0, &mut rng);
        let fm = FeatureMap::new(values.clone()).unwrap();
        let seq = e2r(&fm, 3, DEFAULT_EPS).unwrap();
        assert_eq!(seq.len(), 3);
        for (i, p) in seq.epochs().iter().enumerate() {
            let block = values.columns(i * 5, 5);
            let mean = block.column_mean();
            let mut cov = DMatrix::zeros(4, 4);
            for s in 0..5 {
                let d = block.column(s) - &mean;
                cov += &d * d.transpose();
            }
            cov /= 4.0;
            let expected = &cov / cov.trace() + DMatrix::identity(4, 4) * DEFAULT_EPS;
            assert!((p.matrix() - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_map_gives_eps_identity() {
        let fm = FeatureMap::new(DMatrix::from_element(3, 12, 2.5)).unwrap();
        let seq = e2r(&fm, 3, 1e-5).unwrap();
        for p in seq.epochs() {
            assert!((p.matrix() - DMatrix::identity(3, 3) * 1e-5).norm() < 1e-18);
        }
    }

    #[test]
    fn bimap_examples() {
        let mut rng = seeded_rng(4);
        let x = random_spd(4, 1.0, &mut rng);
        let id = StiefelParam::truncated_identity(4, 4).unwrap();
        assert!((bimap(&x, &id).unwrap().matrix() - x.matrix()).norm() < 1e-14);
        let e1 = StiefelParam::truncated_identity(1, 4).unwrap();
        let sel = bimap(&x, &e1).unwrap();
        assert_eq!(sel.dim(), 1);
        assert!((sel.matrix()[(0, 0)] - x.matrix()[(0, 0)]).abs() < 1e-15);
        let w = StiefelParam::random(2, 4, &mut rng).unwrap();
        let y = bimap(&x, &w).unwrap();
        assert!(eigh(y.matrix()).unwrap().values.min() > 0.0);
        let wrong = StiefelParam::truncated_identity(2, 3).unwrap();
        assert!(matches!(bimap(&x, &wrong), Err(MattError::Shape(_))));
    }

    #[test]
    fn reeig_examples() {
        let mut rng = seeded_rng(5);
        let p = random_spd(5, 1.0, &mut rng);
        assert!((reeig(&p, 1e-4).unwrap().matrix() - p.matrix()).norm() < 1e-12);
        let d = SpdMatrix::from_diagonal(&[1e-6, 1.0]).unwrap();
        let out = reeig(&d, 1e-4).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-4, 1.0]));
        assert!((out.matrix() - want).norm() < 1e-15);
        for _ in 0..10 {
            let q = random_spd(6, 12.0, &mut rng);
            let out = reeig(&q, 1e-2).unwrap();
            assert!(eigh(out.matrix()).unwrap().values.min() >= 1e-2 * (1.0 - 1e-9));
        }
    }

    #[test]
    fn r2e_examples() {
        let z = r2e(&SpdMatrix::identity(3)).unwrap();
        assert_eq!(z.len(), 6);
        assert!(z.norm() < 1e-15);
        let e = std::f64::consts::E;
        let v = r2e(&SpdMatrix::from_diagonal(&[e, e * e]).unwrap()).unwrap();
        assert!((v - DVector::from_vec(vec![1.0, 0.0, 2.0])).norm() < 1e-14);
    }

    #[test]
    fn r2e_is_lem_isometry_and_invertible() {
        let mut rng = seeded_rng(6);
        for _ in 0..20 {
            let a = random_spd(5, 2.0, &mut rng);
            let b = random_spd(5, 2.0, &mut rng);
            let dv = (r2e(&a).unwrap() - r2e(&b).unwrap()).norm();
            assert!((dv - lem_distance(&a, &b).unwrap()).abs() < 1e-9);
            let back = mat_exp_sym(&SymmetricMatrix::new(unflatten_upper(&r2e(&a).unwrap(), 5).unwrap()).unwrap())
                .unwrap();
            assert!((back.matrix() - a.matrix()).norm() < 1e-8);
        }
    }

    #[test]
    fn head_examples() {
        let vs = vec![DVector::from_vec(vec![1.0, 2.0, 3.0]), DVector::from_vec(vec![-1.0, 0.5, 0.0])];
        let p = classify_head(&vs, &FcWeights::zeros(4, 6)).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let same = softmax(&DVector::from_element(3, 7.5));
        assert!(same.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!(matches!(
            classify_head(&vs, &FcWeights::zeros(4, 5)),
            Err(MattError::Shape(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&DVector::from_vec(vec![0.0, 1.0]), 1).unwrap(), 0.0);
        let u = cross_entropy(&DVector::from_element(4, 0.25), 2).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-15);
        let clamped = cross_entropy(&DVector::from_vec(vec![1.0, 0.0]), 1).unwrap();
        assert!((clamped - 27.631021115928547).abs() < 1e-9);
        assert!(matches!(
            cross_entropy(&DVector::from_vec(vec![1.0, 0.0]), 2),
            Err(MattError::Index { index: 2, bound: 2 })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn feature_extract_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = seeded_rng(seed);
            let spec = ConvSpec { spatial_filters: 3, temporal_filters: 5, temporal_kernel: 4, stride: 2 };
            let w = ConvWeights {
                spatial: gaussian_matrix(3, 4, 1.0, &mut rng),
                temporal: gaussian_matrix(5, 12, 1.0, &mut rng),
            };
            let x = gaussian_matrix(4, 21, 1.0, &mut rng);
            let y = gaussian_matrix(4, 21, 1.0, &mut rng);
            let lhs = feature_extract(&trial(&x * a + &y * b), &spec, &w).unwrap().values;
            let rhs = feature_extract(&trial(x), &spec, &w).unwrap().values * a
                + feature_extract(&trial(y), &spec, &w).unwrap().values * b;
            prop_assert!((lhs - rhs).amax() < 1e-10);
        }

        #[test]
        fn softmax_shift_invariance(v in proptest::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0) {
            let x = DVector::from_vec(v);
            let shifted = x.add_scalar(c);
            prop_assert!((softmax(&x) - softmax(&shifted)).amax() < 1e-12);
            prop_assert!((softmax(&x).sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn e2r_outputs_are_spd_and_counted(seed in any::<u64>(), t in 8usize..40, m in 1usize..4) {
            prop_assume!(t / m >= 2);
            let mut rng = seeded_rng(seed);
            let fm = FeatureMap::new(gaussian_matrix(5, t, 1.0, &mut rng)).unwrap();
            let seq = e2r(&fm, m, DEFAULT_EPS).unwrap();
            prop_assert_eq!(seq.len(), m);
            for p in seq.epochs() {
                prop_assert!(p.verify().is_ok());
            }
        }
    }
}
