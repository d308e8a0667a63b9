//! The MAtt decoder: conv front end → covariance epochs → manifold attention
//! → ReEig → LogEig flatten → FC/softmax, recorded on a tape so that every
//! parameter (and optionally the input) receives an exact gradient.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::attention::{attention_forward, AttentionMatrix};
use crate::autodiff::{NodeId, SpectralFn, StiefelParam, Tape, UnaryFn};
use crate::data::Trial;
use crate::error::{MattError, Result, StageContext};
use crate::layers::{
    classify_head, e2r, epoch_len, feature_extract, r2e, reeig, ConvSpec, ConvWeights, FcWeights, DEFAULT_EPS,
    DEFAULT_EPS_RE,
};
use crate::sampling::{gaussian_matrix, seeded_rng};
use crate::spd::DEGENERATE_TRACE;

pub const CONV_SPATIAL: &str = "conv.spatial";
pub const CONV_TEMPORAL: &str = "conv.temporal";
pub const FC_WEIGHT: &str = "fc.weight";
pub const FC_BIAS: &str = "fc.bias";
pub const ATT_Q: &str = "att.wq";
pub const ATT_K: &str = "att.wk";
pub const ATT_V: &str = "att.wv";
pub const ATTENTION_PARAMS: [&str; 3] = [ATT_Q, ATT_K, ATT_V];

/// Which blocks sit between the feature extractor and the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Epoch covariances, manifold attention, ReEig, LogEig.
    Full,
    /// One covariance of the whole feature map, LogEig, FC.
    FeOnly,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FeOnly => "fe-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "fe-only" => Ok(Variant::FeOnly),
            _ => Err(MattError::Config(format!("unknown model variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MattConfig {
    pub channels: usize,
    pub timepoints: usize,
    pub classes: usize,
    pub conv: ConvSpec,
    pub d_u: usize,
    pub m: usize,
    pub eps: f64,
    pub eps_re: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl MattConfig {
    /// Motor-imagery style defaults for the given input shape.
    pub fn new(channels: usize, timepoints: usize, classes: usize) -> Self {
        let conv = ConvSpec::mi(channels);
        Self {
            channels,
            timepoints,
            classes,
            conv,
            d_u: conv.temporal_filters.saturating_sub(4).max(1),
            m: 3,
            eps: DEFAULT_EPS,
            eps_re: DEFAULT_EPS_RE,
            seed: 0,
            variant: Variant::Full,
        }
    }

    /// A small network for gradient checks: C=4, T=64, d_c=6, d_u=4, m=3.
    pub fn miniature() -> Self {
        Self {
            conv: ConvSpec {
                spatial_filters: 4,
                temporal_filters: 6,
                temporal_kernel: 8,
                stride: 1,
            },
            d_u: 4,
            ..Self::new(4, 64, 2)
        }
    }

    pub fn d_c(&self) -> usize {
        self.conv.temporal_filters
    }

    pub fn feature_timepoints(&self) -> Result<usize> {
        self.conv.output_len(self.timepoints)
    }

    /// Epochs actually cut from the feature map.
    pub fn epochs(&self) -> usize {
        match self.variant {
            Variant::Full => self.m,
            Variant::FeOnly => 1,
        }
    }

    /// Length of the vector entering the FC layer.
    pub fn head_inputs(&self) -> usize {
        match self.variant {
            Variant::Full => self.m * self.d_u * (self.d_u + 1) / 2,
            Variant::FeOnly => self.d_c() * (self.d_c() + 1) / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(MattError::Config("need at least one channel".into()));
        }
        if self.classes < 2 {
            return Err(MattError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.m == 0 {
            return Err(MattError::Config("epoch count m must be positive".into()));
        }
        if self.d_u == 0 || self.d_u >= self.d_c() {
            return Err(MattError::Config(format!(
                "attention dimension d_u={} must satisfy 0 < d_u < d_c={}",
                self.d_u,
                self.d_c()
            )));
        }
        if !(self.eps > 0.0) || !(self.eps_re > 0.0) {
            return Err(MattError::Config("eps and eps_re must be positive".into()));
        }
        let t_out = self.feature_timepoints()?;
        epoch_len(t_out, self.epochs())?;
        Ok(())
    }

    /// Canonical key-sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut fields: BTreeMap<&str, String> = BTreeMap::new();
        fields.insert("channels", self.channels.to_string());
        fields.insert("classes", self.classes.to_string());
        fields.insert("conv.spatial_filters", self.conv.spatial_filters.to_string());
        fields.insert("conv.stride", self.conv.stride.to_string());
        fields.insert("conv.temporal_filters", self.conv.temporal_filters.to_string());
        fields.insert("conv.temporal_kernel", self.conv.temporal_kernel.to_string());
        fields.insert("d_u", self.d_u.to_string());
        fields.insert("eps", format!("{:?}", self.eps));
        fields.insert("eps_re", format!("{:?}", self.eps_re));
        fields.insert("m", self.m.to_string());
        fields.insert("seed", self.seed.to_string());
        fields.insert("timepoints", self.timepoints.to_string());
        fields.insert("variant", self.variant.as_str().to_string());
        fields.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MattError::Format(format!("malformed config line {line:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| MattError::Format(format!("config is missing {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| MattError::Format(format!("config field {k} has bad value {v:?}")))
        }
        let cfg = Self {
            channels: num("channels", get("channels")?)?,
            timepoints: num("timepoints", get("timepoints")?)?,
            classes: num("classes", get("classes")?)?,
            conv: ConvSpec {
                spatial_filters: num("conv.spatial_filters", get("conv.spatial_filters")?)?,
                temporal_filters: num("conv.temporal_filters", get("conv.temporal_filters")?)?,
                temporal_kernel: num("conv.temporal_kernel", get("conv.temporal_kernel")?)?,
                stride: num("conv.stride", get("conv.stride")?)?,
            },
            d_u: num("d_u", get("d_u")?)?,
            m: num("m", get("m")?)?,
            eps: num("eps", get("eps")?)?,
            eps_re: num("eps_re", get("eps_re")?)?,
            seed: num("seed", get("seed")?)?,
            variant: Variant::parse(get("variant")?)?,
        };
        if fields.len() != 13 {
            return Err(MattError::Format("config has unknown fields".into()));
        }
        Ok(cfg)
    }
}

/// Plain matrices for every trainable tensor, keyed by name.
pub type ParamValues = BTreeMap<String, DMatrix<f64>>;
pub type GradMap = BTreeMap<String, DMatrix<f64>>;

/// Trainable parameters, split by the manifold they live on.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRegistry {
    pub euclidean: BTreeMap<String, DMatrix<f64>>,
    pub stiefel: BTreeMap<String, StiefelParam>,
}

impl ParamRegistry {
    /// Expected `(name, shape, is_stiefel)` for a configuration.
    pub fn layout(cfg: &MattConfig) -> Vec<(&'static str, (usize, usize), bool)> {
        let f1 = cfg.conv.spatial_filters;
        let mut out = vec![
            (CONV_SPATIAL, (f1, cfg.channels), false),
            (CONV_TEMPORAL, (cfg.d_c(), f1 * cfg.conv.temporal_kernel), false),
            (FC_WEIGHT, (cfg.classes, cfg.head_inputs()), false),
            (FC_BIAS, (cfg.classes, 1), false),
        ];
        if cfg.variant == Variant::Full {
            for name in ATTENTION_PARAMS {
                out.push((name, (cfg.d_u, cfg.d_c()), true));
            }
        }
        out
    }

    /// Gaussian `N(0, 1/fan_in)` conv and FC weights, zero FC bias, and
    /// QR-retracted Gaussian attention weights.
    pub fn init(cfg: &MattConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(cfg.seed);
        let mut euclidean = BTreeMap::new();
        let mut stiefel = BTreeMap::new();
        for (name, (r, c), on_stiefel) in Self::layout(cfg) {
            if on_stiefel {
                stiefel.insert(name.to_string(), StiefelParam::random(r, c, &mut rng)?);
            } else if name == FC_BIAS {
                euclidean.insert(name.to_string(), DMatrix::zeros(r, c));
            } else {
                euclidean.insert(name.to_string(), gaussian_matrix(r, c, 1.0 / (c as f64).sqrt(), &mut rng));
            }
        }
        Ok(Self { euclidean, stiefel })
    }

    /// Names and shapes agree with `cfg`; attention weights are orthonormal.
    pub fn check(&self, cfg: &MattConfig) -> Result<()> {
        let layout = Self::layout(cfg);
        if layout.len() != self.euclidean.len() + self.stiefel.len() {
            return Err(MattError::Contract(format!(
                "registry holds {} tensors, configuration needs {}",
                self.euclidean.len() + self.stiefel.len(),
                layout.len()
            )));
        }
        for (name, shape, on_stiefel) in layout {
            let found = if on_stiefel {
                self.stiefel.get(name).map(|w| (w.rows(), w.cols()))
            } else {
                self.euclidean.get(name).map(|m| m.shape())
            };
            match found {
                Some(s) if s == shape => {}
                Some(s) => {
                    return Err(MattError::Contract(format!(
                        "parameter {name} is {}x{}, configuration needs {}x{}",
                        s.0, s.1, shape.0, shape.1
                    )))
                }
                None => return Err(MattError::Contract(format!("parameter {name} is missing"))),
            }
        }
        for (name, w) in &self.stiefel {
            let r = w.residual();
            if !(r < crate::autodiff::stiefel::ORTHONORMALITY_TOL) {
                return Err(MattError::Contract(format!("{name} has orthonormality residual {r:e}")));
            }
        }
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.euclidean.values().map(|m| m.len()).sum::<usize>()
            + self.stiefel.values().map(|w| w.rows() * w.cols()).sum::<usize>()
    }

    pub fn expected_count(cfg: &MattConfig) -> usize {
        let attention = match cfg.variant {
            Variant::Full => 3 * cfg.d_u * cfg.d_c(),
            Variant::FeOnly => 0,
        };
        cfg.conv.param_count(cfg.channels) + attention + cfg.classes * cfg.head_inputs() + cfg.classes
    }

    pub fn values(&self) -> ParamValues {
        let mut out: ParamValues = self.euclidean.clone();
        for (k, w) in &self.stiefel {
            out.insert(k.clone(), w.matrix().clone());
        }
        out
    }

    pub fn conv_weights(&self) -> Result<ConvWeights> {
        Ok(ConvWeights {
            spatial: self.tensor(CONV_SPATIAL)?.clone(),
            temporal: self.tensor(CONV_TEMPORAL)?.clone(),
        })
    }

    pub fn fc_weights(&self) -> Result<FcWeights> {
        let bias = self.tensor(FC_BIAS)?;
        Ok(FcWeights {
            weight: self.tensor(FC_WEIGHT)?.clone(),
            bias: DVector::from_column_slice(bias.as_slice()),
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.euclidean
            .get(name)
            .ok_or_else(|| MattError::Contract(format!("parameter {name} is missing")))
    }

    pub fn stiefel_param(&self, name: &str) -> Result<&StiefelParam> {
        self.stiefel
            .get(name)
            .ok_or_else(|| MattError::Contract(format!("parameter {name} is missing")))
    }
}

/// Result of a taped forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub probabilities: DVector<f64>,
    pub logits: DVector<f64>,
    /// `None` for [`Variant::FeOnly`].
    pub attention: Option<AttentionMatrix>,
    pub tape: Tape,
    pub input: NodeId,
    pub params: BTreeMap<String, NodeId>,
    pub logits_node: NodeId,
    pub probs_node: NodeId,
}

fn param_node(tape: &mut Tape, values: &ParamValues, ids: &mut BTreeMap<String, NodeId>, name: &str) -> Result<NodeId> {
    let v = values
        .get(name)
        .ok_or_else(|| MattError::Contract(format!("parameter {name} is missing")))?;
    let id = tape.leaf(v.clone());
    ids.insert(name.to_string(), id);
    Ok(id)
}

/// Regularized covariance of the columns of `block` on the tape.
fn taped_covariance(tape: &mut Tape, block: NodeId, eps: f64) -> Result<NodeId> {
    let len = tape.value(block).ncols();
    let n = tape.value(block).nrows();
    let z = tape.center_rows(block);
    let zt = tape.transpose(z);
    let zz = tape.matmul(z, zt)?;
    let cov = tape.scale(zz, 1.0 / (len - 1) as f64);
    let tr = tape.trace(cov)?;
    if tape.scalar(tr) <= DEGENERATE_TRACE {
        return Ok(tape.constant(DMatrix::identity(n, n) * eps));
    }
    let normalized = tape.div_scalar(cov, tr)?;
    tape.add_identity(normalized, eps)
}

/// Forward pass from raw parameter matrices. Attention weights are used as
/// given, which lets gradient checks perturb them off the manifold.
pub fn forward_values(trial: &Trial, values: &ParamValues, cfg: &MattConfig, input_grad: bool) -> Result<Forward> {
    if trial.samples.shape() != (cfg.channels, cfg.timepoints) {
        return Err(MattError::Shape(format!(
            "trial is {}x{}, model expects {}x{}",
            trial.channels(),
            trial.timepoints(),
            cfg.channels,
            cfg.timepoints
        )));
    }
    let mut tape = Tape::new();
    let mut ids = BTreeMap::new();
    let input = if input_grad {
        tape.leaf(trial.samples.clone())
    } else {
        tape.constant(trial.samples.clone())
    };

    let features = (|| -> Result<NodeId> {
        let sp = param_node(&mut tape, values, &mut ids, CONV_SPATIAL)?;
        let tm = param_node(&mut tape, values, &mut ids, CONV_TEMPORAL)?;
        let s = tape.matmul(sp, input)?;
        let u = tape.unfold(s, cfg.conv.temporal_kernel, cfg.conv.stride)?;
        tape.matmul(tm, u)
    })()
    .stage("feature_extract")?;

    let t_out = tape.value(features).ncols();
    let epochs = cfg.epochs();
    let covs = (|| -> Result<Vec<NodeId>> {
        let len = epoch_len(t_out, epochs)?;
        (0..epochs)
            .map(|i| {
                let block = tape.columns(features, i * len, len)?;
                taped_covariance(&mut tape, block, cfg.eps)
            })
            .collect()
    })()
    .stage("e2r")?;

    let mut attention = None;
    let flats: Vec<NodeId> = match cfg.variant {
        Variant::FeOnly => {
            let log = tape.spectral(covs[0], SpectralFn::Log).stage("r2e")?;
            vec![tape.flatten_triu(log).stage("r2e")?]
        }
        Variant::Full => {
            let (outputs, att) = taped_attention(&mut tape, values, &mut ids, &covs, cfg.d_c()).stage("attention")?;
            attention = Some(att);
            let rect = outputs
                .into_iter()
                .map(|o| tape.spectral(o, SpectralFn::Clamp(cfg.eps_re)))
                .collect::<Result<Vec<_>>>()
                .stage("reeig")?;
            rect.into_iter()
                .map(|r| {
                    let log = tape.spectral(r, SpectralFn::Log)?;
                    tape.flatten_triu(log)
                })
                .collect::<Result<Vec<_>>>()
                .stage("r2e")?
        }
    };

    let (logits_node, probs_node) = (|| -> Result<(NodeId, NodeId)> {
        let fw = param_node(&mut tape, values, &mut ids, FC_WEIGHT)?;
        let fb = param_node(&mut tape, values, &mut ids, FC_BIAS)?;
        let z = tape.vconcat(flats)?;
        let wz = tape.matmul(fw, z)?;
        let logits = tape.add(wz, fb)?;
        Ok((logits, tape.softmax(logits)))
    })()
    .stage("head")?;

    let column = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
    Ok(Forward {
        probabilities: column(tape.value(probs_node)),
        logits: column(tape.value(logits_node)),
        attention,
        tape,
        input,
        params: ids,
        logits_node,
        probs_node,
    })
}

/// Attention block on the tape with batched Q/K/V; returns output nodes and
/// the attention matrix values.
fn taped_attention(
    tape: &mut Tape,
    values: &ParamValues,
    ids: &mut BTreeMap<String, NodeId>,
    xs: &[NodeId],
    d_c: usize,
) -> Result<(Vec<NodeId>, AttentionMatrix)> {
    let m = xs.len();
    let h = tape.hconcat(xs.to_vec())?;
    let mut logs = Vec::with_capacity(3);
    for name in ATTENTION_PARAMS {
        let w = param_node(tape, values, ids, name)?;
        let wt = tape.transpose(w);
        let y = tape.matmul(w, h)?;
        let mut per_epoch = Vec::with_capacity(m);
        for i in 0..m {
            let block = tape.columns(y, i * d_c, d_c)?;
            let proj = tape.matmul(block, wt)?;
            per_epoch.push(tape.spectral(proj, SpectralFn::Log)?);
        }
        logs.push(per_epoch);
    }
    let (lq, lk, lv) = (&logs[0], &logs[1], &logs[2]);

    let mut sims = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let diff = tape.sub(lq[i], lk[j])?;
            let d = tape.frobenius_norm(diff);
            let ld = tape.unary(d, UnaryFn::Ln1p);
            let denom = tape.shift(ld, 1.0);
            sims.push(tape.unary(denom, UnaryFn::Reciprocal));
        }
    }
    let raw = tape.assemble(sims, m, m)?;
    let probs = tape.softmax_rows(raw);

    let mut outputs = Vec::with_capacity(m);
    for i in 0..m {
        let mut acc: Option<NodeId> = None;
        for (l, &log_v) in lv.iter().enumerate() {
            let a = tape.element(probs, i, l)?;
            let term = tape.mul_scalar(log_v, a)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        let mean_log = acc.expect("at least one epoch");
        outputs.push(tape.spectral(mean_log, SpectralFn::Exp)?);
    }
    let att = AttentionMatrix {
        raw: tape.value(raw).clone(),
        probabilities: tape.value(probs).clone(),
    };
    Ok((outputs, att))
}

/// Taped forward pass with constant input.
pub fn forward(trial: &Trial, params: &ParamRegistry, cfg: &MattConfig) -> Result<Forward> {
    forward_values(trial, &params.values(), cfg, false)
}

/// Class probabilities (and attention) computed with the untaped layer
/// functions.
pub fn predict_plain(
    trial: &Trial,
    params: &ParamRegistry,
    cfg: &MattConfig,
) -> Result<(DVector<f64>, Option<AttentionMatrix>)> {
    let fm = feature_extract(trial, &cfg.conv, &params.conv_weights()?).stage("feature_extract")?;
    let seq = e2r(&fm, cfg.epochs(), cfg.eps).stage("e2r")?;
    let fc = params.fc_weights()?;
    match cfg.variant {
        Variant::FeOnly => {
            let z = r2e(&seq.epochs()[0]).stage("r2e")?;
            Ok((classify_head(&[z], &fc).stage("head")?, None))
        }
        Variant::Full => {
            let (out, att) = attention_forward(
                &seq,
                params.stiefel_param(ATT_Q)?,
                params.stiefel_param(ATT_K)?,
                params.stiefel_param(ATT_V)?,
            )
            .stage("attention")?;
            let flats = out
                .epochs()
                .iter()
                .map(|v| reeig(v, cfg.eps_re).stage("reeig").and_then(|r| r2e(&r).stage("r2e")))
                .collect::<Result<Vec<_>>>()?;
            Ok((classify_head(&flats, &fc).stage("head")?, Some(att)))
        }
    }
}

fn trial_loss_and_grads(trial: &Trial, values: &ParamValues, cfg: &MattConfig) -> Result<(f64, GradMap)> {
    if trial.label >= cfg.classes {
        return Err(MattError::Index {
            index: trial.label,
            bound: cfg.classes,
        });
    }
    let mut fwd = forward_values(trial, values, cfg, false)?;
    let loss = fwd.tape.neg_log_pick(fwd.probs_node, trial.label)?;
    let grads = fwd.tape.backward(loss)?;
    let map = fwd
        .params
        .iter()
        .map(|(name, id)| (name.clone(), grads.get_or_zeros(&fwd.tape, *id)))
        .collect();
    Ok((fwd.tape.scalar(loss), map))
}

/// Mean cross-entropy over the batch and its gradient for every tensor in
/// `values`. Trials run in parallel; the reduction is in batch order.
pub fn loss_and_grads_values(batch: &[Trial], values: &ParamValues, cfg: &MattConfig) -> Result<(f64, GradMap)> {
    if batch.is_empty() {
        return Err(MattError::EmptyInput("empty batch".into()));
    }
    let per_trial: Vec<Result<(f64, GradMap)>> =
        batch.par_iter().map(|t| trial_loss_and_grads(t, values, cfg)).collect();
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut sum: GradMap = BTreeMap::new();
    for r in per_trial {
        let (loss, grads) = r?;
        total += loss;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => *acc += g,
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    for g in sum.values_mut() {
        *g /= n;
    }
    Ok((total / n, sum))
}

pub fn loss_and_grads(batch: &[Trial], params: &ParamRegistry, cfg: &MattConfig) -> Result<(f64, GradMap)> {
    loss_and_grads_values(batch, &params.values(), cfg)
}

/// Mean cross-entropy without gradients.
pub fn mean_loss(trials: &[Trial], params: &ParamRegistry, cfg: &MattConfig) -> Result<f64> {
    if trials.is_empty() {
        return Err(MattError::EmptyInput("no trials to score".into()));
    }
    let values = params.values();
    let losses: Vec<Result<f64>> = trials
        .par_iter()
        .map(|t| {
            if t.label >= cfg.classes {
                return Err(MattError::Index {
                    index: t.label,
                    bound: cfg.classes,
                });
            }
            let fwd = forward_values(t, &values, cfg, false)?;
            crate::layers::cross_entropy(&fwd.probabilities, t.label)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / trials.len() as f64)
}

/// Gradient of the `class` logit with respect to the raw input, `C × T`.
pub fn saliency_values(trial: &Trial, values: &ParamValues, cfg: &MattConfig, class: usize) -> Result<DMatrix<f64>> {
    if class >= cfg.classes {
        return Err(MattError::Index {
            index: class,
            bound: cfg.classes,
        });
    }
    let mut fwd = forward_values(trial, values, cfg, true)?;
    let target = fwd.tape.element(fwd.logits_node, class, 0)?;
    let grads = fwd.tape.backward(target)?;
    Ok(grads.get_or_zeros(&fwd.tape, fwd.input))
}

pub fn saliency(trial: &Trial, params: &ParamRegistry, cfg: &MattConfig, class: usize) -> Result<DMatrix<f64>> {
    saliency_values(trial, &params.values(), cfg, class)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MATTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Configuration plus trained parameters.
///
/// Layout (little-endian): magic, `u32` version, `u32` config length and the
/// key-sorted config text, `u32` tensor count, then per tensor a `u32` name
/// length, the name, a kind byte (0 Euclidean, 1 Stiefel), `u32` rows,
/// `u32` cols and row-major `f64` data. Tensors appear in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: MattConfig,
    pub params: ParamRegistry,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or(MattError::Length {
            expected: self.pos + n,
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| MattError::Format("non-UTF-8 text in checkpoint".into()))
    }
}

impl Checkpoint {
    pub fn new(config: MattConfig, params: ParamRegistry) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let mut tensors: Vec<(&String, &DMatrix<f64>, u8)> =
            self.params.euclidean.iter().map(|(k, v)| (k, v, 0u8)).collect();
        tensors.extend(self.params.stiefel.iter().map(|(k, w)| (k, w.matrix(), 1u8)));
        tensors.sort_by(|a, b| a.0.cmp(b.0));
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, m, kind) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(kind);
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.extend_from_slice(&m[(r, c)].to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(MattError::Format("bad magic: not a MAtt checkpoint".into()));
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(MattError::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config = MattConfig::from_text(rd.str()?)?;
        let count = rd.u32()?;
        let mut euclidean = BTreeMap::new();
        let mut stiefel = BTreeMap::new();
        for _ in 0..count {
            let name = rd.str()?.to_string();
            let kind = rd.take(1)?[0];
            let rows = rd.u32()? as usize;
            let cols = rd.u32()? as usize;
            let data = rd.take(rows * cols * 8)?;
            let m = DMatrix::from_row_iterator(
                rows,
                cols,
                data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))),
            );
            if !m.iter().all(|x| x.is_finite()) {
                return Err(MattError::Content(format!("tensor {name} has non-finite entries")));
            }
            let dup = match kind {
                0 => euclidean.insert(name.clone(), m).is_some(),
                1 => stiefel.insert(name.clone(), StiefelParam::new(m)?).is_some(),
                k => return Err(MattError::Format(format!("tensor {name} has unknown kind {k}"))),
            };
            if dup {
                return Err(MattError::Format(format!("tensor {name} appears twice")));
            }
        }
        if rd.pos != bytes.len() {
            return Err(MattError::Length {
                expected: rd.pos,
                actual: bytes.len(),
            });
        }
        Checkpoint::new(config, ParamRegistry { euclidean, stiefel })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
