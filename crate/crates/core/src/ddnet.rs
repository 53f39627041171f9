//! RouteNet and the routed DDNet detector.
//!
//! RouteNet sees `[σ̄²·1_{N_t}; vec(HᵀH)‾; N̄_r·1_{N_t}]` (bars denote min-max
//! normalization) and picks one branch per sample: 0 = IDetNet, 1 = OAMPNet.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::Sample;
use crate::detectors::{bit_errors, quantize, Detection, DetectorError, DetectorHandle};
use crate::flops::{self, ROUTE_HIDDEN};
use crate::idetnet::{self, IDetNetConfig, IDetNetError, IDetNetParams};
use crate::numerics::{softmax_cols, NumericsError, ParamSet, Rng, Tape, Tensor, Var};
use crate::oampnet::{self, OampNetConfig, OampNetError, OampNetParams};

pub const LOG_FLOOR: f64 = 1e-12;
pub const DEFAULT_XI: f64 = 0.5;
pub const INIT_WEIGHT_STD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DdNetError {
    #[error("route dataset has no samples labelled {0}; generate more data")]
    EmptyClass(u8),
    #[error("cannot fit normalization statistics on an empty dataset")]
    EmptyStats,
    #[error("input width {got} does not match RouteNet width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    IDetNet(#[from] IDetNetError),
    #[error(transparent)]
    OampNet(#[from] OampNetError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl From<DdNetError> for DetectorError {
    fn from(e: DdNetError) -> Self {
        match e {
            DdNetError::IDetNet(e) => e.into(),
            DdNetError::OampNet(e) => e.into(),
            DdNetError::Numerics(n) => DetectorError::Numerics(n),
            other => DetectorError::Other(other.to_string()),
        }
    }
}

pub fn input_width(n_t: usize) -> usize {
    4 * n_t * n_t + 2 * n_t
}

/// Raw routing features of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteFeatures {
    pub sigma2: f64,
    /// `vec(HᵀH)`, row-major, length `4N_t²`.
    pub gram: Vec<f64>,
    pub n_r: usize,
}

impl RouteFeatures {
    pub fn from_sample(s: &Sample) -> Self {
        Self { sigma2: s.sigma2, gram: s.gram().into_data(), n_r: s.h.rows() / 2 }
    }
}

/// Elementwise min/max of each routing feature block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub sigma2: (f64, f64),
    pub gram_min: Vec<f64>,
    pub gram_max: Vec<f64>,
    pub n_r: (f64, f64),
    pub dataset_id: String,
}

impl NormStats {
    pub fn fit<'a>(
        features: impl IntoIterator<Item = &'a RouteFeatures>,
        dataset_id: impl Into<String>,
    ) -> Result<Self, DdNetError> {
        let mut it = features.into_iter();
        let first = it.next().ok_or(DdNetError::EmptyStats)?;
        let mut st = Self {
            sigma2: (first.sigma2, first.sigma2),
            gram_min: first.gram.clone(),
            gram_max: first.gram.clone(),
            n_r: (first.n_r as f64, first.n_r as f64),
            dataset_id: dataset_id.into(),
        };
        for f in it {
            assert_eq!(f.gram.len(), st.gram_min.len(), "shape mismatch: mixed N_t in route features");
            st.sigma2 = (st.sigma2.0.min(f.sigma2), st.sigma2.1.max(f.sigma2));
            let nr = f.n_r as f64;
            st.n_r = (st.n_r.0.min(nr), st.n_r.1.max(nr));
            for ((lo, hi), &v) in st.gram_min.iter_mut().zip(st.gram_max.iter_mut()).zip(&f.gram) {
                *lo = lo.min(v);
                *hi = hi.max(v);
            }
        }
        Ok(st)
    }

    pub fn n_t(&self) -> usize {
        ((self.gram_min.len() as f64).sqrt() as usize) / 2
    }
}

/// `(s − min)/(max − min)`; 0 when the range is degenerate; no clipping.
pub fn normalize(s: f64, min: f64, max: f64) -> f64 {
    if max > min {
        (s - min) / (max - min)
    } else {
        0.0
    }
}

pub fn build_route_input(features: &RouteFeatures, stats: &NormStats) -> Vec<f64> {
    let n_t = stats.n_t();
    assert_eq!(features.gram.len(), 4 * n_t * n_t, "shape mismatch: features vs stats");
    let s = normalize(features.sigma2, stats.sigma2.0, stats.sigma2.1);
    let r = normalize(features.n_r as f64, stats.n_r.0, stats.n_r.1);
    let mut out = Vec::with_capacity(input_width(n_t));
    out.extend(std::iter::repeat_n(s, n_t));
    out.extend(
        features
            .gram
            .iter()
            .zip(stats.gram_min.iter().zip(&stats.gram_max))
            .map(|(&v, (&lo, &hi))| normalize(v, lo, hi)),
    );
    out.extend(std::iter::repeat_n(r, n_t));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteNetParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ParamSet for RouteNetParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl RouteNetParams {
    pub fn input_width(&self) -> usize {
        self.w1.cols()
    }

    pub fn from_tensors(mut t: Vec<Tensor>) -> Self {
        assert_eq!(t.len(), 4, "RouteNet has four tensors");
        let b2 = t.pop().unwrap();
        let w2 = t.pop().unwrap();
        let b1 = t.pop().unwrap();
        let w1 = t.pop().unwrap();
        Self { w1, b1, w2, b2 }
    }
}

pub fn init_routenet(n_t: usize, rng: &mut Rng) -> RouteNetParams {
    let mut dense = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| rng.gaussian(0.0, INIT_WEIGHT_STD)).collect();
        Tensor::new(rows, cols, data)
    };
    let w1 = dense(ROUTE_HIDDEN, input_width(n_t));
    let w2 = dense(2, ROUTE_HIDDEN);
    RouteNetParams { w1, b1: Tensor::zeros(ROUTE_HIDDEN, 1), w2, b2: Tensor::zeros(2, 1) }
}

/// Logits for each column of `inputs`.
pub fn routenet_logits(inputs: &Tensor, params: &RouteNetParams) -> Tensor {
    let tape = Tape::new();
    let [w1, b1, w2, b2] = bind(&tape, params, false);
    logits_on_tape(tape.constant(inputs.clone()), w1, b1, w2, b2).value()
}

/// Index of the larger logit; ties go to IDetNet.
pub fn route_pred(logits: [f64; 2]) -> u8 {
    u8::from(logits[1] > logits[0])
}

/// `(r_Soft, r_Pred)` for one input vector.
pub fn routenet_forward(input: &[f64], params: &RouteNetParams) -> Result<([f64; 2], u8), DdNetError> {
    if input.len() != params.input_width() {
        return Err(DdNetError::WidthMismatch { expected: params.input_width(), got: input.len() });
    }
    let l = routenet_logits(&Tensor::vector(input.to_vec()), params);
    let logits = [l.get(0, 0), l.get(1, 0)];
    let soft = softmax_cols(&l);
    Ok(([soft.get(0, 0), soft.get(1, 0)], route_pred(logits)))
}

/// 0 (IDetNet) when it makes no more errors than OAMPNet.
pub fn route_label(be_id: usize, be_oa: usize) -> u8 {
    u8::from(be_id > be_oa)
}

/// 0 iff `be_1 − be_2 ≤ ε`.
pub fn route_label_eps(be_1: usize, be_2: usize, eps: f64) -> u8 {
    u8::from(be_1 as f64 - be_2 as f64 > eps)
}

pub fn one_hot(label: u8) -> [f64; 2] {
    if label == 0 {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSample {
    pub features: RouteFeatures,
    pub label: u8,
    pub be_id: usize,
    pub be_oa: usize,
}

/// Runs both branches once per sample and labels by bit errors.
pub fn build_route_dataset(
    samples: &[Sample],
    id: (&IDetNetParams, &IDetNetConfig),
    oa: (&OampNetParams, &OampNetConfig),
) -> Result<Vec<RouteSample>, DdNetError> {
    let id_est = idetnet::detect_batch(id.0, id.1, samples)?;
    samples
        .par_iter()
        .zip(id_est.par_iter())
        .map(|(s, xi)| {
            let xo = oampnet::oampnet_forward(&s.h, &s.y, s.sigma2, oa.0, oa.1)?;
            let be_id = bit_errors(&quantize(xi), &s.x);
            let be_oa = bit_errors(&quantize(xo.last().expect("k_oa >= 1")), &s.x);
            Ok(RouteSample { features: RouteFeatures::from_sample(s), label: route_label(be_id, be_oa), be_id, be_oa })
        })
        .collect()
}

pub fn class_counts(set: &[RouteSample]) -> [usize; 2] {
    let ones = set.iter().filter(|r| r.label == 1).count();
    [set.len() - ones, ones]
}

/// Drops random majority-class samples until both classes are equally large.
/// Order of the retained samples is preserved.
pub fn balance_route_dataset(set: Vec<RouteSample>, rng: &mut Rng) -> Result<Vec<RouteSample>, DdNetError> {
    let counts = class_counts(&set);
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(DdNetError::EmptyClass(c as u8));
        }
    }
    if counts[0] == counts[1] {
        return Ok(set);
    }
    let major = u8::from(counts[1] > counts[0]);
    let major_idx: Vec<usize> = set.iter().enumerate().filter(|(_, r)| r.label == major).map(|(i, _)| i).collect();
    let keep_n = counts[0].min(counts[1]);
    let mut keep = vec![false; set.len()];
    for j in rng.choose_without_replacement(major_idx.len(), keep_n) {
        keep[major_idx[j]] = true;
    }
    Ok(set
        .into_iter()
        .zip(keep)
        .filter(|(r, k)| r.label != major || *k)
        .map(|(r, _)| r)
        .collect())
}

/// Normalized inputs and label/error columns for a set of route samples.
#[derive(Debug, Clone)]
pub struct RouteBatch {
    pub inputs: Tensor,
    pub labels: Tensor,
    /// Row 0: IDetNet bit errors; row 1: OAMPNet bit errors.
    pub errors: Tensor,
    pub min_errors: f64,
}

impl RouteBatch {
    pub fn new(set: &[RouteSample], stats: &NormStats) -> Self {
        assert!(!set.is_empty(), "empty route batch");
        let inputs: Vec<Vec<f64>> = set.iter().map(|r| build_route_input(&r.features, stats)).collect();
        let cols: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let labels: Vec<[f64; 2]> = set.iter().map(|r| one_hot(r.label)).collect();
        let errs: Vec<[f64; 2]> = set.iter().map(|r| [r.be_id as f64, r.be_oa as f64]).collect();
        Self {
            inputs: Tensor::from_columns(&cols),
            labels: Tensor::from_columns(&labels.iter().map(|l| &l[..]).collect::<Vec<_>>()),
            errors: Tensor::from_columns(&errs.iter().map(|l| &l[..]).collect::<Vec<_>>()),
            min_errors: set.iter().map(|r| r.be_id.min(r.be_oa) as f64).sum(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean over samples of `CE(r_Lab, r_Soft) + ξ·(r_Soft·be − min(be_id, be_oa))`.
pub fn routenet_loss(soft: &[[f64; 2]], labels: &[u8], be: &[(usize, usize)], xi: f64) -> f64 {
    assert!(xi >= 0.0, "ξ must be nonnegative");
    assert!(soft.len() == labels.len() && soft.len() == be.len(), "shape mismatch: loss inputs");
    let total: f64 = soft
        .iter()
        .zip(labels)
        .zip(be)
        .map(|((p, &l), &(bi, bo))| {
            let t = one_hot(l);
            let ce = -(t[0] * p[0].max(LOG_FLOOR).ln() + t[1] * p[1].max(LOG_FLOOR).ln());
            let pen = p[0] * bi as f64 + p[1] * bo as f64 - bi.min(bo) as f64;
            ce + xi * pen
        })
        .sum();
    total / soft.len() as f64
}

fn bind<'t>(tape: &'t Tape, params: &RouteNetParams, train: bool) -> [Var<'t>; 4] {
    let v = |t: &Tensor| if train { tape.param(t.clone()) } else { tape.constant(t.clone()) };
    [v(&params.w1), v(&params.b1), v(&params.w2), v(&params.b2)]
}

fn logits_on_tape<'t>(x: Var<'t>, w1: Var<'t>, b1: Var<'t>, w2: Var<'t>, b2: Var<'t>) -> Var<'t> {
    w2.matmul(w1.matmul(x).add_bias(b1).sigmoid()).add_bias(b2)
}

/// Surrogate routing loss and its gradients.
pub fn loss_and_grad(params: &RouteNetParams, batch: &RouteBatch, xi: f64) -> Result<(f64, Vec<Tensor>), DdNetError> {
    if batch.inputs.rows() != params.input_width() {
        return Err(DdNetError::WidthMismatch { expected: params.input_width(), got: batch.inputs.rows() });
    }
    let tape = Tape::new();
    let vars = bind(&tape, params, true);
    let [w1, b1, w2, b2] = vars;
    let soft = logits_on_tape(tape.constant(batch.inputs.clone()), w1, b1, w2, b2).softmax_cols();
    let ce = -(tape.constant(batch.labels.clone()) * soft.log_floor(LOG_FLOOR)).sum();
    let pen = (soft * tape.constant(batch.errors.clone())).sum().offset(-batch.min_errors);
    let loss = (ce + pen.scale(xi)).scale(1.0 / batch.len() as f64);
    let value = loss.item();
    if !value.is_finite() {
        return Err(NumericsError::NonFinite("RouteNet loss").into());
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads.wrt_all(&vars)))
}

/// Fraction of samples whose predicted route equals the label.
pub fn route_accuracy(params: &RouteNetParams, stats: &NormStats, set: &[RouteSample]) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let batch = RouteBatch::new(set, stats);
    let logits = routenet_logits(&batch.inputs, params);
    let hits = set
        .iter()
        .enumerate()
        .filter(|(j, r)| route_pred([logits.get(0, *j), logits.get(1, *j)]) == r.label)
        .count();
    hits as f64 / set.len() as f64
}

/// Everything needed to run the routed detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdNetModel {
    pub idetnet_config: IDetNetConfig,
    pub idetnet: IDetNetParams,
    pub oampnet_config: OampNetConfig,
    pub oampnet: OampNetParams,
    pub routenet: RouteNetParams,
    pub stats: NormStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdNetOutput {
    pub estimate: Vec<f64>,
    pub branch: u8,
}

/// Routes, then runs only the selected branch. `force` overrides RouteNet.
pub fn ddnet_detect(sample: &Sample, model: &DdNetModel, force: Option<u8>) -> Result<DdNetOutput, DdNetError> {
    let branch = match force {
        Some(b) => b.min(1),
        None => {
            let input = build_route_input(&RouteFeatures::from_sample(sample), &model.stats);
            routenet_forward(&input, &model.routenet)?.1
        }
    };
    let soft = if branch == 0 {
        idetnet::idetnet_forward(&sample.h, &sample.y, &model.idetnet, &model.idetnet_config)?
    } else {
        oampnet::oampnet_forward(&sample.h, &sample.y, sample.sigma2, &model.oampnet, &model.oampnet_config)?
    };
    Ok(DdNetOutput { estimate: quantize(soft.last().expect("at least one layer")), branch })
}

pub fn detector(name: &str, model: DdNetModel) -> DetectorHandle {
    let model = Arc::new(model);
    DetectorHandle::new(name, move |s| {
        let out = ddnet_detect(s, &model, None)?;
        Ok(Detection {
            flops: flops::ddnet(&model.idetnet_config, &model.oampnet_config, s.n_r, out.branch),
            estimate: out.estimate,
            branch: Some(out.branch),
        })
    })
}
