//! Improved DetNet: an unfolded projected-gradient detector with a trainable
//! linear soft sign and trainable smoothing of both iterates.
//!
//! Layer `k` computes
//!
//! ```text
//! z_k     = ReLU(W1·[v_k; Hᵀy; HᵀH·x̂_k; x̂_k] + b1)
//! v_k+1   = (1 − α1)·(W2·z_k + b2) + α1·v_k
//! x̂_k+1   = (1 − α2)·lss(W3·z_k + b3; β) + α2·x̂_k
//! ```
//!
//! starting from `v_1 = 0`, `x̂_1 = 0`. Samples are processed as columns of a
//! batch; only `HᵀH` and `Hᵀy` enter the network, so batches may mix N_r.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::Sample;
use crate::detectors::{quantize, Detection, DetectorError, DetectorHandle};
use crate::flops;
use crate::numerics::{NumericsError, ParamSet, Rng, Tape, Tensor, Var};

/// Smallest admissible |β| in the soft sign.
pub const BETA_FLOOR: f64 = 1e-8;
pub const INIT_BETA: f64 = 0.7;
pub const INIT_ALPHA: f64 = 0.8;
/// Standard deviation of initial weights and biases (variance 0.01).
pub const INIT_WEIGHT_STD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum IDetNetError {
    #[error("soft-sign sharpness |β| = {0:e} is below {BETA_FLOOR:e}")]
    DegenerateBeta(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl From<IDetNetError> for DetectorError {
    fn from(e: IDetNetError) -> Self {
        match e {
            IDetNetError::Numerics(n) => DetectorError::Numerics(n),
            other => DetectorError::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IDetNetMode {
    #[default]
    Improved,
    /// DetNet-like ablation: β fixed at its initial value and α ≡ 0, both frozen.
    DetNetCompat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IDetNetConfig {
    pub k_id: usize,
    pub h1: usize,
    pub h2: usize,
    pub n_t: usize,
    #[serde(default)]
    pub mode: IDetNetMode,
}

impl Default for IDetNetConfig {
    fn default() -> Self {
        Self { k_id: 40, h1: 64, h2: 32, n_t: 16, mode: IDetNetMode::Improved }
    }
}

impl IDetNetConfig {
    pub fn dim(&self) -> usize {
        2 * self.n_t
    }

    pub fn input_width(&self) -> usize {
        self.h2 + 3 * self.dim()
    }

    /// The DetNet-compat variant of this configuration.
    pub fn detnet_compat(&self) -> Self {
        Self { mode: IDetNetMode::DetNetCompat, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IDetLayer {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    pub beta: Tensor,
    pub alpha1: Tensor,
    pub alpha2: Tensor,
}

const TENSORS_PER_LAYER: usize = 9;
const LAYER_NAMES: [&str; TENSORS_PER_LAYER] = ["w1", "b1", "w2", "b2", "w3", "b3", "beta", "alpha1", "alpha2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IDetNetParams {
    pub layers: Vec<IDetLayer>,
}

impl ParamSet for IDetNetParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.w1, &l.b1, &l.w2, &l.b2, &l.w3, &l.b3, &l.beta, &l.alpha1, &l.alpha2])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    &mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2, &mut l.w3, &mut l.b3, &mut l.beta,
                    &mut l.alpha1, &mut l.alpha2,
                ]
            })
            .collect()
    }
}

impl IDetNetParams {
    /// Tensor names in [`ParamSet::tensors`] order.
    pub fn names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|k| LAYER_NAMES.iter().map(move |n| format!("layer{}.{n}", k + 1)))
            .collect()
    }

    /// Rebuilds parameters from tensors in [`ParamSet::tensors`] order.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        assert_eq!(tensors.len() % TENSORS_PER_LAYER, 0, "shape mismatch: tensor count");
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let Some(w1) = it.next() {
            let mut next = || it.next().expect("tensor count checked");
            layers.push(IDetLayer {
                w1,
                b1: next(),
                w2: next(),
                b2: next(),
                w3: next(),
                b3: next(),
                beta: next(),
                alpha1: next(),
                alpha2: next(),
            });
        }
        Self { layers }
    }

    /// Zeros the gradients of parameters frozen by `config.mode`.
    pub fn mask_frozen(config: &IDetNetConfig, grads: &mut [Tensor]) {
        if config.mode == IDetNetMode::DetNetCompat {
            for layer in grads.chunks_mut(TENSORS_PER_LAYER) {
                for g in &mut layer[6..] {
                    g.data_mut().fill(0.0);
                }
            }
        }
    }
}

/// `−1 + ReLU(s+|β|)/|β| − ReLU(s−|β|)/|β|`, i.e. `clamp(s/|β|, −1, 1)`, elementwise.
pub fn lss(s: &[f64], beta: f64) -> Result<Vec<f64>, IDetNetError> {
    let b = beta.abs();
    if b <= BETA_FLOOR {
        return Err(IDetNetError::DegenerateBeta(b));
    }
    Ok(s.iter().map(|&v| (v / b).clamp(-1.0, 1.0)).collect())
}

/// `(1 − α)·s_new + α·s_old`, elementwise.
pub fn smooth(s_new: &[f64], s_old: &[f64], alpha: f64) -> Vec<f64> {
    assert_eq!(s_new.len(), s_old.len(), "shape mismatch in smooth");
    s_new.iter().zip(s_old).map(|(n, o)| (1.0 - alpha) * n + alpha * o).collect()
}

fn lss_var<'t>(s: Var<'t>, beta: Var<'t>) -> Var<'t> {
    let b = beta.abs();
    let up = s.add_scalar(b).relu();
    let down = s.add_scalar(-b).relu();
    let inv = b.recip();
    (up - down).scale_by(inv).offset(-1.0)
}

fn smooth_var<'t>(s_new: Var<'t>, s_old: Var<'t>, alpha: Var<'t>) -> Var<'t> {
    s_new + (s_old - s_new).scale_by(alpha)
}

/// `N(0, 0.01)` weights and biases, β = 0.7, α = 0.8 (α = 0 in compat mode).
pub fn init_idetnet(config: &IDetNetConfig, rng: &mut Rng) -> IDetNetParams {
    let n = config.dim();
    let mut gauss = |r: usize, c: usize| {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gaussian(0.0, INIT_WEIGHT_STD)).collect())
    };
    let alpha = match config.mode {
        IDetNetMode::Improved => INIT_ALPHA,
        IDetNetMode::DetNetCompat => 0.0,
    };
    let layers = (0..config.k_id)
        .map(|_| IDetLayer {
            w1: gauss(config.h1, config.input_width()),
            b1: gauss(config.h1, 1),
            w2: gauss(config.h2, config.h1),
            b2: gauss(config.h2, 1),
            w3: gauss(n, config.h1),
            b3: gauss(n, 1),
            beta: Tensor::scalar(INIT_BETA),
            alpha1: Tensor::scalar(alpha),
            alpha2: Tensor::scalar(alpha),
        })
        .collect();
    IDetNetParams { layers }
}

/// Total parameter count of the architecture.
pub fn param_count(config: &IDetNetConfig) -> usize {
    let (h1, h2, n) = (config.h1, config.h2, config.dim());
    config.k_id * (h1 * config.input_width() + h1 + h2 * h1 + h2 + n * h1 + n + 3)
}

/// Parameters updated by training in the configured mode.
pub fn trainable_count(config: &IDetNetConfig) -> usize {
    match config.mode {
        IDetNetMode::Improved => param_count(config),
        IDetNetMode::DetNetCompat => param_count(config) - 3 * config.k_id,
    }
}

/// Per-sample network inputs arranged as batch columns.
#[derive(Debug, Clone)]
pub struct IdBatch {
    pub gram: Arc<Vec<Tensor>>,
    pub hty: Tensor,
    pub x: Tensor,
}

impl IdBatch {
    pub fn from_samples(samples: &[Sample]) -> Self {
        let gram: Vec<Tensor> = samples.iter().map(Sample::gram).collect();
        let hty: Vec<Vec<f64>> = samples.iter().map(Sample::hty).collect();
        let hty_cols: Vec<&[f64]> = hty.iter().map(Vec::as_slice).collect();
        let x_cols: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
        Self {
            gram: Arc::new(gram),
            hty: Tensor::from_columns(&hty_cols),
            x: Tensor::from_columns(&x_cols),
        }
    }

    pub fn len(&self) -> usize {
        self.hty.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_betas(params: &IDetNetParams) -> Result<(), IDetNetError> {
    for l in &params.layers {
        let b = l.beta.item().abs();
        if b <= BETA_FLOOR {
            return Err(IDetNetError::DegenerateBeta(b));
        }
    }
    Ok(())
}

fn forward_on_tape<'t>(
    tape: &'t Tape,
    vars: &[Var<'t>],
    config: &IDetNetConfig,
    batch: &IdBatch,
) -> Vec<Var<'t>> {
    let n = config.dim();
    let b = batch.len();
    assert_eq!(batch.hty.rows(), n, "shape mismatch: batch built for another N_t");
    let hty = tape.constant(batch.hty.clone());
    let mut v = tape.constant(Tensor::zeros(config.h2, b));
    let mut x = tape.constant(Tensor::zeros(n, b));
    let mut estimates = Vec::with_capacity(config.k_id);
    for layer in vars.chunks(TENSORS_PER_LAYER) {
        let [w1, b1, w2, b2, w3, b3, beta, a1, a2] = layer else { unreachable!() };
        let hhx = x.block_matvec(batch.gram.clone());
        let input = tape.concat_rows(&[v, hty, hhx, x]);
        let z = w1.matmul(input).add_bias(*b1).relu();
        let v_next = smooth_var(w2.matmul(z).add_bias(*b2), v, *a1);
        let s = w3.matmul(z).add_bias(*b3);
        let x_next = smooth_var(lss_var(s, *beta), x, *a2);
        v = v_next;
        x = x_next;
        estimates.push(x);
    }
    estimates
}

fn bind<'t>(tape: &'t Tape, params: &IDetNetParams) -> Vec<Var<'t>> {
    params.tensors().into_iter().map(|t| tape.param(t.clone())).collect()
}

/// Per-layer estimates `x̂_2 … x̂_{K+1}`, each `2N_t x B`.
pub fn forward_batch(
    params: &IDetNetParams,
    config: &IDetNetConfig,
    batch: &IdBatch,
) -> Result<Vec<Tensor>, IDetNetError> {
    check_betas(params)?;
    let tape = Tape::new();
    let vars: Vec<Var> = params.tensors().into_iter().map(|t| tape.constant(t.clone())).collect();
    Ok(forward_on_tape(&tape, &vars, config, batch).iter().map(Var::value).collect())
}

/// Per-layer estimates for one channel use.
pub fn idetnet_forward(
    h: &Tensor,
    y: &[f64],
    params: &IDetNetParams,
    config: &IDetNetConfig,
) -> Result<Vec<Vec<f64>>, IDetNetError> {
    assert_eq!(h.cols(), config.dim(), "shape mismatch: channel width vs N_t");
    assert_eq!(h.rows(), y.len(), "shape mismatch: channel height vs y");
    let hty = h.t_matmul(&Tensor::vector(y.to_vec()));
    let batch = IdBatch {
        gram: Arc::new(vec![h.t_matmul(h)]),
        hty,
        x: Tensor::zeros(config.dim(), 1),
    };
    Ok(forward_batch(params, config, &batch)?.into_iter().map(Tensor::into_data).collect())
}

/// Batch mean of `Σ_k ‖x̂_k − x‖²`.
pub fn idetnet_loss(estimates: &[Tensor], x: &Tensor) -> f64 {
    let b = x.cols() as f64;
    estimates.iter().map(|e| e.sub(x).norm2sq()).sum::<f64>() / b
}

/// Loss and gradients (frozen parameters get zero gradient).
pub fn loss_and_grad(
    params: &IDetNetParams,
    config: &IDetNetConfig,
    batch: &IdBatch,
) -> Result<(f64, Vec<Tensor>), IDetNetError> {
    check_betas(params)?;
    let tape = Tape::new();
    let vars = bind(&tape, params);
    let estimates = forward_on_tape(&tape, &vars, config, batch);
    let x = tape.constant(batch.x.clone());
    let mut total: Option<Var> = None;
    for e in estimates {
        let term = (e - x).norm2sq();
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    let loss = total.expect("at least one layer").scale(1.0 / batch.len() as f64);
    let value = loss.item();
    if !value.is_finite() {
        return Err(NumericsError::NonFinite("IDetNet loss").into());
    }
    let grads = tape.backward(loss)?;
    let mut g = grads.wrt_all(&vars);
    IDetNetParams::mask_frozen(config, &mut g);
    Ok((value, g))
}

/// Final estimates `x̂_{K+1}` for many samples, processed in chunks.
pub fn detect_batch(
    params: &IDetNetParams,
    config: &IDetNetConfig,
    samples: &[Sample],
) -> Result<Vec<Vec<f64>>, IDetNetError> {
    use rayon::prelude::*;
    let chunks: Vec<Vec<Vec<f64>>> = samples
        .par_chunks(256)
        .map(|chunk| {
            let batch = IdBatch::from_samples(chunk);
            let est = forward_batch(params, config, &batch)?;
            let last = est.last().expect("k_id >= 1");
            Ok((0..last.cols()).map(|j| last.column(j)).collect())
        })
        .collect::<Result<_, IDetNetError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// BER-harness handle emitting quantized final estimates.
pub fn detector(name: &str, params: IDetNetParams, config: IDetNetConfig) -> DetectorHandle {
    let params = Arc::new(params);
    DetectorHandle::new(name, move |s| {
        let est = idetnet_forward(&s.h, &s.y, &params, &config)?;
        Ok(Detection {
            estimate: quantize(est.last().expect("k_id >= 1")),
            branch: None,
            flops: flops::idetnet(&config, s.n_r),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lss_examples() {
        assert_eq!(lss(&[0.0], 0.7).unwrap(), vec![0.0]);
        assert_eq!(lss(&[2.0], 0.7).unwrap(), vec![1.0]);
        let v = lss(&[0.35], 0.7).unwrap()[0];
        assert!((v - 0.5).abs() < 1e-15);
        assert!(matches!(lss(&[1.0], 1e-9), Err(IDetNetError::DegenerateBeta(_))));
    }

    #[test]
    fn lss_is_odd_and_saturates() {
        for &s in &[-3.0, -0.7, -0.2, 0.1, 0.69, 5.0] {
            for &b in &[0.3, -0.7, 2.0] {
                let p = lss(&[s], b).unwrap()[0];
                let m = lss(&[-s], b).unwrap()[0];
                assert_eq!(p, -m);
                assert!((-1.0..=1.0).contains(&p));
                if s.abs() >= f64::abs(b) {
                    assert_eq!(p, s.signum());
                }
            }
        }
    }

    #[test]
    fn smooth_examples() {
        assert_eq!(smooth(&[1.0], &[0.0], 0.0), vec![1.0]);
        assert_eq!(smooth(&[1.0], &[0.0], 1.0), vec![0.0]);
        assert!((smooth(&[1.0], &[0.0], 0.8)[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn param_count_small_config() {
        let c = IDetNetConfig { k_id: 1, h1: 2, h2: 2, n_t: 1, mode: IDetNetMode::Improved };
        assert_eq!(param_count(&c), 33);
        assert_eq!(trainable_count(&c.detnet_compat()), 30);
        let mut rng = Rng::new(0);
        assert_eq!(init_idetnet(&c, &mut rng).param_len(), 33);
    }

    #[test]
    fn init_values() {
        let c = IDetNetConfig { k_id: 3, h1: 4, h2: 3, n_t: 2, mode: IDetNetMode::Improved };
        let p = init_idetnet(&c, &mut Rng::new(1));
        for l in &p.layers {
            assert_eq!(l.beta.item(), 0.7);
            assert_eq!(l.alpha1.item(), 0.8);
            assert_eq!(l.alpha2.item(), 0.8);
            assert_eq!(l.w1.shape(), [4, 3 + 12]);
        }
        let compat = init_idetnet(&c.detnet_compat(), &mut Rng::new(1));
        assert!(compat.layers.iter().all(|l| l.alpha1.item() == 0.0 && l.beta.item() == 0.7));
    }

    #[test]
    fn roundtrip_tensors() {
        let c = IDetNetConfig { k_id: 2, h1: 3, h2: 2, n_t: 1, mode: IDetNetMode::Improved };
        let p = init_idetnet(&c, &mut Rng::new(4));
        let back = IDetNetParams::from_tensors(p.tensors().into_iter().cloned().collect());
        assert_eq!(p, back);
        assert_eq!(p.names().len(), 18);
    }
}
