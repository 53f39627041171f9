//! Unfolded OAMP detector with four trainable scalars per layer.
//!
//! Layer `k`, with `R_n = s·I` and `s = σ_n²/2` the real-domain noise
//! variance:
//!
//! ```text
//! v²  = max((‖y − Hx̂‖² − tr R_n) / tr(HᵀH), v_floor)
//! A   = 2N_t · v²Hᵀ(v²HHᵀ + R_n)⁻¹ / tr(v²Hᵀ(v²HHᵀ + R_n)⁻¹H)
//! z   = x̂ + γ1·A(y − Hx̂)
//! C   = I − γ2·AH
//! τ²  = max((tr(CCᵀ)·v² + tr(A R_n Aᵀ)) / 2N_t, τ_floor)
//! x̂'  = γ3·(E{x | z, τ²} − γ4·z)
//! ```

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::Sample;
use crate::detectors::{quantize, Detection, DetectorError, DetectorHandle};
use crate::flops;
use crate::numerics::{NumericsError, ParamSet, Tape, Tensor, Var};

pub const V_FLOOR: f64 = 1e-9;
pub const TAU_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OampNetError {
    #[error("denoiser variance τ² = {0} must be positive")]
    NonPositiveVariance(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl From<OampNetError> for DetectorError {
    fn from(e: OampNetError) -> Self {
        match e {
            OampNetError::Numerics(n) => DetectorError::Numerics(n),
            other => DetectorError::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OampNetConfig {
    pub k_oa: usize,
    pub n_t: usize,
}

impl Default for OampNetConfig {
    fn default() -> Self {
        Self { k_oa: 8, n_t: 16 }
    }
}

/// γ_{k,i} stored as 1x1 tensors, layer-major: `[γ_{1,1}, …, γ_{1,4}, γ_{2,1}, …]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OampNetParams {
    pub gamma: Vec<Tensor>,
}

impl ParamSet for OampNetParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.gamma.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.gamma.iter_mut().collect()
    }
}

impl OampNetParams {
    pub fn layers(&self) -> usize {
        self.gamma.len() / 4
    }

    /// γ_{k,i} with 1-based `k` and `i`.
    pub fn gamma(&self, k: usize, i: usize) -> f64 {
        self.gamma[(k - 1) * 4 + (i - 1)].item()
    }

    pub fn set_gamma(&mut self, k: usize, i: usize, v: f64) {
        self.gamma[(k - 1) * 4 + (i - 1)] = Tensor::scalar(v);
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.layers())
            .flat_map(|k| (1..=4).map(move |i| format!("layer{}.gamma{i}", k + 1)))
            .collect()
    }
}

/// γ1 = γ2 = γ3 = 1, γ4 = 0: the classical OAMP recursion.
pub fn init_oampnet(config: &OampNetConfig) -> OampNetParams {
    let gamma = (0..config.k_oa)
        .flat_map(|_| [1.0, 1.0, 1.0, 0.0])
        .map(Tensor::scalar)
        .collect();
    OampNetParams { gamma }
}

/// Posterior mean of `x ∈ {±1/√2}` given `z = x + N(0, τ²)`.
pub fn mmse_denoiser(z: &[f64], tau2: f64) -> Result<Vec<f64>, OampNetError> {
    if tau2 <= 0.0 || tau2.is_nan() {
        return Err(OampNetError::NonPositiveVariance(tau2));
    }
    Ok(z.iter().map(|&v| FRAC_1_SQRT_2 * (v / (SQRT_2 * tau2)).tanh()).collect())
}

/// Intermediate values of one layer, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct OampLayerTrace {
    pub v2: f64,
    pub a: Tensor,
    pub z: Vec<f64>,
    pub c: Tensor,
    pub tau2: f64,
    pub x_next: Vec<f64>,
}

struct LayerVars<'t> {
    v2: Var<'t>,
    a: Var<'t>,
    z: Var<'t>,
    c: Var<'t>,
    tau2: Var<'t>,
    x_next: Var<'t>,
}

fn forward_on_tape<'t>(
    tape: &'t Tape,
    gamma: &[Var<'t>],
    h: &Tensor,
    y: &[f64],
    sigma2: f64,
) -> Result<Vec<LayerVars<'t>>, OampNetError> {
    let m = h.rows();
    let n = h.cols();
    assert_eq!(y.len(), m, "shape mismatch: y vs H");
    assert_eq!(gamma.len() % 4, 0, "shape mismatch: gamma count");
    let s = sigma2 / 2.0;
    let hv = tape.constant(h.clone());
    let ht = tape.constant(h.transpose());
    let yv = tape.constant(Tensor::vector(y.to_vec()));
    let hht = tape.constant(h.matmul_t(h));
    let noise = tape.constant(Tensor::identity(m).scale(s));
    let eye = tape.constant(Tensor::identity(n));
    let tr_gram = h.norm2sq();
    let tr_rn = m as f64 * s;
    let dim = n as f64;

    let mut x = tape.constant(Tensor::zeros(n, 1));
    let mut out = Vec::with_capacity(gamma.len() / 4);
    for g in gamma.chunks(4) {
        let r = yv - hv.matmul(x);
        let v2 = r.norm2sq().offset(-tr_rn).scale(1.0 / tr_gram).max_const(V_FLOOR);
        let inner = (hht.scale_by(v2) + noise).inverse()?;
        let w = ht.matmul(inner).scale_by(v2);
        let a = w.scale(dim).div_by(w.matmul(hv).trace());
        let z = x + a.matmul(r).scale_by(g[0]);
        let c = eye - a.matmul(hv).scale_by(g[1]);
        let tau2 = (c.norm2sq().hadamard(v2) + a.norm2sq().scale(s)).scale(1.0 / dim).max_const(TAU_FLOOR);
        let posterior = z.scale(FRAC_1_SQRT_2).div_by(tau2).tanh().scale(FRAC_1_SQRT_2);
        let x_next = (posterior - z.scale_by(g[3])).scale_by(g[2]);
        out.push(LayerVars { v2, a, z, c, tau2, x_next });
        x = x_next;
    }
    Ok(out)
}

fn check_config(params: &OampNetParams, config: &OampNetConfig, h: &Tensor) {
    assert_eq!(params.layers(), config.k_oa, "shape mismatch: gamma count vs k_oa");
    assert_eq!(h.cols(), 2 * config.n_t, "shape mismatch: channel width vs N_t");
}

/// Per-layer estimates `x̂_2 … x̂_{K+1}`.
pub fn oampnet_forward(
    h: &Tensor,
    y: &[f64],
    sigma2: f64,
    params: &OampNetParams,
    config: &OampNetConfig,
) -> Result<Vec<Vec<f64>>, OampNetError> {
    check_config(params, config, h);
    let tape = Tape::new();
    let gamma: Vec<Var> = params.gamma.iter().map(|t| tape.constant(t.clone())).collect();
    let layers = forward_on_tape(&tape, &gamma, h, y, sigma2)?;
    Ok(layers.iter().map(|l| l.x_next.value().into_data()).collect())
}

/// Every intermediate of every layer.
pub fn oampnet_trace(
    h: &Tensor,
    y: &[f64],
    sigma2: f64,
    params: &OampNetParams,
    config: &OampNetConfig,
) -> Result<Vec<OampLayerTrace>, OampNetError> {
    check_config(params, config, h);
    let tape = Tape::new();
    let gamma: Vec<Var> = params.gamma.iter().map(|t| tape.constant(t.clone())).collect();
    let layers = forward_on_tape(&tape, &gamma, h, y, sigma2)?;
    Ok(layers
        .iter()
        .map(|l| OampLayerTrace {
            v2: l.v2.item(),
            a: l.a.value(),
            z: l.z.value().into_data(),
            c: l.c.value(),
            tau2: l.tau2.item(),
            x_next: l.x_next.value().into_data(),
        })
        .collect())
}

/// `Σ_k ‖x̂_k − x‖²` for one sample.
pub fn oampnet_loss(estimates: &[Vec<f64>], x: &[f64]) -> f64 {
    estimates
        .iter()
        .map(|e| e.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

fn sample_loss_and_grad(params: &OampNetParams, s: &Sample) -> Result<(f64, Vec<Tensor>), OampNetError> {
    let tape = Tape::new();
    let gamma: Vec<Var> = params.gamma.iter().map(|t| tape.param(t.clone())).collect();
    let layers = forward_on_tape(&tape, &gamma, &s.h, &s.y, s.sigma2)?;
    let x = tape.constant(Tensor::vector(s.x.clone()));
    let mut total: Option<Var> = None;
    for l in &layers {
        let term = (l.x_next - x).norm2sq();
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    let loss = total.expect("k_oa >= 1");
    let grads = tape.backward(loss)?;
    Ok((loss.item(), grads.wrt_all(&gamma)))
}

/// Batch-mean loss and gradients; per-sample passes run in parallel and are
/// reduced in sample order.
pub fn loss_and_grad(
    params: &OampNetParams,
    config: &OampNetConfig,
    samples: &[Sample],
) -> Result<(f64, Vec<Tensor>), OampNetError> {
    assert!(!samples.is_empty(), "empty batch");
    assert_eq!(params.layers(), config.k_oa, "shape mismatch: gamma count vs k_oa");
    let parts: Vec<(f64, Vec<Tensor>)> = samples
        .par_iter()
        .map(|s| sample_loss_and_grad(params, s))
        .collect::<Result<_, _>>()?;
    let inv = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Tensor> = params.gamma.iter().map(|_| Tensor::scalar(0.0)).collect();
    for (l, g) in parts {
        loss += l * inv;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.axpy(inv, gi);
        }
    }
    if !loss.is_finite() {
        return Err(NumericsError::NonFinite("OAMPNet loss").into());
    }
    Ok((loss, grads))
}

/// Batch-mean loss without gradients.
pub fn batch_loss(params: &OampNetParams, config: &OampNetConfig, samples: &[Sample]) -> Result<f64, OampNetError> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| Ok(oampnet_loss(&oampnet_forward(&s.h, &s.y, s.sigma2, params, config)?, &s.x)))
        .collect::<Result<_, OampNetError>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

pub fn detector(name: &str, params: OampNetParams, config: OampNetConfig) -> DetectorHandle {
    let params = Arc::new(params);
    DetectorHandle::new(name, move |s| {
        let est = oampnet_forward(&s.h, &s.y, s.sigma2, &params, &config)?;
        Ok(Detection {
            estimate: quantize(est.last().expect("k_oa >= 1")),
            branch: None,
            flops: flops::oampnet(&config, s.n_r),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::generate_sample;
    use crate::numerics::Rng;

    #[test]
    fn init_values() {
        let p = init_oampnet(&OampNetConfig { k_oa: 8, n_t: 2 });
        assert_eq!(p.gamma(3, 1), 1.0);
        assert_eq!(p.gamma(5, 4), 0.0);
        assert_eq!(p.param_len(), 32);
    }

    #[test]
    fn denoiser_basics() {
        assert_eq!(mmse_denoiser(&[0.0], 0.3).unwrap(), vec![0.0]);
        let hard = mmse_denoiser(&[0.3], 1e-6).unwrap()[0];
        assert!((hard - FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(mmse_denoiser(&[0.1], 0.0).is_err());
        assert!(mmse_denoiser(&[0.1], -1.0).is_err());
    }

    #[test]
    fn denoiser_matches_two_point_posterior() {
        let (z, tau2) = (0.5f64, 0.25f64);
        let like = |x: f64| (-(z - x) * (z - x) / (2.0 * tau2)).exp();
        let a = FRAC_1_SQRT_2;
        let expect = (a * like(a) - a * like(-a)) / (like(a) + like(-a));
        let got = mmse_denoiser(&[z], tau2).unwrap()[0];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn denoiser_is_odd_monotone_bounded() {
        let zs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
        let out = mmse_denoiser(&zs, 0.2).unwrap();
        for w in out.windows(2) {
            assert!(w[1] >= w[0]);
        }
        for (i, v) in out.iter().enumerate() {
            assert!(v.abs() <= FRAC_1_SQRT_2);
            assert!((v + out[out.len() - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn normalization_identity_holds() {
        let mut rng = Rng::new(12);
        let cfg = OampNetConfig { k_oa: 3, n_t: 3 };
        let mut p = init_oampnet(&cfg);
        p.set_gamma(2, 1, 0.7);
        for _ in 0..10 {
            let s = generate_sample(3, 5, 0.5, 4.0, &mut rng).unwrap();
            for layer in oampnet_trace(&s.h, &s.y, s.sigma2, &p, &cfg).unwrap() {
                let tr = layer.a.matmul(&s.h).trace();
                assert!((tr - 6.0).abs() < 1e-9, "tr(AH) = {tr}");
                assert!(layer.v2 >= V_FLOOR && layer.tau2 >= TAU_FLOOR);
            }
        }
    }

    #[test]
    fn noiseless_singular_receive_gram_is_error() {
        let mut rng = Rng::new(2);
        // N_r > N_t and σ² = 0: v²HHᵀ is rank deficient
        let s = crate::channel::generate_sample_with_sigma2(1, 3, 0.0, 0.0, 0.0, &mut rng).unwrap();
        let cfg = OampNetConfig { k_oa: 1, n_t: 1 };
        assert!(oampnet_forward(&s.h, &s.y, 0.0, &init_oampnet(&cfg), &cfg).is_err());
    }
}
