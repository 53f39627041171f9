//! Simulated federated training: FedAve (local ADAM steps, size-weighted
//! parameter averaging) and FedGS (sparsified amplified gradients, one
//! server ADAM step per epoch), with transmitted-bit accounting.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::Sample;
use crate::numerics::{flatten_tensors, unflatten, AdamState, ParamSet, Rng, Tensor};

/// Amplification loop stops once the coefficient falls to this value.
pub const AMPLIFY_TOL: f64 = 1e-2;
const AMPLIFY_MAX_ITERS: usize = 10_000;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("cannot select {wanted} clients out of {available}")]
    TooManyClients { wanted: usize, available: usize },
    #[error("invalid federated config: {0}")]
    InvalidConfig(String),
    #[error("nothing to aggregate")]
    EmptyAggregate,
    #[error("client {client}: {message}")]
    Client { client: usize, message: String },
    #[error("local training diverged (loss {0})")]
    Diverged(f64),
}

impl FedError {
    pub fn client(client: usize, e: impl std::fmt::Display) -> Self {
        FedError::Client { client, message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocalOptimizer {
    /// Fresh ADAM moments at every broadcast.
    #[default]
    Adam,
    /// Plain gradient steps `Ω ← Ω − lr·g`.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub total_clients: usize,
    pub m_id: usize,
    pub m_ro: usize,
    pub local_steps: usize,
    pub t_id: usize,
    pub t_ro: usize,
    pub delta: f64,
    pub bits: u64,
    pub local_optimizer: LocalOptimizer,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            total_clients: 20,
            m_id: 8,
            m_ro: 16,
            local_steps: 2,
            t_id: 1000,
            t_ro: 100,
            delta: 1.0,
            bits: 32,
            local_optimizer: LocalOptimizer::Adam,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: String| Err(FedError::InvalidConfig(m));
        if self.total_clients == 0 {
            return bad("total_clients must be positive".into());
        }
        for (name, m) in [("m_id", self.m_id), ("m_ro", self.m_ro)] {
            if m == 0 {
                return bad(format!("{name} must be positive"));
            }
            if m > self.total_clients {
                return Err(FedError::TooManyClients { wanted: m, available: self.total_clients });
            }
        }
        if self.local_steps == 0 {
            return bad("local_steps must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if self.bits == 0 {
            return bad("bits must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseBits {
    pub broadcast: u64,
    pub upload: u64,
    pub index: u64,
}

impl PhaseBits {
    pub fn total(&self) -> u64 {
        self.broadcast + self.upload + self.index
    }
}

/// Running totals of transmitted bits, split by training phase.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OverheadLedger {
    pub bits_broadcast: u64,
    pub bits_upload: u64,
    pub bits_index: u64,
    pub phases: BTreeMap<String, PhaseBits>,
}

impl OverheadLedger {
    pub fn record(&mut self, phase: &str, broadcast: u64, upload: u64, index: u64) {
        self.bits_broadcast += broadcast;
        self.bits_upload += upload;
        self.bits_index += index;
        let p = self.phases.entry(phase.to_string()).or_default();
        p.broadcast += broadcast;
        p.upload += upload;
        p.index += index;
    }

    pub fn total(&self) -> u64 {
        self.bits_broadcast + self.bits_upload + self.bits_index
    }
}

/// Floats describing one sample: `y`, `H`, `x` and `σ²`.
pub fn sample_floats(n_t: usize, n_r: usize) -> u64 {
    (2 * n_r + 4 * n_t * n_r + 2 * n_t + 1) as u64
}

pub fn sample_bits(n_t: usize, n_r: usize, bits: u64) -> u64 {
    bits * sample_floats(n_t, n_r)
}

/// Bits to ship a whole dataset to the server.
pub fn t_cl(samples: &[Sample], bits: u64) -> u64 {
    samples.iter().map(|s| sample_bits(s.n_t(), s.n_r, bits)).sum()
}

pub fn t_fedave(cfg: &FedConfig, q_id: u64, q_ro: u64) -> u64 {
    2 * cfg.bits * (q_id * cfg.t_id as u64 * cfg.m_id as u64 + q_ro * cfg.t_ro as u64 * cfg.m_ro as u64)
}

fn fedgs_terms(cfg: &FedConfig, q_id: u64, q_ro: u64) -> (f64, u64, u64) {
    let (tid, tro, mid, mro) = (cfg.t_id as u64, cfg.t_ro as u64, cfg.m_id as u64, cfg.m_ro as u64);
    let dense = q_id * tid * mid + q_ro * tro * mro;
    let upload = cfg.bits as f64 * cfg.delta * dense as f64;
    (upload, q_id * tid + q_ro * tro, cfg.bits * dense)
}

/// Expected FedGS bits with one index vector per network per epoch.
pub fn t_fedgs(cfg: &FedConfig, q_id: u64, q_ro: u64) -> f64 {
    let (upload, index, broadcast) = fedgs_terms(cfg, q_id, q_ro);
    upload + index as f64 + broadcast as f64
}

/// Expected FedGS bits with one index vector per uploading client.
pub fn t_fedgs_per_client_index(cfg: &FedConfig, q_id: u64, q_ro: u64) -> f64 {
    let (upload, _, broadcast) = fedgs_terms(cfg, q_id, q_ro);
    let index = q_id * cfg.t_id as u64 * cfg.m_id as u64 + q_ro * cfg.t_ro as u64 * cfg.m_ro as u64;
    upload + index as f64 + broadcast as f64
}

type GradResult = Result<(f64, Vec<Tensor>), FedError>;

/// `steps` optimizer steps from `global` on one client's full local batch.
/// Returns the new parameters and the loss seen at the first step.
pub fn local_update<P, F>(global: &P, steps: usize, lr: f64, optimizer: LocalOptimizer, grad: F) -> Result<(P, f64), FedError>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> GradResult,
{
    assert!(steps >= 1, "local_steps must be at least 1");
    let mut params = global.clone();
    let mut adam = AdamState::new(&params, lr);
    let mut first = f64::NAN;
    for step in 0..steps {
        let (loss, g) = grad(&params)?;
        if !loss.is_finite() {
            return Err(FedError::Diverged(loss));
        }
        if step == 0 {
            first = loss;
        }
        match optimizer {
            LocalOptimizer::Adam => adam.step(&mut params, &g),
            LocalOptimizer::Sgd => {
                for (p, gi) in params.tensors_mut().into_iter().zip(&g) {
                    p.axpy(-lr, gi);
                }
            }
        }
    }
    Ok((params, first))
}

/// `Σ_m D_m·Ω_m / Σ_m D_m`, elementwise.
pub fn aggregate_weighted<P: ParamSet + Clone>(params: &[P], sizes: &[usize]) -> Result<P, FedError> {
    if params.is_empty() {
        return Err(FedError::EmptyAggregate);
    }
    assert_eq!(params.len(), sizes.len(), "one size per parameter set");
    assert!(sizes.iter().all(|&d| d > 0), "client sizes must be positive");
    let total: f64 = sizes.iter().map(|&d| d as f64).sum();
    let mut out = params[0].clone();
    for t in out.tensors_mut() {
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    for (p, &d) in params.iter().zip(sizes) {
        let w = d as f64 / total;
        for (acc, t) in out.tensors_mut().into_iter().zip(p.tensors()) {
            acc.axpy(w, t);
        }
    }
    Ok(out)
}

/// Per-epoch progress emitted by the federated loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub selected: Vec<usize>,
    /// Size-weighted mean of the selected clients' losses at the broadcast parameters.
    pub loss: f64,
    pub ledger: OverheadLedger,
}

/// One federated phase (IDetNet or RouteNet training).
#[derive(Debug, Clone)]
pub struct FedRun {
    pub phase: String,
    pub clients_per_epoch: usize,
    pub epochs: usize,
    pub local_steps: usize,
    pub lr: f64,
    pub bits: u64,
    pub optimizer: LocalOptimizer,
    pub delta: f64,
}

fn select(rng: &mut Rng, n: usize, m: usize) -> Result<Vec<usize>, FedError> {
    if m == 0 || m > n {
        return Err(FedError::TooManyClients { wanted: m, available: n });
    }
    let mut s = rng.choose_without_replacement(n, m);
    s.sort_unstable();
    Ok(s)
}

fn weighted_loss(losses: &[f64], sizes: &[usize]) -> f64 {
    let total: f64 = sizes.iter().map(|&d| d as f64).sum();
    losses.iter().zip(sizes).map(|(l, &d)| l * d as f64).sum::<f64>() / total
}

/// FedAve: sample, broadcast, local updates in parallel, upload, average.
pub fn fedave_train<P, F, C>(
    init: P,
    sizes: &[usize],
    run: &FedRun,
    rng: &mut Rng,
    ledger: &mut OverheadLedger,
    grad: F,
    mut on_epoch: C,
) -> Result<P, FedError>
where
    P: ParamSet + Clone + Send + Sync,
    F: Fn(usize, &P) -> GradResult + Sync,
    C: FnMut(&EpochRecord, &P) -> Result<(), FedError>,
{
    let q = init.param_len() as u64;
    let mut global = init;
    for epoch in 0..run.epochs {
        let selected = select(rng, sizes.len(), run.clients_per_epoch)?;
        let m = selected.len() as u64;
        let results: Vec<(P, f64)> = selected
            .par_iter()
            .map(|&c| local_update(&global, run.local_steps, run.lr, run.optimizer, |p| grad(c, p)))
            .collect::<Result<_, _>>()?;
        let sel_sizes: Vec<usize> = selected.iter().map(|&c| sizes[c]).collect();
        let losses: Vec<f64> = results.iter().map(|r| r.1).collect();
        let locals: Vec<P> = results.into_iter().map(|r| r.0).collect();
        global = aggregate_weighted(&locals, &sel_sizes)?;
        ledger.record(&run.phase, run.bits * q * m, run.bits * q * m, 0);
        let record = EpochRecord {
            phase: run.phase.clone(),
            epoch: epoch + 1,
            selected,
            loss: weighted_loss(&losses, &sel_sizes),
            ledger: ledger.clone(),
        };
        on_epoch(&record, &global)?;
    }
    Ok(global)
}

/// A randomly sparsified, amplified gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsifiedGradient {
    /// `g_q / p_q` for every selected component, in index order.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub p: Vec<f64>,
}

impl SparsifiedGradient {
    pub fn q(&self) -> usize {
        self.mask.len()
    }

    pub fn selected(&self) -> usize {
        self.values.len()
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut vals = self.values.iter();
        self.mask
            .iter()
            .map(|&m| if m { *vals.next().expect("value per set bit") } else { 0.0 })
            .collect()
    }
}

/// Selection probabilities `p_q = min(λ|g_q|, 1)` with `Σp ≈ δQ`.
pub fn sparsify_probabilities(g: &[f64], delta: f64) -> Vec<f64> {
    assert!(delta > 0.0 && delta <= 1.0, "delta must lie in (0, 1]");
    assert!(g.iter().all(|v| v.is_finite()), "gradient must be finite");
    let q = g.len() as f64;
    let l1: f64 = g.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return vec![0.0; g.len()];
    }
    let target = delta * q;
    let mut p: Vec<f64> = g.iter().map(|v| (target * v.abs() / l1).min(1.0)).collect();
    for _ in 0..AMPLIFY_MAX_ITERS {
        let (count, sum) = p
            .iter()
            .filter(|&&v| v < 1.0)
            .fold((0usize, 0.0), |(c, s), &v| (c + 1, s + v));
        if count == 0 || sum == 0.0 {
            break;
        }
        let a = (target - q + count as f64) / sum;
        for v in p.iter_mut().filter(|v| **v < 1.0) {
            *v = (a * *v).min(1.0);
        }
        if a <= 1.0 + AMPLIFY_TOL {
            break;
        }
    }
    p
}

/// Draws `μ_q ~ Bernoulli(p_q)` and keeps `g_q/p_q` where `μ_q = 1`.
pub fn sparsify(g: &[f64], delta: f64, rng: &mut Rng) -> SparsifiedGradient {
    let p = sparsify_probabilities(g, delta);
    let mut values = Vec::new();
    let mask = g
        .iter()
        .zip(&p)
        .map(|(&gq, &pq)| {
            let keep = pq > 0.0 && rng.bernoulli(pq);
            if keep {
                values.push(gq / pq);
            }
            keep
        })
        .collect();
    SparsifiedGradient { values, mask, p }
}

/// `Σ_m D_m·S(g_m) / Σ_m D_m`.
pub fn fedgs_aggregate(grads: &[SparsifiedGradient], sizes: &[usize]) -> Result<Vec<f64>, FedError> {
    let first = grads.first().ok_or(FedError::EmptyAggregate)?;
    assert_eq!(grads.len(), sizes.len(), "one size per gradient");
    let total: f64 = sizes.iter().map(|&d| d as f64).sum();
    let mut out = vec![0.0; first.q()];
    for (g, &d) in grads.iter().zip(sizes) {
        assert_eq!(g.q(), out.len(), "shape mismatch: gradient lengths differ");
        let w = d as f64 / total;
        for (o, v) in out.iter_mut().zip(g.dense()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// One server ADAM step on a flat gradient.
pub fn fedgs_server_step<P: ParamSet>(params: &mut P, adam: &mut AdamState, flat_grad: &[f64]) {
    let shapes = params.shapes();
    adam.step(params, &unflatten(flat_grad, &shapes));
}

/// FedGS: clients upload sparsified gradients at the broadcast parameters;
/// the server aggregates and takes one ADAM step with persistent moments.
pub fn fedgs_train<P, F, C>(
    init: P,
    sizes: &[usize],
    run: &FedRun,
    rng: &mut Rng,
    ledger: &mut OverheadLedger,
    grad: F,
    mut on_epoch: C,
) -> Result<P, FedError>
where
    P: ParamSet + Clone + Send + Sync,
    F: Fn(usize, &P) -> GradResult + Sync,
    C: FnMut(&EpochRecord, &P) -> Result<(), FedError>,
{
    let q = init.param_len() as u64;
    let mut global = init;
    let mut adam = AdamState::new(&global, run.lr);
    let base = rng.derive(&[0x6673]);
    for epoch in 0..run.epochs {
        let selected = select(rng, sizes.len(), run.clients_per_epoch)?;
        let m = selected.len() as u64;
        let uploads: Vec<(SparsifiedGradient, f64)> = selected
            .par_iter()
            .map(|&c| {
                let (loss, g) = grad(c, &global)?;
                if !loss.is_finite() {
                    return Err(FedError::Diverged(loss));
                }
                let mut crng = base.derive(&[epoch as u64, c as u64]);
                Ok((sparsify(&flatten_tensors(&g), run.delta, &mut crng), loss))
            })
            .collect::<Result<_, _>>()?;
        let sel_sizes: Vec<usize> = selected.iter().map(|&c| sizes[c]).collect();
        let losses: Vec<f64> = uploads.iter().map(|u| u.1).collect();
        let sparse: Vec<SparsifiedGradient> = uploads.into_iter().map(|u| u.0).collect();
        let sent: u64 = sparse.iter().map(|s| s.selected() as u64).sum();
        let g = fedgs_aggregate(&sparse, &sel_sizes)?;
        fedgs_server_step(&mut global, &mut adam, &g);
        ledger.record(&run.phase, run.bits * q * m, run.bits * sent, q * m);
        let record = EpochRecord {
            phase: run.phase.clone(),
            epoch: epoch + 1,
            selected,
            loss: weighted_loss(&losses, &sel_sizes),
            ledger: ledger.clone(),
        };
        on_epoch(&record, &global)?;
    }
    Ok(global)
}

/// Simple mean of client-local parameter sets.
pub fn average<P: ParamSet + Clone>(params: &[P]) -> Result<P, FedError> {
    aggregate_weighted(params, &vec![1; params.len()])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimizer of `Σ g²/p` subject to `Σp = δQ`, `0 ≤ p ≤ 1`, by bisection on λ.
    fn waterfill(g: &[f64], delta: f64) -> Vec<f64> {
        let target = delta * g.len() as f64;
        let f = |lam: f64| g.iter().map(|v| (lam * v.abs()).min(1.0)).sum::<f64>();
        let (mut lo, mut hi) = (0.0, 1.0);
        while f(hi) < target && hi < 1e300 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        g.iter().map(|v| (hi * v.abs()).min(1.0)).collect()
    }

    #[test]
    fn hand_traced_probabilities() {
        assert_eq!(sparsify_probabilities(&[4.0, 1.0, 1.0], 0.5), vec![1.0, 0.25, 0.25]);
        let p = sparsify_probabilities(&[-2.0; 10], 0.3);
        for v in p {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn full_density_is_identity() {
        let g = [0.3, -1.2, 5.0, 0.0, 1e-4];
        let s = sparsify(&g, 1.0, &mut Rng::new(1));
        assert_eq!(s.dense(), g.to_vec());
    }

    #[test]
    fn zero_gradient() {
        let s = sparsify(&[0.0; 4], 0.5, &mut Rng::new(1));
        assert_eq!(s.dense(), vec![0.0; 4]);
        assert_eq!(s.selected(), 0);
    }

    #[test]
    fn matches_waterfilling_and_budget() {
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let q = rng.uniform_int(2, 6);
            let g: Vec<f64> = (0..q).map(|_| rng.gaussian(0.0, 1.0) * rng.uniform(0.01, 3.0)).collect();
            let delta = rng.uniform(0.1, 1.0);
            let p = sparsify_probabilities(&g, delta);
            let sum: f64 = p.iter().sum();
            let target = delta * q as f64;
            assert!((sum - target).abs() / target <= 0.01, "Σp = {sum}, δQ = {target}");
            let oracle: f64 = waterfill(&g, delta).iter().sum();
            assert!((sum - oracle).abs() / oracle <= 0.02);
        }
    }

    #[test]
    fn aggregate_examples() {
        let a = vec![Tensor::scalar(0.0)];
        let b = vec![Tensor::scalar(4.0)];
        let out = aggregate_weighted(&[a.clone(), b.clone()], &[1, 3]).unwrap();
        assert_eq!(out[0].item(), 3.0);
        let scaled = aggregate_weighted(&[a.clone(), b], &[10, 30]).unwrap();
        assert_eq!(scaled[0].item(), 3.0);
        assert_eq!(aggregate_weighted(&[a.clone(), a.clone()], &[2, 7]).unwrap(), a);
        assert!(aggregate_weighted::<Vec<Tensor>>(&[], &[]).is_err());
    }

    #[test]
    fn local_update_zero_gradient_keeps_params() {
        let p = vec![Tensor::from_rows(&[vec![1.0, -2.0]])];
        let (out, _) = local_update(&p, 3, 1e-3, LocalOptimizer::Adam, |q: &Vec<Tensor>| {
            Ok((0.0, vec![Tensor::zeros(q[0].rows(), q[0].cols())]))
        })
        .unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn opposite_gradients_cancel() {
        let s1 = sparsify(&[1.0, -2.0], 1.0, &mut Rng::new(0));
        let s2 = sparsify(&[-1.0, 2.0], 1.0, &mut Rng::new(0));
        let g = fedgs_aggregate(&[s1, s2], &[5, 5]).unwrap();
        let mut p = vec![Tensor::from_rows(&[vec![0.5, 0.5]])];
        let mut adam = AdamState::new(&p, 1e-3);
        fedgs_server_step(&mut p, &mut adam, &g);
        assert_eq!(p[0].data(), &[0.5, 0.5]);
    }

    #[test]
    fn overhead_formulas() {
        assert_eq!(sample_floats(16, 16), 1089);
        assert_eq!(sample_bits(16, 16, 32), 34848);
        let cfg = FedConfig { m_id: 1, m_ro: 1, t_id: 1, t_ro: 0, bits: 32, ..Default::default() };
        assert_eq!(t_fedave(&cfg, 10, 0), 640);
    }

    #[test]
    fn fedgs_dense_bound() {
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let cfg = FedConfig {
                total_clients: 30,
                m_id: rng.uniform_int(1, 30),
                m_ro: rng.uniform_int(1, 30),
                t_id: rng.uniform_int(1, 500),
                t_ro: rng.uniform_int(1, 500),
                delta: 1.0,
                bits: 32,
                ..Default::default()
            };
            let (qi, qr) = (rng.uniform_int(1, 100_000) as u64, rng.uniform_int(1, 100_000) as u64);
            assert!(t_fedgs(&cfg, qi, qr) >= t_fedave(&cfg, qi, qr) as f64 / 2.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(FedConfig::default().validate().is_ok());
        assert!(FedConfig { m_ro: 21, ..Default::default() }.validate().is_err());
        assert!(FedConfig { delta: 0.0, ..Default::default() }.validate().is_err());
        assert!(FedConfig { local_steps: 0, ..Default::default() }.validate().is_err());
    }
}
