//! Correlated Rayleigh MIMO channels, QPSK symbols and dataset generation.
//!
//! Channels follow the Kronecker model `H̃ = √R_r · H_g · √R_t`, where `H_g`
//! has i.i.d. `CN(0, 1/N_r)` entries and both correlation matrices have
//! entries `ρ^{(i−j)²}`. All samples are converted to the real domain before
//! they leave this module.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Rng, Tensor};

/// Subinterval lengths used when drawing client profiles.
pub const RHO_SUBINTERVAL: f64 = 0.2;
pub const SNR_SUBINTERVAL_DB: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("correlation coefficient {0} outside [0, 1)")]
    InvalidRho(f64),
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("invalid system configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub n_t: usize,
    /// Inclusive receive-antenna range.
    pub n_r_range: (usize, usize),
    pub snr_db_range: (f64, f64),
    pub rho_range: (f64, f64),
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self { n_t: 4, n_r_range: (4, 16), snr_db_range: (-5.0, 15.0), rho_range: (0.0, 0.9) }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: String| Err(ChannelError::InvalidConfig(m));
        if self.n_t == 0 {
            return bad("n_t must be at least 1".into());
        }
        let (lo, hi) = self.n_r_range;
        if lo < self.n_t || lo > hi {
            return bad(format!("n_r range [{lo}, {hi}] must satisfy n_t <= lo <= hi"));
        }
        let (a, b) = self.rho_range;
        if !(0.0..1.0).contains(&a) || !(0.0..1.0).contains(&b) || a > b {
            return bad(format!("rho range [{a}, {b}] must lie in [0, 1)"));
        }
        let (s0, s1) = self.snr_db_range;
        if !(s0.is_finite() && s1.is_finite()) || s0 > s1 {
            return bad(format!("snr range [{s0}, {s1}] is invalid"));
        }
        Ok(())
    }
}

/// Per-client slice of the operating conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub client_id: usize,
    pub rho_subinterval: (f64, f64),
    pub snr_subinterval: (f64, f64),
    pub n_r_range: (usize, usize),
}

fn random_subinterval(range: (f64, f64), len: f64, rng: &mut Rng) -> (f64, f64) {
    let (a, b) = range;
    if b - a <= len {
        return (a, b);
    }
    let start = rng.uniform(a, b - len);
    (start, start + len)
}

impl ClientProfile {
    /// Draws random ρ and SNR subintervals inside the global ranges.
    pub fn draw(config: &SystemConfig, client_id: usize, rng: &mut Rng) -> Self {
        Self {
            client_id,
            rho_subinterval: random_subinterval(config.rho_range, RHO_SUBINTERVAL, rng),
            snr_subinterval: random_subinterval(config.snr_db_range, SNR_SUBINTERVAL_DB, rng),
            n_r_range: config.n_r_range,
        }
    }

    /// Profile spanning the full global ranges.
    pub fn global(config: &SystemConfig) -> Self {
        Self {
            client_id: usize::MAX,
            rho_subinterval: config.rho_range,
            snr_subinterval: config.snr_db_range,
            n_r_range: config.n_r_range,
        }
    }
}

/// One real-domain detection instance `y = Hx + n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub y: Vec<f64>,
    /// `2N_r x 2N_t` real-domain channel.
    pub h: Tensor,
    /// Complex-domain noise variance σ_n².
    pub sigma2: f64,
    pub x: Vec<f64>,
    pub bits: Vec<u8>,
    pub n_r: usize,
    pub rho: f64,
    pub snr_db: f64,
}

impl Sample {
    pub fn n_t(&self) -> usize {
        self.h.cols() / 2
    }

    /// `HᵀH`, always `2N_t x 2N_t`.
    pub fn gram(&self) -> Tensor {
        self.h.t_matmul(&self.h)
    }

    /// `Hᵀy`.
    pub fn hty(&self) -> Vec<f64> {
        self.h.t_matmul(&Tensor::vector(self.y.clone())).into_data()
    }

    /// Real-domain per-component noise variance, σ_n²/2.
    pub fn real_noise_var(&self) -> f64 {
        self.sigma2 / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Client(ClientProfile),
    Pooled,
    Custom(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `fraction` of samples (at least one when possible).
    pub fn split_holdout(&self, fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
        let n = self.samples.len();
        let hold = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
        let (a, b) = self.samples.split_at(n - hold);
        (a.to_vec(), b.to_vec())
    }
}

/// Dense complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn from_real(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matmul(&self, other: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, other.rows, "shape mismatch in complex matmul");
        let mut out = CMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn add(&self, other: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch in complex add");
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }
}

/// `[R]_{ij} = ρ^{(i−j)²}`.
pub fn correlation_matrix(n: usize, rho: f64) -> Result<Tensor, ChannelError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(ChannelError::InvalidRho(rho));
    }
    let mut r = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = (i as i64 - j as i64).pow(2) as i32;
            r.set(i, j, if d == 0 { 1.0 } else { rho.powi(d) });
        }
    }
    Ok(r)
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Roundoff-negative eigenvalues are clamped to zero.
pub fn matrix_sqrt(r: &Tensor) -> Result<Tensor, ChannelError> {
    assert_eq!(r.rows(), r.cols(), "shape mismatch: matrix_sqrt of non-square matrix");
    let asym = r.max_abs_diff(&r.transpose());
    let scale = r.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if asym > 1e-12 * scale {
        return Err(ChannelError::NotSymmetric(asym));
    }
    let eig = SymmetricEigen::new(r.to_nalgebra());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let s = v * nalgebra::DMatrix::from_diagonal(&roots) * v.transpose();
    let s = Tensor::from_nalgebra(&s);
    // symmetrize away roundoff
    Ok(s.add(&s.transpose()).scale(0.5))
}

/// `N_r x N_t` complex channel `√R_r · H_g · √R_t`.
pub fn generate_channel(n_t: usize, n_r: usize, rho: f64, rng: &mut Rng) -> Result<CMatrix, ChannelError> {
    let mut hg = CMatrix::zeros(n_r, n_t);
    let var = 1.0 / n_r as f64;
    for v in hg.data.iter_mut() {
        *v = rng.complex_gaussian(var);
    }
    if rho == 0.0 {
        return Ok(hg);
    }
    let sr = CMatrix::from_real(&matrix_sqrt(&correlation_matrix(n_r, rho)?)?);
    let st = CMatrix::from_real(&matrix_sqrt(&correlation_matrix(n_t, rho)?)?);
    Ok(sr.matmul(&hg).matmul(&st))
}

/// `[[Re, −Im], [Im, Re]]`.
pub fn realify(m: &CMatrix) -> Tensor {
    let (r, c) = (m.rows, m.cols);
    let mut out = Tensor::zeros(2 * r, 2 * c);
    for i in 0..r {
        for j in 0..c {
            let z = m.get(i, j);
            out.set(i, j, z.re);
            out.set(i, j + c, -z.im);
            out.set(i + r, j, z.im);
            out.set(i + r, j + c, z.re);
        }
    }
    out
}

/// `[Re; Im]` stacking.
pub fn realify_vec(v: &[Complex64]) -> Vec<f64> {
    v.iter().map(|z| z.re).chain(v.iter().map(|z| z.im)).collect()
}

/// Each bit maps to `(2b − 1)/√2` in the matching real coordinate.
pub fn qpsk_modulate(bits: &[u8]) -> Vec<f64> {
    bits.iter()
        .map(|&b| {
            assert!(b <= 1, "bits must be 0 or 1");
            if b == 1 {
                FRAC_1_SQRT_2
            } else {
                -FRAC_1_SQRT_2
            }
        })
        .collect()
}

/// Hard decision per real coordinate; zero decides `1`.
pub fn qpsk_demodulate(x: &[f64]) -> Vec<u8> {
    x.iter().map(|&v| u8::from(v >= 0.0)).collect()
}

/// `σ_n² = N_t·E_s / (N_r·10^{snr/10})` with `E_s = 1`.
pub fn snr_to_sigma2(snr_db: f64, n_t: usize, n_r: usize) -> f64 {
    n_t as f64 / (n_r as f64 * 10f64.powf(snr_db / 10.0))
}

/// Sample at explicit operating conditions.
pub fn generate_sample(
    n_t: usize,
    n_r: usize,
    rho: f64,
    snr_db: f64,
    rng: &mut Rng,
) -> Result<Sample, ChannelError> {
    let sigma2 = snr_to_sigma2(snr_db, n_t, n_r);
    generate_sample_with_sigma2(n_t, n_r, rho, snr_db, sigma2, rng)
}

pub fn generate_sample_with_sigma2(
    n_t: usize,
    n_r: usize,
    rho: f64,
    snr_db: f64,
    sigma2: f64,
    rng: &mut Rng,
) -> Result<Sample, ChannelError> {
    let hc = generate_channel(n_t, n_r, rho, rng)?;
    let h = realify(&hc);
    let bits: Vec<u8> = (0..2 * n_t).map(|_| u8::from(rng.bernoulli(0.5))).collect();
    let x = qpsk_modulate(&bits);
    let noise: Vec<Complex64> = (0..n_r).map(|_| rng.complex_gaussian(sigma2)).collect();
    let n = realify_vec(&noise);
    let hx = h.matmul(&Tensor::vector(x.clone()));
    let y = hx.data().iter().zip(&n).map(|(a, b)| a + b).collect();
    Ok(Sample { y, h, sigma2, x, bits, n_r, rho, snr_db })
}

/// Sample with ρ, SNR and N_r drawn from a client profile.
pub fn generate_profile_sample(n_t: usize, profile: &ClientProfile, rng: &mut Rng) -> Result<Sample, ChannelError> {
    let (r0, r1) = profile.rho_subinterval;
    let (s0, s1) = profile.snr_subinterval;
    let rho = rng.uniform(r0, r1);
    let snr_db = rng.uniform(s0, s1);
    let n_r = rng.uniform_int(profile.n_r_range.0, profile.n_r_range.1);
    generate_sample(n_t, n_r, rho, snr_db, rng)
}

pub fn generate_client_dataset(
    n_t: usize,
    profile: &ClientProfile,
    count: usize,
    rng: &mut Rng,
) -> Result<Dataset, ChannelError> {
    if count == 0 {
        return Err(ChannelError::EmptyDataset);
    }
    let samples = (0..count)
        .map(|_| generate_profile_sample(n_t, profile, rng))
        .collect::<Result<_, _>>()?;
    Ok(Dataset { samples, provenance: Provenance::Client(profile.clone()) })
}

/// Shuffled concatenation of client datasets.
pub fn pool(datasets: &[Dataset], rng: &mut Rng) -> Dataset {
    let mut samples: Vec<Sample> = datasets.iter().flat_map(|d| d.samples.iter().cloned()).collect();
    rng.shuffle(&mut samples);
    Dataset { samples, provenance: Provenance::Pooled }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlation_examples() {
        assert_eq!(correlation_matrix(3, 0.0).unwrap(), Tensor::identity(3));
        assert_eq!(
            correlation_matrix(2, 0.5).unwrap(),
            Tensor::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]])
        );
        let r = correlation_matrix(3, 0.5).unwrap();
        assert_eq!(r.get(0, 2), 0.5f64.powi(4));
        assert!(matches!(correlation_matrix(2, 1.0), Err(ChannelError::InvalidRho(_))));
        assert!(matches!(correlation_matrix(2, -0.1), Err(ChannelError::InvalidRho(_))));
    }

    #[test]
    fn sqrt_examples() {
        let s = matrix_sqrt(&Tensor::identity(3)).unwrap();
        assert!(s.max_abs_diff(&Tensor::identity(3)) < 1e-14);
        let s = matrix_sqrt(&Tensor::diag(&[4.0, 9.0])).unwrap();
        assert!(s.max_abs_diff(&Tensor::diag(&[2.0, 3.0])) < 1e-14);
        let asym = Tensor::from_rows(&[vec![1.0, 0.2], vec![0.0, 1.0]]);
        assert!(matches!(matrix_sqrt(&asym), Err(ChannelError::NotSymmetric(_))));
    }

    #[test]
    fn realify_examples() {
        let one = CMatrix { rows: 1, cols: 1, data: vec![Complex64::new(1.0, 0.0)] };
        assert_eq!(realify(&one), Tensor::identity(2));
        let i = CMatrix { rows: 1, cols: 1, data: vec![Complex64::new(0.0, 1.0)] };
        assert_eq!(realify(&i), Tensor::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]));
    }

    #[test]
    fn qpsk_examples() {
        let x = qpsk_modulate(&[1, 0]);
        assert_eq!(x, vec![FRAC_1_SQRT_2, -FRAC_1_SQRT_2]);
        for bits in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            assert_eq!(qpsk_demodulate(&qpsk_modulate(&bits)), bits.to_vec());
        }
        let perturbed: Vec<f64> = x.iter().map(|v| v + 0.09).collect();
        assert_eq!(qpsk_demodulate(&perturbed), vec![1, 0]);
    }

    #[test]
    fn snr_examples() {
        assert!((snr_to_sigma2(0.0, 16, 16) - 1.0).abs() < 1e-15);
        // 16 / (32 · 10) = 0.05
        assert!((snr_to_sigma2(10.0, 16, 32) - 0.05).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for snr in (-10..60).step_by(5) {
            let s = snr_to_sigma2(snr as f64, 4, 8);
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn noiseless_sample_is_exact() {
        let mut rng = Rng::new(3);
        let s = generate_sample_with_sigma2(2, 3, 0.4, f64::INFINITY, 0.0, &mut rng).unwrap();
        let hx = s.h.matmul(&Tensor::vector(s.x.clone()));
        assert_eq!(hx.data(), s.y.as_slice());
        assert_eq!(s.h.shape(), [6, 4]);
    }

    #[test]
    fn channel_is_deterministic() {
        let a = generate_channel(3, 4, 0.5, &mut Rng::new(11)).unwrap();
        let b = generate_channel(3, 4, 0.5, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn profile_draws_stay_inside() {
        let cfg = SystemConfig::default();
        let mut rng = Rng::new(2);
        for id in 0..50 {
            let p = ClientProfile::draw(&cfg, id, &mut rng);
            assert!(p.rho_subinterval.0 >= 0.0 && p.rho_subinterval.1 <= 0.9 + 1e-12);
            assert!((p.rho_subinterval.1 - p.rho_subinterval.0 - 0.2).abs() < 1e-12);
            assert!(p.snr_subinterval.0 >= -5.0 && p.snr_subinterval.1 <= 15.0 + 1e-12);
        }
        let p = ClientProfile { client_id: 0, rho_subinterval: (0.3, 0.5), snr_subinterval: (0.0, 5.0), n_r_range: (4, 6) };
        let ds = generate_client_dataset(2, &p, 200, &mut rng).unwrap();
        assert!(ds.samples.iter().all(|s| (0.3..=0.5).contains(&s.rho)));
        assert!(ds.samples.iter().all(|s| (4..=6).contains(&s.n_r)));
    }

    #[test]
    fn pooling_concatenates_and_is_deterministic() {
        let cfg = SystemConfig { n_t: 2, n_r_range: (2, 3), ..SystemConfig::default() };
        let mut rng = Rng::new(8);
        let p = ClientProfile::global(&cfg);
        let a = generate_client_dataset(2, &p, 3, &mut rng).unwrap();
        let b = generate_client_dataset(2, &p, 4, &mut rng).unwrap();
        let pooled = pool(&[a.clone(), b.clone()], &mut Rng::new(1));
        assert_eq!(pooled.len(), 7);
        for s in a.samples.iter().chain(&b.samples) {
            assert!(pooled.samples.contains(s));
        }
        assert_eq!(pooled, pool(&[a, b], &mut Rng::new(1)));
    }

    #[test]
    fn config_validation() {
        assert!(SystemConfig::default().validate().is_ok());
        let bad = SystemConfig { n_r_range: (2, 8), ..SystemConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SystemConfig { rho_range: (0.0, 1.0), ..SystemConfig::default() };
        assert!(bad.validate().is_err());
    }
}
