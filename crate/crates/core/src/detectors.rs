//! Classical detectors, the bit-error function, and Monte-Carlo BER evaluation.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::Sample;
use crate::flops;
use crate::numerics::{NumericsError, Tensor};

/// Largest N_t accepted by the exhaustive ML search (4^8 candidates).
pub const ML_MAX_NT: usize = 8;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("exhaustive ML search refused for N_t = {0} (limit {ML_MAX_NT})")]
    TooLarge(usize),
    #[error("condition point {0} has no samples")]
    EmptyCondition(f64),
    #[error("{0}")]
    Other(String),
}

/// Nearest point of `{±1/√2}` per component; zero maps to `+1/√2`.
pub fn quantize(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v >= 0.0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 }).collect()
}

/// Hamming distance between hard decisions of `estimate` and `truth`.
pub fn bit_errors(estimate: &[f64], truth: &[f64]) -> usize {
    assert_eq!(estimate.len(), truth.len(), "shape mismatch in bit_errors");
    estimate.iter().zip(truth).filter(|(a, b)| (**a >= 0.0) != (**b >= 0.0)).count()
}

/// Unquantized LMMSE output `(HᵀH + σ_n² I)⁻¹ Hᵀ y`.
pub fn lmmse_soft(h: &Tensor, y: &[f64], sigma2: f64) -> Result<Vec<f64>, DetectorError> {
    let n = h.cols();
    let gram = h.t_matmul(h);
    let reg = gram.add(&Tensor::identity(n).scale(sigma2));
    let hty = h.t_matmul(&Tensor::vector(y.to_vec()));
    Ok(reg.inverse()?.matmul(&hty).into_data())
}

pub fn lmmse_detect(h: &Tensor, y: &[f64], sigma2: f64) -> Result<Vec<f64>, DetectorError> {
    Ok(quantize(&lmmse_soft(h, y, sigma2)?))
}

/// Exhaustive search for `argmin ‖y − Hx‖²` over the QPSK lattice.
pub fn ml_detect(h: &Tensor, y: &[f64]) -> Result<Vec<f64>, DetectorError> {
    let n = h.cols();
    if n / 2 > ML_MAX_NT {
        return Err(DetectorError::TooLarge(n / 2));
    }
    // ‖y − Hx‖² = yᵀy − 2xᵀHᵀy + xᵀGx; the constant is dropped.
    let gram = h.t_matmul(h);
    let hty = h.t_matmul(&Tensor::vector(y.to_vec())).into_data();
    let mut best = (f64::INFINITY, 0u32);
    let mut x = vec![0.0; n];
    for pattern in 0..(1u32 << n) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = if pattern >> i & 1 == 1 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
        }
        let mut cost = 0.0;
        for i in 0..n {
            let gx: f64 = (0..n).map(|j| gram.get(i, j) * x[j]).sum();
            cost += x[i] * (gx - 2.0 * hty[i]);
        }
        if cost < best.0 {
            best = (cost, pattern);
        }
    }
    Ok((0..n)
        .map(|i| if best.1 >> i & 1 == 1 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 })
        .collect())
}

/// One detector output with optional routing/cost metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub estimate: Vec<f64>,
    /// Branch executed by a routed detector (0 = IDetNet, 1 = OAMPNet).
    pub branch: Option<u8>,
    pub flops: u64,
}

type DetectFn = dyn Fn(&Sample) -> Result<Detection, DetectorError> + Send + Sync;

/// A named detector usable by the BER harness.
#[derive(Clone)]
pub struct DetectorHandle {
    pub name: String,
    detect: Arc<DetectFn>,
}

impl fmt::Debug for DetectorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DetectorHandle").field("name", &self.name).finish()
    }
}

impl DetectorHandle {
    pub fn new(
        name: impl Into<String>,
        detect: impl Fn(&Sample) -> Result<Detection, DetectorError> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), detect: Arc::new(detect) }
    }

    pub fn detect(&self, sample: &Sample) -> Result<Detection, DetectorError> {
        let d = (self.detect)(sample)?;
        assert_eq!(d.estimate.len(), sample.x.len(), "detector {} returned wrong length", self.name);
        Ok(d)
    }

    pub fn lmmse() -> Self {
        Self::new("LMMSE", |s| {
            Ok(Detection {
                estimate: lmmse_detect(&s.h, &s.y, s.sigma2)?,
                branch: None,
                flops: flops::lmmse(s.n_t(), s.n_r),
            })
        })
    }

    pub fn ml() -> Self {
        Self::new("ML", |s| {
            Ok(Detection {
                estimate: ml_detect(&s.h, &s.y)?,
                branch: None,
                flops: flops::ml(s.n_t(), s.n_r),
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionAxis {
    SnrDb,
    NR,
    Rho,
    /// A single pooled point over mixed conditions.
    Mixed,
}

impl fmt::Display for ConditionAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConditionAxis::SnrDb => "snr_db",
            ConditionAxis::NR => "n_r",
            ConditionAxis::Rho => "rho",
            ConditionAxis::Mixed => "mixed",
        };
        f.write_str(s)
    }
}

/// Test samples for one value of the swept condition.
#[derive(Debug, Clone)]
pub struct ConditionPoint {
    pub value: f64,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub condition: f64,
    pub errors: u64,
    pub bits: u64,
    pub ber: f64,
    pub samples: u64,
    /// Per-branch selection counts for routed detectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_counts: Option<[u64; 2]>,
    pub avg_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerReport {
    pub detector: String,
    pub axis: ConditionAxis,
    pub points: Vec<BerPoint>,
    pub samples: u64,
    pub seed: u64,
}

/// Aggregates bit errors of `detector` over every condition point.
pub fn ber_evaluate(
    detector: &DetectorHandle,
    axis: ConditionAxis,
    points: &[ConditionPoint],
    seed: u64,
) -> Result<BerReport, DetectorError> {
    let mut out = Vec::with_capacity(points.len());
    let mut total = 0u64;
    for point in points {
        if point.samples.is_empty() {
            return Err(DetectorError::EmptyCondition(point.value));
        }
        let results: Vec<(usize, usize, Option<u8>, u64)> = point
            .samples
            .par_iter()
            .map(|s| {
                let d = detector.detect(s)?;
                Ok((bit_errors(&d.estimate, &s.x), s.x.len(), d.branch, d.flops))
            })
            .collect::<Result<_, DetectorError>>()?;
        let errors: u64 = results.iter().map(|r| r.0 as u64).sum();
        let bits: u64 = results.iter().map(|r| r.1 as u64).sum();
        let flops: u64 = results.iter().map(|r| r.3).sum();
        let branch_counts = results.iter().any(|r| r.2.is_some()).then(|| {
            let ones = results.iter().filter(|r| r.2 == Some(1)).count() as u64;
            [results.len() as u64 - ones, ones]
        });
        let n = results.len() as u64;
        total += n;
        out.push(BerPoint {
            condition: point.value,
            errors,
            bits,
            ber: errors as f64 / bits as f64,
            samples: n,
            branch_counts,
            avg_flops: flops as f64 / n as f64,
        });
    }
    Ok(BerReport { detector: detector.name.clone(), axis, points: out, samples: total, seed })
}

impl BerReport {
    /// Pooled BER over every point.
    pub fn overall_ber(&self) -> f64 {
        let e: u64 = self.points.iter().map(|p| p.errors).sum();
        let b: u64 = self.points.iter().map(|p| p.bits).sum();
        e as f64 / b as f64
    }
}

/// Writes one row per detector and condition. `branch1_fraction` is empty
/// for detectors without routing.
pub fn write_ber_csv<W: Write>(reports: &[BerReport], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["detector", "axis", "condition", "errors", "bits", "ber", "samples", "avg_flops", "branch1_fraction"])?;
    for r in reports {
        for p in &r.points {
            let frac = p.branch_counts.map_or(String::new(), |c| (c[1] as f64 / p.samples as f64).to_string());
            w.write_record([
                r.detector.clone(),
                r.axis.to_string(),
                p.condition.to_string(),
                p.errors.to_string(),
                p.bits.to_string(),
                p.ber.to_string(),
                p.samples.to_string(),
                p.avg_flops.to_string(),
                frac,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_sample, generate_sample_with_sigma2};
    use crate::numerics::Rng;

    const A: f64 = FRAC_1_SQRT_2;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.9, -0.1]), vec![A, -A]);
        assert_eq!(quantize(&[A, -A, A]), vec![A, -A, A]);
        assert_eq!(quantize(&[0.0, 0.0]), vec![A, A]);
    }

    #[test]
    fn bit_error_examples() {
        let x = vec![A, -A, A, A, -A, -A, A, -A];
        assert_eq!(bit_errors(&x, &x), 0);
        let mut flipped = x.clone();
        flipped[3] = -0.2;
        assert_eq!(bit_errors(&flipped, &x), 1);
    }

    #[test]
    fn bit_errors_match_scaled_l1() {
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let a: Vec<f64> = (0..8).map(|_| rng.gaussian(0.0, 1.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.gaussian(0.0, 1.0)).collect();
            let l1: f64 = quantize(&a).iter().zip(quantize(&b)).map(|(p, q)| (p - q).abs()).sum();
            assert!((l1 - std::f64::consts::SQRT_2 * bit_errors(&a, &b) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn lmmse_identity_channel_noiseless() {
        let h = Tensor::identity(4);
        let y = vec![0.3, -0.2, 0.9, -1.1];
        assert_eq!(lmmse_detect(&h, &y, 0.0).unwrap(), quantize(&y));
        let h = Tensor::from_rows(&[vec![2.0]]);
        assert_eq!(lmmse_detect(&h, &[-0.6], 0.0).unwrap(), quantize(&[-0.3]));
    }

    #[test]
    fn lmmse_singular_without_noise_fails() {
        let h = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(lmmse_detect(&h, &[0.1, 0.1], 0.0).is_err());
    }

    #[test]
    fn lmmse_matches_straight_line_formula() {
        // independent route: normal equations solved with nalgebra's Cholesky
        let mut rng = Rng::new(21);
        let s = generate_sample(2, 2, 0.3, 5.0, &mut rng).unwrap();
        let hm = s.h.to_nalgebra();
        let a = hm.transpose() * &hm + nalgebra::DMatrix::identity(4, 4) * s.sigma2;
        let b = hm.transpose() * nalgebra::DVector::from_vec(s.y.clone());
        let expect = a.cholesky().unwrap().solve(&b);
        let got = lmmse_soft(&s.h, &s.y, s.sigma2).unwrap();
        for i in 0..4 {
            assert!((got[i] - expect[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn ml_noise_free_recovers_truth() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let s = generate_sample_with_sigma2(3, 4, 0.2, 0.0, 0.0, &mut rng).unwrap();
            assert_eq!(ml_detect(&s.h, &s.y).unwrap(), s.x);
        }
    }

    #[test]
    fn ml_single_antenna_orthogonal_is_sign_decision() {
        // N_t = 1 realified channel is a scaled rotation, hence orthogonal
        let h = Tensor::from_rows(&[vec![0.6, -0.8], vec![0.8, 0.6]]);
        let y = vec![0.3, -0.5];
        let back = h.t_matmul(&Tensor::vector(y.clone())).into_data();
        assert_eq!(ml_detect(&h, &y).unwrap(), quantize(&back));
    }

    #[test]
    fn ml_refuses_large_systems() {
        let h = Tensor::zeros(18, 18);
        assert!(matches!(ml_detect(&h, &[0.0; 18]), Err(DetectorError::TooLarge(9))));
    }

    #[test]
    fn empty_condition_is_error() {
        let points = vec![ConditionPoint { value: 1.0, samples: vec![] }];
        assert!(matches!(
            ber_evaluate(&DetectorHandle::lmmse(), ConditionAxis::SnrDb, &points, 0),
            Err(DetectorError::EmptyCondition(_))
        ));
    }

    #[test]
    fn csv_has_one_row_per_point() {
        let r = BerReport {
            detector: "X".into(),
            axis: ConditionAxis::SnrDb,
            points: vec![
                BerPoint { condition: 0.0, errors: 1, bits: 10, ber: 0.1, samples: 5, branch_counts: None, avg_flops: 1.0 },
                BerPoint { condition: 5.0, errors: 0, bits: 10, ber: 0.0, samples: 5, branch_counts: None, avg_flops: 1.0 },
            ],
            samples: 10,
            seed: 0,
        };
        let mut buf = Vec::new();
        write_ber_csv(&[r.clone(), r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("detector,axis,condition,errors,bits,ber,samples,avg_flops,branch1_fraction"));
    }
}
