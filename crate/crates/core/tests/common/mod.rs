#![allow(dead_code)]

use ddnet_core::channel::Sample;
use ddnet_core::detectors::{bit_errors, DetectorHandle};

/// Central finite differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Bit errors per sample.
pub fn errors_per_sample(det: &DetectorHandle, samples: &[Sample]) -> Vec<f64> {
    samples
        .iter()
        .map(|s| bit_errors(&det.detect(s).expect("detection").estimate, &s.x) as f64)
        .collect()
}

pub fn ber(errors: &[f64], bits_per_sample: usize) -> f64 {
    errors.iter().sum::<f64>() / (errors.len() * bits_per_sample) as f64
}

/// Paired z statistic of `mean(a − b)`; negative means `a` makes fewer errors.
pub fn paired_z(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
    }
    mean / (var / n).sqrt()
}

/// Prints the criterion line and fails the test on FAIL.
pub fn verdict(id: &str, pass: bool, detail: String) {
    println!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}
