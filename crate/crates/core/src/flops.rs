//! Multiplication and division counts per detected sample.
//!
//! Matrix inversion of a `k x k` matrix is charged `2k³/3`. A dense
//! `m x n` layer costs `m·n`. Additions and nonlinearities are free.

use crate::idetnet::IDetNetConfig;
use crate::oampnet::OampNetConfig;

/// Width of the RouteNet hidden layer.
pub const ROUTE_HIDDEN: usize = 128;

pub fn matmul(m: usize, k: usize, n: usize) -> u64 {
    (m * k * n) as u64
}

pub fn dense(out: usize, inp: usize) -> u64 {
    (out * inp) as u64
}

pub fn inverse(k: usize) -> u64 {
    let k = k as u64;
    (2 * k * k * k).div_ceil(3)
}

fn dims(n_t: usize, n_r: usize) -> (usize, usize) {
    (2 * n_t, 2 * n_r)
}

/// `HᵀH`, `Hᵀy`, one `n x n` inverse and one mat-vec.
pub fn lmmse(n_t: usize, n_r: usize) -> u64 {
    let (n, m) = dims(n_t, n_r);
    matmul(n, m, n) + matmul(n, m, 1) + inverse(n) + matmul(n, n, 1)
}

/// Gram precomputation plus `xᵀGx − 2xᵀHᵀy` for all `4^{N_t}` candidates.
pub fn ml(n_t: usize, n_r: usize) -> u64 {
    let (n, m) = dims(n_t, n_r);
    let per_candidate = (n * n + 2 * n + 1) as u64;
    matmul(n, m, n) + matmul(n, m, 1) + (1u64 << (2 * n_t)) * per_candidate
}

pub fn idetnet(config: &IDetNetConfig, n_r: usize) -> u64 {
    let (n, m) = dims(config.n_t, n_r);
    let pre = matmul(n, m, n) + matmul(n, m, 1);
    let layer = matmul(n, n, 1)
        + dense(config.h1, config.input_width())
        + dense(config.h2, config.h1)
        + dense(n, config.h1)
        + 2 * n as u64
        + 2 * (config.h2 + n) as u64;
    pre + config.k_id as u64 * layer
}

pub fn oampnet(config: &OampNetConfig, n_r: usize) -> u64 {
    let (n, m) = dims(config.n_t, n_r);
    let (n64, m64) = (n as u64, m as u64);
    let pre = matmul(m, n, m);
    let layer = matmul(m, n, 1) + m64 + 1 // residual, v²
        + m64 * m64 + inverse(m) // v²HHᵀ + R_n, inverse
        + matmul(n, m, m) + n64 * m64 // W
        + matmul(n, m, n) + n64 * m64 + 1 // tr(WH), A
        + matmul(n, m, 1) + n64 // z
        + matmul(n, m, n) + n64 * n64 // C
        + n64 * n64 + n64 * m64 + 4 // τ²
        + 4 * n64; // denoiser and γ3, γ4
    pre + config.k_oa as u64 * layer
}

/// Feature normalization, `HᵀH` and the two dense layers with activations.
pub fn routenet(n_t: usize, n_r: usize) -> u64 {
    let (n, m) = dims(n_t, n_r);
    let d = n * n + n;
    matmul(n, m, n) + (n * n + 2) as u64 + dense(ROUTE_HIDDEN, d) + ROUTE_HIDDEN as u64 + dense(2, ROUTE_HIDDEN) + 2
}

/// RouteNet plus the branch it selected (0 = IDetNet, 1 = OAMPNet).
pub fn ddnet(id: &IDetNetConfig, oa: &OampNetConfig, n_r: usize, branch: u8) -> u64 {
    let route = routenet(id.n_t, n_r);
    match branch {
        0 => route + idetnet(id, n_r),
        _ => route + oampnet(oa, n_r),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlopDetector {
    Lmmse,
    Ml,
    IDetNet(IDetNetConfig),
    OampNet(OampNetConfig),
    DdNet { idetnet: IDetNetConfig, oampnet: OampNetConfig, branch: u8 },
}

pub fn flop_count(detector: &FlopDetector, n_t: usize, n_r: usize) -> u64 {
    match detector {
        FlopDetector::Lmmse => lmmse(n_t, n_r),
        FlopDetector::Ml => ml(n_t, n_r),
        FlopDetector::IDetNet(c) => {
            assert_eq!(c.n_t, n_t, "config built for another N_t");
            idetnet(c, n_r)
        }
        FlopDetector::OampNet(c) => {
            assert_eq!(c.n_t, n_t, "config built for another N_t");
            oampnet(c, n_r)
        }
        FlopDetector::DdNet { idetnet: i, oampnet: o, branch } => {
            assert_eq!(i.n_t, n_t, "config built for another N_t");
            ddnet(i, o, n_r, *branch)
        }
    }
}
