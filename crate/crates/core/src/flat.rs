//! Flat-fading receiver: closed-form preamble estimation with the identity
//! codebook, multi-user symbol LMMSE, and offset refinement from the
//! constellation of the coding part.

use num_complex::Complex64;

use crate::channel::phase_rotation_on;
use crate::config::{CodebookKind, SystemConfig};
use crate::gbcr::{cancel, retrieve_channel, DecodingGraph, GraphNode, OffsetGrid, RecoveredPath};
use crate::{CMatrix, Error, Result};

const GRAM_FLOOR: f64 = 1e-9;

/// Amplitude of the identity codebook columns.
pub fn codeword_amplitude(cfg: &SystemConfig) -> f64 {
    if cfg.identity_scaled {
        (cfg.n_sub() as f64).sqrt()
    } else {
        1.0
    }
}

/// `X^t = c Y^t / (c^2 + s2)`.
pub fn lmmse_preamble(y: &CMatrix, cfg: &SystemConfig, noise_var: f64) -> Result<CMatrix> {
    if cfg.codebook_kind != CodebookKind::Identity {
        return Err(Error::Config("flat receiver needs the identity codebook".into()));
    }
    let c = codeword_amplitude(cfg);
    Ok(y * Complex64::new(c / (c * c + noise_var), 0.0))
}

/// Per-entry variance of the noise part of one estimated row.
pub fn block_error_variance(cfg: &SystemConfig, noise_var: f64) -> f64 {
    let c = codeword_amplitude(cfg);
    c * c * noise_var / (c * c + noise_var).powi(2)
}

/// Factor mapping a derotated preamble row back to the channel seen by the
/// unit-amplitude coding symbols.
pub fn debias_factor(cfg: &SystemConfig, noise_var: f64) -> f64 {
    let c = codeword_amplitude(cfg);
    (c * c + noise_var) / (c * c)
}

/// Rows whose energy exceeds `factor` times the expected noise-row energy.
pub fn detect_rows(x: &CMatrix, cfg: &SystemConfig, noise_var: f64) -> Vec<usize> {
    let thr = cfg.support_threshold_factor * x.ncols() as f64 * block_error_variance(cfg, noise_var);
    (0..x.nrows())
        .filter(|&r| x.row(r).iter().map(|z| z.norm_sqr()).sum::<f64>() > thr)
        .collect()
}

/// One `1 x M` node per detected row.
pub fn stage_nodes(x: &CMatrix, rows: &[usize], err_var: f64) -> Vec<GraphNode> {
    rows.iter()
        .map(|&r| GraphNode {
            index: r + 1,
            block: x.rows(r, 1).into_owned(),
            err_var,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SymbolEstimate {
    /// `K x L_c`.
    pub s: CMatrix,
    /// Real effective gain `b_k` of each user's estimate.
    pub gain: Vec<f64>,
}

/// `S = H^* (H^T H^* + s2 I_M)^{-1} Y_c^T` with the channels as rows of
/// `h` (`K x M`).
pub fn lmmse_symbols(yc: &CMatrix, h: &CMatrix, noise_var: f64) -> Result<SymbolEstimate> {
    if h.ncols() != yc.ncols() {
        return Err(Error::Shape(format!("{} antennas in channels, {} in observation", h.ncols(), yc.ncols())));
    }
    let m = h.ncols();
    let mut gram = h.transpose() * h.conjugate();
    for i in 0..m {
        gram[(i, i)] += noise_var.max(GRAM_FLOOR);
    }
    let chol = nalgebra::linalg::Cholesky::new(gram)
        .ok_or_else(|| Error::IllConditioned("symbol Gram matrix not positive definite".into()))?;
    let w = h.conjugate() * chol.inverse();
    let s = &w * yc.transpose();
    let bias = &w * h.transpose();
    let gain = (0..h.nrows()).map(|k| bias[(k, k)].re).collect();
    Ok(SymbolEstimate { s, gain })
}

/// Coding-part rotation `q^t_s` for each symbol in transmit order, symbol
/// major: position `l` is subcarrier `l mod S_c` of symbol `T_p + 1 + l / S_c`.
pub fn coding_rotation(cfg: &SystemConfig, to: usize, eps: f64) -> Vec<Complex64> {
    let tp = cfg.preamble_slots;
    let mut out = Vec::with_capacity(cfg.coding_len());
    for t in 0..cfg.coding_slots {
        out.extend(phase_rotation_on(to, eps, tp + 1 + t, &cfg.coding_occupied, cfg));
    }
    out
}

/// `rho = sum_{Re > 0} s - sum_{Re < 0} s`.
pub fn residual_rotation_rho(s: &[Complex64]) -> Complex64 {
    s.iter().fold(Complex64::new(0.0, 0.0), |acc, z| {
        if z.re > 0.0 {
            acc + z
        } else if z.re < 0.0 {
            acc - z
        } else {
            acc
        }
    })
}

/// Derotates one user's symbol estimates and keeps the codeword positions
/// of its interleaver, in codeword order.
pub fn derotate_codeword(row: &[Complex64], rot: &[Complex64], pi: &[usize], n: usize) -> Vec<Complex64> {
    pi[..n].iter().map(|&p| row[p] * rot[p].conj()).collect()
}

/// Grid index among `candidates` maximising `|rho|`; ties keep the earlier,
/// lower-weight candidate.
pub fn refine_offsets(
    candidates: &[(usize, f64)],
    row: &[Complex64],
    pi: &[usize],
    n: usize,
    grid: &OffsetGrid,
    cfg: &SystemConfig,
) -> usize {
    let mut best = (candidates[0].0, f64::NEG_INFINITY);
    for &(k, _) in candidates {
        let (to, eps) = grid.pair(k);
        let soft = derotate_codeword(row, &coding_rotation(cfg, to, eps), pi, n);
        let r = residual_rotation_rho(&soft).norm();
        if r > best.1 {
            best = (k, r);
        }
    }
    best.0
}

/// Replays channel retrieval and SIC on the original graph in recovery
/// order with the offsets fixed to `grid_index` per user.
pub fn reestimate_channels(original: &DecodingGraph, users: &[RecoveredPath], grid_index: &[usize]) -> Vec<CMatrix> {
    let mut g = original.clone();
    users
        .iter()
        .zip(grid_index)
        .map(|(u, &k)| {
            let h = retrieve_channel(&g, u.nodes(), &u.collided, k).expect("reference node is non-collided");
            cancel(&mut g, u.nodes(), &u.collided, &h, k);
            h
        })
        .collect()
}
