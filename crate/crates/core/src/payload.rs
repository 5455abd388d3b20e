//! Coding-part decoding per recovered user: rotation compensation,
//! de-interleaving, LLRs, LDPC decoding and message assembly.

use std::collections::BTreeSet;

use num_complex::Complex64;

use crate::config::SystemConfig;
use crate::encoder::PayloadEncoding;
use crate::flat::{coding_rotation, derotate_codeword};
use crate::Result;

const GAIN_CEIL: f64 = 1.0 - 1e-9;

/// Derotated soft BPSK symbols in codeword order, pad positions dropped.
pub fn compensate_and_deinterleave(
    row: &[Complex64],
    to: usize,
    eps: f64,
    pi: &[usize],
    pe: &PayloadEncoding,
    cfg: &SystemConfig,
) -> Vec<Complex64> {
    derotate_codeword(row, &coding_rotation(cfg, to, eps), pi, pe.code.n)
}

/// BPSK LLRs of an LMMSE estimate `b s + w` with `Var(w) = b (1 - b)`:
/// `4 Re(s) / (1 - b)`.
pub fn bpsk_llrs(soft: &[Complex64], gain: f64) -> Vec<f64> {
    let b = gain.clamp(0.0, GAIN_CEIL);
    soft.iter().map(|z| 4.0 * z.re / (1.0 - b)).collect()
}

#[derive(Debug, Clone)]
pub struct DecodedPayload {
    pub bits: Vec<u8>,
    pub converged: bool,
}

pub fn ldpc_decode(llr: &[f64], pe: &PayloadEncoding, max_iter: usize) -> Result<DecodedPayload> {
    let out = pe.code.decode(llr, max_iter)?;
    Ok(DecodedPayload {
        bits: pe.code.extract_info(&out.codeword, pe.info_len),
        converged: out.converged,
    })
}

/// Unique full messages `preamble || payload` of the users whose decoder
/// converged.
pub fn assemble_messages<'a>(
    parts: impl IntoIterator<Item = (&'a [u8], &'a DecodedPayload)>,
) -> BTreeSet<Vec<u8>> {
    parts
        .into_iter()
        .filter(|(_, d)| d.converged)
        .map(|(p, d)| {
            let mut m = p.to_vec();
            m.extend_from_slice(&d.bits);
            m
        })
        .collect()
}
