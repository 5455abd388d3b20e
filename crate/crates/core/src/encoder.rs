//! Tree code, preamble codebook, interleaver and coded payload.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CodebookKind, SystemConfig};
use crate::ldpc::LdpcCode;
use crate::numerics::{complex_gaussian, hash_words};
use crate::{CMatrix, Error, Result};

/// Outer tree code across preamble slots.
#[derive(Debug, Clone)]
pub struct TreeCode {
    pub subblock_len: usize,
    pub parity_alloc: Vec<usize>,
    pub info_bits: Vec<usize>,
    /// `g[t][s]` is the `p_t x b_s` matrix applied to stage `s < t`,
    /// stored as one bit mask per row (MSB = first column).
    g: Vec<Vec<Vec<u32>>>,
}

/// Result of splicing per-stage detections into full preambles.
#[derive(Debug, Clone, Default)]
pub struct TreeDecodeResult {
    /// One codeword index (1-based) per stage.
    pub paths: Vec<Vec<usize>>,
    /// Candidate (partial path, node) pairs examined at stages 2..T_p.
    pub parity_checks: u64,
    /// Number of stage-1 roots.
    pub roots: usize,
    /// Surviving partial paths after each stage.
    pub survivors: Vec<usize>,
}

fn parity32(x: u32) -> u32 {
    x.count_ones() & 1
}

impl TreeCode {
    pub fn new(subblock_len: usize, parity_alloc: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(subblock_len, parity_alloc, |_, _, _, _| rng.gen_range(0..2u8))
    }

    /// Builds the parity matrices entrywise: `f(t, s, row, col)` with
    /// 0-based stage indices.
    pub fn from_fn(
        subblock_len: usize,
        parity_alloc: &[usize],
        mut f: impl FnMut(usize, usize, usize, usize) -> u8,
    ) -> Result<Self> {
        if subblock_len == 0 || subblock_len > 31 {
            return Err(Error::Config("subblock_len must lie in [1, 31]".into()));
        }
        if parity_alloc.first().copied().unwrap_or(1) != 0 || parity_alloc.iter().any(|&p| p > subblock_len) {
            return Err(Error::Config("invalid parity allocation".into()));
        }
        let info_bits: Vec<usize> = parity_alloc.iter().map(|&p| subblock_len - p).collect();
        let g = (0..parity_alloc.len())
            .map(|t| {
                (0..t)
                    .map(|s| {
                        (0..parity_alloc[t])
                            .map(|r| {
                                (0..info_bits[s]).fold(0u32, |m, c| {
                                    (m << 1) | u32::from(f(t, s, r, c) & 1)
                                })
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            subblock_len,
            parity_alloc: parity_alloc.to_vec(),
            info_bits,
            g,
        })
    }

    pub fn n_stages(&self) -> usize {
        self.parity_alloc.len()
    }

    pub fn preamble_bits(&self) -> usize {
        self.info_bits.iter().sum()
    }

    /// `r_t` as a `p_t`-bit word given the info words of stages `< t`.
    fn parity_word(&self, t: usize, info: &[u32]) -> u32 {
        self.g[t]
            .iter()
            .zip(info)
            .fold(vec![0u32; self.parity_alloc[t]], |mut acc, (rows, &v)| {
                for (a, &row) in acc.iter_mut().zip(rows) {
                    *a ^= parity32(row & v);
                }
                acc
            })
            .into_iter()
            .fold(0u32, |w, b| (w << 1) | b)
    }

    /// Sub-block words (MSB first, `J` bits each).
    pub fn encode_words(&self, bits: &[u8]) -> Result<Vec<u32>> {
        if bits.len() != self.preamble_bits() {
            return Err(Error::Length {
                what: "preamble bits",
                expected: self.preamble_bits(),
                got: bits.len(),
            });
        }
        let mut info = Vec::with_capacity(self.n_stages());
        let mut pos = 0;
        for &b in &self.info_bits {
            info.push(bits[pos..pos + b].iter().fold(0u32, |w, &x| (w << 1) | u32::from(x & 1)));
            pos += b;
        }
        Ok((0..self.n_stages())
            .map(|t| (info[t] << self.parity_alloc[t]) | self.parity_word(t, &info[..t]))
            .collect())
    }

    /// Splits the preamble bits and appends tree parity per stage.
    pub fn split_and_tree_encode(&self, bits: &[u8]) -> Result<Vec<Vec<u8>>> {
        Ok(self
            .encode_words(bits)?
            .into_iter()
            .map(|w| word_to_bits(w, self.subblock_len))
            .collect())
    }

    /// Preamble bits carried by a node tuple (the info parts, concatenated).
    pub fn path_bits(&self, indices: &[usize]) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.preamble_bits());
        for (t, &d) in indices.iter().enumerate() {
            let w = (d as u32 - 1) >> self.parity_alloc[t];
            out.extend(word_to_bits(w, self.info_bits[t]));
        }
        out
    }

    /// Exhaustive stage-by-stage splicing. Each stage list is treated as a
    /// set of 1-based codeword indices.
    pub fn tree_decode(&self, stage_lists: &[Vec<usize>]) -> TreeDecodeResult {
        let mut res = TreeDecodeResult::default();
        if stage_lists.len() != self.n_stages() || stage_lists[0].is_empty() {
            return res;
        }
        let sets: Vec<Vec<usize>> = stage_lists
            .iter()
            .map(|l| {
                let mut v = l.clone();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        res.roots = sets[0].len();
        // (indices, info words)
        let mut partial: Vec<(Vec<usize>, Vec<u32>)> = sets[0]
            .iter()
            .map(|&d| (vec![d], vec![(d as u32 - 1) >> self.parity_alloc[0]]))
            .collect();
        res.survivors.push(partial.len());
        for (t, set) in sets.iter().enumerate().skip(1) {
            let p = self.parity_alloc[t];
            let mask = (1u32 << p) - 1;
            let mut next = Vec::new();
            for (idx, info) in &partial {
                let r = self.parity_word(t, info);
                res.parity_checks += set.len() as u64;
                for &d in set {
                    let w = d as u32 - 1;
                    if w & mask == r {
                        let mut i2 = idx.clone();
                        i2.push(d);
                        let mut v2 = info.clone();
                        v2.push(w >> p);
                        next.push((i2, v2));
                    }
                }
            }
            partial = next;
            res.survivors.push(partial.len());
        }
        res.paths = partial.into_iter().map(|(i, _)| i).collect();
        res
    }
}

pub fn word_to_bits(w: u32, len: usize) -> Vec<u8> {
    (0..len).rev().map(|i| ((w >> i) & 1) as u8).collect()
}

/// Binary-to-decimal plus one.
pub fn subblock_to_index(bits: &[u8]) -> usize {
    bits.iter().fold(0usize, |a, &b| (a << 1) | usize::from(b & 1)) + 1
}

pub fn index_to_subblock(index: usize, len: usize) -> Vec<u8> {
    word_to_bits((index - 1) as u32, len)
}

/// Preamble codebook with columns `a_n` of length `L_p`.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub kind: CodebookKind,
    /// `L_p x N`.
    pub columns: CMatrix,
    /// True for an identity codebook (sparse codeword placement).
    pub identity: bool,
    /// Nonzero entry value of an identity codebook.
    pub scale: f64,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn codeword(&self, index: usize) -> Vec<Complex64> {
        self.columns.column(index - 1).iter().copied().collect()
    }
}

pub fn build_codebook(cfg: &SystemConfig, seed: u64) -> Result<Codebook> {
    let lp = cfg.n_sub();
    let n = cfg.n_codewords();
    match cfg.codebook_kind {
        CodebookKind::Identity => {
            if n != lp {
                return Err(Error::Config(format!(
                    "identity codebook needs N = L_p, got N = {n}, L_p = {lp}"
                )));
            }
            let scale = if cfg.identity_scaled { (lp as f64).sqrt() } else { 1.0 };
            Ok(Codebook {
                kind: CodebookKind::Identity,
                columns: CMatrix::identity(lp, lp) * Complex64::new(scale, 0.0),
                identity: true,
                scale,
            })
        }
        CodebookKind::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = CMatrix::from_fn(lp, n, |_, _| complex_gaussian(&mut rng, 1.0));
            for mut col in a.column_iter_mut() {
                let e: f64 = col.iter().map(|z| z.norm_sqr()).sum();
                let s = (lp as f64 / e).sqrt();
                col.iter_mut().for_each(|z| *z *= s);
            }
            Ok(Codebook {
                kind: CodebookKind::Gaussian,
                columns: a,
                identity: false,
                scale: 1.0,
            })
        }
    }
}

/// 0-based permutation of `[0, L_c)` keyed by the public seed and the tuple
/// of selected indices. Symbol `i` of the padded stream is sent at slot
/// `pi[i]`.
pub fn derive_interleaver(indices: &[usize], len: usize, seed: u64) -> Vec<usize> {
    let mut key = vec![seed];
    key.extend(indices.iter().map(|&d| d as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&key));
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(&mut rng);
    p
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// LDPC code plus the payload sizes it is used with.
#[derive(Debug, Clone)]
pub struct PayloadEncoding {
    pub code: LdpcCode,
    pub info_len: usize,
    pub coded_len: usize,
}

impl PayloadEncoding {
    pub fn new(cfg: &SystemConfig) -> Result<Self> {
        let code = match &cfg.ldpc_alist {
            Some(path) => LdpcCode::from_alist(&std::fs::read_to_string(path)?)?,
            None => LdpcCode::regular(cfg.coding_bits, cfg.ldpc_seed)?,
        };
        if code.k() < cfg.coding_bits {
            return Err(Error::Config(format!(
                "LDPC dimension {} below coding_bits {}",
                code.k(),
                cfg.coding_bits
            )));
        }
        if code.n > cfg.coding_len() {
            return Err(Error::Config(format!(
                "LDPC length {} exceeds coding part length {}",
                code.n,
                cfg.coding_len()
            )));
        }
        Ok(Self {
            info_len: cfg.coding_bits,
            coded_len: cfg.coding_len(),
            code,
        })
    }

    pub fn pad_len(&self) -> usize {
        self.coded_len - self.code.n
    }
}

/// LDPC encode, BPSK map (0 -> +1), zero-pad at the tail, interleave.
pub fn encode_payload(bits: &[u8], pe: &PayloadEncoding, pi: &[usize]) -> Result<Vec<Complex64>> {
    if bits.len() != pe.info_len {
        return Err(Error::Length {
            what: "payload bits",
            expected: pe.info_len,
            got: bits.len(),
        });
    }
    if pi.len() != pe.coded_len {
        return Err(Error::Length {
            what: "interleaver",
            expected: pe.coded_len,
            got: pi.len(),
        });
    }
    let cw = pe.code.encode(bits)?;
    let mut out = vec![Complex64::new(0.0, 0.0); pe.coded_len];
    for (i, &b) in cw.iter().enumerate() {
        out[pi[i]] = Complex64::new(if b == 0 { 1.0 } else { -1.0 }, 0.0);
    }
    Ok(out)
}

/// Everything a user transmits.
#[derive(Debug, Clone)]
pub struct EncodedMessage {
    /// Codeword index per preamble slot (1-based).
    pub indices: Vec<usize>,
    pub interleaver: Vec<usize>,
    /// `L_c` coding-part symbols in transmit order, empty when the payload
    /// is not simulated.
    pub payload: Vec<Complex64>,
}

pub fn encode_message(
    bits: &[u8],
    cfg: &SystemConfig,
    tc: &TreeCode,
    pe: Option<&PayloadEncoding>,
) -> Result<EncodedMessage> {
    if bits.len() != cfg.msg_bits {
        return Err(Error::Length {
            what: "message bits",
            expected: cfg.msg_bits,
            got: bits.len(),
        });
    }
    let (pre, pay) = bits.split_at(cfg.preamble_bits);
    let indices: Vec<usize> = tc
        .encode_words(pre)?
        .into_iter()
        .map(|w| w as usize + 1)
        .collect();
    let interleaver = derive_interleaver(&indices, cfg.coding_len(), cfg.interleaver_seed);
    let payload = match pe {
        Some(pe) => encode_payload(pay, pe, &interleaver)?,
        None => Vec::new(),
    };
    Ok(EncodedMessage {
        indices,
        interleaver,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PresetKind;

    #[test]
    fn zero_bits_zero_subblocks() {
        let tc = TreeCode::new(7, &[0, 0, 7, 7], 5).unwrap();
        let sb = tc.split_and_tree_encode(&[0; 14]).unwrap();
        assert_eq!(sb.len(), 4);
        assert!(sb.iter().flatten().all(|&b| b == 0));
        assert_eq!(tc.info_bits, vec![7, 7, 0, 0]);
    }

    #[test]
    fn small_parity_example() {
        // G_{1,1} = [[1,0],[1,1]], v_{p,1} = [1,0] -> r_2 = [1,1]
        let g = [[1u8, 0], [1, 1]];
        let tc = TreeCode::from_fn(2, &[0, 2], |_, _, r, c| g[r][c]).unwrap();
        let sb = tc.split_and_tree_encode(&[1, 0]).unwrap();
        assert_eq!(sb, vec![vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn tree_code_is_linear() {
        let tc = TreeCode::new(7, &[0, 2, 5, 7], 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nb = tc.preamble_bits();
        for _ in 0..50 {
            let u: Vec<u8> = (0..nb).map(|_| rng.gen_range(0..2)).collect();
            let v: Vec<u8> = (0..nb).map(|_| rng.gen_range(0..2)).collect();
            let w: Vec<u8> = u.iter().zip(&v).map(|(a, b)| a ^ b).collect();
            let eu = tc.encode_words(&u).unwrap();
            let ev = tc.encode_words(&v).unwrap();
            let ew = tc.encode_words(&w).unwrap();
            for t in 0..4 {
                assert_eq!(eu[t] ^ ev[t], ew[t]);
            }
        }
    }

    #[test]
    fn index_mapping() {
        assert_eq!(subblock_to_index(&[0; 7]), 1);
        assert_eq!(subblock_to_index(&[1; 7]), 128);
        for i in 1..=128 {
            assert_eq!(subblock_to_index(&index_to_subblock(i, 7)), i);
        }
    }

    #[test]
    fn tree_decode_recovers_single_user() {
        let tc = TreeCode::new(7, &[0, 0, 7, 7], 3).unwrap();
        let bits: Vec<u8> = (0..14).map(|i| (i % 3 == 0) as u8).collect();
        let idx: Vec<usize> = tc.encode_words(&bits).unwrap().iter().map(|&w| w as usize + 1).collect();
        let lists: Vec<Vec<usize>> = idx.iter().map(|&d| vec![d]).collect();
        let res = tc.tree_decode(&lists);
        assert_eq!(res.paths, vec![idx.clone()]);
        assert_eq!(tc.path_bits(&idx), bits);
        assert_eq!(res.parity_checks, 3);
    }

    #[test]
    fn tree_decode_set_semantics() {
        let tc = TreeCode::new(7, &[0, 0, 7, 7], 3).unwrap();
        let a: Vec<u8> = vec![1; 14];
        let mut b = a.clone();
        b[0] = 0;
        let ia: Vec<usize> = tc.encode_words(&a).unwrap().iter().map(|&w| w as usize + 1).collect();
        let ib: Vec<usize> = tc.encode_words(&b).unwrap().iter().map(|&w| w as usize + 1).collect();
        // stage 2 identical for both users: a single shared node
        assert_eq!(ia[1], ib[1]);
        let lists: Vec<Vec<usize>> = (0..4).map(|t| vec![ia[t], ib[t]]).collect();
        let res = tc.tree_decode(&lists);
        assert!(res.paths.contains(&ia) && res.paths.contains(&ib));
        assert!(res.paths.iter().all(|p| p[1] == ia[1]));
    }

    #[test]
    fn codebooks() {
        let cfg = SystemConfig::preset(PresetKind::DeskFsf);
        let cb = build_codebook(&cfg, 4).unwrap();
        for c in cb.columns.column_iter() {
            let e: f64 = c.iter().map(|z| z.norm_sqr()).sum();
            assert!((e - 256.0).abs() < 1e-10);
        }
        let again = build_codebook(&cfg, 4).unwrap();
        assert_eq!(cb.columns, again.columns);

        let flat = SystemConfig::preset(PresetKind::Flat);
        let id = build_codebook(&flat, 0).unwrap();
        let gram = id.columns.adjoint() * &id.columns;
        assert_eq!(gram, CMatrix::identity(128, 128));

        let mut bad = flat.clone();
        bad.subblock_len = 6;
        assert!(build_codebook(&bad, 0).is_err());
    }

    #[test]
    fn interleaver_properties() {
        let p = derive_interleaver(&[3, 9, 1, 77], 2688, 42);
        assert_eq!(p, derive_interleaver(&[3, 9, 1, 77], 2688, 42));
        let mut s = p.clone();
        s.sort_unstable();
        assert_eq!(s, (0..2688).collect::<Vec<_>>());
        assert_ne!(p, derive_interleaver(&[3, 9, 1, 78], 2688, 42));
        let inv = invert_permutation(&p);
        assert!((0..2688).all(|i| inv[p[i]] == i));
    }

    #[test]
    fn payload_layout() {
        let cfg = SystemConfig::preset(PresetKind::Flat);
        let pe = PayloadEncoding::new(&cfg).unwrap();
        assert_eq!(pe.code.n, 172);
        assert_eq!(pe.pad_len(), 2516);
        let pi = derive_interleaver(&[1, 2, 3, 4], cfg.coding_len(), 0);
        let x = encode_payload(&[0; 86], &pe, &pi).unwrap();
        assert_eq!(x.iter().filter(|z| z.norm() == 0.0).count(), 2516);
        assert!(x.iter().all(|z| z.re >= 0.0 && z.im == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bits: Vec<u8> = (0..86).map(|_| rng.gen_range(0..2)).collect();
        let x = encode_payload(&bits, &pe, &pi).unwrap();
        let cw: Vec<u8> = (0..172).map(|i| u8::from(x[pi[i]].re < 0.0)).collect();
        assert!(pe.code.syndrome_ok(&cw));
        assert_eq!(pe.code.extract_info(&cw, 86), bits);
        assert!(encode_payload(&bits[..85], &pe, &pi).is_err());
    }

    #[test]
    fn full_message_is_deterministic() {
        let cfg = SystemConfig::preset(PresetKind::Flat);
        let tc = TreeCode::new(7, &cfg.parity_alloc, cfg.tree_seed).unwrap();
        let pe = PayloadEncoding::new(&cfg).unwrap();
        let bits: Vec<u8> = (0..100).map(|i| ((i * 7) % 5 == 0) as u8).collect();
        let a = encode_message(&bits, &cfg, &tc, Some(&pe)).unwrap();
        let b = encode_message(&bits, &cfg, &tc, Some(&pe)).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.payload, b.payload);
        assert!(a.indices.iter().all(|&d| (1..=128).contains(&d)));
    }
}
