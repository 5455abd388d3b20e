//! Binary LDPC codes: regular construction, alist I/O, systematic encoding
//! and sum-product decoding.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Sparse parity-check matrix together with a systematic encoder.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    pub n: usize,
    pub m: usize,
    /// Variable indices of each check.
    pub checks: Vec<Vec<usize>>,
    /// Check indices of each variable.
    pub vars: Vec<Vec<usize>>,
    /// Codeword positions carrying information bits, in order.
    pub info_pos: Vec<usize>,
    /// `(position, info-column mask)` for every parity position.
    parity_eqs: Vec<(usize, Vec<usize>)>,
    rank: usize,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub codeword: Vec<u8>,
    pub converged: bool,
    pub iterations: usize,
}

impl LdpcCode {
    pub fn from_checks(n: usize, checks: Vec<Vec<usize>>) -> Result<Self> {
        let m = checks.len();
        let mut vars = vec![Vec::new(); n];
        for (c, row) in checks.iter().enumerate() {
            for &v in row {
                if v >= n {
                    return Err(Error::Parse(format!("check {c} references variable {v} >= n={n}")));
                }
                vars[v].push(c);
            }
        }
        let (info_pos, parity_eqs, rank) = systematic_form(n, &checks);
        Ok(Self {
            n,
            m,
            checks,
            vars,
            info_pos,
            parity_eqs,
            rank,
        })
    }

    /// Code dimension `n - rank(H)`.
    pub fn k(&self) -> usize {
        self.n - self.rank
    }

    /// Random (3,6)-regular rate-1/2 code of length `2k`. Seeds are tried in
    /// sequence until the matrix has full rank and no repeated edges.
    pub fn regular(k: usize, seed: u64) -> Result<Self> {
        let n = 2 * k;
        let m = k;
        if k < 3 {
            return Err(Error::Config("LDPC dimension too small".into()));
        }
        let (wc, wr) = (3usize, 6usize);
        for attempt in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
            let mut sockets: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, wc)).collect();
            sockets.shuffle(&mut rng);
            // n*wc = m*wr exactly
            let checks: Vec<Vec<usize>> = sockets.chunks(wr).map(|c| {
                let mut r = c.to_vec();
                r.sort_unstable();
                r
            }).collect();
            if checks.iter().any(|r| r.windows(2).any(|w| w[0] == w[1])) {
                continue;
            }
            let code = Self::from_checks(n, checks)?;
            if code.rank == m {
                return Ok(code);
            }
        }
        Err(Error::Config("failed to construct a full-rank LDPC code".into()))
    }

    /// Systematic encoding. Info bits beyond the supplied ones are zero.
    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>> {
        if info.len() > self.k() {
            return Err(Error::Length {
                what: "LDPC info bits",
                expected: self.k(),
                got: info.len(),
            });
        }
        let mut cw = vec![0u8; self.n];
        for (i, &b) in info.iter().enumerate() {
            cw[self.info_pos[i]] = b & 1;
        }
        for (pos, cols) in &self.parity_eqs {
            let mut p = 0u8;
            for &c in cols {
                p ^= cw[self.info_pos[c]];
            }
            cw[*pos] = p;
        }
        Ok(cw)
    }

    pub fn extract_info(&self, cw: &[u8], n_info: usize) -> Vec<u8> {
        self.info_pos[..n_info].iter().map(|&p| cw[p]).collect()
    }

    pub fn syndrome_ok(&self, cw: &[u8]) -> bool {
        self.checks
            .iter()
            .all(|row| row.iter().fold(0u8, |a, &v| a ^ cw[v]) == 0)
    }

    /// Sum-product decoding on channel LLRs (positive favours bit 0).
    pub fn decode(&self, llr: &[f64], max_iter: usize) -> Result<DecodeOutput> {
        if llr.len() != self.n {
            return Err(Error::Length {
                what: "LDPC LLRs",
                expected: self.n,
                got: llr.len(),
            });
        }
        let hard = |l: &[f64]| l.iter().map(|&x| u8::from(x < 0.0)).collect::<Vec<u8>>();
        let cw = hard(llr);
        if self.syndrome_ok(&cw) {
            return Ok(DecodeOutput {
                codeword: cw,
                converged: true,
                iterations: 0,
            });
        }
        // check-to-variable messages indexed like `checks`
        let mut c2v: Vec<Vec<f64>> = self.checks.iter().map(|r| vec![0.0; r.len()]).collect();
        // position of each (var, check) edge inside the check row
        let edge_slot: Vec<Vec<usize>> = self
            .vars
            .iter()
            .enumerate()
            .map(|(v, cs)| {
                cs.iter()
                    .map(|&c| self.checks[c].iter().position(|&x| x == v).unwrap())
                    .collect()
            })
            .collect();
        let mut post = llr.to_vec();
        let mut tanhs: Vec<f64> = Vec::new();
        for it in 1..=max_iter {
            for (c, row) in self.checks.iter().enumerate() {
                tanhs.clear();
                for (j, &v) in row.iter().enumerate() {
                    let msg = (post[v] - c2v[c][j]).clamp(-40.0, 40.0);
                    tanhs.push((0.5 * msg).tanh());
                }
                for j in 0..row.len() {
                    let mut prod = 1.0;
                    for (i, &t) in tanhs.iter().enumerate() {
                        if i != j {
                            prod *= t;
                        }
                    }
                    let prod = prod.clamp(-1.0 + 1e-15, 1.0 - 1e-15);
                    c2v[c][j] = 2.0 * prod.atanh();
                }
            }
            for v in 0..self.n {
                post[v] = llr[v]
                    + self.vars[v]
                        .iter()
                        .zip(&edge_slot[v])
                        .map(|(&c, &j)| c2v[c][j])
                        .sum::<f64>();
            }
            let cw = hard(&post);
            if self.syndrome_ok(&cw) {
                return Ok(DecodeOutput {
                    codeword: cw,
                    converged: true,
                    iterations: it,
                });
            }
        }
        Ok(DecodeOutput {
            codeword: hard(&post),
            converged: false,
            iterations: max_iter,
        })
    }

    pub fn to_alist(&self) -> String {
        let mut s = String::new();
        let maxc = self.vars.iter().map(Vec::len).max().unwrap_or(0);
        let maxr = self.checks.iter().map(Vec::len).max().unwrap_or(0);
        let line = |v: Vec<String>| v.join(" ") + "\n";
        s += &format!("{} {}\n{} {}\n", self.n, self.m, maxc, maxr);
        s += &line(self.vars.iter().map(|c| c.len().to_string()).collect());
        s += &line(self.checks.iter().map(|r| r.len().to_string()).collect());
        for (list, width) in [(&self.vars, maxc), (&self.checks, maxr)] {
            for e in list.iter() {
                let mut f: Vec<String> = e.iter().map(|x| (x + 1).to_string()).collect();
                f.resize(width, "0".into());
                s += &line(f);
            }
        }
        s
    }

    /// Parses MacKay's alist format. The check lists define the matrix;
    /// column lists are only cross-checked.
    pub fn from_alist(text: &str) -> Result<Self> {
        let mut it = text.split_whitespace().map(|t| {
            t.parse::<usize>()
                .map_err(|e| Error::Parse(format!("alist token '{t}': {e}")))
        });
        let mut next = || it.next().unwrap_or_else(|| Err(Error::Parse("alist truncated".into())));
        let n = next()?;
        let m = next()?;
        let maxc = next()?;
        let maxr = next()?;
        let colw: Vec<usize> = (0..n).map(|_| next()).collect::<Result<_>>()?;
        let roww: Vec<usize> = (0..m).map(|_| next()).collect::<Result<_>>()?;
        let mut cols = Vec::with_capacity(n);
        for &w in &colw {
            let e: Vec<usize> = (0..maxc).map(|_| next()).collect::<Result<_>>()?;
            cols.push(e.into_iter().take(w).map(|x| x - 1).collect::<Vec<_>>());
        }
        let mut checks = Vec::with_capacity(m);
        for &w in &roww {
            let e: Vec<usize> = (0..maxr).map(|_| next()).collect::<Result<_>>()?;
            if e.iter().take(w).any(|&x| x == 0 || x > n) {
                return Err(Error::Parse("alist row entry out of range".into()));
            }
            checks.push(e.into_iter().take(w).map(|x| x - 1).collect::<Vec<_>>());
        }
        let code = Self::from_checks(n, checks)?;
        for (v, c) in cols.iter().enumerate() {
            let mut a = c.clone();
            a.sort_unstable();
            let mut b = code.vars[v].clone();
            b.sort_unstable();
            if a != b {
                return Err(Error::Parse(format!("alist column {v} disagrees with rows")));
            }
        }
        Ok(code)
    }
}

/// Gaussian elimination over GF(2). Returns the information positions,
/// parity equations expressed over information-bit indices, and the rank.
fn systematic_form(n: usize, checks: &[Vec<usize>]) -> (Vec<usize>, Vec<(usize, Vec<usize>)>, usize) {
    let words = n.div_ceil(64);
    let mut rows: Vec<Vec<u64>> = checks
        .iter()
        .map(|r| {
            let mut w = vec![0u64; words];
            for &v in r {
                w[v / 64] ^= 1 << (v % 64);
            }
            w
        })
        .collect();
    let get = |r: &[u64], c: usize| (r[c / 64] >> (c % 64)) & 1 == 1;
    let mut pivots = Vec::new();
    let mut rank = 0;
    for col in 0..n {
        if rank == rows.len() {
            break;
        }
        let Some(p) = (rank..rows.len()).find(|&r| get(&rows[r], col)) else {
            continue;
        };
        rows.swap(rank, p);
        let pivot = rows[rank].clone();
        for (r, row) in rows.iter_mut().enumerate() {
            if r != rank && get(row, col) {
                for (a, b) in row.iter_mut().zip(&pivot) {
                    *a ^= b;
                }
            }
        }
        pivots.push(col);
        rank += 1;
    }
    let is_pivot: Vec<bool> = {
        let mut v = vec![false; n];
        for &p in &pivots {
            v[p] = true;
        }
        v
    };
    let info_pos: Vec<usize> = (0..n).filter(|&c| !is_pivot[c]).collect();
    let parity = pivots
        .iter()
        .enumerate()
        .map(|(r, &pc)| {
            let deps = info_pos
                .iter()
                .enumerate()
                .filter(|(_, &c)| get(&rows[r], c))
                .map(|(i, _)| i)
                .collect();
            (pc, deps)
        })
        .collect();
    (info_pos, parity, rank)
}
