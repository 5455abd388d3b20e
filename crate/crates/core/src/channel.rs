//! Ground-truth users, the exact time-domain OFDM pipeline and the
//! frequency-domain sparse model.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use rustfft::FftPlanner;

use crate::config::{ChannelKind, SystemConfig};
use crate::encoder::{encode_message, Codebook, PayloadEncoding, TreeCode};
use crate::numerics::complex_gaussian;
use crate::{CMatrix, Error, Result};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    /// Delay in samples, excluding the timing offset.
    pub delay: usize,
    /// One gain per receive antenna.
    pub gains: Vec<Complex64>,
}

#[derive(Debug, Clone)]
pub struct UserGroundTruth {
    pub bits: Vec<u8>,
    /// Timing offset in samples.
    pub to: usize,
    /// Normalized CFO.
    pub cfo: f64,
    pub taps: Vec<Tap>,
    /// Codeword index per preamble slot (1-based).
    pub indices: Vec<usize>,
    pub interleaver: Vec<usize>,
    /// Coding-part symbols (may be empty).
    pub payload: Vec<Complex64>,
}

impl UserGroundTruth {
    /// Equivalent tap indices `tau_{k,l} + tau_k`.
    pub fn tap_indices(&self) -> Vec<usize> {
        self.taps.iter().map(|t| t.delay + self.to).collect()
    }
}

/// Received preamble slots and the optional coding part.
#[derive(Debug, Clone)]
pub struct SlotObservation {
    /// `T_p` matrices of size `S x M`.
    pub preamble: Vec<CMatrix>,
    /// `L_c x M`, row `l = t' * S_c + s` (symbol-major).
    pub coding: Option<CMatrix>,
    pub noise_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelModel {
    /// Exact time-domain simulation with ICI.
    TimeDomain,
    /// Diagonal frequency-domain model.
    FreqDomain,
}

pub fn random_bits<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..2u8)).collect()
}

/// Random taps for one user: `L_k` uniform in the configured range, distinct
/// delays in `[0, delay_spread)` with the first at 0.
pub fn draw_taps<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Vec<Tap> {
    let [lo, hi] = cfg.tap_count_range;
    let lk = rng.gen_range(lo..=hi);
    let mut delays = vec![0usize];
    if lk > 1 {
        let mut rest: Vec<usize> = sample(rng, cfg.delay_spread - 1, lk - 1)
            .into_iter()
            .map(|d| d + 1)
            .collect();
        rest.sort_unstable();
        delays.extend(rest);
    }
    let var = cfg.tap_power.unwrap_or(1.0 / lk as f64);
    delays
        .into_iter()
        .map(|delay| Tap {
            delay,
            gains: (0..cfg.n_antennas).map(|_| complex_gaussian(rng, var)).collect(),
        })
        .collect()
}

pub fn draw_users<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    tc: &TreeCode,
    pe: Option<&PayloadEncoding>,
    rng: &mut R,
) -> Result<Vec<UserGroundTruth>> {
    if cfg.cp_len <= cfg.max_tap_index() {
        return Err(Error::Config("no-ISI condition violated".into()));
    }
    (0..cfg.n_active)
        .map(|_| {
            let bits = random_bits(rng, cfg.msg_bits);
            let to = cfg.to_grid[rng.gen_range(0..cfg.to_grid.len())];
            let cfo = if cfg.cfo_max > 0.0 {
                rng.gen_range(-cfg.cfo_max..=cfg.cfo_max)
            } else {
                0.0
            };
            let taps = match cfg.channel_kind {
                ChannelKind::Flat => {
                    let var = cfg.tap_power.unwrap_or(1.0);
                    vec![Tap {
                        delay: 0,
                        gains: (0..cfg.n_antennas).map(|_| complex_gaussian(rng, var)).collect(),
                    }]
                }
                ChannelKind::Fsf => draw_taps(cfg, rng),
            };
            let enc = encode_message(&bits, cfg, tc, pe)?;
            Ok(UserGroundTruth {
                bits,
                to,
                cfo,
                taps,
                indices: enc.indices,
                interleaver: enc.interleaver,
                payload: enc.payload,
            })
        })
        .collect()
}

/// Frequency response on `rows` with the timing offset merged into the
/// delays, without the `1/sqrt(N_c)` DFT factor.
pub fn fd_channel_on(user: &UserGroundTruth, rows: &[usize], n_fft: usize) -> CMatrix {
    let m = user.taps.first().map_or(0, |t| t.gains.len());
    let mut h = CMatrix::zeros(rows.len(), m);
    for tap in &user.taps {
        let idx = tap.delay + user.to;
        for (r, &s) in rows.iter().enumerate() {
            let ph = ((s - 1) * idx % n_fft) as f64;
            let e = Complex64::from_polar(1.0, -2.0 * PI * ph / n_fft as f64);
            for (c, g) in tap.gains.iter().enumerate() {
                h[(r, c)] += g * e;
            }
        }
    }
    h
}

/// `H_k` on the preamble subcarriers, `S x M`.
pub fn fd_channel(user: &UserGroundTruth, cfg: &SystemConfig) -> CMatrix {
    fd_channel_on(user, &cfg.occupied, cfg.n_fft)
}

/// `P(eps) = sin(pi eps) / (N sin(pi eps / N)) * exp(j pi eps (N-1)/N)`.
pub fn attenuation(eps: f64, n_fft: usize) -> Complex64 {
    let n = n_fft as f64;
    let mag = if eps.abs() < 1e-300 {
        1.0
    } else {
        (PI * eps).sin() / (n * (PI * eps / n).sin())
    };
    Complex64::from_polar(mag, PI * eps * (n - 1.0) / n)
}

/// Common CFO phase of symbol `t`, `omega^{(L+N)t - (N+1)/2}`.
pub fn cfo_phase(eps: f64, t: usize, cfg: &SystemConfig) -> Complex64 {
    let n = cfg.n_fft as f64;
    let e = (cfg.cp_len as f64 + n) * t as f64 - 0.5 * (n + 1.0);
    Complex64::from_polar(1.0, 2.0 * PI * eps * e / n)
}

/// `p^t(s) = omega^{(L+N)t - (N+1)/2} psi^{1 - n_s}` on `rows`.
pub fn phase_rotation_on(to: usize, eps: f64, t: usize, rows: &[usize], cfg: &SystemConfig) -> Vec<Complex64> {
    let c = cfo_phase(eps, t, cfg);
    let n = cfg.n_fft;
    rows.iter()
        .map(|&s| {
            let ph = ((s - 1) * to % n) as f64;
            c * Complex64::from_polar(1.0, -2.0 * PI * ph / n as f64)
        })
        .collect()
}

pub fn phase_rotation(to: usize, eps: f64, t: usize, cfg: &SystemConfig) -> Vec<Complex64> {
    phase_rotation_on(to, eps, t, &cfg.occupied, cfg)
}

/// `phi^t P(eps)`: the diagonal CFO factor of symbol `t`.
pub fn cfo_gain(eps: f64, t: usize, cfg: &SystemConfig) -> Complex64 {
    let n = cfg.n_fft as f64;
    let phi = Complex64::from_polar(
        1.0,
        2.0 * PI * eps * (cfg.cp_len as f64 + (t as f64 - 1.0) * (cfg.cp_len as f64 + n)) / n,
    );
    phi * attenuation(eps, cfg.n_fft)
}

/// Subcarriers and frequency-domain symbols a user sends in slot `t`
/// (1-based; preamble slots first).
pub fn user_symbols<'a>(
    user: &UserGroundTruth,
    codebook: &Codebook,
    cfg: &'a SystemConfig,
    t: usize,
) -> (&'a [usize], Vec<Complex64>) {
    let tp = cfg.preamble_slots;
    if t <= tp {
        (&cfg.occupied, codebook.codeword(user.indices[t - 1]))
    } else {
        let sc = cfg.coding_occupied.len();
        let off = (t - tp - 1) * sc;
        let x = if user.payload.is_empty() {
            vec![ZERO; sc]
        } else {
            user.payload[off..off + sc].to_vec()
        };
        (&cfg.coding_occupied, x)
    }
}

/// Exact time-domain received samples (`N_c x M` per slot) for slots
/// `t in slots` (1-based), CP already removed.
pub fn simulate_td<R: Rng + ?Sized>(
    users: &[UserGroundTruth],
    codebook: &Codebook,
    cfg: &SystemConfig,
    slots: std::ops::RangeInclusive<usize>,
    noise_variance: f64,
    rng: &mut R,
) -> Vec<CMatrix> {
    let n = cfg.n_fft;
    let m = cfg.n_antennas;
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    let scale = 1.0 / (n as f64).sqrt();
    let mut out = Vec::new();
    let mut buf = vec![ZERO; n];
    let mut v = vec![ZERO; n];
    for t in slots {
        // column-major N x M accumulator
        let mut y = vec![ZERO; n * m];
        for u in users {
            let (rows, x) = user_symbols(u, codebook, cfg, t);
            buf.iter_mut().for_each(|z| *z = ZERO);
            for (&s, &xs) in rows.iter().zip(&x) {
                buf[s - 1] = xs;
            }
            ifft.process(&mut buf);
            let phi_exp = cfg.cp_len as f64 + (t as f64 - 1.0) * (cfg.cp_len + n) as f64;
            for (i, vi) in v.iter_mut().enumerate() {
                let src = (i + n - u.to % n) % n;
                let ph = 2.0 * PI * u.cfo * (phi_exp + i as f64) / n as f64;
                *vi = buf[src] * scale * Complex64::from_polar(1.0, ph);
            }
            for tap in &u.taps {
                for (a, g) in tap.gains.iter().enumerate() {
                    let col = &mut y[a * n..(a + 1) * n];
                    for (i, yi) in col.iter_mut().enumerate() {
                        *yi += g * v[(i + n - tap.delay % n) % n];
                    }
                }
            }
        }
        if noise_variance > 0.0 {
            for z in y.iter_mut() {
                *z += complex_gaussian(rng, noise_variance);
            }
        }
        out.push(CMatrix::from_vec(n, m, y));
    }
    out
}

/// Unitary DFT of each time-domain frame restricted to `rows`.
pub fn demodulate_fd(frames: &[CMatrix], rows: &[usize]) -> Vec<CMatrix> {
    let mut planner = FftPlanner::<f64>::new();
    frames
        .iter()
        .map(|f| {
            let n = f.nrows();
            let fft = planner.plan_fft_forward(n);
            let scale = 1.0 / (n as f64).sqrt();
            let mut out = CMatrix::zeros(rows.len(), f.ncols());
            let mut buf = vec![ZERO; n];
            for c in 0..f.ncols() {
                buf.copy_from_slice(f.column(c).as_slice());
                fft.process(&mut buf);
                for (r, &s) in rows.iter().enumerate() {
                    out[(r, c)] = buf[s - 1] * scale;
                }
            }
            out
        })
        .collect()
}

/// Diagonal-CFO frequency-domain observation of slot `t` on its subcarriers,
/// noise-free.
pub fn fd_slot(users: &[UserGroundTruth], codebook: &Codebook, cfg: &SystemConfig, t: usize) -> CMatrix {
    let rows = if t <= cfg.preamble_slots { &cfg.occupied } else { &cfg.coding_occupied };
    let mut y = CMatrix::zeros(rows.len(), cfg.n_antennas);
    for u in users {
        let (_, x) = user_symbols(u, codebook, cfg, t);
        let h = fd_channel_on(u, rows, cfg.n_fft);
        let g = cfo_gain(u.cfo, t, cfg);
        for r in 0..rows.len() {
            if x[r] == ZERO {
                continue;
            }
            let gx = g * x[r];
            for a in 0..cfg.n_antennas {
                y[(r, a)] += gx * h[(r, a)];
            }
        }
    }
    y
}

/// Frequency-domain observations for the preamble and, when `with_coding`,
/// the coding part.
pub fn observe<R: Rng + ?Sized>(
    users: &[UserGroundTruth],
    codebook: &Codebook,
    cfg: &SystemConfig,
    model: ChannelModel,
    noise_variance: f64,
    with_coding: bool,
    rng: &mut R,
) -> SlotObservation {
    let tp = cfg.preamble_slots;
    let last = if with_coding { tp + cfg.coding_slots } else { tp };
    let mut slots: Vec<CMatrix> = match model {
        ChannelModel::TimeDomain => {
            let frames = simulate_td(users, codebook, cfg, 1..=last, noise_variance, rng);
            let mut out = demodulate_fd(&frames[..tp], &cfg.occupied);
            out.extend(demodulate_fd(&frames[tp..], &cfg.coding_occupied));
            out
        }
        ChannelModel::FreqDomain => {
            let mut out: Vec<CMatrix> = (1..=last).map(|t| fd_slot(users, codebook, cfg, t)).collect();
            // a unitary DFT maps white CN(0, s2) noise to white CN(0, s2)
            if noise_variance > 0.0 {
                for s in &mut out {
                    for z in s.iter_mut() {
                        *z += complex_gaussian(rng, noise_variance);
                    }
                }
            }
            out
        }
    };
    let coding = with_coding.then(|| {
        let sc = cfg.coding_occupied.len();
        let mut yc = CMatrix::zeros(sc * cfg.coding_slots, cfg.n_antennas);
        for (tt, s) in slots[tp..].iter().enumerate() {
            yc.rows_mut(tt * sc, sc).copy_from(s);
        }
        yc
    });
    slots.truncate(tp);
    SlotObservation {
        preamble: slots,
        coding,
        noise_variance,
    }
}

/// Dictionary `G = [G_1 ... G_L]` with `G_l = [a_1 . f_l, ..., a_N . f_l]`.
pub fn dictionary(codebook: &Codebook, cfg: &SystemConfig) -> CMatrix {
    let s = cfg.n_sub();
    let n = codebook.len();
    let l = cfg.cp_len;
    let nf = cfg.n_fft;
    let sc = 1.0 / (nf as f64).sqrt();
    let mut g = CMatrix::zeros(s, n * l);
    for tap in 0..l {
        for (r, &sub) in cfg.occupied.iter().enumerate() {
            let f = Complex64::from_polar(sc, -2.0 * PI * (((sub - 1) * tap) % nf) as f64 / nf as f64);
            for c in 0..n {
                g[(r, tap * n + c)] = codebook.columns[(r, c)] * f;
            }
        }
    }
    g
}

/// Row index of `X^t` for a (tap index, codeword index), both as used by the
/// model: tap 0-based, codeword 1-based.
pub fn x_row(tap: usize, codeword: usize, n_codewords: usize) -> usize {
    tap * n_codewords + codeword - 1
}

/// Ground-truth sparse matrix `X^t` (`NL x M`) for preamble slot `t`.
pub fn ground_truth_x(users: &[UserGroundTruth], cfg: &SystemConfig, t: usize) -> Result<CMatrix> {
    let n = cfg.n_codewords();
    let m = cfg.n_antennas;
    let mut x = CMatrix::zeros(n * cfg.cp_len, m);
    let root = (cfg.n_fft as f64).sqrt();
    for u in users {
        let p = cfo_gain(u.cfo, t, cfg) * root;
        for tap in &u.taps {
            let idx = tap.delay + u.to;
            if idx >= cfg.cp_len {
                return Err(Error::Config(format!("tap index {idx} >= cp_len {}", cfg.cp_len)));
            }
            let row = x_row(idx, u.indices[t - 1], n);
            for (a, g) in tap.gains.iter().enumerate() {
                x[(row, a)] += p * g;
            }
        }
    }
    Ok(x)
}

/// `(G, X^t, G X^t)` for preamble slot `t`.
pub fn assemble_fd_model(
    users: &[UserGroundTruth],
    codebook: &Codebook,
    t: usize,
    cfg: &SystemConfig,
) -> Result<(CMatrix, CMatrix, CMatrix)> {
    let g = dictionary(codebook, cfg);
    let x = ground_truth_x(users, cfg, t)?;
    let y = &g * &x;
    Ok((g, x, y))
}

/// Writes a complex matrix as `u32 rank`, `u64` dims, then row-major
/// little-endian `f32` (re, im) pairs.
pub fn write_tensor(path: &Path, m: &CMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&2u32.to_le_bytes())?;
    f.write_all(&(m.nrows() as u64).to_le_bytes())?;
    f.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let z = m[(r, c)];
            f.write_all(&(z.re as f32).to_le_bytes())?;
            f.write_all(&(z.im as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<CMatrix> {
    let b = std::fs::read(path)?;
    let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as f64;
    if b.len() < 20 || u32_at(0) != 2 {
        return Err(Error::Parse("tensor file is not a rank-2 tensor".into()));
    }
    let (r, c) = (u64_at(4) as usize, u64_at(12) as usize);
    if b.len() != 20 + r * c * 8 {
        return Err(Error::Parse("tensor file size mismatch".into()));
    }
    Ok(CMatrix::from_fn(r, c, |i, j| {
        let o = 20 + (i * c + j) * 8;
        Complex64::new(f32_at(o), f32_at(o + 4))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PresetKind;
    use crate::encoder::build_codebook;
    use crate::numerics::{frob2, rel_err2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_fsf() -> SystemConfig {
        let mut c = SystemConfig::preset(PresetKind::DeskFsf);
        c.n_fft = 64;
        c.occupied = (1..=32).collect();
        c.coding_occupied = (1..=16).collect();
        c.subblock_len = 4;
        c.parity_alloc = vec![0, 0, 4, 4];
        c.preamble_bits = 8;
        c.coding_bits = 92;
        c.cp_len = 12;
        c.delay_spread = 6;
        c.to_grid = vec![1, 2, 3];
        c.tap_count_range = [2, 4];
        c.n_antennas = 3;
        c.n_active = 4;
        c.validate().unwrap();
        c
    }

    fn users_for(cfg: &SystemConfig, seed: u64) -> (Vec<UserGroundTruth>, Codebook) {
        let tc = TreeCode::new(cfg.subblock_len, &cfg.parity_alloc, 1).unwrap();
        let cb = build_codebook(cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (draw_users(cfg, &tc, None, &mut rng).unwrap(), cb)
    }

    #[test]
    fn rotation_trivial_cases() {
        let cfg = SystemConfig::preset(PresetKind::Flat);
        assert!(phase_rotation(0, 0.0, 3, &cfg).iter().all(|z| (z - 1.0).norm() < 1e-15));
        let p = phase_rotation(0, 0.01, 2, &cfg);
        assert!(p.iter().all(|z| (z - p[0]).norm() < 1e-15));
    }

    #[test]
    fn rotation_small_example() {
        let mut cfg = SystemConfig::preset(PresetKind::Flat);
        cfg.n_fft = 8;
        cfg.cp_len = 2;
        let p = phase_rotation_on(1, 0.1, 1, &[1, 2], &cfg);
        // omega^{(2+8) - 4.5} psi^{1-s}, omega = e^{j 2 pi 0.1 / 8}, psi = e^{j 2 pi / 8}
        let w = 2.0 * PI * 0.1 / 8.0;
        let want0 = Complex64::from_polar(1.0, w * 5.5);
        let want1 = Complex64::from_polar(1.0, w * 5.5 - 2.0 * PI / 8.0);
        assert!((p[0] - want0).norm() < 1e-14);
        assert!((p[1] - want1).norm() < 1e-14);
    }

    #[test]
    fn attenuation_values() {
        assert!((attenuation(0.0, 2048) - 1.0).norm() < 1e-15);
        let a = attenuation(0.0133, 2048).norm();
        assert!(a > 0.999 && a < 1.0);
        assert!(attenuation(0.5, 2048).norm() < 1.0);
    }

    #[test]
    fn diagonal_of_exact_rotation_matches_model() {
        // brute-force F D shift F^H on a small grid
        let mut cfg = SystemConfig::preset(PresetKind::Flat);
        cfg.n_fft = 16;
        cfg.cp_len = 4;
        let n = 16;
        let (eps, to, t) = (0.21, 3usize, 2usize);
        let w = |k: f64| Complex64::from_polar(1.0, 2.0 * PI * eps * k / n as f64);
        let phi = w((cfg.cp_len + (t - 1) * (cfg.cp_len + n)) as f64);
        let f = |r: usize, c: usize| crate::numerics::dft_entry(n, r, c);
        let rows: Vec<usize> = (1..=n).collect();
        let p = phase_rotation_on(to, eps, t, &rows, &cfg);
        let mag = attenuation(eps, n).norm();
        for s in 0..n {
            // (F D S F^H)(s,s), S the delay-by-to permutation
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                let j = (i + n - to) % n;
                acc += f(s, i) * phi * w(i as f64) * f(s, j).conj();
            }
            assert!((acc - p[s] * mag).norm() < 1e-12, "s={s}");
        }
    }

    #[test]
    fn fd_channel_single_tap_is_flat() {
        let cfg = SystemConfig::preset(PresetKind::Flat);
        let (u, _) = users_for(&small_fsf(), 1);
        let mut u = u[0].clone();
        u.to = 0;
        u.taps.truncate(1);
        let h = fd_channel(&u, &cfg);
        for r in 0..h.nrows() {
            for c in 0..h.ncols() {
                assert!((h[(r, c)] - u.taps[0].gains[c]).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn fd_channel_matches_dft_product() {
        let cfg = small_fsf();
        let (users, _) = users_for(&cfg, 4);
        let f = crate::numerics::partial_dft(cfg.n_fft, &cfg.occupied, cfg.cp_len).unwrap().entries;
        for u in &users {
            let mut taps = CMatrix::zeros(cfg.cp_len, cfg.n_antennas);
            for t in &u.taps {
                for (a, g) in t.gains.iter().enumerate() {
                    taps[(t.delay + u.to, a)] += *g;
                }
            }
            let want = &f * taps * Complex64::new((cfg.n_fft as f64).sqrt(), 0.0);
            assert!(rel_err2(&fd_channel(u, &cfg), &want) < 1e-24);
        }
    }

    #[test]
    fn fd_channel_two_taps_closed_form() {
        let mut cfg = small_fsf();
        cfg.n_fft = 16;
        cfg.occupied = (1..=16).collect();
        let (a, b) = (Complex64::new(0.3, -1.0), Complex64::new(-0.7, 0.2));
        let u = UserGroundTruth {
            bits: vec![],
            to: 0,
            cfo: 0.0,
            taps: vec![
                Tap { delay: 0, gains: vec![a] },
                Tap { delay: 3, gains: vec![b] },
            ],
            indices: vec![],
            interleaver: vec![],
            payload: vec![],
        };
        let h = fd_channel(&u, &cfg);
        for s in 0..16 {
            let want = a + b * Complex64::from_polar(1.0, -2.0 * PI * 3.0 * s as f64 / 16.0);
            assert!((h[(s, 0)] - want).norm() < 1e-14);
        }
    }

    #[test]
    fn drawn_users_respect_constraints() {
        let cfg = SystemConfig::preset(PresetKind::Fsf);
        let tc = TreeCode::new(cfg.subblock_len, &cfg.parity_alloc, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let users = draw_users(&cfg, &tc, None, &mut rng).unwrap();
        for u in &users {
            assert!((5..=15).contains(&u.taps.len()));
            assert_eq!(u.taps[0].delay, 0);
            assert!(u.tap_indices().iter().all(|&i| i < 72));
            assert!(u.cfo.abs() <= 0.0133);
        }
        let flat = SystemConfig::preset(PresetKind::DeskFlat);
        let tc = TreeCode::new(7, &flat.parity_alloc, 1).unwrap();
        let users = draw_users(&flat, &tc, None, &mut rng).unwrap();
        assert!(users.iter().all(|u| u.taps.len() == 1 && u.taps[0].delay == 0));
    }

    #[test]
    fn channel_energy_per_antenna() {
        let cfg = small_fsf();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut acc = 0.0;
        let trials = 2000;
        let u0 = users_for(&cfg, 1).0.remove(0);
        for _ in 0..trials {
            let mut u = u0.clone();
            u.taps = draw_taps(&cfg, &mut rng);
            acc += frob2(&fd_channel(&u, &cfg)) / cfg.n_antennas as f64;
        }
        let mean = acc / trials as f64;
        assert!((mean / cfg.n_sub() as f64 - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn td_matches_fd_without_cfo() {
        let mut cfg = small_fsf();
        cfg.cfo_max = 0.0;
        cfg.cfo_grid = vec![0.0; 1];
        let (users, cb) = users_for(&cfg, 6);
        assert!(users.iter().all(|u| u.to > 0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let td = demodulate_fd(&simulate_td(&users, &cb, &cfg, 1..=4, 0.0, &mut rng), &cfg.occupied);
        for t in 1..=4 {
            let (_, _, y) = assemble_fd_model(&users, &cb, t, &cfg).unwrap();
            assert!(rel_err2(&td[t - 1], &y).sqrt() < 1e-10);
            assert!(rel_err2(&fd_slot(&users, &cb, &cfg, t), &y).sqrt() < 1e-10);
        }
    }

    #[test]
    fn td_ici_is_small_with_cfo() {
        let cfg = small_fsf();
        let (users, cb) = users_for(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let td = demodulate_fd(&simulate_td(&users, &cb, &cfg, 1..=4, 0.0, &mut rng), &cfg.occupied);
        for t in 1..=4 {
            let (_, _, y) = assemble_fd_model(&users, &cb, t, &cfg).unwrap();
            // ICI energy is about (pi eps)^2 / 3 of the signal
            assert!(rel_err2(&td[t - 1], &y) < 1e-3);
        }
    }

    #[test]
    fn sparse_model_structure() {
        let mut cfg = small_fsf();
        cfg.n_active = 1;
        let (mut users, cb) = users_for(&cfg, 8);
        let u = &mut users[0];
        u.to = 0;
        u.cfo = 0.0;
        u.taps.truncate(1);
        let x = ground_truth_x(&users, &cfg, 1).unwrap();
        let nz: Vec<usize> = (0..x.nrows()).filter(|&r| x.row(r).iter().any(|z| z.norm() > 0.0)).collect();
        assert_eq!(nz, vec![users[0].indices[0] - 1]);

        let g = dictionary(&cb, &cfg);
        for c in g.column_iter() {
            let e: f64 = c.iter().map(|z| z.norm_sqr()).sum();
            assert!((e - cfg.n_sub() as f64 / cfg.n_fft as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn colliding_users_rows() {
        let mut cfg = small_fsf();
        cfg.n_active = 2;
        let (mut users, cb) = users_for(&cfg, 9);
        users[1].indices = users[0].indices.clone();
        users[0].to = 1;
        users[1].to = 1;
        users[0].taps = vec![Tap { delay: 0, gains: vec![Complex64::new(1.0, 0.0); 3] }];
        users[1].taps = vec![Tap { delay: 2, gains: vec![Complex64::new(0.0, 1.0); 3] }];
        let x = ground_truth_x(&users, &cfg, 1).unwrap();
        let nz = (0..x.nrows()).filter(|&r| x.row(r).iter().any(|z| z.norm() > 0.0)).count();
        assert_eq!(nz, 2);
        users[1].taps[0].delay = 0;
        let x = ground_truth_x(&users, &cfg, 1).unwrap();
        let nz: Vec<usize> = (0..x.nrows()).filter(|&r| x.row(r).iter().any(|z| z.norm() > 0.0)).collect();
        assert_eq!(nz.len(), 1);
        let row = nz[0];
        let p0 = cfo_gain(users[0].cfo, 1, &cfg) * (cfg.n_fft as f64).sqrt();
        let p1 = cfo_gain(users[1].cfo, 1, &cfg) * (cfg.n_fft as f64).sqrt();
        assert!((x[(row, 0)] - (p0 + p1 * Complex64::new(0.0, 1.0))).norm() < 1e-12);
        let (g, _, y) = assemble_fd_model(&users, &cb, 1, &cfg).unwrap();
        assert!(rel_err2(&(&g * &x), &y) < 1e-24);
    }

    #[test]
    fn td_noise_variance() {
        let cfg = small_fsf();
        let cb = build_codebook(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = observe(&[], &cb, &cfg, ChannelModel::TimeDomain, 0.5, true, &mut rng);
        let n: usize = obs.preamble.iter().map(|m| m.len()).sum();
        let e: f64 = obs.preamble.iter().map(frob2).sum::<f64>() / n as f64;
        assert!((e - 0.5).abs() < 0.05);
        assert_eq!(obs.coding.unwrap().shape(), (16 * 21, 3));
    }

    #[test]
    fn tensor_round_trip() {
        let m = CMatrix::from_fn(3, 2, |r, c| Complex64::new(r as f64, -(c as f64) * 0.5));
        let p = std::env::temp_dir().join(format!("ura_tensor_{}.bin", std::process::id()));
        write_tensor(&p, &m).unwrap();
        let back = read_tensor(&p).unwrap();
        std::fs::remove_file(&p).ok();
        assert_eq!(m, back);
    }
}
