//! Partial DFT matrices, chi-square distribution functions and seedable
//! complex-Gaussian streams.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{CMatrix, Error, Result};

/// `rows.len() x cols` block of the unitary `n_fft`-point DFT matrix.
#[derive(Debug, Clone)]
pub struct PartialDft {
    pub n_fft: usize,
    /// 1-based subcarrier indices.
    pub rows: Vec<usize>,
    pub cols: usize,
    pub entries: CMatrix,
}

/// Unitary DFT kernel `(1/sqrt(N)) exp(-j 2 pi n k / N)`, with the exponent
/// reduced modulo `N` so large indices keep full precision.
pub fn dft_entry(n_fft: usize, n: usize, k: usize) -> Complex64 {
    let r = ((n as u128 * k as u128) % n_fft as u128) as f64;
    Complex64::from_polar(1.0 / (n_fft as f64).sqrt(), -2.0 * PI * r / n_fft as f64)
}

pub fn partial_dft(n_fft: usize, subcarriers: &[usize], n_cols: usize) -> Result<PartialDft> {
    if n_fft == 0 {
        return Err(Error::Config("n_fft must be positive".into()));
    }
    if n_cols == 0 || n_cols > n_fft {
        return Err(Error::Config(format!(
            "n_cols = {n_cols} must lie in [1, {n_fft}]"
        )));
    }
    if let Some(&bad) = subcarriers.iter().find(|&&s| s == 0 || s > n_fft) {
        return Err(Error::Config(format!(
            "subcarrier index {bad} outside [1, {n_fft}]"
        )));
    }
    let entries = CMatrix::from_fn(subcarriers.len(), n_cols, |r, c| {
        dft_entry(n_fft, subcarriers[r] - 1, c)
    });
    Ok(PartialDft {
        n_fft,
        rows: subcarriers.to_vec(),
        cols: n_cols,
        entries,
    })
}

// ---------------------------------------------------------------------------
// Special functions

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = LANCZOS[0];
        let t = x + LANCZOS_G + 0.5;
        for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

/// `ln P(a, x)` and `ln Q(a, x)` of the regularized incomplete gamma
/// functions, each accurate in its own tail.
pub fn ln_gamma_pq(a: f64, x: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (f64::NEG_INFINITY, 0.0);
    }
    let ln_pre = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        // series: P = pre/a * sum x^n / ((a+1)...(a+n))
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..100_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        let ln_p = ln_pre + sum.ln();
        let p = ln_p.exp();
        let ln_q = if p > 0.5 { (1.0 - p).ln() } else { (-p).ln_1p() };
        (ln_p, ln_q)
    } else {
        // modified Lentz continued fraction for Q
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..100_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let ln_q = ln_pre + h.ln();
        let q = ln_q.exp();
        let ln_p = if q > 0.5 { (1.0 - q).ln() } else { (-q).ln_1p() };
        (ln_p, ln_q)
    }
}

fn check_dof(dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(Error::Config("chi-square dof must be at least 1".into()));
    }
    Ok(dof as f64)
}

pub fn chi2_cdf(dof: usize, x: f64) -> Result<f64> {
    let k = check_dof(dof)?;
    Ok(ln_gamma_pq(0.5 * k, 0.5 * x.max(0.0)).0.exp())
}

/// Upper tail `1 - F(x)` without cancellation.
pub fn chi2_sf(dof: usize, x: f64) -> Result<f64> {
    let k = check_dof(dof)?;
    Ok(ln_gamma_pq(0.5 * k, 0.5 * x.max(0.0)).1.exp())
}

fn chi2_ln_pdf(k: f64, x: f64) -> f64 {
    (0.5 * k - 1.0) * x.ln() - 0.5 * x - 0.5 * k * 2f64.ln() - ln_gamma(0.5 * k)
}

/// Solves `ln tail(x) = ln_target` where `tail` is the lower (`upper=false`)
/// or upper CDF tail. Newton steps in log space, guarded by a bisection
/// bracket.
fn chi2_solve(k: f64, ln_target: f64, upper: bool) -> f64 {
    let eval = |x: f64| {
        let (lp, lq) = ln_gamma_pq(0.5 * k, 0.5 * x);
        if upper {
            lq
        } else {
            lp
        }
    };
    // Wilson-Hilferty starting point
    let p = ln_target.exp();
    let z = normal_quantile(if upper { 1.0 - p } else { p }.clamp(1e-300, 1.0 - 1e-16));
    let h = 2.0 / (9.0 * k);
    let mut x = (k * (1.0 - h + z * h.sqrt()).powi(3)).max(1e-300);
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..500 {
        let g = eval(x) - ln_target;
        // lower tail increases with x, upper tail decreases
        let too_big = if upper { g < 0.0 } else { g > 0.0 };
        if too_big {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        if g.abs() < 1e-15 {
            break;
        }
        let ln_tail = eval(x);
        let slope = (chi2_ln_pdf(k, x) - ln_tail).exp() * if upper { -1.0 } else { 1.0 };
        let mut next = x - g / slope;
        if !next.is_finite() || next <= lo || next >= hi {
            next = if hi.is_finite() {
                if lo > 0.0 {
                    (lo * hi).sqrt().max(0.5 * (lo + hi) * 1e-3).min(0.5 * (lo + hi))
                } else {
                    0.5 * hi
                }
            } else {
                2.0 * x.max(1.0)
            };
        }
        if hi.is_finite() && (hi - lo) <= 1e-15 * hi {
            x = 0.5 * (lo + hi);
            break;
        }
        if (next - x).abs() <= 1e-15 * x {
            x = next;
            break;
        }
        x = next;
    }
    x
}

/// Quantile of the chi-square distribution with `dof` degrees of freedom.
pub fn chi2_inv(dof: usize, p: f64) -> Result<f64> {
    let k = check_dof(dof)?;
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(Error::DegenerateLevel(p));
    }
    if p == 1.0 {
        return Err(Error::UnboundedQuantile);
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p > 0.5 {
        Ok(chi2_solve(k, (1.0 - p).ln(), true))
    } else {
        Ok(chi2_solve(k, p.ln(), false))
    }
}

/// Inverse survival function: the `x` with `P(X > x) = q`. Accurate for
/// tiny `q`.
pub fn chi2_isf(dof: usize, q: f64) -> Result<f64> {
    let k = check_dof(dof)?;
    if !(0.0..=1.0).contains(&q) || q.is_nan() {
        return Err(Error::DegenerateLevel(q));
    }
    if q == 0.0 {
        return Err(Error::UnboundedQuantile);
    }
    if q == 1.0 {
        return Ok(0.0);
    }
    if q < 0.5 {
        Ok(chi2_solve(k, q.ln(), true))
    } else {
        Ok(chi2_solve(k, (1.0 - q).ln(), false))
    }
}

/// Standard normal quantile (Acklam's rational approximation, ~1e-9), used
/// only for starting points.
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let tail = |q: f64| {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    if p < 0.02425 {
        tail(p)
    } else if p > 1.0 - 0.02425 {
        -tail(1.0 - p)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

// ---------------------------------------------------------------------------
// Random streams

/// 64-bit finalizer from splitmix64.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a word sequence.
pub fn hash_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243F_6A88_85A3_08D3u64, |h, &w| mix64(h ^ mix64(w)))
}

/// What a stream is used for; keeps streams of one trial apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Users = 1,
    Bits = 2,
    Noise = 3,
    Channel = 4,
    Synthetic = 5,
}

/// A `(seed, stream id)` pair naming an independent ChaCha8 sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Stream keyed by trial, user and purpose.
    pub fn derive(seed: u64, trial: u64, user: u64, purpose: Purpose) -> Self {
        Self::new(seed, hash_words(&[trial, user, purpose as u64]))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (0.5 * variance).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

pub fn fill_complex_gaussian<R: Rng + ?Sized>(rng: &mut R, out: &mut [Complex64], variance: f64) {
    for z in out {
        *z = complex_gaussian(rng, variance);
    }
}

/// `n` i.i.d. CN(0, variance) samples from the given stream.
pub fn sample_complex_gaussian(stream: &RngStream, n: usize, variance: f64) -> Vec<Complex64> {
    let mut rng = stream.rng();
    let mut v = vec![Complex64::new(0.0, 0.0); n];
    fill_complex_gaussian(&mut rng, &mut v, variance);
    v
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `||a||_F^2`.
pub fn frob2(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// `||a - b||_F^2 / ||b||_F^2`, or the absolute error when `b` is zero.
pub fn rel_err2(a: &CMatrix, b: &CMatrix) -> f64 {
    let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den = frob2(b);
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

pub fn db10(x: f64) -> f64 {
    10.0 * x.log10()
}
