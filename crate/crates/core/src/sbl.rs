//! Joint activity detection and channel estimation by message-passing
//! sparse Bayesian learning: Gaussian belief propagation on the linear
//! observation factors, mean-field updates for the precisions.

use std::io::Write;

use num_complex::Complex64;

use crate::numerics::KahanSum;
use crate::{CMatrix, Error, Result};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const NU_MIN: f64 = 1e-12;
const NU_MAX: f64 = 1e12;
pub const DEFAULT_DAMPING: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct SblOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Fraction of the previous variable-to-factor message kept each sweep.
    pub damping: f64,
    /// Record per-iteration statistics.
    pub trace: bool,
}

impl Default for SblOptions {
    fn default() -> Self {
        Self {
            max_iter: 80,
            tol: 3e-5,
            damping: DEFAULT_DAMPING,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Squared relative change of the estimate.
    pub rel_change: f64,
    /// NMSE in dB against a reference, when one was supplied.
    pub nmse_db: Option<f64>,
    pub lambda: f64,
    pub mean_gamma: f64,
}

/// Dictionary in the layout the sweep needs.
#[derive(Debug, Clone)]
pub struct SblProblem {
    pub rows: usize,
    pub cols: usize,
    /// Column-major `rows x cols`.
    g: Vec<Complex64>,
    g2: Vec<f64>,
}

impl SblProblem {
    pub fn new(g: &CMatrix) -> Self {
        let data: Vec<Complex64> = g.as_slice().to_vec();
        let g2 = data.iter().map(|z| z.norm_sqr()).collect();
        Self {
            rows: g.nrows(),
            cols: g.ncols(),
            g: data,
            g2,
        }
    }
}

/// All messages, beliefs and hyper-parameters of one run.
#[derive(Debug, Clone)]
pub struct SblState {
    pub m: usize,
    /// `mu_{n->s}`, one `S x NL` column-major block per antenna.
    mu_ns: Vec<Vec<Complex64>>,
    nu_ns: Vec<Vec<f64>>,
    /// `sum_n g_{s,n} mu_{n->s}` and `sum_n |g_{s,n}|^2 nu_{n->s}` per antenna.
    mu_dw: Vec<Vec<Complex64>>,
    nu_dw: Vec<Vec<f64>>,
    pub mu_x: CMatrix,
    pub nu_x: nalgebra::DMatrix<f64>,
    pub mu_w: CMatrix,
    pub nu_w: nalgebra::DMatrix<f64>,
    pub gamma: Vec<f64>,
    pub eps_hat: f64,
    pub eta: f64,
    pub lambda: f64,
    pub iteration: usize,
    /// Number of clamped backward variances so far.
    pub clamp_events: usize,
    prec_buf: Vec<f64>,
    num_buf: Vec<Complex64>,
}

impl SblState {
    pub fn new(p: &SblProblem, m: usize) -> Self {
        let (s, nl) = (p.rows, p.cols);
        let mut v0 = vec![0.0; s];
        for n in 0..nl {
            for (r, v) in v0.iter_mut().enumerate() {
                *v += p.g2[n * s + r];
            }
        }
        Self {
            m,
            mu_ns: vec![vec![ZERO; s * nl]; m],
            nu_ns: vec![vec![1.0; s * nl]; m],
            mu_dw: vec![vec![ZERO; s]; m],
            nu_dw: vec![v0; m],
            mu_x: CMatrix::zeros(nl, m),
            nu_x: nalgebra::DMatrix::from_element(nl, m, 1.0),
            mu_w: CMatrix::zeros(s, m),
            nu_w: nalgebra::DMatrix::from_element(s, m, 1.0),
            gamma: vec![1.0; nl],
            eps_hat: 1e-3,
            eta: 1e-4,
            lambda: 1.0,
            iteration: 0,
            clamp_events: 0,
            prec_buf: vec![0.0; s * nl],
            num_buf: vec![ZERO; s * nl],
        }
    }

    /// One forward and backward pass over all antennas.
    pub fn sweep(&mut self, p: &SblProblem, y: &CMatrix, damping: f64) {
        let (s_len, nl) = (p.rows, p.cols);
        let inv_lam = 1.0 / self.lambda;
        for a in 0..self.m {
            let y_col = y.column(a);
            let mu = &mut self.mu_ns[a];
            let nu = &mut self.nu_ns[a];
            let t = &self.mu_dw[a];
            let v = &self.nu_dw[a];
            let resid: Vec<Complex64> = (0..s_len).map(|s| y_col[s] - t[s]).collect();
            let prec = &mut self.prec_buf;
            let num = &mut self.num_buf;
            // forward: factor-to-variable messages and the x beliefs
            for n in 0..nl {
                let base = n * s_len;
                let mut pn = 0.0;
                let mut qn = ZERO;
                for s in 0..s_len {
                    let i = base + s;
                    let g = p.g[i];
                    let a2 = p.g2[i];
                    let den = (v[s] - a2 * nu[i] + inv_lam).max(1e-300);
                    let pr = a2 / den;
                    let nm = g.conj() * (resid[s] + g * mu[i]) / den;
                    prec[i] = pr;
                    num[i] = nm;
                    pn += pr;
                    qn += nm;
                }
                let nux = 1.0 / (self.gamma[n] + pn);
                self.nu_x[(n, a)] = nux;
                self.mu_x[(n, a)] = qn * nux;
            }
            // backward: variable-to-factor messages and the w beliefs
            let mut t_new = vec![ZERO; s_len];
            let mut v_new = vec![0.0; s_len];
            for n in 0..nl {
                let base = n * s_len;
                let precx = 1.0 / self.nu_x[(n, a)];
                let q = self.mu_x[(n, a)] * precx;
                for s in 0..s_len {
                    let i = base + s;
                    let d = precx - prec[i];
                    let raw = 1.0 / d;
                    let (nv, clamped) = if d > 0.0 && (NU_MIN..=NU_MAX).contains(&raw) {
                        (raw, false)
                    } else {
                        (if d > 0.0 { raw.clamp(NU_MIN, NU_MAX) } else { NU_MAX }, true)
                    };
                    let mut mv = (q - num[i]) * nv;
                    let mut nv = nv;
                    if clamped {
                        self.clamp_events += 1;
                        mv = 0.5 * (mv + mu[i]);
                    } else if damping > 0.0 {
                        mv = damping * mu[i] + (1.0 - damping) * mv;
                        nv = damping * nu[i] + (1.0 - damping) * nv;
                    }
                    mu[i] = mv;
                    nu[i] = nv;
                    t_new[s] += p.g[i] * mv;
                    v_new[s] += p.g2[i] * nv;
                }
            }
            for s in 0..s_len {
                let nw = 1.0 / (self.lambda + 1.0 / v_new[s].max(1e-300));
                self.nu_w[(s, a)] = nw;
                self.mu_w[(s, a)] = (y_col[s] * self.lambda + t_new[s] / v_new[s].max(1e-300)) * nw;
            }
            self.mu_dw[a] = t_new;
            self.nu_dw[a] = v_new;
        }
        self.iteration += 1;
    }

    /// Mean-field updates of the row precisions, the Gamma shape and the
    /// noise precision.
    pub fn update_hyperparameters(&mut self, y: &CMatrix) {
        let nl = self.gamma.len();
        let m = self.m as f64;
        for n in 0..nl {
            let mut e = 0.0;
            for a in 0..self.m {
                e += self.mu_x[(n, a)].norm_sqr() + self.nu_x[(n, a)];
            }
            self.gamma[n] = (self.eps_hat + m) / (self.eta + e);
        }
        self.eps_hat = shape_estimate(&self.gamma);
        let mut acc = KahanSum::default();
        for a in 0..self.m {
            for s in 0..y.nrows() {
                acc.add((y[(s, a)] - self.mu_w[(s, a)]).norm_sqr() + self.nu_w[(s, a)]);
            }
        }
        let denom = acc.value();
        self.lambda = if denom > 0.0 {
            (y.nrows() * self.m) as f64 / denom
        } else {
            1e12
        };
    }
}

/// `0.5 sqrt(ln mean(gamma) - mean(ln gamma))`, radicand floored at 0.
pub fn shape_estimate(gamma: &[f64]) -> f64 {
    let n = gamma.len() as f64;
    let mean = gamma.iter().sum::<f64>() / n;
    let mean_ln = gamma.iter().map(|g| g.ln()).sum::<f64>() / n;
    0.5 * (mean.ln() - mean_ln).max(0.0).sqrt()
}

#[derive(Debug, Clone)]
pub struct SparseChannelEstimate {
    /// Posterior means, `NL x M`.
    pub x: CMatrix,
    pub gamma: Vec<f64>,
    pub lambda: f64,
    pub support: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub clamp_events: usize,
    pub trace: Vec<TraceRow>,
}

impl SparseChannelEstimate {
    pub fn row_energy(&self, row: usize) -> f64 {
        self.x.row(row).iter().map(|z| z.norm_sqr()).sum()
    }
}

/// Runs the message passing until the relative change drops below `tol`
/// or `max_iter` sweeps are done. `reference` only feeds the trace.
pub fn run_jadce(
    g: &CMatrix,
    y: &CMatrix,
    opts: &SblOptions,
    reference: Option<&CMatrix>,
) -> Result<SparseChannelEstimate> {
    if g.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "dictionary has {} rows, observation {}",
            g.nrows(),
            y.nrows()
        )));
    }
    let p = SblProblem::new(g);
    run_jadce_prepared(&p, y, opts, reference)
}

pub fn run_jadce_prepared(
    p: &SblProblem,
    y: &CMatrix,
    opts: &SblOptions,
    reference: Option<&CMatrix>,
) -> Result<SparseChannelEstimate> {
    let mut st = SblState::new(p, y.ncols());
    let mut prev = st.mu_x.clone();
    let mut converged = false;
    let mut trace = Vec::new();
    for _ in 0..opts.max_iter {
        st.sweep(p, y, opts.damping);
        st.update_hyperparameters(y);
        let diff: f64 = st
            .mu_x
            .iter()
            .zip(prev.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        let before: f64 = prev.iter().map(|z| z.norm_sqr()).sum();
        if opts.trace {
            let nmse_db = reference.map(|x0| {
                let e: f64 = st.mu_x.iter().zip(x0.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
                let d: f64 = x0.iter().map(|z| z.norm_sqr()).sum();
                10.0 * (e / d).log10()
            });
            trace.push(TraceRow {
                iteration: st.iteration,
                rel_change: if before > 0.0 { diff / before } else { f64::INFINITY },
                nmse_db,
                lambda: st.lambda,
                mean_gamma: st.gamma.iter().sum::<f64>() / st.gamma.len() as f64,
            });
        }
        if !st.mu_x.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::IllConditioned("message passing produced non-finite values".into()));
        }
        let stop = diff == 0.0 || diff < opts.tol * before;
        prev.copy_from(&st.mu_x);
        if stop {
            converged = true;
            break;
        }
    }
    Ok(SparseChannelEstimate {
        x: st.mu_x,
        gamma: st.gamma,
        lambda: st.lambda,
        support: Vec::new(),
        iterations: st.iteration,
        converged,
        clamp_events: st.clamp_events,
        trace,
    })
}

/// Default hard-decision threshold `c M / lambda`.
pub fn default_threshold(est: &SparseChannelEstimate, factor: f64) -> f64 {
    factor * est.x.ncols() as f64 / est.lambda
}

/// Rows whose energy exceeds `v`.
pub fn detect_support(est: &SparseChannelEstimate, v: f64) -> Vec<usize> {
    (0..est.x.nrows()).filter(|&r| est.row_energy(r) > v).collect()
}

pub fn write_trace_csv(path: &std::path::Path, trace: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,rel_change,nmse_db,lambda,mean_gamma")?;
    for r in trace {
        let nmse = r.nmse_db.map_or(String::new(), |v| format!("{v:.6}"));
        writeln!(
            f,
            "{},{:.6e},{},{:.6e},{:.6e}",
            r.iteration, r.rel_change, nmse, r.lambda, r.mean_gamma
        )?;
    }
    f.flush()?;
    Ok(())
}
