//! Monte Carlo orchestration: one trial runs users, channel, receiver and
//! metrics; a scenario sweeps noise levels over seeded trials.

use std::collections::BTreeSet;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use num_complex::Complex64;
use rand::RngCore;

use crate::analysis::bcrb;
use crate::channel::{
    attenuation, dictionary, draw_users, fd_slot, ground_truth_x, observe, ChannelModel, UserGroundTruth,
};
use crate::config::{ChannelKind, SystemConfig};
use crate::encoder::{build_codebook, derive_interleaver, Codebook, PayloadEncoding, TreeCode};
use crate::flat::{
    block_error_variance, codeword_amplitude, debias_factor, detect_rows, lmmse_preamble, lmmse_symbols,
    reestimate_channels, refine_offsets, stage_nodes,
};
use crate::gbcr::{build_graph, graph_dump_json, reconstruct_fd_channels, run_gb_cr2, GbCr2Output, GraphNode};
use crate::metrics::{ebn0_db, erroneous_paths, md_fa, noise_for_ebn0, Aggregator, MetricsReport, TrialOutcome, CSV_HEADER};
use crate::numerics::{frob2, Purpose, RngStream};
use crate::payload::{assemble_messages, bpsk_llrs, compensate_and_deinterleave, ldpc_decode, DecodedPayload};
use crate::sbl::{default_threshold, detect_support, run_jadce_prepared, SblProblem, TraceRow};
use crate::{CMatrix, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    FlatSync,
    FlatAsync,
    FsfSync,
    FsfAsync,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Self::FlatSync => "flat_sync",
            Self::FlatAsync => "flat_async",
            Self::FsfSync => "fsf_sync",
            Self::FsfAsync => "fsf_async",
        }
    }

    pub fn channel_kind(self) -> ChannelKind {
        match self {
            Self::FlatSync | Self::FlatAsync => ChannelKind::Flat,
            Self::FsfSync | Self::FsfAsync => ChannelKind::Fsf,
        }
    }

    pub fn is_sync(self) -> bool {
        matches!(self, Self::FlatSync | Self::FsfSync)
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat_sync" => Ok(Self::FlatSync),
            "flat_async" => Ok(Self::FlatAsync),
            "fsf_sync" => Ok(Self::FsfSync),
            "fsf_async" => Ok(Self::FsfAsync),
            _ => Err(Error::Config(format!("unknown scenario '{s}'"))),
        }
    }
}

/// How the sweep values are read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sweep {
    /// Total received SNR in dB.
    Snr,
    /// Eb/N0 in dB at a fixed symbol power in dB. Symbols are simulated at
    /// unit power, so only `P / N_0` enters the observation.
    Ebn0 { power_db: f64 },
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub scenario: Scenario,
    pub trials: usize,
    pub seed: u64,
    pub points: Vec<f64>,
    pub sweep: Sweep,
    pub model: ChannelModel,
    pub timing: bool,
    pub threads: usize,
}

impl RunOptions {
    pub fn new(scenario: Scenario, trials: usize, seed: u64, points: Vec<f64>) -> Self {
        Self {
            scenario,
            trials,
            seed,
            points,
            sweep: Sweep::Snr,
            model: ChannelModel::TimeDomain,
            timing: false,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Graph dump and SBL traces of one trial.
#[derive(Debug, Clone, Default)]
pub struct TrialDiagnostics {
    pub graph_json: String,
    pub sbl_traces: Vec<Vec<TraceRow>>,
}

/// Everything shared by the trials of a scenario.
pub struct Receiver {
    pub cfg: SystemConfig,
    pub scenario: Scenario,
    pub tree: TreeCode,
    pub codebook: Codebook,
    pub payload: Option<PayloadEncoding>,
    dict: Option<CMatrix>,
    problem: Option<SblProblem>,
}

impl Receiver {
    pub fn new(cfg: &SystemConfig, scenario: Scenario) -> Result<Self> {
        if cfg.channel_kind != scenario.channel_kind() {
            return Err(Error::Config(format!(
                "scenario {} needs a {:?} configuration",
                scenario.name(),
                scenario.channel_kind()
            )));
        }
        let mut cfg = cfg.clone();
        if scenario.is_sync() {
            cfg.make_sync();
        }
        let cfg = cfg.validated()?;
        let tree = TreeCode::new(cfg.subblock_len, &cfg.parity_alloc, cfg.tree_seed)?;
        let codebook = build_codebook(&cfg, cfg.codebook_seed)?;
        let (payload, dict, problem) = match cfg.channel_kind {
            ChannelKind::Flat => (Some(PayloadEncoding::new(&cfg)?), None, None),
            ChannelKind::Fsf => {
                let g = dictionary(&codebook, &cfg);
                let p = SblProblem::new(&g);
                (None, Some(g), Some(p))
            }
        };
        Ok(Self {
            cfg,
            scenario,
            tree,
            codebook,
            payload,
            dict,
            problem,
        })
    }

    /// Users of trial `trial`, shared by every sweep point.
    pub fn draw(&self, seed: u64, trial: u64) -> Result<Vec<UserGroundTruth>> {
        let mut rng = RngStream::derive(seed, trial, 0, Purpose::Users).rng();
        draw_users(&self.cfg, &self.tree, self.payload.as_ref(), &mut rng)
    }

    pub fn run_trial(
        &self,
        seed: u64,
        trial: u64,
        point: usize,
        noise_var: f64,
        model: ChannelModel,
    ) -> Result<TrialOutcome> {
        self.run_trial_with(seed, trial, point, noise_var, model, false).map(|r| r.0)
    }

    pub fn run_trial_with(
        &self,
        seed: u64,
        trial: u64,
        point: usize,
        noise_var: f64,
        model: ChannelModel,
        diagnostics: bool,
    ) -> Result<(TrialOutcome, Option<TrialDiagnostics>)> {
        let users = self.draw(seed, trial)?;
        // the user slot of the noise stream carries the sweep point
        let mut nrng = RngStream::derive(seed, trial, point as u64 + 1, Purpose::Noise).rng();
        let with_coding = self.payload.is_some();
        let obs = observe(&users, &self.codebook, &self.cfg, model, noise_var, with_coding, &mut nrng);
        let mut out = TrialOutcome {
            trial,
            seed: nrng.next_u64(),
            ..Default::default()
        };
        let mut diag = diagnostics.then(TrialDiagnostics::default);
        match self.cfg.channel_kind {
            ChannelKind::Fsf => self.fsf_receiver(&users, &obs.preamble, noise_var, &mut out, diag.as_mut())?,
            ChannelKind::Flat => {
                let yc = obs.coding.as_ref().expect("coding part simulated");
                self.flat_receiver(&users, &obs.preamble, yc, noise_var, &mut out, diag.as_mut())?
            }
        }
        Ok((out, diag))
    }

    fn finish_paths(&self, users: &[UserGroundTruth], tree_paths: &[Vec<usize>], res: &GbCr2Output, out: &mut TrialOutcome) {
        let truth: Vec<Vec<usize>> = users.iter().map(|u| u.indices.clone()).collect();
        out.ep_tree = erroneous_paths(&truth, tree_paths);
        let got: Vec<Vec<usize>> = res.users.iter().map(|u| u.indices.clone()).collect();
        out.ep_gbcr2 = erroneous_paths(&truth, &got);
        out.k_hat = res.k_hat();
    }

    fn fsf_receiver(
        &self,
        users: &[UserGroundTruth],
        slots: &[CMatrix],
        _noise_var: f64,
        out: &mut TrialOutcome,
        mut diag: Option<&mut TrialDiagnostics>,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let (g, p) = (self.dict.as_ref().expect("fsf"), self.problem.as_ref().expect("fsf"));
        let mut opts = cfg.sbl_options();
        opts.trace = diag.is_some();
        let (mut err, mut den) = (0.0, 0.0);
        let mut stages = Vec::with_capacity(slots.len());
        for (t, y) in slots.iter().enumerate() {
            let x0 = ground_truth_x(users, cfg, t + 1)?;
            let est = run_jadce_prepared(p, y, &opts, Some(&x0))?;
            out.sbl_iterations += est.iterations;
            out.sbl_not_converged += usize::from(!est.converged);
            err += frob2(&(&est.x - &x0));
            den += frob2(&x0);
            let support = detect_support(&est, default_threshold(&est, cfg.support_threshold_factor));
            let per_row = if support.is_empty() {
                0.0
            } else {
                let var: Vec<f64> = support.iter().map(|&r| 1.0 / est.gamma[r]).collect();
                bcrb(&g.select_columns(&support), &var, 1.0 / est.lambda, 1)? / support.len() as f64
            };
            let nodes: Vec<GraphNode> = reconstruct_fd_channels(&est.x, &support, cfg)
                .into_iter()
                .map(|(index, b)| GraphNode {
                    index,
                    block: b.block,
                    err_var: per_row * b.rows as f64 / cfg.n_fft as f64,
                })
                .collect();
            stages.push(nodes);
            if let Some(d) = diag.as_deref_mut() {
                d.sbl_traces.push(est.trace);
            }
        }
        out.nmse = if den > 0.0 { err / den } else { f64::NAN };
        let (mut graph, tree) = build_graph(stages, &self.tree, cfg);
        let res = run_gb_cr2(&mut graph, &self.tree, cfg)?;
        if let Some(d) = diag {
            d.graph_json = graph_dump_json(&graph);
        }
        self.finish_paths(users, &tree.paths, &res, out);
        // messages are the preamble bits
        let truth: Vec<Vec<u8>> = users.iter().map(|u| u.bits[..cfg.preamble_bits].to_vec()).collect();
        let list: BTreeSet<Vec<u8>> = res.users.iter().map(|u| u.preamble_bits.clone()).collect();
        (out.p_md, out.p_fa) = md_fa(&truth, &list);
        let fee: Vec<f64> = res
            .users
            .iter()
            .filter_map(|r| {
                users
                    .iter()
                    .find(|u| u.bits[..cfg.preamble_bits] == r.preamble_bits[..])
                    .map(|u| (r.cfo - u.cfo).abs())
            })
            .collect();
        out.fee = mean(&fee);
        Ok(())
    }

    fn flat_receiver(
        &self,
        users: &[UserGroundTruth],
        slots: &[CMatrix],
        yc: &CMatrix,
        noise_var: f64,
        out: &mut TrialOutcome,
        diag: Option<&mut TrialDiagnostics>,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let pe = self.payload.as_ref().expect("flat payload");
        let c = codeword_amplitude(cfg);
        let ev = block_error_variance(cfg, noise_var);
        let (mut err, mut den) = (0.0, 0.0);
        let mut stages = Vec::with_capacity(slots.len());
        for (t, y) in slots.iter().enumerate() {
            let x = lmmse_preamble(y, cfg, noise_var)?;
            let x0 = fd_slot(users, &self.codebook, cfg, t + 1) / Complex64::new(c, 0.0);
            err += frob2(&(&x - &x0));
            den += frob2(&x0);
            stages.push(stage_nodes(&x, &detect_rows(&x, cfg, noise_var), ev));
        }
        out.nmse = if den > 0.0 { err / den } else { f64::NAN };
        let (mut graph, tree) = build_graph(stages, &self.tree, cfg);
        let original = graph.clone();
        let res = run_gb_cr2(&mut graph, &self.tree, cfg)?;
        if let Some(d) = diag {
            d.graph_json = graph_dump_json(&graph);
        }
        self.finish_paths(users, &tree.paths, &res, out);
        let truth: Vec<Vec<u8>> = users.iter().map(|u| u.bits.clone()).collect();
        if res.users.is_empty() {
            (out.p_md, out.p_fa) = md_fa(&truth, &BTreeSet::new());
            return Ok(());
        }
        let scale = Complex64::new(debias_factor(cfg, noise_var), 0.0);
        let stack = |hs: &[CMatrix]| {
            let mut h = CMatrix::zeros(hs.len(), cfg.n_antennas);
            for (k, v) in hs.iter().enumerate() {
                h.set_row(k, &(v.row(0) * scale));
            }
            h
        };
        let coarse: Vec<CMatrix> = res.users.iter().map(|u| u.channel.clone()).collect();
        let h1 = stack(&coarse);
        let s1 = lmmse_symbols(yc, &h1, noise_var)?;
        let pis: Vec<Vec<usize>> = res
            .users
            .iter()
            .map(|u| derive_interleaver(&u.indices, cfg.coding_len(), cfg.interleaver_seed))
            .collect();
        let refined: Vec<usize> = res
            .users
            .iter()
            .enumerate()
            .map(|(k, u)| {
                let row: Vec<Complex64> = s1.s.row(k).iter().copied().collect();
                refine_offsets(&u.candidates, &row, &pis[k], pe.code.n, &graph.grid, cfg)
            })
            .collect();
        let fine = reestimate_channels(&original, &res.users, &refined);
        let h2 = stack(&fine);
        let s2 = lmmse_symbols(yc, &h2, noise_var)?;
        let mut decoded: Vec<DecodedPayload> = Vec::with_capacity(res.users.len());
        for (k, &gk) in refined.iter().enumerate() {
            let (to, eps) = graph.grid.pair(gk);
            let row: Vec<Complex64> = s2.s.row(k).iter().copied().collect();
            let soft = compensate_and_deinterleave(&row, to, eps, &pis[k], pe, cfg);
            decoded.push(ldpc_decode(&bpsk_llrs(&soft, s2.gain[k]), pe, cfg.ldpc_max_iter)?);
        }
        let list = assemble_messages(res.users.iter().zip(&decoded).map(|(u, d)| (&u.preamble_bits[..], d)));
        (out.p_md, out.p_fa) = md_fa(&truth, &list);

        // offsets of users whose full message was recovered
        let (mut tee, mut fee) = (Vec::new(), Vec::new());
        for (k, u) in res.users.iter().enumerate() {
            if !decoded[k].converged {
                continue;
            }
            let mut msg = u.preamble_bits.clone();
            msg.extend_from_slice(&decoded[k].bits);
            if let Some(t) = users.iter().find(|x| x.bits == msg) {
                let (to, eps) = graph.grid.pair(refined[k]);
                tee.push((to as f64 - t.to as f64).abs());
                fee.push((eps - t.cfo).abs());
            }
        }
        out.tee = mean(&tee);
        out.fee = mean(&fee);

        // path-associated users: offsets and channels before and after refinement
        let (mut ct, mut cf, mut rt, mut rf, mut nb, mut na) = (vec![], vec![], vec![], vec![], vec![], vec![]);
        for (k, u) in res.users.iter().enumerate() {
            let Some(t) = users.iter().find(|x| x.indices == u.indices) else {
                continue;
            };
            let (to0, e0) = graph.grid.pair(u.grid_index);
            let (to1, e1) = graph.grid.pair(refined[k]);
            ct.push((to0 as f64 - t.to as f64).abs());
            cf.push((e0 - t.cfo).abs());
            rt.push((to1 as f64 - t.to as f64).abs());
            rf.push((e1 - t.cfo).abs());
            let amp = attenuation(t.cfo, cfg.n_fft).norm();
            let h_true = CMatrix::from_fn(1, cfg.n_antennas, |_, m| t.taps[0].gains[m] * amp);
            let d = frob2(&h_true);
            nb.push(frob2(&(&h1.rows(k, 1).into_owned() - &h_true)) / d);
            na.push(frob2(&(&h2.rows(k, 1).into_owned() - &h_true)) / d);
        }
        out.coarse_tee = mean(&ct);
        out.coarse_fee = mean(&cf);
        out.refined_tee = mean(&rt);
        out.refined_fee = mean(&rf);
        out.channel_nmse_before = mean(&nb);
        out.channel_nmse_after = mean(&na);
        Ok(())
    }

    /// Noise variance and reported Eb/N0 of a sweep value.
    pub fn noise_of(&self, sweep: Sweep, value: f64) -> (f64, f64, f64) {
        match sweep {
            Sweep::Snr => {
                let nv = self.cfg.noise_for_snr(value);
                (nv, value, ebn0_db(&self.cfg, 1.0, nv))
            }
            Sweep::Ebn0 { power_db } => {
                // unit-power symbols at noise N_0 / P keep P / N_0 unchanged
                let p = 10f64.powf(power_db / 10.0);
                let nv = noise_for_ebn0(&self.cfg, p, value) / p;
                let snr = 10.0 * (self.cfg.noise_for_snr(0.0) / nv).log10();
                (nv, snr, value)
            }
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs `f(trial)` for every trial on up to `threads` workers; results are
/// returned in trial order.
pub fn parallel_trials<T: Send>(trials: usize, threads: usize, f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, trials.max(1));
    let mut parts: Vec<Vec<(usize, T)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= trials {
                            break mine;
                        }
                        mine.push((i, f(i as u64)));
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("trial worker panicked")).collect()
    });
    let mut all: Vec<(usize, T)> = parts.drain(..).flatten().collect();
    all.sort_by_key(|(i, _)| *i);
    all.into_iter().map(|(_, t)| t).collect()
}

/// Per-trial outcomes for every sweep point.
pub fn run_outcomes(rx: &Receiver, opts: &RunOptions) -> Vec<Vec<Result<TrialOutcome>>> {
    opts.points
        .iter()
        .enumerate()
        .map(|(pi, &v)| {
            let (nv, _, _) = rx.noise_of(opts.sweep, v);
            parallel_trials(opts.trials, opts.threads, |t| rx.run_trial(opts.seed, t, pi, nv, opts.model))
        })
        .collect()
}

pub fn model_name(m: ChannelModel) -> &'static str {
    match m {
        ChannelModel::TimeDomain => "td",
        ChannelModel::FreqDomain => "fd",
    }
}

/// One report per sweep point.
pub fn run_scenario(cfg: &SystemConfig, opts: &RunOptions) -> Result<Vec<MetricsReport>> {
    let rx = Receiver::new(cfg, opts.scenario)?;
    let mut reports = Vec::with_capacity(opts.points.len());
    for (pi, &v) in opts.points.iter().enumerate() {
        let (nv, snr, ebn0) = rx.noise_of(opts.sweep, v);
        let start = Instant::now();
        let outcomes = parallel_trials(opts.trials, opts.threads, |t| rx.run_trial(opts.seed, t, pi, nv, opts.model));
        let mut agg = Aggregator::default();
        for o in &outcomes {
            match o {
                Ok(o) => agg.push(o),
                Err(_) => agg.push_failure(),
            }
        }
        let mut r = agg.finish(opts.scenario.name(), model_name(opts.model), snr, ebn0);
        if opts.timing {
            r.seconds = Some(start.elapsed().as_secs_f64());
        }
        reports.push(r);
    }
    Ok(reports)
}

pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn to_json(reports: &[MetricsReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}
