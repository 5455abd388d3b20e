//! Per-trial outcomes, their aggregation and the reported figures of merit.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::config::SystemConfig;
use crate::numerics::KahanSum;
use crate::CMatrix;

/// `10 log10(||S||^2 / (rows M s2))`, `+inf` when noise-free.
pub fn measured_snr_db(clean: &[CMatrix], noise_var: f64) -> f64 {
    let rows: usize = clean.iter().map(|c| c.len()).sum();
    let e: f64 = clean.iter().flat_map(|c| c.iter()).map(|z| z.norm_sqr()).sum();
    if noise_var <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (e / (rows as f64 * noise_var)).log10()
}

/// `10 log10(L_tot P / (B N_0))`.
pub fn ebn0_db(cfg: &SystemConfig, power: f64, noise_var: f64) -> f64 {
    if noise_var <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (cfg.total_channel_uses as f64 * power / (cfg.msg_bits as f64 * noise_var)).log10()
}

/// Noise variance giving `ebn0` dB at symbol power `power`.
pub fn noise_for_ebn0(cfg: &SystemConfig, power: f64, ebn0: f64) -> f64 {
    cfg.total_channel_uses as f64 * power / (cfg.msg_bits as f64 * 10f64.powf(ebn0 / 10.0))
}

/// `(P_md, P_fa)` of a recovered list against the transmitted messages.
/// Duplicate transmissions count once in the list comparison.
pub fn md_fa(truth: &[Vec<u8>], list: &BTreeSet<Vec<u8>>) -> (f64, f64) {
    let p_md = if truth.is_empty() {
        0.0
    } else {
        truth.iter().filter(|m| !list.contains(*m)).count() as f64 / truth.len() as f64
    };
    let sent: BTreeSet<&Vec<u8>> = truth.iter().collect();
    let p_fa = if list.is_empty() {
        0.0
    } else {
        list.iter().filter(|m| !sent.contains(m)).count() as f64 / list.len() as f64
    };
    (p_md, p_fa)
}

/// Missed plus false paths of a path list against the true index tuples.
pub fn erroneous_paths(truth: &[Vec<usize>], paths: &[Vec<usize>]) -> usize {
    let t: BTreeSet<&Vec<usize>> = truth.iter().collect();
    let p: BTreeSet<&Vec<usize>> = paths.iter().collect();
    t.difference(&p).count() + p.difference(&t).count()
}

/// Everything measured in one trial.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrialOutcome {
    pub trial: u64,
    pub seed: u64,
    /// Linear NMSE of the preamble channel estimates.
    pub nmse: f64,
    /// Mean absolute TO / CFO error over associated users, `None` when no
    /// user was associated or TO is not estimated.
    pub tee: Option<f64>,
    pub fee: Option<f64>,
    pub p_md: f64,
    pub p_fa: f64,
    pub ep_tree: usize,
    pub ep_gbcr2: usize,
    pub k_hat: usize,
    /// Offset errors on path-associated users before and after refinement.
    pub coarse_tee: Option<f64>,
    pub coarse_fee: Option<f64>,
    pub refined_tee: Option<f64>,
    pub refined_fee: Option<f64>,
    /// Mean channel NMSE of path-associated users before and after
    /// re-estimation.
    pub channel_nmse_before: Option<f64>,
    pub channel_nmse_after: Option<f64>,
    /// SBL sweeps summed over slots and the number of non-converged runs.
    pub sbl_iterations: usize,
    pub sbl_not_converged: usize,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Moment {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

/// Kahan-compensated running mean and standard error.
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    sum: KahanSum,
    sum2: KahanSum,
    n: usize,
}

impl Accumulator {
    pub fn push(&mut self, x: f64) {
        self.sum.add(x);
        self.sum2.add(x * x);
        self.n += 1;
    }

    pub fn push_opt(&mut self, x: Option<f64>) {
        if let Some(v) = x {
            self.push(v);
        }
    }

    pub fn moment(&self) -> Moment {
        if self.n == 0 {
            return Moment {
                mean: f64::NAN,
                stderr: f64::NAN,
                count: 0,
            };
        }
        let n = self.n as f64;
        let mean = self.sum.value() / n;
        let var = if self.n > 1 {
            ((self.sum2.value() - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Moment {
            mean,
            stderr: (var / n).sqrt(),
            count: self.n,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub channel_model: String,
    pub snr_db: f64,
    pub ebn0_db: f64,
    pub trials: usize,
    pub failed_trials: usize,
    pub nmse_db: f64,
    pub nmse: Moment,
    pub tee: Moment,
    pub fee: Moment,
    pub p_md: Moment,
    pub p_fa: Moment,
    pub p_e: f64,
    pub ep_tree: Moment,
    pub ep_gbcr2: Moment,
    pub k_hat: Moment,
    pub seconds: Option<f64>,
}

/// Streams trial outcomes into a report.
#[derive(Debug, Clone, Default)]
pub struct Aggregator {
    nmse: Accumulator,
    tee: Accumulator,
    fee: Accumulator,
    p_md: Accumulator,
    p_fa: Accumulator,
    ep_tree: Accumulator,
    ep_gbcr2: Accumulator,
    k_hat: Accumulator,
    trials: usize,
    failed: usize,
}

impl Aggregator {
    pub fn push(&mut self, o: &TrialOutcome) {
        self.trials += 1;
        self.nmse.push(o.nmse);
        self.tee.push_opt(o.tee);
        self.fee.push_opt(o.fee);
        self.p_md.push(o.p_md);
        self.p_fa.push(o.p_fa);
        self.ep_tree.push(o.ep_tree as f64);
        self.ep_gbcr2.push(o.ep_gbcr2 as f64);
        self.k_hat.push(o.k_hat as f64);
    }

    pub fn push_failure(&mut self) {
        self.trials += 1;
        self.failed += 1;
    }

    pub fn finish(&self, scenario: &str, channel_model: &str, snr_db: f64, ebn0_db: f64) -> MetricsReport {
        let nmse = self.nmse.moment();
        let (md, fa) = (self.p_md.moment(), self.p_fa.moment());
        MetricsReport {
            scenario: scenario.to_string(),
            channel_model: channel_model.to_string(),
            snr_db,
            ebn0_db,
            trials: self.trials,
            failed_trials: self.failed,
            nmse_db: 10.0 * nmse.mean.log10(),
            nmse,
            tee: self.tee.moment(),
            fee: self.fee.moment(),
            p_md: md,
            p_fa: fa,
            p_e: md.mean + fa.mean,
            ep_tree: self.ep_tree.moment(),
            ep_gbcr2: self.ep_gbcr2.moment(),
            k_hat: self.k_hat.moment(),
            seconds: None,
        }
    }
}

pub const CSV_HEADER: &str =
    "scenario,snr_db,ebn0_db,trials,nmse_db,tee,fee,p_md,p_fa,p_e,ep_tree,ep_gbcr2,k_hat_mean,seconds";

fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.6e}")
    }
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        [
            self.scenario.clone(),
            format!("{:.3}", self.snr_db),
            format!("{:.3}", self.ebn0_db),
            self.trials.to_string(),
            num(self.nmse_db),
            num(self.tee.mean),
            num(self.fee.mean),
            num(self.p_md.mean),
            num(self.p_fa.mean),
            num(self.p_e),
            num(self.ep_tree.mean),
            num(self.ep_gbcr2.mean),
            num(self.k_hat.mean),
            self.seconds.map(|s| format!("{s:.3}")).unwrap_or_default(),
        ]
        .join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PresetKind;

    #[test]
    fn perfect_recovery() {
        let truth = vec![vec![0u8, 1], vec![1, 1]];
        let list: BTreeSet<Vec<u8>> = truth.iter().cloned().collect();
        assert_eq!(md_fa(&truth, &list), (0.0, 0.0));
    }

    #[test]
    fn phantom_message() {
        let truth: Vec<Vec<u8>> = (0..10u8).map(|i| vec![i]).collect();
        let mut list: BTreeSet<Vec<u8>> = truth.iter().cloned().collect();
        list.insert(vec![99]);
        let (md, fa) = md_fa(&truth, &list);
        assert_eq!(md, 0.0);
        assert!((fa - 1.0 / 11.0).abs() < 1e-15);
        let (md, fa) = md_fa(&truth, &BTreeSet::new());
        assert_eq!((md, fa), (1.0, 0.0));
    }

    #[test]
    fn permutation_invariance() {
        let truth: Vec<Vec<u8>> = vec![vec![1], vec![2], vec![3]];
        let rev: Vec<Vec<u8>> = truth.iter().rev().cloned().collect();
        let list: BTreeSet<Vec<u8>> = [vec![2u8], vec![7]].into_iter().collect();
        assert_eq!(md_fa(&truth, &list), md_fa(&rev, &list));
    }

    #[test]
    fn snr_and_ebn0_values() {
        let mut cfg = SystemConfig::preset(PresetKind::Flat);
        cfg.msg_bits = 100;
        cfg.total_channel_uses = 3200;
        assert!((ebn0_db(&cfg, 1.0, 1.0) - 15.0515).abs() < 1e-4);
        assert!((noise_for_ebn0(&cfg, 1.0, ebn0_db(&cfg, 1.0, 0.37)) - 0.37).abs() < 1e-12);
        let s = vec![CMatrix::from_element(4, 2, num_complex::Complex64::new(1.0, 0.0))];
        let a = measured_snr_db(&s, 0.1);
        assert!((a - measured_snr_db(&s, 0.2) - 10.0 * 2f64.log10()).abs() < 1e-12);
        assert!((a - 10.0).abs() < 1e-12);
        assert_eq!(measured_snr_db(&s, 0.0), f64::INFINITY);
    }

    #[test]
    fn streamed_mean_matches_batch() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64 * 1e-3 + 1e6).collect();
        let mut a = Accumulator::default();
        xs.iter().for_each(|&x| a.push(x));
        let batch = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((a.moment().mean - batch).abs() <= 1e-12 * batch);
    }

    #[test]
    fn erroneous_path_count() {
        let truth = vec![vec![1, 2], vec![3, 4]];
        assert_eq!(erroneous_paths(&truth, &[vec![1, 2], vec![5, 6], vec![7, 8]]), 3);
        assert_eq!(erroneous_paths(&truth, &truth), 0);
    }

    #[test]
    fn csv_row_shape() {
        let agg = Aggregator::default();
        let r = agg.finish("flat_sync", "td", 6.0, 10.0);
        assert_eq!(r.csv_row().split(',').count(), CSV_HEADER.split(',').count());
    }
}
