//! Scenario constants, presets and validation.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Flat,
    Fsf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    Gaussian,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetKind {
    Flat,
    Fsf,
    DeskFlat,
    DeskFsf,
}

impl std::str::FromStr for PresetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Self::Flat),
            "fsf" => Ok(Self::Fsf),
            "desk_flat" => Ok(Self::DeskFlat),
            "desk_fsf" => Ok(Self::DeskFsf),
            _ => Err(Error::Config(format!("unknown preset '{s}'"))),
        }
    }
}

/// Every scenario constant. Serialized as a flat key/value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub n_fft: usize,
    pub subcarrier_spacing: f64,
    /// Preamble subcarriers (1-based).
    pub occupied: Vec<usize>,
    /// Subcarriers of the coding part (1-based).
    pub coding_occupied: Vec<usize>,
    pub cp_len: usize,
    pub n_antennas: usize,
    pub n_active: usize,
    pub preamble_slots: usize,
    pub coding_slots: usize,
    pub subblock_len: usize,
    pub parity_alloc: Vec<usize>,
    pub msg_bits: usize,
    pub preamble_bits: usize,
    pub coding_bits: usize,
    pub total_channel_uses: usize,
    /// Candidate timing offsets in samples.
    pub to_grid: Vec<usize>,
    /// Candidate normalized CFOs.
    pub cfo_grid: Vec<f64>,
    pub cfo_max: f64,
    /// Inclusive range of the number of taps per user.
    pub tap_count_range: [usize; 2],
    /// Tap delays are drawn from `[0, delay_spread)`.
    pub delay_spread: usize,
    pub noise_variance: f64,
    /// Per-tap gain variance; `None` means `1 / L_k`.
    pub tap_power: Option<f64>,
    pub channel_kind: ChannelKind,
    pub codebook_kind: CodebookKind,
    /// Identity codebook scaled by `sqrt(L_p)` instead of unit columns.
    pub identity_scaled: bool,
    /// Optional alist file with the payload parity-check matrix.
    pub ldpc_alist: Option<String>,
    pub tree_seed: u64,
    pub codebook_seed: u64,
    pub interleaver_seed: u64,
    pub ldpc_seed: u64,
    pub rho_list_len: usize,
    pub collision_test_level: f64,
    pub validity_bound: f64,
    pub sbl_max_iter: usize,
    pub sbl_tol: f64,
    /// Message damping of the channel estimator, in `[0, 1)`.
    pub sbl_damping: f64,
    pub support_threshold_factor: f64,
    pub ldpc_max_iter: usize,
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

impl SystemConfig {
    pub fn preset(kind: PresetKind) -> Self {
        match kind {
            PresetKind::Flat => Self::flat(),
            PresetKind::Fsf => Self::fsf(),
            PresetKind::DeskFlat => Self {
                n_active: 10,
                ..Self::flat()
            },
            PresetKind::DeskFsf => {
                let mut c = Self::fsf();
                c.n_fft = 512;
                c.occupied = (1..=256).collect();
                c.coding_occupied = (1..=64).collect();
                c.cp_len = 16;
                c.n_antennas = 8;
                c.n_active = 10;
                c.subblock_len = 6;
                c.parity_alloc = vec![0, 0, 6, 6];
                c.preamble_bits = 12;
                c.coding_bits = 88;
                c.delay_spread = 10;
                c.to_grid = (1..=5).collect();
                c.tap_count_range = [5, 5];
                c.total_channel_uses = 256 * 4 + 64 * 21;
                c
            }
        }
    }

    fn flat() -> Self {
        let eps = 0.0133;
        Self {
            n_fft: 2048,
            subcarrier_spacing: 15e3,
            occupied: (1..=128).collect(),
            coding_occupied: (1..=128).collect(),
            cp_len: 72,
            n_antennas: 16,
            n_active: 50,
            preamble_slots: 4,
            coding_slots: 21,
            subblock_len: 7,
            parity_alloc: vec![0, 0, 7, 7],
            msg_bits: 100,
            preamble_bits: 14,
            coding_bits: 86,
            total_channel_uses: 3200,
            to_grid: (1..=9).collect(),
            cfo_grid: linspace(-eps, eps, 9),
            cfo_max: eps,
            tap_count_range: [1, 1],
            delay_spread: 1,
            noise_variance: 1.0,
            tap_power: None,
            channel_kind: ChannelKind::Flat,
            codebook_kind: CodebookKind::Identity,
            identity_scaled: false,
            ldpc_alist: None,
            tree_seed: 0x7265_6531,
            codebook_seed: 0x636f_6462,
            interleaver_seed: 0x696e_746c,
            ldpc_seed: 0x6c64_7063,
            rho_list_len: 5,
            collision_test_level: 0.05,
            validity_bound: 0.05,
            sbl_max_iter: 80,
            sbl_tol: 3e-5,
            sbl_damping: crate::sbl::DEFAULT_DAMPING,
            support_threshold_factor: 3.0,
            ldpc_max_iter: 50,
        }
    }

    fn fsf() -> Self {
        Self {
            occupied: (1..=1024).collect(),
            subblock_len: 12,
            parity_alloc: vec![0, 0, 12, 12],
            preamble_bits: 24,
            coding_bits: 76,
            total_channel_uses: 6874,
            tap_count_range: [5, 15],
            // 2 us at 30.72 MHz sampling
            delay_spread: 61,
            channel_kind: ChannelKind::Fsf,
            codebook_kind: CodebookKind::Gaussian,
            ..Self::flat()
        }
    }

    /// Preamble length `L_p = S`.
    pub fn n_sub(&self) -> usize {
        self.occupied.len()
    }

    /// Codebook size `N = 2^J`.
    pub fn n_codewords(&self) -> usize {
        1usize << self.subblock_len
    }

    /// Coding-part length `L_c`.
    pub fn coding_len(&self) -> usize {
        self.coding_occupied.len() * self.coding_slots
    }

    /// Information bits per stage, `b_t = J - p_t`.
    pub fn info_bits_per_stage(&self) -> Vec<usize> {
        self.parity_alloc
            .iter()
            .map(|&p| self.subblock_len.saturating_sub(p))
            .collect()
    }

    /// Largest tap index `tau_{k,l} + tau_k` a user can produce.
    pub fn max_tap_index(&self) -> usize {
        self.delay_spread.saturating_sub(1) + self.to_grid.iter().copied().max().unwrap_or(0)
    }

    /// Energy of one preamble codeword.
    /// Noise variance for a total received SNR `snr_db` over all active users.
    pub fn noise_for_snr(&self, snr_db: f64) -> f64 {
        self.n_active.max(1) as f64 * self.codeword_energy() / (self.n_sub() as f64 * 10f64.powf(snr_db / 10.0))
    }

    pub fn sbl_options(&self) -> crate::sbl::SblOptions {
        crate::sbl::SblOptions {
            max_iter: self.sbl_max_iter,
            tol: self.sbl_tol,
            damping: self.sbl_damping,
            trace: false,
        }
    }

    pub fn codeword_energy(&self) -> f64 {
        match (self.codebook_kind, self.identity_scaled) {
            (CodebookKind::Identity, false) => 1.0,
            _ => self.n_sub() as f64,
        }
    }

    /// Switch to perfectly synchronized users.
    pub fn make_sync(&mut self) {
        self.to_grid = vec![0];
        self.cfo_grid = vec![0.0];
        self.cfo_max = 0.0;
    }

    /// Every violated invariant, named by field.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        let mut bad = |m: String| errs.push(m);
        if self.n_fft == 0 {
            bad("n_fft: must be positive".into());
        }
        if self.occupied.is_empty() {
            bad("occupied: empty subcarrier set".into());
        }
        for (name, set) in [("occupied", &self.occupied), ("coding_occupied", &self.coding_occupied)] {
            if set.iter().any(|&s| s == 0 || s > self.n_fft) {
                bad(format!("{name}: indices must lie in [1, n_fft]"));
            }
            let mut v = set.clone();
            v.sort_unstable();
            v.dedup();
            if v.len() != set.len() {
                bad(format!("{name}: duplicate subcarrier index"));
            }
        }
        if self.n_antennas == 0 {
            bad("n_antennas: must be positive".into());
        }
        if self.preamble_slots < 2 {
            bad("preamble_slots: needs at least 2 slots".into());
        }
        if self.subblock_len == 0 || self.subblock_len > 24 {
            bad("subblock_len: must lie in [1, 24]".into());
        }
        if self.parity_alloc.len() != self.preamble_slots {
            bad(format!(
                "parity_alloc: length {} differs from preamble_slots {}",
                self.parity_alloc.len(),
                self.preamble_slots
            ));
        }
        if self.parity_alloc.first().copied().unwrap_or(0) != 0 {
            bad("parity_alloc: first stage must carry no parity".into());
        }
        if self.parity_alloc.iter().any(|&p| p > self.subblock_len) {
            bad("parity_alloc: entries must not exceed subblock_len".into());
        }
        let bp: usize = self.info_bits_per_stage().iter().sum();
        if bp != self.preamble_bits {
            bad(format!(
                "preamble_bits: parity allocation implies {bp}, configured {}",
                self.preamble_bits
            ));
        }
        if self.preamble_bits + self.coding_bits != self.msg_bits {
            bad("msg_bits: must equal preamble_bits + coding_bits".into());
        }
        if self.cp_len <= self.max_tap_index() {
            bad(format!(
                "cp_len: no-ISI condition violated (cp_len {} <= delay_spread - 1 + max(to_grid) = {})",
                self.cp_len,
                self.max_tap_index()
            ));
        }
        if self.cp_len > self.n_fft {
            bad("cp_len: longer than n_fft".into());
        }
        if self.delay_spread == 0 {
            bad("delay_spread: must be at least 1".into());
        }
        let [lo, hi] = self.tap_count_range;
        if lo == 0 || lo > hi {
            bad("tap_count_range: need 1 <= min <= max".into());
        }
        if hi > self.delay_spread {
            bad("tap_count_range: more taps than distinct delays".into());
        }
        if self.channel_kind == ChannelKind::Flat && (hi != 1 || self.delay_spread != 1) {
            bad("tap_count_range: flat fading uses a single tap at delay 0".into());
        }
        if self.to_grid.is_empty() {
            bad("to_grid: empty".into());
        }
        if self.cfo_grid.is_empty() {
            bad("cfo_grid: empty".into());
        }
        let want = linspace(-self.cfo_max, self.cfo_max, self.cfo_grid.len());
        if self.cfo_max < 0.0
            || self
                .cfo_grid
                .iter()
                .zip(&want)
                .any(|(a, b)| (a - b).abs() > 1e-12 * self.cfo_max.max(1e-300))
        {
            bad("cfo_grid: must be uniform over [-cfo_max, cfo_max]".into());
        }
        if self.codebook_kind == CodebookKind::Identity && self.n_codewords() != self.n_sub() {
            bad("codebook_kind: identity codebook needs 2^subblock_len == |occupied|".into());
        }
        if self.noise_variance < 0.0 {
            bad("noise_variance: must be nonnegative".into());
        }
        if let Some(p) = self.tap_power {
            if p <= 0.0 {
                bad("tap_power: must be positive".into());
            }
        }
        if !(0.0 < self.collision_test_level && self.collision_test_level < 1.0) {
            bad("collision_test_level: must lie in (0, 1)".into());
        }
        if !(0.0 < self.validity_bound && self.validity_bound < 1.0) {
            bad("validity_bound: must lie in (0, 1)".into());
        }
        if self.rho_list_len == 0 {
            bad("rho_list_len: must be positive".into());
        }
        if self.sbl_max_iter == 0 {
            bad("sbl_max_iter: must be positive".into());
        }
        if !(0.0..1.0).contains(&self.sbl_damping) {
            bad("sbl_damping: must lie in [0, 1)".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn validated(self) -> Result<Self> {
        self.validate().map_err(Error::Invalid)?;
        Ok(self)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file. Keys absent from the file keep the values of
    /// `base`.
    pub fn load_over(base: &Self, text: &str) -> Result<Self> {
        let patch: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        let mut table = base.as_table();
        for (k, v) in patch {
            table.insert(k, v);
        }
        Self::from_table(table)
    }

    /// Applies one `key=value` override; the value is parsed as TOML and
    /// falls back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override '{assignment}' lacks '='")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut table = self.as_table();
        if !table.contains_key(key) && !matches!(key, "tap_power" | "ldpc_alist") {
            return Err(Error::Parse(format!("unknown config key '{key}'")));
        }
        table.insert(key.to_string(), value);
        // keep the CFO grid consistent when only one of the pair changes
        let mut next = Self::from_table(table)?;
        if key == "cfo_max" {
            next.cfo_grid = linspace(-next.cfo_max, next.cfo_max, next.cfo_grid.len());
        }
        *self = next;
        Ok(())
    }

    fn as_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_preset_constants() {
        let c = SystemConfig::preset(PresetKind::Flat);
        assert_eq!(c.cfo_max, 0.0133);
        assert_eq!(c.n_fft, 2048);
        assert_eq!(c.cp_len, 72);
        assert_eq!(c.n_antennas, 16);
        assert_eq!(c.preamble_bits, 14);
        assert_eq!(c.coding_bits, 86);
        assert_eq!(c.n_sub(), 128);
        assert_eq!(c.coding_len(), 2688);
        assert_eq!(c.total_channel_uses, 3200);
        assert_eq!(c.to_grid.len(), 9);
        assert_eq!(c.cfo_grid.len(), 9);
        assert_eq!(c.codebook_kind, CodebookKind::Identity);
        assert_eq!(c.info_bits_per_stage(), vec![7, 7, 0, 0]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn fsf_preset_constants() {
        let c = SystemConfig::preset(PresetKind::Fsf);
        assert_eq!(c.total_channel_uses, 6874);
        assert_eq!(c.n_sub(), 1024);
        assert_eq!(c.coding_len(), 2688);
        assert_eq!(c.preamble_bits, 24);
        assert_eq!(c.tap_count_range, [5, 15]);
        assert_eq!(c.codebook_kind, CodebookKind::Gaussian);
        assert!(c.validate().is_ok(), "{:?}", c.validate());
    }

    #[test]
    fn desk_presets_validate() {
        for k in [PresetKind::DeskFlat, PresetKind::DeskFsf] {
            let c = SystemConfig::preset(k);
            assert!(c.validate().is_ok(), "{k:?}: {:?}", c.validate());
        }
        let c = SystemConfig::preset(PresetKind::DeskFsf);
        assert_eq!((c.n_sub(), c.n_codewords(), c.cp_len, c.n_antennas, c.n_active), (256, 64, 16, 8, 10));
    }

    #[test]
    fn zero_cfo_is_on_odd_grid() {
        let c = SystemConfig::preset(PresetKind::Flat);
        assert!(c.cfo_grid[4].abs() < 1e-15);
    }

    #[test]
    fn no_isi_violation_reported() {
        let mut c = SystemConfig::preset(PresetKind::Fsf);
        c.cp_len = 10;
        c.delay_spread = 20;
        c.tap_count_range = [5, 15];
        let errs = c.validate().unwrap_err();
        assert!(errs.iter().any(|e| e.contains("no-ISI condition violated")));
    }

    #[test]
    fn parity_bit_count_checked() {
        let mut c = SystemConfig::preset(PresetKind::Flat);
        c.preamble_bits = 15;
        let errs = c.validate().unwrap_err();
        assert!(errs.iter().any(|e| e.starts_with("preamble_bits")));
        // and msg_bits now disagrees as well: every violation is listed
        assert!(errs.iter().any(|e| e.starts_with("msg_bits")));
    }

    #[test]
    fn toml_round_trip() {
        let c = SystemConfig::preset(PresetKind::DeskFsf);
        let back = SystemConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn overrides() {
        let mut c = SystemConfig::preset(PresetKind::Flat);
        c.apply_override("n_active=25").unwrap();
        c.apply_override("parity_alloc=[0,0,0,7]").unwrap();
        c.apply_override("channel_kind=fsf").unwrap();
        c.apply_override("cfo_max=0.01").unwrap();
        c.apply_override("tap_power=0.5").unwrap();
        assert_eq!(c.n_active, 25);
        assert_eq!(c.parity_alloc, vec![0, 0, 0, 7]);
        assert_eq!(c.channel_kind, ChannelKind::Fsf);
        assert!((c.cfo_grid[0] + 0.01).abs() < 1e-15);
        assert_eq!(c.tap_power, Some(0.5));
        assert!(c.apply_override("nonsense=1").is_err());
        assert!(c.apply_override("n_active").is_err());
    }

    #[test]
    fn partial_file_keeps_base() {
        let base = SystemConfig::preset(PresetKind::Flat);
        let c = SystemConfig::load_over(&base, "n_active = 7\nnoise_variance = 0.25\n").unwrap();
        assert_eq!(c.n_active, 7);
        assert_eq!(c.noise_variance, 0.25);
        assert_eq!(c.n_fft, base.n_fft);
        assert!(SystemConfig::load_over(&base, "bogus = 1").is_err());
    }
}
