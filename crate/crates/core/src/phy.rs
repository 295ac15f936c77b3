//! PHY abstraction: MCS table, RU tone plan, nominal rate, PPDU airtime,
//! indoor path loss and hard-threshold reception.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;

#[derive(Debug, Error, PartialEq)]
pub enum PhyError {
    #[error("unknown RU size {0} tones")]
    UnknownRuSize(u32),
    #[error("MCS index {0} out of range 0..=13")]
    UnknownMcs(u8),
    #[error("invalid channel: {0}")]
    InvalidChannel(String),
    #[error("threshold table must have 14 strictly increasing entries")]
    BadThresholds,
}

/// OFDM symbol body length without guard interval.
pub const DFT_PERIOD_NS: u64 = 12_800;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingRate {
    pub num: u8,
    pub den: u8,
}

impl CodingRate {
    pub const fn new(num: u8, den: u8) -> Self {
        Self { num, den }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McsEntry {
    pub index: u8,
    /// Coded bits per subcarrier per stream.
    pub bits_per_symbol: u8,
    pub coding_rate: CodingRate,
    pub min_sinr_db: f64,
}

impl McsEntry {
    /// Information bits carried per subcarrier per stream.
    pub fn efficiency(&self) -> f64 {
        self.bits_per_symbol as f64 * self.coding_rate.as_f64()
    }
}

const MODULATION: [(u8, u8, u8); 14] = [
    (1, 1, 2),
    (2, 1, 2),
    (2, 3, 4),
    (4, 1, 2),
    (4, 3, 4),
    (6, 2, 3),
    (6, 3, 4),
    (6, 5, 6),
    (8, 3, 4),
    (8, 5, 6),
    (10, 3, 4),
    (10, 5, 6),
    (12, 3, 4),
    (12, 5, 6),
];

/// Default decode thresholds in dB, MCS 0 through 13.
pub const DEFAULT_MIN_SINR_DB: [f64; 14] =
    [5.0, 8.0, 11.0, 14.0, 17.0, 20.0, 23.0, 25.0, 28.0, 30.0, 33.0, 35.0, 38.0, 40.0];

#[derive(Clone, Debug, PartialEq)]
pub struct McsTable {
    entries: Vec<McsEntry>,
}

impl Default for McsTable {
    fn default() -> Self {
        Self::with_thresholds(&DEFAULT_MIN_SINR_DB).expect("default table is valid")
    }
}

impl McsTable {
    pub fn with_thresholds(thresholds: &[f64]) -> Result<Self, PhyError> {
        if thresholds.len() != MODULATION.len() || thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PhyError::BadThresholds);
        }
        let entries = MODULATION
            .iter()
            .zip(thresholds)
            .enumerate()
            .map(|(i, (&(bits, num, den), &thr))| McsEntry {
                index: i as u8,
                bits_per_symbol: bits,
                coding_rate: CodingRate::new(num, den),
                min_sinr_db: thr,
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn get(&self, index: u8) -> Result<McsEntry, PhyError> {
        self.entries.get(index as usize).copied().ok_or(PhyError::UnknownMcs(index))
    }

    pub fn entries(&self) -> &[McsEntry] {
        &self.entries
    }
}

/// RU sizes in tones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuSize {
    Ru26,
    Ru52,
    Ru106,
    Ru242,
    Ru484,
    Ru996,
    Ru2x996,
    Ru4x996,
}

impl RuSize {
    pub const ALL: [RuSize; 8] = [
        RuSize::Ru26,
        RuSize::Ru52,
        RuSize::Ru106,
        RuSize::Ru242,
        RuSize::Ru484,
        RuSize::Ru996,
        RuSize::Ru2x996,
        RuSize::Ru4x996,
    ];

    pub fn from_tones(tones: u32) -> Result<Self, PhyError> {
        Self::ALL.into_iter().find(|r| r.tones() == tones).ok_or(PhyError::UnknownRuSize(tones))
    }

    pub fn tones(self) -> u32 {
        match self {
            RuSize::Ru26 => 26,
            RuSize::Ru52 => 52,
            RuSize::Ru106 => 106,
            RuSize::Ru242 => 242,
            RuSize::Ru484 => 484,
            RuSize::Ru996 => 996,
            RuSize::Ru2x996 => 2 * 996,
            RuSize::Ru4x996 => 4 * 996,
        }
    }

    pub fn data_subcarriers(self) -> u32 {
        match self {
            RuSize::Ru26 => 24,
            RuSize::Ru52 => 48,
            RuSize::Ru106 => 102,
            RuSize::Ru242 => 234,
            RuSize::Ru484 => 468,
            RuSize::Ru996 => 980,
            RuSize::Ru2x996 => 1960,
            RuSize::Ru4x996 => 3920,
        }
    }

    /// Number of 20 MHz subchannels the RU occupies (an RU smaller than 242
    /// tones still counts as one).
    pub fn subchannels(self) -> u32 {
        match self {
            RuSize::Ru26 | RuSize::Ru52 | RuSize::Ru106 | RuSize::Ru242 => 1,
            RuSize::Ru484 => 2,
            RuSize::Ru996 => 4,
            RuSize::Ru2x996 => 8,
            RuSize::Ru4x996 => 16,
        }
    }

    /// The single RU that spans a whole channel of the given width.
    pub fn full_band(width_mhz: u32) -> Result<Self, PhyError> {
        match width_mhz {
            20 => Ok(RuSize::Ru242),
            40 => Ok(RuSize::Ru484),
            80 => Ok(RuSize::Ru996),
            160 => Ok(RuSize::Ru2x996),
            320 => Ok(RuSize::Ru4x996),
            w => Err(PhyError::InvalidChannel(format!("width {w} MHz"))),
        }
    }
}

/// Tones assigned to one station; more than one RU makes it an MRU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuAllocation {
    pub rus: Vec<RuSize>,
}

impl RuAllocation {
    pub fn single(ru: RuSize) -> Self {
        Self { rus: vec![ru] }
    }

    pub fn mru(rus: Vec<RuSize>) -> Self {
        Self { rus }
    }

    pub fn data_subcarriers(&self) -> u32 {
        self.rus.iter().map(|r| r.data_subcarriers()).sum()
    }

    pub fn subchannels(&self) -> u32 {
        self.rus.iter().map(|r| r.subchannels()).sum()
    }
}

pub fn data_subcarriers(ru_tones: u32) -> Result<u32, PhyError> {
    RuSize::from_tones(ru_tones).map(RuSize::data_subcarriers)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum GuardInterval {
    #[default]
    Ns800,
    Ns1600,
    Ns3200,
}

impl GuardInterval {
    pub fn from_ns(ns: u32) -> Option<Self> {
        match ns {
            800 => Some(Self::Ns800),
            1600 => Some(Self::Ns1600),
            3200 => Some(Self::Ns3200),
            _ => None,
        }
    }

    pub fn ns(self) -> u64 {
        match self {
            Self::Ns800 => 800,
            Self::Ns1600 => 1600,
            Self::Ns3200 => 3200,
        }
    }
}

/// Exact nominal rate: data bits per OFDM symbol as a rational number,
/// together with the symbol duration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhyRate {
    dbps_num: u64,
    dbps_den: u64,
    symbol_ns: u64,
}

impl PhyRate {
    pub fn new(dbps_num: u64, dbps_den: u64, symbol_ns: u64) -> Self {
        assert!(dbps_num > 0 && dbps_den > 0 && symbol_ns > 0, "rate must be positive");
        Self { dbps_num, dbps_den, symbol_ns }
    }

    /// Legacy OFDM control rate (4 µs symbols), e.g. 24 Mbps → 96 bits/symbol.
    pub fn legacy_mbps(mbps: u64) -> Self {
        Self::new(mbps * 4, 1, 4_000)
    }

    pub fn symbol(&self) -> SimTime {
        SimTime(self.symbol_ns)
    }

    /// Data bits per symbol as an unreduced fraction `(num, den)`.
    pub fn bits_per_symbol_ratio(&self) -> (u64, u64) {
        (self.dbps_num, self.dbps_den)
    }

    pub fn bits_per_symbol(&self) -> f64 {
        self.dbps_num as f64 / self.dbps_den as f64
    }

    pub fn bits_per_second(&self) -> f64 {
        self.bits_per_symbol() * 1e9 / self.symbol_ns as f64
    }

    /// Symbols needed for `bits` payload bits.
    pub fn symbols_for(&self, bits: u64) -> u64 {
        let scaled = bits as u128 * self.dbps_den as u128;
        scaled.div_ceil(self.dbps_num as u128) as u64
    }

    /// Payload bits that fit in `symbols` whole symbols.
    pub fn bits_in(&self, symbols: u64) -> u64 {
        (symbols as u128 * self.dbps_num as u128 / self.dbps_den as u128) as u64
    }
}

/// Nominal PHY rate `N_SD · N_BPSCS · R · N_SS / (T_DFT + T_GI)`.
pub fn phy_rate(mcs: &McsEntry, alloc: &RuAllocation, nss: u32, gi: GuardInterval) -> PhyRate {
    assert!(nss >= 1, "nss must be at least 1");
    assert!(!alloc.rus.is_empty(), "empty RU allocation");
    let num = alloc.data_subcarriers() as u64
        * mcs.bits_per_symbol as u64
        * nss as u64
        * mcs.coding_rate.num as u64;
    PhyRate::new(num, mcs.coding_rate.den as u64, DFT_PERIOD_NS + gi.ns())
}

/// Preamble plus payload rounded up to whole symbols.
pub fn ppdu_duration(payload_bits: u64, rate: &PhyRate, preamble: SimTime) -> SimTime {
    preamble + SimTime(rate.symbols_for(payload_bits) * rate.symbol_ns)
}

/// Legacy frame airtime including the 16-bit SERVICE field and 6 tail bits.
pub fn control_frame_duration(bytes: u32, rate: &PhyRate, preamble: SimTime) -> SimTime {
    ppdu_duration(16 + 8 * bytes as u64 + 6, rate, preamble)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Band {
    #[serde(rename = "2.4")]
    Ghz2_4,
    #[serde(rename = "5")]
    Ghz5,
    #[serde(rename = "6")]
    Ghz6,
}

impl Band {
    pub fn max_width_mhz(self) -> u32 {
        match self {
            Band::Ghz2_4 => 40,
            Band::Ghz5 => 160,
            Band::Ghz6 => 320,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub band: Band,
    pub center_freq_mhz: u32,
    pub width_mhz: u32,
}

impl ChannelSpec {
    pub fn new(band: Band, center_freq_mhz: u32, width_mhz: u32) -> Result<Self, PhyError> {
        let c = Self { band, center_freq_mhz, width_mhz };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PhyError> {
        if ![20, 40, 80, 160, 320].contains(&self.width_mhz) {
            return Err(PhyError::InvalidChannel(format!("width {} MHz", self.width_mhz)));
        }
        if self.width_mhz > self.band.max_width_mhz() {
            return Err(PhyError::InvalidChannel(format!(
                "{} MHz not available in band {:?}",
                self.width_mhz, self.band
            )));
        }
        Ok(())
    }

    pub fn freq_ghz(&self) -> f64 {
        self.center_freq_mhz as f64 / 1000.0
    }

    pub fn subchannels(&self) -> u32 {
        self.width_mhz / 20
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2)).sqrt()
    }
}

/// Residential indoor model constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLossParams {
    pub breakpoint_m: f64,
    pub wall_loss_db: f64,
    pub floor_loss_db: f64,
}

impl Default for PathLossParams {
    fn default() -> Self {
        Self { breakpoint_m: 5.0, wall_loss_db: 5.0, floor_loss_db: 18.3 }
    }
}

/// Indoor residential path loss in dB. Distances below 1 m are clamped.
pub fn path_loss_db(
    params: &PathLossParams,
    tx: &Position,
    rx: &Position,
    freq_ghz: f64,
    walls: u32,
    floors: u32,
) -> f64 {
    assert!(freq_ghz > 0.0, "frequency must be positive");
    let d = tx.distance(rx).max(1.0);
    let bp = params.breakpoint_m;
    let mut pl = 40.05 + 20.0 * (freq_ghz / 2.4).log10() + 20.0 * d.min(bp).log10();
    if d > bp {
        pl += 35.0 * (d / bp).log10();
    }
    if floors > 0 {
        let f = floors as f64;
        pl += params.floor_loss_db * f.powf((f + 2.0) / (f + 1.0) - 0.46);
    }
    pl + params.wall_loss_db * walls as f64
}

/// Thermal noise over `width_mhz` plus receiver noise figure, in dBm.
pub fn noise_floor_dbm(width_mhz: u32, noise_figure_db: f64) -> f64 {
    -174.0 + 10.0 * (width_mhz as f64 * 1e6).log10() + noise_figure_db
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reception {
    Decoded,
    Lost,
}

pub fn sinr_db(rx_power_dbm: f64, interference_mw_sum: f64, noise_dbm: f64) -> f64 {
    if interference_mw_sum <= 0.0 {
        return rx_power_dbm - noise_dbm;
    }
    rx_power_dbm - mw_to_dbm(interference_mw_sum + dbm_to_mw(noise_dbm))
}

/// Hard-threshold decode: `SINR ≥ threshold`.
pub fn receive_outcome(
    rx_power_dbm: f64,
    interference_mw_sum: f64,
    noise_dbm: f64,
    min_sinr_db: f64,
) -> Reception {
    if sinr_db(rx_power_dbm, interference_mw_sum, noise_dbm) >= min_sinr_db {
        Reception::Decoded
    } else {
        Reception::Lost
    }
}
