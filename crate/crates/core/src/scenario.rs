//! Declarative scenario configuration, topology generators, channel
//! assignment and traffic sources.

use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::engine::{RngStream, SimTime};
use crate::mac::{EdcaParams, MacTiming};
use crate::mlo::{MldMode, MldRole};
use crate::ofdma::Direction;
use crate::phy::{
    noise_floor_dbm, path_loss_db, Band, ChannelSpec, GuardInterval, McsTable, PathLossParams, PhyError, PhyRate,
    Position, DEFAULT_MIN_SINR_DB,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("link budget: {0}")]
    LinkBudget(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CampaignKind {
    Throughput,
    Latency,
}

/// `ax`: every device is single-link; a multi-link BSS is modelled as one
/// independent AP per link. `be`: one MLD per device spanning all links.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Standard {
    Ax,
    Be,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessMode {
    /// Full-channel single-user exchanges (SU-MIMO).
    Su,
    /// AP-scheduled DL MU PPDUs and trigger-based UL.
    Ofdma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficKind {
    FullBuffer,
    ConstantRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficConfig {
    pub kind: TrafficKind,
    pub direction: Direction,
    /// Offered load of each transmitting 11be device (an AP MLD for DL, a
    /// non-AP MLD for UL). Single-link 11ax devices get half of it.
    pub rate_mbps: f64,
    pub packet_bytes: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacConfig {
    pub aifs_us: f64,
    pub slot_us: f64,
    pub sifs_us: f64,
    pub cw_min: u32,
    pub cw_max: u32,
    pub txop_us: f64,
    pub rts_cts: bool,
    pub max_aggregation: usize,
    pub retry_limit: u8,
    pub msdu_lifetime_ms: Option<f64>,
    pub queue_capacity: usize,
    pub reorder_timeout_ms: f64,
    pub control_rate_mbps: u64,
    pub control_preamble_us: f64,
    pub data_preamble_us: f64,
    pub rts_bytes: u32,
    pub cts_bytes: u32,
    pub trigger_base_bytes: u32,
    pub trigger_per_user_bytes: u32,
}

impl Default for MacConfig {
    fn default() -> Self {
        Self {
            aifs_us: 34.0,
            slot_us: 9.0,
            sifs_us: 16.0,
            cw_min: 7,
            cw_max: 15,
            txop_us: 4096.0,
            rts_cts: true,
            max_aggregation: 1024,
            retry_limit: 10,
            msdu_lifetime_ms: None,
            queue_capacity: 65_536,
            reorder_timeout_ms: 2.0,
            control_rate_mbps: 24,
            control_preamble_us: 20.0,
            data_preamble_us: 48.0,
            rts_bytes: 20,
            cts_bytes: 14,
            trigger_base_bytes: 28,
            trigger_per_user_bytes: 6,
        }
    }
}

impl MacConfig {
    pub fn timing(&self) -> MacTiming {
        MacTiming {
            slot: SimTime::from_us_f64(self.slot_us),
            sifs: SimTime::from_us_f64(self.sifs_us),
            aifs: SimTime::from_us_f64(self.aifs_us),
            data_preamble: SimTime::from_us_f64(self.data_preamble_us),
            control_preamble: SimTime::from_us_f64(self.control_preamble_us),
            control_rate: PhyRate::legacy_mbps(self.control_rate_mbps),
            rts_bytes: self.rts_bytes,
            cts_bytes: self.cts_bytes,
            trigger_base_bytes: self.trigger_base_bytes,
            trigger_per_user_bytes: self.trigger_per_user_bytes,
        }
    }

    pub fn edca(&self) -> EdcaParams {
        EdcaParams {
            aifs: SimTime::from_us_f64(self.aifs_us),
            slot: SimTime::from_us_f64(self.slot_us),
            cw_min: self.cw_min,
            cw_max: self.cw_max,
        }
    }

    pub fn txop(&self) -> SimTime {
        SimTime::from_us_f64(self.txop_us)
    }

    pub fn lifetime(&self) -> Option<SimTime> {
        self.msdu_lifetime_ms.map(|ms| SimTime::from_us_f64(ms * 1e3))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhyConfig {
    pub mcs: u8,
    pub nss: u32,
    pub gi_ns: u32,
    pub noise_figure_db: f64,
    pub cca_threshold_dbm: f64,
    pub min_sinr_db: Vec<f64>,
    pub control_min_sinr_db: f64,
    pub ap_tx_power_dbm: f64,
    pub sta_tx_power_dbm: f64,
    /// Combined antenna and beamforming gain, applied on both ends of a link.
    pub ap_antenna_gain_dbi: f64,
    pub sta_antenna_gain_dbi: f64,
    pub path_loss: PathLossParams,
    /// Per-station RU size in tones for OFDMA; `None` picks by channel width.
    pub ru_tones: Option<u32>,
}

impl Default for PhyConfig {
    fn default() -> Self {
        Self {
            mcs: 13,
            nss: 8,
            gi_ns: 800,
            noise_figure_db: 7.0,
            cca_threshold_dbm: -82.0,
            min_sinr_db: DEFAULT_MIN_SINR_DB.to_vec(),
            control_min_sinr_db: 10.0,
            ap_tx_power_dbm: 20.0,
            sta_tx_power_dbm: 15.0,
            ap_antenna_gain_dbi: 12.0,
            sta_antenna_gain_dbi: 12.0,
            path_loss: PathLossParams::default(),
            ru_tones: None,
        }
    }
}

impl PhyConfig {
    pub fn mcs_table(&self) -> Result<McsTable, PhyError> {
        McsTable::with_thresholds(&self.min_sinr_db)
    }

    pub fn guard_interval(&self) -> Result<GuardInterval, ScenarioError> {
        GuardInterval::from_ns(self.gi_ns)
            .ok_or_else(|| ScenarioError::Invalid(format!("guard interval {} ns", self.gi_ns)))
    }

    pub fn tx_power_dbm(&self, role: MldRole) -> f64 {
        match role {
            MldRole::Ap => self.ap_tx_power_dbm,
            MldRole::NonAp => self.sta_tx_power_dbm,
        }
    }

    pub fn antenna_gain_dbi(&self, role: MldRole) -> f64 {
        match role {
            MldRole::Ap => self.ap_antenna_gain_dbi,
            MldRole::NonAp => self.sta_antenna_gain_dbi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyConfig {
    /// One AP at the centre of a square, stations uniform inside it.
    Box { n_sta: usize, side_m: f64 },
    /// Two-floor apartment block.
    Residential {
        floors: u32,
        rows: u32,
        cols: u32,
        apartment_m: f64,
        floor_height_m: f64,
        stas_per_bss: usize,
        co_channel_bss: usize,
        reuse_fraction: f64,
    },
}

impl TopologyConfig {
    pub fn residential_default() -> Self {
        TopologyConfig::Residential {
            floors: 2,
            rows: 2,
            cols: 10,
            apartment_m: 10.0,
            floor_height_m: 3.0,
            stas_per_bss: 4,
            co_channel_bss: 5,
            reuse_fraction: 1.0 / 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub campaign: CampaignKind,
    pub seed: u64,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub standard: Standard,
    pub access: AccessMode,
    pub traffic: TrafficConfig,
    pub mac: MacConfig,
    pub phy: PhyConfig,
    pub links: Vec<ChannelSpec>,
    pub mld_mode: MldMode,
    pub topology: TopologyConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::throughput_default()
    }
}

pub fn link_5ghz_160() -> ChannelSpec {
    ChannelSpec { band: Band::Ghz5, center_freq_mhz: 5250, width_mhz: 160 }
}

pub fn link_5ghz_160_upper() -> ChannelSpec {
    ChannelSpec { band: Band::Ghz5, center_freq_mhz: 5570, width_mhz: 160 }
}

pub fn link_6ghz_320() -> ChannelSpec {
    ChannelSpec { band: Band::Ghz6, center_freq_mhz: 6105, width_mhz: 320 }
}

pub fn link_6ghz_320_upper() -> ChannelSpec {
    ChannelSpec { band: Band::Ghz6, center_freq_mhz: 6425, width_mhz: 320 }
}

pub fn link_6ghz_160() -> ChannelSpec {
    ChannelSpec { band: Band::Ghz6, center_freq_mhz: 6185, width_mhz: 160 }
}

impl ScenarioConfig {
    /// Full-buffer single-BSS defaults: 8 stations in 20 m × 20 m, two STR
    /// links on 5 GHz and 6 GHz.
    pub fn throughput_default() -> Self {
        Self {
            campaign: CampaignKind::Throughput,
            seed: 1,
            duration_s: 10.0,
            warmup_s: 1.0,
            standard: Standard::Be,
            access: AccessMode::Su,
            traffic: TrafficConfig {
                kind: TrafficKind::FullBuffer,
                direction: Direction::Dl,
                rate_mbps: 0.0,
                packet_bytes: 1500,
            },
            mac: MacConfig::default(),
            phy: PhyConfig::default(),
            links: vec![link_6ghz_320(), link_5ghz_160()],
            mld_mode: MldMode::Str,
            topology: TopologyConfig::Box { n_sta: 8, side_m: 20.0 },
        }
    }

    /// Residential load-sweep defaults: MCS 11, 2 streams, 256-MPDU
    /// aggregation, 20 ms lifetime, two 160 MHz links.
    pub fn latency_default() -> Self {
        Self {
            campaign: CampaignKind::Latency,
            seed: 1,
            duration_s: 30.0,
            warmup_s: 1.0,
            standard: Standard::Be,
            access: AccessMode::Su,
            traffic: TrafficConfig {
                kind: TrafficKind::ConstantRate,
                direction: Direction::Dl,
                rate_mbps: 100.0,
                packet_bytes: 1500,
            },
            mac: MacConfig { max_aggregation: 256, msdu_lifetime_ms: Some(20.0), ..MacConfig::default() },
            phy: PhyConfig { mcs: 11, nss: 2, ..PhyConfig::default() },
            links: vec![link_5ghz_160(), link_6ghz_160()],
            mld_mode: MldMode::Str,
            topology: TopologyConfig::residential_default(),
        }
    }

    pub fn defaults_for(kind: CampaignKind) -> Self {
        match kind {
            CampaignKind::Throughput => Self::throughput_default(),
            CampaignKind::Latency => Self::latency_default(),
        }
    }

    /// Parses a JSON document. Missing keys take the defaults of the
    /// document's `campaign` (throughput if absent); unknown keys are errors.
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        let user: Value = serde_json::from_str(text)?;
        Self::from_json_value(user)
    }

    pub fn from_json_value(user: Value) -> Result<Self, ScenarioError> {
        let kind = match user.get("campaign") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => CampaignKind::Throughput,
        };
        let mut base = serde_json::to_value(Self::defaults_for(kind))?;
        merge_json(&mut base, &user);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a partial JSON object on top of this config.
    pub fn with_overrides(&self, overrides: &Value) -> Result<Self, ScenarioError> {
        let mut base = serde_json::to_value(self)?;
        merge_json(&mut base, overrides);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.links.is_empty() {
            return Err(ScenarioError::Invalid("at least one link is required".into()));
        }
        for l in &self.links {
            l.validate()?;
        }
        self.phy.mcs_table()?.get(self.phy.mcs)?;
        self.phy.guard_interval()?;
        if self.phy.nss == 0 {
            return Err(ScenarioError::Invalid("nss must be at least 1".into()));
        }
        if let Some(t) = self.phy.ru_tones {
            crate::phy::RuSize::from_tones(t)?;
        }
        if self.mac.cw_min > self.mac.cw_max {
            return Err(ScenarioError::Invalid("cw_min exceeds cw_max".into()));
        }
        if self.mac.max_aggregation == 0 {
            return Err(ScenarioError::Invalid("max_aggregation must be positive".into()));
        }
        if self.duration_s <= 0.0 || self.warmup_s < 0.0 || self.warmup_s >= self.duration_s {
            return Err(ScenarioError::Invalid("need 0 <= warmup < duration".into()));
        }
        if self.traffic.packet_bytes == 0 {
            return Err(ScenarioError::Invalid("packet size must be positive".into()));
        }
        if self.traffic.rate_mbps < 0.0 {
            return Err(ScenarioError::Invalid("negative traffic rate".into()));
        }
        if self.standard == Standard::Ax && self.mld_mode == MldMode::Nstr {
            return Err(ScenarioError::Invalid("NSTR requires multi-link devices".into()));
        }
        match &self.topology {
            TopologyConfig::Box { n_sta, side_m } => {
                if *n_sta == 0 || *side_m <= 0.0 {
                    return Err(ScenarioError::Invalid("box needs n_sta >= 1 and a positive side".into()));
                }
            }
            TopologyConfig::Residential { reuse_fraction, co_channel_bss, stas_per_bss, .. } => {
                if !(*reuse_fraction > 0.0 && *reuse_fraction <= 1.0) {
                    return Err(ScenarioError::Invalid("reuse_fraction must be in (0, 1]".into()));
                }
                if *co_channel_bss == 0 || *stas_per_bss == 0 {
                    return Err(ScenarioError::Invalid("residential needs BSSs and stations".into()));
                }
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> SimTime {
        SimTime::from_secs_f64(self.duration_s)
    }

    pub fn warmup(&self) -> SimTime {
        SimTime::from_secs_f64(self.warmup_s)
    }
}

/// Recursive object merge; non-object values (arrays included) replace.
pub fn merge_json(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Apartment coordinates `(floor, row, col)`.
pub type Apartment = (u32, u32, u32);

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub role: MldRole,
    pub pos: Position,
    pub apartment: Option<Apartment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bss {
    pub ap: usize,
    pub stas: Vec<usize>,
    pub apartment: Option<Apartment>,
    pub channel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub nodes: Vec<Node>,
    pub bss: Vec<Bss>,
    /// BSS indices sharing the analysed channel.
    pub analyzed: Vec<usize>,
    pub analyzed_channel: usize,
}

impl Topology {
    /// Apartment boundaries crossed in plane.
    pub fn walls_between(&self, a: usize, b: usize) -> u32 {
        match (self.nodes[a].apartment, self.nodes[b].apartment) {
            (Some((_, ra, ca)), Some((_, rb, cb))) => ra.abs_diff(rb) + ca.abs_diff(cb),
            _ => 0,
        }
    }

    pub fn floors_between(&self, a: usize, b: usize) -> u32 {
        match (self.nodes[a].apartment, self.nodes[b].apartment) {
            (Some((fa, _, _)), Some((fb, _, _))) => fa.abs_diff(fb),
            _ => 0,
        }
    }

    pub fn path_loss(&self, params: &PathLossParams, a: usize, b: usize, freq_ghz: f64) -> f64 {
        path_loss_db(
            params,
            &self.nodes[a].pos,
            &self.nodes[b].pos,
            freq_ghz,
            self.walls_between(a, b),
            self.floors_between(a, b),
        )
    }
}

/// One AP at the centre of a `side × side` square and `n_sta` stations
/// placed uniformly at random in it.
pub fn gen_throughput_box(n_sta: usize, side_m: f64, rng: &mut RngStream) -> Topology {
    let mut nodes = vec![Node {
        name: "ap0".into(),
        role: MldRole::Ap,
        pos: Position::new(side_m / 2.0, side_m / 2.0, 0.0),
        apartment: None,
    }];
    for i in 0..n_sta {
        let x = rng.draw_range_f64(0.0, side_m);
        let y = rng.draw_range_f64(0.0, side_m);
        nodes.push(Node { name: format!("sta{i}"), role: MldRole::NonAp, pos: Position::new(x, y, 0.0), apartment: None });
    }
    Topology {
        nodes,
        bss: vec![Bss { ap: 0, stas: (1..=n_sta).collect(), apartment: None, channel: 0 }],
        analyzed: vec![0],
        analyzed_channel: 0,
    }
}

/// Apartment block with one BSS per apartment. `aps_per_apartment` is 2 for
/// the 11ax pairing (one AP per link), otherwise 1. Station positions are
/// drawn uniformly inside the apartment once per slot; with several APs each
/// gets a co-located station in every slot, so 11ax and 11be runs of one
/// seed see the same geometry.
pub fn gen_residential(
    floors: u32,
    rows: u32,
    cols: u32,
    apartment_m: f64,
    floor_height_m: f64,
    aps_per_apartment: usize,
    stas_per_ap: usize,
    rng: &mut RngStream,
) -> Topology {
    let mut nodes = Vec::new();
    let mut bss = Vec::new();
    for f in 0..floors {
        for r in 0..rows {
            for c in 0..cols {
                let apt = (f, r, c);
                let x0 = c as f64 * apartment_m;
                let y0 = r as f64 * apartment_m;
                let z0 = f as f64 * floor_height_m;
                // one draw per station slot, shared by the per-link APs
                let spots: Vec<Position> = (0..stas_per_ap)
                    .map(|_| {
                        Position::new(
                            x0 + rng.draw_range_f64(0.0, apartment_m),
                            y0 + rng.draw_range_f64(0.0, apartment_m),
                            z0 + rng.draw_range_f64(0.0, floor_height_m),
                        )
                    })
                    .collect();
                for k in 0..aps_per_apartment {
                    let ap = nodes.len();
                    nodes.push(Node {
                        name: format!("ap-f{f}r{r}c{c}-{k}"),
                        role: MldRole::Ap,
                        pos: Position::new(x0 + apartment_m / 2.0, y0 + apartment_m / 2.0, z0 + floor_height_m / 2.0),
                        apartment: Some(apt),
                    });
                    let mut stas = Vec::new();
                    for (s, pos) in spots.iter().enumerate() {
                        stas.push(nodes.len());
                        nodes.push(Node {
                            name: format!("sta-f{f}r{r}c{c}-{k}-{s}"),
                            role: MldRole::NonAp,
                            pos: *pos,
                            apartment: Some(apt),
                        });
                    }
                    bss.push(Bss { ap, stas, apartment: Some(apt), channel: 0 });
                }
            }
        }
    }
    Topology { nodes, bss, analyzed: Vec::new(), analyzed_channel: 0 }
}

fn apartment_center(apt: Apartment, apartment_m: f64, floor_height_m: f64) -> Position {
    Position::new(
        (apt.2 as f64 + 0.5) * apartment_m,
        (apt.1 as f64 + 0.5) * apartment_m,
        (apt.0 as f64 + 0.5) * floor_height_m,
    )
}

/// Frequency reuse over apartments. With `n = round(1/reuse_fraction)`
/// channels, apartments follow a `(floor + row + col) mod n` pattern; from the
/// randomly picked pattern class the `co_channel` most spread apartments keep
/// channel 0 and every other apartment moves to channels `1..n`.
pub fn assign_channels(
    topo: &mut Topology,
    reuse_fraction: f64,
    co_channel: usize,
    apartment_m: f64,
    floor_height_m: f64,
    rng: &mut RngStream,
) {
    let n_channels = ((1.0 / reuse_fraction).round() as usize).max(1);
    let mut apartments: Vec<Apartment> = topo.bss.iter().filter_map(|b| b.apartment).collect();
    apartments.sort_unstable();
    apartments.dedup();
    let chosen: Vec<Apartment> = if n_channels == 1 {
        apartments.clone()
    } else {
        let class = rng.draw_uniform_int(0, n_channels as i64 - 1).expect("non-empty") as usize;
        let candidates: Vec<Apartment> = apartments
            .iter()
            .copied()
            .filter(|a| (a.0 + a.1 + a.2) as usize % n_channels == class)
            .collect();
        spread_subset(&candidates, co_channel, apartment_m, floor_height_m, rng)
    };
    for b in topo.bss.iter_mut() {
        let apt = b.apartment.expect("residential BSS");
        b.channel = if chosen.contains(&apt) {
            0
        } else {
            1 + (apt.0 + apt.1 + apt.2) as usize % (n_channels - 1).max(1)
        };
    }
    topo.analyzed = topo.bss.iter().enumerate().filter(|(_, b)| b.channel == 0).map(|(i, _)| i).collect();
    topo.analyzed_channel = 0;
}

/// Greedy farthest-point subset starting from a seeded candidate.
fn spread_subset(
    candidates: &[Apartment],
    k: usize,
    apartment_m: f64,
    floor_height_m: f64,
    rng: &mut RngStream,
) -> Vec<Apartment> {
    if candidates.len() <= k {
        return candidates.to_vec();
    }
    let pos: Vec<Position> = candidates.iter().map(|&a| apartment_center(a, apartment_m, floor_height_m)).collect();
    let first = rng.draw_uniform_int(0, candidates.len() as i64 - 1).expect("non-empty") as usize;
    let mut picked = vec![first];
    while picked.len() < k {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..candidates.len() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked.iter().map(|&j| pos[i].distance(&pos[j])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        picked.push(best.expect("candidates remain"));
    }
    picked.sort_unstable();
    picked.into_iter().map(|i| candidates[i]).collect()
}

/// Builds the topology for a scenario. Every random draw comes from the
/// `placement` stream of the scenario seed.
pub fn build_topology(cfg: &ScenarioConfig) -> Topology {
    let mut rng = RngStream::new(cfg.seed, "placement");
    match &cfg.topology {
        TopologyConfig::Box { n_sta, side_m } => gen_throughput_box(*n_sta, *side_m, &mut rng),
        TopologyConfig::Residential {
            floors,
            rows,
            cols,
            apartment_m,
            floor_height_m,
            stas_per_bss,
            co_channel_bss,
            reuse_fraction,
        } => {
            let (aps, stas) = match cfg.standard {
                Standard::Ax if cfg.links.len() > 1 => (cfg.links.len(), *stas_per_bss),
                _ => (1, *stas_per_bss),
            };
            let mut topo = gen_residential(*floors, *rows, *cols, *apartment_m, *floor_height_m, aps, stas, &mut rng);
            assign_channels(&mut topo, *reuse_fraction, *co_channel_bss, *apartment_m, *floor_height_m, &mut rng);
            topo
        }
    }
}

/// Checks that every station/AP pair clears the MCS 13 threshold on every
/// link in both directions, noise-limited.
pub fn check_throughput_link_budget(cfg: &ScenarioConfig, topo: &Topology) -> Result<(), ScenarioError> {
    let table = cfg.phy.mcs_table()?;
    let thr = table.get(13)?.min_sinr_db.max(table.get(cfg.phy.mcs)?.min_sinr_db);
    for b in &topo.bss {
        for &s in &b.stas {
            for link in &cfg.links {
                let pl = topo.path_loss(&cfg.phy.path_loss, b.ap, s, link.freq_ghz());
                let gains = cfg.phy.ap_antenna_gain_dbi + cfg.phy.sta_antenna_gain_dbi;
                let noise = noise_floor_dbm(link.width_mhz, cfg.phy.noise_figure_db);
                let weakest = cfg.phy.ap_tx_power_dbm.min(cfg.phy.sta_tx_power_dbm);
                let snr = weakest + gains - pl - noise;
                if snr < thr {
                    return Err(ScenarioError::LinkBudget(format!(
                        "{} at {:.1} dB SNR on {} MHz link is below {:.1} dB",
                        topo.nodes[s].name, snr, link.width_mhz, thr
                    )));
                }
            }
        }
    }
    Ok(())
}

/// One traffic flow.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficSource {
    pub kind: TrafficKind,
    pub rate_bps: f64,
    pub packet_bytes: u32,
    pub direction: Direction,
}

impl TrafficSource {
    pub fn packets_per_second(&self) -> f64 {
        self.rate_bps / (self.packet_bytes as f64 * 8.0)
    }
}

/// Poisson arrival times for a constant-rate source.
pub struct ArrivalProcess {
    exp: Option<Exp<f64>>,
    next: SimTime,
    rng: RngStream,
}

impl ArrivalProcess {
    pub fn new(source: &TrafficSource, rng: RngStream) -> Self {
        let pps = source.packets_per_second();
        let exp = if source.kind == TrafficKind::ConstantRate && pps > 0.0 {
            Some(Exp::new(pps).expect("positive rate"))
        } else {
            None
        };
        let mut p = Self { exp, next: SimTime::ZERO, rng };
        p.advance();
        p
    }

    fn advance(&mut self) {
        match &self.exp {
            Some(exp) => {
                let gap = exp.sample(self.rng.rng_mut());
                self.next = self.next + SimTime::from_secs_f64(gap);
            }
            None => self.next = SimTime::MAX,
        }
    }

    /// Time of the next arrival, `SimTime::MAX` if the source never emits.
    pub fn peek(&self) -> SimTime {
        self.next
    }

    pub fn pop(&mut self) -> SimTime {
        let t = self.next;
        self.advance();
        t
    }
}

/// All arrival times in `[0, duration)`.
pub fn generate_arrivals(source: &TrafficSource, duration: SimTime, rng: RngStream) -> Vec<SimTime> {
    let mut p = ArrivalProcess::new(source, rng);
    let mut out = Vec::new();
    while p.peek() < duration {
        out.push(p.pop());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for cfg in [ScenarioConfig::throughput_default(), ScenarioConfig::latency_default()] {
            let text = cfg.to_json_pretty();
            assert_eq!(ScenarioConfig::from_json_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ScenarioConfig::from_json_str(r#"{"campaign":"latency","bogus":1}"#).is_err());
        assert!(ScenarioConfig::from_json_str(r#"{"mac":{"cw_minn":3}}"#).is_err());
    }

    #[test]
    fn partial_document_takes_campaign_defaults() {
        let c = ScenarioConfig::from_json_str(r#"{"campaign":"latency","seed":9}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.phy.mcs, 11);
        assert_eq!(c.mac.max_aggregation, 256);
        assert_eq!(c.mac.msdu_lifetime_ms, Some(20.0));
    }

    #[test]
    fn table_defaults() {
        let t = ScenarioConfig::throughput_default();
        assert_eq!(t.traffic.packet_bytes, 1500);
        assert_eq!((t.phy.ap_tx_power_dbm, t.phy.sta_tx_power_dbm), (20.0, 15.0));
        assert_eq!(t.phy.nss, 8);
        assert_eq!((t.mac.cw_min, t.mac.cw_max), (7, 15));
        assert_eq!(t.mac.aifs_us, 34.0);
        assert_eq!(t.links.len(), 2);
        assert_eq!(t.mac.txop_us, 4096.0);
        assert!(t.mac.rts_cts);
        let l = ScenarioConfig::latency_default();
        assert_eq!(l.phy.nss, 2);
        assert_eq!(l.mac.retry_limit, 10);
        assert!(l.links.iter().all(|c| c.width_mhz == 160));
    }

    #[test]
    fn box_topology() {
        let mut rng = RngStream::new(5, "placement");
        let t = gen_throughput_box(8, 20.0, &mut rng);
        assert_eq!(t.nodes.len(), 9);
        assert_eq!(t.nodes[0].pos, Position::new(10.0, 10.0, 0.0));
        let bound = 20.0 * 2f64.sqrt();
        for a in &t.nodes {
            for b in &t.nodes {
                assert!(a.pos.distance(&b.pos) <= bound);
            }
        }
        let mut rng2 = RngStream::new(5, "placement");
        assert_eq!(gen_throughput_box(8, 20.0, &mut rng2), t);
    }

    #[test]
    fn residential_geometry() {
        let mut rng = RngStream::new(1, "placement");
        let t = gen_residential(2, 2, 10, 10.0, 3.0, 1, 4, &mut rng);
        assert_eq!(t.bss.len(), 40);
        let (mut max_x, mut max_y, mut max_z) = (0f64, 0f64, 0f64);
        for n in &t.nodes {
            max_x = max_x.max(n.pos.x);
            max_y = max_y.max(n.pos.y);
            max_z = max_z.max(n.pos.z);
            assert!(n.pos.x >= 0.0 && n.pos.y >= 0.0 && n.pos.z >= 0.0);
        }
        assert!(max_x <= 100.0 && max_y <= 20.0 && max_z <= 6.0);
        assert!(max_x > 90.0 && max_y > 10.0 && max_z > 3.0);
        let b = &t.bss[0];
        for &s in &b.stas {
            assert_eq!(t.walls_between(b.ap, s), 0);
            assert_eq!(t.floors_between(b.ap, s), 0);
        }
        // neighbours in the same row share one wall
        let next = &t.bss[1];
        assert_eq!(t.walls_between(b.ap, next.ap), 1);
        assert_eq!(t.walls_between(next.ap, b.ap), 1);
        let upstairs = &t.bss[20];
        assert_eq!(t.floors_between(b.ap, upstairs.ap), 1);
    }

    #[test]
    fn channel_assignment() {
        let cfg = ScenarioConfig::latency_default();
        let topo = build_topology(&cfg);
        assert_eq!(topo.analyzed.len(), 5);
        for &i in &topo.analyzed {
            assert_eq!(topo.bss[i].stas.len(), 4);
        }
        let non: Vec<_> = topo.bss.iter().filter(|b| b.channel != 0).collect();
        assert_eq!(non.len(), 35);
        let mut all = ScenarioConfig::latency_default();
        if let TopologyConfig::Residential { reuse_fraction, .. } = &mut all.topology {
            *reuse_fraction = 1.0;
        }
        assert_eq!(build_topology(&all).analyzed.len(), 40);
        assert_eq!(build_topology(&cfg), topo);
    }

    #[test]
    fn ax_pairing_doubles_aps() {
        let mut cfg = ScenarioConfig::latency_default();
        cfg.standard = Standard::Ax;
        let topo = build_topology(&cfg);
        assert_eq!(topo.analyzed.len(), 10);
    }

    #[test]
    fn throughput_box_clears_mcs13() {
        for seed in 0..20 {
            let cfg = ScenarioConfig { seed, ..ScenarioConfig::throughput_default() };
            let topo = build_topology(&cfg);
            check_throughput_link_budget(&cfg, &topo).unwrap();
        }
    }

    #[test]
    fn arrivals() {
        let src = TrafficSource {
            kind: TrafficKind::ConstantRate,
            rate_bps: 120e6,
            packet_bytes: 1500,
            direction: Direction::Dl,
        };
        assert!((src.packets_per_second() - 1e4).abs() < 1e-9);
        let zero = TrafficSource { rate_bps: 0.0, ..src.clone() };
        assert!(generate_arrivals(&zero, SimTime::from_ms(1000), RngStream::new(1, "t")).is_empty());
        // law of large numbers: 100 s at 10^4 pkt/s, sd of the count is 10^-3 relative
        let times = generate_arrivals(&src, SimTime::from_ms(100_000), RngStream::new(1, "t"));
        let rate = times.len() as f64 * 12_000.0 / 100.0;
        assert!((rate / 120e6 - 1.0).abs() < 0.01, "rate {rate}");
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }
}
