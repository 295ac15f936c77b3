//! Event-driven network: devices with one radio per link, a shared medium
//! per link with SINR-based reception, EDCA contention, SU and OFDMA
//! exchanges, and MLD queueing and reordering.

use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::engine::{EventHandle, Fired, RngStream, Scheduler, SimTime};
use crate::mac::{
    apply_failure, build_ampdu, fill_ampdu, uniform_aggregation_limit, EdcaState, MacTiming, Mpdu, RetryOutcome,
    TxQueue,
};
use crate::metrics::{
    DelayRecorder, DelaySample, DropCounts, Ledger, ReceiveLedger, RunMetrics, ThroughputCounter,
};
use crate::mlo::{nstr_gate, Gate, MldMode, MldRole, ReorderBuffer, ReorderOutcome};
use crate::ofdma::{full_mask, ru_size_for_width, Direction, RoundRobin, SubchannelMask};
use crate::phy::{
    dbm_to_mw, noise_floor_dbm, phy_rate, ppdu_duration, PhyRate, RuAllocation, RuSize,
};
use crate::scenario::{
    build_topology, check_throughput_link_budget, AccessMode, ArrivalProcess, CampaignKind, ScenarioConfig,
    ScenarioError, Standard, Topology, TrafficKind, TrafficSource,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("simulation error: {0}")]
    Sim(#[from] crate::engine::SimError),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Record every transmission.
    pub trace: bool,
    /// Check protocol invariants after every event.
    pub check: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Rts,
    Cts,
    MuRts,
    Trigger,
    Data,
    BlockAck,
    MultiStaBa,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub start: SimTime,
    pub end: SimTime,
    pub device: usize,
    pub link: usize,
    pub kind: FrameKind,
    /// Addressed receiver devices.
    pub to: Vec<usize>,
    pub mpdus: usize,
}

/// Counters of invariant violations seen while running with `check`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InvariantReport {
    pub events_checked: u64,
    pub ledger: u64,
    pub cw: u64,
    pub ampdu_len: u64,
    pub txop: u64,
    pub nav: u64,
    pub reorder: u64,
    pub in_flight_dup: u64,
    pub max_ampdu: usize,
}

impl InvariantReport {
    pub fn violations(&self) -> u64 {
        self.ledger + self.cw + self.ampdu_len + self.txop + self.nav + self.reorder + self.in_flight_dup
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace: Vec<TraceEntry>,
    pub report: InvariantReport,
    /// Devices configured as NSTR.
    pub nstr_devices: Vec<usize>,
    pub device_names: Vec<String>,
}

/// Runs one scenario to its configured duration.
pub fn run_scenario(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunOutput, NetError> {
    let mut net = Network::build(cfg, opts)?;
    let end = cfg.duration();
    net.prime();
    while let Some(f) = net.sched.pop_until(end) {
        net.handle(f);
        if net.opts.check {
            net.check_invariants();
        }
    }
    net.sched.advance_to(end)?;
    Ok(net.finish())
}

#[derive(Clone, Copy, Debug)]
enum Ev {
    Arrival(usize),
    Access(usize),
    TxEnd(usize, u64),
    StartTx(u64),
    Step(usize, u64),
    Timeout(usize, u64),
    NavExpire(usize),
    HoleTimer(usize, usize),
}

struct Device {
    name: String,
    role: MldRole,
    mode: MldMode,
    /// Radio per link, if the device operates there.
    radio_on: Vec<Option<usize>>,
    peers: Vec<usize>,
    queues: Vec<TxQueue>,
    next_seq: Vec<u64>,
    full_buffer: Vec<bool>,
    flow: Vec<Option<usize>>,
    reorder: Vec<ReorderBuffer<u32>>,
    hole_timer: Vec<bool>,
    last_released: Vec<Option<u64>>,
    /// NSTR: the exchange holding this device, and on which link.
    engaged: Option<(usize, u64)>,
}

impl Device {
    fn peer_index(&self, dev: usize) -> usize {
        self.peers.iter().position(|&p| p == dev).expect("peer association")
    }

    fn is_nstr(&self) -> bool {
        self.mode == MldMode::Nstr
    }
}

struct Radio {
    device: usize,
    link: usize,
    local: usize,
    edca: EdcaState,
    rng: RngStream,
    cs_count: u32,
    tx_count: u32,
    nav_until: SimTime,
    nav_ex: u64,
    nav_confirmed: bool,
    /// NAV set by an RTS is dropped at this time unless a frame of the same
    /// exchange shows up first.
    nav_reset_at: SimTime,
    nav_timer: Option<SimTime>,
    /// NAV from frames of the own BSS. Counts for carrier sense but not when
    /// answering the own AP or stations.
    intra_nav_until: SimTime,
    /// AP device of the BSS this radio belongs to.
    bss: usize,
    access: Option<(EventHandle, SimTime)>,
    contending: bool,
    blocked: bool,
    pending_tx: u32,
    exchange: Option<Exchange>,
    su_pointer: usize,
    rr: RoundRobin,
    prefer_ul: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ExKind {
    Su,
    DlMu,
    UlMu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Protect,
    Data,
    Trigger,
    Ack,
}

struct User {
    tx_dev: usize,
    tx_peer: usize,
    rx_dev: usize,
    rx_peer: usize,
    tx_radio: usize,
    rx_radio: usize,
    /// The radio that is not the exchange owner.
    peer_radio: usize,
    mask: SubchannelMask,
    rate: PhyRate,
    mpdus: Vec<Mpdu>,
    active: bool,
    bitmap: Option<Vec<bool>>,
    ack_ok: bool,
}

struct Exchange {
    id: u64,
    kind: ExKind,
    nav_end: SimTime,
    stage: Stage,
    users: Vec<User>,
    pending: u32,
    ends_left: u32,
    any_ok: bool,
    ul_len: SimTime,
    timeout: Option<EventHandle>,
    engaged: Vec<usize>,
    /// First-round MPDUs were pulled before protection.
    reserved: bool,
}

struct TxRec {
    id: u64,
    radio: usize,
    local: usize,
    start: SimTime,
    end: SimTime,
    mask: SubchannelMask,
    group: u64,
    kind: FrameKind,
    nav_end: SimTime,
    to: Vec<usize>,
    /// Exchange owner radio and user index for data frames.
    owner: usize,
    user: usize,
    payload_start: SimTime,
}

struct PendingTx {
    radio: usize,
    kind: FrameKind,
    dur: SimTime,
    mask: SubchannelMask,
    nav_end: SimTime,
    group: u64,
    to: Vec<usize>,
    owner: usize,
    user: usize,
}

struct Link {
    width_mhz: u32,
    radios: Vec<usize>,
    /// Received power in mW, `[tx local][rx local]`.
    rx_mw: Vec<Vec<f64>>,
    sensers: Vec<Vec<usize>>,
    su_rate: PhyRate,
    ru_rate: PhyRate,
    txs: Vec<TxRec>,
}

/// Arrivals are materialized lazily, whenever the queue is read. An event
/// is only kept while the queue is empty.
struct Flow {
    dev: usize,
    peer: usize,
    arrivals: ArrivalProcess,
    armed: bool,
}

struct Network {
    cfg: ScenarioConfig,
    opts: RunOptions,
    sched: Scheduler<Ev>,
    timing: MacTiming,
    devices: Vec<Device>,
    radios: Vec<Radio>,
    links: Vec<Link>,
    flows: Vec<Flow>,
    pending: FxHashMap<u64, PendingTx>,
    next_id: u64,
    lifetime: Option<SimTime>,
    txop: SimTime,
    pkt_bytes: u32,
    /// Linear SINR thresholds.
    data_thr_lin: f64,
    ctrl_thr_lin: f64,
    ctrl_noise_mw: f64,
    /// Noise power by number of occupied 20 MHz subchannels.
    noise_mw: Vec<f64>,
    overlap_buf: Vec<(usize, usize, u32, u32, bool)>,
    full_buffer_target: usize,
    end: SimTime,
    throughput: ThroughputCounter,
    delays: DelayRecorder,
    ledger: Ledger,
    rx_ledger: ReceiveLedger,
    collisions: u64,
    trace: Vec<TraceEntry>,
    report: InvariantReport,
    released: Vec<(u64, u32)>,
    built_ampdu: bool,
    /// Devices to wake once the current event is done.
    wake_later: Vec<usize>,
}

fn popcount(m: SubchannelMask) -> u32 {
    m.count_ones()
}

impl Network {
    fn build(cfg: &ScenarioConfig, opts: RunOptions) -> Result<Self, NetError> {
        cfg.validate()?;
        let topo = build_topology(cfg);
        if cfg.campaign == CampaignKind::Throughput {
            check_throughput_link_budget(cfg, &topo)?;
        }
        let n_links = cfg.links.len();
        let table = cfg.phy.mcs_table().map_err(ScenarioError::from)?;
        let mcs = table.get(cfg.phy.mcs).map_err(ScenarioError::from)?;
        let gi = cfg.phy.guard_interval()?;

        // Devices of the analysed BSSs. An 11ax BSS pair in one apartment
        // maps BSS k of the apartment onto link k.
        let mut devices: Vec<Device> = Vec::new();
        let mut node_dev: FxHashMap<usize, usize> = FxHashMap::default();
        let mut bss_links: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut apt_count: FxHashMap<(u32, u32, u32), usize> = FxHashMap::default();
        for &b in &topo.analyzed {
            let bss = &topo.bss[b];
            let links: Vec<usize> = match (cfg.standard, bss.apartment) {
                (Standard::Ax, Some(apt)) if n_links > 1 => {
                    let k = apt_count.entry(apt).or_insert(0);
                    let l = *k % n_links;
                    *k += 1;
                    vec![l]
                }
                _ => (0..n_links).collect(),
            };
            bss_links.push((b, links));
        }
        let mut add_device = |node: usize, devices: &mut Vec<Device>, topo: &Topology| {
            let n = &topo.nodes[node];
            let mode = if n.role == MldRole::NonAp { cfg.mld_mode } else { MldMode::Str };
            devices.push(Device {
                name: n.name.clone(),
                role: n.role,
                mode,
                radio_on: vec![None; n_links],
                peers: Vec::new(),
                queues: Vec::new(),
                next_seq: Vec::new(),
                full_buffer: Vec::new(),
                flow: Vec::new(),
                reorder: Vec::new(),
                hole_timer: Vec::new(),
                last_released: Vec::new(),
                engaged: None,
            });
            node_dev.insert(node, devices.len() - 1);
            devices.len() - 1
        };
        let mut radios: Vec<Radio> = Vec::new();
        let edca_params = cfg.mac.edca();
        let mut links: Vec<Link> = cfg
            .links
            .iter()
            .map(|spec| {
                let ru = match cfg.phy.ru_tones {
                    Some(t) => RuSize::from_tones(t).expect("validated"),
                    None => ru_size_for_width(spec.width_mhz),
                };
                let full = RuSize::full_band(spec.width_mhz).expect("validated width");
                Link {
                    width_mhz: spec.width_mhz,
                    radios: Vec::new(),
                    rx_mw: Vec::new(),
                    sensers: Vec::new(),
                    su_rate: phy_rate(&mcs, &RuAllocation::single(full), cfg.phy.nss, gi),
                    ru_rate: phy_rate(&mcs, &RuAllocation::single(ru), cfg.phy.nss, gi),
                    txs: Vec::new(),
                }
            })
            .collect();
        for (b, blinks) in &bss_links {
            let bss = &topo.bss[*b];
            let ap = add_device(bss.ap, &mut devices, &topo);
            let stas: Vec<usize> = bss.stas.iter().map(|&s| add_device(s, &mut devices, &topo)).collect();
            for &d in std::iter::once(&ap).chain(stas.iter()) {
                for &l in blinks {
                    let r = radios.len();
                    let label = format!("edca/{}/{}", devices[d].name, l);
                    let mut rng = RngStream::new(cfg.seed, &label);
                    let edca = EdcaState::new(edca_params, &mut rng);
                    radios.push(Radio {
                        device: d,
                        link: l,
                        local: links[l].radios.len(),
                        edca,
                        rng,
                        cs_count: 0,
                        tx_count: 0,
                        nav_until: SimTime::ZERO,
                        nav_ex: 0,
                        nav_confirmed: false,
                        nav_reset_at: SimTime::MAX,
                        nav_timer: None,
                        intra_nav_until: SimTime::ZERO,
                        bss: ap,
                        access: None,
                        contending: false,
                        blocked: false,
                        pending_tx: 0,
                        exchange: None,
                        su_pointer: 0,
                        rr: RoundRobin::new(),
                        prefer_ul: false,
                    });
                    links[l].radios.push(r);
                    devices[d].radio_on[l] = Some(r);
                }
            }
            let assoc = |a: usize, b: usize, devices: &mut Vec<Device>| {
                let d = &mut devices[a];
                d.peers.push(b);
                d.queues.push(TxQueue::new());
                d.next_seq.push(0);
                d.full_buffer.push(false);
                d.flow.push(None);
                d.reorder.push(ReorderBuffer::new(0));
                d.hole_timer.push(false);
                d.last_released.push(None);
            };
            for &s in &stas {
                assoc(ap, s, &mut devices);
                assoc(s, ap, &mut devices);
            }
        }

        // Link budgets between every pair of radios on a link.
        let node_of: FxHashMap<usize, usize> = node_dev.iter().map(|(&n, &d)| (d, n)).collect();
        for (l, link) in links.iter_mut().enumerate() {
            let freq = cfg.links[l].freq_ghz();
            let n = link.radios.len();
            link.rx_mw = vec![vec![0.0; n]; n];
            link.sensers = vec![Vec::new(); n];
            for i in 0..n {
                let di = radios[link.radios[i]].device;
                let ni = node_of[&di];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let dj = radios[link.radios[j]].device;
                    let nj = node_of[&dj];
                    let pl = topo.path_loss(&cfg.phy.path_loss, ni, nj, freq);
                    let rx = cfg.phy.tx_power_dbm(devices[di].role)
                        + cfg.phy.antenna_gain_dbi(devices[di].role)
                        + cfg.phy.antenna_gain_dbi(devices[dj].role)
                        - pl;
                    link.rx_mw[i][j] = dbm_to_mw(rx);
                    if rx >= cfg.phy.cca_threshold_dbm {
                        link.sensers[i].push(link.radios[j]);
                    }
                }
            }
        }

        // Traffic flows.
        let mut flows = Vec::new();
        let rate_bps = cfg.traffic.rate_mbps * 1e6;
        let per_device = |dev: &Device| -> f64 {
            let links = dev.radio_on.iter().filter(|r| r.is_some()).count();
            // single-link devices of a multi-link 11ax deployment get half
            if cfg.standard == Standard::Ax && n_links > 1 && links == 1 {
                rate_bps / n_links as f64
            } else {
                rate_bps
            }
        };
        for d in 0..devices.len() {
            let sender = match cfg.traffic.direction {
                Direction::Dl => devices[d].role == MldRole::Ap,
                Direction::Ul => devices[d].role == MldRole::NonAp,
            };
            if !sender {
                continue;
            }
            let n_peers = devices[d].peers.len();
            let dev_rate = per_device(&devices[d]);
            for p in 0..n_peers {
                match cfg.traffic.kind {
                    TrafficKind::FullBuffer => devices[d].full_buffer[p] = true,
                    TrafficKind::ConstantRate => {
                        let src = TrafficSource {
                            kind: TrafficKind::ConstantRate,
                            rate_bps: dev_rate / n_peers as f64,
                            packet_bytes: cfg.traffic.packet_bytes,
                            direction: cfg.traffic.direction,
                        };
                        let label = format!("traffic/{}/{}", devices[d].name, p);
                        devices[d].flow[p] = Some(flows.len());
                        flows.push(Flow {
                            dev: d,
                            peer: p,
                            arrivals: ArrivalProcess::new(&src, RngStream::new(cfg.seed, &label)),
                            armed: false,
                        });
                    }
                }
            }
        }

        let timing = cfg.mac.timing();
        let warmup = cfg.warmup();
        Ok(Self {
            cfg: cfg.clone(),
            opts,
            sched: Scheduler::new(),
            timing,
            full_buffer_target: cfg.mac.max_aggregation * (n_links + 1),
            devices,
            radios,
            links,
            flows,
            pending: FxHashMap::default(),
            next_id: 1,
            lifetime: cfg.mac.lifetime(),
            txop: cfg.mac.txop(),
            pkt_bytes: cfg.traffic.packet_bytes,
            data_thr_lin: dbm_to_mw(mcs.min_sinr_db),
            ctrl_thr_lin: dbm_to_mw(cfg.phy.control_min_sinr_db),
            overlap_buf: Vec::new(),
            noise_mw: (0..=16).map(|n| dbm_to_mw(noise_floor_dbm(20 * n.max(1), cfg.phy.noise_figure_db))).collect(),
            ctrl_noise_mw: dbm_to_mw(noise_floor_dbm(20, cfg.phy.noise_figure_db)),
            end: cfg.duration(),
            throughput: ThroughputCounter::new(warmup),
            delays: DelayRecorder::new(warmup),
            ledger: Ledger::default(),
            rx_ledger: ReceiveLedger::default(),
            collisions: 0,
            trace: Vec::new(),
            report: InvariantReport::default(),
            released: Vec::new(),
            built_ampdu: false,
            wake_later: Vec::new(),
        })
    }

    fn now(&self) -> SimTime {
        self.sched.now()
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn prime(&mut self) {
        for f in 0..self.flows.len() {
            self.arm(f);
        }
        for d in 0..self.devices.len() {
            if self.devices[d].full_buffer.iter().any(|&b| b) {
                self.wake_device(d);
            }
        }
    }

    fn handle(&mut self, f: Fired<Ev>) {
        match f.event {
            Ev::Arrival(flow) => self.on_arrival(flow),
            Ev::Access(r) => self.on_access(r),
            Ev::TxEnd(l, id) => self.on_tx_end(l, id),
            Ev::StartTx(id) => {
                let p = self.pending.remove(&id).expect("pending frame");
                self.radios[p.radio].pending_tx -= 1;
                self.start_tx(p.radio, p.kind, p.dur, p.mask, p.nav_end, p.group, p.to, p.owner, p.user);
            }
            Ev::Step(r, ex) => self.on_step(r, ex),
            Ev::Timeout(r, ex) => self.on_timeout(r, ex),
            Ev::NavExpire(r) => {
                if self.radios[r].nav_timer == Some(self.now()) {
                    self.radios[r].nav_timer = None;
                    self.refresh(r);
                }
            }
            Ev::HoleTimer(d, p) => self.on_hole_timer(d, p),
        }
        while let Some(d) = self.wake_later.pop() {
            self.wake_device(d);
        }
    }

    // ---- traffic and queues ----

    fn new_mpdu(&mut self, d: usize, p: usize, at: SimTime) -> Mpdu {
        let dev = &mut self.devices[d];
        let seq = dev.next_seq[p];
        dev.next_seq[p] += 1;
        self.ledger.generated += 1;
        Mpdu {
            id: self.ledger.generated,
            seq,
            size_bytes: self.pkt_bytes,
            enqueue_time: at,
            retries: 0,
        }
    }

    fn arm(&mut self, f: usize) {
        let t = self.flows[f].arrivals.peek();
        if !self.flows[f].armed && t < self.end {
            self.flows[f].armed = true;
            self.sched.schedule(t, Ev::Arrival(f)).expect("future arrival");
        }
    }

    fn on_arrival(&mut self, flow: usize) {
        let (d, p) = (self.flows[flow].dev, self.flows[flow].peer);
        self.flows[flow].armed = false;
        self.top_up(d, p);
        self.after_pull(d, p);
        self.wake_device(d);
    }

    /// Brings a queue up to date: full-buffer refill, or every arrival due
    /// by now.
    fn top_up(&mut self, d: usize, p: usize) {
        if self.devices[d].full_buffer[p] {
            while self.devices[d].queues[p].len() < self.full_buffer_target {
                let m = self.new_mpdu(d, p, self.sched.now());
                self.devices[d].queues[p].push_back(m);
            }
            return;
        }
        let Some(f) = self.devices[d].flow[p] else { return };
        let now = self.sched.now();
        while self.flows[f].arrivals.peek() <= now {
            let t = self.flows[f].arrivals.pop();
            let m = self.new_mpdu(d, p, t);
            if self.devices[d].queues[p].len() >= self.cfg.mac.queue_capacity {
                self.ledger.drop_overflow += 1;
            } else {
                self.devices[d].queues[p].push_back(m);
            }
        }
    }

    /// Re-arms the arrival event once a queue has drained.
    fn after_pull(&mut self, d: usize, p: usize) {
        if self.devices[d].queues[p].is_empty() {
            if let Some(f) = self.devices[d].flow[p] {
                self.arm(f);
            }
        }
    }

    /// MPDUs the sender can plan a TXOP around. Full-buffer flows never
    /// run dry.
    fn planned_backlog(&self, d: usize, p: usize) -> usize {
        if self.devices[d].full_buffer[p] {
            usize::MAX
        } else {
            self.devices[d].queues[p].len()
        }
    }

    fn backlogged(&self, d: usize, p: usize) -> bool {
        self.devices[d].full_buffer[p] || !self.devices[d].queues[p].is_empty()
    }

    /// Another link of an NSTR device is busy with a different exchange.
    fn nstr_busy_elsewhere(&self, d: usize, link: usize) -> bool {
        let dev = &self.devices[d];
        let other = matches!(dev.engaged, Some((l, _)) if l != link);
        nstr_gate(dev.mode, other) == Gate::Defer
    }

    fn wants_access(&self, r: usize) -> bool {
        let radio = &self.radios[r];
        let d = radio.device;
        let dev = &self.devices[d];
        let link = radio.link;
        match (dev.role, self.cfg.access) {
            (MldRole::NonAp, AccessMode::Ofdma) => false,
            (MldRole::NonAp, AccessMode::Su) => self.backlogged(d, 0),
            (MldRole::Ap, mode) => (0..dev.peers.len()).any(|p| {
                let peer = dev.peers[p];
                if self.devices[peer].radio_on[link].is_none() {
                    return false;
                }
                self.backlogged(d, p) || (mode == AccessMode::Ofdma && self.backlogged(peer, 0))
            }),
        }
    }

    fn wake_device(&mut self, d: usize) {
        let ofdma_sta = self.devices[d].role == MldRole::NonAp && self.cfg.access == AccessMode::Ofdma;
        for l in 0..self.links.len() {
            if self.devices[d].radio_on[l].is_none() {
                continue;
            }
            if ofdma_sta {
                // stations only answer triggers; their AP schedules them
                let ap = self.devices[d].peers[0];
                if let Some(ar) = self.devices[ap].radio_on[l] {
                    self.wake_radio(ar);
                }
            } else if let Some(r) = self.devices[d].radio_on[l] {
                self.wake_radio(r);
            }
        }
    }

    fn wake_radio(&mut self, r: usize) {
        if self.radios[r].exchange.is_some() {
            return;
        }
        let want = self.wants_access(r);
        if want != self.radios[r].contending {
            self.radios[r].contending = want;
            self.refresh(r);
        }
    }

    // ---- carrier sense and EDCA ----

    /// Applies a pending RTS NAV reset that is due.
    fn nav_normalize(&mut self, r: usize) {
        let now = self.sched.now();
        let x = &mut self.radios[r];
        if !x.nav_confirmed && x.nav_reset_at <= now {
            x.nav_until = x.nav_until.min(x.nav_reset_at);
            x.nav_reset_at = SimTime::MAX;
        }
    }

    fn basic_nav_busy(&mut self, r: usize) -> bool {
        self.nav_normalize(r);
        self.radios[r].nav_until > self.sched.now()
    }

    fn nav_busy(&mut self, r: usize) -> bool {
        self.basic_nav_busy(r) || self.radios[r].intra_nav_until > self.sched.now()
    }

    fn refresh(&mut self, r: usize) {
        let now = self.sched.now();
        let nav = self.nav_busy(r);
        let radio = &mut self.radios[r];
        let eligible = radio.contending && radio.exchange.is_none() && !radio.blocked && radio.pending_tx == 0;
        let busy = radio.cs_count > 0 || nav || radio.tx_count > 0;
        if eligible && nav {
            // wake when the NAV runs out, or at the RTS reset check
            let basic = if radio.nav_confirmed { radio.nav_until } else { radio.nav_until.min(radio.nav_reset_at) };
            let wake = if radio.nav_until > now { basic.max(radio.intra_nav_until) } else { radio.intra_nav_until };
            if radio.nav_timer != Some(wake) {
                radio.nav_timer = Some(wake);
                self.sched.schedule(wake, Ev::NavExpire(r)).expect("future nav");
            }
        }
        let radio = &mut self.radios[r];
        if !eligible || busy {
            if let Some((h, at)) = radio.access.take() {
                if eligible && at == now {
                    // reached zero in this same instant: transmits anyway
                    radio.access = Some((h, at));
                    return;
                }
                self.sched.cancel(h);
                radio.edca.on_medium_busy(now);
            }
        } else if radio.access.is_none() {
            let at = radio.edca.on_medium_idle(now);
            let h = self.sched.schedule(at, Ev::Access(r)).expect("future access");
            radio.access = Some((h, at));
        }
    }

    fn on_access(&mut self, r: usize) {
        let now = self.now();
        self.radios[r].access = None;
        if self.nav_busy(r) {
            self.radios[r].edca.on_medium_busy(now);
            self.refresh(r);
            return;
        }
        self.radios[r].edca.on_access();
        let d = self.radios[r].device;
        let link = self.radios[r].link;
        if self.nstr_busy_elsewhere(d, link) {
            self.radios[r].blocked = true;
            return;
        }
        let started = match (self.devices[d].role, self.cfg.access) {
            (MldRole::Ap, AccessMode::Ofdma) => {
                let dl = self.mu_candidates(r, Direction::Dl);
                let ul = self.mu_candidates(r, Direction::Ul);
                let dir = match (dl.is_empty(), ul.is_empty()) {
                    (true, true) => None,
                    (false, true) => Some(Direction::Dl),
                    (true, false) => Some(Direction::Ul),
                    (false, false) => {
                        let pick = if self.radios[r].prefer_ul { Direction::Ul } else { Direction::Dl };
                        self.radios[r].prefer_ul = !self.radios[r].prefer_ul;
                        Some(pick)
                    }
                };
                match dir {
                    Some(dir) => self.start_mu(r, dir, if dir == Direction::Dl { dl } else { ul }),
                    None => false,
                }
            }
            _ => self.start_su(r),
        };
        if !started {
            let radio = &mut self.radios[r];
            radio.edca.draw_backoff(&mut radio.rng);
            radio.contending = false;
            self.wake_radio(r);
        }
    }

    // ---- exchanges ----

    fn engage(&mut self, d: usize, link: usize, ex: u64) -> bool {
        let dev = &mut self.devices[d];
        if dev.is_nstr() {
            dev.engaged = Some((link, ex));
            true
        } else {
            false
        }
    }

    fn start_su(&mut self, r: usize) -> bool {
        let d = self.radios[r].device;
        let link = self.radios[r].link;
        let n = self.devices[d].peers.len();
        let start = self.radios[r].su_pointer;
        let mut chosen = None;
        for k in 0..n {
            let p = (start + k) % n;
            let peer = self.devices[d].peers[p];
            if self.devices[peer].radio_on[link].is_none() || !self.backlogged(d, p) {
                continue;
            }
            if self.nstr_busy_elsewhere(peer, link) {
                continue;
            }
            chosen = Some(p);
            break;
        }
        let Some(p) = chosen else { return false };
        self.radios[r].su_pointer = (p + 1) % n;
        self.top_up(d, p);
        let peer = self.devices[d].peers[p];
        let peer_radio = self.devices[peer].radio_on[link].expect("peer on link");
        let rate = self.links[link].su_rate;
        let protect = if self.cfg.mac.rts_cts { self.timing.rts() + self.timing.sifs + self.timing.cts() + self.timing.sifs } else { SimTime::ZERO };
        let per_round = self.timing.sifs + self.timing.block_ack(self.cfg.mac.max_aggregation) + self.timing.sifs;
        let counts = vec![self.planned_backlog(d, p)];
        let dur = self.rounds_duration(counts, &rate, protect, per_round);
        let now = self.now();
        // the first A-MPDU is claimed when access is won
        let q = &mut self.devices[d].queues[p];
        let (first, expired) =
            build_ampdu(q, now, self.lifetime, &rate, dur.saturating_sub(protect), self.cfg.mac.max_aggregation, &self.timing);
        self.ledger.drop_lifetime += expired as u64;
        self.after_pull(d, p);
        if first.mpdus.is_empty() {
            return false;
        }
        self.note_ampdu(first.mpdus.len());
        let id = self.fresh_id();
        let user = User {
            tx_dev: d,
            tx_peer: p,
            rx_dev: peer,
            rx_peer: self.devices[peer].peer_index(d),
            tx_radio: r,
            rx_radio: peer_radio,
            peer_radio,
            mask: full_mask(self.links[link].width_mhz),
            rate,
            mpdus: first.mpdus,
            active: true,
            bitmap: None,
            ack_ok: false,
        };
        let mut engaged = Vec::new();
        if self.engage(d, link, id) {
            engaged.push(d);
        }
        if self.engage(peer, link, id) {
            engaged.push(peer);
        }
        self.radios[r].exchange = Some(Exchange {
            id,
            kind: ExKind::Su,
            nav_end: now + dur,
            stage: Stage::Protect,
            users: vec![user],
            pending: 0,
            ends_left: 0,
            any_ok: false,
            ul_len: SimTime::ZERO,
            timeout: None,
            engaged,
            reserved: true,
        });
        self.check_initial_nav(r);
        if self.cfg.mac.rts_cts {
            let rts = self.timing.rts();
            self.start_tx(r, FrameKind::Rts, rts, full_mask(self.links[link].width_mhz), now + dur, id, vec![peer_radio], r, 0);
        } else {
            self.on_step(r, id);
        }
        true
    }

    /// Stations eligible for an MU exchange on this radio's link.
    fn mu_candidates(&self, r: usize, dir: Direction) -> Vec<usize> {
        let d = self.radios[r].device;
        let link = self.radios[r].link;
        let dev = &self.devices[d];
        (0..dev.peers.len())
            .filter(|&p| {
                let peer = dev.peers[p];
                self.devices[peer].radio_on[link].is_some()
                    && !self.nstr_busy_elsewhere(peer, link)
                    && match dir {
                        Direction::Dl => self.backlogged(d, p),
                        Direction::Ul => self.backlogged(peer, 0),
                    }
            })
            .collect()
    }

    fn start_mu(&mut self, r: usize, dir: Direction, candidates: Vec<usize>) -> bool {
        let d = self.radios[r].device;
        let link = self.radios[r].link;
        let width = self.links[link].width_mhz;
        let ru = match self.cfg.phy.ru_tones {
            Some(t) => RuSize::from_tones(t).expect("validated"),
            None => ru_size_for_width(width),
        };
        let all: Vec<usize> = (0..self.devices[d].peers.len()).collect();
        let grants = self.radios[r].rr.schedule(&all, |p| candidates.contains(&p), width, ru, dir);
        if grants.is_empty() {
            return false;
        }
        let id = self.fresh_id();
        let rate = self.links[link].ru_rate;
        let mut users = Vec::new();
        let mut engaged = Vec::new();
        for g in &grants {
            let p = g.sta;
            let peer = self.devices[d].peers[p];
            let peer_radio = self.devices[peer].radio_on[link].expect("peer on link");
            let back = self.devices[peer].peer_index(d);
            let user = match dir {
                Direction::Dl => {
                    self.top_up(d, p);
                    User {
                        tx_dev: d,
                        tx_peer: p,
                        rx_dev: peer,
                        rx_peer: back,
                        tx_radio: r,
                        rx_radio: peer_radio,
                        peer_radio,
                        mask: g.mask,
                        rate,
                        mpdus: Vec::new(),
                        active: true,
                        bitmap: None,
                        ack_ok: false,
                    }
                }
                Direction::Ul => {
                    self.top_up(peer, back);
                    User {
                        tx_dev: peer,
                        tx_peer: back,
                        rx_dev: d,
                        rx_peer: p,
                        tx_radio: peer_radio,
                        rx_radio: r,
                        peer_radio,
                        mask: g.mask,
                        rate,
                        mpdus: Vec::new(),
                        active: true,
                        bitmap: None,
                        ack_ok: false,
                    }
                }
            };
            if self.engage(peer, link, id) {
                engaged.push(peer);
            }
            users.push(user);
        }
        let n = users.len();
        let max_agg = self.cfg.mac.max_aggregation;
        // uplink goes straight to the trigger, which solicits the responses
        let protect = match dir {
            Direction::Dl => self.timing.trigger(n) + self.timing.sifs + self.timing.cts() + self.timing.sifs,
            Direction::Ul => SimTime::ZERO,
        };
        let per_round = match dir {
            Direction::Dl => self.timing.sifs + self.timing.block_ack(max_agg) + self.timing.sifs,
            Direction::Ul => {
                self.timing.trigger(n)
                    + self.timing.sifs
                    + self.timing.sifs
                    + self.timing.multi_sta_block_ack(n, max_agg)
                    + self.timing.sifs
            }
        };
        let counts: Vec<usize> = users.iter().map(|u| self.planned_backlog(u.tx_dev, u.tx_peer)).collect();
        let dur = self.rounds_duration(counts, &rate, protect, per_round);
        let now = self.now();
        if dir == Direction::Dl {
            for u in users.iter_mut() {
                let q = &mut self.devices[u.tx_dev].queues[u.tx_peer];
                let (a, expired) =
                    build_ampdu(q, now, self.lifetime, &rate, dur.saturating_sub(protect), max_agg, &self.timing);
                self.ledger.drop_lifetime += expired as u64;
                u.mpdus = a.mpdus;
                self.after_pull(u.tx_dev, u.tx_peer);
            }
            users.retain(|u| !u.mpdus.is_empty());
            for u in &users {
                self.note_ampdu(u.mpdus.len());
            }
            let kept: Vec<usize> = users.iter().map(|u| u.rx_dev).collect();
            for &dev in engaged.iter().filter(|d| !kept.contains(d)) {
                self.devices[dev].engaged = None;
            }
            engaged.retain(|d| kept.contains(d));
            if users.is_empty() {
                return false;
            }
        }
        let to: Vec<usize> = users.iter().map(|u| u.peer_radio).collect();
        self.radios[r].exchange = Some(Exchange {
            id,
            kind: if dir == Direction::Dl { ExKind::DlMu } else { ExKind::UlMu },
            nav_end: now + dur,
            stage: Stage::Protect,
            users,
            pending: 0,
            ends_left: 0,
            any_ok: false,
            ul_len: SimTime::ZERO,
            timeout: None,
            engaged,
            reserved: dir == Direction::Dl,
        });
        self.check_initial_nav(r);
        if dir == Direction::Ul {
            self.on_step(r, id);
            return true;
        }
        let murts = self.timing.trigger(n);
        self.start_tx(r, FrameKind::MuRts, murts, full_mask(width), now + dur, id, to, r, 0);
        true
    }

    /// Planned exchange length for the queued MPDU counts, capped by TXOP.
    fn rounds_duration(&self, mut counts: Vec<usize>, rate: &PhyRate, prefix: SimTime, per_round: SimTime) -> SimTime {
        let bits = self.pkt_bytes as u64 * 8;
        let pre = self.timing.data_preamble;
        let mut t = prefix;
        while counts.iter().any(|&c| c > 0) {
            if self.txop <= t + per_round + pre {
                break;
            }
            let budget = self.txop - t - per_round - pre;
            let k = uniform_aggregation_limit(bits, rate, budget, self.cfg.mac.max_aggregation);
            if k == 0 {
                break;
            }
            let longest = counts.iter().map(|&c| c.min(k)).max().unwrap_or(0);
            t += ppdu_duration(longest as u64 * bits, rate, pre) + per_round;
            for c in counts.iter_mut() {
                *c -= (*c).min(k);
            }
        }
        t.min(self.txop)
    }

    fn check_initial_nav(&mut self, r: usize) {
        if self.nav_busy(r) {
            self.report.nav += 1;
        }
    }

    fn exchange(&self, r: usize, ex: u64) -> bool {
        self.radios[r].exchange.as_ref().is_some_and(|e| e.id == ex)
    }

    /// Owner's next frame after a successful protection or ack round.
    fn on_step(&mut self, r: usize, ex: u64) {
        if !self.exchange(r, ex) {
            return;
        }
        let now = self.now();
        let kind = self.radios[r].exchange.as_ref().unwrap().kind;
        match kind {
            ExKind::Su | ExKind::DlMu => {
                let mut e = self.radios[r].exchange.take().unwrap();
                let remaining = e.nav_end.saturating_sub(now);
                let mut longest = SimTime::ZERO;
                let reserved = std::mem::take(&mut e.reserved);
                for u in e.users.iter_mut() {
                    if !u.active {
                        self.return_unsent(u);
                        continue;
                    }
                    if reserved {
                        longest = longest.max(ppdu_duration(
                            u.mpdus.iter().map(|m| m.bits()).sum(),
                            &u.rate,
                            self.timing.data_preamble,
                        ));
                        continue;
                    }
                    self.top_up_user(u);
                    let q = &mut self.devices[u.tx_dev].queues[u.tx_peer];
                    let (a, expired) = build_ampdu(q, now, self.lifetime, &u.rate, remaining, self.cfg.mac.max_aggregation, &self.timing);
                    self.ledger.drop_lifetime += expired as u64;
                    self.after_pull(u.tx_dev, u.tx_peer);
                    self.note_ampdu(a.mpdus.len());
                    longest = longest.max(a.airtime);
                    u.mpdus = a.mpdus;
                    u.bitmap = None;
                    u.ack_ok = false;
                }
                let senders: Vec<usize> = e.users.iter().filter(|u| !u.mpdus.is_empty()).map(|u| u.rx_radio).collect();
                if senders.is_empty() {
                    self.radios[r].exchange = Some(e);
                    self.end_exchange(r, true);
                    return;
                }
                if now + longest + self.timing.sifs + self.timing.block_ack(self.cfg.mac.max_aggregation) > e.nav_end {
                    self.report.txop += 1;
                }
                e.stage = Stage::Data;
                e.ends_left = senders.len() as u32;
                e.pending = 0;
                let nav_end = e.nav_end;
                let frames: Vec<(usize, SubchannelMask, usize)> = e
                    .users
                    .iter()
                    .enumerate()
                    .filter(|(_, u)| !u.mpdus.is_empty())
                    .map(|(i, u)| (i, u.mask, u.rx_radio))
                    .collect();
                self.radios[r].exchange = Some(e);
                for (i, mask, to) in frames {
                    self.start_tx(r, FrameKind::Data, longest, mask, nav_end, ex, vec![to], r, i);
                }
            }
            ExKind::UlMu => {
                let e = self.radios[r].exchange.as_mut().unwrap();
                let n = e.users.iter().filter(|u| u.active).count();
                let max_agg = self.cfg.mac.max_aggregation;
                let fixed = self.timing.trigger(n)
                    + self.timing.sifs
                    + self.timing.sifs
                    + self.timing.multi_sta_block_ack(n, max_agg);
                let remaining = e.nav_end.saturating_sub(now);
                if remaining <= fixed + self.timing.data_preamble {
                    self.end_exchange(r, true);
                    return;
                }
                let budget = remaining - fixed;
                let bits = self.pkt_bytes as u64 * 8;
                let mut longest = SimTime::ZERO;
                let users: Vec<(usize, usize, bool, PhyRate)> =
                    e.users.iter().map(|u| (u.tx_dev, u.tx_peer, u.active, u.rate)).collect();
                for (dev, p, active, rate) in users {
                    if !active {
                        continue;
                    }
                    self.top_up(dev, p);
                    let q = self.devices[dev].queues[p].len().min(max_agg);
                    if q > 0 {
                        longest = longest.max(ppdu_duration(q as u64 * bits, &rate, self.timing.data_preamble));
                    }
                }
                let ul_len = longest.min(budget);
                let pre = self.timing.data_preamble;
                let rate = self.links[self.radios[r].link].ru_rate;
                if longest == SimTime::ZERO || ul_len < pre + rate.symbol() {
                    self.end_exchange(r, true);
                    return;
                }
                let e = self.radios[r].exchange.as_mut().unwrap();
                e.ul_len = ul_len;
                e.stage = Stage::Trigger;
                let nav_end = e.nav_end;
                let to: Vec<usize> = e.users.iter().filter(|u| u.active).map(|u| u.peer_radio).collect();
                let width = self.links[self.radios[r].link].width_mhz;
                self.start_tx(r, FrameKind::Trigger, self.timing.trigger(n), full_mask(width), nav_end, ex, to, r, 0);
            }
        }
    }

    fn top_up_user(&mut self, u: &User) {
        self.top_up(u.tx_dev, u.tx_peer);
    }

    fn note_ampdu(&mut self, n: usize) {
        self.built_ampdu = true;
        if n > self.cfg.mac.max_aggregation {
            self.report.ampdu_len += 1;
        }
        self.report.max_ampdu = self.report.max_ampdu.max(n);
    }

    fn schedule_response(
        &mut self,
        radio: usize,
        kind: FrameKind,
        dur: SimTime,
        mask: SubchannelMask,
        nav_end: SimTime,
        group: u64,
        to: Vec<usize>,
        owner: usize,
        user: usize,
    ) {
        let id = self.fresh_id();
        self.radios[radio].pending_tx += 1;
        self.pending.insert(id, PendingTx { radio, kind, dur, mask, nav_end, group, to, owner, user });
        self.sched.schedule_in(self.timing.sifs, Ev::StartTx(id));
        self.refresh(radio);
    }

    fn arm_timeout(&mut self, r: usize, ex: u64, response: SimTime) {
        let h = self.sched.schedule_in(self.timing.response_timeout(response), Ev::Timeout(r, ex));
        if let Some(e) = self.radios[r].exchange.as_mut() {
            e.timeout = Some(h);
        }
    }

    /// A responder may answer if it is idle, not transmitting and its NAV
    /// is clear.
    fn can_respond(&mut self, radio: usize) -> bool {
        let nav = self.basic_nav_busy(radio);
        let r = &self.radios[radio];
        r.tx_count == 0 && r.pending_tx == 0 && r.exchange.is_none() && !nav
    }

    fn on_tx_end(&mut self, l: usize, id: u64) {
        let now = self.now();
        let idx = self.links[l].txs.iter().position(|t| t.id == id).expect("tx record");
        let (radio, local, kind, nav_end, group, owner, user) = {
            let t = &self.links[l].txs[idx];
            (t.radio, t.local, t.kind, t.nav_end, t.group, t.owner, t.user)
        };
        self.radios[radio].tx_count -= 1;
        // carrier sense and third-party NAV
        let sensers = std::mem::take(&mut self.links[l].sensers[local]);
        let overlaps = self.overlaps(l, idx);
        for &s in &sensers {
            self.radios[s].cs_count -= 1;
            let addressed = self.links[l].txs[idx].to.contains(&s);
            self.nav_normalize(s);
            if self.radios[s].bss == self.radios[radio].bss {
                if !addressed && nav_end > self.radios[s].intra_nav_until && self.hears_ctrl(l, local, s, &overlaps) {
                    self.radios[s].intra_nav_until = nav_end;
                }
            } else if !addressed
                && nav_end > now
                && self.radios[s].nav_until < nav_end
                && self.hears_ctrl(l, local, s, &overlaps)
            {
                let rts = matches!(kind, FrameKind::Rts | FrameKind::MuRts);
                let reset = now + self.timing.sifs + self.timing.cts() + self.timing.sifs + self.timing.slot + self.timing.slot;
                let rs = &mut self.radios[s];
                rs.nav_until = nav_end;
                rs.nav_ex = group;
                rs.nav_confirmed = !rts;
                rs.nav_reset_at = if rts { reset } else { SimTime::MAX };
            } else if self.radios[s].nav_ex == group && !matches!(kind, FrameKind::Rts | FrameKind::MuRts) {
                self.radios[s].nav_confirmed = true;
            }
        }
        self.links[l].sensers[local] = sensers;
        self.overlap_buf = overlaps;

        match kind {
            FrameKind::Rts | FrameKind::MuRts => self.after_protect(l, idx, owner),
            FrameKind::Cts => self.after_cts(l, idx, owner, user),
            FrameKind::Data => self.after_data(l, idx, owner, user),
            FrameKind::BlockAck => self.after_ba(l, idx, owner, user),
            FrameKind::Trigger => self.after_trigger(l, idx, owner),
            FrameKind::MultiStaBa => self.after_msba(l, idx, owner),
        }

        // prune history no longer overlapping anything active
        let link = &mut self.links[l];
        let oldest_active = link.txs.iter().filter(|t| t.id != id && t.end >= now).map(|t| t.start).min().unwrap_or(now);
        link.txs.retain(|t| t.end > oldest_active);

        let sensers = std::mem::take(&mut self.links[l].sensers[local]);
        for &s in &sensers {
            self.refresh(s);
        }
        self.links[l].sensers[local] = sensers;
        self.refresh(radio);
    }

    fn after_protect(&mut self, l: usize, idx: usize, owner: usize) {
        let Some(e) = self.radios[owner].exchange.as_ref() else { return };
        let (ex, nav_end) = (e.id, e.nav_end);
        let targets: Vec<(usize, usize)> = e.users.iter().enumerate().map(|(i, u)| (i, u.peer_radio)).collect();
        let mut responders = 0;
        for (i, pr) in targets {
            if self.decode_ctrl(l, idx, pr) && self.can_respond(pr) {
                let mask = full_mask(self.links[l].width_mhz);
                self.schedule_response(pr, FrameKind::Cts, self.timing.cts(), mask, nav_end, ex, vec![owner], owner, i);
                responders += 1;
            } else {
                self.radios[owner].exchange.as_mut().unwrap().users[i].active = false;
            }
        }
        let e = self.radios[owner].exchange.as_mut().unwrap();
        e.pending = responders;
        if responders == 0 {
            let cts = self.timing.cts();
            self.arm_timeout(owner, ex, cts);
        }
    }

    fn after_cts(&mut self, l: usize, idx: usize, owner: usize, user: usize) {
        let ok = self.decode_ctrl(l, idx, owner);
        let Some(e) = self.radios[owner].exchange.as_mut() else { return };
        if !ok {
            e.users[user].active = false;
        }
        e.pending -= 1;
        if e.pending > 0 {
            return;
        }
        let ex = e.id;
        if e.users.iter().any(|u| u.active) {
            self.sched.schedule_in(self.timing.sifs, Ev::Step(owner, ex));
        } else {
            let h = self.sched.schedule_in(self.timing.slot, Ev::Timeout(owner, ex));
            self.radios[owner].exchange.as_mut().unwrap().timeout = Some(h);
        }
    }

    fn after_data(&mut self, l: usize, idx: usize, owner: usize, user: usize) {
        let Some(e) = self.radios[owner].exchange.as_ref() else { return };
        let (ex, kind, nav_end) = (e.id, e.kind, e.nav_end);
        let rx = e.users[user].rx_radio;
        let rate = e.users[user].rate;
        let bitmap = self.decode_data(l, idx, rx, &rate, owner, user);
        if let Some(bm) = &bitmap {
            self.deliver(owner, user, bm);
        }
        let max_agg = self.cfg.mac.max_aggregation;
        let e = self.radios[owner].exchange.as_mut().unwrap();
        e.users[user].bitmap = bitmap;
        e.ends_left -= 1;
        match kind {
            ExKind::Su | ExKind::DlMu => {
                let responds = e.users[user].bitmap.is_some();
                let mask = e.users[user].mask;
                if responds && self.radios[rx].tx_count == 0 {
                    let e = self.radios[owner].exchange.as_mut().unwrap();
                    e.pending += 1;
                    let ba = self.timing.block_ack(max_agg);
                    self.schedule_response(rx, FrameKind::BlockAck, ba, mask, nav_end, ex, vec![owner], owner, user);
                }
                let e = self.radios[owner].exchange.as_mut().unwrap();
                if e.ends_left == 0 {
                    e.stage = Stage::Ack;
                    if e.pending == 0 {
                        let ba = self.timing.block_ack(max_agg);
                        self.arm_timeout(owner, ex, ba);
                    }
                }
            }
            ExKind::UlMu => {
                if e.ends_left == 0 {
                    e.stage = Stage::Ack;
                    let got: Vec<usize> = e
                        .users
                        .iter()
                        .filter(|u| u.active && u.bitmap.is_some())
                        .map(|u| u.tx_radio)
                        .collect();
                    let n = got.len();
                    if n == 0 {
                        let ms = self.timing.multi_sta_block_ack(1, max_agg);
                        self.arm_timeout(owner, ex, ms);
                    } else {
                        let ms = self.timing.multi_sta_block_ack(n, max_agg);
                        let mask = full_mask(self.links[l].width_mhz);
                        self.schedule_response(owner, FrameKind::MultiStaBa, ms, mask, nav_end, ex, got, owner, 0);
                    }
                }
            }
        }
    }

    fn after_trigger(&mut self, l: usize, idx: usize, owner: usize) {
        let now = self.now();
        let Some(e) = self.radios[owner].exchange.as_ref() else { return };
        let (ex, nav_end, ul_len) = (e.id, e.nav_end, e.ul_len);
        let users: Vec<(usize, usize, usize, usize, bool, PhyRate, SubchannelMask)> =
            e.users.iter().map(|u| (u.tx_radio, u.tx_dev, u.tx_peer, u.rx_radio, u.active, u.rate, u.mask)).collect();
        let mut responders = 0u32;
        let mut heard = 0u32;
        for (i, (txr, dev, p, rxr, active, rate, mask)) in users.into_iter().enumerate() {
            if !active {
                continue;
            }
            if !(self.decode_ctrl(l, idx, txr) && self.can_respond(txr)) {
                continue;
            }
            heard += 1;
            let pre = self.timing.data_preamble;
            self.top_up(dev, p);
            let q = &mut self.devices[dev].queues[p];
            let (a, expired) =
                fill_ampdu(q, now, self.lifetime, &rate, ul_len - pre, self.cfg.mac.max_aggregation, pre);
            self.ledger.drop_lifetime += expired as u64;
            self.after_pull(dev, p);
            self.note_ampdu(a.mpdus.len());
            if a.mpdus.is_empty() {
                continue;
            }
            let e = self.radios[owner].exchange.as_mut().unwrap();
            e.users[i].mpdus = a.mpdus;
            e.users[i].bitmap = None;
            e.users[i].ack_ok = false;
            responders += 1;
            self.schedule_response(txr, FrameKind::Data, ul_len, mask, nav_end, ex, vec![rxr], owner, i);
        }
        if now + self.timing.sifs + ul_len > nav_end {
            self.report.txop += 1;
        }
        let e = self.radios[owner].exchange.as_mut().unwrap();
        e.stage = Stage::Data;
        e.ends_left = responders;
        if responders == 0 {
            // stations heard the trigger but another link already drained them
            e.any_ok |= heard > 0;
            self.arm_timeout(owner, ex, ul_len);
        }
    }

    fn after_ba(&mut self, l: usize, idx: usize, owner: usize, user: usize) {
        let ok = self.decode_ctrl(l, idx, owner);
        let Some(e) = self.radios[owner].exchange.as_mut() else { return };
        e.users[user].ack_ok = ok;
        e.pending -= 1;
        if e.pending == 0 {
            self.settle_round(owner);
        }
    }

    fn after_msba(&mut self, l: usize, idx: usize, owner: usize) {
        let Some(e) = self.radios[owner].exchange.as_ref() else { return };
        let stas: Vec<usize> = e.users.iter().map(|u| u.tx_radio).collect();
        for (i, s) in stas.into_iter().enumerate() {
            let has = self.radios[owner].exchange.as_ref().unwrap().users[i].bitmap.is_some();
            let ok = has && self.decode_ctrl(l, idx, s);
            self.radios[owner].exchange.as_mut().unwrap().users[i].ack_ok = ok;
        }
        self.settle_round(owner);
    }

    /// Applies block-ack outcomes of a round and continues or ends the TXOP.
    fn settle_round(&mut self, owner: usize) {
        let mut e = self.radios[owner].exchange.take().expect("exchange");
        let mut round_ok = false;
        for u in e.users.iter_mut() {
            if u.mpdus.is_empty() {
                continue;
            }
            if u.ack_ok {
                round_ok = true;
            }
            self.settle_user(u);
        }
        if !round_ok && !e.any_ok && e.kind == ExKind::UlMu {
            self.collisions += 1;
        }
        e.any_ok |= round_ok;
        let ex = e.id;
        self.radios[owner].exchange = Some(e);
        if round_ok {
            self.sched.schedule_in(self.timing.sifs, Ev::Step(owner, ex));
        } else {
            self.end_exchange(owner, false);
        }
    }

    fn settle_user(&mut self, u: &mut User) {
        let now = self.now();
        let mpdus = std::mem::take(&mut u.mpdus);
        let bitmap = if u.ack_ok { u.bitmap.take() } else { None };
        let mut failed = Vec::new();
        for (i, mut m) in mpdus.into_iter().enumerate() {
            let acked = bitmap.as_ref().is_some_and(|b| b[i]);
            if acked {
                self.ledger.acked += 1;
                self.delays.record(DelaySample { mpdu_id: m.id, enqueue_time: m.enqueue_time, completion_time: now });
            } else {
                match apply_failure(&mut m, self.cfg.mac.retry_limit) {
                    RetryOutcome::Requeue => failed.push(m),
                    RetryOutcome::Drop => self.ledger.drop_retry += 1,
                }
            }
        }
        if !failed.is_empty() {
            self.devices[u.tx_dev].queues[u.tx_peer].requeue(failed);
        }
        u.bitmap = None;
        u.ack_ok = false;
        self.wake_later.push(u.tx_dev);
    }

    /// Puts back MPDUs that never went on the air, without a retry.
    fn return_unsent(&mut self, u: &mut User) {
        if !u.mpdus.is_empty() {
            let m = std::mem::take(&mut u.mpdus);
            self.devices[u.tx_dev].queues[u.tx_peer].requeue(m);
            self.wake_later.push(u.tx_dev);
        }
    }

    fn on_timeout(&mut self, r: usize, ex: u64) {
        if !self.exchange(r, ex) {
            return;
        }
        let mut e = self.radios[r].exchange.take().unwrap();
        let unanswered_trigger = e.kind == ExKind::UlMu && e.stage == Stage::Data;
        if (e.stage == Stage::Protect || unanswered_trigger) && !e.any_ok {
            self.collisions += 1;
        }
        for u in e.users.iter_mut() {
            if e.stage == Stage::Protect {
                self.return_unsent(u);
            } else if !u.mpdus.is_empty() {
                u.ack_ok = false;
                self.settle_user(u);
            }
        }
        self.radios[r].exchange = Some(e);
        self.end_exchange(r, false);
    }

    fn end_exchange(&mut self, r: usize, success: bool) {
        let e = self.radios[r].exchange.take().expect("exchange");
        if let Some(h) = e.timeout {
            self.sched.cancel(h);
        }
        debug_assert!(e.users.iter().all(|u| u.mpdus.is_empty()));
        let radio = &mut self.radios[r];
        if success || e.any_ok {
            radio.edca.on_tx_success(&mut radio.rng);
        } else {
            radio.edca.on_tx_failure(&mut radio.rng);
        }
        let mut touched = e.engaged.clone();
        touched.push(radio.device);
        for d in e.engaged {
            if matches!(self.devices[d].engaged, Some((_, x)) if x == e.id) {
                self.devices[d].engaged = None;
            }
        }
        self.radios[r].contending = self.wants_access(r);
        self.refresh(r);
        for d in touched {
            let radios: Vec<usize> = self.devices[d].radio_on.iter().flatten().copied().collect();
            for x in radios {
                if self.radios[x].blocked && !self.nstr_busy_elsewhere(d, self.radios[x].link) {
                    self.radios[x].blocked = false;
                    self.refresh(x);
                }
            }
            self.wake_device(d);
        }
    }

    // ---- medium ----

    #[allow(clippy::too_many_arguments)]
    fn start_tx(
        &mut self,
        radio: usize,
        kind: FrameKind,
        dur: SimTime,
        mask: SubchannelMask,
        nav_end: SimTime,
        group: u64,
        to: Vec<usize>,
        owner: usize,
        user: usize,
    ) {
        let now = self.now();
        let id = self.fresh_id();
        let l = self.radios[radio].link;
        let local = self.radios[radio].local;
        self.radios[radio].tx_count += 1;
        if self.opts.trace {
            let mpdus = if kind == FrameKind::Data {
                self.radios[owner].exchange.as_ref().map_or(0, |e| e.users[user].mpdus.len())
            } else {
                0
            };
            self.trace.push(TraceEntry {
                start: now,
                end: now + dur,
                device: self.radios[radio].device,
                link: l,
                kind,
                to: to.iter().map(|&x| self.radios[x].device).collect(),
                mpdus,
            });
        }
        let payload_start = now + if kind == FrameKind::Data { self.timing.data_preamble } else { dur };
        self.links[l].txs.push(TxRec {
            id,
            radio,
            local,
            start: now,
            end: now + dur,
            mask,
            group,
            kind,
            nav_end,
            to,
            owner,
            user,
            payload_start,
        });
        self.sched.schedule_in(dur, Ev::TxEnd(l, id));
        let sensers = std::mem::take(&mut self.links[l].sensers[local]);
        for &s in &sensers {
            self.radios[s].cs_count += 1;
            self.nav_normalize(s);
            if self.radios[s].nav_ex == group {
                self.radios[s].nav_confirmed = true;
            }
            self.refresh(s);
        }
        self.links[l].sensers[local] = sensers;
        self.refresh(radio);
    }

    /// Interference in mW at `rx` from transmissions overlapping
    /// `[t0, t1)` on `mask`, other than `tx` and its exchange. `None` if the
    /// receiver itself transmitted in the window.
    fn interferers(&self, l: usize, idx: usize, rx: usize, t0: SimTime, t1: SimTime) -> Option<Vec<(SimTime, SimTime, f64)>> {
        let link = &self.links[l];
        let me = &link.txs[idx];
        let rl = self.radios[rx].local;
        let mut out = Vec::new();
        for (j, o) in link.txs.iter().enumerate() {
            if j == idx || o.end <= t0 || o.start >= t1 {
                continue;
            }
            if o.radio == rx {
                return None;
            }
            if o.group == me.group {
                continue;
            }
            let overlap = popcount(o.mask & me.mask);
            if overlap == 0 {
                continue;
            }
            let mw = link.rx_mw[o.local][rl] * overlap as f64 / popcount(o.mask) as f64;
            out.push((o.start, o.end, mw));
        }
        Some(out)
    }

    /// Transmissions overlapping `idx` in time: (radio, local index, shared and
    /// total subchannels, same exchange).
    fn overlaps(&mut self, l: usize, idx: usize) -> Vec<(usize, usize, u32, u32, bool)> {
        let mut out = std::mem::take(&mut self.overlap_buf);
        out.clear();
        let link = &self.links[l];
        let me = &link.txs[idx];
        for (j, o) in link.txs.iter().enumerate() {
            if j == idx || o.end <= me.start || o.start >= me.end {
                continue;
            }
            out.push((o.radio, o.local, popcount(o.mask & me.mask), popcount(o.mask), o.group == me.group));
        }
        out
    }

    /// Same decision as `decode_ctrl` over a precomputed overlap list.
    fn hears_ctrl(&self, l: usize, tx_local: usize, rx: usize, overlaps: &[(usize, usize, u32, u32, bool)]) -> bool {
        let link = &self.links[l];
        let rl = self.radios[rx].local;
        let signal = link.rx_mw[tx_local][rl];
        if signal < self.ctrl_thr_lin * self.ctrl_noise_mw {
            return false;
        }
        let mut interf = 0.0;
        for &(radio, local, overlap, pop, same) in overlaps {
            if radio == rx {
                return false;
            }
            if !same && overlap > 0 {
                interf += link.rx_mw[local][rl] * overlap as f64 / pop as f64;
            }
        }
        signal >= self.ctrl_thr_lin * (interf + self.ctrl_noise_mw)
    }

    fn decode_ctrl(&self, l: usize, idx: usize, rx: usize) -> bool {
        let link = &self.links[l];
        let me = &link.txs[idx];
        let rl = self.radios[rx].local;
        let signal = link.rx_mw[me.local][rl];
        // cheap reject before scanning overlaps
        if signal < self.ctrl_thr_lin * self.ctrl_noise_mw {
            return false;
        }
        let mut interf = 0.0;
        for (j, o) in link.txs.iter().enumerate() {
            if j == idx || o.end <= me.start || o.start >= me.end {
                continue;
            }
            if o.radio == rx {
                return false;
            }
            if o.group == me.group {
                continue;
            }
            let overlap = popcount(o.mask & me.mask);
            if overlap > 0 {
                interf += link.rx_mw[o.local][rl] * overlap as f64 / popcount(o.mask) as f64;
            }
        }
        signal >= self.ctrl_thr_lin * (interf + self.ctrl_noise_mw)
    }

    /// Per-MPDU decode of a data PPDU. `None` when nothing was received
    /// (no block ack is sent).
    fn decode_data(&self, l: usize, idx: usize, rx: usize, rate: &PhyRate, owner: usize, user: usize) -> Option<Vec<bool>> {
        let t = &self.links[l].txs[idx];
        let ints = self.interferers(l, idx, rx, t.start, t.end)?;
        let link = &self.links[l];
        let signal = link.rx_mw[t.local][self.radios[rx].local];
        let noise = self.noise_mw[popcount(t.mask) as usize];
        let sinr_ok = |interf: f64, thr: f64| signal >= thr * (interf + noise);
        let pre_interf: f64 = ints.iter().filter(|x| x.0 < t.payload_start).map(|x| x.2).sum();
        if !sinr_ok(pre_interf, self.ctrl_thr_lin) {
            return None;
        }
        let mpdus = &self.radios[owner].exchange.as_ref()?.users[user].mpdus;
        let payload_ints: Vec<_> = ints.into_iter().filter(|x| x.1 > t.payload_start).collect();
        let bitmap: Vec<bool> = if payload_ints.is_empty() {
            vec![sinr_ok(0.0, self.data_thr_lin); mpdus.len()]
        } else {
            let sym = rate.symbol();
            let mut cum = 0u64;
            mpdus
                .iter()
                .map(|m| {
                    let s = t.payload_start + SimTime(sym.0 * rate.symbols_for(cum));
                    cum += m.bits();
                    let e = t.payload_start + SimTime(sym.0 * rate.symbols_for(cum));
                    let interf: f64 = payload_ints.iter().filter(|x| x.0 < e && x.1 > s).map(|x| x.2).sum();
                    sinr_ok(interf, self.data_thr_lin)
                })
                .collect()
        };
        bitmap.iter().any(|&b| b).then_some(bitmap)
    }

    // ---- receive side ----

    fn deliver(&mut self, owner: usize, user: usize, bitmap: &[bool]) {
        let now = self.now();
        let e = self.radios[owner].exchange.as_ref().expect("exchange");
        let u = &e.users[user];
        let (rx_dev, rx_peer) = (u.rx_dev, u.rx_peer);
        let dir = if self.devices[rx_dev].role == MldRole::NonAp { Direction::Dl } else { Direction::Ul };
        let mut out = std::mem::take(&mut self.released);
        out.clear();
        let items: Vec<(u64, u32)> =
            u.mpdus.iter().zip(bitmap).filter(|(_, &ok)| ok).map(|(m, _)| (m.seq, m.size_bytes)).collect();
        let buf = &mut self.devices[rx_dev].reorder[rx_peer];
        for (seq, size) in items {
            match buf.receive(seq, size, &mut out) {
                ReorderOutcome::Released(_) | ReorderOutcome::Held => self.rx_ledger.first_decoded += 1,
                ReorderOutcome::Duplicate => self.rx_ledger.duplicates += 1,
            }
        }
        self.release(rx_dev, rx_peer, &out, dir, now);
        self.released = out;
        if self.devices[rx_dev].reorder[rx_peer].has_holes() && !self.devices[rx_dev].hole_timer[rx_peer] {
            self.devices[rx_dev].hole_timer[rx_peer] = true;
            let wait = SimTime::from_us_f64(self.cfg.mac.reorder_timeout_ms * 1e3);
            self.sched.schedule_in(wait, Ev::HoleTimer(rx_dev, rx_peer));
        }
    }

    fn release(&mut self, d: usize, p: usize, out: &[(u64, u32)], dir: Direction, now: SimTime) {
        for &(seq, size) in out {
            self.rx_ledger.released += 1;
            self.throughput.record_delivery(size as u64 * 8, dir, now);
            if self.opts.check {
                let last = &mut self.devices[d].last_released[p];
                if last.is_some_and(|x| x >= seq) {
                    self.report.reorder += 1;
                }
                *last = Some(seq);
            }
        }
    }

    fn on_hole_timer(&mut self, d: usize, p: usize) {
        let now = self.now();
        self.devices[d].hole_timer[p] = false;
        let mut out = std::mem::take(&mut self.released);
        out.clear();
        let skipped = self.devices[d].reorder[p].on_hole_timeout(&mut out);
        self.rx_ledger.skipped += skipped;
        let dir = if self.devices[d].role == MldRole::NonAp { Direction::Dl } else { Direction::Ul };
        self.release(d, p, &out, dir, now);
        self.released = out;
        if self.devices[d].reorder[p].has_holes() {
            self.devices[d].hole_timer[p] = true;
            let wait = SimTime::from_us_f64(self.cfg.mac.reorder_timeout_ms * 1e3);
            self.sched.schedule_in(wait, Ev::HoleTimer(d, p));
        }
    }

    // ---- accounting ----

    fn current_ledger(&self) -> Ledger {
        let mut l = self.ledger;
        l.queued = self.devices.iter().flat_map(|d| d.queues.iter()).map(|q| q.len() as u64).sum();
        l.in_flight = self
            .radios
            .iter()
            .filter_map(|r| r.exchange.as_ref())
            .flat_map(|e| e.users.iter())
            .map(|u| u.mpdus.len() as u64)
            .sum();
        l
    }

    fn check_invariants(&mut self) {
        self.report.events_checked += 1;
        if !self.current_ledger().balances() {
            self.report.ledger += 1;
        }
        let (lo, hi) = (self.cfg.mac.cw_min, self.cfg.mac.cw_max);
        for r in &self.radios {
            if r.edca.cw < lo || r.edca.cw > hi || r.edca.backoff_slots > r.edca.cw {
                self.report.cw += 1;
            }
        }
        // an MPDU id is in flight on at most one link
        if !std::mem::take(&mut self.built_ampdu) {
            return;
        }
        let mut ids: Vec<u64> = self
            .radios
            .iter()
            .filter_map(|r| r.exchange.as_ref())
            .flat_map(|e| e.users.iter())
            .flat_map(|u| u.mpdus.iter().map(|m| m.id))
            .collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            self.report.in_flight_dup += 1;
        }
    }

    fn finish(mut self) -> RunOutput {
        let ledger = self.current_ledger();
        let held: u64 = self.devices.iter().flat_map(|d| d.reorder.iter()).map(|b| b.held_len() as u64).sum();
        self.rx_ledger.held = held;
        let end = self.end;
        let metrics = RunMetrics {
            throughput_dl_bps: self.throughput.rate_bps(self.throughput.dl_bits, end),
            throughput_ul_bps: self.throughput.rate_bps(self.throughput.ul_bits, end),
            mean_delay_ms: self.delays.mean_ms(),
            p50_delay_ms: self.delays.percentile_ms(50.0),
            p95_delay_ms: self.delays.percentile_ms(95.0),
            p99_delay_ms: self.delays.percentile_ms(99.0),
            delay_samples: self.delays.count(),
            drops: DropCounts { retry: ledger.drop_retry, lifetime: ledger.drop_lifetime, overflow: ledger.drop_overflow },
            ledger,
            receive: self.rx_ledger,
            collisions: self.collisions,
            events: self.sched.fired_count(),
        };
        let nstr_devices = (0..self.devices.len()).filter(|&d| self.devices[d].is_nstr()).collect();
        RunOutput {
            metrics,
            trace: self.trace,
            report: self.report,
            nstr_devices,
            device_names: self.devices.iter().map(|d| d.name.clone()).collect(),
        }
    }
}

/// NSTR check over a trace: for each NSTR device, transmissions on one link
/// never overlap frames addressed to it on another link.
pub fn nstr_violations(trace: &[TraceEntry], nstr_devices: &[usize]) -> usize {
    let mut count = 0;
    for &d in nstr_devices {
        let tx: Vec<&TraceEntry> = trace.iter().filter(|t| t.device == d).collect();
        let rx: Vec<&TraceEntry> = trace.iter().filter(|t| t.to.contains(&d)).collect();
        for a in &tx {
            for b in &rx {
                if a.link != b.link && a.start < b.end && b.start < a.end {
                    count += 1;
                }
            }
        }
    }
    count
}
