//! EDCA channel access, A-MPDU aggregation and block-ack bookkeeping.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::engine::{RngStream, SimTime};
use crate::phy::{control_frame_duration, ppdu_duration, PhyRate};

/// One MAC data unit. `seq` is per (source, destination) flow and orders
/// delivery at the receiver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mpdu {
    pub id: u64,
    pub seq: u64,
    pub size_bytes: u32,
    pub enqueue_time: SimTime,
    pub retries: u8,
}

impl Mpdu {
    pub fn bits(&self) -> u64 {
        self.size_bytes as u64 * 8
    }

    pub fn deadline(&self, lifetime: Option<SimTime>) -> SimTime {
        match lifetime {
            Some(l) => self.enqueue_time + l,
            None => SimTime::MAX,
        }
    }

    pub fn is_expired(&self, now: SimTime, lifetime: Option<SimTime>) -> bool {
        self.deadline(lifetime) < now
    }
}

/// MPDUs sharing one PHY header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ampdu {
    pub mpdus: Vec<Mpdu>,
    pub airtime: SimTime,
}

impl Ampdu {
    pub fn len(&self) -> usize {
        self.mpdus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mpdus.is_empty()
    }

    pub fn payload_bits(&self) -> u64 {
        self.mpdus.iter().map(Mpdu::bits).sum()
    }
}

/// Inter-frame spacing, contention and control-frame constants for one link.
#[derive(Clone, Debug, PartialEq)]
pub struct MacTiming {
    pub slot: SimTime,
    pub sifs: SimTime,
    pub aifs: SimTime,
    pub data_preamble: SimTime,
    pub control_preamble: SimTime,
    pub control_rate: PhyRate,
    pub rts_bytes: u32,
    pub cts_bytes: u32,
    pub trigger_base_bytes: u32,
    pub trigger_per_user_bytes: u32,
}

impl Default for MacTiming {
    fn default() -> Self {
        Self {
            slot: SimTime::from_us(9),
            sifs: SimTime::from_us(16),
            aifs: SimTime::from_us(34),
            data_preamble: SimTime::from_us(48),
            control_preamble: SimTime::from_us(20),
            control_rate: PhyRate::legacy_mbps(24),
            rts_bytes: 20,
            cts_bytes: 14,
            trigger_base_bytes: 28,
            trigger_per_user_bytes: 6,
        }
    }
}

impl MacTiming {
    pub fn control(&self, bytes: u32) -> SimTime {
        control_frame_duration(bytes, &self.control_rate, self.control_preamble)
    }

    pub fn rts(&self) -> SimTime {
        self.control(self.rts_bytes)
    }

    pub fn cts(&self) -> SimTime {
        self.control(self.cts_bytes)
    }

    /// Trigger frame (also used for MU-RTS) addressed to `users` stations.
    pub fn trigger(&self, users: usize) -> SimTime {
        self.control(self.trigger_base_bytes + self.trigger_per_user_bytes * users as u32)
    }

    /// Compressed block ack whose bitmap covers `window` MPDUs.
    pub fn block_ack(&self, window: usize) -> SimTime {
        self.control(block_ack_bytes(window))
    }

    /// Multi-STA block ack carrying one bitmap per user.
    pub fn multi_sta_block_ack(&self, users: usize, window: usize) -> SimTime {
        let per_user = 4 + 2 + bitmap_bytes(window);
        self.control(22 + per_user * users as u32)
    }

    /// `SIFS + slot + expected response`.
    pub fn response_timeout(&self, response: SimTime) -> SimTime {
        self.sifs + self.slot + response
    }
}

/// Bitmap sizes defined for compressed block acks.
pub fn bitmap_bytes(window: usize) -> u32 {
    match window {
        0..=64 => 8,
        65..=256 => 32,
        257..=512 => 64,
        _ => 128,
    }
}

pub fn block_ack_bytes(window: usize) -> u32 {
    24 + bitmap_bytes(window)
}

/// Contention phase of one EDCA function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdcaPhase {
    Idle,
    Deferring,
    Backoff,
    Tx,
    WaitingResponse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdcaParams {
    pub aifs: SimTime,
    pub slot: SimTime,
    pub cw_min: u32,
    pub cw_max: u32,
}

impl Default for EdcaParams {
    fn default() -> Self {
        Self { aifs: SimTime::from_us(34), slot: SimTime::from_us(9), cw_min: 7, cw_max: 15 }
    }
}

/// Single-category EDCA state with a frozen-counter backoff.
#[derive(Clone, Debug)]
pub struct EdcaState {
    pub params: EdcaParams,
    pub cw: u32,
    pub backoff_slots: u32,
    pub phase: EdcaPhase,
    countdown_from: Option<SimTime>,
}

impl EdcaState {
    pub fn new(params: EdcaParams, rng: &mut RngStream) -> Self {
        let mut s = Self {
            params,
            cw: params.cw_min,
            backoff_slots: 0,
            phase: EdcaPhase::Idle,
            countdown_from: None,
        };
        s.draw_backoff(rng);
        s
    }

    pub fn draw_backoff(&mut self, rng: &mut RngStream) {
        self.backoff_slots =
            rng.draw_uniform_int(0, self.cw as i64).expect("cw is non-negative") as u32;
    }

    pub fn is_counting(&self) -> bool {
        self.countdown_from.is_some()
    }

    /// Medium became idle at `now`: returns when the backoff will reach zero
    /// if the medium stays idle (AIFS, then one decrement per slot).
    pub fn on_medium_idle(&mut self, now: SimTime) -> SimTime {
        self.countdown_from = Some(now);
        self.phase = EdcaPhase::Deferring;
        self.access_time().expect("countdown just started")
    }

    pub fn access_time(&self) -> Option<SimTime> {
        self.countdown_from
            .map(|t| t + self.params.aifs + SimTime(self.params.slot.0 * self.backoff_slots as u64))
    }

    /// Medium became busy at `now`: freezes the counter after crediting the
    /// whole idle slots that elapsed past AIFS.
    pub fn on_medium_busy(&mut self, now: SimTime) {
        if let Some(start) = self.countdown_from.take() {
            let idle = now.saturating_sub(start);
            if idle > self.params.aifs {
                let elapsed = (idle - self.params.aifs).0 / self.params.slot.0;
                self.backoff_slots -= (elapsed as u32).min(self.backoff_slots);
            }
            self.phase = if self.backoff_slots > 0 && idle > self.params.aifs {
                EdcaPhase::Backoff
            } else {
                EdcaPhase::Deferring
            };
        }
    }

    /// Countdown completed; the function owns the medium.
    pub fn on_access(&mut self) {
        self.countdown_from = None;
        self.backoff_slots = 0;
        self.phase = EdcaPhase::Tx;
    }

    /// Binary exponential backoff capped at `cw_max`, then a fresh draw.
    pub fn on_tx_failure(&mut self, rng: &mut RngStream) {
        self.cw = ((self.cw + 1) * 2 - 1).min(self.params.cw_max);
        self.draw_backoff(rng);
        self.phase = EdcaPhase::Idle;
    }

    pub fn on_tx_success(&mut self, rng: &mut RngStream) {
        self.cw = self.params.cw_min;
        self.draw_backoff(rng);
        self.phase = EdcaPhase::Idle;
    }

    /// Aborts a running countdown without crediting slots.
    pub fn stop(&mut self) {
        self.countdown_from = None;
    }
}

/// Per-MPDU outcome of one A-MPDU at the receiver.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockAckRecord {
    pub starting_seq: u64,
    pub bitmap: Vec<bool>,
}

impl BlockAckRecord {
    pub fn all(len: usize, starting_seq: u64, ok: bool) -> Self {
        Self { starting_seq, bitmap: vec![ok; len] }
    }

    pub fn acked(&self) -> usize {
        self.bitmap.iter().filter(|&&b| b).count()
    }

    pub fn gaps(&self) -> usize {
        self.bitmap.len() - self.acked()
    }
}

/// Outcome of one failed MPDU after the retry rule is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetryOutcome {
    Requeue,
    Drop,
}

/// A dropped MPDU had already reached `retry_limit` retries.
pub fn apply_failure(mpdu: &mut Mpdu, retry_limit: u8) -> RetryOutcome {
    if mpdu.retries >= retry_limit {
        RetryOutcome::Drop
    } else {
        mpdu.retries += 1;
        RetryOutcome::Requeue
    }
}

/// FIFO of MPDUs for one (destination, tid), kept sorted by sequence number
/// so requeued MPDUs go ahead of fresh traffic.
#[derive(Clone, Debug, Default)]
pub struct TxQueue {
    q: VecDeque<Mpdu>,
}

impl TxQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn push_back(&mut self, m: Mpdu) {
        self.q.push_back(m);
    }

    pub fn front(&self) -> Option<&Mpdu> {
        self.q.front()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mpdu> {
        self.q.iter()
    }

    /// Returns failed MPDUs to the queue, preserving sequence order.
    pub fn requeue(&mut self, mut mpdus: Vec<Mpdu>) {
        if mpdus.is_empty() {
            return;
        }
        mpdus.sort_unstable_by_key(|m| m.seq);
        let fits_in_front = self.q.front().is_none_or(|f| mpdus.last().unwrap().seq < f.seq);
        if fits_in_front {
            for m in mpdus.into_iter().rev() {
                self.q.push_front(m);
            }
        } else {
            self.q.extend(mpdus);
            self.q.make_contiguous().sort_unstable_by_key(|m| m.seq);
        }
    }

    /// Removes MPDUs past their deadline from the head. Returns how many.
    pub fn expire_lifetimes(&mut self, now: SimTime, lifetime: Option<SimTime>) -> usize {
        if lifetime.is_none() {
            return 0;
        }
        // sequence order implies enqueue order, so expired MPDUs form a prefix
        let mut n = 0;
        while self.q.front().is_some_and(|m| m.is_expired(now, lifetime)) {
            self.q.pop_front();
            n += 1;
        }
        n
    }

    pub fn pop_front_n(&mut self, n: usize) -> Vec<Mpdu> {
        self.q.drain(..n.min(self.q.len())).collect()
    }
}

/// Largest number of queued MPDUs (a prefix) whose PPDU fits `payload_budget`
/// symbols-wise, capped by `max_aggregation`.
pub fn aggregation_limit(
    queue: &TxQueue,
    rate: &PhyRate,
    payload_budget: SimTime,
    max_aggregation: usize,
) -> usize {
    let symbols = payload_budget.0 / rate.symbol().0;
    let capacity_bits = rate.bits_in(symbols);
    let mut bits = 0u64;
    let mut n = 0usize;
    for m in queue.iter() {
        if n == max_aggregation || bits + m.bits() > capacity_bits {
            break;
        }
        bits += m.bits();
        n += 1;
    }
    n
}

/// Closed form of [`aggregation_limit`] for equal-size MPDUs.
pub fn uniform_aggregation_limit(
    mpdu_bits: u64,
    rate: &PhyRate,
    payload_budget: SimTime,
    max_aggregation: usize,
) -> usize {
    let symbols = payload_budget.0 / rate.symbol().0;
    ((rate.bits_in(symbols) / mpdu_bits) as usize).min(max_aggregation)
}

/// Builds the longest eligible prefix such that `PPDU + SIFS + block ack`
/// fits in `txop_remaining`. Expired MPDUs are dropped from the queue first;
/// the count is returned alongside. Returns an empty A-MPDU when nothing fits.
#[allow(clippy::too_many_arguments)]
pub fn build_ampdu(
    queue: &mut TxQueue,
    now: SimTime,
    lifetime: Option<SimTime>,
    rate: &PhyRate,
    txop_remaining: SimTime,
    max_aggregation: usize,
    timing: &MacTiming,
) -> (Ampdu, usize) {
    let overhead = timing.data_preamble + timing.sifs + timing.block_ack(max_aggregation);
    if txop_remaining <= overhead {
        let expired = queue.expire_lifetimes(now, lifetime);
        return (Ampdu::default(), expired);
    }
    fill_ampdu(queue, now, lifetime, rate, txop_remaining - overhead, max_aggregation, timing.data_preamble)
}

/// Pulls the longest eligible prefix whose payload fits `payload_budget`;
/// the PPDU airtime adds `preamble`. Expired MPDUs are dropped first.
pub fn fill_ampdu(
    queue: &mut TxQueue,
    now: SimTime,
    lifetime: Option<SimTime>,
    rate: &PhyRate,
    payload_budget: SimTime,
    max_aggregation: usize,
    preamble: SimTime,
) -> (Ampdu, usize) {
    let expired = queue.expire_lifetimes(now, lifetime);
    let n = aggregation_limit(queue, rate, payload_budget, max_aggregation);
    let mpdus = queue.pop_front_n(n);
    let bits: u64 = mpdus.iter().map(Mpdu::bits).sum();
    let airtime = if mpdus.is_empty() { SimTime::ZERO } else { ppdu_duration(bits, rate, preamble) };
    (Ampdu { mpdus, airtime }, expired)
}
