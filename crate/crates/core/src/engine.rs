//! Deterministic discrete-event kernel.
//!
//! Events are ordered by `(fire_at, seq)` where `seq` is assigned at
//! scheduling time, so two events never compare equal and simultaneous
//! events fire in the order they were scheduled.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled at {at} which is before the current clock {now}")]
    ScheduleInPast { at: SimTime, now: SimTime },
    #[error("run_until target {target} is before the current clock {now}")]
    RunBackwards { target: SimTime, now: SimTime },
    #[error("empty range [{lo}, {hi}]")]
    EmptyRange { lo: i64, hi: i64 },
}

/// Simulation time in integer nanoseconds since the start of a run.
///
/// Also used for durations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_ns(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_us(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    /// Rounds up to the next whole nanosecond.
    pub fn from_us_f64(us: f64) -> Self {
        SimTime((us * 1_000.0).ceil() as u64)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e9).round() as u64)
    }

    pub const fn as_ns(self) -> u64 {
        self.0
    }

    pub fn as_us_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}us", self.as_us_f64())
    }
}

/// Cancellation handle returned by [`Scheduler::schedule`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn seq(self) -> u64 {
        self.0
    }
}

#[derive(Debug)]
struct Entry<E> {
    fire_at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // Reversed so the max-heap pops the earliest (fire_at, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_at
            .cmp(&self.fire_at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// A fired event together with its position in the total order.
#[derive(Debug)]
pub struct Fired<E> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub event: E,
}

/// Event queue plus virtual clock.
#[derive(Debug)]
pub struct Scheduler<E> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Entry<E>>,
    pending: FxHashSet<u64>,
    fired: u64,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            pending: FxHashSet::default(),
            fired: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Total number of events fired so far.
    pub fn fired_count(&self) -> u64 {
        self.fired
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn schedule(&mut self, fire_at: SimTime, event: E) -> Result<EventHandle, SimError> {
        if fire_at < self.now {
            return Err(SimError::ScheduleInPast { at: fire_at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { fire_at, seq, event });
        self.pending.insert(seq);
        Ok(EventHandle(seq))
    }

    /// Schedules relative to the current clock. Never fails.
    pub fn schedule_in(&mut self, delay: SimTime, event: E) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, event).expect("relative schedule cannot be in the past")
    }

    /// Returns true iff the event had not fired or been cancelled yet.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.pending.remove(&handle.0)
    }

    pub fn is_pending(&self, handle: EventHandle) -> bool {
        self.pending.contains(&handle.0)
    }

    /// Pops the next live event with `fire_at <= t_end` and advances the clock
    /// to it. Cancelled entries are discarded on the way.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<Fired<E>> {
        loop {
            let top = self.heap.peek()?;
            if top.fire_at > t_end {
                return None;
            }
            let entry = self.heap.pop().expect("peeked");
            if !self.pending.remove(&entry.seq) {
                continue;
            }
            self.now = entry.fire_at;
            self.fired += 1;
            return Some(Fired { fire_at: entry.fire_at, seq: entry.seq, event: entry.event });
        }
    }

    /// Moves the clock forward to `t` without firing anything.
    pub fn advance_to(&mut self, t: SimTime) -> Result<(), SimError> {
        if t < self.now {
            return Err(SimError::RunBackwards { target: t, now: self.now });
        }
        self.now = t;
        Ok(())
    }

    /// Fires every event with `fire_at <= t_end` in total order, then sets the
    /// clock to `t_end`. The handler may schedule further events.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> Result<u64, SimError>
    where
        F: FnMut(&mut Scheduler<E>, Fired<E>),
    {
        if t_end < self.now {
            return Err(SimError::RunBackwards { target: t_end, now: self.now });
        }
        let mut count = 0;
        while let Some(fired) = self.pop_until(t_end) {
            count += 1;
            handler(self, fired);
        }
        self.now = t_end;
        Ok(count)
    }
}

/// Deterministic random stream derived from `(master seed, stream label)`.
///
/// ChaCha8 output is specified bit-for-bit, so draws are identical across
/// runs and platforms.
#[derive(Clone, Debug)]
pub struct RngStream {
    label: String,
    rng: ChaCha8Rng,
    draws: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(master_seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        Self { label: label.to_string(), rng: ChaCha8Rng::from_seed(seed), draws: 0 }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform integer in the closed range `[lo, hi]`.
    pub fn draw_uniform_int(&mut self, lo: i64, hi: i64) -> Result<i64, SimError> {
        if lo > hi {
            return Err(SimError::EmptyRange { lo, hi });
        }
        self.draws += 1;
        Ok(self.rng.random_range(lo..=hi))
    }

    /// Uniform in `[0, 1)`.
    pub fn draw_unit(&mut self) -> f64 {
        self.draws += 1;
        self.rng.random::<f64>()
    }

    pub fn draw_range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.draw_unit()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        self.draws += 1;
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_at_now_fires_first() {
        let mut s: Scheduler<&str> = Scheduler::new();
        s.schedule(SimTime::from_us(3), "late").unwrap();
        s.schedule(SimTime::ZERO, "now").unwrap();
        let first = s.pop_until(SimTime::MAX).unwrap();
        assert_eq!(first.event, "now");
    }

    #[test]
    fn same_time_fires_in_scheduling_order() {
        let mut s: Scheduler<u32> = Scheduler::new();
        for i in 0..5 {
            s.schedule(SimTime::from_us(7), i).unwrap();
        }
        let mut got = vec![];
        s.run_until(SimTime::from_us(7), |_, f| got.push(f.event)).unwrap();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn scheduling_in_the_past_is_an_error() {
        let mut s: Scheduler<()> = Scheduler::new();
        s.advance_to(SimTime::from_us(10)).unwrap();
        let err = s.schedule(SimTime::from_us(5), ()).unwrap_err();
        assert_eq!(err, SimError::ScheduleInPast { at: SimTime::from_us(5), now: SimTime::from_us(10) });
    }

    #[test]
    fn cancel_semantics() {
        let mut s: Scheduler<u8> = Scheduler::new();
        let pending = s.schedule(SimTime::from_us(5), 1).unwrap();
        let fired = s.schedule(SimTime::from_us(1), 2).unwrap();
        s.run_until(SimTime::from_us(2), |_, _| {}).unwrap();
        assert!(!s.cancel(fired), "already fired");
        assert!(s.cancel(pending));
        assert!(!s.cancel(pending), "second cancel");
        let n = s.run_until(SimTime::from_us(100), |_, _| panic!("cancelled event fired")).unwrap();
        assert_eq!(n, 0);
    }

    #[test]
    fn run_until_empty_queue_moves_clock() {
        let mut s: Scheduler<()> = Scheduler::new();
        let n = s.run_until(SimTime::from_ms(1000), |_, _| {}).unwrap();
        assert_eq!(n, 0);
        assert_eq!(s.now(), SimTime::from_ms(1000));
    }

    #[test]
    fn run_until_fires_inclusive_in_total_order() {
        let mut s: Scheduler<&str> = Scheduler::new();
        s.schedule(SimTime::from_us(2), "b").unwrap();
        s.schedule(SimTime::from_us(1), "a").unwrap();
        s.schedule(SimTime::from_us(2), "c").unwrap();
        s.schedule(SimTime::from_us(3), "d").unwrap();
        let mut got = vec![];
        let n = s.run_until(SimTime::from_us(2), |_, f| got.push((f.fire_at, f.event))).unwrap();
        assert_eq!(n, 3);
        assert_eq!(
            got,
            vec![(SimTime::from_us(1), "a"), (SimTime::from_us(2), "b"), (SimTime::from_us(2), "c")]
        );
        assert_eq!(s.now(), SimTime::from_us(2));
    }

    #[test]
    fn handler_can_schedule_more_work() {
        let mut s: Scheduler<u32> = Scheduler::new();
        s.schedule(SimTime::ZERO, 0).unwrap();
        let mut seen = vec![];
        s.run_until(SimTime::from_us(10), |sch, f| {
            seen.push(f.event);
            if f.event < 3 {
                sch.schedule_in(SimTime::from_us(1), f.event + 1);
            }
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn uniform_degenerate_range() {
        let mut r = RngStream::new(1, "x");
        assert_eq!(r.draw_uniform_int(0, 0).unwrap(), 0);
        assert!(r.draw_uniform_int(3, 2).is_err());
    }

    #[test]
    fn stream_replay_is_identical() {
        let mut a = RngStream::new(42, "backoff/ap0/link0");
        let mut b = RngStream::new(42, "backoff/ap0/link0");
        let xs: Vec<i64> = (0..100).map(|_| a.draw_uniform_int(0, 15).unwrap()).collect();
        let ys: Vec<i64> = (0..100).map(|_| b.draw_uniform_int(0, 15).unwrap()).collect();
        assert_eq!(xs, ys);
        let mut c = RngStream::new(42, "backoff/ap0/link1");
        let zs: Vec<i64> = (0..100).map(|_| c.draw_uniform_int(0, 15).unwrap()).collect();
        assert_ne!(xs, zs);
    }

    #[test]
    fn uniform_zero_to_seven_is_flat() {
        // Chi-square goodness of fit, 7 degrees of freedom. The 0.999 quantile
        // is 24.32, and every bin must also sit within 1% of 1/8.
        let mut r = RngStream::new(7, "chi2");
        let n = 1_000_000u64;
        let mut bins = [0u64; 8];
        for _ in 0..n {
            bins[r.draw_uniform_int(0, 7).unwrap() as usize] += 1;
        }
        let expected = n as f64 / 8.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 24.32, "chi2 = {chi2}");
        for &o in &bins {
            let p = o as f64 / n as f64;
            assert!((p - 0.125).abs() < 0.01 * 0.125, "bin frequency {p}");
        }
    }
}
