//! Multi-link device model: one MLD address over several affiliated links,
//! STR/NSTR transmit constraints and receive-side reordering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MloError {
    #[error("NSTR mode is only allowed on non-AP MLDs")]
    NstrOnAp,
    #[error("an MLD needs at least one link")]
    NoLinks,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MldAddress(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MldRole {
    Ap,
    NonAp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MldMode {
    #[default]
    Str,
    Nstr,
}

/// Static description of a multi-link device. Link entries index into the
/// owning network's radio table.
#[derive(Clone, Debug, PartialEq)]
pub struct Mld {
    pub address: MldAddress,
    pub role: MldRole,
    pub mode: MldMode,
    pub links: Vec<usize>,
}

impl Mld {
    pub fn new(address: MldAddress, role: MldRole, mode: MldMode, links: Vec<usize>) -> Result<Self, MloError> {
        if links.is_empty() {
            return Err(MloError::NoLinks);
        }
        if role == MldRole::Ap && mode == MldMode::Nstr {
            return Err(MloError::NstrOnAp);
        }
        Ok(Self { address, role, mode, links })
    }
}

/// Picks the link that pulls from the shared queue: whichever won channel
/// access first. `ready` is in the order access was won.
pub fn select_link(ready: &[usize]) -> Option<usize> {
    ready.first().copied()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Allow,
    Defer,
}

/// NSTR devices may not start transmitting on one link while another of
/// their links is receiving.
pub fn nstr_gate(mode: MldMode, other_link_receiving: bool) -> Gate {
    match mode {
        MldMode::Nstr if other_link_receiving => Gate::Defer,
        _ => Gate::Allow,
    }
}

/// Offered loads for the paired 11ax / 11be latency comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrafficSplit {
    /// Each of the two independent 11ax APs.
    pub ax_ap_bps: f64,
    /// Each 11ax station.
    pub ax_sta_bps: f64,
    pub be_ap_mld_bps: f64,
    pub be_sta_mld_bps: f64,
}

impl TrafficSplit {
    pub fn ax_aggregate(&self, stas_per_ap: usize) -> f64 {
        2.0 * self.ax_ap_bps + 2.0 * stas_per_ap as f64 * self.ax_sta_bps
    }

    pub fn be_aggregate(&self, sta_mlds: usize) -> f64 {
        self.be_ap_mld_bps + sta_mlds as f64 * self.be_sta_mld_bps
    }
}

pub fn split_baseline_traffic(v1_bps: f64, v2_bps: f64) -> TrafficSplit {
    TrafficSplit {
        ax_ap_bps: v1_bps,
        ax_sta_bps: v2_bps,
        be_ap_mld_bps: 2.0 * v1_bps,
        be_sta_mld_bps: 2.0 * v2_bps,
    }
}

/// What happened to one MPDU offered to a [`ReorderBuffer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReorderOutcome {
    /// Released along with `n - 1` held successors.
    Released(usize),
    Held,
    Duplicate,
}

/// Per-flow receive reordering. Releases strictly in sequence order; a hole
/// is skipped only by [`ReorderBuffer::on_hole_timeout`].
#[derive(Clone, Debug)]
pub struct ReorderBuffer<T> {
    next: u64,
    held: BTreeMap<u64, T>,
    skipped: u64,
    duplicates: u64,
}

impl<T> ReorderBuffer<T> {
    pub fn new(first_seq: u64) -> Self {
        Self { next: first_seq, held: BTreeMap::new(), skipped: 0, duplicates: 0 }
    }

    pub fn next_expected(&self) -> u64 {
        self.next
    }

    pub fn held_len(&self) -> usize {
        self.held.len()
    }

    pub fn has_holes(&self) -> bool {
        !self.held.is_empty()
    }

    /// Sequences given up on by the hole timer.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn held(&self) -> impl Iterator<Item = (&u64, &T)> {
        self.held.iter()
    }

    /// Offers one decoded MPDU; released items are appended to `out` in
    /// sequence order.
    pub fn receive(&mut self, seq: u64, item: T, out: &mut Vec<(u64, T)>) -> ReorderOutcome {
        if seq < self.next || self.held.contains_key(&seq) {
            self.duplicates += 1;
            return ReorderOutcome::Duplicate;
        }
        if seq > self.next {
            self.held.insert(seq, item);
            return ReorderOutcome::Held;
        }
        out.push((seq, item));
        self.next += 1;
        let released = 1 + self.drain_in_order(out);
        ReorderOutcome::Released(released)
    }

    /// Hole timer expired: skip to the lowest held sequence, counting the
    /// gap as lost, then release the in-order run. Returns the number skipped.
    pub fn on_hole_timeout(&mut self, out: &mut Vec<(u64, T)>) -> u64 {
        let Some((&first, _)) = self.held.iter().next() else {
            return 0;
        };
        let gap = first - self.next;
        self.skipped += gap;
        self.next = first;
        self.drain_in_order(out);
        gap
    }

    fn drain_in_order(&mut self, out: &mut Vec<(u64, T)>) -> usize {
        let mut n = 0;
        while let Some(item) = self.held.remove(&self.next) {
            out.push((self.next, item));
            self.next += 1;
            n += 1;
        }
        n
    }
}

pub fn reorder_deliver<T>(buffer: &mut ReorderBuffer<T>, seq: u64, item: T) -> Vec<(u64, T)> {
    let mut out = Vec::new();
    buffer.receive(seq, item, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(v: &[(u64, ())]) -> Vec<u64> {
        v.iter().map(|(s, _)| *s).collect()
    }

    #[test]
    fn in_order_arrivals_release_immediately() {
        let mut b = ReorderBuffer::new(1);
        let mut all = vec![];
        for s in 1..=3 {
            all.extend(reorder_deliver(&mut b, s, ()));
        }
        assert_eq!(seqs(&all), vec![1, 2, 3]);
    }

    #[test]
    fn hole_is_held_until_filled() {
        let mut b = ReorderBuffer::new(1);
        assert_eq!(seqs(&reorder_deliver(&mut b, 1, ())), vec![1]);
        assert!(reorder_deliver(&mut b, 3, ()).is_empty());
        assert!(b.has_holes());
        assert_eq!(seqs(&reorder_deliver(&mut b, 2, ())), vec![2, 3]);
        assert!(!b.has_holes());
    }

    #[test]
    fn hole_timer_skips_and_counts() {
        let mut b = ReorderBuffer::new(1);
        reorder_deliver(&mut b, 1, ());
        reorder_deliver(&mut b, 3, ());
        let mut out = vec![];
        assert_eq!(b.on_hole_timeout(&mut out), 1);
        assert_eq!(seqs(&out), vec![3]);
        assert_eq!(b.skipped(), 1);
        // late arrival of the skipped sequence is a duplicate now
        assert!(reorder_deliver(&mut b, 2, ()).is_empty());
        assert_eq!(b.duplicates(), 1);
    }

    #[test]
    fn duplicates_are_discarded() {
        let mut b = ReorderBuffer::new(0);
        reorder_deliver(&mut b, 0, ());
        reorder_deliver(&mut b, 2, ());
        let mut out = vec![];
        assert_eq!(b.receive(0, (), &mut out), ReorderOutcome::Duplicate);
        assert_eq!(b.receive(2, (), &mut out), ReorderOutcome::Duplicate);
        assert!(out.is_empty());
    }

    #[test]
    fn nstr_gate_rules() {
        assert_eq!(nstr_gate(MldMode::Nstr, true), Gate::Defer);
        assert_eq!(nstr_gate(MldMode::Str, true), Gate::Allow);
        assert_eq!(nstr_gate(MldMode::Nstr, false), Gate::Allow);
    }

    #[test]
    fn nstr_rejected_on_ap() {
        assert_eq!(Mld::new(MldAddress(1), MldRole::Ap, MldMode::Nstr, vec![0, 1]), Err(MloError::NstrOnAp));
        assert!(Mld::new(MldAddress(2), MldRole::NonAp, MldMode::Nstr, vec![0, 1]).is_ok());
        assert_eq!(Mld::new(MldAddress(3), MldRole::NonAp, MldMode::Str, vec![]), Err(MloError::NoLinks));
    }

    #[test]
    fn first_winner_pulls() {
        assert_eq!(select_link(&[1, 0]), Some(1));
        assert_eq!(select_link(&[]), None);
    }

    #[test]
    fn paired_traffic_split() {
        let s = split_baseline_traffic(100e6, 0.0);
        assert_eq!(s.be_ap_mld_bps, 200e6);
        assert_eq!(s.ax_aggregate(4), s.be_aggregate(4));
        let s = split_baseline_traffic(50e6, 20e6);
        assert_eq!(s.ax_aggregate(4), s.be_aggregate(4));
    }
}
