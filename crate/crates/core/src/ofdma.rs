//! Round-robin RU scheduling for DL MU PPDUs and trigger-based UL.

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::phy::{ppdu_duration, PhyRate, RuAllocation, RuSize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Dl,
    Ul,
}

/// Bitmask over the 20 MHz subchannels of a channel (bit 0 = lowest).
pub type SubchannelMask = u16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuGrant {
    /// Station identifier in the caller's namespace.
    pub sta: usize,
    pub alloc: RuAllocation,
    pub mask: SubchannelMask,
    pub direction: Direction,
}

/// Fixed per-station RU size for a channel width: 242 tones at 80 MHz and
/// 484 tones at 160 MHz, continuing the four-RUs-per-channel pattern.
pub fn ru_size_for_width(width_mhz: u32) -> RuSize {
    match width_mhz {
        20 | 40 | 80 => RuSize::Ru242,
        160 => RuSize::Ru484,
        _ => RuSize::Ru996,
    }
}

pub fn full_mask(width_mhz: u32) -> SubchannelMask {
    let n = width_mhz / 20;
    if n >= 16 {
        u16::MAX
    } else {
        (1u16 << n) - 1
    }
}

/// Rotating-pointer scheduler. `pointer` indexes the associated-station list
/// and persists across exchanges.
#[derive(Clone, Debug, Default)]
pub struct RoundRobin {
    pointer: usize,
}

impl RoundRobin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pointer(&self) -> usize {
        self.pointer
    }

    /// `associated` is the ordered list of station ids; `backlogged(sta)`
    /// says whether a station currently has data. Grants are frequency
    /// disjoint and fit in `width_mhz`.
    pub fn schedule<F>(
        &mut self,
        associated: &[usize],
        mut backlogged: F,
        width_mhz: u32,
        ru: RuSize,
        direction: Direction,
    ) -> Vec<RuGrant>
    where
        F: FnMut(usize) -> bool,
    {
        let n = associated.len();
        if n == 0 {
            return Vec::new();
        }
        let per_ru = ru.subchannels();
        let slots = ((width_mhz / 20) / per_ru).max(1) as usize;
        let mut grants = Vec::with_capacity(slots);
        let start = self.pointer % n;
        let mut last = None;
        for k in 0..n {
            if grants.len() == slots {
                break;
            }
            let idx = (start + k) % n;
            let sta = associated[idx];
            if !backlogged(sta) {
                continue;
            }
            let pos = grants.len() as u32;
            let mask = (((1u32 << per_ru) - 1) << (pos * per_ru)) as SubchannelMask;
            grants.push(RuGrant { sta, alloc: RuAllocation::single(ru), mask, direction });
            last = Some(idx);
        }
        if let Some(idx) = last {
            self.pointer = (idx + 1) % n;
        }
        grants
    }
}

/// Padded MU PPDU length: every grant ends at the longest grant's last symbol.
pub fn mu_ppdu_duration(per_grant: &[(u64, PhyRate)], preamble: SimTime) -> SimTime {
    per_grant
        .iter()
        .map(|(bits, rate)| ppdu_duration(*bits, rate, preamble))
        .max()
        .unwrap_or(preamble)
}

pub fn grants_disjoint(grants: &[RuGrant]) -> bool {
    let mut seen: SubchannelMask = 0;
    for g in grants {
        if seen & g.mask != 0 {
            return false;
        }
        seen |= g.mask;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phy::{phy_rate, GuardInterval, McsTable};

    fn stas(n: usize) -> Vec<usize> {
        (1..=n).collect()
    }

    #[test]
    fn four_stations_at_80mhz() {
        let mut rr = RoundRobin::new();
        let g = rr.schedule(&stas(4), |_| true, 80, ru_size_for_width(80), Direction::Dl);
        assert_eq!(g.len(), 4);
        assert!(g.iter().all(|x| x.alloc.rus == vec![RuSize::Ru242]));
        assert!(grants_disjoint(&g));
        assert!(g.iter().all(|x| x.mask & !full_mask(80) == 0));
    }

    #[test]
    fn underload_leaves_rus_idle() {
        let mut rr = RoundRobin::new();
        let g = rr.schedule(&stas(1), |_| true, 160, ru_size_for_width(160), Direction::Dl);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].alloc.rus, vec![RuSize::Ru484]);
    }

    #[test]
    fn pointer_rotates_across_rounds() {
        let mut rr = RoundRobin::new();
        let a = rr.schedule(&stas(6), |_| true, 80, RuSize::Ru242, Direction::Dl);
        assert_eq!(a.iter().map(|g| g.sta).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        let b = rr.schedule(&stas(6), |_| true, 80, RuSize::Ru242, Direction::Dl);
        assert_eq!(b.iter().map(|g| g.sta).collect::<Vec<_>>(), vec![5, 6, 1, 2]);
    }

    #[test]
    fn idle_stations_are_skipped() {
        let mut rr = RoundRobin::new();
        let g = rr.schedule(&stas(4), |s| s != 2, 80, RuSize::Ru242, Direction::Ul);
        assert_eq!(g.iter().map(|g| g.sta).collect::<Vec<_>>(), vec![1, 3, 4]);
    }

    #[test]
    fn mu_ppdu_is_padded_to_longest_grant() {
        let m = McsTable::default().get(11).unwrap();
        let r = phy_rate(&m, &RuAllocation::single(RuSize::Ru242), 2, GuardInterval::Ns800);
        let pre = SimTime::from_us(48);
        let d = mu_ppdu_duration(&[(12_000, r), (120_000, r), (0, r)], pre);
        assert_eq!(d, ppdu_duration(120_000, &r, pre));
        // 234·10·(5/6)·2 / 13.6 µs
        assert!((r.bits_per_second() / 1e6 - 286.76).abs() < 0.01);
    }
}
