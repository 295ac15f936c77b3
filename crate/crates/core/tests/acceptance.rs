//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Campaign criteria run at full scale (10 seeds, default durations). Set
//! `EHTSIM_ACCEPTANCE_SEEDS` to a smaller number for a quick look; lines then
//! carry a `reduced` note. Lines go straight to stderr so they show up without
//! `--nocapture`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ehtsim::engine::{RngStream, SimTime};
use ehtsim::harness::{run_to_dir, CaseMatrix, Summary, TARGET_GBPS};
use ehtsim::mac::{build_ampdu, EdcaParams, EdcaState, MacTiming, Mpdu, TxQueue};
use ehtsim::mlo::{MldMode, ReorderBuffer};
use ehtsim::network::{nstr_violations, run_scenario, RunOptions};
use ehtsim::ofdma::Direction;
use ehtsim::phy::{phy_rate, GuardInterval, McsTable, PhyRate, RuAllocation, RuSize};
use ehtsim::scenario::{AccessMode, ScenarioConfig, Standard};
use serde_json::json;

const GAIN_TARGETS: [(Direction, AccessMode, f64); 4] = [
    (Direction::Dl, AccessMode::Su, 262.77),
    (Direction::Ul, AccessMode::Su, 270.36),
    (Direction::Dl, AccessMode::Ofdma, 373.70),
    (Direction::Ul, AccessMode::Ofdma, 401.76),
];
const GAIN_REL_TOL: f64 = 0.15;
const DELAY_TARGETS: [(Direction, AccessMode, f64); 4] = [
    (Direction::Dl, AccessMode::Su, 32.0),
    (Direction::Ul, AccessMode::Su, 36.0),
    (Direction::Dl, AccessMode::Ofdma, 30.0),
    (Direction::Ul, AccessMode::Ofdma, 28.0),
];
const DELAY_TOL_PP: f64 = 10.0;
const DIRS: [Direction; 2] = [Direction::Dl, Direction::Ul];
const MODES: [AccessMode; 2] = [AccessMode::Su, AccessMode::Ofdma];

fn line(n: u32, pass: bool, text: &str) {
    let mut err = std::io::stderr().lock();
    writeln!(err, "criterion {n} {}: {text}", if pass { "PASS" } else { "FAIL" }).unwrap();
}

fn note(text: &str) {
    let mut err = std::io::stderr().lock();
    writeln!(err, "    {text}").unwrap();
}

fn seeds() -> (Vec<u64>, bool) {
    let n = std::env::var("EHTSIM_ACCEPTANCE_SEEDS").ok().and_then(|v| v.parse::<u64>().ok()).unwrap_or(10).max(1);
    ((0..n).collect(), n < 10)
}

fn parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn label(dir: Direction, mode: AccessMode) -> &'static str {
    match (dir, mode) {
        (Direction::Dl, AccessMode::Su) => "DL SU",
        (Direction::Ul, AccessMode::Su) => "UL SU",
        (Direction::Dl, AccessMode::Ofdma) => "DL MU",
        (Direction::Ul, AccessMode::Ofdma) => "UL MU",
    }
}

fn tput(s: &Summary, case: &str, dir: Direction, mode: AccessMode) -> f64 {
    s.group(case, dir, mode, None).and_then(|g| g.mean).unwrap_or(f64::NAN)
}

fn criteria_1_2(out: &Path) {
    let (seeds, reduced) = seeds();
    let m = CaseMatrix::throughput_default();
    let t = Instant::now();
    let (s, records) = run_to_dir(&m, &seeds, None, parallelism(), out).expect("throughput campaign");
    let secs = t.elapsed().as_secs_f64();
    let failed = records.iter().filter(|r| !r.ok).count();
    assert_eq!(failed, 0, "throughput runs failed");

    let mut ok = true;
    let mut parts = Vec::new();
    for case in ["2-2", "3"] {
        for dir in DIRS {
            for mode in MODES {
                let v = tput(&s, case, dir, mode);
                ok &= v >= TARGET_GBPS;
                parts.push(format!("{case} {} {v:.2}", label(dir, mode)));
            }
        }
    }
    let v = tput(&s, "1-3", Direction::Ul, AccessMode::Ofdma);
    ok &= v >= TARGET_GBPS;
    parts.push(format!("1-3 UL MU {v:.2}"));
    for dir in DIRS {
        for mode in MODES {
            let v = tput(&s, "ax", dir, mode);
            ok &= v < 10.0;
            parts.push(format!("ax {} {v:.2}", label(dir, mode)));
        }
    }
    let fast = secs <= 600.0;
    let scale = if reduced { " (reduced seeds)" } else { "" };
    line(
        1,
        ok && fast && !reduced,
        &format!(
            "30 Gbps reproduction: targets {}; runtime {secs:.0} s for {} runs, {} worker(s) (limit 600 s){scale}",
            if ok { "met" } else { "missed" },
            records.len(),
            parallelism()
        ),
    );
    note(&format!("Gbps: {}", parts.join(", ")));

    let mut ok = true;
    let mut parts = Vec::new();
    for (dir, mode, target) in GAIN_TARGETS {
        let g = s.group("2-2", dir, mode, None).and_then(|g| g.gain_percent).unwrap_or(f64::NAN);
        let lo = target * (1.0 - GAIN_REL_TOL);
        let hi = target * (1.0 + GAIN_REL_TOL);
        let hit = (lo..=hi).contains(&g);
        ok &= hit;
        parts.push(format!("{} {g:.1}% in [{lo:.1}, {hi:.1}] {}", label(dir, mode), if hit { "yes" } else { "no" }));
    }
    line(2, ok, &format!("gain structure of case 2-2 vs 11ax{scale}"));
    note(&parts.join("; "));
}

fn criterion_3(out: &Path) {
    let (seeds, reduced) = seeds();
    let m = CaseMatrix::latency_default();
    let t = Instant::now();
    let (s, records) = run_to_dir(&m, &seeds, None, parallelism(), out).expect("latency campaign");
    let secs = t.elapsed().as_secs_f64();
    assert_eq!(records.iter().filter(|r| !r.ok).count(), 0, "latency runs failed");

    let mut ok = true;
    let mut parts = Vec::new();
    for (dir, mode, target) in DELAY_TARGETS {
        let g = s
            .latency_gains
            .iter()
            .find(|g| g.direction == dir && g.mode == mode)
            .map_or(f64::NAN, |g| g.mean_reduction_percent);
        let hit = (g - target).abs() <= DELAY_TOL_PP;
        ok &= hit;
        parts.push(format!("{} {g:.1}% vs {target:.0}% {}", label(dir, mode), if hit { "yes" } else { "no" }));
    }
    let mut order_ok = true;
    let mut worst = Vec::new();
    for case in ["11ax-2-links", "11be-mlo"] {
        for dir in DIRS {
            for &load in &m.loads_mbps {
                let su = s.group(case, dir, AccessMode::Su, Some(load)).and_then(|g| g.mean);
                let mu = s.group(case, dir, AccessMode::Ofdma, Some(load)).and_then(|g| g.mean);
                match (su, mu) {
                    (Some(su), Some(mu)) if mu < su => {}
                    _ => {
                        order_ok = false;
                        worst.push(format!("{case} {dir:?} @{load}"));
                    }
                }
            }
        }
    }
    let fast = secs <= 1200.0;
    let scale = if reduced { " (reduced seeds)" } else { "" };
    line(
        3,
        ok && order_ok && fast && !reduced,
        &format!(
            "latency: reductions {}, OFDMA below SU at every load {}; runtime {secs:.0} s for {} runs, {} worker(s) (limit 1200 s){scale}",
            if ok { "ok" } else { "off" },
            if order_ok { "yes" } else { "no" },
            records.len(),
            parallelism()
        ),
    );
    note(&parts.join("; "));
    if !worst.is_empty() {
        note(&format!("OFDMA not below SU at: {}", worst.join(", ")));
    }
}

fn ratio_eq(a: PhyRate, b: PhyRate, num: u64, den: u64) -> bool {
    // a / b == num / den exactly, same symbol length
    let (an, ad) = a.bits_per_symbol_ratio();
    let (bn, bd) = b.bits_per_symbol_ratio();
    a.symbol() == b.symbol() && an as u128 * bd as u128 * den as u128 == bn as u128 * ad as u128 * num as u128
}

fn criterion_4() {
    let t = Instant::now();
    let table = McsTable::default();
    let m13 = table.get(13).unwrap();
    let m11 = table.get(11).unwrap();
    let mut ok = true;
    let mut checks = 0;
    for gi in [GuardInterval::Ns800, GuardInterval::Ns1600, GuardInterval::Ns3200] {
        for nss in 1..=8 {
            for ru in RuSize::ALL {
                let a = RuAllocation::single(ru);
                ok &= ratio_eq(phy_rate(&m13, &a, nss, gi), phy_rate(&m11, &a, nss, gi), 6, 5);
                checks += 1;
            }
            for mcs in table.entries() {
                let full = phy_rate(mcs, &RuAllocation::single(RuSize::Ru4x996), nss, gi);
                let half = phy_rate(mcs, &RuAllocation::single(RuSize::Ru2x996), nss, gi);
                ok &= ratio_eq(full, half, 2, 1);
                let parts = [RuSize::Ru484, RuSize::Ru242, RuSize::Ru996];
                let mru = phy_rate(mcs, &RuAllocation::mru(parts.to_vec()), nss, gi);
                let (mn, md) = mru.bits_per_symbol_ratio();
                let mut sum_num = 0u128;
                for p in parts {
                    let (n, d) = phy_rate(mcs, &RuAllocation::single(p), nss, gi).bits_per_symbol_ratio();
                    assert_eq!(d, md);
                    sum_num += n as u128;
                }
                ok &= sum_num == mn as u128;
                checks += 2;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    line(
        4,
        ok && secs < 1.0,
        &format!("exact PHY: MCS13/MCS11 = 6/5, 4x996 = 2 x (2x996), MRU additivity over {checks} cases in {secs:.3} s"),
    );
}

fn random_scenario(rng: &mut RngStream) -> ScenarioConfig {
    let links = [
        json!([{"band": "6", "center_freq_mhz": 6105, "width_mhz": 320}]),
        json!([{"band": "5", "center_freq_mhz": 5250, "width_mhz": 160}]),
        json!([
            {"band": "6", "center_freq_mhz": 6105, "width_mhz": 320},
            {"band": "5", "center_freq_mhz": 5250, "width_mhz": 160}
        ]),
        json!([
            {"band": "6", "center_freq_mhz": 6105, "width_mhz": 320},
            {"band": "5", "center_freq_mhz": 5250, "width_mhz": 160},
            {"band": "5", "center_freq_mhz": 5570, "width_mhz": 160}
        ]),
    ];
    let pick = |rng: &mut RngStream, n: i64| rng.draw_uniform_int(0, n - 1).unwrap() as usize;
    let links = links[pick(rng, 4)].clone();
    let multi = links.as_array().unwrap().len() > 1;
    let nstr = multi && pick(rng, 2) == 1;
    let residential = pick(rng, 2) == 1;
    let n_sta = 1 + pick(rng, 5);
    let agg = [64, 256, 1024][pick(rng, 3)];
    let base = if residential { ScenarioConfig::latency_default() } else { ScenarioConfig::throughput_default() };
    let topology = if residential {
        json!({"kind": "residential", "floors": 1, "rows": 2, "cols": 3, "apartment_m": 10.0,
               "floor_height_m": 3.0, "stas_per_bss": n_sta.min(4), "co_channel_bss": 2,
               "reuse_fraction": 1.0 / 3.0})
    } else {
        json!({"kind": "box", "n_sta": n_sta, "side_m": 20.0})
    };
    base.with_overrides(&json!({
        "seed": rng.draw_uniform_int(0, i64::MAX).unwrap(),
        "duration_s": 0.12,
        "warmup_s": 0.02,
        "standard": if !nstr && pick(rng, 2) == 1 { "ax" } else { "be" },
        "access": if pick(rng, 2) == 1 { "ofdma" } else { "su" },
        "mld_mode": if nstr { "nstr" } else { "str" },
        "links": links,
        "topology": topology,
        "mac": {"max_aggregation": agg},
        "traffic": {
            "kind": if pick(rng, 2) == 1 { "full_buffer" } else { "constant_rate" },
            "direction": if pick(rng, 2) == 1 { "ul" } else { "dl" },
            "rate_mbps": rng.draw_range_f64(20.0, 400.0)
        }
    }))
    .unwrap()
}

fn criterion_5() {
    let t = Instant::now();
    let mut rng = RngStream::new(2024, "acceptance/properties");
    let mut checks = 0u64;
    let mut bad = Vec::new();

    // CW bounds over random EDCA event sequences
    for _ in 0..3000 {
        let params = EdcaParams::default();
        let mut s = EdcaState::new(params, &mut rng);
        let mut now = SimTime::ZERO;
        for _ in 0..40 {
            match rng.draw_uniform_int(0, 4).unwrap() {
                0 => {
                    now = now + SimTime(rng.draw_uniform_int(0, 200_000).unwrap() as u64);
                    s.on_medium_idle(now);
                }
                1 => {
                    now = now + SimTime(rng.draw_uniform_int(0, 200_000).unwrap() as u64);
                    s.on_medium_busy(now);
                }
                2 => s.on_access(),
                3 => s.on_tx_success(&mut rng),
                _ => s.on_tx_failure(&mut rng),
            }
            if !(7..=15).contains(&s.cw) || s.backoff_slots > s.cw {
                bad.push("cw");
            }
        }
        checks += 1;
    }

    // reorder release order under loss, duplicates and hole timeouts
    for _ in 0..3000 {
        let n = rng.draw_uniform_int(1, 150).unwrap() as u64;
        let mut order = Vec::new();
        for s in 0..n {
            if rng.draw_unit() > 0.1 {
                order.push((rng.draw_unit(), s));
            }
        }
        for _ in 0..rng.draw_uniform_int(0, 10).unwrap() {
            let s = rng.draw_uniform_int(0, n as i64 - 1).unwrap() as u64;
            order.push((rng.draw_unit(), s));
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut b = ReorderBuffer::new(0);
        let mut out = Vec::new();
        for &(_, s) in &order {
            if rng.draw_unit() < 0.02 {
                b.on_hole_timeout(&mut out);
            }
            b.receive(s, (), &mut out);
        }
        while b.has_holes() {
            b.on_hole_timeout(&mut out);
        }
        if !out.windows(2).all(|w| w[0].0 < w[1].0) {
            bad.push("reorder");
        }
        checks += 1;
    }

    // A-MPDU size and TXOP budget
    let table = McsTable::default();
    let timing = MacTiming::default();
    let rus = [RuSize::Ru242, RuSize::Ru484, RuSize::Ru996, RuSize::Ru2x996, RuSize::Ru4x996];
    for _ in 0..3000 {
        let mcs = table.get(rng.draw_uniform_int(0, 13).unwrap() as u8).unwrap();
        let ru = rus[rng.draw_uniform_int(0, 4).unwrap() as usize];
        let nss = rng.draw_uniform_int(1, 4).unwrap() as u32;
        let rate = phy_rate(&mcs, &RuAllocation::single(ru), nss, GuardInterval::Ns800);
        let max_agg = [64usize, 256, 1024][rng.draw_uniform_int(0, 2).unwrap() as usize];
        let mut q = TxQueue::new();
        let bytes = rng.draw_uniform_int(40, 2304).unwrap() as u32;
        for i in 0..rng.draw_uniform_int(0, 1500).unwrap() as u64 {
            q.push_back(Mpdu { id: i, seq: i, size_bytes: bytes, enqueue_time: SimTime::ZERO, retries: 0 });
        }
        let txop = SimTime::from_us(rng.draw_uniform_int(0, 8000).unwrap() as u64);
        let (a, _) = build_ampdu(&mut q, SimTime::ZERO, None, &rate, txop, max_agg, &timing);
        if a.len() > max_agg.min(1024)
            || (!a.is_empty() && a.airtime + timing.sifs + timing.block_ack(max_agg) > txop)
        {
            bad.push("ampdu");
        }
        checks += 1;
    }

    // checked simulations: ledger, NSTR, A-MPDU/TXOP, CW, reorder, NAV
    for _ in 0..40 {
        let cfg = random_scenario(&mut rng);
        let out = run_scenario(&cfg, RunOptions { trace: true, check: true }).unwrap();
        if out.report.violations() > 0 {
            bad.push("simulation invariant");
        }
        if nstr_violations(&out.trace, &out.nstr_devices) > 0 {
            bad.push("nstr");
        }
        checks += out.report.events_checked;
    }

    // one link: MLD with NSTR gating traces exactly like plain EDCA
    for _ in 0..20 {
        let mut cfg = random_scenario(&mut rng);
        cfg.links.truncate(1);
        cfg.duration_s = 0.06;
        cfg.warmup_s = 0.01;
        let mut plain = cfg.clone();
        plain.standard = Standard::Ax;
        plain.mld_mode = MldMode::Str;
        let mut mld = cfg;
        mld.standard = Standard::Be;
        mld.mld_mode = MldMode::Nstr;
        let a = run_scenario(&plain, RunOptions { trace: true, check: false }).unwrap();
        let b = run_scenario(&mld, RunOptions { trace: true, check: false }).unwrap();
        if a.trace != b.trace {
            bad.push("single-link trace");
        }
        checks += a.trace.len() as u64;
    }
    let secs = t.elapsed().as_secs_f64();
    bad.dedup();
    line(
        5,
        bad.is_empty() && checks >= 10_000 && secs <= 120.0,
        &format!(
            "invariant suite: {checks} randomized checks in {secs:.1} s, violations: {}",
            if bad.is_empty() { "none".to_string() } else { bad.join(", ") }
        ),
    );
}

fn criterion_6(dir: &Path) {
    let mut m = CaseMatrix::throughput_default();
    m.name = "determinism".into();
    m.scenario = json!({"campaign": "throughput", "duration_s": 1.5, "warmup_s": 0.5});
    m.cases.retain(|c| c.id == "2-2" || c.id == "ax");
    let seeds = [0, 1, 2];
    let a = dir.join("a");
    let b = dir.join("b");
    run_to_dir(&m, &seeds, None, parallelism(), &a).unwrap();
    run_to_dir(&m, &seeds, None, 1, &b).unwrap();
    let ra = std::fs::read(a.join("runs.csv")).unwrap();
    let rb = std::fs::read(b.join("runs.csv")).unwrap();
    line(
        6,
        ra == rb && !ra.is_empty(),
        &format!("determinism: runs.csv of two runs with seeds {seeds:?} byte-identical ({} bytes)", ra.len()),
    );
}

fn criterion_7(out: &Path) {
    let (seeds, reduced) = seeds();
    let m = CaseMatrix::features_default();
    let (s, _) = run_to_dir(&m, &seeds, None, parallelism(), out).unwrap();
    let order = ["+4k-qam", "+1024-agg", "+320mhz", "+multi-link"];
    let delta = |case: &str| {
        s.feature_ranking.iter().find(|f| f.case == case).map_or(f64::NAN, |f| f.delta_gbps)
    };
    let ds: Vec<f64> = order.iter().map(|c| delta(c)).collect();
    let ok = ds.windows(2).all(|w| w[0] < w[1]);
    let text: Vec<String> = order.iter().zip(&ds).map(|(c, d)| format!("{c} {d:+.3}")).collect();
    line(
        7,
        ok,
        &format!(
            "feature ordering (DL SU, delta Gbps over 11ax): {}{}",
            text.join(" < "),
            if reduced { " (reduced seeds)" } else { "" }
        ),
    );
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    criterion_4();
    criterion_5();
    criterion_6(&tmp.path().join("determinism"));
    criterion_7(&tmp.path().join("features"));
    criteria_1_2(&tmp.path().join("throughput"));
    criterion_3(&tmp.path().join("latency"));
}
