//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

use std::collections::HashSet;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xorelay::codec::{
    parse_frame, serialize_frame, xor_decode, xor_decode_with, xor_encode, AckRecord, AckStatus, Frame, NativePacket,
    PacketId,
};
use xorelay::config::{ExperimentConfig, LinkOverride};
use xorelay::harness::{self, SweepParam};
use xorelay::link_state::LinkView;
use xorelay::model::{
    build_wheel, enumerate_controls, Control, FlowId, NodeId, QueueKey, Topology, WheelVariant,
    RATES_MBPS,
};
use xorelay::scheduler::{mu, rank, weight, Decision, Policy, QueuedPacket, Scheduler};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    ((value - target) / target).abs() <= rel
}

fn preset(name: &str, alg: &str) -> ExperimentConfig {
    ExperimentConfig::for_preset(name, alg)
}

fn link(from: u32, to: u32, pdr: Option<f64>, rate: Option<f64>) -> LinkOverride {
    LinkOverride { from, to, pdr, rate }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn c1_alice_relay_bob() -> Outcome {
    let target = 4.0 / 3.0;
    let mut pass = true;
    let mut parts = Vec::new();
    for (rate, duration) in [(11.0, 130.0), (54.0, 30.0)] {
        let run = |alg: &str| {
            let mut cfg = preset("arb", alg);
            cfg.topology.rate = rate;
            cfg.sim.duration_s = duration;
            timed(|| harness::run_experiment(&cfg).expect("run"))
        };
        let (plain, tp) = run("plain");
        for alg in ["alg1", "alg2"] {
            let (m, t) = run(alg);
            let g = harness::gain(&m, &plain).expect("gain");
            let ok = within(g, target, 0.05) && m.frames >= 100_000 && plain.frames >= 100_000
                && t.max(tp) < Duration::from_secs(30);
            pass &= ok;
            parts.push(format!("{alg}@{rate}: gain={g:.4} frames={} t={:.1}s", m.frames, t.as_secs_f64()));
        }
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn c2_wheel_gain() -> Outcome {
    let start = Instant::now();
    let mut gains = Vec::new();
    let mut pass = true;
    let mut parts = Vec::new();
    for x in [2usize, 3, 4, 6] {
        let mut cfg = preset(&format!("halfwheel:{x}"), "alg1");
        cfg.sim.duration_s = 10.0;
        let nc = harness::stability_search(&cfg, 2.0).expect("search").lambda_star;
        let plain = harness::stability_search(&harness::plain_baseline(&cfg), 2.0).expect("search").lambda_star;
        let g = nc / plain;
        let theory = 2.0 * x as f64 / (x as f64 + 1.0);
        pass &= within(g, theory, 0.05) && g < 2.0;
        gains.push(g);
        parts.push(format!("x={x}: gain={g:.4} theory={theory:.4}"));
    }
    pass &= gains.windows(2).all(|w| w[1] > w[0]);
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(300);
    parts.push(format!("t={:.1}s", elapsed.as_secs_f64()));
    Outcome { pass, detail: parts.join("; ") }
}

/// Half-cross flow set (1->3, 2->4) with q(1->4) = 1 and q(2->3) swept.
fn cross_cfg(alg: &str) -> ExperimentConfig {
    let mut cfg = preset("half-cross", alg);
    cfg.topology.rate = 12.0;
    cfg.topology.sweep_links = vec![[2, 3]];
    cfg
}

fn c3_feedback() -> Outcome {
    let qs: Vec<f64> = (3..=10).map(|i| i as f64 / 10.0).collect();
    let agg = |alg: &str| -> Vec<f64> {
        harness::sweep(&cross_cfg(alg), SweepParam::Q, &qs).expect("sweep").iter().map(|(_, m, _)| m.aggregate_mbps).collect()
    };
    let (plain, alg1, alg2) = (agg("plain"), agg("alg1"), agg("alg2"));
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, q) in qs.iter().enumerate() {
        let best = alg1[i].max(plain[i]);
        let dominates = alg2[i] >= best * 0.97;
        let low_q_gap = *q > 0.4 + 1e-9 || alg1[i] <= alg2[i] * 0.95;
        pass &= dominates && low_q_gap;
        parts.push(format!("q={q:.1}: plain={:.3} alg1={:.3} alg2={:.3}", plain[i], alg1[i], alg2[i]));
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn c4_ftp_rate_oblivious() -> Outcome {
    let cfg = |alg: &str| {
        let mut c = preset("half-cross", alg);
        c.topology.rate = 24.0;
        c.topology.links = vec![link(0, 3, None, Some(6.0)), link(2, 3, Some(0.7), None)];
        c.algorithm.delta = 0.7;
        c
    };
    let alg2 = harness::run_experiment(&cfg("alg2")).expect("run").aggregate_mbps;
    let ftp = harness::run_experiment(&cfg("ftp")).expect("run").aggregate_mbps;
    Outcome { pass: alg2 >= 1.10 * ftp, detail: format!("alg2={alg2:.3} ftp={ftp:.3} ratio={:.3}", alg2 / ftp) }
}

fn random_view_topology(rng: &mut ChaCha8Rng, n_flows: usize, pdr_lo: f64) -> Topology {
    let mut t = build_wheel(n_flows, WheelVariant::Half).expect("wheel");
    let links: Vec<(NodeId, NodeId)> = t.links().map(|l| (l.from, l.to)).collect();
    for (from, to) in links {
        let rate = RATES_MBPS[rng.random_range(0..RATES_MBPS.len())];
        t.set_rate(from, to, rate).expect("rate");
        t.set_pdr(from, to, rng.random_range(pdr_lo..=1.0)).expect("pdr");
    }
    t
}

/// Draws key possession per receiver, then runs the real decoder.
fn c5_mu_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=3);
        let topo = random_view_topology(&mut rng, n, 0.75);
        let view = LinkView::from_topology(&topo, 0);
        let coded: Vec<Control> = enumerate_controls(&topo, &view).into_iter().filter(|c| c.len() > 1).collect();
        let control = coded[rng.random_range(0..coded.len())].clone();
        let packets: Vec<NativePacket> = control
            .flows()
            .map(|f| {
                let src = topo.flow(f).expect("flow").source;
                NativePacket::new(f, src.ip(), rng.random(), 0, (0..16).map(|_| rng.random()).collect())
            })
            .collect();
        let relay = topo.relay();
        let members: Vec<(&NativePacket, NodeId)> = packets.iter().map(|p| (p, relay)).collect();
        let enc = xor_encode(&members).expect("encode");
        let min_rate = control
            .flows()
            .map(|f| topo.rate(relay, topo.flow(f).expect("flow").destination).expect("rate"))
            .fold(f64::INFINITY, f64::min);
        for target in &packets {
            let di = topo.flow(target.flow_id).expect("flow").destination;
            let mut decoded = 0u64;
            for _ in 0..draws {
                let held: Vec<bool> = packets
                    .iter()
                    .map(|p| {
                        let sj = topo.flow(p.flow_id).expect("flow").source;
                        rng.random::<f64>() < topo.pdr(sj, di) || sj == di
                    })
                    .collect();
                let out = xor_decode_with(
                    &enc,
                    |id| packets.iter().zip(&held).find(|(p, h)| p.id == id && **h).map(|(p, _)| p.payload.as_slice()),
                    target.id,
                );
                if out.as_deref() == Ok(target.payload.as_slice()) {
                    decoded += 1;
                }
            }
            let mc = decoded as f64 / draws as f64 * min_rate;
            let analytic = mu(&topo, &view, &control, target.flow_id).expect("mu");
            worst = worst.max(((mc - analytic) / analytic).abs());
            checked += 1;
        }
    }
    Outcome { pass: worst <= 0.01, detail: format!("{checked} rates over 100 instances, worst rel err {worst:.5}") }
}

fn native() -> impl Strategy<Value = NativePacket> {
    (1u32..16, any::<u32>(), any::<u32>(), any::<u16>(), prop::collection::vec(any::<u8>(), 0..300))
        .prop_map(|(f, ip, seq, off, payload)| NativePacket::new(FlowId(f), ip, seq, off, payload))
}

fn distinct(packets: Vec<NativePacket>) -> Vec<NativePacket> {
    let mut seen = HashSet::new();
    packets.into_iter().filter(|p| seen.insert(p.id)).collect()
}

fn ack_record() -> impl Strategy<Value = AckRecord> {
    (any::<u32>(), any::<u32>(), prop::collection::vec((any::<u32>(), any::<bool>()), 0..6)).prop_map(|(c, r, s)| {
        AckRecord {
            combination_id: c,
            reporter: NodeId(r),
            statuses: s
                .into_iter()
                .map(|(id, ok)| (PacketId(id), if ok { AckStatus::Decoded } else { AckStatus::KeyMissing }))
                .collect(),
        }
    })
}

fn c6_codec() -> Outcome {
    let cases = 10_000;
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    let involution = runner.run(&prop::collection::vec(native(), 1..6), |packets| {
        let packets = distinct(packets);
        let members: Vec<(&NativePacket, NodeId)> = packets.iter().map(|p| (p, NodeId(0))).collect();
        let enc = xor_encode(&members).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for p in &packets {
            let keys: Vec<NativePacket> = packets.iter().filter(|k| k.id != p.id).cloned().collect();
            prop_assert_eq!(xor_decode(&enc, &keys, p.id).map_err(|e| TestCaseError::fail(e.to_string()))?, p.payload.clone());
        }
        Ok(())
    });
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    let frames = prop_oneof![
        (prop::collection::vec(native(), 1..5), prop::collection::vec(ack_record(), 0..4)).prop_map(|(p, acks)| {
            let p = distinct(p);
            let members: Vec<(&NativePacket, NodeId)> = p.iter().map(|x| (x, NodeId(x.src_ip % 7))).collect();
            let mut enc = xor_encode(&members).expect("encode");
            enc.piggyback = acks;
            Frame::Data(enc)
        }),
        prop::collection::vec(ack_record(), 0..8).prop_map(Frame::Ack),
    ];
    let round_trip = runner.run(&frames, |frame| {
        let bytes = serialize_frame(&frame).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(parse_frame(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?, frame);
        Ok(())
    });
    let detail = format!(
        "involution {cases} cases: {}; round-trip {cases} cases: {}",
        involution.as_ref().map_or_else(|e| e.to_string(), |_| "ok".into()),
        round_trip.as_ref().map_or_else(|e| e.to_string(), |_| "ok".into())
    );
    Outcome { pass: involution.is_ok() && round_trip.is_ok(), detail }
}

fn brute_head(s: &Scheduler) -> Option<(Control, f64)> {
    let mut best: Option<(Control, f64)> = None;
    for c in s.controls() {
        let mus: Vec<f64> = c.flows().map(|f| mu(s.topology(), s.view(), c, f).unwrap_or(0.0)).collect();
        let w = weight(c, &mus, |k: QueueKey| s.backlog(k));
        if best.as_ref().is_none_or(|(bc, bw)| rank(w, c, *bw, bc).is_lt()) {
            best = Some((c.clone(), w));
        }
    }
    best
}

fn random_view(rng: &mut ChaCha8Rng, topo: &Topology) -> LinkView {
    let mut v = LinkView::new(0);
    for l in topo.links() {
        let pdr = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..=1.0) };
        v.insert(l.from, l.to, pdr, RATES_MBPS[rng.random_range(0..RATES_MBPS.len())]);
    }
    v
}

fn c7_head_invariant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sequences = 10_000;
    let mut steps = 0u64;
    let mut mismatches = 0u64;
    let mut seq_no = 0u32;
    for s in 0..sequences {
        let alg2 = s % 2 == 1;
        let n = if alg2 { rng.random_range(2..=3) } else { rng.random_range(2..=4) };
        let topo = build_wheel(n, WheelVariant::Half).expect("wheel");
        let policy = if alg2 { Policy::Alg2 } else { Policy::Alg1 };
        let view = random_view(&mut rng, &topo);
        let mut sched = Scheduler::new(topo.clone(), policy, view);
        let mut ids: Vec<PacketId> = Vec::new();
        for _ in 0..40 {
            let flow = topo.flows()[rng.random_range(0..n)];
            match rng.random_range(0..10) {
                0..=3 => {
                    seq_no += 1;
                    let p = NativePacket::new(flow.id, flow.source.ip(), seq_no, 0, vec![0; 4]);
                    ids.push(p.id);
                    sched.enqueue(p);
                }
                4 | 5 => {
                    if let Decision::Serve(c) = sched.select() {
                        let taken = sched.take(&c);
                        if alg2 {
                            for (_, qp) in taken {
                                if rng.random_bool(0.5) {
                                    sched.push_good(qp);
                                } else {
                                    sched.requeue_front(qp);
                                }
                            }
                        }
                    }
                }
                6 => {
                    if !ids.is_empty() {
                        let id = ids.swap_remove(rng.random_range(0..ids.len()));
                        sched.remove(id);
                    }
                }
                7 => sched.set_view(random_view(&mut rng, &topo)),
                _ => {
                    seq_no += 1;
                    let p = NativePacket::new(flow.id, flow.source.ip(), seq_no, 0, vec![0; 4]);
                    ids.push(p.id);
                    sched.requeue_front(QueuedPacket { packet: p, retries: 1, arrival: 0 });
                }
            }
            steps += 1;
            let head = sched.control_list().head().map(|(c, w)| (c.clone(), w));
            if head != brute_head(&sched) {
                mismatches += 1;
            }
        }
    }
    Outcome { pass: mismatches == 0, detail: format!("{sequences} sequences, {steps} steps, {mismatches} mismatches") }
}

fn c8_stability() -> Outcome {
    let mut cfg = preset("arb", "alg1");
    cfg.sim.duration_s = 5.0;
    let star = harness::stability_search(&cfg, 2.0).expect("search").lambda_star;
    let mut below = cfg.clone();
    below.sim.duration_s = 1.0;
    let m_below = harness::run_poisson(&below, 0.95 * star, false).expect("run");
    let mut above = cfg.clone();
    above.sim.duration_s = 60.0;
    let m_above = harness::run_poisson(&above, 1.05 * star, false).expect("run");
    let slope = m_above.backlog_slope();
    let pass = m_below.max_backlog < 1000 && m_above.final_backlog > 5000 && slope > 0.0;
    Outcome {
        pass,
        detail: format!(
            "lambda*={star:.1}/s; 0.95: max backlog {} over 1 s; 1.05: final {} slope {slope:.1}/s over 60 s",
            m_below.max_backlog, m_above.final_backlog
        ),
    }
}

fn c9_determinism() -> Outcome {
    let mut lossy = preset("half-cross", "alg2");
    lossy.topology.links = vec![link(2, 3, Some(0.5), None), link(0, 4, Some(0.8), None)];
    lossy.sim.oracle_links = false;
    let configs = [preset("arb", "alg1"), lossy, preset("cross", "ftp"), preset("halfwheel:3", "plain")];
    let mut pass = true;
    for cfg in &configs {
        let csv = || harness::to_csv(&harness::rows(&cfg.scenario_name(), &harness::run_experiment(cfg).expect("run"), 1.0));
        pass &= csv() == csv();
    }
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, configs[1].to_toml()).expect("write");
    let cli = || {
        Command::new(env!("CARGO_BIN_EXE_xorelay"))
            .args(["run", "--config", path.to_str().expect("utf-8 path"), "--seed", "11"])
            .output()
            .expect("spawn")
    };
    let (a, b) = (cli(), cli());
    pass &= a.status.success() && a.stdout == b.stdout && !a.stdout.is_empty();
    Outcome { pass, detail: format!("{} configs in-process, CLI output {} bytes", configs.len(), a.stdout.len()) }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 alice-relay-bob gain 4/3", c1_alice_relay_bob),
        ("2 wheel gain 2x/(x+1)", c2_wheel_gain),
        ("3 feedback-aware policy dominance", c3_feedback),
        ("4 threshold policy rate penalty", c4_ftp_rate_oblivious),
        ("5 service-rate monte carlo oracle", c5_mu_oracle),
        ("6 codec properties", c6_codec),
        ("7 max-weight head invariant", c7_head_invariant),
        ("8 stability dichotomy", c8_stability),
        ("9 determinism", c9_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let (out, t) = timed(check);
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {name} ({:.1}s): {}", t.as_secs_f64(), out.detail);
        failed += usize::from(!out.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
