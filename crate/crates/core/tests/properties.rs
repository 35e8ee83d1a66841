use proptest::prelude::*;
use rand::Rng;
use spardelta_core::codec::{decode_sm, encode_delta, encode_sm, DeltaStream};
use spardelta_core::conv::{conv_dense_oracle, conv_zeroskip, Pool};
use spardelta_core::fxp::{dequantize, quantize, OpCounter, QFormat, QScalar, QTensor};
use spardelta_core::gru::{deltagru_step, gru_dense_oracle, DeltaState, GruLayerSpec, ACT_FMT};
use spardelta_core::io::{qt_from_bytes, qt_to_bytes, smfm_from_bytes, smfm_to_bytes};
use spardelta_core::mem::{cost_trace, AccessTag, AccessTrace, BrainBudget, MemConfig};
use spardelta_core::synth;

fn fmt_strategy() -> impl Strategy<Value = QFormat> {
    (0u8..=15).prop_map(|f| QFormat::with_frac(f).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn quantize_error_at_most_half_ulp(fmt in fmt_strategy(), u in -1.0f64..1.0) {
        let v = u * fmt.max_value();
        let mut ops = OpCounter::default();
        let q = quantize(v, fmt, &mut ops);
        prop_assert!((dequantize(q) - v).abs() <= fmt.ulp() / 2.0);
        prop_assert_eq!(ops.saturations, 0);
    }

    #[test]
    fn quantize_monotone(fmt in fmt_strategy(), a in -1e6f64..1e6, b in -1e6f64..1e6) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut ops = OpCounter::default();
        prop_assert!(quantize(lo, fmt, &mut ops).raw <= quantize(hi, fmt, &mut ops).raw);
    }

    #[test]
    fn sm_roundtrip_and_payload(c in 1usize..4, h in 1usize..20, w in 1usize..20, p in 0.0f64..=1.0, seed: u64) {
        let mut r = synth::rng(seed, 0);
        let n = c * h * w;
        let data: Vec<i16> = (0..n).map(|_| if r.random::<f64>() < p { 0 } else { r.random::<i16>() }).collect();
        let t = QTensor::new(vec![c, h, w], QFormat::Q8_8, data).unwrap();
        let s = encode_sm(&t);
        prop_assert_eq!(&decode_sm(&s).unwrap(), &t);
        prop_assert_eq!(s.payload_bits(), (n + 16 * t.count_nonzero()) as u64);
        prop_assert_eq!(&smfm_from_bytes(&smfm_to_bytes(&s)).unwrap(), &s);
        prop_assert_eq!(&qt_from_bytes(&qt_to_bytes(&t)).unwrap(), &t);
        let scanned: Vec<(usize, i16)> = t.data().iter().copied().enumerate().filter(|&(_, v)| v != 0).collect();
        let iterated: Vec<(usize, i16)> = s.nonzero_iter().map(|px| (px.c * h * w + px.y * w + px.x, px.value)).collect();
        prop_assert_eq!(scanned, iterated);
    }

    #[test]
    fn delta_events_non_increasing_in_theta(
        prev in prop::collection::vec(-2000i16..2000, 1..40),
        seed: u64,
        t1 in 0i16..300,
        t2 in 0i16..300,
    ) {
        let mut r = synth::rng(seed, 0);
        let cur: Vec<i16> = prev.iter().map(|&p| p.saturating_add(r.random_range(-400..=400))).collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let pt = QTensor::vector(ACT_FMT, prev.clone());
        let ct = QTensor::vector(ACT_FMT, cur.clone());
        let (s_lo, m_lo) = encode_delta(&pt, &ct, QScalar::from_raw(lo, ACT_FMT)).unwrap();
        let (s_hi, _) = encode_delta(&pt, &ct, QScalar::from_raw(hi, ACT_FMT)).unwrap();
        prop_assert!(s_lo.event_count() >= s_hi.event_count());
        for i in 0..cur.len() {
            prop_assert!((m_lo.data()[i] as i32 - cur[i] as i32).abs() <= lo as i32);
        }
        let (_, m0) = encode_delta(&pt, &ct, QScalar::from_raw(0, ACT_FMT)).unwrap();
        prop_assert_eq!(m0.data(), &cur[..]);
    }

    #[test]
    fn zeroskip_equals_dense(
        in_c in 1usize..4,
        out_c in 1usize..4,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..=2,
        pad in 0usize..=2,
        pooled: bool,
        relu: bool,
        h in 6usize..14,
        w in 6usize..14,
        p in prop::sample::select(vec![0.0, 0.25, 0.5, 0.8, 1.0]),
        seed: u64,
    ) {
        let mut r = synth::rng(seed, 0);
        let pool = if pooled { Pool::Max2x2 } else { Pool::None };
        let spec = synth::random_conv_layer(in_c, out_c, k, stride, pad, relu, pool, 1.0, 0.5, &mut r);
        let x = synth::sparse_map((in_c, h, w), QFormat::Q8_8, p, 8.0, &mut r);
        match conv_dense_oracle(&spec, &x) {
            Ok((dense, dc)) => {
                let res = conv_zeroskip(&spec, &encode_sm(&x)).unwrap();
                prop_assert_eq!(&res.output, &encode_sm(&dense));
                prop_assert!(res.counters.macs_executed <= res.counters.macs_dense_equivalent);
                prop_assert_eq!(res.counters.macs_dense_equivalent, dc.macs_executed);
                if x.count_nonzero() == 0 {
                    prop_assert_eq!(res.pixel_visits, 0);
                }
            }
            Err(_) => prop_assert!(conv_zeroskip(&spec, &encode_sm(&x)).is_err()),
        }
    }
}

fn gru_case(seed: u64, max_i: usize, max_h: usize) -> (spardelta_core::gru::GruWeights, QTensor) {
    let mut r = synth::rng(seed, 9);
    let i = r.random_range(1..=max_i);
    let h = r.random_range(1..=max_h);
    let t = r.random_range(1..=20);
    let w = synth::random_gru_weights(i, h, 0.8, 0.3, &mut r);
    let x = synth::sequence(synth::SeqKind::Uniform, t, i, 2.0, &mut r).unwrap();
    (w, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn theta_zero_gru_is_exact_and_preactivations_telescope(seed: u64) {
        let (w, x) = gru_case(seed, 12, 12);
        let spec = GruLayerSpec::new(&w, QScalar::from_raw(0, ACT_FMT)).unwrap();
        let (i_n, h_n) = (spec.input_size(), spec.hidden_size());
        let oracle = gru_dense_oracle(&spec, &x).unwrap();
        let mut st = DeltaState::new(&spec);
        let mut ops = OpCounter::default();
        let mut h_prev = vec![0i16; h_n];
        let wv = |m: &QTensor, r: usize, c: usize, n: usize| m.data()[r * n + c] as i64;
        for (t, want) in oracle.iter().enumerate() {
            let xt = &x.data()[t * i_n..(t + 1) * i_n];
            let (h, stats) = deltagru_step(&spec, &mut st, xt, &mut ops).unwrap();
            prop_assert_eq!(&h, want);
            prop_assert_eq!(stats.macs, 3 * h_n as u64 * (stats.input_events + stats.hidden_events));
            for j in 0..h_n {
                let mut a_r = w.b_r[j] as i64;
                for c in 0..i_n {
                    a_r += wv(&w.w_xr, j, c, i_n) * xt[c] as i64;
                }
                for c in 0..h_n {
                    a_r += wv(&w.w_hr, j, c, h_n) * h_prev[c] as i64;
                }
                prop_assert_eq!(st.a_r[j], a_r);
            }
            h_prev = h;
        }
    }

    #[test]
    fn gru_memory_drift_and_step_monotonicity(seed: u64, th_a in 0i16..128, th_b in 0i16..128) {
        let (w, x) = gru_case(seed, 10, 10);
        let (lo, hi) = if th_a <= th_b { (th_a, th_b) } else { (th_b, th_a) };
        let spec_lo = GruLayerSpec::new(&w, QScalar::from_raw(lo, ACT_FMT)).unwrap();
        let spec_hi = spec_lo.with_theta(QScalar::from_raw(hi, ACT_FMT)).unwrap();
        let i_n = spec_lo.input_size();
        let mut st = DeltaState::new(&spec_lo);
        let mut ops = OpCounter::default();
        for t in 0..x.dims()[0] {
            let xt = &x.data()[t * i_n..(t + 1) * i_n];
            // same incoming state, two thresholds
            let h_in = st.h_prev.clone();
            let mut probe = st.clone();
            let (_, s_hi) = deltagru_step(&spec_hi, &mut probe, xt, &mut ops).unwrap();
            let (_, s_lo) = deltagru_step(&spec_lo, &mut st, xt, &mut ops).unwrap();
            prop_assert!(s_lo.input_events >= s_hi.input_events);
            prop_assert!(s_lo.input_events + s_lo.hidden_events >= s_hi.input_events + s_hi.hidden_events);
            for c in 0..i_n {
                prop_assert!((st.x_mem[c] as i32 - xt[c] as i32).abs() <= lo as i32);
            }
            for (m, h) in st.h_mem.iter().zip(&h_in) {
                prop_assert!((*m as i32 - *h as i32).abs() <= lo as i32);
            }
        }
    }
}

fn random_trace(seed: u64, n: usize) -> AccessTrace {
    let mut r = synth::rng(seed, 3);
    let mut t = AccessTrace::new();
    for _ in 0..n {
        let addr = r.random_range(0..20_000u64);
        let words = r.random_range(1..3000u64);
        if r.random::<bool>() {
            t.dram_read(AccessTag::Weights, addr, words);
        } else {
            t.dram_write(AccessTag::Activations, addr, words);
        }
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cost_additivity_and_ratio_bound(sa: u64, sb: u64, na in 1usize..12, nb in 1usize..12, factor in 1.0f64..80.0) {
        let cfg = MemConfig { row_change_factor: factor, ..MemConfig::default() };
        let a = random_trace(sa, na);
        let b = random_trace(sb, nb);
        let mut ab = a.clone();
        ab.append(&mut b.clone());
        let (ca, cb, cab) = (cost_trace(&a, &cfg), cost_trace(&b, &cfg), cost_trace(&ab, &cfg));
        prop_assert!(cab.cycles >= ca.cycles + cb.cycles - factor - 1e-9);
        prop_assert!(cab.cycles <= ca.cycles + cb.cycles + 1e-9);
        let per_word = cab.cycles / cab.dram_words as f64;
        prop_assert!(per_word >= 1.0 - 1e-12 && per_word <= 1.0 + factor + 1e-12);
    }

    #[test]
    fn brain_budget_round_trips(
        rate in 0.01f64..100.0,
        fanout in 1.0f64..1e5,
        neurons in 1e3f64..1e12,
        e in 1e-16f64..1e-9,
        which in 0usize..4,
    ) {
        let full = BrainBudget {
            rate_hz: Some(rate), fanout: Some(fanout), neurons: Some(neurons), energy_per_syn_j: Some(e), power_w: None,
        };
        let (_, solved) = full.solve().unwrap();
        let power = solved.power_w;
        let mut q = BrainBudget { power_w: Some(power), ..full };
        let truth = [rate, fanout, neurons, e][which];
        match which {
            0 => q.rate_hz = None,
            1 => q.fanout = None,
            2 => q.neurons = None,
            _ => q.energy_per_syn_j = None,
        }
        let (field, s) = q.solve().unwrap();
        let got = s.get(field);
        prop_assert!(((got - truth) / truth).abs() < 1e-12, "{} vs {}", got, truth);
    }
}

#[test]
fn delta_stream_rejects_bad_events() {
    use spardelta_core::codec::DeltaEvent;
    assert!(DeltaStream::from_events(3, vec![DeltaEvent { index: 3, value: 1 }]).is_err());
    assert!(DeltaStream::from_events(3, vec![DeltaEvent { index: 1, value: 0 }]).is_err());
    assert!(DeltaStream::from_events(
        3,
        vec![DeltaEvent { index: 2, value: 1 }, DeltaEvent { index: 1, value: 1 }]
    )
    .is_err());
}
