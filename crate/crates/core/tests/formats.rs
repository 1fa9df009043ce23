use evaflow::events::{decode_evt1, decode_text, encode_evt1, write_text};
use evaflow::flow::{decode_evaf, encode_evaf, encode_evaf_with};
use evaflow::network::{ModelConfig, ModelParams};
use evaflow::representation::{build_unified_voxel_grid, decode_evgr, encode_evgr};
use evaflow::{BinSpec, Event, EventWindow, FlowField, Polarity, SensorGeometry};
use proptest::prelude::*;

fn geometry() -> impl Strategy<Value = SensorGeometry> {
    (1u32..200, 1u32..200).prop_map(|(w, h)| SensorGeometry::new(w, h).unwrap())
}

/// Events on the Q8 lattice inside the sensor, time-sorted.
fn q8_window() -> impl Strategy<Value = EventWindow> {
    geometry().prop_flat_map(|g| {
        let xmax = (g.width - 1) * 256;
        let ymax = (g.height - 1) * 256;
        prop::collection::vec((0u64..1_000_000, 0..=xmax, 0..=ymax, any::<bool>()), 0..200).prop_map(move |raw| {
            let mut events: Vec<Event> = raw
                .into_iter()
                .map(|(t, x, y, p)| {
                    let p = if p { Polarity::Positive } else { Polarity::Negative };
                    Event::new(t, x as f64 / 256.0, y as f64 / 256.0, p)
                })
                .collect();
            events.sort_by_key(|e| e.t);
            EventWindow::from_events(events, g).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evt1_round_trip(w in q8_window()) {
        let bytes = encode_evt1(&w).unwrap();
        let back = decode_evt1(&bytes).unwrap();
        prop_assert_eq!(back.events(), w.events());
        prop_assert_eq!(back.geometry(), w.geometry());
        prop_assert_eq!(encode_evt1(&back).unwrap(), bytes);
    }

    #[test]
    fn text_round_trip(w in q8_window()) {
        let mut text = Vec::new();
        write_text(&mut text, &w).unwrap();
        let back = decode_text(&text).unwrap();
        prop_assert_eq!(back.events(), w.events());
    }

    #[test]
    fn evgr_round_trip(w in q8_window(), bins in 2usize..6) {
        prop_assume!(!w.is_empty());
        let spec = BinSpec::new(bins, 1.0, 0.0, w.geometry()).unwrap();
        let grid = build_unified_voxel_grid(&w, &spec).unwrap();
        let bytes = encode_evgr(&grid);
        let back = decode_evgr(&bytes).unwrap();
        prop_assert_eq!(encode_evgr(&back), bytes);
        prop_assert_eq!(back.bins(), bins);
    }

    #[test]
    fn evaf_round_trip(
        g in (1u32..20, 1u32..20).prop_map(|(w, h)| SensorGeometry::new(w, h).unwrap()),
        seed in any::<u64>(),
        masked in any::<bool>(),
    ) {
        let n = g.pixels();
        let val = |i: usize, k: u64| ((seed.wrapping_mul(k + 1) ^ i as u64) % 2001) as f32 as f64 / 100.0 - 10.0;
        let u: Vec<f64> = (0..n).map(|i| val(i, 1)).collect();
        let v: Vec<f64> = (0..n).map(|i| val(i, 2)).collect();
        let valid: Vec<bool> = (0..n).map(|i| !masked || (i as u64 + seed) % 3 != 0).collect();
        let f = FlowField::with_mask(g, u, v, valid, 0.05).unwrap();
        let bytes = encode_evaf(&f);
        let back = decode_evaf(&bytes).unwrap();
        prop_assert_eq!(&back.valid, &f.valid);
        prop_assert_eq!(encode_evaf(&back), bytes);
        for i in 0..n {
            prop_assert_eq!(back.u[i], f.u[i] as f32 as f64);
        }
    }

    #[test]
    fn decoders_reject_garbage_without_panicking(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_evt1(&bytes);
        let _ = decode_text(&bytes);
        let _ = decode_evgr(&bytes);
        let _ = decode_evaf(&bytes);
        let _ = ModelParams::decode(&bytes);
    }

    #[test]
    fn truncated_evt1_is_an_error(w in q8_window(), cut in 1usize..20) {
        prop_assume!(!w.is_empty());
        let bytes = encode_evt1(&w).unwrap();
        prop_assert!(decode_evt1(&bytes[..bytes.len() - cut.min(bytes.len())]).is_err());
    }
}

#[test]
fn unmasked_field_has_no_mask_section() {
    let g = SensorGeometry::new(3, 2).unwrap();
    let f = FlowField::uniform(g, 1.0, -1.0, 0.1).unwrap();
    assert_eq!(encode_evaf(&f).len() + g.pixels(), encode_evaf_with(&f, true).len());
    assert_eq!(decode_evaf(&encode_evaf_with(&f, true)).unwrap().valid, f.valid);
}

#[test]
fn non_finite_valid_flow_is_rejected() {
    let g = SensorGeometry::new(2, 2).unwrap();
    let mut f = FlowField::zeros(g, 0.1).unwrap();
    f.u[3] = f64::NAN;
    assert!(decode_evaf(&encode_evaf(&f)).is_err());
    f.valid[3] = false;
    assert!(decode_evaf(&encode_evaf(&f)).is_ok());
}

#[test]
fn params_round_trip_is_exact_after_quantization() {
    let cfg = ModelConfig {
        bins: 3,
        height: 16,
        width: 16,
        stem_channels: 2,
        channels: vec![3, 4],
        hidden: vec![2, 3],
        head_channels: 4,
        ..ModelConfig::default()
    };
    let p = ModelParams::init(&cfg, 3).quantized();
    let bytes = p.encode();
    let back = ModelParams::decode(&bytes).unwrap();
    assert_eq!(back, p);
    assert_eq!(back.encode(), bytes);
}

#[test]
fn q8_limit_is_enforced() {
    let g = SensorGeometry::new(640, 480).unwrap();
    let w = EventWindow::from_events(vec![Event::new(0, 300.0, 10.0, Polarity::Positive)], g).unwrap();
    assert!(encode_evt1(&w).is_err());
    let off_lattice = EventWindow::from_events(vec![Event::new(0, 1.0 / 3.0, 1.0, Polarity::Negative)], g).unwrap();
    assert!(encode_evt1(&off_lattice).is_err());
}
