use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agml::signal::*;
use agml::simulate::csi_from_paths;

fn packet(k: usize, mut f: impl FnMut(i64) -> Complex64) -> CsiPacket {
    let h = (0..k).map(|i| f(centered_index(i, k))).collect();
    CsiPacket::new("loc", 0, 0.0, h).unwrap()
}

fn random_packet(rng: &mut ChaCha8Rng, k: usize) -> CsiPacket {
    packet(k, |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

#[test]
fn dft_roundtrip_recovers_guarded_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in SUPPORTED_SUBCARRIERS {
        for guards in [GuardMap::None, GuardMap::Standard] {
            let p = random_packet(&mut rng, k);
            let mask = guards.mask(k).unwrap();
            let back = cir_to_csi(&csi_to_cir(&p, &guards).unwrap()).unwrap();
            for i in 0..k {
                let expected = if mask[i] { Complex64::new(0.0, 0.0) } else { p.subcarriers[i] };
                assert!((back[i] - expected).norm() < 1e-9, "K={k} bin {i}");
            }
        }
    }
}

#[test]
fn flat_spectrum_is_impulse_at_zero() {
    let p = packet(64, |_| Complex64::new(1.0, 0.0));
    let taps = cir_taps(&p, &GuardMap::None).unwrap();
    assert!((taps[0] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
    assert!(taps[1..].iter().all(|t| t.norm() < 1e-12));
    let cir = csi_to_cir(&p, &GuardMap::None).unwrap();
    assert!(cir.paths[0].power_dbm.abs() < 1e-9);
    assert_eq!(cir.paths[0].delay_s, 0.0);
}

#[test]
fn shift_theorem() {
    let (k, n0) = (64usize, 5.0);
    let p = packet(k, |c| Complex64::from_polar(1.0, -2.0 * PI * c as f64 * n0 / k as f64));
    let taps = cir_taps(&p, &GuardMap::None).unwrap();
    for (n, t) in taps.iter().enumerate() {
        let expected = if n == 5 { 1.0 } else { 0.0 };
        assert!((t.norm() - expected).abs() < 1e-12, "tap {n}");
    }
    let cir = csi_to_cir(&p, &GuardMap::None).unwrap();
    assert!((cir.paths[5].delay_s - 5.0 * p.time_resolution_s()).abs() < 1e-18);
}

#[test]
fn calibration_hand_value() {
    // 64 subcarriers of amplitude 0.25 carry energy 4.
    let mut p = packet(64, |_| Complex64::new(0.25, 0.0));
    p.rssi_db = 6.0206;
    assert!((p.energy() - 4.0).abs() < 1e-12);
    let s = packet_scale(&p).unwrap();
    assert!((s - 1.0).abs() < 1e-5, "s = {s}");
    let c = calibrate_amplitude(&[p]).unwrap();
    assert_eq!(c.calibration_count, 1);
    assert_eq!(c.packets.len(), 1);
}

#[test]
fn calibration_unit_case() {
    let p = packet(64, |c| if c == 3 { Complex64::new(0.0, 1.0) } else { Complex64::new(0.0, 0.0) });
    assert_eq!(packet_scale(&p), Some(1.0));
}

#[test]
fn calibration_zero_energy_is_reported() {
    let p = packet(64, |_| Complex64::new(0.0, 0.0));
    assert!(calibrate_amplitude(&[p]).is_err());
}

#[test]
fn calibration_uses_first_half_and_returns_second() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let packets: Vec<CsiPacket> = (0..6)
        .map(|i| {
            let mut p = random_packet(&mut rng, 64);
            p.rssi_db = -40.0 + i as f64;
            p
        })
        .collect();
    let c = calibrate_amplitude(&packets).unwrap();
    assert_eq!(c.calibration_count, 3);
    let mean: f64 = packets[..3].iter().map(|p| packet_scale(p).unwrap()).sum::<f64>() / 3.0;
    assert!((c.scale - mean).abs() < 1e-15);
    assert_eq!(c.packets.len(), 3);
    for (out, inp) in c.packets.iter().zip(&packets[3..]) {
        for (a, b) in out.subcarriers.iter().zip(&inp.subcarriers) {
            assert!((a - b * mean).norm() < 1e-15);
        }
    }
}

proptest! {
    #[test]
    fn calibration_energy_identity(gain in 1e-3f64..1e3, rssi in -90.0f64..30.0, seed in 0u64..1000, n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random_packet(&mut rng, 64);
        let packets: Vec<CsiPacket> = (0..n).map(|_| {
            let mut p = base.clone();
            p.subcarriers.iter_mut().for_each(|h| *h *= gain);
            p.rssi_db = rssi;
            p
        }).collect();
        let c = calibrate_amplitude(&packets).unwrap();
        let target = 10f64.powf(rssi / 10.0);
        for p in &c.packets {
            prop_assert!(((p.energy() - target) / target).abs() < 1e-9);
        }
    }

    #[test]
    fn unwrap_differences_in_half_open_interval(phases in proptest::collection::vec(-10.0f64..10.0, 2..80)) {
        let u = unwrap_phase(&phases);
        for w in u.windows(2) {
            let d = w[1] - w[0];
            prop_assert!(d > -PI - 1e-12 && d <= PI + 1e-12, "difference {}", d);
        }
        for (a, b) in u.iter().zip(&phases) {
            let m = (a - b) / (2.0 * PI);
            prop_assert!((m - m.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn least_squares_residual_is_orthogonal(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_packet(&mut rng, 64);
        let guards = GuardMap::Standard;
        let (_, fit) = sanitize_phase(&p, &guards, PhaseMode::Residual).unwrap();
        let mask = guards.mask(64).unwrap();
        let ks: Vec<f64> = (0..64).filter(|&i| !mask[i]).map(|i| centered_index(i, 64) as f64).collect();
        let dot1: f64 = fit.output.iter().sum();
        let dotk: f64 = fit.output.iter().zip(&ks).map(|(r, k)| r * k).sum();
        prop_assert!(dot1.abs() < 1e-9 && dotk.abs() < 1e-9, "{} {}", dot1, dotk);
    }

    #[test]
    fn mahalanobis_ranking_affine_invariant(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, dim) = (30, 4);
        let samples: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        // Diagonally dominant, hence invertible.
        let a = DMatrix::from_fn(dim, dim, |i, j| if i == j { 3.0 + rng.random_range(0.0..1.0) } else { rng.random_range(-0.5..0.5) });
        let b = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
        let moved: Vec<Vec<f64>> = samples.iter().map(|s| {
            let v = &a * DVector::from_column_slice(s) + &b;
            v.iter().copied().collect()
        }).collect();
        let (d0, _) = mahalanobis_distances(&samples).unwrap();
        let (d1, _) = mahalanobis_distances(&moved).unwrap();
        for (x, y) in d0.iter().zip(&d1) {
            prop_assert!((x - y).abs() < 1e-8 * x.abs().max(1.0));
        }
        let rank = |d: &[f64]| {
            let mut o: Vec<usize> = (0..d.len()).collect();
            o.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
            o
        };
        let (r0, r1) = (rank(&d0), rank(&d1));
        for (i, j) in r0.iter().zip(&r1) {
            prop_assert!(i == j || (d0[*i] - d0[*j]).abs() < 1e-8);
        }
    }
}

#[test]
fn linear_phase_has_zero_residual() {
    let p = packet(64, |c| Complex64::from_polar(1.0, 0.3 * c as f64 + 1.2));
    let (_, fit) = sanitize_phase(&p, &GuardMap::None, PhaseMode::Residual).unwrap();
    assert!((fit.slope - 0.3).abs() < 1e-12);
    assert!(fit.output.iter().all(|r| r.abs() < 1e-12));
}

#[test]
fn constant_phase() {
    let p = packet(64, |_| Complex64::from_polar(2.0, PI / 4.0));
    let (clean, fit) = sanitize_phase(&p, &GuardMap::None, PhaseMode::Residual).unwrap();
    assert!(fit.slope.abs() < 1e-12);
    assert!((fit.intercept - PI / 4.0).abs() < 1e-12);
    assert!(fit.output.iter().all(|r| r.abs() < 1e-12));
    assert!(clean.subcarriers.iter().all(|h| (h.norm() - 2.0).abs() < 1e-12));
}

#[test]
fn injected_wrap_is_undone() {
    let line: Vec<f64> = (0..40).map(|k| 0.7 * k as f64 - 3.0).collect();
    let mut wrapped: Vec<f64> = line.iter().map(|&v| wrap_pi(v)).collect();
    wrapped[17] += 2.0 * PI;
    let u = unwrap_phase(&wrapped);
    let offset = u[0] - line[0];
    assert!(((offset / (2.0 * PI)) - (offset / (2.0 * PI)).round()).abs() < 1e-12);
    let ks: Vec<f64> = (0..40).map(|k| k as f64).collect();
    let (a, b) = fit_line(&ks, &u);
    assert!((a - 0.7).abs() < 1e-10);
    for (k, v) in u.iter().enumerate() {
        assert!((v - (a * k as f64 + b)).abs() < 1e-10);
    }
}

#[test]
fn identical_packets_lose_one_by_tie_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_packet(&mut rng, 64);
    let packets = vec![p; 10];
    let r = remove_abnormal(&packets, 0.1, &GuardMap::Standard).unwrap();
    assert_eq!(r.kept.len(), 9);
    assert_eq!(r.removed, vec![0]);
    assert_eq!(r.covariance, CovarianceFix::ZeroTrace);
}

#[test]
fn identity_covariance_gives_squared_norm() {
    let x = [1.0, -2.0, 0.5];
    let d = mahalanobis(&x, &[0.0; 3], &DMatrix::identity(3, 3)).unwrap();
    assert!((d - 5.25).abs() < 1e-15);
}

#[test]
fn amplitude_spike_is_removed() {
    let k = 64;
    // Keep three active subcarriers so 20 packets give a full-rank covariance.
    let active = [-5i64, 7, 20];
    let guards = GuardMap::Custom((-32..32).filter(|c| !active.contains(c)).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sigma = 0.05;
    let spiked = 13;
    let packets: Vec<CsiPacket> = (0..20)
        .map(|i| {
            packet(k, |c| {
                let mut a = 1.0 + sigma * rng.random_range(-1.0..1.0);
                if i == spiked && c == 7 {
                    a += 10.0 * sigma;
                }
                Complex64::from_polar(a, 0.3 * c as f64)
            })
        })
        .collect();
    let removal = remove_abnormal(&packets, 0.05, &guards).unwrap();
    assert_eq!(removal.covariance, CovarianceFix::None);

    // Oracle: explicit inverse of the population covariance, distances by
    // direct quadratic form, largest picked by linear scan.
    let mask = guards.mask(k).unwrap();
    let rows: Vec<Vec<f64>> = packets
        .iter()
        .map(|p| (0..k).filter(|&i| !mask[i]).map(|i| p.subcarriers[i].norm()).collect())
        .collect();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(3, 3);
    for r in &rows {
        for a in 0..3 {
            for b in 0..3 {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / n;
            }
        }
    }
    let inv = cov.try_inverse().unwrap();
    let mut best = (0, f64::MIN);
    for (i, r) in rows.iter().enumerate() {
        let mut d = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                d += (r[a] - mean[a]) * inv[(a, b)] * (r[b] - mean[b]);
            }
        }
        assert!((d - removal.distances[i]).abs() < 1e-8 * d.max(1.0));
        if d > best.1 {
            best = (i, d);
        }
    }
    assert_eq!(best.0, spiked);
    assert_eq!(removal.removed, vec![spiked]);
    assert_eq!(removal.kept.len(), 19);
}

fn close(got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-9, "{got:?} vs {want:?}");
    }
}

#[test]
fn feature_sort_and_padding() {
    let dt = 1e-9;
    let comp = |d: f64, p: f64| PathComponent {
        delay_s: d * dt,
        power_dbm: p,
        phase_rad: 0.0,
    };
    let three = CirProfile {
        paths: vec![comp(1.0, -40.0), comp(2.0, -60.0), comp(3.0, -50.0)],
        time_resolution_s: dt,
        n_taps: 64,
    };
    let one = CirProfile {
        paths: vec![comp(4.0, -45.0)],
        time_resolution_s: dt,
        n_taps: 64,
    };
    let cirs: BTreeMap<usize, CirProfile> = [(0, three), (1, one.clone())].into_iter().collect();
    let f = extract_features(&cirs, 2, 2).unwrap();
    assert_eq!(f.values.len(), 8);
    close(&f.values, &[1.0, -40.0, 3.0, -50.0, 4.0, -45.0, 64.0, NOISE_FLOOR_DBM]);

    let single: BTreeMap<usize, CirProfile> = [(0, one.clone())].into_iter().collect();
    close(&extract_features(&single, 1, 1).unwrap().values, &[4.0, -45.0]);
    let padded = extract_features(&single, 1, 3).unwrap().values;
    close(&padded, &[4.0, -45.0, 64.0, NOISE_FLOOR_DBM, 64.0, NOISE_FLOOR_DBM]);

    match extract_features(&single, 3, 1) {
        Err(agml::Error::MissingAps(m)) => assert_eq!(m, vec![1, 2]),
        other => panic!("expected missing APs, got {other:?}"),
    }
}

#[test]
fn feature_ties_prefer_smaller_delay() {
    let comp = |d: f64| PathComponent {
        delay_s: d * 1e-9,
        power_dbm: -50.0,
        phase_rad: 0.0,
    };
    let cir = CirProfile {
        paths: vec![comp(7.0), comp(2.0), comp(5.0)],
        time_resolution_s: 1e-9,
        n_taps: 64,
    };
    let got: Vec<f64> = strongest_paths(&cir, 2).into_iter().flat_map(|(d, p)| [d, p]).collect();
    close(&got, &[2.0, -50.0, 5.0, -50.0]);
}

fn two_path_packets(ap: usize, count: usize) -> (Vec<CsiPacket>, [f64; 2]) {
    let dt = 1.0 / (64.0 * DEFAULT_SPACING_HZ);
    let delays = [3.1 * dt, 10.1 * dt];
    let paths = [
        PathComponent {
            delay_s: delays[0],
            power_dbm: -40.0,
            phase_rad: 0.4,
        },
        PathComponent {
            delay_s: delays[1],
            power_dbm: -43.0,
            phase_rad: 2.0,
        },
    ];
    let p = csi_from_paths(&paths, 64, ap, "loc".into()).unwrap();
    (vec![p; count], delays)
}

#[test]
fn pipeline_recovers_two_path_delays() {
    let mut raw = BTreeMap::new();
    let (packets, truth) = two_path_packets(0, 8);
    raw.insert(0, packets);
    let cfg = PipelineConfig {
        phase_mode: PhaseMode::Unwrapped,
        ..PipelineConfig::default()
    };
    let out = preprocess_location(&raw, 2, &cfg).unwrap();
    let dt_ns = 1e9 / (64.0 * DEFAULT_SPACING_HZ);
    let mut got = [out.features.values[0], out.features.values[2]];
    got.sort_by(f64::total_cmp);
    for (g, t) in got.iter().zip(truth) {
        assert!((g - t * 1e9).abs() <= dt_ns / 2.0, "{g} vs {}", t * 1e9);
    }
}

#[test]
fn identical_packets_match_single_packet_path() {
    let (packets, _) = two_path_packets(0, 8);
    let mut raw = BTreeMap::new();
    raw.insert(0, packets.clone());
    let cfg = PipelineConfig::default();
    let out = preprocess_location(&raw, 3, &cfg).unwrap();

    let cal = calibrate_amplitude(&packets[..1]).unwrap();
    let (clean, _) = sanitize_phase(&cal.packets[0], &cfg.guards, cfg.phase_mode).unwrap();
    let cir = csi_to_cir(&clean, &cfg.guards).unwrap();
    let single = extract_features(&[(0, cir)].into_iter().collect(), 1, 3).unwrap();
    for (a, b) in out.features.values.iter().zip(&single.values) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn neutral_parameters_equal_raw_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut raw = BTreeMap::new();
    for ap in 0..2 {
        let packets: Vec<CsiPacket> = (0..5)
            .map(|_| {
                let mut p = random_packet(&mut rng, 64);
                p.ap_id = ap;
                p
            })
            .collect();
        raw.insert(ap, packets);
    }
    let cfg = PipelineConfig {
        removal_fraction: 0.0,
        calibrate: false,
        ..PipelineConfig::default()
    };
    let out = preprocess_location(&raw, 4, &cfg).unwrap();
    let mut cirs = BTreeMap::new();
    for (&ap, packets) in &raw {
        let taps: Vec<Vec<Complex64>> = packets
            .iter()
            .map(|p| {
                let (clean, _) = sanitize_phase(p, &cfg.guards, cfg.phase_mode).unwrap();
                cir_taps(&clean, &cfg.guards).unwrap()
            })
            .collect();
        cirs.insert(ap, average_taps(&taps, packets[0].time_resolution_s()));
    }
    let expected = extract_features(&cirs, 2, 4).unwrap();
    assert_eq!(out.features, expected);
    assert!(out.reports.iter().all(|r| r.removed.is_empty() && r.scale == 1.0 && r.packets_used == 5));
}

#[test]
fn pipeline_needs_four_packets() {
    let (packets, _) = two_path_packets(0, 3);
    let raw: BTreeMap<usize, Vec<CsiPacket>> = [(0, packets)].into_iter().collect();
    assert!(preprocess_location(&raw, 1, &PipelineConfig::default()).is_err());
}

#[test]
fn capture_text_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut packets = Vec::new();
    for loc in ["a", "b"] {
        for ap in 0..2 {
            let mut p = random_packet(&mut rng, 64);
            p.location_id = loc.into();
            p.ap_id = ap;
            p.rssi_db = -42.5;
            packets.push(p);
        }
    }
    let text = format!("# comment\n\n{}", format_capture(&packets));
    let parsed = parse_capture(&text).unwrap();
    assert_eq!(parsed, packets);
    let grouped = group_by_location(parsed);
    assert_eq!(grouped.len(), 2);
    assert_eq!(grouped["a"][&1][0], packets[1]);
}

#[test]
fn capture_errors_carry_line_numbers() {
    match parse_capture("# header\nloc 0 -40 64 1,0\n") {
        Err(agml::Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}
