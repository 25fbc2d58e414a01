use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trajfm::geo::speed_kmh;
use trajfm::preprocess::{run_pipeline, FilterPolicy};
use trajfm::synth::{draw_one, generate, generate_one, SynthSpec};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn speeds_stay_within_range_plus_noise(seed in any::<u64>(), lo in 15.0f64..50.0, span in 5.0f64..60.0) {
        let spec = SynthSpec { min_speed_kmh: lo, max_speed_kmh: lo + span, seed, ..SynthSpec::default() };
        let (route, traj) = generate_one(&spec, 0).unwrap();
        // Difference of two 2-D noise increments; 3 sigma per axis, both axes.
        let allowance_kmh = 3.0 * spec.noise_step_sigma_m() * 2f64.sqrt() * 3.6;
        for w in traj.points.windows(2) {
            let (la, _) = route.at(w[0].t - traj.points[0].t);
            let (lb, _) = route.at(w[1].t - traj.points[0].t);
            if la != lb {
                continue;
            }
            let v = speed_kmh(&w[0], &w[1]).unwrap();
            prop_assert!(v >= lo - allowance_kmh && v <= lo + span + allowance_kmh, "speed {v}");
        }
    }

    #[test]
    fn noiseless_speed_matches_leg_speed(seed in any::<u64>()) {
        let spec = SynthSpec { noise_sigma_m: 0.0, seed, ..SynthSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (route, traj) = draw_one(&spec, &mut rng, "x", 0.0);
        for (s, w) in traj.points.windows(2).enumerate() {
            let (la, _) = route.at(s as f64);
            let (lb, _) = route.at(s as f64 + 1.0);
            if la == lb {
                let v = speed_kmh(&w[0], &w[1]).unwrap() / 3.6;
                prop_assert!((v - route.speeds_mps[la]).abs() < 1e-3 * route.speeds_mps[la]);
            }
        }
    }
}

#[test]
fn generated_corpus_survives_preprocess_unchanged() {
    let ds = generate(&SynthSpec { n_traj: 60, seed: 9, ..SynthSpec::default() }).unwrap();
    let (kept, report) = run_pipeline(&ds, &FilterPolicy::default());
    assert_eq!(report.kept, 60);
    assert_eq!(report.rejected(), 0);
    for (a, b) in kept.iter().zip(ds.iter()) {
        assert_eq!(a.len(), b.len());
        assert_eq!(a.id, b.id);
    }
}
