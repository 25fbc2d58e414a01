use proptest::prelude::*;
use trajfm::atr::{dynamic_resample, interval_resample, resampled_len, sampling_ratio, ResamplePolicy};
use trajfm::{GeoPoint, TrajPoint, Trajectory};

fn line(n: usize) -> Trajectory {
    let pts = (0..n).map(|i| TrajPoint::new(GeoPoint { lng: 116.3 + 1e-5 * i as f64, lat: 39.9 }, i as f64)).collect();
    Trajectory::new("l", pts).unwrap()
}

/// Sampling ratio evaluated independently of the library.
fn ratio_oracle(n: usize) -> f64 {
    let (n_min, n_max, r_min) = (36.0, 600.0, 0.35);
    let n = (n as f64).clamp(n_min, n_max);
    1.0 - (1.0 - r_min) * (n - n_min + 1.0).ln() / (n_max - n_min + 1.0).ln()
}

proptest! {
    #[test]
    fn ratio_matches_closed_form(n in 1usize..10_000) {
        prop_assert!((sampling_ratio(n, &ResamplePolicy::default()) - ratio_oracle(n)).abs() < 1e-12);
    }

    #[test]
    fn resample_keeps_endpoints_and_order(n in 2usize..3000) {
        let policy = ResamplePolicy::default();
        let t = line(n);
        let r = dynamic_resample(&t, &policy);
        prop_assert_eq!(r.len(), resampled_len(n, &policy));
        prop_assert!(r.len() <= policy.m_max());
        prop_assert_eq!(r.points[0], t.points[0]);
        prop_assert_eq!(*r.points.last().unwrap(), *t.points.last().unwrap());
        prop_assert!(r.points.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn interval_gaps_are_exact(n in 2usize..2000, dt in 1usize..10) {
        prop_assume!(n > dt);
        let r = interval_resample(&line(n), dt).unwrap();
        prop_assert_eq!(r.len(), (n - 1) / dt + 1);
        prop_assert!(r.points.windows(2).all(|w| w[1].t - w[0].t == dt as f64));
    }
}

#[test]
fn short_trajectories_are_untouched() {
    for n in 2..=36 {
        let t = line(n);
        assert_eq!(dynamic_resample(&t, &ResamplePolicy::default()), t);
    }
}
