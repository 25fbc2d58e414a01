//! Pretrains the desk configuration on synthetic data and reports
//! validation loss and held-out recovery error, next to plain linear
//! interpolation of the same masks.
//!
//! Usage: `desk_run [n_traj] [epochs]`; `COORD_SCALE` and `LR` override
//! those two model settings.

use std::time::Instant;

use trajfm::atr::ResamplePolicy;
use trajfm::eval::{evaluate, EvalTask};
use trajfm::model::train::train_with;
use trajfm::model::ModelConfig;
use trajfm::preprocess::{run_pipeline, FilterPolicy};
use trajfm::stm::MaskSpec;
use trajfm::synth::{generate, SynthSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let train_spec = SynthSpec { n_traj: n, seed: 1, ..SynthSpec::default() };
    let test_spec = SynthSpec { n_traj: 200, seed: 2, ..SynthSpec::default() };
    let (train_ds, _) = run_pipeline(&generate(&train_spec).unwrap(), &FilterPolicy::default());
    let (test_ds, _) = run_pipeline(&generate(&test_spec).unwrap(), &FilterPolicy::default());
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let config = ModelConfig {
        epochs,
        coord_scale: env("COORD_SCALE", 100.0),
        lr: env("LR", 1e-3),
        ..ModelConfig::desk()
    };
    let atr = ResamplePolicy::default();
    let start = Instant::now();
    let out = train_with(&train_ds, &config, &atr, &MaskSpec::default(), &mut |row| {
        println!(
            "epoch {:>3} train {:.6e} val {:.6e} ({:.0} s)",
            row.epoch,
            row.train_loss,
            row.val_loss,
            start.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    println!("ratio {:.4}", out.best_val_loss() / out.initial_val_loss());
    println!("baseline linear interpolation MAE {:.3} m", interp_baseline(&test_ds, &out.state, &atr));
    let report = evaluate(&out.state, &test_ds, EvalTask::Recovery, &atr, 0).unwrap();
    println!("{report}");
}

fn interp_baseline(ds: &trajfm::TrajectoryDataset, state: &trajfm::model::ModelState, atr: &ResamplePolicy) -> f64 {
    use trajfm::model::adapt::recovery_mask;
    let (mut sum, mut n) = (0.0, 0usize);
    for (k, t) in ds.iter().enumerate() {
        let input = trajfm::eval::model_input(t, state, atr);
        let m = recovery_mask(&input, trajfm::derive_seed(0, 0xe7a1, k as u64)).unwrap();
        for &i in &m.masked {
            let prev = m.visible.iter().rev().find(|&&v| v < i).copied().unwrap();
            let next = m.visible.iter().find(|&&v| v > i).copied();
            let p = match next {
                Some(nx) => {
                    let f = (i - prev) as f64 / (nx - prev) as f64;
                    let (a, b) = (input.points[prev].pos, input.points[nx].pos);
                    trajfm::GeoPoint { lng: a.lng + (b.lng - a.lng) * f, lat: a.lat + (b.lat - a.lat) * f }
                }
                None => input.points[prev].pos,
            };
            sum += trajfm::haversine_m(&p, &input.points[i].pos);
            n += 1;
        }
    }
    sum / n as f64
}
