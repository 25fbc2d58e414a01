use trajfm::model::block::{attention_logits, SeqShape};
use trajfm::model::network::{encoder_forward, tokenize};
use trajfm::model::{ModelConfig, ModelState};
use trajfm::{GeoPoint, TrajPoint};

fn logits(state: &ModelState, x: &[f64], positions: &[f64], layer: usize, h: usize) -> Vec<f64> {
    let valid = vec![true; positions.len()];
    let shape = SeqShape { rows: positions.len(), d: state.config.d_model, heads: state.config.heads, positions, valid: &valid };
    attention_logits(&state.params.encoder[layer], x, &shape, h)
}

#[test]
fn logits_depend_only_on_position_differences() {
    let state = ModelState::init(ModelConfig::desk()).unwrap();
    let d = state.config.d_model;
    let row: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).cos()).collect();
    let base = [0.0, 1.0, 2.0, 5.0, 13.0, 40.0, 63.0];
    let x: Vec<f64> = row.iter().copied().cycle().take(base.len() * d).collect();
    for shift in [1.0, 7.0, 31.0, 250.0] {
        let moved: Vec<f64> = base.iter().map(|p| p + shift).collect();
        for layer in 0..state.config.enc_layers {
            for h in 0..state.config.heads {
                let a = logits(&state, &x, &base, layer, h);
                let b = logits(&state, &x, &moved, layer, h);
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() < 1e-9, "shift {shift}: {u} vs {v}");
                }
            }
        }
    }
}

#[test]
fn logits_change_with_relative_offsets() {
    let state = ModelState::init(ModelConfig::desk()).unwrap();
    let d = state.config.d_model;
    let row: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).cos()).collect();
    let x: Vec<f64> = row.iter().copied().cycle().take(3 * d).collect();
    let a = logits(&state, &x, &[0.0, 1.0, 2.0], 0, 0);
    let b = logits(&state, &x, &[0.0, 1.0, 9.0], 0, 0);
    assert!(a.iter().zip(&b).any(|(u, v)| (u - v).abs() > 1e-6));
}

#[test]
fn encoder_output_invariant_to_uniform_index_shift() {
    let state = ModelState::init(ModelConfig::desk()).unwrap();
    let pts: Vec<TrajPoint> = (0..9)
        .map(|i| TrajPoint::new(GeoPoint { lng: 116.3 + 1e-4 * i as f64, lat: 39.9 + 5e-5 * (i * i) as f64 }, i as f64 * 3.0))
        .collect();
    let pos: Vec<usize> = (0..9).map(|i| i * 2).collect();
    let shifted: Vec<usize> = pos.iter().map(|p| p + 17).collect();
    let a = encoder_forward(&state, &pts, &pos).out;
    let b = encoder_forward(&state, &pts, &shifted).out;
    for (u, v) in a.data.iter().zip(&b.data) {
        assert!((u - v).abs() < 1e-9);
    }
    assert_eq!(tokenize(&state, &pts, &pos).len(), 9);
}
