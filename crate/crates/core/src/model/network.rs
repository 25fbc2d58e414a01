//! Forward pass, loss and exact gradients of the encoder-decoder.

use rayon::prelude::*;

use super::block::{block_backward, block_forward, BlockCache, SeqShape};
use super::ops::linear_backward;
use super::ops::linear_forward;
use super::params::ModelParams;
use super::{ModelError, ModelState};
use crate::geo::GeoPoint;
use crate::stm::MaskedTrajectory;
use crate::trajectory::TrajPoint;

/// A sequence of `d`-dimensional token vectors with positions and a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub d: usize,
    /// Row-major `len x d`.
    pub data: Vec<f64>,
    /// Rotary position of each row (original trajectory index).
    pub positions: Vec<f64>,
    pub valid: Vec<bool>,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Appends zero rows marked invalid until the sequence has `len` rows.
    pub fn pad_to(&mut self, len: usize) {
        while self.len() < len {
            self.data.extend(std::iter::repeat_n(0.0, self.d));
            let next = self.positions.last().map_or(0.0, |p| p + 1.0);
            self.positions.push(next);
            self.valid.push(false);
        }
    }

    fn shape<'a>(&'a self, heads: usize) -> SeqShape<'a> {
        SeqShape {
            rows: self.len(),
            d: self.d,
            heads,
            positions: &self.positions,
            valid: &self.valid,
        }
    }
}

/// Offsets from `anchor` in degrees times `scale`.
pub fn normalized_offset(p: &GeoPoint, anchor: &GeoPoint, scale: f64) -> [f64; 2] {
    [(p.lng - anchor.lng) * scale, (p.lat - anchor.lat) * scale]
}

/// Normalized offsets of every point of the base trajectory (the loss targets).
pub fn normalized_targets(masked: &MaskedTrajectory, scale: f64) -> Vec<[f64; 2]> {
    let anchor = masked.base.points[0].pos;
    masked
        .base
        .points
        .iter()
        .map(|p| normalized_offset(&p.pos, &anchor, scale))
        .collect()
}

/// Maps model outputs back to WGS84 around `anchor`.
pub fn denormalize(offsets: &[[f64; 2]], anchor: &GeoPoint, scale: f64) -> Vec<GeoPoint> {
    offsets
        .iter()
        .map(|o| GeoPoint {
            lng: anchor.lng + o[0] / scale,
            lat: anchor.lat + o[1] / scale,
        })
        .collect()
}

struct TokenInput {
    coords: Vec<[f64; 2]>,
    dts: Vec<f64>,
    positions: Vec<f64>,
}

fn token_input(state: &ModelState, points: &[TrajPoint], positions: &[usize]) -> TokenInput {
    let cfg = &state.config;
    let anchor = points[0].pos;
    let coords = points
        .iter()
        .map(|p| normalized_offset(&p.pos, &anchor, cfg.coord_scale))
        .collect();
    let dts = points
        .iter()
        .enumerate()
        .map(|(j, p)| {
            if j == 0 {
                0.0
            } else {
                (p.t - points[j - 1].t).clamp(0.0, cfg.max_dt_s) / cfg.max_dt_s
            }
        })
        .collect();
    TokenInput {
        coords,
        dts,
        positions: positions.iter().map(|&i| i as f64).collect(),
    }
}

fn embed(params: &ModelParams, input: &TokenInput, d: usize) -> Vec<f64> {
    let mut h = vec![0.0; input.coords.len() * d];
    for (t, (c, &dt)) in input.coords.iter().zip(&input.dts).enumerate() {
        let row = &mut h[t * d..(t + 1) * d];
        for (i, v) in row.iter_mut().enumerate() {
            *v = params.spatial_w[2 * i] * c[0]
                + params.spatial_w[2 * i + 1] * c[1]
                + params.temporal_w[i] * dt
                + params.temporal_b[i];
        }
    }
    h
}

/// Embeds points: offsets from the first point through the spatial
/// projection plus `W_t * dt + b_t`, with `dt` the gap to the previous point
/// as a fraction of `max_dt_s` (0 for the first). `positions` are the points' original indices.
pub fn tokenize(state: &ModelState, points: &[TrajPoint], positions: &[usize]) -> EmbeddingSequence {
    assert_eq!(points.len(), positions.len(), "one position per point");
    let input = token_input(state, points, positions);
    let d = state.config.d_model;
    EmbeddingSequence {
        d,
        data: embed(&state.params, &input, d),
        positions: input.positions,
        valid: vec![true; points.len()],
    }
}

fn run_blocks(
    blocks: &[super::params::BlockParams],
    seq: &EmbeddingSequence,
    heads: usize,
) -> (EmbeddingSequence, Vec<BlockCache>) {
    let shape = seq.shape(heads);
    let mut x = seq.data.clone();
    let mut caches = Vec::with_capacity(blocks.len());
    for blk in blocks {
        let (y, cache) = block_forward(blk, &x, &shape);
        caches.push(cache);
        x = y;
    }
    let out = EmbeddingSequence {
        data: x,
        ..seq.clone()
    };
    (out, caches)
}

/// Runs the encoder blocks over an already tokenized sequence.
pub fn encode_sequence(state: &ModelState, seq: &EmbeddingSequence) -> EmbeddingSequence {
    run_blocks(&state.params.encoder, seq, state.config.heads).0
}

/// Encodes the visible points of `masked`; one output row per visible point.
pub fn encode(state: &ModelState, masked: &MaskedTrajectory) -> EmbeddingSequence {
    let seq = tokenize(state, &masked.visible_points(), &masked.visible);
    encode_sequence(state, &seq)
}

/// Places encoder rows at their original indices and fills hidden slots
/// with the mask token. Output has one row per base point.
pub fn reorder_merge(
    state: &ModelState,
    z_enc: &EmbeddingSequence,
    masked: &MaskedTrajectory,
) -> Result<EmbeddingSequence, ModelError> {
    let n = masked.len();
    let d = state.config.d_model;
    let valid_rows: Vec<usize> = (0..z_enc.len()).filter(|&j| z_enc.valid[j]).collect();
    if valid_rows.len() != masked.visible.len() {
        return Err(ModelError::IndexMapMismatch(format!(
            "{} encoded rows for {} visible points",
            valid_rows.len(),
            masked.visible.len()
        )));
    }
    let mut filled = vec![false; n];
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        data[i * d..(i + 1) * d].copy_from_slice(&state.params.mask_token);
    }
    for (&j, &i) in valid_rows.iter().zip(&masked.visible) {
        if i >= n || filled[i] {
            return Err(ModelError::IndexMapMismatch(format!("visible index {i} invalid for length {n}")));
        }
        filled[i] = true;
        data[i * d..(i + 1) * d].copy_from_slice(z_enc.row(j));
    }
    if masked.masked.iter().any(|&i| i >= n || filled[i]) {
        return Err(ModelError::IndexMapMismatch("hidden and visible index sets overlap".into()));
    }
    Ok(EmbeddingSequence {
        d,
        data,
        positions: (0..n).map(|i| i as f64).collect(),
        valid: vec![true; n],
    })
}

/// Decoder blocks followed by the output projection: one normalized
/// `(x, y)` offset per row (zero for padding rows).
pub fn decode(state: &ModelState, z_dec: &EmbeddingSequence) -> Vec<[f64; 2]> {
    let (h, _) = run_blocks(&state.params.decoder, z_dec, state.config.heads);
    project_out(state, &h)
}

fn project_out(state: &ModelState, h: &EmbeddingSequence) -> Vec<[f64; 2]> {
    let flat = linear_forward(&state.params.out, &h.data, h.len());
    flat.chunks_exact(2)
        .zip(&h.valid)
        .map(|(c, &ok)| if ok { [c[0], c[1]] } else { [0.0, 0.0] })
        .collect()
}

/// Mean over hidden indices of the squared error of normalized offsets.
pub fn masked_loss(pred: &[[f64; 2]], masked: &MaskedTrajectory, scale: f64) -> f64 {
    let targets = normalized_targets(masked, scale);
    masked_loss_against(pred, &targets, &masked.masked)
}

pub fn masked_loss_against(pred: &[[f64; 2]], targets: &[[f64; 2]], hidden: &[usize]) -> f64 {
    let sum: f64 = hidden
        .iter()
        .map(|&i| {
            let (dx, dy) = (pred[i][0] - targets[i][0], pred[i][1] - targets[i][1]);
            dx * dx + dy * dy
        })
        .sum();
    sum / hidden.len() as f64
}

/// Encoder activations kept for backpropagation.
pub struct EncoderTrace {
    input: TokenInput,
    seq: EmbeddingSequence,
    caches: Vec<BlockCache>,
    pub out: EmbeddingSequence,
}

/// Tokenizes `points` at `positions` and runs the encoder, keeping caches.
pub fn encoder_forward(state: &ModelState, points: &[TrajPoint], positions: &[usize]) -> EncoderTrace {
    let input = token_input(state, points, positions);
    let d = state.config.d_model;
    let seq = EmbeddingSequence {
        d,
        data: embed(&state.params, &input, d),
        positions: input.positions.clone(),
        valid: vec![true; input.coords.len()],
    };
    let (out, caches) = run_blocks(&state.params.encoder, &seq, state.config.heads);
    EncoderTrace { input, seq, caches, out }
}

/// Accumulates encoder and embedding gradients for upstream gradient `dz`.
pub fn encoder_backward(state: &ModelState, trace: &EncoderTrace, dz: &[f64], grad: &mut ModelParams) {
    let p = &state.params;
    let shape = trace.seq.shape(state.config.heads);
    let mut dz = dz.to_vec();
    for (blk, (g, cache)) in p.encoder.iter().zip(grad.encoder.iter_mut().zip(&trace.caches)).rev() {
        dz = block_backward(blk, g, cache, &dz, &shape);
    }
    embed_backward(grad, &trace.input, &dz, state.config.d_model);
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTrace {
    enc: EncoderTrace,
    dec_seq: EmbeddingSequence,
    dec_caches: Vec<BlockCache>,
    dec_out: Vec<f64>,
    visible: Vec<usize>,
    hidden: Vec<usize>,
    pub pred: Vec<[f64; 2]>,
}

/// Full forward pass for one masked trajectory.
pub fn forward(state: &ModelState, masked: &MaskedTrajectory) -> ForwardTrace {
    let enc = encoder_forward(state, &masked.visible_points(), &masked.visible);
    let dec_seq =
        reorder_merge(state, &enc.out, masked).expect("masked trajectory satisfies the partition invariant");
    let (dec_h, dec_caches) = run_blocks(&state.params.decoder, &dec_seq, state.config.heads);
    let pred = project_out(state, &dec_h);
    ForwardTrace {
        enc,
        dec_seq,
        dec_caches,
        dec_out: dec_h.data,
        visible: masked.visible.clone(),
        hidden: masked.masked.clone(),
        pred,
    }
}

/// Backpropagates `d loss / d pred` into parameter gradients.
pub fn backward(state: &ModelState, trace: &ForwardTrace, dpred: &[[f64; 2]]) -> ModelParams {
    let p = &state.params;
    let cfg = &state.config;
    let d = cfg.d_model;
    let mut grad = p.zeros_like();

    let dflat: Vec<f64> = dpred.iter().flat_map(|g| [g[0], g[1]]).collect();
    let n = trace.dec_seq.len();
    let mut dh = linear_backward(&p.out, &mut grad.out, &trace.dec_out, &dflat, n);

    let dec_shape = trace.dec_seq.shape(cfg.heads);
    for (blk, (g, cache)) in p.decoder.iter().zip(grad.decoder.iter_mut().zip(&trace.dec_caches)).rev() {
        dh = block_backward(blk, g, cache, &dh, &dec_shape);
    }

    // Hidden rows feed the mask token, visible rows the encoder.
    for &i in &trace.hidden {
        for (gm, v) in grad.mask_token.iter_mut().zip(&dh[i * d..(i + 1) * d]) {
            *gm += v;
        }
    }
    let mut dz = vec![0.0; trace.visible.len() * d];
    for (j, &i) in trace.visible.iter().enumerate() {
        dz[j * d..(j + 1) * d].copy_from_slice(&dh[i * d..(i + 1) * d]);
    }
    encoder_backward(state, &trace.enc, &dz, &mut grad);
    grad
}

fn embed_backward(grad: &mut ModelParams, input: &TokenInput, dh: &[f64], d: usize) {
    for (t, (c, &dt)) in input.coords.iter().zip(&input.dts).enumerate() {
        let row = &dh[t * d..(t + 1) * d];
        for (i, &g) in row.iter().enumerate() {
            grad.spatial_w[2 * i] += g * c[0];
            grad.spatial_w[2 * i + 1] += g * c[1];
            grad.temporal_w[i] += g * dt;
            grad.temporal_b[i] += g;
        }
    }
}

/// Loss and parameter gradient for a single masked trajectory.
pub fn sample_gradient(state: &ModelState, masked: &MaskedTrajectory) -> (f64, ModelParams) {
    let trace = forward(state, masked);
    let targets = normalized_targets(masked, state.config.coord_scale);
    let loss = masked_loss_against(&trace.pred, &targets, &trace.hidden);
    let k = 2.0 / trace.hidden.len() as f64;
    let mut dpred = vec![[0.0; 2]; trace.pred.len()];
    for &i in &trace.hidden {
        dpred[i] = [
            k * (trace.pred[i][0] - targets[i][0]),
            k * (trace.pred[i][1] - targets[i][1]),
        ];
    }
    (loss, backward(state, &trace, &dpred))
}

/// Mean masked loss over `batch` and its exact gradient. Per-sample work
/// runs in parallel; the reduction is sequential in batch order, so the
/// result is bit-identical for any thread count.
pub fn gradients(state: &ModelState, batch: &[MaskedTrajectory]) -> (f64, ModelParams) {
    let per_sample: Vec<(f64, ModelParams)> = batch.par_iter().map(|m| sample_gradient(state, m)).collect();
    let mut total = state.params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        total.add_assign(g);
    }
    let k = 1.0 / batch.len().max(1) as f64;
    total.scale(k);
    (loss * k, total)
}

/// Mean masked loss over `batch` without gradients.
pub fn batch_loss(state: &ModelState, batch: &[MaskedTrajectory]) -> f64 {
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|m| masked_loss(&forward(state, m).pred, m, state.config.coord_scale))
        .collect();
    losses.iter().sum::<f64>() / batch.len().max(1) as f64
}

/// Predicted positions for every index of `masked`, in WGS84.
pub fn reconstruct(state: &ModelState, masked: &MaskedTrajectory) -> Vec<GeoPoint> {
    let pred = forward(state, masked).pred;
    denormalize(&pred, &masked.base.points[0].pos, state.config.coord_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{block, ModelConfig};
    use crate::stm::{mask_random, MaskedTrajectory};
    use crate::trajectory::Trajectory;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_mult: 2,
            coord_scale: 1.0,
            ..ModelConfig::desk()
        }
    }

    fn traj(n: usize) -> Trajectory {
        let pts = (0..n)
            .map(|i| {
                let f = i as f64;
                TrajPoint::new(
                    GeoPoint {
                        lng: 116.3 + 0.3 * (f * 0.4).sin(),
                        lat: 39.9 + 0.1 * f,
                    },
                    1000.0 + 2.0 * f,
                )
            })
            .collect();
        Trajectory::new("t", pts).unwrap()
    }

    #[test]
    fn tokenize_anchor_and_zero_params() {
        let mut state = ModelState::init(tiny_config()).unwrap();
        let t = traj(5);
        let pos: Vec<usize> = (0..5).collect();
        state.params.temporal_b.iter_mut().for_each(|v| *v = 0.0);
        state.params.temporal_w.iter_mut().for_each(|v| *v = 0.0);
        let seq = tokenize(&state, &t.points, &pos);
        // The first point normalizes to (0, 0) and has dt = 0.
        assert!(seq.row(0).iter().all(|&v| v == 0.0));

        let mut zero = state.clone();
        zero.params.spatial_w.iter_mut().for_each(|v| *v = 0.0);
        assert!(tokenize(&zero, &t.points, &pos).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tokenize_is_additive() {
        let state = ModelState::init(tiny_config()).unwrap();
        let t = traj(6);
        let pos: Vec<usize> = (0..6).collect();
        let full = tokenize(&state, &t.points, &pos);
        let mut spatial_only = state.clone();
        spatial_only.params.temporal_w.iter_mut().for_each(|v| *v = 0.0);
        spatial_only.params.temporal_b.iter_mut().for_each(|v| *v = 0.0);
        let mut temporal_only = state.clone();
        temporal_only.params.spatial_w.iter_mut().for_each(|v| *v = 0.0);
        let a = tokenize(&spatial_only, &t.points, &pos);
        let b = tokenize(&temporal_only, &t.points, &pos);
        for ((f, x), y) in full.data.iter().zip(&a.data).zip(&b.data) {
            assert!((f - (x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let state = ModelState::init(tiny_config()).unwrap();
        let blk = &state.params.encoder[0];
        let x = vec![0.3, -0.1, 0.7, 0.2, -0.5, 0.9, 0.0, 0.4];
        let shape = SeqShape { rows: 1, d: 8, heads: 2, positions: &[3.0], valid: &[true] };
        let (_, cache) = block::block_forward(blk, &x, &shape);
        assert_eq!(cache.attention(0, 1), &[1.0]);
        assert_eq!(cache.attention(1, 1), &[1.0]);
    }

    #[test]
    fn attention_rows_sum_to_one_over_valid_keys() {
        let state = ModelState::init(tiny_config()).unwrap();
        let mut seq = tokenize(&state, &traj(5).points, &[0, 1, 2, 3, 4]);
        seq.pad_to(8);
        let shape = seq.shape(2);
        let (_, cache) = block::block_forward(&state.params.encoder[0], &seq.data, &shape);
        for h in 0..2 {
            let a = cache.attention(h, 8);
            for i in 0..8 {
                let row = &a[i * 8..(i + 1) * 8];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[5..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn padding_does_not_change_valid_rows() {
        let state = ModelState::init(tiny_config()).unwrap();
        let seq = tokenize(&state, &traj(5).points, &[0, 2, 3, 6, 7]);
        let plain = encode_sequence(&state, &seq);
        let mut padded = seq.clone();
        padded.pad_to(9);
        let out = encode_sequence(&state, &padded);
        for i in 0..5 {
            for (a, b) in plain.row(i).iter().zip(out.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for i in 5..9 {
            assert!(out.row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoder_ignores_hidden_values() {
        let state = ModelState::init(tiny_config()).unwrap();
        let t = traj(10);
        let m = mask_random(&t, 0.5, 4).unwrap();
        let a = encode(&state, &m);
        let mut moved = t.clone();
        for &i in &m.masked {
            moved.points[i].pos.lng += 0.5;
        }
        let m2 = MaskedTrajectory::new(moved, m.masked.clone()).unwrap();
        assert_eq!(a, encode(&state, &m2));
        assert_eq!(a.len(), m.visible.len());
    }

    #[test]
    fn reorder_places_rows() {
        let state = ModelState::init(tiny_config()).unwrap();
        let t = traj(4);
        let m = MaskedTrajectory::new(t, vec![1]).unwrap();
        let z = encode(&state, &m);
        let merged = reorder_merge(&state, &z, &m).unwrap();
        assert_eq!(merged.len(), 4);
        assert_eq!(merged.row(0), z.row(0));
        assert_eq!(merged.row(1), &state.params.mask_token[..]);
        assert_eq!(merged.row(2), z.row(1));
        assert_eq!(merged.row(3), z.row(2));

        let mut short = z.clone();
        short.data.truncate(2 * 8);
        short.positions.truncate(2);
        short.valid.truncate(2);
        assert!(matches!(reorder_merge(&state, &short, &m), Err(ModelError::IndexMapMismatch(_))));
    }

    #[test]
    fn reorder_is_a_placement() {
        // Permuting encoder rows together with the index map gives the same merge.
        let state = ModelState::init(tiny_config()).unwrap();
        let t = traj(6);
        let m = MaskedTrajectory::new(t, vec![2, 4]).unwrap();
        let z = encode(&state, &m);
        let merged = reorder_merge(&state, &z, &m).unwrap();
        let perm = [3usize, 0, 2, 1];
        let mut manual = vec![0.0; 6 * 8];
        for i in 0..6 {
            manual[i * 8..(i + 1) * 8].copy_from_slice(&state.params.mask_token);
        }
        for &j in &perm {
            let i = m.visible[j];
            manual[i * 8..(i + 1) * 8].copy_from_slice(z.row(j));
        }
        assert_eq!(merged.data, manual);
    }

    #[test]
    fn decode_affine_degenerate() {
        let mut state = ModelState::init(tiny_config()).unwrap();
        state.params.out.w.iter_mut().for_each(|v| *v = 0.0);
        state.params.out.b = vec![0.001, 0.002];
        let m = mask_random(&traj(7), 0.5, 1).unwrap();
        let z = reorder_merge(&state, &encode(&state, &m), &m).unwrap();
        let pred = decode(&state, &z);
        assert_eq!(pred.len(), 7);
        assert!(pred.iter().all(|p| *p == [0.001, 0.002]));
        let anchor = m.base.points[0].pos;
        assert_eq!(denormalize(&[[0.0, 0.0]], &anchor, 1.0)[0], anchor);
    }

    #[test]
    fn loss_cases() {
        let t = traj(6);
        let m = MaskedTrajectory::new(t, vec![3]).unwrap();
        let targets = normalized_targets(&m, 1.0);
        assert_eq!(masked_loss(&targets, &m, 1.0), 0.0);
        let mut pred = targets.clone();
        pred[3][0] += 3.0;
        pred[3][1] += 4.0;
        assert!((masked_loss(&pred, &m, 1.0) - 25.0).abs() < 1e-9);
        pred[1][0] += 100.0;
        assert!((masked_loss(&pred, &m, 1.0) - 25.0).abs() < 1e-9);
    }

    #[test]
    fn forward_is_deterministic() {
        let state = ModelState::init(tiny_config()).unwrap();
        let m = mask_random(&traj(12), 0.5, 2).unwrap();
        assert_eq!(forward(&state, &m).pred, forward(&state, &m).pred);
    }
}
