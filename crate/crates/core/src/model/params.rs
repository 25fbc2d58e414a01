//! Parameter containers. The same types hold gradients and optimizer moments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    /// Uniform in `[-1/sqrt(n_in), 1/sqrt(n_in)]`, zero bias.
    pub fn init<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let mut lin = Self::zeros(n_in, n_out);
        let limit = 1.0 / (n_in as f64).sqrt();
        lin.w.iter_mut().for_each(|w| *w = rng.random_range(-limit..=limit));
        lin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BlockParams {
    fn init<R: Rng>(d: usize, ffn: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNormParams::identity(d),
            wq: Linear::init(d, d, rng),
            wk: Linear::init(d, d, rng),
            wv: Linear::init(d, d, rng),
            wo: Linear::init(d, d, rng),
            ln2: LayerNormParams::identity(d),
            fc1: Linear::init(d, ffn, rng),
            fc2: Linear::init(ffn, d, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.n_in, l.n_out);
        let zn = |n: &LayerNormParams| LayerNormParams {
            gamma: vec![0.0; n.gamma.len()],
            beta: vec![0.0; n.beta.len()],
        };
        Self {
            ln1: zn(&self.ln1),
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            ln2: zn(&self.ln2),
            fc1: z(&self.fc1),
            fc2: z(&self.fc2),
        }
    }
}

/// Every learned tensor of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Kernel-size-1 convolution over `(x, y)`: row-major `d x 2`, no bias.
    pub spatial_w: Vec<f64>,
    pub temporal_w: Vec<f64>,
    pub temporal_b: Vec<f64>,
    pub mask_token: Vec<f64>,
    pub encoder: Vec<BlockParams>,
    pub decoder: Vec<BlockParams>,
    /// `d -> 2` output projection.
    pub out: Linear,
}

macro_rules! visit_block {
    ($blk:expr, $prefix:expr, $f:expr) => {{
        let p = $prefix;
        $f(&format!("{p}.ln1.gamma"), &$blk.ln1.gamma);
        $f(&format!("{p}.ln1.beta"), &$blk.ln1.beta);
        for (name, lin) in [("wq", &$blk.wq), ("wk", &$blk.wk), ("wv", &$blk.wv), ("wo", &$blk.wo)] {
            $f(&format!("{p}.{name}.w"), &lin.w);
            $f(&format!("{p}.{name}.b"), &lin.b);
        }
        $f(&format!("{p}.ln2.gamma"), &$blk.ln2.gamma);
        $f(&format!("{p}.ln2.beta"), &$blk.ln2.beta);
        $f(&format!("{p}.fc1.w"), &$blk.fc1.w);
        $f(&format!("{p}.fc1.b"), &$blk.fc1.b);
        $f(&format!("{p}.fc2.w"), &$blk.fc2.w);
        $f(&format!("{p}.fc2.b"), &$blk.fc2.b);
    }};
}

macro_rules! visit_block_mut {
    ($blk:expr, $prefix:expr, $f:expr) => {{
        let p = $prefix;
        $f(&format!("{p}.ln1.gamma"), &mut $blk.ln1.gamma);
        $f(&format!("{p}.ln1.beta"), &mut $blk.ln1.beta);
        for (name, lin) in [
            ("wq", &mut $blk.wq),
            ("wk", &mut $blk.wk),
            ("wv", &mut $blk.wv),
            ("wo", &mut $blk.wo),
        ] {
            $f(&format!("{p}.{name}.w"), &mut lin.w);
            $f(&format!("{p}.{name}.b"), &mut lin.b);
        }
        $f(&format!("{p}.ln2.gamma"), &mut $blk.ln2.gamma);
        $f(&format!("{p}.ln2.beta"), &mut $blk.ln2.beta);
        $f(&format!("{p}.fc1.w"), &mut $blk.fc1.w);
        $f(&format!("{p}.fc1.b"), &mut $blk.fc1.b);
        $f(&format!("{p}.fc2.w"), &mut $blk.fc2.w);
        $f(&format!("{p}.fc2.b"), &mut $blk.fc2.b);
    }};
}

impl ModelParams {
    /// Seeded initialization: uniform `1/sqrt(fan_in)` for linear maps, zero
    /// biases except the temporal one (uniform in `[-1, 1]`), unit LayerNorm
    /// gains, `N(0, 0.02)` for the mask token.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let ffn = config.ffn_dim();
        let spatial = Linear::init(2, d, &mut rng);
        let temporal = Linear::init(1, d, &mut rng);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mask_token = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let encoder = (0..config.enc_layers).map(|_| BlockParams::init(d, ffn, &mut rng)).collect();
        let decoder = (0..config.dec_layers).map(|_| BlockParams::init(d, ffn, &mut rng)).collect();
        let out = Linear::init(d, 2, &mut rng);
        // A constant per-token offset keeps LayerNorm close to linear in the
        // coordinate part of the embedding.
        let temporal_b = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            spatial_w: spatial.w,
            temporal_w: temporal.w,
            temporal_b,
            mask_token,
            encoder,
            decoder,
            out,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        Self {
            spatial_w: z(&self.spatial_w),
            temporal_w: z(&self.temporal_w),
            temporal_b: z(&self.temporal_b),
            mask_token: z(&self.mask_token),
            encoder: self.encoder.iter().map(BlockParams::zeros_like).collect(),
            decoder: self.decoder.iter().map(BlockParams::zeros_like).collect(),
            out: Linear::zeros(self.out.n_in, self.out.n_out),
        }
    }

    /// Visits every tensor in a fixed order with a stable name.
    pub fn for_each(&self, f: &mut dyn FnMut(&str, &Vec<f64>)) {
        f("spatial_w", &self.spatial_w);
        f("temporal_w", &self.temporal_w);
        f("temporal_b", &self.temporal_b);
        f("mask_token", &self.mask_token);
        for (i, blk) in self.encoder.iter().enumerate() {
            visit_block!(blk, format!("encoder.{i}"), f);
        }
        for (i, blk) in self.decoder.iter().enumerate() {
            visit_block!(blk, format!("decoder.{i}"), f);
        }
        f("out.w", &self.out.w);
        f("out.b", &self.out.b);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        f("spatial_w", &mut self.spatial_w);
        f("temporal_w", &mut self.temporal_w);
        f("temporal_b", &mut self.temporal_b);
        f("mask_token", &mut self.mask_token);
        for (i, blk) in self.encoder.iter_mut().enumerate() {
            visit_block_mut!(blk, format!("encoder.{i}"), f);
        }
        for (i, blk) in self.decoder.iter_mut().enumerate() {
            visit_block_mut!(blk, format!("decoder.{i}"), f);
        }
        f("out.w", &mut self.out.w);
        f("out.b", &mut self.out.b);
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        self.for_each(&mut |_, t| out.extend_from_slice(t));
        out
    }

    /// Overwrites every tensor from a flat buffer produced by [`Self::to_flat`].
    pub fn copy_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.count(), "flat parameter length mismatch");
        let mut offset = 0;
        self.for_each_mut(&mut |_, t| {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.for_each_mut(&mut |_, t| {
            for v in t.iter_mut() {
                *v += flat[offset];
                offset += 1;
            }
        });
    }

    pub fn scale(&mut self, k: f64) {
        self.for_each_mut(&mut |_, t| t.iter_mut().for_each(|v| *v *= k));
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}
