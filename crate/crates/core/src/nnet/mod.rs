//! Point-wise segmentation network with an input transform, shared per-point MLPs,
//! max-pooled global features and a swappable classification head.
//!
//! Everything is generic over [`Real`] so that training runs in `f32` while gradient
//! checks can run the identical code in `f64`.

mod checkpoint;
mod loss;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use loss::{
    estimate_sigma, knn_lists, loss_terms, objective, sample_pairs, segment_loss, smoothness_loss,
    total_loss, training_pairs, transform_reg, LossTerms, LossWeights, TermWeights, SIGMA_MIN,
};
pub use network::{forward, Logits};

pub(crate) use loss::{loss_and_grad_from_cache, Supervision};
pub(crate) use network::{backward, forward_cached, positions_matrix};

use std::fmt::Debug;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floating point types the network can be evaluated in.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Send
    + Sync
    + Debug
    + 'static
{
}

impl<T> Real for T where
    T: num_traits::Float
        + num_traits::FromPrimitive
        + num_traits::NumAssign
        + ndarray::LinalgScalar
        + ndarray::ScalarOperand
        + Send
        + Sync
        + Debug
        + 'static
{
}

#[inline]
pub(crate) fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("representable constant")
}

pub const TNET_HIDDEN: usize = 32;
pub const TNET_FEATURES: usize = 64;
pub const LOCAL_FEATURES: usize = 64;
pub const GLOBAL_FEATURES: usize = 128;
pub const SEG_HIDDEN: usize = 128;

/// Layer names in canonical (checkpoint and iteration) order.
pub const LAYER_NAMES: [&str; 9] = [
    "tnet.conv1", "tnet.conv2", "tnet.fc1", "tnet.fc2", "conv1", "conv2", "conv3", "seg", "head",
];

/// A fully connected layer applied row-wise: `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `fan_in x fan_out`
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    /// Glorot-uniform weights, zero bias.
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || real(rng.gen_range(-a..=a)));
        Self {
            w,
            b: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            w: self.w.mapv(|v| real(v.to_f64().expect("finite"))),
            b: self.b.mapv(|v| real(v.to_f64().expect("finite"))),
        }
    }
}

/// All trainable tensors of the segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    /// Input-transform branch: per-point 3 -> 32 -> 64, max-pool, 64 -> 32 -> 9.
    pub tnet: [Dense<T>; 4],
    /// Per-point 3 -> 64 -> 64 (local features) -> 128 (pooled into the global feature).
    pub backbone: [Dense<T>; 3],
    /// [local 64 | global 128] -> 128 per point.
    pub seg: Dense<T>,
    /// 128 -> C logits. The only layer replaced when the class count changes.
    pub head: Dense<T>,
    num_classes: usize,
    rng_seed: u64,
}

/// Architecture shapes `(fan_in, fan_out)` in canonical layer order.
pub fn layer_shapes(num_classes: usize) -> [(usize, usize); 9] {
    [
        (3, TNET_HIDDEN),
        (TNET_HIDDEN, TNET_FEATURES),
        (TNET_FEATURES, TNET_HIDDEN),
        (TNET_HIDDEN, 9),
        (3, LOCAL_FEATURES),
        (LOCAL_FEATURES, LOCAL_FEATURES),
        (LOCAL_FEATURES, GLOBAL_FEATURES),
        (LOCAL_FEATURES + GLOBAL_FEATURES, SEG_HIDDEN),
        (SEG_HIDDEN, num_classes),
    ]
}

fn head_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl<T: Real> ModelParams<T> {
    /// Builds a network with every parameter zero. Used for gradient accumulators.
    pub fn zeros(num_classes: usize) -> Self {
        let s = layer_shapes(num_classes);
        let d = |i: usize| Dense::zeros(s[i].0, s[i].1);
        Self {
            tnet: [d(0), d(1), d(2), d(3)],
            backbone: [d(4), d(5), d(6)],
            seg: d(7),
            head: d(8),
            num_classes,
            rng_seed: 0,
        }
    }

    fn random(num_classes: usize, rng_seed: u64) -> Self {
        let s = layer_shapes(num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut d = |i: usize| Dense::glorot(s[i].0, s[i].1, &mut rng);
        let tnet = [d(0), d(1), d(2), d(3)];
        let backbone = [d(4), d(5), d(6)];
        let seg = d(7);
        Self {
            tnet,
            backbone,
            seg,
            head: Dense::glorot(s[8].0, s[8].1, &mut head_rng(rng_seed)),
            num_classes,
            rng_seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn layers(&self) -> [&Dense<T>; 9] {
        let [t0, t1, t2, t3] = &self.tnet;
        let [b0, b1, b2] = &self.backbone;
        [t0, t1, t2, t3, b0, b1, b2, &self.seg, &self.head]
    }

    pub fn layers_mut(&mut self) -> [&mut Dense<T>; 9] {
        let [t0, t1, t2, t3] = &mut self.tnet;
        let [b0, b1, b2] = &mut self.backbone;
        [t0, t1, t2, t3, b0, b1, b2, &mut self.seg, &mut self.head]
    }

    /// Every tensor as a flat slice, weights before biases, in canonical layer order.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                [
                    l.w.as_slice().expect("standard layout"),
                    l.b.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| {
                let Dense { w, b } = l;
                [
                    w.as_slice_mut().expect("standard layout"),
                    b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Converts every parameter to another float type.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tnet: [self.tnet[0].cast(), self.tnet[1].cast(), self.tnet[2].cast(), self.tnet[3].cast()],
            backbone: [self.backbone[0].cast(), self.backbone[1].cast(), self.backbone[2].cast()],
            seg: self.seg.cast(),
            head: self.head.cast(),
            num_classes: self.num_classes,
            rng_seed: self.rng_seed,
        }
    }

    pub(crate) fn from_parts(
        tnet: [Dense<T>; 4],
        backbone: [Dense<T>; 3],
        seg: Dense<T>,
        head: Dense<T>,
        rng_seed: u64,
    ) -> Self {
        let num_classes = head.fan_out();
        Self {
            tnet,
            backbone,
            seg,
            head,
            num_classes,
            rng_seed,
        }
    }
}

impl ModelParams<f32> {
    /// Little-endian bytes of every parameter in canonical order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Initializes a full network (when `params` is `None`) or keeps every layer but the head and
/// re-initializes the head with `num_classes` outputs.
///
/// Weights are Glorot-uniform, biases zero. The head draws from its own stream of `rng_seed`,
/// so the same seed always yields the same head regardless of the path taken.
pub fn init_or_resize_head(
    params: Option<&ModelParams<f32>>,
    num_classes: usize,
    rng_seed: u64,
) -> Result<ModelParams<f32>> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    Ok(match params {
        None => ModelParams::random(num_classes, rng_seed),
        Some(p) => {
            let mut out = p.clone();
            out.head = Dense::glorot(SEG_HIDDEN, num_classes, &mut head_rng(rng_seed));
            out.num_classes = num_classes;
            out.rng_seed = rng_seed;
            out
        }
    })
}
