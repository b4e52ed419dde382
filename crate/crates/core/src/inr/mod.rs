//! Coordinate networks: hash-grid encoding feeding a small ReLU MLP.
//!
//! Two such networks drive the reconstruction: one maps (x, y) to a complex
//! image value (two outputs, scaled by the data normalization `rho`), the
//! other to an off-resonance value (one output, scaled to Hz by
//! `out_scale`). Both share the encoding/MLP machinery here; training lives
//! in the `train` module.

pub mod hash;
pub mod mlp;

use ndarray::{Array1, Array2, NdFloat};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::SpatialGrid;
use crate::phantom::{ComplexImage, FieldMap};
pub use hash::{EncodingPlan, HashGridConfig};
pub use mlp::{mlp_backward, mlp_forward, MlpCache, MlpConfig};

/// All numeric degrees of freedom of one network, in update order:
/// hash table, then layer weights, then layer biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub table: Vec<T>,
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: NdFloat> ParamSet<T> {
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            table: vec![T::zero(); self.table.len()],
            weights: self.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.table.iter_mut().for_each(|x| *x = v);
        self.weights.iter_mut().for_each(|w| w.fill(v));
        self.biases.iter_mut().for_each(|b| b.fill(v));
    }

    pub fn len(&self) -> usize {
        self.table.len()
            + self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One coordinate network with its shape and output scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub hash: HashGridConfig,
    pub mlp: MlpConfig,
    pub params: ParamSet<T>,
    /// Multiplies the raw output; the field network uses this to express
    /// outputs in Hz from an order-one raw range.
    pub out_scale: f64,
    /// Data normalization of the image network: the net models image / rho,
    /// queries multiply it back. 1.0 until a fit sets it.
    pub rho: f64,
}

/// Fresh network with uniform hash features and fan-in-scaled dense layers.
pub fn init_network<T: NdFloat>(
    hash: HashGridConfig,
    mlp: MlpConfig,
    out_scale: f64,
    seed: u64,
) -> Result<NetworkParams<T>> {
    if mlp.input != hash.output_dim() {
        return Err(Error::Config(format!(
            "encoding outputs {} features but the network expects {}",
            hash.output_dim(),
            mlp.input
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cast = |v: f64| T::from(v).unwrap();
    let table = (0..hash.table_len())
        .map(|_| cast(rng.gen_range(-1e-4..1e-4)))
        .collect();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (fan_in, fan_out) in mlp.layer_dims() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
            cast(rng.gen_range(-bound..bound))
        }));
        biases.push(Array1::zeros(fan_out));
    }
    Ok(NetworkParams {
        hash,
        mlp,
        params: ParamSet {
            table,
            weights,
            biases,
        },
        out_scale,
        rho: 1.0,
    })
}

/// Encoding plan plus network evaluation for one fixed coordinate set.
/// The same query serves any network built on the same hash configuration.
pub struct NetQuery<T> {
    plan: EncodingPlan<T>,
}

impl<T: NdFloat> NetQuery<T> {
    pub fn new(cfg: &HashGridConfig, coords: &[[f64; 2]]) -> Self {
        NetQuery {
            plan: EncodingPlan::build(cfg, coords),
        }
    }

    pub fn points(&self) -> usize {
        self.plan.points()
    }

    /// Raw network outputs (points, outputs) plus the backward-pass cache,
    /// whose first entry holds the encoded features.
    pub fn forward(&self, net: &NetworkParams<T>) -> (Array2<T>, MlpCache<T>) {
        debug_assert_eq!(net.hash, *self.plan.config());
        let feats = self.plan.encode(&net.params.table);
        let (out, cache) = mlp_forward(&net.params.weights, &net.params.biases, &feats);
        (out, cache)
    }

    /// Accumulates parameter gradients for raw-output gradients `d_raw`.
    pub fn backward(
        &self,
        net: &NetworkParams<T>,
        cache: &MlpCache<T>,
        d_raw: &Array2<T>,
        grads: &mut ParamSet<T>,
    ) {
        let (dw, db, d_feats) = mlp_backward(&net.params.weights, cache, d_raw);
        for (acc, g) in grads.weights.iter_mut().zip(dw) {
            *acc += &g;
        }
        for (acc, g) in grads.biases.iter_mut().zip(db) {
            *acc += &g;
        }
        self.plan.backprop(&d_feats, &mut grads.table);
    }
}

/// Casts every parameter to another float width, keeping scales.
pub fn convert_network<T: NdFloat, U: NdFloat>(net: &NetworkParams<T>) -> NetworkParams<U> {
    let cast = |v: T| U::from(v).unwrap();
    NetworkParams {
        hash: net.hash,
        mlp: net.mlp,
        params: ParamSet {
            table: net.params.table.iter().map(|&v| cast(v)).collect(),
            weights: net.params.weights.iter().map(|w| w.mapv(cast)).collect(),
            biases: net.params.biases.iter().map(|b| b.mapv(cast)).collect(),
        },
        out_scale: net.out_scale,
        rho: net.rho,
    }
}

/// Complex image modeled by an image network on the given grid.
pub fn query_image(net: &NetworkParams<f64>, grid: &SpatialGrid) -> ComplexImage {
    assert_eq!(net.mlp.output, 2, "image networks have two outputs");
    let q = NetQuery::new(&net.hash, grid.coords());
    let (raw, _) = q.forward(net);
    let (h, w) = grid.shape();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let p = i * w + j;
        Complex64::new(raw[[p, 0]], raw[[p, 1]]) * net.rho
    })
}

/// Off-resonance map modeled by a field network on the given grid, in Hz.
pub fn query_b0(net: &NetworkParams<f64>, grid: &SpatialGrid) -> FieldMap {
    assert_eq!(net.mlp.output, 1, "field networks have one output");
    let q = NetQuery::new(&net.hash, grid.coords());
    let (raw, _) = q.forward(net);
    let (h, w) = grid.shape();
    Array2::from_shape_fn((h, w), |(i, j)| raw[[i * w + j, 0]] * net.out_scale)
}
