//! Small dense ReLU network applied row-wise to batches of feature vectors.
//!
//! Layers are (in, out) weight matrices so a batch (P, in) maps by plain
//! matrix product; hidden layers use ReLU, the output layer is linear. The
//! backward pass consumes the activations cached by the forward pass.

use ndarray::{Array1, Array2, Axis, NdFloat};
use serde::{Deserialize, Serialize};

/// Dense network shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub output: usize,
}

impl MlpConfig {
    /// (fan_in, fan_out) of every layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        assert!(self.hidden_layers >= 1, "need at least one hidden layer");
        let mut dims = vec![(self.input, self.hidden_width)];
        for _ in 1..self.hidden_layers {
            dims.push((self.hidden_width, self.hidden_width));
        }
        dims.push((self.hidden_width, self.output));
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }
}

/// Layer inputs saved during the forward pass (batch, fan_in) per layer.
pub struct MlpCache<T> {
    pub inputs: Vec<Array2<T>>,
}

/// Forward pass; returns the linear output and the cache for `mlp_backward`.
pub fn mlp_forward<T: NdFloat>(
    weights: &[Array2<T>],
    biases: &[Array1<T>],
    x: &Array2<T>,
) -> (Array2<T>, MlpCache<T>) {
    assert_eq!(weights.len(), biases.len());
    let n = weights.len();
    let mut inputs = Vec::with_capacity(n);
    let mut a = x.clone();
    for (k, (w, b)) in weights.iter().zip(biases).enumerate() {
        let mut z = a.dot(w);
        z += b;
        inputs.push(a);
        a = if k + 1 < n {
            z.mapv_into(|v| v.max(T::zero()))
        } else {
            z
        };
    }
    (a, MlpCache { inputs })
}

/// Backward pass: gradients for every weight, bias, and the batch input.
pub fn mlp_backward<T: NdFloat>(
    weights: &[Array2<T>],
    cache: &MlpCache<T>,
    d_out: &Array2<T>,
) -> (Vec<Array2<T>>, Vec<Array1<T>>, Array2<T>) {
    let n = weights.len();
    let mut d_weights = vec![Array2::zeros((0, 0)); n];
    let mut d_biases = vec![Array1::zeros(0); n];
    let mut dz = d_out.clone();
    for k in (0..n).rev() {
        d_weights[k] = cache.inputs[k].t().dot(&dz);
        d_biases[k] = dz.sum_axis(Axis(0));
        let da = dz.dot(&weights[k].t());
        dz = if k > 0 {
            // the cached input of layer k is the ReLU output of layer k-1,
            // so its positivity is exactly the ReLU mask
            let mask = &cache.inputs[k];
            ndarray::Zip::from(&da)
                .and(mask)
                .map_collect(|&g, &a| if a > T::zero() { g } else { T::zero() })
        } else {
            da
        };
    }
    (d_weights, d_biases, dz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_dims_cover_all_layers() {
        let cfg = MlpConfig {
            input: 32,
            hidden_width: 256,
            hidden_layers: 2,
            output: 2,
        };
        assert_eq!(cfg.layer_dims(), vec![(32, 256), (256, 256), (256, 2)]);
        assert_eq!(
            cfg.parameter_count(),
            32 * 256 + 256 + 256 * 256 + 256 + 256 * 2 + 2
        );
    }

    #[test]
    fn forward_matches_hand_computation() {
        // 2 -> 2 -> 1, weights chosen so one hidden unit clips
        let weights: Vec<Array2<f64>> = vec![
            array![[1.0, -1.0], [0.0, 2.0]],
            array![[3.0], [1.0]],
        ];
        let biases = vec![array![0.5, 0.0], array![-1.0]];
        let x = array![[1.0, 1.0]];
        // z1 = [1*1+1*0+0.5, 1*-1+1*2+0] = [1.5, 1.0]; relu keeps both
        // out = 1.5*3 + 1.0*1 - 1 = 4.5
        let (out, _) = mlp_forward(&weights, &biases, &x);
        assert!((out[[0, 0]] - 4.5).abs() < 1e-12);
        // flip the second input: z1 = [1.5 - ... ] recompute with x=[1,-1]:
        // z1 = [1+0.5, -1-2] = [1.5, -3] -> relu [1.5, 0]; out = 3.5
        let x = array![[1.0, -1.0]];
        let (out, _) = mlp_forward(&weights, &biases, &x);
        assert!((out[[0, 0]] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let weights: Vec<Array2<f64>> = vec![
            Array2::from_shape_fn((3, 8), |_| rng.gen_range(-1.0..1.0)),
            Array2::from_shape_fn((8, 2), |_| rng.gen_range(-1.0..1.0)),
        ];
        let biases = vec![
            Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0)),
            Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0)),
        ];
        let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let (full, _) = mlp_forward(&weights, &biases, &x);
        for r in 0..4 {
            let row = x.row(r).to_owned().insert_axis(Axis(0));
            let (single, _) = mlp_forward(&weights, &biases, &row);
            for c in 0..2 {
                assert!((full[[r, c]] - single[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut weights = vec![
            Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0)),
            Array2::from_shape_fn((6, 6), |_| rng.gen_range(-1.0..1.0)),
            Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0)),
        ];
        let mut biases = vec![
            Array1::from_shape_fn(6, |_| rng.gen_range(-0.5..0.5)),
            Array1::from_shape_fn(6, |_| rng.gen_range(-0.5..0.5)),
            Array1::from_shape_fn(2, |_| rng.gen_range(-0.5..0.5)),
        ];
        let mut x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));

        let loss = |w: &[Array2<f64>], b: &[Array1<f64>], x: &Array2<f64>| -> f64 {
            let (out, _) = mlp_forward(w, b, x);
            (&out * &probe).sum()
        };
        let base_cache = mlp_forward(&weights, &biases, &x).1;
        let (dw, db, dx) = mlp_backward(&weights, &base_cache, &probe);

        let eps = 1e-6;
        let check = |got: f64, up: f64, down: f64, what: &str| {
            let fd = (up - down) / (2.0 * eps);
            let denom = fd.abs().max(got.abs()).max(1e-8);
            assert!(
                ((fd - got) / denom).abs() < 1e-5,
                "{what}: fd={fd} backprop={got}"
            );
        };
        for k in 0..3 {
            for idx in [(0, 0), (1, 1), (3, 0)] {
                if idx.0 >= weights[k].nrows() || idx.1 >= weights[k].ncols() {
                    continue;
                }
                let orig = weights[k][idx];
                weights[k][idx] = orig + eps;
                let up = loss(&weights, &biases, &x);
                weights[k][idx] = orig - eps;
                let down = loss(&weights, &biases, &x);
                weights[k][idx] = orig;
                check(dw[k][idx], up, down, &format!("w{k}{idx:?}"));
            }
            for i in [0, biases[k].len() - 1] {
                let orig = biases[k][i];
                biases[k][i] = orig + eps;
                let up = loss(&weights, &biases, &x);
                biases[k][i] = orig - eps;
                let down = loss(&weights, &biases, &x);
                biases[k][i] = orig;
                check(db[k][i], up, down, &format!("b{k}[{i}]"));
            }
        }
        for idx in [(0, 0), (2, 3), (4, 1)] {
            let orig = x[idx];
            x[idx] = orig + eps;
            let up = loss(&weights, &biases, &x);
            x[idx] = orig - eps;
            let down = loss(&weights, &biases, &x);
            x[idx] = orig;
            check(dx[idx], up, down, &format!("x{idx:?}"));
        }
    }

    #[test]
    fn clipped_units_pass_no_gradient() {
        // single hidden unit forced negative: all upstream gradients vanish
        let weights: Vec<Array2<f64>> = vec![array![[1.0]], array![[1.0]]];
        let biases = vec![array![-5.0], array![0.0]];
        let x = array![[1.0]]; // z1 = -4, relu -> 0
        let (out, cache) = mlp_forward(&weights, &biases, &x);
        assert_eq!(out[[0, 0]], 0.0);
        let (dw, db, dx) = mlp_backward(&weights, &cache, &array![[1.0]]);
        assert_eq!(dw[0][[0, 0]], 0.0);
        assert_eq!(db[0][0], 0.0);
        assert_eq!(dx[[0, 0]], 0.0);
        // output-layer bias still sees gradient
        assert_eq!(db[1][0], 1.0);
    }
}
