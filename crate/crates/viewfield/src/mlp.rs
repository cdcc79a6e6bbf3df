//! Small fully-connected networks with ReLU hidden layers, stored in a
//! flat parameter slice (per layer: row-major weights, then biases).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// (input_dim, output_dim) per layer; hidden layers are ReLU, the last
    /// layer is linear.
    pub layers: Vec<(usize, usize)>,
    pub param_count: usize,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> MlpSpec {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push((prev, h));
            prev = h;
        }
        layers.push((prev, output));
        let param_count = layers.iter().map(|(i, o)| i * o + o).sum();
        MlpSpec { layers, param_count }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().1
    }
}

/// Reusable activation storage for one forward/backward pair.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// acts[0] is the input; acts[k] the post-activation output of layer k-1.
    pub acts: Vec<Vec<f64>>,
    scratch: Vec<f64>,
}

impl MlpCache {
    pub fn for_spec(spec: &MlpSpec) -> MlpCache {
        let mut acts = vec![vec![0.0; spec.input_dim()]];
        for &(_, o) in &spec.layers {
            acts.push(vec![0.0; o]);
        }
        let max = spec.layers.iter().map(|&(i, o)| i.max(o)).max().unwrap();
        MlpCache {
            acts,
            scratch: vec![0.0; max],
        }
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

/// Forward pass; activations are kept in `cache` for the backward pass.
pub fn mlp_forward(spec: &MlpSpec, params: &[f64], input: &[f64], cache: &mut MlpCache) {
    cache.acts[0].copy_from_slice(input);
    let mut offset = 0;
    let n_layers = spec.layers.len();
    for (k, &(din, dout)) in spec.layers.iter().enumerate() {
        let (lo, hi) = cache.acts.split_at_mut(k + 1);
        let a_in = &lo[k];
        let a_out = &mut hi[0];
        let w = &params[offset..offset + din * dout];
        let b = &params[offset + din * dout..offset + din * dout + dout];
        for o in 0..dout {
            let row = &w[o * din..(o + 1) * din];
            let mut acc = b[o];
            for i in 0..din {
                acc += row[i] * a_in[i];
            }
            a_out[o] = if k + 1 < n_layers { acc.max(0.0) } else { acc };
        }
        offset += din * dout + dout;
    }
}

/// Backward pass for the cached forward. Accumulates parameter gradients
/// into `dparams` and writes the input gradient into `dinput`.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &[f64],
    cache: &mut MlpCache,
    dout: &[f64],
    dinput: &mut [f64],
    dparams: &mut [f64],
) {
    let n_layers = spec.layers.len();
    let mut layer_offsets = Vec::with_capacity(n_layers);
    let mut offset = 0;
    for &(din, dout_dim) in &spec.layers {
        layer_offsets.push(offset);
        offset += din * dout_dim + dout_dim;
    }

    // dpre for the current layer, reusing scratch storage
    let mut dpre: Vec<f64> = dout.to_vec();
    for k in (0..n_layers).rev() {
        let (din, dcur) = spec.layers[k];
        let off = layer_offsets[k];
        let w = &params[off..off + din * dcur];
        let a_in = &cache.acts[k];
        {
            let dw = &mut dparams[off..off + din * dcur + dcur];
            for o in 0..dcur {
                let g = dpre[o];
                if g != 0.0 {
                    let row = &mut dw[o * din..(o + 1) * din];
                    for i in 0..din {
                        row[i] += g * a_in[i];
                    }
                }
                dw[din * dcur + o] += g;
            }
        }
        // input gradient
        let da = &mut cache.scratch[..din];
        da.fill(0.0);
        for o in 0..dcur {
            let g = dpre[o];
            if g != 0.0 {
                let row = &w[o * din..(o + 1) * din];
                for i in 0..din {
                    da[i] += g * row[i];
                }
            }
        }
        if k == 0 {
            dinput.copy_from_slice(da);
        } else {
            // ReLU mask from the stored post-activation
            dpre.resize(din, 0.0);
            for i in 0..din {
                dpre[i] = if cache.acts[k][i] > 0.0 { da[i] } else { 0.0 };
            }
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// d softplus / dx = sigmoid(x)
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_params(spec: &MlpSpec, rng: &mut impl Rng) -> Vec<f64> {
        (0..spec.param_count).map(|_| rng.gen::<f64>() - 0.5).collect()
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::new(4, &[8], 3);
        let params = vec![0.0; spec.param_count];
        let mut cache = MlpCache::for_spec(&spec);
        mlp_forward(&spec, &params, &[1.0, -2.0, 0.5, 3.0], &mut cache);
        assert!(cache.output().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = MlpSpec::new(5, &[9, 7], 2);
        let params = random_params(&spec, &mut rng);
        let input: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();
        let dout: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() - 0.5).collect();

        let mut cache = MlpCache::for_spec(&spec);
        mlp_forward(&spec, &params, &input, &mut cache);
        let mut dinput = vec![0.0; 5];
        let mut dparams = vec![0.0; spec.param_count];
        mlp_backward(&spec, &params, &mut cache, &dout, &mut dinput, &mut dparams);

        let f = |p: &[f64], x: &[f64]| -> f64 {
            let mut c = MlpCache::for_spec(&spec);
            mlp_forward(&spec, p, x, &mut c);
            c.output().iter().zip(&dout).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..spec.param_count {
            let mut p1 = params.clone();
            let mut p2 = params.clone();
            p1[i] -= h;
            p2[i] += h;
            let fd = (f(&p2, &input) - f(&p1, &input)) / (2.0 * h);
            let err = (fd - dparams[i]).abs() / fd.abs().max(dparams[i].abs()).max(1e-8);
            assert!(err < 1e-5, "param {i}: fd={fd} analytic={}", dparams[i]);
        }
        for i in 0..5 {
            let mut x1 = input.clone();
            let mut x2 = input.clone();
            x1[i] -= h;
            x2[i] += h;
            let fd = (f(&params, &x2) - f(&params, &x1)) / (2.0 * h);
            let err = (fd - dinput[i]).abs() / fd.abs().max(dinput[i].abs()).max(1e-8);
            assert!(err < 1e-5, "input {i}: fd={fd} analytic={}", dinput[i]);
        }
    }

    #[test]
    fn softplus_sigmoid_basics() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        assert!(softplus(-100.0) > 0.0);
        let h = 1e-6;
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((fd - sigmoid(x)).abs() < 1e-8);
        }
    }
}
