//! Feedforward network with a flat parameter vector.
//!
//! Layout: for each layer in order, the weight matrix `out x in` row-major,
//! followed by the bias vector of length `out`. Hidden layers use tanh, the
//! output layer is linear.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations cached by [`Mlp::forward`]: `hidden[l]` is the tanh output of
/// hidden layer `l`; `output` is the linear output.
#[derive(Debug, Clone)]
pub struct Forward {
    nonzero: Vec<usize>,
    hidden: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        Mlp { sizes: sizes.to_vec(), params: vec![0.0; param_count(sizes)] }
    }

    /// Every layer drawn from U(-sqrt(3/fan_in), sqrt(3/fan_in)), biases
    /// zero. With `zero_output` the final layer is all zeros.
    pub fn init<R: Rng>(sizes: &[usize], zero_output: bool, rng: &mut R) -> Self {
        let mut net = Mlp::zeros(sizes);
        let layers = sizes.len() - 1;
        for l in 0..layers {
            if zero_output && l == layers - 1 {
                continue;
            }
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = (3.0 / fan_in as f64).sqrt();
            let w = net.layer_offset(l);
            for p in &mut net.params[w..w + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    pub fn forward(&self, x: &[f64]) -> Forward {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let nonzero: Vec<usize> = (0..x.len()).filter(|&i| x[i] != 0.0).collect();
        let layers = self.sizes.len() - 1;
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(layers - 1);
        let mut output = Vec::new();
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = self.layer_offset(l);
            let b = w + fan_in * fan_out;
            let mut z = self.params[b..b + fan_out].to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &self.params[w + o * fan_in..w + (o + 1) * fan_in];
                if l == 0 {
                    *zo += nonzero.iter().map(|&i| row[i] * x[i]).sum::<f64>();
                } else {
                    let input = &hidden[l - 1];
                    *zo += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
                hidden.push(z);
            } else {
                output = z;
            }
        }
        Forward { nonzero, hidden, output }
    }

    /// Accumulates `d output` back-propagated into `grad` (same layout as the
    /// parameters).
    pub fn backward(&self, x: &[f64], fwd: &Forward, d_output: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let layers = self.sizes.len() - 1;
        let mut delta = d_output.to_vec();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = self.layer_offset(l);
            let b = w + fan_in * fan_out;
            for (o, d) in delta.iter().enumerate() {
                grad[b + o] += d;
                if *d == 0.0 {
                    continue;
                }
                let g = &mut grad[w + o * fan_in..w + (o + 1) * fan_in];
                if l == 0 {
                    for &i in &fwd.nonzero {
                        g[i] += d * x[i];
                    }
                } else {
                    for (gi, a) in g.iter_mut().zip(&fwd.hidden[l - 1]) {
                        *gi += d * a;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let act = &fwd.hidden[l - 1];
            let mut prev = vec![0.0; fan_in];
            for (o, d) in delta.iter().enumerate() {
                let row = &self.params[w + o * fan_in..w + (o + 1) * fan_in];
                for (p, r) in prev.iter_mut().zip(row) {
                    *p += r * d;
                }
            }
            for (p, a) in prev.iter_mut().zip(act) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chacha;

    #[test]
    fn layout_and_counts() {
        assert_eq!(param_count(&[4, 8, 3]), 4 * 8 + 8 + 8 * 3 + 3);
        let net = Mlp::zeros(&[4, 8, 3]);
        assert_eq!(net.layer_offset(0), 0);
        assert_eq!(net.layer_offset(1), 40);
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let net = Mlp::init(&[5, 7, 7, 4], true, &mut chacha(1));
        let out = net.forward(&[1.0, -2.0, 0.0, 0.5, 3.0]).output;
        assert_eq!(out, vec![0.0; 4]);
        assert!(net.params().iter().any(|&p| p != 0.0));
    }

    #[test]
    fn hand_computed_forward() {
        // One hidden unit: h = tanh(2*x0 - x1 + 0.5), y = 3h - 1.
        let mut net = Mlp::zeros(&[2, 1, 1]);
        net.params_mut().copy_from_slice(&[2.0, -1.0, 0.5, 3.0, -1.0]);
        let y = net.forward(&[1.0, 1.0]).output[0];
        assert!((y - (3.0 * 1.5f64.tanh() - 1.0)).abs() < 1e-15);
    }
}
