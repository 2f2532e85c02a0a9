//! Dense layers, ReLU, softmax cross-entropy and ADAM, with closed-form
//! gradients.
//!
//! Parameters flatten layer by layer: the `d_in × d_out` weight matrix in
//! row-major order, then the bias.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-layer perceptron with ReLU on hidden layers and an identity output.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Per-layer inputs kept from the forward pass.
#[derive(Clone, Debug)]
pub struct DenseCache {
    // inputs[l] feeds layer l; inputs[0] is the network input
    inputs: Vec<Array2<f64>>,
}

/// Serialized form: layer sizes plus the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNetRecord {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

pub fn dense_param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseNet {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::validation(format!(
                "layer sizes {sizes:?} need at least two positive entries"
            )));
        }
        Ok(DenseNet {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect(),
            biases: sizes.windows(2).map(|w| Array1::zeros(w[1])).collect(),
        })
    }

    /// Uniform initialisation in `[-1/√d_in, 1/√d_in]` for weights and biases.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
            let bound = 1.0 / (w.nrows() as f64).sqrt();
            w.iter_mut().for_each(|x| *x = rng.gen_range(-bound..=bound));
            b.iter_mut().for_each(|x| *x = rng.gen_range(-bound..=bound));
        }
        Ok(net)
    }

    pub fn from_record(record: &DenseNetRecord) -> Result<Self> {
        let mut net = Self::zeros(&record.sizes)?;
        net.set_params(&record.params)?;
        Ok(net)
    }

    pub fn to_record(&self) -> DenseNetRecord {
        DenseNetRecord {
            sizes: self.sizes.clone(),
            params: self.params(),
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        dense_param_count(&self.sizes)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::validation(format!(
                "network {:?} has {} parameters, got {}",
                self.sizes,
                self.param_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for x in w.iter_mut() {
                *x = flat[at];
                at += 1;
            }
            for x in b.iter_mut() {
                *x = flat[at];
                at += 1;
            }
        }
        Ok(())
    }

    /// Forward pass over a batch of row vectors.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, DenseCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::validation(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut a = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(w);
            z += b;
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(a);
            a = z;
        }
        Ok((a, DenseCache { inputs }))
    }

    /// Backward pass; returns the flat parameter gradient summed over the
    /// batch and the gradient with respect to each input row.
    pub fn backward_batch(&self, cache: &DenseCache, upstream: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let batch = cache.inputs[0].nrows();
        if upstream.dim() != (batch, self.output_dim()) {
            return Err(Error::validation(format!(
                "upstream gradient has shape {:?}, expected ({batch}, {})",
                upstream.dim(),
                self.output_dim()
            )));
        }
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.weights.len());
        let mut delta = upstream.to_owned();
        for l in (0..self.weights.len()).rev() {
            let a_in = &cache.inputs[l];
            grads.push((a_in.t().dot(&delta), delta.sum_axis(Axis(0))));
            let mut prev = delta.dot(&self.weights[l].t());
            if l > 0 {
                // a_in is the ReLU output of layer l-1; its zeros mark the inactive units
                prev.zip_mut_with(a_in, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = prev;
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.param_count());
        for (gw, gb) in &grads {
            flat.extend(gw.iter());
            flat.extend(gb.iter());
        }
        Ok((flat, delta))
    }
}

/// Single-vector forward pass.
pub fn dense_forward(net: &DenseNet, x: &[f64]) -> Result<(Vec<f64>, DenseCache)> {
    let x = ArrayView2::from_shape((1, x.len()), x).expect("row view");
    let (out, cache) = net.forward_batch(x)?;
    Ok((out.row(0).to_vec(), cache))
}

/// Single-vector backward pass: `(d_params, d_input)`.
pub fn dense_backward(net: &DenseNet, cache: &DenseCache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row view");
    let (g, d_in) = net.backward_batch(cache, up)?;
    Ok((g, d_in.row(0).to_vec()))
}

fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.mapv(|z| z - lse)
}

/// `(−log softmax(logits)[target], softmax(logits) − target)`.
pub fn softmax_cross_entropy(logits: &[f64], target_one_hot: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target_one_hot.len() {
        return Err(Error::validation(format!(
            "{} logits against a target of length {}",
            logits.len(),
            target_one_hot.len()
        )));
    }
    let ones = target_one_hot.iter().filter(|&&t| t == 1.0).count();
    let zeros = target_one_hot.iter().filter(|&&t| t == 0.0).count();
    if ones != 1 || ones + zeros != target_one_hot.len() {
        return Err(Error::validation(format!("malformed one-hot target {target_one_hot:?}")));
    }
    let logp = log_softmax(ArrayView1::from(logits));
    let target = target_one_hot.iter().position(|&t| t == 1.0).unwrap();
    let loss = -logp[target];
    let grad = logp.iter().zip(target_one_hot).map(|(lp, t)| lp.exp() - t).collect();
    Ok((loss, grad))
}

/// Mean cross-entropy over a batch of integer labels and its gradient
/// with respect to the logits (already divided by the batch size).
pub fn softmax_cross_entropy_batch(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != labels.len() {
        return Err(Error::validation("logit rows and labels differ in length"));
    }
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.outer_iter().zip(labels).enumerate() {
        if y >= row.len() {
            return Err(Error::validation(format!("label {y} out of range for {} classes", row.len())));
        }
        let logp = log_softmax(row);
        loss -= logp[y];
        let mut g = grad.slice_mut(s![i, ..]);
        g.assign(&logp.mapv(f64::exp));
        g[y] -= 1.0;
    }
    grad /= n;
    Ok((loss / n, grad))
}

/// ADAM optimiser state over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected ADAM update, in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::validation(format!(
                "ADAM state tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&[3, 4, 2]).unwrap();
        let (out, _) = dense_forward(&net, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let mut net = DenseNet::zeros(&[2, 2]).unwrap();
        net.set_params(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let (out, _) = dense_forward(&net, &[-1.0, 3.0]).unwrap();
        assert_eq!(out, vec![-1.0, 3.0]);
    }

    #[test]
    fn parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = DenseNet::random(&[14, 90, 196], &mut rng).unwrap();
        assert_eq!(net.param_count(), 19186);
        assert_eq!(net.params().len(), 19186);
        assert_eq!(2 * dense_param_count(&[14, 90, 196]), 38372);
        assert_eq!(dense_param_count(&[392, 95, 3]), 37623);
        assert_eq!(2 * dense_param_count(&[14, 90, 196]) + dense_param_count(&[392, 95, 3]), 75995);
    }

    #[test]
    fn shape_errors() {
        let net = DenseNet::zeros(&[3, 2]).unwrap();
        assert!(dense_forward(&net, &[1.0]).is_err());
        let (_, cache) = dense_forward(&net, &[1.0, 2.0, 3.0]).unwrap();
        assert!(dense_backward(&net, &cache, &[1.0]).is_err());
        assert!(DenseNet::zeros(&[3]).is_err());
        assert!(DenseNet::zeros(&[3, 0, 2]).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::random(&[4, 3, 2], &mut rng).unwrap();
        let (_, cache) = dense_forward(&net, &[0.1, 0.2, -0.3, 0.4]).unwrap();
        let (g, d) = dense_backward(&net, &cache, &[0.0, 0.0]).unwrap();
        assert!(g.iter().chain(&d).all(|&x| x == 0.0));
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, grad) = softmax_cross_entropy(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!(grad.iter().sum::<f64>().abs() < 1e-15);
        let (loss, grad) = softmax_cross_entropy(&[1000.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
        assert!(softmax_cross_entropy(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(softmax_cross_entropy(&[0.0, 0.0], &[0.5, 0.5]).is_err());
        assert!(softmax_cross_entropy(&[0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn batch_cross_entropy_matches_single() {
        let logits = Array2::from_shape_vec((2, 3), vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let (loss, grad) = softmax_cross_entropy_batch(logits.view(), &[2, 1]).unwrap();
        let (l0, g0) = softmax_cross_entropy(&[0.3, -1.0, 2.0], &[0.0, 0.0, 1.0]).unwrap();
        let (l1, g1) = softmax_cross_entropy(&[0.0, 0.5, 0.1], &[0.0, 1.0, 0.0]).unwrap();
        assert!((loss - (l0 + l1) / 2.0).abs() < 1e-14);
        for j in 0..3 {
            assert!((grad[[0, j]] - g0[j] / 2.0).abs() < 1e-14);
            assert!((grad[[1, j]] - g1[j] / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(2, 0.1);
        let mut p = vec![1.0, 2.0];
        st.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);

        // moments decay under a zero gradient
        st.m = vec![0.5, -0.5];
        st.v = vec![0.25, 0.25];
        st.step(&mut p, &[0.0, 0.0]).unwrap();
        assert!((st.m[0] - 0.45).abs() < 1e-15);
        assert!((st.v[0] - 0.25 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut st = AdamState::new(3, 0.01);
        let mut p = vec![0.0; 3];
        st.step(&mut p, &[2.0, -0.5, 1e-3]).unwrap();
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - 0.01 * s).abs() < 1e-6);
        }
        assert_eq!(st.step, 1);
        assert!(st.step(&mut p, &[1.0]).is_err());
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut st = AdamState::new(1, 0.1);
        let mut p = vec![0.0];
        for _ in 0..500 {
            let g = 2.0 * (p[0] - 3.0);
            st.step(&mut p, &[g]).unwrap();
        }
        assert!((p[0] - 3.0).abs() < 1e-2);
    }
}
