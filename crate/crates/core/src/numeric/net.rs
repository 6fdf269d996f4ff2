//! Dense feedforward networks with explicit forward tapes and backprop.
//!
//! Small enough to stay hand-rolled: the projection head is a single linear
//! layer and the discriminator is one hidden layer, so a generic autograd
//! engine would be more code than the gradients themselves.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense matrix (rows = outputs, cols = inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// out = A x
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *o = row.iter().zip(x).map(|(w, v)| w * v).sum();
        }
    }

    /// out = Aᵀ g (propagates an output gradient back to the input).
    pub fn matvec_transpose(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(0.0);
        for (r, &gr) in g.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * gr;
            }
        }
    }

    /// A += scale · g xᵀ (rank-one gradient accumulation).
    pub fn add_outer(&mut self, g: &[f64], x: &[f64], scale: f64) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (r, &gr) in g.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let s = scale * gr;
            for (w, &v) in row.iter_mut().zip(x) {
                *w += s * v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(&self, z: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                // Clamped into the open interval: f64 rounds sigmoid to
                // exactly 0/1 beyond |z| ≈ 36, which would break the (0,1)
                // output contract and zero the backward signal.
                for v in z.iter_mut() {
                    *v = (1.0 / (1.0 + (-*v).exp())).clamp(1e-12, 1.0 - 1e-12);
                }
            }
        }
    }

    /// Derivative expressed through the activation output. The sigmoid
    /// output is clamped away from {0, 1} so a saturated unit multiplied by
    /// a huge loss gradient cannot produce 0·∞ = NaN.
    fn derivative_from_output(&self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = out.clamp(1e-12, 1.0 - 1e-12);
                s * (1.0 - s)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::ShapeMismatch {
                context: "layer bias".into(),
                expected: weights.rows(),
                got: bias.len(),
            });
        }
        Ok(Layer {
            weights,
            bias,
            activation,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Feedforward network: a chain of dense layers with shape-checked wiring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Per-layer activation record produced by [`DenseNet::forward`]; required
/// by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// inputs[l] is what layer l consumed; outputs[l] what it produced.
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

/// Parameter gradients mirroring a network's layer shapes.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl NetGrads {
    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            for v in w.as_mut_slice() {
                *v *= s;
            }
            for v in b {
                *v *= s;
            }
        }
    }

    pub fn add(&mut self, other: &NetGrads) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (v, o) in w.as_mut_slice().iter_mut().zip(ow.as_slice()) {
                *v += o;
            }
            for (v, o) in b.iter_mut().zip(ob) {
                *v += o;
            }
        }
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("DenseNet::new"));
        }
        for i in 1..layers.len() {
            if layers[i].input_dim() != layers[i - 1].output_dim() {
                return Err(Error::ShapeMismatch {
                    context: format!("layer {i} input"),
                    expected: layers[i - 1].output_dim(),
                    got: layers[i].input_dim(),
                });
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "net forward input".into(),
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut z = layer.bias.clone();
            let mut pre = vec![0.0; layer.output_dim()];
            layer.weights.matvec(&cur, &mut pre);
            for (zi, pi) in z.iter_mut().zip(&pre) {
                *zi += pi;
            }
            layer.activation.apply(&mut z);
            inputs.push(cur);
            outputs.push(z.clone());
            cur = z;
        }
        Ok((cur, Tape { inputs, outputs }))
    }

    /// Backpropagate `output_grad` (dLoss/dOutput) through the tape.
    /// Returns the parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, tape: &Tape, output_grad: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        if output_grad.len() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                context: "net backward output_grad".into(),
                expected: self.output_dim(),
                got: output_grad.len(),
            });
        }
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                context: "net backward tape".into(),
                expected: self.layers.len(),
                got: tape.inputs.len(),
            });
        }
        let mut grads = self.zero_grads();
        let mut g = output_grad.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &tape.outputs[l];
            let input = &tape.inputs[l];
            // dz = g ⊙ act'(out)
            let dz: Vec<f64> = g
                .iter()
                .zip(out)
                .map(|(&gi, &oi)| gi * layer.activation.derivative_from_output(oi))
                .collect();
            let (dw, db) = &mut grads.layers[l];
            dw.add_outer(&dz, input, 1.0);
            for (b, &d) in db.iter_mut().zip(&dz) {
                *b += d;
            }
            let mut next_g = vec![0.0; layer.input_dim()];
            layer.weights.matvec_transpose(&dz, &mut next_g);
            g = next_g;
        }
        Ok((grads, g))
    }

    pub fn zero_grads(&self) -> NetGrads {
        NetGrads {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.output_dim(), l.input_dim()),
                        vec![0.0; l.output_dim()],
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Prng;

    fn random_net(rng: &mut Prng, dims: &[usize], acts: &[Activation]) -> DenseNet {
        let layers = dims
            .windows(2)
            .zip(acts)
            .map(|(w, &act)| {
                let weights = Matrix::from_fn(w[1], w[0], |_, _| rng.next_normal() * 0.5);
                let bias = (0..w[1]).map(|_| rng.next_normal() * 0.1).collect();
                Layer::new(weights, bias, act).unwrap()
            })
            .collect();
        DenseNet::new(layers).unwrap()
    }

    #[test]
    fn identity_layer_passes_through() {
        let net = DenseNet::new(vec![Layer::new(
            Matrix::identity(3),
            vec![0.0; 3],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let x = vec![0.5, -1.0, 2.0];
        let (y, tape) = net.forward(&x).unwrap();
        assert_eq!(y, x);

        let og = vec![1.0, 2.0, 3.0];
        let (_, input_grad) = net.backward(&tape, &og).unwrap();
        assert_eq!(input_grad, og);
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let mut rng = Prng::new(3);
        let net = random_net(
            &mut rng,
            &[4, 3, 1],
            &[Activation::Relu, Activation::Sigmoid],
        );
        let x: Vec<f64> = (0..4).map(|_| rng.next_normal()).collect();
        let (_, tape) = net.forward(&x).unwrap();
        let (grads, input_grad) = net.backward(&tape, &[0.0]).unwrap();
        assert!(input_grad.iter().all(|&g| g == 0.0));
        for (w, b) in &grads.layers {
            assert!(w.as_slice().iter().all(|&g| g == 0.0));
            assert!(b.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let net = DenseNet::new(vec![Layer::new(
            Matrix::identity(3),
            vec![0.0; 3],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn mismatched_layer_chain_rejected() {
        let l0 = Layer::new(Matrix::zeros(3, 4), vec![0.0; 3], Activation::Relu).unwrap();
        let l1 = Layer::new(Matrix::zeros(1, 2), vec![0.0; 1], Activation::Sigmoid).unwrap();
        assert!(DenseNet::new(vec![l0, l1]).is_err());
    }

    // Central finite differences on a scalar loss L = Σ w_out·y over
    // randomized nets; the module-level gradient oracle.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Prng::new(17);
        let h = 1e-5;
        let mut cases = 0;
        for _ in 0..120 {
            let hidden = 2 + rng.gen_range(4);
            let act = match rng.gen_range(3) {
                0 => Activation::Identity,
                1 => Activation::Relu,
                _ => Activation::Sigmoid,
            };
            let dims = [3 + rng.gen_range(3), hidden, 1 + rng.gen_range(2)];
            let net = random_net(&mut rng, &dims, &[act, Activation::Sigmoid]);
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.next_normal()).collect();
            let combo: Vec<f64> = (0..dims[2]).map(|_| rng.next_normal()).collect();

            let loss = |n: &DenseNet| -> f64 {
                let (y, _) = n.forward(&x).unwrap();
                y.iter().zip(&combo).map(|(a, b)| a * b).sum()
            };

            let (_, tape) = net.forward(&x).unwrap();
            let (grads, _) = net.backward(&tape, &combo).unwrap();

            for l in 0..net.layers().len() {
                for idx in 0..net.layers()[l].weights.as_slice().len() {
                    let mut plus = net.clone();
                    plus.layers_mut()[l].weights.as_mut_slice()[idx] += h;
                    let mut minus = net.clone();
                    minus.layers_mut()[l].weights.as_mut_slice()[idx] -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let an = grads.layers[l].0.as_slice()[idx];
                    let denom = (fd.abs() + an.abs()).max(1e-6);
                    assert!(
                        ((fd - an).abs() / denom) < 1e-4,
                        "layer {l} weight {idx}: fd={fd} analytic={an}"
                    );
                }
                for idx in 0..net.layers()[l].bias.len() {
                    let mut plus = net.clone();
                    plus.layers_mut()[l].bias[idx] += h;
                    let mut minus = net.clone();
                    minus.layers_mut()[l].bias[idx] -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let an = grads.layers[l].1[idx];
                    let denom = (fd.abs() + an.abs()).max(1e-6);
                    assert!(
                        ((fd - an).abs() / denom) < 1e-4,
                        "layer {l} bias {idx}: fd={fd} analytic={an}"
                    );
                }
            }
            cases += 1;
        }
        assert!(cases >= 100);
    }
}
