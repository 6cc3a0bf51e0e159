use rand::Rng;

use super::{loss::softmax_rows, shape_err, Matrix, NeuralError, Param, Parameters};

/// Fully connected layer `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let sd = (2.0 / n_in.max(1) as f64).sqrt();
        Self {
            weight: Param::normal(&format!("{name}.w"), n_in, n_out, sd, rng),
            bias: Param::new(format!("{name}.b"), Matrix::zeros(1, n_out)),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.values.rows
    }

    pub fn n_out(&self) -> usize {
        self.weight.values.cols
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        let w = &self.weight.values.data;
        let b = &self.bias.values.data;
        let mut y = Matrix::zeros(x.rows, n_out);
        for i in 0..x.rows {
            let yi = y.row_mut(i);
            yi.copy_from_slice(b);
            for (k, &xk) in x.row(i).iter().enumerate().take(n_in) {
                if xk == 0.0 {
                    continue;
                }
                let wk = &w[k * n_out..(k + 1) * n_out];
                for (yj, wj) in yi.iter_mut().zip(wk) {
                    *yj += xk * wj;
                }
            }
        }
        y
    }

    /// Accumulates weight/bias grads and returns `dL/dx`.
    pub fn backward(&mut self, x: &Matrix, dy: &Matrix) -> Matrix {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        let mut dx = Matrix::zeros(x.rows, n_in);
        let w = &self.weight.values.data;
        let gw = &mut self.weight.grad.data;
        let gb = &mut self.bias.grad.data;
        for i in 0..x.rows {
            let dyi = dy.row(i);
            for (g, d) in gb.iter_mut().zip(dyi) {
                *g += d;
            }
            let xi = x.row(i);
            let dxi = &mut dx.data[i * n_in..(i + 1) * n_in];
            for k in 0..n_in {
                let wk = &w[k * n_out..(k + 1) * n_out];
                dxi[k] = wk.iter().zip(dyi).map(|(a, b)| a * b).sum();
                let xk = xi[k];
                if xk != 0.0 {
                    for (g, d) in gw[k * n_out..(k + 1) * n_out].iter_mut().zip(dyi) {
                        *g += xk * d;
                    }
                }
            }
        }
        dx
    }
}

/// ReLU hidden layers and a linear output; `forward` applies softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer inputs plus output logits and probabilities.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    pub logits: Matrix,
    pub probs: Matrix,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`.
    pub fn new<R: Rng + ?Sized>(name: &str, sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| Dense::new(&format!("{name}.{l}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in()];
        s.extend(self.layers.iter().map(Dense::n_out));
        s
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().expect("nonempty").n_out()
    }

    pub fn forward(&self, x: &Matrix) -> Result<MlpCache, NeuralError> {
        if x.cols != self.n_in() {
            return Err(shape_err("mlp input", &[x.rows, self.n_in()], &[x.rows, x.cols]));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            h = if l + 1 < self.layers.len() {
                let mut a = z.clone();
                a.data.iter_mut().for_each(|v| *v = v.max(0.0));
                pre.push(z);
                a
            } else {
                pre.push(Matrix::zeros(0, 0));
                z
            };
        }
        let probs = softmax_rows(&h);
        Ok(MlpCache {
            inputs,
            pre,
            logits: h,
            probs,
        })
    }

    /// Backpropagates `dL/dlogits`, accumulating grads; returns `dL/dx`.
    pub fn backward(&mut self, cache: &MlpCache, dlogits: &Matrix) -> Matrix {
        let mut d = dlogits.clone();
        let n = self.layers.len();
        for l in (0..n).rev() {
            if l + 1 < n {
                for (g, z) in d.data.iter_mut().zip(&cache.pre[l].data) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            d = self.layers[l].backward(&cache.inputs[l], &d);
        }
        d
    }
}

impl Parameters for Mlp {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
