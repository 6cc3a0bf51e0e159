use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{shape_err, Matrix, NeuralError, Param, Parameters};
use crate::channel::ChannelMatrix;
use crate::codebook::{Beam, Codebook, CodebookKind};

const J: Complex64 = Complex64::new(0.0, 1.0);

/// Learnable constant-modulus beams: column `n` of the `m x n` phase
/// matrix gives the beam `(cos theta + j sin theta) / sqrt(m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingLayer {
    pub theta: Param,
}

impl ProbingLayer {
    /// Phases uniform in `[-pi, pi)`.
    pub fn new<R: Rng + ?Sized>(name: &str, m: usize, n: usize, rng: &mut R) -> Self {
        let data = (0..m * n).map(|_| rng.random_range(-PI..PI)).collect();
        Self {
            theta: Param::new(name, Matrix { rows: m, cols: n, data }),
        }
    }

    /// Fixed beams (e.g. a synthesized codebook) as a layer.
    pub fn from_beams(name: &str, beams: &[Beam]) -> Self {
        let m = beams[0].len();
        let n = beams.len();
        let mut t = Matrix::zeros(m, n);
        for (j, b) in beams.iter().enumerate() {
            for (k, p) in b.phases().into_iter().enumerate() {
                t.data[k * n + j] = p;
            }
        }
        Self {
            theta: Param::new(name, t),
        }
    }

    pub fn m(&self) -> usize {
        self.theta.values.rows
    }

    pub fn n(&self) -> usize {
        self.theta.values.cols
    }

    /// Beam weights, `w[n][k]`.
    fn weights(&self) -> Vec<Vec<Complex64>> {
        let (m, n) = (self.m(), self.n());
        let scale = 1.0 / (m as f64).sqrt();
        (0..n)
            .map(|j| {
                (0..m)
                    .map(|k| Complex64::from_polar(scale, self.theta.values.data[k * n + j]))
                    .collect()
            })
            .collect()
    }

    pub fn beams(&self) -> Vec<Beam> {
        (0..self.n())
            .map(|j| {
                let col: Vec<f64> = (0..self.m()).map(|k| self.theta.values.get(k, j)).collect();
                Beam::from_phases(&col)
            })
            .collect()
    }

    pub fn codebook(&self) -> Codebook {
        Codebook::new(CodebookKind::Probing, self.beams()).expect("nonempty layer")
    }
}

/// Transmit/receive probing pairs with matched codeword counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingPair {
    pub tx: ProbingLayer,
    pub rx: ProbingLayer,
}

/// MISO probing layer or MIMO probing pairs.
#[derive(Debug, Clone, PartialEq)]
pub enum Prober {
    Miso(ProbingLayer),
    Mimo(ProbingPair),
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ProbeCache {
    batch: usize,
    amp: f64,
    /// `conj(h)` per sample (MISO), or the channel matrices (MIMO).
    channels: Vec<ChannelMatrix>,
    noise: Vec<Complex64>,
    tx_w: Vec<Vec<Complex64>>,
    rx_w: Vec<Vec<Complex64>>,
    /// `H^H v_n` per sample and codeword (MIMO only).
    x: Vec<Vec<Complex64>>,
}

impl Prober {
    pub fn n(&self) -> usize {
        match self {
            Prober::Miso(l) => l.n(),
            Prober::Mimo(p) => p.tx.n(),
        }
    }

    pub fn m_t(&self) -> usize {
        match self {
            Prober::Miso(l) => l.m(),
            Prober::Mimo(p) => p.tx.m(),
        }
    }

    pub fn m_r(&self) -> usize {
        match self {
            Prober::Miso(_) => 1,
            Prober::Mimo(p) => p.rx.m(),
        }
    }

    /// Noise values needed per sample: one per codeword (MISO) or one
    /// `m_r`-vector per codeword (MIMO).
    pub fn noise_per_sample(&self) -> usize {
        self.n() * self.m_r()
    }

    /// Transmit beams and, for MIMO, receive beams.
    pub fn beams(&self) -> (Vec<Beam>, Option<Vec<Beam>>) {
        match self {
            Prober::Miso(l) => (l.beams(), None),
            Prober::Mimo(p) => (p.tx.beams(), Some(p.rx.beams())),
        }
    }

    /// `y[b][n] = amp w_n^H H_b^H v_n + w_n^H noise[b][n]` (with `w = 1` for
    /// MISO), returned row-major `batch x n`. `noise` is laid out per sample,
    /// per codeword, then per receive antenna.
    pub fn forward(
        &self,
        channels: &[&ChannelMatrix],
        noise: &[Complex64],
        amp: f64,
    ) -> Result<(Vec<Complex64>, ProbeCache), NeuralError> {
        let (b, n, m_t, m_r) = (channels.len(), self.n(), self.m_t(), self.m_r());
        if noise.len() != b * n * m_r {
            return Err(shape_err("noise", &[b * n * m_r], &[noise.len()]));
        }
        if let Some(h) = channels.iter().find(|h| h.m_t() != m_t || h.m_r() != m_r) {
            return Err(shape_err("channel", &[m_t, m_r], &[h.m_t(), h.m_r()]));
        }
        let mut y = Vec::with_capacity(b * n);
        match self {
            Prober::Miso(layer) => {
                let w = layer.weights();
                let conj: Vec<ChannelMatrix> = channels
                    .iter()
                    .map(|h| ChannelMatrix::from_vector(h.as_slice().iter().map(|c| c.conj()).collect()))
                    .collect();
                for (hb, nb) in conj.iter().zip(noise.chunks(n)) {
                    let hs = hb.as_slice();
                    for (wn, nz) in w.iter().zip(nb) {
                        let s: Complex64 = hs.iter().zip(wn).map(|(a, v)| a * v).sum();
                        y.push(amp * s + nz);
                    }
                }
                Ok((
                    y,
                    ProbeCache {
                        batch: b,
                        amp,
                        channels: conj,
                        noise: noise.to_vec(),
                        tx_w: w,
                        rx_w: Vec::new(),
                        x: Vec::new(),
                    },
                ))
            }
            Prober::Mimo(pair) => {
                let (v, w) = (pair.tx.weights(), pair.rx.weights());
                let mut xs = Vec::with_capacity(b * n);
                for (h, nb) in channels.iter().zip(noise.chunks(n * m_r)) {
                    for (j, (vn, wn)) in v.iter().zip(&w).enumerate() {
                        let x = h.herm_mul(vn);
                        let nz = &nb[j * m_r..(j + 1) * m_r];
                        let s: Complex64 = wn.iter().zip(&x).map(|(a, c)| a.conj() * c).sum();
                        let e: Complex64 = wn.iter().zip(nz).map(|(a, c)| a.conj() * c).sum();
                        y.push(amp * s + e);
                        xs.push(x);
                    }
                }
                Ok((
                    y,
                    ProbeCache {
                        batch: b,
                        amp,
                        channels: channels.iter().map(|h| (*h).clone()).collect(),
                        noise: noise.to_vec(),
                        tx_w: v,
                        rx_w: w,
                        x: xs,
                    },
                ))
            }
        }
    }

    /// Accumulates phase grads from `dy = dL/dRe(y) + j dL/dIm(y)`.
    pub fn backward(&mut self, cache: &ProbeCache, dy: &[Complex64]) {
        let n = self.n();
        assert_eq!(dy.len(), cache.batch * n, "dy length");
        let amp = cache.amp;
        match self {
            Prober::Miso(layer) => {
                let g = &mut layer.theta.grad.data;
                for (hb, db) in cache.channels.iter().zip(dy.chunks(n)) {
                    for (k, hk) in hb.as_slice().iter().enumerate() {
                        for (j, d) in db.iter().enumerate() {
                            let dydt = amp * hk * J * cache.tx_w[j][k];
                            g[k * n + j] += (d.conj() * dydt).re;
                        }
                    }
                }
            }
            Prober::Mimo(pair) => {
                let (m_t, m_r) = (pair.tx.m(), pair.rx.m());
                let gt = &mut pair.tx.theta.grad.data;
                let gr = &mut pair.rx.theta.grad.data;
                for (bi, h) in cache.channels.iter().enumerate() {
                    for j in 0..n {
                        let d = dy[bi * n + j].conj();
                        let wn = &cache.rx_w[j];
                        let vn = &cache.tx_w[j];
                        // H w_n, so that conj(H w_n)_t = sum_r conj(H_tr) conj(w_r)
                        let hw = h.mul(wn);
                        for t in 0..m_t {
                            let dydt = amp * hw[t].conj() * J * vn[t];
                            gt[t * n + j] += (d * dydt).re;
                        }
                        let x = &cache.x[bi * n + j];
                        let nz = &cache.noise[(bi * n + j) * m_r..(bi * n + j + 1) * m_r];
                        for r in 0..m_r {
                            let dydp = -J * wn[r].conj() * (amp * x[r] + nz[r]);
                            gr[r * n + j] += (d * dydp).re;
                        }
                    }
                }
            }
        }
    }
}

impl Parameters for Prober {
    fn params(&self) -> Vec<&Param> {
        match self {
            Prober::Miso(l) => vec![&l.theta],
            Prober::Mimo(p) => vec![&p.tx.theta, &p.rx.theta],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Prober::Miso(l) => vec![&mut l.theta],
            Prober::Mimo(p) => vec![&mut p.tx.theta, &mut p.rx.theta],
        }
    }
}

/// `z = Re(y)^2 + Im(y)^2`, shaped `rows x cols`.
pub fn power_layer(y: &[Complex64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, y.iter().map(|c| c.norm_sqr()).collect()).expect("y length is rows * cols")
}

/// `dL/dRe(y) + j dL/dIm(y)` from `dL/dz`.
pub fn power_backward(y: &[Complex64], dz: &Matrix) -> Vec<Complex64> {
    y.iter()
        .zip(&dz.data)
        .map(|(c, d)| Complex64::new(2.0 * c.re * d, 2.0 * c.im * d))
        .collect()
}

/// How received powers are scaled before entering a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "scale")]
pub enum InputScaling {
    /// Watts as measured.
    Raw,
    /// Divide by a fixed reference power.
    Reference(f64),
    /// Divide each row by its own mean.
    PerSample,
}

#[derive(Debug, Clone)]
pub struct ScaleCache {
    z: Matrix,
    means: Vec<f64>,
}

impl InputScaling {
    pub fn forward(&self, z: &Matrix) -> (Matrix, ScaleCache) {
        let mut u = z.clone();
        let mut means = Vec::new();
        match *self {
            InputScaling::Raw => {}
            InputScaling::Reference(s) => u.data.iter_mut().for_each(|v| *v /= s),
            InputScaling::PerSample => {
                for i in 0..z.rows {
                    let m = z.row(i).iter().sum::<f64>() / z.cols as f64;
                    means.push(m);
                    if m > 0.0 {
                        u.row_mut(i).iter_mut().for_each(|v| *v /= m);
                    }
                }
            }
        }
        (u, ScaleCache { z: z.clone(), means })
    }

    pub fn backward(&self, cache: &ScaleCache, du: &Matrix) -> Matrix {
        let mut dz = du.clone();
        match *self {
            InputScaling::Raw => {}
            InputScaling::Reference(s) => dz.data.iter_mut().for_each(|v| *v /= s),
            InputScaling::PerSample => {
                let n = du.cols as f64;
                for (i, &m) in cache.means.iter().enumerate() {
                    if m <= 0.0 {
                        dz.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let dot: f64 = du.row(i).iter().zip(cache.z.row(i)).map(|(a, b)| a * b).sum();
                    let shift = dot / (n * m * m);
                    for (d, g) in dz.row_mut(i).iter_mut().zip(du.row(i)) {
                        *d = g / m - shift;
                    }
                }
            }
        }
        dz
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::SystemConfig;
    use crate::neural::finite_diff_check;
    use crate::rng::{stream, Purpose};
    use crate::sweep::{rx_signal_mimo_with_noise, rx_signal_miso_with_noise};
    use std::f64::consts::SQRT_2;

    fn cplx(rng: &mut impl Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn all_ones_beam_on_all_ones_channel() {
        let layer = ProbingLayer {
            theta: Param::new("t", Matrix::zeros(2, 3)),
        };
        let h = ChannelMatrix::from_vector(vec![Complex64::new(1.0, 0.0); 2]);
        let (y, _) = Prober::Miso(layer)
            .forward(&[&h], &[Complex64::new(0.0, 0.0); 3], 1.0)
            .unwrap();
        for v in y {
            assert!((v - Complex64::new(SQRT_2, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn miso_matches_sweep_and_noise_is_additive() {
        let mut rng = stream(1, Purpose::Init);
        let cfg = SystemConfig::new(6, 1, 8, 1, 0.5, 10.0, None, 1e6).unwrap();
        let layer = Prober::Miso(ProbingLayer::new("t", 6, 4, &mut rng));
        let h = ChannelMatrix::from_vector(cplx(&mut rng, 6));
        let noise = cplx(&mut rng, 4);
        let amp = cfg.tx_power().sqrt();
        let (y, _) = layer.forward(&[&h], &noise, amp).unwrap();
        let (tx, _) = layer.beams();
        let reference = rx_signal_miso_with_noise(h.column(0), &tx, &cfg, &noise).unwrap();
        for (a, b) in y.iter().zip(&reference) {
            assert!((a - b).norm() < 1e-12);
        }
        let (clean, _) = layer.forward(&[&h], &[Complex64::new(0.0, 0.0); 4], amp).unwrap();
        for ((a, c), n) in y.iter().zip(&clean).zip(&noise) {
            assert!((a - c - n).norm() < 1e-12);
        }
        for b in &tx {
            assert!(b.modulus_deviation() < 1e-12);
        }
    }

    #[test]
    fn mimo_matches_sweep() {
        let mut rng = stream(2, Purpose::Init);
        let cfg = SystemConfig::new(4, 3, 4, 3, 0.5, 0.0, None, 1e6).unwrap();
        let pair = Prober::Mimo(ProbingPair {
            tx: ProbingLayer::new("t", 4, 5, &mut rng),
            rx: ProbingLayer::new("r", 3, 5, &mut rng),
        });
        let h = ChannelMatrix::from_column_major(4, 3, cplx(&mut rng, 12));
        let noise = cplx(&mut rng, 15);
        let (y, _) = pair.forward(&[&h], &noise, cfg.tx_power().sqrt()).unwrap();
        let (tx, rx) = pair.beams();
        let rx = rx.unwrap();
        let pairs: Vec<(&Beam, &Beam)> = tx.iter().zip(&rx).collect();
        let per: Vec<Vec<Complex64>> = noise.chunks(3).map(|c| c.to_vec()).collect();
        let reference = rx_signal_mimo_with_noise(&h, &pairs, &cfg, &per).unwrap();
        for (a, b) in y.iter().zip(&reference) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(pair.forward(&[&h], &noise[..14], 1.0).is_err());
    }

    #[test]
    fn power_layer_values_and_gradient() {
        let y = [Complex64::new(3.0, 4.0), Complex64::new(1.0, 0.0)];
        let z = power_layer(&y, 1, 2);
        assert_eq!(z.data, vec![25.0, 1.0]);
        let g = power_backward(&y, &Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap());
        assert_eq!(g[1], Complex64::new(2.0, 0.0));

        let mut rng = stream(3, Purpose::Init);
        let ys = cplx(&mut rng, 10);
        let w: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let dz = Matrix::from_vec(1, 10, w.clone()).unwrap();
        let g = power_backward(&ys, &dz);
        let flat: Vec<f64> = ys.iter().flat_map(|c| [c.re, c.im]).collect();
        let analytic: Vec<f64> = g.iter().flat_map(|c| [c.re, c.im]).collect();
        let err = finite_diff_check(
            |v| {
                let y: Vec<Complex64> = v.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect();
                power_layer(&y, 1, 10).data.iter().zip(&w).map(|(a, b)| a * b).sum()
            },
            &flat,
            &analytic,
            1e-6,
            200,
            0,
        );
        assert!(err <= 1e-6, "{err}");
    }

    fn probe_grad_check(prober: Prober, m_t: usize, m_r: usize, seed: u64) {
        let mut rng = stream(seed, Purpose::Init);
        let b = 3;
        let hs: Vec<ChannelMatrix> = (0..b)
            .map(|_| ChannelMatrix::from_column_major(m_t, m_r, cplx(&mut rng, m_t * m_r)))
            .collect();
        let refs: Vec<&ChannelMatrix> = hs.iter().collect();
        let noise: Vec<Complex64> = cplx(&mut rng, b * prober.noise_per_sample())
            .into_iter()
            .map(|c| c * 0.3)
            .collect();
        let n = prober.n();
        let weights: Vec<f64> = (0..b * n).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4).collect();
        let loss = |p: &Prober| -> f64 {
            let (y, _) = p.forward(&refs, &noise, 1.3).unwrap();
            let z = power_layer(&y, b, n);
            let (u, _) = InputScaling::PerSample.forward(&z);
            u.data.iter().zip(&weights).map(|(a, w)| a * w).sum()
        };
        let mut p = prober;
        let (y, cache) = p.forward(&refs, &noise, 1.3).unwrap();
        let z = power_layer(&y, b, n);
        let (_, sc) = InputScaling::PerSample.forward(&z);
        let du = Matrix::from_vec(b, n, weights.clone()).unwrap();
        let dz = InputScaling::PerSample.backward(&sc, &du);
        p.zero_grad();
        p.backward(&cache, &power_backward(&y, &dz));
        let analytic = p.flat_grads();
        let x0 = p.flat_values();
        let mut probe = p.clone();
        let err = finite_diff_check(
            |v| {
                probe.set_flat_values(v);
                loss(&probe)
            },
            &x0,
            &analytic,
            1e-6,
            200,
            seed,
        );
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn probing_gradients_match_finite_differences() {
        let mut rng = stream(4, Purpose::Init);
        probe_grad_check(Prober::Miso(ProbingLayer::new("t", 4, 3, &mut rng)), 4, 1, 5);
        let pair = ProbingPair {
            tx: ProbingLayer::new("t", 4, 3, &mut rng),
            rx: ProbingLayer::new("r", 2, 3, &mut rng),
        };
        probe_grad_check(Prober::Mimo(pair), 4, 2, 6);
    }

    #[test]
    fn scaling_modes() {
        let z = Matrix::from_vec(2, 2, vec![1.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(InputScaling::Raw.forward(&z).0, z);
        assert_eq!(
            InputScaling::Reference(2.0).forward(&z).0.data,
            vec![0.5, 1.5, 0.0, 0.0]
        );
        let (u, c) = InputScaling::PerSample.forward(&z);
        assert_eq!(u.data, vec![0.5, 1.5, 0.0, 0.0]);
        let d = InputScaling::PerSample.backward(&c, &Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap());
        assert_eq!(d.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn beams_round_trip_through_layer() {
        let mut rng = stream(7, Purpose::Init);
        let layer = ProbingLayer::new("t", 5, 3, &mut rng);
        let again = ProbingLayer::from_beams("t", &layer.beams());
        for (a, b) in layer.beams().iter().zip(again.beams()) {
            assert!(a.inner(&b).norm() > 1.0 - 1e-12);
        }
    }
}
