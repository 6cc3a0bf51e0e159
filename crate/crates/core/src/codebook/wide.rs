//! Constant-modulus wide beams by alternating projection.
//!
//! The iterate alternates between the array pattern sampled on an
//! oversampled sine grid, projected onto a flat-in-sector / zero-outside
//! magnitude target, and the constant-modulus set. Several starts are run
//! (a chirp spanning the sector plus random phases) and the iterate with the
//! largest worst-case in-sector gain is kept, after a soft-min phase ascent.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;

use super::{Beam, CodebookError};

#[derive(Debug, Clone, PartialEq)]
pub struct WideBeamOptions {
    pub spacing_over_lambda: f64,
    pub iters: usize,
    /// Random starts in addition to the chirp start.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for WideBeamOptions {
    fn default() -> Self {
        Self {
            spacing_over_lambda: 0.5,
            iters: 300,
            restarts: 3,
            seed: 0x00a3_cf00,
        }
    }
}

/// Grid oversampling factor relative to the array size.
const GRID_FACTOR: usize = 4;

fn grid(m: usize) -> Vec<f64> {
    let k = GRID_FACTOR * m;
    (0..k).map(|i| -1.0 + 2.0 * i as f64 / k as f64).collect()
}

/// `|a(u)^H w|^2` for the unnormalized ULA response `a(u)`.
pub fn pattern_gain(w: &[Complex64], spacing_over_lambda: f64, u: f64) -> f64 {
    let step = -2.0 * PI * spacing_over_lambda * u;
    w.iter()
        .enumerate()
        .map(|(n, x)| Complex64::from_polar(1.0, step * n as f64) * x)
        .sum::<Complex64>()
        .norm_sqr()
}

/// Whether sine `u` falls inside `[lo, hi]` modulo the aliasing period `1/d`.
fn in_sector(u: f64, lo: f64, hi: f64, period: f64) -> bool {
    [-period, 0.0, period].iter().any(|shift| {
        let x = u + shift;
        x >= lo && x <= hi
    })
}

/// Synthesizes a constant-modulus beam covering `sector = [lo, hi]` in sine
/// space. Bounds may extend past +-1; they wrap with the aliasing period.
pub fn wide_beam_synthesize<R: Rng + ?Sized>(
    m: usize,
    sector: [f64; 2],
    opts: &WideBeamOptions,
    rng: &mut R,
) -> Result<Beam, CodebookError> {
    let [lo, hi] = sector;
    if m == 0 {
        return Err(CodebookError::EmptyArray);
    }
    let d = opts.spacing_over_lambda;
    let period = 1.0 / d;
    if !(lo.is_finite() && hi.is_finite() && lo < hi && hi - lo <= period + 1e-12) {
        return Err(CodebookError::EmptySector { lo, hi });
    }
    let us = grid(m);
    let mut inside: Vec<bool> = us.iter().map(|&u| in_sector(u, lo, hi, period)).collect();
    if !inside.iter().any(|&b| b) {
        // Sector narrower than the grid spacing: use the nearest grid point.
        let mid = 0.5 * (lo + hi);
        let nearest = (0..us.len())
            .min_by(|&a, &b| {
                let da = circ_dist(us[a], mid, period);
                let db = circ_dist(us[b], mid, period);
                da.total_cmp(&db)
            })
            .expect("grid nonempty");
        inside[nearest] = true;
    }
    let n_in = inside.iter().filter(|&&b| b).count();
    let k = us.len() as f64;
    let target = (k / n_in as f64).sqrt();

    // steer[i][n] = e^{-j 2 pi d u_i n}, so that r = steer * w.
    let steer: Vec<Vec<Complex64>> = us
        .iter()
        .map(|&u| {
            (0..m)
                .map(|n| Complex64::from_polar(1.0, -2.0 * PI * d * u * n as f64))
                .collect()
        })
        .collect();

    let score = |phases: &[f64]| -> f64 {
        let w = Beam::from_phases(phases);
        let gains: Vec<f64> = steer
            .iter()
            .zip(&inside)
            .filter(|(_, &ins)| ins)
            .map(|(row, _)| {
                row.iter()
                    .zip(w.weights())
                    .map(|(a, b)| a * b)
                    .sum::<Complex64>()
                    .norm_sqr()
            })
            .collect();
        gains.iter().cloned().fold(f64::INFINITY, f64::min)
    };

    let width = hi - lo;
    let chirp: Vec<f64> = (0..m)
        .map(|n| {
            let n = n as f64;
            let span = if m > 1 { (m - 1) as f64 } else { 1.0 };
            2.0 * PI * d * (lo * n + width * n * n / (2.0 * span))
        })
        .collect();
    let mut starts = vec![chirp];
    for _ in 0..opts.restarts {
        starts.push((0..m).map(|_| rng.random_range(-PI..PI)).collect());
    }

    let mut best_phases = starts[0].clone();
    let mut best_score = score(&best_phases);
    let scale = 1.0 / (m as f64).sqrt();
    for start in starts {
        let start_copy = start.clone();
        let mut phases = start;
        let s = score(&phases);
        if s > best_score {
            best_score = s;
            best_phases = phases.clone();
        }
        for _ in 0..opts.iters {
            let w: Vec<Complex64> = phases.iter().map(|&p| Complex64::from_polar(scale, p)).collect();
            let mut back = vec![Complex64::new(0.0, 0.0); m];
            for (row, &ins) in steer.iter().zip(&inside) {
                if !ins {
                    continue;
                }
                let r: Complex64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
                let t = if r.norm() > 0.0 {
                    r * (target / r.norm())
                } else {
                    Complex64::new(target, 0.0)
                };
                for (b, a) in back.iter_mut().zip(row) {
                    *b += a.conj() * t;
                }
            }
            for (p, b) in phases.iter_mut().zip(&back) {
                if b.norm() > 0.0 {
                    *p = b.arg();
                }
            }
            let s = score(&phases);
            if s > best_score {
                best_score = s;
                best_phases = phases.clone();
            }
        }
        let rows: Vec<&Vec<Complex64>> = steer.iter().zip(&inside).filter(|(_, &i)| i).map(|(r, _)| r).collect();
        for mut candidate in [start_copy, phases] {
            refine_min_gain(&mut candidate, &rows, opts.iters);
            let s = score(&candidate);
            if s > best_score {
                best_score = s;
                best_phases = candidate;
            }
        }
    }
    Ok(Beam::from_phases(&best_phases))
}

/// Soft-min ascent on the in-sector gains over the element phases.
fn refine_min_gain(phases: &mut [f64], rows: &[&Vec<Complex64>], iters: usize) {
    let m = phases.len();
    let scale = 1.0 / (m as f64).sqrt();
    let mut lr = 0.05;
    let mut best = phases.to_vec();
    let mut best_min = f64::NEG_INFINITY;
    for _ in 0..iters {
        let w: Vec<Complex64> = phases.iter().map(|&p| Complex64::from_polar(scale, p)).collect();
        let r: Vec<Complex64> = rows
            .iter()
            .map(|row| row.iter().zip(&w).map(|(a, b)| a * b).sum())
            .collect();
        let g: Vec<f64> = r.iter().map(|x| x.norm_sqr()).collect();
        let min = g.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > best_min {
            best_min = min;
            best.copy_from_slice(phases);
        }
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let beta = 20.0 / mean.max(1e-300);
        let e: Vec<f64> = g.iter().map(|x| (-beta * (x - min)).exp()).collect();
        let total: f64 = e.iter().sum();
        let mut grad = vec![0.0; m];
        for ((row, ri), ei) in rows.iter().zip(&r).zip(&e) {
            let a = ei / total;
            for (n, gn) in grad.iter_mut().enumerate() {
                // d|r|^2/dp_n = 2 Re(conj(r) a_n j w_n)
                let d = ri.conj() * row[n] * Complex64::new(0.0, 1.0) * w[n];
                *gn += a * 2.0 * d.re;
            }
        }
        let peak = grad.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        if peak == 0.0 {
            break;
        }
        for (p, gn) in phases.iter_mut().zip(&grad) {
            *p += lr * gn / peak;
        }
        lr *= 0.995;
    }
    phases.copy_from_slice(&best);
}

fn circ_dist(a: f64, b: f64, period: f64) -> f64 {
    let x = (a - b).rem_euclid(period);
    x.min(period - x)
}
