//! Reference distributions `F_U` over rank space and the matching solver domains.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::points::Points;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    #[default]
    Gaussian,
    /// Uniform on the closed unit ball.
    UniformBall,
    /// Uniform on `[-1, 1]^d`.
    UniformBox,
}

/// Feasible set for the conjugate maximization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Unbounded,
    Ball(f64),
    Box { lo: f64, hi: f64 },
}

impl Domain {
    pub fn project(&self, u: &mut [f64]) {
        match *self {
            Domain::Unbounded => {}
            Domain::Ball(r) => {
                let n = crate::points::norm(u);
                if n > r {
                    let s = r / n;
                    u.iter_mut().for_each(|v| *v *= s);
                }
            }
            Domain::Box { lo, hi } => u.iter_mut().for_each(|v| *v = v.clamp(lo, hi)),
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        match *self {
            Domain::Unbounded => true,
            Domain::Ball(r) => crate::points::norm(u) <= r * (1.0 + 1e-12),
            Domain::Box { lo, hi } => u.iter().all(|&v| v >= lo && v <= hi),
        }
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self, Domain::Unbounded)
    }
}

impl Reference {
    pub fn domain(&self) -> Domain {
        match self {
            Reference::Gaussian => Domain::Unbounded,
            Reference::UniformBall => Domain::Ball(1.0),
            Reference::UniformBox => Domain::Box { lo: -1.0, hi: 1.0 },
        }
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            Reference::Gaussian => out
                .iter_mut()
                .for_each(|v| *v = StandardNormal.sample(rng)),
            Reference::UniformBall => sample_unit_ball(rng, out),
            Reference::UniformBox => out.iter_mut().for_each(|v| *v = rng.random_range(-1.0..=1.0)),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        self.sample_into(rng, &mut v);
        v
    }

    pub fn sample_points<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, d: usize) -> Points {
        let mut data = vec![0.0; n * d];
        for row in data.chunks_mut(d.max(1)).take(n) {
            self.sample_into(rng, row);
        }
        Points::new(d, data).expect("consistent shape")
    }

    /// Density `f_U(u)`.
    pub fn density(&self, u: &[f64]) -> f64 {
        let d = u.len() as f64;
        match self {
            Reference::Gaussian => {
                let sq: f64 = u.iter().map(|v| v * v).sum();
                (-0.5 * sq - 0.5 * d * (2.0 * std::f64::consts::PI).ln()).exp()
            }
            Reference::UniformBall => {
                if crate::points::norm(u) <= 1.0 {
                    1.0 / unit_ball_volume(u.len())
                } else {
                    0.0
                }
            }
            Reference::UniformBox => {
                if u.iter().all(|v| v.abs() <= 1.0) {
                    0.5_f64.powi(u.len() as i32)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Uniform draw from the unit ball: Gaussian direction, radius `v^(1/d)`.
pub fn sample_unit_ball<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    let d = out.len();
    if d == 0 {
        return;
    }
    loop {
        out.iter_mut()
            .for_each(|v| *v = StandardNormal.sample(rng));
        let n = crate::points::norm(out);
        if n > 1e-300 {
            let r: f64 = rng.random::<f64>().powf(1.0 / d as f64);
            out.iter_mut().for_each(|v| *v *= r / n);
            return;
        }
    }
}

pub fn unit_ball_volume(d: usize) -> f64 {
    let d = d as f64;
    std::f64::consts::PI.powf(d / 2.0) / statrs::function::gamma::gamma(d / 2.0 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ball_samples_stay_inside_and_fill_radially() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inside_half = 0;
        let n = 20_000;
        for _ in 0..n {
            let u = Reference::UniformBall.sample(&mut rng, 2);
            let r = crate::points::norm(&u);
            assert!(r <= 1.0);
            if r <= 0.5 {
                inside_half += 1;
            }
        }
        // P(r <= 1/2) = 1/4 in 2-D
        let frac = inside_half as f64 / n as f64;
        assert!((frac - 0.25).abs() < 0.015, "{frac}");
    }

    #[test]
    fn projections() {
        let mut u = vec![3.0, -4.0];
        Domain::Ball(1.0).project(&mut u);
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] + 0.8).abs() < 1e-15);
        let mut u = vec![3.0, -0.5];
        Domain::Box { lo: -1.0, hi: 1.0 }.project(&mut u);
        assert_eq!(u, vec![1.0, -0.5]);
    }

    #[test]
    fn densities() {
        let g = Reference::Gaussian.density(&[0.0, 0.0]);
        assert!((g - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-12);
        assert!((unit_ball_volume(3) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(Reference::UniformBox.density(&[0.5, 2.0]), 0.0);
    }
}
