//! Gauss-Legendre rules and the product quadrature on spheres used for
//! force integration and annulus energies.

use crate::vec3::Vec3;

/// Gauss-Legendre nodes and weights on [-1, 1].
///
/// Newton iteration on the Legendre recurrence; exact for polynomials of
/// degree <= 2n - 1.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
        let (_, d) = legendre_with_derivative(n, 0.0);
        weights[n / 2] = 2.0 / (d * d);
    }
    (nodes, weights)
}

/// Gauss-Legendre rule mapped to [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (
        x.iter().map(|&t| mid + half * t).collect(),
        w.iter().map(|&wi| wi * half).collect(),
    )
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Product quadrature on the unit sphere: Gauss-Legendre in cos(theta)
/// (polar) times a uniform trapezoid in the azimuth, which is exact for
/// trigonometric polynomials. `polar_order` polar nodes pair with
/// `2 * polar_order` azimuthal nodes.
#[derive(Clone, Debug)]
pub struct SphereQuadrature {
    /// Unit directions.
    pub directions: Vec<Vec3>,
    /// Weights summing to 4*pi.
    pub weights: Vec<f64>,
}

impl SphereQuadrature {
    pub fn new(polar_order: usize) -> Self {
        let n_az = 2 * polar_order;
        let (ct, wt) = gauss_legendre(polar_order);
        let mut directions = Vec::with_capacity(polar_order * n_az);
        let mut weights = Vec::with_capacity(polar_order * n_az);
        let dphi = 2.0 * std::f64::consts::PI / n_az as f64;
        for (c, w) in ct.iter().zip(&wt) {
            let s = (1.0 - c * c).max(0.0).sqrt();
            for q in 0..n_az {
                let phi = dphi * q as f64;
                directions.push(Vec3::new(s * phi.cos(), s * phi.sin(), *c));
                weights.push(w * dphi);
            }
        }
        SphereQuadrature { directions, weights }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Integrate a vector integrand over the sphere of radius `r` about
    /// `center`; the surface measure r^2 is included.
    pub fn integrate_vec<E>(&self, center: Vec3, r: f64, mut f: E) -> crate::error::Result<Vec3>
    where
        E: FnMut(Vec3, Vec3) -> crate::error::Result<Vec3>,
    {
        let mut acc = Vec3::ZERO;
        for (dir, w) in self.directions.iter().zip(&self.weights) {
            let x = center + *dir * r;
            acc += f(x, *dir)? * (w * r * r);
        }
        Ok(acc)
    }
}
