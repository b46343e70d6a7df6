//! Particle clouds in a box under dilution constraints, the exhaustive
//! spacing certificate, and the empirical density/flux measures.
//!
//! Particles live at `x_i` with normalized radii `r_i` (physical radius
//! `r_i / N`) and velocities `V_i`. A cloud is admissible when
//!
//! - every ball keeps distance `c0 N^{-1/3}` from the others and from the
//!   boundary,
//! - radii are bounded by `r0`,
//! - the mean square velocity is bounded by `e0^2`,
//! - `N >= (4 r0 / c0)^{3/2}` so each ball fits well inside its spacing cell.

use crate::error::{Error, Result};
use crate::vec3::Vec3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SIX_PI: f64 = 6.0 * std::f64::consts::PI;

/// Axis-aligned open cube domain.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Domain {
    pub side_length: f64,
    pub origin: Vec3,
}

impl Domain {
    pub fn unit() -> Self {
        Domain { side_length: 1.0, origin: Vec3::ZERO }
    }

    pub fn new(side_length: f64, origin: Vec3) -> Result<Self> {
        if !(side_length > 0.0) {
            return Err(Error::InvalidInput(format!(
                "domain side length must be positive, got {side_length}"
            )));
        }
        Ok(Domain { side_length, origin })
    }

    pub fn contains(&self, x: Vec3) -> bool {
        let d = x - self.origin;
        (0.0..self.side_length).contains(&d.x)
            && (0.0..self.side_length).contains(&d.y)
            && (0.0..self.side_length).contains(&d.z)
    }

    /// Distance from `x` to the nearest wall.
    pub fn wall_distance(&self, x: Vec3) -> f64 {
        let d = x - self.origin;
        let l = self.side_length;
        let mut m = f64::INFINITY;
        for t in [d.x, d.y, d.z] {
            m = m.min(t).min(l - t);
        }
        m
    }

    pub fn center(&self) -> Vec3 {
        self.origin + Vec3::splat(0.5 * self.side_length)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct ParticleRecord {
    x: Vec3,
    v: Vec3,
    r: f64,
}

/// N particles with positions, velocities, normalized radii and the
/// dilution constants they were generated under.
///
/// Serializes as `{n, c0, r0, e0, domain, particles: [{x, v, r}]}` with
/// exact float round-trip.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(try_from = "CloudSerde", into = "CloudSerde")]
pub struct ParticleCloud {
    pub n: usize,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub radii: Vec<f64>,
    pub c0: f64,
    pub r0: f64,
    pub e0: f64,
    pub domain: Domain,
}

#[derive(Serialize, Deserialize)]
struct CloudSerde {
    n: usize,
    c0: f64,
    r0: f64,
    e0: f64,
    domain: Domain,
    particles: Vec<ParticleRecord>,
}

impl From<ParticleCloud> for CloudSerde {
    fn from(c: ParticleCloud) -> Self {
        CloudSerde {
            n: c.n,
            c0: c.c0,
            r0: c.r0,
            e0: c.e0,
            domain: c.domain,
            particles: c
                .positions
                .iter()
                .zip(&c.velocities)
                .zip(&c.radii)
                .map(|((x, v), r)| ParticleRecord { x: *x, v: *v, r: *r })
                .collect(),
        }
    }
}

impl TryFrom<CloudSerde> for ParticleCloud {
    type Error = Error;
    fn try_from(s: CloudSerde) -> Result<Self> {
        if s.particles.len() != s.n {
            return Err(Error::InvalidInput(format!(
                "cloud claims n={} but carries {} particles",
                s.n,
                s.particles.len()
            )));
        }
        Ok(ParticleCloud {
            n: s.n,
            positions: s.particles.iter().map(|p| p.x).collect(),
            velocities: s.particles.iter().map(|p| p.v).collect(),
            radii: s.particles.iter().map(|p| p.r).collect(),
            c0: s.c0,
            r0: s.r0,
            e0: s.e0,
            domain: s.domain,
        })
    }
}

impl ParticleCloud {
    /// Physical radius of particle `i`: `r_i / N`.
    pub fn physical_radius(&self, i: usize) -> f64 {
        self.radii[i] / self.n as f64
    }

    /// Spacing scale `c0 N^{-1/3}`.
    pub fn spacing(&self) -> f64 {
        self.c0 / (self.n as f64).cbrt()
    }
}

/// Outcome of the exhaustive dilution check.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DilutionReport {
    pub min_pair_gap: f64,
    pub min_boundary_gap: f64,
    pub max_radius: f64,
    pub mean_square_velocity: f64,
    pub h1_ok: bool,
    pub h2_ok: bool,
    pub h3_ok: bool,
    pub n_threshold_ok: bool,
}

impl DilutionReport {
    pub fn all_ok(&self) -> bool {
        self.h1_ok && self.h2_ok && self.h3_ok && self.n_threshold_ok
    }
}

/// Radius law for sampled clouds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum RadiusLaw {
    Constant { r: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl RadiusLaw {
    pub fn max(&self) -> f64 {
        match *self {
            RadiusLaw::Constant { r } => r,
            RadiusLaw::Uniform { hi, .. } => hi,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            RadiusLaw::Constant { r } => r,
            RadiusLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// Target number density shape (normalized internally).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityField {
    Uniform,
    SmoothBump { center: Vec3, width: f64 },
}

impl DensityField {
    /// Unnormalized shape value at `x`.
    pub fn shape(&self, x: Vec3) -> f64 {
        match *self {
            DensityField::Uniform => 1.0,
            DensityField::SmoothBump { center, width } => {
                ((x - center).norm_squared() / (-2.0 * width * width)).exp()
            }
        }
    }
}

/// Boundary-datum velocity law for the particles.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VelocityLaw {
    Constant { v: Vec3 },
    /// `v * (1/2 + 1/2 sin(pi t_x) sin(pi t_y) sin(pi t_z))` in normalized
    /// box coordinates; smooth and bounded by `|v|`.
    Smooth { v: Vec3 },
}

impl VelocityLaw {
    pub fn eval(&self, domain: &Domain, x: Vec3) -> Vec3 {
        match *self {
            VelocityLaw::Constant { v } => v,
            VelocityLaw::Smooth { v } => {
                let t = (x - domain.origin) / domain.side_length;
                let s = (std::f64::consts::PI * t.x).sin()
                    * (std::f64::consts::PI * t.y).sin()
                    * (std::f64::consts::PI * t.z).sin();
                v * (0.5 + 0.5 * s)
            }
        }
    }
}

/// Everything `sample_perturbed_lattice` needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub domain: Domain,
    /// Particles per side; N = m^3.
    pub m: usize,
    pub c0: f64,
    /// Jitter fraction in [0, 1); the displacement bound keeps the spacing
    /// certificate valid at any value below 1.
    pub jitter: f64,
    pub density: DensityField,
    pub velocity: VelocityLaw,
    pub radius_law: RadiusLaw,
    /// Kinetic bound constant; defaults to the realized root mean square.
    pub e0: Option<f64>,
    pub seed: u64,
}

/// Largest spacing constant c0 a jittered m^3 lattice can certify in this
/// domain for the given maximal radius.
pub fn achievable_c0(domain: &Domain, m: usize, r0: f64) -> f64 {
    let n = (m * m * m) as f64;
    let l = domain.side_length;
    ((l - 2.0 * r0 * m as f64 / n) / (1.0 + 2.0 / m as f64)).max(0.0)
}

/// Sample N = m^3 particles on a jittered sub-lattice of an inner cube with
/// margin `c0 N^{-1/3}`, certified to satisfy the dilution assumptions.
///
/// Non-uniform densities are realized by per-cell acceptance thinning with a
/// deficit re-fill on the half-offset secondary lattice (densest candidates
/// first), keeping N exactly m^3; in that mode the stored c0 is the realized
/// constant if it falls below the requested one.
pub fn sample_perturbed_lattice(spec: &LatticeSpec) -> Result<ParticleCloud> {
    if spec.m < 2 {
        return Err(Error::InvalidInput(format!("m must be at least 2, got {}", spec.m)));
    }
    if !(0.0..1.0).contains(&spec.jitter) {
        return Err(Error::InvalidInput(format!("jitter must lie in [0,1), got {}", spec.jitter)));
    }
    if !(spec.c0 > 0.0) {
        return Err(Error::InvalidInput(format!("c0 must be positive, got {}", spec.c0)));
    }
    let m = spec.m;
    let n = m * m * m;
    let nf = n as f64;
    let r0 = spec.radius_law.max();
    if !(r0 > 0.0) {
        return Err(Error::InvalidInput("radius law must produce positive radii".into()));
    }

    let threshold = (4.0 * r0 / spec.c0).powf(1.5);
    if (nf + 1e-9) < threshold {
        return Err(Error::InvalidInput(format!(
            "N = {n} below the admissibility threshold (4 r0 / c0)^(3/2) = {threshold:.3}"
        )));
    }

    let c0_max = achievable_c0(&spec.domain, m, r0);
    if spec.c0 > c0_max {
        return Err(Error::InfeasibleSpacing {
            requested: spec.c0,
            achievable: c0_max,
            m,
        });
    }

    let l = spec.domain.side_length;
    let margin = spec.c0 / m as f64; // c0 N^{-1/3}
    let inner = l - 2.0 * margin;
    let cell = inner / m as f64;
    // At full jitter two neighbors still keep ball gap c0 N^{-1/3} + 2 r0/N.
    let jit = spec.jitter * (0.5 * cell - 0.5 * spec.c0 / m as f64 - r0 / nf).max(0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let thinning = !matches!(spec.density, DensityField::Uniform);
    let shape_max = match spec.density {
        DensityField::Uniform => 1.0,
        DensityField::SmoothBump { .. } => 1.0, // gaussian shape peaks at 1
    };

    let site = |i: usize, j: usize, k: usize| -> Vec3 {
        spec.domain.origin
            + Vec3::new(
                margin + cell * (i as f64 + 0.5),
                margin + cell * (j as f64 + 0.5),
                margin + cell * (k as f64 + 0.5),
            )
    };

    let mut positions = Vec::with_capacity(n);
    let mut radii = Vec::with_capacity(n);
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                if thinning {
                    let p = spec.density.shape(site(i, j, k)) / shape_max;
                    if rng.random::<f64>() >= p {
                        continue;
                    }
                }
                let dx = Vec3::new(
                    jit * (2.0 * rng.random::<f64>() - 1.0),
                    jit * (2.0 * rng.random::<f64>() - 1.0),
                    jit * (2.0 * rng.random::<f64>() - 1.0),
                );
                positions.push(site(i, j, k) + dx);
                radii.push(spec.radius_law.draw(&mut rng));
            }
        }
    }

    if thinning && positions.len() < n {
        refill_deficit(spec, &mut rng, &mut positions, &mut radii, margin, cell, r0)?;
    }
    debug_assert_eq!(positions.len(), n);

    let velocities: Vec<Vec3> =
        positions.iter().map(|&x| spec.velocity.eval(&spec.domain, x)).collect();
    let msv = velocities.iter().map(|v| v.norm_squared()).sum::<f64>() / nf;
    let e0 = spec.e0.unwrap_or_else(|| msv.sqrt());

    let mut cloud = ParticleCloud {
        n,
        positions,
        velocities,
        radii,
        c0: spec.c0,
        r0,
        e0,
        domain: spec.domain,
    };

    if thinning {
        // Report the realized constant when refill sites tightened spacing.
        let report = verify_assumptions(&cloud);
        let realized = report.min_pair_gap.min(report.min_boundary_gap) * nf.cbrt();
        if realized < cloud.c0 {
            cloud.c0 = realized * (1.0 - 1e-12);
        }
    }

    let report = verify_assumptions(&cloud);
    if !report.all_ok() {
        return Err(Error::InvalidInput(format!(
            "sampled cloud fails its own certificate: {report:?}"
        )));
    }
    Ok(cloud)
}

fn refill_deficit(
    spec: &LatticeSpec,
    rng: &mut ChaCha8Rng,
    positions: &mut Vec<Vec3>,
    radii: &mut Vec<f64>,
    margin: f64,
    cell: f64,
    r0: f64,
) -> Result<()> {
    let m = spec.m;
    let n = m * m * m;
    let nf = n as f64;
    let d_min = spec.c0 / m as f64 + 2.0 * r0 / nf;
    // Secondary lattice: interior cell corners, densest first.
    let mut candidates = Vec::new();
    for i in 0..m.saturating_sub(1) {
        for j in 0..m.saturating_sub(1) {
            for k in 0..m.saturating_sub(1) {
                let x = spec.domain.origin
                    + Vec3::new(
                        margin + cell * (i as f64 + 1.0),
                        margin + cell * (j as f64 + 1.0),
                        margin + cell * (k as f64 + 1.0),
                    );
                candidates.push((spec.density.shape(x), x));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (_, x) in candidates {
        if positions.len() == n {
            break;
        }
        let safe = positions.iter().all(|p| (*p - x).norm() >= d_min)
            && spec.domain.wall_distance(x) >= spec.c0 / m as f64 + r0 / nf;
        if safe {
            positions.push(x);
            radii.push(spec.radius_law.draw(rng));
        }
    }
    if positions.len() < n {
        return Err(Error::InvalidInput(format!(
            "density too concentrated: only {} of {} particles placeable under the spacing constraint",
            positions.len(),
            n
        )));
    }
    Ok(())
}

/// Exhaustive O(N^2) verification of the dilution assumptions.
pub fn verify_assumptions(cloud: &ParticleCloud) -> DilutionReport {
    let n = cloud.n as f64;
    let spacing = cloud.spacing();
    let mut min_pair_gap = f64::INFINITY;
    for i in 0..cloud.n {
        for j in i + 1..cloud.n {
            let gap = (cloud.positions[i] - cloud.positions[j]).norm()
                - (cloud.radii[i] + cloud.radii[j]) / n;
            min_pair_gap = min_pair_gap.min(gap);
        }
    }
    let mut min_boundary_gap = f64::INFINITY;
    for i in 0..cloud.n {
        let gap = cloud.domain.wall_distance(cloud.positions[i]) - cloud.radii[i] / n;
        min_boundary_gap = min_boundary_gap.min(gap);
    }
    let max_radius = cloud.radii.iter().cloned().fold(0.0_f64, f64::max);
    let mean_square_velocity =
        cloud.velocities.iter().map(|v| v.norm_squared()).sum::<f64>() / n;

    let slack = 1.0 - 1e-12;
    DilutionReport {
        min_pair_gap,
        min_boundary_gap,
        max_radius,
        mean_square_velocity,
        h1_ok: min_pair_gap >= spacing * slack && min_boundary_gap >= spacing * slack,
        h2_ok: max_radius <= cloud.r0 * (1.0 + 1e-12),
        h3_ok: mean_square_velocity <= cloud.e0 * cloud.e0 * (1.0 + 1e-12),
        n_threshold_ok: n + 1e-9 >= (4.0 * cloud.r0 / cloud.c0).powf(1.5),
    }
}

/// Weighted point masses: `components` scalar weights per support point
/// (1 for densities, 3 for fluxes).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiscreteMeasure {
    pub points: Vec<Vec3>,
    pub components: usize,
    /// Point-major weights; `weights[i]` has `components` entries.
    pub weights: Vec<Vec<f64>>,
}

impl DiscreteMeasure {
    pub fn scalar(points: Vec<Vec3>, weights: Vec<f64>) -> Self {
        assert_eq!(points.len(), weights.len());
        DiscreteMeasure {
            points,
            components: 1,
            weights: weights.into_iter().map(|w| vec![w]).collect(),
        }
    }

    pub fn vector(points: Vec<Vec3>, weights: Vec<Vec3>) -> Self {
        assert_eq!(points.len(), weights.len());
        DiscreteMeasure {
            points,
            components: 3,
            weights: weights.into_iter().map(|w| vec![w.x, w.y, w.z]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Total mass of one component.
    pub fn mass(&self, component: usize) -> f64 {
        self.weights.iter().map(|w| w[component]).sum()
    }

    pub fn masses(&self) -> Vec<f64> {
        (0..self.components).map(|c| self.mass(c)).collect()
    }
}

/// Empirical moments of a cloud: the density `rho^N = (6 pi / N) sum r_i
/// delta_{x_i}` and flux `j^N = (6 pi / N) sum r_i V_i delta_{x_i}`, with
/// the Stokes-drag factor folded into the weights.
pub fn empirical_moments(cloud: &ParticleCloud) -> (DiscreteMeasure, DiscreteMeasure) {
    empirical_moments_with(cloud, true)
}

/// As [`empirical_moments`]; `radius_weighted = false` drops the `r_i`
/// factor (the two variants coincide for unit radii).
pub fn empirical_moments_with(
    cloud: &ParticleCloud,
    radius_weighted: bool,
) -> (DiscreteMeasure, DiscreteMeasure) {
    let scale = SIX_PI / cloud.n as f64;
    let weight = |i: usize| if radius_weighted { scale * cloud.radii[i] } else { scale };
    let rho = DiscreteMeasure::scalar(
        cloud.positions.clone(),
        (0..cloud.n).map(&weight).collect(),
    );
    let j = DiscreteMeasure::vector(
        cloud.positions.clone(),
        (0..cloud.n).map(|i| cloud.velocities[i] * weight(i)).collect(),
    );
    (rho, j)
}

/// Midpoint-rule discretization of a scalar field on a k^3 cell grid.
pub fn discretize_scalar<F>(field: F, domain: &Domain, k: usize) -> Result<DiscreteMeasure>
where
    F: Fn(Vec3) -> f64,
{
    let centers = cell_centers(domain, k)?;
    let h3 = (domain.side_length / k as f64).powi(3);
    let weights = centers.iter().map(|&c| field(c) * h3).collect();
    Ok(DiscreteMeasure::scalar(centers, weights))
}

/// Midpoint-rule discretization of a vector field on a k^3 cell grid.
pub fn discretize_vector<F>(field: F, domain: &Domain, k: usize) -> Result<DiscreteMeasure>
where
    F: Fn(Vec3) -> Vec3,
{
    let centers = cell_centers(domain, k)?;
    let h3 = (domain.side_length / k as f64).powi(3);
    let weights = centers.iter().map(|&c| field(c) * h3).collect();
    Ok(DiscreteMeasure::vector(centers, weights))
}

fn cell_centers(domain: &Domain, k: usize) -> Result<Vec<Vec3>> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("grid resolution must be >= 2, got {k}")));
    }
    let h = domain.side_length / k as f64;
    let mut centers = Vec::with_capacity(k * k * k);
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                centers.push(
                    domain.origin
                        + Vec3::new(
                            h * (i as f64 + 0.5),
                            h * (j as f64 + 0.5),
                            h * (l as f64 + 0.5),
                        ),
                );
            }
        }
    }
    Ok(centers)
}
