//! Synthetic voxel data with known ground truth, Rician noise, and a
//! Monte Carlo random-walk oracle for the restricted-sphere signal.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::acquisition::{pulse_strength_factor, AcquisitionPoint, AcquisitionScheme, VoxelTable};
use crate::error::{Error, Result};
use crate::signal::{default_sphere_roots, verdict_signal_with, FixedDiffusivities, TissueParams, VascularGeometry};

/// Raw value written for DW entries of non-planted shells in
/// planted-information phantoms (as a fraction of the b0 level).
pub const UNINFORMATIVE_LEVEL: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub n_voxels: usize,
    pub f_ic_range: (f64, f64),
    pub f_ees_range: (f64, f64),
    /// Radius range in um.
    pub radius_range: (f64, f64),
    /// b0-referenced signal-to-noise ratio; `None` means noiseless.
    pub snr: Option<f64>,
    pub seed: u64,
    /// When present (one flag per DW shell), shells flagged `false` emit a
    /// constant filler instead of the model signal, so only the flagged
    /// shells carry parameter information.
    pub planted_shells: Option<Vec<bool>>,
    pub fixed: FixedDiffusivities,
    pub vascular: VascularGeometry,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_voxels: 1000,
            f_ic_range: (0.05, 0.85),
            f_ees_range: (0.05, 0.85),
            radius_range: (5.0, 15.0),
            snr: None,
            seed: 0,
            planted_shells: None,
            fixed: FixedDiffusivities::default(),
            vascular: VascularGeometry::Astrosticks,
        }
    }
}

impl PhantomSpec {
    fn validate(&self, scheme: &AcquisitionScheme) -> Result<()> {
        if self.n_voxels == 0 {
            return Err(Error::Input("phantom needs at least one voxel".into()));
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        if !(ordered(self.f_ic_range) && ordered(self.f_ees_range) && ordered(self.radius_range)) {
            return Err(Error::Input("parameter ranges must be ordered".into()));
        }
        if self.f_ic_range.0 < 0.0 || self.f_ic_range.1 > 1.0 || self.f_ees_range.0 < 0.0
            || self.f_ees_range.1 > 1.0
        {
            return Err(Error::Input("fraction ranges must lie in [0, 1]".into()));
        }
        if self.f_ic_range.0 + self.f_ees_range.0 > 1.0 {
            return Err(Error::Input(
                "fraction ranges exclude the simplex entirely".into(),
            ));
        }
        if !(self.radius_range.0 > 0.0) {
            return Err(Error::Input("radius range must be positive".into()));
        }
        if let Some(snr) = self.snr {
            if !(snr > 0.0) {
                return Err(Error::Input(format!("snr must be > 0, got {}", snr)));
            }
        }
        if let Some(flags) = &self.planted_shells {
            if flags.len() != scheme.shells().len() {
                return Err(Error::Shape(format!(
                    "{} planted flags for {} shells",
                    flags.len(),
                    scheme.shells().len()
                )));
            }
        }
        Ok(())
    }
}

/// Per-voxel generating parameters, aligned with the phantom's VoxelTable.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub params: Vec<TissueParams>,
    /// Rician noise sigma (0 when noiseless).
    pub sigma: f64,
    pub seed: u64,
}

fn uniform_in(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Draws phantom voxels: fractions uniform on the clipped simplex, radius
/// uniform in its range, signals evaluated at every scheme entry, Rician
/// noise applied per entry when an SNR is given. Parameters are drawn from
/// one stream and noise from another, so the same seed generates identical
/// ground truth under any scheme.
pub fn generate_phantom(
    spec: &PhantomSpec,
    scheme: &AcquisitionScheme,
) -> Result<(VoxelTable, GroundTruth)> {
    spec.validate(scheme)?;
    let mut param_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    param_rng.set_stream(0);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);

    let mut params = Vec::with_capacity(spec.n_voxels);
    for _ in 0..spec.n_voxels {
        let (f_ic, f_ees) = loop {
            let u = uniform_in(&mut param_rng, spec.f_ic_range);
            let v = uniform_in(&mut param_rng, spec.f_ees_range);
            if u + v <= 1.0 {
                break (u, v);
            }
        };
        let radius = uniform_in(&mut param_rng, spec.radius_range);
        params.push(TissueParams::new(f_ic, f_ees, radius));
    }

    // DW entry index -> shell position, for planted-information lookups.
    let shells = scheme.shells();
    let mut shell_of_entry = vec![usize::MAX; scheme.len()];
    for (si, shell) in shells.iter().enumerate() {
        for &i in &shell.dw_indices {
            shell_of_entry[i] = si;
        }
    }

    let roots = default_sphere_roots();
    let mut signals = Vec::with_capacity(spec.n_voxels * scheme.len());
    for p in &params {
        for (i, point) in scheme.points().iter().enumerate() {
            let clean = if point.is_b0() {
                1.0
            } else if let Some(flags) = &spec.planted_shells {
                if flags[shell_of_entry[i]] {
                    verdict_signal_with(p, &spec.fixed, spec.vascular, point, roots)?
                } else {
                    UNINFORMATIVE_LEVEL
                }
            } else {
                verdict_signal_with(p, &spec.fixed, spec.vascular, point, roots)?
            };
            let value = match spec.snr {
                Some(snr) => add_rician_noise(clean, snr, &mut noise_rng),
                None => clean,
            };
            signals.push(value);
        }
    }

    let table = VoxelTable::new(
        signals,
        scheme.len(),
        (0..spec.n_voxels).collect(),
        (spec.n_voxels, 1, 1),
    )?;
    let sigma = spec.snr.map(|snr| 1.0 / snr).unwrap_or(0.0);
    Ok((
        table,
        GroundTruth {
            params,
            sigma,
            seed: spec.seed,
        },
    ))
}

/// Magnitude-image noise: sqrt((S + n1)^2 + n2^2) with n1, n2 independent
/// zero-mean Gaussians of standard deviation 1/snr. Signals here are
/// b0-normalized, so snr is the b0 SNR.
pub fn add_rician_noise(signal: f64, snr: f64, rng: &mut impl Rng) -> f64 {
    let sigma = 1.0 / snr;
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let n1: f64 = normal.sample(rng);
    let n2: f64 = normal.sample(rng);
    ((signal + n1) * (signal + n1) + n2 * n2).sqrt()
}

// ---------------------------------------------------------------------------
// Monte Carlo restricted-sphere oracle
// ---------------------------------------------------------------------------

/// Monte Carlo estimate of the restricted-sphere signal with its standard
/// error. Walkers are seeded uniformly in the sphere, take isotropic
/// Gaussian steps with specular reflection at the boundary, and accumulate
/// phase over the two rectangular gradient lobes; the estimate is the mean
/// of cos(phase).
pub fn mc_sphere_signal(
    radius: f64,
    d: f64,
    point: &AcquisitionPoint,
    n_walkers: usize,
    dt: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    mc_sphere_signal_with_axis(radius, d, point, n_walkers, dt, seed, [0.0, 0.0, 1.0])
}

/// As [`mc_sphere_signal`] with an explicit gradient axis. The sphere is
/// isotropic, so the axis only matters for equivalence testing.
pub fn mc_sphere_signal_with_axis(
    radius: f64,
    d: f64,
    point: &AcquisitionPoint,
    n_walkers: usize,
    dt: f64,
    seed: u64,
    axis: [f64; 3],
) -> Result<(f64, f64)> {
    if !(radius > 0.0 && d > 0.0 && dt > 0.0) {
        return Err(Error::Domain(
            "radius, diffusivity and dt must be positive".into(),
        ));
    }
    if n_walkers < 10_000 {
        return Err(Error::Input(format!(
            "need at least 10^4 walkers, got {}",
            n_walkers
        )));
    }
    let step_len = (6.0 * d * dt).sqrt();
    if step_len >= radius / 10.0 {
        return Err(Error::Domain(format!(
            "step length {:.3} um is not below radius/10 = {:.3} um; reduce dt",
            step_len,
            radius / 10.0
        )));
    }
    if point.is_b0() {
        // No gradient, so every walker has zero phase.
        return Ok((1.0, 0.0));
    }
    let gamma_g = pulse_strength_factor(point)?.sqrt();

    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let axis = [axis[0] / norm, axis[1] / norm, axis[2] / norm];

    // Both lobes share one discretization so a stationary walker
    // accumulates exactly zero phase.
    let n_lobe = (point.delta / dt).ceil() as usize;
    let dt_lobe = point.delta / n_lobe as f64;
    let gap = point.big_delta - point.delta;
    let n_gap = (gap / dt).ceil().max(1.0) as usize;
    let dt_gap = gap / n_gap as f64;

    const CHUNK: usize = 4096;
    let n_chunks = n_walkers.div_ceil(CHUNK);
    let partials: Vec<(f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let count = CHUNK.min(n_walkers - chunk * CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64 + 2);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..count {
                let mut pos = seed_in_sphere(radius, &mut rng);
                let mut phase = 0.0;
                let mut walk_segment =
                    |pos: &mut [f64; 3], n_steps: usize, dt_seg: f64, lobe_sign: f64, rng: &mut ChaCha8Rng| {
                        let sigma = (2.0 * d * dt_seg).sqrt();
                        for _ in 0..n_steps {
                            let prev = *pos;
                            let next = [
                                prev[0] + sigma * normal.sample(rng),
                                prev[1] + sigma * normal.sample(rng),
                                prev[2] + sigma * normal.sample(rng),
                            ];
                            *pos = reflect_into_sphere(prev, next, radius);
                            if lobe_sign != 0.0 {
                                let z_prev = dot(&prev, &axis);
                                let z_next = dot(pos, &axis);
                                phase += lobe_sign * gamma_g * 0.5 * (z_prev + z_next) * dt_seg;
                            }
                        }
                    };
                walk_segment(&mut pos, n_lobe, dt_lobe, 1.0, &mut rng);
                walk_segment(&mut pos, n_gap, dt_gap, 0.0, &mut rng);
                walk_segment(&mut pos, n_lobe, dt_lobe, -1.0, &mut rng);
                let c = phase.cos();
                sum += c;
                sumsq += c * c;
            }
            (sum, sumsq)
        })
        .collect();

    let (sum, sumsq) = partials
        .iter()
        .fold((0.0, 0.0), |(a, b), &(s, q)| (a + s, b + q));
    let n = n_walkers as f64;
    let mean = sum / n;
    let var = ((sumsq - sum * sum / n) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn seed_in_sphere(radius: f64, rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let p = [
            rng.gen_range(-radius..radius),
            rng.gen_range(-radius..radius),
            rng.gen_range(-radius..radius),
        ];
        if dot(&p, &p) < radius * radius {
            return p;
        }
    }
}

/// Specular reflection of the segment prev -> next at the sphere boundary,
/// sub-stepping when the reflected remainder crosses again.
fn reflect_into_sphere(prev: [f64; 3], next: [f64; 3], radius: f64) -> [f64; 3] {
    let r2 = radius * radius;
    let mut p0 = prev;
    let mut p1 = next;
    for _ in 0..64 {
        if dot(&p1, &p1) <= r2 {
            return p1;
        }
        let v = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        let a = dot(&v, &v);
        let b = 2.0 * dot(&p0, &v);
        let c = dot(&p0, &p0) - r2;
        if c > 0.0 || a == 0.0 {
            // Start point drifted onto/over the boundary; pull it inside.
            let n = dot(&p0, &p0).sqrt();
            let s = radius * (1.0 - 1e-12) / n;
            p0 = [p0[0] * s, p0[1] * s, p0[2] * s];
            continue;
        }
        let tau = (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
        let hit = [p0[0] + tau * v[0], p0[1] + tau * v[1], p0[2] + tau * v[2]];
        let n = [hit[0] / radius, hit[1] / radius, hit[2] / radius];
        let rem = [
            (1.0 - tau) * v[0],
            (1.0 - tau) * v[1],
            (1.0 - tau) * v[2],
        ];
        let rn = 2.0 * dot(&rem, &n);
        p0 = hit;
        p1 = [
            hit[0] + rem[0] - rn * n[0],
            hit[1] + rem[1] - rn * n[1],
            hit[2] + rem[2] - rn * n[2],
        ];
    }
    // Pathological multi-crossing; clamp to just inside the boundary.
    let n = dot(&p1, &p1).sqrt();
    let s = radius * (1.0 - 1e-12) / n;
    [p1[0] * s, p1[1] * s, p1[2] * s]
}
