//! Closed-form compartment signal models.
//!
//! The combined tissue signal mixes three compartments: randomly oriented
//! sticks for the vascular space (pseudo-diffusion), an impermeable sphere
//! of radius R for the intracellular space (Gaussian phase distribution
//! approximation), and isotropic Gaussian diffusion for the
//! extracellular-extravascular space. Fractions satisfy
//! f_vasc = 1 - f_ic - f_ees. All inputs are in internal units
//! (b in ms/um^2, d in um^2/ms, R in um).

use std::sync::OnceLock;

use crate::acquisition::{pulse_strength_factor, AcquisitionPoint};
use crate::error::{Error, Result};

/// The free tissue parameters. The vascular fraction is derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueParams {
    /// Intracellular volume fraction.
    pub f_ic: f64,
    /// Extracellular-extravascular volume fraction.
    pub f_ees: f64,
    /// Cell radius (um).
    pub radius: f64,
}

impl TissueParams {
    pub fn new(f_ic: f64, f_ees: f64, radius: f64) -> Self {
        Self { f_ic, f_ees, radius }
    }

    /// Vascular fraction, 1 - f_ic - f_ees.
    pub fn f_vasc(&self) -> f64 {
        1.0 - self.f_ic - self.f_ees
    }

    pub fn validate(&self, ranges: &ParamRanges) -> Result<()> {
        let ok = self.f_ic >= 0.0
            && self.f_ic <= 1.0
            && self.f_ees >= 0.0
            && self.f_ees <= 1.0
            && self.f_ic + self.f_ees <= 1.0 + 1e-12
            && self.radius >= ranges.radius.0
            && self.radius <= ranges.radius.1;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "tissue parameters out of range: f_ic = {}, f_ees = {}, R = {}",
                self.f_ic, self.f_ees, self.radius
            )))
        }
    }
}

/// Clamp bounds for the free parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamRanges {
    pub f_ic: (f64, f64),
    pub f_ees: (f64, f64),
    /// Radius range in um.
    pub radius: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            f_ic: (0.0, 1.0),
            f_ees: (0.0, 1.0),
            radius: (0.01, 15.0),
        }
    }
}

/// Fixed compartment diffusivities (um^2/ms).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FixedDiffusivities {
    pub d_ic: f64,
    pub d_ees: f64,
    pub d_vasc: f64,
}

impl Default for FixedDiffusivities {
    fn default() -> Self {
        Self {
            d_ic: 2.0,
            d_ees: 2.0,
            d_vasc: 50.0,
        }
    }
}

/// Geometry used for the vascular compartment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum VascularGeometry {
    Astrosticks,
    Ball,
}

impl std::fmt::Display for VascularGeometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VascularGeometry::Astrosticks => write!(f, "astrosticks"),
            VascularGeometry::Ball => write!(f, "ball"),
        }
    }
}

/// Isotropic Gaussian diffusion: exp(-b d).
pub fn ball_signal(b: f64, d: f64) -> f64 {
    (-b * d).exp()
}

/// Spherical average of stick compartments: sqrt(pi/(4 b d)) erf(sqrt(b d)),
/// with a two-term series below ASTRO_SERIES_THRESHOLD to avoid 0/0.
pub fn astrosticks_signal(b: f64, d: f64) -> f64 {
    let bd = b * d;
    if bd <= ASTRO_SERIES_THRESHOLD {
        return 1.0 - bd / 3.0;
    }
    let root = bd.sqrt();
    (std::f64::consts::PI / (4.0 * bd)).sqrt() * libm::erf(root)
}

/// Below this value of b*d the astrosticks closed form switches to its
/// series limit 1 - bd/3.
pub const ASTRO_SERIES_THRESHOLD: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Restricted sphere (Gaussian phase distribution approximation)
// ---------------------------------------------------------------------------

/// Ascending positive roots of (x^2 - 2) sin x + 2 x cos x = 0, the
/// boundary condition of the impermeable-sphere signal series.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereRootTable {
    roots: Vec<f64>,
}

/// Normalized root equation g(x) = (1 - 2/x^2) sin x + (2/x) cos x.
/// Same roots as the defining equation, O(1) slope, so bisection reaches
/// machine precision at every root.
fn root_equation(x: f64) -> f64 {
    (1.0 - 2.0 / (x * x)) * x.sin() + (2.0 / x) * x.cos()
}

impl SphereRootTable {
    /// Computes the first `m` roots by bracketed bisection on
    /// ((k-1) pi, k pi) intervals.
    pub fn compute(m: usize) -> Self {
        use std::f64::consts::PI;
        let mut roots = Vec::with_capacity(m);
        for k in 1..=m {
            let mut lo = if k == 1 { 0.1 } else { (k - 1) as f64 * PI };
            let mut hi = k as f64 * PI;
            let mut f_lo = root_equation(lo);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let f_mid = root_equation(mid);
                if f_lo * f_mid <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    f_lo = f_mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        Self { roots }
    }

    pub fn roots(&self) -> &[f64] {
        &self.roots
    }

    pub fn len(&self) -> usize {
        self.roots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }
}

/// Default number of sphere roots.
pub const DEFAULT_SPHERE_ROOTS: usize = 40;

/// Relative contribution below which the GPD series is truncated.
pub const GPD_TRUNCATION: f64 = 1e-10;

static SHARED_ROOTS: OnceLock<SphereRootTable> = OnceLock::new();

/// Shared read-only root table with [`DEFAULT_SPHERE_ROOTS`] roots.
pub fn default_sphere_roots() -> &'static SphereRootTable {
    SHARED_ROOTS.get_or_init(|| SphereRootTable::compute(DEFAULT_SPHERE_ROOTS))
}

/// First-order dual number, used for exact differentiation of the GPD sum
/// with respect to the radius.
#[derive(Debug, Clone, Copy)]
struct Dual {
    v: f64,
    d: f64,
}

impl Dual {
    fn constant(v: f64) -> Self {
        Self { v, d: 0.0 }
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Self { v: e, d: self.d * e }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}
impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}
impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}
impl std::ops::Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, s: f64) -> Dual {
        Dual { v: self.v * s, d: self.d * s }
    }
}
impl std::ops::Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}
impl std::ops::Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}

/// GPD series sum and its derivative with respect to the radius, for one
/// (delta, Delta) timing. The signal is exp(-2 q sum).
fn gpd_sum_dual(
    delta: f64,
    big_delta: f64,
    d: f64,
    radius: f64,
    roots: &SphereRootTable,
) -> (f64, f64) {
    let r = Dual { v: radius, d: 1.0 };
    let inv_r2 = Dual::constant(1.0) / (r * r);
    let mut sum = Dual::constant(0.0);
    for &x in roots.roots() {
        let x2 = x * x;
        // beta = d alpha^2 with alpha = x / R
        let beta = inv_r2 * (d * x2);
        let num = beta * (2.0 * delta) - Dual::constant(2.0)
            + (-(beta * delta)).exp() * 2.0
            + (-(beta * big_delta)).exp() * 2.0
            - (-(beta * (big_delta - delta))).exp()
            - (-(beta * (big_delta + delta))).exp();
        // den = d^2 alpha^6 (x^2 - 2)
        let den = inv_r2 * inv_r2 * inv_r2 * (d * d * x2 * x2 * x2 * (x2 - 2.0));
        let term = num / den;
        sum = sum + term;
        if term.v.abs() < GPD_TRUNCATION * sum.v.abs() {
            break;
        }
    }
    (sum.v, sum.d)
}

/// GPD series sum and its radius derivative for one timing; shared by the
/// fitter so shells with identical (delta, Delta) reuse one evaluation.
pub(crate) fn gpd_sum_and_grad(
    delta: f64,
    big_delta: f64,
    d: f64,
    radius: f64,
    roots: &SphereRootTable,
) -> (f64, f64) {
    gpd_sum_dual(delta, big_delta, d, radius, roots)
}

/// Restricted-sphere signal and its radius derivative for a DW point.
pub fn sphere_gpd_signal_and_grad(
    point: &AcquisitionPoint,
    radius: f64,
    d: f64,
    roots: &SphereRootTable,
) -> Result<(f64, f64)> {
    if !(radius > 0.0) {
        return Err(Error::Domain(format!("sphere radius must be > 0, got {}", radius)));
    }
    if !(d > 0.0) {
        return Err(Error::Domain(format!("diffusivity must be > 0, got {}", d)));
    }
    let q = pulse_strength_factor(point)?;
    let (sum, dsum) = gpd_sum_dual(point.delta, point.big_delta, d, radius, roots);
    let s = (-2.0 * q * sum).exp();
    Ok((s, s * (-2.0 * q * dsum)))
}

/// Restricted-sphere signal for a DW point.
pub fn sphere_gpd_signal(
    point: &AcquisitionPoint,
    radius: f64,
    d: f64,
    roots: &SphereRootTable,
) -> Result<f64> {
    sphere_gpd_signal_and_grad(point, radius, d, roots).map(|(s, _)| s)
}

// ---------------------------------------------------------------------------
// Combined model
// ---------------------------------------------------------------------------

fn vascular_signal(geometry: VascularGeometry, b: f64, d_vasc: f64) -> f64 {
    match geometry {
        VascularGeometry::Astrosticks => astrosticks_signal(b, d_vasc),
        VascularGeometry::Ball => ball_signal(b, d_vasc),
    }
}

/// Combined signal with a selectable vascular geometry. Returns 1.0 for b0
/// points.
pub fn verdict_signal_with(
    params: &TissueParams,
    fixed: &FixedDiffusivities,
    geometry: VascularGeometry,
    point: &AcquisitionPoint,
    roots: &SphereRootTable,
) -> Result<f64> {
    if point.is_b0() {
        return Ok(1.0);
    }
    let s_vasc = vascular_signal(geometry, point.b, fixed.d_vasc);
    let s_sphere = sphere_gpd_signal(point, params.radius, fixed.d_ic, roots)?;
    let s_ball = ball_signal(point.b, fixed.d_ees);
    Ok(params.f_vasc() * s_vasc + params.f_ic * s_sphere + params.f_ees * s_ball)
}

/// The canonical combined signal (astrosticks vascular compartment).
pub fn verdict_signal(
    params: &TissueParams,
    fixed: &FixedDiffusivities,
    point: &AcquisitionPoint,
) -> Result<f64> {
    verdict_signal_with(
        params,
        fixed,
        VascularGeometry::Astrosticks,
        point,
        default_sphere_roots(),
    )
}

/// Analytic gradient (dS/df_ic, dS/df_ees, dS/dR) for a selectable
/// vascular geometry. All zero at b0 points.
pub fn verdict_gradient_with(
    params: &TissueParams,
    fixed: &FixedDiffusivities,
    geometry: VascularGeometry,
    point: &AcquisitionPoint,
    roots: &SphereRootTable,
) -> Result<[f64; 3]> {
    if point.is_b0() {
        return Ok([0.0; 3]);
    }
    let s_vasc = vascular_signal(geometry, point.b, fixed.d_vasc);
    let (s_sphere, ds_dr) = sphere_gpd_signal_and_grad(point, params.radius, fixed.d_ic, roots)?;
    let s_ball = ball_signal(point.b, fixed.d_ees);
    Ok([
        s_sphere - s_vasc,
        s_ball - s_vasc,
        params.f_ic * ds_dr,
    ])
}

/// Analytic gradient of [`verdict_signal`].
pub fn verdict_gradient(
    params: &TissueParams,
    fixed: &FixedDiffusivities,
    point: &AcquisitionPoint,
) -> Result<[f64; 3]> {
    verdict_gradient_with(
        params,
        fixed,
        VascularGeometry::Astrosticks,
        point,
        default_sphere_roots(),
    )
}

// ---------------------------------------------------------------------------
// Baseline models
// ---------------------------------------------------------------------------

/// Mono-exponential decay: s0 exp(-b adc).
pub fn adc_signal(s0: f64, adc: f64, b: f64) -> f64 {
    s0 * (-b * adc).exp()
}

/// Bi-exponential IVIM: s0 (f exp(-b d_star) + (1 - f) exp(-b d)).
pub fn ivim_signal(s0: f64, f: f64, d_star: f64, d: f64, b: f64) -> f64 {
    s0 * (f * (-b * d_star).exp() + (1.0 - f) * (-b * d).exp())
}

// ---------------------------------------------------------------------------
// Information criteria
// ---------------------------------------------------------------------------

/// Gaussian-likelihood information criteria for a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct InfoCriteria {
    pub aic: f64,
    pub bic: f64,
    /// True when rss was zero and the criteria collapsed to -inf.
    pub degenerate: bool,
}

/// AIC = n ln(rss/n) + 2k, BIC = n ln(rss/n) + k ln(n).
pub fn information_criteria(rss: f64, n: usize, k: usize) -> Result<InfoCriteria> {
    if !(rss >= 0.0) {
        return Err(Error::Domain(format!("rss must be >= 0, got {}", rss)));
    }
    if k < 1 || n <= k {
        return Err(Error::Input(format!(
            "need n > k >= 1, got n = {}, k = {}",
            n, k
        )));
    }
    if rss == 0.0 {
        return Ok(InfoCriteria {
            aic: f64::NEG_INFINITY,
            bic: f64::NEG_INFINITY,
            degenerate: true,
        });
    }
    let n_f = n as f64;
    let base = n_f * (rss / n_f).ln();
    Ok(InfoCriteria {
        aic: base + 2.0 * k as f64,
        bic: base + k as f64 * n_f.ln(),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{b_from_s_mm2, kidney_protocol};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn dw_point(b_s_mm2: f64) -> AcquisitionPoint {
        let scheme = kidney_protocol();
        *scheme
            .points()
            .iter()
            .find(|p| !p.is_b0() && (p.b - b_from_s_mm2(b_s_mm2)).abs() < 1e-12)
            .unwrap()
    }

    #[test]
    fn ball_closed_form() {
        assert_eq!(ball_signal(0.0, 2.0), 1.0);
        assert_relative_eq!(ball_signal(1.0, 2.0), 0.1353352832366127, max_relative = 1e-12);
        assert_relative_eq!(ball_signal(2.5, 2.0), 0.006737946999085467, max_relative = 1e-12);
    }

    /// Independent oracle: the spherical average of exp(-bd cos^2 theta)
    /// over uniform orientations equals the integral of exp(-bd t^2) for
    /// t in [0, 1]; evaluated by Simpson quadrature.
    fn astro_oracle(bd: f64) -> f64 {
        let n = 2000usize;
        let h = 1.0 / n as f64;
        let f = |t: f64| (-bd * t * t).exp();
        let mut s = f(0.0) + f(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn astrosticks_matches_quadrature_oracle() {
        assert_eq!(astrosticks_signal(0.0, 50.0), 1.0);
        let s1 = astrosticks_signal(1.0, 1.0);
        assert_relative_eq!(s1, astro_oracle(1.0), max_relative = 1e-9);
        assert!((s1 - 0.7468).abs() < 1e-4);
        let s2 = astrosticks_signal(0.07, 50.0);
        assert_relative_eq!(s2, astro_oracle(3.5), max_relative = 1e-9);
        assert!((s2 - 0.4698).abs() < 1e-4);
    }

    #[test]
    fn astrosticks_series_branch_is_continuous() {
        let d = 1.0;
        let below = astrosticks_signal(ASTRO_SERIES_THRESHOLD * 0.999, d);
        let above = astrosticks_signal(ASTRO_SERIES_THRESHOLD * 1.001, d);
        assert!((below - above).abs() < 1e-9);
    }

    #[test]
    fn sphere_root_table_invariants() {
        let table = SphereRootTable::compute(DEFAULT_SPHERE_ROOTS);
        assert_eq!(table.len(), DEFAULT_SPHERE_ROOTS);
        let r = table.roots();
        assert!(r[0] >= 2.08 && r[0] <= 2.09, "first root {}", r[0]);
        for w in r.windows(2) {
            assert!(w[0] < w[1]);
        }
        for &x in r {
            assert!(root_equation(x).abs() < 1e-12, "residual at {}", x);
        }
    }

    #[test]
    fn sphere_tiny_radius_is_unrestricted() {
        let p = dw_point(2500.0);
        let s = sphere_gpd_signal(&p, 0.1, 2.0, default_sphere_roots()).unwrap();
        assert!(s > 0.999, "got {}", s);
    }

    #[test]
    fn sphere_is_continuous_in_radius() {
        let p = dw_point(2000.0);
        for r in [5.0, 10.0, 15.0] {
            let a = sphere_gpd_signal(&p, r, 2.0, default_sphere_roots()).unwrap();
            let b = sphere_gpd_signal(&p, r + 1e-4, 2.0, default_sphere_roots()).unwrap();
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn sphere_rejects_bad_domain() {
        let p = dw_point(2000.0);
        assert!(sphere_gpd_signal(&p, 0.0, 2.0, default_sphere_roots()).is_err());
        assert!(sphere_gpd_signal(&p, -1.0, 2.0, default_sphere_roots()).is_err());
        let b0 = kidney_protocol().points()[0];
        assert!(sphere_gpd_signal(&b0, 5.0, 2.0, default_sphere_roots()).is_err());
    }

    #[test]
    fn gpd_truncation_is_converged() {
        // Ten extra roots change the signal by < 1e-8 anywhere on the
        // kidney grid for R in [1, 20].
        let more = SphereRootTable::compute(DEFAULT_SPHERE_ROOTS + 10);
        let scheme = kidney_protocol();
        for r in [1.0, 2.0, 5.0, 10.0, 15.0, 20.0] {
            for p in scheme.points().iter().filter(|p| !p.is_b0()) {
                let a = sphere_gpd_signal(p, r, 2.0, default_sphere_roots()).unwrap();
                let b = sphere_gpd_signal(p, r, 2.0, &more).unwrap();
                assert!((a - b).abs() < 1e-8, "R = {}, b = {}", r, p.b);
            }
        }
    }

    #[test]
    fn verdict_collapses_to_single_compartments() {
        let fixed = FixedDiffusivities::default();
        // Pure EES at b = 1.0 ms/um^2 (the 1000 s/mm^2 shell).
        let p = dw_point(1000.0);
        let params = TissueParams::new(0.0, 1.0, 8.0);
        let s = verdict_signal(&params, &fixed, &p).unwrap();
        assert_relative_eq!(s, 0.1353352832366127, max_relative = 1e-12);

        // Pure vascular at b = 0.07 ms/um^2.
        let p = dw_point(70.0);
        let params = TissueParams::new(0.0, 0.0, 8.0);
        let s = verdict_signal(&params, &fixed, &p).unwrap();
        assert!((s - 0.4698).abs() < 1e-4);
    }

    #[test]
    fn verdict_is_one_at_b0() {
        let fixed = FixedDiffusivities::default();
        let b0 = kidney_protocol().points()[0];
        let params = TissueParams::new(0.3, 0.4, 7.0);
        assert_eq!(verdict_signal(&params, &fixed, &b0).unwrap(), 1.0);
    }

    #[test]
    fn verdict_mixes_convexly() {
        let fixed = FixedDiffusivities::default();
        let p = dw_point(2000.0);
        let roots = default_sphere_roots();
        let s_sphere = sphere_gpd_signal(&p, 9.0, fixed.d_ic, roots).unwrap();
        let s_ball = ball_signal(p.b, fixed.d_ees);
        let mixed = verdict_signal(&TissueParams::new(0.5, 0.5, 9.0), &fixed, &p).unwrap();
        assert_eq!(mixed, 0.5 * s_sphere + 0.5 * s_ball);
    }

    #[test]
    fn verdict_is_affine_in_fractions() {
        let fixed = FixedDiffusivities::default();
        let p = dw_point(500.0);
        let radius = 11.0;
        let a = TissueParams::new(0.1, 0.2, radius);
        let b = TissueParams::new(0.5, 0.3, radius);
        for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let mix = TissueParams::new(
                lambda * a.f_ic + (1.0 - lambda) * b.f_ic,
                lambda * a.f_ees + (1.0 - lambda) * b.f_ees,
                radius,
            );
            let s_mix = verdict_signal(&mix, &fixed, &p).unwrap();
            let s_a = verdict_signal(&a, &fixed, &p).unwrap();
            let s_b = verdict_signal(&b, &fixed, &p).unwrap();
            assert_relative_eq!(s_mix, lambda * s_a + (1.0 - lambda) * s_b, max_relative = 1e-12);
        }
    }

    #[test]
    fn compartments_decay_with_b_on_kidney_grid() {
        let scheme = kidney_protocol();
        let shells = scheme.shells();
        let fixed = FixedDiffusivities::default();
        let mut last = (f64::INFINITY, f64::INFINITY);
        for shell in &shells {
            let p = scheme.points()[shell.dw_indices[0]];
            let ball = ball_signal(p.b, fixed.d_ees);
            let astro = astrosticks_signal(p.b, fixed.d_vasc);
            assert!(ball > 0.0 && ball <= 1.0);
            assert!(astro > 0.0 && astro <= 1.0);
            assert!(ball < last.0 && astro < last.1, "b = {}", p.b);
            last = (ball, astro);
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let fixed = FixedDiffusivities::default();
        let scheme = kidney_protocol();
        let dw: Vec<AcquisitionPoint> = scheme
            .points()
            .iter()
            .copied()
            .filter(|p| !p.is_b0())
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for _ in 0..100 {
            let f_ic: f64 = rng.gen_range(0.05..0.7);
            let f_ees: f64 = rng.gen_range(0.05..(0.95 - f_ic));
            let radius: f64 = rng.gen_range(1.0..14.0);
            let p = dw[rng.gen_range(0..dw.len())];
            let params = TissueParams::new(f_ic, f_ees, radius);
            let g = verdict_gradient(&params, &fixed, &p).unwrap();

            let s = |pp: TissueParams| verdict_signal(&pp, &fixed, &p).unwrap();
            let fd_ic = (s(TissueParams::new(f_ic + h, f_ees, radius))
                - s(TissueParams::new(f_ic - h, f_ees, radius)))
                / (2.0 * h);
            let fd_ees = (s(TissueParams::new(f_ic, f_ees + h, radius))
                - s(TissueParams::new(f_ic, f_ees - h, radius)))
                / (2.0 * h);
            let fd_r = (s(TissueParams::new(f_ic, f_ees, radius + h))
                - s(TissueParams::new(f_ic, f_ees, radius - h)))
                / (2.0 * h);
            assert!(rel_err(g[0], fd_ic) < 1e-6, "df_ic: {} vs {}", g[0], fd_ic);
            assert!(rel_err(g[1], fd_ees) < 1e-6, "df_ees: {} vs {}", g[1], fd_ees);
            assert!(rel_err(g[2], fd_r) < 1e-6, "dR: {} vs {}", g[2], fd_r);
        }
    }

    #[test]
    fn gradient_is_flat_at_tiny_radius() {
        let fixed = FixedDiffusivities::default();
        let p = dw_point(90.0);
        let g = verdict_gradient(&TissueParams::new(0.5, 0.3, 0.1), &fixed, &p).unwrap();
        assert!(g[2].abs() < 1e-3);
    }

    #[test]
    fn fraction_gradients_are_independent_of_fractions() {
        let fixed = FixedDiffusivities::default();
        let p = dw_point(1500.0);
        let g1 = verdict_gradient(&TissueParams::new(0.2, 0.3, 6.0), &fixed, &p).unwrap();
        let g2 = verdict_gradient(&TissueParams::new(0.5, 0.1, 6.0), &fixed, &p).unwrap();
        assert_eq!(g1[0], g2[0]);
        assert_eq!(g1[1], g2[1]);
    }

    #[test]
    fn adc_and_ivim_closed_forms() {
        assert_relative_eq!(adc_signal(1.0, 2.3, 1.0), 0.10025884372280375, max_relative = 1e-12);
        // IVIM with f = 0 reduces exactly to the ADC form.
        for b in [0.0, 0.07, 1.0, 2.5] {
            assert_eq!(ivim_signal(1.0, 0.0, 50.0, 1.5, b), adc_signal(1.0, 1.5, b));
        }
        let s = ivim_signal(1.0, 0.3, 50.0, 1.5, 0.07);
        let expected = 0.3 * (-3.5f64).exp() + 0.7 * (-0.105f64).exp();
        assert_relative_eq!(s, expected, max_relative = 1e-12);
        assert!((s - 0.6393).abs() < 1e-4);
    }

    #[test]
    fn information_criteria_examples() {
        let ic = information_criteria(0.18, 18, 3).unwrap();
        assert_relative_eq!(ic.aic, 18.0 * 0.01f64.ln() + 6.0, max_relative = 1e-12);
        assert!((ic.aic - -76.893).abs() < 1e-3);
        assert_relative_eq!(ic.bic, 18.0 * 0.01f64.ln() + 3.0 * 18.0f64.ln(), max_relative = 1e-12);
        assert!((ic.bic - -74.222).abs() < 1e-3);

        // Larger k at equal rss is strictly penalized.
        let ic4 = information_criteria(0.18, 18, 4).unwrap();
        assert!(ic4.aic > ic.aic && ic4.bic > ic.bic);

        let degenerate = information_criteria(0.0, 18, 3).unwrap();
        assert!(degenerate.degenerate);
        assert!(degenerate.aic == f64::NEG_INFINITY);

        assert!(information_criteria(0.1, 3, 3).is_err());
    }
}
