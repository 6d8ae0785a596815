//! Per-voxel model fitting: self-supervised network fitting of the
//! three-compartment model, classical ADC and IVIM baselines, vascular
//! variant comparison, and goodness-of-fit reporting.
//!
//! The self-supervised fitter trains one network per dataset: the network
//! maps each voxel's normalized signal vector to tissue parameters, the
//! forward model maps parameters back to a predicted vector, and the loss
//! is the mean squared error against the voxel's own measurements. No
//! labels are used anywhere.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::acquisition::{pulse_strength_factor, AcquisitionScheme, VoxelTable};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, EarlyStopping, Mlp};
use crate::signal::{
    astrosticks_signal, ball_signal, default_sphere_roots, information_criteria, ivim_signal,
    FixedDiffusivities, ParamRanges, TissueParams, VascularGeometry,
};
use crate::stats::RoiMask;

/// b-value (ms/um^2) separating the IVIM perfusion regime from the tissue
/// regime in the segmented fit (250 s/mm^2).
pub const IVIM_SEGMENTATION_B: f64 = 0.25;

/// Search bounds for the IVIM pseudo-diffusivity (um^2/ms).
pub const IVIM_D_STAR_BOUNDS: (f64, f64) = (3.0, 100.0);

/// Railed-output fraction above which training emits a warning.
pub const RAIL_WARN_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Verdict,
    Ivim,
    Adc,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Verdict => write!(f, "verdict"),
            ModelKind::Ivim => write!(f, "ivim"),
            ModelKind::Adc => write!(f, "adc"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcFit {
    pub s0: f64,
    pub adc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvimFit {
    pub s0: f64,
    pub f: f64,
    /// Missing when the perfusion gap was degenerate.
    pub d_star: Option<f64>,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitParams {
    Verdict(Vec<TissueParams>),
    /// None marks voxels with fewer than two usable points.
    Adc(Vec<Option<AdcFit>>),
    Ivim(Vec<IvimFit>),
}

/// Training diagnostics of a self-supervised fit.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainDiagnostics {
    pub loss_curve: Vec<f64>,
    pub epochs_run: usize,
    /// Fraction of voxels with at least one clamped network output in the
    /// final prediction pass.
    pub railed_fraction: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: ModelKind,
    pub params: FitParams,
    /// Per-voxel MSE over DW entries (NaN for voxels that could not be
    /// fitted).
    pub mse: Vec<f64>,
    pub voxel_indices: Vec<usize>,
    pub dims: (usize, usize, usize),
    pub diagnostics: Option<TrainDiagnostics>,
}

impl FitResult {
    pub fn n_voxels(&self) -> usize {
        self.voxel_indices.len()
    }

    /// Parameter names exported for maps/summaries, in output order.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self.model {
            ModelKind::Verdict => &["f_ic", "f_ees", "f_vasc", "r_um"],
            ModelKind::Adc => &["s0", "adc"],
            ModelKind::Ivim => &["s0", "f", "d_star", "d"],
        }
    }

    /// Value of a named parameter for one voxel row; None when missing.
    pub fn param_value(&self, row: usize, name: &str) -> Option<f64> {
        match (&self.params, name) {
            (FitParams::Verdict(p), "f_ic") => Some(p[row].f_ic),
            (FitParams::Verdict(p), "f_ees") => Some(p[row].f_ees),
            (FitParams::Verdict(p), "f_vasc") => Some(p[row].f_vasc()),
            (FitParams::Verdict(p), "r_um") => Some(p[row].radius),
            (FitParams::Adc(p), "s0") => p[row].map(|a| a.s0),
            (FitParams::Adc(p), "adc") => p[row].map(|a| a.adc),
            (FitParams::Ivim(p), "s0") => Some(p[row].s0),
            (FitParams::Ivim(p), "f") => Some(p[row].f),
            (FitParams::Ivim(p), "d_star") => p[row].d_star,
            (FitParams::Ivim(p), "d") => Some(p[row].d),
            _ => None,
        }
    }
}

/// Configuration of the self-supervised fit.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SsFitConfig {
    pub learning_rate: f64,
    pub dropout_p: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ranges: ParamRanges,
    pub fixed: FixedDiffusivities,
    pub vascular: VascularGeometry,
    /// Hidden width; None uses the measurement count, mirroring the
    /// published 18-neuron layers for 18 image volumes.
    pub hidden_width: Option<usize>,
    /// The learning rate decays geometrically from `learning_rate` to
    /// `learning_rate * lr_floor_ratio` over `max_epochs` (1.0 keeps it
    /// constant). Shrinking steps late in training removes the minibatch
    /// noise floor so the fit converges in parameter space.
    pub lr_floor_ratio: f64,
    /// Dropout is switched off after this fraction of `max_epochs`; it
    /// regularizes the early search, while the tail runs noise-free.
    pub dropout_until: f64,
}

impl Default for SsFitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            dropout_p: 0.5,
            max_epochs: 300,
            patience: 15,
            min_delta: 1e-6,
            batch_size: 128,
            seed: 0,
            ranges: ParamRanges::default(),
            fixed: FixedDiffusivities::default(),
            vascular: VascularGeometry::Astrosticks,
            hidden_width: None,
            lr_floor_ratio: 1.0,
            dropout_until: 1.0,
        }
    }
}

/// The raw radius output is expressed in units of the upper radius bound,
/// so all three network outputs live on a comparable scale.
fn radius_scale(ranges: &ParamRanges) -> f64 {
    ranges.radius.1
}

/// Symmetric 3x3 inverse square root via Jacobi eigendecomposition.
fn sym3_inv_sqrt(g: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut a = g;
    let mut v = [[0.0; 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..50 {
        // Largest off-diagonal element.
        let (mut p, mut q, mut max) = (0, 1, 0.0f64);
        for i in 0..3 {
            for j in (i + 1)..3 {
                if a[i][j].abs() > max {
                    max = a[i][j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if max < 1e-14 {
            break;
        }
        let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for k in 0..3 {
            let (akp, akq) = (a[k][p], a[k][q]);
            a[k][p] = c * akp - s * akq;
            a[k][q] = s * akp + c * akq;
        }
        for k in 0..3 {
            let (apk, aqk) = (a[p][k], a[q][k]);
            a[p][k] = c * apk - s * aqk;
            a[q][k] = s * apk + c * aqk;
        }
        for k in 0..3 {
            let (vkp, vkq) = (v[k][p], v[k][q]);
            v[k][p] = c * vkp - s * vkq;
            v[k][q] = s * vkp + c * vkq;
        }
    }
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += v[i][k] * v[j][k] / a[k][k].max(1e-12).sqrt();
            }
        }
    }
    out
}

/// Whitening transform for the output head: the Gram matrix of the signal
/// Jacobian at reference parameters, inverted to half power. Makes the
/// three output directions equally steep in the training loss.
fn output_preconditioner(cache: &ModelCache, ranges: &ParamRanges) -> [[f64; 3]; 3] {
    let r_ref = 0.5 * (ranges.radius.0 + ranges.radius.1);
    let f_ic_ref = 0.3;
    let (sphere, dsphere) = cache.sphere_per_shell(r_ref);
    let mut g = [[0.0; 3]; 3];
    for (s, shell) in cache.shells.iter().enumerate() {
        let j = [
            sphere[s] - shell.vasc,
            shell.ball - shell.vasc,
            f_ic_ref * dsphere[s] * radius_scale(ranges),
        ];
        for (gi, ji) in g.iter_mut().zip(&j) {
            for (gij, jj) in gi.iter_mut().zip(&j) {
                *gij += ji * jj;
            }
        }
    }
    sym3_inv_sqrt(g)
}

/// Clamps raw network outputs into the parameter ranges (the radius
/// channel is scaled by the upper radius bound first), then rescales
/// (f_ic, f_ees) onto the simplex when their sum exceeds 1. Returns the
/// parameters and which outputs were railed by the clamp.
pub fn clamp_and_project(raw: [f64; 3], ranges: &ParamRanges) -> (TissueParams, [bool; 3]) {
    let clamp = |v: f64, (lo, hi): (f64, f64)| v.clamp(lo, hi);
    let c0 = clamp(raw[0], ranges.f_ic);
    let c1 = clamp(raw[1], ranges.f_ees);
    let r_raw = raw[2] * radius_scale(ranges);
    let c2 = clamp(r_raw, ranges.radius);
    let railed = [c0 != raw[0], c1 != raw[1], c2 != r_raw];
    let sum = c0 + c1;
    let (f_ic, f_ees) = if sum > 1.0 { (c0 / sum, c1 / sum) } else { (c0, c1) };
    (TissueParams::new(f_ic, f_ees, c2), railed)
}

/// Per-shell forward-model constants for one scheme and variant.
struct ShellModel {
    /// Representative DW point per shell (directions share b, delta, Delta).
    q: f64,
    /// Index into the distinct (delta, Delta) timing groups.
    timing: usize,
    vasc: f64,
    ball: f64,
}

struct ModelCache {
    shells: Vec<ShellModel>,
    timings: Vec<(f64, f64)>,
    fixed: FixedDiffusivities,
}

impl ModelCache {
    fn new(
        scheme: &AcquisitionScheme,
        fixed: &FixedDiffusivities,
        vascular: VascularGeometry,
    ) -> Result<Self> {
        let shells = scheme.shells();
        if shells.is_empty() {
            return Err(Error::Scheme("scheme has no DW shells".into()));
        }
        let mut timings: Vec<(f64, f64)> = Vec::new();
        let mut out = Vec::with_capacity(shells.len());
        for shell in &shells {
            let point = scheme.points()[shell.dw_indices[0]];
            let key = (shell.delta, shell.big_delta);
            let timing = match timings.iter().position(|t| *t == key) {
                Some(i) => i,
                None => {
                    timings.push(key);
                    timings.len() - 1
                }
            };
            let vasc = match vascular {
                VascularGeometry::Astrosticks => astrosticks_signal(shell.b, fixed.d_vasc),
                VascularGeometry::Ball => ball_signal(shell.b, fixed.d_vasc),
            };
            out.push(ShellModel {
                q: pulse_strength_factor(&point)?,
                timing,
                vasc,
                ball: ball_signal(shell.b, fixed.d_ees),
            });
        }
        Ok(Self {
            shells: out,
            timings,
            fixed: *fixed,
        })
    }

    fn n_shells(&self) -> usize {
        self.shells.len()
    }

    /// Sphere signal and its radius derivative per shell, sharing GPD sums
    /// across shells with identical timing.
    fn sphere_per_shell(&self, radius: f64) -> (Vec<f64>, Vec<f64>) {
        let roots = default_sphere_roots();
        let sums: Vec<(f64, f64)> = self
            .timings
            .iter()
            .map(|&(delta, big_delta)| {
                crate::signal::gpd_sum_and_grad(delta, big_delta, self.fixed.d_ic, radius, roots)
            })
            .collect();
        let mut s = Vec::with_capacity(self.shells.len());
        let mut ds = Vec::with_capacity(self.shells.len());
        for shell in &self.shells {
            let (sum, dsum) = sums[shell.timing];
            let v = (-2.0 * shell.q * sum).exp();
            s.push(v);
            ds.push(v * (-2.0 * shell.q * dsum));
        }
        (s, ds)
    }

    /// Predicted normalized vector (shell ratios then b0 ratios) for the
    /// given parameters.
    fn predict(&self, params: &TissueParams) -> Vec<f64> {
        let (sphere, _) = self.sphere_per_shell(params.radius);
        let n = self.n_shells();
        let mut out = Vec::with_capacity(2 * n);
        let f_vasc = params.f_vasc();
        for (shell, sph) in self.shells.iter().zip(&sphere) {
            out.push(f_vasc * shell.vasc + params.f_ic * sph + params.f_ees * shell.ball);
        }
        out.extend(std::iter::repeat(1.0).take(n));
        out
    }
}

/// Training orders are derived from a content-sorted canonical order, so
/// batch composition does not depend on the input row order.
fn canonical_order(table: &VoxelTable) -> Vec<usize> {
    let mut order: Vec<usize> = (0..table.n_voxels).collect();
    order.sort_by(|&a, &b| {
        table
            .row(a)
            .iter()
            .zip(table.row(b))
            .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Self-supervised fit of the three-compartment model: trains an MLP
/// (measurements -> 3 parameters) against the forward model's
/// reconstruction of each voxel's own signal vector, then returns
/// parameters from a final eval-mode pass.
pub fn fit_verdict_ss(
    table: &VoxelTable,
    scheme: &AcquisitionScheme,
    cfg: &SsFitConfig,
) -> Result<FitResult> {
    if table.n_voxels == 0 {
        return Err(Error::Input("voxel table is empty".into()));
    }
    let cache = ModelCache::new(scheme, &cfg.fixed, cfg.vascular)?;
    let n_shells = cache.n_shells();
    let n_meas = 2 * n_shells;
    if table.n_meas != n_meas {
        return Err(Error::Shape(format!(
            "table has {} measurements but the scheme implies {} ({} shells + matched b0 ratios)",
            table.n_meas, n_meas, n_shells
        )));
    }
    if !(cfg.learning_rate > 0.0) || !(0.0..1.0).contains(&cfg.dropout_p) {
        return Err(Error::Input("invalid fit configuration".into()));
    }

    let hidden = cfg.hidden_width.unwrap_or(n_meas);
    let mut net = Mlp::init_seeded(&[n_meas, hidden, hidden, hidden, 3], cfg.seed);
    net.dropout_p = cfg.dropout_p;
    let mut adam = AdamState::for_net(&net, AdamConfig::with_lr(cfg.learning_rate));
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);

    // Affine output head: params_raw = center + W u. The center starts
    // every voxel mid-range; W whitens the signal-Jacobian geometry so the
    // three outputs are equally steep directions of the training loss
    // (the raw radius axis is orders of magnitude shallower otherwise).
    let head_center = [
        0.3,
        0.3,
        0.5 * (cfg.ranges.radius.0 + cfg.ranges.radius.1) / radius_scale(&cfg.ranges),
    ];
    let head_w = output_preconditioner(&cache, &cfg.ranges);
    let apply_head = |u: [f64; 3]| -> [f64; 3] {
        [
            head_center[0] + head_w[0][0] * u[0] + head_w[0][1] * u[1] + head_w[0][2] * u[2],
            head_center[1] + head_w[1][0] * u[0] + head_w[1][1] * u[1] + head_w[1][2] * u[2],
            head_center[2] + head_w[2][0] * u[0] + head_w[2][1] * u[1] + head_w[2][2] * u[2],
        ]
    };
    let head_grad = |g: [f64; 3]| -> [f64; 3] {
        [
            head_w[0][0] * g[0] + head_w[1][0] * g[1] + head_w[2][0] * g[2],
            head_w[0][1] * g[0] + head_w[1][1] * g[1] + head_w[2][1] * g[2],
            head_w[0][2] * g[0] + head_w[1][2] * g[1] + head_w[2][2] * g[2],
        ]
    };

    let canon = canonical_order(table);
    let batch_size = cfg.batch_size.max(1);
    let mut loss_curve = Vec::new();
    let mut epochs_run = 0;
    let mut step: u64 = 0;

    for epoch in 0..cfg.max_epochs {
        let mut order = canon.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let progress = epoch as f64 / cfg.max_epochs.max(1) as f64;
        adam.cfg.lr = cfg.learning_rate * cfg.lr_floor_ratio.powf(progress);
        net.dropout_p = if progress < cfg.dropout_until {
            cfg.dropout_p
        } else {
            0.0
        };

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch = chunk.len();
            let mut x = Vec::with_capacity(batch * n_meas);
            for &row in chunk {
                x.extend_from_slice(table.row(row));
            }
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            dropout_rng.set_stream(u64::MAX / 2 + step);
            step += 1;
            let fwd = net.forward_train(&x, batch, &mut dropout_rng)?;

            // Per-sample physics: prediction, loss, and loss gradient with
            // respect to the raw outputs. Parallel over samples; results
            // land at fixed indices so the reduction is deterministic.
            let outs = fwd.output();
            let physics: Vec<(f64, [f64; 3])> = (0..batch)
                .into_par_iter()
                .map(|i| {
                    let raw = apply_head([outs[3 * i], outs[3 * i + 1], outs[3 * i + 2]]);
                    let (loss, g) =
                        sample_loss_and_grad(raw, table.row(chunk[i]), &cache, &cfg.ranges);
                    (loss, head_grad(g))
                })
                .collect();

            let mut d_out = vec![0.0; batch * 3];
            let scale = 1.0 / batch as f64;
            let mut batch_loss = 0.0;
            for (i, (loss, g)) in physics.iter().enumerate() {
                batch_loss += loss;
                d_out[3 * i] = g[0] * scale;
                d_out[3 * i + 1] = g[1] * scale;
                d_out[3 * i + 2] = g[2] * scale;
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Input(format!(
                    "non-finite training loss at epoch {}, voxel row {}",
                    epoch, chunk[0]
                )));
            }
            epoch_loss += batch_loss * batch as f64;

            let grads = net.backward(&fwd, &d_out)?;
            adam.step(&mut net.params_mut(), &grads.tensors);
        }
        epoch_loss /= table.n_voxels as f64;
        loss_curve.push(epoch_loss);
        epochs_run = epoch + 1;
        if stopper.update(epoch_loss) {
            break;
        }
    }

    // Final prediction pass in eval mode, in input row order.
    let outs = net.forward_eval(&table.signals, table.n_voxels)?;
    let mut params = Vec::with_capacity(table.n_voxels);
    let mut railed_count = 0usize;
    for i in 0..table.n_voxels {
        let raw = apply_head([outs[3 * i], outs[3 * i + 1], outs[3 * i + 2]]);
        let (p, railed) = clamp_and_project(raw, &cfg.ranges);
        if railed.iter().any(|&r| r) {
            railed_count += 1;
        }
        params.push(p);
    }
    let railed_fraction = railed_count as f64 / table.n_voxels as f64;
    let mut warnings = Vec::new();
    if railed_fraction > RAIL_WARN_FRACTION {
        warnings.push(format!(
            "{:.0}% of voxels have railed outputs; parameter ranges may be too tight",
            railed_fraction * 100.0
        ));
    }

    let mse: Vec<f64> = params
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let pred = cache.predict(p);
            dw_mse(&pred[..n_shells], &table.row(i)[..n_shells])
        })
        .collect();

    Ok(FitResult {
        model: ModelKind::Verdict,
        params: FitParams::Verdict(params),
        mse,
        voxel_indices: table.voxel_indices.clone(),
        dims: table.dims,
        diagnostics: Some(TrainDiagnostics {
            loss_curve,
            epochs_run,
            railed_fraction,
            warnings,
        }),
    })
}

fn dw_mse(pred: &[f64], meas: &[f64]) -> f64 {
    pred.iter()
        .zip(meas)
        .map(|(p, m)| (p - m) * (p - m))
        .sum::<f64>()
        / pred.len() as f64
}

/// Loss (MSE over the full vector) and its gradient with respect to the
/// raw network outputs, chained through clamping and simplex rescaling.
fn sample_loss_and_grad(
    raw: [f64; 3],
    measured: &[f64],
    cache: &ModelCache,
    ranges: &ParamRanges,
) -> (f64, [f64; 3]) {
    let (params, railed) = clamp_and_project(raw, ranges);
    let n_shells = cache.n_shells();
    let n_meas = measured.len() as f64;
    let (sphere, dsphere) = cache.sphere_per_shell(params.radius);
    let f_vasc = params.f_vasc();

    let mut loss = 0.0;
    let mut d_fic = 0.0;
    let mut d_fees = 0.0;
    let mut d_r = 0.0;
    for (s, shell) in cache.shells.iter().enumerate() {
        let pred = f_vasc * shell.vasc + params.f_ic * sphere[s] + params.f_ees * shell.ball;
        let res = pred - measured[s];
        loss += res * res;
        let w = 2.0 * res / n_meas;
        d_fic += w * (sphere[s] - shell.vasc);
        d_fees += w * (shell.ball - shell.vasc);
        d_r += w * params.f_ic * dsphere[s];
    }
    // b0 entries are predicted as exactly 1 and contribute no gradient.
    for m in &measured[n_shells..] {
        let res = 1.0 - m;
        loss += res * res;
    }
    loss /= n_meas;

    // Chain through the simplex rescale (its inputs are the clamped
    // values), then gate on the clamp rails.
    let (mut g0, mut g1) = {
        let p0 = raw[0].clamp(ranges.f_ic.0, ranges.f_ic.1);
        let p1 = raw[1].clamp(ranges.f_ees.0, ranges.f_ees.1);
        let sum = p0 + p1;
        if sum > 1.0 {
            let j = 1.0 / (sum * sum);
            (
                (p1 * j) * d_fic + (-p1 * j) * d_fees,
                (-p0 * j) * d_fic + (p0 * j) * d_fees,
            )
        } else {
            (d_fic, d_fees)
        }
    };
    let mut g2 = d_r * radius_scale(ranges);
    if railed[0] {
        g0 = 0.0;
    }
    if railed[1] {
        g1 = 0.0;
    }
    if railed[2] {
        g2 = 0.0;
    }
    (loss, [g0, g1, g2])
}

/// Test-only window into the per-sample loss/gradient chain so the full
/// training gradient can be finite-difference checked end to end.
pub fn sample_loss_and_grad_for_tests(
    raw: [f64; 3],
    measured: &[f64],
    scheme: &AcquisitionScheme,
    cfg: &SsFitConfig,
) -> (f64, [f64; 3]) {
    let cache = ModelCache::new(scheme, &cfg.fixed, cfg.vascular).expect("valid scheme");
    sample_loss_and_grad(raw, measured, &cache, &cfg.ranges)
}

// ---------------------------------------------------------------------------
// ADC baseline
// ---------------------------------------------------------------------------

/// Per-voxel log-linear least squares over all DW shell ratios:
/// slope = -ADC, intercept = ln s0. Non-positive signals are excluded;
/// voxels with fewer than two usable points are reported missing.
pub fn fit_adc(table: &VoxelTable, scheme: &AcquisitionScheme) -> Result<FitResult> {
    let shells = scheme.shells();
    let n_shells = shells.len();
    let distinct_b: std::collections::BTreeSet<u64> =
        shells.iter().map(|s| s.b.to_bits()).collect();
    if distinct_b.len() < 2 {
        return Err(Error::Scheme(
            "ADC fit needs at least two distinct b-values".into(),
        ));
    }
    check_table_shells(table, n_shells)?;
    let bs: Vec<f64> = shells.iter().map(|s| s.b).collect();

    let fits: Vec<(Option<AdcFit>, f64)> = (0..table.n_voxels)
        .into_par_iter()
        .map(|v| {
            let y = &table.row(v)[..n_shells];
            let pts: Vec<(f64, f64)> = bs
                .iter()
                .zip(y)
                .filter(|(_, s)| **s > 0.0)
                .map(|(b, s)| (*b, s.ln()))
                .collect();
            if pts.len() < 2 {
                return (None, f64::NAN);
            }
            let (slope, intercept) = line_fit(&pts);
            let fit = AdcFit {
                s0: intercept.exp(),
                adc: -slope,
            };
            let mse = dw_mse(
                &bs.iter()
                    .map(|&b| crate::signal::adc_signal(fit.s0, fit.adc, b))
                    .collect::<Vec<_>>(),
                y,
            );
            (Some(fit), mse)
        })
        .collect();

    let (params, mse): (Vec<_>, Vec<_>) = fits.into_iter().unzip();
    Ok(FitResult {
        model: ModelKind::Adc,
        params: FitParams::Adc(params),
        mse,
        voxel_indices: table.voxel_indices.clone(),
        dims: table.dims,
        diagnostics: None,
    })
}

fn check_table_shells(table: &VoxelTable, n_shells: usize) -> Result<()> {
    if table.n_meas != 2 * n_shells && table.n_meas != n_shells {
        return Err(Error::Shape(format!(
            "table has {} measurements for {} shells",
            table.n_meas, n_shells
        )));
    }
    Ok(())
}

/// Least-squares line fit over (x, y) points: returns (slope, intercept).
fn line_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    (slope, (sy - slope * sx) / n)
}

// ---------------------------------------------------------------------------
// IVIM baseline
// ---------------------------------------------------------------------------

/// Segmented IVIM fit on normalized ratios: (1) log-linear fit over
/// b >= 250 s/mm^2 gives d and the tissue intercept, (2) the perfusion
/// fraction comes from the b -> 0 extrapolation gap (S(0) = 1 for
/// normalized data), (3) d_star by bounded 1-D least squares on the low-b
/// residual. A non-positive gap clamps f to 0 with d_star reported
/// missing.
pub fn fit_ivim(table: &VoxelTable, scheme: &AcquisitionScheme) -> Result<FitResult> {
    let shells = scheme.shells();
    let n_shells = shells.len();
    let bs: Vec<f64> = shells.iter().map(|s| s.b).collect();
    let has_low = bs.iter().any(|&b| b < IVIM_SEGMENTATION_B);
    let has_high = bs.iter().any(|&b| b >= IVIM_SEGMENTATION_B);
    if !has_low || !has_high {
        return Err(Error::Scheme(format!(
            "IVIM fit needs b-values on both sides of {} ms/um^2",
            IVIM_SEGMENTATION_B
        )));
    }
    check_table_shells(table, n_shells)?;

    let fits: Vec<(IvimFit, f64)> = (0..table.n_voxels)
        .into_par_iter()
        .map(|v| {
            let y = &table.row(v)[..n_shells];
            let fit = ivim_fit_voxel(&bs, y);
            let pred: Vec<f64> = bs
                .iter()
                .map(|&b| ivim_signal(fit.s0, fit.f, fit.d_star.unwrap_or(fit.d), fit.d, b))
                .collect();
            let mse = dw_mse(&pred, y);
            (fit, mse)
        })
        .collect();

    let (params, mse): (Vec<_>, Vec<_>) = fits.into_iter().unzip();
    Ok(FitResult {
        model: ModelKind::Ivim,
        params: FitParams::Ivim(params),
        mse,
        voxel_indices: table.voxel_indices.clone(),
        dims: table.dims,
        diagnostics: None,
    })
}

fn ivim_fit_voxel(bs: &[f64], y: &[f64]) -> IvimFit {
    let high: Vec<(f64, f64)> = bs
        .iter()
        .zip(y)
        .filter(|(b, s)| **b >= IVIM_SEGMENTATION_B && **s > 0.0)
        .map(|(b, s)| (*b, s.ln()))
        .collect();
    if high.len() < 2 {
        return IvimFit {
            s0: f64::NAN,
            f: f64::NAN,
            d_star: None,
            d: f64::NAN,
        };
    }
    let (slope, intercept) = line_fit(&high);
    let d = -slope;
    let tissue_at_zero = intercept.exp();
    let gap = 1.0 - tissue_at_zero;
    if gap <= 0.0 {
        return IvimFit {
            s0: tissue_at_zero,
            f: 0.0,
            d_star: None,
            d,
        };
    }
    let f = gap;
    let low: Vec<(f64, f64)> = bs
        .iter()
        .zip(y)
        .filter(|(b, _)| **b < IVIM_SEGMENTATION_B)
        .map(|(b, s)| (*b, *s))
        .collect();
    // Keep d <= d_star by construction.
    let lo = IVIM_D_STAR_BOUNDS.0.max(d);
    let hi = IVIM_D_STAR_BOUNDS.1.max(lo);
    let objective = |d_star: f64| -> f64 {
        low.iter()
            .map(|&(b, s)| {
                let m = f * (-b * d_star).exp() + (1.0 - f) * (-b * d).exp();
                (s - m) * (s - m)
            })
            .sum()
    };
    let d_star = golden_section_min(objective, lo, hi, 1e-10);
    IvimFit {
        s0: 1.0,
        f,
        d_star: Some(d_star),
        d,
    }
}

/// Golden-section minimization of a unimodal function on [lo, hi].
fn golden_section_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol * (1.0 + a.abs() + b.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

// ---------------------------------------------------------------------------
// Goodness of fit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GofReport {
    /// Per-voxel MSE over DW entries (NaN for unfitted voxels).
    pub per_voxel: Vec<f64>,
    /// Mean over voxels with finite MSE.
    pub overall_mean: f64,
    pub n_skipped: usize,
    /// ROI label -> mean MSE over member voxels.
    pub per_roi: BTreeMap<String, f64>,
}

/// Predicted DW shell ratios for one fitted voxel; None when the fit is
/// missing.
pub fn predict_dw(result: &FitResult, row: usize, bs: &[f64], cache: &ModelCacheHandle) -> Option<Vec<f64>> {
    match &result.params {
        FitParams::Verdict(p) => {
            let pred = cache.0.predict(&p[row]);
            Some(pred[..bs.len()].to_vec())
        }
        FitParams::Adc(p) => p[row]
            .map(|a| bs.iter().map(|&b| crate::signal::adc_signal(a.s0, a.adc, b)).collect()),
        FitParams::Ivim(p) => {
            let f = &p[row];
            if !f.d.is_finite() {
                return None;
            }
            Some(
                bs.iter()
                    .map(|&b| ivim_signal(f.s0, f.f, f.d_star.unwrap_or(f.d), f.d, b))
                    .collect(),
            )
        }
    }
}

/// Opaque forward-model cache for repeated predictions over one scheme.
pub struct ModelCacheHandle(ModelCache);

impl ModelCacheHandle {
    pub fn new(
        scheme: &AcquisitionScheme,
        fixed: &FixedDiffusivities,
        vascular: VascularGeometry,
    ) -> Result<Self> {
        Ok(Self(ModelCache::new(scheme, fixed, vascular)?))
    }
}

/// Recomputes per-voxel MSE over DW entries and aggregates over ROIs
/// (mean over member voxels).
pub fn goodness_of_fit(
    result: &FitResult,
    table: &VoxelTable,
    scheme: &AcquisitionScheme,
    masks: &[RoiMask],
    fixed: &FixedDiffusivities,
    vascular: VascularGeometry,
) -> Result<GofReport> {
    if result.voxel_indices != table.voxel_indices {
        return Err(Error::Input(
            "fit result and table cover different voxels".into(),
        ));
    }
    let shells = scheme.shells();
    let n_shells = shells.len();
    check_table_shells(table, n_shells)?;
    let bs: Vec<f64> = shells.iter().map(|s| s.b).collect();
    let cache = ModelCacheHandle::new(scheme, fixed, vascular)?;

    let per_voxel: Vec<f64> = (0..table.n_voxels)
        .map(|v| match predict_dw(result, v, &bs, &cache) {
            Some(pred) => dw_mse(&pred, &table.row(v)[..n_shells]),
            None => f64::NAN,
        })
        .collect();

    let finite: Vec<f64> = per_voxel.iter().copied().filter(|m| m.is_finite()).collect();
    let overall_mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };

    let mut per_roi = BTreeMap::new();
    for mask in masks {
        let mut vals = Vec::new();
        for &vi in &mask.indices {
            if let Ok(row) = result.voxel_indices.binary_search(&vi) {
                if per_voxel[row].is_finite() {
                    vals.push(per_voxel[row]);
                }
            }
        }
        if vals.is_empty() {
            return Err(Error::Input(format!(
                "ROI '{}' selects no fitted voxels",
                mask.label
            )));
        }
        per_roi.insert(
            mask.label.clone(),
            vals.iter().sum::<f64>() / vals.len() as f64,
        );
    }

    Ok(GofReport {
        n_skipped: per_voxel.len() - finite.len(),
        per_voxel,
        overall_mean,
        per_roi,
    })
}

// ---------------------------------------------------------------------------
// Vascular variant comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct VariantSummary {
    pub geometry: VascularGeometry,
    pub d_vasc: f64,
    pub mean_rss: f64,
    pub mean_aic: f64,
    pub mean_bic: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct VariantComparison {
    /// Sorted ascending by mean AIC.
    pub entries: Vec<VariantSummary>,
    pub best_by_aic: (VascularGeometry, f64),
    pub best_by_bic: (VascularGeometry, f64),
}

/// The four vascular-compartment candidates compared for model selection.
pub const VASCULAR_VARIANTS: [(VascularGeometry, f64); 4] = [
    (VascularGeometry::Astrosticks, 50.0),
    (VascularGeometry::Astrosticks, 10.0),
    (VascularGeometry::Ball, 50.0),
    (VascularGeometry::Ball, 10.0),
];

/// Fits all four vascular variants with the self-supervised fitter and
/// ranks them by mean per-voxel AIC/BIC over the DW residuals.
pub fn compare_vascular_variants(
    table: &VoxelTable,
    scheme: &AcquisitionScheme,
    base_cfg: &SsFitConfig,
) -> Result<VariantComparison> {
    if table.n_voxels == 0 {
        return Err(Error::Input("voxel table is empty".into()));
    }
    let n_shells = scheme.shells().len();
    let mut entries = Vec::with_capacity(VASCULAR_VARIANTS.len());
    for (geometry, d_vasc) in VASCULAR_VARIANTS {
        let mut cfg = base_cfg.clone();
        cfg.vascular = geometry;
        cfg.fixed.d_vasc = d_vasc;
        let fit = fit_verdict_ss(table, scheme, &cfg)?;
        let mut rss_sum = 0.0;
        let mut aic_sum = 0.0;
        let mut bic_sum = 0.0;
        for &mse in &fit.mse {
            let rss = mse * n_shells as f64;
            rss_sum += rss;
            let ic = information_criteria(rss.max(f64::MIN_POSITIVE), n_shells, 3)?;
            aic_sum += ic.aic;
            bic_sum += ic.bic;
        }
        let n = table.n_voxels as f64;
        entries.push(VariantSummary {
            geometry,
            d_vasc,
            mean_rss: rss_sum / n,
            mean_aic: aic_sum / n,
            mean_bic: bic_sum / n,
        });
    }
    entries.sort_by(|a, b| a.mean_aic.partial_cmp(&b.mean_aic).unwrap());
    let best_by_aic = (entries[0].geometry, entries[0].d_vasc);
    let best_bic = entries
        .iter()
        .min_by(|a, b| a.mean_bic.partial_cmp(&b.mean_bic).unwrap())
        .unwrap();
    let best_by_bic = (best_bic.geometry, best_bic.d_vasc);
    Ok(VariantComparison {
        entries,
        best_by_aic,
        best_by_bic,
    })
}
