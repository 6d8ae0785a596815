//! Acquisition schemes and voxel-table construction.
//!
//! Internal canonical units: b in ms/um^2, times in ms, lengths in um,
//! diffusivities in um^2/ms. External interfaces (scheme CSV, constructors
//! taking published values) accept b in s/mm^2 and convert once at the
//! boundary, so b*d is dimensionless everywhere inside the crate.
//!
//! Scheme files are CSV with header
//! `index,b_s_mm2,delta_ms,Delta_ms,TE_ms,dir,is_b0`; `dir` is empty for
//! b0 rows. DW rows pair with the most recent preceding b0 row that has
//! an identical TE.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Converts an externally supplied b-value (s/mm^2) to internal units (ms/um^2).
pub fn b_from_s_mm2(b: f64) -> f64 {
    b * 1e-3
}

/// One acquisition entry: either a diffusion-weighted measurement or a b0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionPoint {
    /// Diffusion weighting in ms/um^2 (internal units).
    pub b: f64,
    /// Gradient pulse duration delta (ms).
    pub delta: f64,
    /// Gradient pulse separation Delta (ms).
    pub big_delta: f64,
    /// Echo time (ms).
    pub te: f64,
    /// Direction index for DW entries; `None` for b0 entries.
    pub direction: Option<u8>,
}

impl AcquisitionPoint {
    pub fn is_b0(&self) -> bool {
        self.b == 0.0
    }

    /// External-unit view of the b-value (s/mm^2).
    pub fn b_s_mm2(&self) -> f64 {
        self.b * 1e3
    }

    fn validate(&self) -> Result<()> {
        if !(self.b >= 0.0) {
            return Err(Error::Scheme(format!("b must be >= 0, got {}", self.b)));
        }
        if self.is_b0() != self.direction.is_none() {
            return Err(Error::Scheme(
                "b = 0 entries must have no direction and DW entries must have one".into(),
            ));
        }
        if !(self.delta > 0.0 && self.delta < self.big_delta) {
            return Err(Error::Scheme(format!(
                "require 0 < delta < Delta, got delta = {}, Delta = {}",
                self.delta, self.big_delta
            )));
        }
        if !(self.te > 0.0) {
            return Err(Error::Scheme(format!("TE must be > 0, got {}", self.te)));
        }
        Ok(())
    }
}

/// A DW shell: one b-value with its direction entries and TE-matched b0.
#[derive(Debug, Clone, PartialEq)]
pub struct Shell {
    /// b in ms/um^2.
    pub b: f64,
    pub delta: f64,
    pub big_delta: f64,
    pub te: f64,
    /// Indices (into `AcquisitionScheme::points`) of the DW direction entries.
    pub dw_indices: Vec<usize>,
    /// Index of the TE-matched b0 entry.
    pub b0_index: usize,
}

/// Ordered acquisition entries plus the DW -> b0 pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionScheme {
    points: Vec<AcquisitionPoint>,
    /// For each point: index of its TE-matched b0 (`None` for b0 points).
    b0_pairing: Vec<Option<usize>>,
}

impl AcquisitionScheme {
    /// Builds a scheme from ordered points, pairing each DW entry with the
    /// most recent preceding b0 entry of identical TE.
    pub fn new(points: Vec<AcquisitionPoint>) -> Result<Self> {
        let mut pairing = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            p.validate()?;
            if p.is_b0() {
                pairing.push(None);
            } else {
                let b0 = points[..i]
                    .iter()
                    .rposition(|q| q.is_b0() && q.te == p.te)
                    .ok_or_else(|| {
                        Error::Scheme(format!(
                            "DW entry {} (b = {} s/mm^2, TE = {}) has no preceding b0 with matching TE",
                            i,
                            p.b_s_mm2(),
                            p.te
                        ))
                    })?;
                pairing.push(Some(b0));
            }
        }
        Ok(Self {
            points,
            b0_pairing: pairing,
        })
    }

    pub fn points(&self) -> &[AcquisitionPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// TE-matched b0 index for the point at `idx` (`None` if it is a b0).
    pub fn paired_b0(&self, idx: usize) -> Option<usize> {
        self.b0_pairing[idx]
    }

    pub fn n_b0(&self) -> usize {
        self.points.iter().filter(|p| p.is_b0()).count()
    }

    pub fn n_dw(&self) -> usize {
        self.points.len() - self.n_b0()
    }

    /// Index of the reference b0: the first b0 entry with minimal TE.
    pub fn reference_b0(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, p) in self.points.iter().enumerate() {
            if p.is_b0() && best.is_none_or(|j| p.te < self.points[j].te) {
                best = Some(i);
            }
        }
        best
    }

    /// DW shells in scheme order, grouped by paired b0 (each shell is the
    /// set of DW directions sharing one b0 entry).
    pub fn shells(&self) -> Vec<Shell> {
        let mut order: Vec<usize> = Vec::new();
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.points.iter().enumerate() {
            if p.is_b0() {
                continue;
            }
            let b0 = self.b0_pairing[i].expect("DW point is always paired");
            if !groups.contains_key(&b0) {
                order.push(b0);
            }
            groups.entry(b0).or_default().push(i);
        }
        order
            .into_iter()
            .map(|b0| {
                let dw = groups.remove(&b0).unwrap();
                let first = &self.points[dw[0]];
                Shell {
                    b: first.b,
                    delta: first.delta,
                    big_delta: first.big_delta,
                    te: first.te,
                    dw_indices: dw,
                    b0_index: b0,
                }
            })
            .collect()
    }

    /// Number of image volumes: one per DW shell (after direction
    /// averaging) plus one per b0.
    pub fn n_image_volumes(&self) -> usize {
        self.shells().len() + self.n_b0()
    }

    /// Keeps only the shells whose b-value (s/mm^2) is in `keep`, together
    /// with their b0 entries, preserving entry order.
    pub fn restrict_to_b_values(&self, keep: &[f64]) -> Result<AcquisitionScheme> {
        let shells = self.shells();
        let mut retain = vec![false; self.points.len()];
        for shell in &shells {
            if keep.iter().any(|&k| (b_from_s_mm2(k) - shell.b).abs() < 1e-12) {
                retain[shell.b0_index] = true;
                for &i in &shell.dw_indices {
                    retain[i] = true;
                }
            }
        }
        let points: Vec<AcquisitionPoint> = self
            .points
            .iter()
            .zip(&retain)
            .filter(|(_, &r)| r)
            .map(|(p, _)| *p)
            .collect();
        if points.is_empty() {
            return Err(Error::Scheme("restriction keeps no entries".into()));
        }
        AcquisitionScheme::new(points)
    }

    /// Writes the scheme CSV (`index,b_s_mm2,delta_ms,Delta_ms,TE_ms,dir,is_b0`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "b_s_mm2", "delta_ms", "Delta_ms", "TE_ms", "dir", "is_b0"])?;
        for (i, p) in self.points.iter().enumerate() {
            let dir = p.direction.map(|d| d.to_string()).unwrap_or_default();
            w.write_record([
                i.to_string(),
                format!("{}", p.b_s_mm2()),
                format!("{}", p.delta),
                format!("{}", p.big_delta),
                format!("{}", p.te),
                dir,
                p.is_b0().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a scheme CSV written by [`AcquisitionScheme::write_csv`].
    pub fn read_csv(path: &Path) -> Result<AcquisitionScheme> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 7 {
                return Err(Error::Scheme(format!(
                    "scheme row must have 7 fields, got {}",
                    rec.len()
                )));
            }
            let field = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Scheme(format!("bad numeric field {:?}", &rec[i])))
            };
            let b_ext = field(1)?;
            let direction = match rec[5].trim() {
                "" => None,
                s => Some(s.parse::<u8>().map_err(|_| {
                    Error::Scheme(format!("bad direction field {:?}", s))
                })?),
            };
            let is_b0 = match rec[6].trim() {
                "true" | "1" => true,
                "false" | "0" => false,
                s => return Err(Error::Scheme(format!("bad is_b0 field {:?}", s))),
            };
            if is_b0 != (b_ext == 0.0) {
                return Err(Error::Scheme(format!(
                    "row {}: is_b0 = {} inconsistent with b = {}",
                    &rec[0], is_b0, b_ext
                )));
            }
            points.push(AcquisitionPoint {
                b: b_from_s_mm2(b_ext),
                delta: field(2)?,
                big_delta: field(3)?,
                te: field(4)?,
                direction,
            });
        }
        AcquisitionScheme::new(points)
    }
}

/// The nine published (b, delta, Delta) shells of the kidney protocol.
/// b in s/mm^2, delta and Delta in ms.
pub const KIDNEY_SHELLS: [(f64, f64, f64); 9] = [
    (70.0, 4.8, 27.0),
    (90.0, 4.8, 27.0),
    (150.0, 4.8, 27.0),
    (500.0, 12.0, 34.0),
    (1000.0, 12.0, 34.0),
    (1500.0, 26.3, 47.0),
    (2000.0, 16.8, 37.5),
    (2200.0, 16.8, 37.5),
    (2500.0, 21.4, 43.5),
];

/// Seconds per image volume that calibrate the full 18-volume kidney
/// protocol to 40.0 minutes.
pub const KIDNEY_SECONDS_PER_VOLUME: f64 = 40.0 * 60.0 / 18.0;

// Echo times are not part of the published table; they are assigned per
// (delta, Delta) combination, increasing with Delta + delta and spanning
// the reported 54-87 ms range. TE only determines b0 pairing here: the
// signal model has no TE dependence.
fn kidney_te(delta: f64, big_delta: f64) -> f64 {
    match (delta * 10.0) as i64 {
        48 => 54.0,
        120 => 65.0,
        168 => 72.0,
        214 => 80.0,
        263 => 87.0,
        _ => unreachable!("unknown kidney shell (delta = {}, Delta = {})", delta, big_delta),
    }
}

/// The 9-shell kidney acquisition: per shell one b0 followed by three
/// orthogonal DW directions (36 entries, 18 image volumes after
/// direction averaging).
pub fn kidney_protocol() -> AcquisitionScheme {
    let mut points = Vec::with_capacity(36);
    for &(b, delta, big_delta) in &KIDNEY_SHELLS {
        let te = kidney_te(delta, big_delta);
        points.push(AcquisitionPoint {
            b: 0.0,
            delta,
            big_delta,
            te,
            direction: None,
        });
        for dir in 0..3u8 {
            points.push(AcquisitionPoint {
                b: b_from_s_mm2(b),
                delta,
                big_delta,
                te,
                direction: Some(dir),
            });
        }
    }
    AcquisitionScheme::new(points).expect("kidney protocol is a valid scheme")
}

/// Squared gradient factor q = gamma^2 G^2 (um^-2 ms^-2) of a DW entry,
/// from the PGSE relation b = gamma^2 G^2 delta^2 (Delta - delta/3).
pub fn pulse_strength_factor(p: &AcquisitionPoint) -> Result<f64> {
    if p.is_b0() {
        return Err(Error::Domain("no gradient factor for b=0".into()));
    }
    Ok(p.b / (p.delta * p.delta * (p.big_delta - p.delta / 3.0)))
}

/// Normalizes one voxel's raw values: each DW entry is divided by its
/// TE-matched b0 and the directions of a shell are averaged, yielding one
/// ratio per shell; each b0 entry becomes its ratio to the reference
/// (shortest-TE) b0. Output layout: shell DW ratios in scheme order, then
/// b0 ratios in scheme order.
pub fn normalize_and_average(raw: &[f64], scheme: &AcquisitionScheme) -> Result<Vec<f64>> {
    if raw.len() != scheme.len() {
        return Err(Error::Shape(format!(
            "raw vector has {} entries, scheme has {}",
            raw.len(),
            scheme.len()
        )));
    }
    let reference = scheme
        .reference_b0()
        .ok_or_else(|| Error::Scheme("scheme has no b0 entry".into()))?;
    if raw[reference] <= 0.0 {
        return Err(Error::Input("reference b0 is not positive".into()));
    }
    let shells = scheme.shells();
    let mut out = Vec::with_capacity(2 * shells.len());
    for shell in &shells {
        let b0 = raw[shell.b0_index];
        if b0 <= 0.0 {
            return Err(Error::Input(format!(
                "matched b0 for shell b = {} s/mm^2 is not positive",
                shell.b * 1e3
            )));
        }
        let mean = shell.dw_indices.iter().map(|&i| raw[i] / b0).sum::<f64>()
            / shell.dw_indices.len() as f64;
        out.push(mean);
    }
    for shell in &shells {
        out.push(raw[shell.b0_index] / raw[reference]);
    }
    Ok(out)
}

/// Direction-level normalization: every DW entry divided by its TE-matched
/// b0, in scheme order, without averaging (27 values for the kidney scheme).
pub fn normalize_directions(raw: &[f64], scheme: &AcquisitionScheme) -> Result<Vec<f64>> {
    if raw.len() != scheme.len() {
        return Err(Error::Shape(format!(
            "raw vector has {} entries, scheme has {}",
            raw.len(),
            scheme.len()
        )));
    }
    let mut out = Vec::with_capacity(scheme.n_dw());
    for (i, p) in scheme.points().iter().enumerate() {
        if p.is_b0() {
            continue;
        }
        let b0 = raw[scheme.paired_b0(i).expect("DW point is paired")];
        if b0 <= 0.0 {
            return Err(Error::Input(format!(
                "matched b0 for entry {} is not positive",
                i
            )));
        }
        out.push(raw[i] / b0);
    }
    Ok(out)
}

/// Applies [`normalize_and_average`] to every row of a raw per-entry
/// table. Voxels with a non-positive matched b0 are excluded; the second
/// return value counts them.
pub fn table_normalize_average(
    raw: &VoxelTable,
    scheme: &AcquisitionScheme,
) -> Result<(VoxelTable, usize)> {
    normalize_table_with(raw, scheme, normalize_and_average, 2 * scheme.shells().len())
}

/// Applies [`normalize_directions`] to every row of a raw per-entry table
/// (direction-level, non-averaged). Invalid voxels are excluded and
/// counted.
pub fn table_normalize_directions(
    raw: &VoxelTable,
    scheme: &AcquisitionScheme,
) -> Result<(VoxelTable, usize)> {
    normalize_table_with(raw, scheme, normalize_directions, scheme.n_dw())
}

fn normalize_table_with(
    raw: &VoxelTable,
    scheme: &AcquisitionScheme,
    f: impl Fn(&[f64], &AcquisitionScheme) -> Result<Vec<f64>>,
    n_out: usize,
) -> Result<(VoxelTable, usize)> {
    if raw.n_meas != scheme.len() {
        return Err(Error::Shape(format!(
            "raw table has {} entries per voxel, scheme has {}",
            raw.n_meas,
            scheme.len()
        )));
    }
    let mut signals = Vec::with_capacity(raw.n_voxels * n_out);
    let mut indices = Vec::with_capacity(raw.n_voxels);
    let mut excluded = 0usize;
    for (row, &vi) in raw.rows().zip(&raw.voxel_indices) {
        match f(row, scheme) {
            Ok(v) => {
                signals.extend_from_slice(&v);
                indices.push(vi);
            }
            Err(Error::Input(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if indices.is_empty() {
        return Err(Error::Input("all voxels excluded during normalization".into()));
    }
    let table = VoxelTable::new(signals, n_out, indices, raw.dims)?;
    Ok((table, excluded))
}

/// Scan duration in minutes: image volumes times `seconds_per_volume`,
/// reported to one decimal.
pub fn estimate_duration(scheme: &AcquisitionScheme, seconds_per_volume: f64) -> Result<f64> {
    if !(seconds_per_volume > 0.0) {
        return Err(Error::Domain(format!(
            "seconds_per_volume must be > 0, got {}",
            seconds_per_volume
        )));
    }
    let minutes = scheme.n_image_volumes() as f64 * seconds_per_volume / 60.0;
    Ok((minutes * 10.0).round() / 10.0)
}

/// Per-voxel normalized signal vectors for all masked voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelTable {
    pub n_voxels: usize,
    pub n_meas: usize,
    /// Row-major n_voxels x n_meas.
    pub signals: Vec<f64>,
    /// Flat indices into the source volume, strictly increasing.
    pub voxel_indices: Vec<usize>,
    /// Source volume shape (X, Y, Z).
    pub dims: (usize, usize, usize),
}

impl VoxelTable {
    pub fn new(
        signals: Vec<f64>,
        n_meas: usize,
        voxel_indices: Vec<usize>,
        dims: (usize, usize, usize),
    ) -> Result<Self> {
        if n_meas == 0 || signals.len() % n_meas != 0 {
            return Err(Error::Shape(format!(
                "signal buffer of {} values is not a multiple of n_meas = {}",
                signals.len(),
                n_meas
            )));
        }
        let n_voxels = signals.len() / n_meas;
        if voxel_indices.len() != n_voxels {
            return Err(Error::Shape(format!(
                "{} voxel indices for {} rows",
                voxel_indices.len(),
                n_voxels
            )));
        }
        let total = dims.0 * dims.1 * dims.2;
        for w in voxel_indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Input("voxel indices must be strictly increasing".into()));
            }
        }
        if let Some(&last) = voxel_indices.last() {
            if last >= total {
                return Err(Error::Input(format!(
                    "voxel index {} outside volume of {} voxels",
                    last, total
                )));
            }
        }
        if let Some(bad) = signals.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite signal at row {}, column {}",
                bad / n_meas,
                bad % n_meas
            )));
        }
        Ok(Self {
            n_voxels,
            n_meas,
            signals,
            voxel_indices,
            dims,
        })
    }

    pub fn row(&self, voxel: usize) -> &[f64] {
        &self.signals[voxel * self.n_meas..(voxel + 1) * self.n_meas]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.signals.chunks_exact(self.n_meas)
    }
}
