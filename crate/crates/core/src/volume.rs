//! Bit-exact container format for volumes, masks, and parameter maps.
//!
//! A volume is a JSON sidecar plus an adjacent `.raw` payload. The sidecar
//! (the path passed to read/write) has fields `shape`, `voxel_size_mm`,
//! `kind`, `scheme`, `dtype`, `byte_order`; the payload lives next to it
//! with the extension replaced by `.raw`. Layout is X fastest, then Y, Z,
//! V slowest; little-endian f32 for `signal` and `parameter_map` kinds,
//! u8 for `mask`. Writes are atomic (temp file + rename).

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::acquisition::{AcquisitionScheme, VoxelTable};
use crate::error::{Error, Result};
use crate::fit::FitResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Signal,
    Mask,
    ParameterMap,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Sidecar {
    /// X, Y, Z, V.
    pub shape: [usize; 4],
    pub voxel_size_mm: [f64; 3],
    pub kind: VolumeKind,
    /// Path of the scheme CSV this volume was acquired/simulated with;
    /// None for masks and maps.
    pub scheme: Option<String>,
    /// "f32" or "u8".
    pub dtype: String,
    /// Always "little".
    pub byte_order: String,
}

/// Decoded volume: descriptor plus payload values (masks widened to f64
/// 0/1 for a single access path; the payload bytes stay u8 on disk).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeContainer {
    pub sidecar: Sidecar,
    pub data: Vec<f64>,
}

impl VolumeContainer {
    pub fn new(sidecar: Sidecar, data: Vec<f64>) -> Result<Self> {
        let v = Self { sidecar, data };
        v.validate()?;
        Ok(v)
    }

    pub fn n_voxels(&self) -> usize {
        self.sidecar.shape[0] * self.sidecar.shape[1] * self.sidecar.shape[2]
    }

    pub fn n_volumes(&self) -> usize {
        self.sidecar.shape[3]
    }

    fn validate(&self) -> Result<()> {
        if self.sidecar.shape.iter().any(|&s| s == 0) {
            return Err(Error::Format("volume shape must be positive".into()));
        }
        let expect = self.n_voxels() * self.n_volumes();
        if self.data.len() != expect {
            return Err(Error::Shape(format!(
                "payload has {} values, shape implies {}",
                self.data.len(),
                expect
            )));
        }
        let dtype = expected_dtype(self.sidecar.kind);
        if self.sidecar.dtype != dtype {
            return Err(Error::Format(format!(
                "kind {:?} requires dtype {}, sidecar says {}",
                self.sidecar.kind, dtype, self.sidecar.dtype
            )));
        }
        if self.sidecar.byte_order != "little" {
            return Err(Error::Format(format!(
                "unsupported byte order {:?}",
                self.sidecar.byte_order
            )));
        }
        if self.sidecar.kind == VolumeKind::Mask {
            if let Some(bad) = self.data.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::Format(format!(
                    "mask volume contains value {} outside {{0, 1}}",
                    bad
                )));
            }
        }
        Ok(())
    }

    /// Value at (x, y, z, v).
    pub fn at(&self, x: usize, y: usize, z: usize, v: usize) -> f64 {
        let [sx, sy, sz, _] = self.sidecar.shape;
        self.data[x + sx * (y + sy * (z + sz * v))]
    }
}

fn expected_dtype(kind: VolumeKind) -> &'static str {
    match kind {
        VolumeKind::Mask => "u8",
        _ => "f32",
    }
}

fn payload_path(sidecar_path: &Path) -> PathBuf {
    sidecar_path.with_extension("raw")
}

/// Convenience constructor for a signal/map sidecar.
pub fn sidecar(shape: [usize; 4], kind: VolumeKind, scheme: Option<String>) -> Sidecar {
    Sidecar {
        shape,
        voxel_size_mm: [1.25, 1.25, 5.0],
        kind,
        scheme,
        dtype: expected_dtype(kind).to_string(),
        byte_order: "little".to_string(),
    }
}

/// Writes sidecar JSON and raw payload atomically.
pub fn write_volume(container: &VolumeContainer, path: &Path) -> Result<()> {
    container.validate()?;
    let json = serde_json::to_string_pretty(&container.sidecar)?;
    let mut payload: Vec<u8> =
        Vec::with_capacity(container.data.len() * byte_width(container.sidecar.kind));
    match container.sidecar.kind {
        VolumeKind::Mask => {
            for &v in &container.data {
                payload.push(v as u8);
            }
        }
        _ => {
            for &v in &container.data {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    atomic_write(path, json.as_bytes())?;
    atomic_write(&payload_path(path), &payload)?;
    Ok(())
}

fn byte_width(kind: VolumeKind) -> usize {
    match kind {
        VolumeKind::Mask => 1,
        _ => 4,
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a volume, validating payload length against the sidecar shape.
pub fn read_volume(path: &Path) -> Result<VolumeContainer> {
    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let bytes = std::fs::read(payload_path(path))?;
    let n = sidecar.shape.iter().product::<usize>();
    let expect = n * byte_width(sidecar.kind);
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "payload length mismatch: expected {} bytes, found {}",
            expect,
            bytes.len()
        )));
    }
    let data: Vec<f64> = match sidecar.kind {
        VolumeKind::Mask => bytes.iter().map(|&b| b as f64).collect(),
        _ => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    VolumeContainer::new(sidecar, data)
}

/// Extracts masked voxels (ascending flat index) into a table of raw
/// per-entry vectors. The volume's V axis must match the scheme's entry
/// count.
pub fn volume_to_table(
    volume: &VolumeContainer,
    mask: &VolumeContainer,
    scheme: &AcquisitionScheme,
) -> Result<VoxelTable> {
    if mask.sidecar.kind != VolumeKind::Mask {
        return Err(Error::Input("second volume must be a mask".into()));
    }
    if mask.sidecar.shape[..3] != volume.sidecar.shape[..3] || mask.n_volumes() != 1 {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match volume shape {:?}",
            mask.sidecar.shape, volume.sidecar.shape
        )));
    }
    if volume.n_volumes() != scheme.len() {
        return Err(Error::Shape(format!(
            "volume has {} frames, scheme has {} entries",
            volume.n_volumes(),
            scheme.len()
        )));
    }
    let n_voxels = volume.n_voxels();
    let indices: Vec<usize> = (0..n_voxels).filter(|&i| mask.data[i] != 0.0).collect();
    if indices.is_empty() {
        return Err(Error::Input("no voxels selected".into()));
    }
    let mut signals = Vec::with_capacity(indices.len() * scheme.len());
    for &i in &indices {
        for v in 0..scheme.len() {
            signals.push(volume.data[i + n_voxels * v]);
        }
    }
    let dims = (
        volume.sidecar.shape[0],
        volume.sidecar.shape[1],
        volume.sidecar.shape[2],
    );
    VoxelTable::new(signals, scheme.len(), indices, dims)
}

/// Emits one parameter-map volume per fitted parameter; unfitted voxels
/// hold NaN.
pub fn table_to_maps(fit: &FitResult) -> Result<Vec<(String, VolumeContainer)>> {
    let (x, y, z) = fit.dims;
    let n = x * y * z;
    let mut maps = Vec::new();
    for &name in fit.param_names() {
        let mut data = vec![f64::NAN; n];
        for (row, &vi) in fit.voxel_indices.iter().enumerate() {
            if let Some(v) = fit.param_value(row, name) {
                data[vi] = v;
            }
        }
        let container = VolumeContainer {
            sidecar: sidecar([x, y, z, 1], VolumeKind::ParameterMap, None),
            data,
        };
        maps.push((name.to_string(), container));
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::kidney_protocol;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("verdict-vol-{}-{}", tag, std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = temp_dir("rt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // f32-exact values so the f64 -> f32 narrowing is lossless.
        let data: Vec<f64> = (0..4 * 4 * 2 * 18)
            .map(|_| rng.gen_range(0.0f32..1.5f32) as f64)
            .collect();
        let vol = VolumeContainer::new(
            sidecar([4, 4, 2, 18], VolumeKind::Signal, Some("scheme.csv".into())),
            data,
        )
        .unwrap();
        let path = dir.join("vol.json");
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, vol);

        // Writing the read-back volume reproduces identical bytes.
        let path2 = dir.join("vol2.json");
        write_volume(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(dir.join("vol.raw")).unwrap(),
            std::fs::read(dir.join("vol2.raw")).unwrap()
        );
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = temp_dir("trunc");
        let vol = VolumeContainer::new(
            sidecar([2, 2, 1, 3], VolumeKind::Signal, None),
            vec![0.5; 12],
        )
        .unwrap();
        let path = dir.join("vol.json");
        write_volume(&vol, &path).unwrap();
        let raw = std::fs::read(dir.join("vol.raw")).unwrap();
        std::fs::write(dir.join("vol.raw"), &raw[..raw.len() - 4]).unwrap();
        let err = read_volume(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("48") && msg.contains("44"), "{}", msg);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mask_values_outside_zero_one_are_rejected() {
        assert!(VolumeContainer::new(
            sidecar([2, 1, 1, 1], VolumeKind::Mask, None),
            vec![0.0, 2.0],
        )
        .is_err());
    }

    #[test]
    fn table_extraction_and_maps() {
        let scheme = kidney_protocol();
        let n_entries = scheme.len();
        let (x, y, z) = (3, 2, 1);
        let n = x * y * z;
        let data: Vec<f64> = (0..n * n_entries).map(|i| (i % 7) as f64 * 0.1 + 0.1).collect();
        let vol = VolumeContainer::new(
            sidecar([x, y, z, n_entries], VolumeKind::Signal, None),
            data,
        )
        .unwrap();
        let all_ones = VolumeContainer::new(
            sidecar([x, y, z, 1], VolumeKind::Mask, None),
            vec![1.0; n],
        )
        .unwrap();
        let table = volume_to_table(&vol, &all_ones, &scheme).unwrap();
        assert_eq!(table.n_voxels, n);
        assert_eq!(table.n_meas, n_entries);
        // Row values follow the V axis for a fixed voxel.
        assert_eq!(table.row(1)[2], vol.at(1, 0, 0, 2));

        let empty = VolumeContainer::new(
            sidecar([x, y, z, 1], VolumeKind::Mask, None),
            vec![0.0; n],
        )
        .unwrap();
        assert!(volume_to_table(&vol, &empty, &scheme).is_err());

        let wrong = VolumeContainer::new(
            sidecar([x, 1, z, 1], VolumeKind::Mask, None),
            vec![1.0; 3],
        )
        .unwrap();
        assert!(volume_to_table(&vol, &wrong, &scheme).is_err());
    }

    #[test]
    fn maps_round_trip_masked_values() {
        use crate::fit::{FitParams, FitResult, ModelKind};
        use crate::signal::TissueParams;
        let fit = FitResult {
            model: ModelKind::Verdict,
            params: FitParams::Verdict(vec![
                TissueParams::new(0.25, 0.5, 10.0),
                TissueParams::new(0.5, 0.25, 5.0),
            ]),
            mse: vec![0.0, 0.0],
            voxel_indices: vec![1, 3],
            dims: (2, 2, 1),
            diagnostics: None,
        };
        let maps = table_to_maps(&fit).unwrap();
        assert_eq!(maps.len(), 4);
        let f_ic = &maps.iter().find(|(n, _)| n == "f_ic").unwrap().1;
        assert!(f_ic.data[0].is_nan());
        assert_eq!(f_ic.data[1], 0.25);
        assert!(f_ic.data[2].is_nan());
        assert_eq!(f_ic.data[3], 0.5);
        let f_vasc = &maps.iter().find(|(n, _)| n == "f_vasc").unwrap().1;
        assert_eq!(f_vasc.data[1], 0.25);
    }
}
