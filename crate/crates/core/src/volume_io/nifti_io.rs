use std::path::Path;

use ndarray::{Array3, ArrayBase, Data, Ix3};
use nifti::writer::WriterOptions;
use nifti::{DataElement, IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{check_spacing, Mask, Spacing, Volume};
use crate::error::{Error, Result};

/// Reads a `.nii` / `.nii.gz` volume. Values are returned as stored after
/// the header's slope/intercept scaling; spacing comes from `pixdim`.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let object = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| format_err(e.to_string()))?;
    let header = object.header().clone();
    let dims = header
        .dim()
        .map_err(|e| format_err(e.to_string()))?
        .to_vec();
    // Trailing singleton dimensions (e.g. a 4D file with one frame) are tolerated.
    let spatial = dims.iter().rposition(|&d| d > 1).map_or(0, |i| i + 1);
    if dims.len() < 3 || spatial > 3 {
        return Err(format_err(format!(
            "expected a 3D volume, found dims {dims:?}"
        )));
    }
    let data = object
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| format_err(e.to_string()))?;
    let (x, y, z) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let data: Array3<f32> = data
        .into_shape_clone((x, y, z))
        .map_err(|e| format_err(e.to_string()))?;
    let spacing = [
        header.pixdim[1] as f64,
        header.pixdim[2] as f64,
        header.pixdim[3] as f64,
    ];
    check_spacing(spacing).map_err(|e| format_err(e.to_string()))?;
    Ok(Volume {
        data,
        spacing,
        case_id: case_id_from_path(path),
        header: Some(header),
    })
}

/// Loads a label file, rejecting anything that is not strictly binary.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let volume = load_volume(path)?;
    if volume.data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "label values must be exactly 0 or 1".into(),
        });
    }
    Ok(Mask {
        data: volume.data.mapv(|v| v as u8),
        spacing: volume.spacing,
        case_id: volume.case_id,
    })
}

/// Writes a mask using the geometry of `reference`.
pub fn save_mask(mask: &Mask, reference: &Volume, path: impl AsRef<Path>) -> Result<()> {
    if mask.shape() != reference.shape() {
        return Err(Error::Alignment(format!(
            "mask shape {:?} does not match reference shape {:?}",
            mask.shape(),
            reference.shape()
        )));
    }
    write(&mask.data, reference, path.as_ref())
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write(&volume.data, volume, path.as_ref())
}

/// Writes a float map (e.g. foreground probabilities) on the grid of `reference`.
pub fn save_probability(
    probs: &Array3<f32>,
    reference: &Volume,
    path: impl AsRef<Path>,
) -> Result<()> {
    if probs.dim() != reference.shape() {
        return Err(Error::Alignment(format!(
            "probability map shape {:?} does not match reference shape {:?}",
            probs.dim(),
            reference.shape()
        )));
    }
    write(probs, reference, path.as_ref())
}

fn write<S, A>(data: &ArrayBase<S, Ix3>, reference: &Volume, path: &Path) -> Result<()>
where
    S: Data<Elem = A>,
    A: DataElement + bytemuck::Pod,
{
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let header = reference_header(reference);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(data)?;
    Ok(())
}

/// Header carrying the reference geometry. The source header is reused when
/// there is one so orientation fields pass through untouched.
fn reference_header(reference: &Volume) -> NiftiHeader {
    let mut header = match &reference.header {
        Some(h) => h.clone(),
        None => synthetic_header(reference.spacing),
    };
    for (i, s) in reference.spacing.iter().enumerate() {
        header.pixdim[i + 1] = *s as f32;
    }
    header
}

fn synthetic_header(spacing: Spacing) -> NiftiHeader {
    NiftiHeader {
        // mm
        xyzt_units: 2,
        srow_x: [spacing[0] as f32, 0.0, 0.0, 0.0],
        srow_y: [0.0, spacing[1] as f32, 0.0, 0.0],
        srow_z: [0.0, 0.0, spacing[2] as f32, 0.0],
        ..Default::default()
    }
}

fn case_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .to_string()
}
