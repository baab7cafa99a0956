//! On-disk dataset: `manifest.tsv` plus per-core raw arrays.
//!
//! Manifest columns: `core_id patient_id center_id label involvement_pct
//! depth_mm width_mm spacing_axial_mm spacing_lateral_mm image prostate
//! needle`, with `NA` for an absent involvement and paths relative to the
//! dataset directory.

use std::fs;
use std::path::Path;

use trusworthy_core::{Array2, CenterId, Core, Label, MaskKind, RegionMask, RfImage};

use super::raw::RawArray;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";
const HEADER: &str = "core_id\tpatient_id\tcenter_id\tlabel\tinvolvement_pct\tdepth_mm\twidth_mm\tspacing_axial_mm\tspacing_lateral_mm\timage\tprostate\tneedle";

fn array_to_raw(a: &Array2<f32>) -> RawArray<f32> {
    RawArray {
        dims: vec![a.rows(), a.cols()],
        data: a.as_slice().to_vec(),
    }
}

fn mask_to_raw(a: &Array2<bool>) -> RawArray<u8> {
    RawArray {
        dims: vec![a.rows(), a.cols()],
        data: a.as_slice().iter().map(|&b| b as u8).collect(),
    }
}

fn raw_to_array<T: Copy>(raw: RawArray<T>, what: &str) -> Result<Array2<T>> {
    if raw.dims.len() != 2 {
        return Err(Error::data(format!("{what}: expected a 2-D array, got dims {:?}", raw.dims)));
    }
    Array2::from_vec(raw.dims[0], raw.dims[1], raw.data).map_err(|e| Error::data(format!("{what}: {e}")))
}

/// Writes `cores` under `dir`, replacing any previous manifest.
pub fn write_dataset(dir: &Path, cores: &[Core]) -> Result<()> {
    let core_dir = dir.join("cores");
    fs::create_dir_all(&core_dir).map_err(|e| Error::io(&core_dir, e))?;
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    for c in cores {
        let files = [
            format!("cores/{}.image.raw", c.core_id),
            format!("cores/{}.prostate.raw", c.core_id),
            format!("cores/{}.needle.raw", c.core_id),
        ];
        array_to_raw(&c.image.samples).write(&dir.join(&files[0]))?;
        mask_to_raw(&c.prostate.mask).write(&dir.join(&files[1]))?;
        mask_to_raw(&c.needle.mask).write(&dir.join(&files[2]))?;
        let inv = c.involvement_pct.map_or_else(|| "NA".to_string(), |v| v.to_string());
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            c.core_id,
            c.patient_id,
            c.center_id,
            c.label.as_u8(),
            inv,
            c.image.depth_mm,
            c.image.width_mm,
            c.image.pixel_spacing.0,
            c.image.pixel_spacing.1,
            files[0],
            files[1],
            files[2],
        ));
    }
    let path = dir.join(MANIFEST);
    super::write_atomic(&path, manifest.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Core>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::data(format!("{}: unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| parse_row(dir, line).map_err(|e| Error::data(format!("{} row {}: {e}", path.display(), i + 1))))
        .collect()
}

fn parse_row(dir: &Path, line: &str) -> Result<Core> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 12 {
        return Err(Error::data(format!("expected 12 columns, got {}", f.len())));
    }
    let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| Error::data(format!("bad {what} `{s}`")));
    let label_code: u8 = f[3].parse().map_err(|_| Error::data(format!("bad label `{}`", f[3])))?;
    let label = Label::try_from(label_code).map_err(|e| Error::data(e.to_string()))?;
    let involvement_pct = match f[4] {
        "NA" => None,
        s => Some(num(s, "involvement")?),
    };
    let samples = raw_to_array(RawArray::<f32>::read(&dir.join(f[9]))?, f[9])?;
    let to_mask = |p: &str, kind| -> Result<RegionMask> {
        let a = raw_to_array(RawArray::<u8>::read(&dir.join(p))?, p)?;
        Ok(RegionMask::new(kind, a.map(|&v| v != 0)))
    };
    let image = RfImage {
        samples,
        depth_mm: num(f[5], "depth")?,
        width_mm: num(f[6], "width")?,
        pixel_spacing: (num(f[7], "axial spacing")?, num(f[8], "lateral spacing")?),
    };
    Ok(Core {
        core_id: f[0].to_string(),
        patient_id: f[1].to_string(),
        center_id: CenterId::new(f[2]),
        image,
        prostate: to_mask(f[10], MaskKind::Prostate)?,
        needle: to_mask(f[11], MaskKind::Needle)?,
        label,
        involvement_pct,
    })
}
