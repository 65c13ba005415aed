//! On-disk field snapshots: a flat little-endian `f64` array (row-major,
//! components stacked) next to a JSON header with the same stem.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::{Domain, Grid};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "L")]
    pub l: f64,
    pub time: f64,
    pub name: String,
    #[serde(default = "one")]
    pub components: usize,
}

fn one() -> usize {
    1
}

impl SnapshotHeader {
    pub fn grid(&self) -> Result<Grid> {
        Grid::with_box(self.d, self.n, self.l, Grid::DEFAULT_DEALIAS)
    }
}

/// Header path belonging to a `.bin` payload.
pub fn header_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `fields` (one per component) to `bin` and its JSON header.
pub fn write_snapshot<T: Real>(bin: &Path, name: &str, time: f64, fields: &[&ScalarField<T>]) -> Result<()> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidParameter("snapshot needs at least one field".into()))?;
    let grid = *first.grid();
    let mut bytes = Vec::with_capacity(8 * grid.len() * fields.len());
    for f in fields {
        first.same_grid(f)?;
        for v in f.values() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let header = SnapshotHeader {
        d: grid.dim,
        n: grid.n,
        l: grid.length,
        time,
        name: name.to_string(),
        components: fields.len(),
    };
    let mut out = fs::File::create(bin)?;
    out.write_all(&bytes)?;
    fs::write(header_path(bin), serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

/// Reads a snapshot back as raw component arrays.
pub fn read_snapshot(bin: &Path) -> Result<(SnapshotHeader, Vec<Vec<f64>>)> {
    let header: SnapshotHeader = serde_json::from_slice(&fs::read(header_path(bin))?)?;
    let grid = header.grid()?;
    let bytes = fs::read(bin)?;
    let expected = 8 * grid.len() * header.components;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: {} bytes, header implies {expected}",
            bin.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let comps = values.chunks(grid.len()).map(<[f64]>::to_vec).collect();
    Ok((header, comps))
}

pub fn read_scalar_field<T: Real>(bin: &Path, domain: &Arc<Domain<T>>) -> Result<(SnapshotHeader, ScalarField<T>)> {
    let (header, comps) = read_snapshot(bin)?;
    check_grid(&header, domain, 1)?;
    let values = comps[0].iter().map(|&v| T::lit(v)).collect();
    Ok((header, ScalarField::from_values(domain, values)?))
}

pub fn read_vector_field<T: Real>(bin: &Path, domain: &Arc<Domain<T>>) -> Result<VectorField<T>> {
    let (header, comps) = read_snapshot(bin)?;
    check_grid(&header, domain, domain.dim())?;
    let fields = comps
        .into_iter()
        .map(|c| ScalarField::from_values(domain, c.into_iter().map(T::lit).collect()))
        .collect::<Result<Vec<_>>>()?;
    VectorField::new(fields)
}

fn check_grid<T: Real>(header: &SnapshotHeader, domain: &Domain<T>, components: usize) -> Result<()> {
    let grid = domain.grid();
    if header.d != grid.dim || header.n != grid.n || (header.l - grid.length).abs() > 1e-12 * grid.length {
        return Err(Error::GridMismatch(format!(
            "snapshot '{}' is {}^{} on L = {}, expected {grid}",
            header.name, header.n, header.d, header.l
        )));
    }
    if header.components != components {
        return Err(Error::Format(format!(
            "snapshot '{}' has {} components, expected {components}",
            header.name, header.components
        )));
    }
    Ok(())
}
