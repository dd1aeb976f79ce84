//! `DTNO` dataset file: little-endian header followed by one f32 density
//! payload per simulation (row-major, time outer).

use std::path::Path;

use ndarray::Array2;

use super::{Dataset, SimRecord};
use crate::binio::{read_file, LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::lwr::DensityField;

pub const DATASET_MAGIC: &[u8; 4] = b"DTNO";
pub const DATASET_VERSION: u32 = 1;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} = {v} exceeds u32")))
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let first = data
        .sims
        .first()
        .ok_or_else(|| Error::Config("dataset has no simulations".into()))?;
    let (nt, nx) = first.field.rho.dim();
    let mut w = LeWriter::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(to_u32(data.sims.len(), "n_sims")?);
    w.u32(to_u32(data.n_train, "n_train")?);
    w.u32(to_u32(nx, "nx")?);
    w.u32(to_u32(nt, "nt")?);
    w.f64(first.field.dx);
    w.f64(first.field.dt);
    w.f64(data.road_length);
    w.f64(data.total_time);
    w.buf.reserve(data.sims.len() * (8 + 4 * nt * nx));
    for rec in &data.sims {
        if rec.field.rho.dim() != (nt, nx) {
            return Err(Error::Contract("simulations have different grid shapes".into()));
        }
        w.u64(rec.seed);
        // Iteration order of a standard-layout array is row-major.
        for &v in rec.field.rho.iter() {
            w.f32(v as f32);
        }
    }
    Ok(w.buf)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let bytes = encode_dataset(data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = LeReader::new(bytes, path);
    r.expect_magic(DATASET_MAGIC)?;
    r.expect_version(DATASET_VERSION)?;
    let n_sims = r.u32()? as usize;
    let n_train = r.u32()? as usize;
    let nx = r.u32()? as usize;
    let nt = r.u32()? as usize;
    let dx = r.f64()?;
    let dt = r.f64()?;
    let road_length = r.f64()?;
    let total_time = r.f64()?;
    if n_sims == 0 || n_train > n_sims || nx < 2 || nt < 1 {
        return Err(r.error(format!(
            "inconsistent header: n_sims={n_sims} n_train={n_train} nx={nx} nt={nt}"
        )));
    }
    let per_sim = 8 + 4 * nt * nx;
    if r.remaining() != n_sims * per_sim {
        return Err(r.error(format!(
            "payload is {} bytes, header implies {}",
            r.remaining(),
            n_sims * per_sim
        )));
    }
    let mut sims = Vec::with_capacity(n_sims);
    for _ in 0..n_sims {
        let seed = r.u64()?;
        let payload = r.f32_vec(nt * nx)?;
        let rho = Array2::from_shape_vec((nt, nx), payload.into_iter().map(f64::from).collect())
            .map_err(|e| r.error(e.to_string()))?;
        sims.push(SimRecord {
            seed,
            field: DensityField { rho, dx, dt },
        });
    }
    Ok(Dataset {
        n_train,
        road_length,
        total_time,
        sims,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    decode_dataset(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, WindowSpec};
    use crate::lwr::SimConfig;

    fn small() -> (SimConfig, Dataset) {
        let sim = SimConfig {
            nx: 20,
            total_time: 12.0,
            ..SimConfig::default()
        };
        let data = build_dataset(3, &sim, &WindowSpec::default(), 7, 1).unwrap();
        (sim, data)
    }

    #[test]
    fn header_layout() {
        let (_, data) = small();
        let bytes = encode_dataset(&data).unwrap();
        assert_eq!(&bytes[..4], b"DTNO");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 20);
        let nt = data.sims[0].field.nt();
        assert_eq!(bytes.len(), 56 + 3 * (8 + 4 * nt * 20));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (_, data) = small();
        let bytes = encode_dataset(&data).unwrap();
        let back = decode_dataset(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let (_, data) = small();
        let bytes = encode_dataset(&data).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_dataset(cut, Path::new("mem")),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_dataset(&bad, Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_dataset(Path::new("/nonexistent/d.dtno")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/d.dtno"));
    }
}
