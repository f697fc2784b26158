//! Minimal NIfTI-1 adapter: uncompressed single-file `.nii`, float32, for
//! moving volumes in and out of neuroimaging tools. The native dataset
//! container stays `.dsv`; this is an interop edge only.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Array;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: f32 = 352.0;
const DTYPE_FLOAT32: i16 = 16;

/// Write a `[d, h, w]` volume as `.nii` (float32, 1 mm isotropic).
/// Axis order maps depth to the NIfTI z axis.
pub fn write_nifti(path: &Path, vol: &Array) -> Result<()> {
    if vol.rank() != 3 {
        return Err(Error::Contract(format!("nifti export needs rank 3, got {:?}", vol.shape())));
    }
    let sh = vol.shape();
    let (d, h, w) = (sh[0], sh[1], sh[2]);
    let mut header = vec![0u8; HEADER_SIZE];
    let put_i32 = |buf: &mut [u8], off: usize, v: i32| buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_i16 = |buf: &mut [u8], off: usize, v: i16| buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |buf: &mut [u8], off: usize, v: f32| buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
    put_i32(&mut header, 0, HEADER_SIZE as i32); // sizeof_hdr
    // dim[0] = rank, dim[1..3] = x, y, z.
    put_i16(&mut header, 40, 3);
    put_i16(&mut header, 42, w as i16);
    put_i16(&mut header, 44, h as i16);
    put_i16(&mut header, 46, d as i16);
    for k in 4..8 {
        put_i16(&mut header, 40 + 2 * k, 1);
    }
    put_i16(&mut header, 70, DTYPE_FLOAT32); // datatype
    put_i16(&mut header, 72, 32); // bitpix
    // pixdim: qfac + 1 mm spacing.
    put_f32(&mut header, 76, 1.0);
    for k in 1..4 {
        put_f32(&mut header, 76 + 4 * k, 1.0);
    }
    put_f32(&mut header, 108, VOX_OFFSET);
    put_f32(&mut header, 112, 1.0); // scl_slope
    // magic "n+1\0"
    header[344..348].copy_from_slice(b"n+1\0");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&header)?;
    f.write_all(&[0u8; 4])?; // extension flag
    // NIfTI stores x fastest; our row-major [d, h, w] already walks x
    // fastest within a row, so stream z-major slices as-is.
    for &v in vol.data() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Read an uncompressed float32 `.nii` written by `write_nifti` (or any
/// tool using the same layout) back into a `[d, h, w]` volume.
pub fn read_nifti(path: &Path) -> Result<Array> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = vec![0u8; HEADER_SIZE];
    r.read_exact(&mut header)?;
    let get_i16 = |off: usize| i16::from_le_bytes([header[off], header[off + 1]]);
    let get_f32 = |off: usize| {
        f32::from_le_bytes([header[off], header[off + 1], header[off + 2], header[off + 3]])
    };
    if &header[344..347] != b"n+1" {
        return Err(Error::Ingestion(format!("{}: not a single-file nifti", path.display())));
    }
    if get_i16(70) != DTYPE_FLOAT32 {
        return Err(Error::Ingestion(format!(
            "{}: only float32 volumes supported (datatype {})",
            path.display(),
            get_i16(70)
        )));
    }
    let rank = get_i16(40);
    if rank != 3 {
        return Err(Error::Ingestion(format!("{}: rank {rank} unsupported", path.display())));
    }
    let (w, h, d) = (get_i16(42) as usize, get_i16(44) as usize, get_i16(46) as usize);
    let offset = get_f32(108) as usize;
    // Skip whatever sits between header and payload.
    let mut skip = vec![0u8; offset - HEADER_SIZE];
    r.read_exact(&mut skip)?;
    let n = d * h * w;
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Ok(Array::from_vec(&[d, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn nifti_round_trip_is_bit_exact_for_f32_values() {
        let dir = std::env::temp_dir().join("desamba_nifti");
        std::fs::create_dir_all(&dir).unwrap();
        let mut rng = Rng::new(1);
        let vol = Array::randn(&[4, 6, 5], 1.0, &mut rng).map(|v| v as f32 as f64);
        let path = dir.join("vol.nii");
        write_nifti(&path, &vol).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(vol, back);
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let dir = std::env::temp_dir().join("desamba_nifti_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vol.nii");
        let vol = Array::zeros(&[2, 2, 2]);
        write_nifti(&path, &vol).unwrap();
        // Corrupt datatype field.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[70] = 4;
        std::fs::write(&path, bytes).unwrap();
        assert!(read_nifti(&path).is_err());
    }
}
