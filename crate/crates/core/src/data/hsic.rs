//! The HSIC container format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "HSIC"
//! version u32      = 1
//! H, W, V u32 each
//! payload H*W*V f32, band-sequential (band-major, then row, then column)
//! labels  H*W u16, row-major (0 = unlabeled)
//! trailer u32 length prefix + UTF-8 JSON {"class_names": [...], "provenance": {...}}
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::Real;

const MAGIC: &[u8; 4] = b"HSIC";
const VERSION: u32 = 1;
/// Cap on element count so extent arithmetic cannot overflow on any
/// plausible input.
const MAX_ELEMENTS: u64 = 1 << 33;

#[derive(Serialize, Deserialize)]
struct Trailer {
    class_names: Vec<String>,
    provenance: serde_json::Value,
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("truncated payload while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format("bad magic (not an HSIC file)"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported HSIC version {version}")));
    }
    let h = read_u32(&mut r, "height")? as u64;
    let w = read_u32(&mut r, "width")? as u64;
    let v = read_u32(&mut r, "bands")? as u64;
    if h == 0 || w == 0 || v == 0 {
        return Err(Error::format("zero extent in header"));
    }
    let elements = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(v))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::format("extent overflow in header"))?;
    let (h, w, v) = (h as usize, w as usize, v as usize);

    // Band-sequential payload -> [row][col][band].
    let mut radiance = vec![0.0 as Real; elements as usize];
    let mut band_buf = vec![0u8; h * w * 4];
    for band in 0..v {
        read_exact(&mut r, &mut band_buf, "radiance payload")?;
        for (px, chunk) in band_buf.chunks_exact(4).enumerate() {
            let value = f32::from_le_bytes(chunk.try_into().unwrap());
            radiance[px * v + band] = value as Real;
        }
    }

    let mut label_buf = vec![0u8; h * w * 2];
    read_exact(&mut r, &mut label_buf, "labels")?;
    let labels: Vec<u16> = label_buf
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let trailer_len = read_u32(&mut r, "trailer length")? as usize;
    let mut trailer_buf = vec![0u8; trailer_len];
    read_exact(&mut r, &mut trailer_buf, "trailer")?;
    let trailer: Trailer = serde_json::from_slice(&trailer_buf)
        .map_err(|e| Error::format(format!("bad trailer JSON: {e}")))?;

    HsiCube::new(h, w, v, radiance, labels, trailer.class_names, trailer.provenance)
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_cube(cube, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_cube(cube: &HsiCube, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for extent in [cube.height, cube.width, cube.bands] {
        let e = u32::try_from(extent).map_err(|_| Error::format("extent overflow"))?;
        w.write_all(&e.to_le_bytes())?;
    }
    let (h, wd, v) = (cube.height, cube.width, cube.bands);
    for band in 0..v {
        for px in 0..h * wd {
            let value = cube.radiance[px * v + band] as f32;
            w.write_all(&value.to_le_bytes())?;
        }
    }
    for &label in &cube.labels {
        w.write_all(&label.to_le_bytes())?;
    }
    let trailer = serde_json::to_vec(&Trailer {
        class_names: cube.class_names.clone(),
        provenance: cube.provenance.clone(),
    })
    .map_err(|e| Error::format(format!("trailer encode: {e}")))?;
    let len = u32::try_from(trailer.len()).map_err(|_| Error::format("trailer too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&trailer)?;
    Ok(())
}
