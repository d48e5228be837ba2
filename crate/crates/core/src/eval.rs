//! Evaluation over a test split, full-image prediction maps, and the P6
//! pixmap rendering with its fixed per-class palette.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::blocks;
use crate::data::{self, HsiCube, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{metrics_from_confusion, ConfusionMatrix, MetricsReport};
use crate::train::ModelCheckpoint;
use crate::Real;

pub struct EvalResult {
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
}

/// Score an arbitrary predictor over the given pixel indices. The
/// predictor returns 0-based class predictions; labels are the cube's
/// 1-based map.
pub fn evaluate_with_predictor<F>(
    predictor: F,
    labels: &[u16],
    test_indices: &[usize],
    classes: usize,
) -> Result<EvalResult>
where
    F: Fn(usize) -> Result<usize> + Sync,
{
    if test_indices.is_empty() {
        return Err(Error::invalid("evaluate: empty test set"));
    }
    let pairs: Vec<(usize, usize)> = test_indices
        .par_iter()
        .map(|&px| {
            let pred = predictor(px)?;
            Ok(((labels[px] - 1) as usize, pred))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = ConfusionMatrix::new(classes);
    for (t, p) in pairs {
        confusion.record(t, p);
    }
    let report = metrics_from_confusion(&confusion)?;
    Ok(EvalResult { confusion, report })
}

/// Evaluate a checkpoint on the test side of a split (eval mode: frozen
/// batch-norm statistics).
pub fn evaluate_checkpoint(
    ckpt: &ModelCheckpoint,
    cube: &HsiCube,
    split: &SplitSpec,
) -> Result<EvalResult> {
    if ckpt.model.classes != cube.num_classes() {
        return Err(Error::invalid(format!(
            "checkpoint has {} classes, dataset has {}",
            ckpt.model.classes,
            cube.num_classes()
        )));
    }
    let reduced = data::pca_reduce(cube, ckpt.config.pca_dim)?;
    let b = ckpt.config.patch_size;
    evaluate_with_predictor(
        |px| {
            let (row, col) = (px / cube.width, px % cube.width);
            let raw = data::extract_patch(&reduced, row, col, b);
            let probs = blocks::model_forward(&ckpt.model, &ckpt.store, &raw)?;
            Ok(blocks::argmax(&probs))
        },
        &cube.labels,
        &split.test_indices,
        cube.num_classes(),
    )
}

/// Classify every pixel (labeled or not); returns 1-based predicted labels
/// row-major.
pub fn predict_map(ckpt: &ModelCheckpoint, cube: &HsiCube) -> Result<Vec<u16>> {
    if ckpt.model.classes != cube.num_classes() {
        return Err(Error::invalid(format!(
            "checkpoint has {} classes, dataset has {}",
            ckpt.model.classes,
            cube.num_classes()
        )));
    }
    let reduced = data::pca_reduce(cube, ckpt.config.pca_dim)?;
    let b = ckpt.config.patch_size;
    (0..cube.height * cube.width)
        .into_par_iter()
        .map(|px| {
            let (row, col) = (px / cube.width, px % cube.width);
            let raw = data::extract_patch(&reduced, row, col, b);
            let probs = blocks::model_forward(&ckpt.model, &ckpt.store, &raw)?;
            Ok(blocks::argmax(&probs) as u16 + 1)
        })
        .collect()
}

/// Fixed, injective palette for class ids 1..=classes (golden-angle hue
/// walk; collisions after 8-bit quantization get nudged in value).
pub fn class_palette(classes: usize) -> Vec<[u8; 3]> {
    let mut used: HashMap<[u8; 3], ()> = HashMap::new();
    let mut palette = Vec::with_capacity(classes);
    for i in 0..classes {
        let hue = (i as Real * 0.618_033_988_749_895).fract();
        let mut value = 0.95;
        let mut rgb = hsv_to_rgb(hue, 0.85, value);
        while used.contains_key(&rgb) {
            value = if value > 0.2 { value - 0.03 } else { 0.99 };
            rgb = hsv_to_rgb(hue, 0.85, value);
        }
        used.insert(rgb, ());
        palette.push(rgb);
    }
    palette
}

fn hsv_to_rgb(h: Real, s: Real, v: Real) -> [u8; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let sector = h6 as usize % 6;
    let f = h6 - sector as Real;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Binary portable pixmap (P6) of a 1-based label grid under a palette.
pub fn write_ppm(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    labels: &[u16],
    palette: &[[u8; 3]],
) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::shape(
            "write_ppm",
            format!("{} labels", width * height),
            format!("{}", labels.len()),
        ));
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{width} {height}\n255\n")?;
    for &label in labels {
        if label == 0 || label as usize > palette.len() {
            return Err(Error::invalid(format!("label {label} outside palette")));
        }
        w.write_all(&palette[label as usize - 1])?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a P6 pixmap back into RGB triples.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let header_err = || Error::format("bad P6 header".to_string());
    if !bytes.starts_with(b"P6") {
        return Err(header_err());
    }
    // Header: three whitespace-separated fields after the magic, then one
    // whitespace byte before the raster.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| header_err())?
            .parse()
            .map_err(|_| header_err())?;
    }
    pos += 1; // single whitespace after maxval
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported maxval {maxval}")));
    }
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::format("truncated P6 raster".to_string()));
    }
    let pixels = bytes[pos..pos + need]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok((width, height, pixels))
}

/// Invert a palette rendering back into 1-based labels.
pub fn labels_from_pixels(pixels: &[[u8; 3]], palette: &[[u8; 3]]) -> Result<Vec<u16>> {
    let lookup: HashMap<[u8; 3], u16> = palette
        .iter()
        .enumerate()
        .map(|(i, &rgb)| (rgb, i as u16 + 1))
        .collect();
    pixels
        .iter()
        .map(|rgb| {
            lookup
                .get(rgb)
                .copied()
                .ok_or_else(|| Error::invalid(format!("pixel {rgb:?} not in palette")))
        })
        .collect()
}
