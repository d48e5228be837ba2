//! Synthetic labeled cube generator for desk-scale experiments.
//!
//! Each class gets a smooth random spectral signature; the spatial layout
//! is a Voronoi partition of one random seed point per class; every pixel
//! is its class signature plus iid Gaussian noise. Entirely determined by
//! (classes, shape, sigma, seed).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::Real;

const MAX_REJECTIONS: usize = 100;

fn smooth_signature(v: usize, rng: &mut ChaCha8Rng) -> Vec<Real> {
    let base: Real = rng.random_range(0.3..0.7);
    let mut amp = [0.0; 3];
    let mut phase = [0.0; 3];
    for j in 0..3 {
        amp[j] = rng.random_range(0.15..0.45);
        phase[j] = rng.random_range(0.0..std::f64::consts::TAU);
    }
    (0..v)
        .map(|b| {
            let t = b as Real / v as Real;
            let mut s = base;
            for j in 0..3 {
                s += amp[j] * (std::f64::consts::TAU * (j + 1) as Real * t + phase[j]).sin();
            }
            s
        })
        .collect()
}

fn l2_distance(a: &[Real], b: &[Real]) -> Real {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<Real>()
        .sqrt()
}

/// Generate the per-class signatures, rejecting any that come closer than
/// `5 * sigma` (and never allowing exact duplicates).
fn signatures(classes: usize, v: usize, sigma: Real, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Real>>> {
    let min_dist = (5.0 * sigma).max(1e-9);
    let mut sigs: Vec<Vec<Real>> = Vec::with_capacity(classes);
    let mut rejections = 0;
    while sigs.len() < classes {
        let cand = smooth_signature(v, rng);
        if sigs.iter().all(|s| l2_distance(s, &cand) >= min_dist) {
            sigs.push(cand);
        } else {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(Error::invalid(format!(
                    "synth_dataset: could not separate {classes} signatures by {min_dist:.3} \
                     after {MAX_REJECTIONS} rejections"
                )));
            }
        }
    }
    Ok(sigs)
}

pub fn synth_dataset(
    classes: usize,
    h: usize,
    w: usize,
    v: usize,
    noise_sigma: Real,
    seed: u64,
) -> Result<HsiCube> {
    if classes == 0 || classes > u16::MAX as usize {
        return Err(Error::invalid("synth_dataset: classes must be in 1..=65535"));
    }
    if h == 0 || w == 0 || v == 0 {
        return Err(Error::invalid("synth_dataset: extents must be positive"));
    }
    if classes > h * w {
        return Err(Error::invalid("synth_dataset: more classes than pixels"));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::invalid("synth_dataset: sigma must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigs = signatures(classes, v, noise_sigma, &mut rng)?;

    // One Voronoi seed per class, all distinct.
    let mut seeds: Vec<(usize, usize)> = Vec::with_capacity(classes);
    while seeds.len() < classes {
        let p = (rng.random_range(0..h), rng.random_range(0..w));
        if !seeds.contains(&p) {
            seeds.push(p);
        }
    }
    let mut labels = vec![0u16; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut best = 0usize;
            let mut best_d = usize::MAX;
            for (c, &(sr, sc)) in seeds.iter().enumerate() {
                let dr = row.abs_diff(sr);
                let dc = col.abs_diff(sc);
                let d = dr * dr + dc * dc;
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            labels[row * w + col] = (best + 1) as u16;
        }
    }

    let mut radiance = vec![0.0 as Real; h * w * v];
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::invalid(format!("synth_dataset noise: {e}")))?;
        for px in 0..h * w {
            let sig = &sigs[(labels[px] - 1) as usize];
            for b in 0..v {
                let value = sig[b] + normal.sample(&mut rng);
                // Quantize through f32 so saved cubes round-trip exactly.
                radiance[px * v + b] = value as f32 as Real;
            }
        }
    } else {
        for px in 0..h * w {
            let sig = &sigs[(labels[px] - 1) as usize];
            for b in 0..v {
                radiance[px * v + b] = sig[b] as f32 as Real;
            }
        }
    }

    let class_names = (1..=classes).map(|c| format!("class-{c}")).collect();
    let provenance = serde_json::json!({
        "generator": "synth",
        "classes": classes,
        "sigma": noise_sigma,
        "seed": seed,
    });
    HsiCube::new(h, w, v, radiance, labels, class_names, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_pixels_of_a_class_are_identical() {
        let cube = synth_dataset(3, 12, 10, 8, 0.0, 1).unwrap();
        for class in 1..=3u16 {
            let mut reference: Option<&[Real]> = None;
            for row in 0..cube.height {
                for col in 0..cube.width {
                    if cube.label(row, col) == class {
                        match reference {
                            None => reference = Some(cube.pixel(row, col)),
                            Some(r) => assert_eq!(r, cube.pixel(row, col)),
                        }
                    }
                }
            }
            assert!(reference.is_some(), "class {class} has no pixels");
        }
    }

    #[test]
    fn single_class_labels_everything_one() {
        let cube = synth_dataset(1, 5, 5, 4, 0.1, 2).unwrap();
        assert!(cube.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn nearest_signature_classifier_is_perfect_on_noiseless_cube() {
        let cube = synth_dataset(4, 16, 16, 10, 0.0, 3).unwrap();
        // Recover signatures as the per-class first pixel.
        let mut sigs: Vec<Option<Vec<Real>>> = vec![None; 4];
        for px in 0..cube.height * cube.width {
            let c = (cube.labels[px] - 1) as usize;
            if sigs[c].is_none() {
                sigs[c] =
                    Some(cube.radiance[px * cube.bands..(px + 1) * cube.bands].to_vec());
            }
        }
        let sigs: Vec<Vec<Real>> = sigs.into_iter().map(|s| s.unwrap()).collect();
        for px in 0..cube.height * cube.width {
            let x = &cube.radiance[px * cube.bands..(px + 1) * cube.bands];
            let mut best = 0;
            let mut best_d = Real::INFINITY;
            for (c, s) in sigs.iter().enumerate() {
                let d = l2_distance(x, s);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assert_eq!((best + 1) as u16, cube.labels[px]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_dataset(3, 8, 8, 6, 0.2, 7).unwrap();
        let b = synth_dataset(3, 8, 8, 6, 0.2, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_separation_errors_after_rejections() {
        // Signatures live in a bounded band; demanding 5*sigma = 50 apart
        // is impossible, so generation must give up with an error.
        assert!(synth_dataset(3, 8, 8, 6, 10.0, 0).is_err());
    }

    #[test]
    fn signatures_respect_min_distance() {
        let sigma = 0.15;
        let cube = synth_dataset(3, 10, 10, 16, sigma, 5).unwrap();
        // Noiseless twin shares the signatures (same seed, same draws).
        let clean = synth_dataset(3, 10, 10, 16, 0.0, 5).unwrap();
        let mut sigs: Vec<Option<Vec<Real>>> = vec![None; 3];
        for px in 0..clean.height * clean.width {
            let c = (clean.labels[px] - 1) as usize;
            if sigs[c].is_none() {
                sigs[c] = Some(clean.radiance[px * 16..(px + 1) * 16].to_vec());
            }
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                let d = l2_distance(sigs[a].as_ref().unwrap(), sigs[b].as_ref().unwrap());
                assert!(d >= 5.0 * sigma, "classes {a},{b} are {d} apart");
            }
        }
        assert_eq!(cube.labels, clean.labels);
    }
}
