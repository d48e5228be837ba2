//! Timing harness for the selective scan's linear-complexity claim.

use std::hint::black_box;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ssm::{s6_selective_scan, S6Params};
use crate::Real;

pub const BENCH_LENGTHS: [usize; 4] = [256, 512, 1024, 2048];

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub len: usize,
    pub seconds: Real,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub dim: usize,
    pub state: usize,
    pub rows: Vec<BenchRow>,
    /// Slope of log(time) vs log(length).
    pub exponent: Real,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = format!("s6 scan timing (D={}, N={})\n", self.dim, self.state);
        out.push_str(&format!("{:>6}  {:>12}\n", "L", "median"));
        for r in &self.rows {
            out.push_str(&format!("{:>6}  {:>9.3} ms\n", r.len, r.seconds * 1e3));
        }
        out.push_str(&format!("fitted growth exponent: {:.3}\n", self.exponent));
        out
    }
}

fn random_params(dim: usize, state: usize, rng: &mut ChaCha8Rng) -> S6Params<Real> {
    S6Params {
        feature_size: dim,
        state_size: state,
        a_diag: (0..dim * state).map(|_| -rng.random_range(0.1..2.0)).collect(),
        w_b: (0..state * dim).map(|_| rng.random_range(-0.3..0.3)).collect(),
        b_b: vec![0.0; state],
        w_c: (0..state * dim).map(|_| rng.random_range(-0.3..0.3)).collect(),
        b_c: vec![0.0; state],
        w_delta: (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect(),
        b_delta: -1.0,
    }
}

/// Median-of-5 timing of the full selective scan at each length, plus a
/// log-log least-squares growth exponent.
pub fn bench_scan(dim: usize, state: usize) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = random_params(dim, state, &mut rng);
    let mut rows = Vec::with_capacity(BENCH_LENGTHS.len());
    for &l in &BENCH_LENGTHS {
        let x: Vec<Real> = (0..l * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Calibrate repeats so each of the 5 measurements spans >= ~20 ms.
        let t0 = Instant::now();
        black_box(s6_selective_scan(black_box(&x), l, &params)?);
        let once = t0.elapsed().as_secs_f64().max(1e-7);
        let reps = ((0.02 / once).ceil() as usize).max(1);

        let mut times = Vec::with_capacity(5);
        for _ in 0..5 {
            let start = Instant::now();
            for _ in 0..reps {
                black_box(s6_selective_scan(black_box(&x), l, &params)?);
            }
            times.push(start.elapsed().as_secs_f64() / reps as f64);
        }
        times.sort_by(Real::total_cmp);
        rows.push(BenchRow {
            len: l,
            seconds: times[2],
        });
    }

    let xs: Vec<Real> = rows.iter().map(|r| (r.len as Real).ln()).collect();
    let ys: Vec<Real> = rows.iter().map(|r| r.seconds.ln()).collect();
    let xm = xs.iter().sum::<Real>() / xs.len() as Real;
    let ym = ys.iter().sum::<Real>() / ys.len() as Real;
    let num: Real = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let den: Real = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    Ok(BenchReport {
        dim,
        state,
        rows,
        exponent: num / den,
    })
}
