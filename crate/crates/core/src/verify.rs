//! Self-check suites behind the `scan-check` CLI command: dual-route
//! kernel equivalences, discretization limit cases, route geometry, and
//! the finite-difference gradient sweep.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{grad_check_default, REGISTERED_OPS};
use crate::routes::{
    self, flatten_spatial_priority, flatten_spectral_priority, revert, unflatten, RouteId,
    TokenBatch,
};
use crate::scalar::softplus;
use crate::ssm::{
    discretize_zoh, s6_selective_scan, ssm_conv_apply, ssm_conv_kernel, ssm_recurrence, LtiSsm,
    S6Params,
};
use crate::Real;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Check {
        Check { name, passed, detail }
    }
}

fn random_stable_lti(rng: &mut ChaCha8Rng, n: usize) -> LtiSsm<Real> {
    LtiSsm {
        a_diag: (0..n).map(|_| -rng.random_range(0.05..3.0)).collect(),
        b: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        c: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        delta: rng.random_range(0.01..0.8),
    }
}

/// Recurrence vs convolutional form over random stable draws.
pub fn kernel_equivalence_check(draws: usize, n: usize, l: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: Real = 0.0;
    for _ in 0..draws {
        let ssm = random_stable_lti(&mut rng, n);
        let d = match discretize_zoh(&ssm) {
            Ok(d) => d,
            Err(e) => return Check::new("kernel-equivalence", false, e.to_string()),
        };
        let x: Vec<Real> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rec = ssm_recurrence(&d, &x).unwrap();
        let kernel = ssm_conv_kernel(&d, l).unwrap();
        let conv = ssm_conv_apply(&x, &kernel).unwrap();
        let scale = rec.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        for (a, b) in rec.iter().zip(&conv) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    Check::new(
        "kernel-equivalence",
        worst < 1e-8,
        format!("max relative error {worst:.3e} over {draws} draws (bound 1e-8)"),
    )
}

/// Selective scan with frozen (input-independent) delta/B/C vs per-channel
/// recurrence.
pub fn s6_lti_reduction_check(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Real = 0.0;
    for _ in 0..cases {
        let (l, d, n) = (24usize, 3usize, 4usize);
        let params = S6Params::<Real> {
            feature_size: d,
            state_size: n,
            a_diag: (0..d * n).map(|_| -rng.random_range(0.05..2.0)).collect(),
            w_b: vec![0.0; n * d],
            b_b: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            w_c: vec![0.0; n * d],
            b_c: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            w_delta: vec![0.0; d],
            b_delta: rng.random_range(-1.0..1.0),
        };
        let x: Vec<Real> = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = match s6_selective_scan(&x, l, &params) {
            Ok(y) => y,
            Err(e) => return Check::new("s6-lti-reduction", false, e.to_string()),
        };
        let delta = softplus(params.b_delta);
        for ch in 0..d {
            let lti = LtiSsm {
                a_diag: params.a_diag[ch * n..(ch + 1) * n].to_vec(),
                b: params.b_b.clone(),
                c: params.b_c.clone(),
                delta,
            };
            let disc = discretize_zoh(&lti).unwrap();
            let xch: Vec<Real> = (0..l).map(|t| x[t * d + ch]).collect();
            let ych = ssm_recurrence(&disc, &xch).unwrap();
            let scale = ych.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
            for t in 0..l {
                worst = worst.max((y[t * d + ch] - ych[t]).abs() / scale);
            }
        }
    }
    Check::new(
        "s6-lti-reduction",
        worst < 1e-10,
        format!("max relative error {worst:.3e} over {cases} cases (bound 1e-10)"),
    )
}

/// delta = 0 identity limit and the scalar half-life case.
pub fn zoh_limit_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ssm = LtiSsm::<Real> {
        a_diag: (0..16).map(|_| -rng.random_range(0.1..4.0)).collect(),
        b: (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        c: vec![1.0; 16],
        delta: 0.0,
    };
    let d = match discretize_zoh(&ssm) {
        Ok(d) => d,
        Err(e) => return Check::new("zoh-limits", false, e.to_string()),
    };
    let abar_dev = d
        .abar_diag
        .iter()
        .fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
    let bbar_dev = d.bbar.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let scalar = LtiSsm::<Real> {
        a_diag: vec![-1.0],
        b: vec![1.0],
        c: vec![1.0],
        delta: std::f64::consts::LN_2,
    };
    let ds = discretize_zoh(&scalar).unwrap();
    let half_dev = (ds.abar_diag[0] - 0.5).abs();

    let passed = abar_dev <= 1e-15 && bbar_dev == 0.0 && half_dev <= 1e-12;
    Check::new(
        "zoh-limits",
        passed,
        format!(
            "delta=0: |Abar-1| max {abar_dev:.1e}, |Bbar| max {bbar_dev:.1e}; \
             half-life |Abar-0.5| = {half_dev:.1e}"
        ),
    )
}

/// Bijection/involution/transpose identities and the identity-stub merge
/// factor, exhaustively for 1 <= P, K <= max_pk.
pub fn route_geometry_check(max_pk: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for p in 1..=max_pk {
        for k in 1..=max_pk {
            let cube: Vec<Real> = (0..p * p * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let spe = flatten_spectral_priority(&cube, p, k).unwrap();
            let spa = flatten_spatial_priority(&cube, p, k).unwrap();
            for seq in [&spe, &spa] {
                if !seq.index_map.is_bijection() {
                    return Check::new(
                        "route-geometry",
                        false,
                        format!("index map not a bijection at P={p}, K={k}"),
                    );
                }
                if unflatten(&seq.values, &seq.index_map).unwrap() != cube {
                    return Check::new(
                        "route-geometry",
                        false,
                        format!("unflatten(flatten) != id at P={p}, K={k}"),
                    );
                }
                let twice = revert(&revert(seq));
                if twice != *seq {
                    return Check::new(
                        "route-geometry",
                        false,
                        format!("revert not an involution at P={p}, K={k}"),
                    );
                }
            }
            for band in 0..k {
                for sp in 0..p * p {
                    if spa.values[band * p * p + sp] != spe.values[sp * k + band] {
                        return Check::new(
                            "route-geometry",
                            false,
                            format!("transpose identity broken at P={p}, K={k}"),
                        );
                    }
                }
            }
            let batch = TokenBatch::new(1, p, k, cube.clone()).unwrap();
            for route in RouteId::all() {
                let out =
                    routes::scan_and_merge_with(&batch, route, |_, seq| Ok(seq.steps.clone()))
                        .unwrap();
                let factor = route.branch_count() as Real;
                for (o, i) in out.data().iter().zip(batch.data()) {
                    if *o != factor * i {
                        return Check::new(
                            "route-geometry",
                            false,
                            format!("identity stub factor wrong for {route} at P={p}, K={k}"),
                        );
                    }
                }
            }
        }
    }
    Check::new(
        "route-geometry",
        true,
        format!("exhaustive over 1..={max_pk} squared"),
    )
}

/// Finite-difference sweep over every registered tape op.
pub fn grad_suite_check(seeds: u64) -> Check {
    let mut worst: Real = 0.0;
    let mut worst_op = "";
    for op in REGISTERED_OPS {
        for seed in 0..seeds {
            match grad_check_default(op, seed) {
                Ok(err) => {
                    if err > worst {
                        worst = err;
                        worst_op = op;
                    }
                }
                Err(e) => {
                    return Check::new("grad-suite", false, format!("{op}: {e}"));
                }
            }
        }
    }
    Check::new(
        "grad-suite",
        worst < 1e-4,
        format!(
            "{} ops x {seeds} seeds, worst {worst:.3e} ({worst_op}) (bound 1e-4)",
            REGISTERED_OPS.len()
        ),
    )
}

/// The full `scan-check` suite.
pub fn run_scan_checks() -> Vec<Check> {
    vec![
        kernel_equivalence_check(100, 16, 64),
        s6_lti_reduction_check(20),
        zoh_limit_check(),
        route_geometry_check(8),
        grad_suite_check(5),
    ]
}
