//! State-space scan kernels in diagonal-A form.
//!
//! Covers the LTI pipeline (zero-order-hold discretization, left-to-right
//! recurrence, and the equivalent causal convolution kernel) plus the
//! input-dependent selective scan where the step size and the B/C
//! projections are computed from each sequence element.
//!
//! Everything here is a pure function of immutable inputs. The kernels are
//! generic over [`Scalar`]; the autodiff tape instantiates them at f64.

use crate::error::{Error, Result};
use crate::scalar::{softplus, Scalar};

/// Continuous-time diagonal SSM with a shared time step.
#[derive(Clone, Debug)]
pub struct LtiSsm<T> {
    /// Diagonal of the state matrix; entries <= 0 under the stability
    /// convention used at initialization.
    pub a_diag: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub delta: T,
}

/// Discrete-time counterpart produced by [`discretize_zoh`].
#[derive(Clone, Debug)]
pub struct DiscreteSsm<T> {
    pub abar_diag: Vec<T>,
    pub bbar: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> LtiSsm<T> {
    pub fn state_size(&self) -> usize {
        self.a_diag.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.a_diag.len();
        if n == 0 {
            return Err(Error::invalid("LtiSsm requires state size >= 1"));
        }
        if self.b.len() != n || self.c.len() != n {
            return Err(Error::shape(
                "discretize_zoh",
                format!("A, B, C all of length {n}"),
                format!("B len {}, C len {}", self.b.len(), self.c.len()),
            ));
        }
        let finite = self.a_diag.iter().chain(&self.b).chain(&self.c).all(|v| v.is_finite())
            && self.delta.is_finite();
        if !finite {
            return Err(Error::non_finite("discretize_zoh"));
        }
        if self.delta < T::zero() {
            return Err(Error::invalid("discretize_zoh requires delta >= 0"));
        }
        Ok(())
    }
}

/// Zero-order-hold discretization with the first-order input approximation
/// Bbar = delta * B. `Abar[i] = exp(delta * A[i])`, C passes through.
pub fn discretize_zoh<T: Scalar>(ssm: &LtiSsm<T>) -> Result<DiscreteSsm<T>> {
    ssm.validate()?;
    let abar_diag = ssm.a_diag.iter().map(|&a| (ssm.delta * a).exp()).collect();
    let bbar = ssm.b.iter().map(|&b| ssm.delta * b).collect();
    Ok(DiscreteSsm {
        abar_diag,
        bbar,
        c: ssm.c.clone(),
    })
}

/// Diagnostic variant using the exact ZOH input integral
/// Bbar[i] = (exp(delta*A[i]) - 1) / A[i] * B[i], with the A -> 0 limit
/// handled by series expansion. Not used by the training path.
pub fn discretize_zoh_exact<T: Scalar>(ssm: &LtiSsm<T>) -> Result<DiscreteSsm<T>> {
    ssm.validate()?;
    let abar_diag: Vec<T> = ssm.a_diag.iter().map(|&a| (ssm.delta * a).exp()).collect();
    let bbar = ssm
        .a_diag
        .iter()
        .zip(&ssm.b)
        .map(|(&a, &b)| {
            let z = ssm.delta * a;
            if z.abs() < T::from_f64_lossy(1e-8) {
                // (exp(z)-1)/a = delta * (1 + z/2 + z^2/6 + ...)
                let half = T::from_f64_lossy(0.5);
                let sixth = T::from_f64_lossy(1.0 / 6.0);
                ssm.delta * (T::one() + z * half + z * z * sixth) * b
            } else {
                (z.exp() - T::one()) / a * b
            }
        })
        .collect();
    Ok(DiscreteSsm {
        abar_diag,
        bbar,
        c: ssm.c.clone(),
    })
}

/// Left-to-right linear recurrence from a zero initial state:
/// `h_t = Abar ⊙ h_{t-1} + Bbar * x_t`, `y_t = C · h_t`.
pub fn ssm_recurrence<T: Scalar>(d: &DiscreteSsm<T>, x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::invalid("ssm_recurrence requires a non-empty sequence"));
    }
    let n = d.abar_diag.len();
    let mut h = vec![T::zero(); n];
    let mut y = Vec::with_capacity(x.len());
    for &xt in x {
        let mut acc = T::zero();
        for i in 0..n {
            h[i] = d.abar_diag[i] * h[i] + d.bbar[i] * xt;
            acc = acc + d.c[i] * h[i];
        }
        y.push(acc);
    }
    Ok(y)
}

/// Structured convolution kernel `(C Bbar, C Abar Bbar, ..., C Abar^{L-1} Bbar)`.
pub fn ssm_conv_kernel<T: Scalar>(d: &DiscreteSsm<T>, len: usize) -> Result<Vec<T>> {
    if len == 0 {
        return Err(Error::invalid("ssm_conv_kernel requires length >= 1"));
    }
    let n = d.abar_diag.len();
    // pow[i] tracks Abar[i]^j * Bbar[i], advanced once per tap.
    let mut pow: Vec<T> = d.bbar.clone();
    let mut kernel = Vec::with_capacity(len);
    for _ in 0..len {
        let mut acc = T::zero();
        for i in 0..n {
            acc = acc + d.c[i] * pow[i];
        }
        kernel.push(acc);
        for i in 0..n {
            pow[i] = pow[i] * d.abar_diag[i];
        }
    }
    Ok(kernel)
}

/// Causal convolution `y_t = sum_{j<=t} kernel[j] * x[t-j]`. A kernel longer
/// than the sequence is truncated; a shorter one is an error.
pub fn ssm_conv_apply<T: Scalar>(x: &[T], kernel: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::invalid("ssm_conv_apply requires a non-empty sequence"));
    }
    if kernel.len() < x.len() {
        return Err(Error::shape(
            "ssm_conv_apply",
            format!("kernel of length >= {}", x.len()),
            format!("length {}", kernel.len()),
        ));
    }
    let l = x.len();
    let mut y = vec![T::zero(); l];
    for (t, out) in y.iter_mut().enumerate() {
        let mut acc = T::zero();
        for j in 0..=t {
            acc = acc + kernel[j] * x[t - j];
        }
        *out = acc;
    }
    Ok(y)
}

/// Input-dependent parameterization of the selective scan.
///
/// Per step t of an L×D sequence:
///   delta_t = softplus(w_delta · x_t + b_delta)        (scalar)
///   B_t = W_b x_t + b_b, C_t = W_c x_t + b_c           (length N)
/// then each feature channel runs its own ZOH recurrence with
/// `Abar_t[d,n] = exp(delta_t * a_diag[d,n])` and input `delta_t B_t[n] x_t[d]`.
///
/// The B/C biases initialize to zero for training; setting the weights to
/// zero with non-zero biases freezes the scan into an LTI system, which is
/// the reduction the equivalence checks exercise.
#[derive(Clone, Debug)]
pub struct S6Params<T> {
    pub feature_size: usize,
    pub state_size: usize,
    /// D×N, row-major [d][n].
    pub a_diag: Vec<T>,
    /// N×D, row-major [n][d].
    pub w_b: Vec<T>,
    pub b_b: Vec<T>,
    /// N×D, row-major [n][d].
    pub w_c: Vec<T>,
    pub b_c: Vec<T>,
    /// Length D.
    pub w_delta: Vec<T>,
    pub b_delta: T,
}

impl<T: Scalar> S6Params<T> {
    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.feature_size, self.state_size);
        if d == 0 || n == 0 {
            return Err(Error::invalid("S6Params requires D >= 1 and N >= 1"));
        }
        let ok = self.a_diag.len() == d * n
            && self.w_b.len() == n * d
            && self.b_b.len() == n
            && self.w_c.len() == n * d
            && self.b_c.len() == n
            && self.w_delta.len() == d;
        if !ok {
            return Err(Error::shape(
                "s6_selective_scan",
                format!("parameter lengths for D={d}, N={n}"),
                format!(
                    "a_diag {}, w_b {}, b_b {}, w_c {}, b_c {}, w_delta {}",
                    self.a_diag.len(),
                    self.w_b.len(),
                    self.b_b.len(),
                    self.w_c.len(),
                    self.b_c.len(),
                    self.w_delta.len()
                ),
            ));
        }
        Ok(())
    }

    /// Total scalar parameter count for declared (D, N).
    pub fn param_count(feature_size: usize, state_size: usize) -> usize {
        let (d, n) = (feature_size, state_size);
        d * n + 2 * (n * d + n) + d + 1
    }

    /// Per-step delta/B/C driven by the input element.
    pub fn project_step(&self, x_t: &[T]) -> (T, Vec<T>, Vec<T>) {
        let (d, n) = (self.feature_size, self.state_size);
        let mut raw = self.b_delta;
        for j in 0..d {
            raw = raw + self.w_delta[j] * x_t[j];
        }
        let delta = softplus(raw);
        let mut b_t = vec![T::zero(); n];
        let mut c_t = vec![T::zero(); n];
        for i in 0..n {
            let mut accb = self.b_b[i];
            let mut accc = self.b_c[i];
            let row = i * d;
            for j in 0..d {
                accb = accb + self.w_b[row + j] * x_t[j];
                accc = accc + self.w_c[row + j] * x_t[j];
            }
            b_t[i] = accb;
            c_t[i] = accc;
        }
        (delta, b_t, c_t)
    }
}

/// Selective scan with explicit per-step parameters.
///
/// `x` is L×D row-major, `delta` has length L, `b`/`c` are L×N row-major,
/// `a_diag` is D×N. Returns the L×D output and the full L×D×N state
/// history (needed by the reverse pass of the autodiff op).
pub fn scan_steps_full<T: Scalar>(
    x: &[T],
    l: usize,
    d: usize,
    n: usize,
    delta: &[T],
    b: &[T],
    c: &[T],
    a_diag: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    if l == 0 {
        return Err(Error::invalid("selective scan requires length >= 1"));
    }
    if x.len() != l * d || delta.len() != l || b.len() != l * n || c.len() != l * n || a_diag.len() != d * n
    {
        return Err(Error::shape(
            "s6_scan",
            format!("x {}x{d}, delta {l}, b/c {l}x{n}, a {d}x{n}", l),
            format!(
                "x {}, delta {}, b {}, c {}, a {}",
                x.len(),
                delta.len(),
                b.len(),
                c.len(),
                a_diag.len()
            ),
        ));
    }
    let mut h = vec![T::zero(); d * n];
    let mut hist = vec![T::zero(); l * d * n];
    let mut y = vec![T::zero(); l * d];
    for t in 0..l {
        let dt = delta[t];
        let b_t = &b[t * n..(t + 1) * n];
        let c_t = &c[t * n..(t + 1) * n];
        for ch in 0..d {
            let xt = x[t * d + ch];
            let hrow = &mut h[ch * n..(ch + 1) * n];
            let arow = &a_diag[ch * n..(ch + 1) * n];
            let mut acc = T::zero();
            for i in 0..n {
                let abar = (dt * arow[i]).exp();
                hrow[i] = abar * hrow[i] + dt * b_t[i] * xt;
                acc = acc + c_t[i] * hrow[i];
            }
            y[t * d + ch] = acc;
        }
        hist[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
    }
    Ok((y, hist))
}

/// Full selective scan: projections from the input, then the recurrence.
/// `x` is L×D row-major; the output has the same shape.
pub fn s6_selective_scan<T: Scalar>(x: &[T], l: usize, params: &S6Params<T>) -> Result<Vec<T>> {
    params.validate()?;
    let d = params.feature_size;
    if l == 0 {
        return Err(Error::invalid("s6_selective_scan requires length >= 1"));
    }
    if x.len() != l * d {
        return Err(Error::shape(
            "s6_selective_scan",
            format!("{l}x{d} sequence"),
            format!("{} values", x.len()),
        ));
    }
    let n = params.state_size;
    let mut delta = Vec::with_capacity(l);
    let mut b = Vec::with_capacity(l * n);
    let mut c = Vec::with_capacity(l * n);
    for t in 0..l {
        let (dt, b_t, c_t) = params.project_step(&x[t * d..(t + 1) * d]);
        delta.push(dt);
        b.extend_from_slice(&b_t);
        c.extend_from_slice(&c_t);
    }
    let (y, _) = scan_steps_full(x, l, d, n, &delta, &b, &c, &params.a_diag)?;
    Ok(y)
}
