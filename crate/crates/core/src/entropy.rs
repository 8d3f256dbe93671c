//! Entropy floor of a bounded-norm LM head.
//!
//! With `‖C‖₂ ≤ σ_C` and `|h_i| ≤ σ_h` over `D` hidden units, the logit vector
//! `u = Cᵀh` has `‖u‖₂ ≤ R = σ_C·σ_h·√D`. The softmax entropy over `|V|`
//! classes is then minimized by a vector with one entry `a` and `|V|-1`
//! entries `b`, which gives a closed-form lower bound. Temperature and
//! softcapping act on `R` only, so everything here is parameterized by it.

use std::io::Write;

use crate::error::{check_range, Error, Result};
use crate::reduce::softmax_entropy;
use crate::tensor::{CounterRng, DenseMatrix};

/// Norm budget for the LM head logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundParams {
    sigma_c: f64,
    sigma_h: f64,
    d: usize,
    v: usize,
}

impl BoundParams {
    pub fn from_norms(sigma_c: f64, sigma_h: f64, d: usize, v: usize) -> Result<Self> {
        check_range("sigma_c", sigma_c, sigma_c > 0.0 && sigma_c.is_finite(), "> 0")?;
        check_range("sigma_h", sigma_h, sigma_h > 0.0 && sigma_h.is_finite(), "> 0")?;
        Self::checked(sigma_c, sigma_h, d, v)
    }

    /// `σ_C = 1`, `σ_h = ρ`. `ρ = 0` is allowed and gives the uniform case.
    pub fn from_rho(rho: f64, d: usize, v: usize) -> Result<Self> {
        check_range("rho", rho, rho >= 0.0 && rho.is_finite(), ">= 0")?;
        Self::checked(1.0, rho, d, v)
    }

    /// A bare radius `R` with `D = 1`.
    pub fn from_radius(r: f64, v: usize) -> Result<Self> {
        Self::from_rho(r, 1, v)
    }

    fn checked(sigma_c: f64, sigma_h: f64, d: usize, v: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Domain("hidden size must be >= 1".into()));
        }
        if v < 2 {
            return Err(Error::Domain(format!("vocabulary size must be >= 2, got {v}")));
        }
        Ok(Self {
            sigma_c,
            sigma_h,
            d,
            v,
        })
    }

    pub fn sigma_c(&self) -> f64 {
        self.sigma_c
    }

    pub fn sigma_h(&self) -> f64 {
        self.sigma_h
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn rho(&self) -> f64 {
        self.sigma_c * self.sigma_h
    }

    /// `R = ρ·√D`.
    pub fn r(&self) -> f64 {
        self.rho() * (self.d as f64).sqrt()
    }

    fn with_radius(&self, r: f64) -> Self {
        let rho = r / (self.d as f64).sqrt();
        Self {
            sigma_h: rho / self.sigma_c,
            ..*self
        }
    }
}

/// `σ_C · σ_h · √D`.
pub fn norm_bound(sigma_c: f64, sigma_h: f64, d: usize) -> Result<f64> {
    check_range("sigma_c", sigma_c, sigma_c > 0.0, "> 0")?;
    check_range("sigma_h", sigma_h, sigma_h > 0.0, "> 0")?;
    if d == 0 {
        return Err(Error::Domain("hidden size must be >= 1".into()));
    }
    Ok(sigma_c * sigma_h * (d as f64).sqrt())
}

/// Closed-form minimum entropy of `softmax(u)` over `‖u‖₂ ≤ R`:
///
/// `γ = exp(-ρ√(D|V|/(|V|-1)))`,
/// `H ≥ log(1 + (|V|-1)γ) + ρ·γ·√(D|V|(|V|-1)) / (1 + (|V|-1)γ)`.
pub fn entropy_lower_bound(p: &BoundParams) -> f64 {
    let v = p.v as f64;
    let r = p.r();
    let gamma = (-r * (v / (v - 1.0)).sqrt()).exp();
    let denom = 1.0 + (v - 1.0) * gamma;
    denom.ln() + r * gamma * (v * (v - 1.0)).sqrt() / denom
}

/// The two distinct entries of the minimizer: one `a` and `|V|-1` copies
/// of `b`, with `a² + (|V|-1)b² = R²`.
pub fn minimizer_logits(p: &BoundParams) -> (f64, f64) {
    let v = p.v as f64;
    let r = p.r();
    (r * (1.0 - 1.0 / v).sqrt(), -r / (v * (v - 1.0)).sqrt())
}

/// The full minimizing logit vector `[a, b, …, b]`.
pub fn minimizer_vector(p: &BoundParams) -> Vec<f64> {
    let (a, b) = minimizer_logits(p);
    let mut u = vec![b; p.v];
    u[0] = a;
    u
}

/// `(log|V| - bound) / log|V|`.
pub fn normalized_gap(p: &BoundParams) -> f64 {
    let max = (p.v as f64).ln();
    (max - entropy_lower_bound(p)) / max
}

/// Applies temperature `τ` (`R' = R/τ`) and an entrywise logit cap
/// (`R' = min(R', cap·√|V|)`).
pub fn effective_params(p: &BoundParams, temperature: Option<f64>, softcap: Option<f64>) -> Result<BoundParams> {
    let mut r = p.r();
    if let Some(t) = temperature {
        check_range("temperature", t, t > 0.0 && t.is_finite(), "> 0")?;
        r /= t;
    }
    if let Some(cap) = softcap {
        check_range("softcap", cap, cap > 0.0 && cap.is_finite(), "> 0")?;
        r = r.min(cap * (p.v as f64).sqrt());
    }
    Ok(p.with_radius(r))
}

/// Constants for the projected-gradient oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinimizerConfig {
    pub restarts: usize,
    pub iterations: usize,
    /// Step at iteration `t` is `step / √t`.
    pub step: f64,
    pub seed: u64,
}

impl Default for MinimizerConfig {
    fn default() -> Self {
        Self {
            restarts: 64,
            iterations: 5000,
            step: 0.1,
            seed: 0,
        }
    }
}

/// Minimizes softmax entropy over the ball `‖u‖₂ ≤ r` by projected gradient
/// descent from random starts on the sphere. Returns the best entropy seen.
pub fn numeric_min_entropy(r: f64, v: usize, restarts: usize) -> f64 {
    numeric_min_entropy_with(
        r,
        v,
        MinimizerConfig {
            restarts,
            ..Default::default()
        },
    )
}

pub fn numeric_min_entropy_with(r: f64, v: usize, cfg: MinimizerConfig) -> f64 {
    assert!(v >= 2, "vocabulary size must be >= 2");
    assert!(r >= 0.0, "radius must be >= 0");
    let rng = CounterRng::new(cfg.seed, 0xE7);
    let mut best = f64::INFINITY;
    let mut u = vec![0.0; v];
    let mut grad = vec![0.0; v];
    for restart in 0..cfg.restarts.max(1) {
        for (k, x) in u.iter_mut().enumerate() {
            *x = rng.normal_at((restart * v + k) as u64);
        }
        project(&mut u, r, true);
        for t in 1..=cfg.iterations {
            // dH/du_k = -p_k (log p_k + H)
            let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (g, &x) in grad.iter_mut().zip(&u) {
                *g = (x - max).exp();
                sum += *g;
            }
            let lse = max + sum.ln();
            let mut h = 0.0;
            for (g, &x) in grad.iter_mut().zip(&u) {
                *g /= sum;
                h -= *g * (x - lse);
            }
            best = best.min(h);
            for (g, &x) in grad.iter_mut().zip(&u) {
                *g *= -((x - lse) + h);
            }
            let eta = cfg.step / (t as f64).sqrt();
            for (x, g) in u.iter_mut().zip(&grad) {
                *x -= eta * g;
            }
            project(&mut u, r, false);
        }
        best = best.min(softmax_entropy(&u));
    }
    best
}

fn project(u: &mut [f64], r: f64, onto_sphere: bool) {
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    if onto_sphere || norm > r {
        let s = r / norm;
        u.iter_mut().for_each(|x| *x *= s);
    }
}

/// Largest singular value by power iteration on `Mᵀ M`.
pub fn spectral_norm(m: &DenseMatrix) -> f64 {
    let (rows, cols) = (m.rows(), m.cols());
    let mut x = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut y = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..10_000 {
        for (r, out) in y.iter_mut().enumerate() {
            *out = m.row(r).iter().zip(&x).map(|(a, b)| a * b).sum();
        }
        x.iter_mut().for_each(|v| *v = 0.0);
        for (r, &yr) in y.iter().enumerate() {
            for (xv, &a) in x.iter_mut().zip(m.row(r)) {
                *xv += a * yr;
            }
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= norm);
        let next = norm.sqrt();
        if (next - sigma).abs() <= 1e-15 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

/// One row of a bound sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub d: usize,
    pub v: usize,
    pub rho: f64,
    pub temperature: Option<f64>,
    pub softcap: Option<f64>,
    /// `R` after temperature and softcap.
    pub effective_r: f64,
    pub bound: f64,
    pub normalized_gap: f64,
}

/// Cartesian sweep over the given grids; empty transform lists mean "none".
pub fn sweep(
    ds: &[usize],
    vs: &[usize],
    rhos: &[f64],
    temperatures: &[f64],
    softcaps: &[f64],
) -> Result<Vec<SweepRow>> {
    let temps: Vec<Option<f64>> = if temperatures.is_empty() {
        vec![None]
    } else {
        temperatures.iter().copied().map(Some).collect()
    };
    let caps: Vec<Option<f64>> = if softcaps.is_empty() {
        vec![None]
    } else {
        softcaps.iter().copied().map(Some).collect()
    };
    let mut rows = Vec::new();
    for &d in ds {
        for &v in vs {
            for &rho in rhos {
                for &temperature in &temps {
                    for &softcap in &caps {
                        let base = BoundParams::from_rho(rho, d, v)?;
                        let p = effective_params(&base, temperature, softcap)?;
                        rows.push(SweepRow {
                            d,
                            v,
                            rho,
                            temperature,
                            softcap,
                            effective_r: p.r(),
                            bound: entropy_lower_bound(&p),
                            normalized_gap: normalized_gap(&p),
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "d,v,rho,temperature,softcap,effective_r,bound,normalized_gap";

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.d,
            r.v,
            r.rho,
            opt(r.temperature),
            opt(r.softcap),
            r.effective_r,
            r.bound,
            r.normalized_gap
        )?;
    }
    Ok(())
}
