//! Stable scalar and vector reductions over logits.

use crate::error::{check_range, Error, Result};

/// `log(e^a + e^b)` with a max shift. `-inf` is the identity; NaN propagates.
#[inline]
pub fn lse_merge(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        return f64::NAN;
    }
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp of a non-empty slice.
pub fn row_lse(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::Domain("log-sum-exp of an empty vector".into()));
    }
    Ok(lse_unchecked(z))
}

/// Two-pass max-shifted log-sum-exp; callers guarantee `z` is non-empty.
#[inline]
pub(crate) fn lse_unchecked(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_infinite() {
        return m;
    }
    let s: f64 = z.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax of `z / temperature`.
pub fn softmax(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_range("temperature", temperature, temperature > 0.0, "> 0")?;
    if z.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::Domain("softmax needs at least one finite logit".into()));
    }
    let mut p: Vec<f64> = z.iter().map(|&x| ((x - m) / temperature).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    Ok(p)
}

/// `d_k = max_i z_i - z_k`; every maximum maps to zero.
pub fn logit_distance(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    z.iter().map(|&x| m - x).collect()
}

/// `KL[u ‖ p]` for the uniform `u` over `p.len()` classes. Any zero
/// probability gives `+inf`.
pub fn kl_uniform(p: &[f64]) -> f64 {
    let k = p.len() as f64;
    let mut acc = 0.0;
    for &pk in p {
        if pk <= 0.0 {
            return f64::INFINITY;
        }
        acc += (1.0 / (k * pk)).ln();
    }
    acc / k
}

/// Shannon entropy in nats; `0 · log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Entropy of `softmax(z)` computed from logits without forming `log p`
/// by division: `H = LSE(z) - Σ p_k z_k`.
pub fn softmax_entropy(z: &[f64]) -> f64 {
    let lse = lse_unchecked(z);
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // shift by max for the expectation too, keeping both terms O(1)
    let mut s = 0.0;
    let mut e = 0.0;
    for &x in z {
        let w = (x - m).exp();
        s += w;
        e += w * (x - m);
    }
    (lse - m) - e / s
}
