//! Counter-based random numbers and seeded problem instances.
//!
//! The generator is SplitMix64 evaluated in counter mode: the `i`-th draw of a
//! stream is `mix(key + (i + 1) * 0x9E3779B97F4A7C15)` where `mix` is the
//! SplitMix64 finalizer (shifts 30/27/31, multipliers `0xBF58476D1CE4E5B9`
//! and `0x94D049BB133111EB`). A stream key is `mix(seed ^ mix(stream * GOLDEN))`.
//! Uniforms take the top 53 bits and are centered in their cell, so they lie
//! strictly inside (0, 1). Normals use Acklam's rational inverse-CDF
//! approximation (relative error below 1.15e-9) with no refinement step.
//!
//! Everything here is plain integer and IEEE arithmetic, so the same seed
//! yields the same instance in any implementation that follows these rules.

use super::{DenseMatrix, TokenSequence};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream ids used by the instance generators.
const STREAM_EMBEDDINGS: u64 = 1;
const STREAM_CLASSIFIER: u64 = 2;
const STREAM_TARGETS: u64 = 3;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A keyed counter-based generator: every draw is a pure function of
/// `(seed, stream, counter)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: mix(seed ^ mix(stream.wrapping_mul(GOLDEN))),
        }
    }

    #[inline]
    pub fn u64_at(&self, counter: u64) -> u64 {
        mix(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn uniform_at(&self, counter: u64) -> f64 {
        ((self.u64_at(counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the inverse CDF.
    #[inline]
    pub fn normal_at(&self, counter: u64) -> f64 {
        inverse_normal_cdf(self.uniform_at(counter))
    }

    /// Uniform index in `[0, n)`.
    #[inline]
    pub fn index_at(&self, counter: u64, n: usize) -> usize {
        let u = (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        ((u * n as f64) as usize).min(n - 1)
    }
}

/// Acklam's approximation to the standard normal quantile function.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    }
}

/// Embeddings `E` (D×N), classifier `C` (D×|V|) and targets `x` (N).
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub embeddings: DenseMatrix,
    pub classifier: DenseMatrix,
    pub targets: TokenSequence,
}

fn normal_matrix(seed: u64, stream: u64, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let rng = CounterRng::new(seed, stream);
    let mut k = 0u64;
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let z = rng.normal_at(k);
        k += 1;
        scale * z
    })
}

fn check_dims(n: usize, v: usize, d: usize, scale: f64) {
    assert!(n >= 1 && v >= 1 && d >= 1, "instance dims must be >= 1");
    assert!(scale > 0.0 && scale.is_finite(), "scale must be positive");
}

/// I.i.d. `N(0, scale²)` entries and uniform targets.
///
/// Panics if a dimension is zero or `scale` is not positive.
pub fn random_instance(seed: u64, n: usize, v: usize, d: usize, scale: f64) -> Instance {
    check_dims(n, v, d, scale);
    let targets = CounterRng::new(seed, STREAM_TARGETS);
    Instance {
        embeddings: normal_matrix(seed, STREAM_EMBEDDINGS, d, n, scale),
        classifier: normal_matrix(seed, STREAM_CLASSIFIER, d, v, scale),
        targets: TokenSequence::new((0..n as u64).map(|i| targets.index_at(i, v) as u32).collect()),
    }
}

/// A language-model-like instance with a Zipfian frequency prior.
///
/// Starts from [`random_instance`], then turns hidden row 0 into a bias
/// feature: `E[0, i] = 1` and `C[0, v] = -exponent * ln(v + 1)`, so vocabulary
/// id `v` has prior weight `(v + 1)^-exponent`. Targets are drawn from that
/// prior by inverse-CDF lookup. Low ids are frequent, as with BPE vocabularies,
/// which makes whole vocabulary blocks negligible and exercises the gradient
/// filter.
pub fn zipf_instance(seed: u64, n: usize, v: usize, d: usize, scale: f64, exponent: f64) -> Instance {
    assert!(exponent >= 0.0 && exponent.is_finite(), "zipf exponent must be >= 0");
    let mut inst = random_instance(seed, n, v, d, scale);
    inst.embeddings.row_mut(0).fill(1.0);
    for (k, c) in inst.classifier.row_mut(0).iter_mut().enumerate() {
        *c = -exponent * ((k + 1) as f64).ln();
    }

    let mut cdf: Vec<f64> = Vec::with_capacity(v);
    let mut acc = 0.0;
    for k in 0..v {
        acc += ((k + 1) as f64).powf(-exponent);
        cdf.push(acc);
    }
    let rng = CounterRng::new(seed, STREAM_TARGETS);
    let targets = (0..n as u64)
        .map(|i| {
            let u = rng.uniform_at(i) * acc;
            cdf.partition_point(|&c| c < u).min(v - 1) as u32
        })
        .collect();
    inst.targets = TokenSequence::new(targets);
    inst
}
