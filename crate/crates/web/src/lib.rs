//! Browser bindings for three small views of the `lsce` crate: the entropy
//! bound as a function of norm, a reliability diagram for synthetic
//! predictions, and a blocked-vs-naive comparison on a random instance.
//!
//! Each operation is a plain Rust function returning a serializable struct so
//! it can be tested natively; the `#[wasm_bindgen]` wrappers hand the same
//! data to JavaScript as JSON strings.

use lsce::blocked::{self, FilterConfig};
use lsce::calibration::{bin_records, ece, reliability_data, rms_ce, synthetic_records, BinScheme};
use lsce::entropy::{effective_params, entropy_lower_bound, normalized_gap, BoundParams};
use lsce::reference::{naive_backward, naive_forward};
use lsce::tensor::{plan_blocks, random_instance, zipf_instance, BlockOverrides};
use lsce::{BlockPlan, Reduction};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct CurvePoint {
    pub rho: f64,
    pub effective_r: f64,
    pub bound: f64,
    pub normalized_gap: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Curve {
    pub d: usize,
    pub v: usize,
    pub log_v: f64,
    pub points: Vec<CurvePoint>,
}

/// Samples the bound at `points` evenly spaced `ρ` in `[0, rho_max]`.
pub fn entropy_curve(d: usize, v: usize, rho_max: f64, points: usize, temperature: f64) -> lsce::Result<Curve> {
    let points = points.max(2);
    let mut out = Vec::with_capacity(points);
    for i in 0..points {
        let rho = rho_max * i as f64 / (points - 1) as f64;
        let p = effective_params(&BoundParams::from_rho(rho, d, v)?, Some(temperature), None)?;
        out.push(CurvePoint {
            rho,
            effective_r: p.r(),
            bound: entropy_lower_bound(&p),
            normalized_gap: normalized_gap(&p),
        });
    }
    Ok(Curve {
        d,
        v,
        log_v: (v as f64).ln(),
        points: out,
    })
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Bar {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Reliability {
    pub records: usize,
    pub ece: f64,
    pub rms_ce: f64,
    pub bars: Vec<Bar>,
}

/// Bins synthetic predictions whose probabilities were tempered by
/// `temperature` (below 1 is overconfident).
pub fn reliability(
    seed: u64,
    n: usize,
    classes: usize,
    temperature: f64,
    bins: usize,
    equal_mass: bool,
) -> lsce::Result<Reliability> {
    let records = synthetic_records(seed, n, classes, 2.0, temperature)?;
    let scheme = if equal_mass { BinScheme::EqualMass } else { BinScheme::EqualWidth };
    let stats = bin_records(&records, bins, scheme)?;
    let bars = reliability_data(&stats)
        .into_iter()
        .map(|r| Bar {
            lo: r.lo,
            hi: r.hi,
            count: r.count,
            mean_confidence: r.mean_confidence,
            accuracy: r.accuracy,
        })
        .collect();
    Ok(Reliability {
        records: n,
        ece: ece(&stats, n)?,
        rms_ce: rms_ce(&stats, n)?,
        bars,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExplorerInput {
    pub seed: u64,
    pub n: usize,
    pub v: usize,
    pub d: usize,
    pub beta: f64,
    /// Zero picks the default plan for each block size.
    pub n_block: usize,
    pub v_block: usize,
    pub d_block: usize,
    /// Zero disables gradient filtering.
    pub filter_eps: f64,
    /// Skews the target prior so filtering has something to skip.
    pub zipf: Option<f64>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Comparison {
    pub n_block: usize,
    pub v_block: usize,
    pub d_block: usize,
    pub naive_loss: f64,
    pub blocked_loss: f64,
    pub loss_relative_error: f64,
    pub gradient_relative_error: f64,
    /// Size of the N×|V| logit matrix the naive engine materializes.
    pub naive_logit_bytes: usize,
    pub blocked_peak_bytes: usize,
    pub tiles_processed: usize,
    pub tiles_skipped: usize,
}

fn pick(x: usize) -> Option<usize> {
    (x > 0).then_some(x)
}

pub fn compare(input: &ExplorerInput) -> lsce::Result<Comparison> {
    let ExplorerInput { seed, n, v, d, beta, .. } = *input;
    let scale = (d as f64).powf(-0.25);
    let inst = match input.zipf {
        Some(s) => zipf_instance(seed, n, v, d, scale, s),
        None => random_instance(seed, n, v, d, scale),
    };
    let overrides = BlockOverrides {
        n_block: pick(input.n_block),
        v_block: pick(input.v_block),
        d_block: pick(input.d_block),
    };
    let plan: BlockPlan = plan_blocks(n, v, d, overrides)?;
    let filter = if input.filter_eps > 0.0 {
        FilterConfig::with_epsilon(input.filter_eps)
    } else {
        FilterConfig::off()
    };
    let (e, c, x) = (&inst.embeddings, &inst.classifier, &inst.targets);
    let (loss, grads, stats) = blocked::loss_and_grad(e, c, x, beta, &plan, filter, Reduction::Mean, 1.0)?;
    let naive = naive_forward(e, c, x, beta, Reduction::Mean)?;
    let naive_grads = naive_backward(e, c, x, beta, Reduction::Mean, 1.0)?;
    Ok(Comparison {
        n_block: plan.n_block,
        v_block: plan.v_block,
        d_block: plan.d_block,
        naive_loss: naive.total,
        blocked_loss: loss.total,
        loss_relative_error: (loss.total - naive.total).abs() / naive.total.abs().max(f64::MIN_POSITIVE),
        gradient_relative_error: grads.relative_error(&naive_grads),
        naive_logit_bytes: n * v * std::mem::size_of::<f64>(),
        blocked_peak_bytes: stats.peak_auxiliary_bytes,
        tiles_processed: stats.tiles_processed,
        tiles_skipped: stats.tiles_skipped_by_filter,
    })
}

fn to_js<T: Serialize>(r: lsce::Result<T>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = entropyCurve)]
pub fn entropy_curve_js(d: usize, v: usize, rho_max: f64, points: usize, temperature: f64) -> Result<String, JsError> {
    to_js(entropy_curve(d, v, rho_max, points, temperature))
}

#[wasm_bindgen(js_name = reliabilityDiagram)]
pub fn reliability_js(
    seed: u32,
    n: usize,
    classes: usize,
    temperature: f64,
    bins: usize,
    equal_mass: bool,
) -> Result<String, JsError> {
    to_js(reliability(seed as u64, n, classes, temperature, bins, equal_mass))
}

#[wasm_bindgen(js_name = compareEngines)]
#[allow(clippy::too_many_arguments)]
pub fn compare_js(
    seed: u32,
    n: usize,
    v: usize,
    d: usize,
    beta: f64,
    n_block: usize,
    v_block: usize,
    d_block: usize,
    filter_eps: f64,
    zipf: f64,
) -> Result<String, JsError> {
    // Guard the page against sizes that would stall the tab.
    if n.saturating_mul(v) > 4_000_000 || n * v * d > 200_000_000 {
        return Err(JsError::new("instance too large for the demo; keep n·v under 4M"));
    }
    to_js(compare(&ExplorerInput {
        seed: seed as u64,
        n,
        v,
        d,
        beta,
        n_block,
        v_block,
        d_block,
        filter_eps,
        zipf: (zipf > 0.0).then_some(zipf),
    }))
}
