//! Forward/backward timing with allocator-measured peak auxiliary memory.

use std::io::Write;
use std::time::Instant;

use anyhow::{bail, Result};
use lsce::alloc::measure;
use lsce::blocked::{self, FilterConfig};
use lsce::reference::{naive_backward, naive_forward};
use lsce::tensor::{random_instance, BlockPlan};
use lsce::{DenseMatrix, Gradients, LossOutput, Reduction, TokenSequence};

use crate::commands::{output, plan_for};
use crate::BenchArgs;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    Blocked,
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Fwd,
    Bwd,
    FwdBwd,
}

const PHASES: [Phase; 3] = [Phase::Fwd, Phase::Bwd, Phase::FwdBwd];

/// One CSV row.
struct BenchReport {
    method: Method,
    phase: Phase,
    beta: f64,
    repetitions: u32,
    wall_time_ms: f64,
    peak_auxiliary_bytes: usize,
}

struct Problem<'a> {
    e: &'a DenseMatrix,
    c: &'a DenseMatrix,
    x: &'a TokenSequence,
    plan: &'a BlockPlan,
}

/// What one phase hands back; dropped only after measurement so outputs
/// count as retained rather than auxiliary.
#[allow(dead_code)]
enum Outcome {
    Loss(LossOutput, usize),
    Grads(Gradients, usize),
    Both(LossOutput, Gradients, usize),
}

impl Outcome {
    fn ledger_peak(&self) -> usize {
        match self {
            Outcome::Loss(_, p) | Outcome::Grads(_, p) | Outcome::Both(_, _, p) => *p,
        }
    }
}

/// Runs one phase once; returns the auxiliary bytes it needed.
fn run_once(p: &Problem<'_>, method: Method, phase: Phase, beta: f64, lse: &[f64]) -> Result<usize> {
    let r = Reduction::Sum;
    let filter = FilterConfig::off();
    let (result, stats) = measure(|| -> lsce::Result<Outcome> {
        Ok(match (method, phase) {
            (Method::Blocked, Phase::Fwd) => {
                let (l, s) = blocked::forward(p.e, p.c, p.x, beta, r, p.plan)?;
                Outcome::Loss(l, s.peak_auxiliary_bytes)
            }
            (Method::Blocked, Phase::Bwd) => {
                let (g, s) = blocked::backward(p.e, p.c, p.x, beta, r, p.plan, lse, 1.0, filter)?;
                Outcome::Grads(g, s.peak_auxiliary_bytes)
            }
            (Method::Blocked, Phase::FwdBwd) => {
                let (l, g, s) = blocked::loss_and_grad(p.e, p.c, p.x, beta, p.plan, filter, r, 1.0)?;
                Outcome::Both(l, g, s.peak_auxiliary_bytes)
            }
            (Method::Naive, Phase::Fwd) => Outcome::Loss(naive_forward(p.e, p.c, p.x, beta, r)?, 0),
            (Method::Naive, Phase::Bwd) => Outcome::Grads(naive_backward(p.e, p.c, p.x, beta, r, 1.0)?, 0),
            (Method::Naive, Phase::FwdBwd) => Outcome::Both(
                naive_forward(p.e, p.c, p.x, beta, r)?,
                naive_backward(p.e, p.c, p.x, beta, r, 1.0)?,
                0,
            ),
        })
    });
    // worker threads are invisible to the thread-local counter; the engine ledger covers them
    Ok(stats.auxiliary_bytes().max(result?.ledger_peak()))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len().is_multiple_of(2) {
        (xs[mid - 1] + xs[mid]) / 2.0
    } else {
        xs[mid]
    }
}

pub fn run(a: BenchArgs) -> Result<()> {
    if a.n == 0 || a.v < 2 || a.d == 0 {
        bail!("bench needs --n >= 1, --v >= 2 and --d >= 1");
    }
    let naive_logit_bytes = a.n * a.v * std::mem::size_of::<f64>();
    if !a.skip_naive && naive_logit_bytes > a.naive_limit_mib << 20 {
        bail!(
            "the naive engine would allocate {} MiB of logits (limit {} MiB); pass --skip-naive",
            naive_logit_bytes >> 20,
            a.naive_limit_mib
        );
    }
    let inst = random_instance(a.seed, a.n, a.v, a.d, (a.d as f64).powf(-0.25));
    let plan = plan_for(a.n, a.v, a.d, &a.tiles)?;
    let p = Problem {
        e: &inst.embeddings,
        c: &inst.classifier,
        x: &inst.targets,
        plan: &plan,
    };
    let methods: &[Method] = if a.skip_naive { &[Method::Blocked] } else { &[Method::Blocked, Method::Naive] };

    let mut reports = Vec::new();
    for &beta in &a.betas {
        let lse = blocked::forward(p.e, p.c, p.x, beta, Reduction::Sum, &plan)?.0.lse;
        for &method in methods {
            for phase in PHASES {
                for _ in 0..a.warmup {
                    run_once(&p, method, phase, beta, &lse)?;
                }
                let mut times = Vec::with_capacity(a.reps as usize);
                let mut peak = 0;
                for _ in 0..a.reps {
                    let start = Instant::now();
                    peak = peak.max(run_once(&p, method, phase, beta, &lse)?);
                    times.push(start.elapsed().as_secs_f64() * 1e3);
                }
                reports.push(BenchReport {
                    method,
                    phase,
                    beta,
                    repetitions: a.reps,
                    wall_time_ms: median(times),
                    peak_auxiliary_bytes: peak,
                });
            }
        }
    }

    let mut w = output(a.out.as_deref())?;
    writeln!(w, "method,phase,n,v,d,beta,repetitions,wall_time_ms,peak_auxiliary_bytes")?;
    for r in &reports {
        let method = match r.method {
            Method::Blocked => "blocked",
            Method::Naive => "naive",
        };
        let phase = match r.phase {
            Phase::Fwd => "fwd",
            Phase::Bwd => "bwd",
            Phase::FwdBwd => "fwd_bwd",
        };
        let time = if a.no_timing { String::new() } else { format!("{:.3}", r.wall_time_ms) };
        writeln!(
            w,
            "{method},{phase},{},{},{},{},{},{time},{}",
            a.n, a.v, a.d, r.beta, r.repetitions, r.peak_auxiliary_bytes
        )?;
    }
    w.flush()?;
    drop(w);

    check_memory(&a, &plan, &reports, naive_logit_bytes)
}

/// Blocked peaks stay within the plan's working set and do not depend on `β`.
/// The ratio to the naive engine is reported; it only exceeds 1 once the
/// problem spans several tiles.
fn check_memory(a: &BenchArgs, plan: &BlockPlan, reports: &[BenchReport], naive_logit_bytes: usize) -> Result<()> {
    let blocks = a.v.div_ceil(plan.v_block.min(a.v));
    let ceiling = plan.working_set_bytes(a.n, a.v, a.d) + 8 * (a.n + 2 * a.d + blocks) + 4096;
    let blocked: Vec<&BenchReport> = reports.iter().filter(|r| r.method == Method::Blocked).collect();
    let blocked_max = blocked.iter().map(|r| r.peak_auxiliary_bytes).max().unwrap_or(0);
    let naive_min = reports
        .iter()
        .filter(|r| r.method == Method::Naive)
        .map(|r| r.peak_auxiliary_bytes)
        .min()
        .unwrap_or(naive_logit_bytes);

    let mut problems = Vec::new();
    if blocked_max > ceiling {
        problems.push(format!("blocked peak {blocked_max} B exceeds the plan ceiling {ceiling} B"));
    }
    for phase in PHASES {
        let peaks: Vec<usize> = blocked.iter().filter(|r| r.phase == phase).map(|r| r.peak_auxiliary_bytes).collect();
        if let (Some(&lo), Some(&hi)) = (peaks.iter().min(), peaks.iter().max()) {
            if (hi - lo) as f64 > 0.01 * hi as f64 {
                problems.push(format!("blocked peaks differ across beta by more than 1%: {lo} vs {hi} B"));
            }
        }
    }
    eprintln!(
        "memory: blocked peak {blocked_max} B (ceiling {ceiling} B), naive {} {naive_min} B, ratio {:.1}x",
        if a.skip_naive { "logit buffer" } else { "peak" },
        naive_min as f64 / blocked_max.max(1) as f64
    );
    if !problems.is_empty() {
        bail!("memory ceiling violated: {}", problems.join("; "));
    }
    Ok(())
}
