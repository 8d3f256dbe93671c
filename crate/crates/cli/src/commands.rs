use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use lsce::blocked::{self, FilterConfig};
use lsce::calibration::{
    ace, bin_records, ece, ingest_records, reliability_data, rms_ce, sce, write_metrics_csv,
    write_reliability_csv, BinScheme, MetricRow,
};
use lsce::entropy::{numeric_min_entropy_with, sweep, write_sweep_csv, MinimizerConfig};
use lsce::reference::{finite_diff_grad, naive_backward, naive_forward};
use lsce::tensor::{
    load_matrix, load_tokens, plan_blocks, random_instance, save_matrix_as, save_tokens, zipf_instance, BlockPlan,
    Dtype,
};
use lsce::{DenseMatrix, TokenSequence};

use crate::{CalibrateArgs, Engine, EntropyArgs, GenArgs, GradcheckArgs, LossArgs, MetricArg, SchemeArg, TileArgs};

/// Opens `path` for writing, or stdout when `None`.
pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn plan_for(n: usize, v: usize, d: usize, tiles: &TileArgs) -> Result<BlockPlan> {
    let plan = plan_blocks(n, v, d, tiles.overrides()).context("tile flags")?;
    Ok(if tiles.parallel { plan.parallel() } else { plan })
}

fn load_inputs(a: &LossArgs) -> Result<(DenseMatrix, DenseMatrix, TokenSequence)> {
    let e = load_matrix(&a.embeddings)?;
    let c = load_matrix(&a.classifier)?;
    let x = load_tokens(&a.targets)?;
    if e.rows() != c.rows() {
        bail!(
            "--embeddings {} has hidden size {} but --classifier {} has {}",
            a.embeddings.display(),
            e.rows(),
            a.classifier.display(),
            c.rows()
        );
    }
    if x.len() != e.cols() {
        bail!(
            "--targets {} has {} tokens but --embeddings {} has {}",
            a.targets.display(),
            x.len(),
            a.embeddings.display(),
            e.cols()
        );
    }
    if let Err(err) = x.validate(c.cols()) {
        bail!("--targets {}: {err}", a.targets.display());
    }
    Ok((e, c, x))
}

pub fn loss(a: LossArgs) -> Result<()> {
    let (e, c, x) = load_inputs(&a)?;
    let (n, v, d) = (e.cols(), c.cols(), e.rows());
    let out = match a.engine {
        Engine::Naive => naive_forward(&e, &c, &x, a.beta, a.reduction.into())?,
        Engine::Blocked => {
            let plan = plan_for(n, v, d, &a.tiles)?;
            blocked::forward(&e, &c, &x, a.beta, a.reduction.into(), &plan)?.0
        }
    };
    if let Some(path) = &a.per_token {
        let mut w = output(Some(path))?;
        writeln!(w, "token,target,lse,o,loss")?;
        for i in 0..n {
            writeln!(w, "{},{},{},{},{}", i, x.target(i), out.lse[i], out.o[i], out.per_token_loss[i])?;
        }
        w.flush()?;
    }
    let engine = match a.engine {
        Engine::Blocked => "blocked",
        Engine::Naive => "naive",
    };
    let mut w = output(None)?;
    writeln!(w, "engine,reduction,tokens,vocab,hidden,beta,total")?;
    writeln!(
        w,
        "{engine},{},{n},{v},{d},{},{}",
        out.reduction.as_str(),
        a.beta,
        out.total
    )?;
    w.flush()?;
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.n == 0 || a.v < 2 || a.d == 0 {
        bail!("gradcheck needs --n >= 1, --v >= 2 and --d >= 1");
    }
    let inst = random_instance(a.seed, a.n, a.v, a.d, (a.d as f64).powf(-0.25));
    let (e, c, x) = (&inst.embeddings, &inst.classifier, &inst.targets);
    let reduction = a.reduction.into();
    let plan = plan_for(a.n, a.v, a.d, &a.tiles)?;
    let mut filter = match a.filter_eps {
        Some(eps) => FilterConfig::with_epsilon(eps),
        None => FilterConfig::off(),
    };
    filter.vocab_sorting = a.vocab_sort;
    let (_, mut grads, stats) = blocked::loss_and_grad(e, c, x, a.beta, &plan, filter, reduction, 1.0)?;
    if a.corrupt_gradient {
        let bump = 0.1 * grads.grad_e.frobenius_norm() + 1.0;
        grads.grad_e.as_mut_slice()[0] += bump;
    }
    let naive = naive_backward(e, c, x, a.beta, reduction, 1.0)?;
    let fd = finite_diff_grad(e, c, x, a.beta, reduction, a.h)?;

    let tol_analytic = if filter.enabled { a.tol_analytic.max(1e-3) } else { a.tol_analytic };
    let checks = [
        ("blocked_vs_naive", grads.relative_error(&naive), tol_analytic),
        ("naive_vs_fd", naive.relative_error(&fd), a.tol_fd),
    ];
    let mut w = output(None)?;
    writeln!(w, "check,relative_error,tolerance,status")?;
    let mut ok = grads.is_finite();
    for (name, err, tol) in checks {
        let pass = err <= tol;
        ok &= pass;
        writeln!(w, "{name},{err:e},{tol:e},{}", if pass { "PASS" } else { "FAIL" })?;
    }
    writeln!(w, "tiles_processed,{}", stats.tiles_processed)?;
    writeln!(w, "tiles_skipped,{}", stats.tiles_skipped_by_filter)?;
    writeln!(w, "{}", if ok { "PASS" } else { "FAIL" })?;
    w.flush()?;
    if !ok {
        bail!("gradient check failed");
    }
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let records = ingest_records(&a.input)?;
    let m = a.bins as usize;
    let has_probs = records.iter().all(|r| r.probs.is_some());
    let metrics = a.metrics.clone().unwrap_or_else(|| {
        let mut all = vec![MetricArg::Ece, MetricArg::RmsCe];
        if has_probs {
            all.extend([MetricArg::Sce, MetricArg::Ace]);
        }
        all
    });

    let n = records.len();
    let mut rows = Vec::new();
    for metric in metrics {
        match metric {
            MetricArg::Ece | MetricArg::RmsCe => {
                for scheme in [BinScheme::EqualWidth, BinScheme::EqualMass] {
                    let bins = bin_records(&records, m, scheme)?;
                    let (name, value) = if metric == MetricArg::Ece {
                        ("ece", ece(&bins, n)?)
                    } else {
                        ("rms_ce", rms_ce(&bins, n)?)
                    };
                    rows.push(MetricRow { name, m, scheme, value });
                }
            }
            MetricArg::Sce => rows.push(MetricRow {
                name: "sce",
                m,
                scheme: BinScheme::EqualWidth,
                value: sce(&records, m).with_context(|| format!("--input {}", a.input.display()))?,
            }),
            MetricArg::Ace => rows.push(MetricRow {
                name: "ace",
                m,
                scheme: BinScheme::EqualMass,
                value: ace(&records, m, a.ace_empty.into()).with_context(|| format!("--input {}", a.input.display()))?,
            }),
        }
    }

    if let Some(path) = &a.reliability {
        let scheme = match a.reliability_scheme {
            SchemeArg::EqualWidth => BinScheme::EqualWidth,
            SchemeArg::EqualMass => BinScheme::EqualMass,
        };
        let bins = bin_records(&records, m, scheme)?;
        let mut w = output(Some(path))?;
        write_reliability_csv(&reliability_data(&bins), &mut w)?;
        w.flush()?;
    }
    let mut w = output(a.out.as_deref())?;
    write_metrics_csv(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn entropy(a: EntropyArgs) -> Result<()> {
    let rows = sweep(&a.d, &a.v, &a.rho, &a.temperature, &a.softcap)?;
    let mut w = output(a.out.as_deref())?;
    write_sweep_csv(&rows, &mut w)?;
    w.flush()?;
    drop(w);
    if a.verify {
        let cfg = MinimizerConfig {
            restarts: a.restarts,
            iterations: a.iterations,
            seed: a.seed,
            ..MinimizerConfig::default()
        };
        let mut worst = f64::INFINITY;
        let mut failures = 0;
        for r in &rows {
            let numeric = numeric_min_entropy_with(r.effective_r, r.v, cfg);
            let margin = numeric - r.bound;
            worst = worst.min(margin);
            if margin < -1e-6 {
                failures += 1;
                eprintln!(
                    "violation: d={} v={} rho={} effective_r={} numeric={} bound={}",
                    r.d, r.v, r.rho, r.effective_r, numeric, r.bound
                );
            }
        }
        eprintln!("verified {} rows, smallest oracle-minus-bound margin {worst:e}", rows.len());
        if failures > 0 {
            bail!("{failures} rows where the numeric minimum beats the bound by more than 1e-6");
        }
    }
    Ok(())
}

pub fn gen(a: GenArgs) -> Result<()> {
    if a.n == 0 || a.v < 2 || a.d == 0 {
        bail!("gen needs --n >= 1, --v >= 2 and --d >= 1");
    }
    let scale = a.scale.unwrap_or((a.d as f64).powf(-0.25));
    let inst = match a.zipf {
        Some(s) => zipf_instance(a.seed, a.n, a.v, a.d, scale, s),
        None => random_instance(a.seed, a.n, a.v, a.d, scale),
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let dtype = if a.f32 { Dtype::F32 } else { Dtype::F64 };
    save_matrix_as(&inst.embeddings, a.out_dir.join("embeddings.sce"), dtype)?;
    save_matrix_as(&inst.classifier, a.out_dir.join("classifier.sce"), dtype)?;
    save_tokens(&inst.targets, a.out_dir.join("targets.sce"))?;
    let name = if a.f32 { "f32" } else { "f64" };
    let mut w = output(None)?;
    writeln!(w, "file,rows,cols,dtype")?;
    writeln!(w, "embeddings.sce,{},{},{name}", a.d, a.n)?;
    writeln!(w, "classifier.sce,{},{},{name}", a.d, a.v)?;
    writeln!(w, "targets.sce,{},1,u32", a.n)?;
    w.flush()?;
    Ok(())
}
