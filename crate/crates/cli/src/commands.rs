use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use kfg_core::check::{module_suite, MODULES};
use kfg_core::{weights, Model, ModelConfig, ParamAudit};
use kfg_eval::augment::{augment, AugmentSpec};
use kfg_eval::bench::{bench_model, BenchConfig, BenchReport, HardwareInfo};
use kfg_eval::dataset::{load_dataset, save_dataset, Sample};
use kfg_eval::eval::{evaluate_model, EvalConfig};
use kfg_eval::toy::{train_toy, ToyConfig};
use kfg_tensor::op_suite;

use crate::args::{AugmentArgs, AuditArgs, BenchArgs, EvalArgs, GradcheckArgs, ModelArgs, TrainToyArgs};
use crate::error::{CliError, Result};

fn model_config(args: &ModelArgs) -> Result<ModelConfig> {
    let mut cfg = match (&args.variant, &args.config) {
        (_, Some(path)) => ModelConfig::parse(&std::fs::read_to_string(path)?)?,
        (Some(v), None) => ModelConfig::variant(v)?,
        (None, None) => return Err(CliError::Usage("one of --variant or --config is required".into())),
    };
    if let Some(nc) = args.nc {
        cfg.nc = nc;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn head_total(a: &ParamAudit) -> usize {
    a.module_totals(1).into_iter().find(|(n, _)| n == "head").map_or(0, |(_, c)| c)
}

pub fn audit(args: &AuditArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = model_config(&args.model)?;
    let audit = Model::build(&cfg, 0)?.audit();
    let name = cfg.variant_name();
    writeln!(out, "variant: {name}  nc={}  width={}  depth={}", cfg.nc, cfg.width, cfg.depth)?;
    writeln!(out, "{:<36} {:>12}", "module", "params")?;
    for (m, n) in audit.module_totals(args.depth.max(1)) {
        writeln!(out, "{m:<36} {n:>12}")?;
    }
    let shared = audit.raw_total - audit.dedup_total;
    writeln!(out, "{:<36} {:>12}", "total (shared storage once)", audit.dedup_total)?;
    if shared > 0 {
        writeln!(out, "{:<36} {:>12}", "shared references not counted", shared)?;
    }
    writeln!(out, "total: {}", millions(audit.dedup_total))?;

    let mut base_cfg = cfg.clone();
    base_cfg.set_variant("v8n")?;
    let base = Model::build(&base_cfg, 0)?.audit();
    let reduction = (base.dedup_total as f64 - audit.dedup_total as f64) / base.dedup_total as f64;
    let (bh, h) = (head_total(&base), head_total(&audit));
    let head_reduction = (bh as f64 - h as f64) / bh as f64;
    if name != "v8n" {
        writeln!(
            out,
            "vs v8n: {} -> {} ({:+.1}%), head only: {} -> {} ({:+.1}%)",
            millions(base.dedup_total),
            millions(audit.dedup_total),
            -100.0 * reduction,
            millions(bh),
            millions(h),
            -100.0 * head_reduction
        )?;
    }
    writeln!(out, "variant={name}")?;
    writeln!(out, "params={}", audit.dedup_total)?;
    writeln!(out, "params_m={:.2}", audit.millions())?;
    writeln!(out, "params_raw={}", audit.raw_total)?;
    writeln!(out, "baseline_params={}", base.dedup_total)?;
    writeln!(out, "reduction_pct={:.2}", 100.0 * reduction)?;
    writeln!(out, "head_params={h}")?;
    writeln!(out, "head_reduction_pct={:.2}", 100.0 * head_reduction)?;
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let modules: Vec<&str> = match args.module.as_str() {
        "all" => std::iter::once("ops").chain(MODULES).collect(),
        "ops" => vec!["ops"],
        m if MODULES.contains(&m) => vec![m],
        m => {
            return Err(CliError::Usage(format!(
                "unknown module {m:?}; expected all, ops, {}",
                MODULES.join(", ")
            )))
        }
    };
    let fault = args.inject_fault.as_deref();
    if let Some(op) = fault {
        writeln!(out, "inject_fault={op}")?;
    }
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for m in modules {
        let cases: Vec<(String, f64)> = if m == "ops" {
            op_suite(fault)
                .map_err(kfg_core::CoreError::from)?
                .into_iter()
                .map(|(n, r)| (n.to_string(), r.max_rel_err))
                .collect()
        } else {
            module_suite(m, args.seed, fault)?
                .into_iter()
                .map(|(n, r)| (n, r.max_rel_err))
                .collect()
        };
        let module_worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
        worst = worst.max(module_worst);
        for (case, e) in &cases {
            let ok = *e <= args.tol;
            if !ok {
                failed.push(format!("{m}/{case}"));
            }
            writeln!(out, "module={m} case={case} max_rel_err={e:.3e} status={}", if ok { "pass" } else { "FAIL" })?;
        }
        let status = if module_worst <= args.tol { "pass" } else { "FAIL" };
        writeln!(out, "module={m} cases={} max_rel_err={module_worst:.3e} status={status}", cases.len())?;
    }
    writeln!(out, "tol={:e}", args.tol)?;
    writeln!(out, "max_rel_err={worst:.3e}")?;
    writeln!(out, "status={}", if failed.is_empty() { "pass" } else { "FAIL" })?;
    writeln!(err, "gradcheck finished in {:.2}s", start.elapsed().as_secs_f64())?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient check above tol {:e}: {}", args.tol, failed.join(" "))))
    }
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let model = weights::load(&args.weights)?;
    let (samples, warnings) = load_dataset(&args.images, &args.labels, model.cfg.nc)?;
    for (path, w) in &warnings {
        writeln!(err, "warning: {}:{}: {}", path.display(), w.line, w.msg)?;
    }
    let cfg = EvalConfig {
        conf: args.conf,
        nms_iou: args.iou,
        workers: args.workers,
        ..EvalConfig::default()
    };
    let report = evaluate_model(&model, &samples, cfg)?;
    writeln!(out, "variant: {}  images: {}", model.cfg.variant_name(), samples.len())?;
    write!(out, "{}", report.table())?;
    writeln!(out, "images={}", samples.len())?;
    write!(out, "{}", report.key_values())?;
    Ok(())
}

pub fn bench(args: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = BenchConfig {
        imgsz: args.imgsz,
        warmup: args.warmup,
        iters: args.iters,
        seed: args.seed,
        ..BenchConfig::default()
    };
    let mut results = Vec::new();
    for v in &args.variant {
        let mut mc = ModelConfig::variant(v)?;
        mc.nc = args.nc;
        mc.imgsz = args.imgsz;
        mc.validate()?;
        let model = Model::build(&mc, args.seed)?;
        results.push(bench_model(&model, &cfg)?);
    }
    let report = BenchReport {
        hardware: HardwareInfo::detect(),
        results,
    };
    write!(out, "{}", report.table())?;
    write!(out, "{}", report.key_values())?;
    Ok(())
}

pub fn train_toy_cmd(args: &TrainToyArgs, out: &mut dyn Write) -> Result<()> {
    if args.fixtures == 0 {
        return Err(CliError::Usage("--fixtures must be at least 1".into()));
    }
    let cfg = ToyConfig {
        variant: args.variant.clone(),
        fixtures: args.fixtures,
        iters: args.iters,
        lr: args.lr,
        seed: args.seed,
        ..ToyConfig::default()
    };
    let start = Instant::now();
    let mut log_err = None;
    let run = train_toy(&cfg, |i, r| {
        if args.log_every > 0 && (i % args.log_every == 0 || i + 1 == args.iters) {
            let line = writeln!(
                out,
                "step={i} loss={:.4} box={:.4} cls={:.4} dfl={:.4} grad_norm={:.3}",
                r.loss, r.box_loss, r.cls_loss, r.dfl_loss, r.grad_norm
            );
            if let Err(e) = line {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    weights::save(&run.model, &args.out)?;
    let dir = args.fixtures_dir.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".fixtures");
        PathBuf::from(p)
    });
    save_dataset(&dir, &run.samples)?;
    let first = run.steps.first().map_or(f64::NAN, |s| s.loss);
    let last = run.steps.last().map_or(f64::NAN, |s| s.loss);
    writeln!(out, "variant={}", run.model.cfg.variant_name())?;
    writeln!(out, "iters={}", args.iters)?;
    writeln!(out, "loss_first={first:.6}")?;
    writeln!(out, "loss_last={last:.6}")?;
    writeln!(out, "seconds={:.2}", start.elapsed().as_secs_f64())?;
    writeln!(out, "weights={}", args.out.display())?;
    writeln!(out, "images={}", dir.join("images").display())?;
    writeln!(out, "labels={}", dir.join("labels").display())?;
    Ok(())
}

pub fn augment_cmd(args: &AugmentArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    if args.factor == 0 {
        return Err(CliError::Usage("--factor must be at least 1".into()));
    }
    let mut spec = match &args.spec {
        Some(p) => AugmentSpec::parse(&std::fs::read_to_string(p)?)
            .map_err(|e| CliError::Usage(format!("augment spec {}: {e}", p.display())))?,
        None => AugmentSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let (samples, warnings) = load_dataset(&args.input.join("images"), &args.input.join("labels"), args.nc)?;
    for (path, w) in &warnings {
        writeln!(err, "warning: {}:{}: {}", path.display(), w.line, w.msg)?;
    }
    let mut produced = Vec::with_capacity(samples.len() * args.factor);
    for (i, s) in samples.iter().enumerate() {
        produced.push(s.clone());
        for k in 1..args.factor {
            let (image, gts) = augment(&s.image, &s.gts, &spec, (i * args.factor + k) as u64);
            produced.push(Sample {
                stem: format!("{}_aug{k}", s.stem),
                image,
                gts,
            });
        }
    }
    save_dataset(&args.out, &produced)?;
    writeln!(out, "inputs={}", samples.len())?;
    writeln!(out, "outputs={}", produced.len())?;
    writeln!(out, "boxes_in={}", samples.iter().map(|s| s.gts.len()).sum::<usize>())?;
    writeln!(out, "boxes_out={}", produced.iter().map(|s| s.gts.len()).sum::<usize>())?;
    Ok(())
}
