use std::fmt::Write as _;
use std::io::Write;

use anyhow::anyhow;
use serde::Serialize;

use s2a_core::backbone::{build_variant, gaussian_blobs, train_toy as fit, TrainOptions, VariantConfig, PYRAMID_STRIDES};
use s2a_core::bench::{records_to_csv, run_bench, BenchRecord, BenchSpec, Mixer};
use s2a_core::cost::{reconcile_counted, stage_checks, CostReport, StageCheck, MAC_CONVENTION};
use s2a_core::gradcheck::{gradcheck_module, GradModule, GradcheckOptions};
use s2a_core::manifest::write_manifest;

use crate::{
    BenchArgs, BenchOut, CliError, CmdResult, DTypeArg, DescribeArgs, ExportArgs, Format, GradcheckArgs, MixerArg, ModuleArg, TrainToyArgs,
    VerifyCostArgs,
};

#[derive(Debug, Serialize)]
pub struct CostPair {
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Serialize)]
pub struct StageRow {
    pub stage: usize,
    pub channels: usize,
    pub blocks: usize,
    pub sr_ratio: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Serialize)]
pub struct Description {
    pub variant: String,
    pub resolution: [usize; 2],
    pub convention: String,
    pub num_classes: usize,
    pub lim_enabled: bool,
    pub sr_mode: s2a_core::ssa::SrMode,
    pub total_blocks: usize,
    pub stages: Vec<StageRow>,
    pub stem: CostPair,
    pub head: CostPair,
    pub params: u64,
    pub macs: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<CostReport>,
}

fn millions(v: u64) -> f64 {
    v as f64 / 1e6
}

pub fn describe_config(cfg: &VariantConfig, res: usize, layers: bool) -> Result<Description, CliError> {
    let shapes = cfg.stage_shapes((res, res))?;
    let model = build_variant::<f32>(cfg, 0)?;
    let report = CostReport::build(&model, (res, res))?;
    let part = |name: &str| {
        report
            .stages
            .iter()
            .find(|s| s.name == name)
            .map_or(CostPair { params: 0, macs: 0 }, |s| CostPair { params: s.params, macs: s.macs })
    };
    let stages = shapes
        .iter()
        .zip(&cfg.stages)
        .map(|(s, c)| {
            let cost = part(&format!("stage{}", s.stage));
            StageRow {
                stage: s.stage,
                channels: c.channels,
                blocks: c.blocks,
                sr_ratio: c.sr_ratio,
                heads: c.heads,
                mlp_ratio: c.mlp_ratio,
                height: s.height,
                width: s.width,
                stride: PYRAMID_STRIDES[s.stage - 1],
                params: cost.params,
                macs: cost.macs,
            }
        })
        .collect();
    Ok(Description {
        variant: cfg.name.clone(),
        resolution: [res, res],
        convention: MAC_CONVENTION.to_string(),
        num_classes: cfg.num_classes,
        lim_enabled: cfg.lim_enabled,
        sr_mode: cfg.sr_mode,
        total_blocks: cfg.total_blocks(),
        stages,
        stem: part("stem"),
        head: part("head"),
        params: report.params,
        macs: report.macs,
        layers: layers.then_some(report),
    })
}

impl Description {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} @ {}x{}  classes {}  lim {}  reduction {:?}",
            self.variant, self.resolution[0], self.resolution[1], self.num_classes, self.lim_enabled, self.sr_mode
        );
        let _ = writeln!(
            s,
            "{:<6} {:>8} {:>6} {:>3} {:>5} {:>4} {:>9} {:>6} {:>12} {:>14}",
            "stage", "channels", "blocks", "k", "heads", "mlp", "map", "stride", "params", "macs"
        );
        let _ = writeln!(s, "{:<6} {:>62} {:>14}", "stem", self.stem.params, self.stem.macs);
        for r in &self.stages {
            let _ = writeln!(
                s,
                "{:<6} {:>8} {:>6} {:>3} {:>5} {:>4} {:>9} {:>6} {:>12} {:>14}",
                r.stage,
                r.channels,
                r.blocks,
                r.sr_ratio,
                r.heads,
                r.mlp_ratio,
                format!("{}x{}", r.height, r.width),
                r.stride,
                r.params,
                r.macs
            );
        }
        let _ = writeln!(s, "{:<6} {:>62} {:>14}", "head", self.head.params, self.head.macs);
        let _ = writeln!(
            s,
            "total  {} blocks  {} params ({:.2} M)  {} MACs ({:.3} G)",
            self.total_blocks,
            self.params,
            millions(self.params),
            self.macs,
            self.macs as f64 / 1e9
        );
        if let Some(layers) = &self.layers {
            s.push('\n');
            s.push_str(&layers.to_table());
        }
        s
    }
}

pub fn describe(a: &DescribeArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = a.model.resolve()?;
    let d = describe_config(&cfg, a.res, a.layers)?;
    match a.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&d).map_err(CliError::failure)?)?,
        Format::Table => write!(out, "{}", d.to_table())?,
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CheckRow {
    pub variant: String,
    pub stage: usize,
    pub n: u64,
    pub d: u64,
    pub h: u64,
    pub k: u64,
    pub ssa: u64,
    pub bound_a: u64,
    pub mhsa: u64,
    pub counted: u64,
    pub expected: u64,
    pub identity: bool,
    pub inequality: bool,
    pub strict: bool,
    pub status: String,
}

#[derive(Debug, Serialize)]
pub struct VerifySummary {
    pub resolution: [usize; 2],
    pub checks: Vec<CheckRow>,
    pub passed: usize,
    pub total: usize,
}

fn check_row(c: &StageCheck) -> CheckRow {
    let status = if !c.passes() {
        "fail"
    } else if !c.inequality.strict {
        "pass (not strict)"
    } else {
        "pass"
    };
    let f = c.reconcile.inputs;
    CheckRow {
        variant: c.variant.clone(),
        stage: c.stage,
        n: f.n,
        d: f.d,
        h: f.h,
        k: f.k,
        ssa: c.inequality.ssa,
        bound_a: c.inequality.bound_a,
        mhsa: c.inequality.mhsa,
        counted: c.reconcile.counted,
        expected: c.reconcile.expected(),
        identity: c.reconcile.holds,
        inequality: c.inequality.holds,
        strict: c.inequality.strict,
        status: status.to_string(),
    }
}

pub fn verify_configs(configs: &[VariantConfig], res: usize, corrupt: bool) -> Result<VerifySummary, CliError> {
    let mut checks = Vec::new();
    for cfg in configs {
        for mut c in stage_checks(cfg, (res, res))? {
            if corrupt {
                c.reconcile = reconcile_counted(&c.reconcile.inputs, cfg.sr_mode, c.reconcile.counted + 1)?;
            }
            checks.push(check_row(&c));
        }
    }
    let passed = checks.iter().filter(|c| c.status != "fail").count();
    Ok(VerifySummary { resolution: [res, res], total: checks.len(), passed, checks })
}

pub fn verify_cost(a: &VerifyCostArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let configs = match (&a.target.variant, &a.target.config) {
        (Some(v), _) if v.eq_ignore_ascii_case("all") => VariantConfig::all_named(),
        (Some(v), _) => vec![VariantConfig::named(v)?],
        (None, Some(p)) => vec![crate::load_config(p)?],
        (None, None) => return Err(CliError::usage(anyhow!("pass --variant or --config"))),
    };
    let summary = verify_configs(&configs, a.res, a.corrupt_counter)?;
    match a.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&summary).map_err(CliError::failure)?)?,
        Format::Table => {
            writeln!(
                out,
                "{:<8} {:>5} {:>6} {:>4} {:>3} {:>3} {:>13} {:>13} {:>14} {:>13} {:>13}  status",
                "variant", "stage", "N", "d", "h", "k", "ssa", "bound_a", "mhsa", "counted", "expected"
            )?;
            for c in &summary.checks {
                writeln!(
                    out,
                    "{:<8} {:>5} {:>6} {:>4} {:>3} {:>3} {:>13} {:>13} {:>14} {:>13} {:>13}  {}",
                    c.variant, c.stage, c.n, c.d, c.h, c.k, c.ssa, c.bound_a, c.mhsa, c.counted, c.expected, c.status
                )?;
            }
            writeln!(out, "{}/{} shapes pass", summary.passed, summary.total)?;
        }
    }
    for c in summary.checks.iter().filter(|c| !c.strict) {
        writeln!(err, "warning: {} stage {} has k = {}; the inequality is not strict", c.variant, c.stage, c.k)?;
    }
    let failing: Vec<String> = summary
        .checks
        .iter()
        .filter(|c| c.status == "fail")
        .map(|c| format!("{} stage {} (N={}, d={}, h={}, k={})", c.variant, c.stage, c.n, c.d, c.h, c.k))
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::failure(anyhow!("cost identities failed for {}", failing.join(", "))))
    }
}

pub fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    if a.dtype != DTypeArg::F64 {
        return Err(CliError::usage(anyhow!("gradient checks run in f64 only")));
    }
    if a.tol.is_nan() || a.tol < 0.0 || a.step.is_nan() || a.step <= 0.0 {
        return Err(CliError::usage(anyhow!("--tol must be non-negative and --step positive")));
    }
    let module = match a.module {
        ModuleArg::Ssa => GradModule::Ssa,
        ModuleArg::Lim => GradModule::Lim,
        ModuleArg::Hpb => GradModule::Hpb,
        ModuleArg::Backbone => GradModule::Backbone,
    };
    let mut opts = GradcheckOptions { step: a.step, ..GradcheckOptions::for_module(module) };
    if let Some(m) = a.max_coords {
        opts.max_coords = m.max(1);
    }
    let report = gradcheck_module(module, a.seed, &opts)?;
    match a.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report).map_err(CliError::failure)?)?,
        Format::Table => {
            let w = report.groups.iter().map(|g| g.name.len()).max().unwrap_or(5).max(5);
            writeln!(out, "{:<w$} {:>7} {:>7} {:>7} {:>11}", "group", "numel", "checked", "skipped", "rel_error")?;
            for g in &report.groups {
                writeln!(out, "{:<w$} {:>7} {:>7} {:>7} {:>11.3e}", g.name, g.numel, g.checked, g.skipped, g.rel_error)?;
            }
        }
    }
    let worst = report.worst().ok_or_else(|| CliError::failure(anyhow!("no parameter groups checked")))?;
    if report.passes(a.tol) {
        if a.format == Format::Table {
            writeln!(out, "pass: max rel error {:.3e} at {} (tol {:e})", worst.rel_error, worst.name, a.tol)?;
        }
        Ok(())
    } else {
        Err(CliError::failure(anyhow!(
            "gradient check failed: worst offender {} with rel error {:.3e} (tol {:e})",
            worst.name,
            worst.rel_error,
            a.tol
        )))
    }
}

pub fn bench(a: &BenchArgs, out: &mut dyn Write) -> CmdResult {
    let mixers: &[Mixer] = match a.mixer {
        MixerArg::Ssa => &[Mixer::Ssa],
        MixerArg::Mhsa => &[Mixer::Mhsa],
        MixerArg::Both => &[Mixer::Ssa, Mixer::Mhsa],
    };
    let records = mixers
        .iter()
        .map(|&mixer| {
            run_bench(&BenchSpec {
                mixer,
                n: a.n,
                dim: a.dim,
                heads: a.heads,
                sr: a.sr,
                iters: a.iters as usize,
                warmup: a.warmup,
                seed: a.seed,
            })
        })
        .collect::<s2a_core::Result<Vec<BenchRecord>>>()?;
    let text = match a.out {
        BenchOut::Csv => records_to_csv(&records),
        BenchOut::Json => serde_json::to_string_pretty(&records).map_err(CliError::failure)? + "\n",
    };
    match &a.output {
        Some(path) => std::fs::write(path, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Two-block model used by the toy training run.
pub fn toy_training_config(classes: usize) -> VariantConfig {
    VariantConfig::toy([1, 1, 0, 0], classes)
}

pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

pub fn train_toy(a: &TrainToyArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let cfg = toy_training_config(a.classes);
    let mut model = build_variant::<f32>(&cfg, a.seed)?;
    let (images, labels) = gaussian_blobs::<f32>(a.samples, a.classes, a.res, a.seed)?;
    let opts = TrainOptions { steps: a.steps as usize, lr: a.lr, momentum: a.momentum, seed: a.seed };
    let trace = fit(&mut model, &images, &labels, &opts).map_err(|e| match e {
        s2a_core::Error::Numeric(_) => CliError::failure(e),
        other => CliError::from(other),
    })?;
    let csv = loss_trace_csv(&trace);
    match &a.out {
        Some(path) => std::fs::write(path, csv)?,
        None => out.write_all(csv.as_bytes())?,
    }
    if let Some(path) = &a.save {
        model.save(path)?;
    }
    let last = trace.last().copied().unwrap_or(f64::NAN);
    writeln!(err, "{} steps, loss {:.6} -> {:.6}", trace.len(), trace[0], last)?;
    Ok(())
}

pub fn export(a: &ExportArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = a.model.resolve()?;
    let file = std::fs::File::create(&a.out)?;
    let mut w = std::io::BufWriter::new(file);
    let (tensors, params) = match a.dtype {
        DTypeArg::F32 => {
            let m = build_variant::<f32>(&cfg, a.seed)?;
            write_manifest(&m.store, Some(&cfg), &mut w)?;
            (m.store.len(), m.param_count())
        }
        DTypeArg::F64 => {
            let m = build_variant::<f64>(&cfg, a.seed)?;
            write_manifest(&m.store, Some(&cfg), &mut w)?;
            (m.store.len(), m.param_count())
        }
    };
    w.flush()?;
    writeln!(out, "wrote {tensors} tensors ({params} trainable values) to {}", a.out.display())?;
    Ok(())
}
