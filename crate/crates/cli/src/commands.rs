use std::fmt;
use std::path::Path;

use anyhow::{bail, Context};
use cps_core::analysis::sweep;
use cps_core::constraints::{extract, Feature};
use cps_core::denoiser::{train, train_from, Denoiser};
use cps_core::metrics::{evaluate, pair_metrics_csv};
use cps_core::sampler::{
    batch, cop_project_baseline, cps_projector, cps_sample_with, ddim_sample, guided_sample, trace_csv, CopSeed,
    GammaRule,
};
use cps_core::series::{denormalize_series, format_csv, generate_waveforms, normalize, normalize_series, read_csv};
use cps_core::{ConstraintSet, Dataset, LearnedDenoiser, Normalization, SampleReport, TimeSeries};
use serde::Serialize;

use crate::config::{CopSource, Method, RunConfig};

/// A verification run whose assertions did not hold.
#[derive(Debug)]
pub struct VerifyFailed(pub String);

impl fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> anyhow::Result<Dataset> {
    read_csv(path).with_context(|| format!("reading {}", path.display()))
}

fn dataset(samples: Vec<TimeSeries>) -> anyhow::Result<Dataset> {
    Ok(Dataset::new(samples)?)
}

fn normalized(ds: &Dataset, norm: Option<&Normalization>) -> Vec<TimeSeries> {
    match norm {
        Some(n) => ds.samples().iter().map(|s| normalize_series(s, n)).collect(),
        None => ds.samples().to_vec(),
    }
}

pub fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let sizes = cfg.data.splits()?;
    let d = &cfg.data;
    let all = generate_waveforms(sizes.iter().sum(), d.horizon, (d.amp_min, d.amp_max), d.seed)?;
    for (name, part) in ["train", "val", "test"].iter().zip(all.split(&sizes)?) {
        let path = cfg.out(&format!("{name}.csv"));
        write(&path, &format_csv(&part))?;
        log::info!("wrote {} samples to {}", part.len(), path.display());
    }
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let raw = read(&cfg.train_data())?;
    let ckpt = cfg.checkpoint();
    let training = &cfg.denoiser.training;
    let (model, log) = if cfg.denoiser.resume {
        let mut model = LearnedDenoiser::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        let norm = model.normalization().cloned();
        let mut ds = dataset(normalized(&raw, norm.as_ref()))?;
        if let Some(n) = norm {
            ds = ds.with_normalization(n)?;
        }
        let log = train_from(&mut model, &ds, training, training.iterations)?;
        (model, log)
    } else {
        let schedule = cfg.schedule.build()?;
        train(&normalize(&raw)?, &schedule, training)?
    };
    model.save(&ckpt).with_context(|| format!("saving {}", ckpt.display()))?;
    write(&cfg.out("loss.csv"), &log.to_csv())?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        log::info!(
            "iterations {}..{}: smoothed loss {:.4} -> {:.4}; checkpoint {}",
            first.iteration,
            last.iteration,
            first.smoothed,
            last.smoothed,
            ckpt.display()
        );
    }
    Ok(())
}

fn parse_features(names: &[String]) -> anyhow::Result<Vec<Feature>> {
    names
        .iter()
        .map(|n| n.parse::<Feature>().map_err(anyhow::Error::from))
        .collect()
}

/// The constraint set for sample `i`: features extracted from its reference plus
/// any explicit constraints.
fn constraint_set(cfg: &RunConfig, features: &[Feature], reference: Option<&TimeSeries>) -> anyhow::Result<ConstraintSet> {
    let mut constraints = match reference {
        Some(r) if !features.is_empty() => extract(r, features, cfg.constraints.threshold)?.constraints,
        _ => Vec::new(),
    };
    constraints.extend(cfg.constraints.explicit.iter().cloned());
    Ok(ConstraintSet::new(constraints).with_budget(cfg.constraints.budget))
}

#[derive(Serialize)]
struct SampleRecord {
    index: usize,
    violation_total: f64,
    per_constraint: Vec<f64>,
    feasible: bool,
    converged: bool,
    wall_time_secs: f64,
}

#[derive(Serialize)]
struct SampleSummary {
    method: Method,
    count: usize,
    constraints_per_sample: Vec<usize>,
    violation_rate: Option<f64>,
    mean_violation: Option<f64>,
    all_converged: bool,
    wall_time_secs: f64,
    samples: Vec<SampleRecord>,
}

pub fn sample_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let method = cfg.sampler.method;
    let features = parse_features(&cfg.constraints.features)?;
    let constrained = !features.is_empty() || !cfg.constraints.explicit.is_empty();
    if method == Method::Cps && !constrained {
        bail!(
            "method \"cps\" needs at least one constraint (set constraints.features or constraints.explicit); \
             use method \"ddim\" for unconstrained sampling"
        );
    }
    if matches!(method, Method::Guided | Method::Cop) && !constrained {
        bail!("method {method:?} needs at least one constraint");
    }
    if cfg.sampler.count == 0 {
        bail!("sampler.count must be positive");
    }

    let ckpt = cfg.checkpoint();
    let model = LearnedDenoiser::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let norm = model.normalization().cloned();
    let (channels, horizon) = model.shape();

    let refs: Option<Vec<TimeSeries>> = if features.is_empty() {
        None
    } else {
        let path = cfg.references();
        let raw = read(&path)?;
        if raw.shape() != (channels, horizon) {
            bail!(
                "references in {} have shape {:?} but the model expects {:?}",
                path.display(),
                raw.shape(),
                (channels, horizon)
            );
        }
        Some(normalized(&raw, norm.as_ref()))
    };
    let reference = |i: usize| refs.as_ref().map(|r| &r[i % r.len()]);
    let sets = (0..cfg.sampler.count)
        .map(|i| {
            let set = constraint_set(cfg, &features, reference(i))?;
            set.validate(channels, horizon)?;
            Ok(set)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let train_set = if method == Method::Cop && cfg.sampler.cop_seed == CopSource::Dataset {
        Some(dataset(normalized(&read(&cfg.train_data())?, norm.as_ref()))?)
    } else {
        None
    };
    let scfg = cfg.sampler.sampler();
    let cop_gamma = cfg.sampler.cop_gamma.unwrap_or(model.schedule().gamma_clip());

    let reports = batch(cfg.sampler.count, |i| {
        let set = &sets[i as usize];
        match method {
            Method::Ddim => ddim_sample(&model, &scfg, i).map(|mut r| {
                if constrained {
                    r.violation_total = set.violation(&r.sample);
                    r.per_constraint = set.per_constraint_violation(&r.sample);
                }
                r
            }),
            Method::Cps => {
                let p = cps_projector(&model, set, &scfg)?;
                cps_sample_with(&model, Some(&p), GammaRule::Exponential, &scfg, i, Some(set))
            }
            Method::Guided => guided_sample(&model, set, &scfg, i),
            Method::Cop => {
                let source = match &train_set {
                    Some(ds) => CopSeed::Dataset(ds),
                    None => CopSeed::Generated(&model),
                };
                cop_project_baseline(source, set, cop_gamma, &scfg, i)
            }
        }
    })?;

    write_samples(cfg, &reports, norm.as_ref(), refs.as_deref())?;
    let summary = summarize(method, &reports, &sets, constrained);
    write(&cfg.out("report.json"), &serde_json::to_string_pretty(&summary)?)?;
    if scfg.trace {
        for (i, r) in reports.iter().enumerate() {
            if let Some(t) = &r.trace {
                write(&cfg.out(&format!("traces/sample_{i}.csv")), &trace_csv(t))?;
            }
        }
    }
    match summary.violation_rate {
        Some(rate) => log::info!("{} samples, violation rate {rate}", reports.len()),
        None => log::info!("{} samples", reports.len()),
    }
    Ok(())
}

fn write_samples(
    cfg: &RunConfig,
    reports: &[SampleReport],
    norm: Option<&Normalization>,
    refs: Option<&[TimeSeries]>,
) -> anyhow::Result<()> {
    let samples: Vec<TimeSeries> = reports.iter().map(|r| r.sample.clone()).collect();
    if let Some(n) = norm {
        let data: Vec<TimeSeries> = samples.iter().map(|s| denormalize_series(s, n)).collect();
        write(&cfg.out("samples_data_units.csv"), &format_csv(&dataset(data)?))?;
    }
    write(&cfg.out("samples.csv"), &format_csv(&dataset(samples)?))?;
    if let Some(r) = refs {
        let paired: Vec<TimeSeries> = (0..reports.len()).map(|i| r[i % r.len()].clone()).collect();
        write(&cfg.out("references.csv"), &format_csv(&dataset(paired)?))?;
    }
    Ok(())
}

fn summarize(method: Method, reports: &[SampleReport], sets: &[ConstraintSet], constrained: bool) -> SampleSummary {
    let n = reports.len() as f64;
    let (violation_rate, mean_violation) = if constrained {
        (
            Some(reports.iter().filter(|r| !r.feasible()).count() as f64 / n),
            Some(reports.iter().map(|r| r.per_constraint.iter().sum::<f64>()).sum::<f64>() / n),
        )
    } else {
        (None, None)
    };
    SampleSummary {
        method,
        count: reports.len(),
        constraints_per_sample: sets.iter().map(ConstraintSet::len).collect(),
        violation_rate,
        mean_violation,
        all_converged: reports.iter().all(|r| r.converged),
        wall_time_secs: reports.iter().map(|r| r.wall_time_secs).sum(),
        samples: reports
            .iter()
            .enumerate()
            .map(|(index, r)| SampleRecord {
                index,
                violation_total: r.violation_total,
                per_constraint: r.per_constraint.clone(),
                feasible: r.feasible(),
                converged: r.converged,
                wall_time_secs: r.wall_time_secs,
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct EvalSummary {
    #[serde(flatten)]
    metrics: cps_core::metrics::MetricReport,
    violation_rate_per_reference: Option<f64>,
}

pub fn eval_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let gen = read(&cfg.generated())?;
    let refs = read(&cfg.paired_references())?;
    let real = match &cfg.metrics.real {
        Some(p) => read(p)?,
        None => refs.clone(),
    };
    let (channels, horizon) = gen.shape();
    let explicit = (!cfg.constraints.explicit.is_empty())
        .then(|| ConstraintSet::new(cfg.constraints.explicit.clone()).with_budget(cfg.constraints.budget));
    if let Some(set) = &explicit {
        set.validate(channels, horizon)?;
    }
    let (report, mut rows) = evaluate(gen.samples(), refs.samples(), explicit.as_ref(), Some(real.samples()))?;

    // constraints extracted from each paired reference
    let features = parse_features(&cfg.constraints.features)?;
    let per_reference = if features.is_empty() {
        None
    } else {
        let mut infeasible = 0;
        for (row, (g, r)) in rows.iter_mut().zip(gen.samples().iter().zip(refs.samples())) {
            let set = constraint_set(cfg, &features, Some(r))?;
            set.validate(channels, horizon)?;
            let v: f64 = set.per_constraint_violation(g).iter().sum();
            infeasible += usize::from(v > 0.0);
            row.violation = Some(v);
        }
        Some(infeasible as f64 / rows.len() as f64)
    };
    write(&cfg.out("pair_metrics.csv"), &pair_metrics_csv(&rows))?;
    let summary = EvalSummary {
        metrics: report,
        violation_rate_per_reference: per_reference,
    };
    write(&cfg.out("metrics.json"), &serde_json::to_string_pretty(&summary)?)?;
    log::info!(
        "{} pairs: DTW median {:.4}, SSIM mean {:.4}",
        summary.metrics.samples,
        summary.metrics.dtw_median,
        summary.metrics.ssim_mean
    );
    Ok(())
}

#[derive(Serialize)]
struct VerifySummary {
    passed: bool,
    bound_failures: usize,
    cases: usize,
    medians: Vec<(f64, f64)>,
    medians_non_increasing: bool,
    norm_failures: Vec<String>,
    min_norm_margin: f64,
}

pub fn verify_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let report = sweep(&cfg.analysis)?;
    write(&cfg.out("theorem_report.csv"), &report.to_csv())?;
    let summary = VerifySummary {
        passed: report.passed(),
        bound_failures: report.bound_failures(),
        cases: report.rows.len(),
        medians: report.medians.clone(),
        medians_non_increasing: report.medians_non_increasing(),
        norm_failures: report.norm_failures.clone(),
        min_norm_margin: report.min_norm_margin,
    };
    write(&cfg.out("verify.json"), &serde_json::to_string_pretty(&summary)?)?;
    for (k, m) in &summary.medians {
        log::info!("k = {k}: median error {m:.3e}");
    }
    if !summary.passed {
        let mut why = Vec::new();
        if summary.bound_failures > 0 {
            why.push(format!("{} of {} cases exceed the bound", summary.bound_failures, summary.cases));
        }
        if !summary.medians_non_increasing {
            why.push("median error increases with k".to_string());
        }
        if let Some(first) = summary.norm_failures.first() {
            why.push(format!("{} norm check failures, first: {first}", summary.norm_failures.len()));
        }
        return Err(VerifyFailed(why.join("; ")).into());
    }
    log::info!("all {} cases within the bound", summary.cases);
    Ok(())
}
