//! Evaluation: metrics reports and the gradient check suite.

use anyhow::{Context, Result};
use drrq::format::read_image;
use drrq::gradcheck::{run_one, run_suite, GradcheckConfig, LOSSES};
use drrq::metrics::{MetricReport, SampleRecord};
use drrq::Error;

use super::Env;
use crate::cli::{GradcheckArgs, MetricsArgs};
use crate::io::{emit, emit_json};

pub fn metrics(args: MetricsArgs) -> Result<()> {
    if args.csv.is_none() && args.pair.is_empty() {
        return Err(Error::Usage("metrics needs --csv and/or --pair".into()).into());
    }
    let records = match &args.csv {
        Some(p) => {
            let mut r =
                csv::Reader::from_path(p).with_context(|| format!("reading {}", p.display()))?;
            r.deserialize::<SampleRecord>()
                .collect::<std::result::Result<Vec<_>, _>>()
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => Vec::new(),
    };
    let pairs = args
        .pair
        .chunks(2)
        .map(|c| -> Result<_> {
            let pred = read_image(&c[0]).with_context(|| format!("reading {}", c[0].display()))?;
            let reference =
                read_image(&c[1]).with_context(|| format!("reading {}", c[1].display()))?;
            Ok((pred.image, reference.image))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::from_records(&records)?.with_image_pairs(&pairs)?;

    if let Some(path) = &args.object_csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["object", "n", "pcc", "icc", "mae"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for o in &report.objects {
            w.write_record([
                o.object.clone(),
                o.n.to_string(),
                opt(o.pcc),
                opt(o.icc),
                o.mae.to_string(),
            ])?;
        }
        emit(Some(path), &String::from_utf8(w.into_inner()?)?)?;
    }
    emit_json(args.out.as_deref(), &report)
}

pub fn gradcheck(args: GradcheckArgs, env: &Env) -> Result<()> {
    let mut cfg = GradcheckConfig {
        instances: args.instances,
        tolerance: args.tolerance,
        ..Default::default()
    };
    if let Some(seed) = env.seed {
        cfg.seed = seed;
    }
    if cfg.instances == 0 {
        return Err(Error::Usage("--instances must be positive".into()).into());
    }
    let reports = match &args.loss {
        Some(name) => vec![run_one(name, &cfg).ok_or_else(|| {
            Error::Usage(format!(
                "unknown loss `{name}`; one of {}",
                LOSSES.join(", ")
            ))
        })??],
        None => run_suite(&cfg)?,
    };
    emit_json(args.out.as_deref(), &reports)?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.loss.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(
            Error::Degenerate(format!("gradient check failed for {}", failed.join(", "))).into(),
        );
    }
    Ok(())
}
