//! Trains and evaluates every variant on the same split.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::Result;

use super::config::{ModelConfig, TrainConfig, Variant};
use super::model::Model;
use super::pq::PqResult;
use super::train::{evaluate, Sample, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct VariantReport {
    pub variant: Variant,
    /// `None` when training diverged or failed.
    pub result: Option<PqResult>,
    pub twin_rate: Option<f64>,
    pub train_seconds: f64,
    pub error: Option<String>,
    pub final_loss: Option<f64>,
}

fn run_variant(
    variant: Variant,
    base: &ModelConfig,
    tcfg: &TrainConfig,
    train: &[Sample],
    test: &[Sample],
) -> VariantReport {
    let start = Instant::now();
    let outcome = (|| -> Result<(Model, Option<f64>)> {
        let mut trainer = Trainer::new(Model::new(base.clone().with_variant(variant))?, tcfg.clone());
        for _ in 0..tcfg.epochs {
            trainer.train_epoch(train)?;
        }
        let last = trainer.history.last().map(|r| r.total);
        Ok((trainer.model, last))
    })();
    let train_seconds = start.elapsed().as_secs_f64();
    match outcome.and_then(|(m, last)| evaluate(&m, test).map(|e| (e, last))) {
        Ok((e, last)) => VariantReport {
            variant,
            result: Some(e.pq),
            twin_rate: e.twin_rate,
            train_seconds,
            error: None,
            final_loss: last,
        },
        Err(err) => VariantReport {
            variant,
            result: None,
            twin_rate: None,
            train_seconds,
            error: Some(err.to_string()),
            final_loss: None,
        },
    }
}

/// Runs `variants` (the baseline is always included, first). With
/// `parallel`, each variant trains on its own thread; training inside a
/// variant stays single-threaded and seeded, so results do not depend on
/// scheduling.
pub fn run_ablation(
    base: &ModelConfig,
    tcfg: &TrainConfig,
    variants: &[Variant],
    train: &[Sample],
    test: &[Sample],
    parallel: bool,
) -> Vec<VariantReport> {
    let mut list = vec![Variant::Baseline];
    list.extend(variants.iter().copied().filter(|&v| v != Variant::Baseline));
    list.dedup();
    if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> =
                list.iter().map(|&v| s.spawn(move || run_variant(v, base, tcfg, train, test))).collect();
            handles.into_iter().map(|h| h.join().expect("variant thread panicked")).collect()
        })
    } else {
        list.iter().map(|&v| run_variant(v, base, tcfg, train, test)).collect()
    }
}

pub const REPORT_HEADER: &str = "variant,pq,sq,rq,pq_th,pq_st,train_seconds";

/// One CSV row; failed variants carry `nan` metrics.
pub fn report_row(name: &str, r: Option<&PqResult>, train_seconds: f64) -> String {
    match r {
        Some(r) => format!(
            "{name},{:.4},{:.4},{:.4},{:.4},{:.4},{train_seconds:.4}",
            r.pq, r.sq, r.rq, r.pq_things, r.pq_stuff
        ),
        None => format!("{name},nan,nan,nan,nan,nan,{train_seconds:.4}"),
    }
}

pub fn report_csv(rows: &[VariantReport]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", report_row(r.variant.name(), r.result.as_ref(), r.train_seconds));
    }
    s
}

/// `variant,twin_rate,final_loss,error` companion table.
pub fn twin_csv(rows: &[VariantReport]) -> String {
    let mut s = String::from("variant,twin_rate,final_loss,error\n");
    for r in rows {
        let rate = r.twin_rate.map_or("nan".into(), |v| format!("{v:.4}"));
        let loss = r.final_loss.map_or("nan".into(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "{},{rate},{loss},{}", r.variant.name(), r.error.as_deref().unwrap_or(""));
    }
    s
}
