//! Variant × seed matrices: training, CSV rows and a bar plot.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use vpnext::{count_cost, Model, Phase};

use crate::config::RunConfig;
use crate::data::Corpus;
use crate::error::{HarnessError, Result};
use crate::train::train;

pub const CSV_HEADER: &str = "variant,seed,mIoU,trainFlops,inferFlops,params";
pub const THREADS_ENV: &str = "VPNX_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    /// `None` when training diverged.
    pub miou: Option<f64>,
    pub train_flops: u64,
    pub infer_flops: u64,
    /// Parameters of the deployed (inference) model.
    pub params: u64,
    pub failure: Option<String>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VariantSummary {
    pub variant: String,
    pub median_miou: Option<f64>,
    pub mious: Vec<f64>,
    pub failed_seeds: Vec<u64>,
    pub infer_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == name)
    }

    pub fn median(&self, name: &str) -> Option<f64> {
        self.variant(name).and_then(|s| s.median_miou)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Worker cap from `VPNX_THREADS`, else the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_one(cfg: &RunConfig, corpus: &Corpus, variant: &str, seed: u64) -> Result<AblationRow> {
    let model_cfg = cfg.model_for(variant)?;
    let probe = Model::<f32>::new(model_cfg.clone(), seed)?;
    let size = model_cfg.image_size;
    let train_flops = count_cost(&probe, size, Phase::Train)?.flops;
    let infer = count_cost(&probe, size, Phase::Inference)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let (miou, failure, losses) = match train(&model_cfg, corpus, &tc, |_| {}) {
        Ok(out) => (Some(out.best_eval.miou), None, out.losses()),
        Err(e @ HarnessError::NonFinite { .. }) => (None, Some(e.to_string()), Vec::new()),
        Err(e) => return Err(e),
    };
    Ok(AblationRow {
        variant: variant.into(),
        seed,
        miou,
        train_flops,
        infer_flops: infer.flops,
        params: infer.params,
        failure,
        losses,
    })
}

/// Trains every (variant, seed) pair on up to `threads` workers. Rows come
/// back in matrix order regardless of scheduling.
pub fn run_ablation(
    cfg: &RunConfig,
    corpus: &Corpus,
    variants: &[String],
    seeds: &[u64],
    threads: usize,
    on_row: impl Fn(&AblationRow) + Sync,
) -> Result<AblationReport> {
    let jobs: Vec<(&str, u64)> = variants.iter().flat_map(|v| seeds.iter().map(move |&s| (v.as_str(), s))).collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<AblationRow>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(v, s)) = jobs.get(i) else { break };
                let r = run_one(cfg, corpus, v, s);
                if let Ok(row) = &r {
                    on_row(row);
                }
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let rows = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let summary = variants
        .iter()
        .map(|v| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| &r.variant == v).collect();
            let mious: Vec<f64> = mine.iter().filter_map(|r| r.miou).collect();
            VariantSummary {
                variant: v.clone(),
                median_miou: median(&mious),
                failed_seeds: mine.iter().filter(|r| r.miou.is_none()).map(|r| r.seed).collect(),
                infer_flops: mine.first().map_or(0, |r| r.infer_flops),
                mious,
            }
        })
        .collect();
    Ok(AblationReport { rows, summary })
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let miou = r.miou.map_or_else(|| "failed".to_string(), |m| m.to_string());
        writeln!(out, "{},{},{},{},{},{}", r.variant, r.seed, miou, r.train_flops, r.infer_flops, r.params).unwrap();
    }
    out
}

/// Median-mIoU bars with one dot per seed.
pub fn bar_plot_svg(summary: &[VariantSummary]) -> String {
    let (bar, gap, left, top, height) = (48.0, 24.0, 56.0, 24.0, 240.0);
    let width = left + summary.len() as f64 * (bar + gap) + gap;
    let total_h = top + height + 80.0;
    let y = |m: f64| top + height * (1.0 - m.clamp(0.0, 1.0));
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for tick in 0..=5 {
        let m = tick as f64 / 5.0;
        writeln!(s, r##"<line x1="{left}" x2="{width}" y1="{0}" y2="{0}" stroke="#ddd"/>"##, y(m)).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{m:.1}</text>"#, left - 6.0, y(m) + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {0})" text-anchor="middle">mIoU</text>"#, top + height / 2.0).unwrap();
    for (i, v) in summary.iter().enumerate() {
        let x = left + gap + i as f64 * (bar + gap);
        if let Some(m) = v.median_miou {
            writeln!(s, r##"<rect x="{x}" y="{}" width="{bar}" height="{}" fill="#4c78a8"/>"##, y(m), top + height - y(m)).unwrap();
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{m:.3}</text>"#, x + bar / 2.0, y(m) - 4.0).unwrap();
        } else {
            writeln!(s, r##"<text x="{}" y="{}" text-anchor="middle" fill="#c00">failed</text>"##, x + bar / 2.0, top + height - 4.0).unwrap();
        }
        for m in &v.mious {
            writeln!(s, r##"<circle cx="{}" cy="{}" r="2.5" fill="#f58518"/>"##, x + bar / 2.0, y(*m)).unwrap();
        }
        let ly = top + height + 14.0;
        writeln!(s, r#"<text x="{0}" y="{ly}" transform="rotate(35 {0} {ly})">{1}</text>"#, x + 4.0, v.variant).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
