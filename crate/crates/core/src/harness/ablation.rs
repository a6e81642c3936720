use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::eval::{lvip_retrieval, EvalReport};
use super::run::{build_datasets, evaluate_variant, initial_model, run_gfn, run_sft, Datasets};
use crate::error::Result;
use crate::model::ModelState;
use crate::tasks::Category;

/// Accuracy may trail the reference by this much and still count as "no
/// worse".
pub const ORDERING_TOLERANCE: f64 = 0.01;

/// One (variant, seed) cell of the ablation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub overall: Option<f64>,
    pub fluid: Option<f64>,
    pub crystallized: Option<f64>,
    pub visuospatial: Option<f64>,
    pub mental_simulation: Option<f64>,
    pub visual_routines: Option<f64>,
    /// Nearest-option accuracy of the LVIP prediction on the eval set.
    pub lvip_retrieval: Option<f64>,
    /// Error message when the run failed.
    pub failure: Option<String>,
}

impl AblationRow {
    fn from_report(r: &EvalReport, retrieval: f64) -> Self {
        let acc = |c| r.category(c).and_then(|x| x.accuracy);
        AblationRow {
            variant: r.variant,
            seed: r.seed,
            overall: r.overall,
            fluid: acc(Category::Fluid),
            crystallized: acc(Category::Crystallized),
            visuospatial: acc(Category::Visuospatial),
            mental_simulation: acc(Category::MentalSimulation),
            visual_routines: acc(Category::VisualRoutines),
            lvip_retrieval: Some(retrieval),
            failure: None,
        }
    }

    fn failed(variant: Variant, seed: u64, msg: String) -> Self {
        AblationRow {
            variant,
            seed,
            overall: None,
            fluid: None,
            crystallized: None,
            visuospatial: None,
            mental_simulation: None,
            visual_routines: None,
            lvip_retrieval: None,
            failure: Some(msg),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationAggregate {
    pub variant: Variant,
    /// Seeds that completed.
    pub n_seeds: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std: Option<f64>,
    pub lvip_retrieval_mean: Option<f64>,
}

/// `better` is no worse than `worse` minus the tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub better: Variant,
    pub worse: Variant,
    pub holds: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub aggregates: Vec<AblationAggregate>,
    pub ordering: Vec<OrderingCheck>,
}

pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

pub fn summarize(rows: Vec<AblationRow>, variants: &[Variant]) -> AblationResult {
    let aggregates: Vec<AblationAggregate> = variants
        .iter()
        .map(|&v| {
            let xs: Vec<f64> = rows.iter().filter(|r| r.variant == v).filter_map(|r| r.overall).collect();
            let (mean, std) = mean_std(&xs);
            let rs: Vec<f64> = rows.iter().filter(|r| r.variant == v).filter_map(|r| r.lvip_retrieval).collect();
            AblationAggregate { variant: v, n_seeds: xs.len(), mean, std, lvip_retrieval_mean: mean_std(&rs).0 }
        })
        .collect();
    let mean_of = |v: Variant| aggregates.iter().find(|a| a.variant == v).and_then(|a| a.mean);
    let pairs = [(Variant::SftLvip, Variant::SftNoLvip), (Variant::SftLvipGfn, Variant::SftLvip)];
    let ordering = pairs
        .iter()
        .filter(|(b, w)| variants.contains(b) && variants.contains(w))
        .map(|&(better, worse)| OrderingCheck {
            better,
            worse,
            holds: match (mean_of(better), mean_of(worse)) {
                (Some(b), Some(w)) => Some(b >= w - ORDERING_TOLERANCE),
                _ => None,
            },
        })
        .collect();
    AblationResult { rows, aggregates, ordering }
}

/// Trains and evaluates the requested variants for one seed. The GFlowNet
/// variant starts from, and is scored by, the same seed's SFT+LVIP model.
pub fn run_seed(cfg: &RunConfig, variants: &[Variant], mut progress: impl FnMut(&str)) -> Vec<AblationRow> {
    let data = match build_datasets(cfg) {
        Ok(d) => d,
        Err(e) => return variants.iter().map(|&v| AblationRow::failed(v, cfg.seed, e.to_string())).collect(),
    };
    let mut sft_lvip: Option<Result<ModelState, String>> = None;
    let mut rows = Vec::new();
    for &v in variants {
        progress(&format!("seed {} variant {v}", cfg.seed));
        let row = match run_variant(cfg, v, &data, &mut sft_lvip) {
            Ok((r, retrieval)) => AblationRow::from_report(&r, retrieval),
            Err(msg) => AblationRow::failed(v, cfg.seed, msg),
        };
        rows.push(row);
    }
    rows
}

fn run_variant(
    cfg: &RunConfig,
    v: Variant,
    data: &Datasets,
    sft_lvip: &mut Option<Result<ModelState, String>>,
) -> std::result::Result<(EvalReport, f64), String> {
    let s = |e: crate::Error| e.to_string();
    let lvip_model = |cache: &mut Option<Result<ModelState, String>>| -> std::result::Result<ModelState, String> {
        cache.get_or_insert_with(|| run_sft(cfg, cfg.sft.beta, data).map(|o| o.model).map_err(s)).clone()
    };
    match v {
        Variant::Base => {
            let m = initial_model(cfg).map_err(s)?;
            scored(evaluate_variant(cfg, v, &m, &m, &data.eval), &m, &data.eval)
        }
        Variant::SftNoLvip => {
            let m = run_sft(cfg, 0.0, data).map_err(s)?.model;
            scored(evaluate_variant(cfg, v, &m, &m, &data.eval), &m, &data.eval)
        }
        Variant::SftLvip => {
            let m = lvip_model(sft_lvip)?;
            scored(evaluate_variant(cfg, v, &m, &m, &data.eval), &m, &data.eval)
        }
        Variant::SftLvipGfn => {
            let base = lvip_model(sft_lvip)?;
            let g = run_gfn(cfg, &base, data).map_err(s)?;
            scored(evaluate_variant(cfg, v, &g.model, &base, &data.eval), &g.model, &data.eval)
        }
    }
}

fn scored(report: Result<EvalReport>, model: &ModelState, eval: &[crate::tasks::Puzzle]) -> std::result::Result<(EvalReport, f64), String> {
    let report = report.map_err(|e| e.to_string())?;
    let retrieval = lvip_retrieval(model, eval).map_err(|e| e.to_string())?;
    Ok((report, retrieval))
}

/// The ablation matrix over `seeds`. A failed cell is recorded and the
/// remaining cells still run.
pub fn run_ablation(cfg: &RunConfig, seeds: &[u64], variants: &[Variant], mut progress: impl FnMut(&str)) -> AblationResult {
    let mut rows = Vec::new();
    for &seed in seeds {
        let c = RunConfig { seed, ..cfg.clone() };
        rows.extend(run_seed(&c, variants, &mut progress));
    }
    summarize(rows, variants)
}

/// As [`run_ablation`] with one thread per seed. Seeds are independent, so
/// the result equals the sequential one.
pub fn run_ablation_parallel(
    cfg: &RunConfig,
    seeds: &[u64],
    variants: &[Variant],
    progress: impl Fn(&str) + Sync,
) -> AblationResult {
    let progress = &progress;
    let rows = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let c = RunConfig { seed, ..cfg.clone() };
                s.spawn(move || run_seed(&c, variants, progress))
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("ablation worker panicked")).collect()
    });
    summarize(rows, variants)
}
