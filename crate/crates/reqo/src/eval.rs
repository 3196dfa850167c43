//! Evaluation of a checkpoint on labeled candidate sets.

use std::collections::BTreeMap;
use std::path::Path;

use reqo_core::estimator::select_min;
use reqo_core::metrics::{
    pairwise_counts, plan_suboptimality, q_error, spearman, subgraph_contributions, top1_and_2,
    top1_or_2, topk_influence_ratio, topk_subgraph_accuracy, total_runtime_ratio,
    ExplanationScores, MetricsReport, Percentiles,
};
use reqo_core::plan::CandidatePlanSet;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::service::{PlanEstimate, Selector};

/// Pairs whose actual runtimes differ by less than this share are not scored
/// for ordering accuracy.
pub const PAIR_GAP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub selector: Selector,
    pub explanations: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            selector: Selector::Integrated,
            explanations: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: String,
    pub candidates: usize,
    pub chosen: usize,
    pub best: usize,
    pub chosen_ms: f64,
    pub best_ms: f64,
    pub suboptimality: f64,
    pub mean_q_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub rows: Vec<QueryRow>,
    pub q_errors: Vec<f64>,
    pub suboptimality: Vec<f64>,
}

#[derive(Default)]
struct ExplanationTally {
    plans: usize,
    top1: usize,
    top2: usize,
    top1_or_2: usize,
    influence1: f64,
    influence2: f64,
    abs_err_sum: f64,
    abs_err_n: usize,
}

impl ExplanationTally {
    fn scores(&self) -> ExplanationScores {
        let p = self.plans.max(1) as f64;
        ExplanationScores {
            plans: self.plans,
            top1_accuracy: self.top1 as f64 / p,
            top2_accuracy: self.top2 as f64 / p,
            top1_or_2_accuracy: self.top1_or_2 as f64 / p,
            top1_influence: self.influence1 / p,
            top2_influence: self.influence2 / p,
            mean_abs_contribution_error: self.abs_err_sum / self.abs_err_n.max(1) as f64,
        }
    }
}

pub fn evaluate(
    ck: &Checkpoint,
    sets: &[&CandidatePlanSet],
    opts: EvalOptions,
) -> Result<Evaluation> {
    if sets.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let mut est_all = Vec::new();
    let mut act_all = Vec::new();
    let mut q_errors = Vec::new();
    let (mut hits, mut compared) = (0, 0);
    let mut selected = Vec::new();
    let mut optimal = Vec::new();
    let mut rows = Vec::new();
    let mut tally = ExplanationTally::default();

    for set in sets {
        let estimates: Vec<PlanEstimate> = ck.estimate_plans(&set.plans)?;
        let actual = set.runtimes();
        let mut qe = Vec::with_capacity(actual.len());
        for (e, &a) in estimates.iter().zip(&actual) {
            qe.push(q_error(e.estimated_ms, a)?);
            est_all.push(e.estimated_ms);
            act_all.push(a);
        }
        let scores: Vec<f64> = estimates.iter().map(|e| opts.selector.score(e)).collect();
        let (h, c) = pairwise_counts(&scores, &actual, PAIR_GAP)?;
        hits += h;
        compared += c;
        let chosen = select_min(&scores).expect("candidate sets are nonempty");
        let best = select_min(&actual).expect("candidate sets are nonempty");
        selected.push(actual[chosen]);
        optimal.push(actual[best]);
        rows.push(QueryRow {
            query_id: set.query_id.clone(),
            candidates: actual.len(),
            chosen,
            best,
            chosen_ms: actual[chosen],
            best_ms: actual[best],
            suboptimality: actual[chosen] / actual[best],
            mean_q_error: qe.iter().sum::<f64>() / qe.len() as f64,
        });
        q_errors.extend(qe);

        if opts.explanations {
            for tree in &set.plans {
                let plan = ck.model.prepare(tree, false)?;
                let contrib = ck.model.subtree_contributions(&plan);
                let mut ec = BTreeMap::new();
                let mut ac = BTreeMap::new();
                for s in &contrib {
                    let a = s.ac.ok_or_else(|| {
                        reqo_core::Error::Label(format!("plan of {} has no labels", set.query_id))
                    })?;
                    tally.abs_err_sum += (a - s.ec).abs();
                    tally.abs_err_n += 1;
                    ec.insert(s.subtree.root_node_id, s.ec);
                    ac.insert(s.subtree.root_node_id, a);
                }
                let pred = subgraph_contributions(tree, &ec)?;
                let act = subgraph_contributions(tree, &ac)?;
                if pred.len() < 2 {
                    continue;
                }
                let (Ok(i1), Ok(i2)) = (
                    topk_influence_ratio(&pred, &act, 1),
                    topk_influence_ratio(&pred, &act, 2),
                ) else {
                    continue;
                };
                tally.plans += 1;
                tally.top1 += topk_subgraph_accuracy(&pred, &act, 1)? as usize;
                tally.top2 += top1_and_2(&pred, &act)? as usize;
                tally.top1_or_2 += top1_or_2(&pred, &act)? as usize;
                tally.influence1 += i1;
                tally.influence2 += i2;
            }
        }
    }
    let subopt = plan_suboptimality(&selected, &optimal)?;
    let report = MetricsReport {
        queries: sets.len(),
        plans: act_all.len(),
        q_error: Percentiles::of(&q_errors)?,
        spearman: spearman(&est_all, &act_all).unwrap_or(0.0),
        pairwise_accuracy: (compared > 0).then(|| hits as f64 / compared as f64),
        total_runtime_ratio: total_runtime_ratio(&selected, &optimal)?,
        plan_suboptimality: Percentiles::of(&subopt)?,
        explanation: opts.explanations.then(|| tally.scores()),
    };
    Ok(Evaluation {
        report,
        rows,
        q_errors,
        suboptimality: subopt,
    })
}

pub fn write_rows_csv(path: &Path, rows: &[QueryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Bar chart of q-error and suboptimality percentiles as SVG.
pub fn plot_percentiles(path: &Path, report: &MetricsReport) -> Result<()> {
    use plotters::prelude::*;

    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
    let root = SVGBackend::new(path, (900, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let panels = root.split_evenly((1, 2));
    let series = [
        ("Q-error", &report.q_error),
        ("Plan suboptimality", &report.plan_suboptimality),
    ];
    for (area, (title, p)) in panels.iter().zip(series) {
        let bars = [
            ("p50", p.median),
            ("p90", p.p90),
            ("p95", p.p95),
            ("p99", p.p99),
            ("max", p.max),
        ];
        let top = bars.iter().map(|b| b.1).fold(1.0, f64::max) * 1.1;
        let mut chart = ChartBuilder::on(area)
            .caption(title, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d((0..bars.len()).into_segmented(), 0.0..top)
            .map_err(|e| plot_err(&e))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_label_formatter(&|x| match x {
                SegmentValue::CenterOf(i) => {
                    bars.get(*i).map(|b| b.0.to_string()).unwrap_or_default()
                }
                _ => String::new(),
            })
            .draw()
            .map_err(|e| plot_err(&e))?;
        chart
            .draw_series(
                Histogram::vertical(&chart)
                    .style(BLUE.mix(0.6).filled())
                    .margin(8)
                    .data(bars.iter().enumerate().map(|(i, b)| (i, b.1))),
            )
            .map_err(|e| plot_err(&e))?;
    }
    root.present().map_err(|e| plot_err(&e))
}
