//! Anytime and budgeted-batch evaluation over per-exit ensemble logits, plus
//! the line-delimited logit dump that decouples evaluation from training.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::budget::{route, BudgetPolicy, CostProfile};
use crate::error::{Error, Result};
use crate::model::{argmax, confidence, BoostedForwardState, ModelState};
use crate::par;

/// Ensemble logits of a labeled sample set, `logits[exit][sample][class]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTable {
    pub sample_ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub logits: Vec<Vec<Vec<f64>>>,
}

/// One line of the logit dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub sample_id: u64,
    pub label: usize,
    /// `[exit][class]`.
    pub logits: Vec<Vec<f64>>,
}

impl LogitTable {
    pub fn from_forward(state: &BoostedForwardState, labels: &[usize], sample_ids: &[u64]) -> Result<Self> {
        if labels.len() != state.batch_size || sample_ids.len() != state.batch_size {
            return Err(Error::shape(
                format!("{} labels and ids", state.batch_size),
                labels.len(),
            ));
        }
        Ok(LogitTable {
            sample_ids: sample_ids.to_vec(),
            labels: labels.to_vec(),
            logits: state.ensemble_logits.clone(),
        })
    }

    /// Forward `model` over `inputs` and keep the ensemble logits.
    pub fn from_model(model: &ModelState, inputs: &[Vec<f64>], labels: &[usize], sample_ids: &[u64]) -> Result<Self> {
        Self::from_forward(&model.forward_all_exits(inputs)?, labels, sample_ids)
    }

    pub fn num_exits(&self) -> usize {
        self.logits.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = LogitRecord> + '_ {
        (0..self.len()).map(|i| LogitRecord {
            sample_id: self.sample_ids[i],
            label: self.labels[i],
            logits: self.logits.iter().map(|exit| exit[i].clone()).collect(),
        })
    }

    pub fn from_records(records: Vec<LogitRecord>) -> Result<Self> {
        let n_exits = records.first().map_or(0, |r| r.logits.len());
        let classes = records.first().and_then(|r| r.logits.first()).map_or(0, Vec::len);
        let mut table = LogitTable {
            sample_ids: Vec::with_capacity(records.len()),
            labels: Vec::with_capacity(records.len()),
            logits: vec![Vec::with_capacity(records.len()); n_exits],
        };
        for r in records {
            if r.logits.len() != n_exits || r.logits.iter().any(|l| l.len() != classes) {
                return Err(Error::Format {
                    what: "logit dump",
                    detail: format!("sample {} does not have {n_exits}x{classes} logits", r.sample_id),
                });
            }
            if r.label >= classes {
                return Err(Error::Format {
                    what: "logit dump",
                    detail: format!("sample {} label {} out of range", r.sample_id, r.label),
                });
            }
            table.sample_ids.push(r.sample_id);
            table.labels.push(r.label);
            for (n, l) in r.logits.into_iter().enumerate() {
                table.logits[n].push(l);
            }
        }
        Ok(table)
    }
}

pub fn write_logit_dump<W: Write>(table: &LogitTable, mut w: W) -> Result<()> {
    for rec in table.records() {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_logit_dump<R: BufRead>(r: R) -> Result<LogitTable> {
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<LogitRecord>(&line).map_err(|e| Error::Format {
            what: "logit dump",
            detail: format!("line {}: {e}", i + 1),
        })?);
    }
    LogitTable::from_records(records)
}

/// Where and how one sample left the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitTrace {
    pub sample_id: u64,
    /// 1-based exit index.
    pub exit: usize,
    pub confidence: f64,
    pub predicted: usize,
    pub label: usize,
    /// Cumulative cost up to and including the exit.
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EvaluationReport {
    Anytime {
        samples: usize,
        per_exit_accuracy: Vec<f64>,
        cumulative_cost: Vec<f64>,
    },
    BudgetedBatch {
        samples: usize,
        budget: f64,
        accuracy: f64,
        realized_avg_cost: f64,
        exit_histogram: Vec<usize>,
    },
}

fn check_costs(table: &LogitTable, costs: &CostProfile) -> Result<()> {
    if table.num_exits() != costs.num_exits() {
        return Err(Error::shape(
            format!("{} exits in cost profile", costs.num_exits()),
            table.num_exits(),
        ));
    }
    Ok(())
}

/// Accuracy of `argmax F_n` at every exit, paired with cumulative cost.
pub fn anytime_eval(table: &LogitTable, costs: &CostProfile) -> Result<EvaluationReport> {
    check_costs(table, costs)?;
    let n = table.len();
    let per_exit_accuracy = table
        .logits
        .iter()
        .map(|exit| {
            let correct = exit.iter().zip(&table.labels).filter(|(l, &y)| argmax(l) == y).count();
            if n == 0 {
                0.0
            } else {
                correct as f64 / n as f64
            }
        })
        .collect();
    Ok(EvaluationReport::Anytime {
        samples: n,
        per_exit_accuracy,
        cumulative_cost: costs.cumulative.clone(),
    })
}

/// Routes each sample to the first exit whose confidence reaches its
/// threshold (inclusive) and reports accuracy, mean cost and the exit counts.
pub fn budgeted_batch_eval(
    table: &LogitTable,
    policy: &BudgetPolicy,
    costs: &CostProfile,
) -> Result<(EvaluationReport, Vec<ExitTrace>)> {
    check_costs(table, costs)?;
    let n_exits = table.num_exits();
    if policy.thresholds.len() + 1 != n_exits {
        return Err(Error::shape(
            format!("{} thresholds", n_exits - 1),
            policy.thresholds.len(),
        ));
    }
    let traces = par::map_range(table.len(), |i| -> Result<ExitTrace> {
        let mut confs = Vec::with_capacity(n_exits);
        let mut err = None;
        let exit = route(
            |n| {
                let c = confidence(&table.logits[n][i]).unwrap_or_else(|e| {
                    err.get_or_insert(e);
                    f64::NAN
                });
                confs.push(c);
                c
            },
            &policy.thresholds,
            n_exits,
        );
        if let Some(e) = err {
            return Err(e);
        }
        let logits = &table.logits[exit][i];
        let conf = match confs.get(exit) {
            Some(&c) => c,
            None => confidence(logits)?,
        };
        Ok(ExitTrace {
            sample_id: table.sample_ids[i],
            exit: exit + 1,
            confidence: conf,
            predicted: argmax(logits),
            label: table.labels[i],
            cost: costs.cumulative[exit],
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut exit_histogram = vec![0usize; n_exits];
    let mut correct = 0usize;
    for t in &traces {
        exit_histogram[t.exit - 1] += 1;
        correct += usize::from(t.predicted == t.label);
    }
    let samples = traces.len();
    let (accuracy, realized_avg_cost) = if samples == 0 {
        (0.0, 0.0)
    } else {
        (
            correct as f64 / samples as f64,
            histogram_cost(&exit_histogram, costs) / samples as f64,
        )
    };
    Ok((
        EvaluationReport::BudgetedBatch {
            samples,
            budget: policy.tau,
            accuracy,
            realized_avg_cost,
            exit_histogram,
        },
        traces,
    ))
}

/// `Σ_n histogram[n] · cumulative[n]`.
fn histogram_cost(histogram: &[usize], costs: &CostProfile) -> f64 {
    histogram
        .iter()
        .zip(&costs.cumulative)
        .map(|(&h, &c)| h as f64 * c)
        .sum()
}

/// Per-block multiply-adds from the model's layer shapes (block plus head;
/// nonlinearities, pooling and softmax are not counted).
pub fn cost_profile_estimate(model: &ModelState) -> Result<CostProfile> {
    CostProfile::new(model.block_mul_adds().into_iter().map(|c| c as f64).collect())
}

/// Sample ids grouped by exit, optionally restricted to one true class.
pub fn collect_exit_gallery(traces: &[ExitTrace], class_filter: Option<usize>) -> BTreeMap<usize, Vec<u64>> {
    let mut gallery: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for t in traces.iter().filter(|t| class_filter.is_none_or(|c| t.label == c)) {
        gallery.entry(t.exit).or_default().push(t.sample_id);
    }
    gallery
}
