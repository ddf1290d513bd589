//! Per-client test evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{self, ModelConfig};
use crate::graph::{GraphSample, Standardizer, TaskType};
use crate::metrics::{mean_absolute_error, roc_auc};

use super::client::ClientState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `None` for a client whose head covers no scoreable task.
    pub per_client: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Scores every client on the unmasked test set over the tasks its head
/// covers. ROC-AUC skips tasks lacking one class in the test labels;
/// regression predictions are mapped back through `standardizer`.
pub fn evaluate(
    states: &[ClientState],
    test: &[GraphSample],
    task_type: TaskType,
    model: &ModelConfig,
    standardizer: Option<&Standardizer>,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let s_global = test[0].label.len();
    if task_type == TaskType::Classification {
        let scoreable = (0..s_global).any(|t| {
            let labels: Vec<bool> = test
                .iter()
                .filter(|s| s.label_mask[t])
                .map(|s| s.label[t] == 1.0)
                .collect();
            labels.iter().any(|l| *l) && labels.iter().any(|l| !*l)
        });
        if !scoreable {
            return Err(Error::Evaluation(
                "no task has both classes in the test set".into(),
            ));
        }
    }
    let per_client = states
        .par_iter()
        .map(|s| client_score(s, test, task_type, model, standardizer))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<f64> = per_client.iter().flatten().copied().collect();
    let mean = if scored.is_empty() {
        None
    } else {
        Some(scored.iter().sum::<f64>() / scored.len() as f64)
    };
    Ok(Evaluation { per_client, mean })
}

fn client_score(
    state: &ClientState,
    test: &[GraphSample],
    task_type: TaskType,
    model: &ModelConfig,
    standardizer: Option<&Standardizer>,
) -> Result<Option<f64>> {
    let preds = test
        .iter()
        .map(|s| gnn::predict(s, &state.params, model))
        .collect::<Result<Vec<_>>>()?;
    let mut per_task = Vec::new();
    for (c, &t) in state.params.task_ids.iter().enumerate() {
        let rows: Vec<usize> = (0..test.len()).filter(|&i| test[i].label_mask[t]).collect();
        if rows.is_empty() {
            continue;
        }
        match task_type {
            TaskType::Classification => {
                let scores: Vec<f64> = rows.iter().map(|&i| preds[i][c]).collect();
                let labels: Vec<bool> = rows.iter().map(|&i| test[i].label[t] == 1.0).collect();
                if let Some(a) = roc_auc(&scores, &labels)? {
                    per_task.push(a);
                }
            }
            TaskType::Regression => {
                let p: Vec<f64> = rows
                    .iter()
                    .map(|&i| standardizer.map_or(preds[i][c], |st| st.invert(t, preds[i][c])))
                    .collect();
                let y: Vec<f64> = rows.iter().map(|&i| test[i].label[t]).collect();
                per_task.push(mean_absolute_error(&p, &y)?);
            }
        }
    }
    if per_task.is_empty() {
        return Ok(None);
    }
    let v = per_task.iter().sum::<f64>() / per_task.len() as f64;
    if !v.is_finite() {
        return Err(Error::Evaluation(format!(
            "client {} metric is {v}",
            state.id
        )));
    }
    Ok(Some(v))
}
