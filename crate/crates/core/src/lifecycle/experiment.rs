//! Few-shot grid experiments over k and example-selection strategy.

use serde::{Deserialize, Serialize};

use super::eval::{evaluate_prompt, EvalReport};
use super::LifecycleError;
use crate::classify::client::CompletionClient;
use crate::classify::{Label, PromptTemplate, SelectionStrategy};
use crate::exec::Exec;
use crate::goldset::{DatasetSnapshot, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub k_values: Vec<usize>,
    pub strategies: Vec<SelectionStrategy>,
    pub seed: u64,
    pub snapshot_id: String,
    pub template_text: String,
}

impl ExperimentSpec {
    /// Grid cells in the order k values and strategies were listed. k = 0
    /// selects nothing, so it forms a single cell under the first strategy.
    pub fn cells(&self) -> Vec<(usize, SelectionStrategy)> {
        let mut cells = Vec::new();
        for &k in &self.k_values {
            for &s in &self.strategies {
                let cell = (k, if k == 0 { self.strategies[0] } else { s });
                if !cells.contains(&cell) {
                    cells.push(cell);
                }
            }
        }
        cells
    }

    pub fn template(&self, k: usize, strategy: SelectionStrategy) -> PromptTemplate {
        PromptTemplate {
            template_text: self.template_text.clone(),
            k_shot: k,
            selection_strategy: strategy,
            selection_seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub k: usize,
    pub strategy: SelectionStrategy,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    /// Best first: f1 descending, then smaller k, then strategy name.
    pub ranked: Vec<ExperimentCell>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("experiment report serializes")
    }
}

fn check_supply(snapshot: &DatasetSnapshot, k: usize, strategy: SelectionStrategy) -> Result<(), LifecycleError> {
    let train = snapshot.split(Split::Train);
    let ct = train.iter().filter(|g| g.label == Label::Ct).count();
    let enough = match strategy {
        _ if k == 0 => true,
        SelectionStrategy::ClassBalanced => ct >= k.div_ceil(2) && train.len() - ct >= k / 2,
        SelectionStrategy::RandomSeeded | SelectionStrategy::TokenOverlap => train.len() >= k,
    };
    if enough {
        Ok(())
    } else {
        Err(LifecycleError::InsufficientTrainExamples { k, strategy: strategy.name().to_string() })
    }
}

/// Evaluates every grid cell on the snapshot's VALIDATION split. Cells run
/// concurrently under `Exec::Parallel`; the ranking does not depend on the
/// mode as long as the client answers each prompt independently of call
/// order.
pub fn fewshot_experiment(
    spec: &ExperimentSpec,
    snapshot: &DatasetSnapshot,
    client: &dyn CompletionClient,
    exec: Exec,
) -> Result<ExperimentReport, LifecycleError> {
    if spec.k_values.is_empty() || spec.strategies.is_empty() {
        return Err(LifecycleError::EmptyGrid);
    }
    if spec.snapshot_id != snapshot.snapshot_id {
        return Err(LifecycleError::SnapshotMismatch {
            candidate: spec.snapshot_id.clone(),
            incumbent: snapshot.snapshot_id.clone(),
        });
    }
    let cells = spec.cells();
    for &(k, strategy) in &cells {
        spec.template(k, strategy).validate()?;
        check_supply(snapshot, k, strategy)?;
    }
    let reports = exec.try_map(&cells, |&(k, strategy)| {
        let version_id = format!("experiment:k={k}:{}", strategy.name());
        evaluate_prompt(&version_id, &spec.template(k, strategy), snapshot, Split::Validation, client, exec)
    })?;
    let mut ranked: Vec<ExperimentCell> = cells
        .into_iter()
        .zip(reports)
        .map(|((k, strategy), report)| ExperimentCell { k, strategy, report })
        .collect();
    ranked.sort_by(|a, b| {
        b.report.f1.total_cmp(&a.report.f1).then(a.k.cmp(&b.k)).then(a.strategy.name().cmp(b.strategy.name()))
    });
    Ok(ExperimentReport { spec: spec.clone(), ranked })
}
