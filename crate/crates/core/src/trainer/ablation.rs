use std::fmt;

use crate::error::Result;
use crate::metrics::FlowMetrics;
use crate::nn::Params;
use crate::splatting::SplatMode;
use crate::synth::SequenceRecord;
use crate::tracker::Model;

use super::{evaluate, train, TrainConfig};

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationRow {
    Full,
    /// Retrained with the named toggle disabled.
    Without(&'static str),
    /// Retrained with another splatting variant.
    Splat(SplatMode),
    /// The full model evaluated with a different memory capacity.
    MemoryLength(usize),
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationRow::Full => write!(f, "full"),
            AblationRow::Without(t) => write!(f, "-{t}"),
            AblationRow::Splat(m) => write!(f, "splat={}", m.name()),
            AblationRow::MemoryLength(l) => write!(f, "memory_len={l}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    pub metrics: FlowMetrics,
}

/// Trains (or reuses `full`) and evaluates every row on `test`. Rows that
/// only change the memory capacity reuse the full model's parameters.
pub fn run_ablation_grid(
    base: &TrainConfig,
    rows: &[AblationRow],
    train_set: &[SequenceRecord],
    test_set: &[SequenceRecord],
    eval_iters: usize,
    full: Option<&Params>,
) -> Result<Vec<AblationResult>> {
    let mut full_params = full.cloned();
    let get_full = |full_params: &mut Option<Params>| -> Result<Params> {
        if full_params.is_none() {
            *full_params = Some(train(base.clone(), train_set)?.0.params);
        }
        Ok(full_params.clone().unwrap())
    };
    let mut results = Vec::with_capacity(rows.len());
    for &row in rows {
        let mut cfg = base.clone();
        let params = match row {
            AblationRow::Full | AblationRow::MemoryLength(_) => get_full(&mut full_params)?,
            AblationRow::Without(toggle) => {
                cfg.model.toggles.disable(toggle)?;
                train(cfg.clone(), train_set)?.0.params
            }
            AblationRow::Splat(mode) if mode == base.model.splat_mode => get_full(&mut full_params)?,
            AblationRow::Splat(mode) => {
                cfg.model.splat_mode = mode;
                train(cfg.clone(), train_set)?.0.params
            }
        };
        let mut model = Model::new(cfg.model.clone())?;
        if let AblationRow::MemoryLength(l) = row {
            model.set_memory_len(l)?;
        }
        let metrics = evaluate(&model, &params, test_set, eval_iters)?;
        results.push(AblationResult { row, metrics });
    }
    Ok(results)
}

/// Plain-text table with one row per result.
pub fn format_table(results: &[AblationResult]) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    let mut s = format!("{:<22} {:>9} {:>9} {:>9} {:>7}\n", "row", "epe_all", "epe_vis", "epe_occ", "oa");
    for r in results {
        let m = &r.metrics;
        s += &format!(
            "{:<22} {:>9.3} {:>9} {:>9} {:>7.3}\n",
            r.row.to_string(),
            m.epe_all,
            opt(m.epe_vis),
            opt(m.epe_occ),
            m.oa
        );
    }
    s
}
