use std::fmt::Write as _;
use std::path::Path;

use super::{evaluate_combinations, markdown_table, EvalTable};
use crate::data::{Case, Region};
use crate::error::{Error, Result};
use crate::model::FusionKind;
use crate::train::{train, Checkpoint, IterationLog, TrainConfig};

/// The three configurations compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Average fusion, no appearance or reconstruction paths.
    Baseline,
    /// Disentanglement with average fusion.
    Disentangled,
    /// Disentanglement with gated fusion.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Disentangled, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Disentangled => "disentangle",
            Variant::Full => "full",
        }
    }

    /// `base` with the variant's fusion and disentanglement settings.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Baseline => {
                c.network.fusion = FusionKind::Average;
                c.network.disentangle = false;
                c.lambda = 0.0;
                c.beta = 0.0;
            }
            Variant::Disentangled => {
                c.network.fusion = FusionKind::Average;
                c.network.disentangle = true;
            }
            Variant::Full => {
                c.network.fusion = FusionKind::Gated;
                c.network.disentangle = true;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub tables: Vec<(Variant, EvalTable)>,
}

impl AblationReport {
    pub fn table(&self, v: Variant) -> Option<&EvalTable> {
        self.tables.iter().find(|(w, _)| *w == v).map(|(_, t)| t)
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["modalities".to_string()];
        for (v, _) in &self.tables {
            h.extend(Region::ALL.map(|r| format!("{}.{}", v.name(), r.name())));
        }
        h
    }

    fn body(&self, fmt: impl Fn(f64) -> String) -> Vec<Vec<String>> {
        let first = &self.tables[0].1;
        let mut rows: Vec<Vec<String>> = first
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut cells = vec![row.mask.label()];
                for (_, t) in &self.tables {
                    cells.extend(t.rows[i].dice.iter().map(|&d| fmt(d)));
                }
                cells
            })
            .collect();
        let mut avg = vec!["average".to_string()];
        for (_, t) in &self.tables {
            avg.extend(t.average().iter().map(|&d| fmt(d)));
        }
        rows.push(avg);
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header().join(",");
        s.push('\n');
        for row in self.body(|d| format!("{d:.6}")) {
            writeln!(s, "{}", row.join(",")).expect("writing to a String");
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        markdown_table(&self.header(), &self.body(|d| format!("{:.2}", 100.0 * d)))
    }
}

/// Trains every variant on the same data and seed, then evaluates each
/// final checkpoint over all modality subsets. Runs go to `out_dir/<variant>`.
pub fn ablate(
    base: &TrainConfig,
    train_cases: &[Case],
    eval_cases: &[Case],
    out_dir: &Path,
    mut progress: impl FnMut(Variant, &IterationLog),
) -> Result<AblationReport> {
    let mut tables = Vec::with_capacity(3);
    for v in Variant::ALL {
        let config = v.configure(base);
        let summary = train(&config, train_cases, &out_dir.join(v.name()), |l| progress(v, l))?;
        let last = summary
            .checkpoints
            .last()
            .ok_or_else(|| Error::contract("training produced no checkpoint"))?;
        let net = Checkpoint::load(last)?.network()?;
        tables.push((v, evaluate_combinations(&net, eval_cases, None)?));
    }
    Ok(AblationReport { tables })
}
