//! Hard-Dice evaluation over modality subsets, reconstructions and the
//! ablation harness.

mod experiments;
mod infer;

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{write_case, Case, Region};
use crate::error::{Error, Result};
use crate::model::{ModalityMask, Network};

pub use experiments::{ablate, AblationReport, Variant};
pub use infer::{argmax_labels, predict_subsets, reconstruct, window_starts};

/// `2|A∩B| / (|A| + |B|)` over the voxels inside `region`; 1 when both are empty.
pub fn hard_dice(pred: &[u8], truth: &[u8], region: Region) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim(format!("prediction has {} voxels, truth {}", pred.len(), truth.len())));
    }
    let (mut both, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (region.contains(p), region.contains(t));
        both += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub mask: ModalityMask,
    /// Mean over cases, in [`Region::ALL`] order.
    pub dice: [f64; 3],
}

/// Mean region Dice per modality subset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub cases: usize,
}

impl EvalTable {
    pub fn row(&self, mask: &ModalityMask) -> Option<&EvalRow> {
        self.rows.iter().find(|r| &r.mask == mask)
    }

    /// Unweighted mean over rows.
    pub fn average(&self) -> [f64; 3] {
        let n = self.rows.len() as f64;
        std::array::from_fn(|r| self.rows.iter().map(|row| row.dice[r]).sum::<f64>() / n)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("modalities,complete,core,enhancing\n");
        let mut line = |label: &str, d: [f64; 3]| {
            writeln!(s, "{label},{:.6},{:.6},{:.6}", d[0], d[1], d[2]).expect("writing to a String")
        };
        for row in &self.rows {
            line(&row.mask.label(), row.dice);
        }
        line("average", self.average());
        s
    }

    /// Aligned table with one ✓/− column per modality.
    pub fn to_markdown(&self, names: &[&str]) -> String {
        let mut header: Vec<String> = names.iter().map(|n| n.to_string()).collect();
        header.extend(Region::ALL.map(|r| r.name().to_string()));
        let mut body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|row| {
                let mut cells: Vec<String> = (0..names.len())
                    .map(|i| if row.mask.is_kept(i) { "✓" } else { "−" }.to_string())
                    .collect();
                cells.extend(row.dice.iter().map(|d| format!("{:.2}", 100.0 * d)));
                cells
            })
            .collect();
        let mut avg: Vec<String> = vec![String::new(); names.len()];
        avg[0] = "average".into();
        avg.extend(self.average().iter().map(|d| format!("{:.2}", 100.0 * d)));
        body.push(avg);
        markdown_table(&header, &body)
    }
}

pub(crate) fn markdown_table(header: &[String], body: &[Vec<String>]) -> String {
    let width: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count(), 3])
                .max()
                .unwrap_or(3)
        })
        .collect();
    let render = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&width)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut s = render(header);
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    s.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for row in body {
        s.push_str(&render(row));
    }
    s
}

/// Mean hard Dice per region for every subset in `subsets`, in that order.
/// With `predictions`, each predicted label volume is written there as an
/// MMVC case named `{case}__{subset}.mmvc`; the stored brain mask is widened
/// to cover predicted tumor so the file stays valid.
pub fn evaluate(
    net: &Network<f32>,
    cases: &[Case],
    subsets: &[ModalityMask],
    predictions: Option<&Path>,
) -> Result<EvalTable> {
    if cases.is_empty() || subsets.is_empty() {
        return Err(Error::contract("evaluation needs at least one case and one subset"));
    }
    let mut sums = vec![[0.0f64; 3]; subsets.len()];
    for case in cases {
        let labels = predict_subsets(net, case, subsets)?;
        for ((pred, sum), mask) in labels.iter().zip(&mut sums).zip(subsets) {
            for (r, region) in Region::ALL.iter().enumerate() {
                sum[r] += hard_dice(pred, case.labels(), *region)?;
            }
            if let Some(dir) = predictions {
                let widened: Vec<bool> = case
                    .brain_mask()
                    .iter()
                    .zip(pred)
                    .map(|(&m, &p)| m || p != 0)
                    .collect();
                let out = Case::new(
                    format!("{}__{}", case.id(), mask.label()),
                    case.classes(),
                    case.volumes().to_vec(),
                    pred.clone(),
                    widened,
                )?;
                write_case(&out, &dir.join(format!("{}.mmvc", out.id())))?;
            }
        }
    }
    let n = cases.len() as f64;
    Ok(EvalTable {
        rows: subsets
            .iter()
            .zip(sums)
            .map(|(mask, s)| EvalRow {
                mask: mask.clone(),
                dice: s.map(|v| v / n),
            })
            .collect(),
        cases: cases.len(),
    })
}

/// [`evaluate`] over all `2^M − 1` non-empty subsets.
pub fn evaluate_combinations(net: &Network<f32>, cases: &[Case], predictions: Option<&Path>) -> Result<EvalTable> {
    evaluate(net, cases, &ModalityMask::all_subsets(net.config().modalities), predictions)
}
