//! Expected min-cut capacity (EMCC) and min expected-cut capacity (MECC).

use serde::Serialize;

use crate::model::Model;
use crate::network::min_cut;

/// Min-cut of one mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeCut {
    pub mode: usize,
    pub value: f64,
    /// Witness cut, 0-based links.
    pub links: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacitySummary {
    /// `sum_s p_s C(F_s)`.
    pub emcc: f64,
    /// `C(sum_s p_s F_s)`.
    pub mecc: f64,
    pub mecc_cut: Vec<usize>,
    pub per_mode: Vec<ModeCut>,
}

pub fn capacity_summary(model: &Model) -> CapacitySummary {
    let per_mode: Vec<ModeCut> = (0..model.mode_count())
        .map(|s| {
            let (value, cut) = min_cut(&model.net, model.mode_capacities(s));
            ModeCut {
                mode: s,
                value,
                links: cut.links,
            }
        })
        .collect();
    let emcc = per_mode.iter().map(|c| model.p[c.mode] * c.value).sum();
    let (mecc, cut) = min_cut(&model.net, &model.expected_capacities());
    CapacitySummary {
        emcc,
        mecc,
        mecc_cut: cut.links,
        per_mode,
    }
}
