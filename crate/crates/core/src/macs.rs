//! Analytical multiply-accumulate accounting.
//!
//! Counting rules (per image):
//! - convolution: `out_C · (in_C/groups) · k² · H_out · W_out`
//! - linear over `N` tokens: `N · in · out`
//! - attention: `N²·C` for the scores plus `N²·C` for the weighted sum; the
//!   q/k/v and output projections are linear entries
//! - normalization, activations, softmax, additions and bilinear resizing: 0
//!
//! Counts are exact integers. One MAC is one multiply-add.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::exec::Exec;
use crate::model::{ModelConfig, ModelGraph};

pub const COUNTING_RULES: &str = "MACs per image; conv = outC*(inC/groups)*k^2*Hout*Wout; \
linear = N*in*out; attention = N^2*C (scores) + N^2*C (weighted sum); \
norm/activation/softmax/add/resize = 0";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub layer_name: String,
    pub layer_kind: String,
    pub input_dims: Vec<usize>,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub total_macs: u64,
    pub total_params: u64,
}

impl CostReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, kind: &str, input_dims: Vec<usize>, macs: u64, params: u64) {
        self.total_macs += macs;
        self.total_params += params;
        self.entries.push(CostEntry {
            layer_name: name.to_string(),
            layer_kind: kind.to_string(),
            input_dims,
            macs,
            params,
        });
    }

    pub fn entry(&self, name: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.layer_name == name)
    }

    /// Sum of MACs over entries whose name starts with `prefix`.
    pub fn macs_under(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.layer_name.starts_with(prefix))
            .map(|e| e.macs)
            .sum()
    }

    pub fn params_under(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.layer_name.starts_with(prefix))
            .map(|e| e.params)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct WithHeader<'a> {
            counting_rules: &'a str,
            #[serde(flatten)]
            report: &'a CostReport,
        }
        Ok(serde_json::to_string_pretty(&WithHeader {
            counting_rules: COUNTING_RULES,
            report: self,
        })?)
    }
}

/// Per-layer cost of one forward pass at `input_size = (height, width)`.
pub fn count_macs(config: &ModelConfig, input_size: (usize, usize)) -> Result<CostReport> {
    let graph = ModelGraph::new(config)?;
    graph.cost(input_size)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size_h: usize,
    pub size_w: usize,
    pub total_macs: u64,
    pub total_params: u64,
}

/// Total cost for each input size, in the order given.
pub fn size_sweep(config: &ModelConfig, sizes: &[(usize, usize)]) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(config_err("size sweep needs at least one size"));
    }
    let graph = ModelGraph::new(config)?;
    Exec::default()
        .map(sizes.len(), |i| {
            let (h, w) = sizes[i];
            graph.cost((h, w)).map(|r| SweepRow {
                size_h: h,
                size_w: w,
                total_macs: r.total_macs,
                total_params: r.total_params,
            })
        })
        .into_iter()
        .collect()
}

/// CSV with header `size_h,size_w,total_macs,total_params`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("size_h,size_w,total_macs,total_params\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.size_h, r.size_w, r.total_macs, r.total_params));
    }
    out
}
