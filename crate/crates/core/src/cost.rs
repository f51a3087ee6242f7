//! Token-cost accounting over LLM call records.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::llm::CallRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCost {
    pub method: String,
    pub items: usize,
    pub total_tokens: u64,
    /// Mean prompt + completion tokens per item.
    pub c_token: f64,
    /// `c_token` over the largest `c_token` among the compared methods.
    pub c_normed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub methods: Vec<MethodCost>,
}

impl CostReport {
    pub fn get(&self, method: &str) -> Option<&MethodCost> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,items,total_tokens,c_token,c_normed\n");
        for m in &self.methods {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                m.method, m.items, m.total_tokens, m.c_token, m.c_normed
            ));
        }
        s
    }
}

/// Groups records by method and averages their token usage per distinct
/// item. Methods are listed in name order.
pub fn count_tokens(records: &[CallRecord]) -> CostReport {
    let mut by_method: BTreeMap<&str, (BTreeSet<&str>, u64)> = BTreeMap::new();
    for r in records {
        let e = by_method.entry(&r.method).or_default();
        e.0.insert(&r.item_id);
        e.1 += r.prompt_tokens + r.completion_tokens;
    }
    let mut methods: Vec<MethodCost> = by_method
        .into_iter()
        .map(|(method, (items, total))| MethodCost {
            method: method.to_string(),
            items: items.len(),
            total_tokens: total,
            c_token: total as f64 / items.len() as f64,
            c_normed: 0.0,
        })
        .collect();
    let max = methods.iter().map(|m| m.c_token).fold(0.0, f64::max);
    for m in &mut methods {
        m.c_normed = if max > 0.0 { m.c_token / max } else { 0.0 };
    }
    CostReport { methods }
}
