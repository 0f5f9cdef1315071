//! Attention inspection export.
//!
//! For every scored instance this produces the prediction together with
//! the quantities that explain it: each metapath's fused weight, the
//! winning metapath, and the interaction elements that received the most
//! node-level attention under it. Rows serialize to CSV (one `beta:<path>`
//! column per metapath, then `top_k` triples of `pair_index`, `slot_index`,
//! `alpha`) so the output drops straight into a spreadsheet or pandas.

use std::io::{self, Write};

use thiserror::Error;

use nirec_tensor::Tape;

use crate::ingest::{Dataset, Instance};
use crate::model::{InstancePaths, Model, ModelError};
use crate::sampler::SampleStore;

/// Errors from computing or writing the export.
#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One interaction element and the node-level attention it received,
/// averaged over the valid elements of the winning metapath.
#[derive(Debug, Clone, PartialEq)]
pub struct TopElement {
    /// Source-side walk index of the element's pair.
    pub source_walk: u32,
    /// Target-side walk index of the element's pair.
    pub target_walk: u32,
    /// Position within the pair's interaction vector.
    pub slot: usize,
    /// Mean attention received from the valid elements.
    pub weight: f64,
}

/// Everything exported for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    /// Position within the exported instance slice.
    pub instance: usize,
    /// Raw user identifier (dense index when no name is known).
    pub user: String,
    /// Raw item identifier (dense index when no name is known).
    pub item: String,
    pub label: f64,
    pub score: f64,
    /// Fused path weights, config order; sums to one.
    pub path_weights: Vec<f64>,
    /// Label of the highest-weighted metapath.
    pub dominant_path: String,
    /// Strongest elements of the dominant path, best first.
    pub top_elements: Vec<TopElement>,
}

/// Scores `instances` and collects attention rows. `top_k` bounds how many
/// elements are reported per instance; fewer appear when a neighborhood
/// has fewer valid elements.
pub fn attention_rows(
    model: &Model,
    dataset: &Dataset,
    instances: &[Instance],
    store: &SampleStore,
    top_k: usize,
) -> Result<Vec<AttentionRow>, ExportError> {
    let user_names = &dataset.id_maps[dataset.user_type.0 as usize];
    let item_names = &dataset.id_maps[dataset.item_type.0 as usize];
    let labels = &model.config().metapath_labels;
    let mut rows = Vec::with_capacity(instances.len());
    for (n, inst) in instances.iter().enumerate() {
        let paths = InstancePaths::from_store(store, inst.user, inst.item)
            .map_err(ModelError::from)?;
        let tape = Tape::new();
        let trace = model.forward(&tape, &paths)?;
        let score = trace.pred.value().item().map_err(ModelError::from)?;
        let beta = trace.beta.value().data().to_vec();

        let dominant = beta
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .expect("at least one metapath");

        let mask = &trace.element_masks[dominant];
        let pairs = &trace.pairs[dominant];
        let slots = mask.len() / pairs.len();
        let alpha = trace.node[dominant].alpha.value();
        let m = mask.len();
        debug_assert_eq!(alpha.shape(), [m, m]);
        let valid_rows: Vec<usize> = (0..m).filter(|&r| mask[r]).collect();
        let mut received: Vec<(usize, f64)> = (0..m)
            .filter(|&c| mask[c])
            .map(|c| {
                let total: f64 = valid_rows
                    .iter()
                    .map(|&r| alpha.data()[r * m + c])
                    .sum();
                (c, total / valid_rows.len() as f64)
            })
            .collect();
        received.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let top_elements = received
            .into_iter()
            .take(top_k)
            .map(|(c, weight)| {
                let (source_walk, target_walk) = pairs[c / slots];
                TopElement {
                    source_walk,
                    target_walk,
                    slot: c % slots,
                    weight,
                }
            })
            .collect();

        rows.push(AttentionRow {
            instance: n,
            user: user_names
                .name(inst.user)
                .map_or_else(|| inst.user.to_string(), str::to_string),
            item: item_names
                .name(inst.item)
                .map_or_else(|| inst.item.to_string(), str::to_string),
            label: inst.label,
            score,
            path_weights: beta,
            dominant_path: labels[dominant].clone(),
            top_elements,
        });
    }
    Ok(rows)
}

/// Quotes a CSV field when it contains a delimiter, quote, or newline.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `rows` as CSV. After the identity, label, score, and `beta:<label>`
/// columns come `top_k` triples of `pair_index` (the element's walk pair,
/// decoded as `source:target`), `slot_index`, and `alpha`, all taken from the
/// row's dominant metapath; short rows leave trailing element cells empty.
pub fn write_csv(
    out: &mut impl Write,
    rows: &[AttentionRow],
    metapath_labels: &[String],
    top_k: usize,
) -> io::Result<()> {
    let mut header = vec![
        "instance_id".to_string(),
        "user_raw_id".to_string(),
        "item_raw_id".to_string(),
        "label".to_string(),
        "score".to_string(),
    ];
    for label in metapath_labels {
        header.push(format!("beta:{label}"));
    }
    for e in 1..=top_k {
        header.push(format!("pair_index_{e}"));
        header.push(format!("slot_index_{e}"));
        header.push(format!("alpha_{e}"));
    }
    writeln!(out, "{}", header.join(","))?;

    for row in rows {
        let mut fields = vec![
            row.instance.to_string(),
            csv_field(&row.user),
            csv_field(&row.item),
            row.label.to_string(),
            row.score.to_string(),
        ];
        for w in &row.path_weights {
            fields.push(w.to_string());
        }
        for e in 0..top_k {
            match row.top_elements.get(e) {
                Some(el) => {
                    fields.push(format!("{}:{}", el.source_walk, el.target_walk));
                    fields.push(el.slot.to_string());
                    fields.push(el.weight.to_string());
                }
                None => fields.extend(std::iter::repeat_n(String::new(), 3)),
            }
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}
