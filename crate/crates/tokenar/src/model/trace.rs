//! Attention capture for the focus and convergence analyses.

use std::ops::Range;

use crate::error::{Result, TokenArError};

/// What to record: full causal attention rows for every query position in
/// `query_span`, with named key spans attached for later slicing.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSpec {
    pub query_span: Range<usize>,
    pub key_spans: Vec<(String, Range<usize>)>,
}

/// Recorded attention rows. Rows are full causal softmax rows (length
/// `position + 1`), so each sums to one; analyses slice and renormalize over
/// the named key spans.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub n_layers: usize,
    pub n_heads: usize,
    pub query_span: Range<usize>,
    pub key_spans: Vec<(String, Range<usize>)>,
    /// rows[layer][head][qi] is the row for query position
    /// `query_span.start + qi`.
    pub rows: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionTrace {
    pub fn new(n_layers: usize, n_heads: usize, spec: &TraceSpec) -> Self {
        AttentionTrace {
            n_layers,
            n_heads,
            query_span: spec.query_span.clone(),
            key_spans: spec.key_spans.clone(),
            rows: vec![vec![Vec::new(); n_heads]; n_layers],
        }
    }

    /// Appends the row for the next query position; rows must arrive in
    /// ascending query order per (layer, head).
    pub fn push_row(&mut self, layer: usize, head: usize, row: Vec<f64>) {
        self.rows[layer][head].push(row);
    }

    pub fn n_queries(&self) -> usize {
        self.rows
            .first()
            .and_then(|heads| heads.first())
            .map(|rows| rows.len())
            .unwrap_or(0)
    }

    pub fn key_span(&self, name: &str) -> Result<Range<usize>> {
        self.key_spans
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
            .ok_or_else(|| TokenArError::invalid(format!("trace has no key span named {name}")))
    }

    pub fn has_layer(&self, layer: usize) -> bool {
        layer < self.n_layers
    }

    /// Absolute query position of row index `qi`.
    pub fn query_position(&self, qi: usize) -> usize {
        self.query_span.start + qi
    }
}
