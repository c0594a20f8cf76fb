//! Static parameter and operation counting over a [`NetGraph`].
//!
//! One multiply-accumulate counts as one FLOP and Madds are twice that. By
//! default only conv, fc and the enhancement block's excitation/scaling cost
//! anything; the options switch on the cheap layers too.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{infer_shapes, LayerKind, NetGraph, GRAPH_INPUT};
use crate::ops::conv_param_count;
use crate::sce::sce_param_count;

pub const BYTES_PER_PARAM: u64 = 4;
const BYTES_PER_MB: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostOptions {
    /// One MAC per element for batch norm.
    pub count_bn: bool,
    /// One op per window element for pooling (including the pyramid).
    pub count_pool: bool,
    /// One op per element for activations, adds and upsampling.
    pub count_elementwise: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conventions {
    pub flop: String,
    pub bytes_per_param: u64,
    pub bn_counted: bool,
    pub pool_counted: bool,
    pub elementwise_counted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: String,
    pub kind: String,
    pub out_shape: Vec<usize>,
    pub params: u64,
    pub flops: u64,
    pub madds: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub flops: u64,
    pub madds: u64,
    pub size_bytes: u64,
}

impl CostTotals {
    pub fn size_mb(&self) -> f64 {
        self.size_bytes as f64 / BYTES_PER_MB
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub input: Vec<usize>,
    pub layers: Vec<LayerCost>,
    pub totals: CostTotals,
    pub conventions: Conventions,
}

pub fn analyze(graph: &NetGraph, input: &[usize]) -> Result<CostReport> {
    analyze_with(graph, input, CostOptions::default())
}

pub fn analyze_with(graph: &NetGraph, input: &[usize], opts: CostOptions) -> Result<CostReport> {
    let shapes = infer_shapes(graph, input)?;
    let in_shape = |id: &str| -> &[usize] {
        if id == GRAPH_INPUT {
            input
        } else {
            &shapes[id]
        }
    };
    let mut layers = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let out = &shapes[&layer.id];
        let first = in_shape(&layer.inputs[0]);
        let cin = *first.last().expect("rank ≥ 1");
        let out_elems: usize = out.iter().product();
        let spatial = |s: &[usize]| s[0] * s[1];
        let (params, flops) = match &layer.kind {
            LayerKind::Conv {
                filters,
                kernel,
                groups,
                bias,
                ..
            } => {
                let p = conv_param_count(*kernel, cin, *filters, *groups, *bias);
                let macs = kernel * kernel * (cin / groups) * filters;
                (p, spatial(out) * macs)
            }
            LayerKind::Fc { units, bias } => {
                let n: usize = first.iter().product();
                (n * units + if *bias { *units } else { 0 }, n * units)
            }
            LayerKind::BatchNorm { .. } => (2 * cin, if opts.count_bn { out_elems } else { 0 }),
            LayerKind::Sce {
                pyramid,
                reduction,
                bias,
            } => {
                let wide = cin * pyramid.len();
                let hidden = wide / reduction;
                let mut f = 2 * wide * hidden + out_elems;
                if opts.count_pool {
                    f += pyramid.iter().filter(|&&k| k > 1).map(|k| k * k).sum::<usize>() * spatial(out) * cin;
                    f += out_elems;
                }
                (sce_param_count(cin, pyramid.len(), *reduction, *bias), f)
            }
            LayerKind::MaxPool { kernel, .. } if opts.count_pool => (0, out_elems * kernel * kernel),
            LayerKind::GlobalAvgPool if opts.count_pool => (0, first.iter().product()),
            LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Softmax | LayerKind::Add | LayerKind::Upsample2x
                if opts.count_elementwise =>
            {
                (0, out_elems)
            }
            _ => (0, 0),
        };
        layers.push(LayerCost {
            id: layer.id.clone(),
            kind: layer.kind.name().to_string(),
            out_shape: out.clone(),
            params: params as u64,
            flops: flops as u64,
            madds: 2 * flops as u64,
        });
    }
    let params: u64 = layers.iter().map(|l| l.params).sum();
    let flops: u64 = layers.iter().map(|l| l.flops).sum();
    Ok(CostReport {
        model: graph.name.clone(),
        input: input.to_vec(),
        layers,
        totals: CostTotals {
            params,
            flops,
            madds: 2 * flops,
            size_bytes: BYTES_PER_PARAM * params,
        },
        conventions: Conventions {
            flop: "mac".into(),
            bytes_per_param: BYTES_PER_PARAM,
            bn_counted: opts.count_bn,
            pool_counted: opts.count_pool,
            elementwise_counted: opts.count_elementwise,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Parameter count.
    Params,
    /// Model size in MB (10⁶ bytes).
    SizeMb,
    Flops,
    Madds,
}

impl Metric {
    pub fn of(self, t: &CostTotals) -> f64 {
        match self {
            Metric::Params => t.params as f64,
            Metric::SizeMb => t.size_mb(),
            Metric::Flops => t.flops as f64,
            Metric::Madds => t.madds as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Tolerance {
    /// Fraction of the expected value.
    Relative(f64),
    /// Same unit as the metric.
    Absolute(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub metric: Metric,
    pub expected: f64,
    pub tolerance: Tolerance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub name: String,
    pub expectations: Vec<Expectation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub metric: Metric,
    pub expected: f64,
    pub actual: f64,
    pub relative_error: f64,
    pub tolerance: Tolerance,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: String,
    pub rows: Vec<CheckRow>,
    pub pass: bool,
}

pub fn compare_to_reference(report: &CostReport, reference: &Reference) -> Comparison {
    let rows: Vec<CheckRow> = reference
        .expectations
        .iter()
        .map(|e| {
            let actual = e.metric.of(&report.totals);
            let diff = (actual - e.expected).abs();
            let relative_error = if e.expected == 0.0 {
                if diff == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                diff / e.expected.abs()
            };
            let pass = match e.tolerance {
                Tolerance::Relative(r) => relative_error <= r + 1e-12,
                Tolerance::Absolute(a) => diff <= a + 1e-9 * a.max(1.0),
            };
            CheckRow {
                metric: e.metric,
                expected: e.expected,
                actual,
                relative_error,
                tolerance: e.tolerance,
                pass,
            }
        })
        .collect();
    Comparison {
        reference: reference.name.clone(),
        pass: rows.iter().all(|r| r.pass),
        rows,
    }
}

fn expect(metric: Metric, expected: f64, tolerance: Tolerance) -> Expectation {
    Expectation {
        metric,
        expected,
        tolerance,
    }
}

/// Published totals for the named model, if any.
pub fn published_reference(model: &str) -> Option<Reference> {
    use Metric::*;
    use Tolerance::*;
    let expectations = match model {
        "gynet" => vec![
            expect(Params, 4.9e6, Relative(0.02)),
            expect(SizeMb, 19.9, Relative(0.02)),
            expect(Flops, 2.8e9, Relative(0.10)),
            expect(Madds, 5.6e9, Relative(0.10)),
        ],
        "gynet-baseline" => vec![expect(Params, 2.6e6, Absolute(0.1e6)), expect(SizeMb, 10.7, Absolute(0.5))],
        "gynet-sib" => vec![expect(Params, 2.8e6, Absolute(0.1e6)), expect(SizeMb, 11.5, Absolute(0.5))],
        "gynet-cwb" => vec![expect(Params, 2.8e6, Absolute(0.1e6)), expect(SizeMb, 11.2, Absolute(0.5))],
        "grnet" => vec![
            expect(Params, 0.2e6, Relative(0.02)),
            expect(SizeMb, 0.8, Relative(0.02)),
            expect(Flops, 1.1e9, Relative(0.10)),
            expect(Madds, 2.1e9, Relative(0.10)),
        ],
        _ => return None,
    };
    Some(Reference {
        name: format!("{model} (published)"),
        expectations,
    })
}

impl CostReport {
    /// Fixed-width text table of the per-layer rows and totals.
    pub fn to_table(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:<14} {:<16} {:>12} {:>14}", "layer", "kind", "output", "params", "flops");
        for l in &self.layers {
            let shape = l.out_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let _ = writeln!(s, "{:<16} {:<14} {:<16} {:>12} {:>14}", l.id, l.kind, shape, l.params, l.flops);
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "total: params {} ({:.3} M), size {:.2} MB, flops {:.4} G, madds {:.4} G",
            t.params,
            t.params as f64 / 1e6,
            t.size_mb(),
            t.flops as f64 / 1e9,
            t.madds as f64 / 1e9
        );
        s
    }
}
