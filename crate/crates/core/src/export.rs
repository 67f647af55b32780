//! Plot-ready CSV exports.
//!
//! Every curve file is long format, `series,<x>,accuracy`, so several labelled
//! series (for example DLP and the ℓ1 baseline) share one file.

use crate::profiler::Criteria;
use crate::pruner::PruneReport;

/// One labelled curve of `(x, accuracy)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
        }
    }

    /// Accuracy against NPs or MACs, one point per report row.
    pub fn from_prune_report(label: impl Into<String>, report: &PruneReport, axis: Criteria) -> Self {
        let points = report
            .rows
            .iter()
            .map(|r| {
                let x = match axis {
                    Criteria::Nps => r.nps,
                    Criteria::Macs => r.macs,
                };
                (x as f64, r.accuracy)
            })
            .collect();
        Self::new(label, points)
    }
}

fn fmt_x(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// `series,<x_name>,accuracy` rows for every point of every series.
pub fn curve_csv(x_name: &str, series: &[Series]) -> String {
    let mut s = format!("series,{x_name},accuracy\n");
    for curve in series {
        for &(x, acc) in &curve.points {
            s += &format!("{},{},{acc:.6}\n", curve.label, fmt_x(x));
        }
    }
    s
}

pub fn accuracy_vs_amount(series: &[Series]) -> String {
    curve_csv("amount", series)
}

pub fn accuracy_vs_cost(series: &[Series], axis: Criteria) -> String {
    match axis {
        Criteria::Nps => curve_csv("nps", series),
        Criteria::Macs => curve_csv("macs", series),
    }
}

pub fn accuracy_vs_bits(series: &[Series]) -> String {
    curve_csv("bits", series)
}

/// `label,class_0,..,class_{k-1}`; classes without examples are left empty.
pub fn per_class_csv(class_count: usize, rows: &[(String, Vec<Option<f64>>)]) -> String {
    let mut s = String::from("label");
    for c in 0..class_count {
        s += &format!(",class_{c}");
    }
    s.push('\n');
    for (label, accs) in rows {
        s += label;
        for c in 0..class_count {
            s.push(',');
            if let Some(Some(a)) = accs.get(c) {
                s += &format!("{a:.6}");
            }
        }
        s.push('\n');
    }
    s
}
