//! Result reports: per-seed delimited records, a JSON summary, the
//! cross-domain table and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ScenarioOutcome, ScenarioResult, SweepParam, SweepPoint, Variant};
use crate::error::{Error, Result};

/// One delimited record per (scenario, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub family: String,
    pub source: String,
    pub target: String,
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub source_accuracy: f64,
    pub wall_seconds: f64,
    pub config_hash: String,
}

pub fn seed_records(results: &[&ScenarioResult]) -> Vec<SeedRecord> {
    results
        .iter()
        .flat_map(|r| {
            r.seeds.iter().map(|s| SeedRecord {
                family: r.spec.family.to_string(),
                source: r.spec.source.clone(),
                target: r.spec.target.clone(),
                variant: r.spec.variant.to_string(),
                seed: s.seed,
                accuracy: s.accuracy,
                macro_f1: s.macro_f1,
                source_accuracy: s.source_accuracy,
                wall_seconds: s.wall_seconds,
                config_hash: r.config_hash.clone(),
            })
        })
        .collect()
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads rows written by [`write_csv`].
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        what: "json summary",
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        what: "delimited records",
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Mean target accuracy per variant (rows) and scenario (columns), with an
/// Average column over the scenarios that completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixTable {
    pub scenarios: Vec<String>,
    pub rows: Vec<MatrixRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub variant: Variant,
    /// `None` marks a failed scenario.
    pub cells: Vec<Option<f64>>,
    pub average: Option<f64>,
}

impl MatrixTable {
    pub fn from_outcomes(outcomes: &[ScenarioOutcome]) -> Self {
        let mut scenarios: Vec<String> = Vec::new();
        let mut variants: Vec<Variant> = Vec::new();
        for o in outcomes {
            let label = o.spec().label();
            if !scenarios.contains(&label) {
                scenarios.push(label);
            }
            if !variants.contains(&o.spec().variant) {
                variants.push(o.spec().variant);
            }
        }
        let rows = variants
            .into_iter()
            .map(|variant| {
                let cells: Vec<Option<f64>> = scenarios
                    .iter()
                    .map(|label| {
                        outcomes
                            .iter()
                            .find(|o| o.spec().variant == variant && &o.spec().label() == label)
                            .and_then(|o| o.result())
                            .map(|r| r.mean_accuracy)
                    })
                    .collect();
                let done: Vec<f64> = cells.iter().flatten().copied().collect();
                let average = (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64);
                MatrixRow {
                    variant,
                    cells,
                    average,
                }
            })
            .collect();
        Self { scenarios, rows }
    }

    /// Comma-separated table; failed cells read `failed`.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |v| format!("{v:.2}"));
        let mut out = format!("variant,{},Average\n", self.scenarios.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row.cells.iter().map(|&c| cell(c)).collect();
            let _ = writeln!(out, "{},{},{}", row.variant, cells.join(","), cell(row.average));
        }
        out
    }
}

/// Plot-ready sweep records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub parameter: String,
    pub value: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
}

pub fn sweep_records(param: SweepParam, points: &[SweepPoint]) -> Vec<SweepRecord> {
    points
        .iter()
        .map(|p| SweepRecord {
            parameter: param.as_str().into(),
            value: p.value,
            mean_accuracy: p.result.mean_accuracy,
            std_accuracy: p.result.std_accuracy,
            mean_macro_f1: p.result.mean_macro_f1,
        })
        .collect()
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;

fn svg_open(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        W / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN / 1.5);
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    );
    // accuracy axis, 0..100
    for tick in (0..=100).step_by(20) {
        let y = y_of(tick as f64);
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{x0}\" y2=\"{y:.1}\" stroke=\"black\"/>",
            x0 - 4.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{tick}</text>",
            x0 - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">accuracy (%)</text>",
        H / 2.0,
        H / 2.0
    );
    s
}

fn y_of(acc: f64) -> f64 {
    let (top, bottom) = (MARGIN / 1.5, H - MARGIN);
    bottom - (acc.clamp(0.0, 100.0) / 100.0) * (bottom - top)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Accuracy against the swept value; `λ` uses a logarithmic axis.
pub fn sweep_svg(param: SweepParam, points: &[SweepPoint]) -> String {
    let mut s = svg_open(&format!("sensitivity to {}", param.as_str()));
    let log = param == SweepParam::Lambda;
    let t = |v: f64| if log { v.log10() } else { v };
    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        (a.min(t(p.value)), b.max(t(p.value)))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x_of = |v: f64| MARGIN + 20.0 + (t(v) - lo) / span * (W - 1.5 * MARGIN - 40.0);
    let pts: Vec<String> = points
        .iter()
        .map(|p| format!("{:.1},{:.1}", x_of(p.value), y_of(p.result.mean_accuracy)))
        .collect();
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>",
        pts.join(" ")
    );
    for p in points {
        let (x, y) = (x_of(p.value), y_of(p.result.mean_accuracy));
        let (ylo, yhi) = (
            y_of(p.result.mean_accuracy - p.result.std_accuracy),
            y_of(p.result.mean_accuracy + p.result.std_accuracy),
        );
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{ylo:.1}\" x2=\"{x:.1}\" y2=\"{yhi:.1}\" stroke=\"steelblue\"/>"
        );
        let _ = writeln!(s, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3.5\" fill=\"steelblue\"/>");
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            H - MARGIN + 18.0,
            p.value
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 12.0,
        param.as_str()
    );
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per scenario plus the average, one bar per variant.
pub fn matrix_svg(table: &MatrixTable) -> String {
    const COLORS: [&str; 5] = ["steelblue", "darkorange", "seagreen", "firebrick", "slategray"];
    let mut s = svg_open("target accuracy per scenario");
    let groups: Vec<&str> = table.scenarios.iter().map(String::as_str).chain(["Average"]).collect();
    let width = (W - 1.5 * MARGIN) / groups.len() as f64;
    let bar = width * 0.8 / table.rows.len().max(1) as f64;
    for (g, name) in groups.iter().enumerate() {
        let gx = MARGIN + g as f64 * width + width * 0.1;
        for (r, row) in table.rows.iter().enumerate() {
            let value = if g < table.scenarios.len() {
                row.cells[g]
            } else {
                row.average
            };
            if let Some(v) = value {
                let y = y_of(v);
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{bar:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                    gx + r as f64 * bar,
                    H - MARGIN - y,
                    COLORS[r % COLORS.len()]
                );
            }
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            gx + width * 0.4,
            H - MARGIN + 18.0,
            escape(name)
        );
    }
    for (r, row) in table.rows.iter().enumerate() {
        let y = MARGIN / 1.5 + 14.0 * r as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{y}\" width=\"10\" height=\"10\" fill=\"{}\"/>",
            W - 130.0,
            COLORS[r % COLORS.len()]
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{}</text>", W - 114.0, y + 9.0, row.variant);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::{Family, ScenarioSpec, SeedResult};

    fn result(source: &str, target: &str, variant: Variant, accs: &[f64]) -> ScenarioResult {
        let spec = ScenarioSpec::new(Family::Har, source, target, variant, (0..accs.len() as u64).collect());
        let seeds = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| SeedResult {
                seed: i as u64,
                accuracy: a,
                macro_f1: a / 100.0,
                source_accuracy: 99.0,
                wall_seconds: 0.5,
            })
            .collect();
        ScenarioResult::from_seeds(spec, seeds, 1.0, "abc".into())
    }

    #[test]
    fn average_column_is_the_row_mean() {
        let outcomes = vec![
            ScenarioOutcome::Done(result("a", "b", Variant::Full, &[80.0, 90.0])),
            ScenarioOutcome::Done(result("b", "a", Variant::Full, &[70.0, 71.0])),
            ScenarioOutcome::Failed {
                spec: ScenarioSpec::new(Family::Har, "a", "b", Variant::NoAr, vec![0]),
                error: "boom".into(),
            },
            ScenarioOutcome::Done(result("b", "a", Variant::NoAr, &[60.0])),
        ];
        let t = MatrixTable::from_outcomes(&outcomes);
        assert_eq!(t.scenarios, vec!["a→b", "b→a"]);
        assert!((t.rows[0].average.unwrap() - (85.0 + 70.5) / 2.0).abs() < 1e-9);
        assert_eq!(t.rows[1].cells[0], None);
        assert_eq!(t.rows[1].average, Some(60.0));
        assert!(t.to_csv().contains("no_ar,failed,60.00,60.00"));
        assert!(matrix_svg(&t).starts_with("<svg"));
    }

    #[test]
    fn records_round_trip_and_reaggregate() {
        let r = result("a", "b", Variant::Full, &[80.0, 90.0, 85.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        write_csv(&path, &seed_records(&[&r])).unwrap();
        let back: Vec<SeedRecord> = read_csv(&path).unwrap();
        let accs: Vec<f64> = back.iter().map(|b| b.accuracy).collect();
        let (m, s) = crate::runner::mean_std(&accs);
        assert_eq!((m, s), (r.mean_accuracy, r.std_accuracy));
    }

    #[test]
    fn sweep_plot_has_one_marker_per_value() {
        let points: Vec<SweepPoint> = [1e-4, 1e-2, 1.0]
            .iter()
            .map(|&v| SweepPoint {
                value: v,
                result: result("a", "b", Variant::Full, &[70.0]),
            })
            .collect();
        let svg = sweep_svg(SweepParam::Lambda, &points);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(sweep_records(SweepParam::Lambda, &points).len(), 3);
    }
}
