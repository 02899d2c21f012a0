use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::evaluate::EvalReport;
use crate::data::TaskSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ComparisonRow {
    pub method: String,
    pub backbone: String,
    /// `(mean, ci95)` per column, in percent; `None` when not evaluated.
    pub cells: Vec<Option<(f64, f64)>>,
}

/// Method × backbone rows, one column per task shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

fn column_label(spec: &TaskSpec) -> String {
    format!("{}-way {}-shot", spec.ways, spec.shots)
}

/// Builds the comparison table. Columns are ordered by ways, then shots
/// descending; rows keep the order in which they first appear.
pub fn compare_report(reports: &[EvalReport]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to compare".into()));
    }
    let specs: BTreeSet<(usize, std::cmp::Reverse<usize>)> = reports
        .iter()
        .map(|r| (r.spec.ways, std::cmp::Reverse(r.spec.shots)))
        .collect();
    let columns: Vec<String> = specs
        .iter()
        .map(|&(ways, std::cmp::Reverse(shots))| format!("{ways}-way {shots}-shot"))
        .collect();
    let mut rows: Vec<ComparisonRow> = Vec::new();
    for r in reports {
        let method = r.method.to_string();
        let backbone = r.backbone.clone().unwrap_or_else(|| "raw".into());
        let col = columns.iter().position(|c| *c == column_label(&r.spec)).expect("column exists");
        let row = match rows.iter_mut().position(|x| x.method == method && x.backbone == backbone) {
            Some(k) => &mut rows[k],
            None => {
                rows.push(ComparisonRow {
                    method,
                    backbone,
                    cells: vec![None; columns.len()],
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.cells[col] = Some((r.mean, r.ci95));
    }
    Ok(ComparisonTable { columns, rows })
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string(), "backbone".to_string()];
        for c in &self.columns {
            header.push(format!("{c} mean"));
            header.push(format!("{c} ci95"));
        }
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.method.clone(), r.backbone.clone()];
            for cell in &r.cells {
                match cell {
                    Some((m, c)) => {
                        rec.push(format!("{m:.2}"));
                        rec.push(format!("{c:.2}"));
                    }
                    None => {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                }
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let origin = Path::new("<comparison csv>");
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::format(origin, e.to_string()))?.clone();
        if headers.len() < 2 || headers.len() % 2 != 0 {
            return Err(Error::format(origin, format!("unexpected header with {} fields", headers.len())));
        }
        let columns: Vec<String> = headers
            .iter()
            .skip(2)
            .step_by(2)
            .map(|h| h.trim_end_matches(" mean").to_string())
            .collect();
        let mut rows = Vec::new();
        for (k, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(origin, e.to_string()))?;
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    path: origin.to_path_buf(),
                    line: k as u64 + 2,
                    message: format!("`{s}` is not a number"),
                })
            };
            let cells = (0..columns.len())
                .map(|c| {
                    let (m, ci) = (&rec[2 + 2 * c], &rec[3 + 2 * c]);
                    if m.is_empty() {
                        Ok(None)
                    } else {
                        Ok(Some((parse(m)?, parse(ci)?)))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(ComparisonRow {
                method: rec[0].to_string(),
                backbone: rec[1].to_string(),
                cells,
            });
        }
        Ok(Self { columns, rows })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text rendering, `mean ± ci95` per cell.
    pub fn to_text(&self) -> String {
        let cell = |c: &Option<(f64, f64)>| match c {
            Some((m, ci)) => format!("{m:.2} ± {ci:.2}"),
            None => "-".to_string(),
        };
        let mut table: Vec<Vec<String>> = vec![{
            let mut h = vec!["method".to_string(), "backbone".to_string()];
            h.extend(self.columns.iter().cloned());
            h
        }];
        for r in &self.rows {
            let mut line = vec![r.method.clone(), r.backbone.clone()];
            line.extend(r.cells.iter().map(cell));
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &table {
            let padded: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            out.push_str(padded.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitPart;
    use crate::eval::MethodKind;

    fn report(method: MethodKind, backbone: Option<&str>, shots: usize, mean: f64, ci95: f64) -> EvalReport {
        EvalReport {
            method,
            method_config: serde_json::Value::Null,
            backbone: backbone.map(String::from),
            param_count: 0,
            split_part: SplitPart::Novel,
            spec: TaskSpec::new(5, shots, 15).unwrap(),
            n_tasks: 2,
            master_seed: 0,
            mean,
            ci95,
            fingerprint: String::new(),
            wall_time_secs: 0.0,
            per_task: vec![],
        }
    }

    #[test]
    fn one_report_one_row() {
        let t = compare_report(&[report(MethodKind::Baseline, None, 5, 70.561, 0.214)]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.columns, vec!["5-way 5-shot"]);
        assert!(t.to_text().contains("70.56 ± 0.21"));
    }

    #[test]
    fn mixed_specs_grouped_into_columns() {
        let t = compare_report(&[
            report(MethodKind::SimpleShot, Some("MLP 2/360"), 1, 72.5, 0.2),
            report(MethodKind::SimpleShot, Some("MLP 2/360"), 5, 86.0, 0.16),
            report(MethodKind::PtMap, Some("MLP 2/360"), 5, 88.76, 0.17),
        ])
        .unwrap();
        assert_eq!(t.columns, vec!["5-way 5-shot", "5-way 1-shot"]);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].cells, vec![Some((86.0, 0.16)), Some((72.5, 0.2))]);
        assert_eq!(t.rows[1].cells, vec![Some((88.76, 0.17)), None]);
    }

    #[test]
    fn csv_round_trip_at_printed_precision() {
        let t = compare_report(&[
            report(MethodKind::Baseline, None, 5, 70.5649, 0.2149),
            report(MethodKind::Baseline, None, 1, 57.255, 0.1999),
            report(MethodKind::Maml, Some("MLP 1/360"), 5, 82.3111, 0.18),
        ])
        .unwrap();
        let back = ComparisonTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back.columns, t.columns);
        let round = |x: f64| format!("{x:.2}").parse::<f64>().unwrap();
        for (a, b) in t.rows.iter().zip(&back.rows) {
            assert_eq!(a.method, b.method);
            for (x, y) in a.cells.iter().zip(&b.cells) {
                assert_eq!(x.map(|(m, c)| (round(m), round(c))), *y);
            }
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert!(compare_report(&[]).is_err());
    }
}
