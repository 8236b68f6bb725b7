//! CSV output, comparison tables and plot scripts.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use crate::error::{ExpError, Result};
use crate::run::{ResultRow, SCHEMA_VERSION, WMMSE};

/// Signed percentage of `se` relative to `reference`.
pub fn percent_delta(se: f64, reference: f64) -> f64 {
    100.0 * (se - reference) / reference
}

/// `+21.37%` style, two decimals, explicit sign; exact ties print `0.00%`.
pub fn format_percent(se: f64, reference: f64) -> String {
    let d = percent_delta(se, reference);
    let rounded = (d * 100.0).round() / 100.0;
    if rounded == 0.0 {
        "0.00%".to_string()
    } else {
        format!("{rounded:+.2}%")
    }
}

/// One table cell: `30.04 (+21.37%)`.
pub fn format_cell(se: f64, reference: Option<f64>) -> String {
    match reference {
        Some(r) if r != 0.0 && r.is_finite() => format!("{se:.2} ({})", format_percent(se, r)),
        _ => format!("{se:.2}"),
    }
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for r in rd.deserialize() {
        let row: ResultRow = r?;
        if row.schema_version != SCHEMA_VERSION {
            return Err(ExpError::InvalidSpec(format!(
                "CSV schema version {} (expected {SCHEMA_VERSION})",
                row.schema_version
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn label(r: &ResultRow) -> String {
    if r.structure == "-" || r.structure == "vertex" {
        r.family.clone()
    } else {
        format!("{} [{}]", r.family, r.structure)
    }
}

/// Mean SE per family (rows) and axis value (columns), each with its signed
/// percentage against the WMMSE row at the same value.
pub fn compare_table(rows: &[ResultRow]) -> String {
    let mut values: Vec<f64> = Vec::new();
    for r in rows {
        if !values.contains(&r.value) {
            values.push(r.value);
        }
    }
    let mut labels: Vec<String> = Vec::new();
    for r in rows {
        let l = label(r);
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    let axis = rows.first().map_or("value", |r| r.axis.as_str());
    let mut table = vec![std::iter::once(format!("family \\ {axis}"))
        .chain(values.iter().map(|v| format!("{v}")))
        .collect::<Vec<_>>()];
    for l in &labels {
        let mut line = vec![l.clone()];
        for &v in &values {
            let reference = rows.iter().find(|r| r.family == WMMSE && r.value == v).map(|r| r.mean_se);
            let cell = rows
                .iter()
                .find(|r| label(r) == *l && r.value == v)
                .map_or("-".to_string(), |r| format_cell(r.mean_se, reference));
            line.push(cell);
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        s.push_str(cells.join("  ").trim_end());
        s.push('\n');
        if i == 0 {
            s.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            s.push('\n');
        }
    }
    s
}

/// A declarative plot description: one `series` per family with its points.
/// Any plotting tool can consume it line by line.
pub fn plot_script(rows: &[ResultRow], csv_name: &str) -> String {
    let axis = rows.first().map_or("value", |r| r.axis.as_str());
    let log = matches!(axis, "sigma_i_sq" | "beta");
    let mut s = String::new();
    s.push_str(&format!("# mdgnn plot script, schema {SCHEMA_VERSION}\n"));
    s.push_str(&format!("source {csv_name}\n"));
    s.push_str(&format!("x {axis} scale={}\n", if log { "log" } else { "linear" }));
    s.push_str("y mean_se label=\"sum SE (bit/s/Hz)\"\n");
    s.push_str("error std_se\n");
    let labels: BTreeSet<String> = rows.iter().map(label).collect();
    for l in labels {
        s.push_str(&format!("series \"{l}\""));
        for r in rows.iter().filter(|r| label(r) == l) {
            s.push_str(&format!(" ({},{},{})", r.value, r.mean_se, r.std_se));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(family: &str, value: f64, se: f64) -> ResultRow {
        ResultRow {
            schema_version: SCHEMA_VERSION,
            task: "precoding".into(),
            family: family.into(),
            structure: "-".into(),
            axis: "sigma_i_sq".into(),
            value,
            train_value: None,
            mean_se: se,
            std_se: 0.1,
            a_term: 0.0,
            e_term: 0.0,
            param_count: 0,
            train_ms: 0.0,
            trials: 1,
            trial_se: format!("{se:?}"),
        }
    }

    #[test]
    fn percent_cells() {
        assert_eq!(format_percent(30.04, 24.75), "+21.37%");
        assert_eq!(format_percent(16.13, 24.75), "-34.83%");
        assert_eq!(format_percent(24.75, 24.75), "0.00%");
        assert_eq!(format_cell(30.04, Some(24.75)), "30.04 (+21.37%)");
    }

    #[test]
    fn table_relative_to_wmmse() {
        let rows = vec![row(WMMSE, 0.1, 24.75), row("egib-bern", 0.1, 30.04)];
        let t = compare_table(&rows);
        assert!(t.contains("24.75 (0.00%)"), "{t}");
        assert!(t.contains("30.04 (+21.37%)"), "{t}");
    }

    #[test]
    fn csv_round_trip() {
        let mut r = row("edge-mdgnn", 0.01, 12.5);
        r.train_value = Some(3.0);
        let rows = vec![r, row(WMMSE, 0.01, 13.0)];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with("schema_version,task,family,structure,axis,value,train_value,mean_se,std_se"));
        assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn plot_script_lists_every_family() {
        let rows = vec![row(WMMSE, 0.1, 1.0), row(WMMSE, 1.0, 0.5), row("vertex-gnn", 0.1, 0.2)];
        let s = plot_script(&rows, "r.csv");
        assert!(s.contains("scale=log"));
        assert_eq!(s.lines().filter(|l| l.starts_with("series")).count(), 2);
    }
}
