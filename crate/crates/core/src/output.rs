//! CSV tables with `#`-prefixed metadata lines, plus sidecar metadata files.
//!
//! Reals are written with 17 significant digits so a read-back reproduces them
//! exactly; infinities are written as `inf`/`-inf` and missing values as empty cells.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::harness::{SweepRow, SweepSummary};

/// Metadata key whose line is the only one allowed to differ between identical runs.
pub const TIMESTAMP_KEY: &str = "generated_unix";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub metadata: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Table {
        Table {
            metadata: Vec::new(),
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Table {
        self.metadata.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn get(&self, row: usize, name: &str) -> Option<&str> {
        Some(self.rows.get(row)?.get(self.column(name)?)?.as_str())
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn real(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.16e}")
    }
}

pub fn opt_real(v: Option<f64>) -> String {
    v.map(real).unwrap_or_default()
}

/// Inverse of [`real`]; empty cells read as `None`.
pub fn parse_real(cell: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::invalid("csv", format!("not a real number: {cell:?}")))
}

pub fn write_csv(table: &Table, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (k, v) in &table.metadata {
        writeln!(out, "# {k}={v}")?;
    }
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    writeln!(out, "# {TIMESTAMP_KEY}={now}")?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(&table.header)?;
        for row in &table.rows {
            w.write_record(row)?;
        }
        w.flush()?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let mut metadata = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let Some(rest) = line.strip_prefix('#') else {
            break;
        };
        if let Some((k, v)) = rest.trim_start().split_once('=') {
            metadata.push((k.to_string(), v.to_string()));
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let header = reader.headers()?.iter().map(String::from).collect();
    let rows = reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Table {
        metadata,
        header,
        rows,
    })
}

/// Writes `contents` next to `csv_path` as `<name>.meta.toml`.
pub fn write_sidecar(csv_path: &Path, contents: &toml::Table) -> Result<()> {
    let mut name = csv_path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.toml");
    let text = toml::to_string(contents).map_err(|e| Error::invalid("meta", e.to_string()))?;
    std::fs::write(csv_path.with_file_name(name), text)?;
    Ok(())
}

pub const TRAJECTORY_COLUMNS: [&str; 9] = [
    "step", "time", "loss", "norm_wA", "norm_wB", "uA", "uB", "u", "gen_error",
];

/// Trajectory columns, optionally followed by the flattened total maps `wA_i`, `wB_i`.
pub fn trajectory_table(traj: &Trajectory, with_maps: bool) -> Table {
    let mut header: Vec<String> = TRAJECTORY_COLUMNS.iter().map(|s| s.to_string()).collect();
    let first = traj.samples.first();
    let (da, db) = first.map_or((0, 0), |s| (s.w_tot.w_tot_a.len(), s.w_tot.w_tot_b.len()));
    if with_maps {
        header.extend((0..da).map(|i| format!("wA_{i}")));
        header.extend((0..db).map(|i| format!("wB_{i}")));
    }
    let mut table = Table::new(&header);
    for s in &traj.samples {
        let mut row = vec![
            s.step.to_string(),
            real(s.time),
            real(s.loss),
            real(s.norm_wtot_a),
            real(s.norm_wtot_b),
            real(s.u_a),
            real(s.u_b),
            opt_real(s.u),
            opt_real(s.gen_error),
        ];
        if with_maps {
            row.extend(s.w_tot.w_tot_a.iter().map(|&v| real(v)));
            row.extend(s.w_tot.w_tot_b.iter().map(|&v| real(v)));
        }
        table.push(row);
    }
    table
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut table = Table::new(&[
        "axis_value",
        "seed",
        "status",
        "first_modality",
        "t_first",
        "t_second",
        "simulated_ratio",
        "predicted_ratio",
        "misattribution_sim",
        "misattribution_pred",
    ]);
    for r in rows {
        table.push(vec![
            real(r.axis_value),
            r.seed.to_string(),
            r.status.clone(),
            r.first_modality.map(|m| m.to_string()).unwrap_or_default(),
            opt_real(r.t_first),
            opt_real(r.t_second),
            opt_real(r.simulated_ratio),
            opt_real(r.predicted_ratio.map(|p| p.value())),
            opt_real(r.misattribution_sim),
            opt_real(r.misattribution_pred),
        ]);
    }
    table
}

pub fn summary_table(summary: &[SweepSummary]) -> Table {
    let mut table = Table::new(&[
        "axis_value",
        "runs",
        "sim_ratio_mean",
        "sim_ratio_std",
        "pred_ratio",
        "mis_sim_mean",
        "mis_sim_std",
        "mis_pred",
    ]);
    for s in summary {
        table.push(vec![
            real(s.axis_value),
            s.runs.to_string(),
            real(s.sim_ratio_mean),
            real(s.sim_ratio_std),
            real(s.pred_ratio),
            real(s.mis_sim_mean),
            real(s.mis_sim_std),
            real(s.mis_pred),
        ]);
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02e23, f64::MIN_POSITIVE, 4.0] {
            assert_eq!(parse_real(&real(v)).unwrap(), Some(v));
        }
        assert_eq!(real(f64::INFINITY), "inf");
        assert_eq!(parse_real("inf").unwrap(), Some(f64::INFINITY));
        assert_eq!(parse_real("").unwrap(), None);
        assert!(parse_real("x").is_err());
    }

    #[test]
    fn empty_table_has_header_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&Table::new(&["a", "b"]).meta("schema", 1), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# schema=1");
        assert!(lines[1].starts_with("# generated_unix="));
        assert_eq!(lines[2], "a,b");
        assert_eq!(lines.len(), 3);
        let back = read_csv(&path).unwrap();
        assert!(back.rows.is_empty());
        assert_eq!(back.meta_value("schema"), Some("1"));
    }

    #[test]
    fn cells_needing_quotes_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.csv");
        let mut t = Table::new(&["status"]);
        t.push(vec!["error: a, \"b\"".into()]);
        write_csv(&t, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap().rows, t.rows);
    }

    #[test]
    fn sidecar_is_written_next_to_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        let mut meta = toml::Table::new();
        meta.insert("seed".into(), toml::Value::Integer(3));
        write_sidecar(&path, &meta).unwrap();
        let text = std::fs::read_to_string(dir.path().join("run.csv.meta.toml")).unwrap();
        assert_eq!(text.trim(), "seed = 3");
    }
}
