//! CSV and 8-bit grayscale PGM export of connectivity matrices.
//!
//! CSV layout: a `# key=value;...` metadata line, a header `source,<cols>`,
//! then one line per source. Pruned cells are `NA`, undefined cells empty.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::connectivity::{Cell, ConnectivityMatrix, Granularity};
use crate::error::{Error, Result};

pub fn to_csv(m: &ConnectivityMatrix) -> String {
    let mut s = format!("# {}\nsource", m.metadata());
    for c in &m.cols {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (r, label) in m.rows.iter().enumerate() {
        s.push_str(label);
        for c in 0..m.cols.len() {
            s.push(',');
            match m.get(r, c) {
                Cell::Live { value, .. } => {
                    let _ = write!(s, "{value}");
                }
                Cell::Pruned => s.push_str("NA"),
                Cell::Undefined => {}
            }
        }
        s.push('\n');
    }
    s
}

/// Parses [`to_csv`] output. Live-weight counts are not stored and come back as zero.
pub fn from_csv(text: &str) -> Result<ConnectivityMatrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
    let mut meta = "";
    if let Some(rest) = header.strip_prefix('#') {
        meta = rest.trim();
        header = lines.next().ok_or_else(|| Error::Format("CSV has no header".into()))?;
    }
    let cols: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for line in lines {
        let mut fields = line.split(',');
        rows.push(fields.next().unwrap_or_default().to_string());
        let values: Vec<&str> = fields.collect();
        if values.len() != cols.len() {
            return Err(Error::Format(format!(
                "row `{}` has {} values for {} columns",
                rows.last().unwrap(),
                values.len(),
                cols.len()
            )));
        }
        for v in values {
            cells.push(match v.trim() {
                "" => Cell::Undefined,
                "NA" => Cell::Pruned,
                x => Cell::Live {
                    value: x.parse().map_err(|_| Error::Format(format!("bad value `{x}`")))?,
                    live: 0,
                },
            });
        }
    }
    let aggregation = meta.split(';').find_map(|kv| match kv.strip_prefix("aggregation=") {
        Some("sum") => Some(crate::analysis::Aggregation::Sum),
        Some("mean") => Some(crate::analysis::Aggregation::Mean),
        _ => None,
    });
    let granularity = if meta.contains("granularity=per_layer") {
        Granularity::PerLayer
    } else {
        Granularity::PerGroup
    };
    Ok(ConnectivityMatrix {
        rows,
        cols,
        cells,
        granularity,
        aggregation,
    })
}

/// Binary PGM, one pixel per cell. Live values are min-max scaled to
/// `0..=255` (all equal maps to 255); pruned and undefined cells are 0.
pub fn to_pgm(m: &ConnectivityMatrix) -> Vec<u8> {
    let live: Vec<f64> = m.cells.iter().filter_map(Cell::value).collect();
    let lo = live.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (rows, cols) = m.shape();
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(m.cells.iter().map(|c| match c.value() {
        None => 0,
        Some(_) if hi <= lo => 255,
        Some(v) => ((v - lo) / (hi - lo) * 255.0).round() as u8,
    }));
    out
}

/// Writes `<stem>.csv` and `<stem>.pgm`, returning both paths.
pub fn export_heatmap(m: &ConnectivityMatrix, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if m.cells.iter().filter_map(Cell::value).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("connectivity matrix holds non-finite values".into()));
    }
    let csv = stem.with_extension("csv");
    let pgm = stem.with_extension("pgm");
    fs::write(&csv, to_csv(m))?;
    fs::write(&pgm, to_pgm(m))?;
    Ok((csv, pgm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(cells: Vec<Cell>, rows: usize, cols: usize) -> ConnectivityMatrix {
        ConnectivityMatrix {
            rows: (0..rows).map(|r| format!("r{r}")).collect(),
            cols: (0..cols).map(|c| format!("c{c}")).collect(),
            cells,
            granularity: Granularity::PerGroup,
            aggregation: None,
        }
    }

    fn live(v: f64) -> Cell {
        Cell::Live { value: v, live: 1 }
    }

    #[test]
    fn single_cell_is_full_scale() {
        let pgm = to_pgm(&matrix(vec![live(0.5)], 1, 1));
        assert_eq!(pgm, b"P5\n1 1\n255\n\xff");
    }

    #[test]
    fn all_pruned_is_black_and_na() {
        let m = matrix(vec![Cell::Pruned; 4], 2, 2);
        assert_eq!(&to_pgm(&m)[11..], &[0, 0, 0, 0]);
        let csv = to_csv(&m);
        assert!(csv.ends_with("r0,NA,NA\nr1,NA,NA\n"), "{csv}");
    }

    #[test]
    fn csv_round_trip() {
        let m = matrix(vec![live(0.123456789), Cell::Pruned, Cell::Undefined, live(0.0)], 2, 2);
        let back = from_csv(&to_csv(&m)).unwrap();
        assert_eq!(back.rows, m.rows);
        assert_eq!(back.cols, m.cols);
        for (a, b) in m.cells.iter().zip(&back.cells) {
            match (a, b) {
                (Cell::Live { value: x, .. }, Cell::Live { value: y, .. }) => {
                    assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-30))
                }
                _ => assert_eq!(a, b),
            }
        }
        assert!(from_csv("source,a\nr,1,2\n").is_err());
    }

    #[test]
    fn export_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = matrix(vec![live(1.0), live(3.0)], 1, 2);
        let (csv, pgm) = export_heatmap(&m, &dir.path().join("conn")).unwrap();
        assert_eq!(fs::read(pgm).unwrap(), b"P5\n2 1\n255\n\x00\xff");
        assert!(fs::read_to_string(csv).unwrap().contains("r0,1,3"));
        let bad = matrix(vec![live(f64::NAN)], 1, 1);
        assert!(export_heatmap(&bad, &dir.path().join("x")).is_err());
    }
}
