use std::path::Path;

use crate::embed::MultivariateSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::write_atomic;

/// Parses CSV text: a header of channel names, then one row per time step.
/// Row numbers in errors are 1-based file rows (the header is row 1).
pub fn parse_csv(text: &str, dt: f64) -> Result<MultivariateSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| Error::Parse {
            row: 1,
            message: e.to_string(),
        })?,
        None => {
            return Err(Error::Parse {
                row: 1,
                message: "missing header row".into(),
            })
        }
    };
    let names: Vec<String> = header.iter().map(str::to_string).collect();
    let n = names.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (i, rec) in records.enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != n {
            return Err(Error::Parse {
                row,
                message: format!("expected {n} fields, found {}", rec.len()),
            });
        }
        for (k, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                message: format!("column {:?}: {cell:?} is not a number", names[k]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("column {:?}: non-finite value {cell:?}", names[k]),
                });
            }
            columns[k].push(v);
        }
    }
    if columns.first().is_none_or(Vec::is_empty) {
        return Err(Error::Parse {
            row: 2,
            message: "no data rows".into(),
        });
    }
    let values = Tensor::from_rows(&columns)?;
    MultivariateSeries::new(values, names, dt).map_err(|e| Error::Parse {
        row: 1,
        message: e.to_string(),
    })
}

pub fn load_csv(path: &Path) -> Result<MultivariateSeries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, 1.0)
}

/// Renders a series as CSV (shortest round-trip decimal formatting).
pub fn format_csv(series: &MultivariateSeries) -> String {
    let mut out = series.channel_names().join(",");
    out.push('\n');
    for t in 0..series.len() {
        let row: Vec<String> = (0..series.n_channels()).map(|k| series.at(k, t).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn save_csv(series: &MultivariateSeries, path: &Path) -> Result<()> {
    write_atomic(path, format_csv(series).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_order_and_values() {
        let s = parse_csv("a,b,c\n1,2,3\n4.5,-6,7e-3\n", 1.0).unwrap();
        assert_eq!(s.channel_names(), &["a", "b", "c"]);
        assert_eq!(s.channel(2), &[3.0, 7e-3]);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn ragged_row_names_row() {
        let err = parse_csv("a,b\n1,2\n3\n", 1.0).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, .. }), "{err}");
    }

    #[test]
    fn non_numeric_and_non_finite() {
        assert!(matches!(parse_csv("a\nx\n", 1.0), Err(Error::Parse { row: 2, .. })));
        assert!(matches!(
            parse_csv("a\n1\nNaN\n", 1.0),
            Err(Error::Parse { row: 3, .. })
        ));
        assert!(matches!(
            parse_csv("a\n1\ninf\n", 1.0),
            Err(Error::Parse { row: 3, .. })
        ));
    }

    #[test]
    fn round_trip_is_exact() {
        let s = MultivariateSeries::new(
            Tensor::new(vec![2, 3], vec![0.1, 1.0 / 3.0, -2.5e-12, 1e300, 7.0, -0.0]).unwrap(),
            vec!["x".into(), "y".into()],
            1.0,
        )
        .unwrap();
        let back = parse_csv(&format_csv(&s), 1.0).unwrap();
        assert_eq!(back, s);
    }
}
