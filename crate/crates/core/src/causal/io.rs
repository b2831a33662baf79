//! CSV reading and writing for [`StratifiedDataset`].
//!
//! Columns: `y`, `w` (0/1), `stratum` (0-based), covariates `x1..xp`, and an
//! optional `p_hat`. Column order is free; covariates are ordered by index.

use std::io::{Read, Write};
use std::path::Path;

use super::{StratifiedDataset, StudyRole, Unit};
use crate::error::{Error, Result};

fn parse_f64(field: &str, col: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::InvalidParameter(format!(
            "line {line}: column {col}: cannot parse '{field}' as a number"
        ))
    })
}

/// Reads a dataset. `k` overrides the stratum count, which otherwise is one
/// more than the largest stratum label.
pub fn read_csv<R: Read>(
    reader: R,
    role: StudyRole,
    k: Option<usize>,
) -> Result<StratifiedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let missing =
        |name: &str| Error::InvalidParameter(format!("CSV is missing required column '{name}'"));
    let y_col = find("y").ok_or_else(|| missing("y"))?;
    let w_col = find("w").ok_or_else(|| missing("w"))?;
    let s_col = find("stratum").ok_or_else(|| missing("stratum"))?;
    let p_col = find("p_hat");
    let mut x_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix('x')
                .and_then(|n| n.parse::<usize>().ok())
                .map(|n| (n, i))
        })
        .collect();
    x_cols.sort();
    for (expect, (n, _)) in (1..).zip(&x_cols) {
        if *n != expect {
            return Err(Error::InvalidParameter(format!(
                "covariate columns must be x1..xp without gaps; found x{n} where x{expect} was expected"
            )));
        }
    }

    let mut units = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let y = parse_f64(&rec[y_col], "y", line)?;
        let treated = match rec[w_col].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "line {line}: column w must be 0 or 1, got '{other}'"
                )))
            }
        };
        let stratum = rec[s_col].trim().parse::<usize>().map_err(|_| {
            Error::InvalidParameter(format!(
                "line {line}: column stratum must be a nonnegative integer, got '{}'",
                &rec[s_col]
            ))
        })?;
        let x = x_cols
            .iter()
            .map(|&(n, i)| parse_f64(&rec[i], &format!("x{n}"), line))
            .collect::<Result<Vec<_>>>()?;
        let p_hat = match p_col {
            Some(i) if !rec[i].trim().is_empty() => Some(parse_f64(&rec[i], "p_hat", line)?),
            _ => None,
        };
        units.push(Unit {
            y,
            treated,
            stratum,
            x,
            p_hat,
        });
    }
    let k = k.unwrap_or_else(|| units.iter().map(|u| u.stratum + 1).max().unwrap_or(0));
    StratifiedDataset::new(units, k, role)
}

pub fn read_csv_path(
    path: impl AsRef<Path>,
    role: StudyRole,
    k: Option<usize>,
) -> Result<StratifiedDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), role, k)
}

/// Writes a dataset; `p_hat` is emitted only when every unit has one.
pub fn write_csv<W: Write>(data: &StratifiedDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let p = data.n_covariates();
    let with_p = !data.is_empty() && data.has_propensities();
    let mut header: Vec<String> = vec!["y".into(), "w".into(), "stratum".into()];
    header.extend((1..=p).map(|i| format!("x{i}")));
    if with_p {
        header.push("p_hat".into());
    }
    wtr.write_record(&header)?;
    for u in &data.units {
        let mut rec = vec![
            u.y.to_string(),
            u8::from(u.treated).to_string(),
            u.stratum.to_string(),
        ];
        rec.extend(u.x.iter().map(f64::to_string));
        if with_p {
            rec.push(u.p_hat.map(|v| v.to_string()).unwrap_or_default());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
