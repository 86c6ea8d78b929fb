use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};

use crate::config::ConfigError;

const KEYS: [&str; 4] = ["method", "problem", "d", "eps"];

#[derive(Debug, PartialEq)]
pub struct Group {
    pub key: Vec<String>,
    pub n: usize,
    pub mean: Vec<f64>,
    /// Sample standard deviation (`n - 1`); zero for a single row.
    pub std: Vec<f64>,
}

#[derive(Debug, PartialEq)]
pub struct Summary {
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub groups: Vec<Group>,
}

/// Groups rows of metric CSVs with identical headers by
/// `(method, problem, d, eps)` and aggregates every numeric column except `seed`.
pub fn summarize(paths: &[PathBuf]) -> Result<Summary> {
    if paths.is_empty() {
        return Err(ConfigError("compare needs at least one CSV".into()).into());
    }
    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for p in paths {
        let mut rd = csv::Reader::from_path(p).with_context(|| format!("reading {}", p.display()))?;
        let h: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        match &header {
            None => header = Some(h),
            Some(first) if *first != h => {
                return Err(ConfigError(format!("{} has columns {h:?}, expected {first:?}", p.display())).into())
            }
            _ => {}
        }
        for rec in rd.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
    }
    let header = header.expect("at least one file");
    for k in ["method", "d", "eps"] {
        if !header.iter().any(|h| h == k) {
            return Err(ConfigError(format!("column {k:?} missing from {}", paths[0].display())).into());
        }
    }
    let key_idx: Vec<usize> = KEYS.iter().filter_map(|k| header.iter().position(|h| h == k)).collect();
    let val_idx: Vec<usize> = (0..header.len()).filter(|i| !key_idx.contains(i) && header[*i] != "seed").collect();

    let mut groups: BTreeMap<Vec<String>, Vec<Vec<f64>>> = BTreeMap::new();
    for (r, row) in rows.iter().enumerate() {
        let key = key_idx.iter().map(|&i| row[i].clone()).collect();
        let vals = val_idx
            .iter()
            .map(|&i| row[i].parse::<f64>().with_context(|| format!("row {}: column {} is not numeric: {:?}", r + 1, header[i], row[i])))
            .collect::<Result<Vec<_>>>()?;
        groups.entry(key).or_default().push(vals);
    }
    let groups = groups
        .into_iter()
        .map(|(key, vals)| {
            let n = vals.len();
            let mean: Vec<f64> = (0..val_idx.len()).map(|j| vals.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
            let std = (0..val_idx.len())
                .map(|j| {
                    if n < 2 {
                        0.0
                    } else {
                        (vals.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                    }
                })
                .collect();
            Group { key, n, mean, std }
        })
        .collect();
    Ok(Summary {
        key_columns: key_idx.iter().map(|&i| header[i].clone()).collect(),
        value_columns: val_idx.iter().map(|&i| header[i].clone()).collect(),
        groups,
    })
}

pub fn write_text<W: Write>(mut w: W, s: &Summary) -> Result<()> {
    let mut table: Vec<Vec<String>> = Vec::new();
    let mut head = s.key_columns.clone();
    head.push("n".into());
    head.extend(s.value_columns.iter().cloned());
    table.push(head);
    for g in &s.groups {
        let mut row = g.key.clone();
        row.push(g.n.to_string());
        row.extend(g.mean.iter().zip(&g.std).map(|(m, sd)| format!("{m:.4e} ± {sd:.1e}")));
        table.push(row);
    }
    let widths: Vec<usize> =
        (0..table[0].len()).map(|j| table.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
    for row in &table {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        writeln!(w, "{}", cells.join("  ").trim_end())?;
    }
    Ok(())
}

pub fn write_csv<W: Write>(w: W, s: &Summary) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    let mut head = s.key_columns.clone();
    head.push("n".into());
    for v in &s.value_columns {
        head.push(format!("{v}_mean"));
        head.push(format!("{v}_std"));
    }
    c.write_record(&head)?;
    for g in &s.groups {
        let mut row = g.key.clone();
        row.push(g.n.to_string());
        for (m, sd) in g.mean.iter().zip(&g.std) {
            row.push(m.to_string());
            row.push(sd.to_string());
        }
        c.write_record(&row)?;
    }
    c.flush()?;
    Ok(())
}
