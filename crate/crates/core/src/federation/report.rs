//! Per-round reports and their CSV form.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::metrics::MetricTable;

/// Outcome of one communication round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    /// Mean local training loss per client, in client order.
    pub client_losses: Vec<f64>,
    /// Global model on the training clients' test splits (macro over clients).
    pub in_fed: Option<MetricTable>,
    /// Global model on the held-out client.
    pub out_of_fed: Option<MetricTable>,
    pub cumulative_bytes: u64,
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        _ => String::new(),
    }
}

fn header(client_ids: &[u32], organs: &[(u8, String)]) -> Vec<String> {
    let mut h = vec!["round".to_string()];
    h.extend(client_ids.iter().map(|c| format!("loss_c{c}")));
    for prefix in ["in", "ood"] {
        h.extend(organs.iter().map(|(_, n)| format!("{prefix}_dsc_{n}")));
        h.extend(organs.iter().map(|(_, n)| format!("{prefix}_asd_{n}")));
        h.push(format!("{prefix}_global_dsc"));
        h.push(format!("{prefix}_global_asd"));
    }
    h.push("cumulative_bytes".into());
    h
}

fn table_cells(t: Option<&MetricTable>, organs: &[(u8, String)]) -> Vec<String> {
    let mut cells: Vec<String> = organs.iter().map(|(c, _)| num(t.and_then(|t| t.dsc.get(c).copied()))).collect();
    cells.extend(organs.iter().map(|(c, _)| num(t.and_then(|t| t.asd.get(c).copied()))));
    cells.push(num(t.map(|t| t.global_dsc)));
    cells.push(num(t.and_then(|t| t.global_asd)));
    cells
}

/// One CSV row per round. Missing values are empty cells.
pub fn write_round_csv<W: Write>(w: W, reports: &[RoundReport], client_ids: &[u32], organs: &[(u8, String)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let to_io = |e: csv::Error| Error::Io(e.into());
    out.write_record(header(client_ids, organs)).map_err(to_io)?;
    for r in reports {
        let mut row = vec![r.round.to_string()];
        row.extend(r.client_losses.iter().map(|&l| num(Some(l))));
        row.extend(table_cells(r.in_fed.as_ref(), organs));
        row.extend(table_cells(r.out_of_fed.as_ref(), organs));
        row.push(r.cumulative_bytes.to_string());
        out.write_record(&row).map_err(to_io)?;
    }
    out.flush()?;
    Ok(())
}

/// A parsed CSV row: column name to value (`None` for empty cells).
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRow {
    pub columns: Vec<(String, Option<f64>)>,
}

impl RoundRow {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.columns.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v)
    }
}

pub fn read_round_csv<R: Read>(r: R) -> Result<Vec<RoundRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.first().map(String::as_str) != Some("round") {
        return Err(Error::Format("round CSV must start with a round column".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let columns = names
            .iter()
            .zip(rec.iter())
            .map(|(n, cell)| {
                let v = if cell.is_empty() {
                    None
                } else {
                    Some(cell.parse::<f64>().map_err(|_| Error::Format(format!("column {n}: bad number {cell:?}")))?)
                };
                Ok((n.clone(), v))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(RoundRow { columns });
    }
    Ok(rows)
}
