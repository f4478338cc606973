use std::io::Write;

use super::trainer::EpochMetrics;
use crate::error::{Error, Result};

/// One row per epoch. `k<j>` columns count filters with `k_i = j`; the
/// `wall_secs` column is written only when `timing` is set, so untimed
/// logs are reproducible byte for byte.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[EpochMetrics], timing: bool) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let buckets = rows.iter().map(|r| r.k.histogram.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> =
        ["epoch", "l_ce", "l_reg", "l_total", "train_acc", "test_acc", "mean_k"].iter().map(|s| s.to_string()).collect();
    header.extend((0..buckets).map(|j| format!("k{j}")));
    if timing {
        header.push("wall_secs".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.epoch.to_string(),
            r.l_ce.to_string(),
            r.l_reg.to_string(),
            r.l_total.to_string(),
            r.train_acc.to_string(),
            r.test_acc.map(|a| a.to_string()).unwrap_or_default(),
            r.k.mean_k.to_string(),
        ];
        rec.extend((0..buckets).map(|j| r.k.histogram.get(j).copied().unwrap_or(0).to_string()));
        if timing {
            rec.push(format!("{:.3}", r.wall_secs));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
