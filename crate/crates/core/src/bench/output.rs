use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::sweep::SweepRow;

pub const CSV_HEADER: &str = "method,dim,quantized,ratio,mAP,rank1,rank5,epochs,seconds";

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Argument("no sweep rows to emit".into()));
    }
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let seconds = r.wall_time.map(|s| format!("{s:.3}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.6},{:.6},{:.6},{},{}",
            r.method, r.compressed_dim, r.quantized, r.ratio, r.map, r.rank1, r.rank5, r.train_epochs_total, seconds
        );
    }
    Ok(out)
}

/// gnuplot-style data: one `index` block per (method, quantized) series,
/// `ratio mAP` pairs sorted by ratio, blocks separated by two blank lines.
pub fn plot_data(rows: &[SweepRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Argument("no sweep rows to emit".into()));
    }
    let mut series: Vec<((&str, bool), Vec<&SweepRow>)> = Vec::new();
    for r in rows {
        let key = (r.method.as_str(), r.quantized);
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => series.push((key, vec![r])),
        }
    }
    let mut out = String::new();
    for (i, ((method, quantized), mut points)) in series.into_iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        points.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
        let label = if quantized { format!("{method}+int8") } else { method.to_string() };
        let _ = writeln!(out, "# series {label}");
        let _ = writeln!(out, "# ratio mAP");
        for p in points {
            let _ = writeln!(out, "{:.4} {:.6}", p.ratio, p.map);
        }
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<u64> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(text.len() as u64)
}

pub fn emit_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<u64> {
    write(path.as_ref(), &sweep_csv(rows)?)
}

pub fn emit_plot_data(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<u64> {
    write(path.as_ref(), &plot_data(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, dim: usize, quantized: bool) -> SweepRow {
        SweepRow {
            method: method.into(),
            compressed_dim: dim,
            quantized,
            ratio: 96.0 / dim as f64 * if quantized { 4.0 } else { 1.0 },
            map: 0.5,
            rank1: 0.25,
            rank5: 0.75,
            train_epochs_total: 40,
            wall_time: None,
        }
    }

    #[test]
    fn single_row_csv() {
        let csv = sweep_csv(&[row("slice", 24, false)]).unwrap();
        assert_eq!(csv, format!("{CSV_HEADER}\nslice,24,false,4.0000,0.500000,0.250000,0.750000,40,\n"));
        assert!(sweep_csv(&[]).is_err());
    }

    #[test]
    fn full_grid_line_count() {
        let mut rows = Vec::new();
        for m in ["full", "slice", "lowrank", "prune"] {
            for d in [72, 60, 48, 24, 8, 4] {
                for q in [false, true] {
                    rows.push(row(m, d, q));
                }
            }
        }
        assert_eq!(sweep_csv(&rows).unwrap().lines().count(), 49);
        let plot = plot_data(&rows).unwrap();
        assert_eq!(plot.matches("# series").count(), 8);
        assert_eq!(plot.lines().filter(|l| !l.is_empty() && !l.starts_with('#')).count(), 48);
    }

    #[test]
    fn timing_column() {
        let mut r = row("full", 96, false);
        r.wall_time = Some(1.23456);
        assert!(sweep_csv(&[r]).unwrap().ends_with(",40,1.235\n"));
    }
}
