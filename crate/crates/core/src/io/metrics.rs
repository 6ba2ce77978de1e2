//! Per-epoch metrics as a comma-separated table.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub const HEADER: &str = "epoch,L_im,L_cst,L_cmk,L_total,easy_count,hard_count,pl_acc_easy,pl_acc_all,target_acc";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub l_im: f64,
    pub l_cst: f64,
    pub l_cmk: f64,
    pub l_total: f64,
    pub easy_count: usize,
    pub hard_count: usize,
    pub pl_acc_easy: f64,
    pub pl_acc_all: f64,
    pub target_acc: f64,
}

impl MetricsRow {
    /// Fixed 6-decimal formatting keeps files byte-stable.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{},{:.6},{:.6},{:.6}",
            self.epoch,
            self.l_im,
            self.l_cst,
            self.l_cmk,
            self.l_total,
            self.easy_count,
            self.hard_count,
            self.pl_acc_easy,
            self.pl_acc_all,
            self.target_acc
        )
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Appends one row, writing the header first if the file is new or empty.
pub fn append_metrics_row(path: impl AsRef<Path>, row: &MetricsRow) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{HEADER}")?;
    }
    writeln!(f, "{}", row.to_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_format() {
        let r = MetricsRow {
            epoch: 2,
            l_im: 0.5,
            l_cst: 1.0,
            l_cmk: 0.0,
            l_total: 0.8,
            easy_count: 10,
            hard_count: 5,
            pl_acc_easy: 1.0,
            pl_acc_all: 0.75,
            target_acc: 0.8,
        };
        assert_eq!(r.to_csv(), "2,0.500000,1.000000,0.000000,0.800000,10,5,1.000000,0.750000,0.800000");
        assert!(to_csv(&[r]).starts_with("epoch,L_im,"));
    }
}
