//! Comma-separated metrics files with fixed headers.
//!
//! Missing values (no update in the row, no evaluation) are empty cells.
//! Floats use the shortest representation that round-trips exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::finetune::FinetuneRow;
use crate::pretrain::PretrainRow;

pub const PRETRAIN_HEADER: &str = "iteration,l_diff,l_disp,l_total,eval_success";
pub const FINETUNE_HEADER: &str =
    "iteration,mean_return,train_success,mean_ratio,clip_fraction,approx_kl,policy_loss,value_loss,eval_success";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn pretrain_line(r: &PretrainRow) -> String {
    let l = r.losses;
    [
        r.iteration.to_string(),
        cell(l.map(|m| m.l_diff)),
        cell(l.map(|m| m.l_disp)),
        cell(l.map(|m| m.l_total)),
        cell(r.eval_success),
    ]
    .join(",")
}

pub fn finetune_line(r: &FinetuneRow) -> String {
    let u = r.update;
    [
        r.iteration.to_string(),
        cell(r.mean_return),
        cell(r.train_success),
        cell(u.map(|m| m.mean_ratio)),
        cell(u.map(|m| m.clip_fraction)),
        cell(u.map(|m| m.approx_kl)),
        cell(u.map(|m| m.policy_loss)),
        cell(u.map(|m| m.value_loss)),
        cell(r.eval_success),
    ]
    .join(",")
}

/// Line-buffered CSV file, flushed after every row.
pub struct CsvWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self { path: path.to_path_buf(), out: BufWriter::new(file) };
        w.line(header)?;
        Ok(w)
    }

    pub fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a metrics file into its header and rows of optional values.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or_default().split(',').map(String::from).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|c| if c.is_empty() { Ok(None) } else { c.parse().map(Some) })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        if row.len() != header.len() {
            return Err(Error::InvalidArgument(format!("{}: row {} has {} cells", path.display(), i + 1, row.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}
