//! Feature table CSV: header `split,label,f1..fd`, one sample per row.
//!
//! Labels are zero-based; `-1` marks an unlabeled target. Source labels
//! define `|C^S|`; target labels at or above it are target-private.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use osda_core::data::OsdaTask;
use osda_core::Tensor;

use crate::fmt::full;

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {detail}")]
    Malformed { line: u64, detail: String },
    #[error("no {0} rows")]
    EmptySplit(&'static str),
    #[error("invalid task: {0}")]
    Task(#[from] osda_core::Error),
}

/// Class counts when the table itself cannot fix them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub n_common: Option<usize>,
    pub n_total: Option<usize>,
}

pub fn write_task<W: Write>(task: &OsdaTask, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["split".to_string(), "label".to_string()];
    header.extend((1..=task.dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(task.dim() + 2);
    for (i, &y) in task.source_y.iter().enumerate() {
        row.clear();
        row.push("source".to_string());
        row.push(y.to_string());
        row.extend(task.source_x.row(i).iter().map(|&v| full(v)));
        w.write_record(&row)?;
    }
    for (i, y) in task.target_y.iter().enumerate() {
        row.clear();
        row.push("target".to_string());
        row.push(y.map_or_else(|| "-1".to_string(), |y| y.to_string()));
        row.extend(task.target_x.row(i).iter().map(|&v| full(v)));
        w.write_record(&row)?;
    }
    w.flush()
}

pub fn save_task(task: &OsdaTask, path: &Path) -> Result<(), TableError> {
    let io = |source| TableError::Io { path: path.display().to_string(), source };
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    write_task(task, &mut f).map_err(io)?;
    f.flush().map_err(io)
}

pub fn load_feature_table(path: &Path, counts: ClassCounts) -> Result<OsdaTask, TableError> {
    let f = File::open(path).map_err(|source| TableError::Io { path: path.display().to_string(), source })?;
    read_task(f, counts)
}

/// Parses a table. `|C^S|` defaults to one more than the largest source
/// label and `|C^T|` to the larger of `|C^S| + 1` and one more than the
/// largest target label.
pub fn read_task<R: Read>(input: R, counts: ClassCounts) -> Result<OsdaTask, TableError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header = r.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "split" || &header[1] != "label" {
        return Err(malformed(1, "header must be `split,label,f1..fd`".into()));
    }
    let dim = header.len() - 2;
    let (mut sx, mut sy, mut tx, mut ty) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| malformed(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != dim + 2 {
            return Err(malformed(line, format!("expected {} columns, found {}", dim + 2, rec.len())));
        }
        let label: i64 = rec[1].trim().parse().map_err(|_| malformed(line, format!("label `{}` is not an integer", &rec[1])))?;
        let mut feats = Vec::with_capacity(dim);
        for (j, cell) in rec.iter().skip(2).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| malformed(line, format!("f{} `{cell}` is not a number", j + 1)))?;
            if !v.is_finite() {
                return Err(malformed(line, format!("f{} is not finite", j + 1)));
            }
            feats.push(v);
        }
        match &rec[0] {
            "source" => {
                let y = usize::try_from(label).map_err(|_| malformed(line, "source rows need a label >= 0".into()))?;
                sx.extend(feats);
                sy.push(y);
            }
            "target" => {
                let y = match label {
                    -1 => None,
                    l => Some(usize::try_from(l).map_err(|_| malformed(line, format!("target label {l} < -1")))?),
                };
                tx.extend(feats);
                ty.push(y);
            }
            other => return Err(malformed(line, format!("split `{other}` is neither source nor target"))),
        }
    }
    if sy.is_empty() {
        return Err(TableError::EmptySplit("source"));
    }
    if ty.is_empty() {
        return Err(TableError::EmptySplit("target"));
    }
    let n_common = counts.n_common.unwrap_or_else(|| sy.iter().max().map_or(0, |m| m + 1));
    let n_total = counts
        .n_total
        .unwrap_or_else(|| ty.iter().flatten().max().map_or(0, |m| m + 1).max(n_common + 1));
    let (ns, nt) = (sy.len(), ty.len());
    Ok(OsdaTask::new(
        Tensor::new(vec![ns, dim], sx)?,
        sy,
        Tensor::new(vec![nt, dim], tx)?,
        ty,
        n_common,
        n_total,
    )?)
}

fn malformed(line: u64, detail: String) -> TableError {
    TableError::Malformed { line, detail }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<OsdaTask, TableError> {
        read_task(s.as_bytes(), ClassCounts::default())
    }

    #[test]
    fn minimal_table() {
        let t = parse("split,label,f1,f2\nsource,0,1.5,2\ntarget,-1,0.25,-3\n").unwrap();
        assert_eq!((t.n_source(), t.n_target(), t.dim()), (1, 1, 2));
        assert_eq!(t.target_y, vec![None]);
        assert_eq!((t.n_common, t.n_total), (1, 2));
    }

    #[test]
    fn short_row_names_its_line() {
        let err = parse("split,label,f1,f2\nsource,0,1,2\ntarget,1,0.5\n").unwrap_err();
        assert!(matches!(err, TableError::Malformed { line: 3, .. }), "{err}");
        assert!(err.to_string().starts_with("line 3:"));
    }

    #[test]
    fn non_numeric_cell_names_its_line() {
        let err = parse("split,label,f1\nsource,0,x\ntarget,0,1\n").unwrap_err();
        assert!(matches!(err, TableError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_split_is_rejected() {
        assert!(matches!(parse("split,label,f1\nsource,0,1\n"), Err(TableError::EmptySplit("target"))));
        assert!(matches!(parse("split,label,f1\ntarget,0,1\n"), Err(TableError::EmptySplit("source"))));
    }

    #[test]
    fn unknown_split_is_rejected() {
        assert!(matches!(parse("split,label,f1\nvalid,0,1\n"), Err(TableError::Malformed { line: 2, .. })));
    }
}
