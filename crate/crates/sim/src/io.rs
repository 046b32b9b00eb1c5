//! Files written and read by the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use dgp_core::data::Dataset;
use dgp_core::gp_sparse::SparseGp;
use dgp_core::snapshot::{sparse_from_json, sparse_to_json};
use nalgebra::DMatrix;

use crate::error::{HarnessError, Result};
use crate::experiment::MissionResult;

pub const GP_FILE: &str = "long_gp.json";
pub const DATA_FILE: &str = "training.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn save_gp(path: &Path, gp: &SparseGp<f64>) -> Result<()> {
    write_text(path, &sparse_to_json(gp)?)
}

pub fn load_gp(path: &Path) -> Result<SparseGp<f64>> {
    sparse_from_json(&read_text(path)?).map_err(|e| HarnessError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Header `x0..x{d-1},y0..y{p-1}`, one row per pair.
pub fn dataset_to_csv(data: &Dataset<f64>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (0..data.input_dim())
        .map(|i| format!("x{i}"))
        .chain((0..data.output_dim()).map(|o| format!("y{o}")))
        .collect();
    w.write_record(&header).expect("writing to memory");
    for i in 0..data.len() {
        let rec: Vec<String> = data
            .input_row(i)
            .iter()
            .chain(data.output_row(i).iter())
            .map(|v| v.to_string())
            .collect();
        w.write_record(&rec).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8")
}

pub fn dataset_from_csv(text: &str, path: &Path) -> Result<Dataset<f64>> {
    let bad = |message: String| HarnessError::Format {
        path: path.display().to_string(),
        message,
    };
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let d = header.iter().filter(|h| h.starts_with('x')).count();
    let p = header.iter().filter(|h| h.starts_with('y')).count();
    if d + p != header.len() || d == 0 || p == 0 {
        return Err(bad("expected columns x0.. followed by y0..".into()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| bad(format!("'{s}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        xs.extend_from_slice(&vals[..d]);
        ys.extend_from_slice(&vals[d..]);
    }
    let n = xs.len() / d;
    Dataset::new(DMatrix::from_row_slice(n, d, &xs), DMatrix::from_row_slice(n, p, &ys)).map_err(|e| bad(e.to_string()))
}

pub fn save_dataset(path: &Path, data: &Dataset<f64>) -> Result<()> {
    write_text(path, &dataset_to_csv(data))
}

pub fn load_dataset(path: &Path) -> Result<Dataset<f64>> {
    dataset_from_csv(&read_text(path)?, path)
}

pub fn mission_file(out: &Path, prefix: &str, result: &MissionResult) -> PathBuf {
    out.join(format!("{prefix}{}_iter{}.csv", result.log.variant, result.log.iteration))
}

pub fn save_mission(path: &Path, result: &MissionResult) -> Result<()> {
    write_text(path, &result.log.to_csv_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_csv_round_trip() {
        let x = DMatrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64 * 0.1 + 1e-17);
        let y = DMatrix::from_fn(5, 2, |i, j| ((i + j) as f64).sin());
        let d = Dataset::new(x, y).unwrap();
        let text = dataset_to_csv(&d);
        assert!(text.starts_with("x0,x1,x2,y0,y1\n"));
        let back = dataset_from_csv(&text, Path::new("mem")).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn malformed_dataset_is_a_format_error() {
        let e = dataset_from_csv("a,b\n1,2\n", Path::new("mem")).unwrap_err();
        assert!(e.is_user_error());
        let e = dataset_from_csv("x0,y0\n1,zz\n", Path::new("mem")).unwrap_err();
        assert!(e.is_user_error());
    }
}
