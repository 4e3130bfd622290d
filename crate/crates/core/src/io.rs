//! CSV interchange: one point per row, columns named `x0,…` or `y0,…,x0,…`.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

pub fn state_headers(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}

pub fn paired_headers(d: usize, n: usize) -> Vec<String> {
    (0..d).map(|i| format!("y{i}")).chain(state_headers(n)).collect()
}

/// Write the columns of `points` as rows. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_points<W: Write>(w: W, headers: &[String], points: &Mat) -> Result<()> {
    if headers.len() != points.rows() {
        return Err(Error::shape(
            "write_points",
            format!("{} headers for {}-dim points", headers.len(), points.rows()),
        ));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(headers)?;
    let mut row = Vec::with_capacity(points.rows());
    for k in 0..points.cols() {
        row.clear();
        row.extend((0..points.rows()).map(|i| format!("{:?}", points[(i, k)])));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_points_file(path: &Path, headers: &[String], points: &Mat) -> Result<()> {
    write_points(File::create(path)?, headers, points)
}

/// Header and points (as columns) of a CSV document.
pub fn read_points<R: Read>(r: R) -> Result<(Vec<String>, Mat)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() {
        return Err(Error::invalid("csv has no columns"));
    }
    let mut data = Vec::new();
    let mut count = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("row {}: not a number: {field:?}", count + 1)))?;
            data.push(v);
        }
        count += 1;
    }
    let rows_major = Mat::from_vec(count, headers.len(), data)?;
    Ok((headers, rows_major.transpose()))
}

pub fn read_points_file(path: &Path) -> Result<(Vec<String>, Mat)> {
    read_points(File::open(path)?)
}

/// Split points read with [`read_points`] into `(y, x)` by header prefix.
pub fn split_paired(headers: &[String], points: &Mat) -> Result<(Mat, Mat)> {
    let d = headers.iter().take_while(|h| h.starts_with('y')).count();
    if headers[d..].iter().any(|h| !h.starts_with('x')) {
        return Err(Error::invalid("expected y-columns followed by x-columns"));
    }
    Ok((points.row_slice(0, d), points.row_slice(d, points.rows() - d)))
}
