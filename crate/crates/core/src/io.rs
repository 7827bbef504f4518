//! City directories on disk.
//!
//! ```text
//! <city>/features.csv   header row of feature names, then N rows
//! <city>/adjacency.csv  N×N of 0/1, no header
//! <city>/distance.csv   N×N km, no header
//! <city>/od.csv         N×N nonnegative flows, no header
//! <city>/meta.json      CityMeta
//! ```
//!
//! A dataset directory holds one such directory per city. Region ids are
//! positional (`r0`, `r1`, …).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph_model::{City, CityMeta, Dataset, ODMatrix, UrbanGraph};

pub const FEATURES_FILE: &str = "features.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const DISTANCE_FILE: &str = "distance.csv";
pub const OD_FILE: &str = "od.csv";
pub const META_FILE: &str = "meta.json";

/// Shortest decimal representation that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v}")
    }
}

fn parse_cell(path: &Path, row: usize, col: usize, s: &str) -> Result<f64> {
    let v: f64 =
        s.trim().parse().map_err(|_| Error::format(path, Some(row), format!("column {col}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::format(path, Some(row), format!("column {col}: non-finite value")));
    }
    Ok(v)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize);
    Error::format(path, row, e.to_string())
}

/// Reads a headerless numeric matrix. Row numbers in errors are 1-based file
/// lines.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = k + 1;
        let row = rec.iter().enumerate().map(|(c, s)| parse_cell(path, line, c, s)).collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    to_array(path, rows, 1)
}

fn to_array(path: &Path, rows: Vec<Vec<f64>>, first_line: usize) -> Result<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::format(path, None, "empty matrix"));
    }
    for (k, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::format(
                path,
                Some(k + first_line),
                format!("expected {ncols} columns, found {}", r.len()),
            ));
        }
    }
    let n = rows.len();
    Ok(Array2::from_shape_vec((n, ncols), rows.into_iter().flatten().collect()).expect("rectangular"))
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_error(path, e))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| fmt_f64(*v))).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `features.csv`: header of names, then numeric rows.
pub fn read_features(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| csv_error(path, e))?;
    let names: Vec<String> =
        rdr.headers().map_err(|e| csv_error(path, e))?.iter().map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = k + 2;
        rows.push(rec.iter().enumerate().map(|(c, s)| parse_cell(path, line, c, s)).collect::<Result<Vec<_>>>()?);
    }
    let x = to_array(path, rows, 2)?;
    if x.ncols() != names.len() {
        return Err(Error::format(path, Some(1), format!("{} names for {} columns", names.len(), x.ncols())));
    }
    Ok((names, x))
}

pub fn write_features(path: &Path, names: &[String], x: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(names).map_err(|e| csv_error(path, e))?;
    for row in x.rows() {
        w.write_record(row.iter().map(|v| fmt_f64(*v))).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<CityMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::format(path, None, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, Some(e.line()), e.to_string()))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Invalid(m) | Error::Shape(m) => Error::format(path, None, m),
        other => other,
    })
}

pub fn read_city(dir: &Path) -> Result<City> {
    let meta = read_meta(&dir.join(META_FILE))?;
    let fpath = dir.join(FEATURES_FILE);
    let (names, x) = read_features(&fpath)?;
    let adjacency = read_matrix(&dir.join(ADJACENCY_FILE))?;
    let distance = read_matrix(&dir.join(DISTANCE_FILE))?;
    let od_path = dir.join(OD_FILE);
    let flows = read_matrix(&od_path)?;
    if x.nrows() != meta.n_regions {
        return Err(Error::format(
            &fpath,
            None,
            format!("{} rows but meta.json declares n_regions = {}", x.nrows(), meta.n_regions),
        ));
    }
    if meta.d1 + meta.d2 != names.len() {
        return Err(Error::format(
            dir.join(META_FILE),
            None,
            format!("d1 + d2 = {} but features.csv has {} columns", meta.d1 + meta.d2, names.len()),
        ));
    }
    if !names.contains(&meta.population_column) {
        return Err(Error::format(
            dir.join(META_FILE),
            None,
            format!("population column `{}` is not a feature", meta.population_column),
        ));
    }
    let ids = (0..meta.n_regions).map(|i| format!("r{i}")).collect();
    let graph = with_path(dir, UrbanGraph::new(ids, names, x, adjacency, distance))?;
    if flows.dim() != (meta.n_regions, meta.n_regions) {
        return Err(Error::format(
            &od_path,
            None,
            format!("shape {:?}, expected {n}x{n}", flows.dim(), n = meta.n_regions),
        ));
    }
    let od = with_path(&od_path, ODMatrix::raw(flows))?;
    Ok(City { meta, graph, od })
}

pub fn write_city(dir: &Path, city: &City) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_features(&dir.join(FEATURES_FILE), city.graph.feature_names(), city.graph.features())?;
    write_matrix(&dir.join(ADJACENCY_FILE), city.graph.adjacency())?;
    write_matrix(&dir.join(DISTANCE_FILE), city.graph.distance())?;
    write_matrix(&dir.join(OD_FILE), city.od.flows())?;
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&city.meta)? + "\n")?;
    Ok(())
}

/// City subdirectories (those containing `meta.json`), sorted by name.
pub fn city_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::format(root, None, "not a directory"));
    }
    let mut dirs: Vec<PathBuf> =
        fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join(META_FILE).is_file()).collect();
    dirs.sort();
    Ok(dirs)
}

/// Loads every city under `root`, ordered by directory name.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let dirs = city_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::format(root, None, "no city directories found"));
    }
    let cities = dirs.iter().map(|d| read_city(d)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(cities))
}

pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(root)?;
    for c in &ds.cities {
        write_city(&root.join(&c.meta.city_id), c)?;
    }
    Ok(())
}
