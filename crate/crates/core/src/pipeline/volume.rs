//! Voxel time-series volumes and their on-disk formats.
//!
//! Voxels are ordered x fastest, then y, then z, in memory and in every file.
//!
//! CIVT layout, little-endian: magic `CIVT`, `u32` version (1), `u32` nx, ny,
//! nz, m, `f64` t_lo, t_hi, then `n * m` `f32` intensities, voxel-major with
//! each voxel's series contiguous. The grid is `m` equally spaced times from
//! t_lo to t_hi.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basis::{SeriesMatrix, TimeGrid};
use crate::error::{Error, Result};

pub const CIVT_MAGIC: &[u8; 4] = b"CIVT";
pub const CIVT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i % self.nx, (i / self.nx) % self.ny, i / (self.nx * self.ny))
    }

    fn mismatch(&self, got: usize) -> Error {
        Error::DimsMismatch {
            nx: self.nx,
            ny: self.ny,
            nz: self.nz,
            expected: self.len(),
            got,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    Civt,
    Csv,
}

/// One series per voxel, all sampled on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSeries {
    dims: Dims,
    grid: TimeGrid,
    series: SeriesMatrix,
}

impl VolumeSeries {
    pub fn new(dims: Dims, grid: TimeGrid, series: SeriesMatrix) -> Result<Self> {
        if series.n() != dims.len() {
            return Err(dims.mismatch(series.n()));
        }
        if series.m() != grid.len() {
            return Err(Error::ShapeMismatch {
                what: "volume series length",
                expected: grid.len(),
                got: series.m(),
            });
        }
        Ok(Self { dims, grid, series })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn series(&self) -> &SeriesMatrix {
        &self.series
    }

    pub fn n(&self) -> usize {
        self.series.n()
    }

    pub fn m(&self) -> usize {
        self.series.m()
    }

    pub fn load(path: &Path, format: VolumeFormat) -> Result<Self> {
        load_volume(path, format)
    }

    pub fn save(&self, path: &Path, format: VolumeFormat) -> Result<()> {
        let file = BufWriter::new(std::fs::File::create(path)?);
        match format {
            VolumeFormat::Civt => self.write_civt(file),
            VolumeFormat::Csv => self.write_csv(file),
        }
    }

    /// Writes CIVT. Values are narrowed to `f32`; the grid must be uniform.
    pub fn write_civt<W: Write>(&self, mut w: W) -> Result<()> {
        let (lo, hi) = (self.grid.first(), self.grid.last());
        let uniform = TimeGrid::uniform(lo, hi, self.m())?;
        let span = (hi - lo).abs().max(1.0);
        if uniform
            .points()
            .iter()
            .zip(self.grid.points())
            .any(|(a, b)| (a - b).abs() > 1e-9 * span)
        {
            return Err(Error::InvalidGrid("CIVT stores only uniform grids".into()));
        }
        w.write_all(CIVT_MAGIC)?;
        for v in [CIVT_VERSION, u32_of(self.dims.nx)?, u32_of(self.dims.ny)?, u32_of(self.dims.nz)?, u32_of(self.m())?] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&lo.to_le_bytes())?;
        w.write_all(&hi.to_le_bytes())?;
        for &v in self.series.values() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_civt<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CIVT_MAGIC {
            return Err(Error::InvalidConfig("not a CIVT file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CIVT_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported CIVT version {version}")));
        }
        let dims = Dims::new(
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        );
        let m = read_u32(&mut r)? as usize;
        let lo = read_f64(&mut r)?;
        let hi = read_f64(&mut r)?;
        let grid = TimeGrid::uniform(lo, hi, m)?;
        let n = dims.len();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * m * 4 {
            return Err(dims.mismatch(bytes.len() / (4 * m.max(1))));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Self::new(dims, grid, SeriesMatrix::new(n, m, values)?)
    }

    /// Writes CSV with header `x,y,z,t1..tm` when the grid is `1..=m`, and
    /// the time values themselves as column names otherwise.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let counting = self
            .grid
            .points()
            .iter()
            .enumerate()
            .all(|(j, &t)| t == (j + 1) as f64);
        let mut header = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        header.extend(self.grid.points().iter().enumerate().map(|(j, t)| {
            if counting {
                format!("t{}", j + 1)
            } else {
                t.to_string()
            }
        }));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let (x, y, z) = self.dims.coords(i);
            let mut record = vec![x.to_string(), y.to_string(), z.to_string()];
            record.extend(self.series.row(i).iter().map(f64::to_string));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads CSV with header `x,y,z` followed by one column per time. Time
    /// columns named `t<j>` sit at time `j`; numeric names are the times.
    /// Dims are one past the largest coordinates, and every voxel must appear
    /// exactly once.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers()?.clone();
        let names: Vec<&str> = headers.iter().map(str::trim).collect();
        if names.len() < 4 || names[..3] != ["x", "y", "z"] {
            return Err(Error::InvalidConfig(
                "volume CSV header must start with x,y,z and name at least one time".into(),
            ));
        }
        let times = names[3..]
            .iter()
            .map(|name| parse_time(name))
            .collect::<Result<Vec<f64>>>()?;
        let grid = TimeGrid::new(times)?;
        let m = grid.len();

        let mut rows: Vec<((usize, usize, usize), Vec<f64>)> = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != m + 3 {
                return Err(Error::ShapeMismatch {
                    what: "volume CSV row",
                    expected: m + 3,
                    got: record.len(),
                });
            }
            let coord = |j: usize| -> Result<usize> {
                record[j].trim().parse().map_err(|_| {
                    Error::InvalidConfig(format!("bad voxel coordinate {:?}", &record[j]))
                })
            };
            let xyz = (coord(0)?, coord(1)?, coord(2)?);
            let values = (3..m + 3)
                .map(|j| {
                    record[j].trim().parse::<f64>().map_err(|_| {
                        Error::InvalidConfig(format!("bad intensity {:?}", &record[j]))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push((xyz, values));
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        let dims = Dims::new(
            rows.iter().map(|r| r.0 .0).max().unwrap_or(0) + 1,
            rows.iter().map(|r| r.0 .1).max().unwrap_or(0) + 1,
            rows.iter().map(|r| r.0 .2).max().unwrap_or(0) + 1,
        );
        if rows.len() != dims.len() {
            return Err(dims.mismatch(rows.len()));
        }
        let mut values = vec![0.0; dims.len() * m];
        let mut seen = vec![false; dims.len()];
        for ((x, y, z), row) in rows {
            let i = dims.index(x, y, z);
            if seen[i] {
                return Err(Error::InvalidConfig(format!("voxel ({x},{y},{z}) appears twice")));
            }
            seen[i] = true;
            values[i * m..(i + 1) * m].copy_from_slice(&row);
        }
        Self::new(dims, grid, SeriesMatrix::new(dims.len(), m, values)?)
    }
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<VolumeSeries> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let with_path = |e: Error| match e {
        Error::Io(_) | Error::Csv(_) => e,
        other => Error::Format {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    match format {
        VolumeFormat::Civt => VolumeSeries::read_civt(file),
        VolumeFormat::Csv => VolumeSeries::read_csv(file),
    }
    .map_err(|e| match e {
        // Keep the numerical and shape variants their callers match on.
        Error::NonFinite(_) | Error::DimsMismatch { .. } => e,
        other => with_path(other),
    })
}

fn parse_time(name: &str) -> Result<f64> {
    if let Ok(t) = name.parse::<f64>() {
        return Ok(t);
    }
    name.strip_prefix('t')
        .and_then(|j| j.parse::<usize>().ok())
        .map(|j| j as f64)
        .ok_or_else(|| Error::InvalidConfig(format!("bad time column name {name:?}")))
}

pub(crate) fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{v} does not fit in u32")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
