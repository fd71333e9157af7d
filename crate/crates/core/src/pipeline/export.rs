//! Cluster maps, mean functions and slice images.
//!
//! CIVL layout, little-endian: magic `CIVL`, `u32` version (1), `u32` nx, ny,
//! nz, `u32` k, then per voxel (x fastest) a `u16` label in `1..=k` and a `u8`
//! trimmed flag.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::volume::{read_u32, u32_of, Dims};
use crate::basis::{BasisSystem, TimeGrid};
use crate::error::{Error, Result};

pub const CIVL_MAGIC: &[u8; 4] = b"CIVL";
pub const CIVL_VERSION: u32 = 1;

/// Per-voxel cluster labels, 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterVolume {
    pub dims: Dims,
    pub k: usize,
    pub labels: Vec<usize>,
    /// Whether the voxel was outside the retained set of the final fit.
    pub trimmed: Vec<bool>,
}

impl ClusterVolume {
    pub fn new(dims: Dims, k: usize, labels: Vec<usize>, trimmed: Vec<bool>) -> Result<Self> {
        let cv = Self {
            dims,
            k,
            labels,
            trimmed,
        };
        cv.validate()?;
        Ok(cv)
    }

    fn validate(&self) -> Result<()> {
        let n = self.dims.len();
        for len in [self.labels.len(), self.trimmed.len()] {
            if len != n {
                return Err(Error::DimsMismatch {
                    nx: self.dims.nx,
                    ny: self.dims.ny,
                    nz: self.dims.nz,
                    expected: n,
                    got: len,
                });
            }
        }
        if self.k > usize::from(u16::MAX) {
            return Err(Error::InvalidConfig(format!("k = {} exceeds the CIVL limit", self.k)));
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l == 0 || l > self.k) {
            return Err(Error::LabelOutOfRange { label, k: self.k });
        }
        Ok(())
    }

    pub fn trimmed_count(&self) -> usize {
        self.trimmed.iter().filter(|t| **t).count()
    }

    /// CSV `x,y,z,label,trimmed`, one row per voxel in x-fastest order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.validate()?;
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["x", "y", "z", "label", "trimmed"])?;
        for (i, (&label, &trimmed)) in self.labels.iter().zip(&self.trimmed).enumerate() {
            let (x, y, z) = self.dims.coords(i);
            w.serialize((x, y, z, label, u8::from(trimmed)))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`ClusterVolume::write_csv`]. Dims come from
    /// the largest coordinates and `k` from the largest label.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x", "y", "z", "label", "trimmed"] {
            return Err(Error::InvalidConfig("label CSV header must be x,y,z,label,trimmed".into()));
        }
        let rows: Vec<(usize, usize, usize, usize, u8)> =
            reader.deserialize().collect::<std::result::Result<_, _>>()?;
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        let dims = Dims::new(
            rows.iter().map(|r| r.0).max().unwrap_or(0) + 1,
            rows.iter().map(|r| r.1).max().unwrap_or(0) + 1,
            rows.iter().map(|r| r.2).max().unwrap_or(0) + 1,
        );
        if rows.len() != dims.len() {
            return Err(Error::DimsMismatch {
                nx: dims.nx,
                ny: dims.ny,
                nz: dims.nz,
                expected: dims.len(),
                got: rows.len(),
            });
        }
        let mut labels = vec![0; dims.len()];
        let mut trimmed = vec![false; dims.len()];
        for (x, y, z, label, flag) in rows {
            let i = dims.index(x, y, z);
            labels[i] = label;
            trimmed[i] = flag != 0;
        }
        let k = labels.iter().copied().max().unwrap_or(0);
        Self::new(dims, k, labels, trimmed)
    }

    pub fn write_civl<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        w.write_all(CIVL_MAGIC)?;
        for v in [
            CIVL_VERSION,
            u32_of(self.dims.nx)?,
            u32_of(self.dims.ny)?,
            u32_of(self.dims.nz)?,
            u32_of(self.k)?,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for (&label, &trimmed) in self.labels.iter().zip(&self.trimmed) {
            // validate() bounds labels by k <= u16::MAX.
            w.write_all(&(label as u16).to_le_bytes())?;
            w.write_all(&[u8::from(trimmed)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_civl<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CIVL_MAGIC {
            return Err(Error::InvalidConfig("not a CIVL file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CIVL_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported CIVL version {version}")));
        }
        let dims = Dims::new(
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        );
        let k = read_u32(&mut r)? as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != dims.len() * 3 {
            return Err(Error::DimsMismatch {
                nx: dims.nx,
                ny: dims.ny,
                nz: dims.nz,
                expected: dims.len(),
                got: bytes.len() / 3,
            });
        }
        let labels = bytes
            .chunks_exact(3)
            .map(|c| usize::from(u16::from_le_bytes([c[0], c[1]])))
            .collect();
        let trimmed = bytes.chunks_exact(3).map(|c| c[2] != 0).collect();
        Self::new(dims, k, labels, trimmed)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn save_civl(&self, path: &Path) -> Result<()> {
        self.write_civl(BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load_civl(path: &Path) -> Result<Self> {
        Self::read_civl(BufReader::new(std::fs::File::open(path)?))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(BufReader::new(std::fs::File::open(path)?))
    }
}

/// Cluster mean curves sampled on the input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFunctions {
    pub times: Vec<f64>,
    /// `curves[c][j]` is cluster `c + 1` at `times[j]`.
    pub curves: Vec<Vec<f64>>,
}

impl MeanFunctions {
    /// Reconstructs every coefficient vector in `means` on `grid`.
    pub fn from_coefficients(
        system: &BasisSystem,
        grid: &TimeGrid,
        means: &[Vec<f64>],
    ) -> Result<Self> {
        let curves = means
            .iter()
            .map(|mu| {
                grid.points()
                    .iter()
                    .map(|&t| system.reconstruct(mu, t))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            times: grid.points().to_vec(),
            curves,
        })
    }

    pub fn k(&self) -> usize {
        self.curves.len()
    }

    /// CSV `t,mu_1..mu_k`, one row per time.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.k()).map(|c| format!("mu_{c}")));
        w.write_record(&header)?;
        for (j, t) in self.times.iter().enumerate() {
            let mut record = vec![t.to_string()];
            record.extend(self.curves.iter().map(|curve| curve[j].to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let k = reader.headers()?.len().saturating_sub(1);
        let mut times = Vec::new();
        let mut curves = vec![Vec::new(); k];
        for record in reader.deserialize::<Vec<f64>>() {
            let record = record?;
            times.push(record[0]);
            for (curve, v) in curves.iter_mut().zip(&record[1..]) {
                curve.push(*v);
            }
        }
        Ok(Self { times, curves })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(BufWriter::new(std::fs::File::create(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Fixed colours indexed by `label % 16`.
pub const PALETTE: [[u8; 3]; 16] = [
    [128, 128, 128],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
];

/// Binary PPM of one slice, one pixel per voxel. For a z slice, columns run
/// along x and rows along y; x slices use (y, z) and y slices (x, z).
/// Trimmed voxels are black.
pub fn render_slice_ppm(cv: &ClusterVolume, axis: Axis, index: usize) -> Result<Vec<u8>> {
    let d = cv.dims;
    let (limit, width, height) = match axis {
        Axis::X => (d.nx, d.ny, d.nz),
        Axis::Y => (d.ny, d.nx, d.nz),
        Axis::Z => (d.nz, d.nx, d.ny),
    };
    if index >= limit {
        return Err(Error::InvalidConfig(format!(
            "slice {index} is outside 0..{limit} along {axis:?}"
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for row in 0..height {
        for col in 0..width {
            let i = match axis {
                Axis::X => d.index(index, col, row),
                Axis::Y => d.index(col, index, row),
                Axis::Z => d.index(col, row, index),
            };
            let colour = if cv.trimmed[i] {
                [0, 0, 0]
            } else {
                PALETTE[cv.labels[i] % PALETTE.len()]
            };
            out.extend_from_slice(&colour);
        }
    }
    Ok(out)
}

pub fn render_slice(cv: &ClusterVolume, axis: Axis, index: usize, path: &Path) -> Result<()> {
    let bytes = render_slice_ppm(cv, axis, index)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_labels() -> ClusterVolume {
        ClusterVolume::new(Dims::new(2, 2, 1), 4, vec![1, 2, 3, 4], vec![false, true, false, false])
            .unwrap()
    }

    #[test]
    fn label_csv_rows_in_x_fastest_order() {
        let mut buf = Vec::new();
        four_labels().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "x,y,z,label,trimmed\n0,0,0,1,0\n1,0,0,2,1\n0,1,0,3,0\n1,1,0,4,0\n"
        );
        assert_eq!(ClusterVolume::read_csv(buf.as_slice()).unwrap(), four_labels());
    }

    #[test]
    fn civl_round_trip() {
        let cv = four_labels();
        let mut buf = Vec::new();
        cv.write_civl(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 5 * 4 + 4 * 3);
        let back = ClusterVolume::read_civl(buf.as_slice()).unwrap();
        assert_eq!(back, cv);
        let mut again = Vec::new();
        back.write_civl(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn labels_out_of_range_are_rejected() {
        let mut cv = four_labels();
        cv.k = 3;
        assert!(matches!(
            cv.write_csv(Vec::new()),
            Err(Error::LabelOutOfRange { label: 4, k: 3 })
        ));
        assert!(cv.write_civl(Vec::new()).is_err());
        assert!(ClusterVolume::new(Dims::new(1, 1, 1), 2, vec![0], vec![false]).is_err());
    }

    #[test]
    fn single_pixel_slice() {
        let cv = ClusterVolume::new(Dims::new(1, 1, 1), 1, vec![1], vec![false]).unwrap();
        let ppm = render_slice_ppm(&cv, Axis::Z, 0).unwrap();
        let mut expected = b"P6\n1 1\n255\n".to_vec();
        expected.extend_from_slice(&PALETTE[1]);
        assert_eq!(ppm, expected);
        assert!(render_slice_ppm(&cv, Axis::Z, 1).is_err());
    }

    #[test]
    fn slices_follow_axes() {
        let dims = Dims::new(3, 2, 2);
        let labels: Vec<usize> = (0..12).map(|i| dims.coords(i).0 + 1).collect();
        let cv = ClusterVolume::new(dims, 3, labels, vec![false; 12]).unwrap();
        let z = render_slice_ppm(&cv, Axis::Z, 1).unwrap();
        assert!(z.starts_with(b"P6\n3 2\n255\n"));
        let x = render_slice_ppm(&cv, Axis::X, 2).unwrap();
        let header = b"P6\n2 2\n255\n".len();
        // Every voxel of the x = 2 slice carries label 3.
        assert!(x[header..].chunks(3).all(|p| p == PALETTE[3]));
        assert_eq!(render_slice_ppm(&cv, Axis::Y, 0).unwrap().len(), header + 3 * 2 * 3);
    }

    #[test]
    fn trimmed_voxels_are_black_and_output_is_stable() {
        let cv = four_labels();
        let a = render_slice_ppm(&cv, Axis::Z, 0).unwrap();
        let header = b"P6\n2 2\n255\n".len();
        assert_eq!(&a[header + 3..header + 6], &[0, 0, 0]);
        assert_eq!(a, render_slice_ppm(&cv, Axis::Z, 0).unwrap());
    }

    #[test]
    fn mean_functions_csv() {
        let system = BasisSystem::cubic(0.0, 1.0, 4).unwrap();
        let grid = TimeGrid::uniform(0.0, 1.0, 5).unwrap();
        let mf = MeanFunctions::from_coefficients(&system, &grid, &[vec![0.0; 4]]).unwrap();
        let mut buf = Vec::new();
        mf.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,mu_1\n0,0\n0.25,0\n"));
        assert_eq!(MeanFunctions::read_csv(buf.as_slice()).unwrap(), mf);
    }
}
