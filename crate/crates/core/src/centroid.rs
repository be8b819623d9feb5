//! Classed nuclei point sets and their CSV form (`x,y,class`).

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default spatial calibration (×20 scan).
pub const DEFAULT_MICRONS_PER_PIXEL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellClass {
    #[serde(rename = "neg")]
    Ki67Neg,
    #[serde(rename = "pos")]
    Ki67Pos,
}

impl CellClass {
    pub const ALL: [CellClass; 2] = [CellClass::Ki67Neg, CellClass::Ki67Pos];

    /// Heatmap / network channel index.
    pub fn channel(self) -> usize {
        match self {
            CellClass::Ki67Neg => 0,
            CellClass::Ki67Pos => 1,
        }
    }

    pub fn swapped(self) -> Self {
        match self {
            CellClass::Ki67Neg => CellClass::Ki67Pos,
            CellClass::Ki67Pos => CellClass::Ki67Neg,
        }
    }
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellClass::Ki67Neg => "neg",
            CellClass::Ki67Pos => "pos",
        })
    }
}

impl FromStr for CellClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "neg" => Ok(CellClass::Ki67Neg),
            "pos" => Ok(CellClass::Ki67Pos),
            other => Err(Error::InvalidArgument(format!("unknown cell class {other:?}"))),
        }
    }
}

/// A nucleus center in continuous pixel coordinates (pixel `i` spans `[i, i+1)`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
    pub class: CellClass,
}

impl Centroid {
    pub fn new(x: f64, y: f64, class: CellClass) -> Self {
        Self { x, y, class }
    }

    /// Center of pixel `(px, py)`.
    pub fn at_pixel(px: usize, py: usize, class: CellClass) -> Self {
        Self { x: px as f64 + 0.5, y: py as f64 + 0.5, class }
    }

    /// Index of the pixel containing this point.
    pub fn pixel(&self) -> (usize, usize) {
        (self.x.floor().max(0.0) as usize, self.y.floor().max(0.0) as usize)
    }

    pub fn dist(&self, other: &Centroid) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet {
    centroids: Vec<Centroid>,
    width: usize,
    height: usize,
    microns_per_pixel: f64,
}

impl CentroidSet {
    pub fn new(width: usize, height: usize, microns_per_pixel: f64) -> Self {
        assert!(microns_per_pixel > 0.0, "microns_per_pixel must be positive");
        Self { centroids: Vec::new(), width, height, microns_per_pixel }
    }

    pub fn from_centroids(
        centroids: Vec<Centroid>,
        width: usize,
        height: usize,
        microns_per_pixel: f64,
    ) -> Result<Self> {
        let mut set = Self::new(width, height, microns_per_pixel);
        for c in centroids {
            set.push(c)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, c: Centroid) -> Result<()> {
        let inside = c.x >= 0.0 && c.y >= 0.0 && c.x < self.width as f64 && c.y < self.height as f64;
        if !inside || !c.x.is_finite() || !c.y.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "centroid ({}, {}) outside {}x{}",
                c.x, c.y, self.width, self.height
            )));
        }
        self.centroids.push(c);
        Ok(())
    }

    pub fn centroids(&self) -> &[Centroid] {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn microns_per_pixel(&self) -> f64 {
        self.microns_per_pixel
    }

    pub fn count(&self, class: CellClass) -> usize {
        self.centroids.iter().filter(|c| c.class == class).count()
    }

    pub fn of_class(&self, class: CellClass) -> impl Iterator<Item = &Centroid> + '_ {
        self.centroids.iter().filter(move |c| c.class == class)
    }

    /// Points translated by `(-dx, -dy)` that fall inside a `w × h` window.
    pub fn window(&self, dx: usize, dy: usize, w: usize, h: usize) -> CentroidSet {
        let mut out = CentroidSet::new(w, h, self.microns_per_pixel);
        for c in &self.centroids {
            let (x, y) = (c.x - dx as f64, c.y - dy as f64);
            if x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
                out.centroids.push(Centroid::new(x, y, c.class));
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "y", "class"])?;
        for c in &self.centroids {
            w.write_record([format!("{}", c.x), format!("{}", c.y), c.class.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `x,y,class` rows. Image size and calibration are not part of the CSV.
    pub fn read_csv<R: Read>(reader: R, width: usize, height: usize, mpp: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().map(str::trim).collect::<Vec<_>>() != ["x", "y", "class"] {
            return Err(Error::InvalidArgument(format!("bad centroid CSV header {headers:?}")));
        }
        let mut set = CentroidSet::new(width, height, mpp);
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i].trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("{e}")))
            };
            set.push(Centroid::new(parse(0)?, parse(1)?, rec[2].parse()?))?;
        }
        Ok(set)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>, width: usize, height: usize, mpp: f64) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, width, height, mpp)
    }
}
