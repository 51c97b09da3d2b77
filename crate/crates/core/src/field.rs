//! Rectilinear space-time grids and cell-centered sampled fields, with CSV /
//! flat-binary serialization plus a JSON sidecar describing the geometry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("value count {got} does not match grid cardinality {expected}")]
    ValueCountMismatch { expected: usize, got: usize },
    #[error("axis edges must be strictly increasing")]
    BadAxis,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata error: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("malformed data file: {0}")]
    Malformed(String),
}

/// One grid axis, stored as cell edges; values live at cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub edges: Vec<f64>,
}

impl Axis {
    pub fn uniform(a: f64, b: f64, ncells: usize) -> Self {
        assert!(b > a && ncells > 0);
        let edges = (0..=ncells)
            .map(|k| a + (b - a) * k as f64 / ncells as f64)
            .collect();
        Axis { edges }
    }

    /// Geometrically graded cells, finest at `a`: widths grow by `1/ratio`
    /// moving away from `a` (ratio < 1 grades toward `a`).
    pub fn graded(a: f64, b: f64, ncells: usize, ratio: f64) -> Self {
        assert!(b > a && ncells > 0 && ratio > 0.0);
        let mut widths = Vec::with_capacity(ncells);
        let mut w = 1.0;
        for _ in 0..ncells {
            widths.push(w);
            w /= ratio;
        }
        let total: f64 = widths.iter().sum();
        let mut edges = Vec::with_capacity(ncells + 1);
        let mut x = a;
        edges.push(a);
        for w in widths {
            x += (b - a) * w / total;
            edges.push(x);
        }
        *edges.last_mut().unwrap() = b;
        Axis { edges }
    }

    /// Geometric grading from `a` with the first cell no wider than `finest`;
    /// cell widths grow by `1/ratio` away from `a`.
    pub fn graded_to_resolve(a: f64, b: f64, finest: f64, ratio: f64) -> Self {
        assert!(b > a && finest > 0.0 && ratio > 0.0 && ratio < 1.0);
        let mut widths = vec![finest.min(b - a)];
        let mut total: f64 = widths[0];
        while total < b - a && widths.len() < 96 {
            let w = widths.last().unwrap() / ratio;
            widths.push(w.min(b - a - total));
            total += *widths.last().unwrap();
        }
        let mut edges = Vec::with_capacity(widths.len() + 1);
        let mut x = a;
        edges.push(a);
        for w in &widths {
            x += w;
            edges.push(x.min(b));
        }
        *edges.last_mut().unwrap() = b;
        edges.dedup();
        Axis { edges }
    }

    pub fn ncells(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn lo(&self) -> f64 {
        self.edges[0]
    }

    pub fn hi(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.edges[i] + self.edges[i + 1])
    }

    pub fn width(&self, i: usize) -> f64 {
        self.edges[i + 1] - self.edges[i]
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.ncells()).map(|i| self.center(i)).collect()
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.edges.len() < 2 || !self.edges.windows(2).all(|w| w[1] > w[0]) {
            return Err(FieldError::BadAxis);
        }
        Ok(())
    }

    /// Merge adjacent cell pairs (a trailing odd cell is kept as-is).
    pub fn coarsened(&self) -> Axis {
        let n = self.ncells();
        let mut edges = Vec::new();
        let mut i = 0;
        edges.push(self.edges[0]);
        while i < n {
            let step = if i + 1 < n { 2 } else { 1 };
            i += step;
            edges.push(self.edges[i]);
        }
        Axis { edges }
    }
}

/// Tensor-product space-time grid: spatial axes plus a time axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub space: Vec<Axis>,
    pub time: Axis,
}

impl Grid {
    pub fn dim(&self) -> usize {
        self.space.len()
    }

    pub fn ncells_space(&self) -> usize {
        self.space.iter().map(|a| a.ncells()).product()
    }

    pub fn ncells(&self) -> usize {
        self.ncells_space() * self.time.ncells()
    }

    /// Decode a flat spatial index into per-axis cell indices (row-major,
    /// last axis fastest).
    pub fn space_indices(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for (k, ax) in self.space.iter().enumerate().rev() {
            idx[k] = flat % ax.ncells();
            flat /= ax.ncells();
        }
        idx
    }

    pub fn space_center(&self, flat: usize) -> Vec<f64> {
        self.space_indices(flat)
            .iter()
            .zip(&self.space)
            .map(|(&i, ax)| ax.center(i))
            .collect()
    }

    pub fn cell_volume(&self, flat: usize) -> f64 {
        self.space_indices(flat)
            .iter()
            .zip(&self.space)
            .map(|(&i, ax)| ax.width(i))
            .product()
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        for ax in &self.space {
            ax.validate()?;
        }
        self.time.validate()
    }
}

/// Values on a grid, cell-centered, time index slowest. The tag records what
/// the field is (u, ∂_t u, D_iD_j u, f, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub tag: String,
}

/// Sidecar metadata written next to the raw values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldMeta {
    pub tag: String,
    pub grid: Grid,
    pub layout: String,
    pub format: String,
}

impl SampledField {
    pub fn new(grid: Grid, values: Vec<f64>, tag: impl Into<String>) -> Result<Self, FieldError> {
        grid.validate()?;
        if values.len() != grid.ncells() {
            return Err(FieldError::ValueCountMismatch {
                expected: grid.ncells(),
                got: values.len(),
            });
        }
        Ok(SampledField {
            grid,
            values,
            tag: tag.into(),
        })
    }

    /// Fill by evaluating `f(x_center, t_center)` on every cell.
    pub fn sample(grid: Grid, tag: impl Into<String>, f: impl Fn(&[f64], f64) -> f64) -> Self {
        let nspace = grid.ncells_space();
        let ntime = grid.time.ncells();
        let mut values = Vec::with_capacity(nspace * ntime);
        for it in 0..ntime {
            let t = grid.time.center(it);
            for ix in 0..nspace {
                let x = grid.space_center(ix);
                values.push(f(&x, t));
            }
        }
        SampledField {
            grid,
            values,
            tag: tag.into(),
        }
    }

    pub fn value(&self, it: usize, flat_space: usize) -> f64 {
        self.values[it * self.grid.ncells_space() + flat_space]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SampledField {
        SampledField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            tag: self.tag.clone(),
        }
    }

    /// Volume-weighted aggregation onto the coarsened grid (cell pairs merged
    /// along every axis). Used for two-level quadrature error estimates.
    pub fn coarsened(&self) -> SampledField {
        let cgrid = Grid {
            space: self.grid.space.iter().map(|a| a.coarsened()).collect(),
            time: self.grid.time.coarsened(),
        };
        let mut values = vec![0.0; cgrid.ncells()];
        let mut volumes = vec![0.0; cgrid.ncells()];
        let nspace = self.grid.ncells_space();
        let cnspace = cgrid.ncells_space();
        for it in 0..self.grid.time.ncells() {
            let cit = coarse_index(&self.grid.time, it);
            let dt = self.grid.time.width(it);
            for ix in 0..nspace {
                let fine_idx = self.grid.space_indices(ix);
                let mut cflat = 0;
                for (k, ax) in self.grid.space.iter().enumerate() {
                    cflat = cflat * cgrid.space[k].ncells() + coarse_index(ax, fine_idx[k]);
                }
                let vol = self.grid.cell_volume(ix) * dt;
                values[cit * cnspace + cflat] += vol * self.value(it, ix);
                volumes[cit * cnspace + cflat] += vol;
            }
        }
        for (v, vol) in values.iter_mut().zip(&volumes) {
            *v /= vol;
        }
        SampledField {
            grid: cgrid,
            values,
            tag: self.tag.clone(),
        }
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), FieldError> {
        let mut rows = String::new();
        rows.push_str("t");
        for k in 0..self.grid.dim() {
            rows.push_str(&format!(",x{}", k + 1));
        }
        rows.push_str(",value\n");
        let nspace = self.grid.ncells_space();
        for it in 0..self.grid.time.ncells() {
            let t = self.grid.time.center(it);
            for ix in 0..nspace {
                let x = self.grid.space_center(ix);
                rows.push_str(&format!("{t:e}"));
                for xi in &x {
                    rows.push_str(&format!(",{xi:e}"));
                }
                rows.push_str(&format!(",{:e}\n", self.value(it, ix)));
            }
        }
        std::fs::write(path, rows)?;
        self.write_meta(path, "csv")
    }

    pub fn write_bin(&self, path: &std::path::Path) -> Result<(), FieldError> {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        self.write_meta(path, "bin")
    }

    fn write_meta(&self, data_path: &std::path::Path, format: &str) -> Result<(), FieldError> {
        let meta = FieldMeta {
            tag: self.tag.clone(),
            grid: self.grid.clone(),
            layout: "time-major, last spatial axis fastest, cell centers".to_string(),
            format: format.to_string(),
        };
        let meta_path = sidecar_path(data_path);
        std::fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self, FieldError> {
        let meta: FieldMeta =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let values = match meta.format.as_str() {
            "bin" => {
                let bytes = std::fs::read(path)?;
                if bytes.len() % 8 != 0 {
                    return Err(FieldError::Malformed("binary length not 8-aligned".into()));
                }
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            "csv" => {
                let text = std::fs::read_to_string(path)?;
                let mut vals = Vec::new();
                for line in text.lines().skip(1) {
                    let last = line
                        .rsplit(',')
                        .next()
                        .ok_or_else(|| FieldError::Malformed("empty csv row".into()))?;
                    vals.push(
                        last.parse::<f64>()
                            .map_err(|e| FieldError::Malformed(e.to_string()))?,
                    );
                }
                vals
            }
            other => return Err(FieldError::Malformed(format!("unknown format {other}"))),
        };
        SampledField::new(meta.grid, values, meta.tag)
    }
}

fn coarse_index(axis: &Axis, fine: usize) -> usize {
    (fine / 2).min(axis.coarsened().ncells() - 1)
}

fn sidecar_path(data_path: &std::path::Path) -> std::path::PathBuf {
    let mut os = data_path.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_geometry() {
        let ax = Axis::uniform(0.0, 1.0, 4);
        assert_eq!(ax.ncells(), 4);
        assert_eq!(ax.center(0), 0.125);
        assert_eq!(ax.width(2), 0.25);

        let graded = Axis::graded(0.0, 1.0, 10, 0.8);
        assert!(graded.width(0) < graded.width(9));
        assert!((graded.hi() - 1.0).abs() < 1e-15);
        // adjacent widths grow by the inverse grading ratio
        let ratio = graded.width(1) / graded.width(0);
        assert!((ratio - 1.25).abs() < 1e-10);
    }

    #[test]
    fn sample_and_roundtrip() {
        let grid = Grid {
            space: vec![Axis::uniform(0.0, 1.0, 3), Axis::uniform(-1.0, 1.0, 4)],
            time: Axis::uniform(0.0, 2.0, 2),
        };
        let f = SampledField::sample(grid, "u", |x, t| x[0] + 10.0 * x[1] + 100.0 * t);
        assert_eq!(f.values.len(), 24);

        let dir = std::env::temp_dir().join("parakernel-field-test");
        std::fs::create_dir_all(&dir).unwrap();
        let bin = dir.join("f.bin");
        f.write_bin(&bin).unwrap();
        let back = SampledField::read(&bin).unwrap();
        assert_eq!(back.values, f.values);
        assert_eq!(back.grid, f.grid);

        let csv = dir.join("f.csv");
        f.write_csv(&csv).unwrap();
        let back = SampledField::read(&csv).unwrap();
        for (a, b) in back.values.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn coarsening_preserves_integral() {
        let grid = Grid {
            space: vec![Axis::uniform(0.0, 1.0, 8)],
            time: Axis::uniform(0.0, 1.0, 4),
        };
        let f = SampledField::sample(grid, "u", |x, t| x[0] * x[0] + t);
        let c = f.coarsened();
        let fine: f64 = (0..f.grid.time.ncells())
            .flat_map(|it| {
                let g = &f;
                (0..f.grid.ncells_space()).map(move |ix| {
                    g.value(it, ix) * g.grid.cell_volume(ix) * g.grid.time.width(it)
                })
            })
            .sum();
        let coarse: f64 = (0..c.grid.time.ncells())
            .flat_map(|it| {
                let g = &c;
                (0..c.grid.ncells_space()).map(move |ix| {
                    g.value(it, ix) * g.grid.cell_volume(ix) * g.grid.time.width(it)
                })
            })
            .sum();
        assert!((fine - coarse).abs() < 1e-13);
    }

    #[test]
    fn value_count_enforced() {
        let grid = Grid {
            space: vec![Axis::uniform(0.0, 1.0, 2)],
            time: Axis::uniform(0.0, 1.0, 2),
        };
        assert!(matches!(
            SampledField::new(grid, vec![0.0; 3], "u"),
            Err(FieldError::ValueCountMismatch { expected: 4, got: 3 })
        ));
    }
}
