//! Rasterized uncertainty and gradient-magnitude surfaces over a 2-D window.

use std::collections::HashSet;
use std::path::Path;

use ndarray::arr1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::{hash_hex, zero_entry_audit};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, fnv1a64, write_atomic};
use crate::nn::InstanceSet;
use crate::uncertainty::{analyze_nets, Metric};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub resolution: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x_range: [-2.0, 3.0],
            y_range: [-1.5, 2.0],
            resolution: 200,
        }
    }
}

impl GridSpec {
    pub fn new(x_range: [f64; 2], y_range: [f64; 2], resolution: usize) -> Result<Self> {
        let s = GridSpec {
            x_range,
            y_range,
            resolution,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |[lo, hi]: [f64; 2]| lo.is_finite() && hi.is_finite() && lo < hi;
        if !ok(self.x_range) || !ok(self.y_range) {
            return Err(Error::invalid("grid ranges need finite lo < hi"));
        }
        if self.resolution < 2 {
            return Err(Error::invalid("grid resolution must be >= 2"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.resolution * self.resolution
    }

    /// Center of cell `(ix, iy)`; `index = iy * resolution + ix`.
    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let r = self.resolution as f64;
        let at = |[lo, hi]: [f64; 2], i: usize| lo + (i as f64 + 0.5) * (hi - lo) / r;
        [at(self.x_range, ix), at(self.y_range, iy)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub x: [f64; 2],
    /// [`Metric::ALL`] order.
    pub values: [f64; 4],
    pub grad_norms: [f64; 4],
    pub sig_hashes: Vec<u64>,
    /// Some instance's `V` has an exact zero.
    pub zero_entry: bool,
    /// Some instance's `V` has an entry with magnitude <= 1e-12.
    pub near_zero_entry: bool,
    /// Some instance probability underflowed to exactly 0.
    pub saturated: bool,
    pub boundary_contact: bool,
}

impl Cell {
    /// The instance's signature hash for K = 1; otherwise FNV-1a over the
    /// little-endian bytes of all instance hashes.
    pub fn combined_hash(&self) -> u64 {
        match self.sig_hashes.as_slice() {
            [h] => *h,
            hs => fnv1a64(hs.iter().flat_map(|h| h.to_le_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSurface {
    pub spec: GridSpec,
    pub cells: Vec<Cell>,
}

pub fn evaluate_grid(set: &InstanceSet, spec: &GridSpec) -> Result<GridSurface> {
    spec.validate()?;
    if set.input_dim() != 2 {
        return Err(Error::invalid("grid surfaces need a 2-d input"));
    }
    let nets = set.nets();
    let rows = (0..spec.resolution)
        .into_par_iter()
        .map(|iy| {
            (0..spec.resolution)
                .map(|ix| {
                    let x = spec.center(ix, iy);
                    let a = analyze_nets(&nets, arr1(&x).view())?;
                    let mut values = [0.0; 4];
                    let mut grad_norms = [0.0; 4];
                    for m in Metric::ALL {
                        let mv = a.metric(m);
                        values[m.index()] = mv.value;
                        grad_norms[m.index()] = mv.gradient_norm().expect("analysis carries gradients");
                    }
                    let audits: Vec<_> = a.pieces.iter().map(|p| zero_entry_audit(p, 0.0)).collect();
                    Ok(Cell {
                        x,
                        values,
                        grad_norms,
                        sig_hashes: a.pieces.iter().map(|p| p.signature.hash()).collect(),
                        zero_entry: audits.iter().any(|z| z.has_zero),
                        near_zero_entry: audits.iter().any(|z| z.near_zero_count > 0),
                        saturated: a.summary.per_instance_probs.iter().any(|&p| p == 0.0),
                        boundary_contact: a.boundary_contact,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridSurface {
        spec: *spec,
        cells: rows.into_iter().flatten().collect(),
    })
}

pub fn zero_entry_fraction(s: &GridSurface) -> f64 {
    s.cells.iter().filter(|c| c.zero_entry).count() as f64 / s.cells.len() as f64
}

/// Same as [`zero_entry_fraction`] with entries up to 1e-12 counted as zero.
pub fn near_zero_entry_fraction(s: &GridSurface) -> f64 {
    s.cells.iter().filter(|c| c.near_zero_entry).count() as f64 / s.cells.len() as f64
}

/// Distinct activation patterns hit by cell centers (by hash, so
/// approximate in principle; collisions are negligible at these sizes).
pub fn region_count(s: &GridSurface) -> usize {
    s.cells.iter().map(Cell::combined_hash).collect::<HashSet<_>>().len()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceSummary {
    pub spec: GridSpec,
    pub n_cells: usize,
    pub zero_entry_fraction: f64,
    pub near_zero_entry_fraction: f64,
    pub region_count: usize,
    pub boundary_contact_cells: usize,
    pub saturated_cells: usize,
    pub max_grad_norm: [f64; 4],
}

pub fn summarize_surface(s: &GridSurface) -> SurfaceSummary {
    let mut max_grad_norm = [0.0f64; 4];
    for c in &s.cells {
        for (m, g) in max_grad_norm.iter_mut().zip(c.grad_norms) {
            *m = m.max(g);
        }
    }
    SurfaceSummary {
        spec: s.spec,
        n_cells: s.cells.len(),
        zero_entry_fraction: zero_entry_fraction(s),
        near_zero_entry_fraction: near_zero_entry_fraction(s),
        region_count: region_count(s),
        boundary_contact_cells: s.cells.iter().filter(|c| c.boundary_contact).count(),
        saturated_cells: s.cells.iter().filter(|c| c.saturated).count(),
        max_grad_norm,
    }
}

/// CSV text with value and gradient-norm columns for `metrics` (kept in the
/// canonical order regardless of the order requested).
pub fn surface_csv(s: &GridSurface, metrics: &[Metric]) -> Result<String> {
    if metrics.is_empty() {
        return Err(Error::invalid("at least one metric must be exported"));
    }
    let chosen: Vec<Metric> = Metric::ALL.into_iter().filter(|m| metrics.contains(m)).collect();
    let mut header = vec!["x0".to_string(), "x1".into()];
    header.extend(chosen.iter().map(|m| m.as_str().to_string()));
    header.extend(chosen.iter().map(|m| format!("grad_{m}")));
    header.extend(["sig_hash", "zero_entry", "saturated"].map(String::from));
    let mut out = header.join(",");
    out.push('\n');
    for c in &s.cells {
        let mut row = vec![fmt_f64(c.x[0]), fmt_f64(c.x[1])];
        row.extend(chosen.iter().map(|m| fmt_f64(c.values[m.index()])));
        row.extend(chosen.iter().map(|m| fmt_f64(c.grad_norms[m.index()])));
        row.push(hash_hex(c.combined_hash()));
        row.push(u8::from(c.zero_entry).to_string());
        row.push(u8::from(c.saturated).to_string());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn export_surface(s: &GridSurface, path: &Path, metrics: &[Metric]) -> Result<()> {
    write_atomic(path, surface_csv(s, metrics)?.as_bytes())
}
