use crate::error::{Error, Result};
use crate::model::MaterializedNet;
use crate::numerics::{Prng, Scalar};
use crate::rendering::Vec3;
use crate::scenes::AnalyticField;

/// Anything with a queryable density.
pub trait DensityField {
    fn densities(&self, points: &[Vec3]) -> Result<Vec<f64>>;
}

impl<T: Scalar> DensityField for MaterializedNet<T> {
    fn densities(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        Ok(self.density(points)?.into_iter().map(Scalar::to_f64_lossy).collect())
    }
}

impl DensityField for AnalyticField {
    fn densities(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        Ok(points.iter().map(|&p| self.density(p)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn cube(half: f64) -> Self {
        Self { min: [-half; 3], max: [half; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|k| self.max[k] <= self.min[k] || !self.min[k].is_finite() || !self.max[k].is_finite()) {
            return Err(Error::contract(format!("degenerate bounding box {:?}–{:?}", self.min, self.max)));
        }
        Ok(())
    }

    pub fn extent(&self) -> Vec3 {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }
}

/// Lattice resolution and density threshold of an occupancy grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    pub subgrid: usize,
    pub tau: f64,
}

impl GridSpec {
    /// 50³ cells, 5³ probes per cell, threshold 3.
    pub fn full() -> Self {
        Self { resolution: 50, subgrid: 5, tau: 3.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.subgrid == 0 {
            return Err(Error::config("grid_resolution", "resolution and subgrid must be positive"));
        }
        if !self.tau.is_finite() {
            return Err(Error::config("tau", "must be finite"));
        }
        Ok(())
    }
}

/// Cells of a box, marked where the density exceeds `tau` at any probe point.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub aabb: Aabb,
    pub spec: GridSpec,
    occupied: Vec<bool>,
}

const GRID_MAGIC: &[u8; 4] = b"OCCG";

impl OccupancyGrid {
    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    /// Flat index of cell `(i, j, k)`, `x` fastest.
    pub fn cell_index(&self, c: [usize; 3]) -> usize {
        let r = self.spec.resolution;
        c[0] + r * (c[1] + r * c[2])
    }

    pub fn cell_coords(&self, idx: usize) -> [usize; 3] {
        let r = self.spec.resolution;
        [idx % r, (idx / r) % r, idx / (r * r)]
    }

    pub fn is_occupied(&self, c: [usize; 3]) -> bool {
        self.occupied[self.cell_index(c)]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn occupied_cells(&self) -> Vec<usize> {
        (0..self.occupied.len()).filter(|&i| self.occupied[i]).collect()
    }

    pub fn cell_bounds(&self, c: [usize; 3]) -> Aabb {
        let e = self.aabb.extent();
        let r = self.spec.resolution as f64;
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..3 {
            min[a] = self.aabb.min[a] + c[a] as f64 * e[a] / r;
            max[a] = self.aabb.min[a] + (c[a] + 1) as f64 * e[a] / r;
        }
        Aabb { min, max }
    }

    /// Cell containing `p`, if inside the box.
    pub fn cell_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let e = self.aabb.extent();
        let r = self.spec.resolution;
        let mut c = [0; 3];
        for a in 0..3 {
            let f = (p[a] - self.aabb.min[a]) / e[a] * r as f64;
            if !(0.0..r as f64).contains(&f) {
                return None;
            }
            c[a] = (f as usize).min(r - 1);
        }
        Some(c)
    }

    pub fn from_cells(aabb: Aabb, spec: GridSpec, occupied: Vec<bool>) -> Result<Self> {
        aabb.validate()?;
        spec.validate()?;
        if occupied.len() != spec.resolution.pow(3) {
            return Err(Error::contract("occupancy vector length must be resolution³"));
        }
        Ok(Self { aabb, spec, occupied })
    }

    /// Header (magic, bounds as f64, resolution, subgrid, τ) then one bit per
    /// cell, least significant bit first, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GRID_MAGIC);
        for v in self.aabb.min.iter().chain(&self.aabb.max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.spec.resolution as u32).to_le_bytes());
        out.extend_from_slice(&(self.spec.subgrid as u32).to_le_bytes());
        out.extend_from_slice(&self.spec.tau.to_le_bytes());
        for chunk in self.occupied.chunks(8) {
            out.push(chunk.iter().enumerate().fold(0u8, |b, (i, &o)| b | ((o as u8) << i)));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Format("truncated or malformed occupancy grid".into());
        if bytes.len() < 4 + 48 + 8 + 8 || &bytes[..4] != GRID_MAGIC {
            return Err(bad());
        }
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let min = [f64_at(4), f64_at(12), f64_at(20)];
        let max = [f64_at(28), f64_at(36), f64_at(44)];
        let spec = GridSpec { resolution: u32_at(52), subgrid: u32_at(56), tau: f64_at(60) };
        let n = spec.resolution.pow(3);
        let body = &bytes[68..];
        if body.len() != n.div_ceil(8) {
            return Err(bad());
        }
        let occupied = (0..n).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect();
        Self::from_cells(Aabb { min, max }, spec, occupied)
    }
}

/// Probe point `s = (a, b, c)` of cell `(i, j, k)`: the centre of sub-cell
/// `i·subgrid + a` of the fine lattice along each axis.
pub fn lattice_point(aabb: &Aabb, spec: &GridSpec, cell: [usize; 3], sub: [usize; 3]) -> Vec3 {
    let e = aabb.extent();
    let fine = (spec.resolution * spec.subgrid) as f64;
    let mut p = [0.0; 3];
    for a in 0..3 {
        let idx = (cell[a] * spec.subgrid + sub[a]) as f64;
        p[a] = aabb.min[a] + (idx + 0.5) * (e[a] / fine);
    }
    p
}

/// Marks every cell where some probe exceeds `tau`. Probes are evaluated one
/// z-slab of cells at a time.
pub fn extract_occupancy<F: DensityField + ?Sized>(field: &F, aabb: Aabb, spec: GridSpec) -> Result<OccupancyGrid> {
    aabb.validate()?;
    spec.validate()?;
    let (r, s) = (spec.resolution, spec.subgrid);
    let probes = s * s * s;
    let mut occupied = vec![false; r * r * r];
    let mut points = Vec::with_capacity(r * r * probes);
    for k in 0..r {
        points.clear();
        for j in 0..r {
            for i in 0..r {
                for c in 0..s {
                    for b in 0..s {
                        for a in 0..s {
                            points.push(lattice_point(&aabb, &spec, [i, j, k], [a, b, c]));
                        }
                    }
                }
            }
        }
        let sigma = field.densities(&points)?;
        for (cell, chunk) in sigma.chunks(probes).enumerate() {
            if chunk.iter().any(|&v| v > spec.tau) {
                occupied[k * r * r + cell] = true;
            }
        }
    }
    OccupancyGrid::from_cells(aabb, spec, occupied)
}

/// Uniform over occupied cells, then uniform inside the chosen cell. `None` when
/// the grid has no occupied cell.
pub fn sample_surface_points(grid: &OccupancyGrid, count: usize, prng: &mut Prng) -> Option<Vec<Vec3>> {
    let cells = grid.occupied_cells();
    if cells.is_empty() {
        return None;
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let cell = grid.cell_coords(cells[prng.below(cells.len())]);
        let b = grid.cell_bounds(cell);
        out.push([
            prng.uniform_in(b.min[0], b.max[0]),
            prng.uniform_in(b.min[1], b.max[1]),
            prng.uniform_in(b.min[2], b.max[2]),
        ]);
    }
    Some(out)
}

/// Uniform points in the whole box; the distillation ablation without surface restriction.
pub fn sample_box_points(aabb: &Aabb, count: usize, prng: &mut Prng) -> Vec<Vec3> {
    (0..count)
        .map(|_| {
            [
                prng.uniform_in(aabb.min[0], aabb.max[0]),
                prng.uniform_in(aabb.min[1], aabb.max[1]),
                prng.uniform_in(aabb.min[2], aabb.max[2]),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec { resolution: 4, subgrid: 2, tau: 3.0 }
    }

    #[test]
    fn degenerate_box_rejected() {
        let flat = Aabb { min: [0.0; 3], max: [1.0, 0.0, 1.0] };
        assert!(extract_occupancy(&AnalyticField::default(), flat, spec()).is_err());
    }

    #[test]
    fn zero_density_is_empty() {
        let g = extract_occupancy(&AnalyticField::default(), Aabb::cube(1.0), spec()).unwrap();
        assert_eq!(g.occupied_count(), 0);
        assert!(sample_surface_points(&g, 5, &mut Prng::new(0)).is_none());
    }

    #[test]
    fn lattice_points_are_inside_their_cell() {
        let aabb = Aabb::new([-1.0, 0.0, 2.0], [1.0, 3.0, 2.5]).unwrap();
        let g = OccupancyGrid::from_cells(aabb, spec(), vec![false; 64]).unwrap();
        for idx in 0..64 {
            let c = g.cell_coords(idx);
            assert_eq!(g.cell_index(c), idx);
            let b = g.cell_bounds(c);
            for sub in [[0, 0, 0], [1, 1, 1], [0, 1, 0]] {
                let p = lattice_point(&aabb, &g.spec, c, sub);
                assert!((0..3).all(|a| p[a] > b.min[a] && p[a] < b.max[a]));
                assert_eq!(g.cell_of(p), Some(c));
            }
        }
    }

    #[test]
    fn single_cell_samples_stay_inside() {
        let mut occ = vec![false; 64];
        occ[21] = true;
        let g = OccupancyGrid::from_cells(Aabb::cube(2.0), spec(), occ).unwrap();
        let b = g.cell_bounds(g.cell_coords(21));
        let pts = sample_surface_points(&g, 200, &mut Prng::new(1)).unwrap();
        assert!(pts.iter().all(|p| (0..3).all(|a| p[a] >= b.min[a] && p[a] <= b.max[a])));
        assert!(sample_surface_points(&g, 0, &mut Prng::new(1)).unwrap().is_empty());
    }

    #[test]
    fn serialization_round_trip() {
        let occ = (0..64).map(|i| i % 3 == 0 || i == 63).collect();
        let g = OccupancyGrid::from_cells(Aabb::cube(1.5), spec(), occ).unwrap();
        let bytes = g.to_bytes();
        assert_eq!(bytes.len(), 68 + 8);
        assert_eq!(OccupancyGrid::from_bytes(&bytes).unwrap(), g);
        assert!(OccupancyGrid::from_bytes(&bytes[..70]).is_err());
    }
}
