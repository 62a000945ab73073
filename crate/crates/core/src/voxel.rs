//! Sparse voxel grids: voxelization, multi-level hierarchies, window
//! partitioning, and KNN-pool downsampling.
//!
//! Grids are immutable after construction and keep their cells sorted by
//! coordinate, so every traversal is deterministic. Negative coordinates use
//! floor division throughout, which lets windows tile all of Z^3.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scene::{PointCloud, PointRecord, SignalMask};

/// Integer voxel coordinate.
pub type VoxelCoord = [i32; 3];

/// One occupied voxel and the point that represents it.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelCell {
    pub coord: VoxelCoord,
    pub representative: PointRecord,
}

/// A level of the sparse voxel hierarchy.
#[derive(Clone, Debug)]
pub struct SparseVoxelGrid {
    level: usize,
    voxel_size: f64,
    signal_mask: SignalMask,
    cells: Vec<VoxelCell>,
    index: BTreeMap<VoxelCoord, usize>,
}

impl SparseVoxelGrid {
    /// Builds a grid from explicit cells, validating coordinate uniqueness
    /// and that each representative lies inside its cell's spatial extent.
    pub fn from_cells(
        level: usize,
        voxel_size: f64,
        signal_mask: SignalMask,
        mut cells: Vec<VoxelCell>,
    ) -> Result<Self> {
        if voxel_size <= 0.0 {
            return Err(Error::Range(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        cells.sort_by_key(|c| c.coord);
        let mut index = BTreeMap::new();
        for (i, cell) in cells.iter().enumerate() {
            if index.insert(cell.coord, i).is_some() {
                return Err(Error::Data(format!(
                    "duplicate voxel coordinate {:?}",
                    cell.coord
                )));
            }
            for a in 0..3 {
                let p = cell.representative.position[a];
                let lo = cell.coord[a] as f64 * voxel_size;
                let hi = (cell.coord[a] + 1) as f64 * voxel_size;
                let slack = 1e-9 * voxel_size.max(p.abs());
                if p < lo - slack || p > hi + slack {
                    return Err(Error::Data(format!(
                        "representative {p} outside cell {:?} on axis {a}",
                        cell.coord
                    )));
                }
            }
        }
        Ok(SparseVoxelGrid {
            level,
            voxel_size,
            signal_mask,
            cells,
            index,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn signal_mask(&self) -> SignalMask {
        self.signal_mask
    }

    /// Cells in ascending coordinate order.
    pub fn cells(&self) -> &[VoxelCell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn find(&self, coord: VoxelCoord) -> Option<usize> {
        self.index.get(&coord).copied()
    }

    /// Spatial center of a cell.
    pub fn cell_center(&self, coord: VoxelCoord) -> [f64; 3] {
        [
            (coord[0] as f64 + 0.5) * self.voxel_size,
            (coord[1] as f64 + 0.5) * self.voxel_size,
            (coord[2] as f64 + 0.5) * self.voxel_size,
        ]
    }
}

fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn voxel_coord_of(position: &[f64; 3], voxel_size: f64) -> Result<VoxelCoord> {
    let mut coord = [0i32; 3];
    for a in 0..3 {
        let t = (position[a] / voxel_size).floor();
        if t < i32::MIN as f64 || t > i32::MAX as f64 {
            return Err(Error::Data(format!(
                "voxel coordinate overflow at position {position:?}"
            )));
        }
        coord[a] = t as i32;
    }
    Ok(coord)
}

/// Voxelizes a cloud. The cell coordinate is `floor(position / voxel_size)`
/// per axis; the representative is the point nearest the cell center, ties
/// broken by lowest input index.
pub fn voxelize(pc: &PointCloud, voxel_size: f64) -> Result<SparseVoxelGrid> {
    if voxel_size <= 0.0 {
        return Err(Error::Range(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    if pc.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut best: BTreeMap<VoxelCoord, (usize, f64)> = BTreeMap::new();
    for (i, p) in pc.points().iter().enumerate() {
        let coord = voxel_coord_of(&p.position, voxel_size)?;
        let center = [
            (coord[0] as f64 + 0.5) * voxel_size,
            (coord[1] as f64 + 0.5) * voxel_size,
            (coord[2] as f64 + 0.5) * voxel_size,
        ];
        let d2 = squared_distance(&p.position, &center);
        match best.get_mut(&coord) {
            None => {
                best.insert(coord, (i, d2));
            }
            Some(entry) => {
                if d2 < entry.1 {
                    *entry = (i, d2);
                }
            }
        }
    }
    let cells = best
        .into_iter()
        .map(|(coord, (idx, _))| VoxelCell {
            coord,
            representative: pc.points()[idx].clone(),
        })
        .collect();
    SparseVoxelGrid::from_cells(0, voxel_size, pc.signal_mask(), cells)
}

/// Builds a hierarchy where level `k + 1` doubles the voxel size of level
/// `k`. A coarse cell exists iff at least one of its eight children exists;
/// its representative is the child representative nearest the coarse cell
/// center (ties broken by child coordinate order).
pub fn build_hierarchy(finest: SparseVoxelGrid, levels: usize) -> Vec<SparseVoxelGrid> {
    assert!(levels >= 1, "hierarchy needs at least one level");
    let mut out = Vec::with_capacity(levels);
    out.push(finest);
    for level in 1..levels {
        let prev = &out[level - 1];
        let size = prev.voxel_size * 2.0;
        let mut groups: BTreeMap<VoxelCoord, Vec<usize>> = BTreeMap::new();
        for (i, cell) in prev.cells.iter().enumerate() {
            let coarse = [
                cell.coord[0].div_euclid(2),
                cell.coord[1].div_euclid(2),
                cell.coord[2].div_euclid(2),
            ];
            groups.entry(coarse).or_default().push(i);
        }
        let mut cells = Vec::with_capacity(groups.len());
        for (coord, children) in groups {
            let center = [
                (coord[0] as f64 + 0.5) * size,
                (coord[1] as f64 + 0.5) * size,
                (coord[2] as f64 + 0.5) * size,
            ];
            let mut best = children[0];
            let mut best_d2 = squared_distance(&prev.cells[best].representative.position, &center);
            for &child in &children[1..] {
                let d2 = squared_distance(&prev.cells[child].representative.position, &center);
                if d2 < best_d2 {
                    best = child;
                    best_d2 = d2;
                }
            }
            cells.push(VoxelCell {
                coord,
                representative: prev.cells[best].representative.clone(),
            });
        }
        let mask = prev.signal_mask;
        let grid = SparseVoxelGrid {
            level,
            voxel_size: size,
            signal_mask: mask,
            index: cells
                .iter()
                .enumerate()
                .map(|(i, c)| (c.coord, i))
                .collect(),
            cells,
        };
        out.push(grid);
    }
    out
}

/// A window of cells sharing the same window coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub coord: VoxelCoord,
    /// Indices into the partitioned grid's cell list.
    pub members: Vec<usize>,
}

/// Non-overlapping window decomposition of a grid.
#[derive(Clone, Debug)]
pub struct WindowPartition {
    pub window_size: usize,
    pub shifted: bool,
    pub windows: Vec<Window>,
}

impl WindowPartition {
    pub fn total_members(&self) -> usize {
        self.windows.iter().map(|w| w.members.len()).sum()
    }
}

/// Partitions occupied cells into `window_size`-cubed windows. Shifted
/// partitions offset coordinates by `floor(window_size / 2)` before the
/// floor division; empty windows are omitted.
pub fn partition_windows(
    grid: &SparseVoxelGrid,
    window_size: usize,
    shifted: bool,
) -> WindowPartition {
    assert!(window_size >= 1, "window size must be at least 1");
    let w = window_size as i32;
    let offset = if shifted { w / 2 } else { 0 };
    let mut map: BTreeMap<VoxelCoord, Vec<usize>> = BTreeMap::new();
    for (i, cell) in grid.cells.iter().enumerate() {
        let wc = [
            (cell.coord[0] + offset).div_euclid(w),
            (cell.coord[1] + offset).div_euclid(w),
            (cell.coord[2] + offset).div_euclid(w),
        ];
        map.entry(wc).or_default().push(i);
    }
    WindowPartition {
        window_size,
        shifted,
        windows: map
            .into_iter()
            .map(|(coord, members)| Window { coord, members })
            .collect(),
    }
}

/// Pools fine features onto a coarse grid: for each coarse cell, gather the
/// `k` fine cells whose representative points are nearest the coarse
/// representative (all of them when fewer exist) and take the componentwise
/// maximum of their feature vectors.
pub fn knn_pool_downsample(
    fine_features: &[Vec<f64>],
    fine: &SparseVoxelGrid,
    coarse: &SparseVoxelGrid,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::Range("k must be at least 1".into()));
    }
    if fine_features.len() != fine.len() {
        return Err(Error::Shape(format!(
            "{} features for {} fine cells",
            fine_features.len(),
            fine.len()
        )));
    }
    if !coarse.is_empty() && fine.is_empty() {
        return Err(Error::Internal(
            "coarse cell with zero fine candidates".into(),
        ));
    }
    let dim = fine_features.first().map(|f| f.len()).unwrap_or(0);
    if fine_features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("ragged fine feature vectors".into()));
    }
    let mut out = Vec::with_capacity(coarse.len());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(fine.len());
    for cell in coarse.cells() {
        scratch.clear();
        for (i, fine_cell) in fine.cells().iter().enumerate() {
            let d2 = squared_distance(
                &cell.representative.position,
                &fine_cell.representative.position,
            );
            scratch.push((d2, i));
        }
        scratch.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let take = k.min(scratch.len());
        let mut pooled = vec![f64::NEG_INFINITY; dim];
        for &(_, idx) in &scratch[..take] {
            for (o, &v) in pooled.iter_mut().zip(fine_features[idx].iter()) {
                *o = o.max(v);
            }
        }
        out.push(pooled);
    }
    Ok(out)
}
