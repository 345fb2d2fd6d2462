//! Exact nearest-neighbour walks on a regular voxel grid.
//!
//! Neighbours are visited in a fixed total order: squared distance first,
//! then the signed linear index offset. Walking this list from a voxel gives
//! its nearest neighbours exactly, without any spatial index.

/// Shape of a block, x fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl BlockDims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i % self.nx, (i / self.nx) % self.ny, i / (self.nx * self.ny))
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    /// Voxel at `i + (dx, dy, dz)`, if inside the block.
    #[inline]
    pub fn offset(&self, i: usize, o: &Offset) -> Option<usize> {
        let (x, y, z) = self.coords(i);
        let x = x as i64 + o.dx as i64;
        let y = y as i64 + o.dy as i64;
        let z = z as i64 + o.dz as i64;
        if x < 0 || y < 0 || z < 0 || x >= self.nx as i64 || y >= self.ny as i64 || z >= self.nz as i64 {
            return None;
        }
        Some(self.index(x as usize, y as usize, z as usize))
    }

    /// Ordering key of the displacement from `i` to `j`.
    pub fn key(&self, i: usize, j: usize) -> (i64, i64) {
        let (xi, yi, zi) = self.coords(i);
        let (xj, yj, zj) = self.coords(j);
        let (dx, dy, dz) = (xj as i64 - xi as i64, yj as i64 - yi as i64, zj as i64 - zi as i64);
        (dx * dx + dy * dy + dz * dz, j as i64 - i as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Offset {
    pub dx: i32,
    pub dy: i32,
    pub dz: i32,
    pub d2: i64,
}

/// All non-zero displacements within `radius`, sorted by [`BlockDims::key`].
pub fn sorted_offsets(dims: BlockDims, radius: usize) -> Vec<Offset> {
    let r = radius as i32;
    let rz = r.min(dims.nz as i32 - 1).max(0);
    let ry = r.min(dims.ny as i32 - 1).max(0);
    let rx = r.min(dims.nx as i32 - 1).max(0);
    let mut out = Vec::new();
    for dz in -rz..=rz {
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                let d2 = (dx * dx + dy * dy + dz * dz) as i64;
                if d2 == 0 || d2 > (r as i64) * (r as i64) {
                    continue;
                }
                out.push(Offset { dx, dy, dz, d2 });
            }
        }
    }
    let lin = |o: &Offset| (o.dz as i64 * dims.ny as i64 + o.dy as i64) * dims.nx as i64 + o.dx as i64;
    out.sort_by_key(|o| (o.d2, lin(o)));
    out
}

/// Smallest radius whose ball holds at least `count` displacements when
/// clipped to the block's extent.
pub fn radius_for(dims: BlockDims, count: usize) -> usize {
    let max_r = ((dims.nx * dims.nx + dims.ny * dims.ny + dims.nz * dims.nz) as f64).sqrt().ceil() as usize;
    (1..=max_r)
        .find(|&r| sorted_offsets(dims, r).len() >= count)
        .unwrap_or(max_r)
}
