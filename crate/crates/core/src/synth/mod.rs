//! Procedural voxel solids, orthographic renders and dataset synthesis.

mod augment;
mod dataset;
mod render;

pub use augment::{augment, translate, AugmentOptions, Background};
pub use dataset::{build_dataset, sample_seed, DatasetSummary, SynthConfig};
pub use render::{project, render, silhouette, silhouette_of_image, Projector, TextureLevel, Viewpoint};

use std::collections::VecDeque;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objective::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Cuboid,
    CuboidUnion,
    LShape,
    Table,
    Sphere,
    Cylinder,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Cuboid,
        Family::CuboidUnion,
        Family::LShape,
        Family::Table,
        Family::Sphere,
        Family::Cylinder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Cuboid => "cuboid",
            Family::CuboidUnion => "cuboid-union",
            Family::LShape => "l-shape",
            Family::Table => "table",
            Family::Sphere => "sphere",
            Family::Cylinder => "cylinder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.to_ascii_lowercase();
        Family::ALL.into_iter().find(|f| f.name() == s)
    }

    /// Family encoded in a sample id such as `l-shape-0012`.
    pub fn of_id(id: &str) -> Option<Self> {
        id.rsplit_once('-').and_then(|(f, _)| Family::parse(f))
    }
}

/// Axis-aligned box of voxels `[lo, lo + size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub lo: [usize; 3],
    pub size: [usize; 3],
}

impl Block {
    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= self.lo[a] && c[a] < self.lo[a] + self.size[a])
    }

    fn hi(&self, axis: usize) -> usize {
        self.lo[axis] + self.size[axis]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    Blocks(Vec<Block>),
    /// Voxels whose index distance to `center` is at most `radius`.
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Disc of `radius` around `center` in the plane normal to `axis`,
    /// extruded over `[lo, hi)` along `axis`.
    Cylinder {
        axis: usize,
        center: [f64; 2],
        radius: f64,
        lo: usize,
        hi: usize,
    },
}

impl Geometry {
    /// The same solid moved so its bounding box sits in the middle of a
    /// `d³` grid (rounded toward the origin), like a normalized CAD model.
    pub fn centered(self, d: usize) -> Geometry {
        let mid = (d as f64 - 1.0) / 2.0;
        match self {
            Geometry::Blocks(blocks) => {
                let lo: [usize; 3] = std::array::from_fn(|a| blocks.iter().map(|b| b.lo[a]).min().unwrap_or(0));
                let hi: [usize; 3] = std::array::from_fn(|a| blocks.iter().map(|b| b.hi(a)).max().unwrap_or(0));
                let target: [usize; 3] = std::array::from_fn(|a| (d - (hi[a] - lo[a])) / 2);
                Geometry::Blocks(
                    blocks
                        .into_iter()
                        .map(|b| Block {
                            lo: std::array::from_fn(|a| b.lo[a] - lo[a] + target[a]),
                            size: b.size,
                        })
                        .collect(),
                )
            }
            Geometry::Sphere { radius, .. } => Geometry::Sphere {
                center: [mid; 3],
                radius,
            },
            Geometry::Cylinder {
                axis, radius, lo, hi, ..
            } => {
                let start = (d - (hi - lo)) / 2;
                Geometry::Cylinder {
                    axis,
                    center: [mid; 2],
                    radius,
                    lo: start,
                    hi: start + hi - lo,
                }
            }
        }
    }
}

/// A solid of one family together with the seed it was drawn from.
/// Grid axis `k` points down: `k = 0` is the top of the object.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub family: Family,
    pub seed: u64,
    pub geometry: Geometry,
}

fn span(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi.max(lo))
}

impl ShapeSpec {
    /// Draw random family parameters for a `d³` grid.
    pub fn sample(family: Family, d: usize, seed: u64) -> Result<Self> {
        if d < 8 {
            return Err(Error::invalid(
                "shape",
                format!("grid extent {d} too small (need >= 8)"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = d - 2;
        let (q, h) = (m / 4, m / 2);
        let rng = &mut rng;
        let geometry = match family {
            Family::Cuboid => {
                let size = [0, 1, 2].map(|_| span(rng, q.max(2), 3 * m / 4));
                let lo = size.map(|s| span(rng, 1, 1 + m - s));
                Geometry::Blocks(vec![Block { lo, size }])
            }
            Family::CuboidUnion => {
                let sa = [0, 1, 2].map(|_| span(rng, q.max(2), h));
                let la = sa.map(|s| span(rng, 1, 1 + m - s));
                let a = Block { lo: la, size: sa };
                let sb = [0, 1, 2].map(|_| span(rng, q.max(2), h));
                let mut lb = [0; 3];
                for ax in 0..3 {
                    // overlap `a` on every axis
                    let min = (a.lo[ax] + 1).saturating_sub(sb[ax]).max(1);
                    let max = (a.hi(ax) - 1).min(d - 1 - sb[ax]);
                    lb[ax] = span(rng, min, max);
                }
                Geometry::Blocks(vec![a, Block { lo: lb, size: sb }])
            }
            Family::LShape => {
                let along = rng.gen_range(0..2);
                let across = 1 - along;
                let len = span(rng, h, m);
                let width = span(rng, 2, (m / 3).max(2));
                let thick = span(rng, 2, q.max(2));
                let height = span(rng, h, m);
                let post = span(rng, 2, q.max(2));
                let mut base = Block {
                    lo: [0; 3],
                    size: [0; 3],
                };
                base.size[along] = len;
                base.size[across] = width;
                base.size[2] = thick;
                base.lo[along] = span(rng, 1, 1 + m - len);
                base.lo[across] = span(rng, 1, 1 + m - width);
                base.lo[2] = d - 1 - thick;
                let mut upright = base;
                upright.size[along] = post;
                if rng.gen_bool(0.5) {
                    upright.lo[along] = base.hi(along) - post;
                }
                upright.size[2] = height;
                upright.lo[2] = d - 1 - height;
                Geometry::Blocks(vec![base, upright])
            }
            Family::Table => {
                let sx = span(rng, h, m);
                let sy = span(rng, h, m);
                let thick = span(rng, 1, 2);
                let leg = span(rng, 1, 2);
                let legs = span(rng, m / 3, m - thick);
                let lx = span(rng, 1, 1 + m - sx);
                let ly = span(rng, 1, 1 + m - sy);
                let top = span(rng, 1, 1 + m - thick - legs);
                let mut blocks = vec![Block {
                    lo: [lx, ly, top],
                    size: [sx, sy, thick],
                }];
                for (cx, cy) in [
                    (lx, ly),
                    (lx + sx - leg, ly),
                    (lx, ly + sy - leg),
                    (lx + sx - leg, ly + sy - leg),
                ] {
                    blocks.push(Block {
                        lo: [cx, cy, top + thick],
                        size: [leg, leg, legs],
                    });
                }
                Geometry::Blocks(blocks)
            }
            Family::Sphere => {
                let rmax = ((d as f64 - 3.0) / 2.0).min(0.4 * d as f64);
                let radius = rng.gen_range(0.15 * d as f64..rmax);
                let center = [0, 1, 2].map(|_| rng.gen_range(1.0 + radius..d as f64 - 2.0 - radius));
                Geometry::Sphere { center, radius }
            }
            Family::Cylinder => {
                let axis = rng.gen_range(0..3);
                let rmax = ((d as f64 - 3.0) / 2.0).min(0.35 * d as f64);
                let radius = rng.gen_range(0.12 * d as f64..rmax);
                let center = [0, 1].map(|_| rng.gen_range(1.0 + radius..d as f64 - 2.0 - radius));
                let len = span(rng, h, m);
                let lo = span(rng, 1, 1 + m - len);
                Geometry::Cylinder {
                    axis,
                    center,
                    radius,
                    lo,
                    hi: lo + len,
                }
            }
        };
        Ok(ShapeSpec {
            family,
            seed,
            geometry: geometry.centered(d),
        })
    }

    fn occupied(&self, c: [usize; 3]) -> bool {
        match &self.geometry {
            Geometry::Blocks(blocks) => blocks.iter().any(|b| b.contains(c)),
            Geometry::Sphere { center, radius } => {
                let d2: f64 = (0..3).map(|a| (c[a] as f64 - center[a]).powi(2)).sum();
                d2 <= radius * radius
            }
            Geometry::Cylinder {
                axis,
                center,
                radius,
                lo,
                hi,
            } => {
                let (p, q) = match axis {
                    0 => (c[1], c[2]),
                    1 => (c[0], c[2]),
                    _ => (c[0], c[1]),
                };
                let d2 = (p as f64 - center[0]).powi(2) + (q as f64 - center[1]).powi(2);
                (*lo..*hi).contains(&c[*axis]) && d2 <= radius * radius
            }
        }
    }
}

/// Rasterize a shape into a boolean `d³` grid, checking that the solid is
/// nonempty, 6-connected and at least one voxel away from every face.
pub fn generate_shape(spec: &ShapeSpec, d: usize) -> Result<VoxelGrid> {
    let grid = VoxelGrid::from_predicate(d, |i, j, k| spec.occupied([i, j, k]));
    let cells = grid.occupied_cells();
    if cells.is_empty() {
        return Err(Error::Data(format!("{} shape is empty", spec.family.name())));
    }
    if cells.iter().any(|c| c.iter().any(|&x| x == 0 || x == d - 1)) {
        return Err(Error::Data(format!(
            "{} shape touches the grid boundary of a {d}³ grid",
            spec.family.name()
        )));
    }
    if !is_six_connected(&grid) {
        return Err(Error::Data(format!("{} shape is not 6-connected", spec.family.name())));
    }
    Ok(grid)
}

/// Every occupied voxel reachable from every other through face neighbours.
pub fn is_six_connected(grid: &VoxelGrid) -> bool {
    let d = grid.extent();
    let cells = grid.occupied_cells();
    let Some(&start) = cells.first() else {
        return true;
    };
    let mut seen = vec![false; d * d * d];
    let mut queue = VecDeque::from([start]);
    seen[grid.index(start[0], start[1], start[2])] = true;
    let mut reached = 0;
    while let Some(c) = queue.pop_front() {
        reached += 1;
        for axis in 0..3 {
            for step in [-1i64, 1] {
                let x = c[axis] as i64 + step;
                if x < 0 || x >= d as i64 {
                    continue;
                }
                let mut n = c;
                n[axis] = x as usize;
                let idx = grid.index(n[0], n[1], n[2]);
                if !seen[idx] && grid.occupied(n[0], n[1], n[2]) {
                    seen[idx] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    reached == cells.len()
}
