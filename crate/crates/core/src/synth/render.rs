use std::f64::consts::{PI, TAU};

use rand::Rng;

use crate::image::Image;
use crate::objective::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewpoint {
    /// Rotation about the vertical axis, in `[0, 2π)`.
    pub azimuth: f64,
    /// Camera elevation, in `[−π/3, π/3]`.
    pub elevation: f64,
}

impl Viewpoint {
    pub const MAX_ELEVATION: f64 = PI / 3.0;

    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Viewpoint { azimuth, elevation }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Viewpoint {
            azimuth: rng.gen_range(0.0..TAU),
            elevation: rng.gen_range(-Self::MAX_ELEVATION..=Self::MAX_ELEVATION),
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..TAU).contains(&self.azimuth) && self.elevation.abs() <= Self::MAX_ELEVATION
    }
}

/// Surface pattern strength applied to renders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TextureLevel {
    None,
    Low,
    Med,
    High,
}

impl TextureLevel {
    pub const ALL: [TextureLevel; 4] = [
        TextureLevel::None,
        TextureLevel::Low,
        TextureLevel::Med,
        TextureLevel::High,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureLevel::None => "none",
            TextureLevel::Low => "low",
            TextureLevel::Med => "med",
            TextureLevel::High => "high",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        TextureLevel::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Intensity drop applied to odd voxels of the checker pattern.
    pub fn strength(self) -> f64 {
        match self {
            TextureLevel::None => 0.0,
            TextureLevel::Low => 0.15,
            TextureLevel::Med => 0.3,
            TextureLevel::High => 0.5,
        }
    }
}

/// Orthographic projection of voxel centres of a `d³` grid onto a
/// `size×size` image covering `[−d, d]²` in voxel units.
///
/// Voxel `(i, j, k)` sits at `x = i + ½ − d/2`, `y = j + ½ − d/2`,
/// `z = d/2 − k − ½` (k points down). The grid is rotated by the azimuth
/// about `z`, then by the elevation; the camera looks along the rotated
/// `x` axis with image columns along `y` and rows running down `z`.
#[derive(Clone, Copy, Debug)]
pub struct Projector {
    d: usize,
    size: usize,
    ca: f64,
    sa: f64,
    ce: f64,
    se: f64,
}

impl Projector {
    pub fn new(d: usize, size: usize, vp: Viewpoint) -> Self {
        Projector {
            d,
            size,
            ca: vp.azimuth.cos(),
            sa: vp.azimuth.sin(),
            ce: vp.elevation.cos(),
            se: vp.elevation.sin(),
        }
    }

    /// Half-diagonal of the grid: depths lie in `[−r, r]`.
    pub fn radius(&self) -> f64 {
        3f64.sqrt() * self.d as f64 / 2.0
    }

    /// `(row, col, depth)` of a voxel centre; smaller depth is nearer.
    pub fn project(&self, i: usize, j: usize, k: usize) -> (usize, usize, f64) {
        let half = self.d as f64 / 2.0;
        let x = i as f64 + 0.5 - half;
        let y = j as f64 + 0.5 - half;
        let z = half - k as f64 - 0.5;
        let x1 = x * self.ca + y * self.sa;
        let u = -x * self.sa + y * self.ca;
        let depth = x1 * self.ce + z * self.se;
        let v = -x1 * self.se + z * self.ce;
        let scale = self.size as f64 / (2.0 * self.d as f64);
        let last = self.size - 1;
        let col = (((u + self.d as f64) * scale).floor().max(0.0) as usize).min(last);
        let row = (((self.d as f64 - v) * scale).floor().max(0.0) as usize).min(last);
        (row, col, depth)
    }
}

pub fn project(d: usize, size: usize, vp: Viewpoint, c: [usize; 3]) -> (usize, usize) {
    let (r, c, _) = Projector::new(d, size, vp).project(c[0], c[1], c[2]);
    (r, c)
}

/// Depth-shaded render: the nearest voxel landing on a pixel sets its
/// intensity in `[0.25, 1]` (near is bright); background is 0.
pub fn render(v: &VoxelGrid, vp: Viewpoint, size: usize, texture: TextureLevel) -> Image {
    let d = v.extent();
    let proj = Projector::new(d, size, vp);
    let r = proj.radius();
    let mut depth = vec![f64::INFINITY; size * size];
    let mut img = Image::zeros(size, size);
    for [i, j, k] in v.occupied_cells() {
        let (row, col, z) = proj.project(i, j, k);
        let p = row * size + col;
        if z < depth[p] {
            depth[p] = z;
            let shade = 0.25 + 0.75 * (r - z) / (2.0 * r);
            let checker = if (i + j + k) % 2 == 1 {
                1.0 - texture.strength()
            } else {
                1.0
            };
            img.data_mut()[p] = shade * checker;
        }
    }
    img
}

/// 1 where any voxel lands on the pixel.
pub fn silhouette(v: &VoxelGrid, vp: Viewpoint, size: usize) -> Image {
    let proj = Projector::new(v.extent(), size, vp);
    let mut img = Image::zeros(size, size);
    for [i, j, k] in v.occupied_cells() {
        let (row, col, _) = proj.project(i, j, k);
        img.set(row, col, 1.0);
    }
    img
}

/// Foreground mask of a render with an empty background.
pub fn silhouette_of_image(img: &Image) -> Image {
    Image::new(
        img.width(),
        img.height(),
        img.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
    )
    .expect("same extent")
}
