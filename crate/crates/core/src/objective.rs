//! Voxel grids, the cross-entropy objective, IoU and the gate mosaic layout.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, LOG_FLOOR};

/// Default evaluation threshold.
pub const EVAL_THRESHOLD: f64 = 0.4;
/// Threshold used when comparing against the carving baseline.
pub const COMPARE_THRESHOLD: f64 = 0.1;

/// A cubic grid of `D³` values in `(i, j, k)` order, `k` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    extent: usize,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(extent: usize, values: Vec<f64>) -> Result<Self> {
        if extent == 0 || values.len() != extent.pow(3) {
            return Err(Error::invalid(
                "voxel grid",
                format!("extent {extent} needs {} values, got {}", extent.pow(3), values.len()),
            ));
        }
        Ok(VoxelGrid { extent, values })
    }

    pub fn zeros(extent: usize) -> Self {
        VoxelGrid {
            extent,
            values: vec![0.0; extent.pow(3)],
        }
    }

    pub fn from_fn(extent: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(extent.pow(3));
        for i in 0..extent {
            for j in 0..extent {
                for k in 0..extent {
                    values.push(f(i, j, k));
                }
            }
        }
        VoxelGrid { extent, values }
    }

    /// Boolean grid from a predicate.
    pub fn from_predicate(extent: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        Self::from_fn(extent, |i, j, k| if f(i, j, k) { 1.0 } else { 0.0 })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != s[1] || s[1] != s[2] {
            return Err(Error::invalid("voxel grid", format!("expected a cube, got {s:?}")));
        }
        Ok(VoxelGrid {
            extent: s[0],
            values: t.data().to_vec(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let d = self.extent;
        Tensor::new([d, d, d], self.values.clone()).expect("extent checked on construction")
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.extent + j) * self.extent + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.values[idx] = v;
    }

    pub fn occupied(&self, i: usize, j: usize, k: usize) -> bool {
        self.get(i, j, k) != 0.0
    }

    pub fn is_boolean(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_probability(&self) -> bool {
        self.values.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    /// Coordinates of every nonzero voxel.
    pub fn occupied_cells(&self) -> Vec<[usize; 3]> {
        let d = self.extent;
        let mut out = Vec::new();
        for (n, &v) in self.values.iter().enumerate() {
            if v != 0.0 {
                out.push([n / (d * d), (n / d) % d, n % d]);
            }
        }
        out
    }

    /// `self ⊇ other` for boolean grids.
    pub fn contains(&self, other: &VoxelGrid) -> bool {
        self.extent == other.extent
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(&a, &b)| b == 0.0 || a != 0.0)
    }
}

fn check_pair(op: &'static str, p: &VoxelGrid, y: &VoxelGrid) -> Result<()> {
    if p.extent != y.extent {
        return Err(Error::shape(op, &[p.extent; 3], &[y.extent; 3]));
    }
    if !y.is_boolean() {
        return Err(Error::invalid(op, "target grid is not boolean"));
    }
    Ok(())
}

fn voxel_nll(p: f64, y: f64) -> f64 {
    -(y * p.max(LOG_FLOOR).ln() + (1.0 - y) * (1.0 - p).max(LOG_FLOOR).ln())
}

/// Summed negative log-likelihood `−Σ [y log p + (1−y) log(1−p)]`.
pub fn cross_entropy_loss(p: &VoxelGrid, y: &VoxelGrid) -> Result<f64> {
    check_pair("cross_entropy_loss", p, y)?;
    Ok(p.values.iter().zip(&y.values).map(|(&p, &y)| voxel_nll(p, y)).sum())
}

/// Per-voxel mean of [`cross_entropy_loss`].
pub fn mean_cross_entropy(p: &VoxelGrid, y: &VoxelGrid) -> Result<f64> {
    Ok(cross_entropy_loss(p, y)? / p.values.len() as f64)
}

/// Mean per-voxel cross-entropy on the tape. `probs` and `target` share a
/// shape (typically `[B, D, D, D]`); the mean runs over every element, so
/// it is also the batch mean of per-sample means.
pub fn cross_entropy_var(tape: &mut Tape, probs: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(probs) != target.shape() {
        return Err(Error::shape("cross_entropy", tape.shape(probs), target.shape()));
    }
    if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("cross_entropy", "target grid is not boolean"));
    }
    let y = tape.constant(target.clone());
    let not_y = tape.constant(target.map(|v| 1.0 - v));
    let log_p = tape.log(probs)?;
    let q = tape.one_minus(probs)?;
    let log_q = tape.log(q)?;
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let ll = tape.add(a, b)?;
    let m = tape.mean(ll)?;
    tape.scale(m, -1.0)
}

fn check_threshold(op: &'static str, t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("threshold {t} outside (0, 1)")))
    }
}

/// Boolean grid of `p > t`.
pub fn threshold(p: &VoxelGrid, t: f64) -> Result<VoxelGrid> {
    check_threshold("threshold", t)?;
    Ok(VoxelGrid {
        extent: p.extent,
        values: p.values.iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect(),
    })
}

/// `|{p > t} ∩ {y}| / |{p > t} ∪ {y}|`, or 1 when both sets are empty.
pub fn iou(p: &VoxelGrid, y: &VoxelGrid, t: f64) -> Result<f64> {
    check_pair("iou", p, y)?;
    check_threshold("iou", t)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &y) in p.values.iter().zip(&y.values) {
        let a = p > t;
        let b = y != 0.0;
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU of two boolean grids.
pub fn iou_boolean(a: &VoxelGrid, y: &VoxelGrid) -> Result<f64> {
    if !a.is_boolean() {
        return Err(Error::invalid("iou", "prediction grid is not boolean"));
    }
    iou(a, y, 0.5)
}

/// Lay the `D` slices `g[:, :, s]` of a `D×D×D` grid out top to bottom as a
/// `D²×D` image: `mosaic[D·s + a, b] = g[a, b, s]`.
pub fn gate_mosaic(g: &Tensor) -> Result<Tensor> {
    let s = g.shape();
    if s.len() != 3 || s[0] != s[1] || s[1] != s[2] {
        return Err(Error::invalid("gate_mosaic", format!("expected a cube, got {s:?}")));
    }
    let d = s[0];
    let mut out = vec![0.0; d * d * d];
    for a in 0..d {
        for b in 0..d {
            for k in 0..d {
                out[(d * k + a) * d + b] = g.data()[(a * d + b) * d + k];
            }
        }
    }
    Tensor::new([d * d, d], out)
}

/// Inverse of [`gate_mosaic`].
pub fn un_mosaic(m: &Tensor) -> Result<Tensor> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] * s[1] {
        return Err(Error::invalid("un_mosaic", format!("expected a D²×D image, got {s:?}")));
    }
    let d = s[1];
    let mut out = vec![0.0; d * d * d];
    for r in 0..d * d {
        let (k, a) = (r / d, r % d);
        for b in 0..d {
            out[(a * d + b) * d + k] = m.data()[r * d + b];
        }
    }
    Tensor::new([d, d, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: &[f64]) -> VoxelGrid {
        VoxelGrid::new(2, values.to_vec()).unwrap()
    }

    #[test]
    fn loss_examples() {
        let y = grid(&[1., 0., 1., 1., 0., 0., 1., 0.]);
        assert!(cross_entropy_loss(&y, &y).unwrap().abs() < 1e-9);
        let half = VoxelGrid::new(2, vec![0.5; 8]).unwrap();
        assert!((mean_cross_entropy(&half, &y).unwrap() - 2f64.ln()).abs() < 1e-12);
        let p = VoxelGrid::new(1, vec![0.8]).unwrap();
        let t = VoxelGrid::new(1, vec![1.0]).unwrap();
        assert!((cross_entropy_loss(&p, &t).unwrap() - 0.223_143_551).abs() < 1e-9);
    }

    #[test]
    fn loss_rejects_bad_targets() {
        let p = VoxelGrid::new(1, vec![0.5]).unwrap();
        assert!(cross_entropy_loss(&p, &VoxelGrid::new(1, vec![0.3]).unwrap()).is_err());
        assert!(cross_entropy_loss(&p, &VoxelGrid::zeros(2)).is_err());
    }

    #[test]
    fn tape_loss_matches_plain() {
        let p = [0.9, 0.5, 0.3, 0.45, 0.41, 0.39, 0.1, 0.8];
        let y = [1., 1., 0., 0., 1., 0., 0., 0.];
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::new([1, 2, 2, 2], p.to_vec()).unwrap());
        let l = cross_entropy_var(&mut tape, pv, &Tensor::new([1, 2, 2, 2], y.to_vec()).unwrap()).unwrap();
        let plain = mean_cross_entropy(&grid(&p), &grid(&y)).unwrap();
        assert!((tape.value(l).data()[0] - plain).abs() < 1e-15);
    }

    #[test]
    fn iou_worked_example() {
        let p = grid(&[0.9, 0.5, 0.3, 0.45, 0.41, 0.39, 0.1, 0.8]);
        let y = grid(&[1., 1., 0., 0., 1., 0., 0., 0.]);
        assert!((iou(&p, &y, 0.4).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(iou(&y, &y, 0.4).unwrap(), 1.0);
        let a = grid(&[1., 0., 0., 0., 0., 0., 0., 0.]);
        let b = grid(&[0., 1., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(iou(&a, &b, 0.4).unwrap(), 0.0);
        assert_eq!(iou(&VoxelGrid::zeros(2), &VoxelGrid::zeros(2), 0.4).unwrap(), 1.0);
    }

    #[test]
    fn threshold_is_strict() {
        let p = VoxelGrid::new(1, vec![0.4]).unwrap();
        assert_eq!(threshold(&p, 0.4).unwrap().values(), &[0.0]);
        assert!(threshold(&p, 0.0).is_err());
        assert!(threshold(&p, 1.0).is_err());
    }

    #[test]
    fn mosaic_layout() {
        let c = Tensor::full([4, 4, 4], 0.25);
        assert!(gate_mosaic(&c).unwrap().data().iter().all(|&v| v == 0.25));
        let mut g = Tensor::zeros([4, 4, 4]);
        let at = g.offset(&[2, 1, 0]);
        g.data_mut()[at] = 1.0;
        let m = gate_mosaic(&g).unwrap();
        assert_eq!(m.shape(), &[16, 4]);
        assert_eq!(m.at(&[2, 1]), 1.0);
        assert_eq!(m.sum(), 1.0);
        let g = Tensor::from_fn([4, 4, 4], |i| i as f64);
        assert_eq!(un_mosaic(&gate_mosaic(&g).unwrap()).unwrap(), g);
        assert!(gate_mosaic(&Tensor::zeros([4, 4, 2])).is_err());
    }

    #[test]
    fn occupied_cells_roundtrip() {
        let g = VoxelGrid::from_predicate(3, |i, j, k| i == 2 && j == 0 && k == 1);
        assert_eq!(g.occupied_cells(), vec![[2, 0, 1]]);
        assert!(g.contains(&g));
        assert!(!VoxelGrid::zeros(3).contains(&g));
    }
}
