//! Visual-hull carving from exact silhouettes and the learned-vs-carved
//! comparison report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::Network;
use crate::objective::{iou, iou_boolean, VoxelGrid};
use crate::params::ParamStore;
use crate::synth::{silhouette_of_image, Projector, TextureLevel, Viewpoint};
use crate::training::{mean, predict_batch, LoadedSample};

#[derive(Clone, Debug)]
pub struct CarveInput {
    /// Binary masks, 1 inside the object. All share one square size.
    pub silhouettes: Vec<Image>,
    pub viewpoints: Vec<Viewpoint>,
    pub extent: usize,
}

impl CarveInput {
    fn raster(&self) -> Result<usize> {
        if self.silhouettes.is_empty() {
            return Err(Error::invalid("carve", "at least one view is required"));
        }
        if self.silhouettes.len() != self.viewpoints.len() {
            return Err(Error::invalid(
                "carve",
                format!(
                    "{} silhouettes for {} viewpoints",
                    self.silhouettes.len(),
                    self.viewpoints.len()
                ),
            ));
        }
        if self.extent == 0 {
            return Err(Error::invalid("carve", "grid extent must be >= 1"));
        }
        let size = self.silhouettes[0].width();
        for s in &self.silhouettes {
            if s.width() != size || s.height() != size {
                return Err(Error::invalid(
                    "carve",
                    format!(
                        "silhouette is {}x{} but the projection raster is {size}x{size}",
                        s.width(),
                        s.height()
                    ),
                ));
            }
        }
        Ok(size)
    }
}

/// A voxel survives iff its centre projects inside every silhouette.
pub fn carve(input: &CarveInput) -> Result<VoxelGrid> {
    let size = input.raster()?;
    let d = input.extent;
    let projectors: Vec<Projector> = input.viewpoints.iter().map(|&vp| Projector::new(d, size, vp)).collect();
    Ok(VoxelGrid::from_predicate(d, |i, j, k| {
        projectors.iter().zip(&input.silhouettes).all(|(p, s)| {
            let (row, col, _) = p.project(i, j, k);
            s.get(row, col) > 0.0
        })
    }))
}

/// Hull of the first `k` stored views of a clean-background sample.
pub fn carve_sample(s: &LoadedSample, k: usize) -> Result<VoxelGrid> {
    if k == 0 || k > s.views.len() {
        return Err(Error::Data(format!(
            "sample `{}` has {} views, {k} requested",
            s.id,
            s.views.len()
        )));
    }
    let silhouettes = s.views[..k]
        .iter()
        .map(|v| Image::from_tensor(v).map(|i| silhouette_of_image(&i)))
        .collect::<Result<Vec<_>>>()?;
    carve(&CarveInput {
        silhouettes,
        viewpoints: s.viewpoints[..k].to_vec(),
        extent: s.target.extent(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Learned,
    Carve,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Learned => "learned",
            Method::Carve => "carve",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: Method,
    pub views: usize,
    pub texture: TextureLevel,
    pub mean_iou: f64,
}

/// Mean IoU of both methods for every view count on every texture level.
/// `sets` pairs each level with the same samples rendered at that level.
pub fn compare(
    net: &Network,
    store: &ParamStore,
    sets: &[(TextureLevel, Vec<LoadedSample>)],
    views: &[usize],
    threshold: f64,
) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for (texture, samples) in sets {
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "no samples rendered at texture level `{}`",
                texture.name()
            )));
        }
        let stored = samples.iter().map(|s| s.views.len()).min().unwrap_or(0);
        if let Some(&k) = views.iter().find(|&&k| k == 0 || k > stored) {
            return Err(Error::invalid(
                "compare",
                format!("view count {k} outside 1..={stored} stored views"),
            ));
        }
        let refs: Vec<&LoadedSample> = samples.iter().collect();
        for &k in views {
            let preds = predict_batch(net, store, &refs, k)?;
            let learned = preds
                .iter()
                .zip(samples)
                .map(|(p, s)| iou(p, &s.target, threshold))
                .collect::<Result<Vec<_>>>()?;
            let carved = samples
                .iter()
                .map(|s| iou_boolean(&carve_sample(s, k)?, &s.target))
                .collect::<Result<Vec<_>>>()?;
            for (method, scores) in [(Method::Learned, learned), (Method::Carve, carved)] {
                rows.push(CompareRow {
                    method,
                    views: k,
                    texture: *texture,
                    mean_iou: mean(&scores),
                });
            }
        }
    }
    Ok(rows)
}

pub const COMPARE_HEADER: &str = "method,views,texture,mean_iou";

pub fn format_compare_csv(rows: &[CompareRow]) -> String {
    let mut out = format!("{COMPARE_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6}",
            r.method.name(),
            r.views,
            r.texture.name(),
            r.mean_iou
        )
        .expect("writing to a string");
    }
    out
}

pub fn parse_compare_csv(text: &str) -> Result<Vec<CompareRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(COMPARE_HEADER) {
        return Err(Error::Data("comparison report lacks its header".into()));
    }
    lines
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let bad = || Error::Data(format!("bad comparison row `{l}`"));
            let f: Vec<&str> = l.split(',').collect();
            let [method, views, texture, m] = f[..] else {
                return Err(bad());
            };
            Ok(CompareRow {
                method: match method {
                    "learned" => Method::Learned,
                    "carve" => Method::Carve,
                    _ => return Err(bad()),
                },
                views: views.parse().map_err(|_| bad())?,
                texture: TextureLevel::parse(texture).ok_or_else(bad)?,
                mean_iou: m.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Mean IoUs at a low and a high view count on one texture level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crossover {
    pub few: usize,
    pub many: usize,
    pub learned_few: f64,
    pub carve_few: f64,
    pub learned_many: f64,
    pub carve_many: f64,
}

impl Crossover {
    pub fn from_rows(rows: &[CompareRow], texture: TextureLevel, few: usize, many: usize) -> Option<Self> {
        let get = |m: Method, k: usize| {
            rows.iter()
                .find(|r| r.method == m && r.views == k && r.texture == texture)
                .map(|r| r.mean_iou)
        };
        Some(Crossover {
            few,
            many,
            learned_few: get(Method::Learned, few)?,
            carve_few: get(Method::Carve, few)?,
            learned_many: get(Method::Learned, many)?,
            carve_many: get(Method::Carve, many)?,
        })
    }

    /// The learned model wins with few views.
    pub fn learned_wins_few(&self) -> bool {
        self.learned_few > self.carve_few
    }

    /// The carver wins with many views.
    pub fn carve_wins_many(&self) -> bool {
        self.carve_many > self.learned_many
    }

    /// `#` comment lines for the report.
    pub fn notes(&self, seed: u64) -> String {
        let verdict = |ok: bool| if ok { "holds" } else { "fails" };
        format!(
            "# seed {seed}: {} view(s) learned {:.4} vs carve {:.4}, learned ahead: {}\n\
             # seed {seed}: {} view(s) carve {:.4} vs learned {:.4}, carve ahead: {}\n",
            self.few,
            self.learned_few,
            self.carve_few,
            verdict(self.learned_wins_few()),
            self.many,
            self.carve_many,
            self.learned_many,
            verdict(self.carve_wins_many()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_silhouette_keeps_everything() {
        let input = CarveInput {
            silhouettes: vec![Image::new(8, 8, vec![1.0; 64]).unwrap()],
            viewpoints: vec![Viewpoint::new(0.3, 0.2)],
            extent: 4,
        };
        assert_eq!(carve(&input).unwrap().count(), 64);
    }

    #[test]
    fn rejects_bad_inputs() {
        let vp = Viewpoint::new(0.0, 0.0);
        let empty = CarveInput {
            silhouettes: vec![],
            viewpoints: vec![],
            extent: 4,
        };
        assert!(carve(&empty).is_err());
        let ragged = CarveInput {
            silhouettes: vec![Image::zeros(8, 8), Image::zeros(6, 6)],
            viewpoints: vec![vp, vp],
            extent: 4,
        };
        assert!(carve(&ragged).is_err());
        let unmatched = CarveInput {
            silhouettes: vec![Image::zeros(8, 8)],
            viewpoints: vec![vp, vp],
            extent: 4,
        };
        assert!(carve(&unmatched).is_err());
    }

    #[test]
    fn compare_csv_roundtrip() {
        let rows = vec![
            CompareRow {
                method: Method::Learned,
                views: 1,
                texture: TextureLevel::None,
                mean_iou: 0.5,
            },
            CompareRow {
                method: Method::Carve,
                views: 8,
                texture: TextureLevel::High,
                mean_iou: 0.875,
            },
        ];
        assert_eq!(parse_compare_csv(&format_compare_csv(&rows)).unwrap(), rows);
    }
}
