//! Dataset manifests.
//!
//! One line per sample:
//! `id<TAB>target_path<TAB>view_count<TAB>view_path:azimuth:elevation;...`.
//! Paths are relative to the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{read_pgm, Image};
use crate::objective::VoxelGrid;
use crate::synth::Viewpoint;
use crate::voxl::read_voxl;

#[derive(Clone, Debug, PartialEq)]
pub struct ViewRef {
    pub path: PathBuf,
    pub viewpoint: Viewpoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub target: PathBuf,
    pub views: Vec<ViewRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Manifest {
    pub fn encode(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let views: Vec<String> = s
                .views
                .iter()
                .map(|v| format!("{}:{}:{}", v.path.display(), v.viewpoint.azimuth, v.viewpoint.elevation))
                .collect();
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                s.id,
                s.target.display(),
                s.views.len(),
                views.join(";")
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn decode(text: &str, root: PathBuf) -> std::result::Result<Self, String> {
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let line_no = n + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, target, count, views] = fields[..] else {
                return Err(format!(
                    "line {line_no}: expected 4 tab-separated fields, got {}",
                    fields.len()
                ));
            };
            let count: usize = count
                .parse()
                .map_err(|_| format!("line {line_no}: bad view count `{count}`"))?;
            let views = views
                .split(';')
                .filter(|v| !v.is_empty())
                .map(|v| {
                    let mut parts = v.rsplitn(3, ':');
                    let (el, az, path) = (parts.next(), parts.next(), parts.next());
                    let (Some(el), Some(az), Some(path)) = (el, az, path) else {
                        return Err(format!("line {line_no}: bad view entry `{v}`"));
                    };
                    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("line {line_no}: bad angle `{s}`"));
                    Ok(ViewRef {
                        path: PathBuf::from(path),
                        viewpoint: Viewpoint::new(num(az)?, num(el)?),
                    })
                })
                .collect::<std::result::Result<Vec<_>, String>>()?;
            if views.len() != count {
                return Err(format!(
                    "line {line_no}: view count {count} but {} views listed",
                    views.len()
                ));
            }
            if views.is_empty() {
                return Err(format!("line {line_no}: sample `{id}` has no views"));
            }
            samples.push(Sample {
                id: id.to_string(),
                target: PathBuf::from(target),
                views,
            });
        }
        Ok(Manifest { root, samples })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::decode(&text, root).map_err(|m| Error::format(path, m))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_target(&self, s: &Sample) -> Result<VoxelGrid> {
        let g = read_voxl(&self.resolve(&s.target))?;
        if !g.is_boolean() {
            return Err(Error::Data(format!("target of `{}` is not a boolean grid", s.id)));
        }
        Ok(g)
    }

    /// The first `k` views of a sample.
    pub fn load_views(&self, s: &Sample, k: usize) -> Result<Vec<Image>> {
        if k > s.views.len() {
            return Err(Error::Data(format!(
                "sample `{}` has {} views, {k} requested",
                s.id,
                s.views.len()
            )));
        }
        s.views[..k].iter().map(|v| read_pgm(&self.resolve(&v.path))).collect()
    }

    pub fn min_views(&self) -> usize {
        self.samples.iter().map(|s| s.views.len()).min().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_roundtrip() {
        let m = Manifest {
            root: PathBuf::from("/data"),
            samples: vec![Sample {
                id: "sphere-0001".into(),
                target: "voxels/sphere-0001.voxl".into(),
                views: vec![
                    ViewRef {
                        path: "views-none/sphere-0001/0.pgm".into(),
                        viewpoint: Viewpoint::new(0.1234567890123, -0.5),
                    },
                    ViewRef {
                        path: "views-none/sphere-0001/1.pgm".into(),
                        viewpoint: Viewpoint::new(6.2, 1.0),
                    },
                ],
            }],
        };
        let text = m.encode();
        assert!(text.starts_with(
            "sphere-0001\tvoxels/sphere-0001.voxl\t2\tviews-none/sphere-0001/0.pgm:0.1234567890123:-0.5;"
        ));
        assert_eq!(Manifest::decode(&text, "/data".into()).unwrap(), m);
    }

    #[test]
    fn malformed_lines() {
        assert!(Manifest::decode("a\tb\t1\n", "".into()).is_err());
        assert!(Manifest::decode("a\tb\t2\tv.pgm:0:0\n", "".into()).is_err());
        assert!(Manifest::decode("a\tb\t1\tv.pgm:x:0\n", "".into()).is_err());
        assert!(Manifest::decode("a\tb\t0\t\n", "".into()).is_err());
    }
}
