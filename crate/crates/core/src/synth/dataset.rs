use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{generate_shape, render, Family, ShapeSpec, TextureLevel, Viewpoint};
use crate::error::{Error, Result};
use crate::hash::{fnv1a64, mix64};
use crate::image::write_pgm;
use crate::manifest::{Manifest, Sample, ViewRef};
use crate::objective::VoxelGrid;
use crate::voxl::write_voxl;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub families: Vec<Family>,
    pub grid: usize,
    pub image_size: usize,
    /// Views rendered per sample.
    pub views: usize,
    pub seed: u64,
    /// Every level gets its own set of renders; the first also backs the
    /// plain `manifest.tsv`, `train.tsv` and `test.tsv`.
    pub textures: Vec<TextureLevel>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 250,
            families: Family::ALL.to_vec(),
            grid: 16,
            image_size: 32,
            views: 8,
            seed: 1,
            textures: TextureLevel::ALL.to_vec(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.views == 0 {
            return Err(Error::Config("synth.count and synth.views must be >= 1".into()));
        }
        if self.families.is_empty() || self.textures.is_empty() {
            return Err(Error::Config(
                "synth.families and synth.textures must be nonempty".into(),
            ));
        }
        if self.grid < 8 || self.image_size == 0 {
            return Err(Error::Config(
                "synth.grid must be >= 8 and synth.image_size >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn test_count(&self) -> usize {
        self.count / 5
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSummary {
    pub manifest: PathBuf,
    pub train: usize,
    pub test: usize,
    pub images: usize,
}

/// Seed of sample `id` under a master seed.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(id.as_bytes());
    mix64(fnv1a64(&bytes))
}

struct Generated {
    id: String,
    target: VoxelGrid,
    viewpoints: Vec<Viewpoint>,
}

fn generate(cfg: &SynthConfig, index: usize) -> Result<Generated> {
    let family = cfg.families[index % cfg.families.len()];
    let id = format!("{}-{index:04}", family.name());
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, &id));
    let mut last = None;
    for _ in 0..64 {
        let spec = ShapeSpec::sample(family, cfg.grid, rng.gen())?;
        match generate_shape(&spec, cfg.grid) {
            Ok(target) => {
                let viewpoints = (0..cfg.views).map(|_| Viewpoint::random(&mut rng)).collect();
                return Ok(Generated { id, target, viewpoints });
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn views_dir(level: TextureLevel) -> String {
    format!("views-{}", level.name())
}

/// Test split of `test` ids, stratified by family: each family gives the
/// ids with its lowest sample seeds in proportion to its size, and the
/// remainder comes from the lowest seeds overall.
pub(crate) fn split_ids(ids: &[String], seed: u64, test: usize) -> Vec<bool> {
    let key = |n: usize| (sample_seed(seed, &ids[n]), n);
    let mut groups: Vec<(Option<Family>, Vec<usize>)> = Vec::new();
    for (n, id) in ids.iter().enumerate() {
        let f = Family::of_id(id);
        match groups.iter_mut().find(|g| g.0 == f) {
            Some(g) => g.1.push(n),
            None => groups.push((f, vec![n])),
        }
    }
    let mut is_test = vec![false; ids.len()];
    let mut taken = 0;
    for (_, members) in &mut groups {
        members.sort_by_key(|&n| key(n));
        let share = members.len() * test / ids.len().max(1);
        for &n in &members[..share] {
            is_test[n] = true;
        }
        taken += share;
    }
    let mut rest: Vec<usize> = (0..ids.len()).filter(|&n| !is_test[n]).collect();
    rest.sort_by_key(|&n| key(n));
    for &n in &rest[..test - taken] {
        is_test[n] = true;
    }
    is_test
}

/// Generate, render and write a dataset under `out`.
pub fn build_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetSummary> {
    cfg.validate()?;
    mkdir(out)?;
    mkdir(&out.join("voxels"))?;
    let samples: Vec<Generated> = (0..cfg.count)
        .into_par_iter()
        .map(|n| generate(cfg, n))
        .collect::<Result<_>>()?;

    samples.par_iter().try_for_each(|s| -> Result<()> {
        write_voxl(&out.join("voxels").join(format!("{}.voxl", s.id)), &s.target)?;
        for &level in &cfg.textures {
            let dir = out.join(views_dir(level)).join(&s.id);
            mkdir(&dir)?;
            for (t, &vp) in s.viewpoints.iter().enumerate() {
                let img = render(&s.target, vp, cfg.image_size, level);
                write_pgm(&dir.join(format!("{t}.pgm")), &img)?;
            }
        }
        Ok(())
    })?;

    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let is_test = split_ids(&ids, cfg.seed, cfg.test_count());
    let mut first = None;
    for &level in &cfg.textures {
        let entries: Vec<Sample> = samples
            .iter()
            .map(|s| Sample {
                id: s.id.clone(),
                target: PathBuf::from("voxels").join(format!("{}.voxl", s.id)),
                views: s
                    .viewpoints
                    .iter()
                    .enumerate()
                    .map(|(t, &viewpoint)| ViewRef {
                        path: PathBuf::from(views_dir(level)).join(&s.id).join(format!("{t}.pgm")),
                        viewpoint,
                    })
                    .collect(),
            })
            .collect();
        let subset = |want_test: Option<bool>| Manifest {
            root: out.to_path_buf(),
            samples: entries
                .iter()
                .zip(&is_test)
                .filter(|(_, &t)| want_test.is_none_or(|w| w == t))
                .map(|(s, _)| s.clone())
                .collect(),
        };
        let sets = [
            ("manifest", subset(None)),
            ("train", subset(Some(false))),
            ("test", subset(Some(true))),
        ];
        for (name, m) in &sets {
            m.write(&out.join(format!("{name}-{}.tsv", level.name())))?;
            if first.is_none() {
                m.write(&out.join(format!("{name}.tsv")))?;
            }
        }
        first.get_or_insert(());
    }
    let test = cfg.test_count();
    Ok(DatasetSummary {
        manifest: out.join("manifest.tsv"),
        train: cfg.count - test,
        test,
        images: cfg.count * cfg.views * cfg.textures.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(count: usize) -> Vec<String> {
        (0..count)
            .map(|n| format!("{}-{n:04}", Family::ALL[n % Family::ALL.len()].name()))
            .collect()
    }

    #[test]
    fn split_is_four_to_one() {
        let cfg = SynthConfig {
            count: 100,
            ..SynthConfig::default()
        };
        let is_test = split_ids(&ids(100), 1, cfg.test_count());
        assert_eq!(is_test.iter().filter(|&&t| t).count(), 20);
    }

    #[test]
    fn every_family_reaches_the_test_split() {
        for seed in 1..6 {
            let ids = ids(250);
            let is_test = split_ids(&ids, seed, 50);
            for f in Family::ALL {
                let n = ids
                    .iter()
                    .zip(&is_test)
                    .filter(|(id, &t)| t && Family::of_id(id) == Some(f))
                    .count();
                assert!((3..=15).contains(&n), "seed {seed}: {} has {n} test samples", f.name());
            }
        }
    }
}
