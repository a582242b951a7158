use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    None,
    /// One random gray level behind the object.
    Uniform,
    /// Independent random gray level per background pixel.
    Noise,
}

impl Background {
    pub fn name(self) -> &'static str {
        match self {
            Background::None => "none",
            Background::Uniform => "uniform",
            Background::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Background::None),
            "uniform" => Some(Background::Uniform),
            "noise" => Some(Background::Noise),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentOptions {
    /// Foreground intensity is scaled by a factor drawn from `[lo, hi]`.
    pub tint: (f64, f64),
    /// Content shifts by up to this many pixels along each axis.
    pub max_translate: usize,
    pub background: Background,
    /// Upper bound of background gray levels.
    pub background_max: f64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            tint: (1.0, 1.0),
            max_translate: 0,
            background: Background::None,
            background_max: 0.2,
        }
    }
}

impl AugmentOptions {
    pub fn is_identity(&self) -> bool {
        self.tint == (1.0, 1.0) && self.max_translate == 0 && self.background == Background::None
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.tint;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("augment tint range ({lo}, {hi}) is invalid")));
        }
        if !(0.0..=1.0).contains(&self.background_max) {
            return Err(Error::Config("augment background_max must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Shift content by `dx` columns and `dy` rows, filling with zeros.
pub fn translate(img: &Image, dx: i64, dy: i64) -> Result<Image> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if dx.abs() >= w || dy.abs() >= h {
        return Err(Error::invalid(
            "translate",
            format!("shift ({dx}, {dy}) exceeds a {w}x{h} image"),
        ));
    }
    let mut out = Image::zeros(img.width(), img.height());
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (r - dy, c - dx);
            if (0..h).contains(&sr) && (0..w).contains(&sc) {
                out.set(r as usize, c as usize, img.get(sr as usize, sc as usize));
            }
        }
    }
    Ok(out)
}

/// Random tint, translation and background, reproducible from `seed`.
pub fn augment(img: &Image, seed: u64, opts: &AugmentOptions) -> Result<Image> {
    opts.validate()?;
    let m = opts.max_translate;
    if m >= img.width() || m >= img.height() {
        return Err(Error::invalid(
            "augment",
            format!("translation {m} exceeds a {}x{} image", img.width(), img.height()),
        ));
    }
    if opts.is_identity() {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = opts.tint;
    let tint = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let m = m as i64;
    let dx = rng.gen_range(-m..=m);
    let dy = rng.gen_range(-m..=m);
    let mut out = translate(img, dx, dy)?;
    let level = rng.gen_range(0.0..=opts.background_max);
    for v in out.data_mut() {
        if *v > 0.0 {
            *v = (*v * tint).min(1.0);
        } else {
            *v = match opts.background {
                Background::None => 0.0,
                Background::Uniform => level,
                Background::Noise => rng.gen_range(0.0..=opts.background_max),
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot() -> Image {
        let mut img = Image::zeros(8, 8);
        img.set(4, 4, 0.8);
        img
    }

    #[test]
    fn identity_leaves_image_unchanged() {
        assert_eq!(augment(&dot(), 3, &AugmentOptions::default()).unwrap(), dot());
    }

    #[test]
    fn translation_moves_content() {
        let t = translate(&dot(), 2, 0).unwrap();
        assert_eq!(t.get(4, 6), 0.8);
        assert_eq!(t.data().iter().filter(|&&v| v > 0.0).count(), 1);
        assert!(translate(&dot(), 8, 0).is_err());
    }

    #[test]
    fn seeded_augmentation_is_reproducible() {
        let opts = AugmentOptions {
            tint: (0.6, 1.2),
            max_translate: 2,
            background: Background::Noise,
            background_max: 0.2,
        };
        let a = augment(&dot(), 11, &opts).unwrap();
        assert_eq!(a, augment(&dot(), 11, &opts).unwrap());
        assert_ne!(a, augment(&dot(), 12, &opts).unwrap());
        let too_far = AugmentOptions {
            max_translate: 8,
            ..opts
        };
        assert!(augment(&dot(), 1, &too_far).is_err());
    }
}
