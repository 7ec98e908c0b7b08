//! Deterministic synthetic volumes: L−1 nested, mutually offset
//! ellipsoids over background, class mean intensity `l/(L−1)` plus
//! Gaussian noise.

use std::{fs, path::Path};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{
    error::{Error, Result},
    volume::{LabelVolume, Volume},
};

/// Noise standard deviation relative to the [0, 1] intensity range.
pub const NOISE_SIGMA: f64 = 0.05;
/// Outer ellipsoid semi-axis as a fraction of the extent.
const OUTER_RADIUS: f64 = 0.4;
/// Smallest admissible semi-axis of the innermost region, in voxels.
const MIN_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub volumes: usize,
    pub dims: [usize; 3],
    pub classes: usize,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(Error::Invalid(format!(
                "class count {} outside [2, 65535]",
                self.classes
            )));
        }
        if self.volumes == 0 {
            return Err(Error::Invalid("need at least one volume".into()));
        }
        let smallest = *self.dims.iter().min().unwrap() as f64;
        let inner = OUTER_RADIUS * smallest / (self.classes - 1) as f64;
        if inner < MIN_RADIUS {
            return Err(Error::Invalid(format!(
                "extents {:?} are too small to fit {} nested regions",
                self.dims, self.classes
            )));
        }
        Ok(())
    }
}

/// One image/label pair drawn from `rng`.
pub fn generate_volume(rng: &mut ChaCha8Rng, dims: [usize; 3], classes: usize) -> (Volume, LabelVolume) {
    let regions = classes - 1;
    let mut centers = Vec::with_capacity(regions);
    let mut radii = Vec::with_capacity(regions);
    let mut center: [f64; 3] = dims.map(|d| (d as f64 - 1.0) / 2.0);
    for r in 0..regions {
        let shrink = (regions - r) as f64 / regions as f64;
        let radius: [f64; 3] = dims.map(|d| OUTER_RADIUS * d as f64 * shrink * rng.gen_range(0.9..1.0));
        if r > 0 {
            // keep the region inside its parent: offset by at most the radius gap
            let parent: &[f64; 3] = &radii[r - 1];
            for a in 0..3 {
                let slack = (parent[a] - radius[a]).max(0.0) * 0.5;
                center[a] += rng.gen_range(-slack..=slack);
            }
        }
        centers.push(center);
        radii.push(radius);
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let n = dims.iter().product();
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let inside =
                    |c: &[f64; 3], r: &[f64; 3]| (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0;
                let label = (0..regions)
                    .rev()
                    .find(|&r| inside(&centers[r], &radii[r]))
                    .map_or(0, |r| r + 1);
                labels.push(label as u16);
                let mean = label as f64 / regions as f64;
                data.push((mean + noise.sample(rng)) as f32);
            }
        }
    }
    (
        Volume::new(dims, data).expect("finite synthetic intensities"),
        LabelVolume::new(dims, labels).expect("extents match"),
    )
}

pub fn generate(config: &SynthConfig) -> Result<Vec<(Volume, LabelVolume)>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let out: Vec<_> = (0..config.volumes)
        .map(|_| generate_volume(&mut rng, config.dims, config.classes))
        .collect();
    let mut seen = vec![false; config.classes];
    for (_, lab) in &out {
        for &l in &lab.data {
            seen[l as usize] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Invalid(format!(
            "class {missing} did not occur; enlarge the extents"
        )));
    }
    Ok(out)
}

/// Writes `vol_XXX.mvol`, `lab_XXX.mvol` and a `train.tsv` manifest into
/// `dir`, returning the manifest path.
pub fn write_dataset(config: &SynthConfig, dir: &Path) -> Result<std::path::PathBuf> {
    let pairs = generate(config)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (k, (img, lab)) in pairs.iter().enumerate() {
        let (vn, ln) = (format!("vol_{k:03}.mvol"), format!("lab_{k:03}.mvol"));
        img.write(dir.join(&vn))?;
        lab.write(dir.join(&ln))?;
        manifest.push_str(&format!("{vn}\t{ln}\n"));
    }
    let path = dir.join("train.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
