//! Dataset manifests: one `image<TAB>label` pair per line, paths relative
//! to the manifest's directory. Blank lines and `#` comments are skipped.

use std::{
    fs,
    path::{Path, PathBuf},
};

use crate::{
    error::{Error, Result},
    sample::{extract_slice_sample, SliceSample},
    volume::{LabelVolume, Volume},
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(PathBuf, PathBuf)>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let content = line.trim_end_matches(['\n', '\r']);
            if !content.trim().is_empty() && !content.starts_with('#') {
                let mut fields = content.split('\t');
                match (fields.next(), fields.next(), fields.next()) {
                    (Some(img), Some(lab), None) if !img.is_empty() && !lab.is_empty() => {
                        entries.push((base.join(img), base.join(lab)));
                    }
                    _ => return Err(Error::format(path, offset, "expected `image<TAB>label`")),
                }
            }
            offset += line.len() as u64;
        }
        if entries.is_empty() {
            return Err(Error::format(path, 0, "manifest lists no volumes"));
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base, path)
    }
}

/// Loaded image/label pairs addressed as `(volume, coronal index)` samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub volumes: Vec<(Volume, LabelVolume)>,
    pub classes: usize,
    pub stack: usize,
}

impl Dataset {
    pub fn new(volumes: Vec<(Volume, LabelVolume)>, classes: usize, stack: usize) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::Invalid("dataset is empty".into()));
        }
        if stack == 0 {
            return Err(Error::Invalid("stack depth must be at least 1".into()));
        }
        let [_, h, w] = volumes[0].0.dims;
        for (k, (img, lab)) in volumes.iter().enumerate() {
            if img.dims != lab.dims {
                return Err(Error::Invalid(format!(
                    "volume {k}: image extents {:?} differ from label extents {:?}",
                    img.dims, lab.dims
                )));
            }
            if img.dims[1..] != [h, w] {
                return Err(Error::Invalid(format!(
                    "volume {k}: plane extents {:?} differ from {:?}",
                    &img.dims[1..],
                    [h, w]
                )));
            }
            lab.validate(classes)
                .map_err(|e| Error::Invalid(format!("volume {k}: {e}")))?;
        }
        Ok(Self {
            volumes,
            classes,
            stack,
        })
    }

    pub fn load(manifest: &Manifest, classes: usize, stack: usize) -> Result<Self> {
        let volumes = manifest
            .entries
            .iter()
            .map(|(img, lab)| Ok((Volume::read(img)?, LabelVolume::read(lab)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(volumes, classes, stack)
    }

    pub fn plane_dims(&self) -> [usize; 2] {
        let [_, h, w] = self.volumes[0].0.dims;
        [h, w]
    }

    pub fn len(&self) -> usize {
        self.volumes.iter().map(|(v, _)| v.dims[0]).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample `k` in volume-major, coronal-minor order.
    pub fn sample(&self, mut k: usize) -> Result<SliceSample> {
        for (v, (img, lab)) in self.volumes.iter().enumerate() {
            if k < img.dims[0] {
                let mut s = extract_slice_sample(img, lab, k, self.stack, self.classes)?;
                s.volume = v;
                return Ok(s);
            }
            k -= img.dims[0];
        }
        Err(Error::Invalid(format!(
            "sample index out of range for {} samples",
            self.len()
        )))
    }

    /// Voxel count per class over all label volumes.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut total = vec![0u64; self.classes];
        for (_, lab) in &self.volumes {
            for (t, c) in total.iter_mut().zip(lab.counts(self.classes)) {
                *t += c;
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_resolve_against_manifest_dir() {
        let m = Manifest::parse(
            "# pairs\na.mvol\tb.mvol\n\nc.mvol\td.mvol",
            Path::new("/data"),
            Path::new("m"),
        )
        .unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].0, Path::new("/data/c.mvol"));
    }

    #[test]
    fn malformed_line_reports_offset() {
        match Manifest::parse("a\tb\nonly-one\n", Path::new(""), Path::new("m")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        assert!(Manifest::parse("\n# nothing\n", Path::new(""), Path::new("m")).is_err());
    }
}
