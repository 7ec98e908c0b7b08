//! Coronal slice samples: the 2D slice, its depth-as-channel stack, the
//! label plane and the class-presence vector.

use crate::{
    error::{Error, Result},
    volume::{LabelVolume, Volume},
};

#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    /// H×W intensities of coronal plane `index`.
    pub slice: Vec<f32>,
    /// S×H×W intensities of the planes around `index`.
    pub stack: Vec<f32>,
    pub gt: Vec<u16>,
    pub presence: Vec<f32>,
    /// Plane extents (H, W).
    pub dims: [usize; 2],
    pub volume: usize,
    pub index: usize,
}

/// Plane indices of the stack around `i`: `[i − ⌊(S−1)/2⌋, i + ⌈(S−1)/2⌉]`
/// clamped to `[0, depth)`.
pub fn stack_planes(i: usize, stack: usize, depth: usize) -> Vec<usize> {
    let before = (stack - 1) / 2;
    (0..stack)
        .map(|k| (i + k).saturating_sub(before).min(depth - 1))
        .collect()
}

pub fn presence_vector(gt: &[u16], classes: usize) -> Vec<f32> {
    let mut p = vec![0.0; classes];
    for &g in gt {
        if let Some(v) = p.get_mut(g as usize) {
            *v = 1.0;
        }
    }
    p
}

fn check_index(vol: &Volume, i: usize, stack: usize) -> Result<()> {
    if i >= vol.dims[0] {
        return Err(Error::Invalid(format!(
            "coronal index {i} out of range for depth {}",
            vol.dims[0]
        )));
    }
    if stack == 0 {
        return Err(Error::Invalid("stack depth must be at least 1".into()));
    }
    Ok(())
}

/// Slice and stack of plane `i`, without labels.
pub fn extract_inputs(vol: &Volume, i: usize, stack: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    check_index(vol, i, stack)?;
    let planes = stack_planes(i, stack, vol.dims[0]);
    let s = planes.iter().flat_map(|&p| vol.plane(p).iter().copied()).collect();
    Ok((vol.plane(i).to_vec(), s))
}

pub fn extract_slice_sample(
    vol: &Volume,
    labels: &LabelVolume,
    i: usize,
    stack: usize,
    classes: usize,
) -> Result<SliceSample> {
    if vol.dims != labels.dims {
        return Err(Error::Invalid(format!(
            "image extents {:?} differ from label extents {:?}",
            vol.dims, labels.dims
        )));
    }
    let (slice, stack) = extract_inputs(vol, i, stack)?;
    let gt = labels.plane(i).to_vec();
    if let Some(&bad) = gt.iter().find(|&&g| g as usize >= classes) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let presence = presence_vector(&gt, classes);
    Ok(SliceSample {
        slice,
        stack,
        gt,
        presence,
        dims: [vol.dims[1], vol.dims[2]],
        volume: 0,
        index: i,
    })
}
