//! Whole-volume segmentation, Dice evaluation and report emission.

use std::{num::NonZeroUsize, path::Path, thread, time::Instant};

use ffce_core::{network::argmax_classes, FfceNet, ForwardInputs, ForwardOptions, Graph, Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{
    error::{Error, Result},
    sample::extract_inputs,
    volume::{LabelVolume, Volume},
};

/// Environment variable capping the number of segmentation workers.
pub const THREADS_ENV: &str = "FFCE_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub labels: LabelVolume,
    /// Context scaling factors γ per coronal slice.
    pub gammas: Vec<Vec<f32>>,
    pub seconds: f64,
}

/// Worker count: `FFCE_THREADS` if set to a positive integer, else the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, NonZeroUsize::get))
}

/// Labels and γ of one slice.
type SliceResult = Result<(Vec<u16>, Vec<f32>)>;

fn segment_slice(net: &FfceNet<f32>, vol: &Volume, i: usize) -> SliceResult {
    let [_, h, w] = vol.dims;
    let s = net.config().stack_depth;
    let (slice, stack) = extract_inputs(vol, i, s)?;
    let slice = Tensor::new([1, 1, h, w], slice)?;
    let stack = Tensor::new([1, s, h, w], stack)?;
    let mut graph = Graph::new();
    // eval mode draws nothing from the RNG
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs = ForwardInputs {
        slice: &slice,
        stack: Some(&stack),
    };
    let fwd = net.forward(&mut graph, inputs, Mode::Eval, &mut rng, &ForwardOptions::default())?;
    let labels = argmax_classes(graph.value(fwd.out.probs))?;
    Ok((labels, graph.value(fwd.out.gamma).data().to_vec()))
}

/// Segments every coronal slice of `vol` in eval mode, spreading slices
/// over [`worker_count`] threads.
pub fn segment_volume(net: &FfceNet<f32>, vol: &Volume) -> Result<SegmentationResult> {
    segment_volume_with(net, vol, worker_count())
}

pub fn segment_volume_with(net: &FfceNet<f32>, vol: &Volume, workers: usize) -> Result<SegmentationResult> {
    let start = Instant::now();
    let [d, h, w] = vol.dims;
    let div = net.config().spatial_divisor();
    if h % div != 0 || w % div != 0 {
        return Err(Error::Invalid(format!(
            "plane extents {h}×{w} must be divisible by {div}"
        )));
    }
    let workers = workers.clamp(1, d);
    let mut planes: Vec<Option<SliceResult>> = (0..d).map(|_| None).collect();
    thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                scope.spawn(move || {
                    (k..d)
                        .step_by(workers)
                        .map(|i| (i, segment_slice(net, vol, i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for handle in handles {
            for (i, r) in handle.join().expect("segmentation worker panicked") {
                planes[i] = Some(r);
            }
        }
    });
    let mut labels = Vec::with_capacity(d * h * w);
    let mut gammas = Vec::with_capacity(d);
    for plane in planes {
        let (l, g) = plane.expect("every slice assigned")?;
        labels.extend(l);
        gammas.push(g);
    }
    Ok(SegmentationResult {
        labels: LabelVolume::new(vol.dims, labels)?,
        gammas,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Dice per class; `None` when the class is absent from both volumes.
    pub per_class: Vec<Option<f64>>,
    /// Mean Dice over non-background classes present in either volume
    /// (1 when there are none).
    pub mean_dice: f64,
    /// Ground-truth voxel count per class.
    pub voxel_counts: Vec<u64>,
    pub runtime_seconds: Option<f64>,
}

impl MetricsReport {
    /// Classes entering the mean.
    pub fn included(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.per_class
            .iter()
            .enumerate()
            .skip(1)
            .filter_map(|(c, d)| d.map(|d| (c, d)))
    }
}

pub fn evaluate_dice(pred: &LabelVolume, gt: &LabelVolume, classes: usize) -> Result<MetricsReport> {
    if pred.dims != gt.dims {
        return Err(Error::Invalid(format!(
            "prediction extents {:?} differ from ground truth {:?}",
            pred.dims, gt.dims
        )));
    }
    pred.validate(classes)?;
    gt.validate(classes)?;
    let mut inter = vec![0u64; classes];
    let mut pc = vec![0u64; classes];
    let mut gc = vec![0u64; classes];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        pc[p as usize] += 1;
        gc[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| match pc[c] + gc[c] {
            0 => None,
            total => Some(2.0 * inter[c] as f64 / total as f64),
        })
        .collect();
    let mut report = MetricsReport {
        per_class,
        mean_dice: 1.0,
        voxel_counts: gc,
        runtime_seconds: None,
    };
    let included: Vec<f64> = report.included().map(|(_, d)| d).collect();
    if !included.is_empty() {
        report.mean_dice = included.iter().sum::<f64>() / included.len() as f64;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::Usage(format!(
                "unknown report format {s:?} (expected json or csv)"
            ))),
        }
    }
}

impl ReportFormat {
    /// Format implied by a path's extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        path.extension().and_then(|e| e.to_str()).unwrap_or("").parse()
    }
}

/// Renders a report; CSV has a header, one row per class entering the
/// mean and a final `MEAN` row.
pub fn render_report(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Invalid(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Invalid(e.to_string());
            w.write_record(["class", "dice", "voxels"]).map_err(csv_err)?;
            for (c, d) in report.included() {
                let row = [c.to_string(), d.to_string(), report.voxel_counts[c].to_string()];
                w.write_record(&row).map_err(csv_err)?;
            }
            let total: u64 = report.included().map(|(c, _)| report.voxel_counts[c]).sum();
            let mean = ["MEAN".to_string(), report.mean_dice.to_string(), total.to_string()];
            w.write_record(&mean).map_err(csv_err)?;
            let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("CSV of ASCII fields"))
        }
    }
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(report, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        let offset = text
            .split_inclusive('\n')
            .take(e.line().saturating_sub(1))
            .map(str::len)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::format(path, offset as u64, e.to_string())
    })
}
