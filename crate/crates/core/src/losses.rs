//! Segmentation losses: weighted pixel cross-entropy, multi-class soft
//! Dice, and the binary cross-entropy on class-presence logits, plus their
//! weighted composite and class-balancing weights.

use alloc::{format, vec, vec::Vec};

use crate::{
    error::{Error, Result},
    graph::{Graph, Var},
    network::ForwardOutput,
    scalar::Scalar,
    tensor::Tensor,
};

/// Lower clamp applied to probabilities inside the log.
pub const LOG_CLAMP: f64 = 1e-12;
/// Smoothing term in Dice denominators.
pub const DICE_EPS: f64 = 1e-7;

/// Per-class weights ω for the cross-entropy term.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    omega: Vec<f64>,
}

impl ClassWeights {
    /// All-ones weights (class weighting disabled).
    pub fn uniform(classes: usize) -> Self {
        Self {
            omega: vec![1.0; classes],
        }
    }

    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.is_empty() || omega.iter().any(|&w| !w.is_finite() || w <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "class weights must be positive and finite: {omega:?}"
            )));
        }
        Ok(Self { omega })
    }

    /// Median-frequency balancing from per-class voxel counts:
    /// `ω_c = median(freq) / freq_c`, the median taken over classes that
    /// occur. Classes that never occur get the largest present weight.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if counts.is_empty() || total == 0 {
            return Err(Error::InvalidArgument(
                "class weights need at least one labelled voxel".into(),
            ));
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Self::from_frequencies(&freq)
    }

    pub fn from_frequencies(freq: &[f64]) -> Result<Self> {
        let mut present: Vec<f64> = freq.iter().copied().filter(|&f| f > 0.0).collect();
        if present.is_empty() {
            return Err(Error::InvalidArgument(
                "class weights need at least one present class".into(),
            ));
        }
        present.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = present.len();
        let median = if m % 2 == 1 {
            present[m / 2]
        } else {
            (present[m / 2 - 1] + present[m / 2]) / 2.0
        };
        let max_present = median / present[0];
        let omega = freq
            .iter()
            .map(|&f| if f > 0.0 { median / f } else { max_present })
            .collect();
        Self::new(omega)
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn classes(&self) -> usize {
        self.omega.len()
    }
}

/// Weights of the three terms in the composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
    pub sec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            dice: 1.0,
            sec: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.ce, self.dice, self.sec]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "loss weights must be nonnegative: {self:?}"
            )))
        }
    }
}

/// Scalar values of one composite-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub sec: f64,
}

/// Graph handles of the composite loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
    pub sec: Var,
}

impl LossVars {
    pub fn report<T: Scalar>(&self, graph: &Graph<T>) -> LossReport {
        let get = |v: Var| graph.value(v).item().as_f64();
        LossReport {
            total: get(self.total),
            ce: get(self.ce),
            dice: get(self.dice),
            sec: get(self.sec),
        }
    }
}

/// Records `λ_ce·CE + λ_dice·Dice + λ_sec·SEC` for a batch on the graph.
///
/// `labels` holds N·H·W ground-truth classes, `presence` N·L binary
/// targets for the class-presence logits.
pub fn composite_loss<T: Scalar>(
    graph: &mut Graph<T>,
    out: &ForwardOutput,
    labels: &[u16],
    presence: &[T],
    class_weights: &ClassWeights,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let omega: Vec<T> = class_weights.omega().iter().map(|&w| T::from_f64_lossy(w)).collect();
    let ce = graph.cross_entropy(out.probs, labels, &omega)?;
    let dice = graph.dice_loss(out.probs, labels)?;
    let sec = graph.bce_with_logits(out.sec_logits, presence)?;
    let total = graph.weighted_sum(&[
        (ce, T::from_f64_lossy(weights.ce)),
        (dice, T::from_f64_lossy(weights.dice)),
        (sec, T::from_f64_lossy(weights.sec)),
    ])?;
    Ok(LossVars { total, ce, dice, sec })
}

fn probs_dims<T: Scalar>(probs: &Tensor<T>) -> Result<[usize; 4]> {
    match probs.shape() {
        &[l, h, w] => Ok([1, l, h, w]),
        _ => probs.dims4("loss"),
    }
}

/// Weighted cross-entropy of an L×H×W (or N×L×H×W) probability map
/// against integer labels, normalized by pixel count.
pub fn weighted_cross_entropy<T: Scalar>(probs: &Tensor<T>, gt: &[u16], omega: &ClassWeights) -> Result<f64> {
    let omega: Vec<T> = omega.omega().iter().map(|&w| T::from_f64_lossy(w)).collect();
    kernels::ce_value(probs.data(), probs_dims(probs)?, gt, &omega).map(|v| v.as_f64())
}

/// Negated class-mean soft Dice of an L×H×W (or N×L×H×W) probability map
/// against a one-hot ground-truth map of the same shape.
pub fn multiclass_dice_loss<T: Scalar>(probs: &Tensor<T>, gt_onehot: &Tensor<T>) -> Result<f64> {
    if probs.shape() != gt_onehot.shape() {
        return Err(Error::ShapeMismatch {
            op: "multiclass_dice_loss",
            left: probs.shape().to_vec(),
            right: gt_onehot.shape().to_vec(),
        });
    }
    let [n, l, h, w] = probs_dims(probs)?;
    let plane = h * w;
    let g = gt_onehot.data();
    let mut labels = Vec::with_capacity(n * plane);
    for s in 0..n {
        for p in 0..plane {
            let mut hot = None;
            for c in 0..l {
                let v = g[(s * l + c) * plane + p];
                if v == T::one() && hot.is_none() {
                    hot = Some(c);
                } else if v != T::zero() {
                    return Err(Error::InvalidArgument(format!(
                        "ground truth is not one-hot at pixel {p} of sample {s}"
                    )));
                }
            }
            let c = hot.ok_or_else(|| {
                Error::InvalidArgument(format!("ground truth has no class at pixel {p} of sample {s}"))
            })?;
            labels.push(c as u16);
        }
    }
    kernels::dice_value(probs.data(), [n, l, h, w], &labels).map(|v| v.as_f64())
}

/// Mean binary cross-entropy with logits over classes.
pub fn sec_loss<T: Scalar>(sec_logits: &[T], presence: &[T]) -> Result<f64> {
    kernels::bce_value(sec_logits, presence).map(|v| v.as_f64())
}

/// Value and gradient kernels shared by the graph ops and the standalone
/// loss functions.
pub(crate) mod kernels {
    use super::*;

    fn check_labels(labels: &[u16], [n, l, h, w]: [usize; 4]) -> Result<()> {
        if labels.len() != n * h * w {
            return Err(Error::ShapeMismatch {
                op: "loss labels",
                left: vec![n, l, h, w],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&g| g as usize >= l) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes: l,
            });
        }
        Ok(())
    }

    /// Neumaier-compensated running sum.
    #[derive(Clone, Copy)]
    struct Sum<T> {
        sum: T,
        carry: T,
    }

    impl<T: Scalar> Sum<T> {
        fn new() -> Self {
            Self {
                sum: T::zero(),
                carry: T::zero(),
            }
        }

        fn add(&mut self, v: T) {
            let t = self.sum + v;
            if self.sum.abs() >= v.abs() {
                self.carry = self.carry + ((self.sum - t) + v);
            } else {
                self.carry = self.carry + ((v - t) + self.sum);
            }
            self.sum = t;
        }

        fn value(&self) -> T {
            self.sum + self.carry
        }
    }

    pub fn ce_value<T: Scalar>(p: &[T], dims: [usize; 4], labels: &[u16], omega: &[T]) -> Result<T> {
        check_labels(labels, dims)?;
        let [n, l, h, w] = dims;
        if omega.len() != l {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy weights",
                left: dims.to_vec(),
                right: vec![omega.len()],
            });
        }
        let plane = h * w;
        let clamp = T::from_f64_lossy(LOG_CLAMP);
        let mut total = Sum::new();
        for s in 0..n {
            for q in 0..plane {
                let g = labels[s * plane + q] as usize;
                let pg = p[(s * l + g) * plane + q].max(clamp);
                total.add(-omega[g] * pg.ln());
            }
        }
        Ok(total.value() / T::from_usize(n * plane).unwrap())
    }

    pub fn ce_grad<T: Scalar>(p: &[T], [n, l, h, w]: [usize; 4], labels: &[u16], omega: &[T], gout: T, dp: &mut [T]) {
        let plane = h * w;
        let clamp = T::from_f64_lossy(LOG_CLAMP);
        let scale = gout / T::from_usize(n * plane).unwrap();
        for s in 0..n {
            for q in 0..plane {
                let g = labels[s * plane + q] as usize;
                let i = (s * l + g) * plane + q;
                if p[i] > clamp {
                    dp[i] = dp[i] - scale * omega[g] / p[i];
                }
            }
        }
    }

    // Per-class (A = Σ p·g, B = Σ p² + Σ g² + ε, Σ p², Σ g) for one sample.
    fn dice_sums<T: Scalar>(p: &[T], l: usize, plane: usize, labels: &[u16]) -> Vec<[T; 4]> {
        let mut sums = vec![[T::zero(); 4]; l];
        for (c, acc) in sums.iter_mut().enumerate() {
            let pc = &p[c * plane..(c + 1) * plane];
            let (mut inter, mut sq) = (Sum::new(), Sum::new());
            for (q, &pv) in pc.iter().enumerate() {
                sq.add(pv * pv);
                if labels[q] as usize == c {
                    inter.add(pv);
                    acc[3] = acc[3] + T::one();
                }
            }
            acc[0] = inter.value();
            acc[2] = sq.value();
            acc[1] = acc[2] + acc[3] + T::from_f64_lossy(DICE_EPS);
        }
        sums
    }

    fn absent_both<T: Scalar>(s: &[T; 4]) -> bool {
        s[2] == T::zero() && s[3] == T::zero()
    }

    pub fn dice_value<T: Scalar>(p: &[T], dims: [usize; 4], labels: &[u16]) -> Result<T> {
        check_labels(labels, dims)?;
        let [n, l, h, w] = dims;
        let plane = h * w;
        let two = T::one() + T::one();
        let mut total = T::zero();
        for s in 0..n {
            let sums = dice_sums(
                &p[s * l * plane..(s + 1) * l * plane],
                l,
                plane,
                &labels[s * plane..(s + 1) * plane],
            );
            let terms: T = sums
                .iter()
                .map(|acc| {
                    if absent_both(acc) {
                        T::one()
                    } else {
                        two * acc[0] / acc[1]
                    }
                })
                .sum();
            total = total - terms / T::from_usize(l).unwrap();
        }
        Ok(total / T::from_usize(n).unwrap())
    }

    pub fn dice_grad<T: Scalar>(p: &[T], [n, l, h, w]: [usize; 4], labels: &[u16], gout: T, dp: &mut [T]) {
        let plane = h * w;
        let two = T::one() + T::one();
        let scale = gout / T::from_usize(n * l).unwrap();
        for s in 0..n {
            let ps = &p[s * l * plane..(s + 1) * l * plane];
            let ls = &labels[s * plane..(s + 1) * plane];
            let sums = dice_sums(ps, l, plane, ls);
            for (c, acc) in sums.iter().enumerate() {
                if absent_both(acc) {
                    continue;
                }
                let (a, b) = (acc[0], acc[1]);
                for (q, &lab) in ls.iter().enumerate() {
                    let i = c * plane + q;
                    let g = if lab as usize == c { T::one() } else { T::zero() };
                    // d(2A/B)/dp = 2g/B − 4A·p/B²
                    let dterm = two * g / b - two * two * a * ps[i] / (b * b);
                    let di = s * l * plane + i;
                    dp[di] = dp[di] - scale * dterm;
                }
            }
        }
    }

    fn softplus<T: Scalar>(z: T) -> T {
        z.max(T::zero()) + (-z.abs()).exp().ln_1p()
    }

    pub fn bce_value<T: Scalar>(z: &[T], y: &[T]) -> Result<T> {
        if z.len() != y.len() || z.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "sec_loss",
                left: vec![z.len()],
                right: vec![y.len()],
            });
        }
        if let Some(bad) = y.iter().find(|&&v| v != T::zero() && v != T::one()) {
            return Err(Error::InvalidArgument(format!("presence target {bad:?} is not 0 or 1")));
        }
        // softplus(z) − z·y, written so that (z, y) and (−z, 1−y) agree exactly
        let mut total = Sum::new();
        for (&z, &y) in z.iter().zip(y) {
            total.add(if y == T::one() { softplus(-z) } else { softplus(z) });
        }
        Ok(total.value() / T::from_usize(z.len()).unwrap())
    }

    pub fn bce_grad<T: Scalar>(z: &[T], y: &[T], gout: T, dz: &mut [T]) {
        let scale = gout / T::from_usize(z.len()).unwrap();
        for ((d, &z), &y) in dz.iter_mut().zip(z).zip(y) {
            let s = if z >= T::zero() {
                T::one() / (T::one() + (-z).exp())
            } else {
                let e = z.exp();
                e / (T::one() + e)
            };
            *d = *d + scale * (s - y);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(labels: &[u16], l: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([l, h, w], |i| {
            let (c, q) = (i / (h * w), i % (h * w));
            if labels[q] as usize == c {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn ce_single_pixel_half() {
        let probs = Tensor::new([2, 1, 1], vec![0.5f64, 0.5]).unwrap();
        let v = weighted_cross_entropy(&probs, &[0], &ClassWeights::uniform(2)).unwrap();
        assert!((v - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_perfect_prediction_is_zero() {
        let labels = [0u16, 2, 1, 2];
        let probs = onehot(&labels, 3, 2, 2);
        let w = ClassWeights::new(vec![0.3, 2.0, 5.0]).unwrap();
        assert_eq!(weighted_cross_entropy(&probs, &labels, &w).unwrap(), 0.0);
    }

    #[test]
    fn ce_doubles_with_omega_and_rejects_bad_labels() {
        let probs = Tensor::from_fn([3, 2, 2], |i| [0.2f64, 0.5, 0.3][i / 4]);
        let labels = [0u16, 1, 2, 1];
        let w1 = ClassWeights::new(vec![1.0, 0.5, 2.0]).unwrap();
        let w2 = ClassWeights::new(vec![2.0, 1.0, 4.0]).unwrap();
        let a = weighted_cross_entropy(&probs, &labels, &w1).unwrap();
        let b = weighted_cross_entropy(&probs, &labels, &w2).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
        assert!(matches!(
            weighted_cross_entropy(&probs, &[0, 1, 3, 1], &w1),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn dice_hand_values() {
        let labels = [0u16, 2, 1, 2];
        let probs = onehot(&labels, 4, 2, 2);
        // class 3 absent from both → term 1
        assert!((multiclass_dice_loss(&probs, &probs).unwrap() + 1.0).abs() < 1e-6);

        let p = Tensor::new([2, 1, 1], vec![0.5f64, 0.5]).unwrap();
        let g = Tensor::new([2, 1, 1], vec![1.0f64, 0.0]).unwrap();
        let v = multiclass_dice_loss(&p, &g).unwrap();
        assert!((v + 0.4).abs() < 1e-6, "{v}");
    }

    #[test]
    fn dice_rejects_non_onehot() {
        let p = Tensor::new([2, 1, 1], vec![0.5f64, 0.5]).unwrap();
        let g = Tensor::new([2, 1, 1], vec![0.5f64, 0.5]).unwrap();
        assert!(multiclass_dice_loss(&p, &g).is_err());
        let g = Tensor::new([2, 1, 1], vec![1.0f64, 1.0]).unwrap();
        assert!(multiclass_dice_loss(&p, &g).is_err());
    }

    #[test]
    fn sec_closed_forms() {
        let v = sec_loss(&[0.0f64, 0.0, 0.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!((v - core::f64::consts::LN_2).abs() < 1e-15);
        assert!(sec_loss(&[30.0f64], &[1.0]).unwrap() < 1e-12);
        let z = [0.3f64, -2.0, 4.5];
        let y = [1.0, 0.0, 1.0];
        let zn: Vec<f64> = z.iter().map(|v| -v).collect();
        let yn: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        assert_eq!(sec_loss(&z, &y).unwrap(), sec_loss(&zn, &yn).unwrap());
        assert!(sec_loss(&[0.0f64], &[0.5]).is_err());
    }

    #[test]
    fn median_frequency_weights() {
        let w = ClassWeights::from_frequencies(&[0.5, 0.3, 0.2]).unwrap();
        let expect = [0.6, 1.0, 1.5];
        for (a, b) in w.omega().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let u = ClassWeights::from_counts(&[7, 7, 7, 7]).unwrap();
        assert!(u.omega().iter().all(|&v| v == 1.0));
        let z = ClassWeights::from_counts(&[10, 0, 30]).unwrap();
        assert_eq!(z.omega()[1], z.omega()[0].max(z.omega()[2]));
        assert!(ClassWeights::from_counts(&[]).is_err());
        assert!(ClassWeights::from_counts(&[0, 0]).is_err());
    }

    #[test]
    fn default_loss_weights() {
        let w = LossWeights::default();
        assert_eq!((w.ce, w.dice, w.sec), (1.0, 1.0, 0.1));
    }
}
