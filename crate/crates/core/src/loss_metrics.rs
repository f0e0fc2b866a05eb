//! Training objective and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, Graph, Tensor, Var};

/// Weight of the Dice term in the composite loss.
pub const DEFAULT_ALPHA: f64 = 0.8;

pub const DEFAULT_SMOOTH: f64 = 1.0;

/// Integer label image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape("label_map", format!("{} labels for {height}x{width}", labels.len())));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMap { height, width, labels: vec![0; height * width] }
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// `(num_classes, H, W)` indicator tensor.
    pub fn one_hot<T: Element>(&self, num_classes: usize) -> Result<Tensor<T>> {
        let n = self.labels.len();
        let mut data = vec![T::zero(); num_classes * n];
        for (i, &l) in self.labels.iter().enumerate() {
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::Usage(format!("label {l} out of range for {num_classes} classes")));
            }
            data[l * n + i] = T::one();
        }
        Tensor::new([num_classes, self.height, self.width], data)
    }

    /// Per-pixel argmax over the class axis of `(K, H, W)` scores. Ties go to
    /// the lowest class.
    pub fn argmax<T: Element>(scores: &Tensor<T>) -> Result<Self> {
        let s = scores.shape();
        if s.len() != 3 || s[0] > 256 {
            return Err(Error::shape("argmax", format!("expected (K, H, W), got {s:?}")));
        }
        let n = s[1] * s[2];
        let d = scores.data();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for k in 1..s[0] {
                    if d[k * n + i] > d[best * n + i] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(s[1], s[2], labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: DEFAULT_ALPHA, smooth: DEFAULT_SMOOTH }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.smooth > 0.0 && self.smooth.is_finite()) {
            return Err(Error::config(format!("smooth {} must be positive", self.smooth)));
        }
        Ok(())
    }
}

/// `1 - mean_k (2 sum(p t) + s) / (sum p + sum t + s)` over foreground
/// channels `1..K` of `(K, H, W)` inputs.
pub fn dice_loss<T: Element>(g: &mut Graph<T>, probs: Var, target: Var, smooth: f64) -> Result<Var> {
    let (ps, ts) = (g.shape(probs).to_vec(), g.shape(target).to_vec());
    if ps != ts || ps.len() != 3 || ps[0] < 2 {
        return Err(Error::shape("dice_loss", format!("probs {ps:?} vs target {ts:?}")));
    }
    let (k, n) = (ps[0], ps[1] * ps[2]);
    let p = g.reshape(probs, &[k, n])?;
    let t = g.reshape(target, &[k, n])?;
    let p = g.slice_rows(p, 1, k - 1)?;
    let t = g.slice_rows(t, 1, k - 1)?;
    let pt = g.mul(p, t)?;
    let inter = g.sum_axis(pt, 1)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, smooth)?;
    let psum = g.sum_axis(p, 1)?;
    let tsum = g.sum_axis(t, 1)?;
    let den = g.add(psum, tsum)?;
    let den = g.add_scalar(den, smooth)?;
    let ratio = g.div(num, den)?;
    let m = g.mean(ratio)?;
    let neg = g.scale(m, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Mean over pixels of `-log softmax(logits)[label]`.
pub fn ce_loss<T: Element>(g: &mut Graph<T>, logits: Var, labels: &LabelMap) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[1] != labels.height || s[2] != labels.width {
        return Err(Error::shape("ce_loss", format!("logits {s:?} vs labels {}x{}", labels.height, labels.width)));
    }
    let onehot = g.constant(labels.one_hot(s[0])?);
    let logp = g.log_softmax(logits, 0)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / labels.labels.len() as f64)
}

/// `alpha * dice + (1 - alpha) * ce`.
pub fn composite_loss<T: Element>(g: &mut Graph<T>, logits: Var, labels: &LabelMap, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let k = g.shape(logits)[0];
    let probs = g.softmax(logits, 0)?;
    let target = g.constant(labels.one_hot(k)?);
    let dice = dice_loss(g, probs, target, weights.smooth)?;
    let ce = ce_loss(g, logits, labels)?;
    let a = g.scale(dice, weights.alpha)?;
    let b = g.scale(ce, 1.0 - weights.alpha)?;
    g.add(a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub iou: f64,
    pub hd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub iou: f64,
    pub hd: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricReport {
    /// Space-separated `key=value` line.
    pub fn summary_line(&self) -> String {
        format!("dice={:.4} iou={:.4} hd={:.4}", self.dice, self.iou, self.hd)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-class and overall means of several reports over the same classes.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        let first = reports.first().ok_or_else(|| Error::Usage("no reports to average".into()))?;
        let n = reports.len() as f64;
        let mut per_class = first.per_class.clone();
        for (i, c) in per_class.iter_mut().enumerate() {
            c.dice = reports.iter().map(|r| r.per_class[i].dice).sum::<f64>() / n;
            c.iou = reports.iter().map(|r| r.per_class[i].iou).sum::<f64>() / n;
            c.hd = reports.iter().map(|r| r.per_class[i].hd).sum::<f64>() / n;
        }
        Ok(MetricReport {
            dice: reports.iter().map(|r| r.dice).sum::<f64>() / n,
            iou: reports.iter().map(|r| r.iou).sum::<f64>() / n,
            hd: reports.iter().map(|r| r.hd).sum::<f64>() / n,
            per_class,
        })
    }
}

/// Dice, IoU and boundary Hausdorff distance per foreground class
/// `1..num_classes`, averaged.
pub fn metrics(pred: &LabelMap, target: &LabelMap, num_classes: usize) -> Result<MetricReport> {
    if pred.height != target.height || pred.width != target.width {
        return Err(Error::shape(
            "metrics",
            format!("{}x{} vs {}x{}", pred.height, pred.width, target.height, target.width),
        ));
    }
    if num_classes < 2 {
        return Err(Error::Usage("metrics need at least one foreground class".into()));
    }
    let per_class: Vec<ClassMetrics> = (1..num_classes)
        .map(|class| {
            let p: Vec<bool> = pred.labels.iter().map(|&l| l as usize == class).collect();
            let t: Vec<bool> = target.labels.iter().map(|&l| l as usize == class).collect();
            let (dice, iou) = overlap(&p, &t);
            ClassMetrics { class, dice, iou, hd: hausdorff(&p, &t, pred.height, pred.width) }
        })
        .collect();
    let n = per_class.len() as f64;
    Ok(MetricReport {
        dice: per_class.iter().map(|c| c.dice).sum::<f64>() / n,
        iou: per_class.iter().map(|c| c.iou).sum::<f64>() / n,
        hd: per_class.iter().map(|c| c.hd).sum::<f64>() / n,
        per_class,
    })
}

/// Dice and IoU of two binary masks; both empty counts as perfect agreement.
pub fn overlap(p: &[bool], t: &[bool]) -> (f64, f64) {
    let (mut inter, mut ps, mut ts) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.iter().zip(t) {
        inter += (a && b) as usize;
        ps += a as usize;
        ts += b as usize;
    }
    if ps + ts == 0 {
        return (1.0, 1.0);
    }
    let union = ps + ts - inter;
    (2.0 * inter as f64 / (ps + ts) as f64, inter as f64 / union as f64)
}

/// Foreground pixels with a 4-neighbour outside the mask or the image.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<(usize, usize)> {
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && mask[y as usize * width + x as usize]
    };
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(at(yi - 1, xi) && at(yi + 1, xi) && at(yi, xi - 1) && at(yi, xi + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Symmetric Hausdorff distance between mask boundaries in pixels. One
/// empty mask gives the image diagonal, two give zero.
pub fn hausdorff(p: &[bool], t: &[bool], height: usize, width: usize) -> f64 {
    let bp = boundary(p, height, width);
    let bt = boundary(t, height, width);
    match (bp.is_empty(), bt.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => ((height * height + width * width) as f64).sqrt(),
        _ => directed(&bp, &bt).max(directed(&bt, &bp)).sqrt(),
    }
}

/// Squared directed distance `max_a min_b |a - b|^2`.
fn directed(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let mut worst = 0usize;
    for &(ay, ax) in a {
        let mut best = usize::MAX;
        for &(by, bx) in b {
            let d = ay.abs_diff(by).pow(2) + ax.abs_diff(bx).pow(2);
            if d < best {
                best = d;
                if d <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst as f64
}
