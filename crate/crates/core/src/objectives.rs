//! Training loss (binary cross-entropy plus soft IoU), evaluation metrics
//! (hard IoU, connected-component counts) and the paired significance tests
//! used to compare two segmenters image by image.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::grid::{BinMask, Grid};

/// Probability clamp and IoU denominator regularizer.
pub const EPS: f64 = 1e-7;

/// Scalar types a probability map may be stored in.
pub trait Prob: Copy {
    fn to_f64(self) -> f64;
}

impl Prob for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Prob for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub bce_part: f64,
    pub iou_part: f64,
}

fn check_pair<P: Prob>(p: &Grid<P>, y: &BinMask) -> Result<()> {
    p.ensure_same_dims(y, "prediction vs target")?;
    if p.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    Ok(())
}

/// Mean per-pixel binary cross-entropy, probabilities clamped to `[EPS, 1 - EPS]`.
pub fn bce_loss<P: Prob>(p: &Grid<P>, y: &BinMask) -> Result<f64> {
    check_pair(p, y)?;
    let sum: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| {
            let p = p.to_f64().clamp(EPS, 1.0 - EPS);
            if y != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / p.len() as f64)
}

/// Both terms carry `EPS`, so an empty prediction of an empty target scores 1.
struct SoftIouTerms {
    intersection: f64,
    union: f64,
}

fn soft_iou_terms<P: Prob>(p: &Grid<P>, y: &BinMask) -> SoftIouTerms {
    let (mut inter, mut sum_p, mut sum_y) = (0.0, 0.0, 0.0);
    for (&p, &y) in p.data().iter().zip(y.data()) {
        let p = p.to_f64();
        let y = f64::from(y.min(1));
        inter += p * y;
        sum_p += p;
        sum_y += y;
    }
    SoftIouTerms {
        intersection: inter + EPS,
        union: sum_p + sum_y - inter + EPS,
    }
}

/// `1 − (Σpy + ε) / (Σp + Σy − Σpy + ε)`.
pub fn soft_iou_loss<P: Prob>(p: &Grid<P>, y: &BinMask) -> Result<f64> {
    check_pair(p, y)?;
    let t = soft_iou_terms(p, y);
    Ok(1.0 - t.intersection / t.union)
}

pub fn combined_loss<P: Prob>(p: &Grid<P>, y: &BinMask) -> Result<LossValue> {
    let bce_part = bce_loss(p, y)?;
    let iou_part = soft_iou_loss(p, y)?;
    Ok(LossValue {
        total: bce_part + iou_part,
        bce_part,
        iou_part,
    })
}

/// Analytic gradient of [`combined_loss`]'s total with respect to each pixel
/// probability, row-major.
pub fn combined_loss_grad<P: Prob>(p: &Grid<P>, y: &BinMask) -> Result<Vec<f64>> {
    check_pair(p, y)?;
    let n = p.len() as f64;
    let t = soft_iou_terms(p, y);
    let u2 = t.union * t.union;
    Ok(p.data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| {
            let raw = p.to_f64();
            let yv = f64::from(y.min(1));
            let bce = if raw <= EPS || raw >= 1.0 - EPS {
                0.0
            } else if y != 0 {
                -1.0 / (n * raw)
            } else {
                1.0 / (n * (1.0 - raw))
            };
            let d_iou = (yv * t.union - t.intersection * (1.0 - yv)) / u2;
            bce - d_iou
        })
        .collect())
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 1.
pub fn hard_iou(a: &BinMask, b: &BinMask) -> Result<f64> {
    a.ensure_same_dims(b, "hard IoU")?;
    if !a.is_binary() || !b.is_binary() {
        return Err(Error::Validation("hard IoU needs {0,1} masks".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += usize::from(x & y);
        union += usize::from(x | y);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

/// Labels foreground components 1..=n with a breadth-first flood fill.
/// Returns the label grid and `n`.
pub fn label_components(mask: &BinMask, connectivity: Connectivity) -> (Grid<u32>, usize) {
    let (h, w) = mask.dims();
    let mut labels = Grid::filled(h, w, 0u32);
    let mut queue = VecDeque::new();
    let mut next = 0u32;
    for start in 0..h * w {
        let (r0, c0) = (start / w, start % w);
        if mask.get(r0, c0) == 0 || labels.get(r0, c0) != 0 {
            continue;
        }
        next += 1;
        labels.set(r0, c0, next);
        queue.push_back((r0, c0));
        while let Some((r, c)) = queue.pop_front() {
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if mask.get(nr, nc) != 0 && labels.get(nr, nc) == 0 {
                    labels.set(nr, nc, next);
                    queue.push_back((nr, nc));
                }
            }
        }
    }
    (labels, next as usize)
}

/// Number of maximal connected foreground regions.
pub fn count_cc(mask: &BinMask, connectivity: Connectivity) -> usize {
    label_components(mask, connectivity).1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub image_id: String,
    pub iou: f64,
    pub cc_pred: usize,
    pub cc_gt: usize,
    pub cc_abs_diff: usize,
}

impl MetricsRecord {
    pub fn compute(
        image_id: impl Into<String>,
        pred: &BinMask,
        truth: &BinMask,
        connectivity: Connectivity,
    ) -> Result<Self> {
        let iou = hard_iou(pred, truth)?;
        let cc_pred = count_cc(pred, connectivity);
        let cc_gt = count_cc(truth, connectivity);
        Ok(Self {
            image_id: image_id.into(),
            iou,
            cc_pred,
            cc_gt,
            cc_abs_diff: cc_pred.abs_diff(cc_gt),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestName {
    PairedT,
    WilcoxonSignedRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    StudentT,
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsResult {
    pub test: TestName,
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n_effective: usize,
    pub method: PMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_plus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_minus: Option<f64>,
}

fn differences(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!(
            "paired samples differ in length: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    Ok(xs.iter().zip(ys).map(|(x, y)| x - y).collect())
}

/// Two-sided paired t-test on `xs − ys`.
pub fn paired_t_test(xs: &[f64], ys: &[f64]) -> Result<StatsResult> {
    let d = differences(xs, ys)?;
    let n = d.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "paired t-test needs at least 2 pairs, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::Degenerate(
            "zero-variance differences: every pair differs by the same amount".into(),
        ));
    }
    let t = mean / (sd / nf.sqrt());
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0)
        .map_err(|e| Error::Degenerate(format!("t distribution: {e}")))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(StatsResult {
        test: TestName::PairedT,
        statistic: t,
        p_value: p,
        n_effective: n,
        method: PMethod::StudentT,
        w_plus: None,
        w_minus: None,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    /// Exact null distribution up to [`WILCOXON_EXACT_MAX_N`] pairs, normal approximation above.
    #[default]
    Auto,
    Exact,
    Normal,
}

pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Ranks of `values` (ascending, 1-based) with tied values sharing the mean
/// rank. Returned doubled so that midranks stay integral.
pub fn doubled_midranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 averaged, doubled: (i+1) + (j+1)
        let doubled = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// Null distribution of the doubled positive-rank sum: `counts[s]` is the
/// number of sign assignments whose positive doubled ranks sum to `s`.
fn signed_rank_counts(doubled: &[u64]) -> Vec<f64> {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

pub fn wilcoxon_signed_rank(xs: &[f64], ys: &[f64]) -> Result<StatsResult> {
    wilcoxon_signed_rank_with(xs, ys, WilcoxonMethod::Auto)
}

/// Wilcoxon signed-rank test with zero differences dropped and midranks for
/// tied magnitudes. The statistic is `min(W⁺, W⁻)`; the p-value is two-sided.
pub fn wilcoxon_signed_rank_with(
    xs: &[f64],
    ys: &[f64],
    method: WilcoxonMethod,
) -> Result<StatsResult> {
    let d: Vec<f64> = differences(xs, ys)?
        .into_iter()
        .filter(|v| *v != 0.0)
        .collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::Degenerate(
            "every pair is tied; nothing left after excluding zero differences".into(),
        ));
    }
    let magnitudes: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = doubled_midranks(&magnitudes);
    let (mut plus2, mut minus2) = (0u64, 0u64);
    for (v, r) in d.iter().zip(&ranks) {
        if *v > 0.0 {
            plus2 += r;
        } else {
            minus2 += r;
        }
    }
    let stat2 = plus2.min(minus2);
    let exact = match method {
        WilcoxonMethod::Auto => n <= WILCOXON_EXACT_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p = if exact {
        let counts = signed_rank_counts(&ranks);
        let total: f64 = counts.iter().sum();
        let tail: f64 = counts[..=stat2 as usize].iter().sum();
        (2.0 * tail / total).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
        let mut sorted = magnitudes.clone();
        sorted.sort_by(f64::total_cmp);
        for group in sorted.chunk_by(|a, b| a == b) {
            let t = group.len() as f64;
            var -= (t * t * t - t) / 48.0;
        }
        if var <= 0.0 {
            1.0
        } else {
            let stat = stat2 as f64 / 2.0;
            let z = (stat - mean + 0.5).min(0.0) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            (2.0 * normal.cdf(z)).min(1.0)
        }
    };
    Ok(StatsResult {
        test: TestName::WilcoxonSignedRank,
        statistic: stat2 as f64 / 2.0,
        p_value: p,
        n_effective: n,
        method: if exact {
            PMethod::Exact
        } else {
            PMethod::NormalApprox
        },
        w_plus: Some(plus2 as f64 / 2.0),
        w_minus: Some(minus2 as f64 / 2.0),
    })
}
