//! Per-image metrics tables, the comparison summary and SVG figures.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use planet_core::objectives::{paired_t_test, wilcoxon_signed_rank, MetricsRecord, StatsResult};
use planet_core::Error as CoreError;
use plotters::data::Quartiles;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

pub const ENSEMBLE: &str = "planet_s";
pub const BASELINE: &str = "unet_tta";

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BOXPLOT_FILE: &str = "iou_boxplot.svg";
pub const HISTOGRAM_FILE: &str = "ccc_histogram.svg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub system: String,
    pub image_id: String,
    pub iou: f64,
    pub cc_pred: usize,
    pub cc_gt: usize,
    pub cc_abs_diff: usize,
}

impl MetricsRow {
    pub fn new(system: &str, record: MetricsRecord) -> Self {
        Self {
            system: system.to_string(),
            image_id: record.image_id,
            iou: record.iou,
            cc_pred: record.cc_pred,
            cc_gt: record.cc_gt,
            cc_abs_diff: record.cc_abs_diff,
        }
    }

    pub fn cc_match(&self) -> bool {
        self.cc_abs_diff == 0
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub n: usize,
    pub mean_iou: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single image.
    pub sd_iou: f64,
    pub ccc_match_count: usize,
    pub ccc_match_fraction: f64,
}

impl SystemSummary {
    fn from_rows(rows: &[&MetricsRow]) -> Self {
        let n = rows.len();
        let nf = n as f64;
        let mean = rows.iter().map(|r| r.iou).sum::<f64>() / nf;
        let sd = if n > 1 {
            (rows.iter().map(|r| (r.iou - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
        } else {
            0.0
        };
        let matches = rows.iter().filter(|r| r.cc_match()).count();
        Self {
            n,
            mean_iou: mean,
            sd_iou: sd,
            ccc_match_count: matches,
            ccc_match_fraction: matches as f64 / nf,
        }
    }
}

/// A paired test result, or the reason none was computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Comparison {
    Tested(StatsResult),
    /// Every paired difference is zero.
    Identical { reason: String },
    /// The differences do not support the test (constant, or too few pairs).
    Degenerate { reason: String },
}

impl Comparison {
    fn run(
        xs: &[f64],
        ys: &[f64],
        test: fn(&[f64], &[f64]) -> planet_core::Result<StatsResult>,
    ) -> Result<Self> {
        match test(xs, ys) {
            Ok(s) => Ok(Comparison::Tested(s)),
            Err(CoreError::Degenerate(reason)) if xs == ys => Ok(Comparison::Identical { reason }),
            Err(CoreError::Degenerate(reason)) => Ok(Comparison::Degenerate { reason }),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    EnsembleBetter,
    BaselineBetter,
    Tie,
}

impl Direction {
    fn of(ensemble: f64, baseline: f64) -> Self {
        if ensemble > baseline {
            Direction::EnsembleBetter
        } else if ensemble < baseline {
            Direction::BaselineBetter
        } else {
            Direction::Tie
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub systems: BTreeMap<String, SystemSummary>,
    /// Paired t-test on per-image IoU, ensemble minus baseline.
    pub iou_test: Comparison,
    /// Wilcoxon signed-rank test on per-image |ΔCC|, ensemble minus baseline.
    pub ccc_test: Comparison,
    pub iou_direction: Direction,
    /// Direction of the match fraction; a lower |ΔCC| is better.
    pub ccc_direction: Direction,
}

/// Rows of `system`, keyed by image id.
fn by_image<'a>(rows: &'a [MetricsRow], system: &str) -> Result<BTreeMap<&'a str, &'a MetricsRow>> {
    let mut out = BTreeMap::new();
    for r in rows.iter().filter(|r| r.system == system) {
        if out.insert(r.image_id.as_str(), r).is_some() {
            bail!("duplicate {system} row for image {}", r.image_id);
        }
    }
    if out.is_empty() {
        bail!("no metrics rows for system {system}");
    }
    Ok(out)
}

pub fn summarize(rows: &[MetricsRow]) -> Result<Summary> {
    let ens = by_image(rows, ENSEMBLE)?;
    let base = by_image(rows, BASELINE)?;
    if !ens.keys().eq(base.keys()) {
        bail!("{ENSEMBLE} and {BASELINE} were evaluated on different images");
    }
    let pairs: Vec<(&MetricsRow, &MetricsRow)> = ens.iter().map(|(id, e)| (*e, base[id])).collect();
    let e_rows: Vec<&MetricsRow> = pairs.iter().map(|p| p.0).collect();
    let b_rows: Vec<&MetricsRow> = pairs.iter().map(|p| p.1).collect();
    let e_sum = SystemSummary::from_rows(&e_rows);
    let b_sum = SystemSummary::from_rows(&b_rows);

    let iou = |rs: &[&MetricsRow]| rs.iter().map(|r| r.iou).collect::<Vec<_>>();
    let diff = |rs: &[&MetricsRow]| rs.iter().map(|r| r.cc_abs_diff as f64).collect::<Vec<_>>();
    let iou_test = Comparison::run(&iou(&e_rows), &iou(&b_rows), paired_t_test)?;
    let ccc_test = Comparison::run(&diff(&e_rows), &diff(&b_rows), wilcoxon_signed_rank)?;

    Ok(Summary {
        iou_direction: Direction::of(e_sum.mean_iou, b_sum.mean_iou),
        ccc_direction: Direction::of(e_sum.ccc_match_fraction, b_sum.ccc_match_fraction),
        systems: BTreeMap::from([(ENSEMBLE.to_string(), e_sum), (BASELINE.to_string(), b_sum)]),
        iou_test,
        ccc_test,
    })
}

fn label(system: &str) -> &'static str {
    match system {
        ENSEMBLE => "PlaNet-S",
        _ => "U-Net + TTA",
    }
}

pub fn iou_boxplot(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let systems = [label(BASELINE), label(ENSEMBLE)];
    let quartiles: Vec<Quartiles> = [BASELINE, ENSEMBLE]
        .iter()
        .map(|s| {
            let v: Vec<f64> = rows.iter().filter(|r| r.system == *s).map(|r| r.iou).collect();
            Quartiles::new(&v)
        })
        .collect();
    let lo = rows.iter().map(|r| r.iou).fold(1.0f64, f64::min);
    let y_lo = ((lo * 10.0).floor() / 10.0).clamp(0.0, 0.9) as f32;

    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Per-image IoU", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(systems[..].into_segmented(), y_lo..1.0f32)?;
    chart.configure_mesh().y_desc("IoU").disable_x_mesh().draw()?;
    chart.draw_series(
        systems
            .iter()
            .zip(&quartiles)
            .map(|(s, q)| Boxplot::new_vertical(SegmentValue::CenterOf(s), q).width(40)),
    )?;
    root.present()?;
    Ok(())
}

pub fn ccc_histogram(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let max_diff = rows.iter().map(|r| r.cc_abs_diff).max().unwrap_or(0);
    let counts = |system: &str| {
        let mut c = vec![0usize; max_diff + 1];
        for r in rows.iter().filter(|r| r.system == system) {
            c[r.cc_abs_diff] += 1;
        }
        c
    };
    let series = [(BASELINE, counts(BASELINE), BLUE), (ENSEMBLE, counts(ENSEMBLE), RED)];
    let y_max = series.iter().flat_map(|s| s.1.iter().copied()).max().unwrap_or(0) + 1;

    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Connected-component count error", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(-0.5f64..max_diff as f64 + 0.5, 0usize..y_max)?;
    chart
        .configure_mesh()
        .x_desc("|predicted CC - reference CC|")
        .y_desc("images")
        .x_labels(max_diff + 1)
        .x_label_formatter(&|x| format!("{}", x.round()))
        .disable_x_mesh()
        .draw()?;
    for (i, (system, counts, color)) in series.iter().enumerate() {
        let offset = if i == 0 { -0.38 } else { 0.0 };
        chart
            .draw_series(counts.iter().enumerate().map(|(d, &n)| {
                let x0 = d as f64 + offset;
                Rectangle::new([(x0, 0), (x0 + 0.38, n)], color.filled())
            }))?
            .label(label(system))
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE)
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(system: &str, id: &str, iou: f64, diff: usize) -> MetricsRow {
        MetricsRow {
            system: system.into(),
            image_id: id.into(),
            iou,
            cc_pred: 1 + diff,
            cc_gt: 1,
            cc_abs_diff: diff,
        }
    }

    #[test]
    fn identical_systems_yield_identical_verdicts() {
        let rows: Vec<MetricsRow> = (0..6)
            .flat_map(|i| {
                let id = format!("p/slice{i}");
                [row(ENSEMBLE, &id, 0.9, i % 2), row(BASELINE, &id, 0.9, i % 2)]
            })
            .collect();
        let s = summarize(&rows).unwrap();
        assert!(matches!(s.iou_test, Comparison::Identical { .. }));
        assert!(matches!(s.ccc_test, Comparison::Identical { .. }));
        assert_eq!(s.iou_direction, Direction::Tie);
        assert_eq!(s.systems[ENSEMBLE].ccc_match_count, 3);
    }

    #[test]
    fn directions_follow_the_data() {
        let rows: Vec<MetricsRow> = (0..8)
            .flat_map(|i| {
                let id = format!("p{i}");
                [
                    row(ENSEMBLE, &id, 0.9 + 0.001 * i as f64, 0),
                    row(BASELINE, &id, 0.85, 1 + i % 2),
                ]
            })
            .collect();
        let s = summarize(&rows).unwrap();
        assert_eq!(s.iou_direction, Direction::EnsembleBetter);
        assert_eq!(s.ccc_direction, Direction::EnsembleBetter);
        let Comparison::Tested(t) = &s.iou_test else { panic!() };
        assert!(t.statistic > 0.0 && t.p_value < 0.01);
        let Comparison::Tested(w) = &s.ccc_test else { panic!() };
        assert!(w.p_value < 0.05);
    }

    #[test]
    fn mismatched_image_sets_are_rejected() {
        let rows = vec![row(ENSEMBLE, "a", 0.9, 0), row(BASELINE, "b", 0.9, 0)];
        assert!(summarize(&rows).is_err());
    }

    #[test]
    fn metrics_round_trip_and_figures_render() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            row(ENSEMBLE, "a", 0.91, 0),
            row(ENSEMBLE, "b", 0.88, 1),
            row(BASELINE, "a", 0.90, 2),
            row(BASELINE, "b", 0.80, 0),
        ];
        let path = dir.path().join(METRICS_FILE);
        write_metrics(&path, &rows).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), rows);
        iou_boxplot(&dir.path().join(BOXPLOT_FILE), &rows).unwrap();
        ccc_histogram(&dir.path().join(HISTOGRAM_FILE), &rows).unwrap();
        let svg = std::fs::read_to_string(dir.path().join(BOXPLOT_FILE)).unwrap();
        assert!(svg.starts_with("<svg"));
    }
}
