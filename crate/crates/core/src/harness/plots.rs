use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::report::{MetricsReport, Phase};
use super::svg::{Chart, Mark, Series, PALETTE};
use super::write_atomic;
use crate::analysis::{pearson_correlation, HISTOGRAM_BINS};
use crate::{Error, Result};

pub const ROBUSTNESS_PLOT: &str = "robust_accuracy.svg";
pub const HISTOGRAM_PLOT: &str = "stochasticity_histogram.svg";
pub const SCATTER_PLOT: &str = "accuracy_distance.svg";
pub const PCA_PLOT: &str = "pca.svg";

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPoint {
    pub adversarial: bool,
    pub label: usize,
    pub x: f64,
    pub y: f64,
}

/// Two-dimensional projection of softmax outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionDump {
    pub points: Vec<ProjectionPoint>,
    pub explained_variance_ratio: Vec<f64>,
}

impl ProjectionDump {
    pub fn adversarial_count(&self) -> usize {
        self.points.iter().filter(|p| p.adversarial).count()
    }

    /// `kind,label,pc1,pc2`, preceded by a comment line holding the
    /// explained-variance ratios.
    pub fn to_csv(&self) -> String {
        let ratios: Vec<String> = self.explained_variance_ratio.iter().map(f64::to_string).collect();
        let mut out = format!("# explained_variance_ratio {}\nkind,label,pc1,pc2\n", ratios.join(" "));
        for p in &self.points {
            let kind = if p.adversarial { "adversarial" } else { "clean" };
            let _ = writeln!(out, "{kind},{},{},{}", p.label, p.x, p.y);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Consistency(format!("projection file: {what}"));
        let mut lines = text.lines();
        let ratios = lines
            .next()
            .and_then(|l| l.strip_prefix("# explained_variance_ratio"))
            .ok_or_else(|| bad("missing explained-variance line"))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("bad ratio")))
            .collect::<Result<Vec<f64>>>()?;
        if lines.next() != Some("kind,label,pc1,pc2") {
            return Err(bad("missing header"));
        }
        let points = lines
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 4 {
                    return Err(bad("row does not have 4 fields"));
                }
                Ok(ProjectionPoint {
                    adversarial: match f[0] {
                        "adversarial" => true,
                        "clean" => false,
                        _ => return Err(bad("unknown point kind")),
                    },
                    label: f[1].parse().map_err(|_| bad("bad label"))?,
                    x: f[2].parse().map_err(|_| bad("bad coordinate"))?,
                    y: f[3].parse().map_err(|_| bad("bad coordinate"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            points,
            explained_variance_ratio: ratios,
        })
    }
}

/// What [`emit_plots`] draws from. Missing parts skip their chart.
#[derive(Debug, Clone, Copy)]
pub struct PlotInput<'a> {
    /// One or more runs; the robustness chart overlays all of them.
    pub reports: &'a [MetricsReport],
    /// Per-example distances to uniform, for the histogram.
    pub distances: Option<&'a [f64]>,
    pub max_distance: f64,
    pub projection: Option<&'a ProjectionDump>,
}

/// Writes the SVG charts into `dir` and returns their paths. An input with no
/// rows and no dumps emits nothing.
pub fn emit_plots(input: &PlotInput, dir: &Path) -> Result<Vec<PathBuf>> {
    let has_rows = input.reports.iter().any(|r| !r.is_empty());
    if !has_rows && input.distances.is_none() && input.projection.is_none() {
        log::warn!("nothing to plot");
        return Ok(Vec::new());
    }
    let mut written = Vec::new();
    let mut emit = |name: &str, chart: &Chart| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, chart.render().as_bytes())?;
        written.push(path);
        Ok(())
    };

    let with_attacks: Vec<&MetricsReport> = input.reports.iter().filter(|r| !r.epsilons().is_empty()).collect();
    if !with_attacks.is_empty() {
        let mut chart = Chart::new("Robust accuracy vs attack budget", "ε", "robust accuracy");
        for (i, r) in with_attacks.iter().enumerate() {
            let points = r
                .epsilons()
                .into_iter()
                .filter_map(|e| Some((e, r.mean_at(Phase::Attack, e, |row| row.robust_acc)?)))
                .collect();
            chart.series.push(Series::new(r.label(), PALETTE[i % PALETTE.len()], Mark::Line, points));
        }
        emit(ROBUSTNESS_PLOT, &chart)?;
    }

    if let Some(d) = input.distances.filter(|d| !d.is_empty()) {
        let width = input.max_distance / HISTOGRAM_BINS as f64;
        let mut counts = [0usize; HISTOGRAM_BINS];
        for &v in d {
            counts[((v / width).floor() as usize).min(HISTOGRAM_BINS - 1)] += 1;
        }
        let mut chart = Chart::new("Distance of softmax to uniform", "distance", "examples");
        chart.x_range = Some((0.0, input.max_distance));
        chart.series.push(Series::new(
            "",
            PALETTE[0],
            Mark::Bars(width),
            counts.iter().enumerate().map(|(i, &c)| (i as f64 * width, c as f64)).collect(),
        ));
        emit(HISTOGRAM_PLOT, &chart)?;
    }

    if let Some(r) = input.reports.first().filter(|r| r.rows_for(Phase::Train).next().is_some()) {
        let points: Vec<(f64, f64)> = r
            .rows_for(Phase::Train)
            .filter_map(|row| Some((row.stoch_mean?, row.clean_acc?)))
            .collect();
        let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
        let title = match pearson_correlation(&xs, &ys) {
            Ok(rv) => format!("Test accuracy vs distance to uniform (r = {rv:.3})"),
            Err(_) => "Test accuracy vs distance to uniform (r undefined)".to_string(),
        };
        let mut chart = Chart::new(title, "mean distance to uniform", "test accuracy");
        chart.series.push(Series::new(r.label(), PALETTE[0], Mark::Points, points));
        emit(SCATTER_PLOT, &chart)?;
    }

    if let Some(p) = input.projection.filter(|p| !p.points.is_empty()) {
        let classes = p.points.iter().map(|q| q.label).max().unwrap_or(0) + 1;
        let mut chart = Chart::new("PCA of softmax outputs", "PC1", "PC2");
        for class in 0..classes {
            let pts = p
                .points
                .iter()
                .filter(|q| !q.adversarial && q.label == class)
                .map(|q| (q.x, q.y))
                .collect();
            let mut s = Series::new(format!("class {class}"), PALETTE[class % PALETTE.len()], Mark::Points, pts);
            s.radius = 2.5;
            chart.series.push(s);
        }
        let adv = p.points.iter().filter(|q| q.adversarial).map(|q| (q.x, q.y)).collect();
        chart.series.push(Series::new("adversarial", "#000000", Mark::Points, adv));
        emit(PCA_PLOT, &chart)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::report::MetricsRow;

    fn one_point_report() -> MetricsReport {
        let mut attack = MetricsRow::new(0, Phase::Attack, 0.1);
        attack.robust_acc = Some(0.4);
        let mut train = MetricsRow::new(0, Phase::Train, 0.0);
        train.clean_acc = Some(0.1);
        train.stoch_mean = Some(0.0);
        MetricsReport {
            run_id: "x".into(),
            loss_kind: "ce".into(),
            tau: None,
            metric: None,
            rows: vec![attack, train],
        }
    }

    #[test]
    fn projection_csv_round_trips() {
        let p = ProjectionDump {
            points: vec![
                ProjectionPoint { adversarial: false, label: 3, x: 0.25, y: -1.5 },
                ProjectionPoint { adversarial: true, label: 0, x: 1e-17, y: 2.0 },
            ],
            explained_variance_ratio: vec![0.75, 0.125],
        };
        assert_eq!(ProjectionDump::from_csv(&p.to_csv()).unwrap(), p);
        assert!(ProjectionDump::from_csv("kind\n").is_err());
    }

    #[test]
    fn empty_input_emits_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let input = PlotInput { reports: &[], distances: None, max_distance: 1.0, projection: None };
        assert!(emit_plots(&input, dir.path()).unwrap().is_empty());
    }

    #[test]
    fn single_epsilon_report_plots() {
        let dir = tempfile::tempdir().unwrap();
        let reports = [one_point_report()];
        let input = PlotInput { reports: &reports, distances: Some(&[0.1, 0.9]), max_distance: 0.9, projection: None };
        let files = emit_plots(&input, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for f in files {
            let text = std::fs::read_to_string(f).unwrap();
            assert_eq!(roxmltree::Document::parse(&text).unwrap().root_element().tag_name().name(), "svg");
        }
    }
}
