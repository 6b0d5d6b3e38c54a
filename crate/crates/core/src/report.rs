//! Experiment report: per-seed rows, pooled MR/FPPI curves and their files.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{confidence_thresholds, mr_fppi_curve, EvalCurve, Frame, FppiRange};
use crate::experiment::{Arm, ArmResult, SeedRun};
use crate::io::write_atomic;

pub const RESULTS_HEADER: &str = "seed,arm,lamr,tp,fp,fn,misleading_removed_frac,clean_removed_frac,misleading,clean,scenes_without_negatives";
pub const CURVES_HEADER: &str = "arm,threshold,fppi,mr";

#[derive(Clone, Debug)]
pub struct Report {
    pub match_iou: f64,
    pub fppi: FppiRange,
    pub rows: Vec<ArmResult>,
    /// Held-out frames of every seed, pooled per arm in [`Arm::ALL`] order.
    frames: [Vec<Frame>; 2],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for fewer than two values).
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub seeds: usize,
    pub lamr: MeanStd,
    pub misleading_removed_frac: MeanStd,
    pub clean_removed_frac: MeanStd,
    /// Log-average miss rate of the curve pooled over all seeds.
    pub pooled_lamr: f64,
}

impl Report {
    pub fn new(match_iou: f64, fppi: FppiRange) -> Self {
        Self {
            match_iou,
            fppi,
            rows: Vec::new(),
            frames: [Vec::new(), Vec::new()],
        }
    }

    pub fn push(&mut self, run: SeedRun) -> Result<()> {
        if run.frames.len() != Arm::ALL.len() {
            return Err(Error::LengthMismatch {
                what: "arms",
                expected: Arm::ALL.len(),
                got: run.frames.len(),
            });
        }
        for (slot, frames) in self.frames.iter_mut().zip(run.frames) {
            slot.extend(frames);
        }
        self.rows.extend(run.arms);
        Ok(())
    }

    pub fn rows_for(&self, arm: Arm) -> impl Iterator<Item = &ArmResult> {
        self.rows.iter().filter(move |r| r.arm == arm)
    }

    /// MR/FPPI curve over the pooled frames of each arm that has any.
    pub fn pooled_curves(&self) -> Result<Vec<(Arm, EvalCurve)>> {
        Arm::ALL
            .iter()
            .zip(&self.frames)
            .filter(|(_, f)| !f.is_empty())
            .map(|(&arm, f)| Ok((arm, mr_fppi_curve(f, &confidence_thresholds(f), self.match_iou, &self.fppi)?)))
            .collect()
    }

    pub fn summary(&self) -> Result<Vec<ArmSummary>> {
        let pooled = self.pooled_curves()?;
        Ok(pooled
            .into_iter()
            .map(|(arm, curve)| {
                let rows: Vec<&ArmResult> = self.rows_for(arm).collect();
                let col = |f: fn(&ArmResult) -> f64| MeanStd::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                ArmSummary {
                    arm,
                    seeds: rows.len(),
                    lamr: col(|r| r.lamr),
                    misleading_removed_frac: col(|r| r.stats.misleading_removed_frac()),
                    clean_removed_frac: col(|r| r.stats.clean_removed_frac()),
                    pooled_lamr: curve.lamr,
                }
            })
            .collect())
    }

    pub fn results_csv(&self) -> String {
        let mut out = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.seed,
                r.arm.name(),
                r.lamr,
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_,
                r.stats.misleading_removed_frac(),
                r.stats.clean_removed_frac(),
                r.stats.misleading,
                r.stats.clean,
                r.scenes_without_negatives
            );
        }
        out
    }

    pub fn curves_csv(&self) -> Result<String> {
        let mut out = format!("{CURVES_HEADER}\n");
        for (arm, curve) in self.pooled_curves()? {
            for p in &curve.points {
                let _ = writeln!(out, "{},{},{},{}", arm.name(), p.threshold, p.fppi, p.mr);
            }
        }
        Ok(out)
    }

    pub fn curves_svg(&self) -> Result<String> {
        Ok(render_svg(&self.pooled_curves()?))
    }
}

// plot geometry
const W: f64 = 640.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 60.0;
const X_DECADES: (i32, i32) = (-3, 1);

fn x_of(fppi: f64) -> f64 {
    let (lo, hi) = (X_DECADES.0 as f64, X_DECADES.1 as f64);
    let l = if fppi > 0.0 { fppi.log10().clamp(lo, hi) } else { lo };
    LEFT + (l - lo) / (hi - lo) * (W - LEFT - RIGHT)
}

fn y_of(mr: f64) -> f64 {
    TOP + (1.0 - mr.clamp(0.0, 1.0)) * (H - TOP - BOTTOM)
}

fn color(arm: Arm) -> &'static str {
    match arm {
        Arm::Baseline => "#1f77b4",
        Arm::Pst => "#d62728",
    }
}

/// Log-x MR/FPPI plot, one step polyline per curve and a lamr legend.
pub fn render_svg(curves: &[(Arm, EvalCurve)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    for d in X_DECADES.0..=X_DECADES.1 {
        let x = x_of(10f64.powi(d));
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{y1:.2}" stroke="#dddddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{d}</text>"##,
            y1 + 18.0
        );
    }
    for k in 0..=10 {
        let mr = k as f64 / 10.0;
        let y = y_of(mr);
        let _ = writeln!(
            s,
            r##"<line x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="#eeeeee"/><text x="{:.2}" y="{:.2}" text-anchor="end">{mr:.1}</text>"##,
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y1 - y0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">false positives per image</text>"#,
        (x0 + x1) / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">miss rate</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (k, (arm, curve)) in curves.iter().enumerate() {
        // empty detector at the left edge, then a step per threshold
        let mut pts = vec![(x_of(0.0), y_of(1.0))];
        let mut last_y = y_of(1.0);
        for p in &curve.points {
            let x = x_of(p.fppi);
            pts.push((x, last_y));
            last_y = y_of(p.mr);
            pts.push((x, last_y));
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            color(*arm),
            coords.join(" ")
        );
        let ly = y0 + 20.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{} (lamr {:.2}%)</text>"#,
            x1 - 190.0,
            x1 - 165.0,
            color(*arm),
            x1 - 160.0,
            ly + 4.0,
            arm.name(),
            100.0 * curve.lamr
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `results.csv`, `curves.csv`, `curves.svg` and `summary.json`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("results.csv"), report.results_csv().as_bytes())?;
    write_atomic(&dir.join("curves.csv"), report.curves_csv()?.as_bytes())?;
    write_atomic(&dir.join("curves.svg"), report.curves_svg()?.as_bytes())?;
    let mut summary = serde_json::to_string_pretty(&report.summary()?)?;
    summary.push('\n');
    write_atomic(&dir.join("summary.json"), summary.as_bytes())?;
    Ok(())
}
