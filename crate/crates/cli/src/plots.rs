//! Optional SVG figures: trajectories, error curves and threshold evolution.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use etmpc::closed_loop::{PlantKind, TaskReport};
use etmpc::config::RunConfig;
use etmpc::plant::Unicycle;

const SIZE: (u32, u32) = (800, 600);

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plot: {e}")
}

fn bounds(pts: impl Iterator<Item = (f64, f64)>) -> ((f64, f64), (f64, f64)) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |a: f64, b: f64| {
        let m = ((b - a) * 0.05).max(1e-6);
        (a - m, b + m)
    };
    (pad(x0, x1), pad(y0, y1))
}

fn series(report: &TaskReport) -> Vec<Vec<(usize, Vec<f64>)>> {
    report
        .iterations
        .iter()
        .map(|it| {
            let mut v: Vec<(usize, Vec<f64>)> = it.phase.steps.iter().map(|s| (s.t, s.x.clone())).collect();
            let t_end = it.phase.steps.last().map_or(0, |s| s.t + 1);
            v.push((t_end, it.phase.final_state.clone()));
            v
        })
        .collect()
}

pub fn write_all(cfg: &RunConfig, report: &TaskReport, dir: &Path) -> Result<()> {
    trajectory(cfg, report, &dir.join("trajectory.svg"))?;
    errors(cfg, report, &dir.join("errors.svg"))?;
    thresholds(report, &dir.join("thresholds.svg"))?;
    Ok(())
}

fn trajectory(cfg: &RunConfig, report: &TaskReport, path: &Path) -> Result<()> {
    let runs = series(report);
    let lines: Vec<Vec<(f64, f64)>> = match &cfg.plant {
        PlantKind::Unicycle(u) => runs
            .iter()
            .map(|r| {
                r.iter()
                    .map(|(t, x)| {
                        let p = Unicycle::world_pose(&u.reference(*t as f64 * u.dt), x);
                        (p[0], p[1])
                    })
                    .collect()
            })
            .collect(),
        PlantKind::Kernel(_) => runs
            .iter()
            .map(|r| r.iter().map(|(t, x)| (*t as f64, x[0])).collect())
            .collect(),
    };
    let reference: Vec<(f64, f64)> = match &cfg.plant {
        PlantKind::Unicycle(u) => (0..=200)
            .map(|k| {
                let r = u.reference(k as f64 * 2.0 * std::f64::consts::PI / (200.0 * u.omega_r));
                (r[0], r[1])
            })
            .collect(),
        PlantKind::Kernel(_) => Vec::new(),
    };
    let ((x0, x1), (y0, y1)) = bounds(lines.iter().flatten().chain(&reference).copied());
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let (xl, yl) = if reference.is_empty() { ("t", "x1") } else { ("x", "y") };
    let mut chart = ChartBuilder::on(&root)
        .caption("Closed-loop trajectories", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(err)?;
    chart.configure_mesh().x_desc(xl).y_desc(yl).draw().map_err(err)?;
    if !reference.is_empty() {
        chart
            .draw_series(LineSeries::new(reference, BLACK.mix(0.4)))
            .map_err(err)?
            .label("reference")
            .legend(|(x, y)| PathElement::new([(x, y), (x + 15, y)], BLACK.mix(0.4)));
    }
    for (i, l) in lines.into_iter().enumerate() {
        let c = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(l, c))
            .map_err(err)?
            .label(format!("iteration {}", i + 1))
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 15, y)], c));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(err)?;
    root.present().map_err(err)
}

/// Position error norm and, for the unicycle, the attitude error.
fn errors(cfg: &RunConfig, report: &TaskReport, path: &Path) -> Result<()> {
    let runs = series(report);
    let uni = matches!(cfg.plant, PlantKind::Unicycle(_));
    let dist: Vec<Vec<(f64, f64)>> = runs
        .iter()
        .map(|r| {
            r.iter()
                .map(|(t, x)| {
                    let k = if uni { 2 } else { x.len() };
                    (*t as f64, x[..k].iter().map(|v| v * v).sum::<f64>().sqrt())
                })
                .collect()
        })
        .collect();
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let panels = if uni { root.split_evenly((2, 1)) } else { vec![root.clone()] };
    let draw = |area: &DrawingArea<SVGBackend, plotters::coord::Shift>, data: &[Vec<(f64, f64)>], label: &str| -> Result<()> {
        let ((x0, x1), (y0, y1)) = bounds(data.iter().flatten().copied());
        let mut chart = ChartBuilder::on(area)
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(err)?;
        chart.configure_mesh().x_desc("t").y_desc(label).draw().map_err(err)?;
        for (i, l) in data.iter().enumerate() {
            chart.draw_series(LineSeries::new(l.clone(), Palette99::pick(i))).map_err(err)?;
        }
        Ok(())
    };
    draw(&panels[0], &dist, "error distance")?;
    if uni {
        let att: Vec<Vec<(f64, f64)>> = runs.iter().map(|r| r.iter().map(|(t, x)| (*t as f64, x[2])).collect()).collect();
        draw(&panels[1], &att, "attitude error")?;
    }
    root.present().map_err(err)
}

/// `ξ*_i(j)` over absolute time for every schedule of every iteration.
fn thresholds(report: &TaskReport, path: &Path) -> Result<()> {
    let mut lines: Vec<(usize, usize, Vec<(f64, f64)>)> = Vec::new();
    for (it_idx, it) in report.iterations.iter().enumerate() {
        for r in &it.phase.solves {
            let Some(sc) = &r.schedule else { continue };
            for i in 0..sc.xi.first().map_or(0, Vec::len) {
                let pts = sc.xi.iter().enumerate().map(|(j, xi)| ((r.t_k + j) as f64, xi[i])).collect();
                lines.push((it_idx, i, pts));
            }
        }
    }
    let ((x0, x1), (y0, y1)) = bounds(lines.iter().flat_map(|l| l.2.iter().copied()));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Trigger thresholds", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(err)?;
    chart.configure_mesh().x_desc("t").y_desc("xi").draw().map_err(err)?;
    for (it_idx, i, pts) in lines {
        let style = Palette99::pick(it_idx).mix(if i == 0 { 1.0 } else { 0.5 });
        chart.draw_series(LineSeries::new(pts, style)).map_err(err)?;
    }
    root.present().map_err(err)
}
