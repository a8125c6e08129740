//! Deterministic SVG renderings of scenes and λ sweeps.

use std::fmt::Write as _;

use crate::scene::raster::DRIVABLE;
use crate::scene::{Point, SceneMap};

const CELL_PX: f64 = 8.0;

fn polyline(out: &mut String, pts: &[[f64; 2]], color: &str, width: f64) {
    let coords: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", p[0], p[1])).collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}"/>"#,
        coords.join(" ")
    );
}

/// Raster background with past (blue), ground truth (green) and predicted
/// futures (red). All trajectories are in the agent frame and are drawn from
/// the present position.
pub fn scene_svg(map: &SceneMap, past: &[Point], truth: &[Point], preds: &[Vec<Point>]) -> String {
    let size = map.size();
    let px = size as f64 * CELL_PX;
    let to_grid = map.agent_to_grid();
    let to_px = |p: &Point| {
        let g = to_grid.apply(*p);
        [(g[0] + 0.5) * CELL_PX, (g[1] + 0.5) * CELL_PX]
    };
    let with_origin = |pts: &[Point]| -> Vec<[f64; 2]> {
        std::iter::once([0.0, 0.0]).chain(pts.iter().copied()).map(|p| to_px(&p)).collect()
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{px}" height="{px}" viewBox="0 0 {px} {px}">"#
    );
    let _ = writeln!(out, r##"<rect width="{px}" height="{px}" fill="#202020"/>"##);
    for r in 0..size {
        for c in 0..size {
            if map.value(r, c, DRIVABLE) > 0.5 {
                let _ = writeln!(
                    out,
                    r##"<rect x="{}" y="{}" width="{CELL_PX}" height="{CELL_PX}" fill="#a0a0a0"/>"##,
                    c as f64 * CELL_PX,
                    r as f64 * CELL_PX
                );
            }
        }
    }
    let past_px: Vec<[f64; 2]> = past.iter().map(to_px).collect();
    polyline(&mut out, &past_px, "#1f4fd0", 2.0);
    for p in preds {
        polyline(&mut out, &with_origin(p), "#d02020", 1.5);
    }
    polyline(&mut out, &with_origin(truth), "#20a040", 2.5);
    out.push_str("</svg>\n");
    out
}

/// Two-axis line chart: FSD against the left axis, DAC against the right.
pub fn lambda_sweep_svg(rows: &[(f64, f64, f64)]) -> String {
    let (w, h, m) = (480.0, 320.0, 50.0);
    let lmax = rows.iter().map(|r| r.0).fold(1e-9, f64::max);
    let fmax = rows.iter().map(|r| r.1).fold(1e-9, f64::max) * 1.1;
    let x = |l: f64| m + (w - 2.0 * m) * l / lmax;
    let yf = |f: f64| h - m - (h - 2.0 * m) * f / fmax;
    let yd = |d: f64| h - m - (h - 2.0 * m) * d;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<path d="M{m},{m} V{b} H{r} V{m}" fill="none" stroke="black"/>"#,
        b = h - m,
        r = w - m
    );
    for r in rows {
        let _ = writeln!(out, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, x(r.0), h - m + 15.0, r.0);
    }
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let y = h - m - (h - 2.0 * m) * t;
        let _ = writeln!(out, r#"<text x="{}" y="{y:.2}" text-anchor="end">{:.2}</text>"#, m - 4.0, fmax * t);
        let _ = writeln!(out, r#"<text x="{}" y="{y:.2}">{t:.2}</text>"#, w - m + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">λ</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(out, r##"<text x="8" y="{}" fill="#d02020">FSD</text>"##, m - 12.0);
    let _ = writeln!(out, r##"<text x="{}" y="{}" fill="#1f4fd0">DAC</text>"##, w - m, m - 12.0);
    let fsd: Vec<[f64; 2]> = rows.iter().map(|r| [x(r.0), yf(r.1)]).collect();
    let dac: Vec<[f64; 2]> = rows.iter().map(|r| [x(r.0), yd(r.2)]).collect();
    polyline(&mut out, &fsd, "#d02020", 2.0);
    polyline(&mut out, &dac, "#1f4fd0", 2.0);
    out.push_str("</svg>\n");
    out
}
