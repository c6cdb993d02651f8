//! SVG rendering of the two-probe boundary scenario.
//!
//! The sidecar CSV (same path, `.csv` extension) has columns
//! `point,x,y,prob_one,predicted,task_loss,consistency` with rows `src`,
//! `d1`, `d2`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lemda_core::datagen::{gen_figure3_scenario, Figure3Scenario, ProbePoint};

use crate::error::{HarnessError, Result};

const SIZE: f64 = 480.0;
const EXTENT: f64 = 2.0;
const GRID: usize = 48;

#[derive(Clone, Debug)]
pub struct Figure3Output {
    pub svg: PathBuf,
    pub csv: PathBuf,
    pub scenario: Figure3Scenario,
}

fn px(v: f64) -> f64 {
    (v + EXTENT) / (2.0 * EXTENT) * SIZE
}

fn py(v: f64) -> f64 {
    SIZE - px(v)
}

fn grid_coord(k: usize) -> f64 {
    -EXTENT + 2.0 * EXTENT * k as f64 / GRID as f64
}

/// White at zero loss shading to red at `max` and beyond.
fn heat(loss: f64, max: f64) -> String {
    let t = (loss / max).clamp(0.0, 1.0);
    let c = (255.0 * (1.0 - t)).round() as u8;
    format!("#ff{c:02x}{c:02x}")
}

/// Segments of the `level` contour of a grid of values sampled at
/// `grid_coord` corners, by marching squares.
fn contour(values: &[Vec<f64>], level: f64) -> Vec<([f64; 2], [f64; 2])> {
    let mut segs = Vec::new();
    for i in 0..GRID {
        for j in 0..GRID {
            let corners = [
                ([grid_coord(i), grid_coord(j)], values[i][j]),
                ([grid_coord(i + 1), grid_coord(j)], values[i + 1][j]),
                ([grid_coord(i + 1), grid_coord(j + 1)], values[i + 1][j + 1]),
                ([grid_coord(i), grid_coord(j + 1)], values[i][j + 1]),
            ];
            let mut hits = Vec::with_capacity(4);
            for k in 0..4 {
                let (pa, va) = corners[k];
                let (pb, vb) = corners[(k + 1) % 4];
                if (va > level) != (vb > level) {
                    let t = (level - va) / (vb - va);
                    hits.push([pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])]);
                }
            }
            for pair in hits.chunks_exact(2) {
                segs.push((pair[0], pair[1]));
            }
        }
    }
    segs
}

fn line_through(normal: [f64; 2], offset: f64) -> ([f64; 2], [f64; 2]) {
    let n2 = normal[0] * normal[0] + normal[1] * normal[1];
    let foot = [-offset * normal[0] / n2, -offset * normal[1] / n2];
    let dir = [-normal[1], normal[0]];
    let far = 4.0 * EXTENT;
    (
        [foot[0] - far * dir[0], foot[1] - far * dir[1]],
        [foot[0] + far * dir[0], foot[1] + far * dir[1]],
    )
}

/// Renders the scenario to SVG text.
pub fn svg(sc: &Figure3Scenario) -> Result<String> {
    let corners: Vec<[f64; 2]> = (0..=GRID)
        .flat_map(|i| (0..=GRID).map(move |j| [grid_coord(i), grid_coord(j)]))
        .collect();
    let probs = sc.prob_one(&corners)?;
    let values: Vec<Vec<f64>> = probs.chunks(GRID + 1).map(<[f64]>::to_vec).collect();

    let centers: Vec<[f64; 2]> = (0..GRID)
        .flat_map(|i| (0..GRID).map(move |j| [grid_coord(i) + EXTENT / GRID as f64, grid_coord(j) + EXTENT / GRID as f64]))
        .collect();
    let losses = sc.task_loss(&centers)?;
    let max_loss = (2.0f64).ln().max(sc.d2.task_loss) * 2.0;

    let cell = SIZE / GRID as f64;
    let mut s = String::new();
    let w = |s: &mut String, t: std::fmt::Arguments| s.write_fmt(t).expect("write to String");
    w(
        &mut s,
        format_args!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
        ),
    );
    s.push_str("<g class=\"heat\">\n");
    for (k, loss) in losses.iter().enumerate() {
        let (i, j) = (k / GRID, k % GRID);
        w(
            &mut s,
            format_args!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"{}\"/>\n",
                i as f64 * cell,
                SIZE - (j + 1) as f64 * cell,
                heat(*loss, max_loss)
            ),
        );
    }
    s.push_str("</g>\n");

    let (a, b) = line_through(sc.normal, sc.offset);
    w(
        &mut s,
        format_args!(
            "<line class=\"ground-truth\" x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"2\" stroke-dasharray=\"6 4\"/>\n",
            px(a[0]),
            py(a[1]),
            px(b[0]),
            py(b[1])
        ),
    );
    let mut d = String::new();
    for (p, q) in contour(&values, 0.5) {
        w(
            &mut d,
            format_args!("M{:.2} {:.2}L{:.2} {:.2}", px(p[0]), py(p[1]), px(q[0]), py(q[1])),
        );
    }
    w(
        &mut s,
        format_args!("<path class=\"model-boundary\" d=\"{d}\" stroke=\"blue\" stroke-width=\"2\" fill=\"none\"/>\n"),
    );
    w(
        &mut s,
        format_args!(
            "<circle class=\"radius\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"{:.2}\" stroke=\"gray\" fill=\"none\"/>\n",
            px(sc.src.position[0]),
            py(sc.src.position[1]),
            sc.radius / (2.0 * EXTENT) * SIZE
        ),
    );
    for (id, p) in [("src", &sc.src), ("d1", &sc.d1), ("d2", &sc.d2)] {
        let (x, y) = (px(p.position[0]), py(p.position[1]));
        w(
            &mut s,
            format_args!(
                "<circle class=\"probe\" id=\"{id}\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"5\" fill=\"black\"/>\n\
                 <text class=\"probe-label\" x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">{} consistency={:.4} loss={:.4}</text>\n",
                x + 8.0,
                y - 8.0,
                id.to_uppercase(),
                p.consistency,
                p.task_loss
            ),
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn csv_row(name: &str, p: &ProbePoint) -> String {
    format!(
        "{name},{},{},{},{},{},{}\n",
        p.position[0], p.position[1], p.prob_one, p.predicted, p.task_loss, p.consistency
    )
}

pub fn sidecar_csv(sc: &Figure3Scenario) -> String {
    let mut out = String::from("point,x,y,prob_one,predicted,task_loss,consistency\n");
    out.push_str(&csv_row("src", &sc.src));
    out.push_str(&csv_row("d1", &sc.d1));
    out.push_str(&csv_row("d2", &sc.d2));
    out
}

/// Builds the scenario for `seed`, then writes the SVG to `path` and the
/// probe values next to it.
pub fn render_figure3(path: &Path, seed: u64) -> Result<Figure3Output> {
    let scenario = gen_figure3_scenario(seed)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, svg(&scenario)?).map_err(|e| HarnessError::io(path, e))?;
    let csv = path.with_extension("csv");
    fs::write(&csv, sidecar_csv(&scenario)).map_err(|e| HarnessError::io(&csv, e))?;
    Ok(Figure3Output {
        svg: path.to_path_buf(),
        csv,
        scenario,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_endpoints() {
        assert_eq!(heat(0.0, 1.0), "#ffffff");
        assert_eq!(heat(5.0, 1.0), "#ff0000");
    }

    #[test]
    fn contour_of_a_plane() {
        // value = x, level 0: a vertical segment in every cell of the middle column
        let values: Vec<Vec<f64>> = (0..=GRID).map(|i| vec![grid_coord(i); GRID + 1]).collect();
        let segs = contour(&values, 0.0 + 1e-12);
        assert_eq!(segs.len(), GRID);
        assert!(segs.iter().all(|(a, b)| a[0].abs() < 0.1 && b[0].abs() < 0.1));
    }

    #[test]
    fn line_through_satisfies_equation() {
        let (a, b) = line_through([0.6, 0.8], 0.3);
        for p in [a, b] {
            assert!((0.6 * p[0] + 0.8 * p[1] + 0.3).abs() < 1e-9);
        }
    }
}
