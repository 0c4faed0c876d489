//! Dependency-free SVG charts over the analyzer's CSV output.
//!
//! Four figures are rendered from a report directory:
//!
//! * `distance.svg` — distance-to-reference curve per epoch
//! * `residual.svg` — epoch residual e_B with a red horizontal zero baseline
//! * `fraction.svg` — star-convex step fraction bars with the full-loss
//!   curve overlaid on a secondary axis (needs per-iteration rows, so it is
//!   skipped with a notice when iters.csv carries no data)
//! * `norm.svg`     — iterate norm curve per epoch
//!
//! Everything is emitted as plain `<polyline>`/`<rect>`/`<text>` primitives
//! so the files can be checked in tests without an XML library.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("missing report file: {0}")]
    MissingCsv(PathBuf),
    #[error("{path}: line {line}: {msg}")]
    BadCsv {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 70.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

/// Axis range padded around the data so every point lies strictly inside.
pub fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        // degenerate span: open a unit window around the value
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - MARGIN_L - MARGIN_R)
    }
    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 0.01 && v.abs() < 10000.0 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>",
        WIDTH / 2.0
    );
}

fn svg_axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let x0 = MARGIN_L;
    let x1 = WIDTH - MARGIN_R;
    let y0 = HEIGHT - MARGIN_B;
    let y1 = MARGIN_T;
    let _ = writeln!(
        out,
        "<polyline points=\"{x0},{y1} {x0},{y0} {x1},{y0}\" fill=\"none\" stroke=\"black\"/>"
    );
    // min/max tick labels document the axis ranges
    let _ = writeln!(
        out,
        "<text x=\"{x0}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        y0 + 16.0,
        fmt_tick(frame.x.0)
    );
    let _ = writeln!(
        out,
        "<text x=\"{x1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        y0 + 16.0,
        fmt_tick(frame.x.1)
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{y0}\" text-anchor=\"end\">{}</text>",
        x0 - 6.0,
        fmt_tick(frame.y.0)
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
        x0 - 6.0,
        y1 + 4.0,
        fmt_tick(frame.y.1)
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
}

fn svg_polyline(out: &mut String, frame: &Frame, points: &[(f64, f64)], color: &str) {
    if points.is_empty() {
        return;
    }
    let mut coords = String::new();
    for &(x, y) in points {
        let _ = write!(coords, "{:.2},{:.2} ", frame.px(x), frame.py(y));
    }
    let _ = writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
        coords.trim_end()
    );
}

/// Single-curve line chart with an optional horizontal reference line.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
    hline: Option<f64>,
) -> String {
    let frame = Frame {
        x: axis_range(points.iter().map(|p| p.0)),
        y: axis_range(points.iter().map(|p| p.1).chain(hline)),
    };
    let mut out = String::new();
    svg_open(&mut out, title);
    svg_axes(&mut out, &frame, x_label, y_label);
    if let Some(h) = hline {
        let y = frame.py(h);
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"red\" stroke-width=\"1.5\"/>",
            MARGIN_L,
            WIDTH - MARGIN_R
        );
    }
    svg_polyline(&mut out, &frame, points, "steelblue");
    out.push_str("</svg>\n");
    out
}

/// Bars of the per-epoch star-convex fraction on a fixed [0, 1] left axis
/// with the full-loss curve on a secondary right axis.
pub fn fraction_chart(fractions: &[(f64, f64)], losses: &[(f64, f64)]) -> String {
    let frame = Frame {
        x: axis_range(fractions.iter().chain(losses).map(|p| p.0)),
        y: (0.0, 1.05),
    };
    let loss_frame = Frame {
        x: frame.x,
        y: axis_range(losses.iter().map(|p| p.1)),
    };
    let mut out = String::new();
    svg_open(&mut out, "Star-convex step fraction and training loss");
    svg_axes(&mut out, &frame, "epoch", "fraction of e_k &lt; 0");
    let bar_w = ((WIDTH - MARGIN_L - MARGIN_R) / fractions.len().max(1) as f64 * 0.8).min(24.0);
    for &(x, f) in fractions {
        let cx = frame.px(x);
        let top = frame.py(f);
        let base = frame.py(0.0);
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"steelblue\" fill-opacity=\"0.7\"/>",
            cx - bar_w / 2.0,
            top,
            bar_w,
            (base - top).max(0.0)
        );
    }
    svg_polyline(&mut out, &loss_frame, losses, "darkorange");
    // right-axis labels for the loss curve
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" fill=\"darkorange\">{}</text>",
        WIDTH - MARGIN_R + 6.0,
        MARGIN_T + 4.0,
        fmt_tick(loss_frame.y.1)
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" fill=\"darkorange\">{}</text>",
        WIDTH - MARGIN_R + 6.0,
        HEIGHT - MARGIN_B,
        fmt_tick(loss_frame.y.0)
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" fill=\"darkorange\" text-anchor=\"end\">loss</text>",
        WIDTH - MARGIN_R + 60.0,
        MARGIN_T - 8.0
    );
    out.push_str("</svg>\n");
    out
}

/// One parsed CSV: header names plus rows of f64 columns.
fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), PlotError> {
    if !path.exists() {
        return Err(PlotError::MissingCsv(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) => h.split(',').map(|s| s.trim().to_string()).collect(),
        None => {
            return Err(PlotError::BadCsv {
                path: path.to_path_buf(),
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match row {
            Ok(r) => rows.push(r),
            Err(e) => {
                return Err(PlotError::BadCsv {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok((header, rows))
}

fn column(
    path: &Path,
    header: &[String],
    rows: &[Vec<f64>],
    name: &str,
) -> Result<Vec<f64>, PlotError> {
    let idx = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| PlotError::BadCsv {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("missing column '{name}' in header {header:?}"),
        })?;
    Ok(rows.iter().map(|r| r[idx]).collect())
}

/// Files written and notices emitted by [`render_dir`].
#[derive(Debug, Default)]
pub struct RenderOutcome {
    pub written: Vec<PathBuf>,
    pub notices: Vec<String>,
}

/// Renders all figures from `epochs.csv` / `iters.csv` in `dir`, writing
/// the SVG files next to them.
pub fn render_dir(dir: &Path) -> Result<RenderOutcome, PlotError> {
    let epochs_path = dir.join("epochs.csv");
    let (eh, erows) = read_csv(&epochs_path)?;
    let epoch_col = column(&epochs_path, &eh, &erows, "epoch")?;
    let zip = |ys: Vec<f64>| -> Vec<(f64, f64)> {
        epoch_col.iter().cloned().zip(ys).collect()
    };
    let dist = zip(column(&epochs_path, &eh, &erows, "dist")?);
    let e_b = zip(column(&epochs_path, &eh, &erows, "e_B")?);
    let loss = zip(column(&epochs_path, &eh, &erows, "full_loss")?);
    let norm = zip(column(&epochs_path, &eh, &erows, "weight_norm")?);

    let mut outcome = RenderOutcome::default();
    let mut emit = |name: &str, svg: String| -> Result<(), PlotError> {
        let path = dir.join(name);
        std::fs::write(&path, svg)?;
        outcome.written.push(path);
        Ok(())
    };
    emit(
        "distance.svg",
        line_chart(
            "Distance to reference point",
            "epoch",
            "distance",
            &dist,
            None,
        ),
    )?;
    emit(
        "residual.svg",
        line_chart("Epoch residual e_B", "epoch", "e_B", &e_b, Some(0.0)),
    )?;
    emit(
        "norm.svg",
        line_chart("Iterate norm", "epoch", "norm", &norm, None),
    )?;

    let iters_path = dir.join("iters.csv");
    let (ih, irows) = read_csv(&iters_path)?;
    if irows.is_empty() {
        outcome
            .notices
            .push("iters.csv has no rows; fraction.svg omitted".to_string());
    } else {
        let epochs = column(&iters_path, &ih, &irows, "epoch")?;
        let e_k = column(&iters_path, &ih, &irows, "e_k")?;
        let mut neg: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
        for (b, e) in epochs.iter().zip(&e_k) {
            let entry = neg.entry(*b as u64).or_insert((0, 0));
            entry.1 += 1;
            if *e < 0.0 {
                entry.0 += 1;
            }
        }
        let fractions: Vec<(f64, f64)> = neg
            .iter()
            .map(|(&b, &(n, total))| (b as f64, n as f64 / total as f64))
            .collect();
        emit("fraction.svg", fraction_chart(&fractions, &loss))?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal well-formedness check: every opened tag is closed in order
    /// and attribute quoting is balanced per tag.
    pub fn assert_well_formed(svg: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = svg;
        while let Some(start) = rest.find('<') {
            let end = rest[start..].find('>').expect("unclosed tag") + start;
            let tag = &rest[start + 1..end];
            assert_eq!(
                tag.matches('"').count() % 2,
                0,
                "unbalanced quotes in <{tag}>"
            );
            if let Some(name) = tag.strip_prefix('/') {
                assert_eq!(stack.pop().as_deref(), Some(name), "mismatched </{name}>");
            } else if !tag.ends_with('/') && !tag.starts_with('?') && !tag.starts_with('!') {
                let name = tag.split_whitespace().next().unwrap().to_string();
                stack.push(name);
            }
            // every '&' in text content must start an entity reference
            let text_end = rest[end + 1..].find('<').map(|i| end + 1 + i).unwrap_or(rest.len());
            let text = &rest[end + 1..text_end];
            for (pos, _) in text.match_indices('&') {
                let entity_ok = text[pos + 1..]
                    .split_once(';')
                    .is_some_and(|(name, _)| {
                        !name.is_empty()
                            && name.len() <= 8
                            && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '#')
                    });
                assert!(entity_ok, "unescaped '&' near ...{}", &text[pos..]);
            }
            rest = &rest[end + 1..];
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    #[test]
    fn line_chart_is_well_formed_and_in_frame() {
        let points: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, (i as f64).sin())).collect();
        let svg = line_chart("t", "x", "y", &points, Some(0.0));
        assert_well_formed(&svg);
        // all plotted coordinates lie inside the viewbox
        let frame = Frame {
            x: axis_range(points.iter().map(|p| p.0)),
            y: axis_range(points.iter().map(|p| p.1).chain(Some(0.0))),
        };
        for &(x, y) in &points {
            assert!(frame.px(x) >= MARGIN_L && frame.px(x) <= WIDTH - MARGIN_R);
            assert!(frame.py(y) >= MARGIN_T && frame.py(y) <= HEIGHT - MARGIN_B);
        }
        assert!(svg.contains("stroke=\"red\""), "zero baseline missing");
    }

    #[test]
    fn axis_range_covers_extrema() {
        let vals = [3.0, -1.5, 2.25, 0.0];
        let (lo, hi) = axis_range(vals.iter().cloned());
        assert!(lo < -1.5 && hi > 3.0);
        // degenerate and empty inputs stay usable
        let (lo, hi) = axis_range([2.0].iter().cloned());
        assert!(lo < 2.0 && hi > 2.0);
        let (lo, hi) = axis_range(std::iter::empty());
        assert!(lo < hi);
    }

    fn write_fixture_csvs(dir: &Path, iter_rows: &str) {
        std::fs::write(
            dir.join("epochs.csv"),
            "epoch,e_B,dist,full_loss,variance,weight_norm\n\
             0,-1.0,2.0,0.5,0.1,1.0\n\
             1,-0.5,1.5,0.25,0.05,1.1\n\
             2,-0.25,1.0,0.125,0.01,1.2\n",
        )
        .unwrap();
        std::fs::write(
            dir.join("iters.csv"),
            format!("k,epoch,t,xi,e_k,component_loss\n{iter_rows}"),
        )
        .unwrap();
        std::fs::write(
            dir.join("audits.csv"),
            "epoch,checked,vacuous,violated,slack_used\n0,1,0,0,0.0\n",
        )
        .unwrap();
    }

    #[test]
    fn render_dir_writes_all_figures() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_csvs(
            dir.path(),
            "0,0,0,1,-0.5,0.6\n1,0,1,2,0.5,0.4\n2,1,0,2,-0.1,0.3\n3,1,1,1,-0.2,0.2\n",
        );
        let outcome = render_dir(dir.path()).unwrap();
        let names: Vec<_> = outcome
            .written
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(
            names,
            ["distance.svg", "residual.svg", "norm.svg", "fraction.svg"]
        );
        assert!(outcome.notices.is_empty());
        for p in &outcome.written {
            assert_well_formed(&std::fs::read_to_string(p).unwrap());
        }
        // epoch 0 has one of two steps negative
        let fraction = std::fs::read_to_string(dir.path().join("fraction.svg")).unwrap();
        assert!(fraction.contains("rect"));
    }

    #[test]
    fn empty_iters_omits_fraction_with_notice() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_csvs(dir.path(), "");
        let outcome = render_dir(dir.path()).unwrap();
        assert!(!dir.path().join("fraction.svg").exists());
        assert_eq!(outcome.notices.len(), 1);
        assert!(outcome.notices[0].contains("fraction.svg omitted"));
    }

    #[test]
    fn missing_csv_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        match render_dir(dir.path()).unwrap_err() {
            PlotError::MissingCsv(p) => assert!(p.ends_with("epochs.csv")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
