//! Plain-text artifacts written by `bda report`.

use std::fmt::Write;

use bda::metrics::ConfusionMatrix;
use bda::sample::{CLASS_NAMES, NUM_CLASSES};

/// One loss curve: `(epoch, train, val)` rows from a `stage{n}_loss.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub stage: u8,
    pub rows: Vec<(usize, f64, Option<f64>)>,
}

pub fn parse_loss_csv(stage: u8, text: &str) -> Result<Curve, String> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || format!("stage {stage} loss csv line {}: {line:?}", n + 1);
        if f.len() != 3 {
            return Err(bad());
        }
        let epoch = f[0].parse().map_err(|_| bad())?;
        let train = f[1].parse().map_err(|_| bad())?;
        let val = if f[2].is_empty() {
            None
        } else {
            Some(f[2].parse().map_err(|_| bad())?)
        };
        rows.push((epoch, train, val));
    }
    Ok(Curve { stage, rows })
}

/// Counts and row percentages, one row per true class.
pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("true\\pred");
    for name in CLASS_NAMES {
        write!(out, ",{name}").unwrap();
    }
    for name in CLASS_NAMES {
        write!(out, ",{name}_pct").unwrap();
    }
    out.push('\n');
    let pct = cm.row_percent();
    for t in 0..NUM_CLASSES {
        out.push_str(CLASS_NAMES[t]);
        for p in 0..NUM_CLASSES {
            write!(out, ",{}", cm.counts()[t][p]).unwrap();
        }
        for p in 0..NUM_CLASSES {
            write!(out, ",{:.2}", pct[t][p]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn curves_csv(curves: &[Curve]) -> String {
    let mut out = String::from("stage,epoch,train_loss,val_loss\n");
    for c in curves {
        for &(e, t, v) in &c.rows {
            let v = v.map(|v| format!("{v:.9}")).unwrap_or_default();
            writeln!(out, "{},{e},{t:.9},{v}", c.stage).unwrap();
        }
    }
    out
}

const COLORS: [&str; 4] = ["#1f77b4", "#aec7e8", "#d62728", "#ff9896"];

/// Line plot of every curve against the epoch, one panel per stage.
pub fn curves_svg(curves: &[Curve]) -> String {
    let (pw, ph, pad) = (420.0, 260.0, 40.0);
    let width = pw * curves.len().max(1) as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{ph}\" \
         font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (k, c) in curves.iter().enumerate() {
        let x0 = k as f64 * pw;
        let ys: Vec<f64> = c
            .rows
            .iter()
            .flat_map(|r| std::iter::once(r.1).chain(r.2))
            .filter(|v| v.is_finite())
            .collect();
        let max_e = c.rows.iter().map(|r| r.0).max().unwrap_or(1).max(2) as f64;
        let min_e = c.rows.iter().map(|r| r.0).min().unwrap_or(1) as f64;
        let ymax = ys.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
        let ymin = ys
            .iter()
            .cloned()
            .fold(f64::MAX, f64::min)
            .min(ymax)
            .min(0.0);
        let sx = |e: f64| x0 + pad + (e - min_e) / (max_e - min_e).max(1.0) * (pw - 2.0 * pad);
        let sy = |v: f64| ph - pad - (v - ymin) / (ymax - ymin) * (ph - 2.0 * pad);

        let (l, r, t, b) = (x0 + pad, x0 + pw - pad, pad, ph - pad);
        writeln!(
            out,
            "<text x=\"{}\" y=\"20\">stage {} loss</text>\n\
             <line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <text x=\"{l}\" y=\"{}\">epoch {min_e}</text><text x=\"{}\" y=\"{}\">{max_e}</text>\n\
             <text x=\"{}\" y=\"{t}\">{ymax:.3}</text><text x=\"{}\" y=\"{b}\">{ymin:.3}</text>",
            x0 + pad,
            c.stage,
            b + 14.0,
            r - 10.0,
            b + 14.0,
            x0 + 2.0,
            x0 + 2.0,
        )
        .unwrap();

        let series: [(&str, Vec<(f64, f64)>); 2] = [
            ("train", c.rows.iter().map(|r| (r.0 as f64, r.1)).collect()),
            (
                "val",
                c.rows
                    .iter()
                    .filter_map(|r| r.2.map(|v| (r.0 as f64, v)))
                    .collect(),
            ),
        ];
        for (s, (name, pts)) in series.iter().enumerate() {
            if pts.is_empty() {
                continue;
            }
            let color = COLORS[(2 * k + s) % COLORS.len()];
            let path: Vec<String> = pts
                .iter()
                .map(|&(e, v)| format!("{:.2},{:.2}", sx(e), sy(v)))
                .collect();
            writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n\
                 <text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>",
                path.join(" "),
                x0 + pw - pad - 40.0,
                pad + 14.0 * (s as f64 + 1.0),
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}
