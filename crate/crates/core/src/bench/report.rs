//! Summary tables (CSV and aligned text), SVG curve plots and run metadata.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::Variant;
use super::pipeline::{curve_path, Metric, Run};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::metrics::{auc, fidelity, read_dsc_csv, read_perturbation_csv, read_roc_csv};

/// One summary table: a row per estimator, one value per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = format!("estimator,{}\n", self.columns.join(","));
        for (name, values) in &self.rows {
            let vals: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "{name},{}", vals.join(","));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(n, vs)| std::iter::once(n.clone()).chain(vs.iter().map(|v| format!("{v:.4}"))).collect())
            .collect();
        let header: Vec<String> = std::iter::once("Estimator".to_string()).chain(self.columns.iter().cloned()).collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |row: &[String]| {
            let mut s = format!("{:<w$}", row[0], w = widths[0]);
            for (c, cell) in row.iter().enumerate().skip(1) {
                let _ = write!(s, "  {:>w$}", cell, w = widths[c]);
            }
            s.push('\n');
            s
        };
        let mut out = format!("{}\n", self.name);
        out.push_str(&line(&header));
        out.push_str(&format!("{}\n", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))));
        for r in &cells {
            out.push_str(&line(r));
        }
        out
    }
}

/// Per estimator and variant: (F, AUC mean height, AUC trapezoid, max DSC, argmax percent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub fidelity: f64,
    pub auc_mean_height: f64,
    pub auc_trapezoid: f64,
    pub max_dsc: f64,
    pub argmax_percent: f64,
}

pub fn collect_scores(run: &Run) -> Result<Vec<(EstimatorKind, Vec<(Variant, Scores)>)>> {
    let kinds = run.config.estimators();
    let variants = run.config.variants();
    let missing: Vec<PathBuf> = kinds
        .iter()
        .flat_map(|&k| variants.iter().flat_map(move |&v| Metric::ALL.map(|m| curve_path(k, v, m))))
        .map(|p| run.path(p))
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    kinds
        .iter()
        .map(|&k| {
            let per_variant = variants
                .iter()
                .map(|&v| {
                    let (mif, lif) = read_perturbation_csv(run.path(curve_path(k, v, Metric::Fidelity)))?;
                    let a = auc(&read_roc_csv(run.path(curve_path(k, v, Metric::Roc)))?);
                    let d = read_dsc_csv(run.path(curve_path(k, v, Metric::Dsc)))?;
                    Ok((
                        v,
                        Scores {
                            fidelity: fidelity(&mif, &lif)?,
                            auc_mean_height: a.mean_height,
                            auc_trapezoid: a.trapezoid,
                            max_dsc: d.max_dsc,
                            argmax_percent: d.argmax_percent,
                        },
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((k, per_variant))
        })
        .collect()
}

fn build_table(
    name: &str,
    scores: &[(EstimatorKind, Vec<(Variant, Scores)>)],
    columns: &[(&str, fn(&Scores) -> f64)],
) -> Table {
    let variants: Vec<Variant> = scores.first().map(|s| s.1.iter().map(|x| x.0).collect()).unwrap_or_default();
    // Sort key: first column of the absolute variant when present.
    let sort_variant = if variants.contains(&Variant::Absolute) { Variant::Absolute } else { variants[0] };
    let mut col_names = Vec::new();
    for (label, _) in columns {
        for v in &variants {
            let vname = match v {
                Variant::Original => "Original",
                Variant::Absolute => "Absolute",
            };
            col_names.push(if label.is_empty() { vname.to_string() } else { format!("{vname} {label}") });
        }
    }
    let mut rows: Vec<(usize, f64, String, Vec<f64>)> = scores
        .iter()
        .enumerate()
        .map(|(i, (k, per))| {
            let mut vals = Vec::new();
            for (_, f) in columns {
                for (_, s) in per {
                    vals.push(f(s));
                }
            }
            let key = per.iter().find(|(v, _)| *v == sort_variant).map(|(_, s)| columns[0].1(s)).unwrap_or(f64::NAN);
            (i, key, k.display_name().to_string(), vals)
        })
        .collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Table {
        name: name.to_string(),
        columns: col_names,
        rows: rows.into_iter().map(|r| (r.2, r.3)).collect(),
    }
}

pub fn tables(scores: &[(EstimatorKind, Vec<(Variant, Scores)>)]) -> [Table; 3] {
    [
        build_table("Fidelity F", scores, &[("", |s| s.fidelity)]),
        build_table(
            "AUC (mean TPR height; trapezoid alongside)",
            scores,
            &[("", |s| s.auc_mean_height), ("trapezoid", |s| s.auc_trapezoid)],
        ),
        build_table(
            "Maximum DSC",
            scores,
            &[("", |s| s.max_dsc), ("argmax %", |s| s.argmax_percent)],
        ),
    ]
}

struct Series {
    name: &'static str,
    points: Vec<(f64, f64)>,
}

const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

/// Minimal line plot. With `log_x` the x axis is log10 and ticks are placed
/// at `x_ticks`.
fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool, x_ticks: &[f64]) -> String {
    let (w, h, ml, mr, mt, mb) = (480.0, 320.0, 60.0, 20.0, 30.0, 50.0);
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let all = series.iter().flat_map(|s| s.points.iter());
    let (xmin, xmax) = all.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(tx(p.0)), b.max(tx(p.0))));
    let (xmin, xmax) = if xmax > xmin { (xmin, xmax) } else { (xmin - 1.0, xmin + 1.0) };
    let px = |x: f64| ml + (tx(x) - xmin) / (xmax - xmin) * (w - ml - mr);
    let py = |y: f64| h - mb - y.clamp(0.0, 1.0) * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{ml}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{0}" stroke="black"/>"#,
        h - mb,
        w - mr
    );
    for &t in x_ticks {
        let x = px(t);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{0}" x2="{x:.1}" y2="{1}" stroke="black"/><text x="{x:.1}" y="{2}" text-anchor="middle">{t}</text>"#,
            h - mb,
            h - mb + 4.0,
            h - mb + 16.0
        );
    }
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{1:.1}" x2="{ml}" y2="{1:.1}" stroke="black"/><text x="{2}" y="{3:.1}" text-anchor="end">{y}</text>"#,
            ml - 4.0,
            py(y),
            ml - 6.0,
            py(y) + 4.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, (ml + w - mr) / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{y_label}</text>"#,
        (mt + h - mb) / 2.0
    );
    for (i, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - mr - 90.0,
            mt + 14.0 * (i as f64 + 1.0),
            ser.name
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes tables, plots and metadata under `report/`; returns the files
/// written, relative to the run directory.
pub fn emit_report(run: &Run) -> Result<Vec<PathBuf>> {
    let scores = collect_scores(run)?;
    let dir = run.path("report");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    std::fs::create_dir_all(dir.join("plots")).map_err(|e| Error::io(&dir, e))?;
    let mut outputs = Vec::new();
    let mut emit = |rel: PathBuf, text: &str| -> Result<()> {
        write(&run.path(&rel), text)?;
        outputs.push(rel);
        Ok(())
    };

    let [fid, aucs, dscs] = tables(&scores);
    for (stem, t) in [("fidelity", &fid), ("auc", &aucs), ("dsc", &dscs)] {
        emit(PathBuf::from(format!("report/{stem}.csv")), &t.to_csv())?;
        emit(PathBuf::from(format!("report/{stem}.txt")), &t.to_text())?;
    }

    for (kind, per) in &scores {
        for (v, _) in per {
            let stem = format!("{}_{}", kind.key(), v.key());
            let title = format!("{} ({})", kind.display_name(), v.key());
            let (mif, lif) = read_perturbation_csv(run.path(curve_path(*kind, *v, Metric::Fidelity)))?;
            let pert = svg_plot(
                &title,
                "fraction of pixels masked",
                "balanced accuracy",
                &[
                    Series { name: "MiF", points: mif.fractions.iter().copied().zip(mif.accuracy).collect() },
                    Series { name: "LiF", points: lif.fractions.iter().copied().zip(lif.accuracy).collect() },
                ],
                false,
                &[0.0, 0.25, 0.5, 0.75, 1.0],
            );
            emit(PathBuf::from(format!("report/plots/{stem}_fidelity.svg")), &pert)?;
            let roc = read_roc_csv(run.path(curve_path(*kind, *v, Metric::Roc)))?;
            let roc_svg = svg_plot(
                &title,
                "mean FPR",
                "mean TPR",
                &[
                    Series { name: "ROC", points: roc.points() },
                    Series { name: "chance", points: vec![(0.0, 0.0), (1.0, 1.0)] },
                ],
                false,
                &[0.0, 0.25, 0.5, 0.75, 1.0],
            );
            emit(PathBuf::from(format!("report/plots/{stem}_roc.svg")), &roc_svg)?;
            let d = read_dsc_csv(run.path(curve_path(*kind, *v, Metric::Dsc)))?;
            let dsc_svg = svg_plot(
                &title,
                "percent of pixels shown (log scale)",
                "mean DSC",
                &[Series { name: "DSC", points: d.percents.iter().copied().zip(d.mean_dsc).collect() }],
                true,
                &d.percents,
            );
            emit(PathBuf::from(format!("report/plots/{stem}_dsc.svg")), &dsc_svg)?;
        }
    }

    let cfg = &run.config;
    let params: serde_json::Map<String, serde_json::Value> = cfg
        .estimators()
        .iter()
        .map(|&k| Ok((k.key().to_string(), serde_json::to_value(cfg.params_for(k)?).expect("json"))))
        .collect::<Result<_>>()?;
    let training = std::fs::read_to_string(run.path("model/training.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok());
    let meta = serde_json::json!({
        "tool_version": super::pipeline::TOOL_VERSION,
        "config_hash": cfg.hash(),
        "eval_size": cfg.data.eval_size,
        "estimator_params": params,
        "attributed_class": 1,
        "sign_inversion": "path-method maps (intgrad, intgrad_bw, expected_grad) are negated when the predicted class is 0",
        "perturbation": "label-1 images masked with 0, label-0 images with 1; ties ranked by pixel index; F integrated with the trapezoid rule over the full grid",
        "roc_normalization": format!("per-image {:?}", cfg.metrics.roc_normalization).to_lowercase(),
        "auc_primary": "mean of TPR heights over the threshold grid",
        "auc_secondary": "trapezoid over (FPR, TPR) including the (0,0) and (1,1) endpoints",
        "xrai_region_inclusion": "whole regions are added until the displayed share reaches the percentage",
        "felzenszwalb": cfg.metrics.felzenszwalb,
        "training": training,
    });
    emit(
        PathBuf::from("report/metadata.json"),
        &serde_json::to_string_pretty(&meta).expect("json"),
    )?;
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(f: f64) -> Scores {
        Scores {
            fidelity: f,
            auc_mean_height: 0.5,
            auc_trapezoid: 0.5,
            max_dsc: 0.1,
            argmax_percent: 5.0,
        }
    }

    #[test]
    fn rows_sort_by_absolute_variant() {
        let scores = vec![
            (EstimatorKind::Backprop, vec![(Variant::Original, s(0.3)), (Variant::Absolute, s(0.1))]),
            (EstimatorKind::Intgrad, vec![(Variant::Original, s(0.0)), (Variant::Absolute, s(0.4))]),
            (EstimatorKind::Random, vec![(Variant::Original, s(0.0)), (Variant::Absolute, s(0.0))]),
        ];
        let [fid, auc, _] = tables(&scores);
        let names: Vec<&str> = fid.rows.iter().map(|r| r.0.as_str()).collect();
        assert_eq!(names, ["IntGrad", "Backpropagation", "Random"]);
        assert_eq!(fid.columns, ["Original", "Absolute"]);
        assert_eq!(fid.rows[1].1, vec![0.3, 0.1]);
        assert_eq!(auc.columns.len(), 4);
        let text = fid.to_text();
        assert!(text.lines().nth(1).unwrap().starts_with("Estimator"));
        assert!(fid.to_csv().starts_with("estimator,Original,Absolute\nIntGrad,0.0000,0.4000\n"));
    }

    #[test]
    fn log_plot_places_ticks() {
        let svg = svg_plot(
            "t",
            "x",
            "y",
            &[Series { name: "a", points: vec![(1.0, 0.1), (10.0, 0.5), (100.0, 0.2)] }],
            true,
            &[1.0, 10.0, 100.0],
        );
        // Log spacing: 1 -> 10 and 10 -> 100 span equal widths.
        assert!(svg.contains(r#"x1="60.0""#) && svg.contains(r#"x1="260.0""#) && svg.contains(r#"x1="460.0""#));
    }
}
