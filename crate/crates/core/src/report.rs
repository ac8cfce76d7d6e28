//! Run artifacts: report tables, per-fold metrics, lift curves, audit log,
//! resolved configuration and SVG lift-curve plots.
//!
//! Layout of a results directory:
//!
//! ```text
//! report.csv               one row per model, means over outer folds
//! folds.csv                per outer fold and model, full precision
//! lift_curves/fold_K.csv   percentile x model lift table, K = 1..outer_k
//! audit.csv                every fitted model with its training and scored ids
//! resolved_config.toml     configuration that reproduces the run
//! result.json              the full experiment result
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{ChurnError, Result};
use crate::pipeline::{ExperimentConfig, ExperimentResult};

pub const REPORT_FILE: &str = "report.csv";
pub const FOLDS_FILE: &str = "folds.csv";
pub const AUDIT_FILE: &str = "audit.csv";
pub const CONFIG_FILE: &str = "resolved_config.toml";
pub const RESULT_FILE: &str = "result.json";
pub const LIFT_DIR: &str = "lift_curves";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| ChurnError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| ChurnError::io(path, e))
}

fn csv_bytes(rows: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    rows(&mut w)?;
    w.into_inner().map_err(|e| ChurnError::InvalidInput(format!("csv buffer: {e}")))
}

/// `model,key,AUC,Lift,EMPC,hyperparameters,selection` with six decimals.
pub fn report_csv(result: &ExperimentResult) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["model", "key", "AUC", "Lift", "EMPC", "hyperparameters", "selection"])?;
        for s in &result.specs {
            w.write_record([
                s.name.clone(),
                s.key.clone(),
                format!("{:.6}", s.mean.auc),
                format!("{:.6}", s.mean.lift10),
                format!("{:.6}", s.mean.empc),
                s.reported.to_string(),
                s.selection.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// Per-fold metrics at full precision.
pub fn folds_csv(result: &ExperimentResult) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record([
            "key",
            "fold",
            "chosen",
            "inner_auc",
            "chosen_auc",
            "stack_lstm",
            "reported",
            "AUC",
            "Lift",
            "EMPC",
        ])?;
        for s in &result.specs {
            for f in &s.folds {
                w.write_record([
                    s.key.clone(),
                    (f.fold + 1).to_string(),
                    f.chosen.to_string(),
                    f.inner_auc.to_string(),
                    f.chosen_auc.to_string(),
                    f.stack_point.map(|p| p.to_string()).unwrap_or_default(),
                    s.reported.to_string(),
                    f.report.auc.to_string(),
                    f.report.lift10.to_string(),
                    f.report.empc.to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

/// Lift curve table of one outer fold: `percentile,<key>...`.
pub fn lift_curve_csv(result: &ExperimentResult, fold: usize) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        let mut header = vec!["percentile".to_string()];
        header.extend(result.specs.iter().map(|s| s.key.clone()));
        w.write_record(&header)?;
        let Some(first) = result.specs.first() else {
            return Ok(());
        };
        for (row, (p, _)) in first.folds[fold].report.lift_curve.iter().enumerate() {
            let mut rec = vec![p.to_string()];
            rec.extend(result.specs.iter().map(|s| s.folds[fold].report.lift_curve[row].1.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

fn join_ids(ids: &[u64]) -> String {
    ids.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
}

pub fn audit_csv(result: &ExperimentResult) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["outer_fold", "model", "n_trained", "n_predicted", "overlap", "trained_on", "predicted"])?;
        for e in &result.audit {
            w.write_record([
                (e.outer_fold + 1).to_string(),
                e.model.clone(),
                e.trained_on.len().to_string(),
                e.predicted.len().to_string(),
                e.first_overlap().map(|id| id.to_string()).unwrap_or_default(),
                join_ids(&e.trained_on),
                join_ids(&e.predicted),
            ])?;
        }
        Ok(())
    })
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_results(dir: impl AsRef<Path>, result: &ExperimentResult, config: &ExperimentConfig) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_FILE), config.to_toml()?.as_bytes())?;
    write_file(&dir.join(REPORT_FILE), &report_csv(result)?)?;
    write_file(&dir.join(FOLDS_FILE), &folds_csv(result)?)?;
    write_file(&dir.join(AUDIT_FILE), &audit_csv(result)?)?;
    write_file(&dir.join(RESULT_FILE), result.to_json()?.as_bytes())?;
    let curves = dir.join(LIFT_DIR);
    create_dir(&curves)?;
    for fold in 0..result.outer_test_sizes.len() {
        write_file(&curves.join(format!("fold_{}.csv", fold + 1)), &lift_curve_csv(result, fold)?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reading results back
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub key: String,
    pub auc: f64,
    pub lift: f64,
    pub empc: f64,
    pub hyperparameters: String,
    pub selection: String,
}

fn parse_f64(path: &Path, line: u64, field: &str) -> Result<f64> {
    field.trim().parse().map_err(|_| ChurnError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("`{field}` is not a number"),
    })
}

fn read_records(path: &Path) -> Result<(csv::StringRecord, Vec<(u64, csv::StringRecord)>)> {
    let file = fs::File::open(path).map_err(|e| ChurnError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(ChurnError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push((line, rec));
    }
    Ok((header, rows))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let (_, rows) = read_records(path)?;
    rows.into_iter()
        .map(|(line, r)| {
            Ok(ReportRow {
                model: r[0].to_string(),
                key: r[1].to_string(),
                auc: parse_f64(path, line, &r[2])?,
                lift: parse_f64(path, line, &r[3])?,
                empc: parse_f64(path, line, &r[4])?,
                hyperparameters: r[5].to_string(),
                selection: r[6].to_string(),
            })
        })
        .collect()
}

/// Recomputes each model's means from `folds.csv` and checks them against
/// `report.csv` (which is rounded to six decimals).
pub fn verify_report(dir: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let dir = dir.as_ref();
    let report = read_report(dir.join(REPORT_FILE))?;
    let folds_path = dir.join(FOLDS_FILE);
    let (header, rows) = read_records(&folds_path)?;
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| ChurnError::Parse {
            path: folds_path.clone(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let (key_c, auc_c, lift_c, empc_c) = (col("key")?, col("AUC")?, col("Lift")?, col("EMPC")?);
    for row in &report {
        let mut sums = [0.0; 3];
        let mut n = 0usize;
        for (line, r) in rows.iter().filter(|(_, r)| r[key_c] == *row.key) {
            sums[0] += parse_f64(&folds_path, *line, &r[auc_c])?;
            sums[1] += parse_f64(&folds_path, *line, &r[lift_c])?;
            sums[2] += parse_f64(&folds_path, *line, &r[empc_c])?;
            n += 1;
        }
        if n == 0 {
            return Err(ChurnError::InvalidInput(format!("no fold rows for model `{}`", row.key)));
        }
        for (what, reported, sum) in [("AUC", row.auc, sums[0]), ("Lift", row.lift, sums[1]), ("EMPC", row.empc, sums[2])] {
            let mean = sum / n as f64;
            if (mean - reported).abs() > 5.000_001e-7 {
                return Err(ChurnError::InvalidInput(format!(
                    "{what} of `{}`: report says {reported}, folds give {mean}",
                    row.key
                )));
            }
        }
    }
    Ok(report)
}

/// Lift table of one outer fold, as read from `lift_curves/fold_K.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftTable {
    pub fold: usize,
    pub models: Vec<String>,
    pub percentiles: Vec<u32>,
    /// `lifts[m][p]` for model `m` at percentile index `p`.
    pub lifts: Vec<Vec<f64>>,
}

pub fn read_lift_table(path: impl AsRef<Path>, fold: usize) -> Result<LiftTable> {
    let path = path.as_ref();
    let (header, rows) = read_records(path)?;
    if header.len() < 2 || &header[0] != "percentile" {
        return Err(ChurnError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected header `percentile,<model>...`".into(),
        });
    }
    if rows.is_empty() {
        return Err(ChurnError::InsufficientData(format!("{} has no curve points", path.display())));
    }
    let models: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut percentiles = Vec::with_capacity(rows.len());
    let mut lifts = vec![Vec::with_capacity(rows.len()); models.len()];
    for (line, r) in &rows {
        percentiles.push(r[0].trim().parse().map_err(|_| ChurnError::Parse {
            path: path.to_path_buf(),
            line: *line,
            message: format!("bad percentile `{}`", &r[0]),
        })?);
        for (m, series) in lifts.iter_mut().enumerate() {
            let v = parse_f64(path, *line, &r[m + 1])?;
            if !v.is_finite() {
                return Err(ChurnError::NonFinite(format!("{} line {line}", path.display())));
            }
            series.push(v);
        }
    }
    Ok(LiftTable {
        fold,
        models,
        percentiles,
        lifts,
    })
}

/// Reads `lift_curves/fold_1.csv`, `fold_2.csv`, ... until the first gap.
pub fn read_lift_tables(results_dir: impl AsRef<Path>) -> Result<Vec<LiftTable>> {
    let dir = results_dir.as_ref().join(LIFT_DIR);
    let mut out = Vec::new();
    loop {
        let path = dir.join(format!("fold_{}.csv", out.len() + 1));
        if !path.exists() {
            break;
        }
        out.push(read_lift_table(&path, out.len() + 1)?);
    }
    if out.is_empty() {
        return Err(ChurnError::InvalidInput(format!(
            "no lift curves found; expected {}/fold_1.csv, fold_2.csv, ...",
            dir.display()
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

const PALETTE: [&str; 9] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666", "#1f78b4",
];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders the selected models of one fold as a standalone SVG line chart.
/// An empty `models` list plots every model in the table.
pub fn render_lift_svg(table: &LiftTable, models: &[String]) -> Result<String> {
    let chosen: Vec<usize> = if models.is_empty() {
        (0..table.models.len()).collect()
    } else {
        models
            .iter()
            .map(|m| {
                table.models.iter().position(|t| t == m).ok_or_else(|| {
                    ChurnError::InvalidInput(format!("fold {}: no lift curve for model `{m}`", table.fold))
                })
            })
            .collect::<Result<_>>()?
    };
    if chosen.is_empty() || table.percentiles.is_empty() {
        return Err(ChurnError::InsufficientData("nothing to plot".into()));
    }

    let (width, height) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 220.0, 40.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let x_min = f64::from(*table.percentiles.iter().min().unwrap());
    let x_max = f64::from(*table.percentiles.iter().max().unwrap()).max(x_min + 1.0);
    let y_top = chosen
        .iter()
        .flat_map(|&m| table.lifts[m].iter().copied())
        .fold(1.0f64, f64::max)
        .ceil();
    let sx = |p: f64| left + (p - x_min) / (x_max - x_min) * plot_w;
    let sy = |v: f64| top + plot_h - v / y_top * plot_h;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!("<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">Outer Fold {}</text>\n",
        left + plot_w / 2.0,
        table.fold
    ));
    s.push_str(&format!(
        "<path d=\"M{left} {top} V{} H{}\" fill=\"none\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w
    ));
    for &p in &table.percentiles {
        if p == 1 || p % 5 == 0 {
            let x = sx(f64::from(p));
            s.push_str(&format!(
                "<line x1=\"{x:.1}\" y1=\"{0}\" x2=\"{x:.1}\" y2=\"{1}\" stroke=\"black\"/><text x=\"{x:.1}\" y=\"{2}\" text-anchor=\"middle\">{p}</text>\n",
                top + plot_h,
                top + plot_h + 5.0,
                top + plot_h + 18.0
            ));
        }
    }
    let step = (y_top / 5.0).ceil().max(1.0);
    let mut v = 0.0;
    while v <= y_top + 1e-9 {
        let y = sy(v);
        s.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{y:.1}\" x2=\"{left}\" y2=\"{y:.1}\" stroke=\"black\"/><line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/><text x=\"{2}\" y=\"{3:.1}\" text-anchor=\"end\">{v}</text>\n",
            left - 5.0,
            left + plot_w,
            left - 8.0,
            y + 4.0
        ));
        v += step;
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">Percentile</text>\n",
        left + plot_w / 2.0,
        height - 10.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">Lift</text>\n",
        top + plot_h / 2.0
    ));
    for (slot, &m) in chosen.iter().enumerate() {
        let color = PALETTE[slot % PALETTE.len()];
        let points: Vec<String> = table
            .percentiles
            .iter()
            .zip(&table.lifts[m])
            .map(|(&p, &l)| format!("{:.1},{:.1}", sx(f64::from(p)), sy(l)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
        let ly = top + 10.0 + 18.0 * slot as f64;
        let lx = left + plot_w + 15.0;
        s.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{}</text>\n",
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&table.models[m])
        ));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders one SVG per outer fold into `out_dir`. Every plot is rendered
/// before any file is written, so a bad input leaves no partial output.
pub fn write_lift_plots(
    results_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    models: &[String],
) -> Result<Vec<PathBuf>> {
    let tables = read_lift_tables(results_dir)?;
    let svgs = tables
        .iter()
        .map(|t| render_lift_svg(t, models))
        .collect::<Result<Vec<_>>>()?;
    let out_dir = out_dir.as_ref();
    create_dir(out_dir)?;
    let mut paths = Vec::with_capacity(svgs.len());
    for (t, svg) in tables.iter().zip(svgs) {
        let path = out_dir.join(format!("lift_fold_{}.svg", t.fold));
        let mut f = fs::File::create(&path).map_err(|e| ChurnError::io(&path, e))?;
        f.write_all(svg.as_bytes()).map_err(|e| ChurnError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Fixed-width text rendering of a report.
pub fn format_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:width$}  {:>8}  {:>8}  {:>10}\n", "Model", "AUC", "Lift", "EMPC");
    for r in rows {
        out.push_str(&format!(
            "{:width$}  {:>8.3}  {:>8.3}  {:>10.4}\n",
            r.model, r.auc, r.lift, r.empc
        ));
    }
    out
}
