//! Counterfactual report bundle and the number formatting shared by the CSV
//! files and the service's heatmap payloads.

use std::path::Path;

use atlas_core::counterfactual::{ClusterOutcome, CounterfactualReport};
use serde::Serialize;

use crate::error::{Result, ServiceError};
use crate::workspace::{create_dir, write_text};

/// Effect sizes and coordinates: fixed six decimals, `NA` when undefined.
pub fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        let s = format!("{v:.6}");
        // "-0.000000" and "0.000000" are the same cell.
        if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
            "0.000000".into()
        } else {
            s
        }
    } else {
        "NA".into()
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), fmt_value)
}

/// p values: four significant digits in scientific notation.
pub fn fmt_p(p: f64) -> String {
    if p.is_finite() {
        format!("{p:.3e}")
    } else {
        "NA".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatCell {
    pub channel: String,
    pub mean_d: String,
    pub percent_change: String,
    pub p_value: String,
    pub adjusted_p: String,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatRow {
    pub cluster: usize,
    pub size: usize,
    pub status: &'static str,
    pub reason: Option<String>,
    pub cells: Vec<HeatCell>,
}

/// Cluster-by-biomarker rows, formatted exactly as in `cluster_shift.csv`.
pub fn heatmap(report: &CounterfactualReport) -> Vec<HeatRow> {
    report
        .cluster_tests
        .iter()
        .map(|c| match &c.outcome {
            ClusterOutcome::Tested { biomarkers } => HeatRow {
                cluster: c.cluster,
                size: c.size,
                status: "tested",
                reason: None,
                cells: biomarkers
                    .iter()
                    .map(|b| HeatCell {
                        channel: b.channel.clone(),
                        mean_d: fmt_value(b.mean_d),
                        percent_change: fmt_opt(b.percent_change),
                        p_value: fmt_p(b.test.p_value),
                        adjusted_p: fmt_p(b.adjusted_p),
                        significant: b.significant,
                    })
                    .collect(),
            },
            ClusterOutcome::Skipped { reason } => HeatRow {
                cluster: c.cluster,
                size: c.size,
                status: "skipped",
                reason: Some(reason.clone()),
                cells: Vec::new(),
            },
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> ServiceError {
    ServiceError::io(path, std::io::Error::other(e))
}

pub(crate) fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| ServiceError::io(path, e))
}

pub fn composition_rows(report: &CounterfactualReport) -> Vec<Vec<String>> {
    let Some(comp) = &report.composition else {
        return Vec::new();
    };
    let mut rows: Vec<Vec<String>> = comp
        .categories
        .iter()
        .map(|c| {
            vec![
                c.category.clone(),
                fmt_value(c.mean_original),
                fmt_value(c.mean_counterfactual),
                fmt_value(c.mean_shift),
                fmt_value(c.test.statistic),
                fmt_p(c.test.p_value),
                fmt_p(c.adjusted_p),
                c.significant.to_string(),
            ]
        })
        .collect();
    let [u0, u1] = comp.unlabeled;
    rows.push(vec![
        "unlabeled".into(),
        fmt_value(u0),
        fmt_value(u1),
        fmt_value(u1 - u0),
        "NA".into(),
        "NA".into(),
        "NA".into(),
        "false".into(),
    ]);
    rows
}

/// Writes the report bundle into `dir`.
pub fn write_report(report: &CounterfactualReport, summary: &impl Serialize, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    if report.composition.is_some() {
        write_csv(
            &dir.join("composition.csv"),
            &[
                "category",
                "mean_original",
                "mean_counterfactual",
                "mean_shift",
                "statistic",
                "p_value",
                "adjusted_p",
                "significant",
            ],
            composition_rows(report),
        )?;
    }

    let mut shift_rows = Vec::new();
    for row in heatmap(report) {
        if row.cells.is_empty() {
            shift_rows.push(vec![
                row.cluster.to_string(),
                row.size.to_string(),
                row.status.into(),
                String::new(),
                "NA".into(),
                "NA".into(),
                "NA".into(),
                "NA".into(),
                "false".into(),
            ]);
        }
        for c in row.cells {
            shift_rows.push(vec![
                row.cluster.to_string(),
                row.size.to_string(),
                row.status.into(),
                c.channel,
                c.mean_d,
                c.percent_change,
                c.p_value,
                c.adjusted_p,
                c.significant.to_string(),
            ]);
        }
    }
    write_csv(
        &dir.join("cluster_shift.csv"),
        &[
            "cluster",
            "size",
            "status",
            "channel",
            "mean_d",
            "percent_change",
            "p_value",
            "adjusted_p",
            "significant",
        ],
        shift_rows,
    )?;

    let shift = &report.shift;
    let mut header = vec!["query_id", "cluster"];
    header.extend(shift.channels.iter().map(String::as_str));
    write_csv(
        &dir.join("shifts.csv"),
        &header,
        shift.query_ids.iter().enumerate().map(|(i, id)| {
            let mut r = vec![id.clone(), report.clusters.assignments[i].to_string()];
            r.extend(shift.d.row(i).iter().map(|v| fmt_value(*v)));
            r
        }),
    )?;

    if let Some(pca) = &report.pca {
        write_csv(
            &dir.join("pca_scores.csv"),
            &["query_id", "cluster", "pc1", "pc2"],
            pca.rows.iter().enumerate().map(|(r, &i)| {
                vec![
                    shift.query_ids[i].clone(),
                    report.clusters.assignments[i].to_string(),
                    fmt_value(pca.scores[[r, 0]]),
                    fmt_value(pca.scores[[r, 1]]),
                ]
            }),
        )?;
        write_csv(
            &dir.join("pca_loadings.csv"),
            &["channel", "pc1", "pc2"],
            pca.columns.iter().enumerate().map(|(r, &j)| {
                vec![
                    shift.channels[j].clone(),
                    fmt_value(pca.loadings[[r, 0]]),
                    fmt_value(pca.loadings[[r, 1]]),
                ]
            }),
        )?;
    }

    let mut protos = String::new();
    for (c, ids) in report.prototypes.iter().enumerate() {
        for id in ids {
            protos.push_str(&format!("{c}\t{id}\n"));
        }
    }
    write_text(&dir.join("prototypes.txt"), &protos)?;

    let mut retrieval = Vec::new();
    for (i, id) in report.run.query_ids.iter().enumerate() {
        for (cond, list) in [("original", &report.run.original[i]), ("counterfactual", &report.run.counterfactual[i])] {
            for (rank, (gid, s)) in list.ids.iter().zip(&list.scores).enumerate() {
                retrieval.push(vec![id.clone(), cond.into(), (rank + 1).to_string(), gid.clone(), format!("{s:.9}")]);
            }
        }
    }
    write_csv(
        &dir.join("retrieval.csv"),
        &["query_id", "condition", "rank", "id", "score"],
        retrieval,
    )?;

    let json = serde_json::to_string_pretty(summary).map_err(|e| ServiceError::Config(e.to_string()))?;
    write_text(&dir.join("summary.json"), &json)
}
