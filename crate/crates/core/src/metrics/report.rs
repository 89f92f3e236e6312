use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{niqe, perc_proxy, psnr};
use crate::error::{Error, Result};
use crate::i3ds::RunLayout;
use crate::latent_codec::CodecParams;
use crate::radiance_field::{render_image, RadianceField, RenderOptions};
use crate::scene_data::MultiViewDataset;

/// PSNR as JSON: a number, `"inf"` for identical images, `null` without ground truth.
mod psnr_json {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(x)) => Ok(Some(x)),
            Some(Raw::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Raw::Text(t)) => Err(serde::de::Error::custom(format!("bad PSNR value '{t}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    #[serde(with = "psnr_json")]
    pub psnr_db: Option<f64>,
    pub niqe: f64,
    pub perc_proxy: Option<f64>,
    pub n_views: usize,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl MetricReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::ingestion(path, e.to_string()))
    }
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Scores the final field of a completed run: PSNR and the feature distance on
/// the held-out views (when ground truth exists), NIQE on HR renders of every view.
pub fn evaluate_run(run_dir: &Path, dataset: &MultiViewDataset, codec: &CodecParams) -> Result<MetricReport> {
    evaluate_run_with(run_dir, dataset, codec, 1.0)
}

/// [`evaluate_run`] with PSNR measured against peak value `max_val`.
pub fn evaluate_run_with(
    run_dir: &Path,
    dataset: &MultiViewDataset,
    codec: &CodecParams,
    max_val: f64,
) -> Result<MetricReport> {
    let layout = RunLayout::new(run_dir);
    let missing: Vec<PathBuf> = [layout.manifest(), layout.final_field()]
        .into_iter()
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::ingestion(run_dir, format!("incomplete run, missing {}", list.join(", "))));
    }
    let manifest = layout.read_manifest()?;
    if let Some(&v) = manifest.test_views.iter().chain(&manifest.train_views).find(|&&v| v >= dataset.len()) {
        return Err(Error::ingestion(layout.manifest(), format!("view {v} is not in the dataset")));
    }
    let (field, _) = RadianceField::load(&layout.final_field())?;
    let opts = RenderOptions {
        n_samples: manifest.n_samples,
        background: manifest.background,
        jitter_seed: None,
    };
    let (w, h) = dataset.lr_size();
    let (near, far) = dataset.near_far;
    let mut niqe_sum = 0.0;
    let mut renders = Vec::with_capacity(dataset.len());
    for v in 0..dataset.len() {
        let img = render_image(&field, &dataset.hr_pose(v), 4 * w, 4 * h, near, far, &opts)?.clamp01();
        niqe_sum += niqe(&img)?;
        renders.push(img);
    }
    let (psnr_db, perc) = match (&dataset.hr_images, manifest.test_views.is_empty()) {
        (Some(hr), false) => {
            let (mut p, mut d) = (0.0, 0.0);
            for &v in &manifest.test_views {
                p += psnr(&renders[v], &hr[v], max_val)?;
                d += perc_proxy(&renders[v], &hr[v], codec)?;
            }
            let n = manifest.test_views.len() as f64;
            (Some(p / n), Some(d / n))
        }
        _ => (None, None),
    };
    Ok(MetricReport {
        method: manifest.method.name().to_string(),
        psnr_db,
        niqe: niqe_sum / dataset.len().max(1) as f64,
        perc_proxy: perc,
        n_views: manifest.test_views.len(),
        config_hash: manifest.config_hash,
        timestamp: now(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum RowStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub run: String,
    pub method: String,
    pub status: RowStatus,
    pub report: Option<MetricReport>,
}

/// Evaluates each run; failures become `FAILED` rows. Rows are sorted by method, then run.
pub fn evaluate_runs(
    run_dirs: &[PathBuf],
    dataset: &MultiViewDataset,
    codec: &CodecParams,
    max_val: f64,
) -> Vec<ComparisonRow> {
    let mut rows: Vec<ComparisonRow> = run_dirs
        .iter()
        .map(|dir| {
            let run = dir.display().to_string();
            match evaluate_run_with(dir, dataset, codec, max_val) {
                Ok(r) => ComparisonRow { run, method: r.method.clone(), status: RowStatus::Ok, report: Some(r) },
                Err(e) => ComparisonRow {
                    run,
                    method: RunLayout::new(dir)
                        .read_manifest()
                        .map(|m| m.method.name().to_string())
                        .unwrap_or_else(|_| "unknown".into()),
                    status: RowStatus::Failed(e.to_string()),
                    report: None,
                },
            }
        })
        .collect();
    rows.sort_by(|a, b| (&a.method, &a.run).cmp(&(&b.method, &b.run)));
    rows
}

const HEADER: [&str; 7] = ["method", "run", "psnr_db", "niqe", "perc_proxy", "n_views", "status"];

fn cells(row: &ComparisonRow) -> [String; 7] {
    let status = match &row.status {
        RowStatus::Ok => "ok".to_string(),
        RowStatus::Failed(_) => "FAILED".to_string(),
    };
    match &row.report {
        Some(r) => [
            row.method.clone(),
            row.run.clone(),
            match r.psnr_db {
                None => "n/a".into(),
                Some(p) if p.is_infinite() => "inf".into(),
                Some(p) => format!("{p:.4}"),
            },
            format!("{:.4}", r.niqe),
            r.perc_proxy.map_or("n/a".into(), |d| format!("{d:.6}")),
            r.n_views.to_string(),
            status,
        ],
        None => [
            row.method.clone(),
            row.run.clone(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            status,
        ],
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = HEADER.join(",");
    s.push('\n');
    for r in rows {
        let c = cells(r);
        let quoted: Vec<String> = c
            .iter()
            .map(|v| if v.contains(',') || v.contains('"') { format!("\"{}\"", v.replace('"', "\"\"")) } else { v.clone() })
            .collect();
        s.push_str(&quoted.join(","));
        s.push('\n');
    }
    s
}

pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let body: Vec<[String; 7]> = rows.iter().map(cells).collect();
    let mut width = HEADER.map(str::len);
    for c in &body {
        for (w, v) in width.iter_mut().zip(c) {
            *w = (*w).max(v.chars().count());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, c: &[String]| {
        let padded: Vec<String> = c.iter().zip(&width).map(|(v, w)| format!("{v:<w$}")).collect();
        let _ = writeln!(s, "{}", padded.join("  ").trim_end());
    };
    line(&mut s, &HEADER.map(String::from));
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut s, &rule);
    for c in &body {
        line(&mut s, c);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, psnr: Option<f64>) -> MetricReport {
        MetricReport {
            method: method.into(),
            psnr_db: psnr,
            niqe: 5.25,
            perc_proxy: psnr.map(|_| 0.0123),
            n_views: 4,
            config_hash: "abc".into(),
            timestamp: 17,
        }
    }

    #[test]
    fn report_json_round_trips_including_sentinels() {
        for p in [Some(31.25), Some(f64::INFINITY), None] {
            let r = report("sds", p);
            let back: MetricReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
            assert_eq!(back, r);
        }
        let json = serde_json::to_value(report("sds", None)).unwrap();
        for key in ["method", "psnr_db", "niqe", "perc_proxy", "n_views", "config_hash", "timestamp"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn tables_mark_missing_ground_truth_and_failures() {
        let rows = vec![
            ComparisonRow { run: "a".into(), method: "identity".into(), status: RowStatus::Ok, report: Some(report("identity", None)) },
            ComparisonRow { run: "b".into(), method: "sds".into(), status: RowStatus::Failed("x".into()), report: None },
        ];
        let csv = comparison_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,run,psnr_db,niqe,perc_proxy,n_views,status");
        assert_eq!(lines[1], "identity,a,n/a,5.2500,n/a,4,ok");
        assert_eq!(lines[2], "sds,b,,,,,FAILED");
        let text = comparison_text(&rows);
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(3).unwrap().ends_with("FAILED"));
    }
}
