//! Per-iteration error statistics and the result/metrics CSV formats.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::LocalizationResult;
use crate::error::{Error, Result};
use crate::geometry::Pose7D;

pub const METRICS_HEADER: &str =
    "iteration,mean_trans_cm,mean_rot_deg,median_trans_cm,median_rot_deg,std_trans_cm,std_rot_deg,runs";

#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_trans_cm: f64,
    pub mean_rot_deg: f64,
    pub median_trans_cm: f64,
    pub median_rot_deg: f64,
    /// Sample standard deviation (n−1) of the per-run means; 0 for one run.
    pub std_trans_cm: f64,
    pub std_rot_deg: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub iterations: Vec<IterationMetrics>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Statistics per iteration. `runs[r][f]` lists the `(cm, degrees)` errors
/// of frame `f` in run `r`, one pair per iteration (0 is the initial pose).
/// Means and medians pool all frames of all runs.
pub fn evaluate(runs: &[Vec<Vec<(f64, f64)>>]) -> Result<MetricsReport> {
    let first = runs
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::invalid("nothing to evaluate"))?;
    let iters = first.len();
    if iters == 0
        || runs
            .iter()
            .any(|r| r.is_empty() || r.iter().any(|f| f.len() != iters))
    {
        return Err(Error::invalid(
            "every run needs frames with the same number of iterations",
        ));
    }
    let iterations = (0..iters)
        .map(|i| {
            let pooled_t: Vec<f64> = runs.iter().flatten().map(|f| f[i].0).collect();
            let pooled_r: Vec<f64> = runs.iter().flatten().map(|f| f[i].1).collect();
            let run_t: Vec<f64> = runs
                .iter()
                .map(|r| mean(&r.iter().map(|f| f[i].0).collect::<Vec<_>>()))
                .collect();
            let run_r: Vec<f64> = runs
                .iter()
                .map(|r| mean(&r.iter().map(|f| f[i].1).collect::<Vec<_>>()))
                .collect();
            IterationMetrics {
                iteration: i,
                mean_trans_cm: mean(&pooled_t),
                mean_rot_deg: mean(&pooled_r),
                median_trans_cm: median(&pooled_t),
                median_rot_deg: median(&pooled_r),
                std_trans_cm: sample_std(&run_t),
                std_rot_deg: sample_std(&run_r),
                runs: runs.len(),
            }
        })
        .collect();
    Ok(MetricsReport { iterations })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for m in &self.iterations {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                m.iteration,
                m.mean_trans_cm,
                m.mean_rot_deg,
                m.median_trans_cm,
                m.median_rot_deg,
                m.std_trans_cm,
                m.std_rot_deg,
                m.runs
            );
        }
        s
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>4}  {:>17}  {:>17}  {:>17}  {:>4}\n",
            "iter", "mean cm / deg", "median cm / deg", "std cm / deg", "runs"
        );
        for m in &self.iterations {
            let _ = writeln!(
                s,
                "{:>4}  {:>9.2} / {:>5.2}  {:>9.2} / {:>5.2}  {:>9.2} / {:>5.2}  {:>4}",
                m.iteration,
                m.mean_trans_cm,
                m.mean_rot_deg,
                m.median_trans_cm,
                m.median_rot_deg,
                m.std_trans_cm,
                m.std_rot_deg,
                m.runs
            );
        }
        s
    }
}

/// Per-frame localization results: frame id, `(cm, deg)` per iteration,
/// then the final pose.
pub fn write_results_csv<W: Write>(
    rows: &[(String, LocalizationResult)],
    mut out: W,
) -> Result<()> {
    let iters = rows.first().map_or(0, |r| r.1.poses.len());
    let mut s = String::from("frame_id");
    for i in 0..iters {
        let _ = write!(s, ",trans_cm_{i},rot_deg_{i}");
    }
    s.push_str(",tx,ty,tz,qw,qx,qy,qz\n");
    for (id, r) in rows {
        let errors = r
            .errors
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("frame {id} has no ground-truth errors")))?;
        if r.poses.len() != iters || errors.len() != iters {
            return Err(Error::invalid(
                "all frames must run the same number of iterations",
            ));
        }
        s.push_str(id);
        for (t, a) in errors {
            let _ = write!(s, ",{t},{a}");
        }
        let last = r.poses.last().expect("initial pose present");
        for v in last.to_vector() {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    out.write_all(s.as_bytes())?;
    Ok(())
}

/// One row of a results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub frame_id: String,
    pub errors: Vec<(f64, f64)>,
    pub final_pose: Pose7D,
}

pub fn read_results_csv<R: BufRead>(input: R) -> Result<Vec<ResultRow>> {
    let bad = |detail: String| Error::format("results csv", detail);
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 10 || cols[0] != "frame_id" || !(cols.len() - 8).is_multiple_of(2) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let iters = (cols.len() - 8) / 2;
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(bad(format!(
                "row {} has {} fields, expected {}",
                n + 1,
                f.len(),
                cols.len()
            )));
        }
        let nums = f[1..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("row {}: {e}", n + 1)))?;
        let errors = (0..iters).map(|i| (nums[2 * i], nums[2 * i + 1])).collect();
        let v: [f64; 7] = nums[2 * iters..].try_into().expect("width checked");
        rows.push(ResultRow {
            frame_id: f[0].to_string(),
            errors,
            final_pose: Pose7D::from_vector(v).map_err(|e| bad(format!("row {}: {e}", n + 1)))?,
        });
    }
    Ok(rows)
}
