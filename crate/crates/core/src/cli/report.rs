//! Aggregation of result CSVs into means with normal-approximation 95% CIs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const Z95: f64 = 1.96;

/// Columns identifying a row rather than measuring it.
const ID_COLUMNS: &[&str] = &["target_id", "kind", "J", "m", "N", "seed", "config_hash", "version"];
/// Columns folded into the metric name.
const KEY_COLUMNS: &[&str] = &["task", "L"];

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub kind: String,
    pub j: usize,
    pub metric: String,
    pub values: Vec<f64>,
}

impl Aggregate {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `1.96 * sd / sqrt(R)` with the sample standard deviation; `None` for `R = 1`.
    pub fn half_width(&self) -> Option<f64> {
        let r = self.values.len();
        if r < 2 {
            return None;
        }
        let mean = self.mean();
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
        Some(Z95 * var.sqrt() / (r as f64).sqrt())
    }
}

/// Group key `(kind, J, metric)`.
pub type GroupKey = (String, usize, String);

/// Adds every metric value of one result CSV to `groups`.
pub fn ingest_csv(text: &str, source: &str, groups: &mut BTreeMap<GroupKey, Vec<f64>>) -> Result<()> {
    let mismatch = |why: &str| Error::invalid(format!("{source}: schema mismatch ({why})"));
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| mismatch("empty file"))?.split(',').collect();
    if header.len() < 5
        || header[..3] != ["target_id", "kind", "J"]
        || header[header.len() - 2..] != ["config_hash", "version"]
    {
        return Err(mismatch("expected target_id,kind,J,...,config_hash,version"));
    }
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(mismatch("row width differs from header"));
        }
        let kind = cells[1].to_string();
        let j: usize = cells[2].parse().map_err(|_| mismatch("J is not an integer"))?;
        let mut suffix = String::new();
        for (h, c) in header.iter().zip(&cells) {
            if KEY_COLUMNS.contains(h) {
                let _ = write!(suffix, "@{h}={c}");
            }
        }
        for (h, c) in header.iter().zip(&cells) {
            if ID_COLUMNS.contains(h) || KEY_COLUMNS.contains(h) || c.is_empty() {
                continue;
            }
            let v: f64 = c.parse().map_err(|_| mismatch(&format!("column {h} holds non-numeric {c:?}")))?;
            groups.entry((kind.clone(), j, format!("{h}{suffix}"))).or_default().push(v);
        }
    }
    Ok(())
}

/// Reads every `*.csv` directly under `dir` (sorted by name), skipping
/// `report.csv`.
pub fn aggregate_dir(dir: &Path) -> Result<Vec<Aggregate>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != "report.csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no result CSVs in {}", dir.display())));
    }
    let mut groups = BTreeMap::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        ingest_csv(&text, &f.display().to_string(), &mut groups)?;
    }
    Ok(groups.into_iter().map(|((kind, j, metric), values)| Aggregate { kind, j, metric, values }).collect())
}

pub fn report_csv(aggs: &[Aggregate], config_hash: Option<&str>) -> String {
    let mut out = String::from("kind,J,metric,R,mean,ci_low,ci_high,config_hash,version\n");
    for a in aggs {
        let mean = a.mean();
        let (lo, hi) = match a.half_width() {
            Some(h) => ((mean - h).to_string(), (mean + h).to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            a.kind,
            a.j,
            a.metric,
            a.values.len(),
            mean,
            lo,
            hi,
            config_hash.unwrap_or(""),
            crate::VERSION
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agg(values: &[f64]) -> Aggregate {
        Aggregate { kind: "boosting".into(), j: 4, metric: "ev".into(), values: values.to_vec() }
    }

    #[test]
    fn identical_values_have_zero_width() {
        let a = agg(&[0.8; 5]);
        assert_eq!(a.mean(), 0.8);
        assert_eq!(a.half_width(), Some(0.0));
    }

    #[test]
    fn one_to_five() {
        let a = agg(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(a.mean(), 3.0);
        // sample variance 2.5
        let expect = 1.96 * 2.5f64.sqrt() / 5f64.sqrt();
        assert!((a.half_width().unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1.386).abs() < 1e-3);
    }

    #[test]
    fn single_run_has_empty_ci() {
        let a = agg(&[0.5]);
        assert_eq!(a.half_width(), None);
        let csv = report_csv(&[a], None);
        assert!(csv.lines().nth(1).unwrap().starts_with("boosting,4,ev,1,0.5,,,"));
    }

    #[test]
    fn ingests_wide_and_long_rows() {
        let mut g = BTreeMap::new();
        ingest_csv("target_id,kind,J,m,N,mse,ev,config_hash,version\na,single,1,8,10,0.5,0.9,h,0.1.0\n", "a", &mut g)
            .unwrap();
        ingest_csv(
            "target_id,kind,J,task,L,s_shift,seed,config_hash,version\nb,single,1,scr,5,0.25,0,h,0.1.0\n",
            "b",
            &mut g,
        )
        .unwrap();
        assert_eq!(g[&("single".into(), 1, "ev".into())], vec![0.9]);
        assert_eq!(g[&("single".into(), 1, "s_shift@task=scr@L=5".into())], vec![0.25]);
        assert!(!g.contains_key(&("single".into(), 1, "m".into())));
        assert!(ingest_csv("a,b\n1,2\n", "x", &mut g).is_err());
        assert!(ingest_csv("target_id,kind,J,ev,config_hash,version\na,single,1,oops,h,v\n", "x", &mut g).is_err());
    }
}
