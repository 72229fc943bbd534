use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics of one pair. Vectors are indexed like the report thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub pair_id: String,
    pub n_kp_a: usize,
    pub n_kp_b: usize,
    pub overlap_a: usize,
    pub overlap_b: usize,
    /// Mutual nearest-neighbour matches.
    pub matches: usize,
    pub corres: Vec<usize>,
    pub correct: Vec<usize>,
    pub rr: Vec<f64>,
    pub ms: Vec<f64>,
    pub registered: bool,
    pub re_h: Option<f64>,
    pub re_m: Option<f64>,
}

impl PairRow {
    /// RE_H when the true homography is known, RE_M otherwise.
    pub fn re(&self) -> f64 {
        self.re_h.or(self.re_m).unwrap_or(f64::INFINITY)
    }

    pub fn success(&self, t: f64) -> bool {
        self.re() < t
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub pair_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pairs: usize,
    pub skipped: Vec<Skipped>,
    pub thresholds: Vec<f64>,
    pub mean_rr: Vec<f64>,
    pub mean_ms: Vec<f64>,
    /// Fraction of pairs with RE below each threshold.
    pub srr_curve: Vec<f64>,
    pub success_threshold: f64,
    pub sr: usize,
    pub srr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub thresholds: Vec<f64>,
    pub success_threshold: f64,
    /// Sorted by pair id.
    pub rows: Vec<PairRow>,
    pub skipped: Vec<Skipped>,
}

/// One CSV line: a pair at one threshold.
#[derive(Serialize, Deserialize)]
struct CsvRow {
    pair_id: String,
    threshold: f64,
    n_kp_a: usize,
    n_kp_b: usize,
    overlap_a: usize,
    overlap_b: usize,
    corres: usize,
    rr: f64,
    matches: usize,
    correct: usize,
    ms: f64,
    registered: bool,
    re_h: Option<f64>,
    re_m: Option<f64>,
    success: bool,
}

pub const CSV_HEADER: &str = "pair_id,threshold,n_kp_a,n_kp_b,overlap_a,overlap_b,corres,rr,matches,correct,ms,registered,re_h,re_m,success";

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl BenchmarkReport {
    pub fn new(thresholds: Vec<f64>, success_threshold: f64, mut rows: Vec<PairRow>, mut skipped: Vec<Skipped>) -> Self {
        rows.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
        skipped.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
        Self {
            thresholds,
            success_threshold,
            rows,
            skipped,
        }
    }

    pub fn mean_rr(&self) -> Vec<f64> {
        (0..self.thresholds.len()).map(|t| mean(self.rows.iter().map(|r| r.rr[t]))).collect()
    }

    pub fn mean_ms(&self) -> Vec<f64> {
        (0..self.thresholds.len()).map(|t| mean(self.rows.iter().map(|r| r.ms[t]))).collect()
    }

    pub fn srr_curve(&self) -> Vec<f64> {
        self.thresholds.iter().map(|&t| mean(self.rows.iter().map(|r| r.success(t) as u8 as f64))).collect()
    }

    /// Successfully registered pairs.
    pub fn sr(&self) -> usize {
        self.rows.iter().filter(|r| r.success(self.success_threshold)).count()
    }

    /// SR over evaluated (not skipped) pairs.
    pub fn srr(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.sr() as f64 / self.rows.len() as f64
        }
    }

    /// Index of threshold `t`, if present.
    pub fn threshold_index(&self, t: f64) -> Option<usize> {
        self.thresholds.iter().position(|&x| x == t)
    }

    pub fn summary(&self) -> Summary {
        Summary {
            pairs: self.rows.len(),
            skipped: self.skipped.clone(),
            thresholds: self.thresholds.clone(),
            mean_rr: self.mean_rr(),
            mean_ms: self.mean_ms(),
            srr_curve: self.srr_curve(),
            success_threshold: self.success_threshold,
            sr: self.sr(),
            srr: self.srr(),
        }
    }

    pub fn summary_text(&self) -> String {
        let s = self.summary();
        let mut out = format!("pairs evaluated: {}\npairs skipped: {}\n", s.pairs, s.skipped.len());
        for k in &s.skipped {
            out += &format!("  skipped {}: {}\n", k.pair_id, k.reason);
        }
        out += "threshold  mean_rr   mean_ms   srr\n";
        for (i, t) in s.thresholds.iter().enumerate() {
            out += &format!("{t:>9}  {:.6}  {:.6}  {:.6}\n", s.mean_rr[i], s.mean_ms[i], s.srr_curve[i]);
        }
        out += &format!("SR (RE < {}): {} of {}\nSRR: {:.6}\n", s.success_threshold, s.sr, s.pairs, s.srr);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
        if self.rows.is_empty() {
            return format!("{CSV_HEADER}\n");
        }
        for r in &self.rows {
            for (i, &t) in self.thresholds.iter().enumerate() {
                w.serialize(CsvRow {
                    pair_id: r.pair_id.clone(),
                    threshold: t,
                    n_kp_a: r.n_kp_a,
                    n_kp_b: r.n_kp_b,
                    overlap_a: r.overlap_a,
                    overlap_b: r.overlap_b,
                    corres: r.corres[i],
                    rr: r.rr[i],
                    matches: r.matches,
                    correct: r.correct[i],
                    ms: r.ms[i],
                    registered: r.registered,
                    re_h: r.re_h,
                    re_m: r.re_m,
                    success: r.success(t),
                })
                .expect("in-memory CSV write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8")
    }

    /// Rebuild a report from its CSV table. Skipped pairs are not part of
    /// the table.
    pub fn from_csv(text: &str, success_threshold: f64) -> Result<Self> {
        let bad = |d: String| Error::format("report", d);
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| bad(e.to_string()))?.iter().collect::<Vec<_>>().join(",");
        if header != CSV_HEADER {
            return Err(bad(format!("unexpected header `{header}`")));
        }
        let mut thresholds: Vec<f64> = Vec::new();
        let mut rows: Vec<PairRow> = Vec::new();
        for rec in rdr.deserialize::<CsvRow>() {
            let c = rec.map_err(|e| bad(e.to_string()))?;
            let new_pair = rows.last().is_none_or(|r| r.pair_id != c.pair_id);
            if new_pair {
                if let Some(prev) = rows.last() {
                    if prev.rr.len() != thresholds.len() {
                        return Err(bad(format!("pair `{}` has {} thresholds, expected {}", prev.pair_id, prev.rr.len(), thresholds.len())));
                    }
                }
                rows.push(PairRow {
                    pair_id: c.pair_id.clone(),
                    n_kp_a: c.n_kp_a,
                    n_kp_b: c.n_kp_b,
                    overlap_a: c.overlap_a,
                    overlap_b: c.overlap_b,
                    matches: c.matches,
                    corres: vec![],
                    correct: vec![],
                    rr: vec![],
                    ms: vec![],
                    registered: c.registered,
                    re_h: c.re_h,
                    re_m: c.re_m,
                });
            }
            let row = rows.last_mut().expect("row pushed above");
            let i = row.rr.len();
            if rows.len() == 1 {
                thresholds.push(c.threshold);
            } else if thresholds.get(i) != Some(&c.threshold) {
                return Err(bad(format!("pair `{}` has inconsistent thresholds", c.pair_id)));
            }
            let row = rows.last_mut().expect("row pushed above");
            row.corres.push(c.corres);
            row.correct.push(c.correct);
            row.rr.push(c.rr);
            row.ms.push(c.ms);
        }
        if let Some(last) = rows.last() {
            if last.rr.len() != thresholds.len() {
                return Err(bad(format!("pair `{}` is truncated", last.pair_id)));
            }
        }
        Ok(Self::new(thresholds, success_threshold, rows, vec![]))
    }

    /// Write `report.csv`, `summary.json` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let summary = serde_json::to_string_pretty(&self.summary()).expect("summary serializes") + "\n";
        let files = [("report.csv", self.to_csv()), ("summary.json", summary), ("summary.txt", self.summary_text())];
        let mut out = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            out.push(p);
        }
        Ok(out)
    }
}
