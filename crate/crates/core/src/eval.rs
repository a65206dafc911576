//! Scoring predicted interactions against ground truth.
//!
//! A prediction is a nonnegative score per feature (a factor's MI row); a
//! ground-truth interaction is a set of features. Two metrics (cosine
//! distance and average precision) are combined by two protocols: `group`
//! matches every truth to its best prediction, `topk` matches each of the
//! top-k predictions to its best truth.

use std::collections::HashSet;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_ZERO_TOL: f64 = 1e-12;

/// Feature scores of one latent factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiPrediction {
    pub scores: Vec<f64>,
    /// `(cluster, factor)` the scores came from.
    pub source: (usize, usize),
}

impl HoiPrediction {
    pub fn new(scores: Vec<f64>, source: (usize, usize)) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::data("prediction scores must be finite and nonnegative"));
        }
        Ok(HoiPrediction { scores, source })
    }
}

/// Binary membership vector of one true interaction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundTruthHoi {
    pub members: Vec<bool>,
}

impl GroundTruthHoi {
    pub fn from_indices(p: usize, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::data("ground-truth interaction has no members"));
        }
        let mut members = vec![false; p];
        for &i in indices {
            if i >= p {
                return Err(Error::data(format!("member index {i} out of range for p = {p}")));
            }
            members[i] = true;
        }
        Ok(GroundTruthHoi { members })
    }

    pub fn indices(&self) -> Vec<usize> {
        self.members.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn indicator(&self) -> Vec<f64> {
        self.members.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub cosine: f64,
    pub aucprc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Group,
    Topk,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group" => Ok(Protocol::Group),
            "topk" => Ok(Protocol::Topk),
            other => Err(Error::Config(format!("unknown scoring mode {other:?}"))),
        }
    }
}

/// Serialized form of a score: `{"protocol", "cosine", "aucprc", "k"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub protocol: Protocol,
    pub cosine: f64,
    pub aucprc: f64,
    /// Predictions averaged over (`topk`) or truths averaged over (`group`).
    pub k: usize,
}

/// Ground truth on disk: `{"p": p, "hois": [[member indices], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub p: usize,
    pub hois: Vec<Vec<usize>>,
}

impl TruthFile {
    pub fn from_hois(hois: &[GroundTruthHoi]) -> Result<Self> {
        let p = hois.first().map(|g| g.len()).ok_or_else(|| Error::data("empty truth set"))?;
        Ok(TruthFile {
            p,
            hois: hois.iter().map(|g| g.indices()).collect(),
        })
    }

    pub fn to_hois(&self) -> Result<Vec<GroundTruthHoi>> {
        self.hois.iter().map(|h| GroundTruthHoi::from_indices(self.p, h)).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TruthFile = serde_json::from_str(&text)?;
        file.to_hois()?;
        Ok(file)
    }
}

/// Unique nonzero patterns of the rows of `cov`, in order of first appearance.
pub fn extract_true_hois(cov: ArrayView2<'_, f64>, zero_tol: f64) -> Result<Vec<GroundTruthHoi>> {
    if cov.nrows() != cov.ncols() {
        return Err(Error::invalid("covariance matrix must be square"));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in cov.outer_iter() {
        let g = GroundTruthHoi {
            members: row.iter().map(|v| v.abs() > zero_tol).collect(),
        };
        if g.members.iter().any(|&m| m) && seen.insert(g.clone()) {
            out.push(g);
        }
    }
    Ok(out)
}

fn check_len(f: &[f64], g: &GroundTruthHoi) -> Result<()> {
    if f.len() != g.len() {
        return Err(Error::invalid(format!(
            "prediction has {} features, truth has {}",
            f.len(),
            g.len()
        )));
    }
    Ok(())
}

/// `1 - <f, g> / (|f| |g|)`; 1 when exactly one side is zero.
pub fn cosine_distance(f: &[f64], g: &GroundTruthHoi) -> Result<f64> {
    check_len(f, g)?;
    let mut dot = 0.0f64;
    let mut ff = 0.0f64;
    let mut gg = 0.0f64;
    for (&x, &m) in f.iter().zip(&g.members) {
        ff += x * x;
        if m {
            dot += x;
            gg += 1.0;
        }
    }
    match (ff > 0.0, gg > 0.0) {
        (false, false) => Err(Error::invalid("cosine distance between two zero vectors")),
        (true, true) => Ok((1.0 - dot / (ff * gg).sqrt()).clamp(0.0, 1.0)),
        _ => Ok(1.0),
    }
}

/// Feature indices by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Step-wise average precision, `sum_k (R_k - R_{k-1}) P_k`.
pub fn auc_prc(f: &[f64], g: &GroundTruthHoi) -> Result<f64> {
    check_len(f, g)?;
    let positives = g.members.iter().filter(|&&m| m).count();
    if positives == 0 {
        return Err(Error::invalid("ground truth has no positives"));
    }
    let npos = positives as f64;
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut recall_prev = 0.0;
    for (pos, &i) in ranking(f).iter().enumerate() {
        if g.members[i] {
            tp += 1;
            let recall = tp as f64 / npos;
            ap += (recall - recall_prev) * (tp as f64 / (pos + 1) as f64);
            recall_prev = recall;
        }
    }
    Ok(ap)
}

fn check_sets<F: AsRef<[f64]>>(preds: &[F], truths: &[GroundTruthHoi]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    if truths.is_empty() {
        return Err(Error::invalid("no ground-truth interactions to score against"));
    }
    Ok(())
}

/// Average over truths of the best cosine and, independently, the best AP.
pub fn group_score<F: AsRef<[f64]>>(preds: &[F], truths: &[GroundTruthHoi]) -> Result<ScorePair> {
    check_sets(preds, truths)?;
    let mut cos_sum = 0.0;
    let mut ap_sum = 0.0;
    for g in truths {
        let mut best_cos: f64 = 1.0;
        let mut best_ap: f64 = 0.0;
        for f in preds {
            best_cos = best_cos.min(cosine_distance(f.as_ref(), g)?);
            best_ap = best_ap.max(auc_prc(f.as_ref(), g)?);
        }
        cos_sum += best_cos;
        ap_sum += best_ap;
    }
    let n = truths.len() as f64;
    Ok(ScorePair {
        cosine: cos_sum / n,
        aucprc: ap_sum / n,
    })
}

/// Average over the first `k = min(|F|, |G|)` predictions of their best match.
///
/// `preds` must already be in importance order.
pub fn topk_score<F: AsRef<[f64]>>(preds: &[F], truths: &[GroundTruthHoi]) -> Result<(ScorePair, usize)> {
    check_sets(preds, truths)?;
    let k = preds.len().min(truths.len());
    let mut cos_sum = 0.0;
    let mut ap_sum = 0.0;
    for f in &preds[..k] {
        let mut best_cos: f64 = 1.0;
        let mut best_ap: f64 = 0.0;
        for g in truths {
            best_cos = best_cos.min(cosine_distance(f.as_ref(), g)?);
            best_ap = best_ap.max(auc_prc(f.as_ref(), g)?);
        }
        cos_sum += best_cos;
        ap_sum += best_ap;
    }
    Ok((
        ScorePair {
            cosine: cos_sum / k as f64,
            aucprc: ap_sum / k as f64,
        },
        k,
    ))
}

pub fn score<F: AsRef<[f64]>>(protocol: Protocol, preds: &[F], truths: &[GroundTruthHoi]) -> Result<Score> {
    let (pair, k) = match protocol {
        Protocol::Group => (group_score(preds, truths)?, truths.len()),
        Protocol::Topk => topk_score(preds, truths)?,
    };
    Ok(Score {
        protocol,
        cosine: pair.cosine,
        aucprc: pair.aucprc,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn truth(bits: &[u8]) -> GroundTruthHoi {
        GroundTruthHoi {
            members: bits.iter().map(|&b| b == 1).collect(),
        }
    }

    #[test]
    fn extract_patterns() {
        let mut block = Array2::<f64>::eye(4);
        block[[0, 1]] = 0.5;
        block[[1, 0]] = 0.5;
        block[[2, 3]] = 0.5;
        block[[3, 2]] = 0.5;
        let hois = extract_true_hois(block.view(), DEFAULT_ZERO_TOL).unwrap();
        assert_eq!(hois, vec![truth(&[1, 1, 0, 0]), truth(&[0, 0, 1, 1])]);
        let diag = extract_true_hois(Array2::<f64>::eye(5).view(), DEFAULT_ZERO_TOL).unwrap();
        assert_eq!(diag.len(), 5);
        assert!(diag.iter().all(|g| g.indices().len() == 1));
    }

    #[test]
    fn cosine_cases() {
        let g = truth(&[1, 0, 0]);
        assert_abs_diff_eq!(cosine_distance(&[1.0, 1.0, 0.0], &g).unwrap(), 1.0 - 0.5f64.sqrt(), epsilon = 1e-15);
        assert_eq!(cosine_distance(&[3.0, 3.0, 0.0], &truth(&[1, 1, 0])).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[0.0, 0.0, 2.0], &g).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[0.0, 0.0, 0.0], &g).unwrap(), 1.0);
        assert!(cosine_distance(&[0.0, 0.0, 0.0], &truth(&[0, 0, 0])).is_err());
        assert!(cosine_distance(&[1.0], &g).is_err());
    }

    #[test]
    fn auc_prc_cases() {
        let ap = auc_prc(&[0.9, 0.8, 0.7, 0.6], &truth(&[1, 0, 1, 0])).unwrap();
        assert_abs_diff_eq!(ap, 0.5 + 0.5 * 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ap, 0.8333, epsilon = 1e-4);
        assert_eq!(auc_prc(&[0.1, 0.9, 0.8, 0.0], &truth(&[0, 1, 1, 0])).unwrap(), 1.0);
        assert_eq!(auc_prc(&[0.3, 0.1, 0.2], &truth(&[1, 1, 1])).unwrap(), 1.0);
        assert!(auc_prc(&[0.3, 0.1], &truth(&[0, 0])).is_err());
        // ties resolve by index: feature 0 ranks first
        assert_eq!(auc_prc(&[0.5, 0.5], &truth(&[0, 1])).unwrap(), 0.5);
    }

    #[test]
    fn exact_matches_score_perfectly() {
        let truths = vec![truth(&[1, 1, 0, 0]), truth(&[0, 0, 1, 1])];
        let preds: Vec<Vec<f64>> = truths.iter().map(|g| g.indicator()).collect();
        let s = group_score(&preds, &truths).unwrap();
        assert_eq!((s.cosine, s.aucprc), (0.0, 1.0));
        let (t, k) = topk_score(&preds, &truths).unwrap();
        assert_eq!((t.cosine, t.aucprc, k), (0.0, 1.0, 2));
    }

    #[test]
    fn topk_k_values() {
        let truths: Vec<GroundTruthHoi> = (0..5).map(|i| GroundTruthHoi::from_indices(5, &[i]).unwrap()).collect();
        let seven: Vec<Vec<f64>> = (0..7).map(|i| vec![1.0 + i as f64; 5]).collect();
        assert_eq!(topk_score(&seven, &truths).unwrap().1, 5);
        assert_eq!(topk_score(&seven[..3], &truths).unwrap().1, 3);
    }

    #[test]
    fn single_prediction_group() {
        let truths = vec![truth(&[1, 0, 0]), truth(&[0, 1, 0]), truth(&[0, 0, 1])];
        let f = vec![vec![3.0, 2.0, 1.0]];
        let s = group_score(&f, &truths).unwrap();
        let mut cos = 0.0;
        let mut ap = 0.0;
        for g in &truths {
            cos += cosine_distance(&f[0], g).unwrap();
            ap += auc_prc(&f[0], g).unwrap();
        }
        assert_eq!(s.cosine, cos / 3.0);
        assert_eq!(s.aucprc, ap / 3.0);
    }

    #[test]
    fn empty_sets_rejected() {
        let none: Vec<Vec<f64>> = vec![];
        assert!(group_score(&none, &[truth(&[1])]).is_err());
        assert!(topk_score(&[vec![1.0]], &[]).is_err());
    }

    #[test]
    fn truth_file_round_trip() {
        let hois = vec![truth(&[1, 1, 0]), truth(&[0, 0, 1])];
        let file = TruthFile::from_hois(&hois).unwrap();
        assert_eq!(file.hois, vec![vec![0, 1], vec![2]]);
        let text = serde_json::to_string(&file).unwrap();
        let back: TruthFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_hois().unwrap(), hois);
        assert!(GroundTruthHoi::from_indices(2, &[3]).is_err());
    }

    #[test]
    fn score_json_shape() {
        let s = score(Protocol::Topk, &[vec![1.0, 0.0]], &[truth(&[1, 0])]).unwrap();
        let v: serde_json::Value = serde_json::to_value(s).unwrap();
        assert_eq!(v["protocol"], "topk");
        assert_eq!(v["k"], 1);
        assert_eq!(v["aucprc"], 1.0);
        assert!("median".parse::<Protocol>().is_err());
    }
}
