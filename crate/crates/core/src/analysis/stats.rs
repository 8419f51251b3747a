//! Agreement and significance statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

fn check_pair(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < min {
        return Err(Error::Input(format!("need at least {min} values, got {}", a.len())));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 2)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 {
        return Err(Error::UndefinedCorrelation("first series"));
    }
    if sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("second series"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Indices of the `k` largest values; ties prefer the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|i, j| values[*j].total_cmp(&values[*i]).then(i.cmp(j)));
    idx.truncate(k);
    idx
}

/// Intersection over union of the two top-`k` index sets.
pub fn top_k_iou(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("k must be positive".into()));
    }
    check_pair(a, b, k)?;
    let (ta, tb) = (top_k(a, k), top_k(b, k));
    let inter = ta.iter().filter(|i| tb.contains(i)).count();
    Ok(inter as f64 / (2 * k - inter) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// One-tailed paired t-test of `mean(a - b) > 0`.
pub fn paired_t_test_one_tailed(a: &[f64], b: &[f64]) -> Result<TTest> {
    check_pair(a, b, 2)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = d.len() as f64;
    let mean = d.iter().sum::<f64>() / m;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let df = m - 1.0;
    if var == 0.0 {
        if mean == 0.0 {
            return Ok(TTest { t: 0.0, df, p: 0.5 });
        }
        return Err(Error::Degenerate(format!("constant nonzero difference {mean}")));
    }
    let t = mean / (var.sqrt() / m.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok(TTest { t, df, p: dist.sf(t) })
}
