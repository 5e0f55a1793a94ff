//! Clustering accuracy under the best one-to-one label matching, and
//! normalized mutual information.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Minimum-cost perfect matching on a square cost matrix (Kuhn-Munkres with
/// row/column potentials, O(n³)). Returns the column assigned to each row.
pub fn hungarian(cost: &Mat) -> Result<Vec<usize>> {
    if !cost.is_square() {
        return Err(Error::dim(format!(
            "assignment needs a square cost matrix, got {}x{}",
            cost.rows(),
            cost.cols()
        )));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    let n = cost.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based internal arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    Ok(assignment)
}

pub fn assignment_cost(cost: &Mat, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum()
}

fn check_pair(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::dim(format!(
            "{} predicted labels vs {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::param("empty label vectors"));
    }
    Ok(())
}

/// Contingency table, `pred` labels on rows and `truth` labels on columns.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Vec<Vec<usize>> {
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    table
}

/// Fraction of points correctly labeled after optimally renaming `pred`.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth)?;
    let table = contingency(pred, truth);
    let k = table.len().max(table[0].len());
    let cost = Mat::from_fn(k, k, |r, c| {
        -(table.get(r).and_then(|row| row.get(c)).copied().unwrap_or(0) as f64)
    });
    let assignment = hungarian(&cost)?;
    let matched = -assignment_cost(&cost, &assignment);
    Ok(matched / pred.len() as f64)
}

/// Denominator used to normalize mutual information.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmiNormalization {
    /// `sqrt(H(U)·H(V))`
    #[default]
    Sqrt,
    Min,
    Max,
    /// `(H(U) + H(V)) / 2`
    Arithmetic,
}

impl std::str::FromStr for NmiNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" | "geometric" => Ok(NmiNormalization::Sqrt),
            "min" => Ok(NmiNormalization::Min),
            "max" => Ok(NmiNormalization::Max),
            "arithmetic" => Ok(NmiNormalization::Arithmetic),
            other => Err(Error::param(format!("unknown NMI normalization `{other}`"))),
        }
    }
}

fn entropy(counts: impl Iterator<Item = usize>, total: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    nmi_with(pred, truth, NmiNormalization::Sqrt)
}

pub fn nmi_with(pred: &[usize], truth: &[usize], norm: NmiNormalization) -> Result<f64> {
    check_pair(pred, truth)?;
    let table = contingency(pred, truth);
    let total = pred.len() as f64;
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..table[0].len()).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let hp = entropy(row_sums.iter().copied(), total);
    let ht = entropy(col_sums.iter().copied(), total);
    if hp == 0.0 && ht == 0.0 {
        // Both labelings are constant, hence identical partitions.
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (r, row) in table.iter().enumerate() {
        for (c, &n_rc) in row.iter().enumerate() {
            if n_rc == 0 {
                continue;
            }
            let p_rc = n_rc as f64 / total;
            mi += p_rc * (n_rc as f64 * total / (row_sums[r] as f64 * col_sums[c] as f64)).ln();
        }
    }
    let denom = match norm {
        NmiNormalization::Sqrt => (hp * ht).sqrt(),
        NmiNormalization::Min => hp.min(ht),
        NmiNormalization::Max => hp.max(ht),
        NmiNormalization::Arithmetic => 0.5 * (hp + ht),
    };
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}
