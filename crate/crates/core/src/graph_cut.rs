//! Sparse affinity graphs over a batch of embeddings, the relaxed
//! normalized-cut loss on soft memberships, and the classical spectral
//! (eigenvector + k-means) solution used as a reference clustering.
//!
//! The relaxed loss for memberships `Π` (n×k) on a graph with degrees `D`
//! and Laplacian `L = D − A` is
//!
//! ```text
//! Π̃ = Π V,   V = Diag(Σ_i π_iℓ d_i)^{-1/2}
//! L_ncut = tr(Π̃ᵀ L Π̃) + γ/2 · ‖Π̃ᵀ D Π̃ − I‖²_F
//! ```
//!
//! `V` depends on `Π` and is differentiated through.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::coding_rate::Membership;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::tensor::{dot, sym_eig, Mat};

/// Clusters whose volume falls below this are dropped from the loss.
pub const MIN_VOLUME: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum AffinityMode {
    /// Raw inner products `z_iᵀ z_j` (cosine similarity for unit columns).
    Cosine,
    /// `exp(−‖z_i − z_j‖² / (2σ²))`
    Gaussian { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinityConfig {
    /// Entries kept per row.
    pub sparsity: usize,
    pub mode: AffinityMode,
    /// Whether the diagonal competes for a top-s slot.
    pub self_loops: bool,
    /// Average with the transpose after top-s selection.
    pub symmetrize: bool,
}

impl AffinityConfig {
    pub fn cosine(sparsity: usize) -> Self {
        AffinityConfig {
            sparsity,
            mode: AffinityMode::Cosine,
            self_loops: true,
            symmetrize: true,
        }
    }

    pub fn gaussian(sparsity: usize, sigma: f64) -> Self {
        AffinityConfig {
            mode: AffinityMode::Gaussian { sigma },
            ..AffinityConfig::cosine(sparsity)
        }
    }
}

/// Sparse nonnegative affinity with cached degrees.
#[derive(Clone, Debug)]
pub struct AffinityGraph {
    n: usize,
    /// Per row, `(column, weight)` sorted by column; zero weights are not stored.
    neighbors: Vec<Vec<(usize, f64)>>,
    degrees: Vec<f64>,
    symmetric: bool,
}

impl AffinityGraph {
    /// Builds a graph from per-row entries. Duplicate columns are summed,
    /// nonpositive weights dropped.
    pub fn from_rows(mut rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        for (i, row) in rows.iter_mut().enumerate() {
            if let Some(&(j, _)) = row.iter().find(|(j, _)| *j >= n) {
                return Err(Error::dim(format!("row {i} references column {j} in a {n}-node graph")));
            }
            if row.iter().any(|(_, w)| !w.is_finite()) {
                return Err(Error::NonFinite(format!("affinity row {i}")));
            }
            row.sort_by_key(|&(j, _)| j);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for &(j, w) in row.iter() {
                match merged.last_mut() {
                    Some((lj, lw)) if *lj == j => *lw += w,
                    _ => merged.push((j, w)),
                }
            }
            merged.retain(|&(_, w)| w > 0.0);
            *row = merged;
        }
        let degrees = rows.iter().map(|r| r.iter().map(|&(_, w)| w).sum()).collect();
        let mut g = AffinityGraph {
            n,
            neighbors: rows,
            degrees,
            symmetric: false,
        };
        g.symmetric = g.check_symmetric();
        Ok(g)
    }

    pub fn from_dense(a: &Mat) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dim(format!("affinity must be square, got {}x{}", a.rows(), a.cols())));
        }
        let rows = (0..a.rows())
            .map(|i| {
                a.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(j, &w)| (j, w))
                    .collect()
            })
            .collect();
        Self::from_rows(rows)
    }

    fn check_symmetric(&self) -> bool {
        self.neighbors.iter().enumerate().all(|(i, row)| {
            row.iter().all(|&(j, w)| self.weight(j, i) == w)
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn nnz(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let row = &self.neighbors[i];
        row.binary_search_by_key(&j, |&(c, _)| c)
            .map(|p| row[p].1)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Mat {
        let mut a = Mat::zeros(self.n, self.n);
        for (i, row) in self.neighbors.iter().enumerate() {
            for &(j, w) in row {
                a[(i, j)] = w;
            }
        }
        a
    }

    /// Dense `L = D − A`.
    pub fn laplacian(&self) -> Mat {
        let mut l = self.to_dense().scale(-1.0);
        for (i, d) in self.degrees.iter().enumerate() {
            l[(i, i)] += d;
        }
        l
    }

    /// Dense `I − D^{-1/2} A_sym D^{-1/2}` with `A_sym = (A + Aᵀ)/2`.
    pub fn normalized_laplacian(&self) -> Result<Mat> {
        self.check_degrees()?;
        let n = self.n;
        let a = self.to_dense();
        let inv_sqrt: Vec<f64> = self.degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut l = Mat::identity(n);
        for i in 0..n {
            for j in 0..n {
                let w = 0.5 * (a[(i, j)] + a[(j, i)]);
                if w != 0.0 {
                    l[(i, j)] -= w * inv_sqrt[i] * inv_sqrt[j];
                }
            }
        }
        Ok(l)
    }

    /// `A · X`
    pub fn mul(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(self.n, x.cols());
        for (i, row) in self.neighbors.iter().enumerate() {
            let dst = out.row_mut(i);
            for &(j, w) in row {
                crate::tensor::axpy(w, x.row(j), dst);
            }
        }
        out
    }

    /// `Aᵀ · X`
    pub fn mul_transpose(&self, x: &Mat) -> Mat {
        if self.symmetric {
            return self.mul(x);
        }
        let mut out = Mat::zeros(self.n, x.cols());
        for (i, row) in self.neighbors.iter().enumerate() {
            for &(j, w) in row {
                crate::tensor::axpy(w, x.row(i), out.row_mut(j));
            }
        }
        out
    }

    pub fn check_degrees(&self) -> Result<()> {
        match self.degrees.iter().position(|&d| d.is_nan() || d <= 0.0) {
            Some(node) => Err(Error::DegenerateGraph { node }),
            None => Ok(()),
        }
    }

    /// Writes every stored entry as `i j w`, weights with 17 significant digits.
    pub fn write_triples<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (i, row) in self.neighbors.iter().enumerate() {
            for &(j, w) in row {
                writeln!(out, "{i} {j} {w:.16e}")?;
            }
        }
        Ok(())
    }
}

fn similarity_row(z: &Mat, sq_norms: &[f64], i: usize, mode: AffinityMode, out: &mut Vec<f64>) {
    let (d, n) = z.shape();
    out.clear();
    out.resize(n, 0.0);
    for r in 0..d {
        let zi = z[(r, i)];
        if zi == 0.0 {
            continue;
        }
        crate::tensor::axpy(zi, z.row(r), out);
    }
    if let AffinityMode::Gaussian { sigma } = mode {
        let denom = 2.0 * sigma * sigma;
        for (j, v) in out.iter_mut().enumerate() {
            let dist2 = (sq_norms[i] + sq_norms[j] - 2.0 * *v).max(0.0);
            *v = (-dist2 / denom).exp();
        }
    }
}

fn validate(cfg: &AffinityConfig, n: usize) -> Result<()> {
    if cfg.sparsity == 0 || cfg.sparsity > n {
        return Err(Error::param(format!(
            "sparsity s={} must lie in 1..={n}",
            cfg.sparsity
        )));
    }
    if let AffinityMode::Gaussian { sigma } = cfg.mode {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::param(format!("gaussian bandwidth must be positive, got {sigma}")));
        }
    }
    Ok(())
}

/// Per-row top-s entries of the clamped similarity matrix, before any
/// symmetrization. `z` is `d×n` with one point per column.
pub fn top_s_rows(z: &Mat, cfg: &AffinityConfig) -> Result<Vec<Vec<(usize, f64)>>> {
    let n = z.cols();
    validate(cfg, n)?;
    if !z.is_finite() {
        return Err(Error::NonFinite("affinity input".into()));
    }
    let sq_norms = z.col_norms().iter().map(|v| v * v).collect::<Vec<_>>();
    let mut sims = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        similarity_row(z, &sq_norms, i, cfg.mode, &mut sims);
        let mut cand: Vec<(usize, f64)> = sims
            .iter()
            .enumerate()
            .filter(|&(j, _)| cfg.self_loops || j != i)
            .map(|(j, &w)| (j, w.max(0.0)))
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        let keep = cfg.sparsity.min(cand.len());
        if keep < cand.len() {
            cand.select_nth_unstable_by(keep, order);
            cand.truncate(keep);
        }
        cand.retain(|&(_, w)| w > 0.0);
        cand.sort_by_key(|&(j, _)| j);
        rows.push(cand);
    }
    Ok(rows)
}

/// `P_s(ZᵀZ)` (or the Gaussian-kernel variant) as a sparse graph.
pub fn build_affinity(z: &Mat, cfg: &AffinityConfig) -> Result<AffinityGraph> {
    let rows = top_s_rows(z, cfg)?;
    if !cfg.symmetrize {
        return AffinityGraph::from_rows(rows);
    }
    let n = rows.len();
    let mut sym: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, row) in rows.iter().enumerate() {
        for &(j, w) in row {
            sym[i].push((j, 0.5 * w));
            sym[j].push((i, 0.5 * w));
        }
    }
    let g = AffinityGraph::from_rows(sym)?;
    debug_assert!(g.is_symmetric());
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct NcutOutput {
    pub value: f64,
    pub trace_term: f64,
    pub penalty_term: f64,
    pub grad_pi: Mat,
}

/// Soft cluster volumes `Σ_i π_iℓ d_i`.
pub fn cluster_volumes(g: &AffinityGraph, m: &Membership) -> Vec<f64> {
    let pi = m.pi();
    let mut vol = vec![0.0; pi.cols()];
    for (i, d) in g.degrees().iter().enumerate() {
        crate::tensor::axpy(*d, pi.row(i), &mut vol);
    }
    vol
}

/// Relaxed normalized cut and its gradient with respect to `Π`.
pub fn ncut_loss(g: &AffinityGraph, m: &Membership, gamma: f64) -> Result<NcutOutput> {
    let n = g.len();
    if m.len() != n {
        return Err(Error::dim(format!(
            "membership has {} rows but the graph has {n} nodes",
            m.len()
        )));
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::param(format!("gamma must be nonnegative, got {gamma}")));
    }
    g.check_degrees()?;
    let pi = m.pi();
    let k = pi.cols();
    let deg = g.degrees();

    let vol = cluster_volumes(g, m);
    let active: Vec<usize> = (0..k).filter(|&l| vol[l] >= MIN_VOLUME).collect();
    let v: Vec<f64> = vol.iter().map(|&x| if x >= MIN_VOLUME { 1.0 / x.sqrt() } else { 0.0 }).collect();

    // L Π + Lᵀ Π = 2 D Π − A Π − Aᵀ Π
    let a_pi = g.mul(pi);
    let at_pi = g.mul_transpose(pi);
    let mut grad_pi = Mat::zeros(n, k);

    let mut trace_term = 0.0;
    for &l in &active {
        let mut quad = 0.0;
        for i in 0..n {
            let p = pi[(i, l)];
            quad += p * (deg[i] * p - a_pi[(i, l)]);
        }
        trace_term += quad / vol[l];
        let inv_vol = 1.0 / vol[l];
        let shift = quad * inv_vol * inv_vol;
        for i in 0..n {
            let sym_lpi = 2.0 * deg[i] * pi[(i, l)] - a_pi[(i, l)] - at_pi[(i, l)];
            grad_pi[(i, l)] = sym_lpi * inv_vol - shift * deg[i];
        }
    }

    // B = Πᵀ D Π over active clusters, E = V B V − I
    let ka = active.len();
    let mut b = Mat::zeros(ka, ka);
    for i in 0..n {
        for (p, &a) in active.iter().enumerate() {
            let wa = deg[i] * pi[(i, a)];
            if wa == 0.0 {
                continue;
            }
            for (q, &c) in active.iter().enumerate() {
                b[(p, q)] += wa * pi[(i, c)];
            }
        }
    }
    let mut e = Mat::zeros(ka, ka);
    let mut penalty_term = 0.0;
    for p in 0..ka {
        for q in 0..ka {
            let val = v[active[p]] * v[active[q]] * b[(p, q)] - if p == q { 1.0 } else { 0.0 };
            e[(p, q)] = val;
            penalty_term += val * val;
        }
    }
    penalty_term *= 0.5 * gamma;

    if gamma > 0.0 {
        // Through B with V fixed: 2γ d_i v_ℓ Σ_b E_ℓb v_b π_ib.
        // Through V: −γ d_i v_ℓ³ Σ_b E_ℓb B_ℓb v_b.
        let mut ev = vec![0.0; ka];
        let mut via_v = vec![0.0; ka];
        for p in 0..ka {
            let vp = v[active[p]];
            via_v[p] = gamma * vp * vp * vp
                * (0..ka).map(|q| e[(p, q)] * b[(p, q)] * v[active[q]]).sum::<f64>();
        }
        for i in 0..n {
            for (p, evp) in ev.iter_mut().enumerate() {
                *evp = (0..ka).map(|q| e[(p, q)] * v[active[q]] * pi[(i, active[q])]).sum();
            }
            for p in 0..ka {
                let l = active[p];
                grad_pi[(i, l)] += deg[i] * (2.0 * gamma * v[l] * ev[p] - via_v[p]);
            }
        }
    }

    Ok(NcutOutput {
        value: trace_term + penalty_term,
        trace_term,
        penalty_term,
        grad_pi,
    })
}

/// Classical normalized-cut spectral clustering: the `k` eigenvectors of the
/// normalized Laplacian with the smallest eigenvalues, rows normalized to
/// unit length, clustered by k-means (k-means++, 20 restarts, best inertia).
pub fn spectral_oracle(g: &AffinityGraph, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = g.len();
    if k == 0 || k > n {
        return Err(Error::param(format!("spectral clustering with k={k} on {n} nodes")));
    }
    g.check_degrees()?;
    if k == 1 {
        return Ok(vec![0; n]);
    }
    let eig = sym_eig(&g.normalized_laplacian()?)?;
    let mut emb = Mat::from_fn(n, k, |i, c| eig.vectors[(i, c)]);
    for i in 0..n {
        let row = emb.row_mut(i);
        let norm = dot(row, row).sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(kmeans(&emb, &KMeansConfig::new(k, seed))?.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two 3-cliques (weight 1, with self-loops), no edges between them.
    fn two_cliques() -> AffinityGraph {
        let a = Mat::from_fn(6, 6, |i, j| if (i < 3) == (j < 3) { 1.0 } else { 0.0 });
        AffinityGraph::from_dense(&a).unwrap()
    }

    #[test]
    fn identical_columns_give_all_ones() {
        let z = Mat::from_fn(3, 5, |r, _| if r == 0 { 1.0 } else { 0.0 });
        let g = build_affinity(&z, &AffinityConfig::cosine(5)).unwrap();
        assert!(g.is_symmetric());
        assert_eq!(g.to_dense(), Mat::from_fn(5, 5, |_, _| 1.0));
        assert!(g.degrees().iter().all(|&d| d == 5.0));
    }

    #[test]
    fn orthogonal_groups_have_no_cross_edges() {
        let z = Mat::from_fn(2, 6, |r, c| if (c < 3) == (r == 0) { 1.0 } else { 0.0 });
        for s in 1..=6 {
            let g = build_affinity(&z, &AffinityConfig::cosine(s)).unwrap();
            for i in 0..6 {
                for &(j, _) in g.neighbors(i) {
                    assert_eq!(i < 3, j < 3, "s={s} edge {i}-{j}");
                }
            }
        }
    }

    #[test]
    fn self_loop_flag() {
        let z = Mat::from_fn(2, 4, |r, c| if r == 0 { 1.0 } else { c as f64 * 0.1 });
        let mut cfg = AffinityConfig::cosine(2);
        let with = top_s_rows(&z, &cfg).unwrap();
        assert!(with.iter().enumerate().any(|(i, r)| r.iter().any(|&(j, _)| j == i)));
        cfg.self_loops = false;
        let without = top_s_rows(&z, &cfg).unwrap();
        assert!(without.iter().enumerate().all(|(i, r)| r.iter().all(|&(j, _)| j != i)));
        assert!(without.iter().all(|r| r.len() == 2));
    }

    #[test]
    fn gaussian_mode_weights() {
        let z = Mat::from_rows(&[vec![0.0, 1.0, 3.0]]).unwrap();
        let cfg = AffinityConfig {
            symmetrize: false,
            ..AffinityConfig::gaussian(3, 1.0)
        };
        let g = build_affinity(&z, &cfg).unwrap();
        assert!((g.weight(0, 1) - (-0.5_f64).exp()).abs() < 1e-15);
        assert!((g.weight(0, 2) - (-4.5_f64).exp()).abs() < 1e-15);
        assert_eq!(g.weight(1, 1), 1.0);
    }

    #[test]
    fn parameter_errors() {
        let z = Mat::identity(3);
        assert!(matches!(build_affinity(&z, &AffinityConfig::cosine(4)), Err(Error::Parameter(_))));
        assert!(matches!(build_affinity(&z, &AffinityConfig::cosine(0)), Err(Error::Parameter(_))));
        assert!(matches!(
            build_affinity(&z, &AffinityConfig::gaussian(2, 0.0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn perfect_cut_has_zero_trace() {
        let g = two_cliques();
        let m = Membership::one_hot(&[0, 0, 0, 1, 1, 1], 2).unwrap();
        let out = ncut_loss(&g, &m, 0.0).unwrap();
        assert!(out.value.abs() < 1e-15);
        // With γ > 0 the scaled hard membership is D-orthonormal.
        let out = ncut_loss(&g, &m, 5.0).unwrap();
        assert!(out.penalty_term.abs() < 1e-15);
        assert!(out.value.abs() < 1e-15);
    }

    #[test]
    fn isolated_node_is_degenerate() {
        let mut a = Mat::identity(3);
        a[(2, 2)] = 0.0;
        let g = AffinityGraph::from_dense(&a).unwrap();
        let m = Membership::one_hot(&[0, 1, 1], 2).unwrap();
        assert!(matches!(ncut_loss(&g, &m, 1.0), Err(Error::DegenerateGraph { node: 2 })));
        assert!(matches!(spectral_oracle(&g, 2, 0), Err(Error::DegenerateGraph { node: 2 })));
    }

    #[test]
    fn empty_cluster_is_dropped() {
        let g = two_cliques();
        let labels = [0, 0, 0, 1, 1, 1];
        let a = ncut_loss(&g, &Membership::one_hot(&labels, 2).unwrap(), 3.0).unwrap();
        let b = ncut_loss(&g, &Membership::one_hot(&labels, 3).unwrap(), 3.0).unwrap();
        assert_eq!(a.value, b.value);
        assert!((0..6).all(|i| b.grad_pi[(i, 2)] == 0.0));
    }

    #[test]
    fn spectral_on_cliques() {
        let g = two_cliques();
        let labels = spectral_oracle(&g, 2, 1).unwrap();
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[1], labels[2]);
        assert_eq!(labels[3], labels[4]);
        assert_eq!(labels[4], labels[5]);
        assert_ne!(labels[0], labels[3]);
        assert_eq!(spectral_oracle(&g, 1, 1).unwrap(), vec![0; 6]);
        assert!(spectral_oracle(&g, 7, 1).is_err());
    }

    #[test]
    fn triples_format() {
        let g = two_cliques();
        let mut buf = Vec::new();
        g.write_triples(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), g.nnz());
        assert_eq!(text.lines().next().unwrap(), "0 0 1.0000000000000000e0");
    }
}
