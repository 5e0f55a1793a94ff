//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use cgmcr::coding_rate::{cluster_rate, rate, EmbeddingBatch, Membership};
use cgmcr::graph_cut::{build_affinity, ncut_loss, AffinityConfig, AffinityGraph};
use cgmcr::network::{Architecture, Mode, ModelParams};
use cgmcr::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `d×n` with unit-norm columns.
pub fn unit_columns(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut z = gaussian(d, n, rng);
    let norms = z.col_norms();
    for r in 0..d {
        for c in 0..n {
            z[(r, c)] /= norms[c];
        }
    }
    z
}

/// Row-wise softmax of Gaussian logits scaled by `spread`.
pub fn random_membership(n: usize, k: usize, spread: f64, rng: &mut ChaCha8Rng) -> Membership {
    let logits = gaussian(n, k, rng).scale(spread);
    Membership::new(cgmcr::network::tempered_softmax(&logits, 1.0)).unwrap()
}

pub fn random_graph(n: usize, s: usize, rng: &mut ChaCha8Rng) -> AffinityGraph {
    let z = unit_columns(4, n, rng);
    build_affinity(&z, &AffinityConfig::cosine(s)).unwrap()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn inner(a: &Mat, b: &Mat) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error between analytic and central-difference directional
/// derivatives of `f` at `x`, over `dirs` random unit directions and
/// `coords` random coordinate directions.
pub fn fd_check(
    x: &Mat,
    grad: &Mat,
    f: &dyn Fn(&Mat) -> f64,
    dirs: usize,
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let (r, c) = x.shape();
    let mut worst: f64 = 0.0;
    let mut probe = |v: &Mat| {
        let plus = x.add(&v.scale(FD_STEP)).unwrap();
        let minus = x.sub(&v.scale(FD_STEP)).unwrap();
        let fd = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        let an = inner(grad, v);
        let scale = grad.frobenius_norm() * v.frobenius_norm();
        worst = worst.max(rel_err(an, fd, 1e-3 * scale.max(1e-8)));
    };
    for _ in 0..dirs {
        let v = gaussian(r, c, rng);
        let v = v.scale(1.0 / v.frobenius_norm());
        probe(&v);
    }
    for _ in 0..coords {
        let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
        let v = Mat::from_fn(r, c, |a, b| if (a, b) == (i, j) { 1.0 } else { 0.0 });
        probe(&v);
    }
    worst
}

/// Random instance sizes in the ranges d∈[4,64], n∈[8,128], k∈[2,10].
pub fn random_sizes(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(4..=64), rng.random_range(8..=128), rng.random_range(2..=10))
}

pub fn rate_instance(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (d, n, _) = random_sizes(&mut rng);
    let eps = rng.random_range(0.2..1.5);
    let z = unit_columns(d, n, &mut rng);
    let out = rate(&EmbeddingBatch::new(z.clone(), eps).unwrap()).unwrap();
    let f = |zz: &Mat| rate(&EmbeddingBatch::new(zz.clone(), eps).unwrap()).unwrap().value;
    fd_check(&z, &out.grad_z, &f, 6, 6, &mut rng)
}

pub fn cluster_rate_instance(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (d, n, k) = random_sizes(&mut rng);
    let eps = rng.random_range(0.2..1.5);
    let z = unit_columns(d, n, &mut rng);
    let m = random_membership(n, k, 2.0, &mut rng);
    let out = cluster_rate(&EmbeddingBatch::new(z.clone(), eps).unwrap(), &m).unwrap();
    let pi = m.pi().clone();
    let fz = |zz: &Mat| {
        cluster_rate(&EmbeddingBatch::new(zz.clone(), eps).unwrap(), &m)
            .unwrap()
            .value
    };
    let zb = EmbeddingBatch::new(z.clone(), eps).unwrap();
    let fp = |pp: &Mat| cluster_rate(&zb, &Membership::new_unchecked(pp.clone())).unwrap().value;
    let ez = fd_check(&z, &out.grad_z, &fz, 4, 4, &mut rng);
    let ep = fd_check(&pi, &out.grad_pi, &fp, 4, 4, &mut rng);
    ez.max(ep)
}

pub fn ncut_instance(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let n = rng.random_range(8..=80);
    let k = rng.random_range(2..=10.min(n / 2));
    let s = rng.random_range(2..=n.min(12));
    let gamma = [0.0, 1.0, 70.0][rng.random_range(0..3)];
    let g = random_graph(n, s, &mut rng);
    let m = random_membership(n, k, 2.0, &mut rng);
    let out = ncut_loss(&g, &m, gamma).unwrap();
    let f = |pp: &Mat| ncut_loss(&g, &Membership::new_unchecked(pp.clone()), gamma).unwrap().value;
    fd_check(m.pi(), &out.grad_pi, &f, 6, 6, &mut rng)
}

pub fn tiny_arch(rng: &mut ChaCha8Rng) -> Architecture {
    Architecture {
        input_dim: 6,
        hidden: 8,
        depth: rng.random_range(1..=2),
        embed_dim: 4,
        clusters: 3,
        tau: rng.random_range(0.5..2.0),
    }
}

/// Composed loss `⟨G_z, Z⟩ + ⟨G_π, Π⟩` through the whole network; the
/// gradient of every scalar parameter is compared against central
/// differences. Train mode uses fixed Gumbel noise and batch statistics.
/// Returns the worst relative error, measured against the gradient norm.
pub fn network_instance(seed: u64, mode: Mode) -> f64 {
    let mut rng = rng(seed);
    let arch = tiny_arch(&mut rng);
    let n = 10;
    let mut model = ModelParams::new(arch, seed).unwrap();
    // Perturb batchnorm so scale/shift and running stats are non-trivial.
    for (g, b) in model.bn.gamma.iter_mut().zip(model.bn.beta.iter_mut()) {
        *g = rng.random_range(0.5..1.5);
        *b = rng.random_range(-0.5..0.5);
    }
    for (m, v) in model.bn.running_mean.iter_mut().zip(model.bn.running_var.iter_mut()) {
        *m = rng.random_range(-0.5..0.5);
        *v = rng.random_range(0.5..2.0);
    }
    let x = gaussian(n, arch.input_dim, &mut rng);
    let noise = cgmcr::network::sample_gumbel(n, arch.clusters, &mut rng);
    let gz = gaussian(arch.embed_dim, n, &mut rng);
    let gp = gaussian(n, arch.clusters, &mut rng);
    let run = |m: &ModelParams| match mode {
        Mode::Train => m.forward_with_noise(&x, &noise).unwrap(),
        Mode::Eval => m.forward_eval(&x).unwrap(),
    };
    let loss = |m: &ModelParams| {
        let (out, _) = run(m);
        inner(&gz, &out.z) + inner(&gp, out.membership.pi())
    };
    let (_, cache) = run(&model);
    let grads = model.backward(&cache, &gz, &gp).unwrap();
    let gnorm = grads.values.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let mut worst: f64 = 0.0;
    let n_tensors = grads.values.len();
    for t in 0..n_tensors {
        for i in 0..grads.values[t].len() {
            let mut plus = model.clone();
            plus.tensors_mut()[t][i] += FD_STEP;
            let mut minus = model.clone();
            minus.tensors_mut()[t][i] -= FD_STEP;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads.values[t][i], fd, 1e-3 * gnorm.max(1e-8)));
        }
    }
    worst
}

/// Brute-force `Σ_ℓ cut(C_ℓ, C̄_ℓ) / vol(C_ℓ)` by summing edges.
pub fn brute_force_ncut(g: &AffinityGraph, labels: &[usize], k: usize) -> f64 {
    let n = g.len();
    let mut total = 0.0;
    for l in 0..k {
        let mut cut = 0.0;
        let mut vol = 0.0;
        for i in 0..n {
            if labels[i] != l {
                continue;
            }
            for j in 0..n {
                let w = g.weight(i, j);
                vol += w;
                if labels[j] != l {
                    cut += w;
                }
            }
        }
        if vol > 0.0 {
            total += cut / vol;
        }
    }
    total
}

/// Every permutation of `0..k` (Heap's algorithm).
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k.is_multiple_of(2) {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    let mut a: Vec<usize> = (0..k).collect();
    let mut out = Vec::new();
    heap(k, &mut a, &mut out);
    out
}

pub fn brute_force_assignment_cost(cost: &Mat) -> f64 {
    permutations(cost.rows())
        .iter()
        .map(|p| p.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Block-diagonal affinity: `k` cliques of random sizes with random positive
/// weights, nodes shuffled. Returns the graph and the component labels.
pub fn block_diagonal(k: usize, n: usize, rng: &mut ChaCha8Rng) -> (AffinityGraph, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            if labels[i] == labels[j] {
                let w = rng.random_range(0.2..1.0);
                a[(i, j)] = w;
                a[(j, i)] = w;
            }
        }
    }
    (AffinityGraph::from_dense(&a).unwrap(), labels)
}

/// Independent symmetric eigen-solver (cyclic Jacobi rotations).
pub fn jacobi_eigenvalues(m: &Mat) -> Vec<f64> {
    let n = m.rows();
    let mut a = m.clone();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}
