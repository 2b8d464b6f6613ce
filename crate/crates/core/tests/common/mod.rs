//! Shared helpers for the integration tests: finite-difference gradient
//! checking and independent brute-force oracles. The oracles deliberately
//! re-derive every formula with plain loops so they share no code with the
//! graph implementations they check.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pulsekd_core::tensor::Tensor;
use pulsekd_core::graph::{Graph, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_rows(b: usize, d: usize, rng: &mut ChaCha8Rng, scale: f64) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| (0..d).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

/// Reduce any tensor-valued node to a scalar through a fixed random
/// weighting, so gradient checks exercise every output coordinate with
/// distinct sensitivities.
pub fn scalarize(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let mut r = rng(seed ^ 0x5ca1ab1e);
    let w = g.constant(random_tensor(&shape, &mut r, 1.0));
    g.dot(y, w)
}

/// Compare an analytic gradient against central finite differences on
/// randomly probed coordinates. `value` recomputes the scalar objective
/// from the flattened input vector. Returns the max relative error over
/// the probes; coordinates where both gradients are below 1e-6 count as
/// exact.
pub fn fd_max_rel_err(
    x0: &[f64],
    ad_grad: &[f64],
    value: &dyn Fn(&[f64]) -> f64,
    n_probes: usize,
    seed: u64,
) -> f64 {
    assert_eq!(x0.len(), ad_grad.len());
    let central = |i: usize, h: f64| -> f64 {
        let mut xp = x0.to_vec();
        xp[i] = x0[i] + h;
        let fp = value(&xp);
        xp[i] = x0[i] - h;
        let fm = value(&xp);
        (fp - fm) / (2.0 * h)
    };
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0usize;
    let mut draws = 0usize;
    while done < n_probes && draws < 4 * n_probes {
        draws += 1;
        let i = r.gen_range(0..x0.len());
        let h = 1e-5 * x0[i].abs().max(1.0);
        let fd_coarse = central(i, h);
        let fd = central(i, h / 4.0);
        // Central differences are only meaningful where the objective is
        // locally smooth; when two step sizes disagree the probe sits on a
        // kink (relu/maxpool boundary) and is redrawn.
        let fd_scale = fd_coarse.abs().max(fd.abs());
        if fd_scale > 1e-9 && (fd_coarse - fd).abs() / fd_scale > 5e-4 {
            continue;
        }
        done += 1;
        let ad = ad_grad[i];
        let denom = ad.abs().max(fd.abs());
        if denom > 1e-6 {
            worst = worst.max((ad - fd).abs() / denom);
        }
    }
    assert!(
        done >= n_probes.min(x0.len()),
        "too many kink probes; only {done} of {n_probes} usable"
    );
    worst
}

/// Gradient-check a graph construction over explicit leaf tensors.
/// `build` must be deterministic given its inputs.
pub fn check_graph_fn(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    n_probes: usize,
    seed: u64,
) -> f64 {
    let mut x0 = Vec::new();
    for t in inputs {
        x0.extend_from_slice(t.data());
    }

    // Analytic gradient once.
    let mut g = Graph::new();
    let mut vars = Vec::new();
    for t in inputs {
        vars.push(g.leaf(t.clone()));
    }
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).expect("backward failed");
    let mut ad = Vec::with_capacity(x0.len());
    for (t, v) in inputs.iter().zip(vars.iter()) {
        match grads.get(*v) {
            Some(gt) => ad.extend_from_slice(gt.data()),
            None => ad.extend(std::iter::repeat(0.0).take(t.numel())),
        }
    }

    let value = |flat: &[f64]| -> f64 {
        let mut g = Graph::new();
        let mut vars = Vec::new();
        let mut offset = 0usize;
        for t in inputs {
            let n = t.numel();
            let data = flat[offset..offset + n].to_vec();
            offset += n;
            vars.push(g.leaf(Tensor::new(t.shape().to_vec(), data).unwrap()));
        }
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };
    fd_max_rel_err(&x0, &ad, &value, n_probes, seed)
}

// ---------------------------------------------------------------------------
// Brute-force loss oracles
// ---------------------------------------------------------------------------

fn l2_normalize_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Direct evaluation of the symmetric contrastive objective.
pub fn oracle_info_nce(ecg: &[Vec<f64>], ppg: &[Vec<f64>], tau: f64) -> f64 {
    let e = l2_normalize_rows(ecg);
    let p = l2_normalize_rows(ppg);
    let b = e.len();
    let mut total = 0.0;
    for i in 0..b {
        // ecg_i against all ppg
        let mut denom = 0.0;
        for j in 0..b {
            denom += (dotv(&e[i], &p[j]) / tau).exp();
        }
        total += -((dotv(&e[i], &p[i]) / tau).exp() / denom).ln();
        // ppg_i against all ecg
        let mut denom = 0.0;
        for j in 0..b {
            denom += (dotv(&e[j], &p[i]) / tau).exp();
        }
        total += -((dotv(&e[i], &p[i]) / tau).exp() / denom).ln();
    }
    total / (2.0 * b as f64)
}

/// Double-loop V-statistic estimate of the squared kernel discrepancy.
pub fn oracle_mmd(t: &[Vec<f64>], s: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| -> f64 {
        let sq: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        (-sq / (2.0 * sigma * sigma)).exp()
    };
    let (m, n) = (t.len(), s.len());
    let mut tt = 0.0;
    for a in t {
        for b in t {
            tt += k(a, b);
        }
    }
    let mut ss = 0.0;
    for a in s {
        for b in s {
            ss += k(a, b);
        }
    }
    let mut ts = 0.0;
    for a in t {
        for b in s {
            ts += k(a, b);
        }
    }
    tt / (m * m) as f64 + ss / (n * n) as f64 - 2.0 * ts / (m * n) as f64
}

/// Median of pooled pairwise distances, replicated independently.
pub fn oracle_median_bandwidth(t: &[Vec<f64>], s: &[Vec<f64>]) -> f64 {
    let mut pool: Vec<&Vec<f64>> = t.iter().chain(s.iter()).collect();
    let mut d = Vec::new();
    for i in 0..pool.len() {
        for j in (i + 1)..pool.len() {
            d.push(euclid(pool[i], pool[j]));
        }
    }
    pool.clear();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d[(d.len() - 1) / 2].max(1e-12)
}

pub fn oracle_triplet(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (euclid(a, p) - euclid(a, n) + margin).max(0.0)
}

fn softmax_tau(row: &[f64], tau: f64) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| (v / tau).exp()).sum();
    row.iter().map(|v| (v / tau).exp() / z).collect()
}

/// Temperature-softened KL divergence, batch mean, times tau squared.
pub fn oracle_kl_temp(target: &[Vec<f64>], pred: &[Vec<f64>], tau: f64) -> f64 {
    let b = target.len();
    let mut total = 0.0;
    for i in 0..b {
        let p = softmax_tau(&target[i], tau);
        let q = softmax_tau(&pred[i], tau);
        for k in 0..p.len() {
            total += p[k] * (p[k].ln() - q[k].ln());
        }
    }
    tau * tau * total / b as f64
}

pub fn oracle_cka(
    p_t: &[Vec<f64>],
    q_t: &[Vec<f64>],
    p_s: &[Vec<f64>],
    q_s: &[Vec<f64>],
    tau: f64,
) -> f64 {
    0.5 * (oracle_kl_temp(p_t, q_t, tau) + oracle_kl_temp(p_s, q_s, tau))
}

pub fn oracle_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels.iter()) {
        let p = softmax_tau(row, 1.0);
        total += -p[y].ln();
    }
    total / logits.len() as f64
}

/// Exhaustive threshold sweep for the equal error rate: thresholds are the
/// sorted distinct scores, the false-accept rate counts impostor scores
/// strictly above the threshold, the false-reject rate counts genuine
/// scores strictly below, and the reported rate is the midpoint at the
/// sweep point where the two are closest (earliest threshold on ties).
pub fn oracle_eer(genuine: &[f64], impostor: &[f64]) -> f64 {
    assert!(!genuine.is_empty() && !impostor.is_empty());
    let mut thresholds: Vec<f64> = genuine.iter().chain(impostor.iter()).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut best_gap = f64::INFINITY;
    let mut best_eer = 0.5;
    for &t in &thresholds {
        let far = impostor.iter().filter(|&&s| s > t).count() as f64 / impostor.len() as f64;
        let frr = genuine.iter().filter(|&&s| s < t).count() as f64 / genuine.len() as f64;
        let gap = (far - frr).abs();
        if gap < best_gap {
            best_gap = gap;
            best_eer = 0.5 * (far + frr);
        }
    }
    best_eer
}

/// Rank-1 accuracy by brute-force argmax counting.
pub fn oracle_accuracy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let correct = logits
        .iter()
        .zip(labels.iter())
        .filter(|(row, &y)| {
            let mut best = 0usize;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}
