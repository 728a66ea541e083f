#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use ulmsim::config::{ExperimentConfig, GridConfig, PhantomConfig};
use ulmsim::metrics::match_points;

/// Three-millimetre cube around the crossing point, small enough for
/// debug-speed end-to-end runs.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.grid = GridConfig {
        x_min: -1.5e-3,
        x_max: 1.5e-3,
        y_min: -1.5e-3,
        y_max: 1.5e-3,
        z_min: 18.5e-3,
        z_max: 21.5e-3,
        spacing: 1e-4,
    };
    cfg.phantom = PhantomConfig::two_tube(1, 6);
    cfg.phantom.tube_length = 2.4e-3;
    cfg.metrics.ring_radii = vec![750e-6];
    cfg
}

/// Best matching by exhaustive search: most pairs within `tol`, then the
/// smallest total distance. Returns sorted (detection, truth) pairs.
pub fn brute_force(det: &[[f64; 3]], truth: &[[f64; 3]], tol: f64) -> Vec<(usize, usize)> {
    fn d(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
    fn go(
        i: usize,
        det: &[[f64; 3]],
        truth: &[[f64; 3]],
        tol: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        cost: f64,
        best: &mut (usize, f64, Vec<(usize, usize)>),
    ) {
        if i == det.len() {
            if cur.len() > best.0 || (cur.len() == best.0 && cost < best.1 - 1e-15) {
                *best = (cur.len(), cost, cur.clone());
            }
            return;
        }
        go(i + 1, det, truth, tol, used, cur, cost, best);
        for j in 0..truth.len() {
            let r = d(det[i], truth[j]);
            if !used[j] && r <= tol {
                used[j] = true;
                cur.push((i, j));
                go(i + 1, det, truth, tol, used, cur, cost + r, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, f64::INFINITY, Vec::new());
    go(0, det, truth, tol, &mut vec![false; truth.len()], &mut Vec::new(), 0.0, &mut best);
    best.2
}

pub fn greedy_pairs(det: &[[f64; 3]], truth: &[[f64; 3]], tol: f64) -> Vec<(usize, usize)> {
    let mut p: Vec<(usize, usize)> = match_points(det, truth, tol).pairs.iter().map(|p| (p.detection, p.truth)).collect();
    p.sort();
    p
}

/// Truths at least two tolerances apart, as for isolated scatterers; each
/// detection is either a jittered truth or a stray point.
pub fn sparse_instance(rng: &mut ChaCha8Rng, tol: f64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let n_truth = rng.random_range(0..=5);
    let mut truth: Vec<[f64; 3]> = Vec::new();
    while truth.len() < n_truth {
        let p = [rng.random_range(-4.0..4.0) * tol, rng.random_range(-4.0..4.0) * tol, rng.random_range(-4.0..4.0) * tol];
        if truth.iter().all(|t| ((t[0] - p[0]).powi(2) + (t[1] - p[1]).powi(2) + (t[2] - p[2]).powi(2)).sqrt() > 2.0 * tol) {
            truth.push(p);
        }
    }
    let n_det = rng.random_range(0..=5);
    let det = (0..n_det)
        .map(|_| {
            if !truth.is_empty() && rng.random_bool(0.7) {
                let t = truth[rng.random_range(0..truth.len())];
                t.map(|v| v + rng.random_range(-0.7..0.7) * tol)
            } else {
                [0, 1, 2].map(|_| rng.random_range(-5.0..5.0) * tol)
            }
        })
        .collect();
    (det, truth)
}
