//! Reference computations independent of the tape: central finite
//! differences and two plain classifiers used as dataset probes.

use crate::gradcore::{Module, Tensor};

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` at `x` for every coordinate.
pub fn numeric_gradient(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - STEP;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (plus - minus) / (2.0 * STEP);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// One failing coordinate of a module gradient check.
#[derive(Debug, Clone)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Checks analytic parameter gradients of a module against central
/// differences of `loss`.
///
/// `analytic` must return the gradient for every parameter in
/// `parameters()` order. `loss` must be a deterministic function of the
/// module's current parameter values. At most `per_param` coordinates of each
/// parameter are probed (evenly strided), which keeps wide networks cheap.
pub fn check_module<M: Module>(
    module: &mut M,
    analytic: &[Tensor],
    per_param: usize,
    tol: f64,
    mut loss: impl FnMut(&M) -> f64,
) -> (usize, Vec<Mismatch>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    let count = module.parameters().len();
    assert_eq!(count, analytic.len(), "one analytic gradient per parameter");
    for pi in 0..count {
        let n = module.parameters()[pi].value.numel();
        let stride = (n / per_param.max(1)).max(1);
        for idx in (0..n).step_by(stride).take(per_param) {
            let orig = module.parameters()[pi].value.data()[idx];
            module.parameters_mut()[pi].value.data_mut()[idx] = orig + STEP;
            let plus = loss(module);
            module.parameters_mut()[pi].value.data_mut()[idx] = orig - STEP;
            let minus = loss(module);
            module.parameters_mut()[pi].value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[pi].data()[idx];
            let err = relative_error(a, numeric, 1e-6);
            checked += 1;
            if err > tol {
                bad.push(Mismatch {
                    param: module.parameters()[pi].name().to_string(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    (checked, bad)
}

fn standardized(x: &Tensor, stats: &[(f64, f64)]) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| x.row(i).iter().zip(stats).map(|(v, (m, s))| (v - m) / s).collect())
        .collect()
}

/// Trains a binary logistic regression on `train` with full-batch gradient
/// descent and returns its accuracy on `test`.
pub fn logistic_probe(train_x: &Tensor, train_y: &[usize], test_x: &Tensor, test_y: &[usize]) -> f64 {
    let d = train_x.row_len();
    let n = train_x.rows() as f64;
    let stats: Vec<(f64, f64)> = (0..d)
        .map(|j| {
            let m = (0..train_x.rows()).map(|i| train_x.at(i, j)).sum::<f64>() / n;
            let v = (0..train_x.rows()).map(|i| (train_x.at(i, j) - m).powi(2)).sum::<f64>() / n;
            (m, if v > 0.0 { v.sqrt() } else { 1.0 })
        })
        .collect();
    let xs = standardized(train_x, &stats);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(train_y) {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y as f64;
            for (g, a) in gw.iter_mut().zip(x) {
                *g += err * a;
            }
            gb += err;
        }
        for (c, g) in w.iter_mut().zip(&gw) {
            *c -= 0.5 * g / n;
        }
        b -= 0.5 * gb / n;
    }
    let hits = standardized(test_x, &stats)
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            usize::from(z > 0.0) == y
        })
        .count();
    hits as f64 / test_y.len() as f64
}

/// Accuracy of the nearest-class-mean rule fitted and evaluated on `x`.
pub fn nearest_centroid_accuracy(x: &Tensor, y: &[usize], classes: usize) -> f64 {
    let d = x.row_len();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &c) in y.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &k)| s.iter().map(|v| v / k.max(1) as f64).collect())
        .collect();
    let hits = (0..x.rows())
        .filter(|&i| {
            let dist = |c: &Vec<f64>| c.iter().zip(x.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..classes)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .expect("at least one class");
            best == y[i]
        })
        .count();
    hits as f64 / x.rows() as f64
}
