//! Two-component PCA by power iteration with deflation.

use tracing::warn;

use crate::error::{Error, Result};
use crate::model::CounterRng;

const MAX_ITERS: usize = 20_000;
const TOL: f64 = 1e-13;
const START_SEED: u64 = 0x5_EED0_F9CA;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// One `(x, y)` per input vector, in input order.
    pub points: Vec<(f64, f64)>,
    /// Unit principal directions; the second is all zeros when rank < 2.
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
}

fn mat_vec(c: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = c[i * d..(i + 1) * d]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum();
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Dominant eigenpair of a symmetric PSD matrix from a fixed start vector.
fn power_iteration(c: &[f64], d: usize) -> (f64, Vec<f64>) {
    let rng = CounterRng::new(START_SEED);
    let mut v: Vec<f64> = (0..d).map(|i| rng.uniform(i as u64) + 0.5).collect();
    normalize(&mut v);
    let mut w = vec![0.0; d];
    for _ in 0..MAX_ITERS {
        mat_vec(c, &v, &mut w);
        if normalize(&mut w) == 0.0 {
            return (0.0, v);
        }
        let diff: f64 = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        std::mem::swap(&mut v, &mut w);
        if diff < TOL {
            break;
        }
    }
    mat_vec(c, &v, &mut w);
    let lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
    (lambda, v)
}

fn fix_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Centre, then project onto the top two directions of the sample covariance.
/// Each direction's first nonzero loading is made positive.
pub fn pca_project_2d(vectors: &[Vec<f32>]) -> Result<Projection> {
    if vectors.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "PCA needs at least 3 vectors, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape(
            "PCA vectors must share one nonzero dimension".into(),
        ));
    }
    let n = vectors.len();
    let mut mean = vec![0.0f64; d];
    for v in vectors {
        mean.iter_mut().zip(v).for_each(|(m, &x)| *m += x as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect())
        .collect();

    let mut cov = vec![0.0f64; d * d];
    for row in &centred {
        for i in 0..d {
            let ri = row[i];
            for j in i..d {
                cov[i * d + j] += ri * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let negligible = 1e-12 * trace.max(f64::MIN_POSITIVE);

    let (l1, mut v1) = power_iteration(&cov, d);
    if l1 <= negligible {
        return Err(Error::DegenerateInput("all vectors are identical".into()));
    }
    fix_sign(&mut v1);
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (l2, mut v2) = power_iteration(&cov, d);
    let (l2, v2) = if l2 <= negligible {
        warn!("rank < 2; second PCA coordinate set to zero");
        (0.0, vec![0.0; d])
    } else {
        fix_sign(&mut v2);
        (l2, v2)
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let points = centred.iter().map(|r| (dot(r, &v1), dot(r, &v2))).collect();
    Ok(Projection {
        points,
        components: [v1, v2],
        eigenvalues: [l1, l2],
    })
}
