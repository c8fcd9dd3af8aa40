//! Small dense helpers shared across modules.

use ndarray::{Array2, ArrayView1, Axis};

/// Dot product accumulated in f64, left to right.
pub fn dot_f32(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

pub fn norm_f64(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales each non-zero row to unit L2 norm in place; zero rows stay zero.
pub fn normalize_rows_f32(m: &mut Array2<f32>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let n = row.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| (f64::from(x) / n) as f32);
        }
    }
}

pub fn normalize_rows_f64(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

pub fn normalize_vec(v: &mut [f64]) {
    let n = norm_f64(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by n).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}
