//! Scaled dot-product self-attention, the baseline interaction.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Row-stochastic `tokens × tokens` weights.
    pub a: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

fn row_softmax_inplace(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `softmax(Q Kᵀ / √d) V` with the softmax taken over each row.
pub fn self_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    keep_trace: bool,
) -> Result<(Array2<f64>, Option<AttentionTrace>)> {
    if q.dim() != k.dim() {
        return Err(Error::shape("attention keys", q.shape(), k.shape()));
    }
    if q.nrows() != v.nrows() {
        return Err(Error::shape("attention values", &[q.nrows()], &[v.nrows()]));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut a = q.dot(&k.t());
    a.mapv_inplace(|x| x * scale);
    row_softmax_inplace(&mut a);
    let o = a.dot(&v);
    let trace = keep_trace.then(|| AttentionTrace {
        q: q.to_owned(),
        k: k.to_owned(),
        v: v.to_owned(),
        a,
    });
    Ok((o, trace))
}

pub fn self_attention_backward(
    trace: &AttentionTrace,
    d_o: ArrayView2<'_, f64>,
) -> Result<AttentionGrads> {
    let expected = (trace.q.nrows(), trace.v.ncols());
    if d_o.dim() != expected {
        return Err(Error::shape(
            "attention upstream gradient",
            &[expected.0, expected.1],
            d_o.shape(),
        ));
    }
    let scale = 1.0 / (trace.q.ncols() as f64).sqrt();
    let d_v = trace.a.t().dot(&d_o);
    let d_a = d_o.dot(&trace.v.t());
    let mut d_s = &trace.a * &d_a;
    for (mut row, a_row) in d_s.rows_mut().into_iter().zip(trace.a.rows()) {
        let dot = row.sum();
        row.zip_mut_with(&a_row, |g, &a| *g -= a * dot);
    }
    d_s.mapv_inplace(|x| x * scale);
    Ok(AttentionGrads {
        q: d_s.dot(&trace.k),
        k: d_s.t().dot(&trace.q),
        v: d_v,
    })
}

/// Nested-loop reference for [`self_attention`].
pub fn self_attention_oracle(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let (t, d) = q.dim();
    let dv = v.ncols();
    let mut out = Array2::zeros((t, dv));
    for i in 0..t {
        let mut scores = vec![0.0; t];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q[[i, c]] * k[[j, c]];
            }
            *s = dot / (d as f64).sqrt();
        }
        let mut max = f64::NEG_INFINITY;
        for &s in &scores {
            if s > max {
                max = s;
            }
        }
        let mut z = 0.0;
        for s in &scores {
            z += (s - max).exp();
        }
        for c in 0..dv {
            let mut acc = 0.0;
            for j in 0..t {
                acc += (scores[j] - max).exp() / z * v[[j, c]];
            }
            out[[i, c]] = acc;
        }
    }
    out
}
