//! Fuzzy-inference token interaction.
//!
//! For token `i` and feature `j` the query and key scalars are fuzzified by
//! `R` membership functions, rule `r` fires with `π = μ_q·μ_k`, firings are
//! normalized as `π / (Σπ + ε)`, and each rule emits the affine consequent
//! `w_q·q + w_k·k + b`. The normalized weighted sum of consequents gives the
//! interaction map `F` (`tokens × features`). Each feature column of `F` is
//! softmaxed over tokens and multiplies `V` elementwise.
//!
//! Everything is elementwise in `(token, feature)`, so cost is
//! `O(tokens · features · rules)`.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::membership::{init_mf_bank, mf_eval, mf_eval_with_grads, MfKind, MfParamBank};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Learnable state of one interaction layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FisParams {
    pub q_bank: MfParamBank,
    pub k_bank: MfParamBank,
    /// `R × 3`, row `r` is `[w_q, w_k, b]`.
    pub consequents: Array2<f64>,
    pub epsilon: f64,
}

impl FisParams {
    pub fn rules(&self) -> usize {
        self.consequents.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_bank.dims() != self.k_bank.dims() || self.q_bank.kind != self.k_bank.kind {
            let (a, b, c) = self.q_bank.dims();
            let (x, y, z) = self.k_bank.dims();
            return Err(Error::shape("key membership bank", &[a, b, c], &[x, y, z]));
        }
        if self.consequents.dim() != (self.q_bank.rules(), 3) {
            return Err(Error::shape(
                "rule consequents",
                &[self.q_bank.rules(), 3],
                self.consequents.shape(),
            ));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Seeded initialization. Consequent slopes are uniform in [-0.5, 0.5),
    /// offsets start at zero.
    pub fn init(
        kind: MfKind,
        tokens: usize,
        features: usize,
        rules: usize,
        epsilon: f64,
        seed: u64,
    ) -> Result<Self> {
        let q_bank = init_mf_bank(kind, tokens, features, rules, seed)?;
        let k_bank = init_mf_bank(kind, tokens, features, rules, seed.wrapping_add(1))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let consequents = Array2::from_shape_fn((rules, 3), |(_, c)| {
            if c < 2 {
                rng.random_range(-0.5..0.5)
            } else {
                0.0
            }
        });
        let params = Self {
            q_bank,
            k_bank,
            consequents,
            epsilon,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            q_bank: self.q_bank.zeros_like(),
            k_bank: self.k_bank.zeros_like(),
            consequents: Array2::zeros(self.consequents.raw_dim()),
            epsilon: self.epsilon,
        }
    }
}

/// Intermediate values of one forward pass, kept for backward and inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct FisTrace {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub mu_q: Array3<f64>,
    pub mu_k: Array3<f64>,
    pub pi: Array3<f64>,
    pub pi_tilde: Array3<f64>,
    pub c: Array3<f64>,
    /// Interaction map, `tokens × features`.
    pub f_qk: Array2<f64>,
    /// Column-softmaxed weights.
    pub a: Array2<f64>,
    pub o: Array2<f64>,
}

fn check_same(
    context: &'static str,
    a: &ArrayView2<'_, f64>,
    b: &ArrayView2<'_, f64>,
) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(context, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_same3(context: &'static str, a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(context, a.shape(), b.shape()));
    }
    Ok(())
}

/// Membership degrees of every entry of `m` under every rule.
pub fn fuzzify(m: ArrayView2<'_, f64>, bank: &MfParamBank) -> Result<Array3<f64>> {
    let (tokens, features) = m.dim();
    bank.check_input(tokens, features)?;
    let rules = bank.rules();
    let kind = bank.kind;
    let mut out = Array3::zeros((tokens, features, rules));
    for ((i, j, r), o) in out.indexed_iter_mut() {
        let raw = bank.raw_at(bank.token_row(i), j, r);
        *o = mf_eval(kind, m[[i, j]], &raw);
    }
    Ok(out)
}

/// Product t-norm.
pub fn fire_rules(mu_q: &Array3<f64>, mu_k: &Array3<f64>) -> Result<Array3<f64>> {
    check_same3("rule firing", mu_q, mu_k)?;
    Ok(mu_q * mu_k)
}

/// `π̃_r = π_r / (Σ_s π_s + ε)` along the rule axis.
pub fn normalize_firings(pi: &Array3<f64>, epsilon: f64) -> Array3<f64> {
    let mut out = pi.clone();
    for mut lane in out.lanes_mut(Axis(2)) {
        let denom = lane.sum() + epsilon;
        lane.mapv_inplace(|p| p / denom);
    }
    out
}

/// First-order Sugeno consequents `w_q·q + w_k·k + b` for every rule.
pub fn rule_consequents(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    consequents: ArrayView2<'_, f64>,
) -> Result<Array3<f64>> {
    check_same("rule consequents", &q, &k)?;
    if consequents.ncols() != 3 {
        return Err(Error::shape(
            "rule consequents",
            &[consequents.nrows(), 3],
            consequents.shape(),
        ));
    }
    let (tokens, features) = q.dim();
    let rules = consequents.nrows();
    Ok(Array3::from_shape_fn(
        (tokens, features, rules),
        |(i, j, r)| {
            consequents[[r, 0]] * q[[i, j]] + consequents[[r, 1]] * k[[i, j]] + consequents[[r, 2]]
        },
    ))
}

/// Weighted sum of consequents over rules.
pub fn defuzzify(pi_tilde: &Array3<f64>, c: &Array3<f64>) -> Result<Array2<f64>> {
    check_same3("defuzzification", pi_tilde, c)?;
    Ok((pi_tilde * c).sum_axis(Axis(2)))
}

/// Softmax over the token axis for each feature column, max-subtracted.
pub fn column_softmax(f: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut a = f.to_owned();
    for mut col in a.columns_mut() {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    a
}

/// Returns `(A, O)` with `A = column_softmax(F)` and `O = A ⊙ V`.
pub fn fis_gate(
    f_qk: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_same("interaction gate", &f_qk, &v)?;
    let a = column_softmax(f_qk);
    let o = &a * &v;
    Ok((a, o))
}

pub fn fis_forward(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    params: &FisParams,
    keep_trace: bool,
) -> Result<(Array2<f64>, Option<FisTrace>)> {
    check_same("interaction keys", &q, &k)?;
    check_same("interaction values", &q, &v)?;
    let mu_q = fuzzify(q, &params.q_bank)?;
    let mu_k = fuzzify(k, &params.k_bank)?;
    let pi = fire_rules(&mu_q, &mu_k)?;
    let pi_tilde = normalize_firings(&pi, params.epsilon);
    let c = rule_consequents(q, k, params.consequents.view())?;
    let f_qk = defuzzify(&pi_tilde, &c)?;
    let (a, o) = fis_gate(f_qk.view(), v)?;
    let trace = keep_trace.then(|| FisTrace {
        q: q.to_owned(),
        k: k.to_owned(),
        v: v.to_owned(),
        mu_q,
        mu_k,
        pi,
        pi_tilde,
        c,
        f_qk,
        a,
        o: o.clone(),
    });
    Ok((o, trace))
}

/// Gradients of a scalar loss w.r.t. the layer inputs and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FisGrads {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub params: FisParams,
}

/// Reverse pass given the upstream gradient `d_o` of the output.
pub fn fis_backward(
    params: &FisParams,
    trace: &FisTrace,
    d_o: ArrayView2<'_, f64>,
) -> Result<FisGrads> {
    let (tokens, features) = trace.o.dim();
    if d_o.dim() != (tokens, features) {
        return Err(Error::shape(
            "interaction upstream gradient",
            &[tokens, features],
            d_o.shape(),
        ));
    }
    let rules = params.rules();
    let eps = params.epsilon;

    let d_v = &trace.a * &d_o;
    let d_a = &trace.v * &d_o;

    // softmax Jacobian per column
    let mut d_f = Array2::zeros((tokens, features));
    for j in 0..features {
        let dot: f64 = (0..tokens).map(|i| trace.a[[i, j]] * d_a[[i, j]]).sum();
        for i in 0..tokens {
            d_f[[i, j]] = trace.a[[i, j]] * (d_a[[i, j]] - dot);
        }
    }

    let mut d_q = Array2::zeros((tokens, features));
    let mut d_k = Array2::zeros((tokens, features));
    let mut grads = params.zeros_like();
    let kind = params.q_bank.kind;
    let n_slots = kind.n_slots();

    let mut d_pi = vec![0.0; rules];
    for i in 0..tokens {
        for j in 0..features {
            let df = d_f[[i, j]];
            let q = trace.q[[i, j]];
            let k = trace.k[[i, j]];
            let sum_pi: f64 = (0..rules).map(|r| trace.pi[[i, j, r]]).sum();
            let denom = sum_pi + eps;

            // d/dπ̃_r = df·c_r, then through the normalization
            let mut weighted = 0.0;
            for r in 0..rules {
                weighted += df * trace.c[[i, j, r]] * trace.pi_tilde[[i, j, r]];
            }
            for (r, dp) in d_pi.iter_mut().enumerate() {
                *dp = (df * trace.c[[i, j, r]] - weighted) / denom;
            }

            for (r, &dp) in d_pi.iter().enumerate() {
                let dc = df * trace.pi_tilde[[i, j, r]];
                let wq = params.consequents[[r, 0]];
                let wk = params.consequents[[r, 1]];
                d_q[[i, j]] += dc * wq;
                d_k[[i, j]] += dc * wk;
                grads.consequents[[r, 0]] += dc * q;
                grads.consequents[[r, 1]] += dc * k;
                grads.consequents[[r, 2]] += dc;

                let d_mu_q = dp * trace.mu_k[[i, j, r]];
                let d_mu_k = dp * trace.mu_q[[i, j, r]];

                let bi = params.q_bank.token_row(i);
                let gq = mf_eval_with_grads(kind, q, &params.q_bank.raw_at(bi, j, r));
                d_q[[i, j]] += d_mu_q * gq.d_x;
                let bk = params.k_bank.token_row(i);
                let gk = mf_eval_with_grads(kind, k, &params.k_bank.raw_at(bk, j, r));
                d_k[[i, j]] += d_mu_k * gk.d_x;
                for s in 0..n_slots {
                    grads.q_bank.slots[s][[bi, j, r]] += d_mu_q * gq.d_raw[s];
                    grads.k_bank.slots[s][[bk, j, r]] += d_mu_k * gk.d_raw[s];
                }
            }
        }
    }

    Ok(FisGrads {
        q: d_q,
        k: d_k,
        v: d_v,
        params: grads,
    })
}

/// Straight-line scalar evaluation of the whole layer, one `(token, feature)`
/// element at a time. Used as the reference for [`fis_forward`].
pub fn fis_oracle(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    params: &FisParams,
) -> Array2<f64> {
    let (tokens, features) = q.dim();
    let rules = params.rules();
    let kind = params.q_bank.kind;
    let mut f = vec![vec![0.0; features]; tokens];
    for i in 0..tokens {
        for j in 0..features {
            let mut firings = Vec::with_capacity(rules);
            for r in 0..rules {
                let mq = mf_eval(
                    kind,
                    q[[i, j]],
                    &params.q_bank.raw_at(params.q_bank.token_row(i), j, r),
                );
                let mk = mf_eval(
                    kind,
                    k[[i, j]],
                    &params.k_bank.raw_at(params.k_bank.token_row(i), j, r),
                );
                firings.push(mq * mk);
            }
            let mut total = 0.0;
            for p in &firings {
                total += p;
            }
            let mut acc = 0.0;
            for (r, p) in firings.iter().enumerate() {
                let c = params.consequents[[r, 0]] * q[[i, j]]
                    + params.consequents[[r, 1]] * k[[i, j]]
                    + params.consequents[[r, 2]];
                acc += p / (total + params.epsilon) * c;
            }
            f[i][j] = acc;
        }
    }
    let mut out = Array2::zeros((tokens, features));
    for j in 0..features {
        let mut max = f64::NEG_INFINITY;
        for row in &f {
            if row[j] > max {
                max = row[j];
            }
        }
        let mut z = 0.0;
        for row in &f {
            z += (row[j] - max).exp();
        }
        for i in 0..tokens {
            out[[i, j]] = (f[i][j] - max).exp() / z * v[[i, j]];
        }
    }
    out
}
