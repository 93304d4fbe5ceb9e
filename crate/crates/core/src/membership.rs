//! Learnable membership functions.
//!
//! Every width-like quantity is stored as an unconstrained raw value and
//! mapped through `softplus(raw) + floor`, so effective widths stay positive
//! and piecewise-linear breakpoints stay ordered under any gradient step.
//!
//! Raw parameter slots per kind:
//!
//! | kind        | slot 0 | slot 1    | slot 2    | slot 3    |
//! |-------------|--------|-----------|-----------|-----------|
//! | Gaussian    | center | width     |           |           |
//! | Triangular  | peak   | left gap  | right gap |           |
//! | Trapezoidal | left shoulder `b` | left gap | top width | right gap |

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Floor added to every softplus-mapped width or gap.
pub const WIDTH_FLOOR: f64 = 1e-3;

pub const MAX_SLOTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MfKind {
    Gaussian,
    Triangular,
    Trapezoidal,
}

impl MfKind {
    pub const ALL: [MfKind; 3] = [MfKind::Gaussian, MfKind::Triangular, MfKind::Trapezoidal];

    pub fn n_slots(self) -> usize {
        match self {
            MfKind::Gaussian => 2,
            MfKind::Triangular => 3,
            MfKind::Trapezoidal => 4,
        }
    }

    pub fn slot_names(self) -> &'static [&'static str] {
        match self {
            MfKind::Gaussian => &["center", "width"],
            MfKind::Triangular => &["center", "left_gap", "right_gap"],
            MfKind::Trapezoidal => &["center", "left_gap", "top_width", "right_gap"],
        }
    }

    pub fn is_piecewise_linear(self) -> bool {
        !matches!(self, MfKind::Gaussian)
    }

    pub fn name(self) -> &'static str {
        match self {
            MfKind::Gaussian => "gaussian",
            MfKind::Triangular => "triangular",
            MfKind::Trapezoidal => "trapezoidal",
        }
    }
}

impl fmt::Display for MfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MfKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(MfKind::Gaussian),
            "triangular" => Ok(MfKind::Triangular),
            "trapezoidal" => Ok(MfKind::Trapezoidal),
            other => Err(Error::Config(format!("unknown membership kind {other:?}"))),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw value whose `softplus(raw) + WIDTH_FLOOR` equals `effective`.
pub fn raw_for_width(effective: f64) -> f64 {
    let y = effective - WIDTH_FLOOR;
    assert!(y > 0.0, "effective width must exceed the floor");
    // softplus^-1(y) = ln(e^y - 1)
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn gap(raw: f64) -> f64 {
    softplus(raw) + WIDTH_FLOOR
}

/// Breakpoints `[a, b, c, d]` of a piecewise-linear MF (for triangular, `c`
/// is the right foot and `d` is unused) or `[center, sigma, _, _]` for Gaussian.
pub fn effective_params(kind: MfKind, raw: &[f64]) -> [f64; 4] {
    match kind {
        MfKind::Gaussian => [raw[0], gap(raw[1]), 0.0, 0.0],
        MfKind::Triangular => {
            let b = raw[0];
            [b - gap(raw[1]), b, b + gap(raw[2]), 0.0]
        }
        MfKind::Trapezoidal => {
            let b = raw[0];
            let c = b + softplus(raw[2]);
            [b - gap(raw[1]), b, c, c + gap(raw[3])]
        }
    }
}

/// Membership degree of `x`, in [0, 1].
pub fn mf_eval(kind: MfKind, x: f64, raw: &[f64]) -> f64 {
    let p = effective_params(kind, raw);
    match kind {
        MfKind::Gaussian => {
            let (c, sigma) = (p[0], p[1]);
            (-(x - c) * (x - c) / (2.0 * sigma * sigma)).exp()
        }
        MfKind::Triangular => {
            let [a, b, c, _] = p;
            ((x - a) / (b - a)).min((c - x) / (c - b)).max(0.0)
        }
        MfKind::Trapezoidal => {
            let [a, b, c, d] = p;
            ((x - a) / (b - a)).min(1.0).min((d - x) / (d - c)).max(0.0)
        }
    }
}

/// Degree plus its derivatives with respect to `x` and each raw slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfGrad {
    pub value: f64,
    pub d_x: f64,
    pub d_raw: [f64; MAX_SLOTS],
}

/// Analytic derivatives through the softplus reparameterization.
/// At breakpoints of the piecewise-linear kinds all derivatives are 0.
pub fn mf_eval_with_grads(kind: MfKind, x: f64, raw: &[f64]) -> MfGrad {
    let p = effective_params(kind, raw);
    let mut d_raw = [0.0; MAX_SLOTS];
    match kind {
        MfKind::Gaussian => {
            let (c, sigma) = (p[0], p[1]);
            let diff = x - c;
            let s2 = sigma * sigma;
            let value = (-diff * diff / (2.0 * s2)).exp();
            let d_x = -value * diff / s2;
            d_raw[0] = -d_x;
            d_raw[1] = value * diff * diff / (s2 * sigma) * sigmoid(raw[1]);
            MfGrad { value, d_x, d_raw }
        }
        MfKind::Triangular => {
            let [a, b, c, _] = p;
            let (mut value, mut d_x, mut da, mut db, mut dc) = (0.0, 0.0, 0.0, 0.0, 0.0);
            if x > a && x < b {
                let w = b - a;
                value = (x - a) / w;
                d_x = 1.0 / w;
                da = (x - b) / (w * w);
                db = -(x - a) / (w * w);
            } else if x > b && x < c {
                let w = c - b;
                value = (c - x) / w;
                d_x = -1.0 / w;
                db = (c - x) / (w * w);
                dc = (x - b) / (w * w);
            } else if x == b {
                value = 1.0;
            }
            d_raw[0] = da + db + dc;
            d_raw[1] = -da * sigmoid(raw[1]);
            d_raw[2] = dc * sigmoid(raw[2]);
            MfGrad { value, d_x, d_raw }
        }
        MfKind::Trapezoidal => {
            let [a, b, c, d] = p;
            let (mut value, mut d_x) = (0.0, 0.0);
            let (mut da, mut db, mut dc, mut dd) = (0.0, 0.0, 0.0, 0.0);
            if x > a && x < b {
                let w = b - a;
                value = (x - a) / w;
                d_x = 1.0 / w;
                da = (x - b) / (w * w);
                db = -(x - a) / (w * w);
            } else if x >= b && x <= c {
                value = 1.0;
            } else if x > c && x < d {
                let w = d - c;
                value = (d - x) / w;
                d_x = -1.0 / w;
                dc = (d - x) / (w * w);
                dd = (x - c) / (w * w);
            }
            d_raw[0] = da + db + dc + dd;
            d_raw[1] = -da * sigmoid(raw[1]);
            d_raw[2] = (dc + dd) * sigmoid(raw[2]);
            d_raw[3] = dd * sigmoid(raw[3]);
            MfGrad { value, d_x, d_raw }
        }
    }
}

/// Which linear piece `x` falls on; changes exactly when `x` crosses a kink.
/// Always 0 for Gaussian.
pub fn mf_region(kind: MfKind, x: f64, raw: &[f64]) -> u8 {
    if !kind.is_piecewise_linear() {
        return 0;
    }
    let p = effective_params(kind, raw);
    let n = if kind == MfKind::Triangular { 3 } else { 4 };
    p[..n].iter().filter(|&&bp| x > bp).count() as u8
}

/// Distance from `x` to the nearest breakpoint (infinite for Gaussian).
pub fn kink_distance(kind: MfKind, x: f64, raw: &[f64]) -> f64 {
    if !kind.is_piecewise_linear() {
        return f64::INFINITY;
    }
    let p = effective_params(kind, raw);
    let n = if kind == MfKind::Triangular { 3 } else { 4 };
    p[..n]
        .iter()
        .map(|bp| (x - bp).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Raw MF parameters for every (token, feature, rule) element.
///
/// When built with `shared_tokens`, the token axis has length 1 and the same
/// functions apply to every token.
#[derive(Debug, Clone, PartialEq)]
pub struct MfParamBank {
    pub kind: MfKind,
    /// One `tokens × features × rules` array per raw slot.
    pub slots: Vec<Array3<f64>>,
}

impl MfParamBank {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.slots[0].dim()
    }

    pub fn tokens(&self) -> usize {
        self.dims().0
    }

    pub fn features(&self) -> usize {
        self.dims().1
    }

    pub fn rules(&self) -> usize {
        self.dims().2
    }

    pub fn is_shared(&self) -> bool {
        self.tokens() == 1
    }

    /// Bank token row used for input token `i`.
    #[inline]
    pub fn token_row(&self, i: usize) -> usize {
        if self.is_shared() {
            0
        } else {
            i
        }
    }

    /// Raw slot values for one element, packed into a fixed array.
    #[inline]
    pub fn raw_at(&self, i: usize, j: usize, r: usize) -> [f64; MAX_SLOTS] {
        let mut out = [0.0; MAX_SLOTS];
        for (o, slot) in out.iter_mut().zip(&self.slots) {
            *o = slot[[i, j, r]];
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            slots: self
                .slots
                .iter()
                .map(|s| Array3::zeros(s.raw_dim()))
                .collect(),
        }
    }

    /// Checks that the bank serves an input of `tokens × features`.
    pub fn check_input(&self, tokens: usize, features: usize) -> Result<()> {
        let (bt, bf, _) = self.dims();
        if bf != features || !(bt == tokens || bt == 1) {
            return Err(Error::shape(
                "membership bank",
                &[bt, bf],
                &[tokens, features],
            ));
        }
        Ok(())
    }
}

/// Evenly spaced base positions over [-1, 1]; a single rule sits at 0.
pub fn rule_positions(rules: usize) -> Vec<f64> {
    if rules == 1 {
        return vec![0.0];
    }
    let step = 2.0 / (rules - 1) as f64;
    (0..rules).map(|r| -1.0 + step * r as f64).collect()
}

pub const INIT_JITTER: f64 = 0.01;
/// Initial effective Gaussian sigma.
pub const INIT_SIGMA: f64 = 1.0;
/// Initial effective gap between a piecewise-linear peak and its feet.
pub const INIT_GAP: f64 = 2.0;
/// Initial plateau width of trapezoidal MFs.
pub const INIT_TOP: f64 = 0.5;

/// Seeded initialization: centers on [`rule_positions`] plus N(0, 0.01²) jitter.
pub fn init_mf_bank(
    kind: MfKind,
    tokens: usize,
    features: usize,
    rules: usize,
    seed: u64,
) -> Result<MfParamBank> {
    if tokens == 0 || features == 0 || rules == 0 {
        return Err(Error::Config(format!(
            "membership bank dimensions must be positive, got {tokens}×{features}×{rules}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, INIT_JITTER).expect("valid normal");
    let base = rule_positions(rules);
    let dim = (tokens, features, rules);
    // trapezoid plateau is centered on the base position
    let center_offset = if kind == MfKind::Trapezoidal {
        -INIT_TOP / 2.0
    } else {
        0.0
    };
    let center = Array3::from_shape_fn(dim, |(_, _, r)| {
        base[r] + center_offset + jitter.sample(&mut rng)
    });
    let slots = match kind {
        MfKind::Gaussian => vec![center, Array3::from_elem(dim, raw_for_width(INIT_SIGMA))],
        MfKind::Triangular => {
            let g = raw_for_width(INIT_GAP);
            vec![center, Array3::from_elem(dim, g), Array3::from_elem(dim, g)]
        }
        MfKind::Trapezoidal => {
            let g = raw_for_width(INIT_GAP);
            // plateau uses softplus without floor
            let top = raw_for_width(INIT_TOP + WIDTH_FLOOR);
            vec![
                center,
                Array3::from_elem(dim, g),
                Array3::from_elem(dim, top),
                Array3::from_elem(dim, g),
            ]
        }
    };
    Ok(MfParamBank { kind, slots })
}
