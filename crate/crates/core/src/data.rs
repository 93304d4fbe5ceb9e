//! Time-series ingestion: CSV loading, chronological splits, z-score
//! normalization, sliding windows and a seeded synthetic generator.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// A multivariate series stored time-major: `values` is `T_total × N`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub values: Array2<f64>,
    pub variate_names: Vec<String>,
    pub frequency: String,
    /// Contents of the date column, kept as metadata only.
    pub timestamps: Option<Vec<String>>,
}

impl RawSeries {
    pub fn new(values: Array2<f64>, variate_names: Vec<String>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Empty("series"));
        }
        if variate_names.len() != values.ncols() {
            return Err(Error::shape(
                "variate names",
                &[values.ncols()],
                &[variate_names.len()],
            ));
        }
        if let Some((idx, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let row = idx / values.ncols();
            let column = idx % values.ncols();
            return Err(Error::NonNumeric {
                row: row + 1,
                column: column + 1,
                value: values[[row, column]].to_string(),
            });
        }
        Ok(Self {
            values,
            variate_names,
            frequency: String::new(),
            timestamps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.values.ncols()
    }

    fn slice_rows(&self, start: usize, end: usize) -> RawSeries {
        RawSeries {
            values: self.values.slice(s![start..end, ..]).to_owned(),
            variate_names: self.variate_names.clone(),
            frequency: self.frequency.clone(),
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
        }
    }
}

/// Reads a comma-separated file with one header row. When `has_date_column`
/// is set the first column is kept as timestamps and excluded from values.
///
/// Row numbers in errors count data rows from 1, excluding the header.
pub fn load_csv(path: impl AsRef<Path>, has_date_column: bool) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let headers = reader.headers().map_err(csv_err)?.clone();
    let width = headers.len();
    let skip = usize::from(has_date_column);
    if width <= skip {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: "no value columns".into(),
        });
    }
    let variate_names: Vec<String> = headers.iter().skip(skip).map(str::to_owned).collect();
    let n_vars = variate_names.len();

    let mut flat = Vec::new();
    let mut stamps = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = i + 1;
        if record.len() != width {
            return Err(Error::RaggedRow {
                row,
                expected: width,
                found: record.len(),
            });
        }
        if has_date_column {
            stamps.push(record[0].to_owned());
        }
        for (c, cell) in record.iter().enumerate().skip(skip) {
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row,
                column: c + 1,
                value: cell.to_owned(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumeric {
                    row,
                    column: c + 1,
                    value: cell.to_owned(),
                });
            }
            flat.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty("csv has no data rows"));
    }
    let values = Array2::from_shape_vec((rows, n_vars), flat).expect("row width checked");
    let mut series = RawSeries::new(values, variate_names)?;
    if has_date_column {
        series.timestamps = Some(stamps);
    }
    Ok(series)
}

/// Lengths of the train / validation / test segments, taken in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
}

impl SplitSpec {
    pub fn new(train_len: usize, val_len: usize, test_len: usize) -> Self {
        Self {
            train_len,
            val_len,
            test_len,
        }
    }

    /// 70/10/20 split of `len` points; the test segment takes the remainder.
    pub fn default_for(len: usize) -> Self {
        let train_len = len * 7 / 10;
        let val_len = len / 10;
        Self::new(train_len, val_len, len - train_len - val_len)
    }

    pub fn total(&self) -> usize {
        self.train_len + self.val_len + self.test_len
    }

    /// Every segment must hold at least one window.
    pub fn check_windows(&self, lookback: usize, horizon: usize) -> Result<()> {
        let need = lookback + horizon;
        for len in [self.train_len, self.val_len, self.test_len] {
            if len < need {
                return Err(Error::SeriesTooShort {
                    len,
                    lookback,
                    horizon,
                });
            }
        }
        Ok(())
    }
}

pub fn chronological_split(
    series: &RawSeries,
    spec: SplitSpec,
) -> Result<(RawSeries, RawSeries, RawSeries)> {
    if spec.total() > series.len() {
        return Err(Error::SplitOverflow {
            train: spec.train_len,
            val: spec.val_len,
            test: spec.test_len,
            len: series.len(),
        });
    }
    let a = spec.train_len;
    let b = a + spec.val_len;
    let c = b + spec.test_len;
    Ok((
        series.slice_rows(0, a),
        series.slice_rows(a, b),
        series.slice_rows(b, c),
    ))
}

/// Per-variate z-score fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Normalizer {
    /// Population statistics; standard deviations are floored at [`STD_FLOOR`].
    pub fn fit(train: &RawSeries) -> Result<Self> {
        Self::fit_matrix(train.values.view())
    }

    pub fn fit_matrix(values: ArrayView2<'_, f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Empty("normalizer input"));
        }
        let mean = values.mean_axis(Axis(0)).expect("nonempty");
        let std = values.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
        Ok(Self { mean, std })
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, m: &ArrayView2<'_, f64>) -> Result<()> {
        if m.ncols() != self.n_vars() {
            return Err(Error::shape("normalizer", &[self.n_vars()], &[m.ncols()]));
        }
        Ok(())
    }

    pub fn apply(&self, m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(&m)?;
        Ok((&m - &self.mean) / &self.std)
    }

    pub fn invert(&self, m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(&m)?;
        Ok(&m * &self.std + &self.mean)
    }

    pub fn apply_series(&self, series: &RawSeries) -> Result<RawSeries> {
        let mut out = series.clone();
        out.values = self.apply(series.values.view())?;
        Ok(out)
    }
}

/// One training example. `input` is `lookback × N`, `target` is `horizon × N`
/// and begins on the row right after the input ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub input: Array2<f64>,
    pub target: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Window>,
    pub lookback: usize,
    pub horizon: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.windows.first().map_or(0, |w| w.input.ncols())
    }
}

/// Number of windows `make_windows` will produce.
pub fn window_count(len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if len < lookback + horizon || stride == 0 {
        0
    } else {
        (len - lookback - horizon) / stride + 1
    }
}

pub fn make_windows(
    series: &RawSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowSet> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config(
            "lookback, horizon and stride must be positive".into(),
        ));
    }
    if series.len() < lookback + horizon {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            lookback,
            horizon,
        });
    }
    let count = window_count(series.len(), lookback, horizon, stride);
    let windows = (0..count)
        .map(|k| {
            let start = k * stride;
            let mid = start + lookback;
            Window {
                start,
                input: series.values.slice(s![start..mid, ..]).to_owned(),
                target: series.values.slice(s![mid..mid + horizon, ..]).to_owned(),
            }
        })
        .collect();
    Ok(WindowSet {
        windows,
        lookback,
        horizon,
    })
}

/// Parameters of the synthetic generator. Variate `k` at time `t` is
/// `sin(2π t / periods[k]) + trends[k]·t + noise·ε_t`, with `ε_t` standard normal.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n_vars: usize,
    pub length: usize,
    pub seed: u64,
    pub noise: f64,
    pub periods: Vec<f64>,
    pub trends: Vec<f64>,
}

impl SynthOptions {
    pub const DEFAULT_NOISE: f64 = 0.1;

    /// Periods in [12, 48) and trends in [-5e-4, 5e-4) drawn from `seed`.
    pub fn from_seed(n_vars: usize, length: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let periods = (0..n_vars).map(|_| rng.random_range(12.0..48.0)).collect();
        let trends = (0..n_vars).map(|_| rng.random_range(-5e-4..5e-4)).collect();
        Self {
            n_vars,
            length,
            seed,
            noise: Self::DEFAULT_NOISE,
            periods,
            trends,
        }
    }

    pub fn generate(&self) -> RawSeries {
        assert_eq!(self.periods.len(), self.n_vars);
        assert_eq!(self.trends.len(), self.n_vars);
        // noise uses its own stream so changing the amplitude leaves periods untouched
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut values = Array2::zeros((self.length, self.n_vars));
        for t in 0..self.length {
            let tf = t as f64;
            for k in 0..self.n_vars {
                let eps: f64 = normal.sample(&mut rng);
                values[[t, k]] = (std::f64::consts::TAU * tf / self.periods[k]).sin()
                    + self.trends[k] * tf
                    + self.noise * eps;
            }
        }
        let names = (0..self.n_vars).map(|k| format!("v{k}")).collect();
        let mut series = RawSeries::new(values, names).expect("synthetic values are finite");
        series.frequency = "synthetic".into();
        series
    }
}

pub fn synth_sinusoid(n_vars: usize, length: usize, seed: u64) -> RawSeries {
    SynthOptions::from_seed(n_vars.max(1), length.max(1), seed).generate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn series(values: Array2<f64>) -> RawSeries {
        let names = (0..values.ncols()).map(|k| format!("c{k}")).collect();
        RawSeries::new(values, names).unwrap()
    }

    fn write_tmp(name: &str, body: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("fisformer-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn single_column_csv() {
        let p = write_tmp("single.csv", "x\n1.0\n2.0\n3.0\n");
        let s = load_csv(&p, false).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.n_vars(), 1);
        assert_eq!(s.values.column(0).to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn date_column_is_metadata() {
        let p = write_tmp(
            "dated.csv",
            "date,a,b\n2016-07-01 00:00,1,2\n2016-07-01 01:00,3,4\n",
        );
        let s = load_csv(&p, true).unwrap();
        assert_eq!(s.n_vars(), 2);
        assert_eq!(s.variate_names, vec!["a", "b"]);
        assert_eq!(s.timestamps.as_ref().unwrap()[1], "2016-07-01 01:00");
        assert_eq!(s.values, array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn non_numeric_cell_names_row() {
        let p = write_tmp("bad.csv", "a,b\n1,2\n3,4\n5,6\n7,8\n9,oops\n");
        match load_csv(&p, false) {
            Err(Error::NonNumeric { row, column, .. }) => {
                assert_eq!(row, 5);
                assert_eq!(column, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_row_rejected() {
        let p = write_tmp("ragged.csv", "a,b\n1,2\n3\n");
        assert!(matches!(
            load_csv(&p, false),
            Err(Error::RaggedRow { row: 2, .. })
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_csv("/definitely/not/here.csv", false).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.csv"));
    }

    #[test]
    fn split_small_series() {
        let s = series(Array2::from_shape_fn((10, 1), |(t, _)| t as f64));
        let (a, b, c) = chronological_split(&s, SplitSpec::new(6, 2, 2)).unwrap();
        assert_eq!(a.values.column(0).to_vec(), vec![0., 1., 2., 3., 4., 5.]);
        assert_eq!(b.values.column(0).to_vec(), vec![6., 7.]);
        assert_eq!(c.values.column(0).to_vec(), vec![8., 9.]);
        assert!(matches!(
            chronological_split(&s, SplitSpec::new(8, 2, 2)),
            Err(Error::SplitOverflow { .. })
        ));
    }

    #[test]
    fn split_etth1_lengths() {
        let s = series(Array2::zeros((14400, 7)));
        let (a, b, c) = chronological_split(&s, SplitSpec::new(8545, 2881, 2881)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8545, 2881, 2881));
        assert_eq!(a.n_vars(), 7);
    }

    #[test]
    fn normalizer_examples() {
        let n = Normalizer::fit(&series(array![[5.0], [5.0], [5.0]])).unwrap();
        assert_eq!(n.mean[0], 5.0);
        assert_eq!(n.std[0], STD_FLOOR);
        assert!(n
            .apply(array![[5.0], [5.0]].view())
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let n = Normalizer::fit(&series(array![[0.0], [2.0]])).unwrap();
        assert_eq!(n.mean[0], 1.0);
        assert_eq!(n.std[0], 1.0);
        assert_eq!(
            n.apply(array![[0.0], [2.0]].view()).unwrap(),
            array![[-1.0], [1.0]]
        );
    }

    #[test]
    fn normalized_train_has_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Array2::from_shape_fn((100, 3), |_| rng.random_range(-4.0..9.0));
        let n = Normalizer::fit_matrix(m.view()).unwrap();
        let z = n.apply(m.view()).unwrap();
        for j in 0..3 {
            let col = z.column(j);
            let mean = col.sum() / 100.0;
            assert!(mean.abs() < 1e-9);
            let var = col.iter().map(|v| v * v).sum::<f64>() / 100.0;
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalizer_empty_input() {
        let m = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            Normalizer::fit_matrix(m.view()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn window_counts() {
        let mk = |len| series(Array2::from_shape_fn((len, 2), |(t, k)| (t * 2 + k) as f64));
        assert_eq!(make_windows(&mk(200), 96, 96, 1).unwrap().len(), 9);
        assert_eq!(make_windows(&mk(192), 96, 96, 1).unwrap().len(), 1);
        assert!(matches!(
            make_windows(&mk(191), 96, 96, 1),
            Err(Error::SeriesTooShort { .. })
        ));
        let w = make_windows(&mk(20), 4, 3, 5).unwrap();
        assert_eq!(w.len(), window_count(20, 4, 3, 5));
        assert_eq!(w.len(), 3);
        let last = &w.windows[2];
        assert_eq!(last.start, 10);
        assert_eq!(last.input[[0, 0]], 20.0);
        assert_eq!(last.target[[0, 0]], 28.0);
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(synth_sinusoid(4, 1000, 7), synth_sinusoid(4, 1000, 7));
        assert_ne!(synth_sinusoid(4, 1000, 7), synth_sinusoid(4, 1000, 8));
    }

    #[test]
    fn synth_single_clean_cycle() {
        let opts = SynthOptions {
            n_vars: 1,
            length: 8,
            seed: 0,
            noise: 0.0,
            periods: vec![8.0],
            trends: vec![0.0],
        };
        let s = opts.generate();
        assert_eq!(s.values[[0, 0]], 0.0);
        assert!((s.values[[2, 0]] - 1.0).abs() < 1e-15);
        assert!((s.values[[6, 0]] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn synth_column_means_match_analytic_expectation() {
        let opts = SynthOptions::from_seed(4, 1000, 7);
        let s = opts.generate();
        let len = opts.length as f64;
        // noise is the only random term; its mean has standard error noise/sqrt(len)
        let se = opts.noise / len.sqrt();
        for k in 0..4 {
            let sin_mean = (0..opts.length)
                .map(|t| (std::f64::consts::TAU * t as f64 / opts.periods[k]).sin())
                .sum::<f64>()
                / len;
            let trend_mid = opts.trends[k] * (len - 1.0) / 2.0;
            let mean = s.values.column(k).sum() / len;
            assert!(
                (mean - sin_mean - trend_mid).abs() < 3.0 * se,
                "variate {k}: mean {mean}, expected {}",
                sin_mean + trend_mid
            );
        }
    }
}
