//! Frames, dataset schemas, chronological splitting, scaling, sliding
//! windows and the CORR/MSE/MAE metrics.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use chrono::{NaiveDateTime, TimeDelta};

use crate::embedding::TimeFeatures;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ETT_COLUMNS: [&str; 7] = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"];
pub const ETT_TARGET: &str = "OT";

/// Column roster of the AIOps operations-metrics file, target last.
pub const AIOPS_COLUMNS: [&str; 20] = [
    "SP1A-DASD-RESP",
    "SP1A-DASD-RATE",
    "SP1B-DASD-RESP",
    "SP1B-DASD-RATE",
    "SP1C-DASD-RESP",
    "SP1C-DASD-RATE",
    "SP1D-DASD-RESP",
    "SP1D-DASD-RATE",
    "SP1A-MEM",
    "SP1B-MEM",
    "SP1C-MEM",
    "SP1D-MEM",
    "N-TASKS",
    "TPS",
    "SP1A-THOUT",
    "SP1B-THOUT",
    "SP1C-THOUT",
    "SP1D-THOUT",
    "SYSPLEX-MIPS",
    "RESP-TIME",
];
pub const AIOPS_TARGET: &str = "RESP-TIME";
pub const AIOPS_INTERVAL_MINUTES: i64 = 5;

/// Timestamped multichannel series with uniform spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    timestamps: Vec<NaiveDateTime>,
    columns: Vec<String>,
    /// Row-major `len × columns`.
    values: Vec<f64>,
    target: String,
}

impl TimeSeriesFrame {
    /// `values` is row-major. `target` must name one of `columns`.
    pub fn new(timestamps: Vec<NaiveDateTime>, columns: Vec<String>, values: Vec<f64>, target: &str) -> Result<Self> {
        let c = columns.len();
        if timestamps.is_empty() || c == 0 {
            return Err(Error::Data("frame needs at least one row and one column".into()));
        }
        if values.len() != timestamps.len() * c {
            return Err(Error::Data(format!(
                "{} values do not fill {} rows of {} columns",
                values.len(),
                timestamps.len(),
                c
            )));
        }
        for (i, name) in columns.iter().enumerate() {
            if columns[..i].contains(name) {
                return Err(Error::Data(format!("duplicate column {name}")));
            }
        }
        if !columns.iter().any(|n| n == target) {
            return Err(Error::Data(format!("target column {target} not found")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, column {}",
                i / c,
                columns[i % c]
            )));
        }
        if timestamps.len() >= 2 {
            let step = timestamps[1] - timestamps[0];
            if step <= TimeDelta::zero() {
                return Err(Error::Data(format!("timestamps not increasing at row 1 ({})", timestamps[1])));
            }
            for (i, w) in timestamps.windows(2).enumerate() {
                if w[1] - w[0] != step {
                    return Err(Error::Data(format!(
                        "irregular timestamp spacing at row {} ({})",
                        i + 1,
                        w[1]
                    )));
                }
            }
        }
        Ok(TimeSeriesFrame {
            timestamps,
            columns,
            values,
            target: target.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn target_index(&self) -> usize {
        self.column_index(&self.target).unwrap_or(0)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.columns.len() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.columns.len();
        &self.values[row * c..(row + 1) * c]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.value(r, col)).collect()
    }

    /// Spacing between rows; `None` for a single-row frame.
    pub fn interval(&self) -> Option<TimeDelta> {
        (self.len() >= 2).then(|| self.timestamps[1] - self.timestamps[0])
    }

    /// Contiguous rows `start..start+len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Data(format!(
                "slice {start}..{} out of range for {} rows",
                start + len,
                self.len()
            )));
        }
        let c = self.columns.len();
        Ok(TimeSeriesFrame {
            timestamps: self.timestamps[start..start + len].to_vec(),
            columns: self.columns.clone(),
            values: self.values[start * c..(start + len) * c].to_vec(),
            target: self.target.clone(),
        })
    }

    /// Same timestamps and columns with replaced values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        TimeSeriesFrame::new(self.timestamps.clone(), self.columns.clone(), values, &self.target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SchemaKind {
    /// Transformer-load dataset: 7 columns, oil temperature as target.
    Ett,
    /// Operations metrics: 20 columns at 5-minute spacing, response time as target.
    Aiops,
    /// Any numeric columns; target is given explicitly or is the last column.
    Generic,
}

impl SchemaKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemaKind::Ett => "ett",
            SchemaKind::Aiops => "aiops",
            SchemaKind::Generic => "generic",
        }
    }

    pub fn expected_dims(self) -> Option<usize> {
        match self {
            SchemaKind::Ett => Some(ETT_COLUMNS.len()),
            SchemaKind::Aiops => Some(AIOPS_COLUMNS.len()),
            SchemaKind::Generic => None,
        }
    }

    /// Target column for a header: the schema's named target when present,
    /// otherwise the last column.
    pub fn resolve_target<'a>(self, columns: &'a [String], explicit: Option<&'a str>) -> Result<&'a str> {
        if let Some(t) = explicit {
            return columns
                .iter()
                .find(|c| c.as_str() == t)
                .map(String::as_str)
                .ok_or_else(|| Error::Data(format!("target column {t} not found")));
        }
        let named = match self {
            SchemaKind::Ett => Some(ETT_TARGET),
            SchemaKind::Aiops => Some(AIOPS_TARGET),
            SchemaKind::Generic => None,
        };
        if let Some(n) = named.and_then(|n| columns.iter().find(|c| c.as_str() == n)) {
            return Ok(n);
        }
        columns
            .last()
            .map(String::as_str)
            .ok_or_else(|| Error::Data("no data columns".into()))
    }

    /// Checks dimension count and, for AIOps, the sampling interval.
    pub fn validate(self, frame: &TimeSeriesFrame) -> Result<()> {
        if let Some(d) = self.expected_dims() {
            if frame.n_cols() != d {
                return Err(Error::Data(format!(
                    "{} schema expects {d} data columns, found {}",
                    self.name(),
                    frame.n_cols()
                )));
            }
        }
        if self == SchemaKind::Aiops {
            if let Some(step) = frame.interval() {
                if step != TimeDelta::minutes(AIOPS_INTERVAL_MINUTES) {
                    return Err(Error::Data(format!(
                        "aiops schema expects {AIOPS_INTERVAL_MINUTES}-minute spacing, found {} s",
                        step.num_seconds()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sizes of the chronological 6:2:2 split of `len` rows: train takes
/// `floor(0.6·len)`, validation and test share the rest equally with any odd
/// row going to test.
pub fn split_sizes(len: usize) -> (usize, usize, usize) {
    let train = len * 6 / 10;
    let val = (len - train) / 2;
    (train, val, len - train - val)
}

/// Chronological 6:2:2 split. Every part must hold at least `min_len` rows.
pub fn split_622(frame: &TimeSeriesFrame, min_len: usize) -> Result<(TimeSeriesFrame, TimeSeriesFrame, TimeSeriesFrame)> {
    let (a, b, c) = split_sizes(frame.len());
    for (name, n) in [("train", a), ("val", b), ("test", c)] {
        if n < min_len.max(1) {
            return Err(Error::Data(format!(
                "{name} split has {n} rows, fewer than the {} needed for one window",
                min_len.max(1)
            )));
        }
    }
    Ok((frame.slice(0, a)?, frame.slice(a, b)?, frame.slice(a + b, c)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScaleMode {
    #[default]
    StandardizePerDim,
    NormalizePerDim,
    StandardizeGlobal,
    NormalizeGlobal,
    None,
}

impl ScaleMode {
    pub const ALL: [ScaleMode; 5] = [
        ScaleMode::StandardizePerDim,
        ScaleMode::NormalizePerDim,
        ScaleMode::StandardizeGlobal,
        ScaleMode::NormalizeGlobal,
        ScaleMode::None,
    ];
}

/// Which rows the scaler statistics are fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FitScope {
    #[default]
    TrainOnly,
    TrainPlusTest,
}

/// Affine per-column transform `(x − offset) / scale`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Scaler {
    pub mode: ScaleMode,
    pub scope: FitScope,
    pub columns: Vec<String>,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

const MIN_STD: f64 = 1e-12;

impl Scaler {
    /// Fits on the rows of every frame in `frames` (all must share columns).
    pub fn fit(mode: ScaleMode, scope: FitScope, frames: &[&TimeSeriesFrame]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Data("no rows to fit the scaler on".into()))?;
        let cols = first.columns().to_vec();
        if let Some(f) = frames.iter().find(|f| f.columns() != cols.as_slice()) {
            return Err(Error::Data(format!("column mismatch: {:?} vs {:?}", f.columns(), cols)));
        }
        let c = cols.len();
        let n: usize = frames.iter().map(|f| f.len()).sum();
        let column = |j: usize| frames.iter().flat_map(move |f| (0..f.len()).map(move |r| f.value(r, j)));
        let all = || frames.iter().flat_map(|f| f.values().iter().copied());
        let (offset, scale) = match mode {
            ScaleMode::None => (alloc::vec![0.0; c], alloc::vec![1.0; c]),
            ScaleMode::StandardizePerDim => {
                let mut off = Vec::with_capacity(c);
                let mut sc = Vec::with_capacity(c);
                for (j, name) in cols.iter().enumerate() {
                    let (m, s) = mean_std(column(j), n);
                    if s <= MIN_STD {
                        return Err(Error::ZeroVariance(name.clone()));
                    }
                    off.push(m);
                    sc.push(s);
                }
                (off, sc)
            }
            ScaleMode::StandardizeGlobal => {
                let (m, s) = mean_std(all(), n * c);
                if s <= MIN_STD {
                    return Err(Error::ZeroVariance(cols.join(",")));
                }
                (alloc::vec![m; c], alloc::vec![s; c])
            }
            ScaleMode::NormalizePerDim => {
                let mut off = Vec::with_capacity(c);
                let mut sc = Vec::with_capacity(c);
                for j in 0..c {
                    let (lo, hi) = min_max(column(j));
                    off.push(lo);
                    sc.push(range_or_one(lo, hi));
                }
                (off, sc)
            }
            ScaleMode::NormalizeGlobal => {
                let (lo, hi) = min_max(all());
                (alloc::vec![lo; c], alloc::vec![range_or_one(lo, hi); c])
            }
        };
        Ok(Scaler {
            mode,
            scope,
            columns: cols,
            offset,
            scale,
        })
    }

    pub fn apply_value(&self, col: usize, x: f64) -> f64 {
        (x - self.offset[col]) / self.scale[col]
    }

    pub fn inverse_value(&self, col: usize, y: f64) -> f64 {
        y * self.scale[col] + self.offset[col]
    }

    fn check(&self, frame: &TimeSeriesFrame) -> Result<()> {
        if frame.columns() != self.columns.as_slice() {
            return Err(Error::Data(format!(
                "scaler fitted on {:?}, frame has {:?}",
                self.columns,
                frame.columns()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        self.check(frame)?;
        let c = self.columns.len();
        let v = frame.values().iter().enumerate().map(|(i, &x)| self.apply_value(i % c, x)).collect();
        frame.with_values(v)
    }

    pub fn inverse(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        self.check(frame)?;
        let c = self.columns.len();
        let v = frame.values().iter().enumerate().map(|(i, &x)| self.inverse_value(i % c, x)).collect();
        frame.with_values(v)
    }

    /// Inverse transform of a `[rows × cols.len()]` tensor whose column `k`
    /// holds frame column `cols[k]`.
    pub fn inverse_tensor(&self, t: &Tensor, cols: &[usize]) -> Result<Tensor> {
        let (_, w) = t.dims2()?;
        if w != cols.len() || cols.iter().any(|&c| c >= self.columns.len()) {
            return Err(Error::shape("inverse scaling", t.shape(), &[cols.len()]));
        }
        let v = t.data().iter().enumerate().map(|(i, &y)| self.inverse_value(cols[i % w], y)).collect();
        Tensor::new(t.shape(), v)
    }
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = xs.clone().sum::<f64>() / nf;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
    (mean, libm::sqrt(var))
}

fn min_max(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

fn range_or_one(lo: f64, hi: f64) -> f64 {
    // a constant column maps to 0 instead of dividing by zero
    if hi - lo > 0.0 {
        hi - lo
    } else {
        1.0
    }
}

/// Scaled splits plus the fitted scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledSplits {
    pub train: TimeSeriesFrame,
    pub val: TimeSeriesFrame,
    pub test: TimeSeriesFrame,
    pub scaler: Scaler,
}

/// Fits on the scope (train, or train and test) and transforms all three.
pub fn fit_apply_scaler(
    train: &TimeSeriesFrame,
    val: &TimeSeriesFrame,
    test: &TimeSeriesFrame,
    mode: ScaleMode,
    scope: FitScope,
) -> Result<ScaledSplits> {
    let scaler = match scope {
        FitScope::TrainOnly => Scaler::fit(mode, scope, &[train])?,
        FitScope::TrainPlusTest => Scaler::fit(mode, scope, &[train, test])?,
    };
    Ok(ScaledSplits {
        train: scaler.apply(train)?,
        val: scaler.apply(val)?,
        test: scaler.apply(test)?,
        scaler,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Task {
    /// Target column only, in and out.
    #[default]
    Univariate,
    /// Every column, in and out.
    Multivariate,
}

/// Window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub input_len: usize,
    pub label_len: usize,
    pub pred_len: usize,
    /// Rows skipped between the window end and the first forecast row.
    pub gap: usize,
    pub task: Task,
}

impl WindowSpec {
    /// Rows spanned by one sample.
    pub fn span(&self) -> usize {
        self.input_len + self.gap + self.pred_len
    }

    /// `len − L_x − h − L_y + 1`, or 0 when a sample does not fit.
    pub fn count(&self, len: usize) -> usize {
        (len + 1).saturating_sub(self.span())
    }
}

/// One supervised sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// First frame row of the encoder window.
    pub start: usize,
    /// `[L_x × d_x]`
    pub enc_values: Tensor,
    /// `[L_x × d_y]`: the output columns over the encoder window; the decoder
    /// warm start is its last `label_len` rows.
    pub enc_targets: Tensor,
    pub enc_stamps: TimeFeatures,
    /// Label rows followed by forecast rows.
    pub dec_stamps: TimeFeatures,
    /// `[L_y × d_y]`
    pub target: Tensor,
}

/// Stride-1 windows over one frame; no window leaves the frame.
#[derive(Debug, Clone)]
pub struct WindowSet {
    frame: TimeSeriesFrame,
    spec: WindowSpec,
    in_cols: Vec<usize>,
    out_cols: Vec<usize>,
    stamps: Vec<[usize; 5]>,
}

impl WindowSet {
    pub fn new(frame: TimeSeriesFrame, spec: WindowSpec) -> Result<Self> {
        if spec.input_len == 0 || spec.pred_len == 0 || spec.label_len > spec.input_len {
            return Err(Error::invalid("window needs input_len ≥ label_len, input_len ≥ 1 and pred_len ≥ 1"));
        }
        if spec.count(frame.len()) == 0 {
            return Err(Error::Data(format!(
                "frame of {} rows is shorter than one window ({} rows)",
                frame.len(),
                spec.span()
            )));
        }
        let cols: Vec<usize> = match spec.task {
            Task::Univariate => alloc::vec![frame.target_index()],
            Task::Multivariate => (0..frame.n_cols()).collect(),
        };
        let stamps = TimeFeatures::from_datetimes(frame.timestamps()).rows().to_vec();
        Ok(WindowSet {
            frame,
            spec,
            in_cols: cols.clone(),
            out_cols: cols,
            stamps,
        })
    }

    pub fn len(&self) -> usize {
        self.spec.count(self.frame.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn frame(&self) -> &TimeSeriesFrame {
        &self.frame
    }

    pub fn d_x(&self) -> usize {
        self.in_cols.len()
    }

    pub fn d_y(&self) -> usize {
        self.out_cols.len()
    }

    /// Frame columns feeding the input channels.
    pub fn input_columns(&self) -> &[usize] {
        &self.in_cols
    }

    /// Frame columns behind the output channels.
    pub fn output_columns(&self) -> &[usize] {
        &self.out_cols
    }

    fn block(&self, start: usize, len: usize, cols: &[usize]) -> Result<Tensor> {
        let mut v = Vec::with_capacity(len * cols.len());
        for r in start..start + len {
            v.extend(cols.iter().map(|&c| self.frame.value(r, c)));
        }
        Tensor::new(&[len, cols.len()], v)
    }

    /// Frame rows of the forecast block of sample `i`.
    pub fn target_rows(&self, i: usize) -> core::ops::Range<usize> {
        let s = i + self.spec.input_len + self.spec.gap;
        s..s + self.spec.pred_len
    }

    pub fn get(&self, i: usize) -> Result<WindowSample> {
        if i >= self.len() {
            return Err(Error::Data(format!("window {i} out of range ({} windows)", self.len())));
        }
        let sp = &self.spec;
        let enc_end = i + sp.input_len;
        let tgt = self.target_rows(i);
        let mut dec = self.stamps[enc_end - sp.label_len..enc_end].to_vec();
        dec.extend_from_slice(&self.stamps[tgt.clone()]);
        Ok(WindowSample {
            start: i,
            enc_values: self.block(i, sp.input_len, &self.in_cols)?,
            enc_targets: self.block(i, sp.input_len, &self.out_cols)?,
            enc_stamps: TimeFeatures::new(self.stamps[i..enc_end].to_vec())?,
            dec_stamps: TimeFeatures::new(dec)?,
            target: self.block(tgt.start, sp.pred_len, &self.out_cols)?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<WindowSample>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Convenience wrapper: every window of `frame`.
pub fn make_windows(frame: &TimeSeriesFrame, spec: WindowSpec) -> Result<WindowSet> {
    WindowSet::new(frame.clone(), spec)
}

/// Flag raised when CORR is undefined.
pub const FLAG_CORR_ZERO_VARIANCE: &str = "corr_zero_variance";

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub corr: f64,
    pub mse: f64,
    pub mae: f64,
    /// Values (or windows, for aggregated metrics) the numbers cover.
    pub n: usize,
    pub flags: Vec<String>,
}

/// Pearson correlation; `None` when either side has no variance or fewer
/// than two points.
pub fn pearson(y: &[f64], yhat: &[f64]) -> Option<f64> {
    let n = y.len();
    if n < 2 {
        return None;
    }
    let my = y.iter().sum::<f64>() / n as f64;
    let mh = yhat.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        let (da, db) = (a - my, b - mh);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let tiny = |ss: f64, m: f64| ss <= 1e-24 * (1.0 + m * m) * n as f64;
    if tiny(sxx, my) || tiny(syy, mh) {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}

/// CORR, MSE and MAE of one series.
pub fn metrics(y: &[f64], yhat: &[f64]) -> Result<Metrics> {
    if y.len() != yhat.len() {
        return Err(Error::shape("metrics", &[y.len()], &[yhat.len()]));
    }
    if y.is_empty() {
        return Err(Error::Data("metrics of an empty series".into()));
    }
    let n = y.len();
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
    let mae = y.iter().zip(yhat).map(|(a, b)| libm::fabs(a - b)).sum::<f64>() / n as f64;
    let mut flags = Vec::new();
    let corr = pearson(y, yhat).unwrap_or_else(|| {
        flags.push(FLAG_CORR_ZERO_VARIANCE.to_string());
        0.0
    });
    Ok(Metrics { corr, mse, mae, n, flags })
}

/// Metrics of `[n × d]` truth and prediction: MSE/MAE over all entries,
/// CORR computed per column and averaged.
pub fn metrics_multi(y: &Tensor, yhat: &Tensor) -> Result<Metrics> {
    if y.shape() != yhat.shape() {
        return Err(Error::shape("metrics", y.shape(), yhat.shape()));
    }
    let (_, d) = y.dims2()?;
    let mut m = metrics(y.data(), yhat.data())?;
    if d > 1 {
        let mut sum = 0.0;
        m.flags.clear();
        for j in 0..d {
            let col = |t: &Tensor| -> Vec<f64> { (0..t.rows()).map(|r| t.at(r, j)).collect() };
            match pearson(&col(y), &col(yhat)) {
                Some(c) => sum += c,
                None => {
                    if m.flags.is_empty() {
                        m.flags.push(FLAG_CORR_ZERO_VARIANCE.to_string());
                    }
                }
            }
        }
        m.corr = sum / d as f64;
    }
    Ok(m)
}

/// Arithmetic mean of per-window metrics.
#[derive(Debug, Clone, Default)]
pub struct MetricMean {
    corr: f64,
    mse: f64,
    mae: f64,
    windows: usize,
    flagged: usize,
}

impl MetricMean {
    pub fn push(&mut self, m: &Metrics) {
        self.corr += m.corr;
        self.mse += m.mse;
        self.mae += m.mae;
        self.windows += 1;
        if !m.flags.is_empty() {
            self.flagged += 1;
        }
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.windows == 0 {
            return Err(Error::Data("no windows to evaluate".into()));
        }
        let n = self.windows as f64;
        let mut flags = Vec::new();
        if self.flagged > 0 {
            flags.push(format!("{FLAG_CORR_ZERO_VARIANCE}:{}", self.flagged));
        }
        Ok(Metrics {
            corr: self.corr / n,
            mse: self.mse / n,
            mae: self.mae / n,
            n: self.windows,
            flags,
        })
    }
}
