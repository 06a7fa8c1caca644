//! CSV ingestion, chronological splits, standardized sliding windows,
//! synthetic signals and the last-value baseline.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to per-variate standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// A multivariate series stored row-major as `time × variates`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    values: Vec<f64>,
    variates: usize,
    pub names: Vec<String>,
    pub timestamps: Option<Vec<String>>,
}

impl RawSeries {
    pub fn new(values: Vec<f64>, names: Vec<String>) -> Result<Self> {
        let m = names.len();
        if m == 0 || !values.len().is_multiple_of(m) {
            return Err(Error::Data(format!(
                "{} values do not form rows of {m} variates",
                values.len()
            )));
        }
        Ok(RawSeries {
            values,
            variates: m,
            names,
            timestamps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.variates
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn variates(&self) -> usize {
        self.variates
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.variates..(t + 1) * self.variates]
    }

    pub fn column(&self, m: usize) -> Vec<f64> {
        self.values.iter().skip(m).step_by(self.variates).copied().collect()
    }

    /// Rows `range` as a `[len, M]` tensor.
    pub fn slice(&self, range: Range<usize>) -> Tensor {
        let m = self.variates;
        Tensor::new(
            vec![range.len(), m],
            self.values[range.start * m..range.end * m].to_vec(),
        )
        .expect("row slice")
    }
}

/// CSV layout options; `None` means detect from the first row.
#[derive(Clone, Copy, Debug, Default)]
pub struct CsvOptions {
    pub has_header: Option<bool>,
    pub datetime_first_column: Option<bool>,
}

fn is_number(cell: &str) -> bool {
    cell.trim().parse::<f64>().is_ok()
}

/// Loads a comma-separated numeric table. Unless `opts` says otherwise, a
/// first row without any numeric cell is the header and a non-numeric first
/// cell in the first data row marks a timestamp column. Any other
/// non-numeric or missing cell is an error carrying its 1-based data row
/// and column.
pub fn load_csv(path: impl AsRef<Path>, opts: CsvOptions) -> Result<RawSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        records.push(rec);
    }
    let first = records
        .first()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let has_header = opts
        .has_header
        .unwrap_or_else(|| first.iter().all(|c| !is_number(c)));
    let data_start = usize::from(has_header);
    let datetime = opts.datetime_first_column.unwrap_or_else(|| {
        records
            .get(data_start)
            .map(|r| !is_number(&r[0]))
            .unwrap_or(false)
    });
    let skip = usize::from(datetime);
    let width = first.len();
    if width <= skip {
        return Err(Error::Data(format!("{}: no numeric columns", path.display())));
    }
    let m = width - skip;
    let names: Vec<String> = if has_header {
        first.iter().skip(skip).map(str::to_string).collect()
    } else {
        (0..m).map(|i| format!("v{i}")).collect()
    };
    let mut values = Vec::with_capacity((records.len() - data_start) * m);
    let mut stamps = Vec::new();
    for (r, rec) in records.iter().enumerate().skip(data_start) {
        let row = r - data_start + 1;
        if rec.len() != width {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                row,
                column: rec.len().min(width) + 1,
                msg: format!("expected {width} cells, found {}", rec.len()),
            });
        }
        if datetime {
            stamps.push(rec[0].to_string());
        }
        for (c, cell) in rec.iter().enumerate().skip(skip) {
            let v: f64 = cell.parse().map_err(|_| Error::Csv {
                path: path.to_path_buf(),
                row,
                column: c + 1,
                msg: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    row,
                    column: c + 1,
                    msg: format!("non-finite cell {cell:?}"),
                });
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let mut series = RawSeries::new(values, names)?;
    if datetime {
        series.timestamps = Some(stamps);
    }
    log::info!(
        "loaded {}: {} rows x {} variates",
        path.display(),
        series.len(),
        series.variates()
    );
    Ok(series)
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(std::io::Error::new(
                io.kind(),
                format!("{}: {io}", path.display()),
            )),
            _ => unreachable!(),
        },
        _ => Error::Data(format!("{}: {e}", path.display())),
    }
}

/// How a series is divided into train/val/test.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    Ratios { train: f64, val: f64, test: f64 },
    /// 12/4/4 months of 30 days at the given number of rows per hour.
    EttMonths { rows_per_hour: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSpec::Ratios { train, val, test } => write!(f, "{train},{val},{test}"),
            SplitSpec::EttMonths { rows_per_hour: 1 } => write!(f, "ett-hourly"),
            SplitSpec::EttMonths { rows_per_hour: 4 } => write!(f, "ett-minute"),
            SplitSpec::EttMonths { rows_per_hour } => write!(f, "ett-{rows_per_hour}"),
        }
    }
}

impl FromStr for SplitSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ett-hourly" => return Ok(SplitSpec::EttMonths { rows_per_hour: 1 }),
            "ett-minute" => return Ok(SplitSpec::EttMonths { rows_per_hour: 4 }),
            _ => {}
        }
        if let Some(n) = s.strip_prefix("ett-") {
            if let Ok(rows_per_hour) = n.parse() {
                return Ok(SplitSpec::EttMonths { rows_per_hour });
            }
        }
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("invalid split {s:?}")))?;
        match parts[..] {
            [train, val, test] => Ok(SplitSpec::Ratios { train, val, test }),
            _ => Err(Error::Config(format!("split needs three ratios, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    pub fn get(&self, s: Split) -> Range<usize> {
        match s {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

/// Contiguous, non-overlapping train/val/test ranges.
///
/// Ratio boundaries are `floor(r · len)` cumulatively; when the ratios sum
/// to one the test range runs to the end of the series.
pub fn chronological_split(len: usize, spec: &SplitSpec) -> Result<SplitRanges> {
    let ranges = match *spec {
        SplitSpec::Ratios { train, val, test } => {
            if !(train > 0.0 && val > 0.0 && test > 0.0) {
                return Err(Error::Data(format!(
                    "split ratios must be positive, got {train}/{val}/{test}"
                )));
            }
            let sum = train + val + test;
            if sum > 1.0 + 1e-9 {
                return Err(Error::Data(format!("split ratios sum to {sum} > 1")));
            }
            // tolerance keeps exact products like 0.7 · 17420 from flooring low
            let fl = |r: f64| (r * len as f64 + 1e-9).floor() as usize;
            let a = fl(train);
            let b = a + fl(val);
            let c = if (sum - 1.0).abs() <= 1e-9 {
                len
            } else {
                (b + fl(test)).min(len)
            };
            SplitRanges {
                train: 0..a,
                val: a..b,
                test: b..c,
            }
        }
        SplitSpec::EttMonths { rows_per_hour } => {
            let month = 30 * 24 * rows_per_hour;
            let (a, b, c) = (12 * month, 16 * month, 20 * month);
            if len < c {
                return Err(Error::Data(format!(
                    "ETT month split needs {c} rows, series has {len}"
                )));
            }
            SplitRanges {
                train: 0..a,
                val: a..b,
                test: b..c,
            }
        }
    };
    for s in [Split::Train, Split::Val, Split::Test] {
        if ranges.get(s).is_empty() {
            return Err(Error::Data(format!(
                "series of length {len} leaves the {} split empty",
                s.name()
            )));
        }
    }
    Ok(ranges)
}

/// Per-variate standardization fitted on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Split the statistics were computed on.
    pub source: Split,
}

impl Scaler {
    pub fn fit(rows: &[f64], variates: usize, source: Split) -> Self {
        let n = (rows.len() / variates).max(1) as f64;
        let mut mean = vec![0.0; variates];
        for row in rows.chunks(variates) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; variates];
        for row in rows.chunks(variates) {
            for k in 0..variates {
                var[k] += (row[k] - mean[k]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Scaler { mean, std, source }
    }

    pub fn variates(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, rows: &mut [f64]) {
        let m = self.variates();
        for row in rows.chunks_mut(m) {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
    }

    pub fn inverse(&self, rows: &mut [f64]) {
        let m = self.variates();
        for row in rows.chunks_mut(m) {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd + mu;
            }
        }
    }
}

/// Standardized sliding windows over one split.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    pub split: Split,
    pub lookback: usize,
    pub horizon: usize,
    pub scaler: Scaler,
    /// Global index of the first row of the split.
    pub offset: usize,
    data: Vec<f64>,
    variates: usize,
}

impl WindowedDataset {
    pub fn variates(&self) -> usize {
        self.variates
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.variates
    }

    /// `rows − L − T + 1`, clamped at zero.
    pub fn len(&self) -> usize {
        (self.rows() + 1).saturating_sub(self.lookback + self.horizon)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Standardized `L × M` input of window `i`.
    pub fn input(&self, i: usize) -> &[f64] {
        let m = self.variates;
        &self.data[i * m..(i + self.lookback) * m]
    }

    /// Standardized `T × M` target following input `i`.
    pub fn target(&self, i: usize) -> &[f64] {
        let m = self.variates;
        let s = i + self.lookback;
        &self.data[s * m..(s + self.horizon) * m]
    }

    /// Global row indices covered by window `i` (input then target).
    pub fn span(&self, i: usize) -> Range<usize> {
        self.offset + i..self.offset + i + self.lookback + self.horizon
    }

    /// Stacks windows into `[B, L, M]` inputs and `[B, T, M]` targets.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let m = self.variates;
        let mut x = Vec::with_capacity(idx.len() * self.lookback * m);
        let mut y = Vec::with_capacity(idx.len() * self.horizon * m);
        for &i in idx {
            x.extend_from_slice(self.input(i));
            y.extend_from_slice(self.target(i));
        }
        (
            Tensor::new(vec![idx.len(), self.lookback, m], x).expect("batch"),
            Tensor::new(vec![idx.len(), self.horizon, m], y).expect("batch"),
        )
    }
}

#[derive(Clone, Debug)]
pub struct Windowed {
    pub ranges: SplitRanges,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

impl Windowed {
    pub fn get(&self, s: Split) -> &WindowedDataset {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Builds stride-1 windows for every split, standardized with train-split
/// statistics.
pub fn make_windows(
    series: &RawSeries,
    ranges: &SplitRanges,
    lookback: usize,
    horizon: usize,
) -> Result<Windowed> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::Data("look-back and horizon must be positive".into()));
    }
    let m = series.variates();
    if ranges.test.end > series.len() {
        return Err(Error::Data(format!(
            "split end {} beyond series length {}",
            ranges.test.end,
            series.len()
        )));
    }
    let rows = |r: &Range<usize>| &series.values()[r.start * m..r.end * m];
    let scaler = Scaler::fit(rows(&ranges.train), m, Split::Train);
    let build = |split: Split| {
        let r = ranges.get(split);
        let mut data = rows(&r).to_vec();
        scaler.transform(&mut data);
        let ds = WindowedDataset {
            split,
            lookback,
            horizon,
            scaler: scaler.clone(),
            offset: r.start,
            data,
            variates: m,
        };
        if ds.is_empty() {
            log::warn!(
                "{} split has {} rows, fewer than L + T = {}; no windows",
                split.name(),
                r.len(),
                lookback + horizon
            );
        }
        ds
    };
    let out = Windowed {
        ranges: ranges.clone(),
        train: build(Split::Train),
        val: build(Split::Val),
        test: build(Split::Test),
    };
    if out.train.is_empty() {
        return Err(Error::Data(format!(
            "train split of {} rows yields no windows for L = {lookback}, T = {horizon}",
            ranges.train.len()
        )));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Sine,
    SinePlusNoise,
    Noise,
    MixedChannels,
}

impl FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(SynthKind::Sine),
            "sine-plus-noise" => Ok(SynthKind::SinePlusNoise),
            "noise" => Ok(SynthKind::Noise),
            "mixed-channels" => Ok(SynthKind::MixedChannels),
            _ => Err(Error::Config(format!(
                "unknown synthetic kind {s:?}; valid: sine, sine-plus-noise, noise, mixed-channels"
            ))),
        }
    }
}

/// Period of every synthetic sinusoid, in steps.
pub const SYNTH_PERIOD: usize = 24;

/// Deterministic synthetic series.
///
/// Sinusoids have unit amplitude, period 24 and a per-variate phase of
/// `2πm/M`. Sine-plus-noise adds Gaussian noise at `snr_db` relative to the
/// sinusoid power of 1/2. Pure noise is unit-variance. Mixed-channels makes
/// the first `ceil(M/2)` variates sinusoids and the rest Gaussian noise of
/// variance 1/2.
pub fn synth_generate(
    kind: SynthKind,
    length: usize,
    variates: usize,
    snr_db: f64,
    seed: u64,
) -> Result<RawSeries> {
    if length == 0 || variates == 0 {
        return Err(Error::Data("synthetic length and variates must be positive".into()));
    }
    if kind == SynthKind::SinePlusNoise && !snr_db.is_finite() {
        return Err(Error::Data(format!("snr_db must be finite, got {snr_db}")));
    }
    if kind == SynthKind::MixedChannels && variates < 2 {
        return Err(Error::Data("mixed-channels needs at least 2 variates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sine_power = 0.5;
    let noise_std = match kind {
        SynthKind::Sine => 0.0,
        SynthKind::SinePlusNoise => (sine_power / 10f64.powf(snr_db / 10.0)).sqrt(),
        SynthKind::Noise => 1.0,
        SynthKind::MixedChannels => sine_power.sqrt(),
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sine_channels = match kind {
        SynthKind::MixedChannels => variates.div_ceil(2),
        SynthKind::Noise => 0,
        _ => variates,
    };
    let mut values = Vec::with_capacity(length * variates);
    for t in 0..length {
        for m in 0..variates {
            let phase = 2.0 * std::f64::consts::PI * m as f64 / variates as f64;
            let w = 2.0 * std::f64::consts::PI * t as f64 / SYNTH_PERIOD as f64;
            let v = match kind {
                SynthKind::Sine => (w + phase).sin(),
                SynthKind::SinePlusNoise => (w + phase).sin() + noise_std * normal.sample(&mut rng),
                SynthKind::Noise => normal.sample(&mut rng),
                SynthKind::MixedChannels if m < sine_channels => (w + phase).sin(),
                SynthKind::MixedChannels => noise_std * normal.sample(&mut rng),
            };
            values.push(v);
        }
    }
    let names = (0..variates).map(|i| format!("v{i}")).collect();
    RawSeries::new(values, names)
}

/// Number of sinusoidal variates in a mixed-channels series.
pub fn mixed_sine_channels(variates: usize) -> usize {
    variates.div_ceil(2)
}

/// Repeats the last observed row `horizon` times: `[L, M] -> [T, M]`.
pub fn naive_baseline_forecast(input: &Tensor, horizon: usize) -> Result<Tensor> {
    let [l, m] = *input.shape() else {
        return Err(Error::invalid("naive_baseline", "input must be [L, M]"));
    };
    if l == 0 {
        return Err(Error::invalid("naive_baseline", "empty input window"));
    }
    let last = input.row(l - 1);
    let mut out = Vec::with_capacity(horizon * m);
    for _ in 0..horizon {
        out.extend_from_slice(last);
    }
    Tensor::new(vec![horizon, m], out)
}

/// Writes a CSV through a temporary file renamed into place.
pub fn write_csv_atomic(path: impl AsRef<Path>, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(|e| Error::Data(e.to_string()))?;
        for r in rows {
            w.write_record(r).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
    }
    write_atomic(path, &buf)
}

pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Writes a series in the same CSV layout `load_csv` reads.
pub fn write_series(path: impl AsRef<Path>, series: &RawSeries) -> Result<()> {
    let rows: Vec<Vec<String>> = (0..series.len())
        .map(|t| series.row(t).iter().map(|v| v.to_string()).collect())
        .collect();
    write_csv_atomic(path, &series.names, &rows)
}
