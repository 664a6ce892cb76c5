//! Datasets, toy generators, train/test splits, batch schedules and CSV ingestion.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::mogp::ChannelBatch;

/// Inputs shared by all channels plus per-channel outputs with presence masks.
///
/// `y[d][n]` is meaningful only where `mask[d][n]` is set; absent cells hold `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<Vec<f64>>, mask: Vec<Vec<bool>>) -> Result<Self> {
        let n = x.nrows();
        if y.is_empty() || y.len() != mask.len() {
            return Err(GpError::param("dataset needs at least one channel and one mask per channel"));
        }
        for (d, (yd, md)) in y.iter().zip(&mask).enumerate() {
            if yd.len() != n || md.len() != n {
                return Err(GpError::param(format!(
                    "channel {d}: {} outputs and {} mask entries for {n} inputs",
                    yd.len(),
                    md.len()
                )));
            }
            if yd.iter().zip(md).any(|(v, &m)| m && !v.is_finite()) {
                return Err(GpError::param(format!("channel {d} has a non-finite output")));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GpError::param("dataset inputs must be finite"));
        }
        Ok(Dataset { x, y, mask })
    }

    /// Single fully observed channel.
    pub fn single(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        let n = y.len();
        Self::new(x, vec![y], vec![vec![true; n]])
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self, d: usize) -> &[f64] {
        &self.y[d]
    }

    pub fn mask(&self, d: usize) -> &[bool] {
        &self.mask[d]
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_channels(&self) -> usize {
        self.y.len()
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.iter().map(|yd| idx.iter().map(|&i| yd[i]).collect()).collect(),
            mask: self.mask.iter().map(|md| idx.iter().map(|&i| md[i]).collect()).collect(),
        }
    }

    /// Observed rows of channel `d` among `idx`.
    pub fn channel(&self, d: usize, idx: &[usize]) -> (DMatrix<f64>, Vec<f64>) {
        let rows: Vec<usize> = idx.iter().copied().filter(|&i| self.mask[d][i]).collect();
        (self.x.select_rows(&rows), rows.iter().map(|&i| self.y[d][i]).collect())
    }

    /// Observed rows of every channel, as one batch.
    pub fn to_channel_batch(&self) -> Result<ChannelBatch> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch_for(&all, &vec![true; self.n_channels()])
    }

    /// Batch over rows `idx` with channel `d` kept only where `active[d]`.
    pub fn batch_for(&self, idx: &[usize], active: &[bool]) -> Result<ChannelBatch> {
        let channels = (0..self.n_channels())
            .map(|d| {
                if !active[d] {
                    return None;
                }
                let (x, y) = self.channel(d, idx);
                (!y.is_empty()).then_some((x, y))
            })
            .collect();
        ChannelBatch::new(channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    /// One output, a sum of three sinusoids.
    Single,
    /// Two outputs mixing two latent sinusoid sums.
    MultiQ2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub n: usize,
    /// Gaussian noise standard deviation per output channel.
    pub noise: Vec<f64>,
    #[serde(default = "unit_range")]
    pub range: [f64; 2],
}

fn unit_range() -> [f64; 2] {
    [0.0, 1.0]
}

impl ToySpec {
    pub fn single(n: usize) -> Self {
        ToySpec {
            kind: ToyKind::Single,
            n,
            noise: vec![1.5],
            range: unit_range(),
        }
    }

    pub fn multi(n: usize) -> Self {
        ToySpec {
            kind: ToyKind::MultiQ2,
            n,
            noise: vec![1.0, 2.0],
            range: unit_range(),
        }
    }

    pub fn n_outputs(&self) -> usize {
        match self.kind {
            ToyKind::Single => 1,
            ToyKind::MultiQ2 => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(GpError::param("toy dataset needs n ≥ 1"));
        }
        if self.noise.len() != self.n_outputs() {
            return Err(GpError::param(format!(
                "toy kind {:?} needs {} noise levels, got {}",
                self.kind,
                self.n_outputs(),
                self.noise.len()
            )));
        }
        if self.noise.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(GpError::param("toy noise levels must be finite and non-negative"));
        }
        if !(self.range[0] < self.range[1]) || self.range.iter().any(|v| !v.is_finite()) {
            return Err(GpError::param("toy input range must satisfy lo < hi"));
        }
        Ok(())
    }
}

/// Mixing weights of the two-output toy; row `d` holds the weights of output `d`.
pub const TOY_MIXING: [[f64; 2]; 2] = [[-0.5, 0.1], [-0.1, 0.6]];

pub fn toy_u1(x: f64) -> f64 {
    4.5 * (2.0 * PI * x + 1.5 * PI).cos() - 3.0 * (4.3 * PI * x + 0.3 * PI).sin() + 5.0 * (7.0 * PI * x + 2.4 * PI).cos()
}

pub fn toy_u2(x: f64) -> f64 {
    4.5 * (1.5 * PI * x + 0.5 * PI).cos() + 5.0 * (3.0 * PI * x + 1.5 * PI).sin() - 5.5 * (8.0 * PI * x + 0.25 * PI).cos()
}

/// A generated toy problem with its noiseless ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub dataset: Dataset,
    /// `latents[q][n] = u_q(x_n)`.
    pub latents: Vec<Vec<f64>>,
    /// `D × Q`, `f_d = Σ_q mixing[(d, q)] u_q`.
    pub mixing: DMatrix<f64>,
    /// `noise[d][n] = y_d(x_n) − f_d(x_n)`.
    pub noise: Vec<Vec<f64>>,
}

impl ToyData {
    /// Noiseless output `d` at every input, recomputed from the latents.
    pub fn clean_output(&self, d: usize) -> Vec<f64> {
        (0..self.dataset.len())
            .map(|n| {
                (0..self.latents.len())
                    .map(|q| self.mixing[(d, q)] * self.latents[q][n])
                    .sum()
            })
            .collect()
    }
}

pub fn generate_toy(spec: &ToySpec, seed: u64) -> Result<ToyData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = spec.range;
    let xs: Vec<f64> = (0..spec.n).map(|_| rng.random_range(lo..hi)).collect();
    let (latents, mixing) = match spec.kind {
        ToyKind::Single => (vec![xs.iter().map(|&x| toy_u1(x)).collect::<Vec<_>>()], DMatrix::from_element(1, 1, 1.0)),
        ToyKind::MultiQ2 => (
            vec![xs.iter().map(|&x| toy_u1(x)).collect(), xs.iter().map(|&x| toy_u2(x)).collect()],
            DMatrix::from_fn(2, 2, |d, q| TOY_MIXING[d][q]),
        ),
    };
    let mut data = ToyData {
        dataset: Dataset::single(DMatrix::from_column_slice(spec.n, 1, &xs), vec![0.0; spec.n])?,
        latents,
        mixing,
        noise: Vec::new(),
    };
    let mut ys = Vec::with_capacity(spec.n_outputs());
    for (d, &sigma) in spec.noise.iter().enumerate() {
        let clean = data.clean_output(d);
        let eps: Vec<f64> = (0..spec.n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        ys.push(clean.iter().zip(&eps).map(|(f, e)| f + e).collect());
        data.noise.push(eps);
    }
    let masks = vec![vec![true; spec.n]; ys.len()];
    data.dataset = Dataset::new(data.dataset.x.clone(), ys, masks)?;
    Ok(data)
}

/// Two interleaved crescents with 0/1 labels, rescaled to roughly `[-2.5, 2.5]²`.
pub fn generate_banana(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(GpError::param("banana data needs n ≥ 1 and a finite non-negative noise"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let theta = rng.random_range(0.0..PI);
        let (a, b) = if label == 0 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        x[(i, 0)] = 2.0 * (a + noise * e1 - 0.5);
        x[(i, 1)] = 2.0 * (b + noise * e2 - 0.25);
        y.push(label as f64);
    }
    Dataset::single(x, y)
}

/// Monthly counts with an 11-year cycle of random peak heights. Inputs are
/// rescaled to `[0, 1]`; outputs are raw non-negative counts.
pub fn generate_solar(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(GpError::param("solar data needs at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = 132.0;
    let n_cycles = (n as f64 / period).ceil() as usize + 1;
    let peaks: Vec<f64> = (0..n_cycles).map(|_| rng.random_range(60.0..200.0)).collect();
    let mut y = Vec::with_capacity(n);
    for month in 0..n {
        let phase = (month as f64 % period) / period;
        let shape = (PI * phase.powf(0.7)).sin().powi(2);
        let level = peaks[(month as f64 / period) as usize] * shape;
        let e: f64 = rng.sample(StandardNormal);
        y.push((level * (1.0 + 0.15 * e) + 3.0 * e.abs()).max(0.0).round());
    }
    let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
    Dataset::single(x, y)
}

/// Seeded uniform split; returns `(train, test)` row indices, each sorted.
/// The test set has `⌊n·test_fraction⌋` rows.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(GpError::param(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n_test = (n as f64 * test_fraction).floor() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

pub fn split_train_test(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.len(), test_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Contiguous partitions in order of the first input coordinate.
    Streaming,
    /// Streaming, with each batch also taking a random share of the previous partition.
    Overlapping,
    /// Random partitions spread over the whole domain.
    Incremental,
    /// A warm-up block in input order, then one observation per step.
    OneSample,
    /// Streaming partitions with a single active channel per step, cycling through channels.
    AsyncSwitching,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSchedule {
    pub mode: ScheduleMode,
    /// Number of steps. Ignored by `OneSample`, whose step count follows from the data.
    #[serde(default)]
    pub steps: usize,
    #[serde(default = "default_overlap")]
    pub overlap_fraction: f64,
    /// Size of the first block in `OneSample` mode.
    #[serde(default)]
    pub warmup: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_overlap() -> f64 {
    0.2
}

impl BatchSchedule {
    pub fn new(mode: ScheduleMode, steps: usize) -> Self {
        BatchSchedule {
            mode,
            steps,
            overlap_fraction: default_overlap(),
            warmup: 0,
            seed: 0,
        }
    }

    pub fn validate(&self, n: usize, n_channels: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(GpError::param(format!(
                "overlap fraction must lie in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        match self.mode {
            ScheduleMode::OneSample => {
                if self.warmup > n {
                    return Err(GpError::param(format!("warm-up of {} exceeds {n} observations", self.warmup)));
                }
            }
            _ => {
                if self.steps == 0 {
                    return Err(GpError::param("schedule needs at least one step"));
                }
                if self.steps > n {
                    return Err(GpError::param(format!("{} steps exceed {n} observations", self.steps)));
                }
            }
        }
        if self.mode == ScheduleMode::AsyncSwitching && n_channels < 2 {
            return Err(GpError::param("channel switching needs at least two channels"));
        }
        Ok(())
    }
}

/// One step of a schedule, as row indices into the scheduled dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    /// Rows owned by this step's region.
    pub region: Vec<usize>,
    /// Rows delivered for training at this step.
    pub batch: Vec<usize>,
    /// Channels delivering observations at this step.
    pub active: Vec<bool>,
}

fn input_order(x: &DMatrix<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&a, &b| x[(a, 0)].total_cmp(&x[(b, 0)]).then(a.cmp(&b)));
    order
}

/// Split `items` into `t` contiguous chunks whose sizes differ by at most one.
fn chunks(items: &[usize], t: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    (0..t).map(|k| items[k * n / t..(k + 1) * n / t].to_vec()).collect()
}

pub fn schedule_partitions(ds: &Dataset, sched: &BatchSchedule) -> Result<Vec<Partition>> {
    let n = ds.len();
    let n_ch = ds.n_channels();
    sched.validate(n, n_ch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let all_on = vec![true; n_ch];
    let plain = |regions: Vec<Vec<usize>>| -> Vec<Partition> {
        regions
            .into_iter()
            .map(|r| Partition {
                batch: r.clone(),
                region: r,
                active: all_on.clone(),
            })
            .collect()
    };
    let parts = match sched.mode {
        ScheduleMode::Streaming => plain(chunks(&input_order(ds.x()), sched.steps)),
        ScheduleMode::Incremental => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            plain(chunks(&perm, sched.steps).into_iter().map(sorted).collect())
        }
        ScheduleMode::Overlapping => {
            let regions = chunks(&input_order(ds.x()), sched.steps);
            let mut batches = regions.clone();
            for t in 1..regions.len() {
                let k = (sched.overlap_fraction * regions[t - 1].len() as f64).floor() as usize;
                let mut prev = regions[t - 1].clone();
                prev.shuffle(&mut rng);
                let moved = &prev[..k];
                batches[t - 1].retain(|i| !moved.contains(i));
                batches[t].extend_from_slice(moved);
            }
            regions
                .into_iter()
                .zip(batches)
                .map(|(region, batch)| Partition {
                    region,
                    batch,
                    active: all_on.clone(),
                })
                .collect()
        }
        ScheduleMode::OneSample => {
            let order = input_order(ds.x());
            let mut regions = Vec::new();
            if sched.warmup > 0 {
                regions.push(order[..sched.warmup].to_vec());
            }
            regions.extend(order[sched.warmup..].iter().map(|&i| vec![i]));
            plain(regions)
        }
        ScheduleMode::AsyncSwitching => chunks(&input_order(ds.x()), sched.steps)
            .into_iter()
            .enumerate()
            .map(|(t, r)| Partition {
                batch: r.clone(),
                region: r,
                active: (0..n_ch).map(|d| d == t % n_ch).collect(),
            })
            .collect(),
    };
    Ok(parts)
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

pub fn schedule_batches(ds: &Dataset, sched: &BatchSchedule) -> Result<Vec<ChannelBatch>> {
    schedule_partitions(ds, sched)?
        .iter()
        .map(|p| ds.batch_for(&p.batch, &p.active))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    Input,
    Output(usize),
    Ignore,
}

impl TryFrom<String> for ColumnRole {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "input" => Ok(ColumnRole::Input),
            "ignore" => Ok(ColumnRole::Ignore),
            _ => s
                .strip_prefix("output:")
                .and_then(|d| d.parse().ok())
                .map(ColumnRole::Output)
                .ok_or_else(|| format!("unknown column role {s:?}; expected input, output:<d> or ignore")),
        }
    }
}

impl From<ColumnRole> for String {
    fn from(r: ColumnRole) -> String {
        match r {
            ColumnRole::Input => "input".into(),
            ColumnRole::Output(d) => format!("output:{d}"),
            ColumnRole::Ignore => "ignore".into(),
        }
    }
}

impl Serialize for ColumnRole {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&String::from(*self))
    }
}

impl<'de> Deserialize<'de> for ColumnRole {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        ColumnRole::try_from(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    Log1p,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: ColumnRole,
    #[serde(default)]
    pub transform: Transform,
}

/// Read a headed CSV file. Columns not named in `schema` are skipped. Inputs
/// must be present in every row; an empty output cell marks the channel
/// absent for that row.
pub fn load_csv(path: impl AsRef<Path>, schema: &[ColumnSpec]) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| GpError::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &[ColumnSpec]) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| ingestion(1, "<header>", e.to_string()))?
        .clone();
    let position: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let mut inputs = Vec::new();
    let mut outputs: Vec<(usize, usize, &ColumnSpec)> = Vec::new();
    for spec in schema {
        let Some(&col) = position.get(spec.name.as_str()) else {
            return Err(ingestion(1, &spec.name, "column missing from header".into()));
        };
        match spec.role {
            ColumnRole::Input => inputs.push((col, spec)),
            ColumnRole::Output(d) => outputs.push((d, col, spec)),
            ColumnRole::Ignore => {}
        }
    }
    if inputs.is_empty() || outputs.is_empty() {
        return Err(GpError::Config("csv schema needs at least one input and one output column".into()));
    }
    let n_ch = outputs.iter().map(|o| o.0).max().unwrap_or(0) + 1;
    for d in 0..n_ch {
        let count = outputs.iter().filter(|o| o.0 == d).count();
        if count != 1 {
            return Err(GpError::Config(format!("output channel {d} is mapped by {count} columns")));
        }
    }
    outputs.sort_by_key(|o| o.0);

    let mut xs = Vec::new();
    let mut ys = vec![Vec::new(); n_ch];
    let mut masks = vec![Vec::new(); n_ch];
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| ingestion(line, "<record>", e.to_string()))?;
        for &(col, spec) in &inputs {
            let cell = rec.get(col).unwrap_or("").trim();
            if cell.is_empty() {
                return Err(ingestion(line, &spec.name, "missing input value".into()));
            }
            xs.push(parse_cell(cell, line, spec)?);
        }
        for &(d, col, spec) in &outputs {
            let cell = rec.get(col).unwrap_or("").trim();
            if cell.is_empty() {
                ys[d].push(0.0);
                masks[d].push(false);
            } else {
                ys[d].push(parse_cell(cell, line, spec)?);
                masks[d].push(true);
            }
        }
    }
    let n = masks[0].len();
    if n == 0 {
        return Err(ingestion(2, "<record>", "file has no data rows".into()));
    }
    Dataset::new(DMatrix::from_row_slice(n, inputs.len(), &xs), ys, masks)
}

fn parse_cell(cell: &str, line: usize, spec: &ColumnSpec) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| ingestion(line, &spec.name, format!("cannot parse {cell:?} as a number")))?;
    if !v.is_finite() {
        return Err(ingestion(line, &spec.name, format!("non-finite value {cell:?}")));
    }
    match spec.transform {
        Transform::None => Ok(v),
        Transform::Log1p if v > -1.0 => Ok(v.ln_1p()),
        Transform::Log1p => Err(ingestion(line, &spec.name, format!("log1p undefined at {v}"))),
    }
}

fn ingestion(row: usize, column: &str, message: String) -> GpError {
    GpError::Ingestion {
        row,
        column: column.to_string(),
        message,
    }
}
