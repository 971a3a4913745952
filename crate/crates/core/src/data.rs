//! Raw accelerometer files, synthetic streams, splits and dataset files.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MvftError, ParseErrorKind, Result};
use crate::rng::SeededRng;
use crate::views::{build_views, fit_normalizer, window_stream, SensorWindow, ViewBundle, ViewNormalizer};

/// One line of a WISDM-style raw file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub user: u64,
    pub activity: String,
    pub timestamp: i64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Parses `user,activity,timestamp,x,y,z` with an optional trailing `;`.
/// `line_no` is 1-based and only used in errors.
pub fn parse_raw_line(line: &str, line_no: usize) -> Result<RawRecord> {
    let err = |kind| MvftError::Parse {
        line: line_no,
        kind,
        text: line.to_string(),
    };
    let body = line.trim();
    let body = body.strip_suffix(';').unwrap_or(body).trim_end();
    let fields: Vec<&str> = body.split(',').map(str::trim).collect();
    if fields.len() != 6 {
        return Err(err(ParseErrorKind::FieldCount(fields.len())));
    }
    let user = fields[0]
        .parse::<u64>()
        .map_err(|_| err(ParseErrorKind::BadInteger("user")))?;
    let activity = fields[1];
    if activity.is_empty() {
        return Err(err(ParseErrorKind::EmptyActivity));
    }
    let timestamp = fields[2]
        .parse::<i64>()
        .map_err(|_| err(ParseErrorKind::BadInteger("timestamp")))?;
    let mut xyz = [0.0; 3];
    for (slot, (text, name)) in xyz.iter_mut().zip(fields[3..].iter().zip(["x", "y", "z"])) {
        let v = text.parse::<f64>().map_err(|_| err(ParseErrorKind::BadFloat(name)))?;
        if !v.is_finite() {
            return Err(err(ParseErrorKind::NonFinite(name)));
        }
        *slot = v;
    }
    Ok(RawRecord {
        user,
        activity: activity.to_string(),
        timestamp,
        x: xyz[0],
        y: xyz[1],
        z: xyz[2],
    })
}

/// Every non-blank line as either a record or a parse error, in file order.
#[derive(Debug, Default)]
pub struct ParsedRaw {
    pub records: Vec<RawRecord>,
    pub errors: Vec<MvftError>,
    pub blank_lines: usize,
}

pub fn parse_raw_text(text: &str) -> ParsedRaw {
    let mut out = ParsedRaw::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            out.blank_lines += 1;
            continue;
        }
        match parse_raw_line(line, i + 1) {
            Ok(r) => out.records.push(r),
            Err(e) => out.errors.push(e),
        }
    }
    out
}

pub fn parse_raw_file(path: &Path) -> Result<ParsedRaw> {
    let bytes = fs::read(path)?;
    Ok(parse_raw_text(&String::from_utf8_lossy(&bytes)))
}

/// A run of samples from one user doing one activity, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub user: u64,
    pub label: usize,
    pub samples: Vec<Vec<f64>>,
    pub timestamps: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordStreams {
    pub segments: Vec<Segment>,
    /// Activity names indexed by class, in order of first appearance.
    pub label_names: Vec<String>,
    /// Records dropped because their (user, timestamp) was already seen.
    pub duplicates: usize,
}

/// Stable-sorts by (user, timestamp), drops repeated (user, timestamp)
/// pairs keeping the first, and cuts the result into single-activity runs.
pub fn records_to_stream(records: &[RawRecord]) -> RecordStreams {
    let mut label_names: Vec<String> = Vec::new();
    let mut label_of = BTreeMap::new();
    for r in records {
        if !label_of.contains_key(&r.activity) {
            label_of.insert(r.activity.clone(), label_names.len());
            label_names.push(r.activity.clone());
        }
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| (records[i].user, records[i].timestamp));

    let mut segments: Vec<Segment> = Vec::new();
    let mut duplicates = 0;
    let mut last: Option<(u64, i64)> = None;
    for i in order {
        let r = &records[i];
        if last == Some((r.user, r.timestamp)) {
            duplicates += 1;
            continue;
        }
        last = Some((r.user, r.timestamp));
        let label = label_of[&r.activity];
        match segments.last_mut() {
            Some(s) if s.user == r.user && s.label == label => {
                s.samples.push(vec![r.x, r.y, r.z]);
                s.timestamps.push(r.timestamp);
            }
            _ => segments.push(Segment {
                user: r.user,
                label,
                samples: vec![vec![r.x, r.y, r.z]],
                timestamps: vec![r.timestamp],
            }),
        }
    }
    RecordStreams {
        segments,
        label_names,
        duplicates,
    }
}

/// Windows every segment long enough to hold one; shorter runs are skipped.
pub fn segment_windows(streams: &RecordStreams, window: usize, stride: usize) -> Result<Vec<SensorWindow>> {
    let mut out = Vec::new();
    for s in &streams.segments {
        if s.samples.len() < window {
            continue;
        }
        let labels = vec![s.label; s.samples.len()];
        for mut w in window_stream(&s.samples, &s.timestamps, &labels, window, stride)? {
            w.user = Some(s.user);
            out.push(w);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- synthetic

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub channel: usize,
    /// Cycles per window; integer values land exactly on a DFT bin.
    pub cycles: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRecipe {
    pub sinusoids: Vec<Sinusoid>,
    pub noise_std: f64,
    /// Constant added to every sample of a channel; shorter than `channels`
    /// means zero for the rest.
    #[serde(default)]
    pub mean_shift: Vec<f64>,
    /// Single-sample spikes per channel.
    #[serde(default)]
    pub spikes: usize,
    #[serde(default)]
    pub spike_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub window_len: usize,
    pub channels: usize,
    pub per_class: usize,
    pub seed: u64,
    pub recipes: Vec<ClassRecipe>,
    /// Clock ticks between samples.
    #[serde(default = "default_period")]
    pub sample_period: i64,
    /// Windows are assigned round-robin to this many user ids.
    #[serde(default = "default_users")]
    pub users: u64,
    /// Draw a fresh phase for each sinusoid in each window.
    #[serde(default = "default_true")]
    pub random_phase: bool,
}

fn default_period() -> i64 {
    1
}

fn default_users() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

impl SynthSpec {
    pub fn n_class(&self) -> usize {
        self.recipes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || self.channels == 0 {
            return Err(MvftError::config("synthetic windows need T >= 2 and C >= 1"));
        }
        if self.recipes.is_empty() {
            return Err(MvftError::config("synthetic spec has no class recipes"));
        }
        if self.sample_period < 1 || self.users == 0 {
            return Err(MvftError::config("sample_period and users must be positive"));
        }
        for (k, r) in self.recipes.iter().enumerate() {
            if r.noise_std.is_nan() || r.noise_std < 0.0 {
                return Err(MvftError::config(format!("class {k}: noise_std must be >= 0")));
            }
            if r.mean_shift.len() > self.channels || r.sinusoids.iter().any(|s| s.channel >= self.channels) {
                return Err(MvftError::config(format!("class {k}: channel index out of range")));
            }
            if r.spikes > self.window_len {
                return Err(MvftError::config(format!("class {k}: more spikes than samples")));
            }
            if self.recipes[..k].contains(r) {
                return Err(MvftError::config(format!("class {k} repeats an earlier recipe")));
            }
        }
        Ok(())
    }
}

/// `per_class` windows per recipe, interleaved by class; a pure function of
/// the spec.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SensorWindow>> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let (t, c) = (spec.window_len, spec.channels);
    let mut out = Vec::with_capacity(spec.per_class * spec.n_class());
    for i in 0..spec.per_class {
        for (label, recipe) in spec.recipes.iter().enumerate() {
            let mut x = vec![vec![0.0; c]; t];
            for s in &recipe.sinusoids {
                let phase = if spec.random_phase { rng.uniform(0.0, 2.0 * PI) } else { 0.0 };
                for (n, row) in x.iter_mut().enumerate() {
                    row[s.channel] += s.amplitude * (2.0 * PI * s.cycles * n as f64 / t as f64 + phase).cos();
                }
            }
            for row in x.iter_mut() {
                for (ch, v) in row.iter_mut().enumerate() {
                    *v += recipe.mean_shift.get(ch).copied().unwrap_or(0.0);
                    if recipe.noise_std > 0.0 {
                        *v += rng.normal(0.0, recipe.noise_std);
                    }
                }
            }
            for ch in 0..c {
                for _ in 0..recipe.spikes {
                    x[rng.below(t)][ch] += recipe.spike_height;
                }
            }
            let index = (i * spec.n_class() + label) as u64;
            let start = index as i64 * t as i64 * spec.sample_period;
            let ts = (0..t as i64).map(|n| start + n * spec.sample_period).collect();
            out.push(SensorWindow::new(x, ts, label, Some(index % spec.users))?);
        }
    }
    Ok(out)
}

/// Three classes on three channels. Classes 0 and 1 differ in dominant
/// frequency only; classes 0 and 2 differ in spike sign only, which leaves
/// magnitude spectra unchanged but moves the max/min statistics.
pub fn default_synth_spec(per_class: usize, seed: u64) -> SynthSpec {
    let recipe = |cycles: f64, spike_height: f64| ClassRecipe {
        sinusoids: vec![
            Sinusoid { channel: 0, cycles, amplitude: 1.0 },
            Sinusoid { channel: 1, cycles, amplitude: 0.5 },
        ],
        noise_std: 0.5,
        mean_shift: vec![],
        spikes: 2,
        spike_height,
    };
    SynthSpec {
        window_len: 30,
        channels: 3,
        per_class,
        seed,
        recipes: vec![recipe(3.0, 4.0), recipe(4.0, 4.0), recipe(3.0, -4.0)],
        sample_period: 1,
        users: 10,
        random_phase: true,
    }
}

// ---------------------------------------------------------------- splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    #[default]
    RandomStratified,
    ByUser,
}

impl std::str::FromStr for SplitPolicy {
    type Err = MvftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_stratified" | "stratified" => Ok(SplitPolicy::RandomStratified),
            "by_user" | "by-user" => Ok(SplitPolicy::ByUser),
            other => Err(MvftError::config(format!("unknown split policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub policy: SplitPolicy,
    /// Requested train/val/test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
}

fn check_ratios(r: [f64; 3]) -> Result<()> {
    let ok = r.iter().all(|x| x.is_finite() && *x >= 0.0) && r[0] > 0.0 && (r.iter().sum::<f64>() - 1.0).abs() < 1e-9;
    if ok {
        Ok(())
    } else {
        Err(MvftError::config(format!(
            "split ratios {r:?} must be non-negative, sum to 1 and give train a positive share"
        )))
    }
}

/// Partitions window indices. Stratified splits allocate each class by
/// cumulative rounding so split sizes match the ratios globally and within
/// one window per class; by-user splits place whole users.
pub fn make_split(windows: &[SensorWindow], policy: SplitPolicy, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    check_ratios(ratios)?;
    if windows.is_empty() {
        return Err(MvftError::Empty("no windows to split".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        policy,
        ratios,
        seed,
    };
    let cut_a = ratios[0];
    let cut_b = ratios[0] + ratios[1];
    match policy {
        SplitPolicy::RandomStratified => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, w) in windows.iter().enumerate() {
                by_class.entry(w.label).or_default().push(i);
            }
            let (mut cum, mut prev_a, mut prev_b) = (0usize, 0usize, 0usize);
            for idx in by_class.values_mut() {
                rng.shuffle(idx);
                let n = idx.len();
                cum += n;
                let a = ((cut_a * cum as f64).round() as usize).min(cum);
                let b = ((cut_b * cum as f64).round() as usize).clamp(a, cum);
                let n_train = (a - prev_a).min(n);
                let n_val = (b - prev_b).saturating_sub(n_train).min(n - n_train);
                split.train.extend_from_slice(&idx[..n_train]);
                split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
                split.test.extend_from_slice(&idx[n_train + n_val..]);
                prev_a = a;
                prev_b = b;
            }
        }
        SplitPolicy::ByUser => {
            let mut by_user: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
            for (i, w) in windows.iter().enumerate() {
                let user = w
                    .user
                    .ok_or_else(|| MvftError::contract(format!("window {i} has no user id for a by-user split")))?;
                by_user.entry(user).or_default().push(i);
            }
            let mut users: Vec<u64> = by_user.keys().copied().collect();
            rng.shuffle(&mut users);
            let total = windows.len() as f64;
            let mut cum = 0usize;
            for u in users {
                let idx = &by_user[&u];
                let mid = (cum as f64 + idx.len() as f64 / 2.0) / total;
                cum += idx.len();
                let dest = if mid < cut_a {
                    &mut split.train
                } else if mid < cut_b {
                    &mut split.val
                } else {
                    &mut split.test
                };
                dest.extend_from_slice(idx);
            }
        }
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    Ok(split)
}

impl DatasetSplit {
    /// Checks that the three parts partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || !seen.insert(i) {
                return Err(MvftError::contract(format!("split index {i} out of range or repeated")));
            }
        }
        if seen.len() != n {
            return Err(MvftError::contract(format!("split covers {} of {n} windows", seen.len())));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- dataset files

pub const DATASET_FORMAT: &str = "mvft-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Windowed data on disk as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub format: String,
    pub version: u32,
    pub window_len: usize,
    pub channels: usize,
    pub label_names: Vec<String>,
    /// Where the windows came from (generator spec or raw file summary).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub windows: Vec<SensorWindow>,
}

impl Dataset {
    pub fn new(window_len: usize, channels: usize, label_names: Vec<String>, windows: Vec<SensorWindow>) -> Self {
        Dataset {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            window_len,
            channels,
            label_names,
            synth: None,
            source: None,
            windows,
        }
    }

    pub fn from_synth(spec: &SynthSpec) -> Result<Self> {
        let windows = generate_synthetic(spec)?;
        let names = (0..spec.n_class()).map(|k| format!("class{k}")).collect();
        let mut d = Dataset::new(spec.window_len, spec.channels, names, windows);
        d.synth = Some(spec.clone());
        Ok(d)
    }

    pub fn n_class(&self) -> usize {
        self.label_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != DATASET_FORMAT {
            return Err(MvftError::Schema {
                path: "format".into(),
                message: format!("expected `{DATASET_FORMAT}`, found `{}`", self.format),
            });
        }
        if self.version != DATASET_VERSION {
            return Err(MvftError::Version {
                found: self.version,
                expected: DATASET_VERSION,
            });
        }
        for (i, w) in self.windows.iter().enumerate() {
            let at = |message: String| MvftError::Schema {
                path: format!("windows[{i}]"),
                message,
            };
            w.validate().map_err(|e| at(e.to_string()))?;
            if w.len() != self.window_len || w.channels() != self.channels {
                return Err(at(format!(
                    "window is {}x{}, dataset declares {}x{}",
                    w.len(),
                    w.channels(),
                    self.window_len,
                    self.channels
                )));
            }
            if w.label >= self.n_class() {
                return Err(at(format!("label {} but only {} label names", w.label, self.n_class())));
            }
        }
        Ok(())
    }

    /// Windows per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_class()];
        for w in &self.windows {
            h[w.label] += 1;
        }
        h
    }

    /// Hex SHA-256 of the canonical JSON of the label names and windows.
    pub fn content_hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(&(&self.label_names, &self.windows))?;
        Ok(hex::encode(Sha256::digest(&canonical)))
    }
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    fs::write(path, serde_json::to_vec(dataset)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let d: Dataset = crate::report::from_json_str(&text)?;
    d.validate()?;
    Ok(d)
}

/// View bundles for each split, normalized with training-split statistics.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<ViewBundle>,
    pub val: Vec<ViewBundle>,
    pub test: Vec<ViewBundle>,
    pub normalizer: ViewNormalizer,
}

pub fn prepare_views(windows: &[SensorWindow], split: &DatasetSplit) -> Result<PreparedData> {
    split.validate(windows.len())?;
    let build = |idx: &[usize]| -> Result<Vec<ViewBundle>> { idx.iter().map(|&i| build_views(&windows[i])).collect() };
    let train = build(&split.train)?;
    let normalizer = fit_normalizer(&train)?;
    let norm = |raw: Vec<ViewBundle>| -> Result<Vec<ViewBundle>> { raw.iter().map(|b| normalizer.apply(b)).collect() };
    Ok(PreparedData {
        train: norm(train)?,
        val: norm(build(&split.val)?)?,
        test: norm(build(&split.test)?)?,
        normalizer: normalizer.clone(),
    })
}
