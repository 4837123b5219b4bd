//! Timed sequences, time normalization, splits, batching, synthetic data and JSONL I/O.
//!
//! Dataset files are line-delimited JSON. The first record is a header
//!
//! ```text
//! {"header":{"feature_width":4,"num_classes":2,"raw_time":false}}
//! ```
//!
//! followed by one record per post:
//!
//! ```text
//! {"event":"e1","i":0,"t":0.125,"x":[0.3,-1.2,0.0,4.0],"y":1}
//! ```
//!
//! Posts are grouped by `event` (in order of first appearance) and ordered by
//! `i`. With `raw_time` the `t` values are epoch seconds and are min-max
//! normalized per event at load time.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: usize,
}

/// One event's posts in chronological order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedSequence {
    pub event_id: String,
    pub posts: Vec<Post>,
}

impl TimedSequence {
    pub fn new(event_id: impl Into<String>, posts: Vec<Post>) -> Self {
        TimedSequence {
            event_id: event_id.into(),
            posts,
        }
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.posts.iter().map(|p| p.t).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.posts.iter().map(|p| p.y).collect()
    }

    pub fn feature_width(&self) -> Option<usize> {
        self.posts.first().map(|p| p.x.len())
    }

    /// Gap preceding each post, the first measured from time zero.
    pub fn gaps(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.posts
            .iter()
            .map(|p| {
                let g = p.t - prev;
                prev = p.t;
                g
            })
            .collect()
    }

    /// Checks time order and range (the model preconditions).
    pub fn check_times(&self) -> Result<()> {
        let mut prev = f64::NEG_INFINITY;
        for (i, p) in self.posts.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.t) {
                return Err(Error::Normalization {
                    event: self.event_id.clone(),
                    t: p.t,
                });
            }
            if p.t < prev {
                return Err(Error::Ordering {
                    event: self.event_id.clone(),
                    position: i,
                });
            }
            prev = p.t;
        }
        Ok(())
    }

    /// Full invariant check against a feature width and class count.
    pub fn validate(&self, feature_width: usize, num_classes: usize) -> Result<()> {
        self.check_times()?;
        for (i, p) in self.posts.iter().enumerate() {
            if p.x.len() != feature_width {
                return Err(Error::validation(
                    "x",
                    format!(
                        "event `{}` post {i} has {} features, expected {feature_width}",
                        self.event_id,
                        p.x.len()
                    ),
                ));
            }
            if p.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(
                    "x",
                    format!(
                        "event `{}` post {i} has a non-finite feature",
                        self.event_id
                    ),
                ));
            }
            if p.y >= num_classes {
                return Err(Error::validation(
                    "y",
                    format!(
                        "event `{}` post {i} has label {} but only {num_classes} classes",
                        self.event_id, p.y
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Min-max normalization onto `[0, 1]`; a degenerate range maps to zero.
pub fn normalize_times(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::contract("cannot normalize an empty list of times"));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::contract("times must be finite"));
    }
    let range = max - min;
    if range == 0.0 {
        return Ok(vec![0.0; raw.len()]);
    }
    Ok(raw
        .iter()
        .map(|&t| ((t - min) / range).clamp(0.0, 1.0))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Each event split chronologically into train/val/test.
    #[default]
    SeenEvent,
    /// One event held out for test; the others give train and a validation suffix.
    UnseenEvent,
    /// Whole sequences assigned to train/val/test by position in the file.
    Sequences,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub mode: SplitMode,
    pub held_out: Option<String>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            mode: SplitMode::SeenEvent,
            held_out: None,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("train", self.train),
            ("val", self.val),
            ("test", self.test),
        ] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::validation(
                    format!("split.{name}"),
                    format!("ratio must lie in (0, 1), got {r}"),
                ));
            }
        }
        if (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::validation("split", "ratios must sum to 1"));
        }
        if self.mode == SplitMode::UnseenEvent && self.held_out.is_none() {
            return Err(Error::validation(
                "split.held_out",
                "unseen-event mode needs a held-out event id",
            ));
        }
        Ok(())
    }

    /// Boundaries `floor(train*n)` and `floor((train+val)*n)`.
    pub fn boundaries(&self, n: usize) -> (usize, usize) {
        let b1 = floor_index(self.train, n);
        let b2 = floor_index(self.train + self.val, n).max(b1);
        (b1, b2)
    }
}

fn floor_index(ratio: f64, n: usize) -> usize {
    // The epsilon keeps exact products such as 0.29 * 100 from rounding down.
    (((ratio * n as f64) + 1e-9).floor() as usize).min(n)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<TimedSequence>,
    pub val: Vec<TimedSequence>,
    pub test: Vec<TimedSequence>,
}

pub const MIN_SPLIT_LEN: usize = 5;

/// Contiguous prefix/middle/suffix split of one time-sorted sequence.
pub fn chronological_split(
    seq: &TimedSequence,
    spec: &SplitSpec,
) -> Result<(TimedSequence, TimedSequence, TimedSequence)> {
    let n = seq.len();
    if n < MIN_SPLIT_LEN {
        return Err(Error::TooSmall {
            event: seq.event_id.clone(),
            len: n,
            min: MIN_SPLIT_LEN,
        });
    }
    seq.check_times()?;
    let (b1, b2) = spec.boundaries(n);
    let part =
        |r: std::ops::Range<usize>| TimedSequence::new(seq.event_id.clone(), seq.posts[r].to_vec());
    Ok((part(0..b1), part(b1..b2), part(b2..n)))
}

/// Leave-one-event-out split: the held-out event is the test set; every other
/// event gives its last `val_fraction` of posts to validation.
pub fn unseen_event_split(
    events: &[TimedSequence],
    held_out: &str,
    val_fraction: f64,
) -> Result<Splits> {
    if events.len() < 2 {
        return Err(Error::contract(
            "unseen-event split needs at least two events",
        ));
    }
    if !events.iter().any(|e| e.event_id == held_out) {
        return Err(Error::UnknownEvent(held_out.to_string()));
    }
    let mut splits = Splits::default();
    for e in events {
        if e.event_id == held_out {
            splits.test.push(e.clone());
            continue;
        }
        let b = floor_index(1.0 - val_fraction, e.len());
        splits.train.push(TimedSequence::new(
            e.event_id.clone(),
            e.posts[..b].to_vec(),
        ));
        splits.val.push(TimedSequence::new(
            e.event_id.clone(),
            e.posts[b..].to_vec(),
        ));
    }
    Ok(splits)
}

/// Applies the split selected by `spec.mode` to a whole dataset.
pub fn split_dataset(seqs: &[TimedSequence], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut splits = match spec.mode {
        SplitMode::SeenEvent => {
            let mut out = Splits::default();
            for seq in seqs {
                let (a, b, c) = chronological_split(seq, spec)?;
                out.train.push(a);
                out.val.push(b);
                out.test.push(c);
            }
            out
        }
        SplitMode::UnseenEvent => {
            let held_out = spec.held_out.as_deref().unwrap_or_default();
            unseen_event_split(seqs, held_out, spec.val / (spec.train + spec.val))?
        }
        SplitMode::Sequences => {
            let (b1, b2) = spec.boundaries(seqs.len());
            Splits {
                train: seqs[..b1].to_vec(),
                val: seqs[b1..b2].to_vec(),
                test: seqs[b2..].to_vec(),
            }
        }
    };
    for set in [&mut splits.train, &mut splits.val, &mut splits.test] {
        set.retain(|s| !s.is_empty());
    }
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(Error::contract("split produced an empty train or test set"));
    }
    Ok(splits)
}

/// Sequences of one minibatch, padded to a common length.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub sequences: Vec<&'a TimedSequence>,
    /// Labels padded with zero; only meaningful where `mask` is set.
    pub labels: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl<'a> Batch<'a> {
    pub fn new(sequences: Vec<&'a TimedSequence>) -> Self {
        let max_len = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        let labels = sequences
            .iter()
            .map(|s| {
                let mut l = s.labels();
                l.resize(max_len, 0);
                l
            })
            .collect();
        let mask = sequences
            .iter()
            .map(|s| (0..max_len).map(|i| i < s.len()).collect())
            .collect();
        Batch {
            sequences,
            labels,
            mask,
        }
    }

    pub fn max_len(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Groups sequence indices into minibatches.
///
/// With `shuffle` the order is permuted by `rng`; otherwise batches follow
/// dataset order. With `per_event` a batch never mixes event ids.
pub fn batch_indices(
    seqs: &[TimedSequence],
    batch_size: usize,
    per_event: bool,
    shuffle: Option<&mut ChaCha8Rng>,
) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut groups: Vec<Vec<usize>> = if per_event {
        let mut order: Vec<&str> = Vec::new();
        let mut by_event: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, s) in seqs.iter().enumerate() {
            by_event
                .entry(s.event_id.as_str())
                .or_insert_with(|| {
                    order.push(s.event_id.as_str());
                    Vec::new()
                })
                .push(i);
        }
        order
            .into_iter()
            .map(|e| by_event.remove(e).unwrap())
            .collect()
    } else {
        vec![(0..seqs.len()).collect()]
    };
    if let Some(rng) = shuffle {
        for g in &mut groups {
            g.shuffle(rng);
        }
    }
    groups
        .iter()
        .flat_map(|g| g.chunks(batch_size).map(<[usize]>::to_vec))
        .collect()
}

/// Parameters of the synthetic gap-classification task.
///
/// Post times are the order statistics of `length` uniform draws on `[0, 1]`;
/// features are i.i.d. standard normal; the label of a post is 1 exactly when
/// the gap preceding it exceeds `gamma` (flipped with probability `noise`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapTaskSpec {
    pub num_sequences: usize,
    pub length: usize,
    pub feature_width: usize,
    pub gamma: f64,
    pub noise: f64,
}

impl Default for GapTaskSpec {
    fn default() -> Self {
        let length = 20;
        GapTaskSpec {
            num_sequences: 1000,
            length,
            feature_width: 4,
            gamma: GapTaskSpec::median_gap_for(length),
            noise: 0.0,
        }
    }
}

impl GapTaskSpec {
    /// Median of a single gap, `1 - 2^(-1/length)` (each gap is Beta(1, length)).
    pub fn median_gap_for(length: usize) -> f64 {
        1.0 - 0.5f64.powf(1.0 / length as f64)
    }

    pub fn median_gap(&self) -> f64 {
        GapTaskSpec::median_gap_for(self.length)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::validation(
                "gamma",
                format!("gap threshold must lie in (0, 1), got {}", self.gamma),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::validation(
                "noise",
                "flip probability must lie in [0, 1]",
            ));
        }
        if self.num_sequences == 0 || self.length == 0 || self.feature_width == 0 {
            return Err(Error::validation(
                "synthetic",
                "sequence count, length and feature width must be positive",
            ));
        }
        Ok(())
    }

    pub fn label_for_gap(&self, gap: f64) -> usize {
        usize::from(gap > self.gamma)
    }
}

pub fn generate_synthetic(spec: &GapTaskSpec, seed: u64) -> Result<Vec<TimedSequence>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (spec.num_sequences - 1).to_string().len().max(5);
    let seqs = (0..spec.num_sequences)
        .map(|n| {
            let mut times: Vec<f64> = (0..spec.length).map(|_| rng.random::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            let mut prev = 0.0;
            let posts = times
                .into_iter()
                .map(|t| {
                    let x: Vec<f64> = (0..spec.feature_width)
                        .map(|_| rng.sample(StandardNormal))
                        .collect();
                    let mut y = spec.label_for_gap(t - prev);
                    if spec.noise > 0.0 && rng.random::<f64>() < spec.noise {
                        y = 1 - y;
                    }
                    prev = t;
                    Post { t, x, y }
                })
                .collect();
            TimedSequence::new(format!("seq-{n:0width$}"), posts)
        })
        .collect();
    Ok(seqs)
}

/// Sequences together with the header facts of their file.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_width: usize,
    pub num_classes: usize,
    pub sequences: Vec<TimedSequence>,
}

impl Dataset {
    pub fn new(
        feature_width: usize,
        num_classes: usize,
        sequences: Vec<TimedSequence>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::validation(
                "num_classes",
                "at least two classes are required",
            ));
        }
        for s in &sequences {
            s.validate(feature_width, num_classes)?;
        }
        Ok(Dataset {
            feature_width,
            num_classes,
            sequences,
        })
    }

    pub fn num_posts(&self) -> usize {
        self.sequences.iter().map(TimedSequence::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub feature_width: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub raw_time: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: Header,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PostRecord {
    event: String,
    i: usize,
    t: f64,
    x: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    y: Option<usize>,
}

fn parse_error(line: usize, message: impl ToString) -> Error {
    Error::Parse {
        line,
        message: message.to_string(),
    }
}

/// Loads a labeled dataset.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    read_jsonl(BufReader::new(fs::File::open(path)?), true)
}

/// Loads a dataset whose records may omit `y`; missing labels read as class 0.
pub fn load_unlabeled_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    read_jsonl(BufReader::new(fs::File::open(path)?), false)
}

/// Parses a dataset from any line source; see [`load_jsonl`].
pub fn read_jsonl(reader: impl BufRead, require_labels: bool) -> Result<Dataset> {
    let mut header: Option<Header> = None;
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<(usize, usize, PostRecord)>> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(h) = &header else {
            let parsed: HeaderLine = serde_json::from_str(&line)
                .map_err(|e| parse_error(lineno, format!("expected header record: {e}")))?;
            if parsed.header.num_classes < 2 {
                return Err(Error::validation(
                    "num_classes",
                    "at least two classes are required",
                ));
            }
            header = Some(parsed.header);
            continue;
        };
        let rec: PostRecord = serde_json::from_str(&line).map_err(|e| parse_error(lineno, e))?;
        if require_labels && rec.y.is_none() {
            return Err(parse_error(lineno, "missing field `y`"));
        }
        if rec.x.len() != h.feature_width {
            return Err(Error::validation(
                "x",
                format!(
                    "line {lineno}: {} features, header declares {}",
                    rec.x.len(),
                    h.feature_width
                ),
            ));
        }
        if !grouped.contains_key(&rec.event) {
            order.push(rec.event.clone());
        }
        grouped
            .entry(rec.event.clone())
            .or_default()
            .push((rec.i, lineno, rec));
    }
    let header = header.ok_or_else(|| parse_error(1, "missing header record"))?;
    let mut sequences = Vec::with_capacity(order.len());
    for event in order {
        let mut recs = grouped.remove(&event).unwrap_or_default();
        recs.sort_by_key(|(i, _, _)| *i);
        for w in recs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::validation(
                    "i",
                    format!(
                        "line {}: duplicate position {} in `{event}`",
                        w[1].1, w[1].0
                    ),
                ));
            }
        }
        let mut times: Vec<f64> = recs.iter().map(|(_, _, r)| r.t).collect();
        if let Some(pos) = times.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::validation(
                "t",
                format!("line {}: time decreases within `{event}`", recs[pos + 1].1),
            ));
        }
        if header.raw_time {
            times = normalize_times(&times)?;
        }
        let posts = recs
            .into_iter()
            .zip(times)
            .map(|((_, _, r), t)| Post {
                t,
                x: r.x,
                y: r.y.unwrap_or(0),
            })
            .collect();
        let seq = TimedSequence::new(event, posts);
        seq.validate(header.feature_width, header.num_classes)
            .map_err(|e| match e {
                Error::Normalization { event, t } => Error::validation(
                    "t",
                    format!(
                        "time {t} of `{event}` lies outside [0, 1]; set raw_time for epoch seconds"
                    ),
                ),
                other => other,
            })?;
        sequences.push(seq);
    }
    Ok(Dataset {
        feature_width: header.feature_width,
        num_classes: header.num_classes,
        sequences,
    })
}

/// Writes normalized times; floats use the shortest repr that reads back exactly.
pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_jsonl(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_jsonl(dataset: &Dataset, out: &mut impl Write) -> Result<()> {
    let header = serde_json::json!({
        "header": Header {
            feature_width: dataset.feature_width,
            num_classes: dataset.num_classes,
            raw_time: false,
        }
    });
    writeln!(out, "{header}")?;
    for seq in &dataset.sequences {
        for (i, p) in seq.posts.iter().enumerate() {
            let rec = PostRecord {
                event: seq.event_id.clone(),
                i,
                t: p.t,
                x: p.x.clone(),
                y: Some(p.y),
            };
            serde_json::to_writer(&mut *out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}
