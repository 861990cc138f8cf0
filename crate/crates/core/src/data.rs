//! Event sequences, datasets, padding and masks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use metatpp_autograd::ndarray::Array2;
use metatpp_autograd::Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// One task: arrival times of a single realization, optionally marked.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    pub id: String,
    pub times: Vec<f64>,
    pub marks: Option<Vec<usize>>,
    /// End of the observation window, used only by the survival term.
    pub t_end: Option<f64>,
}

impl EventSequence {
    pub fn new(id: impl Into<String>, times: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            times,
            marks: None,
            t_end: None,
        }
    }

    pub fn with_marks(mut self, marks: Vec<usize>) -> Self {
        self.marks = Some(marks);
        self
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Inter-event times with the first gap measured from time 0.
    pub fn inter_event_times(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.times
            .iter()
            .map(|&t| {
                let d = t - prev;
                prev = t;
                d
            })
            .collect()
    }

    pub fn mark(&self, i: usize) -> usize {
        self.marks.as_ref().map_or(0, |m| m[i])
    }

    /// Checks ordering, length and mark range. `line` is reported in errors.
    pub fn validate(&self, num_marks: usize, line: usize) -> Result<(), DataError> {
        if self.times.len() < 2 {
            return Err(DataError::TooShort {
                line,
                len: self.times.len(),
            });
        }
        if self.times.iter().any(|t| !t.is_finite()) || self.times[0] < 0.0 {
            return Err(DataError::Record {
                line,
                msg: "arrival times must be finite and non-negative".into(),
            });
        }
        if let Some(i) = self.times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(DataError::NotIncreasing { line, index: i + 1 });
        }
        if let Some(marks) = &self.marks {
            if marks.len() != self.times.len() {
                return Err(DataError::Record {
                    line,
                    msg: format!(
                        "{} marks for {} arrival times",
                        marks.len(),
                        self.times.len()
                    ),
                });
            }
            if let Some(&m) = marks.iter().find(|&&m| m >= num_marks) {
                return Err(DataError::MarkRange {
                    line,
                    mark: m,
                    num_marks,
                });
            }
        }
        if let Some(t_end) = self.t_end {
            if t_end <= *self.times.last().unwrap() {
                return Err(DataError::Record {
                    line,
                    msg: "t_end must exceed the last arrival time".into(),
                });
            }
        }
        Ok(())
    }
}

/// A named collection of sequences sharing one mark vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_marks: usize,
    pub sequences: Vec<EventSequence>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    arrival_times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    marks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_end: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_marks: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_marks: usize, sequences: Vec<EventSequence>) -> Self {
        Self {
            name: name.into(),
            num_marks,
            sequences,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_marks == 0 {
            return Err(DataError::Record {
                line: 0,
                msg: "num_marks must be at least 1".into(),
            });
        }
        for (i, s) in self.sequences.iter().enumerate() {
            s.validate(self.num_marks, i + 1)?;
        }
        Ok(())
    }

    /// Reads line-delimited JSON. An optional `{"num_marks": C}` line may
    /// appear first; otherwise C is inferred from the largest mark.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let file =
            File::open(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::read_jsonl(BufReader::new(file), name)
    }

    pub fn read_jsonl(reader: impl BufRead, name: String) -> Result<Self, DataError> {
        let mut header: Option<usize> = None;
        let mut sequences = Vec::new();
        let mut lines = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| DataError::Io(e.to_string()))?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if sequences.is_empty() && header.is_none() {
                if let Ok(h) = serde_json::from_str::<Header>(trimmed) {
                    header = Some(h.num_marks);
                    continue;
                }
            }
            let rec: Record = serde_json::from_str(trimmed).map_err(|e| DataError::Record {
                line: lineno,
                msg: e.to_string(),
            })?;
            let id = rec.id.unwrap_or_else(|| format!("seq{}", sequences.len()));
            sequences.push(EventSequence {
                id,
                times: rec.arrival_times,
                marks: rec.marks,
                t_end: rec.t_end,
            });
            lines.push(lineno);
        }
        let inferred = sequences
            .iter()
            .filter_map(|s| s.marks.as_ref())
            .flat_map(|m| m.iter().copied())
            .max()
            .map_or(1, |m| m + 1);
        let num_marks = header.unwrap_or(inferred);
        if num_marks == 0 {
            return Err(DataError::Record {
                line: 1,
                msg: "num_marks must be at least 1".into(),
            });
        }
        for (s, &line) in sequences.iter().zip(&lines) {
            s.validate(num_marks, line)?;
        }
        Ok(Self {
            name,
            num_marks,
            sequences,
        })
    }

    /// Writes the header line (only for marked data) followed by one
    /// record per sequence.
    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let file =
            File::create(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| DataError::Io(e.to_string()))
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        if self.num_marks > 1 {
            let h = serde_json::to_string(&Header {
                num_marks: self.num_marks,
            })?;
            writeln!(w, "{h}")?;
        }
        for s in &self.sequences {
            let rec = Record {
                id: Some(s.id.clone()),
                arrival_times: s.times.clone(),
                marks: s.marks.clone(),
                t_end: s.t_end,
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn subset(&self, name: &str, indices: &[usize]) -> Dataset {
        Dataset {
            name: name.to_string(),
            num_marks: self.num_marks,
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }
}

/// A train/validation/test partition of whole sequences.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Split {
    /// Names of the partitions that ended up empty.
    pub fn empty_parts(&self) -> Vec<&'static str> {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ]
        .into_iter()
        .filter(|(_, d)| d.is_empty())
        .map(|(n, _)| n)
        .collect()
    }
}

/// Seeded random partition. Sizes are rounded from the fractions, with
/// the test part taking the remainder.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Split, DataError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DataError::Fractions(fractions.to_vec()));
    }
    let n = dataset.len();
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let (train, rest) = idx.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok(Split {
        train: dataset.subset(&format!("{}_train", dataset.name), train),
        val: dataset.subset(&format!("{}_val", dataset.name), val),
        test: dataset.subset(&format!("{}_test", dataset.name), test),
    })
}

/// Padded tensors for a group of sequences. Row `b` holds sequence `b`;
/// positions at or beyond `lens[b]` are padding.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    /// Inter-event times; the first entry is the time since 0.
    pub dt: Array2<f64>,
    pub times: Array2<f64>,
    pub marks: Array2<usize>,
    pub mask: Array2<bool>,
    pub lens: Vec<usize>,
    pub t_end: Vec<Option<f64>>,
}

impl PaddedBatch {
    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    pub fn max_len(&self) -> usize {
        self.dt.ncols()
    }

    /// Number of prediction targets (every event after the first).
    pub fn num_targets(&self) -> usize {
        self.lens.iter().map(|l| l.saturating_sub(1)).sum()
    }
}

pub fn make_batch(seqs: &[&EventSequence], l_max: Option<usize>) -> Result<PaddedBatch, DataError> {
    let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let l_max = l_max.unwrap_or(longest);
    if longest > l_max {
        return Err(DataError::TooLong {
            len: longest,
            l_max,
        });
    }
    let b = seqs.len();
    let mut dt = Array2::zeros((b, l_max));
    let mut times = Array2::zeros((b, l_max));
    let mut marks = Array2::zeros((b, l_max));
    let mut mask = Array2::from_elem((b, l_max), false);
    for (r, s) in seqs.iter().enumerate() {
        for (i, d) in s.inter_event_times().into_iter().enumerate() {
            dt[[r, i]] = d;
            times[[r, i]] = s.times[i];
            marks[[r, i]] = s.mark(i);
            mask[[r, i]] = true;
        }
    }
    Ok(PaddedBatch {
        dt,
        times,
        marks,
        mask,
        lens: seqs.iter().map(|s| s.len()).collect(),
        t_end: seqs.iter().map(|s| s.t_end).collect(),
    })
}

/// Which earlier events each position may attend to.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalHistoryMask {
    pub allowed: Array2<bool>,
    pub k: usize,
}

/// `allowed[i][j]` holds iff `i - k < j <= i` (0-based), i.e. position `i`
/// sees itself and its `k - 1` predecessors.
pub fn local_history_mask(l: usize, k: usize) -> LocalHistoryMask {
    let allowed = Array2::from_shape_fn((l, l), |(i, j)| j <= i && j + k > i);
    LocalHistoryMask { allowed, k }
}

/// First attended position for query `i` under window `k` (`None` means
/// the whole prefix).
pub fn window_start(i: usize, k: Option<usize>) -> usize {
    k.map_or(0, |k| (i + 1).saturating_sub(k))
}

/// Groups sequence indices into minibatches of similar length: shuffles,
/// sorts chunks of several batches by length, then shuffles batch order.
pub fn bucket_batches(lens: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut idx: Vec<usize> = (0..lens.len()).collect();
    rng.shuffle(&mut idx);
    let mut batches = Vec::new();
    for chunk in idx.chunks_mut(batch_size * 8) {
        chunk.sort_by_key(|&i| lens[i]);
        batches.extend(chunk.chunks(batch_size).map(|c| c.to_vec()));
    }
    rng.shuffle(&mut batches);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rows_have_min_i_k_entries() {
        let m = local_history_mask(7, 3);
        for i in 0..7 {
            let n = m.allowed.row(i).iter().filter(|&&b| b).count();
            assert_eq!(n, (i + 1).min(3));
        }
    }

    #[test]
    fn window_start_matches_mask() {
        for k in 1..5 {
            let m = local_history_mask(6, k);
            for i in 0..6 {
                let first = (0..6).find(|&j| m.allowed[[i, j]]).unwrap();
                assert_eq!(first, window_start(i, Some(k)));
            }
        }
    }

    #[test]
    fn bucketing_covers_every_index_once() {
        let lens: Vec<usize> = (0..37).map(|i| 2 + (i * 7) % 13).collect();
        let mut rng = Rng::new(1);
        let mut all: Vec<usize> = bucket_batches(&lens, 4, &mut rng).concat();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }
}
