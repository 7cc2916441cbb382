//! CSV ingestion, chronological splitting and sliding windows.

use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A multivariate series stored channel-major (`N × L`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    /// Header of the first (timestamp / index) column.
    pub index_name: String,
    /// First-column cells, kept verbatim.
    pub index: Vec<String>,
    pub channels: Vec<String>,
    pub values: Array2<f64>,
    pub frequency: String,
    /// Number of NaN or empty cells replaced with 0 at load time.
    pub nan_filled: usize,
}

impl TimeSeriesFrame {
    /// Frame with a synthetic `0..L` index.
    pub fn new(channels: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if channels.len() != values.nrows() {
            return Err(Error::shape("frame", &[channels.len()], &[values.nrows(), values.ncols()]));
        }
        Ok(Self {
            index_name: "index".into(),
            index: (0..values.ncols()).map(|i| i.to_string()).collect(),
            channels,
            values,
            frequency: String::new(),
            nan_filled: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.values.nrows()
    }

    /// Time points `start..end` as a new frame.
    pub fn slice_time(&self, start: usize, end: usize) -> Self {
        Self {
            index_name: self.index_name.clone(),
            index: self.index[start..end].to_vec(),
            channels: self.channels.clone(),
            values: self.values.slice(s![.., start..end]).to_owned(),
            frequency: self.frequency.clone(),
            nan_filled: 0,
        }
    }

    /// Same labels, different values (e.g. a corrupted copy).
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(Error::shape("with_values", &[self.n_channels(), self.len()], values.shape()));
        }
        Ok(Self {
            values,
            nan_filled: 0,
            ..self.clone()
        })
    }

    /// `T × N` copy, the layout the corruption algorithms work in.
    pub fn time_major(&self) -> Array2<f64> {
        self.values.t().to_owned()
    }

    /// Joins frames end to end (channels must match).
    pub fn concat(parts: &[&TimeSeriesFrame]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::config("nothing to concatenate"))?;
        let views: Vec<_> = parts.iter().map(|p| p.values.view()).collect();
        let values = ndarray::concatenate(Axis(1), &views).map_err(|_| Error::shape("concat", &[first.n_channels()], &[]))?;
        Ok(Self {
            index: parts.iter().flat_map(|p| p.index.iter().cloned()).collect(),
            values,
            nan_filled: 0,
            ..(*first).clone()
        })
    }
}

fn parse_cell(cell: &str) -> std::result::Result<f64, std::num::ParseFloatError> {
    let t = cell.trim();
    if t.is_empty() {
        return Ok(f64::NAN);
    }
    t.parse::<f64>()
}

/// Reads a CSV whose first column is a timestamp or index and whose remaining
/// columns are numeric channels. NaN and empty cells become 0.
pub fn read_csv<R: Read>(reader: R) -> Result<TimeSeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            row: 0,
            column: headers.len(),
            message: "need a timestamp column and at least one channel".into(),
        });
    }
    let n = headers.len() - 1;
    let mut index = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut nan_filled = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: r + 1,
                column: record.len(),
                message: format!("expected {} fields", headers.len()),
            });
        }
        index.push(record[0].to_string());
        for (c, col) in columns.iter_mut().enumerate() {
            let cell = &record[c + 1];
            let v = parse_cell(cell).map_err(|e| Error::Parse {
                row: r + 1,
                column: c + 2,
                message: format!("{cell:?}: {e}"),
            })?;
            if v.is_nan() {
                nan_filled += 1;
                col.push(0.0);
            } else {
                col.push(v);
            }
        }
    }
    if nan_filled > 0 {
        warn!("replaced {nan_filled} missing values with 0");
    }
    let len = index.len();
    let values = Array2::from_shape_vec((n, len), columns.concat()).expect("rectangular columns");
    Ok(TimeSeriesFrame {
        index_name: headers[0].to_string(),
        index,
        channels: headers.iter().skip(1).map(str::to_string).collect(),
        values,
        frequency: String::new(),
        nan_filled,
    })
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeriesFrame> {
    read_csv(std::fs::File::open(path)?)
}

/// Writes the frame back out; values use the shortest decimal form that
/// parses back to the identical `f64`.
pub fn write_csv<W: Write>(frame: &TimeSeriesFrame, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![frame.index_name.clone()];
    header.extend(frame.channels.iter().cloned());
    w.write_record(&header)?;
    for t in 0..frame.len() {
        let mut row = Vec::with_capacity(frame.n_channels() + 1);
        row.push(frame.index[t].clone());
        row.extend(frame.values.column(t).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(frame: &TimeSeriesFrame, path: impl AsRef<Path>) -> Result<()> {
    write_csv(frame, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Train / validation / test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const SIX_TWO_TWO: SplitRatios = SplitRatios { train: 0.6, val: 0.2, test: 0.2 };
    pub const SEVEN_ONE_TWO: SplitRatios = SplitRatios { train: 0.7, val: 0.1, test: 0.2 };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios must be in [0, 1] and sum to 1, got {}:{}:{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::SIX_TWO_TWO
    }
}

fn part_len(total: usize, ratio: f64) -> usize {
    // The nudge keeps products like 0.7·10 = 7.000000000000001 and
    // 0.6·100 landing on the intended integer.
    (total as f64 * ratio + 1e-9).floor() as usize
}

/// Boundaries `(train_end, val_end)` of a chronological split.
pub fn split_points(len: usize, ratios: &SplitRatios) -> Result<(usize, usize)> {
    ratios.validate()?;
    let train = part_len(len, ratios.train);
    let val = part_len(len, ratios.val);
    Ok((train, train + val))
}

/// Contiguous chronological split with the remainder going to test. Each part
/// must hold at least `min_len` points (lookback + horizon).
pub fn split(
    frame: &TimeSeriesFrame,
    ratios: &SplitRatios,
    min_len: usize,
) -> Result<(TimeSeriesFrame, TimeSeriesFrame, TimeSeriesFrame)> {
    let (a, b) = split_points(frame.len(), ratios)?;
    let parts = [("train", 0, a), ("val", a, b), ("test", b, frame.len())];
    for (part, start, end) in parts {
        if end - start < min_len {
            return Err(Error::SplitTooShort {
                part,
                len: end - start,
                required: min_len,
            });
        }
    }
    Ok((frame.slice_time(0, a), frame.slice_time(a, b), frame.slice_time(b, frame.len())))
}

/// Lookback / target pair cut from a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    /// `N × T`
    pub input: Array2<f64>,
    /// `N × F`, immediately following `input`.
    pub target: Array2<f64>,
    /// Time index of the first lookback point within the source frame.
    pub origin: usize,
}

/// Every window with origin in `0..=L-T-F` at the given stride. The final
/// partial batch is never dropped; callers get all windows.
pub fn windows(frame: &TimeSeriesFrame, lookback: usize, horizon: usize, stride: usize) -> Vec<WindowPair> {
    let span = lookback + horizon;
    if frame.len() < span || stride == 0 {
        return Vec::new();
    }
    (0..=frame.len() - span)
        .step_by(stride)
        .map(|i| WindowPair {
            input: frame.values.slice(s![.., i..i + lookback]).to_owned(),
            target: frame.values.slice(s![.., i + lookback..i + span]).to_owned(),
            origin: i,
        })
        .collect()
}

/// Stacks window inputs and targets into `[B, N, T]` and `[B, N, F]`.
pub fn stack(windows: &[&WindowPair]) -> (Array3<f64>, Array3<f64>) {
    let inputs: Vec<_> = windows.iter().map(|w| w.input.view()).collect();
    let targets: Vec<_> = windows.iter().map(|w| w.target.view()).collect();
    (
        ndarray::stack(Axis(0), &inputs).expect("uniform window shapes"),
        ndarray::stack(Axis(0), &targets).expect("uniform window shapes"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(len: usize) -> TimeSeriesFrame {
        TimeSeriesFrame::new(vec!["a".into()], Array2::from_shape_fn((1, len), |(_, t)| t as f64)).unwrap()
    }

    #[test]
    fn reads_small_file() {
        let f = read_csv("date,a,b\n1,1.5,2\n2,3,4\n3,5,6\n".as_bytes()).unwrap();
        assert_eq!(f.values.dim(), (2, 3));
        assert_eq!(f.channels, vec!["a", "b"]);
        assert_eq!(f.values.row(0).to_vec(), vec![1.5, 3.0, 5.0]);
        assert_eq!(f.index, vec!["1", "2", "3"]);
    }

    #[test]
    fn nan_cells_become_zero() {
        let f = read_csv("t,a\n0,1\n1,NaN\n2,3\n".as_bytes()).unwrap();
        assert_eq!(f.values.row(0).to_vec(), vec![1.0, 0.0, 3.0]);
        assert_eq!(f.nan_filled, 1);
    }

    #[test]
    fn bad_cell_reports_position() {
        let err = read_csv("t,a,b\n0,1,2\n1,2,oops\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => assert_eq!((row, column), (2, 3)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_csv("t\n0\n".as_bytes()).is_err());
    }

    #[test]
    fn split_lengths() {
        let (a, b, c) = split(&frame(100), &SplitRatios::SIX_TWO_TWO, 0).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        let (a, b, c) = split(&frame(10), &SplitRatios::SEVEN_ONE_TWO, 0).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
        let joined = TimeSeriesFrame::concat(&[&a, &b, &c]).unwrap();
        assert_eq!(joined.values, frame(10).values);
    }

    #[test]
    fn split_names_short_part() {
        let err = split(&frame(100), &SplitRatios::SIX_TWO_TWO, 30).unwrap_err();
        assert!(matches!(err, Error::SplitTooShort { part: "val", .. }), "{err}");
        let bad = SplitRatios { train: 0.5, val: 0.2, test: 0.2 };
        assert!(split(&frame(100), &bad, 0).is_err());
    }

    #[test]
    fn window_counts() {
        assert_eq!(windows(&frame(120), 96, 24, 1).len(), 1);
        let w = windows(&frame(100), 96, 1, 1);
        assert_eq!(w.len(), 4);
        assert_eq!(w[3].origin, 3);
        assert_eq!(w[3].target[[0, 0]], 99.0);
        assert_eq!(windows(&frame(10), 4, 2, 2).len(), 3);
        assert!(windows(&frame(5), 4, 2, 1).is_empty());
    }
}
