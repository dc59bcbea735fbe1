//! Datasets: loading, saving, normalization, noise, and a synthetic corpus.
//!
//! # File formats
//!
//! Univariate files are delimited text with one sample per line: the label
//! followed by the series values. The delimiter (tab or comma) is detected
//! from the first line.
//!
//! ```text
//! 1	0.12	0.40	-0.33	...
//! ```
//!
//! Multivariate files are JSON lines, one record per sample:
//!
//! ```text
//! {"label": "walking", "series": [[0.1, 0.2, ...], [0.5, 0.4, ...]]}
//! ```
//!
//! Labels may be integers or strings. They are remapped to dense class
//! indices in order of first appearance and the original names are kept.
//! Series shorter than the longest one in the file are right-padded by
//! repeating their last value.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[channels, T]`
    pub series: Tensor,
    pub label: usize,
}

/// Per-channel statistics of a training split. `std` is the raw population
/// standard deviation; [`STD_FLOOR`] is applied when dividing.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub samples: Vec<Sample>,
    pub n_classes: usize,
    pub n_channels: usize,
    pub series_len: usize,
    /// Original label of each class index.
    pub label_names: Vec<String>,
    /// Statistics the samples were normalized with, if any.
    pub norm: Option<NormStats>,
    /// Non-fatal problems found while loading.
    pub warnings: Vec<String>,
}

impl SeriesDataset {
    /// Builds a dataset from raw per-sample series (`[channels][time]`) and
    /// label names, remapping labels and padding lengths.
    pub fn from_raw(raw: Vec<(String, Vec<Vec<f64>>)>) -> Result<Self> {
        let mut warnings = Vec::new();
        let n_channels = raw.first().map_or(0, |(_, s)| s.len());
        let series_len = raw
            .iter()
            .flat_map(|(_, s)| s.iter().map(Vec::len))
            .max()
            .unwrap_or(0);
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut label_names = Vec::new();
        let mut samples = Vec::with_capacity(raw.len());
        for (i, (name, mut chans)) in raw.into_iter().enumerate() {
            if chans.len() != n_channels {
                return Err(Error::Input(format!(
                    "record {i}: {} channels, expected {n_channels}",
                    chans.len()
                )));
            }
            for (c, ch) in chans.iter_mut().enumerate() {
                let Some(&last) = ch.last() else {
                    return Err(Error::Input(format!("record {i}, channel {c}: empty series")));
                };
                if ch.len() < series_len {
                    warnings.push(format!(
                        "record {i}, channel {c}: length {} padded to {series_len}",
                        ch.len()
                    ));
                    ch.resize(series_len, last);
                }
            }
            let next = label_names.len();
            let label = *index.entry(name.clone()).or_insert_with(|| {
                label_names.push(name);
                next
            });
            let data = chans.into_iter().flatten().collect();
            samples.push(Sample {
                series: Tensor::new(vec![n_channels, series_len], data)?,
                label,
            });
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(SeriesDataset {
            samples,
            n_classes: label_names.len(),
            n_channels,
            series_len,
            label_names,
            norm: None,
            warnings,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn series(&self) -> Vec<&Tensor> {
        self.samples.iter().map(|s| &s.series).collect()
    }

    /// Number of samples in each class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order, with the class table unchanged.
    pub fn subset(&self, indices: &[usize]) -> SeriesDataset {
        SeriesDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            warnings: Vec::new(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> SeriesDataset {
        SeriesDataset {
            samples: Vec::new(),
            n_classes: self.n_classes,
            n_channels: self.n_channels,
            series_len: self.series_len,
            label_names: self.label_names.clone(),
            norm: self.norm.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// Seeded per-class shuffle; the first `round(fraction · n_c)` samples of
    /// each class go to the second split, keeping at least one sample of every
    /// class with two or more members in the first.
    pub fn split_stratified(&self, fraction: f64, seed: u64) -> (SeriesDataset, SeriesDataset) {
        let mut rng = Rng::new(seed);
        let mut first = Vec::new();
        let mut second = Vec::new();
        for class in 0..self.n_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.samples[i].label == class).collect();
            rng.shuffle(&mut idx);
            let n = idx.len();
            let mut take = (fraction * n as f64).round() as usize;
            if n >= 2 {
                take = take.min(n - 1);
            } else {
                take = 0;
            }
            second.extend_from_slice(&idx[..take]);
            first.extend_from_slice(&idx[take..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        (self.subset(&first), self.subset(&second))
    }

    /// Seeded stratified subsample keeping `round(fraction · n_c)` samples of
    /// each class, at least one.
    pub fn stratified_fraction(&self, fraction: f64, seed: u64) -> SeriesDataset {
        let mut rng = Rng::new(seed);
        let mut keep = Vec::new();
        for class in 0..self.n_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.samples[i].label == class).collect();
            rng.shuffle(&mut idx);
            let k = ((fraction * idx.len() as f64).round() as usize).clamp(1.min(idx.len()), idx.len());
            keep.extend_from_slice(&idx[..k]);
        }
        keep.sort_unstable();
        self.subset(&keep)
    }

    /// Re-expresses labels in terms of another dataset's class table, so a
    /// test file can be scored against a model trained on a training file.
    pub fn align_labels(&mut self, names: &[String]) -> Result<()> {
        let target: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut map = Vec::with_capacity(self.n_classes);
        for name in &self.label_names {
            match target.get(name.as_str()) {
                Some(&i) => map.push(i),
                None => return Err(Error::Input(format!("label `{name}` does not occur in the training data"))),
            }
        }
        for s in &mut self.samples {
            s.label = map[s.label];
        }
        self.label_names = names.to_vec();
        self.n_classes = names.len();
        Ok(())
    }

    /// Per-channel mean and population std over all samples and time points.
    pub fn fit_stats(&self) -> NormStats {
        let c = self.n_channels;
        let t = self.series_len;
        let count = (self.len() * t) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        if count == 0.0 {
            return NormStats { mean, std };
        }
        for s in &self.samples {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += s.series.row(ch).iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for s in &self.samples {
            for (ch, v) in std.iter_mut().enumerate() {
                *v += s.series.row(ch).iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        std.iter_mut().for_each(|v| *v = (*v / count).sqrt());
        NormStats { mean, std }
    }

    /// `(x − mean) / max(std, 1e-8)` per channel.
    pub fn normalized(&self, stats: &NormStats) -> Result<SeriesDataset> {
        if stats.mean.len() != self.n_channels || stats.std.len() != self.n_channels {
            return Err(Error::Input(format!(
                "normalization stats cover {} channels, dataset has {}",
                stats.mean.len(),
                self.n_channels
            )));
        }
        let mut out = self.clone();
        for s in &mut out.samples {
            transform_channels(&mut s.series, |ch, x| (x - stats.mean[ch]) / stats.std[ch].max(STD_FLOOR));
        }
        out.norm = Some(stats.clone());
        Ok(out)
    }

    /// Undoes [`SeriesDataset::normalized`] using the stored statistics.
    pub fn denormalized(&self) -> Result<SeriesDataset> {
        let stats = self
            .norm
            .as_ref()
            .ok_or_else(|| Error::Input("dataset is not normalized".into()))?;
        let mut out = self.clone();
        for s in &mut out.samples {
            transform_channels(&mut s.series, |ch, x| x * stats.std[ch].max(STD_FLOOR) + stats.mean[ch]);
        }
        out.norm = None;
        Ok(out)
    }
}

fn transform_channels(series: &mut Tensor, f: impl Fn(usize, f64) -> f64) {
    let t = series.last_dim();
    for (i, v) in series.data_mut().iter_mut().enumerate() {
        *v = f(i / t, *v);
    }
}

/// Normalizes a training split with its own statistics.
pub fn znormalize(train: &SeriesDataset) -> Result<SeriesDataset> {
    train.normalized(&train.fit_stats())
}

/// Copy of `ds` with `sigma · n` added, where `n` is standard normal noise
/// seeded by `(seed, sample index, channel)`.
pub fn add_gaussian_noise(ds: &SeriesDataset, sigma: f64, seed: u64) -> Result<SeriesDataset> {
    if !(sigma >= 0.0) {
        return Err(Error::Input(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let mut out = ds.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    for (i, s) in out.samples.iter_mut().enumerate() {
        let t = s.series.last_dim();
        for (ch, row) in s.series.data_mut().chunks_mut(t).enumerate() {
            let mut rng = Rng::derived(seed, &[i as u64, ch as u64]);
            row.iter_mut().for_each(|v| *v += sigma * rng.normal());
        }
    }
    Ok(out)
}

/// Univariate corpus where class `c` is a sinusoid with `freqs[c]` cycles over
/// `t` points, random phase, plus Gaussian noise of std `snr_sigma`. Samples
/// are interleaved by class.
pub fn make_synthetic_freq_dataset(
    n_per_class: usize,
    t: usize,
    freqs: &[f64],
    snr_sigma: f64,
    seed: u64,
) -> Result<SeriesDataset> {
    if freqs.is_empty() {
        return Err(Error::Input("at least one frequency is required".into()));
    }
    for (i, &f) in freqs.iter().enumerate() {
        if !(f >= 0.0 && f < t as f64 / 2.0) {
            return Err(Error::Input(format!("frequency {f} must lie in [0, T/2) for T = {t}")));
        }
        if freqs[..i].contains(&f) {
            return Err(Error::Input(format!("frequency {f} is repeated")));
        }
    }
    if t == 0 || snr_sigma < 0.0 {
        return Err(Error::Input("need T ≥ 1 and a non-negative noise level".into()));
    }
    let mut rng = Rng::new(seed);
    let mut raw = Vec::with_capacity(n_per_class * freqs.len());
    for _ in 0..n_per_class {
        for (c, &f) in freqs.iter().enumerate() {
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            let x = (0..t)
                .map(|j| {
                    let clean = (std::f64::consts::TAU * f * j as f64 / t as f64 + phase).sin();
                    clean + snr_sigma * rng.normal()
                })
                .collect();
            raw.push((c.to_string(), vec![x]));
        }
    }
    let mut ds = SeriesDataset::from_raw(raw)?;
    ds.n_channels = 1;
    ds.series_len = t;
    ds.label_names = (0..freqs.len()).map(|c| c.to_string()).collect();
    ds.n_classes = freqs.len();
    Ok(ds)
}

fn parse_value(field: &str, line: usize, column: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        column,
        message: format!("`{}` is not a number", field.trim()),
    })
}

pub fn load_univariate(path: &Path) -> Result<SeriesDataset> {
    parse_univariate(&read(path)?)
}

/// Parses the univariate text format. Line and column numbers in errors are
/// 1-based; column 1 is the label.
pub fn parse_univariate(text: &str) -> Result<SeriesDataset> {
    let mut delim = None;
    let mut raw = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let d = *delim.get_or_insert(if line.contains('\t') { '\t' } else { ',' });
        let mut fields = line.split(d);
        let label = fields.next().unwrap_or("").trim();
        if label.is_empty() {
            return Err(Error::Parse {
                line: ln + 1,
                column: 1,
                message: "missing label".into(),
            });
        }
        let values = fields
            .enumerate()
            .map(|(j, f)| parse_value(f, ln + 1, j + 2))
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                line: ln + 1,
                column: 2,
                message: "no values after the label".into(),
            });
        }
        raw.push((label.to_string(), vec![values]));
    }
    if raw.is_empty() {
        return Err(Error::Input("no samples found".into()));
    }
    SeriesDataset::from_raw(raw)
}

#[derive(Deserialize)]
struct Record {
    label: Value,
    series: Vec<Vec<f64>>,
}

pub fn load_multivariate(path: &Path) -> Result<SeriesDataset> {
    parse_multivariate(&read(path)?)
}

/// Parses the JSON-lines format. A record's index counts non-blank lines from
/// 0.
pub fn parse_multivariate(text: &str) -> Result<SeriesDataset> {
    let mut raw = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: ln + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        let label = match rec.label {
            Value::String(s) => s,
            Value::Number(n) => n.to_string(),
            other => {
                return Err(Error::Parse {
                    line: ln + 1,
                    column: 1,
                    message: format!("label must be an integer or string, got {other}"),
                })
            }
        };
        raw.push((label, rec.series));
    }
    if raw.is_empty() {
        return Err(Error::Input("no samples found".into()));
    }
    SeriesDataset::from_raw(raw)
}

/// Loads by extension: `.jsonl`/`.json` are multivariate, anything else
/// univariate.
pub fn load_any(path: &Path) -> Result<SeriesDataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "json") => load_multivariate(path),
        _ => load_univariate(path),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}

/// Writes the univariate format with tab delimiters. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn save_univariate(ds: &SeriesDataset, path: &Path) -> Result<()> {
    if ds.n_channels != 1 {
        return Err(Error::Input(format!(
            "univariate format needs 1 channel, dataset has {}",
            ds.n_channels
        )));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in &ds.samples {
        write!(w, "{}", ds.label_names[s.label])?;
        for v in s.series.data() {
            write!(w, "\t{v:?}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_multivariate(ds: &SeriesDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in &ds.samples {
        let name = &ds.label_names[s.label];
        let label = match name.parse::<i64>() {
            Ok(n) if n.to_string() == *name => Value::from(n),
            _ => Value::from(name.as_str()),
        };
        let t = s.series.last_dim();
        let series: Vec<&[f64]> = s.series.data().chunks(t).collect();
        let rec = serde_json::json!({ "label": label, "series": series });
        writeln!(w, "{rec}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn univariate_basic() {
        let ds = parse_univariate("0\t1\t2\n1\t3\t4\n").unwrap();
        assert_eq!((ds.len(), ds.series_len, ds.n_classes, ds.n_channels), (2, 2, 2, 1));
        assert_eq!(ds.samples[1].series.data(), &[3.0, 4.0]);
        assert!(ds.warnings.is_empty());
    }

    #[test]
    fn univariate_label_remap_and_commas() {
        let ds = parse_univariate("5,1,2\n3,0,0\n5,1,1\n").unwrap();
        assert_eq!(ds.labels(), vec![0, 1, 0]);
        assert_eq!(ds.label_names, vec!["5", "3"]);
    }

    #[test]
    fn univariate_ragged_rows_are_padded() {
        let ds = parse_univariate("0\t1\t2\t3\n1\t1\t2\t3\t4\t5\n").unwrap();
        assert_eq!(ds.series_len, 5);
        assert_eq!(ds.samples[0].series.data(), &[1.0, 2.0, 3.0, 3.0, 3.0]);
        assert_eq!(ds.warnings.len(), 1);
    }

    #[test]
    fn univariate_parse_error_location() {
        match parse_univariate("0\t1\t2\n1\t3\tx4\n") {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 3)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn multivariate_basic_and_padding() {
        let ds = parse_multivariate("{\"label\":0,\"series\":[[1,2],[3,4]]}\n").unwrap();
        assert_eq!((ds.len(), ds.n_channels, ds.series_len), (1, 2, 2));
        assert_eq!(ds.samples[0].series.data(), &[1.0, 2.0, 3.0, 4.0]);

        let ds = parse_multivariate(
            "{\"label\":\"a\",\"series\":[[1,2]]}\n{\"label\":\"b\",\"series\":[[1,2,3]]}\n",
        )
        .unwrap();
        assert_eq!(ds.series_len, 3);
        assert_eq!(ds.samples[0].series.data(), &[1.0, 2.0, 2.0]);
    }

    #[test]
    fn multivariate_channel_mismatch_names_record() {
        let err = parse_multivariate(
            "{\"label\":0,\"series\":[[1],[2]]}\n{\"label\":1,\"series\":[[1],[2],[3]]}\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Input(ref m) if m.contains("record 1")), "{err}");
    }

    #[test]
    fn round_trips_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let ds = parse_univariate("b\t0.1\t-2.5e-7\n7\t3\t1e300\nb\t0.3\t0.30000000000000004\n").unwrap();
        let p = dir.path().join("u.tsv");
        save_univariate(&ds, &p).unwrap();
        assert_eq!(load_univariate(&p).unwrap(), ds);

        let mv = parse_multivariate(
            "{\"label\":3,\"series\":[[1.5,2],[0.1,4]]}\n{\"label\":\"x\",\"series\":[[1,-2],[3,1e-9]]}\n",
        )
        .unwrap();
        let p = dir.path().join("m.jsonl");
        save_multivariate(&mv, &p).unwrap();
        assert_eq!(load_multivariate(&p).unwrap(), mv);
    }

    #[test]
    fn missing_file_is_input_error() {
        assert!(matches!(load_univariate(Path::new("/nonexistent/x.tsv")), Err(Error::Input(_))));
    }

    #[test]
    fn normalization_examples() {
        let ds = parse_univariate("0\t5\t5\t5\n").unwrap();
        let n = znormalize(&ds).unwrap();
        assert_eq!(n.samples[0].series.data(), &[0.0, 0.0, 0.0]);

        let ds = parse_univariate("0\t0\t2\n").unwrap();
        assert_eq!(znormalize(&ds).unwrap().samples[0].series.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn normalization_statistics_and_inverse() {
        let mut rng = Rng::new(4);
        let raw = (0..20)
            .map(|i| {
                let chans = (0..3).map(|c| (0..30).map(|_| 5.0 * c as f64 + 3.0 * rng.normal()).collect()).collect();
                ((i % 2).to_string(), chans)
            })
            .collect();
        let ds = SeriesDataset::from_raw(raw).unwrap();
        let n = znormalize(&ds).unwrap();
        let stats = n.fit_stats();
        for c in 0..3 {
            assert!(stats.mean[c].abs() < 1e-10);
            assert!((stats.std[c] - 1.0).abs() < 1e-6);
        }
        let back = n.denormalized().unwrap();
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert!(a.series.max_abs_diff(&b.series).unwrap() < 1e-12);
        }
    }

    #[test]
    fn noise_examples() {
        let ds = make_synthetic_freq_dataset(3, 16, &[1.0, 4.0], 0.0, 1).unwrap();
        assert_eq!(add_gaussian_noise(&ds, 0.0, 9).unwrap(), ds);
        let a = add_gaussian_noise(&ds, 0.3, 9).unwrap();
        assert_eq!(a, add_gaussian_noise(&ds, 0.3, 9).unwrap());
        assert_ne!(a, ds);
        assert!(add_gaussian_noise(&ds, -1.0, 9).is_err());

        let zeros = SeriesDataset::from_raw(vec![("0".into(), vec![vec![0.0; 4000]])]).unwrap();
        let noisy = add_gaussian_noise(&zeros, 1.0, 2).unwrap();
        let x = noisy.samples[0].series.data();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        assert!((std - 1.0).abs() < 0.05, "{std}");
    }

    #[test]
    fn synthetic_corpus_is_separable_by_spectral_peak() {
        let ds = make_synthetic_freq_dataset(25, 128, &[3.0, 12.0], 0.0, 7).unwrap();
        assert_eq!(ds.class_counts(), vec![25, 25]);
        for s in &ds.samples {
            let x = Tensor::from_vec(s.series.data().to_vec());
            let bins = spectral::rfft(&x).unwrap().bins;
            let mag: Vec<f64> = bins.data().iter().map(|c| c.norm()).collect();
            let peak = (0..mag.len()).max_by(|&a, &b| mag[a].total_cmp(&mag[b])).unwrap();
            let predicted = if peak == 3 { 0 } else if peak == 12 { 1 } else { usize::MAX };
            assert_eq!(predicted, s.label);
        }
        assert_eq!(ds, make_synthetic_freq_dataset(25, 128, &[3.0, 12.0], 0.0, 7).unwrap());
        assert!(make_synthetic_freq_dataset(2, 16, &[3.0, 3.0], 0.0, 1).is_err());
        assert!(make_synthetic_freq_dataset(2, 16, &[8.0], 0.0, 1).is_err());
    }

    #[test]
    fn stratified_split_keeps_every_class() {
        let ds = make_synthetic_freq_dataset(10, 8, &[1.0, 2.0, 3.0], 0.1, 3).unwrap();
        let (train, val) = ds.split_stratified(0.2, 5);
        assert_eq!(train.class_counts(), vec![8, 8, 8]);
        assert_eq!(val.class_counts(), vec![2, 2, 2]);
        let quarter = ds.stratified_fraction(0.25, 5);
        assert_eq!(quarter.class_counts(), vec![3, 3, 3]);
    }

    #[test]
    fn align_labels_maps_by_name() {
        let train = parse_univariate("a\t1\nb\t2\n").unwrap();
        let mut test = parse_univariate("b\t1\na\t2\n").unwrap();
        test.align_labels(&train.label_names).unwrap();
        assert_eq!(test.labels(), vec![1, 0]);
        let mut bad = parse_univariate("c\t1\n").unwrap();
        assert!(bad.align_labels(&train.label_names).is_err());
    }

    proptest! {
        #[test]
        fn noise_never_mutates_source(seed in 0u64..500, sigma in 0.0f64..2.0) {
            let ds = make_synthetic_freq_dataset(2, 12, &[1.0, 3.0], 0.2, seed).unwrap();
            let before = ds.clone();
            let noisy = add_gaussian_noise(&ds, sigma, seed).unwrap();
            prop_assert_eq!(&ds, &before);
            prop_assert_eq!(noisy.len(), ds.len());
        }

        #[test]
        fn univariate_text_round_trips(seed in 0u64..500, n in 1usize..6, t in 1usize..9) {
            let mut rng = Rng::new(seed);
            let raw = (0..n).map(|i| ((i % 3).to_string(), vec![(0..t).map(|_| rng.normal() * 1e3).collect()])).collect();
            let ds = SeriesDataset::from_raw(raw).unwrap();
            let mut text = String::new();
            for s in &ds.samples {
                text.push_str(&ds.label_names[s.label]);
                for v in s.series.data() {
                    text.push_str(&format!(",{v:?}"));
                }
                text.push('\n');
            }
            let back = parse_univariate(&text).unwrap();
            prop_assert!(back == ds);
        }
    }
}
