//! Multimodal samples, datasets, batching and the JSON-lines file format.
//!
//! One sample per line:
//! `{"id": "...", "domain": "...", "label": 0, "text": [[...]], "video": [[...]]}`
//! where `text` is `tokens x d_text` and `video` is `frames x d_video`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub domain: String,
    pub label: usize,
    pub text: Vec<Vec<f64>>,
    pub video: Vec<Vec<f64>>,
}

/// Token/frame counts and feature widths shared by every sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub text_tokens: usize,
    pub text_dim: usize,
    pub video_frames: usize,
    pub video_dim: usize,
}

fn matrix_dims(m: &[Vec<f64>]) -> Option<(usize, usize)> {
    let cols = m.first()?.len();
    m.iter().all(|r| r.len() == cols).then_some((m.len(), cols))
}

impl Sample {
    pub fn dims(&self) -> Result<Dims> {
        let (tt, td) = matrix_dims(&self.text)
            .ok_or_else(|| Error::Data(format!("sample `{}`: empty or ragged text matrix", self.id)))?;
        let (vt, vd) = matrix_dims(&self.video)
            .ok_or_else(|| Error::Data(format!("sample `{}`: empty or ragged video matrix", self.id)))?;
        Ok(Dims {
            text_tokens: tt,
            text_dim: td,
            video_frames: vt,
            video_dim: vd,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Stacked tensors for a group of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub domains: Vec<String>,
    pub labels: Vec<usize>,
    /// `[B, text_tokens, text_dim]`
    pub text: Tensor,
    /// `[B, video_frames, video_dim]`
    pub video: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Common dimensions; errors if samples disagree or the set is empty.
    pub fn dims(&self) -> Result<Dims> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Data("dataset is empty".into()))?
            .dims()?;
        for s in &self.samples[1..] {
            let d = s.dims()?;
            if d != first {
                return Err(Error::Data(format!(
                    "sample `{}` has dims {d:?}, expected {first:?}",
                    s.id
                )));
            }
        }
        Ok(first)
    }

    /// Checks dims and that every label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<Dims> {
        let dims = self.dims()?;
        if let Some(s) = self.samples.iter().find(|s| s.label >= num_classes) {
            return Err(Error::Data(format!(
                "sample `{}` has label {} outside 0..{num_classes}",
                s.id, s.label
            )));
        }
        Ok(dims)
    }

    /// Domain names in order of first appearance.
    pub fn domains(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for s in &self.samples {
            if !seen.contains(&s.domain) {
                seen.push(s.domain.clone());
            }
        }
        seen
    }

    /// Sample indices grouped by domain.
    pub fn indices_by_domain(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            out.entry(s.domain.clone()).or_default().push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn filter_domains(&self, domains: &[String]) -> Dataset {
        Dataset::new(
            self.samples
                .iter()
                .filter(|s| domains.contains(&s.domain))
                .cloned()
                .collect(),
        )
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let dims = match indices.first() {
            Some(&i) => self.samples[i].dims()?,
            None => return Err(Error::Data("empty batch".into())),
        };
        let b = indices.len();
        let mut text = Vec::with_capacity(b * dims.text_tokens * dims.text_dim);
        let mut video = Vec::with_capacity(b * dims.video_frames * dims.video_dim);
        let mut labels = Vec::with_capacity(b);
        let mut ids = Vec::with_capacity(b);
        let mut domains = Vec::with_capacity(b);
        for &i in indices {
            let s = &self.samples[i];
            if s.dims()? != dims {
                return Err(Error::Data(format!("sample `{}` has mismatched dims", s.id)));
            }
            text.extend(s.text.iter().flatten());
            video.extend(s.video.iter().flatten());
            labels.push(s.label);
            ids.push(s.id.clone());
            domains.push(s.domain.clone());
        }
        Ok(Batch {
            ids,
            domains,
            labels,
            text: Tensor::new(vec![b, dims.text_tokens, dims.text_dim], text)?,
            video: Tensor::new(vec![b, dims.video_frames, dims.video_dim], video)?,
        })
    }

    pub fn write_jsonl(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(r: impl Read) -> Result<Self> {
        let mut samples = Vec::new();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample =
                serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
            samples.push(s);
        }
        Ok(Dataset { samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_jsonl(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: &str, domain: &str, label: usize, text: Vec<Vec<f64>>, video: Vec<Vec<f64>>) -> Sample {
        Sample {
            id: id.into(),
            domain: domain.into(),
            label,
            text,
            video,
        }
    }

    #[test]
    fn batch_stacks_in_order() {
        let ds = Dataset::new(vec![
            sample("a", "x", 0, vec![vec![1.0, 2.0]], vec![vec![3.0]]),
            sample("b", "y", 2, vec![vec![4.0, 5.0]], vec![vec![6.0]]),
        ]);
        let b = ds.batch(&[1, 0]).unwrap();
        assert_eq!(b.text.shape(), &[2, 1, 2]);
        assert_eq!(b.text.data(), &[4.0, 5.0, 1.0, 2.0]);
        assert_eq!(b.labels, vec![2, 0]);
        assert_eq!(ds.domains(), vec!["x".to_string(), "y".to_string()]);
    }

    #[test]
    fn validate_catches_labels_and_ragged_rows() {
        let ds = Dataset::new(vec![sample("a", "x", 3, vec![vec![1.0]], vec![vec![1.0]])]);
        assert!(ds.validate(3).is_err());
        assert!(ds.validate(4).is_ok());
        let ragged = Dataset::new(vec![sample(
            "a",
            "x",
            0,
            vec![vec![1.0], vec![1.0, 2.0]],
            vec![vec![1.0]],
        )]);
        assert!(ragged.dims().is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"domain\":\"x\",\"label\":0,\"text\":[[1]],\"video\":[[1]]}\nnot json\n";
        let err = Dataset::read_jsonl(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    proptest! {
        #[test]
        fn jsonl_round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 6),
            label in 0usize..3,
        ) {
            let ds = Dataset::new(vec![sample(
                "s-0",
                "dom",
                label,
                vec![values[..2].to_vec(), values[2..4].to_vec()],
                vec![values[4..].to_vec()],
            )]);
            let mut buf = Vec::new();
            ds.write_jsonl(&mut buf).unwrap();
            let back = Dataset::read_jsonl(buf.as_slice()).unwrap();
            let flat = |d: &Dataset| -> Vec<u64> {
                d.samples[0].text.iter().chain(&d.samples[0].video).flatten().map(|v| v.to_bits()).collect()
            };
            prop_assert_eq!(flat(&ds), flat(&back));
            prop_assert_eq!(ds, back);
        }
    }
}
