//! Embedding sequences and the dataset container.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{round_count, PartialLabelMatrix};
use crate::seed;

/// T×D frame embeddings for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSequence {
    clip_id: String,
    frames: Array2<f32>,
}

impl EmbeddingSequence {
    pub fn new(clip_id: impl Into<String>, frames: Array2<f32>) -> Result<Self> {
        let clip_id = clip_id.into();
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "clip {clip_id:?} has shape {:?}; T and D must be at least 1",
                frames.dim()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("frames of clip {clip_id:?}")));
        }
        Ok(Self { clip_id, frames })
    }

    pub fn clip_id(&self) -> &str {
        &self.clip_id
    }

    pub fn frames(&self) -> &Array2<f32> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "validate" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    embeddings: Vec<EmbeddingSequence>,
    labels: PartialLabelMatrix,
    class_names: Vec<String>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(
        embeddings: Vec<EmbeddingSequence>,
        labels: PartialLabelMatrix,
        class_names: Vec<String>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let n = embeddings.len();
        if labels.num_clips() != n || splits.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} embedding sequences, {} label rows, {} split tags",
                labels.num_clips(),
                splits.len()
            )));
        }
        if labels.num_classes() != class_names.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} label columns but {} class names",
                labels.num_classes(),
                class_names.len()
            )));
        }
        if let Some(first) = embeddings.first() {
            let d = first.embed_dim();
            if let Some(bad) = embeddings.iter().find(|e| e.embed_dim() != d) {
                return Err(Error::DimensionMismatch(format!(
                    "clip {:?} has D={} but the dataset has D={d}",
                    bad.clip_id(),
                    bad.embed_dim()
                )));
            }
        }
        let mut seen = HashSet::with_capacity(n);
        for e in &embeddings {
            if !seen.insert(e.clip_id()) {
                return Err(Error::DuplicateClipId(e.clip_id().to_owned()));
            }
        }
        Ok(Self {
            embeddings,
            labels,
            class_names,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Embedding dimension, `None` for an empty dataset.
    pub fn embed_dim(&self) -> Option<usize> {
        self.embeddings.first().map(EmbeddingSequence::embed_dim)
    }

    pub fn embeddings(&self) -> &[EmbeddingSequence] {
        &self.embeddings
    }

    pub fn labels(&self) -> &PartialLabelMatrix {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn clip_ids(&self) -> impl Iterator<Item = &str> {
        self.embeddings.iter().map(EmbeddingSequence::clip_id)
    }

    pub fn with_labels(&self, labels: PartialLabelMatrix) -> Result<Self> {
        Self::new(
            self.embeddings.clone(),
            labels,
            self.class_names.clone(),
            self.splits.clone(),
        )
    }

    /// Clips at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            embeddings: indices
                .iter()
                .map(|&i| self.embeddings[i].clone())
                .collect(),
            labels: self.labels.select_rows(indices),
            class_names: self.class_names.clone(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn split(&self, split: Split) -> Self {
        self.subset(&self.indices_of(split))
    }

    fn retag(mut self, split: Split) -> Self {
        self.splits.iter_mut().for_each(|s| *s = split);
        self
    }
}

/// Randomly moves `round(val_fraction · N_train)` train-tagged clips into a
/// validation set. Returns `(train, validation)`; both keep the original
/// clip order.
pub fn split_train_val(
    dataset: &Dataset,
    val_fraction: f64,
    seed_value: u64,
) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidFraction(val_fraction, "(0, 1)"));
    }
    let mut train = dataset.indices_of(Split::Train);
    if train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 train clips to split, have {}",
            train.len()
        )));
    }
    let n_val = round_count(val_fraction * train.len() as f64);
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::TAG_SPLIT]));
    train.shuffle(&mut rng);
    let (val, rest) = train.split_at_mut(n_val);
    val.sort_unstable();
    rest.sort_unstable();
    Ok((
        dataset.subset(rest),
        dataset.subset(val).retag(Split::Validation),
    ))
}

/// Splits train-tagged clips into train and a fixed validation list.
pub fn split_fixed_validation(
    dataset: &Dataset,
    validation_ids: &HashSet<String>,
) -> Result<(Dataset, Dataset)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, e) in dataset.embeddings().iter().enumerate() {
        if dataset.splits[i] == Split::Validation || validation_ids.contains(e.clip_id()) {
            val.push(i);
        } else if dataset.splits[i] == Split::Train {
            train.push(i);
        }
    }
    let known: HashSet<&str> = dataset.clip_ids().collect();
    if let Some(id) = validation_ids
        .iter()
        .find(|id| !known.contains(id.as_str()))
    {
        return Err(Error::UnknownClipId(id.clone()));
    }
    Ok((
        dataset.subset(&train),
        dataset.subset(&val).retag(Split::Validation),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelState;

    pub(crate) fn toy(n: usize) -> Dataset {
        let embeddings = (0..n)
            .map(|i| {
                EmbeddingSequence::new(format!("clip{i:03}"), Array2::from_elem((2, 3), i as f32))
                    .unwrap()
            })
            .collect();
        Dataset::new(
            embeddings,
            PartialLabelMatrix::filled(n, 2, LabelState::Negative),
            vec!["a".into(), "b".into()],
            vec![Split::Train; n],
        )
        .unwrap()
    }

    #[test]
    fn fifteen_percent_of_hundred() {
        let (train, val) = split_train_val(&toy(100), 0.15, 1).unwrap();
        assert_eq!((train.len(), val.len()), (85, 15));
        assert!(val.splits().iter().all(|s| *s == Split::Validation));
    }

    #[test]
    fn forced_partition_of_two() {
        let (train, val) = split_train_val(&toy(2), 0.5, 9).unwrap();
        assert_eq!((train.len(), val.len()), (1, 1));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let d = toy(37);
        for s in 0..20 {
            let (a, b) = split_train_val(&d, 0.3, s).unwrap();
            let (a2, b2) = split_train_val(&d, 0.3, s).unwrap();
            assert_eq!(a, a2);
            assert_eq!(b, b2);
            let mut ids: Vec<&str> = a.clip_ids().chain(b.clip_ids()).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 37);
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split_train_val(&toy(10), 0.0, 0).is_err());
        assert!(split_train_val(&toy(10), 1.0, 0).is_err());
        assert!(split_train_val(&toy(1), 0.5, 0).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = EmbeddingSequence::new("x", Array2::zeros((1, 2))).unwrap();
        let r = Dataset::new(
            vec![e.clone(), e],
            PartialLabelMatrix::filled(2, 1, LabelState::Positive),
            vec!["c".into()],
            vec![Split::Train; 2],
        );
        assert!(matches!(r, Err(Error::DuplicateClipId(_))));
    }

    #[test]
    fn fixed_validation_list() {
        let d = toy(5);
        let ids: HashSet<String> = ["clip001".to_string(), "clip004".to_string()].into();
        let (train, val) = split_fixed_validation(&d, &ids).unwrap();
        assert_eq!(val.clip_ids().collect::<Vec<_>>(), ["clip001", "clip004"]);
        assert_eq!(train.len(), 3);
        let bad: HashSet<String> = ["nope".to_string()].into();
        assert!(matches!(
            split_fixed_validation(&d, &bad),
            Err(Error::UnknownClipId(_))
        ));
    }
}
