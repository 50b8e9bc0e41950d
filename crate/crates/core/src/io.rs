//! Canonical on-disk dataset format.
//!
//! * embeddings (binary, little-endian): magic `PLLEMB01`, u32 clip count,
//!   then per clip u32 id length, UTF-8 id, u32 T, u32 D, T·D f32 row-major.
//! * labels CSV `clip_id,class_index,state`, observed entries only
//!   (state 0 negative, 1 positive).
//! * classes CSV `class_index,class_name`.
//! * splits CSV `clip_id,split`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EmbeddingSequence, Split};
use crate::error::{Error, Result};
use crate::labels::{LabelState, PartialLabelMatrix};

pub const EMBEDDINGS_MAGIC: &[u8; 8] = b"PLLEMB01";

/// File locations of one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub embeddings: PathBuf,
    pub labels: PathBuf,
    pub classes: PathBuf,
    pub splits: PathBuf,
}

impl DatasetPaths {
    /// Conventional file names inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            embeddings: dir.join("embeddings.bin"),
            labels: dir.join("labels.csv"),
            classes: dir.join("classes.csv"),
            splits: dir.join("splits.csv"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.embeddings, &self.labels, &self.classes, &self.splits]
    }
}

pub(crate) fn eof_aware(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::UnexpectedEof
    } else {
        Error::Io(e)
    }
}

pub(crate) fn read_magic(r: &mut impl Read, expected: &[u8; 8]) -> Result<()> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(eof_aware)?;
    if &magic != expected {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(eof_aware)
}

pub fn write_embeddings(w: &mut impl Write, embeddings: &[EmbeddingSequence]) -> Result<()> {
    w.write_all(EMBEDDINGS_MAGIC)?;
    w.write_u32::<LittleEndian>(len_u32(embeddings.len())?)?;
    for e in embeddings {
        let id = e.clip_id().as_bytes();
        w.write_u32::<LittleEndian>(len_u32(id.len())?)?;
        w.write_all(id)?;
        let (t, d) = e.frames().dim();
        w.write_u32::<LittleEndian>(len_u32(t)?)?;
        w.write_u32::<LittleEndian>(len_u32(d)?)?;
        for v in e.frames().iter() {
            w.write_f32::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("length {n} does not fit in u32")))
}

pub fn read_embeddings(r: &mut impl Read) -> Result<Vec<EmbeddingSequence>> {
    read_magic(r, EMBEDDINGS_MAGIC)?;
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    let mut dim = None;
    for _ in 0..n {
        let id_len = read_u32(r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(eof_aware)?;
        let id = String::from_utf8(id)
            .map_err(|e| Error::InvalidArgument(format!("clip id is not UTF-8: {e}")))?;
        let t = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::DimensionMismatch(format!(
                    "clip {id:?} has D={d} but earlier clips have D={prev}"
                )))
            }
            _ => {}
        }
        let mut data = vec![0f32; t * d];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(eof_aware)?;
        let frames = Array2::from_shape_vec((t, d), data).expect("buffer sized to t*d");
        out.push(EmbeddingSequence::new(id, frames)?);
    }
    Ok(out)
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn expect_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let headers = rdr.headers()?;
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Malformed {
            line: 1,
            reason: format!(
                "expected header {:?}, found {:?}",
                expected.join(","),
                headers
            ),
        });
    }
    Ok(())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?)
}

pub fn read_classes(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv_reader(path)?;
    expect_header(&mut rdr, &["class_index", "class_name"])?;
    let mut names = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let index: usize = rec[0].parse().map_err(|_| Error::Malformed {
            line,
            reason: format!("bad class_index {:?}", &rec[0]),
        })?;
        if index != names.len() {
            return Err(Error::Malformed {
                line,
                reason: format!(
                    "class indices must be contiguous from 0; expected {}, found {index}",
                    names.len()
                ),
            });
        }
        names.push(rec[1].to_owned());
    }
    Ok(names)
}

fn read_labels(
    path: &Path,
    ids: &HashMap<&str, usize>,
    num_classes: usize,
) -> Result<PartialLabelMatrix> {
    let mut rdr = csv_reader(path)?;
    expect_header(&mut rdr, &["clip_id", "class_index", "state"])?;
    let mut entries = Array2::from_elem((ids.len(), num_classes), LabelState::Missing);
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let row = *ids
            .get(&rec[0])
            .ok_or_else(|| Error::UnknownClipId(rec[0].to_owned()))?;
        let class: usize = rec[1]
            .parse()
            .ok()
            .filter(|c| *c < num_classes)
            .ok_or_else(|| Error::Malformed {
                line,
                reason: format!("class_index {:?} out of range 0..{num_classes}", &rec[1]),
            })?;
        let state = rec[2]
            .parse::<u8>()
            .ok()
            .and_then(LabelState::from_code)
            .ok_or_else(|| Error::Malformed {
                line,
                reason: format!("state must be 0 or 1, found {:?}", &rec[2]),
            })?;
        if entries[[row, class]].is_observed() {
            return Err(Error::Malformed {
                line,
                reason: format!("duplicate label for clip {:?}, class {class}", &rec[0]),
            });
        }
        entries[[row, class]] = state;
    }
    Ok(PartialLabelMatrix::new_permissive(entries))
}

fn read_splits(path: &Path, ids: &HashMap<&str, usize>) -> Result<Vec<Split>> {
    let mut rdr = csv_reader(path)?;
    expect_header(&mut rdr, &["clip_id", "split"])?;
    let mut splits = vec![None; ids.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let row = *ids
            .get(&rec[0])
            .ok_or_else(|| Error::UnknownClipId(rec[0].to_owned()))?;
        let split: Split = rec[1].parse().map_err(|_| Error::Malformed {
            line,
            reason: format!("unknown split {:?}", &rec[1]),
        })?;
        splits[row] = Some(split);
    }
    let inv: HashMap<usize, &str> = ids.iter().map(|(k, v)| (*v, *k)).collect();
    splits
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| Error::InvalidArgument(format!("clip {:?} has no split tag", inv[&i])))
        })
        .collect()
}

/// Reads a clip-id list with header `clip_id` (fixed validation sidecar).
pub fn read_clip_list(path: &Path) -> Result<HashSet<String>> {
    let mut rdr = csv_reader(path)?;
    expect_header(&mut rdr, &["clip_id"])?;
    let mut out = HashSet::new();
    for rec in rdr.records() {
        out.insert(rec?[0].to_owned());
    }
    Ok(out)
}

pub fn read_dataset(paths: &DatasetPaths) -> Result<Dataset> {
    let embeddings = read_embeddings(&mut BufReader::new(File::open(&paths.embeddings)?))?;
    let mut ids = HashMap::with_capacity(embeddings.len());
    for (i, e) in embeddings.iter().enumerate() {
        if ids.insert(e.clip_id(), i).is_some() {
            return Err(Error::DuplicateClipId(e.clip_id().to_owned()));
        }
    }
    let classes = read_classes(&paths.classes)?;
    let labels = read_labels(&paths.labels, &ids, classes.len())?;
    let splits = read_splits(&paths.splits, &ids)?;
    drop(ids);
    Dataset::new(embeddings, labels, classes, splits)
}

pub fn write_dataset(dataset: &Dataset, paths: &DatasetPaths) -> Result<()> {
    let mut w = BufWriter::new(File::create(&paths.embeddings)?);
    write_embeddings(&mut w, dataset.embeddings())?;
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.labels)?;
    w.write_record(["clip_id", "class_index", "state"])?;
    let labels = dataset.labels();
    for (i, id) in dataset.clip_ids().enumerate() {
        for c in 0..labels.num_classes() {
            if let Some(code) = labels.get(i, c).code() {
                w.write_record([id, &c.to_string(), &code.to_string()])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.classes)?;
    w.write_record(["class_index", "class_name"])?;
    for (i, name) in dataset.class_names().iter().enumerate() {
        w.write_record([&i.to_string(), name])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.splits)?;
    w.write_record(["clip_id", "split"])?;
    for (id, split) in dataset.clip_ids().zip(dataset.splits()) {
        w.write_record([id, &split.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::drop_labels;
    use crate::synthetic::{generate_synthetic, SyntheticSpec};
    use std::fs;

    fn sample() -> Dataset {
        let (d, _) = generate_synthetic(&SyntheticSpec::new(12, 3, 0.4, 2)).unwrap();
        let dropped = drop_labels(d.labels(), 0.5, 1).unwrap();
        d.with_labels(dropped).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        let d = sample();
        write_dataset(&d, &paths).unwrap();
        assert_eq!(read_dataset(&paths).unwrap(), d);
    }

    #[test]
    fn unknown_clip_in_labels() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        write_dataset(&sample(), &paths).unwrap();
        let mut labels = fs::read_to_string(&paths.labels).unwrap();
        labels.push_str("ghost,0,1\n");
        fs::write(&paths.labels, labels).unwrap();
        let err = read_dataset(&paths).unwrap_err();
        assert!(matches!(err, Error::UnknownClipId(ref id) if id == "ghost"));
        assert!(err.to_string().contains("unknown clip id"));
    }

    #[test]
    fn truncated_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        write_dataset(&sample(), &paths).unwrap();
        let bytes = fs::read(&paths.embeddings).unwrap();
        fs::write(&paths.embeddings, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_dataset(&paths).unwrap_err();
        assert!(matches!(err, Error::UnexpectedEof));
        assert_eq!(err.to_string(), "unexpected end of file");
    }

    #[test]
    fn bad_magic() {
        let err = read_embeddings(&mut &b"PLLEMB02\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }

    #[test]
    fn dimension_mismatch_between_clips() {
        let a = EmbeddingSequence::new("a", Array2::zeros((2, 3))).unwrap();
        let b = EmbeddingSequence::new("b", Array2::zeros((2, 4))).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &[a, b]).unwrap();
        assert!(matches!(
            read_embeddings(&mut &buf[..]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn duplicate_clip_in_embeddings() {
        let a = EmbeddingSequence::new("a", Array2::zeros((1, 2))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        write_dataset(&sample(), &paths).unwrap();
        let mut f = File::create(&paths.embeddings).unwrap();
        write_embeddings(&mut f, &[a.clone(), a]).unwrap();
        drop(f);
        assert!(matches!(
            read_dataset(&paths),
            Err(Error::DuplicateClipId(_))
        ));
    }
}
