use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::annotations::by_video;
use super::{io_error, load_annotations, read_features, AnnotationRecord, DataError, IngestReport, KeyAliases};
use crate::exec::Execution;
use crate::features::{Video, VideoSet};
use crate::language::{load_embeddings_filtered, tokenize, Query, Vocabulary};
use crate::model::TrainingExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub video_id: String,
    pub rgb: PathBuf,
    pub flow: PathBuf,
}

fn tsv_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>, DataError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split('\t').map(|f| f.trim().to_string()).collect()))
        .collect())
}

/// Relative feature paths resolve against the index file's directory.
pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>, DataError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, fields) in tsv_lines(path)? {
        let [id, rgb, flow] = fields.as_slice() else {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                reason: format!("line {line}: expected `video_id<TAB>rgb_path<TAB>flow_path`"),
            });
        };
        if !seen.insert(id.clone()) {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                reason: format!("line {line}: video `{id}` listed twice"),
            });
        }
        out.push(IndexEntry {
            video_id: id.clone(),
            rgb: base.join(rgb),
            flow: base.join(flow),
        });
    }
    Ok(out)
}

pub fn write_index(path: &Path, entries: &[IndexEntry]) -> Result<(), DataError> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.video_id, e.rgb.display(), e.flow.display()));
    }
    fs::write(path, text).map_err(io_error(path))
}

/// A video listed under two different splits is an error.
pub fn read_splits(path: &Path) -> Result<BTreeMap<String, Split>, DataError> {
    let mut out = BTreeMap::new();
    for (line, fields) in tsv_lines(path)? {
        let [id, split] = fields.as_slice() else {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                reason: format!("line {line}: expected `video_id<TAB>split`"),
            });
        };
        let split: Split = split.parse().map_err(|reason| DataError::Format {
            path: path.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        })?;
        if let Some(prev) = out.insert(id.clone(), split) {
            if prev != split {
                return Err(DataError::Split(format!("video `{id}` is in both {prev} and {split}")));
            }
        }
    }
    Ok(out)
}

pub fn write_splits(path: &Path, splits: &BTreeMap<String, Split>) -> Result<(), DataError> {
    let text: String = splits.iter().map(|(id, s)| format!("{id}\t{s}\n")).collect();
    fs::write(path, text).map_err(io_error(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPaths {
    pub annotations: PathBuf,
    pub index: PathBuf,
    pub splits: PathBuf,
    pub embeddings: PathBuf,
}

impl CorpusPaths {
    /// The layout written by the synthetic generator.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            annotations: dir.join("annotations.json"),
            index: dir.join("index.tsv"),
            splits: dir.join("splits.tsv"),
            embeddings: dir.join("embeddings.txt"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<AnnotationRecord>,
    pub splits: BTreeMap<String, Split>,
    pub index: BTreeMap<String, IndexEntry>,
    /// Restricted to tokens that occur in the descriptions.
    pub vocabulary: Vocabulary,
    pub ingest: IngestReport,
}

impl Corpus {
    pub fn open(paths: &CorpusPaths, aliases: &KeyAliases) -> Result<Self, DataError> {
        let (records, ingest) = load_annotations(&paths.annotations, aliases)?;
        let splits = read_splits(&paths.splits)?;
        let unassigned: BTreeSet<&str> = records
            .iter()
            .filter(|r| !splits.contains_key(&r.video_id))
            .map(|r| r.video_id.as_str())
            .collect();
        if !unassigned.is_empty() {
            let list: Vec<&str> = unassigned.into_iter().take(10).collect();
            return Err(DataError::Split(format!("videos without a split: {}", list.join(", "))));
        }
        for (video, recs) in by_video(&records) {
            if recs.iter().any(|r| r.num_segments != recs[0].num_segments) {
                return Err(DataError::Split(format!(
                    "annotations of video `{video}` disagree on its segment count"
                )));
            }
        }
        let index = read_index(&paths.index)?
            .into_iter()
            .map(|e| (e.video_id.clone(), e))
            .collect();
        let words: HashSet<String> = records.iter().flat_map(|r| tokenize(&r.description)).collect();
        let vocabulary = load_embeddings_filtered(&paths.embeddings, &words)?;
        Ok(Self {
            records,
            splits,
            index,
            vocabulary,
            ingest,
        })
    }

    pub fn records(&self, split: Split) -> Vec<&AnnotationRecord> {
        self.records
            .iter()
            .filter(|r| self.splits.get(&r.video_id) == Some(&split))
            .collect()
    }

    pub fn queries(&self, split: Split) -> Vec<Query> {
        self.records(split)
            .into_iter()
            .map(|r| r.to_query(&self.vocabulary))
            .collect()
    }

    /// One example per record, targeting its consensus span.
    pub fn examples(&self, split: Split) -> Vec<TrainingExample> {
        self.records(split)
            .into_iter()
            .map(|r| TrainingExample {
                annotation_id: r.annotation_id.clone(),
                tokens: self.vocabulary.encode(&tokenize(&r.description)),
                video_id: r.video_id.clone(),
                positive: r.positive(),
            })
            .collect()
    }

    /// Features of every annotated video in `splits`, read in parallel.
    pub fn load_videos(&self, splits: &[Split], exec: Execution) -> Result<VideoSet, DataError> {
        let mut wanted: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &self.records {
            if self.splits.get(&r.video_id).is_some_and(|s| splits.contains(s)) {
                wanted.insert(&r.video_id, r.num_segments);
            }
        }
        let missing: Vec<&str> = wanted.keys().filter(|id| !self.index.contains_key(**id)).copied().collect();
        if !missing.is_empty() {
            return Err(DataError::Split(format!(
                "no feature files indexed for: {}",
                missing.into_iter().take(10).collect::<Vec<_>>().join(", ")
            )));
        }
        let jobs: Vec<(&str, usize)> = wanted.into_iter().collect();
        let loaded = exec.map(&jobs, |&(id, n)| -> Result<Video, DataError> {
            let entry = &self.index[id];
            let rgb = read_features(&entry.rgb, id, Some(n))?;
            let flow = read_features(&entry.flow, id, Some(n))?;
            Ok(Video::new(rgb, flow)?)
        });
        let mut out = VideoSet::new();
        for v in loaded {
            let v = v?;
            out.insert(v.id().to_string(), v);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_detect_leakage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        fs::write(&p, "a\ttrain\nb\tval\n\nc\ttest\n").unwrap();
        let s = read_splits(&p).unwrap();
        assert_eq!(s["b"], Split::Val);
        let q = dir.path().join("s2.tsv");
        write_splits(&q, &s).unwrap();
        assert_eq!(read_splits(&q).unwrap(), s);
        fs::write(&p, "a\ttrain\na\ttest\n").unwrap();
        assert!(matches!(read_splits(&p), Err(DataError::Split(_))));
        fs::write(&p, "a\tdev\n").unwrap();
        assert!(read_splits(&p).is_err());
    }

    #[test]
    fn index_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.tsv");
        fs::write(&p, "v1\tf/v1.rgb\t/abs/v1.flow\n").unwrap();
        let e = read_index(&p).unwrap();
        assert_eq!(e[0].rgb, dir.path().join("f/v1.rgb"));
        assert_eq!(e[0].flow, PathBuf::from("/abs/v1.flow"));
        fs::write(&p, "v1\tonly-one\n").unwrap();
        assert!(read_index(&p).is_err());
    }
}
