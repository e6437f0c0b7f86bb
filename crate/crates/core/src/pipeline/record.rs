use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One exported paper: abstract, subfield and outbound citations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub id: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub domain: String,
    pub year: i32,
    #[serde(default)]
    pub references: Vec<String>,
    #[serde(default)]
    pub citation_count: u64,
}

/// A line that did not make it into the graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    /// References naming ids absent from the records file. They are kept on
    /// the record but never paired.
    pub unknown_references: usize,
}

/// Papers indexed by id, in file order.
#[derive(Debug, Clone, Default)]
pub struct CitationGraph {
    records: Vec<PaperRecord>,
    index: HashMap<String, usize>,
}

impl CitationGraph {
    pub fn from_records(records: Vec<PaperRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self { records, index })
    }

    pub fn records(&self) -> &[PaperRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&PaperRecord> {
        self.index_of(id).map(|i| &self.records[i])
    }

    pub fn record(&self, index: usize) -> &PaperRecord {
        &self.records[index]
    }

    /// Distinct domains, sorted.
    pub fn domains(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.domain.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// The sub-graph of one domain's papers.
    pub fn restrict_to_domain(&self, domain: &str) -> Self {
        let records: Vec<PaperRecord> = self.records.iter().filter(|r| r.domain == domain).cloned().collect();
        Self::from_records(records).expect("ids already unique")
    }

    pub fn unknown_references(&self) -> usize {
        self.records
            .iter()
            .flat_map(|r| &r.references)
            .filter(|id| !self.index.contains_key(id.as_str()))
            .count()
    }
}

/// Reads line-delimited records from a file.
pub fn ingest(path: &Path) -> Result<(CitationGraph, IngestReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses records, rejecting blank abstracts and malformed lines with a
/// reason. A repeated id is a hard error; so is a file with no usable record.
pub fn ingest_reader(reader: impl BufRead) -> Result<(CitationGraph, IngestReport)> {
    let mut records = Vec::new();
    let mut report = IngestReport::default();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PaperRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                report.rejected.push(Rejection {
                    line: n + 1,
                    id: None,
                    reason: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        let reason = if record.abstract_text.trim().is_empty() {
            Some("missing abstract")
        } else if record.id.is_empty() {
            Some("empty id")
        } else if record.domain.trim().is_empty() {
            Some("missing domain")
        } else {
            None
        };
        if let Some(reason) = reason {
            report.rejected.push(Rejection {
                line: n + 1,
                id: Some(record.id),
                reason: reason.into(),
            });
            continue;
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Data("no valid records".into()));
    }
    let graph = CitationGraph::from_records(records)?;
    report.accepted = graph.len();
    report.unknown_references = graph.unknown_references();
    Ok((graph, report))
}

/// Writes records as line-delimited JSON.
pub fn write_records(path: &Path, records: &[PaperRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub domain: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
}

/// Abstract texts keyed by paper id, as needed for training and scoring.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(entries: Vec<CorpusEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn from_graph(graph: &CitationGraph) -> Self {
        let entries = graph
            .records()
            .iter()
            .map(|r| CorpusEntry {
                id: r.id.clone(),
                domain: r.domain.clone(),
                abstract_text: r.abstract_text.clone(),
            })
            .collect();
        Self::new(entries).expect("graph ids are unique")
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    /// Like [`Self::get`] but a missing id is an error.
    pub fn require(&self, id: &str) -> Result<&CorpusEntry> {
        self.get(id)
            .ok_or_else(|| Error::Data(format!("paper `{id}` is not in the corpus")))
    }

    pub fn domains(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.domain.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_jsonl(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.entries)
    }
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
