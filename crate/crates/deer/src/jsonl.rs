//! The two JSON Lines corpus formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use deer_core::corpus::{Anchor, AnnotatedDocument, EntityCatalog, EntityRecord};
use deer_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbLine {
    id: String,
    title: String,
    #[serde(default)]
    paragraph: String,
    #[serde(default)]
    categories: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocLine {
    doc_id: String,
    tokens: Vec<String>,
    sentences: Vec<(usize, usize)>,
    anchors: Vec<(usize, usize, String)>,
}

/// Non-blank lines with their 1-based numbers.
fn lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>> + '_> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| match line {
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(Ok((i + 1, l))),
            Err(e) => Some(Err(Error::io(path, e))),
        }))
}

fn parse_error(path: &Path, line: usize, message: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

pub fn load_catalog(path: &Path) -> Result<EntityCatalog> {
    let mut catalog = EntityCatalog::default();
    for item in lines(path)? {
        let (n, line) = item?;
        let rec: KbLine = serde_json::from_str(&line).map_err(|e| parse_error(path, n, e))?;
        catalog
            .push(EntityRecord {
                entity_id: rec.id,
                title: rec.title,
                paragraph: rec.paragraph,
                categories: rec.categories,
            })
            .map_err(|e| match e {
                CoreError::DuplicateEntity(_) => Error::Core(e),
                other => parse_error(path, n, other),
            })?;
    }
    Ok(catalog)
}

pub fn load_documents(path: &Path) -> Result<Vec<AnnotatedDocument>> {
    let mut docs = Vec::new();
    for item in lines(path)? {
        let (n, line) = item?;
        let d: DocLine = serde_json::from_str(&line).map_err(|e| parse_error(path, n, e))?;
        let doc = AnnotatedDocument {
            doc_id: d.doc_id,
            tokens: d.tokens,
            sentences: d.sentences,
            anchors: d
                .anchors
                .into_iter()
                .map(|(start, end, entity_id)| Anchor {
                    start,
                    end,
                    entity_id,
                })
                .collect(),
        };
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_catalog(path: &Path, catalog: &EntityCatalog) -> Result<()> {
    write_lines(
        path,
        catalog.records().iter().map(|r| KbLine {
            id: r.entity_id.clone(),
            title: r.title.clone(),
            paragraph: r.paragraph.clone(),
            categories: r.categories.clone(),
        }),
    )
}

pub fn write_documents(path: &Path, docs: &[AnnotatedDocument]) -> Result<()> {
    write_lines(
        path,
        docs.iter().map(|d| DocLine {
            doc_id: d.doc_id.clone(),
            tokens: d.tokens.clone(),
            sentences: d.sentences.clone(),
            anchors: d
                .anchors
                .iter()
                .map(|a| (a.start, a.end, a.entity_id.clone()))
                .collect(),
        }),
    )
}
