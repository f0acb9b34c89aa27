use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneExample {
    pub input: String,
    pub target: String,
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

fn jsonl_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty())
}

/// Documents from `.jsonl` (field `text`) or plain text, where blank lines
/// separate documents.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    if is_jsonl(path) {
        #[derive(Deserialize)]
        struct Doc {
            text: String,
        }
        return jsonl_lines(&text)
            .map(|(i, l)| {
                serde_json::from_str::<Doc>(l)
                    .map(|d| d.text)
                    .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect();
    }
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        docs.push(current.join("\n"));
    }
    Ok(docs)
}

/// JSONL with `input` and `target` fields.
pub fn read_finetune(path: &Path) -> Result<Vec<FinetuneExample>> {
    let text = std::fs::read_to_string(path)?;
    jsonl_lines(&text)
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
