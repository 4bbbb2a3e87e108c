use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Kind, Target, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    kind: Kind,
    prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chosen: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rejected: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<u32>,
    #[serde(default)]
    corrupted: bool,
}

impl Record {
    fn from_example(ex: &Example, vocab: &Vocab) -> Result<Self> {
        let text = |t: &[u32]| vocab.detokenize(t);
        let (response, chosen, rejected) = match &ex.target {
            Target::Sft { response } => (Some(text(response)?), None, None),
            Target::Pref { chosen, rejected } => (None, Some(text(chosen)?), Some(text(rejected)?)),
        };
        Ok(Self {
            kind: ex.kind(),
            prompt: text(&ex.prompt)?,
            response,
            chosen,
            rejected,
            domain: ex.domain,
            corrupted: ex.corrupted,
        })
    }

    fn into_example(self, vocab: &Vocab) -> std::result::Result<Example, String> {
        let tok = |field: &str, s: &str| vocab.tokenize(s).map_err(|e| format!("field {field}: {e}"));
        let prompt = tok("prompt", &self.prompt)?;
        let ex = match self.kind {
            Kind::Sft => {
                if self.chosen.is_some() || self.rejected.is_some() {
                    return Err("sft record must not carry chosen/rejected".into());
                }
                let response = self.response.ok_or("sft record missing \"response\"")?;
                Example::sft(prompt, tok("response", &response)?)
            }
            Kind::Pref => {
                if self.response.is_some() {
                    return Err("pref record must not carry response".into());
                }
                let chosen = self.chosen.ok_or("pref record missing \"chosen\"")?;
                let rejected = self.rejected.ok_or("pref record missing \"rejected\"")?;
                Example::pref(prompt, tok("chosen", &chosen)?, tok("rejected", &rejected)?)
            }
        }
        .map_err(|e| e.to_string())?;
        Ok(ex.with_domain(self.domain).with_corrupted(self.corrupted))
    }
}

/// Reads a dataset of the declared `kind`. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn load_jsonl(path: &Path, kind: Kind, vocab: &Vocab) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut ds = Dataset::empty(kind);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Jsonl {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if rec.kind != kind {
            return Err(err(format!(
                "record kind {} in a {} dataset",
                rec.kind.as_str(),
                kind.as_str()
            )));
        }
        let ex = rec.into_example(vocab).map_err(err)?;
        ds.push(ex)?;
    }
    Ok(ds)
}

pub fn save_jsonl(ds: &Dataset, path: &Path, vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in ds.iter() {
        serde_json::to_writer(&mut w, &Record::from_example(ex, vocab)?)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
