//! Corpus index: UTF-8, one utterance per line,
//! `id<TAB>path<TAB>transcript<TAB>speaker<TAB>gender`, transcript as
//! space-separated token ids. Relative paths resolve against the manifest's
//! directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub path: PathBuf,
    pub transcript: Vec<usize>,
    pub speaker: usize,
    pub gender: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub utterances: Vec<Utterance>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path, source: &Path) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut utterances = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |why: String| Error::format(source, format!("line {}: {why}", n + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, path, transcript, speaker, gender] = fields[..] else {
                return Err(bad(format!("expected 5 tab-separated fields, found {}", fields.len())));
            };
            if !seen.insert(id.to_string()) {
                return Err(bad(format!("duplicate id '{id}'")));
            }
            let transcript = transcript
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(format!("bad token '{t}'"))))
                .collect::<Result<Vec<usize>>>()?;
            let speaker = speaker.parse().map_err(|_| bad(format!("bad speaker '{speaker}'")))?;
            let gender = match gender {
                "0" => 0,
                "1" => 1,
                g => return Err(bad(format!("gender must be 0 or 1, got '{g}'"))),
            };
            let p = Path::new(path);
            utterances.push(Utterance {
                id: id.to_string(),
                path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
                transcript,
                speaker,
                gender,
            });
        }
        Ok(Self { utterances })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    /// Serialises with paths made relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            let path = u.path.strip_prefix(base).unwrap_or(&u.path);
            let transcript: Vec<String> = u.transcript.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                u.id,
                path.display(),
                transcript.join(" "),
                u.speaker,
                u.gender
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}
