//! Tab-separated puzzle manifests.
//!
//! ```text
//! root_id<TAB>instance_id<TAB>image_path<TAB>question<TAB>option_a<TAB>…<TAB>option_e<TAB>answer
//! ```
//!
//! The first line is that header. `image_path` is relative to the manifest's
//! directory and `answer` is a letter `A`–`E`. Fields may not contain tabs or
//! newlines.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::instance::{letter_to_index, PuzzleInstance};
use super::pixmap::{read_image, write_ppm};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str =
    "root_id\tinstance_id\timage_path\tquestion\toption_a\toption_b\toption_c\toption_d\toption_e\tanswer";
const NUM_FIELDS: usize = 10;

/// A manifest row with its image still on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub root_id: u32,
    pub instance_id: u32,
    pub image_path: PathBuf,
    pub question: String,
    pub options: Vec<String>,
    pub answer: usize,
    pub line: usize,
}

impl ManifestRecord {
    pub fn load(&self) -> Result<PuzzleInstance> {
        let image = read_image(&self.image_path)?;
        PuzzleInstance::new(
            self.root_id,
            self.instance_id,
            image,
            self.question.clone(),
            self.options.clone(),
            self.answer,
        )
    }
}

/// Parses manifest text; image paths are resolved against `base_dir`.
pub fn parse_manifest(text: &str, path: &Path, base_dir: &Path) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || (i == 0 && line == MANIFEST_HEADER) {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != NUM_FIELDS {
            return Err(err(format!(
                "expected {NUM_FIELDS} tab-separated fields (5 options), got {}",
                fields.len()
            )));
        }
        let root_id = fields[0].parse().map_err(|_| err(format!("bad root_id {:?}", fields[0])))?;
        let instance_id = fields[1].parse().map_err(|_| err(format!("bad instance_id {:?}", fields[1])))?;
        if fields[2].is_empty() {
            return Err(err("empty image_path".into()));
        }
        if fields[3].trim().is_empty() {
            return Err(err("empty question".into()));
        }
        let answer = letter_to_index(fields[9]).ok_or_else(|| err(format!("answer {:?} is not a letter A-E", fields[9])))?;
        records.push(ManifestRecord {
            root_id,
            instance_id,
            image_path: base_dir.join(fields[2]),
            question: fields[3].to_string(),
            options: fields[4..9].iter().map(|s| s.to_string()).collect(),
            answer,
            line: lineno,
        });
    }
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, path, base)
}

/// Reads a manifest and every image it references, ordered by
/// `(root_id, instance_id)`.
pub fn load_manifest(path: &Path) -> Result<Vec<PuzzleInstance>> {
    let mut out = read_manifest(path)?
        .iter()
        .map(ManifestRecord::load)
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|p| (p.root_id, p.instance_id));
    Ok(out)
}

/// Accepts either a manifest file or a directory containing `manifest.tsv`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn check_field(s: &str, what: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Input(format!("{what} {s:?} contains a tab or newline")));
    }
    Ok(())
}

/// Writes `instances` under `dir`: images as `images/r{root}_i{instance}.ppm`
/// plus `manifest.tsv`.
pub fn write_dataset(dir: &Path, instances: &[PuzzleInstance]) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for p in instances {
        check_field(&p.question, "question")?;
        for o in &p.options {
            check_field(o, "option")?;
        }
        let rel = format!("images/r{:03}_i{:04}.ppm", p.root_id, p.instance_id);
        write_ppm(&dir.join(&rel), &p.image)?;
        let row = [
            p.root_id.to_string(),
            p.instance_id.to_string(),
            rel,
            p.question.clone(),
        ]
        .into_iter()
        .chain(p.options.iter().cloned())
        .chain(std::iter::once(p.answer_letter().to_string()))
        .collect::<Vec<_>>()
        .join("\t");
        text.push_str(&row);
        text.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_puzzles;

    fn row(options: usize) -> String {
        let opts: Vec<String> = (0..options).map(|i| i.to_string()).collect();
        format!("3\t7\timg.ppm\tHow many?\t{}\tB", opts.join("\t"))
    }

    #[test]
    fn empty_and_header_only_manifests_are_empty() {
        let p = Path::new("m.tsv");
        assert!(parse_manifest("", p, Path::new(".")).unwrap().is_empty());
        assert!(parse_manifest(&format!("{MANIFEST_HEADER}\n\n"), p, Path::new(".")).unwrap().is_empty());
    }

    #[test]
    fn record_fields_are_parsed() {
        let text = format!("{MANIFEST_HEADER}\n{}\n", row(5));
        let r = &parse_manifest(&text, Path::new("m.tsv"), Path::new("data")).unwrap()[0];
        assert_eq!((r.root_id, r.instance_id, r.answer, r.line), (3, 7, 1, 2));
        assert_eq!(r.image_path, Path::new("data/img.ppm"));
        assert_eq!(r.options, ["0", "1", "2", "3", "4"]);
    }

    #[test]
    fn four_options_is_a_parse_error_at_its_line() {
        let text = format!("{MANIFEST_HEADER}\n{}\n{}\n", row(5), row(4));
        match parse_manifest(&text, Path::new("m.tsv"), Path::new(".")) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("5 options"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_answer_letter_is_rejected() {
        let text = row(5).replace("\tB", "\tF");
        assert!(matches!(parse_manifest(&text, Path::new("m.tsv"), Path::new(".")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_image_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        std::fs::write(&path, format!("{MANIFEST_HEADER}\n{}\n", row(5))).unwrap();
        match load_manifest(&path) {
            Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("img.ppm"), "{e}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn written_datasets_load_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_puzzles(4, 3, 4).unwrap();
        let path = write_dataset(dir.path(), &data).unwrap();
        assert_eq!(manifest_path(dir.path()), path);
        assert_eq!(load_manifest(&path).unwrap(), data);
    }

    #[test]
    fn tabs_in_fields_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = synth_puzzles(4, 3, 1).unwrap();
        data[0].question.push('\t');
        assert!(matches!(write_dataset(dir.path(), &data), Err(Error::Input(_))));
    }
}
