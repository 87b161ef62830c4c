//! Tab-separated utterance manifests.
//!
//! Header: `id audio n_frames src_lang tgt_lang tgt_text`. The audio column
//! holds a WAV path (relative to the manifest's directory) or `seed:<n>` for
//! synthetic audio.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER: [&str; 6] = ["id", "audio", "n_frames", "src_lang", "tgt_lang", "tgt_text"];

/// Utterances longer than this many frames are dropped from manifests.
pub const MAX_FRAMES: usize = 3000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AudioRef {
    File(PathBuf),
    Seed(u64),
}

impl fmt::Display for AudioRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AudioRef::File(p) => write!(f, "{}", p.display()),
            AudioRef::Seed(s) => write!(f, "seed:{s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub audio: AudioRef,
    pub n_frames: usize,
    pub src_lang: String,
    pub tgt_lang: String,
    /// Space-separated target tokens.
    pub tgt_text: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ManifestLoad {
    pub rows: Vec<ManifestRow>,
    /// Rows dropped for exceeding [`MAX_FRAMES`].
    pub excluded: usize,
}

fn parse_row(path: &Path, line: usize, text: &str) -> Result<ManifestRow> {
    let err = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let cols: Vec<&str> = text.split('\t').collect();
    if cols.len() != HEADER.len() {
        return Err(err(format!("expected {} tab-separated columns, found {}", HEADER.len(), cols.len())));
    }
    let n_frames: usize = cols[2].trim().parse().map_err(|_| err(format!("n_frames `{}` is not a non-negative integer", cols[2])))?;
    if n_frames == 0 {
        return Err(err("n_frames must be positive".into()));
    }
    if cols[0].is_empty() || cols[3].is_empty() || cols[4].is_empty() {
        return Err(err("id and language columns must be nonempty".into()));
    }
    let audio = match cols[1].strip_prefix("seed:") {
        Some(s) => AudioRef::Seed(s.parse().map_err(|_| err(format!("bad synthetic seed `{s}`")))?),
        None if cols[1].is_empty() => return Err(err("audio column is empty".into())),
        None => AudioRef::File(PathBuf::from(cols[1])),
    };
    Ok(ManifestRow {
        id: cols[0].to_string(),
        audio,
        n_frames,
        src_lang: cols[3].to_string(),
        tgt_lang: cols[4].to_string(),
        tgt_text: cols[5].to_string(),
    })
}

pub fn load_manifest(path: &Path) -> Result<ManifestLoad> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.split('\t').eq(HEADER.iter().copied()) => {}
        _ => {
            return Err(Error::Parse { path: path.to_path_buf(), line: 1, msg: format!("header must be `{}`", HEADER.join("\\t")) });
        }
    }
    let mut out = ManifestLoad::default();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_row(path, i + 1, line)?;
        if row.n_frames > MAX_FRAMES {
            out.excluded += 1;
        } else {
            out.rows.push(row);
        }
    }
    if out.excluded > 0 {
        log::info!("{}: excluded {} rows longer than {MAX_FRAMES} frames", path.display(), out.excluded);
    }
    if out.rows.is_empty() {
        log::warn!("{}: manifest has no usable rows", path.display());
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut text = HEADER.join("\t");
    text.push('\n');
    for r in rows {
        text.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", r.id, r.audio, r.n_frames, r.src_lang, r.tgt_lang, r.tgt_text));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.tsv");
        fs::write(&p, format!("{}\n{body}", HEADER.join("\t"))).unwrap();
        p
    }

    #[test]
    fn frame_limit_boundary() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a\tseed:1\t3000\ten\tde\tt01 t02\nb\tb.wav\t3001\ten\tde\tt03\n");
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.rows.len(), 1);
        assert_eq!(m.rows[0].id, "a");
        assert_eq!(m.rows[0].audio, AudioRef::Seed(1));
        assert_eq!(m.excluded, 1);
    }

    #[test]
    fn empty_body_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "");
        assert_eq!(load_manifest(&p).unwrap(), ManifestLoad::default());
    }

    #[test]
    fn malformed_row_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a\tseed:1\t10\ten\tde\tt01\nb\tseed:2\tmany\ten\tde\tt01\n");
        match load_manifest(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.tsv");
        let rows = vec![ManifestRow {
            id: "x".into(),
            audio: AudioRef::File("audio/x.wav".into()),
            n_frames: 12,
            src_lang: "en".into(),
            tgt_lang: "ja".into(),
            tgt_text: "t01 t02".into(),
        }];
        write_manifest(&p, &rows).unwrap();
        assert_eq!(load_manifest(&p).unwrap().rows, rows);
    }
}
