use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::synth::TripletExample;
use super::vocab::Lang;
use super::CorpusError;
use crate::tensor::Tensor;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Writes one tab-separated manifest line per example and the frames of all
/// examples, in order, as little-endian f32.
pub fn write_manifest(manifest: &Path, frames: &Path, examples: &[TripletExample]) -> Result<(), CorpusError> {
    let mut text = BufWriter::new(File::create(manifest).map_err(io_err(manifest))?);
    let mut bin = BufWriter::new(File::create(frames).map_err(io_err(frames))?);
    let mut offset = 0usize;
    for ex in examples {
        writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            ex.id,
            ex.src_lang,
            ex.tgt_lang,
            u8::from(ex.is_pseudo),
            join_ids(&ex.transcript),
            join_ids(&ex.translation),
            offset,
            ex.num_frames()
        )
        .map_err(io_err(manifest))?;
        for v in ex.frames.data() {
            bin.write_all(&v.to_le_bytes()).map_err(io_err(frames))?;
        }
        offset += ex.num_frames();
    }
    text.flush().map_err(io_err(manifest))?;
    bin.flush().map_err(io_err(frames))?;
    Ok(())
}

fn parse_ids(field: &str, line: usize) -> Result<Vec<usize>, CorpusError> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| CorpusError::Format(format!("line {line}: bad token id {t:?}")))
        })
        .collect()
}

fn parse_num(field: &str, what: &str, line: usize) -> Result<usize, CorpusError> {
    field
        .parse()
        .map_err(|_| CorpusError::Format(format!("line {line}: bad {what} {field:?}")))
}

pub fn read_manifest(manifest: &Path, frames: &Path, feat_dim: usize) -> Result<Vec<TripletExample>, CorpusError> {
    let mut raw = Vec::new();
    File::open(frames)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(frames))?;
    if raw.len() % 4 != 0 {
        return Err(CorpusError::Format(format!("{}: truncated frame data", frames.display())));
    }
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let total_rows = values.len() / feat_dim.max(1);

    let reader = BufReader::new(File::open(manifest).map_err(io_err(manifest))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(manifest))?;
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(CorpusError::Format(format!("line {n}: expected 8 fields, found {}", fields.len())));
        }
        let offset = parse_num(fields[6], "frame offset", n)?;
        let count = parse_num(fields[7], "frame count", n)?;
        if count == 0 || offset + count > total_rows {
            return Err(CorpusError::Format(format!(
                "line {n}: frames {offset}+{count} outside the {total_rows} stored rows"
            )));
        }
        let data = values[offset * feat_dim..(offset + count) * feat_dim].to_vec();
        out.push(TripletExample {
            id: parse_num(fields[0], "id", n)?,
            src_lang: fields[1].parse::<Lang>()?,
            tgt_lang: fields[2].parse::<Lang>()?,
            is_pseudo: match fields[3] {
                "0" => false,
                "1" => true,
                other => return Err(CorpusError::Format(format!("line {n}: bad pseudo flag {other:?}"))),
            },
            transcript: parse_ids(fields[4], n)?,
            translation: parse_ids(fields[5], n)?,
            frames: Tensor::new(vec![count, feat_dim], data).expect("frame rows"),
        });
    }
    Ok(out)
}
