//! Line-oriented dataset files.
//!
//! ```text
//! format=voipsteg-dataset/1 kind=lsp vocab=128,32,32 seed=7 codec=g729-lsp
//! cover-0<TAB>0<TAB>0<TAB>0.5<TAB>12 13 13 ... (channels × frames, row-major)
//! ```
//!
//! The first line is a space-separated `key=value` header record. Every
//! following non-empty line is one segment: id, label, embedding rate,
//! duration in seconds, and the descriptor matrix as space-separated
//! integers. The frame count is implied by the value count.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{DatasetHeader, DescriptorKind, DescriptorMatrix, VoipSegment, FRAMES_PER_SECOND};
use crate::error::{Error, Result};

const FORMAT_TAG: &str = "voipsteg-dataset/1";

fn format_header(header: &DatasetHeader) -> String {
    let vocab: Vec<String> = header.vocab.iter().map(u32::to_string).collect();
    format!(
        "format={FORMAT_TAG} kind={} vocab={} seed={} codec={}",
        header.kind,
        vocab.join(","),
        header.seed,
        header.codec
    )
}

fn parse_header(line: &str) -> Result<DatasetHeader> {
    let err = |message: String| Error::Parse { line: 1, message };
    let (mut format, mut kind, mut vocab, mut seed, mut codec) = (None, None, None, None, None);
    for field in line.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(format!("header field {field:?} is not key=value")))?;
        match key {
            "format" => format = Some(value.to_string()),
            "kind" => kind = Some(value.parse::<DescriptorKind>().map_err(|e| err(e.to_string()))?),
            "vocab" => {
                let sizes = value
                    .split(',')
                    .map(str::parse::<u32>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| err(format!("vocab {value:?}: {e}")))?;
                vocab = Some(sizes);
            }
            "seed" => {
                seed = Some(
                    value
                        .parse::<u64>()
                        .map_err(|e| err(format!("seed {value:?}: {e}")))?,
                )
            }
            "codec" => codec = Some(value.to_string()),
            other => return Err(err(format!("unknown header key {other:?}"))),
        }
    }
    match format.as_deref() {
        Some(FORMAT_TAG) => {}
        Some(other) => return Err(err(format!("unsupported format {other:?}"))),
        None => return Err(err("header lacks format tag".into())),
    }
    let missing = |k: &str| err(format!("header lacks {k}"));
    let header = DatasetHeader {
        kind: kind.ok_or_else(|| missing("kind"))?,
        vocab: vocab.ok_or_else(|| missing("vocab"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
        codec: codec.ok_or_else(|| missing("codec"))?,
    };
    header.validate()?;
    Ok(header)
}

fn parse_unit(field: &str, what: &str, line: usize) -> Result<f64> {
    let v: f64 = field.parse().map_err(|e| Error::Parse {
        line,
        message: format!("{what} {field:?}: {e}"),
    })?;
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Validation(format!(
            "line {line}: {what} {v} outside [0, 1]"
        )));
    }
    Ok(v)
}

fn parse_segment(text: &str, line: usize, header: &DatasetHeader) -> Result<VoipSegment> {
    let parse_err = |message: String| Error::Parse { line, message };
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.len() != 5 {
        return Err(parse_err(format!(
            "expected 5 tab-separated fields, found {}",
            fields.len()
        )));
    }
    let id = fields[0];
    if id.is_empty() {
        return Err(parse_err("empty segment id".into()));
    }
    let label = parse_unit(fields[1], "label", line)?;
    let embedding_rate = parse_unit(fields[2], "embedding rate", line)?;
    let duration_s: f64 = fields[3]
        .parse()
        .map_err(|e| parse_err(format!("duration {:?}: {e}", fields[3])))?;
    let values = fields[4]
        .split_whitespace()
        .map(str::parse::<u32>)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| parse_err(format!("matrix entry: {e}")))?;
    let channels = header.kind.channels();
    if values.is_empty() || values.len() % channels != 0 {
        return Err(parse_err(format!(
            "{} matrix entries is not a positive multiple of {channels} channels",
            values.len()
        )));
    }
    let frames = values.len() / channels;
    if !(duration_s > 0.0) || (duration_s * FRAMES_PER_SECOND - frames as f64).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "line {line}: duration {duration_s} s does not match {frames} frames"
        )));
    }
    let matrix = DescriptorMatrix::new(header.kind, frames, values)?;
    matrix
        .check_vocab(&header.vocab)
        .map_err(|e| Error::Validation(format!("line {line}: {e}")))?;
    Ok(VoipSegment {
        id: id.to_string(),
        matrix,
        label,
        embedding_rate,
        duration_s,
    })
}

/// Streams segments out of a dataset, one line at a time.
pub struct DatasetReader<R> {
    reader: R,
    header: DatasetHeader,
    line: usize,
    buf: String,
}

impl<R: BufRead> DatasetReader<R> {
    /// Reads the header line. Returns `Ok(None)` for completely empty input.
    pub fn new(mut reader: R) -> Result<Option<Self>> {
        let mut buf = String::new();
        if reader.read_line(&mut buf)? == 0 {
            return Ok(None);
        }
        let header = parse_header(buf.trim_end_matches(['\n', '\r']))?;
        Ok(Some(DatasetReader {
            reader,
            header,
            line: 1,
            buf,
        }))
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn next_segment(&mut self) -> Result<Option<VoipSegment>> {
        loop {
            self.buf.clear();
            if self.reader.read_line(&mut self.buf)? == 0 {
                return Ok(None);
            }
            self.line += 1;
            let text = self.buf.trim_end_matches(['\n', '\r']);
            if text.trim().is_empty() {
                continue;
            }
            return parse_segment(text, self.line, &self.header).map(Some);
        }
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<VoipSegment>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_segment().transpose()
    }
}

/// Writes a dataset header followed by segment records.
pub struct DatasetWriter<W: Write> {
    out: W,
    header: DatasetHeader,
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(mut out: W, header: &DatasetHeader) -> Result<Self> {
        header.validate()?;
        writeln!(out, "{}", format_header(header))?;
        Ok(DatasetWriter {
            out,
            header: header.clone(),
        })
    }

    pub fn write_segment(&mut self, segment: &VoipSegment) -> Result<()> {
        if segment.id.is_empty() || segment.id.contains(['\t', '\n', '\r']) {
            return Err(Error::invalid(format!(
                "segment id {:?} must be non-empty without tabs or newlines",
                segment.id
            )));
        }
        if segment.kind() != self.header.kind {
            return Err(Error::invalid(format!(
                "{} segment in a {} dataset",
                segment.kind(),
                self.header.kind
            )));
        }
        segment.matrix.check_vocab(&self.header.vocab)?;
        write!(
            self.out,
            "{}\t{}\t{}\t{}\t",
            segment.id, segment.label, segment.embedding_rate, segment.duration_s
        )?;
        for (i, v) in segment.matrix.values().iter().enumerate() {
            if i > 0 {
                self.out.write_all(b" ")?;
            }
            write!(self.out, "{v}")?;
        }
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_dataset(
    path: impl AsRef<Path>,
    header: &DatasetHeader,
    segments: &[VoipSegment],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::open(path, e))?;
    let mut writer = DatasetWriter::new(BufWriter::new(file), header)?;
    for s in segments {
        writer.write_segment(s)?;
    }
    writer.into_inner()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<VoipSegment>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::open(path, e))?;
    let reader = DatasetReader::new(BufReader::new(file))?.ok_or_else(|| Error::Parse {
        line: 1,
        message: format!("{}: missing dataset header", path.display()),
    })?;
    let header = reader.header().clone();
    let segments = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, segments))
}
