//! Dataset serialization: JSONL (one tagged record per line) and a TSV
//! variant with one file per record kind.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalDataset, HumanJudgment, Segment, SystemOutput};
use crate::error::{Error, Result};

/// Dataset container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// Single file, one JSON record per line, `"kind"`-tagged.
    Jsonl,
    /// Directory with `segments.tsv`, `outputs.tsv`, `judgments.tsv`, and
    /// optional `refs.tsv`, each with a header row.
    Tsv,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Segment {
        id: String,
        src: String,
        lp: String,
    },
    Output {
        sys: String,
        seg: String,
        mt: String,
    },
    Judgment {
        sys: String,
        seg: String,
        score: f64,
    },
    Ref {
        seg: String,
        #[serde(rename = "ref")]
        reference: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Load a dataset, validating referential integrity as records arrive.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<EvalDataset> {
    match format {
        DatasetFormat::Jsonl => load_jsonl(path),
        DatasetFormat::Tsv => load_tsv_dir(path),
    }
}

/// Save a dataset in canonical (id-sorted) order.
pub fn save_dataset(dataset: &EvalDataset, path: &Path, format: DatasetFormat) -> Result<()> {
    match format {
        DatasetFormat::Jsonl => save_jsonl(dataset, path),
        DatasetFormat::Tsv => save_tsv_dir(dataset, path),
    }
}

fn load_jsonl(path: &Path) -> Result<EvalDataset> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    // Records may appear in any order; ingest segments first so integrity
    // checks see their targets.
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    assemble(records)
}

fn assemble(records: Vec<Record>) -> Result<EvalDataset> {
    let mut dataset = EvalDataset::new();
    for r in &records {
        if let Record::Segment { id, src, lp } = r {
            dataset.add_segment(Segment {
                id: id.clone(),
                source_text: src.clone(),
                language_pair: lp.clone(),
            })?;
        }
    }
    for r in records {
        match r {
            Record::Segment { .. } => {}
            Record::Output { sys, seg, mt } => dataset.add_output(SystemOutput {
                system_id: sys,
                segment_id: seg,
                translation: mt,
            })?,
            Record::Judgment { sys, seg, score } => dataset.add_judgment(HumanJudgment {
                segment_id: seg,
                system_id: sys,
                score,
            })?,
            Record::Ref { seg, reference } => dataset.add_reference(&seg, &reference)?,
        }
    }
    Ok(dataset)
}

fn save_jsonl(dataset: &EvalDataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for seg in dataset.segments() {
        let record = Record::Segment {
            id: seg.id.clone(),
            src: seg.source_text.clone(),
            lp: seg.language_pair.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("serializable")).unwrap();
    }
    for o in dataset.outputs() {
        let record = Record::Output {
            sys: o.system_id.clone(),
            seg: o.segment_id.clone(),
            mt: o.translation.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("serializable")).unwrap();
    }
    for j in dataset.judgments() {
        let record = Record::Judgment {
            sys: j.system_id.clone(),
            seg: j.segment_id.clone(),
            score: j.score,
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("serializable")).unwrap();
    }
    for (seg, r) in dataset.references() {
        let record = Record::Ref {
            seg: seg.to_string(),
            reference: r.to_string(),
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("serializable")).unwrap();
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

const SEGMENTS_TSV: &str = "segments.tsv";
const OUTPUTS_TSV: &str = "outputs.tsv";
const JUDGMENTS_TSV: &str = "judgments.tsv";
const REFS_TSV: &str = "refs.tsv";

fn tsv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
}

fn tsv_parse_err(path: &Path, e: csv::Error) -> Error {
    let line = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(0);
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    }
}

fn load_tsv_dir(dir: &Path) -> Result<EvalDataset> {
    #[derive(Deserialize)]
    struct SegRow {
        id: String,
        src: String,
        lp: String,
    }
    #[derive(Deserialize)]
    struct OutRow {
        sys: String,
        seg: String,
        mt: String,
    }
    #[derive(Deserialize)]
    struct JudgRow {
        sys: String,
        seg: String,
        score: f64,
    }
    #[derive(Deserialize)]
    struct RefRow {
        seg: String,
        #[serde(rename = "ref")]
        reference: String,
    }

    let mut records = Vec::new();
    let seg_path = dir.join(SEGMENTS_TSV);
    for row in tsv_reader(&seg_path)?.deserialize() {
        let row: SegRow = row.map_err(|e| tsv_parse_err(&seg_path, e))?;
        records.push(Record::Segment { id: row.id, src: row.src, lp: row.lp });
    }
    let out_path = dir.join(OUTPUTS_TSV);
    for row in tsv_reader(&out_path)?.deserialize() {
        let row: OutRow = row.map_err(|e| tsv_parse_err(&out_path, e))?;
        records.push(Record::Output { sys: row.sys, seg: row.seg, mt: row.mt });
    }
    let judg_path = dir.join(JUDGMENTS_TSV);
    for row in tsv_reader(&judg_path)?.deserialize() {
        let row: JudgRow = row.map_err(|e| tsv_parse_err(&judg_path, e))?;
        records.push(Record::Judgment { sys: row.sys, seg: row.seg, score: row.score });
    }
    let ref_path = dir.join(REFS_TSV);
    if ref_path.exists() {
        for row in tsv_reader(&ref_path)?.deserialize() {
            let row: RefRow = row.map_err(|e| tsv_parse_err(&ref_path, e))?;
            records.push(Record::Ref { seg: row.seg, reference: row.reference });
        }
    }
    assemble(records)
}

fn save_tsv_dir(dataset: &EvalDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let write_tsv = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        let path = dir.join(name);
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .from_path(&path)
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: 0,
                message: e.to_string(),
            })?;
        w.write_record(header).map_err(|e| tsv_parse_err(&path, e))?;
        for row in rows {
            w.write_record(&row).map_err(|e| tsv_parse_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))
    };

    write_tsv(
        SEGMENTS_TSV,
        &["id", "src", "lp"],
        dataset
            .segments()
            .map(|s| vec![s.id.clone(), s.source_text.clone(), s.language_pair.clone()])
            .collect(),
    )?;
    write_tsv(
        OUTPUTS_TSV,
        &["sys", "seg", "mt"],
        dataset
            .outputs()
            .map(|o| vec![o.system_id.clone(), o.segment_id.clone(), o.translation.clone()])
            .collect(),
    )?;
    write_tsv(
        JUDGMENTS_TSV,
        &["sys", "seg", "score"],
        dataset
            .judgments()
            .map(|j| {
                vec![
                    j.system_id.clone(),
                    j.segment_id.clone(),
                    format!("{}", j.score),
                ]
            })
            .collect(),
    )?;
    if dataset.references().next().is_some() {
        write_tsv(
            REFS_TSV,
            &["seg", "ref"],
            dataset
                .references()
                .map(|(seg, r)| vec![seg.to_string(), r.to_string()])
                .collect(),
        )?;
    }
    Ok(())
}
