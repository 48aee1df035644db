//! Line-delimited JSON manifest I/O.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    validate_record, AttributeLabelVector, BoundingBox, DatasetManifest, Label, Split, XrayRecord,
    DEFAULT_N_ATTRIBUTES,
};
use crate::error::{Error, Result};

const KEYS: [&str; 7] = [
    "image_path",
    "width",
    "height",
    "split",
    "label",
    "attributes",
    "boxes",
];

/// Wire form of one manifest line. Field order fixes the serialized key order.
#[derive(Serialize, Deserialize)]
struct RecordLine {
    image_path: String,
    width: u32,
    height: u32,
    split: Split,
    label: Label,
    attributes: Option<Vec<u8>>,
    boxes: Option<Vec<[f64; 4]>>,
}

impl From<&XrayRecord> for RecordLine {
    fn from(r: &XrayRecord) -> Self {
        RecordLine {
            image_path: r.image_path.clone(),
            width: r.width,
            height: r.height,
            split: r.split,
            label: r.label,
            attributes: r.attributes.as_ref().map(|a| a.0.clone()),
            boxes: r
                .boxes
                .as_ref()
                .map(|bs| bs.iter().map(BoundingBox::coords).collect()),
        }
    }
}

impl From<RecordLine> for XrayRecord {
    fn from(l: RecordLine) -> Self {
        XrayRecord {
            image_path: l.image_path,
            width: l.width,
            height: l.height,
            split: l.split,
            label: l.label,
            attributes: l.attributes.map(AttributeLabelVector),
            boxes: l
                .boxes
                .map(|bs| bs.into_iter().map(BoundingBox::from_coords).collect()),
        }
    }
}

fn parse_line(text: &str, line: usize) -> Result<XrayRecord> {
    let malformed = |reason: String| Error::MalformedRecord { line, reason };
    let value: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("record is not a JSON object".into()))?;
    for key in KEYS {
        if !obj.contains_key(key) {
            return Err(malformed(format!("missing key `{key}`")));
        }
    }
    if let Some(extra) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(malformed(format!("unexpected key `{extra}`")));
    }
    let parsed: RecordLine = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    Ok(parsed.into())
}

fn read_records(path: &Path) -> Result<Vec<(usize, XrayRecord)>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push((i + 1, parse_line(line, i + 1)?));
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(records)
}

fn finish(records: Vec<(usize, XrayRecord)>, n_attributes: usize) -> Result<DatasetManifest> {
    for (line, record) in &records {
        if let Err(violations) = validate_record(record, n_attributes) {
            let reason = violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::MalformedRecord {
                line: *line,
                reason,
            });
        }
    }
    let manifest = DatasetManifest {
        records: records.into_iter().map(|(_, r)| r).collect(),
        n_attributes,
    };
    let (train, val) = manifest.split_counts();
    if train == 0 {
        return Err(Error::MissingSplit("train"));
    }
    if val == 0 {
        return Err(Error::MissingSplit("val"));
    }
    log::info!("loaded manifest: {train} train, {val} val records");
    Ok(manifest)
}

/// Load a manifest, taking the attribute count from the first record that
/// carries attributes (or the default when none do).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let records = read_records(path.as_ref())?;
    let n_attributes = records
        .iter()
        .find_map(|(_, r)| r.attributes.as_ref().map(AttributeLabelVector::len))
        .unwrap_or(DEFAULT_N_ATTRIBUTES);
    finish(records, n_attributes)
}

/// Load a manifest whose attribute vectors must all have `n_attributes` entries.
pub fn load_manifest_expecting(
    path: impl AsRef<Path>,
    n_attributes: usize,
) -> Result<DatasetManifest> {
    finish(read_records(path.as_ref())?, n_attributes)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(manifest_to_string(manifest)?.as_bytes())?;
    out.flush()?;
    Ok(())
}

pub(crate) fn manifest_to_string(manifest: &DatasetManifest) -> Result<String> {
    let mut s = String::new();
    for r in &manifest.records {
        s.push_str(&serde_json::to_string(&RecordLine::from(r))?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(i: usize, split: Split) -> XrayRecord {
        XrayRecord {
            image_path: format!("images/{i:05}.png"),
            width: 512,
            height: 512,
            split,
            label: Label::Tb,
            attributes: Some(AttributeLabelVector(vec![0, 1, 0, 0, 1, 0, 0])),
            boxes: Some(vec![BoundingBox::new(100.5, 80.0, 160.25, 140.0)]),
        }
    }

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let p = dir.join("manifest.jsonl");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn counts_by_split() {
        let dir = tempfile::tempdir().unwrap();
        let records = (0..2000)
            .map(|i| record(i, if i < 1700 { Split::Train } else { Split::Val }))
            .collect();
        let m = DatasetManifest {
            records,
            n_attributes: 7,
        };
        let p = dir.path().join("m.jsonl");
        save_manifest(&m, &p).unwrap();
        let loaded = load_manifest(&p).unwrap();
        assert_eq!(loaded.split_counts(), (1700, 300));
        assert_eq!(loaded, m);
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "");
        assert!(matches!(load_manifest(&p), Err(Error::EmptyManifest)));
        let p = write(dir.path(), "\n  \n");
        assert!(matches!(load_manifest(&p), Err(Error::EmptyManifest)));
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_manifest(dir.path().join("nope.jsonl")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn short_attribute_vector_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            records: vec![record(0, Split::Train), record(1, Split::Val)],
            n_attributes: 7,
        };
        let mut text = manifest_to_string(&m).unwrap();
        let mut short = record(2, Split::Train);
        short.attributes = Some(AttributeLabelVector(vec![0; 6]));
        text.push_str(&serde_json::to_string(&RecordLine::from(&short)).unwrap());
        let p = write(dir.path(), &text);
        match load_manifest(&p) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
        // Against an explicit expectation even a lone record is caught.
        let p = write(dir.path(), &text.lines().nth(2).unwrap().to_string());
        assert!(matches!(
            load_manifest_expecting(&p, 7),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
    }

    #[test]
    fn keys_must_match_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let base = r#"{"image_path":"a.png","width":8,"height":8,"split":"train","label":"healthy","attributes":null"#;
        let p = write(dir.path(), &format!("{base}}}"));
        assert!(matches!(
            load_manifest(&p),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
        let p = write(dir.path(), &format!("{base},\"boxes\":null,\"extra\":1}}"));
        assert!(matches!(
            load_manifest(&p),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
        let p = write(dir.path(), &format!("{base},\"boxes\":[]}}"));
        assert!(matches!(load_manifest(&p), Err(Error::MissingSplit("val"))));
    }

    fn arb_record() -> impl Strategy<Value = XrayRecord> {
        (
            1u32..1024,
            1u32..1024,
            any::<bool>(),
            prop::option::of(prop::collection::vec(0u8..=1, 7)),
            prop::option::of(prop::collection::vec(
                (0.0f64..0.5, 0.0f64..0.5, 0.01f64..0.5, 0.01f64..0.5),
                0..4,
            )),
        )
            .prop_map(|(w, h, val, attributes, boxes)| {
                let (wf, hf) = (w as f64, h as f64);
                XrayRecord {
                    image_path: format!("img_{w}_{h}.png"),
                    width: w,
                    height: h,
                    split: if val { Split::Val } else { Split::Train },
                    label: Label::Tb,
                    attributes: attributes.map(AttributeLabelVector),
                    boxes: boxes.map(|bs| {
                        bs.into_iter()
                            .map(|(x, y, bw, bh)| {
                                BoundingBox::new(x * wf, y * hf, (x + bw) * wf, (y + bh) * hf)
                            })
                            .collect()
                    }),
                }
            })
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(mut records in prop::collection::vec(arb_record(), 1..12)) {
            records[0].split = Split::Train;
            records.push(XrayRecord { split: Split::Val, ..records[0].clone() });
            for r in records.iter_mut() {
                if r.attributes.is_none() && r.boxes.is_none() {
                    r.boxes = Some(vec![]);
                }
            }
            let m = DatasetManifest { records, n_attributes: 7 };
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.jsonl");
            save_manifest(&m, &p).unwrap();
            prop_assert_eq!(load_manifest_expecting(&p, 7).unwrap(), m);
        }
    }
}
