use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Label, LabeledDataset};
use crate::error::{Error, Result};
use crate::schema::{FeatureSchema, FeatureVector, Formula};

pub const LABEL_COLUMN: &str = "Label";

/// Column whose presence turns on the TCP-only filter (IANA protocol 6).
const PROTOCOL_COLUMN: &str = "Proto";
const TCP: f64 = 6.0;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub dropped_missing: usize,
    pub rejected_unparseable: usize,
    pub dropped_non_tcp: usize,
    pub ratio_fixes: usize,
    pub coerced_counts: usize,
}

pub fn load_csv(
    path: impl AsRef<Path>,
    schema: Arc<FeatureSchema>,
) -> Result<(LabeledDataset, LoadReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let family = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, schema, family)
}

pub fn read_csv<R: Read>(
    reader: R,
    schema: Arc<FeatureSchema>,
    family: impl Into<String>,
) -> Result<(LabeledDataset, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let mut missing = Vec::new();
    let columns: Vec<usize> = schema
        .names()
        .iter()
        .filter_map(|n| {
            let c = find(n);
            if c.is_none() {
                missing.push(n.to_string());
            }
            c
        })
        .collect();
    let label_col = find(LABEL_COLUMN);
    if label_col.is_none() {
        missing.push(LABEL_COLUMN.to_string());
    }
    if !missing.is_empty() {
        return Err(Error::SchemaMismatch(format!(
            "missing columns: {}",
            missing.join(", ")
        )));
    }
    let label_col = label_col.unwrap();
    let proto = schema.index_of(PROTOCOL_COLUMN);

    let mut report = LoadReport::default();
    let mut vectors = Vec::new();
    let mut labels = Vec::new();

    'rows: for record in rdr.records() {
        report.rows_read += 1;
        let Ok(record) = record else {
            report.rejected_unparseable += 1;
            continue;
        };
        let mut values = Vec::with_capacity(columns.len());
        for &c in &columns {
            match record.get(c) {
                None | Some("") => {
                    report.dropped_missing += 1;
                    continue 'rows;
                }
                Some(field) => match field.parse::<f64>() {
                    Ok(x) if x.is_finite() => values.push(x),
                    _ => {
                        report.rejected_unparseable += 1;
                        continue 'rows;
                    }
                },
            }
        }
        let label = match record.get(label_col) {
            None | Some("") => {
                report.dropped_missing += 1;
                continue;
            }
            Some(field) => match field.parse::<Label>() {
                Ok(l) => l,
                Err(_) => {
                    report.rejected_unparseable += 1;
                    continue;
                }
            },
        };
        if let Some(p) = proto {
            if values[p] != TCP {
                report.dropped_non_tcp += 1;
                continue;
            }
        }
        let mut v = FeatureVector::new(values);
        clean_row(&schema, &mut v, &mut report);
        vectors.push(v);
        labels.push(label);
    }
    report.rows_kept = vectors.len();
    let ds = LabeledDataset::new(schema, vectors, labels, family)?;
    Ok((ds, report))
}

fn clean_row(schema: &FeatureSchema, v: &mut FeatureVector, report: &mut LoadReport) {
    for (i, def) in schema.features().iter().enumerate() {
        if def.integral && v[i].fract() != 0.0 {
            v[i] = (v[i] + 0.5).floor();
            report.coerced_counts += 1;
        }
    }
    // Exporters encode 0/0 byte ratios as a pseudo-infinite maximum.
    for rule in schema.rules() {
        if let Formula::Ratio {
            numerator,
            denominator,
        } = &rule.formula
        {
            let t = rule.target.index;
            if v[numerator.index] == 0.0 && v[denominator.index] == 0.0 && v[t] != 0.0 {
                v[t] = 0.0;
                report.ratio_fixes += 1;
            }
        }
    }
}

pub fn write_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(ds, file)
}

pub(crate) fn write_csv_to<W: Write>(ds: &LabeledDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ds.schema().names().iter().map(|s| s.to_string()).collect();
    header.push(LABEL_COLUMN.to_string());
    w.write_record(&header)?;
    for (v, label) in ds.iter() {
        let mut row: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        row.push(label.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(schema: &FeatureSchema) -> String {
        let mut h = schema.names().join(",");
        h.push_str(",Label");
        h
    }

    fn row(schema: &FeatureSchema, edits: &[(&str, &str)], label: &str) -> String {
        let mut fields: Vec<String> = schema
            .names()
            .iter()
            .map(|n| {
                if *n == "TotPkts" {
                    "1".to_string()
                } else {
                    "0".to_string()
                }
            })
            .collect();
        for (name, value) in edits {
            fields[schema.index_of(name).unwrap()] = value.to_string();
        }
        fields.push(label.to_string());
        fields.join(",")
    }

    #[test]
    fn empty_field_drops_row() {
        let schema = Arc::new(FeatureSchema::default_flow());
        let text = format!(
            "{}\n{}\n{}\n",
            header(&schema),
            row(&schema, &[("OutBytes", "")], "benign"),
            row(&schema, &[("OutBytes", "12")], "Malicious"),
        );
        let (ds, report) = read_csv(text.as_bytes(), schema, "t").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(report.dropped_missing, 1);
        assert_eq!(ds.labels(), &[Label::Malicious]);
    }

    #[test]
    fn pseudo_infinite_ratio_rewritten() {
        let schema = Arc::new(FeatureSchema::default_flow());
        let text = format!(
            "{}\n{}\n",
            header(&schema),
            row(
                &schema,
                &[("OutBytes", "0"), ("InBytes", "0"), ("RatioOutIn", "99999")],
                "benign"
            ),
        );
        let (ds, report) = read_csv(text.as_bytes(), schema.clone(), "t").unwrap();
        assert_eq!(ds.vectors()[0][schema.index_of("RatioOutIn").unwrap()], 0.0);
        assert_eq!(report.ratio_fixes, 1);
    }

    #[test]
    fn missing_column_is_schema_mismatch() {
        let schema = Arc::new(FeatureSchema::default_flow());
        let text = header(&schema).replace("Dur,", "") + "\n";
        let err = read_csv(text.as_bytes(), schema, "t").unwrap_err();
        assert!(
            matches!(err, Error::SchemaMismatch(ref m) if m.contains("Dur")),
            "{err}"
        );
    }

    #[test]
    fn unparseable_rows_are_counted() {
        let schema = Arc::new(FeatureSchema::default_flow());
        let text = format!(
            "{}\n{}\n{}\n{}\n",
            header(&schema),
            row(&schema, &[("Dur", "abc")], "benign"),
            row(&schema, &[], "unknown"),
            row(&schema, &[("TotPkts", "2.6")], "benign"),
        );
        let (ds, report) = read_csv(text.as_bytes(), schema.clone(), "t").unwrap();
        assert_eq!(report.rejected_unparseable, 2);
        assert_eq!(report.coerced_counts, 1);
        assert_eq!(ds.vectors()[0][schema.index_of("TotPkts").unwrap()], 3.0);
    }

    #[test]
    fn protocol_filter_only_with_proto_column() {
        let base = FeatureSchema::default_flow();
        let mut features = base.features().to_vec();
        let idx = features.len();
        features.push(crate::schema::FeatureDef {
            id: crate::schema::FeatureId::new("Proto", idx),
            group: crate::schema::FeatureGroup::Immutable,
            unit: String::new(),
            floor: 0.0,
            integral: true,
            factor: None,
        });
        let schema = Arc::new(FeatureSchema::new(features, base.rules().to_vec()).unwrap());
        let text = format!(
            "{}\n{}\n{}\n",
            header(&schema),
            row(&schema, &[("Proto", "6")], "benign"),
            row(&schema, &[("Proto", "17")], "benign"),
        );
        let (ds, report) = read_csv(text.as_bytes(), schema, "t").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(report.dropped_non_tcp, 1);
    }

    #[test]
    fn loading_written_output_is_idempotent() {
        let schema = Arc::new(FeatureSchema::default_flow());
        let params = crate::dataset::SynthParams::preset("rbot", 60).unwrap();
        let ds = crate::dataset::synth_generate(&params, schema.clone(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.csv");
        let second = dir.path().join("b.csv");
        write_csv(&ds, &first).unwrap();
        let (loaded, report) = load_csv(&first, schema.clone()).unwrap();
        assert_eq!((report.rows_read, report.rows_kept), (120, 120));
        assert_eq!(
            report.ratio_fixes + report.coerced_counts + report.dropped_missing,
            0
        );
        assert_eq!(loaded.vectors(), ds.vectors());
        assert_eq!(loaded.labels(), ds.labels());
        write_csv(&loaded, &second).unwrap();
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap()
        );
    }
}
