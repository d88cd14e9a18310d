//! Feature CSV: `subject_id,template_id,media_id,detection_score,f0,...,f{D-1}`,
//! one row per media item.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use crate::aggregation::{self, clamp_detection_score, MediaItem, Template};
use crate::error::{Error, Result};
use crate::eval::{self, Pooling, TemplateSet};
use crate::io::{format_float, write_atomic};
use crate::math::{DenseMatrix, DenseVector};
use crate::trainer::LabeledSet;

pub const FIXED_COLUMNS: [&str; 4] = ["subject_id", "template_id", "media_id", "detection_score"];

/// Media id given to pooled template rows.
pub const POOLED_MEDIA_ID: &str = "POOLED";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub subject_id: String,
    pub template_id: String,
    pub media_id: String,
    pub detection_score: f64,
    pub feature: DenseVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub records: Vec<FeatureRecord>,
    pub dim: usize,
    /// Ingest warnings (clamped scores), with 1-based line numbers.
    pub warnings: Vec<String>,
}

impl FeatureDataset {
    pub fn new(records: Vec<FeatureRecord>) -> Result<Self> {
        let dim = records
            .first()
            .map(|r| r.feature.dim())
            .ok_or(Error::Empty("feature dataset"))?;
        for (i, r) in records.iter().enumerate() {
            if r.feature.dim() != dim {
                return Err(Error::InconsistentDimension {
                    line: i + 2,
                    expected: dim,
                    got: r.feature.dim(),
                });
            }
        }
        Ok(FeatureDataset {
            records,
            dim,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All feature rows as a matrix, in record order.
    pub fn feature_matrix(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.records.len(), self.dim);
        for (i, r) in self.records.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&r.feature);
        }
        m
    }

    /// Sorted distinct subject ids; a subject's class index is its position.
    pub fn subject_classes(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.subject_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Features labelled by subject class index.
    pub fn labeled_set(&self) -> Result<(LabeledSet, Vec<String>)> {
        let classes = self.subject_classes();
        let index: HashMap<&str, usize> = classes
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let labels = self
            .records
            .iter()
            .map(|r| index[r.subject_id.as_str()])
            .collect();
        let set = LabeledSet::new(self.feature_matrix(), labels, classes.len())?;
        Ok((set, classes))
    }

    /// Same records with features replaced row by row.
    pub fn with_features(&self, features: &DenseMatrix) -> Result<FeatureDataset> {
        if features.rows() != self.records.len() {
            return Err(Error::DimensionMismatch {
                expected: self.records.len(),
                got: features.rows(),
            });
        }
        let records = self
            .records
            .iter()
            .zip(features.iter_rows())
            .map(|(r, f)| {
                Ok(FeatureRecord {
                    feature: DenseVector::new(f.to_vec())?,
                    ..r.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureDataset::new(records)
    }

    /// Groups rows into templates, in order of first appearance.
    pub fn templates(&self) -> Result<Vec<Template>> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: HashMap<&str, (&str, Vec<MediaItem>)> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            let entry = groups.entry(r.template_id.as_str()).or_insert_with(|| {
                order.push(r.template_id.as_str());
                (r.subject_id.as_str(), Vec::new())
            });
            if entry.0 != r.subject_id {
                return Err(Error::MalformedRow {
                    line: i + 2,
                    reason: format!(
                        "template `{}` mixes subjects `{}` and `{}`",
                        r.template_id, entry.0, r.subject_id
                    ),
                });
            }
            entry.1.push(MediaItem::new(
                r.media_id.clone(),
                r.feature.clone(),
                r.detection_score,
            )?);
        }
        order
            .into_iter()
            .map(|id| {
                let (subject, items) = groups.remove(id).expect("grouped");
                Template::new(id, subject, items)
            })
            .collect()
    }

    pub fn template_set(&self) -> Result<TemplateSet> {
        TemplateSet::new(self.templates()?)
    }

    /// One item per template.
    pub fn from_templates(templates: &[Template]) -> Result<FeatureDataset> {
        let records = templates
            .iter()
            .flat_map(|t| {
                t.items().iter().map(move |item| FeatureRecord {
                    subject_id: t.subject_id().to_string(),
                    template_id: t.template_id().to_string(),
                    media_id: item.media_id().to_string(),
                    detection_score: item.detection_score(),
                    feature: item.feature().clone(),
                })
            })
            .collect();
        FeatureDataset::new(records)
    }
}

/// One pooled row per template: `media_id = POOLED`, detection score = the
/// template's maximum.
pub fn pool_dataset(templates: &[Template], pooling: Pooling) -> Result<FeatureDataset> {
    let records = templates
        .iter()
        .map(|t| {
            Ok(FeatureRecord {
                subject_id: t.subject_id().to_string(),
                template_id: t.template_id().to_string(),
                media_id: POOLED_MEDIA_ID.to_string(),
                detection_score: aggregation::template_lomax(t),
                feature: eval::pool(t, pooling)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureDataset::new(records)
}

pub fn read_feature_csv<R: Read>(reader: R) -> Result<FeatureDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = rdr.records();

    let header = match rows.next() {
        Some(h) => h.map_err(|e| csv_error(1, e))?,
        None => return Err(Error::MissingColumn(FIXED_COLUMNS[0].into())),
    };
    for (i, name) in FIXED_COLUMNS.iter().enumerate() {
        if header.get(i) != Some(*name) {
            return Err(Error::MissingColumn((*name).into()));
        }
    }
    let dim = header.len() - FIXED_COLUMNS.len();
    if dim == 0 {
        return Err(Error::MissingColumn("f0".into()));
    }
    for j in 0..dim {
        let expected = format!("f{j}");
        if header.get(FIXED_COLUMNS.len() + j) != Some(expected.as_str()) {
            return Err(Error::MissingColumn(expected));
        }
    }

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (k, row) in rows.enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| csv_error(line, e))?;
        if row.len() == 1 && row.get(0) == Some("") {
            continue;
        }
        if row.len() != header.len() {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected {} columns, found {}", header.len(), row.len()),
            });
        }
        let raw_score: f64 = parse_number(&row[3], line, "detection_score")?;
        let (score, clamped) =
            clamp_detection_score(raw_score).map_err(|_| Error::MalformedRow {
                line,
                reason: format!("detection_score {raw_score} outside [0, 1]"),
            })?;
        if clamped {
            let msg = format!("line {line}: detection score {raw_score} clamped to {score}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let feature = (0..dim)
            .map(|j| parse_number(&row[FIXED_COLUMNS.len() + j], line, "feature"))
            .collect::<Result<Vec<f64>>>()?;
        records.push(FeatureRecord {
            subject_id: row[0].to_string(),
            template_id: row[1].to_string(),
            media_id: row[2].to_string(),
            detection_score: score,
            feature: DenseVector::new(feature).map_err(|e| Error::MalformedRow {
                line,
                reason: e.to_string(),
            })?,
        });
    }
    if records.is_empty() {
        return Err(Error::Empty("feature dataset"));
    }
    let mut ds = FeatureDataset::new(records)?;
    ds.warnings = warnings;
    Ok(ds)
}

fn csv_error(line: usize, e: csv::Error) -> Error {
    Error::MalformedRow {
        line,
        reason: e.to_string(),
    }
}

fn parse_number(s: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| Error::MalformedRow {
        line,
        reason: format!("{what} `{s}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::MalformedRow {
            line,
            reason: format!("{what} `{s}` is not finite"),
        });
    }
    Ok(v)
}

pub fn load_feature_csv(path: &Path) -> Result<FeatureDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_feature_csv(std::io::BufReader::new(file))
}

pub fn feature_csv_string(ds: &FeatureDataset) -> String {
    let mut out = String::new();
    out.push_str(&FIXED_COLUMNS.join(","));
    for j in 0..ds.dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for r in &ds.records {
        out.push_str(&format!(
            "{},{},{},{}",
            r.subject_id,
            r.template_id,
            r.media_id,
            format_float(r.detection_score)
        ));
        for v in r.feature.iter() {
            out.push(',');
            out.push_str(&format_float(*v));
        }
        out.push('\n');
    }
    out
}

pub fn write_feature_csv(path: &Path, ds: &FeatureDataset) -> Result<()> {
    for r in &ds.records {
        for id in [&r.subject_id, &r.template_id, &r.media_id] {
            if id.contains([',', '\n', '"']) {
                return Err(Error::InvalidConfig(format!(
                    "identifier `{id}` contains a reserved character"
                )));
            }
        }
    }
    write_atomic(path, feature_csv_string(ds).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GOOD: &str = "subject_id,template_id,media_id,detection_score,f0,f1\n\
                        a,t1,m1,0.9,1.0,2.0\n\
                        a,t1,m2,1.0,0.5,-1\n\
                        b,t2,m1,0.25,3,4\n";

    #[test]
    fn parses_well_formed_file() {
        let ds = read_feature_csv(GOOD.as_bytes()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim, 2);
        assert_eq!(ds.records[1].detection_score, 1.0 - 1e-7);
        assert_eq!(ds.warnings.len(), 1);
        assert!(ds.warnings[0].contains("line 3"));
        let t = ds.templates().unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].items().len(), 2);
        let (set, classes) = ds.labeled_set().unwrap();
        assert_eq!(classes, vec!["a", "b"]);
        assert_eq!(set.labels, vec![0, 0, 1]);
    }

    #[test]
    fn rejects_malformed_rows() {
        let bad = "subject_id,template_id,media_id,detection_score,f0,f1\na,t1,m1,0.9,1.0\n";
        assert!(matches!(
            read_feature_csv(bad.as_bytes()),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        let bad = "subject_id,template_id,media_id,detection_score,f0\na,t,m,0.5,1\nb,t2,m,0.5,x\n";
        assert!(matches!(
            read_feature_csv(bad.as_bytes()),
            Err(Error::MalformedRow { line: 3, .. })
        ));
        let bad = "subject_id,template_id,media_id,detection_score,f0\na,t,m,1.5,1\n";
        assert!(matches!(
            read_feature_csv(bad.as_bytes()),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        let bad = "subject_id,template,media_id,detection_score,f0\n";
        assert!(matches!(
            read_feature_csv(bad.as_bytes()),
            Err(Error::MissingColumn(c)) if c == "template_id"
        ));
        let bad = "subject_id,template_id,media_id,detection_score,f1\n";
        assert!(matches!(
            read_feature_csv(bad.as_bytes()),
            Err(Error::MissingColumn(_))
        ));
        let mixed =
            "subject_id,template_id,media_id,detection_score,f0\na,t,m,0.5,1\nb,t,m,0.5,1\n";
        let ds = read_feature_csv(mixed.as_bytes()).unwrap();
        assert!(matches!(
            ds.templates(),
            Err(Error::MalformedRow { line: 3, .. })
        ));
    }

    #[test]
    fn pooled_rows() {
        let ds = read_feature_csv(GOOD.as_bytes()).unwrap();
        let pooled = pool_dataset(&ds.templates().unwrap(), Pooling::Quality(0.0)).unwrap();
        assert_eq!(pooled.len(), 2);
        assert_eq!(pooled.records[0].media_id, POOLED_MEDIA_ID);
        assert_eq!(pooled.records[0].detection_score, 1.0 - 1e-7);
        assert_eq!(pooled.records[0].feature.as_slice(), &[0.75, 0.5]);
    }

    fn arb_dataset() -> impl Strategy<Value = FeatureDataset> {
        (1usize..5).prop_flat_map(|d| {
            prop::collection::vec(
                (
                    0u8..3,
                    0u8..4,
                    0u8..2,
                    0.0f64..=1.0,
                    prop::collection::vec(-1e4f64..1e4, d),
                ),
                1..12,
            )
            .prop_map(|rows| {
                let records = rows
                    .into_iter()
                    .map(|(s, t, m, p, f)| FeatureRecord {
                        subject_id: format!("s{s}"),
                        template_id: format!("s{s}-t{t}"),
                        media_id: format!("m{m}"),
                        detection_score: p,
                        feature: DenseVector::new(f).unwrap(),
                    })
                    .collect();
                FeatureDataset::new(records).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip(ds in arb_dataset()) {
            let text = feature_csv_string(&ds);
            let loaded = read_feature_csv(text.as_bytes()).unwrap();
            let text2 = feature_csv_string(&loaded);
            let reloaded = read_feature_csv(text2.as_bytes()).unwrap();
            prop_assert_eq!(&text2, &feature_csv_string(&reloaded));
            prop_assert_eq!(loaded.records.len(), ds.records.len());
            for (a, b) in loaded.records.iter().zip(&reloaded.records) {
                prop_assert_eq!(&a.template_id, &b.template_id);
                prop_assert!((a.detection_score - b.detection_score).abs() <= 1e-12);
                for (x, y) in a.feature.iter().zip(b.feature.iter()) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }
        }
    }
}
