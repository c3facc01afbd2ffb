//! JSON dataset manifests.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{BBox, FRAME};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestJson {
    classes: Vec<String>,
    records: Vec<RecordJson>,
    #[serde(default)]
    splits: BTreeMap<String, Split>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordJson {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_ref: Option<String>,
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<[u32; 4]>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    /// Path as written in the manifest (relative paths resolve against the
    /// manifest's directory).
    pub image_path: Option<String>,
    pub feature_ref: Option<String>,
    pub pixels: Option<Arc<RgbImage>>,
    pub label: usize,
    pub domain: Option<String>,
    pub proposals: Option<Vec<BBox>>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, label: usize) -> Self {
        Self {
            id: id.into(),
            image_path: None,
            feature_ref: None,
            pixels: None,
            label,
            domain: None,
            proposals: None,
        }
    }

    /// Attaches pixels, which must already be in the 256x256 frame.
    pub fn with_pixels(mut self, pixels: RgbImage) -> Result<Self> {
        if pixels.dimensions() != (FRAME, FRAME) {
            let (w, h) = pixels.dimensions();
            return Err(Error::invalid(format!(
                "record `{}`: pixels are {w}x{h}, expected {FRAME}x{FRAME}",
                self.id
            )));
        }
        self.pixels = Some(Arc::new(pixels));
        Ok(self)
    }

    pub fn boxes(&self) -> &[BBox] {
        self.proposals.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub records: Vec<ImageRecord>,
    pub splits: BTreeMap<String, Split>,
    /// Directory relative image paths are resolved against.
    pub base_dir: PathBuf,
    index: HashMap<String, usize>,
}

impl DatasetManifest {
    pub fn new(
        classes: Vec<String>,
        records: Vec<ImageRecord>,
        splits: BTreeMap<String, Split>,
        base_dir: PathBuf,
    ) -> Result<Self> {
        let mut m = Self { classes, records, splits, base_dir, index: HashMap::new() };
        m.validate()?;
        Ok(m)
    }

    fn validate(&mut self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Manifest("no classes".into()));
        }
        self.index.clear();
        for (i, r) in self.records.iter().enumerate() {
            if self.index.insert(r.id.clone(), i).is_some() {
                return Err(Error::Manifest(format!("record `{}`: duplicate id", r.id)));
            }
            if r.label >= self.classes.len() {
                return Err(Error::Manifest(format!(
                    "record `{}`: label {} out of range ({} classes)",
                    r.id,
                    r.label,
                    self.classes.len()
                )));
            }
            if let Some(b) = r.boxes().iter().find(|b| !b.fits(FRAME, FRAME)) {
                return Err(Error::Manifest(format!("record `{}`: box ({b}) outside the {FRAME}x{FRAME} frame", r.id)));
            }
        }
        for (name, split) in &self.splits {
            let mut seen = HashSet::new();
            for id in split.train.iter().chain(&split.test) {
                if !self.index.contains_key(id) {
                    return Err(Error::Manifest(format!("split `{name}` references unknown record `{id}`")));
                }
                if !seen.insert(id) {
                    return Err(Error::Manifest(format!("split `{name}` lists record `{id}` more than once")));
                }
            }
        }
        Ok(())
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn require(&self, id: &str) -> Result<&ImageRecord> {
        self.record(id).ok_or_else(|| Error::Manifest(format!("unknown record `{id}`")))
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        self.splits.get(name).ok_or_else(|| Error::Manifest(format!("unknown split `{name}`")))
    }

    /// Records grouped by domain tag, in manifest order.
    pub fn domains(&self) -> BTreeMap<String, Vec<&ImageRecord>> {
        let mut out: BTreeMap<String, Vec<&ImageRecord>> = BTreeMap::new();
        for r in &self.records {
            if let Some(d) = &r.domain {
                out.entry(d.clone()).or_default().push(r);
            }
        }
        out
    }

    pub fn resolve_path(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let json = ManifestJson {
            classes: self.classes.clone(),
            records: self
                .records
                .iter()
                .map(|r| RecordJson {
                    id: r.id.clone(),
                    image_path: r.image_path.clone(),
                    feature_ref: r.feature_ref.clone(),
                    label: r.label,
                    domain: r.domain.clone(),
                    boxes: r.proposals.as_ref().map(|bs| bs.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect()),
                })
                .collect(),
            splits: self.splits.clone(),
        };
        Ok(serde_json::to_string_pretty(&json)?)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn from_json(text: &str, base_dir: PathBuf) -> Result<Self> {
        let json: ManifestJson = serde_json::from_str(text).map_err(|e| Error::Manifest(format!("parse error: {e}")))?;
        let mut records = Vec::with_capacity(json.records.len());
        for r in json.records {
            let proposals = match r.boxes {
                None => None,
                Some(bs) => Some(
                    bs.into_iter()
                        .map(|[x1, y1, x2, y2]| {
                            BBox::in_frame(x1, y1, x2, y2)
                                .map_err(|e| Error::Manifest(format!("record `{}`: {e}", r.id)))
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
            };
            records.push(ImageRecord {
                id: r.id,
                image_path: r.image_path,
                feature_ref: r.feature_ref,
                pixels: None,
                label: r.label,
                domain: r.domain,
                proposals,
            });
        }
        Self::new(json.classes, records, json.splits, base_dir)
    }
}

/// Loads and validates a manifest; relative image paths resolve against the
/// manifest's directory.
pub fn load_manifest<P: AsRef<Path>>(path: P) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::from_json(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DatasetManifest> {
        DatasetManifest::from_json(text, PathBuf::new())
    }

    #[test]
    fn minimal_manifest() {
        let m = parse(r#"{"classes":["a"],"records":[{"id":"r0","label":0}],"splits":{}}"#).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.record("r0").unwrap().label, 0);
    }

    #[test]
    fn dangling_split_names_the_id() {
        let err = parse(r#"{"classes":["a"],"records":[{"id":"r0","label":0}],"splits":{"s":{"train":["r0"],"test":["ghost"]}}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn label_out_of_range_names_the_record() {
        let err = parse(r#"{"classes":["a"],"records":[{"id":"r7","label":1}]}"#).unwrap_err();
        assert!(err.to_string().contains("r7"));
    }

    #[test]
    fn overlapping_split_rejected() {
        let err = parse(r#"{"classes":["a"],"records":[{"id":"r0","label":0}],"splits":{"s":{"train":["r0"],"test":["r0"]}}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn bad_box_rejected() {
        let err = parse(r#"{"classes":["a"],"records":[{"id":"r0","label":0,"boxes":[[10,10,5,20]]}]}"#).unwrap_err();
        assert!(err.to_string().contains("r0"));
    }

    #[test]
    fn office_domains_grouped() {
        let mut recs = Vec::new();
        for (i, d) in ["amazon", "webcam", "dslr", "amazon", "dslr"].iter().enumerate() {
            recs.push(format!(r#"{{"id":"i{i}","label":0,"domain":"{d}"}}"#));
        }
        let text = format!(r#"{{"classes":["mug"],"records":[{}]}}"#, recs.join(","));
        let m = parse(&text).unwrap();
        let groups = m.domains();
        assert_eq!(groups.len(), 3);
        assert_eq!(groups["amazon"].len(), 2);
        assert_eq!(groups["dslr"].len(), 2);
        assert_eq!(groups["webcam"].len(), 1);
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"classes":["a","b"],"records":[{"id":"r0","label":1,"domain":"webcam","boxes":[[0,0,60,60]]}],"splits":{"s":{"train":["r0"],"test":[]}}}"#;
        let m = parse(text).unwrap();
        let again = parse(&m.to_json().unwrap()).unwrap();
        assert_eq!(again.records[0].boxes(), m.records[0].boxes());
        assert_eq!(again.splits, m.splits);
    }

    #[test]
    fn pixels_must_be_frame_sized() {
        assert!(ImageRecord::new("x", 0).with_pixels(RgbImage::new(10, 10)).is_err());
        assert!(ImageRecord::new("x", 0).with_pixels(RgbImage::new(256, 256)).is_ok());
    }
}
