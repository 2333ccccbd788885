//! JSON-lines annotation files, one image per line:
//!
//! ```text
//! {"image_id":"a","width":640,"height":480,"objects":{"dog":{"cx":1.0,"cy":2.0,"w":3.0,"h":4.0}}}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::synthetic::SyntheticParams;
use crate::error::{Error, Result};
use crate::situation_model::{BoundingBox, SituationImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Ingested { path: String },
    Synthetic { seed: u64, params: SyntheticParams },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<SituationImage>,
    pub categories: Vec<String>,
    pub provenance: Provenance,
}

impl Dataset {
    /// Check non-emptiness, a shared category set, unique ids and valid boxes.
    pub fn new(images: Vec<SituationImage>, provenance: Provenance) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let categories = first.categories();
        let mut ids = HashSet::new();
        for img in &images {
            validate_image(img, &categories)?;
            if !ids.insert(img.image_id.as_str()) {
                return Err(Error::Invariant {
                    image_id: img.image_id.clone(),
                    message: "duplicate image_id".into(),
                });
            }
        }
        Ok(Dataset {
            images,
            categories,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn find(&self, image_id: &str) -> Option<&SituationImage> {
        self.images.iter().find(|img| img.image_id == image_id)
    }
}

fn validate_image(img: &SituationImage, categories: &[String]) -> Result<()> {
    let fail = |message: String| Error::Invariant {
        image_id: img.image_id.clone(),
        message,
    };
    if img.width == 0 || img.height == 0 {
        return Err(fail("width and height must be positive".into()));
    }
    if categories.is_empty() {
        return Err(fail("image has no objects".into()));
    }
    for c in categories {
        if !img.boxes.contains_key(c) {
            return Err(fail(format!("missing category {c:?}")));
        }
    }
    for (c, b) in &img.boxes {
        if !categories.contains(c) {
            return Err(fail(format!("unexpected category {c:?}")));
        }
        b.validate().map_err(|e| fail(format!("{c}: {e}")))?;
    }
    Ok(())
}

/// Object map that rejects repeated category keys instead of keeping the last.
struct UniqueObjects(BTreeMap<String, BoundingBox>);

impl<'de> Deserialize<'de> for UniqueObjects {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = UniqueObjects;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from category to box")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = BTreeMap::new();
                while let Some((k, v)) = map.next_entry::<String, BoundingBox>()? {
                    if out.insert(k.clone(), v).is_some() {
                        return Err(serde::de::Error::custom(format!("duplicate category {k:?}")));
                    }
                }
                Ok(UniqueObjects(out))
            }
        }
        deserializer.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image_id: String,
    width: u32,
    height: u32,
    objects: UniqueObjects,
}

pub fn parse_annotations<R: BufRead>(reader: R, provenance: Provenance) -> Result<Dataset> {
    let mut images = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        images.push(SituationImage {
            image_id: rec.image_id,
            width: rec.width,
            height: rec.height,
            boxes: rec.objects.0,
        });
    }
    Dataset::new(images, provenance)
}

pub fn load_annotations(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    parse_annotations(
        BufReader::new(file),
        Provenance::Ingested {
            path: path.display().to_string(),
        },
    )
}

/// Canonical form: one compact JSON object per line, categories sorted.
pub fn save_annotations<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    for img in &dataset.images {
        serde_json::to_writer(&mut out, img)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        parse_annotations(text.as_bytes(), Provenance::Ingested { path: "mem".into() })
    }

    const GOOD: &str = concat!(
        r#"{"image_id":"a","width":640,"height":480,"objects":{"dog":{"cx":100.5,"cy":200.0,"w":50.0,"h":40.0},"leash":{"cx":150.0,"cy":180.0,"w":60.0,"h":30.0},"walker":{"cx":200.0,"cy":150.0,"w":80.0,"h":250.0}}}"#,
        "\n",
        r#"{"image_id":"b","width":800,"height":600,"objects":{"dog":{"cx":10.0,"cy":20.0,"w":5.0,"h":4.0},"leash":{"cx":15.0,"cy":18.0,"w":6.0,"h":3.0},"walker":{"cx":20.0,"cy":15.0,"w":8.0,"h":25.0}}}"#,
        "\n"
    );

    #[test]
    fn empty_file() {
        assert!(matches!(parse(""), Err(Error::EmptyDataset)));
        assert!(matches!(parse("\n  \n"), Err(Error::EmptyDataset)));
    }

    #[test]
    fn missing_category_names_image() {
        let text = GOOD.replace(r#","leash":{"cx":15.0,"cy":18.0,"w":6.0,"h":3.0}"#, "");
        match parse(&text) {
            Err(Error::Invariant { image_id, message }) => {
                assert_eq!(image_id, "b");
                assert!(message.contains("leash"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_error_has_line_number() {
        let text = format!("{GOOD}{{not json}}\n");
        assert!(matches!(parse(&text), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn duplicates_rejected() {
        let dup_id = GOOD.replace(r#""image_id":"b""#, r#""image_id":"a""#);
        assert!(matches!(parse(&dup_id), Err(Error::Invariant { .. })));
        let dup_cat = GOOD.replace(r#""leash":{"cx":15.0"#, r#""dog":{"cx":15.0"#);
        assert!(matches!(parse(&dup_cat), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn bad_box_rejected() {
        let text = GOOD.replace(r#""w":5.0"#, r#""w":-5.0"#);
        assert!(matches!(parse(&text), Err(Error::Invariant { .. })));
    }

    #[test]
    fn canonical_round_trip() {
        let ds = parse(GOOD).unwrap();
        assert_eq!(ds.categories, vec!["dog", "leash", "walker"]);
        let mut out = Vec::new();
        save_annotations(&ds, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), GOOD);
    }
}
