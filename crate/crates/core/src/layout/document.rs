//! JSON layout documents.
//!
//! ```json
//! {
//!   "version": 1,
//!   "lattice": {"h": 64, "w": 64},
//!   "objects": [{"label_name": "sky", "bbox": [0.0, 0.0, 1.0, 0.5]}],
//!   "style": {"seed": 7, "z_img": [...], "z_obj": [[...], ...]}
//! }
//! ```
//!
//! Coordinates are written with the shortest decimal that round-trips the
//! `f64` exactly; style entries likewise for `f32`. `style` and each of its
//! fields are optional.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BBox, CategorySet, Lattice, Layout, ObjectSpec, StyleState};
use crate::error::{Error, Result};

pub const LAYOUT_SCHEMA_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutDoc {
    version: u64,
    lattice: LatticeDoc,
    objects: Vec<ObjectDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    style: Option<StyleSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatticeDoc {
    h: usize,
    w: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    label_name: String,
    bbox: [f64; 4],
}

/// Style section of a layout document. Any subset of fields may be present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_img: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_obj: Option<Vec<Vec<f32>>>,
}

impl StyleSpec {
    pub fn from_state(style: &StyleState) -> Self {
        Self {
            seed: style.seed,
            z_img: Some(style.z_img.clone()),
            z_obj: Some(style.z_obj.clone()),
        }
    }

    /// Explicit vectors when both are present.
    pub fn explicit(&self) -> Option<StyleState> {
        match (&self.z_img, &self.z_obj) {
            (Some(z_img), Some(z_obj)) => Some(StyleState {
                z_img: z_img.clone(),
                z_obj: z_obj.clone(),
                seed: self.seed,
            }),
            _ => None,
        }
    }
}

pub fn serialize_layout(
    layout: &Layout,
    cats: &CategorySet,
    style: Option<&StyleState>,
) -> Result<String> {
    let objects = layout
        .objects
        .iter()
        .map(|o| {
            let label_name = cats
                .name(o.label)
                .ok_or(Error::UnknownLabel {
                    index: 0,
                    label: o.label,
                    size: cats.len(),
                })?
                .to_owned();
            Ok(ObjectDoc {
                label_name,
                bbox: o.bbox.as_array(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let doc = LayoutDoc {
        version: LAYOUT_SCHEMA_VERSION,
        lattice: LatticeDoc {
            h: layout.lattice.height,
            w: layout.lattice.width,
        },
        objects,
        style: style.map(StyleSpec::from_state),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Parses a layout document. Label names are resolved against `cats`; the
/// layout is not validated beyond that.
pub fn parse_layout(doc: &str, cats: &CategorySet) -> Result<(Layout, Option<StyleSpec>)> {
    let value: Value =
        serde_json::from_str(doc).map_err(|e| Error::MalformedDocument(e.to_string()))?;
    parse_layout_value(value, cats)
}

/// [`parse_layout`] on an already decoded JSON value.
pub fn parse_layout_value(
    value: Value,
    cats: &CategorySet,
) -> Result<(Layout, Option<StyleSpec>)> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::MalformedDocument("document is not an object".into()))?;
    let version = obj
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::MalformedDocument("missing \"version\"".into()))?;
    if version != LAYOUT_SCHEMA_VERSION {
        return Err(Error::SchemaVersionMismatch {
            found: version,
            expected: LAYOUT_SCHEMA_VERSION,
        });
    }
    for key in ["lattice", "objects"] {
        if !obj.contains_key(key) {
            return Err(Error::MalformedDocument(format!("missing {key:?}")));
        }
    }
    let doc: LayoutDoc =
        serde_json::from_value(value).map_err(|e| Error::MalformedDocument(e.to_string()))?;
    let objects = doc
        .objects
        .into_iter()
        .map(|o| {
            let label = cats
                .index_of(&o.label_name)
                .ok_or(Error::UnknownCategory(o.label_name))?;
            let [x, y, w, h] = o.bbox;
            Ok(ObjectSpec::new(label, BBox::new(x, y, w, h)))
        })
        .collect::<Result<Vec<_>>>()?;
    let layout = Layout::new(
        Lattice {
            height: doc.lattice.h,
            width: doc.lattice.w,
        },
        objects,
    );
    Ok((layout, doc.style))
}
