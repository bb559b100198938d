use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde_json::Value;

use super::interactions::open_maybe_gz;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ItemMeta {
    pub title: String,
    pub price: String,
    pub brand: String,
    pub categories: String,
    pub image_ref: Option<String>,
}

impl ItemMeta {
    /// Items without a title carry no usable text.
    pub fn has_required(&self) -> bool {
        !self.title.trim().is_empty()
    }
}

/// Item text layout with `{title}`, `{price}`, `{brand}` and
/// `{categories}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTemplate(pub String);

impl Default for TextTemplate {
    fn default() -> Self {
        TextTemplate(
            "Title: {title}; Price: {price}; Brand: {brand}; Categories: {categories}".into(),
        )
    }
}

impl TextTemplate {
    pub fn render(&self, meta: &ItemMeta) -> String {
        // single pass so field values containing braces are never re-expanded
        let fields = [
            ("{title}", meta.title.as_str()),
            ("{price}", meta.price.as_str()),
            ("{brand}", meta.brand.as_str()),
            ("{categories}", meta.categories.as_str()),
        ];
        let mut out = String::new();
        let mut rest = self.0.as_str();
        'outer: while !rest.is_empty() {
            for (key, val) in fields {
                if let Some(tail) = rest.strip_prefix(key) {
                    out.push_str(val);
                    rest = tail;
                    continue 'outer;
                }
            }
            let ch = rest.chars().next().expect("non-empty");
            out.push(ch);
            rest = &rest[ch.len_utf8()..];
        }
        out
    }
}

pub fn compose_item_text(meta: &ItemMeta) -> String {
    TextTemplate::default().render(meta)
}

fn text_field(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(xs)) => xs
            .iter()
            .map(|x| text_field(Some(x)))
            .collect::<Vec<_>>()
            .join(", "),
        Some(other) => other.to_string(),
    }
}

/// Reads JSON-lines metadata. Returns records keyed by item id and the
/// ids in file order.
pub fn read_metadata(path: &Path) -> Result<(HashMap<String, ItemMeta>, Vec<String>)> {
    let reader = open_maybe_gz(path)?;
    let mut map = HashMap::new();
    let mut order = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", no + 1)))?;
        let id = match v.get("item_id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {}: missing item_id", no + 1),
                ))
            }
        };
        let image_ref = match v.get("image_ref") {
            None | Some(Value::Null) => None,
            Some(x) => Some(text_field(Some(x))).filter(|s| !s.is_empty()),
        };
        let meta = ItemMeta {
            title: text_field(v.get("title")),
            price: text_field(v.get("price")),
            brand: text_field(v.get("brand")),
            categories: text_field(v.get("categories")),
            image_ref,
        };
        if map.insert(id.clone(), meta).is_some() {
            return Err(Error::format(
                path,
                format!("line {}: duplicate item_id `{id}`", no + 1),
            ));
        }
        order.push(id);
    }
    Ok((map, order))
}
