use std::fmt;

use serde::{Deserialize, Serialize};

use super::scene::{AttrKind, AttrValue, Relation, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Count,
    Exist,
    Seek,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Count, Family::Exist, Family::Seek];

    pub fn name(self) -> &'static str {
        match self {
            Family::Count => "count",
            Family::Exist => "exist",
            Family::Seek => "seek",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a template depends on earlier turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryUse {
    None,
    /// Refers to one earlier object ("it", "the previous cube").
    Coreference,
    /// Depends on everything mentioned so far ("how many other things").
    WholeHistory,
}

/// The question templates: 4 count, 3 exist, 5 seek.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TemplateId {
    CountAttr,
    CountRel,
    CountRelIt,
    CountOther,
    ExistAttr,
    ExistRelPrev,
    ExistShareIt,
    SeekAttr,
    SeekAttrIt,
    SeekAttrPrev,
    SeekRel,
    SeekRelIt,
}

impl TemplateId {
    pub const ALL: [TemplateId; 12] = [
        TemplateId::CountAttr,
        TemplateId::CountRel,
        TemplateId::CountRelIt,
        TemplateId::CountOther,
        TemplateId::ExistAttr,
        TemplateId::ExistRelPrev,
        TemplateId::ExistShareIt,
        TemplateId::SeekAttr,
        TemplateId::SeekAttrIt,
        TemplateId::SeekAttrPrev,
        TemplateId::SeekRel,
        TemplateId::SeekRelIt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::CountAttr => "count-attr",
            TemplateId::CountRel => "count-rel",
            TemplateId::CountRelIt => "count-rel-it",
            TemplateId::CountOther => "count-other",
            TemplateId::ExistAttr => "exist-attr",
            TemplateId::ExistRelPrev => "exist-rel-prev",
            TemplateId::ExistShareIt => "exist-share-it",
            TemplateId::SeekAttr => "seek-attr",
            TemplateId::SeekAttrIt => "seek-attr-it",
            TemplateId::SeekAttrPrev => "seek-attr-prev",
            TemplateId::SeekRel => "seek-rel",
            TemplateId::SeekRelIt => "seek-rel-it",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn family(self) -> Family {
        use TemplateId::*;
        match self {
            CountAttr | CountRel | CountRelIt | CountOther => Family::Count,
            ExistAttr | ExistRelPrev | ExistShareIt => Family::Exist,
            SeekAttr | SeekAttrIt | SeekAttrPrev | SeekRel | SeekRelIt => Family::Seek,
        }
    }

    pub fn history(self) -> HistoryUse {
        use TemplateId::*;
        match self {
            CountRelIt | ExistRelPrev | ExistShareIt | SeekAttrIt | SeekAttrPrev | SeekRelIt => {
                HistoryUse::Coreference
            }
            CountOther => HistoryUse::WholeHistory,
            CountAttr | CountRel | ExistAttr | SeekAttr | SeekRel => HistoryUse::None,
        }
    }
}

impl From<TemplateId> for String {
    fn from(t: TemplateId) -> String {
        t.name().to_string()
    }
}

impl TryFrom<String> for TemplateId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        TemplateId::from_name(&s).ok_or_else(|| format!("unknown template {s:?}"))
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fully resolved arguments of one question instance.
///
/// `values` is either the description of the anchor object (`count-rel`,
/// `seek-attr`, `seek-rel`), the single attribute named after "previous"
/// (`*-prev`), or the filter of a `count-attr`/`exist-attr` question.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Bindings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr: Option<AttrKind>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<AttrValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<Relation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mentioned: Vec<usize>,
}

/// Words that appear literally in templates and captions.
pub const TEMPLATE_WORDS: &[&str] = &[
    "?", ".", "a", "are", "how", "is", "it", "its", "many", "of", "other", "previous", "share",
    "that", "the", "there", "thing", "things", "what",
];

/// Noun phrase for a set of attribute values, in the fixed order
/// size, color, material, then the shape or "thing".
pub fn describe(values: &[AttrValue]) -> Vec<String> {
    let mut out = Vec::with_capacity(values.len() + 1);
    for kind in [AttrKind::Size, AttrKind::Color, AttrKind::Material] {
        if let Some(v) = values.iter().find(|v| v.kind() == kind) {
            out.push(v.word().to_string());
        }
    }
    match values.iter().find(|v| v.kind() == AttrKind::Shape) {
        Some(v) => out.push(v.word().to_string()),
        None => out.push("thing".to_string()),
    }
    out
}

/// Inverse of [`describe`]; `None` if the words are not a well-formed description.
pub fn parse_description(words: &[String]) -> Option<Vec<AttrValue>> {
    let (last, rest) = words.split_last()?;
    let mut values = Vec::new();
    let mut prev_rank = 0;
    for w in rest {
        let v = AttrValue::from_word(w)?;
        let rank = match v.kind() {
            AttrKind::Size => 1,
            AttrKind::Color => 2,
            AttrKind::Material => 3,
            AttrKind::Shape => return None,
        };
        if rank <= prev_rank {
            return None;
        }
        prev_rank = rank;
        values.push(v);
    }
    if last != "thing" {
        values.push(AttrValue::Shape(Shape::from_word(last)?));
    }
    Some(values)
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

pub fn render_caption(description: &[AttrValue]) -> Vec<String> {
    let mut out = words(&["there", "is", "a"]);
    out.extend(describe(description));
    out.push(".".into());
    out
}

/// Token sequence of a question. Missing bindings render as nothing, so
/// callers are expected to pass complete bindings.
pub fn render(template: TemplateId, b: &Bindings) -> Vec<String> {
    use TemplateId::*;
    let rel: Vec<String> = b.relation.map(|r| words(r.words())).unwrap_or_default();
    let kind = b.attr.map(|k| k.word().to_string()).unwrap_or_default();
    let desc = describe(&b.values);
    let mut out: Vec<String> = Vec::new();
    match template {
        CountAttr => {
            out.extend(words(&["how", "many"]));
            out.extend(desc);
            out.extend(words(&["are", "there"]));
        }
        CountRel => {
            out.extend(words(&["how", "many", "things", "are"]));
            out.extend(rel);
            out.push("the".into());
            out.extend(desc);
        }
        CountRelIt => {
            out.extend(words(&["how", "many", "things", "are"]));
            out.extend(rel);
            out.push("it".into());
        }
        CountOther => out.extend(words(&["how", "many", "other", "things", "are", "there"])),
        ExistAttr => {
            out.extend(words(&["is", "there", "a"]));
            out.extend(desc);
        }
        ExistRelPrev => {
            out.extend(words(&["is", "there", "a", "thing"]));
            out.extend(rel);
            out.extend(words(&["the", "previous"]));
            out.extend(desc);
        }
        ExistShareIt => {
            out.extend(words(&[
                "are", "there", "other", "things", "that", "share", "its",
            ]));
            out.push(kind);
        }
        SeekAttr => {
            out.extend(words(&["what", "is", "the"]));
            out.push(kind);
            out.extend(words(&["of", "the"]));
            out.extend(desc);
        }
        SeekAttrIt => {
            out.extend(words(&["what", "is", "its"]));
            out.push(kind);
        }
        SeekAttrPrev => {
            out.extend(words(&["what", "is", "the"]));
            out.push(kind);
            out.extend(words(&["of", "the", "previous"]));
            out.extend(desc);
        }
        SeekRel => {
            out.extend(words(&["what", "is", "the"]));
            out.push(kind);
            out.extend(words(&["of", "the", "thing"]));
            out.extend(rel);
            out.push("the".into());
            out.extend(desc);
        }
        SeekRelIt => {
            out.extend(words(&["what", "is", "the"]));
            out.push(kind);
            out.extend(words(&["of", "the", "thing"]));
            out.extend(rel);
            out.push("it".into());
        }
    }
    out.push("?".into());
    out
}
