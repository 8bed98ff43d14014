//! Exact answers by exhaustive enumeration over scene objects.

use std::fmt;

use super::scene::{AttrValue, SceneGraph};
use super::templates::{Bindings, TemplateId};
use super::GenError;

/// Counts above this are reported as this value.
pub const MAX_COUNT_ANSWER: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Answer {
    Count(usize),
    Yes,
    No,
    Value(AttrValue),
    /// Seek question whose object does not exist (or is not unique).
    NoneAnswer,
}

impl Answer {
    pub fn token(&self) -> String {
        match self {
            Answer::Count(n) => n.to_string(),
            Answer::Yes => "yes".into(),
            Answer::No => "no".into(),
            Answer::Value(v) => v.word().into(),
            Answer::NoneAnswer => "none".into(),
        }
    }

    fn exists(b: bool) -> Self {
        if b {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    fn count(n: usize) -> Self {
        Answer::Count(n.min(MAX_COUNT_ANSWER))
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token())
    }
}

/// Closed answer set, in the order used for classifier outputs.
pub fn answer_tokens() -> Vec<String> {
    let mut out: Vec<String> = (0..=MAX_COUNT_ANSWER).map(|n| n.to_string()).collect();
    out.push("yes".into());
    out.push("no".into());
    out.extend(AttrValue::all().into_iter().map(|v| v.word().to_string()));
    out.push("none".into());
    out
}

fn need<T: Copy>(v: Option<T>, template: TemplateId, field: &'static str) -> Result<T, GenError> {
    v.ok_or(GenError::Unbound { template, field })
}

fn anchor(scene: &SceneGraph, b: &Bindings, template: TemplateId) -> Result<usize, GenError> {
    let a = need(b.anchor, template, "anchor")?;
    if a >= scene.objects.len() {
        return Err(GenError::InvalidScene(format!("anchor {a} out of range")));
    }
    Ok(a)
}

/// The object in direction `rel` of the anchor, if exactly one exists.
pub fn unique_related(
    scene: &SceneGraph,
    anchor: usize,
    rel: super::scene::Relation,
) -> Option<usize> {
    let mut found = None;
    for (i, o) in scene.objects.iter().enumerate() {
        if i != anchor && rel.holds(scene.objects[anchor].cell, o.cell) {
            if found.is_some() {
                return None;
            }
            found = Some(i);
        }
    }
    found
}

pub fn oracle_answer(
    scene: &SceneGraph,
    template: TemplateId,
    b: &Bindings,
) -> Result<Answer, GenError> {
    use TemplateId::*;
    let objs = &scene.objects;
    Ok(match template {
        CountAttr => Answer::count(objs.iter().filter(|o| o.matches_all(&b.values)).count()),
        CountRel | CountRelIt => {
            let a = anchor(scene, b, template)?;
            let rel = need(b.relation, template, "relation")?;
            let ac = objs[a].cell;
            let n = objs
                .iter()
                .enumerate()
                .filter(|&(i, o)| i != a && rel.holds(ac, o.cell))
                .count();
            Answer::count(n)
        }
        CountOther => {
            let n = (0..objs.len()).filter(|i| !b.mentioned.contains(i)).count();
            Answer::count(n)
        }
        ExistAttr => Answer::exists(objs.iter().any(|o| o.matches_all(&b.values))),
        ExistRelPrev => {
            let a = anchor(scene, b, template)?;
            let rel = need(b.relation, template, "relation")?;
            let ac = objs[a].cell;
            Answer::exists(
                objs.iter()
                    .enumerate()
                    .any(|(i, o)| i != a && rel.holds(ac, o.cell)),
            )
        }
        ExistShareIt => {
            let a = anchor(scene, b, template)?;
            let kind = need(b.attr, template, "attr")?;
            let target = objs[a].attr(kind);
            Answer::exists(
                objs.iter()
                    .enumerate()
                    .any(|(i, o)| i != a && o.attr(kind) == target),
            )
        }
        SeekAttr | SeekAttrIt | SeekAttrPrev => {
            let kind = need(b.attr, template, "attr")?;
            match b.anchor {
                Some(a) if a < objs.len() => Answer::Value(objs[a].attr(kind)),
                _ => Answer::NoneAnswer,
            }
        }
        SeekRel | SeekRelIt => {
            let kind = need(b.attr, template, "attr")?;
            let rel = need(b.relation, template, "relation")?;
            match b.anchor.filter(|&a| a < objs.len()) {
                Some(a) => match unique_related(scene, a, rel) {
                    Some(t) => Answer::Value(objs[t].attr(kind)),
                    None => Answer::NoneAnswer,
                },
                None => Answer::NoneAnswer,
            }
        }
    })
}
