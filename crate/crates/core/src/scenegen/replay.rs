//! Re-derives every answer of a stored dialog from its text alone.
//!
//! Questions are parsed back into templates, referring expressions are
//! resolved against the scene and the running dialog history, and the
//! resolved question is answered by enumeration. Nothing recorded by the
//! generator (bindings, referent indices) is consulted, so agreement with the
//! stored answers is an end-to-end check of the generator.

use super::dialog::{DialogRecord, Mentions};
use super::oracle::{oracle_answer, unique_related};
use super::scene::{AttrKind, AttrValue, Relation, SceneGraph};
use super::templates::{parse_description, Bindings, TemplateId};
use super::GenError;

#[derive(Debug, Clone, PartialEq)]
enum Reference {
    None,
    Described(Vec<AttrValue>),
    It,
    Previous(AttrValue),
}

#[derive(Debug, Clone, PartialEq)]
struct Parsed {
    template: TemplateId,
    attr: Option<AttrKind>,
    relation: Option<Relation>,
    filter: Vec<AttrValue>,
    reference: Reference,
}

struct Cursor<'a> {
    toks: &'a [String],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn eat(&mut self, words: &[&str]) -> bool {
        let end = self.pos + words.len();
        if end <= self.toks.len()
            && self.toks[self.pos..end]
                .iter()
                .zip(words)
                .all(|(a, b)| a == b)
        {
            self.pos = end;
            true
        } else {
            false
        }
    }

    fn relation(&mut self) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| self.eat(r.words()))
    }

    fn kind(&mut self) -> Option<AttrKind> {
        let k = AttrKind::from_word(self.toks.get(self.pos)?)?;
        self.pos += 1;
        Some(k)
    }

    /// Description running up to (not including) `stop` at the very end.
    fn description_until_end(&mut self, stop: &[&str]) -> Option<Vec<AttrValue>> {
        let end = self.toks.len().checked_sub(stop.len())?;
        if end <= self.pos || self.toks[end..].iter().zip(stop).any(|(a, b)| a != b) {
            return None;
        }
        let d = parse_description(&self.toks[self.pos..end])?;
        self.pos = self.toks.len();
        Some(d)
    }

    fn done(&self) -> bool {
        self.pos == self.toks.len()
    }
}

fn parse_question(toks: &[String]) -> Option<Parsed> {
    use TemplateId::*;
    let mut c = Cursor { toks, pos: 0 };
    let mut p = Parsed {
        template: CountAttr,
        attr: None,
        relation: None,
        filter: Vec::new(),
        reference: Reference::None,
    };
    if c.eat(&["how", "many", "other", "things", "are", "there", "?"]) {
        p.template = CountOther;
    } else if c.eat(&["how", "many", "things", "are"]) {
        p.relation = Some(c.relation()?);
        if c.eat(&["it", "?"]) {
            p.template = CountRelIt;
            p.reference = Reference::It;
        } else if c.eat(&["the"]) {
            p.template = CountRel;
            p.reference = Reference::Described(c.description_until_end(&["?"])?);
        } else {
            return None;
        }
    } else if c.eat(&["how", "many"]) {
        p.template = CountAttr;
        p.filter = c.description_until_end(&["are", "there", "?"])?;
    } else if c.eat(&["are", "there", "other", "things", "that", "share", "its"]) {
        p.template = ExistShareIt;
        p.attr = Some(c.kind()?);
        p.reference = Reference::It;
        if !c.eat(&["?"]) {
            return None;
        }
    } else if c.eat(&["is", "there", "a"]) {
        let rest = &toks[c.pos..];
        if rest.iter().any(|t| t == "previous") {
            if !c.eat(&["thing"]) {
                return None;
            }
            p.template = ExistRelPrev;
            p.relation = Some(c.relation()?);
            if !c.eat(&["the", "previous"]) {
                return None;
            }
            let d = c.description_until_end(&["?"])?;
            let [v] = d[..] else { return None };
            p.reference = Reference::Previous(v);
        } else {
            p.template = ExistAttr;
            p.filter = c.description_until_end(&["?"])?;
        }
    } else if c.eat(&["what", "is", "its"]) {
        p.template = SeekAttrIt;
        p.attr = Some(c.kind()?);
        p.reference = Reference::It;
        if !c.eat(&["?"]) {
            return None;
        }
    } else if c.eat(&["what", "is", "the"]) {
        p.attr = Some(c.kind()?);
        if c.eat(&["of", "the", "previous"]) {
            p.template = SeekAttrPrev;
            let d = c.description_until_end(&["?"])?;
            let [v] = d[..] else { return None };
            p.reference = Reference::Previous(v);
        } else if c.eat(&["of", "the", "thing"]) && toks.get(c.pos).is_some_and(|t| t != "?") {
            p.relation = Some(c.relation()?);
            if c.eat(&["it", "?"]) {
                p.template = SeekRelIt;
                p.reference = Reference::It;
            } else if c.eat(&["the"]) {
                p.template = SeekRel;
                p.reference = Reference::Described(c.description_until_end(&["?"])?);
            } else {
                return None;
            }
        } else {
            c.pos = 4;
            if !c.eat(&["of", "the"]) {
                return None;
            }
            p.template = SeekAttr;
            p.reference = Reference::Described(c.description_until_end(&["?"])?);
        }
    } else {
        return None;
    }
    c.done().then_some(p)
}

fn unique_in_scene(scene: &SceneGraph, values: &[AttrValue]) -> Option<usize> {
    match scene.matching(values)[..] {
        [one] => Some(one),
        _ => None,
    }
}

fn parse_caption(scene: &SceneGraph, caption: &[String]) -> Option<usize> {
    let mut c = Cursor {
        toks: caption,
        pos: 0,
    };
    if !c.eat(&["there", "is", "a"]) {
        return None;
    }
    unique_in_scene(scene, &c.description_until_end(&["."])?)
}

fn replay_error(turn: usize, msg: impl Into<String>) -> GenError {
    GenError::Replay {
        turn,
        msg: msg.into(),
    }
}

/// Answers of every question turn, recomputed from text.
pub fn reanswer(record: &DialogRecord) -> Result<Vec<String>, GenError> {
    let scene = &record.scene;
    let mut mentions = Mentions::default();
    let caption_obj = parse_caption(scene, &record.caption)
        .ok_or_else(|| replay_error(0, "caption does not pick a unique object"))?;
    mentions.push(0, caption_obj);

    let mut answers = Vec::with_capacity(record.turns.len());
    for (i, turn) in record.turns.iter().enumerate() {
        let t = i + 1;
        let parsed = parse_question(&turn.text).ok_or_else(|| {
            replay_error(t, format!("unparseable question {:?}", turn.text.join(" ")))
        })?;
        let anchor = match &parsed.reference {
            Reference::None => None,
            Reference::Described(d) => Some(
                unique_in_scene(scene, d)
                    .ok_or_else(|| replay_error(t, "description is not unique"))?,
            ),
            Reference::It => Some(
                mentions
                    .focus()
                    .ok_or_else(|| replay_error(t, "\"it\" with empty history"))?
                    .1,
            ),
            Reference::Previous(v) => {
                let hits: Vec<usize> = mentions
                    .distinct()
                    .into_iter()
                    .filter(|&o| scene.objects[o].matches(*v))
                    .collect();
                match hits[..] {
                    [one] => Some(one),
                    _ => {
                        return Err(replay_error(
                            t,
                            format!("\"previous {v}\" matches {} objects", hits.len()),
                        ))
                    }
                }
            }
        };
        let bindings = Bindings {
            attr: parsed.attr,
            values: parsed.filter.clone(),
            relation: parsed.relation,
            anchor,
            mentioned: if parsed.template == TemplateId::CountOther {
                mentions.distinct()
            } else {
                Vec::new()
            },
        };
        answers.push(oracle_answer(scene, parsed.template, &bindings)?.token());

        if let Some(a) = anchor {
            mentions.push(t, a);
            if let (Some(rel), TemplateId::SeekRel | TemplateId::SeekRelIt) =
                (parsed.relation, parsed.template)
            {
                if let Some(target) = unique_related(scene, a, rel) {
                    mentions.push(t, target);
                }
            }
        }
    }
    Ok(answers)
}
