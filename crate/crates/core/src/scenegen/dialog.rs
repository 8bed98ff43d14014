use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::oracle::{oracle_answer, unique_related};
use super::scene::{AttrKind, AttrValue, Relation, SceneGraph};
use super::templates::{render, render_caption, Bindings, Family, HistoryUse, TemplateId};
use super::GenError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTurn {
    pub text: Vec<String>,
    pub answer: String,
    pub template_id: TemplateId,
    pub question_family: Family,
    pub coref_turn: Option<usize>,
    pub coref_distance: Option<usize>,
    pub referent_object: Option<usize>,
    pub bindings: Bindings,
}

/// Caption plus question turns. The caption is dialog turn 0 and question
/// `turns[i]` is dialog turn `i + 1`; `coref_turn` uses the same numbering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogRecord {
    pub scene: SceneGraph,
    pub caption: Vec<String>,
    pub turns: Vec<DialogTurn>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyWeights {
    pub count: f64,
    pub exist: f64,
    pub seek: f64,
}

impl Default for FamilyWeights {
    fn default() -> Self {
        Self {
            count: 0.23,
            exist: 0.17,
            seek: 0.60,
        }
    }
}

impl FamilyWeights {
    fn get(&self, f: Family) -> f64 {
        match f {
            Family::Count => self.count,
            Family::Exist => self.exist,
            Family::Seek => self.seek,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogConfig {
    pub turns: usize,
    pub family_weights: FamilyWeights,
    pub templates: Vec<TemplateId>,
    pub max_attempts: usize,
}

impl Default for DialogConfig {
    fn default() -> Self {
        Self {
            turns: 5,
            family_weights: FamilyWeights::default(),
            templates: TemplateId::ALL.to_vec(),
            max_attempts: 50,
        }
    }
}

/// Objects referred to so far, in dialog order.
#[derive(Debug, Clone, Default)]
pub(crate) struct Mentions {
    items: Vec<(usize, usize)>,
}

impl Mentions {
    pub(crate) fn push(&mut self, turn: usize, object: usize) {
        self.items.push((turn, object));
    }

    /// Most recently mentioned object and the turn that mentioned it ("it").
    pub(crate) fn focus(&self) -> Option<(usize, usize)> {
        self.items.last().copied()
    }

    pub(crate) fn first_turn_of(&self, object: usize) -> Option<usize> {
        self.items.iter().find(|m| m.1 == object).map(|m| m.0)
    }

    pub(crate) fn distinct(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.items.iter().map(|m| m.1).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Shortest attribute set (size, color, material, shape; optionally
/// excluding one kind) that picks out `object` alone. Ties between equally
/// short sets are broken at random.
pub fn unique_description<R: Rng + ?Sized>(
    scene: &SceneGraph,
    object: usize,
    exclude: Option<AttrKind>,
    rng: &mut R,
) -> Option<Vec<AttrValue>> {
    let kinds: Vec<AttrKind> = AttrKind::ALL
        .iter()
        .copied()
        .filter(|&k| Some(k) != exclude)
        .collect();
    let n = kinds.len();
    for size in 1..=n {
        let mut subsets: Vec<Vec<AttrKind>> = (0u32..(1 << n))
            .filter(|m| m.count_ones() as usize == size)
            .map(|m| {
                (0..n)
                    .filter(|i| m & (1 << i) != 0)
                    .map(|i| kinds[i])
                    .collect()
            })
            .collect();
        subsets.shuffle(rng);
        for subset in subsets {
            let values: Vec<AttrValue> = subset
                .iter()
                .map(|&k| scene.objects[object].attr(k))
                .collect();
            if scene.matching(&values) == [object] {
                return Some(values);
            }
        }
    }
    None
}

struct Instance {
    bindings: Bindings,
    coref_turn: Option<usize>,
    mentions: Vec<usize>,
}

fn random_filter<R: Rng + ?Sized>(scene: &SceneGraph, rng: &mut R) -> Vec<AttrValue> {
    let mut kinds = AttrKind::ALL.to_vec();
    kinds.shuffle(rng);
    let k = rng.random_range(1..=2);
    if rng.random_bool(0.5) {
        // Borrow attributes of a real object so "yes"/non-zero answers are common.
        let o = scene.objects.choose(rng).expect("non-empty scene");
        kinds[..k].iter().map(|&kind| o.attr(kind)).collect()
    } else {
        kinds[..k]
            .iter()
            .map(|&kind| {
                *AttrValue::all_of(kind)
                    .choose(rng)
                    .expect("non-empty attribute")
            })
            .collect()
    }
}

/// A "previous <value>" phrase: one attribute value shared by exactly one
/// mentioned object but by at least two scene objects, so only the dialog
/// history can disambiguate it.
fn previous_phrase<R: Rng + ?Sized>(
    scene: &SceneGraph,
    mentions: &Mentions,
    skip_kind: Option<AttrKind>,
    rng: &mut R,
) -> Option<(usize, AttrValue)> {
    let mentioned = mentions.distinct();
    let mut options = Vec::new();
    for &obj in &mentioned {
        for kind in AttrKind::ALL
            .iter()
            .copied()
            .filter(|&k| Some(k) != skip_kind)
        {
            let v = scene.objects[obj].attr(kind);
            let in_history = mentioned
                .iter()
                .filter(|&&m| scene.objects[m].matches(v))
                .count();
            if in_history == 1 && scene.matching(&[v]).len() >= 2 {
                options.push((obj, v));
            }
        }
    }
    options.choose(rng).copied()
}

fn instantiate<R: Rng + ?Sized>(
    template: TemplateId,
    scene: &SceneGraph,
    mentions: &Mentions,
    rng: &mut R,
) -> Option<Instance> {
    use TemplateId::*;
    let n = scene.objects.len();
    let kind = *AttrKind::ALL.choose(rng)?;
    let relation = *Relation::ALL.choose(rng)?;
    let focus = mentions.focus();
    let plain = |bindings| Instance {
        bindings,
        coref_turn: None,
        mentions: Vec::new(),
    };
    Some(match template {
        CountAttr => plain(Bindings {
            values: random_filter(scene, rng),
            ..Default::default()
        }),
        ExistAttr => plain(Bindings {
            values: random_filter(scene, rng),
            ..Default::default()
        }),
        CountOther => {
            if mentions.is_empty() {
                return None;
            }
            plain(Bindings {
                mentioned: mentions.distinct(),
                ..Default::default()
            })
        }
        CountRel => {
            let anchor = rng.random_range(0..n);
            let values = unique_description(scene, anchor, None, rng)?;
            Instance {
                bindings: Bindings {
                    values,
                    relation: Some(relation),
                    anchor: Some(anchor),
                    ..Default::default()
                },
                coref_turn: None,
                mentions: vec![anchor],
            }
        }
        SeekAttr => {
            let anchor = rng.random_range(0..n);
            let values = unique_description(scene, anchor, Some(kind), rng)?;
            Instance {
                bindings: Bindings {
                    attr: Some(kind),
                    values,
                    anchor: Some(anchor),
                    ..Default::default()
                },
                coref_turn: None,
                mentions: vec![anchor],
            }
        }
        SeekRel => {
            let anchor = rng.random_range(0..n);
            let target = unique_related(scene, anchor, relation)?;
            let values = unique_description(scene, anchor, None, rng)?;
            Instance {
                bindings: Bindings {
                    attr: Some(kind),
                    values,
                    relation: Some(relation),
                    anchor: Some(anchor),
                    ..Default::default()
                },
                coref_turn: None,
                mentions: vec![anchor, target],
            }
        }
        CountRelIt | ExistShareIt | SeekAttrIt => {
            let (turn, anchor) = focus?;
            let bindings = match template {
                CountRelIt => Bindings {
                    relation: Some(relation),
                    anchor: Some(anchor),
                    ..Default::default()
                },
                _ => Bindings {
                    attr: Some(kind),
                    anchor: Some(anchor),
                    ..Default::default()
                },
            };
            Instance {
                bindings,
                coref_turn: Some(turn),
                mentions: vec![anchor],
            }
        }
        SeekRelIt => {
            let (turn, anchor) = focus?;
            let target = unique_related(scene, anchor, relation)?;
            Instance {
                bindings: Bindings {
                    attr: Some(kind),
                    relation: Some(relation),
                    anchor: Some(anchor),
                    ..Default::default()
                },
                coref_turn: Some(turn),
                mentions: vec![anchor, target],
            }
        }
        ExistRelPrev | SeekAttrPrev => {
            let skip = (template == SeekAttrPrev).then_some(kind);
            let (anchor, value) = previous_phrase(scene, mentions, skip, rng)?;
            let turn = mentions.first_turn_of(anchor)?;
            let bindings = if template == ExistRelPrev {
                Bindings {
                    values: vec![value],
                    relation: Some(relation),
                    anchor: Some(anchor),
                    ..Default::default()
                }
            } else {
                Bindings {
                    attr: Some(kind),
                    values: vec![value],
                    anchor: Some(anchor),
                    ..Default::default()
                }
            };
            Instance {
                bindings,
                coref_turn: Some(turn),
                mentions: vec![anchor],
            }
        }
    })
}

fn pick_family<R: Rng + ?Sized>(cfg: &DialogConfig, rng: &mut R) -> Option<Family> {
    let families: Vec<(Family, f64)> = Family::ALL
        .iter()
        .map(|&f| (f, cfg.family_weights.get(f)))
        .filter(|&(f, w)| w > 0.0 && cfg.templates.iter().any(|t| t.family() == f))
        .collect();
    let total: f64 = families.iter().map(|f| f.1).sum();
    if total <= 0.0 {
        return None;
    }
    let mut x = rng.random_range(0.0..total);
    for &(f, w) in &families {
        if x < w {
            return Some(f);
        }
        x -= w;
    }
    families.last().map(|f| f.0)
}

/// Caption plus `cfg.turns` question turns over `scene`. Fails with
/// [`GenError::NoValidTemplate`] when a turn cannot be instantiated, in which
/// case the caller should draw a new scene.
pub fn generate_dialog<R: Rng + ?Sized>(
    scene: &SceneGraph,
    rng: &mut R,
    cfg: &DialogConfig,
) -> Result<DialogRecord, GenError> {
    scene.validate()?;
    let mut mentions = Mentions::default();

    let describable: Vec<(usize, Vec<AttrValue>)> = (0..scene.objects.len())
        .filter_map(|i| unique_description(scene, i, None, rng).map(|d| (i, d)))
        .collect();
    let (caption_obj, caption_desc) = describable
        .choose(rng)
        .cloned()
        .ok_or(GenError::NoCaption)?;
    mentions.push(0, caption_obj);
    let caption = render_caption(&caption_desc);

    let mut turns = Vec::with_capacity(cfg.turns);
    for t in 1..=cfg.turns {
        let mut made = None;
        // The family is drawn once per turn so the mix follows the weights;
        // only the template within it is retried.
        if let Some(family) = pick_family(cfg, rng) {
            let options: Vec<TemplateId> = cfg
                .templates
                .iter()
                .copied()
                .filter(|t| t.family() == family)
                .collect();
            for _ in 0..cfg.max_attempts {
                let Some(&template) = options.choose(rng) else {
                    break;
                };
                if let Some(inst) = instantiate(template, scene, &mentions, rng) {
                    made = Some((template, inst));
                    break;
                }
            }
        }
        let (template, inst) = made.ok_or(GenError::NoValidTemplate {
            turn: t,
            attempts: cfg.max_attempts,
        })?;
        let answer = oracle_answer(scene, template, &inst.bindings)?;
        debug_assert!(
            template.history() != HistoryUse::Coreference || inst.coref_turn.is_some(),
            "coreferent template without referent"
        );
        for &m in &inst.mentions {
            mentions.push(t, m);
        }
        turns.push(DialogTurn {
            text: render(template, &inst.bindings),
            answer: answer.token(),
            template_id: template,
            question_family: template.family(),
            coref_turn: inst.coref_turn,
            coref_distance: inst.coref_turn.map(|c| t - c),
            referent_object: inst.bindings.anchor,
            bindings: inst.bindings,
        });
    }

    Ok(DialogRecord {
        scene: scene.clone(),
        caption,
        turns,
        seed: 0,
    })
}
