//! Synthetic grid scenes with multi-turn question dialogs and exact answers.

mod dialog;
mod io;
mod oracle;
mod replay;
mod scene;
mod templates;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dialog::{
    generate_dialog, unique_description, DialogConfig, DialogRecord, DialogTurn, FamilyWeights,
};
pub use io::{
    read_dataset, read_dataset_from, write_dataset, write_dataset_to, Dataset, DatasetHeader,
    FORMAT_VERSION,
};
pub use oracle::{answer_tokens, oracle_answer, unique_related, Answer, MAX_COUNT_ANSWER};
pub use replay::reanswer;
pub use scene::{
    sample_scene, AttrKind, AttrValue, Color, Material, Relation, SceneConfig, SceneGraph,
    SceneObject, Shape, Size,
};
pub use templates::{
    describe, render, render_caption, Bindings, Family, HistoryUse, TemplateId, TEMPLATE_WORDS,
};

/// Separator between history and current question in concatenated inputs.
pub const SEP_TOKEN: &str = "<sep>";

#[derive(Debug, Error)]
pub enum GenError {
    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("no valid template for turn {turn} after {attempts} attempts")]
    NoValidTemplate { turn: usize, attempts: usize },
    #[error("no object in the scene has a unique description")]
    NoCaption,
    #[error("template {template} is missing binding {field}")]
    Unbound {
        template: TemplateId,
        field: &'static str,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("replay of turn {turn} failed: {msg}")]
    Replay { turn: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenConfig {
    pub scene: SceneConfig,
    pub dialog: DialogConfig,
}

/// Every token a question or caption can contain, plus answer tokens (used by
/// history concatenation) and the separator. Separator first, rest sorted.
pub fn question_vocab(_cfg: &GenConfig) -> Vec<String> {
    let mut words: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
    words.extend(AttrValue::all().into_iter().map(|v| v.word().to_string()));
    words.extend(AttrKind::ALL.iter().map(|k| k.word().to_string()));
    for r in Relation::ALL {
        words.extend(r.words().iter().map(|s| s.to_string()));
    }
    words.extend(answer_tokens());
    let mut out = vec![SEP_TOKEN.to_string()];
    out.extend(words);
    out
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of dialog `index` under a master seed, independent of generation order.
pub fn dialog_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

const MAX_SCENE_REDRAWS: u64 = 100;

/// Scene and dialog from one seed. Returns `None` when that seed's scene
/// cannot carry a full dialog.
pub fn generate_from_seed(cfg: &GenConfig, seed: u64) -> Result<Option<DialogRecord>, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = sample_scene(&mut rng, &cfg.scene)?;
    match generate_dialog(&scene, &mut rng, &cfg.dialog) {
        Ok(mut d) => {
            d.seed = seed;
            Ok(Some(d))
        }
        Err(GenError::NoValidTemplate { .. } | GenError::NoCaption) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Dialog number `index`, redrawing the scene until a dialog fits.
pub fn generate_record(cfg: &GenConfig, master: u64, index: u64) -> Result<DialogRecord, GenError> {
    let base = dialog_seed(master, index);
    for attempt in 0..MAX_SCENE_REDRAWS {
        if let Some(d) = generate_from_seed(cfg, splitmix64(base ^ attempt))? {
            return Ok(d);
        }
    }
    Err(GenError::InfeasibleConfig(format!(
        "dialog {index}: no scene admitted a full dialog in {MAX_SCENE_REDRAWS} draws"
    )))
}

/// `count` dialogs; `workers > 1` splits the index range across threads with
/// identical output.
pub fn generate_dataset(
    cfg: &GenConfig,
    master: u64,
    count: usize,
    workers: usize,
) -> Result<Dataset, GenError> {
    cfg.scene.validate()?;
    let workers = workers.clamp(1, count.max(1));
    let records = if workers == 1 {
        (0..count as u64)
            .map(|i| generate_record(cfg, master, i))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        let chunk = count.div_ceil(workers);
        let parts: Vec<Result<Vec<DialogRecord>, GenError>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let lo = (w * chunk).min(count) as u64;
                    let hi = ((w + 1) * chunk).min(count) as u64;
                    s.spawn(move || (lo..hi).map(|i| generate_record(cfg, master, i)).collect())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("generator thread"))
                .collect()
        });
        let mut out = Vec::with_capacity(count);
        for p in parts {
            out.extend(p?);
        }
        out
    };
    Ok(Dataset {
        header: DatasetHeader::new(cfg.clone()),
        records,
    })
}

/// Template, family and coreference-distance histograms of a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DatasetStats {
    pub templates: BTreeMap<String, usize>,
    pub families: BTreeMap<String, usize>,
    pub coref_distance: BTreeMap<String, usize>,
    pub answers: BTreeMap<String, usize>,
}

impl DatasetStats {
    pub fn of(records: &[DialogRecord]) -> Self {
        let mut s = Self::default();
        for t in records.iter().flat_map(|r| &r.turns) {
            *s.templates.entry(t.template_id.name().into()).or_default() += 1;
            *s.families
                .entry(t.question_family.name().into())
                .or_default() += 1;
            let d = t
                .coref_distance
                .map_or("none".to_string(), |d| d.to_string());
            *s.coref_distance.entry(d).or_default() += 1;
            *s.answers.entry(t.answer.clone()).or_default() += 1;
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_stored_answer_matches_the_oracle() {
        let ds = generate_dataset(&GenConfig::default(), 9, 200, 1).unwrap();
        for r in &ds.records {
            for t in &r.turns {
                let a = oracle_answer(&r.scene, t.template_id, &t.bindings).unwrap();
                assert_eq!(a.token(), t.answer);
            }
            assert_eq!(
                reanswer(r).unwrap(),
                r.turns.iter().map(|t| t.answer.clone()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn seeds_reproduce_records() {
        let cfg = GenConfig::default();
        let ds = generate_dataset(&cfg, 3, 20, 1).unwrap();
        for r in &ds.records {
            assert_eq!(generate_from_seed(&cfg, r.seed).unwrap().as_ref(), Some(r));
        }
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let cfg = GenConfig::default();
        let a = generate_dataset(&cfg, 77, 25, 1).unwrap();
        let b = generate_dataset(&cfg, 77, 25, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocabulary_is_closed() {
        let cfg = GenConfig::default();
        let ds = generate_dataset(&cfg, 5, 300, 1).unwrap();
        let vocab: BTreeSet<&String> = ds.header.vocab.iter().collect();
        let answers: BTreeSet<&String> = ds.header.answer_vocab.iter().collect();
        for r in &ds.records {
            assert!(r.caption.iter().all(|w| vocab.contains(w)));
            for t in &r.turns {
                assert!(t.text.iter().all(|w| vocab.contains(w)), "{:?}", t.text);
                assert!(answers.contains(&t.answer));
            }
        }
    }

    #[test]
    fn coreference_metadata_is_consistent() {
        let ds = generate_dataset(&GenConfig::default(), 12, 300, 1).unwrap();
        for r in &ds.records {
            for (i, t) in r.turns.iter().enumerate() {
                let turn = i + 1;
                match t.template_id.history() {
                    HistoryUse::Coreference => {
                        let c = t.coref_turn.expect("coref turn");
                        assert!(c < turn);
                        assert_eq!(t.coref_distance, Some(turn - c));
                        assert!(t.referent_object.is_some());
                    }
                    _ => assert_eq!(t.coref_turn, None),
                }
            }
        }
    }

    #[test]
    fn family_mix_tracks_the_weights() {
        let ds = generate_dataset(&GenConfig::default(), 21, 1000, 1).unwrap();
        let stats = DatasetStats::of(&ds.records);
        let total: usize = stats.families.values().sum();
        assert_eq!(total, 5000);
        let seek = stats.families["seek"] as f64 / total as f64;
        let count = stats.families["count"] as f64 / total as f64;
        let exist = stats.families["exist"] as f64 / total as f64;
        assert!((seek - 0.60).abs() < 0.05, "seek {seek}");
        assert!((count - 0.23).abs() < 0.05, "count {count}");
        assert!((exist - 0.17).abs() < 0.05, "exist {exist}");
    }
}
