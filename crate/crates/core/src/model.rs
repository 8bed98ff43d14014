//! Model configuration, the named parameter store, and the binding of
//! parameters onto a tape for one forward pass.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scenegen::{DatasetHeader, SEP_TOKEN};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Which dialog extensions are active: history concatenation (`cq`),
/// attention over past control states (`caa`) and memory carried across
/// turns (`mtm`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Flags {
    pub cq: bool,
    pub caa: bool,
    pub mtm: bool,
}

impl Flags {
    pub const MODEL_NAMES: [&'static str; 7] = [
        "vanilla",
        "mtm",
        "caa",
        "caa+mtm",
        "cq",
        "cq+caa",
        "cq+caa+mtm",
    ];

    pub const fn new(cq: bool, caa: bool, mtm: bool) -> Self {
        Self { cq, caa, mtm }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "vanilla" => Self::new(false, false, false),
            "mtm" => Self::new(false, false, true),
            "caa" => Self::new(false, true, false),
            "caa+mtm" => Self::new(false, true, true),
            "cq" => Self::new(true, false, false),
            "cq+caa" => Self::new(true, true, false),
            "cq+caa+mtm" => Self::new(true, true, true),
            _ => return None,
        })
    }

    pub fn name(&self) -> String {
        let parts: Vec<&str> = [(self.cq, "cq"), (self.caa, "caa"), (self.mtm, "mtm")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            "vanilla".into()
        } else {
            parts.join("+")
        }
    }

    /// Models whose turns depend on earlier turns through state (as opposed
    /// to through their input text).
    pub fn carries_state(&self) -> bool {
        self.caa || self.mtm
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    /// Reasoning steps per turn.
    pub p: usize,
    pub grid: (usize, usize),
    pub vocab: Vec<String>,
    pub answers: Vec<String>,
    pub flags: Flags,
    /// Token budget of the concatenated history input (`cq` only).
    pub max_concat_len: usize,
}

impl ModelConfig {
    pub fn new(header: &DatasetHeader, flags: Flags) -> Self {
        Self {
            d: 64,
            p: 4,
            grid: header.cfg.scene.grid,
            vocab: header.vocab.clone(),
            answers: header.answer_vocab.clone(),
            flags,
            max_concat_len: 96,
        }
    }

    pub fn with_dims(mut self, d: usize, p: usize) -> Self {
        self.d = d;
        self.p = p;
        self
    }

    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d < 2 || !self.d.is_multiple_of(2) {
            return bad(format!("d must be even and at least 2, got {}", self.d));
        }
        if self.p == 0 {
            return bad("p must be at least 1".into());
        }
        if self.cells() == 0 {
            return bad(format!("empty grid {:?}", self.grid));
        }
        if self.vocab.is_empty() || self.answers.is_empty() {
            return bad("empty vocabulary".into());
        }
        if self.flags.cq && !self.vocab.iter().any(|w| w == SEP_TOKEN) {
            return bad(format!(
                "history concatenation needs {SEP_TOKEN} in the vocabulary"
            ));
        }
        if self.flags.cq && self.max_concat_len == 0 {
            return bad("max_concat_len must be positive".into());
        }
        Ok(())
    }

    /// Short digest of the question and answer vocabularies.
    pub fn vocab_hash(&self) -> String {
        vocab_hash(&self.vocab, &self.answers)
    }
}

pub fn vocab_hash(vocab: &[String], answers: &[String]) -> String {
    let mut h = Sha256::new();
    for w in vocab {
        h.update(w.as_bytes());
        h.update([0]);
    }
    h.update([1]);
    for w in answers {
        h.update(w.as_bytes());
        h.update([0]);
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Token → row lookups for the embedding table and the classifier.
#[derive(Debug, Clone)]
pub struct Lexicon {
    words: HashMap<String, usize>,
    answers: HashMap<String, usize>,
}

impl Lexicon {
    pub fn new(cfg: &ModelConfig) -> Self {
        let index = |v: &[String]| v.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self {
            words: index(&cfg.vocab),
            answers: index(&cfg.answers),
        }
    }

    pub fn word(&self, tok: &str) -> Result<usize> {
        self.words
            .get(tok)
            .copied()
            .ok_or_else(|| Error::UnknownToken(tok.into()))
    }

    pub fn words(&self, toks: &[String]) -> Result<Vec<usize>> {
        toks.iter().map(|t| self.word(t)).collect()
    }

    pub fn answer(&self, tok: &str) -> Result<usize> {
        self.answers
            .get(tok)
            .copied()
            .ok_or_else(|| Error::UnknownToken(tok.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±√(6/(fan_in+fan_out)).
    Xavier,
    Zeros,
    /// Normal(0, 1/√d).
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn entry(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

/// Every learned tensor of a model, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    use Init::*;
    let (d, h) = (cfg.d, cfg.d / 2);
    let mut s = vec![entry("enc.embed", &[cfg.vocab.len(), d], Embedding)];
    for dir in ["f", "b"] {
        s.push(entry(format!("enc.gru.{dir}.wx"), &[d, 3 * h], Xavier));
        s.push(entry(format!("enc.gru.{dir}.wh"), &[h, 3 * h], Xavier));
        s.push(entry(format!("enc.gru.{dir}.bx"), &[3 * h], Zeros));
        s.push(entry(format!("enc.gru.{dir}.bh"), &[3 * h], Zeros));
    }
    s.extend([
        entry("enc.words.w", &[d, d], Xavier),
        entry("enc.words.b", &[d], Zeros),
        entry("enc.q.w", &[d, d], Xavier),
        entry("enc.q.b", &[d], Zeros),
        entry(
            "kb.color",
            &[crate::scenegen::Color::ALL.len(), d],
            Embedding,
        ),
        entry(
            "kb.shape",
            &[crate::scenegen::Shape::ALL.len(), d],
            Embedding,
        ),
        entry("kb.size", &[crate::scenegen::Size::ALL.len(), d], Embedding),
        entry(
            "kb.material",
            &[crate::scenegen::Material::ALL.len(), d],
            Embedding,
        ),
        entry("kb.empty", &[1, d], Embedding),
        entry("kb.pos", &[cfg.cells(), d], Embedding),
        entry("ctrl.init", &[d], Embedding),
    ]);
    for k in 0..cfg.p {
        s.push(entry(format!("ctrl.cq.{k}.w"), &[d, d], Xavier));
        s.push(entry(format!("ctrl.cq.{k}.b"), &[d], Zeros));
    }
    s.extend([
        entry("ctrl.inter.w", &[2 * d, d], Xavier),
        entry("ctrl.inter.b", &[d], Zeros),
        entry("ctrl.attn.w", &[d], Xavier),
        entry("read.mem.w", &[d, d], Xavier),
        entry("read.comb.w", &[2 * d, d], Xavier),
        entry("read.attn.w", &[d], Xavier),
        entry("read.out.w", &[d, d], Xavier),
        entry("read.out.b", &[d], Zeros),
        entry("write.w", &[2 * d, d], Xavier),
        entry("write.b", &[d], Zeros),
        entry("out.hidden.w", &[2 * d, d], Xavier),
        entry("out.hidden.b", &[d], Zeros),
        entry("out.logits.w", &[d, cfg.answers.len()], Xavier),
        entry("out.logits.b", &[cfg.answers.len()], Zeros),
    ]);
    if cfg.flags.caa {
        s.extend([
            entry("caa.proj_a", &[d, d], Xavier),
            entry("caa.proj_b", &[d, d], Xavier),
            entry("fusion.wr", &[4 * d, d], Xavier),
            entry("fusion.br", &[d], Zeros),
            entry("fusion.wg", &[4 * d, d], Xavier),
            entry("fusion.bg", &[d], Zeros),
        ]);
    }
    s
}

/// Named tensors in [`param_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed_std = 1.0 / (cfg.d as f64).sqrt();
        let normal = Normal::new(0.0, embed_std).map_err(|e| Error::Config(e.to_string()))?;
        let named = param_specs(cfg)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<f64> = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Embedding => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Xavier => {
                        let (fan_in, fan_out) = match s.shape[..] {
                            [a, b] => (a, b),
                            [a] => (a, 1),
                            _ => unreachable!("weights are vectors or matrices"),
                        };
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        let u = Uniform::new_inclusive(-a, a)
                            .map_err(|e| Error::Config(e.to_string()))?;
                        (0..n).map(|_| u.sample(&mut rng)).collect()
                    }
                };
                Ok((s.name, Tensor::from_f64(&s.shape, &data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_named_unchecked(named))
    }

    fn from_named_unchecked(named: Vec<(String, Tensor<T>)>) -> Self {
        let index = named
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        let (names, tensors) = named.into_iter().unzip();
        Self {
            names,
            tensors,
            index,
        }
    }

    /// Rebuilds a store from loaded tensors, checking names and shapes
    /// against what `cfg` requires.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let specs = param_specs(cfg);
        if specs.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut by_name: HashMap<String, Tensor<T>> = named.into_iter().collect();
        let mut ordered = Vec::with_capacity(specs.len());
        for s in specs {
            let t = by_name
                .remove(&s.name)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", s.name)))?;
            if t.shape() != s.shape {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            ordered.push((s.name, t));
        }
        Ok(Self::from_named_unchecked(ordered))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor on `tape`, as trainable leaves when `trainable`
    /// is set and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        self.bound_to(vars)
    }

    /// Addresses caller-recorded handles, one per tensor in storage order.
    pub fn bound_to(&self, vars: Vec<Var>) -> Bound<'_> {
        assert_eq!(vars.len(), self.tensors.len(), "one handle per parameter");
        Bound {
            vars,
            index: &self.index,
        }
    }
}

/// Tape handles of every parameter, addressed by name.
#[derive(Debug, Clone)]
pub struct Bound<'p> {
    vars: Vec<Var>,
    index: &'p HashMap<String, usize>,
}

impl Bound<'_> {
    /// Panics on a name the model does not define; names are fixed by
    /// [`param_specs`], so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("no parameter named {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Everything a forward pass needs: the tape, the configuration, token
/// lookups and the bound parameters.
pub struct Net<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub cfg: &'a ModelConfig,
    pub lex: &'a Lexicon,
    pub w: Bound<'a>,
}

impl<'a, T: Real> Net<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        cfg: &'a ModelConfig,
        lex: &'a Lexicon,
        params: &'a ModelParams<T>,
        trainable: bool,
    ) -> Self {
        let w = params.bind(tape, trainable);
        Self { tape, cfg, lex, w }
    }

    pub fn with_bound(
        tape: &'a mut Tape<T>,
        cfg: &'a ModelConfig,
        lex: &'a Lexicon,
        w: Bound<'a>,
    ) -> Self {
        Self { tape, cfg, lex, w }
    }

    pub fn p(&self, name: &str) -> Var {
        self.w.get(name)
    }

    /// `x · W + b` for the parameter pair `{prefix}.w`, `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    pub fn zeros_row(&mut self, n: usize) -> Var {
        self.tape.constant(Tensor::zeros(&[1, n]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{DatasetHeader, GenConfig};

    pub(crate) fn header() -> DatasetHeader {
        DatasetHeader::new(GenConfig::default())
    }

    #[test]
    fn model_names_round_trip() {
        for n in Flags::MODEL_NAMES {
            assert_eq!(Flags::from_name(n).unwrap().name(), n);
        }
        assert_eq!(Flags::from_name("vanilla"), Some(Flags::default()));
        assert_eq!(
            Flags::from_name("caa+mtm"),
            Some(Flags::new(false, true, true))
        );
        assert_eq!(Flags::from_name("mac"), None);
    }

    #[test]
    fn parameter_counts_by_flags() {
        let h = header();
        let count = |name: &str| {
            let cfg = ModelConfig::new(&h, Flags::from_name(name).unwrap());
            ModelParams::<f32>::init(&cfg, 0).unwrap().num_scalars()
        };
        let base = count("vanilla");
        assert_eq!(count("mtm"), base);
        assert_eq!(count("cq"), base);
        let d = 64;
        let caa_extra = 2 * d * d + 2 * (4 * d * d + d);
        assert_eq!(count("caa"), base + caa_extra);
        assert_eq!(count("caa+mtm"), base + caa_extra);
        assert_eq!(count("cq+caa+mtm"), base + caa_extra);
        // Seed does not change the count.
        let cfg = ModelConfig::new(&h, Flags::default());
        assert_eq!(
            ModelParams::<f32>::init(&cfg, 9).unwrap().num_scalars(),
            base
        );
    }

    #[test]
    fn init_follows_the_scheme() {
        let cfg = ModelConfig::new(&header(), Flags::new(false, true, true));
        let p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let bound = (6.0f64 / 128.0).sqrt();
        assert!(p
            .get("read.mem.w")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
        assert!(p.get("write.b").unwrap().data().iter().all(|&v| v == 0.0));
        let e = p.get("enc.embed").unwrap().data();
        let var = e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64;
        assert!((var - 1.0 / 64.0).abs() < 0.1 / 64.0, "{var}");
        assert_eq!(ModelParams::<f64>::init(&cfg, 1).unwrap(), p);
        assert_ne!(ModelParams::<f64>::init(&cfg, 2).unwrap(), p);
    }

    #[test]
    fn from_named_rejects_wrong_shapes() {
        let cfg = ModelConfig::new(&header(), Flags::default());
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let mut named: Vec<_> = p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(ModelParams::from_named(&cfg, named.clone()).unwrap(), p);
        named[3].1 = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            ModelParams::from_named(&cfg, named),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn vocab_hash_tracks_content() {
        let cfg = ModelConfig::new(&header(), Flags::default());
        let mut other = cfg.clone();
        other.vocab.swap(1, 2);
        assert_ne!(cfg.vocab_hash(), other.vocab_hash());
        assert_eq!(cfg.vocab_hash().len(), 16);
    }
}
