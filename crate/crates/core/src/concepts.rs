//! Synthetic concept world: Gaussian concepts in data space, their
//! condition embeddings, and the dataset splits.

use autodiff::Array;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Batch, Conditioning};
use crate::error::{Error, Result};
use crate::io::array_serde;
use crate::rng::{stream_rng, Stream};

pub const WORLD_SCHEMA: &str = "metaunlearn.world";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Forget,
    RelatedRetain,
    UnrelatedRetain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concept {
    pub name: String,
    pub center: Vec<f64>,
    pub spread: f64,
    pub embedding: Vec<f64>,
    pub role: Role,
}

/// One concept of a world description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub name: String,
    pub center: Vec<f64>,
    pub spread: f64,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub concepts: Vec<ConceptSpec>,
    pub embed_dim: usize,
    /// Cosine between the forget and related embeddings.
    pub related_cos: f64,
    /// Upper bound on |cos| between the forget embedding and unrelated ones.
    pub max_unrelated_cos: f64,
    /// Number of perturbed copies of the forget embedding (multi-prompt attack).
    pub paraphrases: usize,
    pub paraphrase_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let c = |name: &str, x: f64, y: f64, role| ConceptSpec {
            name: name.into(),
            center: vec![x, y],
            spread: 0.3,
            role,
        };
        WorldConfig {
            concepts: vec![
                c("F", 2.0, 2.0, Role::Forget),
                c("R", 2.5, 2.5, Role::RelatedRetain),
                c("U1", -2.0, 2.0, Role::UnrelatedRetain),
                c("U2", -2.0, -2.0, Role::UnrelatedRetain),
            ],
            embed_dim: 8,
            related_cos: 0.6,
            max_unrelated_cos: 0.8,
            paraphrases: 5,
            paraphrase_noise: 0.1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::config("world.concepts", "at least one concept required"));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("world.embed_dim", "must be at least 2"));
        }
        let dim = self.concepts[0].center.len();
        let mut names: Vec<&str> = Vec::new();
        for (i, c) in self.concepts.iter().enumerate() {
            let path = format!("world.concepts[{i}]");
            if c.name.is_empty() || names.contains(&c.name.as_str()) {
                return Err(Error::config(path, format!("duplicate or empty name `{}`", c.name)));
            }
            names.push(&c.name);
            if !(c.spread > 0.0 && c.spread.is_finite()) {
                return Err(Error::config(path, "spread must be positive"));
            }
            if c.center.len() != dim || dim == 0 || c.center.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(path, "centers must share a positive dimension"));
            }
        }
        let forgets = self.concepts.iter().filter(|c| c.role == Role::Forget).count();
        if forgets != 1 {
            return Err(Error::config("world.concepts", format!("need exactly one forget concept, got {forgets}")));
        }
        if !(self.related_cos > -1.0 && self.related_cos < 1.0) {
            return Err(Error::config("world.related_cos", "must lie in (-1, 1)"));
        }
        if !(self.max_unrelated_cos > 0.0 && self.max_unrelated_cos <= 1.0) {
            return Err(Error::config("world.max_unrelated_cos", "must lie in (0, 1]"));
        }
        if self.paraphrase_noise < 0.0 || !self.paraphrase_noise.is_finite() {
            return Err(Error::config("world.paraphrase_noise", "must be non-negative"));
        }
        Ok(())
    }

    /// Builds the concept table. Embeddings are random unit vectors; the
    /// related concept is `c F + sqrt(1 - c^2) w` with `w` a unit vector
    /// orthogonal to `F`, so the cosine is exact.
    pub fn build(&self, seed: u64) -> Result<ConceptTable> {
        self.validate()?;
        let k = self.embed_dim;
        let mut rng = stream_rng(seed, Stream::World);
        let e_f = random_unit(k, &mut rng);
        let mut concepts = Vec::with_capacity(self.concepts.len());
        for spec in &self.concepts {
            let embedding = match spec.role {
                Role::Forget => e_f.clone(),
                Role::RelatedRetain => {
                    let w = orthogonal_unit(&e_f, &mut rng);
                    let s = (1.0 - self.related_cos * self.related_cos).sqrt();
                    let v: Vec<f64> = e_f.iter().zip(&w).map(|(a, b)| self.related_cos * a + s * b).collect();
                    normalized(v)
                }
                Role::UnrelatedRetain => loop {
                    let u = random_unit(k, &mut rng);
                    if cosine(&u, &e_f).abs() < self.max_unrelated_cos {
                        break u;
                    }
                },
            };
            concepts.push(Concept {
                name: spec.name.clone(),
                center: spec.center.clone(),
                spread: spec.spread,
                embedding,
                role: spec.role,
            });
        }
        let paraphrases = (0..self.paraphrases)
            .map(|_| {
                let v: Vec<f64> = e_f
                    .iter()
                    .map(|a| a + self.paraphrase_noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                normalized(v)
            })
            .collect();
        let style = random_unit(k, &mut rng);
        Ok(ConceptTable { concepts, null: vec![0.0; k], style, paraphrases })
    }
}

fn random_unit(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        if norm(&v) > 1e-6 {
            return normalized(v);
        }
    }
}

fn orthogonal_unit(e: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let w = random_unit(e.len(), rng);
        let d = dot(&w, e);
        let v: Vec<f64> = w.iter().zip(e).map(|(a, b)| a - d * b).collect();
        if norm(&v) > 1e-3 {
            return normalized(v);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Named concepts plus the null context (zeros) and a shared style token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptTable {
    concepts: Vec<Concept>,
    null: Vec<f64>,
    style: Vec<f64>,
    paraphrases: Vec<Vec<f64>>,
}

impl ConceptTable {
    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn embed_dim(&self) -> usize {
        self.null.len()
    }

    pub fn data_dim(&self) -> usize {
        self.concepts[0].center.len()
    }

    pub fn get(&self, name: &str) -> Result<&Concept> {
        self.concepts
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    pub fn null_embedding(&self) -> &[f64] {
        &self.null
    }

    pub fn style_embedding(&self) -> &[f64] {
        &self.style
    }

    pub fn paraphrases(&self) -> &[Vec<f64>] {
        &self.paraphrases
    }

    pub fn forget(&self) -> &Concept {
        self.concepts.iter().find(|c| c.role == Role::Forget).expect("table has a forget concept")
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &Concept> {
        self.concepts.iter().filter(move |c| c.role == role)
    }

    pub fn retained(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.iter().filter(|c| c.role != Role::Forget)
    }

    /// Condition tokens for `rows` copies of one concept embedding.
    pub fn condition(&self, embedding: &[f64], rows: usize, tokens: usize) -> Conditioning {
        let mut t = vec![Array::row(embedding.to_vec()).broadcast_rows(rows)];
        if tokens == 2 {
            t.push(Array::row(self.style.clone()).broadcast_rows(rows));
        }
        Conditioning { tokens: t }
    }

    /// Parses a serialized world and checks its internal consistency.
    pub fn parse(text: &str) -> Result<(ConceptTable, Option<DatasetBundle>)> {
        let f: WorldFile = serde_json::from_str(text).map_err(|e| Error::format("world", e))?;
        if f.schema != WORLD_SCHEMA || f.version != crate::io::FORMAT_VERSION {
            return Err(Error::format("world", format!("schema `{}` v{}", f.schema, f.version)));
        }
        f.table.check()?;
        if let Some(b) = &f.bundle {
            b.check(&f.table)?;
        }
        Ok((f.table, f.bundle))
    }

    pub fn to_json(&self, bundle: Option<&DatasetBundle>) -> String {
        let f = WorldFile {
            schema: WORLD_SCHEMA.into(),
            version: crate::io::FORMAT_VERSION,
            table: self.clone(),
            bundle: bundle.cloned(),
        };
        let mut s = serde_json::to_string_pretty(&f).expect("world serializes");
        s.push('\n');
        s
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::format("world", m));
        if self.concepts.is_empty() {
            return bad("no concepts".into());
        }
        let (k, d) = (self.null.len(), self.concepts[0].center.len());
        if k == 0 || d == 0 {
            return bad("zero dimension".into());
        }
        if self.null.iter().any(|v| *v != 0.0) {
            return bad("null embedding must be zero".into());
        }
        if self.style.len() != k || self.paraphrases.iter().any(|p| p.len() != k) {
            return bad("token dimension mismatch".into());
        }
        let mut names = Vec::new();
        for c in &self.concepts {
            if names.contains(&&c.name) {
                return bad(format!("duplicate concept `{}`", c.name));
            }
            names.push(&c.name);
            if c.embedding.len() != k || c.center.len() != d || !(c.spread > 0.0) {
                return bad(format!("concept `{}` has inconsistent shape", c.name));
            }
            let all = c.center.iter().chain(&c.embedding).chain(std::iter::once(&c.spread));
            if all.into_iter().any(|v| !v.is_finite()) {
                return bad(format!("concept `{}` is not finite", c.name));
            }
        }
        if self.concepts.iter().filter(|c| c.role == Role::Forget).count() != 1 {
            return bad("need exactly one forget concept".into());
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    schema: String,
    version: u32,
    table: ConceptTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bundle: Option<DatasetBundle>,
}

pub fn default_world(seed: u64) -> ConceptTable {
    WorldConfig::default().build(seed).expect("default world is valid")
}

/// Argmin of distance to concept centers; ties go to the smaller name.
pub fn nearest_concept<'a>(table: &'a ConceptTable, x: &[f64]) -> &'a str {
    let mut best: Option<(&Concept, f64)> = None;
    for c in table.concepts() {
        let d: f64 = c.center.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        best = match best {
            None => Some((c, d)),
            Some((b, bd)) if d < bd || (d == bd && c.name < b.name) => Some((c, d)),
            keep => keep,
        };
    }
    &best.expect("table is non-empty").0.name
}

/// Points with their concept labels and condition embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledSet {
    #[serde(with = "array_serde")]
    pub x: Array,
    pub concepts: Vec<String>,
    #[serde(with = "array_serde")]
    pub emb: Array,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn concat(parts: &[LabeledSet]) -> LabeledSet {
        let rows: usize = parts.iter().map(|p| p.len()).sum();
        let (d, k) = (parts[0].x.cols(), parts[0].emb.cols());
        let mut x = Vec::with_capacity(rows * d);
        let mut emb = Vec::with_capacity(rows * k);
        let mut concepts = Vec::with_capacity(rows);
        for p in parts {
            x.extend_from_slice(p.x.data());
            emb.extend_from_slice(p.emb.data());
            concepts.extend(p.concepts.iter().cloned());
        }
        LabeledSet { x: Array::new(rows, d, x), concepts, emb: Array::new(rows, k, emb) }
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        let (d, k) = (self.x.cols(), self.emb.cols());
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut emb = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            x.extend_from_slice(self.x.row_slice(i));
            emb.extend_from_slice(self.emb.row_slice(i));
        }
        LabeledSet {
            x: Array::new(idx.len(), d, x),
            concepts: idx.iter().map(|&i| self.concepts[i].clone()).collect(),
            emb: Array::new(idx.len(), k, emb),
        }
    }

    /// `size` rows drawn uniformly with replacement.
    pub fn minibatch(&self, size: usize, rng: &mut impl Rng) -> LabeledSet {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.select(&idx)
    }

    pub fn batch(&self, table: &ConceptTable, tokens: usize) -> Batch {
        let mut t = vec![self.emb.clone()];
        if tokens == 2 {
            t.push(Array::row(table.style_embedding().to_vec()).broadcast_rows(self.len()));
        }
        Batch { x: self.x.clone(), cond: Conditioning { tokens: t } }
    }

    /// Same points with every embedding replaced (null context, paraphrases).
    pub fn relabeled(&self, embeddings: &[Vec<f64>]) -> LabeledSet {
        let k = self.emb.cols();
        let mut emb = Vec::with_capacity(self.len() * k);
        for i in 0..self.len() {
            emb.extend_from_slice(&embeddings[i % embeddings.len()]);
        }
        LabeledSet { x: self.x.clone(), concepts: self.concepts.clone(), emb: Array::new(self.len(), k, emb) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub forget: usize,
    /// Per retained concept.
    pub retain: usize,
    pub ft_pool: usize,
    /// Per unrelated concept.
    pub benign: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { forget: 512, retain: 512, ft_pool: 256, benign: 256 }
    }
}

impl SplitSizes {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("world.sizes.forget", self.forget),
            ("world.sizes.retain", self.retain),
            ("world.sizes.ft_pool", self.ft_pool),
            ("world.sizes.benign", self.benign),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        Ok(())
    }
}

/// The four collections the pipeline draws on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBundle {
    pub forget: LabeledSet,
    pub retain: LabeledSet,
    pub ft_pool: LabeledSet,
    pub benign: LabeledSet,
}

impl DatasetBundle {
    /// Everything the pretrained model is fit on.
    pub fn train(&self) -> LabeledSet {
        LabeledSet::concat(&[self.forget.clone(), self.retain.clone()])
    }

    /// Rows of the retain set belonging to one concept.
    pub fn retain_of(&self, name: &str) -> LabeledSet {
        let idx: Vec<usize> = (0..self.retain.len()).filter(|&i| self.retain.concepts[i] == name).collect();
        self.retain.select(&idx)
    }

    fn check(&self, table: &ConceptTable) -> Result<()> {
        let forget = &table.forget().name;
        for (what, set) in [
            ("forget", &self.forget),
            ("retain", &self.retain),
            ("ft_pool", &self.ft_pool),
            ("benign", &self.benign),
        ] {
            if set.x.cols() != table.data_dim()
                || set.emb.cols() != table.embed_dim()
                || set.concepts.len() != set.len()
                || set.emb.rows() != set.len()
            {
                return Err(Error::format("world", format!("{what} split has inconsistent shape")));
            }
            for c in &set.concepts {
                table.get(c).map_err(|_| Error::format("world", format!("{what} names unknown concept `{c}`")))?;
            }
        }
        if self.ft_pool.concepts.iter().any(|c| c != forget) {
            return Err(Error::format("world", "ft_pool outside the forget concept"));
        }
        if self.benign.concepts.iter().any(|c| c == forget) {
            return Err(Error::format("world", "benign split contains the forget concept"));
        }
        Ok(())
    }
}

/// Gaussian draws from one concept.
pub fn draw_concept(concept: &Concept, n: usize, rng: &mut impl Rng) -> LabeledSet {
    let d = concept.center.len();
    let mut x = Vec::with_capacity(n * d);
    for _ in 0..n {
        for c in &concept.center {
            x.push(c + concept.spread * rng.sample::<f64, _>(StandardNormal));
        }
    }
    LabeledSet {
        x: Array::new(n, d, x),
        concepts: vec![concept.name.clone(); n],
        emb: Array::row(concept.embedding.clone()).broadcast_rows(n),
    }
}

/// Draws every split; the retain set covers all non-forget concepts, the
/// finetune pool is a fresh draw of the forget concept and the benign set a
/// fresh draw of the unrelated ones.
pub fn draw_split(table: &ConceptTable, sizes: &SplitSizes, seed: u64) -> Result<DatasetBundle> {
    sizes.validate()?;
    let mut rng = stream_rng(seed, Stream::Data);
    let f = table.forget();
    let forget = draw_concept(f, sizes.forget, &mut rng);
    let retained: Vec<&Concept> = table.retained().collect();
    if retained.is_empty() {
        return Err(Error::config("world.concepts", "no retained concepts"));
    }
    let retain = LabeledSet::concat(&retained.iter().map(|c| draw_concept(c, sizes.retain, &mut rng)).collect::<Vec<_>>());
    let ft_pool = draw_concept(f, sizes.ft_pool, &mut rng);
    let unrelated: Vec<&Concept> = table.with_role(Role::UnrelatedRetain).collect();
    if unrelated.is_empty() {
        return Err(Error::config("world.concepts", "benign split needs an unrelated concept"));
    }
    let benign = LabeledSet::concat(&unrelated.iter().map(|c| draw_concept(c, sizes.benign, &mut rng)).collect::<Vec<_>>());
    Ok(DatasetBundle { forget, retain, ft_pool, benign })
}
