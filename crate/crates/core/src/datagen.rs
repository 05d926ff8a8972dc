//! Synthetic cross-modal tracking datasets.
//!
//! Each datapoint follows the balanced construction: two categories, three
//! entities per category, three attributes combined into the pairs
//! `{a1,a2}`, `{a1,a3}`, `{a2,a3}`. Within a category every entity receives
//! a different pair and is shown twice, once with each attribute of its pair,
//! giving twelve exposures. The query names a category and one attribute pair,
//! which identifies exactly one entity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::scalar::Scalar;

pub const EXPOSURES: usize = 12;
pub const CANDIDATES: usize = 6;
pub const ENTITIES_PER_CATEGORY: usize = 3;
pub const ATTRIBUTES_PER_DATAPOINT: usize = 3;
/// Entities carrying a given attribute: two pairs per category contain it.
pub const ENTITIES_PER_ATTRIBUTE: usize = 4;
/// Entities carrying a given attribute pair: one per category.
pub const ENTITIES_PER_ATTRIBUTE_PAIR: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exposure<T> {
    pub image: Vector<T>,
    pub attribute: Vector<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query<T> {
    pub noun: Vector<T>,
    pub attrs: [Vector<T>; 2],
}

/// Hidden labels. Never read by a model; used for validation and error
/// analysis, and written to disk only on request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    /// Local entity (0..6) shown at each exposure.
    pub exposure_entity: Vec<usize>,
    /// Attribute id shown at each exposure.
    pub exposure_attribute: Vec<usize>,
    /// Category id of each local entity.
    pub entity_category: Vec<usize>,
    /// World-level name of each local entity.
    pub entity_names: Vec<String>,
    pub category_names: BTreeMap<usize, String>,
    /// Local entity shown in each candidate slot.
    pub candidate_entity: Vec<usize>,
    pub query_category: usize,
    pub query_attributes: [usize; 2],
    /// `exposure_order[k]` is the canonical index of the exposure shown at step `k`.
    pub exposure_order: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Datapoint<T> {
    pub exposures: Vec<Exposure<T>>,
    pub query: Query<T>,
    pub candidates: Vec<Vector<T>>,
    pub gold: usize,
    #[serde(rename = "debug", default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Labels>,
}

impl<T: Scalar> Datapoint<T> {
    pub fn image_dim(&self) -> usize {
        self.candidates.first().map_or(0, Vector::dim)
    }

    pub fn attribute_dim(&self) -> usize {
        self.query.attrs[0].dim()
    }

    pub fn noun_dim(&self) -> usize {
        self.query.noun.dim()
    }

    pub fn cast<U: Scalar>(&self) -> Datapoint<U> {
        Datapoint {
            exposures: self
                .exposures
                .iter()
                .map(|e| Exposure {
                    image: e.image.cast(),
                    attribute: e.attribute.cast(),
                })
                .collect(),
            query: Query {
                noun: self.query.noun.cast(),
                attrs: [self.query.attrs[0].cast(), self.query.attrs[1].cast()],
            },
            candidates: self.candidates.iter().map(Vector::cast).collect(),
            gold: self.gold,
            labels: self.labels.clone(),
        }
    }

    /// Structural checks every model relies on: non-empty sequences, gold in
    /// range, consistent dimensions. Does not enforce the balanced design, so
    /// small gradient-check instances pass.
    pub fn check_shape(&self) -> Result<()> {
        if self.exposures.is_empty() {
            return Err(Error::Malformed("exposures: empty".into()));
        }
        if self.candidates.is_empty() {
            return Err(Error::Malformed("candidates: empty".into()));
        }
        if self.gold >= self.candidates.len() {
            return Err(Error::Malformed(format!(
                "gold: index {} out of range for {} candidates",
                self.gold,
                self.candidates.len()
            )));
        }
        let v = self.exposures[0].image.dim();
        let t = self.exposures[0].attribute.dim();
        for (i, e) in self.exposures.iter().enumerate() {
            if e.image.dim() != v {
                return Err(Error::Malformed(format!("exposures[{i}].image: dim {} != {v}", e.image.dim())));
            }
            if e.attribute.dim() != t {
                return Err(Error::Malformed(format!(
                    "exposures[{i}].attribute: dim {} != {t}",
                    e.attribute.dim()
                )));
            }
        }
        for (j, c) in self.candidates.iter().enumerate() {
            if c.dim() != v {
                return Err(Error::Malformed(format!("candidates[{j}]: dim {} != {v}", c.dim())));
            }
        }
        for (k, a) in self.query.attrs.iter().enumerate() {
            if a.dim() != t {
                return Err(Error::Malformed(format!("query.attrs[{k}]: dim {} != {t}", a.dim())));
            }
        }
        if self.query.noun.dim() == 0 {
            return Err(Error::Malformed("query.noun: empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub image_dim: usize,
    pub attribute_dim: usize,
    pub noun_dim: usize,
    pub n_categories: usize,
    pub entities_per_category: usize,
    pub n_attributes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_dim: 64,
            attribute_dim: 32,
            noun_dim: 32,
            n_categories: 20,
            entities_per_category: 10,
            n_attributes: 12,
            noise: 0.6,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub prototype: Vector<f64>,
    pub noun: Vector<f64>,
    pub entities: Vec<(String, Vector<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingWorld {
    pub image_dim: usize,
    pub attribute_dim: usize,
    pub noun_dim: usize,
    pub categories: Vec<Category>,
    pub attributes: Vec<(String, Vector<f64>)>,
    pub noise: f64,
    pub seed: u64,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut x);
    x
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

pub fn make_world(cfg: &WorldConfig) -> Result<EmbeddingWorld> {
    if cfg.n_categories < 2 {
        return Err(Error::Config("n_categories must be >= 2".into()));
    }
    if cfg.entities_per_category < ENTITIES_PER_CATEGORY {
        return Err(Error::Config("entities_per_category must be >= 3".into()));
    }
    if cfg.n_attributes < ATTRIBUTES_PER_DATAPOINT {
        return Err(Error::Config("n_attributes must be >= 3".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be finite and >= 0, got {}", cfg.noise)));
    }
    if cfg.image_dim == 0 || cfg.attribute_dim == 0 || cfg.noun_dim == 0 {
        return Err(Error::Config("dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let categories = (0..cfg.n_categories)
        .map(|c| {
            let prototype = unit_gaussian(&mut rng, cfg.image_dim);
            let noun = unit_gaussian(&mut rng, cfg.noun_dim);
            let entities = (0..cfg.entities_per_category)
                .map(|e| {
                    let mut img: Vec<f64> = prototype
                        .iter()
                        .map(|&p| p + cfg.noise * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    normalize(&mut img);
                    (format!("cat{c}/ent{e}"), Vector::from(img))
                })
                .collect();
            Category {
                name: format!("cat{c}"),
                prototype: prototype.into(),
                noun: noun.into(),
                entities,
            }
        })
        .collect();
    let attributes = (0..cfg.n_attributes)
        .map(|a| (format!("attr{a}"), Vector::from(unit_gaussian(&mut rng, cfg.attribute_dim))))
        .collect();
    Ok(EmbeddingWorld {
        image_dim: cfg.image_dim,
        attribute_dim: cfg.attribute_dim,
        noun_dim: cfg.noun_dim,
        categories,
        attributes,
        noise: cfg.noise,
        seed: cfg.seed,
    })
}

impl EmbeddingWorld {
    /// Builds a world from precomputed vectors. Image names take the form
    /// `category/entity`; every category needs a noun vector under its name.
    pub fn from_vectors(
        images: &BTreeMap<String, Vector<f64>>,
        nouns: &BTreeMap<String, Vector<f64>>,
        attributes: &BTreeMap<String, Vector<f64>>,
    ) -> Result<Self> {
        let mut by_cat: BTreeMap<String, Vec<(String, Vector<f64>)>> = BTreeMap::new();
        for (name, vec) in images {
            let (cat, _) = name
                .split_once('/')
                .ok_or_else(|| Error::Config(format!("image name {name:?} is not category/entity")))?;
            by_cat.entry(cat.to_string()).or_default().push((name.clone(), vec.clone()));
        }
        let mut categories = Vec::new();
        for (cat, entities) in by_cat {
            let noun = nouns
                .get(&cat)
                .ok_or_else(|| Error::Config(format!("no noun vector for category {cat:?}")))?;
            let mut prototype = vec![0.0; entities[0].1.dim()];
            for (_, e) in &entities {
                crate::numerics::axpy(1.0 / entities.len() as f64, e.as_slice(), &mut prototype);
            }
            categories.push(Category {
                name: cat,
                prototype: prototype.into(),
                noun: noun.clone(),
                entities,
            });
        }
        let world = Self {
            image_dim: images.values().next().map_or(0, Vector::dim),
            attribute_dim: attributes.values().next().map_or(0, Vector::dim),
            noun_dim: nouns.values().next().map_or(0, Vector::dim),
            categories,
            attributes: attributes.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            noise: f64::NAN,
            seed: 0,
        };
        world.check_inventory()?;
        Ok(world)
    }

    fn check_inventory(&self) -> Result<()> {
        let usable = self
            .categories
            .iter()
            .filter(|c| c.entities.len() >= ENTITIES_PER_CATEGORY)
            .count();
        if usable < 2 {
            return Err(Error::Config(format!(
                "world needs >= 2 categories with >= {ENTITIES_PER_CATEGORY} entities, has {usable}"
            )));
        }
        if self.attributes.len() < ATTRIBUTES_PER_DATAPOINT {
            return Err(Error::Config(format!(
                "world needs >= {ATTRIBUTES_PER_DATAPOINT} attributes, has {}",
                self.attributes.len()
            )));
        }
        Ok(())
    }
}

/// Draws one datapoint following the balanced construction.
pub fn generate_datapoint<R: Rng + ?Sized>(world: &EmbeddingWorld, rng: &mut R) -> Result<Datapoint<f64>> {
    world.check_inventory()?;
    let eligible: Vec<usize> = (0..world.categories.len())
        .filter(|&c| world.categories[c].entities.len() >= ENTITIES_PER_CATEGORY)
        .collect();
    let cats: Vec<usize> = eligible.choose_multiple(rng, 2).copied().collect();
    let attrs: Vec<usize> =
        rand::seq::index::sample(rng, world.attributes.len(), ATTRIBUTES_PER_DATAPOINT).into_vec();
    let pairs = [[attrs[0], attrs[1]], [attrs[0], attrs[2]], [attrs[1], attrs[2]]];

    // Local entity ids: 0..3 for the first category, 3..6 for the second.
    let mut entity_world = Vec::with_capacity(CANDIDATES);
    let mut entity_category = Vec::with_capacity(CANDIDATES);
    let mut entity_pair = Vec::with_capacity(CANDIDATES);
    for &c in &cats {
        let picks = rand::seq::index::sample(rng, world.categories[c].entities.len(), ENTITIES_PER_CATEGORY);
        let mut assignment = [0usize, 1, 2];
        assignment.shuffle(rng);
        for (slot, e) in picks.into_iter().enumerate() {
            entity_world.push((c, e));
            entity_category.push(c);
            entity_pair.push(pairs[assignment[slot]]);
        }
    }

    let mut canonical = Vec::with_capacity(EXPOSURES);
    for (local, pair) in entity_pair.iter().enumerate() {
        for &a in pair {
            canonical.push((local, a));
        }
    }
    let mut order: Vec<usize> = (0..EXPOSURES).collect();
    order.shuffle(rng);

    let image_of = |local: usize| {
        let (c, e) = entity_world[local];
        world.categories[c].entities[e].1.clone()
    };

    let exposures = order
        .iter()
        .map(|&k| {
            let (local, a) = canonical[k];
            Exposure {
                image: image_of(local),
                attribute: world.attributes[a].1.clone(),
            }
        })
        .collect();

    let query_cat_slot = rng.random_range(0..2);
    let query_pair = pairs[rng.random_range(0..3)];
    let target = (0..CANDIDATES)
        .find(|&l| entity_category[l] == cats[query_cat_slot] && entity_pair[l] == query_pair)
        .expect("balanced design has one entity per (category, pair)");
    let mut query_attributes = query_pair;
    if rng.random_bool(0.5) {
        query_attributes.swap(0, 1);
    }

    let mut candidate_entity: Vec<usize> = (0..CANDIDATES).collect();
    candidate_entity.shuffle(rng);
    let gold = candidate_entity.iter().position(|&l| l == target).expect("target is a candidate");

    let query_category = cats[query_cat_slot];
    Ok(Datapoint {
        exposures,
        query: Query {
            noun: world.categories[query_category].noun.clone(),
            attrs: [
                world.attributes[query_attributes[0]].1.clone(),
                world.attributes[query_attributes[1]].1.clone(),
            ],
        },
        candidates: candidate_entity.iter().map(|&l| image_of(l)).collect(),
        gold,
        labels: Some(Labels {
            exposure_entity: order.iter().map(|&k| canonical[k].0).collect(),
            exposure_attribute: order.iter().map(|&k| canonical[k].1).collect(),
            entity_category: entity_category.clone(),
            entity_names: entity_world
                .iter()
                .map(|&(c, e)| world.categories[c].entities[e].0.clone())
                .collect(),
            category_names: cats.iter().map(|&c| (c, world.categories[c].name.clone())).collect(),
            candidate_entity,
            query_category,
            query_attributes,
            exposure_order: order,
        }),
    })
}

/// Every violated invariant, one line each. Empty means valid.
pub fn validate_datapoint<T: Scalar>(dp: &Datapoint<T>) -> Vec<String> {
    let mut report = Vec::new();
    if dp.exposures.len() != EXPOSURES {
        report.push(format!("{} exposures (expected {EXPOSURES})", dp.exposures.len()));
    }
    if dp.candidates.len() != CANDIDATES {
        report.push(format!("{} candidates (expected {CANDIDATES})", dp.candidates.len()));
    }
    if dp.gold >= dp.candidates.len() {
        report.push(format!("gold {} out of range", dp.gold));
        return report;
    }
    if let Err(e) = dp.check_shape() {
        report.push(e.to_string());
        return report;
    }

    // Entities are identified by their image, attributes by their vector.
    let images = Interner::new(dp.exposures.iter().map(|e| e.image.as_slice()));
    let attrs = Interner::new(dp.exposures.iter().map(|e| e.attribute.as_slice()));
    let mut entity_attrs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); images.len()];
    let mut entity_count = vec![0usize; images.len()];
    for (k, e) in dp.exposures.iter().enumerate() {
        let ent = images.id(e.image.as_slice()).expect("interned");
        let att = attrs.id(e.attribute.as_slice()).expect("interned");
        entity_count[ent] += 1;
        if !entity_attrs[ent].insert(att) {
            report.push(format!("exposure {k}: entity {ent} repeats an attribute"));
        }
    }
    if images.len() != CANDIDATES {
        report.push(format!("{} distinct entities (expected {CANDIDATES})", images.len()));
    }
    for (ent, &n) in entity_count.iter().enumerate() {
        if n != 2 {
            report.push(format!("entity {ent} appears in {n} exposures (expected 2)"));
        }
    }
    if attrs.len() != ATTRIBUTES_PER_DATAPOINT {
        report.push(format!("{} distinct attributes (expected {ATTRIBUTES_PER_DATAPOINT})", attrs.len()));
    }
    for a in 0..attrs.len() {
        let n = entity_attrs.iter().filter(|s| s.contains(&a)).count();
        if n != ENTITIES_PER_ATTRIBUTE {
            report.push(format!("attribute {a} carried by {n} entities (expected {ENTITIES_PER_ATTRIBUTE})"));
        }
        for b in a + 1..attrs.len() {
            let n = entity_attrs.iter().filter(|s| s.contains(&a) && s.contains(&b)).count();
            if n != ENTITIES_PER_ATTRIBUTE_PAIR {
                report.push(format!(
                    "attribute pair ({a},{b}) carried by {n} entities (expected {ENTITIES_PER_ATTRIBUTE_PAIR})"
                ));
            }
        }
    }

    let mut slot_entity = Vec::with_capacity(dp.candidates.len());
    for (j, c) in dp.candidates.iter().enumerate() {
        match images.id(c.as_slice()) {
            Some(ent) => slot_entity.push(ent),
            None => {
                report.push(format!("candidate {j} is not an exposed entity"));
                return report;
            }
        }
    }
    if slot_entity.iter().collect::<BTreeSet<_>>().len() != slot_entity.len() {
        report.push("candidates repeat an entity".into());
    }

    let q_attrs: Vec<Option<usize>> = dp.query.attrs.iter().map(|a| attrs.id(a.as_slice())).collect();
    let (qa, qb) = match (q_attrs[0], q_attrs[1]) {
        (Some(a), Some(b)) if a != b => (a, b),
        _ => {
            report.push("query attributes are not two distinct exposed attributes".into());
            return report;
        }
    };
    let gold_entity = slot_entity[dp.gold];
    if !(entity_attrs[gold_entity].contains(&qa) && entity_attrs[gold_entity].contains(&qb)) {
        report.push(format!("gold mismatch: candidate {} lacks a query attribute", dp.gold));
    }

    let Some(labels) = &dp.labels else {
        return report;
    };
    // Local label ids must agree with the vector identities.
    let mut local_to_image = BTreeMap::new();
    for (k, e) in dp.exposures.iter().enumerate() {
        let ent = images.id(e.image.as_slice()).expect("interned");
        match labels.exposure_entity.get(k) {
            Some(&l) => {
                if *local_to_image.entry(l).or_insert(ent) != ent {
                    report.push(format!("labels: exposure {k} entity label disagrees with image"));
                }
            }
            None => report.push(format!("labels: no entity label for exposure {k}")),
        }
    }
    if labels.entity_category.len() != CANDIDATES {
        report.push("labels: entity_category must list 6 entities".into());
        return report;
    }
    let mut per_category: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in &labels.entity_category {
        *per_category.entry(c).or_default() += 1;
    }
    if per_category.len() != 2 || per_category.values().any(|&n| n != ENTITIES_PER_CATEGORY) {
        report.push(format!("category balance violated: {per_category:?}"));
    }
    let matches: Vec<usize> = (0..CANDIDATES)
        .filter(|&l| {
            let Some(&img) = local_to_image.get(&l) else { return false };
            labels.entity_category[l] == labels.query_category
                && entity_attrs[img].contains(&qa)
                && entity_attrs[img].contains(&qb)
        })
        .collect();
    if matches.len() != 1 {
        report.push(format!("unique-match violated: {} entities match the query", matches.len()));
    } else if local_to_image.get(&matches[0]) != Some(&gold_entity) {
        report.push(format!("unique-match/gold mismatch: gold {} is not the matching entity", dp.gold));
    }
    report
}

/// Bitwise identity classes of vectors.
struct Interner<'a, T> {
    seen: Vec<&'a [T]>,
}

impl<'a, T: Scalar> Interner<'a, T> {
    fn new(items: impl Iterator<Item = &'a [T]>) -> Self {
        let mut seen: Vec<&'a [T]> = Vec::new();
        for x in items {
            if !seen.iter().any(|s| same_bits(s, x)) {
                seen.push(x);
            }
        }
        Self { seen }
    }

    fn id(&self, x: &[T]) -> Option<usize> {
        self.seen.iter().position(|s| same_bits(s, x))
    }

    fn len(&self) -> usize {
        self.seen.len()
    }
}

fn same_bits<T: Scalar>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 4000,
            val: 500,
            test: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Datapoint<f64>>,
    pub val: Vec<Datapoint<f64>>,
    pub test: Vec<Datapoint<f64>>,
}

/// Counter-based seed for datapoint `index` of stream `stream`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(master) ^ stream) ^ index)
}

pub fn generate_split(world: &EmbeddingWorld, n: usize, seed: u64, stream: u64) -> Result<Vec<Datapoint<f64>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, i as u64));
            generate_datapoint(world, &mut rng)
        })
        .collect()
}

pub fn generate_dataset(world: &EmbeddingWorld, sizes: SplitSizes, seed: u64) -> Result<Dataset> {
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::Config("split sizes must be >= 1".into()));
    }
    Ok(Dataset {
        train: generate_split(world, sizes.train, seed, 0)?,
        val: generate_split(world, sizes.val, seed, 1)?,
        test: generate_split(world, sizes.test, seed, 2)?,
    })
}

impl Dataset {
    pub const SPLITS: [&'static str; 3] = ["train", "val", "test"];

    /// `dir/{train,val,test}.jsonl`
    pub fn write(&self, dir: &Path, debug: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, split) in Self::SPLITS.iter().zip([&self.train, &self.val, &self.test]) {
            write_jsonl(&dir.join(format!("{name}.jsonl")), split, debug)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let split = |name: &str| read_jsonl(&dir.join(format!("{name}.jsonl")));
        Ok(Self {
            train: split("train")?,
            val: split("val")?,
            test: split("test")?,
        })
    }
}

/// Writes one datapoint per line. Labels are written only when `debug` is set.
pub fn write_jsonl<T: Scalar + Serialize>(path: &Path, data: &[Datapoint<T>], debug: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for dp in data {
        if debug || dp.labels.is_none() {
            serde_json::to_writer(&mut w, dp)?;
        } else {
            let stripped = Datapoint {
                labels: None,
                ..dp.clone()
            };
            serde_json::to_writer(&mut w, &stripped)?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T>(path: &Path) -> Result<Vec<Datapoint<T>>>
where
    T: Scalar + for<'de> Deserialize<'de>,
{
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let dp: Datapoint<T> = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(dp);
    }
    Ok(out)
}

/// Reads `name v1 v2 ...` lines into a name-keyed map.
pub fn load_vectors(path: &Path) -> Result<BTreeMap<String, Vector<f64>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut fields = line.split_whitespace();
        let Some(name) = fields.next() else { continue };
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("{f:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(parse_err(format!("{name:?} has no components")));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(format!("{name:?} has {} components, expected {d}", values.len())))
            }
            _ => {}
        }
        if out.insert(name.to_string(), Vector::from(values)).is_some() {
            return Err(parse_err(format!("duplicate name {name:?}")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world(noise: f64, seed: u64) -> EmbeddingWorld {
        make_world(&WorldConfig {
            image_dim: 16,
            attribute_dim: 8,
            noun_dim: 8,
            n_categories: 5,
            entities_per_category: 4,
            n_attributes: 6,
            noise,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn world_is_deterministic_and_normalized() {
        let a = small_world(0.5, 7);
        assert_eq!(a, small_world(0.5, 7));
        assert_ne!(a, small_world(0.5, 8));
        let norms = a
            .categories
            .iter()
            .flat_map(|c| {
                std::iter::once(c.prototype.norm())
                    .chain(std::iter::once(c.noun.norm()))
                    .chain(c.entities.iter().map(|e| e.1.norm()))
            })
            .chain(a.attributes.iter().map(|a| a.1.norm()));
        for n in norms {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_collapses_entities() {
        let w = small_world(0.0, 3);
        for c in &w.categories {
            for e in &c.entities {
                assert_eq!(e.1, c.entities[0].1);
            }
        }
    }

    #[test]
    fn world_bounds() {
        let base = WorldConfig::default();
        for bad in [
            WorldConfig { n_categories: 1, ..base.clone() },
            WorldConfig { entities_per_category: 2, ..base.clone() },
            WorldConfig { n_attributes: 2, ..base.clone() },
            WorldConfig { noise: -0.1, ..base.clone() },
        ] {
            assert!(make_world(&bad).is_err());
        }
    }

    #[test]
    fn generated_datapoints_validate() {
        let w = small_world(0.5, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let dp = generate_datapoint(&w, &mut rng).unwrap();
            assert_eq!(validate_datapoint(&dp), Vec::<String>::new());
        }
    }

    #[test]
    fn deleted_exposure_is_flagged() {
        let w = small_world(0.5, 11);
        let mut dp = generate_datapoint(&w, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        dp.exposures.pop();
        dp.labels = None;
        let report = validate_datapoint(&dp);
        assert!(report.iter().any(|l| l.contains("11 exposures")), "{report:?}");
    }

    #[test]
    fn confounder_gold_is_flagged() {
        let w = small_world(0.5, 11);
        let dp = generate_datapoint(&w, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let labels = dp.labels.clone().unwrap();
        // Other-category entity carrying both query attributes.
        let target = labels.candidate_entity[dp.gold];
        let confounder = (0..CANDIDATES)
            .find(|&l| {
                labels.entity_category[l] != labels.query_category
                    && labels.exposure_entity.iter().zip(&labels.exposure_attribute).filter(|(&e, a)| e == l && labels.query_attributes.contains(a)).count() == 2
            })
            .unwrap();
        assert_ne!(confounder, target);
        let mut bad = dp.clone();
        bad.gold = labels.candidate_entity.iter().position(|&l| l == confounder).unwrap();
        let report = validate_datapoint(&bad);
        assert!(report.iter().any(|l| l.contains("unique-match")), "{report:?}");
    }

    #[test]
    fn dataset_is_deterministic() {
        let w = small_world(0.5, 2);
        let sizes = SplitSizes { train: 20, val: 5, test: 7 };
        let a = generate_dataset(&w, sizes, 9).unwrap();
        assert_eq!(a.train.len(), 20);
        assert_eq!(a.val.len(), 5);
        assert_eq!(a.test.len(), 7);
        assert_eq!(a, generate_dataset(&w, sizes, 9).unwrap());
        assert_ne!(a.train[0], a.val[0]);
        assert!(generate_dataset(&w, SplitSizes { train: 0, ..sizes }, 9).is_err());
    }

    #[test]
    fn jsonl_roundtrip_and_debug_gate() {
        let w = small_world(0.5, 2);
        let data = generate_split(&w, 4, 1, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&p, &data, true).unwrap();
        let back: Vec<Datapoint<f64>> = read_jsonl(&p).unwrap();
        assert_eq!(back, data);
        write_jsonl(&p, &data, false).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(!text.contains("debug"));
        let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["exposures", "query", "candidates", "gold"] {
            assert!(line.get(key).is_some(), "missing {key}");
        }
        assert!(line["query"].get("noun").is_some() && line["query"]["attrs"].as_array().unwrap().len() == 2);
        assert!(line["exposures"][0].get("image").is_some());
    }

    #[test]
    fn load_vectors_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        std::fs::write(&p, "a 1 0\nb 0 1\n").unwrap();
        let m = load_vectors(&p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m["a"], Vector::from_f64(&[1.0, 0.0]));

        let mut f = File::create(&p).unwrap();
        writeln!(f, "a 1 0\nb 0 1 2").unwrap();
        let err = load_vectors(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        std::fs::write(&p, "a 1 0\na 0 1\n").unwrap();
        assert!(matches!(load_vectors(&p).unwrap_err(), Error::Parse { line: 2, .. }));

        std::fs::write(&p, "").unwrap();
        assert!(load_vectors(&p).unwrap().is_empty());
    }

    #[test]
    fn world_from_vectors() {
        let mut images = BTreeMap::new();
        let mut nouns = BTreeMap::new();
        let mut attrs = BTreeMap::new();
        for c in 0..2 {
            nouns.insert(format!("c{c}"), Vector::from_f64(&[c as f64, 1.0]));
            for e in 0..3 {
                images.insert(format!("c{c}/e{e}"), Vector::from_f64(&[c as f64, e as f64, 1.0]));
            }
        }
        for a in 0..3 {
            attrs.insert(format!("a{a}"), Vector::from_f64(&[a as f64, 2.0]));
        }
        let w = EmbeddingWorld::from_vectors(&images, &nouns, &attrs).unwrap();
        let dp = generate_datapoint(&w, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(validate_datapoint(&dp), Vec::<String>::new());
        nouns.remove("c1");
        assert!(EmbeddingWorld::from_vectors(&images, &nouns, &attrs).is_err());
    }
}
