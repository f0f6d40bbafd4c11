//! Interaction logs, per-user sequences, the leave-one-out split, negative
//! sampling and the synthetic dataset generator.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::aux::{Modality, ModalityEmbeddingTable};
use crate::error::{Error, Result};
use crate::gbdt::{AttrValue, FeatureKind, TabularSchema};
use crate::numerics::SeededRng;

/// Dense item id: `0` is padding, `1..=|V|` are items, `|V|+1` is the mask token.
pub type ItemId = usize;
/// Dense user index `0..|U|`.
pub type UserId = usize;

pub const PADDING: ItemId = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: u64,
    pub rating: Option<f64>,
}

/// Bijective maps between raw string ids and dense ids, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    users: Vec<String>,
    items: Vec<String>,
    user_index: HashMap<String, UserId>,
    item_index: HashMap<String, ItemId>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern_user(&mut self, raw: &str) -> UserId {
        if let Some(&u) = self.user_index.get(raw) {
            return u;
        }
        self.users.push(raw.to_string());
        let id = self.users.len() - 1;
        self.user_index.insert(raw.to_string(), id);
        id
    }

    pub fn intern_item(&mut self, raw: &str) -> ItemId {
        if let Some(&i) = self.item_index.get(raw) {
            return i;
        }
        self.items.push(raw.to_string());
        let id = self.items.len();
        self.item_index.insert(raw.to_string(), id);
        id
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn mask_token(&self) -> ItemId {
        self.items.len() + 1
    }

    pub fn user_raw(&self, u: UserId) -> &str {
        &self.users[u]
    }

    pub fn item_raw(&self, i: ItemId) -> &str {
        &self.items[i - 1]
    }

    pub fn item_id(&self, raw: &str) -> Option<ItemId> {
        self.item_index.get(raw).copied()
    }

    pub fn user_id(&self, raw: &str) -> Option<UserId> {
        self.user_index.get(raw).copied()
    }
}

/// Parses the interaction TSV: `user<TAB>item<TAB>timestamp[<TAB>rating]`.
/// Blank lines and `#` comments are skipped.
pub fn ingest_interactions<R: BufRead>(source: R) -> Result<(Catalog, Vec<Interaction>)> {
    let mut catalog = Catalog::new();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 or 4 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty user or item id".into(),
            });
        }
        let timestamp: u64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("timestamp `{}` is not a non-negative integer", fields[2]),
        })?;
        let rating = match fields.get(3).map(|s| s.trim()) {
            None | Some("") => None,
            Some(s) => {
                let r: f64 = s.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("rating `{s}` is not a number"),
                })?;
                if !(1.0..=5.0).contains(&r) {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("rating {r} outside [1, 5]"),
                    });
                }
                Some(r)
            }
        };
        if !seen.insert((fields[0].to_string(), fields[1].to_string(), timestamp)) {
            return Err(Error::Duplicate(format!(
                "interaction ({}, {}, {timestamp}) at line {line_no}",
                fields[0], fields[1]
            )));
        }
        let user = catalog.intern_user(fields[0]);
        let item = catalog.intern_item(fields[1]);
        out.push(Interaction {
            user,
            item,
            timestamp,
            rating,
        });
    }
    Ok((catalog, out))
}

/// Writes interactions in the TSV format accepted by [`ingest_interactions`].
pub fn write_interactions<W: Write>(catalog: &Catalog, interactions: &[Interaction], mut w: W) -> Result<()> {
    writeln!(w, "# user_id\titem_id\ttimestamp\trating")?;
    for it in interactions {
        match it.rating {
            Some(r) => writeln!(
                w,
                "{}\t{}\t{}\t{}",
                catalog.user_raw(it.user),
                catalog.item_raw(it.item),
                it.timestamp,
                r
            )?,
            None => writeln!(
                w,
                "{}\t{}\t{}",
                catalog.user_raw(it.user),
                catalog.item_raw(it.item),
                it.timestamp
            )?,
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: UserId,
    pub items: Vec<ItemId>,
}

/// Groups interactions per user in ascending timestamp order; equal
/// timestamps are ordered by ascending item id. Output is sorted by user.
pub fn build_sequences(interactions: &[Interaction]) -> Vec<UserSequence> {
    let mut per_user: HashMap<UserId, Vec<(u64, ItemId)>> = HashMap::new();
    for it in interactions {
        per_user.entry(it.user).or_default().push((it.timestamp, it.item));
    }
    let mut users: Vec<UserId> = per_user.keys().copied().collect();
    users.sort_unstable();
    users
        .into_iter()
        .map(|u| {
            let mut events = per_user.remove(&u).unwrap_or_default();
            events.sort_unstable();
            UserSequence {
                user: u,
                items: events.into_iter().map(|(_, i)| i).collect(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    pub user: UserId,
    pub train: Vec<ItemId>,
    pub valid: Option<ItemId>,
    pub test: Option<ItemId>,
}

impl UserSplit {
    /// Every item the user interacted with, in order.
    pub fn full_sequence(&self) -> Vec<ItemId> {
        let mut s = self.train.clone();
        s.extend(self.valid);
        s.extend(self.test);
        s
    }

    pub fn history_set(&self) -> HashSet<ItemId> {
        self.full_sequence().into_iter().collect()
    }

    /// Train prefix plus the validation item: the input for test prediction.
    pub fn test_context(&self) -> Vec<ItemId> {
        let mut s = self.train.clone();
        s.extend(self.valid);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub catalog: Catalog,
    pub users: Vec<UserSplit>,
}

impl SplitDataset {
    pub fn num_items(&self) -> usize {
        self.catalog.num_items()
    }

    pub fn num_users(&self) -> usize {
        self.catalog.num_users()
    }
}

/// Last item is test, the one before is validation, the rest is training.
/// Users with fewer than three interactions keep everything in training.
pub fn leave_one_out_split(catalog: Catalog, sequences: &[UserSequence]) -> SplitDataset {
    let users = sequences
        .iter()
        .map(|s| {
            let n = s.items.len();
            if n >= 3 {
                UserSplit {
                    user: s.user,
                    train: s.items[..n - 2].to_vec(),
                    valid: Some(s.items[n - 2]),
                    test: Some(s.items[n - 1]),
                }
            } else {
                UserSplit {
                    user: s.user,
                    train: s.items.clone(),
                    valid: None,
                    test: None,
                }
            }
        })
        .collect();
    SplitDataset { catalog, users }
}

/// `k` distinct items from `1..=num_items` outside `history`, uniform without
/// replacement.
pub fn sample_negatives(
    user: UserId,
    history: &HashSet<ItemId>,
    num_items: usize,
    k: usize,
    rng: &mut SeededRng,
) -> Result<Vec<ItemId>> {
    let excluded = history.iter().filter(|&&i| i >= 1 && i <= num_items).count();
    let available = num_items - excluded;
    if available < k {
        return Err(Error::PoolExhausted {
            user,
            needed: k,
            available,
        });
    }
    if available >= 4 * k {
        let mut chosen = Vec::with_capacity(k);
        let mut chosen_set = HashSet::with_capacity(k);
        while chosen.len() < k {
            let cand = 1 + rng.below(num_items);
            if !history.contains(&cand) && chosen_set.insert(cand) {
                chosen.push(cand);
            }
        }
        Ok(chosen)
    } else {
        let mut pool: Vec<ItemId> = (1..=num_items).filter(|i| !history.contains(i)).collect();
        // Partial Fisher-Yates.
        for i in 0..k {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        Ok(pool)
    }
}

/// One item outside `history` (or, if the user consumed every item, any item
/// other than `positive`), uniform.
pub fn sample_negative(history: &HashSet<ItemId>, positive: ItemId, num_items: usize, rng: &mut SeededRng) -> ItemId {
    if history.len() < num_items {
        loop {
            let c = 1 + rng.below(num_items);
            if !history.contains(&c) {
                return c;
            }
        }
    }
    // Every item was consumed: any item other than the positive.
    if num_items == 1 {
        return positive;
    }
    let c = 1 + rng.below(num_items - 1);
    if c >= positive {
        c + 1
    } else {
        c
    }
}

/// Keeps the `n` most recent items and left-pads with [`PADDING`].
pub fn truncate_pad(sequence: &[ItemId], n: usize) -> Vec<ItemId> {
    let start = sequence.len().saturating_sub(n);
    let tail = &sequence[start..];
    let mut out = vec![PADDING; n - tail.len()];
    out.extend_from_slice(tail);
    out
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    /// Number of behaviour archetypes; users are assigned round-robin.
    pub archetypes: usize,
    /// Sequence lengths span `[min_len, max_len]`, split into one band per archetype.
    pub min_len: usize,
    pub max_len: usize,
    /// Lengths left unused at the top of every band, separating archetypes.
    pub band_gap: usize,
    /// Probability that the next item follows the category transition.
    pub strength: f64,
    /// Std-dev of the noise added to planted modality vectors.
    pub noise: f64,
    pub text_dim: usize,
    pub image_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 400,
            categories: 20,
            archetypes: 1,
            min_len: 5,
            max_len: 12,
            band_gap: 0,
            strength: 0.9,
            noise: 0.1,
            text_dim: 196,
            image_dim: 196,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.users == 0 || self.items == 0 || self.categories == 0 || self.archetypes == 0 {
            return err("users, items, categories and archetypes must all be at least 1");
        }
        if self.categories > self.items {
            return err("more categories than items");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return err("need 1 <= min_len <= max_len");
        }
        if self.max_len - self.min_len + 1 < self.archetypes {
            return err("length range too narrow for one band per archetype");
        }
        if self.band_gap >= (self.max_len - self.min_len + 1) / self.archetypes {
            return err("band_gap must be smaller than the band width");
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return err("strength must lie in [0, 1]");
        }
        if !(self.noise >= 0.0) || self.text_dim == 0 || self.image_dim == 0 {
            return err("noise must be >= 0 and modality dims >= 1");
        }
        Ok(())
    }
}

/// Output of [`synth_generate`].
#[derive(Clone, Debug)]
pub struct SynthData {
    pub catalog: Catalog,
    pub interactions: Vec<Interaction>,
    /// Text and image tables, in that order.
    pub tables: Vec<ModalityEmbeddingTable>,
    /// Latent category of item `i` at index `i - 1`.
    pub item_categories: Vec<usize>,
    /// Ground-truth archetype per user index.
    pub user_archetypes: Vec<usize>,
    /// Successor category map per archetype.
    pub transitions: Vec<Vec<usize>>,
    pub attribute_schema: TabularSchema,
    pub item_attributes: Vec<(ItemId, Vec<AttrValue>)>,
}

/// Generates a dataset with planted structure.
///
/// Items are assigned round-robin to latent categories, then shuffled. Each
/// category owns one random prototype per modality, and an item's modality
/// vector is its category prototype plus Gaussian noise. Every archetype owns
/// a successor permutation over categories: with probability `strength` the
/// next item is drawn uniformly from the successor category of the current
/// item, otherwise uniformly from the whole catalog. Archetype `a` draws its
/// sequence lengths from the `a`-th band of `[min_len, max_len]`.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let root = SeededRng::new(config.seed);
    let mut rng = root.derive("synth.items");

    let mut item_categories: Vec<usize> = (0..config.items).map(|i| i % config.categories).collect();
    rng.shuffle(&mut item_categories);
    let mut by_category = vec![Vec::new(); config.categories];
    for (idx, &c) in item_categories.iter().enumerate() {
        by_category[c].push(idx + 1);
    }

    let mut catalog = Catalog::new();
    for i in 1..=config.items {
        catalog.intern_item(&format!("i{i:05}"));
    }
    for u in 0..config.users {
        catalog.intern_user(&format!("u{u:05}"));
    }

    let mut tables = Vec::new();
    for (modality, dim) in [(Modality::Text, config.text_dim), (Modality::Image, config.image_dim)] {
        let mut mrng = root.derive(&format!("synth.{}", modality.tag()));
        let protos: Vec<Vec<f64>> = (0..config.categories)
            .map(|_| (0..dim).map(|_| mrng.normal()).collect())
            .collect();
        let mut table = ModalityEmbeddingTable::new(modality, dim);
        for (idx, &c) in item_categories.iter().enumerate() {
            let v: Vec<f64> = protos[c].iter().map(|p| p + config.noise * mrng.normal()).collect();
            table.insert(idx + 1, v)?;
        }
        tables.push(table);
    }

    let mut trng = root.derive("synth.transitions");
    let transitions: Vec<Vec<usize>> = (0..config.archetypes)
        .map(|_| successor_permutation(config.categories, &mut trng))
        .collect();

    // Tabular attributes: a coarse category code, a random material and a
    // numeric price. Item quality drives ratings.
    let materials = ["cotton", "wool", "denim", "silk"];
    let groups = config.categories.div_ceil(2).max(1);
    let attribute_schema = TabularSchema::new(vec![
        (
            "group".to_string(),
            FeatureKind::Categorical((0..groups).map(|g| format!("g{g}")).collect()),
        ),
        (
            "material".to_string(),
            FeatureKind::Categorical(materials.iter().map(|s| s.to_string()).collect()),
        ),
        ("price".to_string(), FeatureKind::Numeric),
    ])?;
    let mut arng = root.derive("synth.attributes");
    let mut quality = vec![0.0; config.items + 1];
    let mut item_attributes = Vec::with_capacity(config.items);
    for (idx, &c) in item_categories.iter().enumerate() {
        let material = arng.below(materials.len());
        let price = (10.0 + 90.0 * arng.uniform()).round();
        quality[idx + 1] = 0.8 * ((c % 3) as f64 - 1.0) + 0.5 * (material as f64 - 1.5) / 1.5 - (price - 55.0) / 90.0;
        item_attributes.push((
            idx + 1,
            vec![
                AttrValue::Cat(format!("g{}", c / 2)),
                AttrValue::Cat(materials[material].to_string()),
                AttrValue::Num(price),
            ],
        ));
    }

    let mut srng = root.derive("synth.sequences");
    let band = (config.max_len - config.min_len + 1) / config.archetypes;
    let mut interactions = Vec::new();
    let mut user_archetypes = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let a = u % config.archetypes;
        user_archetypes.push(a);
        let lo = config.min_len + a * band;
        let hi = if a + 1 == config.archetypes {
            config.max_len
        } else {
            lo + band - 1
        } - config.band_gap;
        let len = lo + srng.below(hi - lo + 1);
        let mut current = 1 + srng.below(config.items);
        for t in 0..len {
            if t > 0 {
                current = if srng.bernoulli(config.strength) {
                    let next_cat = transitions[a][item_categories[current - 1]];
                    let pool = &by_category[next_cat];
                    pool[srng.below(pool.len())]
                } else {
                    1 + srng.below(config.items)
                };
            }
            let rating = (3.0 + quality[current] + 0.5 * srng.normal()).round().clamp(1.0, 5.0);
            interactions.push(Interaction {
                user: u,
                item: current,
                timestamp: t as u64,
                rating: Some(rating),
            });
        }
    }

    Ok(SynthData {
        catalog,
        interactions,
        tables,
        item_categories,
        user_archetypes,
        transitions,
        attribute_schema,
        item_attributes,
    })
}

/// Random permutation of categories, fixed-point free when there are at least two.
fn successor_permutation(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    if n == 1 {
        return vec![0];
    }
    // A random cyclic order is a derangement.
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut next = vec![0; n];
    for i in 0..n {
        next[order[i]] = order[(i + 1) % n];
    }
    next
}
