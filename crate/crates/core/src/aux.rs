//! Per-item modality vectors and their fusion into the auxiliary embedding
//! `k_v` consumed by the transformer embedding layer.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Catalog, ItemId};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, ParamStore, SeededRng, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Tabular,
}

impl Modality {
    /// Fixed fusion order.
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Tabular];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Tabular => "tabular",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Modality::Text => "Text",
            Modality::Image => "Image",
            Modality::Tabular => "Tabular",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "tabular" => Ok(Modality::Tabular),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Frozen per-item vectors of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEmbeddingTable {
    pub modality: Modality,
    dim: usize,
    vectors: BTreeMap<ItemId, Vec<f64>>,
}

impl ModalityEmbeddingTable {
    pub fn new(modality: Modality, dim: usize) -> Self {
        Self {
            modality,
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, item: ItemId, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Dimension {
                op: "modality_table_insert",
                left: (1, self.dim),
                right: (1, v.len()),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config(format!(
                "non-finite {} vector for item {item}",
                self.modality
            )));
        }
        if self.vectors.insert(item, v).is_some() {
            return Err(Error::Duplicate(format!("{} vector for item {item}", self.modality)));
        }
        Ok(())
    }

    pub fn get(&self, item: ItemId) -> Option<&[f64]> {
        self.vectors.get(&item).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, &[f64])> {
        self.vectors.iter().map(|(&i, v)| (i, v.as_slice()))
    }

    /// Same table with every vector replaced by zeros.
    pub fn zeroed(&self) -> Self {
        Self {
            modality: self.modality,
            dim: self.dim,
            vectors: self.vectors.keys().map(|&k| (k, vec![0.0; self.dim])).collect(),
        }
    }
}

/// Reads a modality file: header `modality=<tag> dim=<D>`, then
/// `item_id<TAB>f1 f2 … fD` per line. Items unknown to `catalog` are skipped.
pub fn load_modality_table<R: BufRead>(source: R, catalog: &Catalog) -> Result<ModalityEmbeddingTable> {
    let mut lines = source.lines().enumerate();
    let (modality, dim) = loop {
        let Some((idx, line)) = lines.next() else {
            return Err(Error::Parse {
                line: 1,
                message: "missing `modality=<tag> dim=<D>` header".into(),
            });
        };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        break parse_header(&line, idx + 1)?;
    };
    let mut table = ModalityEmbeddingTable::new(modality, dim);
    let mut seen = HashSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (raw_id, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected `item_id<TAB>values`".into(),
        })?;
        if !seen.insert(raw_id.to_string()) {
            return Err(Error::Duplicate(format!("item `{raw_id}` at line {line_no}")));
        }
        let values = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        message: format!("`{t}` is not a finite number"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if let Some(item) = catalog.item_id(raw_id) {
            table.insert(item, values)?;
        }
    }
    Ok(table)
}

fn parse_header(line: &str, line_no: usize) -> Result<(Modality, usize)> {
    let mut modality = None;
    let mut dim = None;
    for tok in line.split_whitespace() {
        match tok.split_once('=') {
            Some(("modality", v)) => modality = Some(v.parse::<Modality>()?),
            Some(("dim", v)) => {
                dim = v.parse::<usize>().ok().filter(|&d| d > 0);
            }
            _ => {}
        }
    }
    match (modality, dim) {
        (Some(m), Some(d)) => Ok((m, d)),
        _ => Err(Error::Parse {
            line: line_no,
            message: format!("bad header `{line}`"),
        }),
    }
}

/// Writes a table in the format read by [`load_modality_table`]. Floats use
/// the shortest round-trip representation, so reloading is bit-exact.
pub fn write_modality_table<W: Write>(table: &ModalityEmbeddingTable, catalog: &Catalog, mut w: W) -> Result<()> {
    writeln!(w, "modality={} dim={}", table.modality, table.dim)?;
    for (item, v) in table.iter() {
        write!(w, "{}\t", catalog.item_raw(item))?;
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                w.write_all(b" ")?;
            }
            write!(w, "{x:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// The loaded modality tables of one dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuxTables {
    tables: Vec<ModalityEmbeddingTable>,
}

impl AuxTables {
    pub fn new(tables: Vec<ModalityEmbeddingTable>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &tables {
            if !seen.insert(t.modality) {
                return Err(Error::Duplicate(format!("two tables for modality {}", t.modality)));
            }
        }
        let mut tables = tables;
        tables.sort_by_key(|t| t.modality);
        Ok(Self { tables })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, m: Modality) -> Option<&ModalityEmbeddingTable> {
        self.tables.iter().find(|t| t.modality == m)
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.tables.iter().map(|t| t.modality).collect()
    }

    /// Copy with every vector zeroed.
    pub fn zeroed(&self) -> Self {
        Self {
            tables: self.tables.iter().map(ModalityEmbeddingTable::zeroed).collect(),
        }
    }

    /// Rows of `m` for `items`; missing items and rows where `active` is
    /// false become zero vectors.
    fn rows(&self, m: Modality, items: &[ItemId], active: &[bool]) -> Result<Matrix> {
        let table = self
            .get(m)
            .ok_or_else(|| Error::Config(format!("modality {m} enabled but no table loaded")))?;
        let mut out = Matrix::zeros(items.len(), table.dim());
        for (r, (&i, &on)) in items.iter().zip(active).enumerate() {
            if on {
                if let Some(v) = table.get(i) {
                    out.row_mut(r).copy_from_slice(v);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Sum,
}

impl FusionMode {
    pub fn label(self) -> &'static str {
        match self {
            FusionMode::Concat => "Concatenated",
            FusionMode::Sum => "Summation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Enabled modalities in canonical order (text, image, tabular).
    pub enabled: Vec<Modality>,
    pub dim: usize,
}

impl FusionConfig {
    pub fn new(mode: FusionMode, enabled: &[Modality], dim: usize) -> Result<Self> {
        let mut e: Vec<Modality> = enabled.to_vec();
        e.sort();
        e.dedup();
        let cfg = Self { mode, enabled: e, dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled.is_empty() {
            return Err(Error::Config("fusion needs at least one enabled modality".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("fusion target dimension must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_enabled(&self, m: Modality) -> bool {
        self.enabled.contains(&m)
    }
}

/// Removes one modality; fails if it would leave none.
pub fn modality_subset(config: &FusionConfig, drop: Modality) -> Result<FusionConfig> {
    let enabled: Vec<Modality> = config.enabled.iter().copied().filter(|&m| m != drop).collect();
    if enabled.is_empty() {
        return Err(Error::Config(format!("dropping {drop} leaves no modality enabled")));
    }
    FusionConfig::new(config.mode, &enabled, config.dim)
}

/// Adds a modality back (inverse of [`modality_subset`]).
pub fn modality_with(config: &FusionConfig, add: Modality) -> Result<FusionConfig> {
    let mut enabled = config.enabled.clone();
    enabled.push(add);
    FusionConfig::new(config.mode, &enabled, config.dim)
}

/// Trainable linear map from modality vectors to `k_v ∈ ℝ^d`. Concat mode
/// owns one `Σdims × d` matrix; sum mode owns one `dim_m × d` matrix per
/// modality. Both share a `1 × d` bias, initialised to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxProjection {
    pub config: FusionConfig,
    pub input_dims: Vec<usize>,
    pub weights: Vec<ParamId>,
    pub bias: ParamId,
}

impl AuxProjection {
    /// Registers projection parameters in `store`. `dims` are the enabled
    /// modalities' vector dimensions, in canonical order.
    pub fn new(store: &mut ParamStore, config: &FusionConfig, dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        if dims.len() != config.enabled.len() {
            return Err(Error::Config(format!(
                "{} modality dims for {} enabled modalities",
                dims.len(),
                config.enabled.len()
            )));
        }
        let d = config.dim;
        let weights = match config.mode {
            FusionMode::Concat => {
                let width: usize = dims.iter().sum();
                vec![store.add("aux.concat.w", init_linear(width, d, rng))]
            }
            FusionMode::Sum => config
                .enabled
                .iter()
                .zip(dims)
                .map(|(m, &dm)| store.add(format!("aux.{m}.w"), init_linear(dm, d, rng)))
                .collect(),
        };
        let bias = store.add("aux.bias", Matrix::zeros(1, d));
        Ok(Self {
            config: config.clone(),
            input_dims: dims.to_vec(),
            weights,
            bias,
        })
    }

    /// Builds a projection whose dims are read from loaded tables.
    pub fn for_tables(
        store: &mut ParamStore,
        config: &FusionConfig,
        tables: &AuxTables,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let dims = config
            .enabled
            .iter()
            .map(|&m| {
                tables
                    .get(m)
                    .map(ModalityEmbeddingTable::dim)
                    .ok_or_else(|| Error::Config(format!("modality {m} enabled but no table loaded")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(store, config, &dims, rng)
    }

    pub fn concat_width(&self) -> usize {
        self.input_dims.iter().sum()
    }

    fn check_tables(&self, tables: &AuxTables) -> Result<()> {
        for (&m, &dim) in self.config.enabled.iter().zip(&self.input_dims) {
            let t = tables
                .get(m)
                .ok_or_else(|| Error::Config(format!("modality {m} enabled but no table loaded")))?;
            if t.dim() != dim {
                return Err(Error::Dimension {
                    op: "aux_projection",
                    left: (1, dim),
                    right: (1, t.dim()),
                });
            }
        }
        Ok(())
    }

    /// Records `k_v` for each position on the tape. Rows with `active[r]`
    /// false (padding, masked positions) are exactly zero.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tables: &AuxTables,
        items: &[ItemId],
        active: &[bool],
    ) -> Result<Var> {
        self.check_tables(tables)?;
        let mut inputs = Vec::with_capacity(self.config.enabled.len());
        for &m in &self.config.enabled {
            inputs.push(tape.constant(tables.rows(m, items, active)?));
        }
        let projected = match self.config.mode {
            FusionMode::Concat => {
                let x = if inputs.len() == 1 {
                    inputs[0]
                } else {
                    tape.concat_cols(&inputs)?
                };
                let w = tape.param(store, self.weights[0]);
                tape.matmul(x, w)?
            }
            FusionMode::Sum => {
                let mut acc: Option<Var> = None;
                for (&x, &wid) in inputs.iter().zip(&self.weights) {
                    let w = tape.param(store, wid);
                    let p = tape.matmul(x, w)?;
                    acc = Some(match acc {
                        None => p,
                        Some(a) => tape.add(a, p)?,
                    });
                }
                acc.expect("validated non-empty")
            }
        };
        let b = tape.param(store, self.bias);
        let k = tape.add_row(projected, b)?;
        let factors = active.iter().map(|&on| if on { 1.0 } else { 0.0 }).collect();
        tape.row_scale(k, factors)
    }
}

fn init_linear(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Matrix {
    let std = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("shape")
}

/// `k_v` for a single item, outside any tape.
pub fn fuse(item: ItemId, tables: &AuxTables, projection: &AuxProjection, store: &ParamStore) -> Result<Vec<f64>> {
    projection.config.validate()?;
    projection.check_tables(tables)?;
    let d = projection.config.dim;
    let mut out = store.value(projection.bias).row(0).to_vec();
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    for (&m, &dim) in projection.config.enabled.iter().zip(&projection.input_dims) {
        let v = tables
            .get(m)
            .and_then(|t| t.get(item))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; dim]);
        vectors.push(v);
    }
    let apply = |x: &[f64], w: &Matrix, out: &mut [f64]| {
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (o, &wv) in out.iter_mut().zip(w.row(i)) {
                    *o += xi * wv;
                }
            }
        }
    };
    match projection.config.mode {
        FusionMode::Concat => {
            let x: Vec<f64> = vectors.concat();
            let mut acc = vec![0.0; d];
            apply(&x, store.value(projection.weights[0]), &mut acc);
            out.iter_mut().zip(&acc).for_each(|(o, a)| *o += a);
        }
        FusionMode::Sum => {
            for (x, &wid) in vectors.iter().zip(&projection.weights) {
                let mut acc = vec![0.0; d];
                apply(x, store.value(wid), &mut acc);
                out.iter_mut().zip(&acc).for_each(|(o, a)| *o += a);
            }
        }
    }
    Ok(out)
}
