//! Experiment configuration (TOML).
//!
//! Relative paths resolve against the directory holding the config file.
//! The only seed is the top-level `seed`; every stage derives its own
//! sub-seed from it by name.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mmrec_core::aux::{FusionConfig, FusionMode, Modality};
use mmrec_core::baselines::SgdConfig;
use mmrec_core::dataset::SynthConfig;
use mmrec_core::eval::EvalConfig;
use mmrec_core::gbdt::{FeatureKind, GbdtParams, TabularSchema};
use mmrec_core::model::{ModelConfig, Variant};
use mmrec_core::numerics::derive_seed;

use crate::error::{file_err, CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interactions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tabular: Option<PathBuf>,
    /// Item-attribute table for the tabular pipeline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attributes: Option<PathBuf>,
    /// Optional `user_id<TAB>label` ground truth, used by `analyze`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

impl DataPaths {
    pub fn modality(&self, m: Modality) -> Option<&PathBuf> {
        match m {
            Modality::Text => self.text.as_ref(),
            Modality::Image => self.image.as_ref(),
            Modality::Tabular => self.tabular.as_ref(),
        }
    }

    fn all_mut(&mut self) -> [(&'static str, &mut Option<PathBuf>); 6] {
        [
            ("interactions", &mut self.interactions),
            ("text", &mut self.text),
            ("image", &mut self.image),
            ("tabular", &mut self.tabular),
            ("attributes", &mut self.attributes),
            ("labels", &mut self.labels),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKindDecl {
    Categorical,
    Numeric,
}

/// One attribute column: `{ name, kind, values }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDecl {
    pub name: String,
    pub kind: FeatureKindDecl,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
}

pub fn schema_from_decls(decls: &[FeatureDecl]) -> Result<TabularSchema> {
    let features = decls
        .iter()
        .map(|d| match d.kind {
            FeatureKindDecl::Categorical => Ok((d.name.clone(), FeatureKind::Categorical(d.values.clone()))),
            FeatureKindDecl::Numeric if d.values.is_empty() => Ok((d.name.clone(), FeatureKind::Numeric)),
            FeatureKindDecl::Numeric => Err(CliError::Config(format!(
                "numeric feature `{}` cannot list values",
                d.name
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    TabularSchema::new(features).map_err(|e| CliError::Config(e.to_string()))
}

pub fn decls_from_schema(schema: &TabularSchema) -> Vec<FeatureDecl> {
    schema
        .features()
        .iter()
        .map(|(name, kind)| match kind {
            FeatureKind::Categorical(v) => FeatureDecl {
                name: name.clone(),
                kind: FeatureKindDecl::Categorical,
                values: v.clone(),
            },
            FeatureKind::Numeric => FeatureDecl {
                name: name.clone(),
                kind: FeatureKindDecl::Numeric,
                values: Vec::new(),
            },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionDecl {
    pub mode: FusionMode,
    pub enabled: Vec<Modality>,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbdtSection {
    /// Candidate points for cross-validation.
    pub grid: Vec<GbdtParams>,
    pub train_fraction: f64,
}

impl Default for GbdtSection {
    fn default() -> Self {
        let grid = [2, 3, 4]
            .into_iter()
            .map(|max_depth| GbdtParams {
                trees: 16,
                max_depth,
                shrinkage: 0.3,
            })
            .collect();
        Self {
            grid,
            train_fraction: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Number of seeded repetitions per cell.
    pub runs: usize,
    pub variants: Vec<Variant>,
    /// 1-based indices into the standard rows; empty means all.
    pub rows: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            runs: 10,
            variants: vec![Variant::SasrecPlus, Variant::Bert4recPlus],
            rows: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub max_iter: usize,
    /// Members per disjoint heatmap set.
    pub set_size: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 8,
            restarts: 5,
            max_iter: 100,
            set_size: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: u64,
    #[serde(default)]
    out_dir: Option<PathBuf>,
    #[serde(default)]
    data: DataPaths,
    #[serde(default)]
    schema: Vec<FeatureDecl>,
    #[serde(default)]
    synth: SynthConfig,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    fusion: Option<FusionDecl>,
    #[serde(default)]
    baselines: SgdConfig,
    #[serde(default)]
    eval: EvalConfig,
    #[serde(default)]
    gbdt: GbdtSection,
    #[serde(default)]
    ablation: AblationSection,
    #[serde(default)]
    analysis: AnalysisSection,
}

/// Files a command reads; only these must exist when the config loads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Needs {
    Nothing,
    /// Everything except the tabular modality file, which the command writes.
    AllButTabular,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataPaths,
    pub schema: Option<TabularSchema>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub fusion: Option<FusionConfig>,
    pub baselines: SgdConfig,
    pub eval: EvalConfig,
    pub gbdt: GbdtSection,
    pub ablation: AblationSection,
    pub analysis: AnalysisSection,
    /// Exact bytes of the config file.
    pub bytes: Vec<u8>,
}

/// Per-stage sub-seeds are named after the stage.
pub mod stage {
    pub const SYNTH: &str = "synth";
    pub const GBDT: &str = "gbdt";
    pub const MODEL: &str = "model";
    pub const EVAL: &str = "eval";
    pub const BASELINES: &str = "baselines";
    pub const ANALYSIS: &str = "analysis";
}

impl ExperimentConfig {
    pub fn load(path: &Path, out_override: Option<&Path>, seed_override: Option<u64>, needs: Needs) -> Result<Self> {
        let bytes = fs::read(path).map_err(file_err(path))?;
        let text =
            std::str::from_utf8(&bytes).map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(text, &base, out_override, seed_override, needs).map(|mut c| {
            c.bytes = bytes;
            c
        })
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(
        text: &str,
        base: &Path,
        out_override: Option<&Path>,
        seed_override: Option<u64>,
        needs: Needs,
    ) -> Result<Self> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        for (section, v) in &value {
            if let Some(t) = v.as_table() {
                if t.contains_key("seed") {
                    return Err(CliError::Config(format!(
                        "[{section}] sets `seed`; only the top-level seed is allowed"
                    )));
                }
            }
        }
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        let seed = seed_override.unwrap_or(raw.seed);
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

        let mut data = raw.data;
        for (name, slot) in data.all_mut() {
            if let Some(p) = slot.take() {
                let p = resolve(p);
                let required = match needs {
                    Needs::Nothing => false,
                    Needs::AllButTabular => name != "tabular",
                    Needs::All => true,
                };
                if required && !p.is_file() {
                    return Err(CliError::Config(format!(
                        "data.{name}: file {} does not exist",
                        p.display()
                    )));
                }
                *slot = Some(p);
            }
        }

        let schema = if raw.schema.is_empty() {
            None
        } else {
            Some(schema_from_decls(&raw.schema)?)
        };
        let fusion = match raw.fusion {
            Some(f) => Some(FusionConfig::new(f.mode, &f.enabled, f.dim).map_err(|e| CliError::Config(e.to_string()))?),
            None => None,
        };
        let config_err = |e: mmrec_core::Error| CliError::Config(e.to_string());

        let mut synth = raw.synth;
        synth.seed = derive_seed(seed, stage::SYNTH);
        let mut model = raw.model;
        model.seed = derive_seed(seed, stage::MODEL);
        model.validate().map_err(config_err)?;
        let mut baselines = raw.baselines;
        baselines.seed = derive_seed(seed, stage::BASELINES);
        baselines.validate().map_err(config_err)?;
        let mut eval = raw.eval;
        eval.seed = derive_seed(seed, stage::EVAL);
        if eval.negatives == 0 {
            return Err(CliError::Config("eval.negatives must be >= 1".into()));
        }
        if raw.gbdt.grid.is_empty() {
            return Err(CliError::Config("gbdt.grid must list at least one point".into()));
        }
        let a = &raw.analysis;
        if a.k_min == 0 || a.k_max < a.k_min + 2 {
            return Err(CliError::Config(
                "analysis needs 1 <= k_min and k_max >= k_min + 2".into(),
            ));
        }
        if raw.ablation.runs == 0 || raw.ablation.variants.is_empty() {
            return Err(CliError::Config(
                "ablation needs runs >= 1 and at least one variant".into(),
            ));
        }

        Ok(Self {
            seed,
            out_dir: out_override
                .map(Path::to_path_buf)
                .unwrap_or_else(|| resolve(raw.out_dir.unwrap_or_else(|| PathBuf::from("out")))),
            data,
            schema,
            synth,
            model,
            fusion,
            baselines,
            eval,
            gbdt: raw.gbdt,
            ablation: raw.ablation,
            analysis: raw.analysis,
            bytes: text.as_bytes().to_vec(),
        })
    }

    pub fn interactions_path(&self) -> Result<&Path> {
        self.data
            .interactions
            .as_deref()
            .ok_or_else(|| CliError::Config("data.interactions is not set".into()))
    }

    /// Seed for the `i`-th repetition of an ablation cell.
    pub fn run_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, &format!("ablate.run.{i}"))
    }
}

/// The config that `synth` writes next to its data files.
#[derive(Serialize)]
pub struct GeneratedConfig {
    pub seed: u64,
    pub data: DataPaths,
    pub schema: Vec<FeatureDecl>,
}

impl GeneratedConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("generated config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/base"), None, None, Needs::Nothing)
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse("seed = 3\n").unwrap();
        assert_eq!(c.out_dir, Path::new("/base/out"));
        assert_eq!(c.model.dim, ModelConfig::default().dim);
        assert_eq!(c.model.seed, derive_seed(3, stage::MODEL));
        assert_eq!(c.eval.seed, derive_seed(3, stage::EVAL));
        assert!(c.fusion.is_none());
    }

    #[test]
    fn seed_is_required_and_exclusive() {
        assert!(matches!(parse("[model]\ndim = 8\n"), Err(CliError::Config(_))));
        assert!(matches!(parse("seed = 1\n[model]\nseed = 4\n"), Err(CliError::Config(m)) if m.contains("[model]")));
        let c = ExperimentConfig::parse("seed = 1\n", Path::new("/b"), None, Some(9), Needs::Nothing).unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse("seed = 1\nbogus = 2\n").is_err());
        assert!(parse("seed = 1\n[model]\nwidth = 2\n").is_err());
        assert!(parse("seed = 1\n[fusion]\nmode = \"sum\"\nenabled = [\"text\"]\ndim = 4\nextra = 1\n").is_err());
    }

    #[test]
    fn paths_resolve_and_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.tsv"), "u\ti\t1\n").unwrap();
        let text = "seed = 1\n[data]\ninteractions = \"x.tsv\"\ntabular = \"later.tsv\"\n";
        let c = ExperimentConfig::parse(text, dir.path(), None, None, Needs::AllButTabular).unwrap();
        assert_eq!(c.data.interactions.unwrap(), dir.path().join("x.tsv"));
        assert!(ExperimentConfig::parse(text, dir.path(), None, None, Needs::All).is_err());
    }

    #[test]
    fn schema_and_fusion_sections() {
        let c = parse(
            "seed = 1\n[[schema]]\nname = \"color\"\nkind = \"categorical\"\nvalues = [\"red\", \"blue\"]\n\
             [[schema]]\nname = \"price\"\nkind = \"numeric\"\n\
             [fusion]\nmode = \"concat\"\nenabled = [\"image\", \"text\"]\ndim = 16\n",
        )
        .unwrap();
        assert_eq!(c.schema.unwrap().encoded_width(), 3);
        assert_eq!(c.fusion.unwrap().enabled, vec![Modality::Text, Modality::Image]);
        assert!(parse("seed = 1\n[[schema]]\nname = \"p\"\nkind = \"numeric\"\nvalues = [\"a\"]\n").is_err());
    }

    #[test]
    fn generated_config_round_trips() {
        let g = GeneratedConfig {
            seed: 5,
            data: DataPaths {
                interactions: Some("interactions.tsv".into()),
                ..Default::default()
            },
            schema: vec![FeatureDecl {
                name: "price".into(),
                kind: FeatureKindDecl::Numeric,
                values: vec![],
            }],
        };
        let c = parse(&g.to_toml()).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.data.interactions.unwrap(), Path::new("/base/interactions.tsv"));
    }
}
