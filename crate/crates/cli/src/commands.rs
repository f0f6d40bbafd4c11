use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use serde::Serialize;

use mmrec_core::analysis::{
    block_diagonal_score, elbow_select, extract_profile, heatmap, kmeans_best, label_agreement,
};
use mmrec_core::aux::{load_modality_table, write_modality_table, AuxTables, Modality};
use mmrec_core::baselines::{bpr_fit, poprec_fit, transrec_fit, BprModel, FitTrace, PopModel, TransRecModel};
use mmrec_core::checkpoint::Checkpoint;
use mmrec_core::dataset::{
    build_sequences, ingest_interactions, leave_one_out_split, synth_generate, write_interactions, Interaction,
    SplitDataset, UserSplit,
};
use mmrec_core::eval::{
    ablation_run, evaluate, paired_t_test, standard_ablation_rows, train_and_test, EvalTarget, ModelScorer, Scorer,
};
use mmrec_core::gbdt::{load_item_attributes, mean_item_ratings, tabular_pipeline, write_item_attributes};
use mmrec_core::model::{train, ModelConfig, ModelHeader, TrainOptions, TransformerModel, Variant};
use mmrec_core::{ItemId, SeededRng};

use crate::config::{decls_from_schema, stage, DataPaths, ExperimentConfig, GeneratedConfig};
use crate::error::{file_err, CliError, Result, StageExt};
use crate::manifest::Recorder;

fn bytes_of(f: impl FnOnce(&mut Vec<u8>) -> mmrec_core::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(file_err(path))
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(file_err(&cfg.out_dir))
}

pub struct Loaded {
    pub interactions: Vec<Interaction>,
    pub split: SplitDataset,
    pub tables: AuxTables,
}

/// Reads interactions and every configured modality file except `skip`.
pub fn load_data(cfg: &ExperimentConfig, skip: Option<Modality>) -> Result<Loaded> {
    let (catalog, interactions) = ingest_interactions(open(cfg.interactions_path()?)?).stage("load")?;
    let split = leave_one_out_split(catalog, &build_sequences(&interactions));
    let mut tables = Vec::new();
    for m in Modality::ALL {
        if Some(m) == skip {
            continue;
        }
        if let Some(path) = cfg.data.modality(m) {
            let t = load_modality_table(open(path)?, &split.catalog).stage("load")?;
            if t.modality != m {
                return Err(CliError::Config(format!(
                    "data.{m} points at a `{}` modality file ({})",
                    t.modality,
                    path.display()
                )));
            }
            tables.push(t);
        }
    }
    let tables = AuxTables::new(tables).stage("load")?;
    Ok(Loaded {
        interactions,
        split,
        tables,
    })
}

pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<Recorder> {
    let mut rec = Recorder::new(&cfg.out_dir, "synth", &cfg.bytes, cfg.seed);
    rec.stage("generate");
    let data = synth_generate(&cfg.synth).stage("synth")?;
    prepare_out(cfg)?;
    rec.stage("write");
    rec.output(
        "interactions.tsv",
        &bytes_of(|w| write_interactions(&data.catalog, &data.interactions, w)),
    )?;
    for t in &data.tables {
        let name = format!("{}.tsv", t.modality);
        rec.output(&name, &bytes_of(|w| write_modality_table(t, &data.catalog, w)))?;
    }
    rec.output(
        "attributes.tsv",
        &bytes_of(|w| write_item_attributes(&data.attribute_schema, &data.item_attributes, &data.catalog, w)),
    )?;
    let mut labels = String::from("user_id\tlabel\n");
    for (u, a) in data.user_archetypes.iter().enumerate() {
        writeln!(labels, "{}\t{a}", data.catalog.user_raw(u)).unwrap();
    }
    rec.output("labels.tsv", labels.as_bytes())?;
    let generated = GeneratedConfig {
        seed: cfg.seed,
        data: DataPaths {
            interactions: Some("interactions.tsv".into()),
            text: Some("text.tsv".into()),
            image: Some("image.tsv".into()),
            tabular: None,
            attributes: Some("attributes.tsv".into()),
            labels: Some("labels.tsv".into()),
        },
        schema: decls_from_schema(&data.attribute_schema),
    };
    rec.output("experiment.toml", generated.to_toml().as_bytes())?;
    Ok(rec)
}

#[derive(Serialize)]
struct GbdtSummary {
    chosen: mmrec_core::gbdt::GbdtParams,
    holdout_mae: Option<f64>,
    train_items: usize,
    embedding_dim: usize,
}

pub fn cmd_gbdt_embed(cfg: &ExperimentConfig) -> Result<Recorder> {
    let mut rec = Recorder::new(&cfg.out_dir, "gbdt-embed", &cfg.bytes, cfg.seed);
    rec.stage("load");
    let schema = cfg
        .schema
        .as_ref()
        .ok_or_else(|| CliError::Config("gbdt-embed needs a [[schema]] declaration".into()))?;
    let attr_path = cfg
        .data
        .attributes
        .as_deref()
        .ok_or_else(|| CliError::Config("data.attributes is not set".into()))?;
    let loaded = load_data(cfg, Some(Modality::Tabular))?;
    let catalog = &loaded.split.catalog;
    let attributes = load_item_attributes(open(attr_path)?, schema, catalog).stage("load")?;

    rec.stage("fit");
    let ratings = mean_item_ratings(&loaded.interactions);
    let mut rng = SeededRng::new(cfg.seed).derive(stage::GBDT);
    let emb = tabular_pipeline(
        schema,
        &attributes,
        &ratings,
        &cfg.gbdt.grid,
        cfg.gbdt.train_fraction,
        &mut rng,
    )
    .stage("gbdt")?;

    prepare_out(cfg)?;
    rec.stage("write");
    rec.output(
        "tabular.tsv",
        &bytes_of(|w| write_modality_table(&emb.table, catalog, w)),
    )?;
    let mut cv = String::from("trees\tmax_depth\tshrinkage\tmean_mae\tchosen\n");
    for (i, p) in emb.cv.points.iter().enumerate() {
        writeln!(
            cv,
            "{}\t{}\t{}\t{:.6}\t{}",
            p.params.trees,
            p.params.max_depth,
            p.params.shrinkage,
            p.mean_mae,
            u8::from(i == emb.cv.chosen)
        )
        .unwrap();
    }
    rec.output("gbdt_cv.tsv", cv.as_bytes())?;
    let summary = GbdtSummary {
        chosen: emb.cv.chosen_params(),
        holdout_mae: emb.holdout_mae,
        train_items: emb.train_items.len(),
        embedding_dim: emb.table.dim(),
    };
    rec.output(
        "gbdt_report.json",
        (serde_json::to_string_pretty(&summary).unwrap() + "\n").as_bytes(),
    )?;
    Ok(rec)
}

/// Anything `train` can fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainVariant {
    #[value(name = "sasrec_plus")]
    SasrecPlus,
    #[value(name = "bert4rec_plus")]
    Bert4recPlus,
    #[value(name = "poprec")]
    Poprec,
    #[value(name = "bpr")]
    Bpr,
    #[value(name = "transrec")]
    Transrec,
}

impl TrainVariant {
    pub fn name(self) -> &'static str {
        match self {
            TrainVariant::SasrecPlus => "sasrec_plus",
            TrainVariant::Bert4recPlus => "bert4rec_plus",
            TrainVariant::Poprec => "poprec",
            TrainVariant::Bpr => "bpr",
            TrainVariant::Transrec => "transrec",
        }
    }
}

fn variant_config(base: &ModelConfig, variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        // The unidirectional model is single-head.
        heads: if variant == Variant::SasrecPlus { 1 } else { base.heads },
        ..base.clone()
    }
}

fn trace_tsv(trace: &FitTrace) -> String {
    let mut s = String::from("epoch\tloss\tfactor_norm\n");
    for (e, (l, n)) in trace.loss.iter().zip(&trace.factor_norm).enumerate() {
        writeln!(s, "{}\t{l:.6}\t{n:.6}", e + 1).unwrap();
    }
    s
}

pub fn cmd_train(cfg: &ExperimentConfig, variant: TrainVariant) -> Result<Recorder> {
    let mut rec = Recorder::new(&cfg.out_dir, &format!("train.{}", variant.name()), &cfg.bytes, cfg.seed);
    rec.stage("load");
    let loaded = load_data(cfg, None)?;
    let split = &loaded.split;
    rec.stage("train");
    let (ckpt, curves) = match variant {
        TrainVariant::SasrecPlus | TrainVariant::Bert4recPlus => {
            let v = if variant == TrainVariant::SasrecPlus {
                Variant::SasrecPlus
            } else {
                Variant::Bert4recPlus
            };
            let mcfg = variant_config(&cfg.model, v);
            let mut model =
                TransformerModel::new(&mcfg, split.num_items(), cfg.fusion.as_ref(), &loaded.tables).stage("train")?;
            let outcome =
                train(&mut model, split, &loaded.tables, &TrainOptions::from_eval(&cfg.eval)).stage("train")?;
            (model.to_checkpoint(), outcome.curves_tsv())
        }
        TrainVariant::Poprec => (poprec_fit(split).to_checkpoint(), trace_tsv(&FitTrace::default())),
        TrainVariant::Bpr => {
            let (m, trace) = bpr_fit(split, &cfg.baselines).stage("train")?;
            (m.to_checkpoint(), trace_tsv(&trace))
        }
        TrainVariant::Transrec => {
            let (m, trace) = transrec_fit(split, &cfg.baselines).stage("train")?;
            (m.to_checkpoint(), trace_tsv(&trace))
        }
    };
    prepare_out(cfg)?;
    rec.stage("write");
    rec.output(&format!("{}.ckpt", variant.name()), &ckpt.to_bytes())?;
    rec.output(&format!("{}.curves.tsv", variant.name()), curves.as_bytes())?;
    Ok(rec)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read_from(open(path)?).stage("checkpoint")
}

fn mismatch(what: &str, ckpt: usize, here: usize) -> Option<String> {
    (ckpt != here).then(|| format!("{what}: checkpoint {ckpt}, config/data {here}"))
}

fn incompatible(issues: Vec<Option<String>>) -> Result<()> {
    let issues: Vec<String> = issues.into_iter().flatten().collect();
    if issues.is_empty() {
        Ok(())
    } else {
        Err(CliError::Compatibility(format!(
            "checkpoint does not match: {}",
            issues.join(", ")
        )))
    }
}

/// Loads a transformer checkpoint after checking `d`, `N`, `|V|` and the
/// auxiliary table widths against the config and data.
pub fn load_transformer(ck: &Checkpoint, cfg: &ExperimentConfig, loaded: &Loaded) -> Result<TransformerModel> {
    let header: ModelHeader = serde_json::from_str(&ck.header).map_err(|e| CliError::Core {
        stage: "checkpoint",
        source: mmrec_core::Error::Checkpoint(format!("bad model header: {e}")),
    })?;
    let mut issues = vec![
        mismatch("d", header.config.dim, cfg.model.dim),
        mismatch("N", header.config.max_len, cfg.model.max_len),
        mismatch("|V|", header.num_items, loaded.split.num_items()),
    ];
    if let Some(f) = &header.fusion {
        for (&m, &dim) in f.enabled.iter().zip(&header.aux_dims) {
            issues.push(match loaded.tables.get(m) {
                None => Some(format!("{m}: checkpoint uses it but no table is configured")),
                Some(t) => mismatch(&format!("{m} width"), dim, t.dim()),
            });
        }
    }
    incompatible(issues)?;
    TransformerModel::from_checkpoint(ck).stage("checkpoint")
}

enum AnyModel {
    Transformer(TransformerModel),
    Pop(PopModel),
    Bpr(BprModel),
    TransRec(TransRecModel),
}

fn load_any(ck: &Checkpoint, cfg: &ExperimentConfig, loaded: &Loaded) -> Result<AnyModel> {
    let items = loaded.split.num_items() + 1;
    let users = loaded.split.num_users();
    Ok(match ck.tag.as_str() {
        "sasrec_plus" | "bert4rec_plus" => AnyModel::Transformer(load_transformer(ck, cfg, loaded)?),
        "poprec" => {
            let m = PopModel::from_checkpoint(ck).stage("checkpoint")?;
            incompatible(vec![mismatch("|V|+1", m.counts.len(), items)])?;
            AnyModel::Pop(m)
        }
        "bpr" => {
            let m = BprModel::from_checkpoint(ck).stage("checkpoint")?;
            incompatible(vec![
                mismatch("|V|+1", m.item_factors.rows(), items),
                mismatch("|U|", m.user_factors.rows(), users),
            ])?;
            AnyModel::Bpr(m)
        }
        "transrec" => {
            let m = TransRecModel::from_checkpoint(ck).stage("checkpoint")?;
            incompatible(vec![
                mismatch("|V|+1", m.gamma.rows(), items),
                mismatch("|U|", m.user_translation.rows(), users),
            ])?;
            AnyModel::TransRec(m)
        }
        other => {
            return Err(CliError::Core {
                stage: "checkpoint",
                source: mmrec_core::Error::Checkpoint(format!("unknown model tag `{other}`")),
            })
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TargetArg {
    Test,
    Validation,
}

impl From<TargetArg> for EvalTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Test => EvalTarget::Test,
            TargetArg::Validation => EvalTarget::Validation,
        }
    }
}

/// Scores the held-out item 1 and everything else 0.
fn oracle_scorer(target: EvalTarget) -> impl Fn(&UserSplit, &[ItemId], &[ItemId]) -> mmrec_core::Result<Vec<f64>> {
    move |user: &UserSplit, _ctx: &[ItemId], cands: &[ItemId]| {
        let truth = match target {
            EvalTarget::Test => user.test,
            EvalTarget::Validation => user.valid,
        };
        Ok(cands
            .iter()
            .map(|&c| if Some(c) == truth { 1.0 } else { 0.0 })
            .collect())
    }
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    oracle: bool,
    target: EvalTarget,
) -> Result<Recorder> {
    let stem = match checkpoint {
        Some(p) => p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into()),
        None => "oracle".to_string(),
    };
    let mut rec = Recorder::new(&cfg.out_dir, &format!("eval.{stem}"), &cfg.bytes, cfg.seed);
    rec.stage("load");
    let loaded = load_data(cfg, None)?;
    let model = match (checkpoint, oracle) {
        (Some(_), true) | (None, false) => {
            return Err(CliError::Usage(
                "eval takes either a checkpoint path or --oracle".into(),
            ));
        }
        (Some(p), false) => Some(load_any(&read_checkpoint(p)?, cfg, &loaded)?),
        (None, true) => None,
    };
    rec.stage("evaluate");
    let oracle_fn = oracle_scorer(target);
    let scorer: &dyn Scorer = match &model {
        None => &oracle_fn,
        Some(AnyModel::Transformer(m)) => &ModelScorer {
            model: m,
            aux: &loaded.tables,
        },
        Some(AnyModel::Pop(m)) => m,
        Some(AnyModel::Bpr(m)) => m,
        Some(AnyModel::TransRec(m)) => m,
    };
    let report = evaluate(scorer, &loaded.split, target, &cfg.eval).stage("eval")?;
    prepare_out(cfg)?;
    rec.stage("write");
    rec.output(&format!("{stem}.metrics.tsv"), report.to_tsv().as_bytes())?;
    rec.output(&format!("{stem}.metrics.json"), (report.to_json() + "\n").as_bytes())?;
    let catalog = &loaded.split.catalog;
    rec.output(
        &format!("{stem}.ranks.tsv"),
        report.per_user_tsv(|u| catalog.user_raw(u).to_string()).as_bytes(),
    )?;
    Ok(rec)
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Recorder> {
    let mut rec = Recorder::new(&cfg.out_dir, "ablate", &cfg.bytes, cfg.seed);
    rec.stage("load");
    let loaded = load_data(cfg, None)?;
    let all_rows = standard_ablation_rows(cfg.model.dim).stage("ablate")?;
    let rows = if cfg.ablation.rows.is_empty() {
        all_rows
    } else {
        cfg.ablation
            .rows
            .iter()
            .map(|&i| {
                all_rows
                    .get(i.wrapping_sub(1))
                    .cloned()
                    .ok_or_else(|| CliError::Config(format!("ablation.rows: {i} is not in 1..={}", all_rows.len())))
            })
            .collect::<Result<Vec<_>>>()?
    };
    for r in &rows {
        if let Some(m) = r.fusion.enabled.iter().find(|&&m| loaded.tables.get(m).is_none()) {
            return Err(CliError::Config(format!(
                "ablation row {} needs a {m} table (data.{m})",
                r.label
            )));
        }
    }
    let seeds: Vec<u64> = (0..cfg.ablation.runs).map(|i| cfg.run_seed(i)).collect();
    let bases: Vec<ModelConfig> = cfg
        .ablation
        .variants
        .iter()
        .map(|&v| variant_config(&cfg.model, v))
        .collect();

    rec.stage("grid");
    let grid = ablation_run(&loaded.split, &loaded.tables, &bases, &rows, &seeds, &cfg.eval).stage("ablate")?;

    rec.stage("reference");
    let mut reference = Vec::with_capacity(bases.len());
    for base in &bases {
        let series = seeds
            .iter()
            .map(|&s| train_and_test(&loaded.split, &loaded.tables, base, None, s, &cfg.eval))
            .collect::<mmrec_core::Result<Vec<f64>>>()
            .map_err(|e| CliError::Core {
                stage: "ablate",
                source: mmrec_core::Error::Config(format!("reference cell [{}]: {e}", base.variant.name())),
            })?;
        reference.push(series);
    }

    prepare_out(cfg)?;
    rec.stage("write");
    rec.output("ablation.tsv", grid.to_tsv().as_bytes())?;
    rec.output("ablation_series.tsv", grid.series_tsv().as_bytes())?;
    let mut ref_tsv = String::from("variant\tseed\tndcg10\n");
    for (base, series) in bases.iter().zip(&reference) {
        for (seed, x) in seeds.iter().zip(series) {
            writeln!(ref_tsv, "{}\t{seed}\t{x:.6}", base.variant.name()).unwrap();
        }
    }
    rec.output("ablation_reference.tsv", ref_tsv.as_bytes())?;
    let mut tt = String::from("row\tvariant\tmean_without_aux\tmean_with_aux\tmean_diff\tt\tdf\tp\n");
    for (label, cells) in grid.labels.iter().zip(&grid.cells) {
        for ((base, cell), ref_series) in bases.iter().zip(cells).zip(&reference) {
            match paired_t_test(ref_series, &cell.series) {
                Ok(r) => writeln!(
                    tt,
                    "{label}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6e}",
                    base.variant.name(),
                    r.mean_a,
                    r.mean_b,
                    r.mean_diff,
                    r.t,
                    r.df,
                    r.p
                ),
                Err(_) => writeln!(tt, "{label}\t{}\tNA\tNA\tNA\tNA\tNA\tNA", base.variant.name()),
            }
            .unwrap();
        }
    }
    rec.output("ttests.tsv", tt.as_bytes())?;
    Ok(rec)
}

fn read_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || CliError::Config(format!("{}: line {} is not `user_id<TAB>label`", path.display(), i + 1));
        let (user, label) = line.split_once('\t').ok_or_else(bad)?;
        out.insert(user.to_string(), label.trim().parse().map_err(|_| bad())?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct AnalysisSummary {
    users: usize,
    k: usize,
    cluster_sizes: Vec<usize>,
    block_diagonal_score: f64,
    label_agreement: Option<f64>,
}

pub fn cmd_analyze(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Recorder> {
    let mut rec = Recorder::new(&cfg.out_dir, "analyze", &cfg.bytes, cfg.seed);
    rec.stage("load");
    let loaded = load_data(cfg, None)?;
    let ck = read_checkpoint(checkpoint)?;
    if !matches!(ck.tag.as_str(), "sasrec_plus" | "bert4rec_plus") {
        return Err(CliError::Compatibility(format!(
            "analyze needs a transformer checkpoint, got `{}`",
            ck.tag
        )));
    }
    let model = load_transformer(&ck, cfg, &loaded)?;

    rec.stage("profiles");
    let profiles = loaded
        .split
        .users
        .iter()
        .map(|u| extract_profile(&model, u, &loaded.tables))
        .collect::<mmrec_core::Result<Vec<_>>>()
        .stage("analyze")?;
    let vectors: Vec<Vec<f64>> = profiles.iter().map(|p| p.vector.clone()).collect();

    rec.stage("cluster");
    let a = &cfg.analysis;
    let mut rng = SeededRng::new(cfg.seed).derive(stage::ANALYSIS);
    let elbow = elbow_select(&vectors, a.k_min..=a.k_max, a.restarts, &mut rng, a.max_iter).stage("analyze")?;
    let km = kmeans_best(&vectors, elbow.k, a.restarts, &mut rng, a.max_iter).stage("analyze")?;
    let clusters: Vec<usize> = (0..elbow.k).collect();
    let map = heatmap(&vectors, &km.assignments, &clusters, a.set_size, &mut rng).stage("analyze")?;
    let catalog = &loaded.split.catalog;
    let agreement = match &cfg.data.labels {
        None => None,
        Some(path) => {
            let labels = read_labels(path)?;
            let truth = profiles
                .iter()
                .map(|p| {
                    let raw = catalog.user_raw(p.user);
                    labels
                        .get(raw)
                        .copied()
                        .ok_or_else(|| CliError::Config(format!("labels file has no entry for user `{raw}`")))
                })
                .collect::<Result<Vec<usize>>>()?;
            Some(label_agreement(&km.assignments, &truth))
        }
    };

    prepare_out(cfg)?;
    rec.stage("write");
    let mut prof = String::new();
    for p in &profiles {
        prof.push_str(catalog.user_raw(p.user));
        for v in &p.vector {
            write!(prof, "\t{v:.8}").unwrap();
        }
        prof.push('\n');
    }
    rec.output("profiles.tsv", prof.as_bytes())?;
    let mut el = String::from("k\twcss\n");
    for (k, w) in &elbow.wcss {
        writeln!(el, "{k}\t{w:.8}").unwrap();
    }
    rec.output("elbow.tsv", el.as_bytes())?;
    let mut cl = String::from("user_id\tcluster\n");
    for (p, c) in profiles.iter().zip(&km.assignments) {
        writeln!(cl, "{}\t{c}", catalog.user_raw(p.user)).unwrap();
    }
    rec.output("clusters.tsv", cl.as_bytes())?;
    rec.output("heatmap.tsv", map.to_tsv().as_bytes())?;
    let mut sizes = vec![0; elbow.k];
    km.assignments.iter().for_each(|&c| sizes[c] += 1);
    let summary = AnalysisSummary {
        users: profiles.len(),
        k: elbow.k,
        cluster_sizes: sizes,
        block_diagonal_score: block_diagonal_score(&map.cells),
        label_agreement: agreement,
    };
    rec.output(
        "analysis.json",
        (serde_json::to_string_pretty(&summary).unwrap() + "\n").as_bytes(),
    )?;
    Ok(rec)
}
