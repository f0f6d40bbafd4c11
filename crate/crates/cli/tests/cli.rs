use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use mmrec_cli::commands::load_data;
use mmrec_cli::config::{ExperimentConfig, Needs};
use mmrec_cli::manifest::{sha256_hex, RunManifest};
use mmrec_core::aux::{load_modality_table, Modality};
use mmrec_core::checkpoint::Checkpoint;
use mmrec_core::eval::ndcg_at_n;
use mmrec_core::model::TransformerModel;

fn mmrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmrec"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = mmrec(dir, args);
    assert!(
        out.status.success(),
        "mmrec {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Asserts failure with a single `error[<category>]` line on stderr.
fn fails(dir: &Path, args: &[&str], category: &str) -> String {
    let out = mmrec(dir, args);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{category}]: ")), "{err}");
    err
}

const SYNTH: &str = "seed = 3\n[synth]\nusers = 30\nitems = 120\ncategories = 6\nmin_len = 4\nmax_len = 8\ntext_dim = 6\nimage_dim = 4\n";

const MODEL: &str = "\n[model]\ndim = 8\nmax_len = 8\nepochs = 2\nbatch_size = 8\n[eval]\nnegatives = 20\n[baselines]\nfactors = 4\nepochs = 2\n";

/// Synthesizes into `dir/data` and writes `dir/data/run.toml` with the
/// generated config plus `extra`.
fn dataset(dir: &Path, extra: &str) {
    fs::write(dir.join("synth.toml"), SYNTH).unwrap();
    ok(dir, &["--config", "synth.toml", "--out", "data", "synth"]);
    let generated = fs::read_to_string(dir.join("data/experiment.toml")).unwrap();
    fs::write(dir.join("data/run.toml"), generated + extra).unwrap();
}

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_is_reproducible_and_reingests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d, MODEL);
    ok(d, &["--config", "synth.toml", "--out", "again", "synth"]);
    for f in [
        "interactions.tsv",
        "text.tsv",
        "image.tsv",
        "attributes.tsv",
        "labels.tsv",
        "experiment.toml",
    ] {
        assert_eq!(
            fs::read(d.join("data").join(f)).unwrap(),
            fs::read(d.join("again").join(f)).unwrap(),
            "{f}"
        );
    }
    let m = manifest(&d.join("data/synth.manifest.json"));
    assert_eq!(m.config_sha256, sha256_hex(SYNTH.as_bytes()));
    for s in &m.stages {
        for f in &s.outputs {
            assert!(fs::metadata(d.join("data").join(f)).unwrap().len() > 0, "{f}");
        }
    }
    let cfg = ExperimentConfig::load(&d.join("data/run.toml"), None, None, Needs::All).unwrap();
    let loaded = load_data(&cfg, None).unwrap();
    assert_eq!(loaded.split.num_users(), 30);
    assert_eq!(loaded.tables.modalities(), vec![Modality::Text, Modality::Image]);

    ok(d, &["--config", "synth.toml", "--seed", "4", "--out", "other", "synth"]);
    assert_ne!(
        fs::read(d.join("data/interactions.tsv")).unwrap(),
        fs::read(d.join("other/interactions.tsv")).unwrap()
    );
}

#[test]
fn error_lines_carry_a_category() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("zero.toml"), "seed = 1\n[synth]\nusers = 0\n").unwrap();
    fails(d, &["--config", "zero.toml", "synth"], "config");
    fs::write(d.join("bad.toml"), "seed = 1\nunknown_key = 2\n").unwrap();
    fails(d, &["--config", "bad.toml", "synth"], "config");
    fails(d, &["--config", "missing.toml", "synth"], "file");
    fails(d, &["synth"], "usage");
    fails(d, &["--config", "zero.toml", "frobnicate"], "usage");

    dataset(d, MODEL);
    fails(d, &["--config", "data/run.toml", "eval", "nowhere.ckpt"], "file");
    let err = fails(
        d,
        &[
            "--config",
            "data/run.toml",
            "--out",
            "bad",
            "eval",
            "data/interactions.tsv",
        ],
        "checkpoint",
    );
    assert!(err.contains("stage checkpoint"), "{err}");
}

#[test]
fn training_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Fusion asks for a tabular table that is not configured.
    dataset(
        d,
        &format!("{MODEL}[fusion]\nmode = \"sum\"\nenabled = [\"tabular\"]\ndim = 8\n"),
    );
    let err = fails(d, &["--config", "data/run.toml", "train", "sasrec_plus"], "config");
    assert!(err.contains("stage train"), "{err}");
}

#[test]
fn gbdt_single_tree_gives_one_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d, "\n[gbdt]\ngrid = [{ trees = 1, max_depth = 2, shrinkage = 1.0 }]\n");
    ok(d, &["--config", "data/run.toml", "--out", "tab", "gbdt-embed"]);
    let text = fs::read_to_string(d.join("tab/tabular.tsv")).unwrap();
    assert!(
        text.starts_with("modality=tabular dim=1"),
        "{}",
        text.lines().next().unwrap()
    );
    let cfg = ExperimentConfig::load(&d.join("data/run.toml"), None, None, Needs::All).unwrap();
    let catalog = load_data(&cfg, None).unwrap().split.catalog;
    let t = load_modality_table(
        BufReader::new(fs::File::open(d.join("tab/tabular.tsv")).unwrap()),
        &catalog,
    )
    .unwrap();
    assert_eq!(
        (t.modality, t.dim(), t.len()),
        (Modality::Tabular, 1, catalog.num_items())
    );

    ok(d, &["--config", "data/run.toml", "--out", "tab2", "gbdt-embed"]);
    assert_eq!(
        fs::read(d.join("tab/tabular.tsv")).unwrap(),
        fs::read(d.join("tab2/tabular.tsv")).unwrap()
    );

    fs::write(d.join("data/unrated.tsv"), "u1\ti00001\t1\nu1\ti00002\t2\n").unwrap();
    let unrated = fs::read_to_string(d.join("data/run.toml"))
        .unwrap()
        .replace("\"interactions.tsv\"", "\"unrated.tsv\"");
    fs::write(d.join("data/unrated.toml"), unrated).unwrap();
    fails(
        d,
        &["--config", "data/unrated.toml", "--out", "tab3", "gbdt-embed"],
        "config",
    );
}

#[test]
fn zero_epochs_checkpoint_holds_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d, &MODEL.replace("epochs = 2\nbatch", "epochs = 0\nbatch"));
    ok(
        d,
        &["--config", "data/run.toml", "--out", "m", "train", "bert4rec_plus"],
    );
    let cfg = ExperimentConfig::load(&d.join("data/run.toml"), None, None, Needs::All).unwrap();
    let loaded = load_data(&cfg, None).unwrap();
    let model_cfg = mmrec_core::model::ModelConfig {
        variant: mmrec_core::model::Variant::Bert4recPlus,
        ..cfg.model.clone()
    };
    let fresh = TransformerModel::new(&model_cfg, loaded.split.num_items(), None, &loaded.tables).unwrap();
    assert_eq!(
        fs::read(d.join("m/bert4rec_plus.ckpt")).unwrap(),
        fresh.to_checkpoint().to_bytes()
    );
    assert_eq!(
        fs::read_to_string(d.join("m/bert4rec_plus.curves.tsv"))
            .unwrap()
            .lines()
            .count(),
        1
    );
}

#[test]
fn train_curves_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d, MODEL);
    for v in ["sasrec_plus", "bpr", "transrec"] {
        ok(d, &["--config", "data/run.toml", "--out", "m1", "train", v]);
        ok(d, &["--config", "data/run.toml", "--out", "m2", "train", v]);
        let ck = format!("{v}.ckpt");
        assert_eq!(
            fs::read(d.join("m1").join(&ck)).unwrap(),
            fs::read(d.join("m2").join(&ck)).unwrap()
        );
        let curves = fs::read_to_string(d.join("m1").join(format!("{v}.curves.tsv"))).unwrap();
        assert_eq!(curves.lines().count(), 1 + 2, "{v}");
        let c = Checkpoint::from_bytes(&fs::read(d.join("m1").join(&ck)).unwrap()).unwrap();
        assert_eq!(c.tag, v);
    }
}

#[test]
fn eval_reports_and_compatibility() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d, MODEL);
    ok(d, &["--config", "data/run.toml", "--out", "e", "eval", "--oracle"]);
    let tsv = fs::read_to_string(d.join("e/oracle.metrics.tsv")).unwrap();
    for line in tsv.lines().skip(1).filter(|l| !l.starts_with("users")) {
        assert!(line.ends_with("\t1.000000"), "{line}");
    }

    ok(d, &["--config", "data/run.toml", "--out", "m", "train", "sasrec_plus"]);
    ok(
        d,
        &["--config", "data/run.toml", "--out", "e", "eval", "m/sasrec_plus.ckpt"],
    );
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("e/sasrec_plus.metrics.json")).unwrap()).unwrap();
    let ranks = fs::read_to_string(d.join("e/sasrec_plus.ranks.tsv")).unwrap();
    let per_user: Vec<usize> = ranks
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(per_user.len() as u64, report["users"].as_u64().unwrap());
    let mean = per_user.iter().map(|&r| ndcg_at_n(r, 10)).sum::<f64>() / per_user.len() as f64;
    assert!((mean - report["ndcg_10"].as_f64().unwrap()).abs() < 1e-12);

    let wider = fs::read_to_string(d.join("data/run.toml"))
        .unwrap()
        .replace("dim = 8", "dim = 16");
    fs::write(d.join("data/wide.toml"), wider).unwrap();
    let err = fails(
        d,
        &[
            "--config",
            "data/wide.toml",
            "--out",
            "e2",
            "eval",
            "m/sasrec_plus.ckpt",
        ],
        "compatibility",
    );
    assert!(err.contains("d: checkpoint 8, config/data 16"), "{err}");
    fails(d, &["--config", "data/run.toml", "--out", "e2", "eval"], "usage");
}

#[test]
fn ablate_single_cell_two_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(
        d,
        &format!("{MODEL}[ablation]\nruns = 2\nvariants = [\"sasrec_plus\"]\nrows = [2]\n"),
    );
    ok(d, &["--config", "data/run.toml", "--out", "ab", "ablate"]);
    let grid = fs::read_to_string(d.join("ab/ablation.tsv")).unwrap();
    assert_eq!(grid.lines().collect::<Vec<_>>()[0], "row\tsasrec_plus");
    assert_eq!(grid.lines().count(), 2);
    assert!(grid.contains("(2) Image\t"));
    assert_eq!(
        fs::read_to_string(d.join("ab/ablation_series.tsv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    assert_eq!(fs::read_to_string(d.join("ab/ttests.tsv")).unwrap().lines().count(), 2);

    fs::write(
        d.join("data/bad.toml"),
        fs::read_to_string(d.join("data/run.toml"))
            .unwrap()
            .replace("rows = [2]", "rows = [3]"),
    )
    .unwrap();
    let err = fails(d, &["--config", "data/bad.toml", "--out", "ab2", "ablate"], "config");
    assert!(err.contains("(3) Tabular"), "{err}");
}

#[test]
fn analyze_finds_planted_archetypes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("synth.toml"),
        "seed = 8\n[synth]\nusers = 200\nitems = 300\ncategories = 20\narchetypes = 4\nmin_len = 4\nmax_len = 23\nband_gap = 3\ntext_dim = 8\nimage_dim = 8\n",
    )
    .unwrap();
    ok(d, &["--config", "synth.toml", "--out", "data", "synth"]);
    let run = fs::read_to_string(d.join("data/experiment.toml")).unwrap()
        + "\n[model]\ndim = 16\nmax_len = 20\nepochs = 3\n[fusion]\nmode = \"concat\"\nenabled = [\"text\", \"image\"]\ndim = 16\n";
    fs::write(d.join("data/run.toml"), run).unwrap();
    ok(d, &["--config", "data/run.toml", "--out", "m", "train", "sasrec_plus"]);
    ok(
        d,
        &[
            "--config",
            "data/run.toml",
            "--out",
            "a1",
            "analyze",
            "m/sasrec_plus.ckpt",
        ],
    );
    ok(
        d,
        &[
            "--config",
            "data/run.toml",
            "--out",
            "a2",
            "analyze",
            "m/sasrec_plus.ckpt",
        ],
    );
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(d.join("a1/analysis.json")).unwrap()).unwrap();
    assert_eq!(summary["k"], 4);
    assert!(summary["label_agreement"].as_f64().unwrap() >= 0.9);
    let heat = fs::read_to_string(d.join("a1/heatmap.tsv")).unwrap();
    assert_eq!(heat.lines().count(), 5);
    assert!(heat.lines().all(|l| l.split('\t').count() == 5));
    assert_eq!(
        fs::read(d.join("a1/analysis.json")).unwrap(),
        fs::read(d.join("a2/analysis.json")).unwrap()
    );

    ok(d, &["--config", "data/run.toml", "--out", "m", "train", "poprec"]);
    fails(
        d,
        &["--config", "data/run.toml", "--out", "a3", "analyze", "m/poprec.ckpt"],
        "compatibility",
    );
}
