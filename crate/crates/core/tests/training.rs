use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use coherent_concepts::config::RunConfig;
use coherent_concepts::dataset::{generate_synthetic, SyntheticSpec};
use coherent_concepts::model::{BackboneRegistry, ConceptModel, ParamGroup};
use coherent_concepts::pipeline::{build_model, prepare_splits, run_training, PreparedSplits};
use coherent_concepts::training::{train, StageSchedule, TrainOptions};
use tempfile::TempDir;

struct Fixture {
    _dir: TempDir,
    manifest: PathBuf,
}

fn fixture() -> &'static Fixture {
    static DATA: OnceLock<Fixture> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            image_size: 32,
            ..SyntheticSpec::default()
        };
        generate_synthetic(40, 3, &spec, dir.path()).unwrap();
        Fixture {
            manifest: dir.path().join("manifest.csv"),
            _dir: dir,
        }
    })
}

fn config() -> RunConfig {
    RunConfig {
        image_size: 32,
        embed_dim: 16,
        phrase_dim: 16,
        dropout: 0.2,
        batch_size: 8,
        epochs: [2, 2, 2],
        lrs: [1e-3, 1e-3, 1e-3],
        seed: 5,
        ..RunConfig::default()
    }
}

fn setup(cfg: &RunConfig) -> (ConceptModel, PreparedSplits) {
    let model = build_model(cfg, &BackboneRegistry::with_defaults()).unwrap();
    let splits = prepare_splits(cfg, &fixture().manifest, model.map_dims()).unwrap();
    (model, splits)
}

fn options(cfg: &RunConfig, epochs: [usize; 3]) -> TrainOptions {
    TrainOptions {
        schedule: StageSchedule::new(epochs, cfg.lrs),
        ..cfg.train_options()
    }
}

#[test]
fn stage_one_leaves_backbone_untouched() {
    let cfg = config();
    let (model, splits) = setup(&cfg);
    let out = train(model.clone(), &splits.train, &splits.val, &options(&cfg, [2, 0, 0])).unwrap();
    assert_eq!(out.model.group(ParamGroup::Backbone), model.group(ParamGroup::Backbone));
    assert_ne!(out.model.group(ParamGroup::Encoder), model.group(ParamGroup::Encoder));
}

#[test]
fn stage_three_changes_only_the_classifier() {
    let cfg = config();
    let (model, splits) = setup(&cfg);
    let out = train(model.clone(), &splits.train, &splits.val, &options(&cfg, [0, 0, 2])).unwrap();
    for g in ParamGroup::ALL {
        let same = out.model.group(g) == model.group(g);
        assert_eq!(same, g != ParamGroup::Classifier, "{g}");
    }
}

#[test]
fn empty_schedule_returns_the_initial_model() {
    let cfg = config();
    let (model, splits) = setup(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..options(&cfg, [0, 0, 0])
    };
    let out = train(model.clone(), &splits.train, &splits.val, &opts).unwrap();
    for g in ParamGroup::ALL {
        assert_eq!(out.model.group(g), model.group(g));
        assert_eq!(out.best.group(g), model.group(g));
    }
    assert!(out.epochs.is_empty());
    assert!(dir.path().join("best.json").is_file());
}

#[test]
fn same_seed_gives_identical_models() {
    let cfg = config();
    let a = run_training(&cfg, &fixture().manifest, None).unwrap().outcome;
    let b = run_training(&cfg, &fixture().manifest, None).unwrap().outcome;
    for g in ParamGroup::ALL {
        assert_eq!(a.model.group(g), b.model.group(g), "{g}");
    }
    assert_eq!(a.epochs, b.epochs);
}

#[test]
fn training_loss_falls_over_the_first_epochs() {
    let cfg = RunConfig {
        dropout: 0.0,
        ..config()
    };
    let (model, splits) = setup(&cfg);
    let out = train(model, &splits.train, &splits.val, &options(&cfg, [5, 0, 0])).unwrap();
    let first = out.epochs[0].loss.total;
    let fifth = out.epochs[4].loss.total;
    assert!(fifth < first, "epoch 1 loss {first}, epoch 5 loss {fifth}");
}

#[test]
fn best_model_tracks_the_highest_validation_accuracy() {
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    let run = run_training(&cfg, &fixture().manifest, Some(dir.path())).unwrap();
    let out = run.outcome;
    let max = out.epochs.iter().map(|e| e.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_accuracy, Some(max));
    let (best, meta) = ConceptModel::load(&dir.path().join("best.json"), &BackboneRegistry::with_defaults()).unwrap();
    assert_eq!(meta.val_accuracy, Some(max));
    for g in ParamGroup::ALL {
        assert_eq!(best.group(g), out.best.group(g));
    }
    assert!(written(dir.path(), "metrics.jsonl") && written(dir.path(), "steps.jsonl"));
}

fn written(dir: &Path, name: &str) -> bool {
    std::fs::metadata(dir.join(name)).map(|m| m.len() > 0).unwrap_or(false)
}
