//! Short optimization runs on fixed data.

use std::fs;
use std::path::PathBuf;

use hoi_groups::cli::{build_model, loss_curve_csv, RunConfig};
use hoi_groups::model::{train_step, Example, LossComponents};
use hoi_groups::synth::{generate_scene, scene_example, scene_seed, Split};

fn small_config() -> RunConfig {
    RunConfig::from_text(
        "d_entity = 16\nencoder_layers = 1\ninstance_layers = 2\ninteraction_layers = 2\n\
         n_queries = 8\nheads = 2\nlr = 0.002\n",
    )
    .unwrap()
}

fn fixed_scenes(cfg: &RunConfig, n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let scene = generate_scene(scene_seed(cfg.seed, Split::Train, i), &cfg.synth).unwrap();
            scene_example(&scene, &cfg.synth).unwrap()
        })
        .collect()
}

fn overfit(steps: usize) -> Vec<LossComponents> {
    let cfg = small_config();
    let data = fixed_scenes(&cfg, 10);
    let (model, mut store) = build_model(&cfg.model, cfg.seed).unwrap();
    (0..steps)
        .map(|_| train_step(&model, &mut store, &data, &cfg.train, cfg.train.lr).unwrap().loss)
        .collect()
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn totals(csv: &str) -> Vec<f64> {
    csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

#[test]
fn fixed_set_loss_halves_within_200_steps_and_matches_fixture() {
    let losses = overfit(200);
    let first = losses[0].total;
    let last = losses.last().unwrap().total;
    assert!(last <= 0.5 * first, "loss {first} -> {last}");

    let csv = loss_curve_csv(&losses);
    let path = fixture("overfit_loss_curve.csv");
    if std::env::var_os("UPDATE_FIXTURES").is_some() || !path.exists() {
        fs::write(&path, &csv).unwrap();
        return;
    }
    let stored = totals(&fs::read_to_string(&path).unwrap());
    let fresh = totals(&csv);
    assert_eq!(stored.len(), fresh.len());
    for (i, (a, b)) in stored.iter().zip(&fresh).enumerate() {
        assert!((a - b).abs() <= 1e-9 * a.abs(), "step {}: fixture {a} vs {b}", i + 1);
    }
}

#[test]
fn training_is_repeatable() {
    let a = overfit(5);
    let b = overfit(5);
    assert_eq!(a, b);
}

#[test]
fn loss_components_are_finite_and_non_negative() {
    for l in overfit(3) {
        for v in [l.total, l.box_l1, l.giou, l.object, l.interaction] {
            assert!(v.is_finite() && v >= 0.0, "{l:?}");
        }
    }
}
