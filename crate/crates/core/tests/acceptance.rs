//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Tolerances are fixed below.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use attnmil::dataset::synthetic::{generate_synthetic, synthetic_meta_class};
use attnmil::dataset::Split;
use attnmil::inference::{accumulate_heatmap, predict_with_heatmap, segment};
use attnmil::metrics::{classification_metrics, evaluate_testset, iou, pixel_ap, ConfusionMatrix, GroundTruth};
use attnmil::model::{BackboneKind, MilModel, ModelConfig};
use attnmil::patchbag::{count_patches, enumerate_grid, GridSpec, Origin, PatchBag};
use attnmil::training::{fit, FitOptions, TrainConfig};
use ndarray::{Array2, Array3};
use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Percentage-point tolerance for recomputed classification metrics.
const METRIC_TOL_PP: f64 = 0.1;
/// Looser bound for the bakery row, whose printed values carry extra rounding.
const BAKERY_TOL_PP: f64 = 0.15;
const GRID_MIN_COMBOS: usize = 200;
const GRID_BUDGET_SECS: f64 = 5.0;
const INVARIANT_TOL: f64 = 1e-6;
const INVARIANT_BUDGET_SECS: f64 = 30.0;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET_SECS: f64 = 30.0;
const AP_MIN_CASES: usize = 1000;
const AP_TOL: f64 = 1e-12;
const AP_BUDGET_SECS: f64 = 60.0;
const DESK_MIN_ACCURACY: f64 = 0.90;
const DESK_MIN_IOU: f64 = 0.40;
const DESK_BUDGET_SECS: f64 = 15.0 * 60.0;
/// Band around the published FoodSeg103 numbers for a full recipe run.
const REFERENCE_BAND_PP: f64 = 5.0;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 7] = [
        ("a", "classification metrics reproduce the published tables", metric_oracle),
        ("b", "closed-form patch count equals grid enumeration", grid_equivalence),
        ("c", "attention pooling invariants", mil_invariants),
        ("d", "attention and head gradients match finite differences", gradient_check),
        ("e", "pixel AP and IoU match brute-force oracles", ap_iou_oracles),
        ("f", "desk-scale synthetic run", desk_run),
        ("g", "FoodSeg103 reference recipe", foodseg_reference),
    ];
    let mut failed = 0;
    for (tag, name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == tag) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{status} [{tag}] {name}: {detail} ({secs:.2}s)");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/reference_metrics.toml")
}

fn reference() -> toml::Table {
    let text = std::fs::read_to_string(fixture_path()).expect("reference fixture");
    text.parse().expect("reference fixture parses")
}

fn num(t: &toml::Table, key: &str) -> f64 {
    match &t[key] {
        toml::Value::Float(f) => *f,
        toml::Value::Integer(i) => *i as f64,
        v => panic!("{key}: {v:?}"),
    }
}

fn metric_oracle() -> Outcome {
    let refs = reference();
    let mut worst = Vec::new();
    let mut ok = true;
    for class in ["meat", "bakery"] {
        let t = refs[class].as_table().unwrap();
        let c: Vec<u64> = t["confusion"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_integer().unwrap() as u64)
            .collect();
        let m = match classification_metrics(&ConfusionMatrix::new(c[0], c[1], c[2], c[3])) {
            Ok(m) => m,
            Err(e) => return Outcome::Fail(e.to_string()),
        };
        let got = [Some(m.accuracy), m.precision, m.recall, m.f1];
        let mut max_dev: f64 = 0.0;
        for (key, v) in ["accuracy", "precision", "recall", "f1"].iter().zip(got) {
            let tol = if class == "bakery" {
                BAKERY_TOL_PP
            } else {
                METRIC_TOL_PP
            };
            let Some(v) = v else {
                return Outcome::Fail(format!("{class} {key} undefined"));
            };
            let dev = (100.0 * v - num(t, key)).abs();
            max_dev = max_dev.max(dev);
            if dev > tol + 1e-9 {
                ok = false;
                worst.push(format!("{class} {key} {:.3}% vs {}%", 100.0 * v, num(t, key)));
            }
        }
        worst.push(format!("{class} max deviation {max_dev:.3}pp"));
    }
    let detail = worst.join("; ");
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

/// Overlap values as exact fractions.
const OVERLAPS: [(i64, i64); 8] = [(0, 1), (1, 4), (1, 2), (5, 8), (3, 4), (7, 8), (15, 16), (31, 32)];

fn grid_equivalence() -> Outcome {
    let start = Instant::now();
    let mut combos = 0;
    let mut saw_reference = false;
    for image in [16usize, 24, 32, 40, 48, 64, 80, 96, 100, 128, 160, 192, 200, 256, 320, 384, 512] {
        for patch in [4usize, 8, 12, 16, 24, 32, 48, 64] {
            if patch > image {
                continue;
            }
            for (num_t, den_t) in OVERLAPS {
                let t = Ratio::new(num_t, den_t);
                let stride = Ratio::from_integer(patch as i64) * (Ratio::from_integer(1) - t);
                let span = Ratio::from_integer((image - patch) as i64);
                if !stride.is_integer() || (span / stride).fract() != Ratio::from_integer(0) {
                    continue;
                }
                // Brute force: walk the stride in exact arithmetic, count every
                // (row, col) pair that stays inside the image.
                let mut axis = Vec::new();
                let mut x = Ratio::from_integer(0);
                while x <= span {
                    axis.push(x.to_integer() as usize);
                    x += stride;
                }
                let mut brute = HashSet::new();
                for &r in &axis {
                    for &c in &axis {
                        brute.insert(Origin { row: r, col: c });
                    }
                }
                let spec = match GridSpec::new(image, patch, num_t as f64 / den_t as f64) {
                    Ok(s) => s,
                    Err(e) => return Outcome::Fail(format!("({image}, {patch}, {num_t}/{den_t}): {e}")),
                };
                let closed = count_patches(&spec).unwrap();
                let listed: HashSet<Origin> = enumerate_grid(&spec).unwrap().into_iter().collect();
                if closed != brute.len() || listed != brute {
                    return Outcome::Fail(format!(
                        "({image}, {patch}, {num_t}/{den_t}): closed form {closed}, brute force {}",
                        brute.len()
                    ));
                }
                if (image, patch, num_t, den_t) == (512, 64, 7, 8) {
                    if closed != 3249 {
                        return Outcome::Fail(format!("(512, 64, 0.875) gave {closed}"));
                    }
                    saw_reference = true;
                }
                combos += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if combos < GRID_MIN_COMBOS || !saw_reference || secs > GRID_BUDGET_SECS {
        return Outcome::Fail(format!("{combos} combos, reference seen: {saw_reference}, {secs:.2}s"));
    }
    Outcome::Pass(format!("{combos} combos agree; (512, 64, 0.875) -> 3249"))
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn random_bag(seed: u64, k: usize, patch: usize) -> PatchBag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchBag {
        patches: (0..k)
            .map(|_| Array3::from_shape_fn((patch, patch, 3), |_| rng.gen::<f32>()))
            .collect(),
        origins: (0..k).map(|i| Origin { row: i, col: 0 }).collect(),
        source_image_id: format!("random{seed}"),
        patch_size: patch,
    }
}

fn random_model(seed: u64, patch: usize, m: usize, l: usize, width: usize) -> MilModel<f32> {
    MilModel::new(
        ModelConfig {
            backbone: BackboneKind::SmallCnn {
                widths: [width, width * 2, width * 2],
            },
            patch_size: patch,
            embed_dim: m,
            attention_dim: l,
        },
        seed,
    )
    .unwrap()
}

fn model_strategy() -> impl Strategy<Value = (u64, u64, usize, usize, usize, usize, usize)> {
    (
        any::<u64>(),
        any::<u64>(),
        1usize..40,
        prop_oneof![Just(8usize), Just(16)],
        2usize..24,
        2usize..24,
        prop_oneof![Just(4usize), Just(8)],
    )
}

fn mil_invariants() -> Outcome {
    let start = Instant::now();
    let worst = std::cell::RefCell::new([0.0f64; 3]);
    let report = |i: usize, v: f64| {
        let mut w = worst.borrow_mut();
        w[i] = w[i].max(v);
    };
    let result = runner(40).run(&model_strategy(), |(ms, bs, k, patch, m, l, w)| {
        let model = random_model(ms, patch, m, l, w);
        let bag = random_bag(bs, k, patch);
        let out = model.forward(&bag).unwrap();

        let sum: f64 = out.weights.iter().map(|&v| v as f64).sum();
        report(0, (sum - 1.0).abs());
        prop_assert!((sum - 1.0).abs() <= INVARIANT_TOL, "weights sum to {}", sum);

        let mut order: Vec<usize> = (0..k).collect();
        order.reverse();
        order.rotate_left(k / 3);
        let permuted = model.forward(&bag.permuted(&order)).unwrap();
        let dp = (permuted.probability - out.probability).abs() as f64;
        report(1, dp);
        prop_assert!(dp <= INVARIANT_TOL, "permutation moved probability by {}", dp);

        let doubled = bag.permuted(&(0..2 * k).map(|i| i % k).collect::<Vec<_>>());
        let dz = model
            .forward(&doubled)
            .unwrap()
            .z
            .iter()
            .zip(out.z.iter())
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        report(2, dz);
        prop_assert!(dz <= INVARIANT_TOL, "duplication moved z by {}", dz);
        Ok(())
    });
    if let Err(e) = result {
        return Outcome::Fail(e.to_string());
    }

    let masks = runner(200).run(
        &(proptest::collection::vec(0.0f64..1.0, 25), 0.0f64..=1.0, 0.0f64..=1.0),
        |(raw, a1, a2)| {
            let spec = GridSpec::new(24, 8, 0.5).unwrap();
            let origins = enumerate_grid(&spec).unwrap();
            let total: f64 = raw.iter().sum::<f64>() + 1e-12;
            let weights: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let heat = accumulate_heatmap(&weights, &origins, &spec).unwrap();
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let low = segment(&heat, lo).unwrap();
            let high = segment(&heat, hi).unwrap();
            prop_assert!(high.iter().zip(&low).all(|(&h, &l)| !h || l));
            Ok(())
        },
    );
    if let Err(e) = masks {
        return Outcome::Fail(format!("mask monotonicity: {e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > INVARIANT_BUDGET_SECS {
        return Outcome::Fail(format!("took {secs:.1}s"));
    }
    Outcome::Pass(format!(
        "40 models: max |sum-1| {:.1e}, max permutation drift {:.1e}, max duplication drift {:.1e}; 200 mask pairs nested",
        worst.borrow()[0],
        worst.borrow()[1],
        worst.borrow()[2]
    ))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig {
        backbone: BackboneKind::small_cnn(),
        patch_size: 16,
        embed_dim: 4,
        attention_dim: 5,
    };
    let mut model = MilModel::<f64>::new(config, 21).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (bag_seed, label) in [(3u64, true), (4, false)] {
        let bag = random_bag(bag_seed, 3, 16);
        let analytic = model.loss_and_grads(&bag, label, 1.0, false).unwrap().grads;
        let ids: Vec<_> = model
            .params()
            .ids()
            .filter(|&id| {
                let name = &model.params().entry(id).name;
                name.starts_with("attention.") || name.starts_with("classifier.") || name.starts_with("projection.")
            })
            .collect();
        for id in ids {
            let grad = analytic.get(id).expect("head gradient present").clone();
            for i in 0..grad.len() {
                let h = 1e-5;
                let orig = model.params().get(id).as_slice().unwrap()[i];
                model.params_mut().get_mut(id).as_slice_mut().unwrap()[i] = orig + h;
                let up = model.bag_loss(&bag, label).unwrap();
                model.params_mut().get_mut(id).as_slice_mut().unwrap()[i] = orig - h;
                let down = model.bag_loss(&bag, label).unwrap();
                model.params_mut().get_mut(id).as_slice_mut().unwrap()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = grad.as_slice().unwrap()[i];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{checked} entries of V, w, classifier and projection; max relative error {worst:.2e}");
    if worst < GRAD_REL_TOL && secs <= GRAD_BUDGET_SECS {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

/// Average precision from an explicit precision/recall curve in exact
/// arithmetic: rank pixels by value (row-major among ties), then sum
/// precision × recall increment over every cut.
fn ap_oracle(values: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let cells: Vec<(f64, bool)> = values.iter().copied().zip(gt.iter().copied()).collect();
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| cells[b].0.partial_cmp(&cells[a].0).unwrap().then(a.cmp(&b)));
    let positives = cells.iter().filter(|c| c.1).count();
    let p = BigInt::from(positives);
    let mut tp = BigInt::from(0);
    let mut prev_recall = BigRational::from_integer(0.into());
    let mut ap = BigRational::from_integer(0.into());
    for (rank, &i) in order.iter().enumerate() {
        if cells[i].1 {
            tp += 1;
        }
        let precision = BigRational::new(tp.clone(), BigInt::from(rank + 1));
        let recall = BigRational::new(tp.clone(), p.clone());
        ap += precision * (&recall - &prev_recall);
        prev_recall = recall;
    }
    let (n, d) = (ap.numer().to_string(), ap.denom().to_string());
    n.parse::<f64>().unwrap() / d.parse::<f64>().unwrap()
}

fn iou_oracle(pred: &Array2<bool>, gt: &Array2<bool>) -> f64 {
    let set = |m: &Array2<bool>| -> HashSet<(usize, usize)> { m.indexed_iter().filter(|(_, &v)| v).map(|(i, _)| i).collect() };
    let (a, b) = (set(pred), set(gt));
    let union = a.union(&b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

fn ap_iou_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    while cases < AP_MIN_CASES {
        // Coarse value levels force many ties.
        let levels = [2u32, 5, 17, 1000][cases % 4];
        let values = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0..levels) as f64 / (levels - 1) as f64);
        let density: f64 = rng.gen_range(0.02..0.9);
        let gt = Array2::from_shape_fn((8, 8), |_| rng.gen_bool(density));
        let pred = Array2::from_shape_fn((8, 8), |_| rng.gen_bool(density));
        let expected_iou = iou_oracle(&pred, &gt);
        let got_iou = iou(&pred, &gt).unwrap();
        if got_iou != expected_iou {
            return Outcome::Fail(format!("iou {got_iou} vs oracle {expected_iou}"));
        }
        if !gt.iter().any(|&g| g) {
            if pixel_ap(&values, &gt).is_ok() {
                return Outcome::Fail("AP accepted an empty mask".into());
            }
            continue;
        }
        let expected = ap_oracle(&values, &gt);
        let got = pixel_ap(&values, &gt).unwrap();
        worst = worst.max((got - expected).abs());
        if (got - expected).abs() > AP_TOL {
            return Outcome::Fail(format!("AP {got} vs oracle {expected}"));
        }
        cases += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > AP_BUDGET_SECS {
        return Outcome::Fail(format!("took {secs:.1}s"));
    }
    Outcome::Pass(format!("{cases} random 8x8 cases; max AP deviation {worst:.1e}; IoU identical"))
}

fn desk_run() -> Outcome {
    let start = Instant::now();
    let records = generate_synthetic(7, 400, 128).unwrap();
    let (train, test): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.split == Split::Train);
    let patch = 16;
    let model = MilModel::new(
        ModelConfig {
            backbone: BackboneKind::small_cnn(),
            patch_size: patch,
            embed_dim: 128,
            attention_dim: 128,
        },
        1,
    )
    .unwrap();
    let config = TrainConfig {
        total_epochs: 20,
        frozen_epochs: 0,
        patch_size: patch,
        head_lr: 1e-3,
        backbone_lr: 1e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let trained = match fit(&train, model, &config, &FitOptions::default()) {
        Ok(t) => t,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let spec = GridSpec::new(128, patch, 0.875).unwrap();
    let map = synthetic_meta_class();
    let mut predictions = Vec::new();
    let mut heatmaps = HashMap::new();
    let mut truth = Vec::new();
    for r in &test {
        let (p, h) = predict_with_heatmap(r, &trained.model, &spec, 0.5, 0.3).unwrap();
        predictions.push(p);
        heatmaps.insert(r.image_id.clone(), h);
        truth.push(GroundTruth {
            image_id: r.image_id.clone(),
            label: r.label,
            mask: r.binary_mask(&map),
        });
    }
    let report = evaluate_testset(&predictions, Some(&heatmaps), &truth, 0.3).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let iou = report.mean_iou.unwrap_or(0.0);
    let first = trained.history.first().map_or(f64::NAN, |h| h.mean_loss);
    let last = trained.history.last().map_or(f64::NAN, |h| h.mean_loss);
    let detail = format!(
        "{} train / {} test images, loss {first:.3} -> {last:.3}, accuracy {:.3}, mean IoU {iou:.3}, mean AP {:.3}, {secs:.0}s",
        train.len(),
        test.len(),
        report.accuracy,
        report.mean_ap.unwrap_or(0.0)
    );
    if report.accuracy >= DESK_MIN_ACCURACY && iou >= DESK_MIN_IOU && secs <= DESK_BUDGET_SECS {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

/// Compares full-recipe reports against the published numbers when
/// `ATTNMIL_REFERENCE_REPORTS=meat=<metrics.json>,bakery=<metrics.json>`
/// is set; otherwise only checks that the recipe configs are present.
fn foodseg_reference() -> Outcome {
    let refs = reference();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for class in ["meat", "bakery"] {
        let path = root.join(format!("foodseg103_{class}.toml"));
        let Ok(text) = std::fs::read_to_string(&path) else {
            return Outcome::Fail(format!("missing recipe {}", path.display()));
        };
        let cfg: toml::Table = match text.parse() {
            Ok(c) => c,
            Err(e) => return Outcome::Fail(format!("{}: {e}", path.display())),
        };
        let meta = cfg.get("dataset").and_then(|d| d.get("meta_class")).and_then(|v| v.as_str());
        if meta != Some(class) {
            return Outcome::Fail(format!("{} targets {meta:?}", path.display()));
        }
    }
    let Ok(spec) = std::env::var("ATTNMIL_REFERENCE_REPORTS") else {
        let summary: Vec<String> = ["meat", "bakery"]
            .iter()
            .map(|c| {
                let t = refs[*c].as_table().unwrap();
                format!("{c} IoU {}% AP {}%", num(t, "iou"), num(t, "ap"))
            })
            .collect();
        return Outcome::Skip(format!(
            "long-running; recipes present, reference {} (set ATTNMIL_REFERENCE_REPORTS to compare)",
            summary.join(", ")
        ));
    };
    let mut lines = Vec::new();
    let mut ok = true;
    for item in spec.split(',') {
        let Some((class, path)) = item.split_once('=') else {
            return Outcome::Fail(format!("bad entry '{item}'"));
        };
        let Some(t) = refs.get(class).and_then(|v| v.as_table()) else {
            return Outcome::Fail(format!("no reference for '{class}'"));
        };
        let report: serde_json::Value = match std::fs::read_to_string(path).map(|s| serde_json::from_str(&s)) {
            Ok(Ok(v)) => v,
            _ => return Outcome::Fail(format!("cannot read {path}")),
        };
        for (key, field) in [("accuracy", "accuracy"), ("iou", "mean_iou"), ("ap", "mean_ap")] {
            let got = 100.0 * report[field].as_f64().unwrap_or(f64::NAN);
            let dev = (got - num(t, key)).abs();
            ok &= dev <= REFERENCE_BAND_PP;
            lines.push(format!("{class} {key} {got:.1}% (ref {}%)", num(t, key)));
        }
    }
    if ok {
        Outcome::Pass(lines.join(", "))
    } else {
        Outcome::Fail(lines.join(", "))
    }
}
