use std::collections::HashMap;

use attnmil::dataset::io::{read_meta_class, write_dataset, write_meta_class, ManifestSource};
use attnmil::dataset::synthetic::{generate_synthetic, synthetic_meta_class};
use attnmil::dataset::{filter_records, DatasetConfig, ImageRecord, Label, RecordSource, Split};
use attnmil::inference::{accumulate_heatmap, export_outputs, load_heatmap_png, predict, predict_with_heatmap};
use attnmil::metrics::{evaluate_testset, GroundTruth};
use attnmil::model::checkpoint::Checkpoint;
use attnmil::model::{BackboneKind, MilModel, ModelConfig};
use attnmil::patchbag::{dense_bag, GridSpec};
use attnmil::training::{fit, FitOptions, TrainConfig};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn small_model(patch: usize) -> MilModel<f32> {
    MilModel::new(
        ModelConfig {
            backbone: BackboneKind::SmallCnn { widths: [8, 16, 16] },
            patch_size: patch,
            embed_dim: 16,
            attention_dim: 16,
        },
        3,
    )
    .unwrap()
}

#[test]
fn synthetic_training_reduces_loss_and_survives_disk_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let records = generate_synthetic(11, 48, 64).unwrap();
    let manifest = write_dataset(dir.path(), &records).unwrap();
    write_meta_class(dir.path(), &synthetic_meta_class()).unwrap();
    assert_eq!(read_meta_class(dir.path()).unwrap(), Some(synthetic_meta_class()));

    let train = ManifestSource::open(&manifest, Some(Split::Train)).unwrap();
    assert_eq!(train.len(), 36);
    let config = TrainConfig {
        total_epochs: 20,
        frozen_epochs: 0,
        bag_size: 12,
        patch_size: 16,
        head_lr: 1e-3,
        backbone_lr: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let ck_path = dir.path().join("model.safetensors");
    let out = fit(
        &train,
        small_model(16),
        &config,
        &FitOptions {
            checkpoint: Some(ck_path.clone()),
            ..FitOptions::default()
        },
    )
    .unwrap();
    let first = out.history.first().unwrap().mean_loss;
    let last = out.history.last().unwrap().mean_loss;
    assert!(last < first, "loss {first} -> {last}");

    let restored = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(restored.epoch, 20);
    let model = restored.model().unwrap();
    let spec = GridSpec::new(64, 16, 0.875).unwrap();
    let test = ManifestSource::open(&manifest, Some(Split::Test)).unwrap();
    let image = test.load(0).unwrap();
    let a = predict(&image, &out.model, &spec, 0.5).unwrap();
    let b = predict(&image, &model, &spec, 0.5).unwrap();
    assert_eq!(a.prediction, b.prediction);

    let (p, h) = predict_with_heatmap(&image, &model, &spec, 0.5, 0.3).unwrap();
    let paths = export_outputs(&dir.path().join("out"), &p, &h, &spec, a.origins.len()).unwrap();
    let back = load_heatmap_png(&paths.heatmap).unwrap();
    assert!(back.iter().zip(&h.values).all(|(x, y)| (x - y).abs() <= 1.0 / 65535.0));
}

#[test]
fn mask_files_are_palette_indexed() {
    let dir = tempfile::tempdir().unwrap();
    let records = generate_synthetic(2, 4, 32).unwrap();
    write_dataset(dir.path(), &records).unwrap();
    let path = dir.path().join("masks").join(format!("{}.png", records[0].image_id));
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path).unwrap()));
    let reader = decoder.read_info().unwrap();
    assert_eq!(reader.info().color_type, png::ColorType::Indexed);
}

#[test]
fn bag_order_changes_neither_prediction_nor_heatmap() {
    let image = generate_synthetic(4, 2, 32).unwrap().remove(0);
    let model = small_model(8);
    let spec = GridSpec::new(32, 8, 0.5).unwrap();
    let bag = dense_bag(&image, &spec).unwrap();
    let mut order: Vec<usize> = (0..bag.len()).collect();
    order.reverse();
    let shuffled = bag.permuted(&order);
    let (o1, o2) = (model.forward(&bag).unwrap(), model.forward(&shuffled).unwrap());
    assert!((o1.probability - o2.probability).abs() < 1e-6);
    let w1: Vec<f32> = o1.weights.to_vec();
    let w2: Vec<f32> = o2.weights.to_vec();
    let h1 = accumulate_heatmap(&w1, &bag.origins, &spec).unwrap();
    let h2 = accumulate_heatmap(&w2, &shuffled.origins, &spec).unwrap();
    assert!(h1.values.iter().zip(&h2.values).all(|(a, b)| (a - b).abs() < 1e-6));
    assert_eq!(h1.coverage, h2.coverage);
}

fn record_with_count(id: usize, count: usize) -> ImageRecord {
    ImageRecord {
        image_id: format!("r{id}"),
        pixels: Array3::zeros((4, 4, 3)),
        mask: None,
        label: Label::from_bool(count >= 10),
        positive_pixel_count: count,
        split: Split::Train,
    }
}

proptest! {
    #[test]
    fn filtering_is_idempotent(counts in proptest::collection::vec(0usize..20, 0..30)) {
        let mut config = DatasetConfig::new(synthetic_meta_class());
        config.pixel_threshold = 10;
        let records: Vec<_> = counts.iter().enumerate().map(|(i, &c)| record_with_count(i, c)).collect();
        let once = filter_records(records, &config);
        prop_assert!(once.iter().all(|r| r.positive_pixel_count == 0 || r.positive_pixel_count >= 10));
        prop_assert!(once.iter().all(|r| r.label.is_positive() == (r.positive_pixel_count >= 10)));
        let twice = filter_records(once.clone(), &config);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn evaluation_ignores_record_order(seed in any::<u64>(), rotate in 0usize..6) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut truth = Vec::new();
        let mut preds = Vec::new();
        let mut maps = HashMap::new();
        for i in 0..6 {
            let positive = i % 2 == 0;
            let id = format!("img{i}");
            let mask = positive.then(|| Array2::from_shape_fn((6, 6), |(i, j)| i + j == 0 || rng.gen_bool(0.4)));
            if positive {
                let values = Array2::from_shape_fn((6, 6), |_| rng.gen::<f64>());
                maps.insert(id.clone(), attnmil::inference::Heatmap {
                    coverage: values.mapv(|_| 1),
                    values,
                    segmentation: None,
                    seg_threshold: None,
                });
            }
            preds.push(attnmil::inference::Prediction::new(&id, rng.gen(), 0.5));
            truth.push(GroundTruth { image_id: id, label: Label::from_bool(positive), mask });
        }
        let a = evaluate_testset(&preds, Some(&maps), &truth, 0.3).unwrap();
        truth.rotate_left(rotate);
        preds.reverse();
        let b = evaluate_testset(&preds, Some(&maps), &truth, 0.3).unwrap();
        prop_assert_eq!(a, b);
    }
}
