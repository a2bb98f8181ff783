//! Library-level flows across modules: files on disk, training, prediction,
//! evaluation.

use dermfeat::data::{generate, load, Split, SynthSpec, MANIFEST_FILE};
use dermfeat::metrics::{evaluate, EvalImage};
use dermfeat::model::{load_model, save_params, EncoderConfig};
use dermfeat::netpbm::{decode_pgm, decode_ppm};
use dermfeat::superpixel::{mask_to_scores, read_labels, read_superpixel_map};
use dermfeat::train::{predict, train, TrainConfig};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        image_size: 32,
        cell: 8,
        seed,
        ..SynthSpec::default()
    }
}

fn small_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 3,
        image_size: 32,
        learning_rate: 0.03,
        seed: 5,
        encoder: EncoderConfig {
            input_channels: 3,
            channels: vec![4, 8, 8],
        },
        ..TrainConfig::default()
    }
}

#[test]
fn generated_files_follow_the_documented_formats() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&small_spec(1), Split::Val, 3, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["split"], "val");
    assert_eq!(json["image_size"], 32);
    assert_eq!(json["seed"], 1);

    let entry = &manifest.samples[0];
    let ppm = std::fs::read(dir.path().join(&entry.image)).unwrap();
    assert!(ppm.starts_with(b"P6"));
    let img = decode_ppm(&ppm).unwrap();
    assert_eq!((img.width, img.height), (32, 32));

    let pgm = std::fs::read(dir.path().join(&entry.superpixels)).unwrap();
    assert!(pgm.starts_with(b"P5"));
    let gray = decode_pgm(&pgm).unwrap();
    assert!(gray.maxval > 255, "ids are stored as 16-bit samples");
    assert!(gray.comments.iter().any(|c| c.contains("K=16")), "{:?}", gray.comments);

    let map = read_superpixel_map(&dir.path().join(&entry.superpixels)).unwrap();
    let labels = read_labels(&dir.path().join(&entry.labels)).unwrap();
    assert_eq!(map.count(), 16);
    assert_eq!(labels.len(), 16);
}

#[test]
fn corrupt_sample_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    generate(&small_spec(2), Split::Train, 2, dir.path()).unwrap();
    let bad = dir.path().join("images/sample_00001.ppm");
    std::fs::write(&bad, b"P6\n32 32\n255\n\x00\x01").unwrap();
    let err = load(&dir.path().join(MANIFEST_FILE)).unwrap_err().to_string();
    assert!(err.contains("sample_00001.ppm"), "{err}");
}

#[test]
fn train_save_load_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    generate(&small_spec(3), Split::Train, 12, &dir.path().join("train")).unwrap();
    generate(&small_spec(3), Split::Test, 4, &dir.path().join("test")).unwrap();
    let train_set = load(&dir.path().join("train").join(MANIFEST_FILE)).unwrap();
    let test_set = load(&dir.path().join("test").join(MANIFEST_FILE)).unwrap();

    let cfg = small_train_config();
    let samples: Vec<_> = train_set
        .samples
        .iter()
        .map(|s| s.to_train_sample().unwrap())
        .collect();
    let (params, report) = train(&samples, &cfg).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert!(report.epochs.iter().all(|e| e.batches == 3 && e.mean_batch_loss.is_finite()));

    let path = dir.path().join("w.bin");
    save_params(&params, &cfg.encoder, &path).unwrap();
    let (enc, loaded) = load_model(&path).unwrap();
    assert_eq!(enc, cfg.encoder);
    assert_eq!(loaded, params);

    let scores: Vec<_> = test_set
        .samples
        .iter()
        .map(|s| {
            let mask = predict(&loaded, &enc, &s.image).unwrap();
            mask_to_scores(&s.map, &mask).unwrap()
        })
        .collect();
    let images: Vec<_> = test_set
        .samples
        .iter()
        .zip(&scores)
        .map(|(s, sc)| EvalImage {
            name: &s.name,
            scores: sc,
            labels: &s.labels,
        })
        .collect();
    let result = evaluate(&images).unwrap();
    assert_eq!(result.classes.len(), 4);
    for c in &result.classes {
        assert_eq!(c.positives + c.negatives, 4 * 16);
        if let Some(a) = c.auroc {
            assert!((0.0..=1.0).contains(&a));
        }
    }
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    generate(&small_spec(4), Split::Train, 6, dir.path()).unwrap();
    let set = load(&dir.path().join(MANIFEST_FILE)).unwrap();
    let samples: Vec<_> = set.samples.iter().map(|s| s.to_train_sample().unwrap()).collect();
    let cfg = small_train_config();
    let (a, ra) = train(&samples, &cfg).unwrap();
    let (b, rb) = train(&samples, &cfg).unwrap();
    assert_eq!(a, b);
    let losses = |r: &dermfeat::train::TrainReport| r.epochs.iter().map(|e| e.mean_batch_loss).collect::<Vec<_>>();
    assert_eq!(losses(&ra), losses(&rb));
}
