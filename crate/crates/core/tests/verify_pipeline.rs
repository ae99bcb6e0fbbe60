use std::path::Path;

use mobiface::graph::{Architecture, MOBIFACE_FLIPPED};
use mobiface::image::encode_ppm;
use mobiface::tensor::Tensor;
use mobiface::verify::{evaluate_pairs, Pair, PairList};
use mobiface::weights::init_random;
use mobiface::{build_mobiface, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn write_faces(dir: &Path, count: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..count {
        let t = Tensor::from_fn(&[3, 112, 112], |_| rng.random_range(0..=255u8) as f32).unwrap();
        std::fs::write(dir.join(format!("face{i}.ppm")), encode_ppm(&t).unwrap()).unwrap();
    }
}

fn separable_pairs(count: usize) -> PairList {
    let mut pairs = Vec::new();
    for i in 0..count {
        pairs.push(Pair { a: format!("face{i}.ppm"), b: format!("face{i}.ppm"), same: true });
        pairs.push(Pair { a: format!("face{i}.ppm"), b: format!("face{}.ppm", (i + 1) % count), same: false });
    }
    PairList::new(pairs, 10).unwrap()
}

#[test]
fn separable_images_score_perfectly_and_identity_head_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    write_faces(dir.path(), 10);
    let pairs = separable_pairs(10);

    let net = build_mobiface();
    let mut weights =
        init_random(&Architecture::by_name(MOBIFACE_FLIPPED).unwrap().weight_bindings(), 3).unwrap();
    let head = weights.set_identity_flip_head(512).unwrap();
    let model = Model::with_flip_head(&net, &head, &weights).unwrap();

    let plain = evaluate_pairs(&model, &pairs, false, dir.path()).unwrap();
    assert_eq!(plain.mean_accuracy, 1.0);
    assert_eq!(plain.folds.len(), 10);
    let flipped = evaluate_pairs(&model, &pairs, true, dir.path()).unwrap();
    assert_eq!(plain, flipped);

    // each distinct image is embedded once per run
    assert_eq!(model.forward_passes(), 20);
}

#[test]
fn pair_file_round_trip_and_missing_image() {
    let dir = tempfile::tempdir().unwrap();
    write_faces(dir.path(), 2);
    let mut pairs = separable_pairs(10);
    let text = pairs.to_text();
    assert_eq!(PairList::parse(&text).unwrap(), pairs);

    let net = build_mobiface();
    let model = Model::new(&net, &init_random(&net.weight_bindings(), 0).unwrap()).unwrap();
    pairs.pairs[0].a = "absent.ppm".into();
    let err = evaluate_pairs(&model, &pairs, false, dir.path()).unwrap_err();
    assert!(err.to_string().contains("absent.ppm"), "{err}");
    assert!(evaluate_pairs(&model, &pairs, true, dir.path()).is_err());
}
