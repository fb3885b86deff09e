mod common;

use common::{random_simplex, random_tensor, rng};
use pctl::autodiff::{Tape, Tensor};
use pctl::classifier::{
    abundance_volumes, classification_loss, extract_patches, fit_kernel, gather_patches, ClassifierConfig, DenseCnn,
};
use pctl::data::HsiCube;
use pctl::encoder::SimplexBatch;
use pctl::gradcheck::GradCheck;
use pctl::model::Adam;
use pctl::nn::{Mode, ParamStore};
use pctl::rng::stream;

fn tiny(patch: usize, c: usize, k: usize) -> (ParamStore, DenseCnn) {
    let mut cfg = ClassifierConfig::new(patch, c, k);
    cfg.block_channels = vec![2, 3, 2, 2, 3];
    let mut store = ParamStore::new();
    let net = DenseCnn::new(&mut store, cfg, 7).unwrap();
    (store, net)
}

fn volumes(n: usize, c: usize, patch: usize, seed: u64) -> Tensor {
    let a = random_simplex(&mut rng(seed), n * patch * patch, c);
    let mut tape = Tape::new();
    let av = tape.constant(a);
    let a = SimplexBatch::checked(&tape, av, 1e-9).unwrap();
    let v = abundance_volumes(&mut tape, a, patch).unwrap();
    tape.value(v).clone()
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let (store, net) = tiny(5, 4, 3);
    let vol = volumes(3, 4, 5, 1);
    let check = GradCheck {
        max_entries_per_input: Some(24),
        ..GradCheck::default()
    };
    let report = check
        .run_params("classifier", &store, |tape, bound| {
            let v = tape.constant(vol.clone());
            let mut dropout = stream(0, "dropout");
            let out = net.classify(tape, bound, &store, v, Mode::Train, &mut dropout)?;
            classification_loss(tape, out.logits, &[1, 3, 2])
        })
        .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn blocks_are_densely_connected() {
    let (store, net) = tiny(5, 4, 3);
    let widths = [2, 3, 2, 2, 3];
    let mut seen = 1;
    for (i, &id) in net.kernels.iter().enumerate() {
        let shape = store.get(id).shape();
        assert_eq!(shape[0], widths[i]);
        assert_eq!(shape[1], seen, "block {i} input channels");
        seen += widths[i];
    }
    assert_eq!(net.config.flat_features(), 3 * 4 * 5 * 5);
}

#[test]
fn kernel_fits_small_inputs() {
    assert_eq!(fit_kernel([3, 7, 7], 6, 11), [3, 7, 7]);
    assert_eq!(fit_kernel([3, 7, 7], 2, 5), [1, 5, 5]);
    assert_eq!(fit_kernel([3, 7, 7], 4, 3), [3, 3, 3]);
    assert_eq!(fit_kernel([3, 7, 7], 6, 1), [3, 1, 1]);
}

#[test]
fn inference_is_independent_of_batch_composition() {
    let (store, net) = tiny(3, 4, 3);
    let vol = volumes(4, 4, 3, 2);
    let per = 4 * 3 * 3;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let mut r = stream(0, "dropout");
    let all = tape.constant(vol.clone());
    let all = net
        .classify(&mut tape, &bound, &store, all, Mode::Infer, &mut r)
        .unwrap();
    let all = tape.value(all.logits).clone();
    for i in 0..4 {
        let one = Tensor::new(vec![1, 1, 4, 3, 3], vol.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        let one = tape.constant(one);
        let out = net
            .classify(&mut tape, &bound, &store, one, Mode::Infer, &mut r)
            .unwrap();
        assert_eq!(tape.value(out.logits).data(), all.row(i));
    }
}

#[test]
fn patches_follow_translations() {
    let (h, w, l) = (9, 11, 3);
    let data = random_tensor(&mut rng(3), &[h * w * l], 0.0, 1.0).into_data();
    let cube = HsiCube::new(h, w, l, data.clone(), None).unwrap();
    // Shift the scene by (2, 3): interior patches move with it.
    let (dr, dc) = (2, 3);
    let mut shifted = vec![0.0; data.len()];
    for r in 0..h - dr {
        for c in 0..w - dc {
            let (src, dst) = ((r * w + c) * l, ((r + dr) * w + c + dc) * l);
            shifted[dst..dst + l].copy_from_slice(&data[src..src + l]);
        }
    }
    let moved = HsiCube::new(h, w, l, shifted, None).unwrap();
    for (r, c) in [(2, 2), (3, 5), (4, 4)] {
        let a = extract_patches(&cube, &[(r, c)], 5).unwrap();
        let b = extract_patches(&moved, &[(r + dr, c + dc)], 5).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn border_patches_are_mirrored() {
    // 1-D ramp 0..4 in a single row: a 5-wide patch at column 0 reads 2,1,0,1,2.
    let map: Vec<f64> = (0..5).map(|v| v as f64).collect();
    let p = gather_patches(&map, 1, 5, 1, &[(0, 0)], 5).unwrap();
    let row: Vec<f64> = p.data()[10..15].to_vec();
    assert_eq!(row, vec![2.0, 1.0, 0.0, 1.0, 2.0]);
}

#[test]
fn training_reduces_the_loss() {
    let (mut store, net) = tiny(3, 4, 3);
    let vol = volumes(12, 4, 3, 4);
    let labels: Vec<u16> = (0..12).map(|i| (i % 3) as u16 + 1).collect();
    let mut adam = Adam::new(&store, 1e-2);
    let mut r = stream(0, "dropout");
    let mut losses = Vec::new();
    for _ in 0..60 {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let v = tape.constant(vol.clone());
        let out = net.classify(&mut tape, &bound, &store, v, Mode::Train, &mut r).unwrap();
        let loss = classification_loss(&mut tape, out.logits, &labels).unwrap();
        losses.push(tape.value(loss).data()[0]);
        let grads = tape.backward(loss).unwrap();
        adam.update(&mut store, &bound, &grads);
        net.update_running(&mut store, &out.stats);
    }
    assert!(losses[59] < 0.5 * losses[0], "{} -> {}", losses[0], losses[59]);
}

#[test]
fn malformed_volumes_are_rejected() {
    let (store, net) = tiny(3, 4, 3);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let mut r = stream(0, "dropout");
    let bad = tape.constant(Tensor::zeros(&[2, 1, 4, 5, 5]));
    assert!(net
        .classify(&mut tape, &bound, &store, bad, Mode::Infer, &mut r)
        .is_err());
    let logits = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(classification_loss(&mut tape, logits, &[0]).is_err());
}
