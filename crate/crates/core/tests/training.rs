mod common;

use approx::assert_abs_diff_eq;
use common::{rand, rng};
use ohformer::data::ImageSet;
use ohformer::evaluation::{synth_generate, SynthSpec};
use ohformer::model::HeadOutput;
use ohformer::params::{ParamKind, ParamStore};
use ohformer::tensor::gradcheck::{finite_diff_check, FdOptions};
use ohformer::tensor::{Graph, Tensor, Var};
use ohformer::training::augment::{erase, flip_horizontal, sample_erase_rect, ERASE_AREA, ERASE_ASPECT};
use ohformer::training::checkpoint::{Checkpoint, VERSION};
use ohformer::training::{
    augment, batch_hard_triplet, cosine_lr, hinge, load_checkpoint, pk_sample, save_checkpoint, sgd_step,
    total_loss, AugmentConfig, IdentityIndex, Rect, SgdConfig, SgdState, TrainConfig, TrainData, Trainer,
};
use ohformer::Error;
use proptest::prelude::*;
use rand::Rng;

fn scalar(v: Var<'_, f64>) -> f64 {
    v.value().item()
}

fn hinge_of(dp: f64, dn: f64, margin: f64) -> f64 {
    let g = Graph::<f64>::new();
    scalar(hinge(g.constant(Tensor::new(&[1], vec![dp]).unwrap()), g.constant(Tensor::new(&[1], vec![dn]).unwrap()), margin).unwrap())
}

#[test]
fn hinge_examples() {
    assert_abs_diff_eq!(hinge_of(0.2, 0.5, 0.3), 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(hinge_of(0.5, 0.2, 0.3), 0.6, epsilon = 1e-12);
}

fn triplet(features: &[f64], d: usize, labels: &[usize], margin: f64) -> f64 {
    let g = Graph::<f64>::new();
    let f = g.constant(Tensor::new(&[labels.len(), d], features.to_vec()).unwrap());
    scalar(batch_hard_triplet(f, labels, margin).unwrap())
}

#[test]
fn identical_features_give_the_margin() {
    assert_abs_diff_eq!(triplet(&[0.7; 8], 2, &[0, 0, 1, 1], 0.3), 0.3, epsilon = 1e-5);
}

#[test]
fn batch_hard_hand_example() {
    // Anchor 2 is the only active one: farthest positive 2, nearest negative 2.
    let got = triplet(&[0.0, 1.0, 3.0, 5.0], 1, &[0, 0, 1, 1], 0.3);
    assert_abs_diff_eq!(got, 0.3 / 4.0, epsilon = 1e-6);
}

#[test]
fn separated_clusters_give_zero_loss() {
    let margin = 0.3;
    let mut f = Vec::new();
    for c in 0..3 {
        for _ in 0..4 {
            f.extend([c as f64 * (margin + 1.0), 1.0]);
        }
    }
    let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
    assert_eq!(triplet(&f, 2, &labels, margin), 0.0);
}

#[test]
fn single_image_identity_is_a_contract_error() {
    let g = Graph::<f64>::new();
    let f = g.constant(rand(&[3, 2], 1));
    assert!(matches!(batch_hard_triplet(f, &[0, 0, 1], 0.3), Err(Error::Contract(_))));
}

fn heads<'g>(g: &'g Graph<f64>, feats: &[Tensor<f64>], w: &Tensor<f64>) -> Vec<HeadOutput<'g, f64>> {
    let w = g.constant(w.clone());
    feats
        .iter()
        .map(|f| {
            let f = g.constant(f.clone());
            HeadOutput { triplet: f, infer: f, logits: f.matmul(w).unwrap() }
        })
        .collect()
}

#[test]
fn identical_parts_collapse_to_one_part() {
    let labels = [0, 0, 1, 1, 2, 2];
    let cls = rand::<f64>(&[6, 5], 2);
    let part = rand::<f64>(&[6, 5], 3);
    let w = rand::<f64>(&[5, 3], 4);
    let g = Graph::new();
    let all = heads(&g, &[cls.clone(), part.clone(), part.clone(), part.clone(), part.clone()], &w);
    let total = scalar(total_loss(&all, &labels, 0.3).unwrap().total);
    let one = heads(&g, &[cls, part], &w);
    let t = total_loss(&one, &labels, 0.3).unwrap();
    let want = scalar(t.ce_cls) + scalar(t.tri_cls) + scalar(t.parts);
    assert_abs_diff_eq!(total, want, epsilon = 1e-6);
}

#[test]
fn zero_classifier_gives_log_classes() {
    let labels = [0, 0, 1, 1, 4, 4];
    let g = Graph::new();
    let hs = heads(&g, &[rand(&[6, 5], 5), rand(&[6, 5], 6)], &Tensor::zeros(&[5, 5]));
    let t = total_loss(&hs, &labels, 0.3).unwrap();
    assert_abs_diff_eq!(scalar(t.ce_cls), 5f64.ln(), epsilon = 1e-12);
    let part = scalar(t.parts) - scalar(batch_hard_triplet(hs[1].triplet, &labels, 0.3).unwrap());
    assert_abs_diff_eq!(part, 5f64.ln(), epsilon = 1e-12);
}

#[test]
fn label_outside_classifier_is_a_contract_error() {
    let g = Graph::new();
    let hs = heads(&g, &[rand(&[4, 3], 7)], &rand(&[3, 2], 8));
    assert!(matches!(total_loss(&hs, &[0, 0, 2, 2], 0.3), Err(Error::Contract(_))));
}

#[test]
fn total_loss_gradient() {
    let labels = [0, 0, 1, 1, 2, 2];
    let inputs = [rand::<f64>(&[6, 4], 9), rand(&[6, 4], 10), rand(&[6, 4], 11), rand(&[4, 3], 12)];
    let report = finite_diff_check(
        |_, v| {
            let hs: Vec<_> = v[..3]
                .iter()
                .map(|&f| Ok(HeadOutput { triplet: f, infer: f, logits: f.matmul(v[3])? }))
                .collect::<ohformer::Result<_>>()?;
            Ok(total_loss(&hs, &labels, 0.3)?.total)
        },
        &inputs,
        &FdOptions::with_eps(1e-6),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn pk_sample_examples() {
    let index = IdentityIndex::new(&[0, 0, 1, 1]).unwrap();
    let batch = pk_sample(&index, 2, 2, &mut rng(0)).unwrap();
    assert_eq!(batch.len(), 4);
    let mut images: Vec<usize> = batch.iter().map(|b| b.image).collect();
    images.sort_unstable();
    assert_eq!(images, vec![0, 1, 2, 3]);

    let single = IdentityIndex::new(&[0, 1, 1]).unwrap();
    let batch = pk_sample(&single, 2, 2, &mut rng(1)).unwrap();
    let of0: Vec<usize> = batch.iter().filter(|b| b.label == 0).map(|b| b.image).collect();
    assert_eq!(of0, vec![0, 0]);

    assert!(matches!(pk_sample(&index, 3, 2, &mut rng(0)), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn pk_sample_shape_and_determinism(
        sizes in prop::collection::vec(1usize..7, 2..8),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(l, &n)| std::iter::repeat(l).take(n)).collect();
        let index = IdentityIndex::new(&labels).unwrap();
        let p = sizes.len().min(3);
        let mut r1 = rng(seed);
        let mut r2 = rng(seed);
        for _ in 0..3 {
            let a = pk_sample(&index, p, k, &mut r1).unwrap();
            prop_assert_eq!(&a, &pk_sample(&index, p, k, &mut r2).unwrap());
            prop_assert_eq!(a.len(), p * k);
            let mut ids: Vec<usize> = a.iter().map(|b| b.label).collect();
            ids.dedup();
            prop_assert_eq!(ids.len(), p);
            let mut distinct = ids.clone();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), p);
            for b in &a {
                prop_assert_eq!(labels[b.image], b.label);
            }
            for &l in &ids {
                let mut imgs: Vec<usize> = a.iter().filter(|b| b.label == l).map(|b| b.image).collect();
                imgs.sort_unstable();
                let before = imgs.len();
                imgs.dedup();
                prop_assert_eq!(imgs.len(), before.min(sizes[l]));
            }
        }
    }

    #[test]
    fn erase_rect_stays_inside(h in 10usize..80, w in 10usize..80, seed in any::<u64>()) {
        if let Some(r) = sample_erase_rect(h, w, &mut rng(seed)) {
            prop_assert!(r.h >= 1 && r.w >= 1 && r.y + r.h <= h && r.x + r.w <= w);
        }
    }
}

fn image(seed: u64) -> Tensor<f32> {
    rand(&[3, 12, 7], seed)
}

#[test]
fn flip_is_an_involution() {
    let orig = image(20);
    let mut img = orig.clone();
    flip_horizontal(&mut img);
    assert_ne!(img, orig);
    assert_eq!(img.data()[6], orig.data()[0]);
    flip_horizontal(&mut img);
    assert_eq!(img, orig);
}

#[test]
fn disabled_augmentation_leaves_the_image() {
    let orig = image(21);
    let mut img = orig.clone();
    let cfg = AugmentConfig { flip: false, erase: false, fill: [0.0; 3] };
    for s in 0..20 {
        augment(&mut img, &mut rng(s), &cfg);
    }
    assert_eq!(img, orig);
}

#[test]
fn missed_draws_leave_the_image() {
    let cfg = AugmentConfig { flip: true, erase: true, fill: [9.0; 3] };
    let orig = image(22);
    let mut found = false;
    for s in 0..64 {
        // Reproduce the two coin draws to find a seed where both miss.
        let mut r = rng(s);
        if r.gen_bool(0.5) || r.gen_bool(0.5) {
            continue;
        }
        let mut img = orig.clone();
        augment(&mut img, &mut rng(s), &cfg);
        assert_eq!(img, orig);
        found = true;
    }
    assert!(found);
}

#[test]
fn erase_fills_exactly_the_rectangle() {
    let mut img = image(23);
    let orig = img.clone();
    let r = Rect { y: 2, x: 1, h: 3, w: 4 };
    erase(&mut img, r, [5.0, 6.0, 7.0]);
    for c in 0..3 {
        for y in 0..12 {
            for x in 0..7 {
                let i = (c * 12 + y) * 7 + x;
                let inside = (2..5).contains(&y) && (1..5).contains(&x);
                assert_eq!(img.data()[i], if inside { 5.0 + c as f32 } else { orig.data()[i] });
            }
        }
    }
}

#[test]
fn erase_rect_respects_area_and_aspect() {
    let (h, w) = (60, 30);
    let mut r = rng(24);
    for _ in 0..200 {
        let Rect { h: rh, w: rw, .. } = sample_erase_rect(h, w, &mut r).unwrap();
        // Rounding each side by at most 0.5 bounds the drift of both ratios.
        let area = (rh * rw) as f64 / (h * w) as f64;
        let slack = |n: usize| (n as f64 + 0.5) / n as f64;
        assert!(area <= ERASE_AREA.1 * slack(rh) * slack(rw) && area >= ERASE_AREA.0 / (slack(rh) * slack(rw)));
        let aspect = rh as f64 / rw as f64;
        assert!(aspect <= ERASE_ASPECT.1 * slack(rw) * slack(rh) + 1e-9);
        assert!(aspect >= ERASE_ASPECT.0 / (slack(rw) * slack(rh)) - 1e-9);
    }
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine_lr(0, 100, 0.01).unwrap(), 0.01);
    assert_abs_diff_eq!(cosine_lr(100, 100, 0.01).unwrap(), 0.0, epsilon = 1e-18);
    assert_abs_diff_eq!(cosine_lr(50, 100, 0.01).unwrap(), 0.005, epsilon = 1e-15);
    assert!(matches!(cosine_lr(0, 0, 0.01), Err(Error::Config(_))));
    assert!(cosine_lr(101, 100, 0.01).is_err());
}

fn one_param_store(theta: &[f64], kind: ParamKind) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(&[theta.len()], theta.to_vec()).unwrap(), kind).unwrap();
    s
}

fn grads_of(store: &ParamStore<f64>, g: &[f64]) -> Vec<(ohformer::params::ParamId, Tensor<f64>)> {
    let id = store.id("w").unwrap();
    vec![(id, Tensor::new(&[g.len()], g.to_vec()).unwrap())]
}

#[test]
fn sgd_plain_and_zero_gradient() {
    let mut s = one_param_store(&[1.0, -2.0], ParamKind::Weight);
    let mut st = SgdState::new(&s);
    let zero = grads_of(&s, &[0.0, 0.0]);
    let cfg = SgdConfig { momentum: 0.9, weight_decay: 0.0 };
    sgd_step(&mut s, &zero, &mut st, 0.1, cfg).unwrap();
    assert_eq!(s.tensor(s.id("w").unwrap()).data(), &[1.0, -2.0]);

    let mut s = one_param_store(&[1.0, -2.0], ParamKind::Weight);
    let mut st = SgdState::new(&s);
    let g = grads_of(&s, &[0.5, 0.25]);
    sgd_step(&mut s, &g, &mut st, 0.1, SgdConfig { momentum: 0.0, weight_decay: 0.0 }).unwrap();
    assert_eq!(s.tensor(s.id("w").unwrap()).data(), &[1.0 - 0.05, -2.0 - 0.025]);
}

#[test]
fn sgd_matches_the_momentum_recursion() {
    let (mu, wd, lr, g) = (0.9, 0.1, 0.05, 0.3);
    for kind in [ParamKind::Weight, ParamKind::NoDecay] {
        let decay = if kind == ParamKind::Weight { wd } else { 0.0 };
        let mut s = one_param_store(&[2.0], kind);
        let mut st = SgdState::new(&s);
        let grads = grads_of(&s, &[g]);
        for _ in 0..2 {
            sgd_step(&mut s, &grads, &mut st, lr, SgdConfig { momentum: mu, weight_decay: wd }).unwrap();
        }
        let v1 = g + decay * 2.0;
        let t1 = 2.0 - lr * v1;
        let v2 = mu * v1 + g + decay * t1;
        let t2 = t1 - lr * v2;
        assert_abs_diff_eq!(s.tensor(s.id("w").unwrap()).data()[0], t2, epsilon = 1e-15);
    }
}

#[test]
fn sgd_shape_mismatch_is_a_contract_error() {
    let mut s = one_param_store(&[1.0, 2.0], ParamKind::Weight);
    let mut st = SgdState::new(&s);
    let bad = grads_of(&s, &[1.0]);
    let cfg = SgdConfig { momentum: 0.9, weight_decay: 0.0 };
    assert!(matches!(sgd_step(&mut s, &bad, &mut st, 0.1, cfg), Err(Error::Contract(_))));
}

fn sample_checkpoint() -> Checkpoint {
    Checkpoint {
        spec: "layers=1".into(),
        params: vec![("a".into(), rand(&[2, 3], 30)), ("b".into(), Tensor::new(&[], vec![f32::MIN_POSITIVE]).unwrap())],
        momentum: vec![("a".into(), rand(&[2, 3], 31))],
        step: 77,
        rng: [1, u64::MAX, 3, 4],
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ohf");
    let c = sample_checkpoint();
    save_checkpoint(&path, &c).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.encode().unwrap(), std::fs::read(&path).unwrap());
    assert!(!dir.path().join("c.ohf.tmp").exists());
}

#[test]
fn checkpoint_layout_is_little_endian() {
    let bytes = sample_checkpoint().encode().unwrap();
    assert_eq!(&bytes[..4], b"OHF1");
    assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    assert_eq!(&bytes[8..12], &8u32.to_le_bytes());
    assert_eq!(&bytes[12..20], b"layers=1");
    assert_eq!(&bytes[20..24], &2u32.to_le_bytes());
    assert_eq!(&bytes[24..26], &1u16.to_le_bytes());
    assert_eq!(bytes[26], b'a');
    assert_eq!(bytes[27], 2);
    assert_eq!(&bytes[28..32], &2u32.to_le_bytes());
    assert_eq!(&bytes[bytes.len() - 8..], &4u64.to_le_bytes());
}

#[test]
fn every_truncation_is_a_format_error() {
    let bytes = sample_checkpoint().encode().unwrap();
    for n in 0..bytes.len() {
        match Checkpoint::decode(&bytes[..n]) {
            Err(Error::Format { offset, .. }) => assert!(offset <= n, "cut {n} reported at {offset}"),
            other => panic!("cut at {n}: {other:?}"),
        }
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::decode(&long), Err(Error::Format { offset, .. }) if offset == bytes.len()));
}

#[test]
fn bad_magic_version_and_duplicates() {
    let bytes = sample_checkpoint().encode().unwrap();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::decode(&magic), Err(Error::Format { offset: 0, .. })));
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::decode(&version), Err(Error::Version { found, .. }) if found == VERSION + 1));
    let mut dup = sample_checkpoint();
    dup.params[1].0 = "a".into();
    dup.params[1].1 = rand(&[2, 3], 32);
    assert!(matches!(Checkpoint::decode(&dup.encode().unwrap()), Err(Error::Format { .. })));
}

#[test]
fn config_parse_and_defaults() {
    let c = TrainConfig::parse("# comment\n\nsteps = 10\nmargin=0.5  # trailing\nstack = [None]\n").unwrap();
    assert_eq!(c.steps, 10);
    assert_eq!(c.margin, 0.5);
    assert_eq!(c.stack, "[None]");
    assert_eq!(c.ids_per_batch, 4);
    assert_eq!(c.batch_size(), 16);
    assert_eq!(c.lr, 0.01);
}

#[test]
fn config_errors_name_the_line() {
    for text in ["steps = 1\nbogus = 2\n", "steps = 1\nsteps = 2\n", "steps = 1\nsteps\n", "steps = x\n"] {
        match TrainConfig::parse(text) {
            Err(Error::Config(msg)) => assert!(msg.contains("line"), "{msg}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    for text in ["images_per_id = 1\n", "margin = -0.1\n", "steps = 0\n", "ids_per_batch = 1\n"] {
        let parsed = TrainConfig::parse(text).and_then(|c| c.validate());
        assert!(matches!(parsed, Err(Error::Config(_))), "{text:?}");
    }
}

#[test]
fn resolved_config_reparses_to_itself() {
    let mut c = TrainConfig::parse("layers = 3\nstack = [H_2^{1}]\nmode = shared\nseed = 9\nflip = false\n").unwrap();
    c.apply_overrides(&[("lr".into(), "0.02".into())]).unwrap();
    let text = c.resolved();
    assert_eq!(TrainConfig::parse(&text).unwrap(), c);
    for (key, _) in ohformer::training::config::KEYS {
        if *key != "data" {
            assert!(text.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key}");
        }
    }
}

fn tiny_data(dir: &std::path::Path) -> TrainData {
    let spec = SynthSpec { ids: 4, cams: 2, per_id: 2, seed: 5, ..SynthSpec::default() };
    synth_generate(&spec, dir).unwrap();
    TrainData::new(ImageSet::load(dir).unwrap()).unwrap()
}

fn tiny_config(steps: u64) -> TrainConfig {
    let text = format!(
        "layers = 2\nstack = [H_2^{{1}}]\ndim = 16\nheads = 2\nparts = 2\nids_per_batch = 2\nimages_per_id = 2\nsteps = {steps}\nseed = 3\n"
    );
    TrainConfig::parse(&text).unwrap()
}

fn run(config: TrainConfig, data: &TrainData) -> Trainer {
    let mut t = Trainer::new(config, data.classes()).unwrap();
    t.run(data, |_, _| Ok(())).unwrap();
    t
}

#[test]
fn training_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let full = run(tiny_config(12), &data).checkpoint();
    assert_eq!(full.step, 12);
    assert_eq!(run(tiny_config(12), &data).checkpoint().encode().unwrap(), full.encode().unwrap());

    let mut first = Trainer::new(tiny_config(12), data.classes()).unwrap();
    for _ in 0..6 {
        first.train_step(&data).unwrap();
    }
    let path = dir.path().join("half.ohf");
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    let mut resumed = Trainer::from_checkpoint(tiny_config(12), &load_checkpoint(&path).unwrap()).unwrap();
    resumed.run(&data, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.checkpoint().encode().unwrap(), full.encode().unwrap());
}

#[test]
fn resume_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let ckpt = Trainer::new(tiny_config(4), data.classes()).unwrap().checkpoint();
    let mut other = tiny_config(4);
    other.set("dim", "8").unwrap();
    assert!(matches!(Trainer::from_checkpoint(other, &ckpt), Err(Error::Config(_))));
}

#[test]
fn training_moves_parameters_and_only_norms_skip_decay() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let fresh = Trainer::new(tiny_config(2), data.classes()).unwrap();
    let trained = run(tiny_config(2), &data);
    let moved = fresh.store.iter().zip(trained.store.iter()).filter(|(a, b)| a.2.tensor != b.2.tensor).count();
    assert!(moved > fresh.store.len() / 2, "{moved} of {}", fresh.store.len());
    for (_, name, e) in fresh.store.iter() {
        let norm = name.contains(".ln") || name.contains(".bn.") || name.starts_with("norm.");
        let want = match () {
            _ if name.ends_with(".mean") || name.ends_with(".var") => ParamKind::Buffer,
            _ if norm || name == "cls_token" => ParamKind::NoDecay,
            _ => ParamKind::Weight,
        };
        assert_eq!(e.kind, want, "{name}");
    }
}
