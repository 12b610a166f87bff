mod common;

use common::{max_diff, rand, rng};
use ohformer::grid::TokenGrid;
use ohformer::lrp::{self, BranchKind, LrpParams, LrpVariant};
use ohformer::params::{check_with_params, ParamStore, Session};
use ohformer::tensor::gradcheck::FdOptions;
use ohformer::tensor::{BnMode, Graph, Tensor};
use proptest::prelude::*;

fn build(dim: usize, variant: &str, depthwise: bool, seed: u64) -> (ParamStore<f64>, LrpParams) {
    let mut store = ParamStore::new();
    let p = LrpParams::new(
        &mut store,
        "l",
        dim,
        variant.parse().unwrap(),
        depthwise,
        &mut rng(seed),
    )
    .unwrap();
    (store, p)
}

fn grid_of<'g>(g: &'g Graph<f64>, x: &Tensor<f64>) -> TokenGrid<'g, f64> {
    TokenGrid::from_map(g.constant(x.clone())).unwrap()
}

#[test]
fn variant_parsing_and_display() {
    assert_eq!(
        "DWC+DFC".parse::<LrpVariant>().unwrap(),
        LrpVariant::default()
    );
    assert!("None".parse::<LrpVariant>().unwrap().is_identity());
    assert_eq!(LrpVariant::default().to_string(), "DWC+DFC");
    assert!(matches!(
        "DWC+XYZ".parse::<LrpVariant>(),
        Err(ohformer::Error::Config(_))
    ));
    assert!("AP+AP".parse::<LrpVariant>().is_err());
}

#[test]
fn identity_variant_passes_through() {
    let (store, p) = build(3, "None", false, 0);
    let g = Graph::new();
    let sess = Session::new(&g, &store, BnMode::Eval, false);
    let x = rand(&[1, 3, 4, 5], 1);
    let a = grid_of(&g, &x);
    let out = lrp::lrp(&sess, &a, &p).unwrap();
    assert_eq!((out.h, out.w), (4, 5));
    assert_eq!(out.tokens.value().data(), a.tokens.value().data());
}

#[test]
fn zero_offsets_reduce_to_strided_convolution() {
    for (h, w, depthwise) in [
        (6, 6, false),
        (5, 7, false),
        (2, 3, false),
        (6, 5, true),
        (3, 3, true),
    ] {
        let c = 4;
        let (store, p) = build(c, "DFC", depthwise, 3);
        let d = p.deform.as_ref().unwrap();
        let g = Graph::new();
        let sess = Session::new(&g, &store, BnMode::Eval, false);
        let x = g.constant(rand(&[2, c, h, w], 4));
        let ours = lrp::deform_branch(&sess, x, d).unwrap();
        let groups = if depthwise { c } else { 1 };
        let conv = x.conv2d(sess.p(d.weight), None, 2, 1, groups).unwrap();
        assert_eq!(ours.shape(), conv.shape());
        assert!(
            ours.value().max_abs_diff(&conv.value()) < 1e-6,
            "{h}x{w} depthwise={depthwise}"
        );
    }
}

#[test]
fn shifted_offsets_match_the_shifted_image() {
    let (c, h, w) = (2, 8, 6);
    let (mut store, p) = build(c, "DFC", false, 5);
    let d = p.deform.clone().unwrap();
    let mut bias = vec![0.0; 18];
    for k in 0..9 {
        bias[2 * k] = 1.0;
    }
    store
        .set("l.dfc.offset_b", Tensor::from_f64(&[18], &bias).unwrap())
        .unwrap();
    let x: Tensor<f64> = rand(&[1, c, h, w], 6);
    let mut shifted = Tensor::zeros(&[1, c, h, w]);
    for ch in 0..c {
        for y in 0..h - 1 {
            for xx in 0..w {
                shifted.data_mut()[(ch * h + y) * w + xx] = x.data()[(ch * h + y + 1) * w + xx];
            }
        }
    }
    let g = Graph::new();
    let sess = Session::new(&g, &store, BnMode::Eval, false);
    let moved = lrp::deform_branch(&sess, g.constant(x), &d)
        .unwrap()
        .value();
    let plain = g
        .constant(shifted)
        .conv2d(sess.p(d.weight), None, 2, 1, 1)
        .unwrap()
        .value();
    let (ho, wo) = (h / 2, w / 2);
    // Rows whose taps stay inside the image under both readings.
    for ch in 0..c {
        for oy in 1..ho {
            if 2 * oy + 2 > h - 1 {
                continue;
            }
            for ox in 0..wo {
                let i = (ch * ho + oy) * wo + ox;
                assert!(
                    (moved.data()[i] - plain.data()[i]).abs() < 1e-9,
                    "ch={ch} oy={oy} ox={ox}"
                );
            }
        }
    }
}

#[test]
fn constant_input_with_unit_kernels_doubles_in_the_interior() {
    let c = 2;
    let (mut store, p) = build(c, "DWC+DFC", false, 7);
    // Deform kernel: each output channel averages its own input channel.
    let mut dk = vec![0.0; c * c * 9];
    for o in 0..c {
        for t in 0..9 {
            dk[(o * c + o) * 9 + t] = 1.0 / 9.0;
        }
    }
    store
        .set(
            "l.dfc.weight",
            Tensor::from_f64(&[c, c, 3, 3], &dk).unwrap(),
        )
        .unwrap();
    store
        .set("l.dwc", Tensor::full(&[c, 1, 3, 3], 1.0 / 9.0))
        .unwrap();
    let g = Graph::new();
    let sess = Session::new(&g, &store, BnMode::Eval, false);
    let a = grid_of(&g, &Tensor::full(&[1, c, 7, 7], 1.5));
    let out = lrp::lrp(&sess, &a, &p).unwrap();
    assert_eq!((out.h, out.w), (4, 4));
    let map = out.to_map().unwrap().value();
    for ch in 0..c {
        for oy in 1..3 {
            for ox in 1..3 {
                assert!((map.at(&[0, ch, oy, ox]) - 3.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn composite_is_the_sum_of_its_branches() {
    let c = 3;
    let (store, p) = build(c, "DWC+DFC", false, 8);
    let g = Graph::new();
    let sess = Session::new(&g, &store, BnMode::Eval, false);
    let x = rand(&[2, c, 5, 4], 9);
    let a = grid_of(&g, &x);
    let both = lrp::lrp(&sess, &a, &p).unwrap().to_map().unwrap().value();
    let xv = g.constant(x);
    let dfc = lrp::variant_branch(&sess, xv, BranchKind::Dfc, &p)
        .unwrap()
        .value();
    let dwc = lrp::variant_branch(&sess, xv, BranchKind::Dwc, &p)
        .unwrap()
        .value();
    let sum: Vec<f64> = dfc
        .data()
        .iter()
        .zip(dwc.data())
        .map(|(a, b)| a + b)
        .collect();
    assert!(max_diff(both.data(), &sum) < 1e-6);
}

#[test]
fn pools_preserve_constants_and_center_kernel_subsamples() {
    let g = Graph::<f64>::new();
    let (store, p) = build(2, "NC+AP+MP", false, 1);
    let mut store = store;
    let mut center = vec![0.0; 2 * 2 * 9];
    center[(0 * 2 + 0) * 9 + 4] = 1.0;
    center[(1 * 2 + 1) * 9 + 4] = 1.0;
    store
        .set("l.nc", Tensor::from_f64(&[2, 2, 3, 3], &center).unwrap())
        .unwrap();
    let sess = Session::new(&g, &store, BnMode::Eval, false);
    let c = g.constant(Tensor::full(&[1, 2, 5, 6], -0.25));
    for kind in [BranchKind::Ap, BranchKind::Mp] {
        let y = lrp::variant_branch(&sess, c, kind, &p).unwrap().value();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        assert!(y.data().iter().all(|&v| v == -0.25), "{kind:?}");
    }
    let x = rand(&[1, 2, 5, 6], 2);
    let y = lrp::variant_branch(&sess, g.constant(x.clone()), BranchKind::Nc, &p)
        .unwrap()
        .value();
    for ch in 0..2 {
        for oy in 0..3 {
            for ox in 0..3 {
                assert_eq!(y.at(&[0, ch, oy, ox]), x.at(&[0, ch, 2 * oy, 2 * ox]));
            }
        }
    }
}

#[test]
fn class_token_and_tiny_grids_are_rejected() {
    let (store, p) = build(2, "DWC+DFC", false, 0);
    let g = Graph::new();
    let sess = Session::new(&g, &store, BnMode::Eval, false);
    let with_cls = TokenGrid::new(g.constant(Tensor::zeros(&[1, 5, 2])), 2, 2, true).unwrap();
    assert!(matches!(
        lrp::lrp(&sess, &with_cls, &p),
        Err(ohformer::Error::Contract(_))
    ));
    let thin = TokenGrid::new(g.constant(Tensor::zeros(&[1, 3, 2])), 3, 1, false).unwrap();
    assert!(matches!(
        lrp::lrp(&sess, &thin, &p),
        Err(ohformer::Error::Config(_))
    ));
}

#[test]
fn full_gradient_matches_finite_differences() {
    let (mut store, p) = build(4, "DWC+DFC", false, 10);
    // Non-integer offsets keep every bilinear tap away from its kinks.
    store
        .set(
            "l.dfc.offset_w",
            rand::<f64>(&[18, 4, 3, 3], 11).map(|v| 0.05 * v),
        )
        .unwrap();
    store
        .set(
            "l.dfc.offset_b",
            rand::<f64>(&[18], 12).map(|v| 0.3 * v + 0.37),
        )
        .unwrap();
    let x: Tensor<f64> = rand(&[1, 4, 6, 6], 13);
    let readout: Tensor<f64> = rand(&[1, 9, 4], 14);
    let report = check_with_params(
        &store,
        &[x],
        BnMode::Eval,
        &FdOptions::with_eps(1e-6),
        |sess, v| {
            let a = TokenGrid::from_map(v[0])?;
            let y = lrp::lrp(sess, &a, &p)?.tokens;
            Ok(y.mul(sess.graph().constant(readout.clone()))?
                .sum_all()
                .square())
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_downsampling_variant_rounds_up(h in 2usize..9, w in 2usize..9, which in 0usize..5) {
        let variant = ["DWC", "NC", "AP", "MP", "DFC"][which];
        let (store, p) = build(2, variant, false, 0);
        let g = Graph::new();
        let sess = Session::new(&g, &store, BnMode::Eval, false);
        let a = grid_of(&g, &rand(&[1, 2, h, w], 1));
        let out = lrp::lrp(&sess, &a, &p).unwrap();
        prop_assert_eq!((out.h, out.w), (h.div_ceil(2), w.div_ceil(2)));
        prop_assert_eq!(out.len(), out.h * out.w);
    }
}
