use fabme::model::{GraphSpec, Model, NeckBlock, Scale, Variant, VmambaPosition};
use fabme::nn::{adaptive_kernel, Init, ParamStore};
use fabme::tensor::{ConvSpec, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn nano(variant: Variant) -> Model {
    Model::build(GraphSpec::preset(Scale::NanoTest, variant)).unwrap()
}

#[test]
fn single_conv_count() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Init::new(&mut store, &mut rng)
        .conv(ConvSpec::new(4, 8, 1, 1, 0))
        .unwrap();
    assert_eq!(store.count(), 40);
}

#[test]
fn s_scale_count_direction() {
    let baseline = Model::build(GraphSpec::baseline()).unwrap().count_params();
    let fabme = Model::build(GraphSpec::fabme()).unwrap().count_params();
    let rel = (baseline as f64 - 11.10e6).abs() / 11.10e6;
    assert!(rel <= 0.15, "baseline {baseline}");
    assert!(fabme <= baseline, "fabme {fabme} > baseline {baseline}");
}

#[test]
fn emca_toggle_adds_exactly_k() {
    for scale in [Scale::S, Scale::NanoTest] {
        let off = Model::build(GraphSpec::preset(scale, Variant::Baseline)).unwrap();
        let on = Model::build(GraphSpec::preset(scale, Variant::EmcaOnly)).unwrap();
        let k = adaptive_kernel(off.spec.widths()[4]);
        assert_eq!(on.emca().unwrap().cfg.k, k);
        assert_eq!(on.count_params() - off.count_params(), k);
    }
}

#[test]
fn vmamba_swap_touches_only_its_block() {
    for (slot, pos) in [
        VmambaPosition::C2f1,
        VmambaPosition::C2f2,
        VmambaPosition::C2f3,
        VmambaPosition::C2f4,
    ]
    .into_iter()
    .enumerate()
    {
        let base = nano(Variant::Baseline);
        let swapped = nano(Variant::Vmamba(pos));
        let prefix = format!("neck.c2f{}.", slot + 1);
        let outside = |m: &Model| -> Vec<(String, Vec<usize>)> {
            m.params
                .iter()
                .filter(|p| !p.name.starts_with(&prefix))
                .map(|p| (p.name.clone(), p.value.dims().to_vec()))
                .collect()
        };
        assert_eq!(outside(&base), outside(&swapped), "{pos}");
        assert!(matches!(swapped.neck()[slot], NeckBlock::VMamba(_)));
        assert_eq!(swapped.vss_block_count(), 1);
    }
}

#[test]
fn baseline_has_no_extra_blocks() {
    let m = nano(Variant::Baseline);
    assert_eq!(m.vss_block_count(), 0);
    assert!(m.emca().is_none());
    let f = nano(Variant::FabMe);
    assert!(matches!(f.neck()[2], NeckBlock::VMamba(_)));
    assert!(f.emca().is_some());
}

#[test]
fn nano_forward_shapes() {
    let m = nano(Variant::FabMe);
    let x = Tensor::full(&[1, 3, 64, 64], 0.5);
    let outs = m.infer(&x).unwrap();
    let dims: Vec<Vec<usize>> = outs.iter().map(|t| t.dims().to_vec()).collect();
    assert_eq!(dims, vec![vec![1, 25, 8, 8], vec![1, 25, 4, 4], vec![1, 25, 2, 2]]);
}

#[test]
fn backbone_widths_increase() {
    for scale in [Scale::S, Scale::NanoTest] {
        let w = GraphSpec::preset(scale, Variant::FabMe).widths();
        assert!(w.windows(2).all(|p| p[0] < p[1]), "{w:?}");
    }
}

#[test]
fn rejects_bad_resolution() {
    let m = nano(Variant::Baseline);
    assert!(m.infer(&Tensor::zeros(&[1, 3, 48, 64])).is_err());
    assert!(m.infer(&Tensor::zeros(&[1, 1, 64, 64])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn forward_shape_contract(hm in 1usize..4, wm in 1usize..4, variant in 0usize..7) {
        let m = nano(Variant::ALL[variant]);
        let (h, w) = (32 * hm, 32 * wm);
        let outs = m.infer(&Tensor::full(&[1, 3, h, w], 0.25)).unwrap();
        for (out, s) in outs.iter().zip([8, 16, 32]) {
            prop_assert_eq!(out.dims(), &[1, 25, h / s, w / s][..]);
            prop_assert!(out.is_finite());
        }
    }
}
