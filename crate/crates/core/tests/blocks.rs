use fabme::nn::{
    adaptive_kernel, Block, Bottleneck, C2f, C2fVMamba, C2fVMambaConfig, Ctx, Emca, EmcaConfig, Init, ParamStore, Sppf,
    Vss, VssConfig,
};
use fabme::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build<B>(seed: u64, f: impl FnOnce(&mut Init) -> B) -> (B, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = f(&mut Init::new(&mut store, &mut rng));
    (block, store)
}

fn run<B: Block>(block: &B, store: &ParamStore, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, false);
    let y = block.forward(&ctx, tape.constant(x.clone())).unwrap();
    (*y.value()).clone()
}

fn random(dims: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(dims, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// EMCA over `channels` with kernel `[0, 1, 0]`, so each channel sees only itself.
fn identity_emca(channels: usize) -> (Emca, ParamStore) {
    let (emca, mut store) = build(0, |i| Emca::new(i, EmcaConfig { channels, k: 3 }).unwrap());
    store.get_mut(emca.kernel).value = Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap();
    (emca, store)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn emca_constant_channel_fixture() {
    let m = [1.0, 2.0, 3.0, 4.0];
    let mut data = Vec::new();
    for v in m {
        data.extend(std::iter::repeat_n(v, 9));
    }
    let x = Tensor::new(&[1, 4, 3, 3], data).unwrap();
    let (emca, store) = identity_emca(4);
    let y = run(&emca, &store, &x);
    for (c, v) in m.iter().enumerate() {
        let expected = sigmoid(2.0 * v) * v;
        for i in 0..9 {
            assert!((y.data()[c * 9 + i] - expected).abs() <= 1e-12);
        }
    }
}

#[test]
fn emca_zero_input_gives_half() {
    let (emca, store) = build(3, |i| Emca::new(i, EmcaConfig::adaptive(8)).unwrap());
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false);
    let a = emca
        .attention(&ctx, tape.constant(Tensor::zeros(&[1, 8, 4, 4])))
        .unwrap();
    assert!(a.value().data().iter().all(|&v| v == 0.5));
}

#[test]
fn emca_preserves_shape() {
    let (emca, store) = build(1, |i| Emca::new(i, EmcaConfig::adaptive(8)).unwrap());
    let y = run(&emca, &store, &random(&[2, 8, 16, 16], 4));
    assert_eq!(y.dims(), &[2, 8, 16, 16]);
}

#[test]
fn emca_kernel_sizes() {
    assert_eq!(adaptive_kernel(512), 5);
    assert_eq!(adaptive_kernel(128), 5);
    assert_eq!(adaptive_kernel(4), 3);
    assert!(EmcaConfig { channels: 8, k: 4 }.validate().is_err());
    assert!(EmcaConfig { channels: 8, k: 1 }.validate().is_err());
}

#[test]
fn vss_shape_and_zero_fixed_point() {
    let (vss, store) = build(2, |i| Vss::new(i, VssConfig::new(32, 16)).unwrap());
    let y = run(&vss, &store, &random(&[1, 32, 8, 8], 9));
    assert_eq!(y.dims(), &[1, 32, 8, 8]);
    assert!(y.is_finite());
    let zero = run(&vss, &store, &Tensor::zeros(&[1, 32, 8, 8]));
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn sppf_preserves_shape() {
    let (sppf, store) = build(5, |i| Sppf::new(i, 64, 64).unwrap());
    assert_eq!(run(&sppf, &store, &random(&[1, 64, 8, 8], 1)).dims(), &[1, 64, 8, 8]);
}

#[test]
fn zeroed_bottleneck_is_identity() {
    let (b, mut store) = build(6, |i| Bottleneck::new(i, 4, 4, true).unwrap());
    for p in store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let x = random(&[1, 4, 5, 5], 2);
    assert_eq!(run(&b, &store, &x), x);
}

#[test]
fn concat_widths() {
    for n in 1..=3 {
        let (c2f, _) = build(0, |i| C2f::new(i, 8, 8, n, false).unwrap());
        assert_eq!(c2f.concat_width(), (n + 2) * 4);
        let cfg = C2fVMambaConfig {
            d_state: 4,
            ..C2fVMambaConfig::new(8, 8, n)
        };
        let (block, store) = build(0, |i| C2fVMamba::new(i, cfg.clone()).unwrap());
        assert_eq!(cfg.concat_width(), (n + 3) * 4);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let cat = block
            .concat(&ctx, tape.constant(random(&[1, 8, 4, 4], n as u64)))
            .unwrap();
        assert_eq!(cat.dims(), vec![1, (n + 3) * 4, 4, 4]);
        let y = block.forward(&ctx, tape.constant(random(&[1, 8, 4, 4], 7))).unwrap();
        assert_eq!(y.dims(), vec![1, 8, 4, 4]);
    }
    let loose = C2fVMambaConfig {
        strict_concat: false,
        ..C2fVMambaConfig::new(8, 8, 2)
    };
    assert_eq!(loose.concat_width(), 16);
    assert!(C2fVMambaConfig::new(8, 7, 1).validate().is_err());
    assert!(C2fVMambaConfig::new(8, 8, 0).validate().is_err());
}

fn attention(emca: &Emca, store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, false);
    let a = emca.attention(&ctx, tape.constant(x.clone())).unwrap();
    a.value().data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emca_weights_in_open_unit_interval(
        data in prop::collection::vec(-5.0f64..5.0, 6 * 9),
        seed in 0u64..1000,
    ) {
        let (emca, store) = build(seed, |i| Emca::new(i, EmcaConfig::adaptive(6)).unwrap());
        let x = Tensor::new(&[1, 6, 3, 3], data).unwrap();
        for a in attention(&emca, &store, &x) {
            prop_assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn emca_monotone_in_channel(
        data in prop::collection::vec(-5.0f64..5.0, 4 * 4),
        channel in 0usize..4,
        bump in 0.0f64..2.0,
    ) {
        let (emca, store) = identity_emca(4);
        let x = Tensor::new(&[1, 4, 2, 2], data).unwrap();
        let mut raised = x.clone();
        for v in &mut raised.data_mut()[channel * 4..(channel + 1) * 4] {
            *v += bump;
        }
        prop_assert!(attention(&emca, &store, &raised)[channel] >= attention(&emca, &store, &x)[channel]);
    }

    #[test]
    fn emca_permutation_equivariant(
        data in prop::collection::vec(-5.0f64..5.0, 5 * 4),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let (emca, store) = identity_emca(5);
        let x = Tensor::new(&[1, 5, 2, 2], data).unwrap();
        let mut permuted = Tensor::zeros(&[1, 5, 2, 2]);
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data_mut()[dst * 4..dst * 4 + 4].copy_from_slice(&x.data()[src * 4..src * 4 + 4]);
        }
        let y = run(&emca, &store, &x);
        let yp = run(&emca, &store, &permuted);
        for (dst, &src) in perm.iter().enumerate() {
            prop_assert_eq!(&yp.data()[dst * 4..dst * 4 + 4], &y.data()[src * 4..src * 4 + 4]);
        }
    }
}
