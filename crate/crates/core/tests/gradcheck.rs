//! Finite-difference checks for every differentiable primitive and block.

use fabme::nn::{
    grad_check_block, probe_weights, Block, C2f, C2fVMamba, C2fVMambaConfig, Emca, EmcaConfig, Init, ParamStore, Sppf,
    Vss, VssConfig,
};
use fabme::scan::{scan_maps, selective_scan_1d, ss2d, Direction, ScanParams, Ss2dConfig};
use fabme::tensor::{grad_check, grad_check_many, ConvSpec, GradReport, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 3e-6;
const TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_pass(what: &str, report: GradReport) {
    println!("{what}: {report}");
    assert!(report.passed, "{what}: {report}");
}

const SHAPES: [[usize; 4]; 3] = [[1, 2, 3, 3], [2, 3, 4, 5], [1, 4, 5, 3]];

#[test]
fn conv2d_dense_strided_padded() {
    for (i, &[n, c, h, w]) in SHAPES.iter().enumerate() {
        let mut r = rng(i as u64);
        let spec = ConvSpec::new(c, 3, 3, 1 + i % 2, 1);
        let x = Tensor::uniform(&[n, c, h, w], -1.0, 1.0, &mut r);
        let wt = Tensor::uniform(&spec.weight_dims(), -0.5, 0.5, &mut r);
        let b = Tensor::uniform(&[3], -0.5, 0.5, &mut r);
        let report = grad_check_many(
            |_, v| {
                let y = v[0].conv2d(v[1], Some(v[2]), spec)?;
                y.dot_const(&probe_weights(&y.dims()))
            },
            &[x, wt, b],
            EPS,
            TOL,
        )
        .unwrap();
        assert_pass(&format!("conv2d {:?}", [n, c, h, w]), report);
    }
}

#[test]
fn conv2d_depthwise_and_pointwise() {
    let mut r = rng(10);
    let x = Tensor::uniform(&[2, 4, 8, 8], -1.0, 1.0, &mut r);
    let spec = ConvSpec::depthwise(4, 3);
    let wt = Tensor::uniform(&spec.weight_dims(), -0.5, 0.5, &mut r);
    let b = Tensor::uniform(&[4], -0.5, 0.5, &mut r);
    let report = grad_check_many(
        |_, v| {
            let y = v[0].conv2d(v[1], Some(v[2]), spec)?;
            y.dot_const(&probe_weights(&y.dims()))
        },
        &[x.clone(), wt, b],
        EPS,
        1e-6,
    )
    .unwrap();
    assert_pass("depthwise conv2d 2x4x8x8", report);

    let spec = ConvSpec::new(4, 5, 1, 1, 0).with_bias(false);
    let wt = Tensor::uniform(&spec.weight_dims(), -0.5, 0.5, &mut r);
    let report = grad_check_many(
        |_, v| {
            let y = v[0].conv2d(v[1], None, spec)?;
            y.dot_const(&probe_weights(&y.dims()))
        },
        &[x, wt],
        EPS,
        TOL,
    )
    .unwrap();
    assert_pass("pointwise conv2d", report);
}

#[test]
fn conv1d_over_channels() {
    for (i, c) in [3usize, 6, 9].into_iter().enumerate() {
        let mut r = rng(20 + i as u64);
        let x = Tensor::uniform(&[2, c, 1, 1], -1.0, 1.0, &mut r);
        let k = Tensor::uniform(&[3 + 2 * (i % 2)], -1.0, 1.0, &mut r);
        let report = grad_check_many(
            |_, v| {
                let y = v[0].conv1d_channels(v[1])?;
                y.dot_const(&probe_weights(&y.dims()))
            },
            &[x, k],
            EPS,
            TOL,
        )
        .unwrap();
        assert_pass(&format!("conv1d c={c}"), report);
    }
}

#[test]
fn global_pools() {
    for (i, dims) in SHAPES.iter().enumerate() {
        let x = Tensor::uniform(dims, -1.0, 1.0, &mut rng(30 + i as u64));
        let report = grad_check(
            |_, x| {
                let y = x.global_avg_pool()?.add(x.global_max_pool()?)?;
                y.dot_const(&probe_weights(&y.dims()))
            },
            &x,
            EPS,
            TOL,
        )
        .unwrap();
        assert_pass(&format!("gap+gmp {dims:?}"), report);
    }
}

#[test]
fn activations() {
    for (i, dims) in SHAPES.iter().enumerate() {
        let x = Tensor::uniform(dims, -3.0, 3.0, &mut rng(40 + i as u64));
        for (name, f) in [
            (
                "sigmoid",
                (|v: fabme::tensor::Var| v.sigmoid()) as fn(fabme::tensor::Var) -> fabme::tensor::Var,
            ),
            ("silu", |v| v.silu()),
            ("softplus", |v| v.softplus()),
        ] {
            let report = grad_check(|_, x| f(x).dot_const(&probe_weights(dims)), &x, EPS, TOL).unwrap();
            assert_pass(&format!("{name} {dims:?}"), report);
        }
    }
}

#[test]
fn plumbing_ops() {
    let mut r = rng(50);
    let x = Tensor::uniform(&[2, 6, 4, 4], -1.0, 1.0, &mut r);
    let s = Tensor::uniform(&[2, 6, 1, 1], -1.0, 1.0, &mut r);
    let g = Tensor::uniform(&[6], 0.5, 1.5, &mut r);
    let b = Tensor::uniform(&[6], -0.5, 0.5, &mut r);
    let report = grad_check_many(
        |tape, v| {
            let parts = v[0].split_channels(&[2, 4])?;
            let mixed = tape.concat_channels(&[parts[1], parts[0]])?;
            let y = mixed.mul_channel(v[1])?.mul(v[0])?.add(v[0].scale(0.3))?;
            let y = y.layer_norm_channels(v[2], v[3], 1e-5)?.upsample2x()?;
            y.dot_const(&probe_weights(&y.dims()))
        },
        &[x.clone(), s, g, b],
        EPS,
        TOL,
    )
    .unwrap();
    assert_pass("split/concat/mul/norm/upsample", report);

    // Chained pools create exact ties, so each pooling geometry is checked alone.
    for (k, stride, pad) in [(3, 1, 1), (2, 2, 0), (5, 1, 2)] {
        let report = grad_check(
            |_, v| {
                let y = v.maxpool2d(k, stride, pad)?;
                y.dot_const(&probe_weights(&y.dims()))
            },
            &x,
            EPS,
            TOL,
        )
        .unwrap();
        assert_pass(&format!("maxpool k={k} s={stride} p={pad}"), report);
    }
}

fn scan_inputs(seed: u64, dm: usize, ds: usize, h: usize, w: usize) -> Vec<Tensor> {
    let mut r = rng(seed);
    vec![
        Tensor::uniform(&[1, dm, h, w], -1.0, 1.0, &mut r),
        Tensor::uniform(&[1, dm, h, w], 0.2, 1.2, &mut r),
        Tensor::uniform(&[1, ds, h, w], -1.0, 1.0, &mut r),
        Tensor::uniform(&[1, ds, h, w], -1.0, 1.0, &mut r),
        Tensor::uniform(&[dm, ds], -1.0, 0.5, &mut r),
        Tensor::uniform(&[dm], -1.0, 1.0, &mut r),
    ]
}

#[test]
fn raw_scan_kernel() {
    for (i, (dm, ds, h, w)) in [(2, 2, 2, 3), (3, 1, 3, 3), (1, 3, 4, 2)].into_iter().enumerate() {
        let inputs = scan_inputs(60 + i as u64, dm, ds, h, w);
        let report = grad_check_many(
            |_, v| {
                let y = scan_maps(v[0], v[1], v[2], v[3], v[4], v[5], &Direction::ALL)?;
                y.dot_const(&probe_weights(&y.dims()))
            },
            &inputs,
            EPS,
            TOL,
        )
        .unwrap();
        assert_pass(&format!("scan kernel {dm}x{ds}x{h}x{w}"), report);
    }
}

#[test]
fn ss2d_full_path() {
    for (i, (c, ds, h, w)) in [(4, 2, 3, 3), (3, 2, 2, 4), (2, 3, 3, 2)].into_iter().enumerate() {
        let mut r = rng(70 + i as u64);
        let x = Tensor::uniform(&[1, c, h, w], -1.0, 1.0, &mut r);
        let mut p = ScanParams::init(c, ds, &mut r);
        // Push step sizes into a range where the scan has real memory.
        p.b_delta = Tensor::uniform(&[c], -1.0, 0.5, &mut r);
        let cfg = Ss2dConfig {
            d_state: ds,
            ..Ss2dConfig::default()
        };
        let inputs = vec![x, p.w_delta, p.b_delta, p.w_b, p.w_c, p.a_log, p.d_skip];
        let report = grad_check_many(
            |_, v| {
                let vars = fabme::scan::ScanVars {
                    d_model: c,
                    d_state: ds,
                    w_delta: v[1],
                    b_delta: v[2],
                    w_b: v[3],
                    w_c: v[4],
                    a_log: v[5],
                    d_skip: v[6],
                };
                let y = ss2d(v[0], &vars, &cfg)?;
                y.dot_const(&probe_weights(&y.dims()))
            },
            &inputs,
            EPS,
            TOL,
        )
        .unwrap();
        assert_pass(&format!("ss2d 1x{c}x{h}x{w} d_state={ds}"), report);
    }
}

#[test]
fn selective_scan_1d_path() {
    let mut r = rng(80);
    let (c, ds, len) = (3, 2, 5);
    let x = Tensor::uniform(&[1, c, 1, len], -1.0, 1.0, &mut r);
    let p = ScanParams::init(c, ds, &mut r);
    let inputs = vec![x, p.w_delta, p.b_delta, p.w_b, p.w_c, p.a_log, p.d_skip];
    let report = grad_check_many(
        |_, v| {
            let vars = fabme::scan::ScanVars {
                d_model: c,
                d_state: ds,
                w_delta: v[1],
                b_delta: v[2],
                w_b: v[3],
                w_c: v[4],
                a_log: v[5],
                d_skip: v[6],
            };
            let y = selective_scan_1d(v[0], &vars)?;
            y.dot_const(&probe_weights(&y.dims()))
        },
        &inputs,
        EPS,
        TOL,
    )
    .unwrap();
    assert_pass("selective_scan_1d", report);
}

fn check_block<B: Block>(name: &str, build: impl Fn(&mut Init) -> B, shapes: &[[usize; 4]]) {
    for (i, dims) in shapes.iter().enumerate() {
        let mut r = rng(100 + i as u64);
        let mut store = ParamStore::new();
        let block = build(&mut Init::new(&mut store, &mut r));
        // Non-zero biases so every parameter carries a gradient signal.
        for p in store.iter_mut() {
            if !p.decay {
                let data: Vec<f64> = p
                    .value
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v + 0.1 * ((j as f64) + 0.5).cos())
                    .collect();
                p.value = Tensor::new(p.value.dims(), data).unwrap();
            }
        }
        let x = Tensor::uniform(dims, -1.0, 1.0, &mut r);
        let report = grad_check_block(&block, &store, &x, EPS, TOL).unwrap();
        assert_pass(&format!("{name} {dims:?}"), report);
    }
}

#[test]
fn emca_block() {
    check_block(
        "emca",
        |init| Emca::new(&mut init.sub("emca"), EmcaConfig { channels: 4, k: 3 }).unwrap(),
        &[[1, 4, 3, 3], [2, 4, 2, 5], [1, 4, 4, 4]],
    );
}

#[test]
fn vss_block() {
    check_block(
        "vss",
        |init| Vss::new(&mut init.sub("vss"), VssConfig::new(4, 2)).unwrap(),
        &[[1, 4, 3, 3], [1, 4, 2, 3], [2, 4, 2, 2]],
    );
}

#[test]
fn c2f_vmamba_block() {
    for strict in [true, false] {
        check_block(
            "c2f_vmamba",
            |init| {
                let cfg = C2fVMambaConfig {
                    d_state: 2,
                    strict_concat: strict,
                    ..C2fVMambaConfig::new(8, 8, 2)
                };
                C2fVMamba::new(&mut init.sub("c2f"), cfg).unwrap()
            },
            &[[1, 8, 4, 4], [1, 8, 2, 3], [1, 8, 3, 2]],
        );
    }
}

#[test]
fn c2f_and_sppf_blocks() {
    check_block(
        "c2f",
        |init| C2f::new(init, 4, 4, 2, true).unwrap(),
        &[[1, 4, 3, 3], [1, 4, 4, 2], [2, 4, 2, 2]],
    );
    check_block(
        "sppf",
        |init| Sppf::new(init, 4, 4).unwrap(),
        &[[1, 4, 3, 3], [1, 4, 6, 6], [2, 4, 2, 3]],
    );
}
