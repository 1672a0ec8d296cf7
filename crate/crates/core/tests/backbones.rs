mod common;

use common::random;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgsln_core::backbone::{Model, ModelConfig, Variant};
use sgsln_core::nn::{Conv2d, Hcu, ParamBuilder, ParamStore};
use sgsln_core::tensor::kernels::PadMode;
use sgsln_core::tensor::{grad_check_sampled, GRAD_CHECK_EPS};
use sgsln_core::nn::Bound;
use sgsln_core::tensor::Result;
use sgsln_core::{Tape, Tensor, TensorError, Var};

fn tiny(variant: Variant) -> Model {
    Model::new(ModelConfig::new(variant, 16)).unwrap()
}

fn image(seed: u64, size: usize) -> Tensor<f32> {
    random::<f32>(&[1, 3, size, size], seed).map(|v| 0.5 + 0.5 * v)
}

#[test]
fn forward_shape_contract() {
    let m = tiny(Variant::Eded);
    let (f, a, b) = m.predict(&image(1, 64), &image(2, 64)).unwrap();
    assert_eq!(f.shape(), &[1, 1, 64, 64]);
    assert_eq!(a.as_ref().unwrap().shape(), &[1, 1, 32, 32]);
    assert_eq!(b.as_ref().unwrap().shape(), &[1, 1, 32, 32]);
    for t in [&f, a.as_ref().unwrap(), b.as_ref().unwrap()] {
        assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn single_decoder_emits_fusion_only() {
    let (f, a, b) = tiny(Variant::Mesd).predict(&image(1, 32), &image(2, 32)).unwrap();
    assert_eq!(f.shape(), &[1, 1, 32, 32]);
    assert!(a.is_none() && b.is_none());
}

#[test]
fn indivisible_extent_is_rejected_with_padding_hint() {
    let m = tiny(Variant::Eded);
    let x = Tensor::zeros([1, 3, 48, 64]);
    let err = m.predict(&x, &x).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, TensorError::ShapeMismatch { dim: "height", .. }), "{msg}");
    assert!(msg.contains("pad by 16 to 64"), "{msg}");
    let y = Tensor::zeros([1, 3, 64, 64]);
    assert!(m.predict(&y, &Tensor::zeros([1, 3, 32, 64])).is_err());
    assert!(m.predict(&Tensor::zeros([1, 1, 64, 64]), &Tensor::zeros([1, 1, 64, 64])).is_err());
}

#[test]
fn constant_pair_gives_constant_maps() {
    for variant in Variant::ALL {
        let m = tiny(variant);
        let x = Tensor::full([1, 3, 64, 64], 0.37f32);
        let (f, a, b) = m.predict(&x, &x).unwrap();
        for t in [Some(f), a, b].into_iter().flatten() {
            let v0 = t.data()[0];
            assert!(t.data().iter().all(|&v| (v - v0).abs() <= 1e-6), "{variant}");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let m = tiny(Variant::Eded);
    let (a, b) = (image(3, 32), image(4, 32));
    assert_eq!(m.predict(&a, &b).unwrap().0, m.predict(&a, &b).unwrap().0);
    let again = tiny(Variant::Eded);
    assert_eq!(m.params, again.params);
}

#[test]
fn swapped_inputs_match_swapped_roles() {
    for variant in [Variant::Eded, Variant::Ded] {
        let m = tiny(variant);
        let s = m.swapped_roles();
        let (a, b) = (image(5, 64), image(6, 64));
        let (f, m1, m2) = m.predict(&a, &b).unwrap();
        let (fs, s1, s2) = s.predict(&b, &a).unwrap();
        assert!(f.max_abs_diff(&fs) <= 1e-6, "{variant}: {}", f.max_abs_diff(&fs));
        assert_eq!(m1, s2);
        assert_eq!(m2, s1);
        // The unmodified model is not symmetric in its inputs.
        assert!(f.max_abs_diff(&m.predict(&b, &a).unwrap().0) > 1e-4);
    }
}

#[test]
fn exchange_is_parameter_free() {
    let eded = tiny(Variant::Eded).count_params();
    assert_eq!(eded, tiny(Variant::Ded).count_params());
    for position in 1..=5 {
        let mut c = ModelConfig::new(Variant::Eded, 32);
        c.exchange_position = position;
        assert_eq!(Model::new(c).unwrap().count_params(), Model::new(ModelConfig::new(Variant::Ded, 32)).unwrap().count_params());
    }
}

#[test]
fn exchange_changes_only_later_features() {
    let (a, b) = (image(7, 32), image(8, 32));
    for position in 1..=5 {
        let mut c = ModelConfig::new(Variant::Eded, 16);
        c.exchange_position = position;
        let eded = Model::new(c.clone()).unwrap();
        c.variant = Variant::Ded;
        let ded = Model::new(c).unwrap();
        assert_eq!(eded.params, ded.params);
        let trace = |m: &Model| -> Vec<(Tensor<f32>, Tensor<f32>)> {
            let tape = Tape::new();
            let p = m.params.bind_frozen(&tape);
            let (feats, _) = m.encode(&p, tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
            feats.iter().map(|(x, y)| (x.to_tensor(), y.to_tensor())).collect()
        };
        let (te, td) = (trace(&eded), trace(&ded));
        for k in 0..5 {
            let same = te[k] == td[k];
            assert_eq!(same, k + 1 < position, "position {position}, block {}", k + 1);
        }
    }
}

#[test]
fn encoder_weights_are_shared_between_branches() {
    let mut m = tiny(Variant::Ded);
    let x = image(9, 32);
    let run = |m: &Model| -> Vec<(Tensor<f32>, Tensor<f32>)> {
        let tape = Tape::new();
        let p = m.params.bind_frozen(&tape);
        let (feats, _) = m.encode(&p, tape.constant(x.clone()), tape.constant(x.clone())).unwrap();
        feats.iter().map(|(u, v)| (u.to_tensor(), v.to_tensor())).collect()
    };
    let before = run(&m);
    let id = m.params.find("encoder.block1.stem.conv.weight").unwrap();
    m.params.get_mut(id).data_mut()[0] += 0.5;
    let after = run(&m);
    for k in 0..5 {
        assert_eq!(after[k].0, after[k].1);
        assert_ne!(after[k].0, before[k].0);
    }
}

#[test]
fn parameter_formulas() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let conv = Conv2d::new(&mut pb, "c", 32, 64, 3, 1, true, PadMode::Zeros).unwrap();
    assert_eq!(conv.param_count(), 18496);
    let hcu = Hcu::new(&mut pb, "h", 64, 64, 1).unwrap();
    assert_eq!(hcu.core_conv_params(), 9216);
    assert_eq!(store.total(), 18496 + 9216 + 2 * 32);
}

#[test]
fn parameter_table_covers_total() {
    let m = Model::new(ModelConfig::new(Variant::Eded, 128)).unwrap();
    let table = m.param_table();
    assert_eq!(table.iter().map(|(_, n)| n).sum::<usize>(), m.count_params());
    assert_eq!(table[0].0, "encoder.block1");
    assert!(table.iter().any(|(g, _)| g == "fusion.tfam3"));
}

#[test]
fn parameter_totals_near_reported_sizes() {
    let p512 = Model::new(ModelConfig::new(Variant::Eded, 512)).unwrap().count_params() as f64;
    let p128 = Model::new(ModelConfig::new(Variant::Eded, 128)).unwrap().count_params() as f64;
    assert!((p512 / 6.04e6 - 1.0).abs() <= 0.20, "{p512}");
    assert!((p128 / 0.38e6 - 1.0).abs() <= 0.20, "{p128}");
}

#[test]
fn flop_estimate_counts_convolutions_twice() {
    let m = tiny(Variant::Eded);
    let (flops, macs) = m.estimate_flops(64, 64).unwrap();
    assert!(flops > 2 * macs);
    let (f128, m128) = m.estimate_flops(128, 128).unwrap();
    // Everything except the pooled-descriptor ops scales with the area.
    assert!((m128 as f64 / (4 * macs) as f64 - 1.0).abs() < 1e-3);
    assert!((f128 as f64 / (4 * flops) as f64 - 1.0).abs() < 1e-3);
    assert!(m.estimate_flops(60, 64).is_err());
}

#[test]
fn full_model_gradient_check() {
    let m = tiny(Variant::Eded);
    let params = m.params.cast::<f64>();
    let t2 = random::<f64>(&[1, 3, 32, 32], 11);
    let x = random::<f64>(&[1, 3, 32, 32], 10);
    let r_f = random::<f64>(&[1, 1, 32, 32], 12);
    let r_b = random::<f64>(&[1, 1, 16, 16], 13);
    let fixed = [&t2, &r_f, &r_b];
    let picks: Vec<usize> = (0..x.numel()).step_by(97).collect();
    let report = grad_check_sampled(
        |v| {
            let p = params.bind_frozen(v.tape());
            model_loss(&m, &p, v, fixed)
        },
        &x,
        GRAD_CHECK_EPS,
        &picks,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "input: {report:?}");

    for name in ["encoder.block1.stem.conv.weight", "encoder.block3.cbam.fc1.weight", "fusion.tfam2.spatial_conv1", "decoder.head.bias"] {
        let id = params.find(name).unwrap();
        let report = grad_check_sampled(
            |w| {
                let tape = w.tape();
                let mut p = params.bind_frozen(tape);
                p.replace(id, w);
                model_loss(&m, &p, tape.constant(x.clone()), fixed)
            },
            params.get(id),
            GRAD_CHECK_EPS,
            &(0..params.get(id).numel()).step_by(7).take(8).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{name}: {report:?}");
    }
}

fn model_loss<'t>(m: &Model, p: &Bound<'t, f64>, t1: Var<'t, f64>, fixed: [&Tensor<f64>; 3]) -> Result<Var<'t, f64>> {
    let tape = t1.tape();
    let [t2, r_f, r_b] = fixed;
    let out = m.forward_bound(p, t1, tape.constant(t2.clone()))?;
    let a = out.fusion.mul(tape.constant(r_f.clone()))?.sum();
    let b = out.t1.unwrap().mul(tape.constant(r_b.clone()))?.sum();
    let c = out.t2.unwrap().mul(tape.constant(r_b.clone()))?.sum();
    a.add(b)?.add(c)
}
