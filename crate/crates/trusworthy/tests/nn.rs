use approx::assert_abs_diff_eq;
use candle_core::{DType, Device, Tensor, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use trusworthy::config::{AggregatorSpec, EncoderSpec, OptimizerKind, StemKind};
use trusworthy::nn::conv::conv2d;
use trusworthy::nn::layers::{binary_cross_entropy, cancer_probability, softmax_last};
use trusworthy::nn::{MilModel, PatchClassifier};
use trusworthy::train::optimizer;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn tiny_encoder() -> EncoderSpec {
    EncoderSpec {
        stem: StemKind::Patchify,
        stem_patch: 2,
        stem_width: 4,
        widths: vec![4, 6],
        blocks_per_stage: vec![1, 1],
        embedding_dim: 8,
    }
}

fn tiny_aggregator() -> AggregatorSpec {
    AggregatorSpec {
        layers: 2,
        heads: 2,
        model_dim: 8,
        mlp_dim: 16,
        positional_encoding: false,
    }
}

#[test]
fn conv_matches_reference_convolution() {
    for (stride, padding, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 3, 7), (4, 0, 4)] {
        let x = random(&[2, 3, 11, 9], 1);
        let w = random(&[5, 3, k, k], 2);
        let ours = conv2d(&x, &w, stride, padding).unwrap();
        let reference = x.conv2d(&w, padding, stride, 1, 1).unwrap();
        assert_eq!(ours.dims(), reference.dims());
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let x = Var::from_tensor(&random(&[1, 2, 7, 6], 3)).unwrap();
    let w = Var::from_tensor(&random(&[3, 2, 3, 3], 4)).unwrap();
    let r = random(&[1, 3, 4, 3], 5);
    let loss = |x: &Tensor, w: &Tensor| -> f64 {
        (conv2d(x, w, 2, 1).unwrap() * &r).unwrap().sum_all().unwrap().to_scalar().unwrap()
    };
    let out = (conv2d(x.as_tensor(), w.as_tensor(), 2, 1).unwrap() * &r).unwrap().sum_all().unwrap();
    let grads = out.backward().unwrap();
    let h = 1e-6;
    for (var, other, is_x) in [(&x, &w, true), (&w, &x, false)] {
        let g: Vec<f64> = grads.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
        for i in (0..base.len()).step_by(5) {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap();
                if is_x {
                    loss(&t, other.as_tensor())
                } else {
                    loss(other.as_tensor(), &t)
                }
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-6);
        }
    }
}

#[test]
fn full_encoder_embeds_a_patch_in_512_dimensions() {
    let model = PatchClassifier::new(&EncoderSpec::resnet18_single_conv(), 0, DType::F32).unwrap();
    let x = Tensor::zeros((1, 1, 256, 256), DType::F32, &Device::Cpu).unwrap();
    let z = model.encoder.forward(&x, false).unwrap();
    assert_eq!(z.dims(), &[1, 512]);
}

#[test]
fn zero_head_predicts_one_half() {
    let model = MilModel::new(None, 12, &tiny_aggregator(), 3, DType::F64).unwrap();
    let feats = random(&[3, 5, 12], 6);
    let logits = model.forward_features(&feats).unwrap();
    for p in cancer_probability(&logits).unwrap() {
        assert_eq!(p, 0.5);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let logits = (random(&[6, 2], 7) * 20.0).unwrap();
    let sums: Vec<f64> = softmax_last(&logits).unwrap().sum(1).unwrap().to_vec1().unwrap();
    for s in sums {
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
    }
}

/// Replaces the zero head so the output depends on the bag.
fn randomize_head(model: &MilModel, seed: u64) {
    let head = model.store.var("aggregator.head.weight").expect("head weight");
    head.set(&random(head.dims(), seed).to_dtype(head.dtype()).unwrap()).unwrap();
}

#[test]
fn bag_order_does_not_change_the_prediction() {
    let model = MilModel::new(None, 12, &tiny_aggregator(), 4, DType::F32).unwrap();
    randomize_head(&model, 8);
    let feats = random(&[1, 9, 12], 9).to_dtype(DType::F32).unwrap();
    let perm = Tensor::new(&[4u32, 0, 8, 2, 7, 1, 5, 3, 6], &Device::Cpu).unwrap();
    let shuffled = feats.index_select(&perm, 1).unwrap();
    let a = cancer_probability(&model.forward_features(&feats).unwrap()).unwrap();
    let b = cancer_probability(&model.forward_features(&shuffled).unwrap()).unwrap();
    assert!((a[0] - b[0]).abs() < 1e-5);
    assert!((a[0] - 0.5).abs() > 1e-6);
}

#[test]
fn one_end_to_end_step_moves_the_encoder() {
    let model = MilModel::new(Some(&tiny_encoder()), 8, &tiny_aggregator(), 5, DType::F32).unwrap();
    randomize_head(&model, 10);
    let before = model.store.checksum("encoder").unwrap();
    let x = random(&[2 * 4, 1, 8, 8], 11).to_dtype(DType::F32).unwrap();
    let loss = binary_cross_entropy(&model.forward_patches(&x, 2, true).unwrap(), &[true, false]).unwrap();
    let mut opt = optimizer(OptimizerKind::Adam, model.store.trainable(), 0.0).unwrap();
    opt.step(&loss.backward().unwrap(), 1e-3).unwrap();
    assert_ne!(model.store.checksum("encoder").unwrap(), before);
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let model = MilModel::new(Some(&tiny_encoder()), 8, &tiny_aggregator(), 6, DType::F64).unwrap();
    randomize_head(&model, 12);
    let x = random(&[2, 1, 8, 8], 13);
    let loss = || binary_cross_entropy(&model.forward_patches(&x, 1, false).unwrap(), &[true]).unwrap();
    let grads = loss().backward().unwrap();
    let names = [
        "encoder.stem.conv.weight",
        "encoder.stage1.block0.main.conv.weight",
        "aggregator.layer0.qkv.weight",
    ];
    let h = 1e-5;
    for name in names {
        let var = model.store.var(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let g: Vec<f64> = grads.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
        for i in (0..base.len()).step_by((base.len() / 6).max(1)) {
            let at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            at(0.0);
            let scale = g[i].abs().max(fd.abs()).max(1e-4);
            assert!((g[i] - fd).abs() / scale < 1e-3, "{name}[{i}]: analytic {} vs numeric {fd}", g[i]);
        }
    }
}
