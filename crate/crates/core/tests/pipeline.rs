use candle_core::{DType, Device, Tensor};
use textdiff::data::{generate_synthetic, SegmentationSample};
use textdiff::diffusion::{build_linear_schedule, BlockRegistry, DiffusionConfig, NoisePredictor};
use textdiff::nn::ParamStore;
use textdiff::pipeline::{
    count_params, evaluate, run_variant, train_segmenter, Components, SegModel, TrainConfig, Variant,
};
use textdiff::probe::BlockSelection;
use textdiff::seg::PixelClassifier;
use textdiff::text::{HashedGaussianEncoder, TextEncoder};
use textdiff::Error;

fn tiny() -> DiffusionConfig {
    DiffusionConfig {
        image_size: [32, 32],
        base_width: 8,
        ..Default::default()
    }
}

fn tiny_cfg(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::new(variant, BlockSelection::new(vec![6, 12], vec![50, 250]).unwrap());
    cfg.epochs = 3;
    cfg.hidden = 16;
    cfg.fusion.d = 8;
    cfg.fusion.d_v = 4;
    cfg
}

#[test]
fn trainable_counts_match_hand_sums() {
    let dcfg = DiffusionConfig::default();
    let reg = BlockRegistry::for_config(&dcfg);
    let backbone = NoisePredictor::new(&dcfg).unwrap();
    let enc = HashedGaussianEncoder::new(64, 0).unwrap();
    let sel = BlockSelection::new(vec![6, 8, 12, 16], vec![50, 150, 250]).unwrap();
    let channels = [64, 64, 32, 32];
    for (z, c) in sel.blocks().iter().zip(channels) {
        assert_eq!(reg.get(*z).unwrap().channels, c);
    }
    let (d, d_v, d_text, hidden) = (64, 16, 64, 128);
    let mlp = |input: usize| input * hidden + hidden + hidden * 2 + 2;
    let visual = 3 * channels.iter().sum::<usize>();
    let attention: usize = channels.iter().map(|c| c * d + d_text * d + d_text * d_v).sum();

    let counts = |v: Variant| {
        let model = SegModel::new(&TrainConfig::new(v, sel.clone()), &reg, d_text).unwrap();
        count_params(&model, backbone.params(), &enc)
    };
    let full = counts(Variant::Full);
    assert_eq!(full.attention, attention);
    assert_eq!(full.classifier, mlp(visual + 12 * d_v));
    assert_eq!(full.trainable, attention + mlp(visual + 12 * d_v));
    assert_eq!(full.total, full.backbone + full.text_encoder + full.trainable);
    assert!((full.trainable as f64) / (full.total as f64) < 0.5);

    let z1 = counts(Variant::Zeta1);
    assert_eq!((z1.attention, z1.trainable), (0, mlp(visual)));
    let z2 = counts(Variant::Zeta2);
    assert_eq!((z2.attention, z2.trainable), (0, mlp(visual + d_text)));
    for c in [full, z1, z2] {
        assert!(c.trainable < c.total);
        assert_eq!(c.backbone, backbone.num_params());
        assert_eq!(c.text_encoder, enc.num_params());
    }
}

fn full_masks(n: usize) -> Vec<SegmentationSample> {
    generate_synthetic(n, (32, 32), 5)
        .unwrap()
        .samples
        .into_iter()
        .map(|mut s| {
            s.mask = Tensor::ones((32, 32), DType::F32, &Device::Cpu).unwrap();
            s
        })
        .collect()
}

/// A classifier that ignores its input and always emits `bias`.
fn constant_classifier(input_dim: usize, bias: [f32; 2]) -> PixelClassifier {
    let mut store = ParamStore::new(DType::F32);
    let zeros = |shape: &[usize]| Tensor::zeros(shape, DType::F32, &Device::Cpu).unwrap();
    store.insert("w1", zeros(&[input_dim, 4])).unwrap();
    store.insert("b1", zeros(&[4])).unwrap();
    store.insert("w2", zeros(&[4, 2])).unwrap();
    store.insert("b2", Tensor::new(&bias, &Device::Cpu).unwrap()).unwrap();
    PixelClassifier::from_store(store).unwrap()
}

#[test]
fn evaluate_perfect_and_empty_predictions() {
    let dcfg = tiny();
    let backbone = NoisePredictor::new(&dcfg).unwrap().frozen().unwrap();
    let sched = build_linear_schedule(&dcfg).unwrap();
    let enc = HashedGaussianEncoder::new(16, 0).unwrap();
    let comps = Components::new(&backbone, &sched, &enc);
    let test = full_masks(3);
    let cfg = tiny_cfg(Variant::Zeta1);
    let mut model = SegModel::new(&cfg, backbone.registry(), 16).unwrap();

    model.classifier = constant_classifier(model.input_dim(), [0.0, 1.0]);
    let perfect = evaluate(&test, &model, &cfg.selection, &comps).unwrap();
    assert_eq!((perfect.mean_dice, perfect.mean_iou), (100.0, 100.0));
    assert_eq!(perfect.rows.len(), 3);

    model.classifier = constant_classifier(model.input_dim(), [1.0, 0.0]);
    let empty = evaluate(&test, &model, &cfg.selection, &comps).unwrap();
    assert_eq!((empty.mean_dice, empty.mean_iou), (0.0, 0.0));

    let other = BlockSelection::new(vec![6, 12], vec![50]).unwrap();
    assert!(matches!(
        evaluate(&test, &model, &other, &comps),
        Err(Error::SelectionMismatch { .. })
    ));
}

#[test]
fn training_keeps_encoders_frozen_and_is_deterministic() {
    let dcfg = tiny();
    let backbone = NoisePredictor::new(&dcfg).unwrap().frozen().unwrap();
    let sched = build_linear_schedule(&dcfg).unwrap();
    let enc = HashedGaussianEncoder::new(16, 0).unwrap();
    let comps = Components::new(&backbone, &sched, &enc);
    let data = generate_synthetic(6, (32, 32), 2).unwrap().samples;
    let (train, test) = data.split_at(4);
    let before = (backbone.checksum().unwrap(), enc.checksum());
    for v in Variant::ALL {
        let cfg = tiny_cfg(v);
        let (model, rec) = train_segmenter(train, &cfg, &comps).unwrap();
        assert_eq!(rec.loss_trace.len(), 3);
        assert!(rec.loss_trace.iter().all(|l| l.is_finite()));
        assert_eq!((rec.backbone_checksum.clone(), rec.text_checksum.clone()), before);
        assert!(rec.routing.frozen_with_grad.is_empty());
        assert!(rec.routing.all_trainable_nonzero(), "{:?}", rec.routing);
        assert_eq!(model.attention.is_some(), v == Variant::Full);
        if v == Variant::Zeta1 {
            assert!(model.trainable().iter().all(|(n, _)| n.starts_with("clf.")));
        }

        let (_, a) = run_variant(v, train, test, &cfg, &comps).unwrap();
        let (_, b) = run_variant(v, train, test, &cfg, &comps).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.loss_trace, b.loss_trace);
    }
    assert_eq!((backbone.checksum().unwrap(), enc.checksum()), before);
}

#[test]
fn empty_training_set_rejected() {
    let dcfg = tiny();
    let backbone = NoisePredictor::new(&dcfg).unwrap().frozen().unwrap();
    let sched = build_linear_schedule(&dcfg).unwrap();
    let enc = HashedGaussianEncoder::new(16, 0).unwrap();
    let comps = Components::new(&backbone, &sched, &enc);
    assert!(matches!(
        train_segmenter(&[], &tiny_cfg(Variant::Full), &comps),
        Err(Error::EmptyDataset)
    ));
}
