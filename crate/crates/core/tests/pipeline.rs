use plainmatte::backbone::AttentionMode;
use plainmatte::config::ModelConfig;
use plainmatte::data::io::{load_input, save_gray_png};
use plainmatte::data::synth::write_synthetic_dataset;
use plainmatte::data::{ingest_dataset, trimap_with_kernels, AugmentConfig};
use plainmatte::inference::{infer, InferenceRequest};
use plainmatte::metrics::RegionMode;
use plainmatte::model::Model;
use plainmatte::trainer::{evaluate_model, LabeledInput, LrSchedule, TrainOptions, Trainer};

#[test]
fn dataset_to_checkpoint_to_inference() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_synthetic_dataset(&root, 2, 2, 40, 40, 5).unwrap();
    let ds = ingest_dataset(&root).unwrap();
    let samples: Vec<_> = ds.iter().collect::<Result<_, _>>().unwrap();
    assert_eq!(samples.len(), 4);

    let mut options = TrainOptions::tiny();
    options.run.crop_size = 32;
    options.run.batch_size = 2;
    options.run.epochs = 2;
    options.schedule = LrSchedule::Constant;
    options.augment = AugmentConfig { crop: 32, kernel_max: 4, ..AugmentConfig::default() };
    let mut trainer = Trainer::new(Model::init(ModelConfig::tiny(), 0).unwrap(), options).unwrap();
    let mut logs = Vec::new();
    trainer.fit(&samples, |l| logs.push(l.clone())).unwrap();
    assert_eq!(logs.len(), 2);
    assert_eq!(logs[1].step, 4);
    assert!(logs.iter().all(|l| l.loss.total.is_finite()));
    serde_json::to_string(&logs[0]).unwrap();

    let ckpt = dir.path().join("ckpt");
    trainer.save(&ckpt).unwrap();
    let (model, _, _) = Model::<f32>::load(&ckpt).unwrap();
    assert_eq!(model.params, trainer.model.params);

    // Write an image/trimap pair to disk and read it back as an input.
    let s = &samples[0];
    let tri = trimap_with_kernels(&s.alpha, 3, 3);
    let img_path = dir.path().join("img.png");
    let tri_path = dir.path().join("tri.png");
    plainmatte::data::io::save_rgb_png(&img_path, &s.composite().unwrap()).unwrap();
    save_gray_png(&tri_path, &tri).unwrap();
    let input = load_input(&img_path, &tri_path).unwrap();
    for strategy in [AttentionMode::Normal, AttentionMode::GridSample] {
        let alpha = infer(&model, &InferenceRequest { input: input.clone(), strategy }).unwrap();
        assert_eq!(alpha.dims(), (40, 40));
    }
    let set = vec![LabeledInput { input, alpha: s.alpha.clone() }];
    let r = evaluate_model(&model, &set, AttentionMode::Normal, RegionMode::WholeImage).unwrap();
    assert!(r.sad.is_finite() && r.pixels == 1600);
}
