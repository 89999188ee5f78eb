use biometry_nets::{
    build_femur_unet, build_shared_unet, build_single_unet, count_parameters, Adam, AdamConfig, Branch, Checkpoint,
    NetConfig, NetError, Tensor, UNet, MAGIC,
};
use proptest::prelude::*;

fn cfg(base: usize) -> NetConfig {
    NetConfig {
        base_width: base,
        ..NetConfig::default()
    }
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

/// conv3x3 + affine InstanceNorm
fn cna(cin: usize, cout: usize) -> usize {
    conv(cin, cout, 3) + 2 * cout
}

fn oracle_encoder(b: usize) -> usize {
    let w: Vec<usize> = (0..5).map(|l| b << l).collect();
    let mut n = cna(1, w[0]) + cna(w[0], w[0]);
    for l in 1..5 {
        n += cna(w[l - 1], w[l]) + cna(w[l], w[l]);
    }
    n
}

fn oracle_decoder(b: usize, out: usize) -> usize {
    let w: Vec<usize> = (0..5).map(|l| b << l).collect();
    let mut n = 0;
    for l in 1..5 {
        n += w[l] * w[l] * 4 + w[l];
        n += cna(w[l] + w[l - 1], w[l - 1]) + cna(w[l - 1], w[l - 1]);
    }
    n + conv(w[0], out, 1)
}

#[test]
fn parameter_counts_match_layer_arithmetic() {
    for b in [8, 16, 32] {
        let shared = build_shared_unet(&cfg(b)).unwrap();
        let single = build_single_unet(&cfg(b)).unwrap();
        let femur = build_femur_unet(&cfg(b)).unwrap();
        assert_eq!(count_parameters(&shared), oracle_encoder(b) + 2 * oracle_decoder(b, 2));
        assert_eq!(count_parameters(&single), oracle_encoder(b) + oracle_decoder(b, 2));
        assert_eq!(count_parameters(&femur), oracle_encoder(b) + oracle_decoder(b, 1));
        assert!(count_parameters(&femur) < count_parameters(&shared));
    }
}

#[test]
fn sharing_the_encoder_saves_about_a_quarter() {
    for b in [8, 16, 32, 64] {
        let shared = count_parameters(&build_shared_unet(&cfg(b)).unwrap()) as f64;
        let single = count_parameters(&build_single_unet(&cfg(b)).unwrap()) as f64;
        let ratio = shared / (2.0 * single);
        assert!((0.70..=0.80).contains(&ratio), "base {b}: ratio {ratio}");
    }
}

#[test]
fn output_shapes_at_full_resolution() {
    let c = cfg(8);
    let x = Tensor::<f32>::zeros(1, 256, 256);
    let outs = build_shared_unet(&c).unwrap().forward_all(&x).unwrap();
    assert_eq!(outs.len(), 2);
    for o in &outs {
        assert_eq!(o.shape(), (2, 256, 256));
    }
    let f = build_femur_unet(&c).unwrap().forward_all(&x).unwrap();
    assert_eq!(f.len(), 1);
    assert_eq!(f[0].shape(), (1, 256, 256));
}

#[test]
fn zeroed_heads_give_zero_logits() {
    let mut m = build_shared_unet(&cfg(8)).unwrap();
    m.zero_heads();
    let x = Tensor::from_vec(1, 32, 32, (0..1024).map(|i| (i as f32 * 0.37).sin()).collect());
    for o in m.forward_all(&x).unwrap() {
        assert!(o.data.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn initialisation_is_seed_deterministic() {
    let a = build_shared_unet(&cfg(8)).unwrap();
    let b = build_shared_unet(&cfg(8)).unwrap();
    assert_eq!(a.params, b.params);
    let c = build_shared_unet(&NetConfig { seed: 1, ..cfg(8) }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn branch_routing_table() {
    let shared = build_shared_unet(&cfg(8)).unwrap();
    assert_eq!(shared.branch_decoder(Branch::Head).unwrap(), 0);
    assert_eq!(shared.branch_decoder(Branch::Abdomen).unwrap(), 1);
    let single = build_single_unet(&cfg(8)).unwrap();
    assert!(matches!(single.branch_decoder(Branch::Head), Err(NetError::BranchUnavailable { .. })));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub").join("m.ckpt");
    let model = build_shared_unet(&cfg(8)).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    adam.step = 7;
    adam.m[3][0] = 0.25;
    let ck = Checkpoint::capture(&model, Some(&adam), 12, "val_dice", 0.875, serde_json::json!({"lr": 1e-3}));
    ck.save(&path).unwrap();
    let text = std::fs::read(&path).unwrap();
    assert!(text.starts_with(MAGIC.as_bytes()));

    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.header, ck.header);
    assert_eq!(back.params, model.params);
    assert_eq!(back.adam.as_ref().unwrap(), &adam);
    let rebuilt = back.model().unwrap();
    let x = Tensor::from_vec(1, 16, 16, (0..256).map(|i| i as f32 / 256.0).collect());
    assert_eq!(rebuilt.forward(&x, 1).unwrap(), model.forward(&x, 1).unwrap());
    assert!(back.header.census.iter().any(|l| l.starts_with("enc.stem")));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = build_femur_unet(&cfg(8)).unwrap();
    Checkpoint::capture(&model, None, 1, "val_loss", 0.1, serde_json::Value::Null)
        .save(&path)
        .unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(NetError::Checkpoint { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_matches_input_side(hm in 1usize..4, wm in 1usize..4) {
        let m: UNet<f32> = build_femur_unet(&cfg(8)).unwrap();
        let x = Tensor::zeros(1, 16 * hm, 16 * wm);
        let y = m.forward(&x, 0).unwrap();
        prop_assert_eq!(y.shape(), (1, 16 * hm, 16 * wm));
    }

    #[test]
    fn indivisible_sides_are_errors(h in 1usize..80, w in 1usize..80) {
        prop_assume!(h % 16 != 0 || w % 16 != 0);
        let m: UNet<f32> = build_femur_unet(&cfg(8)).unwrap();
        let is_shape_error = matches!(m.forward(&Tensor::zeros(1, h, w), 0), Err(NetError::InputShape { .. }));
        prop_assert!(is_shape_error);
    }
}
