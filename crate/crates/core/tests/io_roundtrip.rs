mod common;

use proptest::prelude::*;

use shiftconv::data::{
    load_dataset, read_pfm, read_pnm, write_dataset, write_pfm, write_pnm, SynthConfig,
};
use shiftconv::train::{synth_samples, Adam, Checkpoint, DataSource, TrainConfig, Trainer};
use shiftconv::{NetworkConfig, ParamStore, Shape, Tensor};

fn tiny_cfg() -> TrainConfig {
    let synth = SynthConfig {
        width: 64,
        height: 64,
        channels: 1,
        num_shapes: 2,
        disp_min: 1,
        disp_max: 4,
        background_disp: 1,
        seed: 3,
    };
    TrainConfig {
        net: NetworkConfig::tiny(),
        base_lr: 1e-3,
        stage1_iters: 4,
        stage2_iters: 2,
        data: DataSource::Synth { cfg: synth, count: 3 },
        ..TrainConfig::default()
    }
}

#[test]
fn pfm_save_load_save_is_bit_exact() {
    let mut vals: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin() * 100.0).collect();
    vals[3] = f32::INFINITY;
    vals[7] = f32::NAN;
    vals[9] = -0.0;
    for c in [1, 3] {
        let t = Tensor::from_vec(Shape::new(1, c, 2, 12 / c), vals[..2 * 12].to_vec()).unwrap();
        let bytes = write_pfm(&t).unwrap();
        let back = read_pfm(&bytes).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
        assert_eq!(write_pfm(&back).unwrap(), bytes);
    }
}

#[test]
fn big_endian_pfm_reads_the_same_values() {
    let vals = [1.5f32, -2.25, 3.0, 0.125];
    let mut be = b"Pf\n2 2\n1.0\n".to_vec();
    // rows are stored bottom-up
    for row in [[3.0f32, 0.125], [1.5, -2.25]] {
        for v in row {
            be.extend_from_slice(&v.to_be_bytes());
        }
    }
    assert_eq!(read_pfm(&be).unwrap().data(), &vals);
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_samples(&SynthConfig::default(), 2).unwrap();
    write_dataset(dir.path(), &samples).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, samples);
    // images are 8-bit quantised, so a PNM re-encode is also exact
    assert_eq!(read_pnm(&write_pnm(&samples[0].left, 255).unwrap()).unwrap(), samples[0].left);
}

#[test]
fn checkpoint_save_load_save_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny_cfg()).unwrap();
    let samples = shiftconv::train::load_samples(&t.cfg.data).unwrap();
    t.step(1, &samples).unwrap();
    let ckpt = t.checkpoint().unwrap();
    let p = dir.path().join("a.ckpt");
    ckpt.save(&p).unwrap();
    let loaded = Checkpoint::load(&p).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_bytes(), std::fs::read(&p).unwrap());
}

#[test]
fn truncated_checkpoint_names_the_incomplete_tensor() {
    let ckpt = Trainer::new(tiny_cfg()).unwrap().checkpoint().unwrap();
    let bytes = ckpt.to_bytes();
    let err = Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err().to_string();
    assert!(err.contains("record `"), "{err}");
}

#[test]
fn checkpoint_for_other_config_is_rejected_with_names() {
    let ckpt = Trainer::new(tiny_cfg()).unwrap().checkpoint().unwrap();
    let mut other = tiny_cfg();
    other.net.feat_channels = [3, 2, 2, 2];
    let err = Trainer::from_checkpoint(other, &ckpt).unwrap_err().to_string();
    assert!(err.contains("does not match"), "{err}");

    let mut broken = ckpt.clone();
    broken.tensors.insert("feat.conv1.w".into(), Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let err = broken.params().unwrap_err().to_string();
    assert!(err.contains("feat.conv1.w"), "{err}");
}

#[test]
fn resumed_training_matches_straight_run() {
    let cfg = tiny_cfg();
    let samples = shiftconv::train::load_samples(&cfg.data).unwrap();

    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let mut log_a = straight.run_stage(1, &samples, |_| {}, |_| Ok(())).unwrap();
    log_a.extend(straight.run_stage(2, &samples, |_| {}, |_| Ok(())).unwrap());

    let mut first = Trainer::new(cfg.clone()).unwrap();
    let mut log_b = Vec::new();
    for _ in 0..3 {
        log_b.push(first.step(1, &samples).unwrap());
    }
    let bytes = first.checkpoint().unwrap().to_bytes();
    drop(first);
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::from_checkpoint(cfg, &ckpt).unwrap();
    log_b.extend(resumed.run_stage(1, &samples, |_| {}, |_| Ok(())).unwrap());
    log_b.extend(resumed.run_stage(2, &samples, |_| {}, |_| Ok(())).unwrap());

    assert_eq!(log_a, log_b);
    assert_eq!(straight.net.params, resumed.net.params);
    assert_eq!(straight.adam, resumed.adam);
}

#[test]
fn adam_first_step_is_lr_sized() {
    // m_hat = g and v_hat = g^2 after one step, so the move is lr * g / (|g| + eps)
    let mut p = ParamStore::new();
    p.insert("x.w", Tensor::scalar(1.0f32));
    let grads = [("x.w".to_string(), vec![1.0f32])].into_iter().collect();
    let mut adam = Adam::new();
    adam.step(&mut p, &grads, 0.1).unwrap();
    let want = (1.0f64 - 0.1 / (1.0 + 1e-8)) as f32;
    assert_eq!(p.get("x.w").unwrap().data()[0], want);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pfm_round_trip_arbitrary_bits(bits in proptest::collection::vec(any::<u32>(), 6)) {
        let vals: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 3), vals).unwrap();
        let back = read_pfm(&write_pfm(&t).unwrap()).unwrap();
        let got: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, bits);
    }
}
