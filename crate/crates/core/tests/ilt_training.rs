//! Interleaved-training behavior on small synthetic tasks: schedule
//! windows gate updates exactly, upstream layers never feel downstream
//! ones, runs are reproducible, and evaluation follows its contract.

use cfse::data::{Dataset, Split};
use cfse::ilt::{
    discover_schedule, evaluate, run_interleaved_training, EvalHead, HeadSelection, ILTSchedule,
    PlateauCfg, TrainOpts,
};
use cfse::network::{build_network, LayerSpec, LossKind, Network, NetworkConfig};
use cfse::predictor::SoftmaxHead;
use cfse::tensor::FeatureTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-class synthetic task: class 1 images are bright on the left half,
/// class 2 on the right, plus seeded noise. Labels alternate.
fn two_class_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = FeatureTensor::zeros(n, 1, 6, 6);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2 + 1;
        for h in 0..6 {
            for w in 0..6 {
                let bright = if class == 1 { w < 3 } else { w >= 3 };
                let base = if bright { 1.0 } else { -1.0 };
                let noise: f32 = rng.gen_range(-0.2..0.2);
                images.set(i, 0, h, w, base + noise);
            }
        }
        labels.push(class);
    }
    Dataset { images, labels, split: Split::Train, name: "two-class".into() }
}

/// Balanced J-class dataset of arbitrary (non-learnable) content.
fn balanced_dataset(n: usize, j: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = FeatureTensor::random_uniform(n, 1, 6, 6, -1.0, 1.0, &mut rng);
    let labels = (0..n).map(|i| i % j + 1).collect();
    Dataset { images, labels, split: Split::Test, name: "balanced".into() }
}

fn tiny_config(j: usize, channels: &[usize], grouped: &[bool]) -> NetworkConfig {
    let layers = channels
        .iter()
        .zip(grouped.iter())
        .map(|(&out_channels, &g)| LayerSpec {
            out_channels,
            grouped: g,
            kernel: 3,
            stride: 1,
            padding: 1,
            maxpool_after: false,
            loss: LossKind::CwC,
            theta: 2.0,
        })
        .collect();
    NetworkConfig { input_shape: (1, 6, 6), classes: j, layers, lr: 0.01 }
}

fn kernel_bits(net: &Network, layer: usize) -> Vec<u32> {
    net.layers[layer].weights.kernels.iter().map(|v| v.to_bits()).collect()
}

fn run(
    net: &mut Network,
    schedule: &ILTSchedule,
    train: &Dataset,
    test: Option<&Dataset>,
    seed: u64,
) -> cfse::Result<()> {
    let opts = TrainOpts {
        batch_size: 8,
        seed,
        heads: HeadSelection::softmax_only(),
        eval_every: 0,
    };
    run_interleaved_training(net, schedule, train, test, &opts, None).map(|_| ())
}

#[test]
fn empty_schedule_trains_nothing_and_leaves_the_network_untouched() {
    let cfg = tiny_config(2, &[4, 4], &[false, true]);
    let train = two_class_dataset(16, 0);
    let mut net = build_network(&cfg, 1).unwrap();
    let before: Vec<Vec<u32>> = (0..2).map(|i| kernel_bits(&net, i)).collect();
    let schedule = ILTSchedule::from_plateaus(&[0, 0], 0);
    let opts = TrainOpts { batch_size: 8, seed: 0, heads: HeadSelection::none(), eval_every: 0 };
    let outcome =
        run_interleaved_training(&mut net, &schedule, &train, None, &opts, None).unwrap();
    assert!(outcome.metrics.is_empty());
    for i in 0..2 {
        assert_eq!(kernel_bits(&net, i), before[i]);
        assert_eq!(net.layers[i].epochs_trained, 0);
    }
}

#[test]
fn layer_with_plateau_zero_never_updates_while_others_train() {
    let cfg = tiny_config(2, &[4, 4], &[false, true]);
    let train = two_class_dataset(16, 0);
    let mut net = build_network(&cfg, 1).unwrap();
    let l1_before = kernel_bits(&net, 0);
    let l2_before = kernel_bits(&net, 1);
    let schedule = ILTSchedule {
        start_ep: vec![0, 0],
        plateau_ep: vec![0, 2],
        max_epoch: 2,
        overlap: 0,
        fast_mode: false,
    };
    run(&mut net, &schedule, &train, None, 0).unwrap();
    assert_eq!(kernel_bits(&net, 0), l1_before, "layer 1 must stay untouched");
    assert_ne!(kernel_bits(&net, 1), l2_before, "layer 2 must train");
    assert_eq!(net.layers[0].epochs_trained, 0);
    assert_eq!(net.layers[1].epochs_trained, 2);
}

#[test]
fn weights_are_bit_stable_from_the_plateau_onward() {
    // Same seeds and data: a run to epoch 2 and a run to epoch 4 must agree
    // bitwise on layer 1 (plateau 2), while layer 2 keeps moving.
    let cfg = tiny_config(2, &[4, 4], &[false, true]);
    let train = two_class_dataset(16, 0);

    let mut short = build_network(&cfg, 1).unwrap();
    let schedule_short = ILTSchedule::from_plateaus(&[2, 2], 2);
    run(&mut short, &schedule_short, &train, None, 7).unwrap();

    let mut long = build_network(&cfg, 1).unwrap();
    let schedule_long = ILTSchedule::from_plateaus(&[2, 4], 4);
    run(&mut long, &schedule_long, &train, None, 7).unwrap();

    assert_eq!(
        kernel_bits(&short, 0),
        kernel_bits(&long, 0),
        "layer 1 received updates after its plateau"
    );
    assert_ne!(kernel_bits(&short, 1), kernel_bits(&long, 1));
    assert!(long.layers[0].frozen);
    assert_eq!(long.layers[0].epochs_trained, 2);
    assert_eq!(long.layers[1].epochs_trained, 4);
}

#[test]
fn epochs_after_every_plateau_change_no_backbone_weights() {
    let cfg = tiny_config(2, &[4, 4], &[false, true]);
    let train = two_class_dataset(16, 0);

    let mut exact = build_network(&cfg, 1).unwrap();
    run(&mut exact, &ILTSchedule::from_plateaus(&[2, 3], 3), &train, None, 7).unwrap();

    let mut extra = build_network(&cfg, 1).unwrap();
    run(&mut extra, &ILTSchedule::from_plateaus(&[2, 3], 5), &train, None, 7).unwrap();

    for i in 0..2 {
        assert_eq!(kernel_bits(&exact, i), kernel_bits(&extra, i));
        let sb: Vec<u32> =
            exact.layers[i].bn.running_mean.iter().map(|v| v.to_bits()).collect();
        let lb: Vec<u32> =
            extra.layers[i].bn.running_mean.iter().map(|v| v.to_bits()).collect();
        assert_eq!(sb, lb, "frozen layers must not update running statistics");
    }
}

#[test]
fn upstream_layers_never_feel_downstream_schedules() {
    // Layer 1 updates before layer 2 in every batch and no gradient crosses
    // layers, so changing layer 2's window cannot move layer 1's weights.
    let cfg = tiny_config(2, &[4, 4], &[false, true]);
    let train = two_class_dataset(16, 0);

    let mut early = build_network(&cfg, 1).unwrap();
    let s_early = ILTSchedule {
        start_ep: vec![0, 1],
        plateau_ep: vec![4, 4],
        max_epoch: 4,
        overlap: 0,
        fast_mode: false,
    };
    run(&mut early, &s_early, &train, None, 3).unwrap();

    let mut late = build_network(&cfg, 1).unwrap();
    let s_late = ILTSchedule {
        start_ep: vec![0, 3],
        plateau_ep: vec![4, 4],
        max_epoch: 4,
        overlap: 0,
        fast_mode: false,
    };
    run(&mut late, &s_late, &train, None, 3).unwrap();

    assert_eq!(kernel_bits(&early, 0), kernel_bits(&late, 0));
    assert_ne!(kernel_bits(&early, 1), kernel_bits(&late, 1));
}

#[test]
fn identical_seeds_reproduce_weights_and_metrics() {
    let cfg = tiny_config(2, &[4, 4], &[false, true]);
    let train = two_class_dataset(24, 5);
    let test = balanced_dataset(8, 2, 6);
    let opts = TrainOpts { batch_size: 8, seed: 11, heads: HeadSelection::all(), eval_every: 1 };
    let schedule = ILTSchedule::from_plateaus(&[3, 3], 3);

    let mut a = build_network(&cfg, 2).unwrap();
    let out_a =
        run_interleaved_training(&mut a, &schedule, &train, Some(&test), &opts, None).unwrap();
    let mut b = build_network(&cfg, 2).unwrap();
    let out_b =
        run_interleaved_training(&mut b, &schedule, &train, Some(&test), &opts, None).unwrap();

    for i in 0..2 {
        assert_eq!(kernel_bits(&a, i), kernel_bits(&b, i));
    }
    for (ma, mb) in out_a.metrics.iter().zip(out_b.metrics.iter()) {
        assert_eq!(ma.layer_loss, mb.layer_loss);
        assert_eq!(ma.layer_acc, mb.layer_acc);
        assert_eq!(ma.sf_test_err, mb.sf_test_err);
        assert_eq!(ma.gd_test_err, mb.gd_test_err);
        assert_eq!(ma.ga_test_err, mb.ga_test_err);
    }
}

#[test]
fn csv_stream_has_one_row_per_epoch_and_layer() {
    let cfg = tiny_config(2, &[4, 4], &[false, true]);
    let train = two_class_dataset(16, 0);
    let test = balanced_dataset(8, 2, 1);
    let opts = TrainOpts { batch_size: 8, seed: 0, heads: HeadSelection::softmax_only(), eval_every: 1 };
    let schedule = ILTSchedule::from_plateaus(&[2, 2], 2);
    let mut net = build_network(&cfg, 0).unwrap();
    let mut csv = Vec::new();
    run_interleaved_training(
        &mut net,
        &schedule,
        &train,
        Some(&test),
        &opts,
        Some(&mut csv),
    )
    .unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "epoch, layer_id, train_loss, layer_goodness_acc, sf_test_err, gd_test_err, ga_test_err, seconds"
    );
    assert_eq!(lines.len(), 1 + 2 * 2, "header plus epochs x layers rows");
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(", ").collect();
        assert_eq!(fields.len(), 8);
        fields[0].parse::<u32>().unwrap();
        fields[1].parse::<u32>().unwrap();
        fields[2].parse::<f64>().unwrap();
        fields[3].parse::<f64>().unwrap();
        // Softmax-only run: gd column is nan, ga is numeric.
        assert_eq!(fields[5], "nan");
        fields[6].parse::<f64>().unwrap();
        fields[7].parse::<f64>().unwrap();
    }
}

#[test]
fn always_class_1_head_scores_90_percent_error_on_balanced_split() {
    // Zero-initialized softmax head ties every logit and predicts class 1.
    let cfg = tiny_config(10, &[20], &[false]);
    let net = build_network(&cfg, 0).unwrap();
    let test = balanced_dataset(20, 10, 3);
    let head = SoftmaxHead::<f32>::new(cfg.final_feature_len().unwrap(), 10, 0.01);
    let err = evaluate(&net, &EvalHead::Softmax(&head), &test, 8).unwrap();
    assert_eq!(err, 90.0);
}

#[test]
fn memorizing_head_reaches_zero_error_on_its_training_subset() {
    let cfg = tiny_config(2, &[4], &[false]);
    let net = build_network(&cfg, 4).unwrap();
    let subset = two_class_dataset(8, 9);
    let d = cfg.final_feature_len().unwrap();
    let mut head = SoftmaxHead::<f32>::new(d, 2, 0.01);
    let (images, targets) = subset.slice_batch(0, 8).unwrap();
    let features = net.forward_to_layer(&images, 1, false).unwrap();
    for _ in 0..400 {
        head.train_step(&features.data, d, &targets).unwrap();
    }
    let err = evaluate(&net, &EvalHead::Softmax(&head), &subset, 4).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn evaluation_is_deterministic_on_frozen_weights() {
    let cfg = tiny_config(2, &[4, 4], &[false, true]);
    let train = two_class_dataset(16, 0);
    let test = balanced_dataset(10, 2, 2);
    let mut net = build_network(&cfg, 1).unwrap();
    run(&mut net, &ILTSchedule::from_plateaus(&[2, 2], 2), &train, None, 0).unwrap();
    let a = evaluate(&net, &EvalHead::GlobalAvg, &test, 3).unwrap();
    let b = evaluate(&net, &EvalHead::GlobalAvg, &test, 3).unwrap();
    assert_eq!(a, b);
    assert!(evaluate(
        &net,
        &EvalHead::GlobalAvg,
        &Dataset {
            images: FeatureTensor::zeros(1, 1, 6, 6),
            labels: vec![1],
            split: Split::Test,
            name: "empty-ish".into()
        }
        .take(1)
        .unwrap(),
        3
    )
    .is_ok());
}

#[test]
fn non_finite_input_aborts_with_layer_and_epoch() {
    let cfg = tiny_config(2, &[4], &[false]);
    let mut train = two_class_dataset(8, 0);
    train.images.data[5] = f32::NAN;
    let mut net = build_network(&cfg, 0).unwrap();
    let err = run(&mut net, &ILTSchedule::from_plateaus(&[2], 2), &train, None, 0).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, cfse::Error::Numerical(_)), "{msg}");
    assert!(msg.contains("layer 1") && msg.contains("epoch 1"), "{msg}");
}

#[test]
fn discovery_applies_the_fast_start_rule_for_each_overlap() {
    let cfg = tiny_config(2, &[4, 4], &[false, true]);
    let train = two_class_dataset(24, 8);
    let opts = TrainOpts { batch_size: 8, seed: 1, heads: HeadSelection::none(), eval_every: 0 };
    // A permissive detector plateaus quickly on this easy task.
    let plateau = PlateauCfg { window: 2, min_delta: 0.5 };
    for overlap in [0u32, 2, 5] {
        let (schedule, _warnings) =
            discover_schedule(&cfg, &train, &opts, plateau, 8, true, overlap).unwrap();
        assert!(schedule.fast_mode);
        assert_eq!(schedule.overlap, overlap);
        assert_eq!(
            schedule.start_ep[1],
            schedule.plateau_ep[0].saturating_sub(overlap),
            "fast rule violated for overlap {overlap}: {schedule:?}"
        );
        schedule.validate(2).unwrap();
        assert!(schedule.plateau_ep.iter().all(|&p| p <= 8));
    }
}

#[test]
fn discovery_without_plateau_falls_back_to_max_epoch_with_warning() {
    let cfg = tiny_config(2, &[4], &[false]);
    let train = two_class_dataset(16, 0);
    let opts = TrainOpts { batch_size: 8, seed: 0, heads: HeadSelection::none(), eval_every: 0 };
    // min_delta 0 fires only when an epoch fails to set a new best loss;
    // three epochs of fresh training on this easy task always improve.
    let plateau = PlateauCfg { window: 1, min_delta: 0.0 };
    let (schedule, warnings) =
        discover_schedule(&cfg, &train, &opts, plateau, 3, false, 0).unwrap();
    assert_eq!(schedule.plateau_ep, vec![3]);
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("layer 1"), "{warnings:?}");
}

#[test]
fn training_actually_learns_the_separable_task() {
    // End-to-end sanity: two epochs on the easy task pushes the layer's own
    // goodness accuracy well above chance and the softmax head follows.
    let cfg = tiny_config(2, &[4, 4], &[false, true]);
    let train = two_class_dataset(64, 12);
    let test = two_class_dataset(32, 99);
    let opts = TrainOpts { batch_size: 8, seed: 2, heads: HeadSelection::softmax_only(), eval_every: 0 };
    let schedule = ILTSchedule::from_plateaus(&[6, 6], 6);
    let mut net = build_network(&cfg, 3).unwrap();
    let outcome =
        run_interleaved_training(&mut net, &schedule, &train, Some(&test), &opts, None).unwrap();
    let last = outcome.metrics.last().unwrap();
    assert!(
        last.layer_acc[0] > 90.0,
        "layer 1 goodness accuracy {:?}",
        last.layer_acc
    );
    assert!(last.sf_test_err < 10.0, "softmax test error {}", last.sf_test_err);
    let first = &outcome.metrics[0];
    assert!(
        last.layer_loss[0] < first.layer_loss[0],
        "layer-1 loss should fall: {} -> {}",
        first.layer_loss[0],
        last.layer_loss[0]
    );
}
