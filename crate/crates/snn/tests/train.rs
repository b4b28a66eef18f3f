use aqflow_core::synth::{generate_events, Pattern, SceneSpec};
use aqflow_core::{Error, EventPartition, LossConfig, SensorSize};
use aqflow_snn::train::{buffer_gradient, train, training_partitions, Crop, TrainConfig};
use aqflow_snn::{Network, NetworkConfig};

fn dots_scene(size: u16, duration_ms: f64) -> SceneSpec {
    SceneSpec {
        pattern: Pattern::Dots { spacing: 6.0, radius: 1.5 },
        origin: [0.0, 0.0],
        velocity: [2.0, 1.2],
        contrast_threshold: 1.0,
        edge_width: 1.5,
        duration_ms,
        sensor: SensorSize::new(size, size),
        seed: 2,
        ..SceneSpec::default()
    }
}

fn toy_partitions(k: usize) -> Vec<EventPartition> {
    let cfg = TrainConfig { events_per_partition: k, ..TrainConfig::default() };
    training_partitions(&generate_events(&dots_scene(16, 100.0)).unwrap(), &cfg).unwrap()
}

#[test]
fn bptt_gradient_matches_finite_differences() {
    let mut net = Network::new(NetworkConfig::toy(), SensorSize::new(16, 16)).unwrap();
    let hb = net.param_names().iter().position(|n| n == "head.b").unwrap();
    net.params_mut()[hb].data = vec![1.3, 0.7, 0.2];
    let parts = &toy_partitions(100)[..3];
    let lc = LossConfig::default();
    let state = net.initial_state();
    let g = buffer_gradient(&net, &state, parts, &lc, true).unwrap();
    let eval = |n: &Network| buffer_gradient(n, &state, parts, &lc, true).unwrap().loss.total;
    let picks = [("head.b", 0), ("head.w", 1), ("a0.w", 4), ("b1.rec", 3), ("a1.zeta", 0), ("a0.v_th", 1), ("gru.wz", 2), ("att_a.gain", 0), ("b0.w", 7)];
    for (name, j) in picks {
        let i = net.param_names().iter().position(|n| n == name).unwrap();
        let h = 1e-6;
        let mut plus = net.clone();
        plus.params_mut()[i].data[j] += h;
        let mut minus = net.clone();
        minus.params_mut()[i].data[j] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let an = g.grads[i].data[j];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        assert!(rel < 1e-3, "{name}[{j}]: analytic {an} vs numeric {fd}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut net = Network::new(NetworkConfig::toy(), SensorSize::new(16, 16)).unwrap();
    let before = net.clone();
    let cfg = TrainConfig { events_per_partition: 100, learning_rate: 0.0, max_updates: Some(3), ..TrainConfig::default() };
    let rows = train(&mut net, &toy_partitions(100), &cfg, &LossConfig::default(), |_| {}).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(net, before);
}

#[test]
fn training_is_deterministic_and_descends() {
    let parts = toy_partitions(100);
    let cfg = TrainConfig { events_per_partition: 100, learning_rate: 3e-3, epochs: 20, max_updates: Some(60), ..TrainConfig::default() };
    let run = || {
        let mut net = Network::new(NetworkConfig::toy(), SensorSize::new(16, 16)).unwrap();
        let rows = train(&mut net, &parts, &cfg, &LossConfig::default(), |_| {}).unwrap();
        (net, rows)
    };
    let (net_a, rows_a) = run();
    let (net_b, rows_b) = run();
    assert_eq!(net_a, net_b);
    assert_eq!(rows_a, rows_b);
    let mean = |r: &[aqflow_snn::train::TrainLogRow]| r.iter().map(|r| r.total).sum::<f64>() / r.len() as f64;
    assert!(mean(&rows_a[50..]) < mean(&rows_a[..10]));
}

#[test]
fn each_update_sees_buffer_times_partition_events() {
    let parts = toy_partitions(1000);
    let cfg = TrainConfig { events_per_partition: 1000, buffer_len: 3, max_updates: Some(2), ..TrainConfig::default() };
    let mut net = Network::new(NetworkConfig::toy(), SensorSize::new(16, 16)).unwrap();
    for row in train(&mut net, &parts, &cfg, &LossConfig::default(), |_| {}).unwrap() {
        assert_eq!(row.events, 3000);
    }
}

#[test]
fn crop_is_applied_before_partitioning() {
    let stream = generate_events(&dots_scene(32, 20.0)).unwrap();
    let cfg = TrainConfig { events_per_partition: 100, crop: Some(Crop { x: 8, y: 8, width: 16, height: 16 }), ..TrainConfig::default() };
    let parts = training_partitions(&stream, &cfg).unwrap();
    assert!(!parts.is_empty());
    assert!(parts.iter().flat_map(|p| p.events()).all(|e| e.x < 16 && e.y < 16));
    let bad = TrainConfig { crop: Some(Crop { x: 20, y: 0, width: 16, height: 16 }), ..cfg };
    assert!(training_partitions(&stream, &bad).is_err());
}

#[test]
fn runaway_updates_stop_with_finite_parameters() {
    let mut net = Network::new(NetworkConfig::toy(), SensorSize::new(16, 16)).unwrap();
    let cfg = TrainConfig { events_per_partition: 100, learning_rate: 1e300, epochs: 10, max_updates: Some(20), ..TrainConfig::default() };
    let err = train(&mut net, &toy_partitions(100), &cfg, &LossConfig::default(), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err}");
    assert!(net.params().iter().all(|t| t.data.iter().all(|v| v.is_finite())));
}

#[test]
fn too_few_partitions_is_an_error() {
    let mut net = Network::new(NetworkConfig::toy(), SensorSize::new(16, 16)).unwrap();
    let parts = toy_partitions(100);
    assert!(train(&mut net, &parts[..5], &TrainConfig::default(), &LossConfig::default(), |_| {}).is_err());
}
