use dssfn::checkpoint::{read_network, write_network};
use dssfn::data::{synthetic_blobs, BlobSpec, LabeledDataset, Normalization, NormalizationStats};
use dssfn::model::SsfnDims;
use dssfn::network::ConsensusMode;
use dssfn::trainer::{
    evaluate, partition_dataset, train_centralized, train_decentralized, ConsensusSetting,
    TrainConfig,
};

fn split(
    separation: f64,
    train: usize,
    test: usize,
    seed: u64,
) -> (LabeledDataset, LabeledDataset) {
    let all = synthetic_blobs(&BlobSpec {
        input_dim: 5,
        classes: 3,
        samples: train + test,
        separation,
        seed,
    })
    .unwrap();
    let idx: Vec<usize> = (0..all.len()).collect();
    let (a, b) = (all.select(&idx[..train]), all.select(&idx[train..]));
    let stats = NormalizationStats::fit(Normalization::ZScorePerDim, a.features());
    (
        stats.apply_dataset(&a).unwrap(),
        stats.apply_dataset(&b).unwrap(),
    )
}

fn config(workers: usize, layers: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(SsfnDims::with_extra_neurons(5, 3, 20, layers).unwrap());
    cfg.workers = workers;
    cfg
}

#[test]
fn well_separated_blobs_are_learned() {
    let (train, _) = split(10.0, 300, 0, 1);
    let net = train_centralized(&config(1, 3), &train).unwrap().network;
    let acc = evaluate(&net, &train).unwrap().accuracy;
    assert!(acc >= 99.0, "train accuracy {acc}");
}

#[test]
fn overlapping_blobs_test_at_chance() {
    let (train, test) = split(0.0, 300, 3000, 2);
    let net = train_centralized(&config(1, 3), &train).unwrap().network;
    let acc = evaluate(&net, &test).unwrap().accuracy;
    assert!((acc - 100.0 / 3.0).abs() <= 5.0, "test accuracy {acc}");
}

#[test]
fn decentralized_accuracy_tracks_centralized() {
    let (train, test) = split(3.0, 400, 400, 3);
    let mut cfg = config(4, 3);
    cfg.admm_iterations = 300;
    let cen = train_centralized(&cfg, &train).unwrap();
    let shards = partition_dataset(&train, 4, cfg.seed).unwrap();
    let dec = train_decentralized(&cfg, &shards).unwrap();
    let a = evaluate(&cen.network, &test).unwrap().accuracy;
    let b = evaluate(&dec.network, &test).unwrap().accuracy;
    assert!((a - b).abs() <= 1.0, "centralized {a}% decentralized {b}%");
}

#[test]
fn exact_consensus_workers_serialize_identically() {
    let (train, _) = split(3.0, 200, 0, 4);
    let cfg = config(5, 2);
    let shards = partition_dataset(&train, 5, 0).unwrap();
    let out = train_decentralized(&cfg, &shards).unwrap();
    let bytes: Vec<Vec<u8>> = (0..5)
        .map(|m| {
            let mut buf = Vec::new();
            write_network(&out.worker_network(m).unwrap(), &mut buf).unwrap();
            buf
        })
        .collect();
    assert!(bytes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn gossip_workers_agree_within_tolerance() {
    let (train, _) = split(3.0, 200, 0, 5);
    let mut cfg = config(6, 2);
    cfg.topology = dssfn::trainer::TopologySpec::Circular { degree: 1 };
    cfg.consensus = ConsensusSetting::Gossip(ConsensusMode::Tolerance {
        tau: 1e-10,
        round_cap: 100_000,
    });
    let shards = partition_dataset(&train, 6, 0).unwrap();
    let out = train_decentralized(&cfg, &shards).unwrap();
    for l in 0..=2 {
        for m in 1..6 {
            let gap = (&out.worker_solutions[m][l] - &out.worker_solutions[0][l]).norm();
            assert!(gap <= 2e-10, "layer {l} worker {m}: {gap}");
        }
    }
}

#[test]
fn training_is_deterministic() {
    let (train, _) = split(3.0, 120, 0, 6);
    let cfg = config(3, 2);
    let shards = partition_dataset(&train, 3, 9).unwrap();
    let a = train_decentralized(&cfg, &shards).unwrap();
    let b = train_decentralized(&cfg, &shards).unwrap();
    assert_eq!(a.worker_solutions, b.worker_solutions);
}

#[test]
fn trained_network_checkpoint_round_trip() {
    let (train, test) = split(3.0, 150, 50, 7);
    let net = train_centralized(&config(1, 2), &train).unwrap().network;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.txt");
    dssfn::checkpoint::save_network(&net, &path).unwrap();
    let back = dssfn::checkpoint::load_network(&path).unwrap();
    assert_eq!(back, net);
    let mut buf = Vec::new();
    write_network(&back, &mut buf).unwrap();
    assert_eq!(read_network(buf.as_slice()).unwrap(), net);
    assert_eq!(
        back.predict(test.features()).unwrap().labels,
        net.predict(test.features()).unwrap().labels
    );
}
