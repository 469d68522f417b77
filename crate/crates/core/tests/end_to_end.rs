use deepide::cnn::{AdamConfig, CnnArchitecture, CnnParams};
use deepide::enkf::{init_ensemble, run_filter, TaperSpec};
use deepide::grid::{standardize, Field, FrameWindow, GridSpec};
use deepide::io::{decode_ensemble, encode_ensemble, Checkpoint, SequenceFile};
use deepide::kernel::{build_rbf_basis, default_bandwidth};
use deepide::likelihood::{noise_covariance, train_cnn, IdeModel, NoiseParams, SequenceDataset, TrainingConfig};
use deepide::sim::{sample_observations, simulate, SimConfig};

fn small_model(g: GridSpec) -> IdeModel {
    let params = CnnParams::init(CnnArchitecture::new(2, 8, vec![2, 3], 3, 4).unwrap(), 7).unwrap();
    IdeModel::new(params, build_rbf_basis(g, 4, default_bandwidth(4)).unwrap()).unwrap()
}

#[test]
fn simulate_store_train_reload_filter() {
    let g = GridSpec::new(8).unwrap();
    let mut dataset = SequenceDataset::default();
    let mut stored = Vec::new();
    for seed in 0..8 {
        let sim = simulate(&SimConfig { n: 8, t_len: 4, tau: 2, blob_sd: 0.15, seed, ..SimConfig::default() }).unwrap();
        let file = SequenceFile::with_standardization(sim.frames).unwrap();
        let back = SequenceFile::decode(&file.encode().unwrap()).unwrap();
        assert_eq!(back.frames, file.frames);
        let z = back.standardized().unwrap();
        dataset.push_frames(&z, 2, 0).unwrap();
        stored.push(z);
    }
    let config = TrainingConfig { max_epochs: 2, seed: 1, adam: AdamConfig { lr: 3e-4, ..AdamConfig::default() }, ..TrainingConfig::default() };
    let (model, log) = train_cnn(small_model(g), &dataset, &config).unwrap();
    assert_eq!(log.epochs.len(), 2);

    let ck = Checkpoint { model, training: config, noise: vec![NoiseParams::new(0.05, 0.2).unwrap()] };
    let ck = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
    let window = FrameWindow::new(stored[0][..2].to_vec()).unwrap();
    let theta = ck.model.pass(&window).unwrap().theta;
    assert!(theta.theta1.iter().all(|v| v.is_finite() && *v > 0.0));

    let test = simulate(&SimConfig { n: 8, t_len: 5, tau: 2, blob_sd: 0.15, seed: 99, ..SimConfig::default() }).unwrap();
    let z: Vec<Field> = test.frames.iter().map(|f| standardize(f).unwrap().0).collect();
    let obs = sample_observations(&z, 20, 0.01, 3).unwrap();
    let q = noise_covariance(g, ck.noise[0]).unwrap();
    let prior = init_ensemble(&vec![Field::zeros(g); 2], 2, 12, 1.0, &q, 0, 4).unwrap();
    let steps = run_filter(&prior, &obs, &ck.model, Some(&q), Some(TaperSpec::new(TaperSpec::DEFAULT_C).unwrap())).unwrap();
    assert_eq!(steps.len(), 5);
    let last = &steps[4].forecast;
    assert!(last.members.iter().all(|m| m.newest().values().iter().all(|v| v.is_finite())));
    assert_eq!(decode_ensemble(&encode_ensemble(last).unwrap()).unwrap().members.len(), 12);
}
