use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use pascl::dualnet::{read_checkpoint, write_checkpoint, Branch};
use pascl::synth::{generate_synthetic, read_examples_csv, write_examples_csv, ProfileSummary};
use pascl::twostage::{evaluate_all, run_experiment, ExperimentConfig, RunRecord};
use pascl::Network64;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_text(
        "classes = 5\nn_max = 60\nrho = 20\nn_ood_clusters = 5\nn_ood_train = 100\n\
         n_test_per_class = 10\nn_ood_test = 50\nn1 = 4\nn2 = 2\nwidth = 16\ndepth = 2",
    )
    .unwrap()
}

#[test]
fn dataset_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (profile, split) = generate_synthetic(&cfg.data).unwrap();
    for (name, rows) in [("train_in", &split.train_in), ("test_out", &split.test_out)] {
        let path = dir.path().join(format!("{name}.csv"));
        write_examples_csv(BufWriter::new(File::create(&path).unwrap()), rows, cfg.data.dim).unwrap();
        let back = read_examples_csv(BufReader::new(File::open(&path).unwrap())).unwrap();
        assert_eq!(&back, rows);
    }
    let summary = ProfileSummary::new(&profile, cfg.data.tail_fraction, cfg.data.rho);
    let text = serde_json::to_string(&summary).unwrap();
    let back: ProfileSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(back.to_profile().unwrap(), profile);
}

#[test]
fn checkpoint_file_reproduces_the_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (profile, split) = generate_synthetic(&cfg.data).unwrap();
    let run = run_experiment::<f64>(&cfg).unwrap();
    let path = dir.path().join("checkpoint.txt");
    let mut w = BufWriter::new(File::create(&path).unwrap());
    write_checkpoint(&run.net, &mut w).unwrap();
    w.flush().unwrap();
    drop(w);
    let net: Network64 = read_checkpoint(BufReader::new(File::open(&path).unwrap())).unwrap();
    assert_eq!(net, run.net);
    let evals = evaluate_all(&net, &split, &profile, cfg.train.seed, &cfg.hash()).unwrap();
    assert_eq!(evals, run.record.evaluations);

    let json = dir.path().join("record.json");
    std::fs::write(&json, run.record.to_json()).unwrap();
    let back = RunRecord::from_json(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(back, run.record);
}

#[test]
fn embeddings_reflect_the_branch() {
    let cfg = tiny();
    let (_, split) = generate_synthetic(&cfg.data).unwrap();
    let run = run_experiment::<f64>(&cfg).unwrap();
    let mut main = Vec::new();
    let mut aux = Vec::new();
    pascl::twostage::export_embeddings(&run.net, &split.test_in, Branch::Main, &mut main).unwrap();
    pascl::twostage::export_embeddings(&run.net, &split.test_in, Branch::Aux, &mut aux).unwrap();
    assert_ne!(main, aux);
    assert_eq!(String::from_utf8(main).unwrap().lines().count(), split.test_in.len() + 1);
}
