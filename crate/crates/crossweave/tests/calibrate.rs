//! Scratch calibration harness (not part of the suite): run with
//! `cargo test --test calibrate -- --ignored --nocapture`.

use std::time::Duration;

use crossweave::cnn::{NetworkSpec, TrainConfig};
use crossweave::data::{synthetic_digits, Dataset};
use crossweave::sharing::PartyId;
use crossweave::train::{
    train_collaborative, train_solo, CollabOptions, DomainData, PreprocPlan, RunOutcome,
};
use crossweave::transfer::DegreeMatrix;

fn domains(n: usize) -> Vec<DomainData> {
    let corpus = synthetic_digits(5000, 0xda7a);
    let test = synthetic_digits(1000, 0x7e57);
    corpus
        .split_domains(n, 1000)
        .unwrap()
        .into_iter()
        .map(|train| DomainData {
            train,
            test: test.clone(),
        })
        .collect()
}

#[test]
#[ignore]
fn calibrate_variants() {
    let net = NetworkSpec::network_i();
    let cfg = TrainConfig {
        epochs: 10,
        seed: 42,
        ..TrainConfig::default()
    };

    for per in [1000usize, 2000] {
        let corpus = synthetic_digits(5000, 0xda7a);
        let test = synthetic_digits(1000, 0x7e57);
        let data = DomainData {
            train: corpus.split_domains(1, per).unwrap().pop().unwrap(),
            test,
        };
        let solo = train_solo(&net, &data, &cfg, PartyId::new(1), true).unwrap();
        let accs: Vec<String> = solo
            .records
            .iter()
            .map(|r| format!("{:.3}", r.test_accuracy))
            .collect();
        println!("solo {per:>5}     : {}", accs.join(" "));
    }

    for (name, theta_t, warmup, mixg) in [
        ("collab base    ", 0.1, 0usize, true),
        ("collab warm2   ", 0.1, 2, true),
        ("collab nogradm ", 0.1, 0, false),
        ("collab w2+nogm ", 0.1, 2, false),
        ("collab t3 w2   ", 0.3, 2, true),
    ] {
        let theta = DegreeMatrix::uniform_transfer(2, theta_t).unwrap();
        let opts = CollabOptions {
            fixed_clock: true,
            timeout: Duration::from_secs(120),
            warmup_epochs: warmup,
            mix_gradients: mixg,
            ..CollabOptions::new(net.clone(), theta, cfg)
        };
        match train_collaborative(domains(2), &opts, PreprocPlan::Inline { seed: 4207 }).unwrap() {
            RunOutcome::Completed {
                records, models, ..
            } => {
                let d1: Vec<String> = records
                    .iter()
                    .filter(|r| r.domain == 1)
                    .map(|r| format!("{:.3}", r.test_accuracy))
                    .collect();
                let test = synthetic_digits(1000, 0x7e57);
                let solo_eval = crossweave::cnn::evaluate(
                    &net,
                    &models[0],
                    &test.images,
                    &test.labels,
                )
                .unwrap();
                println!("{name}   : {} | solo-eval {:.3}", d1.join(" "), solo_eval);
            }
            other => panic!("{other:?}"),
        }
    }
}
