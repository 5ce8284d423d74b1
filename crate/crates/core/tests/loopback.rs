use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::thread::{self, JoinHandle};

use fedpoc::aggregation::AlgorithmConfig;
use fedpoc::client::{run_client, ClientConfig};
use fedpoc::server::{run_experiment, FederationConfig, LossPolicy, ServerOptions, SiteSpec};
use fedpoc::simulator::{simulate, SimScenario, SimSettings};
use fedpoc::training::{HeterogeneityConfig, TrainerConfig, TrainerKind};
use fedpoc::{Error, Result};

const SITES: [&str; 3] = ["strasbourg", "basel", "mock"];

fn federation(rounds: u64, checkpoint: &Path) -> FederationConfig {
    FederationConfig {
        sites: SITES.iter().map(|s| SiteSpec { name: s.to_string(), expected: true }).collect(),
        rounds,
        algorithm: AlgorithmConfig::ditto(0.3),
        trainer: TrainerConfig::new(TrainerKind::LeastSquares, 0.1, 3, 17).unwrap(),
        heterogeneity: HeterogeneityConfig {
            base_optimum: vec![0.5, -1.0, 2.0, 0.0],
            shift_scale: 0.4,
            noise_std: 0.2,
            samples_per_site: 24,
            fraction: 1.0,
            site_fractions: Vec::new(),
        },
        on_client_loss: LossPolicy::Wait,
        min_clients_per_round: None,
        checkpoint_path: checkpoint.to_path_buf(),
        round_timeout_seconds: None,
    }
}

fn spawn_clients(fed: &FederationConfig, addr: SocketAddr) -> Vec<JoinHandle<Result<()>>> {
    SITES
        .iter()
        .map(|site| {
            let fed = fed.clone();
            let cfg = ClientConfig::for_site(&fed, site, addr.to_string()).unwrap();
            thread::spawn(move || run_client(&cfg, &fed))
        })
        .collect()
}

fn join_all(clients: Vec<JoinHandle<Result<()>>>) {
    for c in clients {
        c.join().unwrap().unwrap();
    }
}

#[test]
fn one_round_with_three_tcp_clients() {
    let dir = tempfile::tempdir().unwrap();
    let fed = federation(1, &dir.path().join("ckpt.json"));
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let clients = spawn_clients(&fed, listener.local_addr().unwrap());
    let report = run_experiment(fed, listener, ServerOptions::default()).unwrap();
    join_all(clients);
    assert!(report.is_complete());
    assert_eq!(report.rounds.len(), 1);
    let round = &report.rounds[0];
    assert_eq!(round.per_client.len(), 3);
    for c in round.per_client.values() {
        assert_eq!(c.elapsed_nanos + c.waiting_nanos, round.span_nanos);
    }
    assert_eq!(report.final_scores.len(), 3);
}

#[test]
fn killed_server_resumes_to_the_same_model() {
    let dir = tempfile::tempdir().unwrap();
    let fed = federation(5, &dir.path().join("ckpt.json"));
    let reference = simulate(&SimScenario::new(fed.clone(), SimSettings::new(1.0)).unwrap()).unwrap();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let clients = spawn_clients(&fed, addr);
    let opts = ServerOptions { halt_after_round: Some(2), ..ServerOptions::default() };
    match run_experiment(fed.clone(), listener, opts) {
        Err(Error::Aborted(msg)) => assert!(msg.contains("halted"), "{msg}"),
        other => panic!("expected a halt, got {other:?}"),
    }
    // The clients keep retrying; a new server on the same port picks up the
    // checkpoint and finishes the experiment.
    let listener = TcpListener::bind(addr).unwrap();
    let opts = ServerOptions { resume: true, ..ServerOptions::default() };
    let resumed = run_experiment(fed, listener, opts).unwrap();
    join_all(clients);

    assert!(resumed.is_complete());
    let rounds: Vec<u64> = resumed.rounds.iter().map(|r| r.round).collect();
    assert_eq!(rounds, vec![3, 4]);
    let bits = |r: &fedpoc::metrics::ExperimentReport| {
        r.final_global.as_ref().unwrap().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(bits(&resumed), bits(&reference));
    assert_eq!(resumed.final_scores, reference.final_scores);
}
